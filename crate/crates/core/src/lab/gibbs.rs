use super::policy::logsumexp;
use super::LabError;

/// `p*(x) ∝ p₀(x)·exp(U(x)/η)`, computed in log space with a max shift.
pub fn gibbs_optimum(p0: &[f64], u: &[f64], eta: f64) -> Result<Vec<f64>, LabError> {
    check_support(p0, u)?;
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(LabError::InvalidConfig(format!("eta {eta}")));
    }
    if p0.iter().any(|&p| !(p > 0.0)) {
        return Err(LabError::SupportMismatch("p0 must be strictly positive".into()));
    }
    let logw: Vec<f64> = p0.iter().zip(u).map(|(p, v)| p.ln() + v / eta).collect();
    let lse = logsumexp(&logw);
    if !lse.is_finite() {
        return Err(LabError::NumericalOverflow);
    }
    let out: Vec<f64> = logw.iter().map(|w| (w - lse).exp()).collect();
    if out.iter().any(|p| !p.is_finite()) {
        return Err(LabError::NumericalOverflow);
    }
    Ok(out)
}

/// `E_p[−U] + η·KL(p‖p₀)`.
pub fn kl_objective(p: &[f64], p0: &[f64], u: &[f64], eta: f64) -> Result<f64, LabError> {
    check_support(p0, u)?;
    if p.len() != p0.len() {
        return Err(LabError::SupportMismatch(format!("{} vs {} outcomes", p.len(), p0.len())));
    }
    let mut total = 0.0;
    for ((&pi, &qi), &ui) in p.iter().zip(p0).zip(u) {
        if pi < 0.0 {
            return Err(LabError::SupportMismatch("negative probability".into()));
        }
        if pi == 0.0 {
            continue;
        }
        if qi <= 0.0 {
            return Err(LabError::SupportMismatch("p is not absolutely continuous w.r.t. p0".into()));
        }
        total += pi * (-ui) + eta * pi * (pi / qi).ln();
    }
    Ok(total)
}

pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, LabError> {
    let zeros = vec![0.0; p.len()];
    kl_objective(p, q, &zeros, 1.0)
}

/// Closed-form minimum value `−η log Σ p₀ exp(U/η)`.
pub fn gibbs_min_value(p0: &[f64], u: &[f64], eta: f64) -> Result<f64, LabError> {
    check_support(p0, u)?;
    let logw: Vec<f64> = p0.iter().zip(u).map(|(p, v)| p.ln() + v / eta).collect();
    Ok(-eta * logsumexp(&logw))
}

/// Minimizes the objective over `(x, 1 − x)` on `points` evenly spaced
/// values of `x` in `[0, 1]`; returns the best point and its value.
pub fn grid_minimize_binary(p0: &[f64], u: &[f64], eta: f64, points: usize) -> Result<(Vec<f64>, f64), LabError> {
    if p0.len() != 2 {
        return Err(LabError::SupportMismatch("grid minimizer needs support size 2".into()));
    }
    let mut best = (vec![0.0, 1.0], f64::INFINITY);
    for i in 0..points {
        let x = i as f64 / (points - 1) as f64;
        let p = [x, 1.0 - x];
        let v = kl_objective(&p, p0, u, eta)?;
        if v < best.1 {
            best = (p.to_vec(), v);
        }
    }
    Ok(best)
}

fn check_support(p0: &[f64], u: &[f64]) -> Result<(), LabError> {
    if p0.is_empty() || p0.len() != u.len() {
        return Err(LabError::SupportMismatch(format!(
            "{} probabilities for {} values",
            p0.len(),
            u.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gibbs_examples() {
        let p0 = [0.2, 0.3, 0.5];
        let same = gibbs_optimum(&p0, &[4.0, 4.0, 4.0], 0.7).unwrap();
        for (a, b) in same.iter().zip(p0) {
            assert!((a - b).abs() < 1e-15);
        }
        let p = gibbs_optimum(&[0.5, 0.5], &[3f64.ln(), 0.0], 1.0).unwrap();
        assert!((p[0] - 0.75).abs() < 1e-15 && (p[1] - 0.25).abs() < 1e-15);
        let (grid, _) = grid_minimize_binary(&[0.5, 0.5], &[3f64.ln(), 0.0], 1.0, 10_001).unwrap();
        assert!((grid[0] - 0.75).abs() < 1e-12);

        let wide = gibbs_optimum(&p0, &[1.0, -2.0, 0.5], 1e6).unwrap();
        let tv: f64 = wide.iter().zip(p0).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
        assert!(tv < 1e-5);

        let huge = gibbs_optimum(&[0.5, 0.5], &[1e5, 0.0], 1e-3).unwrap();
        assert_eq!(huge, vec![1.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let p0 = [0.25, 0.75];
        assert_eq!(kl_objective(&p0, &p0, &[0.0, 0.0], 2.0).unwrap(), 0.0);
        assert!(kl_divergence(&[0.5, 0.5], &p0).unwrap() > 0.0);
        assert!(matches!(
            kl_objective(&[1.0], &p0, &[0.0, 0.0], 1.0),
            Err(LabError::SupportMismatch(_))
        ));
        assert!(matches!(
            kl_objective(&[0.5, 0.5], &[1.0, 0.0], &[0.0, 0.0], 1.0),
            Err(LabError::SupportMismatch(_))
        ));
    }

    #[test]
    fn optimum_value_matches_closed_form() {
        let p0 = [0.1, 0.6, 0.3];
        let u = [1.0, -0.5, 2.0];
        let p = gibbs_optimum(&p0, &u, 0.8).unwrap();
        let v = kl_objective(&p, &p0, &u, 0.8).unwrap();
        assert!((v - gibbs_min_value(&p0, &u, 0.8).unwrap()).abs() < 1e-12);
    }
}
