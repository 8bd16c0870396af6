use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LabError;

/// `log Σ exp(z)` with max-shift.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Tabular softmax policy: one logit row per context key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyPolicy {
    pub vocab: Vec<String>,
    pub logits: BTreeMap<String, Vec<f64>>,
}

impl ToyPolicy {
    pub fn new(vocab: Vec<String>, logits: BTreeMap<String, Vec<f64>>) -> Result<Self, LabError> {
        let p = Self { vocab, logits };
        p.validate()?;
        Ok(p)
    }

    pub fn uniform<S: Into<String>>(vocab: impl IntoIterator<Item = S>, contexts: impl IntoIterator<Item = S>) -> Self {
        let vocab: Vec<String> = vocab.into_iter().map(Into::into).collect();
        let n = vocab.len();
        let logits = contexts.into_iter().map(|c| (c.into(), vec![0.0; n])).collect();
        Self { vocab, logits }
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.vocab.is_empty() {
            return Err(LabError::ShapeMismatch("empty vocabulary".into()));
        }
        for (ctx, row) in &self.logits {
            if row.len() != self.vocab.len() {
                return Err(LabError::ShapeMismatch(format!(
                    "row `{ctx}` has {} logits for {} symbols",
                    row.len(),
                    self.vocab.len()
                )));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(LabError::ShapeMismatch(format!("row `{ctx}` has a non-finite logit")));
            }
        }
        Ok(())
    }

    pub fn symbol_index(&self, symbol: &str) -> Result<usize, LabError> {
        self.vocab
            .iter()
            .position(|s| s == symbol)
            .ok_or_else(|| LabError::UnknownSymbol(symbol.to_string()))
    }

    pub fn row(&self, context: &str) -> Result<&[f64], LabError> {
        self.logits
            .get(context)
            .map(Vec::as_slice)
            .ok_or_else(|| LabError::UnknownContext(context.to_string()))
    }

    pub fn log_probs(&self, context: &str) -> Result<Vec<f64>, LabError> {
        let row = self.row(context)?;
        let lse = logsumexp(row);
        Ok(row.iter().map(|z| z - lse).collect())
    }

    pub fn probs(&self, context: &str) -> Result<Vec<f64>, LabError> {
        Ok(self.log_probs(context)?.into_iter().map(f64::exp).collect())
    }

    pub fn log_prob(&self, context: &str, symbol: &str) -> Result<f64, LabError> {
        let i = self.symbol_index(symbol)?;
        Ok(self.log_probs(context)?[i])
    }

    pub fn zero_gradient(&self) -> Gradient {
        Gradient {
            rows: self.logits.iter().map(|(k, v)| (k.clone(), vec![0.0; v.len()])).collect(),
        }
    }

    /// `θ ← θ + scale · g`.
    pub fn step(&mut self, grad: &Gradient, scale: f64) {
        for (ctx, g) in &grad.rows {
            if let Some(row) = self.logits.get_mut(ctx) {
                for (z, d) in row.iter_mut().zip(g) {
                    *z += scale * d;
                }
            }
        }
    }
}

/// Table of partial derivatives with the same shape as a policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gradient {
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl Gradient {
    pub fn max_abs(&self) -> f64 {
        self.rows.values().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, usize, f64)> {
        self.rows
            .iter()
            .flat_map(|(k, v)| v.iter().enumerate().map(move |(i, x)| (k.as_str(), i, *x)))
    }

    pub(crate) fn row_mut(&mut self, ctx: &str) -> Result<&mut Vec<f64>, LabError> {
        self.rows.get_mut(ctx).ok_or_else(|| LabError::UnknownContext(ctx.to_string()))
    }
}

/// One `(context, target)` pair: `(s_h, t_h)` or `(t_h, a_h)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub context: String,
    pub symbol: String,
}

impl Segment {
    pub fn new(context: impl Into<String>, symbol: impl Into<String>) -> Self {
        Self {
            context: context.into(),
            symbol: symbol.into(),
        }
    }
}

/// `H + 1` planning segments and `H` action segments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub plannings: Vec<Segment>,
    pub actions: Vec<Segment>,
}

impl ToyTrajectory {
    pub fn new(plannings: Vec<Segment>, actions: Vec<Segment>) -> Result<Self, LabError> {
        let t = Self { plannings, actions };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if self.plannings.len() != self.actions.len() + 1 {
            return Err(LabError::ShapeMismatch(format!(
                "{} plannings for {} actions",
                self.plannings.len(),
                self.actions.len()
            )));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn s1(&self) -> &str {
        &self.plannings[0].context
    }

    pub fn segments(&self) -> impl Iterator<Item = &Segment> {
        self.plannings.iter().chain(&self.actions)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub s1: String,
    pub winner: ToyTrajectory,
    pub loser: ToyTrajectory,
}

impl PreferencePair {
    pub fn new(winner: ToyTrajectory, loser: ToyTrajectory) -> Result<Self, LabError> {
        let p = Self {
            s1: winner.s1().to_string(),
            winner,
            loser,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        self.winner.validate()?;
        self.loser.validate()?;
        if self.winner.s1() != self.s1 || self.loser.s1() != self.s1 {
            return Err(LabError::ShapeMismatch(format!("pair trajectories do not share s1 `{}`", self.s1)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-9);
        assert!((logsumexp(&[-1000.0, -1000.0]) - (-1000.0 + 2f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn lookups_fail_cleanly() {
        let p = ToyPolicy::uniform(["a", "b"], ["c"]);
        assert!(matches!(p.log_prob("x", "a"), Err(LabError::UnknownContext(_))));
        assert!(matches!(p.log_prob("c", "z"), Err(LabError::UnknownSymbol(_))));
        assert!((p.log_prob("c", "a").unwrap() + 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn trajectory_and_pair_shapes() {
        assert!(ToyTrajectory::new(vec![Segment::new("s", "a")], vec![Segment::new("a", "b")]).is_err());
        let w = ToyTrajectory::new(vec![Segment::new("s", "a")], vec![]).unwrap();
        let l = ToyTrajectory::new(vec![Segment::new("u", "a")], vec![]).unwrap();
        assert!(PreferencePair::new(w.clone(), l).is_err());
        assert!(PreferencePair::new(w.clone(), w).is_ok());
    }

    proptest! {
        #[test]
        fn rows_normalize(row in proptest::collection::vec(-30.0..30.0f64, 1..9)) {
            let vocab: Vec<String> = (0..row.len()).map(|i| format!("v{i}")).collect();
            let mut logits = BTreeMap::new();
            logits.insert("c".to_string(), row);
            let p = ToyPolicy::new(vocab, logits).unwrap();
            let probs = p.probs("c").unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(probs.iter().all(|&x| x > 0.0));
        }
    }
}
