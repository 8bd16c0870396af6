use serde::{Deserialize, Serialize};

use super::policy::{Gradient, PreferencePair, Segment, ToyPolicy, ToyTrajectory};
use super::LabError;
use crate::verifier::{log_sigmoid, sigmoid, StepScore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub eta: f64,
    pub iterations: usize,
    pub fd_step: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.5,
            eta: 1.0,
            iterations: 100,
            fd_step: 1e-5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), LabError> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(LabError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(LabError::InvalidConfig(format!("eta {}", self.eta)));
        }
        if !(self.fd_step.is_finite() && self.fd_step > 0.0) {
            return Err(LabError::InvalidConfig(format!("fd_step {}", self.fd_step)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub policy: ToyPolicy,
    /// Objective before the first update, then after each update.
    pub trace: Vec<f64>,
}

fn neg_log_lik(policy: &ToyPolicy, seg: &Segment) -> Result<f64, LabError> {
    Ok(-policy.log_prob(&seg.context, &seg.symbol)?)
}

/// Adds `scale · (p(·|ctx) − e_y)`, the gradient of `−log p(y|ctx)`.
fn add_nll_grad(policy: &ToyPolicy, seg: &Segment, scale: f64, grad: &mut Gradient) -> Result<(), LabError> {
    let probs = policy.probs(&seg.context)?;
    let y = policy.symbol_index(&seg.symbol)?;
    let row = grad.row_mut(&seg.context)?;
    for (i, p) in probs.iter().enumerate() {
        row[i] += scale * (p - if i == y { 1.0 } else { 0.0 });
    }
    Ok(())
}

/// `−Σ log p(t_h|s_h) − Σ log p(a_h|t_h)`, unweighted.
pub fn sft_loss(policy: &ToyPolicy, traj: &ToyTrajectory) -> Result<f64, LabError> {
    traj.validate()?;
    traj.segments().map(|s| neg_log_lik(policy, s)).sum()
}

pub fn sft_loss_gradient(policy: &ToyPolicy, traj: &ToyTrajectory) -> Result<Gradient, LabError> {
    traj.validate()?;
    let mut g = policy.zero_gradient();
    for s in traj.segments() {
        add_nll_grad(policy, s, 1.0, &mut g)?;
    }
    Ok(g)
}

/// Mean over trajectories of `sft_loss / (H + 1)`.
pub fn sft_objective(policy: &ToyPolicy, dataset: &[ToyTrajectory]) -> Result<f64, LabError> {
    if dataset.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let mut total = 0.0;
    for t in dataset {
        total += sft_loss(policy, t)? / (t.horizon() + 1) as f64;
    }
    Ok(total / dataset.len() as f64)
}

pub fn sft_objective_gradient(policy: &ToyPolicy, dataset: &[ToyTrajectory]) -> Result<Gradient, LabError> {
    if dataset.is_empty() {
        return Err(LabError::EmptyDataset);
    }
    let mut g = policy.zero_gradient();
    let n = dataset.len() as f64;
    for t in dataset {
        t.validate()?;
        let w = 1.0 / ((t.horizon() + 1) as f64 * n);
        for s in t.segments() {
            add_nll_grad(policy, s, w, &mut g)?;
        }
    }
    Ok(g)
}

fn log_ratio_sum(phi: &ToyPolicy, phi0: &ToyPolicy, traj: &ToyTrajectory) -> Result<f64, LabError> {
    let mut sum = 0.0;
    for s in traj.segments() {
        sum += phi.log_prob(&s.context, &s.symbol)? - phi0.log_prob(&s.context, &s.symbol)?;
    }
    Ok(sum)
}

/// Preference margin `η · (Σ_w log-ratios − Σ_l log-ratios)`.
pub fn pair_margin(phi: &ToyPolicy, phi0: &ToyPolicy, pair: &PreferencePair, eta: f64) -> Result<f64, LabError> {
    pair.validate()?;
    Ok(eta * (log_ratio_sum(phi, phi0, &pair.winner)? - log_ratio_sum(phi, phi0, &pair.loser)?))
}

/// `−Σ_pairs log σ(margin)`.
pub fn sdpo_loss(phi: &ToyPolicy, phi0: &ToyPolicy, pairs: &[PreferencePair], eta: f64) -> Result<f64, LabError> {
    let mut total = 0.0;
    for p in pairs {
        total -= log_sigmoid(pair_margin(phi, phi0, p, eta)?);
    }
    Ok(total)
}

pub fn sdpo_gradient(phi: &ToyPolicy, phi0: &ToyPolicy, pairs: &[PreferencePair], eta: f64) -> Result<Gradient, LabError> {
    let mut g = phi.zero_gradient();
    for p in pairs {
        let m = pair_margin(phi, phi0, p, eta)?;
        // dL/dm = −σ(−m); dm/dφ = η Σ_w (e_y − p) − η Σ_l (e_y − p)
        // and (e_y − p) is minus the NLL gradient.
        let dl_dm = -sigmoid(-m);
        for s in p.winner.segments() {
            add_nll_grad(phi, s, -dl_dm * eta, &mut g)?;
        }
        for s in p.loser.segments() {
            add_nll_grad(phi, s, dl_dm * eta, &mut g)?;
        }
    }
    Ok(g)
}

/// `η · Σ log-ratios + q` on a toy trajectory.
pub fn toy_reward(phi: &ToyPolicy, phi0: &ToyPolicy, traj: &ToyTrajectory, eta: f64, q: f64) -> Result<f64, LabError> {
    traj.validate()?;
    Ok(eta * log_ratio_sum(phi, phi0, traj)? + q)
}

/// Per-step verifier scores of a toy trajectory: `H` tool steps and the
/// final answer.
pub fn toy_step_scores(phi: &ToyPolicy, phi0: &ToyPolicy, traj: &ToyTrajectory) -> Result<Vec<StepScore>, LabError> {
    traj.validate()?;
    let lp = |p: &ToyPolicy, s: &Segment| p.log_prob(&s.context, &s.symbol);
    let mut out = Vec::with_capacity(traj.plannings.len());
    for (t, a) in traj.plannings.iter().zip(&traj.actions) {
        out.push(StepScore::step(lp(phi, t)?, lp(phi0, t)?, lp(phi, a)?, lp(phi0, a)?));
    }
    let last = traj.plannings.last().expect("validated");
    out.push(StepScore::final_answer(lp(phi, last)?, lp(phi0, last)?));
    Ok(out)
}

/// Losses with an analytic gradient.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    SftLoss(&'a ToyTrajectory),
    Sft(&'a [ToyTrajectory]),
    Sdpo {
        reference: &'a ToyPolicy,
        pairs: &'a [PreferencePair],
        eta: f64,
    },
}

impl Objective<'_> {
    pub fn value(&self, policy: &ToyPolicy) -> Result<f64, LabError> {
        match *self {
            Objective::SftLoss(t) => sft_loss(policy, t),
            Objective::Sft(d) => sft_objective(policy, d),
            Objective::Sdpo { reference, pairs, eta } => sdpo_loss(policy, reference, pairs, eta),
        }
    }

    pub fn gradient(&self, policy: &ToyPolicy) -> Result<Gradient, LabError> {
        match *self {
            Objective::SftLoss(t) => sft_loss_gradient(policy, t),
            Objective::Sft(d) => sft_objective_gradient(policy, d),
            Objective::Sdpo { reference, pairs, eta } => sdpo_gradient(policy, reference, pairs, eta),
        }
    }
}

pub fn analytic_gradient(objective: &Objective<'_>, policy: &ToyPolicy) -> Result<Gradient, LabError> {
    objective.gradient(policy)
}

/// Central differences `(f(θ + h e_i) − f(θ − h e_i)) / 2h` over every logit.
pub fn finite_diff_gradient<F>(f: F, policy: &ToyPolicy, step: f64) -> Result<Gradient, LabError>
where
    F: Fn(&ToyPolicy) -> Result<f64, LabError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(LabError::InvalidConfig(format!("finite-difference step {step}")));
    }
    let mut g = policy.zero_gradient();
    let mut probe = policy.clone();
    for (ctx, row) in &policy.logits {
        for (i, &x) in row.iter().enumerate() {
            probe.logits.get_mut(ctx).unwrap()[i] = x + step;
            let up = f(&probe)?;
            probe.logits.get_mut(ctx).unwrap()[i] = x - step;
            let down = f(&probe)?;
            probe.logits.get_mut(ctx).unwrap()[i] = x;
            g.rows.get_mut(ctx).unwrap()[i] = (up - down) / (2.0 * step);
        }
    }
    Ok(g)
}

/// Largest `|a − f| / max(|a|, |f|, floor)` over all entries. With
/// `floor = abs_tol / rel_tol` this is below `rel_tol` exactly when every
/// entry passes the relative test or the absolute one.
pub fn max_relative_error(analytic: &Gradient, numeric: &Gradient, floor: f64) -> f64 {
    analytic
        .entries()
        .zip(numeric.entries())
        .map(|((_, _, a), (_, _, f))| (a - f).abs() / a.abs().max(f.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn descend(mut policy: ToyPolicy, objective: Objective<'_>, cfg: &TrainConfig) -> Result<TrainOutcome, LabError> {
    cfg.validate()?;
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let first = objective.value(&policy)?;
    if !first.is_finite() {
        return Err(LabError::DivergenceDetected { iteration: 0 });
    }
    trace.push(first);
    for it in 1..=cfg.iterations {
        let g = objective.gradient(&policy)?;
        policy.step(&g, -cfg.learning_rate);
        let v = objective.value(&policy)?;
        if !v.is_finite() || policy.logits.values().flatten().any(|z| !z.is_finite()) {
            return Err(LabError::DivergenceDetected { iteration: it });
        }
        trace.push(v);
    }
    Ok(TrainOutcome { policy, trace })
}

/// Plain gradient descent on the dataset objective: `θ ← θ − α ∇`.
pub fn train_sft(policy: &ToyPolicy, dataset: &[ToyTrajectory], cfg: &TrainConfig) -> Result<TrainOutcome, LabError> {
    descend(policy.clone(), Objective::Sft(dataset), cfg)
}

/// Plain gradient descent on the multi-step DPO loss starting from `φ₀`.
pub fn train_sdpo(phi0: &ToyPolicy, pairs: &[PreferencePair], cfg: &TrainConfig) -> Result<TrainOutcome, LabError> {
    descend(
        phi0.clone(),
        Objective::Sdpo {
            reference: phi0,
            pairs,
            eta: cfg.eta,
        },
        cfg,
    )
}
