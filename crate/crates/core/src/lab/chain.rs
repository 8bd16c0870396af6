//! Finite toy reasoning chains for the submartingale probe and the
//! stopping-time simulation.
//!
//! A chain has planning contexts (states) and, for every state `s` and
//! planning symbol `t`, an action context `s|t`. The reasoner samples
//! `t ~ R(·|s)` and `a ~ R(·|s|t)`; the next state comes from the transition
//! table, staying put when no transition is listed. The tuned and reference
//! verifiers score the same contexts.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::gibbs::kl_divergence;
use super::policy::ToyPolicy;
use super::LabError;

pub fn action_context(state: &str, planning: &str) -> String {
    format!("{state}|{planning}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub from: String,
    pub planning: String,
    pub action: String,
    pub to: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyChain {
    pub start: String,
    pub states: Vec<String>,
    /// Absorbing state whose verifier rows coincide, so every step taken
    /// there has ratio 0.
    #[serde(default)]
    pub halt: Option<String>,
    pub eta: f64,
    pub reasoner: ToyPolicy,
    pub tuned: ToyPolicy,
    pub reference: ToyPolicy,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

/// Index-based view used by the probes.
struct Compiled {
    k: usize,
    start: usize,
    /// `R(t|s)` per state.
    plan_probs: Vec<Vec<f64>>,
    /// `log V̂(t|s) − log V₀(t|s)`.
    plan_lr: Vec<Vec<f64>>,
    /// `R(a|s|t)` per state and planning.
    act_probs: Vec<Vec<Vec<f64>>>,
    act_lr: Vec<Vec<Vec<f64>>>,
    next: Vec<Vec<Vec<usize>>>,
}

fn sample(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

impl Compiled {
    fn step(&self, rng: &mut ChaCha8Rng, s: usize) -> (f64, usize) {
        let t = sample(rng, &self.plan_probs[s]);
        let a = sample(rng, &self.act_probs[s][t]);
        (self.plan_lr[s][t] + self.act_lr[s][t][a], self.next[s][t][a])
    }

    /// Unscaled `E[step_log_ratio | s]` by direct summation.
    fn exact_ratio(&self, s: usize) -> f64 {
        (0..self.k)
            .map(|t| {
                let act: f64 = (0..self.k).map(|a| self.act_probs[s][t][a] * self.act_lr[s][t][a]).sum();
                self.plan_probs[s][t] * (self.plan_lr[s][t] + act)
            })
            .sum()
    }
}

const SHARDS: u64 = 8;

fn shard_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn shard_sizes(total: usize) -> Vec<usize> {
    let n = SHARDS as usize;
    (0..n).map(|i| total / n + usize::from(i < total % n)).collect()
}

impl ToyChain {
    pub fn validate(&self) -> Result<(), LabError> {
        self.compile().map(|_| ())
    }

    fn compile(&self) -> Result<Compiled, LabError> {
        for p in [&self.reasoner, &self.tuned, &self.reference] {
            p.validate()?;
            if p.vocab != self.reasoner.vocab {
                return Err(LabError::ShapeMismatch("chain policies use different vocabularies".into()));
            }
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(LabError::InvalidConfig(format!("eta {}", self.eta)));
        }
        let index: HashMap<&str, usize> = self.states.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let find = |s: &str| index.get(s).copied().ok_or_else(|| LabError::UnknownContext(s.to_string()));
        let start = find(&self.start)?;
        if let Some(h) = &self.halt {
            find(h)?;
        }
        let vocab = &self.reasoner.vocab;
        let k = vocab.len();
        let lr = |ctx: &str| -> Result<Vec<f64>, LabError> {
            let t = self.tuned.log_probs(ctx)?;
            let r = self.reference.log_probs(ctx)?;
            Ok(t.iter().zip(&r).map(|(a, b)| a - b).collect())
        };
        let mut c = Compiled {
            k,
            start,
            plan_probs: Vec::new(),
            plan_lr: Vec::new(),
            act_probs: Vec::new(),
            act_lr: Vec::new(),
            next: Vec::new(),
        };
        for (si, s) in self.states.iter().enumerate() {
            c.plan_probs.push(self.reasoner.probs(s)?);
            c.plan_lr.push(lr(s)?);
            let mut ap = Vec::with_capacity(k);
            let mut al = Vec::with_capacity(k);
            for t in vocab {
                let ctx = action_context(s, t);
                ap.push(self.reasoner.probs(&ctx)?);
                al.push(lr(&ctx)?);
            }
            c.act_probs.push(ap);
            c.act_lr.push(al);
            c.next.push(vec![vec![si; k]; k]);
        }
        for tr in &self.transitions {
            let from = find(&tr.from)?;
            let to = find(&tr.to)?;
            let t = self.reasoner.symbol_index(&tr.planning)?;
            let a = self.reasoner.symbol_index(&tr.action)?;
            c.next[from][t][a] = to;
        }
        Ok(c)
    }

    /// Condition (ii): `KL(R‖V₀) ≥ KL(R‖V̂)` at every planning and action
    /// context, up to `tol`.
    pub fn satisfies_kl_dominance(&self, tol: f64) -> Result<bool, LabError> {
        for s in &self.states {
            let mut contexts = vec![s.clone()];
            contexts.extend(self.reasoner.vocab.iter().map(|t| action_context(s, t)));
            for ctx in contexts {
                let r = self.reasoner.probs(&ctx)?;
                let d0 = kl_divergence(&r, &self.reference.probs(&ctx)?)?;
                let d1 = kl_divergence(&r, &self.tuned.probs(&ctx)?)?;
                if d0 + tol < d1 {
                    return Ok(false);
                }
            }
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateProbe {
    pub state: String,
    /// Exact `E[Δr | s]` by summation over the finite vocabulary.
    pub exact: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub seed: u64,
    pub trials: usize,
    pub eta: f64,
    pub states: Vec<StateProbe>,
    pub min_exact: f64,
}

impl ProbeReport {
    pub fn negative_states(&self) -> Vec<&str> {
        self.states.iter().filter(|s| s.exact < 0.0).map(|s| s.state.as_str()).collect()
    }
}

/// Per-state `E[η · step_log_ratio | s]`, exact and Monte Carlo.
pub fn submartingale_probe(chain: &ToyChain, trials: usize, seed: u64) -> Result<ProbeReport, LabError> {
    if trials == 0 {
        return Err(LabError::InvalidConfig("trials must be at least 1".into()));
    }
    let c = chain.compile()?;
    let states = chain
        .states
        .iter()
        .enumerate()
        .map(|(si, name)| {
            let sums: Vec<(f64, f64)> = shard_sizes(trials)
                .into_par_iter()
                .enumerate()
                .map(|(shard, n)| {
                    let mut rng = shard_rng(seed, si as u64 * SHARDS + shard as u64);
                    let (mut s1, mut s2) = (0.0, 0.0);
                    for _ in 0..n {
                        let (raw, _) = c.step(&mut rng, si);
                        let d = chain.eta * raw;
                        s1 += d;
                        s2 += d * d;
                    }
                    (s1, s2)
                })
                .collect();
            let (s1, s2) = sums.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
            let n = trials as f64;
            let mean = s1 / n;
            let var = if trials > 1 {
                ((s2 - n * mean * mean) / (n - 1.0)).max(0.0)
            } else {
                0.0
            };
            StateProbe {
                state: name.clone(),
                exact: chain.eta * c.exact_ratio(si),
                mc_mean: mean,
                mc_stderr: (var / n).sqrt(),
            }
        })
        .collect::<Vec<_>>();
    let min_exact = states.iter().map(|s| s.exact).fold(f64::INFINITY, f64::min);
    Ok(ProbeReport {
        seed,
        trials,
        eta: chain.eta,
        states,
        min_exact,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingReport {
    pub seed: u64,
    pub episodes: usize,
    pub cap: usize,
    pub epsilon: f64,
    /// `H_τ → count`; capped episodes are counted at `cap`.
    pub histogram: BTreeMap<usize, usize>,
    pub cap_hits: usize,
    pub cap_hit_fraction: f64,
    pub mean_horizon: f64,
    pub max_horizon: usize,
}

/// Simulates the stopping rule `|step_log_ratio| < ε` on `episodes`
/// episodes from the chain's start state.
pub fn stopping_time_sim(chain: &ToyChain, epsilon: f64, episodes: usize, cap: usize, seed: u64) -> Result<StoppingReport, LabError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(LabError::InvalidConfig(format!("epsilon {epsilon}")));
    }
    simulate(chain, epsilon, episodes, cap, seed)
}

pub(crate) fn simulate(chain: &ToyChain, epsilon: f64, episodes: usize, cap: usize, seed: u64) -> Result<StoppingReport, LabError> {
    if episodes == 0 || cap == 0 {
        return Err(LabError::InvalidConfig("episodes and cap must be at least 1".into()));
    }
    let c = chain.compile()?;
    let horizons: Vec<usize> = shard_sizes(episodes)
        .into_par_iter()
        .enumerate()
        .flat_map_iter(|(shard, n)| {
            let mut rng = shard_rng(seed, shard as u64);
            let c = &c;
            (0..n)
                .map(move |_| {
                    let mut s = c.start;
                    let mut h = 0;
                    loop {
                        let (raw, next) = c.step(&mut rng, s);
                        h += 1;
                        if raw.abs() < epsilon || h == cap {
                            return h;
                        }
                        s = next;
                    }
                })
                .collect::<Vec<_>>()
        })
        .collect();
    let mut histogram = BTreeMap::new();
    let mut cap_hits = 0;
    for &h in &horizons {
        *histogram.entry(h).or_insert(0) += 1;
        if h == cap {
            cap_hits += 1;
        }
    }
    Ok(StoppingReport {
        seed,
        episodes,
        cap,
        epsilon,
        cap_hit_fraction: cap_hits as f64 / episodes as f64,
        mean_horizon: horizons.iter().sum::<usize>() as f64 / episodes as f64,
        max_horizon: horizons.iter().copied().max().unwrap_or(0),
        histogram,
        cap_hits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lab::random::{condition_ii_chain, violating_chain};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn identical_models_have_zero_drift_and_stop_immediately() {
        let mut chain = condition_ii_chain(&mut rng(1), 3, 3);
        chain.tuned = chain.reference.clone();
        let p = submartingale_probe(&chain, 100, 5).unwrap();
        assert!(p.states.iter().all(|s| s.exact == 0.0 && s.mc_mean == 0.0));
        let sim = stopping_time_sim(&chain, 0.5, 500, 50, 9).unwrap();
        assert_eq!(sim.histogram.get(&1), Some(&500));
    }

    #[test]
    fn kl_dominance_gives_nonnegative_drift() {
        for seed in 0..5 {
            let chain = condition_ii_chain(&mut rng(seed), 4, 3);
            assert!(chain.satisfies_kl_dominance(1e-12).unwrap());
            let p = submartingale_probe(&chain, 2000, seed).unwrap();
            assert!(p.min_exact >= -1e-12, "{p:?}");
            for s in &p.states {
                assert!((s.mc_mean - s.exact).abs() < 6.0 * s.mc_stderr + 1e-9, "{s:?}");
            }
        }
    }

    #[test]
    fn violating_instances_have_negative_states() {
        let chain = violating_chain(&mut rng(3), 4, 3);
        assert!(!chain.satisfies_kl_dominance(0.0).unwrap());
        let p = submartingale_probe(&chain, 10, 1).unwrap();
        assert!(!p.negative_states().is_empty());
    }

    #[test]
    fn zero_epsilon_never_stops_before_cap() {
        let chain = condition_ii_chain(&mut rng(2), 3, 3);
        // halt rows give exact zeros, which |0| < 0 still rejects
        let sim = simulate(&chain, 0.0, 50, 30, 4).unwrap();
        assert_eq!(sim.cap_hits, 50);
        assert!(stopping_time_sim(&chain, 0.0, 50, 30, 4).is_err());
    }

    #[test]
    fn simulation_is_deterministic() {
        let chain = condition_ii_chain(&mut rng(7), 4, 3);
        let a = stopping_time_sim(&chain, 0.5, 1000, 200, 11).unwrap();
        let b = stopping_time_sim(&chain, 0.5, 1000, 200, 11).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.histogram.values().sum::<usize>(), 1000);
    }
}
