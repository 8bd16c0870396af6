//! Batch property checks over seeded random instances, shared by the CLI
//! probes.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::chain::{stopping_time_sim, submartingale_probe, StoppingReport};
use super::gibbs::{gibbs_min_value, gibbs_optimum, grid_minimize_binary, kl_objective};
use super::objectives::{finite_diff_gradient, max_relative_error, train_sdpo, train_sft, Objective, TrainConfig, TrainOutcome};
use super::policy::{PreferencePair, Segment, ToyPolicy, ToyTrajectory};
use super::random::{
    condition_ii_chain, random_competitor, random_distribution, random_pair, random_policy, random_trajectory, violating_chain,
};
use super::{LabError, SdpoInstance, SftInstance};

pub const GRAD_REL_TOL: f64 = 1e-5;
pub const GRAD_ABS_TOL: f64 = 1e-6;

fn instance_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn contexts(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("c{i}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub fd_step: f64,
    pub max_rel_error_sft_loss: f64,
    pub max_rel_error_sdpo_loss: f64,
    pub pass: bool,
}

/// Compares analytic gradients of `sft_loss` and `sdpo_loss` with central
/// differences on random policies.
pub fn grad_check(seed: u64, instances: usize, fd_step: f64) -> Result<GradCheckReport, LabError> {
    let floor = GRAD_ABS_TOL / GRAD_REL_TOL;
    let (mut worst_sft, mut worst_sdpo) = (0.0f64, 0.0f64);
    for i in 0..instances {
        let mut rng = instance_rng(seed, i as u64);
        let k = rng.random_range(2..=5);
        let ctx = contexts(rng.random_range(2..=5));
        let phi = random_policy(&mut rng, k, &ctx, 2.0);
        let phi0 = random_policy(&mut rng, k, &ctx, 2.0);

        let h = rng.random_range(0..=3);
        let traj = random_trajectory(&mut rng, &phi, &ctx[0], h);
        let obj = Objective::SftLoss(&traj);
        let fd = finite_diff_gradient(|p| obj.value(p), &phi, fd_step)?;
        worst_sft = worst_sft.max(max_relative_error(&obj.gradient(&phi)?, &fd, floor));

        let n = rng.random_range(1..=4);
        let pairs: Vec<PreferencePair> = (0..n).map(|_| random_pair(&mut rng, &phi, &ctx[0], 3)).collect();
        let eta = rng.random_range(0.2..=2.0);
        let obj = Objective::Sdpo {
            reference: &phi0,
            pairs: &pairs,
            eta,
        };
        let fd = finite_diff_gradient(|p| obj.value(p), &phi, fd_step)?;
        worst_sdpo = worst_sdpo.max(max_relative_error(&obj.gradient(&phi)?, &fd, floor));
    }
    Ok(GradCheckReport {
        seed,
        instances,
        fd_step,
        max_rel_error_sft_loss: worst_sft,
        max_rel_error_sdpo_loss: worst_sdpo,
        pass: worst_sft < GRAD_REL_TOL && worst_sdpo < GRAD_REL_TOL,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GibbsCheckReport {
    pub seed: u64,
    pub instances: usize,
    pub competitors_per_instance: usize,
    /// Smallest `J(q) − J(p*)` over all competitors; negative means a
    /// competitor beat the closed form.
    pub min_competitor_gap: f64,
    pub max_closed_form_error: f64,
    pub grid_points: usize,
    pub max_grid_gap: f64,
    pub pass: bool,
}

/// Checks the closed-form optimum against random competitors and, on
/// binary instances, against a grid minimizer.
pub fn gibbs_check(seed: u64, instances: usize, competitors: usize, grid_points: usize) -> Result<GibbsCheckReport, LabError> {
    let mut min_gap = f64::INFINITY;
    let mut max_cf = 0.0f64;
    let mut max_grid = 0.0f64;
    for i in 0..instances {
        let mut rng = instance_rng(seed, i as u64);
        let n = rng.random_range(2..=8);
        let p0 = random_distribution(&mut rng, n);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..=3.0)).collect();
        let eta = rng.random_range(0.1..=3.0);
        let p = gibbs_optimum(&p0, &u, eta)?;
        let best = kl_objective(&p, &p0, &u, eta)?;
        max_cf = max_cf.max((best - gibbs_min_value(&p0, &u, eta)?).abs());
        for _ in 0..competitors {
            let q = random_competitor(&mut rng, n);
            min_gap = min_gap.min(kl_objective(&q, &p0, &u, eta)? - best);
        }

        let b0 = random_distribution(&mut rng, 2);
        let bu = [rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0)];
        let (_, grid_val) = grid_minimize_binary(&b0, &bu, eta, grid_points)?;
        max_grid = max_grid.max((grid_val - gibbs_min_value(&b0, &bu, eta)?).abs());
    }
    Ok(GibbsCheckReport {
        seed,
        instances,
        competitors_per_instance: competitors,
        min_competitor_gap: min_gap,
        max_closed_form_error: max_cf,
        grid_points,
        max_grid_gap: max_grid,
        pass: min_gap >= -1e-12 && max_cf < 1e-9 && max_grid < 1e-6,
    })
}

/// Deterministic SFT instance whose trajectories use one target per
/// context, so the objective can be driven towards zero.
pub fn fixture_sft_instance(seed: u64) -> SftInstance {
    let mut rng = instance_rng(seed, 0);
    let k = 4;
    let ctx = contexts(6);
    let policy = ToyPolicy::uniform(super::random::vocab(k).iter().map(String::as_str), ctx.iter().map(String::as_str));
    let target: BTreeMap<&str, String> = ctx
        .iter()
        .map(|c| (c.as_str(), policy.vocab[rng.random_range(0..k)].clone()))
        .collect();
    let seg = |c: &str| Segment::new(c, target[c].clone());
    let dataset = (0..8)
        .map(|_| {
            let h = rng.random_range(0..=3);
            let mut plannings = vec![seg(&ctx[0])];
            let mut actions = Vec::new();
            for _ in 0..h {
                actions.push(seg(&ctx[rng.random_range(1..ctx.len())]));
                plannings.push(seg(&ctx[rng.random_range(1..ctx.len())]));
            }
            ToyTrajectory { plannings, actions }
        })
        .collect();
    SftInstance {
        policy,
        dataset,
        config: TrainConfig::default(),
    }
}

/// Deterministic preference instance: winners follow one symbol per
/// context, losers a different one.
pub fn fixture_sdpo_instance(seed: u64) -> SdpoInstance {
    let mut rng = instance_rng(seed, 1);
    let k = 4;
    let ctx = contexts(6);
    let reference = random_policy(&mut rng, k, &ctx, 0.5);
    let good: BTreeMap<&str, usize> = ctx.iter().map(|c| (c.as_str(), rng.random_range(0..k))).collect();
    let traj = |rng: &mut ChaCha8Rng, h: usize, wrong: bool| {
        let sym = |c: &str| {
            let g = good[c];
            reference.vocab[if wrong { (g + 1) % k } else { g }].clone()
        };
        let mut plannings = vec![Segment::new(&ctx[0], sym(&ctx[0]))];
        let mut actions = Vec::new();
        for _ in 0..h {
            let a = &ctx[rng.random_range(1..ctx.len())];
            actions.push(Segment::new(a, sym(a)));
            let t = &ctx[rng.random_range(1..ctx.len())];
            plannings.push(Segment::new(t, sym(t)));
        }
        ToyTrajectory { plannings, actions }
    };
    let pairs = (0..8)
        .map(|_| {
            let hw = rng.random_range(1..=3);
            let hl = rng.random_range(1..=3);
            let winner = traj(&mut rng, hw, false);
            let loser = traj(&mut rng, hl, true);
            PreferencePair {
                s1: ctx[0].clone(),
                winner,
                loser,
            }
        })
        .collect();
    SdpoInstance {
        reference,
        pairs,
        config: TrainConfig::default(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub trace: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub strictly_decreasing_first_10: bool,
    pub final_below_half: bool,
    pub pass: bool,
}

fn train_report(seed: u64, config: TrainConfig, out: TrainOutcome) -> TrainReport {
    let trace = out.trace;
    let head = &trace[..trace.len().min(11)];
    let decreasing = head.len() == 11 && head.windows(2).all(|w| w[1] < w[0]);
    let (initial, last) = (trace[0], *trace.last().expect("trace has the initial value"));
    let below = last < 0.5 * initial;
    TrainReport {
        seed,
        config,
        initial_loss: initial,
        final_loss: last,
        strictly_decreasing_first_10: decreasing,
        final_below_half: below,
        pass: decreasing && below,
        trace,
    }
}

pub fn run_sft_instance(seed: u64, inst: &SftInstance) -> Result<TrainReport, LabError> {
    Ok(train_report(
        seed,
        inst.config,
        train_sft(&inst.policy, &inst.dataset, &inst.config)?,
    ))
}

pub fn run_sdpo_instance(seed: u64, inst: &SdpoInstance) -> Result<TrainReport, LabError> {
    Ok(train_report(
        seed,
        inst.config,
        train_sdpo(&inst.reference, &inst.pairs, &inst.config)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainProbeSummary {
    pub instance: usize,
    pub kl_dominance: bool,
    pub min_exact: f64,
    pub negative_states: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmartingaleReport {
    pub seed: u64,
    pub trials: usize,
    pub satisfying: Vec<ChainProbeSummary>,
    pub violating: Vec<ChainProbeSummary>,
    pub all_satisfying_nonnegative: bool,
    pub violations_detected: bool,
    pub pass: bool,
}

/// Probes `satisfying` KL-dominant chains (expected drift ≥ 0 everywhere)
/// and `violating` chains (some state expected to drift down).
pub fn submartingale_suite(seed: u64, satisfying: usize, violating: usize, trials: usize) -> Result<SubmartingaleReport, LabError> {
    let run = |i: usize, bad: bool| -> Result<ChainProbeSummary, LabError> {
        let mut rng = instance_rng(seed, (i as u64) << 1 | bad as u64);
        let n = rng.random_range(2..=5);
        let k = rng.random_range(2..=4);
        let chain = if bad {
            violating_chain(&mut rng, n, k)
        } else {
            condition_ii_chain(&mut rng, n, k)
        };
        let report = submartingale_probe(&chain, trials, seed.wrapping_add(i as u64))?;
        Ok(ChainProbeSummary {
            instance: i,
            kl_dominance: chain.satisfies_kl_dominance(1e-12)?,
            min_exact: report.min_exact,
            negative_states: report.negative_states().len(),
        })
    };
    let good = (0..satisfying).map(|i| run(i, false)).collect::<Result<Vec<_>, _>>()?;
    let bad = (0..violating).map(|i| run(i, true)).collect::<Result<Vec<_>, _>>()?;
    let nonneg = good.iter().all(|s| s.min_exact >= 0.0);
    let detected = bad.iter().all(|s| s.negative_states > 0);
    Ok(SubmartingaleReport {
        seed,
        trials,
        all_satisfying_nonnegative: nonneg,
        violations_detected: detected,
        pass: nonneg && detected,
        satisfying: good,
        violating: bad,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoppingSuiteReport {
    pub seed: u64,
    pub identical_verifiers: bool,
    pub runs: Vec<StoppingReport>,
    pub total_cap_hits: usize,
    pub pass: bool,
}

/// Stopping-time simulations on random KL-dominant chains. With
/// `identical`, the tuned verifier is replaced by the reference.
pub fn stopping_suite(
    seed: u64,
    instances: usize,
    episodes: usize,
    cap: usize,
    epsilon: f64,
    identical: bool,
) -> Result<StoppingSuiteReport, LabError> {
    let runs = (0..instances)
        .map(|i| {
            let mut rng = instance_rng(seed, i as u64);
            let n = rng.random_range(2..=5);
            let k = rng.random_range(2..=4);
            let mut chain = condition_ii_chain(&mut rng, n, k);
            if identical {
                chain.tuned = chain.reference.clone();
            }
            stopping_time_sim(&chain, epsilon, episodes, cap, seed.wrapping_add(i as u64))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let total = runs.iter().map(|r| r.cap_hits).sum();
    Ok(StoppingSuiteReport {
        seed,
        identical_verifiers: identical,
        pass: total == 0,
        total_cap_hits: total,
        runs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_check_passes_and_is_deterministic() {
        let r = grad_check(3, 10, 1e-5).unwrap();
        assert!(r.pass, "{r:?}");
        assert_eq!(r, grad_check(3, 10, 1e-5).unwrap());
    }

    #[test]
    fn gibbs_check_passes() {
        let r = gibbs_check(5, 5, 50, 10_001).unwrap();
        assert!(r.pass, "{r:?}");
    }

    #[test]
    fn fixtures_train_down() {
        let s = run_sft_instance(0, &fixture_sft_instance(0)).unwrap();
        assert!(s.pass, "{s:?}");
        let d = run_sdpo_instance(0, &fixture_sdpo_instance(0)).unwrap();
        assert!(d.pass, "{d:?}");
        assert!((d.initial_loss - 8.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn suites_report() {
        let s = submartingale_suite(1, 3, 2, 200).unwrap();
        assert!(s.pass, "{s:?}");
        let st = stopping_suite(1, 2, 500, 200, 0.5, true).unwrap();
        assert!(st.runs.iter().all(|r| r.histogram.keys().eq([1].iter())));
    }
}
