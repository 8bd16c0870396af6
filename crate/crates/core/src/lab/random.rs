//! Seeded generators for randomized toy instances.

use std::collections::BTreeMap;

use rand::Rng;

use super::chain::{action_context, ToyChain, Transition};
use super::policy::{PreferencePair, Segment, ToyPolicy, ToyTrajectory};

pub fn vocab(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("v{i}")).collect()
}

/// Logits drawn uniformly from `[−scale, scale]`.
pub fn random_policy<R: Rng>(rng: &mut R, vocab_size: usize, contexts: &[String], scale: f64) -> ToyPolicy {
    let logits = contexts
        .iter()
        .map(|c| (c.clone(), (0..vocab_size).map(|_| rng.random_range(-scale..=scale)).collect()))
        .collect();
    ToyPolicy {
        vocab: vocab(vocab_size),
        logits,
    }
}

/// Trajectory starting at `s1` with contexts and targets drawn from the
/// policy's rows and vocabulary.
pub fn random_trajectory<R: Rng>(rng: &mut R, policy: &ToyPolicy, s1: &str, horizon: usize) -> ToyTrajectory {
    let contexts: Vec<&String> = policy.logits.keys().collect();
    let pick_ctx = |rng: &mut R| contexts[rng.random_range(0..contexts.len())].clone();
    let sym = |rng: &mut R| policy.vocab[rng.random_range(0..policy.vocab.len())].clone();
    let mut plannings = vec![Segment::new(s1, sym(rng))];
    let mut actions = Vec::new();
    for _ in 0..horizon {
        let c = pick_ctx(rng);
        actions.push(Segment::new(c, sym(rng)));
        let c = pick_ctx(rng);
        plannings.push(Segment::new(c, sym(rng)));
    }
    ToyTrajectory { plannings, actions }
}

pub fn random_pair<R: Rng>(rng: &mut R, policy: &ToyPolicy, s1: &str, max_horizon: usize) -> PreferencePair {
    let hw = rng.random_range(0..=max_horizon);
    let hl = rng.random_range(0..=max_horizon);
    let winner = random_trajectory(rng, policy, s1, hw);
    let loser = random_trajectory(rng, policy, s1, hl);
    PreferencePair {
        s1: s1.to_string(),
        winner,
        loser,
    }
}

fn chain_skeleton<R: Rng>(rng: &mut R, n_states: usize, k: usize) -> (Vec<String>, Vec<String>, ToyPolicy, ToyPolicy, Vec<Transition>) {
    let mut states: Vec<String> = (0..n_states).map(|i| format!("s{i}")).collect();
    states.push("halt".into());
    let v = vocab(k);
    let mut contexts = Vec::new();
    for s in &states {
        contexts.push(s.clone());
        contexts.extend(v.iter().map(|t| action_context(s, t)));
    }
    let reasoner = random_policy(rng, k, &contexts, 2.0);
    let reference = random_policy(rng, k, &contexts, 2.0);
    let mut transitions = Vec::new();
    for (i, s) in states.iter().enumerate().take(n_states) {
        for (ti, t) in v.iter().enumerate() {
            for (ai, a) in v.iter().enumerate() {
                // action v0 always halts; everything else moves around the ring
                let to = if ai == 0 {
                    "halt".to_string()
                } else {
                    states[(i + ti + ai) % n_states].clone()
                };
                transitions.push(Transition {
                    from: s.clone(),
                    planning: t.clone(),
                    action: a.clone(),
                    to,
                });
            }
        }
    }
    (states, contexts, reasoner, reference, transitions)
}

fn mix(reasoner: &ToyPolicy, reference: &ToyPolicy, lambda: impl Fn(&str) -> f64) -> ToyPolicy {
    let logits: BTreeMap<String, Vec<f64>> = reference
        .logits
        .iter()
        .map(|(ctx, r0)| {
            let l = lambda(ctx);
            let r = &reasoner.logits[ctx];
            (ctx.clone(), r.iter().zip(r0).map(|(a, b)| l * a + (1.0 - l) * b).collect())
        })
        .collect();
    ToyPolicy {
        vocab: reference.vocab.clone(),
        logits,
    }
}

fn is_halt_context(ctx: &str) -> bool {
    ctx == "halt" || ctx.starts_with("halt|")
}

/// Chain satisfying KL dominance at every context: the tuned logits are a
/// mixture `λ·R + (1 − λ)·V₀` with `λ ∈ [0.3, 1]`, and `KL(R‖softmax(·))`
/// is convex along that segment with its minimum at `λ = 1`. The halt state
/// has tuned = reference and is absorbing, which keeps the reward bounded
/// along every path.
pub fn condition_ii_chain<R: Rng>(rng: &mut R, n_states: usize, k: usize) -> ToyChain {
    let (states, contexts, reasoner, reference, transitions) = chain_skeleton(rng, n_states, k);
    let lambdas: BTreeMap<String, f64> = contexts
        .iter()
        .map(|c| (c.clone(), if is_halt_context(c) { 0.0 } else { rng.random_range(0.3..=1.0) }))
        .collect();
    let tuned = mix(&reasoner, &reference, |c| lambdas[c]);
    ToyChain {
        start: "s0".into(),
        states,
        halt: Some("halt".into()),
        eta: 1.0,
        reasoner,
        tuned,
        reference,
        transitions,
    }
}

/// Same skeleton with `λ = −1` off the halt state: the tuned verifier moves
/// away from the reasoner, so KL dominance fails everywhere it can.
pub fn violating_chain<R: Rng>(rng: &mut R, n_states: usize, k: usize) -> ToyChain {
    let (states, _, reasoner, reference, transitions) = chain_skeleton(rng, n_states, k);
    let tuned = mix(&reasoner, &reference, |c| if is_halt_context(c) { 0.0 } else { -1.0 });
    ToyChain {
        start: "s0".into(),
        states,
        halt: Some("halt".into()),
        eta: 1.0,
        reasoner,
        tuned,
        reference,
        transitions,
    }
}

/// Random distribution with strictly positive entries.
pub fn random_distribution<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..1.0)).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Random distribution that may put zero mass on some outcomes.
pub fn random_competitor<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n)
            .map(|_| if rng.random_bool(0.15) { 0.0 } else { rng.random_range(0.0..1.0) })
            .collect();
        let s: f64 = w.iter().sum();
        if s > 0.0 {
            return w.into_iter().map(|x| x / s).collect();
        }
    }
}
