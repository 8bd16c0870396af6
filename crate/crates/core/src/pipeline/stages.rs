use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use super::records::{
    flatten_turns, merge_turns, same_answer, DpoProvenance, DpoRecord, JudgeStamp, LedgerEntry, SeedRecord, SftProvenance, SftRecord,
    TrajectoryRecord,
};
use super::sort_canonical;
use crate::engine::{Engine, Rollout};
use crate::gateway::{DecodeConfig, Gateway, GatewayError, ModelHandle, Verdict};
use crate::image::ImageStore;
use crate::trajectory::{token_count, State, TokenCounter, Trajectory, TrajectoryStatus};
use crate::util::sha256_hex;

pub const DEFAULT_TOKEN_LIMIT: usize = 20_000;
pub const INDUCTION_RETRIES: u32 = 3;

fn pool(jobs: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .expect("thread pool")
}

/// One raw record per seed. With `gated`, episodes run under the engine's
/// verifier; otherwise `generator` rolls out until it answers. Failures
/// become error records.
pub fn generate_trajectories(
    seeds: &[SeedRecord],
    engine: &Engine,
    generator: &ModelHandle,
    gated: bool,
    system_prompt: &str,
    jobs: usize,
) -> Vec<TrajectoryRecord> {
    let mut out: Vec<TrajectoryRecord> = pool(jobs).install(|| {
        seeds
            .par_iter()
            .map(|seed| {
                if let Err(e) = seed.validate() {
                    return TrajectoryRecord::error_record(seed.clone(), &generator.model_id, e);
                }
                let initial = seed.initial_state(system_prompt);
                let report = if gated {
                    match engine.run_episode(initial) {
                        Ok(r) => r,
                        Err(e) => return TrajectoryRecord::error_record(seed.clone(), &generator.model_id, e.to_string()),
                    }
                } else {
                    engine.rollout(State::new(initial), generator, &Rollout::default())
                };
                TrajectoryRecord::from_report(seed.clone(), &report, &generator.model_id)
            })
            .collect()
    });
    sort_canonical(&mut out);
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessConfig {
    pub token_limit: usize,
    pub per_image_cost: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            token_limit: DEFAULT_TOKEN_LIMIT,
            per_image_cost: 0,
        }
    }
}

const PREPROCESS: &str = "preprocess";

/// Flattens and merges turns, then drops, in order: generation errors,
/// malformed records, records without tool use, and records above the
/// token limit. Retained records carry their canonical turns.
pub fn preprocess(
    raw: &[TrajectoryRecord],
    tokenizer: &dyn TokenCounter,
    cfg: &PreprocessConfig,
) -> (Vec<TrajectoryRecord>, Vec<LedgerEntry>) {
    let mut kept = Vec::new();
    let mut ledger = Vec::new();
    for rec in raw {
        let drop = |rule: &str| LedgerEntry::new(&rec.seed.id, PREPROCESS, rule);
        if rec.error.is_some() {
            ledger.push(drop("generation_error"));
            continue;
        }
        let mut clean = rec.clone();
        clean.turns = merge_turns(flatten_turns(&rec.turns));
        let traj = match clean.assemble() {
            Ok(t) if t.validate().is_empty() && clean.seed.validate().is_ok() => t,
            _ => {
                ledger.push(drop("malformed"));
                continue;
            }
        };
        if traj.horizon() == 0 {
            ledger.push(drop("no_tool_use"));
            continue;
        }
        match token_count(&traj, tokenizer, cfg.per_image_cost) {
            Ok(n) if n <= cfg.token_limit => kept.push(clean),
            Ok(_) => ledger.push(drop("token_limit")),
            Err(_) => ledger.push(drop("malformed")),
        }
    }
    sort_canonical(&mut kept);
    ledger.sort();
    (kept, ledger)
}

#[derive(Debug, Clone, Default)]
pub struct JudgeOutput {
    pub accepted: Vec<TrajectoryRecord>,
    pub rejected: Vec<TrajectoryRecord>,
    pub quarantined: Vec<TrajectoryRecord>,
    pub ledger: Vec<LedgerEntry>,
}

const JUDGE: &str = "judge";

enum Judged {
    Stamp(JudgeStamp),
    Quarantine(&'static str),
}

/// Keeps records the judge marks correct. Unparseable verdicts and judge
/// failures quarantine the record. Verdicts are memoized by the content
/// hash of the judged trajectory and label.
pub fn judge_filter(
    cleaned: &[TrajectoryRecord],
    gateway: &Gateway,
    judge: &ModelHandle,
    decode: &DecodeConfig,
    jobs: usize,
) -> JudgeOutput {
    let memo: Mutex<HashMap<String, Result<JudgeStamp, &'static str>>> = Mutex::new(HashMap::new());
    let judged: Vec<(TrajectoryRecord, Judged)> = pool(jobs).install(|| {
        cleaned
            .par_iter()
            .map(|rec| {
                let traj = match rec.assemble() {
                    Ok(t) => t,
                    Err(_) => return (rec.clone(), Judged::Quarantine("malformed")),
                };
                let key = sha256_hex(&[traj.to_json(), rec.seed.label.as_bytes().to_vec()].concat());
                let cached = memo.lock().expect("memo lock").get(&key).cloned();
                let result = cached.unwrap_or_else(|| {
                    let r = match gateway.judge(judge, &traj, &rec.seed.label, decode) {
                        Ok(o) => Ok(JudgeStamp {
                            model: judge.model_id.clone(),
                            verdict: o.verdict,
                            prompt_hash: o.prompt_hash,
                        }),
                        Err(GatewayError::UnparseableVerdict(_)) => Err("unparseable_verdict"),
                        Err(_) => Err("judge_error"),
                    };
                    memo.lock().expect("memo lock").insert(key, r.clone());
                    r
                });
                match result {
                    Ok(stamp) => (rec.clone(), Judged::Stamp(stamp)),
                    Err(rule) => (rec.clone(), Judged::Quarantine(rule)),
                }
            })
            .collect()
    });

    let mut out = JudgeOutput::default();
    for (mut rec, j) in judged {
        match j {
            Judged::Stamp(stamp) => {
                let correct = stamp.verdict == Verdict::Correct;
                rec.judge = Some(stamp);
                if correct {
                    out.accepted.push(rec);
                } else {
                    out.ledger.push(LedgerEntry::new(&rec.seed.id, JUDGE, "incorrect"));
                    out.rejected.push(rec);
                }
            }
            Judged::Quarantine(rule) => {
                out.ledger.push(LedgerEntry::new(&rec.seed.id, JUDGE, rule));
                rec.judge = None;
                out.quarantined.push(rec);
            }
        }
    }
    sort_canonical(&mut out.accepted);
    sort_canonical(&mut out.rejected);
    sort_canonical(&mut out.quarantined);
    out.ledger.sort();
    out
}

const SFT: &str = "sft";

/// One SFT record per judged-correct trajectory.
pub fn build_sft(accepted: &[TrajectoryRecord]) -> (Vec<SftRecord>, Vec<LedgerEntry>) {
    let mut out = Vec::new();
    let mut ledger = Vec::new();
    for rec in accepted {
        let stamp = match &rec.judge {
            Some(s) if s.verdict == Verdict::Correct => s,
            _ => {
                ledger.push(LedgerEntry::new(&rec.seed.id, SFT, "not_judged_correct"));
                continue;
            }
        };
        match rec.assemble() {
            Ok(t) if t.validate().is_empty() => out.push(SftRecord {
                seed: rec.seed.clone(),
                trajectory: t,
                provenance: SftProvenance {
                    generator: rec.generator.clone(),
                    judge_model: stamp.model.clone(),
                    verdict_hash: stamp.prompt_hash.clone(),
                },
            }),
            _ => ledger.push(LedgerEntry::new(&rec.seed.id, SFT, "malformed")),
        }
    }
    sort_canonical(&mut out);
    ledger.sort();
    (out, ledger)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum InductionError {
    #[error("branch point {branch_point} outside 1..={horizon}")]
    BranchPoint { branch_point: usize, horizon: usize },
    #[error("induction failed after {attempts} attempts: {last}")]
    InductionFailed { attempts: u32, last: String },
}

fn induction_hint(label: &str) -> String {
    format!("Continue the reasoning from here, but take a wrong turn: misread the evidence so that the final answer is not \"{label}\".")
}

/// Keeps the first `branch_point - 1` steps of the winner and lets
/// `generator` continue under an error-inducing prompt. Returns the loser
/// and the attempt index that produced it.
pub fn induce_error(
    winner: &SftRecord,
    engine: &Engine,
    generator: &ModelHandle,
    branch_point: usize,
    retries: u32,
) -> Result<(Trajectory, u32), InductionError> {
    let horizon = winner.trajectory.horizon();
    if branch_point == 0 || branch_point > horizon {
        return Err(InductionError::BranchPoint { branch_point, horizon });
    }
    let mut state = State::new(winner.trajectory.initial.clone());
    for step in &winner.trajectory.steps[..branch_point - 1] {
        state = state.advanced(step.clone());
    }
    let hint = induction_hint(&winner.seed.label);
    let mut last = String::from("no attempts");
    for attempt in 0..retries {
        let opts = Rollout {
            induced_attempt: Some(attempt),
            hint: Some(hint.clone()),
        };
        let report = engine.rollout(state.clone(), generator, &opts);
        if let Some(f) = &report.failure {
            last = format!("{}: {}", f.stage, f.message);
            continue;
        }
        match report.trajectory.final_answer.as_deref() {
            Some(a) if report.trajectory.status == TrajectoryStatus::Completed && !same_answer(a, &winner.seed.label) => {
                return Ok((report.trajectory, attempt));
            }
            Some(a) => last = format!("answer {a:?} matches the label"),
            None => last = "no final answer".into(),
        }
    }
    Err(InductionError::InductionFailed { attempts: retries, last })
}

/// Per-record seed and branch point drawn uniformly from `1..=H`.
pub fn branch_point_for(seed: u64, record_id: &str, horizon: usize) -> (u64, usize) {
    let digest = sha256_hex(record_id.as_bytes());
    let id_bits = u64::from_str_radix(&digest[..16], 16).expect("hex digest");
    let branch_seed = seed ^ id_bits;
    let mut rng = ChaCha8Rng::seed_from_u64(branch_seed);
    (branch_seed, rng.random_range(1..=horizon.max(1)))
}

const INDUCE: &str = "induce";

/// Runs error induction on every SFT record and returns unfiltered
/// preference candidates.
pub fn induce_pairs(
    winners: &[SftRecord],
    engine: &Engine,
    generator: &ModelHandle,
    seed: u64,
    retries: u32,
    jobs: usize,
) -> (Vec<DpoRecord>, Vec<LedgerEntry>) {
    let results: Vec<Result<DpoRecord, LedgerEntry>> = pool(jobs).install(|| {
        winners
            .par_iter()
            .map(|w| {
                let (branch_seed, bp) = branch_point_for(seed, &w.seed.id, w.trajectory.horizon());
                match induce_error(w, engine, generator, bp, retries) {
                    Ok((loser, attempt)) => Ok(DpoRecord {
                        seed: w.seed.clone(),
                        chosen: w.trajectory.clone(),
                        rejected: loser,
                        branch_point: bp,
                        provenance: DpoProvenance {
                            generator: w.provenance.generator.clone(),
                            induction_model: generator.model_id.clone(),
                            induction_attempt: attempt,
                            branch_seed,
                        },
                    }),
                    Err(InductionError::BranchPoint { .. }) => Err(LedgerEntry::new(&w.seed.id, INDUCE, "no_tool_use")),
                    Err(InductionError::InductionFailed { .. }) => Err(LedgerEntry::new(&w.seed.id, INDUCE, "induction_failed")),
                }
            })
            .collect()
    });
    let mut out = Vec::new();
    let mut ledger = Vec::new();
    for r in results {
        match r {
            Ok(rec) => out.push(rec),
            Err(e) => ledger.push(e),
        }
    }
    sort_canonical(&mut out);
    ledger.sort();
    (out, ledger)
}

const DPO: &str = "dpo";

fn dpo_violation(rec: &DpoRecord, store: &ImageStore) -> Option<&'static str> {
    let (w, l) = (&rec.chosen, &rec.rejected);
    if !w.missing_images(store).is_empty() || !l.missing_images(store).is_empty() {
        return Some("empty_image");
    }
    if !w.validate().is_empty() || !l.validate().is_empty() || w.horizon() == 0 {
        return Some("malformed");
    }
    let shared = rec.branch_point.saturating_sub(1);
    if rec.branch_point == 0
        || rec.branch_point > w.horizon()
        || w.initial != l.initial
        || l.steps.len() < shared
        || w.steps[..shared] != l.steps[..shared]
    {
        return Some("prefix_mismatch");
    }
    match l.final_answer.as_deref() {
        Some(a) if !same_answer(a, &rec.seed.label) => None,
        _ => Some("correct_loser"),
    }
}

/// Keeps candidates whose images all resolve, whose trajectories are
/// well-formed and share the prefix before `branch_point`, and whose
/// loser answer differs from the label.
pub fn build_dpo(candidates: &[DpoRecord], store: &ImageStore) -> (Vec<DpoRecord>, Vec<LedgerEntry>) {
    let mut out = Vec::new();
    let mut ledger = Vec::new();
    for rec in candidates {
        match dpo_violation(rec, store) {
            None => out.push(rec.clone()),
            Some(rule) => ledger.push(LedgerEntry::new(&rec.seed.id, DPO, rule)),
        }
    }
    sort_canonical(&mut out);
    ledger.sort();
    (out, ledger)
}
