use serde::{Deserialize, Serialize};

use crate::engine::{EpisodeReport, StopReason};
use crate::gateway::Verdict;
use crate::toolbox::ToolInvocation;
use crate::trajectory::{InitialState, Observation, ReasoningStep, Trajectory, TrajectoryStatus};

/// One question with its images and ground-truth label `t*`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub id: String,
    #[serde(default)]
    pub task_type: String,
    pub question: String,
    pub image_refs: Vec<String>,
    pub label: String,
}

impl SeedRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.label.trim().is_empty() {
            return Err(format!("seed {}: empty label", self.id));
        }
        if self.image_refs.is_empty() || self.image_refs.iter().any(|r| r.is_empty()) {
            return Err(format!("seed {}: missing image", self.id));
        }
        Ok(())
    }

    pub fn initial_state(&self, system_prompt: &str) -> InitialState {
        InitialState {
            question: self.question.clone(),
            image_refs: self.image_refs.clone(),
            system_prompt: system_prompt.to_string(),
        }
    }
}

/// Raw conversational turn as produced by a generator. `Nested` groups
/// come from structured generator output and are flattened in
/// preprocessing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Turn {
    Planning { text: String },
    Action { invocation: ToolInvocation },
    Observation { observation: Observation },
    Nested { turns: Vec<Turn> },
    Answer { text: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeStamp {
    pub model: String,
    pub verdict: Verdict,
    pub prompt_hash: String,
}

/// Raw and cleaned trajectory shards share this format, so preprocessing
/// and judging can be rerun on their own output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    #[serde(flatten)]
    pub seed: SeedRecord,
    #[serde(default)]
    pub system_prompt: String,
    #[serde(default)]
    pub generator: String,
    #[serde(default)]
    pub turns: Vec<Turn>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judge: Option<JudgeStamp>,
}

pub fn trajectory_turns(traj: &Trajectory) -> Vec<Turn> {
    let mut turns = Vec::new();
    for s in &traj.steps {
        turns.push(Turn::Planning { text: s.planning.clone() });
        if let Some(a) = &s.action {
            turns.push(Turn::Action { invocation: a.clone() });
        }
        if let Some(o) = &s.observation {
            turns.push(Turn::Observation { observation: o.clone() });
        }
    }
    if let Some(a) = &traj.final_answer {
        turns.push(Turn::Answer { text: a.clone() });
    }
    turns
}

impl TrajectoryRecord {
    pub fn from_report(seed: SeedRecord, report: &EpisodeReport, generator: &str) -> Self {
        let error = match (&report.failure, report.trajectory.status) {
            (Some(f), _) => Some(format!("{:?}: {} ({})", report.stop_reason, f.message, f.stage)),
            (None, TrajectoryStatus::Completed) => None,
            (None, status) => Some(format!("trajectory ended {status:?}")),
        };
        Self {
            seed,
            system_prompt: report.trajectory.initial.system_prompt.clone(),
            generator: generator.to_string(),
            turns: trajectory_turns(&report.trajectory),
            error,
            judge: None,
        }
    }

    pub fn error_record(seed: SeedRecord, generator: &str, message: String) -> Self {
        Self {
            seed,
            system_prompt: String::new(),
            generator: generator.to_string(),
            turns: Vec::new(),
            error: Some(message),
            judge: None,
        }
    }

    /// Builds the trajectory from canonical turns:
    /// `(Planning Action Observation)* Answer`.
    pub fn assemble(&self) -> Result<Trajectory, String> {
        let mut traj = Trajectory::new(self.seed.initial_state(&self.system_prompt));
        let mut it = self.turns.iter().peekable();
        let mut h = 0;
        loop {
            match it.next() {
                Some(Turn::Planning { text }) => {
                    h += 1;
                    let action = match it.next() {
                        Some(Turn::Action { invocation }) => invocation.clone(),
                        other => return Err(format!("step {h}: planning followed by {}", describe(other))),
                    };
                    let observation = match it.next() {
                        Some(Turn::Observation { observation }) => observation.clone(),
                        other => return Err(format!("step {h}: action followed by {}", describe(other))),
                    };
                    traj = traj
                        .append_step(ReasoningStep::new(text.clone(), action, observation))
                        .map_err(|e| e.to_string())?;
                }
                Some(Turn::Answer { text }) => {
                    if let Some(extra) = it.next() {
                        return Err(format!("{} after the answer", describe(Some(extra))));
                    }
                    return traj.finalize(text.clone()).map_err(|e| e.to_string());
                }
                other => return Err(format!("step {}: expected planning or answer, found {}", h + 1, describe(other))),
            }
        }
    }
}

fn describe(t: Option<&Turn>) -> &'static str {
    match t {
        None => "end of record",
        Some(Turn::Planning { .. }) => "planning",
        Some(Turn::Action { .. }) => "action",
        Some(Turn::Observation { .. }) => "observation",
        Some(Turn::Nested { .. }) => "nested group",
        Some(Turn::Answer { .. }) => "answer",
    }
}

/// Inlines nested groups depth-first.
pub fn flatten_turns(turns: &[Turn]) -> Vec<Turn> {
    let mut out = Vec::with_capacity(turns.len());
    for t in turns {
        match t {
            Turn::Nested { turns } => out.extend(flatten_turns(turns)),
            other => out.push(other.clone()),
        }
    }
    out
}

/// Joins text turns with no action in between: consecutive plannings
/// become one planning, and a planning directly before the answer is
/// folded into the answer.
pub fn merge_turns(turns: Vec<Turn>) -> Vec<Turn> {
    let mut out: Vec<Turn> = Vec::with_capacity(turns.len());
    for t in turns {
        match (out.last_mut(), t) {
            (Some(Turn::Planning { text: prev }), Turn::Planning { text }) => {
                prev.push('\n');
                prev.push_str(&text);
            }
            (Some(Turn::Planning { .. }), Turn::Answer { text }) => {
                let Some(Turn::Planning { text: prev }) = out.pop() else {
                    unreachable!()
                };
                out.push(Turn::Answer {
                    text: format!("{prev}\n{text}"),
                });
            }
            (_, t) => out.push(t),
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftProvenance {
    pub generator: String,
    pub judge_model: String,
    pub verdict_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    #[serde(flatten)]
    pub seed: SeedRecord,
    pub trajectory: Trajectory,
    pub provenance: SftProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoProvenance {
    pub generator: String,
    pub induction_model: String,
    pub induction_attempt: u32,
    pub branch_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    #[serde(flatten)]
    pub seed: SeedRecord,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
    /// 1-based step at which `rejected` leaves `chosen`; steps before it
    /// are shared.
    pub branch_point: usize,
    pub provenance: DpoProvenance,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub record_id: String,
    pub stage: String,
    pub rule: String,
}

impl LedgerEntry {
    pub fn new(record_id: &str, stage: &str, rule: &str) -> Self {
        Self {
            record_id: record_id.to_string(),
            stage: stage.to_string(),
            rule: rule.to_string(),
        }
    }
}

/// Answer comparison used for induced losers: trimmed, case-folded.
pub fn same_answer(a: &str, b: &str) -> bool {
    a.trim().to_lowercase() == b.trim().to_lowercase()
}

pub fn stop_reason_name(r: StopReason) -> &'static str {
    match r {
        StopReason::VerifierStop => "verifier_stop",
        StopReason::MaxSteps => "max_steps",
        StopReason::ModelError => "model_error",
        StopReason::ToolError => "tool_error",
        StopReason::AnswerEmitted => "answer_emitted",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toolbox::ActionKind;

    fn plan(t: &str) -> Turn {
        Turn::Planning { text: t.into() }
    }

    fn act() -> Turn {
        Turn::Action {
            invocation: ToolInvocation::new(ActionKind::Ocr, [("image", "input")]),
        }
    }

    fn obs() -> Turn {
        Turn::Observation {
            observation: Observation::text(ActionKind::Ocr, "STOP"),
        }
    }

    fn record(turns: Vec<Turn>) -> TrajectoryRecord {
        TrajectoryRecord {
            seed: SeedRecord {
                id: "r".into(),
                task_type: "ocr".into(),
                question: "q".into(),
                image_refs: vec!["img".into()],
                label: "STOP".into(),
            },
            system_prompt: String::new(),
            generator: "g".into(),
            turns,
            error: None,
            judge: None,
        }
    }

    #[test]
    fn flatten_and_merge() {
        let nested = vec![
            Turn::Nested {
                turns: vec![plan("a"), Turn::Nested { turns: vec![plan("b")] }],
            },
            act(),
            obs(),
            plan("c"),
            Turn::Answer { text: "STOP".into() },
        ];
        let canon = merge_turns(flatten_turns(&nested));
        assert_eq!(canon, vec![plan("a\nb"), act(), obs(), Turn::Answer { text: "c\nSTOP".into() }]);
        assert_eq!(merge_turns(flatten_turns(&canon)), canon);
    }

    #[test]
    fn assemble_shapes() {
        let ok = record(vec![plan("a"), act(), obs(), Turn::Answer { text: "STOP".into() }]);
        let t = ok.assemble().unwrap();
        assert_eq!(t.horizon(), 1);
        assert_eq!(trajectory_turns(&t), ok.turns);
        assert!(record(vec![plan("a"), obs()]).assemble().is_err());
        assert!(record(vec![plan("a"), act(), obs()]).assemble().is_err());
        assert!(record(vec![Turn::Answer { text: "x".into() }, plan("a")]).assemble().is_err());
        assert_eq!(record(vec![Turn::Answer { text: "x".into() }]).assemble().unwrap().horizon(), 0);
    }

    #[test]
    fn record_json_round_trip() {
        let r = record(vec![plan("a"), act(), obs(), Turn::Answer { text: "STOP".into() }]);
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"type\":\"planning\""));
        assert_eq!(serde_json::from_str::<TrajectoryRecord>(&json).unwrap(), r);
    }
}
