//! Command-line surface: episodes, scoring, pipeline stages and lab probes.
//!
//! Exit codes: 0 success, 1 property failure, 2 configuration error,
//! 3 endpoint failure.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::Config;
use crate::engine::{render_context, StopReason};
use crate::image::ImageStore;
use crate::lab::{probes, SdpoInstance, SftInstance};
use crate::pipeline::{self, DpoRecord, SftRecord, TrajectoryRecord};
use crate::trajectory::{InitialState, State, Trajectory, WhitespaceTokenizer};
use crate::verifier::{self, StepScore};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PROPERTY: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ENDPOINT: i32 = 3;

#[derive(Debug, Parser)]
#[command(
    name = "gatedreason",
    version,
    about = "Verifier-gated visual reasoning runtime, training lab and dataset pipeline"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalOpts {
    /// TOML configuration file
    #[arg(long, global = true, env = "GATEDREASON_CONFIG")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, env = "GATEDREASON_SEED")]
    pub seed: Option<u64>,
    /// Worker threads for batch work
    #[arg(long, global = true, env = "GATEDREASON_JOBS")]
    pub jobs: Option<usize>,
    /// Stopping threshold on the per-step log-ratio
    #[arg(long, global = true, env = "GATEDREASON_EPSILON", allow_negative_numbers = true)]
    pub epsilon: Option<f64>,
    #[arg(long, global = true, env = "GATEDREASON_ETA", allow_negative_numbers = true)]
    pub eta: Option<f64>,
    #[arg(long, global = true, env = "GATEDREASON_MAX_STEPS")]
    pub max_steps: Option<usize>,
    /// Directory of mock fixtures: reasoner.json, verifier_tuned.json,
    /// verifier_reference.json, judge.json, generator.json, tools.json
    #[arg(long, global = true, env = "GATEDREASON_MOCK")]
    pub mock: Option<PathBuf>,
    #[arg(long, global = true, env = "GATEDREASON_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one gated episode and write its report
    Run {
        #[arg(long)]
        question: String,
        #[arg(long)]
        image: PathBuf,
        /// Report path; stdout when omitted
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a stored trajectory with the verifier pair
    Score {
        #[arg(long)]
        trajectory: PathBuf,
        /// Directory holding the trajectory's images
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one dataset pipeline stage
    Pipeline {
        #[arg(value_enum)]
        stage: Stage,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Drop ledger (written by most stages, read by `stats`)
        #[arg(long)]
        ledger: Option<PathBuf>,
        /// Persistent image store shared across stages
        #[arg(long)]
        store: Option<PathBuf>,
    },
    /// Run a training-lab probe
    Lab {
        #[arg(value_enum)]
        probe: Probe,
        /// Instance file for sft-train / dpo-train
        #[arg(long)]
        instance: Option<PathBuf>,
        #[arg(long)]
        instances: Option<usize>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 200)]
        cap: usize,
        /// stopping-sim: use the reference model as the tuned verifier
        #[arg(long)]
        identical: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Preprocess,
    Judge,
    Sft,
    Induce,
    Dpo,
    Stats,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Probe {
    SftTrain,
    DpoTrain,
    GradCheck,
    GibbsCheck,
    Submartingale,
    StoppingSim,
}

#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: e.to_string(),
    }
}

fn endpoint_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_ENDPOINT,
        message: e.to_string(),
    }
}

/// Written next to every output for reproducibility.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub jobs: usize,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub endpoints: BTreeMap<String, String>,
    pub verifier: crate::verifier::VerifierConfig,
    pub max_steps: usize,
    pub version: String,
}

/// `dir/stem.jsonl` → `dir/stem<suffix>`.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

struct Ctx {
    cfg: Config,
    config_path: Option<PathBuf>,
}

impl Ctx {
    fn load(g: &GlobalOpts) -> Result<Self, Failure> {
        let mut cfg = match &g.config {
            Some(p) => Config::load(p).map_err(config_err)?,
            None => Config::default(),
        };
        if let Some(dir) = &g.mock {
            cfg.apply_mock_dir(dir).map_err(config_err)?;
        }
        if let Some(v) = g.seed {
            cfg.seed = v;
        }
        if let Some(v) = g.jobs {
            cfg.jobs = v;
        }
        if let Some(v) = g.epsilon {
            cfg.verifier.epsilon = v;
        }
        if let Some(v) = g.eta {
            cfg.verifier.eta = v;
        }
        if let Some(v) = g.max_steps {
            cfg.engine.max_steps = v;
        }
        if let Some(v) = &g.cache_dir {
            cfg.gateway.cache_dir = Some(v.clone());
        }
        cfg.validate().map_err(config_err)?;
        Ok(Self {
            cfg,
            config_path: g.config.clone(),
        })
    }

    fn manifest(&self, command: String, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> RunManifest {
        RunManifest {
            command,
            config: self.config_path.clone(),
            seed: self.cfg.seed,
            jobs: self.cfg.jobs,
            inputs,
            outputs,
            endpoints: self.cfg.endpoint_map(),
            verifier: self.cfg.verifier_config(),
            max_steps: self.cfg.engine.max_steps,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn write_manifest(&self, primary: &Path, m: &RunManifest) -> Result<(), Failure> {
        let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
        text.push('\n');
        pipeline::write_atomic(&sibling(primary, ".manifest.json"), text.as_bytes()).map_err(config_err)
    }
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => pipeline::write_atomic(p, text.as_bytes()).map_err(config_err),
        None => out.write_all(text.as_bytes()).map_err(config_err),
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Parses `args`, runs the command, and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                out.write_all(rendered.as_bytes())
            } else {
                err.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match dispatch(cli, out) {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(err, "error: {}", f.message);
            f.code
        }
    }
}

fn dispatch(cli: Cli, out: &mut dyn Write) -> Result<i32, Failure> {
    let ctx = Ctx::load(&cli.global)?;
    match cli.command {
        Command::Run {
            question,
            image,
            out: path,
        } => cmd_run(&ctx, &question, &image, path.as_deref(), out),
        Command::Score {
            trajectory,
            store,
            out: path,
        } => cmd_score(&ctx, &trajectory, store.as_deref(), path.as_deref(), out),
        Command::Pipeline {
            stage,
            input,
            output,
            ledger,
            store,
        } => cmd_pipeline(&ctx, stage, &input, output.as_deref(), ledger.as_deref(), store.as_deref(), out),
        Command::Lab {
            probe,
            instance,
            instances,
            trials,
            episodes,
            cap,
            identical,
            out: path,
        } => {
            let opts = LabOpts {
                instance,
                instances,
                trials,
                episodes,
                cap,
                identical,
            };
            cmd_lab(&ctx, probe, &opts, path.as_deref(), out)
        }
    }
}

fn cmd_run(ctx: &Ctx, question: &str, image: &Path, path: Option<&Path>, out: &mut dyn Write) -> Result<i32, Failure> {
    let store = Arc::new(ImageStore::in_memory());
    let key = store
        .import_png(image)
        .map_err(|e| config_err(format!("cannot load image {}: {e}", image.display())))?;
    let engine = ctx.cfg.engine(store, true).map_err(config_err)?;
    let initial = InitialState {
        question: question.to_string(),
        image_refs: vec![key],
        system_prompt: ctx.cfg.engine.system_prompt.clone(),
    };
    let report = engine.run_episode(initial).map_err(config_err)?;
    emit(out, path, &report.to_json())?;
    if let Some(p) = path {
        ctx.write_manifest(p, &ctx.manifest("run".into(), vec![image.to_path_buf()], vec![p.to_path_buf()]))?;
    }
    Ok(match report.stop_reason {
        StopReason::VerifierStop | StopReason::MaxSteps | StopReason::AnswerEmitted => EXIT_OK,
        StopReason::ModelError | StopReason::ToolError => EXIT_ENDPOINT,
    })
}

#[derive(Debug, Serialize)]
struct ScoreReport {
    scores: Vec<StepScore>,
    raw_ratios: Vec<f64>,
    deltas: Vec<f64>,
    /// First step (1-based) at which the stopping rule fires, if any.
    stop_at: Option<usize>,
    reward: f64,
}

fn cmd_score(ctx: &Ctx, traj_path: &Path, store_dir: Option<&Path>, path: Option<&Path>, out: &mut dyn Write) -> Result<i32, Failure> {
    let bytes = std::fs::read(traj_path).map_err(|e| config_err(format!("{}: {e}", traj_path.display())))?;
    let traj = Trajectory::from_json(&bytes).map_err(|e| config_err(format!("{}: {e}", traj_path.display())))?;
    let store = match store_dir {
        Some(d) => ImageStore::open_dir(d).map_err(config_err)?,
        None => ImageStore::in_memory(),
    };
    let mut cfg = ctx.cfg.clone();
    if !cfg.has_model("reasoner") {
        if let Some(m) = cfg.models.get("verifier_reference").cloned() {
            cfg.models.insert("reasoner".into(), m);
        }
    }
    let engine = cfg.engine(Arc::new(store), true).map_err(config_err)?;
    let pair = engine.verifier.as_ref().expect("verifier required");
    let vcfg = cfg.verifier_config();

    let mut state = State::new(traj.initial.clone());
    let mut scores = Vec::new();
    for step in &traj.steps {
        scores.push(engine.score_step(pair, &state, step).map_err(endpoint_err)?);
        state = state.advanced(step.clone());
    }
    if let Some(answer) = &traj.final_answer {
        let ctx_text = render_context(&state);
        let gw = &engine.gateway;
        let t = gw.score_sequence(&pair.tuned, &ctx_text, answer).map_err(endpoint_err)?;
        let r = gw.score_sequence(&pair.reference, &ctx_text, answer).map_err(endpoint_err)?;
        scores.push(StepScore::final_answer(t, r));
    }
    let raw: Vec<f64> = scores
        .iter()
        .map(|s| verifier::step_log_ratio(s).map_err(config_err))
        .collect::<Result<_, _>>()?;
    let report = ScoreReport {
        stop_at: raw.iter().position(|&x| verifier::should_stop(x, &vcfg)).map(|i| i + 1),
        deltas: raw.iter().map(|x| vcfg.eta * x).collect(),
        reward: verifier::reward(&scores, &vcfg).map_err(config_err)?,
        raw_ratios: raw,
        scores,
    };
    emit(out, path, &pretty(&report))?;
    if let Some(p) = path {
        ctx.write_manifest(
            p,
            &ctx.manifest("score".into(), vec![traj_path.to_path_buf()], vec![p.to_path_buf()]),
        )?;
    }
    Ok(EXIT_OK)
}

fn require_output(output: Option<&Path>, stage: Stage) -> Result<&Path, Failure> {
    output.ok_or_else(|| config_err(format!("stage {stage:?} needs --output")))
}

fn open_store(store: Option<&Path>, output: &Path) -> Result<Arc<ImageStore>, Failure> {
    let dir = store.map(Path::to_path_buf).unwrap_or_else(|| output.with_file_name("images"));
    Ok(Arc::new(ImageStore::open_dir(dir).map_err(config_err)?))
}

fn cmd_pipeline(
    ctx: &Ctx,
    stage: Stage,
    input: &Path,
    output: Option<&Path>,
    ledger: Option<&Path>,
    store: Option<&Path>,
    out: &mut dyn Write,
) -> Result<i32, Failure> {
    let cfg = &ctx.cfg;
    let name = serde_json::to_value(stage).expect("stage name");
    let command = format!("pipeline {}", name.as_str().unwrap_or_default());
    if stage == Stage::Stats {
        let summary = pipeline::stats(input, ledger).map_err(config_err)?;
        emit(out, output, &summary.to_json())?;
        if let Some(o) = output {
            let mut inputs = vec![input.to_path_buf()];
            inputs.extend(ledger.map(Path::to_path_buf));
            ctx.write_manifest(o, &ctx.manifest(command, inputs, vec![o.to_path_buf()]))?;
        }
        return Ok(EXIT_OK);
    }

    let output = require_output(output, stage)?;
    let ledger_path = ledger.map(Path::to_path_buf).unwrap_or_else(|| sibling(output, ".ledger.csv"));
    let mut outputs = vec![output.to_path_buf(), ledger_path.clone()];
    let write = |path: &Path, bytes: Vec<u8>| pipeline::write_atomic(path, &bytes).map_err(config_err);

    match stage {
        Stage::Generate => {
            let store = open_store(store, output)?;
            let seeds = pipeline::load_seeds(input, &store).map_err(config_err)?;
            let mut gcfg = cfg.clone();
            let gen_key = if gcfg.has_model("generator") { "generator" } else { "reasoner" };
            if !gcfg.has_model("reasoner") {
                if let Some(m) = gcfg.models.get("generator").cloned() {
                    gcfg.models.insert("reasoner".into(), m);
                }
            }
            let gated = cfg.pipeline.gated_generation;
            let engine = gcfg.engine(store, gated).map_err(config_err)?;
            let generator = gcfg.model(gen_key).map_err(config_err)?;
            let raw = pipeline::generate_trajectories(&seeds, &engine, &generator, gated, &cfg.engine.system_prompt, cfg.jobs);
            write(output, pipeline::to_jsonl(&raw))?;
            outputs.pop();
        }
        Stage::Preprocess => {
            let raw: Vec<TrajectoryRecord> = pipeline::read_jsonl(input).map_err(config_err)?;
            let (kept, drops) = pipeline::preprocess(&raw, &WhitespaceTokenizer, &cfg.preprocess_config());
            write(output, pipeline::to_jsonl(&kept))?;
            write(&ledger_path, pipeline::ledger_csv(&drops))?;
        }
        Stage::Judge => {
            let cleaned: Vec<TrajectoryRecord> = pipeline::read_jsonl(input).map_err(config_err)?;
            let judge = cfg.model("judge").map_err(config_err)?;
            let gw = cfg.gateway().map_err(config_err)?;
            let res = pipeline::judge_filter(&cleaned, &gw, &judge, &cfg.decode(), cfg.jobs);
            let rejected = sibling(output, ".rejected.jsonl");
            let quarantined = sibling(output, ".quarantined.jsonl");
            write(output, pipeline::to_jsonl(&res.accepted))?;
            write(&rejected, pipeline::to_jsonl(&res.rejected))?;
            write(&quarantined, pipeline::to_jsonl(&res.quarantined))?;
            write(&ledger_path, pipeline::ledger_csv(&res.ledger))?;
            outputs.extend([rejected, quarantined]);
        }
        Stage::Sft => {
            let accepted: Vec<TrajectoryRecord> = pipeline::read_jsonl(input).map_err(config_err)?;
            let (sft, drops) = pipeline::build_sft(&accepted);
            write(output, pipeline::to_jsonl(&sft))?;
            write(&ledger_path, pipeline::ledger_csv(&drops))?;
        }
        Stage::Induce => {
            let winners: Vec<SftRecord> = pipeline::read_jsonl(input).map_err(config_err)?;
            let store = open_store(store, output)?;
            let mut gcfg = cfg.clone();
            if !gcfg.has_model("reasoner") {
                if let Some(m) = gcfg.models.get("generator").cloned() {
                    gcfg.models.insert("reasoner".into(), m);
                }
            }
            let engine = gcfg.engine(store, false).map_err(config_err)?;
            let generator = gcfg.model("generator").map_err(config_err)?;
            let (cands, drops) = pipeline::induce_pairs(&winners, &engine, &generator, cfg.seed, cfg.pipeline.induction_retries, cfg.jobs);
            write(output, pipeline::to_jsonl(&cands))?;
            write(&ledger_path, pipeline::ledger_csv(&drops))?;
        }
        Stage::Dpo => {
            let cands: Vec<DpoRecord> = pipeline::read_jsonl(input).map_err(config_err)?;
            let store = open_store(store, output)?;
            let (pairs, drops) = pipeline::build_dpo(&cands, &store);
            write(output, pipeline::to_jsonl(&pairs))?;
            write(&ledger_path, pipeline::ledger_csv(&drops))?;
        }
        Stage::Stats => unreachable!(),
    }
    ctx.write_manifest(output, &ctx.manifest(command, vec![input.to_path_buf()], outputs))?;
    Ok(EXIT_OK)
}

struct LabOpts {
    instance: Option<PathBuf>,
    instances: Option<usize>,
    trials: Option<usize>,
    episodes: Option<usize>,
    cap: usize,
    identical: bool,
}

#[derive(Serialize)]
struct LabReport<T: Serialize> {
    probe: Probe,
    seed: u64,
    pass: bool,
    report: T,
}

fn read_instance<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| config_err(format!("{}: {} at {}", path.display(), e.inner(), e.path())))
}

fn cmd_lab(ctx: &Ctx, probe: Probe, o: &LabOpts, path: Option<&Path>, out: &mut dyn Write) -> Result<i32, Failure> {
    let seed = ctx.cfg.seed;
    fn finish<T: Serialize>(probe: Probe, seed: u64, pass: bool, report: T) -> (bool, String) {
        (pass, pretty(&LabReport { probe, seed, pass, report }))
    }
    let (pass, text) = match probe {
        Probe::GradCheck => {
            let r = probes::grad_check(seed, o.instances.unwrap_or(100), 1e-5).map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
        Probe::GibbsCheck => {
            let r = probes::gibbs_check(seed, o.instances.unwrap_or(1000), o.trials.unwrap_or(100), 10_001).map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
        Probe::SftTrain => {
            let inst: SftInstance = match &o.instance {
                Some(p) => read_instance(p)?,
                None => probes::fixture_sft_instance(seed),
            };
            let r = probes::run_sft_instance(seed, &inst).map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
        Probe::DpoTrain => {
            let inst: SdpoInstance = match &o.instance {
                Some(p) => read_instance(p)?,
                None => probes::fixture_sdpo_instance(seed),
            };
            let r = probes::run_sdpo_instance(seed, &inst).map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
        Probe::Submartingale => {
            let n = o.instances.unwrap_or(20);
            let r = probes::submartingale_suite(seed, n, n.div_ceil(4), o.trials.unwrap_or(2000)).map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
        Probe::StoppingSim => {
            let r = probes::stopping_suite(
                seed,
                o.instances.unwrap_or(5),
                o.episodes.unwrap_or(10_000),
                o.cap,
                ctx.cfg.verifier.epsilon,
                o.identical,
            )
            .map_err(config_err)?;
            finish(probe, seed, r.pass, r)
        }
    };
    emit(out, path, &text)?;
    if let Some(p) = path {
        let name = serde_json::to_value(probe).expect("probe name");
        let inputs = o.instance.iter().cloned().collect();
        ctx.write_manifest(
            p,
            &ctx.manifest(format!("lab {}", name.as_str().unwrap_or_default()), inputs, vec![p.to_path_buf()]),
        )?;
    }
    Ok(if pass { EXIT_OK } else { EXIT_PROPERTY })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run(std::iter::once("gatedreason").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors() {
        let (code, _, err) = run_capture(&["pipeline", "bogus", "--input", "x"]);
        assert_eq!(code, 2);
        assert!(err.contains("bogus"));
        let (code, _, _) = run_capture(&["--help"]);
        assert_eq!(code, 0);
    }

    #[test]
    fn zero_epsilon_is_rejected() {
        let (code, _, err) = run_capture(&["--epsilon", "0", "lab", "grad-check", "--instances", "1"]);
        assert_eq!(code, EXIT_CONFIG);
        assert!(err.contains("verifier.epsilon"), "{err}");
    }

    #[test]
    fn lab_probe_reports_seed() {
        let (code, out, _) = run_capture(&["--seed", "4", "lab", "grad-check", "--instances", "3"]);
        assert_eq!(code, 0);
        let v: serde_json::Value = serde_json::from_str(&out).unwrap();
        assert_eq!(v["seed"], 4);
        assert_eq!(v["pass"], true);
        assert_eq!(v["probe"], "grad-check");
    }

    #[test]
    fn sibling_paths() {
        assert_eq!(
            sibling(Path::new("/a/clean.jsonl"), ".ledger.csv"),
            PathBuf::from("/a/clean.ledger.csv")
        );
    }
}
