//! Resolved command configs and their runners.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use beamprm::backends::{PolicyDescriptor, RewardDescriptor};
use beamprm::datagen::{
    construct_dataset_with_progress, read_dataset, step_bucket_stats, write_dataset, write_stats_csv, BalanceConfig,
    SamplingSchedule,
};
use beamprm::prmtrain::{train, write_history_csv, TrainingConfig};
use beamprm::search::{run_suite_with_progress, BasSchedule, Rate, Strategy};
use beamprm::synthenv::{SuiteSpec, TaskSuite, VarianceProfile};
use beamprm::{EngineConfig, Problem};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::config::resolve;
use crate::error::{CliError, CliResult};
use crate::manifest::{unix_ms, Artifact, RunManifest, MANIFEST_FORMAT_VERSION};
use crate::progress::Progress;

/// `println!` unless `quiet`.
macro_rules! say {
    ($quiet:expr, $($arg:tt)*) => {
        if !$quiet {
            println!($($arg)*);
        }
    };
}

pub const API_KEY_ENV: &str = "BEAMPRM_API_KEY";

/// Fraction of failed problems above which construct-data exits non-zero.
const MAX_FAILURE_FRACTION: f64 = 0.10;

pub struct Completed {
    pub manifest: RunManifest,
    pub manifest_path: PathBuf,
    /// Error to report after all outputs were written.
    pub deferred: Option<CliError>,
}

pub fn execute(command: &str, raw: Map<String, Value>, quiet: bool) -> CliResult<Completed> {
    let started = unix_ms();
    match command {
        "gen-tasks" => gen_tasks(raw, quiet, started),
        "construct-data" => construct_data(raw, quiet, started),
        "train-prm" => train_prm(raw, quiet, started),
        "search" => search(raw, quiet, started),
        "tts-curve" => tts_curve(raw, quiet, started),
        other => Err(CliError::usage(format!("unknown command `{other}`"))),
    }
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> CliResult<&'a Path> {
    p.as_deref().ok_or_else(|| CliError::usage(format!("missing `{key}`")))
}

/// `dir/stem.suffix` next to `out`.
fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "out".into());
    out.with_file_name(format!("{stem}.{suffix}"))
}

struct Run<'a> {
    command: &'a str,
    snapshot: Value,
    seed: u64,
    started: u64,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Run<'_> {
    fn finish(self, manifest_path: &Path, deferred: Option<CliError>) -> CliResult<Completed> {
        let manifest = RunManifest {
            format_version: MANIFEST_FORMAT_VERSION,
            command: self.command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: self.snapshot,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            started_unix_ms: self.started,
            finished_unix_ms: unix_ms(),
        };
        manifest.write(manifest_path)?;
        Ok(Completed { manifest, manifest_path: manifest_path.to_path_buf(), deferred })
    }
}

fn synthetic_policy() -> PolicyDescriptor {
    PolicyDescriptor::Synthetic
}

fn oracle_reward() -> RewardDescriptor {
    RewardDescriptor::Oracle
}

fn with_api_key(policy: &PolicyDescriptor) -> PolicyDescriptor {
    let mut p = policy.clone();
    if let PolicyDescriptor::Http(cfg) = &mut p {
        cfg.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
    }
    p
}

fn policy_inputs(policy: &PolicyDescriptor) -> CliResult<Vec<Artifact>> {
    Ok(match policy {
        PolicyDescriptor::Replay { script } => vec![Artifact::of("policy.script", script)?],
        _ => Vec::new(),
    })
}

fn reward_inputs(reward: &RewardDescriptor) -> CliResult<Vec<Artifact>> {
    Ok(match reward {
        RewardDescriptor::Learned { checkpoint } => vec![Artifact::of("reward.checkpoint", checkpoint)?],
        _ => Vec::new(),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct GenTasksConfig {
    pub count: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    pub branching: usize,
    pub profile: VarianceProfile,
    pub recovery_prob: f64,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for GenTasksConfig {
    fn default() -> Self {
        let s = SuiteSpec::default();
        GenTasksConfig {
            count: s.count,
            depth_min: s.depth_min,
            depth_max: s.depth_max,
            branching: s.branching,
            profile: s.profile,
            recovery_prob: s.recovery_prob,
            seed: s.seed,
            out: None,
            manifest: None,
        }
    }
}

fn gen_tasks(raw: Map<String, Value>, quiet: bool, started: u64) -> CliResult<Completed> {
    let (mut cfg, _) = resolve::<GenTasksConfig>(raw)?;
    let out = required(&cfg.out, "out")?.to_path_buf();
    let manifest = cfg.manifest.get_or_insert_with(|| sibling(&out, "manifest.json")).clone();
    let suite = TaskSuite::generate(&SuiteSpec {
        count: cfg.count,
        depth_min: cfg.depth_min,
        depth_max: cfg.depth_max,
        branching: cfg.branching,
        profile: cfg.profile,
        recovery_prob: cfg.recovery_prob,
        seed: cfg.seed,
    })?;
    suite.write(&out)?;
    say!(quiet, "wrote {} tasks to {}", suite.len(), out.display());
    Run {
        command: "gen-tasks",
        snapshot: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        started,
        inputs: Vec::new(),
        outputs: vec![Artifact::of("out", &out)?],
    }
    .finish(&manifest, None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ConstructConfig {
    pub tasks: Option<PathBuf>,
    pub engine: EngineConfig,
    #[serde(default = "synthetic_policy")]
    pub policy: PolicyDescriptor,
    pub schedule: SamplingSchedule,
    pub balance: BalanceConfig,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub stats: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for ConstructConfig {
    fn default() -> Self {
        ConstructConfig {
            tasks: None,
            engine: EngineConfig::default(),
            policy: synthetic_policy(),
            schedule: SamplingSchedule::default(),
            balance: BalanceConfig::default(),
            seed: 0,
            out: None,
            stats: None,
            manifest: None,
        }
    }
}

fn load_suite(path: &Path) -> CliResult<(TaskSuite, Vec<Arc<Problem>>, Artifact)> {
    let suite = TaskSuite::read(path)?;
    let problems = suite.problems();
    Ok((suite, problems, Artifact::of("tasks", path)?))
}

fn construct_data(raw: Map<String, Value>, quiet: bool, started: u64) -> CliResult<Completed> {
    let (mut cfg, _) = resolve::<ConstructConfig>(raw)?;
    let tasks = required(&cfg.tasks, "tasks")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    let stats_path = cfg.stats.get_or_insert_with(|| sibling(&out, "stats.csv")).clone();
    let manifest = cfg.manifest.get_or_insert_with(|| sibling(&out, "manifest.json")).clone();

    let (suite, problems, tasks_artifact) = load_suite(&tasks)?;
    let policy = with_api_key(&cfg.policy).build(&cfg.engine, Some(&suite))?;
    let progress = Progress::new("construct-data", problems.len(), quiet);
    let report =
        construct_dataset_with_progress(&problems, policy.as_ref(), &cfg.schedule, &cfg.balance, cfg.seed, &|| {
            progress.tick()
        })?;
    write_dataset(&report.dataset, &out)?;
    let stats = step_bucket_stats(&report.dataset)?;
    write_stats_csv(&stats, BufWriter::new(File::create(&stats_path)?))?;

    for (id, e) in &report.failures {
        eprintln!("problem {id} failed: {e}");
    }
    say!(
        quiet,
        "wrote {} triplets ({} problems, {} failed) to {}",
        report.dataset.triplets.len(),
        problems.len(),
        report.failures.len(),
        out.display()
    );
    let failed = report.failures.len();
    let deferred = (failed as f64 > MAX_FAILURE_FRACTION * problems.len() as f64)
        .then_some(CliError::TooManyFailures { failed, total: problems.len() });

    let mut inputs = vec![tasks_artifact];
    inputs.extend(policy_inputs(&cfg.policy)?);
    Run {
        command: "construct-data",
        snapshot: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        started,
        inputs,
        outputs: vec![Artifact::of("out", &out)?, Artifact::of("stats", &stats_path)?],
    }
    .finish(&manifest, deferred)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset: Option<PathBuf>,
    #[serde(flatten)]
    pub training: TrainingConfig,
    pub out: Option<PathBuf>,
    pub history: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

fn train_prm(raw: Map<String, Value>, quiet: bool, started: u64) -> CliResult<Completed> {
    let (mut cfg, _) = resolve::<TrainConfig>(raw)?;
    let dataset_path = required(&cfg.dataset, "dataset")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    let history_path = cfg.history.get_or_insert_with(|| sibling(&out, "history.csv")).clone();
    let manifest = cfg.manifest.get_or_insert_with(|| sibling(&out, "manifest.json")).clone();

    let dataset = read_dataset(&dataset_path)?;
    let outcome = train(&dataset, &cfg.training)?;
    outcome.model.save(&out)?;
    write_history_csv(&outcome.history, BufWriter::new(File::create(&history_path)?))?;
    if let Some(last) = outcome.history.last() {
        say!(
            quiet,
            "epoch {}: value {:.5} rank {:.5} total {:.5}",
            last.epoch,
            last.value_loss,
            last.rank_loss,
            last.total
        );
    }
    say!(quiet, "wrote checkpoint ({} parameters) to {}", outcome.model.num_params(), out.display());
    Run {
        command: "train-prm",
        snapshot: serde_json::to_value(&cfg)?,
        seed: cfg.training.seed,
        started,
        inputs: vec![Artifact::of("dataset", &dataset_path)?],
        outputs: vec![Artifact::of("out", &out)?, Artifact::of("history", &history_path)?],
    }
    .finish(&manifest, None)
}

fn default_strategy() -> Strategy {
    Strategy::Bas { schedule: BasSchedule::default(), final_rule: Default::default() }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub tasks: Option<PathBuf>,
    pub engine: EngineConfig,
    #[serde(default = "synthetic_policy")]
    pub policy: PolicyDescriptor,
    #[serde(default = "oracle_reward")]
    pub reward: RewardDescriptor,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            tasks: None,
            engine: EngineConfig::default(),
            policy: synthetic_policy(),
            reward: oracle_reward(),
            strategy: default_strategy(),
            seed: 0,
            out: None,
            csv: None,
            manifest: None,
        }
    }
}

/// Fills per-strategy parameter defaults into a raw `strategy` object.
pub fn fill_strategy_defaults(raw: &mut Map<String, Value>) {
    let Some(Value::Object(s)) = raw.get_mut("strategy") else {
        return;
    };
    let tag = s.get("strategy").and_then(Value::as_str).unwrap_or("bas").to_string();
    s.insert("strategy".into(), Value::from(tag.as_str()));
    let defaults: &[(&str, Value)] = match tag.as_str() {
        "best_of_n" | "step_best_of_n" => &[("n", Value::from(8))],
        "beam" => &[("width", Value::from(4))],
        "bas" => &[("b0", Value::from(12)), ("k", Value::from(1)), ("epsilon", Value::from(2))],
        _ => &[],
    };
    for (k, v) in defaults {
        s.entry(k.to_string()).or_insert_with(|| v.clone());
    }
}

fn search(mut raw: Map<String, Value>, quiet: bool, started: u64) -> CliResult<Completed> {
    fill_strategy_defaults(&mut raw);
    let (mut cfg, _) = resolve::<SearchConfig>(raw)?;
    let tasks = required(&cfg.tasks, "tasks")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    let csv_path = cfg.csv.get_or_insert_with(|| out.with_extension("csv")).clone();
    let manifest = cfg.manifest.get_or_insert_with(|| sibling(&out, "manifest.json")).clone();
    if csv_path == out {
        return Err(CliError::usage("csv and out must differ"));
    }

    let (suite, problems, tasks_artifact) = load_suite(&tasks)?;
    let policy = with_api_key(&cfg.policy).build(&cfg.engine, Some(&suite))?;
    let reward = cfg.reward.build(&cfg.engine, Some(&suite))?;
    let progress = Progress::new(format!("search {}", cfg.strategy), problems.len(), quiet);
    let report =
        run_suite_with_progress(&problems, &cfg.strategy, policy.as_ref(), reward.as_ref(), cfg.seed, &|| {
            progress.tick()
        })?;
    report.write_files(&out, &csv_path)?;
    say!(
        quiet,
        "{}: accuracy {:.4}, mean token ratio {:.3}, {} failed",
        report.strategy,
        report.accuracy,
        report.mean_token_ratio,
        report.failures
    );

    let mut inputs = vec![tasks_artifact];
    inputs.extend(policy_inputs(&cfg.policy)?);
    inputs.extend(reward_inputs(&cfg.reward)?);
    Run {
        command: "search",
        snapshot: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        started,
        inputs,
        outputs: vec![Artifact::of("out", &out)?, Artifact::of("csv", &csv_path)?],
    }
    .finish(&manifest, None)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TtsConfig {
    pub tasks: Option<PathBuf>,
    pub engine: EngineConfig,
    #[serde(default = "synthetic_policy")]
    pub policy: PolicyDescriptor,
    #[serde(default = "oracle_reward")]
    pub reward: RewardDescriptor,
    pub seed: u64,
    pub bas_b0: Vec<usize>,
    pub bas_eps: Vec<usize>,
    pub bas_k: Rate,
    pub bon_n: Vec<usize>,
    pub step_bon_n: Vec<usize>,
    pub out: Option<PathBuf>,
    pub manifest: Option<PathBuf>,
}

impl Default for TtsConfig {
    fn default() -> Self {
        TtsConfig {
            tasks: None,
            engine: EngineConfig::default(),
            policy: synthetic_policy(),
            reward: oracle_reward(),
            seed: 0,
            bas_b0: (1..=14).collect(),
            bas_eps: vec![1, 2],
            bas_k: Rate::integer(1),
            bon_n: vec![1, 2, 4, 8, 16],
            step_bon_n: Vec::new(),
            out: None,
            manifest: None,
        }
    }
}

/// One grid point of a test-time scaling curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub strategy: String,
    pub config: String,
    pub mean_token_ratio: Option<f64>,
    pub accuracy: Option<f64>,
    pub failures: Option<usize>,
    pub error: Option<String>,
}

fn grid(cfg: &TtsConfig) -> Vec<(&'static str, String, Strategy)> {
    let mut points = Vec::new();
    for &eps in &cfg.bas_eps {
        for &b0 in &cfg.bas_b0 {
            let schedule = BasSchedule { b0, k: cfg.bas_k, epsilon: eps, expansion: 1 };
            points.push(("bas", schedule.to_string(), Strategy::Bas { schedule, final_rule: Default::default() }));
        }
    }
    for &n in &cfg.bon_n {
        points.push(("bon", format!("n={n}"), Strategy::BestOfN { n }));
    }
    for &n in &cfg.step_bon_n {
        points.push(("step_bon", format!("n={n}"), Strategy::StepBestOfN { n }));
    }
    points
}

/// Successful rows by ascending token ratio, then failed rows; ties keep
/// grid order.
pub fn sort_rows(rows: &mut [CurveRow]) {
    rows.sort_by(|a, b| match (a.mean_token_ratio, b.mean_token_ratio) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Core(beamprm::Error::Validation { line: e.position().map(|p| p.line() as usize), message: e.to_string() })
}

fn tts_curve(raw: Map<String, Value>, quiet: bool, started: u64) -> CliResult<Completed> {
    let (mut cfg, _) = resolve::<TtsConfig>(raw)?;
    let tasks = required(&cfg.tasks, "tasks")?.to_path_buf();
    let out = required(&cfg.out, "out")?.to_path_buf();
    let manifest = cfg.manifest.get_or_insert_with(|| sibling(&out, "manifest.json")).clone();
    let points = grid(&cfg);
    if points.is_empty() {
        return Err(CliError::usage("empty strategy grid"));
    }

    let (suite, problems, tasks_artifact) = load_suite(&tasks)?;
    let policy = with_api_key(&cfg.policy).build(&cfg.engine, Some(&suite))?;
    let reward = cfg.reward.build(&cfg.engine, Some(&suite))?;
    let progress = Progress::new("tts-curve", points.len() * problems.len(), quiet);
    let mut rows: Vec<CurveRow> = points
        .into_iter()
        .map(|(name, config, strategy)| {
            let result = strategy.validate().and_then(|_| {
                run_suite_with_progress(&problems, &strategy, policy.as_ref(), reward.as_ref(), cfg.seed, &|| {
                    progress.tick()
                })
            });
            match result {
                Ok(r) => CurveRow {
                    strategy: name.into(),
                    config,
                    mean_token_ratio: Some(r.mean_token_ratio),
                    accuracy: Some(r.accuracy),
                    failures: Some(r.failures),
                    error: None,
                },
                Err(e) => {
                    eprintln!("grid point {name}({config}) failed: {e}");
                    CurveRow {
                        strategy: name.into(),
                        config,
                        mean_token_ratio: None,
                        accuracy: None,
                        failures: None,
                        error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect();
    sort_rows(&mut rows);
    let mut w = csv::Writer::from_path(&out).map_err(csv_error)?;
    for row in &rows {
        w.serialize(row).map_err(csv_error)?;
    }
    w.flush()?;
    say!(quiet, "wrote {} curve rows to {}", rows.len(), out.display());

    let mut inputs = vec![tasks_artifact];
    inputs.extend(policy_inputs(&cfg.policy)?);
    inputs.extend(reward_inputs(&cfg.reward)?);
    Run {
        command: "tts-curve",
        snapshot: serde_json::to_value(&cfg)?,
        seed: cfg.seed,
        started,
        inputs,
        outputs: vec![Artifact::of("out", &out)?],
    }
    .finish(&manifest, None)
}

/// Re-runs a manifest's command into a scratch directory and compares output
/// hashes. Inputs must still match their recorded hashes.
pub fn verify_manifest(path: &Path) -> CliResult<Vec<(String, bool)>> {
    let m = RunManifest::read(path)?;
    for input in &m.inputs {
        let now = crate::manifest::sha256_file(&input.path)?;
        if now != input.sha256 {
            return Err(CliError::Mismatch(format!("input {} changed", input.path.display())));
        }
    }
    let Value::Object(mut config) = m.config.clone() else {
        return Err(CliError::Mismatch("config snapshot is not an object".into()));
    };
    if config.get("policy").and_then(|p| p.get("kind")).and_then(Value::as_str) == Some("http") {
        return Err(CliError::usage("runs against an HTTP policy are not reproducible from a manifest"));
    }
    let scratch = std::env::temp_dir().join(format!("beamprm-verify-{}-{}", std::process::id(), unix_ms()));
    fs::create_dir_all(&scratch)?;
    let result = (|| {
        for (i, out) in m.outputs.iter().enumerate() {
            let name = out.path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            config.insert(out.key.clone(), Value::from(scratch.join(format!("{i}-{name}")).to_string_lossy().as_ref()));
        }
        config.insert("manifest".into(), Value::from(scratch.join("manifest.json").to_string_lossy().as_ref()));
        let rerun = execute(&m.command, config, true)?;
        Ok::<_, CliError>(
            m.outputs
                .iter()
                .map(|o| {
                    let reproduced = rerun.manifest.outputs.iter().any(|r| r.key == o.key && r.sha256 == o.sha256);
                    let on_disk = crate::manifest::sha256_file(&o.path).is_ok_and(|h| h == o.sha256);
                    (o.key.clone(), reproduced && on_disk)
                })
                .collect(),
        )
    })();
    let _ = fs::remove_dir_all(&scratch);
    result
}
