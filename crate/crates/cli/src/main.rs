//! `beamprm`: generate synthetic suites, construct step-reward data, train a
//! scorer, run searches and emit test-time scaling curves. Every run writes a
//! manifest that `verify-manifest` can replay.

mod commands;
mod config;
mod error;
mod manifest;
mod progress;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::config::{merge, read_config_file, Overrides};
use crate::error::{CliError, CliResult};

#[derive(Parser)]
#[command(name = "beamprm", version, about = "Reward-guided step-level search toolkit")]
struct Cli {
    /// JSON file mirroring the subcommand's flags; flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Suppress progress and summary lines.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic task suite.
    GenTasks(GenTasksArgs),
    /// Label step candidates by rollouts and write a dataset plus statistics.
    ConstructData(ConstructArgs),
    /// Train a scorer checkpoint on a constructed dataset.
    TrainPrm(TrainArgs),
    /// Run one strategy over a suite.
    Search(SearchArgs),
    /// Sweep strategy grids and emit accuracy against token ratio.
    TtsCurve(TtsArgs),
    /// Re-run a manifest and compare output hashes.
    VerifyManifest { manifest: PathBuf },
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Shaped,
    Flat,
    Deterministic,
}

#[derive(Args)]
struct GenTasksArgs {
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    depth_min: Option<usize>,
    #[arg(long)]
    depth_max: Option<usize>,
    #[arg(long)]
    branching: Option<usize>,
    #[arg(long, value_enum)]
    profile: Option<Profile>,
    /// Per-step slip for the flat profile.
    #[arg(long)]
    slip: Option<f64>,
    #[arg(long)]
    recovery_prob: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl GenTasksArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        o.set("count", self.count)
            .set("depth_min", self.depth_min)
            .set("depth_max", self.depth_max)
            .set("branching", self.branching)
            .set("recovery_prob", self.recovery_prob)
            .set("seed", self.seed)
            .set("out", self.out.as_ref())
            .set("manifest", self.manifest.as_ref());
        let kind = match (self.profile, self.slip) {
            (Some(Profile::Shaped), _) => Some("shaped"),
            (Some(Profile::Deterministic), _) => Some("deterministic"),
            (Some(Profile::Flat), _) | (None, Some(_)) => Some("flat"),
            (None, None) => None,
        };
        if let Some(kind) = kind {
            let mut p = json!({ "kind": kind });
            if let Some(s) = self.slip {
                p["slip"] = json!(s);
            }
            o.set_value("profile", p);
        }
        o.into_map()
    }
}

#[derive(Args)]
struct EngineArgs {
    #[arg(long)]
    segment_length: Option<u32>,
    #[arg(long)]
    max_steps: Option<usize>,
}

impl EngineArgs {
    fn apply(&self, o: &mut Overrides) {
        let mut e = Map::new();
        if let Some(l) = self.segment_length {
            e.insert("segment_length".into(), json!(l));
        }
        if let Some(t) = self.max_steps {
            e.insert("max_steps".into(), json!(t));
        }
        if !e.is_empty() {
            o.set_value("engine", Value::Object(e));
        }
    }
}

#[derive(Args)]
struct PolicyArgs {
    /// Scripted continuations instead of the synthetic policy.
    #[arg(long, conflicts_with = "endpoint")]
    replay: Option<PathBuf>,
    /// Chat-completions base URL; the bearer token is read from BEAMPRM_API_KEY.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    concurrency: Option<usize>,
}

impl PolicyArgs {
    fn apply(&self, o: &mut Overrides) {
        if let Some(script) = &self.replay {
            o.set_value("policy", json!({ "kind": "replay", "script": script }));
            return;
        }
        let mut p = Map::new();
        if let Some(e) = &self.endpoint {
            p.insert("endpoint".into(), json!(e));
        }
        if let Some(m) = &self.model {
            p.insert("model_name".into(), json!(m));
        }
        if let Some(t) = self.temperature {
            p.insert("temperature".into(), json!(t));
        }
        if let Some(c) = self.concurrency {
            p.insert("concurrency_limit".into(), json!(c));
        }
        if !p.is_empty() {
            p.insert("kind".into(), json!("http"));
            o.set_value("policy", Value::Object(p));
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RewardKind {
    Oracle,
    Learned,
    Constant,
}

#[derive(Args)]
struct RewardArgs {
    #[arg(long, value_enum)]
    reward: Option<RewardKind>,
    /// Scorer checkpoint; implies `--reward learned`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score for `--reward constant`.
    #[arg(long)]
    reward_value: Option<f64>,
}

impl RewardArgs {
    fn apply(&self, o: &mut Overrides) {
        let mut r = Map::new();
        let kind = match self.reward {
            Some(RewardKind::Oracle) => Some("oracle"),
            Some(RewardKind::Learned) => Some("learned"),
            Some(RewardKind::Constant) => Some("constant"),
            None if self.checkpoint.is_some() => Some("learned"),
            None if self.reward_value.is_some() => Some("constant"),
            None => None,
        };
        if let Some(k) = kind {
            r.insert("kind".into(), json!(k));
        }
        if let Some(c) = &self.checkpoint {
            r.insert("checkpoint".into(), json!(c));
        }
        if let Some(v) = self.reward_value {
            r.insert("value".into(), json!(v));
        }
        if !r.is_empty() {
            o.set_value("reward", Value::Object(r));
        }
    }
}

#[derive(Args)]
struct ConstructArgs {
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// Candidates per state at every step (replaces the default schedule).
    #[arg(long, requires = "n")]
    m: Option<usize>,
    /// Rollouts per candidate at every step.
    #[arg(long, requires = "m")]
    n: Option<usize>,
    #[arg(long)]
    max_ratio: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    stats: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
}

impl ConstructArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        o.set("tasks", self.tasks.as_ref())
            .set("seed", self.seed)
            .set("out", self.out.as_ref())
            .set("stats", self.stats.as_ref())
            .set("manifest", self.manifest.as_ref());
        if let (Some(m), Some(n)) = (self.m, self.n) {
            o.set_value("schedule", json!({ "early": [], "tail": [m, n] }));
        }
        let mut b = Map::new();
        for (k, v) in [("max_ratio", self.max_ratio.map(Value::from)), ("threshold", self.threshold.map(Value::from))] {
            if let Some(v) = v {
                b.insert(k.into(), v);
            }
        }
        if let Some(c) = self.cap {
            b.insert("cap".into(), json!(c));
        }
        if !b.is_empty() {
            o.set_value("balance", Value::Object(b));
        }
        self.engine.apply(&mut o);
        self.policy.apply(&mut o);
        o.into_map()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelModeArg {
    Soft,
    Hard,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    label_mode: Option<LabelModeArg>,
    #[arg(long)]
    hard_threshold: Option<f64>,
    /// Train on the value loss only.
    #[arg(long)]
    no_rank: bool,
    /// Hidden layer widths, e.g. `16` or `32,16`.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

impl TrainArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        o.set("dataset", self.dataset.as_ref())
            .set("lambda", self.lambda)
            .set("delta", self.delta)
            .set("epochs", self.epochs)
            .set("batch_size", self.batch_size)
            .set("learning_rate", self.learning_rate)
            .set(
                "label_mode",
                self.label_mode.map(|m| match m {
                    LabelModeArg::Soft => "soft",
                    LabelModeArg::Hard => "hard",
                }),
            )
            .set("hard_threshold", self.hard_threshold)
            .set("include_rank", self.no_rank.then_some(false))
            .set("hidden_dims", self.hidden.as_ref())
            .set("seed", self.seed)
            .set("out", self.out.as_ref())
            .set("history", self.history.as_ref())
            .set("manifest", self.manifest.as_ref());
        o.into_map()
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Single,
    Bon,
    StepBon,
    Beam,
    Bas,
}

#[derive(Clone, Copy, ValueEnum)]
enum FinalRuleArg {
    LastStep,
    Mean,
    Min,
}

#[derive(Args)]
struct SearchArgs {
    #[arg(long)]
    tasks: Option<PathBuf>,
    #[arg(long, value_enum)]
    strategy: Option<StrategyArg>,
    /// Samples for `bon` and `step-bon`.
    #[arg(long)]
    n: Option<usize>,
    /// Width for `beam`.
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    b0: Option<usize>,
    /// Annealing rate: integer, decimal or fraction such as `1/3`.
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    eps: Option<usize>,
    /// Candidates per surviving beam.
    #[arg(long)]
    expansion: Option<usize>,
    #[arg(long, value_enum)]
    final_rule: Option<FinalRuleArg>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    reward: RewardArgs,
}

impl SearchArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        o.set("tasks", self.tasks.as_ref())
            .set("seed", self.seed)
            .set("out", self.out.as_ref())
            .set("csv", self.csv.as_ref())
            .set("manifest", self.manifest.as_ref());
        let mut s = Map::new();
        if let Some(st) = self.strategy {
            let tag = match st {
                StrategyArg::Single => "single",
                StrategyArg::Bon => "best_of_n",
                StrategyArg::StepBon => "step_best_of_n",
                StrategyArg::Beam => "beam",
                StrategyArg::Bas => "bas",
            };
            s.insert("strategy".into(), json!(tag));
        }
        let numbers = [
            ("n", self.n),
            ("width", self.width),
            ("b0", self.b0),
            ("epsilon", self.eps),
            ("expansion", self.expansion),
        ];
        for (k, v) in numbers {
            if let Some(v) = v {
                s.insert(k.into(), json!(v));
            }
        }
        if let Some(k) = &self.k {
            s.insert("k".into(), json!(k));
        }
        if let Some(r) = self.final_rule {
            let r = match r {
                FinalRuleArg::LastStep => "last_step",
                FinalRuleArg::Mean => "mean",
                FinalRuleArg::Min => "min",
            };
            s.insert("final_rule".into(), json!(r));
        }
        if !s.is_empty() {
            o.set_value("strategy", Value::Object(s));
        }
        self.engine.apply(&mut o);
        self.policy.apply(&mut o);
        self.reward.apply(&mut o);
        o.into_map()
    }
}

/// `1-14`, `1,2,4` or `none`.
fn parse_list(s: &str) -> Result<Vec<usize>, String> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("none") || s.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        if let Some((a, b)) = part.split_once('-') {
            let a: usize = a.trim().parse().map_err(|e| format!("{part}: {e}"))?;
            let b: usize = b.trim().parse().map_err(|e| format!("{part}: {e}"))?;
            if a > b {
                return Err(format!("empty range {part}"));
            }
            out.extend(a..=b);
        } else {
            out.push(part.parse().map_err(|e| format!("{part}: {e}"))?);
        }
    }
    Ok(out)
}

#[derive(Args)]
struct TtsArgs {
    #[arg(long)]
    tasks: Option<PathBuf>,
    /// BAS initial widths, e.g. `1-14`.
    #[arg(long, value_parser = parse_list)]
    bas_b0: Option<Vec<usize>>,
    /// BAS width floors, e.g. `1,2`.
    #[arg(long, value_parser = parse_list)]
    bas_eps: Option<Vec<usize>>,
    #[arg(long)]
    bas_k: Option<String>,
    /// Best-of-N sample counts, or `none`.
    #[arg(long, value_parser = parse_list)]
    bon_n: Option<Vec<usize>>,
    /// Step-level best-of-N sample counts, or `none`.
    #[arg(long, value_parser = parse_list)]
    step_bon_n: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    engine: EngineArgs,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    reward: RewardArgs,
}

impl TtsArgs {
    fn overrides(&self) -> Map<String, Value> {
        let mut o = Overrides::default();
        o.set("tasks", self.tasks.as_ref())
            .set("bas_b0", self.bas_b0.as_ref())
            .set("bas_eps", self.bas_eps.as_ref())
            .set("bas_k", self.bas_k.as_ref())
            .set("bon_n", self.bon_n.as_ref())
            .set("step_bon_n", self.step_bon_n.as_ref())
            .set("seed", self.seed)
            .set("out", self.out.as_ref())
            .set("manifest", self.manifest.as_ref());
        self.engine.apply(&mut o);
        self.policy.apply(&mut o);
        self.reward.apply(&mut o);
        o.into_map()
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let (name, overrides) = match &cli.command {
        Command::GenTasks(a) => ("gen-tasks", a.overrides()),
        Command::ConstructData(a) => ("construct-data", a.overrides()),
        Command::TrainPrm(a) => ("train-prm", a.overrides()),
        Command::Search(a) => ("search", a.overrides()),
        Command::TtsCurve(a) => ("tts-curve", a.overrides()),
        Command::VerifyManifest { manifest } => {
            if cli.config.is_some() {
                return Err(CliError::usage("verify-manifest takes no --config"));
            }
            let results = commands::verify_manifest(manifest)?;
            let mut bad = Vec::new();
            for (key, same) in results {
                println!("{} {key}", if same { "ok" } else { "MISMATCH" });
                if !same {
                    bad.push(key);
                }
            }
            return if bad.is_empty() {
                Ok(())
            } else {
                Err(CliError::Mismatch(format!("outputs differ: {}", bad.join(", "))))
            };
        }
    };
    let mut raw = read_config_file(cli.config.as_deref())?;
    merge(&mut raw, overrides);
    let done = commands::execute(name, raw, cli.quiet)?;
    if !cli.quiet {
        println!("manifest: {}", done.manifest_path.display());
    }
    match done.deferred {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn list_syntax() {
        assert_eq!(parse_list("1-4").unwrap(), vec![1, 2, 3, 4]);
        assert_eq!(parse_list("1,2, 8").unwrap(), vec![1, 2, 8]);
        assert_eq!(parse_list("1-2,5").unwrap(), vec![1, 2, 5]);
        assert!(parse_list("none").unwrap().is_empty());
        assert!(parse_list("4-1").is_err());
        assert!(parse_list("x").is_err());
    }

    #[test]
    fn cli_shape() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
