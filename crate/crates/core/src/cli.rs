//! The `uqselect` command line.
//!
//! Every subcommand resolves one [`RunConfig`] (defaults, then the `--config`
//! JSON file, then explicit flags) and writes it to `config.json` in the
//! output directory next to its results. Exit codes: 0 success, 1 usage
//! error, 2 data error, 3 numeric failure.

use std::collections::{BTreeMap, HashMap};
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::conformal::{evaluate_coverage, DEFAULT_ALPHA};
use crate::controller::{calibrate_thresholds, ControllerConfig};
use crate::epistemic::Weights;
use crate::error::{Error, ErrorClass, Result};
use crate::eval::{
    binned_mean, gate_ablation, generate_synth, generate_trace, pearson, AblationConfig,
    MetricsReport, SynthConfig, TraceSynthConfig, DEFAULT_BINS,
};
use crate::feature_store::{FeatureStore, ModelBundle, SplitMode, SplitSpec};
use crate::pipeline::{self, PipelineConfig, Predictions, RecordScore, Scorer};
use crate::policy::{
    run_policy, train_policy, write_train_log, PolicyCheckpoint, RewardConfig, RunOptions,
    TrainConfig,
};
use crate::trace::{simulate_thresholds, write_decisions_csv, ActionSet, Trace};

#[derive(Debug, Parser)]
#[command(name = "uqselect", version, about = "Uncertainty decomposition, conformal intervals and model selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Input file; repeat for commands that take several.
    #[arg(long, global = true)]
    input: Vec<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// JSON run config; explicit flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Miscoverage level of the conformal intervals.
    #[arg(long, global = true)]
    alpha: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit density, epistemic and calibration models on a feature store.
    Calibrate(CalibrateArgs),
    /// Score records with a fitted bundle.
    Score(ScoreArgs),
    /// Conformal intervals for records, with coverage when labels exist.
    Intervals(IntervalsArgs),
    /// Replay threshold gating or a trained policy over a trace.
    Simulate(SimulateArgs),
    /// Train a Double-DQN selection policy on traces.
    TrainPolicy(TrainArgs),
    /// Collect metrics files into one summary.
    Report(ReportArgs),
    /// Generate a synthetic feature store or trace.
    GenSynth(SynthArgs),
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Only use records of this sequence.
    #[arg(long)]
    sequence: Option<String>,
    #[arg(long, value_enum)]
    split: Option<SplitArg>,
    /// Calibration share for `--split fraction`.
    #[arg(long)]
    fraction: Option<f64>,
    /// CSV `id,y_hat` of point predictions; defaults to `1 - confidence`.
    #[arg(long)]
    predictions: Option<PathBuf>,
    /// Fixed epistemic weights `supp,rank,grad` instead of the search.
    #[arg(long, value_parser = parse_weights)]
    weights: Option<Weights>,
    #[arg(long)]
    lambda: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SplitArg {
    Track,
    Fraction,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Calibration store of the bundle; defaults to `calibration.jsonl` next to it.
    #[arg(long)]
    calibration: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct IntervalsArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    bundle: Option<PathBuf>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    predictions: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Policy checkpoint; without it the threshold controller runs.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    tau_alea: Option<f64>,
    #[arg(long)]
    tau_epis: Option<f64>,
    /// Derive thresholds from the trace's own uncertainty scores.
    #[arg(long)]
    target_escalation_rate: Option<f64>,
    /// `scores.csv` whose uncertainties replace the trace's, joined on sequence and frame.
    #[arg(long)]
    scores: Option<PathBuf>,
    #[arg(long)]
    base: Option<String>,
    #[arg(long)]
    escalate_to: Option<String>,
    /// Also compare decomposed and total-uncertainty gating.
    #[arg(long)]
    ablation: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    steps: Option<usize>,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "store")]
    kind: SynthKind,
    /// Number of records (store).
    #[arg(long)]
    n: Option<usize>,
    /// Feature dimension (store).
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    shift_fraction: Option<f64>,
    /// Number of sequences (trace).
    #[arg(long)]
    sequences: Option<usize>,
    #[arg(long)]
    frames_per_sequence: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    #[default]
    Store,
    Trace,
}

fn parse_weights(s: &str) -> std::result::Result<Weights, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match parts[..] {
        [supp, rank, grad] => Weights::new(supp, rank, grad).map_err(|e| e.to_string()),
        _ => Err("expected three comma-separated weights".into()),
    }
}

/// The fully resolved configuration of one run.
///
/// `seed` and `alpha` are the single source for every nested seed and for the
/// calibration level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub subcommand: String,
    pub input: Vec<PathBuf>,
    pub output: PathBuf,
    pub alpha: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
    pub split: SplitSpec,
    pub sequence: Option<String>,
    pub predictions: Option<PathBuf>,
    pub bundle: Option<PathBuf>,
    pub calibration: Option<PathBuf>,
    pub scores: Option<PathBuf>,
    pub policy: Option<PathBuf>,
    pub controller: ControllerConfig,
    pub target_escalation_rate: Option<f64>,
    pub base: String,
    pub escalate_to: String,
    pub actions: ActionSet,
    pub train: TrainConfig,
    pub reward: RewardConfig,
    pub run: RunOptions,
    pub ablation: Option<AblationConfig>,
    pub synth_kind: SynthKind,
    pub synth: SynthConfig,
    pub trace_synth: TraceSynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            subcommand: String::new(),
            input: Vec::new(),
            output: PathBuf::from("."),
            alpha: DEFAULT_ALPHA,
            seed: 0,
            pipeline: PipelineConfig::default(),
            split: SplitSpec::default(),
            sequence: None,
            predictions: None,
            bundle: None,
            calibration: None,
            scores: None,
            policy: None,
            controller: ControllerConfig::default(),
            target_escalation_rate: None,
            base: "nano".into(),
            escalate_to: "xlarge".into(),
            actions: ActionSet::default(),
            train: TrainConfig::default(),
            reward: RewardConfig::default(),
            run: RunOptions::default(),
            ablation: None,
            synth_kind: SynthKind::Store,
            synth: SynthConfig::default(),
            trace_synth: TraceSynthConfig::default(),
        }
    }
}

impl RunConfig {
    fn base(common: &Common, subcommand: &str) -> Result<Self> {
        let mut cfg = match &common.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&text)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            }
            None => RunConfig::default(),
        };
        cfg.subcommand = subcommand.into();
        if !common.input.is_empty() {
            cfg.input = common.input.clone();
        }
        set(&mut cfg.output, common.output.clone());
        set(&mut cfg.seed, common.seed);
        set(&mut cfg.alpha, common.alpha);
        Ok(cfg)
    }

    /// Pushes `seed` and `alpha` into the nested configs and validates.
    fn finish(mut self) -> Result<Self> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        self.pipeline.calibration.alpha = self.alpha;
        self.split.seed = self.seed;
        self.train.seed = self.seed;
        self.run.seed = self.seed;
        self.synth.seed = self.seed;
        self.trace_synth.seed = self.seed;
        self.actions.validate()?;
        Ok(self)
    }

    fn single_input(&self) -> Result<&Path> {
        match self.input.as_slice() {
            [p] => Ok(p),
            [] => Err(Error::Config(format!("{} needs --input", self.subcommand))),
            _ => Err(Error::Config(format!("{} takes exactly one --input", self.subcommand))),
        }
    }

    fn prepare_output(&self) -> Result<()> {
        fs::create_dir_all(&self.output).map_err(|e| Error::io(&self.output, e))?;
        write_json(self.output.join("config.json"), self)
    }

    fn out(&self, name: &str) -> PathBuf {
        self.output.join(name)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn write_json(path: impl AsRef<Path>, value: &impl Serialize) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs the CLI on the process arguments and returns the exit code.
pub fn main() -> i32 {
    run(std::env::args_os())
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Usage => 1,
                ErrorClass::Data => 2,
                ErrorClass::Numeric => 3,
            }
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Calibrate(a) => {
            let mut cfg = RunConfig::base(&a.common, "calibrate")?;
            set(&mut cfg.pipeline.lambda, a.lambda);
            if a.weights.is_some() {
                cfg.pipeline.weights = a.weights;
            }
            if a.sequence.is_some() {
                cfg.sequence = a.sequence;
            }
            if a.predictions.is_some() {
                cfg.predictions = a.predictions;
            }
            match a.split {
                Some(SplitArg::Track) => cfg.split.mode = SplitMode::ByTrackIdentity,
                Some(SplitArg::Fraction) => cfg.split.mode = SplitMode::ByFraction,
                None => {}
            }
            set(&mut cfg.split.fraction, a.fraction);
            cmd_calibrate(&cfg.finish()?)
        }
        Command::Score(a) => {
            let mut cfg = RunConfig::base(&a.common, "score")?;
            if a.bundle.is_some() {
                cfg.bundle = a.bundle;
            }
            if a.calibration.is_some() {
                cfg.calibration = a.calibration;
            }
            cmd_score(&cfg.finish()?)
        }
        Command::Intervals(a) => {
            let mut cfg = RunConfig::base(&a.common, "intervals")?;
            if a.bundle.is_some() {
                cfg.bundle = a.bundle;
            }
            if a.calibration.is_some() {
                cfg.calibration = a.calibration;
            }
            if a.predictions.is_some() {
                cfg.predictions = a.predictions;
            }
            cmd_intervals(&cfg.finish()?)
        }
        Command::Simulate(a) => {
            let mut cfg = RunConfig::base(&a.common, "simulate")?;
            if a.policy.is_some() {
                cfg.policy = a.policy;
            }
            set(&mut cfg.controller.tau_alea, a.tau_alea);
            set(&mut cfg.controller.tau_epis, a.tau_epis);
            if a.target_escalation_rate.is_some() {
                cfg.target_escalation_rate = a.target_escalation_rate;
            }
            if a.scores.is_some() {
                cfg.scores = a.scores;
            }
            set(&mut cfg.base, a.base);
            set(&mut cfg.escalate_to, a.escalate_to);
            if a.ablation && cfg.ablation.is_none() {
                cfg.ablation = Some(AblationConfig::default());
            }
            let cfg = cfg.finish()?;
            if cfg.policy.is_some() && cfg.target_escalation_rate.is_some() {
                return Err(Error::Config(
                    "--policy and --target-escalation-rate are mutually exclusive".into(),
                ));
            }
            cmd_simulate(&cfg)
        }
        Command::TrainPolicy(a) => {
            let mut cfg = RunConfig::base(&a.common, "train-policy")?;
            set(&mut cfg.train.steps, a.steps);
            cmd_train_policy(&cfg.finish()?)
        }
        Command::Report(a) => cmd_report(&RunConfig::base(&a.common, "report")?.finish()?),
        Command::GenSynth(a) => {
            let mut cfg = RunConfig::base(&a.common, "gen-synth")?;
            cfg.synth_kind = a.kind;
            set(&mut cfg.synth.n, a.n);
            set(&mut cfg.synth.d, a.d);
            set(&mut cfg.synth.shift_fraction, a.shift_fraction);
            set(&mut cfg.trace_synth.sequences, a.sequences);
            set(&mut cfg.trace_synth.frames_per_sequence, a.frames_per_sequence);
            cmd_gen_synth(&cfg.finish()?)
        }
    }
}

#[derive(Debug, Deserialize)]
struct PredictionRow {
    id: String,
    y_hat: f64,
}

fn load_predictions(path: &Path) -> Result<Predictions> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = HashMap::new();
    for row in r.deserialize() {
        let row: PredictionRow = row?;
        if !row.y_hat.is_finite() {
            return Err(Error::Store(format!(
                "{}: non-finite prediction for `{}`",
                path.display(),
                row.id
            )));
        }
        if out.insert(row.id.clone(), row.y_hat).is_some() {
            return Err(Error::Store(format!(
                "{}: duplicate prediction for `{}`",
                path.display(),
                row.id
            )));
        }
    }
    Ok(out)
}

fn optional_predictions(cfg: &RunConfig) -> Result<Option<Predictions>> {
    cfg.predictions.as_deref().map(load_predictions).transpose()
}

#[derive(Debug, Serialize)]
struct FitReport<'a> {
    n_calibration: usize,
    n_test: usize,
    weights: Weights,
    weight_fit: Option<&'a crate::epistemic::WeightFit>,
    q_global: f64,
    leaf_count: usize,
    pearson_alea_epis: Option<f64>,
}

pub fn cmd_calibrate(cfg: &RunConfig) -> Result<()> {
    let mut store = FeatureStore::load(cfg.single_input()?)?;
    if let Some(seq) = &cfg.sequence {
        store = store.sequence(seq)?;
    }
    let (cal, test) = store.split(&cfg.split)?;
    info!("calibrate: {} calibration, {} test records", cal.len(), test.len());
    let predictions = optional_predictions(cfg)?;
    let fitted = pipeline::fit(&cal, predictions.as_ref(), None, &cfg.pipeline)?;
    cfg.prepare_output()?;
    fitted.bundle.save(cfg.out("bundle.json"))?;
    cal.save(cfg.out("calibration.jsonl"))?;
    test.save(cfg.out("test.jsonl"))?;
    let alea: Vec<f64> = fitted.calibration_scores.iter().map(|s| s.sigma_alea).collect();
    let epis: Vec<f64> = fitted.calibration_scores.iter().map(|s| s.sigma_epis).collect();
    write_json(
        cfg.out("fit_report.json"),
        &FitReport {
            n_calibration: cal.len(),
            n_test: test.len(),
            weights: fitted.bundle.epistemic.weights,
            weight_fit: fitted.weight_fit.as_ref(),
            q_global: fitted.bundle.calibration.q_global,
            leaf_count: fitted.bundle.calibration.leaf_count(),
            pearson_alea_epis: pearson(&alea, &epis).ok(),
        },
    )
}

fn load_scorer(cfg: &RunConfig) -> Result<(ModelBundle, Scorer)> {
    let bundle_path = cfg
        .bundle
        .as_deref()
        .ok_or_else(|| Error::Config(format!("{} needs --bundle", cfg.subcommand)))?;
    let bundle = ModelBundle::load(bundle_path)?;
    let cal_path = match &cfg.calibration {
        Some(p) => p.clone(),
        None => bundle_path.with_file_name("calibration.jsonl"),
    };
    let cal = FeatureStore::load(&cal_path)?;
    let scorer = Scorer::from_bundle(&bundle, &cal)?;
    Ok((bundle, scorer))
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    id: String,
    sequence: String,
    frame: u64,
    mahalanobis: f64,
    sigma_alea: f64,
    sigma_epis: f64,
    supp: f64,
    rank: f64,
    grad: f64,
}

impl ScoreRow {
    fn new(record: &crate::FeatureRecord, s: &RecordScore) -> Self {
        ScoreRow {
            id: s.id.clone(),
            sequence: record.sequence.clone(),
            frame: record.frame,
            mahalanobis: s.mahalanobis,
            sigma_alea: s.sigma_alea,
            sigma_epis: s.sigma_epis,
            supp: s.components.supp,
            rank: s.components.rank,
            grad: s.components.grad,
        }
    }
}

pub fn cmd_score(cfg: &RunConfig) -> Result<()> {
    let store = FeatureStore::load(cfg.single_input()?)?;
    let (_, scorer) = load_scorer(cfg)?;
    let scores = scorer.score_store(&store)?;
    cfg.prepare_output()?;
    let path = cfg.out("scores.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (r, s) in store.records().iter().zip(&scores) {
        w.serialize(ScoreRow::new(r, s))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let alea: Vec<f64> = scores.iter().map(|s| s.sigma_alea).collect();
    let epis: Vec<f64> = scores.iter().map(|s| s.sigma_epis).collect();
    let mut report = MetricsReport {
        pearson_alea_epis: pearson(&alea, &epis).ok(),
        ..MetricsReport::default()
    };
    let labelled: Vec<(f64, f64)> = store
        .records()
        .iter()
        .zip(&alea)
        .filter_map(|(r, a)| r.conformity().map(|y| (*a, y)))
        .collect();
    if labelled.len() == store.len() {
        let (a, y): (Vec<f64>, Vec<f64>) = labelled.into_iter().unzip();
        report.pearson_alea_conformity = pearson(&a, &y).ok();
        report.per_bin_conformity = binned_mean(&a, &y, DEFAULT_BINS)?;
    }
    write_json(cfg.out("metrics.json"), &report)
}

#[derive(Debug, Serialize)]
struct IntervalRow<'a> {
    id: &'a str,
    model_id: &'a str,
    y_hat: f64,
    lo: f64,
    hi: f64,
    q: f64,
    source: String,
    y: Option<f64>,
    covered: Option<bool>,
}

#[derive(Debug, Serialize)]
struct CoverageRow<'a> {
    model_id: &'a str,
    alpha: f64,
    coverage: f64,
    mean_width: f64,
    n_test: usize,
}

pub fn cmd_intervals(cfg: &RunConfig) -> Result<()> {
    let store = FeatureStore::load(cfg.single_input()?)?;
    let (bundle, scorer) = load_scorer(cfg)?;
    let predictions = optional_predictions(cfg)?;
    let scores = scorer.score_store(&store)?;
    cfg.prepare_output()?;
    let path = cfg.out("intervals.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let mut by_model: BTreeMap<&str, Vec<_>> = BTreeMap::new();
    let mut all = Vec::new();
    for (r, s) in store.records().iter().zip(&scores) {
        let y_hat = pipeline::predicted_conformity(r, predictions.as_ref())?;
        let iv = pipeline::interval(&bundle.calibration, r, s, y_hat);
        let y = r.conformity();
        if let Some(y) = y {
            by_model.entry(r.model_id.as_str()).or_default().push((iv, y));
            all.push((iv, y));
        }
        w.serialize(IntervalRow {
            id: &r.id,
            model_id: &r.model_id,
            y_hat,
            lo: iv.lo,
            hi: iv.hi,
            q: iv.q_used,
            source: match iv.source {
                crate::conformal::QuantileSource::Global => "global".into(),
                crate::conformal::QuantileSource::Leaf(l) => format!("leaf{l}"),
            },
            y,
            covered: y.map(|y| iv.contains(y)),
        })?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = cfg.out("coverage.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let alpha = bundle.calibration.alpha;
    let mut overall = None;
    if !all.is_empty() {
        for (model_id, pairs) in by_model {
            let c = evaluate_coverage(pairs)?;
            w.serialize(CoverageRow { model_id, alpha, coverage: c.coverage, mean_width: c.mean_width, n_test: c.n_test })?;
        }
        let c = evaluate_coverage(all)?;
        w.serialize(CoverageRow { model_id: "all", alpha, coverage: c.coverage, mean_width: c.mean_width, n_test: c.n_test })?;
        overall = Some(c);
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    let report = MetricsReport {
        coverage: overall.map(|c| c.coverage),
        mean_width: overall.map(|c| c.mean_width),
        ..MetricsReport::default()
    };
    write_json(cfg.out("metrics.json"), &report)
}

/// Replaces the trace's uncertainties with scores joined on `(sequence, frame)`.
/// Frames with several scored records take the largest of each score.
fn apply_scores(trace: &Trace, path: &Path) -> Result<Trace> {
    let mut r = csv::Reader::from_path(path)?;
    let mut joined: HashMap<(String, u64), (f64, f64)> = HashMap::new();
    for row in r.deserialize() {
        let row: ScoreRow = row?;
        let e = joined
            .entry((row.sequence, row.frame))
            .or_insert((row.sigma_alea, row.sigma_epis));
        e.0 = e.0.max(row.sigma_alea);
        e.1 = e.1.max(row.sigma_epis);
    }
    let mut frames = trace.frames().to_vec();
    for f in &mut frames {
        let (a, e) = joined.get(&(f.sequence.clone(), f.frame)).ok_or_else(|| {
            Error::Trace(format!(
                "{}: no score for frame {}:{}",
                path.display(),
                f.sequence,
                f.frame
            ))
        })?;
        f.sigma_alea = *a;
        f.sigma_epis = *e;
    }
    Trace::from_frames(frames)
}

pub fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    let mut trace = Trace::load(cfg.single_input()?)?;
    if let Some(scores) = &cfg.scores {
        trace = apply_scores(&trace, scores)?;
    }
    let actions = &cfg.actions;
    trace.require_models(&actions.labels)?;
    let (result, decisions, resolved) = match &cfg.policy {
        Some(path) => {
            let ckpt = PolicyCheckpoint::load(path)?;
            if &ckpt.actions != actions {
                return Err(Error::Config(format!(
                    "{}: policy was trained on a different action set",
                    path.display()
                )));
            }
            (run_policy(&ckpt.net()?, &trace, actions, &cfg.run)?, None, None)
        }
        None => {
            let controller = match cfg.target_escalation_rate {
                Some(rate) => {
                    let alea: Vec<f64> = trace.frames().iter().map(|f| f.sigma_alea).collect();
                    let epis: Vec<f64> = trace.frames().iter().map(|f| f.sigma_epis).collect();
                    calibrate_thresholds(&alea, &epis, rate)?
                }
                None => cfg.controller,
            };
            let base = actions.resolve(&cfg.base)?;
            let up = actions.resolve(&cfg.escalate_to)?;
            let (r, d) = simulate_thresholds(&trace, actions, &controller, base, up)?;
            (r, Some(d), Some(controller))
        }
    };
    cfg.prepare_output()?;
    result.write_csv(cfg.out("simulation.csv"))?;
    if let Some(d) = &decisions {
        write_decisions_csv(cfg.out("decisions.csv"), &trace, d)?;
    }
    if let Some(c) = resolved {
        write_json(cfg.out("thresholds.json"), &c)?;
    }
    let mut report = MetricsReport::from_simulation(&result, actions)?;
    let alea: Vec<f64> = trace.frames().iter().map(|f| f.sigma_alea).collect();
    let epis: Vec<f64> = trace.frames().iter().map(|f| f.sigma_epis).collect();
    report.pearson_alea_epis = pearson(&alea, &epis).ok();
    write_json(cfg.out("metrics.json"), &report)?;
    if let Some(ab) = &cfg.ablation {
        write_json(cfg.out("ablation.json"), &gate_ablation(&trace, actions, ab)?)?;
    }
    Ok(())
}

pub fn cmd_train_policy(cfg: &RunConfig) -> Result<()> {
    if cfg.input.is_empty() {
        return Err(Error::Config("train-policy needs --input".into()));
    }
    let mut frames = Vec::new();
    for p in &cfg.input {
        frames.extend_from_slice(Trace::load(p)?.frames());
    }
    let trace = Trace::from_frames(frames)?;
    let trained = train_policy(&trace, &cfg.actions, &cfg.train, &cfg.reward)?;
    cfg.prepare_output()?;
    PolicyCheckpoint::new(&trained.online, &cfg.actions, &cfg.train, &cfg.reward)
        .save(cfg.out("policy.json"))?;
    write_train_log(cfg.out("train_log.csv"), &trained.log)
}

fn csv_as_json(path: &Path) -> Result<Value> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let obj: serde_json::Map<String, Value> = headers
            .iter()
            .zip(rec.iter())
            .map(|(h, v)| {
                let value = v
                    .parse::<f64>()
                    .ok()
                    .and_then(|x| serde_json::Number::from_f64(x).map(Value::Number))
                    .unwrap_or_else(|| Value::String(v.into()));
                (h.to_string(), value)
            })
            .collect();
        rows.push(Value::Object(obj));
    }
    Ok(Value::Array(rows))
}

fn flatten_numbers(prefix: &str, v: &Value, out: &mut Vec<(String, f64)>) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                out.push((prefix.to_string(), x));
            }
        }
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_numbers(&key, v, out);
            }
        }
        Value::Array(a) => {
            for (i, v) in a.iter().enumerate() {
                flatten_numbers(&format!("{prefix}[{i}]"), v, out);
            }
        }
        _ => {}
    }
}

#[derive(Debug, Serialize)]
struct SummaryRow<'a> {
    source: &'a str,
    key: &'a str,
    value: f64,
}

/// `summary.json` maps each input path to its parsed content (CSV files become
/// lists of row objects); `summary.csv` lists every numeric leaf.
pub fn cmd_report(cfg: &RunConfig) -> Result<()> {
    if cfg.input.is_empty() {
        return Err(Error::Config("report needs at least one --input".into()));
    }
    let mut sources = Vec::new();
    for p in &cfg.input {
        let value = match p.extension().and_then(|e| e.to_str()) {
            Some("json") => read_json(p)?,
            Some("csv") => csv_as_json(p)?,
            _ => {
                return Err(Error::Config(format!(
                    "{}: report reads .json and .csv files",
                    p.display()
                )))
            }
        };
        sources.push((p.display().to_string(), value));
    }
    cfg.prepare_output()?;
    let summary: serde_json::Map<String, Value> = sources.iter().cloned().collect();
    write_json(cfg.out("summary.json"), &summary)?;
    let path = cfg.out("summary.csv");
    let mut w = csv::Writer::from_path(&path)?;
    for (source, value) in &sources {
        let mut leaves = Vec::new();
        flatten_numbers("", value, &mut leaves);
        for (key, value) in &leaves {
            w.serialize(SummaryRow { source, key, value: *value })?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Serialize)]
struct TruthRow<'a> {
    id: &'a str,
    y: f64,
    shifted: bool,
    cluster: usize,
}

#[derive(Debug, Serialize)]
struct SegmentRow<'a> {
    sequence: &'a str,
    frame: u64,
    segment: String,
}

pub fn cmd_gen_synth(cfg: &RunConfig) -> Result<()> {
    match cfg.synth_kind {
        SynthKind::Store => {
            let data = generate_synth(&cfg.synth)?;
            cfg.prepare_output()?;
            data.store.save(cfg.out("store.jsonl"))?;
            let path = cfg.out("truth.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for (i, r) in data.store.records().iter().enumerate() {
                w.serialize(TruthRow {
                    id: &r.id,
                    y: data.y[i],
                    shifted: data.shifted[i],
                    cluster: data.cluster[i],
                })?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        }
        SynthKind::Trace => {
            let (trace, segments) = generate_trace(&cfg.trace_synth)?;
            cfg.prepare_output()?;
            trace.save(cfg.out("trace.jsonl"))?;
            let path = cfg.out("segments.csv");
            let mut w = csv::Writer::from_path(&path)?;
            for (f, s) in trace.frames().iter().zip(&segments) {
                w.serialize(SegmentRow {
                    sequence: &f.sequence,
                    frame: f.frame,
                    segment: format!("{s:?}").to_lowercase(),
                })?;
            }
            w.flush().map_err(|e| Error::io(&path, e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_flag_parses_and_validates() {
        let w = parse_weights("0.2, 0.3,0.5").unwrap();
        assert_eq!((w.supp, w.rank, w.grad), (0.2, 0.3, 0.5));
        assert!(parse_weights("0.5,0.5").is_err());
        assert!(parse_weights("0.5,0.6,0.1").is_err());
        assert!(parse_weights("a,b,c").is_err());
    }

    #[test]
    fn config_file_sits_under_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"seed": 5, "alpha": 0.2, "train": {"steps": 7, "lr": 0.001}}"#).unwrap();
        let common = Common {
            input: vec![],
            output: None,
            config: Some(path),
            seed: Some(9),
            alpha: None,
        };
        let cfg = RunConfig::base(&common, "train-policy").unwrap().finish().unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.alpha, 0.2);
        assert_eq!(cfg.pipeline.calibration.alpha, 0.2);
        assert_eq!((cfg.train.steps, cfg.train.lr), (7, 0.001));
        assert_eq!(cfg.train.batch, TrainConfig::default().batch);
    }

    #[test]
    fn unknown_config_keys_are_ignored_but_bad_values_are_usage_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"alpha": "high"}"#).unwrap();
        let common = Common { input: vec![], output: None, config: Some(path), seed: None, alpha: None };
        let err = RunConfig::base(&common, "score").unwrap_err();
        assert_eq!(err.class(), ErrorClass::Usage);
    }
}
