//! `smil` command-line front end.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 I/O error,
//! 4 numerical failure.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::aggregate::{AttentionParams, BagEmbeddings, Weights};
use crate::bagsim::{self, BagsimError, GenConfig, Split};
use crate::diffcore::Tensor;
use crate::gradlab::{self, GradLabError, Method};
use crate::rng;
use crate::stencode::{self, ConvSpec, StencodeError};
use crate::train::{self, Aggregator, Hyper, ModelConfig, SmilModel, SweepSpec, TrainError};

pub const DEFAULT_SEED: u64 = 42;
/// Environment variable giving the default output directory.
pub const OUT_DIR_ENV: &str = "SMIL_OUT_DIR";

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<GradLabError> for CliError {
    fn from(e: GradLabError) -> Self {
        let code = if matches!(e, GradLabError::Io { .. }) {
            EXIT_IO
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<BagsimError> for CliError {
    fn from(e: BagsimError) -> Self {
        let code = if matches!(e, BagsimError::Io { .. }) {
            EXIT_IO
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match e {
            TrainError::Io { .. } => EXIT_IO,
            TrainError::NonFinite { .. } | TrainError::Diff(_) => EXIT_NUMERIC,
            _ => EXIT_USAGE,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<StencodeError> for CliError {
    fn from(e: StencodeError) -> Self {
        let code = if matches!(e, StencodeError::Diff(_)) {
            EXIT_NUMERIC
        } else {
            EXIT_USAGE
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

/// Model choices of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelChoice {
    pub aggregator: Aggregator,
    pub kernels: Vec<usize>,
    pub hidden: usize,
    pub filters: usize,
}

impl Default for ModelChoice {
    fn default() -> Self {
        Self {
            aggregator: Aggregator::SmilWeighted,
            kernels: vec![1, 2, 3],
            hidden: 32,
            filters: stencode::DEFAULT_FILTERS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepChoice {
    pub rates: Vec<f64>,
    pub aggregators: Vec<Aggregator>,
    pub kernel_sets: Vec<Vec<usize>>,
    /// Worker threads; results do not depend on it.
    pub threads: usize,
}

impl Default for SweepChoice {
    fn default() -> Self {
        Self {
            rates: vec![0.1, 0.25, 0.5, 1.0],
            aggregators: Aggregator::ALL.to_vec(),
            kernel_sets: vec![vec![1], vec![1, 2, 3]],
            threads: 1,
        }
    }
}

/// One JSON document describing a run. `seed` is the only source of
/// randomness and is copied into the data and optimiser sections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub data: GenConfig,
    pub hyper: Hyper,
    pub model: ModelChoice,
    pub sweep: SweepChoice,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            out_dir: None,
            data: GenConfig::default(),
            hyper: Hyper::default(),
            model: ModelChoice::default(),
            sweep: SweepChoice::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates a config document. Errors name the JSON path of
    /// the offending key.
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let value: serde_json::Value = serde_json::from_str(text)
            .map_err(|e| CliError::usage(format!("config is not valid JSON: {e}")))?;
        for section in ["data", "hyper"] {
            if value.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(CliError::usage(format!(
                    "config key `{section}.seed`: set the top-level `seed` instead"
                )));
            }
        }
        let mut cfg: RunConfig = serde_path_to_error::deserialize(value)
            .map_err(|e| CliError::usage(format!("config key `{}`: {}", e.path(), e.inner())))?;
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text).map_err(|e| CliError {
            message: format!("{}: {}", path.display(), e.message),
            ..e
        })
    }

    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.seed = seed;
        self.hyper.seed = seed;
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d_in: self.data.d,
            hidden: self.model.hidden,
            kernels: self.model.kernels.clone(),
            filters: self.model.filters,
            aggregator: self.model.aggregator,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.validate()?;
        self.hyper.validate()?;
        self.model_config().validate()?;
        Ok(())
    }
}

#[derive(Debug, Parser)]
#[command(name = "smil", version, about = "Sharp multiple-instance learning lab")]
pub struct Cli {
    /// Directory for outputs [default: the config's out_dir, else $SMIL_OUT_DIR, else "."]
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Export the two-instance gradient surface as CSV
    Surface(SurfaceArgs),
    /// Estimate the fraction of probability space where gradients vanish
    Vanish(VanishArgs),
    /// Evaluate the two-element counterexample
    Lemma(LemmaArgs),
    /// Check reverse-mode encoder gradients against finite differences
    Gradcheck(GradcheckArgs),
    /// Generate train and test bag datasets
    Gen(RunArgs),
    /// Train a model
    Train(TrainArgs),
    /// Evaluate a saved model on a dataset
    Eval(EvalArgs),
    /// Train one model per (fake rate, aggregator, kernel set)
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    /// Grid points per axis
    #[arg(long, default_value_t = 201)]
    pub n: usize,
    /// Lower end of both axes
    #[arg(long, default_value_t = 0.005)]
    pub lo: f64,
    /// Upper end of both axes
    #[arg(long, default_value_t = 0.995)]
    pub hi: f64,
    /// Output CSV, relative to the output directory
    #[arg(long, default_value = "surface.csv")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VanishArgs {
    /// Comma-separated methods
    #[arg(long, value_delimiter = ',', default_value = "traditional,sharp")]
    pub methods: Vec<Method>,
    /// Instances per bag
    #[arg(long, default_value_t = 2)]
    pub m: usize,
    /// Comma-separated vanishing thresholds
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.05,0.01")]
    pub tau: Vec<f64>,
    /// Monte Carlo samples
    #[arg(long, default_value_t = 1_000_000)]
    pub samples: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Also write the JSON report here, relative to the output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LemmaArgs {
    /// Instances per bag
    #[arg(long, default_value_t = 4)]
    pub m: usize,
    /// Distance of the two extreme instances from 0 and 1
    #[arg(long, default_value_t = 1e-4)]
    pub eps: f64,
    /// Probability of the remaining instances
    #[arg(long, default_value_t = 0.3)]
    pub delta: f64,
    /// Also write the JSON report here, relative to the output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Comma-separated kernel sizes
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub kernels: Vec<usize>,
    /// Instances per bag
    #[arg(long, default_value_t = 8)]
    pub m: usize,
    /// Feature dimension
    #[arg(long, default_value_t = 4)]
    pub d: usize,
    /// Filters per kernel
    #[arg(long, default_value_t = 4)]
    pub filters: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// JSON run config; flags override its values
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random stream [default: 42]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training bags [default: 2000]
    #[arg(long)]
    pub n_bags: Option<usize>,
    /// Test bags [default: 400]
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Training JSONL; generated from the config when absent
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Test JSONL evaluated after every epoch; generated from the config when absent
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Bag aggregator: mean, max, noisy_or, smil_unit, smil_weighted [default: smil_weighted]
    #[arg(long)]
    pub aggregator: Option<Aggregator>,
    /// Comma-separated kernel sizes [default: 1,2,3]
    #[arg(long, value_delimiter = ',')]
    pub kernels: Option<Vec<usize>>,
    /// Initial learning rate [default: 0.0002]
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Model file name
    #[arg(long, default_value = "model.json")]
    pub model_out: PathBuf,
    /// History file name
    #[arg(long, default_value = "history.csv")]
    pub history_out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Saved model
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset JSONL
    #[arg(long)]
    pub data: PathBuf,
    /// Also write the metrics JSON here, relative to the output directory
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Comma-separated fake rates in (0, 1] [default: 0.1,0.25,0.5,1.0]
    #[arg(long, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    /// Epochs per model [default: 30]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Worker threads [default: 1]
    #[arg(long)]
    pub threads: Option<usize>,
    /// Output CSV name
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

fn out_dir(flag: &Option<PathBuf>, config: Option<&RunConfig>) -> PathBuf {
    flag.clone()
        .or_else(|| config.and_then(|c| c.out_dir.clone()))
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("."))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json serializes");
    s.push('\n');
    s
}

fn resolve_run(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.apply_seed(seed);
    }
    if let Some(n) = args.n_bags {
        cfg.data.n_bags = n;
    }
    if let Some(n) = args.n_test {
        cfg.data.n_test = n;
    }
    Ok(cfg)
}

fn cmd_surface(a: &SurfaceArgs, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let surface = gradlab::surface_m2(a.n, a.lo, a.hi)?;
    let path = dir.join(&a.out);
    write_file(&path, &surface.to_csv())?;
    let _ = writeln!(out, "wrote {} ({} rows)", path.display(), a.n * a.n);
    Ok(())
}

fn cmd_vanish(a: &VanishArgs, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let reports = gradlab::vanish_sweep(&a.methods, a.m, &a.tau, a.samples, a.seed)?;
    let frac = |method: Method, tau: f64| {
        reports
            .iter()
            .find(|r| r.method == method && r.tau == tau)
            .map(|r| r.fraction)
    };
    let comparisons: Vec<serde_json::Value> = a
        .tau
        .iter()
        .filter_map(|&tau| {
            let (s, t) = (frac(Method::Sharp, tau)?, frac(Method::Traditional, tau)?);
            Some(json!({
                "tau": tau,
                "fraction_sharp": s,
                "fraction_traditional": t,
                "verdict": gradlab::verdict(s, t),
            }))
        })
        .collect();
    let report = json!({
        "m": a.m,
        "samples": a.samples,
        "seed": a.seed,
        "reports": reports,
        "comparisons": comparisons,
    });
    let text = pretty(&report);
    if let Some(p) = &a.out {
        write_file(&dir.join(p), &text)?;
    }
    let _ = out.write_all(text.as_bytes());
    Ok(())
}

fn cmd_lemma(a: &LemmaArgs, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let case = gradlab::counterexample_case(a.m, a.eps, a.delta)?;
    let mut report = serde_json::to_value(&case).expect("case serializes");
    report["pass"] = json!(case.pass());
    let text = pretty(&report);
    if let Some(p) = &a.out {
        write_file(&dir.join(p), &text)?;
    }
    let _ = out.write_all(text.as_bytes());
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<(), CliError> {
    if a.m == 0 || a.d == 0 || a.filters == 0 {
        return Err(CliError::usage("m, d and filters must be positive"));
    }
    let mut r = rng::stream(a.seed, "gradcheck", 0);
    let mut draw =
        |n: usize, s: f64| -> Vec<f64> { (0..n).map(|_| r.random_range(-s..s)).collect() };
    let h = BagEmbeddings::new(Tensor::matrix(a.m, a.d, draw(a.m * a.d, 2.0)).expect("shape"))
        .map_err(|e| CliError::usage(e.to_string()))?;
    let mut kernels = Vec::new();
    let mut heads = Vec::new();
    for &k in &a.kernels {
        if !(1..=3).contains(&k) {
            return Err(CliError::usage(format!("kernel size {k} is outside 1..=3")));
        }
        let w =
            Tensor::new(vec![k, a.d, a.filters], draw(k * a.d * a.filters, 1.0)).expect("shape");
        kernels.push(ConvSpec::new(w, Tensor::vector(draw(a.filters, 0.5)))?);
        let head =
            AttentionParams::new(draw(a.filters, 1.0), draw(a.filters, 1.0), draw(1, 0.5)[0])
                .map_err(|e| CliError::usage(e.to_string()))?;
        heads.push(head);
    }
    let fusion = Weights::uniform(kernels.len());
    let report = stencode::encoder_gradcheck(&h, &kernels, &heads, &fusion)?;
    let text = pretty(&json!({
        "kernels": a.kernels,
        "m": a.m,
        "d": a.d,
        "filters": a.filters,
        "seed": a.seed,
        "max_rel_error": report.max_rel_error,
        "max_abs_error": report.max_abs_error,
        "worst": report.worst.as_ref().map(|(name, i)| json!({"leaf": name, "index": i})),
        "tolerance": report.tolerance,
        "pass": report.pass,
    }));
    let _ = out.write_all(text.as_bytes());
    if report.pass {
        Ok(())
    } else {
        Err(CliError {
            code: EXIT_NUMERIC,
            message: format!(
                "gradient check failed: max rel error {}",
                report.max_rel_error
            ),
        })
    }
}

fn cmd_gen(a: &RunArgs, flag_dir: &Option<PathBuf>, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = resolve_run(a)?;
    cfg.data.validate()?;
    let dir = out_dir(flag_dir, Some(&cfg));
    for split in [Split::Train, Split::Test] {
        let ds = bagsim::generate_split(&cfg.data, split)?;
        let path = dir.join(format!("{split}.jsonl"));
        write_file(&path, &bagsim::to_jsonl(&ds))?;
        let _ = writeln!(
            out,
            "wrote {} ({} bags, {} positive)",
            path.display(),
            ds.len(),
            ds.positives()
        );
    }
    Ok(())
}

fn load_or_generate(
    path: &Option<PathBuf>,
    cfg: &GenConfig,
    split: Split,
) -> Result<bagsim::Dataset, CliError> {
    match path {
        Some(p) => Ok(bagsim::read_jsonl(p)?),
        None => Ok(bagsim::generate_split(cfg, split)?),
    }
}

fn cmd_train(
    a: &TrainArgs,
    flag_dir: &Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = resolve_run(&a.run)?;
    if let Some(agg) = a.aggregator {
        cfg.model.aggregator = agg;
    }
    if let Some(k) = &a.kernels {
        cfg.model.kernels = k.clone();
    }
    if let Some(lr) = a.lr {
        cfg.hyper.lr = lr;
    }
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    cfg.validate()?;
    let train_ds = load_or_generate(&a.data, &cfg.data, Split::Train)?;
    let test_ds = load_or_generate(&a.test, &cfg.data, Split::Test)?;
    let mut model_cfg = cfg.model_config();
    model_cfg.d_in = train_ds.config.d;
    let model = SmilModel::init(model_cfg, cfg.seed)?;
    let test = (!test_ds.is_empty()).then_some(&test_ds);
    let (model, history) = train::train(model, &train_ds.train_view(), test, &cfg.hyper)?;
    let dir = out_dir(flag_dir, Some(&cfg));
    write_file(&dir.join(&a.model_out), &train::model_to_json(&model))?;
    write_file(&dir.join(&a.history_out), &history.to_csv())?;
    if let Some(last) = history.epochs.last() {
        let _ = writeln!(
            out,
            "epoch {} train_loss {:.6}",
            last.epoch, last.train_loss
        );
        if let Some(m) = last.test {
            let _ = writeln!(
                out,
                "{}",
                serde_json::to_string(&m).expect("metrics serialize")
            );
        }
    }
    Ok(())
}

fn cmd_eval(a: &EvalArgs, flag_dir: &Option<PathBuf>, out: &mut dyn Write) -> Result<(), CliError> {
    let model = train::load_model(&a.model)?;
    let ds = bagsim::read_jsonl(&a.data)?;
    let metrics = train::evaluate(&model, &ds)?;
    let text = pretty(&serde_json::to_value(metrics).expect("metrics serialize"));
    if let Some(p) = &a.out {
        write_file(&out_dir(flag_dir, None).join(p), &text)?;
    }
    let _ = out.write_all(text.as_bytes());
    Ok(())
}

fn cmd_sweep(
    a: &SweepArgs,
    flag_dir: &Option<PathBuf>,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let mut cfg = resolve_run(&a.run)?;
    if let Some(r) = &a.rates {
        cfg.sweep.rates = r.clone();
    }
    if let Some(e) = a.epochs {
        cfg.hyper.epochs = e;
    }
    if let Some(t) = a.threads {
        cfg.sweep.threads = t;
    }
    cfg.validate()?;
    for k in &cfg.sweep.kernel_sets {
        ModelConfig {
            kernels: k.clone(),
            ..cfg.model_config()
        }
        .validate()?;
    }
    let spec = SweepSpec {
        data: cfg.data.clone(),
        hyper: cfg.hyper.clone(),
        model: cfg.model_config(),
        rates: cfg.sweep.rates.clone(),
        aggregators: cfg.sweep.aggregators.clone(),
        kernel_sets: cfg.sweep.kernel_sets.clone(),
        threads: cfg.sweep.threads,
    };
    let rows = train::run_sweep(&spec)?;
    let path = out_dir(flag_dir, Some(&cfg)).join(&a.out);
    write_file(&path, &train::sweep_csv(&rows))?;
    let _ = writeln!(out, "wrote {} ({} rows)", path.display(), rows.len());
    Ok(())
}

pub fn execute(cli: &Cli, out: &mut dyn Write) -> Result<(), CliError> {
    let flag_dir = &cli.out_dir;
    match &cli.command {
        Command::Surface(a) => cmd_surface(a, &out_dir(flag_dir, None), out),
        Command::Vanish(a) => cmd_vanish(a, &out_dir(flag_dir, None), out),
        Command::Lemma(a) => cmd_lemma(a, &out_dir(flag_dir, None), out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
        Command::Gen(a) => cmd_gen(a, flag_dir, out),
        Command::Train(a) => cmd_train(a, flag_dir, out),
        Command::Eval(a) => cmd_eval(a, flag_dir, out),
        Command::Sweep(a) => cmd_sweep(a, flag_dir, out),
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(&cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {}", e.message);
            e.code
        }
    }
}
