//! `maf`: generate synthetic data, train, run inference and baselines, evaluate.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use maf_core::gradcheck::{grad_check, GradCheckConfig};
use maf_core::inference::{predict_unsup_dataset, predict_weak_dataset, read_predictions, run_baseline, write_predictions};
use maf_core::synth::generate;
use maf_core::training::{train, EpochStats, Init};
use maf_core::{
    load_dataset, AreaConvention, Checkpoint, Dataset, EmbeddingTable, EvalReport, FeatureFlags, Method, Pooling,
    Prediction, SynthConfig, TrainConfig,
};
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] maf_core::Error),
    #[error("gradient check failed")]
    GradCheckFailed,
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(maf_core::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
            CliError::GradCheckFailed => 3,
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "maf", version, about = "Weakly-supervised phrase grounding on detector outputs")]
struct Cli {
    /// Worker threads for within-batch parallelism (results do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted phrase-object alignments.
    Synth(SynthArgs),
    /// Train the grounding model and write a checkpoint plus a per-epoch CSV log.
    Train(TrainArgs),
    /// Score predictions (from a checkpoint, the unsupervised model, or a file).
    Eval(EvalArgs),
    /// Write predictions for every phrase as JSON Lines.
    Infer(InferArgs),
    /// Run a training-free baseline and score it.
    Baseline(BaselineArgs),
    /// Compare analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset JSON Lines file.
    #[arg(long)]
    data: PathBuf,
    /// Detector feature file (MAFF).
    #[arg(long)]
    features: PathBuf,
    /// Objects at or below this detector confidence are dropped.
    #[arg(long, default_value_t = 0.1)]
    confidence_threshold: f64,
}

impl DataArgs {
    fn load(&self) -> CliResult<Dataset> {
        Ok(load_dataset(&self.data, &self.features, self.confidence_threshold)?)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output directory for images.jsonl, features.maff and embeddings.txt.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, env = "MAF_SEED", default_value_t = 7)]
    seed: u64,
    /// Start from the duplicate-label preset (two same-label objects per image).
    #[arg(long)]
    duplicate_labels: bool,
    /// Number of images [default: 200]
    #[arg(long)]
    images: Option<usize>,
    /// Objects per image [default: 4]
    #[arg(long)]
    objects: Option<usize>,
    /// Phrases per caption [default: 3]
    #[arg(long)]
    phrases: Option<usize>,
    /// Captions per image [default: 5]
    #[arg(long)]
    captions: Option<usize>,
    /// Number of concepts [default: 20]
    #[arg(long)]
    concepts: Option<usize>,
    /// Text embedding dimension [default: 32]
    #[arg(long)]
    d_text: Option<usize>,
    /// Detector feature dimension [default: 24]
    #[arg(long)]
    d_visual: Option<usize>,
    /// Feature noise standard deviation [default: 0.1]
    #[arg(long)]
    sigma: Option<f64>,
    /// Probability of a distractor adjective per phrase [default: 0.3]
    #[arg(long)]
    distractor_rate: Option<f64>,
    /// Probability that a phrase names its object by synonym [default: 0.8, duplicate preset 0.3]
    #[arg(long)]
    synonym_rate: Option<f64>,
    /// Cosine between a synonym and its label [default: 0.2, duplicate preset 0.5]
    #[arg(long)]
    synonym_similarity: Option<f64>,
    /// Other labels each synonym leans towards [default: 6, duplicate preset 0]
    #[arg(long)]
    decoys: Option<usize>,
    /// Cosine between a synonym and each decoy label [default: 0.35]
    #[arg(long)]
    decoy_similarity: Option<f64>,
    /// Subtypes per concept [default: 1, duplicate preset 4]
    #[arg(long)]
    subtypes: Option<usize>,
}

impl SynthArgs {
    fn config(&self) -> SynthConfig {
        let mut c = if self.duplicate_labels {
            SynthConfig::duplicate_labels()
        } else {
            SynthConfig::default()
        };
        c.seed = self.seed;
        macro_rules! set {
            ($($arg:ident => $field:ident),*) => {
                $(if let Some(v) = self.$arg { c.$field = v; })*
            };
        }
        set!(images => n_images, objects => objects_per_image, phrases => phrases_per_caption,
             captions => captions_per_image, concepts => vocab_size, d_text => d_text,
             d_visual => d_visual, sigma => feature_noise_sigma, distractor_rate => distractor_rate,
             synonym_rate => synonym_rate, synonym_similarity => synonym_similarity, decoys => decoys,
             decoy_similarity => decoy_similarity, subtypes => subtypes);
        c
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum InitArg {
    Zero,
    Xavier,
    IdNoise,
}

impl From<InitArg> for Init {
    fn from(a: InitArg) -> Self {
        match a {
            InitArg::Zero => Init::Zero,
            InitArg::Xavier => Init::Xavier,
            InitArg::IdNoise => Init::IdNoise,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PoolingArg {
    Attention,
    Mean,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Word embedding text file.
    #[arg(long)]
    embeddings: PathBuf,
    /// Checkpoint output path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch CSV log [default: <out>.csv]
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 25)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    lr: f64,
    #[arg(long, env = "MAF_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = InitArg::Zero)]
    init_wf: InitArg,
    #[arg(long, value_enum, default_value_t = InitArg::IdNoise)]
    init_wp: InitArg,
    #[arg(long, value_enum, default_value_t = InitArg::Zero)]
    init_wt: InitArg,
    /// Scale of the Xavier noise added by id-noise initialization.
    #[arg(long, default_value_t = 0.01)]
    id_noise_scale: f64,
    #[arg(long, action = ArgAction::Set, default_value_t = false)]
    use_attributes: bool,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    use_labels: bool,
    #[arg(long, action = ArgAction::Set, default_value_t = true)]
    use_features: bool,
    #[arg(long, value_enum, default_value_t = PoolingArg::Attention)]
    pooling: PoolingArg,
}

impl TrainArgs {
    fn config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            seed: self.seed,
            init_wf: self.init_wf.into(),
            init_wp: self.init_wp.into(),
            init_wt: self.init_wt.into(),
            id_noise_scale: self.id_noise_scale,
            flags: FeatureFlags {
                use_labels: self.use_labels,
                use_attributes: self.use_attributes,
                use_features: self.use_features,
                pooling: match self.pooling {
                    PoolingArg::Attention => Pooling::Attention,
                    PoolingArg::Mean => Pooling::Mean,
                },
            },
            confidence_threshold: self.data.confidence_threshold,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Mode {
    /// Trained model from a checkpoint.
    Weak,
    /// Training-free attention over label embeddings.
    Unsup,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Word embedding text file (required unless --predictions is given).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Checkpoint to evaluate in weak mode.
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Weak)]
    mode: Mode,
    /// Score an existing predictions file instead of running a model.
    #[arg(long, conflicts_with = "model")]
    predictions: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Count box areas as (x2 - x1 + 1) * (y2 - y1 + 1).
    #[arg(long)]
    pixel_plus_one: bool,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    embeddings: PathBuf,
    /// Checkpoint (weak mode only).
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Mode::Weak)]
    mode: Mode,
    /// Predictions output (JSON Lines).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Random,
    Center,
    Max,
    Whole,
    Direct,
    GloveMax,
    GloveAvg,
    GloveAtt,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Self {
        match m {
            MethodArg::Random => Method::Random,
            MethodArg::Center => Method::Center,
            MethodArg::Max => Method::Max,
            MethodArg::Whole => Method::Whole,
            MethodArg::Direct => Method::Direct,
            MethodArg::GloveMax => Method::GloveMax,
            MethodArg::GloveAvg => Method::GloveAvg,
            MethodArg::GloveAtt => Method::GloveAtt,
        }
    }
}

#[derive(Args, Debug)]
struct BaselineArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Word embedding text file (glove-* methods).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long, env = "MAF_SEED", default_value_t = 0)]
    seed: u64,
    /// Predictions output (JSON Lines).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    pixel_plus_one: bool,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, env = "MAF_SEED", default_value_t = 0)]
    seed: u64,
    /// Check this many consecutive seeds starting at --seed.
    #[arg(long, default_value_t = 1)]
    count: u64,
    #[arg(long, default_value_t = 1e-5)]
    tolerance: f64,
}

fn announce<T: Serialize>(command: &str, config: &T) {
    let json = serde_json::to_string(config).expect("config serializes");
    eprintln!("{command} config: {json}");
}

fn convention(pixel_plus_one: bool) -> AreaConvention {
    if pixel_plus_one {
        AreaConvention::PixelPlusOne
    } else {
        AreaConvention::Continuous
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| maf_core::Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn report_out(report: &EvalReport, path: Option<&Path>) -> CliResult {
    let mut out = std::io::stdout().lock();
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = write!(out, "{}", report.to_table()).and_then(|_| writeln!(out, "{}", report.to_json()));
    if let Some(p) = path {
        write_text(p, &(report.to_json() + "\n"))?;
    }
    Ok(())
}

fn run_synth(args: &SynthArgs) -> CliResult {
    let cfg = args.config();
    announce("synth", &cfg);
    let s = generate(&cfg)?;
    let paths = s.write(&args.out)?;
    println!(
        "wrote {} images ({} phrases) to {}, {}, {}",
        s.dataset.images.len(),
        s.dataset.phrase_count(),
        paths.images.display(),
        paths.features.display(),
        paths.embeddings.display()
    );
    Ok(())
}

fn run_train(args: &TrainArgs) -> CliResult {
    let cfg = args.config();
    announce("train", &cfg);
    let dataset = args.data.load()?;
    let table = EmbeddingTable::load(&args.embeddings)?;
    let log_path = args.log.clone().unwrap_or_else(|| {
        let mut p = args.out.clone().into_os_string();
        p.push(".csv");
        PathBuf::from(p)
    });
    let io_err = |e| maf_core::Error::Io {
        path: log_path.clone(),
        source: e,
    };
    let mut log = BufWriter::new(File::create(&log_path).map_err(io_err)?);
    writeln!(log, "epoch,mean_loss,wallclock_s").map_err(io_err)?;
    let mut write_err = None;
    let ck = train(&dataset, &table, &cfg, |s: &EpochStats| {
        if let Err(e) = writeln!(log, "{},{},{}", s.epoch, s.mean_loss, s.wallclock_s) {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(e).into());
    }
    log.flush().map_err(io_err)?;
    ck.save(&args.out)?;
    println!(
        "trained {} epochs; final mean loss {:.6}; checkpoint {}; log {}",
        ck.epoch_losses.len(),
        ck.epoch_losses.last().copied().unwrap_or(f64::NAN),
        args.out.display(),
        log_path.display()
    );
    Ok(())
}

fn model_predictions(
    mode: Mode,
    dataset: &Dataset,
    table: &EmbeddingTable,
    model: Option<&Path>,
) -> CliResult<Vec<Prediction>> {
    match mode {
        Mode::Weak => {
            let path = model.ok_or_else(|| CliError::Usage("weak mode requires --model".into()))?;
            let ck = Checkpoint::load(path)?;
            eprintln!("model config: {}", serde_json::to_string(&ck.config).expect("config serializes"));
            Ok(predict_weak_dataset(dataset, &ck.params, table)?)
        }
        Mode::Unsup => Ok(predict_unsup_dataset(dataset, table)),
    }
}

#[derive(Serialize)]
struct EvalSettings<'a> {
    mode: &'a str,
    model: Option<&'a Path>,
    predictions: Option<&'a Path>,
    confidence_threshold: f64,
    area_convention: AreaConvention,
}

fn run_eval(args: &EvalArgs) -> CliResult {
    if args.mode == Mode::Weak && args.model.is_none() && args.predictions.is_none() {
        return Err(CliError::Usage("eval in weak mode requires --model (or --predictions)".into()));
    }
    let conv = convention(args.pixel_plus_one);
    let mode = match args.mode {
        Mode::Weak => "weak",
        Mode::Unsup => "unsup",
    };
    announce(
        "eval",
        &EvalSettings {
            mode,
            model: args.model.as_deref(),
            predictions: args.predictions.as_deref(),
            confidence_threshold: args.data.confidence_threshold,
            area_convention: conv,
        },
    );
    let dataset = args.data.load()?;
    let preds = match &args.predictions {
        Some(p) => read_predictions(p)?,
        None => {
            let emb = args
                .embeddings
                .as_ref()
                .ok_or_else(|| CliError::Usage("--embeddings is required to run a model".into()))?;
            let table = EmbeddingTable::load(emb)?;
            model_predictions(args.mode, &dataset, &table, args.model.as_deref())?
        }
    };
    let report = EvalReport::build(&dataset.images, &[(mode.to_string(), preds)], conv)?;
    report_out(&report, args.report.as_deref())
}

fn run_infer(args: &InferArgs) -> CliResult {
    if args.mode == Mode::Weak && args.model.is_none() {
        return Err(CliError::Usage("weak mode requires --model".into()));
    }
    #[derive(Serialize)]
    struct Settings<'a> {
        mode: &'a str,
        model: Option<&'a Path>,
        confidence_threshold: f64,
    }
    announce(
        "infer",
        &Settings {
            mode: if args.mode == Mode::Weak { "weak" } else { "unsup" },
            model: args.model.as_deref(),
            confidence_threshold: args.data.confidence_threshold,
        },
    );
    let dataset = args.data.load()?;
    let table = EmbeddingTable::load(&args.embeddings)?;
    let preds = model_predictions(args.mode, &dataset, &table, args.model.as_deref())?;
    write_predictions(&preds, &args.out)?;
    println!("wrote {} predictions to {}", preds.len(), args.out.display());
    Ok(())
}

fn run_baseline_cmd(args: &BaselineArgs) -> CliResult {
    let method: Method = args.method.into();
    let conv = convention(args.pixel_plus_one);
    #[derive(Serialize)]
    struct Settings {
        method: String,
        seed: u64,
        confidence_threshold: f64,
        area_convention: AreaConvention,
    }
    announce(
        "baseline",
        &Settings {
            method: method.name().to_string(),
            seed: args.seed,
            confidence_threshold: args.data.confidence_threshold,
            area_convention: conv,
        },
    );
    if method.needs_embeddings() && args.embeddings.is_none() {
        return Err(CliError::Usage(format!("method {method} requires --embeddings")));
    }
    let dataset = args.data.load()?;
    let table = args.embeddings.as_ref().map(EmbeddingTable::load).transpose()?;
    let preds = run_baseline(&dataset, method, table.as_ref(), args.seed)?;
    if let Some(out) = &args.out {
        write_predictions(&preds, out)?;
    }
    let report = EvalReport::build(&dataset.images, &[(method.name().to_string(), preds)], conv)?;
    report_out(&report, args.report.as_deref())
}

fn run_gradcheck(args: &GradcheckArgs) -> CliResult {
    let cfg = GradCheckConfig {
        tolerance: args.tolerance,
        ..Default::default()
    };
    #[derive(Serialize)]
    struct Settings {
        seed: u64,
        count: u64,
        tolerance: f64,
        step: f64,
    }
    announce(
        "gradcheck",
        &Settings {
            seed: args.seed,
            count: args.count,
            tolerance: cfg.tolerance,
            step: cfg.step,
        },
    );
    let mut all_passed = true;
    for seed in args.seed..args.seed.saturating_add(args.count) {
        let report = grad_check(seed, &cfg)?;
        println!("{report}");
        for c in &report.skipped {
            println!("  tie-skipped {c}");
        }
        all_passed &= report.passed;
    }
    if all_passed {
        println!("PASS");
        Ok(())
    } else {
        println!("FAIL");
        Err(CliError::GradCheckFailed)
    }
}

fn run(cli: &Cli) -> CliResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Usage("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Infer(a) => run_infer(a),
        Command::Baseline(a) => run_baseline_cmd(a),
        Command::Gradcheck(a) => run_gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
