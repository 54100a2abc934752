//! `m2anet` command-line tool.
//!
//! Settings are resolved as built-in defaults, then a flat JSON file given
//! with `--config` (keys are flag names), then explicit flags. The effective
//! settings are echoed as `config.json` next to every output.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use m2anet::data::{self, Sample};
use m2anet::model::{M2ANet, ModelConfig, Preset};
use m2anet::nn::SeOrder;
use m2anet::train::{self, Prepared, TrainConfig};
use m2anet::{checkpoint, complexity, explain, Error};

#[derive(Parser)]
#[command(
    name = "m2anet",
    version,
    about = "Hybrid MBConv3 + attention classifier for thin-smear cell images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parameter, FLOP and file-size report for a model.
    Analyze(AnalyzeArgs),
    /// Train a model and write its checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a checkpoint: metrics plus ROC and PR curves.
    Eval(EvalArgs),
    /// Stratified k-fold cross-validation with per-fold TPR/TNR.
    Crossval(CrossvalArgs),
    /// Measure inference latency and throughput.
    Bench(BenchArgs),
    /// Grad-CAM overlay for one image.
    Gradcam(GradcamArgs),
    /// Write a synthetic dataset in the loader's folder layout.
    Synth(SynthArgs),
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_)
            | Error::Contract(_)
            | Error::MissingClassDir { .. }
            | Error::Dimension { .. } => Failure::Usage(e.into()),
            Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => Failure::Usage(e.into()),
            _ => Failure::Runtime(e.into()),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(anyhow!(msg.into()))
}

type CmdResult = std::result::Result<(), Failure>;

fn skip<T>(v: &Option<T>) -> bool {
    v.is_none()
}

fn parse_preset(s: &str) -> std::result::Result<Preset, String> {
    s.parse::<Preset>().map_err(|e| e.to_string())
}

fn parse_se_order(s: &str) -> std::result::Result<SeOrder, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("`{s}` is not one of: literal, standard"))
}

#[derive(Args, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
struct ModelArgs {
    /// Preset: S, L or a8.
    #[arg(long, value_parser = parse_preset)]
    #[serde(skip_serializing_if = "skip")]
    model: Option<Preset>,
    /// Square input side in pixels.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    input_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    stem_width: Option<usize>,
    /// Stage widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "skip")]
    widths: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    heads: Option<usize>,
    /// Squeeze-excitation order: literal or standard.
    #[arg(long, value_parser = parse_se_order)]
    #[serde(skip_serializing_if = "skip")]
    se_order: Option<SeOrder>,
}

#[derive(Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
struct ModelSettings {
    model: Preset,
    input_size: usize,
    stem_width: Option<usize>,
    widths: Option<Vec<usize>>,
    heads: usize,
    se_order: SeOrder,
}

impl ModelSettings {
    fn defaults() -> Value {
        json!({
            "model": Preset::S,
            "input-size": 112,
            "stem-width": null,
            "widths": null,
            "heads": 4,
            "se-order": SeOrder::Literal,
        })
    }

    fn config(&self) -> ModelConfig {
        let mut cfg = ModelConfig::preset(self.model)
            .with_input_size(self.input_size)
            .with_heads(self.heads);
        cfg.mbconv.se_order = self.se_order;
        if let Some(w) = &self.widths {
            let stem = cfg.stem_width;
            cfg = cfg.with_widths(stem, w);
        }
        if let Some(s) = self.stem_width {
            cfg.stem_width = s;
        }
        cfg
    }
}

#[derive(Args, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
struct DataArgs {
    /// Dataset root with Parasitized/ and Uninfected/, or `synth`.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    data: Option<String>,
    /// Number of synthetic samples when `--data synth`.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    synth_n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    synth_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    synth_size: Option<usize>,
}

#[derive(Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
struct DataSettings {
    data: Option<String>,
    synth_n: usize,
    synth_seed: u64,
    synth_size: usize,
}

impl DataSettings {
    fn defaults() -> Value {
        json!({ "data": null, "synth-n": 200, "synth-seed": 1, "synth-size": data::SYNTH_SIZE })
    }

    fn load(&self, input_size: usize) -> std::result::Result<Vec<Sample>, Failure> {
        let source = self
            .data
            .as_deref()
            .ok_or_else(|| usage("--data is required (a dataset path or `synth`)"))?;
        if source == "synth" {
            return Ok(data::synth_dataset_sized(
                self.synth_n,
                self.synth_seed,
                self.synth_size,
            )?);
        }
        let root = Path::new(source);
        if !root.is_dir() {
            return Err(usage(format!(
                "data directory {} does not exist",
                root.display()
            )));
        }
        let ds = data::load_dataset_with(root, Some(input_size))?;
        log::info!(
            "loaded {} parasitized + {} uninfected images ({} skipped)",
            ds.report.parasitized,
            ds.report.uninfected,
            ds.report.skipped.len()
        );
        if ds.samples.is_empty() {
            return Err(usage(format!(
                "no decodable images under {}",
                root.display()
            )));
        }
        Ok(ds.samples)
    }
}

#[derive(Args, Serialize, Default)]
#[serde(rename_all = "kebab-case")]
struct OptimArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    lr: Option<f64>,
    /// Decoupled weight decay.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    wd: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    seed: Option<u64>,
}

#[derive(Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
struct OptimSettings {
    epochs: usize,
    batch: usize,
    lr: f64,
    wd: f64,
    seed: u64,
}

impl OptimSettings {
    fn defaults() -> Value {
        let d = TrainConfig::default();
        json!({ "epochs": d.epochs, "batch": d.batch_size, "lr": d.lr, "wd": d.weight_decay, "seed": d.seed })
    }

    fn train_config(&self, checkpoint_every: usize) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            lr: self.lr,
            weight_decay: self.wd,
            seed: self.seed,
            checkpoint_every,
            ..TrainConfig::default()
        }
    }
}

fn merge_into(target: &mut Map<String, Value>, defaults: &[Value]) {
    for d in defaults {
        if let Value::Object(m) = d {
            target.extend(m.clone());
        }
    }
}

/// Defaults ← config file ← flags. Returns the typed settings and the merged
/// JSON object that is echoed to `config.json`.
fn resolve<T: DeserializeOwned>(
    defaults: &[Value],
    file: Option<&Path>,
    flags: &impl Serialize,
) -> std::result::Result<(T, Value), Failure> {
    let mut merged = Map::new();
    merge_into(&mut merged, defaults);
    if let Some(path) = file {
        let text = fs::read_to_string(path)
            .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
        let parsed: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {} is not valid JSON: {e}", path.display())))?;
        let Value::Object(obj) = parsed else {
            return Err(usage(format!(
                "config {} must be a flat JSON object",
                path.display()
            )));
        };
        for (k, v) in obj {
            if !merged.contains_key(&k) {
                let mut keys: Vec<&String> = merged.keys().collect();
                keys.sort();
                let keys: Vec<&str> = keys.iter().map(|k| k.as_str()).collect();
                return Err(usage(format!(
                    "unknown config key `{k}` (valid keys: {})",
                    keys.join(", ")
                )));
            }
            merged.insert(k, v);
        }
    }
    if let Value::Object(cli) =
        serde_json::to_value(flags).map_err(|e| Failure::Runtime(e.into()))?
    {
        merged.extend(cli);
    }
    let value = Value::Object(merged);
    let typed = serde_json::from_value(value.clone())
        .map_err(|e| usage(format!("invalid settings: {e}")))?;
    Ok((typed, value))
}

fn write_echo(dir: &Path, echo: &Value) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(
        dir.join("config.json"),
        serde_json::to_string_pretty(echo)? + "\n",
    )?;
    Ok(())
}

fn load_checkpoint(path: &Path) -> std::result::Result<M2ANet, Failure> {
    if !path.is_file() {
        return Err(usage(format!(
            "checkpoint {} does not exist",
            path.display()
        )));
    }
    checkpoint::load(path).map_err(|e| match e {
        Error::Format(_) => Failure::Usage(e.into()),
        other => other.into(),
    })
}

#[derive(Clone, Copy, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Format {
    #[default]
    Text,
    Csv,
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct AnalyzeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "skip")]
    format: Option<Format>,
    /// Batch size the FLOP count refers to.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    batch: Option<usize>,
    /// Write the report here instead of standard output.
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Flat JSON settings file.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct AnalyzeSettings {
    #[serde(flatten)]
    model: ModelSettings,
    format: Format,
    batch: usize,
}

fn cmd_analyze(args: AnalyzeArgs) -> CmdResult {
    let defaults = [
        ModelSettings::defaults(),
        json!({ "format": Format::Text, "batch": 1 }),
    ];
    let (s, _): (AnalyzeSettings, _) = resolve(&defaults, args.config.as_deref(), &args)?;
    let model = M2ANet::build(s.model.config(), 0)?;
    let report = complexity::analyze(&model, s.batch)?;
    let text = match s.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv()?,
    };
    emit(&text, args.out.as_deref())
}

fn emit(text: &str, out: Option<&Path>) -> CmdResult {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    /// Save a checkpoint every N epochs (0: only the final one).
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct TrainSettings {
    #[serde(flatten)]
    model: ModelSettings,
    #[serde(flatten)]
    data: DataSettings,
    #[serde(flatten)]
    optim: OptimSettings,
    checkpoint_every: usize,
    out: PathBuf,
}

fn cmd_train(args: TrainArgs) -> CmdResult {
    let defaults = [
        ModelSettings::defaults(),
        DataSettings::defaults(),
        OptimSettings::defaults(),
        json!({ "checkpoint-every": 0, "out": "runs/train" }),
    ];
    let (s, echo): (TrainSettings, _) = resolve(&defaults, args.config.as_deref(), &args)?;
    let model_cfg = s.model.config();
    let tc = s.optim.train_config(s.checkpoint_every);
    tc.validate()?;
    let mut model = M2ANet::build(model_cfg, s.optim.seed)?;
    let samples = s.data.load(s.model.input_size)?;
    write_echo(&s.out, &echo)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let prepared = Prepared::new(&refs, s.model.input_size);
    let ckpt_dir = s.out.join("checkpoints");
    let history = train::train(&mut model, &prepared, None, &tc, Some(&ckpt_dir))?;
    history.write_csv(&s.out.join("history.csv"))?;
    let final_path = ckpt_dir.join("final.ckpt");
    checkpoint::save(&model, &final_path)?;
    if let Some(last) = history.last() {
        println!(
            "trained {} epochs: loss {:.4}, train accuracy {:.4}; checkpoint {}",
            last.epoch,
            last.train_loss,
            last.train_accuracy,
            final_path.display()
        );
    }
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct EvalArgs {
    /// Checkpoint written by `train`.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct EvalSettings {
    checkpoint: Option<PathBuf>,
    #[serde(flatten)]
    data: DataSettings,
    batch: usize,
    out: PathBuf,
}

fn cmd_eval(args: EvalArgs) -> CmdResult {
    let defaults = [
        DataSettings::defaults(),
        json!({ "checkpoint": null, "batch": 64, "out": "runs/eval" }),
    ];
    let (s, echo): (EvalSettings, _) = resolve(&defaults, args.config.as_deref(), &args)?;
    let path = s
        .checkpoint
        .as_deref()
        .ok_or_else(|| usage("--checkpoint is required"))?;
    let model = load_checkpoint(path)?;
    let samples = s.data.load(model.config.input_size)?;
    write_echo(&s.out, &echo)?;
    let refs: Vec<&Sample> = samples.iter().collect();
    let report = train::evaluate(&model, &refs, s.batch.max(1))?;
    report.write_csv(&s.out.join("metrics.csv"))?;
    report.write_curves(&s.out.join("curves"))?;
    let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "accuracy {:.4}  precision {:.4}  recall {:.4}  f1 {:.4}  kappa {:.4}  TPR {:.4}  TNR {:.4}  AUC {}  AP {}",
        report.accuracy,
        report.precision,
        report.recall,
        report.f1,
        report.kappa,
        report.tpr,
        report.tnr,
        opt(report.auc()),
        opt(report.average_precision())
    );
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct CrossvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    data: DataArgs,
    #[command(flatten)]
    #[serde(flatten)]
    optim: OptimArgs,
    /// Number of folds.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    k: Option<usize>,
    /// Seed of the fold assignment.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    split_seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct CrossvalSettings {
    #[serde(flatten)]
    model: ModelSettings,
    #[serde(flatten)]
    data: DataSettings,
    #[serde(flatten)]
    optim: OptimSettings,
    k: usize,
    split_seed: u64,
    out: PathBuf,
}

fn cmd_crossval(args: CrossvalArgs) -> CmdResult {
    let defaults = [
        ModelSettings::defaults(),
        DataSettings::defaults(),
        OptimSettings::defaults(),
        json!({ "k": 5, "split-seed": 0, "out": "runs/crossval" }),
    ];
    let (s, echo): (CrossvalSettings, _) = resolve(&defaults, args.config.as_deref(), &args)?;
    let tc = s.optim.train_config(0);
    tc.validate()?;
    let model_cfg = s.model.config();
    model_cfg.validate()?;
    let samples = s.data.load(s.model.input_size)?;
    write_echo(&s.out, &echo)?;
    let report = train::run_crossval(&model_cfg, &samples, &tc, s.k, s.split_seed)?;
    report.write_csv(&s.out.join("crossval.csv"))?;
    let table = report.to_table();
    fs::write(s.out.join("crossval.txt"), &table).context("writing crossval.txt")?;
    print!("{table}");
    Ok(())
}

#[derive(Args, Serialize)]
#[serde(rename_all = "kebab-case")]
struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    warmup: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    reps: Option<usize>,
    /// Worker threads used while timing.
    #[arg(long)]
    #[serde(skip_serializing_if = "skip")]
    threads: Option<usize>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "skip")]
    format: Option<Format>,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Deserialize)]
#[serde(rename_all = "kebab-case")]
struct BenchSettings {
    #[serde(flatten)]
    model: ModelSettings,
    batch: usize,
    warmup: usize,
    reps: usize,
    threads: usize,
    format: Format,
}

fn cmd_bench(args: BenchArgs) -> CmdResult {
    let defaults = [
        ModelSettings::defaults(),
        json!({ "batch": 64, "warmup": 1, "reps": 5, "threads": 1, "format": Format::Text }),
    ];
    let (s, _): (BenchSettings, _) = resolve(&defaults, args.config.as_deref(), &args)?;
    let model = M2ANet::build(s.model.config(), 0)?;
    let result = complexity::bench(&model, s.batch, s.warmup, s.reps, s.threads)?;
    let report = complexity::analyze(&model, s.batch)?.with_bench(result);
    let text = match s.format {
        Format::Text => report.to_text(),
        Format::Csv => report.to_csv()?,
    };
    emit(&text, args.out.as_deref())
}

#[derive(Args)]
struct GradcamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// PNG image; resized to the model input.
    #[arg(long)]
    image: PathBuf,
    /// Class whose score is explained (1 = parasitized).
    #[arg(long, default_value_t = 1)]
    class: usize,
    /// Layer name (stem, stage1, ...); defaults to the last MBConv stage.
    #[arg(long)]
    layer: Option<String>,
    /// Output PNG.
    #[arg(long)]
    out: PathBuf,
    /// Also dump the raw heatmap as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn cmd_gradcam(args: GradcamArgs) -> CmdResult {
    let model = load_checkpoint(&args.checkpoint)?;
    if !args.image.is_file() {
        return Err(usage(format!(
            "image {} does not exist",
            args.image.display()
        )));
    }
    let img = data::load_image(&args.image)
        .map_err(|e| usage(format!("cannot decode {}: {e}", args.image.display())))?;
    let input = data::preprocess(&img, model.config.input_size);
    let heat = explain::grad_cam(&model, &input, args.class, args.layer.as_deref())?;
    heat.write_overlay(&input, &args.out)?;
    if let Some(csv) = &args.csv {
        heat.write_csv(csv)?;
    }
    println!(
        "grad-cam of class {} at `{}` ({}x{}) written to {}",
        heat.target_class,
        heat.layer,
        heat.height,
        heat.width,
        args.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Image side in pixels.
    #[arg(long, default_value_t = data::SYNTH_SIZE)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(args: SynthArgs) -> CmdResult {
    let samples = data::synth_dataset_sized(args.n, args.seed, args.size)?;
    let rows = data::write_dataset(&samples, &args.out)?;
    write_echo(
        &args.out,
        &json!({ "n": args.n, "seed": args.seed, "size": args.size }),
    )?;
    println!("wrote {} images to {}", rows.len(), args.out.display());
    Ok(())
}

fn configure_threads() -> std::result::Result<(), Failure> {
    if let Ok(v) = std::env::var("M2ANET_THREADS") {
        let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            usage(format!(
                "M2ANET_THREADS must be a positive integer, got `{v}`"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.into()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    configure_threads()?;
    match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Crossval(a) => cmd_crossval(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Gradcam(a) => cmd_gradcam(a),
        Command::Synth(a) => cmd_synth(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(3)
        }
    }
}
