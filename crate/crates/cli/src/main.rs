//! `irstd` command line: synthetic data, training, evaluation, inference,
//! drift reporting and layout inspection. Batch tool only — every command
//! runs to completion and exits.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use indexmap::IndexMap;

use irstd_core::config::{parse_kv, validate_config, ModelConfig};
use irstd_core::data::{self, SceneSpec, Scenario};
use irstd_core::error::Error;
use irstd_core::evaluation::{self, DEFAULT_MATCH_RADIUS, DEFAULT_THRESHOLD};
use irstd_core::layout::{compute_layout, layout_csv, DecoderSchema};
use irstd_core::model::Model;
use irstd_core::training::{self, TrainOptions};

const EXIT_HELP: &str = "EXIT CODES:
  0  success
  2  usage error (bad flags or arguments)
  3  invalid configuration
  4  missing file or I/O failure
  5  malformed data, images or shapes
  6  checkpoint problem (wrong config, corrupt file)
  7  training diverged (non-finite loss)
  1  any other failure";

#[derive(Parser)]
#[command(name = "irstd", version, about = "Infrared small target detection with per-image generated decoders", after_help = EXIT_HELP)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic multi-scenario dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Run inference on PNG images and write probability / mask PNGs
    Infer(InferArgs),
    /// Per-scenario metrics and generated-parameter separation
    DriftReport(DriftArgs),
    /// Print the generated-parameter layout table for a config
    InspectLayout(LayoutArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file with one `key = value` per line (# comments allowed)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: paper | desk (file/overrides are applied on top)
    #[arg(long)]
    profile: Option<String>,
    /// Override a single config key, e.g. --set decoder_variant=multiscale
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self, seed: Option<u64>) -> Result<ModelConfig, Error> {
        let mut raw: IndexMap<String, String> = IndexMap::new();
        if let Some(p) = &self.profile {
            raw.insert("profile".into(), p.clone());
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
            let file_kv = parse_kv(&text)?;
            if self.profile.is_none() {
                if let Some(p) = file_kv.get("profile") {
                    raw.insert("profile".into(), p.clone());
                }
            }
            for (k, v) in file_kv {
                if k != "profile" {
                    raw.insert(k, v);
                }
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            raw.insert(k.trim().to_string(), v.trim().to_string());
        }
        if let Some(s) = seed {
            raw.insert("seed".into(), s.to_string());
        }
        validate_config(&raw)
    }
}

fn print_config(cfg: &ModelConfig) {
    println!("resolved config (hash {}):", cfg.hash());
    for line in cfg.to_kv_string().lines() {
        println!("  {line}");
    }
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
    /// Total number of scenes (spread round-robin over scenarios)
    #[arg(long, default_value_t = 60)]
    count: usize,
    /// RNG seed (required for reproducibility)
    #[arg(long)]
    seed: u64,
    /// Scene size as HxW
    #[arg(long, default_value = "64x64")]
    size: String,
    /// Comma-separated scenario list
    #[arg(long, default_value = "sky,maritime,ground")]
    scenarios: String,
    /// Fraction of each scenario that goes into the train split
    #[arg(long, default_value_t = 0.8)]
    train_frac: f64,
    /// JSON file holding an array of scene specs (overrides --size/--scenarios)
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (images/, masks/, splits/)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoints and the training log
    #[arg(long)]
    out: PathBuf,
    /// RNG seed (required; overrides the config seed)
    #[arg(long)]
    seed: u64,
    #[command(flatten)]
    config: ConfigArgs,
    /// Stop after this many optimizer steps
    #[arg(long)]
    max_steps: Option<u64>,
    /// Validate every N epochs (0 = off)
    #[arg(long, default_value_t = 1)]
    val_every: usize,
    /// Resume from a checkpoint file
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Disable crop/flip augmentation
    #[arg(long)]
    no_augment: bool,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    match_radius: f64,
    /// Progress line every N steps (0 = quiet)
    #[arg(long, default_value_t = 10)]
    print_every: u64,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to evaluate: train | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    match_radius: f64,
    /// Optional metrics CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A PNG file or a directory of PNG files
    #[arg(long)]
    input: PathBuf,
    /// Output directory for `<id>_prob.png` and `<id>_mask.png`
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Also write the high-pass channel as `<id>_highpass.png`
    #[arg(long)]
    debug_highpass: bool,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to analyze: train | test
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = DEFAULT_MATCH_RADIUS)]
    match_radius: f64,
    /// Optional JSON report output path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LayoutArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Decoder variant override: basic | multiscale | spatial_attention
    #[arg(long)]
    variant: Option<String>,
}

fn parse_size(s: &str) -> Result<(usize, usize), Error> {
    let (h, w) = s
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("size must be HxW, got '{s}'")))?;
    let parse = |t: &str| {
        t.trim()
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("bad size component '{t}'")))
    };
    Ok((parse(h)?, parse(w)?))
}

fn model_from_checkpoint(path: &Path) -> Result<(Model, training::Checkpoint), Error> {
    let ckpt = training::load_checkpoint(path)?;
    let raw = parse_kv(&ckpt.config)?;
    let cfg = validate_config(&raw)?;
    let mut model = Model::new(cfg)?;
    ckpt.restore(&mut model)?;
    Ok((model, ckpt))
}

fn select_split(args_split: &str, train: Vec<data::Sample>, test: Vec<data::Sample>) -> Result<Vec<data::Sample>, Error> {
    match args_split {
        "train" => Ok(train),
        "test" => Ok(test),
        other => Err(Error::Config(format!("unknown split '{other}' (expected train | test)"))),
    }
}

fn run_synth(a: SynthArgs) -> Result<(), Error> {
    if !(0.0..=1.0).contains(&a.train_frac) {
        return Err(Error::Config(format!("train_frac {} outside [0, 1]", a.train_frac)));
    }
    let specs: Vec<SceneSpec> = if let Some(path) = &a.spec {
        let text = std::fs::read_to_string(path).map_err(|_| Error::MissingFile(path.clone()))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("bad scene spec file {}: {e}", path.display())))?
    } else {
        let size = parse_size(&a.size)?;
        a.scenarios
            .split(',')
            .map(|s| Scenario::parse(s.trim()).map(|sc| SceneSpec::default_for(sc, size)))
            .collect::<Result<_, _>>()?
    };
    if specs.is_empty() {
        return Err(Error::Config("at least one scene spec required".into()));
    }
    let samples = data::synth_dataset(&a.out, &specs, a.count, a.train_frac, a.seed)?;
    let targets: usize = samples.iter().map(|s| s.mask.iter().map(|&v| v as usize).sum::<usize>()).sum();
    println!(
        "wrote {} scenes ({} scene specs, {} target pixels) to {}",
        samples.len(),
        specs.len(),
        targets,
        a.out.display()
    );
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<(), Error> {
    let cfg = a.config.resolve(Some(a.seed))?;
    print_config(&cfg);
    let (train_set, val_set) = data::load_dataset(&a.data)?;
    println!("dataset: {} train / {} test samples", train_set.len(), val_set.len());
    let mut model = Model::new(cfg)?;
    let opts = TrainOptions {
        max_steps: a.max_steps,
        val_every_epochs: a.val_every,
        out_dir: Some(a.out.clone()),
        resume_from: a.resume.clone(),
        threshold: a.threshold,
        match_radius: a.match_radius,
        augment: !a.no_augment,
        print_every: a.print_every,
    };
    let summary = training::train(&mut model, &train_set, &val_set, &opts)?;
    println!("finished after {} steps, final loss {:.5}", summary.steps, summary.final_loss);
    if let Some(b) = &summary.best_val {
        println!("best validation: IoU {:.4} Pd {:.4} Fa {:.6}", b.iou, b.pd, b.fa);
    }
    println!("artifacts in {}", a.out.display());
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<(), Error> {
    let (model, ckpt) = model_from_checkpoint(&a.checkpoint)?;
    print_config(&model.cfg);
    println!("checkpoint: step {} epoch {}", ckpt.step, ckpt.epoch);
    let (train, test) = data::load_dataset(&a.data)?;
    let samples = select_split(&a.split, train, test)?;
    let (preds, _) = evaluation::predict(&model, &samples, a.threshold)?;
    let gts: Vec<_> = samples.iter().map(|s| s.mask.clone()).collect();
    let report = evaluation::evaluate(&preds, &gts, a.match_radius)?;
    println!(
        "{} split: IoU {:.4} Pd {:.4} Fa {:.6} ({} images, {} targets)",
        a.split, report.iou, report.pd, report.fa, report.n_images, report.n_targets
    );
    if let Some(path) = &a.out {
        let csv = evaluation::metrics_csv(&[(a.split.clone(), report)]);
        std::fs::write(path, csv).map_err(|e| Error::io(path.clone(), e))?;
        println!("metrics written to {}", path.display());
    }
    Ok(())
}

fn png_inputs(input: &Path) -> Result<Vec<PathBuf>, Error> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    if !input.is_dir() {
        return Err(Error::MissingFile(input.to_path_buf()));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Error::io(input.to_path_buf(), e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "png").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Data(format!("no PNG files in {}", input.display())));
    }
    Ok(files)
}

fn run_infer(a: InferArgs) -> Result<(), Error> {
    let (model, _) = model_from_checkpoint(&a.checkpoint)?;
    print_config(&model.cfg);
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(a.out.clone(), e))?;
    for path in png_inputs(&a.input)? {
        let img = data::load_gray_png(&path)?;
        let (h, w) = img.dim();
        let mut batch = ndarray::ArrayD::zeros(ndarray::IxDyn(&[1, 1, h, w]));
        for ((y, x), &v) in img.indexed_iter() {
            batch[[0, 0, y, x]] = v;
        }
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().to_string();
        if a.debug_highpass {
            let x_sf = model.prepare_input(&batch)?;
            let hp = ndarray::Array2::from_shape_fn((h, w), |(y, x)| x_sf[[0, 1, y, x]]);
            // normalize to [0, 1] for visualization
            let (lo, hi) = hp.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
            let vis = hp.mapv(|v| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 });
            data::save_gray_png(&a.out.join(format!("{stem}_highpass.png")), &vis)?;
        }
        let out = model.infer(&batch)?;
        let lv = out.logits.value();
        let prob = ndarray::Array2::from_shape_fn((h, w), |(y, x)| 1.0 / (1.0 + (-lv[[0, 0, y, x]]).exp()));
        data::save_gray_png(&a.out.join(format!("{stem}_prob.png")), &prob)?;
        let mask = prob.mapv(|p| f64::from(p >= a.threshold));
        data::save_gray_png(&a.out.join(format!("{stem}_mask.png")), &mask)?;
        println!(
            "{}: {} pixels above threshold {}",
            stem,
            mask.iter().filter(|&&v| v > 0.0).count(),
            a.threshold
        );
    }
    Ok(())
}

fn run_drift(a: DriftArgs) -> Result<(), Error> {
    let (model, _) = model_from_checkpoint(&a.checkpoint)?;
    print_config(&model.cfg);
    let (train, test) = data::load_dataset(&a.data)?;
    let samples = select_split(&a.split, train, test)?;
    let report = evaluation::drift_report(&model, &samples, a.threshold, a.match_radius)?;
    for (name, r) in &report.per_scenario {
        println!(
            "{name}: IoU {:.4} Pd {:.4} Fa {:.6} ({} images)",
            r.iou, r.pd, r.fa, r.n_images
        );
    }
    println!(
        "parameter separation: intra {:.4} inter {:.4} ratio {:.4}{}",
        report.intra,
        report.inter,
        report.ratio,
        if report.degenerate { " (degenerate)" } else { "" }
    );
    if let Some(path) = &a.out {
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.clone(), e))?;
        println!("report written to {}", path.display());
    }
    Ok(())
}

fn run_inspect_layout(a: LayoutArgs) -> Result<(), Error> {
    let mut config = a.config;
    if let Some(v) = a.variant {
        config.set.push(format!("decoder_variant={v}"));
    }
    let cfg = config.resolve(None)?;
    print_config(&cfg);
    let schema = DecoderSchema::build(cfg.decoder_variant, &cfg);
    let layout = compute_layout(&schema, &cfg)?;
    print!("{}", layout_csv(&schema, &layout));
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 3,
        Error::MissingFile(_) | Error::Io { .. } => 4,
        Error::Data(_) | Error::Shape(_) | Error::Image(_) => 5,
        Error::Checkpoint(_) => 6,
        Error::NonFiniteLoss(_) => 7,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Synth(a) => run_synth(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::DriftReport(a) => run_drift(a),
        Cmd::InspectLayout(a) => run_inspect_layout(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
