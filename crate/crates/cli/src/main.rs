//! Command-line front end: data generation, training, evaluation,
//! visualization, gradient checks and the ablation study.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use wsban::checkpoint::Checkpoint;
use wsban::config::{self, Ablation, RunConfig};
use wsban::data::{self, Dataset, Split};
use wsban::experiment;
use wsban::gradcheck::{self, CheckOptions};
use wsban::localization;
use wsban::training::LOG_HEADER;
use wsban::viz;

#[derive(Parser)]
#[command(name = "wsban", version, about = "Weakly supervised bilinear attention network")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate train and test dataset files plus a manifest.
    GenData(GenDataArgs),
    /// Train a model and write its checkpoint and log.
    Train(TrainArgs),
    /// Report accuracy and localization metrics of a checkpoint.
    Eval(EvalArgs),
    /// Export input, attention maps and box overlays as PPM/PGM files.
    Visualize(VisualizeArgs),
    /// Check every backward rule against central differences.
    Gradcheck(GradcheckArgs),
    /// Train all five ablation rows and print a comparison table.
    Ablate(RunArgs),
}

/// Options shared by every command that assembles a run configuration.
#[derive(Args, Clone, Default)]
struct RunArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ablation preset, row1 to row5.
    #[arg(long)]
    ablation: Option<Ablation>,
    /// Seed for model init, shuffling and dropout.
    #[arg(long)]
    seed: Option<u64>,
    /// Training set file; generated from the config when omitted.
    #[arg(long)]
    train_data: Option<PathBuf>,
    /// Test set file; generated from the config when omitted.
    #[arg(long)]
    test_data: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    classes: Option<usize>,
    /// Training samples.
    #[arg(long)]
    train: Option<usize>,
    /// Test samples.
    #[arg(long)]
    test: Option<usize>,
    /// Dataset seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training log path.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint output path.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Test set; generated from the checkpoint's config when omitted.
    #[arg(long)]
    test_data: Option<PathBuf>,
    /// Write `index x0 y0 x1 y1 iou` lines for every test image.
    #[arg(long)]
    dump_boxes: Option<PathBuf>,
}

#[derive(Args)]
struct VisualizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to draw samples from; the checkpoint's test split when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Sample indices.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    samples: Vec<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Check a single op.
    #[arg(long)]
    op: Option<String>,
    /// Relative-error tolerance.
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Multiplies every analytic gradient; exercises the failure path.
    #[arg(long, hide = true)]
    corrupt: Option<f64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Visualize(a) => visualize(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

/// Defaults, then the seed from the environment, the config file, the
/// overrides, the ablation preset and finally the explicit flags.
fn run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(seed) = config::env_seed()? {
        cfg.train.seed = seed;
    }
    if let Some(path) = &a.config {
        cfg.apply_text(&read_text(path)?)?;
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(row) = a.ablation {
        cfg.apply_ablation(row);
    }
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = &a.train_data {
        cfg.train_data = p.display().to_string();
    }
    if let Some(p) = &a.test_data {
        cfg.test_data = p.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Loads the configured dataset files, or generates the splits when no
/// paths are set. The config's dataset spec follows the loaded files.
fn datasets(cfg: &mut RunConfig) -> Result<(Dataset, Dataset)> {
    let train = match cfg.train_data.as_str() {
        "" => data::generate(&cfg.data, Split::Train)?,
        p => load_dataset(Path::new(p))?,
    };
    let test = match cfg.test_data.as_str() {
        "" => data::generate(&train.spec, Split::Test)?,
        p => load_dataset(Path::new(p))?,
    };
    if train.spec != test.spec {
        bail!("train and test files were generated from different specs");
    }
    cfg.data = train.spec.clone();
    cfg.validate()?;
    Ok((train, test))
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &a.config {
        cfg.apply_text(&read_text(path)?)?;
    }
    for o in &a.overrides {
        cfg.apply_override(o)?;
    }
    let spec = &mut cfg.data;
    if let Some(v) = a.classes {
        spec.num_classes = v;
    }
    if let Some(v) = a.train {
        spec.train_samples = v;
    }
    if let Some(v) = a.test {
        spec.test_samples = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    cfg.validate()?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for split in [Split::Train, Split::Test] {
        let d = data::generate(&cfg.data, split)?;
        let path = a.out.join(format!("{}.wsbd", split.name()));
        d.save(&path).with_context(|| format!("writing {}", path.display()))?;
        println!("wrote {} ({} samples)", path.display(), d.len());
    }
    let manifest = a.out.join("manifest.txt");
    fs::write(&manifest, cfg.data.manifest()).with_context(|| format!("writing {}", manifest.display()))?;
    println!("wrote {}", manifest.display());
    Ok(ExitCode::SUCCESS)
}

fn train(a: TrainArgs) -> Result<ExitCode> {
    let mut cfg = run_config(&a.run)?;
    if let Some(p) = &a.log {
        cfg.log = p.display().to_string();
    }
    if let Some(p) = &a.checkpoint {
        cfg.checkpoint = p.display().to_string();
    }
    let (train, test) = datasets(&mut cfg)?;
    let echo = cfg.echo();
    print!("{echo}");
    println!("{LOG_HEADER}");
    let (checkpoint, outcome) = experiment::train(&cfg, &train, Some(&test), |r| println!("{}", r.log_line()))?;
    if !cfg.log.is_empty() {
        let mut text = String::new();
        for line in echo.lines() {
            writeln!(text, "# {line}")?;
        }
        text.push_str(&outcome.log_text());
        fs::write(&cfg.log, text).with_context(|| format!("writing log {}", cfg.log))?;
    }
    if !cfg.checkpoint.is_empty() {
        checkpoint
            .save(&cfg.checkpoint)
            .with_context(|| format!("writing checkpoint {}", cfg.checkpoint))?;
        println!("wrote {}", cfg.checkpoint);
    }
    Ok(ExitCode::SUCCESS)
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let cfg = RunConfig::parse(&checkpoint.config_text)?;
    let test = match &a.test_data {
        Some(p) => load_dataset(p)?,
        None => data::generate(&cfg.data, Split::Test)?,
    };
    if test.spec.num_classes != checkpoint.model.config().classes {
        bail!(
            "test set has {} classes, checkpoint was trained on {}",
            test.spec.num_classes,
            checkpoint.model.config().classes
        );
    }
    let report = experiment::evaluate(&checkpoint, &test)?;
    println!("samples\t{}", test.len());
    println!("accuracy\t{}", report.accuracy);
    println!("mIoU\t{}", report.metrics.miou);
    println!("loc_error\t{}", report.metrics.loc_error);
    for (c, acc) in report.per_class_accuracy.iter().enumerate() {
        println!("class_{c}\t{acc}");
    }
    if let Some(path) = &a.dump_boxes {
        let text = localization::format_box_list(&report.boxes, &test.boxes());
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn visualize(a: VisualizeArgs) -> Result<ExitCode> {
    let checkpoint = load_checkpoint(&a.checkpoint)?;
    let cfg = RunConfig::parse(&checkpoint.config_text)?;
    let set = match &a.data {
        Some(p) => load_dataset(p)?,
        None => data::generate(&cfg.data, Split::Test)?,
    };
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for &i in &a.samples {
        let Some(sample) = set.samples.get(i) else {
            bail!("sample index {i} out of range for {} samples", set.len());
        };
        let view = experiment::inspect(&checkpoint, &sample.image)?;
        let out = |suffix: &str| a.out.join(format!("sample{i}_{suffix}"));
        viz::write_file(out("input.ppm"), &viz::RgbImage::from_tensor(&sample.image)?.to_ppm())?;
        if let Some(att) = &view.attention {
            for (k, pgm) in viz::attention_pgms(att)?.iter().enumerate() {
                viz::write_file(out(&format!("part{k}.pgm")), pgm)?;
            }
        }
        viz::write_file(out("mean.pgm"), &viz::mask_pgm(&view.mask))?;
        let overlay = viz::overlay(&sample.image, &view.predicted, &sample.object_box)?;
        viz::write_file(out("overlay.ppm"), &overlay.to_ppm())?;
        println!(
            "sample {i}: label {} box {:.4} {:.4} {:.4} {:.4} iou {:.4}",
            sample.label,
            view.predicted.x0,
            view.predicted.y0,
            view.predicted.x1,
            view.predicted.y1,
            localization::iou(&view.predicted, &sample.object_box)
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run_gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let opts = CheckOptions {
        tolerance: a.tolerance,
        corrupt: a.corrupt,
        ..CheckOptions::default()
    };
    let reports = gradcheck::run_suite(a.op.as_deref(), &opts)?;
    let mut failed = 0;
    for r in &reports {
        println!("{}", r.line());
        if !r.passed() {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} of {} checks failed", reports.len());
        return Ok(ExitCode::FAILURE);
    }
    println!("all {} checks passed", reports.len());
    Ok(ExitCode::SUCCESS)
}

fn ablate(a: RunArgs) -> Result<ExitCode> {
    if a.ablation.is_some() {
        bail!("--ablation selects a single row; ablate runs all of them");
    }
    let mut cfg = run_config(&a)?;
    let (train, test) = datasets(&mut cfg)?;
    print!("{}", cfg.echo());
    let rows = experiment::ablate(&cfg, &train, &test, |r| {
        eprintln!("finished {} ({})", r.row.name(), r.row.description())
    })?;
    print!("{}", experiment::ablation_table(&rows));
    Ok(ExitCode::SUCCESS)
}
