//! `cpal` command-line driver.
//!
//! Exit codes: 0 on success, 1 when inputs or configuration fail validation
//! (or a check fails), 2 on file-system errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpal_core::ablation::{evaluate_epoch, evaluate_raw_cam, run_ablation, variant_report, EvalReport};
use cpal_core::context::Metric;
use cpal_core::eval::{default_thresholds, evaluate_seed_miou, ForegroundMaps};
use cpal_core::gradcheck::{run_grad_check, GradCheckConfig};
use cpal_core::pacam::{AggregationMode, PixelReduction};
use cpal_core::pipeline::{load_pacams, save_pacams, ConfigFile, Pipeline, RunConfig};
use cpal_core::synth::{gen_synthetic, Dataset, DatasetSpec};
use cpal_core::Error;

#[derive(Debug, Parser)]
#[command(name = "cpal", version, about = "Context prototype-aware activation maps on synthetic segmentation data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset (arrays plus manifest.json).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Number of images; overrides the config.
        #[arg(long)]
        images: Option<usize>,
    },
    /// Run the epoch loop and write PACAMs, candidates and report.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Run every ablation variant and the K sweep; writes report.json.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
    },
    /// Score saved PACAMs against the dataset ground truth.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArg,
        /// PACAM manifest written by `run`.
        #[arg(long)]
        maps: PathBuf,
    },
    /// Finite-difference check of the consistency-loss gradient.
    GradCheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
}

#[derive(Debug, Args)]
struct DataArg {
    /// Dataset manifest; defaults to the config's `dataset` entry.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Foreground threshold for instance masks.
    #[arg(long)]
    tau: Option<f64>,
    /// Context prototypes per class (k-means clusters).
    #[arg(long)]
    np: Option<usize>,
    /// Soft neighbors kept per instance.
    #[arg(long)]
    k: Option<usize>,
    /// Support bank capacity per class.
    #[arg(long)]
    bank_size: Option<usize>,
    /// Positiveness temperature.
    #[arg(long)]
    gamma: Option<f64>,
    /// Similarity metric: l1, l2, cosine or dot [default: dot].
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    /// Neighbor aggregation: uniform or weighted.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AggregationMode>,
    /// Number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Images per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Run seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Build a background channel and background prototypes.
    #[arg(long, action = clap::ArgAction::Set)]
    include_background: Option<bool>,
    /// Sum the consistency loss over pixels instead of averaging.
    #[arg(long)]
    l1_pixel_sum: bool,
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_mode(s: &str) -> Result<AggregationMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Loaded config file plus the directory its relative paths resolve against.
struct Loaded {
    file: ConfigFile,
    base: PathBuf,
}

impl Common {
    fn load(&self) -> cpal_core::Result<Loaded> {
        let Some(path) = &self.config else {
            return Ok(Loaded {
                file: ConfigFile::default(),
                base: PathBuf::new(),
            });
        };
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        Ok(Loaded {
            file: ConfigFile::from_json_str(&text)?,
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    fn run_config(&self, base: &RunConfig) -> cpal_core::Result<RunConfig> {
        let mut c = base.clone();
        if let Some(v) = self.tau {
            c.tau = v;
        }
        if let Some(v) = self.np {
            c.n_p = v;
        }
        if let Some(v) = self.k {
            c.k = v;
        }
        if let Some(v) = self.bank_size {
            c.bank_capacity = v;
        }
        if let Some(v) = self.gamma {
            c.gamma = v;
        }
        if let Some(v) = self.metric {
            c.metric = v;
        }
        if let Some(v) = self.mode {
            c.aggregation_mode = v;
        }
        if let Some(v) = self.epochs {
            c.epochs = v;
        }
        if let Some(v) = self.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.include_background {
            c.include_background = v;
        }
        if self.l1_pixel_sum {
            c.pixel_reduction = PixelReduction::Sum;
        }
        c.validate()?;
        Ok(c)
    }

    fn out_dir(&self) -> cpal_core::Result<&Path> {
        self.out
            .as_deref()
            .ok_or_else(|| Error::Config("--out is required".into()))
    }
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn dataset_path(data: &DataArg, loaded: &Loaded) -> cpal_core::Result<PathBuf> {
    match (&data.data, &loaded.file.dataset) {
        (Some(p), _) => Ok(p.clone()),
        (None, Some(p)) => Ok(loaded.base.join(p)),
        (None, None) => Err(Error::Config("no dataset: pass --data or set `dataset` in the config".into())),
    }
}

fn write_text(path: &Path, text: &str) -> cpal_core::Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_error(parent, e))?;
    }
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn print_summary(report: &EvalReport) {
    for v in &report.variants {
        let confuser = v.confuser_rate.map_or_else(|| "-".to_string(), |r| format!("{r:.4}"));
        println!("{:<14} miou {:.4}  t={:.2}  confuser {confuser}", v.name, v.best_miou, v.best_threshold);
    }
    for row in &report.k_sweep {
        println!("K={:<3} miou {:.4}", row.k, row.best_miou);
    }
}

fn gen_data(common: &Common, images: Option<usize>) -> cpal_core::Result<()> {
    let loaded = common.load()?;
    let mut spec = loaded.file.spec.unwrap_or_else(DatasetSpec::default);
    if let Some(n) = images {
        spec.images = n;
    }
    if let Some(seed) = common.seed {
        spec.seed = seed;
    }
    let out = common.out_dir()?;
    let manifest = gen_synthetic(&spec, out)?;
    println!("wrote {} images to {}", manifest.images.len(), out.display());
    Ok(())
}

fn run(common: &Common, data: &DataArg) -> cpal_core::Result<()> {
    let loaded = common.load()?;
    let config = common.run_config(&loaded.file.run)?;
    let out = common.out_dir()?;
    let dataset = Dataset::load(dataset_path(data, &loaded)?)?;
    let pipeline = Pipeline::new(&dataset, config.clone())?;
    let output = pipeline.run()?;
    let last = output.last();
    save_pacams(&dataset, &last.pacams, config.include_background, out.join("pacam"))?;
    last.candidates.save(out.join("candidates"))?;
    let mut report = EvalReport::new(&dataset, &config);
    let raw = evaluate_raw_cam(&pipeline, &dataset)?;
    report.variants.push(variant_report("raw-cam", &raw, &[], &dataset));
    let seed = evaluate_epoch(last, &dataset)?;
    report.variants.push(variant_report("cpal", &seed, &output.epochs, &dataset));
    write_text(&out.join("report.json"), &report.to_json()?)?;
    print_summary(&report);
    Ok(())
}

fn ablate(common: &Common, data: &DataArg) -> cpal_core::Result<()> {
    let loaded = common.load()?;
    let config = common.run_config(&loaded.file.run)?;
    let out = common.out_dir()?;
    let dataset = Dataset::load(dataset_path(data, &loaded)?)?;
    let report = run_ablation(&dataset, &config)?;
    write_text(&out.join("report.json"), &report.to_json()?)?;
    print_summary(&report);
    Ok(())
}

fn eval(common: &Common, data: &DataArg, maps: &Path) -> cpal_core::Result<()> {
    let loaded = common.load()?;
    let dataset = Dataset::load(dataset_path(data, &loaded)?)?;
    let (manifest, sets) = load_pacams(maps)?;
    if manifest.classes != dataset.classes || sets.len() != dataset.images.len() {
        return Err(Error::Dimension(format!(
            "maps cover {} images of {} classes, dataset has {} images of {} classes",
            sets.len(),
            manifest.classes,
            dataset.images.len(),
            dataset.classes
        )));
    }
    for (entry, img) in manifest.images.iter().zip(&dataset.images) {
        if entry.id != img.id {
            return Err(Error::Format(format!("map {:?} does not match image {:?}", entry.id, img.id)));
        }
    }
    let fg: Vec<ForegroundMaps> = sets
        .iter()
        .map(|s| ForegroundMaps::from_pacam(s, dataset.background_id()))
        .collect();
    let gt: Vec<_> = dataset.images.iter().map(|i| i.gt.clone()).collect();
    let seed = evaluate_seed_miou(&fg, &gt, &default_thresholds(), dataset.classes)?;
    let v = variant_report("maps", &seed, &[], &dataset);
    let mut text = serde_json::to_string_pretty(&v)?;
    text.push('\n');
    match &common.out {
        Some(dir) => write_text(&dir.join("eval.json"), &text)?,
        None => print!("{text}"),
    }
    eprintln!("best miou {:.4} at t={:.2}", v.best_miou, v.best_threshold);
    Ok(())
}

fn grad_check(trials: usize, seed: u64, out: Option<&Path>, corrupt: bool) -> cpal_core::Result<bool> {
    let report = run_grad_check(&GradCheckConfig {
        trials,
        seed,
        corrupt,
        ..GradCheckConfig::default()
    })?;
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    match out {
        Some(dir) => write_text(&dir.join("grad_check.json"), &text)?,
        None => print!("{text}"),
    }
    eprintln!(
        "{}: max relative error {:.3e} over {} trials (tolerance {:.0e})",
        if report.passed { "PASS" } else { "FAIL" },
        report.max_relative_error,
        report.trials,
        report.tolerance
    );
    Ok(report.passed)
}

fn dispatch(cli: &Cli) -> cpal_core::Result<bool> {
    match &cli.command {
        Command::GenData { common, images } => gen_data(common, *images).map(|()| true),
        Command::Run { common, data } => run(common, data).map(|()| true),
        Command::Ablate { common, data } => ablate(common, data).map(|()| true),
        Command::Eval { common, data, maps } => eval(common, data, maps).map(|()| true),
        Command::GradCheck {
            trials,
            seed,
            out,
            corrupt,
        } => grad_check(*trials, *seed, out.as_deref(), *corrupt),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
