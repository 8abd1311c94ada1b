//! `priorseg`: dataset synthesis, training, evaluation, prediction and the
//! blind-spot report from one binary.
//!
//! Every subcommand takes `--config`, repeatable `--set KEY=VALUE`, `--out`
//! and `--seed`, writes its artifacts under `--out` and records the effective
//! configuration in `<out>/resolved-config`. Failures print one line,
//! `error: kind=<kind> msg=<message>`, and exit with status 1.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use image::{Rgb, RgbImage};
use priorseg_core::blindspot::simulate_sharded;
use priorseg_core::data::{
    binarize, compute_class_prior, generate_synthetic, images_to_tensor, load_dataset, save_dataset,
    select_training_subset,
};
use priorseg_core::metrics::{metrics_csv, MetricsRow};
use priorseg_core::model::{load_checkpoint, save_checkpoint, Scope};
use priorseg_core::trainer::{evaluate_checkpoint, fit, initialize_weights};
use priorseg_core::{
    bias_report, bias_report_csv, BlindSpotModel, Class, DatasetSplit, Error, ExperimentConfig, ImageTile,
    LabelMask, Result, RsNet,
};

/// Monte Carlo shards; fixed so results do not depend on the thread count.
const SIMULATION_SHARDS: u64 = 16;

#[derive(Parser)]
#[command(name = "priorseg", version, about = "Semi-supervised particle segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset into <out>.
    Synth(Common),
    /// Print the class prior of the labelled training subset.
    PriorStats(Common),
    /// Train a model; writes best/final checkpoints and the history.
    Train(Common),
    /// Evaluate a checkpoint on the held-out labelled tiles.
    Eval(Common),
    /// Write predicted masks, and error overlays for labelled tiles.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Skip the colour-coded error overlays.
        #[arg(long)]
        no_overlay: bool,
    },
    /// Analytic and simulated blind-spot probabilities per class.
    Blindspot(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Seed for the subcommand's randomness.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    /// Loads the config, applies overrides, creates `--out` and writes the
    /// resolved configuration there.
    fn resolve(&self, seed_key: &str) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.set(seed_key, &seed.to_string())?;
        }
        fs::create_dir_all(&self.out).map_err(|e| Error::Io {
            path: self.out.clone(),
            source: e,
        })?;
        write(&self.out.join("resolved-config"), &cfg.to_text())?;
        Ok(cfg)
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| Error::Config {
        field: key.into(),
        reason: "required by this subcommand".into(),
    })
}

fn training_split(cfg: &ExperimentConfig) -> Result<DatasetSplit> {
    let data = load_dataset(require(&cfg.data_dir, "data_dir")?)?;
    select_training_subset(&data, cfg.tiles_per_pipe, cfg.subset_seed)
}

fn synth(common: &Common) -> Result<()> {
    let cfg = common.resolve("synth.seed")?;
    let split = generate_synthetic(&cfg.synth)?;
    save_dataset(&split, &common.out)?;
    println!(
        "wrote {} labelled and {} unlabelled tiles to {}",
        split.labelled.len(),
        split.unlabelled.len(),
        common.out.display()
    );
    Ok(())
}

fn prior_stats(common: &Common) -> Result<()> {
    let cfg = common.resolve("subset_seed")?;
    let split = training_split(&cfg)?;
    let prior = compute_class_prior(&split.masks())?;
    let mut csv = String::from("class,mu,sigma\n");
    for c in Class::ALL {
        csv.push_str(&format!(
            "{},{:.6},{:.6}\n",
            c.name(),
            prior.mu()[c.index()],
            prior.sigma()[c.index()]
        ));
    }
    write(&common.out.join("prior.csv"), &csv)?;
    println!("{:<12} {:>10} {:>10}", "class", "mu", "sigma");
    for c in Class::ALL {
        println!("{:<12} {:>10.6} {:>10.6}", c.name(), prior.mu()[c.index()], prior.sigma()[c.index()]);
    }
    Ok(())
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.resolve("train.seed")?;
    let split = training_split(&cfg)?;
    let prior = compute_class_prior(&split.masks())?;
    let mut model = RsNet::<f32>::new(cfg.arch.clone())?;
    initialize_weights(&mut model, cfg.train.seed);
    eprintln!(
        "training {} on {} labelled / {} unlabelled tiles, {} inference parameters",
        cfg.train.variant,
        split.labelled.len(),
        split.unlabelled.len(),
        model.count_parameters(Scope::Inference)
    );
    let out = fit(&mut model, &split, &prior, &cfg.train)?;
    save_checkpoint(&out.best, &common.out.join("best.ckpt"))?;
    save_checkpoint(&model, &common.out.join("final.ckpt"))?;
    write(&common.out.join("history.jsonl"), &out.history.to_jsonl())?;
    println!("best epoch {} with loss {:.6}", out.best_epoch, out.best_loss);
    Ok(())
}

fn eval(common: &Common) -> Result<()> {
    let cfg = common.resolve("subset_seed")?;
    let model = load_checkpoint::<f32>(require(&cfg.checkpoint, "checkpoint")?)?;
    let split = training_split(&cfg)?;
    let counts = evaluate_checkpoint(&model, &split.held_out)?;
    let row = MetricsRow::from_counts(cfg.train.variant.name(), &format!("T{}", cfg.tiles_per_pipe), &counts)?;
    let csv = metrics_csv(&[row]);
    write(&common.out.join("metrics.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

/// Tile pixels with false negatives (missed aggregate) in blue and false
/// positives in red.
fn error_overlay(image: &ImageTile, pred: &LabelMask, reference: &LabelMask) -> RgbImage {
    let s = image.size();
    let plane = s * s;
    let agg = Class::Aggregate as u8;
    RgbImage::from_fn(s as u32, s as u32, |x, y| {
        let i = y as usize * s + x as usize;
        match (pred.labels()[i] == agg, reference.labels()[i] == agg) {
            (false, true) => Rgb([0, 0, 255]),
            (true, false) => Rgb([255, 0, 0]),
            _ => Rgb([0, 1, 2].map(|c| (image.data()[c * plane + i] * 255.0).round() as u8)),
        }
    })
}

fn predict(common: &Common, overlay: bool) -> Result<()> {
    let cfg = common.resolve("subset_seed")?;
    let model = load_checkpoint::<f32>(require(&cfg.checkpoint, "checkpoint")?)?;
    let data = load_dataset(require(&cfg.data_dir, "data_dir")?)?;
    let mask_dir = common.out.join("masks");
    let overlay_dir = common.out.join("overlays");
    for d in [&mask_dir, &overlay_dir] {
        fs::create_dir_all(d).map_err(|e| Error::Io {
            path: d.clone(),
            source: e,
        })?;
    }
    let tiles: Vec<(&str, &ImageTile, Option<&LabelMask>)> = data
        .labelled
        .iter()
        .map(|t| (t.name.as_str(), &t.image, Some(&t.mask)))
        .chain(data.unlabelled.iter().map(|t| (t.name.as_str(), &t.image, None)))
        .collect();
    for chunk in tiles.chunks(4) {
        let x = images_to_tensor::<f32>(&chunk.iter().map(|t| t.1).collect::<Vec<_>>());
        let (y, _) = model.forward_main(&x)?;
        for (pred, (name, image, reference)) in binarize(&y, 0.5)?.iter().zip(chunk) {
            let path = mask_dir.join(format!("{name}.png"));
            pred.to_gray().save(&path).map_err(|source| Error::Image { path, source })?;
            if let (true, Some(reference)) = (overlay, reference) {
                save_png(&error_overlay(image, pred, reference), &overlay_dir.join(format!("{name}.png")))?;
            }
        }
    }
    println!("wrote {} masks to {}", tiles.len(), mask_dir.display());
    Ok(())
}

fn blindspot(common: &Common) -> Result<()> {
    let cfg = common.resolve("blindspot.seed")?;
    let b = &cfg.blindspot;
    let model = BlindSpotModel::new(b.priors.clone(), b.error_rate)?;
    let sim = (b.trials > 0)
        .then(|| simulate_sharded(&model, b.trials, b.seed, SIMULATION_SHARDS))
        .transpose()?;
    let csv = bias_report_csv(&bias_report(&model, sim.as_ref()));
    write(&common.out.join("blindspot.csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(c) => synth(c),
        Command::PriorStats(c) => prior_stats(c),
        Command::Train(c) => train(c),
        Command::Eval(c) => eval(c),
        Command::Predict { common, no_overlay } => predict(common, !no_overlay),
        Command::Blindspot(c) => blindspot(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: kind={} msg={msg}", e.kind());
            ExitCode::FAILURE
        }
    }
}
