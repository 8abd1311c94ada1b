//! Desk-scale ablation: one synthetic dataset, a one-tile-per-pipe training
//! subset, and the three training variants over several seeds, evaluated on
//! the held-out labelled tiles.

use serde::{Deserialize, Serialize};

use crate::data::{compute_class_prior, generate_synthetic, select_training_subset, SynthConfig};
use crate::error::Result;
use crate::metrics::{metrics_csv, MetricsRow};
use crate::model::{ArchConfig, RsNet};
use crate::trainer::{evaluate_checkpoint, fit, initialize_weights, TrainConfig, TrainHistory, Variant};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationConfig {
    pub synth: SynthConfig,
    pub arch: ArchConfig,
    /// Template for every run; `variant` and `seed` are overwritten.
    pub train: TrainConfig,
    pub tiles_per_pipe: usize,
    pub subset_seed: u64,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
}

impl AblationConfig {
    /// 128 px tiles, eight pipes of four labelled tiles, one training tile per
    /// pipe, 64 unlabelled tiles, a quarter of the pixels aggregate, 40
    /// epochs, three seeds. Channel widths are reduced for CPU runtimes.
    pub fn desk() -> Self {
        AblationConfig {
            synth: SynthConfig {
                tile_size: 128,
                num_labelled: 32,
                num_unlabelled: 64,
                num_pipes: 8,
                target_minority_fraction: 0.25,
                particle_diameter_range: (8.0, 40.0),
                texture_noise_level: 0.04,
                seed: 2024,
            },
            arch: ArchConfig {
                input_size: 128,
                input_channels: 3,
                block_depths: vec![8, 16, 32, 64, 128],
                num_classes: 2,
                with_aux: true,
            },
            train: TrainConfig {
                epochs: 40,
                ..TrainConfig::default()
            },
            tiles_per_pipe: 1,
            subset_seed: 0,
            seeds: vec![0, 1, 2],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub variant: Variant,
    pub seed: u64,
    pub metrics: MetricsRow,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AblationResult {
    pub runs: Vec<AblationRun>,
}

impl AblationResult {
    /// Metrics of every run; the setup column carries the seed.
    pub fn csv(&self) -> String {
        let rows: Vec<MetricsRow> = self.runs.iter().map(|r| r.metrics.clone()).collect();
        metrics_csv(&rows)
    }

    /// Median of `f` over the seeds of one variant. Undefined values are
    /// dropped; `None` when nothing remains.
    pub fn median(&self, variant: Variant, f: impl Fn(&MetricsRow) -> Option<f64>) -> Option<f64> {
        let mut v: Vec<f64> = self
            .runs
            .iter()
            .filter(|r| r.variant == variant)
            .filter_map(|r| f(&r.metrics))
            .collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
    }
}

/// Runs every (seed, variant) pair. Models for the same seed start from the
/// same initial weights, so variants differ only in their loss terms.
pub fn run_ablation(config: &AblationConfig) -> Result<AblationResult> {
    let data = generate_synthetic(&config.synth)?;
    let split = select_training_subset(&data, config.tiles_per_pipe, config.subset_seed)?;
    let prior = compute_class_prior(&split.masks())?;
    let setup = format!("T{}", config.tiles_per_pipe);
    let mut result = AblationResult::default();
    for &seed in &config.seeds {
        for &variant in &config.variants {
            let mut model = RsNet::<f32>::new(config.arch.clone())?;
            initialize_weights(&mut model, seed);
            let train = TrainConfig {
                variant,
                seed,
                ..config.train.clone()
            };
            let out = fit(&mut model, &split, &prior, &train)?;
            let counts = evaluate_checkpoint(&out.best, &split.held_out)?;
            let metrics = MetricsRow::from_counts(variant.name(), &format!("{setup}/seed{seed}"), &counts)?;
            result.runs.push(AblationRun {
                variant,
                seed,
                metrics,
                best_epoch: out.best_epoch,
                history: out.history,
            });
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ClassMetrics;

    fn row(recall: Option<f64>) -> MetricsRow {
        let m = ClassMetrics {
            recall,
            precision: None,
            f1: None,
        };
        MetricsRow {
            variant: "base".into(),
            setup: "T1".into(),
            overall_accuracy: 0.0,
            mean_f1: 0.0,
            aggregate: m,
            suspension: m,
        }
    }

    #[test]
    fn median_handles_odd_even_and_missing() {
        let runs = |vals: &[Option<f64>]| AblationResult {
            runs: vals
                .iter()
                .enumerate()
                .map(|(i, &v)| AblationRun {
                    variant: Variant::Base,
                    seed: i as u64,
                    metrics: row(v),
                    best_epoch: 1,
                    history: TrainHistory::default(),
                })
                .collect(),
        };
        let r = |m: &MetricsRow| m.aggregate.recall;
        assert_eq!(runs(&[Some(3.0), Some(1.0), Some(2.0)]).median(Variant::Base, r), Some(2.0));
        assert_eq!(runs(&[Some(3.0), Some(1.0)]).median(Variant::Base, r), Some(2.0));
        assert_eq!(runs(&[None, Some(5.0)]).median(Variant::Base, r), Some(5.0));
        assert_eq!(runs(&[None]).median(Variant::Base, r), None);
        assert_eq!(runs(&[Some(1.0)]).median(Variant::Full, r), None);
    }

    #[test]
    fn miniature_ablation_runs_end_to_end() {
        let mut cfg = AblationConfig::desk();
        cfg.synth.tile_size = 32;
        cfg.synth.num_labelled = 4;
        cfg.synth.num_pipes = 2;
        cfg.synth.num_unlabelled = 4;
        cfg.synth.particle_diameter_range = (4.0, 10.0);
        cfg.arch.input_size = 32;
        cfg.arch.block_depths = vec![2, 3, 3, 4, 4];
        cfg.train.epochs = 1;
        cfg.seeds = vec![0];
        let res = run_ablation(&cfg).unwrap();
        assert_eq!(res.runs.len(), 3);
        assert_eq!(res.csv().lines().count(), 4);
    }
}
