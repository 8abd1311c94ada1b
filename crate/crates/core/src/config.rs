//! Flat `key = value` experiment configuration covering architecture,
//! training, perturbation, synthetic data and blind-spot settings.
//!
//! Lines starting with `#` and blank lines are ignored. Unknown keys are
//! rejected so typos do not silently fall back to defaults.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::model::ArchConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotSettings {
    pub priors: Vec<f64>,
    pub error_rate: f64,
    pub trials: u64,
    pub seed: u64,
}

impl Default for BlindSpotSettings {
    fn default() -> Self {
        BlindSpotSettings {
            priors: vec![0.362, 0.638],
            error_rate: 0.2,
            trials: 1_000_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// Dataset root in the labelled/unlabelled layout.
    pub data_dir: Option<PathBuf>,
    /// Checkpoint read by `eval` and `predict`.
    pub checkpoint: Option<PathBuf>,
    pub tiles_per_pipe: usize,
    pub subset_seed: u64,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub blindspot: BlindSpotSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data_dir: None,
            checkpoint: None,
            tiles_per_pipe: 1,
            subset_seed: 0,
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            blindspot: BlindSpotSettings::default(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

fn parse_pair(key: &str, value: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, value)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::config(key, "expected two comma-separated numbers")),
    }
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Sets one key. Keys use the names written by [`Self::to_text`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(v)),
            "tiles_per_pipe" => self.tiles_per_pipe = parse(key, v)?,
            "subset_seed" => self.subset_seed = parse(key, v)?,
            "arch.input_size" => self.arch.input_size = parse(key, v)?,
            "arch.input_channels" => self.arch.input_channels = parse(key, v)?,
            "arch.block_depths" => self.arch.block_depths = parse_list(key, v)?,
            "arch.num_classes" => self.arch.num_classes = parse(key, v)?,
            "arch.with_aux" => self.arch.with_aux = parse(key, v)?,
            "train.variant" => t.variant = v.parse()?,
            "train.epochs" => t.epochs = parse(key, v)?,
            "train.batch_labelled" => t.batch_labelled = parse(key, v)?,
            "train.batch_unlabelled" => t.batch_unlabelled = parse(key, v)?,
            "train.lr_initial" => t.lr_initial = parse(key, v)?,
            "train.lr_decay_factor" => t.lr_decay_factor = parse(key, v)?,
            "train.plateau_patience" => t.plateau_patience = parse(key, v)?,
            "train.plateau_min_delta" => t.plateau_min_delta = parse(key, v)?,
            "train.adam_beta1" => t.adam_beta1 = parse(key, v)?,
            "train.adam_beta2" => t.adam_beta2 = parse(key, v)?,
            "train.adam_epsilon" => t.adam_epsilon = parse(key, v)?,
            "train.weight_decay_l2" => t.weight_decay_l2 = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "loss.w1" => t.loss_weights.consensus = parse(key, v)?,
            "loss.w2" => t.loss_weights.prior = parse(key, v)?,
            "loss.w3" => t.loss_weights.reconstruction = parse(key, v)?,
            "perturb.noise_range" => t.perturb.noise_range = parse_pair(key, v)?,
            "perturb.drop_threshold_range" => t.perturb.drop_threshold_range = parse_pair(key, v)?,
            "perturb.seed" => t.perturb.seed = parse(key, v)?,
            "synth.tile_size" => self.synth.tile_size = parse(key, v)?,
            "synth.num_labelled" => self.synth.num_labelled = parse(key, v)?,
            "synth.num_unlabelled" => self.synth.num_unlabelled = parse(key, v)?,
            "synth.num_pipes" => self.synth.num_pipes = parse(key, v)?,
            "synth.target_minority_fraction" => self.synth.target_minority_fraction = parse(key, v)?,
            "synth.particle_diameter_range" => self.synth.particle_diameter_range = parse_pair(key, v)?,
            "synth.texture_noise_level" => self.synth.texture_noise_level = parse(key, v)?,
            "synth.seed" => self.synth.seed = parse(key, v)?,
            "blindspot.priors" => self.blindspot.priors = parse_list(key, v)?,
            "blindspot.error_rate" => self.blindspot.error_rate = parse(key, v)?,
            "blindspot.trials" => self.blindspot.trials = parse(key, v)?,
            "blindspot.seed" => self.blindspot.seed = parse(key, v)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o, "override must look like KEY=VALUE"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}", n + 1), "expected `key = value`"))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Every key with its current value, in a fixed order.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let s = &self.synth;
        let b = &self.blindspot;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut entries: Vec<(&str, String)> = Vec::new();
        if let Some(p) = path(&self.data_dir) {
            entries.push(("data_dir", p));
        }
        if let Some(p) = path(&self.checkpoint) {
            entries.push(("checkpoint", p));
        }
        entries.extend([
            ("tiles_per_pipe", self.tiles_per_pipe.to_string()),
            ("subset_seed", self.subset_seed.to_string()),
            ("arch.input_size", self.arch.input_size.to_string()),
            ("arch.input_channels", self.arch.input_channels.to_string()),
            ("arch.block_depths", join(&self.arch.block_depths)),
            ("arch.num_classes", self.arch.num_classes.to_string()),
            ("arch.with_aux", self.arch.with_aux.to_string()),
            ("train.variant", t.variant.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_labelled", t.batch_labelled.to_string()),
            ("train.batch_unlabelled", t.batch_unlabelled.to_string()),
            ("train.lr_initial", t.lr_initial.to_string()),
            ("train.lr_decay_factor", t.lr_decay_factor.to_string()),
            ("train.plateau_patience", t.plateau_patience.to_string()),
            ("train.plateau_min_delta", t.plateau_min_delta.to_string()),
            ("train.adam_beta1", t.adam_beta1.to_string()),
            ("train.adam_beta2", t.adam_beta2.to_string()),
            ("train.adam_epsilon", t.adam_epsilon.to_string()),
            ("train.weight_decay_l2", t.weight_decay_l2.to_string()),
            ("train.seed", t.seed.to_string()),
            ("loss.w1", t.loss_weights.consensus.to_string()),
            ("loss.w2", t.loss_weights.prior.to_string()),
            ("loss.w3", t.loss_weights.reconstruction.to_string()),
            ("perturb.noise_range", join(&[t.perturb.noise_range.0, t.perturb.noise_range.1])),
            (
                "perturb.drop_threshold_range",
                join(&[t.perturb.drop_threshold_range.0, t.perturb.drop_threshold_range.1]),
            ),
            ("perturb.seed", t.perturb.seed.to_string()),
            ("synth.tile_size", s.tile_size.to_string()),
            ("synth.num_labelled", s.num_labelled.to_string()),
            ("synth.num_unlabelled", s.num_unlabelled.to_string()),
            ("synth.num_pipes", s.num_pipes.to_string()),
            ("synth.target_minority_fraction", s.target_minority_fraction.to_string()),
            (
                "synth.particle_diameter_range",
                join(&[s.particle_diameter_range.0, s.particle_diameter_range.1]),
            ),
            ("synth.texture_noise_level", s.texture_noise_level.to_string()),
            ("synth.seed", s.seed.to_string()),
            ("blindspot.priors", join(&b.priors)),
            ("blindspot.error_rate", b.error_rate.to_string()),
            ("blindspot.trials", b.trials.to_string()),
            ("blindspot.seed", b.seed.to_string()),
        ]);
        let mut out = String::new();
        for (k, v) in entries {
            writeln!(out, "{k} = {v}").expect("string write");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Variant;

    #[test]
    fn text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.data_dir = Some("data/synth".into());
        cfg.arch.block_depths = vec![8, 16, 32, 64, 128];
        cfg.train.variant = Variant::Cons;
        cfg.train.perturb.noise_range = (-0.2, 0.2);
        let back = ExperimentConfig::parse_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_overrides() {
        let mut cfg = ExperimentConfig::parse_text("# note\n\ntrain.epochs = 3\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        cfg.apply_overrides(&["train.epochs=7", "train.variant = base"]).unwrap();
        assert_eq!((cfg.train.epochs, cfg.train.variant), (7, Variant::Base));
    }

    #[test]
    fn bad_input_names_the_key() {
        let err = ExperimentConfig::parse_text("train.epoch = 3").unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "train.epoch"));
        let err = ExperimentConfig::parse_text("train.variant = semi").unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(ExperimentConfig::parse_text("no equals sign").is_err());
        assert!(ExperimentConfig::default().apply_overrides(&["loss.w1"]).is_err());
    }
}
