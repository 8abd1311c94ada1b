//! Training: weight initialization, the Adam optimizer with L2 penalty, the
//! plateau learning-rate schedule, single optimization steps for the three
//! variants, the epoch loop and held-out evaluation.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{binarize, images_to_tensor, masks_to_tensor, DatasetSplit, LabelledTile};
use crate::error::{Error, Result};
use crate::losses::{
    consensus_loss_with_grad, prior_loss_with_grad, reconstruction_loss_with_grad, supervised_loss_with_grad,
    total_loss, ClassPrior, ClassWeights, LossComponents, LossWeights,
};
use crate::metrics::ConfusionCounts;
use crate::model::{LatentGrad, ParamGroup, RsNet};
use crate::nn::ParamKind;
use crate::perturb::{perturb_latent_traced, PerturbConfig};
use crate::tensor::{Real, Tensor};

/// Which loss terms a training run uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Supervised loss only.
    Base,
    /// Supervised plus consensus.
    Cons,
    /// Supervised, consensus, prior and reconstruction.
    Full,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Cons, Variant::Full];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Cons => "cons",
            Variant::Full => "full",
        }
    }

    pub fn plan(self) -> StepPlan {
        StepPlan {
            supervised: true,
            consensus: self != Variant::Base,
            prior: self == Variant::Full,
            reconstruction: self == Variant::Full,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "cons" => Ok(Variant::Cons),
            "full" => Ok(Variant::Full),
            other => Err(Error::config("variant", format!("`{other}` is not one of base, cons, full"))),
        }
    }
}

/// Loss terms evaluated and backpropagated in one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StepPlan {
    pub supervised: bool,
    pub consensus: bool,
    pub prior: bool,
    pub reconstruction: bool,
}

impl StepPlan {
    pub fn uses_unlabelled(&self) -> bool {
        self.consensus || self.prior || self.reconstruction
    }

    /// Parameter groups that receive gradient, and so are updated, under this plan.
    pub fn updates(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Encoder => self.supervised || self.uses_unlabelled(),
            ParamGroup::MainDecoder => self.supervised,
            ParamGroup::AuxDecoder => self.uses_unlabelled(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_labelled: usize,
    pub batch_unlabelled: usize,
    pub lr_initial: f64,
    pub lr_decay_factor: f64,
    pub plateau_patience: usize,
    /// Minimum absolute decrease of the epoch loss that counts as improvement.
    pub plateau_min_delta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub weight_decay_l2: f64,
    pub loss_weights: LossWeights,
    pub perturb: PerturbConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            variant: Variant::Full,
            epochs: 500,
            batch_labelled: 4,
            batch_unlabelled: 4,
            lr_initial: 1e-3,
            lr_decay_factor: 0.1,
            plateau_patience: 25,
            plateau_min_delta: 1e-5,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-7,
            weight_decay_l2: 1e-5,
            loss_weights: LossWeights::default(),
            perturb: PerturbConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs as f64),
            ("batch_labelled", self.batch_labelled as f64),
            ("batch_unlabelled", self.batch_unlabelled as f64),
            ("lr_initial", self.lr_initial),
            ("plateau_patience", self.plateau_patience as f64),
            ("adam_epsilon", self.adam_epsilon),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, format!("{v} must be positive")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor < 1.0) {
            return Err(Error::config("lr_decay_factor", "must lie strictly between 0 and 1"));
        }
        for (field, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        for (field, v) in [("plateau_min_delta", self.plateau_min_delta), ("weight_decay_l2", self.weight_decay_l2)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        self.loss_weights.validate()?;
        self.perturb.validate()
    }
}

/// He-normal kernels (variance `2 / fan_in`) and zero biases.
pub fn initialize_weights<T: Real>(model: &mut RsNet<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, p) in model.params_mut() {
        match p.kind {
            ParamKind::ConvWeight { fan_in } => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                p.value.iter_mut().for_each(|v| *v = T::from_f64_lossy(normal.sample(&mut rng)));
            }
            ParamKind::Bias => p.value.iter_mut().for_each(|v| *v = T::zero()),
        }
    }
}

/// Adam with per-parameter moment estimates and step counts.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    steps: Vec<u32>,
}

impl<T: Real> Adam<T> {
    pub fn new(model: &RsNet<T>, beta1: f64, beta2: f64, epsilon: f64, weight_decay: f64) -> Self {
        let lens: Vec<usize> = model.params().iter().map(|(_, p)| p.len()).collect();
        Adam {
            beta1,
            beta2,
            epsilon,
            weight_decay,
            m: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: lens.iter().map(|&n| vec![T::zero(); n]).collect(),
            steps: vec![0; lens.len()],
        }
    }

    pub fn from_config(model: &RsNet<T>, config: &TrainConfig) -> Self {
        Adam::new(
            model,
            config.adam_beta1,
            config.adam_beta2,
            config.adam_epsilon,
            config.weight_decay_l2,
        )
    }

    /// Updates the parameters whose group satisfies `active` from their
    /// accumulated gradients. Conv kernels get the L2 term `2 * lambda * w`.
    pub fn step(&mut self, model: &mut RsNet<T>, lr: f64, active: impl Fn(ParamGroup) -> bool) {
        let (b1, b2) = (T::from_f64_lossy(self.beta1), T::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let eps = T::from_f64_lossy(self.epsilon);
        let decay = T::from_f64_lossy(2.0 * self.weight_decay);
        for (i, (group, p)) in model.params_mut().into_iter().enumerate() {
            if !active(group) {
                continue;
            }
            self.steps[i] += 1;
            let t = self.steps[i] as i32;
            let step = T::from_f64_lossy(lr * (1.0 - self.beta2.powi(t)).sqrt() / (1.0 - self.beta1.powi(t)));
            let is_weight = p.is_weight();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.value.len() {
                let mut g = p.grad[j];
                if is_weight {
                    g += decay * p.value[j];
                }
                m[j] = b1 * m[j] + one_b1 * g;
                v[j] = b2 * v[j] + one_b2 * g * g;
                p.value[j] -= step * m[j] / (v[j].sqrt() + eps);
            }
        }
    }
}

/// Multiplies the learning rate by `factor` once the monitored loss has not
/// improved by more than `min_delta` for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauScheduler {
    lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's loss; returns true when the rate was reduced.
    pub fn step(&mut self, loss: f64) -> bool {
        if loss < self.best - self.min_delta {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.lr *= self.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}

/// Tensors for one optimization step.
#[derive(Clone, Debug)]
pub struct StepBatch<T> {
    pub x_labelled: Tensor<T>,
    pub y_labelled: Tensor<T>,
    pub x_unlabelled: Option<Tensor<T>>,
}

/// Fixed quantities a step needs besides the batch.
#[derive(Clone, Debug)]
pub struct StepContext<'a> {
    pub class_weights: &'a ClassWeights,
    pub prior: &'a ClassPrior,
    pub loss_weights: &'a LossWeights,
    pub perturb: &'a PerturbConfig,
}

fn finite(name: &str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Training(format!("{name} loss became {v}")))
    }
}

/// Computes the planned losses and accumulates their gradients. The main
/// decoder's output on unlabelled tiles is used only as a fixed target.
pub fn accumulate_step_gradients<T: Real, R: Rng + ?Sized>(
    model: &mut RsNet<T>,
    batch: &StepBatch<T>,
    plan: &StepPlan,
    ctx: &StepContext<'_>,
    rng: &mut R,
) -> Result<LossComponents> {
    model.zero_grad();
    let mut comps = LossComponents::default();

    if plan.supervised {
        let enc = model.encode(&batch.x_labelled)?;
        let main = model.decode_main(&enc.latent)?;
        let sup = supervised_loss_with_grad(&main.y, &batch.y_labelled, ctx.class_weights)?;
        comps.supervised = finite("supervised", sup.value.as_f64())?;
        let grad = model.backward_main(&main, &sup.grad);
        model.backward_encoder(&enc, grad);
    }

    if plan.uses_unlabelled() {
        let x_u = batch
            .x_unlabelled
            .as_ref()
            .ok_or_else(|| Error::config("unlabelled", "the variant needs unlabelled tiles"))?;
        let enc = model.encode(x_u)?;
        let (z_tilde, trace) = perturb_latent_traced(&enc.latent.z, ctx.perturb, rng)?;
        let aux = model.decode_aux(&z_tilde)?;
        let w = ctx.loss_weights;
        let mut grad_y: Option<Tensor<T>> = None;
        let mut add = |g: Tensor<T>, weight: f64| {
            let g = g.map(|v| v * T::from_f64_lossy(weight));
            match grad_y.as_mut() {
                Some(acc) => acc.add_assign(&g),
                None => grad_y = Some(g),
            }
        };
        if plan.consensus {
            let target = model.decode_main(&enc.latent)?.y;
            let cons = consensus_loss_with_grad(&target, &aux.y)?;
            comps.consensus = Some(finite("consensus", cons.value.as_f64())?);
            add(cons.grad, w.consensus);
        }
        if plan.prior {
            let prior = prior_loss_with_grad(&aux.y, ctx.prior)?;
            comps.prior = Some(finite("prior", prior.value.as_f64())?);
            add(prior.grad, w.prior);
        }
        let mut grad_x_hat = None;
        if plan.reconstruction {
            let rec = reconstruction_loss_with_grad(&aux.x_hat, x_u)?;
            comps.reconstruction = Some(finite("reconstruction", rec.value.as_f64())?);
            grad_x_hat = Some(rec.grad.map(|v| v * T::from_f64_lossy(w.reconstruction)));
        }
        let g_z = model.backward_aux(&aux, grad_y.as_ref(), grad_x_hat.as_ref())?;
        let g_z = trace.backward(&g_z);
        let skips = vec![None; enc.latent.skips.len()];
        model.backward_encoder(&enc, LatentGrad { z: g_z, skips });
    }
    Ok(comps)
}

/// One optimization step: gradients for the planned losses, then an Adam
/// update of the parameter groups those losses reach.
pub fn train_step<T: Real, R: Rng + ?Sized>(
    model: &mut RsNet<T>,
    optimizer: &mut Adam<T>,
    batch: &StepBatch<T>,
    plan: &StepPlan,
    ctx: &StepContext<'_>,
    lr: f64,
    rng: &mut R,
) -> Result<LossComponents> {
    let comps = accumulate_step_gradients(model, batch, plan, ctx, rng)?;
    for (_, p) in model.params() {
        if p.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training(format!("gradient of {} is not finite", p.name)));
        }
    }
    optimizer.step(model, lr, |g| plan.updates(g));
    Ok(comps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub supervised: f64,
    pub consensus: Option<f64>,
    pub prior: Option<f64>,
    pub reconstruction: Option<f64>,
    pub total: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
            .collect()
    }
}

/// Result of [`fit`]. The model passed to `fit` holds the final-epoch weights.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub best: RsNet<f32>,
    pub best_epoch: usize,
    pub best_loss: f64,
    pub history: TrainHistory,
}

fn mean_components(steps: &[LossComponents]) -> LossComponents {
    let n = steps.len() as f64;
    let avg = |f: &dyn Fn(&LossComponents) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = steps.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / n)
    };
    LossComponents {
        supervised: avg(&|c| Some(c.supervised)).unwrap_or(0.0),
        consensus: avg(&|c| c.consensus),
        prior: avg(&|c| c.prior),
        reconstruction: avg(&|c| c.reconstruction),
    }
}

/// Trains `model` on the labelled tiles of `split` (and, for cons/full, its
/// unlabelled tiles). Each epoch is one shuffled pass over the labelled
/// tiles; every step pairs a labelled batch with unlabelled tiles drawn with
/// replacement. Returns the lowest-loss weights alongside the history.
pub fn fit(model: &mut RsNet<f32>, split: &DatasetSplit, prior: &ClassPrior, config: &TrainConfig) -> Result<FitOutcome> {
    config.validate()?;
    let plan = config.variant.plan();
    if split.labelled.is_empty() {
        return Err(Error::config("labelled", "training needs labelled tiles"));
    }
    if plan.uses_unlabelled() {
        if split.unlabelled.is_empty() {
            return Err(Error::config(
                "unlabelled",
                format!("variant {} needs unlabelled tiles", config.variant),
            ));
        }
        if !model.has_aux() {
            return Err(Error::Capability(format!(
                "variant {} needs the auxiliary decoder",
                config.variant
            )));
        }
    }
    let class_weights = ClassWeights::inverse_frequency(&split.class_frequencies());
    let ctx = StepContext {
        class_weights: &class_weights,
        prior,
        loss_weights: &config.loss_weights,
        perturb: &config.perturb,
    };
    let stream = |s: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(s);
        rng
    };
    let mut order_rng = stream(1);
    let mut unlabelled_rng = stream(2);
    let mut perturb_rng = ChaCha8Rng::seed_from_u64(config.perturb.seed ^ config.seed.rotate_left(32));

    let mut optimizer = Adam::from_config(model, config);
    let mut scheduler = PlateauScheduler::new(
        config.lr_initial,
        config.lr_decay_factor,
        config.plateau_patience,
        config.plateau_min_delta,
    );
    let mut history = TrainHistory::default();
    let mut best = (model.clone(), 0usize, f64::INFINITY);
    let mut order: Vec<usize> = (0..split.labelled.len()).collect();

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let lr = scheduler.lr();
        order.shuffle(&mut order_rng);
        let mut steps = Vec::new();
        for chunk in order.chunks(config.batch_labelled) {
            let tiles: Vec<&LabelledTile> = chunk.iter().map(|&i| &split.labelled[i]).collect();
            let x_unlabelled = plan.uses_unlabelled().then(|| {
                let picks: Vec<_> = (0..config.batch_unlabelled)
                    .map(|_| &split.unlabelled[unlabelled_rng.random_range(0..split.unlabelled.len())].image)
                    .collect();
                images_to_tensor(&picks)
            });
            let batch = StepBatch {
                x_labelled: images_to_tensor(&tiles.iter().map(|t| &t.image).collect::<Vec<_>>()),
                y_labelled: masks_to_tensor(&tiles.iter().map(|t| &t.mask).collect::<Vec<_>>()),
                x_unlabelled,
            };
            steps.push(train_step(model, &mut optimizer, &batch, &plan, &ctx, lr, &mut perturb_rng)?);
        }
        let comps = mean_components(&steps);
        let total = finite("total", total_loss(&comps, &config.loss_weights)?)?;
        history.records.push(EpochRecord {
            epoch,
            supervised: comps.supervised,
            consensus: comps.consensus,
            prior: comps.prior,
            reconstruction: comps.reconstruction,
            total,
            lr,
            seconds: started.elapsed().as_secs_f64(),
        });
        if total < best.2 {
            best = (model.clone(), epoch, total);
        }
        scheduler.step(total);
    }
    Ok(FitOutcome {
        best: best.0,
        best_epoch: best.1,
        best_loss: best.2,
        history,
    })
}

/// Tiles per forward pass during evaluation.
pub const EVAL_BATCH: usize = 4;

/// Main-decoder predictions thresholded at 0.5, compared against the masks.
pub fn evaluate_checkpoint<T: Real>(model: &RsNet<T>, held_out: &[LabelledTile]) -> Result<ConfusionCounts> {
    if held_out.is_empty() {
        return Err(Error::input("evaluation needs at least one held-out tile"));
    }
    let mut counts = ConfusionCounts::new(crate::class::NUM_CLASSES);
    for chunk in held_out.chunks(EVAL_BATCH) {
        let x = images_to_tensor::<T>(&chunk.iter().map(|t| &t.image).collect::<Vec<_>>());
        let (y, _) = model.forward_main(&x)?;
        for (pred, tile) in binarize(&y, 0.5)?.iter().zip(chunk) {
            counts.accumulate(pred, &tile.mask)?;
        }
    }
    Ok(counts)
}
