//! Loss terms of the semi-supervised objective and their gradients.
//!
//! Every `*_with_grad` function returns the loss value together with its
//! gradient with respect to the prediction it penalises. Probability maps are
//! single-channel aggregate scores of shape `(N, 1, H, W)`.

use serde::{Deserialize, Serialize};

use crate::class::{Class, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Lower bound on per-class standard deviations in a [`ClassPrior`].
pub const SIGMA_FLOOR: f64 = 1e-3;

/// Weights of the consensus, class-prior and reconstruction terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub consensus: f64,
    pub prior: f64,
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            consensus: 1.0,
            prior: 1.0,
            reconstruction: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, w) in [
            ("w1", self.consensus),
            ("w2", self.prior),
            ("w3", self.reconstruction),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::config(field, format!("weight {w} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Per-class mean and standard deviation of label proportions over the
/// labelled training images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    mu: Vec<f64>,
    sigma: Vec<f64>,
}

impl ClassPrior {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() < 2 || mu.len() != sigma.len() {
            return Err(Error::config("prior", "need matching mu/sigma for >= 2 classes"));
        }
        if mu.iter().any(|m| !(0.0..=1.0).contains(m)) || (mu.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::config("prior.mu", "proportions must lie in [0, 1] and sum to 1"));
        }
        if let Some(s) = sigma.iter().find(|s| !(**s >= SIGMA_FLOOR) || !s.is_finite()) {
            return Err(Error::config(
                "prior.sigma",
                format!("standard deviation {s} is below the floor {SIGMA_FLOOR}"),
            ));
        }
        Ok(ClassPrior { mu, sigma })
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    pub fn num_classes(&self) -> usize {
        self.mu.len()
    }
}

/// Per-class weights for the supervised weighted MSE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights(pub Vec<f64>);

impl ClassWeights {
    pub fn uniform() -> Self {
        ClassWeights(vec![1.0; NUM_CLASSES])
    }

    /// Inverse class frequency, rescaled so the weights average to 1.
    /// Frequencies are floored at 1e-3 so an absent class stays finite.
    pub fn inverse_frequency(frequencies: &[f64]) -> Self {
        let inv: Vec<f64> = frequencies.iter().map(|f| 1.0 / f.max(1e-3)).collect();
        let mean = inv.iter().sum::<f64>() / inv.len() as f64;
        ClassWeights(inv.into_iter().map(|w| w / mean).collect())
    }

    pub fn get(&self, class: Class) -> f64 {
        self.0[class.index()]
    }
}

/// A loss value and the gradient with respect to the penalised tensor.
#[derive(Clone, Debug)]
pub struct LossEval<T> {
    pub value: T,
    pub grad: Tensor<T>,
}

fn check_same_shape<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::input(format!(
            "{what}: shape {:?} does not match {:?}",
            a.shape(),
            b.shape()
        )));
    }
    if a.is_empty() {
        return Err(Error::input(format!("{what}: empty tensor")));
    }
    Ok(())
}

fn count<T: Real>(t: &Tensor<T>) -> T {
    T::from_usize(t.len()).unwrap()
}

/// Class-weighted squared error, averaged over pixels; `reference` holds hard 0/1 labels.
pub fn supervised_loss_with_grad<T: Real>(
    pred: &Tensor<T>,
    reference: &Tensor<T>,
    weights: &ClassWeights,
) -> Result<LossEval<T>> {
    check_same_shape(pred, reference, "supervised loss")?;
    if pred.channels() != 1 {
        return Err(Error::input("supervised loss expects a single-channel map"));
    }
    if weights.0.len() != NUM_CLASSES || weights.0.iter().any(|w| !(*w > 0.0)) {
        return Err(Error::input("class weights must be positive, one per class"));
    }
    let w_agg = T::from_f64_lossy(weights.get(Class::Aggregate));
    let w_sus = T::from_f64_lossy(weights.get(Class::Suspension));
    let n = count(pred);
    let two = T::from_f64_lossy(2.0);
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = T::zero();
    for ((g, &p), &r) in grad.data_mut().iter_mut().zip(pred.data()).zip(reference.data()) {
        let w = if r == T::one() {
            w_agg
        } else if r == T::zero() {
            w_sus
        } else {
            return Err(Error::input("reference labels must be exactly 0 or 1"));
        };
        let d = p - r;
        total += w * d * d;
        *g = two * w * d / n;
    }
    Ok(LossEval {
        value: total / n,
        grad,
    })
}

pub fn supervised_loss<T: Real>(pred: &Tensor<T>, reference: &Tensor<T>, weights: &ClassWeights) -> Result<T> {
    Ok(supervised_loss_with_grad(pred, reference, weights)?.value)
}

/// Mean squared discrepancy between the two decoders. The main prediction is a
/// fixed target: the returned gradient is with respect to `pred_aux` only.
pub fn consensus_loss_with_grad<T: Real>(pred_main: &Tensor<T>, pred_aux: &Tensor<T>) -> Result<LossEval<T>> {
    check_same_shape(pred_main, pred_aux, "consensus loss")?;
    let n = count(pred_aux);
    let two = T::from_f64_lossy(2.0);
    let mut grad = Tensor::zeros(pred_aux.shape());
    let mut total = T::zero();
    for ((g, &m), &a) in grad.data_mut().iter_mut().zip(pred_main.data()).zip(pred_aux.data()) {
        let d = a - m;
        total += d * d;
        *g = two * d / n;
    }
    Ok(LossEval {
        value: total / n,
        grad,
    })
}

pub fn consensus_loss<T: Real>(pred_main: &Tensor<T>, pred_aux: &Tensor<T>) -> Result<T> {
    Ok(consensus_loss_with_grad(pred_main, pred_aux)?.value)
}

/// Soft per-image class proportions `[suspension, aggregate]` of a probability map.
pub fn soft_class_proportions<T: Real>(pred: &Tensor<T>) -> Vec<[T; NUM_CLASSES]> {
    (0..pred.batch())
        .map(|n| {
            let s = pred.sample(n);
            let agg = s.iter().copied().sum::<T>() / T::from_usize(s.len()).unwrap();
            let mut p = [T::zero(); NUM_CLASSES];
            p[Class::Aggregate.index()] = agg;
            p[Class::Suspension.index()] = T::one() - agg;
            p
        })
        .collect()
}

/// `(1/N_C) * sum_i ((p_i - mu_i) / (2 sigma_i))^2` for one image's proportions.
pub fn prior_loss_from_proportions(proportions: &[f64], prior: &ClassPrior) -> Result<f64> {
    if proportions.len() != prior.num_classes() {
        return Err(Error::input("proportion vector length differs from prior class count"));
    }
    let nc = prior.num_classes() as f64;
    Ok(proportions
        .iter()
        .zip(prior.mu().iter().zip(prior.sigma()))
        .map(|(p, (m, s))| ((p - m) / (2.0 * s)).powi(2))
        .sum::<f64>()
        / nc)
}

/// Class-distribution prior loss, evaluated per image and averaged over the batch.
pub fn prior_loss_with_grad<T: Real>(pred: &Tensor<T>, prior: &ClassPrior) -> Result<LossEval<T>> {
    if pred.is_empty() || pred.channels() != 1 {
        return Err(Error::input("prior loss expects a non-empty single-channel map"));
    }
    if prior.num_classes() != NUM_CLASSES {
        return Err(Error::input("prior loss supports the binary head only"));
    }
    let (a, s) = (Class::Aggregate.index(), Class::Suspension.index());
    let mu_a = T::from_f64_lossy(prior.mu()[a]);
    let mu_s = T::from_f64_lossy(prior.mu()[s]);
    let sg_a = T::from_f64_lossy(prior.sigma()[a]);
    let sg_s = T::from_f64_lossy(prior.sigma()[s]);
    let two = T::from_f64_lossy(2.0);
    let nc = T::from_usize(NUM_CLASSES).unwrap();
    let batch = T::from_usize(pred.batch()).unwrap();
    let pixels = T::from_usize(pred.sample_len()).unwrap();

    let mut grad = Tensor::zeros(pred.shape());
    let mut total = T::zero();
    for (n, p) in soft_class_proportions(pred).into_iter().enumerate() {
        let ta = (p[a] - mu_a) / (two * sg_a);
        let ts = (p[s] - mu_s) / (two * sg_s);
        total += (ta * ta + ts * ts) / nc;
        // d p_aggregate / d pixel = 1 / pixels, d p_suspension / d pixel = -1 / pixels.
        let d_agg = (two * ta / (two * sg_a) - two * ts / (two * sg_s)) / (nc * batch * pixels);
        grad.sample_mut(n).iter_mut().for_each(|g| *g = d_agg);
    }
    Ok(LossEval {
        value: total / batch,
        grad,
    })
}

pub fn prior_loss<T: Real>(pred: &Tensor<T>, prior: &ClassPrior) -> Result<T> {
    Ok(prior_loss_with_grad(pred, prior)?.value)
}

/// Mean squared reconstruction error over all pixels and channels.
pub fn reconstruction_loss_with_grad<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<LossEval<T>> {
    check_same_shape(x_hat, x, "reconstruction loss")?;
    let n = count(x);
    let two = T::from_f64_lossy(2.0);
    let mut grad = Tensor::zeros(x.shape());
    let mut total = T::zero();
    for ((g, &r), &t) in grad.data_mut().iter_mut().zip(x_hat.data()).zip(x.data()) {
        let d = r - t;
        total += d * d;
        *g = two * d / n;
    }
    Ok(LossEval {
        value: total / n,
        grad,
    })
}

pub fn reconstruction_loss<T: Real>(x_hat: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
    Ok(reconstruction_loss_with_grad(x_hat, x)?.value)
}

/// Individual loss terms of one step; unsupervised terms are absent when the
/// variant does not use them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub supervised: f64,
    pub consensus: Option<f64>,
    pub prior: Option<f64>,
    pub reconstruction: Option<f64>,
}

/// `L_sup + w1 L_cons + w2 L_prior + w3 L_ae`; absent terms contribute nothing.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let terms = [
        ("supervised", Some(c.supervised), 1.0),
        ("consensus", c.consensus, w.consensus),
        ("prior", c.prior, w.prior),
        ("reconstruction", c.reconstruction, w.reconstruction),
    ];
    let mut total = 0.0;
    for (name, value, weight) in terms {
        if let Some(v) = value {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::input(format!("{name} loss {v} must be finite and >= 0")));
            }
            total += weight * v;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_vec([1, 1, 1, vals.len()], vals.to_vec()).unwrap()
    }

    #[test]
    fn supervised_examples() {
        let r = map(&[0.0, 1.0]);
        assert_eq!(supervised_loss(&r, &r, &ClassWeights::uniform()).unwrap(), 0.0);
        let p = map(&[0.5, 0.5]);
        assert!((supervised_loss(&p, &r, &ClassWeights::uniform()).unwrap() - 0.25).abs() < 1e-15);
        // Weight 2 on the first class of the reference pair (0, 1).
        let w = ClassWeights(vec![2.0, 1.0]);
        assert!((supervised_loss(&p, &r, &w).unwrap() - 0.375).abs() < 1e-15);
    }

    #[test]
    fn supervised_rejects_soft_reference_and_shape_mismatch() {
        let p = map(&[0.5, 0.5]);
        assert!(supervised_loss(&p, &map(&[0.5, 1.0]), &ClassWeights::uniform()).is_err());
        assert!(supervised_loss(&p, &map(&[0.0, 1.0, 1.0]), &ClassWeights::uniform()).is_err());
    }

    #[test]
    fn consensus_examples() {
        let a = map(&[0.2, 0.4, 0.6, 0.8]);
        assert_eq!(consensus_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(consensus_loss(&map(&[1.0; 4]), &map(&[0.0; 4])).unwrap(), 1.0);
        let b = map(&[0.7, 0.4, 0.6, 0.8]);
        assert!((consensus_loss(&a, &b).unwrap() - 0.0625).abs() < 1e-15);
        assert_eq!(consensus_loss(&a, &b).unwrap(), consensus_loss(&b, &a).unwrap());
    }

    #[test]
    fn proportions_examples() {
        let agg = Class::Aggregate.index();
        let sus = Class::Suspension.index();
        let p = soft_class_proportions(&map(&[1.0; 4]))[0];
        assert_eq!((p[agg], p[sus]), (1.0, 0.0));
        let p = soft_class_proportions(&map(&[0.5; 4]))[0];
        assert_eq!((p[agg], p[sus]), (0.5, 0.5));
        let p = soft_class_proportions(&map(&[0.0, 1.0, 0.0, 1.0]))[0];
        assert_eq!((p[agg], p[sus]), (0.5, 0.5));
    }

    fn prior(agg_mu: f64, agg_sigma: f64, sus_sigma: f64) -> ClassPrior {
        let mut mu = vec![0.0; 2];
        mu[Class::Aggregate.index()] = agg_mu;
        mu[Class::Suspension.index()] = 1.0 - agg_mu;
        let mut sigma = vec![0.0; 2];
        sigma[Class::Aggregate.index()] = agg_sigma;
        sigma[Class::Suspension.index()] = sus_sigma;
        ClassPrior::new(mu, sigma).unwrap()
    }

    #[test]
    fn prior_examples() {
        let pr = prior(0.362, 0.1, 0.1);
        assert!(prior_loss(&map(&[0.362; 5]), &pr).unwrap().abs() < 1e-12);
        // Independent scalar evaluation of ((0.138/0.2)^2 + (0.138/0.2)^2) / 2.
        let expected = ((0.5f64 - 0.362) / 0.2).powi(2);
        assert!((expected - 0.4761).abs() < 1e-12);
        assert!((prior_loss(&map(&[0.5; 4]), &pr).unwrap() - expected).abs() < 1e-12);
        let pr = prior(0.5, 0.25, 0.25);
        assert!((prior_loss(&map(&[1.0; 4]), &pr).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn prior_loss_averages_over_batch() {
        let pr = prior(0.5, 0.25, 0.25);
        let batch = Tensor::from_vec([2, 1, 1, 2], vec![1.0f64, 1.0, 0.5, 0.5]).unwrap();
        assert!((prior_loss(&batch, &pr).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn prior_construction_enforces_floor() {
        assert!(ClassPrior::new(vec![0.4, 0.6], vec![1e-4, 0.1]).is_err());
        assert!(ClassPrior::new(vec![0.4, 0.5], vec![0.1, 0.1]).is_err());
    }

    #[test]
    fn reconstruction_examples() {
        let x = map(&[0.5; 6]);
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        assert_eq!(reconstruction_loss(&map(&[1.0; 6]), &map(&[0.0; 6])).unwrap(), 1.0);
        assert!((reconstruction_loss(&map(&[0.25; 6]), &x).unwrap() - 0.0625).abs() < 1e-15);
    }

    #[test]
    fn total_examples() {
        let w = LossWeights::default();
        assert_eq!(total_loss(&LossComponents::default(), &w).unwrap(), 0.0);
        let c = LossComponents {
            supervised: 0.1,
            consensus: Some(0.2),
            prior: Some(0.3),
            reconstruction: Some(0.4),
        };
        assert!((total_loss(&c, &w).unwrap() - 1.0).abs() < 1e-12);
        let w = LossWeights {
            consensus: 0.5,
            prior: 2.0,
            reconstruction: 0.0,
        };
        assert!((total_loss(&c, &w).unwrap() - 0.8).abs() < 1e-12);
        let neg = LossComponents {
            supervised: -0.1,
            ..c
        };
        assert!(matches!(total_loss(&neg, &w), Err(Error::Input(_))));
    }

    #[test]
    fn inverse_frequency_weights_average_to_one() {
        let w = ClassWeights::inverse_frequency(&[0.75, 0.25]);
        assert!((w.0.iter().sum::<f64>() / 2.0 - 1.0).abs() < 1e-12);
        assert!((w.0[1] / w.0[0] - 3.0).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn prior_loss_ignores_pixel_order(mut vals in prop::collection::vec(0.0f64..1.0, 16), seed in 0u64..100) {
                let pr = prior(0.3, 0.1, 0.2);
                let a = prior_loss(&map(&vals), &pr).unwrap();
                let len = vals.len();
                vals.rotate_left((seed as usize) % len);
                vals.reverse();
                let b = prior_loss(&map(&vals), &pr).unwrap();
                prop_assert!((a - b).abs() < 1e-12);
            }

            #[test]
            fn losses_are_nonnegative(a in prop::collection::vec(0.0f64..1.0, 8), b in prop::collection::vec(0.0f64..1.0, 8)) {
                prop_assert!(consensus_loss(&map(&a), &map(&b)).unwrap() >= 0.0);
                prop_assert!(reconstruction_loss(&map(&a), &map(&b)).unwrap() >= 0.0);
                prop_assert!(prior_loss(&map(&a), &prior(0.4, 0.1, 0.1)).unwrap() >= 0.0);
            }
        }
    }
}
