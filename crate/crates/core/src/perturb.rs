//! Latent perturbation fed to the auxiliary decoder: multiplicative uniform
//! noise followed by dropping the strongest activations of each channel.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbConfig {
    /// Range of the multiplicative noise `N`; must be symmetric about zero.
    pub noise_range: (f64, f64),
    /// Range the drop threshold `gamma` is drawn from; inside `(0, 1]`.
    pub drop_threshold_range: (f64, f64),
    pub seed: u64,
}

impl Default for PerturbConfig {
    fn default() -> Self {
        PerturbConfig {
            noise_range: (-0.3, 0.3),
            drop_threshold_range: (0.6, 0.9),
            seed: 0,
        }
    }
}

impl PerturbConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.noise_range;
        if !(lo.is_finite() && hi.is_finite()) || lo > hi || (lo + hi).abs() > 1e-12 {
            return Err(Error::config(
                "noise_range",
                format!("({lo}, {hi}) must be a finite interval symmetric about 0"),
            ));
        }
        let (lo, hi) = self.drop_threshold_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "drop_threshold_range",
                format!("({lo}, {hi}) must satisfy 0 < low <= high <= 1"),
            ));
        }
        Ok(())
    }
}

/// Draws from the open interval `(lo, hi)`; a degenerate interval yields `lo`.
fn uniform_open<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        return lo;
    }
    loop {
        let v = rng.random_range(lo..hi);
        if v > lo {
            return v;
        }
    }
}

/// `z * N + z` with `N` drawn i.i.d. per element from `range`.
pub fn noise_perturb<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    range: (f64, f64),
    rng: &mut R,
) -> Tensor<T> {
    noise_with_factors(z, range, rng).0
}

fn noise_with_factors<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    range: (f64, f64),
    rng: &mut R,
) -> (Tensor<T>, Vec<T>) {
    let factors: Vec<T> = (0..z.len())
        .map(|_| T::from_f64_lossy(1.0 + uniform_open(rng, range.0, range.1)))
        .collect();
    let mut out = z.clone();
    for (v, &f) in out.data_mut().iter_mut().zip(&factors) {
        *v *= f;
    }
    (out, factors)
}

/// Zeroes every element whose channel-normalised value `z / max|z|` exceeds
/// `gamma`. Channels that are identically zero pass through.
pub fn drop_with_threshold<T: Real>(z: &Tensor<T>, gamma: f64) -> Tensor<T> {
    let gammas = vec![gamma; z.batch()];
    drop_mask(z, &gammas).0
}

/// [`drop_with_threshold`] with one `gamma ~ U(range)` drawn per sample.
pub fn drop_perturb<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    range: (f64, f64),
    rng: &mut R,
) -> Tensor<T> {
    let gammas: Vec<f64> = (0..z.batch()).map(|_| uniform_open(rng, range.0, range.1)).collect();
    drop_mask(z, &gammas).0
}

fn drop_mask<T: Real>(z: &Tensor<T>, gammas: &[f64]) -> (Tensor<T>, Vec<bool>) {
    let plane = z.plane_len();
    let channels = z.channels();
    let mut out = z.clone();
    let mut keep = vec![true; z.len()];
    for (p, (vals, kept)) in out
        .data_mut()
        .chunks_mut(plane)
        .zip(keep.chunks_mut(plane))
        .enumerate()
    {
        let gamma = T::from_f64_lossy(gammas[p / channels]);
        let max = vals.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        if max == T::zero() {
            continue;
        }
        for (v, k) in vals.iter_mut().zip(kept.iter_mut()) {
            if *v / max > gamma {
                *v = T::zero();
                *k = false;
            }
        }
    }
    (out, keep)
}

/// Record of one perturbation, enough to backpropagate through it. The drop
/// mask is treated as piecewise constant.
#[derive(Clone, Debug)]
pub struct PerturbTrace<T> {
    factors: Vec<T>,
    keep: Vec<bool>,
}

impl<T: Real> PerturbTrace<T> {
    pub fn backward(&self, grad: &Tensor<T>) -> Tensor<T> {
        let mut g = grad.clone();
        for ((v, &f), &k) in g.data_mut().iter_mut().zip(&self.factors).zip(&self.keep) {
            *v = if k { *v * f } else { T::zero() };
        }
        g
    }

    /// Fraction of latent elements zeroed by the drop step.
    pub fn dropped_fraction(&self) -> f64 {
        self.keep.iter().filter(|k| !**k).count() as f64 / self.keep.len().max(1) as f64
    }
}

/// `F_drop(F_noise(z))`, with fresh draws on every call.
pub fn perturb_latent<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<Tensor<T>> {
    Ok(perturb_latent_traced(z, config, rng)?.0)
}

pub fn perturb_latent_traced<T: Real, R: Rng + ?Sized>(
    z: &Tensor<T>,
    config: &PerturbConfig,
    rng: &mut R,
) -> Result<(Tensor<T>, PerturbTrace<T>)> {
    config.validate()?;
    if !z.is_finite() {
        return Err(Error::input("latent contains non-finite values"));
    }
    let (noisy, factors) = noise_with_factors(z, config.noise_range, rng);
    let (lo, hi) = config.drop_threshold_range;
    let gammas: Vec<f64> = (0..z.batch()).map(|_| uniform_open(rng, lo, hi)).collect();
    let (out, keep) = drop_mask(&noisy, &gammas);
    Ok((out, PerturbTrace { factors, keep }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_noise_is_identity_and_zero_is_absorbing() {
        let z = Tensor::<f64>::from_fn([2, 3, 4, 4], |i| (i as f64).sin());
        assert_eq!(noise_perturb(&z, (0.0, 0.0), &mut rng(1)), z);
        let zeros = Tensor::<f64>::zeros([1, 2, 3, 3]);
        assert_eq!(noise_perturb(&zeros, (-0.3, 0.3), &mut rng(1)), zeros);
    }

    #[test]
    fn drop_example_channel() {
        let z = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![0.1, 0.5, 1.0]).unwrap();
        assert_eq!(drop_with_threshold(&z, 0.7).data(), &[0.1, 0.5, 0.0]);
    }

    #[test]
    fn zero_channel_passes_through() {
        let mut z = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64);
        for i in 0..4 {
            z.data_mut()[i] = 0.0;
        }
        let out = drop_perturb(&z, (0.6, 0.9), &mut rng(2));
        assert_eq!(out.plane(0, 0), z.plane(0, 0));
        // The other channel loses its maximum.
        assert_eq!(out.get(0, 1, 1, 1), 0.0);
    }

    #[test]
    fn near_identity_config() {
        let z = Tensor::<f64>::from_fn([2, 4, 3, 3], |i| ((i * 7) % 11) as f64 / 10.0);
        let config = PerturbConfig {
            noise_range: (0.0, 0.0),
            drop_threshold_range: (1.0 - 1e-9, 1.0),
            seed: 0,
        };
        let out = perturb_latent(&z, &config, &mut rng(3)).unwrap();
        // Max normalization zeroes each channel's maximum for any gamma < 1;
        // every other element passes through.
        for n in 0..2 {
            for c in 0..4 {
                let max = z.plane(n, c).iter().cloned().fold(f64::MIN, f64::max);
                for (o, v) in out.plane(n, c).iter().zip(z.plane(n, c)) {
                    assert_eq!(*o, if *v == max { 0.0 } else { *v });
                }
            }
        }
    }

    #[test]
    fn composition_order_is_drop_after_noise() {
        // Two nearly tied maxima: noise decides which survives, so dropping
        // first (which would zero both) gives a different zero set.
        let z = Tensor::<f64>::from_vec([1, 1, 1, 3], vec![1.0, 0.99, 0.1]).unwrap();
        let config = PerturbConfig {
            noise_range: (-0.3, 0.3),
            drop_threshold_range: (0.95, 0.95),
            seed: 0,
        };
        let drop_first = noise_perturb(&drop_with_threshold(&z, 0.95), (-0.3, 0.3), &mut rng(4));
        let zeros_drop_first: Vec<bool> = drop_first.data().iter().map(|v| *v == 0.0).collect();
        assert_eq!(zeros_drop_first, vec![true, true, false]);
        let mut differs = false;
        for seed in 0..20 {
            let out = perturb_latent(&z, &config, &mut rng(seed)).unwrap();
            let zeros: Vec<bool> = out.data().iter().map(|v| *v == 0.0).collect();
            differs |= zeros != zeros_drop_first;
        }
        assert!(differs);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let mut c = PerturbConfig {
            noise_range: (-0.2, 0.3),
            ..Default::default()
        };
        assert!(c.validate().is_err());
        c.noise_range = (-0.3, 0.3);
        c.drop_threshold_range = (0.0, 0.5);
        assert!(c.validate().is_err());
        c.drop_threshold_range = (0.6, 1.2);
        assert!(c.validate().is_err());
    }

    #[test]
    fn trace_backward_masks_and_scales() {
        let z = Tensor::<f64>::from_fn([1, 2, 2, 2], |i| i as f64 + 1.0);
        let (out, trace) = perturb_latent_traced(&z, &PerturbConfig::default(), &mut rng(9)).unwrap();
        let g = Tensor::filled(z.shape(), 1.0);
        let back = trace.backward(&g);
        for i in 0..z.len() {
            if out.data()[i] == 0.0 {
                assert_eq!(back.data()[i], 0.0);
            } else {
                assert!((back.data()[i] - out.data()[i] / z.data()[i]).abs() < 1e-12);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn noise_is_elementwise_bounded(vals in prop::collection::vec(-5.0f64..5.0, 12), seed in 0u64..1000) {
                let z = Tensor::from_vec([1, 3, 2, 2], vals).unwrap();
                let out = noise_perturb(&z, (-0.3, 0.3), &mut rng(seed));
                for (o, v) in out.data().iter().zip(z.data()) {
                    prop_assert!(o.abs() <= 1.3 * v.abs() + 1e-12);
                }
            }

            #[test]
            fn noise_is_local(vals in prop::collection::vec(-5.0f64..5.0, 8), idx in 0usize..8, seed in 0u64..1000) {
                let z = Tensor::from_vec([1, 2, 2, 2], vals).unwrap();
                let mut z2 = z.clone();
                z2.data_mut()[idx] += 1.0;
                let a = noise_perturb(&z, (-0.3, 0.3), &mut rng(seed));
                let b = noise_perturb(&z2, (-0.3, 0.3), &mut rng(seed));
                for i in 0..8 {
                    if i != idx {
                        prop_assert_eq!(a.data()[i], b.data()[i]);
                    }
                }
            }

            #[test]
            fn drop_is_masked_copy(vals in prop::collection::vec(0.0f64..3.0, 18), seed in 0u64..1000) {
                let z = Tensor::from_vec([2, 1, 3, 3], vals).unwrap();
                let out = drop_perturb(&z, (0.6, 0.9), &mut rng(seed));
                for (o, v) in out.data().iter().zip(z.data()) {
                    prop_assert!(*o == *v || *o == 0.0);
                }
                // Each nonzero channel loses its maximum.
                for n in 0..2 {
                    let plane = z.plane(n, 0);
                    let max = plane.iter().cloned().fold(0.0, f64::max);
                    if max > 0.0 {
                        for (o, v) in out.plane(n, 0).iter().zip(plane) {
                            if *v == max { prop_assert_eq!(*o, 0.0); }
                        }
                    }
                }
            }

            #[test]
            fn seeded_perturbation_is_reproducible(vals in prop::collection::vec(0.0f64..3.0, 8), seed in 0u64..1000) {
                let z = Tensor::from_vec([1, 2, 2, 2], vals).unwrap();
                let c = PerturbConfig::default();
                let a = perturb_latent(&z, &c, &mut rng(seed)).unwrap();
                let b = perturb_latent(&z, &c, &mut rng(seed)).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}
