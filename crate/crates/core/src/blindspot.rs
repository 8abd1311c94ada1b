//! Probability that two independent classifiers agree on the same wrong
//! label ("blind spot" of consensus training), in closed form and by
//! Monte Carlo simulation.
//!
//! Model assumptions: the error rate `P(s-)` does not depend on the true
//! class, a wrong prediction picks one of the `N_C - 1` other classes
//! uniformly, and the two classifiers err independently. Under these the
//! blind-spot probability for true class `i` is
//! `P(s-)^2 / (N_C - 1) * P(C_i)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BlindSpotModel {
    priors: Vec<f64>,
    error_rate: f64,
}

impl BlindSpotModel {
    pub fn new(priors: Vec<f64>, error_rate: f64) -> Result<Self> {
        if priors.len() < 2 {
            return Err(Error::config("class_priors", "need at least two classes"));
        }
        if priors.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::config("class_priors", "priors must be finite and nonnegative"));
        }
        let sum: f64 = priors.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("class_priors", format!("priors sum to {sum}, not 1")));
        }
        if !(0.0..=1.0).contains(&error_rate) {
            return Err(Error::config("error_rate", format!("{error_rate} is outside [0, 1]")));
        }
        Ok(BlindSpotModel { priors, error_rate })
    }

    pub fn num_classes(&self) -> usize {
        self.priors.len()
    }

    pub fn priors(&self) -> &[f64] {
        &self.priors
    }

    pub fn error_rate(&self) -> f64 {
        self.error_rate
    }

    /// Closed-form blind-spot probability for true class `class`.
    pub fn blind_spot_probability(&self, class: usize) -> f64 {
        blind_spot_closed_form(self.priors[class], self.error_rate, self.num_classes())
    }

    /// Joint probability that a single classifier predicts `predicted` for a
    /// pixel of class `actual` while being wrong: `P(s-) P(C_i) / (N_C - 1)`.
    pub fn joint_wrong_prediction(&self, predicted: usize, actual: usize) -> f64 {
        if predicted == actual {
            return 0.0;
        }
        self.error_rate * self.priors[actual] / (self.num_classes() - 1) as f64
    }

    /// Probability that the second classifier makes one specific wrong
    /// prediction, independent of the first: `P(s-) / (N_C - 1)`.
    pub fn conditional_agreement(&self) -> f64 {
        self.error_rate / (self.num_classes() - 1) as f64
    }

    /// Recomputes the blind-spot probability by summing the per-wrong-class
    /// joint terms, each multiplied by the conditional agreement probability.
    pub fn chained_probability(&self, class: usize) -> f64 {
        (0..self.num_classes())
            .filter(|&k| k != class)
            .map(|k| self.joint_wrong_prediction(k, class) * self.conditional_agreement())
            .sum()
    }
}

/// `error_rate^2 / (num_classes - 1) * prior`. Linear in `prior`, which need
/// not come from a normalised distribution.
pub fn blind_spot_closed_form(prior: f64, error_rate: f64, num_classes: usize) -> f64 {
    error_rate * error_rate / (num_classes - 1) as f64 * prior
}

/// Blind-spot counts per true class from a simulation run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SimulationResult {
    pub trials: u64,
    pub blind_counts: Vec<u64>,
}

impl SimulationResult {
    /// Empirical joint frequency of (blind spot, true class `class`).
    pub fn frequency(&self, class: usize) -> f64 {
        self.blind_counts[class] as f64 / self.trials as f64
    }

    /// Binomial standard error of [`SimulationResult::frequency`].
    pub fn std_error(&self, class: usize) -> f64 {
        let p = self.frequency(class);
        (p * (1.0 - p) / self.trials as f64).sqrt()
    }

    /// Adds another run's counts (runs are independent).
    pub fn merge(&mut self, other: &SimulationResult) {
        self.trials += other.trials;
        for (a, b) in self.blind_counts.iter_mut().zip(&other.blind_counts) {
            *a += b;
        }
    }
}

fn sample_class<R: Rng + ?Sized>(cdf: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn predict<R: Rng + ?Sized>(truth: usize, n: usize, error_rate: f64, rng: &mut R) -> usize {
    if rng.random::<f64>() < error_rate {
        let j = rng.random_range(0..n - 1);
        if j >= truth {
            j + 1
        } else {
            j
        }
    } else {
        truth
    }
}

/// Brute-force simulation of two independent classifiers.
pub fn simulate_blind_spot<R: Rng + ?Sized>(
    model: &BlindSpotModel,
    trials: u64,
    rng: &mut R,
) -> Result<SimulationResult> {
    if trials == 0 {
        return Err(Error::input("trials must be >= 1"));
    }
    let n = model.num_classes();
    let mut cdf = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &p in &model.priors {
        acc += p;
        cdf.push(acc);
    }
    // Guard against round-off in the last bucket, but never let a
    // zero-probability trailing class absorb draws.
    if let Some(last) = model.priors.iter().rposition(|&p| p > 0.0) {
        cdf[last] = f64::INFINITY;
    }
    let mut blind_counts = vec![0u64; n];
    for _ in 0..trials {
        let truth = sample_class(&cdf, rng);
        let a = predict(truth, n, model.error_rate, rng);
        let b = predict(truth, n, model.error_rate, rng);
        if a != truth && a == b {
            blind_counts[truth] += 1;
        }
    }
    Ok(SimulationResult {
        trials,
        blind_counts,
    })
}

/// Splits `trials` over `shards` independent ChaCha streams derived from
/// `seed` and merges the counts. Output depends only on `(seed, shards)`.
pub fn simulate_sharded(
    model: &BlindSpotModel,
    trials: u64,
    seed: u64,
    shards: u64,
) -> Result<SimulationResult> {
    if trials == 0 || shards == 0 {
        return Err(Error::input("trials and shards must be >= 1"));
    }
    let shards = shards.min(trials);
    let parts: Vec<SimulationResult> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let share = trials / shards + u64::from(s < trials % shards);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            simulate_blind_spot(model, share, &mut rng)
        })
        .collect::<Result<_>>()?;
    let mut total = SimulationResult {
        trials: 0,
        blind_counts: vec![0; model.num_classes()],
    };
    for p in &parts {
        total.merge(p);
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq)]
pub struct BiasRow {
    pub class: usize,
    pub prior: f64,
    pub analytic: f64,
    pub empirical: Option<f64>,
    pub std_error: Option<f64>,
    /// Blind-spot probability relative to the rarest class with nonzero
    /// prior; `None` when undefined.
    pub ratio: Option<f64>,
}

/// Per-class blind-spot probabilities, sorted by prior (descending).
pub fn bias_report(model: &BlindSpotModel, simulation: Option<&SimulationResult>) -> Vec<BiasRow> {
    let reference = (0..model.num_classes())
        .filter(|&i| model.priors[i] > 0.0)
        .min_by(|&a, &b| model.priors[a].total_cmp(&model.priors[b]));
    let reference_p = reference.map(|i| model.blind_spot_probability(i)).unwrap_or(0.0);
    let mut rows: Vec<BiasRow> = (0..model.num_classes())
        .map(|i| {
            let analytic = model.blind_spot_probability(i);
            let ratio = (model.priors[i] > 0.0 && reference_p > 0.0).then(|| analytic / reference_p);
            BiasRow {
                class: i,
                prior: model.priors[i],
                analytic,
                empirical: simulation.map(|s| s.frequency(i)),
                std_error: simulation.map(|s| s.std_error(i)),
                ratio,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.prior.total_cmp(&a.prior).then(a.class.cmp(&b.class)));
    rows
}

/// Marker written for undefined values in reports.
pub const UNDEFINED: &str = "NA";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| UNDEFINED.to_string(), |v| format!("{v:.10}"))
}

pub fn bias_report_csv(rows: &[BiasRow]) -> String {
    let mut out = String::from("class,prior,analytic_p,empirical_p,std_error,ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.10},{:.10},{},{},{}\n",
            r.class,
            r.prior,
            r.analytic,
            fmt_opt(r.empirical),
            fmt_opt(r.std_error),
            fmt_opt(r.ratio)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_error_rate_never_blinds() {
        let m = BlindSpotModel::new(vec![0.3, 0.7], 0.0).unwrap();
        assert_eq!(m.blind_spot_probability(0), 0.0);
        let sim = simulate_blind_spot(&m, 10_000, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(sim.frequency(0), 0.0);
        assert_eq!(sim.frequency(1), 0.0);
    }

    #[test]
    fn closed_form_examples() {
        let m = BlindSpotModel::new(vec![0.362, 0.638], 0.2).unwrap();
        assert!((m.blind_spot_probability(1) - 0.02552).abs() < 1e-12);
        let m = BlindSpotModel::new(vec![1.0 / 3.0; 3], 0.3).unwrap();
        assert!((m.blind_spot_probability(2) - 0.015).abs() < 1e-12);
    }

    #[test]
    fn chained_terms_reproduce_closed_form() {
        for (priors, e) in [
            (vec![0.362, 0.638], 0.2),
            (vec![0.1, 0.2, 0.3, 0.4], 0.45),
            (vec![0.5, 0.0, 0.5], 0.1),
        ] {
            let m = BlindSpotModel::new(priors, e).unwrap();
            for i in 0..m.num_classes() {
                assert!((m.chained_probability(i) - m.blind_spot_probability(i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn linear_in_prior_and_monotone() {
        let p = blind_spot_closed_form(0.2, 0.3, 3);
        assert!((blind_spot_closed_form(0.4, 0.3, 3) - 2.0 * p).abs() < 1e-15);
        assert!(blind_spot_closed_form(0.2, 0.31, 3) > p);
        assert!(blind_spot_closed_form(0.2, 0.3, 4) < p);
    }

    #[test]
    fn invalid_models_rejected() {
        assert!(BlindSpotModel::new(vec![1.0], 0.1).is_err());
        assert!(BlindSpotModel::new(vec![0.5, 0.6], 0.1).is_err());
        assert!(BlindSpotModel::new(vec![0.5, 0.5], 1.5).is_err());
        assert!(BlindSpotModel::new(vec![-0.5, 1.5], 0.5).is_err());
    }

    #[test]
    fn seeded_simulation_is_reproducible() {
        let m = BlindSpotModel::new(vec![0.25, 0.25, 0.5], 0.4).unwrap();
        let a = simulate_sharded(&m, 50_000, 9, 4).unwrap();
        let b = simulate_sharded(&m, 50_000, 9, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials, 50_000);
    }

    #[test]
    fn report_ratios() {
        let m = BlindSpotModel::new(vec![0.25; 4], 0.3).unwrap();
        assert!(bias_report(&m, None).iter().all(|r| r.ratio == Some(1.0)));

        let m = BlindSpotModel::new(vec![0.362, 0.638], 0.2).unwrap();
        let rows = bias_report(&m, None);
        assert_eq!(rows[0].class, 1);
        assert!((rows[0].ratio.unwrap() - 0.638 / 0.362).abs() < 1e-12);
        assert!((rows[0].ratio.unwrap() - 1.7624).abs() < 1e-4);

        let m = BlindSpotModel::new(vec![1.0, 0.0], 0.2).unwrap();
        let rows = bias_report(&m, None);
        assert_eq!(rows[1].class, 1);
        assert_eq!(rows[1].ratio, None);
        assert!(bias_report_csv(&rows).lines().nth(2).unwrap().ends_with(",NA"));
    }

    #[test]
    fn zero_prior_class_never_sampled() {
        let m = BlindSpotModel::new(vec![0.6, 0.4, 0.0], 0.5).unwrap();
        let sim = simulate_blind_spot(&m, 20_000, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(sim.blind_counts[2], 0);
    }
}
