//! Small fixed-parameter models for the test suites.
//!
//! These implement [`Upm`](crate::filter::Upm) with textbook conjugate
//! updates and *no* learned parameters, so filter-level behavior can be
//! checked against closed-form math without any training machinery in the
//! way. They are not part of the modeling API proper.

use crate::autodiff::Value;
use crate::filter::Upm;
use crate::tensor::Tensor;
use crate::Result;

const LN_2PI: f64 = 1.8378770664093453;

/// Scalar Gaussian with unknown mean and known noise variance, under a
/// Gaussian mean prior: `y ~ N(mu, noise_var)`, `mu ~ N(prior_mean,
/// prior_var)`. Ignores inputs entirely.
#[derive(Debug, Clone)]
pub struct ConjGaussianUpm {
    pub prior_mean: f64,
    pub prior_var: f64,
    pub noise_var: f64,
}

/// Posterior over the unknown mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussPosterior {
    pub mean: f64,
    pub var: f64,
}

impl ConjGaussianUpm {
    /// Log predictive density of one observation, in closed form.
    pub fn log_predictive(&self, post: &GaussPosterior, y: f64) -> f64 {
        let var = post.var + self.noise_var;
        -0.5 * (LN_2PI + var.ln() + (y - post.mean).powi(2) / var)
    }

    /// Batch posterior after observing `ys`, via precision arithmetic.
    pub fn batch_posterior(&self, ys: &[f64]) -> GaussPosterior {
        let prec = 1.0 / self.prior_var + ys.len() as f64 / self.noise_var;
        let var = 1.0 / prec;
        let mean = var * (self.prior_mean / self.prior_var + ys.iter().sum::<f64>() / self.noise_var);
        GaussPosterior { mean, var }
    }

    /// Log marginal likelihood of a segment: the chained one-step
    /// predictives.
    pub fn segment_log_marginal(&self, ys: &[f64]) -> f64 {
        let mut post = GaussPosterior { mean: self.prior_mean, var: self.prior_var };
        let mut total = 0.0;
        for &y in ys {
            total += self.log_predictive(&post, y);
            post = self.fold(&post, y);
        }
        total
    }

    fn fold(&self, post: &GaussPosterior, y: f64) -> GaussPosterior {
        let prec = 1.0 / post.var + 1.0 / self.noise_var;
        let var = 1.0 / prec;
        let mean = var * (post.mean / post.var + y / self.noise_var);
        GaussPosterior { mean, var }
    }
}

impl Upm for ConjGaussianUpm {
    type Label = f64;
    type Encoded = ();
    type Posterior = GaussPosterior;
    type Predictive = GaussPosterior;

    fn encode(&self, _x: &Tensor) {}

    fn prior_statistics(&self) -> GaussPosterior {
        GaussPosterior { mean: self.prior_mean, var: self.prior_var }
    }

    fn recursive_update(&self, post: &GaussPosterior, _x: &(), y: &f64) -> GaussPosterior {
        self.fold(post, *y)
    }

    fn log_predictive_y(&self, post: &GaussPosterior, _x: &(), y: &f64) -> Result<Value> {
        Ok(Value::scalar(self.log_predictive(post, *y)))
    }

    fn predictive(&self, post: &GaussPosterior, _x: &()) -> GaussPosterior {
        GaussPosterior { mean: post.mean, var: post.var + self.noise_var }
    }
}

/// Categorical labels under a Dirichlet prior. Ignores inputs entirely.
#[derive(Debug, Clone)]
pub struct CatDirichletUpm {
    pub alpha0: Vec<f64>,
}

impl CatDirichletUpm {
    /// Log predictive mass of class `y` under concentration `alpha`.
    pub fn log_predictive(&self, alpha: &[f64], y: usize) -> f64 {
        (alpha[y] / alpha.iter().sum::<f64>()).ln()
    }

    /// Log marginal likelihood of a label segment.
    pub fn segment_log_marginal(&self, ys: &[usize]) -> f64 {
        let mut alpha = self.alpha0.clone();
        let mut total = 0.0;
        for &y in ys {
            total += self.log_predictive(&alpha, y);
            alpha[y] += 1.0;
        }
        total
    }
}

impl Upm for CatDirichletUpm {
    type Label = usize;
    type Encoded = ();
    type Posterior = Vec<f64>;
    type Predictive = Vec<f64>;

    fn encode(&self, _x: &Tensor) {}

    fn prior_statistics(&self) -> Vec<f64> {
        self.alpha0.clone()
    }

    fn recursive_update(&self, post: &Vec<f64>, _x: &(), y: &usize) -> Vec<f64> {
        let mut alpha = post.clone();
        alpha[*y] += 1.0;
        alpha
    }

    fn log_predictive_y(&self, post: &Vec<f64>, _x: &(), y: &usize) -> Result<Value> {
        Ok(Value::scalar(self.log_predictive(post, *y)))
    }

    fn predictive(&self, post: &Vec<f64>, _x: &()) -> Vec<f64> {
        let total: f64 = post.iter().sum();
        post.iter().map(|a| a / total).collect()
    }
}

/// Exact per-step negative log predictive densities by brute force: sums
/// over all `2^(T−1)` changepoint patterns, weighting each by
/// `hazard^(#switches) · (1−hazard)^(#stays)` and multiplying per-segment
/// marginal likelihoods.
///
/// `segment_log_marginal(a, b)` must return the log marginal likelihood of
/// observations `a..b` under a fresh prior. The first observation always
/// starts a fresh segment; indicator `i` covers the gap before observation
/// `i + 1`. Cost is exponential in `horizon` — keep it ≤ ~20.
pub fn enumerated_stream_nlls(
    hazard: f64,
    horizon: usize,
    segment_log_marginal: impl Fn(usize, usize) -> f64,
) -> Vec<f64> {
    assert!(horizon >= 1 && horizon <= 25, "enumeration horizon out of range");
    // log p(y_1..y_t) for t = 1..=horizon.
    let log_evidence: Vec<f64> = (1..=horizon)
        .map(|t| {
            let mut terms = Vec::with_capacity(1 << (t - 1));
            for mask in 0u32..(1 << (t - 1)) {
                let mut log_term = 0.0;
                let mut start = 0usize;
                for i in 0..t - 1 {
                    if mask >> i & 1 == 1 {
                        log_term += hazard.ln() + segment_log_marginal(start, i + 1);
                        start = i + 1;
                    } else {
                        log_term += (1.0 - hazard).ln();
                    }
                }
                log_term += segment_log_marginal(start, t);
                terms.push(log_term);
            }
            crate::tensor::log_sum_exp(&terms)
        })
        .collect();
    (0..horizon)
        .map(|t| {
            let prev = if t == 0 { 0.0 } else { log_evidence[t - 1] };
            -(log_evidence[t] - prev)
        })
        .collect()
}
