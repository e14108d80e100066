//! Bayesian last-layer regression with a learned feature encoder.
//!
//! Labels are modeled as `y = Kᵀ φ(x) + ε` with a learned encoder `φ`, a
//! matrix-normal prior over the last-layer weights `K`, and diagonal Gaussian
//! noise `ε`. Conditioning on data keeps the posterior matrix-normal, so the
//! sufficient statistics are just two arrays:
//!
//! - `q = Λ K̄` — precision-weighted mean weights, shape `[n_φ, n_y]`;
//! - `lam_inv = Λ⁻¹` — inverse precision, shape `[n_φ, n_φ]`, maintained
//!   directly via rank-one (Sherman–Morrison) updates so no solve is ever
//!   needed in the streaming path.
//!
//! One observation `(φ, y)` updates the statistics as
//!
//! ```text
//! Λ⁻¹ ← Λ⁻¹ − (Λ⁻¹φ)(Λ⁻¹φ)ᵀ / (1 + φᵀΛ⁻¹φ)     q ← q + φ yᵀ
//! ```
//!
//! and the predictive at `x` is Gaussian with mean `(Λ⁻¹q)ᵀφ` and diagonal
//! covariance `(1 + φᵀΛ⁻¹φ) Σ_ε`. Prior precision and noise variances are
//! learned through softplus reparameterizations so they stay positive. The
//! inverse precision is re-symmetrized after every rank-one update to stop
//! floating-point drift from accumulating over long runs.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{gaussian_diag_logpdf, Binding, Mlp, MlpConfig, ParameterStore, Value};
use crate::filter::Upm;
use crate::tensor::Tensor;
use crate::{MocaError, Result};

/// Inverse of `softplus`, used to initialize raw parameters so their
/// constrained value starts at a chosen positive number.
pub fn softplus_inverse(y: f64) -> f64 {
    assert!(y > 0.0, "softplus_inverse needs a positive target, got {y}");
    y.exp_m1().ln()
}

/// Architecture and initialization choices for an [`Alpaca`] model.
#[derive(Debug, Clone)]
pub struct AlpacaConfig {
    pub input_dim: usize,
    pub label_dim: usize,
    pub encoder: MlpConfig,
    /// Initial diagonal prior precision (per feature).
    pub init_prior_precision: f64,
    /// Initial diagonal noise variance (per label dimension).
    pub init_noise_var: f64,
    /// Namespace for this model's parameters in the store.
    pub prefix: String,
}

impl AlpacaConfig {
    pub fn new(input_dim: usize, label_dim: usize, encoder: MlpConfig) -> Self {
        assert_eq!(encoder.input_dim, input_dim, "encoder input dim mismatch");
        AlpacaConfig {
            input_dim,
            label_dim,
            encoder,
            init_prior_precision: 1.0,
            init_noise_var: 0.5,
            prefix: "alpaca".to_string(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    /// Register all learnable tensors: encoder layers, prior mean weights,
    /// raw (pre-softplus) prior precisions and noise variances.
    pub fn init_params(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.encoder
            .init_params(&format!("{}.enc", self.prefix), store, rng);
        let n_phi = self.feature_dim();
        let normal = Normal::new(0.0, 0.1).expect("valid init std");
        let kbar: Vec<f64> = (0..n_phi * self.label_dim)
            .map(|_| normal.sample(rng))
            .collect();
        store.insert(
            &format!("{}.kbar0", self.prefix),
            Tensor::matrix(n_phi, self.label_dim, kbar),
        );
        store.insert(
            &format!("{}.raw_prior_prec", self.prefix),
            Tensor::filled(&[n_phi], softplus_inverse(self.init_prior_precision)),
        );
        store.insert(
            &format!("{}.raw_noise_var", self.prefix),
            Tensor::filled(&[self.label_dim], softplus_inverse(self.init_noise_var)),
        );
    }

    /// Resolve the model against bound parameter values.
    pub fn bind(&self, binding: &Binding) -> Alpaca {
        let enc = self.encoder.bind(&format!("{}.enc", self.prefix), binding);
        let kbar0 = binding.value(&format!("{}.kbar0", self.prefix));
        let prior_prec = binding
            .value(&format!("{}.raw_prior_prec", self.prefix))
            .softplus();
        let noise_var = binding
            .value(&format!("{}.raw_noise_var", self.prefix))
            .softplus();
        Alpaca {
            enc,
            kbar0,
            prior_prec,
            noise_var,
            label_dim: self.label_dim,
        }
    }
}

/// Bound regression model: encoder plus (constrained) prior parameters as
/// graph values.
pub struct Alpaca {
    enc: Mlp,
    kbar0: Value,
    /// Diagonal prior precision `λ₀` (post-softplus), shape `[n_φ]`.
    prior_prec: Value,
    /// Diagonal noise variance `σ_ε²` (post-softplus), shape `[n_y]`.
    noise_var: Value,
    label_dim: usize,
}

/// Matrix-normal posterior statistics.
#[derive(Clone)]
pub struct AlpacaPosterior {
    /// Precision-weighted mean weights `Λ K̄`, shape `[n_φ, n_y]`.
    pub q: Value,
    /// Inverse precision `Λ⁻¹`, shape `[n_φ, n_φ]`.
    pub lam_inv: Value,
}

/// Evaluation-time diagonal Gaussian predictive.
#[derive(Debug, Clone)]
pub struct GaussianPredictive {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Alpaca {
    pub fn noise_var(&self) -> &Value {
        &self.noise_var
    }

    /// `1 + φᵀ Λ⁻¹ φ`, the predictive variance scale at `φ`. Also the
    /// denominator of the rank-one update.
    fn variance_scale(&self, post: &AlpacaPosterior, phi: &Value) -> (Value, Value) {
        let lam_phi = post.lam_inv.matvec(phi);
        let scale = phi.dot(&lam_phi).add_scalar(1.0);
        (scale, lam_phi)
    }

    fn predictive_mean_var(
        &self,
        post: &AlpacaPosterior,
        phi: &Value,
    ) -> Result<(Value, Value)> {
        let (scale, lam_phi) = self.variance_scale(post, phi);
        let s = scale.item();
        if !s.is_finite() || s <= 0.0 {
            return Err(MocaError::Numerical(format!(
                "predictive variance scale is {s}; inverse precision lost positive-definiteness"
            )));
        }
        // mean = (Λ⁻¹ q)ᵀ φ = qᵀ (Λ⁻¹ φ) by symmetry of Λ⁻¹.
        let mean = lam_phi.vecmat(&post.q);
        let var = self.noise_var.mul(&scale);
        Ok((mean, var))
    }

    /// Draw last-layer weights `K ~ MN(Λ⁻¹q, Λ⁻¹, Σ_ε)` from the posterior,
    /// as a plain `[n_φ, n_y]` tensor. Used by posterior-sampling action
    /// selection; evaluation-only (no gradients flow through draws).
    pub fn sample_last_layer(
        &self,
        post: &AlpacaPosterior,
        rng: &mut impl Rng,
    ) -> Result<Tensor> {
        let lam_inv = post.lam_inv.data();
        let n_phi = lam_inv.rows();
        let chol = lam_inv.cholesky()?;
        let mean = lam_inv.matmul(post.q.data());
        let noise_std: Vec<f64> = self.noise_var.data().data().iter().map(|v| v.sqrt()).collect();
        let mut draw = Tensor::zeros(&[n_phi, self.label_dim]);
        // K = M + L E diag(σ), E iid standard normal.
        let e: Vec<f64> = (0..n_phi * self.label_dim)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z
            })
            .collect();
        for i in 0..n_phi {
            for j in 0..self.label_dim {
                let mut acc = 0.0;
                for p in 0..=i {
                    acc += chol.at2(i, p) * e[p * self.label_dim + j];
                }
                draw.data_mut()[i * self.label_dim + j] =
                    mean.at2(i, j) + acc * noise_std[j];
            }
        }
        Ok(draw)
    }
}

impl Upm for Alpaca {
    type Label = Tensor;
    type Encoded = Value;
    type Posterior = AlpacaPosterior;
    type Predictive = GaussianPredictive;

    fn encode(&self, x: &Tensor) -> Value {
        self.enc.forward(x)
    }

    fn prior_statistics(&self) -> AlpacaPosterior {
        // Λ₀⁻¹ = diag(1/λ₀), q₀ = Λ₀ K̄₀ = diag(λ₀) K̄₀.
        let inv = Value::scalar(1.0).div(&self.prior_prec);
        AlpacaPosterior {
            q: self.prior_prec.diag().matmul(&self.kbar0),
            lam_inv: inv.diag(),
        }
    }

    fn recursive_update(
        &self,
        post: &AlpacaPosterior,
        phi: &Value,
        y: &Tensor,
    ) -> AlpacaPosterior {
        let (scale, lam_phi) = self.variance_scale(post, phi);
        let rank1 = lam_phi.outer(&lam_phi).div(&scale);
        let updated = post.lam_inv.sub(&rank1);
        // Guard symmetry against floating-point drift.
        let lam_inv = updated.add(&updated.transpose()).scale(0.5);
        let q = post.q.add(&phi.outer(&Value::constant(y.clone())));
        AlpacaPosterior { q, lam_inv }
    }

    fn log_predictive_y(&self, post: &AlpacaPosterior, phi: &Value, y: &Tensor) -> Result<Value> {
        assert_eq!(
            y.shape(),
            &[self.label_dim],
            "label shape {:?} does not match label dim {}",
            y.shape(),
            self.label_dim
        );
        let (mean, var) = self.predictive_mean_var(post, phi)?;
        Ok(gaussian_diag_logpdf(&Value::constant(y.clone()), &mean, &var))
    }

    fn predictive(&self, post: &AlpacaPosterior, phi: &Value) -> GaussianPredictive {
        let (mean, var) = self
            .predictive_mean_var(post, phi)
            .expect("predictive on a healthy posterior");
        GaussianPredictive {
            mean: mean.data().data().to_vec(),
            var: var.data().data().to_vec(),
        }
    }
}
