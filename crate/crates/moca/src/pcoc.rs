//! Generative classification in a learned embedding space.
//!
//! Inputs are encoded as `z = φ(x)`; each class `c` owns a Gaussian over
//! embeddings with unknown mean and known (learned, diagonal) noise
//! `Σ_ε,c`, and the class frequencies follow a fixed symmetric Dirichlet
//! prior. All covariances are diagonal, so the sufficient statistics per
//! class are two `[d]` vectors — the diagonal posterior precision `λ_c` and
//! the precision-weighted mean `q_c = λ_c ⊙ μ_c` — plus the Dirichlet
//! pseudo-counts `α`:
//!
//! ```text
//! observe (z, y):   α_y += 1      q_y += z / σ²_y      λ_y += 1 / σ²_y
//! ```
//!
//! The joint density `p(z, y) = p(y) · N(z; q_y/λ_y, 1/λ_y + σ²_y)` gives
//! both the label predictive (normalize over classes) and — summed over
//! classes — a generative marginal over the *input* embedding. The filter
//! uses that marginal to move belief mass toward short run lengths as soon
//! as an out-of-distribution input arrives, before its label is seen.
//!
//! Because the model is generative, an unlabeled input still carries
//! information; this is what distinguishes it from a discriminative
//! classifier in the streaming setting.

use rand::Rng;

use crate::autodiff::{gaussian_diag_logpdf, Binding, Mlp, MlpConfig, ParameterStore, Value};
use crate::filter::Upm;
use crate::tensor::Tensor;
use crate::Result;

use crate::alpaca::softplus_inverse;

/// Architecture and initialization choices for a [`Pcoc`] model.
#[derive(Debug, Clone)]
pub struct PcocConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub embed: MlpConfig,
    /// Symmetric Dirichlet concentration for the class prior (fixed, not
    /// learned).
    pub alpha0: f64,
    /// Initial diagonal prior precision over class means (per embedding
    /// dimension).
    pub init_prior_precision: f64,
    /// Initial diagonal embedding noise variance (per class).
    pub init_noise_var: f64,
    pub prefix: String,
}

impl PcocConfig {
    pub fn new(input_dim: usize, num_classes: usize, embed: MlpConfig) -> Self {
        assert_eq!(embed.input_dim, input_dim, "embedding input dim mismatch");
        assert!(num_classes >= 2, "need at least two classes");
        PcocConfig {
            input_dim,
            num_classes,
            embed,
            alpha0: 100.0,
            init_prior_precision: 0.25,
            init_noise_var: 0.25,
            prefix: "pcoc".to_string(),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.embed.output_dim()
    }

    pub fn init_params(&self, store: &mut ParameterStore, rng: &mut impl Rng) {
        self.embed
            .init_params(&format!("{}.emb", self.prefix), store, rng);
        let d = self.embed_dim();
        let j = self.num_classes;
        // Class prior means start at zero; spread comes from the (broad)
        // prior precision.
        let _ = rng;
        store.insert(&format!("{}.mu0", self.prefix), Tensor::zeros(&[j, d]));
        store.insert(
            &format!("{}.raw_prior_prec", self.prefix),
            Tensor::filled(&[j, d], softplus_inverse(self.init_prior_precision)),
        );
        store.insert(
            &format!("{}.raw_noise_var", self.prefix),
            Tensor::filled(&[j, d], softplus_inverse(self.init_noise_var)),
        );
    }

    pub fn bind(&self, binding: &Binding) -> Pcoc {
        let emb = self.embed.bind(&format!("{}.emb", self.prefix), binding);
        let mu0 = binding.value(&format!("{}.mu0", self.prefix));
        let prec0 = binding
            .value(&format!("{}.raw_prior_prec", self.prefix))
            .softplus();
        let noise = binding
            .value(&format!("{}.raw_noise_var", self.prefix))
            .softplus();
        let j = self.num_classes;
        let per_class = |m: &Value| (0..j).map(|c| m.row(c)).collect::<Vec<_>>();
        Pcoc {
            emb,
            mu0: per_class(&mu0),
            prec0: per_class(&prec0),
            noise: per_class(&noise),
            alpha0: self.alpha0,
            num_classes: j,
        }
    }
}

/// Bound classification model.
pub struct Pcoc {
    emb: Mlp,
    /// Per-class prior mean over embeddings, `[d]` each.
    mu0: Vec<Value>,
    /// Per-class diagonal prior precision (post-softplus).
    prec0: Vec<Value>,
    /// Per-class diagonal embedding noise variance (post-softplus).
    noise: Vec<Value>,
    alpha0: f64,
    num_classes: usize,
}

/// Posterior statistics: Dirichlet pseudo-counts plus per-class diagonal
/// Gaussian statistics. The counts are plain numbers (the class prior is not
/// learned, so no gradient flows through them).
#[derive(Clone)]
pub struct PcocPosterior {
    pub alpha: Vec<f64>,
    /// Per-class precision-weighted means `q_c = λ_c ⊙ μ_c`, `[d]` each.
    pub q: Vec<Value>,
    /// Per-class diagonal precisions `λ_c`, `[d]` each.
    pub lam: Vec<Value>,
}

/// Evaluation-time categorical predictive over classes.
#[derive(Debug, Clone)]
pub struct CategoricalPredictive {
    pub log_probs: Vec<f64>,
}

impl Pcoc {
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Joint log densities `log p(z, y=c | post)` for every class, as scalar
    /// graph nodes.
    fn joint_log_densities(&self, post: &PcocPosterior, z: &Value) -> Vec<Value> {
        let alpha_total: f64 = post.alpha.iter().sum();
        (0..self.num_classes)
            .map(|c| {
                let mean = post.q[c].div(&post.lam[c]);
                let var = Value::scalar(1.0).div(&post.lam[c]).add(&self.noise[c]);
                let log_prior = (post.alpha[c] / alpha_total).ln();
                gaussian_diag_logpdf(z, &mean, &var).add_scalar(log_prior)
            })
            .collect()
    }

    /// Stacked joint vector `[J]`.
    fn joint_vector(&self, post: &PcocPosterior, z: &Value) -> Value {
        Value::stack_scalars(&self.joint_log_densities(post, z))
    }
}

impl Upm for Pcoc {
    type Label = usize;
    type Encoded = Value;
    type Posterior = PcocPosterior;
    type Predictive = CategoricalPredictive;

    fn encode(&self, x: &Tensor) -> Value {
        self.emb.forward(x)
    }

    fn prior_statistics(&self) -> PcocPosterior {
        PcocPosterior {
            alpha: vec![self.alpha0; self.num_classes],
            q: (0..self.num_classes)
                .map(|c| self.prec0[c].mul(&self.mu0[c]))
                .collect(),
            lam: self.prec0.clone(),
        }
    }

    fn recursive_update(&self, post: &PcocPosterior, z: &Value, y: &usize) -> PcocPosterior {
        let c = *y;
        assert!(c < self.num_classes, "label {c} out of range");
        let mut alpha = post.alpha.clone();
        alpha[c] += 1.0;
        let inv_noise = Value::scalar(1.0).div(&self.noise[c]);
        let mut q = post.q.clone();
        let mut lam = post.lam.clone();
        q[c] = post.q[c].add(&z.mul(&inv_noise));
        lam[c] = post.lam[c].add(&inv_noise);
        PcocPosterior { alpha, q, lam }
    }

    fn log_predictive_y(&self, post: &PcocPosterior, z: &Value, y: &usize) -> Result<Value> {
        assert!(*y < self.num_classes, "label {y} out of range");
        let joint = self.joint_vector(post, z);
        Ok(joint.get(*y).sub(&joint.logsumexp()))
    }

    fn log_marginal_x(&self, post: &PcocPosterior, z: &Value) -> Result<Option<Value>> {
        Ok(Some(self.joint_vector(post, z).logsumexp()))
    }

    fn predictive(&self, post: &PcocPosterior, z: &Value) -> CategoricalPredictive {
        let joint = self.joint_vector(post, z);
        let norm = joint.logsumexp();
        let log_probs = joint
            .data()
            .data()
            .iter()
            .map(|j| j - norm.item())
            .collect();
        CategoricalPredictive { log_probs }
    }
}
