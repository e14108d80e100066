//! Differentiable Bayesian run-length filtering over streaming posteriors.
//!
//! The filter tracks a belief over the number of observations since the last
//! task switch (the "run length"). For every run length `r` it keeps the
//! posterior statistics of the underlying model conditioned on exactly the
//! last `r` observations — the *bank*. One step of the filter, for an
//! observation pair `(x, y)`:
//!
//! 1. `update_on_x` — reweight the belief by each hypothesis' marginal input
//!    density (models without an input model skip this);
//! 2. `nll` / `predict` — score or predict `y` under the belief-weighted
//!    mixture of per-hypothesis predictives;
//! 3. `grow_posteriors` — shift the bank: a fresh prior enters at run length
//!    0 and every existing posterior absorbs `(x, y)` and moves up one slot;
//! 4. `update_on_y` — reweight the belief by each hypothesis' predictive
//!    density of the observed label (evaluated against the pre-growth bank);
//! 5. `propagate_hazard` — mix in the switch probability: the new belief
//!    puts `hazard` mass on run length 0 and scales the shifted belief by
//!    `1 - hazard`.
//!
//! All belief arithmetic happens in log space through autodiff [`Value`]s, so
//! the per-step negative log likelihoods are differentiable end to end with
//! respect to the model parameters that produced the bank. Per-hypothesis log
//! densities are clamped from below so a single impossible hypothesis cannot
//! poison the gradient with infinities.

use serde::{Deserialize, Serialize};

use crate::autodiff::Value;
use crate::tensor::Tensor;
use crate::{MocaError, Result};

/// Floor applied to per-hypothesis log densities before they touch the
/// belief. Keeps `-inf` out of the graph while leaving any realistic density
/// untouched.
pub const LIKELIHOOD_FLOOR: f64 = -1e10;

/// Posterior-update model plugged into the filter: how to start, fold in one
/// observation, and score observations under the current posterior.
///
/// Implementations must keep `recursive_update` *exact*: folding a segment
/// observation by observation must equal the batch posterior over the same
/// segment. The filter's correctness (its equivalence with full enumeration
/// over changepoint patterns) rests on that property.
pub trait Upm {
    /// Label/observation type the posterior conditions on.
    type Label;
    /// Encoded form of a raw input, computed once per step and shared across
    /// all hypotheses (e.g. a feature vector from a learned encoder).
    type Encoded;
    /// Sufficient statistics of one posterior.
    type Posterior: Clone;
    /// Evaluation-time predictive distribution for one posterior.
    type Predictive;

    fn encode(&self, x: &Tensor) -> Self::Encoded;

    /// Statistics of the prior (a posterior conditioned on zero
    /// observations).
    fn prior_statistics(&self) -> Self::Posterior;

    /// Fold one observation into a posterior, functionally.
    fn recursive_update(
        &self,
        post: &Self::Posterior,
        x: &Self::Encoded,
        y: &Self::Label,
    ) -> Self::Posterior;

    /// Log predictive density of the label under this posterior.
    fn log_predictive_y(
        &self,
        post: &Self::Posterior,
        x: &Self::Encoded,
        y: &Self::Label,
    ) -> Result<Value>;

    /// Log marginal density of the *input* under this posterior, for models
    /// with a generative input model. `Ok(None)` (the default) means the
    /// model has no input model and the filter skips input conditioning.
    fn log_marginal_x(
        &self,
        _post: &Self::Posterior,
        _x: &Self::Encoded,
    ) -> Result<Option<Value>> {
        Ok(None)
    }

    /// Evaluation-time predictive distribution at `x`.
    fn predictive(&self, post: &Self::Posterior, x: &Self::Encoded) -> Self::Predictive;
}

/// A shared reference to a model is itself a model, so one bound model can
/// drive a filter and several baseline agents at once. `log_marginal_x` is
/// forwarded explicitly — falling back to the trait default would silently
/// disable input conditioning for models that have an input model.
impl<U: Upm> Upm for &U {
    type Label = U::Label;
    type Encoded = U::Encoded;
    type Posterior = U::Posterior;
    type Predictive = U::Predictive;

    fn encode(&self, x: &Tensor) -> Self::Encoded {
        (**self).encode(x)
    }

    fn prior_statistics(&self) -> Self::Posterior {
        (**self).prior_statistics()
    }

    fn recursive_update(
        &self,
        post: &Self::Posterior,
        x: &Self::Encoded,
        y: &Self::Label,
    ) -> Self::Posterior {
        (**self).recursive_update(post, x, y)
    }

    fn log_predictive_y(
        &self,
        post: &Self::Posterior,
        x: &Self::Encoded,
        y: &Self::Label,
    ) -> Result<Value> {
        (**self).log_predictive_y(post, x, y)
    }

    fn log_marginal_x(&self, post: &Self::Posterior, x: &Self::Encoded) -> Result<Option<Value>> {
        (**self).log_marginal_x(post, x)
    }

    fn predictive(&self, post: &Self::Posterior, x: &Self::Encoded) -> Self::Predictive {
        (**self).predictive(post, x)
    }
}

/// Filter state: normalized log belief over run lengths `0..support`, and
/// one posterior per run length. `bank[r]` is conditioned on exactly the
/// last `r` observations. Fields are public so tests and advanced callers
/// can assemble states directly; the invariant `log_belief.len() == bank.len()`
/// must hold at step boundaries.
pub struct FilterState<P> {
    pub log_belief: Value,
    pub bank: Vec<P>,
    /// Hazard to use for the next propagation instead of the configured one
    /// (set by the no-change-next supervision signal, consumed once).
    pub hazard_override: Option<f64>,
    /// Number of completed steps.
    pub steps: usize,
}

impl<P> FilterState<P> {
    pub fn support(&self) -> usize {
        self.bank.len()
    }

    /// Normalized belief weights (probability space).
    pub fn belief_weights(&self) -> Vec<f64> {
        self.log_belief.data().data().iter().map(|lw| lw.exp()).collect()
    }

    /// Run length with the largest belief weight; ties break toward the
    /// smallest run length.
    pub fn map_run_length(&self) -> usize {
        let data = self.log_belief.data().data();
        let mut best = 0;
        for (i, &lw) in data.iter().enumerate() {
            if lw > data[best] {
                best = i;
            }
        }
        best
    }

    /// Shannon entropy of the belief, in nats.
    pub fn belief_entropy(&self) -> f64 {
        self.log_belief
            .data()
            .data()
            .iter()
            .map(|&lw| {
                let p = lw.exp();
                if p > 0.0 {
                    -p * lw
                } else {
                    0.0
                }
            })
            .sum()
    }
}

/// Evaluation-time belief pruning limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    /// Hypotheses with belief weight below this are dropped.
    pub min_weight: f64,
    /// Hard cap on the number of retained hypotheses.
    pub max_hypotheses: usize,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { min_weight: 1e-6, max_hypotheses: 512 }
    }
}

/// Test-time belief override signals.
#[derive(Debug, Clone)]
pub enum Supervision {
    /// A changepoint is happening right now: all belief mass moves to run
    /// length 0.
    ChangepointNow,
    /// No changepoint at the next step: the next hazard propagation runs
    /// with hazard 0.
    NoChangeNext,
    /// Replace the belief with the given probability vector over the current
    /// support (must be normalized).
    Soft(Vec<f64>),
}

/// Per-step diagnostics and the differentiable loss.
#[derive(Debug)]
pub struct StepRecord {
    /// Negative log likelihood of `y` under the mixture predictive, as a
    /// graph node (for training) …
    pub loss: Value,
    /// … and as a plain number (for metrics).
    pub nll: f64,
    /// MAP run length right after input conditioning, before the label was
    /// seen. `None` when the model has no input model.
    pub map_after_x: Option<usize>,
    /// MAP run length after the label update.
    pub map_run_length: usize,
    /// Belief entropy (nats) after the label update.
    pub belief_entropy: f64,
}

/// Belief-weighted mixture of per-hypothesis predictives.
pub struct Mixture<Pred> {
    /// Normalized weights, one per run-length hypothesis.
    pub weights: Vec<f64>,
    pub components: Vec<Pred>,
}

/// The run-length filter. Generic over the posterior-update model; owns no
/// state (states are explicit so one model can drive many streams).
pub struct MocaFilter<U: Upm> {
    pub upm: U,
    hazard: f64,
    likelihood_floor: f64,
}

impl<U: Upm> MocaFilter<U> {
    pub fn new(upm: U, hazard: f64) -> Self {
        assert!(
            hazard > 0.0 && hazard < 1.0,
            "hazard must lie strictly in (0, 1), got {hazard}"
        );
        MocaFilter { upm, hazard, likelihood_floor: LIKELIHOOD_FLOOR }
    }

    pub fn hazard(&self) -> f64 {
        self.hazard
    }

    /// Fresh state: all belief mass on run length 0, bank holding the prior.
    pub fn init_state(&self) -> FilterState<U::Posterior> {
        FilterState {
            log_belief: Value::constant(Tensor::vector(vec![0.0])),
            bank: vec![self.upm.prior_statistics()],
            hazard_override: None,
            steps: 0,
        }
    }

    // -- sub-operations ----------------------------------------------------

    /// Reweight the belief by per-hypothesis marginal input densities.
    /// No-op for models without an input model.
    pub fn update_on_x(&self, state: &mut FilterState<U::Posterior>, x: &Tensor) -> Result<()> {
        let enc = self.upm.encode(x);
        self.update_on_x_encoded(state, &enc)
    }

    fn update_on_x_encoded(
        &self,
        state: &mut FilterState<U::Posterior>,
        enc: &U::Encoded,
    ) -> Result<()> {
        let mut liks = Vec::with_capacity(state.bank.len());
        for post in &state.bank {
            match self.upm.log_marginal_x(post, enc)? {
                Some(v) => liks.push(v),
                None => {
                    assert!(
                        liks.is_empty(),
                        "model returned an input density for some hypotheses but not others"
                    );
                    return Ok(());
                }
            }
        }
        let liks = Value::stack_scalars(&liks).clamp_min(self.likelihood_floor);
        state.log_belief = self.renormalize(&state.log_belief.add(&liks))?;
        Ok(())
    }

    /// Mixture negative log likelihood of `y` at `x` under the current
    /// belief, as a differentiable scalar. Does not modify the state.
    pub fn nll(&self, state: &FilterState<U::Posterior>, x: &Tensor, y: &U::Label) -> Result<Value> {
        let enc = self.upm.encode(x);
        let liks = self.label_log_liks(state, &enc, y)?;
        self.nll_from_liks(state, &liks)
    }

    fn nll_from_liks(&self, state: &FilterState<U::Posterior>, liks: &Value) -> Result<Value> {
        let loss = state.log_belief.add(liks).logsumexp().neg();
        if !loss.item().is_finite() {
            return Err(MocaError::Numerical(format!(
                "mixture NLL is {}; belief or likelihoods are corrupt",
                loss.item()
            )));
        }
        Ok(loss)
    }

    /// Belief-weighted mixture of per-hypothesis predictive distributions at
    /// `x`. Evaluation-side counterpart of [`MocaFilter::nll`].
    pub fn predict(&self, state: &FilterState<U::Posterior>, x: &Tensor) -> Mixture<U::Predictive> {
        let enc = self.upm.encode(x);
        Mixture {
            weights: state.belief_weights(),
            components: state
                .bank
                .iter()
                .map(|post| self.upm.predictive(post, &enc))
                .collect(),
        }
    }

    /// Shift the bank: fresh prior at run length 0, every existing posterior
    /// absorbs `(x, y)` and moves up one slot. The belief is not touched.
    pub fn grow_posteriors(&self, state: &mut FilterState<U::Posterior>, x: &Tensor, y: &U::Label) {
        let enc = self.upm.encode(x);
        self.grow_posteriors_encoded(state, &enc, y);
    }

    fn grow_posteriors_encoded(
        &self,
        state: &mut FilterState<U::Posterior>,
        enc: &U::Encoded,
        y: &U::Label,
    ) {
        let mut bank = Vec::with_capacity(state.bank.len() + 1);
        bank.push(self.upm.prior_statistics());
        for post in &state.bank {
            bank.push(self.upm.recursive_update(post, enc, y));
        }
        state.bank = bank;
    }

    /// Reweight the belief by each hypothesis' predictive density of the
    /// observed label, evaluated against the state's current bank.
    pub fn update_on_y(
        &self,
        state: &mut FilterState<U::Posterior>,
        x: &Tensor,
        y: &U::Label,
    ) -> Result<()> {
        let enc = self.upm.encode(x);
        let liks = self.label_log_liks(state, &enc, y)?;
        self.apply_label_liks(state, &liks)
    }

    fn label_log_liks(
        &self,
        state: &FilterState<U::Posterior>,
        enc: &U::Encoded,
        y: &U::Label,
    ) -> Result<Value> {
        let mut liks = Vec::with_capacity(state.bank.len());
        for post in &state.bank {
            liks.push(self.upm.log_predictive_y(post, enc, y)?);
        }
        Ok(Value::stack_scalars(&liks).clamp_min(self.likelihood_floor))
    }

    fn apply_label_liks(&self, state: &mut FilterState<U::Posterior>, liks: &Value) -> Result<()> {
        state.log_belief = self.renormalize(&state.log_belief.add(liks))?;
        Ok(())
    }

    /// Mix the switch probability into the belief and extend the support:
    /// `b'(0) = hazard`, `b'(r+1) = (1 - hazard) * b(r)`.
    pub fn propagate_hazard(&self, state: &mut FilterState<U::Posterior>) {
        let hazard = state.hazard_override.take().unwrap_or(self.hazard);
        let log_hazard = Value::constant(Tensor::vector(vec![hazard.ln()]));
        let shifted = state.log_belief.add_scalar((1.0 - hazard).ln());
        state.log_belief = Value::concat(&[log_hazard, shifted]);
    }

    fn renormalize(&self, log_belief: &Value) -> Result<Value> {
        let lse = log_belief.logsumexp();
        if !lse.item().is_finite() {
            return Err(MocaError::DegenerateBelief(format!(
                "log normalizer is {}; every run-length hypothesis is impossible",
                lse.item()
            )));
        }
        Ok(log_belief.sub(&lse))
    }

    // -- full step ---------------------------------------------------------

    /// One full filter step on the observation pair `(x, y)`: input update,
    /// mixture loss, posterior growth, label update, hazard propagation.
    ///
    /// Equivalent to composing the public sub-operations
    /// (`update_on_x`, `nll`, `update_on_y`, `grow_posteriors`,
    /// `propagate_hazard`) — bit-identically so; the label densities are
    /// simply computed once here and reused.
    pub fn step(
        &self,
        state: &mut FilterState<U::Posterior>,
        x: &Tensor,
        y: &U::Label,
    ) -> Result<StepRecord> {
        debug_assert_eq!(
            state.log_belief.data().len(),
            state.bank.len(),
            "belief support and bank size diverged"
        );
        let enc = self.upm.encode(x);

        let map_after_x = match self.update_on_x_encoded(state, &enc) {
            Ok(()) => {
                // Only meaningful when the model actually has an input model.
                match self.upm.log_marginal_x(&state.bank[0], &enc)? {
                    Some(_) => Some(state.map_run_length()),
                    None => None,
                }
            }
            Err(e) => return Err(e),
        };

        let liks = self.label_log_liks(state, &enc, y)?;
        let loss = self.nll_from_liks(state, &liks)?;
        let nll = loss.item();

        self.grow_posteriors_encoded(state, &enc, y);
        self.apply_label_liks(state, &liks)?;
        let map_run_length = state.map_run_length();
        let belief_entropy = state.belief_entropy();
        self.propagate_hazard(state);
        state.steps += 1;

        debug_assert_eq!(state.log_belief.data().len(), state.bank.len());
        Ok(StepRecord { loss, nll, map_after_x, map_run_length, belief_entropy })
    }

    // -- supervision and pruning ------------------------------------------

    /// Apply a test-time supervision signal to the belief. The override
    /// enters the graph as a constant: supervision is treated as hard
    /// evidence, not something to differentiate through.
    pub fn apply_supervision(
        &self,
        state: &mut FilterState<U::Posterior>,
        signal: &Supervision,
    ) -> Result<()> {
        match signal {
            Supervision::ChangepointNow => {
                let n = state.support();
                let mut lw = vec![f64::NEG_INFINITY; n];
                lw[0] = 0.0;
                state.log_belief = Value::constant(Tensor::vector(lw));
                Ok(())
            }
            Supervision::NoChangeNext => {
                state.hazard_override = Some(0.0);
                Ok(())
            }
            Supervision::Soft(probs) => {
                if probs.len() != state.support() {
                    return Err(MocaError::Contract(format!(
                        "soft supervision has {} entries for support {}",
                        probs.len(),
                        state.support()
                    )));
                }
                if probs.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                    return Err(MocaError::Contract(
                        "soft supervision weights must be finite and non-negative".into(),
                    ));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > 1e-8 {
                    return Err(MocaError::Contract(format!(
                        "soft supervision weights sum to {total}, expected 1"
                    )));
                }
                let lw: Vec<f64> = probs.iter().map(|&p| p.ln()).collect();
                state.log_belief = Value::constant(Tensor::vector(lw));
                Ok(())
            }
        }
    }

    /// Drop negligible hypotheses and cap the support size. Evaluation-only:
    /// refuses to touch a belief that is part of a training graph, because
    /// discarding hypotheses would silently cut gradient paths.
    pub fn prune(&self, state: &mut FilterState<U::Posterior>, cfg: &PruneConfig) -> Result<()> {
        if state.log_belief.requires_grad() {
            return Err(MocaError::Contract(
                "prune called on a training graph; pruning is evaluation-only".into(),
            ));
        }
        let weights = state.belief_weights();
        let mut keep: Vec<usize> = (0..weights.len())
            .filter(|&i| weights[i] >= cfg.min_weight)
            .collect();
        if keep.len() > cfg.max_hypotheses {
            // Retain the heaviest; ties toward smaller run lengths.
            keep.sort_by(|&a, &b| {
                weights[b]
                    .partial_cmp(&weights[a])
                    .expect("belief weights are comparable")
                    .then(a.cmp(&b))
            });
            keep.truncate(cfg.max_hypotheses);
            keep.sort_unstable();
        }
        if keep.is_empty() {
            return Err(MocaError::DegenerateBelief(format!(
                "pruning at min_weight {:e} would remove all {} hypotheses",
                cfg.min_weight,
                weights.len()
            )));
        }
        let lw = state.log_belief.data();
        let kept_lw: Vec<f64> = keep.iter().map(|&i| lw.data()[i]).collect();
        let lse = crate::tensor::log_sum_exp(&kept_lw);
        let renorm: Vec<f64> = kept_lw.iter().map(|lw| lw - lse).collect();
        let mut bank = Vec::with_capacity(keep.len());
        for &i in &keep {
            bank.push(state.bank[i].clone());
        }
        state.log_belief = Value::constant(Tensor::vector(renorm));
        state.bank = bank;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testing::{CatDirichletUpm, ConjGaussianUpm};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Minimal model for exercising the filter mechanics: the "posterior" is
    /// a fixed label density that never changes with data.
    struct FixedLikUpm;

    impl Upm for FixedLikUpm {
        type Label = f64;
        type Encoded = ();
        type Posterior = f64; // density assigned to every label
        type Predictive = f64;

        fn encode(&self, _x: &Tensor) {}
        fn prior_statistics(&self) -> f64 {
            1.0
        }
        fn recursive_update(&self, post: &f64, _x: &(), _y: &f64) -> f64 {
            *post
        }
        fn log_predictive_y(&self, post: &f64, _x: &(), _y: &f64) -> Result<Value> {
            Ok(Value::scalar(post.ln()))
        }
        fn predictive(&self, post: &f64, _x: &()) -> f64 {
            *post
        }
    }

    fn state_with(belief: &[f64], bank: Vec<f64>) -> FilterState<f64> {
        FilterState {
            log_belief: Value::constant(Tensor::vector(
                belief.iter().map(|p| p.ln()).collect(),
            )),
            bank,
            hazard_override: None,
            steps: 0,
        }
    }

    #[test]
    fn label_update_reweights_and_renormalizes() {
        // Belief (0.5, 0.5) with label densities (0.2, 0.6) -> (0.25, 0.75).
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut st = state_with(&[0.5, 0.5], vec![0.2, 0.6]);
        filter.update_on_y(&mut st, &Tensor::vector(vec![0.0]), &0.0).unwrap();
        let w = st.belief_weights();
        assert!(close(w[0], 0.25, 1e-12) && close(w[1], 0.75, 1e-12), "{w:?}");
    }

    #[test]
    fn hazard_propagation_prepends_switch_mass() {
        // Belief (0.25, 0.75) at hazard 0.2 -> (0.2, 0.2, 0.6).
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut st = state_with(&[0.25, 0.75], vec![1.0, 1.0]);
        filter.propagate_hazard(&mut st);
        let w = st.belief_weights();
        assert!(close(w[0], 0.2, 1e-12));
        assert!(close(w[1], 0.2, 1e-12));
        assert!(close(w[2], 0.6, 1e-12));
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn growth_prepends_prior_and_updates_each_entry() {
        struct CountingUpm;
        impl Upm for CountingUpm {
            type Label = f64;
            type Encoded = ();
            type Posterior = usize; // number of folded observations
            type Predictive = ();
            fn encode(&self, _x: &Tensor) {}
            fn prior_statistics(&self) -> usize {
                0
            }
            fn recursive_update(&self, post: &usize, _x: &(), _y: &f64) -> usize {
                post + 1
            }
            fn log_predictive_y(&self, _p: &usize, _x: &(), _y: &f64) -> Result<Value> {
                Ok(Value::scalar(0.0))
            }
            fn predictive(&self, _p: &usize, _x: &()) {}
        }

        let filter = MocaFilter::new(CountingUpm, 0.3);
        let mut st = filter.init_state();
        let x = Tensor::vector(vec![0.0]);
        for _ in 0..4 {
            filter.step(&mut st, &x, &0.0).unwrap();
        }
        // bank[r] must have folded exactly r observations.
        assert_eq!(st.bank, (0..5).collect::<Vec<_>>());
        assert_eq!(st.support(), 5);
    }

    #[test]
    fn full_step_on_conjugate_gaussian_keeps_belief_normalized() {
        let upm = ConjGaussianUpm { prior_mean: 0.0, prior_var: 2.0, noise_var: 0.5 };
        let filter = MocaFilter::new(upm, 0.25);
        let mut st = filter.init_state();
        let x = Tensor::vector(vec![0.0]);
        for (i, y) in [0.3, -1.2, 0.8, 2.5, 2.6, -0.1].iter().enumerate() {
            let rec = filter.step(&mut st, &x, y).unwrap();
            let total: f64 = st.belief_weights().iter().sum();
            assert!(close(total, 1.0, 1e-9), "step {i}: belief sums to {total}");
            assert!(rec.nll.is_finite());
            assert_eq!(st.support(), i + 2);
        }
    }

    #[test]
    fn step_equals_manual_composition_bit_for_bit() {
        let make = || {
            let upm = ConjGaussianUpm { prior_mean: 0.1, prior_var: 1.5, noise_var: 0.3 };
            MocaFilter::new(upm, 0.2)
        };
        let filter_a = make();
        let filter_b = make();
        let mut st_a = filter_a.init_state();
        let mut st_b = filter_b.init_state();
        let x = Tensor::vector(vec![0.0]);
        let ys = [0.4, -0.9, 1.7, 0.2, 0.0, -2.1, 0.5, 1.1, -0.3, 0.9];

        for y in &ys {
            let rec = filter_a.step(&mut st_a, &x, y).unwrap();

            // Manual composition through the public sub-operations.
            filter_b.update_on_x(&mut st_b, &x).unwrap();
            let loss = filter_b.nll(&st_b, &x, y).unwrap();
            filter_b.update_on_y(&mut st_b, &x, y).unwrap();
            filter_b.grow_posteriors(&mut st_b, &x, y);
            filter_b.propagate_hazard(&mut st_b);

            assert_eq!(rec.nll.to_bits(), loss.item().to_bits());
            let a = st_a.log_belief.data().data().to_vec();
            let b = st_b.log_belief.data().data().to_vec();
            assert_eq!(a.len(), b.len());
            for (ai, bi) in a.iter().zip(&b) {
                assert_eq!(ai.to_bits(), bi.to_bits());
            }
        }
    }

    #[test]
    fn map_ties_break_toward_smaller_run_length() {
        let st = state_with(&[0.4, 0.4, 0.2], vec![1.0, 1.0, 1.0]);
        assert_eq!(st.map_run_length(), 0);
    }

    #[test]
    fn degenerate_belief_is_reported_not_nan() {
        struct NanUpm;
        impl Upm for NanUpm {
            type Label = f64;
            type Encoded = ();
            type Posterior = ();
            type Predictive = ();
            fn encode(&self, _x: &Tensor) {}
            fn prior_statistics(&self) {}
            fn recursive_update(&self, _p: &(), _x: &(), _y: &f64) {}
            fn log_predictive_y(&self, _p: &(), _x: &(), _y: &f64) -> Result<Value> {
                Ok(Value::scalar(f64::NAN))
            }
            fn predictive(&self, _p: &(), _x: &()) {}
        }
        let filter = MocaFilter::new(NanUpm, 0.2);
        let mut st = filter.init_state();
        let err = filter.step(&mut st, &Tensor::vector(vec![0.0]), &0.0).unwrap_err();
        assert!(matches!(
            err,
            MocaError::DegenerateBelief(_) | MocaError::Numerical(_)
        ));
    }

    #[test]
    fn changepoint_now_forces_all_mass_to_zero() {
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut st = state_with(&[0.1, 0.2, 0.7], vec![1.0, 1.0, 1.0]);
        filter.apply_supervision(&mut st, &Supervision::ChangepointNow).unwrap();
        let w = st.belief_weights();
        assert_eq!(w[0], 1.0);
        assert_eq!(&w[1..], &[0.0, 0.0]);
        assert_eq!(st.map_run_length(), 0);
    }

    #[test]
    fn no_change_next_suppresses_switch_mass_once() {
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut st = state_with(&[0.25, 0.75], vec![1.0, 1.0]);
        filter.apply_supervision(&mut st, &Supervision::NoChangeNext).unwrap();
        filter.propagate_hazard(&mut st);
        let w = st.belief_weights();
        assert_eq!(w[0], 0.0);
        assert!(close(w[1], 0.25, 1e-12) && close(w[2], 0.75, 1e-12));
        // The override is consumed: the next propagation uses the real hazard.
        filter.propagate_hazard(&mut st);
        assert!(close(st.belief_weights()[0], 0.2, 1e-12));
    }

    #[test]
    fn soft_supervision_validates_its_input() {
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut st = state_with(&[0.5, 0.5], vec![1.0, 1.0]);
        // Wrong length.
        assert!(matches!(
            filter.apply_supervision(&mut st, &Supervision::Soft(vec![1.0])),
            Err(MocaError::Contract(_))
        ));
        // Unnormalized.
        assert!(matches!(
            filter.apply_supervision(&mut st, &Supervision::Soft(vec![0.9, 0.3])),
            Err(MocaError::Contract(_))
        ));
        // Valid.
        filter
            .apply_supervision(&mut st, &Supervision::Soft(vec![0.85, 0.15]))
            .unwrap();
        let w = st.belief_weights();
        assert!(close(w[0], 0.85, 1e-12));
    }

    #[test]
    fn prune_drops_light_hypotheses_and_caps_support() {
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let mut weights = vec![1e-9, 0.5, 1e-8, 0.3, 0.2 - 3e-8];
        let mut st = state_with(&weights, vec![0.0, 1.0, 2.0, 3.0, 4.0]);
        filter
            .prune(&mut st, &PruneConfig { min_weight: 1e-6, max_hypotheses: 2 })
            .unwrap();
        // Below min_weight: indices 0 and 2 go; cap 2 keeps the heaviest two.
        assert_eq!(st.bank, vec![1.0, 3.0]);
        let w = st.belief_weights();
        assert!(close(w.iter().sum::<f64>(), 1.0, 1e-12));
        assert!(close(w[0] / w[1], 0.5 / 0.3, 1e-9));

        // Pruning everything is an error, not a silent empty belief.
        weights = vec![1e-9, 1e-8];
        let mut st2 = state_with(&weights, vec![0.0, 1.0]);
        let err = filter.prune(&mut st2, &PruneConfig::default()).unwrap_err();
        assert!(matches!(err, MocaError::DegenerateBelief(_)));
    }

    #[test]
    fn prune_refuses_training_graphs() {
        let filter = MocaFilter::new(FixedLikUpm, 0.2);
        let lw = Value::leaf(Tensor::vector(vec![0.5f64.ln(), 0.5f64.ln()]));
        let mut st = FilterState {
            log_belief: lw.add_scalar(0.0),
            bank: vec![1.0, 1.0],
            hazard_override: None,
            steps: 0,
        };
        let err = filter.prune(&mut st, &PruneConfig::default()).unwrap_err();
        assert!(matches!(err, MocaError::Contract(_)));
    }

    #[test]
    fn categorical_dirichlet_stream_stays_normalized() {
        let upm = CatDirichletUpm { alpha0: vec![1.0, 1.0, 1.0] };
        let filter = MocaFilter::new(upm, 0.3);
        let mut st = filter.init_state();
        let x = Tensor::vector(vec![0.0]);
        for y in [0usize, 0, 1, 2, 1, 0, 0] {
            filter.step(&mut st, &x, &y).unwrap();
            let total: f64 = st.belief_weights().iter().sum();
            assert!(close(total, 1.0, 1e-9));
        }
    }
}
