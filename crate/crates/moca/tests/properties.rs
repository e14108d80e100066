//! Randomized invariants: belief normalization, shift invariances, sub-op
//! ordering, exchangeability of conjugate posteriors, and agreement with the
//! brute-force changepoint enumeration on small streams.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use moca::alpaca::AlpacaConfig;
use moca::autodiff::{MlpConfig, ParameterStore, Value};
use moca::filter::{MocaFilter, Upm};
use moca::pcoc::PcocConfig;
use moca::tensor::Tensor;
use moca::testing::{enumerated_stream_nlls, ConjGaussianUpm};
use moca::Result;

/// Forwarding wrapper that adds a constant to every label log likelihood —
/// a uniform positive rescaling of the likelihoods in probability space.
struct ShiftedUpm<'a> {
    inner: &'a ConjGaussianUpm,
    shift: f64,
}

impl Upm for ShiftedUpm<'_> {
    type Label = f64;
    type Encoded = ();
    type Posterior = moca::testing::GaussPosterior;
    type Predictive = moca::testing::GaussPosterior;

    fn encode(&self, x: &Tensor) {
        self.inner.encode(x)
    }

    fn prior_statistics(&self) -> Self::Posterior {
        self.inner.prior_statistics()
    }

    fn recursive_update(&self, post: &Self::Posterior, x: &(), y: &f64) -> Self::Posterior {
        self.inner.recursive_update(post, x, y)
    }

    fn log_predictive_y(&self, post: &Self::Posterior, x: &(), y: &f64) -> Result<Value> {
        Ok(self.inner.log_predictive_y(post, x, y)?.add_scalar(self.shift))
    }

    fn predictive(&self, post: &Self::Posterior, x: &()) -> Self::Predictive {
        self.inner.predictive(post, x)
    }
}

fn dummy_x() -> Tensor {
    Tensor::vector(vec![0.0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn logsumexp_shifts_by_any_added_constant(
        values in prop::collection::vec(-50.0f64..50.0, 1..12),
        shift in -300.0f64..300.0,
    ) {
        let base = Value::constant(Tensor::vector(values.clone())).logsumexp().item();
        let shifted = Value::constant(Tensor::vector(values))
            .add_scalar(shift)
            .logsumexp()
            .item();
        let tol = 1e-9 * (1.0 + base.abs() + shift.abs());
        prop_assert!((shifted - (base + shift)).abs() < tol,
            "lse(x + c) = {shifted}, lse(x) + c = {}", base + shift);
    }

    #[test]
    fn belief_stays_normalized_and_grows_by_one_per_step(
        prior_mean in -2.0f64..2.0,
        prior_var in 0.2f64..3.0,
        noise_var in 0.1f64..2.0,
        hazard in 0.05f64..0.95,
        ys in prop::collection::vec(-5.0f64..5.0, 1..14),
    ) {
        let upm = ConjGaussianUpm { prior_mean, prior_var, noise_var };
        let filter = MocaFilter::new(upm, hazard);
        let mut state = filter.init_state();
        for (t, y) in ys.iter().enumerate() {
            filter.step(&mut state, &dummy_x(), y).unwrap();
            let total: f64 = state.belief_weights().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-9,
                "belief sums to {total} after step {t}");
            prop_assert_eq!(state.support(), t + 2,
                "support must grow by exactly one hypothesis per step");
        }
    }

    #[test]
    fn step_matches_manual_sub_op_composition(
        hazard in 0.05f64..0.95,
        ys in prop::collection::vec(-4.0f64..4.0, 1..10),
    ) {
        let upm = ConjGaussianUpm { prior_mean: 0.0, prior_var: 1.0, noise_var: 0.4 };
        let filter = MocaFilter::new(upm, hazard);
        let mut fused = filter.init_state();
        let mut manual = filter.init_state();
        let x = dummy_x();
        for y in &ys {
            let record = filter.step(&mut fused, &x, y).unwrap();
            filter.update_on_x(&mut manual, &x).unwrap();
            let nll = filter.nll(&manual, &x, y).unwrap().item();
            filter.update_on_y(&mut manual, &x, y).unwrap();
            filter.grow_posteriors(&mut manual, &x, y);
            filter.propagate_hazard(&mut manual);
            prop_assert_eq!(record.nll.to_bits(), nll.to_bits());
            let a = fused.log_belief.data().data();
            let b = manual.log_belief.data().data();
            prop_assert_eq!(a, b, "belief diverged between fused and composed paths");
        }
    }

    #[test]
    fn uniform_likelihood_rescaling_preserves_belief_and_map(
        shift in -40.0f64..40.0,
        hazard in 0.1f64..0.9,
        ys in prop::collection::vec(-4.0f64..4.0, 1..12),
    ) {
        let upm = ConjGaussianUpm { prior_mean: 0.3, prior_var: 1.5, noise_var: 0.5 };
        let shifted = ShiftedUpm { inner: &upm, shift };
        let plain_filter = MocaFilter::new(&upm, hazard);
        let shifted_filter = MocaFilter::new(shifted, hazard);
        let mut plain = plain_filter.init_state();
        let mut scaled = shifted_filter.init_state();
        let x = dummy_x();
        for y in &ys {
            let a = plain_filter.step(&mut plain, &x, y).unwrap();
            let b = shifted_filter.step(&mut scaled, &x, y).unwrap();
            prop_assert_eq!(a.map_run_length, b.map_run_length);
            let wa = plain.belief_weights();
            let wb = scaled.belief_weights();
            for (pa, pb) in wa.iter().zip(&wb) {
                prop_assert!((pa - pb).abs() < 1e-12,
                    "posterior belief must ignore a uniform likelihood rescale");
            }
            // The mixture NLL absorbs the shift exactly.
            prop_assert!((b.nll - (a.nll - shift)).abs() < 1e-9 * (1.0 + a.nll.abs() + shift.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn filter_matches_brute_force_enumeration_on_small_streams(
        hazard in 0.05f64..0.95,
        ys in prop::collection::vec(-4.0f64..4.0, 1..8),
    ) {
        let upm = ConjGaussianUpm { prior_mean: -0.2, prior_var: 2.0, noise_var: 0.6 };
        let expected = enumerated_stream_nlls(hazard, ys.len(), |a, b| {
            upm.segment_log_marginal(&ys[a..b])
        });
        let filter = MocaFilter::new(&upm, hazard);
        let mut state = filter.init_state();
        for (t, y) in ys.iter().enumerate() {
            let record = filter.step(&mut state, &dummy_x(), y).unwrap();
            let rel = (record.nll - expected[t]).abs() / expected[t].abs().max(1.0);
            prop_assert!(rel < 1e-8,
                "step {t}: filter nll {} vs enumeration {}", record.nll, expected[t]);
        }
    }
}

/// Swapping the label update ahead of the loss computation conditions the
/// prediction on the very label being scored; the enumeration oracle
/// rejects the permuted order.
#[test]
fn permuted_sub_op_order_fails_the_enumeration_oracle() {
    let upm = ConjGaussianUpm { prior_mean: 0.0, prior_var: 1.0, noise_var: 0.3 };
    let hazard = 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ys: Vec<f64> = (0..8).map(|_| rand::Rng::gen_range(&mut rng, -3.0..3.0)).collect();
    let expected = enumerated_stream_nlls(hazard, ys.len(), |a, b| {
        upm.segment_log_marginal(&ys[a..b])
    });

    let filter = MocaFilter::new(&upm, hazard);
    let x = dummy_x();
    let mut state = filter.init_state();
    let mut worst = 0.0f64;
    for (t, y) in ys.iter().enumerate() {
        filter.update_on_x(&mut state, &x).unwrap();
        // Wrong order: absorb the label into the belief first...
        filter.update_on_y(&mut state, &x, y).unwrap();
        // ...then score it against the already-conditioned belief.
        let nll = filter.nll(&state, &x, y).unwrap().item();
        filter.grow_posteriors(&mut state, &x, y);
        filter.propagate_hazard(&mut state);
        worst = worst.max((nll - expected[t]).abs() / expected[t].abs().max(1.0));
    }
    assert!(
        worst > 1e-3,
        "permuted sub-op order should visibly disagree with enumeration, worst rel dev {worst}"
    );
}

fn regression_pairs(seed: u64, len: usize) -> Vec<(Tensor, Tensor)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let x: Vec<f64> = (0..3).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
            let y = rand::Rng::gen_range(&mut rng, -2.0..2.0);
            (Tensor::vector(x), Tensor::vector(vec![y]))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn regression_posterior_is_exchangeable(seed in 0u64..1_000_000, len in 2usize..7) {
        let cfg = AlpacaConfig::new(3, 1, MlpConfig::identity(3));
        let mut store = ParameterStore::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let binding = store.bind(false);
        let model = cfg.bind(&binding);

        let pairs = regression_pairs(seed ^ 0x5150, len);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xFEED));

        let fold = |idx: &[usize]| {
            let mut post = model.prior_statistics();
            for &i in idx {
                let enc = model.encode(&pairs[i].0);
                post = model.recursive_update(&post, &enc, &pairs[i].1);
            }
            post
        };
        let fwd = fold(&(0..len).collect::<Vec<_>>());
        let perm = fold(&order);
        prop_assert!(fwd.q.data().max_abs_diff(perm.q.data()) < 1e-8);
        prop_assert!(fwd.lam_inv.data().max_abs_diff(perm.lam_inv.data()) < 1e-8);
    }

    #[test]
    fn classifier_posterior_is_exchangeable(seed in 0u64..1_000_000, len in 2usize..7) {
        let cfg = PcocConfig::new(2, 2, MlpConfig::identity(2));
        let mut store = ParameterStore::new();
        cfg.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(seed));
        let binding = store.bind(false);
        let model = cfg.bind(&binding);

        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xC1A5);
        let pairs: Vec<(Tensor, usize)> = (0..len)
            .map(|_| {
                let x: Vec<f64> =
                    (0..2).map(|_| rand::Rng::gen_range(&mut rng, -2.0..2.0)).collect();
                (Tensor::vector(x), rand::Rng::gen_range(&mut rng, 0..2usize))
            })
            .collect();
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0xBEEF));

        let fold = |idx: &[usize]| {
            let mut post = model.prior_statistics();
            for &i in idx {
                let enc = model.encode(&pairs[i].0);
                post = model.recursive_update(&post, &enc, &pairs[i].1);
            }
            post
        };
        let fwd = fold(&(0..len).collect::<Vec<_>>());
        let perm = fold(&order);
        for (a, b) in fwd.alpha.iter().zip(&perm.alpha) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for c in 0..2 {
            prop_assert!(fwd.q[c].data().max_abs_diff(perm.q[c].data()) < 1e-10);
            prop_assert!(fwd.lam[c].data().max_abs_diff(perm.lam[c].data()) < 1e-10);
        }
    }
}
