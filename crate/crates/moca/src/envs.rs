//! Switching-task benchmark environments.
//!
//! Every generator produces piecewise-stationary streams: latent task
//! parameters are redrawn with a fixed per-step probability (the hazard rate),
//! and observations within a segment are i.i.d. draws from the active task.
//! Streams are fully determined by a `u64` seed so experiments are
//! reproducible and can be paired across agents.

use std::fmt::Write as _;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{MocaError, Result};
use crate::tensor::Tensor;

/// A generated stream of `(x, y)` pairs with ground-truth segmentation.
///
/// `Y` is [`Tensor`] for regression targets and `usize` for class labels.
#[derive(Debug, Clone)]
pub struct EpisodeStream<Y> {
    /// Per-step inputs.
    pub xs: Vec<Tensor>,
    /// Per-step targets.
    pub ys: Vec<Y>,
    /// Index of the latent task active at each step; increments at every
    /// switch even if the redrawn parameters happen to be close to the old.
    pub task_ids: Vec<usize>,
    /// `true` where the task differs from the previous step. The first step is
    /// always `false`: a fresh task is not a switch.
    pub changepoints: Vec<bool>,
}

impl<Y> EpisodeStream<Y> {
    fn with_capacity(horizon: usize) -> Self {
        Self {
            xs: Vec::with_capacity(horizon),
            ys: Vec::with_capacity(horizon),
            task_ids: Vec::with_capacity(horizon),
            changepoints: Vec::with_capacity(horizon),
        }
    }

    fn push(&mut self, x: Tensor, y: Y, task_id: usize, changepoint: bool) {
        self.xs.push(x);
        self.ys.push(y);
        self.task_ids.push(task_id);
        self.changepoints.push(changepoint);
    }

    pub fn len(&self) -> usize {
        self.xs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xs.is_empty()
    }

    /// Indices of the steps flagged as changepoints.
    pub fn changepoint_steps(&self) -> Vec<usize> {
        self.changepoints
            .iter()
            .enumerate()
            .filter_map(|(t, &c)| c.then_some(t))
            .collect()
    }
}

fn write_csv_file(path: &Path, body: String) -> Result<()> {
    std::fs::write(path, body).map_err(MocaError::Io)
}

fn csv_prefix(row: &mut String, t: usize, task_id: usize, changepoint: bool, x: &Tensor) {
    let _ = write!(row, "{t},{task_id},{}", u8::from(changepoint));
    for v in x.data() {
        let _ = write!(row, ",{v}");
    }
}

impl EpisodeStream<Tensor> {
    /// Writes the stream as CSV with columns `t,task_id,changepoint,x*,y*`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("t,task_id,changepoint");
        let x_dim = self.xs.first().map_or(0, Tensor::len);
        let y_dim = self.ys.first().map_or(0, Tensor::len);
        for i in 0..x_dim {
            let _ = write!(body, ",x{i}");
        }
        for i in 0..y_dim {
            let _ = write!(body, ",y{i}");
        }
        body.push('\n');
        for t in 0..self.len() {
            csv_prefix(&mut body, t, self.task_ids[t], self.changepoints[t], &self.xs[t]);
            for v in self.ys[t].data() {
                let _ = write!(body, ",{v}");
            }
            body.push('\n');
        }
        write_csv_file(path, body)
    }
}

impl EpisodeStream<usize> {
    /// Writes the stream as CSV with columns `t,task_id,changepoint,x*,y`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut body = String::from("t,task_id,changepoint");
        let x_dim = self.xs.first().map_or(0, Tensor::len);
        for i in 0..x_dim {
            let _ = write!(body, ",x{i}");
        }
        body.push_str(",y\n");
        for t in 0..self.len() {
            csv_prefix(&mut body, t, self.task_ids[t], self.changepoints[t], &self.xs[t]);
            let _ = writeln!(body, ",{}", self.ys[t]);
        }
        write_csv_file(path, body)
    }
}

/// Scalar regression on sinusoids whose amplitude and phase are redrawn at the
/// hazard rate. Inputs are sampled uniformly, so nothing about `x` itself
/// signals a switch — only the conditional `y | x` changes.
#[derive(Debug, Clone)]
pub struct SinusoidEnv {
    pub hazard: f64,
    pub amplitude_range: (f64, f64),
    pub phase_range: (f64, f64),
    pub input_range: (f64, f64),
    pub noise_std: f64,
}

impl Default for SinusoidEnv {
    fn default() -> Self {
        Self {
            hazard: 0.2,
            amplitude_range: (0.1, 5.0),
            phase_range: (0.0, std::f64::consts::PI),
            input_range: (-5.0, 5.0),
            noise_std: 0.05_f64.sqrt(),
        }
    }
}

impl SinusoidEnv {
    /// Draws a fresh `(amplitude, phase)` task.
    pub fn sample_task(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        (
            rng.gen_range(self.amplitude_range.0..self.amplitude_range.1),
            rng.gen_range(self.phase_range.0..self.phase_range.1),
        )
    }

    /// Noise-free response of a task at input `x`.
    pub fn mean(amplitude: f64, phase: f64, x: f64) -> f64 {
        amplitude * (x + phase).sin()
    }

    /// Draws one `(x, y)` observation from the given task.
    pub fn sample_observation(
        &self,
        rng: &mut ChaCha8Rng,
        amplitude: f64,
        phase: f64,
    ) -> (f64, f64) {
        let x = rng.gen_range(self.input_range.0..self.input_range.1);
        let noise: f64 = StandardNormal.sample(rng);
        (x, Self::mean(amplitude, phase, x) + self.noise_std * noise)
    }

    /// Generates a length-`horizon` switching stream from `seed`.
    pub fn generate(&self, horizon: usize, seed: u64) -> EpisodeStream<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stream = EpisodeStream::with_capacity(horizon);
        let (mut amplitude, mut phase) = self.sample_task(&mut rng);
        let mut task_id = 0;
        for t in 0..horizon {
            let switched = t > 0 && rng.gen::<f64>() < self.hazard;
            if switched {
                (amplitude, phase) = self.sample_task(&mut rng);
                task_id += 1;
            }
            let (x, y) = self.sample_observation(&mut rng, amplitude, phase);
            stream.push(
                Tensor::vector(vec![x]),
                Tensor::vector(vec![y]),
                task_id,
                switched,
            );
        }
        stream
    }
}

/// Classification with per-task Gaussian class clusters.
///
/// Each task places one spherical cluster per class uniformly in a box; labels
/// are drawn uniformly and inputs from the matching cluster. Because the
/// cluster centres move at a switch, the input marginal `p(x)` changes too,
/// which is what makes unsupervised switch detection possible here.
#[derive(Debug, Clone)]
pub struct ClassificationEnv {
    pub hazard: f64,
    pub num_classes: usize,
    pub input_dim: usize,
    pub mean_range: (f64, f64),
    pub input_std: f64,
}

impl Default for ClassificationEnv {
    fn default() -> Self {
        Self {
            hazard: 0.2,
            num_classes: 2,
            input_dim: 2,
            mean_range: (-3.0, 3.0),
            input_std: 0.5,
        }
    }
}

impl ClassificationEnv {
    /// Draws fresh per-class cluster centres.
    pub fn sample_task(&self, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
        (0..self.num_classes)
            .map(|_| {
                Tensor::vector(
                    (0..self.input_dim)
                        .map(|_| rng.gen_range(self.mean_range.0..self.mean_range.1))
                        .collect(),
                )
            })
            .collect()
    }

    /// Draws one `(x, y)` observation from the given cluster centres.
    pub fn sample_observation(
        &self,
        rng: &mut ChaCha8Rng,
        means: &[Tensor],
    ) -> (Tensor, usize) {
        let y = rng.gen_range(0..self.num_classes);
        let x = Tensor::vector(
            means[y]
                .data()
                .iter()
                .map(|m| {
                    let noise: f64 = StandardNormal.sample(rng);
                    m + self.input_std * noise
                })
                .collect(),
        );
        (x, y)
    }

    /// Generates a length-`horizon` switching stream from `seed`.
    pub fn generate(&self, horizon: usize, seed: u64) -> EpisodeStream<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stream = EpisodeStream::with_capacity(horizon);
        let mut means = self.sample_task(&mut rng);
        let mut task_id = 0;
        for t in 0..horizon {
            let switched = t > 0 && rng.gen::<f64>() < self.hazard;
            if switched {
                means = self.sample_task(&mut rng);
                task_id += 1;
            }
            let (x, y) = self.sample_observation(&mut rng, &means);
            stream.push(x, y, task_id, switched);
        }
        stream
    }
}

/// Number of arms in the wheel bandit.
pub const WHEEL_ACTIONS: usize = 5;

/// Dimension of the encoded (context, arm) input: two context coordinates
/// followed by a one-hot arm indicator.
pub const WHEEL_INPUT_DIM: usize = 2 + WHEEL_ACTIONS;

/// Expected per-step regret of a uniformly random policy, used to normalise
/// bandit scores. The context is uniform on the unit disk and the threshold
/// δ uniform on [0, 1], so the context falls inside the low-payoff disk with
/// probability E[δ²] = 1/3. Outside, the optimal mean is 2 and a random arm
/// earns (1 + 2)/5 = 0.6; inside, the optimal mean is 1 and a random arm
/// earns 1/5. Hence (2/3)(2 − 0.6) + (1/3)(1 − 0.2) = 1.2.
pub const RANDOM_POLICY_REGRET_PER_STEP: f64 = 1.2;

/// Contextual bandit on the unit disk with a switching payoff threshold.
///
/// Five arms: arm 0 pays a mean of 1 everywhere. Arms 1–4 pay a mean of 2
/// when the context lies outside radius δ *and* in the matching quadrant
/// (numbered counter-clockwise from the (+,+) quadrant), and 0 otherwise.
/// Rewards carry Gaussian noise. δ is redrawn uniformly on [0, 1] at the
/// hazard rate, silently changing where the high-payoff arms are worth
/// pulling.
#[derive(Debug, Clone)]
pub struct WheelEnv {
    pub hazard: f64,
    pub reward_std: f64,
}

impl Default for WheelEnv {
    fn default() -> Self {
        Self {
            hazard: 0.01,
            reward_std: 0.5,
        }
    }
}

impl WheelEnv {
    /// Draws a context uniformly from the unit disk (radius √u, uniform angle).
    pub fn sample_context(rng: &mut ChaCha8Rng) -> Tensor {
        let radius = rng.gen::<f64>().sqrt();
        let angle = rng.gen::<f64>() * std::f64::consts::TAU;
        Tensor::vector(vec![radius * angle.cos(), radius * angle.sin()])
    }

    /// Arm index (1–4) matching the quadrant of `context`, counter-clockwise
    /// from (+,+). Boundary points count toward the non-negative side.
    pub fn quadrant(context: &Tensor) -> usize {
        let (x, y) = (context.item_at(0), context.item_at(1));
        match (x >= 0.0, y >= 0.0) {
            (true, true) => 1,
            (false, true) => 2,
            (false, false) => 3,
            (true, false) => 4,
        }
    }

    /// Mean payoff of `action` at `context` under threshold `delta`.
    pub fn mean_reward(context: &Tensor, delta: f64, action: usize) -> f64 {
        assert!(action < WHEEL_ACTIONS, "action {action} out of range");
        if action == 0 {
            1.0
        } else if Self::norm(context) > delta && action == Self::quadrant(context) {
            2.0
        } else {
            0.0
        }
    }

    /// Mean payoff of the best arm at `context` under threshold `delta`.
    pub fn optimal_mean(context: &Tensor, delta: f64) -> f64 {
        if Self::norm(context) > delta {
            2.0
        } else {
            1.0
        }
    }

    /// Best arm at `context` under threshold `delta`.
    pub fn optimal_action(context: &Tensor, delta: f64) -> usize {
        if Self::norm(context) > delta {
            Self::quadrant(context)
        } else {
            0
        }
    }

    fn norm(context: &Tensor) -> f64 {
        context.data().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Encodes a (context, arm) pair as `[s1, s2, one-hot(arm)]`.
    pub fn encode(context: &Tensor, action: usize) -> Tensor {
        assert!(action < WHEEL_ACTIONS, "action {action} out of range");
        let mut data = vec![0.0; WHEEL_INPUT_DIM];
        data[0] = context.item_at(0);
        data[1] = context.item_at(1);
        data[2 + action] = 1.0;
        Tensor::vector(data)
    }

    /// Generates an off-policy training log. Each step the behaviour policy
    /// pulls either a uniformly random arm or the arm matching the context's
    /// quadrant (50/50), so every arm and both payoff levels appear in the
    /// log. Inputs are encoded (context, arm) pairs; targets are rewards.
    pub fn generate_logged(&self, horizon: usize, seed: u64) -> EpisodeStream<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut stream = EpisodeStream::with_capacity(horizon);
        let mut delta = rng.gen::<f64>();
        let mut task_id = 0;
        for t in 0..horizon {
            let switched = t > 0 && rng.gen::<f64>() < self.hazard;
            if switched {
                delta = rng.gen::<f64>();
                task_id += 1;
            }
            let context = Self::sample_context(&mut rng);
            let action = if rng.gen::<bool>() {
                rng.gen_range(0..WHEEL_ACTIONS)
            } else {
                Self::quadrant(&context)
            };
            let mean = Self::mean_reward(&context, delta, action);
            let noise: f64 = StandardNormal.sample(&mut rng);
            stream.push(
                Self::encode(&context, action),
                Tensor::vector(vec![mean + self.reward_std * noise]),
                task_id,
                switched,
            );
        }
        stream
    }

    /// Starts an interactive session in which the caller chooses arms.
    pub fn start(&self, seed: u64) -> WheelSession {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let delta = rng.gen::<f64>();
        WheelSession {
            env: self.clone(),
            rng,
            delta,
            step_index: 0,
            task_id: 0,
        }
    }
}

/// One interactive play-through of the wheel bandit.
pub struct WheelSession {
    env: WheelEnv,
    rng: ChaCha8Rng,
    delta: f64,
    step_index: usize,
    task_id: usize,
}

impl WheelSession {
    /// Draws the context for the current step, first redrawing δ at the hazard
    /// rate. Returns the context and whether the task just switched.
    pub fn observe(&mut self) -> (Tensor, bool) {
        let switched = self.step_index > 0 && self.rng.gen::<f64>() < self.env.hazard;
        if switched {
            self.delta = self.rng.gen::<f64>();
            self.task_id += 1;
        }
        self.step_index += 1;
        (WheelEnv::sample_context(&mut self.rng), switched)
    }

    /// Pulls `action` in `context`; returns the noisy reward and the per-step
    /// regret (optimal mean payoff minus the pulled arm's mean payoff).
    pub fn pull(&mut self, context: &Tensor, action: usize) -> (f64, f64) {
        let mean = WheelEnv::mean_reward(context, self.delta, action);
        let regret = WheelEnv::optimal_mean(context, self.delta) - mean;
        let noise: f64 = StandardNormal.sample(&mut self.rng);
        (mean + self.env.reward_std * noise, regret)
    }

    /// Current payoff threshold δ.
    pub fn threshold(&self) -> f64 {
        self.delta
    }

    /// Index of the active task.
    pub fn task_id(&self) -> usize {
        self.task_id
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_seed_deterministic() {
        let env = SinusoidEnv::default();
        let a = env.generate(200, 7);
        let b = env.generate(200, 7);
        assert_eq!(a.xs, b.xs);
        assert_eq!(a.ys, b.ys);
        assert_eq!(a.task_ids, b.task_ids);
        assert_eq!(a.changepoints, b.changepoints);
        let c = env.generate(200, 8);
        assert_ne!(a.ys, c.ys, "different seeds must give different streams");

        let cls = ClassificationEnv::default();
        assert_eq!(cls.generate(100, 3).xs, cls.generate(100, 3).xs);

        let wheel = WheelEnv::default();
        assert_eq!(
            wheel.generate_logged(100, 5).ys,
            wheel.generate_logged(100, 5).ys
        );
    }

    #[test]
    fn changepoint_frequency_matches_hazard() {
        let env = SinusoidEnv {
            hazard: 0.1,
            ..SinusoidEnv::default()
        };
        let stream = env.generate(20_000, 42);
        assert!(!stream.changepoints[0], "first step is never a switch");
        let count = stream.changepoint_steps().len() as f64;
        // Binomial(19999, 0.1): mean 2000, sd ≈ 42.4; allow 4σ.
        assert!(
            (count - 2000.0).abs() < 170.0,
            "switch count {count} too far from expectation"
        );
        // Task ids must increment exactly at flagged switches.
        for t in 1..stream.len() {
            let diff = stream.task_ids[t] - stream.task_ids[t - 1];
            assert_eq!(diff == 1, stream.changepoints[t]);
            assert!(diff <= 1);
        }
    }

    #[test]
    fn sinusoid_noise_and_inputs_match_specification() {
        let env = SinusoidEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (amplitude, phase) = (3.0, 1.0);
        let n = 50_000;
        let mut residuals = Vec::with_capacity(n);
        let mut xs = Vec::with_capacity(n);
        for _ in 0..n {
            let (x, y) = env.sample_observation(&mut rng, amplitude, phase);
            assert!((-5.0..5.0).contains(&x));
            xs.push(x);
            residuals.push(y - SinusoidEnv::mean(amplitude, phase, x));
        }
        let mean = residuals.iter().sum::<f64>() / n as f64;
        let var = residuals.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.005, "residual mean {mean}");
        assert!((var - 0.05).abs() < 0.003, "residual variance {var}");
        let x_mean = xs.iter().sum::<f64>() / n as f64;
        let x_var = xs.iter().map(|x| (x - x_mean) * (x - x_mean)).sum::<f64>() / n as f64;
        assert!(x_mean.abs() < 0.07, "input mean {x_mean}");
        assert!((x_var - 25.0 / 3.0).abs() < 0.3, "input variance {x_var}");
    }

    #[test]
    fn sinusoid_tasks_cover_their_ranges() {
        let env = SinusoidEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut amp_lo = f64::INFINITY;
        let mut amp_hi = f64::NEG_INFINITY;
        for _ in 0..5000 {
            let (a, p) = env.sample_task(&mut rng);
            assert!((0.1..5.0).contains(&a));
            assert!((0.0..std::f64::consts::PI).contains(&p));
            amp_lo = amp_lo.min(a);
            amp_hi = amp_hi.max(a);
        }
        assert!(amp_lo < 0.2 && amp_hi > 4.9, "amplitude range poorly covered");
    }

    #[test]
    fn classification_clusters_match_specification() {
        let env = ClassificationEnv::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let means = env.sample_task(&mut rng);
        assert_eq!(means.len(), 2);
        for m in &means {
            for &v in m.data() {
                assert!((-3.0..3.0).contains(&v));
            }
        }
        let n = 20_000;
        let mut sq = 0.0;
        let mut counts = vec![0usize; env.num_classes];
        for _ in 0..n {
            let (x, y) = env.sample_observation(&mut rng, &means);
            counts[y] += 1;
            for (v, m) in x.data().iter().zip(means[y].data()) {
                sq += (v - m) * (v - m);
            }
        }
        let var = sq / (n * env.input_dim) as f64;
        assert!((var - 0.25).abs() < 0.01, "input variance {var}");
        for &c in &counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 0.5).abs() < 0.02, "class fraction {frac}");
        }
    }

    #[test]
    fn wheel_context_is_uniform_on_the_disk() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let n = 20_000;
        let mut inside_half = 0;
        let mut inside_08 = 0;
        let mut sum = [0.0; 2];
        for _ in 0..n {
            let s = WheelEnv::sample_context(&mut rng);
            let r = (s.item_at(0).powi(2) + s.item_at(1).powi(2)).sqrt();
            assert!(r <= 1.0 + 1e-12);
            if r <= 0.5 {
                inside_half += 1;
            }
            if r <= 0.8 {
                inside_08 += 1;
            }
            sum[0] += s.item_at(0);
            sum[1] += s.item_at(1);
        }
        // Uniform disk: P(r ≤ c) = c².
        let f_half = inside_half as f64 / n as f64;
        let f_08 = inside_08 as f64 / n as f64;
        assert!((f_half - 0.25).abs() < 0.013, "P(r ≤ 0.5) = {f_half}");
        assert!((f_08 - 0.64).abs() < 0.015, "P(r ≤ 0.8) = {f_08}");
        assert!((sum[0].abs() / n as f64) < 0.02);
        assert!((sum[1].abs() / n as f64) < 0.02);
    }

    #[test]
    fn wheel_payoffs_match_hand_computation() {
        let outside = Tensor::vector(vec![0.6, 0.1]); // quadrant 1, ‖s‖ ≈ 0.608
        assert_eq!(WheelEnv::quadrant(&outside), 1);
        assert_eq!(WheelEnv::mean_reward(&outside, 0.3, 0), 1.0);
        assert_eq!(WheelEnv::mean_reward(&outside, 0.3, 1), 2.0);
        assert_eq!(WheelEnv::mean_reward(&outside, 0.3, 2), 0.0);
        assert_eq!(WheelEnv::mean_reward(&outside, 0.3, 4), 0.0);
        assert_eq!(WheelEnv::optimal_mean(&outside, 0.3), 2.0);
        assert_eq!(WheelEnv::optimal_action(&outside, 0.3), 1);
        // Same context under a larger threshold: only arm 0 pays.
        assert_eq!(WheelEnv::mean_reward(&outside, 0.7, 1), 0.0);
        assert_eq!(WheelEnv::optimal_mean(&outside, 0.7), 1.0);
        assert_eq!(WheelEnv::optimal_action(&outside, 0.7), 0);

        assert_eq!(WheelEnv::quadrant(&Tensor::vector(vec![-0.2, 0.5])), 2);
        assert_eq!(WheelEnv::quadrant(&Tensor::vector(vec![-0.1, -0.9])), 3);
        assert_eq!(WheelEnv::quadrant(&Tensor::vector(vec![0.4, -0.4])), 4);

        let enc = WheelEnv::encode(&Tensor::vector(vec![0.3, -0.2]), 2);
        assert_eq!(enc.data(), &[0.3, -0.2, 0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn random_policy_regret_matches_analytic_value() {
        let env = WheelEnv {
            hazard: 0.05,
            ..WheelEnv::default()
        };
        let mut session = env.start(11);
        let mut policy_rng = ChaCha8Rng::seed_from_u64(12);
        let n = 40_000;
        let mut total = 0.0;
        for _ in 0..n {
            let (context, _) = session.observe();
            let action = policy_rng.gen_range(0..WHEEL_ACTIONS);
            let (_, regret) = session.pull(&context, action);
            total += regret;
        }
        let mean = total / n as f64;
        assert!(
            (mean - RANDOM_POLICY_REGRET_PER_STEP).abs() < 0.03,
            "random-policy regret {mean}"
        );
    }

    #[test]
    fn logged_wheel_streams_cover_all_arms() {
        let env = WheelEnv {
            hazard: 0.02,
            ..WheelEnv::default()
        };
        let stream = env.generate_logged(5000, 17);
        let mut counts = vec![0usize; WHEEL_ACTIONS];
        for x in &stream.xs {
            assert_eq!(x.len(), WHEEL_INPUT_DIM);
            let arm = x.data()[2..].iter().position(|&v| v == 1.0).unwrap();
            counts[arm] += 1;
        }
        for (arm, &c) in counts.iter().enumerate() {
            assert!(c > 100, "arm {arm} pulled only {c} times in the log");
        }
        // Rewards should show all three payoff levels through the noise.
        let ys: Vec<f64> = stream.ys.iter().map(|y| y.item_at(0)).collect();
        assert!(ys.iter().any(|&y| y > 1.6));
        assert!(ys.iter().any(|&y| y < 0.4));
    }

    #[test]
    fn csv_round_trip_has_expected_layout() {
        let dir = tempfile::tempdir().unwrap();

        let reg = SinusoidEnv::default().generate(10, 1);
        let reg_path = dir.path().join("reg.csv");
        reg.write_csv(&reg_path).unwrap();
        let text = std::fs::read_to_string(&reg_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,task_id,changepoint,x0,y0");
        assert_eq!(lines.count(), 10);

        let cls = ClassificationEnv::default().generate(10, 1);
        let cls_path = dir.path().join("cls.csv");
        cls.write_csv(&cls_path).unwrap();
        let text = std::fs::read_to_string(&cls_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "t,task_id,changepoint,x0,x1,y");
        let first: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(first[0], "0");
        assert_eq!(first[2], "0");
        assert!(first[5] == "0" || first[5] == "1");
    }
}
