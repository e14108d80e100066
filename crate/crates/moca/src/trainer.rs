//! Meta-training and evaluation loops.
//!
//! Training samples a batch of seeded streams per iteration, runs the filter
//! over each from a fresh belief, backpropagates the mean per-step negative
//! log likelihood, and takes an Adam step. Batch elements run on parallel
//! workers with thread-private graphs; their gradients are reduced in stream
//! order so runs are bit-reproducible regardless of thread count.
//!
//! Evaluation is paired: every agent sees exactly the same seeded streams, so
//! differences in the reported metrics come from the agents, not the data.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agents::{run_bandit_trial, ActionRule, AgentKind, StreamAgent};
use crate::alpaca::AlpacaConfig;
use crate::autodiff::{
    Activation, Adam, AdamConfig, Binding, MlpConfig, ParameterStore, Value,
};
use crate::envs::{ClassificationEnv, EpisodeStream, SinusoidEnv, WheelEnv, WHEEL_INPUT_DIM};
use crate::filter::{Mixture, MocaFilter, PruneConfig, Upm};
use crate::pcoc::{CategoricalPredictive, PcocConfig};
use crate::tensor::Tensor;
use crate::{MocaError, Result};

/// Which benchmark stream a model is trained on (and which model family fits
/// it: last-layer regression for the two regression tasks, the generative
/// classifier for classification).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Sinusoid,
    Wheel,
    Classification,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Sinusoid => write!(f, "sinusoid"),
            TaskKind::Wheel => write!(f, "wheel"),
            TaskKind::Classification => write!(f, "classification"),
        }
    }
}

impl FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "sinusoid" => Ok(TaskKind::Sinusoid),
            "wheel" => Ok(TaskKind::Wheel),
            "classification" => Ok(TaskKind::Classification),
            _ => Err(format!(
                "unknown task '{s}' (expected sinusoid, wheel, or classification)"
            )),
        }
    }
}

/// Everything the training loop needs. `feature_dim = 0` means an identity
/// encoder (features are the raw inputs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: TaskKind,
    /// Per-step switch probability, used both to generate streams and as the
    /// filter's hazard.
    pub hazard: f64,
    pub learning_rate: f64,
    /// Streams per iteration.
    pub batch_size: usize,
    /// Steps per stream. Rule of thumb when unconfigured: about `1 / hazard`,
    /// so most streams contain at least one switch; shorter streams inflate
    /// the effective hazard because every stream starts a fresh task.
    pub batch_length: usize,
    pub iterations: usize,
    /// Multiply the learning rate by `decay_factor` every this many
    /// iterations; 0 disables decay.
    pub decay_interval: usize,
    pub decay_factor: f64,
    pub seed: u64,
    /// Encoder hidden widths (may be empty).
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    /// Feature dimension of the encoder output; 0 selects the identity
    /// encoder.
    pub feature_dim: usize,
    pub feature_activation: Activation,
    /// Classification only.
    pub num_classes: usize,
    /// Score fixed held-out streams every this many iterations and keep the
    /// best-scoring parameters; 0 disables validation.
    pub validation_interval: usize,
    pub validation_streams: usize,
    /// Which conditioning policy generates the training loss. The filter
    /// agent trains the run-length-filtered model; any baseline kind trains
    /// the same architecture under that baseline's own conditioning (e.g.
    /// `toe` fits a pure prior, `sw5` fits the model used with a 5-step
    /// window), which is how the baselines are meant to be compared.
    #[serde(default = "default_objective")]
    pub objective: AgentKind,
}

fn default_objective() -> AgentKind {
    AgentKind::Moca
}

/// Default steps-per-stream for a hazard: about one expected segment per
/// stream start plus room for several switches.
pub fn default_batch_length(hazard: f64) -> usize {
    ((1.0 / hazard).round() as usize).max(2)
}

impl TrainConfig {
    /// Desk-scale defaults: small enough to train on one CPU core in minutes
    /// while preserving the qualitative behaviour of the full-scale setup.
    pub fn desk_default(task: TaskKind) -> TrainConfig {
        match task {
            TaskKind::Sinusoid => TrainConfig {
                task,
                hazard: 0.2,
                learning_rate: 0.02,
                batch_size: 8,
                batch_length: 35,
                iterations: 1200,
                decay_interval: 400,
                decay_factor: 0.5,
                seed: 0,
                hidden: vec![64, 64],
                hidden_activation: Activation::Relu,
                feature_dim: 16,
                feature_activation: Activation::Tanh,
                num_classes: 0,
                validation_interval: 100,
                validation_streams: 10,
                objective: AgentKind::Moca,
            },
            TaskKind::Wheel => TrainConfig {
                task,
                hazard: 0.01,
                learning_rate: 0.005,
                batch_size: 8,
                batch_length: 100,
                iterations: 600,
                decay_interval: 250,
                decay_factor: 0.5,
                seed: 0,
                hidden: vec![32, 32],
                hidden_activation: Activation::Relu,
                feature_dim: 16,
                feature_activation: Activation::Identity,
                num_classes: 0,
                validation_interval: 100,
                validation_streams: 8,
                objective: AgentKind::Moca,
            },
            TaskKind::Classification => TrainConfig {
                task,
                hazard: 0.2,
                learning_rate: 0.02,
                batch_size: 8,
                batch_length: 30,
                iterations: 300,
                decay_interval: 100,
                decay_factor: 0.5,
                seed: 0,
                hidden: vec![],
                hidden_activation: Activation::Relu,
                feature_dim: 0,
                feature_activation: Activation::Identity,
                num_classes: 2,
                validation_interval: 50,
                validation_streams: 8,
                objective: AgentKind::Moca,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MocaError::Contract(msg));
        if !(self.hazard > 0.0 && self.hazard < 1.0) {
            return bad(format!("hazard must lie in (0, 1), got {}", self.hazard));
        }
        if self.batch_length < 2 {
            return bad(format!("batch_length must be at least 2, got {}", self.batch_length));
        }
        if self.iterations < 1 {
            return bad("iterations must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1".into());
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return bad(format!("learning_rate must be finite and non-negative, got {}", self.learning_rate));
        }
        if self.decay_interval > 0 && !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return bad(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.task == TaskKind::Classification && self.num_classes < 2 {
            return bad(format!("classification needs at least 2 classes, got {}", self.num_classes));
        }
        if self.validation_interval > 0 && self.validation_streams == 0 {
            return bad("validation enabled but validation_streams is 0".into());
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        match self.task {
            TaskKind::Sinusoid => 1,
            TaskKind::Wheel => WHEEL_INPUT_DIM,
            TaskKind::Classification => 2,
        }
    }

    fn encoder(&self) -> MlpConfig {
        if self.feature_dim == 0 {
            MlpConfig::identity(self.input_dim())
        } else {
            let mut widths = self.hidden.clone();
            let mut acts = vec![self.hidden_activation; self.hidden.len()];
            widths.push(self.feature_dim);
            acts.push(self.feature_activation);
            MlpConfig::new(self.input_dim(), widths, acts)
        }
    }

    /// The model family and architecture this config trains.
    pub fn model_spec(&self) -> ModelSpec {
        match self.task {
            TaskKind::Sinusoid => ModelSpec::Alpaca(AlpacaConfig::new(1, 1, self.encoder())),
            TaskKind::Wheel => {
                ModelSpec::Alpaca(AlpacaConfig::new(WHEEL_INPUT_DIM, 1, self.encoder()))
            }
            TaskKind::Classification => {
                ModelSpec::Pcoc(PcocConfig::new(2, self.num_classes, self.encoder()))
            }
        }
    }

    /// Fresh parameters for this architecture, seeded from `seed`.
    pub fn init_params(&self) -> ParameterStore {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        match self.model_spec() {
            ModelSpec::Alpaca(m) => m.init_params(&mut store, &mut rng),
            ModelSpec::Pcoc(m) => m.init_params(&mut store, &mut rng),
        }
        store
    }
}

/// Architecture resolved from a [`TrainConfig`].
pub enum ModelSpec {
    Alpaca(AlpacaConfig),
    Pcoc(PcocConfig),
}

/// One row of the training curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub mean_nll: f64,
    pub lr: f64,
    pub wall_time_ms: u128,
}

/// Output of [`train`].
pub struct TrainResult {
    /// Best-validation parameters when validation is enabled, otherwise the
    /// final parameters.
    pub params: ParameterStore,
    pub final_params: ParameterStore,
    pub curve: Vec<CurveRow>,
    /// `(iteration, mean validation NLL)` pairs.
    pub validation: Vec<(usize, f64)>,
    /// Iteration whose parameters are in `params` (0 = initialization).
    pub best_iteration: usize,
}

fn sinusoid_env(hazard: f64) -> SinusoidEnv {
    SinusoidEnv { hazard, ..SinusoidEnv::default() }
}

fn wheel_env(hazard: f64) -> WheelEnv {
    WheelEnv { hazard, ..WheelEnv::default() }
}

fn classification_env(hazard: f64, num_classes: usize) -> ClassificationEnv {
    ClassificationEnv { hazard, num_classes, ..ClassificationEnv::default() }
}

/// Meta-trains the model described by `cfg`, returning the learned
/// parameters and the per-iteration loss curve.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let store = cfg.init_params();
    match cfg.model_spec() {
        ModelSpec::Alpaca(mcfg) => {
            let horizon = cfg.batch_length;
            let task = cfg.task;
            let hazard = cfg.hazard;
            let gen = move |seed: u64| -> EpisodeStream<Tensor> {
                match task {
                    TaskKind::Sinusoid => sinusoid_env(hazard).generate(horizon, seed),
                    TaskKind::Wheel => wheel_env(hazard).generate_logged(horizon, seed),
                    TaskKind::Classification => unreachable!("classification uses the classifier"),
                }
            };
            train_loop(cfg, store, &|b: &Binding| mcfg.bind(b), &gen)
        }
        ModelSpec::Pcoc(mcfg) => {
            let env = classification_env(cfg.hazard, cfg.num_classes);
            let horizon = cfg.batch_length;
            let gen = move |seed: u64| env.generate(horizon, seed);
            train_loop(cfg, store, &|b: &Binding| mcfg.bind(b), &gen)
        }
    }
}

/// Seed namespace separating validation streams from training streams.
const VALIDATION_SEED_SALT: u64 = 0x76a1_15cf_0d1e_77a3;

/// Per-step losses of one conditioning policy over one stream, built on the
/// live graph so they can be backpropagated. Returns the loss nodes and the
/// plain NLL sum. The filter objective runs the full run-length filter;
/// baseline objectives condition the posterior exactly the way the matching
/// [`StreamAgent`] does (verified against it in tests), so training a model
/// under `sw5` optimizes precisely what the `sw5` agent is measured on.
fn stream_losses<U: Upm>(
    upm: &U,
    objective: AgentKind,
    hazard: f64,
    stream: &EpisodeStream<U::Label>,
) -> Result<(Vec<Value>, f64)>
where
    U::Label: Clone,
{
    let mut losses = Vec::with_capacity(stream.len());
    let mut nll_sum = 0.0;
    let mut push = |loss: Value, nll: f64, t: usize| -> Result<()> {
        if !nll.is_finite() {
            return Err(MocaError::Numerical(format!("non-finite loss {nll} at step {t}")));
        }
        nll_sum += nll;
        losses.push(loss);
        Ok(())
    };
    match objective {
        AgentKind::Moca => {
            let filter = MocaFilter::new(upm, hazard);
            let mut state = filter.init_state();
            for t in 0..stream.len() {
                let record = filter
                    .step(&mut state, &stream.xs[t], &stream.ys[t])
                    .map_err(|e| MocaError::Numerical(format!("step {t}: {e}")))?;
                push(record.loss, record.nll, t)?;
            }
        }
        AgentKind::TrainOnEverything => {
            let prior = upm.prior_statistics();
            for t in 0..stream.len() {
                let enc = upm.encode(&stream.xs[t]);
                let lp = upm.log_predictive_y(&prior, &enc, &stream.ys[t])?;
                push(lp.scale(-1.0), -lp.item(), t)?;
            }
        }
        AgentKind::SlidingWindow(n) => {
            let encs: Vec<U::Encoded> =
                stream.xs.iter().map(|x| upm.encode(x)).collect();
            for t in 0..stream.len() {
                let mut post = upm.prior_statistics();
                for u in t.saturating_sub(n)..t {
                    post = upm.recursive_update(&post, &encs[u], &stream.ys[u]);
                }
                let lp = upm.log_predictive_y(&post, &encs[t], &stream.ys[t])?;
                push(lp.scale(-1.0), -lp.item(), t)?;
            }
        }
        AgentKind::ConditionOnEverything | AgentKind::Oracle => {
            let mut post = upm.prior_statistics();
            for t in 0..stream.len() {
                if objective == AgentKind::Oracle && stream.changepoints[t] {
                    post = upm.prior_statistics();
                }
                let enc = upm.encode(&stream.xs[t]);
                let lp = upm.log_predictive_y(&post, &enc, &stream.ys[t])?;
                push(lp.scale(-1.0), -lp.item(), t)?;
                post = upm.recursive_update(&post, &enc, &stream.ys[t]);
            }
        }
    }
    Ok((losses, nll_sum))
}

fn train_loop<U, FB, FG>(
    cfg: &TrainConfig,
    mut store: ParameterStore,
    bind: &FB,
    gen: &FG,
) -> Result<TrainResult>
where
    U: Upm,
    U::Label: Clone,
    FB: Fn(&Binding) -> U + Sync,
    FG: Fn(u64) -> EpisodeStream<U::Label> + Sync,
{
    let mut adam = {
        let mut acfg = AdamConfig::new(cfg.learning_rate);
        if cfg.decay_interval > 0 {
            acfg = acfg.with_decay(cfg.decay_interval as u64, cfg.decay_factor);
        }
        Adam::new(acfg)
    };
    let mut seed_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let validation_seeds: Vec<u64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ VALIDATION_SEED_SALT);
        (0..cfg.validation_streams).map(|_| rng.gen()).collect()
    };

    let started = Instant::now();
    let mut curve = Vec::with_capacity(cfg.iterations);
    let mut validation = Vec::new();
    let mut best: Option<(f64, usize, ParameterStore)> = None;

    for iteration in 1..=cfg.iterations {
        let seeds: Vec<u64> = (0..cfg.batch_size).map(|_| seed_rng.gen()).collect();
        let denom = (cfg.batch_size * cfg.batch_length) as f64;

        // One stream per worker; each builds a private graph over shared
        // parameter tensors and returns plain gradient tensors.
        let per_stream: Vec<(Vec<(String, Tensor)>, f64)> = seeds
            .par_iter()
            .map(|&seed| -> Result<(Vec<(String, Tensor)>, f64)> {
                let binding = store.bind(true);
                let model = bind(&binding);
                let stream = gen(seed);
                let (losses, nll_sum) = stream_losses(&model, cfg.objective, cfg.hazard, &stream)
                    .map_err(|e| {
                        MocaError::Numerical(format!(
                            "iteration {iteration}, stream seed {seed}: {e}"
                        ))
                    })?;
                let total = Value::stack_scalars(&losses).sum().scale(1.0 / denom);
                total.backward();
                Ok((binding.take_grads(), nll_sum))
            })
            .collect::<Result<Vec<_>>>()?;

        store.zero_grads();
        let mut nll_total = 0.0;
        for (grads, nll_sum) in &per_stream {
            for (name, grad) in grads {
                store.accumulate_grad(name, grad);
            }
            nll_total += nll_sum;
        }
        let lr = adam.current_lr();
        adam.step(&mut store);

        curve.push(CurveRow {
            iteration,
            mean_nll: nll_total / denom,
            lr,
            wall_time_ms: started.elapsed().as_millis(),
        });

        let validate_now = cfg.validation_interval > 0
            && (iteration % cfg.validation_interval == 0 || iteration == cfg.iterations);
        if validate_now {
            let score = validation_nll(cfg, &store, bind, gen, &validation_seeds)?;
            validation.push((iteration, score));
            let improved = best.as_ref().map_or(true, |(b, _, _)| score < *b);
            if improved {
                best = Some((score, iteration, store.clone()));
            }
        }
    }

    let final_params = store;
    let (params, best_iteration) = match best {
        Some((_, iteration, params)) => (params, iteration),
        None => (final_params.clone(), cfg.iterations),
    };
    Ok(TrainResult { params, final_params, curve, validation, best_iteration })
}

/// Mean per-step NLL of the training objective over held-out seeded streams,
/// without building gradients.
fn validation_nll<U, FB, FG>(
    cfg: &TrainConfig,
    store: &ParameterStore,
    bind: &FB,
    gen: &FG,
    seeds: &[u64],
) -> Result<f64>
where
    U: Upm,
    U::Label: Clone,
    FB: Fn(&Binding) -> U + Sync,
    FG: Fn(u64) -> EpisodeStream<U::Label> + Sync,
{
    let totals: Vec<f64> = seeds
        .par_iter()
        .map(|&seed| -> Result<f64> {
            let binding = store.bind(false);
            let model = bind(&binding);
            let stream = gen(seed);
            let (_, nll_sum) = stream_losses(&model, cfg.objective, cfg.hazard, &stream)?;
            Ok(nll_sum / stream.len() as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(totals.iter().sum::<f64>() / totals.len().max(1) as f64)
}

// -- evaluation -------------------------------------------------------------

/// An agent to evaluate: a conditioning policy, optionally given the true
/// changepoints at test time (filter agent only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AgentSpec {
    pub kind: AgentKind,
    pub supervised: bool,
}

impl AgentSpec {
    pub fn plain(kind: AgentKind) -> Self {
        AgentSpec { kind, supervised: false }
    }
}

impl fmt::Display for AgentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.supervised {
            write!(f, "{}+sup", self.kind)
        } else {
            write!(f, "{}", self.kind)
        }
    }
}

impl FromStr for AgentSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, supervised) = match s.strip_suffix("+sup") {
            Some(prefix) => (prefix, true),
            None => (s, false),
        };
        let kind: AgentKind = kind.parse()?;
        if supervised && kind != AgentKind::Moca {
            return Err(format!(
                "'{s}': changepoint supervision only applies to the filter agent"
            ));
        }
        Ok(AgentSpec { kind, supervised })
    }
}

/// Shared evaluation protocol.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub hazard: f64,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub prune: PruneConfig,
    /// Fraction of true changepoints revealed to supervised agents
    /// (independent per changepoint, deterministic per trial). 1.0 reveals
    /// every changepoint.
    pub supervision_fraction: f64,
}

impl EvalConfig {
    /// The full-scale test protocol: 200 streams of horizon 400.
    pub fn standard(hazard: f64, seed: u64) -> Self {
        EvalConfig {
            hazard,
            horizon: 400,
            trials: 200,
            seed,
            prune: PruneConfig::default(),
            supervision_fraction: 1.0,
        }
    }
}

/// Per-agent evaluation summary. Confidence intervals are
/// `1.96 · sd / √trials`.
#[derive(Debug, Clone)]
pub struct AgentRow {
    pub label: String,
    pub mean_nll: f64,
    pub nll_ci95: f64,
    /// Classification only.
    pub accuracy: Option<f64>,
    pub accuracy_ci95: Option<f64>,
    pub per_trial_nll: Vec<f64>,
    pub per_trial_accuracy: Option<Vec<f64>>,
}

/// Seed namespace for the supervision-thinning draws.
const SUPERVISION_SEED_SALT: u64 = 0x51b3_8cc1_a90f_2e64;

/// Which changepoints a supervised agent is told about: each true flag
/// survives independently with probability `supervision_fraction`, with
/// draws fixed by the trial index.
fn revealed_changepoints(eval: &EvalConfig, trial: usize, changepoints: &[bool]) -> Vec<bool> {
    if eval.supervision_fraction >= 1.0 {
        return changepoints.to_vec();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(eval.seed ^ SUPERVISION_SEED_SALT ^ trial as u64);
    changepoints
        .iter()
        .map(|&c| c && rng.gen::<f64>() < eval.supervision_fraction)
        .collect()
}

/// Sample mean and 95% confidence half-width.
pub fn mean_and_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, f64::INFINITY);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Evaluates every agent on the same seeded streams; returns one row per
/// agent with paired per-trial metrics.
pub fn evaluate(
    cfg: &TrainConfig,
    store: &ParameterStore,
    eval: &EvalConfig,
    agents: &[AgentSpec],
) -> Result<Vec<AgentRow>> {
    match cfg.model_spec() {
        ModelSpec::Alpaca(mcfg) => {
            let task = cfg.task;
            let hazard = eval.hazard;
            let horizon = eval.horizon;
            let gen = move |seed: u64| -> EpisodeStream<Tensor> {
                match task {
                    TaskKind::Sinusoid => sinusoid_env(hazard).generate(horizon, seed),
                    TaskKind::Wheel => wheel_env(hazard).generate_logged(horizon, seed),
                    TaskKind::Classification => unreachable!(),
                }
            };
            let per_trial: Vec<Vec<f64>> = (0..eval.trials)
                .into_par_iter()
                .map(|trial| -> Result<Vec<f64>> {
                    let binding = store.bind(false);
                    let model = mcfg.bind(&binding);
                    let stream = gen(eval.seed + trial as u64);
                    agents
                        .iter()
                        .map(|spec| {
                            let mut agent = make_agent(&model, spec, eval);
                            let flags = if spec.supervised {
                                revealed_changepoints(eval, trial, &stream.changepoints)
                            } else {
                                stream.changepoints.clone()
                            };
                            let mut total = 0.0;
                            for t in 0..stream.len() {
                                total += agent
                                    .step(&stream.xs[t], &stream.ys[t], flags[t], false)?
                                    .nll;
                            }
                            Ok(total / stream.len() as f64)
                        })
                        .collect()
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(agents, &per_trial, None))
        }
        ModelSpec::Pcoc(mcfg) => {
            let env = classification_env(eval.hazard, cfg.num_classes);
            let horizon = eval.horizon;
            let results: Vec<(Vec<f64>, Vec<f64>)> = (0..eval.trials)
                .into_par_iter()
                .map(|trial| -> Result<(Vec<f64>, Vec<f64>)> {
                    let binding = store.bind(false);
                    let model = mcfg.bind(&binding);
                    let stream = env.generate(horizon, eval.seed + trial as u64);
                    let mut nlls = Vec::with_capacity(agents.len());
                    let mut accs = Vec::with_capacity(agents.len());
                    for spec in agents {
                        let mut agent = make_agent(&model, spec, eval);
                        let flags = if spec.supervised {
                            revealed_changepoints(eval, trial, &stream.changepoints)
                        } else {
                            stream.changepoints.clone()
                        };
                        let mut total = 0.0;
                        let mut correct = 0usize;
                        for t in 0..stream.len() {
                            let out = agent.step(
                                &stream.xs[t],
                                &stream.ys[t],
                                flags[t],
                                true,
                            )?;
                            total += out.nll;
                            let mix = out.predictive.expect("predictive was requested");
                            if mixture_class_argmax(&mix) == stream.ys[t] {
                                correct += 1;
                            }
                        }
                        nlls.push(total / stream.len() as f64);
                        accs.push(correct as f64 / stream.len() as f64);
                    }
                    Ok((nlls, accs))
                })
                .collect::<Result<Vec<_>>>()?;
            let per_trial: Vec<Vec<f64>> = results.iter().map(|(n, _)| n.clone()).collect();
            let per_trial_acc: Vec<Vec<f64>> = results.iter().map(|(_, a)| a.clone()).collect();
            Ok(summarize(agents, &per_trial, Some(&per_trial_acc)))
        }
    }
}

fn make_agent<'a, U: Upm>(
    model: &'a U,
    spec: &AgentSpec,
    eval: &EvalConfig,
) -> StreamAgent<'a, U>
where
    U::Label: Clone,
{
    let prune = (spec.kind == AgentKind::Moca).then_some(eval.prune);
    StreamAgent::new(model, spec.kind, eval.hazard, prune, spec.supervised)
}

/// Most probable class under a belief-weighted mixture of categorical
/// predictives.
pub fn mixture_class_argmax(mix: &Mixture<CategoricalPredictive>) -> usize {
    let classes = mix.components.first().map_or(0, |c| c.log_probs.len());
    let mut best = (0, f64::NEG_INFINITY);
    for c in 0..classes {
        let p: f64 = mix
            .weights
            .iter()
            .zip(&mix.components)
            .map(|(w, comp)| w * comp.log_probs[c].exp())
            .sum();
        if p > best.1 {
            best = (c, p);
        }
    }
    best.0
}

fn summarize(
    agents: &[AgentSpec],
    per_trial_nll: &[Vec<f64>],
    per_trial_acc: Option<&[Vec<f64>]>,
) -> Vec<AgentRow> {
    agents
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            let nlls: Vec<f64> = per_trial_nll.iter().map(|t| t[i]).collect();
            let (mean_nll, nll_ci95) = mean_and_ci95(&nlls);
            let accs: Option<Vec<f64>> =
                per_trial_acc.map(|acc| acc.iter().map(|t| t[i]).collect());
            let (accuracy, accuracy_ci95) = match &accs {
                Some(a) => {
                    let (m, c) = mean_and_ci95(a);
                    (Some(m), Some(c))
                }
                None => (None, None),
            };
            AgentRow {
                label: spec.to_string(),
                mean_nll,
                nll_ci95,
                accuracy,
                accuracy_ci95,
                per_trial_nll: nlls,
                per_trial_accuracy: accs,
            }
        })
        .collect()
}

// -- changepoint detection --------------------------------------------------

/// A changepoint is "detected" when the MAP run length falls below this many
/// observations.
pub const DETECTION_MAP_THRESHOLD: usize = 5;

/// How far past a changepoint the detector may look before giving up on it.
pub const DETECTION_WINDOW: usize = 25;

/// One true changepoint and what happened to it.
#[derive(Debug, Clone, Copy)]
pub struct DetectionEvent {
    /// Observations from the switch until detection, counting the switch
    /// step itself as 1; `None` if never detected inside the window.
    pub delay: Option<usize>,
    /// Steps remaining in the stream from the switch step (inclusive), which
    /// bounds the observable delay.
    pub room: usize,
}

/// Detection delays pooled over one or more streams.
#[derive(Debug, Clone, Default)]
pub struct DetectionStats {
    pub events: Vec<DetectionEvent>,
}

impl DetectionStats {
    /// Scans a per-step MAP run-length series for drops below `threshold`
    /// after each flagged switch. A later switch inside the window can
    /// trigger the drop; it still counts for the earlier one — at high
    /// hazard rates, demanding isolated switches would discard most events.
    pub fn from_series(
        map_series: &[usize],
        changepoints: &[bool],
        threshold: usize,
        window: usize,
    ) -> DetectionStats {
        assert_eq!(map_series.len(), changepoints.len(), "series lengths differ");
        let len = map_series.len();
        let mut events = Vec::new();
        for t in 0..len {
            if !changepoints[t] {
                continue;
            }
            let delay = (t..len.min(t + window))
                .find(|&s| map_series[s] < threshold)
                .map(|s| s - t + 1);
            events.push(DetectionEvent { delay, room: len - t });
        }
        DetectionStats { events }
    }

    pub fn merge(&mut self, other: &DetectionStats) {
        self.events.extend_from_slice(&other.events);
    }

    pub fn num_events(&self) -> usize {
        self.events.len()
    }

    /// Fraction of changepoints detected within `d` observations, among
    /// those with at least `d` observations left in the stream.
    pub fn fraction_within(&self, d: usize) -> f64 {
        let eligible: Vec<&DetectionEvent> =
            self.events.iter().filter(|e| e.room >= d).collect();
        if eligible.is_empty() {
            return f64::NAN;
        }
        let hit = eligible.iter().filter(|e| e.delay.is_some_and(|x| x <= d)).count();
        hit as f64 / eligible.len() as f64
    }

    /// Delay histogram over detected changepoints.
    pub fn histogram(&self) -> BTreeMap<usize, usize> {
        let mut hist = BTreeMap::new();
        for event in &self.events {
            if let Some(d) = event.delay {
                *hist.entry(d).or_insert(0) += 1;
            }
        }
        hist
    }
}

/// Runs the filter agent over seeded streams and pools detection statistics
/// for every true changepoint. With `supervised` set this measures the
/// supervised filter instead (all delays collapse to 1 when supervision
/// works).
pub fn changepoint_detection_stats(
    cfg: &TrainConfig,
    store: &ParameterStore,
    eval: &EvalConfig,
    supervised: bool,
) -> Result<DetectionStats> {
    let spec = AgentSpec { kind: AgentKind::Moca, supervised };
    match cfg.model_spec() {
        ModelSpec::Alpaca(mcfg) => {
            let task = cfg.task;
            let hazard = eval.hazard;
            let horizon = eval.horizon;
            let gen = move |seed: u64| -> EpisodeStream<Tensor> {
                match task {
                    TaskKind::Sinusoid => sinusoid_env(hazard).generate(horizon, seed),
                    TaskKind::Wheel => wheel_env(hazard).generate_logged(horizon, seed),
                    TaskKind::Classification => unreachable!(),
                }
            };
            let per_stream: Vec<DetectionStats> = (0..eval.trials)
                .into_par_iter()
                .map(|trial| -> Result<DetectionStats> {
                    let binding = store.bind(false);
                    let model = mcfg.bind(&binding);
                    let stream = gen(eval.seed + trial as u64);
                    let mut agent = make_agent(&model, &spec, eval);
                    let mut maps = Vec::with_capacity(stream.len());
                    for t in 0..stream.len() {
                        let out = agent.step(
                            &stream.xs[t],
                            &stream.ys[t],
                            stream.changepoints[t],
                            false,
                        )?;
                        maps.push(out.map_run_length.expect("filter agent reports MAP"));
                    }
                    Ok(DetectionStats::from_series(
                        &maps,
                        &stream.changepoints,
                        DETECTION_MAP_THRESHOLD,
                        DETECTION_WINDOW,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut stats = DetectionStats::default();
            for s in &per_stream {
                stats.merge(s);
            }
            Ok(stats)
        }
        ModelSpec::Pcoc(mcfg) => {
            let env = classification_env(eval.hazard, cfg.num_classes);
            let horizon = eval.horizon;
            let per_stream: Vec<DetectionStats> = (0..eval.trials)
                .into_par_iter()
                .map(|trial| -> Result<DetectionStats> {
                    let binding = store.bind(false);
                    let model = mcfg.bind(&binding);
                    let stream = env.generate(horizon, eval.seed + trial as u64);
                    let mut agent = make_agent(&model, &spec, eval);
                    let mut maps = Vec::with_capacity(stream.len());
                    for t in 0..stream.len() {
                        let out = agent.step(
                            &stream.xs[t],
                            &stream.ys[t],
                            stream.changepoints[t],
                            false,
                        )?;
                        maps.push(out.map_run_length.expect("filter agent reports MAP"));
                    }
                    Ok(DetectionStats::from_series(
                        &maps,
                        &stream.changepoints,
                        DETECTION_MAP_THRESHOLD,
                        DETECTION_WINDOW,
                    ))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut stats = DetectionStats::default();
            for s in &per_stream {
                stats.merge(s);
            }
            Ok(stats)
        }
    }
}

// -- bandit evaluation ------------------------------------------------------

/// Bandit evaluation protocol.
#[derive(Debug, Clone)]
pub struct BanditEvalConfig {
    pub hazard: f64,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    pub rule: ActionRule,
    pub prune: PruneConfig,
}

impl BanditEvalConfig {
    /// The full-scale protocol: 10 trials of length 1000, Thompson sampling.
    pub fn standard(hazard: f64, seed: u64) -> Self {
        BanditEvalConfig {
            hazard,
            horizon: 1000,
            trials: 10,
            seed,
            rule: ActionRule::Thompson,
            prune: PruneConfig::default(),
        }
    }
}

/// Per-agent bandit summary over paired trials.
#[derive(Debug, Clone)]
pub struct BanditRow {
    pub label: String,
    pub mean_regret: f64,
    pub regret_ci95: f64,
    /// Mean per-step regret as percent of the analytic random policy.
    pub percent_of_random: f64,
    pub percent_ci95: f64,
    pub per_trial_percent: Vec<f64>,
}

/// Environment and policy seeds for trial `i` of a bandit evaluation, so a
/// single trial can be replayed outside the summary loop.
pub fn bandit_trial_seeds(base: u64, trial: usize) -> (u64, u64) {
    let env_seed = base + trial as u64;
    let policy_seed = base ^ 0x9e37_79b9_7f4a_7c15 ^ (trial as u64).rotate_left(17);
    (env_seed, policy_seed)
}

/// Plays seeded bandit trials for every agent kind; trials are paired (same
/// environment seeds) across agents.
pub fn bandit_evaluate(
    cfg: &TrainConfig,
    store: &ParameterStore,
    bcfg: &BanditEvalConfig,
    agents: &[AgentKind],
) -> Result<Vec<BanditRow>> {
    let mcfg = match cfg.model_spec() {
        ModelSpec::Alpaca(m) => m,
        ModelSpec::Pcoc(_) => {
            return Err(MocaError::Contract(
                "bandit evaluation needs a reward-regression model".into(),
            ))
        }
    };
    let env = wheel_env(bcfg.hazard);
    let per_trial: Vec<Vec<(f64, f64)>> = (0..bcfg.trials)
        .into_par_iter()
        .map(|trial| -> Result<Vec<(f64, f64)>> {
            let binding = store.bind(false);
            let model = mcfg.bind(&binding);
            let (env_seed, policy_seed) = bandit_trial_seeds(bcfg.seed, trial);
            agents
                .iter()
                .map(|&kind| {
                    let prune = (kind == AgentKind::Moca).then_some(bcfg.prune);
                    let metrics = run_bandit_trial(
                        &model,
                        kind,
                        bcfg.hazard,
                        prune,
                        &env,
                        bcfg.rule,
                        bcfg.horizon,
                        env_seed,
                        policy_seed,
                    )?;
                    Ok((metrics.mean_regret, metrics.percent_of_random))
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(agents
        .iter()
        .enumerate()
        .map(|(i, kind)| {
            let regrets: Vec<f64> = per_trial.iter().map(|t| t[i].0).collect();
            let percents: Vec<f64> = per_trial.iter().map(|t| t[i].1).collect();
            let (mean_regret, regret_ci95) = mean_and_ci95(&regrets);
            let (percent_of_random, percent_ci95) = mean_and_ci95(&percents);
            BanditRow {
                label: kind.to_string(),
                mean_regret,
                regret_ci95,
                percent_of_random,
                percent_ci95,
                per_trial_percent: percents,
            }
        })
        .collect())
}
