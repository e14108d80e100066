//! Prediction-time agents built on one shared posterior-update model.
//!
//! Every agent answers the same question — what is the predictive density of
//! the next observation — but conditions on a different slice of the history:
//!
//! * **moca** — the run-length filter's mixture over all hypotheses;
//! * **sw&lt;n&gt;** — the posterior refolded over exactly the last `n` pairs;
//! * **coe** (condition on everything) — one posterior over the full history,
//!   never reset;
//! * **toe** (train on everything) — the prior predictive at every step,
//!   i.e. a model that never adapts online;
//! * **oracle** — a posterior reset at every true task switch.
//!
//! All agents share the *same* bound model instance and parameters; they
//! differ only in which observations reach `recursive_update`. The module
//! also provides posterior-sampling action selection for the wheel bandit
//! and a self-contained bandit trial runner with regret accounting.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::alpaca::{Alpaca, AlpacaPosterior};
use crate::envs::{WheelEnv, RANDOM_POLICY_REGRET_PER_STEP, WHEEL_ACTIONS};
use crate::filter::{FilterState, Mixture, MocaFilter, PruneConfig, Supervision, Upm};
use crate::tensor::Tensor;
use crate::{MocaError, Result};

/// Which conditioning policy an agent uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum AgentKind {
    Moca,
    /// Condition on exactly the last `n` observation pairs.
    SlidingWindow(usize),
    /// Never condition: prior predictive everywhere.
    TrainOnEverything,
    /// Condition on the whole history, never reset.
    ConditionOnEverything,
    /// Reset the conditioning set at every true changepoint.
    Oracle,
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::Moca => write!(f, "moca"),
            AgentKind::SlidingWindow(n) => write!(f, "sw{n}"),
            AgentKind::TrainOnEverything => write!(f, "toe"),
            AgentKind::ConditionOnEverything => write!(f, "coe"),
            AgentKind::Oracle => write!(f, "oracle"),
        }
    }
}

impl FromStr for AgentKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "moca" => Ok(AgentKind::Moca),
            "toe" => Ok(AgentKind::TrainOnEverything),
            "coe" => Ok(AgentKind::ConditionOnEverything),
            "oracle" => Ok(AgentKind::Oracle),
            _ => s
                .strip_prefix("sw")
                .and_then(|n| n.parse().ok())
                .map(AgentKind::SlidingWindow)
                .ok_or_else(|| {
                    format!("unknown agent '{s}' (expected moca, sw<N>, toe, coe, or oracle)")
                }),
        }
    }
}

impl From<AgentKind> for String {
    fn from(kind: AgentKind) -> String {
        kind.to_string()
    }
}

impl TryFrom<String> for AgentKind {
    type Error = String;

    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

/// Outcome of one agent step.
pub struct AgentStep<Pred> {
    /// Negative log predictive density of `y` before the pair was absorbed.
    pub nll: f64,
    /// MAP run length after the full update (filter agents only).
    pub map_run_length: Option<usize>,
    /// MAP run length after input conditioning but before the label arrived
    /// (filter agents whose model has an input model).
    pub map_after_x: Option<usize>,
    /// Belief-weighted predictive at `x` before the pair was absorbed, when
    /// requested. Baselines report a single component with weight 1.
    pub predictive: Option<Mixture<Pred>>,
}

/// One agent consuming one stream. Call [`StreamAgent::step`] once per
/// `(x, y)` pair, in order; each call scores the pair *before* absorbing it.
pub enum StreamAgent<'a, U: Upm> {
    Moca {
        filter: MocaFilter<&'a U>,
        state: FilterState<U::Posterior>,
        prune: Option<PruneConfig>,
        /// Collapse the belief to run length 0 at every true changepoint
        /// (full test-time supervision).
        supervise: bool,
    },
    Window {
        upm: &'a U,
        n: usize,
        history: VecDeque<(U::Encoded, U::Label)>,
    },
    Everything {
        upm: &'a U,
        posterior: U::Posterior,
    },
    Prior {
        upm: &'a U,
        prior: U::Posterior,
    },
    Oracle {
        upm: &'a U,
        posterior: U::Posterior,
    },
}

impl<'a, U: Upm> StreamAgent<'a, U>
where
    U::Label: Clone,
{
    /// Builds an agent of the given kind around a shared model.
    ///
    /// `hazard` and `prune` apply to the filter agent only; `supervise` makes
    /// the filter agent consume true changepoint flags (it is meaningless for
    /// the baselines — the oracle already conditions on the truth).
    pub fn new(
        upm: &'a U,
        kind: AgentKind,
        hazard: f64,
        prune: Option<PruneConfig>,
        supervise: bool,
    ) -> Self {
        match kind {
            AgentKind::Moca => {
                let filter = MocaFilter::new(upm, hazard);
                let state = filter.init_state();
                StreamAgent::Moca { filter, state, prune, supervise }
            }
            AgentKind::SlidingWindow(n) => StreamAgent::Window {
                upm,
                n,
                history: VecDeque::with_capacity(n + 1),
            },
            AgentKind::ConditionOnEverything => StreamAgent::Everything {
                upm,
                posterior: upm.prior_statistics(),
            },
            AgentKind::TrainOnEverything => StreamAgent::Prior {
                upm,
                prior: upm.prior_statistics(),
            },
            AgentKind::Oracle => StreamAgent::Oracle {
                upm,
                posterior: upm.prior_statistics(),
            },
        }
    }

    pub fn kind(&self) -> AgentKind {
        match self {
            StreamAgent::Moca { .. } => AgentKind::Moca,
            StreamAgent::Window { n, .. } => AgentKind::SlidingWindow(*n),
            StreamAgent::Everything { .. } => AgentKind::ConditionOnEverything,
            StreamAgent::Prior { .. } => AgentKind::TrainOnEverything,
            StreamAgent::Oracle { .. } => AgentKind::Oracle,
        }
    }

    /// Scores `(x, y)` under the agent's current conditioning set, then
    /// absorbs the pair. `changepoint` is the ground-truth switch flag for
    /// this step (used by the oracle and by supervised filtering; others
    /// ignore it). Set `want_predictive` to also get the pre-update
    /// predictive distribution.
    pub fn step(
        &mut self,
        x: &Tensor,
        y: &U::Label,
        changepoint: bool,
        want_predictive: bool,
    ) -> Result<AgentStep<U::Predictive>> {
        match self {
            StreamAgent::Moca { filter, state, prune, supervise } => {
                if *supervise && changepoint {
                    filter.apply_supervision(state, &Supervision::ChangepointNow)?;
                }
                let outcome = if want_predictive {
                    // Composed sub-op path, bit-identical to `step`, so the
                    // predictive can be read off between input and label
                    // conditioning.
                    filter.update_on_x(state, x)?;
                    let enc = filter.upm.encode(x);
                    let has_input_model =
                        filter.upm.log_marginal_x(&state.bank[0], &enc)?.is_some();
                    let map_after_x = has_input_model.then(|| state.map_run_length());
                    let predictive = filter.predict(state, x);
                    let loss = filter.nll(state, x, y)?;
                    let nll = loss.item();
                    filter.update_on_y(state, x, y)?;
                    let map_run_length = Some(state.map_run_length());
                    filter.grow_posteriors(state, x, y);
                    filter.propagate_hazard(state);
                    state.steps += 1;
                    AgentStep { nll, map_run_length, map_after_x, predictive: Some(predictive) }
                } else {
                    let record = filter.step(state, x, y)?;
                    AgentStep {
                        nll: record.nll,
                        map_run_length: Some(record.map_run_length),
                        map_after_x: record.map_after_x,
                        predictive: None,
                    }
                };
                if let Some(cfg) = prune {
                    filter.prune(state, cfg)?;
                }
                Ok(outcome)
            }
            StreamAgent::Window { upm, n, history } => {
                let enc = upm.encode(x);
                let post = refold(*upm, history.iter());
                let step = score_single(*upm, &post, &enc, y, want_predictive)?;
                history.push_back((enc, y.clone()));
                while history.len() > *n {
                    history.pop_front();
                }
                Ok(step)
            }
            StreamAgent::Everything { upm, posterior } => {
                let enc = upm.encode(x);
                let step = score_single(*upm, posterior, &enc, y, want_predictive)?;
                *posterior = upm.recursive_update(posterior, &enc, y);
                Ok(step)
            }
            StreamAgent::Prior { upm, prior } => {
                let enc = upm.encode(x);
                score_single(*upm, prior, &enc, y, want_predictive)
            }
            StreamAgent::Oracle { upm, posterior } => {
                if changepoint {
                    *posterior = upm.prior_statistics();
                }
                let enc = upm.encode(x);
                let step = score_single(*upm, posterior, &enc, y, want_predictive)?;
                *posterior = upm.recursive_update(posterior, &enc, y);
                Ok(step)
            }
        }
    }

    /// The agent's current mixture of conditioning posteriors: belief
    /// weights and bank for the filter agent, a single weight-1 posterior for
    /// the baselines. This is what posterior-sampling action selection draws
    /// from.
    pub fn posterior_mixture(&self) -> (Vec<f64>, Vec<U::Posterior>) {
        match self {
            StreamAgent::Moca { state, .. } => (state.belief_weights(), state.bank.clone()),
            StreamAgent::Window { upm, history, .. } => {
                (vec![1.0], vec![refold(*upm, history.iter())])
            }
            StreamAgent::Everything { posterior, .. }
            | StreamAgent::Oracle { posterior, .. } => (vec![1.0], vec![posterior.clone()]),
            StreamAgent::Prior { prior, .. } => (vec![1.0], vec![prior.clone()]),
        }
    }
}

/// Folds the given pairs into a fresh prior, in order.
fn refold<'h, U: Upm>(
    upm: &U,
    pairs: impl Iterator<Item = &'h (U::Encoded, U::Label)>,
) -> U::Posterior
where
    U::Encoded: 'h,
    U::Label: 'h,
{
    let mut post = upm.prior_statistics();
    for (enc, y) in pairs {
        post = upm.recursive_update(&post, enc, y);
    }
    post
}

fn score_single<U: Upm>(
    upm: &U,
    post: &U::Posterior,
    enc: &U::Encoded,
    y: &U::Label,
    want_predictive: bool,
) -> Result<AgentStep<U::Predictive>> {
    let nll = -upm.log_predictive_y(post, enc, y)?.item();
    if !nll.is_finite() {
        return Err(MocaError::Numerical(format!(
            "baseline predictive log density is {nll}"
        )));
    }
    let predictive = want_predictive.then(|| Mixture {
        weights: vec![1.0],
        components: vec![upm.predictive(post, enc)],
    });
    Ok(AgentStep { nll, map_run_length: None, map_after_x: None, predictive })
}

// -- bandit action selection ------------------------------------------------

/// How a bandit agent turns sampled reward models into an arm choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionRule {
    /// Sample one reward model, act greedily on it.
    Thompson,
    /// Sample `k` reward models, take the arm achieving the highest value
    /// across all samples.
    Optimistic(usize),
}

/// Draws an index proportionally to `weights` (need not be normalized).
fn sample_hypothesis(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    weights.len() - 1
}

/// Samples one reward model from `post` and evaluates every arm at `context`.
/// Reward models are scalar-output: the value of arm `a` is `φ(s, a)ᵀ K`.
pub fn sampled_action_values(
    model: &Alpaca,
    post: &AlpacaPosterior,
    context: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let k = model.sample_last_layer(post, rng)?;
    let kt = k.transpose();
    let mut values = Vec::with_capacity(WHEEL_ACTIONS);
    for action in 0..WHEEL_ACTIONS {
        let enc = model.encode(&WheelEnv::encode(context, action));
        values.push(kt.matvec(enc.data()).item_at(0));
    }
    Ok(values)
}

/// Posterior-sampling arm selection over a mixture of posteriors: sample a
/// hypothesis from `weights`, sample a reward model from it, score all arms;
/// under [`ActionRule::Optimistic`] repeat `k` times and take the best value
/// seen anywhere. Exact value ties break uniformly at random.
pub fn select_action(
    model: &Alpaca,
    weights: &[f64],
    bank: &[AlpacaPosterior],
    context: &Tensor,
    rule: ActionRule,
    rng: &mut ChaCha8Rng,
) -> Result<usize> {
    let draws = match rule {
        ActionRule::Thompson => 1,
        ActionRule::Optimistic(k) => {
            assert!(k >= 1, "optimistic selection needs at least one sample");
            k
        }
    };
    let mut best_value = f64::NEG_INFINITY;
    let mut best_action = 0;
    let mut ties = 0usize;
    for _ in 0..draws {
        let h = sample_hypothesis(weights, rng);
        for (action, value) in sampled_action_values(model, &bank[h], context, rng)?
            .into_iter()
            .enumerate()
        {
            if value > best_value {
                best_value = value;
                best_action = action;
                ties = 1;
            } else if value == best_value {
                ties += 1;
                if rng.gen_range(0..ties) == 0 {
                    best_action = action;
                }
            }
        }
    }
    Ok(best_action)
}

// -- bandit trials ----------------------------------------------------------

/// One step of a bandit trial, for per-trial CSV export.
#[derive(Debug, Clone)]
pub struct BanditStepLog {
    pub context: (f64, f64),
    pub action: usize,
    pub reward: f64,
    pub optimal_mean: f64,
    pub regret: f64,
    pub map_run_length: Option<usize>,
}

/// Regret accounting for one trial.
#[derive(Debug, Clone)]
pub struct BanditMetrics {
    pub steps: Vec<BanditStepLog>,
    pub cumulative_regret: f64,
    pub mean_regret: f64,
    /// Mean per-step regret as a percentage of the analytic random-policy
    /// regret (so 100 means "as bad as pulling arms at random").
    pub percent_of_random: f64,
}

/// Plays one seeded trial: observe context, select an arm by posterior
/// sampling, collect the reward, feed the (encoded context+arm, reward) pair
/// back into the agent. Regret counts the gap to the best arm's mean payoff.
#[allow(clippy::too_many_arguments)]
pub fn run_bandit_trial(
    model: &Alpaca,
    kind: AgentKind,
    hazard: f64,
    prune: Option<PruneConfig>,
    env: &WheelEnv,
    rule: ActionRule,
    horizon: usize,
    env_seed: u64,
    policy_seed: u64,
) -> Result<BanditMetrics> {
    use rand::SeedableRng;
    let mut agent = StreamAgent::new(model, kind, hazard, prune, false);
    let mut session = env.start(env_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(policy_seed);
    let mut steps = Vec::with_capacity(horizon);
    let mut cumulative = 0.0;
    for _ in 0..horizon {
        let (context, switched) = session.observe();
        let (weights, bank) = agent.posterior_mixture();
        let action = select_action(model, &weights, &bank, &context, rule, &mut rng)?;
        let (reward, regret) = session.pull(&context, action);
        let optimal_mean = WheelEnv::optimal_mean(&context, session.threshold());
        let x = WheelEnv::encode(&context, action);
        let outcome = agent.step(&x, &Tensor::vector(vec![reward]), switched, false)?;
        cumulative += regret;
        steps.push(BanditStepLog {
            context: (context.item_at(0), context.item_at(1)),
            action,
            reward,
            optimal_mean,
            regret,
            map_run_length: outcome.map_run_length,
        });
    }
    let mean_regret = cumulative / horizon.max(1) as f64;
    Ok(BanditMetrics {
        steps,
        cumulative_regret: cumulative,
        mean_regret,
        percent_of_random: 100.0 * mean_regret / RANDOM_POLICY_REGRET_PER_STEP,
    })
}
