//! Experiment configuration: one TOML file drives training, evaluation,
//! bandit play, and hazard sweeps.
//!
//! The file round-trips losslessly: parsing the serialized form of a config
//! yields an identical value, so manifests can embed the exact configuration
//! that produced a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use moca::agents::{ActionRule, AgentKind};
use moca::filter::PruneConfig;
use moca::trainer::{AgentSpec, TrainConfig};

use crate::CliError;

/// Root of the experiment file. Only `[train]` is required; every other
/// section has usable defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub bandit: BanditSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default)]
    pub supervision: SupervisionSection,
    #[serde(default)]
    pub prune: PruneConfig,
    #[serde(default)]
    pub output: OutputSection,
}

/// Settings for `moca eval` (and the evaluation half of `moca sweep`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Evaluation-stream hazard; defaults to the training hazard.
    pub hazard: Option<f64>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// Agent labels: `moca`, `moca+sup`, `sw<N>`, `toe`, `coe`, `oracle`.
    pub agents: Vec<String>,
    /// Convenience: each size here adds a `sw<N>` agent.
    pub window_sizes: Vec<usize>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            hazard: None,
            horizon: 400,
            trials: 200,
            seed: 1000,
            agents: vec!["moca".into(), "oracle".into(), "toe".into(), "coe".into()],
            window_sizes: vec![5, 10, 50],
        }
    }
}

/// Settings for `moca bandit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BanditSection {
    /// Bandit-environment hazard; defaults to the training hazard.
    pub hazard: Option<f64>,
    pub horizon: usize,
    pub trials: usize,
    pub seed: u64,
    /// `thompson`, or `optimistic` (best of `optimism_samples` draws).
    pub rule: String,
    pub optimism_samples: usize,
    pub agents: Vec<String>,
    pub window_sizes: Vec<usize>,
}

impl Default for BanditSection {
    fn default() -> Self {
        BanditSection {
            hazard: None,
            horizon: 1000,
            trials: 10,
            seed: 2000,
            rule: "thompson".into(),
            optimism_samples: 5,
            agents: vec!["moca".into()],
            window_sizes: vec![5, 10, 50],
        }
    }
}

/// Hazard grid for `moca sweep`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub hazards: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { hazards: vec![0.01, 0.02, 0.05, 0.1, 0.2] }
    }
}

/// How much test-time changepoint supervision `moca+sup` agents receive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SupervisionSection {
    /// Fraction of true changepoints revealed (independently per
    /// changepoint); 1.0 reveals all of them.
    pub fraction: f64,
}

impl Default for SupervisionSection {
    fn default() -> Self {
        SupervisionSection { fraction: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Run directory for checkpoints, CSVs, and manifests.
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "runs".into() }
    }
}

/// Expands an agent label list plus window sizes into parsed specs,
/// deduplicated in order.
pub fn resolve_agents(
    labels: &[String],
    window_sizes: &[usize],
) -> Result<Vec<AgentSpec>, CliError> {
    let mut specs: Vec<AgentSpec> = Vec::new();
    let mut push = |spec: AgentSpec| {
        if !specs.contains(&spec) {
            specs.push(spec);
        }
    };
    for label in labels {
        let spec: AgentSpec = label
            .parse()
            .map_err(|e: String| CliError::Usage(format!("agent list: {e}")))?;
        push(spec);
    }
    for &n in window_sizes {
        push(AgentSpec::plain(AgentKind::SlidingWindow(n)));
    }
    if specs.is_empty() {
        return Err(CliError::Usage("agent list is empty".into()));
    }
    Ok(specs)
}

impl BanditSection {
    pub fn action_rule(&self) -> Result<ActionRule, CliError> {
        match self.rule.as_str() {
            "thompson" => Ok(ActionRule::Thompson),
            "optimistic" => {
                if self.optimism_samples == 0 {
                    return Err(CliError::Usage(
                        "optimism_samples must be at least 1".into(),
                    ));
                }
                Ok(ActionRule::Optimistic(self.optimism_samples))
            }
            other => Err(CliError::Usage(format!(
                "unknown action rule '{other}' (expected thompson or optimistic)"
            ))),
        }
    }

    /// Bandit agents, restricted to kinds (supervision does not apply to
    /// action selection).
    pub fn agent_kinds(&self) -> Result<Vec<AgentKind>, CliError> {
        let specs = resolve_agents(&self.agents, &self.window_sizes)?;
        specs
            .into_iter()
            .map(|s| {
                if s.supervised {
                    Err(CliError::Usage(
                        "bandit agents cannot use '+sup' (no supervision during play)".into(),
                    ))
                } else {
                    Ok(s.kind)
                }
            })
            .collect()
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Usage(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| {
            CliError::Usage(format!("config {}: {e}", path.display()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self)
            .map_err(|e| CliError::Usage(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train
            .validate()
            .map_err(|e| CliError::Usage(format!("[train] {e}")))?;
        for (name, hazard) in [("eval", self.eval.hazard), ("bandit", self.bandit.hazard)] {
            if let Some(h) = hazard {
                if !(h > 0.0 && h < 1.0) {
                    return Err(CliError::Usage(format!(
                        "[{name}] hazard must lie in (0, 1), got {h}"
                    )));
                }
            }
        }
        for &h in &self.sweep.hazards {
            if !(h > 0.0 && h < 1.0) {
                return Err(CliError::Usage(format!(
                    "[sweep] hazard must lie in (0, 1), got {h}"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.supervision.fraction) {
            return Err(CliError::Usage(format!(
                "[supervision] fraction must lie in [0, 1], got {}",
                self.supervision.fraction
            )));
        }
        if self.eval.horizon == 0 || self.eval.trials == 0 {
            return Err(CliError::Usage("[eval] horizon and trials must be positive".into()));
        }
        if self.bandit.horizon == 0 || self.bandit.trials == 0 {
            return Err(CliError::Usage("[bandit] horizon and trials must be positive".into()));
        }
        resolve_agents(&self.eval.agents, &self.eval.window_sizes)?;
        self.bandit.agent_kinds()?;
        self.bandit.action_rule()?;
        Ok(())
    }

    /// Hazard the evaluation section actually uses.
    pub fn eval_hazard(&self) -> f64 {
        self.eval.hazard.unwrap_or(self.train.hazard)
    }

    pub fn bandit_hazard(&self) -> f64 {
        self.bandit.hazard.unwrap_or(self.train.hazard)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use moca::trainer::TaskKind;

    fn sample() -> ExperimentConfig {
        ExperimentConfig {
            train: TrainConfig::desk_default(TaskKind::Sinusoid),
            eval: EvalSection {
                hazard: Some(0.1),
                horizon: 50,
                trials: 7,
                seed: 42,
                agents: vec!["moca".into(), "moca+sup".into(), "oracle".into()],
                window_sizes: vec![5, 10],
            },
            bandit: BanditSection::default(),
            sweep: SweepSection { hazards: vec![0.05, 0.2] },
            supervision: SupervisionSection { fraction: 0.5 },
            prune: PruneConfig { min_weight: 1e-5, max_hypotheses: 128 },
            output: OutputSection { dir: "runs/test".into() },
        }
    }

    #[test]
    fn config_round_trips_losslessly_through_toml() {
        let cfg = sample();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
        // And once more through the re-serialized text.
        let text2 = back.to_toml().unwrap();
        assert_eq!(text, text2);
    }

    #[test]
    fn minimal_config_uses_section_defaults() {
        let text = r#"
            [train]
            task = "sinusoid"
            hazard = 0.2
            learning_rate = 0.02
            batch_size = 2
            batch_length = 10
            iterations = 3
            decay_interval = 0
            decay_factor = 0.5
            seed = 7
            hidden = [8]
            hidden_activation = "relu"
            feature_dim = 4
            feature_activation = "tanh"
            num_classes = 0
            validation_interval = 0
            validation_streams = 0
        "#;
        let cfg: ExperimentConfig = toml::from_str(text).unwrap();
        assert_eq!(cfg.eval.horizon, 400);
        assert_eq!(cfg.eval.trials, 200);
        assert_eq!(cfg.sweep.hazards, vec![0.01, 0.02, 0.05, 0.1, 0.2]);
        assert_eq!(cfg.prune, PruneConfig::default());
        assert_eq!(cfg.supervision.fraction, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn train_objective_parses_and_defaults_to_the_filter() {
        let minimal = r#"
            [train]
            task = "sinusoid"
            hazard = 0.2
            learning_rate = 0.02
            batch_size = 2
            batch_length = 10
            iterations = 3
            decay_interval = 0
            decay_factor = 0.5
            seed = 7
            hidden = [8]
            hidden_activation = "relu"
            feature_dim = 4
            feature_activation = "tanh"
            num_classes = 0
            validation_interval = 0
            validation_streams = 0
        "#;
        let cfg: ExperimentConfig = toml::from_str(minimal).unwrap();
        assert_eq!(cfg.train.objective, AgentKind::Moca);
        let with_objective = format!("{minimal}objective = \"sw5\"\n");
        let cfg: ExperimentConfig = toml::from_str(&with_objective).unwrap();
        assert_eq!(cfg.train.objective, AgentKind::SlidingWindow(5));
    }

    #[test]
    fn unknown_and_missing_fields_are_named_in_errors() {
        let err = toml::from_str::<ExperimentConfig>("[train]\nhazard = 0.2\n")
            .unwrap_err()
            .to_string();
        assert!(err.contains("task"), "missing-field error should name the field: {err}");
        let err = toml::from_str::<ExperimentConfig>(
            "[trainn]\nhazard = 0.2\n",
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("trainn"), "unknown-field error should name the field: {err}");
    }

    #[test]
    fn agent_resolution_expands_windows_and_rejects_nonsense() {
        let specs = resolve_agents(
            &["moca".into(), "moca+sup".into()],
            &[5, 10, 5],
        )
        .unwrap();
        let labels: Vec<String> = specs.iter().map(|s| s.to_string()).collect();
        assert_eq!(labels, vec!["moca", "moca+sup", "sw5", "sw10"]);
        assert!(resolve_agents(&["quux".into()], &[]).is_err());
        assert!(resolve_agents(&[], &[]).is_err());
    }

    #[test]
    fn shipped_configs_parse_and_match_desk_defaults() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
        for (file, task) in [
            ("sinusoid", TaskKind::Sinusoid),
            ("wheel", TaskKind::Wheel),
            ("classification", TaskKind::Classification),
        ] {
            let path = root.join("configs").join(format!("{file}.toml"));
            let cfg = ExperimentConfig::load(&path)
                .unwrap_or_else(|e| panic!("configs/{file}.toml: {e}"));
            assert_eq!(
                cfg.train,
                TrainConfig::desk_default(task),
                "configs/{file}.toml drifted from the desk-scale defaults"
            );
        }
    }

    #[test]
    fn bandit_rules_parse() {
        let mut section = BanditSection::default();
        assert_eq!(section.action_rule().unwrap(), ActionRule::Thompson);
        section.rule = "optimistic".into();
        section.optimism_samples = 3;
        assert_eq!(section.action_rule().unwrap(), ActionRule::Optimistic(3));
        section.rule = "greedy".into();
        assert!(section.action_rule().is_err());
        let mut section = BanditSection::default();
        section.agents = vec!["moca+sup".into()];
        assert!(section.agent_kinds().is_err());
    }
}
