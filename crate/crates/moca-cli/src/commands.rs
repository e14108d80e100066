//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde_json::json;

use moca::agents::AgentKind;
use moca::autodiff::ParameterStore;
use moca::envs::{ClassificationEnv, SinusoidEnv, WheelEnv};
use moca::filter::MocaFilter;
use moca::gradcheck::{
    classification_gradcheck, regression_gradcheck, GradCheckReport, GRADCHECK_TOLERANCE,
};
use moca::trainer::{
    bandit_evaluate, bandit_trial_seeds, changepoint_detection_stats, evaluate, train,
    BanditEvalConfig, DetectionStats, EvalConfig, ModelSpec, TaskKind, TrainConfig,
};

use crate::config::{resolve_agents, ExperimentConfig};
use crate::output::{csv_table, ensure_dir, opt_cell, sha256_file, write_json, write_text};
use crate::{CliError, EvalArgs, GenArgs, GradcheckArgs, SweepArgs, TrainArgs};

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn out_dir(flag: &Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    flag.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir))
}

/// Loads a checkpoint and confirms it matches the configured architecture.
fn load_checkpoint(cfg: &TrainConfig, path: &Path) -> Result<ParameterStore, CliError> {
    if !path.exists() {
        return Err(CliError::Usage(format!(
            "checkpoint not found at {} (run `moca train` first, or pass --checkpoint)",
            path.display()
        )));
    }
    let store = ParameterStore::load(path)?;
    let expected = cfg.init_params();
    if store.names() != expected.names() {
        return Err(CliError::Usage(format!(
            "checkpoint {} does not match the configured architecture (parameters {:?} vs expected {:?})",
            path.display(),
            store.names(),
            expected.names()
        )));
    }
    for name in expected.names() {
        if store.get(&name).shape() != expected.get(&name).shape() {
            return Err(CliError::Usage(format!(
                "checkpoint {}: parameter {name} has shape {:?}, expected {:?}",
                path.display(),
                store.get(&name).shape(),
                expected.get(&name).shape()
            )));
        }
    }
    Ok(store)
}

fn eval_protocol(cfg: &ExperimentConfig) -> EvalConfig {
    EvalConfig {
        hazard: cfg.eval_hazard(),
        horizon: cfg.eval.horizon,
        trials: cfg.eval.trials,
        seed: cfg.eval.seed,
        prune: cfg.prune,
        supervision_fraction: cfg.supervision.fraction,
    }
}

// -- train ------------------------------------------------------------------

pub fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(hazard) = args.hazard {
        cfg.train.hazard = hazard;
    }
    cfg.validate()?;
    let out = out_dir(&args.out, &cfg);
    ensure_dir(&out)?;

    println!(
        "training {} model: {} iterations, batch {} x {}, hazard {}",
        cfg.train.task,
        cfg.train.iterations,
        cfg.train.batch_size,
        cfg.train.batch_length,
        cfg.train.hazard
    );
    let result = train(&cfg.train)?;

    let ckpt = out.join("checkpoint.bin");
    result.params.save(&ckpt)?;
    result.final_params.save(&out.join("final_checkpoint.bin"))?;

    let curve = csv_table(
        "iteration,mean_nll,lr,wall_time_ms",
        result.curve.iter().map(|r| {
            format!("{},{},{},{}", r.iteration, r.mean_nll, r.lr, r.wall_time_ms)
        }),
    );
    write_text(&out.join("curve.csv"), &curve)?;
    if !result.validation.is_empty() {
        let validation = csv_table(
            "iteration,mean_nll",
            result.validation.iter().map(|(it, nll)| format!("{it},{nll}")),
        );
        write_text(&out.join("validation.csv"), &validation)?;
    }

    let manifest = json!({
        "version": VERSION,
        "command": "train",
        "config": cfg,
        "seeds": { "train": cfg.train.seed },
        "param_hash": sha256_file(&ckpt)?,
        "best_iteration": result.best_iteration,
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    // The resolved config (with any flag overrides applied), ready to pass
    // back to --config for an exact rerun.
    write_text(&out.join("config.toml"), &cfg.to_toml()?)?;

    let first = result.curve.first().map(|r| r.mean_nll).unwrap_or(f64::NAN);
    let last = result.curve.last().map(|r| r.mean_nll).unwrap_or(f64::NAN);
    println!("mean NLL: {first:.4} (first iteration) -> {last:.4} (last iteration)");
    println!("kept parameters from iteration {}", result.best_iteration);
    println!("wrote {}", out.display());
    Ok(())
}

// -- eval -------------------------------------------------------------------

pub fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.eval.seed = seed;
    }
    if let Some(hazard) = args.hazard {
        cfg.eval.hazard = Some(hazard);
    }
    if let Some(agents) = &args.agents {
        cfg.eval.agents = agents.clone();
        cfg.eval.window_sizes.clear();
    }
    if let Some(trials) = args.trials {
        cfg.eval.trials = trials;
    }
    if let Some(horizon) = args.horizon {
        cfg.eval.horizon = horizon;
    }
    cfg.validate()?;
    let out = out_dir(&args.out, &cfg);
    ensure_dir(&out)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
    let store = load_checkpoint(&cfg.train, &ckpt)?;

    let agents = resolve_agents(&cfg.eval.agents, &cfg.eval.window_sizes)?;
    let eval = eval_protocol(&cfg);
    println!(
        "evaluating {} agents on {} streams of horizon {} at hazard {}",
        agents.len(),
        eval.trials,
        eval.horizon,
        eval.hazard
    );
    let rows = evaluate(&cfg.train, &store, &eval, &agents)?;

    let table = csv_table(
        "agent,mean_nll,nll_ci95,accuracy,accuracy_ci95",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.label,
                r.mean_nll,
                r.nll_ci95,
                opt_cell(r.accuracy),
                opt_cell(r.accuracy_ci95)
            )
        }),
    );
    write_text(&out.join("eval_results.csv"), &table)?;

    let detection = changepoint_detection_stats(&cfg.train, &store, &eval, false)?;
    let hist = detection.histogram();
    let detection_csv = csv_table(
        "delay,count",
        hist.iter().map(|(delay, count)| format!("{delay},{count}")),
    );
    write_text(&out.join("detection.csv"), &detection_csv)?;

    let diagnostics = diagnostics_csv(&cfg.train, &store, &eval)?;
    write_text(&out.join("diagnostics.csv"), &diagnostics)?;

    let supervised_detection = if agents.iter().any(|a| a.supervised) {
        Some(changepoint_detection_stats(&cfg.train, &store, &eval, true)?)
    } else {
        None
    };

    let summary = json!({
        "version": VERSION,
        "command": "eval",
        "config": cfg,
        "seeds": { "eval": cfg.eval.seed },
        "param_hash": sha256_file(&ckpt)?,
        "agents": rows.iter().map(|r| json!({
            "agent": r.label,
            "mean_nll": r.mean_nll,
            "nll_ci95": r.nll_ci95,
            "accuracy": r.accuracy,
            "accuracy_ci95": r.accuracy_ci95,
        })).collect::<Vec<_>>(),
        "detection": detection_json(&detection),
        "detection_supervised": supervised_detection.as_ref().map(detection_json),
    });
    write_json(&out.join("eval_summary.json"), &summary)?;

    for r in &rows {
        match r.accuracy {
            Some(acc) => println!(
                "{:<10} nll {:.4} +/- {:.4}   accuracy {:.3} +/- {:.3}",
                r.label,
                r.mean_nll,
                r.nll_ci95,
                acc,
                r.accuracy_ci95.unwrap_or(f64::NAN)
            ),
            None => println!("{:<10} nll {:.4} +/- {:.4}", r.label, r.mean_nll, r.nll_ci95),
        }
    }
    println!(
        "changepoints: {} events, {:.1}% detected within 2 steps",
        detection.num_events(),
        100.0 * detection.fraction_within(2)
    );
    println!("wrote {}", out.display());
    Ok(())
}

fn detection_json(stats: &DetectionStats) -> serde_json::Value {
    json!({
        "events": stats.num_events(),
        "fraction_within_1": stats.fraction_within(1),
        "fraction_within_2": stats.fraction_within(2),
        "fraction_within_5": stats.fraction_within(5),
        "histogram": stats.histogram(),
    })
}

/// Per-step trace of the filter agent over the first evaluation stream.
fn diagnostics_csv(
    cfg: &TrainConfig,
    store: &ParameterStore,
    eval: &EvalConfig,
) -> Result<String, CliError> {
    const HEADER: &str = "t,nll,map_runlength,belief_entropy,true_task_id,changepoint_flag";
    let binding = store.bind(false);
    match cfg.model_spec() {
        ModelSpec::Alpaca(mcfg) => {
            let stream = match cfg.task {
                TaskKind::Sinusoid => SinusoidEnv { hazard: eval.hazard, ..SinusoidEnv::default() }
                    .generate(eval.horizon, eval.seed),
                TaskKind::Wheel => WheelEnv { hazard: eval.hazard, ..WheelEnv::default() }
                    .generate_logged(eval.horizon, eval.seed),
                TaskKind::Classification => unreachable!(),
            };
            let model = mcfg.bind(&binding);
            let filter = MocaFilter::new(&model, eval.hazard);
            let mut state = filter.init_state();
            let mut rows = Vec::with_capacity(stream.len());
            for t in 0..stream.len() {
                let rec = filter.step(&mut state, &stream.xs[t], &stream.ys[t])?;
                filter.prune(&mut state, &eval.prune)?;
                rows.push(format!(
                    "{t},{},{},{},{},{}",
                    rec.nll,
                    rec.map_run_length,
                    rec.belief_entropy,
                    stream.task_ids[t],
                    u8::from(stream.changepoints[t])
                ));
            }
            Ok(csv_table(HEADER, rows))
        }
        ModelSpec::Pcoc(mcfg) => {
            let stream = ClassificationEnv {
                hazard: eval.hazard,
                num_classes: cfg.num_classes,
                ..ClassificationEnv::default()
            }
            .generate(eval.horizon, eval.seed);
            let model = mcfg.bind(&binding);
            let filter = MocaFilter::new(&model, eval.hazard);
            let mut state = filter.init_state();
            let mut rows = Vec::with_capacity(stream.len());
            for t in 0..stream.len() {
                let rec = filter.step(&mut state, &stream.xs[t], &stream.ys[t])?;
                filter.prune(&mut state, &eval.prune)?;
                rows.push(format!(
                    "{t},{},{},{},{},{}",
                    rec.nll,
                    rec.map_run_length,
                    rec.belief_entropy,
                    stream.task_ids[t],
                    u8::from(stream.changepoints[t])
                ));
            }
            Ok(csv_table(HEADER, rows))
        }
    }
}

// -- bandit -----------------------------------------------------------------

pub fn cmd_bandit(args: EvalArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.bandit.seed = seed;
    }
    if let Some(hazard) = args.hazard {
        cfg.bandit.hazard = Some(hazard);
    }
    if let Some(agents) = &args.agents {
        cfg.bandit.agents = agents.clone();
        cfg.bandit.window_sizes.clear();
    }
    if let Some(trials) = args.trials {
        cfg.bandit.trials = trials;
    }
    if let Some(horizon) = args.horizon {
        cfg.bandit.horizon = horizon;
    }
    cfg.validate()?;
    if cfg.train.task != TaskKind::Wheel {
        return Err(CliError::Usage(format!(
            "bandit play needs a wheel reward model; config trains '{}'",
            cfg.train.task
        )));
    }
    let out = out_dir(&args.out, &cfg);
    ensure_dir(&out)?;
    let ckpt = args.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.bin"));
    let store = load_checkpoint(&cfg.train, &ckpt)?;

    let kinds = cfg.bandit.agent_kinds()?;
    let bcfg = BanditEvalConfig {
        hazard: cfg.bandit_hazard(),
        horizon: cfg.bandit.horizon,
        trials: cfg.bandit.trials,
        seed: cfg.bandit.seed,
        rule: cfg.bandit.action_rule()?,
        prune: cfg.prune,
    };
    println!(
        "playing {} bandit trials of length {} at hazard {}",
        bcfg.trials, bcfg.horizon, bcfg.hazard
    );
    let rows = bandit_evaluate(&cfg.train, &store, &bcfg, &kinds)?;

    let table = csv_table(
        "agent,mean_regret,regret_ci95,percent_of_random,percent_ci95",
        rows.iter().map(|r| {
            format!(
                "{},{},{},{},{}",
                r.label, r.mean_regret, r.regret_ci95, r.percent_of_random, r.percent_ci95
            )
        }),
    );
    write_text(&out.join("bandit_results.csv"), &table)?;

    // Detailed step log for trial 0 of the first filter agent (or the first
    // agent when no filter agent was requested).
    let log_kind = kinds
        .iter()
        .copied()
        .find(|k| *k == AgentKind::Moca)
        .unwrap_or(kinds[0]);
    let steps = replay_bandit_trial(&cfg, &store, &bcfg, log_kind)?;
    write_text(&out.join("bandit_steps.csv"), &steps)?;

    let summary = json!({
        "version": VERSION,
        "command": "bandit",
        "config": cfg,
        "seeds": { "bandit": cfg.bandit.seed },
        "param_hash": sha256_file(&ckpt)?,
        "agents": rows.iter().map(|r| json!({
            "agent": r.label,
            "mean_regret": r.mean_regret,
            "regret_ci95": r.regret_ci95,
            "percent_of_random": r.percent_of_random,
            "percent_ci95": r.percent_ci95,
        })).collect::<Vec<_>>(),
    });
    write_json(&out.join("bandit_summary.json"), &summary)?;

    for r in &rows {
        println!(
            "{:<10} regret/step {:.4} +/- {:.4}  ({:.1}% of random +/- {:.1})",
            r.label, r.mean_regret, r.regret_ci95, r.percent_of_random, r.percent_ci95
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}

fn replay_bandit_trial(
    cfg: &ExperimentConfig,
    store: &ParameterStore,
    bcfg: &BanditEvalConfig,
    kind: AgentKind,
) -> Result<String, CliError> {
    let mcfg = match cfg.train.model_spec() {
        ModelSpec::Alpaca(m) => m,
        ModelSpec::Pcoc(_) => unreachable!("bandit requires a regression model"),
    };
    let binding = store.bind(false);
    let model = mcfg.bind(&binding);
    let env = WheelEnv { hazard: bcfg.hazard, ..WheelEnv::default() };
    let (env_seed, policy_seed) = bandit_trial_seeds(bcfg.seed, 0);
    let prune = (kind == AgentKind::Moca).then_some(bcfg.prune);
    let metrics = moca::agents::run_bandit_trial(
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
    Ok(csv_table(
        "t,state_x,state_y,action,reward,optimal_mean,regret,map_runlength",
        metrics.steps.iter().enumerate().map(|(t, s)| {
            format!(
                "{t},{},{},{},{},{},{},{}",
                s.context.0,
                s.context.1,
                s.action,
                s.reward,
                s.optimal_mean,
                s.regret,
                s.map_run_length.map(|m| m.to_string()).unwrap_or_default()
            )
        }),
    ))
}

// -- sweep ------------------------------------------------------------------

pub fn cmd_sweep(args: SweepArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.train.seed = seed;
    }
    if let Some(agents) = &args.agents {
        cfg.eval.agents = agents.clone();
        cfg.eval.window_sizes.clear();
        cfg.bandit.agents = agents.clone();
        cfg.bandit.window_sizes.clear();
    }
    if let Some(trials) = args.trials {
        cfg.eval.trials = trials;
        cfg.bandit.trials = trials;
    }
    if let Some(horizon) = args.horizon {
        cfg.eval.horizon = horizon;
        cfg.bandit.horizon = horizon;
    }
    cfg.validate()?;
    let out = out_dir(&args.out, &cfg);
    ensure_dir(&out)?;

    let is_bandit = cfg.train.task == TaskKind::Wheel;
    let metric = if is_bandit { "regret_percent_of_random" } else { "nll" };
    let mut rows: Vec<String> = Vec::new();
    let mut hashes = Vec::new();

    for (i, &hazard) in cfg.sweep.hazards.iter().enumerate() {
        let mut point = cfg.clone();
        point.train.hazard = hazard;
        point.eval.hazard = Some(hazard);
        point.bandit.hazard = Some(hazard);
        let sub = out.join(format!("hazard_{i}"));
        ensure_dir(&sub)?;

        println!("[{}/{}] hazard {hazard}: training...", i + 1, cfg.sweep.hazards.len());
        let result = train(&point.train)?;
        let ckpt = sub.join("checkpoint.bin");
        result.params.save(&ckpt)?;
        let curve = csv_table(
            "iteration,mean_nll,lr,wall_time_ms",
            result.curve.iter().map(|r| {
                format!("{},{},{},{}", r.iteration, r.mean_nll, r.lr, r.wall_time_ms)
            }),
        );
        write_text(&sub.join("curve.csv"), &curve)?;
        let hash = sha256_file(&ckpt)?;
        write_json(
            &sub.join("manifest.json"),
            &json!({
                "version": VERSION,
                "command": "sweep",
                "hazard": hazard,
                "config": point,
                "seeds": { "train": point.train.seed },
                "param_hash": hash,
                "best_iteration": result.best_iteration,
            }),
        )?;
        write_text(&sub.join("config.toml"), &point.to_toml()?)?;
        hashes.push(json!({ "hazard": hazard, "param_hash": hash }));

        if is_bandit {
            let kinds = point.bandit.agent_kinds()?;
            let bcfg = BanditEvalConfig {
                hazard,
                horizon: point.bandit.horizon,
                trials: point.bandit.trials,
                seed: point.bandit.seed,
                rule: point.bandit.action_rule()?,
                prune: point.prune,
            };
            for r in bandit_evaluate(&point.train, &result.params, &bcfg, &kinds)? {
                println!(
                    "  {:<10} {:.1}% of random +/- {:.1}",
                    r.label, r.percent_of_random, r.percent_ci95
                );
                rows.push(format!(
                    "{hazard},{},{metric},{},{}",
                    r.label, r.percent_of_random, r.percent_ci95
                ));
            }
        } else {
            let agents = resolve_agents(&point.eval.agents, &point.eval.window_sizes)?;
            let eval = eval_protocol(&point);
            for r in evaluate(&point.train, &result.params, &eval, &agents)? {
                println!("  {:<10} nll {:.4} +/- {:.4}", r.label, r.mean_nll, r.nll_ci95);
                rows.push(format!(
                    "{hazard},{},{metric},{},{}",
                    r.label, r.mean_nll, r.nll_ci95
                ));
            }
        }
    }

    write_text(
        &out.join("sweep_results.csv"),
        &csv_table("hazard,agent,metric,mean,ci95", rows),
    )?;
    write_json(
        &out.join("sweep_summary.json"),
        &json!({
            "version": VERSION,
            "command": "sweep",
            "config": cfg,
            "metric": metric,
            "checkpoints": hashes,
        }),
    )?;
    println!("wrote {}", out.display());
    Ok(())
}

// -- gradcheck --------------------------------------------------------------

pub fn cmd_gradcheck(args: GradcheckArgs) -> Result<(), CliError> {
    let fault = args.inject_fault.as_deref();
    let fault_for = |prefix: &str| fault.filter(|f| f.starts_with(prefix));
    if let Some(f) = fault {
        if !f.starts_with("alpaca.") && !f.starts_with("pcoc.") {
            return Err(CliError::Usage(format!(
                "--inject-fault target {f:?} matches neither model's parameters"
            )));
        }
    }
    let reports = [
        regression_gradcheck(args.seed, fault_for("alpaca."))?,
        classification_gradcheck(args.seed, fault_for("pcoc."))?,
    ];
    let mut failed = false;
    for report in &reports {
        println!("model {} (seed {}):", report.model, report.seed);
        for entry in &report.entries {
            println!(
                "  {:<24} max rel err {:>12.3e}   max |grad| {:>12.3e}",
                entry.name, entry.max_rel_err, entry.max_abs_grad
            );
        }
        let ok = report.passed(GRADCHECK_TOLERANCE);
        print_verdict(report, ok);
        failed |= !ok;
    }
    if failed {
        return Err(CliError::Failure(format!(
            "gradient check failed (tolerance {GRADCHECK_TOLERANCE:e})"
        )));
    }
    Ok(())
}

fn print_verdict(report: &GradCheckReport, ok: bool) {
    println!(
        "  {}: worst relative error {:.3e} (tolerance {:e})",
        if ok { "PASS" } else { "FAIL" },
        report.worst(),
        GRADCHECK_TOLERANCE
    );
}

// -- gen --------------------------------------------------------------------

pub fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(hazard) = args.hazard {
        cfg.train.hazard = hazard;
    }
    cfg.validate()?;
    let seed = args.seed.unwrap_or(cfg.train.seed);
    let trials = args.trials.unwrap_or(10);
    let horizon = args.horizon.unwrap_or(cfg.eval.horizon);
    let out = out_dir(&args.out, &cfg);
    let streams_dir = out.join("streams");
    ensure_dir(&streams_dir)?;

    for i in 0..trials {
        let path = streams_dir.join(format!("stream_{i:05}.csv"));
        match cfg.train.task {
            TaskKind::Sinusoid => SinusoidEnv { hazard: cfg.train.hazard, ..SinusoidEnv::default() }
                .generate(horizon, seed + i as u64)
                .write_csv(&path)?,
            TaskKind::Wheel => WheelEnv { hazard: cfg.train.hazard, ..WheelEnv::default() }
                .generate_logged(horizon, seed + i as u64)
                .write_csv(&path)?,
            TaskKind::Classification => ClassificationEnv {
                hazard: cfg.train.hazard,
                num_classes: cfg.train.num_classes,
                ..ClassificationEnv::default()
            }
            .generate(horizon, seed + i as u64)
            .write_csv(&path)?,
        }
    }
    write_json(
        &out.join("gen_manifest.json"),
        &json!({
            "version": VERSION,
            "command": "gen",
            "config": cfg,
            "seeds": { "first_stream": seed },
            "streams": trials,
            "horizon": horizon,
        }),
    )?;
    println!(
        "wrote {trials} {} streams of horizon {horizon} to {}",
        cfg.train.task,
        streams_dir.display()
    );
    Ok(())
}
