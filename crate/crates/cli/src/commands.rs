use std::path::{Path, PathBuf};
use std::process::{Child, Command as Process};

use bsac_core::agent::{Agent, AgentError, EpisodeRecord, EvalRecord, TrainObserver};
use bsac_core::checks;
use bsac_core::envs::{episode_seeds, make_env, rollout_returns, ChainLqrEnv, ENV_IDS};
use serde_json::{json, Map, Value};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_override, resolve_topology, RunConfig};
use crate::metrics::{EvalWriter, MetricsWriter, Summary};
use crate::plot::{read_curve, render_svg};
use crate::{CliError, ConfigArgs, EvalArgs, ExportLqrArgs, PlotArgs, SweepArgs, TrainArgs, VerifyArgs};

fn common_overrides(args: &ConfigArgs) -> Result<Map<String, Value>, CliError> {
    let mut map = Map::new();
    for s in &args.set {
        let (k, v) = parse_override(s)?;
        map.insert(k, v);
    }
    if let Some(env) = &args.env {
        map.insert("env".into(), Value::from(env.as_str()));
    }
    if let Some(steps) = args.steps {
        map.insert("total_steps".into(), Value::from(steps));
    }
    Ok(map)
}

pub fn train_config(args: &TrainArgs) -> Result<RunConfig, CliError> {
    let mut map = common_overrides(&args.common)?;
    if let Some(t) = &args.topology {
        map.insert("topology".into(), Value::from(t.as_str()));
    }
    if let Some(s) = args.seed {
        map.insert("seed".into(), Value::from(s));
    }
    if let Some(d) = &args.out_dir {
        map.insert("out_dir".into(), Value::from(d.to_string_lossy().as_ref()));
    }
    if let Some(c) = args.checkpoint_interval {
        map.insert("checkpoint_interval".into(), Value::from(c));
    }
    if let Some(f) = args.metrics_flush_interval {
        map.insert("metrics_flush_interval".into(), Value::from(f));
    }
    RunConfig::resolve(args.common.config.as_deref(), map)
}

struct RunObserver {
    out_dir: PathBuf,
    metrics: MetricsWriter,
    evals: EvalWriter,
    checkpoint_interval: u64,
    last_checkpoint: u64,
}

impl RunObserver {
    fn checkpoint(&mut self, env_step: u64, agent: &Agent) -> Result<(), AgentError> {
        let path = self.out_dir.join(format!("ckpt_{env_step}.json"));
        Checkpoint::from_agent(agent, env_step).save(&path).map_err(|e| AgentError::Observer(e.to_string()))?;
        self.last_checkpoint = env_step;
        Ok(())
    }
}

impl TrainObserver for RunObserver {
    fn on_episode(&mut self, record: &EpisodeRecord) -> Result<(), AgentError> {
        self.metrics.write(record).map_err(|e| AgentError::Observer(e.to_string()))
    }

    fn on_eval(&mut self, record: &EvalRecord) -> Result<(), AgentError> {
        self.evals.write(record).map_err(|e| AgentError::Observer(e.to_string()))
    }

    fn on_step(&mut self, env_step: u64, agent: &Agent) -> Result<(), AgentError> {
        if env_step.is_multiple_of(self.checkpoint_interval) || env_step == agent.config().total_steps {
            self.checkpoint(env_step, agent)?;
        }
        Ok(())
    }
}

pub fn train(args: &TrainArgs) -> Result<(), CliError> {
    let cfg = train_config(args)?;
    let mut env = make_env(&cfg.train.env).map_err(|e| CliError::Config(e.to_string()))?;
    let mut eval_env = make_env(&cfg.train.env).map_err(|e| CliError::Config(e.to_string()))?;
    let spec = env.spec().clone();
    let graph = resolve_topology(&cfg.train.topology, spec.action_dim)?;
    let factorization = graph.factorization_string();
    log::info!("{} on {}: factorization {factorization}", cfg.train.topology, cfg.train.env);

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let run = json!({
        "config": cfg,
        "seed": cfg.train.seed,
        "factorization_string": factorization,
        "topology": graph.as_ref(),
    });
    let run_path = cfg.out_dir.join("run.json");
    std::fs::write(&run_path, serde_json::to_string_pretty(&run).expect("run record serializes") + "\n")
        .map_err(|e| CliError::io(&run_path, e))?;

    let mut agent = Agent::new(cfg.train.clone(), graph, &spec).map_err(|e| CliError::Config(e.to_string()))?;
    let mut observer = RunObserver {
        metrics: MetricsWriter::create(&cfg.out_dir.join("metrics.csv"), cfg.metrics_flush_interval, args.strip_timing)?,
        evals: EvalWriter::create(&cfg.out_dir.join("evals.csv"))?,
        out_dir: cfg.out_dir.clone(),
        checkpoint_interval: cfg.checkpoint_interval,
        last_checkpoint: 0,
    };
    let result = agent.train(env.as_mut(), eval_env.as_mut(), &mut observer);
    observer.metrics.flush()?;
    match result {
        Ok(log) => {
            log::info!("finished {} steps, {} updates, {} episodes", cfg.train.total_steps, log.updates, log.episodes.len());
            Ok(())
        }
        Err(e) if e.is_non_finite() => {
            log::error!("{e}; last good checkpoint is at step {}", observer.last_checkpoint);
            Err(CliError::NonFinite(e.to_string()))
        }
        Err(e) => Err(CliError::Train(e.to_string())),
    }
}

pub fn eval_summary(args: &EvalArgs) -> Result<(String, Summary), CliError> {
    if args.episodes == 0 {
        return Err(CliError::Config("episodes must be at least 1".into()));
    }
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let mut env = make_env(ckpt.env()).map_err(|e| CliError::Shape(e.to_string()))?;
    let controller = ckpt.controller(env.spec())?;
    let action_dim = env.spec().action_dim;
    let mut failure = None;
    let returns = rollout_returns(env.as_mut(), &episode_seeds(args.seed, args.episodes), |s| match controller.act(s) {
        Ok(a) => a,
        Err(e) => {
            failure.get_or_insert(e);
            vec![0.0; action_dim]
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    let returns = returns.map_err(|e| CliError::Shape(e.to_string()))?;
    Ok((ckpt.env().to_string(), Summary::of(&returns)))
}

pub fn eval(args: &EvalArgs) -> Result<(), CliError> {
    let (env, s) = eval_summary(args)?;
    println!(
        "{}",
        json!({"env": env, "seed": args.seed, "episodes": s.episodes, "mean": s.mean, "std": s.std, "min": s.min, "max": s.max})
    );
    Ok(())
}

pub fn verify(args: &VerifyArgs) -> Result<(), CliError> {
    let outcomes = checks::run_all(args.seed, args.corrupt_tanh_correction);
    let mut failed = Vec::new();
    for o in &outcomes {
        println!(
            "{}",
            json!({"check": o.name, "passed": o.passed, "elapsed_ms": o.elapsed_ms as u64, "detail": o.detail})
        );
        if !o.passed {
            failed.push(o.name.to_string());
        }
    }
    println!("{}", json!({"seed": args.seed, "checks": outcomes.len(), "failed": failed}));
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::VerifyFailed(failed))
    }
}

pub fn plot(args: &PlotArgs) -> Result<(), CliError> {
    let curves = args
        .inputs
        .iter()
        .map(|p| read_curve(p, &p.display().to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    write_text(&args.out, &render_svg(&curves, &args.title))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

struct SweepRun {
    label: String,
    dir: PathBuf,
}

fn wait(label: &str, mut child: Child) -> Result<(), CliError> {
    let status = child.wait().map_err(|e| CliError::Sweep(format!("{label}: {e}")))?;
    if status.success() {
        Ok(())
    } else {
        Err(CliError::Sweep(format!("{label} exited with {status}")))
    }
}

pub fn sweep(args: &SweepArgs) -> Result<(), CliError> {
    let exe = std::env::current_exe().map_err(|e| CliError::Sweep(e.to_string()))?;
    // Validate once up front so a bad config fails before any process starts.
    let mut check = common_overrides(&args.common)?;
    check.insert("topology".into(), Value::from(args.topologies[0].as_str()));
    RunConfig::resolve(args.common.config.as_deref(), check)?;

    let mut runs = Vec::new();
    for topology in &args.topologies {
        for &seed in &args.seeds {
            let name = Path::new(topology).file_stem().map_or(topology.clone(), |s| s.to_string_lossy().into_owned());
            runs.push((
                SweepRun {
                    label: format!("{name} seed {seed}"),
                    dir: args.out_dir.join(format!("{name}-seed{seed}")),
                },
                topology.clone(),
                seed,
            ));
        }
    }
    let mut active: Vec<(String, Child)> = Vec::new();
    for (run, topology, seed) in &runs {
        let mut cmd = Process::new(&exe);
        cmd.arg("train").arg("--topology").arg(topology).arg("--seed").arg(seed.to_string());
        cmd.arg("--out-dir").arg(&run.dir).arg("--strip-timing");
        if let Some(c) = &args.common.config {
            cmd.arg("--config").arg(c);
        }
        if let Some(e) = &args.common.env {
            cmd.arg("--env").arg(e);
        }
        if let Some(s) = args.common.steps {
            cmd.arg("--steps").arg(s.to_string());
        }
        for s in &args.common.set {
            cmd.arg("--set").arg(s);
        }
        log::info!("starting {}", run.label);
        let child = cmd.spawn().map_err(|e| CliError::Sweep(format!("{}: {e}", run.label)))?;
        active.push((run.label.clone(), child));
        if active.len() >= args.jobs.max(1) {
            let (label, child) = active.remove(0);
            wait(&label, child)?;
        }
    }
    for (label, child) in active {
        wait(&label, child)?;
    }
    let curves = runs
        .iter()
        .map(|(r, _, _)| read_curve(&r.dir.join("metrics.csv"), &r.label))
        .collect::<Result<Vec<_>, _>>()?;
    let out = args.out_dir.join("overlay.svg");
    write_text(&out, &render_svg(&curves, "avg_return_100 by topology and seed"))?;
    log::info!("wrote {}", out.display());
    Ok(())
}

pub fn export_lqr(args: &ExportLqrArgs) -> Result<(), CliError> {
    let carts = match args.env.strip_prefix("chain-lqr-").and_then(|n| n.parse::<usize>().ok()) {
        Some(n) if ENV_IDS.contains(&args.env.as_str()) => n,
        _ => return Err(CliError::Config(format!("{:?} is not a registered chain environment", args.env))),
    };
    let ckpt = Checkpoint::lqr(&args.env, &ChainLqrEnv::new(carts))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
    }
    ckpt.save(&args.out)
}
