use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use deepacq::acquisition::AcquisitionConfig;
use deepacq::policy::{Checkpoint, DeepKernelPolicy, Model, Policy, PolicyKind, RandomPolicy};
use deepacq::tasks::{evaluate, generate_synthetic_suite, load_suite, save_suite, EvalConfig, GeneratorSpec};
use deepacq::trainer::{LogEntry, PretrainConfig, TrainConfig};
use serde_json::json;

use crate::args::{
    AcquisitionArgs, Cli, Command, CommonArgs, CompareArgs, EvalArgs, GenTasksArgs, LoopArgs, PretrainArgs,
    PretrainFlags, TrainArgs,
};
use crate::pipeline::{self, Contender, Fitted, PolicySpec, Pretrained, Settings, Trained};

pub const CONFIG_FILE: &str = "config.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const GAP_CURVE_FILE: &str = "gap_curve.csv";

/// Flag combinations rejected before any work starts.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let common = match &cli.command {
        Command::GenTasks(a) => &a.common,
        Command::Pretrain(a) => &a.common,
        Command::Train(a) => &a.common,
        Command::Eval(a) => &a.common,
        Command::Compare(a) => &a.common,
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(common.threads)
        .build()
        .context("cannot start worker threads")?;
    pool.install(|| match &cli.command {
        Command::GenTasks(a) => gen_tasks(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Compare(a) => compare(a),
    })
}

fn prepare_out(common: &CommonArgs, suite: Option<&Path>) -> anyhow::Result<()> {
    if let Some(suite) = suite {
        if let (Ok(s), Ok(o)) = (suite.canonicalize(), common.out.canonicalize()) {
            if o.starts_with(&s) {
                return Err(usage(format!(
                    "output directory {} lies inside the suite {}",
                    common.out.display(),
                    suite.display()
                )));
            }
        }
    }
    fs::create_dir_all(&common.out).with_context(|| format!("cannot create {}", common.out.display()))
}

fn write_config(out: &Path, value: serde_json::Value) -> anyhow::Result<()> {
    let path = out.join(CONFIG_FILE);
    fs::write(&path, serde_json::to_string_pretty(&value)? + "\n")
        .with_context(|| format!("cannot write {}", path.display()))
}

fn acquisition(args: &AcquisitionArgs) -> anyhow::Result<AcquisitionConfig> {
    Ok(AcquisitionConfig::new(args.acquisition, args.nu)?)
}

fn pretrain_config(flags: &PretrainFlags, seed: u64) -> PretrainConfig {
    let d = PretrainConfig::default();
    PretrainConfig {
        steps: flags.pretrain_epochs.unwrap_or(d.steps),
        learning_rate: flags.pretrain_lr,
        seed,
        ..d
    }
}

fn train_config(args: &LoopArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        gamma: args.gamma,
        queries: args.queries,
        batch_episodes: args.batch_episodes,
        learning_rate: args.lr,
        max_epochs: args.epochs,
        patience: args.patience,
        seed,
        ..TrainConfig::default()
    }
}

fn check_pretrain_flags(kind: PolicyKind, flags: &PretrainFlags) -> anyhow::Result<()> {
    if flags.pretrain_epochs.is_some() && !kind.uses_pretraining() {
        return Err(usage(format!("--pretrain-epochs does not apply to --policy {kind}")));
    }
    Ok(())
}

fn validate_settings(settings: &Settings) -> anyhow::Result<()> {
    settings.train.validate().map_err(|e| usage(e.to_string()))?;
    settings.pretrain.validate().map_err(|e| usage(e.to_string()))?;
    Ok(())
}

fn gen_tasks(a: &GenTasksArgs) -> anyhow::Result<()> {
    let spec = GeneratorSpec {
        n_train: a.n_train,
        n_validation: a.n_validation,
        n_test: a.n_test,
        n_candidates: a.n_candidates,
        dim: a.dim,
        response_scale: a.response_scale,
        target_clusters: a.target_clusters,
        target_spread: a.target_spread,
        center_responses: !a.uncentered,
        ..GeneratorSpec::new(a.family)
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    prepare_out(&a.common, None)?;
    let suite = generate_synthetic_suite(&spec, a.common.seed)?;
    save_suite(&suite, &a.common.out)?;
    write_config(
        &a.common.out,
        json!({
            "command": "gen-tasks",
            "seed": a.common.seed,
            "threads": a.common.threads,
            "generator": spec,
        }),
    )?;
    println!(
        "wrote {} train / {} validation / {} test tasks to {}",
        suite.train.len(),
        suite.validation.len(),
        suite.test.len(),
        a.common.out.display()
    );
    Ok(())
}

fn deep_kernel_checkpoint(kind: PolicyKind, pre: &Pretrained, acq: AcquisitionConfig) -> Checkpoint {
    let policy = DeepKernelPolicy::new(kind.as_str(), pre.kernel.clone(), acq);
    Checkpoint::new(kind, Model::DeepKernel(policy), pre.optimizer.clone())
}

fn pretrain(a: &PretrainArgs) -> anyhow::Result<()> {
    if !a.policy.uses_pretraining() {
        return Err(usage(format!("pretrain applies to ours and dkl, not {}", a.policy)));
    }
    let acq = acquisition(&a.acquisition).map_err(|e| usage(e.to_string()))?;
    let config = pretrain_config(&a.pretrain, a.common.seed);
    config.validate().map_err(|e| usage(e.to_string()))?;
    prepare_out(&a.common, Some(&a.suite))?;
    let suite = load_suite(&a.suite)?;
    let pre = pipeline::pretrain_deep_kernel(&suite.train, &config)?;
    deep_kernel_checkpoint(a.policy, &pre, acq).save(&a.common.out.join(CHECKPOINT_FILE))?;
    write_pretrain_log(&a.common.out.join(PRETRAIN_LOG_FILE), &pre.step_nll)?;
    write_config(
        &a.common.out,
        json!({
            "command": "pretrain",
            "suite": a.suite,
            "policy": a.policy,
            "acquisition": acq,
            "pretrain": config,
            "seed": a.common.seed,
            "threads": a.common.threads,
        }),
    )?;
    match (pre.step_nll.first(), pre.step_nll.last()) {
        (Some(first), Some(last)) => println!("pretrained {} steps: nll {first:.6} -> {last:.6}", config.steps),
        _ => println!("no pretraining steps run"),
    }
    Ok(())
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    check_pretrain_flags(a.policy, &a.training.pretrain)?;
    if a.init.is_some() && a.training.pretrain.pretrain_epochs.is_some() {
        return Err(usage("--init and --pretrain-epochs are mutually exclusive"));
    }
    if a.init.is_some() && !a.policy.uses_pretraining() {
        return Err(usage(format!("--init does not apply to --policy {}", a.policy)));
    }
    let acq = acquisition(&a.acquisition).map_err(|e| usage(e.to_string()))?;
    let settings = Settings {
        train: train_config(&a.training, a.common.seed),
        pretrain: pretrain_config(&a.training.pretrain, a.common.seed),
    };
    validate_settings(&settings)?;
    prepare_out(&a.common, Some(&a.suite))?;
    let suite = load_suite(&a.suite)?;
    let mut fitted = Fitted::default();
    if let Some(path) = &a.init {
        fitted.deep = Some(load_pretrained(path)?);
    }
    let trained = pipeline::train_policy(a.policy, acq, &suite, &settings, &mut fitted)?;
    trained.checkpoint.save(&a.common.out.join(CHECKPOINT_FILE))?;
    if a.policy.is_meta_trained() {
        write_train_log(&a.common.out.join(TRAIN_LOG_FILE), &trained, a.training.log_wall_time)?;
    }
    if let Some(pre) = fitted.deep.as_ref().filter(|_| a.init.is_none()) {
        write_pretrain_log(&a.common.out.join(PRETRAIN_LOG_FILE), &pre.step_nll)?;
    }
    write_config(
        &a.common.out,
        json!({
            "command": "train",
            "suite": a.suite,
            "policy": a.policy,
            "init": a.init,
            "acquisition": acq,
            "train": settings.train,
            "pretrain": settings.pretrain,
            "log_wall_time": a.training.log_wall_time,
            "seed": a.common.seed,
            "threads": a.common.threads,
        }),
    )?;
    match (trained.initial_validation_gap, trained.best_epoch) {
        (Some(initial), Some(best_epoch)) => {
            let best = trained
                .log
                .iter()
                .find(|e| e.epoch == best_epoch)
                .map_or(initial, |e| e.validation_gap);
            println!(
                "trained {} for {} epochs: validation gap {initial:.6} -> {best:.6} (best epoch {best_epoch})",
                a.policy,
                trained.log.len()
            );
        }
        _ => println!("built {} policy", a.policy),
    }
    Ok(())
}

fn load_pretrained(path: &Path) -> anyhow::Result<Pretrained> {
    let ck = Checkpoint::load(path)?;
    match ck.model {
        Model::DeepKernel(p) if !p.kernel.mlp.layer_widths.is_empty() => Ok(Pretrained {
            kernel: p.kernel,
            optimizer: ck.optimizer,
            step_nll: Vec::new(),
        }),
        _ => bail!("{}: not a deep-kernel checkpoint", path.display()),
    }
}

fn eval(a: &EvalArgs) -> anyhow::Result<()> {
    let policy: Box<dyn Policy> = match (&a.checkpoint, a.policy) {
        (Some(path), kind) => {
            let ck = Checkpoint::load(path)?;
            if let Some(kind) = kind.filter(|&k| k != ck.policy) {
                return Err(usage(format!(
                    "--policy {kind} does not match checkpoint policy {}",
                    ck.policy
                )));
            }
            ck.into_policy()
        }
        (None, Some(PolicyKind::Random)) => Box::new(RandomPolicy),
        (None, Some(kind)) => return Err(usage(format!("--policy {kind} needs --checkpoint"))),
        (None, None) => return Err(usage("eval needs --checkpoint or --policy random")),
    };
    if a.queries == 0 || a.repeats == 0 {
        return Err(usage("--queries and --repeats must be >= 1"));
    }
    prepare_out(&a.common, Some(&a.suite))?;
    let suite = load_suite(&a.suite)?;
    let tasks = suite.split(a.split);
    if tasks.is_empty() {
        bail!("suite has no {} tasks", a.split);
    }
    let initial = suite.fixed_initial_points(a.split, TrainConfig::default().initial_points)?;
    let config = EvalConfig {
        queries: a.queries,
        repeats: a.repeats,
        seed: a.common.seed,
    };
    let curve = evaluate(tasks, &initial, policy.as_ref(), &config)?;
    curve.save_csv(&a.common.out.join(GAP_CURVE_FILE))?;
    write_per_task(&a.common.out.join("per_task.csv"), &curve.task_ids, &[&curve])?;
    write_config(
        &a.common.out,
        json!({
            "command": "eval",
            "suite": a.suite,
            "checkpoint": a.checkpoint,
            "policy": policy.label(),
            "split": a.split.to_string(),
            "eval": config,
            "initial_points": TrainConfig::default().initial_points,
            "seed": a.common.seed,
            "threads": a.common.threads,
        }),
    )?;
    println!(
        "{}: R_hat {:.6} (stderr {:.6}) over {} tasks",
        curve.label, curve.r_hat, curve.r_hat_stderr, curve.n_tasks
    );
    Ok(())
}

fn compare(a: &CompareArgs) -> anyhow::Result<()> {
    let specs = a
        .policies
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.parse::<PolicySpec>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    if specs.is_empty() && a.load.is_empty() {
        return Err(usage("compare needs at least one policy"));
    }
    if a.training.pretrain.pretrain_epochs.is_some() && !specs.iter().any(|s| s.kind.uses_pretraining()) {
        return Err(usage("--pretrain-epochs needs a pretrained policy (ours or dkl) in --policies"));
    }
    for s in &specs {
        s.acquisition_config(a.nu).map_err(|e| usage(e.to_string()))?;
    }
    let settings = Settings {
        train: train_config(&a.training, a.common.seed),
        pretrain: pretrain_config(&a.training.pretrain, a.common.seed),
    };
    validate_settings(&settings)?;
    if a.repeats == 0 {
        return Err(usage("--repeats must be >= 1"));
    }
    let mut contenders: Vec<Contender> = specs.iter().copied().map(Contender::Train).collect();
    for path in &a.load {
        let checkpoint = Checkpoint::load(path)?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| checkpoint.policy.to_string());
        contenders.push(Contender::Loaded { label, checkpoint });
    }
    prepare_out(&a.common, Some(&a.suite))?;
    let suite = load_suite(&a.suite)?;
    let out = &a.common.out;
    for sub in ["curves", "checkpoints", "logs"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let log_wall_time = a.training.log_wall_time;
    let result = pipeline::compare(&suite, &contenders, &settings, a.nu, a.repeats, |label, r, trained| {
        let stem = format!("{label}-r{r:02}");
        trained.checkpoint.save(&out.join("checkpoints").join(format!("{stem}.json")))?;
        if trained.initial_validation_gap.is_some() {
            write_train_log(&out.join("logs").join(format!("{stem}.csv")), trained, log_wall_time)
                .map_err(|e| deepacq::Error::Config(format!("{e:#}")))?;
        }
        Ok(())
    })?;
    for curve in &result.curves {
        curve.save_csv(&out.join("curves").join(format!("{}.csv", curve.label)))?;
    }
    let ids = &result.curves[0].task_ids;
    write_per_task(&out.join("per_task.csv"), ids, &result.curves.iter().collect::<Vec<_>>())?;
    let mut summary = csv::Writer::from_path(out.join("summary.csv"))?;
    summary.write_record(["policy", "r_hat", "stderr", "n_tasks"])?;
    for c in &result.curves {
        summary.write_record([
            c.label.clone(),
            c.r_hat.to_string(),
            c.r_hat_stderr.to_string(),
            c.n_tasks.to_string(),
        ])?;
    }
    summary.flush()?;
    let mut tests = csv::Writer::from_path(out.join("sign_tests.csv"))?;
    tests.write_record(["lower", "higher", "wins", "losses", "ties", "p_value"])?;
    for t in &result.sign_tests {
        tests.write_record([
            t.lower.clone(),
            t.higher.clone(),
            t.test.wins.to_string(),
            t.test.losses.to_string(),
            t.test.ties.to_string(),
            t.test.p_value.to_string(),
        ])?;
    }
    tests.flush()?;
    write_config(
        out,
        json!({
            "command": "compare",
            "suite": a.suite,
            "policies": contenders.iter().map(|c| match c {
                Contender::Train(s) => s.to_string(),
                Contender::Loaded { label, .. } => label.clone(),
            }).collect::<Vec<_>>(),
            "load": a.load,
            "nu": a.nu,
            "repeats": a.repeats,
            "train": settings.train,
            "pretrain": settings.pretrain,
            "gp_fit": { "steps": pipeline::GP_FIT_STEPS, "learning_rate": pipeline::GP_FIT_LEARNING_RATE },
            "log_wall_time": log_wall_time,
            "seed": a.common.seed,
            "threads": a.common.threads,
        }),
    )?;
    let mut ranked: Vec<_> = result.curves.iter().collect();
    ranked.sort_by(|x, y| x.r_hat.total_cmp(&y.r_hat));
    for c in ranked {
        println!("{:<12} R_hat {:.6}  stderr {:.6}", c.label, c.r_hat, c.r_hat_stderr);
    }
    Ok(())
}

fn write_pretrain_log(path: &Path, step_nll: &[f64]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "nll"])?;
    for (i, v) in step_nll.iter().enumerate() {
        w.write_record([(i + 1).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Epoch 0 holds the starting validation gap with empty loss columns.
fn write_train_log(path: &Path, trained: &Trained, wall_time: bool) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["epoch", "train_loss", "train_gap", "validation_gap"];
    if wall_time {
        header.push("wall_time");
    }
    w.write_record(&header)?;
    if let Some(initial) = trained.initial_validation_gap {
        let mut row = vec!["0".to_string(), String::new(), String::new(), initial.to_string()];
        if wall_time {
            row.push("0".into());
        }
        w.write_record(&row)?;
    }
    for LogEntry {
        epoch,
        train_loss,
        train_gap,
        validation_gap,
        wall_time: secs,
    } in &trained.log
    {
        let mut row = vec![
            epoch.to_string(),
            train_loss.to_string(),
            train_gap.to_string(),
            validation_gap.to_string(),
        ];
        if wall_time {
            row.push(format!("{secs:.3}"));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_per_task(path: &Path, ids: &[String], curves: &[&deepacq::tasks::GapCurve]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["task_id".to_string()];
    header.extend(curves.iter().map(|c| c.label.clone()));
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend(curves.iter().map(|c| c.per_task_r_hat[i].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
