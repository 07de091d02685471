//! Policy construction, training and comparison shared by the commands.

use std::fmt;
use std::str::FromStr;

use deepacq::acquisition::{AcquisitionConfig, AcquisitionKind};
use deepacq::deepkernel::{KernelParams, MlpSpec};
use deepacq::policy::{Checkpoint, DeepKernelPolicy, DeepSetsPolicy, MetaBoPolicy, Model, Policy, PolicyKind};
use deepacq::seeding::{derive_seed, stream_rng};
use deepacq::stats::{sign_test, SignTest};
use deepacq::tasks::{evaluate_gaps, initial_points_for, EvalConfig, GapCurve, Split, TaskDataset, TaskSuite};
use deepacq::trainer::{data_scaled_start, meta_train, pretrain, Adam, LogEntry, PretrainConfig, TrainConfig};
use deepacq::{Error, Result};
use serde::Serialize;

/// Marginal-likelihood steps used to fit the plain RBF GP of the `gp` and
/// `metabo` policies. Three hyperparameters converge well within this.
pub const GP_FIT_STEPS: usize = 200;
pub const GP_FIT_LEARNING_RATE: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Settings {
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
}

/// Deep kernel after marginal-likelihood pretraining.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub kernel: KernelParams,
    pub optimizer: Option<Adam>,
    pub step_nll: Vec<f64>,
}

pub fn pretrain_deep_kernel(train: &[TaskDataset], config: &PretrainConfig) -> Result<Pretrained> {
    let dim = dim_of(train)?;
    let init = KernelParams::new(MlpSpec::default_for(dim), &mut stream_rng(config.seed, &[0x1a17]))?;
    let start = data_scaled_start(train, &init)?;
    let out = pretrain(train, &start, config)?;
    Ok(Pretrained {
        kernel: out.params,
        optimizer: Some(out.optimizer),
        step_nll: out.step_nll,
    })
}

/// Plain RBF kernel on raw features, fit by marginal likelihood.
pub fn fit_plain_gp(train: &[TaskDataset], seed: u64) -> Result<KernelParams> {
    let dim = dim_of(train)?;
    let init = KernelParams::new(MlpSpec::identity(dim), &mut stream_rng(seed, &[0x1a19]))?;
    let start = data_scaled_start(train, &init)?;
    let config = PretrainConfig {
        steps: GP_FIT_STEPS,
        learning_rate: GP_FIT_LEARNING_RATE,
        seed: derive_seed(seed, &[0x1a19]),
        ..PretrainConfig::default()
    };
    Ok(pretrain(train, &start, &config)?.params)
}

fn dim_of(tasks: &[TaskDataset]) -> Result<usize> {
    tasks
        .first()
        .map(TaskDataset::dim)
        .ok_or_else(|| Error::contract("no training tasks"))
}

/// Fitted components reused by several policies of one run.
#[derive(Default)]
pub struct Fitted {
    pub deep: Option<Pretrained>,
    pub gp: Option<KernelParams>,
}

impl Fitted {
    fn deep(&mut self, train: &[TaskDataset], config: &PretrainConfig) -> Result<&Pretrained> {
        if self.deep.is_none() {
            self.deep = Some(pretrain_deep_kernel(train, config)?);
        }
        Ok(self.deep.as_ref().expect("just set"))
    }

    fn gp(&mut self, train: &[TaskDataset], seed: u64) -> Result<&KernelParams> {
        if self.gp.is_none() {
            self.gp = Some(fit_plain_gp(train, seed)?);
        }
        Ok(self.gp.as_ref().expect("just set"))
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub checkpoint: Checkpoint,
    /// Meta-training log; empty for policies that are not meta-trained.
    pub log: Vec<LogEntry>,
    pub initial_validation_gap: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Builds and, where applicable, meta-trains one policy.
pub fn train_policy(
    kind: PolicyKind,
    acquisition: AcquisitionConfig,
    suite: &TaskSuite,
    settings: &Settings,
    fitted: &mut Fitted,
) -> Result<Trained> {
    let train = &suite.train;
    let seed = settings.train.seed;
    let done = |model: Model, optimizer: Option<Adam>| Trained {
        checkpoint: Checkpoint::new(kind, model, optimizer),
        log: Vec::new(),
        initial_validation_gap: None,
        best_epoch: None,
    };
    match kind {
        PolicyKind::Random => Ok(done(Model::Random, None)),
        PolicyKind::Dkl => {
            let pre = fitted.deep(train, &settings.pretrain)?;
            let policy = DeepKernelPolicy::new("dkl", pre.kernel.clone(), acquisition);
            Ok(done(Model::DeepKernel(policy), pre.optimizer.clone()))
        }
        PolicyKind::Gp => {
            let gp = fitted.gp(train, seed)?.clone();
            Ok(done(Model::DeepKernel(DeepKernelPolicy::new("gp", gp, acquisition)), None))
        }
        PolicyKind::Ours => {
            let pre = fitted.deep(train, &settings.pretrain)?;
            let policy = DeepKernelPolicy::new("ours", pre.kernel.clone(), acquisition);
            let start_opt = pre.optimizer.clone();
            meta_train_into(kind, policy, start_opt, suite, settings, Model::DeepKernel)
        }
        PolicyKind::Rl => {
            let dim = dim_of(train)?;
            let policy = DeepSetsPolicy::new(dim, &mut stream_rng(seed, &[0x1a18]))?;
            meta_train_into(kind, policy, None, suite, settings, Model::DeepSets)
        }
        PolicyKind::Metabo => {
            let gp = fitted.gp(train, seed)?.clone();
            let policy = MetaBoPolicy::new(gp, &mut stream_rng(seed, &[0x1a1a]))?;
            meta_train_into(kind, policy, None, suite, settings, Model::MetaBo)
        }
    }
}

/// Meta-trains `policy` from its current parameters. When no epoch runs
/// the start optimizer is kept, so the checkpoint equals the input.
pub fn meta_train_into<P>(
    kind: PolicyKind,
    policy: P,
    start_optimizer: Option<Adam>,
    suite: &TaskSuite,
    settings: &Settings,
    wrap: fn(P) -> Model,
) -> Result<Trained>
where
    P: deepacq::policy::DifferentiablePolicy + Policy,
{
    let cfg = &settings.train;
    let validation_initial =
        initial_points_for(&suite.validation, cfg.seed, Split::Validation, cfg.initial_points)?;
    let out = meta_train(&policy, &suite.train, &suite.validation, &validation_initial, cfg)?;
    let optimizer = out.optimizer.or(start_optimizer);
    Ok(Trained {
        checkpoint: Checkpoint::new(kind, wrap(out.best), optimizer),
        log: out.log,
        initial_validation_gap: Some(out.initial_validation_gap),
        best_epoch: Some(out.best_epoch),
    })
}

/// A policy requested by label, e.g. `ours-mi`, `gp-ucb`, `rl`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PolicySpec {
    pub kind: PolicyKind,
    pub acquisition: Option<AcquisitionKind>,
}

impl PolicySpec {
    pub fn acquisition_config(&self, nu: f64) -> Result<AcquisitionConfig> {
        AcquisitionConfig::new(self.acquisition.unwrap_or(AcquisitionKind::Mi), nu)
    }
}

impl fmt::Display for PolicySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.acquisition {
            Some(a) => write!(f, "{}-{a}", self.kind),
            None => write!(f, "{}", self.kind),
        }
    }
}

impl FromStr for PolicySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, acq) = match s.split_once('-') {
            Some((k, a)) => (k.parse::<PolicyKind>()?, Some(a.parse::<AcquisitionKind>()?)),
            None => (s.parse::<PolicyKind>()?, None),
        };
        match (kind.uses_acquisition(), acq) {
            (true, None) => Ok(PolicySpec {
                kind,
                acquisition: Some(AcquisitionKind::Mi),
            }),
            (true, a) => Ok(PolicySpec { kind, acquisition: a }),
            (false, None) => Ok(PolicySpec { kind, acquisition: None }),
            (false, Some(_)) => Err(Error::Config(format!("policy `{kind}` takes no acquisition, got `{s}`"))),
        }
    }
}

/// One entry of a comparison: trained per repeat or loaded once.
pub enum Contender {
    Train(PolicySpec),
    Loaded { label: String, checkpoint: Checkpoint },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairTest {
    pub lower: String,
    pub higher: String,
    pub test: SignTest,
}

pub struct Comparison {
    pub curves: Vec<GapCurve>,
    pub sign_tests: Vec<PairTest>,
}

/// Seed of repeat `r` of a comparison run.
pub fn repeat_seed(seed: u64, r: usize) -> u64 {
    if r == 0 {
        seed
    } else {
        derive_seed(seed, &[0xc0de, r as u64])
    }
}

/// Trains (per repeat) and evaluates every contender on the test split from
/// the suite's fixed initial points. Gap rows are averaged over repeats
/// per task before the curves and the sign tests are formed.
/// `on_trained(label, repeat, trained)` sees every trained policy.
pub fn compare(
    suite: &TaskSuite,
    contenders: &[Contender],
    settings: &Settings,
    nu: f64,
    repeats: usize,
    mut on_trained: impl FnMut(&str, usize, &Trained) -> Result<()>,
) -> Result<Comparison> {
    if contenders.is_empty() {
        return Err(Error::Config("no policies to compare".into()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".into()));
    }
    let queries = settings.train.queries;
    let test = &suite.test;
    if test.is_empty() {
        return Err(Error::Config("suite has no test tasks".into()));
    }
    let initial = suite.fixed_initial_points(Split::Test, settings.train.initial_points)?;
    let labels: Vec<String> = contenders
        .iter()
        .map(|c| match c {
            Contender::Train(spec) => spec.to_string(),
            Contender::Loaded { label, .. } => label.clone(),
        })
        .collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::Config(format!("policy `{l}` listed twice")));
        }
    }
    let mut sums: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; queries]; test.len()]; contenders.len()];
    for r in 0..repeats {
        let seed = repeat_seed(settings.train.seed, r);
        let repeat_settings = Settings {
            train: TrainConfig { seed, ..settings.train.clone() },
            pretrain: PretrainConfig { seed, ..settings.pretrain.clone() },
        };
        let mut fitted = Fitted::default();
        let eval = EvalConfig {
            queries,
            repeats: 1,
            seed,
        };
        for (c, contender) in contenders.iter().enumerate() {
            let policy: Box<dyn Policy> = match contender {
                Contender::Train(spec) => {
                    let trained = train_policy(
                        spec.kind,
                        spec.acquisition_config(nu)?,
                        suite,
                        &repeat_settings,
                        &mut fitted,
                    )?;
                    on_trained(&labels[c], r, &trained)?;
                    trained.checkpoint.into_policy()
                }
                Contender::Loaded { checkpoint, .. } => checkpoint.clone().into_policy(),
            };
            let gaps = evaluate_gaps(test, &initial, policy.as_ref(), &eval)?;
            for (acc, row) in sums[c].iter_mut().zip(gaps) {
                for (a, g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
        }
    }
    let ids: Vec<String> = test.iter().map(|t| t.task_id.clone()).collect();
    let curves = sums
        .into_iter()
        .zip(&labels)
        .map(|(rows, label)| {
            let avg: Vec<Vec<f64>> = rows
                .into_iter()
                .map(|row| row.into_iter().map(|g| g / repeats as f64).collect())
                .collect();
            GapCurve::from_gaps(label.clone(), ids.clone(), &avg)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sign_tests = Vec::new();
    for a in &curves {
        for b in &curves {
            if a.label != b.label {
                sign_tests.push(PairTest {
                    lower: a.label.clone(),
                    higher: b.label.clone(),
                    test: sign_test(&a.per_task_r_hat, &b.per_task_r_hat),
                });
            }
        }
    }
    Ok(Comparison { curves, sign_tests })
}
