mod common;

use common::{random_task, small_kernel};
use deepacq::acquisition::{AcquisitionConfig, AcquisitionKind};
use deepacq::diffmath::{finite_difference_check, ParameterVector, Tape};
use deepacq::policy::{DeepKernelPolicy, DeepSetsPolicy, DifferentiablePolicy};
use deepacq::seeding::stream_rng;
use deepacq::tasks::{generate_synthetic_suite, Family, GeneratorSpec, TaskDataset};
use deepacq::trainer::{
    data_scaled_start, meta_train, pretrain, reinforce_loss, replay, replay_on, rollout, rollout_from, training_nll,
    PretrainConfig, SurrogateProgram, TrainConfig,
};

fn mi_policy(dim: usize, nu: f64) -> DeepKernelPolicy {
    DeepKernelPolicy::new("ours", small_kernel(dim, 21), AcquisitionConfig::new(AcquisitionKind::Mi, nu).unwrap())
}

fn sampled_batch<P: DifferentiablePolicy>(policy: &P, tasks: &[TaskDataset]) -> Vec<deepacq::trainer::Episode> {
    tasks
        .iter()
        .enumerate()
        .map(|(i, t)| rollout(policy, t, 1, 3, 0.9, &mut stream_rng(7, &[i as u64])).unwrap())
        .collect()
}

/// Responses shrunk so the surrogate is small: at coordinates whose exact
/// gradient is zero, central differences return roundoff proportional to
/// the loss.
fn small_response_task(id: &str, seed: u64) -> TaskDataset {
    let mut t = random_task(id, 8, 2, seed);
    t.responses.iter_mut().for_each(|y| *y *= 1e-3);
    t
}

#[test]
fn reinforce_gradient_matches_finite_differences() {
    let tasks: Vec<TaskDataset> = (0..3).map(|i| small_response_task(&format!("t{i}"), 30 + i)).collect();
    let refs: Vec<&TaskDataset> = tasks.iter().collect();
    let kernel = mi_policy(2, 2e-4);
    let (f, g, h) = DeepSetsPolicy::architecture(2, 3);
    let sets = DeepSetsPolicy::from_specs(f, g, h, &mut stream_rng(4, &[])).unwrap();

    let batch = sampled_batch(&kernel, &tasks);
    let loss = reinforce_loss(&batch).unwrap();
    let program = SurrogateProgram::from_batch(&kernel, &refs, &batch).unwrap();
    let report = finite_difference_check(&program, kernel.params(), 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.worst());
    assert!((deepacq::diffmath::evaluate(&program, kernel.params()).unwrap() - loss.value).abs() < 1e-15);

    let batch = sampled_batch(&sets, &tasks);
    let program = SurrogateProgram::from_batch(&sets, &refs, &batch).unwrap();
    let report = finite_difference_check(&program, sets.params(), 1e-5, 1e-4).unwrap();
    assert!(report.passed, "{:?}", report.worst());
    let loss = reinforce_loss(&batch).unwrap();
    let analytic = program_gradient(&program, sets.params());
    for (a, b) in loss.gradient.values().iter().zip(analytic.values()) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

fn program_gradient<P: deepacq::diffmath::Program>(program: &P, point: &ParameterVector) -> ParameterVector {
    let (tape, _) = deepacq::diffmath::record(program, point).unwrap();
    tape.backward().unwrap()
}

/// Every ordered pair of distinct queries on a 4-candidate task with no
/// initial points.
fn all_sequences() -> Vec<[usize; 2]> {
    let mut out = Vec::new();
    for a in 0..4 {
        for b in 0..4 {
            if a != b {
                out.push([a, b]);
            }
        }
    }
    out
}

/// Log-probability of `seq` with the scorer state pinned to `states`.
fn pinned_log_prob(policy: &DeepKernelPolicy, task: &TaskDataset, seq: &[usize], states: &[Vec<f64>]) -> f64 {
    let mut tape = Tape::new();
    let pv = tape.bind(policy.params()).unwrap();
    let lps = replay_on(policy, &mut tape, &pv, task, &[], seq, Some(states)).unwrap();
    lps.iter().map(|&v| tape.scalar(v).unwrap()).sum()
}

fn cumulative_gap(task: &TaskDataset, seq: &[usize]) -> f64 {
    let best = task.max_response();
    let mut so_far = f64::NEG_INFINITY;
    seq.iter()
        .map(|&i| {
            so_far = so_far.max(task.responses[i]);
            best - so_far
        })
        .sum()
}

#[test]
fn enumerated_policy_gradient_is_the_gradient_of_expected_cost() {
    let task = random_task("tiny", 4, 2, 50);
    let policy = mi_policy(2, 1.0);
    let seqs = all_sequences();
    assert_eq!(seqs.len(), 12);

    // With gamma = 1 the returns-weighted score function is the exact
    // gradient of the expected cumulative gap, with xi held at its values
    // under the current parameters.
    let mut exact = ParameterVector::zeros(policy.params().layout().clone());
    let mut with_baseline = exact.clone();
    let baseline = [0.37, -1.2];
    for seq in &seqs {
        let r = replay(&policy, &task, &[], seq).unwrap();
        let p: f64 = r.log_probs.iter().map(|&v| r.tape.scalar(v).unwrap()).sum::<f64>().exp();
        let gaps: Vec<f64> = (1..=2)
            .map(|t| task.max_response() - seq[..t].iter().map(|&i| task.responses[i]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        let returns = [gaps[0] + gaps[1], gaps[1]];
        let plain: Vec<_> = r.log_probs.iter().zip(&returns).map(|(&v, g)| (v, p * g)).collect();
        let shifted: Vec<_> =
            r.log_probs.iter().zip(returns.iter().zip(&baseline)).map(|(&v, (g, b))| (v, p * (g - b))).collect();
        exact.axpy(1.0, &r.tape.gradient_weighted(&plain).unwrap()).unwrap();
        with_baseline.axpy(1.0, &r.tape.gradient_weighted(&shifted).unwrap()).unwrap();
    }
    for (a, b) in exact.values().iter().zip(with_baseline.values()) {
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
    }

    let states: Vec<Vec<Vec<f64>>> = seqs.iter().map(|s| replay(&policy, &task, &[], s).unwrap().states).collect();
    let expected_cost = |point: &ParameterVector| -> f64 {
        let p = policy.with_params(point.clone()).unwrap();
        seqs.iter()
            .zip(&states)
            .map(|(s, st)| pinned_log_prob(&p, &task, s, st).exp() * cumulative_gap(&task, s))
            .sum()
    };
    let h = 1e-6;
    for i in 0..exact.len() {
        let mut plus = policy.params().clone();
        plus.values_mut()[i] += h;
        let mut minus = policy.params().clone();
        minus.values_mut()[i] -= h;
        let fd = (expected_cost(&plus) - expected_cost(&minus)) / (2.0 * h);
        let a = exact.values()[i];
        assert!((a - fd).abs() <= 1e-6 * a.abs().max(fd.abs()).max(1e-4), "coord {i}: {a} vs {fd}");
    }
}

#[test]
fn rollouts_are_reproducible_and_well_formed() {
    let task = random_task("t", 20, 3, 60);
    let policy = mi_policy(3, 4.0);
    for seed in 0..30u64 {
        let a = rollout(&policy, &task, 2, 6, 0.8, &mut stream_rng(seed, &[])).unwrap();
        let b = rollout(&policy, &task, 2, 6, 0.8, &mut stream_rng(seed, &[])).unwrap();
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.log_probs, b.log_probs);

        let mut seen = a.initial_set.clone();
        for (t, &act) in a.actions.iter().enumerate() {
            assert!(!seen.contains(&act));
            seen.push(act);
            assert_eq!(a.support_sizes[t], task.len() - 2 - t);
            assert!((a.probability_sums[t] - 1.0).abs() <= 1e-12);
            assert!(a.log_probs[t] <= 0.0);
        }
        for t in 1..a.gaps.len() {
            assert!(a.gaps[t] <= a.gaps[t - 1]);
        }
        for t in 0..a.returns.len() {
            let next = a.returns.get(t + 1).copied().unwrap_or(0.0);
            assert_eq!(a.returns[t], a.gaps[t] + 0.8 * next);
        }
    }
    let forced = rollout_from(&policy, &task, &[3], 2, 1.0, &mut stream_rng(1, &[])).unwrap();
    let replayed = replay(&policy, &task, &[3], &forced.actions).unwrap();
    for (v, lp) in replayed.log_probs.iter().zip(&forced.log_probs) {
        assert_eq!(replayed.tape.scalar(*v).unwrap(), *lp);
    }
}

fn tiny_suite() -> deepacq::tasks::TaskSuite {
    let spec = GeneratorSpec {
        n_train: 6,
        n_validation: 3,
        n_test: 0,
        n_candidates: 20,
        dim: 3,
        response_scale: 1.0,
        ..GeneratorSpec::new(Family::NearestTarget)
    };
    generate_synthetic_suite(&spec, 3).unwrap()
}

#[test]
fn meta_train_without_epochs_returns_the_start() {
    let suite = tiny_suite();
    let policy = mi_policy(3, 2.0);
    let init = suite.fixed_initial_points(deepacq::tasks::Split::Validation, 1).unwrap();
    let config = TrainConfig { max_epochs: 0, queries: 4, ..TrainConfig::default() };
    let out = meta_train(&policy, &suite.train, &suite.validation, &init, &config).unwrap();
    assert_eq!(out.best, policy);
    assert_eq!(out.best_epoch, 0);
    assert!(out.log.is_empty());
    assert!(out.optimizer.is_none());
    assert_eq!(out.best_validation_gap, out.initial_validation_gap);
}

#[test]
fn meta_train_is_reproducible_and_keeps_the_best_epoch() {
    let suite = tiny_suite();
    let policy = mi_policy(3, 2.0);
    let init = suite.fixed_initial_points(deepacq::tasks::Split::Validation, 1).unwrap();
    let config = TrainConfig { max_epochs: 4, queries: 4, batch_episodes: 4, learning_rate: 1e-2, ..TrainConfig::default() };
    let a = meta_train(&policy, &suite.train, &suite.validation, &init, &config).unwrap();
    let b = meta_train(&policy, &suite.train, &suite.validation, &init, &config).unwrap();
    assert_eq!(a.best, b.best);
    assert_eq!(a.log.len(), 4);
    for (x, y) in a.log.iter().zip(&b.log) {
        assert_eq!((x.train_loss, x.train_gap, x.validation_gap), (y.train_loss, y.train_gap, y.validation_gap));
    }
    let min = a.log.iter().map(|e| e.validation_gap).fold(a.initial_validation_gap, f64::min);
    assert_eq!(a.best_validation_gap, min);
}

#[test]
fn pretraining_lowers_training_nll() {
    let spec = GeneratorSpec {
        n_train: 10,
        n_validation: 0,
        n_test: 0,
        n_candidates: 40,
        dim: 4,
        response_scale: 1.0,
        ..GeneratorSpec::new(Family::GpDraw)
    };
    let suite = generate_synthetic_suite(&spec, 8).unwrap();
    let start = data_scaled_start(&suite.train, &small_kernel(4, 2)).unwrap();
    let config = PretrainConfig { steps: 200, ..PretrainConfig::default() };
    let out = pretrain(&suite.train, &start, &config).unwrap();
    assert_eq!(out.step_nll.len(), 200);
    let before = training_nll(&suite.train, &start, 256, 0).unwrap();
    let after = training_nll(&suite.train, &out.params, 256, 0).unwrap();
    assert!(after < before, "{after} !< {before}");

    let none = pretrain(&suite.train, &start, &PretrainConfig { steps: 0, ..config }).unwrap();
    assert_eq!(none.params, start);
}

#[test]
fn meta_training_lowers_the_validation_gap() {
    let spec = GeneratorSpec {
        n_train: 40,
        n_validation: 10,
        n_test: 0,
        n_candidates: 30,
        dim: 3,
        response_scale: 1.0,
        ..GeneratorSpec::new(Family::NearestTarget)
    };
    let suite = generate_synthetic_suite(&spec, 11).unwrap();
    let policy = mi_policy(3, 14.508657738524219);
    let init = suite.fixed_initial_points(deepacq::tasks::Split::Validation, 1).unwrap();
    let config = TrainConfig {
        max_epochs: 500,
        patience: 0,
        queries: 5,
        ..TrainConfig::default()
    };
    let out = meta_train(&policy, &suite.train, &suite.validation, &init, &config).unwrap();
    assert_eq!(out.log.len(), 500);
    let last = out.log.last().unwrap().validation_gap;
    assert!(last < out.initial_validation_gap, "{last} !< {}", out.initial_validation_gap);
}
