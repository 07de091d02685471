mod common;

use common::{dense_posterior, mlp_forward, random_task, rel_err, small_kernel};
use deepacq::acquisition::{AcquisitionConfig, AcquisitionKind, MiState};
use deepacq::deepkernel::KernelParams;
use deepacq::policy::{
    score_candidates, unevaluated, DeepKernelPolicy, DeepSetsPolicy, DifferentiablePolicy, MetaBoPolicy, Policy,
};
use deepacq::diffmath::Tape;
use deepacq::seeding::stream_rng;
use deepacq::tasks::TaskDataset;

fn reference_score(kind: AcquisitionKind, nu: f64, mean: f64, var: f64, xi: f64, best: f64) -> f64 {
    match kind {
        AcquisitionKind::Mi => mean + nu.sqrt() * ((var + xi).sqrt() - xi.sqrt()),
        AcquisitionKind::Ucb => mean + (nu * var).sqrt(),
        AcquisitionKind::Ei => {
            let s = var.sqrt();
            let z = (mean - best) / s;
            let cdf = 0.5 * libm::erfc(-z / std::f64::consts::SQRT_2);
            let pdf = (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
            (mean - best) * cdf + s * pdf
        }
    }
}

/// Greedy loop written out with dense posteriors; returns the chosen
/// indices and the scores seen at each step.
fn reference_run(
    task: &TaskDataset,
    kernel: &KernelParams,
    kind: AcquisitionKind,
    nu: f64,
    initial: &[usize],
    queries: usize,
) -> (Vec<usize>, Vec<Vec<f64>>) {
    let mut evaluated = initial.to_vec();
    let mut xi = 0.0;
    let (mut picks, mut all) = (Vec::new(), Vec::new());
    for _ in 0..queries {
        let xs: Vec<Vec<f64>> = evaluated.iter().map(|&i| task.features.row(i).to_vec()).collect();
        let ys: Vec<f64> = evaluated.iter().map(|&i| task.responses[i]).collect();
        let best = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut scores = Vec::new();
        let mut vars = Vec::new();
        for c in unevaluated(task.len(), &evaluated) {
            let (m, v) = dense_posterior(kernel, &xs, &ys, task.features.row(c));
            scores.push(reference_score(kind, nu, m, v, xi, best));
            vars.push((c, v));
        }
        let mut pos = 0;
        for p in 1..scores.len() {
            if scores[p] > scores[pos] {
                pos = p;
            }
        }
        let (chosen, v) = vars[pos];
        xi += v;
        evaluated.push(chosen);
        picks.push(chosen);
        all.push(scores);
    }
    (picks, all)
}

#[test]
fn kernel_policy_scores_match_dense_reference() {
    let task = random_task("t", 12, 3, 4);
    let kernel = small_kernel(3, 5);
    for kind in [AcquisitionKind::Mi, AcquisitionKind::Ucb, AcquisitionKind::Ei] {
        let acq = AcquisitionConfig::new(kind, 2.0).unwrap();
        let (picks, scores) = reference_run(&task, &kernel, kind, 2.0, &[3], 5);
        let policy = DeepKernelPolicy::new("dk", kernel.clone(), acq);
        let got = policy.run_greedy(&task, &[3], 5, &mut stream_rng(0, &[])).unwrap();
        assert_eq!(got, picks, "{kind}");

        let mut evaluated = vec![3];
        let mut state = MiState::new();
        for (t, expected) in scores.iter().enumerate() {
            let (support, values) = score_candidates(&task, &evaluated, &kernel, &acq, &state).unwrap();
            assert_eq!(support, unevaluated(task.len(), &evaluated));
            for (a, b) in values.iter().zip(expected) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3), "{kind} step {t}: {a} vs {b}");
            }
            let (_, var) = {
                let xs: Vec<Vec<f64>> = evaluated.iter().map(|&i| task.features.row(i).to_vec()).collect();
                let ys: Vec<f64> = evaluated.iter().map(|&i| task.responses[i]).collect();
                dense_posterior(&kernel, &xs, &ys, task.features.row(picks[t]))
            };
            state = state.advance(var).unwrap();
            evaluated.push(picks[t]);
        }
    }
}

#[test]
fn mi_with_huge_nu_explores_far_from_the_initial_point() {
    let task = random_task("t", 15, 2, 8);
    let kernel = small_kernel(2, 9);
    let acq = AcquisitionConfig::new(AcquisitionKind::Mi, 1e8).unwrap();
    let policy = DeepKernelPolicy::new("dk", kernel.clone(), acq);
    let first = policy.run_greedy(&task, &[0], 1, &mut stream_rng(0, &[])).unwrap()[0];
    let x0 = vec![task.features.row(0).to_vec()];
    let var = |c: usize| dense_posterior(&kernel, &x0, &[task.responses[0]], task.features.row(c)).1;
    let most_uncertain = (1..task.len()).max_by(|&a, &b| var(a).total_cmp(&var(b))).unwrap();
    assert_eq!(first, most_uncertain);
}

fn logits_of<P: DifferentiablePolicy>(policy: &P, task: &TaskDataset, evaluated: &[usize]) -> Vec<f64> {
    let mut tape = Tape::new();
    let pv = tape.bind_frozen(policy.params()).unwrap();
    let mut scorer = policy.scorer(&mut tape, &pv, task).unwrap();
    let support = unevaluated(task.len(), evaluated);
    let l = scorer.logits(&mut tape, evaluated, &support).unwrap();
    tape.value(l).as_slice().to_vec()
}

#[test]
fn deep_sets_logits_match_manual_forward() {
    let task = random_task("t", 9, 3, 11);
    let (f, g, h) = DeepSetsPolicy::architecture(3, 4);
    let policy = DeepSetsPolicy::from_specs(f, g, h, &mut stream_rng(3, &[])).unwrap();
    for evaluated in [vec![], vec![2], vec![5, 1, 7]] {
        let pooled = if evaluated.is_empty() {
            vec![0.0; 4]
        } else {
            let mut acc = vec![0.0; 4];
            for &i in &evaluated {
                let fx = mlp_forward(&policy.f, "f", &policy.params, task.features.row(i));
                acc.iter_mut().zip(fx).for_each(|(a, v)| *a += v / evaluated.len() as f64);
            }
            acc
        };
        let z = mlp_forward(&policy.g, "g", &policy.params, &pooled);
        let expected: Vec<f64> = unevaluated(task.len(), &evaluated)
            .into_iter()
            .map(|c| {
                let mut input = task.features.row(c).to_vec();
                input.extend(&z);
                mlp_forward(&policy.h, "h", &policy.params, &input)[0]
            })
            .collect();
        let got = logits_of(&policy, &task, &evaluated);
        assert_eq!(got.len(), expected.len());
        for (a, b) in got.iter().zip(&expected) {
            assert!(rel_err(*a, *b) < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn metabo_logits_match_manual_forward() {
    let task = random_task("t", 10, 2, 13);
    let mut gp = small_kernel(2, 14);
    gp.set_log("log_alpha", 0.7).unwrap();
    let policy = MetaBoPolicy::new(gp.clone(), &mut stream_rng(15, &[])).unwrap();
    let alpha = gp.alpha();
    for evaluated in [vec![], vec![4, 0]] {
        let xs: Vec<Vec<f64>> = evaluated.iter().map(|&i| task.features.row(i).to_vec()).collect();
        let ys: Vec<f64> = evaluated.iter().map(|&i| task.responses[i]).collect();
        let expected: Vec<f64> = unevaluated(task.len(), &evaluated)
            .into_iter()
            .map(|c| {
                let (m, v) = dense_posterior(&gp, &xs, &ys, task.features.row(c));
                let mut input = vec![m / alpha.sqrt(), v / alpha];
                input.extend(task.features.row(c));
                mlp_forward(&policy.head, "head", &policy.params, &input)[0]
            })
            .collect();
        let got = logits_of(&policy, &task, &evaluated);
        for (a, b) in got.iter().zip(&expected) {
            assert!(rel_err(*a, *b) < 1e-9, "{a} vs {b}");
        }
    }
}
