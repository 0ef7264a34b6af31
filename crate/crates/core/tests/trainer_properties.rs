use aibomgen_core::model::{Task, TrainingConfig};
use aibomgen_core::trainer::{self, loss, loss_and_gradient, Dataset, ModelWeights};
use aibomgen_core::compute_digest;
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn random_instance(rng: &mut StdRng, task: Task) -> (Dataset, ModelWeights) {
    let n = rng.gen_range(3..12);
    let d = rng.gen_range(1..5);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let targets = (0..n)
        .map(|_| match task {
            Task::Regression => rng.gen_range(-3.0..3.0),
            Task::Classification => f64::from(rng.gen_bool(0.5) as u8),
        })
        .collect();
    let names = (0..d).map(|i| format!("x{i}")).collect();
    let model = ModelWeights {
        weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        bias: rng.gen_range(-1.0..1.0),
    };
    (Dataset::new(names, "y".into(), rows, targets), model)
}

/// Five-point central difference of the full-data loss along one parameter.
fn numeric_partial(ds: &Dataset, model: &ModelWeights, task: Task, param: usize) -> f64 {
    let h = 1e-3;
    let at = |delta: f64| {
        let mut m = model.clone();
        if param < m.weights.len() {
            m.weights[param] += delta;
        } else {
            m.bias += delta;
        }
        loss(ds, &m, task)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

#[test]
fn gradients_match_finite_differences() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let task = if i % 2 == 0 { Task::Regression } else { Task::Classification };
        let (ds, model) = random_instance(&mut rng, task);
        let (_, grad, grad_bias) = loss_and_gradient(&ds, &model, task, 0..ds.n_rows());
        let analytic: Vec<f64> = grad.into_iter().chain(std::iter::once(grad_bias)).collect();
        for (p, a) in analytic.iter().enumerate() {
            let fd = numeric_partial(&ds, &model, task, p);
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

/// Minimum-norm least squares over `[X | 1]`, which is where gradient descent
/// from zero converges when columns are collinear.
fn pinv_solution(ds: &Dataset) -> Vec<f64> {
    let n = ds.n_rows();
    let d = ds.n_features();
    let a = DMatrix::from_fn(n, d + 1, |i, j| if j < d { ds.row(i)[j] } else { 1.0 });
    let y = DVector::from_column_slice(ds.targets());
    let pinv = a.pseudo_inverse(1e-10).unwrap();
    (pinv * y).iter().copied().collect()
}

#[test]
fn collinear_regression_reaches_least_squares() {
    let mut rng = StdRng::seed_from_u64(7);
    let n = 40;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        rows.push(vec![a, 2.0 * a, b]);
        targets.push(1.5 * a - 0.7 * b + 0.3 + rng.gen_range(-0.05..0.05));
    }
    let ds = Dataset::new(vec!["a".into(), "a2".into(), "b".into()], "y".into(), rows, targets);
    let expected = pinv_solution(&ds);

    let config = TrainingConfig::new(Task::Regression, 20_000, n as i64, 0.01);
    let (model, metrics) = trainer::train(&ds, &config).unwrap();
    let got: Vec<f64> = model.weights.iter().copied().chain([model.bias]).collect();
    for (g, e) in got.iter().zip(&expected) {
        assert!((g - e).abs() < 1e-3, "got {got:?}, least squares {expected:?}");
    }
    // full-batch steps below 1/L never increase the loss, up to rounding at convergence
    assert!(metrics.loss_per_epoch.windows(2).all(|w| w[1] <= w[0] + 1e-14));
}

#[test]
fn identical_inputs_give_identical_model_bytes() {
    let csv: String = std::iter::once("x1,x2,y\n".to_owned())
        .chain((0..200).map(|i| {
            let x1 = (i as f64 * 0.37).sin();
            let x2 = (i as f64 * 0.11).cos();
            format!("{x1},{x2},{}\n", u8::from(x1 + 0.5 * x2 > 0.1))
        }))
        .collect();
    let config = TrainingConfig {
        seed: 42,
        ..TrainingConfig::new(Task::Classification, 30, 16, 0.2)
    };
    let run = || {
        let ds = trainer::parse_dataset(csv.as_bytes()).unwrap();
        compute_digest(&trainer::serialize_model(&trainer::train(&ds, &config).unwrap().0))
    };
    let first = run();
    let second = std::thread::scope(|s| s.spawn(run).join().unwrap());
    assert_eq!(first, second);
}
