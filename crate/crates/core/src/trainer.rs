//! Deterministic reference trainer: linear and logistic regression by
//! gradient descent on tabular CSV data.
//!
//! Bit-reproducibility rules: weights start at zero (or at a supplied base
//! model), every sum runs left to right over rows in their current order, and
//! mini-batch shuffling uses a 64-bit LCG seeded from the job config.

use std::time::Instant;

use crate::model::{Task, TrainingConfig, TrainingMetrics};

pub const MODEL_MAGIC: &[u8; 4] = b"RTM1";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TrainerError {
    #[error("malformed CSV at line {line}: {reason}")]
    MalformedCsv { line: u64, reason: String },
    #[error("dataset does not fit task {task}: {reason}")]
    TaskMismatch { task: Task, reason: String },
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("base model has {model} weights but the dataset has {dataset} features")]
    FeatureMismatch { model: usize, dataset: usize },
    #[error("malformed model file: {0}")]
    MalformedModel(String),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
}

fn malformed(line: u64, reason: impl Into<String>) -> TrainerError {
    TrainerError::MalformedCsv {
        line,
        reason: reason.into(),
    }
}

/// Parsed tabular data; the last CSV column is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub feature_names: Vec<String>,
    pub target_name: String,
    /// Row-major, `n_rows * n_features`.
    features: Vec<f64>,
    targets: Vec<f64>,
}

impl Dataset {
    pub fn new(feature_names: Vec<String>, target_name: String, rows: Vec<Vec<f64>>, targets: Vec<f64>) -> Self {
        assert_eq!(rows.len(), targets.len());
        assert!(rows.iter().all(|r| r.len() == feature_names.len()));
        Self {
            feature_names,
            target_name,
            features: rows.into_iter().flatten().collect(),
            targets,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.targets.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_features();
        &self.features[i * d..(i + 1) * d]
    }

    pub fn target(&self, i: usize) -> f64 {
        self.targets[i]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }
}

/// Reads only the header row: at least two named columns.
pub fn check_csv_header(bytes: &[u8]) -> Result<Vec<String>, TrainerError> {
    if bytes.is_empty() {
        return Err(malformed(1, "empty file"));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
    let headers = reader
        .headers()
        .map_err(|e| malformed(1, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_owned())
        .collect::<Vec<_>>();
    if headers.len() < 2 {
        return Err(malformed(1, "need at least one feature column and a target column"));
    }
    if let Some(i) = headers.iter().position(String::is_empty) {
        return Err(malformed(1, format!("column {} has an empty name", i + 1)));
    }
    Ok(headers)
}

/// UTF-8 CSV with a header row; every cell must be a finite number.
pub fn parse_dataset(bytes: &[u8]) -> Result<Dataset, TrainerError> {
    let mut headers = check_csv_header(bytes)?;
    let width = headers.len();
    let target_name = headers.pop().expect("at least two columns");

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) => {
                let line = e.position().map(|p| p.line()).unwrap_or(0);
                return Err(malformed(line, e.to_string()));
            }
        }
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != width {
            return Err(malformed(line, format!("expected {width} cells, found {}", record.len())));
        }
        for (i, cell) in record.iter().enumerate() {
            let x: f64 = cell
                .parse()
                .map_err(|_| malformed(line, format!("cell {:?} in column {} is not a number", cell, i + 1)))?;
            if !x.is_finite() {
                return Err(malformed(line, format!("cell {:?} in column {} is not finite", cell, i + 1)));
            }
            if i + 1 == width {
                targets.push(x);
            } else {
                features.push(x);
            }
        }
    }
    if targets.is_empty() {
        return Err(malformed(2, "no data rows"));
    }
    Ok(Dataset {
        feature_names: headers,
        target_name,
        features,
        targets,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ModelWeights {
    pub fn zeros(n_features: usize) -> Self {
        Self {
            weights: vec![0.0; n_features],
            bias: 0.0,
        }
    }

    fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// `RTM1` followed by each weight then the bias, as little-endian IEEE-754
/// doubles.
pub fn serialize_model(model: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * (model.weights.len() + 1));
    out.extend_from_slice(MODEL_MAGIC);
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out.extend_from_slice(&model.bias.to_le_bytes());
    out
}

pub fn parse_model(bytes: &[u8]) -> Result<ModelWeights, TrainerError> {
    let body = bytes
        .strip_prefix(MODEL_MAGIC.as_slice())
        .ok_or_else(|| TrainerError::MalformedModel("missing RTM1 header".into()))?;
    if body.is_empty() || body.len() % 8 != 0 {
        return Err(TrainerError::MalformedModel(format!(
            "body of {} bytes is not a whole number of doubles",
            body.len()
        )));
    }
    let mut values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    let bias = values.pop().expect("non-empty body");
    let model = ModelWeights { weights: values, bias };
    if !model.is_finite() {
        return Err(TrainerError::MalformedModel("non-finite parameter".into()));
    }
    Ok(model)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn predict(row: &[f64], model: &ModelWeights) -> f64 {
    let mut z = model.bias;
    for (x, w) in row.iter().zip(&model.weights) {
        z += x * w;
    }
    z
}

/// Loss and its gradient `(loss, d/dweights, d/dbias)` over the given rows.
///
/// Regression: mean squared error. Classification: mean logistic loss
/// `softplus(z) - y*z`.
pub fn loss_and_gradient(
    ds: &Dataset,
    model: &ModelWeights,
    task: Task,
    rows: impl Iterator<Item = usize>,
) -> (f64, Vec<f64>, f64) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; model.weights.len()];
    let mut grad_bias = 0.0;
    let mut n = 0usize;
    for i in rows {
        let x = ds.row(i);
        let y = ds.target(i);
        let z = predict(x, model);
        let (l, dz) = match task {
            Task::Regression => {
                let r = z - y;
                (r * r, 2.0 * r)
            }
            Task::Classification => (softplus(z) - y * z, sigmoid(z) - y),
        };
        loss += l;
        for (g, xi) in grad.iter_mut().zip(x) {
            *g += dz * xi;
        }
        grad_bias += dz;
        n += 1;
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad, grad_bias * scale)
}

pub fn loss(ds: &Dataset, model: &ModelWeights, task: Task) -> f64 {
    loss_and_gradient(ds, model, task, 0..ds.n_rows()).0
}

/// Knuth's MMIX LCG: `state = state * 6364136223846793005 + 1442695040888963407`
/// (mod 2^64); outputs are the high 32 bits.
#[derive(Debug, Clone)]
pub struct Lcg64 {
    state: u64,
}

impl Lcg64 {
    pub const MULTIPLIER: u64 = 6_364_136_223_846_793_005;
    pub const INCREMENT: u64 = 1_442_695_040_888_963_407;

    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.state = self.state.wrapping_mul(Self::MULTIPLIER).wrapping_add(Self::INCREMENT);
        (self.state >> 32) as u32
    }

    /// Fisher–Yates shuffle, drawing `next_u32() % (i + 1)` for each `i`
    /// from the end.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = (self.next_u32() as usize) % (i + 1);
            items.swap(i, j);
        }
    }
}

fn check_task(ds: &Dataset, task: Task) -> Result<(), TrainerError> {
    if task == Task::Classification {
        if let Some(bad) = ds.targets().iter().find(|y| **y != 0.0 && **y != 1.0) {
            return Err(TrainerError::TaskMismatch {
                task,
                reason: format!("label {bad} is not 0 or 1"),
            });
        }
    }
    Ok(())
}

pub fn train(ds: &Dataset, config: &TrainingConfig) -> Result<(ModelWeights, TrainingMetrics), TrainerError> {
    train_from(ds, config, None)
}

/// Trains starting from `init` (warm start) or from zeros.
pub fn train_from(
    ds: &Dataset,
    config: &TrainingConfig,
    init: Option<ModelWeights>,
) -> Result<(ModelWeights, TrainingMetrics), TrainerError> {
    let started = Instant::now();
    if let Some(e) = config.validate().first() {
        return Err(TrainerError::InvalidConfig(e.to_string()));
    }
    check_task(ds, config.task)?;
    let mut model = match init {
        Some(m) if m.weights.len() != ds.n_features() => {
            return Err(TrainerError::FeatureMismatch {
                model: m.weights.len(),
                dataset: ds.n_features(),
            })
        }
        Some(m) => m,
        None => ModelWeights::zeros(ds.n_features()),
    };

    let n = ds.n_rows();
    let batch = usize::try_from(config.batch_size).unwrap_or(usize::MAX).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = Lcg64::new(config.seed);
    let lr = config.learning_rate;
    let epochs = usize::try_from(config.epochs).unwrap_or(0);
    let mut loss_per_epoch = Vec::with_capacity(epochs);

    for epoch in 0..epochs {
        if batch >= n {
            step(ds, &mut model, config.task, lr, 0..n);
        } else {
            rng.shuffle(&mut order);
            for chunk in order.chunks(batch) {
                step(ds, &mut model, config.task, lr, chunk.iter().copied());
            }
        }
        let l = loss(ds, &model, config.task);
        if !l.is_finite() || !model.is_finite() {
            return Err(TrainerError::NonFiniteLoss { epoch: epoch + 1 });
        }
        loss_per_epoch.push(l);
    }

    let final_loss = match loss_per_epoch.last() {
        Some(l) => *l,
        None => loss(ds, &model, config.task),
    };
    let metrics = TrainingMetrics {
        final_loss,
        loss_per_epoch,
        duration_seconds: started.elapsed().as_secs_f64(),
        aibom_generation_seconds: 0.0,
    };
    Ok((model, metrics))
}

fn step(ds: &Dataset, model: &mut ModelWeights, task: Task, lr: f64, rows: impl Iterator<Item = usize>) {
    let (_, grad, grad_bias) = loss_and_gradient(ds, model, task, rows);
    for (w, g) in model.weights.iter_mut().zip(&grad) {
        *w -= lr * g;
    }
    model.bias -= lr * grad_bias;
}
