//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use aibomgen_cli::client::Client;
use aibomgen_core::attestation::{sign_envelope, verify_envelope, KeyPair, SignedEnvelope};
use aibomgen_core::model::outputs;
use aibomgen_core::orchestrator::{JobRequest, ObjectRef, Orchestrator, OrchestratorConfig};
use aibomgen_core::storage::{ObjectKey, Storage, StorageConfig};
use aibomgen_core::trainer::{self, loss, loss_and_gradient, Dataset, ModelWeights};
use aibomgen_core::worker::{RunOutcome, Worker};
use aibomgen_core::{Digest, JobState, Task, TrainingConfig};
use aibomgen_gateway::{BackgroundServer, GatewayConfig, TokenTable};
use aibomgen_harness::{fixtures, interleave, render_matrix, Harness, Scenario};
use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde_json::{json, Map, Value};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

/// Storage, orchestrator and one worker in a temp dir, without HTTP.
struct Bench {
    _dir: tempfile::TempDir,
    orch: Arc<Orchestrator>,
    worker: Worker,
    n: usize,
}

impl Bench {
    const PRINCIPAL: &'static str = "bench";

    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let storage = Arc::new(Storage::open(StorageConfig::new(dir.path().join("storage"), vec![9u8; 32])).unwrap());
        let config = OrchestratorConfig {
            state_dir: Some(dir.path().join("state")),
            ..OrchestratorConfig::default()
        };
        let orch = Arc::new(Orchestrator::open(config, storage).unwrap());
        let key = KeyPair::from_seed([3u8; 32]);
        let worker = Worker::new("bench-worker", orch.clone(), Arc::new(key));
        Self {
            _dir: dir,
            orch,
            worker,
            n: 0,
        }
    }

    fn stage(&mut self, csv: &[u8]) -> ObjectRef {
        self.n += 1;
        let ns = format!("up-bench{}", self.n);
        let storage = self.orch.storage();
        storage.create_namespace(&ns, Self::PRINCIPAL).unwrap();
        ObjectRef::from(&storage.put_object(&ObjectKey::new(&ns, "train.csv").unwrap(), csv).unwrap())
    }

    fn run(&self, dataset: &ObjectRef, config: TrainingConfig) -> (aibomgen_core::JobRecord, aibomgen_core::model::TrainingMetrics) {
        let request = JobRequest {
            dataset: dataset.clone(),
            base_model: None,
            config,
        };
        self.orch.submit_job(&request, Self::PRINCIPAL).unwrap();
        match self.worker.run_once().unwrap().expect("a job was queued") {
            RunOutcome::Completed { job, metrics } => (job, metrics),
            RunOutcome::Failed { job, error } => panic!("job {} failed: {error}", job.job_id),
        }
    }
}

fn tamper_detection() -> Outcome {
    let started = Instant::now();
    let mut harness = Harness::start(0xC1).map_err(|e| e.to_string())?;
    let mutate = harness.run_scenario(Scenario::ArtifactMutate, 10).map_err(|e| e.to_string())?;
    let control = harness.run_scenario(Scenario::Noop, 20).map_err(|e| e.to_string())?;
    let elapsed = started.elapsed();
    let matrix = render_matrix(&[mutate.clone(), control.clone()]);
    ensure(mutate.trials.len() == 40, || format!("ran {} mutations, want 40", mutate.trials.len()))?;
    ensure(mutate.passed() && control.passed(), || format!("\n{matrix}"))?;
    ensure(elapsed < Duration::from_secs(120), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{}/40 mutations detected, {} false positives in 20 controls, {elapsed:.1?}",
        mutate.detections(),
        control.detections()
    ))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn attestation_overhead() -> Outcome {
    let started = Instant::now();
    const EPOCHS: [i64; 5] = [5, 10, 25, 50, 100];
    const REPS: usize = 5;
    let mut bench = Bench::new();
    let dataset = bench.stage(&fixtures::regression_csv(20_000, 0xC2));
    let config = |epochs| TrainingConfig::new(Task::Regression, epochs, 256, 0.05);
    bench.run(&dataset, config(5));

    let mut train = vec![Vec::new(); EPOCHS.len()];
    let mut aibom = vec![Vec::new(); EPOCHS.len()];
    for _ in 0..REPS {
        for (g, &e) in EPOCHS.iter().enumerate() {
            let (_, m) = bench.run(&dataset, config(e));
            train[g].push(m.duration_seconds);
            aibom[g].push(m.aibom_generation_seconds);
        }
    }

    let train_means: Vec<f64> = train.iter().map(|g| mean(g)).collect();
    ensure(train_means.windows(2).all(|w| w[0] < w[1]), || {
        format!("training means not increasing: {train_means:?}")
    })?;

    let xs: Vec<f64> = EPOCHS.iter().flat_map(|&e| std::iter::repeat_n(e as f64, REPS)).collect();
    let ys: Vec<f64> = aibom.iter().flatten().copied().collect();
    let (mx, my) = (mean(&xs), mean(&ys));
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let slope = sxy / sxx;

    let group_means: Vec<f64> = aibom.iter().map(|g| mean(g)).collect();
    let ss_within: f64 = aibom
        .iter()
        .zip(&group_means)
        .map(|(g, m)| g.iter().map(|y| (y - m).powi(2)).sum::<f64>())
        .sum();
    let pooled_sd = (ss_within / (ys.len() - EPOCHS.len()) as f64).sqrt();
    let worst = group_means.iter().map(|m| (m - my).abs()).fold(0.0, f64::max);
    let elapsed = started.elapsed();

    let detail = format!(
        "slope {:.4} ms/epoch, AIBOM means {:?} ms, grand {:.3} ms, pooled sd {:.3} ms, training means {:?} ms, {elapsed:.1?}",
        slope * 1e3,
        group_means.iter().map(|m| (m * 1e6).round() / 1e3).collect::<Vec<_>>(),
        my * 1e3,
        pooled_sd * 1e3,
        train_means.iter().map(|m| (m * 1e6).round() / 1e3).collect::<Vec<_>>(),
    );
    ensure(slope.abs() < 1e-3, || format!("slope too steep: {detail}"))?;
    ensure(worst <= 3.0 * pooled_sd, || format!("a group mean strays beyond 3 pooled sd: {detail}"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn storage_footprint() -> Outcome {
    let started = Instant::now();
    let mut bench = Bench::new();
    let mut sizes = Vec::new();
    for (label, bytes) in [("1 KB", 1usize << 10), ("1 MB", 1 << 20), ("100 MB", 100 << 20)] {
        let csv = fixtures::regression_csv_of_size(bytes, bytes as u64);
        let dataset = bench.stage(&csv);
        drop(csv);
        let (job, _) = bench.run(&dataset, TrainingConfig::new(Task::Regression, 1, 4096, 0.05));
        let aibom = job
            .output(&outputs::aibom_name(&job.job_id))
            .ok_or_else(|| format!("{label}: no AIBOM output"))?;
        sizes.push((label, aibom.size_bytes as f64));
    }
    let values: Vec<f64> = sizes.iter().map(|(_, s)| *s).collect();
    let m = mean(&values);
    let spread = (values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min)) / m;
    let elapsed = started.elapsed();
    let detail = format!(
        "AIBOM bytes {}, spread {:.2}% of mean, {elapsed:.1?}",
        sizes.iter().map(|(l, s)| format!("{l}: {s}")).collect::<Vec<_>>().join(", "),
        spread * 100.0
    );
    ensure(values.iter().all(|s| *s < 65_536.0), || format!("an AIBOM reaches 64 KB: {detail}"))?;
    ensure(spread < 0.10, || format!("spread too wide: {detail}"))?;
    ensure(elapsed < Duration::from_secs(300), || format!("too slow: {detail}"))?;
    Ok(detail)
}

fn random_value(rng: &mut StdRng, depth: u32) -> Value {
    let leaf = depth >= 3 || rng.gen_bool(0.4);
    match if leaf { rng.gen_range(0..5) } else { rng.gen_range(5..7) } {
        0 => Value::Null,
        1 => Value::Bool(rng.gen()),
        2 => json!(rng.gen_range(-1_000_000i64..1_000_000)),
        3 => json!(rng.gen_range(-1e6f64..1e6)),
        4 => {
            let len = rng.gen_range(0..16);
            Value::String((0..len).map(|_| char::from_u32(rng.gen_range(0x20..0x2FF)).unwrap_or('?')).collect())
        }
        5 => Value::Array((0..rng.gen_range(0..5)).map(|_| random_value(rng, depth + 1)).collect()),
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.gen_range(0..5) {
                m.insert(format!("k{}", rng.gen_range(0..1000)), random_value(rng, depth + 1));
            }
            Value::Object(m)
        }
    }
}

fn signature_soundness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xC4);
    let mut panics = 0;
    let mut failures = Vec::new();
    for i in 0..1000 {
        let key = KeyPair::from_seed(rng.gen());
        let other = KeyPair::from_seed(rng.gen());
        let mut doc = Map::new();
        doc.insert("id".into(), json!(i));
        doc.insert("body".into(), random_value(&mut rng, 0));
        let doc = Value::Object(doc);
        let payload_bit = rng.gen::<usize>();
        let sig_bit = rng.gen::<usize>();
        let result = catch_unwind(AssertUnwindSafe(|| -> Result<(), String> {
            let env = sign_envelope(&doc, "application/vnd.test+json", &key).map_err(|e| e.to_string())?;
            let reparsed = SignedEnvelope::from_bytes(&env.to_bytes()).map_err(|e| e.to_string())?;
            ensure(verify_envelope(&reparsed, key.public_key()).outcome("signature_valid") == Some(true), || {
                "round trip rejected".into()
            })?;

            let mut flipped = env.clone();
            let bit = payload_bit % (flipped.payload.len() * 8);
            flipped.payload[bit / 8] ^= 1 << (bit % 8);
            ensure(verify_envelope(&flipped, key.public_key()).outcome("signature_valid") == Some(false), || {
                format!("payload bit {bit} flip accepted")
            })?;

            let mut raw = STANDARD.decode(&env.signatures[0].signature).map_err(|e| e.to_string())?;
            let bit = sig_bit % (raw.len() * 8);
            raw[bit / 8] ^= 1 << (bit % 8);
            let mut forged = env.clone();
            forged.signatures[0].signature = STANDARD.encode(&raw);
            ensure(verify_envelope(&forged, key.public_key()).outcome("signature_valid") == Some(false), || {
                format!("signature bit {bit} flip accepted")
            })?;

            ensure(verify_envelope(&env, other.public_key()).outcome("signature_valid") == Some(false), || {
                "wrong key accepted".into()
            })?;
            let mut spoofed = env.clone();
            spoofed.signatures[0].key_id = other.key_id().to_owned();
            ensure(verify_envelope(&spoofed, other.public_key()).outcome("signature_valid") == Some(false), || {
                "wrong key accepted under its own key id".into()
            })
        }));
        match result {
            Ok(Ok(())) => {}
            Ok(Err(e)) => failures.push(format!("doc {i}: {e}")),
            Err(_) => panics += 1,
        }
    }
    ensure(panics == 0 && failures.is_empty(), || {
        format!("{panics} panics, {} failures: {:?}", failures.len(), &failures[..failures.len().min(5)])
    })?;
    Ok("1000 documents: round trips verify, every payload and signature bit flip and wrong key rejected".into())
}

fn random_instance(rng: &mut StdRng, task: Task) -> (Dataset, ModelWeights) {
    let n = rng.gen_range(3..12);
    let d = rng.gen_range(1..5);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
    let targets = (0..n)
        .map(|_| match task {
            Task::Regression => rng.gen_range(-3.0..3.0),
            Task::Classification => f64::from(u8::from(rng.gen_bool(0.5))),
        })
        .collect();
    let model = ModelWeights {
        weights: (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        bias: rng.gen_range(-1.0..1.0),
    };
    (Dataset::new((0..d).map(|i| format!("x{i}")).collect(), "y".into(), rows, targets), model)
}

fn central_difference(ds: &Dataset, model: &ModelWeights, task: Task, param: usize) -> f64 {
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

fn trainer_correctness() -> Outcome {
    let mut rng = StdRng::seed_from_u64(0xC5);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let task = if i % 2 == 0 { Task::Regression } else { Task::Classification };
        let (ds, model) = random_instance(&mut rng, task);
        let (_, grad, grad_bias) = loss_and_gradient(&ds, &model, task, 0..ds.n_rows());
        for (p, a) in grad.iter().chain([&grad_bias]).enumerate() {
            let fd = central_difference(&ds, &model, task, p);
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-8));
        }
    }
    ensure(worst < 1e-6, || format!("worst gradient relative error {worst:e}"))?;

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
    let design = DMatrix::from_fn(n, 4, |i, j| if j < 3 { ds.row(i)[j] } else { 1.0 });
    let expected = design.pseudo_inverse(1e-10).map_err(|e| e.to_string())? * DVector::from_column_slice(ds.targets());
    let (model, _) = trainer::train(&ds, &TrainingConfig::new(Task::Regression, 20_000, n as i64, 0.01))
        .map_err(|e| e.to_string())?;
    let got: Vec<f64> = model.weights.iter().copied().chain([model.bias]).collect();
    let gap = got.iter().zip(expected.iter()).map(|(g, e)| (g - e).abs()).fold(0.0, f64::max);
    ensure(gap < 1e-3, || format!("collinear fit {got:?} vs least squares {:?}", expected.as_slice()))?;

    let csv = fixtures::classification_csv(500, 0xC5);
    let config = TrainingConfig {
        seed: 42,
        ..TrainingConfig::new(Task::Classification, 20, 32, 0.2)
    };
    let model_digest = |bench: &mut Bench| -> Digest {
        let dataset = bench.stage(&csv);
        let (job, _) = bench.run(&dataset, config.clone());
        job.output(outputs::MODEL).expect("model output").digest.clone()
    };
    let first = model_digest(&mut Bench::new());
    let second = std::thread::scope(|s| s.spawn(|| model_digest(&mut Bench::new())).join().unwrap());
    ensure(first == second, || format!("model digests differ: {first} vs {second}"))?;
    Ok(format!(
        "worst gradient error {worst:.1e}, collinear gap {gap:.1e}, two independent jobs gave {}",
        first.short()
    ))
}

fn end_to_end() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let token = "acceptance-token";
    let mut config = GatewayConfig::new(dir.path().join("platform"), TokenTable::new([(token.into(), "engineer".into())]));
    config.sync_writes = false;
    let server = BackgroundServer::start(&config).map_err(|e| e.to_string())?;
    let started = Instant::now();
    let err = |e: aibomgen_cli::client::ClientError| e.to_string();

    let engineer = Client::new(&server.url(), Some(token.into())).map_err(err)?;
    let uploaded = engineer.upload("train.csv", fixtures::regression_csv(500, 0xC6)).map_err(err)?;
    let job = engineer
        .submit(&JobRequest {
            dataset: ObjectRef::from(&uploaded),
            base_model: None,
            config: TrainingConfig::new(Task::Regression, 20, 32, 0.05),
        })
        .map_err(err)?;
    let job = engineer.wait(&job.job_id, Duration::from_secs(55)).map_err(err)?;
    ensure(job.state == JobState::Completed, || format!("job ended {}: {:?}", job.state, job.failure_reason))?;
    let grants = engineer.artifacts(&job.job_id).map_err(err)?;
    let mut files = std::collections::BTreeMap::new();
    for g in &grants {
        files.insert(g.artifact.name.clone(), engineer.download(&g.url).map_err(err)?);
    }
    let link = files[&outputs::link_name(&job.job_id)].clone();
    let aibom = files[&outputs::aibom_name(&job.job_id)].clone();
    let model = files[outputs::MODEL].clone();

    let verifier = Client::new(&server.url(), None).map_err(err)?;
    let r_aibom = verifier.verify_aibom(aibom).map_err(err)?;
    let r_link = verifier.verify_link(link.clone()).map_err(err)?;
    let r_hash = verifier.verify_hash(link.clone(), model, outputs::MODEL).map_err(err)?;
    let r_storage = verifier.verify_storage(link).map_err(err)?;
    let elapsed = started.elapsed();
    ensure(r_aibom.passed, || format!("verify/aibom: {r_aibom:?}"))?;
    ensure(r_link.passed, || format!("verify/link: {r_link:?}"))?;
    ensure(r_hash.is_match(), || format!("verify/hash: {r_hash:?}"))?;
    ensure(r_storage.passed, || format!("verify/storage: {r_storage:?}"))?;
    ensure(elapsed < Duration::from_secs(60), || format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{} artifacts fetched, 4 verification endpoints pass, {elapsed:.1?}",
        files.len()
    ))
}

fn orchestrator_safety() -> Outcome {
    let started = Instant::now();
    let report = interleave::run(10_000, 50, 0xC7)?;
    ensure(report.passed(), || format!("{} violations: {:?}", report.violations.len(), &report.violations[..report.violations.len().min(3)]))?;
    ensure(report.sequences == 10_000, || format!("only {} sequences ran", report.sequences))?;
    Ok(format!(
        "10000 interleavings, {} operations, {} completed, {} failed ({} retries exhausted), {:.1?}",
        report.operations,
        report.completed,
        report.failed,
        report.exhausted,
        started.elapsed()
    ))
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("tamper detection", tamper_detection),
        ("constant attestation overhead", attestation_overhead),
        ("storage footprint", storage_footprint),
        ("signature soundness", signature_soundness),
        ("trainer correctness", trainer_correctness),
        ("end-to-end flow", end_to_end),
        ("orchestrator safety", orchestrator_safety),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || *f == n.to_string()) {
            continue;
        }
        let outcome = catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}): {why}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
