use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use aibomgen_cli::{exit, offline, Client, ClientError, Config};
use aibomgen_core::attestation::PublicKey;
use aibomgen_core::canonical;
use aibomgen_core::model::{normalize_name, Task, TrainingConfig};
use aibomgen_core::orchestrator::{JobRequest, ObjectRef};
use aibomgen_core::report::{MatchResult, MatchStatus, StorageReport, VerificationReport};
use aibomgen_core::{compute_digest, JobRecord, JobState};
use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Client for the attested training platform.
///
/// Exit status: 0 success or verified, 1 verification failed, 2 usage,
/// input, transport or server error.
#[derive(Parser)]
#[command(name = "aibomgen", version)]
struct Cli {
    /// Config file (default: $AIBOMGEN_CONFIG or ~/.config/aibomgen/config.toml).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Gateway base URL.
    #[arg(long, global = true)]
    gateway: Option<String>,
    /// Bearer token for job commands.
    #[arg(long, global = true)]
    token: Option<String>,
    /// Print canonical JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Stage a dataset or base model.
    Upload {
        file: PathBuf,
        /// Object name (default: the file name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Submit a training job.
    Submit(SubmitArgs),
    /// Show a job.
    Status {
        job_id: String,
        /// Poll until the job finishes; exit 1 if it failed.
        #[arg(long)]
        wait: bool,
        #[arg(long, default_value_t = 600)]
        timeout: u64,
    },
    /// Download every stored artifact of a job and check its digest.
    Fetch {
        job_id: String,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Verify attestations and artifacts.
    Verify {
        #[command(flatten)]
        opts: VerifyOpts,
        #[command(subcommand)]
        what: VerifyCommand,
    },
    /// Platform key management.
    Keys {
        #[command(subcommand)]
        what: KeysCommand,
    },
}

#[derive(Args)]
struct SubmitArgs {
    /// Staged dataset as `<namespace>/<name>[@sha256:<hex>]`.
    #[arg(long)]
    dataset: String,
    /// Staged base model, same form as --dataset.
    #[arg(long)]
    base_model: Option<String>,
    #[arg(long)]
    epochs: i64,
    #[arg(long)]
    batch_size: i64,
    #[arg(long)]
    lr: f64,
    #[arg(long, value_parser = parse_task)]
    task: Task,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Wait for the job to finish; exit 1 if it failed.
    #[arg(long)]
    wait: bool,
}

fn parse_task(s: &str) -> Result<Task, String> {
    s.parse::<Task>().map_err(|e| e.to_string())
}

#[derive(Args)]
struct VerifyOpts {
    /// Verify locally with the public key; never contacts the gateway.
    #[arg(long, global = true)]
    offline: bool,
    /// Platform public key (PEM) for --offline.
    #[arg(long, global = true)]
    public_key: Option<PathBuf>,
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Verify an AIBOM (online: also its link and all artifacts in storage).
    Aibom {
        file: PathBuf,
        /// Link envelope; required with --offline.
        #[arg(long)]
        link: Option<PathBuf>,
    },
    /// Verify a signed link envelope.
    Link { file: PathBuf },
    /// Check one file against its digest in a link.
    Hash {
        #[arg(long)]
        link: PathBuf,
        #[arg(long)]
        artifact: PathBuf,
        /// Artifact name in the link (default: the file name).
        #[arg(long)]
        name: Option<String>,
    },
    /// Compare every artifact a link names with storage.
    Storage {
        #[arg(long)]
        link: PathBuf,
    },
}

#[derive(Subcommand)]
enum KeysCommand {
    /// Download the platform public key.
    Fetch {
        /// Where to write the PEM (default: print it).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit::ERROR
        }
    };
    ExitCode::from(code as u8)
}

fn read(path: &Path) -> anyhow::Result<Vec<u8>> {
    std::fs::read(path).with_context(|| format!("reading {}", path.display()))
}

fn file_name(path: &Path) -> anyhow::Result<String> {
    path.file_name()
        .and_then(|n| n.to_str())
        .map(str::to_owned)
        .with_context(|| format!("{} has no file name", path.display()))
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> anyhow::Result<()> {
    if json {
        println!("{}", canonical::to_canonical_string(value)?);
    } else {
        println!("{}", text());
    }
    Ok(())
}

fn report_text(report: &VerificationReport) -> String {
    let mut lines: Vec<String> = report
        .checks
        .iter()
        .map(|c| match (&c.detail, c.passed) {
            (Some(d), false) => format!("FAIL {}: {d}", c.name),
            (_, false) => format!("FAIL {}", c.name),
            _ => format!("PASS {}", c.name),
        })
        .collect();
    lines.extend(report.artifacts.iter().map(match_text));
    lines.push(if report.passed { "VERIFIED".into() } else { "NOT VERIFIED".into() });
    lines.join("\n")
}

fn match_text(m: &MatchResult) -> String {
    let status = match m.status {
        MatchStatus::Match => "MATCH",
        MatchStatus::Mismatch => "MISMATCH",
        MatchStatus::UnknownName => "UNKNOWN_NAME",
        MatchStatus::Missing => "MISSING",
    };
    let mut s = format!("{status} {}", m.name);
    if let Some(e) = &m.expected {
        s.push_str(&format!(" expected={e}"));
    }
    if let Some(a) = &m.actual {
        s.push_str(&format!(" actual={a}"));
    }
    s
}

fn storage_text(r: &StorageReport) -> String {
    let mut s = report_text(&r.envelope);
    s.truncate(s.rfind('\n').unwrap_or(0));
    for m in &r.results {
        s.push('\n');
        s.push_str(&match_text(m));
    }
    s.push_str(if r.passed { "\nVERIFIED" } else { "\nNOT VERIFIED" });
    s
}

fn job_text(job: &JobRecord) -> String {
    let mut s = format!("{} {}", job.job_id, job.state);
    if let Some(r) = &job.failure_reason {
        s.push_str(&format!(" ({r})"));
    }
    for o in &job.outputs {
        s.push_str(&format!("\n  {} {}", o.name, o.digest));
    }
    s
}

fn verdict(passed: bool) -> i32 {
    if passed {
        exit::OK
    } else {
        exit::VERIFICATION_FAILED
    }
}

fn run(cli: Cli) -> anyhow::Result<i32> {
    let mut config = Config::resolve(cli.config.as_deref())?;
    if let Some(g) = cli.gateway {
        config.gateway_url = Some(g);
    }
    if let Some(t) = cli.token {
        config.token = Some(t);
    }
    let json = cli.json;
    let client = || Client::new(config.gateway_url(), config.token.clone());

    match cli.command {
        Command::Upload { file, name } => {
            let name = match name {
                Some(n) => n,
                None => file_name(&file)?,
            };
            let stored = client()?.upload(&name, read(&file)?)?;
            let text_ref = ObjectRef::from(&stored).to_string();
            emit(json, &stored, || text_ref)?;
            Ok(exit::OK)
        }
        Command::Submit(args) => {
            let dataset = ObjectRef::parse(&args.dataset).map_err(anyhow::Error::msg)?;
            let base_model = args
                .base_model
                .as_deref()
                .map(ObjectRef::parse)
                .transpose()
                .map_err(anyhow::Error::msg)?;
            let request = JobRequest {
                dataset,
                base_model,
                config: TrainingConfig {
                    seed: args.seed,
                    ..TrainingConfig::new(args.task, args.epochs, args.batch_size, args.lr)
                },
            };
            let c = client()?;
            let mut job = c.submit(&request)?;
            if args.wait {
                job = c.wait(&job.job_id, Duration::from_secs(600))?;
            }
            emit(json, &job, || job_text(&job))?;
            Ok(if job.state == JobState::Failed { exit::VERIFICATION_FAILED } else { exit::OK })
        }
        Command::Status { job_id, wait, timeout } => {
            let c = client()?;
            let job = if wait { c.wait(&job_id, Duration::from_secs(timeout))? } else { c.status(&job_id)? };
            emit(json, &job, || job_text(&job))?;
            Ok(if wait && job.state == JobState::Failed { exit::VERIFICATION_FAILED } else { exit::OK })
        }
        Command::Fetch { job_id, out } => fetch(&client()?, &job_id, &out, json),
        Command::Keys {
            what: KeysCommand::Fetch { out },
        } => {
            let pem = client()?.public_key_pem()?;
            let key = PublicKey::from_pem(&pem).context("gateway returned an invalid public key")?;
            match out {
                Some(path) => {
                    std::fs::write(&path, &pem).with_context(|| format!("writing {}", path.display()))?;
                    println!("{}", key.key_id());
                }
                None => print!("{pem}"),
            }
            Ok(exit::OK)
        }
        Command::Verify { opts, what } => {
            if opts.offline {
                let key_path = opts
                    .public_key
                    .or(config.public_key.clone())
                    .context("--offline needs --public-key or public_key in the config")?;
                let key = PublicKey::load(&key_path)?;
                verify_offline(what, &key, json)
            } else {
                verify_online(&client()?, what, json)
            }
        }
    }
}

fn fetch(client: &Client, job_id: &str, out: &Path, json: bool) -> anyhow::Result<i32> {
    #[derive(Serialize)]
    struct Fetched {
        name: String,
        path: String,
        verified: bool,
    }
    let mut results = Vec::new();
    for grant in client.artifacts(job_id)? {
        let bytes = client.download(&grant.url)?;
        let name = normalize_name(&grant.artifact.name)?;
        let path = out.join(&name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
        results.push(Fetched {
            verified: compute_digest(&bytes) == grant.artifact.digest,
            name,
            path: path.display().to_string(),
        });
    }
    let all = results.iter().all(|r| r.verified);
    emit(json, &results, || {
        results
            .iter()
            .map(|r| format!("{} {} -> {}", if r.verified { "OK" } else { "DIGEST MISMATCH" }, r.name, r.path))
            .collect::<Vec<_>>()
            .join("\n")
    })?;
    Ok(verdict(all))
}

fn verify_offline(what: VerifyCommand, key: &PublicKey, json: bool) -> anyhow::Result<i32> {
    match what {
        VerifyCommand::Aibom { file, link } => {
            let link = link.context("offline AIBOM verification needs --link")?;
            let report = offline::aibom(&read(&file)?, &read(&link)?, key);
            emit(json, &report, || report_text(&report))?;
            Ok(verdict(report.passed))
        }
        VerifyCommand::Link { file } => {
            let report = offline::link(&read(&file)?, key)?;
            emit(json, &report, || report_text(&report))?;
            Ok(verdict(report.passed))
        }
        VerifyCommand::Hash { link, artifact, name } => {
            let name = match name {
                Some(n) => n,
                None => file_name(&artifact)?,
            };
            match offline::hash(&read(&link)?, &read(&artifact)?, &name, key)? {
                offline::HashOutcome::Checked(m) => {
                    emit(json, &m, || match_text(&m))?;
                    Ok(verdict(m.is_match()))
                }
                offline::HashOutcome::LinkUnverified(report) => {
                    emit(json, &report, || report_text(&report))?;
                    Ok(exit::VERIFICATION_FAILED)
                }
            }
        }
        VerifyCommand::Storage { .. } => anyhow::bail!("verify storage needs the gateway; drop --offline"),
    }
}

fn verify_online(client: &Client, what: VerifyCommand, json: bool) -> anyhow::Result<i32> {
    match what {
        VerifyCommand::Aibom { file, .. } => {
            let report = client.verify_aibom(read(&file)?)?;
            emit(json, &report, || report_text(&report))?;
            Ok(verdict(report.passed))
        }
        VerifyCommand::Link { file } => {
            let report = client.verify_link(read(&file)?)?;
            emit(json, &report, || report_text(&report))?;
            Ok(verdict(report.passed))
        }
        VerifyCommand::Hash { link, artifact, name } => {
            let name = match name {
                Some(n) => n,
                None => file_name(&artifact)?,
            };
            match client.verify_hash(read(&link)?, read(&artifact)?, &name) {
                Ok(m) => {
                    emit(json, &m, || match_text(&m))?;
                    Ok(verdict(m.is_match()))
                }
                Err(ClientError::Api { status: 422, message, fields, .. }) => {
                    eprintln!("{message}: {}", fields.join(", "));
                    Ok(exit::VERIFICATION_FAILED)
                }
                Err(e) => Err(e.into()),
            }
        }
        VerifyCommand::Storage { link } => {
            let report = client.verify_storage(read(&link)?)?;
            emit(json, &report, || storage_text(&report))?;
            Ok(verdict(report.passed))
        }
    }
}
