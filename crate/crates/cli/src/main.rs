//! `fedids`: clustered federated anomaly detection for IoT fleets.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;

use fedids::anomaly::{build_report, score_and_classify, select_threshold};
use fedids::features::{featurize_stream, read_feature_table, write_feature_table, FeatureTable, RowMeta, Scheme};
use fedids::ingest::save_records;
use fedids::nn::load_checkpoint;
use fedids::pipeline::{cmd_pipeline, cmd_report, cmd_stage, cmd_tune, ExperimentConfig, Stage};
use fedids::{Error, Matrix, Result};

/// Environment variable holding the log filter (e.g. `info`, `fedids=debug`).
const LOG_ENV: &str = "FEDIDS_LOG";

#[derive(Parser)]
#[command(name = "fedids", version, about = "Clustered federated autoencoder anomaly detection for IoT fleets")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML). Without it the built-in synthetic fleet is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output (run) directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Port discretization scheme.
    #[arg(long, global = true, value_parser = parse_scheme)]
    scheme: Option<Scheme>,
}

fn parse_scheme(s: &str) -> std::result::Result<Scheme, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic fleet into <out>/data.
    Synth,
    /// Dissect a capture into record lines, or ingest the configured devices.
    Ingest {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Encode record lines as a feature matrix, or featurize the run.
    Featurize {
        #[arg(long, requires = "output")]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Fingerprint the clients and cluster them.
    Fingerprint,
    /// Federated training per cluster.
    Train,
    /// Optimizer trials and learning-rate grid per cluster.
    Tune,
    /// Thresholds and detection for the run, or for one model and matrix.
    Detect {
        #[arg(long, requires_all = ["validation", "input", "output"])]
        model: Option<PathBuf>,
        #[arg(long)]
        validation: Option<PathBuf>,
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Per-packet score table.
        #[arg(long)]
        scores: Option<PathBuf>,
    },
    /// Summarize a finished run directory.
    Report {
        run_dir: Option<PathBuf>,
    },
    /// Run every stage, resuming where possible.
    Pipeline,
}

fn load_config(c: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::synthetic(0, "run"),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = c.scheme {
        cfg.scheme = s;
    }
    Ok(cfg)
}

fn ingest_file(input: &Path, output: &Path) -> Result<()> {
    let (records, stats) = fedids::pipeline::ingest_file(input)?;
    save_records(output, &records)?;
    info!("ingest: {} frames, {} kept, {} malformed", stats.frames, stats.kept, stats.malformed);
    println!("{}", serde_json::to_string_pretty(&stats).expect("stats serialize"));
    Ok(())
}

fn featurize_file(input: &Path, output: &Path, scheme: Scheme) -> Result<()> {
    let (records, skipped) = fedids::ingest::load_records(input)?;
    let (rows, clamped) = featurize_stream(&records, scheme);
    let device = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let table = FeatureTable {
        scheme,
        matrix: Matrix::from_rows(scheme.dim(), rows)?,
        meta: records
            .iter()
            .map(|r| RowMeta {
                device_id: device.clone(),
                timestamp: r.timestamp,
                label: r.label,
            })
            .collect(),
    };
    write_feature_table(output, &table)?;
    info!("featurize: {} rows, {skipped} skipped lines, {clamped} clamped timestamps", records.len());
    Ok(())
}

fn detect_file(model: &Path, validation: &Path, input: &Path, output: &Path, scores: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(model)?;
    let val = read_feature_table(validation)?;
    let test = read_feature_table(input)?;
    if let Some(s) = ck.scheme {
        if s != val.scheme || s != test.scheme {
            return Err(Error::data("feature scheme does not match the checkpoint"));
        }
    }
    let device = test.meta.first().map(|m| m.device_id.clone()).unwrap_or_default();
    let t = select_threshold(&ck.net, &val.normal_rows(), &device, validation.display().to_string())?;
    let verdicts = score_and_classify(&ck.net, &test.matrix, t.threshold)?;
    let ts: Vec<f64> = test.meta.iter().map(|m| m.timestamp).collect();
    let labels: Vec<_> = test.meta.iter().map(|m| m.label).collect();
    let report = build_report(device, t.threshold, &verdicts, &ts, &labels)?;
    if let Some(path) = scores {
        let mut text = String::from("timestamp,mse,anomalous,label\n");
        for p in &report.packets {
            text.push_str(&format!("{},{},{},{}\n", p.timestamp, p.mse, p.anomalous as u8, p.label.as_str()));
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let summary = serde_json::json!({
        "device_id": report.device_id,
        "threshold": t,
        "counts": report.counts,
        "metrics": report.metrics,
    });
    let text = serde_json::to_string_pretty(&summary).expect("report serializes") + "\n";
    fs::write(output, text).map_err(|e| Error::io(output, e))
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.common;
    match cli.command {
        Command::Ingest {
            input: Some(i),
            output: Some(o),
        } => return ingest_file(&i, &o),
        Command::Featurize {
            input: Some(i),
            output: Some(o),
        } => return featurize_file(&i, &o, common.scheme.unwrap_or_default()),
        Command::Detect {
            model: Some(m),
            validation: Some(v),
            input: Some(i),
            output: Some(o),
            scores,
        } => return detect_file(&m, &v, &i, &o, scores.as_deref()),
        Command::Report { run_dir } => {
            let dir = run_dir.or(common.out.clone()).unwrap_or_else(|| load_config(&common).map(|c| c.out_dir).unwrap_or_default());
            let s = cmd_report(&dir)?;
            println!("K = {}, accuracy {:.4}, F1 {:.4}, MCC {:.4}", s.k, s.total_metrics.accuracy, s.total_metrics.f1, s.total_metrics.mcc);
            println!("{}", dir.join("report/summary.json").display());
            return Ok(());
        }
        _ => {}
    }
    let cfg = load_config(&common)?;
    let out = cfg.out_dir.clone();
    match cli.command {
        Command::Synth => {
            if cfg.fleet.is_none() {
                return Err(Error::config("synth needs a [fleet] section in the config"));
            }
            cmd_stage(cfg, Stage::Source)?;
        }
        Command::Ingest { .. } => {
            if cfg.devices.is_empty() {
                return Err(Error::config("ingest needs [[devices]] in the config, or --input/--output"));
            }
            cmd_stage(cfg, Stage::Source)?;
        }
        Command::Featurize { .. } => {
            cmd_stage(cfg, Stage::Featurize)?;
        }
        Command::Fingerprint => {
            cmd_stage(cfg, Stage::Fingerprint)?;
            println!("{}", out.join("fingerprint/clusters.json").display());
        }
        Command::Train => {
            cmd_stage(cfg, Stage::Train)?;
        }
        Command::Tune => {
            for r in cmd_tune(cfg)? {
                println!("cluster {}: best trial {}", r.cluster, r.best_trial);
            }
        }
        Command::Detect { .. } => {
            cmd_stage(cfg, Stage::Detect)?;
        }
        Command::Pipeline => {
            let m = cmd_pipeline(cfg)?;
            println!("{} stages complete", m.stages.len());
            println!("{}", out.join("manifest.json").display());
        }
        Command::Report { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
