use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::stages::{
    load_detection, load_thresholds, load_training, write_round_table, ClusterReport, DeviceDetection, DeviceInfo,
};
use super::{read_json, write_json, Stage};
use crate::anomaly::{metrics, ConfusionCounts, Metrics};
use crate::error::{Error, Result};
use crate::fingerprint::{ExternalValidity, KScore, KSelection};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub members: Vec<String>,
    pub final_fl_loss: Option<f64>,
    pub final_isolated_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub k: usize,
    pub selection: KSelection,
    pub k_scores: Vec<KScore>,
    pub external: Option<ExternalValidity>,
    pub clusters: Vec<ClusterSummary>,
    pub devices: Vec<DeviceDetection>,
    pub total_counts: ConfusionCounts,
    pub total_metrics: Metrics,
    pub max_calibration_exceedances: usize,
    /// Plot-ready tables relative to the run directory.
    pub tables: Vec<String>,
}

fn rel(run_dir: &Path, p: &Path) -> String {
    p.strip_prefix(run_dir).unwrap_or(p).to_string_lossy().replace('\\', "/")
}

/// Collects the stage outputs of `run_dir` into `report/summary.json` and
/// plot tables. Values are copied from the stage files, never recomputed,
/// except for the fleet-wide totals.
pub fn write_report(run_dir: &Path) -> Result<RunSummary> {
    let clusters_file = run_dir.join(Stage::Fingerprint.dir()).join("clusters.json");
    if !clusters_file.exists() {
        return Err(Error::data(format!(
            "{} holds no completed run (missing {})",
            run_dir.display(),
            rel(run_dir, &clusters_file)
        )));
    }
    let clusters: ClusterReport = read_json(&clusters_file)?;
    let devices: Vec<DeviceInfo> = read_json(&run_dir.join(Stage::Source.dir()).join("devices.json"))?;
    let out = run_dir.join(Stage::Report.dir());
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let mut summaries = Vec::new();
    let mut trainings = Vec::new();
    for c in 0..clusters.assignment.k {
        let t = load_training(run_dir, c)?;
        summaries.push(ClusterSummary {
            cluster: c,
            members: t.members.clone(),
            final_fl_loss: t.fl.last().map(|l| l.mean),
            final_isolated_loss: t.isolated.as_ref().and_then(|i| i.last()).map(|l| l.mean),
        });
        trainings.push(t);
    }
    let round_table = out.join("round_loss.csv");
    write_round_table(&round_table, &trainings)?;

    let k_table = out.join("k_scores.csv");
    {
        let io = |e| Error::io(&k_table, e);
        let mut w = BufWriter::new(File::create(&k_table).map_err(io)?);
        writeln!(w, "k,silhouette,davies_bouldin,s_dbw").map_err(io)?;
        for s in &clusters.assignment.scores {
            writeln!(w, "{},{},{},{}", s.k, s.silhouette, s.davies_bouldin, s.s_dbw).map_err(io)?;
        }
        w.flush().map_err(io)?;
    }

    let thresholds = load_thresholds(run_dir)?;
    let mut detections = Vec::with_capacity(devices.len());
    let mut total = ConfusionCounts::default();
    let mut tables: Vec<PathBuf> = vec![round_table, k_table];
    for d in &devices {
        let det = load_detection(run_dir, &d.id)?;
        total.merge(&det.counts);
        tables.push(run_dir.join(Stage::Detect.dir()).join(format!("{}.scores.csv", d.id)));
        detections.push(det);
    }
    let summary = RunSummary {
        k: clusters.assignment.k,
        selection: clusters.assignment.selection,
        k_scores: clusters.assignment.scores.clone(),
        external: clusters.external,
        clusters: summaries,
        devices: detections,
        total_metrics: metrics(&total)?,
        total_counts: total,
        max_calibration_exceedances: thresholds.iter().map(|t| t.calibration_exceedances).max().unwrap_or(0),
        tables: tables.iter().map(|p| rel(run_dir, p)).collect(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Consolidated summary of an existing run directory.
pub fn cmd_report(run_dir: &Path) -> Result<RunSummary> {
    if !run_dir.is_dir() {
        return Err(Error::config(format!("{} is not a directory", run_dir.display())));
    }
    write_report(run_dir)
}
