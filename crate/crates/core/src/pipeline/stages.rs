use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{read_json, write_json, RunContext, Stage};
use crate::anomaly::{build_report, score_and_classify, select_threshold, ConfusionCounts, Metrics};
use crate::error::{Error, Result};
use crate::features::{featurize_stream, read_feature_table, write_feature_table, FeatureTable, RowMeta};
use crate::fingerprint::{
    cluster_init, collect_fingerprints, external_validity, model_fingerprinting, ClusterAssignment, ClusterConfig,
    ExternalValidity, N_INIT,
};
use crate::fl::{
    isolated_inits, run_fl, shared_init, run_isolated, trial_table, tune_trials, grid_search, Client, GridResult, LossSummary,
    TrialResult,
};
use crate::ingest::{load_records, read_pcap, save_records, IngestStats, Label, PacketRecord};
use crate::matrix::Matrix;
use crate::nn::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, DenseNet, FlatParams,
    Precision,
};
use crate::seed::derive_indexed;
use crate::synth::{make_fleet, write_fleet, EpisodeRecord};

const SEGMENTS: [&str; 3] = ["train", "validation", "test"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceInfo {
    pub id: String,
    /// Known group (archetype for synthetic fleets), evaluation only.
    pub group: Option<String>,
    pub episodes: Vec<EpisodeRecord>,
}

fn devices_path(ctx: &RunContext) -> PathBuf {
    ctx.dir(Stage::Source).join("devices.json")
}

pub(crate) fn load_devices(ctx: &RunContext) -> Result<Vec<DeviceInfo>> {
    read_json(&devices_path(ctx))
}

fn record_path(ctx: &RunContext, id: &str, segment: &str) -> PathBuf {
    ctx.dir(Stage::Source).join(format!("{id}.{segment}.jsonl"))
}

fn feature_path(ctx: &RunContext, id: &str, segment: &str) -> PathBuf {
    ctx.dir(Stage::Featurize).join(format!("{id}.{segment}.csv"))
}

pub(crate) fn run(ctx: &RunContext, stage: Stage) -> Result<()> {
    match stage {
        Stage::Source => source(ctx),
        Stage::Featurize => featurize(ctx),
        Stage::Fingerprint => fingerprint(ctx),
        Stage::Train => train(ctx),
        Stage::Threshold => threshold(ctx),
        Stage::Detect => detect(ctx),
        Stage::Report => super::report::write_report(&ctx.run_dir).map(|_| ()),
    }
}

fn source(ctx: &RunContext) -> Result<()> {
    let dir = ctx.dir(Stage::Source);
    if let Some(spec) = &ctx.config.fleet {
        let seed = ctx.stage_seed("synth");
        let fleet = make_fleet(spec, seed)?;
        let manifest = write_fleet(&fleet, seed, &dir)?;
        let devices: Vec<DeviceInfo> = manifest
            .devices
            .iter()
            .map(|d| DeviceInfo {
                id: d.device_id.clone(),
                group: Some(d.archetype.clone()),
                episodes: d.episodes.clone(),
            })
            .collect();
        return write_json(&devices_path(ctx), &devices);
    }
    let mut stats = BTreeMap::new();
    let mut devices = Vec::new();
    for d in &ctx.config.devices {
        let mut dev_stats = IngestStats::default();
        for (segment, path) in SEGMENTS.iter().zip([&d.train, &d.validation, &d.test]) {
            let (records, s) = ingest_file(path)?;
            if records.is_empty() {
                return Err(Error::data(format!("device {}: {} has no usable packets", d.id, path.display())));
            }
            dev_stats.merge(&s);
            save_records(record_path(ctx, &d.id, segment), &records)?;
        }
        stats.insert(d.id.clone(), dev_stats);
        devices.push(DeviceInfo {
            id: d.id.clone(),
            group: d.group.clone(),
            episodes: Vec::new(),
        });
    }
    write_json(&dir.join("ingest_stats.json"), &stats)?;
    write_json(&devices_path(ctx), &devices)
}

/// Reads a capture (`.pcap`) or a record-line file.
pub fn ingest_file(path: &Path) -> Result<(Vec<PacketRecord>, IngestStats)> {
    let is_pcap = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pcap"));
    if is_pcap {
        let mut stream = read_pcap(path)?;
        let records: Vec<PacketRecord> = stream.by_ref().collect();
        Ok((records, stream.into_stats()))
    } else {
        let (records, skipped) = load_records(path)?;
        let stats = IngestStats {
            kept: records.len() as u64,
            skipped_lines: skipped as u64,
            ..Default::default()
        };
        Ok((records, stats))
    }
}

fn featurize(ctx: &RunContext) -> Result<()> {
    let devices = load_devices(ctx)?;
    let scheme = ctx.config.scheme;
    let jobs: Vec<(&DeviceInfo, &str)> = devices
        .iter()
        .flat_map(|d| SEGMENTS.iter().map(move |s| (d, *s)))
        .collect();
    jobs.par_iter()
        .map(|(d, segment)| {
            let (records, skipped) = load_records(record_path(ctx, &d.id, segment))?;
            if skipped > 0 {
                warn!("{} {segment}: {skipped} unreadable record lines", d.id);
            }
            let (rows, clamped) = featurize_stream(&records, scheme);
            if clamped > 0 {
                warn!("{} {segment}: {clamped} backwards timestamps clamped", d.id);
            }
            let table = FeatureTable {
                scheme,
                matrix: Matrix::from_rows(scheme.dim(), rows)?,
                meta: records
                    .iter()
                    .map(|r| RowMeta {
                        device_id: d.id.clone(),
                        timestamp: r.timestamp,
                        label: r.label,
                    })
                    .collect(),
            };
            write_feature_table(&feature_path(ctx, &d.id, segment), &table)
        })
        .collect()
}

pub(crate) fn load_features(ctx: &RunContext, id: &str, segment: &str) -> Result<FeatureTable> {
    let table = read_feature_table(&feature_path(ctx, id, segment))?;
    if table.scheme != ctx.config.scheme {
        return Err(Error::data(format!(
            "{id} {segment}: features use {} but the config asks for {}",
            table.scheme, ctx.config.scheme
        )));
    }
    Ok(table)
}

/// Clients in device order with their fixed train/eval split.
pub(crate) fn build_clients(ctx: &RunContext, devices: &[DeviceInfo]) -> Result<Vec<Client>> {
    let seed = ctx.stage_seed("split");
    devices
        .par_iter()
        .enumerate()
        .map(|(i, d)| {
            let table = load_features(ctx, &d.id, "train")?;
            Client::split(i as u32, d.id.clone(), &table.normal_rows(), seed)
        })
        .collect()
}

fn train_config(ctx: &RunContext) -> crate::nn::TrainConfig {
    crate::nn::TrainConfig {
        shuffle_seed: ctx.stage_seed("shuffle"),
        ..ctx.config.train
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub device_ids: Vec<String>,
    pub assignment: ClusterAssignment,
    /// Present when every device has a known group.
    pub external: Option<ExternalValidity>,
    pub fingerprint_epochs: usize,
}

impl ClusterReport {
    pub fn cluster_of(&self, device: &str) -> Option<usize> {
        let i = self.device_ids.iter().position(|d| d == device)?;
        Some(self.assignment.labels[i])
    }
}

fn clusters_path(ctx: &RunContext) -> PathBuf {
    ctx.dir(Stage::Fingerprint).join("clusters.json")
}

pub(crate) fn load_clusters(ctx: &RunContext) -> Result<ClusterReport> {
    read_json(&clusters_path(ctx))
}

fn init_path(ctx: &RunContext, cluster: usize) -> PathBuf {
    ctx.dir(Stage::Fingerprint).join(format!("cluster-{cluster}.init.ckpt"))
}

fn fingerprint(ctx: &RunContext) -> Result<()> {
    let devices = load_devices(ctx)?;
    let clients = build_clients(ctx, &devices)?;
    let arch = ctx.config.architecture()?;
    let w0 = shared_init(&clients, &arch, ctx.stage_seed("init"))?;
    let fs = &ctx.config.fingerprint;
    let fp = collect_fingerprints(&clients, &arch, &w0, fs.epochs, fs.optimizer, &train_config(ctx))?;
    let assignment = model_fingerprinting(
        &fp,
        &ClusterConfig {
            k_max: fs.k_max,
            seed: ctx.stage_seed("kmeans"),
            n_init: N_INIT,
        },
    )?;
    info!(
        "fingerprint: K = {} (Davies-Bouldin argmin {}, S_Dbw argmin {})",
        assignment.k, assignment.selection.davies_bouldin_k, assignment.selection.s_dbw_k
    );
    if !assignment.selection.unanimous {
        warn!("fingerprint: validity metrics disagree on K; using the silhouette choice");
    }
    let device_ids: Vec<String> = fp.client_ids.iter().map(|&i| devices[i as usize].id.clone()).collect();
    let groups: Option<Vec<String>> = fp
        .client_ids
        .iter()
        .map(|&i| devices[i as usize].group.clone())
        .collect();
    let external = groups
        .map(|g| external_validity(&assignment.labels, &g))
        .transpose()?;
    let dir = ctx.dir(Stage::Fingerprint);
    for c in 0..assignment.k {
        let rows: Vec<usize> = (0..assignment.labels.len()).filter(|&i| assignment.labels[i] == c).collect();
        let members: Vec<FlatParams> = rows.iter().map(|&r| FlatParams(fp.rows.row(r).to_vec())).collect();
        let refs: Vec<&FlatParams> = members.iter().collect();
        let weights: Vec<usize> = rows.iter().map(|&r| clients[fp.client_ids[r] as usize].n_samples()).collect();
        let init = cluster_init(&refs, fs.weighted_init.then_some(&weights[..]))?;
        let net = DenseNet::from_flat(arch.clone(), init)?;
        let bytes = encode_checkpoint(&net, Some(ctx.config.scheme), Precision::F64);
        let path = init_path(ctx, c);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    write_k_scores(&dir.join("k_scores.csv"), &assignment)?;
    write_projection(&dir.join("projection.csv"), &device_ids, &assignment)?;
    write_json(
        &clusters_path(ctx),
        &ClusterReport {
            device_ids,
            assignment,
            external,
            fingerprint_epochs: fs.epochs,
        },
    )
}

fn csv_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_k_scores(path: &Path, a: &ClusterAssignment) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = csv_writer(path)?;
    writeln!(w, "k,silhouette,davies_bouldin,s_dbw,inertia").map_err(io)?;
    for s in &a.scores {
        writeln!(w, "{},{},{},{},{}", s.k, s.silhouette, s.davies_bouldin, s.s_dbw, s.inertia).map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    writeln!(w, "component,explained_ratio").map_err(io)?;
    for (i, r) in a.explained_ratio.iter().enumerate() {
        writeln!(w, "{},{r}", i + 1).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_projection(path: &Path, ids: &[String], a: &ClusterAssignment) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = csv_writer(path)?;
    writeln!(w, "device_id,cluster,pc1,pc2").map_err(io)?;
    for ((id, l), p) in ids.iter().zip(&a.labels).zip(&a.projection) {
        writeln!(w, "{id},{l},{},{}", p[0], p[1]).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterTraining {
    pub cluster: usize,
    pub members: Vec<String>,
    pub client_opt: crate::nn::OptimizerSpec,
    pub server_opt: crate::nn::OptimizerSpec,
    pub rounds: usize,
    pub local_epochs: usize,
    pub fl: Vec<LossSummary>,
    /// Isolated baseline, one entry per epoch.
    pub isolated: Option<Vec<LossSummary>>,
}

fn checkpoint_path(ctx: &RunContext, cluster: usize) -> PathBuf {
    ctx.dir(Stage::Train).join(format!("cluster-{cluster}.ckpt"))
}

fn training_path(ctx: &RunContext, cluster: usize) -> PathBuf {
    ctx.dir(Stage::Train).join(format!("cluster-{cluster}.json"))
}

pub(crate) fn cluster_cohort(clients: &[Client], report: &ClusterReport, cluster: usize) -> Vec<Client> {
    clients
        .iter()
        .filter(|c| report.cluster_of(&c.name) == Some(cluster))
        .cloned()
        .collect()
}

fn load_init(ctx: &RunContext, cluster: usize) -> Result<DenseNet> {
    let path = init_path(ctx, cluster);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    Ok(decode_checkpoint(&bytes)?.net)
}

fn train(ctx: &RunContext) -> Result<()> {
    let devices = load_devices(ctx)?;
    let clients = build_clients(ctx, &devices)?;
    let report = load_clusters(ctx)?;
    let cfg = &ctx.config;
    let mut table = Vec::new();
    for c in 0..report.assignment.k {
        let cohort = cluster_cohort(&clients, &report, c);
        let init = load_init(ctx, c)?;
        let arch = init.architecture().clone();
        let mut fl_cfg = cfg.fl_config(derive_indexed(ctx.stage_seed("sampling"), "cluster", c as u64));
        fl_cfg.train = train_config(ctx);
        let run = run_fl(&cohort, &arch, init.params(), &fl_cfg)?;
        info!("train: cluster {c}, {} clients, final mean eval loss {:.3e}", cohort.len(), run.final_mean_loss());
        let net = DenseNet::from_flat(arch.clone(), run.global.clone())?;
        save_checkpoint(&checkpoint_path(ctx, c), &net, Some(cfg.scheme))?;
        let isolated = if cfg.fl.isolated_baseline {
            let inits = isolated_inits(&cohort, &arch, derive_indexed(ctx.stage_seed("isolated"), "cluster", c as u64))?;
            let iso = run_isolated(
                &cohort,
                &arch,
                &inits,
                cfg.fl.rounds * cfg.fl.local_epochs,
                cfg.fl.client_opt,
                &fl_cfg.train,
            )?;
            Some(iso.log)
        } else {
            None
        };
        let record = ClusterTraining {
            cluster: c,
            members: cohort.iter().map(|m| m.name.clone()).collect(),
            client_opt: cfg.fl.client_opt,
            server_opt: cfg.fl.server_opt,
            rounds: cfg.fl.rounds,
            local_epochs: cfg.fl.local_epochs,
            fl: run.log,
            isolated,
        };
        write_json(&training_path(ctx, c), &record)?;
        table.push(record);
    }
    write_round_table(&ctx.dir(Stage::Train).join("round_loss.csv"), &table)
}

pub(crate) fn load_training(run_dir: &Path, cluster: usize) -> Result<ClusterTraining> {
    read_json(&run_dir.join(Stage::Train.dir()).join(format!("cluster-{cluster}.json")))
}

/// FL and isolated losses side by side; isolated uses epoch `round × E`.
pub(crate) fn write_round_table(path: &Path, table: &[ClusterTraining]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = csv_writer(path)?;
    writeln!(w, "cluster,round,fl_mean,fl_median,fl_min,fl_max,isolated_mean,isolated_median").map_err(io)?;
    for t in table {
        for l in &t.fl {
            let iso = t
                .isolated
                .as_ref()
                .and_then(|iso| iso.get(l.step * t.local_epochs - 1));
            let (im, imed) = iso.map_or((String::new(), String::new()), |s| (s.mean.to_string(), s.median.to_string()));
            writeln!(w, "{},{},{},{},{},{},{im},{imed}", t.cluster, l.step, l.mean, l.median, l.min, l.max)
                .map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub device_id: String,
    pub cluster: usize,
    pub threshold: f64,
    pub argmax_row: usize,
    pub validation_rows: usize,
    /// Validation rows scoring above the threshold on re-scoring. Always 0.
    pub calibration_exceedances: usize,
}

fn thresholds_path(run_dir: &Path) -> PathBuf {
    run_dir.join(Stage::Threshold.dir()).join("thresholds.json")
}

pub(crate) fn load_thresholds(run_dir: &Path) -> Result<Vec<ThresholdEntry>> {
    read_json(&thresholds_path(run_dir))
}

fn load_model(ctx: &RunContext, cluster: usize) -> Result<DenseNet> {
    let ck = load_checkpoint(&checkpoint_path(ctx, cluster))?;
    if ck.scheme.is_some_and(|s| s != ctx.config.scheme) {
        return Err(Error::data("checkpoint scheme does not match the config"));
    }
    Ok(ck.net)
}

fn threshold(ctx: &RunContext) -> Result<()> {
    let devices = load_devices(ctx)?;
    let report = load_clusters(ctx)?;
    let entries = devices
        .par_iter()
        .map(|d| {
            let cluster = report
                .cluster_of(&d.id)
                .ok_or_else(|| Error::data(format!("device {} has no cluster", d.id)))?;
            let model = load_model(ctx, cluster)?;
            let val = load_features(ctx, &d.id, "validation")?.normal_rows();
            let t = select_threshold(&model, &val, &d.id, format!("{}.validation.csv", d.id))?;
            let rescored = score_and_classify(&model, &val, t.threshold)?;
            Ok(ThresholdEntry {
                device_id: d.id.clone(),
                cluster,
                threshold: t.threshold,
                argmax_row: t.argmax_row,
                validation_rows: val.rows(),
                calibration_exceedances: rescored.iter().filter(|v| v.anomalous).count(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_json(&thresholds_path(&ctx.run_dir), &entries)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeDetection {
    pub episode: EpisodeRecord,
    pub detected: usize,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceDetection {
    pub device_id: String,
    pub cluster: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
    pub false_positive_rate: Option<f64>,
    pub episodes: Vec<EpisodeDetection>,
}

pub(crate) fn load_detection(run_dir: &Path, device: &str) -> Result<DeviceDetection> {
    read_json(&run_dir.join(Stage::Detect.dir()).join(format!("{device}.json")))
}

fn detect(ctx: &RunContext) -> Result<()> {
    let devices = load_devices(ctx)?;
    let thresholds = load_thresholds(&ctx.run_dir)?;
    let dir = ctx.dir(Stage::Detect);
    devices
        .par_iter()
        .map(|d| {
            let t = thresholds
                .iter()
                .find(|t| t.device_id == d.id)
                .ok_or_else(|| Error::data(format!("no threshold for {}", d.id)))?;
            let model = load_model(ctx, t.cluster)?;
            let test = load_features(ctx, &d.id, "test")?;
            let verdicts = score_and_classify(&model, &test.matrix, t.threshold)?;
            let ts: Vec<f64> = test.meta.iter().map(|m| m.timestamp).collect();
            let labels: Vec<Label> = test.meta.iter().map(|m| m.label).collect();
            let rep = build_report(&d.id, t.threshold, &verdicts, &ts, &labels)?;
            let episodes = d
                .episodes
                .iter()
                .map(|ep| {
                    let hits: Vec<bool> = rep
                        .packets
                        .iter()
                        .filter(|p| p.label == Label::Attack && p.timestamp >= ep.start && p.timestamp <= ep.end)
                        .map(|p| p.anomalous)
                        .collect();
                    let detected = hits.iter().filter(|&&h| h).count();
                    EpisodeDetection {
                        episode: ep.clone(),
                        detected,
                        recall: if hits.is_empty() { 0.0 } else { detected as f64 / hits.len() as f64 },
                    }
                })
                .collect();
            let path = dir.join(format!("{}.scores.csv", d.id));
            let io = |e| Error::io(&path, e);
            let mut w = csv_writer(&path)?;
            writeln!(w, "timestamp,mse,anomalous,label").map_err(io)?;
            for p in &rep.packets {
                writeln!(w, "{},{},{},{}", p.timestamp, p.mse, p.anomalous as u8, p.label.as_str()).map_err(io)?;
            }
            w.flush().map_err(io)?;
            write_json(
                &dir.join(format!("{}.json", d.id)),
                &DeviceDetection {
                    device_id: d.id.clone(),
                    cluster: t.cluster,
                    threshold: t.threshold,
                    counts: rep.counts,
                    metrics: rep.metrics,
                    false_positive_rate: rep.counts.false_positive_rate(),
                    episodes,
                },
            )
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneReport {
    pub cluster: usize,
    pub members: Vec<String>,
    pub trials: Vec<TrialResult>,
    pub best_trial: usize,
    pub grid: Option<GridResult>,
}

/// Optimizer trials (and the optional learning-rate grid) per cluster, one
/// local epoch per round. Needs the fingerprint stage; writes `tune/`.
pub fn cmd_tune(config: crate::pipeline::ExperimentConfig) -> Result<Vec<TuneReport>> {
    super::cmd_stage(config.clone(), Stage::Fingerprint)?;
    let ctx = RunContext::new(config)?;
    let devices = load_devices(&ctx)?;
    let clients = build_clients(&ctx, &devices)?;
    let report = load_clusters(&ctx)?;
    let dir = ctx.run_dir.join("tune");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut base = ctx.config.fl_config(ctx.stage_seed("sampling"));
    base.local_epochs = 1;
    base.train = train_config(&ctx);
    let mut out = Vec::new();
    for c in 0..report.assignment.k {
        let cohort = cluster_cohort(&clients, &report, c);
        let init = load_init(&ctx, c)?;
        let arch = init.architecture().clone();
        let summary = tune_trials(&cohort, &arch, init.params(), &base, &trial_table())?;
        let best = summary.trials[summary.best].trial;
        let grid = match &ctx.config.fl.grid {
            Some(g) => Some(grid_search(
                &cohort,
                &arch,
                init.params(),
                &base,
                best.client_opt.family,
                best.server_opt.family,
                &g.client_lrs,
                &g.server_lrs,
            )?),
            None => None,
        };
        let rep = TuneReport {
            cluster: c,
            members: cohort.iter().map(|m| m.name.clone()).collect(),
            best_trial: best.number,
            trials: summary.trials,
            grid,
        };
        write_json(&dir.join(format!("cluster-{c}.json")), &rep)?;
        out.push(rep);
    }
    Ok(out)
}
