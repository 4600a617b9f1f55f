//! Experiment orchestration: source data → features → fingerprints →
//! per-cluster training → thresholds → detection → report.
//!
//! Every stage writes into its own directory under the run directory and
//! leaves a marker with the hashes of what it read and wrote. A rerun skips
//! stages whose marker still matches the config and the files on disk.

mod config;
mod report;
mod stages;

use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{DeviceSource, ExperimentConfig, FingerprintSettings, FlSettings, GridSettings};
pub use report::{cmd_report, RunSummary};
pub use stages::{
    ClusterReport, ClusterTraining, DeviceDetection, DeviceInfo, EpisodeDetection, ThresholdEntry, TuneReport,
};

use crate::error::{Error, Result};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Source,
    Featurize,
    Fingerprint,
    Train,
    Threshold,
    Detect,
    Report,
}

impl Stage {
    pub const PIPELINE: [Stage; 7] = [
        Stage::Source,
        Stage::Featurize,
        Stage::Fingerprint,
        Stage::Train,
        Stage::Threshold,
        Stage::Detect,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Source => "source",
            Stage::Featurize => "featurize",
            Stage::Fingerprint => "fingerprint",
            Stage::Train => "train",
            Stage::Threshold => "threshold",
            Stage::Detect => "detect",
            Stage::Report => "report",
        }
    }

    /// Output directory relative to the run directory.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Source => "data",
            Stage::Featurize => "features",
            Stage::Fingerprint => "fingerprint",
            Stage::Train => "train",
            Stage::Threshold => "thresholds",
            Stage::Detect => "detect",
            Stage::Report => "report",
        }
    }

    fn upstream(self) -> &'static [Stage] {
        match self {
            Stage::Source => &[],
            Stage::Featurize => &[Stage::Source],
            Stage::Fingerprint => &[Stage::Source, Stage::Featurize],
            Stage::Train => &[Stage::Source, Stage::Featurize, Stage::Fingerprint],
            Stage::Threshold => &[Stage::Source, Stage::Featurize, Stage::Fingerprint, Stage::Train],
            Stage::Detect => &[Stage::Source, Stage::Featurize, Stage::Fingerprint, Stage::Threshold],
            Stage::Report => &[Stage::Source, Stage::Fingerprint, Stage::Train, Stage::Threshold, Stage::Detect],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileHash {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub seed: u64,
    pub config_sha256: String,
    pub inputs: Vec<FileHash>,
    pub outputs: Vec<FileHash>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    pub stages: Vec<StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).expect("serializable value");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

/// Resolved config plus the run directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub config: ExperimentConfig,
    pub run_dir: PathBuf,
}

impl RunContext {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let run_dir = config.out_dir.clone();
        Ok(RunContext { config, run_dir })
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.config.seed, stage)
    }

    pub fn dir(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(stage.dir())
    }

    /// Hash of the config with the output directory blanked, so the same
    /// experiment written to two places hashes the same.
    pub fn config_hash(&self) -> String {
        let mut c = self.config.clone();
        c.out_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.run_dir.join(".stages").join(format!("{}.json", stage.name()))
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.run_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn hash_files(&self, files: &[PathBuf]) -> Result<Vec<FileHash>> {
        let mut out = files
            .iter()
            .map(|p| {
                Ok(FileHash {
                    path: self.rel(p),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.sort_by(|a, b| a.path.cmp(&b.path));
        Ok(out)
    }

    fn list_outputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let dir = self.dir(stage);
        let mut files = Vec::new();
        let mut stack = vec![dir.clone()];
        while let Some(d) = stack.pop() {
            let entries = fs::read_dir(&d).map_err(|e| Error::io(&d, e))?;
            for e in entries {
                let e = e.map_err(|e| Error::io(&d, e))?;
                let p = e.path();
                if p.is_dir() {
                    stack.push(p);
                } else {
                    files.push(p);
                }
            }
        }
        files.sort();
        Ok(files)
    }

    fn stage_inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        let mut inputs = Vec::new();
        if stage == Stage::Source {
            for d in &self.config.devices {
                inputs.extend([d.train.clone(), d.validation.clone(), d.test.clone()]);
            }
            return Ok(inputs);
        }
        for up in stage.upstream() {
            inputs.extend(self.list_outputs(*up)?);
        }
        Ok(inputs)
    }

    fn load_marker(&self, stage: Stage) -> Option<StageRecord> {
        read_json::<StageRecord>(&self.marker(stage)).ok()
    }

    /// A marker is current when the config matches and every recorded file
    /// still has its recorded hash.
    fn marker_current(&self, rec: &StageRecord) -> bool {
        rec.config_sha256 == self.config_hash()
            && rec.inputs.iter().chain(&rec.outputs).all(|f| {
                let p = if Path::new(&f.path).is_absolute() {
                    PathBuf::from(&f.path)
                } else {
                    self.run_dir.join(&f.path)
                };
                sha256_file(&p).is_ok_and(|h| h == f.sha256)
            })
    }

    /// Runs one stage unconditionally and records its marker.
    pub fn run_stage(&self, stage: Stage) -> Result<StageRecord> {
        let dir = self.dir(stage);
        let wrap = |e: Error| Error::Stage {
            stage: stage.name().to_string(),
            partial: dir.clone(),
            source: Box::new(e),
        };
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        }
        fs::create_dir_all(&dir).map_err(|e| wrap(Error::io(&dir, e)))?;
        let inputs = self.stage_inputs(stage).map_err(wrap)?;
        info!("stage {}: start", stage.name());
        stages::run(self, stage).map_err(wrap)?;
        let record = StageRecord {
            stage,
            seed: self.stage_seed(stage.name()),
            config_sha256: self.config_hash(),
            inputs: self.hash_files(&inputs).map_err(wrap)?,
            outputs: self.hash_files(&self.list_outputs(stage).map_err(wrap)?).map_err(wrap)?,
        };
        write_json(&self.marker(stage), &record).map_err(wrap)?;
        info!("stage {}: done, {} outputs", stage.name(), record.outputs.len());
        Ok(record)
    }

    fn prepare(&self) -> Result<()> {
        fs::create_dir_all(&self.run_dir).map_err(|e| Error::io(&self.run_dir, e))?;
        let cfg_path = self.run_dir.join("config.toml");
        fs::write(&cfg_path, self.config.to_toml()).map_err(|e| Error::io(&cfg_path, e))
    }

    /// Runs `stages` in order, resuming from current markers. Once one stage
    /// reruns, everything after it reruns too.
    pub fn run_stages(&self, stages: &[Stage]) -> Result<Vec<StageRecord>> {
        self.prepare()?;
        let mut records = Vec::with_capacity(stages.len());
        let mut dirty = false;
        for &stage in stages {
            if !dirty {
                if let Some(rec) = self.load_marker(stage).filter(|r| self.marker_current(r)) {
                    info!("stage {}: up to date, skipping", stage.name());
                    records.push(rec);
                    continue;
                }
            }
            dirty = true;
            records.push(self.run_stage(stage)?);
        }
        Ok(records)
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.run_dir.join("manifest.json")
    }
}

/// Full pipeline with resume; writes `manifest.json` at the end.
pub fn cmd_pipeline(config: ExperimentConfig) -> Result<RunManifest> {
    let ctx = RunContext::new(config)?;
    let stages = ctx.run_stages(&Stage::PIPELINE)?;
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: ctx.config.seed,
        config_sha256: ctx.config_hash(),
        stages,
    };
    write_json(&ctx.manifest_path(), &manifest)?;
    Ok(manifest)
}

/// Runs a single stage after making sure its upstream stages are current.
pub fn cmd_stage(config: ExperimentConfig, stage: Stage) -> Result<StageRecord> {
    let ctx = RunContext::new(config)?;
    let end = Stage::PIPELINE.iter().position(|&s| s == stage).expect("pipeline stage");
    let mut recs = ctx.run_stages(&Stage::PIPELINE[..=end])?;
    Ok(recs.pop().expect("stage ran"))
}

pub use stages::{cmd_tune, ingest_file};
