use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Scheme;
use crate::fingerprint::DEFAULT_K_MAX;
use crate::fl::FlConfig;
use crate::nn::{Activation, Architecture, OptimizerSpec, TrainConfig};
use crate::synth::FleetSpec;

/// One real device: its capture or record files and an optional known group
/// used only for evaluating the clustering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSource {
    pub id: String,
    /// `.pcap` files are dissected, anything else is read as record lines.
    pub train: PathBuf,
    pub validation: PathBuf,
    pub test: PathBuf,
    #[serde(default)]
    pub group: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintSettings {
    pub epochs: usize,
    pub k_max: usize,
    pub optimizer: OptimizerSpec,
    /// Weight the cluster initial model by member sample counts.
    pub weighted_init: bool,
}

impl Default for FingerprintSettings {
    fn default() -> Self {
        FingerprintSettings {
            epochs: 4,
            k_max: DEFAULT_K_MAX,
            optimizer: OptimizerSpec::adam1(1e-3),
            weighted_init: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSettings {
    pub client_lrs: Vec<f64>,
    pub server_lrs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlSettings {
    pub rounds: usize,
    pub local_epochs: usize,
    pub client_opt: OptimizerSpec,
    pub server_opt: OptimizerSpec,
    pub participation: f64,
    pub persistent_client_state: bool,
    /// Also train every client alone for rounds × local_epochs epochs.
    pub isolated_baseline: bool,
    pub grid: Option<GridSettings>,
}

impl Default for FlSettings {
    fn default() -> Self {
        FlSettings {
            rounds: 30,
            local_epochs: 2,
            client_opt: OptimizerSpec::adam1(5e-3),
            server_opt: OptimizerSpec::sgd(1.0),
            participation: 1.0,
            persistent_client_state: false,
            isolated_baseline: true,
            grid: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scheme: Scheme,
    /// Activation of the autoencoder's last layer; hidden layers are ReLU.
    pub output_activation: Activation,
    pub out_dir: PathBuf,
    /// Synthetic fleet; mutually exclusive with `devices`.
    pub fleet: Option<FleetSpec>,
    pub devices: Vec<DeviceSource>,
    pub train: TrainConfig,
    pub fingerprint: FingerprintSettings,
    pub fl: FlSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            scheme: Scheme::Hierarchical,
            output_activation: Activation::Identity,
            out_dir: PathBuf::from("run"),
            fleet: None,
            devices: Vec::new(),
            train: TrainConfig::default(),
            fingerprint: FingerprintSettings::default(),
            fl: FlSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// The built-in experiment: default synthetic fleet, hierarchical ports.
    pub fn synthetic(seed: u64, out_dir: impl Into<PathBuf>) -> Self {
        ExperimentConfig {
            seed,
            out_dir: out_dir.into(),
            fleet: Some(FleetSpec::default()),
            ..Default::default()
        }
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::autoencoder_with_output(self.scheme.dim(), self.output_activation)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        // Relative device paths are relative to the config file.
        let base = path.parent().unwrap_or_else(|| Path::new(""));
        for d in &mut cfg.devices {
            for p in [&mut d.train, &mut d.validation, &mut d.test] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn fl_config(&self, sampling_seed: u64) -> FlConfig {
        FlConfig {
            rounds: self.fl.rounds,
            local_epochs: self.fl.local_epochs,
            client_opt: self.fl.client_opt,
            server_opt: self.fl.server_opt,
            train: self.train,
            persistent_client_state: self.fl.persistent_client_state,
            participation: self.fl.participation,
            sampling_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.fleet, self.devices.is_empty()) {
            (Some(_), false) => return Err(Error::config("set either `fleet` or `devices`, not both")),
            (None, true) => return Err(Error::config("no data source: set `fleet` or `devices`")),
            (Some(f), true) => f.validate()?,
            (None, false) => {
                let mut ids: Vec<&str> = self.devices.iter().map(|d| d.id.as_str()).collect();
                ids.sort_unstable();
                if ids.windows(2).any(|w| w[0] == w[1]) {
                    return Err(Error::config("duplicate device id"));
                }
                for d in &self.devices {
                    if d.id.is_empty() || d.id.contains(['/', '\\']) {
                        return Err(Error::config(format!("invalid device id `{}`", d.id)));
                    }
                    for p in [&d.train, &d.validation, &d.test] {
                        if !p.exists() {
                            return Err(Error::config(format!(
                                "device {}: input {} does not exist",
                                d.id,
                                p.display()
                            )));
                        }
                    }
                }
            }
        }
        self.train.validate()?;
        if self.fingerprint.epochs == 0 {
            return Err(Error::config("fingerprint.epochs must be at least 1"));
        }
        if self.fingerprint.k_max < 2 {
            return Err(Error::config("fingerprint.k_max must be at least 2"));
        }
        self.fingerprint.optimizer.validate()?;
        self.fl_config(0).validate()?;
        if let Some(g) = &self.fl.grid {
            if g.client_lrs.is_empty() || g.server_lrs.is_empty() {
                return Err(Error::config("fl.grid needs learning rates on both axes"));
            }
        }
        Ok(())
    }
}
