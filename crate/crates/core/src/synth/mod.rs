//! Synthetic IoT fleet: per-device normal traffic drawn from archetype
//! profiles, with attack episodes injected into a held-out window.
//!
//! Each device yields three consecutive segments of one stream: a training
//! trace, a later validation-normal trace, and a test trace that carries the
//! injected attacks.

mod archetype;
mod attack;

use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use archetype::{
    ConnectionStyle, DeviceArchetype, DeviceGenerator, PortWeight, Response, Role, Spread, Transport,
};
pub use attack::{
    inject_attacks, AttackEpisode, AttackKind, EpisodeRecord, InjectedTrace, CNC_PORT, RANDOM_512_ENTROPY,
};

use crate::error::{Error, Result};
use crate::ingest::{save_records, PacketRecord};
use crate::seed::derive_indexed;

/// How an episode's packets are paced.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pacing {
    /// Fixed mean packet rate in packets per second.
    Rate(f64),
    /// Spread the packets over this fraction of the test window.
    Spread(f64),
}

/// An episode placed relative to a device's test window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTemplate {
    pub kind: AttackKind,
    /// Start as a fraction of the test window.
    pub start: f64,
    pub packets: usize,
    pub pacing: Pacing,
}

impl EpisodeTemplate {
    pub fn defaults() -> Vec<EpisodeTemplate> {
        vec![
            EpisodeTemplate {
                kind: AttackKind::TelnetScan,
                start: 0.10,
                packets: 300,
                pacing: Pacing::Rate(100.0),
            },
            EpisodeTemplate {
                kind: AttackKind::UdpFlood,
                start: 0.35,
                packets: 5000,
                pacing: Pacing::Rate(1000.0),
            },
            EpisodeTemplate {
                kind: AttackKind::CncHeartbeat,
                start: 0.55,
                packets: 30,
                pacing: Pacing::Spread(0.35),
            },
        ]
    }

    /// Resolves the template against a test window `[lo, hi]`.
    pub fn place(&self, lo: f64, hi: f64, target: Ipv4Addr) -> Result<AttackEpisode> {
        if !(0.0..1.0).contains(&self.start) {
            return Err(Error::config("episode start must be a fraction in [0, 1)"));
        }
        let span = hi - lo;
        let start = lo + self.start * span;
        let per_packet = if self.kind == AttackKind::CncHeartbeat { 3.0 } else { 1.0 };
        let rate = match self.pacing {
            Pacing::Rate(r) => r,
            Pacing::Spread(f) => {
                if !(f > 0.0 && f <= 1.0) {
                    return Err(Error::config("episode spread must be in (0, 1]"));
                }
                (self.packets as f64 / per_packet).max(1.0) / (f * span).max(1e-9)
            }
        };
        Ok(AttackEpisode {
            kind: self.kind,
            start,
            rate,
            packets: self.packets,
            end: hi,
            target,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FleetSpec {
    pub archetypes: Vec<DeviceArchetype>,
    pub instances: usize,
    pub train_packets: usize,
    pub validation_packets: usize,
    pub test_packets: usize,
    pub attacks: Vec<EpisodeTemplate>,
}

impl Default for FleetSpec {
    fn default() -> Self {
        FleetSpec {
            archetypes: DeviceArchetype::defaults(),
            instances: 5,
            train_packets: 2000,
            validation_packets: 1000,
            test_packets: 2000,
            attacks: EpisodeTemplate::defaults(),
        }
    }
}

impl FleetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.archetypes.is_empty() || self.instances == 0 {
            return Err(Error::config("fleet needs at least one archetype and one instance"));
        }
        if self.train_packets == 0 || self.validation_packets == 0 || self.test_packets < 2 {
            return Err(Error::config("every trace needs packets"));
        }
        for (i, a) in self.archetypes.iter().enumerate() {
            a.validate()?;
            for b in &self.archetypes[..i] {
                if a.name == b.name {
                    return Err(Error::config(format!("duplicate archetype name {}", a.name)));
                }
                if a.same_profile(b) {
                    return Err(Error::config(format!(
                        "archetypes {} and {} have identical profiles",
                        b.name, a.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn device_count(&self) -> usize {
        self.archetypes.len() * self.instances
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDevice {
    pub device_id: String,
    pub archetype: String,
    pub train: Vec<PacketRecord>,
    pub validation: Vec<PacketRecord>,
    pub test: Vec<PacketRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

fn device_ip(index: usize) -> Ipv4Addr {
    let n = 10 + index as u32;
    Ipv4Addr::new(10, 0, (n >> 8) as u8, n as u8)
}

fn make_device(spec: &FleetSpec, arch_idx: usize, inst: usize, seed: u64) -> Result<SyntheticDevice> {
    let arch = &spec.archetypes[arch_idx];
    let index = arch_idx * spec.instances + inst;
    let peer = Ipv4Addr::new(10, 0, 0, 1 + (arch_idx as u8 % 8));
    let dns = Ipv4Addr::new(10, 0, 0, 250);
    let dev_seed = derive_indexed(seed, "device", index as u64);
    let mut gen = DeviceGenerator::new(arch, device_ip(index), peer, dns, dev_seed)?;
    let train = gen.take(spec.train_packets);
    let validation = gen.take(spec.validation_packets);
    let test = gen.take(spec.test_packets);
    let (lo, hi) = (test[0].timestamp, test[test.len() - 1].timestamp);
    let target = Ipv4Addr::new(198, 51, 100, 1 + (index % 200) as u8);
    let cnc = Ipv4Addr::new(203, 0, 113, 66);
    let episodes = spec
        .attacks
        .iter()
        .map(|t| {
            let to = if t.kind == AttackKind::CncHeartbeat { cnc } else { target };
            t.place(lo, hi, to)
        })
        .collect::<Result<Vec<_>>>()?;
    let injected = inject_attacks(test, gen.device_ip(), &episodes, derive_indexed(seed, "attacks", index as u64))?;
    Ok(SyntheticDevice {
        device_id: format!("{}-{:02}", arch.name, inst),
        archetype: arch.name.clone(),
        train,
        validation,
        test: injected.records,
        episodes: injected.episodes,
    })
}

/// Generates every device of the fleet; deterministic in `(spec, seed)`.
pub fn make_fleet(spec: &FleetSpec, seed: u64) -> Result<Vec<SyntheticDevice>> {
    spec.validate()?;
    let jobs: Vec<(usize, usize)> = (0..spec.archetypes.len())
        .flat_map(|a| (0..spec.instances).map(move |i| (a, i)))
        .collect();
    jobs.par_iter().map(|&(a, i)| make_device(spec, a, i, seed)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub normal: usize,
    pub attack: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceEntry {
    pub device_id: String,
    pub archetype: String,
    pub train: String,
    pub validation: String,
    pub test: String,
    pub test_labels: LabelCounts,
    pub episodes: Vec<EpisodeRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetManifest {
    pub seed: u64,
    pub devices: Vec<DeviceEntry>,
}

impl FleetManifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join("fleet.json")
    }

    pub fn load(dir: &Path) -> Result<FleetManifest> {
        let path = Self::path(dir);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
    }
}

/// Writes three record files per device plus `fleet.json`.
pub fn write_fleet(devices: &[SyntheticDevice], seed: u64, dir: &Path) -> Result<FleetManifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(devices.len());
    for d in devices {
        let name = |part: &str| format!("{}.{part}.jsonl", d.device_id);
        let (train, validation, test) = (name("train"), name("validation"), name("test"));
        save_records(dir.join(&train), &d.train)?;
        save_records(dir.join(&validation), &d.validation)?;
        save_records(dir.join(&test), &d.test)?;
        let attack = d.test.iter().filter(|r| r.label == crate::ingest::Label::Attack).count();
        entries.push(DeviceEntry {
            device_id: d.device_id.clone(),
            archetype: d.archetype.clone(),
            train,
            validation,
            test,
            test_labels: LabelCounts {
                normal: d.test.len() - attack,
                attack,
            },
            episodes: d.episodes.clone(),
        });
    }
    let manifest = FleetManifest {
        seed,
        devices: entries,
    };
    let path = FleetManifest::path(dir);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}
