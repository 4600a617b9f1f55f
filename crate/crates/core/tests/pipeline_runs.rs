mod common;

use std::fs;
use std::path::Path;

use fedids::ingest::save_records;
use fedids::pipeline::{cmd_pipeline, cmd_report, cmd_stage, DeviceSource, ExperimentConfig, RunManifest, Stage};
use fedids::synth::{make_fleet, DeviceArchetype, FleetSpec};

fn small_fleet() -> FleetSpec {
    FleetSpec {
        archetypes: vec![DeviceArchetype::mqtt_sensor(), DeviceArchetype::coap_sensor()],
        instances: 3,
        train_packets: 400,
        validation_packets: 200,
        test_packets: 800,
        ..Default::default()
    }
}

fn small_config(dir: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::synthetic(5, dir);
    cfg.fleet = Some(small_fleet());
    cfg.fl.rounds = 3;
    cfg.fl.isolated_baseline = true;
    cfg
}

fn output_hashes(m: &RunManifest, stage: Stage) -> Vec<(String, String)> {
    m.stages
        .iter()
        .find(|s| s.stage == stage)
        .unwrap()
        .outputs
        .iter()
        .map(|f| (f.path.clone(), f.sha256.clone()))
        .collect()
}

#[test]
fn rerun_resumes_and_repairs() {
    let dir = tempfile::tempdir().unwrap();
    let first = cmd_pipeline(small_config(dir.path())).unwrap();
    assert_eq!(first.stages.len(), Stage::PIPELINE.len());
    assert!(dir.path().join("manifest.json").exists());
    assert!(dir.path().join("config.toml").exists());

    let clusters = dir.path().join("fingerprint").join("clusters.json");
    let stamp = fs::metadata(&clusters).unwrap().modified().unwrap();
    let again = cmd_pipeline(small_config(dir.path())).unwrap();
    assert_eq!(first, again);
    assert_eq!(fs::metadata(&clusters).unwrap().modified().unwrap(), stamp, "fingerprint stage reran");

    // a damaged threshold file forces that stage and the rest to rerun
    let thresholds = dir.path().join("thresholds");
    let victim = fs::read_dir(&thresholds).unwrap().next().unwrap().unwrap().path();
    fs::write(&victim, b"garbage").unwrap();
    let repaired = cmd_pipeline(small_config(dir.path())).unwrap();
    assert_eq!(first, repaired);
    assert_eq!(fs::metadata(&clusters).unwrap().modified().unwrap(), stamp);
}

#[test]
fn config_change_invalidates_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let a = cmd_pipeline(small_config(dir.path())).unwrap();
    let mut cfg = small_config(dir.path());
    cfg.fl.rounds = 4;
    let b = cmd_pipeline(cfg).unwrap();
    assert_ne!(a.config_sha256, b.config_sha256);
    assert_eq!(output_hashes(&a, Stage::Fingerprint), output_hashes(&b, Stage::Fingerprint));
    assert_ne!(output_hashes(&a, Stage::Train), output_hashes(&b, Stage::Train));
}

#[test]
fn single_stage_brings_upstream_current() {
    let dir = tempfile::tempdir().unwrap();
    let rec = cmd_stage(small_config(dir.path()), Stage::Fingerprint).unwrap();
    assert_eq!(rec.stage, Stage::Fingerprint);
    assert!(rec.outputs.iter().any(|f| f.path == "fingerprint/clusters.json"));
    assert!(dir.path().join("features").is_dir());
    assert!(!dir.path().join("train").exists());
    assert!(cmd_report(dir.path()).is_err());
    assert!(cmd_report(&dir.path().join("missing")).is_err());
}

#[test]
fn device_files_run_end_to_end() {
    let data = tempfile::tempdir().unwrap();
    let fleet = make_fleet(&small_fleet(), 21).unwrap();
    let mut devices = Vec::new();
    for d in &fleet {
        let mut paths = Vec::new();
        for (seg, recs) in [("train", &d.train), ("validation", &d.validation), ("test", &d.test)] {
            let name = format!("{}-{seg}.jsonl", d.device_id);
            save_records(data.path().join(&name), recs.iter()).unwrap();
            paths.push(name.into());
        }
        devices.push(DeviceSource {
            id: d.device_id.clone(),
            train: paths.remove(0),
            validation: paths.remove(0),
            test: paths.remove(0),
            group: Some(d.archetype.clone()),
        });
    }
    let out = data.path().join("run");
    let cfg = ExperimentConfig {
        out_dir: out.clone(),
        devices,
        fleet: None,
        ..small_config(&out)
    };
    // relative device paths resolve against the config file
    let cfg_path = data.path().join("experiment.toml");
    fs::write(&cfg_path, cfg.to_toml()).unwrap();
    let loaded = ExperimentConfig::load(&cfg_path).unwrap();
    assert_eq!(loaded.devices[0].train, data.path().join(&cfg.devices[0].train));

    cmd_pipeline(loaded).unwrap();
    let summary = cmd_report(&out).unwrap();
    assert_eq!(summary.devices.len(), fleet.len());
    assert_eq!(summary.k, 2);
    assert_eq!(summary.external.unwrap().ari, 1.0);
    assert_eq!(summary.max_calibration_exceedances, 0);
    assert!(summary.total_counts.tp > 0);

    // the summary copies stage outputs rather than recomputing them
    for d in &summary.devices {
        let stage: fedids::pipeline::DeviceDetection =
            serde_json::from_slice(&fs::read(out.join("detect").join(format!("{}.json", d.device_id))).unwrap()).unwrap();
        assert_eq!(&stage, d);
    }
    let table = fs::read_to_string(out.join("report").join("round_loss.csv")).unwrap();
    let mut lines = table.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (fl, iso) = (
        header.iter().position(|h| *h == "fl_mean").unwrap(),
        header.iter().position(|h| *h == "isolated_mean").unwrap(),
    );
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2 * 3);
    for r in rows {
        assert!(r[fl].parse::<f64>().unwrap() > 0.0);
        assert!(r[iso].parse::<f64>().unwrap() > 0.0);
    }
}

#[test]
fn invalid_configs_are_rejected_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(dir.path());
    cfg.fingerprint.epochs = 0;
    assert!(cmd_pipeline(cfg).is_err());
    let mut cfg = small_config(dir.path());
    cfg.fleet = None;
    assert!(cmd_pipeline(cfg).is_err());
    assert!(!dir.path().join("manifest.json").exists());

    let out = dir.path().join("never");
    let cfg = ExperimentConfig {
        out_dir: out.clone(),
        fleet: None,
        devices: vec![DeviceSource {
            id: "cam".into(),
            train: dir.path().join("absent.pcap"),
            validation: dir.path().join("absent.pcap"),
            test: dir.path().join("absent.pcap"),
            group: None,
        }],
        ..Default::default()
    };
    let err = cmd_pipeline(cfg).unwrap_err();
    assert_eq!(err.exit_code(), 1, "{err}");
    assert!(!out.exists());
}
