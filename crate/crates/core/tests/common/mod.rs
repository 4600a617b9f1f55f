#![allow(dead_code)]

use std::net::Ipv4Addr;

use fedids::features::{featurize_stream, Scheme};
use fedids::fl::Client;
use fedids::synth::{make_fleet, FleetSpec, SyntheticDevice};
use fedids::Matrix;

/// Byte-level writer for classic little-endian microsecond pcap files.
pub struct PcapWriter {
    pub bytes: Vec<u8>,
}

impl PcapWriter {
    pub fn new() -> Self {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&0i32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        bytes.extend_from_slice(&65535u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        PcapWriter { bytes }
    }

    pub fn frame(&mut self, sec: u32, usec: u32, data: &[u8]) -> &mut Self {
        self.frame_truncated(sec, usec, data, data.len() as u32)
    }

    /// Record with `wire_len` possibly larger than the captured bytes.
    pub fn frame_truncated(&mut self, sec: u32, usec: u32, data: &[u8], wire_len: u32) -> &mut Self {
        self.bytes.extend_from_slice(&sec.to_le_bytes());
        self.bytes.extend_from_slice(&usec.to_le_bytes());
        self.bytes.extend_from_slice(&(data.len() as u32).to_le_bytes());
        self.bytes.extend_from_slice(&wire_len.to_le_bytes());
        self.bytes.extend_from_slice(data);
        self
    }

    /// Frame records only, without the global header.
    pub fn body(&self) -> &[u8] {
        &self.bytes[24..]
    }
}

pub const MAC_A: [u8; 6] = [0x02, 0, 0, 0, 0, 0x0a];
pub const MAC_B: [u8; 6] = [0x02, 0, 0, 0, 0, 0x0b];

pub fn ethernet(ethertype: u16, payload: &[u8]) -> Vec<u8> {
    let mut f = Vec::with_capacity(14 + payload.len());
    f.extend_from_slice(&MAC_B);
    f.extend_from_slice(&MAC_A);
    f.extend_from_slice(&ethertype.to_be_bytes());
    f.extend_from_slice(payload);
    f
}

pub struct Ip {
    pub tos: u8,
    pub flags: u8,
    pub ttl: u8,
    pub proto: u8,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
}

pub fn ipv4(h: &Ip, l4: &[u8]) -> Vec<u8> {
    let total = 20 + l4.len();
    let mut p = vec![0x45, h.tos];
    p.extend_from_slice(&(total as u16).to_be_bytes());
    p.extend_from_slice(&0x1234u16.to_be_bytes());
    p.extend_from_slice(&((h.flags as u16) << 13).to_be_bytes());
    p.push(h.ttl);
    p.push(h.proto);
    p.extend_from_slice(&[0, 0]);
    p.extend_from_slice(&h.src.octets());
    p.extend_from_slice(&h.dst.octets());
    p.extend_from_slice(l4);
    p
}

/// TCP header without options; `flags` holds the low byte of the control
/// bits plus the nonce bit at 0x100.
pub fn tcp(src: u16, dst: u16, flags: u16, win: u16, payload: &[u8]) -> Vec<u8> {
    let mut t = Vec::new();
    t.extend_from_slice(&src.to_be_bytes());
    t.extend_from_slice(&dst.to_be_bytes());
    t.extend_from_slice(&1000u32.to_be_bytes());
    t.extend_from_slice(&2000u32.to_be_bytes());
    t.push(0x50 | ((flags >> 8) as u8 & 1));
    t.push(flags as u8);
    t.extend_from_slice(&win.to_be_bytes());
    t.extend_from_slice(&[0, 0, 0, 0]);
    t.extend_from_slice(payload);
    t
}

pub fn udp(src: u16, dst: u16, payload: &[u8]) -> Vec<u8> {
    let mut u = Vec::new();
    u.extend_from_slice(&src.to_be_bytes());
    u.extend_from_slice(&dst.to_be_bytes());
    u.extend_from_slice(&((8 + payload.len()) as u16).to_be_bytes());
    u.extend_from_slice(&[0, 0]);
    u.extend_from_slice(payload);
    u
}

pub fn icmp_echo(payload: &[u8]) -> Vec<u8> {
    let mut i = vec![8, 0, 0, 0, 0, 1, 0, 1];
    i.extend_from_slice(payload);
    i
}

pub fn arp() -> Vec<u8> {
    let mut a = vec![0, 1, 8, 0, 6, 4, 0, 1];
    a.extend_from_slice(&MAC_A);
    a.extend_from_slice(&[10, 0, 0, 1]);
    a.extend_from_slice(&[0; 6]);
    a.extend_from_slice(&[10, 0, 0, 2]);
    ethernet(0x0806, &a)
}

pub fn host(n: u8) -> Ipv4Addr {
    Ipv4Addr::new(10, 0, 0, n)
}

/// The golden capture: one TCP, one UDP and one ICMP frame.
pub fn golden() -> (PcapWriter, [Vec<u8>; 3]) {
    let tcp_frame = ethernet(
        0x0800,
        &ipv4(
            &Ip { tos: 0x10, flags: 0b010, ttl: 64, proto: 6, src: host(1), dst: host(2) },
            &tcp(40000, 1883, 0x100 | 0x18, 502, b"hello"),
        ),
    );
    let udp_frame = ethernet(
        0x0800,
        &ipv4(
            &Ip { tos: 0, flags: 0, ttl: 128, proto: 17, src: host(3), dst: Ipv4Addr::new(8, 8, 8, 8) },
            &udp(5353, 53, &[7; 20]),
        ),
    );
    let icmp_frame = ethernet(
        0x0800,
        &ipv4(&Ip { tos: 0xb8, flags: 0b100, ttl: 1, proto: 1, src: host(4), dst: host(5) }, &icmp_echo(&[0xab; 32])),
    );
    let mut w = PcapWriter::new();
    w.frame(100, 250_000, &tcp_frame).frame(100, 500_000, &udp_frame).frame(101, 0, &icmp_frame);
    (w, [tcp_frame, udp_frame, icmp_frame])
}

/// Featurized training rows of each device, split into clients the same
/// way the pipeline does.
pub fn cohort(fleet: &[SyntheticDevice], scheme: Scheme, split_seed: u64) -> Vec<Client> {
    fleet
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let (rows, _) = featurize_stream(&d.train, scheme);
            let m = Matrix::from_rows(scheme.dim(), rows).unwrap();
            Client::split(i as u32, d.device_id.clone(), &m, split_seed).unwrap()
        })
        .collect()
}

pub fn fleet(spec: &FleetSpec, seed: u64) -> Vec<SyntheticDevice> {
    make_fleet(spec, seed).unwrap()
}

/// Index of the archetype each device belongs to, in device order.
pub fn truth(fleet: &[SyntheticDevice]) -> Vec<String> {
    fleet.iter().map(|d| d.archetype.clone()).collect()
}

/// Rows in [0, 1] with a sprinkling of exact zeros, like normalized features.
pub fn unit_rows(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            (0..dim)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random::<f64>() })
                .collect()
        })
        .collect()
}

/// Seeded net for gradient checks: the regular weight draw with biases
/// spread over [-0.1, 0.1], so no pre-activation sits exactly on a ReLU kink.
pub fn fixture_net(arch: &fedids::nn::Architecture, seed: u64) -> fedids::nn::DenseNet {
    use rand::{Rng, SeedableRng};
    let mut net = fedids::nn::DenseNet::init(arch.clone(), seed);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    for i in 0..arch.param_count() {
        if !arch.is_weight(i) {
            net.params_mut()[i] = rng.random_range(-0.1..0.1);
        }
    }
    net
}

/// Magnitude below which gradient entries are compared absolutely. Central
/// differences at eps = 1e-5 on an O(0.1) loss carry about 1e-12 of
/// cancellation noise, so relative error is meaningless much below this.
pub const GRADIENT_FLOOR: f64 = 1e-6;

/// Worst relative disagreement between the analytic gradient and central
/// differences with step `eps`. Entries where both sides are below `floor`
/// in magnitude are compared against `floor` instead.
pub fn gradient_check(net: &fedids::nn::DenseNet, rows: &[Vec<f64>], l2: f64, eps: f64, floor: f64) -> f64 {
    let batch: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
    let (_, grad) = net.gradient(&batch, l2).unwrap();
    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for i in 0..grad.len() {
        let orig = net.params()[i];
        probe.params_mut()[i] = orig + eps;
        let up = probe.loss(&batch, l2).unwrap();
        probe.params_mut()[i] = orig - eps;
        let down = probe.loss(&batch, l2).unwrap();
        probe.params_mut()[i] = orig;
        let fd = (up - down) / (2.0 * eps);
        let denom = grad[i].abs().max(fd.abs()).max(floor);
        worst = worst.max((grad[i] - fd).abs() / denom);
    }
    worst
}

/// One FedAvg trial: random client models and sample counts, aggregated and
/// stepped with server SGD at rate 1. Returns the max-norm relative distance
/// to the directly computed weighted average.
pub fn fedavg_trial(seed: u64, params: usize) -> f64 {
    use fedids::fl::{aggregate, ClientUpdate, ServerState};
    use fedids::nn::{Architecture, FlatParams, OptimizerSpec};
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let clients = rng.random_range(1..=20usize);
    let arch = Architecture::new(vec![fedids::nn::LayerShape {
        inputs: params - 1,
        outputs: 1,
        activation: fedids::nn::Activation::Identity,
    }])
    .unwrap();
    let mut draw = |scale: f64| FlatParams((0..params).map(|_| rng.random_range(-scale..scale)).collect());
    let global = draw(1.0);
    let models: Vec<FlatParams> = (0..clients).map(|_| draw(2.0)).collect();
    let counts: Vec<usize> = (0..clients).map(|_| rng.random_range(1..=5000)).collect();
    let mut ids: Vec<u32> = (0..clients as u32).collect();
    ids.shuffle(&mut rng);

    let updates: Vec<ClientUpdate> = (0..clients)
        .map(|c| ClientUpdate {
            client_id: ids[c],
            delta: models[c].sub(&global),
            n_samples: counts[c],
        })
        .collect();
    let g = aggregate(&updates).unwrap();
    let mut server = ServerState::new(arch, global, OptimizerSpec::sgd(1.0)).unwrap();
    server.step(&g).unwrap();

    let n: usize = counts.iter().sum();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for i in 0..params {
        let direct: f64 = (0..clients).map(|c| counts[c] as f64 / n as f64 * models[c][i]).sum();
        worst = worst.max((server.global[i] - direct).abs());
        scale = scale.max(direct.abs());
    }
    worst / scale
}

/// K and ARI of the fingerprinting step on the default fleet for one master
/// seed, with every stage seed derived from it.
pub fn fingerprint_run(master: u64, epochs: usize) -> (usize, f64, bool) {
    use fedids::fingerprint::{adjusted_rand_index, collect_fingerprints, model_fingerprinting, ClusterConfig};
    use fedids::fl::shared_init;
    use fedids::nn::{Activation, Architecture, OptimizerSpec, TrainConfig};
    use fedids::seed::derive_seed;

    let spec = FleetSpec::default();
    let devices = fleet(&spec, derive_seed(master, "fleet"));
    let scheme = Scheme::Hierarchical;
    let clients = cohort(&devices, scheme, derive_seed(master, "split"));
    let arch = Architecture::autoencoder_with_output(scheme.dim(), Activation::Identity).unwrap();
    let w0 = shared_init(&clients, &arch, derive_seed(master, "init")).unwrap();
    let train = TrainConfig {
        shuffle_seed: derive_seed(master, "shuffle"),
        ..Default::default()
    };
    let fp = collect_fingerprints(&clients, &arch, &w0, epochs, OptimizerSpec::adam1(1e-3), &train).unwrap();
    let cfg = ClusterConfig {
        seed: derive_seed(master, "kmeans"),
        ..Default::default()
    };
    let a = model_fingerprinting(&fp, &cfg).unwrap();
    let ari = adjusted_rand_index(&a.labels, &truth(&devices)).unwrap();
    (a.k, ari, a.selection.unanimous)
}

/// Low-data cohort: five instances of one archetype with 100 training rows
/// each. Returns the final mean per-client evaluation loss of FedAvg with
/// E = 4, R = 40 and of isolated training for the same 160 epochs.
pub fn low_data_run(seed: u64) -> (f64, f64, usize) {
    use fedids::fl::{isolated_inits, run_fl, run_isolated, shared_init, FlConfig};
    use fedids::nn::{Activation, Architecture, OptimizerSpec};
    use fedids::synth::DeviceArchetype;

    let spec = FleetSpec {
        archetypes: vec![DeviceArchetype::mqtt_sensor()],
        instances: 5,
        train_packets: 125,
        validation_packets: 100,
        test_packets: 1000,
        ..Default::default()
    };
    let devices = fleet(&spec, seed);
    let scheme = Scheme::Hierarchical;
    let clients = cohort(&devices, scheme, seed);
    let rows = clients.iter().map(|c| c.train.rows()).max().unwrap();
    let arch = Architecture::autoencoder_with_output(scheme.dim(), Activation::Identity).unwrap();
    let mut cfg = FlConfig {
        rounds: 40,
        local_epochs: 4,
        client_opt: OptimizerSpec::adam1(5e-3),
        server_opt: OptimizerSpec::sgd(1.0),
        ..Default::default()
    };
    cfg.train.shuffle_seed = seed;
    let init = shared_init(&clients, &arch, seed).unwrap();
    let fl = run_fl(&clients, &arch, &init, &cfg).unwrap();
    let inits = isolated_inits(&clients, &arch, seed).unwrap();
    let iso = run_isolated(&clients, &arch, &inits, cfg.rounds * cfg.local_epochs, cfg.client_opt, &cfg.train).unwrap();
    (fl.final_mean_loss(), iso.log.last().unwrap().mean, rows)
}
