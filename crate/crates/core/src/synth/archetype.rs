use std::collections::VecDeque;
use std::net::Ipv4Addr;

use rand::Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{Content, IpFlags, IpProto, Label, PacketRecord, TcpFlags};
use crate::seed::{rng_from, StageRng};

const ETH: u32 = 14;
const IPV4: u32 = 20;
const TCP: u32 = 20;
const UDP: u32 = 8;
const MIN_FRAME: u32 = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    Tcp,
    Udp,
}

/// Which side of the service port the device sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectionStyle {
    /// One long-lived connection; data and ACKs only.
    Persistent,
    /// Handshake, send, close for every message.
    PerMessage,
}

/// Normal distribution truncated at zero, `mean` and `jitter` in the
/// quantity's own unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub jitter: f64,
}

impl Spread {
    pub const fn new(mean: f64, jitter: f64) -> Self {
        Spread { mean, jitter }
    }

    pub fn sample(&self, rng: &mut StageRng) -> f64 {
        if self.jitter <= 0.0 {
            return self.mean.max(0.0);
        }
        Normal::new(self.mean, self.jitter)
            .expect("finite jitter")
            .sample(rng)
            .max(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PortWeight {
    pub port: u16,
    pub weight: f64,
}

/// Payload the peer sends back after each message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub payload: Spread,
    pub entropy: Spread,
    /// Seconds between the last request packet and the response.
    pub delay: Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceArchetype {
    pub name: String,
    pub transport: Transport,
    pub role: Role,
    /// Service ports, one drawn per message.
    pub ports: Vec<PortWeight>,
    pub connection: ConnectionStyle,
    /// Mean seconds between messages.
    pub period: f64,
    /// Relative standard deviation of each interval.
    pub period_jitter: f64,
    /// Relative standard deviation of the per-instance period and size
    /// offsets, drawn once per device.
    pub instance_deviation: f64,
    /// Data packets per message.
    pub burst: usize,
    pub payload: Spread,
    /// Payload entropy in bits per byte.
    pub entropy: Spread,
    pub response: Option<Response>,
    /// Peer sends a pure ACK after this many data packets (TCP).
    pub ack_every: usize,
    pub tos: u8,
    pub ttl: u8,
    pub peer_ttl: u8,
    pub window: u16,
    pub peer_window: u16,
    pub dont_fragment: bool,
    /// Mean seconds between background DNS lookups.
    pub dns_period: Option<f64>,
}

impl DeviceArchetype {
    /// Telemetry publisher on a persistent broker connection.
    pub fn mqtt_sensor() -> Self {
        DeviceArchetype {
            name: "mqtt-sensor".into(),
            transport: Transport::Tcp,
            role: Role::Client,
            ports: vec![PortWeight { port: 1883, weight: 1.0 }],
            connection: ConnectionStyle::Persistent,
            period: 1.0,
            period_jitter: 0.1,
            instance_deviation: 0.05,
            burst: 1,
            payload: Spread::new(90.0, 12.0),
            entropy: Spread::new(4.7, 0.15),
            response: None,
            ack_every: 1,
            tos: 0,
            ttl: 64,
            peer_ttl: 64,
            window: 502,
            peer_window: 509,
            dont_fragment: true,
            dns_period: Some(60.0),
        }
    }

    /// Constrained-node request/response over UDP.
    pub fn coap_sensor() -> Self {
        DeviceArchetype {
            name: "coap-sensor".into(),
            transport: Transport::Udp,
            role: Role::Client,
            ports: vec![PortWeight { port: 5683, weight: 1.0 }],
            connection: ConnectionStyle::Persistent,
            period: 2.0,
            period_jitter: 0.15,
            instance_deviation: 0.05,
            burst: 1,
            payload: Spread::new(80.0, 10.0),
            entropy: Spread::new(3.9, 0.2),
            response: Some(Response {
                payload: Spread::new(12.0, 3.0),
                entropy: Spread::new(2.5, 0.3),
                delay: Spread::new(0.015, 0.004),
            }),
            ack_every: 1,
            tos: 0,
            ttl: 64,
            peer_ttl: 64,
            window: 0,
            peer_window: 0,
            dont_fragment: false,
            dns_period: Some(90.0),
        }
    }

    /// Camera streaming interleaved video over an RTSP session it serves.
    pub fn rtsp_camera() -> Self {
        DeviceArchetype {
            name: "rtsp-camera".into(),
            transport: Transport::Tcp,
            role: Role::Server,
            ports: vec![PortWeight { port: 8554, weight: 1.0 }],
            connection: ConnectionStyle::Persistent,
            period: 0.2,
            period_jitter: 0.08,
            instance_deviation: 0.05,
            burst: 3,
            payload: Spread::new(1400.0, 40.0),
            entropy: Spread::new(7.85, 0.05),
            response: None,
            ack_every: 2,
            tos: 0x88,
            ttl: 64,
            peer_ttl: 128,
            window: 1024,
            peer_window: 8192,
            dont_fragment: true,
            dns_period: Some(10.0),
        }
    }

    /// Smart plug reporting over short-lived HTTP connections.
    pub fn http_plug() -> Self {
        DeviceArchetype {
            name: "http-plug".into(),
            transport: Transport::Tcp,
            role: Role::Client,
            ports: vec![PortWeight { port: 80, weight: 0.8 }, PortWeight { port: 8080, weight: 0.2 }],
            connection: ConnectionStyle::PerMessage,
            period: 5.0,
            period_jitter: 0.2,
            instance_deviation: 0.05,
            burst: 1,
            payload: Spread::new(220.0, 20.0),
            entropy: Spread::new(5.2, 0.2),
            response: Some(Response {
                payload: Spread::new(150.0, 15.0),
                entropy: Spread::new(5.0, 0.2),
                delay: Spread::new(0.03, 0.01),
            }),
            ack_every: 1,
            tos: 0,
            ttl: 64,
            peer_ttl: 64,
            window: 14600,
            peer_window: 28960,
            dont_fragment: true,
            dns_period: None,
        }
    }

    pub fn defaults() -> Vec<DeviceArchetype> {
        vec![Self::mqtt_sensor(), Self::coap_sensor(), Self::rtsp_camera()]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(format!("archetype {}: {m}", self.name)));
        if !(self.period > 0.0 && self.period.is_finite()) {
            return bad("period must be positive");
        }
        if self.ports.is_empty() {
            return bad("needs at least one service port");
        }
        let total: f64 = self.ports.iter().map(|p| p.weight).sum();
        if self.ports.iter().any(|p| p.weight < 0.0) || (total - 1.0).abs() > 1e-9 {
            return bad("port weights must be non-negative and sum to 1");
        }
        if self.burst == 0 || self.ack_every == 0 {
            return bad("burst and ack_every must be at least 1");
        }
        if self.period_jitter < 0.0 || self.instance_deviation < 0.0 {
            return bad("jitter must be non-negative");
        }
        if self.dns_period.is_some_and(|p| !(p > 0.0)) {
            return bad("dns_period must be positive");
        }
        if self.transport == Transport::Udp && self.connection == ConnectionStyle::PerMessage {
            return bad("per-message connections need TCP");
        }
        Ok(())
    }

    /// True when everything but the name matches.
    pub fn same_profile(&self, other: &DeviceArchetype) -> bool {
        DeviceArchetype {
            name: String::new(),
            ..self.clone()
        } == DeviceArchetype {
            name: String::new(),
            ..other.clone()
        }
    }
}

pub(crate) struct Endpoints {
    pub device: Ipv4Addr,
    pub peer: Ipv4Addr,
    pub dns: Ipv4Addr,
}

/// Builder for one record with the defaults of a captured IPv4 packet.
pub(crate) struct Pkt {
    pub rec: PacketRecord,
}

impl Pkt {
    pub fn new(ts: f64, proto: IpProto, src: Ipv4Addr, dst: Ipv4Addr) -> Self {
        Pkt {
            rec: PacketRecord {
                timestamp: ts,
                frame_len: MIN_FRAME,
                ip_tos: 0,
                ip_flags: IpFlags::empty(),
                ip_ttl: 64,
                ip_proto: proto,
                src_port: None,
                dst_port: None,
                tcp_flags: None,
                tcp_win: None,
                content: Content::Entropy(0.0),
                src_ip: src,
                dst_ip: dst,
                label: Label::Normal,
            },
        }
    }

    pub fn tcp(ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16), flags: TcpFlags, win: u16) -> Self {
        let mut p = Pkt::new(ts, IpProto::Tcp, src.0, dst.0);
        p.rec.src_port = Some(src.1);
        p.rec.dst_port = Some(dst.1);
        p.rec.tcp_flags = Some(flags);
        p.rec.tcp_win = Some(win);
        p.payload(0, 0.0, TCP)
    }

    pub fn udp(ts: f64, src: (Ipv4Addr, u16), dst: (Ipv4Addr, u16)) -> Self {
        let mut p = Pkt::new(ts, IpProto::Udp, src.0, dst.0);
        p.rec.src_port = Some(src.1);
        p.rec.dst_port = Some(dst.1);
        p.payload(0, 0.0, UDP)
    }

    pub fn icmp(ts: f64, src: Ipv4Addr, dst: Ipv4Addr, payload: u32, entropy: f64) -> Self {
        Pkt::new(ts, IpProto::Icmp, src, dst).payload(payload, entropy, 8)
    }

    /// Sets the payload size; entropy is capped by what `bytes` can carry.
    pub fn payload(mut self, bytes: u32, entropy: f64, l4_header: u32) -> Self {
        self.rec.frame_len = (ETH + IPV4 + l4_header + bytes).max(MIN_FRAME);
        let cap = if bytes == 0 { 0.0 } else { (bytes as f64).log2().min(8.0) };
        self.rec.content = Content::Entropy(entropy.clamp(0.0, cap));
        self
    }

    pub fn tcp_payload(self, bytes: u32, entropy: f64) -> Self {
        self.payload(bytes, entropy, TCP)
    }

    pub fn udp_payload(self, bytes: u32, entropy: f64) -> Self {
        self.payload(bytes, entropy, UDP)
    }

    pub fn ip(mut self, ttl: u8, tos: u8, df: bool) -> Self {
        self.rec.ip_ttl = ttl;
        self.rec.ip_tos = tos;
        self.rec.ip_flags = if df { IpFlags::DF } else { IpFlags::empty() };
        self
    }

    pub fn label(mut self, label: Label) -> Self {
        self.rec.label = label;
        self
    }
}

pub(crate) fn ephemeral_port(rng: &mut StageRng) -> u16 {
    rng.random_range(32768..=60999)
}

/// Endless, seeded normal-traffic source for one device instance.
pub struct DeviceGenerator {
    arch: DeviceArchetype,
    rng: StageRng,
    ends: Endpoints,
    period: f64,
    size_scale: f64,
    next_msg: f64,
    next_dns: f64,
    session_port: u16,
    since_ack: usize,
    ready: VecDeque<PacketRecord>,
    pending: Vec<PacketRecord>,
}

impl DeviceGenerator {
    pub fn new(arch: &DeviceArchetype, device: Ipv4Addr, peer: Ipv4Addr, dns: Ipv4Addr, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_from(seed);
        let dev = Normal::new(0.0, arch.instance_deviation.max(1e-12)).expect("finite");
        let period = arch.period * (1.0 + dev.sample(&mut rng)).max(0.5);
        let size_scale = (1.0 + dev.sample(&mut rng)).max(0.5);
        let next_msg = rng.random::<f64>() * period;
        let next_dns = arch.dns_period.map_or(f64::INFINITY, |p| rng.random::<f64>() * p);
        let session_port = ephemeral_port(&mut rng);
        Ok(DeviceGenerator {
            arch: arch.clone(),
            rng,
            ends: Endpoints { device, peer, dns },
            period,
            size_scale,
            next_msg,
            next_dns,
            session_port,
            since_ack: 0,
            ready: VecDeque::new(),
            pending: Vec::new(),
        })
    }

    /// This instance's mean message period.
    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn device_ip(&self) -> Ipv4Addr {
        self.ends.device
    }

    /// The next `n` packets in timestamp order.
    pub fn take(&mut self, n: usize) -> Vec<PacketRecord> {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            if let Some(p) = self.ready.pop_front() {
                out.push(p);
                continue;
            }
            self.advance();
        }
        out
    }

    /// Generates one event and releases every packet that no later event
    /// can precede.
    fn advance(&mut self) {
        if self.next_dns < self.next_msg {
            let t = self.next_dns;
            self.dns_lookup(t);
            let p = self.arch.dns_period.expect("dns scheduled");
            self.next_dns = t + Exp::new(1.0 / p).expect("positive").sample(&mut self.rng).max(1e-3);
        } else {
            let t = self.next_msg;
            self.message(t);
            let jitter = Normal::new(1.0, self.arch.period_jitter.max(1e-12)).expect("finite");
            self.next_msg = t + self.period * jitter.sample(&mut self.rng).max(0.1);
        }
        let frontier = self.next_msg.min(self.next_dns);
        self.pending.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
        let split = self.pending.partition_point(|p| p.timestamp < frontier);
        self.ready.extend(self.pending.drain(..split));
    }

    fn service_port(&mut self) -> u16 {
        let mut x = self.rng.random::<f64>();
        for p in &self.arch.ports {
            if x < p.weight {
                return p.port;
            }
            x -= p.weight;
        }
        self.arch.ports.last().expect("validated").port
    }

    fn small_gap(&mut self, mean: f64) -> f64 {
        Spread::new(mean, mean * 0.25).sample(&mut self.rng).max(1e-5)
    }

    fn dns_lookup(&mut self, t: f64) {
        let port = ephemeral_port(&mut self.rng);
        let q = Spread::new(38.0, 4.0).sample(&mut self.rng).round() as u32;
        let r = Spread::new(92.0, 14.0).sample(&mut self.rng).round() as u32;
        let (dev, dns) = (self.ends.device, self.ends.dns);
        let qh = Spread::new(3.4, 0.15).sample(&mut self.rng);
        let rh = Spread::new(4.3, 0.2).sample(&mut self.rng);
        let query = Pkt::udp(t, (dev, port), (dns, 53))
            .udp_payload(q, qh)
            .ip(self.arch.ttl, 0, false);
        let dt = self.small_gap(0.012);
        let answer = Pkt::udp(t + dt, (dns, 53), (dev, port))
            .udp_payload(r, rh)
            .ip(64, 0, false);
        self.pending.push(query.rec);
        self.pending.push(answer.rec);
    }

    fn message(&mut self, t: f64) {
        let service = self.service_port();
        let a = self.arch.clone();
        let local = match (a.connection, a.role) {
            (ConnectionStyle::PerMessage, _) => ephemeral_port(&mut self.rng),
            _ => self.session_port,
        };
        let (dev_port, peer_port) = match a.role {
            Role::Client => (local, service),
            Role::Server => (service, local),
        };
        let dev = (self.ends.device, dev_port);
        let peer = (self.ends.peer, peer_port);
        let mut now = t;
        let mut out = Vec::new();
        let tcp_out = |ts: f64, fl: TcpFlags| Pkt::tcp(ts, dev, peer, fl, a.window).ip(a.ttl, a.tos, a.dont_fragment);
        let tcp_in = |ts: f64, fl: TcpFlags| Pkt::tcp(ts, peer, dev, fl, a.peer_window).ip(a.peer_ttl, 0, a.dont_fragment);

        if a.transport == Transport::Tcp && a.connection == ConnectionStyle::PerMessage {
            out.push(tcp_out(now, TcpFlags::S).rec);
            now += self.small_gap(0.004);
            out.push(tcp_in(now, TcpFlags::S | TcpFlags::A).rec);
            now += self.small_gap(0.0005);
            out.push(tcp_out(now, TcpFlags::A).rec);
            now += self.small_gap(0.0005);
        }
        for i in 0..a.burst {
            if i > 0 {
                now += self.small_gap(0.0008);
            }
            let bytes = (a.payload.sample(&mut self.rng) * self.size_scale).round().max(1.0) as u32;
            let h = a.entropy.sample(&mut self.rng);
            let pkt = match a.transport {
                Transport::Tcp => tcp_out(now, TcpFlags::P | TcpFlags::A).tcp_payload(bytes, h),
                Transport::Udp => Pkt::udp(now, dev, peer)
                    .udp_payload(bytes, h)
                    .ip(a.ttl, a.tos, a.dont_fragment),
            };
            out.push(pkt.rec);
            if a.transport == Transport::Tcp {
                self.since_ack += 1;
                if self.since_ack >= a.ack_every {
                    self.since_ack = 0;
                    let ack_t = now + self.small_gap(0.003);
                    out.push(tcp_in(ack_t, TcpFlags::A).rec);
                }
            }
        }
        if let Some(resp) = a.response {
            now += resp.delay.sample(&mut self.rng).max(1e-4);
            let bytes = resp.payload.sample(&mut self.rng).round().max(1.0) as u32;
            let h = resp.entropy.sample(&mut self.rng);
            let pkt = match a.transport {
                Transport::Tcp => tcp_in(now, TcpFlags::P | TcpFlags::A).tcp_payload(bytes, h),
                Transport::Udp => Pkt::udp(now, peer, dev)
                    .udp_payload(bytes, h)
                    .ip(a.peer_ttl, 0, a.dont_fragment),
            };
            out.push(pkt.rec);
            if a.transport == Transport::Tcp {
                now += self.small_gap(0.0005);
                out.push(tcp_out(now, TcpFlags::A).rec);
            }
        }
        if a.transport == Transport::Tcp && a.connection == ConnectionStyle::PerMessage {
            now += self.small_gap(0.002);
            out.push(tcp_out(now, TcpFlags::F | TcpFlags::A).rec);
            now += self.small_gap(0.003);
            out.push(tcp_in(now, TcpFlags::F | TcpFlags::A).rec);
            now += self.small_gap(0.0005);
            out.push(tcp_out(now, TcpFlags::A).rec);
        }
        self.pending.extend(out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn generator(arch: DeviceArchetype, seed: u64) -> DeviceGenerator {
        DeviceGenerator::new(
            &arch,
            Ipv4Addr::new(10, 0, 0, 10),
            Ipv4Addr::new(10, 0, 0, 1),
            Ipv4Addr::new(10, 0, 0, 2),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn sorted_and_valid() {
        for arch in [
            DeviceArchetype::mqtt_sensor(),
            DeviceArchetype::coap_sensor(),
            DeviceArchetype::rtsp_camera(),
            DeviceArchetype::http_plug(),
        ] {
            let mut g = generator(arch, 1);
            let pkts = g.take(500);
            assert_eq!(pkts.len(), 500);
            assert!(pkts.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
            for p in &pkts {
                p.validate().unwrap();
            }
            let more = g.take(10);
            assert!(more[0].timestamp >= pkts[499].timestamp);
        }
    }

    #[test]
    fn per_message_uses_handshakes() {
        let mut g = generator(DeviceArchetype::http_plug(), 2);
        let pkts = g.take(100);
        assert!(pkts.iter().any(|p| p.tcp_flags == Some(TcpFlags::S)));
        assert!(pkts.iter().any(|p| p.tcp_flags == Some(TcpFlags::F | TcpFlags::A)));
        let mut g = generator(DeviceArchetype::mqtt_sensor(), 2);
        assert!(g.take(100).iter().all(|p| p.tcp_flags.is_none_or(|f| !f.contains(TcpFlags::S))));
    }

    #[test]
    fn validation_catches_bad_profiles() {
        let mut a = DeviceArchetype::mqtt_sensor();
        a.period = 0.0;
        assert!(a.validate().is_err());
        let mut a = DeviceArchetype::mqtt_sensor();
        a.ports.push(PortWeight { port: 1, weight: 0.5 });
        assert!(a.validate().is_err());
        let a = DeviceArchetype::coap_sensor();
        assert!(!a.same_profile(&DeviceArchetype::mqtt_sensor()));
        let mut b = a.clone();
        b.name = "other".into();
        assert!(a.same_profile(&b));
    }
}
