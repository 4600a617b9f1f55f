use std::net::Ipv4Addr;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use super::archetype::{ephemeral_port, Pkt, Spread};
use crate::error::{Error, Result};
use crate::ingest::{Label, PacketRecord, TcpFlags};
use crate::seed::{rng_from, StageRng};

/// Entropy of 512 uniformly random bytes, in expectation.
pub const RANDOM_512_ENTROPY: f64 = 7.64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackKind {
    TelnetScan,
    SynFlood,
    UdpFlood,
    AckFlood,
    IcmpFlood,
    CncHeartbeat,
    PortSweep,
}

impl AttackKind {
    pub fn name(self) -> &'static str {
        match self {
            AttackKind::TelnetScan => "telnet-scan",
            AttackKind::SynFlood => "syn-flood",
            AttackKind::UdpFlood => "udp-flood",
            AttackKind::AckFlood => "ack-flood",
            AttackKind::IcmpFlood => "icmp-flood",
            AttackKind::CncHeartbeat => "cnc-heartbeat",
            AttackKind::PortSweep => "port-sweep",
        }
    }
}

/// Remote port of the command-and-control channel.
pub const CNC_PORT: u16 = 48101;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackEpisode {
    pub kind: AttackKind,
    pub start: f64,
    /// Mean packets (heartbeats for C&C) per second.
    pub rate: f64,
    /// Packets to inject; injection also stops at `end`.
    pub packets: usize,
    pub end: f64,
    pub target: Ipv4Addr,
}

impl AttackEpisode {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate.is_finite()) {
            return Err(Error::config(format!("{} episode: rate must be positive", self.kind.name())));
        }
        if !(self.end >= self.start) {
            return Err(Error::config(format!("{} episode ends before it starts", self.kind.name())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub kind: AttackKind,
    pub start: f64,
    pub end: f64,
    pub packets: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectedTrace {
    pub records: Vec<PacketRecord>,
    pub episodes: Vec<EpisodeRecord>,
}

impl InjectedTrace {
    pub fn attack_count(&self) -> usize {
        self.records.iter().filter(|r| r.label == Label::Attack).count()
    }
}

fn random_public(rng: &mut StageRng) -> Ipv4Addr {
    loop {
        let a: u8 = rng.random_range(1..=223);
        if a != 10 && a != 127 && a != 172 && a != 192 {
            return Ipv4Addr::new(a, rng.random(), rng.random(), rng.random_range(1..=254));
        }
    }
}

fn episode_packets(ep: &AttackEpisode, device: Ipv4Addr, rng: &mut StageRng) -> Vec<PacketRecord> {
    let gap = Exp::new(ep.rate).expect("positive rate");
    let mut out = Vec::with_capacity(ep.packets);
    let mut t = ep.start;
    let mut sweep_port: u16 = 1;
    let cnc_port = ephemeral_port(rng);
    while out.len() < ep.packets {
        if t > ep.end {
            break;
        }
        let atk = |p: Pkt| p.label(Label::Attack).rec;
        match ep.kind {
            AttackKind::TelnetScan => {
                let port = if rng.random::<f64>() < 0.9 { 23 } else { 2323 };
                let dst = random_public(rng);
                let win = rng.random::<u16>();
                out.push(atk(Pkt::tcp(t, (device, ephemeral_port(rng)), (dst, port), TcpFlags::S, win).ip(64, 0, false)));
            }
            AttackKind::SynFlood => {
                let src = (device, rng.random_range(1024..=65535));
                let win = rng.random::<u16>();
                let p = Pkt::tcp(t, src, (ep.target, 80), TcpFlags::S, win)
                    .tcp_payload(20, 0.0)
                    .ip(64, 0, false);
                // SYN options count as header, not payload.
                let mut rec = atk(p);
                rec.content = crate::ingest::Content::Entropy(0.0);
                out.push(rec);
            }
            AttackKind::AckFlood => {
                let src = (device, rng.random_range(1024..=65535));
                let dst = (ep.target, rng.random_range(1..=65535));
                let win = rng.random::<u16>();
                out.push(atk(Pkt::tcp(t, src, dst, TcpFlags::A, win)
                    .tcp_payload(512, RANDOM_512_ENTROPY)
                    .ip(64, 0, false)));
            }
            AttackKind::UdpFlood => {
                let src = (device, rng.random_range(1024..=65535));
                let dst = (ep.target, rng.random_range(1..=65535));
                let h = Spread::new(RANDOM_512_ENTROPY, 0.02).sample(rng);
                out.push(atk(Pkt::udp(t, src, dst).udp_payload(512, h).ip(64, 0, false)));
            }
            AttackKind::IcmpFlood => {
                let h = Spread::new(5.6, 0.05).sample(rng);
                out.push(atk(Pkt::icmp(t, device, ep.target, 56, h).ip(64, 0, false)));
            }
            AttackKind::CncHeartbeat => {
                let dev = (device, cnc_port);
                let cnc = (ep.target, CNC_PORT);
                out.push(atk(Pkt::tcp(t, dev, cnc, TcpFlags::P | TcpFlags::A, 29200)
                    .tcp_payload(2, 0.0)
                    .ip(64, 0, true)));
                let back = t + Spread::new(0.045, 0.01).sample(rng).max(1e-3);
                out.push(atk(Pkt::tcp(back, cnc, dev, TcpFlags::P | TcpFlags::A, 509)
                    .tcp_payload(2, 0.0)
                    .ip(52, 0, true)));
                out.push(atk(Pkt::tcp(back + 1e-4, dev, cnc, TcpFlags::A, 29200).ip(64, 0, true)));
            }
            AttackKind::PortSweep => {
                let src = (device, ephemeral_port(rng));
                out.push(atk(Pkt::tcp(t, src, (ep.target, sweep_port), TcpFlags::S, 1024).ip(64, 0, false)));
                sweep_port = sweep_port.wrapping_add(1).max(1);
            }
        }
        t += gap.sample(rng);
    }
    out.truncate(ep.packets);
    out.retain(|p| p.timestamp <= ep.end);
    out
}

/// Interleaves attack packets into `trace` by timestamp. Original packets
/// are relabelled normal, injected ones are labelled attack.
pub fn inject_attacks(
    trace: Vec<PacketRecord>,
    device: Ipv4Addr,
    episodes: &[AttackEpisode],
    seed: u64,
) -> Result<InjectedTrace> {
    let mut records: Vec<PacketRecord> = trace
        .into_iter()
        .map(|mut r| {
            r.label = Label::Normal;
            r
        })
        .collect();
    if episodes.is_empty() {
        return Ok(InjectedTrace {
            records,
            episodes: Vec::new(),
        });
    }
    let (lo, hi) = match (records.first(), records.last()) {
        (Some(a), Some(b)) => (a.timestamp, b.timestamp),
        _ => return Err(Error::data("cannot inject attacks into an empty trace")),
    };
    let mut manifest = Vec::with_capacity(episodes.len());
    for (i, ep) in episodes.iter().enumerate() {
        ep.validate()?;
        if ep.start < lo || ep.end > hi {
            return Err(Error::config(format!(
                "{} episode [{}, {}] outside trace [{lo}, {hi}]",
                ep.kind.name(),
                ep.start,
                ep.end
            )));
        }
        let mut rng = rng_from(crate::seed::derive_indexed(seed, "episode", i as u64));
        let pkts = episode_packets(ep, device, &mut rng);
        manifest.push(EpisodeRecord {
            kind: ep.kind,
            start: pkts.first().map_or(ep.start, |p| p.timestamp),
            end: pkts.iter().map(|p| p.timestamp).fold(ep.start, f64::max),
            packets: pkts.len(),
        });
        records.extend(pkts);
    }
    // Stable: originals stay ahead of injected packets on equal timestamps.
    records.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    Ok(InjectedTrace {
        records,
        episodes: manifest,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::IpProto;

    fn base(n: usize) -> Vec<PacketRecord> {
        let a = Ipv4Addr::new(10, 0, 0, 10);
        let b = Ipv4Addr::new(10, 0, 0, 1);
        (0..n)
            .map(|i| Pkt::udp(i as f64, (a, 40000), (b, 5683)).udp_payload(40, 3.0).rec)
            .collect()
    }

    fn episode(kind: AttackKind, packets: usize) -> AttackEpisode {
        AttackEpisode {
            kind,
            start: 10.0,
            rate: 100.0,
            packets,
            end: 90.0,
            target: Ipv4Addr::new(198, 51, 100, 7),
        }
    }

    #[test]
    fn no_episodes_is_identity() {
        let t = base(20);
        let out = inject_attacks(t.clone(), Ipv4Addr::new(10, 0, 0, 10), &[], 0).unwrap();
        assert_eq!(out.records, t);
    }

    #[test]
    fn telnet_scan_shape() {
        let out = inject_attacks(base(100), Ipv4Addr::new(10, 0, 0, 10), &[episode(AttackKind::TelnetScan, 50)], 1).unwrap();
        let atk: Vec<_> = out.records.iter().filter(|r| r.label == Label::Attack).collect();
        assert_eq!(atk.len(), 50);
        assert_eq!(out.episodes[0].packets, 50);
        for r in atk {
            assert_eq!(r.tcp_flags, Some(TcpFlags::S));
            assert!(matches!(r.dst_port, Some(23) | Some(2323)));
        }
        assert!(out.records.windows(2).all(|w| w[0].timestamp <= w[1].timestamp));
    }

    #[test]
    fn udp_flood_shape() {
        let out = inject_attacks(base(100), Ipv4Addr::new(10, 0, 0, 10), &[episode(AttackKind::UdpFlood, 30)], 1).unwrap();
        for r in out.records.iter().filter(|r| r.label == Label::Attack) {
            assert_eq!(r.ip_proto, IpProto::Udp);
            assert_eq!(r.frame_len, 14 + 20 + 8 + 512);
            assert!(r.content.entropy() > 7.5);
            assert_eq!((r.ip_ttl, r.ip_tos), (64, 0));
            r.validate().unwrap();
        }
    }

    #[test]
    fn every_kind_validates() {
        for kind in [
            AttackKind::TelnetScan,
            AttackKind::SynFlood,
            AttackKind::UdpFlood,
            AttackKind::AckFlood,
            AttackKind::IcmpFlood,
            AttackKind::CncHeartbeat,
            AttackKind::PortSweep,
        ] {
            let out = inject_attacks(base(100), Ipv4Addr::new(10, 0, 0, 10), &[episode(kind, 12)], 3).unwrap();
            assert_eq!(out.attack_count(), 12, "{kind:?}");
            for r in &out.records {
                r.validate().unwrap();
            }
        }
    }

    #[test]
    fn out_of_bounds_rejected() {
        let mut ep = episode(AttackKind::SynFlood, 5);
        ep.end = 1000.0;
        assert!(inject_attacks(base(10), Ipv4Addr::LOCALHOST, &[ep], 0).is_err());
    }
}
