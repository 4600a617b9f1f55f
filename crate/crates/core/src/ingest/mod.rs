//! Packet ingestion: pcap captures and line-delimited record files.
//!
//! Only IPv4 frames survive. IPv6 and ARP are dropped, and so is every other
//! ethertype since no feature describes non-IPv4 traffic. One 802.1Q tag is
//! unwrapped.

mod pcap;
mod record;
mod records;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use pcap::{dissect, read_pcap, Dissection, Frame, FrameReader, PcapHeader, PcapStream};
pub use record::{Content, IpFlags, IpProto, Label, NamedFlags, PacketRecord, TcpFlags};
pub use records::{load_records, read_records, save_records, write_records, RecordStream};

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_IPV6: u16 = 0x86dd;
pub const ETHERTYPE_VLAN: u16 = 0x8100;

/// Ethertype filter: IPv4 is kept, everything else (IPv6, ARP, LLDP, ...) is
/// dropped.
pub fn keep_packet(ethertype: u16) -> bool {
    ethertype == ETHERTYPE_IPV4
}

/// Shannon entropy of a byte string in bits per symbol.
pub fn shannon_entropy(bytes: &[u8]) -> f64 {
    if bytes.is_empty() {
        return 0.0;
    }
    let mut counts = [0u64; 256];
    for &b in bytes {
        counts[b as usize] += 1;
    }
    let n = bytes.len() as f64;
    let h: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum();
    h.clamp(0.0, 8.0)
}

/// Per-file ingest counters, written as the ingest stats report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub frames: u64,
    pub kept: u64,
    pub vlan_tagged: u64,
    pub malformed: u64,
    /// Dropped frames keyed by ethertype in `0x....` form.
    pub dropped_by_ethertype: BTreeMap<String, u64>,
    pub kept_by_proto: BTreeMap<String, u64>,
    pub malformed_reasons: BTreeMap<String, u64>,
    pub skipped_lines: u64,
}

impl IngestStats {
    fn count_kept(&mut self, r: &PacketRecord, vlan: bool) {
        self.kept += 1;
        if vlan {
            self.vlan_tagged += 1;
        }
        *self.kept_by_proto.entry(r.ip_proto.to_string()).or_default() += 1;
    }

    fn count_dropped(&mut self, ethertype: u16) {
        *self
            .dropped_by_ethertype
            .entry(format!("{ethertype:#06x}"))
            .or_default() += 1;
    }

    fn count_malformed(&mut self, why: &str) {
        self.malformed += 1;
        *self.malformed_reasons.entry(why.to_owned()).or_default() += 1;
    }

    pub fn dropped(&self) -> u64 {
        self.dropped_by_ethertype.values().sum()
    }

    pub fn merge(&mut self, other: &IngestStats) {
        self.frames += other.frames;
        self.kept += other.kept;
        self.vlan_tagged += other.vlan_tagged;
        self.malformed += other.malformed;
        self.skipped_lines += other.skipped_lines;
        for (k, v) in &other.dropped_by_ethertype {
            *self.dropped_by_ethertype.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.kept_by_proto {
            *self.kept_by_proto.entry(k.clone()).or_default() += v;
        }
        for (k, v) in &other.malformed_reasons {
            *self.malformed_reasons.entry(k.clone()).or_default() += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ethertype_filter() {
        assert!(!keep_packet(ETHERTYPE_ARP));
        assert!(keep_packet(ETHERTYPE_IPV4));
        assert!(!keep_packet(ETHERTYPE_IPV6));
        assert!(!keep_packet(0x88cc));
    }

    #[test]
    fn entropy_closed_forms() {
        assert_eq!(shannon_entropy(&[0u8; 64]), 0.0);
        let all: Vec<u8> = (0..=255).collect();
        assert!((shannon_entropy(&all) - 8.0).abs() < 1e-12);
        let expected = -(0.75f64 * 0.75f64.log2() + 0.25 * 0.25f64.log2());
        let h = shannon_entropy(&[0, 0, 0, 0xff]);
        assert!((h - expected).abs() < 1e-12);
        assert!((h - 0.8112781).abs() < 1e-7);
        assert_eq!(shannon_entropy(&[]), 0.0);
    }

    proptest! {
        #[test]
        fn entropy_bounded_and_permutation_invariant(mut bytes in proptest::collection::vec(any::<u8>(), 0..512), seed in any::<u64>()) {
            let h = shannon_entropy(&bytes);
            prop_assert!((0.0..=8.0).contains(&h));
            // deterministic shuffle driven by the seed
            let n = bytes.len();
            let mut s = seed;
            for i in (1..n).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                bytes.swap(i, j);
            }
            prop_assert!((shannon_entropy(&bytes) - h).abs() < 1e-12);
        }
    }
}
