//! Per-packet feature extraction and encoding.
//!
//! Column order of an encoded vector:
//!
//! | block        | width | columns                                        |
//! |--------------|-------|------------------------------------------------|
//! | numeric      | 6     | len/1514, ln(iat+1), h/8, tos/255, ttl/255, win/65535 |
//! | ip flags     | 3     | R, DF, MF                                      |
//! | ip proto     | 3     | TCP, UDP, ICMP (other IPv4 is all zero)        |
//! | tcp flags    | 9     | F, S, R, P, A, U, E, C, N                      |
//! | src port     | p     | one-hot bin                                    |
//! | dst port     | p     | one-hot bin                                    |
//!
//! with `p = 3` for [`Scheme::ThreeRange`] (27 columns) and `p = 24` for
//! [`Scheme::Hierarchical`] (69 columns). Absent ports or TCP fields encode as
//! zeros.

mod io;
mod ports;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::ingest::{IpFlags, IpProto, NamedFlags, PacketRecord, TcpFlags};

pub use io::{read_feature_table, write_feature_table, FeatureTable, RowMeta};
pub use ports::{
    discretize_hierarchical, discretize_three_range, hierarchical_index, PortBin, PortRange,
    PORT_HIERARCHY,
};

pub const LEN_DIVISOR: f64 = 1514.0;
const NUMERIC_WIDTH: usize = 6;
const FIXED_WIDTH: usize = NUMERIC_WIDTH + 3 + 3 + 9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    ThreeRange,
    #[default]
    Hierarchical,
}

impl Scheme {
    pub fn port_bins(self) -> usize {
        match self {
            Scheme::ThreeRange => PortRange::ALL.len(),
            Scheme::Hierarchical => PORT_HIERARCHY.len(),
        }
    }

    pub fn dim(self) -> usize {
        FIXED_WIDTH + 2 * self.port_bins()
    }

    pub fn from_dim(dim: usize) -> Option<Scheme> {
        [Scheme::ThreeRange, Scheme::Hierarchical]
            .into_iter()
            .find(|s| s.dim() == dim)
    }

    fn port_index(self, port: u16) -> usize {
        match self {
            Scheme::ThreeRange => discretize_three_range(port).index(),
            Scheme::Hierarchical => hierarchical_index(port),
        }
    }

    fn port_names(self) -> Vec<&'static str> {
        match self {
            Scheme::ThreeRange => PortRange::ALL.iter().map(|r| r.name()).collect(),
            Scheme::Hierarchical => PORT_HIERARCHY.iter().map(|b| b.name).collect(),
        }
    }

    /// Column names in encoding order.
    pub fn column_names(self) -> Vec<String> {
        let mut cols: Vec<String> = ["len", "iat", "h", "ip_tos", "ip_ttl", "tcp_win"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        cols.extend(IpFlags::NAMES.iter().map(|(n, _)| format!("ip_flag_{n}")));
        cols.extend(["proto_tcp", "proto_udp", "proto_icmp"].map(String::from));
        cols.extend(TcpFlags::NAMES.iter().map(|(n, _)| format!("tcp_flag_{n}")));
        for side in ["src", "dst"] {
            cols.extend(self.port_names().iter().map(|n| format!("{side}_{n}")));
        }
        cols
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::ThreeRange => "three-range",
            Scheme::Hierarchical => "hierarchical",
        })
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "three-range" => Ok(Scheme::ThreeRange),
            "hierarchical" => Ok(Scheme::Hierarchical),
            other => Err(Error::config(format!(
                "unknown scheme `{other}` (expected three-range or hierarchical)"
            ))),
        }
    }
}

/// The eleven per-packet features before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct RawFeatures {
    pub len: u32,
    pub iat: f64,
    pub h: f64,
    pub ip_tos: u8,
    pub ip_flags: IpFlags,
    pub ip_ttl: u8,
    pub ip_proto: IpProto,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Option<TcpFlags>,
    pub tcp_win: Option<u16>,
}

/// Extracts raw features. Returns the features and whether the inter-arrival
/// time had to be clamped because the timestamp went backwards.
pub fn extract_raw(rec: &PacketRecord, prev_ts: Option<f64>) -> (RawFeatures, bool) {
    let delta = prev_ts.map_or(0.0, |p| rec.timestamp - p);
    let clamped = delta < 0.0;
    let raw = RawFeatures {
        len: rec.frame_len,
        iat: delta.max(0.0),
        h: rec.content.entropy(),
        ip_tos: rec.ip_tos,
        ip_flags: rec.ip_flags,
        ip_ttl: rec.ip_ttl,
        ip_proto: rec.ip_proto,
        src_port: rec.src_port,
        dst_port: rec.dst_port,
        tcp_flags: rec.tcp_flags,
        tcp_win: rec.tcp_win,
    };
    (raw, clamped)
}

/// Stateful per-stream extractor that tracks the previous timestamp.
#[derive(Debug, Default)]
pub struct StreamExtractor {
    prev_ts: Option<f64>,
    clamped: usize,
}

impl StreamExtractor {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: &PacketRecord) -> RawFeatures {
        let (raw, clamped) = extract_raw(rec, self.prev_ts);
        if clamped {
            self.clamped += 1;
            log::warn!("out-of-order timestamp {} clamped to iat 0", rec.timestamp);
        }
        // out-of-order packets do not rewind the clock
        self.prev_ts = Some(self.prev_ts.map_or(rec.timestamp, |p| p.max(rec.timestamp)));
        raw
    }

    /// Count of clamped (negative) inter-arrival times.
    pub fn clamped(&self) -> usize {
        self.clamped
    }
}

/// Encodes raw features into a model input vector.
pub fn encode(raw: &RawFeatures, scheme: Scheme) -> Vec<f64> {
    let mut v = Vec::with_capacity(scheme.dim());
    v.push((raw.len as f64 / LEN_DIVISOR).min(1.0));
    v.push(raw.iat.ln_1p());
    v.push((raw.h / 8.0).clamp(0.0, 1.0));
    v.push(raw.ip_tos as f64 / 255.0);
    v.push(raw.ip_ttl as f64 / 255.0);
    v.push(raw.tcp_win.map_or(0.0, |w| w as f64 / 65535.0));
    v.extend(raw.ip_flags.indicators());
    v.extend(
        [IpProto::Tcp, IpProto::Udp, IpProto::Icmp]
            .iter()
            .map(|p| if *p == raw.ip_proto { 1.0 } else { 0.0 }),
    );
    v.extend(raw.tcp_flags.unwrap_or_default().indicators());
    let bins = scheme.port_bins();
    for port in [raw.src_port, raw.dst_port] {
        let start = v.len();
        v.resize(start + bins, 0.0);
        if let Some(p) = port {
            v[start + scheme.port_index(p)] = 1.0;
        }
    }
    debug_assert_eq!(v.len(), scheme.dim());
    v
}

/// Extracts and encodes a whole device stream in order.
pub fn featurize_stream<'a>(
    records: impl IntoIterator<Item = &'a PacketRecord>,
    scheme: Scheme,
) -> (Vec<Vec<f64>>, usize) {
    let mut ex = StreamExtractor::new();
    let rows = records
        .into_iter()
        .map(|r| encode(&ex.push(r), scheme))
        .collect();
    (rows, ex.clamped())
}
