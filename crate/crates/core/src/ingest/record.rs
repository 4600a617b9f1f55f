use std::fmt;
use std::net::Ipv4Addr;

use base64::Engine;
use bitflags::bitflags;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

bitflags! {
    /// IPv4 header flags, bit values as they sit in the 3-bit flags field.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct IpFlags: u8 {
        const R = 0b100;
        const DF = 0b010;
        const MF = 0b001;
    }
}

bitflags! {
    /// TCP control bits. `N` is the nonce-sum bit from the data-offset byte.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u16 {
        const F = 0x001;
        const S = 0x002;
        const R = 0x004;
        const P = 0x008;
        const A = 0x010;
        const U = 0x020;
        const E = 0x040;
        const C = 0x080;
        const N = 0x100;
    }
}

/// Flag sets that travel as lists of their single-letter names.
pub trait NamedFlags: Sized + Copy + 'static {
    /// Names in canonical order; this order also fixes feature columns.
    const NAMES: &'static [(&'static str, Self)];

    fn empty_set() -> Self;
    fn union(self, other: Self) -> Self;
    fn has(self, other: Self) -> bool;

    fn names(self) -> Vec<&'static str> {
        Self::NAMES
            .iter()
            .filter(|(_, f)| self.has(*f))
            .map(|(n, _)| *n)
            .collect()
    }

    fn from_names<'a>(names: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut out = Self::empty_set();
        for name in names {
            let flag = Self::NAMES
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, f)| *f)
                .ok_or_else(|| Error::data(format!("unknown flag `{name}`")))?;
            out = out.union(flag);
        }
        Ok(out)
    }

    /// One indicator per flag in canonical order.
    fn indicators(self) -> impl Iterator<Item = f64> {
        Self::NAMES
            .iter()
            .map(move |(_, f)| if self.has(*f) { 1.0 } else { 0.0 })
    }
}

impl NamedFlags for IpFlags {
    const NAMES: &'static [(&'static str, Self)] =
        &[("R", IpFlags::R), ("DF", IpFlags::DF), ("MF", IpFlags::MF)];

    fn empty_set() -> Self {
        IpFlags::empty()
    }
    fn union(self, other: Self) -> Self {
        self | other
    }
    fn has(self, other: Self) -> bool {
        self.contains(other)
    }
}

impl NamedFlags for TcpFlags {
    const NAMES: &'static [(&'static str, Self)] = &[
        ("F", TcpFlags::F),
        ("S", TcpFlags::S),
        ("R", TcpFlags::R),
        ("P", TcpFlags::P),
        ("A", TcpFlags::A),
        ("U", TcpFlags::U),
        ("E", TcpFlags::E),
        ("C", TcpFlags::C),
        ("N", TcpFlags::N),
    ];

    fn empty_set() -> Self {
        TcpFlags::empty()
    }
    fn union(self, other: Self) -> Self {
        self | other
    }
    fn has(self, other: Self) -> bool {
        self.contains(other)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum IpProto {
    #[serde(rename = "TCP")]
    Tcp,
    #[serde(rename = "UDP")]
    Udp,
    #[serde(rename = "ICMP")]
    Icmp,
    #[serde(rename = "OtherIPv4")]
    OtherIpv4,
}

impl IpProto {
    pub fn from_number(n: u8) -> Self {
        match n {
            6 => IpProto::Tcp,
            17 => IpProto::Udp,
            1 => IpProto::Icmp,
            _ => IpProto::OtherIpv4,
        }
    }

    pub fn has_ports(self) -> bool {
        matches!(self, IpProto::Tcp | IpProto::Udp)
    }
}

impl fmt::Display for IpProto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            IpProto::Tcp => "TCP",
            IpProto::Udp => "UDP",
            IpProto::Icmp => "ICMP",
            IpProto::OtherIpv4 => "OtherIPv4",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Attack,
    #[default]
    Unlabeled,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Normal => "normal",
            Label::Attack => "attack",
            Label::Unlabeled => "unlabeled",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Label::Normal),
            "attack" => Ok(Label::Attack),
            "unlabeled" => Ok(Label::Unlabeled),
            other => Err(Error::data(format!("unknown label `{other}`"))),
        }
    }
}

/// What is known about the packet body: the captured bytes, or only their
/// entropy for synthetic traffic.
#[derive(Debug, Clone, PartialEq)]
pub enum Content {
    Bytes(Vec<u8>),
    Entropy(f64),
}

impl Content {
    pub fn entropy(&self) -> f64 {
        match self {
            Content::Bytes(b) => super::shannon_entropy(b),
            Content::Entropy(h) => *h,
        }
    }
}

/// One kept IPv4 packet.
///
/// Port and TCP fields are `Some` exactly when the protocol carries them.
/// Addresses are kept for ground-truth labelling and never reach a model.
#[derive(Debug, Clone, PartialEq)]
pub struct PacketRecord {
    pub timestamp: f64,
    pub frame_len: u32,
    pub ip_tos: u8,
    pub ip_flags: IpFlags,
    pub ip_ttl: u8,
    pub ip_proto: IpProto,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub tcp_flags: Option<TcpFlags>,
    pub tcp_win: Option<u16>,
    pub content: Content,
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub label: Label,
}

impl PacketRecord {
    pub fn validate(&self) -> Result<()> {
        if !self.timestamp.is_finite() {
            return Err(Error::data("non-finite timestamp"));
        }
        let ports = self.src_port.is_some() && self.dst_port.is_some();
        let no_ports = self.src_port.is_none() && self.dst_port.is_none();
        if self.ip_proto.has_ports() && !ports {
            return Err(Error::data(format!("{} record without ports", self.ip_proto)));
        }
        if !self.ip_proto.has_ports() && !no_ports {
            return Err(Error::data(format!("{} record with ports", self.ip_proto)));
        }
        let tcp = self.ip_proto == IpProto::Tcp;
        if tcp != self.tcp_flags.is_some() || tcp != self.tcp_win.is_some() {
            return Err(Error::data("tcp_flags/tcp_win must be present exactly for TCP"));
        }
        match &self.content {
            Content::Bytes(b) if b.len() > self.frame_len as usize => Err(Error::data(format!(
                "captured {} bytes exceeds frame_len {}",
                b.len(),
                self.frame_len
            ))),
            Content::Entropy(h) if !(0.0..=8.0).contains(h) => {
                Err(Error::data(format!("entropy {h} outside [0, 8]")))
            }
            _ => Ok(()),
        }
    }
}

/// Line layout for record files. Field order here is the canonical order.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RecordLine {
    timestamp: f64,
    frame_len: u32,
    ip_tos: u8,
    ip_flags: Vec<String>,
    ip_ttl: u8,
    ip_proto: IpProto,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    src_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dst_port: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tcp_flags: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tcp_win: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    packet_bytes: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entropy: Option<f64>,
    src_ip: Ipv4Addr,
    dst_ip: Ipv4Addr,
    #[serde(default)]
    label: Label,
}

fn owned_names<F: NamedFlags>(f: F) -> Vec<String> {
    f.names().into_iter().map(str::to_owned).collect()
}

impl From<&PacketRecord> for RecordLine {
    fn from(r: &PacketRecord) -> Self {
        let (packet_bytes, entropy) = match &r.content {
            Content::Bytes(b) => (Some(base64::engine::general_purpose::STANDARD.encode(b)), None),
            Content::Entropy(h) => (None, Some(*h)),
        };
        RecordLine {
            timestamp: r.timestamp,
            frame_len: r.frame_len,
            ip_tos: r.ip_tos,
            ip_flags: owned_names(r.ip_flags),
            ip_ttl: r.ip_ttl,
            ip_proto: r.ip_proto,
            src_port: r.src_port,
            dst_port: r.dst_port,
            tcp_flags: r.tcp_flags.map(owned_names),
            tcp_win: r.tcp_win,
            packet_bytes,
            entropy,
            src_ip: r.src_ip,
            dst_ip: r.dst_ip,
            label: r.label,
        }
    }
}

impl TryFrom<RecordLine> for PacketRecord {
    type Error = Error;

    fn try_from(l: RecordLine) -> Result<Self> {
        let content = match (l.packet_bytes, l.entropy) {
            (Some(b64), None) => Content::Bytes(
                base64::engine::general_purpose::STANDARD
                    .decode(b64.as_bytes())
                    .map_err(|e| Error::data(format!("packet_bytes: {e}")))?,
            ),
            (None, Some(h)) => Content::Entropy(h),
            _ => return Err(Error::data("exactly one of packet_bytes or entropy is required")),
        };
        let rec = PacketRecord {
            timestamp: l.timestamp,
            frame_len: l.frame_len,
            ip_tos: l.ip_tos,
            ip_flags: IpFlags::from_names(l.ip_flags.iter().map(String::as_str))?,
            ip_ttl: l.ip_ttl,
            ip_proto: l.ip_proto,
            src_port: l.src_port,
            dst_port: l.dst_port,
            tcp_flags: l
                .tcp_flags
                .map(|v| TcpFlags::from_names(v.iter().map(String::as_str)))
                .transpose()?,
            tcp_win: l.tcp_win,
            content,
            src_ip: l.src_ip,
            dst_ip: l.dst_ip,
            label: l.label,
        };
        rec.validate()?;
        Ok(rec)
    }
}

impl Serialize for PacketRecord {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        RecordLine::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for PacketRecord {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let line = RecordLine::deserialize(d)?;
        PacketRecord::try_from(line).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flag_names_round_trip() {
        let f = TcpFlags::S | TcpFlags::A | TcpFlags::N;
        assert_eq!(f.names(), vec!["S", "A", "N"]);
        assert_eq!(TcpFlags::from_names(["N", "S", "A"]).unwrap(), f);
        assert!(IpFlags::from_names(["XX"]).is_err());
        let ind: Vec<f64> = IpFlags::DF.indicators().collect();
        assert_eq!(ind, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn protocol_numbers() {
        assert_eq!(IpProto::from_number(6), IpProto::Tcp);
        assert_eq!(IpProto::from_number(17), IpProto::Udp);
        assert_eq!(IpProto::from_number(1), IpProto::Icmp);
        assert_eq!(IpProto::from_number(47), IpProto::OtherIpv4);
    }
}
