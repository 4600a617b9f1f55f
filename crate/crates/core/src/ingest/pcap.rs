//! Classic libpcap capture reader with Ethernet II / IPv4 dissection.

use std::fs::File;
use std::io::{BufReader, ErrorKind, Read};
use std::net::Ipv4Addr;
use std::path::Path;

use log::warn;

use super::record::{Content, IpFlags, IpProto, Label, PacketRecord, TcpFlags};
use super::{keep_packet, IngestStats, ETHERTYPE_IPV4, ETHERTYPE_VLAN};
use crate::error::{Error, Result};

const MAGIC_MICROS: u32 = 0xa1b2_c3d4;
const MAGIC_NANOS: u32 = 0xa1b2_3c4d;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PcapHeader {
    pub big_endian: bool,
    pub nanos: bool,
    pub version: (u16, u16),
    pub snaplen: u32,
    pub linktype: u32,
}

/// One captured frame as stored in the file.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub timestamp: f64,
    pub wire_len: u32,
    pub data: Vec<u8>,
}

fn parse_header(buf: &[u8; 24]) -> Result<PcapHeader> {
    let le = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
    let (big_endian, nanos) = match le {
        MAGIC_MICROS => (false, false),
        MAGIC_NANOS => (false, true),
        m if m.swap_bytes() == MAGIC_MICROS => (true, false),
        m if m.swap_bytes() == MAGIC_NANOS => (true, true),
        m => return Err(Error::data(format!("not a pcap file (magic {m:#010x})"))),
    };
    let u16_at = |i: usize| {
        let b = [buf[i], buf[i + 1]];
        if big_endian {
            u16::from_be_bytes(b)
        } else {
            u16::from_le_bytes(b)
        }
    };
    let u32_at = |i: usize| {
        let b = [buf[i], buf[i + 1], buf[i + 2], buf[i + 3]];
        if big_endian {
            u32::from_be_bytes(b)
        } else {
            u32::from_le_bytes(b)
        }
    };
    let header = PcapHeader {
        big_endian,
        nanos,
        version: (u16_at(4), u16_at(6)),
        snaplen: u32_at(16),
        linktype: u32_at(20) & 0x0fff_ffff,
    };
    if header.version.0 != 2 {
        return Err(Error::data(format!(
            "unsupported pcap version {}.{}",
            header.version.0, header.version.1
        )));
    }
    if header.linktype != LINKTYPE_ETHERNET {
        return Err(Error::data(format!(
            "unsupported link type {} (only Ethernet)",
            header.linktype
        )));
    }
    Ok(header)
}

/// Reads frames from a pcap byte stream.
pub struct FrameReader<R> {
    inner: R,
    header: PcapHeader,
    done: bool,
    truncated_tail: bool,
}

impl<R: Read> FrameReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut buf = [0u8; 24];
        inner
            .read_exact(&mut buf)
            .map_err(|e| Error::data(format!("pcap global header: {e}")))?;
        let header = parse_header(&buf)?;
        Ok(FrameReader {
            inner,
            header,
            done: false,
            truncated_tail: false,
        })
    }

    pub fn header(&self) -> PcapHeader {
        self.header
    }

    /// True if the file ended part-way through a record.
    pub fn truncated_tail(&self) -> bool {
        self.truncated_tail
    }

    fn u32(&self, b: &[u8]) -> u32 {
        let a = [b[0], b[1], b[2], b[3]];
        if self.header.big_endian {
            u32::from_be_bytes(a)
        } else {
            u32::from_le_bytes(a)
        }
    }
}

/// Fills `buf` as far as possible; returns the number of bytes read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

// Guards against absurd caplen values in corrupt files.
const MAX_CAPLEN: u32 = 256 * 1024;

impl<R: Read> Iterator for FrameReader<R> {
    type Item = std::io::Result<Frame>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut rec = [0u8; 16];
        let n = match read_full(&mut self.inner, &mut rec) {
            Ok(n) => n,
            Err(e) => {
                self.done = true;
                return Some(Err(e));
            }
        };
        if n == 0 {
            self.done = true;
            return None;
        }
        if n < rec.len() {
            self.done = true;
            self.truncated_tail = true;
            return None;
        }
        let ts_sec = self.u32(&rec[0..4]);
        let ts_frac = self.u32(&rec[4..8]);
        let caplen = self.u32(&rec[8..12]);
        let wire_len = self.u32(&rec[12..16]);
        if caplen > MAX_CAPLEN {
            self.done = true;
            self.truncated_tail = true;
            return None;
        }
        let mut data = vec![0u8; caplen as usize];
        match read_full(&mut self.inner, &mut data) {
            Ok(k) if k == data.len() => {}
            Ok(_) => {
                self.done = true;
                self.truncated_tail = true;
                return None;
            }
            Err(e) => {
                self.done = true;
                return Some(Err(e));
            }
        }
        let divisor = if self.header.nanos { 1e9 } else { 1e6 };
        Some(Ok(Frame {
            timestamp: ts_sec as f64 + ts_frac as f64 / divisor,
            wire_len: wire_len.max(caplen),
            data,
        }))
    }
}

/// Outcome of dissecting one frame.
#[derive(Debug, Clone, PartialEq)]
pub enum Dissection {
    Kept { record: PacketRecord, vlan: bool },
    Dropped { ethertype: u16 },
    Malformed(&'static str),
}

fn be16(b: &[u8], i: usize) -> u16 {
    u16::from_be_bytes([b[i], b[i + 1]])
}

/// Dissects Ethernet II (one optional 802.1Q tag) / IPv4 / TCP, UDP, ICMP.
pub fn dissect(frame: &Frame) -> Dissection {
    let d = &frame.data;
    if d.len() < 14 {
        return Dissection::Malformed("short ethernet header");
    }
    let mut ethertype = be16(d, 12);
    let mut l3 = 14;
    let mut vlan = false;
    if ethertype == ETHERTYPE_VLAN {
        if d.len() < 18 {
            return Dissection::Malformed("short vlan tag");
        }
        ethertype = be16(d, 16);
        l3 = 18;
        vlan = true;
    }
    if !keep_packet(ethertype) {
        return Dissection::Dropped { ethertype };
    }
    debug_assert_eq!(ethertype, ETHERTYPE_IPV4);
    let ip = &d[l3..];
    if ip.len() < 20 {
        return Dissection::Malformed("short ipv4 header");
    }
    if ip[0] >> 4 != 4 {
        return Dissection::Malformed("ip version is not 4");
    }
    let ihl = ((ip[0] & 0x0f) as usize) * 4;
    if ihl < 20 {
        return Dissection::Malformed("ipv4 ihl below 5");
    }
    if ip.len() < ihl {
        return Dissection::Malformed("ipv4 options truncated");
    }
    let ip_tos = ip[1];
    let flags_frag = be16(ip, 6);
    let ip_flags = IpFlags::from_bits_truncate((flags_frag >> 13) as u8);
    let frag_offset = flags_frag & 0x1fff;
    let ip_ttl = ip[8];
    let proto_num = ip[9];
    let src_ip = Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]);
    let dst_ip = Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]);
    let ip_proto = IpProto::from_number(proto_num);
    let l4 = &ip[ihl..];

    let (mut src_port, mut dst_port, mut tcp_flags, mut tcp_win) = (None, None, None, None);
    if ip_proto.has_ports() && frag_offset != 0 {
        return Dissection::Malformed("non-first ip fragment");
    }
    match ip_proto {
        IpProto::Tcp => {
            if l4.len() < 20 {
                return Dissection::Malformed("short tcp header");
            }
            src_port = Some(be16(l4, 0));
            dst_port = Some(be16(l4, 2));
            let mut bits = l4[13] as u16;
            if l4[12] & 0x01 != 0 {
                bits |= TcpFlags::N.bits();
            }
            tcp_flags = Some(TcpFlags::from_bits_truncate(bits));
            tcp_win = Some(be16(l4, 14));
        }
        IpProto::Udp => {
            if l4.len() < 8 {
                return Dissection::Malformed("short udp header");
            }
            src_port = Some(be16(l4, 0));
            dst_port = Some(be16(l4, 2));
        }
        IpProto::Icmp | IpProto::OtherIpv4 => {}
    }

    Dissection::Kept {
        record: PacketRecord {
            timestamp: frame.timestamp,
            frame_len: frame.wire_len,
            ip_tos,
            ip_flags,
            ip_ttl,
            ip_proto,
            src_port,
            dst_port,
            tcp_flags,
            tcp_win,
            content: Content::Bytes(frame.data.clone()),
            src_ip,
            dst_ip,
            label: Label::Unlabeled,
        },
        vlan,
    }
}

/// Stream of kept records from a pcap source, with running statistics.
pub struct PcapStream<R> {
    frames: FrameReader<R>,
    stats: IngestStats,
}

impl<R: Read> PcapStream<R> {
    pub fn new(reader: R) -> Result<Self> {
        Ok(PcapStream {
            frames: FrameReader::new(reader)?,
            stats: IngestStats::default(),
        })
    }

    pub fn stats(&self) -> &IngestStats {
        &self.stats
    }

    pub fn into_stats(self) -> IngestStats {
        self.stats
    }
}

impl<R: Read> Iterator for PcapStream<R> {
    type Item = PacketRecord;

    fn next(&mut self) -> Option<PacketRecord> {
        loop {
            let frame = match self.frames.next() {
                None => {
                    if self.frames.truncated_tail() {
                        self.frames.truncated_tail = false;
                        self.stats.count_malformed("truncated record at end of file");
                        warn!("pcap: truncated record at end of file");
                    }
                    return None;
                }
                Some(Err(e)) => {
                    self.stats.count_malformed("io error");
                    warn!("pcap: read error, stopping stream: {e}");
                    return None;
                }
                Some(Ok(f)) => f,
            };
            self.stats.frames += 1;
            match dissect(&frame) {
                Dissection::Kept { record, vlan } => {
                    self.stats.count_kept(&record, vlan);
                    return Some(record);
                }
                Dissection::Dropped { ethertype } => self.stats.count_dropped(ethertype),
                Dissection::Malformed(why) => {
                    warn!("pcap: skipping frame {}: {why}", self.stats.frames);
                    self.stats.count_malformed(why);
                }
            }
        }
    }
}

/// Opens a capture file. Fails only if the global header is unusable.
pub fn read_pcap(path: impl AsRef<Path>) -> Result<PcapStream<BufReader<File>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    PcapStream::new(BufReader::new(file)).map_err(|e| match e {
        Error::Data(msg) => Error::data(format!("{}: {msg}", path.display())),
        other => other,
    })
}
