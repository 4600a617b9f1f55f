//! Model checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes   b"FIDSCKPT"
//! version    u16       1
//! scheme     u8        0 = none, 1 = three-range, 2 = hierarchical
//! precision  u8        4 = f32, 8 = f64
//! layers     u16       layer count L
//! L x { inputs u32, outputs u32, activation u8 (0 relu, 1 identity) }
//! count      u64       parameter count
//! params     count x f32|f64
//! ```

use std::fs;
use std::path::Path;

use super::net::{Activation, Architecture, DenseNet, FlatParams, LayerShape};
use crate::error::{Error, Result};
use crate::features::Scheme;

const MAGIC: &[u8; 8] = b"FIDSCKPT";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub scheme: Option<Scheme>,
    pub precision: Precision,
    pub net: DenseNet,
}

pub fn encode_checkpoint(net: &DenseNet, scheme: Option<Scheme>, precision: Precision) -> Vec<u8> {
    let arch = net.architecture();
    let mut out = Vec::with_capacity(32 + arch.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(match scheme {
        None => 0,
        Some(Scheme::ThreeRange) => 1,
        Some(Scheme::Hierarchical) => 2,
    });
    out.push(match precision {
        Precision::F32 => 4,
        Precision::F64 => 8,
    });
    out.extend_from_slice(&(arch.layers().len() as u16).to_le_bytes());
    for l in arch.layers() {
        out.extend_from_slice(&(l.inputs as u32).to_le_bytes());
        out.extend_from_slice(&(l.outputs as u32).to_le_bytes());
        out.push(match l.activation {
            Activation::Relu => 0,
            Activation::Identity => 1,
        });
    }
    out.extend_from_slice(&(arch.param_count() as u64).to_le_bytes());
    for &p in net.params().iter() {
        match precision {
            Precision::F32 => out.extend_from_slice(&(p as f32).to_le_bytes()),
            Precision::F64 => out.extend_from_slice(&p.to_le_bytes()),
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data("checkpoint truncated"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::data("not a checkpoint file (bad magic)"));
    }
    let version = c.u16()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let scheme = match c.u8()? {
        0 => None,
        1 => Some(Scheme::ThreeRange),
        2 => Some(Scheme::Hierarchical),
        s => return Err(Error::data(format!("unknown scheme tag {s}"))),
    };
    let precision = match c.u8()? {
        4 => Precision::F32,
        8 => Precision::F64,
        p => return Err(Error::data(format!("unknown precision tag {p}"))),
    };
    let n_layers = c.u16()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let inputs = c.u32()? as usize;
        let outputs = c.u32()? as usize;
        let activation = match c.u8()? {
            0 => Activation::Relu,
            1 => Activation::Identity,
            a => return Err(Error::data(format!("unknown activation tag {a}"))),
        };
        layers.push(LayerShape { inputs, outputs, activation });
    }
    let arch = Architecture::new(layers).map_err(|e| Error::data(e.to_string()))?;
    let count = c.u64()? as usize;
    if count != arch.param_count() {
        return Err(Error::data(format!(
            "checkpoint holds {count} parameters, architecture needs {}",
            arch.param_count()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        params.push(match precision {
            Precision::F32 => f32::from_le_bytes(c.take(4)?.try_into().expect("4 bytes")) as f64,
            Precision::F64 => f64::from_le_bytes(c.take(8)?.try_into().expect("8 bytes")),
        });
    }
    if c.pos != buf.len() {
        return Err(Error::data("trailing bytes after checkpoint parameters"));
    }
    let net = DenseNet::from_flat(arch, FlatParams(params))?;
    if let Some(i) = net.params().first_non_finite() {
        return Err(Error::numeric(format!("checkpoint parameter {i} is not finite")));
    }
    Ok(Checkpoint { scheme, precision, net })
}

pub fn save_checkpoint(path: &Path, net: &DenseNet, scheme: Option<Scheme>) -> Result<()> {
    fs::write(path, encode_checkpoint(net, scheme, Precision::F32)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&buf).map_err(|e| match e {
        Error::Data(m) => Error::data(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f32_round_trip_matches_rounded_net() {
        let mut net = DenseNet::init(Architecture::autoencoder(69).unwrap(), 11);
        let bytes = encode_checkpoint(&net, Some(Scheme::Hierarchical), Precision::F32);
        let ck = decode_checkpoint(&bytes).unwrap();
        net.round_to_f32();
        assert_eq!(ck.net, net);
        assert_eq!(ck.scheme, Some(Scheme::Hierarchical));
        assert_eq!(ck.precision, Precision::F32);
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let net = DenseNet::init(Architecture::autoencoder(27).unwrap(), 2);
        let ck = decode_checkpoint(&encode_checkpoint(&net, None, Precision::F64)).unwrap();
        assert_eq!(ck.net, net);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let net = DenseNet::init(Architecture::autoencoder(27).unwrap(), 2);
        let bytes = encode_checkpoint(&net, None, Precision::F32);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
    }
}
