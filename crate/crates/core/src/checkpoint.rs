//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "FSID"  u32 version  u32 config_len  config (TOML text)
//! u32 param_count
//! per parameter, sorted by name:
//!   u32 name_len  name  u8 dtype  u32 rank  u32 dims[rank]  values
//! ```
//!
//! The only dtype is `1`, 64-bit IEEE floats.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};

pub const MAGIC: &[u8; 4] = b"FSID";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

fn ckpt_err<T>(detail: impl Into<String>) -> Result<T> {
    Err(Error::Checkpoint(detail.into()))
}

pub fn config_text(config: &NetworkConfig) -> Result<String> {
    toml::to_string(config).map_err(|e| Error::Checkpoint(format!("cannot serialize config: {e}")))
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    let config = config_text(net.config())?;
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(config.len() as u32).to_le_bytes())?;
    out.write_all(config.as_bytes())?;
    let params = net.parameters();
    out.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params {
        out.write_all(&(p.name.len() as u32).to_le_bytes())?;
        out.write_all(p.name.as_bytes())?;
        out.write_all(&[DTYPE_F64])?;
        let shape = p.tensor.shape();
        out.write_all(&(shape.len() as u32).to_le_bytes())?;
        for d in shape {
            out.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in p.tensor.data().iter() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return ckpt_err(format!("truncated file while reading {what} at byte {}", self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self, len: usize, what: &str) -> Result<String> {
        String::from_utf8(self.take(len, what)?.to_vec()).or_else(|_| ckpt_err(format!("{what} is not UTF-8")))
    }
}

/// Decoded contents of a checkpoint file.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub config: NetworkConfig,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

pub fn read_checkpoint(path: &Path) -> Result<CheckpointData> {
    let bytes = fs::read(path)?;
    let mut r = Reader { buf: &bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return ckpt_err("not a checkpoint file (bad magic)");
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return ckpt_err(format!("unsupported format version {version}, expected {VERSION}"));
    }
    let len = r.u32("config length")? as usize;
    let text = r.string(len, "config")?;
    let config: NetworkConfig =
        toml::from_str(&text).map_err(|e| Error::Checkpoint(format!("invalid embedded config: {e}")))?;
    let count = r.u32("parameter count")?;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = r.string(name_len, "parameter name")?;
        let dtype = r.take(1, "dtype")?[0];
        if dtype != DTYPE_F64 {
            return ckpt_err(format!("{name}: unknown dtype tag {dtype}"));
        }
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if params.insert(name.clone(), (shape, values)).is_some() {
            return ckpt_err(format!("duplicate parameter {name}"));
        }
    }
    if r.pos != bytes.len() {
        return ckpt_err(format!("{} trailing bytes", bytes.len() - r.pos));
    }
    Ok(CheckpointData { config, params })
}

/// Copies checkpoint values into `net`, which must have the same config.
pub fn load_into(net: &Network, data: &CheckpointData) -> Result<()> {
    if &data.config != net.config() {
        return ckpt_err(format!(
            "checkpoint config ({}) does not match the network ({})",
            config_text(&data.config)?.replace('\n', "; "),
            config_text(net.config())?.replace('\n', "; ")
        ));
    }
    let expected = net.parameter_names();
    let found: std::collections::BTreeSet<String> = data.params.keys().cloned().collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).collect();
        let extra: Vec<_> = found.difference(&expected).collect();
        return ckpt_err(format!("parameter names differ: missing {missing:?}, unexpected {extra:?}"));
    }
    for p in net.parameters() {
        let (shape, values) = &data.params[&p.name];
        if shape != p.tensor.shape() {
            return ckpt_err(format!("{}: shape {shape:?}, network expects {:?}", p.name, p.tensor.shape()));
        }
        p.tensor.assign(values)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let data = read_checkpoint(path)?;
    let net = Network::build(data.config.clone())?;
    load_into(&net, &data)?;
    Ok(net)
}
