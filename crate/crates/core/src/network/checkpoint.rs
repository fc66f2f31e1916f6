//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic        8 bytes   b"SWAPOUT\0"
//! version      u32
//! config_len   u64       followed by the NetworkConfig as UTF-8 JSON
//! count        u64       number of tensors
//! per tensor:
//!   name_len   u32       followed by the UTF-8 name
//!   rank       u32
//!   dims       rank × u64
//!   data       prod(dims) × f64
//! ```
//!
//! Parameters are stored under their own names; batch-norm running
//! statistics as `<layer>.running_mean` and `<layer>.running_var`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Network, NetworkConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"SWAPOUT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn named_tensors(net: &Network) -> Vec<(String, Tensor)> {
    let mut out: Vec<(String, Tensor)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect();
    for s in net.bn_states() {
        out.push((
            format!("{}.running_mean", s.name),
            Tensor::from_vec(s.running_mean.clone()),
        ));
        out.push((
            format!("{}.running_var", s.name),
            Tensor::from_vec(s.running_var.clone()),
        ));
    }
    out
}

pub fn write_checkpoint(net: &Network, w: &mut impl Write) -> Result<()> {
    let config = serde_json::to_vec(net.config()).map_err(|e| bad(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(config.len() as u64).to_le_bytes())?;
    w.write_all(&config)?;
    let tensors = named_tensors(net);
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in &tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_bytes(r: &mut impl Read, len: u64) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    r.take(len).read_to_end(&mut buf)?;
    if buf.len() as u64 != len {
        return Err(bad("truncated checkpoint"));
    }
    Ok(buf)
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Network> {
    if &read_array::<8>(r)? != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let config_len = read_u64(r)?;
    let config: NetworkConfig = serde_json::from_slice(&read_bytes(r, config_len)?)
        .map_err(|e| bad(format!("config: {e}")))?;
    let count = read_u64(r)?;
    let mut tensors = HashMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)?;
        let name = String::from_utf8(read_bytes(r, name_len as u64)?)
            .map_err(|_| bad("tensor name is not UTF-8"))?;
        let rank = read_u32(r)?;
        let dims = (0..rank)
            .map(|_| read_u64(r).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len: usize = dims.iter().product();
        let raw = read_bytes(r, len as u64 * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(&dims, data)?);
    }
    let mut net = Network::new(config, 0)?;
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = tensors
            .remove(name)
            .ok_or_else(|| bad(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(bad(format!(
                "tensor {name} has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for p in net.params_mut() {
        p.value = take(&p.name, p.value.shape())?;
    }
    for s in net.bn_states_mut() {
        let c = [s.running_mean.len()];
        s.running_mean = take(&format!("{}.running_mean", s.name), &c)?.into_data();
        s.running_var = take(&format!("{}.running_var", s.name), &c)?.into_data();
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(bad(format!("unexpected tensor {extra}")));
    }
    Ok(net)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(net, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::ChannelStats;
    use crate::rules::{RuleSpec, Schedule};

    #[test]
    fn roundtrip_preserves_everything() {
        let cfg = NetworkConfig::from_depth(
            8,
            1,
            10,
            RuleSpec::swapout("linear:1:0.5".parse::<Schedule>().unwrap()),
        )
        .unwrap();
        let mut net = Network::new(cfg, 42).unwrap();
        let stats: Vec<ChannelStats> = net
            .bn_states()
            .iter()
            .map(|s| ChannelStats {
                mean: vec![0.3; s.running_mean.len()],
                var: vec![2.5; s.running_var.len()],
            })
            .collect();
        net.update_running_stats(&stats).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net, &mut buf).unwrap();
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.config(), net.config());
        assert_eq!(back.params(), net.params());
        assert_eq!(back.bn_states(), net.bn_states());

        let mut again = Vec::new();
        write_checkpoint(&back, &mut again).unwrap();
        assert_eq!(buf, again);

        assert!(read_checkpoint(&mut &buf[..buf.len() - 3]).is_err());
        let mut corrupt = buf.clone();
        corrupt[0] = b'X';
        assert!(read_checkpoint(&mut corrupt.as_slice()).is_err());
    }
}
