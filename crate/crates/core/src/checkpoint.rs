//! Binary container for named `f32` tensors.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SRND" 0x01
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims[rank], f32 values
//! ```
//!
//! The same container holds network parameters and optimizer state.

use std::fs;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::net::{BlockKind, NetConfig, NetworkParams};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SRND";
pub const VERSION: u8 = 1;

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let io = |e: io::Error| Error::Format(format!("write failed: {e}"));
    w.write_all(MAGIC).map_err(io)?;
    w.write_all(&[VERSION]).map_err(io)?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes()).map_err(io)?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name too long: {name:?}")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("rank of {name:?} too large")))?;
        w.write_all(&len.to_le_bytes()).map_err(io)?;
        w.write_all(name.as_bytes()).map_err(io)?;
        w.write_all(&[rank]).map_err(io)?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Format(format!("extent of {name:?} too large")))?;
            w.write_all(&d.to_le_bytes()).map_err(io)?;
        }
        let mut buf = Vec::with_capacity(4 * t.numel());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R, what: &str) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Format(format!("truncated {what}: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    if &read_exact::<_, 4>(r, "magic")? != MAGIC {
        return Err(Error::Format("bad magic, not a checkpoint".into()));
    }
    let [version] = read_exact::<_, 1>(r, "version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r, "tensor count")?);
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r, "name length")?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Format(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(r, "rank")?;
        let shape = (0..rank)
            .map(|_| Ok(u32::from_le_bytes(read_exact(r, "dims")?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; 4 * numel];
        r.read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("truncated values of {name:?}: {e}")))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("{name:?}: {e}")))?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Writes to a sibling temporary file and renames it into place, so an
/// interrupted save never clobbers the previous file.
pub fn save_tensors<'a>(
    path: &Path,
    tensors: impl ExactSizeIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(file);
    write_tensors(&mut w, tensors)?;
    w.flush().map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensors(&mut BufReader::new(file))
}

pub fn save_params(path: &Path, params: &NetworkParams) -> Result<()> {
    save_tensors(path, params.iter())
}

pub fn load_params(path: &Path, cfg: &NetConfig) -> Result<NetworkParams> {
    NetworkParams::from_named(cfg, load_tensors(path)?)
}

/// Reconstructs the network configuration from parameter names and shapes.
/// Surround half sizes of plain blocks are not stored; they are reported as
/// the defaults, which plain blocks never read.
pub fn infer_config(named: &[(String, Tensor)]) -> Result<NetConfig> {
    let find = |name: &str| {
        named
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {name:?}")))
    };
    let channels = find("shallow.weight")?[0];
    let led_features = find("led.head.weight")?[0];
    let growth = find("led.rdb1.dense.0.weight")?[0];
    let dense_layers = (0..)
        .take_while(|i| named.iter().any(|(n, _)| *n == format!("led.rdb1.dense.{i}.weight")))
        .count();
    let blocks = (0..)
        .take_while(|b| named.iter().any(|(n, _)| *n == format!("blocks.{b}.fusion_conv.weight")))
        .count();
    let adaptive = named.iter().any(|(n, _)| n == "blocks.0.asf");
    let asf_sizes = if adaptive {
        (0..blocks)
            .map(|b| Ok(find(&format!("blocks.{b}.asf"))?[0]))
            .collect::<Result<Vec<_>>>()?
    } else {
        NetConfig::default().asf_sizes.into_iter().cycle().take(blocks).collect()
    };
    let cfg = NetConfig {
        channels,
        led_features,
        dense_layers,
        growth,
        asf_sizes,
        use_eca: named.iter().any(|(n, _)| n == "eca.conv_a"),
        block: if adaptive { BlockKind::Adaptive } else { BlockKind::Plain },
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Loads a checkpoint without a configuration, inferring it from shapes.
pub fn load_params_any(path: &Path) -> Result<(NetConfig, NetworkParams)> {
    let named = load_tensors(path)?;
    let cfg = infer_config(&named)?;
    let params = NetworkParams::from_named(&cfg, named)?;
    Ok((cfg, params))
}

/// Path of the optimizer-state file that accompanies a checkpoint.
pub fn optimizer_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".adam");
    PathBuf::from(s)
}
