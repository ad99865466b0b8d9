use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::RunConfig;
use crate::error::{Error, Result};
use crate::nn::Network;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SDCK";
const VERSION: u32 = 1;
const MOMENTUM_PREFIX: &str = "momentum:";

/// Parameters, running statistics, optimizer momentum, configuration and
/// step counter. Random streams are derived from `(config.seed, step)`, so
/// the pair is the complete generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub params: Vec<(String, Tensor)>,
    pub momentum: Vec<(String, Tensor)>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: usize,
    rng: RngState,
    tensors: Vec<(String, Vec<usize>)>,
}

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: u64,
    next_step: usize,
}

impl Checkpoint {
    /// Rebuilds the network described by the stored configuration.
    pub fn network(&self) -> Result<Network> {
        let mut net = Network::new(&self.config.network, 0)?;
        net.params_mut().load_named(&self.params)?;
        Ok(net)
    }
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format { what: path.display().to_string(), detail: detail.into() }
}

/// Layout: `SDCK`, version u32, header length u64, JSON header, then every
/// tensor's values as f64 little-endian in header order.
pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let all: Vec<(String, &Tensor)> = ckpt
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t))
        .chain(ckpt.momentum.iter().map(|(n, t)| (format!("{MOMENTUM_PREFIX}{n}"), t)))
        .collect();
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        rng: RngState { seed: ckpt.config.seed, next_step: ckpt.step },
        tensors: all.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let tmp = path.with_extension("tmp");
    let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut w = BufWriter::new(f);
    let res = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        for (_, t) in &all {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(&tmp, e))?;
    drop(w);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let file_len = f.metadata().map_err(|e| Error::io(path, e))?.len() as usize;
    let mut r = BufReader::new(f);
    let mut read = |n: usize| {
        if n > file_len {
            return Err(format_err(path, format!("declared {n} bytes in a {file_len}-byte file")));
        }
        read_bytes(&mut r, path, n)
    };
    if read(4)? != MAGIC {
        return Err(format_err(path, "missing SDCK magic"));
    }
    let version = u32::from_le_bytes(read(4)?.try_into().unwrap());
    if version != VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let len = u64::from_le_bytes(read(8)?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(&read(len)?).map_err(|e| format_err(path, e.to_string()))?;
    let mut params = Vec::new();
    let mut momentum = Vec::new();
    for (name, shape) in header.tensors {
        let n = shape.iter().try_fold(8usize, |a, &d| a.checked_mul(d)).unwrap_or(usize::MAX);
        let raw = read(n)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| format_err(path, e.to_string()))?;
        match name.strip_prefix(MOMENTUM_PREFIX) {
            Some(n) => momentum.push((n.to_string(), t)),
            None => params.push((name, t)),
        }
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(|e| Error::io(path, e))? != 0 {
        return Err(format_err(path, "trailing bytes"));
    }
    Ok(Checkpoint { config: header.config, step: header.step, params, momentum })
}

fn read_bytes(r: &mut impl Read, path: &Path, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| format_err(path, format!("truncated: {e}")))?;
    Ok(buf)
}
