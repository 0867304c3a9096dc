//! Weights file: `KMNW` magic, `u32` version, `u32`-length-prefixed text
//! header of `key value` lines, `u64` parameter count, then the parameters
//! as little-endian `f64`.

use std::io::{Read, Write};

use super::{NetworkSpec, NetworkWeights, NUM_CONV};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"KMNW";
const VERSION: u32 = 1;

/// Training metadata stored next to the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightsMeta {
    pub task: String,
    pub mode: String,
    pub seed: u64,
    pub epochs: usize,
    pub rounds: usize,
    pub best_val_loss: f64,
}

pub fn write_weights<W: Write>(mut w: W, weights: &NetworkWeights, meta: &WeightsMeta) -> Result<()> {
    let spec = &weights.spec;
    let channels = spec
        .channels
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    let header = format!(
        "task {}\nmode {}\ninput_width {}\ninput_height {}\nchannels {}\noutput_dim {}\nseed {}\nepochs {}\nrounds {}\nbest_val_loss {:?}\n",
        meta.task,
        meta.mode,
        spec.input_width,
        spec.input_height,
        channels,
        spec.output_dim,
        meta.seed,
        meta.epochs,
        meta.rounds,
        meta.best_val_loss
    );
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    w.write_all(&(weights.params.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(8 * weights.params.len());
    for p in &weights.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<(NetworkWeights, WeightsMeta)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a weights file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported weights version {version}")));
    }
    let len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; len];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| Error::Format("header is not UTF-8".into()))?;
    let field = |key: &str| -> Result<&str> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|rest| rest.strip_prefix(' ')))
            .ok_or_else(|| Error::Format(format!("missing header field `{key}`")))
    };
    let num = |key: &str| -> Result<usize> {
        field(key)?
            .parse()
            .map_err(|_| Error::Format(format!("bad header field `{key}`")))
    };
    let channels: Vec<usize> = field("channels")?
        .split_whitespace()
        .map(|c| c.parse().map_err(|_| Error::Format("bad channel list".into())))
        .collect::<Result<_>>()?;
    let channels: [usize; NUM_CONV] = channels
        .try_into()
        .map_err(|_| Error::Format("expected five channel counts".into()))?;
    let spec = NetworkSpec::new(num("input_width")?, num("input_height")?, channels, num("output_dim")?)?;
    let meta = WeightsMeta {
        task: field("task")?.to_string(),
        mode: field("mode")?.to_string(),
        seed: field("seed")?
            .parse()
            .map_err(|_| Error::Format("bad seed".into()))?,
        epochs: num("epochs")?,
        rounds: num("rounds")?,
        best_val_loss: field("best_val_loss")?
            .parse()
            .map_err(|_| Error::Format("bad best_val_loss".into()))?,
    };
    let count = read_u64(&mut r)? as usize;
    if count != spec.num_params() {
        return Err(Error::Format(format!(
            "parameter count {count} does not match spec ({})",
            spec.num_params()
        )));
    }
    let mut buf = vec![0u8; 8 * count];
    r.read_exact(&mut buf)?;
    let params = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((NetworkWeights { spec, params }, meta))
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
