//! Binary weight files.
//!
//! Layout, all little-endian:
//! `"FCNW"`, `u32` version, five `u32` config fields (levels, base channels,
//! in channels, out maps, convs per level), `u32` record count, then per
//! record a `u32`-length-prefixed UTF-8 id, `u32` rank, `u32` dims and `f32`
//! values, and finally the CRC32 of every preceding byte.

use std::path::Path;

use super::{ModelConfig, ModelKind, Unet};
use crate::nn::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"FCNW";

#[derive(Debug, thiserror::Error)]
pub enum WeightsError {
    #[error("weight file i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weight file (bad magic)")]
    Magic,
    #[error("weight file version {found} is not supported (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("weight file truncated")]
    Truncated,
    #[error("weight file checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("weight file holds {found:?} but {expected:?} was expected")]
    ConfigMismatch { expected: ModelKind, found: ModelConfig },
    #[error("weight file layout does not match its config: {0}")]
    Layout(String),
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, id: &str, shape: &[usize], values: &[f32]) {
    put_u32(buf, id.len() as u32);
    buf.extend_from_slice(id.as_bytes());
    put_u32(buf, shape.len() as u32);
    for &d in shape {
        put_u32(buf, d as u32);
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized bytes of a model: parameters then batch-norm running stats.
pub fn to_bytes(model: &Unet<f32>) -> Vec<u8> {
    let mut model = model.clone();
    let c = *model.config();
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    put_u32(&mut buf, FORMAT_VERSION);
    for v in [c.levels, c.base_channels, c.in_channels, c.out_maps, c.convs_per_level] {
        put_u32(&mut buf, v as u32);
    }
    let params = model.named_params().len();
    let norms = model.batch_norms_mut().len();
    put_u32(&mut buf, (params + 2 * norms) as u32);
    for (id, t) in model.named_params() {
        put_tensor(&mut buf, &id, t.shape(), t.data());
    }
    for (id, bn) in model.batch_norms_mut() {
        put_tensor(&mut buf, &format!("{id}.running_mean"), &[bn.running_mean.len()], &bn.running_mean);
        put_tensor(&mut buf, &format!("{id}.running_var"), &[bn.running_var.len()], &bn.running_var);
    }
    let crc = crc32fast::hash(&buf);
    put_u32(&mut buf, crc);
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn bytes(&mut self, n: usize) -> Result<&[u8], WeightsError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(WeightsError::Truncated)?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().expect("4 bytes")))
    }

    fn record(&mut self) -> Result<(String, Vec<usize>, Vec<f32>), WeightsError> {
        let len = self.u32()? as usize;
        let id = String::from_utf8(self.bytes(len)?.to_vec())
            .map_err(|_| WeightsError::Layout("record id is not UTF-8".into()))?;
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = self.bytes(n.checked_mul(4).ok_or(WeightsError::Truncated)?)?;
        let values = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect();
        Ok((id, shape, values))
    }
}

/// Parses a weight file image. When `expect` is given, the stored output
/// map count must match that model kind.
pub fn from_bytes(buf: &[u8], expect: Option<ModelKind>) -> Result<Unet<f32>, WeightsError> {
    if buf.len() < 4 + 4 + 4 {
        return Err(WeightsError::Truncated);
    }
    if &buf[..4] != MAGIC {
        return Err(WeightsError::Magic);
    }
    let version = u32::from_le_bytes(buf[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(WeightsError::Version { found: version });
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(WeightsError::Checksum { stored, computed });
    }
    let mut r = Reader { buf: body, pos: 8 };
    let mut f = [0usize; 5];
    for v in &mut f {
        *v = r.u32()? as usize;
    }
    let config = ModelConfig { levels: f[0], base_channels: f[1], in_channels: f[2], out_maps: f[3], convs_per_level: f[4] };
    if let Some(kind) = expect {
        if config.out_maps != kind.out_maps() {
            return Err(WeightsError::ConfigMismatch { expected: kind, found: config });
        }
    }
    let mut model = Unet::<f32>::new(config, 0).map_err(|e| WeightsError::Layout(e.to_string()))?;
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        records.push(r.record()?);
    }
    if r.pos != body.len() {
        return Err(WeightsError::Layout(format!("{} trailing bytes", body.len() - r.pos)));
    }
    let mut it = records.into_iter();
    let mut next = |want: &str, shape: &[usize]| -> Result<Vec<f32>, WeightsError> {
        let (id, s, v) = it.next().ok_or_else(|| WeightsError::Layout(format!("missing record {want}")))?;
        if id != want || s != shape {
            return Err(WeightsError::Layout(format!("expected {want} {shape:?}, found {id} {s:?}")));
        }
        Ok(v)
    };
    for (id, t) in model.named_params_mut() {
        let shape = t.shape().to_vec();
        *t = Tensor::from_vec(&shape, next(&id, &shape)?).expect("shape checked");
    }
    for (id, bn) in model.batch_norms_mut() {
        let c = bn.running_mean.len();
        bn.running_mean = next(&format!("{id}.running_mean"), &[c])?;
        bn.running_var = next(&format!("{id}.running_var"), &[c])?;
    }
    if it.next().is_some() {
        return Err(WeightsError::Layout("more records than the config defines".into()));
    }
    Ok(model)
}

/// Writes the model to `path` via a temporary sibling and a rename, so a
/// crash never leaves a half-written file under the final name.
pub fn save_weights(model: &Unet<f32>, path: &Path) -> Result<(), WeightsError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_weights(path: &Path, expect: Option<ModelKind>) -> Result<Unet<f32>, WeightsError> {
    from_bytes(&std::fs::read(path)?, expect)
}
