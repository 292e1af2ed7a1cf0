//! Versioned binary model container.
//!
//! Layout (little-endian): magic `XVOLMDL1`; u8 scalar width in bytes;
//! u32 metadata length and metadata JSON; u32 blob count; per blob a u32
//! name length, name bytes, u8 rank, u32 extents and the scalars; finally
//! the FNV-1a 64 checksum of every preceding byte.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ArchitectureSpec, ModelState, OptimizerSlots};
use crate::checksum::fnv64;
use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, RunningStats, Tensor};

pub const MAGIC: &[u8; 8] = b"XVOLMDL1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    spec: ArchitectureSpec,
    epoch: u64,
    seed: u64,
    optimizer_step: u64,
    mu_product: f64,
}

fn push_blob<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(t.ndim() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn encode<T: Real>(m: &ModelState<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(T::BYTES as u8);
    let meta = serde_json::to_vec(&Meta {
        spec: m.spec.clone(),
        epoch: m.epoch,
        seed: m.seed,
        optimizer_step: m.optimizer.step,
        mu_product: m.optimizer.mu_product,
    })?;
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);

    let blobs = 3 * m.params.len() + 2 * m.bn_stats.len();
    out.extend_from_slice(&(blobs as u32).to_le_bytes());
    for (name, t) in &m.params {
        push_blob(&mut out, &format!("param/{name}"), t);
    }
    for (i, s) in m.bn_stats.iter().enumerate() {
        let c = s.mean.len();
        push_blob(&mut out, &format!("buffer/bn{}.running_mean", i + 1), &Tensor::from_parts(vec![c], s.mean.clone()));
        push_blob(&mut out, &format!("buffer/bn{}.running_var", i + 1), &Tensor::from_parts(vec![c], s.var.clone()));
    }
    for ((name, _), t) in m.params.iter().zip(&m.optimizer.first) {
        push_blob(&mut out, &format!("nadam.m/{name}"), t);
    }
    for ((name, _), t) in m.params.iter().zip(&m.optimizer.second) {
        push_blob(&mut out, &format!("nadam.v/{name}"), t);
    }
    let sum = fnv64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    Ok(out)
}

pub fn save_model<T: Real>(m: &ModelState<T>, path: &Path) -> Result<()> {
    let bytes = encode(m)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn blob<T: Real>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32("blob name length")?;
        let name = String::from_utf8(self.take(len, "blob name")?.to_vec())
            .map_err(|_| Error::format(self.path, "blob name is not UTF-8"))?;
        let rank = self.u8("blob rank")? as usize;
        let shape = (0..rank).map(|_| self.u32("blob extent")).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = self.take(n * T::BYTES, &format!("data of `{name}`"))?;
        let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::format(self.path, format!("blob `{name}`: {e}")))?;
        Ok((name, t))
    }
}

fn check_header<'a>(bytes: &'a [u8], path: &'a Path) -> Result<(Reader<'a>, Precision)> {
    if bytes.len() < MAGIC.len() + 1 + 8 {
        return Err(Error::format(path, "file too short for a model container"));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::format(path, "bad magic; not an XVOLMDL1 model container"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().unwrap());
    if fnv64(body) != stored {
        return Err(Error::format(path, "checksum mismatch; file is truncated or corrupt"));
    }
    let precision = match body[8] {
        4 => Precision::F32,
        8 => Precision::F64,
        w => return Err(Error::format(path, format!("unknown scalar width {w}"))),
    };
    Ok((
        Reader {
            bytes: body,
            pos: 9,
            path,
        },
        precision,
    ))
}

/// Scalar precision a container was written in.
pub fn peek_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(check_header(&bytes, path)?.1)
}

pub fn load_model<T: Real>(path: &Path) -> Result<ModelState<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (mut r, precision) = check_header(&bytes, path)?;
    if precision != T::PRECISION {
        return Err(Error::PrecisionMismatch {
            stored: precision.name(),
            requested: T::PRECISION.name(),
        });
    }
    let meta_len = r.u32("metadata length")?;
    let meta: Meta = serde_json::from_slice(r.take(meta_len, "metadata")?)
        .map_err(|e| Error::format(path, format!("metadata: {e}")))?;
    let count = r.u32("blob count")?;
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        blobs.push(r.blob::<T>()?);
    }
    if r.pos != r.bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last blob"));
    }

    let mut params = Vec::new();
    let mut means = Vec::new();
    let mut vars = Vec::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in blobs {
        let (kind, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::format(path, format!("blob `{name}` has no section prefix")))?;
        match kind {
            "param" => params.push((rest.to_string(), t)),
            "buffer" if rest.ends_with(".running_mean") => means.push(t),
            "buffer" if rest.ends_with(".running_var") => vars.push(t),
            "nadam.m" => first.push(t),
            "nadam.v" => second.push(t),
            _ => return Err(Error::format(path, format!("unexpected blob `{name}`"))),
        }
    }
    let fresh = super::build_model::<T>(&meta.spec, 0)
        .map_err(|e| Error::format(path, format!("stored architecture is invalid: {e}")))?;
    let layout_ok = fresh.params.len() == params.len()
        && fresh
            .params
            .iter()
            .zip(&params)
            .all(|((n1, t1), (n2, t2))| n1 == n2 && t1.shape() == t2.shape())
        && first.len() == params.len()
        && second.len() == params.len()
        && means.len() == fresh.bn_stats.len()
        && vars.len() == fresh.bn_stats.len();
    if !layout_ok {
        return Err(Error::format(path, "parameter blobs do not match the stored architecture"));
    }
    let bn_stats = means
        .into_iter()
        .zip(vars)
        .map(|(mean, var): (Tensor<T>, Tensor<T>)| RunningStats {
            mean: mean.into_data(),
            var: var.into_data(),
        })
        .collect();
    let optimizer = OptimizerSlots {
        step: meta.optimizer_step,
        mu_product: meta.mu_product,
        first,
        second,
    };
    Ok(ModelState::assemble(
        meta.spec,
        params,
        bn_stats,
        Some(optimizer),
        meta.epoch,
        meta.seed,
    ))
}
