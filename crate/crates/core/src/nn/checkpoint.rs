//! Binary checkpoint format: magic, version, embedded arch config, step
//! counter, then every parameter block with its Adam moments. Round-trips
//! are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::model::{ArchConfig, PolicyParams, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
use crate::nn::tape::Tensor;

fn write_tensor(buf: &mut Vec<u8>, t: &Tensor) {
    buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
    buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
    for v in &t.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Truncated {
                record: self.pos,
                reason: "checkpoint ends early".into(),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let rows = self.u32()? as usize;
        let cols = self.u32()? as usize;
        let raw = self.take(rows * cols * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Tensor::from_vec(rows, cols, data))
    }
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let arch_json = serde_json::to_vec(&params.arch)?;
    buf.extend_from_slice(&(arch_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&arch_json);
    buf.extend_from_slice(&params.step.to_le_bytes());
    buf.extend_from_slice(&params.init_seed.to_le_bytes());
    buf.extend_from_slice(&(params.names.len() as u32).to_le_bytes());
    for (i, name) in params.names.iter().enumerate() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor(&mut buf, &params.tensors[i]);
        write_tensor(&mut buf, &params.m[i]);
        write_tensor(&mut buf, &params.v[i]);
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    let mut r = Reader { data: &data, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Truncated {
            record: 0,
            reason: "not a checkpoint file".into(),
        });
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::FormatVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let arch_len = r.u32()? as usize;
    let arch: ArchConfig = serde_json::from_slice(r.take(arch_len)?)?;
    arch.validate()?;
    let step = r.u64()?;
    let init_seed = r.u64()?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut tensors = Vec::with_capacity(count);
    let mut m = Vec::with_capacity(count);
    let mut v = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Truncated {
            record: r.pos,
            reason: "bad block name".into(),
        })?;
        names.push(name);
        tensors.push(r.tensor()?);
        m.push(r.tensor()?);
        v.push(r.tensor()?);
    }
    let params = PolicyParams {
        arch,
        names,
        tensors,
        m,
        v,
        step,
        init_seed,
    };
    // a checkpoint must describe exactly the blocks its arch implies
    let fresh = crate::nn::model::init_params(&params.arch, 0)?;
    if fresh.names != params.names {
        return Err(Error::ArchMismatch(
            "parameter blocks do not match embedded arch config".into(),
        ));
    }
    for (i, t) in params.tensors.iter().enumerate() {
        if t.shape() != fresh.tensors[i].shape() {
            return Err(Error::ArchMismatch(format!(
                "block {} has shape {:?}, arch implies {:?}",
                params.names[i],
                t.shape(),
                fresh.tensors[i].shape()
            )));
        }
    }
    Ok(params)
}

/// Guards consumers that were configured for a specific architecture.
pub fn ensure_arch(params: &PolicyParams, expected: &ArchConfig) -> Result<()> {
    if &params.arch != expected {
        return Err(Error::ArchMismatch(format!(
            "checkpoint arch {:?} != configured arch {:?}",
            params.arch, expected
        )));
    }
    Ok(())
}
