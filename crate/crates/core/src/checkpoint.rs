//! `MFCK` checkpoints: named MFT1 tensors plus an optional Adam block.
//!
//! ```text
//! "MFCK" u32 count { u16 name_len, name, MFT1 tensor }*
//! [ "ADAM" u64 step u32 count { u16 name_len, "m/<name>" | "v/<name>", MFT1 }* ]
//! ```
//! All integers little-endian.

use std::io::Read;
use std::path::Path;

use crate::adam::AdamState;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"MFCK";
const ADAM_MAGIC: &[u8; 4] = b"ADAM";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Option<AdamState>,
}

fn put_name(out: &mut Vec<u8>, name: &str) -> Result<()> {
    let len = u16::try_from(name.len())
        .map_err(|_| Error::invalid("checkpoint", format!("name {name:?} longer than 65535 bytes")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    t.write_mft1(out).expect("writing to a Vec cannot fail");
}

fn bad(detail: impl Into<String>) -> Error {
    Error::format("MFCK checkpoint", detail)
}

fn take<const N: usize>(r: &mut &[u8]) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
    Ok(b)
}

fn take_name(r: &mut &[u8]) -> Result<String> {
    let len = u16::from_le_bytes(take::<2>(r)?) as usize;
    if r.len() < len {
        return Err(bad("truncated name"));
    }
    let (name, rest) = r.split_at(len);
    *r = rest;
    String::from_utf8(name.to_vec()).map_err(|_| bad("name is not UTF-8"))
}

impl Checkpoint {
    pub fn to_bytes(params: &ParamStore, adam: Option<&AdamState>) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params.iter() {
            put_name(&mut out, name)?;
            put_tensor(&mut out, t);
        }
        if let Some(st) = adam {
            if st.m.len() != params.len() || st.v.len() != params.len() {
                return Err(Error::shape("checkpoint", "optimizer state does not match parameters"));
            }
            out.extend_from_slice(ADAM_MAGIC);
            out.extend_from_slice(&st.step.to_le_bytes());
            out.extend_from_slice(&(2 * params.len() as u32).to_le_bytes());
            for (prefix, moments) in [("m", &st.m), ("v", &st.v)] {
                for ((name, _), t) in params.iter().zip(moments) {
                    put_name(&mut out, &format!("{prefix}/{name}"))?;
                    put_tensor(&mut out, t);
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = bytes;
        if &take::<4>(&mut r)? != MAGIC {
            return Err(bad("bad magic"));
        }
        let count = u32::from_le_bytes(take::<4>(&mut r)?) as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let name = take_name(&mut r)?;
            let t = Tensor::read_mft1(&mut r)?;
            params
                .insert(name.clone(), t)
                .map_err(|_| bad(format!("duplicate tensor {name:?}")))?;
        }
        let adam = if r.is_empty() {
            None
        } else {
            if &take::<4>(&mut r)? != ADAM_MAGIC {
                return Err(bad("unknown trailing block"));
            }
            let step = u64::from_le_bytes(take::<8>(&mut r)?);
            let n = u32::from_le_bytes(take::<4>(&mut r)?) as usize;
            if n != 2 * params.len() {
                return Err(bad(format!("optimizer block has {n} tensors, expected {}", 2 * params.len())));
            }
            let mut m = Vec::with_capacity(params.len());
            let mut v = Vec::with_capacity(params.len());
            for k in 0..n {
                let name = take_name(&mut r)?;
                let t = Tensor::read_mft1(&mut r)?;
                let (prefix, dst) = if k < params.len() { ("m", &mut m) } else { ("v", &mut v) };
                let (pname, pt) = params.iter().nth(k % params.len()).expect("index in range");
                if name != format!("{prefix}/{pname}") || t.dims() != pt.dims() {
                    return Err(bad(format!("unexpected optimizer tensor {name:?}")));
                }
                dst.push(t);
            }
            if !r.is_empty() {
                return Err(bad(format!("{} trailing bytes", r.len())));
            }
            Some(AdamState { m, v, step })
        };
        Ok(Checkpoint { params, adam })
    }

    pub fn save(path: &Path, params: &ParamStore, adam: Option<&AdamState>) -> Result<()> {
        let bytes = Self::to_bytes(params, adam)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
