//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! "SSGN" | u32 version | u32 tensor count
//! per tensor: u16 name len | name | u8 rank | u64 dims[rank] | u8 dtype (0 = f32) | payload
//! u64 iteration
//! u32 state len | state block
//! ```
//!
//! The state block holds the two ADAM step counters, the named rng streams,
//! the sampler position and the TOML echo of the experiment config.

use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::{RandomSource, RNG_STATE_BYTES};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SSGN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: IndexMap<String, Tensor<f32>>,
    pub iteration: u64,
    pub state: RunState,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunState {
    pub adam_g_t: u64,
    pub adam_d_t: u64,
    pub rngs: Vec<(String, RandomSource)>,
    pub sampler_order: Vec<usize>,
    pub sampler_cursor: usize,
    /// TOML of the `ExperimentConfig` that produced the run.
    pub config: String,
}

impl RunState {
    pub fn rng(&self, name: &str) -> Result<RandomSource> {
        self.rngs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r.clone())
            .ok_or_else(|| Error::Checkpoint { field: format!("rng.{name}"), msg: "missing".into() })
    }
}

fn put_str16(out: &mut Vec<u8>, s: &str, field: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::Checkpoint { field: field.into(), msg: "name longer than 65535 bytes".into() })?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

impl RunState {
    fn encode(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(&self.adam_g_t.to_le_bytes());
        b.extend_from_slice(&self.adam_d_t.to_le_bytes());
        b.extend_from_slice(&(self.rngs.len() as u32).to_le_bytes());
        for (name, rng) in &self.rngs {
            put_str16(&mut b, name, "rng name")?;
            b.extend_from_slice(&rng.state_bytes());
        }
        b.extend_from_slice(&(self.sampler_order.len() as u64).to_le_bytes());
        for &o in &self.sampler_order {
            b.extend_from_slice(&(o as u64).to_le_bytes());
        }
        b.extend_from_slice(&(self.sampler_cursor as u64).to_le_bytes());
        b.extend_from_slice(&(self.config.len() as u32).to_le_bytes());
        b.extend_from_slice(self.config.as_bytes());
        Ok(b)
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let adam_g_t = r.u64("state.adam_g_t")?;
        let adam_d_t = r.u64("state.adam_d_t")?;
        let n = r.u32("state.rng_count")?;
        let mut rngs = Vec::new();
        for _ in 0..n {
            let name = r.str16("state.rng_name")?;
            let rng = RandomSource::from_state_bytes(r.take(RNG_STATE_BYTES, &format!("state.rng.{name}"))?)?;
            rngs.push((name, rng));
        }
        let len = r.u64("state.sampler_len")? as usize;
        if len > bytes.len() / 8 {
            return Err(Error::Checkpoint { field: "state.sampler_len".into(), msg: format!("{len} exceeds the state block") });
        }
        let sampler_order = (0..len).map(|_| r.u64("state.sampler_order").map(|v| v as usize)).collect::<Result<_>>()?;
        let sampler_cursor = r.u64("state.sampler_cursor")? as usize;
        let clen = r.u32("state.config_len")? as usize;
        let config = String::from_utf8(r.take(clen, "state.config")?.to_vec())
            .map_err(|_| Error::Checkpoint { field: "state.config".into(), msg: "not UTF-8".into() })?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint { field: "state".into(), msg: "trailing bytes".into() });
        }
        Ok(Self { adam_g_t, adam_d_t, rngs, sampler_order, sampler_cursor, config })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint {
            field: field.to_string(),
            msg: format!("truncated: need {n} bytes at offset {}, file has {}", self.pos, self.buf.len()),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, field: &str) -> Result<u8> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, field)?.try_into().unwrap()))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }

    fn str16(&mut self, field: &str) -> Result<String> {
        let n = self.u16(field)? as usize;
        String::from_utf8(self.take(n, field)?.to_vec())
            .map_err(|_| Error::Checkpoint { field: field.to_string(), msg: "not UTF-8".into() })
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            put_str16(&mut b, name, "tensor name")?;
            b.push(t.rank() as u8);
            for &d in t.shape() {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            b.push(f32::DTYPE_CODE);
            for &v in t.data() {
                v.write_le(&mut b);
            }
        }
        b.extend_from_slice(&self.iteration.to_le_bytes());
        let state = self.state.encode()?;
        b.extend_from_slice(&(state.len() as u32).to_le_bytes());
        b.extend_from_slice(&state);
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint { field: "magic".into(), msg: "not an SSGN checkpoint".into() });
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint { field: "version".into(), msg: format!("unsupported version {version}, expected {VERSION}") });
        }
        let count = r.u32("tensor_count")?;
        let mut tensors = IndexMap::new();
        for i in 0..count {
            let name = r.str16(&format!("tensor[{i}].name"))?;
            let rank = r.u8(&format!("{name}.rank"))? as usize;
            let dims = (0..rank).map(|_| r.u64(&format!("{name}.dims")).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let dtype = r.u8(&format!("{name}.dtype"))?;
            if dtype != f32::DTYPE_CODE {
                return Err(Error::Checkpoint { field: format!("{name}.dtype"), msg: format!("unsupported dtype code {dtype}") });
            }
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n > 0 && n <= bytes.len())
                .ok_or_else(|| Error::Checkpoint { field: format!("{name}.dims"), msg: format!("implausible shape {dims:?}") })?;
            let payload = r.take(n * f32::BYTES, &format!("{name}.payload"))?;
            let data = payload.chunks_exact(f32::BYTES).map(f32::read_le).collect();
            let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint { field: format!("{name}.dims"), msg: e.to_string() })?;
            if tensors.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint { field: name, msg: "duplicate tensor".into() });
            }
        }
        let iteration = r.u64("iteration")?;
        let slen = r.u32("state_len")? as usize;
        let state = RunState::decode(r.take(slen, "state")?)?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint { field: "trailer".into(), msg: format!("{} unexpected trailing bytes", bytes.len() - r.pos) });
        }
        Ok(Self { tensors, iteration, state })
    }

    /// Writes through a temporary sibling and renames, so a crash never
    /// leaves a half-written checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::ParamMismatch { name: name.to_string(), msg: "missing from checkpoint".into() })
    }
}
