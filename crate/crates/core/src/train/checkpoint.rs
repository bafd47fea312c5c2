//! Versioned little-endian checkpoint format.
//!
//! ```text
//! "KDF1" | version u32 | tensor count u32 |
//!   per tensor: name len u32, name bytes, rank u32, dims u32 x rank, f32 data |
//! state: kind len u32, kind bytes, epoch u32, step u64, seed u64,
//!        best accuracy f32, best loss f32
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"KDF1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingState {
    /// Network kind the tensors belong to (`student` or `teacher`).
    pub network: String,
    pub epoch: u32,
    pub step: u64,
    /// Run seed; together with `epoch` it fixes every later random draw.
    pub seed: u64,
    pub best_accuracy: f32,
    pub best_loss: f32,
}

impl Default for TrainingState {
    fn default() -> Self {
        Self {
            network: String::new(),
            epoch: 0,
            step: 0,
            seed: 0,
            best_accuracy: 0.0,
            best_loss: f32::INFINITY,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
    pub state: TrainingState,
}

impl CheckpointRecord {
    pub fn new(tensors: Vec<(String, Tensor)>, state: TrainingState) -> Self {
        Self {
            version: FORMAT_VERSION,
            tensors,
            state,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (n, _) in &self.tensors {
            if !seen.insert(n.as_str()) {
                return Err(Error::Load(format!("duplicate tensor name {n}")));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.check_unique()?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, self.version);
        put_u32(&mut out, len_u32(self.tensors.len())?);
        for (name, t) in &self.tensors {
            put_str(&mut out, name)?;
            put_u32(&mut out, len_u32(t.rank())?);
            for &d in t.shape() {
                put_u32(&mut out, len_u32(d)?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let s = &self.state;
        put_str(&mut out, &s.network)?;
        put_u32(&mut out, s.epoch);
        out.extend_from_slice(&s.step.to_le_bytes());
        out.extend_from_slice(&s.seed.to_le_bytes());
        out.extend_from_slice(&s.best_accuracy.to_le_bytes());
        out.extend_from_slice(&s.best_loss.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::Format("missing KDF1 magic".into()));
        }
        let mut r = Reader { buf: bytes, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Load(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let mut dims = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                dims.push(r.u32()? as usize);
            }
            let numel = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Load(format!("tensor {name} has overflowing shape")))?;
            let raw = r.take(
                numel
                    .checked_mul(4)
                    .ok_or_else(|| Error::Load("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(&dims, data).map_err(|e| Error::Load(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let network = r.string()?;
        let epoch = r.u32()?;
        let step = r.u64()?;
        let seed = r.u64()?;
        let best_accuracy = r.f32()?;
        let best_loss = r.f32()?;
        if r.pos != bytes.len() {
            return Err(Error::Load(format!(
                "{} trailing bytes after training state",
                bytes.len() - r.pos
            )));
        }
        let rec = Self {
            version,
            tensors,
            state: TrainingState {
                network,
                epoch,
                step,
                seed,
                best_accuracy,
                best_loss,
            },
        };
        rec.check_unique()?;
        Ok(rec)
    }
}

pub fn save_checkpoint(record: &CheckpointRecord, path: &Path) -> Result<()> {
    let bytes = record.to_bytes()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CheckpointRecord> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    CheckpointRecord::from_bytes(&bytes)
}

fn len_u32(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("length {n} does not fit in u32")))
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, len_u32(s.len())?);
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Load(format!(
                "truncated checkpoint: need {n} bytes at offset {}, have {}",
                self.pos,
                self.buf.len() - self.pos
            ))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_bits(self.u32()?))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| Error::Load("tensor name is not UTF-8".into()))
    }
}
