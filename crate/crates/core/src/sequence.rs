//! Reconstructed sequences and their binary checkpoint format.
//!
//! ```text
//! "SFPH"  u32 version  u64 T  T x u64 surfel count
//! per frame, per surfel:
//!     position 3xf64, scale 2xf64, rotation 4xf64 (w,x,y,z), color 3xf64,
//!     sdf f64, bubble_id i32 (-1 = unassigned)
//! gamma f64, dt f64
//! u64 rows, then per row: u64 t, u32 bubble_id, velocity 3xf64
//! u64 n, then n surfel records: the frame-0 seed
//! ```
//! All little endian. The velocity rows are the per-bubble guidance
//! velocities used to advect into frame t.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{Vector2, Vector3, Vector4};

use crate::bubbles::{estimate_velocities, VelocityEstimate};
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_bytes};
use crate::surfel::{BubbleId, Surfel};

const MAGIC: &[u8; 4] = b"SFPH";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSequence {
    pub frames: Vec<Vec<Surfel>>,
    pub gamma: f64,
    pub dt: f64,
    /// Per frame, the bubble velocities used to initialize it (empty at 0).
    pub guidance: Vec<BTreeMap<u32, Vector3<f64>>>,
    /// Surfels as seeded before the first frame was optimized.
    pub initial: Vec<Surfel>,
}

impl SceneSequence {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::InvalidConfig(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidConfig(format!("dt must be positive, got {}", self.dt)));
        }
        for t in 1..self.frames.len() {
            if self.frames[t].len() != self.frames[t - 1].len() {
                return Err(Error::FrameMismatch(format!(
                    "frame {} has {} surfels, frame {t} has {}",
                    t - 1,
                    self.frames[t - 1].len(),
                    self.frames[t].len()
                )));
            }
        }
        Ok(())
    }

    pub fn velocities(&self) -> Result<VelocityEstimate> {
        estimate_velocities(&self.frames, self.gamma, self.dt)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.frames.len() as u64).to_le_bytes());
        for f in &self.frames {
            out.extend_from_slice(&(f.len() as u64).to_le_bytes());
        }
        for f in &self.frames {
            for s in f {
                put_surfel(&mut out, s);
            }
        }
        out.extend_from_slice(&self.gamma.to_le_bytes());
        out.extend_from_slice(&self.dt.to_le_bytes());
        let rows: usize = self.guidance.iter().map(BTreeMap::len).sum();
        out.extend_from_slice(&(rows as u64).to_le_bytes());
        for (t, row) in self.guidance.iter().enumerate() {
            for (id, v) in row {
                out.extend_from_slice(&(t as u64).to_le_bytes());
                out.extend_from_slice(&id.to_le_bytes());
                for x in v.iter() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        out.extend_from_slice(&(self.initial.len() as u64).to_le_bytes());
        for s in &self.initial {
            put_surfel(&mut out, s);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            return Err(r.bad("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.bad(format!("unsupported version {version}")));
        }
        let t = r.u64()? as usize;
        let counts: Vec<usize> = (0..t).map(|_| r.u64().map(|c| c as usize)).collect::<Result<_>>()?;
        let mut frames = Vec::with_capacity(t);
        for &n in &counts {
            frames.push((0..n).map(|_| r.surfel()).collect::<Result<Vec<_>>>()?);
        }
        let gamma = r.f64()?;
        let dt = r.f64()?;
        let rows = r.u64()? as usize;
        let mut guidance = vec![BTreeMap::new(); t];
        for _ in 0..rows {
            let ft = r.u64()? as usize;
            let id = r.u32()?;
            let v = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
            guidance.get_mut(ft).ok_or_else(|| r.bad(format!("velocity row for frame {ft} of {t}")))?.insert(id, v);
        }
        let n = r.u64()? as usize;
        let initial = (0..n).map(|_| r.surfel()).collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(r.bad("trailing bytes"));
        }
        let seq = Self { frames, gamma, dt, guidance, initial };
        seq.validate()?;
        Ok(seq)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_bytes(path)?, path)
    }
}

fn put_surfel(out: &mut Vec<u8>, s: &Surfel) {
    let values = s
        .position
        .iter()
        .chain(s.scale.iter())
        .chain(s.rotation.iter())
        .chain(s.color.iter())
        .chain(std::iter::once(&s.sdf));
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&s.bubble.to_i32().to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn bad(&self, reason: impl ToString) -> Error {
        Error::format("checkpoint", self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.bad("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn surfel(&mut self) -> Result<Surfel> {
        let mut v = [0.0; 13];
        for x in &mut v {
            *x = self.f64()?;
        }
        let id = i32::from_le_bytes(self.take(4)?.try_into().unwrap());
        // stored values are taken verbatim (no renormalization)
        let mut s = Surfel::new(
            Vector3::new(v[0], v[1], v[2]),
            Vector2::new(v[3], v[4]),
            Vector4::new(v[5], v[6], v[7], v[8]),
            Vector3::new(v[9], v[10], v[11]),
            v[12],
        )
        .map_err(|e| self.bad(e))?;
        s.rotation = Vector4::new(v[5], v[6], v[7], v[8]);
        s.bubble = BubbleId::from_i32(id);
        Ok(s)
    }
}
