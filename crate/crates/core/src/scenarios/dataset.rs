//! On-disk dataset layout.
//!
//! ```text
//! <dir>/dataset.json          version, scenario config, simulation list
//! <dir>/sim_0000/meta.json    SimulationMeta
//! <dir>/sim_0000/frames.bin   binary frames
//! ```
//!
//! `frames.bin` starts with the 8-byte magic `PLFRAME1` followed by five
//! little-endian `u32`: version, nx, ny, frame count, flags (bit 0 marker,
//! bit 1 force). Each frame then holds, as little-endian `f32`: `u` on
//! `(nx+1)·ny` faces, `v` on `nx·(ny+1)` faces, the marker on `nx·ny` cells
//! if flagged, and the two force channels on `2·nx·ny` cells if flagged.
//! All arrays are row-major with `x` fastest.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ForceParams, ScenarioConfig};
use crate::error::{Error, Result};
use crate::grid::{CenteredGrid, Domain, StaggeredGrid};

pub const DATASET_VERSION: u32 = 1;
pub const FRAME_MAGIC: &[u8; 8] = b"PLFRAME1";
const HEADER_LEN: usize = 8 + 5 * 4;
const FLAG_MARKER: u32 = 1;
const FLAG_FORCE: u32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationMeta {
    pub index: usize,
    pub seed: u64,
    pub nu: f64,
    pub reynolds: Option<f64>,
    pub force: Option<ForceParams>,
    pub frames: usize,
    pub split: Split,
}

/// One stored time step on the fine grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pub velocity: StaggeredGrid,
    pub marker: Option<CenteredGrid>,
    /// Force applied in the step that leaves this frame.
    pub force: Option<CenteredGrid>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Simulation {
    pub meta: SimulationMeta,
    pub frames: Vec<Frame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub config: ScenarioConfig,
    pub simulations: Vec<Simulation>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: ScenarioConfig,
    simulations: Vec<String>,
}

fn sim_dir(index: usize) -> String {
    format!("sim_{index:04}")
}

impl Dataset {
    pub fn train(&self) -> impl Iterator<Item = &Simulation> {
        self.simulations.iter().filter(|s| s.meta.split == Split::Train)
    }

    pub fn validation(&self) -> impl Iterator<Item = &Simulation> {
        self.simulations.iter().filter(|s| s.meta.split == Split::Validation)
    }

    pub fn frame_count(&self) -> usize {
        self.simulations.iter().map(|s| s.frames.len()).sum()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let manifest = Manifest {
            version: DATASET_VERSION,
            config: self.config.clone(),
            simulations: self.simulations.iter().map(|s| sim_dir(s.meta.index)).collect(),
        };
        write_json(&dir.join("dataset.json"), &manifest)?;
        let domain = self.config.fine_domain()?;
        for sim in &self.simulations {
            let sub = dir.join(sim_dir(sim.meta.index));
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            write_json(&sub.join("meta.json"), &sim.meta)?;
            let bytes = encode_frames(&domain, &sim.frames)?;
            let path = sub.join("frames.bin");
            std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = read_json(&dir.join("dataset.json"))?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::config("version", format!("unsupported dataset version {}", manifest.version)));
        }
        manifest.config.validate()?;
        let domain = manifest.config.fine_domain()?;
        let mut simulations = Vec::with_capacity(manifest.simulations.len());
        for name in &manifest.simulations {
            let sub = dir.join(name);
            let meta: SimulationMeta = read_json(&sub.join("meta.json"))?;
            let path = sub.join("frames.bin");
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            let frames = decode_frames(&domain, &bytes)?;
            if frames.len() != meta.frames {
                return Err(Error::FormatError {
                    offset: HEADER_LEN as u64,
                    message: format!("{name}: {} frames stored, metadata says {}", frames.len(), meta.frames),
                });
            }
            simulations.push(Simulation { meta, frames });
        }
        Ok(Self { config: manifest.config, simulations })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("metadata serializes");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::FormatError {
        offset: 0,
        message: format!("{}: {e}", path.display()),
    })
}

fn push_f32(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Serializes frames of one simulation.
pub fn encode_frames(domain: &Domain, frames: &[Frame]) -> Result<Vec<u8>> {
    let flags = frames.first().map_or(0, |f| {
        (if f.marker.is_some() { FLAG_MARKER } else { 0 }) | (if f.force.is_some() { FLAG_FORCE } else { 0 })
    });
    let mut out = Vec::with_capacity(HEADER_LEN + frames.len() * frame_len(domain, flags));
    out.extend_from_slice(FRAME_MAGIC);
    for h in [DATASET_VERSION, domain.nx as u32, domain.ny as u32, frames.len() as u32, flags] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    for (k, f) in frames.iter().enumerate() {
        if (f.velocity.nx, f.velocity.ny) != (domain.nx, domain.ny)
            || f.marker.is_some() != (flags & FLAG_MARKER != 0)
            || f.force.is_some() != (flags & FLAG_FORCE != 0)
        {
            return Err(Error::InvalidShape(format!("frame {k} does not match the layout of frame 0")));
        }
        push_f32(&mut out, &f.velocity.u);
        push_f32(&mut out, &f.velocity.v);
        if let Some(m) = &f.marker {
            push_f32(&mut out, &m.data);
        }
        if let Some(g) = &f.force {
            push_f32(&mut out, &g.data);
        }
    }
    Ok(out)
}

fn frame_len(domain: &Domain, flags: u32) -> usize {
    let (nx, ny) = (domain.nx, domain.ny);
    let mut n = (nx + 1) * ny + nx * (ny + 1);
    if flags & FLAG_MARKER != 0 {
        n += nx * ny;
    }
    if flags & FLAG_FORCE != 0 {
        n += 2 * nx * ny;
    }
    4 * n
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::FormatError {
                offset: self.bytes.len() as u64,
                message: format!("truncated {what}: need {n} bytes at {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn floats(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let start = self.pos;
        let raw = self.take(4 * n, what)?;
        let out: Vec<f64> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
        if let Some(k) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::FormatError { offset: (start + 4 * k) as u64, message: format!("non-finite {what}") });
        }
        Ok(out)
    }
}

/// Parses `frames.bin` for a simulation on `domain`.
pub fn decode_frames(domain: &Domain, bytes: &[u8]) -> Result<Vec<Frame>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != FRAME_MAGIC {
        return Err(Error::FormatError { offset: 0, message: "bad magic".into() });
    }
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::FormatError { offset: 8, message: format!("unsupported version {version}") });
    }
    let (nx, ny) = (r.u32("nx")? as usize, r.u32("ny")? as usize);
    if (nx, ny) != (domain.nx, domain.ny) {
        return Err(Error::FormatError {
            offset: 12,
            message: format!("grid {nx}x{ny}, expected {}x{}", domain.nx, domain.ny),
        });
    }
    let count = r.u32("frame count")? as usize;
    let flags = r.u32("flags")?;
    if flags & !(FLAG_MARKER | FLAG_FORCE) != 0 {
        return Err(Error::FormatError { offset: 24, message: format!("unknown flags {flags:#x}") });
    }
    let cells = nx * ny;
    let mut frames = Vec::with_capacity(count);
    for k in 0..count {
        let u = r.floats((nx + 1) * ny, &format!("u of frame {k}"))?;
        let v = r.floats(nx * (ny + 1), &format!("v of frame {k}"))?;
        let velocity = StaggeredGrid::from_parts(domain, u, v)?;
        let marker = if flags & FLAG_MARKER != 0 {
            Some(CenteredGrid::from_data(domain, 1, r.floats(cells, &format!("marker of frame {k}"))?)?)
        } else {
            None
        };
        let force = if flags & FLAG_FORCE != 0 {
            Some(CenteredGrid::from_data(domain, 2, r.floats(2 * cells, &format!("force of frame {k}"))?)?)
        } else {
            None
        };
        frames.push(Frame { velocity, marker, force });
    }
    if r.pos != bytes.len() {
        return Err(Error::FormatError { offset: r.pos as u64, message: "trailing bytes".into() });
    }
    Ok(frames)
}
