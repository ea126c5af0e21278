//! In-memory event grids and the `NWC1` grid file format.
//!
//! Layout: magic `NWC1` | u32 LE `T, Z, Y, X, V` | `V` NUL-terminated ASCII
//! variable names | `T*V*Z*Y*X` f32 LE values nested in that order.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{NowcastError, Result};

pub const GRID_MAGIC: &[u8; 4] = b"NWC1";
pub const FRAME_INTERVAL_MINUTES: u32 = 15;
const MAX_NAME_LEN: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridDims {
    pub frames: usize,
    pub levels: usize,
    pub ny: usize,
    pub nx: usize,
}

impl GridDims {
    pub fn field_len(&self) -> usize {
        self.levels * self.ny * self.nx
    }
}

/// Time-ordered stack of 3D fields for one event, frames 15 minutes apart.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSequence {
    pub event_id: String,
    dims: GridDims,
    variables: Vec<String>,
    data: Vec<f32>,
}

impl GridSequence {
    pub fn new(event_id: impl Into<String>, dims: GridDims, variables: Vec<String>, data: Vec<f32>) -> Result<Self> {
        if dims.frames == 0 || dims.levels == 0 || dims.ny == 0 || dims.nx == 0 {
            return Err(NowcastError::Config(format!("grid extents must be positive: {dims:?}")));
        }
        if variables.is_empty() {
            return Err(NowcastError::Config("grid needs at least one variable".into()));
        }
        let expect = dims.frames * variables.len() * dims.field_len();
        if data.len() != expect {
            return Err(NowcastError::dim("grid payload", expect, data.len()));
        }
        Ok(GridSequence {
            event_id: event_id.into(),
            dims,
            variables,
            data,
        })
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn variables(&self) -> &[String] {
        &self.variables
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v == name)
    }

    /// The `[z][y][x]` field of variable `var` at frame `t`.
    pub fn field(&self, t: usize, var: usize) -> &[f32] {
        let n = self.dims.field_len();
        let start = (t * self.variables.len() + var) * n;
        &self.data[start..start + n]
    }

    pub fn field_mut(&mut self, t: usize, var: usize) -> &mut [f32] {
        let n = self.dims.field_len();
        let start = (t * self.variables.len() + var) * n;
        &mut self.data[start..start + n]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Column maximum over levels of variable `var` at frame `t`, as `[y][x]`.
    pub fn composite(&self, t: usize, var: usize) -> Vec<f32> {
        let plane = self.dims.ny * self.dims.nx;
        let field = self.field(t, var);
        let mut out = field[..plane].to_vec();
        for level in field.chunks(plane).skip(1) {
            for (o, v) in out.iter_mut().zip(level) {
                *o = o.max(*v);
            }
        }
        out
    }
}

pub fn write_grid(seq: &GridSequence, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(GRID_MAGIC)?;
    let d = seq.dims;
    for v in [d.frames, d.levels, d.ny, d.nx, seq.variables.len()] {
        out.write_all(&(v as u32).to_le_bytes())?;
    }
    for name in &seq.variables {
        out.write_all(name.as_bytes())?;
        out.write_all(&[0])?;
    }
    for v in &seq.data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a grid file; the event id is the file stem.
pub fn read_grid(path: &Path) -> Result<GridSequence> {
    let bytes = fs::read(path)?;
    let event_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_grid(&bytes, event_id)
}

pub fn parse_grid(bytes: &[u8], event_id: String) -> Result<GridSequence> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != GRID_MAGIC {
        return Err(NowcastError::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected NWC1"),
        });
    }
    let mut header = [0usize; 5];
    for h in &mut header {
        *h = cur.u32()? as usize;
    }
    let [frames, levels, ny, nx, nvars] = header;
    if let Some(i) = header.iter().position(|&v| v == 0) {
        return Err(NowcastError::Format {
            offset: 4 + 4 * i as u64,
            message: "zero extent in header".into(),
        });
    }
    let mut variables = Vec::with_capacity(nvars.min(16));
    for _ in 0..nvars {
        let start = cur.pos;
        let rest = &bytes[start.min(bytes.len())..];
        let Some(len) = rest.iter().take(MAX_NAME_LEN + 1).position(|&b| b == 0) else {
            if rest.len() <= MAX_NAME_LEN {
                return Err(NowcastError::Truncated {
                    offset: start as u64,
                    needed: rest.len() as u64 + 1,
                    available: rest.len() as u64,
                });
            }
            return Err(NowcastError::Format {
                offset: start as u64,
                message: format!("variable name longer than {MAX_NAME_LEN} bytes"),
            });
        };
        let name = &rest[..len];
        if !name.is_ascii() || name.is_empty() {
            return Err(NowcastError::Format {
                offset: start as u64,
                message: "variable name must be non-empty ASCII".into(),
            });
        }
        variables.push(String::from_utf8_lossy(name).into_owned());
        cur.pos += len + 1;
    }
    let count = [frames, nvars, levels, ny, nx]
        .iter()
        .try_fold(1usize, |acc, &v| acc.checked_mul(v))
        .and_then(|c| c.checked_mul(4).map(|b| (c, b)));
    let Some((count, payload_bytes)) = count else {
        return Err(NowcastError::Format {
            offset: 4,
            message: "header dimensions overflow the payload size".into(),
        });
    };
    let payload = cur.take(payload_bytes)?;
    if cur.pos != bytes.len() {
        return Err(NowcastError::Format {
            offset: cur.pos as u64,
            message: format!("{} trailing bytes after payload", bytes.len() - cur.pos),
        });
    }
    let mut data = Vec::with_capacity(count);
    data.extend(
        payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])),
    );
    GridSequence::new(
        event_id,
        GridDims {
            frames,
            levels,
            ny,
            nx,
        },
        variables,
        data,
    )
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len().saturating_sub(self.pos);
        if n > available {
            return Err(NowcastError::Truncated {
                offset: self.pos as u64,
                needed: n as u64,
                available: available as u64,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
