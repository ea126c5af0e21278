//! The `NWS1` sample-set file.
//!
//! Layout: magic `NWS1` | u32 LE record count | per record six u32 LE
//! metadata words `(event, frame, row, col, label, flags)` followed by
//! `BLOCK_LEN` f32 LE block values.
//!
//! Records are unique blocks in key order. Labeled samples are the records
//! without the context flag; their `t−1` and `t−2` blocks are present either as
//! labeled records or as context-only records carrying label 0.
//!
//! Flag bits: 0 shifted (oversampled) window, 1 context only, 8..16 `dy` as
//! i8, 16..24 `dx` as i8.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{assemble_block, BlockKey, Normalizer, SampleMeta, BLOCK_LEN, STEPS};
use crate::error::{NowcastError, Result};
use crate::synth::{Cursor, GridSequence};

pub const SAMPLE_MAGIC: &[u8; 4] = b"NWS1";
const HEADER_LEN: u64 = 8;
const META_LEN: usize = 24;
const RECORD_LEN: u64 = META_LEN as u64 + 4 * BLOCK_LEN as u64;
const FLAG_SHIFTED: u32 = 1;
const FLAG_CONTEXT: u32 = 2;
const WRITE_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub meta: SampleMeta,
    pub context_only: bool,
}

impl SampleRecord {
    fn encode(&self) -> [u8; META_LEN] {
        let k = self.meta.key;
        let mut flags = (k.dy as u8 as u32) << 8 | (k.dx as u8 as u32) << 16;
        if self.meta.oversampled {
            flags |= FLAG_SHIFTED;
        }
        if self.context_only {
            flags |= FLAG_CONTEXT;
        }
        let mut out = [0u8; META_LEN];
        for (i, w) in [k.event, k.frame, k.row, k.col, self.meta.label as u32, flags]
            .into_iter()
            .enumerate()
        {
            out[4 * i..4 * i + 4].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    fn decode(bytes: &[u8], offset: u64) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let mut w = [0u32; 6];
        for v in &mut w {
            *v = cur.u32()?;
        }
        let [event, frame, row, col, label, flags] = w;
        if label > 1 {
            return Err(NowcastError::Format {
                offset: offset + 16,
                message: format!("label {label} is not 0 or 1"),
            });
        }
        Ok(SampleRecord {
            meta: SampleMeta {
                key: BlockKey {
                    event,
                    frame,
                    row,
                    col,
                    dy: (flags >> 8) as u8 as i8,
                    dx: (flags >> 16) as u8 as i8,
                },
                label: label as u8,
                oversampled: flags & FLAG_SHIFTED != 0,
            },
            context_only: flags & FLAG_CONTEXT != 0,
        })
    }
}

/// Writes `samples` and their history blocks. `events[i]` backs event index `i`.
/// Returns the number of records written.
pub fn write_sample_set(
    path: &Path,
    samples: &[SampleMeta],
    events: &[GridSequence],
    norm: &Normalizer,
) -> Result<usize> {
    let mut records: BTreeMap<BlockKey, SampleRecord> = BTreeMap::new();
    for s in samples {
        if (s.key.frame as usize) < STEPS {
            return Err(NowcastError::InsufficientHistory(format!(
                "sample {:?} lacks history frames",
                s.key
            )));
        }
        if records.insert(s.key, SampleRecord { meta: *s, context_only: false }).is_some_and(|r| !r.context_only) {
            return Err(NowcastError::Data(format!("duplicate sample {:?}", s.key)));
        }
        for key in &s.key.history()[..STEPS - 1] {
            records.entry(*key).or_insert(SampleRecord {
                meta: SampleMeta {
                    key: *key,
                    label: 0,
                    oversampled: s.oversampled,
                },
                context_only: true,
            });
        }
    }
    let records: Vec<SampleRecord> = records.into_values().collect();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(SAMPLE_MAGIC)?;
    out.write_all(&(records.len() as u32).to_le_bytes())?;
    for chunk in records.chunks(WRITE_CHUNK) {
        let blocks = chunk
            .par_iter()
            .map(|r| {
                let seq = events.get(r.meta.key.event as usize).ok_or_else(|| {
                    NowcastError::Data(format!("sample refers to missing event {}", r.meta.key.event))
                })?;
                assemble_block(seq, norm, r.meta.key)
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, block) in chunk.iter().zip(blocks) {
            out.write_all(&r.encode())?;
            let mut bytes = Vec::with_capacity(4 * BLOCK_LEN);
            for v in block {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&bytes)?;
        }
    }
    out.flush()?;
    Ok(records.len())
}

/// A labeled sample with the record indices of its `t−2, t−1, t` blocks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub meta: SampleMeta,
    pub blocks: [usize; STEPS],
}

/// Random-access reader that keeps only metadata in memory.
#[derive(Debug)]
pub struct SampleFile {
    path: PathBuf,
    file: File,
    records: Vec<SampleRecord>,
}

impl SampleFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path)?;
        let len = file.metadata()?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        read_at(&mut file, 0, &mut header, len)?;
        if &header[..4] != SAMPLE_MAGIC {
            return Err(NowcastError::Format {
                offset: 0,
                message: format!("bad magic {:?}, expected NWS1", &header[..4]),
            });
        }
        let count = u32::from_le_bytes([header[4], header[5], header[6], header[7]]) as u64;
        let expect = HEADER_LEN + count * RECORD_LEN;
        if len < expect {
            return Err(NowcastError::Truncated {
                offset: HEADER_LEN,
                needed: expect - HEADER_LEN,
                available: len - HEADER_LEN,
            });
        }
        if len > expect {
            return Err(NowcastError::Format {
                offset: expect,
                message: format!("{} trailing bytes after {count} records", len - expect),
            });
        }
        let mut records = Vec::with_capacity(count as usize);
        let mut meta = [0u8; META_LEN];
        for i in 0..count {
            let offset = HEADER_LEN + i * RECORD_LEN;
            read_at(&mut file, offset, &mut meta, len)?;
            records.push(SampleRecord::decode(&meta, offset)?);
        }
        Ok(SampleFile {
            path: path.to_path_buf(),
            file,
            records,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn records(&self) -> &[SampleRecord] {
        &self.records
    }

    /// Labeled samples in file order with their history resolved.
    pub fn labeled(&self) -> Result<Vec<LabeledSample>> {
        let index: HashMap<BlockKey, usize> =
            self.records.iter().enumerate().map(|(i, r)| (r.meta.key, i)).collect();
        self.records
            .iter()
            .enumerate()
            .filter(|(_, r)| !r.context_only)
            .map(|(i, r)| {
                let h = r.meta.key.history();
                let find = |k: &BlockKey| {
                    index.get(k).copied().ok_or_else(|| {
                        NowcastError::Data(format!("{}: missing history block {k:?}", self.path.display()))
                    })
                };
                Ok(LabeledSample {
                    meta: r.meta,
                    blocks: [find(&h[0])?, find(&h[1])?, i],
                })
            })
            .collect()
    }

    pub fn read_block(&mut self, record: usize) -> Result<Vec<f32>> {
        if record >= self.records.len() {
            return Err(NowcastError::Usage(format!(
                "record {record} out of range ({} records)",
                self.records.len()
            )));
        }
        let offset = HEADER_LEN + record as u64 * RECORD_LEN + META_LEN as u64;
        let mut bytes = vec![0u8; 4 * BLOCK_LEN];
        let len = self.file.metadata()?.len();
        read_at(&mut self.file, offset, &mut bytes, len)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }
}

fn read_at(file: &mut File, offset: u64, buf: &mut [u8], len: u64) -> Result<()> {
    if offset + buf.len() as u64 > len {
        return Err(NowcastError::Truncated {
            offset,
            needed: buf.len() as u64,
            available: len.saturating_sub(offset),
        });
    }
    file.seek(SeekFrom::Start(offset))?;
    file.read_exact(buf)?;
    Ok(())
}

/// Reads every record and block into memory.
pub fn read_sample_set(path: &Path) -> Result<Vec<(SampleRecord, Vec<f32>)>> {
    let mut f = SampleFile::open(path)?;
    (0..f.records.len())
        .map(|i| Ok((f.records[i], f.read_block(i)?)))
        .collect()
}
