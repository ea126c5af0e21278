//! The `NWM1` model file.
//!
//! Layout: magic `NWM1` | u32 LE version | u32 LE length + UTF-8 JSON echo |
//! u32 LE section count | sections | u32 LE CRC32 of every preceding byte.
//! A section is u32 name length, name bytes, u32 rank, rank × u32 extents and
//! the f64 LE values.
//!
//! Sections hold every parameter under its own name, batch-norm running
//! statistics as `bn{l}.running_mean` / `bn{l}.running_var`, and the
//! normalizer extrema as `normalizer.min` / `normalizer.max`, so all numbers
//! round-trip bit-exactly.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelEcho, NowcastModel};
use crate::error::{NowcastError, Result};
use crate::pipeline::Normalizer;
use crate::synth::Cursor;
use crate::tensor::{BnState, Param, Tensor};

pub const MODEL_MAGIC: &[u8; 4] = b"NWM1";
pub const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    normalizer_variables: Vec<String>,
    echo: ModelEcho,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_section(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f64]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len() as u32);
    for &d in shape {
        put_u32(out, d as u32);
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_model(model: &NowcastModel) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        model: model.config.clone(),
        normalizer_variables: model.normalizer.variables.clone(),
        echo: model.echo.clone(),
    })
    .map_err(|e| NowcastError::Data(format!("model header: {e}")))?;
    let mut out = MODEL_MAGIC.to_vec();
    put_u32(&mut out, MODEL_VERSION);
    put_u32(&mut out, header.len() as u32);
    out.extend_from_slice(&header);
    let sections = model.params.len() + 2 * model.bn.len() + 2;
    put_u32(&mut out, sections as u32);
    for p in &model.params {
        put_section(&mut out, &p.name, p.value.shape(), p.value.values());
    }
    for (i, bn) in model.bn.iter().enumerate() {
        let l = i + 1;
        put_section(&mut out, &format!("bn{l}.running_mean"), &[bn.channels()], &bn.running_mean);
        put_section(&mut out, &format!("bn{l}.running_var"), &[bn.channels()], &bn.running_var);
    }
    let n = model.normalizer.min.len();
    put_section(&mut out, "normalizer.min", &[n], &model.normalizer.min);
    put_section(&mut out, "normalizer.max", &[n], &model.normalizer.max);
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    Ok(out)
}

/// Writes through a temporary sibling so a crash never leaves a partial model.
pub fn save_model(model: &NowcastModel, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<NowcastModel> {
    decode_model(&fs::read(path)?)
}

fn format_err(offset: usize, message: impl Into<String>) -> NowcastError {
    NowcastError::Format {
        offset: offset as u64,
        message: message.into(),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<NowcastModel> {
    if bytes.len() < 16 {
        return Err(format_err(0, format!("model file of {} bytes is truncated", bytes.len())));
    }
    if &bytes[..4] != MODEL_MAGIC {
        return Err(format_err(0, format!("bad magic {:?}, expected NWM1", &bytes[..4])));
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(format_err(
            bytes.len() - 4,
            format!("checksum mismatch (stored {stored:08x}, computed {actual:08x}); file truncated or corrupt"),
        ));
    }
    // Past the checksum every read is in bounds unless the writer was broken.
    let to_format = |e: NowcastError| match e {
        NowcastError::Truncated { offset, .. } => format_err(offset as usize, "section runs past the payload"),
        other => other,
    };
    let mut cur = Cursor { bytes: body, pos: 4 };
    let version = cur.u32().map_err(to_format)?;
    if version != MODEL_VERSION {
        return Err(format_err(4, format!("unsupported model version {version}, expected {MODEL_VERSION}")));
    }
    let header_len = cur.u32().map_err(to_format)? as usize;
    let header_at = cur.pos;
    let header: Header = serde_json::from_slice(cur.take(header_len).map_err(to_format)?)
        .map_err(|e| format_err(header_at, format!("model header: {e}")))?;
    header.model.validate()?;
    let count = cur.u32().map_err(to_format)? as usize;
    let mut sections: HashMap<String, Tensor> = HashMap::new();
    for _ in 0..count {
        let at = cur.pos;
        let name_len = cur.u32().map_err(to_format)? as usize;
        let name = std::str::from_utf8(cur.take(name_len).map_err(to_format)?)
            .map_err(|_| format_err(at, "section name is not UTF-8"))?
            .to_string();
        let rank = cur.u32().map_err(to_format)? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(cur.u32().map_err(to_format)? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|b| (n, b)));
        let Some((_, nbytes)) = n else {
            return Err(format_err(at, format!("section {name} shape {shape:?} overflows")));
        };
        let values = cur
            .take(nbytes)
            .map_err(to_format)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| format_err(at, format!("section {name}: {e}")))?;
        if sections.insert(name.clone(), t).is_some() {
            return Err(format_err(at, format!("duplicate section {name}")));
        }
    }
    if cur.pos != body.len() {
        return Err(format_err(cur.pos, "trailing bytes after sections"));
    }
    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor> {
        let t = sections
            .remove(name)
            .ok_or_else(|| format_err(0, format!("missing section {name}")))?;
        if t.shape() != shape {
            return Err(format_err(
                0,
                format!("section {name} has shape {:?}, expected {shape:?}", t.shape()),
            ));
        }
        Ok(t)
    };
    let params = header
        .model
        .param_shapes()
        .into_iter()
        .map(|(name, shape)| Ok(Param::new(name.clone(), take(&name, &shape)?)))
        .collect::<Result<Vec<_>>>()?;
    let bn = header
        .model
        .conv_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| {
            Ok(BnState {
                running_mean: take(&format!("bn{}.running_mean", i + 1), &[c])?.into_values(),
                running_var: take(&format!("bn{}.running_var", i + 1), &[c])?.into_values(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let nv = header.normalizer_variables.len();
    let normalizer = Normalizer {
        variables: header.normalizer_variables,
        min: take("normalizer.min", &[nv])?.into_values(),
        max: take("normalizer.max", &[nv])?.into_values(),
    };
    normalizer.check_variables()?;
    if let Some(extra) = sections.keys().next() {
        return Err(format_err(0, format!("unexpected section {extra}")));
    }
    Ok(NowcastModel {
        config: header.model,
        params,
        bn,
        normalizer,
        echo: header.echo,
    })
}
