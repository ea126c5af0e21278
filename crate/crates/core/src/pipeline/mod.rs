//! From raw event grids to labeled, normalized cell samples.
//!
//! A cell is a 6×6 pixel tile; its sample window is the 18×18 pixel square
//! centered on it, so cell `(row, col)` shifted by `(dy, dx)` has window origin
//! `(6·row − 6 + dy, 6·col − 6 + dx)` and center region origin 6 pixels further.
//! A block is one frame of that window over all six model variables, laid out
//! `(variable, y, x, z)`. A labeled sample at frame `t` consumes blocks at
//! `t−2, t−1, t` and takes its label from frame `t+2`.

mod sample_file;

pub use sample_file::{
    read_sample_set, write_sample_set, LabeledSample, SampleFile, SampleRecord, SAMPLE_MAGIC,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NowcastError, Result};
use crate::synth::{GridDims, GridSequence, LEVELS};

pub const CELL: usize = 6;
pub const WINDOW: usize = 18;
/// Model variables in block order.
pub const VARIABLES: [&str; 6] = ["R", "dR", "w", "dw", "pt", "dpt"];
pub const NUM_VARIABLES: usize = VARIABLES.len();
pub const BLOCK_LEN: usize = NUM_VARIABLES * WINDOW * WINDOW * LEVELS;
pub const THRESHOLD_DBZ: f64 = 35.0;
/// Frames between the newest input block and the label frame (30 minutes).
pub const LABEL_LEAD: usize = 2;
/// Input blocks per sample: `t−2, t−1, t`.
pub const STEPS: usize = 3;
pub const SPAN_FLOOR: f64 = 1e-6;
pub const NORMALIZED_CLAMP: f64 = 1.5;
pub const VALIDATION_FRACTION: f64 = 0.1;

/// Flat offset of `(variable, y, x, z)` inside a block.
pub fn block_index(v: usize, y: usize, x: usize, z: usize) -> usize {
    ((v * WINDOW + y) * WINDOW + x) * LEVELS + z
}

/// Inverse of [`block_index`].
pub fn block_coords(i: usize) -> (usize, usize, usize, usize) {
    let z = i % LEVELS;
    let rest = i / LEVELS;
    let x = rest % WINDOW;
    let rest = rest / WINDOW;
    (rest / WINDOW, rest % WINDOW, x, z)
}

/// Raw variable each model variable is read from, and whether it is differenced.
const SOURCES: [(&str, bool); NUM_VARIABLES] = [
    ("R", false),
    ("R", true),
    ("w", false),
    ("w", true),
    ("pt", false),
    ("pt", true),
];

/// Index of a block: which event, frame and (possibly shifted) cell window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockKey {
    pub event: u32,
    pub frame: u32,
    pub row: u32,
    pub col: u32,
    pub dy: i8,
    pub dx: i8,
}

impl BlockKey {
    pub fn at_frame(self, frame: u32) -> BlockKey {
        BlockKey { frame, ..self }
    }

    /// Window origin `(y0, x0)`; may be negative for out-of-domain shifts.
    pub fn window_origin(&self) -> (i64, i64) {
        (
            CELL as i64 * self.row as i64 - CELL as i64 + self.dy as i64,
            CELL as i64 * self.col as i64 - CELL as i64 + self.dx as i64,
        )
    }

    pub fn in_domain(&self, dims: GridDims) -> bool {
        let (y0, x0) = self.window_origin();
        y0 >= 0 && x0 >= 0 && y0 + WINDOW as i64 <= dims.ny as i64 && x0 + WINDOW as i64 <= dims.nx as i64
    }

    /// Blocks at `t−2, t−1, t` in chronological order.
    pub fn history(self) -> [BlockKey; STEPS] {
        let t = self.frame;
        [self.at_frame(t - 2), self.at_frame(t - 1), self]
    }
}

/// A labeled training or evaluation example, without its block values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SampleMeta {
    pub key: BlockKey,
    pub label: u8,
    pub oversampled: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub split: Split,
    pub samples: Vec<SampleMeta>,
}

impl SampleSet {
    pub fn positive_fraction(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.samples.len() as f64
    }

    pub fn positives(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    /// Sorted event indices that contribute at least one sample.
    pub fn events(&self) -> Vec<u32> {
        let mut e: Vec<u32> = self.samples.iter().map(|s| s.key.event).collect();
        e.sort_unstable();
        e.dedup();
        e
    }
}

/// Cells whose unshifted window lies fully inside the grid, row-major.
pub fn valid_cells(dims: GridDims) -> Vec<(u32, u32)> {
    let rows = dims.ny / CELL;
    let cols = dims.nx / CELL;
    let mut out = Vec::new();
    for row in 0..rows as u32 {
        for col in 0..cols as u32 {
            let key = BlockKey {
                event: 0,
                frame: 0,
                row,
                col,
                dy: 0,
                dx: 0,
            };
            if key.in_domain(dims) {
                out.push((row, col));
            }
        }
    }
    out
}

/// Frames `t` that have a full sample history and a label frame.
pub fn sample_frames(frames: usize) -> std::ops::RangeInclusive<usize> {
    if frames < STEPS + 1 + LABEL_LEAD {
        #[allow(clippy::reversed_empty_ranges)]
        return 1..=0;
    }
    STEPS..=frames - 1 - LABEL_LEAD
}

fn var_index(seq: &GridSequence, name: &str) -> Result<usize> {
    seq.var_index(name)
        .ok_or_else(|| NowcastError::Config(format!("event {} has no variable {name}", seq.event_id)))
}

/// `var(t) − var(t−1)` for frames `1..T`, each a `[z][y][x]` field.
pub fn time_difference(seq: &GridSequence, var: &str) -> Result<Vec<Vec<f64>>> {
    let v = var_index(seq, var)?;
    let frames = seq.dims().frames;
    if frames < 2 {
        return Err(NowcastError::InsufficientHistory(format!(
            "event {} has {frames} frame(s); differencing needs 2",
            seq.event_id
        )));
    }
    Ok((1..frames)
        .map(|t| {
            seq.field(t, v)
                .iter()
                .zip(seq.field(t - 1, v))
                .map(|(a, b)| *a as f64 - *b as f64)
                .collect()
        })
        .collect())
}

/// Per-variable affine map of `[min, max]` onto `[−1, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub variables: Vec<String>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    /// Span with the degenerate case floored.
    pub fn span(&self, var: usize) -> f64 {
        (self.max[var] - self.min[var]).max(SPAN_FLOOR)
    }

    /// Unclamped affine image of `x`.
    pub fn affine(&self, x: f64, var: usize) -> f64 {
        (x - self.min[var]) / self.span(var) * 2.0 - 1.0
    }

    pub fn normalize(&self, x: f64, var: usize) -> f64 {
        self.affine(x, var).clamp(-NORMALIZED_CLAMP, NORMALIZED_CLAMP)
    }

    pub fn denormalize(&self, y: f64, var: usize) -> f64 {
        (y + 1.0) / 2.0 * self.span(var) + self.min[var]
    }

    /// Errors unless the variables are exactly the model variables in order.
    pub fn check_variables(&self) -> Result<()> {
        let ok = self.variables.len() == NUM_VARIABLES
            && self.variables.iter().zip(VARIABLES).all(|(a, b)| a == b)
            && self.min.len() == NUM_VARIABLES
            && self.max.len() == NUM_VARIABLES;
        if ok {
            Ok(())
        } else {
            Err(NowcastError::Config(format!(
                "normalizer variables {:?} do not match model variables {:?}",
                self.variables, VARIABLES
            )))
        }
    }
}

/// Global min/max per model variable over every frame and pixel of `events`.
/// Differenced variables start at frame 1.
pub fn fit_normalizer(events: &[&GridSequence]) -> Result<Normalizer> {
    if events.is_empty() {
        return Err(NowcastError::Data("cannot fit a normalizer on zero events".into()));
    }
    let mut min = [f64::INFINITY; NUM_VARIABLES];
    let mut max = [f64::NEG_INFINITY; NUM_VARIABLES];
    for seq in events {
        for (v, (name, diff)) in SOURCES.iter().enumerate() {
            let src = var_index(seq, name)?;
            let first = usize::from(*diff);
            for t in first..seq.dims().frames {
                let cur = seq.field(t, src);
                if *diff {
                    for (a, b) in cur.iter().zip(seq.field(t - 1, src)) {
                        let d = *a as f64 - *b as f64;
                        min[v] = min[v].min(d);
                        max[v] = max[v].max(d);
                    }
                } else {
                    for a in cur {
                        min[v] = min[v].min(*a as f64);
                        max[v] = max[v].max(*a as f64);
                    }
                }
            }
        }
    }
    if let Some(v) = (0..NUM_VARIABLES).find(|&v| !min[v].is_finite() || !max[v].is_finite()) {
        return Err(NowcastError::Data(format!("no finite data for variable {}", VARIABLES[v])));
    }
    Ok(Normalizer {
        variables: VARIABLES.iter().map(|s| s.to_string()).collect(),
        min: min.to_vec(),
        max: max.to_vec(),
    })
}

/// 1 iff the composite (max over levels and the 6×6 region) reflectivity at
/// `frame` reaches the threshold. `(y, x)` is the region origin.
pub fn label_region(seq: &GridSequence, frame: usize, y: usize, x: usize) -> Result<u8> {
    let r = var_index(seq, "R")?;
    let dims = seq.dims();
    if y + CELL > dims.ny || x + CELL > dims.nx || frame >= dims.frames {
        return Err(NowcastError::Data(format!(
            "label region ({y}, {x}) at frame {frame} outside {dims:?}"
        )));
    }
    let field = seq.field(frame, r);
    let plane = dims.ny * dims.nx;
    for z in 0..dims.levels {
        for yy in y..y + CELL {
            let row = &field[z * plane + yy * dims.nx + x..][..CELL];
            if row.iter().any(|&v| v as f64 >= THRESHOLD_DBZ) {
                return Ok(1);
            }
        }
    }
    Ok(0)
}

/// Label of the (possibly shifted) center region of `key` at `key.frame + 2`.
pub fn label_cell(seq: &GridSequence, key: BlockKey) -> Result<u8> {
    if !key.in_domain(seq.dims()) {
        return Err(NowcastError::Data(format!("cell window {key:?} leaves the domain")));
    }
    let (y0, x0) = key.window_origin();
    label_region(seq, key.frame as usize + LABEL_LEAD, y0 as usize + CELL, x0 as usize + CELL)
}

/// Normalized `(variable, y, x, z)` block of `key`. Needs `key.frame ≥ 1`.
pub fn assemble_block(seq: &GridSequence, norm: &Normalizer, key: BlockKey) -> Result<Vec<f32>> {
    norm.check_variables()?;
    let dims = seq.dims();
    let t = key.frame as usize;
    if t == 0 || t >= dims.frames {
        return Err(NowcastError::InsufficientHistory(format!(
            "block at frame {t} needs frames {} and {t} of event {}",
            t as i64 - 1,
            seq.event_id
        )));
    }
    if !key.in_domain(dims) {
        return Err(NowcastError::Data(format!("cell window {key:?} leaves the domain")));
    }
    if dims.levels != LEVELS {
        return Err(NowcastError::dim("levels", LEVELS, dims.levels));
    }
    let (y0, x0) = key.window_origin();
    let (y0, x0) = (y0 as usize, x0 as usize);
    let plane = dims.ny * dims.nx;
    let mut out = vec![0.0f32; BLOCK_LEN];
    for (v, (name, diff)) in SOURCES.iter().enumerate() {
        let src = var_index(seq, name)?;
        let cur = seq.field(t, src);
        let prev = seq.field(t - 1, src);
        for y in 0..WINDOW {
            for x in 0..WINDOW {
                let base = block_index(v, y, x, 0);
                let pix = (y0 + y) * dims.nx + x0 + x;
                for z in 0..LEVELS {
                    let i = z * plane + pix;
                    let raw = if *diff {
                        cur[i] as f64 - prev[i] as f64
                    } else {
                        cur[i] as f64
                    };
                    out[base + z] = norm.normalize(raw, v) as f32;
                }
            }
        }
    }
    Ok(out)
}

/// One labeled cell sample: the block at frame `t` and the label at `t+2`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellSample {
    pub meta: SampleMeta,
    pub values: Vec<f32>,
}

/// Builds the sample for `key`, or `None` when its window leaves the domain.
pub fn assemble_sample(seq: &GridSequence, norm: &Normalizer, key: BlockKey) -> Result<Option<CellSample>> {
    let frames = seq.dims().frames;
    let t = key.frame as usize;
    if t < STEPS || t + LABEL_LEAD >= frames {
        return Err(NowcastError::InsufficientHistory(format!(
            "sample at frame {t} needs frames {}..={} of event {} ({frames} frames)",
            t as i64 - STEPS as i64,
            t + LABEL_LEAD,
            seq.event_id
        )));
    }
    if !key.in_domain(seq.dims()) {
        return Ok(None);
    }
    Ok(Some(CellSample {
        meta: SampleMeta {
            key,
            label: label_cell(seq, key)?,
            oversampled: key.dy != 0 || key.dx != 0,
        },
        values: assemble_block(seq, norm, key)?,
    }))
}

/// Every unshifted labeled sample of one event, by frame then cell.
pub fn enumerate_samples(seq: &GridSequence, event: u32) -> Result<Vec<SampleMeta>> {
    let cells = valid_cells(seq.dims());
    let frames: Vec<usize> = sample_frames(seq.dims().frames).collect();
    let per_frame: Vec<Vec<SampleMeta>> = frames
        .par_iter()
        .map(|&t| {
            cells
                .iter()
                .map(|&(row, col)| {
                    let key = BlockKey {
                        event,
                        frame: t as u32,
                        row,
                        col,
                        dy: 0,
                        dx: 0,
                    };
                    Ok(SampleMeta {
                        key,
                        label: label_cell(seq, key)?,
                        oversampled: false,
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

/// The eight window shifts of magnitude `k`, in a fixed order.
pub fn shifts(k: i8) -> [(i8, i8); 8] {
    [(-k, -k), (-k, 0), (-k, k), (0, -k), (0, k), (k, -k), (k, 0), (k, k)]
}

/// Appends, for each unshifted positive, every in-domain shifted copy whose
/// shifted center region is also positive. `events[i]` backs event index `i`.
pub fn oversample_positives(set: &SampleSet, events: &[GridSequence], k: u8) -> Result<SampleSet> {
    if set.split != Split::Train {
        return Err(NowcastError::Usage(format!(
            "oversampling applies to the train split only, got {}",
            set.split.name()
        )));
    }
    if !(1..=2).contains(&k) {
        return Err(NowcastError::Config(format!("oversample shift K must be 1 or 2, got {k}")));
    }
    let mut out = set.samples.clone();
    for s in set.samples.iter().filter(|s| s.label == 1 && !s.oversampled) {
        let seq = events
            .get(s.key.event as usize)
            .ok_or_else(|| NowcastError::Data(format!("sample refers to missing event {}", s.key.event)))?;
        for (dy, dx) in shifts(k as i8) {
            let key = BlockKey { dy, dx, ..s.key };
            if key.in_domain(seq.dims()) && label_cell(seq, key)? == 1 {
                out.push(SampleMeta {
                    key,
                    label: 1,
                    oversampled: true,
                });
            }
        }
    }
    Ok(SampleSet {
        split: Split::Train,
        samples: out,
    })
}

/// Event indices per split: the first `n_train` events feed training and
/// validation, the remaining `n_test` are held out.
#[derive(Clone, Debug, PartialEq)]
pub struct EventSplit {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
}

pub fn split_event_indices(count: usize, n_train: usize, n_test: usize) -> Result<EventSplit> {
    if n_train + n_test != count {
        return Err(NowcastError::Config(format!(
            "split {n_train} train + {n_test} test does not match {count} events"
        )));
    }
    Ok(EventSplit {
        train: (0..n_train as u32).collect(),
        test: (n_train as u32..count as u32).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: SampleSet,
    pub validation: SampleSet,
    pub test: SampleSet,
}

/// Enumerates samples per event split. Validation is the last 10% of the
/// train-event samples after a shuffle keyed by `seed`; both stay unshifted.
pub fn split_events(events: &[GridSequence], n_train: usize, n_test: usize, seed: u64) -> Result<Splits> {
    let split = split_event_indices(events.len(), n_train, n_test)?;
    let collect = |idx: &[u32]| -> Result<Vec<SampleMeta>> {
        let mut all = Vec::new();
        for &e in idx {
            all.extend(enumerate_samples(&events[e as usize], e)?);
        }
        Ok(all)
    };
    let mut train = collect(&split.train)?;
    let test = collect(&split.test)?;
    train.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = if train.len() >= 2 {
        ((train.len() as f64 * VALIDATION_FRACTION).round() as usize).max(1)
    } else {
        0
    };
    let mut validation = train.split_off(train.len() - n_val);
    // Chronological order inside each split keeps block reads local.
    train.sort_by_key(|s| s.key);
    validation.sort_by_key(|s| s.key);
    Ok(Splits {
        train: SampleSet {
            split: Split::Train,
            samples: train,
        },
        validation: SampleSet {
            split: Split::Validation,
            samples: validation,
        },
        test: SampleSet {
            split: Split::Test,
            samples: test,
        },
    })
}
