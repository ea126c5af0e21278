//! Forecast verification: contingency counts, POD/FAR/CSI, ROC/AUC,
//! persistence baseline and per-cell outcome maps.
//!
//! A prediction is positive iff its probability is `>=` the threshold.
//! Scores with a zero denominator are `None`, never NaN or zero.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{NowcastError, Result};
use crate::pipeline::{block_index, Normalizer, BLOCK_LEN, CELL, THRESHOLD_DBZ};
use crate::synth::LEVELS;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fn_: u64,
    pub fp: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fn_ + self.fp + self.tn
    }

    fn record(&mut self, predicted: bool, label: u8) {
        match (predicted, label == 1) {
            (true, true) => self.tp += 1,
            (false, true) => self.fn_ += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
        }
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(self, o: ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            tp: self.tp + o.tp,
            fn_: self.fn_ + o.fn_,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
        }
    }
}

fn check_inputs(preds: &[f64], labels: &[u8]) -> Result<()> {
    if preds.len() != labels.len() {
        return Err(NowcastError::Data(format!(
            "{} predictions but {} labels",
            preds.len(),
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(NowcastError::Data(format!("label {bad} outside {{0,1}}")));
    }
    if let Some(bad) = preds.iter().find(|p| p.is_nan()) {
        return Err(NowcastError::Data(format!("prediction {bad} is not a number")));
    }
    Ok(())
}

pub fn confusion(preds: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    check_inputs(preds, labels)?;
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in preds.iter().zip(labels) {
        m.record(p >= threshold, l);
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SkillScores {
    pub pod: Option<f64>,
    pub far: Option<f64>,
    pub csi: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn skill_scores(m: &ConfusionMatrix) -> SkillScores {
    SkillScores {
        pod: ratio(m.tp, m.tp + m.fn_),
        far: ratio(m.fp, m.tp + m.fp),
        csi: ratio(m.tp, m.tp + m.fn_ + m.fp),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

/// ROC over every distinct prediction value plus `+inf` and `-inf`
/// sentinels, thresholds descending, and its trapezoidal area.
pub fn roc_auc(preds: &[f64], labels: &[u8]) -> Result<(Vec<RocPoint>, f64)> {
    check_inputs(preds, labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(NowcastError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].total_cmp(&preds[a]));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let v = preds[order[i]];
        while i < order.len() && preds[order[i]] == v {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: v,
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
        });
    }
    points.push(RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
    });
    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum();
    Ok((points, auc))
}

/// 1 where the current composite reflectivity of the cell's center region,
/// recovered from a normalized time-`t` block, already reaches the threshold.
pub fn persistence_baseline<'a>(
    blocks: impl IntoIterator<Item = &'a [f32]>,
    norm: &Normalizer,
) -> Result<Vec<f64>> {
    norm.check_variables()?;
    blocks
        .into_iter()
        .map(|b| {
            if b.len() != BLOCK_LEN {
                return Err(NowcastError::dim("persistence block", BLOCK_LEN, b.len()));
            }
            let mut m = f32::NEG_INFINITY;
            for y in CELL..2 * CELL {
                for x in CELL..2 * CELL {
                    let start = block_index(0, y, x, 0);
                    for &v in &b[start..start + LEVELS] {
                        m = m.max(v);
                    }
                }
            }
            Ok(if norm.denormalize(m as f64, 0) >= THRESHOLD_DBZ { 1.0 } else { 0.0 })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Hit,
    Miss,
    FalseAlarm,
    CorrectNull,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::Hit => "hit",
            Outcome::Miss => "miss",
            Outcome::FalseAlarm => "false_alarm",
            Outcome::CorrectNull => "correct_null",
        }
    }
}

/// Per-cell outcomes of one frame, keyed by `(row, col)`.
#[derive(Clone, Debug, PartialEq)]
pub struct OutcomeMap {
    pub frame: u32,
    pub cells: BTreeMap<(u32, u32), Outcome>,
}

pub fn outcome_map(
    preds: &[f64],
    labels: &[u8],
    cells: &[(u32, u32)],
    frame: u32,
    threshold: f64,
) -> Result<OutcomeMap> {
    check_inputs(preds, labels)?;
    if cells.len() != preds.len() {
        return Err(NowcastError::Data(format!(
            "{} cell coordinates for {} predictions",
            cells.len(),
            preds.len()
        )));
    }
    let mut map = BTreeMap::new();
    for ((&p, &l), &cell) in preds.iter().zip(labels).zip(cells) {
        let outcome = match (p >= threshold, l == 1) {
            (true, true) => Outcome::Hit,
            (false, true) => Outcome::Miss,
            (true, false) => Outcome::FalseAlarm,
            (false, false) => Outcome::CorrectNull,
        };
        if map.insert(cell, outcome).is_some() {
            return Err(NowcastError::Data(format!("duplicate cell {cell:?} in frame {frame}")));
        }
    }
    Ok(OutcomeMap { frame, cells: map })
}

impl OutcomeMap {
    pub fn confusion(&self) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::default();
        for o in self.cells.values() {
            match o {
                Outcome::Hit => m.tp += 1,
                Outcome::Miss => m.fn_ += 1,
                Outcome::FalseAlarm => m.fp += 1,
                Outcome::CorrectNull => m.tn += 1,
            }
        }
        m
    }

    /// SVG of a `rows × cols` cell grid: hits black, false alarms red, misses
    /// white with a dark outline, correct nulls unfilled. `comment` is embedded
    /// verbatim as an XML comment and must not contain `--`.
    pub fn to_svg(&self, rows: u32, cols: u32, comment: &str) -> String {
        const PX: u32 = 12;
        let (w, h) = (cols * PX, rows * PX);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
        );
        let _ = writeln!(s, "<!-- {} -->", comment.replace("--", "- -"));
        let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#f4f4f4"/>"##);
        for (&(row, col), o) in &self.cells {
            let (fill, stroke) = match o {
                Outcome::Hit => ("#000000", "#000000"),
                Outcome::FalseAlarm => ("#d00000", "#d00000"),
                Outcome::Miss => ("#ffffff", "#202020"),
                Outcome::CorrectNull => ("none", "#c8c8c8"),
            };
            let _ = writeln!(
                s,
                r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}" stroke="{stroke}" stroke-width="1"><title>{} ({row},{col})</title></rect>"#,
                col * PX + 1,
                row * PX + 1,
                PX - 2,
                PX - 2,
                o.name()
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrameScore {
    pub frame: u32,
    pub matrix: ConfusionMatrix,
    pub scores: SkillScores,
}

/// Scores for every frame in `report_frames`, chronologically. Frames without
/// samples stay in the series with undefined scores.
pub fn per_frame_series(
    preds: &[f64],
    labels: &[u8],
    frames: &[u32],
    report_frames: &[u32],
    threshold: f64,
) -> Result<Vec<FrameScore>> {
    check_inputs(preds, labels)?;
    if frames.len() != preds.len() {
        return Err(NowcastError::Data(format!(
            "{} frame indices for {} predictions",
            frames.len(),
            preds.len()
        )));
    }
    let mut by_frame: BTreeMap<u32, ConfusionMatrix> =
        report_frames.iter().map(|&f| (f, ConfusionMatrix::default())).collect();
    for ((&p, &l), &f) in preds.iter().zip(labels).zip(frames) {
        by_frame.entry(f).or_default().record(p >= threshold, l);
    }
    Ok(by_frame
        .into_iter()
        .map(|(frame, matrix)| FrameScore {
            frame,
            matrix,
            scores: skill_scores(&matrix),
        })
        .collect())
}
