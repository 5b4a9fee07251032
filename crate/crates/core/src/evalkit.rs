//! Metrics and evaluation protocols.

use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::classifier::RidgeClassifier;
use crate::domain::{bbox_center_distance, BBox, Observation};
use crate::error::{Error, Result};
use crate::extractor::{forward, ExtractorParams};
use crate::simstream::SEGMENTS;

/// Center distance below which a predicted box counts as a success.
pub const SUCCESS_RADIUS: f64 = 50.0;
/// A sample is predicted to be the target iff its confidence exceeds this.
pub const DECISION_THRESHOLD: f64 = 0.5;
/// Every k-th frame of a segment is held out for evaluation.
pub const DEFAULT_HOLDOUT_STRIDE: u64 = 10;

/// Percentage of frames whose prediction lies strictly within the radius.
pub fn success_rate(pred: &[Option<BBox>], gt: &[BBox]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gt.len(),
        });
    }
    if gt.is_empty() {
        return Err(Error::Contract("success rate over zero frames".into()));
    }
    let hits = pred
        .iter()
        .zip(gt)
        .filter(|(p, g)| matches!(p, Some(p) if bbox_center_distance(p, g) < SUCCESS_RADIUS))
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Held-out labeled observations, one list per segment.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SegmentEvalSet {
    pub segments: Vec<Vec<Observation>>,
}

impl SegmentEvalSet {
    pub fn new() -> Self {
        Self {
            segments: vec![Vec::new(); SEGMENTS],
        }
    }

    /// Whether `frame` of a segment starting at `segment_start` is held out.
    pub fn is_held_out(frame: u64, segment_start: u64, stride: u64) -> bool {
        stride > 0 && (frame - segment_start) % stride == stride - 1
    }

    pub fn push(&mut self, segment: usize, obs: Observation) {
        self.segments[segment].push(obs);
    }

    pub fn segment(&self, j: usize) -> &[Observation] {
        &self.segments[j]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentAccuracy {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    /// Samples without a computable confidence; counted as wrong.
    pub unavailable: usize,
}

/// Binary accuracy of `clf` on `samples` under `params`.
pub fn segment_accuracy(
    clf: &RidgeClassifier,
    params: &ExtractorParams,
    samples: &[Observation],
) -> Result<SegmentAccuracy> {
    if samples.is_empty() {
        return Err(Error::Contract("empty evaluation segment".into()));
    }
    let mut correct = 0;
    let mut unavailable = 0;
    for obs in samples {
        match forward(params, obs).and_then(|f| clf.confidence(&f)) {
            Ok(s) => {
                if (s > DECISION_THRESHOLD) == obs.is_target() {
                    correct += 1;
                }
            }
            Err(_) => unavailable += 1,
        }
    }
    Ok(SegmentAccuracy {
        accuracy: correct as f64 / samples.len() as f64,
        correct,
        total: samples.len(),
        unavailable,
    })
}

/// `a[i][j]`: accuracy on segment `j` after training through segment `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccMatrix {
    cells: Vec<Vec<Option<f64>>>,
}

impl Default for AccMatrix {
    fn default() -> Self {
        Self::new()
    }
}

impl AccMatrix {
    pub fn new() -> Self {
        Self {
            cells: vec![vec![None; SEGMENTS]; SEGMENTS],
        }
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) -> Result<()> {
        if i >= SEGMENTS || j > i {
            return Err(Error::Contract(format!("cell ({i}, {j}) is not lower-triangular")));
        }
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::Contract(format!("accuracy {value} outside [0, 1]")));
        }
        self.cells[i][j] = Some(value);
        Ok(())
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells.get(i)?.get(j).copied().flatten()
    }

    /// Mean of the populated entries of row `i`.
    pub fn row_mean(&self, i: usize) -> Option<f64> {
        let vals: Vec<f64> = self.cells[i].iter().flatten().copied().collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    pub fn row_min(&self, i: usize) -> Option<f64> {
        self.cells[i].iter().flatten().copied().reduce(f64::min)
    }

    /// Lower-triangular grid; unpopulated cells print as `-`.
    pub fn write_grid<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        write!(w, "{self}")
    }

    pub fn parse_grid(text: &str) -> Result<Self> {
        let mut m = Self::new();
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != SEGMENTS {
            return Err(Error::Parse(format!("expected {SEGMENTS} rows, got {}", rows.len())));
        }
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split_whitespace().collect();
            if cells.len() != SEGMENTS {
                return Err(Error::Parse(format!("row {i} has {} cells", cells.len())));
            }
            for (j, c) in cells.iter().enumerate() {
                if *c == "-" {
                    continue;
                }
                let v: f64 = c
                    .parse()
                    .map_err(|_| Error::Parse(format!("bad cell {c:?} at ({i}, {j})")))?;
                m.set(i, j, v)?;
            }
        }
        Ok(m)
    }
}

impl fmt::Display for AccMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for row in &self.cells {
            let cells: Vec<String> = row
                .iter()
                .map(|c| c.map_or_else(|| "-".to_string(), |v| format!("{v:.6}")))
                .collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Mean final-row accuracy, in percent.
#[allow(non_snake_case)]
pub fn r_mEAcc(m: &AccMatrix) -> Result<f64> {
    let last = SEGMENTS - 1;
    let mut sum = 0.0;
    for j in 0..SEGMENTS {
        sum += m
            .get(last, j)
            .ok_or_else(|| Error::Contract(format!("missing final-row entry {j}")))?;
    }
    Ok(100.0 * sum / SEGMENTS as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    MoveForward,
    MoveBackward,
    NoOp,
    ForwardLeft,
    ForwardRight,
    TurnLeft,
    TurnRight,
}

impl Action {
    pub const ALL: [Action; 7] = [
        Action::MoveForward,
        Action::MoveBackward,
        Action::NoOp,
        Action::ForwardLeft,
        Action::ForwardRight,
        Action::TurnLeft,
        Action::TurnRight,
    ];
}

/// Normalized horizontal offset of the box center from the image center.
pub fn x_error(b: &BBox, image_width: f64) -> f64 {
    let half = image_width / 2.0;
    (b.cx - half) / half
}

/// Relative area error against the expected box.
pub fn s_error(b: &BBox, expected: (f64, f64)) -> f64 {
    let exp = expected.0 * expected.1;
    (b.w * b.h - exp) / exp
}

/// Ground-truth camera action for a target box; rules in order, first match.
pub fn action_from_errors(x: f64, s: f64) -> Action {
    if x.abs() <= 0.1 && s <= -0.2 {
        Action::MoveForward
    } else if x.abs() <= 0.1 && s >= 0.2 {
        Action::MoveBackward
    } else if x.abs() < 0.1 && s.abs() < 0.2 {
        Action::NoOp
    } else if (0.1..=0.3).contains(&x) {
        Action::ForwardRight
    } else if x > 0.3 {
        Action::TurnRight
    } else if (-0.3..=-0.1).contains(&x) {
        Action::ForwardLeft
    } else if x < -0.3 {
        Action::TurnLeft
    } else {
        // Only reachable for NaN inputs.
        Action::NoOp
    }
}

pub fn bbox_to_action(b: &BBox, expected: (f64, f64), image: (f64, f64)) -> Action {
    action_from_errors(x_error(b, image.0), s_error(b, expected))
}

/// Where the ground-truth box sits horizontally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BboxSide {
    Left,
    /// Centered; carries the exact ground-truth action.
    Center(Action),
    Right,
}

impl BboxSide {
    pub fn of(b: &BBox, expected: (f64, f64), image: (f64, f64)) -> Self {
        let x = x_error(b, image.0);
        if x.abs() < 0.1 {
            BboxSide::Center(bbox_to_action(b, expected, image))
        } else if x < 0.0 {
            BboxSide::Left
        } else {
            BboxSide::Right
        }
    }
}

/// An action is accepted if it moves the target toward the image center.
pub fn relaxed_action_match(pred: Action, side: BboxSide) -> bool {
    use Action::*;
    match side {
        BboxSide::Left => matches!(pred, MoveBackward | TurnLeft | ForwardLeft),
        BboxSide::Right => matches!(pred, MoveBackward | TurnRight | ForwardRight),
        BboxSide::Center(gt) => matches!(gt, MoveForward | MoveBackward | NoOp) && pred == gt,
    }
}

/// One line of the metrics file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub scenario: String,
    pub strategy: String,
    pub seed: u64,
    pub value: f64,
}

pub fn write_metrics<W: Write>(records: &[MetricRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_metrics(text: &str) -> Result<Vec<MetricRecord>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Aligned text table of `(metric, value)` pairs for one run.
pub fn summary_table(records: &[MetricRecord]) -> String {
    let width = records.iter().map(|r| r.metric.len()).max().unwrap_or(6).max(6);
    let mut out = format!("{:<width$}  value\n", "metric");
    for r in records {
        out.push_str(&format!("{:<width$}  {:.4}\n", r.metric, r.value));
    }
    out
}
