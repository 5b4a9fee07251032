//! Shared domain types: the part scheme, observations, part features, and the
//! two metric primitives everything else is built on.
//!
//! An [`Observation`] is one tracked person in one frame. Its raw descriptor
//! matrix has one row per body part; rows of parts that are not visible are
//! zero, and [`Observation::new`] enforces that.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Canonical part names. Index `i` here is the row index of part `i` in every
/// raw matrix, feature matrix and per-part classifier.
pub const PART_NAMES: [&str; 10] = [
    "front-head",
    "front-torso",
    "front-legs",
    "front-feet",
    "front-whole",
    "back-head",
    "back-torso",
    "back-legs",
    "back-feet",
    "back-whole",
];

/// Number of parts in the canonical scheme.
pub const NUM_PARTS: usize = PART_NAMES.len();

/// Parts belonging to the front half of the canonical scheme.
pub const FRONT_PARTS: std::ops::Range<usize> = 0..5;
/// Parts belonging to the back half of the canonical scheme.
pub const BACK_PARTS: std::ops::Range<usize> = 5..10;

/// Ordered list of body parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartScheme {
    names: Vec<String>,
}

impl PartScheme {
    pub fn canonical() -> Self {
        Self {
            names: PART_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    /// A custom scheme; names must be unique and non-empty.
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::Config("part scheme needs at least one part".into()));
        }
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != names.len() {
            return Err(Error::Config("part names must be unique".into()));
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

impl Default for PartScheme {
    fn default() -> Self {
        Self::canonical()
    }
}

/// Per-part visibility bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VisibilityMask(Vec<bool>);

impl VisibilityMask {
    pub fn new(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn all(n: usize) -> Self {
        Self(vec![true; n])
    }

    pub fn none(n: usize) -> Self {
        Self(vec![false; n])
    }

    /// Mask with exactly the parts in `visible` set.
    pub fn from_indices(n: usize, visible: impl IntoIterator<Item = usize>) -> Self {
        let mut bits = vec![false; n];
        for i in visible {
            bits[i] = true;
        }
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, visible: bool) {
        self.0[i] = visible;
    }

    pub fn bits(&self) -> &[bool] {
        &self.0
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b)
    }

    pub fn visible(&self) -> impl Iterator<Item = usize> + '_ {
        self.0
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    /// Parts visible in both masks.
    pub fn intersect(&self, other: &Self) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(&a, &b)| a && b)
                .collect(),
        )
    }
}

/// Axis-aligned box given by its center and size, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if ![self.cx, self.cy, self.w, self.h].iter().all(|v| v.is_finite()) {
            return Err(Error::Config("bbox coordinates must be finite".into()));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::Config("bbox width and height must be positive".into()));
        }
        Ok(())
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Euclidean distance between box centers.
pub fn bbox_center_distance(a: &BBox, b: &BBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

/// One tracked person in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub frame: u64,
    pub track_id: u64,
    /// 1 = target, 0 = anyone else.
    pub label: u8,
    pub bbox: BBox,
    pub vis: VisibilityMask,
    /// N x D_raw descriptor rows; invisible rows are zero.
    pub raw: Array2<f64>,
}

impl Observation {
    /// Builds an observation, zeroing raw rows of invisible parts.
    pub fn new(
        frame: u64,
        track_id: u64,
        label: u8,
        bbox: BBox,
        vis: VisibilityMask,
        mut raw: Array2<f64>,
    ) -> Result<Self> {
        if label > 1 {
            return Err(Error::Config(format!("label must be 0 or 1, got {label}")));
        }
        if raw.nrows() != vis.len() {
            return Err(Error::Shape(format!(
                "raw has {} rows but mask has {} parts",
                raw.nrows(),
                vis.len()
            )));
        }
        bbox.validate()?;
        if !raw.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { layer: "raw input" });
        }
        for (i, mut row) in raw.rows_mut().into_iter().enumerate() {
            if !vis.get(i) {
                row.fill(0.0);
            }
        }
        Ok(Self {
            frame,
            track_id,
            label,
            bbox,
            vis,
            raw,
        })
    }

    pub fn n_parts(&self) -> usize {
        self.vis.len()
    }

    pub fn d_raw(&self) -> usize {
        self.raw.ncols()
    }

    pub fn is_target(&self) -> bool {
        self.label == 1
    }

    /// Same observation with a different label.
    pub fn with_label(&self, label: u8) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }

    /// True when every invisible row is exactly zero.
    pub fn masking_holds(&self) -> bool {
        self.raw
            .rows()
            .into_iter()
            .enumerate()
            .all(|(i, row)| self.vis.get(i) || row.iter().all(|&v| v == 0.0))
    }

    /// Serializes to one comma-separated line (no trailing newline):
    /// `frame,track_id,label,cx,cy,w,h,vis_0..vis_{N-1},raw_0_0..raw_{N-1}_{D-1}`.
    pub fn to_record(&self) -> String {
        let mut s = String::with_capacity(16 * (8 + self.raw.len()));
        let b = &self.bbox;
        write!(
            s,
            "{},{},{},{},{},{},{}",
            self.frame, self.track_id, self.label, b.cx, b.cy, b.w, b.h
        )
        .unwrap();
        for &bit in self.vis.bits() {
            s.push_str(if bit { ",1" } else { ",0" });
        }
        for v in self.raw.iter() {
            write!(s, ",{v}").unwrap();
        }
        s
    }

    /// Parses a line produced by [`Observation::to_record`].
    pub fn from_record(line: &str, n_parts: usize, d_raw: usize) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let expected = 7 + n_parts + n_parts * d_raw;
        if fields.len() != expected {
            return Err(Error::Parse(format!(
                "expected {expected} fields, found {}",
                fields.len()
            )));
        }
        fn num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
            s.trim()
                .parse()
                .map_err(|_| Error::Parse(format!("bad {what}: {s:?}")))
        }
        let frame = num(fields[0], "frame")?;
        let track_id = num(fields[1], "track_id")?;
        let label = num(fields[2], "label")?;
        let bbox = BBox::new(
            num(fields[3], "cx")?,
            num(fields[4], "cy")?,
            num(fields[5], "w")?,
            num(fields[6], "h")?,
        )?;
        let vis = fields[7..7 + n_parts]
            .iter()
            .map(|f| match f.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Parse(format!("bad visibility bit: {other:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let raw = fields[7 + n_parts..]
            .iter()
            .map(|f| num::<f64>(f, "raw value"))
            .collect::<Result<Vec<_>>>()?;
        let raw = Array2::from_shape_vec((n_parts, d_raw), raw)
            .map_err(|e| Error::Parse(e.to_string()))?;
        let obs = Observation::new(frame, track_id, label, bbox, VisibilityMask::new(vis), raw)?;
        if !obs.masking_holds() {
            unreachable!("constructor zeroes invisible rows");
        }
        Ok(obs)
    }
}

/// Embedding matrix produced by the extractor for one observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PartFeatures {
    /// N x C; invisible rows are zero.
    pub f: Array2<f64>,
    pub vis: VisibilityMask,
}

impl PartFeatures {
    pub fn new(mut f: Array2<f64>, vis: VisibilityMask) -> Result<Self> {
        if f.nrows() != vis.len() {
            return Err(Error::Shape(format!(
                "feature matrix has {} rows but mask has {} parts",
                f.nrows(),
                vis.len()
            )));
        }
        for (i, mut row) in f.rows_mut().into_iter().enumerate() {
            if !vis.get(i) {
                row.fill(0.0);
            }
        }
        Ok(Self { f, vis })
    }

    pub fn row(&self, k: usize) -> ArrayView1<'_, f64> {
        self.f.row(k)
    }
}

/// Average L2 distance between corresponding part rows, over the parts
/// visible in both inputs.
pub fn part_distance(a: &PartFeatures, b: &PartFeatures) -> Result<f64> {
    if a.f.dim() != b.f.dim() {
        return Err(Error::Shape(format!(
            "feature shapes differ: {:?} vs {:?}",
            a.f.dim(),
            b.f.dim()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for k in a.vis.intersect(&b.vis).visible() {
        total += row_distance(a.f.row(k), b.f.row(k));
        count += 1;
    }
    if count == 0 {
        return Err(Error::DistanceUndefined);
    }
    Ok(total / count as f64)
}

pub(crate) fn row_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
