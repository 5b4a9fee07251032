//! Part-based embedding network with two identity heads.
//!
//! Every visible part row of an observation goes through the same two-layer
//! MLP; an additive per-part code after the first layer lets the shared
//! weights specialize by part:
//!
//! ```text
//! F_k = W2ᵀ · relu(W1ᵀ · raw_k + b1 + part_embed_k) + b2
//! ```
//!
//! Invisible parts produce zero rows. The global head sees the mean of the
//! visible rows, the concatenation head sees all N rows stacked. Training
//! minimizes the sum of both heads' cross-entropy and a batch-hard part
//! triplet loss; gradients are computed by hand.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{row_distance, Observation, PartFeatures};
use crate::error::{Error, Result};

/// Hinge margin of the part triplet loss.
pub const DEFAULT_MARGIN: f64 = 0.3;
pub const DEFAULT_LEARNING_RATE: f64 = 0.01;

/// Network shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_raw: usize,
    pub hidden: usize,
    pub embed: usize,
    pub parts: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_raw: 32,
            hidden: 64,
            embed: 16,
            parts: crate::domain::NUM_PARTS,
        }
    }
}

/// Names of the parameter blocks, in declaration (and checkpoint) order.
pub const BLOCK_NAMES: [&str; 9] = [
    "w1",
    "b1",
    "w2",
    "b2",
    "part_embed",
    "head_g",
    "head_g_bias",
    "head_c",
    "head_c_bias",
];

/// All trainable tensors. Also used to hold gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors {
    /// d_raw x hidden
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// hidden x embed
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    /// parts x hidden
    pub part_embed: Array2<f64>,
    /// embed x 2
    pub head_g: Array2<f64>,
    pub head_g_bias: Array1<f64>,
    /// (embed * parts) x 2
    pub head_c: Array2<f64>,
    pub head_c_bias: Array1<f64>,
}

impl Tensors {
    pub fn zeros(d: Dims) -> Self {
        Self {
            w1: Array2::zeros((d.d_raw, d.hidden)),
            b1: Array1::zeros(d.hidden),
            w2: Array2::zeros((d.hidden, d.embed)),
            b2: Array1::zeros(d.embed),
            part_embed: Array2::zeros((d.parts, d.hidden)),
            head_g: Array2::zeros((d.embed, 2)),
            head_g_bias: Array1::zeros(2),
            head_c: Array2::zeros((d.embed * d.parts, 2)),
            head_c_bias: Array1::zeros(2),
        }
    }

    /// Flat views of every block, in [`BLOCK_NAMES`] order.
    pub fn blocks(&self) -> [&[f64]; 9] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.part_embed.as_slice().expect("standard layout"),
            self.head_g.as_slice().expect("standard layout"),
            self.head_g_bias.as_slice().expect("standard layout"),
            self.head_c.as_slice().expect("standard layout"),
            self.head_c_bias.as_slice().expect("standard layout"),
        ]
    }

    pub fn blocks_mut(&mut self) -> [&mut [f64]; 9] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.part_embed.as_slice_mut().expect("standard layout"),
            self.head_g.as_slice_mut().expect("standard layout"),
            self.head_g_bias.as_slice_mut().expect("standard layout"),
            self.head_c.as_slice_mut().expect("standard layout"),
            self.head_c_bias.as_slice_mut().expect("standard layout"),
        ]
    }

    /// `self += alpha * other`
    pub fn scaled_add(&mut self, alpha: f64, other: &Tensors) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Extractor parameters plus a version stamp that increases on every update.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub dims: Dims,
    pub tensors: Tensors,
    pub version: u64,
}

impl ExtractorParams {
    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            tensors: Tensors::zeros(dims),
            version: 0,
        }
    }

    /// He-style random initialization; biases start at zero.
    pub fn init<R: Rng + ?Sized>(dims: Dims, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims);
        let mut fill = |a: &mut [f64], std: f64| {
            let n = Normal::new(0.0, std).expect("positive std");
            for v in a.iter_mut() {
                *v = n.sample(rng);
            }
        };
        let t = &mut p.tensors;
        fill(t.w1.as_slice_mut().unwrap(), (2.0 / dims.d_raw as f64).sqrt());
        fill(t.w2.as_slice_mut().unwrap(), (1.0 / dims.hidden as f64).sqrt());
        fill(t.part_embed.as_slice_mut().unwrap(), 0.1);
        fill(t.head_g.as_slice_mut().unwrap(), (1.0 / dims.embed as f64).sqrt());
        fill(
            t.head_c.as_slice_mut().unwrap(),
            (1.0 / (dims.embed * dims.parts) as f64).sqrt(),
        );
        p
    }

    /// Deep copy that later updates to `self` cannot affect.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    fn check_obs(&self, obs: &Observation) -> Result<()> {
        if obs.n_parts() != self.dims.parts || obs.d_raw() != self.dims.d_raw {
            return Err(Error::Shape(format!(
                "observation is {}x{}, extractor expects {}x{}",
                obs.n_parts(),
                obs.d_raw(),
                self.dims.parts,
                self.dims.d_raw
            )));
        }
        Ok(())
    }

    /// Writes a binary checkpoint: magic, format version, dims, param
    /// version, then every block as little-endian f64 in declaration order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_FORMAT.to_le_bytes())?;
        let d = self.dims;
        for v in [d.d_raw, d.hidden, d.embed, d.parts] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        w.write_all(&self.version.to_le_bytes())?;
        for block in self.tensors.blocks() {
            for v in block {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Parse(format!("checkpoint: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
        if u32::from_le_bytes(u32buf) != CHECKPOINT_FORMAT {
            return Err(bad("unsupported format version"));
        }
        let read_u64 = |r: &mut R| -> Result<u64> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(b))
        };
        let dims = Dims {
            d_raw: read_u64(&mut r)? as usize,
            hidden: read_u64(&mut r)? as usize,
            embed: read_u64(&mut r)? as usize,
            parts: read_u64(&mut r)? as usize,
        };
        let version = read_u64(&mut r)?;
        let mut p = Self::zeros(dims);
        p.version = version;
        for block in p.tensors.blocks_mut() {
            for v in block.iter_mut() {
                *v = f64::from_bits(read_u64(&mut r)?);
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|_| bad("read error"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"OCLREID\0";
const CHECKPOINT_FORMAT: u32 = 1;

/// Where a training sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    ShortTerm,
    LongTerm,
}

/// A replay batch; each sample's label is its `Observation::label`.
#[derive(Debug, Clone, Default)]
pub struct TrainBatch {
    pub samples: Vec<(Observation, Provenance)>,
}

impl TrainBatch {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_observations(
        obs: impl IntoIterator<Item = Observation>,
        provenance: Provenance,
    ) -> Self {
        Self {
            samples: obs.into_iter().map(|o| (o, provenance)).collect(),
        }
    }

    pub fn push(&mut self, obs: Observation, provenance: Provenance) {
        self.samples.push((obs, provenance));
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn observations(&self) -> impl Iterator<Item = &Observation> {
        self.samples.iter().map(|(o, _)| o)
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.observations().any(|o| o.label == 1);
        let neg = self.observations().any(|o| o.label == 0);
        pos && neg
    }

    pub fn count_from(&self, provenance: Provenance) -> usize {
        self.samples.iter().filter(|(_, p)| *p == provenance).count()
    }
}

/// Loss breakdown of one evaluation of the mixed loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub ce_g: f64,
    pub ce_c: f64,
    pub triplet: f64,
    /// Per sample: its two cross-entropies plus its anchor hinge (0 when the
    /// sample is not a valid anchor).
    pub per_sample: Vec<f64>,
}

/// Embeds one observation.
pub fn forward(params: &ExtractorParams, obs: &Observation) -> Result<PartFeatures> {
    Ok(forward_batch(params, &[obs])?.features.pop().expect("one sample"))
}

/// Embeds a list of observations with one batched pass.
pub fn extract_all<'a>(
    params: &ExtractorParams,
    obs: impl IntoIterator<Item = &'a Observation>,
) -> Result<Vec<PartFeatures>> {
    let obs: Vec<&Observation> = obs.into_iter().collect();
    Ok(forward_batch(params, &obs)?.features)
}

/// Identity-head logits `(global, concatenated)`.
pub fn heads(params: &ExtractorParams, f: &PartFeatures) -> Result<([f64; 2], [f64; 2])> {
    let (g_in, c_in) = head_inputs(f)?;
    let t = &params.tensors;
    let lg = affine2(&g_in, &t.head_g, &t.head_g_bias);
    let lc = affine2(&c_in, &t.head_c, &t.head_c_bias);
    if !(lg.iter().chain(&lc).all(|v| v.is_finite())) {
        return Err(Error::Numeric { layer: "heads" });
    }
    Ok((lg, lc))
}

fn head_inputs(f: &PartFeatures) -> Result<(Array1<f64>, Array1<f64>)> {
    let n_vis = f.vis.count();
    if n_vis == 0 {
        return Err(Error::NothingVisible);
    }
    let mut g_in = Array1::zeros(f.f.ncols());
    for k in f.vis.visible() {
        g_in += &f.f.row(k);
    }
    g_in /= n_vis as f64;
    let c_in = Array1::from_iter(f.f.iter().copied());
    Ok((g_in, c_in))
}

fn affine2(x: &Array1<f64>, w: &Array2<f64>, b: &Array1<f64>) -> [f64; 2] {
    let y = x.dot(w) + b;
    [y[0], y[1]]
}

/// Mean-reduced mixed loss over the batch: cross-entropy of both heads plus
/// batch-hard part triplet loss.
pub fn mixed_loss(params: &ExtractorParams, batch: &TrainBatch, margin: f64) -> Result<LossReport> {
    let obs: Vec<&Observation> = batch.observations().collect();
    Ok(loss_and_grad(params, &obs, margin, false)?.0)
}

/// Loss report and gradient with respect to every parameter block.
pub fn loss_gradient(
    params: &ExtractorParams,
    batch: &TrainBatch,
    margin: f64,
) -> Result<(LossReport, Tensors)> {
    let obs: Vec<&Observation> = batch.observations().collect();
    let (report, grad) = loss_and_grad(params, &obs, margin, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// One plain SGD step on the mixed loss. The returned report is the loss
/// before the update.
pub fn sgd_step(
    params: &ExtractorParams,
    batch: &TrainBatch,
    lr: f64,
    margin: f64,
) -> Result<(ExtractorParams, LossReport)> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be >= 0, got {lr}")));
    }
    let (report, grad) = loss_gradient(params, batch, margin)?;
    let mut next = params.clone();
    next.tensors.scaled_add(-lr, &grad);
    if !next.tensors.all_finite() {
        return Err(Error::Numeric { layer: "sgd update" });
    }
    next.version = params.version + 1;
    Ok((next, report))
}

/// Per-query loss where each query is an anchor mined against `context`
/// (the queries never mine against each other).
pub fn per_sample_losses(
    params: &ExtractorParams,
    queries: &[&Observation],
    context: &[&Observation],
    margin: f64,
) -> Result<Vec<f64>> {
    let q_feats = forward_batch(params, queries)?.features;
    let c_feats = forward_batch(params, context)?.features;
    q_feats
        .iter()
        .zip(queries)
        .map(|(qf, q)| {
            let (lg, lc) = heads(params, qf)?;
            let mut loss = cross_entropy(lg, q.label).0 + cross_entropy(lc, q.label).0;
            let dist: Vec<Option<f64>> = c_feats.iter().map(|cf| masked_distance(qf, cf)).collect();
            let labels = context.iter().map(|c| c.label);
            if let Some(m) = mine(q.label, dist.iter().copied().zip(labels), None) {
                loss += (m.d_ap - m.d_an + margin).max(0.0);
            }
            Ok(loss)
        })
        .collect()
}

struct ForwardCache {
    /// (sample, part) for every visible row, in row order of the matrices.
    rows: Vec<(usize, usize)>,
    input: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    features: Vec<PartFeatures>,
}

fn forward_batch(params: &ExtractorParams, obs: &[&Observation]) -> Result<ForwardCache> {
    let d = params.dims;
    let t = &params.tensors;
    for o in obs {
        params.check_obs(o)?;
    }
    let rows: Vec<(usize, usize)> = obs
        .iter()
        .enumerate()
        .flat_map(|(s, o)| o.vis.visible().map(move |k| (s, k)))
        .collect();
    let mut input = Array2::zeros((rows.len(), d.d_raw));
    for (r, &(s, k)) in rows.iter().enumerate() {
        input.row_mut(r).assign(&obs[s].raw.row(k));
    }
    let mut pre = input.dot(&t.w1);
    for (r, &(_, k)) in rows.iter().enumerate() {
        let mut row = pre.row_mut(r);
        row += &t.b1;
        row += &t.part_embed.row(k);
    }
    if !pre.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: "layer1" });
    }
    let act = pre.mapv(|v| v.max(0.0));
    let out = act.dot(&t.w2) + &t.b2;
    if !out.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric { layer: "layer2" });
    }
    let mut features: Vec<PartFeatures> = obs
        .iter()
        .map(|o| PartFeatures {
            f: Array2::zeros((d.parts, d.embed)),
            vis: o.vis.clone(),
        })
        .collect();
    for (r, &(s, k)) in rows.iter().enumerate() {
        features[s].f.row_mut(k).assign(&out.row(r));
    }
    Ok(ForwardCache {
        rows,
        input,
        pre,
        act,
        features,
    })
}

/// Returns (loss, d loss / d logits) for a 2-class softmax cross-entropy.
fn cross_entropy(logits: [f64; 2], label: u8) -> (f64, [f64; 2]) {
    let m = logits[0].max(logits[1]);
    let e0 = (logits[0] - m).exp();
    let e1 = (logits[1] - m).exp();
    let z = e0 + e1;
    let y = label as usize;
    let loss = z.ln() + m - logits[y];
    let mut grad = [e0 / z, e1 / z];
    grad[y] -= 1.0;
    (loss, grad)
}

fn masked_distance(a: &PartFeatures, b: &PartFeatures) -> Option<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for k in a.vis.intersect(&b.vis).visible() {
        total += row_distance(a.f.row(k), b.f.row(k));
        n += 1;
    }
    (n > 0).then(|| total / n as f64)
}

struct Mined {
    pos: usize,
    neg: usize,
    d_ap: f64,
    d_an: f64,
}

/// Batch-hard mining for one anchor over `(distance, label)` candidates.
/// Ties resolve to the lowest index.
fn mine(
    anchor_label: u8,
    candidates: impl Iterator<Item = (Option<f64>, u8)>,
    skip: Option<usize>,
) -> Option<Mined> {
    let mut pos: Option<(usize, f64)> = None;
    let mut neg: Option<(usize, f64)> = None;
    for (j, (d, label)) in candidates.enumerate() {
        if Some(j) == skip {
            continue;
        }
        let Some(d) = d else { continue };
        if label == anchor_label {
            if pos.is_none_or(|(_, best)| d > best) {
                pos = Some((j, d));
            }
        } else if neg.is_none_or(|(_, best)| d < best) {
            neg = Some((j, d));
        }
    }
    let ((pos, d_ap), (neg, d_an)) = (pos?, neg?);
    Some(Mined {
        pos,
        neg,
        d_ap,
        d_an,
    })
}

/// Adds `coef * d d(feats[a], feats[b]) / d F` into `grads[a]` and `grads[b]`.
fn distance_backward(feats: &[PartFeatures], a: usize, b: usize, coef: f64, grads: &mut [Array2<f64>]) {
    let (fa, fb) = (&feats[a], &feats[b]);
    let common = fa.vis.intersect(&fb.vis);
    let n = common.count() as f64;
    for k in common.visible() {
        let diff = &fa.f.row(k) - &fb.f.row(k);
        let norm = diff.dot(&diff).sqrt();
        if norm == 0.0 {
            continue;
        }
        let g = diff * (coef / (n * norm));
        let mut ra = grads[a].row_mut(k);
        ra += &g;
        let mut rb = grads[b].row_mut(k);
        rb -= &g;
    }
}

fn loss_and_grad(
    params: &ExtractorParams,
    obs: &[&Observation],
    margin: f64,
    want_grad: bool,
) -> Result<(LossReport, Option<Tensors>)> {
    let has_pos = obs.iter().any(|o| o.label == 1);
    let has_neg = obs.iter().any(|o| o.label == 0);
    if !(has_pos && has_neg) {
        return Err(Error::MiningImpossible);
    }
    let dims = params.dims;
    let t = &params.tensors;
    let cache = forward_batch(params, obs)?;
    let feats = &cache.features;
    let n = obs.len();
    let inv_n = 1.0 / n as f64;

    let mut grad = want_grad.then(|| Tensors::zeros(dims));
    let mut d_feat: Vec<Array2<f64>> = if want_grad {
        vec![Array2::zeros((dims.parts, dims.embed)); n]
    } else {
        Vec::new()
    };

    let mut per_sample = vec![0.0; n];
    let mut ce_g = 0.0;
    let mut ce_c = 0.0;
    for (s, (f, o)) in feats.iter().zip(obs).enumerate() {
        let (g_in, c_in) = head_inputs(f)?;
        let lg = affine2(&g_in, &t.head_g, &t.head_g_bias);
        let lc = affine2(&c_in, &t.head_c, &t.head_c_bias);
        if !(lg.iter().chain(&lc).all(|v| v.is_finite())) {
            return Err(Error::Numeric { layer: "heads" });
        }
        let (lossg, dlg) = cross_entropy(lg, o.label);
        let (lossc, dlc) = cross_entropy(lc, o.label);
        ce_g += lossg;
        ce_c += lossc;
        per_sample[s] = lossg + lossc;

        if let Some(gr) = grad.as_mut() {
            let dlg = Array1::from_iter(dlg.iter().map(|v| v * inv_n));
            let dlc = Array1::from_iter(dlc.iter().map(|v| v * inv_n));
            for c in 0..dims.embed {
                for j in 0..2 {
                    gr.head_g[[c, j]] += g_in[c] * dlg[j];
                }
            }
            gr.head_g_bias += &dlg;
            for r in 0..c_in.len() {
                if c_in[r] != 0.0 {
                    for j in 0..2 {
                        gr.head_c[[r, j]] += c_in[r] * dlc[j];
                    }
                }
            }
            gr.head_c_bias += &dlc;

            let dg_in = t.head_g.dot(&dlg) / f.vis.count() as f64;
            let dc_in = t.head_c.dot(&dlc);
            let df = &mut d_feat[s];
            for k in f.vis.visible() {
                let mut row = df.row_mut(k);
                row += &dg_in;
                row += &dc_in.slice(s![k * dims.embed..(k + 1) * dims.embed]);
            }
        }
    }
    ce_g *= inv_n;
    ce_c *= inv_n;

    // Batch-hard part triplet loss.
    let mut dist = vec![None; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = masked_distance(&feats[i], &feats[j]);
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut hinges: Vec<(usize, Mined, f64)> = Vec::new();
    for i in 0..n {
        let cands = (0..n).map(|j| (dist[i * n + j], obs[j].label));
        if let Some(m) = mine(obs[i].label, cands, Some(i)) {
            let h = (m.d_ap - m.d_an + margin).max(0.0);
            hinges.push((i, m, h));
        }
    }
    let triplet = if hinges.is_empty() {
        0.0
    } else {
        hinges.iter().map(|(_, _, h)| h).sum::<f64>() / hinges.len() as f64
    };
    for (i, _, h) in &hinges {
        per_sample[*i] += h;
    }

    if let Some(gr) = grad.as_mut() {
        let inv_v = if hinges.is_empty() {
            0.0
        } else {
            1.0 / hinges.len() as f64
        };
        for (i, m, h) in &hinges {
            if *h <= 0.0 {
                continue;
            }
            distance_backward(feats, *i, m.pos, inv_v, &mut d_feat);
            distance_backward(feats, *i, m.neg, -inv_v, &mut d_feat);
        }

        // Back through the shared MLP.
        let mut d_out = Array2::zeros((cache.rows.len(), dims.embed));
        for (r, &(s, k)) in cache.rows.iter().enumerate() {
            d_out.row_mut(r).assign(&d_feat[s].row(k));
        }
        gr.w2 = cache.act.t().dot(&d_out);
        gr.b2 = d_out.sum_axis(Axis(0));
        let mut d_pre = d_out.dot(&t.w2.t());
        ndarray::Zip::from(&mut d_pre)
            .and(&cache.pre)
            .for_each(|g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
        gr.w1 = cache.input.t().dot(&d_pre);
        gr.b1 = d_pre.sum_axis(Axis(0));
        for (r, &(_, k)) in cache.rows.iter().enumerate() {
            let mut row = gr.part_embed.row_mut(k);
            row += &d_pre.row(r);
        }
        if !gr.all_finite() {
            return Err(Error::Numeric { layer: "backward" });
        }
    }

    let total = ce_g + ce_c + triplet;
    if !total.is_finite() {
        return Err(Error::Numeric { layer: "loss" });
    }
    Ok((
        LossReport {
            total,
            ce_g,
            ce_c,
            triplet,
            per_sample,
        },
        grad,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{part_distance, BBox, VisibilityMask};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dims() -> Dims {
        Dims {
            d_raw: 4,
            hidden: 6,
            embed: 3,
            parts: 3,
        }
    }

    fn obs(label: u8, vis: &[bool], raw: Array2<f64>) -> Observation {
        Observation::new(
            0,
            label as u64,
            label,
            BBox::new(10.0, 10.0, 5.0, 5.0).unwrap(),
            VisibilityMask::new(vis.to_vec()),
            raw,
        )
        .unwrap()
    }

    fn random_obs(rng: &mut ChaCha8Rng, d: Dims, label: u8) -> Observation {
        let n = Normal::new(0.0, 1.0).unwrap();
        let raw = Array2::from_shape_fn((d.parts, d.d_raw), |_| n.sample(rng));
        obs(label, &vec![true; d.parts], raw)
    }

    #[test]
    fn zero_params_give_zero_features_and_logits() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = ExtractorParams::zeros(d);
        let o = random_obs(&mut rng, d, 1);
        let f = forward(&p, &o).unwrap();
        assert!(f.f.iter().all(|&v| v == 0.0));
        assert_eq!(heads(&p, &f).unwrap(), ([0.0, 0.0], [0.0, 0.0]));
    }

    #[test]
    fn forward_is_deterministic_and_masks_locally() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ExtractorParams::init(d, &mut rng);
        let o = random_obs(&mut rng, d, 1);
        let a = forward(&p, &o).unwrap();
        let b = forward(&p, &o).unwrap();
        assert_eq!(a, b);

        let mut vis = o.vis.clone();
        vis.set(2, false);
        let masked = Observation::new(0, 1, 1, o.bbox, vis, o.raw.clone()).unwrap();
        let m = forward(&p, &masked).unwrap();
        assert_eq!(m.f.row(0), a.f.row(0));
        assert_eq!(m.f.row(1), a.f.row(1));
        assert!(m.f.row(2).iter().all(|&v| v == 0.0));
        assert!(a.f.row(2).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn pooled_input_for_single_and_opposite_rows() {
        let f = PartFeatures::new(
            ndarray::array![[1.0, 2.0], [0.0, 0.0], [5.0, 5.0]],
            VisibilityMask::new(vec![true, false, false]),
        )
        .unwrap();
        let (g, c) = head_inputs(&f).unwrap();
        assert_eq!(g, ndarray::array![1.0, 2.0]);
        assert_eq!(c.len(), 6);
        assert_eq!(c[4], 0.0);

        let f = PartFeatures::new(
            ndarray::array![[1.0, -2.0], [-1.0, 2.0]],
            VisibilityMask::all(2),
        )
        .unwrap();
        assert_eq!(head_inputs(&f).unwrap().0, ndarray::array![0.0, 0.0]);

        let f = PartFeatures::new(Array2::zeros((2, 2)), VisibilityMask::none(2)).unwrap();
        let p = ExtractorParams::zeros(Dims {
            d_raw: 1,
            hidden: 1,
            embed: 2,
            parts: 2,
        });
        assert!(matches!(heads(&p, &f), Err(Error::NothingVisible)));
    }

    #[test]
    fn uniform_softmax_at_zero_params() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ExtractorParams::zeros(d);
        let batch = TrainBatch::from_observations(
            (0..5).map(|i| random_obs(&mut rng, d, (i % 2) as u8)),
            Provenance::ShortTerm,
        );
        let r = mixed_loss(&p, &batch, DEFAULT_MARGIN).unwrap();
        assert!((r.ce_g - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((r.ce_c - std::f64::consts::LN_2).abs() < 1e-12);
        // All features are zero, so every hinge sits at the margin.
        assert!((r.triplet - 0.3).abs() < 1e-12);
        assert!((r.total - (r.ce_g + r.ce_c + r.triplet)).abs() < 1e-9);
    }

    #[test]
    fn single_class_batch_is_rejected() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ExtractorParams::init(d, &mut rng);
        let batch = TrainBatch::from_observations(
            (0..3).map(|_| random_obs(&mut rng, d, 1)),
            Provenance::ShortTerm,
        );
        assert!(matches!(
            mixed_loss(&p, &batch, DEFAULT_MARGIN),
            Err(Error::MiningImpossible)
        ));
    }

    /// Exhaustive oracle: enumerates every (anchor, positive, negative)
    /// triple and keeps the worst per anchor.
    fn triplet_oracle(feats: &[PartFeatures], labels: &[u8], margin: f64) -> f64 {
        let n = feats.len();
        let mut per_anchor = Vec::new();
        for a in 0..n {
            let mut worst: Option<f64> = None;
            for p in 0..n {
                for q in 0..n {
                    if p == a || labels[p] != labels[a] || labels[q] == labels[a] {
                        continue;
                    }
                    let (Ok(dp), Ok(dq)) = (
                        part_distance(&feats[a], &feats[p]),
                        part_distance(&feats[a], &feats[q]),
                    ) else {
                        continue;
                    };
                    let v = dp - dq;
                    worst = Some(worst.map_or(v, |w: f64| w.max(v)));
                }
            }
            if let Some(w) = worst {
                per_anchor.push((w + margin).max(0.0));
            }
        }
        if per_anchor.is_empty() {
            0.0
        } else {
            per_anchor.iter().sum::<f64>() / per_anchor.len() as f64
        }
    }

    /// A network whose features equal the raw input rows (1-d embedding).
    fn identity_like() -> ExtractorParams {
        let d = Dims {
            d_raw: 1,
            hidden: 2,
            embed: 1,
            parts: 1,
        };
        let mut p = ExtractorParams::zeros(d);
        p.tensors.w1 = ndarray::array![[1.0, -1.0]];
        p.tensors.w2 = ndarray::array![[1.0], [-1.0]];
        p
    }

    #[test]
    fn hand_computed_triplet_matches_enumeration() {
        // Positives at 0 and 4, negative at 4 (equal to the second positive).
        let p = identity_like();
        let samples = [
            obs(1, &[true], ndarray::array![[0.0]]),
            obs(1, &[true], ndarray::array![[4.0]]),
            obs(0, &[true], ndarray::array![[4.0]]),
        ];
        let batch = TrainBatch::from_observations(samples.iter().cloned(), Provenance::ShortTerm);
        let r = mixed_loss(&p, &batch, 0.3).unwrap();
        // anchor 0: d_ap = 4, d_an = 4 -> 0.3
        // anchor 1: d_ap = 4, d_an = 0 -> 4.3
        // anchor 2: no other negative -> skipped
        assert!((r.triplet - (0.3 + 4.3) / 2.0).abs() < 1e-12);
        let feats = extract_all(&p, samples.iter()).unwrap();
        let oracle = triplet_oracle(&feats, &[1, 1, 0], 0.3);
        assert!((r.triplet - oracle).abs() < 1e-12);
    }

    #[test]
    fn triplet_matches_enumeration_on_random_batches() {
        let d = Dims {
            d_raw: 5,
            hidden: 7,
            embed: 4,
            parts: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let p = ExtractorParams::init(d, &mut rng);
            let samples: Vec<Observation> = (0..7)
                .map(|i| {
                    let mut o = random_obs(&mut rng, d, (i % 3 == 0) as u8);
                    let vis: Vec<bool> = (0..d.parts).map(|_| rng.random_bool(0.6)).collect();
                    let mut vis = VisibilityMask::new(vis);
                    if !vis.any() {
                        vis.set(0, true);
                    }
                    o = Observation::new(0, i, o.label, o.bbox, vis, o.raw).unwrap();
                    o
                })
                .collect();
            let batch =
                TrainBatch::from_observations(samples.iter().cloned(), Provenance::ShortTerm);
            let r = mixed_loss(&p, &batch, 0.3).unwrap();
            let feats = extract_all(&p, samples.iter()).unwrap();
            let labels: Vec<u8> = samples.iter().map(|o| o.label).collect();
            assert!((r.triplet - triplet_oracle(&feats, &labels, 0.3)).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_only_bumps_version() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = ExtractorParams::init(d, &mut rng);
        let batch = TrainBatch::from_observations(
            (0..4).map(|i| random_obs(&mut rng, d, (i % 2) as u8)),
            Provenance::ShortTerm,
        );
        let (next, _) = sgd_step(&p, &batch, 0.0, 0.3).unwrap();
        assert_eq!(next.tensors, p.tensors);
        assert_eq!(next.version, p.version + 1);
        assert!(sgd_step(&p, &batch, -0.1, 0.3).is_err());
    }

    #[test]
    fn descent_on_fixed_separable_batch() {
        let d = Dims::default();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = ExtractorParams::init(d, &mut rng);
        let target = random_obs(&mut rng, d, 1);
        let other = random_obs(&mut rng, d, 0);
        let jitter = |o: &Observation, rng: &mut ChaCha8Rng| {
            let n = Normal::new(0.0, 0.1).unwrap();
            let raw = o.raw.mapv(|v| v + n.sample(rng));
            Observation::new(0, 0, o.label, o.bbox, o.vis.clone(), raw).unwrap()
        };
        let samples = vec![
            jitter(&target, &mut rng),
            jitter(&target, &mut rng),
            jitter(&other, &mut rng),
            jitter(&other, &mut rng),
        ];
        let batch = TrainBatch::from_observations(samples, Provenance::ShortTerm);
        let mut prev = f64::INFINITY;
        for _ in 0..12 {
            let (next, r) = sgd_step(&p, &batch, 0.01, 0.3).unwrap();
            assert!(r.total < prev, "{} !< {}", r.total, prev);
            prev = r.total;
            p = next;
        }
    }

    #[test]
    fn snapshot_is_independent() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = ExtractorParams::init(d, &mut rng);
        let snap = p.snapshot();
        let o = random_obs(&mut rng, d, 1);
        let before = forward(&p, &o).unwrap();
        let batch = TrainBatch::from_observations(
            vec![o.clone(), random_obs(&mut rng, d, 0)],
            Provenance::ShortTerm,
        );
        let (p2, _) = sgd_step(&p, &batch, 0.5, 0.3).unwrap();
        assert_ne!(p2.tensors, snap.tensors);
        assert_eq!(snap, p);
        assert_eq!(snap.snapshot(), snap);
        assert_eq!(forward(&snap, &o).unwrap(), before);
    }

    #[test]
    fn invisible_raw_content_does_not_change_loss() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ExtractorParams::init(d, &mut rng);
        let a = random_obs(&mut rng, d, 1);
        let b = random_obs(&mut rng, d, 0);
        let vis = VisibilityMask::new(vec![true, false, true]);
        let a1 = Observation::new(0, 1, 1, a.bbox, vis.clone(), a.raw.clone()).unwrap();
        let mut raw2 = a.raw.clone();
        raw2.row_mut(1).fill(123.0);
        let a2 = Observation::new(0, 1, 1, a.bbox, vis, raw2).unwrap();
        let l1 = mixed_loss(
            &p,
            &TrainBatch::from_observations(vec![a1, b.clone()], Provenance::ShortTerm),
            0.3,
        )
        .unwrap();
        let l2 = mixed_loss(
            &p,
            &TrainBatch::from_observations(vec![a2, b], Provenance::ShortTerm),
            0.3,
        )
        .unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn non_finite_layer_is_named() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut p = ExtractorParams::init(d, &mut rng);
        p.tensors.b1[0] = f64::INFINITY;
        let o = random_obs(&mut rng, d, 1);
        assert!(matches!(
            forward(&p, &o),
            Err(Error::Numeric { layer: "layer1" })
        ));
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let p = ExtractorParams::zeros(small_dims());
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let o = random_obs(&mut rng, Dims::default(), 1);
        assert!(matches!(forward(&p, &o), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ExtractorParams::init(Dims::default(), &mut rng);
        p.version = 77;
        let mut buf = Vec::new();
        p.write_checkpoint(&mut buf).unwrap();
        let back = ExtractorParams::read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, p);
        buf.push(0);
        assert!(ExtractorParams::read_checkpoint(buf.as_slice()).is_err());
        assert!(ExtractorParams::read_checkpoint(&b"garbage!"[..]).is_err());
    }

    #[test]
    fn per_sample_losses_match_batch_evaluation() {
        let d = small_dims();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let p = ExtractorParams::init(d, &mut rng);
        let context: Vec<Observation> = (0..5)
            .map(|i| random_obs(&mut rng, d, (i % 2) as u8))
            .collect();
        let queries: Vec<Observation> = (0..3)
            .map(|i| random_obs(&mut rng, d, (i % 2) as u8))
            .collect();
        let ctx: Vec<&Observation> = context.iter().collect();
        let qs: Vec<&Observation> = queries.iter().collect();
        let fast = per_sample_losses(&p, &qs, &ctx, 0.3).unwrap();
        for (q, got) in queries.iter().zip(fast) {
            let mut batch = TrainBatch::new();
            batch.push(q.clone(), Provenance::LongTerm);
            for c in &context {
                batch.push(c.clone(), Provenance::ShortTerm);
            }
            let want = mixed_loss(&p, &batch, 0.3).unwrap().per_sample[0];
            assert!((got - want).abs() < 1e-12);
        }
    }
}
