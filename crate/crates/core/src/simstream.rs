//! Deterministic synthetic world standing in for the camera, detector and
//! tracker.
//!
//! Each person has a latent appearance (one descriptor row per part, front
//! and back halves independent) and a trajectory in the image. Per frame, a
//! visible part's descriptor is its latent row plus the current lighting
//! bias plus Gaussian noise. Only the half of the body facing the camera is
//! visible; orientations flip at random or by script. Occlusions hide parts
//! or whole persons, and a person re-emerging from a full occlusion gets a
//! fresh track id, just like a real tracker losing and re-creating a track.
//!
//! The configuration's seed determines the whole stream.

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::domain::{BBox, Observation, VisibilityMask, BACK_PARTS, FRONT_PARTS, NUM_PARTS};
use crate::error::{Error, Result};

/// Number of evaluation segments a stream is divided into.
pub const SEGMENTS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftEvent {
    pub frame: u64,
    /// Norm of the lighting bias added from this frame on.
    pub scale: f64,
    /// Frames over which the bias fades in linearly; 0 means a step.
    #[serde(default)]
    pub ramp: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum OcclusionMode {
    /// The person disappears from the frame.
    Full,
    /// The listed parts become invisible.
    Parts { parts: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Occlusion {
    pub start: u64,
    /// Exclusive.
    pub end: u64,
    pub person: usize,
    #[serde(flatten)]
    pub mode: OcclusionMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Orientation {
    Front,
    Back,
}

impl Orientation {
    fn flipped(self) -> Self {
        match self {
            Orientation::Front => Orientation::Back,
            Orientation::Back => Orientation::Front,
        }
    }

    fn parts(self) -> std::ops::Range<usize> {
        match self {
            Orientation::Front => FRONT_PARTS,
            Orientation::Back => BACK_PARTS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViewpointChange {
    pub frame: u64,
    pub person: usize,
    pub orientation: Orientation,
}

fn default_d_raw() -> usize {
    32
}

fn default_latent_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    /// Person 0 is the target; the rest are distractors.
    pub persons: usize,
    pub frames: u64,
    /// 0 = independent appearance, 1 = identical to the target.
    pub distractor_similarity: f64,
    #[serde(default)]
    pub drift_schedule: Vec<DriftEvent>,
    #[serde(default)]
    pub occlusions: Vec<Occlusion>,
    /// Per-person, per-frame probability of turning around.
    #[serde(default)]
    pub flip_probability: f64,
    /// Alternative orientation model: each view is held for a number of
    /// frames drawn uniformly from `[min, max]`.
    #[serde(default)]
    pub flip_dwell: Option<[u64; 2]>,
    #[serde(default)]
    pub viewpoint_script: Vec<ViewpointChange>,
    pub noise_sigma: f64,
    pub image_width: f64,
    pub image_height: f64,
    #[serde(default = "default_d_raw")]
    pub d_raw: usize,
    #[serde(default = "default_latent_scale")]
    pub latent_scale: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.persons == 0 {
            return err("scenario needs at least one person".into());
        }
        if self.frames == 0 {
            return err("scenario needs at least one frame".into());
        }
        if !(0.0..=1.0).contains(&self.distractor_similarity) {
            return err("distractor_similarity must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return err("flip_probability must lie in [0, 1]".into());
        }
        if let Some([lo, hi]) = self.flip_dwell {
            if lo == 0 || lo > hi {
                return err("flip_dwell must satisfy 1 <= min <= max".into());
            }
            if self.flip_probability > 0.0 {
                return err("flip_dwell and flip_probability are exclusive".into());
            }
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return err("noise_sigma must be non-negative".into());
        }
        if !(self.image_width > 0.0 && self.image_height > 0.0) {
            return err("image size must be positive".into());
        }
        if self.d_raw == 0 {
            return err("d_raw must be positive".into());
        }
        for d in &self.drift_schedule {
            if d.frame >= self.frames || !d.scale.is_finite() {
                return err(format!("drift event at frame {} out of range", d.frame));
            }
        }
        for o in &self.occlusions {
            if o.start >= o.end || o.end > self.frames || o.person >= self.persons {
                return err(format!(
                    "occlusion [{}, {}) of person {} out of range",
                    o.start, o.end, o.person
                ));
            }
            if let OcclusionMode::Parts { parts } = &o.mode {
                if parts.iter().any(|&p| p >= NUM_PARTS) {
                    return err("occluded part index out of range".into());
                }
            }
        }
        for v in &self.viewpoint_script {
            if v.frame >= self.frames || v.person >= self.persons {
                return err(format!("viewpoint change at frame {} out of range", v.frame));
            }
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// A shipped preset: `corridor` or `room`.
    pub fn preset(name: &str) -> Result<Self> {
        let text = match name {
            "corridor" => include_str!("../presets/corridor.toml"),
            "room" => include_str!("../presets/room.toml"),
            other => return Err(Error::Config(format!("unknown preset {other:?}"))),
        };
        Self::from_toml(text)
    }

    pub fn segment_of(&self, frame: u64) -> usize {
        ((SEGMENTS as u64 * frame) / self.frames) as usize
    }

    /// First frame of every segment, plus `frames` as the final bound.
    pub fn segment_bounds(&self) -> Vec<u64> {
        (0..=SEGMENTS as u64)
            .map(|j| (j * self.frames).div_ceil(SEGMENTS as u64))
            .collect()
    }
}

/// One person's appearance and motion.
#[derive(Debug, Clone)]
pub struct PersonModel {
    /// N x D_raw.
    pub latent: Array2<f64>,
    center_x: f64,
    amplitude_x: f64,
    period: f64,
    phase: f64,
    depth_amplitude: f64,
    start_orientation: Orientation,
}

impl PersonModel {
    fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        d_raw: usize,
        latent_scale: f64,
        width: f64,
        is_target: bool,
    ) -> Self {
        let latent = Array2::from_shape_fn((NUM_PARTS, d_raw), |_| {
            latent_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let (center_x, amplitude_x) = if is_target {
            (width / 2.0, width * rng.random_range(0.05..0.15))
        } else {
            (
                width * rng.random_range(0.3..0.7),
                width * rng.random_range(0.2..0.4),
            )
        };
        Self {
            latent,
            center_x,
            amplitude_x,
            period: rng.random_range(150.0..400.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
            depth_amplitude: rng.random_range(0.05..0.25),
            start_orientation: if rng.random_bool(0.5) {
                Orientation::Front
            } else {
                Orientation::Back
            },
        }
    }

    /// Bounding box at `frame`, kept inside the image.
    pub fn bbox(&self, frame: u64, width: f64, height: f64) -> BBox {
        let t = frame as f64;
        let angle = std::f64::consts::TAU * t / self.period + self.phase;
        let scale = 1.0 + self.depth_amplitude * (0.7 * angle).cos();
        let h = (0.45 * height * scale).min(height * 0.95);
        let w = h * 0.4;
        let cx = (self.center_x + self.amplitude_x * angle.sin()).clamp(w / 2.0, width - w / 2.0);
        let cy = height / 2.0;
        BBox { cx, cy, w, h }
    }
}

/// Ground truth for one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTruth {
    pub frame: u64,
    pub gt_target_bbox: BBox,
    /// The target's current track id, also while it is hidden.
    pub gt_target_track_id: u64,
    pub target_visible: bool,
    pub visible_tracks: Vec<u64>,
    pub segment_index: usize,
}

/// Direction-scaled bias of every drift event, with its onset and ramp.
fn bias_vectors<R: Rng + ?Sized>(
    cfg: &ScenarioConfig,
    rng: &mut R,
) -> Vec<(u64, u64, Array1<f64>)> {
    let mut events = cfg.drift_schedule.clone();
    events.sort_by_key(|e| e.frame);
    events
        .iter()
        .map(|e| {
            let dir = Array1::from_shape_fn(cfg.d_raw, |_| rng.sample::<f64, _>(StandardNormal));
            let norm = dir.dot(&dir).sqrt();
            (e.frame, e.ramp, dir * (e.scale / norm))
        })
        .collect()
}

/// Iterator over `(observations, truth)` for every frame of a scenario.
#[derive(Debug, Clone)]
pub struct ScenarioStream {
    cfg: ScenarioConfig,
    persons: Vec<PersonModel>,
    biases: Vec<(u64, u64, Array1<f64>)>,
    orientation: Vec<Orientation>,
    next_flip: Vec<u64>,
    track_ids: Vec<u64>,
    was_hidden: Vec<bool>,
    next_track_id: u64,
    rng: ChaCha8Rng,
    noise: Normal<f64>,
    frame: u64,
}

impl ScenarioStream {
    pub fn new(cfg: ScenarioConfig) -> Result<Self> {
        cfg.validate()?;
        let mut world = ChaCha8Rng::seed_from_u64(cfg.seed);
        world.set_stream(0);
        let mut persons: Vec<PersonModel> = (0..cfg.persons)
            .map(|p| {
                PersonModel::sample(
                    &mut world,
                    cfg.d_raw,
                    cfg.latent_scale,
                    cfg.image_width,
                    p == 0,
                )
            })
            .collect();
        let eps = cfg.distractor_similarity;
        let keep = (1.0 - eps * eps).sqrt();
        let target_latent = persons[0].latent.clone();
        for p in persons.iter_mut().skip(1) {
            p.latent = &target_latent * eps + &p.latent * keep;
        }
        let biases = bias_vectors(&cfg, &mut world);
        let orientation = persons.iter().map(|p| p.start_orientation).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let n = cfg.persons;
        // Random phase: the first flip comes within one maximal dwell.
        let next_flip = match cfg.flip_dwell {
            Some([_, hi]) => (0..n).map(|_| rng.random_range(1..=hi)).collect(),
            None => vec![u64::MAX; n],
        };
        Ok(Self {
            noise: Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0"),
            persons,
            biases,
            orientation,
            next_flip,
            track_ids: (1..=n as u64).collect(),
            was_hidden: vec![false; n],
            next_track_id: n as u64 + 1,
            rng,
            frame: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn persons(&self) -> &[PersonModel] {
        &self.persons
    }

    /// Lighting bias in effect at `frame`: the sum of all events so far,
    /// each scaled by how far its ramp has progressed.
    pub fn bias_at(&self, frame: u64) -> Array1<f64> {
        let mut b = Array1::zeros(self.cfg.d_raw);
        for (start, ramp, v) in &self.biases {
            if *start > frame {
                continue;
            }
            let progress = if *ramp == 0 {
                1.0
            } else {
                ((frame - start + 1) as f64 / *ramp as f64).min(1.0)
            };
            b.scaled_add(progress, v);
        }
        b
    }

    fn render(&mut self, person: usize, vis: VisibilityMask, bias: &Array1<f64>) -> Array2<f64> {
        let latent = &self.persons[person].latent;
        let sigma = self.cfg.noise_sigma;
        let mut raw = Array2::zeros(latent.dim());
        for k in vis.visible() {
            let mut row = raw.row_mut(k);
            row.assign(&latent.row(k));
            row += bias;
            if sigma > 0.0 {
                for v in row.iter_mut() {
                    *v += self.noise.sample(&mut self.rng);
                }
            }
        }
        raw
    }
}

impl Iterator for ScenarioStream {
    type Item = (Vec<Observation>, FrameTruth);

    fn next(&mut self) -> Option<Self::Item> {
        let t = self.frame;
        if t >= self.cfg.frames {
            return None;
        }
        self.frame += 1;
        let (w, h) = (self.cfg.image_width, self.cfg.image_height);

        // Orientation: random flips first, then the script overrides.
        for p in 0..self.cfg.persons {
            let flip = match self.cfg.flip_dwell {
                Some([lo, hi]) => {
                    let due = self.next_flip[p] == t;
                    if due {
                        self.next_flip[p] = t + self.rng.random_range(lo..=hi);
                    }
                    due
                }
                None => t > 0 && self.rng.random_bool(self.cfg.flip_probability),
            };
            if flip {
                self.orientation[p] = self.orientation[p].flipped();
            }
        }
        for v in &self.cfg.viewpoint_script {
            if v.frame == t {
                self.orientation[v.person] = v.orientation;
            }
        }

        let bias = self.bias_at(t);
        let mut observations = Vec::new();
        let mut target_visible = false;
        for p in 0..self.cfg.persons {
            let mut vis =
                VisibilityMask::from_indices(NUM_PARTS, self.orientation[p].parts());
            let mut hidden = false;
            for o in &self.cfg.occlusions {
                if o.person == p && (o.start..o.end).contains(&t) {
                    match &o.mode {
                        OcclusionMode::Full => hidden = true,
                        OcclusionMode::Parts { parts } => {
                            for &k in parts {
                                vis.set(k, false);
                            }
                        }
                    }
                }
            }
            if hidden {
                self.was_hidden[p] = true;
                continue;
            }
            if self.was_hidden[p] {
                self.was_hidden[p] = false;
                self.track_ids[p] = self.next_track_id;
                self.next_track_id += 1;
            }
            if !vis.any() {
                continue;
            }
            let raw = self.render(p, vis.clone(), &bias);
            let bbox = self.persons[p].bbox(t, w, h);
            let obs = Observation::new(t, self.track_ids[p], (p == 0) as u8, bbox, vis, raw)
                .expect("generated observations are valid");
            target_visible |= p == 0;
            observations.push(obs);
        }
        let truth = FrameTruth {
            frame: t,
            gt_target_bbox: self.persons[0].bbox(t, w, h),
            gt_target_track_id: self.track_ids[0],
            target_visible,
            visible_tracks: observations.iter().map(|o| o.track_id).collect(),
            segment_index: self.cfg.segment_of(t),
        };
        Some((observations, truth))
    }
}

/// Convenience wrapper around [`ScenarioStream::new`].
pub fn generate(cfg: &ScenarioConfig) -> Result<ScenarioStream> {
    ScenarioStream::new(cfg.clone())
}

/// Writes a stream as observation records plus a truth sidecar with lines
/// `frame,gt_track_id,cx,cy,w,h,segment,target_visible`.
pub fn write_stream(stream: ScenarioStream, obs_path: &Path, truth_path: &Path) -> Result<u64> {
    let open = |p: &Path| {
        std::fs::File::create(p)
            .map(std::io::BufWriter::new)
            .map_err(|e| Error::io(p, e))
    };
    let mut obs_w = open(obs_path)?;
    let mut truth_w = open(truth_path)?;
    let mut frames = 0;
    for (obs, truth) in stream {
        for o in &obs {
            writeln!(obs_w, "{}", o.to_record()).map_err(|e| Error::io(obs_path, e))?;
        }
        let b = truth.gt_target_bbox;
        writeln!(
            truth_w,
            "{},{},{},{},{},{},{},{}",
            truth.frame,
            truth.gt_target_track_id,
            b.cx,
            b.cy,
            b.w,
            b.h,
            truth.segment_index,
            truth.target_visible as u8
        )
        .map_err(|e| Error::io(truth_path, e))?;
        frames += 1;
    }
    obs_w.flush().map_err(|e| Error::io(obs_path, e))?;
    truth_w.flush().map_err(|e| Error::io(truth_path, e))?;
    Ok(frames)
}

/// One pre-training sample. Labels are relative to the episode's target.
#[derive(Debug, Clone, PartialEq)]
pub struct WarmupSample {
    pub obs: Observation,
    pub person: usize,
    pub episode_target: usize,
}

/// IID labeled set from a population disjoint from every scenario person.
///
/// Frame `i` makes person `i mod P` the target and emits one positive of it
/// and one negative from another person (round-robin), so both classes and
/// all persons are evenly represented.
pub fn warmup_population(
    seed: u64,
    persons: usize,
    frames: usize,
    d_raw: usize,
    noise_sigma: f64,
) -> Vec<WarmupSample> {
    if frames == 0 || persons < 2 {
        return Vec::new();
    }
    let mut world = ChaCha8Rng::seed_from_u64(seed);
    world.set_stream(2);
    let population: Vec<Array2<f64>> = (0..persons)
        .map(|_| {
            Array2::from_shape_fn((NUM_PARTS, d_raw), |_| world.sample::<f64, _>(StandardNormal))
        })
        .collect();
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma >= 0");
    let render = |person: usize, label: u8, frame: usize, rng: &mut ChaCha8Rng| {
        let orientation = if rng.random_bool(0.5) {
            Orientation::Front
        } else {
            Orientation::Back
        };
        let vis = VisibilityMask::from_indices(NUM_PARTS, orientation.parts());
        let mut raw = population[person].clone();
        if noise_sigma > 0.0 {
            raw.mapv_inplace(|v| v + noise.sample(rng));
        }
        let bbox = BBox {
            cx: 100.0,
            cy: 100.0,
            w: 40.0,
            h: 100.0,
        };
        Observation::new(frame as u64, person as u64 + 1, label, bbox, vis, raw)
            .expect("valid warm-up sample")
    };
    let mut out = Vec::with_capacity(2 * frames);
    for i in 0..frames {
        let target = i % persons;
        let round = i / persons;
        let other = (target + 1 + round % (persons - 1)) % persons;
        out.push(WarmupSample {
            obs: render(target, 1, i, &mut world),
            person: target,
            episode_target: target,
        });
        out.push(WarmupSample {
            obs: render(other, 0, i, &mut world),
            person: other,
            episode_target: target,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basic(seed: u64) -> ScenarioConfig {
        ScenarioConfig {
            name: "test".into(),
            seed,
            persons: 3,
            frames: 80,
            distractor_similarity: 0.2,
            drift_schedule: vec![],
            occlusions: vec![],
            flip_probability: 0.05,
            flip_dwell: None,
            viewpoint_script: vec![],
            noise_sigma: 0.3,
            image_width: 640.0,
            image_height: 480.0,
            d_raw: 8,
            latent_scale: 1.0,
        }
    }

    #[test]
    fn same_seed_same_stream() {
        let a: Vec<_> = generate(&basic(4)).unwrap().collect();
        let b: Vec<_> = generate(&basic(4)).unwrap().collect();
        assert_eq!(a, b);
        let c: Vec<_> = generate(&basic(5)).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn identical_distractor_without_noise() {
        let mut cfg = basic(1);
        cfg.distractor_similarity = 1.0;
        cfg.noise_sigma = 0.0;
        cfg.persons = 2;
        cfg.flip_probability = 0.0;
        cfg.viewpoint_script = vec![ViewpointChange {
            frame: 0,
            person: 1,
            orientation: Orientation::Front,
        }, ViewpointChange {
            frame: 0,
            person: 0,
            orientation: Orientation::Front,
        }];
        for (obs, _) in generate(&cfg).unwrap() {
            assert_eq!(obs.len(), 2);
            assert_eq!(obs[0].raw, obs[1].raw);
            assert_eq!(obs[0].vis, obs[1].vis);
        }
    }

    #[test]
    fn segments_partition_the_stream() {
        let cfg = basic(0);
        let mut counts = [0usize; SEGMENTS];
        for (_, truth) in generate(&cfg).unwrap() {
            assert_eq!(truth.segment_index, cfg.segment_of(truth.frame));
            counts[truth.segment_index] += 1;
        }
        assert!(counts.iter().all(|&c| c == 10));
        let bounds = cfg.segment_bounds();
        assert_eq!(bounds.first(), Some(&0));
        assert_eq!(bounds.last(), Some(&80));
    }

    #[test]
    fn full_occlusion_reassigns_track_id() {
        let mut cfg = basic(2);
        cfg.occlusions = vec![Occlusion {
            start: 20,
            end: 30,
            person: 0,
            mode: OcclusionMode::Full,
        }];
        let frames: Vec<_> = generate(&cfg).unwrap().collect();
        let before = frames[19].1.gt_target_track_id;
        for (obs, truth) in &frames[20..30] {
            assert!(!truth.target_visible);
            assert!(obs.iter().all(|o| o.label == 0));
        }
        let after = frames[30].1.gt_target_track_id;
        assert_ne!(before, after);
        assert!(frames[30].0.iter().any(|o| o.track_id == after));
        assert!(!frames[30].0.iter().any(|o| o.track_id == before));
    }

    #[test]
    fn partial_occlusion_keeps_id_and_masks_parts() {
        let mut cfg = basic(3);
        cfg.occlusions = vec![Occlusion {
            start: 10,
            end: 20,
            person: 0,
            mode: OcclusionMode::Parts {
                parts: vec![2, 3, 7, 8],
            },
        }];
        let frames: Vec<_> = generate(&cfg).unwrap().collect();
        let id = frames[0].1.gt_target_track_id;
        for (obs, truth) in &frames[10..20] {
            assert_eq!(truth.gt_target_track_id, id);
            let t = obs.iter().find(|o| o.track_id == id).unwrap();
            for k in [2, 3, 7, 8] {
                assert!(!t.vis.get(k));
            }
        }
    }

    #[test]
    fn observations_satisfy_invariants() {
        let mut cfg = basic(6);
        cfg.drift_schedule = vec![DriftEvent {
            frame: 40,
            scale: 3.0,
            ramp: 0,
        }];
        for (obs, truth) in generate(&cfg).unwrap() {
            assert!(truth.target_visible);
            assert!(obs.iter().any(|o| o.track_id == truth.gt_target_track_id));
            for o in obs {
                assert!(o.masking_holds());
                assert!(o.raw.iter().all(|v| v.is_finite()));
                // front and back halves are never both visible
                let front = FRONT_PARTS.clone().any(|k| o.vis.get(k));
                let back = BACK_PARTS.clone().any(|k| o.vis.get(k));
                assert!(front ^ back);
                assert!(o.bbox.cx - o.bbox.w / 2.0 >= -1e-9);
                assert!(o.bbox.cx + o.bbox.w / 2.0 <= 640.0 + 1e-9);
            }
        }
    }

    #[test]
    fn drift_shifts_mean_descriptor_by_bias_norm() {
        let mut cfg = basic(7);
        cfg.persons = 1;
        cfg.frames = 200;
        cfg.flip_probability = 0.0;
        cfg.noise_sigma = 0.5;
        cfg.drift_schedule = vec![DriftEvent {
            frame: 100,
            scale: 2.5,
            ramp: 0,
        }];
        let frames: Vec<_> = generate(&cfg).unwrap().collect();
        let part = frames[0].0[0].vis.visible().next().unwrap();
        let mean = |range: std::ops::Range<usize>| {
            let mut m = Array1::<f64>::zeros(cfg.d_raw);
            for (obs, _) in &frames[range.clone()] {
                m += &obs[0].raw.row(part);
            }
            m / range.len() as f64
        };
        let diff = mean(100..200) - mean(0..100);
        let norm = diff.dot(&diff).sqrt();
        // Noise of a difference of two 100-frame means, over d_raw coordinates.
        let tol = 4.0 * 0.5 * (2.0 / 100.0f64).sqrt() * (cfg.d_raw as f64).sqrt();
        assert!((norm - 2.5).abs() < tol, "{norm} vs 2.5 (tol {tol})");
    }

    #[test]
    fn ramped_drift_grows_linearly() {
        let mut cfg = basic(9);
        cfg.drift_schedule = vec![DriftEvent {
            frame: 10,
            scale: 2.0,
            ramp: 4,
        }];
        let s = generate(&cfg).unwrap();
        let norm = |f: u64| {
            let b = s.bias_at(f);
            b.dot(&b).sqrt()
        };
        assert_eq!(norm(9), 0.0);
        for (f, expect) in [(10, 0.5), (11, 1.0), (12, 1.5), (13, 2.0), (50, 2.0)] {
            assert!((norm(f) - expect).abs() < 1e-12, "frame {f}");
        }
    }

    #[test]
    fn bad_scripts_are_rejected() {
        let mut cfg = basic(0);
        cfg.occlusions = vec![Occlusion {
            start: 70,
            end: 90,
            person: 0,
            mode: OcclusionMode::Full,
        }];
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
        let mut cfg = basic(0);
        cfg.drift_schedule = vec![DriftEvent {
            frame: 80,
            scale: 1.0,
            ramp: 0,
        }];
        assert!(generate(&cfg).is_err());
        let mut cfg = basic(0);
        cfg.distractor_similarity = 1.5;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn dwell_times_stay_in_range() {
        let mut cfg = basic(8);
        cfg.flip_probability = 0.0;
        cfg.flip_dwell = Some([4, 9]);
        cfg.frames = 400;
        let frames: Vec<_> = generate(&cfg).unwrap().collect();
        let front = |o: &Observation| o.vis.get(FRONT_PARTS.start) || o.vis.get(FRONT_PARTS.start + 4);
        let views: Vec<bool> = frames.iter().map(|(obs, _)| front(&obs[0])).collect();
        let mut changes: Vec<usize> = (1..views.len()).filter(|&i| views[i] != views[i - 1]).collect();
        assert!(changes[0] <= 9);
        changes.windows(2).for_each(|w| assert!((4..=9).contains(&(w[1] - w[0])), "{w:?}"));
        changes.clear();
        cfg.flip_probability = 0.1;
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn presets_parse() {
        for name in ["corridor", "room"] {
            let cfg = ScenarioConfig::preset(name).unwrap();
            assert_eq!(cfg.name, name);
        }
        assert!(ScenarioConfig::preset("nope").is_err());
    }

    #[test]
    fn warmup_empty_and_deterministic() {
        assert!(warmup_population(1, 10, 0, 8, 0.3).is_empty());
        let a = warmup_population(1, 10, 50, 8, 0.3);
        let b = warmup_population(1, 10, 50, 8, 0.3);
        assert_eq!(a, b);
    }

    #[test]
    fn warmup_is_balanced() {
        let persons = 10;
        let set = warmup_population(9, persons, 500, 8, 0.3);
        assert_eq!(set.len(), 1000);
        let pos = set.iter().filter(|s| s.obs.label == 1).count();
        assert!((pos as f64 - 500.0).abs() <= 50.0);
        let mut pos_per = vec![0usize; persons];
        let mut neg_per = vec![0usize; persons];
        for s in &set {
            if s.obs.label == 1 {
                pos_per[s.person] += 1;
            } else {
                neg_per[s.person] += 1;
            }
            assert_eq!(s.obs.label == 1, s.person == s.episode_target);
        }
        let uniform = 1000.0 / (2.0 * persons as f64);
        for p in 0..persons {
            assert!((pos_per[p] as f64 - uniform).abs() <= 0.1 * uniform);
            assert!((neg_per[p] as f64 - uniform).abs() <= 0.1 * uniform);
        }
    }
}
