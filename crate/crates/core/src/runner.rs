//! Experiment orchestration: configuration, warm-up, the per-frame
//! inference/learner loop, evaluation and persistence.
//!
//! Randomness comes from ChaCha8 generators seeded with the run seed and
//! split by stream number:
//!
//! | stream | use                                 |
//! |--------|-------------------------------------|
//! | 1      | warm-up population and batches      |
//! | 2      | extractor initialization            |
//! | 3      | long-term offers and replay sampling|
//! | 4      | MIR candidate sampling              |
//!
//! The scenario uses its own seed, mixed with the run seed, so different
//! run seeds also see different worlds.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::time::{Duration, Instant};

use crossbeam_queue::ArrayQueue;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{DesignBlock, RidgeClassifier};
use crate::domain::{BBox, Observation};
use crate::error::{Error, Result};
use crate::evalkit::{
    r_mEAcc, segment_accuracy, success_rate, write_metrics, AccMatrix, MetricRecord,
    SegmentEvalSet,
};
use crate::extractor::{
    extract_all, sgd_step, Dims, ExtractorParams, Provenance, TrainBatch,
};
use crate::lifecycle::{
    Event, LifecycleState, Mode, ModelScorer, Thresholds, TrackScore, TrainingRequest,
};
use crate::memory::{
    mir_retrieve, sample_replay, write_dump, KeyframeState, LongTermMemory, LongTermPolicy,
    ShortTermMemory,
};
use crate::simstream::{generate, warmup_population, ScenarioConfig, SEGMENTS};

const STREAM_WARMUP: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_MEMORY: u64 = 3;
const STREAM_MIR: u64 = 4;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Warm-started extractor, never updated.
    Fixed,
    /// Fine-tunes on the short-term buffer only.
    Naive,
    /// Short-term buffer plus uniform long-term replay.
    Reservoir,
    /// Short-term buffer plus maximally-interfered long-term replay.
    Mir,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Fixed,
        Strategy::Naive,
        Strategy::Reservoir,
        Strategy::Mir,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Fixed => "fixed",
            Strategy::Naive => "naive",
            Strategy::Reservoir => "reservoir",
            Strategy::Mir => "mir",
        }
    }

    fn uses_long_term(self) -> bool {
        matches!(self, Strategy::Reservoir | Strategy::Mir)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Inference and learning interleaved on one thread; bit-reproducible.
    Deterministic,
    /// Learner on its own thread behind a bounded queue.
    Concurrent,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "deterministic" => Ok(RunMode::Deterministic),
            "concurrent" => Ok(RunMode::Concurrent),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparams {
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub replay_lt: usize,
    pub lambda: f64,
    pub keyframe_delta: f64,
    pub switch_threshold: f64,
    pub reid_threshold: f64,
    pub reid_frames: u32,
    pub lr: f64,
    pub margin: f64,
    pub d_raw: usize,
    pub hidden: usize,
    pub embed: usize,
    pub parts: usize,
    pub mir_candidates: usize,
    pub warmup_persons: usize,
    pub warmup_samples: usize,
    pub warmup_steps: usize,
    pub warmup_batch: usize,
    pub warmup_lr: f64,
    pub holdout_stride: u64,
    pub queue_capacity: usize,
    /// Frames at the start of the stream in which the operator labels the
    /// target directly.
    pub init_frames: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            short_capacity: 64,
            long_capacity: 512,
            replay_lt: 64,
            lambda: 1.0,
            keyframe_delta: 0.02,
            switch_threshold: 0.35,
            reid_threshold: 0.7,
            reid_frames: 5,
            lr: 0.01,
            margin: 0.3,
            d_raw: 32,
            hidden: 64,
            embed: 16,
            parts: 10,
            mir_candidates: 128,
            warmup_persons: 20,
            warmup_samples: 2000,
            warmup_steps: 200,
            warmup_batch: 32,
            warmup_lr: 0.05,
            holdout_stride: 10,
            queue_capacity: 4,
            init_frames: 20,
        }
    }
}

impl Hyperparams {
    pub fn dims(&self) -> Dims {
        Dims {
            d_raw: self.d_raw,
            hidden: self.hidden,
            embed: self.embed,
            parts: self.parts,
        }
    }

    pub fn thresholds(&self) -> Thresholds {
        Thresholds {
            switch: self.switch_threshold,
            reid: self.reid_threshold,
            reid_frames: self.reid_frames,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda", self.lambda),
            ("keyframe_delta", self.keyframe_delta),
            ("margin", self.margin),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("lr", self.lr), ("warmup_lr", self.warmup_lr)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative")));
            }
        }
        self.thresholds().validate()?;
        let counts = [
            ("short_capacity", self.short_capacity),
            ("long_capacity", self.long_capacity),
            ("d_raw", self.d_raw),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("parts", self.parts),
            ("warmup_batch", self.warmup_batch),
            ("queue_capacity", self.queue_capacity),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.mir_candidates < self.replay_lt {
            return Err(Error::Config("mir_candidates must be >= replay_lt".into()));
        }
        if self.holdout_stride < 2 {
            return Err(Error::Config("holdout_stride must be at least 2".into()));
        }
        Ok(())
    }
}

/// A preset name or a full scenario table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioSpec {
    Preset(String),
    Inline(ScenarioConfig),
}

impl ScenarioSpec {
    pub fn resolve(&self) -> Result<ScenarioConfig> {
        match self {
            ScenarioSpec::Preset(name) => ScenarioConfig::preset(name),
            ScenarioSpec::Inline(cfg) => {
                cfg.validate()?;
                Ok(cfg.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSpec,
    pub strategy: Strategy,
    #[serde(default = "default_mode")]
    pub mode: RunMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub dump_memory: bool,
    /// Concurrent mode only: pause between frames, emulating a camera rate.
    #[serde(default)]
    pub frame_interval_us: u64,
    #[serde(default)]
    pub hyperparams: Hyperparams,
}

fn default_mode() -> RunMode {
    RunMode::Deterministic
}

impl RunConfig {
    pub fn new(scenario: ScenarioSpec, strategy: Strategy, seed: u64) -> Self {
        Self {
            scenario,
            strategy,
            mode: RunMode::Deterministic,
            seed,
            out: None,
            dump_memory: false,
            frame_interval_us: 0,
            hyperparams: Hyperparams::default(),
        }
    }

    pub fn preset(name: &str, strategy: Strategy, seed: u64) -> Self {
        Self::new(ScenarioSpec::Preset(name.to_string()), strategy, seed)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.hyperparams.validate()?;
        cfg.scenario.resolve()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// The scenario actually generated for this run's seed.
    pub fn world(&self) -> Result<ScenarioConfig> {
        let mut cfg = self.scenario.resolve()?;
        cfg.seed = cfg.seed.wrapping_add(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        if cfg.d_raw != self.hyperparams.d_raw {
            return Err(Error::Config(format!(
                "scenario d_raw {} differs from extractor d_raw {}",
                cfg.d_raw, self.hyperparams.d_raw
            )));
        }
        Ok(cfg)
    }
}

/// Warm-up pre-training on a disjoint labeled population.
pub fn warm_start(seed: u64, hp: &Hyperparams, noise_sigma: f64) -> Result<ExtractorParams> {
    let mut params = ExtractorParams::init(hp.dims(), &mut stream_rng(seed, STREAM_INIT));
    let persons = hp.warmup_persons;
    let set = warmup_population(
        seed ^ 0x5741_524D,
        persons,
        hp.warmup_samples / 2,
        hp.d_raw,
        noise_sigma,
    );
    if set.is_empty() || hp.warmup_steps == 0 {
        return Ok(params);
    }
    let mut groups: Vec<Vec<&Observation>> = vec![Vec::new(); persons];
    for s in &set {
        groups[s.episode_target].push(&s.obs);
    }
    let mut rng = stream_rng(seed, STREAM_WARMUP);
    for step in 0..hp.warmup_steps {
        let group = &groups[step % persons];
        let take = hp.warmup_batch.min(group.len());
        let mut batch = TrainBatch::new();
        for i in index::sample(&mut rng, group.len(), take) {
            batch.push(group[i].clone(), Provenance::ShortTerm);
        }
        if !batch.has_both_classes() {
            continue;
        }
        params = sgd_step(&params, &batch, hp.warmup_lr, hp.margin)?.0;
    }
    Ok(params)
}

/// Counters kept by the learner.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearnerStats {
    pub requests: u64,
    pub steps: u64,
    pub keyframes_accepted: u64,
    pub keyframes_rejected: u64,
    pub keyframes_undecidable: u64,
    pub replay_unavailable: u64,
    pub errors: u64,
}

/// Owner of the extractor and both memories.
#[derive(Debug, Clone)]
pub struct Learner {
    pub params: ExtractorParams,
    pub short: ShortTermMemory,
    pub long: LongTermMemory,
    pub keyframe: KeyframeState,
    pub stats: LearnerStats,
    strategy: Strategy,
    hp: Hyperparams,
    memory_rng: ChaCha8Rng,
    mir_rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(params: ExtractorParams, strategy: Strategy, hp: Hyperparams, seed: u64) -> Self {
        let policy = match strategy {
            Strategy::Mir => LongTermPolicy::Mir,
            _ => LongTermPolicy::Reservoir,
        };
        Self {
            params,
            short: ShortTermMemory::new(hp.short_capacity),
            long: LongTermMemory::new(hp.long_capacity, policy),
            keyframe: KeyframeState::new(hp.keyframe_delta),
            stats: LearnerStats::default(),
            strategy,
            hp,
            memory_rng: stream_rng(seed, STREAM_MEMORY),
            mir_rng: stream_rng(seed, STREAM_MIR),
        }
    }

    /// Memory updates plus at most one SGD step. Returns whether the
    /// extractor changed.
    pub fn process(&mut self, req: &TrainingRequest) -> Result<bool> {
        self.stats.requests += 1;
        let hp = self.hp;
        if self.strategy.uses_long_term() {
            let context = self.short.to_batch();
            match self.keyframe.decide(&req.target, &context, hp.margin) {
                Ok(d) if d.accept => {
                    self.long.offer(req.target.clone(), &mut self.memory_rng);
                    self.keyframe.mark_accepted();
                    self.stats.keyframes_accepted += 1;
                }
                Ok(_) => self.stats.keyframes_rejected += 1,
                Err(Error::KeyframeUndecidable) => self.stats.keyframes_undecidable += 1,
                Err(e) => return Err(e),
            }
            for n in &req.negatives {
                self.long.offer(n.clone(), &mut self.memory_rng);
            }
        }
        for o in req.labeled() {
            self.short.push(o.clone());
        }
        let batch = match self.strategy {
            Strategy::Fixed => return Ok(false),
            Strategy::Naive => self.short.to_batch(),
            Strategy::Reservoir => {
                match sample_replay(&self.short, &self.long, hp.replay_lt, &mut self.memory_rng) {
                    Ok(b) => b,
                    Err(Error::ReplayUnavailable) => {
                        self.stats.replay_unavailable += 1;
                        return Ok(false);
                    }
                    Err(e) => return Err(e),
                }
            }
            Strategy::Mir => {
                let mut batch = self.short.to_batch();
                if batch.has_both_classes() && !self.long.is_empty() {
                    let picked = mir_retrieve(
                        &self.long,
                        &self.params,
                        &batch.clone(),
                        hp.mir_candidates,
                        hp.replay_lt,
                        hp.lr,
                        hp.margin,
                        &mut self.mir_rng,
                    )?;
                    for o in picked {
                        batch.push(o, Provenance::LongTerm);
                    }
                }
                batch
            }
        };
        if !batch.has_both_classes() {
            self.stats.replay_unavailable += 1;
            return Ok(false);
        }
        let (next, report) = sgd_step(&self.params, &batch, hp.lr, hp.margin)?;
        self.keyframe.after_optimization(&next, report.total);
        self.params = next;
        self.stats.steps += 1;
        Ok(true)
    }
}

/// One line of the event log: the lifecycle's view of a frame plus the
/// ground truth it is judged against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub frame: u64,
    /// Mode after the frame was processed.
    pub mode: Mode,
    /// Followed track after the frame, -1 when lost.
    pub target_id: i64,
    pub scores: Vec<TrackScore>,
    pub events: Vec<Event>,
    /// Errors and other remarks.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    pub predicted: Option<BBox>,
    pub predicted_track: Option<u64>,
    pub gt_bbox: BBox,
    pub gt_track_id: u64,
    pub target_visible: bool,
}

impl FrameRecord {
    pub fn has(&self, event: Event) -> bool {
        self.events.contains(&event)
    }

    pub fn lost(&self) -> bool {
        self.mode == Mode::Lost
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub package: String,
    pub version: String,
    pub seed: u64,
    pub scenario: String,
    pub scenario_seed: u64,
    pub strategy: Strategy,
    pub mode: RunMode,
    pub frames: u64,
    pub warm_start_version: u64,
    pub final_version: u64,
    pub wall_time_s: f64,
}

/// Concurrency diagnostics; zero in deterministic mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConcurrencyReport {
    pub queue_drops: u64,
    pub torn_reads: u64,
    pub snapshot_reads: u64,
    pub versions_seen: u64,
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub config: RunConfig,
    pub scenario: ScenarioConfig,
    pub metrics: Vec<MetricRecord>,
    pub acc: AccMatrix,
    pub r_meacc: f64,
    pub success_rate: f64,
    pub params: ExtractorParams,
    pub warm_start_version: u64,
    pub short: ShortTermMemory,
    pub long: LongTermMemory,
    pub learner: LearnerStats,
    pub concurrency: ConcurrencyReport,
    pub trace: Vec<FrameRecord>,
    pub manifest: Manifest,
}

impl RunArtifacts {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.metric == name).map(|m| m.value)
    }

    pub fn metrics_jsonl(&self) -> String {
        let mut buf = Vec::new();
        write_metrics(&self.metrics, &mut buf).expect("in-memory write");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.trace {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// Writes every artifact into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        put("events.jsonl", self.events_jsonl().as_bytes())?;
        put("metrics.jsonl", self.metrics_jsonl().as_bytes())?;
        put("acc_matrix.txt", self.acc.to_string().as_bytes())?;
        put("config.toml", self.config.to_toml().as_bytes())?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("plain struct");
        put("manifest.json", manifest.as_bytes())?;
        self.params.save(&dir.join("checkpoint.bin"))?;
        if self.config.dump_memory {
            let mut buf = Vec::new();
            write_dump(&self.short, &self.long, self.params.dims.parts, self.params.dims.d_raw, &mut buf)
                .expect("in-memory write");
            put("memory.dump", &buf)?;
        }
        Ok(())
    }
}

/// Snapshot as published by the learner, with a content fingerprint so a
/// reader can detect a mixture of two versions.
#[derive(Debug)]
struct Published {
    version: u64,
    fingerprint: u64,
    params: ExtractorParams,
}

impl Published {
    fn new(params: ExtractorParams) -> Arc<Self> {
        Arc::new(Self {
            version: params.version,
            fingerprint: fingerprint(&params),
            params,
        })
    }

    fn intact(&self) -> bool {
        self.params.version == self.version && fingerprint(&self.params) == self.fingerprint
    }
}

/// FNV-1a over the bit patterns of every parameter.
pub fn fingerprint(params: &ExtractorParams) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for block in params.tensors.blocks() {
        for v in block {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn refit(
    short: &ShortTermMemory,
    params: &ExtractorParams,
    lambda: f64,
) -> Result<RidgeClassifier> {
    let feats = extract_all(params, short.iter())?;
    let dims = params.dims;
    let block = DesignBlock::from_features(
        feats.iter().zip(short.iter()).map(|(f, o)| (f, o.label)),
        dims.parts,
        dims.embed,
    );
    RidgeClassifier::fit(&block, lambda)
}

enum Backend {
    Inline(Box<Learner>),
    Threaded {
        queue: Arc<ArrayQueue<TrainingRequest>>,
        slot: Arc<RwLock<Arc<Published>>>,
        done: Arc<AtomicBool>,
        handle: std::thread::JoinHandle<Learner>,
        drops: u64,
        last_version: u64,
        report: ConcurrencyReport,
    },
}

impl Backend {
    /// Parameters the inference side should use for this frame.
    fn current(&mut self) -> Arc<ExtractorParams> {
        match self {
            Backend::Inline(l) => Arc::new(l.params.clone()),
            Backend::Threaded {
                slot,
                last_version,
                report,
                ..
            } => {
                let snap = slot.read().expect("slot lock").clone();
                report.snapshot_reads += 1;
                if !snap.intact() || snap.version < *last_version {
                    report.torn_reads += 1;
                }
                if snap.version != *last_version {
                    report.versions_seen += 1;
                }
                *last_version = snap.version;
                Arc::new(snap.params.clone())
            }
        }
    }
}

/// Runs one experiment end to end. Artifacts are written when `config.out`
/// is set.
pub fn run(config: &RunConfig) -> Result<RunArtifacts> {
    let started = Instant::now();
    let hp = config.hyperparams;
    hp.validate()?;
    let world = config.world()?;
    let stream = generate(&world)?;
    let warm = warm_start(config.seed, &hp, world.noise_sigma)?;
    let warm_version = warm.version;
    let mut learner = Learner::new(warm.clone(), config.strategy, hp, config.seed);
    // The inference side keeps its own copy of the short-term buffer for
    // classifier refits; the learner's copy drives replay.
    let mut short = ShortTermMemory::new(hp.short_capacity);
    let mut backend = match config.mode {
        RunMode::Deterministic => Backend::Inline(Box::new(learner)),
        RunMode::Concurrent => {
            let queue = Arc::new(ArrayQueue::<TrainingRequest>::new(hp.queue_capacity));
            let slot = Arc::new(RwLock::new(Published::new(warm.clone())));
            let done = Arc::new(AtomicBool::new(false));
            let (q, s, d) = (queue.clone(), slot.clone(), done.clone());
            let handle = std::thread::spawn(move || {
                loop {
                    match q.pop() {
                        Some(req) => match learner.process(&req) {
                            Ok(true) => {
                                *s.write().expect("slot lock") =
                                    Published::new(learner.params.clone());
                            }
                            Ok(false) => {}
                            Err(_) => learner.stats.errors += 1,
                        },
                        None if d.load(Ordering::Acquire) => break,
                        None => std::thread::sleep(Duration::from_micros(50)),
                    }
                }
                learner
            });
            Backend::Threaded {
                queue,
                slot,
                done,
                handle,
                drops: 0,
                last_version: warm_version,
                report: ConcurrencyReport::default(),
            }
        }
    };

    let bounds = world.segment_bounds();
    let thresholds = hp.thresholds();
    let mut lifecycle = LifecycleState::lost(thresholds);
    let mut classifier = RidgeClassifier::untrained(hp.parts, hp.embed, hp.lambda);
    let mut eval = SegmentEvalSet::new();
    let mut acc = AccMatrix::new();
    let mut trace = Vec::with_capacity(world.frames as usize);
    let mut current_segment = 0usize;
    let mut learner_errors = 0u64;

    for (frame_obs, truth) in stream {
        let t = truth.frame;
        let mut notes = Vec::new();
        let params = backend.current();
        if truth.segment_index != current_segment {
            evaluate_row(current_segment, &eval, &classifier, &params, &mut acc)?;
            current_segment = truth.segment_index;
        }
        let held_out = SegmentEvalSet::is_held_out(t, bounds[current_segment], hp.holdout_stride);
        if held_out {
            for o in &frame_obs {
                eval.push(current_segment, o.clone());
            }
        }

        let mut scores = Vec::new();
        let mut events = Vec::new();
        let (request, predicted) = if t == 0 || (t < hp.init_frames && truth.target_visible) {
            // The operator designates the target during initialization.
            lifecycle = LifecycleState::following(truth.gt_target_track_id, thresholds);
            let (target, negatives): (Vec<_>, Vec<_>) = lifecycle
                .label_frame(&frame_obs)?
                .into_iter()
                .partition(|o| o.label == 1);
            let target = target.into_iter().next().expect("target labeled");
            let bbox = target.bbox;
            (
                Some(TrainingRequest { target, negatives }),
                Some((bbox, truth.gt_target_track_id)),
            )
        } else {
            let scorer = ModelScorer {
                params: &params,
                classifier: &classifier,
            };
            let outcome = lifecycle.step(&frame_obs, &scorer);
            events = outcome.decision.events;
            let predicted = outcome
                .decision
                .target_position
                .zip(outcome.decision.target_track);
            scores = outcome.scores;
            (outcome.training, predicted)
        };

        if let Some(req) = request {
            if held_out {
                events.push(Event::TrainSkipped);
                notes.push("held-out frame".to_string());
            } else {
                for o in req.labeled() {
                    short.push(o.clone());
                }
                match refit(&short, &params, hp.lambda) {
                    Ok(c) => classifier = c,
                    Err(e) => notes.push(format!("error: classifier: {e}")),
                }
                match &mut backend {
                    Backend::Inline(l) => {
                        if let Err(e) = l.process(&req) {
                            learner_errors += 1;
                            notes.push(format!("error: learner: {e}"));
                        }
                    }
                    Backend::Threaded { queue, drops, .. } => {
                        if queue.force_push(req).is_some() {
                            *drops += 1;
                        }
                    }
                }
            }
        }
        trace.push(FrameRecord {
            frame: t,
            mode: lifecycle.mode(),
            target_id: lifecycle.target_id_signed(),
            scores,
            events,
            notes,
            predicted: predicted.map(|p| p.0),
            predicted_track: predicted.map(|p| p.1),
            gt_bbox: truth.gt_target_bbox,
            gt_track_id: truth.gt_target_track_id,
            target_visible: truth.target_visible,
        });
        if config.mode == RunMode::Concurrent && config.frame_interval_us > 0 {
            std::thread::sleep(Duration::from_micros(config.frame_interval_us));
        }
    }

    let (learner, concurrency) = match backend {
        Backend::Inline(l) => (*l, ConcurrencyReport::default()),
        Backend::Threaded {
            done,
            handle,
            drops,
            mut report,
            ..
        } => {
            done.store(true, Ordering::Release);
            let l = handle
                .join()
                .map_err(|_| Error::Contract("learner thread panicked".into()))?;
            report.queue_drops = drops;
            (l, report)
        }
    };
    evaluate_row(current_segment, &eval, &classifier, &learner.params, &mut acc)?;

    let visible: Vec<&FrameRecord> = trace.iter().filter(|r| r.target_visible).collect();
    let pred: Vec<Option<BBox>> = visible.iter().map(|r| r.predicted).collect();
    let gt: Vec<BBox> = visible.iter().map(|r| r.gt_bbox).collect();
    let sr = success_rate(&pred, &gt)?;
    let rm = r_mEAcc(&acc)?;

    let mut stats = learner.stats;
    stats.errors += learner_errors;
    let count = |event: Event| trace.iter().filter(|r| r.has(event)).count() as f64;
    let errors = trace
        .iter()
        .flat_map(|r| &r.notes)
        .filter(|n| n.starts_with("error"))
        .count() as f64;
    let name = world.name.clone();
    let rec = |metric: &str, value: f64| MetricRecord {
        metric: metric.to_string(),
        scenario: name.clone(),
        strategy: config.strategy.name().to_string(),
        seed: config.seed,
        value,
    };
    let mut metrics = vec![rec("r_mEAcc", rm), rec("success_rate", sr)];
    for j in 0..SEGMENTS {
        metrics.push(rec(&format!("final_acc_seg{j}"), acc.get(SEGMENTS - 1, j).unwrap_or(0.0)));
    }
    metrics.extend([
        rec("count_ID_SWITCH_GUARD", count(Event::IdSwitchGuard)),
        rec("count_REID_SUCCESS", count(Event::ReidSuccess)),
        rec("count_CONF_UNAVAILABLE", count(Event::ConfUnavailable)),
        rec("count_ERROR", errors),
    ]);
    metrics.extend([
        rec("learner_steps", stats.steps as f64),
        rec("keyframes_accepted", stats.keyframes_accepted as f64),
        rec("long_term_size", learner.long.len() as f64),
        rec("final_version", learner.params.version as f64),
    ]);
    if config.mode == RunMode::Concurrent {
        metrics.push(rec("queue_drops", concurrency.queue_drops as f64));
        metrics.push(rec("torn_reads", concurrency.torn_reads as f64));
    }

    let manifest = Manifest {
        package: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        scenario: world.name.clone(),
        scenario_seed: world.seed,
        strategy: config.strategy,
        mode: config.mode,
        frames: world.frames,
        warm_start_version: warm_version,
        final_version: learner.params.version,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    let artifacts = RunArtifacts {
        config: config.clone(),
        scenario: world,
        metrics,
        acc,
        r_meacc: rm,
        success_rate: sr,
        params: learner.params,
        warm_start_version: warm_version,
        short: learner.short,
        long: learner.long,
        learner: stats,
        concurrency,
        trace,
        manifest,
    };
    if let Some(dir) = &config.out {
        artifacts.write_to(dir)?;
    }
    Ok(artifacts)
}

fn evaluate_row(
    i: usize,
    eval: &SegmentEvalSet,
    classifier: &RidgeClassifier,
    params: &ExtractorParams,
    acc: &mut AccMatrix,
) -> Result<()> {
    for j in 0..=i {
        let samples = eval.segment(j);
        if samples.is_empty() {
            continue;
        }
        let a = segment_accuracy(classifier, params, samples)?;
        acc.set(i, j, a.accuracy)?;
    }
    Ok(())
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    pub r_meacc_mean: f64,
    pub r_meacc_std: f64,
    pub success_rate_mean: f64,
    pub success_rate_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub scenario: String,
    pub rows: Vec<ComparisonRow>,
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "scenario: {}", self.scenario)?;
        writeln!(f, "{:<10} {:>5} {:>18} {:>18}", "strategy", "runs", "r-mEAcc (%)", "SR (%)")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:>5} {:>9.2} ± {:<6.2} {:>9.2} ± {:<6.2}",
                r.strategy.name(),
                r.seeds.len(),
                r.r_meacc_mean,
                r.r_meacc_std,
                r.success_rate_mean,
                r.success_rate_std
            )?;
        }
        Ok(())
    }
}

/// Per-strategy mean ± std over seeds from already finished runs.
pub fn summarize(runs: &[&RunArtifacts]) -> Result<Comparison> {
    let first = runs
        .first()
        .ok_or_else(|| Error::Config("nothing to compare".into()))?;
    let base = first.config.scenario.resolve()?;
    let mut by_strategy: BTreeMap<Strategy, Vec<&RunArtifacts>> = BTreeMap::new();
    for r in runs {
        if r.config.scenario.resolve()? != base {
            return Err(Error::Config("compared runs use different scenarios".into()));
        }
        by_strategy.entry(r.config.strategy).or_default().push(r);
    }
    let mut seed_set: Option<Vec<u64>> = None;
    let mut rows = Vec::new();
    for (strategy, group) in by_strategy {
        let mut seeds: Vec<u64> = group.iter().map(|r| r.config.seed).collect();
        seeds.sort_unstable();
        match &seed_set {
            None => seed_set = Some(seeds.clone()),
            Some(s) if *s != seeds => {
                return Err(Error::Config("strategies were run on different seed sets".into()))
            }
            Some(_) => {}
        }
        let rm: Vec<f64> = group.iter().map(|r| r.r_meacc).collect();
        let sr: Vec<f64> = group.iter().map(|r| r.success_rate).collect();
        let (r_meacc_mean, r_meacc_std) = mean_std(&rm);
        let (success_rate_mean, success_rate_std) = mean_std(&sr);
        rows.push(ComparisonRow {
            strategy,
            seeds,
            r_meacc_mean,
            r_meacc_std,
            success_rate_mean,
            success_rate_std,
        });
    }
    Ok(Comparison {
        scenario: base.name,
        rows,
    })
}

/// Runs every config (in parallel threads) and summarizes them.
pub fn compare(configs: &[RunConfig]) -> Result<(Comparison, Vec<RunArtifacts>)> {
    if configs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let base = configs[0].scenario.resolve()?;
    for c in configs {
        if c.scenario.resolve()? != base {
            return Err(Error::Config("compared runs use different scenarios".into()));
        }
    }
    let results: Vec<Result<RunArtifacts>> = std::thread::scope(|s| {
        let handles: Vec<_> = configs.iter().map(|c| s.spawn(move || run(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Contract("run panicked".into()))))
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let refs: Vec<&RunArtifacts> = runs.iter().collect();
    Ok((summarize(&refs)?, runs))
}

/// Writes a comparison table and its JSON form into `dir`.
pub fn write_comparison(cmp: &Comparison, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join("comparison.txt");
    let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    write!(f, "{cmp}").map_err(|e| Error::io(&p, e))?;
    let p = dir.join("comparison.json");
    std::fs::write(&p, serde_json::to_string_pretty(cmp).expect("plain struct"))
        .map_err(|e| Error::io(&p, e))
}
