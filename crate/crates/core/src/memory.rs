//! Experience memories and the policies that manage them.
//!
//! * [`ShortTermMemory`] keeps the most recent `K` labeled observations.
//! * [`LongTermMemory`] is a bounded archive. Target samples enter it only
//!   when [`KeyframeState::decide`] finds them informative; negatives enter
//!   unconditionally but are held to a sub-quota. Once full, reservoir
//!   replacement decides what stays.
//! * [`sample_replay`] and [`mir_retrieve`] build the replay batch for one
//!   optimization step.

use std::collections::VecDeque;
use std::io::{BufRead, Write};

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Observation;
use crate::error::{Error, Result};
use crate::extractor::{
    mixed_loss, per_sample_losses, sgd_step, ExtractorParams, Provenance, TrainBatch,
};

pub const DEFAULT_SHORT_CAPACITY: usize = 64;
pub const DEFAULT_LONG_CAPACITY: usize = 512;
pub const DEFAULT_REPLAY_BATCH: usize = 64;
pub const DEFAULT_KEYFRAME_DELTA: f64 = 0.02;

/// Bounded buffer of the most recent observations; the oldest is evicted
/// first.
#[derive(Debug, Clone)]
pub struct ShortTermMemory {
    buf: VecDeque<Observation>,
    capacity: usize,
}

impl ShortTermMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "short-term capacity must be positive");
        Self {
            buf: VecDeque::with_capacity(capacity + 1),
            capacity,
        }
    }

    /// Appends `obs`, returning the evicted observation if the buffer was full.
    pub fn push(&mut self, obs: Observation) -> Option<Observation> {
        self.buf.push_back(obs);
        if self.buf.len() > self.capacity {
            self.buf.pop_front()
        } else {
            None
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.buf.iter()
    }

    pub fn to_batch(&self) -> TrainBatch {
        TrainBatch::from_observations(self.buf.iter().cloned(), Provenance::ShortTerm)
    }
}

/// Consolidation and retrieval policy of the long-term memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LongTermPolicy {
    /// Reservoir replacement, uniform replay.
    Reservoir,
    /// Reservoir replacement, maximally-interfered replay.
    Mir,
}

#[derive(Debug, Clone)]
struct Entry {
    obs: Observation,
    seq: u64,
}

/// What happened to an offered observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Offer {
    Appended,
    Replaced(usize),
    Dropped,
}

/// Capacity-bounded archive of historical observations.
#[derive(Debug, Clone)]
pub struct LongTermMemory {
    entries: Vec<Entry>,
    capacity: usize,
    n_seen: u64,
    policy: LongTermPolicy,
    neg_cap: usize,
    next_seq: u64,
}

impl LongTermMemory {
    /// `neg_cap` defaults to a quarter of the capacity in [`Self::new`].
    pub fn with_negative_cap(capacity: usize, policy: LongTermPolicy, neg_cap: usize) -> Self {
        assert!(capacity > 0, "long-term capacity must be positive");
        Self {
            entries: Vec::with_capacity(capacity),
            capacity,
            n_seen: 0,
            policy,
            neg_cap,
            next_seq: 0,
        }
    }

    pub fn new(capacity: usize, policy: LongTermPolicy) -> Self {
        Self::with_negative_cap(capacity, policy, capacity / 4)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn n_seen(&self) -> u64 {
        self.n_seen
    }

    pub fn policy(&self) -> LongTermPolicy {
        self.policy
    }

    pub fn negative_cap(&self) -> usize {
        self.neg_cap
    }

    pub fn negatives(&self) -> usize {
        self.entries.iter().filter(|e| e.obs.label == 0).count()
    }

    pub fn positives(&self) -> usize {
        self.len() - self.negatives()
    }

    pub fn get(&self, i: usize) -> &Observation {
        &self.entries[i].obs
    }

    pub fn iter(&self) -> impl Iterator<Item = &Observation> {
        self.entries.iter().map(|e| &e.obs)
    }

    /// Offers one sample. Below capacity it is appended; at capacity the
    /// reservoir rule draws `i` uniformly from `[0, n)` (n counting this
    /// offer) and overwrites slot `i` only when `i < capacity`. Afterwards
    /// the oldest negative is evicted while negatives exceed their quota.
    pub fn offer<R: Rng + ?Sized>(&mut self, obs: Observation, rng: &mut R) -> Offer {
        self.n_seen += 1;
        let entry = Entry {
            obs,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        let outcome = if self.entries.len() < self.capacity {
            self.entries.push(entry);
            Offer::Appended
        } else {
            let i = rng.random_range(0..self.n_seen) as usize;
            if i < self.capacity {
                self.entries[i] = entry;
                Offer::Replaced(i)
            } else {
                Offer::Dropped
            }
        };
        while self.negatives() > self.neg_cap {
            let oldest = self
                .entries
                .iter()
                .enumerate()
                .filter(|(_, e)| e.obs.label == 0)
                .min_by_key(|(_, e)| e.seq)
                .map(|(i, _)| i)
                .expect("negatives exceed quota, so one exists");
            self.entries.remove(oldest);
        }
        outcome
    }
}

/// Bookkeeping for loss-guided keyframe selection.
#[derive(Debug, Clone)]
pub struct KeyframeState {
    snapshot: Option<ExtractorParams>,
    reference_loss: Option<f64>,
    pub delta_threshold: f64,
    pending_refresh: bool,
}

/// Outcome of a keyframe test. `delta` is infinite before the first keyframe.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KeyframeDecision {
    pub accept: bool,
    pub delta: f64,
}

impl KeyframeState {
    pub fn new(delta_threshold: f64) -> Self {
        Self {
            snapshot: None,
            reference_loss: None,
            delta_threshold,
            pending_refresh: false,
        }
    }

    /// Starts from an existing snapshot and reference loss.
    pub fn with_reference(snapshot: ExtractorParams, loss: f64, delta_threshold: f64) -> Self {
        Self {
            snapshot: Some(snapshot),
            reference_loss: Some(loss),
            delta_threshold,
            pending_refresh: false,
        }
    }

    pub fn reference_loss(&self) -> Option<f64> {
        self.reference_loss
    }

    pub fn snapshot(&self) -> Option<&ExtractorParams> {
        self.snapshot.as_ref()
    }

    /// Loss of `{obs} ∪ context` under the frozen snapshot minus the
    /// reference loss; accepted when strictly above the threshold.
    pub fn decide(
        &self,
        obs: &Observation,
        context: &TrainBatch,
        margin: f64,
    ) -> Result<KeyframeDecision> {
        if !context.observations().any(|o| o.label == 0) {
            return Err(Error::KeyframeUndecidable);
        }
        let (Some(snapshot), Some(l_t)) = (&self.snapshot, self.reference_loss) else {
            return Ok(KeyframeDecision {
                accept: true,
                delta: f64::INFINITY,
            });
        };
        let mut batch = TrainBatch::new();
        batch.push(obs.clone(), Provenance::ShortTerm);
        batch.samples.extend(context.samples.iter().cloned());
        let loss = mixed_loss(snapshot, &batch, margin)?.total;
        Ok(self.judge(loss, l_t))
    }

    /// The threshold test alone.
    pub fn judge(&self, loss: f64, reference: f64) -> KeyframeDecision {
        let delta = loss - reference;
        KeyframeDecision {
            accept: delta > self.delta_threshold,
            delta,
        }
    }

    /// Records that a keyframe entered the long-term memory; the snapshot and
    /// reference loss refresh at the next optimization.
    pub fn mark_accepted(&mut self) {
        self.pending_refresh = true;
    }

    pub fn refresh_pending(&self) -> bool {
        self.pending_refresh
    }

    /// Called after every optimization step with the updated parameters and
    /// the step's pre-update loss.
    pub fn after_optimization(&mut self, latest: &ExtractorParams, loss: f64) {
        if self.pending_refresh {
            self.snapshot = Some(latest.snapshot());
            self.reference_loss = Some(loss);
            self.pending_refresh = false;
        }
    }
}

/// The whole short-term buffer plus a uniform sample of `b_lt` long-term
/// entries. If the union lacks a positive or a negative, the whole long-term
/// buffer is tried before giving up.
pub fn sample_replay<R: Rng + ?Sized>(
    st: &ShortTermMemory,
    lt: &LongTermMemory,
    b_lt: usize,
    rng: &mut R,
) -> Result<TrainBatch> {
    if st.is_empty() {
        return Err(Error::ReplayUnavailable);
    }
    let mut batch = st.to_batch();
    let amount = b_lt.min(lt.len());
    for i in index::sample(rng, lt.len(), amount) {
        batch.push(lt.get(i).clone(), Provenance::LongTerm);
    }
    if batch.has_both_classes() {
        return Ok(batch);
    }
    if amount < lt.len() {
        let mut batch = st.to_batch();
        for obs in lt.iter() {
            batch.push(obs.clone(), Provenance::LongTerm);
        }
        if batch.has_both_classes() {
            return Ok(batch);
        }
    }
    Err(Error::ReplayUnavailable)
}

/// Maximally-interfered retrieval: among `candidate_count` uniform
/// candidates, the `b_lt` whose loss rises most under a virtual SGD step on
/// `incoming`. Ties go to the lower buffer index.
#[allow(clippy::too_many_arguments)]
pub fn mir_retrieve<R: Rng + ?Sized>(
    lt: &LongTermMemory,
    params: &ExtractorParams,
    incoming: &TrainBatch,
    candidate_count: usize,
    b_lt: usize,
    lr: f64,
    margin: f64,
    rng: &mut R,
) -> Result<Vec<Observation>> {
    let scored = mir_scores(lt, params, incoming, candidate_count, lr, margin, rng)?;
    Ok(scored
        .into_iter()
        .take(b_lt)
        .map(|(i, _)| lt.get(i).clone())
        .collect())
}

/// Candidate buffer indices with their interference scores, best first.
pub fn mir_scores<R: Rng + ?Sized>(
    lt: &LongTermMemory,
    params: &ExtractorParams,
    incoming: &TrainBatch,
    candidate_count: usize,
    lr: f64,
    margin: f64,
    rng: &mut R,
) -> Result<Vec<(usize, f64)>> {
    let mut candidates = index::sample(rng, lt.len(), candidate_count.min(lt.len())).into_vec();
    candidates.sort_unstable();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let (virtual_params, _) = sgd_step(params, incoming, lr, margin)?;
    let queries: Vec<&Observation> = candidates.iter().map(|&i| lt.get(i)).collect();
    let context: Vec<&Observation> = incoming.observations().collect();
    let before = per_sample_losses(params, &queries, &context, margin)?;
    let after = per_sample_losses(&virtual_params, &queries, &context, margin)?;
    let mut scored: Vec<(usize, f64)> = candidates
        .into_iter()
        .zip(after.iter().zip(&before).map(|(a, b)| a - b))
        .collect();
    // Stable sort keeps index order among equal scores.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

/// Metadata header of a memory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpMeta {
    pub policy: LongTermPolicy,
    pub short_capacity: usize,
    pub long_capacity: usize,
    pub negative_cap: usize,
    pub n_seen: u64,
    pub n_parts: usize,
    pub d_raw: usize,
}

/// Writes both buffers: a `#meta` JSON line, then `#short <count>` and
/// `#long <count>` sections of observation records.
pub fn write_dump<W: Write>(
    st: &ShortTermMemory,
    lt: &LongTermMemory,
    n_parts: usize,
    d_raw: usize,
    mut w: W,
) -> std::io::Result<()> {
    let meta = DumpMeta {
        policy: lt.policy,
        short_capacity: st.capacity,
        long_capacity: lt.capacity,
        negative_cap: lt.neg_cap,
        n_seen: lt.n_seen,
        n_parts,
        d_raw,
    };
    writeln!(w, "#meta {}", serde_json::to_string(&meta).expect("plain struct"))?;
    writeln!(w, "#short {}", st.len())?;
    for o in st.iter() {
        writeln!(w, "{}", o.to_record())?;
    }
    writeln!(w, "#long {}", lt.len())?;
    for o in lt.iter() {
        writeln!(w, "{}", o.to_record())?;
    }
    Ok(())
}

/// Parsed memory dump.
#[derive(Debug, Clone)]
pub struct MemoryDump {
    pub meta: DumpMeta,
    pub short: Vec<Observation>,
    pub long: Vec<Observation>,
}

pub fn read_dump<R: BufRead>(r: R) -> Result<MemoryDump> {
    let mut lines = r.lines();
    let mut next = || -> Result<String> {
        lines
            .next()
            .ok_or_else(|| Error::Parse("memory dump truncated".into()))?
            .map_err(|e| Error::Parse(e.to_string()))
    };
    let meta_line = next()?;
    let meta: DumpMeta = meta_line
        .strip_prefix("#meta ")
        .ok_or_else(|| Error::Parse("missing #meta line".into()))
        .and_then(|j| serde_json::from_str(j).map_err(|e| Error::Parse(e.to_string())))?;
    let section = |tag: &str, next: &mut dyn FnMut() -> Result<String>| {
        let head = next()?;
        let count: usize = head
            .strip_prefix(tag)
            .and_then(|c| c.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("expected {tag} header, got {head:?}")))?;
        (0..count)
            .map(|_| Observation::from_record(&next()?, meta.n_parts, meta.d_raw))
            .collect::<Result<Vec<_>>>()
    };
    let short = section("#short ", &mut next)?;
    let long = section("#long ", &mut next)?;
    Ok(MemoryDump { meta, short, long })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{BBox, VisibilityMask};
    use ndarray::Array2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tagged(id: u64, label: u8) -> Observation {
        Observation::new(
            id,
            id,
            label,
            BBox::new(1.0, 1.0, 1.0, 1.0).unwrap(),
            VisibilityMask::all(2),
            Array2::from_elem((2, 3), id as f64),
        )
        .unwrap()
    }

    #[test]
    fn short_term_evicts_oldest() {
        let mut st = ShortTermMemory::new(2);
        assert!(st.push(tagged(1, 1)).is_none());
        assert!(st.push(tagged(2, 1)).is_none());
        let evicted = st.push(tagged(3, 1)).unwrap();
        assert_eq!(evicted.track_id, 1);
        let ids: Vec<u64> = st.iter().map(|o| o.track_id).collect();
        assert_eq!(ids, vec![2, 3]);
    }

    #[test]
    fn long_term_appends_below_capacity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lt = LongTermMemory::with_negative_cap(4, LongTermPolicy::Reservoir, 4);
        for i in 0..4 {
            assert_eq!(lt.offer(tagged(i, 1), &mut rng), Offer::Appended);
        }
        assert_eq!(lt.len(), 4);
        assert_eq!(lt.n_seen(), 4);
    }

    /// An RNG whose `random_range` draws are fully determined.
    struct Fixed(u64);
    impl rand::RngCore for Fixed {
        fn next_u32(&mut self) -> u32 {
            self.0 as u32
        }
        fn next_u64(&mut self) -> u64 {
            self.0
        }
        fn fill_bytes(&mut self, dst: &mut [u8]) {
            dst.fill(0xff);
        }
    }

    #[test]
    fn full_reservoir_drops_when_draw_exceeds_capacity() {
        let mut lt = LongTermMemory::with_negative_cap(2, LongTermPolicy::Reservoir, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        lt.offer(tagged(1, 1), &mut rng);
        lt.offer(tagged(2, 1), &mut rng);
        // u64::MAX maps to the top of [0, 3), i.e. 2 >= capacity.
        let out = lt.offer(tagged(3, 1), &mut Fixed(u64::MAX));
        assert_eq!(out, Offer::Dropped);
        let ids: Vec<u64> = lt.iter().map(|o| o.track_id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(lt.n_seen(), 3);
        // 0 maps to slot 0.
        assert_eq!(lt.offer(tagged(4, 1), &mut Fixed(0)), Offer::Replaced(0));
        assert_eq!(lt.get(0).track_id, 4);
    }

    #[test]
    fn negative_quota_evicts_oldest_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut lt = LongTermMemory::with_negative_cap(8, LongTermPolicy::Reservoir, 2);
        lt.offer(tagged(1, 0), &mut rng);
        lt.offer(tagged(2, 1), &mut rng);
        lt.offer(tagged(3, 0), &mut rng);
        lt.offer(tagged(4, 0), &mut rng);
        assert_eq!(lt.negatives(), 2);
        let ids: Vec<u64> = lt.iter().map(|o| o.track_id).collect();
        assert_eq!(ids, vec![2, 3, 4]);
    }

    #[test]
    fn keyframe_threshold_is_strict() {
        let k = KeyframeState::new(0.02);
        let d = k.judge(0.53, 0.50);
        assert!(d.accept);
        assert!((d.delta - 0.03).abs() < 1e-12);
        let d = k.judge(0.51, 0.50);
        assert!(!d.accept);
        assert!((d.delta - 0.01).abs() < 1e-12);
        assert!(!k.judge(0.50, 0.50).accept);
    }

    #[test]
    fn replay_with_empty_long_term_is_short_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ShortTermMemory::new(4);
        st.push(tagged(1, 1));
        st.push(tagged(2, 0));
        let lt = LongTermMemory::new(8, LongTermPolicy::Reservoir);
        let b = sample_replay(&st, &lt, 64, &mut rng).unwrap();
        assert_eq!(b.len(), 2);
        assert_eq!(b.count_from(Provenance::LongTerm), 0);
    }

    #[test]
    fn replay_takes_whole_long_term_without_duplicates() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ShortTermMemory::new(4);
        st.push(tagged(100, 1));
        st.push(tagged(101, 0));
        let mut lt = LongTermMemory::with_negative_cap(8, LongTermPolicy::Reservoir, 8);
        for i in 0..5 {
            lt.offer(tagged(i, 1), &mut rng);
        }
        let b = sample_replay(&st, &lt, 64, &mut rng).unwrap();
        let mut ids: Vec<u64> = b
            .samples
            .iter()
            .filter(|(_, p)| *p == Provenance::LongTerm)
            .map(|(o, _)| o.track_id)
            .collect();
        ids.sort();
        assert_eq!(ids, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn replay_widens_then_fails() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ShortTermMemory::new(4);
        st.push(tagged(100, 1));
        let mut lt = LongTermMemory::with_negative_cap(8, LongTermPolicy::Reservoir, 8);
        for i in 0..6 {
            lt.offer(tagged(i, 1), &mut rng);
        }
        lt.offer(tagged(6, 0), &mut rng);
        // b_lt = 1 is unlikely to hit the single negative; widening must.
        let b = sample_replay(&st, &lt, 1, &mut rng).unwrap();
        assert!(b.has_both_classes());

        let lt = LongTermMemory::new(8, LongTermPolicy::Reservoir);
        assert!(matches!(
            sample_replay(&st, &lt, 4, &mut rng),
            Err(Error::ReplayUnavailable)
        ));
    }

    #[test]
    fn dump_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut st = ShortTermMemory::new(3);
        st.push(tagged(1, 1));
        st.push(tagged(2, 0));
        let mut lt = LongTermMemory::new(8, LongTermPolicy::Mir);
        lt.offer(tagged(3, 1), &mut rng);
        let mut buf = Vec::new();
        write_dump(&st, &lt, 2, 3, &mut buf).unwrap();
        let dump = read_dump(buf.as_slice()).unwrap();
        assert_eq!(dump.meta.policy, LongTermPolicy::Mir);
        assert_eq!(dump.meta.n_seen, 1);
        assert_eq!(dump.short, st.iter().cloned().collect::<Vec<_>>());
        assert_eq!(dump.long, lt.iter().cloned().collect::<Vec<_>>());
    }
}
