//! Target-ReID lifecycle: the per-frame state machine that decides whether
//! the followed track is still the target, when to train, and when a lost
//! target has been re-identified.
//!
//! While following, the target's confidence must stay above the switch
//! threshold or the track is abandoned. While lost, every track keeps a
//! streak of consecutive frames above the ReID threshold; the first track to
//! complete the required streak becomes the target again. Training is only
//! ever requested while following.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::RidgeClassifier;
use crate::domain::{BBox, Observation};
use crate::error::{Error, Result};
use crate::extractor::{forward, ExtractorParams};

pub const DEFAULT_SWITCH_THRESHOLD: f64 = 0.35;
pub const DEFAULT_REID_THRESHOLD: f64 = 0.7;
pub const DEFAULT_REID_FRAMES: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    /// Following stops when the target's confidence is at or below this.
    pub switch: f64,
    /// A lost target's candidate must score strictly above this...
    pub reid: f64,
    /// ...for this many consecutive frames.
    pub reid_frames: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            switch: DEFAULT_SWITCH_THRESHOLD,
            reid: DEFAULT_REID_THRESHOLD,
            reid_frames: DEFAULT_REID_FRAMES,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.switch > 0.0 && self.reid > 0.0) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.reid_frames < 1 {
            return Err(Error::Config("reid_frames must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Mode {
    Following,
    Lost,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Event {
    IdSwitchGuard,
    ReidSuccess,
    TrainSkipped,
    ConfUnavailable,
}

/// Anything that can turn an observation into a target confidence.
pub trait Scorer {
    fn score(&self, obs: &Observation) -> Result<f64>;
}

impl<F: Fn(&Observation) -> Result<f64>> Scorer for F {
    fn score(&self, obs: &Observation) -> Result<f64> {
        self(obs)
    }
}

/// Confidence from the published extractor and the current classifier.
pub struct ModelScorer<'a> {
    pub params: &'a ExtractorParams,
    pub classifier: &'a RidgeClassifier,
}

impl Scorer for ModelScorer<'_> {
    fn score(&self, obs: &Observation) -> Result<f64> {
        let f = forward(self.params, obs)?;
        self.classifier.confidence(&f)
    }
}

/// Confidence of one track in one frame; `None` when unavailable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackScore {
    pub track_id: u64,
    pub s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameDecision {
    pub target_position: Option<BBox>,
    pub target_track: Option<u64>,
    pub trained_this_frame: bool,
    pub events: Vec<Event>,
}

/// Labeled observations of a frame in which the target was confirmed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRequest {
    pub target: Observation,
    pub negatives: Vec<Observation>,
}

impl TrainingRequest {
    /// Target first, then negatives in frame order.
    pub fn labeled(&self) -> impl Iterator<Item = &Observation> {
        std::iter::once(&self.target).chain(&self.negatives)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub decision: FrameDecision,
    pub training: Option<TrainingRequest>,
    pub scores: Vec<TrackScore>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LifecycleState {
    mode: Mode,
    target_id: Option<u64>,
    streaks: BTreeMap<u64, u32>,
    thresholds: Thresholds,
}

impl LifecycleState {
    /// Starts following a designated track.
    pub fn following(target_id: u64, thresholds: Thresholds) -> Self {
        Self {
            mode: Mode::Following,
            target_id: Some(target_id),
            streaks: BTreeMap::new(),
            thresholds,
        }
    }

    pub fn lost(thresholds: Thresholds) -> Self {
        Self {
            mode: Mode::Lost,
            target_id: None,
            streaks: BTreeMap::new(),
            thresholds,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn target_id(&self) -> Option<u64> {
        self.target_id
    }

    /// Target id with -1 meaning "lost".
    pub fn target_id_signed(&self) -> i64 {
        self.target_id.map_or(-1, |id| id as i64)
    }

    pub fn streak(&self, track_id: u64) -> u32 {
        self.streaks.get(&track_id).copied().unwrap_or(0)
    }

    pub fn thresholds(&self) -> Thresholds {
        self.thresholds
    }

    /// Labels the frame relative to the followed target: 1 for the target
    /// track, 0 for every other track.
    pub fn label_frame(&self, frame: &[Observation]) -> Result<Vec<Observation>> {
        let target = match (self.mode, self.target_id) {
            (Mode::Following, Some(id)) => id,
            _ => return Err(Error::Contract("label_frame called while lost".into())),
        };
        if !frame.iter().any(|o| o.track_id == target) {
            return Err(Error::Contract(format!(
                "target track {target} is not in the frame"
            )));
        }
        Ok(frame
            .iter()
            .map(|o| o.with_label((o.track_id == target) as u8))
            .collect())
    }

    fn go_lost(&mut self) {
        self.mode = Mode::Lost;
        self.target_id = None;
        self.streaks.clear();
    }

    pub fn step(&mut self, frame: &[Observation], scorer: &impl Scorer) -> StepOutcome {
        match (self.mode, self.target_id) {
            (Mode::Following, Some(id)) => self.step_following(id, frame, scorer),
            _ => self.step_lost(frame, scorer),
        }
    }

    fn step_following(
        &mut self,
        target: u64,
        frame: &[Observation],
        scorer: &impl Scorer,
    ) -> StepOutcome {
        let mut decision = FrameDecision {
            target_position: None,
            target_track: None,
            trained_this_frame: false,
            events: Vec::new(),
        };
        let Some(obs) = frame.iter().find(|o| o.track_id == target) else {
            self.go_lost();
            return StepOutcome {
                decision,
                training: None,
                scores: Vec::new(),
            };
        };
        let s = scorer.score(obs).ok();
        if s.is_none() {
            decision.events.push(Event::ConfUnavailable);
        }
        let scores = vec![TrackScore {
            track_id: target,
            s,
        }];
        match s {
            Some(s) if s > self.thresholds.switch => {
                let negatives = frame
                    .iter()
                    .filter(|o| o.track_id != target)
                    .map(|o| o.with_label(0))
                    .collect();
                decision.target_position = Some(obs.bbox);
                decision.target_track = Some(target);
                decision.trained_this_frame = true;
                StepOutcome {
                    decision,
                    training: Some(TrainingRequest {
                        target: obs.with_label(1),
                        negatives,
                    }),
                    scores,
                }
            }
            _ => {
                self.go_lost();
                decision.events.push(Event::IdSwitchGuard);
                StepOutcome {
                    decision,
                    training: None,
                    scores,
                }
            }
        }
    }

    fn step_lost(&mut self, frame: &[Observation], scorer: &impl Scorer) -> StepOutcome {
        let mut events = Vec::new();
        let mut scores = Vec::with_capacity(frame.len());
        let mut next = BTreeMap::new();
        for obs in frame {
            let s = scorer.score(obs).ok();
            if s.is_none() && !events.contains(&Event::ConfUnavailable) {
                events.push(Event::ConfUnavailable);
            }
            scores.push(TrackScore {
                track_id: obs.track_id,
                s,
            });
            let streak = match s {
                Some(s) if s > self.thresholds.reid => {
                    (self.streak(obs.track_id) + 1).min(self.thresholds.reid_frames)
                }
                _ => 0,
            };
            next.insert(obs.track_id, streak);
        }
        // Tracks missing from this frame drop out of `next`, i.e. reset.
        self.streaks = next;
        let winner = self
            .streaks
            .iter()
            .find(|(_, &streak)| streak >= self.thresholds.reid_frames)
            .map(|(&id, _)| id);
        let mut decision = FrameDecision {
            target_position: None,
            target_track: None,
            trained_this_frame: false,
            events,
        };
        if let Some(id) = winner {
            let obs = frame.iter().find(|o| o.track_id == id).expect("scored");
            self.mode = Mode::Following;
            self.target_id = Some(id);
            self.streaks.clear();
            decision.target_position = Some(obs.bbox);
            decision.target_track = Some(id);
            decision.events.push(Event::ReidSuccess);
        }
        StepOutcome {
            decision,
            training: None,
            scores,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::VisibilityMask;
    use ndarray::Array2;

    fn track(id: u64) -> Observation {
        Observation::new(
            0,
            id,
            0,
            BBox::new(id as f64 * 10.0, 5.0, 4.0, 8.0).unwrap(),
            VisibilityMask::all(1),
            Array2::from_elem((1, 1), id as f64),
        )
        .unwrap()
    }

    fn scripted(scores: &[(u64, f64)]) -> impl Fn(&Observation) -> Result<f64> + '_ {
        move |o: &Observation| {
            scores
                .iter()
                .find(|(id, _)| *id == o.track_id)
                .map(|(_, s)| *s)
                .ok_or(Error::ConfidenceUnavailable)
        }
    }

    #[test]
    fn following_above_switch_trains() {
        let mut st = LifecycleState::following(3, Thresholds::default());
        let frame = [track(3), track(5)];
        let out = st.step(&frame, &scripted(&[(3, 0.40)]));
        assert_eq!(out.decision.target_position, Some(frame[0].bbox));
        assert!(out.decision.trained_this_frame);
        let req = out.training.unwrap();
        assert_eq!(req.target.label, 1);
        assert_eq!(req.negatives.len(), 1);
        assert_eq!(req.negatives[0].label, 0);
        assert_eq!(st.mode(), Mode::Following);
    }

    #[test]
    fn following_below_switch_drops_target() {
        let mut st = LifecycleState::following(3, Thresholds::default());
        let out = st.step(&[track(3)], &scripted(&[(3, 0.30)]));
        assert_eq!(st.mode(), Mode::Lost);
        assert_eq!(st.target_id_signed(), -1);
        assert!(out.training.is_none());
        assert!(out.decision.target_position.is_none());
        assert_eq!(out.decision.events, vec![Event::IdSwitchGuard]);
    }

    #[test]
    fn exact_switch_threshold_is_not_enough() {
        let mut st = LifecycleState::following(3, Thresholds::default());
        st.step(&[track(3)], &scripted(&[(3, 0.35)]));
        assert_eq!(st.mode(), Mode::Lost);
    }

    #[test]
    fn absent_target_is_lost_without_guard_event() {
        let mut st = LifecycleState::following(3, Thresholds::default());
        let out = st.step(&[track(5)], &scripted(&[(5, 0.9)]));
        assert_eq!(st.mode(), Mode::Lost);
        assert!(out.decision.events.is_empty());
    }

    #[test]
    fn unavailable_confidence_counts_as_low() {
        let mut st = LifecycleState::following(3, Thresholds::default());
        let out = st.step(&[track(3)], &scripted(&[]));
        assert_eq!(st.mode(), Mode::Lost);
        assert_eq!(
            out.decision.events,
            vec![Event::ConfUnavailable, Event::IdSwitchGuard]
        );
    }

    #[test]
    fn reid_after_five_consecutive_frames() {
        let mut st = LifecycleState::lost(Thresholds::default());
        let frame = [track(7), track(9)];
        for i in 1..=5 {
            let out = st.step(&frame, &scripted(&[(7, 0.75), (9, 0.2)]));
            if i < 5 {
                assert_eq!(st.mode(), Mode::Lost, "frame {i}");
                assert_eq!(st.streak(7), i);
                assert!(out.decision.target_position.is_none());
            } else {
                assert_eq!(out.decision.events, vec![Event::ReidSuccess]);
                assert_eq!(st.target_id(), Some(7));
                assert_eq!(out.decision.target_position, Some(frame[0].bbox));
                assert!(out.training.is_none());
            }
        }
    }

    #[test]
    fn sub_threshold_frame_resets_streak() {
        let mut st = LifecycleState::lost(Thresholds::default());
        let frame = [track(7)];
        let trace = [0.75, 0.75, 0.75, 0.75, 0.60, 0.75, 0.75, 0.75, 0.75];
        for s in trace {
            st.step(&frame, &scripted(&[(7, s)]));
            assert_eq!(st.mode(), Mode::Lost);
        }
        assert_eq!(st.streak(7), 4);
        st.step(&frame, &scripted(&[(7, 0.75)]));
        assert_eq!(st.target_id(), Some(7));
    }

    #[test]
    fn absence_resets_streak() {
        let mut st = LifecycleState::lost(Thresholds::default());
        for _ in 0..4 {
            st.step(&[track(7)], &scripted(&[(7, 0.9)]));
        }
        st.step(&[track(8)], &scripted(&[(8, 0.1)]));
        assert_eq!(st.streak(7), 0);
    }

    #[test]
    fn simultaneous_completion_picks_lowest_id() {
        let mut st = LifecycleState::lost(Thresholds::default());
        let frame = [track(12), track(4)];
        for _ in 0..5 {
            st.step(&frame, &scripted(&[(12, 0.9), (4, 0.8)]));
        }
        assert_eq!(st.target_id(), Some(4));
    }

    #[test]
    fn label_frame_contract() {
        let st = LifecycleState::following(3, Thresholds::default());
        let labeled = st.label_frame(&[track(3), track(5)]).unwrap();
        assert_eq!(
            labeled.iter().map(|o| (o.track_id, o.label)).collect::<Vec<_>>(),
            vec![(3, 1), (5, 0)]
        );
        let single = st.label_frame(&[track(3)]).unwrap();
        assert_eq!(single.len(), 1);
        assert!(st.label_frame(&[track(5)]).is_err());
        assert!(LifecycleState::lost(Thresholds::default())
            .label_frame(&[track(3)])
            .is_err());
    }
}
