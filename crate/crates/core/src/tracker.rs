//! Online tracking loop: grounding on an empty tracklet set, correlation
//! tracking otherwise, cascade re-association, and the inactive pool.

use serde::{Deserialize, Serialize};

use crate::annotations::{ScenarioKind, TrackRecord};
use crate::bbox::{iou, BBox};
use crate::error::{Error, Result};
use crate::hungarian::gated_max_matching;
use crate::model::{ground_regions, track_regions, Candidate, FlopCount, ForwardMode, ModelWeights};
use crate::simworld::SceneFrame;
use crate::tensor::{cosine_similarity, Matrix};
use crate::tokens::{embed_prompt, extract_tracklets};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum TrackletState {
    Active,
    /// Unmatched since frame `since`.
    Inactive { since: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tracklet {
    pub id: u64,
    pub bbox: BBox,
    pub conf: f64,
    pub feature: Vec<f64>,
    /// Image tokens of the frame this tracklet was last matched in.
    pub assigned: Vec<usize>,
    pub state: TrackletState,
}

impl Tracklet {
    pub fn is_active(&self) -> bool {
        self.state == TrackletState::Active
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrackerConfig {
    /// Confidence threshold for decoded candidates.
    pub gamma: f64,
    /// Minimum feature cosine similarity for appearance re-association.
    pub gamma_reassign: f64,
    /// Frames an inactive tracklet is kept before it is dropped.
    pub t_tlr: usize,
    /// Minimum IoU for the spatial stage of the cascade.
    pub iou_gate: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            gamma: 0.7,
            gamma_reassign: 0.75,
            t_tlr: 30,
            iou_gate: 0.5,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("gamma {} must lie in (0, 1)", self.gamma)));
        }
        if !(-1.0..=1.0).contains(&self.gamma_reassign) {
            return Err(Error::Config("gamma_reassign must lie in [-1, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_gate) {
            return Err(Error::Config("iou gate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Prompts keyed by the frame where they take effect.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSchedule {
    entries: Vec<(usize, String)>,
}

impl PromptSchedule {
    pub fn new(entries: Vec<(usize, String)>) -> Result<Self> {
        match entries.first() {
            Some((0, _)) => {}
            Some((f, _)) => {
                return Err(Error::Config(format!("first prompt must start at frame 0, not {f}")))
            }
            None => return Err(Error::Config("prompt schedule is empty".into())),
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::Config(format!(
                    "schedule frames must increase strictly ({} then {})",
                    w[0].0, w[1].0
                )));
            }
        }
        if let Some((f, _)) = entries.iter().find(|(_, p)| p.trim().is_empty()) {
            return Err(Error::Config(format!("prompt at frame {f} is empty")));
        }
        Ok(Self { entries })
    }

    pub fn constant(prompt: impl Into<String>) -> Result<Self> {
        Self::new(vec![(0, prompt.into())])
    }

    pub fn entries(&self) -> &[(usize, String)] {
        &self.entries
    }

    /// Prompt that takes effect exactly at `frame`, if any.
    pub fn fires_at(&self, frame: usize) -> Option<&str> {
        self.entries
            .iter()
            .find(|(f, _)| *f == frame)
            .map(|(_, p)| p.as_str())
    }

    /// Adds or replaces a change at `frame`, which must not precede the last entry.
    pub fn push(&mut self, frame: usize, prompt: String) -> Result<()> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        let last = self.entries.last().map(|e| e.0).unwrap_or(0);
        if frame < last {
            return Err(Error::Config(format!("prompt change at {frame} precedes {last}")));
        }
        if frame == last && !self.entries.is_empty() {
            self.entries.pop();
        }
        self.entries.push((frame, prompt));
        Ok(())
    }

    /// Replaces everything scheduled at or after `frame` with one change.
    pub fn override_from(&mut self, frame: usize, prompt: String) -> Result<()> {
        if prompt.trim().is_empty() {
            return Err(Error::EmptyPrompt);
        }
        self.entries.retain(|(f, _)| *f < frame);
        self.entries.push((frame, prompt));
        Ok(())
    }
}

/// Source of image tokens and decoded candidates.
pub trait Detector {
    fn encode(&self, frame: &SceneFrame) -> Result<Matrix>;
    /// Region|prompt branch.
    fn ground(&self, img: &Matrix, frame: &SceneFrame, prompt: &str, gamma: f64) -> Result<Vec<Candidate>>;
    /// Correlation branch with tracklet tokens `trk`.
    fn track(
        &self,
        img: &Matrix,
        trk: &Matrix,
        frame: &SceneFrame,
        prompt: &str,
        gamma: f64,
    ) -> Result<Vec<Candidate>>;
}

/// The learned model as a detector.
pub struct NetworkDetector<'a> {
    pub weights: &'a ModelWeights,
    pub mode: ForwardMode,
    /// How prompts are cut into tokens.
    pub prompt_kind: ScenarioKind,
    flops: std::cell::Cell<FlopCount>,
}

impl<'a> NetworkDetector<'a> {
    pub fn new(weights: &'a ModelWeights, mode: ForwardMode, prompt_kind: ScenarioKind) -> Self {
        Self {
            weights,
            mode,
            prompt_kind,
            flops: std::cell::Cell::new(FlopCount::default()),
        }
    }

    /// Counts accumulated over all tracking-branch calls.
    pub fn flops(&self) -> FlopCount {
        self.flops.get()
    }
}

impl Detector for NetworkDetector<'_> {
    fn encode(&self, frame: &SceneFrame) -> Result<Matrix> {
        Ok(crate::model::encode_cached(frame, self.weights, None)?.0)
    }

    fn ground(&self, img: &Matrix, _frame: &SceneFrame, prompt: &str, gamma: f64) -> Result<Vec<Candidate>> {
        let prm = embed_prompt(prompt, &self.weights.vocab, self.prompt_kind)?;
        ground_regions(img, &prm.tokens, self.weights, gamma)
    }

    fn track(
        &self,
        img: &Matrix,
        trk: &Matrix,
        _frame: &SceneFrame,
        prompt: &str,
        gamma: f64,
    ) -> Result<Vec<Candidate>> {
        let prm = embed_prompt(prompt, &self.weights.vocab, self.prompt_kind)?;
        let (c, f) = track_regions(img, trk, &prm.tokens, self.weights, gamma, self.mode)?;
        let mut acc = self.flops.get();
        acc.projection += f.projection;
        acc.correlation += f.correlation;
        acc.aggregation += f.aggregation;
        acc.decode += f.decode;
        self.flops.set(acc);
        Ok(c)
    }
}

/// Perfect decoder: returns the true boxes of visible objects that satisfy
/// the prompt. Features are one-hot in the track id, so appearance matching
/// is exact.
#[derive(Clone, Copy, Debug)]
pub struct OracleDetector {
    pub d: usize,
}

impl Default for OracleDetector {
    fn default() -> Self {
        Self { d: 64 }
    }
}

impl Detector for OracleDetector {
    fn encode(&self, frame: &SceneFrame) -> Result<Matrix> {
        let mut m = Matrix::zeros(frame.grid_w * frame.grid_h, self.d);
        for o in &frame.objects {
            let cell = frame.cell_of(&o.bbox);
            m.set(cell, o.track_id as usize % self.d, 1.0);
        }
        Ok(m)
    }

    fn ground(&self, _img: &Matrix, frame: &SceneFrame, prompt: &str, _gamma: f64) -> Result<Vec<Candidate>> {
        Ok(crate::simworld::oracle_candidates(frame, prompt))
    }

    fn track(
        &self,
        _img: &Matrix,
        _trk: &Matrix,
        frame: &SceneFrame,
        prompt: &str,
        _gamma: f64,
    ) -> Result<Vec<Candidate>> {
        Ok(crate::simworld::oracle_candidates(frame, prompt))
    }
}

/// Fresh active tracklets with ascending ids, in candidate order.
pub fn initialize(candidates: &[Candidate], img: &Matrix, next_id: &mut u64) -> Result<Vec<Tracklet>> {
    candidates
        .iter()
        .map(|c| {
            if c.token >= img.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "image tokens",
                    index: c.token,
                    len: img.rows(),
                });
            }
            let t = Tracklet {
                id: *next_id,
                bbox: c.bbox,
                conf: c.conf,
                feature: img.row(c.token).to_vec(),
                assigned: vec![c.token],
                state: TrackletState::Active,
            };
            *next_id += 1;
            Ok(t)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct CascadeResult {
    /// `(new, prev)` index pairs, sorted by new index.
    pub matched: Vec<(usize, usize)>,
    pub unmatched_new: Vec<usize>,
    pub unmatched_old: Vec<usize>,
}

/// Appearance matching gated at `gamma_reassign`, then IoU matching of the
/// leftovers gated at `iou_gate`.
pub fn cascade_matching(
    new: &[Tracklet],
    prev: &[Tracklet],
    gamma_reassign: f64,
    iou_gate: f64,
) -> Result<CascadeResult> {
    let mut sim = Matrix::zeros(new.len(), prev.len());
    for (i, a) in new.iter().enumerate() {
        for (j, b) in prev.iter().enumerate() {
            if a.feature.len() != b.feature.len() {
                return Err(crate::error::shape_err("cascade_matching", "feature widths differ"));
            }
            sim.set(i, j, cosine_similarity(&a.feature, &b.feature));
        }
    }
    let mut matched = gated_max_matching(&sim, gamma_reassign)?;
    let rest_new: Vec<usize> = (0..new.len()).filter(|i| !matched.iter().any(|m| m.0 == *i)).collect();
    let rest_old: Vec<usize> = (0..prev.len()).filter(|j| !matched.iter().any(|m| m.1 == *j)).collect();
    let mut overlap = Matrix::zeros(rest_new.len(), rest_old.len());
    for (a, &i) in rest_new.iter().enumerate() {
        for (b, &j) in rest_old.iter().enumerate() {
            overlap.set(a, b, iou(&new[i].bbox, &prev[j].bbox));
        }
    }
    for (a, b) in gated_max_matching(&overlap, iou_gate)? {
        matched.push((rest_new[a], rest_old[b]));
    }
    matched.sort_unstable();
    Ok(CascadeResult {
        unmatched_new: (0..new.len()).filter(|i| !matched.iter().any(|m| m.0 == *i)).collect(),
        unmatched_old: (0..prev.len()).filter(|j| !matched.iter().any(|m| m.1 == *j)).collect(),
        matched,
    })
}

/// New observations carrying the matched old ids, all active.
pub fn update(matched_new: &[Tracklet], matched_old: &[Tracklet]) -> Result<Vec<Tracklet>> {
    if matched_new.len() != matched_old.len() {
        return Err(Error::Config(format!(
            "update needs aligned sets, got {} new and {} old",
            matched_new.len(),
            matched_old.len()
        )));
    }
    Ok(matched_new
        .iter()
        .zip(matched_old)
        .map(|(n, o)| Tracklet {
            id: o.id,
            state: TrackletState::Active,
            ..n.clone()
        })
        .collect())
}

/// Keeps inactive tracklets unmatched for at most `t_tlr` frames.
pub fn remove_deprecation(inactive: Vec<Tracklet>, t_tlr: usize, now: usize) -> Vec<Tracklet> {
    inactive
        .into_iter()
        .filter(|t| match t.state {
            TrackletState::Inactive { since } => now.saturating_sub(since) <= t_tlr,
            TrackletState::Active => true,
        })
        .collect()
}

fn deactivate(mut t: Tracklet, now: usize) -> Tracklet {
    if t.is_active() {
        t.state = TrackletState::Inactive { since: now };
        t.assigned.clear();
    }
    t
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Ground,
    Track,
}

/// Tracker output for one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameResult {
    pub frame: usize,
    pub prompt: String,
    pub branch: Branch,
    pub tracklets: Vec<Tracklet>,
}

impl FrameResult {
    pub fn records(&self) -> Vec<TrackRecord> {
        self.tracklets
            .iter()
            .map(|t| TrackRecord {
                frame: self.frame,
                id: t.id,
                bbox: t.bbox.to_array(),
                conf: t.conf,
                class: None,
            })
            .collect()
    }
}

/// Per-session tracker state.
#[derive(Clone, Debug)]
pub struct TrackerState {
    pub config: TrackerConfig,
    pub active: Vec<Tracklet>,
    pub inactive: Vec<Tracklet>,
    pub next_id: u64,
    /// Next frame index the tracker expects.
    pub frame: usize,
    pub current_prompt: Option<String>,
    prev_tokens: Option<Matrix>,
}

impl TrackerState {
    pub fn new(config: TrackerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            active: Vec::new(),
            inactive: Vec::new(),
            next_id: 1,
            frame: 0,
            current_prompt: None,
            prev_tokens: None,
        })
    }

    /// One iteration of the tracking loop.
    pub fn step(
        &mut self,
        frame: &SceneFrame,
        schedule: &PromptSchedule,
        detector: &dyn Detector,
    ) -> Result<FrameResult> {
        if frame.index != self.frame {
            return Err(Error::Sequencing {
                expected: self.frame,
                got: frame.index,
            });
        }
        if let Some(p) = schedule.fires_at(frame.index) {
            self.current_prompt = Some(p.to_string());
        }
        let prompt = self
            .current_prompt
            .clone()
            .ok_or_else(|| Error::Config("no prompt is in effect at this frame".into()))?;
        let now = frame.index;
        let cfg = self.config;
        let img = detector.encode(frame)?;

        let branch = if self.active.is_empty() {
            if now == 0 {
                self.inactive.clear();
            }
            let candidates = detector.ground(&img, frame, &prompt, cfg.gamma)?;
            let fresh = observations(&candidates, &img)?;
            // Grounded objects may still be re-identified from the inactive pool.
            let m = cascade_matching(&fresh, &self.inactive, cfg.gamma_reassign, cfg.iou_gate)?;
            let (mut active, reactivated) = self.merge(&fresh, &self.inactive.clone(), &m)?;
            let mut inactive = Vec::new();
            for (j, t) in std::mem::take(&mut self.inactive).into_iter().enumerate() {
                if !reactivated.contains(&j) {
                    inactive.push(t);
                }
            }
            self.inactive = inactive;
            active.sort_by_key(|t| t.id);
            self.active = active;
            Branch::Ground
        } else {
            let prev: Vec<Tracklet> = self.active.iter().chain(&self.inactive).cloned().collect();
            let prev_img = self
                .prev_tokens
                .as_ref()
                .ok_or_else(|| Error::Config("tracking branch without previous image tokens".into()))?;
            let trk = extract_tracklets(&prev, prev_img)?;
            let candidates = detector.track(&img, &trk.tokens, frame, &prompt, cfg.gamma)?;
            let fresh = observations(&candidates, &img)?;
            let m = cascade_matching(&fresh, &prev, cfg.gamma_reassign, cfg.iou_gate)?;
            let (active, _) = self.merge(&fresh, &prev, &m)?;
            let stale: Vec<Tracklet> = self
                .inactive
                .iter()
                .enumerate()
                .filter(|(j, _)| m.unmatched_old.contains(&(self.active.len() + j)))
                .map(|(_, t)| t.clone())
                .collect();
            let mut inactive = remove_deprecation(stale, cfg.t_tlr, now);
            for &j in &m.unmatched_old {
                if j < self.active.len() {
                    inactive.push(deactivate(prev[j].clone(), now));
                }
            }
            self.inactive = inactive;
            self.active = active;
            Branch::Track
        };
        self.prev_tokens = Some(img);
        self.frame += 1;
        Ok(FrameResult {
            frame: now,
            prompt,
            branch,
            tracklets: self.active.clone(),
        })
    }

    /// `update(new[m_new], prev[m_old]) + initialize(new[unm_new])`.
    fn merge(
        &mut self,
        fresh: &[Tracklet],
        prev: &[Tracklet],
        m: &CascadeResult,
    ) -> Result<(Vec<Tracklet>, Vec<usize>)> {
        let new_side: Vec<Tracklet> = m.matched.iter().map(|&(i, _)| fresh[i].clone()).collect();
        let old_side: Vec<Tracklet> = m.matched.iter().map(|&(_, j)| prev[j].clone()).collect();
        let mut out = update(&new_side, &old_side)?;
        for &i in &m.unmatched_new {
            let mut t = fresh[i].clone();
            t.id = self.next_id;
            self.next_id += 1;
            out.push(t);
        }
        Ok((out, m.matched.iter().map(|&(_, j)| j).collect()))
    }
}

/// Candidates as id-less tracklets (id 0) carrying their token features.
fn observations(candidates: &[Candidate], img: &Matrix) -> Result<Vec<Tracklet>> {
    let mut scratch = 0;
    initialize(candidates, img, &mut scratch)
}

/// Runs a whole sequence of frames and collects every record.
pub fn run_sequence(
    frames: impl IntoIterator<Item = SceneFrame>,
    schedule: &PromptSchedule,
    detector: &dyn Detector,
    config: TrackerConfig,
) -> Result<Vec<TrackRecord>> {
    let mut state = TrackerState::new(config)?;
    let mut out = Vec::new();
    for f in frames {
        out.extend(state.step(&f, schedule, detector)?.records());
    }
    Ok(out)
}
