//! One tracking session: a scenario, a prompt schedule the client may edit,
//! and the tracker state. The batch driver and the server share `advance`,
//! so both emit the same records for the same schedule.

use std::sync::Arc;
use std::time::{Duration, Instant};

use groundtrack_core::annotations::TrackRecord;
use groundtrack_core::model::{ForwardMode, ModelWeights};
use groundtrack_core::simworld::{world_words, Scenario};
use groundtrack_core::tokens::{Vocabulary, CLS, SEP, UNK};
use groundtrack_core::tracker::{
    Branch, FrameResult, NetworkDetector, OracleDetector, PromptSchedule, TrackerConfig, TrackerState,
};
use groundtrack_core::Result;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::protocol::{SessionMessage, PROTOCOL_VERSION};

/// What produces candidates for the tracker.
#[derive(Clone, Debug)]
pub enum Backend {
    Network { weights: Arc<ModelWeights>, mode: ForwardMode },
    /// Ground-truth boxes; for debugging the lifecycle without a model.
    Oracle,
}

impl Backend {
    pub fn known_words(&self) -> Vec<String> {
        match self {
            Backend::Network { weights, .. } => weights
                .vocab
                .words()
                .iter()
                .filter(|w| ![CLS, SEP, UNK].contains(&w.as_str()))
                .cloned()
                .collect(),
            Backend::Oracle => world_words().into_iter().map(String::from).collect(),
        }
    }
}

/// Timing and work of one tracker step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub frame: usize,
    pub branch: Branch,
    pub elapsed: Duration,
    /// Attention flops of the tracking branch; zero for grounding frames.
    pub flops: u64,
}

/// Runs the next frame of `scenario` through `state`.
pub fn advance(
    state: &mut TrackerState,
    scenario: &Scenario,
    schedule: &PromptSchedule,
    backend: &Backend,
) -> Result<(FrameResult, StepStats)> {
    let frame = scenario.frame(state.frame);
    let start = Instant::now();
    let (result, flops) = match backend {
        Backend::Network { weights, mode } => {
            let det = NetworkDetector::new(weights, *mode, scenario.config.scenario);
            let r = state.step(&frame, schedule, &det)?;
            (r, det.flops().total())
        }
        Backend::Oracle => (state.step(&frame, schedule, &OracleDetector::default())?, 0),
    };
    let stats = StepStats {
        frame: result.frame,
        branch: result.branch,
        elapsed: start.elapsed(),
        flops,
    };
    Ok((result, stats))
}

/// Tracks every frame of a scenario.
pub fn track_batch(
    scenario: &Scenario,
    schedule: &PromptSchedule,
    backend: &Backend,
    config: TrackerConfig,
) -> Result<(Vec<TrackRecord>, Vec<StepStats>)> {
    let mut state = TrackerState::new(config)?;
    let mut records = Vec::new();
    let mut stats = Vec::new();
    for _ in 0..scenario.frames() {
        let (r, s) = advance(&mut state, scenario, schedule, backend)?;
        records.extend(r.records());
        stats.push(s);
    }
    Ok((records, stats))
}

pub struct Session {
    scenario: Arc<Scenario>,
    schedule: PromptSchedule,
    state: TrackerState,
    backend: Backend,
    vocab: Vocabulary,
    ended: bool,
}

impl Session {
    pub fn new(
        scenario: Arc<Scenario>,
        schedule: PromptSchedule,
        backend: Backend,
        config: TrackerConfig,
    ) -> Result<Self> {
        let vocab = match &backend {
            Backend::Network { weights, .. } => weights.vocab.clone(),
            // Only membership matters here.
            Backend::Oracle => Vocabulary::world(1, &mut ChaCha8Rng::seed_from_u64(0))?,
        };
        Ok(Self {
            scenario,
            schedule,
            state: TrackerState::new(config)?,
            backend,
            vocab,
            ended: false,
        })
    }

    pub fn hello(&self) -> SessionMessage {
        SessionMessage::Hello {
            version: PROTOCOL_VERSION,
            frames: self.scenario.frames(),
            grid_w: self.scenario.config.grid_w,
            grid_h: self.scenario.config.grid_h,
            prompt: self.schedule.entries()[0].1.clone(),
            vocabulary: self.backend.known_words(),
        }
    }

    pub fn ended(&self) -> bool {
        self.ended
    }

    /// Next frame the session will produce.
    pub fn next_frame(&self) -> usize {
        self.state.frame
    }

    pub fn schedule(&self) -> &PromptSchedule {
        &self.schedule
    }

    /// Replies to one client message.
    pub fn handle(&mut self, msg: SessionMessage) -> Vec<SessionMessage> {
        if self.ended {
            return vec![SessionMessage::error("session has ended", true)];
        }
        match msg {
            SessionMessage::FrameRequest { frame } => self.frame(frame),
            SessionMessage::PromptChange { prompt } => self.prompt_change(&prompt),
            SessionMessage::End { .. } => {
                self.ended = true;
                vec![SessionMessage::End {
                    frames: self.state.frame,
                }]
            }
            other => vec![SessionMessage::error(
                format!("clients may not send `{}`", kind_name(&other)),
                false,
            )],
        }
    }

    fn frame(&mut self, frame: usize) -> Vec<SessionMessage> {
        let total = self.scenario.frames();
        if self.state.frame >= total {
            self.ended = true;
            return vec![SessionMessage::End { frames: total }];
        }
        if frame != self.state.frame {
            return vec![SessionMessage::error(
                format!("frame {frame} requested, next frame is {}", self.state.frame),
                false,
            )];
        }
        match advance(&mut self.state, &self.scenario, &self.schedule, &self.backend) {
            Ok((r, _)) => {
                let mut out = vec![SessionMessage::frame_result(&r)];
                if self.state.frame == total {
                    self.ended = true;
                    out.push(SessionMessage::End { frames: total });
                }
                out
            }
            Err(e) => {
                self.ended = true;
                vec![SessionMessage::error(e.to_string(), true)]
            }
        }
    }

    fn prompt_change(&mut self, prompt: &str) -> Vec<SessionMessage> {
        let (kept, dropped) = self.vocab.filter_known(prompt);
        if kept.is_empty() {
            return vec![SessionMessage::error(
                format!("prompt `{prompt}` shares no words with the vocabulary; keeping the previous prompt"),
                false,
            )];
        }
        if let Err(e) = self.schedule.override_from(self.state.frame, kept) {
            return vec![SessionMessage::error(e.to_string(), false)];
        }
        if dropped.is_empty() {
            Vec::new()
        } else {
            vec![SessionMessage::error(format!("ignored unknown words: {}", dropped.join(", ")), false)]
        }
    }
}

fn kind_name(m: &SessionMessage) -> &'static str {
    match m {
        SessionMessage::Hello { .. } => "hello",
        SessionMessage::FrameRequest { .. } => "frame_request",
        SessionMessage::PromptChange { .. } => "prompt_change",
        SessionMessage::FrameResult { .. } => "frame_result",
        SessionMessage::Error { .. } => "error",
        SessionMessage::End { .. } => "end",
    }
}
