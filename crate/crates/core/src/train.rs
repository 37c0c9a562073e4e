//! Toy training over adjacent-frame pairs of the synthetic world.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotations::ScenarioKind;
use crate::bbox::{giou, BBox};
use crate::error::{Error, Result};
use crate::hungarian::hungarian;
use crate::loss::{
    alignment_loss_grad, giou_loss_grad, objectness_loss_grad, total_loss, triplet_objective,
    LossComponents, LossWeights, PositivePairs,
};
use crate::model::{backward_sample, encode_cached, forward_full, forward_sample, sigmoid, ModelConfig, ModelWeights, TokenGrads};
use crate::simworld::{
    generate, render_prompt, split_sentences, split_words, Attributes, PromptQuery, Scenario, WorldConfig,
    ACTIONS, CATEGORIES, COLORS,
};
use crate::tensor::Matrix;
use crate::tokens::{layout_tokens, tokenize_prompt, PromptLayout};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    /// Weight of the per-token confidence cross-entropy.
    pub conf_weight: f64,
    /// Weight of the L1 box regression term.
    pub l1_weight: f64,
    pub lr_network: f64,
    pub lr_embedding: f64,
    /// Share of steps trained on the grounding branch.
    pub ground_fraction: f64,
    /// Probability of dropping a target's tracklet from a tracking sample.
    pub tracklet_dropout: f64,
    /// Probability of adding a non-target object's tracklet.
    pub distractor_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 8,
            steps_per_epoch: 5000,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            conf_weight: 1.0,
            l1_weight: 1.0,
            lr_network: 1e-3,
            lr_embedding: 5e-4,
            ground_fraction: 0.25,
            tracklet_dropout: 0.1,
            distractor_prob: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        if self.world.grid_w != self.model.encoder.grid_w || self.world.grid_h != self.model.encoder.grid_h {
            return Err(Error::Config("world grid and encoder grid differ".into()));
        }
        if self.world.frames < 2 {
            return Err(Error::Config("training needs at least two frames per scenario".into()));
        }
        for p in [self.ground_fraction, self.tracklet_dropout, self.distractor_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("sampling probabilities must lie in [0, 1]".into()));
            }
        }
        if !(self.lr_network > 0.0 && self.lr_embedding > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }
}

/// Adam with a separate learning rate for the word-embedding table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr_network: f64,
    pub lr_embedding: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments per named tensor, in `ModelWeights::tensors` order.
    pub moments: Vec<(String, Matrix, Matrix)>,
}

impl Adam {
    pub fn new(w: &ModelWeights, lr_network: f64, lr_embedding: f64) -> Self {
        Self {
            lr_network,
            lr_embedding,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: w
                .tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), Matrix::zeros(t.rows(), t.cols()), Matrix::zeros(t.rows(), t.cols())))
                .collect(),
        }
    }

    pub fn apply(&mut self, w: &mut ModelWeights, grads: &ModelWeights) -> Result<()> {
        self.step += 1;
        let b1t = 1.0 - self.beta1.powi(self.step as i32);
        let b2t = 1.0 - self.beta2.powi(self.step as i32);
        let gs = grads.tensors();
        for (((name, param), (_, g)), (mname, m, v)) in w.tensors_mut().into_iter().zip(gs).zip(&mut self.moments) {
            if name != mname || param.shape() != m.shape() {
                return Err(Error::Config(format!("optimizer state does not match tensor `{name}`")));
            }
            if ModelWeights::is_frozen(name) {
                continue;
            }
            let lr = if name == "vocab.embeddings" {
                self.lr_embedding
            } else {
                self.lr_network
            };
            for (((p, &gi), mi), vi) in param
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *p -= lr * (*mi / b1t) / ((*vi / b2t).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Mean loss components over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub components: LossComponents,
    /// Weighted objective including the confidence and L1 terms.
    pub total: f64,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut out = String::from("epoch,l_tp,l_it,l_giou,total\n");
    for e in curve {
        let c = e.components;
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, c.alignment, c.objectness, c.giou, e.total);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub weights: ModelWeights,
    pub optimizer: Adam,
    /// Completed epochs.
    pub epoch: usize,
    pub curve: Vec<EpochLoss>,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let weights = ModelWeights::init(config.model.clone())?;
        let optimizer = Adam::new(&weights, config.lr_network, config.lr_embedding);
        Ok(Self {
            config,
            weights,
            optimizer,
            epoch: 0,
            curve: Vec::new(),
        })
    }
}

/// Tracklet→prompt-token links: a word token links to an object it
/// describes inside a sentence the object satisfies; a sentence token links
/// to every object satisfying it.
pub fn prompt_links(prompt: &str, kind: ScenarioKind, objects: &[Option<Attributes>]) -> Vec<(usize, usize)> {
    let mut links = Vec::new();
    let mut k = 0;
    for sentence in split_sentences(prompt) {
        let words = split_words(&sentence);
        if words.is_empty() {
            continue;
        }
        let q = PromptQuery::parse(&sentence);
        if kind.word_level() {
            for w in &words {
                for (j, a) in objects.iter().enumerate() {
                    if let Some(a) = a {
                        if q.matches(a) && describes(w, a) {
                            links.push((j, k));
                        }
                    }
                }
                k += 1;
            }
        } else {
            for (j, a) in objects.iter().enumerate() {
                if a.is_some_and(|a| q.matches(&a)) {
                    links.push((j, k));
                }
            }
            k += 1;
        }
    }
    links
}

fn describes(word: &str, a: &Attributes) -> bool {
    let cat = &CATEGORIES[a.category];
    cat.name == word || cat.synonyms.contains(&word) || COLORS[a.color] == word || ACTIONS[a.action] == word
}

/// One adjacent-frame training example.
#[derive(Clone, Debug)]
pub struct Sample {
    pub scenario: Scenario,
    pub frame: usize,
    pub prompt: String,
    /// Track ids pooled into tracklets from frame `t − 1`; empty for grounding.
    pub tracklets: Vec<u64>,
}

fn sample(cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Sample> {
    let scenario = generate(rng.gen(), &cfg.world)?;
    let frame = rng.gen_range(1..scenario.frames());
    let mut cats = scenario.present_categories();
    cats.shuffle(rng);
    cats.truncate(rng.gen_range(1..=cats.len()));
    cats.sort_unstable();
    let prompt = render_prompt(&scenario, &cats, cfg.world.scenario, rng)?;
    let mut tracklets = Vec::new();
    if !rng.gen_bool(cfg.ground_fraction) {
        let q = PromptQuery::parse(&prompt);
        for o in scenario.frame(frame - 1).objects {
            let keep = if q.matches(&o.attributes) {
                !rng.gen_bool(cfg.tracklet_dropout)
            } else {
                rng.gen_bool(cfg.distractor_prob)
            };
            if keep {
                tracklets.push(o.track_id);
            }
        }
    }
    Ok(Sample {
        scenario,
        frame,
        prompt,
        tracklets,
    })
}

/// Cost of giving ground-truth box `gt` to token `i`: a dominant locality
/// term for tokens away from the box center, then box and confidence terms.
fn assignment_cost(out: &Matrix, targets: &[(usize, BBox)]) -> Matrix {
    const LOCALITY: f64 = 100.0;
    let mut cost = Matrix::zeros(targets.len(), out.rows());
    for (g, (cell, gt)) in targets.iter().enumerate() {
        for i in 0..out.rows() {
            let r = out.row(i);
            let pred = BBox::new(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3]));
            let l1: f64 = pred.to_array().iter().zip(gt.to_array()).map(|(a, b)| (a - b).abs()).sum();
            let local = if i == *cell { 0.0 } else { LOCALITY };
            cost.set(g, i, local + l1 + (1.0 - giou(&pred, gt)) - sigmoid(r[4]));
        }
    }
    cost
}

/// Loss of one sample and, when `grads` is given, its gradient.
pub(crate) fn sample_loss(
    w: &ModelWeights,
    cfg: &TrainConfig,
    s: &Sample,
    rng: Option<&mut ChaCha8Rng>,
    grads: Option<&mut ModelWeights>,
) -> Result<(LossComponents, f64)> {
    let frame = s.scenario.frame(s.frame);
    let prev = s.scenario.frame(s.frame - 1);
    let query = PromptQuery::parse(&s.prompt);
    let trk_objects: Vec<_> = s
        .tracklets
        .iter()
        .map(|id| prev.objects.iter().find(|o| o.track_id == *id).expect("tracklet visible at t-1"))
        .collect();
    let cells: Vec<usize> = trk_objects.iter().map(|o| prev.cell_of(&o.bbox)).collect();
    let layout: PromptLayout = tokenize_prompt(&s.prompt, &w.vocab, cfg.world.scenario)?;
    let fwd = forward_sample(w, &frame, Some((&prev, &cells)), layout, rng)?;

    let targets: Vec<(usize, BBox)> = frame
        .objects
        .iter()
        .filter(|o| query.matches(&o.attributes))
        .map(|o| (frame.cell_of(&o.bbox), o.bbox))
        .collect();
    let m = fwd.out.rows();
    let mut grad_out = Matrix::zeros(m, 5);
    let mut conf_target = vec![0.0; m];
    let mut c = LossComponents::default();
    let mut extra = 0.0;

    let assignment = hungarian(&assignment_cost(&fwd.out, &targets))?;
    for (g, a) in assignment.iter().enumerate() {
        let Some(i) = *a else { continue };
        conf_target[i] = 1.0;
        let r = fwd.out.row(i);
        let sig: Vec<f64> = r[..4].iter().map(|&v| sigmoid(v)).collect();
        let pred = BBox::new(sig[0], sig[1], sig[2], sig[3]);
        let gt = targets[g].1;
        let (gl, gg) = giou_loss_grad(&pred, &gt);
        c.giou += gl;
        for (q, gt_v) in gt.to_array().into_iter().enumerate() {
            let diff = sig[q] - gt_v;
            extra += cfg.l1_weight * diff.abs();
            let d_box = cfg.loss.giou * gg[q] + cfg.l1_weight * diff.signum();
            grad_out.set(i, q, d_box * sig[q] * (1.0 - sig[q]));
        }
    }
    for (i, &y) in conf_target.iter().enumerate() {
        let z = fwd.out.get(i, 4);
        // Binary cross-entropy from logits, averaged over tokens.
        let bce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        extra += cfg.conf_weight * bce / m as f64;
        grad_out.set(i, 4, cfg.conf_weight * (sigmoid(z) - y) / m as f64);
    }

    let mut tg = TokenGrads::zeros(&fwd);
    if !cells.is_empty() {
        let attrs: Vec<Option<Attributes>> = trk_objects
            .iter()
            .map(|o| query.matches(&o.attributes).then_some(o.attributes))
            .collect();
        let links = prompt_links(&s.prompt, cfg.world.scenario, &attrs);
        if !links.is_empty() {
            let (l, gt, gp) = alignment_loss_grad(&fwd.trk, &fwd.prm, &PositivePairs::symmetric(&links))?;
            c.alignment = l;
            tg.trk.add_assign(&gt.scale(cfg.loss.tracklet_prompt))?;
            tg.prm.add_assign(&gp.scale(cfg.loss.tracklet_prompt))?;
        }
        let assign: Vec<Option<usize>> = trk_objects
            .iter()
            .map(|o| {
                frame
                    .objects
                    .iter()
                    .find(|f| f.track_id == o.track_id)
                    .map(|f| frame.cell_of(&f.bbox))
            })
            .collect();
        let (l, gt, gi) = objectness_loss_grad(&fwd.trk, &fwd.img, &assign)?;
        c.objectness = l;
        tg.trk.add_assign(&gt.scale(cfg.loss.region_tracklet))?;
        tg.img.add_assign(&gi.scale(cfg.loss.region_tracklet))?;
    }
    let total = total_loss(&c, &cfg.loss) + extra;
    if let Some(grads) = grads {
        backward_sample(w, &fwd, &grad_out, tg, grads);
    }
    Ok((c, total))
}

fn step_rng(seed: u64, epoch: usize, step: usize, steps_per_epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((epoch * steps_per_epoch + step) as u64);
    rng
}

/// Runs `epochs` more epochs, calling `on_epoch` after each.
pub fn train_epochs(state: &mut TrainState, epochs: usize, mut on_epoch: impl FnMut(&EpochLoss)) -> Result<()> {
    let cfg = state.config.clone();
    cfg.validate()?;
    for _ in 0..epochs {
        let epoch = state.epoch;
        let mut sum = LossComponents::default();
        let mut total = 0.0;
        for step in 0..cfg.steps_per_epoch {
            let mut rng = step_rng(cfg.seed, epoch, step, cfg.steps_per_epoch);
            let s = sample(&cfg, &mut rng)?;
            let mut grads = state.weights.zeros_like();
            let (c, t) = sample_loss(&state.weights, &cfg, &s, Some(&mut rng), Some(&mut grads))?;
            if !t.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    detail: format!("loss {t}, components {c:?}, scenario seed {}", s.scenario.seed),
                });
            }
            state.optimizer.apply(&mut state.weights, &grads)?;
            sum.alignment += c.alignment;
            sum.objectness += c.objectness;
            sum.giou += c.giou;
            total += t;
        }
        let n = cfg.steps_per_epoch.max(1) as f64;
        let e = EpochLoss {
            epoch,
            components: LossComponents {
                alignment: sum.alignment / n,
                objectness: sum.objectness / n,
                giou: sum.giou / n,
            },
            total: total / n,
        };
        state.curve.push(e);
        state.epoch += 1;
        on_epoch(&e);
    }
    Ok(())
}

/// Trains from scratch for `config.epochs` epochs.
pub fn train(config: TrainConfig) -> Result<TrainState> {
    let mut state = TrainState::new(config)?;
    let epochs = state.config.epochs;
    train_epochs(&mut state, epochs, |_| {})?;
    Ok(state)
}

/// Mean loss over freshly drawn samples without updating weights.
pub fn evaluate_loss(w: &ModelWeights, cfg: &TrainConfig, seed: u64, samples: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    for _ in 0..samples {
        let s = sample(cfg, &mut rng)?;
        total += sample_loss(w, cfg, &s, None, None)?.1;
    }
    Ok(total / samples.max(1) as f64)
}

/// Mean triplet objective on a scenario: for every frame `t ≥ 1`, target
/// tracklets come from frame `t − 1`, and each target contributes the
/// triplet (its cell at `t`, its tracklet, each prompt token describing it).
pub fn heldout_triplet(w: &ModelWeights, scenario: &Scenario, kind: ScenarioKind) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for t in 1..scenario.frames() {
        let prompt = scenario.prompt_at(t).to_string();
        let query = PromptQuery::parse(&prompt);
        let prev = scenario.frame(t - 1);
        let frame = scenario.frame(t);
        let objs: Vec<_> = prev.objects.iter().filter(|o| query.matches(&o.attributes)).collect();
        if objs.is_empty() {
            continue;
        }
        let (pimg, _) = encode_cached(&prev, w, None)?;
        let (img, _) = encode_cached(&frame, w, None)?;
        let cells: Vec<usize> = objs.iter().map(|o| prev.cell_of(&o.bbox)).collect();
        let trk = pimg.gather_rows(&cells)?;
        let layout = tokenize_prompt(&prompt, &w.vocab, kind)?;
        let prm = layout_tokens(&layout, &w.vocab);
        let full = forward_full(&img, &trk, &prm, w)?;
        let attrs: Vec<Option<Attributes>> = objs.iter().map(|o| Some(o.attributes)).collect();
        for (j, k) in prompt_links(&prompt, kind, &attrs) {
            let Some(now) = frame.objects.iter().find(|f| f.track_id == objs[j].track_id) else {
                continue;
            };
            sum += triplet_objective(&full.t, (frame.cell_of(&now.bbox), j, k))?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Supervision("scenario has no positive triplets".into()));
    }
    Ok(sum / count as f64)
}
