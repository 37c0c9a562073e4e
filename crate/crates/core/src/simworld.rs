//! Deterministic synthetic tracking world.
//!
//! Objects carry a category, a color and an action, move linearly with
//! optional bounded noise, reflect off the scene border and may be hidden for
//! short occlusion windows. Prompts are matched against object attributes.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::annotations::{
    generate_retrieval_prompt, Annotation, AnnotationSet, Category, Image, ScenarioKind,
    PROMPT_SEPARATOR,
};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::model::Candidate;

pub struct CategoryInfo {
    pub name: &'static str,
    pub synset: &'static str,
    pub synonyms: &'static [&'static str],
    pub definition: &'static str,
}

pub const CATEGORIES: &[CategoryInfo] = &[
    CategoryInfo {
        name: "person",
        synset: "person.n.01",
        synonyms: &["man", "woman", "pedestrian"],
        definition: "a human being",
    },
    CategoryInfo {
        name: "car",
        synset: "car.n.01",
        synonyms: &["automobile", "sedan"],
        definition: "a motor vehicle with four wheels",
    },
    CategoryInfo {
        name: "bus",
        synset: "bus.n.01",
        synonyms: &["autobus", "coach"],
        definition: "a vehicle carrying many passengers",
    },
    CategoryInfo {
        name: "bicycle",
        synset: "bicycle.n.01",
        synonyms: &["bike", "cycle"],
        definition: "a vehicle with two wheels and pedals",
    },
    CategoryInfo {
        name: "dog",
        synset: "dog.n.01",
        synonyms: &["puppy", "hound"],
        definition: "a domestic animal with four legs",
    },
    CategoryInfo {
        name: "truck",
        synset: "truck.n.01",
        synonyms: &["lorry", "pickup"],
        definition: "a motor vehicle carrying heavy goods",
    },
];

pub const COLORS: &[&str] = &["red", "blue", "green", "yellow", "white", "black"];
pub const ACTIONS: &[&str] = &["walking", "running", "standing", "turning"];

/// Function words that appear in definitions, captions and templates.
pub const FUNCTION_WORDS: &[&str] = &[
    "a", "the", "with", "and", "of", "in", "on", "appearing", "longest", "scene", "human",
    "being", "motor", "vehicle", "four", "two", "wheels", "carrying", "many", "passengers",
    "pedals", "domestic", "animal", "legs", "heavy", "goods",
];

/// Every word the world can produce, in a fixed order.
pub fn world_words() -> Vec<&'static str> {
    let mut out: Vec<&'static str> = Vec::new();
    let mut push = |w: &'static str| {
        if !out.contains(&w) {
            out.push(w);
        }
    };
    for c in CATEGORIES {
        push(c.name);
        for s in c.synonyms {
            push(s);
        }
    }
    for w in COLORS.iter().chain(ACTIONS).chain(FUNCTION_WORDS) {
        push(w);
    }
    for c in CATEGORIES {
        for w in c.definition.split_whitespace() {
            push(w);
        }
    }
    out
}

/// Attribute triple of an object.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Attributes {
    pub category: usize,
    pub color: usize,
    pub action: usize,
}

impl Attributes {
    pub fn category_name(&self) -> &'static str {
        CATEGORIES[self.category].name
    }

    /// Appearance caption, then action caption.
    pub fn captions(&self) -> [String; 2] {
        let name = self.category_name();
        [
            format!("a {} {name}", COLORS[self.color]),
            format!("{name} {}", ACTIONS[self.action]),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldConfig {
    pub frames: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Box width/height range in normalized units.
    pub min_size: f64,
    pub max_size: f64,
    /// Maximum per-frame speed along each axis.
    pub max_speed: f64,
    /// Per-frame uniform position noise bound.
    pub noise: f64,
    /// Probability that an object gets one occlusion window.
    pub occlusion_prob: f64,
    pub occlusion_len: (usize, usize),
    /// Probability that an object enters after frame 0.
    pub entry_prob: f64,
    /// Probability that an object leaves before the last frame.
    pub exit_prob: f64,
    /// No two objects share the same (category, color) pair.
    pub unique_appearance: bool,
    /// Prompt scenario used for the default schedule.
    pub scenario: ScenarioKind,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            frames: 40,
            grid_w: 8,
            grid_h: 8,
            min_objects: 3,
            max_objects: 6,
            min_size: 0.06,
            max_size: 0.11,
            max_speed: 0.008,
            noise: 0.001,
            occlusion_prob: 0.2,
            occlusion_len: (3, 6),
            entry_prob: 0.0,
            exit_prob: 0.0,
            unique_appearance: true,
            scenario: ScenarioKind::Name,
        }
    }
}

impl WorldConfig {
    /// Static, noise-free world used for lifecycle tests.
    pub fn noise_free() -> Self {
        Self {
            noise: 0.0,
            occlusion_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.frames == 0 || self.grid_w == 0 || self.grid_h == 0 {
            return bad("frames and grid must be positive");
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("object count range is empty");
        }
        if !(0.0 < self.min_size && self.min_size <= self.max_size && self.max_size < 0.5) {
            return bad("box size range must lie in (0, 0.5)");
        }
        if self.max_speed < 0.0 || self.noise < 0.0 {
            return bad("speed and noise must be non-negative");
        }
        for p in [self.occlusion_prob, self.entry_prob, self.exit_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("probabilities must lie in [0, 1]");
            }
        }
        if self.occlusion_len.0 == 0 || self.occlusion_len.0 > self.occlusion_len.1 {
            return bad("occlusion length range is empty");
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimObject {
    pub track_id: u64,
    pub attributes: Attributes,
    /// First frame present.
    pub spawn: usize,
    /// One past the last frame present.
    pub despawn: usize,
    /// Half-open frame windows during which the object is hidden.
    pub occlusions: Vec<(usize, usize)>,
    /// Box per frame in `spawn..despawn`.
    pub trajectory: Vec<BBox>,
}

impl SimObject {
    pub fn visible(&self, frame: usize) -> bool {
        (self.spawn..self.despawn).contains(&frame)
            && !self.occlusions.iter().any(|&(a, b)| (a..b).contains(&frame))
    }

    pub fn bbox(&self, frame: usize) -> Option<BBox> {
        self.visible(frame).then(|| self.trajectory[frame - self.spawn])
    }
}

/// One object as seen in one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct VisibleObject {
    pub track_id: u64,
    pub attributes: Attributes,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneFrame {
    pub index: usize,
    pub grid_w: usize,
    pub grid_h: usize,
    pub objects: Vec<VisibleObject>,
}

/// Grid cell holding a box center, as a row-major token index.
pub fn cell_of(bbox: &BBox, grid_w: usize, grid_h: usize) -> usize {
    let col = ((bbox.cx * grid_w as f64).floor() as isize).clamp(0, grid_w as isize - 1) as usize;
    let row = ((bbox.cy * grid_h as f64).floor() as isize).clamp(0, grid_h as isize - 1) as usize;
    row * grid_w + col
}

impl SceneFrame {
    pub fn cell_of(&self, bbox: &BBox) -> usize {
        cell_of(bbox, self.grid_w, self.grid_h)
    }
}

pub const SCENARIO_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub seed: u64,
    pub config: WorldConfig,
    pub objects: Vec<SimObject>,
    /// `(frame, prompt)` pairs, first at frame 0.
    pub schedule: Vec<(usize, String)>,
}

impl Scenario {
    pub fn frames(&self) -> usize {
        self.config.frames
    }

    pub fn frame(&self, index: usize) -> SceneFrame {
        let objects = self
            .objects
            .iter()
            .filter_map(|o| {
                o.bbox(index).map(|bbox| VisibleObject {
                    track_id: o.track_id,
                    attributes: o.attributes,
                    bbox,
                })
            })
            .collect();
        SceneFrame {
            index,
            grid_w: self.config.grid_w,
            grid_h: self.config.grid_h,
            objects,
        }
    }

    /// Prompt active at a frame under the scenario's schedule.
    pub fn prompt_at(&self, frame: usize) -> &str {
        self.schedule
            .iter()
            .rev()
            .find(|(f, _)| *f <= frame)
            .map(|(_, p)| p.as_str())
            .unwrap_or_default()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let mut de = serde_json::Deserializer::from_str(s);
        let sc: Scenario = serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        if sc.version != SCENARIO_FORMAT_VERSION {
            return Err(Error::Schema {
                path: "version".into(),
                message: format!("unsupported scenario version {}", sc.version),
            });
        }
        sc.config.validate()?;
        Ok(sc)
    }

    /// Categories of all objects, in track order without duplicates.
    pub fn present_categories(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for o in &self.objects {
            if !out.contains(&o.attributes.category) {
                out.push(o.attributes.category);
            }
        }
        out
    }

    /// Ground truth under the active prompt: visible objects that match it.
    pub fn targets(&self, frame: usize) -> Vec<VisibleObject> {
        let query = PromptQuery::parse(self.prompt_at(frame));
        self.frame(frame)
            .objects
            .into_iter()
            .filter(|o| query.matches(&o.attributes))
            .collect()
    }
}

fn separated(a: &BBox, b: &BBox, cfg: &WorldConfig) -> bool {
    let cw = 1.0 / cfg.grid_w as f64;
    let ch = 1.0 / cfg.grid_h as f64;
    ((a.cx - b.cx).abs() / cw).max((a.cy - b.cy).abs() / ch) >= 1.0
}

fn reflect(pos: &mut f64, vel: &mut f64, lo: f64, hi: f64) {
    if *pos < lo {
        *pos = 2.0 * lo - *pos;
        *vel = -*vel;
    } else if *pos > hi {
        *pos = 2.0 * hi - *pos;
        *vel = -*vel;
    }
    *pos = pos.clamp(lo, hi);
}

fn simulate(rng: &mut ChaCha8Rng, cfg: &WorldConfig, spawn: usize, despawn: usize) -> Vec<BBox> {
    let w = rng.gen_range(cfg.min_size..=cfg.max_size);
    let h = rng.gen_range(cfg.min_size..=cfg.max_size);
    let (lx, hx) = (w / 2.0, 1.0 - w / 2.0);
    let (ly, hy) = (h / 2.0, 1.0 - h / 2.0);
    let mut x = rng.gen_range(lx..hx);
    let mut y = rng.gen_range(ly..hy);
    let mut vx = rng.gen_range(-cfg.max_speed..=cfg.max_speed);
    let mut vy = rng.gen_range(-cfg.max_speed..=cfg.max_speed);
    let mut out = Vec::with_capacity(despawn - spawn);
    for _ in spawn..despawn {
        out.push(BBox::new(x, y, w, h));
        let (nx, ny) = if cfg.noise > 0.0 {
            (
                rng.gen_range(-cfg.noise..=cfg.noise),
                rng.gen_range(-cfg.noise..=cfg.noise),
            )
        } else {
            (0.0, 0.0)
        };
        x += vx + nx;
        y += vy + ny;
        reflect(&mut x, &mut vx, lx, hx);
        reflect(&mut y, &mut vy, ly, hy);
    }
    out
}

/// Seeded scenario. Objects never share a grid cell in frames where both are
/// visible, so every visible object owns the token at its center.
pub fn generate(seed: u64, cfg: &WorldConfig) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let mut objects: Vec<SimObject> = Vec::with_capacity(count);
    let mut used_looks: HashSet<(usize, usize)> = HashSet::new();
    const ATTEMPTS: usize = 500;
    for _ in 0..count {
        let mut accepted = None;
        for _ in 0..ATTEMPTS {
            let attributes = Attributes {
                category: rng.gen_range(0..CATEGORIES.len()),
                color: rng.gen_range(0..COLORS.len()),
                action: rng.gen_range(0..ACTIONS.len()),
            };
            if cfg.unique_appearance && used_looks.contains(&(attributes.category, attributes.color)) {
                continue;
            }
            let spawn = if cfg.frames > 4 && rng.gen_bool(cfg.entry_prob) {
                rng.gen_range(1..cfg.frames / 2)
            } else {
                0
            };
            let despawn = if cfg.frames > 4 && rng.gen_bool(cfg.exit_prob) {
                rng.gen_range(cfg.frames / 2 + 1..cfg.frames)
            } else {
                cfg.frames
            };
            let mut occlusions = Vec::new();
            let (omin, omax) = cfg.occlusion_len;
            if rng.gen_bool(cfg.occlusion_prob) && despawn - spawn > omax + 4 {
                let len = rng.gen_range(omin..=omax);
                let start = rng.gen_range(spawn + 2..despawn - len - 1);
                occlusions.push((start, start + len));
            }
            let trajectory = simulate(&mut rng, cfg, spawn, despawn);
            let candidate = SimObject {
                track_id: objects.len() as u64 + 1,
                attributes,
                spawn,
                despawn,
                occlusions,
                trajectory,
            };
            let clash = objects.iter().any(|o| {
                (candidate.spawn.max(o.spawn)..candidate.despawn.min(o.despawn)).any(|f| {
                    match (candidate.bbox(f), o.bbox(f)) {
                        (Some(a), Some(b)) => !separated(&a, &b, cfg),
                        _ => false,
                    }
                })
            });
            if !clash {
                accepted = Some(candidate);
                break;
            }
        }
        match accepted {
            Some(o) => {
                used_looks.insert((o.attributes.category, o.attributes.color));
                objects.push(o);
            }
            None => break,
        }
    }
    if objects.len() < cfg.min_objects {
        return Err(Error::Config(format!(
            "could only place {} of {} objects; relax the world configuration",
            objects.len(),
            cfg.min_objects
        )));
    }
    let mut scenario = Scenario {
        version: SCENARIO_FORMAT_VERSION,
        seed,
        config: cfg.clone(),
        objects,
        schedule: Vec::new(),
    };
    let prompt = default_prompt(&scenario, cfg.scenario, &mut rng)?;
    scenario.schedule.push((0, prompt));
    Ok(scenario)
}

/// Picks a non-empty subset of the present categories, leaving at least one
/// out when there is more than one, and renders it in the given scenario.
fn default_prompt(s: &Scenario, kind: ScenarioKind, rng: &mut ChaCha8Rng) -> Result<String> {
    let mut cats = s.present_categories();
    let keep = if cats.len() > 1 {
        rng.gen_range(1..cats.len())
    } else {
        1
    };
    cats.shuffle(rng);
    cats.truncate(keep);
    cats.sort_unstable();
    render_prompt(s, &cats, kind, rng)
}

/// Prompt text selecting the given categories in a scenario kind. Retrieval
/// prompts ignore `cats` and describe the longest-lived category instead.
pub fn render_prompt(s: &Scenario, cats: &[usize], kind: ScenarioKind, rng: &mut impl Rng) -> Result<String> {
    Ok(match kind {
        ScenarioKind::Name => cats
            .iter()
            .map(|&c| CATEGORIES[c].name)
            .collect::<Vec<_>>()
            .join(PROMPT_SEPARATOR),
        ScenarioKind::Synonym => cats
            .iter()
            .map(|&c| {
                let syn = CATEGORIES[c].synonyms;
                syn[rng.gen_range(0..syn.len())]
            })
            .collect::<Vec<_>>()
            .join(PROMPT_SEPARATOR),
        ScenarioKind::Definition => cats
            .iter()
            .map(|&c| CATEGORIES[c].definition)
            .collect::<Vec<_>>()
            .join(PROMPT_SEPARATOR),
        ScenarioKind::Caption => {
            let mut caps: Vec<String> = Vec::new();
            for o in s.objects.iter().filter(|o| cats.contains(&o.attributes.category)) {
                let c = o.attributes.captions()[0].clone();
                if !caps.contains(&c) {
                    caps.push(c);
                }
            }
            caps.join(PROMPT_SEPARATOR)
        }
        ScenarioKind::Retrieval => {
            let ann = export_groot(s)?;
            generate_retrieval_prompt(&ann, 1)?.text
        }
    })
}

/// Attribute constraints of one prompt sentence.
#[derive(Clone, Debug, Default, PartialEq)]
struct Constraint {
    categories: Vec<usize>,
    colors: Vec<usize>,
    actions: Vec<usize>,
}

impl Constraint {
    fn is_empty(&self) -> bool {
        self.categories.is_empty() && self.colors.is_empty() && self.actions.is_empty()
    }

    fn matches(&self, a: &Attributes) -> bool {
        !self.is_empty()
            && self.categories.iter().all(|&c| c == a.category)
            && self.colors.iter().all(|&c| c == a.color)
            && self.actions.iter().all(|&c| c == a.action)
    }
}

/// Parsed prompt: a disjunction of sentences, each a conjunction of the
/// attributes it mentions. A sentence that equals a category definition
/// selects that category; synonyms select their category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PromptQuery {
    sentences: Vec<Constraint>,
}

/// Splits prompt text into sentences on `.` and `;` boundaries.
pub fn split_sentences(text: &str) -> Vec<String> {
    text.split(['.', ';'])
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Lower-cased words with surrounding punctuation removed.
pub fn split_words(sentence: &str) -> Vec<String> {
    sentence
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

impl PromptQuery {
    pub fn parse(text: &str) -> Self {
        let sentences = split_sentences(text)
            .iter()
            .map(|s| {
                let mut c = Constraint::default();
                if let Some(cat) = CATEGORIES.iter().position(|k| k.definition == s.to_lowercase()) {
                    c.categories.push(cat);
                    return c;
                }
                for w in split_words(s) {
                    if let Some(cat) = CATEGORIES
                        .iter()
                        .position(|k| k.name == w || k.synonyms.contains(&w.as_str()))
                    {
                        if !c.categories.contains(&cat) {
                            c.categories.push(cat);
                        }
                    } else if let Some(col) = COLORS.iter().position(|k| *k == w) {
                        if !c.colors.contains(&col) {
                            c.colors.push(col);
                        }
                    } else if let Some(act) = ACTIONS.iter().position(|k| *k == w) {
                        if !c.actions.contains(&act) {
                            c.actions.push(act);
                        }
                    }
                }
                c
            })
            .collect();
        Self { sentences }
    }

    pub fn matches(&self, a: &Attributes) -> bool {
        self.sentences.iter().any(|c| c.matches(a))
    }

    /// Categories a tracklet of this category can align with, per prompt
    /// sentence: true where the sentence names the category.
    pub fn names_category(&self, sentence: usize, category: usize) -> bool {
        self.sentences
            .get(sentence)
            .is_some_and(|c| c.categories.contains(&category))
    }
}

/// Exports a scenario as a single-video annotation document in pixel units.
pub fn export_groot(s: &Scenario) -> Result<AnnotationSet> {
    const WIDTH: u64 = 640;
    const HEIGHT: u64 = 480;
    let (sx, sy) = (WIDTH as f64, HEIGHT as f64);
    let mut instance = vec![0u64; CATEGORIES.len()];
    let mut image_sets: Vec<HashSet<usize>> = vec![HashSet::new(); CATEGORIES.len()];
    let mut annotations = Vec::new();
    for f in 0..s.frames() {
        for o in &s.objects {
            let Some(b) = o.bbox(f) else { continue };
            let px = b.scaled(sx, sy);
            let cat = o.attributes.category;
            instance[cat] += 1;
            image_sets[cat].insert(f);
            let area = px.w * px.h;
            annotations.push(Annotation {
                id: annotations.len() as u64 + 1,
                image_id: f as u64 + 1,
                category_id: cat as u64 + 1,
                scale_category: Some(if area < 32.0 * 32.0 { "small" } else { "medium" }.into()),
                track_id: Some(o.track_id),
                video_id: Some(1),
                segmentation: Some(Value::Array(Vec::new())),
                area: Some(area),
                bbox: px.to_xywh(),
                iscrowd: Some(0),
                captions: Some(o.attributes.captions().to_vec()),
                extra: Default::default(),
            });
        }
    }
    let categories = CATEGORIES
        .iter()
        .enumerate()
        .map(|(i, c)| Category {
            frequency: Some(if instance[i] > 0 { "f" } else { "r" }.into()),
            id: i as u64 + 1,
            synset: Some(c.synset.into()),
            image_count: Some(image_sets[i].len() as u64),
            instance_count: Some(instance[i]),
            name: c.name.into(),
            synonyms: Some(c.synonyms.iter().map(|w| w.to_string()).collect()),
            def: Some(c.definition.into()),
            extra: Default::default(),
        })
        .collect();
    let images: Vec<Image> = (0..s.frames())
        .map(|f| Image {
            id: f as u64 + 1,
            frame_index: Some(f as u64),
            video_id: Some(1),
            file_name: Some(format!("sim_{:016x}/{f:06}.jpg", s.seed)),
            width: Some(WIDTH),
            height: Some(HEIGHT),
            video: Some(format!("sim_{:016x}", s.seed)),
            prompt: None,
            extra: Default::default(),
        })
        .collect();
    let mut set = AnnotationSet {
        categories,
        annotations,
        images,
        extra: Default::default(),
    };
    if !set.annotations.is_empty() {
        let retr = generate_retrieval_prompt(&set, 1)?;
        for im in &mut set.images {
            im.prompt = Some(retr.text.clone());
        }
    }
    set.validate()?;
    Ok(set)
}

/// Converts annotation boxes back to normalized ground-truth records.
pub fn ground_truth_from_annotations(set: &AnnotationSet, video_id: u64) -> Vec<crate::annotations::TrackRecord> {
    set.video_annotations(video_id)
        .into_iter()
        .map(|a| {
            let im = set.image(a.image_id);
            let w = im.and_then(|i| i.width).unwrap_or(1) as f64;
            let h = im.and_then(|i| i.height).unwrap_or(1) as f64;
            let b = BBox::from_xywh(a.bbox[0] / w, a.bbox[1] / h, a.bbox[2] / w, a.bbox[3] / h);
            crate::annotations::TrackRecord {
                frame: set.frame_of(a) as usize,
                id: a.track_id.unwrap_or(a.id),
                bbox: b.to_array(),
                conf: 1.0,
                class: set.category(a.category_id).map(|c| c.name.clone()),
            }
        })
        .collect()
}

/// Ground-truth records of the prompt-matching objects, in frame order.
pub fn ground_truth(s: &Scenario) -> Vec<crate::annotations::TrackRecord> {
    let mut out = Vec::new();
    for f in 0..s.frames() {
        for o in s.targets(f) {
            out.push(crate::annotations::TrackRecord {
                frame: f,
                id: o.track_id,
                bbox: o.bbox.to_array(),
                conf: 1.0,
                class: Some(o.attributes.category_name().to_string()),
            });
        }
    }
    out
}

/// Perfect decoder output: the true boxes of visible objects that satisfy
/// the prompt, confidence 1, token at the box center.
pub fn oracle_candidates(frame: &SceneFrame, prompt: &str) -> Vec<Candidate> {
    let q = PromptQuery::parse(prompt);
    frame
        .objects
        .iter()
        .filter(|o| q.matches(&o.attributes))
        .map(|o| Candidate {
            bbox: o.bbox,
            conf: 1.0,
            token: frame.cell_of(&o.bbox),
        })
        .collect()
}

pub fn oracle_decode(s: &Scenario, frame: usize, prompt: &str) -> Vec<Candidate> {
    oracle_candidates(&s.frame(frame), prompt)
}
