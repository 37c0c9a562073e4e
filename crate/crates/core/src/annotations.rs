//! GroOT annotation documents, prompt construction for the five prompt
//! scenarios, retrieval-prompt generation and newline-delimited track records.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::bbox::BBox;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Category {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frequency: Option<String>,
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_count: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_count: Option<u64>,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub def: Option<String>,
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale_category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub track_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<f64>,
    /// Top-left `[x, y, width, height]` in image pixels.
    pub bbox: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iscrowd: Option<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

impl Annotation {
    /// First caption, describing appearance.
    pub fn appearance_caption(&self) -> Option<&str> {
        self.captions.as_ref()?.first().map(String::as_str)
    }

    /// Second caption, describing the action.
    pub fn action_caption(&self) -> Option<&str> {
        self.captions.as_ref()?.get(1).map(String::as_str)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_index: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video_id: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub video: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(skip)]
    pub extra: Map<String, Value>,
}

const CATEGORY_KEYS: &[&str] = &[
    "frequency",
    "id",
    "synset",
    "image_count",
    "instance_count",
    "name",
    "synonyms",
    "def",
];
const ANNOTATION_KEYS: &[&str] = &[
    "id",
    "image_id",
    "category_id",
    "scale_category",
    "track_id",
    "video_id",
    "segmentation",
    "area",
    "bbox",
    "iscrowd",
    "captions",
];
const IMAGE_KEYS: &[&str] = &[
    "id",
    "frame_index",
    "video_id",
    "file_name",
    "width",
    "height",
    "video",
    "prompt",
];

/// A full annotation document. Keys not covered by the schema are kept
/// in `extra` maps, in document order, and written back after the known keys.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AnnotationSet {
    pub categories: Vec<Category>,
    pub annotations: Vec<Annotation>,
    pub images: Vec<Image>,
    pub extra: Map<String, Value>,
}

trait Record: Serialize + DeserializeOwned {
    const KEYS: &'static [&'static str];
    fn extra(&self) -> &Map<String, Value>;
    fn extra_mut(&mut self) -> &mut Map<String, Value>;
}

impl Record for Category {
    const KEYS: &'static [&'static str] = CATEGORY_KEYS;
    fn extra(&self) -> &Map<String, Value> {
        &self.extra
    }
    fn extra_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.extra
    }
}

impl Record for Annotation {
    const KEYS: &'static [&'static str] = ANNOTATION_KEYS;
    fn extra(&self) -> &Map<String, Value> {
        &self.extra
    }
    fn extra_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.extra
    }
}

impl Record for Image {
    const KEYS: &'static [&'static str] = IMAGE_KEYS;
    fn extra(&self) -> &Map<String, Value> {
        &self.extra
    }
    fn extra_mut(&mut self) -> &mut Map<String, Value> {
        &mut self.extra
    }
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Schema {
        path: path.into(),
        message: message.into(),
    }
}

fn parse_record<T: Record>(value: Value, path: &str) -> Result<T> {
    let Value::Object(map) = value else {
        return Err(schema(path, "expected an object"));
    };
    let extra: Map<String, Value> = map
        .iter()
        .filter(|(k, _)| !T::KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    let mut record: T =
        serde_path_to_error::deserialize(Value::Object(map)).map_err(|e| {
            let inner = e.path().to_string();
            let message = e.inner().to_string();
            // Missing keys are reported against the record itself; name the key.
            let key = message
                .strip_prefix("missing field `")
                .and_then(|rest| rest.split('`').next());
            let full = match (inner.as_str(), key) {
                (".", Some(k)) => format!("{path}.{k}"),
                (".", None) => path.to_string(),
                (p, _) => format!("{path}.{p}"),
            };
            schema(full, message)
        })?;
    *record.extra_mut() = extra;
    Ok(record)
}

fn record_value<T: Record>(record: &T) -> Result<Value> {
    let mut value = serde_json::to_value(record)?;
    if let Value::Object(map) = &mut value {
        for (k, v) in record.extra() {
            map.insert(k.clone(), v.clone());
        }
    }
    Ok(value)
}

fn parse_list<T: Record>(root: &mut Map<String, Value>, key: &str) -> Result<Vec<T>> {
    let value = root
        .remove(key)
        .ok_or_else(|| schema(key, "missing required key"))?;
    let Value::Array(items) = value else {
        return Err(schema(key, "expected an array"));
    };
    items
        .into_iter()
        .enumerate()
        .map(|(i, v)| parse_record(v, &format!("{key}[{i}]")))
        .collect()
}

impl AnnotationSet {
    /// Parses and validates a JSON document.
    pub fn parse(document: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(document)?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let Value::Object(mut root) = value else {
            return Err(schema("$", "expected a top-level object"));
        };
        let categories = parse_list(&mut root, "categories")?;
        let annotations = parse_list(&mut root, "annotations")?;
        let images = parse_list(&mut root, "images")?;
        let set = Self {
            categories,
            annotations,
            images,
            extra: root,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn to_value(&self) -> Result<Value> {
        let mut root = Map::new();
        root.insert(
            "categories".into(),
            Value::Array(self.categories.iter().map(record_value).collect::<Result<_>>()?),
        );
        root.insert(
            "annotations".into(),
            Value::Array(self.annotations.iter().map(record_value).collect::<Result<_>>()?),
        );
        root.insert(
            "images".into(),
            Value::Array(self.images.iter().map(record_value).collect::<Result<_>>()?),
        );
        for (k, v) in &self.extra {
            root.insert(k.clone(), v.clone());
        }
        Ok(Value::Object(root))
    }

    /// Pretty-printed JSON; `parse` followed by `write` reproduces this output
    /// byte for byte.
    pub fn write(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.to_value()?)?;
        s.push('\n');
        Ok(s)
    }

    /// Checks id uniqueness, reference resolution and box sizes.
    pub fn validate(&self) -> Result<()> {
        fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a u64>) -> Result<HashSet<u64>> {
            let mut seen = HashSet::new();
            for id in ids {
                if !seen.insert(*id) {
                    return Err(Error::Integrity(format!("duplicate {what} id {id}")));
                }
            }
            Ok(seen)
        }
        let cats = unique("category", self.categories.iter().map(|c| &c.id))?;
        let imgs = unique("image", self.images.iter().map(|i| &i.id))?;
        unique("annotation", self.annotations.iter().map(|a| &a.id))?;
        for (i, a) in self.annotations.iter().enumerate() {
            if !cats.contains(&a.category_id) {
                return Err(Error::Integrity(format!(
                    "annotations[{i}] references unknown category {}",
                    a.category_id
                )));
            }
            if !imgs.contains(&a.image_id) {
                return Err(Error::Integrity(format!(
                    "annotations[{i}] references unknown image {}",
                    a.image_id
                )));
            }
            if a.bbox[2] < 0.0 || a.bbox[3] < 0.0 || a.bbox.iter().any(|v| !v.is_finite()) {
                return Err(schema(
                    format!("annotations[{i}].bbox"),
                    "width and height must be finite and non-negative",
                ));
            }
        }
        Ok(())
    }

    pub fn category(&self, id: u64) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image(&self, id: u64) -> Option<&Image> {
        self.images.iter().find(|i| i.id == id)
    }

    /// Frame index of an annotation's image, falling back to the image id.
    pub fn frame_of(&self, ann: &Annotation) -> u64 {
        self.image(ann.image_id)
            .map(|im| im.frame_index.unwrap_or(im.id))
            .unwrap_or(ann.image_id)
    }

    fn video_of(&self, ann: &Annotation) -> Option<u64> {
        ann.video_id
            .or_else(|| self.image(ann.image_id).and_then(|im| im.video_id))
    }

    /// Annotations of one video in document order.
    pub fn video_annotations(&self, video_id: u64) -> Vec<&Annotation> {
        self.annotations
            .iter()
            .filter(|a| self.video_of(a) == Some(video_id))
            .collect()
    }

    /// Category ids of a video in order of first appearance.
    pub fn video_categories(&self, video_id: u64) -> Vec<u64> {
        let mut out = Vec::new();
        for a in self.video_annotations(video_id) {
            if !out.contains(&a.category_id) {
                out.push(a.category_id);
            }
        }
        out
    }
}

/// The five prompt scenarios.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "nm")]
    Name,
    #[serde(rename = "syn")]
    Synonym,
    #[serde(rename = "def")]
    Definition,
    #[serde(rename = "cap")]
    Caption,
    #[serde(rename = "retr")]
    Retrieval,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 5] = [
        Self::Name,
        Self::Synonym,
        Self::Definition,
        Self::Caption,
        Self::Retrieval,
    ];

    /// Word-level scenarios emit one prompt token per word, the rest one per sentence.
    pub fn word_level(self) -> bool {
        matches!(self, Self::Name | Self::Synonym)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Name => "nm",
            Self::Synonym => "syn",
            Self::Definition => "def",
            Self::Caption => "cap",
            Self::Retrieval => "retr",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches('.');
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt scenario `{s}`")))
    }
}

/// Separator used when joining prompt pieces.
pub const PROMPT_SEPARATOR: &str = ". ";

fn push_unique(out: &mut Vec<String>, item: &str) {
    if !out.iter().any(|s| s == item) {
        out.push(item.to_string());
    }
}

/// Options for [`build_prompt`].
#[derive(Clone, Copy, Debug)]
pub struct PromptOptions {
    pub seed: u64,
    /// Upper bound on synonyms drawn per category in the synonym scenario.
    pub synonyms_per_category: usize,
}

impl Default for PromptOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            synonyms_per_category: 2,
        }
    }
}

/// Builds the prompt text for one scenario of a video at a given frame.
///
/// Name, synonym and definition prompts cover the categories present in the
/// video, caption prompts join every caption of the video; all of them are
/// constant over the video. Retrieval prompts read the image's `prompt` field,
/// carrying the last value forward over frames without one.
pub fn build_prompt(
    kind: ScenarioKind,
    ann: &AnnotationSet,
    video_id: u64,
    frame: u64,
    opts: PromptOptions,
) -> Result<String> {
    let mut pieces: Vec<String> = Vec::new();
    match kind {
        ScenarioKind::Name => {
            for c in ann.video_categories(video_id) {
                push_unique(&mut pieces, &ann.category(c).expect("validated").name);
            }
        }
        ScenarioKind::Synonym => {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            for c in ann.video_categories(video_id) {
                let cat = ann.category(c).expect("validated");
                let syns = cat.synonyms.as_deref().unwrap_or_default();
                if syns.is_empty() {
                    push_unique(&mut pieces, &cat.name);
                    continue;
                }
                let take = opts.synonyms_per_category.clamp(1, syns.len());
                let mut picked = sample(&mut rng, syns.len(), take).into_vec();
                picked.sort_unstable();
                for i in picked {
                    push_unique(&mut pieces, &syns[i]);
                }
            }
        }
        ScenarioKind::Definition => {
            for c in ann.video_categories(video_id) {
                let cat = ann.category(c).expect("validated");
                push_unique(&mut pieces, cat.def.as_deref().unwrap_or(&cat.name));
            }
        }
        ScenarioKind::Caption => {
            for a in ann.video_annotations(video_id) {
                for cap in a.captions.iter().flatten() {
                    push_unique(&mut pieces, cap);
                }
            }
        }
        ScenarioKind::Retrieval => {
            let mut frames: Vec<&Image> = ann
                .images
                .iter()
                .filter(|im| im.video_id == Some(video_id))
                .filter(|im| im.frame_index.unwrap_or(im.id) <= frame)
                .collect();
            frames.sort_by_key(|im| im.frame_index.unwrap_or(im.id));
            let prompt = frames
                .iter()
                .rev()
                .find_map(|im| im.prompt.as_deref())
                .ok_or_else(|| {
                    Error::ScenarioUnavailable(format!(
                        "video {video_id} has no retrieval prompt at or before frame {frame}"
                    ))
                })?;
            pieces.push(prompt.to_string());
        }
    }
    if pieces.is_empty() {
        return Err(Error::ScenarioUnavailable(format!(
            "video {video_id} has no data for the {kind} scenario"
        )));
    }
    Ok(pieces.join(PROMPT_SEPARATOR))
}

/// A generated retrieval prompt and the tracks it denotes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RetrievalPrompt {
    pub text: String,
    pub category_id: u64,
    pub track_ids: Vec<u64>,
}

/// Picks the category with the most records in the video (lowest id on
/// ties), then its track with the longest frame span (lowest track id on ties).
pub fn generate_retrieval_prompt(ann: &AnnotationSet, video_id: u64) -> Result<RetrievalPrompt> {
    let records = ann.video_annotations(video_id);
    if records.is_empty() {
        return Err(Error::ScenarioUnavailable(format!(
            "video {video_id} has no annotations"
        )));
    }
    let mut counts: HashMap<u64, usize> = HashMap::new();
    for a in &records {
        *counts.entry(a.category_id).or_default() += 1;
    }
    let (&category_id, _) = counts
        .iter()
        .max_by(|(ca, na), (cb, nb)| na.cmp(nb).then(cb.cmp(ca)))
        .expect("non-empty");
    let mut spans: HashMap<u64, (u64, u64)> = HashMap::new();
    for a in records.iter().filter(|a| a.category_id == category_id) {
        let track = a.track_id.unwrap_or(a.id);
        let f = ann.frame_of(a);
        let e = spans.entry(track).or_insert((f, f));
        e.0 = e.0.min(f);
        e.1 = e.1.max(f);
    }
    let (&track, _) = spans
        .iter()
        .max_by(|(ta, sa), (tb, sb)| (sa.1 - sa.0).cmp(&(sb.1 - sb.0)).then(tb.cmp(ta)))
        .expect("non-empty");
    let name = &ann.category(category_id).expect("validated").name;
    Ok(RetrievalPrompt {
        text: format!("{name} appearing longest in the scene"),
        category_id,
        track_ids: vec![track],
    })
}

/// One tracked box in one frame. Boxes are normalized center-size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackRecord {
    pub frame: usize,
    pub id: u64,
    pub bbox: [f64; 4],
    pub conf: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<String>,
}

impl TrackRecord {
    pub fn bbox(&self) -> BBox {
        BBox::from_array(self.bbox)
    }
}

/// Writes one JSON record per line.
pub fn write_tracks<W: Write>(records: &[TrackRecord], mut out: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn tracks_to_string(records: &[TrackRecord]) -> Result<String> {
    let mut buf = Vec::new();
    write_tracks(records, &mut buf)?;
    Ok(String::from_utf8(buf).expect("JSON output is UTF-8"))
}

/// Reads newline-delimited records, skipping blank lines.
pub fn read_tracks<R: BufRead>(input: R) -> Result<Vec<TrackRecord>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut de = serde_json::Deserializer::from_str(&line);
        let rec: TrackRecord = serde_path_to_error::deserialize(&mut de).map_err(|e| {
            schema(format!("line {}{}", n + 1, path_suffix(&e.path().to_string())), e.inner().to_string())
        })?;
        out.push(rec);
    }
    Ok(out)
}

fn path_suffix(p: &str) -> String {
    if p == "." {
        String::new()
    } else {
        format!(" {p}")
    }
}

pub fn tracks_from_str(s: &str) -> Result<Vec<TrackRecord>> {
    read_tracks(s.as_bytes())
}
