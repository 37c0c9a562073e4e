//! Token producers: image tokens from scene frames, prompt tokens from a
//! controlled vocabulary, tracklet tokens pooled from the previous frame.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::annotations::ScenarioKind;
use crate::error::{shape_err, Error, Result};
use crate::simworld::{split_sentences, split_words, world_words, SceneFrame, ACTIONS, CATEGORIES, COLORS};
use crate::tensor::{layer_norm_backward, layer_norm_cached, LayerNormCache, Matrix};
use crate::tracker::Tracklet;

pub const PROMPT_TOKEN_CAP: usize = 250;
pub const IMAGE_TOKEN_CAP: usize = 500;
pub const TRACKLET_TOKEN_CAP: usize = 500;

pub const CLS: &str = "<cls>";
pub const SEP: &str = "<sep>";
pub const UNK: &str = "<unk>";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenFamily {
    Image,
    Tracklet,
    Prompt,
}

impl TokenFamily {
    pub fn cap(self) -> usize {
        match self {
            Self::Image => IMAGE_TOKEN_CAP,
            Self::Tracklet => TRACKLET_TOKEN_CAP,
            Self::Prompt => PROMPT_TOKEN_CAP,
        }
    }
}

/// Where a token row came from.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenOrigin {
    Cell(usize),
    Tracklet(u64),
    Word(String),
    Sentence(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenMatrix {
    pub family: TokenFamily,
    pub tokens: Matrix,
    pub origin: Vec<TokenOrigin>,
}

impl TokenMatrix {
    pub fn new(family: TokenFamily, tokens: Matrix, origin: Vec<TokenOrigin>) -> Result<Self> {
        if tokens.rows() != origin.len() {
            return Err(shape_err("TokenMatrix", "one origin per row required"));
        }
        if tokens.rows() > family.cap() {
            return Err(Error::Config(format!(
                "{} {family:?} tokens exceed the cap of {}",
                tokens.rows(),
                family.cap()
            )));
        }
        Ok(Self {
            family,
            tokens,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// Word list plus a learnable embedding table.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    pub embeddings: Matrix,
}

impl Vocabulary {
    /// Sentinels first, then `words` in order (duplicates ignored).
    pub fn new<S: AsRef<str>>(words: &[S], d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut list: Vec<String> = vec![CLS.into(), SEP.into(), UNK.into()];
        for w in words {
            let w = w.as_ref().trim().to_lowercase();
            if !w.is_empty() && !list.contains(&w) {
                list.push(w);
            }
        }
        let normal = Normal::new(0.0, 1.0).expect("valid normal");
        let data = (0..list.len() * d).map(|_| normal.sample(rng)).collect();
        let embeddings = Matrix::from_vec(list.len(), d, data)?;
        Self::from_parts(list, embeddings)
    }

    /// Vocabulary covering every word the synthetic world produces.
    pub fn world(d: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(&world_words(), d, rng)
    }

    pub fn from_parts(words: Vec<String>, embeddings: Matrix) -> Result<Self> {
        if embeddings.rows() != words.len() {
            return Err(shape_err("Vocabulary", "one embedding row per word required"));
        }
        let mut index = HashMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary word `{w}`")));
            }
        }
        for s in [CLS, SEP, UNK] {
            if !index.contains_key(s) {
                return Err(Error::Config(format!("vocabulary lacks sentinel `{s}`")));
            }
        }
        Ok(Self {
            words,
            index,
            embeddings,
        })
    }

    /// Parses a word list with one word per line.
    pub fn words_from_lines(text: &str) -> Vec<String> {
        text.lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn to_lines(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.index.contains_key(word)
    }

    /// Id of a word, or of the unknown-word sentinel.
    pub fn id(&self, word: &str) -> usize {
        self.index
            .get(word)
            .or_else(|| self.index.get(UNK))
            .copied()
            .expect("sentinel present")
    }

    /// Drops unknown words, keeping sentence boundaries. Returns the cleaned
    /// prompt and the dropped words.
    pub fn filter_known(&self, prompt: &str) -> (String, Vec<String>) {
        let mut dropped = Vec::new();
        let mut sentences = Vec::new();
        for s in split_sentences(prompt) {
            let kept: Vec<String> = split_words(&s)
                .into_iter()
                .filter(|w| {
                    let ok = self.contains(w) && ![CLS, SEP, UNK].contains(&w.as_str());
                    if !ok {
                        dropped.push(w.clone());
                    }
                    ok
                })
                .collect();
            if !kept.is_empty() {
                sentences.push(kept.join(" "));
            }
        }
        (sentences.join(". "), dropped)
    }
}

/// Vocabulary ids behind each prompt token; sentence tokens average their ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptLayout {
    pub tokens: Vec<Vec<usize>>,
    pub origin: Vec<TokenOrigin>,
}

pub fn tokenize_prompt(prompt: &str, v: &Vocabulary, kind: ScenarioKind) -> Result<PromptLayout> {
    let mut tokens = Vec::new();
    let mut origin = Vec::new();
    for s in split_sentences(prompt) {
        let words = split_words(&s);
        if words.is_empty() {
            continue;
        }
        if kind.word_level() {
            for w in words {
                tokens.push(vec![v.id(&w)]);
                origin.push(TokenOrigin::Word(w));
            }
        } else {
            tokens.push(words.iter().map(|w| v.id(w)).collect());
            origin.push(TokenOrigin::Sentence(s));
        }
    }
    if tokens.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if tokens.len() > PROMPT_TOKEN_CAP {
        return Err(Error::Config(format!(
            "prompt has {} tokens, above the cap of {PROMPT_TOKEN_CAP}",
            tokens.len()
        )));
    }
    Ok(PromptLayout { tokens, origin })
}

/// Rows of the embedding table gathered (or averaged) per prompt token.
pub fn layout_tokens(layout: &PromptLayout, v: &Vocabulary) -> Matrix {
    let d = v.embeddings.cols();
    let mut out = Matrix::zeros(layout.tokens.len(), d);
    for (r, ids) in layout.tokens.iter().enumerate() {
        let scale = 1.0 / ids.len() as f64;
        let row = out.row_mut(r);
        for &id in ids {
            for (o, e) in row.iter_mut().zip(v.embeddings.row(id)) {
                *o += e * scale;
            }
        }
    }
    out
}

/// Scatters prompt-token gradients back onto the embedding table.
pub(crate) fn layout_backward(layout: &PromptLayout, grad_tokens: &Matrix, grad_table: &mut Matrix) {
    for (r, ids) in layout.tokens.iter().enumerate() {
        let scale = 1.0 / ids.len() as f64;
        for &id in ids {
            for (g, v) in grad_table.row_mut(id).iter_mut().zip(grad_tokens.row(r)) {
                *g += v * scale;
            }
        }
    }
}

/// One token per word for word-level scenarios, one per sentence otherwise.
pub fn embed_prompt(prompt: &str, v: &Vocabulary, kind: ScenarioKind) -> Result<TokenMatrix> {
    let layout = tokenize_prompt(prompt, v, kind)?;
    let tokens = layout_tokens(&layout, v);
    TokenMatrix::new(TokenFamily::Prompt, tokens, layout.origin)
}

/// Sinusoidal table: `PE[pos, 2i] = sin(pos / 10000^(2i/d))`, odd columns cosine.
pub fn positional_encoding(n: usize, d: usize) -> Result<Matrix> {
    if d % 2 != 0 {
        return Err(Error::Config(format!("positional width {d} must be even")));
    }
    let mut pe = Matrix::zeros(n, d);
    for pos in 0..n {
        for i in 0..d / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe.set(pos, 2 * i, angle.sin());
            pe.set(pos, 2 * i + 1, angle.cos());
        }
    }
    Ok(pe)
}

/// Grid encoding: column code in the first half, row code in the second.
pub fn positional_encoding_2d(grid_w: usize, grid_h: usize, d: usize) -> Result<Matrix> {
    if d % 4 != 0 {
        return Err(Error::Config(format!(
            "2-D positional width {d} must be divisible by 4"
        )));
    }
    let half = d / 2;
    let cols = positional_encoding(grid_w, half)?;
    let rows = positional_encoding(grid_h, half)?;
    let mut pe = Matrix::zeros(grid_w * grid_h, d);
    for r in 0..grid_h {
        for c in 0..grid_w {
            let row = pe.row_mut(r * grid_w + c);
            row[..half].copy_from_slice(cols.row(c));
            row[half..].copy_from_slice(rows.row(r));
        }
    }
    Ok(pe)
}

/// Linear map, layer normalization and dropout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResizerParams {
    pub weight: Matrix,
    pub bias: Matrix,
    pub gain: Matrix,
    pub shift: Matrix,
    pub dropout: f64,
}

impl ResizerParams {
    pub fn new(input: usize, d: usize, dropout: f64, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + d) as f64).sqrt();
        let data = (0..input * d).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(input, d, data).expect("sized"),
            bias: Matrix::zeros(1, d),
            gain: Matrix::filled(1, d, 1.0),
            shift: Matrix::zeros(1, d),
            dropout,
        }
    }

    pub fn input_width(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_width(&self) -> usize {
        self.weight.cols()
    }
}

pub(crate) struct ResizeCache {
    pub input: Matrix,
    pub norm: LayerNormCache,
    pub mask: Option<Matrix>,
}

/// Inference-mode resize: dropout is the identity.
pub fn feature_resize(raw: &Matrix, p: &ResizerParams) -> Result<Matrix> {
    Ok(resize_forward(raw, p, None)?.0)
}

/// Training-mode resize with Bernoulli dropout at the configured rate.
pub fn feature_resize_train(raw: &Matrix, p: &ResizerParams, rng: &mut impl Rng) -> Result<Matrix> {
    let mask = dropout_mask(raw.rows(), p.output_width(), p.dropout, rng);
    Ok(resize_forward(raw, p, mask.as_ref())?.0)
}

/// Inverted-dropout mask, or `None` when the rate is zero.
pub(crate) fn dropout_mask(rows: usize, cols: usize, rate: f64, rng: &mut impl Rng) -> Option<Matrix> {
    if rate <= 0.0 {
        return None;
    }
    let keep = 1.0 - rate;
    let data = (0..rows * cols)
        .map(|_| if rng.gen_bool(keep) { 1.0 / keep } else { 0.0 })
        .collect();
    Some(Matrix::from_vec(rows, cols, data).expect("sized"))
}

pub(crate) fn resize_forward(
    raw: &Matrix,
    p: &ResizerParams,
    mask: Option<&Matrix>,
) -> Result<(Matrix, ResizeCache)> {
    if raw.cols() != p.input_width() {
        return Err(shape_err(
            "feature_resize",
            format!("input width {} for a resizer of width {}", raw.cols(), p.input_width()),
        ));
    }
    let mut pre = raw.matmul(&p.weight)?;
    pre.add_row_vector(p.bias.data())?;
    let (mut out, norm) = layer_norm_cached(&pre, p.gain.data(), p.shift.data())?;
    if let Some(m) = mask {
        for (o, k) in out.data_mut().iter_mut().zip(m.data()) {
            *o *= k;
        }
    }
    Ok((
        out,
        ResizeCache {
            input: raw.clone(),
            norm,
            mask: mask.cloned(),
        },
    ))
}

/// Accumulates parameter gradients and returns the input gradient.
pub(crate) fn resize_backward(
    p: &ResizerParams,
    cache: &ResizeCache,
    grad_out: &Matrix,
    grads: &mut ResizerParams,
) -> Matrix {
    let mut g = grad_out.clone();
    if let Some(m) = &cache.mask {
        for (v, k) in g.data_mut().iter_mut().zip(m.data()) {
            *v *= k;
        }
    }
    let g_pre = layer_norm_backward(
        &cache.norm,
        p.gain.data(),
        &g,
        grads.gain.data_mut(),
        grads.shift.data_mut(),
    );
    let gw = cache.input.t_matmul(&g_pre).expect("resize grad shape");
    grads.weight.add_assign(&gw).expect("resize grad shape");
    for (b, v) in grads.bias.data_mut().iter_mut().zip(g_pre.sum_rows()) {
        *b += v;
    }
    g_pre.matmul_t(&p.weight).expect("resize grad shape")
}

/// Grid and geometry settings of the image encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Width of the fixed random projection fed to the resizer.
    pub raw_width: usize,
    /// Multiplier on the cell-relative box geometry appended to the attribute one-hot.
    pub geometry_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            grid_w: 8,
            grid_h: 8,
            raw_width: 32,
            geometry_scale: 4.0,
        }
    }
}

impl EncoderConfig {
    pub fn cells(&self) -> usize {
        self.grid_w * self.grid_h
    }
}

/// Width of the attribute one-hot plus the four geometry values.
pub fn attribute_width() -> usize {
    CATEGORIES.len() + COLORS.len() + ACTIONS.len() + 4
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderWeights {
    /// Fixed seeded projection of the attribute vector; never trained.
    pub projection: Matrix,
    /// Learned raw feature of an empty cell.
    pub no_object: Matrix,
    pub resize: ResizerParams,
}

impl EncoderWeights {
    pub fn new(cfg: &EncoderConfig, d: usize, dropout: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 1.0 / (attribute_width() as f64).sqrt()).expect("valid");
        let data = (0..attribute_width() * cfg.raw_width)
            .map(|_| normal.sample(rng))
            .collect();
        let projection = Matrix::from_vec(attribute_width(), cfg.raw_width, data)?;
        let no_object = Matrix::from_vec(
            1,
            cfg.raw_width,
            (0..cfg.raw_width).map(|_| normal.sample(rng)).collect(),
        )?;
        Ok(Self {
            projection,
            no_object,
            resize: ResizerParams::new(cfg.raw_width, d, dropout, rng),
        })
    }
}

/// Raw per-cell features before the resizer, plus which cells are empty.
pub(crate) fn raw_cell_features(
    frame: &SceneFrame,
    cfg: &EncoderConfig,
    w: &EncoderWeights,
) -> Result<(Matrix, Vec<bool>)> {
    let m = cfg.cells();
    if m > IMAGE_TOKEN_CAP {
        return Err(Error::Config(format!(
            "{m} grid cells exceed the image token cap of {IMAGE_TOKEN_CAP}"
        )));
    }
    if frame.grid_w != cfg.grid_w || frame.grid_h != cfg.grid_h {
        return Err(Error::Config(format!(
            "frame grid {}x{} differs from encoder grid {}x{}",
            frame.grid_w, frame.grid_h, cfg.grid_w, cfg.grid_h
        )));
    }
    let mut raw = Matrix::zeros(m, cfg.raw_width);
    let mut empty = vec![true; m];
    for o in &frame.objects {
        let cell = frame.cell_of(&o.bbox);
        let mut attr = vec![0.0; attribute_width()];
        attr[o.attributes.category] = 1.0;
        attr[CATEGORIES.len() + o.attributes.color] = 1.0;
        attr[CATEGORIES.len() + COLORS.len() + o.attributes.action] = 1.0;
        let g = CATEGORIES.len() + COLORS.len() + ACTIONS.len();
        // Geometry relative to the cell, in cell units.
        let (gw, gh) = (cfg.grid_w as f64, cfg.grid_h as f64);
        let local = [
            o.bbox.cx * gw - (cell % cfg.grid_w) as f64 - 0.5,
            o.bbox.cy * gh - (cell / cfg.grid_w) as f64 - 0.5,
            o.bbox.w * gw - 1.0,
            o.bbox.h * gh - 1.0,
        ];
        for (k, v) in local.into_iter().enumerate() {
            attr[g + k] = v * cfg.geometry_scale;
        }
        let row = raw.row_mut(cell);
        for (a, &x) in attr.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            for (r, p) in row.iter_mut().zip(w.projection.row(a)) {
                *r += x * p;
            }
        }
        empty[cell] = false;
    }
    for (cell, &e) in empty.iter().enumerate() {
        if e {
            raw.row_mut(cell).copy_from_slice(w.no_object.data());
        }
    }
    Ok((raw, empty))
}

/// One token per grid cell: resized raw feature plus the 2-D positional code.
pub fn encode_image(frame: &SceneFrame, cfg: &EncoderConfig, w: &EncoderWeights) -> Result<TokenMatrix> {
    let (raw, _) = raw_cell_features(frame, cfg, w)?;
    let mut tokens = feature_resize(&raw, &w.resize)?;
    let pe = positional_encoding_2d(cfg.grid_w, cfg.grid_h, tokens.cols())?;
    tokens.add_assign(&pe)?;
    let origin = (0..cfg.cells()).map(TokenOrigin::Cell).collect();
    TokenMatrix::new(TokenFamily::Image, tokens, origin)
}

/// Row `j` is the mean of the previous-frame image rows assigned to
/// tracklet `j`; tracklets without an assignment contribute their stored feature.
pub fn extract_tracklets(tracklets: &[Tracklet], prev_image_tokens: &Matrix) -> Result<TokenMatrix> {
    let d = prev_image_tokens.cols();
    let mut out = Matrix::zeros(tracklets.len(), d);
    for (j, t) in tracklets.iter().enumerate() {
        let row = out.row_mut(j);
        if t.assigned.is_empty() {
            if t.feature.len() != d {
                return Err(shape_err("extract_tracklets", "stored feature width differs from D"));
            }
            row.copy_from_slice(&t.feature);
            continue;
        }
        let scale = 1.0 / t.assigned.len() as f64;
        for &i in &t.assigned {
            if i >= prev_image_tokens.rows() {
                return Err(Error::IndexOutOfRange {
                    what: "previous image tokens",
                    index: i,
                    len: prev_image_tokens.rows(),
                });
            }
            for (o, v) in row.iter_mut().zip(prev_image_tokens.row(i)) {
                *o += v * scale;
            }
        }
    }
    let origin = tracklets.iter().map(|t| TokenOrigin::Tracklet(t.id)).collect();
    TokenMatrix::new(TokenFamily::Tracklet, out, origin)
}
