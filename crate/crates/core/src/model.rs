//! Correlation model: grounding, the factorized region|tracklet ×
//! tracklet|prompt forward pass, the full third-order forward pass and the
//! box decoder. Training-time caches and the matching backward pass live here
//! too so the two stay in step.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{shape_err, Error, Result};
use crate::simworld::SceneFrame;
use crate::tensor::{
    attention_from_projections, cross_attention_backward, cross_attention_cached, dot,
    softmax_rows, triple_correlation, AttentionCache, AttentionParams, CoreKind, Matrix, Tensor3,
};
use crate::tokens::{
    dropout_mask, layout_backward, layout_tokens, positional_encoding_2d, raw_cell_features,
    resize_backward, resize_forward, EncoderConfig, EncoderWeights, PromptLayout, ResizeCache,
    Vocabulary,
};

/// Decoder output width: four box values and a confidence.
pub const DECODER_OUT: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub encoder: EncoderConfig,
    /// Dropout rate of the image resizer during training.
    pub dropout: f64,
    pub seed: u64,
    /// Core of the full third-order correlation.
    pub core: CoreKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 64,
            heads: 4,
            encoder: EncoderConfig::default(),
            dropout: 0.0,
            seed: 0,
            core: CoreKind::Superdiagonal,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 4 != 0 {
            return Err(Error::Config(format!("model width {} must be a positive multiple of 4", self.d)));
        }
        if self.heads == 0 || self.d % self.heads != 0 {
            return Err(Error::Config(format!(
                "model width {} is not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Dense layer `x W + b` with `W` stored input-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Linear {
    pub fn new(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(input, output, data).expect("sized"),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        out.add_row_vector(self.bias.data())?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: EncoderWeights,
    /// Region|tracklet correlation.
    pub region_tracklet: AttentionParams,
    /// Shared by region|prompt and tracklet|prompt, since tracklet tokens are
    /// pooled image tokens.
    pub visual_prompt: AttentionParams,
    pub value_prompt: Matrix,
    pub value_tracklet: Matrix,
    pub ffn: [Linear; 3],
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Matrix {
    let normal = Normal::new(0.0, std).expect("valid std");
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
        .expect("sized")
}

impl ModelWeights {
    /// Seeded initialization with the world vocabulary.
    pub fn init(config: ModelConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let vocab = Vocabulary::world(config.d, &mut rng)?;
        Self::init_with_vocab(config, vocab, &mut rng)
    }

    pub fn init_with_vocab(config: ModelConfig, vocab: Vocabulary, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        if vocab.embeddings.cols() != d {
            return Err(shape_err("ModelWeights::init", "vocabulary width differs from D"));
        }
        let std = 1.0 / (d as f64).sqrt();
        let encoder = EncoderWeights::new(&config.encoder, d, config.dropout, rng)?;
        let region_tracklet =
            AttentionParams::new(config.heads, gaussian(d, d, std, rng), gaussian(d, d, std, rng))?;
        let visual_prompt =
            AttentionParams::new(config.heads, gaussian(d, d, std, rng), gaussian(d, d, std, rng))?;
        let value_prompt = gaussian(d, d, std, rng);
        let value_tracklet = gaussian(d, d, std, rng);
        let mut last = Linear::new(d, DECODER_OUT, rng);
        // Start with low confidence everywhere.
        last.bias.set(0, 4, -2.0);
        let ffn = [Linear::new(d, d, rng), Linear::new(d, d, rng), last];
        Ok(Self {
            config,
            vocab,
            encoder,
            region_tracklet,
            visual_prompt,
            value_prompt,
            value_tracklet,
            ffn,
        })
    }

    pub fn d(&self) -> usize {
        self.config.d
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        vec![
            ("vocab.embeddings", &self.vocab.embeddings),
            ("encoder.projection", &self.encoder.projection),
            ("encoder.no_object", &self.encoder.no_object),
            ("encoder.resize.weight", &self.encoder.resize.weight),
            ("encoder.resize.bias", &self.encoder.resize.bias),
            ("encoder.resize.gain", &self.encoder.resize.gain),
            ("encoder.resize.shift", &self.encoder.resize.shift),
            ("region_tracklet.w_q", &self.region_tracklet.w_q),
            ("region_tracklet.w_k", &self.region_tracklet.w_k),
            ("visual_prompt.w_q", &self.visual_prompt.w_q),
            ("visual_prompt.w_k", &self.visual_prompt.w_k),
            ("value_prompt", &self.value_prompt),
            ("value_tracklet", &self.value_tracklet),
            ("ffn.0.weight", &self.ffn[0].weight),
            ("ffn.0.bias", &self.ffn[0].bias),
            ("ffn.1.weight", &self.ffn[1].weight),
            ("ffn.1.bias", &self.ffn[1].bias),
            ("ffn.2.weight", &self.ffn[2].weight),
            ("ffn.2.bias", &self.ffn[2].bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Matrix)> {
        let [f0, f1, f2] = &mut self.ffn;
        vec![
            ("vocab.embeddings", &mut self.vocab.embeddings),
            ("encoder.projection", &mut self.encoder.projection),
            ("encoder.no_object", &mut self.encoder.no_object),
            ("encoder.resize.weight", &mut self.encoder.resize.weight),
            ("encoder.resize.bias", &mut self.encoder.resize.bias),
            ("encoder.resize.gain", &mut self.encoder.resize.gain),
            ("encoder.resize.shift", &mut self.encoder.resize.shift),
            ("region_tracklet.w_q", &mut self.region_tracklet.w_q),
            ("region_tracklet.w_k", &mut self.region_tracklet.w_k),
            ("visual_prompt.w_q", &mut self.visual_prompt.w_q),
            ("visual_prompt.w_k", &mut self.visual_prompt.w_k),
            ("value_prompt", &mut self.value_prompt),
            ("value_tracklet", &mut self.value_tracklet),
            ("ffn.0.weight", &mut f0.weight),
            ("ffn.0.bias", &mut f0.bias),
            ("ffn.1.weight", &mut f1.weight),
            ("ffn.1.bias", &mut f1.bias),
            ("ffn.2.weight", &mut f2.weight),
            ("ffn.2.bias", &mut f2.bias),
        ]
    }

    /// Tensors that training never updates.
    pub fn is_frozen(name: &str) -> bool {
        name == "encoder.projection"
    }

    /// Same shapes, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        z
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors()
            .iter()
            .filter(|(n, _)| !Self::is_frozen(n))
            .map(|(_, t)| t.data().len())
            .sum()
    }
}

/// Multiply-add counts per stage of a forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopCount {
    /// Token projections, `O(n D²)` in both modes.
    pub projection: u64,
    /// Building the attention matrices: pairwise logits in the factorized
    /// mode, the third-order tensor and its marginals in the full mode.
    pub correlation: u64,
    /// Aggregating values into `Z`.
    pub aggregation: u64,
    pub decode: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.projection + self.correlation + self.aggregation + self.decode
    }
}

fn mm_flops(a: &Matrix, b_cols: usize) -> u64 {
    (a.rows() * a.cols() * b_cols) as u64
}

/// Per-head scaled logits `(X W_Q)(Y W_K)ᵀ / √D` before the softmax.
pub fn attention_logits(x: &Matrix, y: &Matrix, p: &AttentionParams) -> Result<Vec<Matrix>> {
    let d = p.width();
    if x.cols() != d || y.cols() != d {
        return Err(shape_err("attention_logits", "token width differs from D"));
    }
    let q = x.matmul(&p.w_q)?;
    let k = y.matmul(&p.w_k)?;
    let hd = d / p.heads;
    let scale = 1.0 / (d as f64).sqrt();
    Ok((0..p.heads)
        .map(|h| {
            let mut l = Matrix::zeros(q.rows(), k.rows());
            for i in 0..q.rows() {
                for j in 0..k.rows() {
                    let v = dot(&q.row(i)[h * hd..(h + 1) * hd], &k.row(j)[h * hd..(h + 1) * hd]);
                    l.set(i, j, v * scale);
                }
            }
            l
        })
        .collect())
}

/// Output of the factorized forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub a_it: Matrix,
    pub a_tp: Matrix,
    pub z: Matrix,
    pub flops: FlopCount,
}

/// Output of the full third-order forward pass.
#[derive(Clone, Debug)]
pub struct FullOutput {
    /// Sum of the per-head tensors.
    pub t: Tensor3,
    pub a_it: Matrix,
    pub a_tp: Matrix,
    pub z: Matrix,
    pub flops: FlopCount,
}

fn check_tokens(img: &Matrix, trk: &Matrix, prm: &Matrix, d: usize) -> Result<()> {
    for (name, m) in [("image", img), ("tracklet", trk), ("prompt", prm)] {
        if m.cols() != d {
            return Err(shape_err(
                "forward",
                format!("{name} tokens have width {}, expected {d}", m.cols()),
            ));
        }
    }
    if prm.rows() == 0 {
        return Err(Error::EmptyPrompt);
    }
    if trk.rows() == 0 {
        return Err(Error::Config(
            "tracking forward needs at least one tracklet; ground the frame instead".into(),
        ));
    }
    Ok(())
}

/// `Z = A_IT (A_TP (P W^P_V) + X W^T_V)`, evaluated right to left so no
/// `M × K` product is ever formed.
fn aggregate(
    a_it: &Matrix,
    a_tp: &Matrix,
    prm: &Matrix,
    trk: &Matrix,
    w: &ModelWeights,
    flops: &mut FlopCount,
) -> Result<Matrix> {
    let d = w.d();
    let vp = prm.matmul(&w.value_prompt)?;
    let vt = trk.matmul(&w.value_tracklet)?;
    flops.projection += mm_flops(prm, d) + mm_flops(trk, d);
    let mut u = a_tp.matmul(&vp)?;
    u.add_assign(&vt)?;
    let z = a_it.matmul(&u)?;
    flops.aggregation += mm_flops(a_tp, d) + mm_flops(a_it, d);
    Ok(z)
}

/// Factorized forward pass over image, tracklet and prompt tokens.
pub fn forward_simplified(img: &Matrix, trk: &Matrix, prm: &Matrix, w: &ModelWeights) -> Result<ForwardOutput> {
    let d = w.d();
    check_tokens(img, trk, prm, d)?;
    let mut flops = FlopCount::default();
    let it = &w.region_tracklet;
    let tp = &w.visual_prompt;
    let qi = img.matmul(&it.w_q)?;
    let kt = trk.matmul(&it.w_k)?;
    let qt = trk.matmul(&tp.w_q)?;
    let kp = prm.matmul(&tp.w_k)?;
    flops.projection += mm_flops(img, d) + 2 * mm_flops(trk, d) + mm_flops(prm, d);
    let (a_it, _) = attention_from_projections(&qi, &kt, it.heads);
    let (a_tp, _) = attention_from_projections(&qt, &kp, tp.heads);
    let (m, n, k) = (img.rows() as u64, trk.rows() as u64, prm.rows() as u64);
    flops.correlation += m * n * d as u64 + n * k * d as u64 + (m * n + n * k) * it.heads as u64;
    let z = aggregate(&a_it, &a_tp, prm, trk, w, &mut flops)?;
    Ok(ForwardOutput { a_it, a_tp, z, flops })
}

/// Full forward pass: builds the `M × N × K` correlation tensor from
/// projected tokens, per head, and reads both attention matrices off its
/// marginals. Costs `Θ(M N K D)`.
pub fn forward_full(img: &Matrix, trk: &Matrix, prm: &Matrix, w: &ModelWeights) -> Result<FullOutput> {
    let d = w.d();
    check_tokens(img, trk, prm, d)?;
    let mut flops = FlopCount::default();
    let heads = w.region_tracklet.heads;
    let hd = d / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let e = img.matmul(&w.region_tracklet.w_q)?;
    let x = trk.matmul(&w.region_tracklet.w_k)?;
    let p = prm.matmul(&w.visual_prompt.w_k)?;
    flops.projection += mm_flops(img, d) + mm_flops(trk, d) + mm_flops(prm, d);
    let (m, n, k) = (img.rows(), trk.rows(), prm.rows());
    let mut t_sum = Tensor3::zeros(m, n, k);
    let mut a_it = Matrix::zeros(m, n);
    let mut a_tp = Matrix::zeros(n, k);
    for h in 0..heads {
        let mut t = triple_correlation(
            &e.column_block(h * hd, hd),
            &x.column_block(h * hd, hd),
            &p.column_block(h * hd, hd),
            w.config.core,
        )?;
        t.scale(scale);
        let li = t.sum_prompt_axis();
        let lp = t.sum_region_axis();
        for (a, v) in a_it.data_mut().iter_mut().zip(softmax_rows(&li).data()) {
            *a += v / heads as f64;
        }
        for (a, v) in a_tp.data_mut().iter_mut().zip(softmax_rows(&lp).data()) {
            *a += v / heads as f64;
        }
        let sum = t_sum.data().iter().zip(t.data()).map(|(a, b)| a + b).collect();
        t_sum = Tensor3::from_vec((m, n, k), sum)?;
        flops.correlation += (m * n * k * hd) as u64 + 2 * (m * n * k) as u64 + (m * n + n * k) as u64;
    }
    let z = aggregate(&a_it, &a_tp, prm, trk, w, &mut flops)?;
    Ok(FullOutput {
        t: t_sum,
        a_it,
        a_tp,
        z,
        flops,
    })
}

/// Box and confidence predicted from one image token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub bbox: BBox,
    pub conf: f64,
    /// Image token the prediction was decoded from.
    pub token: usize,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) struct DecoderCache {
    pub h0: Matrix,
    pub l1: Matrix,
    pub r1: Matrix,
    pub l2: Matrix,
    pub r2: Matrix,
}

fn relu(m: &Matrix) -> Matrix {
    m.map(|v| v.max(0.0))
}

/// Pre-sigmoid decoder outputs, one row of five per image token.
pub(crate) fn decoder_forward(z: &Matrix, img: &Matrix, w: &ModelWeights) -> Result<(Matrix, DecoderCache)> {
    if z.shape() != img.shape() {
        return Err(shape_err(
            "decode",
            format!("Z is {:?}, image tokens {:?}", z.shape(), img.shape()),
        ));
    }
    let h0 = z.add(img)?;
    let l1 = w.ffn[0].forward(&h0)?;
    let r1 = relu(&l1);
    let l2 = w.ffn[1].forward(&r1)?;
    let r2 = relu(&l2);
    let mut out = w.ffn[2].forward(&r2)?;
    add_reference_boxes(&mut out, &w.config.encoder);
    Ok((out, DecoderCache { h0, l1, r1, l2, r2 }))
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Box logits are offsets from the token's own grid cell. Token sets that
/// do not cover the grid decode without a reference.
fn add_reference_boxes(out: &mut Matrix, cfg: &EncoderConfig) {
    let (gw, gh) = (cfg.grid_w, cfg.grid_h);
    if gw < 2 || gh < 2 || out.rows() != gw * gh {
        return;
    }
    let (lw, lh) = (logit(1.0 / gw as f64), logit(1.0 / gh as f64));
    for i in 0..out.rows() {
        let cx = ((i % gw) as f64 + 0.5) / gw as f64;
        let cy = ((i / gw) as f64 + 0.5) / gh as f64;
        let r = out.row_mut(i);
        r[0] += logit(cx);
        r[1] += logit(cy);
        r[2] += lw;
        r[3] += lh;
    }
}

/// Sigmoid boxes and confidences for every image token (`M × 5`).
pub fn decode_all(z: &Matrix, img: &Matrix, w: &ModelWeights) -> Result<Matrix> {
    Ok(decoder_forward(z, img, w)?.0.map(sigmoid))
}

fn candidates(out: &Matrix, gamma: f64) -> Vec<Candidate> {
    (0..out.rows())
        .filter_map(|i| {
            let r = out.row(i);
            let conf = sigmoid(r[4]);
            (conf >= gamma).then(|| Candidate {
                bbox: BBox::new(sigmoid(r[0]), sigmoid(r[1]), sigmoid(r[2]), sigmoid(r[3])),
                conf,
                token: i,
            })
        })
        .collect()
}

/// Decodes `FFN(Z + img)` per row and keeps candidates with confidence `≥ γ`.
pub fn decode(z: &Matrix, img: &Matrix, w: &ModelWeights, gamma: f64) -> Result<Vec<Candidate>> {
    Ok(candidates(&decoder_forward(z, img, w)?.0, gamma))
}

/// Region|prompt grounding used when no tracklets exist.
pub fn ground_regions(img: &Matrix, prm: &Matrix, w: &ModelWeights, gamma: f64) -> Result<Vec<Candidate>> {
    if prm.rows() == 0 {
        return Err(Error::EmptyPrompt);
    }
    let (a, _) = cross_attention_cached(img, prm, &w.visual_prompt)?;
    let z = a.matmul(&prm.matmul(&w.value_prompt)?)?;
    decode(&z, img, w, gamma)
}

/// Tracking decode in either forward mode.
pub fn track_regions(
    img: &Matrix,
    trk: &Matrix,
    prm: &Matrix,
    w: &ModelWeights,
    gamma: f64,
    mode: ForwardMode,
) -> Result<(Vec<Candidate>, FlopCount)> {
    let (z, mut flops) = match mode {
        ForwardMode::Simplified => {
            let o = forward_simplified(img, trk, prm, w)?;
            (o.z, o.flops)
        }
        ForwardMode::Full => {
            let o = forward_full(img, trk, prm, w)?;
            (o.z, o.flops)
        }
    };
    let d = w.d() as u64;
    flops.decode += img.rows() as u64 * (2 * d * d + d * DECODER_OUT as u64);
    Ok((decode(&z, img, w, gamma)?, flops))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    #[default]
    Simplified,
    Full,
}

impl std::str::FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simplified" => Ok(Self::Simplified),
            "full" => Ok(Self::Full),
            other => Err(Error::Config(format!("unknown forward mode `{other}`"))),
        }
    }
}

// ---- training-time forward and backward ----

pub(crate) struct EncodeCache {
    pub empty: Vec<bool>,
    pub resize: ResizeCache,
}

/// Image tokens with the caches needed for backpropagation.
pub(crate) fn encode_cached(
    frame: &SceneFrame,
    w: &ModelWeights,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<(Matrix, EncodeCache)> {
    let cfg = &w.config.encoder;
    let (raw, empty) = raw_cell_features(frame, cfg, &w.encoder)?;
    let mask = match rng {
        Some(r) => dropout_mask(raw.rows(), w.d(), w.encoder.resize.dropout, r),
        None => None,
    };
    let (mut tokens, resize) = resize_forward(&raw, &w.encoder.resize, mask.as_ref())?;
    tokens.add_assign(&positional_encoding_2d(cfg.grid_w, cfg.grid_h, w.d())?)?;
    Ok((tokens, EncodeCache { empty, resize }))
}

fn encode_backward(w: &ModelWeights, cache: &EncodeCache, grad_tokens: &Matrix, grads: &mut ModelWeights) {
    let g_raw = resize_backward(&w.encoder.resize, &cache.resize, grad_tokens, &mut grads.encoder.resize);
    for (cell, &e) in cache.empty.iter().enumerate() {
        if e {
            for (g, v) in grads.encoder.no_object.data_mut().iter_mut().zip(g_raw.row(cell)) {
                *g += v;
            }
        }
    }
}

pub(crate) enum BranchCache {
    Ground {
        a: Matrix,
        attn: AttentionCache,
        vp: Matrix,
    },
    Track {
        a_it: Matrix,
        attn_it: AttentionCache,
        a_tp: Matrix,
        attn_tp: AttentionCache,
        vp: Matrix,
        u: Matrix,
    },
}

/// One adjacent-frame training sample pushed through the network.
pub(crate) struct SampleForward {
    pub img: Matrix,
    enc: EncodeCache,
    prev: Option<(Matrix, EncodeCache)>,
    pub trk_cells: Vec<usize>,
    pub trk: Matrix,
    pub layout: PromptLayout,
    pub prm: Matrix,
    branch: BranchCache,
    dec: DecoderCache,
    /// Pre-sigmoid decoder outputs, `M × 5`.
    pub out: Matrix,
}

/// Runs the network on frame `t`, with tracklets pooled from the given
/// cells of frame `t - 1` (grounding when `prev` is `None` or no cells).
pub(crate) fn forward_sample(
    w: &ModelWeights,
    frame: &SceneFrame,
    prev: Option<(&SceneFrame, &[usize])>,
    layout: PromptLayout,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<SampleForward> {
    let (img, enc) = encode_cached(frame, w, rng.as_deref_mut())?;
    let prm = layout_tokens(&layout, &w.vocab);
    let vp = prm.matmul(&w.value_prompt)?;
    let (prev_enc, trk_cells, trk) = match prev {
        Some((pf, cells)) if !cells.is_empty() => {
            let (pimg, pcache) = encode_cached(pf, w, rng.as_deref_mut())?;
            let trk = pimg.gather_rows(cells)?;
            (Some((pimg, pcache)), cells.to_vec(), trk)
        }
        _ => (None, Vec::new(), Matrix::empty(w.d())),
    };
    let (z, branch) = if trk.rows() == 0 {
        let (a, attn) = cross_attention_cached(&img, &prm, &w.visual_prompt)?;
        let z = a.matmul(&vp)?;
        (z, BranchCache::Ground { a, attn, vp })
    } else {
        let (a_it, attn_it) = cross_attention_cached(&img, &trk, &w.region_tracklet)?;
        let (a_tp, attn_tp) = cross_attention_cached(&trk, &prm, &w.visual_prompt)?;
        let mut u = a_tp.matmul(&vp)?;
        u.add_assign(&trk.matmul(&w.value_tracklet)?)?;
        let z = a_it.matmul(&u)?;
        (
            z,
            BranchCache::Track {
                a_it,
                attn_it,
                a_tp,
                attn_tp,
                vp,
                u,
            },
        )
    };
    let (out, dec) = decoder_forward(&z, &img, w)?;
    Ok(SampleForward {
        img,
        enc,
        prev: prev_enc,
        trk_cells,
        trk,
        layout,
        prm,
        branch,
        dec,
        out,
    })
}

/// Extra gradients flowing directly into the token matrices from losses
/// that read them (alignment and objectness).
pub(crate) struct TokenGrads {
    pub img: Matrix,
    pub trk: Matrix,
    pub prm: Matrix,
}

impl TokenGrads {
    pub fn zeros(s: &SampleForward) -> Self {
        Self {
            img: Matrix::zeros(s.img.rows(), s.img.cols()),
            trk: Matrix::zeros(s.trk.rows(), s.trk.cols()),
            prm: Matrix::zeros(s.prm.rows(), s.prm.cols()),
        }
    }
}

fn linear_backward(layer: &Linear, input: &Matrix, g_out: &Matrix, grads: &mut Linear) -> Matrix {
    grads
        .weight
        .add_assign(&input.t_matmul(g_out).expect("shape"))
        .expect("shape");
    for (b, v) in grads.bias.data_mut().iter_mut().zip(g_out.sum_rows()) {
        *b += v;
    }
    g_out.matmul_t(&layer.weight).expect("shape")
}

fn relu_backward(pre: &Matrix, g: &Matrix) -> Matrix {
    let mut out = g.clone();
    for (o, &p) in out.data_mut().iter_mut().zip(pre.data()) {
        if p <= 0.0 {
            *o = 0.0;
        }
    }
    out
}

/// Accumulates parameter gradients for a sample given the gradient of the
/// loss with respect to the pre-sigmoid outputs and the direct token grads.
pub(crate) fn backward_sample(
    w: &ModelWeights,
    s: &SampleForward,
    grad_out: &Matrix,
    mut tg: TokenGrads,
    grads: &mut ModelWeights,
) {
    let [g0, g1, g2] = &mut grads.ffn;
    let g_r2 = linear_backward(&w.ffn[2], &s.dec.r2, grad_out, g2);
    let g_l2 = relu_backward(&s.dec.l2, &g_r2);
    let g_r1 = linear_backward(&w.ffn[1], &s.dec.r1, &g_l2, g1);
    let g_l1 = relu_backward(&s.dec.l1, &g_r1);
    let g_h0 = linear_backward(&w.ffn[0], &s.dec.h0, &g_l1, g0);
    tg.img.add_assign(&g_h0).expect("shape");
    let g_z = &g_h0;

    let accumulate_attn = |target: &mut AttentionParams, g: &crate::tensor::AttentionGrads| {
        target.w_q.add_assign(&g.w_q).expect("shape");
        target.w_k.add_assign(&g.w_k).expect("shape");
    };

    let g_vp = match &s.branch {
        BranchCache::Ground { a, attn, vp } => {
            let g_a = g_z.matmul_t(vp).expect("shape");
            let g_vp = a.t_matmul(g_z).expect("shape");
            let ga = cross_attention_backward(&s.img, &s.prm, &w.visual_prompt, attn, &g_a);
            tg.img.add_assign(&ga.x).expect("shape");
            tg.prm.add_assign(&ga.y).expect("shape");
            accumulate_attn(&mut grads.visual_prompt, &ga);
            g_vp
        }
        BranchCache::Track {
            a_it,
            attn_it,
            a_tp,
            attn_tp,
            vp,
            u,
        } => {
            let g_a_it = g_z.matmul_t(u).expect("shape");
            let g_u = a_it.t_matmul(g_z).expect("shape");
            let g_a_tp = g_u.matmul_t(vp).expect("shape");
            let g_vp = a_tp.t_matmul(&g_u).expect("shape");
            grads
                .value_tracklet
                .add_assign(&s.trk.t_matmul(&g_u).expect("shape"))
                .expect("shape");
            tg.trk
                .add_assign(&g_u.matmul_t(&w.value_tracklet).expect("shape"))
                .expect("shape");
            let gi = cross_attention_backward(&s.img, &s.trk, &w.region_tracklet, attn_it, &g_a_it);
            tg.img.add_assign(&gi.x).expect("shape");
            tg.trk.add_assign(&gi.y).expect("shape");
            accumulate_attn(&mut grads.region_tracklet, &gi);
            let gp = cross_attention_backward(&s.trk, &s.prm, &w.visual_prompt, attn_tp, &g_a_tp);
            tg.trk.add_assign(&gp.x).expect("shape");
            tg.prm.add_assign(&gp.y).expect("shape");
            accumulate_attn(&mut grads.visual_prompt, &gp);
            g_vp
        }
    };
    grads
        .value_prompt
        .add_assign(&s.prm.t_matmul(&g_vp).expect("shape"))
        .expect("shape");
    tg.prm
        .add_assign(&g_vp.matmul_t(&w.value_prompt).expect("shape"))
        .expect("shape");

    layout_backward(&s.layout, &tg.prm, &mut grads.vocab.embeddings);
    encode_backward(w, &s.enc, &tg.img, grads);
    if let Some((pimg, pcache)) = &s.prev {
        let mut g_prev = Matrix::zeros(pimg.rows(), pimg.cols());
        for (j, &cell) in s.trk_cells.iter().enumerate() {
            for (g, v) in g_prev.row_mut(cell).iter_mut().zip(tg.trk.row(j)) {
                *g += v;
            }
        }
        encode_backward(w, pcache, &g_prev, grads);
    }
}
