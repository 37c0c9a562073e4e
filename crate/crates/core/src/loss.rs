//! Training losses with analytic gradients, the triplet diagnostic and a
//! finite-difference checker.

use serde::{Deserialize, Serialize};

use crate::bbox::{giou, BBox, AREA_EPS};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, log_sum_exp, softmax_in_place, Matrix, Tensor3};

/// Positive tracklet/prompt links for the alignment loss.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PositivePairs {
    /// `(tracklet j, prompt token k)`.
    pub prompt_positive: Vec<(usize, usize)>,
    /// `(prompt token k, tracklet j)`.
    pub object_positive: Vec<(usize, usize)>,
}

impl PositivePairs {
    /// Both directions from one list of `(tracklet, prompt token)` links.
    pub fn symmetric(links: &[(usize, usize)]) -> Self {
        Self {
            prompt_positive: links.to_vec(),
            object_positive: links.iter().map(|&(j, k)| (k, j)).collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_positive.is_empty() || self.object_positive.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub tracklet_prompt: f64,
    pub region_tracklet: f64,
    pub giou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            tracklet_prompt: 0.3,
            region_tracklet: 0.3,
            giou: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.tracklet_prompt, self.region_tracklet, self.giou];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::Config("loss weights must be non-negative with one positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub alignment: f64,
    pub objectness: f64,
    pub giou: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.tracklet_prompt * c.alignment + w.region_tracklet * c.objectness + w.giou * c.giou
}

fn check_width(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.cols() != b.cols() {
        return Err(shape_err(op, format!("widths {} and {} differ", a.cols(), b.cols())));
    }
    Ok(())
}

fn check_pairs(pairs: &[(usize, usize)], first: (usize, &'static str), second: (usize, &'static str)) -> Result<()> {
    for &(a, b) in pairs {
        if a >= first.0 {
            return Err(Error::IndexOutOfRange { what: first.1, index: a, len: first.0 });
        }
        if b >= second.0 {
            return Err(Error::IndexOutOfRange { what: second.1, index: b, len: second.0 });
        }
    }
    Ok(())
}

/// `−log softmax(row·others)[target]` with its gradients, accumulated into
/// `g_row` and `g_others` with weight `scale`.
fn log_softmax_term(
    row: &[f64],
    others: &Matrix,
    target: usize,
    scale: f64,
    g_row: &mut [f64],
    g_others: &mut Matrix,
) -> f64 {
    let mut p: Vec<f64> = others.row_iter().map(|o| dot(row, o)).collect();
    let value = log_sum_exp(&p) - p[target];
    softmax_in_place(&mut p);
    for (l, &pl) in p.iter().enumerate() {
        let coef = scale * (pl - if l == target { 1.0 } else { 0.0 });
        for (g, o) in g_row.iter_mut().zip(others.row(l)) {
            *g += coef * o;
        }
        for (g, r) in g_others.row_mut(l).iter_mut().zip(row) {
            *g += coef * r;
        }
    }
    scale * value
}

/// Symmetric contrastive loss between tracklet and prompt tokens, with the
/// gradients for both token matrices.
pub fn alignment_loss_grad(trk: &Matrix, prm: &Matrix, pos: &PositivePairs) -> Result<(f64, Matrix, Matrix)> {
    check_width(trk, prm, "alignment_loss")?;
    if pos.is_empty() {
        return Err(Error::Supervision("alignment loss needs positive pairs on both sides".into()));
    }
    check_pairs(&pos.prompt_positive, (trk.rows(), "tracklet tokens"), (prm.rows(), "prompt tokens"))?;
    check_pairs(&pos.object_positive, (prm.rows(), "prompt tokens"), (trk.rows(), "tracklet tokens"))?;
    let mut g_trk = Matrix::zeros(trk.rows(), trk.cols());
    let mut g_prm = Matrix::zeros(prm.rows(), prm.cols());
    let mut loss = 0.0;
    let s1 = 1.0 / pos.prompt_positive.len() as f64;
    for &(j, k) in &pos.prompt_positive {
        let mut g_row = vec![0.0; trk.cols()];
        loss += log_softmax_term(trk.row(j), prm, k, s1, &mut g_row, &mut g_prm);
        for (g, v) in g_trk.row_mut(j).iter_mut().zip(g_row) {
            *g += v;
        }
    }
    let s2 = 1.0 / pos.object_positive.len() as f64;
    for &(k, j) in &pos.object_positive {
        let mut g_row = vec![0.0; prm.cols()];
        loss += log_softmax_term(prm.row(k), trk, j, s2, &mut g_row, &mut g_trk);
        for (g, v) in g_prm.row_mut(k).iter_mut().zip(g_row) {
            *g += v;
        }
    }
    Ok((loss, g_trk, g_prm))
}

pub fn alignment_loss(trk: &Matrix, prm: &Matrix, pos: &PositivePairs) -> Result<f64> {
    Ok(alignment_loss_grad(trk, prm, pos)?.0)
}

/// One-sided log-softmax loss: for tracklet `j` assigned to image token
/// `i`, the logit `trk_j · img_i` competes with every other tracklet's
/// logit against the same image token. Unassigned tracklets add no term
/// but still sit in the denominators.
pub fn objectness_loss_grad(trk: &Matrix, img: &Matrix, assignment: &[Option<usize>]) -> Result<(f64, Matrix, Matrix)> {
    check_width(trk, img, "objectness_loss")?;
    if assignment.len() != trk.rows() {
        return Err(shape_err(
            "objectness_loss",
            format!("{} assignments for {} tracklets", assignment.len(), trk.rows()),
        ));
    }
    let mut g_trk = Matrix::zeros(trk.rows(), trk.cols());
    let mut g_img = Matrix::zeros(img.rows(), img.cols());
    let mut loss = 0.0;
    for (j, a) in assignment.iter().enumerate() {
        let Some(i) = *a else { continue };
        if i >= img.rows() {
            return Err(Error::IndexOutOfRange { what: "image tokens", index: i, len: img.rows() });
        }
        let mut g_row = vec![0.0; img.cols()];
        loss += log_softmax_term(img.row(i), trk, j, 1.0, &mut g_row, &mut g_trk);
        for (g, v) in g_img.row_mut(i).iter_mut().zip(g_row) {
            *g += v;
        }
    }
    Ok((loss, g_trk, g_img))
}

pub fn objectness_loss(trk: &Matrix, img: &Matrix, assignment: &[usize]) -> Result<f64> {
    let a: Vec<Option<usize>> = assignment.iter().copied().map(Some).collect();
    Ok(objectness_loss_grad(trk, img, &a)?.0)
}

/// `1 − GIoU(pred, target)` and its gradient with respect to the
/// predicted `(cx, cy, w, h)`.
pub fn giou_loss_grad(pred: &BBox, target: &BBox) -> (f64, [f64; 4]) {
    let (px1, px2, py1, py2) = (pred.x1(), pred.x2(), pred.y1(), pred.y2());
    let (tx1, tx2, ty1, ty2) = (target.x1(), target.x2(), target.y1(), target.y2());

    let iw_raw = px2.min(tx2) - px1.max(tx1);
    let ih_raw = py2.min(ty2) - py1.max(ty1);
    let (iw, ih) = (iw_raw.max(0.0), ih_raw.max(0.0));
    let inter = iw * ih;
    let area_p = pred.w * pred.h;
    let union = area_p + target.area() - inter + AREA_EPS;
    let hw = px2.max(tx2) - px1.min(tx1);
    let hh = py2.max(ty2) - py1.min(ty1);
    let hull = hw * hh + AREA_EPS;
    let value = 1.0 - (inter / union - (hull - union) / hull);

    // giou = I/U − 1 + U/C with U = A_p + A_t − I + ε.
    let d_inter = -((union + inter) / (union * union) - 1.0 / hull);
    let d_area = -(-inter / (union * union) + 1.0 / hull);
    let d_hull = -(-union / (hull * hull));

    // Partials with respect to the pred edges.
    let (mut dx1, mut dx2, mut dy1, mut dy2) = (0.0, 0.0, 0.0, 0.0);
    if iw_raw > 0.0 && ih_raw > 0.0 {
        if px2 < tx2 {
            dx2 += d_inter * ih;
        }
        if px1 > tx1 {
            dx1 -= d_inter * ih;
        }
        if py2 < ty2 {
            dy2 += d_inter * iw;
        }
        if py1 > ty1 {
            dy1 -= d_inter * iw;
        }
    }
    if px2 > tx2 {
        dx2 += d_hull * hh;
    }
    if px1 < tx1 {
        dx1 -= d_hull * hh;
    }
    if py2 > ty2 {
        dy2 += d_hull * hw;
    }
    if py1 < ty1 {
        dy1 -= d_hull * hw;
    }
    let grad = [
        dx1 + dx2,
        dy1 + dy2,
        (dx2 - dx1) / 2.0 + d_area * pred.h,
        (dy2 - dy1) / 2.0 + d_area * pred.w,
    ];
    (value, grad)
}

/// Summed `1 − GIoU` over aligned prediction/target pairs.
pub fn giou_loss(pred: &[BBox], target: &[BBox]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err("giou_loss", "prediction and target counts differ"));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| 1.0 - giou(p, t)).sum())
}

/// `−log softmax(T)[i, j, k]` over all entries, with its gradient.
pub fn triplet_objective_grad(t: &Tensor3, pos: (usize, usize, usize)) -> Result<(f64, Vec<f64>)> {
    let (m, n, k) = t.dims();
    if pos.0 >= m || pos.1 >= n || pos.2 >= k {
        return Err(Error::IndexOutOfRange {
            what: "triplet",
            index: (pos.0 * n + pos.1) * k + pos.2,
            len: m * n * k,
        });
    }
    let target = t.get(pos.0, pos.1, pos.2);
    let value = log_sum_exp(t.data()) - target;
    let mut g = t.data().to_vec();
    softmax_in_place(&mut g);
    g[(pos.0 * n + pos.1) * k + pos.2] -= 1.0;
    Ok((value, g))
}

pub fn triplet_objective(t: &Tensor3, pos: (usize, usize, usize)) -> Result<f64> {
    Ok(triplet_objective_grad(t, pos)?.0)
}

/// Largest `|analytic − numeric| / max(1, |numeric|)` over all parameters,
/// using central differences with step `eps`.
pub fn grad_check(mut f: impl FnMut(&[f64]) -> (f64, Vec<f64>), params: &[f64], eps: f64) -> f64 {
    let (_, analytic) = f(params);
    assert_eq!(analytic.len(), params.len(), "gradient length must match parameters");
    let mut x = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + eps;
        let plus = f(&x).0;
        x[i] = orig - eps;
        let minus = f(&x).0;
        x[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    worst
}
