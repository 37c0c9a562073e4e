//! CLEAR-MOT counting, identity F1, AP at IoU 0.5 and the class-agnostic
//! variants that pool every class into one association.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::annotations::TrackRecord;
use crate::bbox::iou;
use crate::error::{Error, Result};
use crate::hungarian::{gated_max_matching, hungarian};
use crate::tensor::Matrix;

pub const IOU_THRESHOLD: f64 = 0.5;
/// Share of its lifespan a trajectory must be matched to count as mostly tracked.
pub const MOSTLY_TRACKED: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    /// Only equal labels may be associated.
    ClassAware,
    /// Labels are ignored.
    ClassAgnostic,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCounts {
    pub gt: usize,
    pub matches: usize,
    pub false_negatives: usize,
    pub false_positives: usize,
    pub id_switches: usize,
}

impl FrameCounts {
    fn add(&mut self, o: &FrameCounts) {
        self.gt += o.gt;
        self.matches += o.matches;
        self.false_negatives += o.false_negatives;
        self.false_positives += o.false_positives;
        self.id_switches += o.id_switches;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalCounts {
    /// Summed over frames.
    pub pooled: FrameCounts,
    /// Keyed by ground-truth label for misses, matches and switches and by
    /// predicted label for false positives; unlabeled records use `""`.
    pub per_class: BTreeMap<String, FrameCounts>,
}

/// One frame's associations as `(gt id, pred id)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FrameMatches {
    pub frame: usize,
    pub pairs: Vec<(u64, u64)>,
}

fn label(r: &TrackRecord) -> &str {
    r.class.as_deref().unwrap_or("")
}

fn compatible(g: &TrackRecord, p: &TrackRecord, mode: MatchMode) -> bool {
    mode == MatchMode::ClassAgnostic || g.class == p.class
}

fn validate(set: &[TrackRecord], what: &str) -> Result<()> {
    let mut seen = HashSet::new();
    for r in set {
        if !r.bbox.iter().all(|v| v.is_finite()) || r.bbox[2] < 0.0 || r.bbox[3] < 0.0 || !r.conf.is_finite() {
            return Err(Error::Schema {
                path: format!("{what}[frame {}, id {}].bbox", r.frame, r.id),
                message: "box must be finite with non-negative size".into(),
            });
        }
        if !seen.insert((r.frame, r.id)) {
            return Err(Error::Integrity(format!(
                "{what} repeats id {} in frame {}",
                r.id, r.frame
            )));
        }
    }
    Ok(())
}

fn by_frame(set: &[TrackRecord]) -> BTreeMap<usize, Vec<&TrackRecord>> {
    let mut out: BTreeMap<usize, Vec<&TrackRecord>> = BTreeMap::new();
    for r in set {
        out.entry(r.frame).or_default().push(r);
    }
    out
}

/// CLEAR-MOT association: previous correspondences are kept while their
/// IoU stays at or above `iou_thr`, the rest are matched by Hungarian on IoU.
pub fn match_frames(
    gt: &[TrackRecord],
    pred: &[TrackRecord],
    iou_thr: f64,
    mode: MatchMode,
) -> Result<(Vec<FrameMatches>, EvalCounts)> {
    validate(gt, "ground truth")?;
    validate(pred, "predictions")?;
    let g_frames = by_frame(gt);
    let p_frames = by_frame(pred);
    let frames: Vec<usize> = g_frames.keys().chain(p_frames.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let empty = Vec::new();
    let mut last: HashMap<u64, u64> = HashMap::new();
    let mut counts = EvalCounts::default();
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let gs = g_frames.get(&f).unwrap_or(&empty);
        let ps = p_frames.get(&f).unwrap_or(&empty);
        let score = |gi: usize, pi: usize| {
            if compatible(gs[gi], ps[pi], mode) {
                iou(&gs[gi].bbox(), &ps[pi].bbox())
            } else {
                f64::NEG_INFINITY
            }
        };
        let mut g_used = vec![false; gs.len()];
        let mut p_used = vec![false; ps.len()];
        let mut pairs: Vec<(usize, usize)> = Vec::new();
        for (gi, g) in gs.iter().enumerate() {
            if let Some(&pid) = last.get(&g.id) {
                if let Some(pi) = ps.iter().position(|p| p.id == pid) {
                    if !p_used[pi] && score(gi, pi) >= iou_thr {
                        g_used[gi] = true;
                        p_used[pi] = true;
                        pairs.push((gi, pi));
                    }
                }
            }
        }
        let rg: Vec<usize> = (0..gs.len()).filter(|&i| !g_used[i]).collect();
        let rp: Vec<usize> = (0..ps.len()).filter(|&i| !p_used[i]).collect();
        let mut s = Matrix::zeros(rg.len(), rp.len());
        for (a, &gi) in rg.iter().enumerate() {
            for (b, &pi) in rp.iter().enumerate() {
                s.set(a, b, score(gi, pi));
            }
        }
        let mut fc_total = FrameCounts { gt: gs.len(), ..Default::default() };
        for (a, b) in gated_max_matching(&s, iou_thr)? {
            let (gi, pi) = (rg[a], rp[b]);
            g_used[gi] = true;
            p_used[pi] = true;
            pairs.push((gi, pi));
            if let Some(&prev) = last.get(&gs[gi].id) {
                if prev != ps[pi].id {
                    fc_total.id_switches += 1;
                    counts.per_class.entry(label(gs[gi]).to_string()).or_default().id_switches += 1;
                }
            }
        }
        for &(gi, pi) in &pairs {
            last.insert(gs[gi].id, ps[pi].id);
        }
        fc_total.matches = pairs.len();
        fc_total.false_negatives = gs.len() - pairs.len();
        fc_total.false_positives = ps.len() - pairs.len();
        for (gi, g) in gs.iter().enumerate() {
            let e = counts.per_class.entry(label(g).to_string()).or_default();
            e.gt += 1;
            if g_used[gi] {
                e.matches += 1;
            } else {
                e.false_negatives += 1;
            }
        }
        for (pi, p) in ps.iter().enumerate() {
            if !p_used[pi] {
                counts.per_class.entry(label(p).to_string()).or_default().false_positives += 1;
            }
        }
        counts.pooled.add(&fc_total);
        pairs.sort_by_key(|&(gi, _)| gs[gi].id);
        out.push(FrameMatches {
            frame: f,
            pairs: pairs.iter().map(|&(gi, pi)| (gs[gi].id, ps[pi].id)).collect(),
        });
    }
    Ok((out, counts))
}

/// `1 − (FN + FP + IDS) / GT`.
pub fn mota(c: &FrameCounts) -> Result<f64> {
    if c.gt == 0 {
        return Err(Error::UndefinedMetric("MOTA with no ground-truth boxes".into()));
    }
    Ok(1.0 - (c.false_negatives + c.false_positives + c.id_switches) as f64 / c.gt as f64)
}

/// MOTA over counts from a class-agnostic association.
pub fn ca_mota(c: &EvalCounts) -> Result<f64> {
    mota(&c.pooled)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdCounts {
    pub idtp: usize,
    pub idfp: usize,
    pub idfn: usize,
}

/// Global trajectory matching maximizing frames where the paired
/// trajectories overlap at `iou_thr`.
pub fn id_counts(gt: &[TrackRecord], pred: &[TrackRecord], iou_thr: f64, mode: MatchMode) -> Result<IdCounts> {
    validate(gt, "ground truth")?;
    validate(pred, "predictions")?;
    let mut g_ids: Vec<u64> = gt.iter().map(|r| r.id).collect();
    g_ids.sort_unstable();
    g_ids.dedup();
    let mut p_ids: Vec<u64> = pred.iter().map(|r| r.id).collect();
    p_ids.sort_unstable();
    p_ids.dedup();
    let gi: HashMap<u64, usize> = g_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let pi: HashMap<u64, usize> = p_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut overlap = Matrix::zeros(g_ids.len(), p_ids.len());
    let p_frames = by_frame(pred);
    for g in gt {
        for p in p_frames.get(&g.frame).into_iter().flatten() {
            if compatible(g, p, mode) && iou(&g.bbox(), &p.bbox()) >= iou_thr {
                let (a, b) = (gi[&g.id], pi[&p.id]);
                overlap.set(a, b, overlap.get(a, b) + 1.0);
            }
        }
    }
    let idtp = if g_ids.is_empty() || p_ids.is_empty() {
        0
    } else {
        let assignment = hungarian(&overlap.map(|v| -v))?;
        assignment
            .iter()
            .enumerate()
            .filter_map(|(a, b)| b.map(|b| overlap.get(a, b)))
            .sum::<f64>() as usize
    };
    Ok(IdCounts {
        idtp,
        idfp: pred.len() - idtp,
        idfn: gt.len() - idtp,
    })
}

pub fn idf1(c: &IdCounts) -> Result<f64> {
    let denom = 2 * c.idtp + c.idfp + c.idfn;
    if denom == 0 {
        return Err(Error::UndefinedMetric("IDF1 with no boxes on either side".into()));
    }
    Ok(2.0 * c.idtp as f64 / denom as f64)
}

pub fn ca_idf1(gt: &[TrackRecord], pred: &[TrackRecord], mode: MatchMode) -> Result<f64> {
    idf1(&id_counts(gt, pred, IOU_THRESHOLD, mode)?)
}

/// Class-agnostic average precision at IoU 0.5 with all-point interpolation.
pub fn map50(gt: &[TrackRecord], pred: &[TrackRecord]) -> Result<f64> {
    if gt.is_empty() {
        return Err(Error::UndefinedMetric("AP with no ground-truth boxes".into()));
    }
    let g_frames = by_frame(gt);
    let mut used: HashMap<(usize, usize), bool> = HashMap::new();
    let mut order: Vec<&TrackRecord> = pred.iter().collect();
    order.sort_by(|a, b| b.conf.total_cmp(&a.conf));
    let mut tp = 0usize;
    let mut points = Vec::with_capacity(order.len());
    for (n, p) in order.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (i, g) in g_frames.get(&p.frame).into_iter().flatten().enumerate() {
            if used.contains_key(&(p.frame, i)) {
                continue;
            }
            let v = iou(&g.bbox(), &p.bbox());
            if v >= IOU_THRESHOLD && best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
        if let Some((i, _)) = best {
            used.insert((p.frame, i), true);
            tp += 1;
        }
        points.push((tp as f64 / gt.len() as f64, tp as f64 / (n + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let p_max = points[i..].iter().map(|x| x.1).fold(0.0, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    Ok(ap)
}

/// Ground-truth trajectories matched in at least 80% of their frames.
pub fn mostly_tracked(gt: &[TrackRecord], matches: &[FrameMatches]) -> usize {
    let mut life: HashMap<u64, usize> = HashMap::new();
    for g in gt {
        *life.entry(g.id).or_default() += 1;
    }
    let mut hit: HashMap<u64, usize> = HashMap::new();
    for f in matches {
        for &(g, _) in &f.pairs {
            *hit.entry(g).or_default() += 1;
        }
    }
    life.iter()
        .filter(|(id, &n)| hit.get(id).copied().unwrap_or(0) as f64 >= MOSTLY_TRACKED * n as f64)
        .count()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub ca_mota: f64,
    pub ca_idf1: f64,
    pub mota: f64,
    pub idf1: f64,
    pub map50: f64,
    pub mostly_tracked: usize,
    pub gt_tracks: usize,
    pub id_switches: usize,
    pub agnostic: FrameCounts,
    pub aware: FrameCounts,
}

pub fn summary(gt: &[TrackRecord], pred: &[TrackRecord]) -> Result<Summary> {
    let (agn_matches, agn) = match_frames(gt, pred, IOU_THRESHOLD, MatchMode::ClassAgnostic)?;
    let (_, aware) = match_frames(gt, pred, IOU_THRESHOLD, MatchMode::ClassAware)?;
    let gt_tracks = gt.iter().map(|r| r.id).collect::<HashSet<_>>().len();
    Ok(Summary {
        ca_mota: ca_mota(&agn)?,
        ca_idf1: ca_idf1(gt, pred, MatchMode::ClassAgnostic)?,
        mota: mota(&aware.pooled)?,
        idf1: ca_idf1(gt, pred, MatchMode::ClassAware)?,
        map50: map50(gt, pred)?,
        mostly_tracked: mostly_tracked(gt, &agn_matches),
        gt_tracks,
        id_switches: agn.pooled.id_switches,
        agnostic: agn.pooled,
        aware: aware.pooled,
    })
}

impl Summary {
    pub fn csv(&self) -> String {
        format!(
            "ca_mota,ca_idf1,mota,idf1,map50,mt,gt_tracks,ids\n{},{},{},{},{},{},{},{}\n",
            self.ca_mota,
            self.ca_idf1,
            self.mota,
            self.idf1,
            self.map50,
            self.mostly_tracked,
            self.gt_tracks,
            self.id_switches
        )
    }
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10}{:>10}", "CA-MOTA", format!("{:.4}", self.ca_mota))?;
        writeln!(f, "{:<10}{:>10}", "CA-IDF1", format!("{:.4}", self.ca_idf1))?;
        writeln!(f, "{:<10}{:>10}", "MOTA", format!("{:.4}", self.mota))?;
        writeln!(f, "{:<10}{:>10}", "IDF1", format!("{:.4}", self.idf1))?;
        writeln!(f, "{:<10}{:>10}", "mAP50", format!("{:.4}", self.map50))?;
        writeln!(f, "{:<10}{:>10}", "MT", format!("{}/{}", self.mostly_tracked, self.gt_tracks))?;
        write!(f, "{:<10}{:>10}", "IDs", self.id_switches)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(frame: usize, id: u64, x: f64, class: &str) -> TrackRecord {
        TrackRecord {
            frame,
            id,
            bbox: [x, 0.5, 0.1, 0.1],
            conf: 1.0,
            class: Some(class.to_string()),
        }
    }

    #[test]
    fn formula() {
        let c = FrameCounts {
            gt: 20,
            matches: 18,
            false_negatives: 2,
            false_positives: 1,
            id_switches: 1,
        };
        assert!((mota(&c).unwrap() - 0.8).abs() < 1e-15);
        assert!(mota(&FrameCounts::default()).is_err());
    }

    #[test]
    fn perfect_and_shifted_ids() {
        let gt: Vec<_> = (0..5).flat_map(|f| [rec(f, 1, 0.2, "a"), rec(f, 2, 0.7, "b")]).collect();
        let (_, c) = match_frames(&gt, &gt, 0.5, MatchMode::ClassAgnostic).unwrap();
        assert_eq!((c.pooled.false_negatives, c.pooled.false_positives, c.pooled.id_switches), (0, 0, 0));
        let shifted: Vec<_> = gt.iter().map(|r| TrackRecord { id: r.id + 100, ..r.clone() }).collect();
        let (_, c) = match_frames(&gt, &shifted, 0.5, MatchMode::ClassAgnostic).unwrap();
        assert_eq!(c.pooled.id_switches, 0);
    }

    #[test]
    fn swap_counts_two_switches() {
        let gt: Vec<_> = (0..3).flat_map(|f| [rec(f, 1, 0.2, "a"), rec(f, 2, 0.7, "a")]).collect();
        let pred = vec![
            rec(0, 1, 0.2, "a"),
            rec(0, 2, 0.7, "a"),
            rec(1, 2, 0.2, "a"),
            rec(1, 1, 0.7, "a"),
            rec(2, 2, 0.2, "a"),
            rec(2, 1, 0.7, "a"),
        ];
        let (_, c) = match_frames(&gt, &pred, 0.5, MatchMode::ClassAgnostic).unwrap();
        assert_eq!(c.pooled.id_switches, 2);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let gt = vec![rec(0, 1, 0.2, "a"), rec(0, 1, 0.5, "a")];
        assert!(matches!(match_frames(&gt, &[], 0.5, MatchMode::ClassAware), Err(Error::Integrity(_))));
    }

    #[test]
    fn ap_fixtures() {
        let gt = vec![rec(0, 1, 0.5, "a")];
        let mut tp = rec(0, 1, 0.5, "a");
        let mut fp = rec(0, 2, 0.1, "a");
        tp.conf = 0.9;
        fp.conf = 0.8;
        assert_eq!(map50(&gt, &[tp.clone(), fp.clone()]).unwrap(), 1.0);
        tp.conf = 0.7;
        assert_eq!(map50(&gt, &[tp, fp]).unwrap(), 0.5);
        assert_eq!(map50(&gt, &[]).unwrap(), 0.0);
    }

    #[test]
    fn idf1_extremes() {
        let gt: Vec<_> = (0..4).map(|f| rec(f, 1, 0.2, "a")).collect();
        assert_eq!(ca_idf1(&gt, &gt, MatchMode::ClassAgnostic).unwrap(), 1.0);
        let spurious: Vec<_> = (0..4).map(|f| rec(f, 9, 0.8, "a")).collect();
        assert_eq!(ca_idf1(&gt, &spurious, MatchMode::ClassAgnostic).unwrap(), 0.0);
        assert!(ca_idf1(&[], &[], MatchMode::ClassAgnostic).is_err());
    }

    #[test]
    fn empty_predictions() {
        let gt: Vec<_> = (0..4).map(|f| rec(f, 1, 0.2, "a")).collect();
        let s = summary(&gt, &[]).unwrap();
        assert_eq!((s.ca_mota, s.ca_idf1, s.mostly_tracked), (0.0, 0.0, 0));
        let s = summary(&gt, &gt).unwrap();
        assert_eq!((s.ca_mota, s.ca_idf1, s.map50, s.mostly_tracked), (1.0, 1.0, 1.0, 1));
    }
}
