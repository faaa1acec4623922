//! Interaction mAP: greedy matching, all-point AP and seen/unseen/full
//! aggregation.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::error::{bail, Result};
use crate::frontend::AnnotatedImage;
use crate::geometry::BBox;
use crate::zeroshot::{HoiInventory, ZeroShotSplit};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub image_id: String,
    pub human: BBox,
    pub object: BBox,
    pub composition: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub human: BBox,
    pub object: BBox,
    pub composition: usize,
}

/// Ground-truth interactions of annotated images; annotations of unknown
/// compositions are rejected.
pub fn ground_truth_from_annotations(images: &[AnnotatedImage], inv: &HoiInventory) -> Result<Vec<GroundTruth>> {
    let table = inv.lookup_table();
    let mut out = Vec::new();
    for img in images {
        for h in &img.hoi {
            let (Some(&human), Some(&object), Some(&label)) = (img.boxes.get(h.human), img.boxes.get(h.object), img.labels.get(h.object))
            else {
                bail!(Validation, "{}: interaction {:?} out of range", img.image_id, h);
            };
            let Some(composition) = table.get(h.verb).and_then(|r| r.get(label as usize).copied().flatten()) else {
                bail!(Validation, "{}: unknown composition (verb {}, object {label})", img.image_id, h.verb);
            };
            out.push(GroundTruth { image_id: img.image_id.clone(), human, object, composition });
        }
    }
    Ok(out)
}

/// Descending score, then a content-based order so that results do not
/// depend on input order.
fn rank_cmp(a: &Prediction, b: &Prediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.image_id.cmp(&b.image_id))
        .then_with(|| a.composition.cmp(&b.composition))
        .then_with(|| cmp_box(&a.human, &b.human))
        .then_with(|| cmp_box(&a.object, &b.object))
}

fn cmp_box(a: &BBox, b: &BBox) -> Ordering {
    a.to_array().iter().zip(b.to_array().iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

/// Matching outcome of one composition.
#[derive(Clone, Debug, PartialEq)]
pub struct CompositionMatch {
    /// TP flags in ranked order.
    pub flags: Vec<bool>,
    /// Scores in ranked order.
    pub scores: Vec<f64>,
    /// Ground-truth index (into the input slice) matched by each prediction.
    pub matched: Vec<Option<usize>>,
    pub n_gt: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct MatchResult {
    pub per_composition: BTreeMap<usize, CompositionMatch>,
}

/// Greedy matching per composition in descending score. A prediction is a
/// true positive when an unmatched ground truth of its image and
/// composition overlaps both boxes with IoU above `iou_thresh`; among
/// several candidates the largest min-IoU wins.
pub fn match_predictions(preds: &[Prediction], gts: &[GroundTruth], iou_thresh: f64) -> MatchResult {
    let mut gt_by_key: BTreeMap<(usize, &str), Vec<usize>> = BTreeMap::new();
    let mut result = MatchResult::default();
    for (i, g) in gts.iter().enumerate() {
        gt_by_key.entry((g.composition, g.image_id.as_str())).or_default().push(i);
        result
            .per_composition
            .entry(g.composition)
            .or_insert_with(|| CompositionMatch { flags: Vec::new(), scores: Vec::new(), matched: Vec::new(), n_gt: 0 })
            .n_gt += 1;
    }
    let mut ranked: Vec<&Prediction> = preds.iter().collect();
    ranked.sort_by(|a, b| rank_cmp(a, b));
    let mut used = alloc::vec![false; gts.len()];
    for p in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(cands) = gt_by_key.get(&(p.composition, p.image_id.as_str())) {
            for &gi in cands {
                if used[gi] {
                    continue;
                }
                let g = &gts[gi];
                let ov = p.human.iou(&g.human).min(p.object.iou(&g.object));
                if ov > iou_thresh && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((gi, ov));
                }
            }
        }
        if let Some((gi, _)) = best {
            used[gi] = true;
        }
        let entry = result.per_composition.entry(p.composition).or_insert_with(|| CompositionMatch {
            flags: Vec::new(),
            scores: Vec::new(),
            matched: Vec::new(),
            n_gt: 0,
        });
        entry.flags.push(best.is_some());
        entry.scores.push(p.score);
        entry.matched.push(best.map(|(gi, _)| gi));
    }
    result
}

/// Precision/recall points after each ranked prediction.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> Vec<(f64, f64)> {
    let mut tp = 0usize;
    flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            (tp as f64 / n_gt.max(1) as f64, tp as f64 / (i + 1) as f64)
        })
        .collect()
}

/// All-point interpolated AP; `None` when there is no ground truth.
pub fn average_precision(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let curve = pr_curve(flags, n_gt);
    let mut recall = Vec::with_capacity(curve.len() + 2);
    let mut precision = Vec::with_capacity(curve.len() + 2);
    recall.push(0.0);
    precision.push(0.0);
    for &(r, p) in &curve {
        recall.push(r);
        precision.push(p);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..recall.len() - 1 {
        if recall[i + 1] != recall[i] {
            ap += (recall[i + 1] - recall[i]) * precision[i + 1];
        }
    }
    Some(ap)
}

/// `2su/(s+u)`, zero when both are zero.
pub fn harmonic_mean(seen: f64, unseen: f64) -> f64 {
    if seen + unseen == 0.0 {
        0.0
    } else {
        2.0 * seen * unseen / (seen + unseen)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    /// Compositions left out of every mAP (e.g. no-interaction).
    pub excluded: BTreeSet<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_threshold: DEFAULT_IOU_THRESHOLD, excluded: BTreeSet::new() }
    }
}

impl EvalConfig {
    /// Excludes every no-interaction composition of `inv`.
    pub fn excluding_no_interaction(inv: &HoiInventory) -> Self {
        let excluded = inv.compositions.iter().filter(|c| Some(c.verb) == inv.no_interaction).map(|c| c.id).collect();
        Self { excluded, ..Self::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// AP per composition id; `None` when absent from evaluation.
    pub per_class: Vec<Option<f64>>,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_full: Option<f64>,
    /// Present when both seen and unseen mAPs are.
    pub hm: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], split: &ZeroShotSplit, cfg: &EvalConfig) -> Result<Metrics> {
    let num = split.seen.len() + split.unseen.len();
    if let Some(c) = preds.iter().map(|p| p.composition).chain(gts.iter().map(|g| g.composition)).find(|&c| c >= num) {
        bail!(Validation, "composition {c} is not covered by the split");
    }
    if let Some(p) = preds.iter().find(|p| !p.score.is_finite()) {
        bail!(Validation, "{}: non-finite prediction score", p.image_id);
    }
    let matches = match_predictions(preds, gts, cfg.iou_threshold);
    let mut per_class = alloc::vec![None; num];
    for (&c, m) in &matches.per_composition {
        if !cfg.excluded.contains(&c) {
            per_class[c] = average_precision(&m.flags, m.n_gt);
        }
    }
    let group = |keep: &dyn Fn(usize) -> bool| mean((0..num).filter(|&c| keep(c)).filter_map(|c| per_class[c]));
    let map_seen = group(&|c| split.seen.contains(&c));
    let map_unseen = group(&|c| split.unseen.contains(&c));
    let map_full = group(&|_| true);
    let hm = match (map_seen, map_unseen) {
        (Some(s), Some(u)) => Some(harmonic_mean(s, u)),
        _ => None,
    };
    Ok(Metrics { per_class, map_unseen, map_seen, map_full, hm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zeroshot::ZeroShotSetting;
    use proptest::prelude::*;

    fn bx(x: f64, y: f64, w: f64, h: f64) -> BBox {
        BBox::new(x, y, x + w, y + h).unwrap()
    }

    fn pred(img: &str, h: BBox, o: BBox, c: usize, s: f64) -> Prediction {
        Prediction { image_id: img.into(), human: h, object: o, composition: c, score: s }
    }

    fn gt(img: &str, h: BBox, o: BBox, c: usize) -> GroundTruth {
        GroundTruth { image_id: img.into(), human: h, object: o, composition: c }
    }

    fn split(n: usize, unseen: &[usize]) -> ZeroShotSplit {
        let unseen: BTreeSet<usize> = unseen.iter().copied().collect();
        ZeroShotSplit { setting: ZeroShotSetting::Uc, seed: 0, seen: (0..n).filter(|c| !unseen.contains(c)).collect(), unseen }
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[true], 1), Some(1.0));
        assert_eq!(average_precision(&[false, true], 1), Some(0.5));
        assert_eq!(average_precision(&[], 2), Some(0.0));
        assert_eq!(average_precision(&[true], 0), None);
        // recall 1/2 at precision 1, then 2/2 at precision 2/3
        let ap = average_precision(&[true, false, true], 2).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn single_match_rule() {
        let (h, o) = (bx(0., 0., 10., 10.), bx(20., 0., 10., 10.));
        let g = [gt("a", h, o, 0)];
        let m = match_predictions(&[pred("a", h, o, 0, 0.9)], &g, 0.5);
        assert_eq!(m.per_composition[&0].flags, vec![true]);
        let m = match_predictions(&[pred("a", h, o, 0, 0.4), pred("a", h, o, 0, 0.9)], &g, 0.5);
        assert_eq!(m.per_composition[&0].flags, vec![true, false]);
        assert_eq!(m.per_composition[&0].scores, vec![0.9, 0.4]);
        // wrong image or composition never matches
        let m = match_predictions(&[pred("b", h, o, 0, 0.9), pred("a", h, o, 1, 0.9)], &g, 0.5);
        assert_eq!(m.per_composition[&0].flags, vec![false]);
        assert_eq!(m.per_composition[&1].n_gt, 0);
    }

    #[test]
    fn tie_goes_to_larger_min_iou() {
        let h = bx(0., 0., 10., 10.);
        let near = bx(20., 0., 10., 10.);
        let far = bx(21., 0., 10., 10.);
        let g = [gt("a", h, far, 0), gt("a", h, near, 0)];
        let m = match_predictions(&[pred("a", h, near, 0, 0.9)], &g, 0.5);
        assert_eq!(m.per_composition[&0].matched, vec![Some(1)]);
    }

    #[test]
    fn both_boxes_must_overlap() {
        let (h, o) = (bx(0., 0., 10., 10.), bx(20., 0., 10., 10.));
        let g = [gt("a", h, o, 0)];
        let m = match_predictions(&[pred("a", h, bx(26., 0., 10., 10.), 0, 0.9)], &g, 0.5);
        assert_eq!(m.per_composition[&0].flags, vec![false]);
    }

    #[test]
    fn hm_values() {
        assert!((harmonic_mean(32.75, 26.23) - 29.13).abs() < 0.01);
        assert_eq!(harmonic_mean(0.0, 0.0), 0.0);
        assert!((harmonic_mean(0.4, 0.4) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_saturate() {
        let (h, o) = (bx(0., 0., 10., 10.), bx(20., 0., 10., 10.));
        let gts: Vec<_> = (0..4).map(|c| gt("a", h, o, c)).collect();
        let preds: Vec<_> = (0..4).map(|c| pred("a", h, o, c, 0.5)).collect();
        let m = evaluate(&preds, &gts, &split(5, &[1, 3]), &EvalConfig::default()).unwrap();
        assert_eq!((m.map_seen, m.map_unseen, m.map_full, m.hm), (Some(1.0), Some(1.0), Some(1.0), Some(1.0)));
        assert_eq!(m.per_class[4], None);
    }

    #[test]
    fn absent_groups_and_exclusions() {
        let (h, o) = (bx(0., 0., 10., 10.), bx(20., 0., 10., 10.));
        let gts = [gt("a", h, o, 0), gt("a", h, o, 1)];
        let preds = [pred("a", h, o, 0, 0.9)];
        let m = evaluate(&preds, &gts, &split(3, &[2]), &EvalConfig::default()).unwrap();
        assert_eq!(m.map_unseen, None);
        assert_eq!(m.hm, None);
        assert_eq!(m.map_seen, Some(0.5));
        let cfg = EvalConfig { excluded: [1].into_iter().collect(), ..EvalConfig::default() };
        let m = evaluate(&preds, &gts, &split(3, &[2]), &cfg).unwrap();
        assert_eq!(m.map_seen, Some(1.0));
        assert!(evaluate(&[pred("a", h, o, 7, 0.1)], &gts, &split(3, &[]), &cfg).is_err());
    }

    fn micro() -> impl Strategy<Value = (Vec<Prediction>, Vec<GroundTruth>)> {
        let b = (0u8..4, 0u8..4).prop_map(|(x, y)| bx(x as f64 * 3.0, y as f64 * 3.0, 8.0, 8.0));
        let g = ("[ab]", b.clone(), b.clone(), 0usize..3).prop_map(|(i, h, o, c)| gt(&i, h, o, c));
        let p = ("[ab]", b.clone(), b, 0usize..3, 0u8..6).prop_map(|(i, h, o, c, s)| pred(&i, h, o, c, s as f64 / 5.0));
        (prop::collection::vec(p, 0..10), prop::collection::vec(g, 0..6))
    }

    proptest! {
        #[test]
        fn order_invariant((preds, gts) in micro(), rot in 0usize..10) {
            let s = split(3, &[1]);
            let a = evaluate(&preds, &gts, &s, &EvalConfig::default()).unwrap();
            let mut shuffled = preds.clone();
            shuffled.reverse();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
            }
            prop_assert_eq!(a, evaluate(&shuffled, &gts, &s, &EvalConfig::default()).unwrap());
        }

        #[test]
        fn lower_scored_fp_never_raises_ap((preds, gts) in micro(), c in 0usize..3) {
            let s = split(3, &[]);
            let before = evaluate(&preds, &gts, &s, &EvalConfig::default()).unwrap();
            let mut more = preds.clone();
            let far = bx(100., 100., 5., 5.);
            more.push(pred("a", far, far, c, -1.0));
            let after = evaluate(&more, &gts, &s, &EvalConfig::default()).unwrap();
            for (x, y) in before.per_class.iter().zip(&after.per_class) {
                if let (Some(x), Some(y)) = (x, y) {
                    prop_assert!(y <= x);
                }
            }
        }

        #[test]
        fn metrics_in_unit_interval((preds, gts) in micro()) {
            let m = evaluate(&preds, &gts, &split(3, &[0]), &EvalConfig::default()).unwrap();
            for v in m.per_class.iter().flatten().chain([m.map_seen, m.map_unseen, m.map_full, m.hm].iter().flatten()) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }
    }
}
