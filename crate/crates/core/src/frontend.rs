//! First-stage detector outputs: validation, filtering, pair enumeration
//! and the raw instance-prior matrix.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::geometry::{BBox, ImageSize};
use crate::linalg::{norm, Matrix};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub label: u32,
}

impl Detection {
    /// Checks the box, `0 <= score <= 1` and `label < num_labels`.
    pub fn validated(bbox: BBox, score: f64, label: u32, num_labels: usize) -> Result<Self> {
        bbox.validate()?;
        if !(0.0..=1.0).contains(&score) {
            bail!(InvalidInput, "detection score {score} outside [0, 1]");
        }
        if label as usize >= num_labels {
            bail!(InvalidInput, "label {label} outside inventory of {num_labels} classes");
        }
        Ok(Self { bbox, score, label })
    }
}

/// One annotated interaction: indices into the image's box list plus a verb.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HoiAnnotation {
    pub human: usize,
    pub object: usize,
    pub verb: usize,
}

/// Ground-truth record of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotatedImage {
    pub image_id: String,
    pub size: ImageSize,
    pub boxes: Vec<BBox>,
    pub labels: Vec<u32>,
    pub hoi: Vec<HoiAnnotation>,
}

impl AnnotatedImage {
    pub fn validate(&self, num_labels: usize, num_verbs: usize) -> Result<()> {
        if self.boxes.len() != self.labels.len() {
            bail!(Validation, "{}: {} boxes but {} labels", self.image_id, self.boxes.len(), self.labels.len());
        }
        for b in &self.boxes {
            b.validate()?;
        }
        if let Some(l) = self.labels.iter().find(|&&l| l as usize >= num_labels) {
            bail!(Validation, "{}: label {l} outside inventory", self.image_id);
        }
        for h in &self.hoi {
            if h.human >= self.boxes.len() || h.object >= self.boxes.len() || h.verb >= num_verbs {
                bail!(Validation, "{}: interaction {:?} out of range", self.image_id, h);
            }
        }
        Ok(())
    }
}

/// Per-image detection filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterConfig {
    pub person_threshold: f64,
    pub object_threshold: f64,
    pub max_per_image: usize,
    pub person_label: u32,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { person_threshold: 0.2, object_threshold: 0.2, max_per_image: 15, person_label: 0 }
    }
}

/// Keeps detections at or above their role's threshold, then the top
/// `max_per_image` by score. Ties keep input order.
pub fn filter_detections(dets: &[Detection], cfg: &FilterConfig) -> Vec<Detection> {
    let mut kept: Vec<Detection> = dets
        .iter()
        .filter(|d| {
            let thr = if d.label == cfg.person_label { cfg.person_threshold } else { cfg.object_threshold };
            d.score >= thr
        })
        .copied()
        .collect();
    kept.sort_by(|a, b| b.score.total_cmp(&a.score));
    kept.truncate(cfg.max_per_image);
    kept
}

/// Ordered human-object pair over a detection list.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HumanObjectPair {
    pub human_idx: usize,
    pub object_idx: usize,
    pub human: Detection,
    pub object: Detection,
    pub union: BBox,
}

/// Every `(h, o)` with `h` a person and `o != h`; people pair with people too.
pub fn enumerate_pairs(dets: &[Detection], person_label: u32) -> Vec<HumanObjectPair> {
    let mut pairs = Vec::new();
    for (hi, h) in dets.iter().enumerate().filter(|(_, d)| d.label == person_label) {
        for (oi, o) in dets.iter().enumerate() {
            if oi == hi {
                continue;
            }
            pairs.push(HumanObjectPair { human_idx: hi, object_idx: oi, human: *h, object: *o, union: h.bbox.union(&o.bbox) });
        }
    }
    pairs
}

/// `N_ins × (4 + 1 + d_e)` rows of `[normalized box, score, class embedding]`.
#[derive(Clone, Debug, PartialEq)]
pub struct InstancePriorInput {
    pub rows: Matrix,
}

impl InstancePriorInput {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.rows() == 0
    }
}

/// Builds the instance-prior operand; `embeddings` row `l` is the unit
/// semantic embedding of class `l`.
pub fn assemble_instance_prior(dets: &[Detection], embeddings: &Matrix, img: ImageSize) -> Result<InstancePriorInput> {
    let de = embeddings.cols();
    let mut rows = Matrix::zeros(dets.len(), 5 + de);
    for (i, d) in dets.iter().enumerate() {
        let l = d.label as usize;
        if l >= embeddings.rows() {
            bail!(Config, "no semantic embedding for class {l}");
        }
        let row = rows.row_mut(i);
        row[..4].copy_from_slice(&d.bbox.normalized(img));
        row[4] = d.score;
        row[5..].copy_from_slice(embeddings.row(l));
    }
    Ok(InstancePriorInput { rows })
}

/// Row-normalizes a class-embedding table in place.
pub fn normalize_embeddings(table: &mut Matrix) {
    for r in 0..table.rows() {
        let n = norm(table.row(r));
        if n > 0.0 {
            for v in table.row_mut(r) {
                *v /= n;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(x: f64, score: f64, label: u32) -> Detection {
        Detection { bbox: BBox::new(x, 0.0, x + 5.0, 5.0).unwrap(), score, label }
    }

    #[test]
    fn validation_rejects_out_of_range() {
        let b = BBox::new(0., 0., 1., 1.).unwrap();
        assert!(Detection::validated(b, 1.3, 0, 2).is_err());
        assert!(Detection::validated(b, 0.5, 2, 2).is_err());
        assert!(Detection::validated(b, 0.5, 1, 2).is_ok());
    }

    #[test]
    fn filter_examples() {
        let cfg = FilterConfig { person_threshold: 0.45, object_threshold: 0.45, max_per_image: 2, person_label: 0 };
        let dets = [det(0., 0.9, 1), det(1., 0.5, 1), det(2., 0.4, 1)];
        let kept = filter_detections(&dets, &cfg);
        assert_eq!(kept, vec![dets[0], dets[1]]);

        let strict = FilterConfig { person_threshold: 0.95, object_threshold: 0.95, ..cfg };
        assert!(filter_detections(&dets, &strict).is_empty());

        let open = FilterConfig { person_threshold: 0.0, object_threshold: 0.0, max_per_image: 10, person_label: 0 };
        assert_eq!(filter_detections(&dets, &open), dets.to_vec());
    }

    #[test]
    fn pair_counts() {
        let objects = [det(0., 0.9, 1), det(1., 0.9, 2), det(2., 0.9, 3)];
        assert!(enumerate_pairs(&objects, 0).is_empty());

        let one_human = [det(0., 0.9, 0), det(1., 0.9, 1), det(2., 0.9, 2)];
        assert_eq!(enumerate_pairs(&one_human, 0).len(), 2);

        let two_humans = [det(0., 0.9, 0), det(1., 0.9, 0), det(2., 0.9, 5)];
        let pairs = enumerate_pairs(&two_humans, 0);
        let idx: Vec<_> = pairs.iter().map(|p| (p.human_idx, p.object_idx)).collect();
        assert_eq!(idx, vec![(0, 1), (0, 2), (1, 0), (1, 2)]);
    }

    #[test]
    fn instance_prior_rows() {
        let img = ImageSize::new(40, 20).unwrap();
        let mut emb = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]]);
        normalize_embeddings(&mut emb);
        let empty = assemble_instance_prior(&[], &emb, img).unwrap();
        assert_eq!(empty.rows.shape(), (0, 9));

        let full = Detection { bbox: BBox::new(0., 0., 40., 20.).unwrap(), score: 1.0, label: 1 };
        let p = assemble_instance_prior(&[full], &emb, img).unwrap();
        assert_eq!(p.rows.shape(), (1, 9));
        assert_eq!(&p.rows.row(0)[..5], &[0.0, 0.0, 1.0, 1.0, 1.0]);
        assert_eq!(&p.rows.row(0)[5..], emb.row(1));

        let missing = Detection { label: 7, ..full };
        assert!(assemble_instance_prior(&[missing], &emb, img).is_err());
    }

    proptest! {
        #[test]
        fn filter_is_idempotent(
            scores in prop::collection::vec((0.0..1.0f64, 0u32..4), 0..30),
            thr in 0.0..1.0f64,
            k in 0usize..20,
        ) {
            let dets: Vec<_> = scores.iter().enumerate().map(|(i, &(s, l))| det(i as f64, s, l)).collect();
            let cfg = FilterConfig { person_threshold: thr, object_threshold: thr * 0.5, max_per_image: k, person_label: 0 };
            let once = filter_detections(&dets, &cfg);
            prop_assert_eq!(filter_detections(&once, &cfg), once);
        }

        #[test]
        fn pairs_cover_all_partners_with_union_boxes(
            labels in prop::collection::vec(0u32..3, 0..12),
        ) {
            let dets: Vec<_> = labels.iter().enumerate().map(|(i, &l)| det(i as f64 * 3.0, 0.5, l)).collect();
            let humans = labels.iter().filter(|&&l| l == 0).count();
            let pairs = enumerate_pairs(&dets, 0);
            prop_assert_eq!(pairs.len(), humans * dets.len().saturating_sub(1));
            for p in &pairs {
                prop_assert_eq!(p.union, crate::geometry::union_box(&p.human.bbox, &p.object.bbox).unwrap());
                prop_assert!(p.human_idx != p.object_idx);
            }
        }
    }
}
