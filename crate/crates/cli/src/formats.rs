//! JSON and JSONL artifact schemas and their conversions to core types.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use cmmp_core::eval::{GroundTruth, Metrics, Prediction};
use cmmp_core::frontend::{AnnotatedImage, Detection, HoiAnnotation};
use cmmp_core::geometry::{BBox, GlobalSpatialPatterns, ImageSize, FEATURE_LAYOUT_VERSION, SPATIAL_DIM};
use cmmp_core::linalg::Matrix;
use cmmp_core::zeroshot::{HoiInventory, ZeroShotSplit};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{validation, CliError, Result};

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| validation!("{}:{}: {e}", path.display(), n + 1))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).expect("records serialize");
        buf.push(b'\n');
    }
    write_bytes(path, &buf)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| validation!("{}: {e}", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut buf = serde_json::to_vec_pretty(value).expect("value serializes");
    buf.push(b'\n');
    write_bytes(path, &buf)
}

/// Writes through a sibling temporary file so readers never see a partial
/// artifact.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = path.with_extension("partial");
    let mut f = std::fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

fn bbox(a: [f64; 4], what: &str) -> Result<BBox> {
    BBox::from_array(a).map_err(|e| validation!("{what}: {e}"))
}

fn size(image_id: &str, width: u32, height: u32) -> Result<ImageSize> {
    ImageSize::new(width, height).map_err(|e| validation!("{image_id}: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionEntry {
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectionRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub detections: Vec<DetectionEntry>,
}

impl DetectionRecord {
    pub fn new(image_id: &str, size: ImageSize, dets: &[Detection]) -> Self {
        Self {
            image_id: image_id.to_string(),
            width: size.width,
            height: size.height,
            detections: dets.iter().map(|d| DetectionEntry { bbox: d.bbox.to_array(), score: d.score, label: d.label }).collect(),
        }
    }

    pub fn to_core(&self, num_labels: usize) -> Result<Vec<Detection>> {
        size(&self.image_id, self.width, self.height)?;
        self.detections
            .iter()
            .map(|d| {
                let b = bbox(d.bbox, &self.image_id)?;
                Detection::validated(b, d.score, d.label, num_labels).map_err(|e| validation!("{}: {e}", self.image_id))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HoiEntry {
    pub human_idx: usize,
    pub object_idx: usize,
    pub verb: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<[f64; 4]>,
    pub labels: Vec<u32>,
    pub hoi: Vec<HoiEntry>,
}

impl AnnotationRecord {
    pub fn new(a: &AnnotatedImage) -> Self {
        Self {
            image_id: a.image_id.clone(),
            width: a.size.width,
            height: a.size.height,
            boxes: a.boxes.iter().map(|b| b.to_array()).collect(),
            labels: a.labels.clone(),
            hoi: a.hoi.iter().map(|h| HoiEntry { human_idx: h.human, object_idx: h.object, verb: h.verb }).collect(),
        }
    }

    pub fn to_core(&self, inv: &HoiInventory) -> Result<AnnotatedImage> {
        let a = AnnotatedImage {
            image_id: self.image_id.clone(),
            size: size(&self.image_id, self.width, self.height)?,
            boxes: self.boxes.iter().map(|&b| bbox(b, &self.image_id)).collect::<Result<_>>()?,
            labels: self.labels.clone(),
            hoi: self.hoi.iter().map(|h| HoiAnnotation { human: h.human_idx, object: h.object_idx, verb: h.verb }).collect(),
        };
        a.validate(inv.num_objects(), inv.num_verbs()).map_err(|e| validation!("{}: {e}", self.image_id))?;
        Ok(a)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    pub human_bbox: [f64; 4],
    pub object_bbox: [f64; 4],
    pub object: usize,
    pub verb: usize,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image_id: String,
    pub predictions: Vec<PredictionEntry>,
}

impl PredictionRecord {
    /// Groups `preds` (all for `image_id`) into one record.
    pub fn new(image_id: &str, preds: &[Prediction], inv: &HoiInventory) -> Self {
        let predictions = preds
            .iter()
            .map(|p| {
                let c = &inv.compositions[p.composition];
                PredictionEntry {
                    human_bbox: p.human.to_array(),
                    object_bbox: p.object.to_array(),
                    object: c.object,
                    verb: c.verb,
                    score: p.score,
                }
            })
            .collect();
        Self { image_id: image_id.to_string(), predictions }
    }

    pub fn to_core(&self, inv: &HoiInventory) -> Result<Vec<Prediction>> {
        self.predictions
            .iter()
            .map(|p| {
                let composition = inv
                    .composition_id(p.verb, p.object)
                    .ok_or_else(|| validation!("{}: ({}, {}) is not a composition", self.image_id, p.verb, p.object))?;
                Ok(Prediction {
                    image_id: self.image_id.clone(),
                    human: bbox(p.human_bbox, &self.image_id)?,
                    object: bbox(p.object_bbox, &self.image_id)?,
                    composition,
                    score: p.score,
                })
            })
            .collect()
    }
}

/// Predictions equal to the ground truth, one per annotated interaction.
pub fn oracle_predictions(gts: &[GroundTruth], inv: &HoiInventory, image_ids: &[String]) -> Vec<PredictionRecord> {
    image_ids
        .iter()
        .map(|id| {
            let preds: Vec<Prediction> = gts
                .iter()
                .filter(|g| &g.image_id == id)
                .map(|g| Prediction { image_id: id.clone(), human: g.human, object: g.object, composition: g.composition, score: 1.0 })
                .collect();
            PredictionRecord::new(id, &preds, inv)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub image_id: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InventoryRecord {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    /// `[verb, object]` per composition id.
    pub compositions: Vec<[usize; 2]>,
    pub frequencies: Vec<u64>,
    pub person: u32,
    pub no_interaction: Option<usize>,
}

impl InventoryRecord {
    pub fn new(inv: &HoiInventory) -> Self {
        Self {
            verbs: inv.verbs.clone(),
            objects: inv.objects.clone(),
            compositions: inv.compositions.iter().map(|c| [c.verb, c.object]).collect(),
            frequencies: inv.frequencies.clone(),
            person: inv.person,
            no_interaction: inv.no_interaction,
        }
    }

    pub fn to_core(&self) -> Result<HoiInventory> {
        let pairs: Vec<_> = self.compositions.iter().map(|c| (c[0], c[1])).collect();
        HoiInventory::new(self.verbs.clone(), self.objects.clone(), &pairs, self.frequencies.clone(), self.person, self.no_interaction)
            .map_err(|e| validation!("inventory: {e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRecord {
    pub setting: String,
    pub seed: u64,
    pub unseen: Vec<usize>,
    pub seen: Vec<usize>,
}

impl SplitRecord {
    pub fn new(s: &ZeroShotSplit) -> Self {
        Self {
            setting: s.setting.as_str().to_string(),
            seed: s.seed,
            unseen: s.unseen.iter().copied().collect(),
            seen: s.seen.iter().copied().collect(),
        }
    }

    pub fn to_core(&self, inv: &HoiInventory) -> Result<ZeroShotSplit> {
        let split = ZeroShotSplit {
            setting: self.setting.parse().map_err(|e| validation!("split: {e}"))?,
            seed: self.seed,
            unseen: self.unseen.iter().copied().collect::<BTreeSet<_>>(),
            seen: self.seen.iter().copied().collect::<BTreeSet<_>>(),
        };
        if split.unseen.len() != self.unseen.len() || split.seen.len() != self.seen.len() {
            return Err(validation!("split lists contain duplicates"));
        }
        split.validate(inv).map_err(|e| validation!("split: {e}"))?;
        Ok(split)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GspRecord {
    pub d_sp: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub centers: Vec<Vec<f64>>,
    pub seed: u64,
    pub feature_layout_version: u32,
}

impl GspRecord {
    pub fn new(g: &GlobalSpatialPatterns) -> Self {
        Self {
            d_sp: SPATIAL_DIM,
            k: g.k(),
            centers: (0..g.k()).map(|r| g.centers.row(r).to_vec()).collect(),
            seed: g.seed,
            feature_layout_version: FEATURE_LAYOUT_VERSION,
        }
    }

    pub fn to_core(&self) -> Result<GlobalSpatialPatterns> {
        if self.d_sp != SPATIAL_DIM || self.feature_layout_version != FEATURE_LAYOUT_VERSION {
            return Err(validation!(
                "spatial patterns use layout {} with d_sp {}, expected {FEATURE_LAYOUT_VERSION} with {SPATIAL_DIM}",
                self.feature_layout_version,
                self.d_sp
            ));
        }
        if self.centers.len() != self.k || self.centers.iter().any(|c| c.len() != SPATIAL_DIM) {
            return Err(validation!("spatial patterns: centers do not match K x d_sp"));
        }
        GlobalSpatialPatterns::from_centers(Matrix::from_rows(&self.centers), self.seed).map_err(|e| validation!("spatial patterns: {e}"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub id: usize,
    pub verb: String,
    pub object: String,
    pub seen: bool,
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub setting: String,
    pub map_unseen: Option<f64>,
    pub map_seen: Option<f64>,
    pub map_full: Option<f64>,
    pub hm: Option<f64>,
    pub per_class: Vec<ClassReport>,
}

impl Report {
    pub fn new(m: &Metrics, split: &ZeroShotSplit, inv: &HoiInventory) -> Self {
        let per_class = inv
            .compositions
            .iter()
            .map(|c| ClassReport {
                id: c.id,
                verb: inv.verbs[c.verb].clone(),
                object: inv.objects[c.object].clone(),
                seen: split.is_seen(c.id),
                ap: m.per_class[c.id],
            })
            .collect();
        Self {
            setting: split.setting.as_str().to_string(),
            map_unseen: m.map_unseen,
            map_seen: m.map_seen,
            map_full: m.map_full,
            hm: m.hm,
            per_class,
        }
    }

    /// Summary and per-class table in percent.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", 100.0 * v));
        let mut s = format!("setting {}\n{:<10}{:>8}\n", self.setting, "group", "mAP");
        for (name, v) in [("unseen", self.map_unseen), ("seen", self.map_seen), ("full", self.map_full), ("HM", self.hm)] {
            s.push_str(&format!("{name:<10}{:>8}\n", pct(v)));
        }
        s.push_str(&format!("\n{:>4}  {:<14}{:<14}{:<8}{:>8}\n", "id", "verb", "object", "group", "AP"));
        for c in &self.per_class {
            let group = if c.seen { "seen" } else { "unseen" };
            s.push_str(&format!("{:>4}  {:<14}{:<14}{:<8}{:>8}\n", c.id, c.verb, c.object, group, pct(c.ap)));
        }
        s
    }
}
