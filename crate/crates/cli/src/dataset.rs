//! Data directory layout.
//!
//! ```text
//! <data>/inventory.json
//! <data>/pretrain/images/<id>.png   <data>/pretrain/captions.jsonl
//! <data>/train/images/<id>.png      <data>/train/annotations.jsonl   <data>/train/detections.jsonl
//! <data>/test/...                   (same as train)
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use cmmp_core::frontend::AnnotatedImage;
use cmmp_core::model::Sample;
use cmmp_core::synth::{caption, RgbImage, Scene, SynthSplit};
use cmmp_core::zeroshot::HoiInventory;

use crate::error::{validation, CliError, Result};
use crate::formats::{
    read_json, read_jsonl, write_bytes, write_json, write_jsonl, AnnotationRecord, CaptionRecord, DetectionRecord, InventoryRecord,
};
use crate::parallel::par_map;

/// Errors unless `path` exists, naming the subcommand that produces it.
pub fn require(path: &Path, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(validation!("missing {}; run `cmmp {producer}` first", path.display()))
    }
}

pub fn encode_png(img: &RgbImage) -> Result<Vec<u8>> {
    let buf = image::RgbImage::from_raw(img.width, img.height, img.pixels.clone())
        .ok_or_else(|| validation!("pixel buffer does not match {}x{}", img.width, img.height))?;
    let mut out = std::io::Cursor::new(Vec::new());
    buf.write_to(&mut out, image::ImageFormat::Png).map_err(|e| validation!("png encoding: {e}"))?;
    Ok(out.into_inner())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| validation!("{}: {e}", path.display()))?.to_rgb8();
    Ok(RgbImage { width: img.width(), height: img.height(), pixels: img.into_raw() })
}

/// An image split with its detections and, when present, annotations.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub samples: Vec<Sample>,
    pub has_annotations: bool,
}

impl SplitData {
    pub fn annotations(&self) -> Vec<AnnotatedImage> {
        self.samples.iter().map(|s| s.annotation.clone()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct DataDir {
    pub root: PathBuf,
}

impl DataDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn inventory_path(&self) -> PathBuf {
        self.root.join("inventory.json")
    }

    pub fn split_dir(&self, split: SynthSplit) -> PathBuf {
        self.root.join(split.name())
    }

    fn image_path(&self, split: SynthSplit, id: &str) -> PathBuf {
        self.split_dir(split).join("images").join(format!("{id}.png"))
    }

    pub fn annotations_path(&self, split: SynthSplit) -> PathBuf {
        self.split_dir(split).join("annotations.jsonl")
    }

    pub fn detections_path(&self, split: SynthSplit) -> PathBuf {
        self.split_dir(split).join("detections.jsonl")
    }

    pub fn captions_path(&self) -> PathBuf {
        self.split_dir(SynthSplit::Pretrain).join("captions.jsonl")
    }

    pub fn write_inventory(&self, inv: &HoiInventory) -> Result<()> {
        write_json(&self.inventory_path(), &InventoryRecord::new(inv))
    }

    pub fn inventory(&self) -> Result<HoiInventory> {
        require(&self.inventory_path(), "synth")?;
        read_json::<InventoryRecord>(&self.inventory_path())?.to_core()
    }

    /// Writes images plus the split's JSONL files. Pretraining scenes get
    /// captions; the others get annotations and detections.
    pub fn write_split(&self, split: SynthSplit, scenes: &[Scene]) -> Result<()> {
        let dir = self.split_dir(split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        }
        let images = dir.join("images");
        std::fs::create_dir_all(&images).map_err(|e| CliError::io(&images, e))?;
        par_map(scenes, |s| write_bytes(&self.image_path(split, &s.annotation.image_id), &encode_png(&s.image)?))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        if split == SynthSplit::Pretrain {
            let caps: Vec<_> =
                scenes.iter().map(|s| CaptionRecord { image_id: s.annotation.image_id.clone(), caption: s.caption.clone() }).collect();
            return write_jsonl(&self.captions_path(), &caps);
        }
        let ann: Vec<_> = scenes.iter().map(|s| AnnotationRecord::new(&s.annotation)).collect();
        let det: Vec<_> = scenes.iter().map(|s| DetectionRecord::new(&s.annotation.image_id, s.annotation.size, &s.detections)).collect();
        write_jsonl(&self.annotations_path(split), &ann)?;
        write_jsonl(&self.detections_path(split), &det)
    }

    fn load_images(&self, split: SynthSplit, ids: &[String]) -> Result<Vec<RgbImage>> {
        par_map(ids, |id| read_png(&self.image_path(split, id))).into_iter().collect()
    }

    /// Pretraining images with the `(verb, object)` their caption names.
    pub fn pretrain_items(&self, inv: &HoiInventory) -> Result<Vec<(RgbImage, usize, u32)>> {
        require(&self.captions_path(), "synth")?;
        let caps: Vec<CaptionRecord> = read_jsonl(&self.captions_path())?;
        let mut by_caption = BTreeMap::new();
        for c in &inv.compositions {
            by_caption.insert(caption(&inv.verbs[c.verb], &inv.objects[c.object]), (c.verb, c.object as u32));
        }
        let ids: Vec<String> = caps.iter().map(|c| c.image_id.clone()).collect();
        let images = self.load_images(SynthSplit::Pretrain, &ids)?;
        caps.iter()
            .zip(images)
            .map(|(c, img)| {
                let &(v, o) = by_caption
                    .get(&c.caption)
                    .ok_or_else(|| validation!("{}: caption {:?} names no composition", c.image_id, c.caption))?;
                Ok((img, v, o))
            })
            .collect()
    }

    /// Images and detections of `split`, joined with annotations when the
    /// annotation file exists (or always, when `need_annotations`).
    pub fn load_split(&self, split: SynthSplit, inv: &HoiInventory, need_annotations: bool) -> Result<SplitData> {
        require(&self.detections_path(split), "synth")?;
        let dets: Vec<DetectionRecord> = read_jsonl(&self.detections_path(split))?;
        let has_annotations = self.annotations_path(split).exists();
        if need_annotations {
            require(&self.annotations_path(split), "synth")?;
        }
        let mut anns: BTreeMap<String, AnnotatedImage> = BTreeMap::new();
        if has_annotations {
            for r in read_jsonl::<AnnotationRecord>(&self.annotations_path(split))? {
                let a = r.to_core(inv)?;
                if anns.insert(a.image_id.clone(), a).is_some() {
                    return Err(validation!("duplicate annotation for image {}", r.image_id));
                }
            }
            if anns.len() != dets.len() {
                return Err(validation!("{} annotated images but {} detection records", anns.len(), dets.len()));
            }
        }
        let ids: Vec<String> = dets.iter().map(|d| d.image_id.clone()).collect();
        let images = self.load_images(split, &ids)?;
        let mut samples = Vec::with_capacity(dets.len());
        for (d, image) in dets.iter().zip(images) {
            if (image.width, image.height) != (d.width, d.height) {
                return Err(validation!("{}: image is {}x{}, record says {}x{}", d.image_id, image.width, image.height, d.width, d.height));
            }
            let annotation = match anns.remove(&d.image_id) {
                Some(a) => a,
                None if has_annotations => return Err(validation!("{}: no annotation", d.image_id)),
                None => AnnotatedImage {
                    image_id: d.image_id.clone(),
                    size: image.size(),
                    boxes: Vec::new(),
                    labels: Vec::new(),
                    hoi: Vec::new(),
                },
            };
            samples.push(Sample { detections: d.to_core(inv.num_objects())?, image, annotation });
        }
        Ok(SplitData { samples, has_annotations })
    }
}
