//! Deterministic synthetic HOI scenes.
//!
//! Each scene holds one person glyph tinted by its verb, one object placed
//! at the verb's angle/radius profile around the person, and a few
//! non-interacting distractors. Simulated detections are the ground-truth
//! boxes with coordinate jitter and IoU-calibrated scores.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::f64::consts::{PI, TAU};

use crate::error::{bail, Result};
use crate::frontend::{AnnotatedImage, Detection, HoiAnnotation};
use crate::geometry::{BBox, ImageSize};
use crate::rng::{below, normal, substream, uniform, ChaCha8Rng};
use crate::zeroshot::HoiInventory;

pub const SYNTH_VERBS: [&str; 8] = ["riding", "holding", "kicking", "carrying", "pushing", "feeding", "watching", "lifting"];
pub const SYNTH_OBJECTS: [&str; 8] = ["ball", "box", "horse", "kite", "cup", "chair", "bike", "dog"];
pub const PERSON: u32 = 0;

const PLACEMENT_ATTEMPTS: usize = 200;
const ANGLE_NOISE: f64 = 8.0 * PI / 180.0;
const RADIUS_NOISE: f64 = 0.08;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_verbs: usize,
    pub num_objects: usize,
    pub image_size: u32,
    pub train_images: usize,
    pub test_images: usize,
    /// Image-caption pairs for encoder pretraining.
    pub pretrain_images: usize,
    pub max_distractors: usize,
    /// Standard deviation of detection box jitter, pixels.
    pub box_jitter: f64,
    /// Standard deviation of the detection score noise.
    pub score_noise: f64,
    /// Log-normal spread of training composition frequencies.
    pub frequency_spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_verbs: 8,
            num_objects: 8,
            image_size: 64,
            train_images: 512,
            test_images: 256,
            pretrain_images: 2048,
            max_distractors: 2,
            box_jitter: 1.0,
            score_noise: 0.1,
            frequency_spread: 0.8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=SYNTH_VERBS.len()).contains(&self.num_verbs) || !(1..=SYNTH_OBJECTS.len()).contains(&self.num_objects) {
            bail!(Config, "synthetic grid must be within 1..=8 verbs and 1..=8 objects");
        }
        if !(48..=256).contains(&self.image_size) {
            bail!(Config, "image size {} outside 48..=256", self.image_size);
        }
        if self.max_distractors > 3 {
            bail!(Config, "at most 3 distractors fit a scene");
        }
        for (name, v) in [("box_jitter", self.box_jitter), ("score_noise", self.score_noise), ("frequency_spread", self.frequency_spread)] {
            if !(v.is_finite() && v >= 0.0) {
                bail!(Config, "{name} must be finite and non-negative");
            }
        }
        Ok(())
    }

    pub fn image_dims(&self) -> ImageSize {
        ImageSize { width: self.image_size, height: self.image_size }
    }

    /// Full verb × object grid; frequencies are the relative training
    /// weights scaled to integers.
    pub fn inventory(&self) -> HoiInventory {
        let verbs = SYNTH_VERBS[..self.num_verbs].iter().map(|s| String::from(*s)).collect();
        let mut objects: Vec<String> = alloc::vec![String::from("person")];
        objects.extend(SYNTH_OBJECTS[..self.num_objects].iter().map(|s| String::from(*s)));
        let pairs: Vec<(usize, usize)> = (0..self.num_verbs).flat_map(|v| (1..=self.num_objects).map(move |o| (v, o))).collect();
        let freqs = self.composition_weights().iter().map(|w| libm::round(w * 1000.0) as u64).collect();
        HoiInventory::new(verbs, objects, &pairs, freqs, PERSON, None).expect("synthetic grid is valid")
    }

    /// Relative frequency of every composition in the training split.
    pub fn composition_weights(&self) -> Vec<f64> {
        let mut rng = substream(self.seed, STREAM_WEIGHTS);
        (0..self.num_verbs * self.num_objects).map(|_| libm::exp(self.frequency_spread * normal(&mut rng))).collect()
    }
}

/// Angle (radians, image coordinates with y down) and radius, in units of
/// the person box size, at which a verb places its object.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerbProfile {
    pub angle: f64,
    pub radius: f64,
}

impl VerbProfile {
    pub fn of(verb: usize, num_verbs: usize) -> Self {
        Self { angle: TAU * verb as f64 / num_verbs as f64, radius: if verb.is_multiple_of(2) { 0.95 } else { 1.35 } }
    }

    /// Expected `(dx / w_h, dy / h_h)` of the object center.
    pub fn direction(&self) -> (f64, f64) {
        (self.radius * libm::cos(self.angle), self.radius * libm::sin(self.angle))
    }
}

/// 8-bit RGB raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    /// Row-major RGB triples.
    pub pixels: Vec<u8>,
}

impl RgbImage {
    pub fn size(&self) -> ImageSize {
        ImageSize { width: self.width, height: self.height }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y as usize * self.width as usize + x as usize);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: RgbImage,
    pub annotation: AnnotatedImage,
    pub detections: Vec<Detection>,
    pub caption: String,
    pub verb: usize,
    /// Object class of the interacting object (1-based).
    pub object: u32,
}

struct Canvas {
    w: usize,
    h: usize,
    data: Vec<[f64; 3]>,
}

impl Canvas {
    fn new(w: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..w * h)
            .map(|_| {
                let n = uniform(rng, -0.03, 0.03);
                [0.9 + n, 0.9 + n, 0.88 + n]
            })
            .collect();
        Self { w, h, data }
    }

    fn paint(&mut self, b: &BBox, color: [f64; 3], inside: impl Fn(f64, f64) -> bool) {
        let x0 = libm::floor(b.x1).max(0.0) as usize;
        let y0 = libm::floor(b.y1).max(0.0) as usize;
        let x1 = (libm::ceil(b.x2) as usize).min(self.w);
        let y1 = (libm::ceil(b.y2) as usize).min(self.h);
        for y in y0..y1 {
            for x in x0..x1 {
                let u = (x as f64 + 0.5 - b.x1) / b.width();
                let v = (y as f64 + 0.5 - b.y1) / b.height();
                if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && inside(u, v) {
                    self.data[y * self.w + x] = color;
                }
            }
        }
    }

    fn into_image(self) -> RgbImage {
        let pixels = self.data.iter().flat_map(|c| c.map(|v| libm::round(v.clamp(0.0, 1.0) * 255.0) as u8)).collect();
        RgbImage { width: self.w as u32, height: self.h as u32, pixels }
    }
}

fn hue(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h - libm::floor(h)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - libm::fabs(h6 % 2.0 - 1.0));
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

fn verb_tint(verb: usize, num_verbs: usize) -> [f64; 3] {
    hue(verb as f64 / num_verbs as f64, 0.55, 0.75)
}

fn object_color(object: u32) -> [f64; 3] {
    hue((object as f64 - 1.0) * 0.37 + 0.05, 0.9, 0.45)
}

fn draw_person(c: &mut Canvas, b: &BBox, tint: [f64; 3]) {
    // head in the top fifth, torso, then two legs
    c.paint(b, tint, |u, v| {
        let head = (u - 0.5) * (u - 0.5) + (v - 0.12) * (v - 0.12) * 4.0 < 0.07;
        let torso = (0.2..0.8).contains(&u) && (0.25..0.65).contains(&v);
        let legs = (0.65..=1.0).contains(&v) && ((0.2..0.42).contains(&u) || (0.58..0.8).contains(&u));
        head || torso || legs
    });
}

fn draw_object(c: &mut Canvas, b: &BBox, object: u32) {
    let color = object_color(object);
    let shape = (object as usize - 1) % 8;
    c.paint(b, color, move |u, v| {
        let (du, dv) = (u - 0.5, v - 0.5);
        let r2 = du * du + dv * dv;
        match shape {
            0 => r2 < 0.25,
            1 => true,
            2 => libm::fabs(du) < v / 2.0,
            3 => (0.09..0.25).contains(&r2),
            4 => libm::fabs(du) < 0.17 || libm::fabs(dv) < 0.17,
            5 => libm::fabs(du) + libm::fabs(dv) < 0.5,
            6 => libm::fabs(dv) < 0.2,
            _ => libm::fabs(du) < 0.2,
        }
    });
}

fn jitter_box(rng: &mut ChaCha8Rng, b: &BBox, sd: f64, img: ImageSize) -> BBox {
    for _ in 0..16 {
        let j = [b.x1, b.y1, b.x2, b.y2].map(|v| v + sd * normal(rng));
        if let Ok(bb) = BBox::new(j[0], j[1], j[2], j[3]).and_then(|bb| bb.clip(img)) {
            if bb.width() > 1.0 && bb.height() > 1.0 {
                return bb;
            }
        }
    }
    *b
}

/// Detections simulated from ground-truth boxes: jittered coordinates and a
/// score that tracks the jittered box's IoU with the truth.
pub fn simulate_detections(rng: &mut ChaCha8Rng, boxes: &[BBox], labels: &[u32], cfg: &SynthConfig) -> Vec<Detection> {
    boxes
        .iter()
        .zip(labels)
        .map(|(b, &label)| {
            let bbox = jitter_box(rng, b, cfg.box_jitter, cfg.image_dims());
            let score = (0.55 + 0.45 * bbox.iou(b) - libm::fabs(cfg.score_noise * normal(rng))).clamp(0.0, 1.0);
            Detection { bbox, score, label }
        })
        .collect()
}

fn overlaps(a: &BBox, b: &BBox, margin: f64) -> bool {
    a.x1 - margin < b.x2 && b.x1 - margin < a.x2 && a.y1 - margin < b.y2 && b.y1 - margin < a.y2
}

/// Renders one scene of composition `(verb, object)`.
pub fn generate_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig, image_id: String, verb: usize, object: u32) -> Result<Scene> {
    if verb >= cfg.num_verbs || object == PERSON || object as usize > cfg.num_objects {
        bail!(Config, "composition (verb {verb}, object {object}) outside the synthetic grid");
    }
    let side = cfg.image_size as f64;
    let scale = side / 64.0;
    let profile = VerbProfile::of(verb, cfg.num_verbs);
    let (pw, ph) = (uniform(rng, 12.0, 16.0) * scale, uniform(rng, 20.0, 26.0) * scale);
    let os = uniform(rng, 8.0, 12.0) * scale;

    let mut placed = None;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let angle = profile.angle + ANGLE_NOISE * normal(rng);
        let radius = profile.radius + RADIUS_NOISE * normal(rng);
        let (dx, dy) = (radius * libm::cos(angle) * pw, radius * libm::sin(angle) * ph);
        // the union of both boxes relative to the person center
        let lo_x = (-pw / 2.0).min(dx - os / 2.0);
        let hi_x = (pw / 2.0).max(dx + os / 2.0);
        let lo_y = (-ph / 2.0).min(dy - os / 2.0);
        let hi_y = (ph / 2.0).max(dy + os / 2.0);
        if hi_x - lo_x >= side - 2.0 || hi_y - lo_y >= side - 2.0 {
            continue;
        }
        let cx = uniform(rng, 1.0 - lo_x, side - 1.0 - hi_x);
        let cy = uniform(rng, 1.0 - lo_y, side - 1.0 - hi_y);
        let person = BBox::new(cx - pw / 2.0, cy - ph / 2.0, cx + pw / 2.0, cy + ph / 2.0)?;
        let obj = BBox::new(cx + dx - os / 2.0, cy + dy - os / 2.0, cx + dx + os / 2.0, cy + dy + os / 2.0)?;
        placed = Some((person, obj));
        break;
    }
    let Some((person, obj)) = placed else {
        bail!(Generation, "{image_id}: no placement for verb {verb} within {PLACEMENT_ATTEMPTS} attempts");
    };

    let mut boxes = alloc::vec![person, obj];
    let mut labels = alloc::vec![PERSON, object];
    let n_distractors = below(rng, cfg.max_distractors + 1);
    for _ in 0..n_distractors {
        let label = 1 + below(rng, cfg.num_objects) as u32;
        let s = uniform(rng, 8.0, 12.0) * scale;
        let far = |b: &BBox| {
            let (bx, by) = b.center();
            let (px, py) = person.center();
            libm::hypot(bx - px, by - py) > 1.8 * ph
        };
        for _ in 0..PLACEMENT_ATTEMPTS {
            let x = uniform(rng, 1.0, side - 1.0 - s);
            let y = uniform(rng, 1.0, side - 1.0 - s);
            let b = BBox::new(x, y, x + s, y + s)?;
            if far(&b) && boxes.iter().all(|o| !overlaps(o, &b, 2.0)) {
                boxes.push(b);
                labels.push(label);
                break;
            }
        }
    }

    let mut canvas = Canvas::new(cfg.image_size as usize, cfg.image_size as usize, rng);
    draw_person(&mut canvas, &person, verb_tint(verb, cfg.num_verbs));
    for (b, &l) in boxes.iter().zip(&labels).skip(1) {
        draw_object(&mut canvas, b, l);
    }
    let detections = simulate_detections(rng, &boxes, &labels, cfg);
    let caption = caption(SYNTH_VERBS[verb], SYNTH_OBJECTS[object as usize - 1]);
    Ok(Scene {
        image: canvas.into_image(),
        annotation: AnnotatedImage {
            image_id,
            size: cfg.image_dims(),
            boxes,
            labels,
            hoi: alloc::vec![HoiAnnotation { human: 0, object: 1, verb }],
        },
        detections,
        caption,
        verb,
        object,
    })
}

pub fn caption(verb: &str, object: &str) -> String {
    format!("a person {verb} a {object}")
}

/// Caption variants used for pretraining; the first is the scene caption.
pub fn caption_variants(verb: &str, object: &str) -> [String; 3] {
    [caption(verb, object), format!("a photo of a person {verb} an object"), format!("a photo of a {object}")]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthSplit {
    Pretrain,
    Train,
    Test,
}

impl SynthSplit {
    pub fn name(self) -> &'static str {
        match self {
            Self::Pretrain => "pretrain",
            Self::Train => "train",
            Self::Test => "test",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Self::Pretrain => 1,
            Self::Train => 2,
            Self::Test => 3,
        }
    }
}

const STREAM_WEIGHTS: u64 = 0;

/// Composition of scene `index`: frequency-weighted for training, uniform
/// otherwise.
fn draw_composition(rng: &mut ChaCha8Rng, cfg: &SynthConfig, split: SynthSplit, weights: &[f64]) -> (usize, u32) {
    let id = match split {
        SynthSplit::Train => {
            let total: f64 = weights.iter().sum();
            let mut t = uniform(rng, 0.0, total);
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if t < *w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        }
        _ => below(rng, weights.len()),
    };
    (id / cfg.num_objects, 1 + (id % cfg.num_objects) as u32)
}

/// Scene `index` of `split`; independent of every other scene.
pub fn scene_at(cfg: &SynthConfig, split: SynthSplit, index: usize, weights: &[f64]) -> Result<Scene> {
    let mut rng = substream(cfg.seed ^ ((index as u64) << 8), split.stream());
    let (verb, object) = draw_composition(&mut rng, cfg, split, weights);
    generate_scene(&mut rng, cfg, format!("{}_{index:06}", split.name()), verb, object)
}

pub fn generate_split(cfg: &SynthConfig, split: SynthSplit) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let n = match split {
        SynthSplit::Pretrain => cfg.pretrain_images,
        SynthSplit::Train => cfg.train_images,
        SynthSplit::Test => cfg.test_images,
    };
    let weights = cfg.composition_weights();
    (0..n).map(|i| scene_at(cfg, split, i, &weights)).collect()
}
