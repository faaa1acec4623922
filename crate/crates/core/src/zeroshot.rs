//! HOI inventories, zero-shot splits and training-annotation filtering.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{bail, Error, Result};
use crate::frontend::AnnotatedImage;
use crate::rng::{seeded, shuffle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Composition {
    pub id: usize,
    pub verb: usize,
    pub object: usize,
}

/// Closed verb/object vocabulary with its valid compositions.
#[derive(Clone, Debug, PartialEq)]
pub struct HoiInventory {
    pub verbs: Vec<String>,
    pub objects: Vec<String>,
    /// `compositions[i].id == i`.
    pub compositions: Vec<Composition>,
    /// Training frequency per composition id.
    pub frequencies: Vec<u64>,
    /// Object label of people.
    pub person: u32,
    pub no_interaction: Option<usize>,
}

impl HoiInventory {
    pub fn new(
        verbs: Vec<String>,
        objects: Vec<String>,
        pairs: &[(usize, usize)],
        frequencies: Vec<u64>,
        person: u32,
        no_interaction: Option<usize>,
    ) -> Result<Self> {
        if frequencies.len() != pairs.len() {
            bail!(Config, "{} frequencies for {} compositions", frequencies.len(), pairs.len());
        }
        let mut seen = BTreeSet::new();
        let mut compositions = Vec::with_capacity(pairs.len());
        for (id, &(verb, object)) in pairs.iter().enumerate() {
            if verb >= verbs.len() || object >= objects.len() {
                bail!(Config, "composition ({verb}, {object}) outside inventory");
            }
            if !seen.insert((verb, object)) {
                bail!(Config, "duplicate composition ({verb}, {object})");
            }
            compositions.push(Composition { id, verb, object });
        }
        if person as usize >= objects.len() {
            bail!(Config, "person label {person} outside object list");
        }
        Ok(Self { verbs, objects, compositions, frequencies, person, no_interaction })
    }

    pub fn num_verbs(&self) -> usize {
        self.verbs.len()
    }

    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn len(&self) -> usize {
        self.compositions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.compositions.is_empty()
    }

    pub fn composition_id(&self, verb: usize, object: usize) -> Option<usize> {
        self.compositions.iter().find(|c| c.verb == verb && c.object == object).map(|c| c.id)
    }

    /// Composition-id lookup table indexed `[verb][object]`.
    pub fn lookup_table(&self) -> Vec<Vec<Option<usize>>> {
        let mut t = alloc::vec![alloc::vec![None; self.num_objects()]; self.num_verbs()];
        for c in &self.compositions {
            t[c.verb][c.object] = Some(c.id);
        }
        t
    }

    /// Inventory shaped like HICO-DET: 117 verbs (incl. `no_interaction`),
    /// the 80 COCO objects and 600 compositions. The verb/object names are
    /// the real ones; which pairs are valid and their frequencies are a fixed
    /// pseudo-random stand-in.
    pub fn hico_shaped() -> Self {
        let verbs: Vec<String> = HICO_VERBS.iter().map(|s| s.to_string()).collect();
        let objects: Vec<String> = COCO_OBJECTS.iter().map(|s| s.to_string()).collect();
        let no_inter = HICO_VERBS.iter().position(|&v| v == "no_interaction");
        let mut rng = seeded(0x4849_434f);
        let mut pairs = Vec::with_capacity(600);
        let mut used = BTreeSet::new();
        for o in 0..objects.len() {
            pairs.push((no_inter.unwrap(), o));
            used.insert((no_inter.unwrap(), o));
        }
        for v in (0..verbs.len()).filter(|&v| Some(v) != no_inter) {
            let o = crate::rng::below(&mut rng, objects.len());
            used.insert((v, o));
            pairs.push((v, o));
        }
        while pairs.len() < 600 {
            let v = crate::rng::below(&mut rng, verbs.len());
            let o = crate::rng::below(&mut rng, objects.len());
            if Some(v) != no_inter && used.insert((v, o)) {
                pairs.push((v, o));
            }
        }
        let freqs = (0..pairs.len())
            .map(|_| {
                let u = crate::rng::uniform(&mut rng, 0.0, 1.0);
                libm::floor(libm::exp(u * 8.0)) as u64
            })
            .collect();
        Self::new(verbs, objects, &pairs, freqs, 0, no_inter).expect("static inventory is valid")
    }
}

/// HICO-DET verb classes.
pub const HICO_VERBS: [&str; 117] = [
    "adjust",
    "assemble",
    "block",
    "blow",
    "board",
    "break",
    "brush_with",
    "buy",
    "carry",
    "catch",
    "chase",
    "check",
    "clean",
    "control",
    "cook",
    "cut",
    "cut_with",
    "direct",
    "drag",
    "dribble",
    "drink_with",
    "drive",
    "dry",
    "eat",
    "eat_at",
    "exit",
    "feed",
    "fill",
    "flip",
    "flush",
    "fly",
    "greet",
    "grind",
    "groom",
    "herd",
    "hit",
    "hold",
    "hop_on",
    "hose",
    "hug",
    "hunt",
    "inspect",
    "install",
    "jump",
    "kick",
    "kiss",
    "lasso",
    "launch",
    "lick",
    "lie_on",
    "lift",
    "light",
    "load",
    "lose",
    "make",
    "milk",
    "move",
    "no_interaction",
    "open",
    "operate",
    "pack",
    "paint",
    "park",
    "pay",
    "peel",
    "pet",
    "pick",
    "pick_up",
    "point",
    "pour",
    "pull",
    "push",
    "race",
    "read",
    "release",
    "repair",
    "ride",
    "row",
    "run",
    "sail",
    "scratch",
    "serve",
    "set",
    "shear",
    "sign",
    "sip",
    "sit_at",
    "sit_on",
    "slide",
    "smell",
    "spin",
    "squeeze",
    "stab",
    "stand_on",
    "stand_under",
    "stick",
    "stir",
    "stop_at",
    "straddle",
    "swing",
    "tag",
    "talk_on",
    "teach",
    "text_on",
    "throw",
    "tie",
    "toast",
    "train",
    "turn",
    "type_on",
    "walk",
    "wash",
    "watch",
    "wave",
    "wear",
    "wield",
    "zip",
];

/// COCO object classes; index 0 is `person`.
pub const COCO_OBJECTS: [&str; 80] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "airplane",
    "bus",
    "train",
    "truck",
    "boat",
    "traffic light",
    "fire hydrant",
    "stop sign",
    "parking meter",
    "bench",
    "bird",
    "cat",
    "dog",
    "horse",
    "sheep",
    "cow",
    "elephant",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "umbrella",
    "handbag",
    "tie",
    "suitcase",
    "frisbee",
    "skis",
    "snowboard",
    "sports ball",
    "kite",
    "baseball bat",
    "baseball glove",
    "skateboard",
    "surfboard",
    "tennis racket",
    "bottle",
    "wine glass",
    "cup",
    "fork",
    "knife",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "hot dog",
    "pizza",
    "donut",
    "cake",
    "chair",
    "couch",
    "potted plant",
    "bed",
    "dining table",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "keyboard",
    "cell phone",
    "microwave",
    "oven",
    "toaster",
    "sink",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "scissors",
    "teddy bear",
    "hair drier",
    "toothbrush",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ZeroShotSetting {
    /// Random unseen compositions.
    Uc,
    /// Rarest compositions held out first.
    RfUc,
    /// Most frequent compositions held out first.
    NfUc,
    /// Whole objects held out.
    Uo,
    /// Whole verbs held out.
    Uv,
}

impl ZeroShotSetting {
    pub const ALL: [ZeroShotSetting; 5] = [Self::Uc, Self::RfUc, Self::NfUc, Self::Uo, Self::Uv];

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Uc => "UC",
            Self::RfUc => "RF-UC",
            Self::NfUc => "NF-UC",
            Self::Uo => "UO",
            Self::Uv => "UV",
        }
    }
}

impl fmt::Display for ZeroShotSetting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ZeroShotSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(alloc::format!("unknown zero-shot setting {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZeroShotSplit {
    pub setting: ZeroShotSetting,
    pub seed: u64,
    pub unseen: BTreeSet<usize>,
    pub seen: BTreeSet<usize>,
}

impl ZeroShotSplit {
    pub fn from_unseen(inv: &HoiInventory, setting: ZeroShotSetting, seed: u64, unseen: BTreeSet<usize>) -> Self {
        let seen = (0..inv.len()).filter(|id| !unseen.contains(id)).collect();
        Self { setting, seed, unseen, seen }
    }

    pub fn is_seen(&self, id: usize) -> bool {
        self.seen.contains(&id)
    }

    /// Verbs that still appear in some seen composition.
    pub fn seen_verbs(&self, inv: &HoiInventory) -> Vec<usize> {
        let set: BTreeSet<usize> = self.seen.iter().map(|&id| inv.compositions[id].verb).collect();
        set.into_iter().collect()
    }

    /// Checks that `seen` and `unseen` partition the inventory.
    pub fn validate(&self, inv: &HoiInventory) -> Result<()> {
        if self.seen.intersection(&self.unseen).next().is_some() {
            bail!(Validation, "seen and unseen compositions overlap");
        }
        if self.seen.len() + self.unseen.len() != inv.len() || self.seen.iter().chain(&self.unseen).any(|&i| i >= inv.len()) {
            bail!(Validation, "split does not cover the {} inventory compositions", inv.len());
        }
        Ok(())
    }
}

const UC_RETRIES: usize = 64;

/// Builds a zero-shot split holding out `count` compositions (UC family),
/// verbs (UV) or objects (UO).
pub fn build_split(inv: &HoiInventory, setting: ZeroShotSetting, count: usize, seed: u64) -> Result<ZeroShotSplit> {
    let n = inv.len();
    let unseen: BTreeSet<usize> = match setting {
        ZeroShotSetting::RfUc | ZeroShotSetting::NfUc => {
            if count >= n.max(1) && count > 0 {
                bail!(Config, "cannot hold out {count} of {n} compositions");
            }
            let mut ids: Vec<usize> = (0..n).collect();
            if setting == ZeroShotSetting::RfUc {
                ids.sort_by_key(|&i| (inv.frequencies[i], i));
            } else {
                ids.sort_by_key(|&i| (core::cmp::Reverse(inv.frequencies[i]), i));
            }
            ids.into_iter().take(count).collect()
        }
        ZeroShotSetting::Uc => {
            if count >= n.max(1) && count > 0 {
                bail!(Config, "cannot hold out {count} of {n} compositions");
            }
            uc_draw(inv, count, seed)?
        }
        ZeroShotSetting::Uv | ZeroShotSetting::Uo => {
            let by_verb = setting == ZeroShotSetting::Uv;
            let mut pool: Vec<usize> = inv
                .compositions
                .iter()
                .filter(|c| !by_verb || Some(c.verb) != inv.no_interaction)
                .map(|c| if by_verb { c.verb } else { c.object })
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            let total = if by_verb { inv.num_verbs() } else { inv.num_objects() };
            if count > 0 && (count >= total || count > pool.len()) {
                bail!(Config, "cannot hold out {count} of {} {}", pool.len(), if by_verb { "verbs" } else { "objects" });
            }
            let mut rng = seeded(seed);
            shuffle(&mut rng, &mut pool);
            let held: BTreeSet<usize> = pool.into_iter().take(count).collect();
            inv.compositions.iter().filter(|c| held.contains(&if by_verb { c.verb } else { c.object })).map(|c| c.id).collect()
        }
    };
    Ok(ZeroShotSplit::from_unseen(inv, setting, seed, unseen))
}

/// Random held-out compositions such that every verb and object keeps at
/// least one seen composition.
fn uc_draw(inv: &HoiInventory, count: usize, seed: u64) -> Result<BTreeSet<usize>> {
    let mut rng = seeded(seed);
    for _ in 0..UC_RETRIES {
        let mut verb_left = alloc::vec![0usize; inv.num_verbs()];
        let mut obj_left = alloc::vec![0usize; inv.num_objects()];
        for c in &inv.compositions {
            verb_left[c.verb] += 1;
            obj_left[c.object] += 1;
        }
        let mut order: Vec<usize> = (0..inv.len()).collect();
        shuffle(&mut rng, &mut order);
        let mut unseen = BTreeSet::new();
        for id in order {
            if unseen.len() == count {
                break;
            }
            let c = inv.compositions[id];
            if verb_left[c.verb] > 1 && obj_left[c.object] > 1 {
                verb_left[c.verb] -= 1;
                obj_left[c.object] -= 1;
                unseen.insert(id);
            }
        }
        if unseen.len() == count {
            return Ok(unseen);
        }
    }
    bail!(Config, "no UC draw of {count} keeps every verb and object seen")
}

/// Drops interactions whose composition is unseen. Boxes and labels stay, so
/// images remain usable for detection.
pub fn filter_training_annotations(images: &[AnnotatedImage], inv: &HoiInventory, split: &ZeroShotSplit) -> Result<Vec<AnnotatedImage>> {
    let table = inv.lookup_table();
    images
        .iter()
        .map(|img| {
            let mut kept = img.clone();
            kept.hoi.clear();
            for h in &img.hoi {
                let object = img
                    .labels
                    .get(h.object)
                    .copied()
                    .ok_or_else(|| Error::Validation(alloc::format!("{}: object index {} out of range", img.image_id, h.object)))?
                    as usize;
                let id = table.get(h.verb).and_then(|row| row.get(object).copied().flatten()).ok_or_else(|| {
                    Error::Validation(alloc::format!("{}: unknown composition (verb {}, object {object})", img.image_id, h.verb))
                })?;
                if split.is_seen(id) {
                    kept.hoi.push(*h);
                }
            }
            Ok(kept)
        })
        .collect()
}
