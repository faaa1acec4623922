//! The assembled detector: frozen dual encoder, conditional prompts, region
//! head and inference.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamStore, Var};
use crate::encoders::{patchify, pretrain_contrastive, CaptionedImage, DualEncoder, DualEncoderConfig, PretrainConfig, PretrainLog, Vocab};
use crate::error::{bail, Result};
use crate::eval::Prediction;
use crate::frontend::{
    assemble_instance_prior, enumerate_pairs, filter_detections, normalize_embeddings, AnnotatedImage, Detection, FilterConfig,
    HumanObjectPair,
};
use crate::geometry::{fit_global_spatial_patterns, pairwise_spatial_features, GlobalSpatialPatterns, SpatialFeature};
use crate::head::{
    check_lambda, final_score, pair_logits, region_pooling_matrix, FusionWeights, TokenGrid, DEFAULT_LAMBDA, DEFAULT_ROI_RESOLUTION,
    DEFAULT_TAU,
};
use crate::linalg::Matrix;
use crate::prompts::{build_classifier, human_prior_classifier, LanguagePrompt, PromptConfig, PromptInjector, SpatialPriorIntegration};
use crate::rng::{seeded, shuffle, substream};
use crate::synth::{caption_variants, RgbImage, Scene};
use crate::zeroshot::HoiInventory;

/// Class template of verb `verb`.
pub fn verb_template(verb: &str) -> String {
    format!("a photo of a person {verb} an object")
}

/// Text whose embedding stands for object class `object`.
pub fn object_prompt(object: &str) -> String {
    format!("a photo of a {object}")
}

/// Every word needed for captions, templates and object prompts of `inv`.
pub fn vocab_for(inv: &HoiInventory) -> Vocab {
    let mut texts: Vec<String> = Vec::new();
    texts.push(verb_template(""));
    texts.push(object_prompt(""));
    for v in &inv.verbs {
        for o in &inv.objects {
            texts.extend(caption_variants(v, o));
        }
    }
    Vocab::from_texts(texts.iter().map(String::as_str))
}

/// Copies every parameter of `dst` from the same-named parameter of `src`.
pub fn load_values(dst: &mut ParamStore, src: &ParamStore) -> Result<()> {
    let ids: Vec<_> = dst.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = dst.param(id).name.clone();
        let Some(sid) = src.find(&name) else {
            bail!(InvalidInput, "parameter {name} missing");
        };
        let v = src.get(sid);
        if v.shape() != dst.get(id).shape() {
            bail!(InvalidInput, "parameter {name} has shape {:?}, expected {:?}", v.shape(), dst.get(id).shape());
        }
        *dst.get_mut(id) = v.clone();
    }
    Ok(())
}

/// The pretrained dual encoder with its vocabulary.
#[derive(Clone, Debug)]
pub struct Foundation {
    pub config: DualEncoderConfig,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub encoder: DualEncoder,
}

impl Foundation {
    pub fn new(config: DualEncoderConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        let mut store = ParamStore::default();
        let encoder = DualEncoder::new(&mut store, &config, vocab.len(), seed)?;
        Ok(Self { config, vocab, store, encoder })
    }

    /// Rebuilds the encoder around stored weights.
    pub fn from_store(config: DualEncoderConfig, vocab: Vocab, weights: &ParamStore) -> Result<Self> {
        let mut f = Self::new(config, vocab, 0)?;
        load_values(&mut f.store, weights)?;
        Ok(f)
    }

    /// Contrastive pretraining on scene images and their caption variants.
    pub fn pretrain(&mut self, scenes: &[Scene], inv: &HoiInventory, cfg: &PretrainConfig) -> Result<PretrainLog> {
        let items: Vec<_> = scenes.iter().map(|s| (&s.image, s.verb, s.object)).collect();
        self.pretrain_on(&items, inv, cfg)
    }

    /// Contrastive pretraining on `(image, verb, object)` triples.
    pub fn pretrain_on(&mut self, items: &[(&RgbImage, usize, u32)], inv: &HoiInventory, cfg: &PretrainConfig) -> Result<PretrainLog> {
        let mut data = Vec::with_capacity(items.len());
        for &(image, verb, object) in items {
            let object = inv.objects.get(object as usize).map(String::as_str).unwrap_or("object");
            let verb = inv.verbs.get(verb).map(String::as_str).unwrap_or("");
            let captions = caption_variants(verb, object).iter().map(|c| self.vocab.tokenize(c)).collect::<Result<Vec<_>>>()?;
            data.push(CaptionedImage { patches: patchify(image, &self.config.image)?, captions });
        }
        pretrain_contrastive(&mut self.store, &self.encoder, &data, cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub prompts: PromptConfig,
    pub roi_resolution: usize,
    pub tau_init: f64,
    /// Detector-confidence exponent at inference.
    pub lambda: f64,
    pub filter: FilterConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompts: PromptConfig::default(),
            roi_resolution: DEFAULT_ROI_RESOLUTION,
            tau_init: DEFAULT_TAU,
            lambda: DEFAULT_LAMBDA,
            filter: FilterConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.prompts.validate()?;
        check_lambda(self.lambda)?;
        if self.roi_resolution == 0 {
            bail!(Config, "ROI resolution must be positive");
        }
        if !(self.tau_init.is_finite() && self.tau_init > 0.0) {
            bail!(Config, "initial temperature must be positive, got {}", self.tau_init);
        }
        Ok(())
    }
}

/// Spatial features of every annotated interaction, from ground-truth boxes.
pub fn annotation_spatial_features(images: &[AnnotatedImage]) -> Result<Vec<SpatialFeature>> {
    let mut out = Vec::new();
    for img in images {
        for h in &img.hoi {
            out.push(pairwise_spatial_features(&img.boxes[h.human], &img.boxes[h.object], img.size)?);
        }
    }
    Ok(out)
}

/// Clusters the annotated interactions of `images` into `k` patterns.
pub fn fit_gsp(images: &[AnnotatedImage], k: usize, seed: u64) -> Result<GlobalSpatialPatterns> {
    let feats = annotation_spatial_features(images)?;
    if feats.len() < k {
        bail!(Config, "{} annotated interactions cannot support {k} spatial patterns", feats.len());
    }
    fit_global_spatial_patterns(&feats, k, seed)
}

/// One image with its detector output and (for training) annotation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: RgbImage,
    pub annotation: AnnotatedImage,
    pub detections: Vec<Detection>,
}

impl From<Scene> for Sample {
    fn from(s: Scene) -> Self {
        Self { image: s.image, annotation: s.annotation, detections: s.detections }
    }
}

/// Per-image operands that do not depend on trainable weights.
#[derive(Clone, Debug)]
pub struct ImageOperands {
    pub pairs: Vec<HumanObjectPair>,
    /// Tokens after the first injection block (frozen trunk).
    pub trunk: Matrix,
    pub prior: Matrix,
    /// `3P × N` region pooling weights.
    pub pooling: Matrix,
}

#[derive(Clone, Debug)]
pub struct CmmpModel {
    pub config: ModelConfig,
    pub encoder_config: DualEncoderConfig,
    pub vocab: Vocab,
    pub inventory: HoiInventory,
    pub gsp: GlobalSpatialPatterns,
    pub store: ParamStore,
    pub encoder: DualEncoder,
    pub spi: SpatialPriorIntegration,
    /// One per injection block, in block order.
    pub injectors: Vec<PromptInjector>,
    pub language: LanguagePrompt,
    pub fusion: FusionWeights,
    /// Token ids of every verb's class template.
    pub templates: Vec<Vec<u32>>,
    /// Unit semantic embedding per object label.
    pub object_embeddings: Matrix,
    pub w_hum: Matrix,
}

impl CmmpModel {
    /// Adds fresh prompt and head parameters to a frozen copy of `foundation`.
    pub fn new(foundation: &Foundation, inventory: HoiInventory, gsp: GlobalSpatialPatterns, config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = foundation.store.clone();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.set_trainable(id, false);
        }
        let enc_cfg = foundation.config.clone();
        let mut rng = seeded(config.seed);
        let prior_dim = 5 + enc_cfg.embed_dim;
        let spi = SpatialPriorIntegration::new(&mut store, &config.prompts, prior_dim, &mut rng);
        let injectors = enc_cfg
            .image
            .injection_blocks
            .iter()
            .map(|b| PromptInjector::new(&mut store, &format!("prompts.inject.{b}"), enc_cfg.image.width, &config.prompts, &mut rng))
            .collect();
        let language = LanguagePrompt::new(&mut store, &config.prompts, enc_cfg.text.width, &mut rng);
        let fusion = FusionWeights::new(&mut store, config.tau_init);
        let vocab = foundation.vocab.clone();
        let templates = inventory.verbs.iter().map(|v| vocab.tokenize(&verb_template(v))).collect::<Result<Vec<_>>>()?;
        let mut object_embeddings = Matrix::zeros(inventory.objects.len(), enc_cfg.embed_dim);
        for (l, o) in inventory.objects.iter().enumerate() {
            let e = foundation.encoder.embed_text(&store, &vocab.tokenize(&object_prompt(o))?)?;
            object_embeddings.row_mut(l).copy_from_slice(&e);
        }
        normalize_embeddings(&mut object_embeddings);
        let w_hum = human_prior_classifier(&store, &foundation.encoder.text, &templates)?;
        Ok(Self {
            config,
            encoder_config: enc_cfg,
            vocab,
            inventory,
            gsp,
            store,
            encoder: foundation.encoder.clone(),
            spi,
            injectors,
            language,
            fusion,
            templates,
            object_embeddings,
            w_hum,
        })
    }

    /// Rebuilds a model around stored weights (encoder and prompts).
    pub fn from_store(
        encoder_config: DualEncoderConfig,
        vocab: Vocab,
        inventory: HoiInventory,
        gsp: GlobalSpatialPatterns,
        config: ModelConfig,
        weights: &ParamStore,
    ) -> Result<Self> {
        let foundation = Foundation::from_store(encoder_config, vocab, weights)?;
        let mut m = Self::new(&foundation, inventory, gsp, config)?;
        load_values(&mut m.store, weights)?;
        Ok(m)
    }

    pub fn token_grid(&self) -> TokenGrid {
        let c = &self.encoder_config.image;
        TokenGrid { grid: c.grid(), stride: c.patch_size as f64 }
    }

    fn first_injection(&self) -> usize {
        self.encoder_config.image.injection_blocks.first().map_or(self.encoder_config.image.blocks, |&b| b + 1)
    }

    /// Frozen tokens up to and including the first injection block.
    pub fn trunk(&self, image: &RgbImage) -> Result<Matrix> {
        let enc = &self.encoder.image;
        let mut g = Graph::no_grad(&self.store);
        let p = g.constant(patchify(image, &enc.config)?);
        let x = enc.embed(&mut g, p);
        let end = self.first_injection();
        let mut identity = |_: &mut Graph<'_>, _: usize, x: Var| Ok(x);
        let x = enc.run_blocks(&mut g, x, 0, end, &mut identity)?;
        Ok(g.value(x).clone())
    }

    /// Filtered detections, pairs and weight-independent operands of an
    /// image; `None` when no human-object pair survives the filter.
    pub fn operands(&self, image: &RgbImage, detections: &[Detection]) -> Result<Option<ImageOperands>> {
        let tg = self.token_grid();
        if image.size() != tg.image_size() {
            bail!(Validation, "image is {}x{}, model expects {:?}", image.width, image.height, tg.image_size());
        }
        let dets = filter_detections(detections, &self.config.filter);
        let pairs = enumerate_pairs(&dets, self.inventory.person);
        if pairs.is_empty() {
            return Ok(None);
        }
        let prior = assemble_instance_prior(&dets, &self.object_embeddings, image.size())?.rows;
        let pooling = region_pooling_matrix(&pairs, tg, self.config.roi_resolution)?;
        let trunk = self.trunk(image)?;
        Ok(Some(ImageOperands { pairs, trunk, prior, pooling }))
    }

    /// `W_L` on a graph: one unit prototype per verb.
    pub fn classifier(&self, g: &mut Graph<'_>) -> Result<Var> {
        build_classifier(g, &self.encoder.text, Some(&self.language), &self.templates)
    }

    pub fn classifier_matrix(&self) -> Result<Matrix> {
        let mut g = Graph::no_grad(&self.store);
        let w = self.classifier(&mut g)?;
        Ok(g.value(w).clone())
    }

    /// Final image tokens with vision prompts injected after every
    /// injection block.
    pub fn prompted_tokens(&self, g: &mut Graph<'_>, ops: &ImageOperands) -> Result<Var> {
        let enc = &self.encoder.image;
        let pv = self.spi.forward(g, &ops.prior, &self.gsp.centers)?;
        let blocks = &self.encoder_config.image.injection_blocks;
        let mut x = g.constant(ops.trunk.clone());
        if let Some(first) = self.injectors.first() {
            x = first.forward(g, x, pv)?;
        }
        let start = self.first_injection();
        let mut hook = |g: &mut Graph<'_>, b: usize, x: Var| {
            let i = blocks.iter().position(|&k| k == b).expect("hook only fires on injection blocks");
            self.injectors[i].forward(g, x, pv)
        };
        enc.run_blocks(g, x, start, enc.blocks.len(), &mut hook)
    }

    /// Cosine interaction logits `P × rows(w_l)` of one image.
    pub fn interaction_logits(&self, g: &mut Graph<'_>, ops: &ImageOperands, w_l: Var) -> Result<Var> {
        let enc = &self.encoder.image;
        let x = self.prompted_tokens(g, ops)?;
        let w = g.constant(ops.pooling.clone());
        let regions = g.matmul(w, x);
        let e = enc.project(g, regions);
        let p = ops.pairs.len();
        let f_h = g.slice_rows(e, 0, p);
        let f_o = g.slice_rows(e, p, p);
        let f_u = g.slice_rows(e, 2 * p, p);
        Ok(pair_logits(g, f_h, f_o, f_u, &self.fusion, w_l))
    }

    /// Scored interactions of one image over every valid composition.
    /// `w_l` is the (possibly permuted) classifier, one row per verb.
    pub fn predict_with(&self, image_id: &str, image: &RgbImage, detections: &[Detection], w_l: &Matrix) -> Result<Vec<Prediction>> {
        let Some(ops) = self.operands(image, detections)? else {
            return Ok(Vec::new());
        };
        let mut g = Graph::no_grad(&self.store);
        let w = g.constant(w_l.clone());
        let s = self.interaction_logits(&mut g, &ops, w)?;
        let s = g.value(s);
        let tau = self.fusion.tau(&self.store);
        let table = self.inventory.lookup_table();
        let mut out = Vec::new();
        for (i, p) in ops.pairs.iter().enumerate() {
            let scores = final_score(s.row(i), p.human.score, p.object.score, self.config.lambda, tau)?;
            for (verb, &score) in scores.iter().enumerate() {
                if let Some(Some(id)) = table[verb].get(p.object.label as usize) {
                    out.push(Prediction {
                        image_id: String::from(image_id),
                        human: p.human.bbox,
                        object: p.object.bbox,
                        composition: *id,
                        score,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn predict(&self, image_id: &str, image: &RgbImage, detections: &[Detection]) -> Result<Vec<Prediction>> {
        self.predict_with(image_id, image, detections, &self.classifier_matrix()?)
    }

    /// Classifier whose row `a` is taken from verb `perm[a]` when a
    /// permutation is given.
    pub fn permuted_classifier(&self, perm: Option<&[usize]>) -> Result<Matrix> {
        let w = self.classifier_matrix()?;
        let Some(perm) = perm else {
            return Ok(w);
        };
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..w.rows()).collect::<Vec<_>>() {
            bail!(Config, "verb permutation must cover 0..{}", w.rows());
        }
        Ok(w.select_rows(perm))
    }

    /// Predictions for many samples with one classifier evaluation.
    pub fn predict_all(&self, samples: &[Sample], perm: Option<&[usize]>) -> Result<Vec<Prediction>> {
        let w = self.permuted_classifier(perm)?;
        let mut out = Vec::new();
        for s in samples {
            out.extend(self.predict_with(&s.annotation.image_id, &s.image, &s.detections, &w)?);
        }
        Ok(out)
    }
}

/// Seeded permutation of `0..n` with no fixed point, used to pair every
/// verb with another verb's prototype.
pub fn verb_derangement(n: usize, seed: u64) -> Result<Vec<usize>> {
    if n < 2 {
        bail!(Config, "a derangement needs at least two verbs, got {n}");
    }
    let mut rng = substream(seed, STREAM_DERANGEMENT);
    let mut perm: Vec<usize> = (0..n).collect();
    loop {
        shuffle(&mut rng, &mut perm);
        if perm.iter().enumerate().all(|(i, &p)| i != p) {
            return Ok(perm);
        }
    }
}

const STREAM_DERANGEMENT: u64 = 31;
