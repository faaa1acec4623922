//! Toy dual encoder: a patch transformer over images and a causal token
//! transformer over text, aligned by batch-contrastive pretraining.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{bail, Error, Result};
use crate::linalg::Matrix;
use crate::nn::{gaussian, LayerNorm, Linear, TransformerBlock};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::rng::{below, seeded, shuffle, substream, ChaCha8Rng};
use crate::synth::RgbImage;

pub const SOT: &str = "<sot>";
pub const EOT: &str = "<eot>";

#[derive(Clone, Debug, PartialEq)]
pub struct ImageEncoderConfig {
    pub image_size: u32,
    pub patch_size: u32,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Blocks after which vision prompts are injected.
    pub injection_blocks: Vec<usize>,
}

impl Default for ImageEncoderConfig {
    fn default() -> Self {
        Self { image_size: 64, patch_size: 8, width: 128, blocks: 4, heads: 4, mlp_ratio: 4, injection_blocks: alloc::vec![1, 2, 3] }
    }
}

impl ImageEncoderConfig {
    pub fn grid(&self) -> usize {
        (self.image_size / self.patch_size) as usize
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            bail!(Config, "image size {} not divisible by patch size {}", self.image_size, self.patch_size);
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            bail!(Config, "image width {} not divisible by {} heads", self.width, self.heads);
        }
        if let Some(b) = self.injection_blocks.iter().find(|&&b| b >= self.blocks) {
            bail!(Config, "injection block {b} outside 0..{}", self.blocks);
        }
        if self.injection_blocks.windows(2).any(|w| w[0] >= w[1]) {
            bail!(Config, "injection blocks must be strictly increasing");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextEncoderConfig {
    pub context_length: usize,
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for TextEncoderConfig {
    fn default() -> Self {
        Self { context_length: 32, width: 128, blocks: 2, heads: 4, mlp_ratio: 4 }
    }
}

impl TextEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            bail!(Config, "text width {} not divisible by {} heads", self.width, self.heads);
        }
        if self.context_length < 3 {
            bail!(Config, "context length {} too short", self.context_length);
        }
        Ok(())
    }
}

/// Word-level vocabulary. Ids 0 and 1 are the start and end markers; the
/// rest are sorted words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, u32>,
}

fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| c.is_whitespace() || c == '_').filter(|w| !w.is_empty()).map(|w| w.to_lowercase())
}

impl Vocab {
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut set: Vec<String> = texts.into_iter().flat_map(|t| split_words(t).collect::<Vec<_>>()).collect();
        set.sort();
        set.dedup();
        let mut words = alloc::vec![SOT.to_string(), EOT.to_string()];
        words.extend(set);
        Self::from_words(words).expect("generated vocabulary is unique")
    }

    /// Rebuilds a vocabulary from its serialized word list.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.len() < 2 || words[0] != SOT || words[1] != EOT {
            bail!(Validation, "vocabulary must start with {SOT} and {EOT}");
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as u32).is_some() {
                bail!(Validation, "duplicate vocabulary word {w:?}");
            }
        }
        Ok(Self { words, index })
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Word ids of `text`, without start/end markers.
    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        split_words(text)
            .map(|w| self.index.get(&w).copied().ok_or_else(|| Error::Validation(format!("word {w:?} not in vocabulary"))))
            .collect()
    }
}

/// Pixels to one row per patch, channels interleaved, roughly zero-centred.
pub fn patchify(image: &RgbImage, cfg: &ImageEncoderConfig) -> Result<Matrix> {
    if image.width != cfg.image_size || image.height != cfg.image_size {
        bail!(Validation, "image is {}x{}, encoder expects {}", image.width, image.height, cfg.image_size);
    }
    let p = cfg.patch_size as usize;
    let grid = cfg.grid();
    let side = cfg.image_size as usize;
    let mut out = Matrix::zeros(grid * grid, 3 * p * p);
    for gy in 0..grid {
        for gx in 0..grid {
            let row = out.row_mut(gy * grid + gx);
            for dy in 0..p {
                for dx in 0..p {
                    let src = 3 * ((gy * p + dy) * side + gx * p + dx);
                    for c in 0..3 {
                        row[3 * (dy * p + dx) + c] = (image.pixels[src + c] as f64 / 255.0 - 0.5) * 4.0;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageEncoderConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_post: LayerNorm,
    pub proj: Linear,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, cfg: ImageEncoderConfig, embed_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch_size as usize;
        let patch = Linear::new(store, "image.patch", 3 * p * p, cfg.width, true, rng);
        let pos = store.add("image.pos", gaussian(rng, cfg.num_tokens(), cfg.width, 0.02), true);
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(store, &format!("image.blocks.{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let ln_post = LayerNorm::new(store, "image.ln_post", cfg.width);
        let proj = Linear::new(store, "image.proj", cfg.width, embed_dim, false, rng);
        Ok(Self { config: cfg, patch, pos, blocks, ln_post, proj })
    }

    /// Patch embedding plus positions.
    pub fn embed(&self, g: &mut Graph<'_>, patches: Var) -> Var {
        let x = self.patch.forward(g, patches);
        let pos = g.param(self.pos);
        g.add(x, pos)
    }

    /// Runs blocks `start..end`, calling `hook(block, x)` after every
    /// injection block.
    pub fn run_blocks(
        &self,
        g: &mut Graph<'_>,
        mut x: Var,
        start: usize,
        end: usize,
        hook: &mut dyn FnMut(&mut Graph<'_>, usize, Var) -> Result<Var>,
    ) -> Result<Var> {
        for i in start..end {
            x = self.blocks[i].forward(g, x, false);
            if self.config.injection_blocks.contains(&i) {
                x = hook(g, i, x)?;
            }
        }
        Ok(x)
    }

    /// Token grid after the last block; `hook` as in [`Self::run_blocks`].
    pub fn encode(&self, g: &mut Graph<'_>, patches: Var, hook: &mut dyn FnMut(&mut Graph<'_>, usize, Var) -> Result<Var>) -> Result<Var> {
        let x = self.embed(g, patches);
        self.run_blocks(g, x, 0, self.blocks.len(), hook)
    }

    pub fn encode_plain(&self, g: &mut Graph<'_>, patches: Var) -> Var {
        self.encode(g, patches, &mut |_, _, x| Ok(x)).expect("identity hook cannot fail")
    }

    /// Rows of pooled token features into the shared embedding space.
    pub fn project(&self, g: &mut Graph<'_>, pooled: Var) -> Var {
        let h = self.ln_post.forward(g, pooled);
        self.proj.forward(g, h)
    }

    /// Whole-image embedding: mean token, then [`Self::project`].
    pub fn pool(&self, g: &mut Graph<'_>, tokens: Var) -> Var {
        let m = g.mean_rows(tokens);
        self.project(g, m)
    }
}

/// One segment of a text encoder input.
#[derive(Clone, Copy, Debug)]
pub enum TextPart<'a> {
    Tokens(&'a [u32]),
    /// Pre-embedded rows of text width.
    Soft(Var),
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub ln_final: LayerNorm,
    pub proj: Linear,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, cfg: TextEncoderConfig, vocab_size: usize, embed_dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let token_embedding = store.add("text.token_embedding", gaussian(rng, vocab_size, cfg.width, 0.02), true);
        let pos = store.add("text.pos", gaussian(rng, cfg.context_length, cfg.width, 0.01), true);
        let blocks = (0..cfg.blocks)
            .map(|i| TransformerBlock::new(store, &format!("text.blocks.{i}"), cfg.width, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", cfg.width);
        let proj = Linear::new(store, "text.proj", cfg.width, embed_dim, false, rng);
        Ok(Self { config: cfg, token_embedding, pos, blocks, ln_final, proj })
    }

    pub fn vocab_size(&self, store: &ParamStore) -> usize {
        store.get(self.token_embedding).rows()
    }

    /// Embedding rows of word ids.
    pub fn embed_tokens(&self, g: &mut Graph<'_>, ids: &[u32]) -> Var {
        let table = g.param(self.token_embedding);
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        g.gather_rows(table, &idx)
    }

    /// Encodes `<sot> parts… <eot>` and returns the projected end-marker
    /// state as a `1×embed` row.
    pub fn encode(&self, g: &mut Graph<'_>, parts: &[TextPart<'_>]) -> Result<Var> {
        let mut ids_len = 2;
        for p in parts {
            ids_len += match p {
                TextPart::Tokens(t) => t.len(),
                TextPart::Soft(v) => {
                    let (r, c) = g.shape(*v);
                    if c != self.config.width {
                        bail!(Validation, "soft tokens have width {c}, text width is {}", self.config.width);
                    }
                    r
                }
            };
        }
        if ids_len > self.config.context_length {
            bail!(Validation, "sequence of {ids_len} tokens exceeds context length {}", self.config.context_length);
        }
        let vocab = self.vocab_size(g.store());
        let mut rows = Vec::with_capacity(parts.len() + 2);
        rows.push(self.embed_tokens(g, &[0]));
        for p in parts {
            match p {
                TextPart::Tokens([]) => {}
                TextPart::Tokens(t) => {
                    if let Some(bad) = t.iter().find(|&&i| i as usize >= vocab) {
                        bail!(Validation, "token id {bad} outside vocabulary of {vocab}");
                    }
                    rows.push(self.embed_tokens(g, t));
                }
                TextPart::Soft(v) if g.shape(*v).0 == 0 => {}
                TextPart::Soft(v) => rows.push(*v),
            }
        }
        rows.push(self.embed_tokens(g, &[1]));
        let x = g.concat_rows(&rows);
        let pos = g.param(self.pos);
        let pos = g.slice_rows(pos, 0, ids_len);
        let mut x = g.add(x, pos);
        for b in &self.blocks {
            x = b.forward(g, x, true);
        }
        let last = g.slice_rows(x, ids_len - 1, 1);
        let h = self.ln_final.forward(g, last);
        Ok(self.proj.forward(g, h))
    }

    pub fn encode_ids(&self, g: &mut Graph<'_>, ids: &[u32]) -> Result<Var> {
        self.encode(g, &[TextPart::Tokens(ids)])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoderConfig {
    pub image: ImageEncoderConfig,
    pub text: TextEncoderConfig,
    pub embed_dim: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self { image: ImageEncoderConfig::default(), text: TextEncoderConfig::default(), embed_dim: 128 }
    }
}

impl DualEncoderConfig {
    /// Small configuration that keeps every test and benchmark on one CPU
    /// core within minutes.
    pub fn desk() -> Self {
        Self {
            image: ImageEncoderConfig {
                width: 64,
                blocks: 2,
                heads: 4,
                mlp_ratio: 2,
                injection_blocks: alloc::vec![0, 1],
                ..Default::default()
            },
            text: TextEncoderConfig { width: 64, blocks: 2, heads: 4, mlp_ratio: 2, ..Default::default() },
            embed_dim: 64,
        }
    }
}

/// Both encoders with their shared temperature.
#[derive(Clone, Debug)]
pub struct DualEncoder {
    pub image: ImageEncoder,
    pub text: TextEncoder,
    /// `log` of the contrastive logit scale.
    pub logit_scale: ParamId,
    pub embed_dim: usize,
}

pub const MAX_LOGIT_SCALE: f64 = 100.0;

impl DualEncoder {
    pub fn new(store: &mut ParamStore, cfg: &DualEncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded(seed);
        let image = ImageEncoder::new(store, cfg.image.clone(), cfg.embed_dim, &mut rng)?;
        let text = TextEncoder::new(store, cfg.text.clone(), vocab_size, cfg.embed_dim, &mut rng)?;
        let logit_scale = store.add("logit_scale", Matrix::scalar(libm::log(1.0 / 0.07)), true);
        Ok(Self { image, text, logit_scale, embed_dim: cfg.embed_dim })
    }

    /// Unit-norm image embedding without prompts.
    pub fn embed_image(&self, store: &ParamStore, image: &RgbImage) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(store);
        let p = g.constant(patchify(image, &self.image.config)?);
        let t = self.image.encode_plain(&mut g, p);
        let e = self.image.pool(&mut g, t);
        let e = g.l2_normalize(e, 1e-12);
        Ok(g.value(e).data().to_vec())
    }

    /// Unit-norm text embedding of word ids.
    pub fn embed_text(&self, store: &ParamStore, ids: &[u32]) -> Result<Vec<f64>> {
        let mut g = Graph::no_grad(store);
        let e = self.text.encode_ids(&mut g, ids)?;
        let e = g.l2_normalize(e, 1e-12);
        Ok(g.value(e).data().to_vec())
    }
}

/// Symmetric batch-contrastive loss between row-aligned embeddings,
/// averaged over both directions and the batch.
pub fn contrastive_loss(g: &mut Graph<'_>, images: Var, texts: Var, logit_scale: Var) -> Var {
    let n = g.shape(images).0;
    let i = g.l2_normalize(images, 1e-12);
    let t = g.l2_normalize(texts, 1e-12);
    let scale = g.exp(logit_scale);
    let it = g.matmul_nt(i, t);
    let it = g.scale_by(it, scale);
    let ti = g.matmul_nt(t, i);
    let ti = g.scale_by(ti, scale);
    let targets: Vec<usize> = (0..n).collect();
    let a = g.cross_entropy(it, &targets);
    let b = g.cross_entropy(ti, &targets);
    let s = g.add(a, b);
    g.scale(s, 0.5 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    /// Captions get a random number (up to this many) of zero soft tokens
    /// after the start marker, matching the position of learned prompts.
    pub max_soft_prefix: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            optimizer: AdamWConfig { lr: 2e-3, weight_decay: 1e-4, clip_norm: Some(1.0), ..Default::default() },
            warmup_steps: 20,
            max_soft_prefix: 16,
            seed: 0,
        }
    }
}

/// One pretraining example: an image with one or more candidate captions
/// (one is drawn per step).
#[derive(Clone, Debug)]
pub struct CaptionedImage {
    pub patches: Matrix,
    pub captions: Vec<Vec<u32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    pub step_losses: Vec<f64>,
}

/// Contrastive pretraining of every trainable parameter in `store`.
pub fn pretrain_contrastive(
    store: &mut ParamStore,
    enc: &DualEncoder,
    data: &[CaptionedImage],
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    if cfg.batch_size < 2 {
        bail!(Config, "contrastive batches need at least 2 examples");
    }
    if data.len() < 2 {
        bail!(Config, "pretraining needs at least 2 examples");
    }
    let batch = cfg.batch_size.min(data.len());
    let steps_per_epoch = data.len() / batch;
    let total = steps_per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), store);
    let mut rng = substream(cfg.seed, 11);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = PretrainLog { step_losses: Vec::with_capacity(total) };
    let width = enc.text.config.width;
    for epoch in 0..cfg.epochs {
        shuffle(&mut rng, &mut order);
        for s in 0..steps_per_epoch {
            let idx = &order[s * batch..(s + 1) * batch];
            let caps: Vec<(usize, usize)> =
                idx.iter().map(|&i| (below(&mut rng, data[i].captions.len()), below(&mut rng, cfg.max_soft_prefix + 1))).collect();
            let (loss, grads) = {
                let mut g = Graph::new(store);
                let mut img_rows = Vec::with_capacity(batch);
                let mut txt_rows = Vec::with_capacity(batch);
                for (&i, &(c, k)) in idx.iter().zip(&caps) {
                    let p = g.constant(data[i].patches.clone());
                    let t = enc.image.encode_plain(&mut g, p);
                    img_rows.push(enc.image.pool(&mut g, t));
                    let soft = g.constant(Matrix::zeros(k, width));
                    txt_rows.push(enc.text.encode(&mut g, &[TextPart::Soft(soft), TextPart::Tokens(&data[i].captions[c])])?);
                }
                let im = g.concat_rows(&img_rows);
                let tx = g.concat_rows(&txt_rows);
                let ls = g.param(enc.logit_scale);
                let loss = contrastive_loss(&mut g, im, tx, ls);
                (g.value(loss).item(), g.backward(loss))
            };
            if !loss.is_finite() {
                bail!(Numerical, "pretraining loss became {loss} at epoch {epoch}, step {s}");
            }
            let lr = cosine_lr(cfg.optimizer.lr, log.step_losses.len(), total, cfg.warmup_steps);
            opt.step(store, &grads, lr);
            let ls = store.get_mut(enc.logit_scale);
            ls.data_mut()[0] = ls.data()[0].min(libm::log(MAX_LOGIT_SCALE));
            log.step_losses.push(loss);
        }
    }
    Ok(log)
}

/// Fraction of images whose most similar caption (among `captions`) is
/// their own; captions compare by token sequence.
pub fn retrieval_top1(store: &ParamStore, enc: &DualEncoder, images: &[RgbImage], captions: &[Vec<u32>]) -> Result<f64> {
    if images.len() != captions.len() || images.is_empty() {
        bail!(Validation, "retrieval needs matching non-empty image and caption lists");
    }
    let txt: Vec<Vec<f64>> = captions.iter().map(|c| enc.embed_text(store, c)).collect::<Result<_>>()?;
    let mut hits = 0;
    for (i, img) in images.iter().enumerate() {
        let e = enc.embed_image(store, img)?;
        let best = txt
            .iter()
            .enumerate()
            .map(|(j, t)| (j, crate::linalg::dot(&e, t)))
            .fold((0, f64::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
            .0;
        hits += usize::from(captions[best] == captions[i]);
    }
    Ok(hits as f64 / images.len() as f64)
}
