//! Conditional vision prompts (instance priors attending over global
//! spatial patterns, injected into the image backbone) and learnable
//! language prompts forming the interaction classifier.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::{TextEncoder, TextPart};
use crate::error::{bail, Result};
use crate::geometry::SPATIAL_DIM;
use crate::linalg::{dot, norm, Matrix};
use crate::nn::{gaussian, LayerNorm, Linear, Mlp, MultiHeadAttention};
use crate::rng::ChaCha8Rng;

/// Numerical guard of every row normalization.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct PromptConfig {
    pub d_ins: usize,
    pub spi_layers: usize,
    pub spi_heads: usize,
    /// Number of learnable context vectors `S`.
    pub context_length: usize,
    pub context_init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self { d_ins: 64, spi_layers: 2, spi_heads: 4, context_length: 16, context_init_std: 0.02 }
    }
}

impl PromptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_ins == 0 || self.spi_heads == 0 || !self.d_ins.is_multiple_of(self.spi_heads) {
            bail!(Config, "d_ins {} must be a positive multiple of spi_heads {}", self.d_ins, self.spi_heads);
        }
        if !(self.context_init_std.is_finite() && self.context_init_std >= 0.0) {
            bail!(Config, "context_init_std must be finite and non-negative");
        }
        Ok(())
    }
}

/// Decoder layer: self-attention over the queries, cross-attention into the
/// memory, feed-forward; pre-norm residuals.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub mlp: Mlp,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), dim, heads, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), dim, heads, rng),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), dim),
            mlp: Mlp::new(store, &format!("{name}.mlp"), (dim, 2 * dim, dim), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, memory: Var) -> Var {
        let h = self.ln1.forward(g, x);
        let a = self.self_attn.forward(g, h, h, false);
        let x = g.add(x, a);
        let h = self.ln2.forward(g, x);
        let c = self.cross_attn.forward(g, h, memory, false);
        let x = g.add(x, c);
        let h = self.ln3.forward(g, x);
        let m = self.mlp.forward(g, h);
        g.add(x, m)
    }
}

/// Spatial prior integration: `P_V = SPI(C_ins, C_GSP)`.
#[derive(Clone, Debug)]
pub struct SpatialPriorIntegration {
    /// `C_ins = MLP(concat(b, s, e))`.
    pub instance_mlp: Mlp,
    /// Projects spatial-pattern centers to `d_ins`.
    pub gsp_proj: Linear,
    pub layers: Vec<DecoderLayer>,
    pub d_ins: usize,
    pub prior_dim: usize,
}

impl SpatialPriorIntegration {
    pub fn new(store: &mut ParamStore, cfg: &PromptConfig, prior_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_ins;
        Self {
            instance_mlp: Mlp::new(store, "prompts.cins", (prior_dim, d, d), rng),
            gsp_proj: Linear::new(store, "prompts.gsp_proj", SPATIAL_DIM, d, true, rng),
            layers: (0..cfg.spi_layers).map(|i| DecoderLayer::new(store, &format!("prompts.spi.{i}"), d, cfg.spi_heads, rng)).collect(),
            d_ins: d,
            prior_dim,
        }
    }

    /// `prior` is `N_ins × prior_dim`, `centers` is `K × 16`. Returns the
    /// `N_ins × d_ins` prompt (possibly empty).
    pub fn forward(&self, g: &mut Graph<'_>, prior: &Matrix, centers: &Matrix) -> Result<Var> {
        if prior.cols() != self.prior_dim {
            bail!(Validation, "instance prior has width {}, expected {}", prior.cols(), self.prior_dim);
        }
        if centers.cols() != SPATIAL_DIM || centers.rows() == 0 {
            bail!(Validation, "spatial patterns must be K×{SPATIAL_DIM} with K ≥ 1");
        }
        if prior.rows() == 0 {
            return Ok(g.constant(Matrix::zeros(0, self.d_ins)));
        }
        let p = g.constant(prior.clone());
        let mut x = self.instance_mlp.forward(g, p);
        let c = g.constant(centers.clone());
        let mem = self.gsp_proj.forward(g, c);
        for layer in &self.layers {
            x = layer.forward(g, x, mem);
        }
        Ok(x)
    }
}

/// Cross-attention adapter adding prompt context to a block's tokens.
#[derive(Clone, Debug)]
pub struct PromptInjector {
    pub down: Mlp,
    pub attn: MultiHeadAttention,
    /// Output layer starts at zero.
    pub up: Mlp,
    pub width: usize,
    pub d_ins: usize,
}

impl PromptInjector {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, cfg: &PromptConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.d_ins;
        Self {
            down: Mlp::new(store, &format!("{name}.down"), (width, d, d), rng),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), d, cfg.spi_heads, rng),
            up: Mlp::zero_output(store, &format!("{name}.up"), (d, d, width), rng),
            width,
            d_ins: d,
        }
    }

    /// `X + MLP_up(Attn(MLP_down(X), P_V, P_V))`; identity for an empty
    /// prompt.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, prompts: Var) -> Result<Var> {
        let (_, xc) = g.shape(x);
        let (pr, pc) = g.shape(prompts);
        if xc != self.width || pc != self.d_ins {
            bail!(Validation, "injection expects width {} and d_ins {}, got {xc} and {pc}", self.width, self.d_ins);
        }
        if pr == 0 {
            return Ok(x);
        }
        let q = self.down.forward(g, x);
        let a = self.attn.forward(g, q, prompts, false);
        let u = self.up.forward(g, a);
        Ok(g.add(x, u))
    }
}

/// Shared learnable context vectors `P_L` (`S × text width`).
#[derive(Clone, Debug)]
pub struct LanguagePrompt {
    pub context: ParamId,
    pub length: usize,
}

impl LanguagePrompt {
    pub fn new(store: &mut ParamStore, cfg: &PromptConfig, text_width: usize, rng: &mut ChaCha8Rng) -> Self {
        let m = gaussian(rng, cfg.context_length, text_width, cfg.context_init_std);
        Self { context: store.add("prompts.context", m, true), length: cfg.context_length }
    }
}

/// `W_L`: one l2-normalized prototype per class template, each encoded with
/// the context vectors in prefix position. With `prompt = None` this is
/// `W_hum`.
pub fn build_classifier(g: &mut Graph<'_>, text: &TextEncoder, prompt: Option<&LanguagePrompt>, templates: &[Vec<u32>]) -> Result<Var> {
    if templates.is_empty() {
        bail!(Validation, "classifier needs at least one class template");
    }
    let ctx = prompt.filter(|p| p.length > 0).map(|p| g.param(p.context));
    let mut rows = Vec::with_capacity(templates.len());
    for t in templates {
        let e = match ctx {
            Some(c) => text.encode(g, &[TextPart::Soft(c), TextPart::Tokens(t)])?,
            None => text.encode(g, &[TextPart::Tokens(t)])?,
        };
        rows.push(e);
    }
    let w = g.concat_rows(&rows);
    Ok(g.l2_normalize(w, NORM_EPS))
}

/// Prompt-free prototypes, evaluated once.
pub fn human_prior_classifier(store: &ParamStore, text: &TextEncoder, templates: &[Vec<u32>]) -> Result<Matrix> {
    let mut g = Graph::no_grad(store);
    let w = build_classifier(&mut g, text, None, templates)?;
    Ok(g.value(w).clone())
}

/// `L_cc = −Σ_i log softmax_j(W_L^i · W_hum^j)[i]` on a graph; rows are
/// assumed unit-norm so the products are cosines.
pub fn consistency_loss(g: &mut Graph<'_>, w_l: Var, w_hum: Var) -> Result<Var> {
    if g.shape(w_l) != g.shape(w_hum) {
        bail!(Validation, "consistency loss shapes differ: {:?} vs {:?}", g.shape(w_l), g.shape(w_hum));
    }
    let cos = g.matmul_nt(w_l, w_hum);
    let targets: Vec<usize> = (0..g.shape(w_l).0).collect();
    Ok(g.cross_entropy(cos, &targets))
}

/// Plain evaluation of the consistency loss with explicit cosines.
pub fn consistency_loss_value(w_l: &Matrix, w_hum: &Matrix) -> Result<f64> {
    if w_l.shape() != w_hum.shape() {
        bail!(Validation, "consistency loss shapes differ: {:?} vs {:?}", w_l.shape(), w_hum.shape());
    }
    let n = w_l.rows();
    let mut total = 0.0;
    for i in 0..n {
        let cos: Vec<f64> = (0..n).map(|j| dot(w_l.row(i), w_hum.row(j)) / (norm(w_l.row(i)) * norm(w_hum.row(j))).max(NORM_EPS)).collect();
        let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(cos.iter().map(|c| libm::exp(c - max)).sum::<f64>());
        total += lse - cos[i];
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{TextEncoderConfig, Vocab};
    use crate::nn::TransformerBlock;
    use crate::rng::seeded;
    use proptest::prelude::*;

    fn cfg() -> PromptConfig {
        PromptConfig { d_ins: 4, spi_layers: 2, spi_heads: 2, context_length: 3, context_init_std: 0.02 }
    }

    #[test]
    fn consistency_identities() {
        let one = Matrix::from_rows(&[vec![0.6, 0.8]]);
        assert_eq!(consistency_loss_value(&one, &one).unwrap(), 0.0);
        for a in [2usize, 5, 117] {
            let eye = Matrix::identity(a);
            let want = a as f64 * libm::log(1.0 + (a as f64 - 1.0) * libm::exp(-1.0));
            assert!((consistency_loss_value(&eye, &eye).unwrap() - want).abs() < 1e-9);
            let mut g = Graph::detached();
            let w = g.constant(eye.clone());
            let l = consistency_loss(&mut g, w, w).unwrap();
            assert!((g.value(l).item() - want).abs() < 1e-9);
        }
        assert!((2.0 * libm::log(1.0 + libm::exp(-1.0)) - 0.6265).abs() < 1e-4);
        assert!(consistency_loss_value(&Matrix::zeros(2, 3), &Matrix::zeros(3, 3)).is_err());
    }

    proptest! {
        #[test]
        fn consistency_loss_is_positive(a in 2usize..6, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let wl = gaussian(&mut rng, a, 5, 1.0);
            let wh = gaussian(&mut rng, a, 5, 1.0);
            prop_assert!(consistency_loss_value(&wl, &wh).unwrap() > 0.0);
        }
    }

    #[test]
    fn empty_prompt_is_identity_and_zero_up_is_identity() {
        let mut store = ParamStore::new();
        let mut rng = seeded(1);
        let inj = PromptInjector::new(&mut store, "inj", 6, &cfg(), &mut rng);
        let mut g = Graph::no_grad(&store);
        let x = g.constant(gaussian(&mut rng, 5, 6, 1.0));
        let empty = g.constant(Matrix::zeros(0, 4));
        let y = inj.forward(&mut g, x, empty).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let p = g.constant(gaussian(&mut rng, 3, 4, 1.0));
        let y = inj.forward(&mut g, x, p).unwrap();
        assert_eq!(g.value(y), g.value(x));
        let bad = g.constant(Matrix::zeros(2, 5));
        assert!(inj.forward(&mut g, x, bad).is_err());
    }

    fn set(store: &mut ParamStore, lin: &Linear, w: Matrix) {
        *store.get_mut(lin.weight) = w;
        if let Some(b) = lin.bias {
            let c = store.get(b).cols();
            *store.get_mut(b) = Matrix::zeros(1, c);
        }
    }

    #[test]
    fn single_key_injection_matches_closed_form() {
        // identity down/attention maps: one key means attention weight 1,
        // so the update is MLP_up(P_V row)
        let mut store = ParamStore::new();
        let mut rng = seeded(2);
        let c = PromptConfig { d_ins: 3, spi_heads: 1, ..cfg() };
        let inj = PromptInjector::new(&mut store, "inj", 3, &c, &mut rng);
        for lin in [&inj.down.fc1, &inj.down.fc2, &inj.attn.q, &inj.attn.k, &inj.attn.v, &inj.attn.out] {
            set(&mut store, lin, Matrix::identity(3));
        }
        let up1 = gaussian(&mut rng, 3, 3, 1.0);
        let up2 = gaussian(&mut rng, 3, 3, 1.0);
        set(&mut store, &inj.up.fc1, up1.clone());
        set(&mut store, &inj.up.fc2, up2.clone());
        let x = Matrix::from_rows(&[vec![0.3, -1.0, 2.0]]);
        let p = Matrix::from_rows(&[vec![1.5, 0.5, -0.5]]);
        let mut g = Graph::no_grad(&store);
        let xv = g.constant(x.clone());
        let pv = g.constant(p.clone());
        let y = inj.forward(&mut g, xv, pv).unwrap();
        let gelu = |v: f64| 0.5 * v * (1.0 + libm::tanh(0.797_884_560_802_865_4 * (v + 0.044715 * v * v * v)));
        let h = p.matmul(&up1).map(gelu).matmul(&up2);
        for k in 0..3 {
            assert!((g.value(y).get(0, k) - (x.get(0, k) + h.get(0, k))).abs() < 1e-12);
        }
    }

    #[test]
    fn spi_shapes_and_single_center_oracle() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3);
        let spi = SpatialPriorIntegration::new(&mut store, &cfg(), 7, &mut rng);
        let centers = gaussian(&mut rng, 5, SPATIAL_DIM, 1.0);
        let mut g = Graph::no_grad(&store);
        for n in [0usize, 1, 4] {
            let v = spi.forward(&mut g, &gaussian(&mut rng, n, 7, 1.0), &centers).unwrap();
            assert_eq!(g.shape(v), (n, 4));
        }
        assert!(spi.forward(&mut g, &Matrix::zeros(1, 6), &centers).is_err());

        // one layer, one instance, one center: both attentions see a single
        // key, so each reduces to out(v(.)) of its memory row
        let c = PromptConfig { spi_layers: 1, spi_heads: 1, ..cfg() };
        let mut store = ParamStore::new();
        let spi = SpatialPriorIntegration::new(&mut store, &c, 7, &mut rng);
        let l = &spi.layers[0];
        for lin in [
            &l.self_attn.q,
            &l.self_attn.k,
            &l.self_attn.v,
            &l.self_attn.out,
            &l.cross_attn.q,
            &l.cross_attn.k,
            &l.cross_attn.v,
            &l.cross_attn.out,
        ] {
            set(&mut store, lin, Matrix::identity(4));
        }
        let prior = gaussian(&mut rng, 1, 7, 1.0);
        let center = gaussian(&mut rng, 1, SPATIAL_DIM, 1.0);
        let mut g = Graph::no_grad(&store);
        let out = spi.forward(&mut g, &prior, &center).unwrap();
        let got = g.value(out).clone();

        let mut h = Graph::no_grad(&store);
        let pv = h.constant(prior);
        let cins = spi.instance_mlp.forward(&mut h, pv);
        let cv = h.constant(center);
        let mem = spi.gsp_proj.forward(&mut h, cv);
        let ln = |h: &mut Graph<'_>, x: Var| h.layer_norm(x, 1e-5);
        let x1 = ln(&mut h, cins);
        let x = h.add(cins, x1); // self-attention over one key returns its (identity-mapped) normed input
        let mem_v = h.value(mem).clone();
        let xm = h.constant(mem_v);
        let x = h.add(x, xm);
        let n3 = ln(&mut h, x);
        let m = l.mlp.forward(&mut h, n3);
        let want = h.add(x, m);
        assert!(got.max_abs_diff(h.value(want)) < 1e-12);
    }

    fn text_fixture() -> (ParamStore, TextEncoder, Vec<Vec<u32>>, LanguagePrompt) {
        let vocab = Vocab::from_texts(["a photo of a person riding holding kicking an object"]);
        let mut store = ParamStore::new();
        let mut rng = seeded(4);
        let tc = TextEncoderConfig { width: 8, blocks: 1, heads: 2, mlp_ratio: 2, context_length: 16 };
        let text = TextEncoder::new(&mut store, tc, vocab.len(), 6, &mut rng).unwrap();
        let templates = ["riding", "holding", "kicking"]
            .iter()
            .map(|v| vocab.tokenize(&format!("a photo of a person {v} an object")).unwrap())
            .collect();
        let lp = LanguagePrompt::new(&mut store, &cfg(), 8, &mut rng);
        (store, text, templates, lp)
    }

    #[test]
    fn classifier_rows_are_unit_and_empty_prompt_gives_w_hum() {
        let (mut store, text, templates, lp) = text_fixture();
        let w_hum = human_prior_classifier(&store, &text, &templates).unwrap();
        let mut g = Graph::no_grad(&store);
        let w = build_classifier(&mut g, &text, Some(&lp), &templates).unwrap();
        for m in [g.value(w), &w_hum] {
            assert_eq!(m.shape(), (3, 6));
            for r in 0..3 {
                assert!((norm(m.row(r)) - 1.0).abs() < 1e-6);
            }
        }
        assert_ne!(g.value(w), &w_hum);
        let empty = LanguagePrompt { context: store.add("empty", Matrix::zeros(0, 8), true), length: 0 };
        let mut g = Graph::no_grad(&store);
        let w = build_classifier(&mut g, &text, Some(&empty), &templates).unwrap();
        assert_eq!(g.value(w), &w_hum);
        let long = vec![2u32; 14];
        assert!(build_classifier(&mut g, &text, Some(&lp), &[long]).is_err());
    }

    #[test]
    fn consistency_gradient_wrt_context() {
        let (mut store, text, templates, lp) = text_fixture();
        store.set_trainable_prefix("text.", false);
        let w_hum = human_prior_classifier(&store, &text, &templates).unwrap();
        let eval = |store: &ParamStore| {
            let mut g = Graph::new(store);
            let w = build_classifier(&mut g, &text, Some(&lp), &templates).unwrap();
            let h = g.constant(w_hum.clone());
            let l = consistency_loss(&mut g, w, h).unwrap();
            (g.value(l).item(), g.backward(l))
        };
        let (_, grads) = eval(&store);
        let gctx = grads.get(lp.context).unwrap().clone();
        assert!(grads.get(text.token_embedding).is_none());
        for k in 0..gctx.len() {
            let orig = store.get(lp.context).data()[k];
            let h = 1e-6;
            store.get_mut(lp.context).data_mut()[k] = orig + h;
            let up = eval(&store).0;
            store.get_mut(lp.context).data_mut()[k] = orig - h;
            let dn = eval(&store).0;
            store.get_mut(lp.context).data_mut()[k] = orig;
            let num = (up - dn) / (2.0 * h);
            let rel = (num - gctx.data()[k]).abs() / num.abs().max(gctx.data()[k].abs()).max(1e-7);
            assert!(rel < 1e-4, "component {k}: {num} vs {}", gctx.data()[k]);
        }
    }

    #[test]
    fn injection_after_block_preserves_shape() {
        let mut store = ParamStore::new();
        let mut rng = seeded(5);
        let block = TransformerBlock::new(&mut store, "b", 6, 2, 2, &mut rng);
        let inj = PromptInjector::new(&mut store, "inj", 6, &cfg(), &mut rng);
        let mut g = Graph::no_grad(&store);
        let x = g.constant(gaussian(&mut rng, 4, 6, 1.0));
        let y = block.forward(&mut g, x, false);
        let p = g.constant(gaussian(&mut rng, 2, 4, 1.0));
        let z = inj.forward(&mut g, y, p).unwrap();
        assert_eq!(g.shape(z), (4, 6));
    }
}
