//! Prompt training: focal interaction loss on seen verbs plus the
//! language-consistency term, optimized with AdamW on a cosine schedule.

use alloc::vec::Vec;

use crate::autograd::{Grads, Graph, Var};
use crate::error::{bail, Result};
use crate::head::{pair_targets, scaled_logits, DEFAULT_ALPHA_F, DEFAULT_GAMMA, DEFAULT_LAMBDA_CC};
use crate::linalg::Matrix;
use crate::model::{CmmpModel, ImageOperands, Sample};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::prompts::consistency_loss;
use crate::rng::{shuffle, substream};

/// Verbs whose prototypes enter the consistency term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CcScope {
    Seen,
    All,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Images per step.
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub warmup_steps: usize,
    pub lambda_cc: f64,
    pub gamma: f64,
    pub alpha_f: f64,
    pub cc_scope: CcScope,
    /// IoU above which a detected pair inherits an annotated verb.
    pub target_iou: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            optimizer: AdamWConfig { lr: 1e-3, weight_decay: 1e-4, ..AdamWConfig::default() },
            warmup_steps: 0,
            lambda_cc: DEFAULT_LAMBDA_CC,
            gamma: DEFAULT_GAMMA,
            alpha_f: DEFAULT_ALPHA_F,
            cc_scope: CcScope::Seen,
            target_iou: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lambda_cc.is_finite() && self.lambda_cc >= 0.0) {
            bail!(Config, "λ_cc must be finite and non-negative, got {}", self.lambda_cc);
        }
        if !(self.gamma >= 0.0 && (0.0..=1.0).contains(&self.alpha_f)) {
            bail!(Config, "focal parameters out of range: γ={}, α={}", self.gamma, self.alpha_f);
        }
        if !(self.optimizer.lr.is_finite() && self.optimizer.lr > 0.0) {
            bail!(Config, "learning rate must be positive, got {}", self.optimizer.lr);
        }
        Ok(())
    }
}

/// A training image with its multi-hot verb targets (`P × A`).
#[derive(Clone, Debug)]
pub struct TrainingImage {
    pub ops: ImageOperands,
    pub targets: Matrix,
}

/// Operands and targets of every sample that has both an annotated
/// interaction and at least one detected human-object pair.
pub fn prepare_training(model: &CmmpModel, samples: &[Sample], target_iou: f64) -> Result<Vec<TrainingImage>> {
    let a = model.inventory.num_verbs();
    let mut out = Vec::new();
    for s in samples {
        if s.annotation.hoi.is_empty() {
            continue;
        }
        if let Some(ops) = model.operands(&s.image, &s.detections)? {
            let targets = pair_targets(&ops.pairs, &s.annotation, a, target_iou);
            out.push(TrainingImage { ops, targets });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub l_cls: f64,
    pub l_cc: f64,
    pub total: f64,
}

fn select_cols(m: &Matrix, cols: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), cols.len());
    for r in 0..m.rows() {
        for (j, &c) in cols.iter().enumerate() {
            out.set(r, j, m.get(r, c));
        }
    }
    out
}

fn check_verbs(seen_verbs: &[usize], num_verbs: usize) -> Result<()> {
    if seen_verbs.is_empty() {
        bail!(Config, "training needs at least one seen verb");
    }
    let mut sorted = seen_verbs.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != seen_verbs.len() || sorted.last().is_some_and(|&v| v >= num_verbs) {
        bail!(Config, "seen verbs must be distinct and below {num_verbs}");
    }
    Ok(())
}

/// Loss of one batch on `g`: focal loss summed over seen verbs and pairs,
/// divided by the batch's pair count, plus `λ_cc · L_cc`.
pub fn batch_objective(
    model: &CmmpModel,
    g: &mut Graph<'_>,
    batch: &[&TrainingImage],
    seen_verbs: &[usize],
    cfg: &TrainConfig,
) -> Result<(Var, LossParts)> {
    check_verbs(seen_verbs, model.inventory.num_verbs())?;
    let pairs: usize = batch.iter().map(|t| t.ops.pairs.len()).sum();
    if pairs == 0 {
        bail!(Validation, "training batch has no human-object pairs");
    }
    let w_all = model.classifier(g)?;
    let w_seen = g.gather_rows(w_all, seen_verbs);
    let mut terms = Vec::with_capacity(batch.len());
    for t in batch {
        let s = model.interaction_logits(g, &t.ops, w_seen)?;
        let z = scaled_logits(g, s, &model.fusion);
        let targets = select_cols(&t.targets, seen_verbs);
        terms.push(g.focal_loss(z, &targets, cfg.gamma, cfg.alpha_f));
    }
    let stacked = g.concat_rows(&terms);
    let summed = g.sum(stacked);
    let l_cls = g.scale(summed, 1.0 / pairs as f64);
    let all: Vec<usize>;
    let rows = match cfg.cc_scope {
        CcScope::Seen => seen_verbs,
        CcScope::All => {
            all = (0..model.inventory.num_verbs()).collect();
            &all
        }
    };
    let w_l = g.gather_rows(w_all, rows);
    let w_hum = g.constant(model.w_hum.select_rows(rows));
    let l_cc = consistency_loss(g, w_l, w_hum)?;
    let weighted = g.scale(l_cc, cfg.lambda_cc);
    let total = g.add(l_cls, weighted);
    let parts = LossParts { l_cls: g.value(l_cls).item(), l_cc: g.value(l_cc).item(), total: g.value(total).item() };
    Ok((total, parts))
}

pub fn loss_and_grads(model: &CmmpModel, batch: &[&TrainingImage], seen_verbs: &[usize], cfg: &TrainConfig) -> Result<(LossParts, Grads)> {
    let mut g = Graph::new(&model.store);
    let (total, parts) = batch_objective(model, &mut g, batch, seen_verbs, cfg)?;
    Ok((parts, g.backward(total)))
}

pub fn batch_loss(model: &CmmpModel, batch: &[&TrainingImage], seen_verbs: &[usize], cfg: &TrainConfig) -> Result<LossParts> {
    let mut g = Graph::no_grad(&model.store);
    Ok(batch_objective(model, &mut g, batch, seen_verbs, cfg)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossParts,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
}

/// Trains the model's prompt and head parameters in place. `on_step` sees
/// every step after its update.
pub fn train(
    model: &mut CmmpModel,
    data: &[TrainingImage],
    seen_verbs: &[usize],
    cfg: &TrainConfig,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_verbs(seen_verbs, model.inventory.num_verbs())?;
    if data.is_empty() {
        bail!(Config, "no training image has both a seen interaction and a detected pair");
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut opt = AdamW::new(cfg.optimizer.clone(), &model.store);
    let mut rng = substream(cfg.seed, 21);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        shuffle(&mut rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TrainingImage> = chunk.iter().map(|&i| &data[i]).collect();
            let (parts, grads) = loss_and_grads(model, &batch, seen_verbs, cfg)?;
            let step = log.steps.len();
            if !parts.total.is_finite() || !grads.global_norm().is_finite() {
                bail!(Numerical, "training loss became {} at epoch {epoch}, step {step}", parts.total);
            }
            let lr = cosine_lr(cfg.optimizer.lr, step, total, cfg.warmup_steps);
            opt.step(&mut model.store, &grads, lr);
            let entry = StepLog { epoch, step, lr, loss: parts };
            on_step(&entry);
            log.steps.push(entry);
        }
    }
    Ok(log)
}
