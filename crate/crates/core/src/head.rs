//! Region pooling, fused interaction logits, final scores and the training
//! objective.

use alloc::vec::Vec;

use crate::autograd::{focal_term, sigmoid, Graph, ParamId, ParamStore, Var};
use crate::error::{bail, Result};
use crate::frontend::{AnnotatedImage, HumanObjectPair};
use crate::geometry::{BBox, ImageSize};
use crate::linalg::Matrix;
use crate::prompts::NORM_EPS;

pub const DEFAULT_ROI_RESOLUTION: usize = 3;
pub const DEFAULT_LAMBDA: f64 = 2.8;
pub const DEFAULT_TAU: f64 = 10.0;
pub const DEFAULT_GAMMA: f64 = 2.0;
pub const DEFAULT_ALPHA_F: f64 = 0.25;
pub const DEFAULT_LAMBDA_CC: f64 = 1.0;

/// Token grid geometry: `grid × grid` tokens, each covering `stride` pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TokenGrid {
    pub grid: usize,
    pub stride: f64,
}

impl TokenGrid {
    pub fn image_size(&self) -> ImageSize {
        let side = libm::round(self.grid as f64 * self.stride) as u32;
        ImageSize { width: side, height: side }
    }
}

fn bilinear_into(w: &mut [f64], grid: usize, y: f64, x: f64, scale: f64) {
    let n = grid as f64;
    if y < -1.0 || y > n || x < -1.0 || x > n {
        return;
    }
    let (mut y, mut x) = (y.max(0.0), x.max(0.0));
    let mut y_lo = libm::floor(y) as usize;
    let mut x_lo = libm::floor(x) as usize;
    let (y_hi, x_hi);
    if y_lo >= grid - 1 {
        y_lo = grid - 1;
        y_hi = grid - 1;
        y = y_lo as f64;
    } else {
        y_hi = y_lo + 1;
    }
    if x_lo >= grid - 1 {
        x_lo = grid - 1;
        x_hi = grid - 1;
        x = x_lo as f64;
    } else {
        x_hi = x_lo + 1;
    }
    let (ly, lx) = (y - y_lo as f64, x - x_lo as f64);
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    w[y_lo * grid + x_lo] += scale * hy * hx;
    w[y_lo * grid + x_hi] += scale * hy * lx;
    w[y_hi * grid + x_lo] += scale * ly * hx;
    w[y_hi * grid + x_hi] += scale * ly * lx;
}

/// Mean of an `r × r` bilinear ROI-align (half-pixel aligned, adaptive
/// sampling) expressed as weights over the row-major token grid.
pub fn roi_align_weights(bbox: &BBox, tg: TokenGrid, r: usize) -> Result<Vec<f64>> {
    if r == 0 {
        bail!(Config, "ROI resolution must be positive");
    }
    let b = bbox.clip(tg.image_size()).map_err(|_| crate::Error::Validation("region box is empty after clipping".into()))?;
    let s = 1.0 / tg.stride;
    let (x0, y0) = (b.x1 * s - 0.5, b.y1 * s - 0.5);
    let (rw, rh) = ((b.x2 - b.x1) * s, (b.y2 - b.y1) * s);
    let (bw, bh) = (rw / r as f64, rh / r as f64);
    let (sx, sy) = (libm::ceil(bw).max(1.0) as usize, libm::ceil(bh).max(1.0) as usize);
    let scale = 1.0 / (sx * sy * r * r) as f64;
    let mut w = alloc::vec![0.0; tg.grid * tg.grid];
    for py in 0..r {
        for px in 0..r {
            for iy in 0..sy {
                let y = y0 + py as f64 * bh + (iy as f64 + 0.5) * bh / sy as f64;
                for ix in 0..sx {
                    let x = x0 + px as f64 * bw + (ix as f64 + 0.5) * bw / sx as f64;
                    bilinear_into(&mut w, tg.grid, y, x, scale);
                }
            }
        }
    }
    Ok(w)
}

/// Pooling matrix with rows `[human_0.., object_0.., union_0..]` for `pairs`.
pub fn region_pooling_matrix(pairs: &[HumanObjectPair], tg: TokenGrid, r: usize) -> Result<Matrix> {
    let p = pairs.len();
    let mut m = Matrix::zeros(3 * p, tg.grid * tg.grid);
    for (i, pair) in pairs.iter().enumerate() {
        for (k, b) in [pair.human.bbox, pair.object.bbox, pair.union].iter().enumerate() {
            m.row_mut(k * p + i).copy_from_slice(&roi_align_weights(b, tg, r)?);
        }
    }
    Ok(m)
}

/// `α_hum, α_obj, α_inter` and the logit temperature (stored as `log τ`).
#[derive(Clone, Debug)]
pub struct FusionWeights {
    pub alpha_hum: ParamId,
    pub alpha_obj: ParamId,
    pub alpha_inter: ParamId,
    pub log_tau: ParamId,
}

impl FusionWeights {
    pub fn new(store: &mut ParamStore, tau: f64) -> Self {
        let third = 1.0 / 3.0;
        Self {
            alpha_hum: store.add("head.alpha_hum", Matrix::scalar(third), true),
            alpha_obj: store.add("head.alpha_obj", Matrix::scalar(third), true),
            alpha_inter: store.add("head.alpha_inter", Matrix::scalar(third), true),
            log_tau: store.add("head.log_tau", Matrix::scalar(libm::log(tau)), true),
        }
    }

    pub fn tau(&self, store: &ParamStore) -> f64 {
        libm::exp(store.get(self.log_tau).item())
    }
}

/// Cosine logits `normalize(α_h f_h + α_o f_o + α_u f_u) · W_Lᵀ`.
pub fn pair_logits(g: &mut Graph<'_>, f_hum: Var, f_obj: Var, f_inter: Var, fusion: &FusionWeights, w_l: Var) -> Var {
    let ah = g.param(fusion.alpha_hum);
    let ao = g.param(fusion.alpha_obj);
    let au = g.param(fusion.alpha_inter);
    let h = g.scale_by(f_hum, ah);
    let o = g.scale_by(f_obj, ao);
    let u = g.scale_by(f_inter, au);
    let ho = g.add(h, o);
    let fused = g.add(ho, u);
    let fused = g.l2_normalize(fused, NORM_EPS);
    g.matmul_nt(fused, w_l)
}

/// `τ · s_ho`.
pub fn scaled_logits(g: &mut Graph<'_>, s_ho: Var, fusion: &FusionWeights) -> Var {
    let lt = g.param(fusion.log_tau);
    let tau = g.exp(lt);
    g.scale_by(s_ho, tau)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda.is_finite() && lambda > 1.0) {
        bail!(Config, "suppression exponent λ must be a finite value above 1, got {lambda}");
    }
    Ok(())
}

/// `σ(τ·s_ho) · s_h^λ · s_o^λ` per action.
pub fn final_score(s_ho: &[f64], s_h: f64, s_o: f64, lambda: f64, tau: f64) -> Result<Vec<f64>> {
    check_lambda(lambda)?;
    if !(tau.is_finite() && tau > 0.0) {
        bail!(Config, "temperature must be positive, got {tau}");
    }
    let conf = libm::pow(s_h, lambda) * libm::pow(s_o, lambda);
    Ok(s_ho.iter().map(|&s| sigmoid(tau * s) * conf).collect())
}

/// Binary focal loss summed over classes and averaged over rows.
pub fn focal_loss_value(logits: &Matrix, targets: &Matrix, gamma: f64, alpha: f64) -> f64 {
    let total: f64 = logits.data().iter().zip(targets.data()).map(|(&z, &t)| focal_term(z, t, gamma, alpha)).sum();
    total / logits.rows().max(1) as f64
}

/// `L = L_cls + λ_cc · L_cc`.
pub fn total_loss(l_cls: f64, l_cc: f64, lambda_cc: f64) -> f64 {
    l_cls + lambda_cc * l_cc
}

/// Multi-hot verb targets: a pair gets verb `v` when some annotated
/// interaction with verb `v` overlaps both its boxes above `iou_thresh` and
/// has the same object class.
pub fn pair_targets(pairs: &[HumanObjectPair], gt: &AnnotatedImage, num_verbs: usize, iou_thresh: f64) -> Matrix {
    let mut t = Matrix::zeros(pairs.len(), num_verbs);
    for (i, p) in pairs.iter().enumerate() {
        for h in &gt.hoi {
            let (hb, ob) = (&gt.boxes[h.human], &gt.boxes[h.object]);
            if gt.labels[h.object] == p.object.label
                && p.human.bbox.iou(hb) > iou_thresh
                && p.object.bbox.iou(ob) > iou_thresh
                && h.verb < num_verbs
            {
                t.set(i, h.verb, 1.0);
            }
        }
    }
    t
}
