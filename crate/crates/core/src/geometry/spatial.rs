use super::{BBox, ImageSize};
use crate::error::Result;

/// Dimensionality of [`SpatialFeature`].
pub const SPATIAL_DIM: usize = 16;
/// Bumped whenever the component order below changes.
pub const FEATURE_LAYOUT_VERSION: u32 = 1;

const EPS: f64 = 1e-8;

/// Unary and pairwise layout descriptor of a human-object pair.
///
/// | idx | component |
/// |-----|-----------|
/// | 0-3 | human center x/W, center y/H, width/W, height/H |
/// | 4-7 | object center x/W, center y/H, width/W, height/H |
/// | 8 | IoU(human, object) |
/// | 9, 10 | human area, object area, both over W·H |
/// | 11 | log((a_o + ε) / (a_h + ε)) |
/// | 12, 13 | center offset (o − h) over human width, height |
/// | 14 | center distance over the image diagonal |
/// | 15 | aspect(h) − aspect(o), aspect = width / height |
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpatialFeature(pub [f64; SPATIAL_DIM]);

impl SpatialFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn iou(&self) -> f64 {
        self.0[8]
    }

    pub fn log_area_ratio(&self) -> f64 {
        self.0[11]
    }

    pub fn direction(&self) -> (f64, f64) {
        (self.0[12], self.0[13])
    }
}

/// Layout descriptor of `(human, object)`; boxes are clipped to the image
/// first and rejected if nothing remains.
pub fn pairwise_spatial_features(human: &BBox, object: &BBox, img: ImageSize) -> Result<SpatialFeature> {
    let h = human.clip(img)?;
    let o = object.clip(img)?;
    let (w, ht) = (img.width as f64, img.height as f64);
    let (hcx, hcy) = h.center();
    let (ocx, ocy) = o.center();
    let (ah, ao) = (h.area(), o.area());
    let (dx, dy) = (ocx - hcx, ocy - hcy);
    Ok(SpatialFeature([
        hcx / w,
        hcy / ht,
        h.width() / w,
        h.height() / ht,
        ocx / w,
        ocy / ht,
        o.width() / w,
        o.height() / ht,
        h.iou(&o),
        ah / img.area(),
        ao / img.area(),
        libm::log((ao + EPS) / (ah + EPS)),
        dx / h.width(),
        dy / h.height(),
        libm::hypot(dx, dy) / img.diagonal(),
        h.width() / h.height() - o.width() / o.height(),
    ]))
}
