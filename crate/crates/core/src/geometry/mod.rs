//! Box geometry, pairwise spatial descriptors and the K-means fit of global
//! spatial patterns.

mod kmeans;
mod spatial;

pub use kmeans::{fit_global_spatial_patterns, kmeans, GlobalSpatialPatterns, KMeansFit, MAX_ITERATIONS};
pub use spatial::{pairwise_spatial_features, SpatialFeature, FEATURE_LAYOUT_VERSION, SPATIAL_DIM};

use crate::error::{bail, Result};

/// Axis-aligned box in pixel coordinates, `x1 < x2` and `y1 < y2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = Self { x1, y1, x2, y2 };
        b.validate()?;
        Ok(b)
    }

    pub fn from_array(a: [f64; 4]) -> Result<Self> {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        if !finite || self.x1 >= self.x2 || self.y1 >= self.y2 {
            bail!(InvalidInput, "degenerate box {:?}", self.to_array());
        }
        Ok(())
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Intersection-over-union of two already-valid boxes.
    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        if inter <= 0.0 {
            return 0.0;
        }
        inter / (self.area() + other.area() - inter)
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox { x1: self.x1.min(other.x1), y1: self.y1.min(other.y1), x2: self.x2.max(other.x2), y2: self.y2.max(other.y2) }
    }

    /// Clips to `[0, W] × [0, H]`; errors when nothing of the box remains.
    pub fn clip(&self, img: ImageSize) -> Result<BBox> {
        let (w, h) = (img.width as f64, img.height as f64);
        BBox::new(self.x1.clamp(0.0, w), self.y1.clamp(0.0, h), self.x2.clamp(0.0, w), self.y2.clamp(0.0, h))
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox {
        BBox { x1: self.x1 + dx, y1: self.y1 + dy, x2: self.x2 + dx, y2: self.y2 + dy }
    }

    pub fn scale(&self, s: f64) -> BBox {
        BBox { x1: self.x1 * s, y1: self.y1 * s, x2: self.x2 * s, y2: self.y2 * s }
    }

    /// Coordinates divided by the image extent.
    pub fn normalized(&self, img: ImageSize) -> [f64; 4] {
        let (w, h) = (img.width as f64, img.height as f64);
        [self.x1 / w, self.y1 / h, self.x2 / w, self.y2 / h]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            bail!(InvalidInput, "image size must be positive, got {width}x{height}");
        }
        Ok(Self { width, height })
    }

    pub fn area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    pub fn diagonal(&self) -> f64 {
        libm::hypot(self.width as f64, self.height as f64)
    }
}

/// Intersection-over-union; rejects degenerate boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.validate()?;
    b.validate()?;
    Ok(a.iou(b))
}

/// Smallest box containing both inputs.
pub fn union_box(a: &BBox, b: &BBox) -> Result<BBox> {
    a.validate()?;
    b.validate()?;
    Ok(a.union(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    /// Counts lattice cells of side `step` whose centers fall in each box.
    fn raster_iou(a: &BBox, c: &BBox, step: f64) -> f64 {
        let (mut inter, mut uni) = (0u64, 0u64);
        let x0 = a.x1.min(c.x1);
        let y0 = a.y1.min(c.y1);
        let nx = ((a.x2.max(c.x2) - x0) / step) as usize;
        let ny = ((a.y2.max(c.y2) - y0) / step) as usize;
        let inside = |bb: &BBox, x: f64, y: f64| x > bb.x1 && x < bb.x2 && y > bb.y1 && y < bb.y2;
        for i in 0..nx {
            for j in 0..ny {
                let (x, y) = (x0 + (i as f64 + 0.5) * step, y0 + (j as f64 + 0.5) * step);
                let (ia, ic) = (inside(a, x, y), inside(c, x, y));
                inter += (ia && ic) as u64;
                uni += (ia || ic) as u64;
            }
        }
        inter as f64 / uni as f64
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 2., 2.), &b(0., 0., 2., 2.)).unwrap(), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)).unwrap(), 0.0);
        let oracle = raster_iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.), 0.01);
        assert!((oracle - 1.0 / 7.0).abs() < 1e-9);
        let got = iou(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap();
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn degenerate_boxes_are_rejected() {
        let bad = BBox { x1: 1.0, y1: 0.0, x2: 1.0, y2: 2.0 };
        assert!(iou(&bad, &b(0., 0., 1., 1.)).is_err());
        assert!(union_box(&b(0., 0., 1., 1.), &bad).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 1.0).is_err());
        assert!(ImageSize::new(0, 3).is_err());
    }

    #[test]
    fn union_box_examples() {
        assert_eq!(union_box(&b(0., 0., 2., 2.), &b(1., 1., 3., 3.)).unwrap(), b(0., 0., 3., 3.));
        let outer = b(0., 0., 10., 10.);
        assert_eq!(union_box(&outer, &b(2., 3., 4., 5.)).unwrap(), outer);
        assert_eq!(union_box(&outer, &outer).unwrap(), outer);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0..100.0f64, 0.0..100.0f64, 0.5..50.0f64, 0.5..50.0f64).prop_map(|(x, y, w, h)| BBox { x1: x, y1: y, x2: x + w, y2: y + h })
    }

    proptest! {
        #[test]
        fn iou_is_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let ab = iou(&a, &c).unwrap();
            prop_assert_eq!(ab, iou(&c, &a).unwrap());
            prop_assert!((0.0..=1.0).contains(&ab));
        }

        #[test]
        fn iou_is_scale_invariant(a in arb_box(), c in arb_box(), s in 0.1..10.0f64) {
            let base = iou(&a, &c).unwrap();
            let scaled = iou(&a.scale(s), &c.scale(s)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9);
        }
    }
}
