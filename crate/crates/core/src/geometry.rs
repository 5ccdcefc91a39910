//! Box arithmetic, anchor grids, regression deltas and non-maximum suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default clamp for the log-space `dw`/`dh` components at decode time.
pub const DEFAULT_DELTA_CLAMP: f64 = 2.772_588_722_239_781; // ln(16)

/// Axis-aligned box in corner form, pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = BBox { x_min, y_min, x_max, y_max };
        if !b.is_valid() {
            return Err(Error::InvalidBox(format!("{b:?}")));
        }
        Ok(b)
    }

    /// Builds a box from `(x, y, w, h)` as used by the annotation format.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Self::new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        self.x_min.is_finite()
            && self.y_min.is_finite()
            && self.x_max.is_finite()
            && self.y_max.is_finite()
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    /// Clips the box to `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> BBox {
        let x_min = self.x_min.clamp(0.0, width);
        let y_min = self.y_min.clamp(0.0, height);
        BBox {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, width),
            y_max: self.y_max.clamp(y_min, height),
        }
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union with continuous areas. Two degenerate boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target relative to an anchor: center offsets scaled by the
/// anchor size, width/height as log ratios.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn new(dx: f64, dy: f64, dw: f64, dh: f64) -> Self {
        BoxDelta { dx, dy, dw, dh }
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(s: &[f64]) -> Self {
        BoxDelta::new(s[0], s[1], s[2], s[3])
    }
}

pub fn encode(anchor: &BBox, target: &BBox) -> Result<BoxDelta> {
    let (wa, ha) = (anchor.width(), anchor.height());
    if !(wa > 0.0 && ha > 0.0) {
        return Err(Error::InvalidBox(format!("anchor without area: {anchor:?}")));
    }
    let (wt, ht) = (target.width(), target.height());
    if !(wt > 0.0 && ht > 0.0) {
        return Err(Error::InvalidBox(format!("target without area: {target:?}")));
    }
    let (cxa, cya) = anchor.center();
    let (cxt, cyt) = target.center();
    Ok(BoxDelta {
        dx: (cxt - cxa) / wa,
        dy: (cyt - cya) / ha,
        dw: (wt / wa).ln(),
        dh: (ht / ha).ln(),
    })
}

pub fn decode(anchor: &BBox, delta: &BoxDelta) -> BBox {
    decode_clamped(anchor, delta, DEFAULT_DELTA_CLAMP)
}

/// Inverse of [`encode`]; `dw` and `dh` are clamped to `max_log_ratio` first.
pub fn decode_clamped(anchor: &BBox, delta: &BoxDelta, max_log_ratio: f64) -> BBox {
    let (wa, ha) = (anchor.width(), anchor.height());
    let (cxa, cya) = anchor.center();
    let cx = cxa + delta.dx * wa;
    let cy = cya + delta.dy * ha;
    let w = wa * delta.dw.min(max_log_ratio).exp();
    let h = ha * delta.dh.min(max_log_ratio).exp();
    BBox {
        x_min: cx - 0.5 * w,
        y_min: cy - 0.5 * h,
        x_max: cx + 0.5 * w,
        y_max: cy + 0.5 * h,
    }
}

/// Anchors tiled over one feature map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorGrid {
    pub h_feat: usize,
    pub w_feat: usize,
    pub stride: f64,
    pub sizes: Vec<f64>,
    pub ratios: Vec<f64>,
    /// Row-major by cell, then size, then ratio.
    pub anchors: Vec<BBox>,
}

impl AnchorGrid {
    pub fn per_cell(&self) -> usize {
        self.sizes.len() * self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Tiles `sizes x ratios` anchors at every cell. A ratio is height/width, so
/// an anchor has width `s / sqrt(r)` and height `s * sqrt(r)`.
pub fn generate_anchors(
    h_feat: usize,
    w_feat: usize,
    stride: f64,
    sizes: &[f64],
    ratios: &[f64],
) -> Result<AnchorGrid> {
    if h_feat == 0 || w_feat == 0 {
        return Err(Error::InvalidConfig("feature map must have at least one cell".into()));
    }
    if !(stride > 0.0 && stride.is_finite()) {
        return Err(Error::InvalidConfig(format!("anchor stride must be positive, got {stride}")));
    }
    if sizes.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidConfig("anchor sizes and ratios must be non-empty".into()));
    }
    if let Some(s) = sizes.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidConfig(format!("anchor size must be positive, got {s}")));
    }
    if let Some(r) = ratios.iter().find(|r| !(**r > 0.0 && r.is_finite())) {
        return Err(Error::InvalidConfig(format!("anchor ratio must be positive, got {r}")));
    }

    let mut anchors = Vec::with_capacity(h_feat * w_feat * sizes.len() * ratios.len());
    for i in 0..h_feat {
        for j in 0..w_feat {
            let cx = (j as f64 + 0.5) * stride;
            let cy = (i as f64 + 0.5) * stride;
            for &s in sizes {
                for &r in ratios {
                    let sr = r.sqrt();
                    let (w, h) = (s / sr, s * sr);
                    anchors.push(BBox {
                        x_min: cx - 0.5 * w,
                        y_min: cy - 0.5 * h,
                        x_max: cx + 0.5 * w,
                        y_max: cy + 0.5 * h,
                    });
                }
            }
        }
    }
    Ok(AnchorGrid {
        h_feat,
        w_feat,
        stride,
        sizes: sizes.to_vec(),
        ratios: ratios.to_vec(),
        anchors,
    })
}

/// Indices sorted by descending score; equal scores keep the lower index first.
pub fn argsort_desc(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in descending score order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = argsort_desc(scores);
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        for &j in &order[pos + 1..] {
            if !suppressed[j] && iou(&boxes[i], &boxes[j]) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BBox {
        BBox::new(x0, y0, x1, y1).unwrap()
    }

    /// Counts unit cells covered by both boxes on an integer grid.
    fn raster_iou(a: &BBox, b: &BBox) -> f64 {
        let inside = |bx: &BBox, x: i64, y: i64| {
            (x as f64) >= bx.x_min
                && (x as f64 + 1.0) <= bx.x_max
                && (y as f64) >= bx.y_min
                && (y as f64 + 1.0) <= bx.y_max
        };
        let (mut inter, mut union) = (0u64, 0u64);
        for y in -20..40 {
            for x in -20..40 {
                let (ia, ib) = (inside(a, x, y), inside(b, x, y));
                if ia && ib {
                    inter += 1;
                }
                if ia || ib {
                    union += 1;
                }
            }
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    #[test]
    fn iou_examples() {
        assert_eq!(iou(&b(0., 0., 4., 4.), &b(0., 0., 4., 4.)), 1.0);
        assert_eq!(iou(&b(0., 0., 1., 1.), &b(5., 5., 6., 6.)), 0.0);
        let a = b(0., 0., 4., 4.);
        let c = b(2., 2., 6., 6.);
        let oracle = raster_iou(&a, &c);
        assert!((oracle - 4.0 / 28.0).abs() < 1e-15);
        assert!((iou(&a, &c) - oracle).abs() < 1e-12);
    }

    #[test]
    fn iou_of_degenerate_boxes_is_zero() {
        let p = b(1., 1., 1., 1.);
        assert_eq!(iou(&p, &p), 0.0);
        assert_eq!(iou(&p, &b(0., 0., 2., 2.)), 0.0);
    }

    #[test]
    fn iou_matches_raster_oracle_on_integer_boxes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..500 {
            let mut gen = || {
                let x0 = rng.gen_range(0..15) as f64;
                let y0 = rng.gen_range(0..15) as f64;
                let w = rng.gen_range(1..12) as f64;
                let h = rng.gen_range(1..12) as f64;
                b(x0, y0, x0 + w, y0 + h)
            };
            let (p, q) = (gen(), gen());
            assert!((iou(&p, &q) - raster_iou(&p, &q)).abs() < 1e-12);
        }
    }

    #[test]
    fn invalid_boxes_rejected() {
        assert!(BBox::new(2., 0., 1., 1.).is_err());
        assert!(BBox::new(0., 0., f64::NAN, 1.).is_err());
    }

    #[test]
    fn anchor_examples() {
        let g = generate_anchors(2, 2, 16.0, &[32.0], &[1.0]).unwrap();
        let centers: Vec<_> = g.anchors.iter().map(|a| a.center()).collect();
        assert_eq!(centers, vec![(8., 8.), (24., 8.), (8., 24.), (24., 24.)]);
        for a in &g.anchors {
            assert_eq!((a.width(), a.height()), (32.0, 32.0));
        }
        let g = generate_anchors(1, 1, 4.0, &[8., 16., 32., 64., 96.], &[0.5, 1., 2.]).unwrap();
        assert_eq!(g.len(), 15);
        // size-major, then ratio
        assert!((g.anchors[3].width() - 16.0 / 0.5f64.sqrt()).abs() < 1e-12);
        assert!((g.anchors[5].height() - 16.0 * 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn anchor_config_errors() {
        assert!(generate_anchors(1, 1, 0.0, &[8.], &[1.]).is_err());
        assert!(generate_anchors(1, 1, 4.0, &[-8.], &[1.]).is_err());
        assert!(generate_anchors(1, 1, 4.0, &[8.], &[0.]).is_err());
        assert!(generate_anchors(0, 1, 4.0, &[8.], &[1.]).is_err());
        assert!(generate_anchors(1, 1, 4.0, &[], &[1.]).is_err());
    }

    #[test]
    fn encode_decode_identity() {
        let a = b(3., 4., 20., 12.);
        assert_eq!(encode(&a, &a).unwrap(), BoxDelta::default());
        assert_eq!(decode(&a, &BoxDelta::default()), a);
        assert!(encode(&a, &b(1., 1., 1., 5.)).is_err());
        assert!(encode(&b(1., 1., 1., 5.), &a).is_err());
    }

    #[test]
    fn decode_clamps_log_ratios() {
        let a = b(0., 0., 10., 10.);
        let big = decode(&a, &BoxDelta::new(0., 0., 100., 100.));
        assert!((big.width() - 160.0).abs() < 1e-9);
        assert!(big.is_valid());
    }

    #[test]
    fn nms_examples() {
        assert_eq!(nms(&[b(0., 0., 1., 1.)], &[0.3], 0.5), vec![0]);
        let x = b(0., 0., 10., 10.);
        assert_eq!(nms(&[x, x], &[0.8, 0.9], 0.5), vec![1]);
        assert!(nms(&[], &[], 0.5).is_empty());
        // equal scores: lower index wins
        assert_eq!(nms(&[x, x], &[0.5, 0.5], 0.5), vec![0]);
    }

    /// Straight-line O(n^2) greedy NMS: scan all remaining boxes for the best.
    pub(crate) fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
        let mut alive: Vec<bool> = vec![true; boxes.len()];
        let mut keep = Vec::new();
        loop {
            let mut best: Option<usize> = None;
            for i in 0..boxes.len() {
                if alive[i] && best.is_none_or(|bi| scores[i] > scores[bi]) {
                    best = Some(i);
                }
            }
            let Some(bi) = best else { break };
            keep.push(bi);
            alive[bi] = false;
            for j in 0..boxes.len() {
                if alive[j] && iou(&boxes[bi], &boxes[j]) > thr {
                    alive[j] = false;
                }
            }
        }
        keep
    }

    #[test]
    fn nms_matches_oracle_on_seeded_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = 50;
            let boxes: Vec<BBox> = (0..n)
                .map(|_| {
                    let x = rng.gen_range(0.0..60.0);
                    let y = rng.gen_range(0.0..60.0);
                    b(x, y, x + rng.gen_range(2.0..30.0), y + rng.gen_range(2.0..30.0))
                })
                .collect();
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..20) as f64) / 20.0).collect();
            assert_eq!(nms(&boxes, &scores, 0.4), nms_oracle(&boxes, &scores, 0.4));
        }
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (-50.0..50.0f64, -50.0..50.0f64, 0.0..40.0f64, 0.0..40.0f64)
            .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_bounded(a in arb_box(), c in arb_box()) {
            let v = iou(&a, &c);
            prop_assert_eq!(v, iou(&c, &a));
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn iou_self_is_one(a in arb_box()) {
            prop_assume!(a.area() > 0.0);
            prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn encode_decode_round_trip(a in arb_box(), t in arb_box()) {
            prop_assume!(a.width() > 0.5 && a.height() > 0.5 && t.width() > 0.5 && t.height() > 0.5);
            let d = encode(&a, &t).unwrap();
            prop_assume!(d.dw <= DEFAULT_DELTA_CLAMP && d.dh <= DEFAULT_DELTA_CLAMP);
            let r = decode(&a, &d);
            prop_assert!((r.x_min - t.x_min).abs() < 1e-9);
            prop_assert!((r.y_min - t.y_min).abs() < 1e-9);
            prop_assert!((r.x_max - t.x_max).abs() < 1e-9);
            prop_assert!((r.y_max - t.y_max).abs() < 1e-9);
        }

        #[test]
        fn anchor_count(h in 1usize..6, w in 1usize..6, ns in 1usize..6, nr in 1usize..4) {
            let sizes: Vec<f64> = (1..=ns).map(|s| 8.0 * s as f64).collect();
            let ratios: Vec<f64> = (1..=nr).map(|r| 0.5 * r as f64).collect();
            let g = generate_anchors(h, w, 8.0, &sizes, &ratios).unwrap();
            prop_assert_eq!(g.len(), h * w * ns * nr);
        }

        #[test]
        fn nms_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 20;
            let boxes: Vec<BBox> = (0..n).map(|_| {
                let x = rng.gen_range(0.0..40.0);
                let y = rng.gen_range(0.0..40.0);
                b(x, y, x + rng.gen_range(5.0..25.0), y + rng.gen_range(5.0..25.0))
            }).collect();
            // distinct scores
            let scores: Vec<f64> = (0..n).map(|i| (i as f64 + rng.gen_range(0.0..0.5)) / n as f64).collect();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.gen_range(0..=i));
            }
            let pb: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let ps: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let kept: Vec<usize> = nms(&pb, &ps, 0.5).into_iter().map(|k| perm[k]).collect();
            prop_assert_eq!(kept, nms(&boxes, &scores, 0.5));
        }
    }
}
