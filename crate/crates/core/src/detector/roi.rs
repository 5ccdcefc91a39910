//! Multi-scale max ROI pooling.

use super::backbone::FeaturePyramid;
use super::config::NUM_LEVELS;
use crate::geometry::BBox;

/// Canonical box side that maps to level 2.
const CANONICAL_SIDE: f64 = 56.0;

/// `clamp(floor(2 + log2(sqrt(w*h) / 56)), 0, 3)`.
pub fn roi_level(bbox: &BBox) -> usize {
    let side = bbox.area().sqrt();
    if side <= 0.0 {
        return 0;
    }
    let k = (2.0 + (side / CANONICAL_SIDE).log2()).floor();
    k.clamp(0.0, (NUM_LEVELS - 1) as f64) as usize
}

/// A proposal pooled to a fixed `C x P x P` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledRoi {
    pub features: Vec<f64>,
    pub level: usize,
    /// Set when the projected box covers no feature cell; features are zero.
    pub degenerate: bool,
    argmax: Vec<usize>,
}

impl PooledRoi {
    /// Flat index into the chosen level's `[C, H, W]` data for every pooled value.
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

fn project(lo: f64, hi: f64, stride: f64, extent: usize) -> (usize, usize) {
    let a = (lo / stride).floor().clamp(0.0, extent as f64) as usize;
    let b = (hi / stride).ceil().clamp(0.0, extent as f64) as usize;
    (a, b.max(a))
}

/// Bin `i` of `bins` over `[start, start + len)`; never empty when `len > 0`.
fn bin_range(start: usize, len: usize, i: usize, bins: usize) -> (usize, usize) {
    let lo = start + (i * len) / bins;
    let hi = start + ((i + 1) * len).div_ceil(bins);
    (lo, hi.max(lo + 1))
}

pub fn roi_pool(pyramid: &FeaturePyramid, proposal: &BBox, pool_size: usize) -> PooledRoi {
    let level = roi_level(proposal);
    let map = &pyramid.levels[level];
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let stride = pyramid.strides[level] as f64;
    let (x0, x1) = project(proposal.x_min, proposal.x_max, stride, w);
    let (y0, y1) = project(proposal.y_min, proposal.y_max, stride, h);
    let n = c * pool_size * pool_size;
    if proposal.area() <= 0.0 || x1 == x0 || y1 == y0 {
        return PooledRoi {
            features: vec![0.0; n],
            level,
            degenerate: true,
            argmax: vec![usize::MAX; n],
        };
    }
    let data = map.data();
    let mut features = Vec::with_capacity(n);
    let mut argmax = Vec::with_capacity(n);
    for ci in 0..c {
        for by in 0..pool_size {
            let (ya, yb) = bin_range(y0, y1 - y0, by, pool_size);
            for bx in 0..pool_size {
                let (xa, xb) = bin_range(x0, x1 - x0, bx, pool_size);
                let mut best = usize::MAX;
                for y in ya..yb {
                    for x in xa..xb {
                        let idx = (ci * h + y) * w + x;
                        if best == usize::MAX || data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                features.push(data[best]);
                argmax.push(best);
            }
        }
    }
    PooledRoi {
        features,
        level,
        degenerate: false,
        argmax,
    }
}

/// Scatters pooled-feature gradients back onto the pyramid gradients.
pub fn roi_pool_backward(roi: &PooledRoi, grad: &[f64], level_grads: &mut [Vec<f64>]) {
    if roi.degenerate {
        return;
    }
    let g = &mut level_grads[roi.level];
    for (&idx, v) in roi.argmax.iter().zip(grad) {
        g[idx] += v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn pyramid_const(value: f64) -> FeaturePyramid {
        FeaturePyramid {
            levels: [32, 16, 8, 4].iter().map(|&s| Tensor::full(&[2, s, s], value)).collect(),
            strides: [4, 8, 16, 32],
            image_height: 128,
            image_width: 128,
        }
    }

    #[test]
    fn level_selection() {
        assert_eq!(roi_level(&BBox::new(0., 0., 128., 128.).unwrap()), 3);
        assert_eq!(roi_level(&BBox::new(10., 10., 18., 18.).unwrap()), 0);
        assert_eq!(roi_level(&BBox::new(0., 0., 32., 32.).unwrap()), 1);
        assert_eq!(roi_level(&BBox::new(0., 0., 64., 64.).unwrap()), 2);
    }

    #[test]
    fn constant_map_pools_to_constant() {
        let p = pyramid_const(1.5);
        for bbox in [BBox::new(3., 5., 40., 22.).unwrap(), BBox::new(0., 0., 128., 128.).unwrap(), BBox::new(60., 60., 61., 61.).unwrap()] {
            let r = roi_pool(&p, &bbox, 4);
            assert!(!r.degenerate);
            assert_eq!(r.features.len(), 2 * 16);
            assert!(r.features.iter().all(|v| *v == 1.5));
        }
    }

    #[test]
    fn degenerate_proposal_is_flagged() {
        let p = pyramid_const(1.0);
        let r = roi_pool(&p, &BBox::new(5., 5., 5., 9.).unwrap(), 4);
        assert!(r.degenerate);
        assert!(r.features.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn bins_are_never_empty() {
        for len in 1..20 {
            for i in 0..4 {
                let (a, b) = bin_range(3, len, i, 4);
                assert!(b > a && b <= 3 + len.max(1));
            }
        }
    }

    #[test]
    fn picks_max_within_bin() {
        let mut p = pyramid_const(0.0);
        // level 0, channel 1, cell (2, 3)
        p.levels[0].data_mut()[32 * 32 + 2 * 32 + 3] = 7.0;
        let r = roi_pool(&p, &BBox::new(0., 0., 16., 16.).unwrap(), 4);
        assert_eq!(r.level, 0);
        // 4x4 cells, one per bin: row 2, col 3
        assert_eq!(r.features[16 + 2 * 4 + 3], 7.0);
        let mut grads = vec![vec![0.0; 2 * 32 * 32], vec![], vec![], vec![]];
        let g = vec![1.0; 32];
        roi_pool_backward(&r, &g, &mut grads);
        assert_eq!(grads[0][32 * 32 + 2 * 32 + 3], 1.0);
    }
}
