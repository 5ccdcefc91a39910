//! Oracles and fixtures shared by the integration tests. Everything here is a
//! deliberately naive restatement of the rule being tested.
#![allow(dead_code)]

use incrdet::detector::DetectorConfig;
use incrdet::geometry::BBox;
use rand::Rng;

/// A detector small enough for coordinate-wise finite differences.
pub fn micro_config() -> DetectorConfig {
    DetectorConfig {
        image_size: 32,
        backbone_channels: [2, 3, 3, 3],
        pyramid_channels: 3,
        rpn_hidden: 3,
        anchor_sizes: vec![8.0, 16.0, 32.0, 64.0],
        anchor_ratios: vec![0.5, 1.0],
        pool_size: 2,
        head_hidden: 5,
        rpn_pre_nms_top_k: 40,
        rpn_post_nms_top_n: 12,
        rpn_positive_samples: 6,
        rpn_negative_samples: 10,
        roi_samples: 8,
        ..DetectorConfig::default()
    }
}

fn overlap(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

pub fn ref_iou(a: &BBox, b: &BBox) -> f64 {
    let inter = overlap(a.x_min, a.x_max, b.x_min, b.x_max) * overlap(a.y_min, a.y_max, b.y_min, b.y_max);
    let area_a = (a.x_max - a.x_min) * (a.y_max - a.y_min);
    let area_b = (b.x_max - b.x_min) * (b.y_max - b.y_min);
    let union = area_a + area_b - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

pub fn random_box(rng: &mut impl Rng, extent: f64) -> BBox {
    let x0 = rng.gen_range(0.0..extent - 2.0);
    let y0 = rng.gen_range(0.0..extent - 2.0);
    let w = rng.gen_range(1.0..(extent - x0).min(extent / 2.0).max(1.5));
    let h = rng.gen_range(1.0..(extent - y0).min(extent / 2.0).max(1.5));
    BBox { x_min: x0, y_min: y0, x_max: x0 + w, y_max: y0 + h }
}

/// Visit boxes from best to worst score (earlier index first on ties) and keep
/// each one that overlaps no kept box by more than the threshold.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..boxes.len()).collect();
    let mut keep = Vec::new();
    while !remaining.is_empty() {
        let mut best = 0;
        for k in 1..remaining.len() {
            if scores[remaining[k]] > scores[remaining[best]] {
                best = k;
            }
        }
        let i = remaining.remove(best);
        if keep.iter().all(|&j: &usize| ref_iou(&boxes[i], &boxes[j]) <= thr) {
            keep.push(i);
        }
    }
    keep
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleLabel {
    Positive { gt: usize, delta: [f64; 4] },
    Negative,
    Ignore,
}

/// Brute-force anchor labelling from the full IoU matrix.
pub fn rpn_assign_oracle(anchors: &[BBox], gts: &[BBox], pos: f64, neg: f64) -> Vec<OracleLabel> {
    let m: Vec<Vec<f64>> = anchors.iter().map(|a| gts.iter().map(|g| ref_iou(a, g)).collect()).collect();
    let col_max: Vec<f64> = (0..gts.len())
        .map(|g| m.iter().map(|row| row[g]).fold(0.0, f64::max))
        .collect();
    (0..anchors.len())
        .map(|a| {
            if gts.is_empty() {
                return OracleLabel::Negative;
            }
            let row = &m[a];
            let mut best = 0;
            for g in 1..gts.len() {
                if row[g] > row[best] {
                    best = g;
                }
            }
            let is_best_for_some_gt = (0..gts.len()).any(|g| col_max[g] > 0.0 && row[g] == col_max[g]);
            if row[best] >= pos || is_best_for_some_gt {
                let (an, gt) = (&anchors[a], &gts[best]);
                let (aw, ah) = (an.x_max - an.x_min, an.y_max - an.y_min);
                let (gw, gh) = (gt.x_max - gt.x_min, gt.y_max - gt.y_min);
                let delta = [
                    ((gt.x_min + gw / 2.0) - (an.x_min + aw / 2.0)) / aw,
                    ((gt.y_min + gh / 2.0) - (an.y_min + ah / 2.0)) / ah,
                    (gw / aw).ln(),
                    (gh / ah).ln(),
                ];
                OracleLabel::Positive { gt: best, delta }
            } else if row[best] < neg {
                OracleLabel::Negative
            } else {
                OracleLabel::Ignore
            }
        })
        .collect()
}

pub struct RefDet {
    pub image: u64,
    pub class: u32,
    pub bbox: BBox,
    pub score: f64,
}

pub struct RefGt {
    pub image: u64,
    pub class: u32,
    pub bbox: BBox,
}

fn in_bucket(area: f64, bucket: &str) -> bool {
    match bucket {
        "all" => true,
        "small" => area < 12.0 * 12.0,
        "medium" => (12.0 * 12.0..32.0 * 32.0).contains(&area),
        "large" => area >= 32.0 * 32.0,
        _ => unreachable!(),
    }
}

/// AP of one class at one IoU threshold and area bucket, from first principles.
/// Returns None when the class has no ground truth in the bucket.
pub fn ref_ap(dets: &[RefDet], gts: &[RefGt], class: u32, thr: f64, bucket: &str) -> Option<f64> {
    let n_gt = gts
        .iter()
        .filter(|g| g.class == class && in_bucket((g.bbox.x_max - g.bbox.x_min) * (g.bbox.y_max - g.bbox.y_min), bucket))
        .count();
    if n_gt == 0 {
        return None;
    }
    let mut images: Vec<u64> = dets.iter().map(|d| d.image).chain(gts.iter().map(|g| g.image)).collect();
    images.sort();
    images.dedup();
    // (score, image, det index, tp)
    let mut ranked: Vec<(f64, u64, usize, bool)> = Vec::new();
    for &img in &images {
        let mut d_idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image == img && dets[i].class == class).collect();
        // insertion sort by descending score keeps equal scores in index order
        for i in 1..d_idx.len() {
            let mut j = i;
            while j > 0 && dets[d_idx[j]].score > dets[d_idx[j - 1]].score {
                d_idx.swap(j, j - 1);
                j -= 1;
            }
        }
        let g_idx: Vec<usize> = (0..gts.len()).filter(|&i| gts[i].image == img && gts[i].class == class).collect();
        let mut used = vec![false; g_idx.len()];
        for &di in &d_idx {
            let mut best_in: Option<(f64, usize)> = None;
            let mut best_out: Option<(f64, usize)> = None;
            for (k, &gi) in g_idx.iter().enumerate() {
                if used[k] {
                    continue;
                }
                let v = ref_iou(&dets[di].bbox, &gts[gi].bbox);
                if v < thr {
                    continue;
                }
                let g = &gts[gi].bbox;
                let slot = if in_bucket((g.x_max - g.x_min) * (g.y_max - g.y_min), bucket) { &mut best_in } else { &mut best_out };
                if slot.is_none() || v > slot.unwrap().0 {
                    *slot = Some((v, k));
                }
            }
            if let Some((_, k)) = best_in {
                used[k] = true;
                ranked.push((dets[di].score, img, di, true));
            } else if let Some((_, k)) = best_out {
                used[k] = true;
            } else {
                ranked.push((dets[di].score, img, di, false));
            }
        }
    }
    ranked.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut points = Vec::new();
    let mut tp = 0.0;
    for (i, r) in ranked.iter().enumerate() {
        if r.3 {
            tp += 1.0;
        }
        points.push((tp / n_gt as f64, tp / (i as f64 + 1.0)));
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let p = points.iter().filter(|(rec, _)| *rec >= r).map(|(_, p)| *p).fold(0.0, f64::max);
        total += p;
    }
    Some(total / 101.0)
}

/// Mean AP in percent over classes (and IoU thresholds) for one table cell.
pub fn ref_cell(dets: &[RefDet], gts: &[RefGt], classes: &[u32], thresholds: &[f64], bucket: &str) -> Option<f64> {
    let mut per_class = Vec::new();
    for &c in classes {
        let aps: Vec<f64> = thresholds.iter().filter_map(|&t| ref_ap(dets, gts, c, t, bucket)).collect();
        if !aps.is_empty() {
            per_class.push(aps.iter().sum::<f64>() / aps.len() as f64);
        }
    }
    if per_class.is_empty() {
        None
    } else {
        Some(100.0 * per_class.iter().sum::<f64>() / per_class.len() as f64)
    }
}

pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// Coordinate-wise central-difference check of the full detection loss.
///
/// A float64 loss of magnitude `L` only resolves differences of a few ULPs,
/// so at step `eps` the numeric derivative carries an absolute error of about
/// `16 * ulp(L) / (2 * eps)`. Entries smaller than `1e4` times that bound
/// cannot reach relative error 1e-4 however exact the backward pass is; such
/// an entry is accepted when analytic and numeric values agree to within the
/// bound. Returns the worst relative error over all other entries and how
/// many entries were below resolution and accepted that way.
pub fn detector_gradcheck(
    d: &mut incrdet::detector::Detector,
    image: &incrdet::nn::Tensor,
    targets: &incrdet::detector::ImageTargets,
    domain: &incrdet::detector::DomainId,
    grads: &incrdet::nn::Gradients,
    eps: f64,
) -> Result<(f64, usize), String> {
    use incrdet::nn::{relative_error, ParameterStore};
    let loss0 = d.detection_loss(image, targets, domain).map_err(|e| e.to_string())?.l_det;
    let ulp = f64::from_bits(loss0.to_bits() + 1) - loss0;
    let resolution = 16.0 * ulp / (2.0 * eps);
    let mut worst: f64 = 0.0;
    let mut unresolved = 0;
    for name in d.param_names() {
        let original = d.snapshot()[&name].data().to_vec();
        let analytic = grads.get(&name).ok_or(format!("no gradient for {name}"))?.data().to_vec();
        let mut probe = original.clone();
        let eval = |d: &mut incrdet::detector::Detector, probe: &[f64]| {
            d.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut().copy_from_slice(probe)
                }
            });
            d.detection_loss(image, targets, domain).map(|l| l.l_det).map_err(|e| e.to_string())
        };
        for i in 0..original.len() {
            probe[i] = original[i] + eps;
            let plus = eval(d, &probe)?;
            probe[i] = original[i] - eps;
            let minus = eval(d, &probe)?;
            probe[i] = original[i];
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            if err < 1e-4 {
                worst = worst.max(err);
            } else if analytic[i].abs().max(numeric.abs()) < 1e4 * resolution
                && (analytic[i] - numeric).abs() <= resolution
            {
                unresolved += 1;
            } else {
                return Err(format!("{name}[{i}]: analytic {:e} numeric {numeric:e} relative error {err:.3e}", analytic[i]));
            }
        }
        eval(d, &original)?;
    }
    Ok((worst, unresolved))
}

/// Moves every bias off zero. Freshly initialized biases are exactly zero, so
/// a conv window over an all-zero input patch sits exactly on a ReLU kink and
/// has no derivative to check.
pub fn jitter_biases(d: &mut incrdet::detector::Detector, seed: u64) {
    use incrdet::nn::ParameterStore;
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    d.visit_mut(&mut |name, t| {
        if name.ends_with("bias") {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
        }
    });
}
