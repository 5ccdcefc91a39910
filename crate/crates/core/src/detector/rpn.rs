//! Region proposal network: per-anchor objectness and box deltas, proposal
//! selection, and anchor target assignment.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::backbone::FeaturePyramid;
use super::config::{DetectorConfig, LEVEL_STRIDES, NUM_LEVELS};
use crate::error::Result;
use crate::geometry::{argsort_desc, decode_clamped, encode, generate_anchors, iou, nms, AnchorGrid, BBox, BoxDelta};
use crate::nn::loss::sigmoid;
use crate::nn::{Cache, Conv2d, ConvSpec, Layer, Relu, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
}

/// Shared 3x3 conv over every level, then per-level 1x1 predictors.
#[derive(Debug, Clone)]
pub struct RpnHead {
    conv: Conv2d,
    relu: Relu,
    cls: Vec<Conv2d>,
    reg: Vec<Conv2d>,
}

/// Raw per-anchor outputs, concatenated over levels in anchor order.
#[derive(Debug, Clone, PartialEq)]
pub struct RpnOutput {
    pub logits: Vec<f64>,
    pub deltas: Vec<BoxDelta>,
}

impl RpnOutput {
    pub fn objectness(&self) -> Vec<f64> {
        self.logits.iter().map(|l| sigmoid(*l)).collect()
    }
}

pub(crate) struct RpnCache {
    conv: Vec<Cache>,
    relu: Vec<Cache>,
    cls: Vec<Cache>,
    reg: Vec<Cache>,
    hw: Vec<(usize, usize)>,
}

/// Anchor grids for every level of an image of the configured size.
pub fn pyramid_anchors(config: &DetectorConfig, height: usize, width: usize) -> Result<Vec<AnchorGrid>> {
    (0..NUM_LEVELS)
        .map(|l| {
            let s = LEVEL_STRIDES[l];
            generate_anchors(
                height.div_ceil(s),
                width.div_ceil(s),
                s as f64,
                &config.level_sizes(l),
                &config.anchor_ratios,
            )
        })
        .collect()
}

pub fn flatten_anchors(grids: &[AnchorGrid]) -> Vec<BBox> {
    grids.iter().flat_map(|g| g.anchors.iter().copied()).collect()
}

impl RpnHead {
    pub fn new(config: &DetectorConfig, rng: &mut impl Rng) -> Self {
        let conv = Conv2d::new(
            "rpn.conv",
            ConvSpec {
                in_channels: config.pyramid_channels,
                out_channels: config.rpn_hidden,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            rng,
        );
        let one_by_one = |out: usize| ConvSpec {
            in_channels: config.rpn_hidden,
            out_channels: out,
            kernel: 1,
            stride: 1,
            padding: 0,
        };
        let mut cls = Vec::new();
        let mut reg = Vec::new();
        for l in 0..NUM_LEVELS {
            let a = config.anchors_per_cell(l);
            cls.push(Conv2d::new(format!("rpn.cls{l}"), one_by_one(a), rng));
            reg.push(Conv2d::new(format!("rpn.reg{l}"), one_by_one(4 * a), rng));
        }
        RpnHead {
            conv,
            relu: Relu::new("rpn.relu"),
            cls,
            reg,
        }
    }

    pub(crate) fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        std::iter::once(&self.conv).chain(&self.cls).chain(&self.reg)
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        std::iter::once(&mut self.conv).chain(self.cls.iter_mut()).chain(self.reg.iter_mut())
    }

    pub(crate) fn forward(&self, pyramid: &FeaturePyramid) -> Result<(RpnOutput, RpnCache)> {
        let mut out = RpnOutput {
            logits: Vec::new(),
            deltas: Vec::new(),
        };
        let mut cache = RpnCache {
            conv: Vec::new(),
            relu: Vec::new(),
            cls: Vec::new(),
            reg: Vec::new(),
            hw: Vec::new(),
        };
        for (l, level) in pyramid.levels.iter().enumerate() {
            let (h, c) = self.conv.forward(level)?;
            cache.conv.push(c);
            let (h, c) = self.relu.forward(&h)?;
            cache.relu.push(c);
            let (logits, c) = self.cls[l].forward(&h)?;
            cache.cls.push(c);
            let (deltas, c) = self.reg[l].forward(&h)?;
            cache.reg.push(c);

            let (fh, fw) = (logits.shape()[1], logits.shape()[2]);
            let a = logits.shape()[0];
            let plane = fh * fw;
            let (ld, dd) = (logits.data(), deltas.data());
            for cell in 0..plane {
                for k in 0..a {
                    out.logits.push(ld[k * plane + cell]);
                    out.deltas.push(BoxDelta::new(
                        dd[(4 * k) * plane + cell],
                        dd[(4 * k + 1) * plane + cell],
                        dd[(4 * k + 2) * plane + cell],
                        dd[(4 * k + 3) * plane + cell],
                    ));
                }
            }
            cache.hw.push((fh, fw));
        }
        Ok((out, cache))
    }

    /// Returns gradients w.r.t. each pyramid level (when `want_input`) and the
    /// parameter gradients as `(layer name, [weight, bias])`.
    pub(crate) fn backward(
        &self,
        cache: &RpnCache,
        d_logits: &[f64],
        d_deltas: &[[f64; 4]],
        want_input: bool,
    ) -> Result<(Vec<Tensor>, Vec<(String, Vec<Tensor>)>)> {
        let mut level_grads = Vec::new();
        let mut params: Vec<(String, Vec<Tensor>)> = Vec::new();
        let mut conv_grads: Option<Vec<Tensor>> = None;
        let mut offset = 0;
        for l in 0..NUM_LEVELS {
            let (fh, fw) = cache.hw[l];
            let plane = fh * fw;
            let a = self.cls[l].spec().out_channels;
            let mut g_cls = vec![0.0; a * plane];
            let mut g_reg = vec![0.0; 4 * a * plane];
            for cell in 0..plane {
                for k in 0..a {
                    let idx = offset + cell * a + k;
                    g_cls[k * plane + cell] = d_logits[idx];
                    for c in 0..4 {
                        g_reg[(4 * k + c) * plane + cell] = d_deltas[idx][c];
                    }
                }
            }
            offset += plane * a;
            let (mut gh, p_cls) = self.cls[l].backward(&cache.cls[l], &Tensor::new(vec![a, fh, fw], g_cls)?)?;
            let (gh2, p_reg) = self.reg[l].backward(&cache.reg[l], &Tensor::new(vec![4 * a, fh, fw], g_reg)?)?;
            gh.add_assign(&gh2)?;
            params.push((self.cls[l].name().to_string(), p_cls));
            params.push((self.reg[l].name().to_string(), p_reg));
            let (gh, _) = self.relu.backward(&cache.relu[l], &gh)?;
            let (g_level, p_conv) = self.conv.backward_with(&cache.conv[l], &gh, want_input)?;
            match conv_grads.as_mut() {
                None => conv_grads = Some(p_conv),
                Some(acc) => {
                    for (a, b) in acc.iter_mut().zip(&p_conv) {
                        a.add_assign(b)?;
                    }
                }
            }
            level_grads.push(g_level);
        }
        params.push((self.conv.name().to_string(), conv_grads.expect("four levels")));
        Ok((level_grads, params))
    }
}

/// Decode, clip, drop empty boxes, keep the top-K by objectness, NMS, keep the top-N.
pub fn select_proposals(
    anchors: &[BBox],
    output: &RpnOutput,
    image_height: usize,
    image_width: usize,
    config: &DetectorConfig,
) -> Vec<Proposal> {
    let scores = output.objectness();
    let boxes: Vec<BBox> = anchors
        .iter()
        .zip(&output.deltas)
        .map(|(a, d)| decode_clamped(a, d, config.delta_clamp).clip(image_width as f64, image_height as f64))
        .collect();
    let candidates: Vec<usize> = argsort_desc(&scores)
        .into_iter()
        .filter(|&i| boxes[i].area() > 0.0)
        .take(config.rpn_pre_nms_top_k)
        .collect();
    let cand_boxes: Vec<BBox> = candidates.iter().map(|&i| boxes[i]).collect();
    let cand_scores: Vec<f64> = candidates.iter().map(|&i| scores[i]).collect();
    nms(&cand_boxes, &cand_scores, config.rpn_nms_threshold)
        .into_iter()
        .take(config.rpn_post_nms_top_n)
        .map(|k| Proposal {
            bbox: cand_boxes[k],
            objectness: cand_scores[k],
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AnchorLabel {
    Positive { gt: usize, delta: BoxDelta },
    Negative,
    Ignore,
}

/// Labels every anchor: positive at IoU >= `positive_iou` with some ground
/// truth, or when it attains the best IoU for a ground truth; negative below
/// `negative_iou`; ignored otherwise. Positives regress toward their own
/// best-overlapping ground truth.
pub fn assign_rpn_targets(anchors: &[BBox], gt_boxes: &[BBox], positive_iou: f64, negative_iou: f64) -> Vec<AnchorLabel> {
    if gt_boxes.is_empty() {
        return vec![AnchorLabel::Negative; anchors.len()];
    }
    let mut best_iou = vec![0.0f64; anchors.len()];
    let mut best_gt = vec![0usize; anchors.len()];
    let mut gt_best = vec![0.0f64; gt_boxes.len()];
    let mut overlaps = vec![0.0; anchors.len() * gt_boxes.len()];
    for (ai, a) in anchors.iter().enumerate() {
        for (gi, g) in gt_boxes.iter().enumerate() {
            let v = iou(a, g);
            overlaps[ai * gt_boxes.len() + gi] = v;
            if v > best_iou[ai] {
                best_iou[ai] = v;
                best_gt[ai] = gi;
            }
            if v > gt_best[gi] {
                gt_best[gi] = v;
            }
        }
    }
    anchors
        .iter()
        .enumerate()
        .map(|(ai, a)| {
            let row = &overlaps[ai * gt_boxes.len()..(ai + 1) * gt_boxes.len()];
            let is_argmax = row.iter().zip(&gt_best).any(|(v, best)| *best > 0.0 && v == best);
            if best_iou[ai] >= positive_iou || is_argmax {
                let gt = best_gt[ai];
                match encode(a, &gt_boxes[gt]) {
                    Ok(delta) => AnchorLabel::Positive { gt, delta },
                    Err(_) => AnchorLabel::Ignore,
                }
            } else if best_iou[ai] < negative_iou {
                AnchorLabel::Negative
            } else {
                AnchorLabel::Ignore
            }
        })
        .collect()
}

/// Picks at most `max_pos` positive and `max_neg` negative anchors uniformly at
/// random. Returned indices are sorted.
pub fn sample_anchors(labels: &[AnchorLabel], max_pos: usize, max_neg: usize, rng: &mut impl Rng) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], AnchorLabel::Positive { .. }))
        .collect();
    let neg: Vec<usize> = (0..labels.len())
        .filter(|&i| labels[i] == AnchorLabel::Negative)
        .collect();
    let mut out = subsample(&pos, max_pos, rng);
    out.extend(subsample(&neg, max_neg, rng));
    out.sort_unstable();
    out
}

pub(crate) fn subsample(items: &[usize], k: usize, rng: &mut impl Rng) -> Vec<usize> {
    if items.len() <= k {
        return items.to_vec();
    }
    sample(rng, items.len(), k).into_iter().map(|i| items[i]).collect()
}
