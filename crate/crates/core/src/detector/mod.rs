//! Two-stage detector: a shared trunk (backbone + lateral pyramid), a shared
//! region proposal network, and one ROI head per registered domain.
//!
//! Only the head of the requested domain takes part in a forward pass, so a
//! change to one head can never affect another domain's predictions.

pub mod backbone;
pub mod config;
pub mod head;
pub mod roi;
pub mod rpn;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

pub use backbone::FeaturePyramid;
pub use config::{DetectorConfig, LEVEL_STRIDES, NUM_LEVELS};
pub use head::{DomainId, HeadOutput, RoiHead};
pub use roi::{roi_level, roi_pool, PooledRoi};
pub use rpn::{assign_rpn_targets, sample_anchors, select_proposals, AnchorLabel, Proposal, RpnOutput};

use crate::dataset::Category;
use crate::error::{Error, Result};
use crate::geometry::{decode_clamped, encode, iou, nms, BBox, BoxDelta};
use crate::nn::checkpoint::{read_checkpoint, write_checkpoint};
use crate::nn::loss::{sigmoid_bce_with_grad, smooth_l1_with_grad, softmax, softmax_cross_entropy_with_grad};
use crate::nn::{Gradients, Layer, ParameterStore, Tensor};
use backbone::{Backbone, Fpn};
use rpn::RpnHead;

/// A unit of freezing and learning-rate assignment.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Backbone,
    Fpn,
    Rpn,
    Head(String),
}

impl Component {
    pub fn of_param(name: &str) -> Option<Component> {
        let mut parts = name.splitn(3, '.');
        match parts.next()? {
            "backbone" => Some(Component::Backbone),
            "fpn" => Some(Component::Fpn),
            "rpn" => Some(Component::Rpn),
            "head" => parts.next().map(|d| Component::Head(d.to_string())),
            _ => None,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Component::Backbone => f.write_str("backbone"),
            Component::Fpn => f.write_str("fpn"),
            Component::Rpn => f.write_str("rpn"),
            Component::Head(d) => write!(f, "head.{d}"),
        }
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownComponent {
            name: s.to_string(),
            valid: vec!["backbone".into(), "fpn".into(), "rpn".into(), "head.<domain>".into()],
        };
        match s {
            "backbone" => Ok(Component::Backbone),
            "fpn" => Ok(Component::Fpn),
            "rpn" => Ok(Component::Rpn),
            _ => match s.strip_prefix("head.") {
                Some(d) if !d.is_empty() && !d.contains('.') => Ok(Component::Head(d.to_string())),
                _ => Err(unknown()),
            },
        }
    }
}

impl Serialize for Component {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Component {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A ground-truth object in detector terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruth {
    pub bbox: BBox,
    pub category_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: u32,
    pub score: f64,
    pub domain: DomainId,
}

/// `l_det = l_cls + l_reg`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub l_cls: f64,
    pub l_reg: f64,
    pub l_det: f64,
}

impl DetectionLoss {
    pub fn new(l_cls: f64, l_reg: f64) -> Self {
        DetectionLoss {
            l_cls,
            l_reg,
            l_det: l_cls + l_reg,
        }
    }
}

/// Sampled training targets for one image. Holding them fixed makes the loss a
/// smooth function of the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTargets {
    /// Sampled anchor indices with their labels.
    pub rpn: Vec<(usize, AnchorLabel)>,
    pub rois: Vec<BBox>,
    /// Head-local labels, 0 = background.
    pub roi_labels: Vec<usize>,
    pub roi_deltas: Vec<Option<BoxDelta>>,
}

/// Serialized architecture stored inside checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDescription {
    pub architecture: DetectorConfig,
    pub domains: Vec<DomainDescription>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDescription {
    pub name: String,
    pub categories: Vec<Category>,
}

#[derive(Debug, Clone)]
pub struct Detector {
    config: DetectorConfig,
    backbone: Backbone,
    fpn: Fpn,
    rpn: RpnHead,
    heads: Vec<(String, RoiHead)>,
    anchors: Vec<BBox>,
}

struct TrainForward {
    pyramid: FeaturePyramid,
    trunk_cache: backbone::BackboneCache,
    rpn_out: RpnOutput,
    rpn_cache: rpn::RpnCache,
}

impl Detector {
    pub fn new(config: DetectorConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(&config, rng);
        let fpn = Fpn::new(&config, rng);
        let rpn = RpnHead::new(&config, rng);
        let anchors = rpn::flatten_anchors(&rpn::pyramid_anchors(&config, config.image_size, config.image_size)?);
        Ok(Detector {
            config,
            backbone,
            fpn,
            rpn,
            heads: Vec::new(),
            anchors,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    /// Registers a new ROI head. Existing parameters are not touched.
    pub fn add_domain(&mut self, name: &str, categories: Vec<Category>, rng: &mut impl Rng) -> Result<DomainId> {
        if name.is_empty() || name.contains('.') || name.contains('/') {
            return Err(Error::InvalidConfig(format!("invalid domain name `{name}`")));
        }
        if self.heads.iter().any(|(n, _)| n == name) {
            return Err(Error::InvalidConfig(format!("domain `{name}` already registered")));
        }
        if categories.is_empty() {
            return Err(Error::InvalidConfig(format!("domain `{name}` has no categories")));
        }
        let head = RoiHead::new(name, categories, self.config.pooled_len(), self.config.head_hidden, rng);
        self.heads.push((name.to_string(), head));
        Ok(DomainId {
            index: self.heads.len() - 1,
            name: name.to_string(),
        })
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.heads.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn domain(&self, name: &str) -> Result<DomainId> {
        self.heads
            .iter()
            .position(|(n, _)| n == name)
            .map(|index| DomainId {
                index,
                name: name.to_string(),
            })
            .ok_or_else(|| Error::UnknownDomain {
                name: name.to_string(),
                available: self.domain_names(),
            })
    }

    pub fn head(&self, domain: &DomainId) -> Result<&RoiHead> {
        match self.heads.get(domain.index) {
            Some((n, h)) if *n == domain.name => Ok(h),
            _ => Err(Error::UnknownDomain {
                name: domain.name.clone(),
                available: self.domain_names(),
            }),
        }
    }

    /// All components present in this model.
    pub fn components(&self) -> Vec<Component> {
        let mut v = vec![Component::Backbone, Component::Fpn, Component::Rpn];
        v.extend(self.heads.iter().map(|(n, _)| Component::Head(n.clone())));
        v
    }

    pub fn component_params(&self, component: &Component) -> Vec<String> {
        self.param_names()
            .into_iter()
            .filter(|n| Component::of_param(n).as_ref() == Some(component))
            .collect()
    }

    pub fn extract_features(&self, image: &Tensor) -> Result<FeaturePyramid> {
        backbone::forward(&self.config, &self.backbone, &self.fpn, image).map(|(p, _)| p)
    }

    fn anchors_for(&self, pyramid: &FeaturePyramid) -> Result<std::borrow::Cow<'_, [BBox]>> {
        if pyramid.image_height == self.config.image_size && pyramid.image_width == self.config.image_size {
            Ok(std::borrow::Cow::Borrowed(&self.anchors))
        } else {
            let grids = rpn::pyramid_anchors(&self.config, pyramid.image_height, pyramid.image_width)?;
            Ok(std::borrow::Cow::Owned(rpn::flatten_anchors(&grids)))
        }
    }

    /// Raw per-anchor outputs and the selected proposals.
    pub fn rpn_forward(&self, pyramid: &FeaturePyramid) -> Result<(Vec<Proposal>, RpnOutput)> {
        let (out, _) = self.rpn.forward(pyramid)?;
        let anchors = self.anchors_for(pyramid)?;
        let proposals = select_proposals(&anchors, &out, pyramid.image_height, pyramid.image_width, &self.config);
        Ok((proposals, out))
    }

    /// Pools every box and stacks the results as `[N, C*P*P]`.
    pub fn pool_rois(&self, pyramid: &FeaturePyramid, boxes: &[BBox]) -> Result<(Tensor, Vec<PooledRoi>)> {
        let pooled: Vec<PooledRoi> = boxes.iter().map(|b| roi_pool(pyramid, b, self.config.pool_size)).collect();
        let mut data = Vec::with_capacity(boxes.len() * self.config.pooled_len());
        for p in &pooled {
            data.extend_from_slice(&p.features);
        }
        Ok((Tensor::new(vec![boxes.len(), self.config.pooled_len()], data)?, pooled))
    }

    pub fn roi_head_forward(&self, pooled: &Tensor, domain: &DomainId) -> Result<HeadOutput> {
        self.head(domain)?.forward(pooled).map(|(o, _)| o)
    }

    fn forward_train(&self, image: &Tensor) -> Result<TrainForward> {
        let (pyramid, trunk_cache) = backbone::forward(&self.config, &self.backbone, &self.fpn, image)?;
        let (rpn_out, rpn_cache) = self.rpn.forward(&pyramid)?;
        Ok(TrainForward {
            pyramid,
            trunk_cache,
            rpn_out,
            rpn_cache,
        })
    }

    fn gt_labels(&self, head: &RoiHead, gts: &[GroundTruth]) -> Result<Vec<usize>> {
        gts.iter()
            .map(|g| head.label_of(g.category_id).ok_or(Error::UnknownCategory(g.category_id)))
            .collect()
    }

    fn targets_from(
        &self,
        fwd: &TrainForward,
        gts: &[GroundTruth],
        domain: &DomainId,
        rng: &mut impl Rng,
    ) -> Result<ImageTargets> {
        let head = self.head(domain)?;
        let labels = self.gt_labels(head, gts)?;
        let gt_boxes: Vec<BBox> = gts.iter().map(|g| g.bbox).collect();
        let anchors = self.anchors_for(&fwd.pyramid)?;
        let c = &self.config;

        let anchor_labels = assign_rpn_targets(&anchors, &gt_boxes, c.rpn_positive_iou, c.rpn_negative_iou);
        let rpn = sample_anchors(&anchor_labels, c.rpn_positive_samples, c.rpn_negative_samples, rng)
            .into_iter()
            .map(|i| (i, anchor_labels[i]))
            .collect();

        let proposals = select_proposals(&anchors, &fwd.rpn_out, fwd.pyramid.image_height, fwd.pyramid.image_width, c);
        let mut candidates: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        candidates.extend(gt_boxes.iter().filter(|b| b.area() > 0.0));
        let mut cand_label = Vec::with_capacity(candidates.len());
        let mut cand_delta = Vec::with_capacity(candidates.len());
        for cand in &candidates {
            let mut best = (0.0, usize::MAX);
            for (gi, g) in gt_boxes.iter().enumerate() {
                let v = iou(cand, g);
                if v > best.0 {
                    best = (v, gi);
                }
            }
            if best.1 != usize::MAX && best.0 >= c.roi_positive_iou {
                cand_label.push(labels[best.1]);
                cand_delta.push(Some(encode(cand, &gt_boxes[best.1])?));
            } else {
                cand_label.push(0);
                cand_delta.push(None);
            }
        }
        let pos: Vec<usize> = (0..candidates.len()).filter(|&i| cand_label[i] > 0).collect();
        let neg: Vec<usize> = (0..candidates.len()).filter(|&i| cand_label[i] == 0).collect();
        let max_pos = ((c.roi_samples as f64) * c.roi_positive_fraction).round() as usize;
        let mut chosen = rpn::subsample(&pos, max_pos, rng);
        let n_neg = c.roi_samples - chosen.len();
        chosen.extend(rpn::subsample(&neg, n_neg, rng));
        chosen.sort_unstable();
        Ok(ImageTargets {
            rpn,
            rois: chosen.iter().map(|&i| candidates[i]).collect(),
            roi_labels: chosen.iter().map(|&i| cand_label[i]).collect(),
            roi_deltas: chosen.iter().map(|&i| cand_delta[i]).collect(),
        })
    }

    /// Assigns RPN and ROI targets for one image (runs a forward pass to
    /// obtain proposals).
    pub fn prepare_targets(
        &self,
        image: &Tensor,
        gts: &[GroundTruth],
        domain: &DomainId,
        rng: &mut impl Rng,
    ) -> Result<ImageTargets> {
        let fwd = self.forward_train(image)?;
        self.targets_from(&fwd, gts, domain, rng)
    }

    /// Loss under fixed targets; gradients for the parameters of the
    /// components in `trainable` when given.
    fn loss_from(
        &self,
        fwd: &TrainForward,
        targets: &ImageTargets,
        domain: &DomainId,
        trainable: Option<&BTreeSet<Component>>,
    ) -> Result<(DetectionLoss, Option<Gradients>)> {
        let head = self.head(domain)?;
        let beta = self.config.smooth_l1_beta;
        let n_anchors = fwd.rpn_out.logits.len();

        // RPN terms
        let mut d_logits = vec![0.0; n_anchors];
        let mut d_deltas = vec![[0.0; 4]; n_anchors];
        let n_rpn = targets.rpn.len().max(1) as f64;
        let n_rpn_pos = targets
            .rpn
            .iter()
            .filter(|(_, l)| matches!(l, AnchorLabel::Positive { .. }))
            .count();
        let mut rpn_cls = 0.0;
        let mut rpn_reg = 0.0;
        for &(i, label) in &targets.rpn {
            let t = match label {
                AnchorLabel::Positive { .. } => 1.0,
                AnchorLabel::Negative => 0.0,
                AnchorLabel::Ignore => continue,
            };
            let (l, g) = sigmoid_bce_with_grad(fwd.rpn_out.logits[i], t);
            rpn_cls += l / n_rpn;
            d_logits[i] += g / n_rpn;
            if let AnchorLabel::Positive { delta, .. } = label {
                let (l, g) = smooth_l1_with_grad(&fwd.rpn_out.deltas[i], &delta, beta)?;
                let n = n_rpn_pos as f64;
                rpn_reg += l / n;
                for c in 0..4 {
                    d_deltas[i][c] += g[c] / n;
                }
            }
        }

        // ROI head terms
        let (pooled, pooled_rois) = self.pool_rois(&fwd.pyramid, &targets.rois)?;
        let (out, head_cache) = head.forward(&pooled)?;
        let k1 = head.num_classes() + 1;
        let n_roi = targets.rois.len();
        let n_roi_f = n_roi.max(1) as f64;
        let n_roi_pos = targets.roi_labels.iter().filter(|l| **l > 0).count() as f64;
        let mut head_cls = 0.0;
        let mut head_reg = 0.0;
        let mut d_head_logits = vec![0.0; n_roi * k1];
        let mut d_head_deltas = vec![0.0; n_roi * 4 * (k1 - 1)];
        for r in 0..n_roi {
            let logits = &out.logits.data()[r * k1..(r + 1) * k1];
            let (l, g) = softmax_cross_entropy_with_grad(logits, targets.roi_labels[r])?;
            head_cls += l / n_roi_f;
            for (d, gv) in d_head_logits[r * k1..(r + 1) * k1].iter_mut().zip(&g) {
                *d = gv / n_roi_f;
            }
            if let (lab, Some(target)) = (targets.roi_labels[r], targets.roi_deltas[r]) {
                if lab > 0 {
                    let off = r * 4 * (k1 - 1) + 4 * (lab - 1);
                    let pred = BoxDelta::from_slice(&out.deltas.data()[off..off + 4]);
                    let (l, g) = smooth_l1_with_grad(&pred, &target, beta)?;
                    head_reg += l / n_roi_pos;
                    for c in 0..4 {
                        d_head_deltas[off + c] = g[c] / n_roi_pos;
                    }
                }
            }
        }

        let l_cls = rpn_cls + head_cls;
        let l_reg = rpn_reg + head_reg;
        let loss = DetectionLoss::new(l_cls, l_reg);
        if !(loss.l_det.is_finite()) {
            return Err(Error::NonFinite(format!("detection loss {loss:?}")));
        }

        let Some(trainable) = trainable else {
            return Ok((loss, None));
        };
        let head_comp = Component::Head(domain.name.clone());
        let want_head = trainable.contains(&head_comp);
        let want_rpn = trainable.contains(&Component::Rpn);
        let want_fpn = trainable.contains(&Component::Fpn);
        let want_backbone = trainable.contains(&Component::Backbone);
        let want_pyramid = want_fpn || want_backbone;

        let mut grads = Gradients::new();
        let push = |grads: &mut Gradients, layer: String, g: Vec<Tensor>| -> Result<()> {
            let mut it = g.into_iter();
            if let Some(w) = it.next() {
                grads.accumulate(&format!("{layer}.weight"), w)?;
            }
            if let Some(b) = it.next() {
                grads.accumulate(&format!("{layer}.bias"), b)?;
            }
            Ok(())
        };

        let mut level_grads: Vec<Vec<f64>> = fwd.pyramid.levels.iter().map(|l| vec![0.0; l.len()]).collect();
        if want_head || want_pyramid {
            let d_logits_t = Tensor::new(vec![n_roi, k1], d_head_logits)?;
            let d_deltas_t = Tensor::new(vec![n_roi, 4 * (k1 - 1)], d_head_deltas)?;
            let (d_pooled, p) = head.backward(&head_cache, &d_logits_t, &d_deltas_t, want_pyramid)?;
            if want_head {
                for (name, g) in p {
                    push(&mut grads, name, g)?;
                }
            }
            if want_pyramid {
                let len = self.config.pooled_len();
                for (r, roi) in pooled_rois.iter().enumerate() {
                    roi::roi_pool_backward(roi, &d_pooled.data()[r * len..(r + 1) * len], &mut level_grads);
                }
            }
        }
        if want_rpn || want_pyramid {
            let (rpn_level_grads, p) = self.rpn.backward(&fwd.rpn_cache, &d_logits, &d_deltas, want_pyramid)?;
            if want_rpn {
                for (name, g) in p {
                    push(&mut grads, name, g)?;
                }
            }
            if want_pyramid {
                for (acc, g) in level_grads.iter_mut().zip(&rpn_level_grads) {
                    for (a, b) in acc.iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
            }
        }
        if want_pyramid {
            let level_tensors = level_grads
                .into_iter()
                .zip(&fwd.pyramid.levels)
                .map(|(g, l)| Tensor::new(l.shape().to_vec(), g))
                .collect::<Result<Vec<_>>>()?;
            let tg = backbone::backward(&self.backbone, &self.fpn, &fwd.trunk_cache, &level_tensors, want_backbone)?;
            if want_fpn {
                for (layer, g) in self.fpn.layers().zip(tg.fpn) {
                    push(&mut grads, layer.name().to_string(), g)?;
                }
            }
            if want_backbone {
                for (layer, g) in self.backbone.layers().zip(tg.backbone) {
                    push(&mut grads, layer.name().to_string(), g)?;
                }
            }
        }
        Ok((loss, Some(grads)))
    }

    /// Detection loss of one image under fixed targets.
    pub fn detection_loss(&self, image: &Tensor, targets: &ImageTargets, domain: &DomainId) -> Result<DetectionLoss> {
        let fwd = self.forward_train(image)?;
        self.loss_from(&fwd, targets, domain, None).map(|(l, _)| l)
    }

    /// Detection loss and parameter gradients under fixed targets.
    pub fn loss_and_grads(
        &self,
        image: &Tensor,
        targets: &ImageTargets,
        domain: &DomainId,
        trainable: &BTreeSet<Component>,
    ) -> Result<(DetectionLoss, Gradients)> {
        let fwd = self.forward_train(image)?;
        let (l, g) = self.loss_from(&fwd, targets, domain, Some(trainable))?;
        Ok((l, g.expect("gradients requested")))
    }

    /// Samples targets and computes loss and gradients with a single forward pass.
    pub fn train_image(
        &self,
        image: &Tensor,
        gts: &[GroundTruth],
        domain: &DomainId,
        trainable: &BTreeSet<Component>,
        rng: &mut impl Rng,
    ) -> Result<(DetectionLoss, Gradients)> {
        let fwd = self.forward_train(image)?;
        let targets = self.targets_from(&fwd, gts, domain, rng)?;
        let (l, g) = self.loss_from(&fwd, &targets, domain, Some(trainable))?;
        Ok((l, g.expect("gradients requested")))
    }

    /// Full inference: proposals, pooling, the domain's head, per-class decode,
    /// score filter, per-class NMS, and the global top-N.
    pub fn detect(&self, image: &Tensor, domain: &DomainId, score_threshold: f64, nms_threshold: f64) -> Result<Vec<Detection>> {
        let head = self.head(domain)?;
        let pyramid = self.extract_features(image)?;
        let (proposals, _) = self.rpn_forward(&pyramid)?;
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let (pooled, _) = self.pool_rois(&pyramid, &boxes)?;
        let (out, _) = head.forward(&pooled)?;
        Ok(postprocess(
            &boxes,
            &out,
            head,
            domain,
            pyramid.image_width as f64,
            pyramid.image_height as f64,
            score_threshold,
            nms_threshold,
            &self.config,
        ))
    }

    pub fn description(&self) -> ModelDescription {
        ModelDescription {
            architecture: self.config.clone(),
            domains: self
                .heads
                .iter()
                .map(|(n, h)| DomainDescription {
                    name: n.clone(),
                    categories: h.categories.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the architecture from a description; parameters are zeroed
    /// placeholders until [`Detector::load_params`] fills them.
    pub fn from_description(desc: &ModelDescription) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut d = Detector::new(desc.architecture.clone(), &mut rng)?;
        for dom in &desc.domains {
            d.add_domain(&dom.name, dom.categories.clone(), &mut rng)?;
        }
        Ok(d)
    }

    /// Replaces every parameter; names and shapes must match exactly.
    pub fn load_params(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        let names: BTreeSet<String> = self.param_names().into_iter().collect();
        if let Some(extra) = params.keys().find(|k| !names.contains(*k)) {
            return Err(Error::InvalidCheckpoint(format!("unexpected parameter `{extra}`")));
        }
        let mut failure = None;
        self.visit_mut(&mut |name, t| {
            if failure.is_some() {
                return;
            }
            match params.get(name) {
                None => failure = Some(Error::InvalidCheckpoint(format!("missing parameter `{name}`"))),
                Some(src) if src.shape() != t.shape() => {
                    failure = Some(Error::InvalidCheckpoint(format!(
                        "`{name}` has shape {:?}, model expects {:?}",
                        src.shape(),
                        t.shape()
                    )))
                }
                Some(src) => t.data_mut().copy_from_slice(src.data()),
            }
        });
        failure.map_or(Ok(()), Err)
    }

    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let model = serde_json::to_value(self.description()).expect("description serializes");
        write_checkpoint(manifest_path, model, self)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let (manifest, params) = read_checkpoint(manifest_path)?;
        let desc: ModelDescription = serde_json::from_value(manifest.model)
            .map_err(|e| Error::InvalidCheckpoint(format!("model description: {e}")))?;
        let mut d = Detector::from_description(&desc)?;
        d.load_params(&params)?;
        Ok(d)
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn postprocess(
    boxes: &[BBox],
    out: &HeadOutput,
    head: &RoiHead,
    domain: &DomainId,
    width: f64,
    height: f64,
    score_threshold: f64,
    nms_threshold: f64,
    config: &DetectorConfig,
) -> Vec<Detection> {
    let k = head.num_classes();
    let mut per_class: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); k];
    for (r, proposal) in boxes.iter().enumerate() {
        let probs = softmax(&out.logits.data()[r * (k + 1)..(r + 1) * (k + 1)]);
        for c in 0..k {
            let score = probs[c + 1];
            if score <= score_threshold {
                continue;
            }
            let off = r * 4 * k + 4 * c;
            let delta = BoxDelta::from_slice(&out.deltas.data()[off..off + 4]);
            let b = decode_clamped(proposal, &delta, config.delta_clamp).clip(width, height);
            per_class[c].0.push(b);
            per_class[c].1.push(score);
        }
    }
    let mut dets = Vec::new();
    for (c, (bs, ss)) in per_class.iter().enumerate() {
        for i in nms(bs, ss, nms_threshold) {
            dets.push(Detection {
                bbox: bs[i],
                class_id: head.categories[c].id,
                score: ss[i],
                domain: domain.clone(),
            });
        }
    }
    // stable: equal scores keep class-then-rank order
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(config.max_detections);
    dets
}

impl ParameterStore for Detector {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        let mut each = |layer: &dyn Layer| {
            for (slot, t) in layer.params() {
                f(&format!("{}.{slot}", layer.name()), t);
            }
        };
        self.backbone.layers().for_each(|l| each(l));
        self.fpn.layers().for_each(|l| each(l));
        self.rpn.layers().for_each(|l| each(l));
        for (_, h) in &self.heads {
            h.layers().into_iter().for_each(|l| each(l));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        let mut each = |layer: &mut dyn Layer| {
            let name = layer.name().to_string();
            for (slot, t) in layer.params_mut() {
                f(&format!("{name}.{slot}"), t);
            }
        };
        self.backbone.layers_mut().for_each(|l| each(l));
        self.fpn.layers_mut().for_each(|l| each(l));
        self.rpn.layers_mut().for_each(|l| each(l));
        for (_, h) in &mut self.heads {
            h.layers_mut().into_iter().for_each(|l| each(l));
        }
    }
}
