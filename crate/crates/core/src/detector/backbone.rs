//! Convolutional trunk and lateral projections forming the feature pyramid.

use rand::Rng;

use super::config::{DetectorConfig, LEVEL_STRIDES, NUM_LEVELS};
use crate::error::{Error, Result};
use crate::nn::{Cache, Conv2d, ConvSpec, Layer, MaxPool2, Relu, Tensor};

/// Four maps at strides 4/8/16/32, all with the same channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: [usize; NUM_LEVELS],
    pub image_height: usize,
    pub image_width: usize,
}

impl FeaturePyramid {
    /// `(height, width)` of one level.
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        let s = self.levels[level].shape();
        (s[1], s[2])
    }
}

/// Four blocks of 3x3 conv, ReLU and 2x2 max-pool. The first conv has stride 2
/// so that the block outputs land on strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct Backbone {
    convs: Vec<Conv2d>,
    relus: Vec<Relu>,
    pools: Vec<MaxPool2>,
}

/// 1x1 projections of each block output to the common pyramid width.
#[derive(Debug, Clone)]
pub struct Fpn {
    laterals: Vec<Conv2d>,
}

pub(crate) struct BackboneCache {
    conv: Vec<Cache>,
    relu: Vec<Cache>,
    pool: Vec<Cache>,
    lateral: Vec<Cache>,
}

/// `[H, W, 3]` interleaved image to `[3, H, W]` planes.
pub fn hwc_to_chw(image: &Tensor) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::ShapeMismatch {
            layer: "backbone.input".into(),
            expected: vec![0, 0, 3],
            actual: s.to_vec(),
        });
    }
    let (h, w) = (s[0], s[1]);
    let src = image.data();
    let mut out = vec![0.0; 3 * h * w];
    for (p, px) in src.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * h * w + p] = px[c];
        }
    }
    Tensor::new(vec![3, h, w], out)
}

impl Backbone {
    pub fn new(config: &DetectorConfig, rng: &mut impl Rng) -> Self {
        let mut convs = Vec::new();
        let mut in_c = 3;
        for (i, &out_c) in config.backbone_channels.iter().enumerate() {
            let spec = ConvSpec {
                in_channels: in_c,
                out_channels: out_c,
                kernel: 3,
                stride: if i == 0 { 2 } else { 1 },
                padding: 1,
            };
            convs.push(Conv2d::new(format!("backbone.conv{}", i + 1), spec, rng));
            in_c = out_c;
        }
        Backbone {
            convs,
            relus: (1..=NUM_LEVELS).map(|i| Relu::new(format!("backbone.relu{i}"))).collect(),
            pools: (1..=NUM_LEVELS).map(|i| MaxPool2::new(format!("backbone.pool{i}"))).collect(),
        }
    }

    pub(crate) fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.convs.iter()
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.convs.iter_mut()
    }
}

impl Fpn {
    pub fn new(config: &DetectorConfig, rng: &mut impl Rng) -> Self {
        let laterals = config
            .backbone_channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let spec = ConvSpec {
                    in_channels: c,
                    out_channels: config.pyramid_channels,
                    kernel: 1,
                    stride: 1,
                    padding: 0,
                };
                Conv2d::new(format!("fpn.lateral{i}"), spec, rng)
            })
            .collect();
        Fpn { laterals }
    }

    pub(crate) fn layers(&self) -> impl Iterator<Item = &Conv2d> {
        self.laterals.iter()
    }

    pub(crate) fn layers_mut(&mut self) -> impl Iterator<Item = &mut Conv2d> {
        self.laterals.iter_mut()
    }
}

pub(crate) fn check_image(config: &DetectorConfig, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let ok = s.len() == 3 && s[2] == 3 && s[0] > 0 && s[1] > 0 && s[0].is_multiple_of(32) && s[1].is_multiple_of(32);
    if !ok {
        return Err(Error::ShapeMismatch {
            layer: "backbone.input".into(),
            expected: vec![config.image_size, config.image_size, 3],
            actual: s.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn forward(
    config: &DetectorConfig,
    backbone: &Backbone,
    fpn: &Fpn,
    image: &Tensor,
) -> Result<(FeaturePyramid, BackboneCache)> {
    check_image(config, image)?;
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut x = hwc_to_chw(image)?;
    let mut cache = BackboneCache {
        conv: Vec::with_capacity(NUM_LEVELS),
        relu: Vec::with_capacity(NUM_LEVELS),
        pool: Vec::with_capacity(NUM_LEVELS),
        lateral: Vec::with_capacity(NUM_LEVELS),
    };
    let mut levels = Vec::with_capacity(NUM_LEVELS);
    for i in 0..NUM_LEVELS {
        let (y, c) = backbone.convs[i].forward(&x)?;
        cache.conv.push(c);
        let (y, c) = backbone.relus[i].forward(&y)?;
        cache.relu.push(c);
        let (y, c) = backbone.pools[i].forward(&y)?;
        cache.pool.push(c);
        let (p, c) = fpn.laterals[i].forward(&y)?;
        cache.lateral.push(c);
        levels.push(p);
        x = y;
    }
    Ok((
        FeaturePyramid {
            levels,
            strides: LEVEL_STRIDES,
            image_height: h,
            image_width: w,
        },
        cache,
    ))
}

/// Parameter gradients of the trunk given pyramid gradients.
pub(crate) struct TrunkGrads {
    pub backbone: Vec<Vec<Tensor>>,
    pub fpn: Vec<Vec<Tensor>>,
}

pub(crate) fn backward(
    backbone: &Backbone,
    fpn: &Fpn,
    cache: &BackboneCache,
    level_grads: &[Tensor],
    want_backbone: bool,
) -> Result<TrunkGrads> {
    let mut fpn_grads = Vec::with_capacity(NUM_LEVELS);
    let mut block_grads = Vec::with_capacity(NUM_LEVELS);
    for i in 0..NUM_LEVELS {
        let (g_in, g_params) = fpn.laterals[i].backward_with(&cache.lateral[i], &level_grads[i], want_backbone)?;
        fpn_grads.push(g_params);
        block_grads.push(g_in);
    }
    if !want_backbone {
        return Ok(TrunkGrads {
            backbone: Vec::new(),
            fpn: fpn_grads,
        });
    }
    let mut backbone_grads = vec![Vec::new(); NUM_LEVELS];
    let mut carry: Option<Tensor> = None;
    for i in (0..NUM_LEVELS).rev() {
        let mut g = std::mem::replace(&mut block_grads[i], Tensor::zeros(&[0]));
        if let Some(c) = carry.take() {
            g.add_assign(&c)?;
        }
        let (g, _) = backbone.pools[i].backward(&cache.pool[i], &g)?;
        let (g, _) = backbone.relus[i].backward(&cache.relu[i], &g)?;
        let (g_in, g_params) = backbone.convs[i].backward_with(&cache.conv[i], &g, i > 0)?;
        backbone_grads[i] = g_params;
        if i > 0 {
            carry = Some(g_in);
        }
    }
    Ok(TrunkGrads {
        backbone: backbone_grads,
        fpn: fpn_grads,
    })
}
