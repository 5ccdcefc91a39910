//! Domain-specific ROI heads.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Category;
use crate::error::Result;
use crate::nn::{Cache, Layer, Linear, Relu, Tensor};

/// Identifies a registered domain head.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DomainId {
    pub index: usize,
    pub name: String,
}

/// Two hidden fully connected layers, then class logits (background at index
/// 0) and per-class box deltas for the domain's foreground classes.
#[derive(Debug, Clone)]
pub struct RoiHead {
    pub(crate) categories: Vec<Category>,
    fc1: Linear,
    relu1: Relu,
    fc2: Linear,
    relu2: Relu,
    cls: Linear,
    reg: Linear,
}

pub(crate) struct HeadCache {
    fc1: Cache,
    relu1: Cache,
    fc2: Cache,
    relu2: Cache,
    cls: Cache,
    reg: Cache,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `[N, K + 1]`
    pub logits: Tensor,
    /// `[N, 4K]`
    pub deltas: Tensor,
}

impl RoiHead {
    pub fn new(domain: &str, categories: Vec<Category>, in_features: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let k = categories.len();
        let p = |s: &str| format!("head.{domain}.{s}");
        RoiHead {
            fc1: Linear::new(p("fc1"), in_features, hidden, rng),
            relu1: Relu::new(p("relu1")),
            fc2: Linear::new(p("fc2"), hidden, hidden, rng),
            relu2: Relu::new(p("relu2")),
            cls: Linear::new(p("cls"), hidden, k + 1, rng),
            reg: Linear::new(p("reg"), hidden, 4 * k, rng),
            categories,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.categories.len()
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    /// Head-local label (1-based; 0 is background) of a category id.
    pub fn label_of(&self, category_id: u32) -> Option<usize> {
        self.categories.iter().position(|c| c.id == category_id).map(|i| i + 1)
    }

    pub(crate) fn layers(&self) -> [&Linear; 4] {
        [&self.fc1, &self.fc2, &self.cls, &self.reg]
    }

    pub(crate) fn layers_mut(&mut self) -> [&mut Linear; 4] {
        [&mut self.fc1, &mut self.fc2, &mut self.cls, &mut self.reg]
    }

    pub(crate) fn forward(&self, pooled: &Tensor) -> Result<(HeadOutput, HeadCache)> {
        let (x, fc1) = self.fc1.forward(pooled)?;
        let (x, relu1) = self.relu1.forward(&x)?;
        let (x, fc2) = self.fc2.forward(&x)?;
        let (x, relu2) = self.relu2.forward(&x)?;
        let (logits, cls) = self.cls.forward(&x)?;
        let (deltas, reg) = self.reg.forward(&x)?;
        Ok((
            HeadOutput { logits, deltas },
            HeadCache { fc1, relu1, fc2, relu2, cls, reg },
        ))
    }

    /// Returns the pooled-input gradient (empty unless `want_input`) and
    /// `(layer name, [weight, bias])` gradients.
    pub(crate) fn backward(
        &self,
        cache: &HeadCache,
        d_logits: &Tensor,
        d_deltas: &Tensor,
        want_input: bool,
    ) -> Result<(Tensor, Vec<(String, Vec<Tensor>)>)> {
        let (mut g, p_cls) = self.cls.backward(&cache.cls, d_logits)?;
        let (g2, p_reg) = self.reg.backward(&cache.reg, d_deltas)?;
        g.add_assign(&g2)?;
        let (g, _) = self.relu2.backward(&cache.relu2, &g)?;
        let (g, p_fc2) = self.fc2.backward(&cache.fc2, &g)?;
        let (g, _) = self.relu1.backward(&cache.relu1, &g)?;
        let (g, p_fc1) = self.fc1.backward_with(&cache.fc1, &g, want_input)?;
        Ok((
            g,
            vec![
                (self.fc1.name().to_string(), p_fc1),
                (self.fc2.name().to_string(), p_fc2),
                (self.cls.name().to_string(), p_cls),
                (self.reg.name().to_string(), p_reg),
            ],
        ))
    }
}
