//! Parameter groups, discriminative learning rates, gradual unfreezing and the
//! triangular cyclical learning rate.
//!
//! Each component (backbone, fpn, rpn, head.<domain>) forms one parameter
//! group. A stage names the components it trains together with their base
//! learning rates; every other component stays frozen. Within a stage all
//! active groups share the triangular multiplier `clr(iter) / clr.base_lr`,
//! so the ratios between configured bases hold at every iteration.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::detector::{Component, Detector};
use crate::error::{Error, Result};
use crate::nn::ParamGroup;

/// Triangular cyclical learning rate at integer iteration `iter`.
pub fn triangular_clr(iter: usize, base_lr: f64, max_lr: f64, step_size: usize) -> Result<f64> {
    if !(base_lr.is_finite() && max_lr.is_finite()) || base_lr > max_lr {
        return Err(Error::InvalidSchedule(format!(
            "clr bounds must satisfy base_lr <= max_lr, got {base_lr} and {max_lr}"
        )));
    }
    if step_size == 0 {
        return Err(Error::InvalidSchedule("clr step_size must be at least 1".into()));
    }
    // Reducing modulo the period first keeps the value exactly periodic.
    let period = 2 * step_size;
    let t = iter % period;
    let x = if t <= step_size {
        1.0 - t as f64 / step_size as f64
    } else {
        (t - step_size) as f64 / step_size as f64
    };
    Ok(base_lr + (max_lr - base_lr) * (1.0 - x).max(0.0))
}

/// One component's role within a stage: trained at `lr` or frozen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentLr {
    pub component: Component,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

impl ComponentLr {
    pub fn active(component: Component, lr: f64) -> Self {
        ComponentLr { component, lr: Some(lr) }
    }

    pub fn frozen(component: Component) -> Self {
        ComponentLr { component, lr: None }
    }

    pub fn is_frozen(&self) -> bool {
        self.lr.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClrConfig {
    pub base_lr: f64,
    pub max_lr: f64,
    /// Half-cycle length in iterations; two epochs of iterations when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_size_iters: Option<usize>,
}

impl ClrConfig {
    pub fn new(base_lr: f64, max_lr: f64) -> Self {
        ClrConfig {
            base_lr,
            max_lr,
            step_size_iters: None,
        }
    }

    pub fn step_size(&self, iters_per_epoch: usize) -> usize {
        self.step_size_iters.unwrap_or(2 * iters_per_epoch).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidSchedule(format!("clr base_lr must be positive, got {}", self.base_lr)));
        }
        triangular_clr(0, self.base_lr, self.max_lr, self.step_size_iters.unwrap_or(1))?;
        Ok(())
    }

    /// Shared multiplier applied to every component base at `iter`.
    pub fn multiplier(&self, iter: usize, step_size: usize) -> Result<f64> {
        Ok(triangular_clr(iter, self.base_lr, self.max_lr, step_size)? / self.base_lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub epochs: usize,
    pub components: Vec<ComponentLr>,
    pub clr: ClrConfig,
}

impl StagePlan {
    pub fn new(epochs: usize, components: Vec<ComponentLr>, clr: ClrConfig) -> Self {
        StagePlan { epochs, components, clr }
    }

    pub fn active(&self) -> BTreeSet<Component> {
        self.components
            .iter()
            .filter(|c| !c.is_frozen())
            .map(|c| c.component.clone())
            .collect()
    }

    pub fn base_lr(&self, component: &Component) -> Option<f64> {
        self.components.iter().find(|c| &c.component == component).and_then(|c| c.lr)
    }

    pub fn validate(&self) -> Result<()> {
        self.clr.validate()?;
        let mut seen = BTreeSet::new();
        for c in &self.components {
            if !seen.insert(&c.component) {
                return Err(Error::InvalidSchedule(format!("component `{}` listed twice in one stage", c.component)));
            }
            if let Some(lr) = c.lr {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::InvalidSchedule(format!("`{}` needs a positive lr, got {lr}", c.component)));
                }
            }
        }
        if self.active().is_empty() {
            return Err(Error::InvalidSchedule("stage has no trainable component".into()));
        }
        Ok(())
    }
}

/// Learning rate of one active component at a point on the stage's CLR curve.
pub fn scaled_group_lr(clr_value: f64, component: &ComponentLr, stage: &StagePlan) -> Result<f64> {
    match component.lr {
        None => Err(Error::InvalidSchedule(format!(
            "component `{}` is frozen and has no learning rate",
            component.component
        ))),
        Some(base) => Ok(base * (clr_value / stage.clr.base_lr)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchedulePlan {
    pub stages: Vec<StagePlan>,
}

impl SchedulePlan {
    pub fn new(stages: Vec<StagePlan>) -> Self {
        SchedulePlan { stages }
    }

    /// Checks every stage and that no stage re-freezes a previously active component.
    pub fn validate(&self) -> Result<()> {
        let mut prev: BTreeSet<Component> = BTreeSet::new();
        for (k, stage) in self.stages.iter().enumerate() {
            stage.validate().map_err(|e| Error::InvalidSchedule(format!("stage {}: {e}", k + 1)))?;
            let active = stage.active();
            if let Some(lost) = prev.difference(&active).next() {
                return Err(Error::InvalidSchedule(format!(
                    "stage {} freezes `{lost}`, which an earlier stage trained",
                    k + 1
                )));
            }
            prev = active;
        }
        Ok(())
    }

    /// Components trained by any stage.
    pub fn trained_components(&self) -> BTreeSet<Component> {
        self.stages.iter().flat_map(|s| s.active()).collect()
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// One group per model component; components the stage does not activate are frozen.
pub fn build_param_groups(model: &Detector, stage: &StagePlan) -> Result<Vec<ParamGroup>> {
    let components = model.components();
    for c in &stage.components {
        if !components.contains(&c.component) {
            return Err(Error::UnknownComponent {
                name: c.component.to_string(),
                valid: components.iter().map(|c| c.to_string()).collect(),
            });
        }
    }
    Ok(components
        .iter()
        .map(|c| {
            let params = model.component_params(c);
            match stage.base_lr(c) {
                Some(lr) => ParamGroup::new(c.to_string(), params, lr, false),
                None => ParamGroup::new(c.to_string(), params, 0.0, true),
            }
        })
        .collect())
}

/// Groups for the next stage. Groups that stay active keep their velocity;
/// every other group starts from zero velocity.
pub fn rederive_param_groups(model: &Detector, stage: &StagePlan, previous: &[ParamGroup]) -> Result<Vec<ParamGroup>> {
    let mut groups = build_param_groups(model, stage)?;
    for g in &mut groups {
        match previous.iter().find(|p| p.name == g.name) {
            Some(p) if !p.frozen && !g.frozen => {
                let (lr, params) = (g.lr, std::mem::take(&mut g.params));
                *g = p.clone();
                g.lr = lr;
                g.params = params;
            }
            _ => g.reset_velocity(),
        }
    }
    Ok(groups)
}

/// Sets every active group's learning rate for iteration `iter` of `stage`.
pub fn apply_stage_lrs(groups: &mut [ParamGroup], stage: &StagePlan, iter: usize, step_size: usize) -> Result<()> {
    let clr = triangular_clr(iter, stage.clr.base_lr, stage.clr.max_lr, step_size)?;
    for g in groups.iter_mut().filter(|g| !g.frozen) {
        let comp: Component = g.name.parse()?;
        let entry = stage
            .components
            .iter()
            .find(|c| c.component == comp)
            .ok_or_else(|| Error::InvalidSchedule(format!("group `{}` is not part of the stage", g.name)))?;
        g.lr = scaled_group_lr(clr, entry, stage)?;
    }
    Ok(())
}

/// Position within a [`SchedulePlan`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ScheduleState {
    pub stage: usize,
    pub epochs_completed: usize,
    /// Iterations within the current stage; the CLR counter.
    pub iteration: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Advance<'a> {
    Stage(usize, &'a StagePlan),
    Done,
}

/// Returns the stage to run next. Once the current stage has completed its
/// epochs the state moves on, resetting the epoch and CLR counters; stages
/// with zero epochs are skipped.
pub fn advance<'a>(plan: &'a SchedulePlan, state: &mut ScheduleState) -> Advance<'a> {
    while let Some(stage) = plan.stages.get(state.stage) {
        if state.epochs_completed < stage.epochs {
            return Advance::Stage(state.stage, stage);
        }
        state.stage += 1;
        state.epochs_completed = 0;
        state.iteration = 0;
    }
    Advance::Done
}

fn head(domain: &str) -> Component {
    Component::Head(domain.to_string())
}

fn head_only_stage(domain: &str) -> StagePlan {
    StagePlan::new(
        5,
        vec![ComponentLr::active(head(domain), 1e-3)],
        ClrConfig::new(1e-3, 6e-3),
    )
}

pub const PRESETS: [&str; 5] = ["table3_row1", "table3_row2", "table3_row3", "table3_row4", "full_unfreeze"];

/// Named adaptation plans for a new domain head called `domain`.
///
/// `full_unfreeze` is the control: everything trains at a constant 1e-3 from
/// the first epoch for as many epochs as `table3_row4`.
pub fn preset(name: &str, domain: &str) -> Result<SchedulePlan> {
    let h = || ComponentLr::active(head(domain), 1e-3);
    let plan = match name {
        "table3_row1" => SchedulePlan::new(vec![head_only_stage(domain)]),
        "table3_row2" => SchedulePlan::new(vec![
            head_only_stage(domain),
            StagePlan::new(
                4,
                vec![h(), ComponentLr::active(Component::Rpn, 1e-4)],
                ClrConfig::new(1e-4, 6e-4),
            ),
        ]),
        "table3_row3" => SchedulePlan::new(vec![
            head_only_stage(domain),
            StagePlan::new(
                7,
                vec![h(), ComponentLr::active(Component::Rpn, 1e-4)],
                ClrConfig::new(1e-4, 6e-3),
            ),
        ]),
        "table3_row4" => SchedulePlan::new(vec![
            head_only_stage(domain),
            StagePlan::new(
                10,
                vec![
                    h(),
                    ComponentLr::active(Component::Rpn, 4e-4),
                    ComponentLr::active(Component::Fpn, 2e-4),
                ],
                ClrConfig::new(1e-4, 6e-3),
            ),
        ]),
        "full_unfreeze" => SchedulePlan::new(vec![StagePlan::new(
            15,
            [Component::Backbone, Component::Fpn, Component::Rpn, head(domain)]
                .into_iter()
                .map(|c| ComponentLr::active(c, 1e-3))
                .collect(),
            ClrConfig::new(1e-3, 1e-3),
        )]),
        _ => {
            return Err(Error::InvalidConfig(format!(
                "unknown preset `{name}`; expected one of {}",
                PRESETS.join(", ")
            )))
        }
    };
    plan.validate()?;
    Ok(plan)
}
