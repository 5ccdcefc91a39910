//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::Layer;
use super::tensor::Tensor;
use crate::error::{Error, Result};

const PROJECTION_SEED: u64 = 0x9e37_79b9;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Worst relative error per checked tensor; `"input"` covers the layer input.
    pub per_param: Vec<(String, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("gradient-check epsilon {eps} outside [1e-7, 1e-3]")));
    }
    Ok(())
}

/// Compares `analytic` against central differences of `f` around `x`, one
/// coordinate at a time. Returns the largest relative error.
pub fn check_function<F>(mut f: F, x: &[f64], analytic: &[f64], eps: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    check_eps(eps)?;
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let plus = f(&probe)?;
        probe[i] = x[i] - eps;
        let minus = f(&probe)?;
        probe[i] = x[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("loss while perturbing coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    Ok(worst)
}

fn projected_loss(layer: &dyn Layer, input: &Tensor, projection: &[f64]) -> Result<f64> {
    let (out, _) = layer.forward(input)?;
    Ok(out.data().iter().zip(projection).map(|(a, b)| a * b).sum())
}

/// Checks a layer's backward pass against central differences of the scalar
/// `sum(forward(input) * R)` for a fixed random projection `R`. Parameters
/// named in `frozen` are skipped.
pub fn gradient_check(
    layer: &mut dyn Layer,
    input: &Tensor,
    eps: f64,
    frozen: &[&str],
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    let (out, cache) = layer.forward(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(PROJECTION_SEED);
    let projection: Vec<f64> = (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let grad_out = Tensor::new(out.shape().to_vec(), projection.clone())?;
    let (grad_in, grad_params) = layer.backward(&cache, &grad_out)?;
    if !projected_loss(layer, input, &projection)?.is_finite() {
        return Err(Error::NonFinite(format!("{}: loss at the unperturbed point", layer.name())));
    }

    let mut per_param = Vec::new();
    let names: Vec<&'static str> = layer.params().iter().map(|(n, _)| *n).collect();
    for (slot, name) in names.iter().enumerate() {
        if frozen.contains(name) {
            continue;
        }
        let original = layer.params()[slot].1.data().to_vec();
        let analytic = grad_params[slot].data().to_vec();
        let err = check_function(
            |x| {
                layer.params_mut()[slot].1.data_mut().copy_from_slice(x);
                projected_loss(layer, input, &projection)
            },
            &original,
            &analytic,
            eps,
        );
        layer.params_mut()[slot].1.data_mut().copy_from_slice(&original);
        per_param.push((name.to_string(), err?));
    }

    let layer_ref: &dyn Layer = layer;
    let err = check_function(
        |x| {
            let t = Tensor::new(input.shape().to_vec(), x.to_vec())?;
            projected_loss(layer_ref, &t, &projection)
        },
        input.data(),
        grad_in.data(),
        eps,
    )?;
    per_param.push(("input".to_string(), err));

    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}
