//! Central finite-difference verification of analytic parameter gradients.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::vnet::Param;
use super::{Tensor, VNetModel};
use crate::error::Result;
use crate::rng::{stream_rng, tags};

/// Something with mutable `f64` parameters.
pub trait ParamSet {
    fn param_list(&self) -> &[Param<f64>];
    fn param_list_mut(&mut self) -> &mut [Param<f64>];
}

impl ParamSet for VNetModel<f64> {
    fn param_list(&self) -> &[Param<f64>] {
        self.params()
    }

    fn param_list_mut(&mut self) -> &mut [Param<f64>] {
        self.params_mut()
    }
}

impl ParamSet for Vec<Param<f64>> {
    fn param_list(&self) -> &[Param<f64>] {
        self
    }

    fn param_list_mut(&mut self) -> &mut [Param<f64>] {
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOptions {
    pub epsilon: f64,
    pub tolerance: f64,
    /// Fraction of each parameter array to probe (at least one entry per array).
    pub fraction: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            tolerance: 1e-4,
            fraction: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare `analytic` (one vector per parameter array) against central
/// differences of `loss` on a seeded subset of entries.
pub fn check_gradients<M: ParamSet>(
    model: &mut M,
    analytic: &[Vec<f64>],
    loss: impl Fn(&M) -> Result<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = stream_rng(opts.seed, &[tags::GRADCHECK]);
    let mut checked = 0;
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let mut failed_shape = false;
    for p in 0..model.param_list().len() {
        let n = model.param_list()[p].value.len();
        if n == 0 {
            continue;
        }
        if analytic.get(p).map(Vec::len) != Some(n) {
            failed_shape = true;
            continue;
        }
        let k = ((n as f64 * opts.fraction).ceil() as usize).clamp(1, n);
        let mut idx = sample(&mut rng, n, k).into_vec();
        idx.sort_unstable();
        for i in idx {
            let orig = model.param_list()[p].value.data()[i];
            model.param_list_mut()[p].value.data_mut()[i] = orig + opts.epsilon;
            let up = loss(model)?;
            model.param_list_mut()[p].value.data_mut()[i] = orig - opts.epsilon;
            let dn = loss(model)?;
            model.param_list_mut()[p].value.data_mut()[i] = orig;
            let numeric = (up - dn) / (2.0 * opts.epsilon);
            let err = relative_error(analytic[p][i], numeric);
            checked += 1;
            if err > max_rel || err.is_nan() {
                max_rel = if err.is_nan() { f64::INFINITY } else { err };
                worst = Some((model.param_list()[p].name.clone(), i));
            }
        }
    }
    Ok(GradCheckReport {
        checked,
        max_rel_error: max_rel,
        worst,
        tolerance: opts.tolerance,
        passed: !failed_shape && max_rel < opts.tolerance,
    })
}

/// Check the V-Net's backpropagated MSE gradients.
pub fn gradient_check(
    model: &VNetModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, grads) = model.loss_and_grads(input, target)?;
    gradient_check_against(model, input, target, &grads, opts)
}

/// As [`gradient_check`] but with caller-supplied analytic gradients.
pub fn gradient_check_against(
    model: &VNetModel<f64>,
    input: &Tensor<f64>,
    target: &Tensor<f64>,
    analytic: &[Vec<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut m = model.clone();
    check_gradients(&mut m, analytic, |m| m.loss(input, target), opts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_parameter_set_passes() {
        let mut none: Vec<Param<f64>> = Vec::new();
        let r = check_gradients(&mut none, &[], |_| Ok(0.0), &GradCheckOptions::default()).unwrap();
        assert_eq!(r.checked, 0);
        assert!(r.passed);
    }

    #[test]
    fn quadratic_is_exact() {
        let mut ps = vec![Param {
            name: "w".into(),
            value: Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap(),
        }];
        let grads = vec![ps[0].value.data().iter().map(|v| 2.0 * v).collect::<Vec<_>>()];
        let opts = GradCheckOptions {
            fraction: 1.0,
            ..Default::default()
        };
        let loss = |p: &Vec<Param<f64>>| Ok(p[0].value.data().iter().map(|v| v * v).sum());
        let r = check_gradients(&mut ps, &grads, loss, &opts).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.passed, "{r:?}");
        let doubled = vec![grads[0].iter().map(|g| 2.0 * g).collect()];
        assert!(!check_gradients(&mut ps, &doubled, loss, &opts).unwrap().passed);
    }
}
