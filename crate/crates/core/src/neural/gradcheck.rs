//! Whole-network gradient verification: every trainable scalar is perturbed
//! by +/- h, the loss is re-evaluated through the training-mode forward
//! pass, and the central difference (L(t+h) - L(t-h)) / 2h is compared
//! against the analytic gradient from the backward pass.
//!
//! The forward path is the only thing the numeric side uses, so this check
//! is independent of every backward implementation it verifies.

use super::loss::{ce_classification_grad, loss_ce_classification, loss_mse, mse_grad};
use super::network::{ForwardPass, Network};
use super::NeuralError;
use crate::tensor::Tensor;

/// Loss used to probe the network during a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckLoss {
    /// Mean squared error against a real-valued target batch.
    Mse,
    /// Mean cross-entropy against one-hot target rows; expects the network
    /// to end in a softmax head.
    CrossEntropy,
}

/// Differences below this are indistinguishable from central-difference
/// roundoff at h ~ 1e-5 and count as exact agreement.
const ABS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckFailure {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct GradCheckReport {
    pub checked: usize,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub failures: Vec<GradCheckFailure>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let diff = (analytic - numeric).abs();
    if diff < ABS_FLOOR {
        0.0
    } else {
        diff / analytic.abs().max(numeric.abs())
    }
}

fn batch_loss(pass_output: &Tensor, y: &Tensor, loss: CheckLoss) -> Result<f64, NeuralError> {
    match loss {
        CheckLoss::Mse => loss_mse(y, pass_output),
        CheckLoss::CrossEntropy => {
            let (b, c) = (pass_output.shape()[0], pass_output.shape()[1]);
            let mut total = 0.0;
            for row in 0..b {
                let p = Tensor::new(&[c], pass_output.data()[row * c..(row + 1) * c].to_vec())?;
                let t = Tensor::new(&[c], y.data()[row * c..(row + 1) * c].to_vec())?;
                total += loss_ce_classification(&p, &t)?;
            }
            Ok(total / b as f64)
        }
    }
}

fn loss_grad(pass: &ForwardPass, y: &Tensor, loss: CheckLoss) -> Result<Tensor, NeuralError> {
    let out = pass.output();
    match loss {
        CheckLoss::Mse => mse_grad(y, out),
        CheckLoss::CrossEntropy => {
            let (b, c) = (out.shape()[0], out.shape()[1]);
            let mut grad = vec![0.0; out.len()];
            for row in 0..b {
                let p = Tensor::new(&[c], out.data()[row * c..(row + 1) * c].to_vec())?;
                let t = Tensor::new(&[c], y.data()[row * c..(row + 1) * c].to_vec())?;
                let g = ce_classification_grad(&p, &t)?;
                for (j, &gv) in g.data().iter().enumerate() {
                    grad[row * c + j] = gv / b as f64;
                }
            }
            Tensor::new(out.shape(), grad).map_err(Into::into)
        }
    }
}

/// Check every trainable parameter of `net` against central finite
/// differences of the chosen loss at probe step `h`. Entries whose relative
/// error exceeds `tolerance` are reported as failures; the report never
/// errors on its own.
pub fn gradient_check(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    loss: CheckLoss,
    h: f64,
    tolerance: f64,
) -> Result<GradCheckReport, NeuralError> {
    check_impl(net, x, y, loss, h, tolerance, None)
}

/// Like [`gradient_check`], but restricted to the given
/// (parameter index, scalar index) pairs. Used to re-test suspected
/// failures at independent probe points and to subsample very large
/// parameter sets.
pub fn gradient_check_subset(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    loss: CheckLoss,
    h: f64,
    tolerance: f64,
    subset: &[(usize, usize)],
) -> Result<GradCheckReport, NeuralError> {
    check_impl(net, x, y, loss, h, tolerance, Some(subset))
}

fn check_impl(
    net: &Network,
    x: &Tensor,
    y: &Tensor,
    loss: CheckLoss,
    h: f64,
    tolerance: f64,
    subset: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport, NeuralError> {
    if h.is_nan() || h <= 0.0 {
        return Err(NeuralError::Config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }

    let pass = net.forward_train(x)?;
    let grad_out = loss_grad(&pass, y, loss)?;
    let analytic = net.backward(&pass, &grad_out, None)?;

    let targets: Vec<(usize, usize)> = match subset {
        Some(list) => {
            for &(pi, si) in list {
                if pi >= analytic.by_param.len() || si >= analytic.by_param[pi].len() {
                    return Err(NeuralError::Config(format!(
                        "gradient check target ({pi}, {si}) out of range"
                    )));
                }
            }
            list.to_vec()
        }
        None => (0..analytic.by_param.len())
            .flat_map(|pi| (0..analytic.by_param[pi].len()).map(move |si| (pi, si)))
            .collect(),
    };

    let names = net.param_names();
    let mut work = net.clone_for_probe();
    let mut checked = 0usize;
    let mut max_rel_err: f64 = 0.0;
    let mut failures = Vec::new();

    for (pi, si) in targets {
        let base = {
            let params = work.param_tensors();
            params[pi].data()[si]
        };
        set_param_scalar(&mut work, pi, si, base + h);
        let plus = batch_loss(work.forward_train(x)?.output(), y, loss)?;
        set_param_scalar(&mut work, pi, si, base - h);
        let minus = batch_loss(work.forward_train(x)?.output(), y, loss)?;
        set_param_scalar(&mut work, pi, si, base);

        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic.by_param[pi].data()[si];
        let rel = relative_error(a, numeric);
        max_rel_err = max_rel_err.max(rel);
        checked += 1;
        if rel > tolerance && failures.len() < 200 {
            failures.push(GradCheckFailure {
                param: names[pi].clone(),
                index: si,
                analytic: a,
                numeric,
                rel_err: rel,
            });
        }
    }

    Ok(GradCheckReport {
        checked,
        tolerance,
        max_rel_err,
        failures,
    })
}

fn set_param_scalar(net: &mut Network, param: usize, index: usize, value: f64) {
    let mut params = net.param_tensors_mut();
    let t = &mut *params[param];
    let mut data = t.data().to_vec();
    data[index] = value;
    *t = Tensor::new(t.shape(), data).expect("same shape");
}

impl Network {
    /// Independent copy used as the perturbation workbench.
    pub fn clone_for_probe(&self) -> Network {
        self.clone()
    }
}
