//! Parameter update rules: plain SGD, Adam with bias correction and L2-style
//! weight decay, and the per-epoch cosine learning-rate schedule.
//!
//! Weight decay is added to the raw gradient before the moment update
//! (classic Adam + L2), and the cosine schedule is
//! lr(t) = lr0 * (1 + cos(pi * t / T)) / 2 with no restarts.

use super::NeuralError;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// One vanilla gradient-descent step: theta - lr * grad.
pub fn sgd_step(theta: &Tensor, grad: &Tensor, lr: f64) -> Result<Tensor, NeuralError> {
    Ok(theta.zip_map(grad, |t, g| t - lr * g)?)
}

/// One Adam step on a single parameter tensor. `step` is the 1-based step
/// counter used for bias correction; `lr` is the (possibly scheduled)
/// learning rate for this step. Returns (theta', m', v').
pub fn adam_step(
    theta: &Tensor,
    grad: &Tensor,
    m: &Tensor,
    v: &Tensor,
    step: u64,
    hyper: &AdamHyper,
    lr: f64,
) -> Result<(Tensor, Tensor, Tensor), NeuralError> {
    if theta.shape() != grad.shape() || theta.shape() != m.shape() || theta.shape() != v.shape() {
        return Err(NeuralError::Shape(format!(
            "adam operands disagree: theta {:?}, grad {:?}, m {:?}, v {:?}",
            theta.shape(),
            grad.shape(),
            m.shape(),
            v.shape()
        )));
    }
    if step == 0 {
        return Err(NeuralError::Config("adam step counter must be >= 1".into()));
    }
    let b1 = hyper.beta1;
    let b2 = hyper.beta2;
    let bc1 = 1.0 - b1.powi(step as i32);
    let bc2 = 1.0 - b2.powi(step as i32);

    let n = theta.len();
    let mut theta_new = Vec::with_capacity(n);
    let mut m_new = Vec::with_capacity(n);
    let mut v_new = Vec::with_capacity(n);
    for i in 0..n {
        let g = grad.data()[i] + hyper.weight_decay * theta.data()[i];
        let mi = b1 * m.data()[i] + (1.0 - b1) * g;
        let vi = b2 * v.data()[i] + (1.0 - b2) * g * g;
        let m_hat = mi / bc1;
        let v_hat = vi / bc2;
        theta_new.push(theta.data()[i] - lr * m_hat / (v_hat.sqrt() + hyper.eps));
        m_new.push(mi);
        v_new.push(vi);
    }
    Ok((
        Tensor::new(theta.shape(), theta_new)?,
        Tensor::new(theta.shape(), m_new)?,
        Tensor::new(theta.shape(), v_new)?,
    ))
}

/// Cosine annealing without restarts, evaluated per epoch:
/// lr0 * (1 + cos(pi * epoch / total)) / 2.
pub fn cosine_lr(lr0: f64, epoch: usize, total_epochs: usize) -> f64 {
    if total_epochs == 0 {
        return lr0;
    }
    let t = (epoch.min(total_epochs)) as f64 / total_epochs as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam(AdamHyper),
    Sgd { lr: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Cosine { total_epochs: usize },
    Constant,
}

/// Optimizer state across a whole parameter list: first/second moments per
/// parameter tensor, the shared step counter, and the schedule.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub kind: OptimizerKind,
    pub schedule: Schedule,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl OptimState {
    pub fn new(kind: OptimizerKind, schedule: Schedule, param_shapes: &[Vec<usize>]) -> Self {
        let zeros: Vec<Tensor> = param_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        OptimState {
            kind,
            schedule,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn base_lr(&self) -> f64 {
        match self.kind {
            OptimizerKind::Adam(h) => h.lr,
            OptimizerKind::Sgd { lr } => lr,
        }
    }

    /// Learning rate for a given epoch under the configured schedule.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Cosine { total_epochs } => cosine_lr(self.base_lr(), epoch, total_epochs),
            Schedule::Constant => self.base_lr(),
        }
    }

    /// Apply one update step to every parameter with the supplied gradients
    /// (aligned by index) at learning rate `lr`.
    pub fn apply(
        &mut self,
        params: &mut [&mut Tensor],
        grads: &[Tensor],
        lr: f64,
    ) -> Result<(), NeuralError> {
        if params.len() != grads.len() || params.len() != self.m.len() {
            return Err(NeuralError::Config(format!(
                "optimizer state tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Adam(hyper) => {
                for i in 0..params.len() {
                    let (theta, m, v) = adam_step(
                        params[i], &grads[i], &self.m[i], &self.v[i], self.step, &hyper, lr,
                    )?;
                    *params[i] = theta;
                    self.m[i] = m;
                    self.v[i] = v;
                }
            }
            OptimizerKind::Sgd { .. } => {
                for i in 0..params.len() {
                    *params[i] = sgd_step(params[i], &grads[i], lr)?;
                }
            }
        }
        Ok(())
    }
}
