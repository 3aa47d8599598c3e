use super::ModelCheckpoint;
use crate::error::{Error, Result};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

impl AdamW {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected AdamW update of every unfrozen parameter.
///
/// Gradients are consumed (cleared) by the step.
pub fn adamw_step(ckpt: &mut ModelCheckpoint, opt: &AdamW) -> Result<()> {
    let trainable: Vec<String> = ckpt
        .names()
        .filter(|n| !ckpt.is_frozen(n))
        .map(str::to_string)
        .collect();
    for name in &trainable {
        if ckpt.get(name)?.grad.is_none() {
            return Err(Error::MissingGrad(name.clone()));
        }
    }
    ckpt.optimizer.step += 1;
    let t = ckpt.optimizer.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for name in trainable {
        let (param, (m, v)) = ckpt.param_and_moments(&name)?;
        let grad = param.grad.take().expect("checked above");
        for ((p, g), (mi, vi)) in param
            .values_mut()
            .iter_mut()
            .zip(&grad)
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = *g as f64;
            let m_new = opt.beta1 * *mi as f64 + (1.0 - opt.beta1) * g;
            let v_new = opt.beta2 * *vi as f64 + (1.0 - opt.beta2) * g * g;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let m_hat = m_new / bc1;
            let v_hat = v_new / bc2;
            let w = *p as f64;
            *p = (w - opt.lr * m_hat / (v_hat.sqrt() + opt.eps) - opt.lr * opt.weight_decay * w) as f32;
        }
    }
    Ok(())
}
