use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments plus the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One AdamW update with decoupled weight decay:
///
/// ```text
/// m ← β₁ m + (1 − β₁) g        v ← β₂ v + (1 − β₂) g²
/// p ← p − lr · m̂ / (√v̂ + ε) − lr · λ · p
/// ```
///
/// with bias-corrected `m̂ = m / (1 − β₁ᵗ)`, `v̂ = v / (1 − β₂ᵗ)`. The decay
/// term uses the pre-update `p`. `names` label the parameters in errors. A
/// non-finite gradient aborts before anything is modified.
pub fn adamw_step(
    params: &mut [Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    opt: &AdamW,
    names: &[&str],
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim("adamw_step", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(
                "adamw_step gradient",
                format!("{:?}", p.shape()),
                format!("{:?}", g.shape()),
            ));
        }
        if !g.is_finite() {
            let name = names.get(i).copied().unwrap_or("?");
            return Err(Error::Training {
                step: state.t,
                message: format!("non-finite gradient for parameter {name}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let ps = p.as_mut_slice();
        let (ms, vs) = (m.as_mut_slice(), v.as_mut_slice());
        for i in 0..ps.len() {
            let gi = g.as_slice()[i];
            ms[i] = opt.beta1 * ms[i] + (1.0 - opt.beta1) * gi;
            vs[i] = opt.beta2 * vs[i] + (1.0 - opt.beta2) * gi * gi;
            let m_hat = ms[i] / bc1;
            let v_hat = vs[i] / bc2;
            ps[i] = ps[i] - opt.lr * m_hat / (v_hat.sqrt() + opt.eps) - opt.lr * opt.weight_decay * ps[i];
        }
    }
    Ok(())
}
