use crate::model::{ModelParams, ParamKind, Scalar};

/// Momentum SGD with decoupled weight-decay scope.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdStep {
    pub lr: f64,
    pub momentum: f64,
    /// Applied to weight matrices only; biases and view queries are not decayed.
    pub weight_decay: f64,
    /// Leave the view queries untouched.
    pub freeze_queries: bool,
}

/// `v <- momentum * v - lr * (g + wd * theta)`, `theta <- theta + v`.
pub fn sgd_update<T: Scalar>(
    params: &mut ModelParams<T>,
    velocity: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    step: &SgdStep,
) {
    let lr = T::from_f64_lossy(step.lr);
    let mu = T::from_f64_lossy(step.momentum);
    let wd = T::from_f64_lossy(step.weight_decay);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(velocity.tensors_mut().iter_mut())
        .zip(grads.tensors());
    for ((p, v), g) in tensors {
        if step.freeze_queries && p.kind == ParamKind::Query {
            continue;
        }
        let decay = p.kind == ParamKind::Weight;
        for ((theta, vel), &grad) in p.data.iter_mut().zip(v.data.iter_mut()).zip(&g.data) {
            let g = if decay { grad + wd * *theta } else { grad };
            *vel = mu * *vel - lr * g;
            *theta = *theta + *vel;
        }
    }
}
