//! View head, view-query gate and action head, batched forward and backward.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::backbone::{backward_backbone, forward_backbone, BackboneTrace};
use super::{ModelParams, Scalar};
use crate::dataset::Image;
use crate::error::{Error, Result};

/// Everything one image produces on the way through the network.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput<T> {
    /// Backbone features.
    pub f: Array1<T>,
    pub z_v: Array1<T>,
    pub p_v: Array1<T>,
    /// Gated (disentangled) features.
    pub f_hat: Array1<T>,
    pub z_a: Array1<T>,
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(z: ArrayView1<'_, T>) -> Array1<T> {
    let max = z.fold(T::neg_infinity(), |m, &x| m.max(x));
    let e = z.mapv(|x| (x - max).exp());
    let sum = e.fold(T::zero(), |acc, &x| acc + x);
    e.mapv(|x| x / sum)
}

pub fn view_probs<T: Scalar>(z_v: ArrayView1<'_, T>) -> Array1<T> {
    softmax(z_v)
}

fn affine<T: Scalar>(
    x: ArrayView1<'_, T>,
    w: ArrayView2<'_, T>,
    b: ArrayView1<'_, T>,
    what: &str,
) -> Result<Array1<T>> {
    if x.len() != w.nrows() {
        return Err(Error::shape(format!(
            "{what}: input has {} features, head expects {}",
            x.len(),
            w.nrows()
        )));
    }
    Ok(x.dot(&w) + b)
}

/// z_v = f W_v + b_v.
pub fn view_logits<T: Scalar>(f: ArrayView1<'_, T>, params: &ModelParams<T>) -> Result<Array1<T>> {
    let (w, b) = params.view_head();
    affine(f, w, b, "view head")
}

/// z_a = f_hat W_a + b_a.
pub fn action_logits<T: Scalar>(
    f_hat: ArrayView1<'_, T>,
    params: &ModelParams<T>,
) -> Result<Array1<T>> {
    let (w, b) = params.action_head();
    affine(f_hat, w, b, "action head")
}

/// Gate weights w[d] = sum_v Q[d,v] p[v], divided by sum_v p[v] (which is 1 for a
/// probability vector) so that an all-ones Q gives a gate of exactly 1.
/// Returns the gate and the probability mass it was normalised by.
fn gate_row<T: Scalar>(p: ArrayView1<'_, T>, q: ArrayView2<'_, T>) -> (Array1<T>, T) {
    let mass = p.fold(T::zero(), |acc, &x| acc + x);
    let w = q
        .axis_iter(Axis(0))
        .map(|row| {
            row.iter()
                .zip(p.iter())
                .fold(T::zero(), |acc, (&qv, &pv)| acc + qv * pv)
                / mass
        })
        .collect();
    (w, mass)
}

/// f_hat = (Q p) * f, element-wise.
pub fn disentangle<T: Scalar>(
    f: ArrayView1<'_, T>,
    p_v: ArrayView1<'_, T>,
    queries: ArrayView2<'_, T>,
) -> Result<Array1<T>> {
    if queries.nrows() != f.len() || queries.ncols() != p_v.len() {
        return Err(Error::shape(format!(
            "disentangle: f has {} entries, p_v has {}, queries are {}x{}",
            f.len(),
            p_v.len(),
            queries.nrows(),
            queries.ncols()
        )));
    }
    let (w, mass) = gate_row(p_v, queries);
    if mass.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::shape(
            "disentangle: p_v must have positive total mass",
        ));
    }
    Ok(&w * &f)
}

/// Upstream gradients of the loss w.r.t. each network output, one row per image.
#[derive(Debug, Clone)]
pub struct OutputGrads<T> {
    pub z_a: Array2<T>,
    pub z_v: Array2<T>,
    pub f_hat: Array2<T>,
    pub f: Array2<T>,
}

impl<T: Scalar> OutputGrads<T> {
    pub fn zeros(n: usize, features: usize, actions: usize, views: usize) -> Self {
        Self {
            z_a: Array2::zeros((n, actions)),
            z_v: Array2::zeros((n, views)),
            f_hat: Array2::zeros((n, features)),
            f: Array2::zeros((n, features)),
        }
    }
}

/// A batched forward pass with the intermediates needed for backward.
pub struct BatchTrace<T> {
    pub f: Array2<T>,
    pub z_v: Array2<T>,
    pub p_v: Array2<T>,
    pub w: Array2<T>,
    pub f_hat: Array2<T>,
    pub z_a: Array2<T>,
    /// View probabilities the gate was computed from; equal to `p_v` unless
    /// supplied from outside.
    gate_pv: Array2<T>,
    mass: Array1<T>,
    backbone: BackboneTrace<T>,
    /// When set, the action branch does not send gradient back through p_v.
    pub stop_gradient_pv: bool,
}

/// Run the whole network on a batch of images.
pub fn forward_batch<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
    stop_gradient_pv: bool,
) -> Result<BatchTrace<T>> {
    forward_batch_with_gate(params, images, stop_gradient_pv, None)
}

/// Like [`forward_batch`], but when `gate_pv` is given the gate uses those view
/// probabilities instead of the live ones. Holding them fixed gives the function
/// whose gradient the `stop_gradient_pv` backward pass computes.
pub fn forward_batch_with_gate<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
    stop_gradient_pv: bool,
    gate_pv: Option<ArrayView2<'_, T>>,
) -> Result<BatchTrace<T>> {
    let (f, backbone) = forward_backbone(params, images)?;
    let n = f.nrows();
    let (wv, bv) = params.view_head();
    let z_v = f.dot(&wv) + bv;
    let q = params.queries();
    if let Some(g) = &gate_pv {
        if g.dim() != z_v.dim() {
            return Err(Error::shape(format!(
                "gate probabilities are {:?}, expected {:?}",
                g.dim(),
                z_v.dim()
            )));
        }
    }

    let mut p_v = Array2::zeros(z_v.raw_dim());
    let mut gate = Array2::zeros(z_v.raw_dim());
    let mut w = Array2::zeros(f.raw_dim());
    let mut mass = Array1::zeros(n);
    for i in 0..n {
        let p = softmax(z_v.row(i));
        let used = match &gate_pv {
            Some(g) => g.row(i).to_owned(),
            None => p.clone(),
        };
        let (g, m) = gate_row(used.view(), q);
        p_v.row_mut(i).assign(&p);
        gate.row_mut(i).assign(&used);
        w.row_mut(i).assign(&g);
        mass[i] = m;
    }
    let f_hat = &w * &f;
    let (wa, ba) = params.action_head();
    let z_a = f_hat.dot(&wa) + ba;
    Ok(BatchTrace {
        f,
        z_v,
        p_v,
        w,
        f_hat,
        z_a,
        gate_pv: gate,
        mass,
        backbone,
        stop_gradient_pv,
    })
}

/// Single-image forward pass.
pub fn forward<T: Scalar>(
    image: &Image,
    params: &ModelParams<T>,
    stop_gradient_pv: bool,
) -> Result<ForwardOutput<T>> {
    Ok(forward_batch(params, &[image], stop_gradient_pv)?.output(0))
}

impl<T: Scalar> BatchTrace<T> {
    pub fn len(&self) -> usize {
        self.f.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn output(&self, i: usize) -> ForwardOutput<T> {
        ForwardOutput {
            f: self.f.row(i).to_owned(),
            z_v: self.z_v.row(i).to_owned(),
            p_v: self.p_v.row(i).to_owned(),
            f_hat: self.f_hat.row(i).to_owned(),
            z_a: self.z_a.row(i).to_owned(),
        }
    }

    /// Parameter gradients for upstream gradients `up`.
    pub fn backward(&self, params: &ModelParams<T>, up: &OutputGrads<T>) -> ModelParams<T> {
        let mut grads = params.zeros_like();
        let (wa, _) = params.action_head();
        let (wv, _) = params.view_head();
        let q = params.queries();

        // Action head.
        let d_wa = self.f_hat.t().dot(&up.z_a);
        let d_ba = up.z_a.sum_axis(Axis(0));
        let d_fhat = up.z_a.dot(&wa.t()) + &up.f_hat;

        // Gate: f_hat = w * f, w = Q p / sum(p).
        let d_w = &d_fhat * &self.f;
        let mut d_f = &d_fhat * &self.w + &up.f;
        let mass_col = self.mass.view().insert_axis(Axis(1));
        let p_scaled = &self.gate_pv / &mass_col;
        let d_q = d_w.t().dot(&p_scaled);

        let mut d_zv = up.z_v.clone();
        if !self.stop_gradient_pv {
            // dL/dp_v = (Q^T dw - <w, dw>) / sum(p)
            let w_dot = (&self.w * &d_w).sum_axis(Axis(1)).insert_axis(Axis(1));
            let d_p = (d_w.dot(&q) - &w_dot) / mass_col;
            // Softmax backward.
            let inner = (&self.p_v * &d_p).sum_axis(Axis(1)).insert_axis(Axis(1));
            d_zv = d_zv + &self.p_v * &(d_p - &inner);
        }

        // View head.
        let d_wv = self.f.t().dot(&d_zv);
        let d_bv = d_zv.sum_axis(Axis(0));
        d_f = d_f + d_zv.dot(&wv.t());

        {
            let heads = grads.head_tensors_mut();
            heads[0].data = d_q.iter().copied().collect();
            heads[1].data = d_wa.iter().copied().collect();
            heads[2].data = d_ba.to_vec();
            heads[3].data = d_wv.iter().copied().collect();
            heads[4].data = d_bv.to_vec();
        }
        backward_backbone(params, &self.backbone, d_f.view(), &mut grads);
        grads
    }
}
