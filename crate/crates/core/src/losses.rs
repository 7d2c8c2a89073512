//! Anchor cross-entropies, the two opposing triplet losses and their weighted sum.
//!
//! Batch terms are means over triplets. Triplet distances are smoothed as
//! `sqrt(|x - y|^2 + 1e-12)` so their gradient stays finite at `x == y`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{softmax, BatchTrace, OutputGrads, Scalar};

pub const DISTANCE_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_ac: f64,
    pub lambda_vc: f64,
    /// Triplet margin.
    pub delta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_ac: 1.0,
            lambda_vc: 1.0,
            delta: 1.0,
        }
    }
}

impl LossWeights {
    pub fn cross_entropy_only() -> Self {
        Self {
            lambda_ac: 0.0,
            lambda_vc: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_ac >= 0.0 && self.lambda_ac.is_finite()) {
            return Err(Error::config(
                "loss_weights.lambda_ac must be finite and >= 0",
            ));
        }
        if !(self.lambda_vc >= 0.0 && self.lambda_vc.is_finite()) {
            return Err(Error::config(
                "loss_weights.lambda_vc must be finite and >= 0",
            ));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::config("loss_weights.delta must be finite and > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_ace: f64,
    pub l_vce: f64,
    pub l_ac: f64,
    pub l_vc: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn compose(l_ace: f64, l_vce: f64, l_ac: f64, l_vc: f64, w: &LossWeights) -> Self {
        Self {
            l_ace,
            l_vce,
            l_ac,
            l_vc,
            total: l_ace + l_vce + w.lambda_ac * l_ac + w.lambda_vc * l_vc,
        }
    }
}

fn to_f64<T: Scalar>(x: T) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

/// `-log softmax(logits)[label]` via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: ArrayView1<'_, T>, label: usize) -> Result<T> {
    if label >= logits.len() {
        return Err(Error::Label {
            label,
            classes: logits.len(),
        });
    }
    let max = logits.fold(T::neg_infinity(), |m, &x| m.max(x));
    let sum = logits.fold(T::zero(), |acc, &x| acc + (x - max).exp());
    Ok(max + sum.ln() - logits[label])
}

pub fn euclidean_distance<T: Scalar>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(Error::shape(format!(
            "distance between vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    Ok(x.iter()
        .zip(y.iter())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b))
        .sqrt())
}

fn smoothed_distance<T: Scalar>(x: ArrayView1<'_, T>, y: ArrayView1<'_, T>) -> T {
    let sq = x
        .iter()
        .zip(y.iter())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    (sq + T::from_f64_lossy(DISTANCE_EPS)).sqrt()
}

fn check_triplet_shapes<T>(
    a: &ArrayView2<'_, T>,
    p: &ArrayView2<'_, T>,
    n: &ArrayView2<'_, T>,
) -> Result<()> {
    if a.dim() != p.dim() || a.dim() != n.dim() {
        return Err(Error::shape(format!(
            "triplet embeddings have shapes {:?}, {:?}, {:?}",
            a.dim(),
            p.dim(),
            n.dim()
        )));
    }
    if a.nrows() == 0 {
        return Err(Error::shape("empty triplet batch"));
    }
    Ok(())
}

/// Mean over rows of `max(0, delta + d(anchor, positive) - d(anchor, negative))`,
/// with optional gradients w.r.t. each input (already divided by the batch size).
fn triplet_margin_impl<T: Scalar>(
    anchor: ArrayView2<'_, T>,
    positive: ArrayView2<'_, T>,
    negative: ArrayView2<'_, T>,
    delta: T,
    want_grad: bool,
) -> Result<(T, Option<[Array2<T>; 3]>)> {
    check_triplet_shapes(&anchor, &positive, &negative)?;
    let n = anchor.nrows();
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut grads = want_grad.then(|| {
        [
            Array2::zeros(anchor.raw_dim()),
            Array2::zeros(anchor.raw_dim()),
            Array2::zeros(anchor.raw_dim()),
        ]
    });
    let mut sum = T::zero();
    for i in 0..n {
        let (a, p, q) = (anchor.row(i), positive.row(i), negative.row(i));
        let d_pos = smoothed_distance(a, p);
        let d_neg = smoothed_distance(a, q);
        let hinge = delta + (d_pos - d_neg);
        if hinge > T::zero() {
            sum = sum + hinge;
            if let Some([ga, gp, gn]) = grads.as_mut() {
                let u_pos = (&a - &p).mapv(|x| x / d_pos * inv_n);
                let u_neg = (&a - &q).mapv(|x| x / d_neg * inv_n);
                ga.row_mut(i).assign(&(&u_pos - &u_neg));
                gp.row_mut(i).assign(&u_pos.mapv(|x| -x));
                gn.row_mut(i).assign(&u_neg);
            }
        }
    }
    Ok((sum * inv_n, grads))
}

/// Mean triplet hinge over rows; `positive` is pulled in, `negative` pushed out.
pub fn triplet_margin<T: Scalar>(
    anchor: ArrayView2<'_, T>,
    positive: ArrayView2<'_, T>,
    negative: ArrayView2<'_, T>,
    delta: T,
) -> Result<T> {
    Ok(triplet_margin_impl(anchor, positive, negative, delta, false)?.0)
}

/// Action triplet loss on gated features: same-action partner is the positive,
/// same-view partner the negative.
pub fn triplet_action<T: Scalar>(
    fhat_a: ArrayView2<'_, T>,
    fhat_sa: ArrayView2<'_, T>,
    fhat_sv: ArrayView2<'_, T>,
    delta: T,
) -> Result<T> {
    triplet_margin(fhat_a, fhat_sa, fhat_sv, delta)
}

/// View triplet loss on backbone features: roles reversed relative to the
/// action loss.
pub fn triplet_view<T: Scalar>(
    f_a: ArrayView2<'_, T>,
    f_sv: ArrayView2<'_, T>,
    f_sa: ArrayView2<'_, T>,
    delta: T,
) -> Result<T> {
    triplet_margin(f_a, f_sv, f_sa, delta)
}

/// Network outputs for a triplet batch, split by member.
#[derive(Debug, Clone)]
pub struct TripletOutputs<'a, T> {
    pub f: [ArrayView2<'a, T>; 3],
    pub f_hat: [ArrayView2<'a, T>; 3],
    /// Anchor action logits (N x A).
    pub anchor_z_a: ArrayView2<'a, T>,
    /// Anchor view logits (N x V).
    pub anchor_z_v: ArrayView2<'a, T>,
}

/// Index of each member within the stacked batch.
pub const ANCHOR: usize = 0;
pub const SAME_VIEW: usize = 1;
pub const SAME_ACTION: usize = 2;

impl<'a, T: Scalar> TripletOutputs<'a, T> {
    /// Split a trace of 3N rows laid out as anchors, same-view partners,
    /// same-action partners.
    pub fn from_trace(trace: &'a BatchTrace<T>) -> Result<Self> {
        let rows = trace.len();
        if rows == 0 || !rows.is_multiple_of(3) {
            return Err(Error::shape(format!(
                "triplet trace needs 3N rows, got {rows}"
            )));
        }
        let n = rows / 3;
        let part = |m: &'a Array2<T>, k: usize| m.slice(ndarray::s![k * n..(k + 1) * n, ..]);
        Ok(Self {
            f: [part(&trace.f, 0), part(&trace.f, 1), part(&trace.f, 2)],
            f_hat: [
                part(&trace.f_hat, 0),
                part(&trace.f_hat, 1),
                part(&trace.f_hat, 2),
            ],
            anchor_z_a: part(&trace.z_a, 0),
            anchor_z_v: part(&trace.z_v, 0),
        })
    }

    pub fn len(&self) -> usize {
        self.anchor_z_a.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Anchor labels, one per triplet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnchorLabels {
    pub actions: Vec<usize>,
    pub views: Vec<usize>,
}

fn mean_cross_entropy<T: Scalar>(
    logits: ArrayView2<'_, T>,
    labels: &[usize],
    grad: Option<&mut Array2<T>>,
) -> Result<f64> {
    let n = logits.nrows();
    let inv_n = T::one() / T::from_usize(n).expect("batch size");
    let mut sum = 0.0;
    let mut grad = grad;
    for (i, &y) in labels.iter().enumerate() {
        sum += to_f64(cross_entropy(logits.row(i), y)?);
        if let Some(g) = grad.as_deref_mut() {
            let mut p = softmax(logits.row(i));
            p[y] = p[y] - T::one();
            g.row_mut(i).assign(&p.mapv(|x| x * inv_n));
        }
    }
    Ok(sum / n as f64)
}

fn composite<T: Scalar>(
    out: &TripletOutputs<'_, T>,
    labels: &AnchorLabels,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(LossBreakdown, Option<[OutputGrads<T>; 3]>)> {
    weights.validate()?;
    let n = out.len();
    if labels.actions.len() != n || labels.views.len() != n {
        return Err(Error::shape(format!(
            "{n} triplets but {} action and {} view labels",
            labels.actions.len(),
            labels.views.len()
        )));
    }
    let (d, a, v) = (
        out.f[0].ncols(),
        out.anchor_z_a.ncols(),
        out.anchor_z_v.ncols(),
    );
    let mut grads = want_grad.then(|| {
        [
            OutputGrads::zeros(n, d, a, v),
            OutputGrads::zeros(n, d, a, v),
            OutputGrads::zeros(n, d, a, v),
        ]
    });

    let l_ace = mean_cross_entropy(
        out.anchor_z_a,
        &labels.actions,
        grads.as_mut().map(|g| &mut g[ANCHOR].z_a),
    )?;
    let l_vce = mean_cross_entropy(
        out.anchor_z_v,
        &labels.views,
        grads.as_mut().map(|g| &mut g[ANCHOR].z_v),
    )?;

    let delta = T::from_f64_lossy(weights.delta);
    let (l_ac, g_ac) = triplet_margin_impl(
        out.f_hat[ANCHOR],
        out.f_hat[SAME_ACTION],
        out.f_hat[SAME_VIEW],
        delta,
        want_grad,
    )?;
    let (l_vc, g_vc) = triplet_margin_impl(
        out.f[ANCHOR],
        out.f[SAME_VIEW],
        out.f[SAME_ACTION],
        delta,
        want_grad,
    )?;

    if let (Some(g), Some([ga, gp, gn]), Some([va, vp, vn])) = (grads.as_mut(), g_ac, g_vc) {
        let lac = T::from_f64_lossy(weights.lambda_ac);
        let lvc = T::from_f64_lossy(weights.lambda_vc);
        g[ANCHOR].f_hat = ga.mapv(|x| x * lac);
        g[SAME_ACTION].f_hat = gp.mapv(|x| x * lac);
        g[SAME_VIEW].f_hat = gn.mapv(|x| x * lac);
        g[ANCHOR].f = va.mapv(|x| x * lvc);
        g[SAME_VIEW].f = vp.mapv(|x| x * lvc);
        g[SAME_ACTION].f = vn.mapv(|x| x * lvc);
    }

    let breakdown = LossBreakdown::compose(l_ace, l_vce, to_f64(l_ac), to_f64(l_vc), weights);
    Ok((breakdown, grads))
}

/// The weighted sum of the four loss terms.
pub fn total_loss<T: Scalar>(
    out: &TripletOutputs<'_, T>,
    labels: &AnchorLabels,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    Ok(composite(out, labels, weights, false)?.0)
}

/// Loss and the gradient of `total` w.r.t. every row of the stacked 3N trace.
pub fn total_loss_with_grad<T: Scalar>(
    trace: &BatchTrace<T>,
    labels: &AnchorLabels,
    weights: &LossWeights,
) -> Result<(LossBreakdown, OutputGrads<T>)> {
    let out = TripletOutputs::from_trace(trace)?;
    let (breakdown, parts) = composite(&out, labels, weights, true)?;
    let parts = parts.expect("gradients requested");
    let stack = |pick: fn(&OutputGrads<T>) -> &Array2<T>| -> Array2<T> {
        ndarray::concatenate(
            Axis(0),
            &[
                pick(&parts[0]).view(),
                pick(&parts[1]).view(),
                pick(&parts[2]).view(),
            ],
        )
        .expect("equal widths")
    };
    let grads = OutputGrads {
        z_a: stack(|g| &g.z_a),
        z_v: stack(|g| &g.z_v),
        f_hat: stack(|g| &g.f_hat),
        f: stack(|g| &g.f),
    };
    Ok((breakdown, grads))
}
