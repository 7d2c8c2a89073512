//! The network: a small convolutional backbone producing `f`, a view head whose
//! softmax output weights the learnable view queries into a per-feature gate,
//! and an action head on the gated features.
//!
//! All parameters live in a flat list of named [`Tensor`]s so the optimizer,
//! the gradient checker and the checkpoint writer can treat them uniformly.
//! Gradients use the same container.

mod backbone;
mod heads;

use std::fmt::{Debug, Display};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use backbone::backbone_forward;
pub use heads::{
    action_logits, disentangle, forward, forward_batch, forward_batch_with_gate, softmax,
    view_logits, view_probs, BatchTrace, ForwardOutput, OutputGrads,
};

/// Floating point types the network runs in.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
    /// Element-type tag used in checkpoints.
    const DTYPE: &'static str;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn from_f32_lossy(v: f32) -> Self {
        Self::from_f32(v).expect("finite conversion")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    pub input_size: usize,
    /// Output channels of each stride-2 3x3 conv; the last is the feature dimension D.
    pub channels: Vec<usize>,
    pub num_actions: usize,
    pub num_views: usize,
}

impl ModelDims {
    pub const IN_CHANNELS: usize = 3;

    /// The reference backbone: 16, 32, 64 channels, D = 64.
    pub fn reference(input_size: usize, num_actions: usize, num_views: usize) -> Self {
        Self {
            input_size,
            channels: vec![16, 32, 64],
            num_actions,
            num_views,
        }
    }

    pub fn feature_dim(&self) -> usize {
        *self.channels.last().expect("validated non-empty")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "model channels must be a non-empty list of positive sizes",
            ));
        }
        if self.input_size < 1 {
            return Err(Error::config("input_size must be positive"));
        }
        if self.num_actions < 2 || self.num_views < 2 {
            return Err(Error::config("model needs at least 2 actions and 2 views"));
        }
        Ok(())
    }

    /// Spatial side after `layer + 1` convolutions (3x3, stride 2, padding 1).
    pub fn spatial_after(&self, layer: usize) -> usize {
        (0..=layer).fold(self.input_size, |s, _| (s - 1) / 2 + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Bias,
    Query,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    fn zeros(name: String, kind: ParamKind, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name,
            kind,
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn view2(&self) -> ArrayView2<'_, T> {
        ArrayView2::from_shape((self.shape[0], self.shape[1]), &self.data).expect("2-d tensor")
    }

    pub fn view2_mut(&mut self) -> ArrayViewMut2<'_, T> {
        ArrayViewMut2::from_shape((self.shape[0], self.shape[1]), &mut self.data)
            .expect("2-d tensor")
    }

    pub fn view1(&self) -> ArrayView1<'_, T> {
        ArrayView1::from(&self.data[..])
    }

    pub fn view1_mut(&mut self) -> ArrayViewMut1<'_, T> {
        ArrayViewMut1::from(&mut self.data[..])
    }
}

/// How the view queries start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryInit {
    /// Standard normal entries.
    Normal,
    /// All ones: the gate is the identity.
    Ones,
}

/// Every learnable array of the network (or a gradient of the same shape).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    dims: ModelDims,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// All-zero parameters (also used as a gradient accumulator).
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let (d, a, v) = (dims.feature_dim(), dims.num_actions, dims.num_views);
        let mut tensors = Vec::new();
        let mut c_in = ModelDims::IN_CHANNELS;
        for (i, &c_out) in dims.channels.iter().enumerate() {
            tensors.push(Tensor::zeros(
                format!("backbone.conv{i}.weight"),
                ParamKind::Weight,
                vec![c_out, c_in * 9],
            ));
            tensors.push(Tensor::zeros(
                format!("backbone.conv{i}.bias"),
                ParamKind::Bias,
                vec![c_out],
            ));
            c_in = c_out;
        }
        tensors.push(Tensor::zeros(
            "queries".into(),
            ParamKind::Query,
            vec![d, v],
        ));
        tensors.push(Tensor::zeros(
            "action_head.weight".into(),
            ParamKind::Weight,
            vec![d, a],
        ));
        tensors.push(Tensor::zeros(
            "action_head.bias".into(),
            ParamKind::Bias,
            vec![a],
        ));
        tensors.push(Tensor::zeros(
            "view_head.weight".into(),
            ParamKind::Weight,
            vec![d, v],
        ));
        tensors.push(Tensor::zeros(
            "view_head.bias".into(),
            ParamKind::Bias,
            vec![v],
        ));
        Ok(Self { dims, tensors })
    }

    /// Zero-mean uniform weights scaled by fan-in, zero biases, queries per `queries`.
    pub fn init<R: Rng + ?Sized>(dims: ModelDims, queries: QueryInit, rng: &mut R) -> Result<Self> {
        let mut params = Self::zeros(dims)?;
        for t in &mut params.tensors {
            match t.kind {
                ParamKind::Weight => {
                    let is_conv = t.name.starts_with("backbone");
                    let fan_in = if is_conv { t.shape[1] } else { t.shape[0] } as f64;
                    // He-uniform for the ReLU convs, 1/sqrt(fan_in) for the linear heads.
                    let bound = if is_conv {
                        (6.0 / fan_in).sqrt()
                    } else {
                        1.0 / fan_in.sqrt()
                    };
                    for x in &mut t.data {
                        *x = T::from_f64_lossy(rng.random_range(-bound..bound));
                    }
                }
                ParamKind::Bias => {}
                ParamKind::Query => {
                    for x in &mut t.data {
                        *x = match queries {
                            QueryInit::Normal => {
                                let z: f64 = StandardNormal.sample(rng);
                                T::from_f64_lossy(z)
                            }
                            QueryInit::Ones => T::one(),
                        };
                    }
                }
            }
        }
        Ok(params)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            dims: self.dims.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.kind, t.shape.clone()))
                .collect(),
        }
    }

    /// Rebuild from named tensors, checking names and shapes against `dims`.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let template = Self::zeros(dims)?;
        if template.tensors.len() != tensors.len() {
            return Err(Error::shape(format!(
                "expected {} parameter arrays, got {}",
                template.tensors.len(),
                tensors.len()
            )));
        }
        for (want, got) in template.tensors.iter().zip(&tensors) {
            if want.name != got.name || want.shape != got.shape || want.kind != got.kind {
                return Err(Error::shape(format!(
                    "parameter {} {:?} does not match expected {} {:?}",
                    got.name, got.shape, want.name, want.shape
                )));
            }
        }
        Ok(Self {
            dims: template.dims,
            tensors,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn head_base(&self) -> usize {
        2 * self.dims.channels.len()
    }

    pub(crate) fn conv(&self, layer: usize) -> (&Tensor<T>, &Tensor<T>) {
        (&self.tensors[2 * layer], &self.tensors[2 * layer + 1])
    }

    pub(crate) fn conv_mut(&mut self, layer: usize) -> (&mut Tensor<T>, &mut Tensor<T>) {
        let (w, rest) = self.tensors[2 * layer..].split_at_mut(1);
        (&mut w[0], &mut rest[0])
    }

    pub fn queries(&self) -> ArrayView2<'_, T> {
        self.tensors[self.head_base()].view2()
    }

    pub fn queries_mut(&mut self) -> ArrayViewMut2<'_, T> {
        let i = self.head_base();
        self.tensors[i].view2_mut()
    }

    pub fn action_head(&self) -> (ArrayView2<'_, T>, ArrayView1<'_, T>) {
        let i = self.head_base();
        (self.tensors[i + 1].view2(), self.tensors[i + 2].view1())
    }

    pub fn view_head(&self) -> (ArrayView2<'_, T>, ArrayView1<'_, T>) {
        let i = self.head_base();
        (self.tensors[i + 3].view2(), self.tensors[i + 4].view1())
    }

    pub(crate) fn head_tensors_mut(&mut self) -> &mut [Tensor<T>] {
        let i = self.head_base();
        &mut self.tensors[i..]
    }

    /// Element-wise conversion to another precision.
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            dims: self.dims.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    kind: t.kind,
                    shape: t.shape.clone(),
                    data: t
                        .data
                        .iter()
                        .map(|x| U::from_f64_lossy(x.to_f64().expect("finite")))
                        .collect(),
                })
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &Self, scale: T) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x = *x + scale * *y;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn reference_layout() {
        let dims = ModelDims::reference(32, 6, 4);
        assert_eq!(dims.feature_dim(), 64);
        assert_eq!(dims.spatial_after(2), 4);
        let p = ModelParams::<f32>::zeros(dims).unwrap();
        let names: Vec<&str> = p.tensors().iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names[0], "backbone.conv0.weight");
        assert_eq!(p.queries().dim(), (64, 4));
        assert_eq!(p.action_head().0.dim(), (64, 6));
        assert_eq!(p.view_head().1.len(), 4);
        assert_eq!(
            p.tensor("backbone.conv1.weight").unwrap().shape,
            vec![32, 144]
        );
    }

    #[test]
    fn init_is_seeded_and_queries_follow_mode() {
        let dims = ModelDims::reference(16, 3, 2);
        let a = ModelParams::<f32>::init(
            dims.clone(),
            QueryInit::Normal,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let b = ModelParams::<f32>::init(
            dims.clone(),
            QueryInit::Normal,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(a, b);
        assert!(a
            .tensor("backbone.conv0.bias")
            .unwrap()
            .data
            .iter()
            .all(|&x| x == 0.0));
        let ones =
            ModelParams::<f32>::init(dims, QueryInit::Ones, &mut ChaCha8Rng::seed_from_u64(1))
                .unwrap();
        assert!(ones.queries().iter().all(|&q| q == 1.0));
        let mean: f32 = a.queries().iter().sum::<f32>() / a.queries().len() as f32;
        assert!(mean.abs() < 0.5);
    }

    #[test]
    fn from_tensors_checks_layout() {
        let dims = ModelDims::reference(16, 3, 2);
        let p = ModelParams::<f64>::zeros(dims.clone()).unwrap();
        let mut t = p.tensors().to_vec();
        assert!(ModelParams::from_tensors(dims.clone(), t.clone()).is_ok());
        t[0].shape = vec![1, 2];
        assert!(ModelParams::from_tensors(dims, t).is_err());
    }
}
