//! Stride-2 3x3 conv + ReLU stack followed by global average pooling.
//!
//! Activations are kept in (channel, sample, y, x) order so each layer is one
//! GEMM over an im2col matrix whose columns run over (sample, y, x).

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::{ModelDims, ModelParams, Scalar};
use crate::dataset::Image;
use crate::error::{Error, Result};

pub(crate) struct ConvCache<T> {
    cols: Array2<T>,
    /// Post-ReLU output, (c_out, n * out_side^2).
    out: Array2<T>,
    in_side: usize,
    out_side: usize,
}

pub(crate) struct BackboneTrace<T> {
    n: usize,
    layers: Vec<ConvCache<T>>,
}

fn im2col<T: Scalar>(input: &[T], c_in: usize, n: usize, side: usize) -> (Array2<T>, usize) {
    let os = (side - 1) / 2 + 1;
    let plane = os * os;
    let ncols = n * plane;
    let mut cols = Array2::<T>::zeros((c_in * 9, ncols));
    let buf = cols.as_slice_mut().expect("standard layout");
    for c in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut buf[(c * 9 + ky * 3 + kx) * ncols..][..ncols];
                for s in 0..n {
                    let src = &input[(c * n + s) * side * side..][..side * side];
                    let dst = &mut row[s * plane..][..plane];
                    for oy in 0..os {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * side..][..side];
                        for ox in 0..os {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < side as isize {
                                dst[oy * os + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    (cols, os)
}

fn col2im<T: Scalar>(cols: &Array2<T>, c_in: usize, n: usize, side: usize) -> Array2<T> {
    let os = (side - 1) / 2 + 1;
    let plane = os * os;
    let ncols = n * plane;
    let mut out = Array2::<T>::zeros((c_in, n * side * side));
    let buf = out.as_slice_mut().expect("standard layout");
    let src = cols.as_slice().expect("standard layout");
    for c in 0..c_in {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[(c * 9 + ky * 3 + kx) * ncols..][..ncols];
                for s in 0..n {
                    let dst = &mut buf[(c * n + s) * side * side..][..side * side];
                    let col = &row[s * plane..][..plane];
                    for oy in 0..os {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= side as isize {
                            continue;
                        }
                        for ox in 0..os {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix >= 0 && ix < side as isize {
                                let d = &mut dst[iy as usize * side + ix as usize];
                                *d = *d + col[oy * os + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn check_image(image: &Image, dims: &ModelDims) -> Result<()> {
    if image.height() != dims.input_size || image.width() != dims.input_size {
        return Err(Error::shape(format!(
            "image is {}x{}, model expects {}x{}",
            image.height(),
            image.width(),
            dims.input_size,
            dims.input_size
        )));
    }
    Ok(())
}

/// Batched backbone pass. Returns the N x D feature matrix and what backward needs.
pub(crate) fn forward_backbone<T: Scalar>(
    params: &ModelParams<T>,
    images: &[&Image],
) -> Result<(Array2<T>, BackboneTrace<T>)> {
    let dims = params.dims();
    let n = images.len();
    if n == 0 {
        return Err(Error::shape("empty image batch"));
    }
    let side = dims.input_size;
    let plane = side * side;
    let mut input = vec![T::zero(); ModelDims::IN_CHANNELS * n * plane];
    for (s, img) in images.iter().enumerate() {
        check_image(img, dims)?;
        for c in 0..ModelDims::IN_CHANNELS {
            let dst = &mut input[(c * n + s) * plane..][..plane];
            for (d, &v) in dst.iter_mut().zip(img.channel(c)) {
                *d = T::from_f32_lossy(v);
            }
        }
    }

    let mut layers: Vec<ConvCache<T>> = Vec::with_capacity(dims.channels.len());
    let mut c_in = ModelDims::IN_CHANNELS;
    let mut in_side = side;
    for layer in 0..dims.channels.len() {
        let (w, b) = params.conv(layer);
        let (cols, out_side) = {
            let src: &[T] = match layers.last() {
                Some(prev) => prev.out.as_slice().expect("standard layout"),
                None => &input,
            };
            im2col(src, c_in, n, in_side)
        };
        let mut out = w.view2().dot(&cols);
        for (mut row, &bias) in out.axis_iter_mut(Axis(0)).zip(b.data.iter()) {
            row.mapv_inplace(|x| {
                let y = x + bias;
                if y > T::zero() {
                    y
                } else {
                    T::zero()
                }
            });
        }
        c_in = w.shape[0];
        layers.push(ConvCache {
            cols,
            out,
            in_side,
            out_side,
        });
        in_side = out_side;
    }

    let last = layers.last().expect("at least one layer");
    let plane = last.out_side * last.out_side;
    let inv = T::one() / T::from_usize(plane).expect("small integer");
    let d = dims.feature_dim();
    let mut f = Array2::<T>::zeros((n, d));
    let out = last.out.as_slice().expect("standard layout");
    for c in 0..d {
        for s in 0..n {
            let sum = out[c * n * plane + s * plane..][..plane]
                .iter()
                .fold(T::zero(), |acc, &x| acc + x);
            f[[s, c]] = sum * inv;
        }
    }
    Ok((f, BackboneTrace { n, layers }))
}

/// Accumulate backbone parameter gradients given dLoss/df (N x D).
pub(crate) fn backward_backbone<T: Scalar>(
    params: &ModelParams<T>,
    trace: &BackboneTrace<T>,
    df: ArrayView2<'_, T>,
    grads: &mut ModelParams<T>,
) {
    let n = trace.n;
    let num_layers = trace.layers.len();
    let last = &trace.layers[num_layers - 1];
    let plane = last.out_side * last.out_side;
    let inv = T::one() / T::from_usize(plane).expect("small integer");

    // Gradient w.r.t. the last layer's post-ReLU output.
    let mut d_out = Array2::<T>::zeros(last.out.raw_dim());
    {
        let buf = d_out.as_slice_mut().expect("standard layout");
        for c in 0..df.ncols() {
            for s in 0..n {
                let g = df[[s, c]] * inv;
                buf[c * n * plane + s * plane..][..plane].fill(g);
            }
        }
    }

    for layer in (0..num_layers).rev() {
        let cache = &trace.layers[layer];
        // Through the ReLU.
        ndarray::Zip::from(&mut d_out)
            .and(&cache.out)
            .for_each(|g, &o| {
                if o <= T::zero() {
                    *g = T::zero();
                }
            });
        let (w, _) = params.conv(layer);
        {
            let (gw, gb) = grads.conv_mut(layer);
            let dw = d_out.dot(&cache.cols.t());
            for (g, &x) in gw.data.iter_mut().zip(dw.iter()) {
                *g = *g + x;
            }
            for (g, row) in gb.data.iter_mut().zip(d_out.axis_iter(Axis(0))) {
                *g = *g + row.sum();
            }
        }
        if layer > 0 {
            let d_cols = w.view2().t().dot(&d_out);
            let c_in = w.shape[1] / 9;
            d_out = col2im(&d_cols, c_in, n, cache.in_side);
        }
    }
}

/// Feature vector f for one image.
pub fn backbone_forward<T: Scalar>(image: &Image, params: &ModelParams<T>) -> Result<Array1<T>> {
    let (f, _) = forward_backbone(params, &[image])?;
    Ok(f.row(0).to_owned())
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::QueryInit;

    #[test]
    fn zero_image_zero_bias_gives_zero_features() {
        let dims = ModelDims::reference(32, 6, 4);
        let params =
            ModelParams::<f32>::init(dims, QueryInit::Normal, &mut ChaCha8Rng::seed_from_u64(0))
                .unwrap();
        let f = backbone_forward(&Image::zeros(32, 32), &params).unwrap();
        assert_eq!(f.len(), 64);
        assert!(f.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn wrong_input_size_is_a_shape_error() {
        let params = ModelParams::<f32>::zeros(ModelDims::reference(32, 6, 4)).unwrap();
        assert!(matches!(
            backbone_forward(&Image::zeros(16, 16), &params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, n, side) = (2, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        use rand::Rng;
        let x: Vec<f64> = (0..c * n * side * side)
            .map(|_| rng.random::<f64>())
            .collect();
        let (cols, os) = im2col(&x, c, n, side);
        let y = Array2::from_shape_fn((c * 9, n * os * os), |_| rng.random::<f64>());
        let lhs: f64 = cols.iter().zip(y.iter()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, c, n, side);
        let rhs: f64 = x.iter().zip(back.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn batched_rows_match_single_images() {
        let dims = ModelDims {
            input_size: 9,
            channels: vec![4, 5],
            num_actions: 2,
            num_views: 2,
        };
        let params =
            ModelParams::<f64>::init(dims, QueryInit::Normal, &mut ChaCha8Rng::seed_from_u64(2))
                .unwrap();
        let imgs: Vec<Image> = (0..3)
            .map(|k| {
                let data = (0..3 * 81)
                    .map(|i| ((i * 7 + k * 13) % 17) as f32 / 16.0)
                    .collect();
                Image::new(9, 9, data).unwrap()
            })
            .collect();
        let refs: Vec<&Image> = imgs.iter().collect();
        let (f, _) = forward_backbone(&params, &refs).unwrap();
        for (k, img) in imgs.iter().enumerate() {
            let single = backbone_forward(img, &params).unwrap();
            for (a, b) in single.iter().zip(f.row(k)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
