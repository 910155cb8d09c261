//! Differentiable tensor building blocks on top of candle's autodiff.
//!
//! Convolution goes through an explicit im2col/col2im pair plus a matmul;
//! resizes are separable interpolation matrices so their gradients come for
//! free from matmul.

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, WithDType, D};

use crate::error::Result;
use crate::resample;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeometry {
    fn out_dims(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(row, input_offset, output_offset)` for every valid tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (ho, wo) = self.out_dims();
        let k = self.kernel;
        for c in 0..self.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let in_row = (c * self.height + iy as usize) * self.width;
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.width {
                                f(row, in_row + ix as usize, oy * wo + ox);
                            }
                        }
                    }
                }
            }
        }
    }
}

struct Im2Col(ConvGeometry);
struct Col2Im(ConvGeometry);

fn im2col<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_dims();
    let cols = ho * wo;
    let per_in = g.channels * g.height * g.width;
    let per_out = g.rows() * cols;
    let mut dst = vec![T::zero(); batch * per_out];
    for b in 0..batch {
        let s = &src[b * per_in..(b + 1) * per_in];
        let d = &mut dst[b * per_out..(b + 1) * per_out];
        g.for_each_tap(|row, i, o| d[row * cols + o] = s[i]);
    }
    dst
}

fn col2im<T: WithDType>(src: &[T], batch: usize, g: ConvGeometry) -> Vec<T> {
    let (ho, wo) = g.out_dims();
    let cols = ho * wo;
    let per_in = g.channels * g.height * g.width;
    let per_out = g.rows() * cols;
    let mut dst = vec![T::zero(); batch * per_in];
    for b in 0..batch {
        let s = &src[b * per_out..(b + 1) * per_out];
        let d = &mut dst[b * per_in..(b + 1) * per_in];
        g.for_each_tap(|row, i, o| d[i] += s[row * cols + o]);
    }
    dst
}

macro_rules! float_dispatch {
    ($storage:expr, $layout:expr, $f:ident, $($arg:expr),*) => {{
        let (start, end) = $layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("expected a contiguous tensor".into()))?;
        match $storage {
            CpuStorage::F32(v) => CpuStorage::F32($f(&v[start..end], $($arg),*)),
            CpuStorage::F64(v) => CpuStorage::F64($f(&v[start..end], $($arg),*)),
            _ => candle_core::bail!("only f32 and f64 are supported"),
        }
    }};
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = layout.dims()[0];
        let g = self.0;
        let (ho, wo) = g.out_dims();
        let out = float_dispatch!(storage, layout, im2col, batch, g);
        Ok((out, Shape::from((batch, g.rows(), ho * wo))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let batch = layout.dims()[0];
        let g = self.0;
        let out = float_dispatch!(storage, layout, col2im, batch, g);
        Ok((out, Shape::from((batch, g.channels, g.height, g.width))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1(Im2Col(self.0))?))
    }
}

/// 2D convolution of `(B, C, H, W)` input with `(O, C, K, K)` weights and an
/// optional `(O,)` bias; zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = weight.dims4()?;
    if ci != c || k != k2 {
        return Err(crate::Error::shape("conv2d weight", (o, c, k, k), (o, ci, k, k2)));
    }
    let g = ConvGeometry {
        channels: c,
        height: h,
        width: w,
        kernel: k,
        stride,
        pad,
    };
    let (ho, wo) = g.out_dims();
    let y = if k == 1 && stride == 1 && pad == 0 {
        let cols = x.reshape((b, c, h * w))?;
        weight.reshape((o, c))?.broadcast_matmul(&cols)?
    } else {
        let cols = x.contiguous()?.apply_op1(Im2Col(g))?;
        weight.reshape((o, g.rows()))?.broadcast_matmul(&cols)?
    };
    let y = y.reshape((b, o, ho, wo))?;
    Ok(match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1, 1))?)?,
        None => y,
    })
}

struct Sigmoid;

fn sigmoid_slice<T: WithDType>(v: &[T]) -> Vec<T> {
    v.iter()
        .map(|&x| {
            let x = x.to_f64();
            T::from_f64(if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            })
        })
        .collect()
}

impl CustomOp1 for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = float_dispatch!(storage, layout, sigmoid_slice,);
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let d = (res * res.affine(-1.0, 1.0)?)?;
        Ok(Some((grad * d)?))
    }
}

/// Numerically stable logistic sigmoid.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Sigmoid)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&x.affine(slope, 0.0)?)?)
}

/// `x * sigmoid(1.702 x)`, the activation used by CLIP transformers.
pub fn quick_gelu(x: &Tensor) -> Result<Tensor> {
    Ok((x * sigmoid(&x.affine(1.702, 0.0)?)?)?)
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&s)?)
}

pub fn layer_norm(x: &Tensor, weight: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + eps)?.sqrt()?)?;
    Ok(normed.broadcast_mul(weight)?.broadcast_add(bias)?)
}

/// `x @ W^T + b` with `(out, in)` weights, for inputs of any rank.
pub fn linear(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&weight.t()?)?;
    Ok(match bias {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

fn matrix(data: Vec<f64>, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Bilinear resize of the last two dims of a rank-4 tensor.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ry = matrix(resample::linear_matrix(h, height), height, h, x.dtype())?;
    let rx = matrix(resample::linear_matrix(w, width), width, w, x.dtype())?;
    Ok(ry.broadcast_matmul(&x.broadcast_matmul(&rx.t()?)?)?)
}

/// Bicubic resize of the last two dims of a rank-3 or rank-4 tensor.
pub fn resize_bicubic(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let dims = x.dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ry = matrix(resample::cubic_matrix(h, height), height, h, x.dtype())?;
    let rx = matrix(resample::cubic_matrix(w, width), width, w, x.dtype())?;
    Ok(ry.broadcast_matmul(&x.broadcast_matmul(&rx.t()?)?)?)
}

fn index_tensor(idx: Vec<u32>) -> Result<Tensor> {
    let n = idx.len();
    Ok(Tensor::from_vec(idx, n, &Device::Cpu)?)
}

pub fn flip_horizontal(x: &Tensor) -> Result<Tensor> {
    let w = x.dim(D::Minus1)?;
    let idx = index_tensor((0..w as u32).rev().collect())?;
    Ok(x.contiguous()?.index_select(&idx, x.rank() - 1)?)
}

/// Nearest-neighbour 2x upsampling of a `(B, C, H, W)` tensor.
pub fn upsample_nearest2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows = index_tensor((0..2 * h as u32).map(|i| i / 2).collect())?;
    let cols = index_tensor((0..2 * w as u32).map(|i| i / 2).collect())?;
    Ok(x.contiguous()?.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Mirror index for position `i` in `[-before, len + after)`, reflecting
/// repeatedly when the pad exceeds the axis length.
fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Reflect-pads the spatial dims of `(B, C, H, W)` by `(top, bottom, left, right)`.
pub fn reflect_pad(x: &Tensor, top: usize, bottom: usize, left: usize, right: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if top + bottom + left + right == 0 {
        return Ok(x.clone());
    }
    let rows = index_tensor(
        (-(top as isize)..(h + bottom) as isize)
            .map(|i| reflect_index(i, h) as u32)
            .collect(),
    )?;
    let cols = index_tensor(
        (-(left as isize)..(w + right) as isize)
            .map(|i| reflect_index(i, w) as u32)
            .collect(),
    )?;
    Ok(x.contiguous()?.index_select(&rows, 2)?.index_select(&cols, 3)?)
}

/// Scalar value of a 0-d or single-element tensor.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    /// Direct nested-loop convolution.
    fn conv_reference(x: &[f64], (c, h, w): (usize, usize, usize), wt: &[f64], o: usize, k: usize, stride: usize, pad: usize) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..c {
                        for ki in 0..k {
                            for kj in 0..k {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                    acc += x[(ic * h + iy as usize) * w + ix as usize] * wt[((oc * c + ic) * k + ki) * k + kj];
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (k, stride, pad, h, w) in [(3, 1, 1, 5, 6), (3, 2, 1, 7, 6), (1, 1, 0, 4, 3), (4, 4, 0, 8, 9)] {
            let x = rand(&[1, 2, h, w], 1);
            let wt = rand(&[3, 2, k, k], 2);
            let y = conv2d(&x, &wt, None, stride, pad).unwrap();
            let want = conv_reference(
                &x.flatten_all().unwrap().to_vec1().unwrap(),
                (2, h, w),
                &wt.flatten_all().unwrap().to_vec1().unwrap(),
                3,
                k,
                stride,
                pad,
            );
            let got: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    fn finite_difference_check(f: impl Fn(&Tensor) -> Tensor, x: &Tensor) {
        let v = Var::from_tensor(x).unwrap();
        let grads = f(v.as_tensor()).backward().unwrap();
        let g: Vec<f64> = grads.get(&v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let base: Vec<f64> = x.flatten_all().unwrap().to_vec1().unwrap();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            let mut m = base.clone();
            m[i] -= h;
            let fp = scalar(&f(&Tensor::from_vec(p, x.shape(), &Device::Cpu).unwrap())).unwrap();
            let fm = scalar(&f(&Tensor::from_vec(m, x.shape(), &Device::Cpu).unwrap())).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {}", g[i]);
        }
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let w = rand(&[3, 2, 3, 3], 5);
        finite_difference_check(|x| conv2d(x, &w, None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap(), &rand(&[1, 2, 7, 6], 6));
        let x = rand(&[1, 2, 5, 5], 7);
        finite_difference_check(|w| conv2d(&x, w, None, 1, 1).unwrap().sqr().unwrap().sum_all().unwrap(), &rand(&[3, 2, 3, 3], 8));
    }

    #[test]
    fn resampling_ops_have_correct_gradients() {
        let t = rand(&[1, 2, 5, 7], 9);
        let target = rand(&[1, 2, 3, 11], 10);
        finite_difference_check(|x| (resize_bilinear(x, 3, 11).unwrap() - &target).unwrap().sqr().unwrap().sum_all().unwrap(), &t);
        finite_difference_check(|x| (flip_horizontal(x).unwrap() * &t).unwrap().sum_all().unwrap(), &t);
        finite_difference_check(|x| reflect_pad(x, 2, 3, 6, 1).unwrap().sqr().unwrap().sum_all().unwrap(), &t);
        finite_difference_check(|x| upsample_nearest2x(x).unwrap().sqr().unwrap().sum_all().unwrap(), &t);
        finite_difference_check(|x| sigmoid(x).unwrap().sqr().unwrap().sum_all().unwrap(), &t);
        finite_difference_check(|x| softmax_last_dim(x).unwrap().sqr().unwrap().sum_all().unwrap(), &t);
    }

    #[test]
    fn reflect_pad_mirrors_without_repeating_edge() {
        let x = Tensor::from_vec(vec![0f64, 1., 2.], (1, 1, 1, 3), &Device::Cpu).unwrap();
        let y: Vec<f64> = reflect_pad(&x, 0, 0, 2, 4).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![2., 1., 0., 1., 2., 1., 0., 1., 2.]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = Tensor::from_vec(vec![-1000f32, 0., 1000.], 3, &Device::Cpu).unwrap();
        let y: Vec<f32> = sigmoid(&x).unwrap().to_vec1().unwrap();
        assert_eq!(y, vec![0.0, 0.5, 1.0]);
    }
}
