//! 2-D convolution and its adjoint, computed per sample via im2col + GEMM.
//!
//! Both kernels parallelize over the batch dimension. Weight and bias
//! gradients are formed per sample and summed in sample order, so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::error::{hyper_err, shape_err, Result};
use crate::ops::linalg::{gemm_acc, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Spatial geometry of a strided, zero-padded cross-correlation from an
/// `in_h×in_w` grid to an `out_h×out_w` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    /// Geometry of `conv2d` on an `in_h×in_w` input.
    pub fn forward(
        op: &'static str,
        in_h: usize,
        in_w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(hyper_err(op, "stride must be at least 1"));
        }
        if kh == 0 || kw == 0 {
            return Err(hyper_err(op, "kernel must be non-empty"));
        }
        if kh > in_h + 2 * padding || kw > in_w + 2 * padding {
            return Err(hyper_err(
                op,
                format!("kernel {kh}x{kw} larger than padded input {in_h}x{in_w} (pad {padding})"),
            ));
        }
        Ok(Self {
            in_h,
            in_w,
            kh,
            kw,
            stride,
            padding,
            out_h: (in_h + 2 * padding - kh) / stride + 1,
            out_w: (in_w + 2 * padding - kw) / stride + 1,
        })
    }

    /// Geometry of the conv2d whose adjoint maps `h×w` up to
    /// `((h−1)·stride − 2·padding + k)` per axis. `in_*` is the large grid.
    pub fn transposed(
        op: &'static str,
        h: usize,
        w: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride < 1 {
            return Err(hyper_err(op, "stride must be at least 1"));
        }
        let big_h = ((h - 1) * stride + kh).checked_sub(2 * padding);
        let big_w = ((w - 1) * stride + kw).checked_sub(2 * padding);
        match (big_h, big_w) {
            (Some(bh), Some(bw)) if bh > 0 && bw > 0 => {
                let g = Self::forward(op, bh, bw, kh, kw, stride, padding)?;
                debug_assert_eq!((g.out_h, g.out_w), (h, w));
                Ok(g)
            }
            _ => Err(hyper_err(op, "padding too large for transposed output")),
        }
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn patch(&self) -> usize {
        self.kh * self.kw
    }
}

/// Unfolds one `[c, in_h, in_w]` image into `[c·kh·kw, out_h·out_w]` columns.
fn im2col<T: Scalar>(x: &[T], c: usize, g: &ConvGeometry, cols: &mut [T]) {
    let plane = g.out_plane();
    for ch in 0..c {
        let xin = &x[ch * g.in_plane()..(ch + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &xin[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `x`.
fn col2im<T: Scalar>(cols: &[T], c: usize, g: &ConvGeometry, x: &mut [T]) {
    let plane = g.out_plane();
    for ch in 0..c {
        let xin = &mut x[ch * g.in_plane()..(ch + 1) * g.in_plane()];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && (ix as usize) < g.in_w {
                            xin[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check4<T: Scalar>(op: &'static str, what: &str, t: &Tensor<T>) -> Result<[usize; 4]> {
    match *t.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(shape_err(op, format!("{what} must be 4-D, got {s:?}"))),
    }
}

fn check_bias<T: Scalar>(op: &'static str, bias: &Tensor<T>, channels: usize) -> Result<()> {
    if bias.shape() != [channels] {
        return Err(shape_err(
            op,
            format!("bias shape {:?}, expected [{channels}]", bias.shape()),
        ));
    }
    Ok(())
}

/// Parameters shared by conv forward/backward calls.
#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
}

/// Validated conv2d problem dimensions.
#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeometry,
}

pub fn conv2d_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Conv2dDims> {
    const OP: &str = "conv2d";
    let [n, cin, h, w] = check4(OP, "input", input)?;
    let [cout, wcin, kh, kw] = check4(OP, "weight", weight)?;
    if cin != wcin {
        return Err(shape_err(OP, format!("input has {cin} channels, weight expects {wcin}")));
    }
    check_bias(OP, bias, cout)?;
    let geom = ConvGeometry::forward(OP, h, w, kh, kw, spec.stride, spec.padding)?;
    Ok(Conv2dDims { n, cin, cout, geom })
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let d = conv2d_dims(input, weight, bias, spec)?;
    let g = d.geom;
    let ck = d.cin * g.patch();
    let in_sz = d.cin * g.in_plane();
    let out_sz = d.cout * g.out_plane();
    let mut out = vec![T::zero(); d.n * out_sz];
    out.par_chunks_mut(out_sz.max(1))
        .zip(input.data().par_chunks(in_sz.max(1)))
        .for_each(|(o, x)| {
            let mut cols = vec![T::zero(); ck * g.out_plane()];
            im2col(x, d.cin, &g, &mut cols);
            for (co, plane) in o.chunks_mut(g.out_plane()).enumerate() {
                plane.fill(bias.data()[co]);
            }
            gemm_acc(d.cout, g.out_plane(), ck, weight.data(), &cols, o);
        });
    Tensor::new(&[d.n, d.cout, g.out_h, g.out_w], out)
}

/// Gradients of conv2d with respect to input, weight and bias.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv2d_dims(input, weight, bias, spec)?;
    let g = d.geom;
    let ck = d.cin * g.patch();
    let in_sz = d.cin * g.in_plane();
    let out_sz = d.cout * g.out_plane();
    let w_t = transpose(d.cout, ck, weight.data());

    let mut grad_in = vec![T::zero(); input.len()];
    let partial_w: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_sz.max(1))
        .zip(input.data().par_chunks(in_sz.max(1)))
        .zip(grad_out.data().par_chunks(out_sz.max(1)))
        .map(|((dx, x), dy)| {
            let mut cols = vec![T::zero(); ck * g.out_plane()];
            im2col(x, d.cin, &g, &mut cols);
            let cols_t = transpose(ck, g.out_plane(), &cols);
            let mut dw = vec![T::zero(); d.cout * ck];
            gemm_acc(d.cout, ck, g.out_plane(), dy, &cols_t, &mut dw);
            let mut dcols = vec![T::zero(); ck * g.out_plane()];
            gemm_acc(ck, g.out_plane(), d.cout, &w_t, dy, &mut dcols);
            col2im(&dcols, d.cin, &g, dx);
            dw
        })
        .collect();

    let mut grad_w = vec![T::zero(); weight.len()];
    for dw in &partial_w {
        for (a, &b) in grad_w.iter_mut().zip(dw) {
            *a += b;
        }
    }
    let grad_b = bias_grad(grad_out.data(), d.n, d.cout, g.out_plane());
    Ok((
        Tensor::new(input.shape(), grad_in)?,
        Tensor::new(weight.shape(), grad_w)?,
        Tensor::new(bias.shape(), grad_b)?,
    ))
}

fn bias_grad<T: Scalar>(dy: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    (0..c)
        .map(|co| {
            let mut acc = 0.0f64;
            for s in 0..n {
                let base = (s * c + co) * plane;
                acc += dy[base..base + plane].iter().map(|v| v.f64()).sum::<f64>();
            }
            T::of(acc)
        })
        .collect()
}

/// Validated conv_transpose2d problem dimensions; `geom` maps the output
/// grid (large) to the input grid (small).
#[derive(Clone, Copy, Debug)]
pub struct ConvTransposeDims {
    pub n: usize,
    pub cin: usize,
    pub cout: usize,
    pub geom: ConvGeometry,
}

pub fn conv_transpose2d_dims<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<ConvTransposeDims> {
    const OP: &str = "conv_transpose2d";
    let [n, cin, h, w] = check4(OP, "input", input)?;
    let [wcin, cout, kh, kw] = check4(OP, "weight", weight)?;
    if cin != wcin {
        return Err(shape_err(OP, format!("input has {cin} channels, weight expects {wcin}")));
    }
    check_bias(OP, bias, cout)?;
    let geom = ConvGeometry::transposed(OP, h, w, kh, kw, spec.stride, spec.padding)?;
    Ok(ConvTransposeDims { n, cin, cout, geom })
}

pub fn conv_transpose2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
) -> Result<Tensor<T>> {
    let d = conv_transpose2d_dims(input, weight, bias, spec)?;
    let g = d.geom;
    let ck = d.cout * g.patch();
    let small = g.out_plane();
    let in_sz = d.cin * small;
    let out_sz = d.cout * g.in_plane();
    let w_t = transpose(d.cin, ck, weight.data());
    let mut out = vec![T::zero(); d.n * out_sz];
    out.par_chunks_mut(out_sz.max(1))
        .zip(input.data().par_chunks(in_sz.max(1)))
        .for_each(|(o, x)| {
            let mut cols = vec![T::zero(); ck * small];
            gemm_acc(ck, small, d.cin, &w_t, x, &mut cols);
            for (co, plane) in o.chunks_mut(g.in_plane()).enumerate() {
                plane.fill(bias.data()[co]);
            }
            col2im(&cols, d.cout, &g, o);
        });
    Tensor::new(&[d.n, d.cout, g.in_h, g.in_w], out)
}

/// Gradients of conv_transpose2d with respect to input, weight and bias.
pub fn conv_transpose2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    spec: ConvSpec,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let d = conv_transpose2d_dims(input, weight, bias, spec)?;
    let g = d.geom;
    let ck = d.cout * g.patch();
    let small = g.out_plane();
    let in_sz = d.cin * small;
    let out_sz = d.cout * g.in_plane();

    let mut grad_in = vec![T::zero(); input.len()];
    let partial_w: Vec<Vec<T>> = grad_in
        .par_chunks_mut(in_sz.max(1))
        .zip(input.data().par_chunks(in_sz.max(1)))
        .zip(grad_out.data().par_chunks(out_sz.max(1)))
        .map(|((dx, x), dy)| {
            let mut cols = vec![T::zero(); ck * small];
            im2col(dy, d.cout, &g, &mut cols);
            gemm_acc(d.cin, small, ck, weight.data(), &cols, dx);
            let cols_t = transpose(ck, small, &cols);
            let mut dw = vec![T::zero(); d.cin * ck];
            gemm_acc(d.cin, ck, small, x, &cols_t, &mut dw);
            dw
        })
        .collect();

    let mut grad_w = vec![T::zero(); weight.len()];
    for dw in &partial_w {
        for (a, &b) in grad_w.iter_mut().zip(dw) {
            *a += b;
        }
    }
    let grad_b = bias_grad(grad_out.data(), d.n, d.cout, g.in_plane());
    Ok((
        Tensor::new(input.shape(), grad_in)?,
        Tensor::new(weight.shape(), grad_w)?,
        Tensor::new(bias.shape(), grad_b)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const S1: ConvSpec = ConvSpec { stride: 1, padding: 0 };

    /// Direct nested-loop cross-correlation, independent of im2col.
    fn naive_conv2d(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, s: usize, p: usize) -> Vec<f64> {
        let [n, cin, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
        let [cout, _, kh, kw] = [w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]];
        let ho = (h + 2 * p - kh) / s + 1;
        let wo = (wd + 2 * p - kw) / s + 1;
        let mut out = vec![0.0; n * cout * ho * wo];
        for i in 0..n {
            for co in 0..cout {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b.data()[co];
                        for ci in 0..cin {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                        acc += x.data()[((i * cin + ci) * h + iy as usize) * wd + ix as usize]
                                            * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                    }
                                }
                            }
                        }
                        out[((i * cout + co) * ho + oy) * wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_scales() {
        let x = Tensor::<f32>::ones(&[1, 1, 3, 3]);
        let w = Tensor::full(&[1, 1, 1, 1], 2.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, S1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor::<f32>::from_f64(&[1, 1, 2, 2], &[1., 2., 3., 4.]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 2, 2], &[1., 0., 0., 1.]).unwrap();
        let y = conv2d(&x, &w, &Tensor::zeros(&[1]), S1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn strided_shape() {
        let x = Tensor::<f32>::zeros(&[4, 3, 16, 16]);
        let w = Tensor::zeros(&[8, 3, 3, 3]);
        let y = conv2d(&x, &w, &Tensor::zeros(&[8]), ConvSpec { stride: 2, padding: 1 }).unwrap();
        assert_eq!(y.shape(), &[4, 8, 8, 8]);
    }

    #[test]
    fn matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(s, p) in &[(1, 0), (2, 1), (1, 2), (3, 1)] {
            let x = Tensor::<f64>::uniform(&[2, 3, 7, 6], -1.0, 1.0, &mut rng);
            let w = Tensor::uniform(&[4, 3, 3, 2], -1.0, 1.0, &mut rng);
            let b = Tensor::uniform(&[4], -1.0, 1.0, &mut rng);
            let y = conv2d(&x, &w, &b, ConvSpec { stride: s, padding: p }).unwrap();
            let want = naive_conv2d(&x, &w, &b, s, p);
            for (a, e) in y.data().iter().zip(&want) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let b = Tensor::zeros(&[1]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &b, S1),
            Err(crate::Error::ShapeMismatch { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, &b, ConvSpec { stride: 0, padding: 0 }),
            Err(crate::Error::InvalidHyperparameter { .. })
        ));
        let w = Tensor::zeros(&[1, 2, 7, 7]);
        assert!(conv2d(&x, &w, &b, S1).is_err());
    }

    #[test]
    fn transpose_broadcasts_single_input() {
        let x = Tensor::<f32>::full(&[1, 1, 1, 1], 3.0);
        let w = Tensor::ones(&[1, 1, 2, 2]);
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[1]), S1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn transpose_shape_formula() {
        let x = Tensor::<f32>::zeros(&[4, 8, 8, 8]);
        let w = Tensor::zeros(&[8, 3, 3, 3]);
        let y = conv_transpose2d(&x, &w, &Tensor::zeros(&[3]), ConvSpec { stride: 2, padding: 1 })
            .unwrap();
        assert_eq!(y.shape(), &[4, 3, 15, 15]);
    }

    #[test]
    fn transpose_is_adjoint_of_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::<f64>::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let w = Tensor::uniform(&[1, 1, 2, 2], -1.0, 1.0, &mut rng);
        let y = Tensor::uniform(&[1, 1, 3, 3], -1.0, 1.0, &mut rng);
        let zero = Tensor::zeros(&[1]);
        let lhs = conv2d(&x, &w, &zero, S1).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_transpose2d(&y, &w, &zero, S1).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
