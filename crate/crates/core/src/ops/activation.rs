use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, alpha: T) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { alpha * v })
}

pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, alpha: T, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(x, dy, |v, g| if v > T::zero() { g } else { alpha * g })
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| {
        if v >= T::zero() {
            T::one() / (T::one() + (-v).exp())
        } else {
            let e = v.exp();
            e / (T::one() + e)
        }
    })
}

/// Backward of sigmoid in terms of its output `y`.
pub fn sigmoid_backward<T: Scalar>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    zip_map(y, dy, |s, g| g * s * (T::one() - s))
}

/// `(outer, axis_len, inner)` strides for a reduction along `axis`.
pub fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err("softmax", format!("axis {axis} invalid for shape {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(T::neg_infinity(), T::max);
            let mut total = 0.0f64;
            for k in 0..len {
                let e = (src[at(k)] - max).exp();
                out[at(k)] = e;
                total += e.f64();
            }
            let inv = T::of(1.0 / total);
            for k in 0..len {
                out[at(k)] *= inv;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

/// Backward of softmax in terms of its output `y`: `y ⊙ (dy − Σ dy·y)`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, axis: usize, dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (outer, len, inner) = axis_layout(y.shape(), axis)?;
    let (yv, gv) = (y.data(), dy.data());
    let mut out = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| yv[at(k)].f64() * gv[at(k)].f64()).sum();
            let dot = T::of(dot);
            for k in 0..len {
                out[at(k)] = yv[at(k)] * (gv[at(k)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), out)
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    debug_assert_eq!(a.shape(), b.shape());
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).expect("zip_map preserves shape")
}
