use crate::error::{shape_err, Result};
use crate::ops::linalg::{gemm_acc, transpose};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, din) = match *x.shape() {
        [n, d] => (n, d),
        ref s => return Err(shape_err("dense", format!("input must be 2-D, got {s:?}"))),
    };
    let (dout, wdin) = match *w.shape() {
        [o, i] => (o, i),
        ref s => return Err(shape_err("dense", format!("weight must be 2-D, got {s:?}"))),
    };
    if din != wdin {
        return Err(shape_err("dense", format!("input width {din}, weight expects {wdin}")));
    }
    if b.shape() != [dout] {
        return Err(shape_err("dense", format!("bias shape {:?}, expected [{dout}]", b.shape())));
    }
    Ok((n, din, dout))
}

/// `y = x·Wᵀ + b`.
pub fn dense<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, din, dout) = dims(x, w, b)?;
    let w_t = transpose(dout, din, w.data());
    let mut y = Vec::with_capacity(n * dout);
    for _ in 0..n {
        y.extend_from_slice(b.data());
    }
    gemm_acc(n, dout, din, x.data(), &w_t, &mut y);
    Tensor::new(&[n, dout], y)
}

pub fn dense_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, din, dout) = dims(x, w, b)?;
    let mut dx = vec![T::zero(); n * din];
    gemm_acc(n, din, dout, grad_out.data(), w.data(), &mut dx);
    let dy_t = transpose(n, dout, grad_out.data());
    let mut dw = vec![T::zero(); dout * din];
    gemm_acc(dout, din, n, &dy_t, x.data(), &mut dw);
    let db = (0..dout)
        .map(|j| T::of((0..n).map(|i| grad_out.data()[i * dout + j].f64()).sum()))
        .collect();
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(w.shape(), dw)?,
        Tensor::new(b.shape(), db)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_weight() {
        let x = Tensor::<f32>::from_f64(&[1, 2], &[3., 4.]).unwrap();
        let w = Tensor::from_f64(&[2, 2], &[1., 0., 0., 1.]).unwrap();
        let y = dense(&x, &w, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[3., 4.]);
    }

    #[test]
    fn sum_plus_bias() {
        let x = Tensor::<f32>::from_f64(&[1, 2], &[2., 3.]).unwrap();
        let w = Tensor::from_f64(&[1, 2], &[1., 1.]).unwrap();
        let b = Tensor::from_f64(&[1], &[1.]).unwrap();
        assert_eq!(dense(&x, &w, &b).unwrap().data(), &[6.]);
    }

    #[test]
    fn shape_rule_and_mismatch() {
        let x = Tensor::<f32>::zeros(&[7, 16]);
        let y = dense(&x, &Tensor::zeros(&[5, 16]), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(y.shape(), &[7, 5]);
        assert!(dense(&x, &Tensor::zeros(&[5, 15]), &Tensor::zeros(&[5])).is_err());
    }
}
