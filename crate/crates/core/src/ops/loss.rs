use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput(op));
    }
    Ok(())
}

/// Mean over all elements of `(xhat − x)²`, accumulated in `f64`.
pub fn mse_loss<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>) -> Result<T> {
    same_shape("mse_loss", xhat, x)?;
    let sum: f64 = xhat
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a.f64() - b.f64();
            d * d
        })
        .sum();
    Ok(T::of(sum / x.len() as f64))
}

/// Gradient of `mse_loss` with respect to `xhat`, scaled by `upstream`.
pub fn mse_loss_backward<T: Scalar>(xhat: &Tensor<T>, x: &Tensor<T>, upstream: T) -> Tensor<T> {
    let scale = T::of(2.0 / x.len() as f64) * upstream;
    let data = xhat.data().iter().zip(x.data()).map(|(&a, &b)| scale * (a - b)).collect();
    Tensor::new(xhat.shape(), data).expect("same shape")
}

fn logits_dims<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, k) = match *logits.shape() {
        [n, k] => (n, k),
        ref s => return Err(shape_err("cross_entropy", format!("logits must be 2-D, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(shape_err("cross_entropy", format!("{n} rows but {} labels", labels.len())));
    }
    if n == 0 {
        return Err(Error::EmptyInput("cross_entropy"));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label: bad, classes: k });
    }
    Ok((n, k))
}

/// Row-wise softmax probabilities in `f64` and the mean negative
/// log-likelihood, via log-sum-exp.
fn softmax_nll<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(Vec<f64>, f64)> {
    let (n, k) = logits_dims(logits, labels)?;
    let mut probs = vec![0.0; n * k];
    let mut nll = 0.0;
    for (r, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().map(|v| v.f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.f64() - max).exp()).sum();
        let lse = max + sum.ln();
        for (c, v) in row.iter().enumerate() {
            probs[r * k + c] = (v.f64() - lse).exp();
        }
        nll += lse - row[labels[r]].f64();
    }
    Ok((probs, nll / n as f64))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    softmax_nll(logits, labels).map(|(_, l)| T::of(l))
}

pub fn cross_entropy_backward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Result<Tensor<T>> {
    let (n, k) = logits_dims(logits, labels)?;
    let (mut probs, _) = softmax_nll(logits, labels)?;
    for (r, &l) in labels.iter().enumerate() {
        probs[r * k + l] -= 1.0;
    }
    let scale = upstream.f64() / n as f64;
    Tensor::new(logits.shape(), probs.into_iter().map(|p| T::of(p * scale)).collect())
}
