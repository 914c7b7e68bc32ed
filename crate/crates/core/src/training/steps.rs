//! Single optimization steps for each player.

use crate::adam::AdamState;
use crate::error::{shape_err, Error, Result};
use crate::models::{Adversary, Autoencoder, Bind, HeadKind};
use crate::ops::mse_loss;
use crate::scalar::Scalar;
use crate::synth::Confounder;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

use super::joint_objective;

/// Shifts to zero mean and scales to unit (population) variance.
pub fn standardize(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::EmptyInput("standardize"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    if !(var > 0.0) {
        return Err(Error::ZeroVariance("confounder values"));
    }
    let sd = var.sqrt();
    Ok(values.iter().map(|v| (v - mean) / sd).collect())
}

/// Adversary targets for a whole dataset.
#[derive(Clone, Debug, PartialEq)]
pub enum AdvTarget {
    Classes { labels: Vec<usize>, classes: usize },
    /// Standardized confounder values.
    Values(Vec<f64>),
}

/// Adversary targets for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum BatchTarget<T> {
    Classes(Vec<usize>),
    /// `[N, 1]`.
    Values(Tensor<T>),
}

impl AdvTarget {
    pub fn from_confounder(s: &Confounder) -> Result<Self> {
        Ok(match s {
            Confounder::Categorical { values, levels } => {
                AdvTarget::Classes { labels: values.iter().map(|&v| v as usize).collect(), classes: *levels }
            }
            Confounder::Continuous(_) => AdvTarget::Values(standardize(&s.as_f64())?),
        })
    }

    pub fn head(&self) -> HeadKind {
        match self {
            AdvTarget::Classes { classes, .. } => HeadKind::Categorical { classes: *classes },
            AdvTarget::Values(_) => HeadKind::Continuous,
        }
    }

    pub fn batch<T: Scalar>(&self, idx: &[usize]) -> BatchTarget<T> {
        match self {
            AdvTarget::Classes { labels, .. } => BatchTarget::Classes(idx.iter().map(|&i| labels[i]).collect()),
            AdvTarget::Values(v) => {
                let data = idx.iter().map(|&i| T::of(v[i])).collect();
                BatchTarget::Values(Tensor::new(&[idx.len(), 1], data).expect("shape product"))
            }
        }
    }
}

/// Mean squared error between regressor output and standardized
/// confounder values, both `[N, 1]`.
pub fn continuous_adversary_loss<T: Scalar>(pred: &Tensor<T>, s: &Tensor<T>) -> Result<T> {
    match (pred.shape(), s.shape()) {
        ([n, 1], [m, 1]) if n == m => mse_loss(pred, s),
        (a, b) => Err(shape_err("continuous_adversary_loss", format!("{a:?} vs {b:?}, need [N, 1]"))),
    }
}

fn adversary_loss_on<T: Scalar>(
    tape: &mut Tape<T>,
    adv: &Adversary<T>,
    z: Var,
    target: &BatchTarget<T>,
    mode: Bind,
) -> Result<Var> {
    let out = adv.forward_on(tape, z, mode)?;
    match target {
        BatchTarget::Classes(labels) => tape.cross_entropy(out, labels),
        BatchTarget::Values(v) => {
            if tape.value(out).shape() != v.shape() {
                return Err(shape_err(
                    "continuous_adversary_loss",
                    format!("{:?} vs {:?}", tape.value(out).shape(), v.shape()),
                ));
            }
            let t = tape.constant(v.clone());
            tape.mse_loss(out, t)
        }
    }
}

fn apply<T: Scalar>(
    named: Vec<(String, &mut Tensor<T>)>,
    opt: &mut AdamState<T>,
    grads: &Gradients<T>,
    lr: f64,
) -> Result<()> {
    let mut named = named;
    opt.step(named.iter_mut().map(|(k, v)| (k.as_str(), &mut **v)), grads, lr)
}

/// One adversary step on precomputed codes; returns the loss before the
/// step.
pub fn adversary_update_on_codes<T: Scalar>(
    adv: &mut Adversary<T>,
    opt: &mut AdamState<T>,
    codes: &Tensor<T>,
    target: &BatchTarget<T>,
    lr: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let z = tape.constant(codes.clone());
    let loss = adversary_loss_on(&mut tape, adv, z, target, Bind::Trainable)?;
    let grads = tape.backward(loss)?;
    apply(adv.named_mut(), opt, &grads, lr)?;
    Ok(tape.value(loss).data()[0].f64())
}

/// One adversary step with the encoder held fixed.
pub fn adversary_update<T: Scalar>(
    cae: &Autoencoder<T>,
    adv: &mut Adversary<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    target: &BatchTarget<T>,
    lr: f64,
) -> Result<f64> {
    adversary_update_on_codes(adv, opt, &cae.encode(images)?, target, lr)
}

/// Batch losses seen by a main step, before it is applied.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub l_cae: f64,
    pub l_adv: f64,
    pub e_lambda: f64,
}

/// One encoder/decoder step on `L_cae − λ·L_adv` with the adversary held
/// fixed. At λ = 0 the loss is reconstruction alone.
pub fn main_update<T: Scalar>(
    cae: &mut Autoencoder<T>,
    adv: &Adversary<T>,
    opt: &mut AdamState<T>,
    images: &Tensor<T>,
    target: &BatchTarget<T>,
    lr: f64,
    lambda: f64,
) -> Result<StepLosses> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let z = cae.encode_on(&mut tape, x, Bind::Trainable)?;
    let xhat = cae.decode_on(&mut tape, z, Bind::Trainable)?;
    let l_cae = tape.mse_loss(xhat, x)?;
    let l_adv = adversary_loss_on(&mut tape, adv, z, target, Bind::Frozen)?;
    let loss = if lambda == 0.0 { l_cae } else { tape.combine(l_cae, T::one(), l_adv, T::of(-lambda))? };
    let grads = tape.backward(loss)?;
    apply(cae.named_mut(), opt, &grads, lr)?;
    let (c, a) = (tape.value(l_cae).data()[0].f64(), tape.value(l_adv).data()[0].f64());
    Ok(StepLosses { l_cae: c, l_adv: a, e_lambda: joint_objective(c, a, lambda) })
}

/// Gradient of `L_adv` alone with respect to the autoencoder parameters.
pub fn adversarial_gradients<T: Scalar>(
    cae: &Autoencoder<T>,
    adv: &Adversary<T>,
    images: &Tensor<T>,
    target: &BatchTarget<T>,
) -> Result<Gradients<T>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone());
    let z = cae.encode_on(&mut tape, x, Bind::Trainable)?;
    let loss = adversary_loss_on(&mut tape, adv, z, target, Bind::Frozen)?;
    tape.backward(loss)
}
