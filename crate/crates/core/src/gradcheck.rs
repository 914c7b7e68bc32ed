//! Central finite-difference verification of every backward rule.
//!
//! Each registered case builds a scalar loss from a handful of named input
//! tensors, takes the analytic gradient from the tape, and compares it with
//! `(L(x+h) − L(x−h)) / 2h` per coordinate. A coordinate passes when either
//! the absolute error is below `abs_tol` or the relative error is below
//! `rel_tol`.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::rng::substream;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub type Inputs<T> = BTreeMap<String, Tensor<T>>;
type Builder<T> = fn(&mut Tape<T>, &BTreeMap<String, Var>) -> Result<Var>;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Coordinates sampled per input tensor; smaller tensors are checked
    /// exhaustively.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-3, rel_tol: 1e-3, abs_tol: 1e-5, max_coords: 256, seed: 0 }
    }
}

/// One registered operator check.
pub struct Case<T> {
    pub op: &'static str,
    make_inputs: fn(&mut ChaCha8Rng) -> Inputs<T>,
    build: Builder<T>,
    /// Multiplies the analytic gradient; `1.0` except in fault-injection
    /// fixtures.
    analytic_scale: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

fn bind<T: Scalar>(tape: &mut Tape<T>, inputs: &Inputs<T>) -> BTreeMap<String, Var> {
    inputs.iter().map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone()))).collect()
}

fn loss_value<T: Scalar>(case: &Case<T>, inputs: &Inputs<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = bind(&mut tape, inputs);
    let l = (case.build)(&mut tape, &vars)?;
    Ok(tape.value(l).data()[0].f64())
}

impl<T: Scalar> Case<T> {
    pub fn run(&self, cfg: &GradCheckConfig) -> Result<OpReport> {
        let mut rng = substream(cfg.seed, &format!("gradcheck/{}", self.op), 0);
        let inputs = (self.make_inputs)(&mut rng);
        let mut tape = Tape::new();
        let vars = bind(&mut tape, &inputs);
        let loss = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward(loss)?;

        let mut report = OpReport {
            op: self.op,
            coords: 0,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            passed: true,
        };
        for (name, value) in &inputs {
            let coords: Vec<usize> = if value.len() <= cfg.max_coords {
                (0..value.len()).collect()
            } else {
                let mut c = sample(&mut rng, value.len(), cfg.max_coords).into_vec();
                c.sort_unstable();
                c
            };
            for i in coords {
                let analytic =
                    grads.get(name).map_or(0.0, |g| g.data()[i].f64()) * self.analytic_scale;
                let mut probe = inputs.clone();
                let x = value.data()[i].f64();
                probe.get_mut(name).unwrap().data_mut()[i] = T::of(x + cfg.step);
                let up = loss_value(self, &probe)?;
                probe.get_mut(name).unwrap().data_mut()[i] = T::of(x - cfg.step);
                let down = loss_value(self, &probe)?;
                let numeric = (up - down) / (2.0 * cfg.step);

                let abs = (analytic - numeric).abs();
                let scale = analytic.abs().max(numeric.abs());
                let rel = if scale > 0.0 { abs / scale } else { 0.0 };
                report.coords += 1;
                report.max_abs_error = report.max_abs_error.max(abs);
                if abs >= cfg.abs_tol {
                    report.max_rel_error = report.max_rel_error.max(rel);
                    if rel >= cfg.rel_tol {
                        report.passed = false;
                    }
                }
            }
        }
        Ok(report)
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so kinked activations are differentiable
/// at every probe point.
fn off_kink<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let mag: f64 = rng.random_range(0.05..1.0);
            T::of(if rng.random_bool(0.5) { mag } else { -mag })
        })
        .collect();
    Tensor::new(shape, data).expect("shape product")
}

fn inputs<T: Scalar>(items: Vec<(&str, Tensor<T>)>) -> Inputs<T> {
    items.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

/// Reduces a node to a scalar with a fixed pseudo-random projection.
fn project<T: Scalar>(tape: &mut Tape<T>, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919 % 23) as f64 - 11.0) / 11.0).collect();
    tape.weighted_sum(y, Tensor::from_f64(&shape, &w)?)
}

/// Every differentiable operator, each exactly once.
pub fn registered_cases<T: Scalar>() -> Vec<Case<T>> {
    vec![
        Case {
            op: "conv2d",
            make_inputs: |r| {
                inputs(vec![
                    ("x", uniform(r, &[2, 3, 8, 8])),
                    ("w", uniform(r, &[4, 3, 3, 3])),
                    ("b", uniform(r, &[4])),
                ])
            },
            build: |t, v| {
                let y = t.conv2d(v["x"], v["w"], v["b"], 2, 1)?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "conv_transpose2d",
            make_inputs: |r| {
                inputs(vec![
                    ("x", uniform(r, &[2, 4, 4, 4])),
                    ("w", uniform(r, &[4, 3, 4, 4])),
                    ("b", uniform(r, &[3])),
                ])
            },
            build: |t, v| {
                let y = t.conv_transpose2d(v["x"], v["w"], v["b"], 2, 1)?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "dense",
            make_inputs: |r| {
                inputs(vec![
                    ("x", uniform(r, &[4, 8])),
                    ("w", uniform(r, &[5, 8])),
                    ("b", uniform(r, &[5])),
                ])
            },
            build: |t, v| {
                let y = t.dense(v["x"], v["w"], v["b"])?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "relu",
            make_inputs: |r| inputs(vec![("x", off_kink(r, &[4, 4, 8]))]),
            build: |t, v| {
                let y = t.relu(v["x"]);
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "leaky_relu",
            make_inputs: |r| inputs(vec![("x", off_kink(r, &[4, 4, 8]))]),
            build: |t, v| {
                let y = t.leaky_relu(v["x"], T::of(0.01));
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "sigmoid",
            make_inputs: |r| inputs(vec![("x", uniform(r, &[4, 4, 8]).map(|v| v * T::of(4.0)))]),
            build: |t, v| {
                let y = t.sigmoid(v["x"]);
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "softmax",
            make_inputs: |r| inputs(vec![("x", uniform(r, &[3, 5, 4]).map(|v| v * T::of(3.0)))]),
            build: |t, v| {
                let y = t.softmax(v["x"], 1)?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "reshape",
            make_inputs: |r| inputs(vec![("x", uniform(r, &[2, 3, 4]))]),
            build: |t, v| {
                let y = t.reshape(v["x"], &[6, 4])?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
        Case {
            op: "mse_loss",
            make_inputs: |r| {
                inputs(vec![("pred", uniform(r, &[4, 3, 4, 4])), ("target", uniform(r, &[4, 3, 4, 4]))])
            },
            build: |t, v| t.mse_loss(v["pred"], v["target"]),
            analytic_scale: 1.0,
        },
        Case {
            op: "cross_entropy",
            make_inputs: |r| inputs(vec![("logits", uniform(r, &[6, 4]).map(|v| v * T::of(3.0)))]),
            build: |t, v| t.cross_entropy(v["logits"], &[0, 3, 1, 2, 2, 0]),
            analytic_scale: 1.0,
        },
        Case {
            op: "weighted_sum",
            make_inputs: |r| inputs(vec![("x", uniform(r, &[3, 7]))]),
            build: |t, v| project(t, v["x"]),
            analytic_scale: 1.0,
        },
        Case {
            op: "combine",
            make_inputs: |r| inputs(vec![("a", uniform(r, &[4, 4])), ("b", uniform(r, &[4, 4]))]),
            build: |t, v| {
                let y = t.combine(v["a"], T::of(1.0), v["b"], T::of(-2.5))?;
                project(t, y)
            },
            analytic_scale: 1.0,
        },
    ]
}

/// A conv2d case whose analytic gradient is deliberately scaled by 1.1;
/// used as a negative control for the checker itself.
pub fn corrupted_case<T: Scalar>() -> Case<T> {
    let mut case = registered_cases::<T>().swap_remove(0);
    case.op = "conv2d_corrupted";
    case.analytic_scale = 1.1;
    case
}

pub fn run_all<T: Scalar>(cases: &[Case<T>], cfg: &GradCheckConfig) -> Result<Vec<OpReport>> {
    cases.iter().map(|c| c.run(cfg)).collect()
}
