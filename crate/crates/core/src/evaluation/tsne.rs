//! Exact t-SNE: perplexity-calibrated Gaussian affinities in feature space,
//! Student-t affinities in the plane, gradient descent on KL(P‖Q).

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::FeatureMatrix;
use crate::error::{hyper_err, Result};
use crate::rng::substream;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        Self {
            perplexity: 15.0,
            iterations: 1000,
            learning_rate: 100.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_iters: 100,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Embedding2D {
    pub points: Vec<[f64; 2]>,
    pub final_kl: f64,
    /// KL(P‖Q) right after early exaggeration ends.
    pub kl_after_exaggeration: f64,
    pub config: TsneConfig,
}

/// Joint affinities `P` (row-major `N×N`) plus the entropy in bits each
/// conditional distribution reached during calibration.
#[derive(Clone, Debug, PartialEq)]
pub struct Affinities {
    pub n: usize,
    pub p: Vec<f64>,
    pub entropies: Vec<f64>,
}

fn pairwise_sq<T: Scalar>(x: &FeatureMatrix<T>) -> Vec<f64> {
    let n = x.len();
    let rows: Vec<Vec<f64>> = (0..n).map(|i| x.row(i).iter().map(|v| v.f64()).collect()).collect();
    let mut d = vec![0.0; n * n];
    d.par_chunks_mut(n).enumerate().for_each(|(i, out)| {
        for (j, o) in out.iter_mut().enumerate() {
            *o = rows[i].iter().zip(&rows[j]).map(|(a, b)| (a - b).powi(2)).sum();
        }
    });
    d
}

/// Conditional distribution of row `i` at precision `beta`, returned with
/// its entropy in bits.
fn conditional(d: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    let min = d.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        *o = if j == i { 0.0 } else { (-(d[j] - min) * beta).exp() };
        total += *o;
    }
    let mut h = 0.0;
    for o in out.iter_mut() {
        *o /= total;
        if *o > 0.0 {
            h -= *o * o.log2();
        }
    }
    h
}

const ENTROPY_TOL: f64 = 1e-6;

/// Bisection on each row's Gaussian precision until its conditional
/// entropy equals `log2(perplexity)`, then symmetrization
/// `p_ij = (p_j|i + p_i|j) / 2N`.
pub fn calibrate_affinities<T: Scalar>(x: &FeatureMatrix<T>, perplexity: f64) -> Result<Affinities> {
    let n = x.len();
    check_perplexity(n, perplexity)?;
    let d = pairwise_sq(x);
    let target = perplexity.log2();
    let mut cond = vec![0.0; n * n];
    let entropies: Vec<f64> = cond
        .par_chunks_mut(n)
        .enumerate()
        .map(|(i, row)| {
            let di = &d[i * n..(i + 1) * n];
            let (mut lo, mut hi, mut beta) = (0.0f64, f64::INFINITY, 1.0f64);
            let mut h = conditional(di, i, beta, row);
            for _ in 0..200 {
                if (h - target).abs() < ENTROPY_TOL {
                    break;
                }
                if h > target {
                    lo = beta;
                    beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
                } else {
                    hi = beta;
                    beta = (beta + lo) / 2.0;
                }
                h = conditional(di, i, beta, row);
            }
            h
        })
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (cond[i * n + j] + cond[j * n + i]) / (2.0 * n as f64);
        }
    }
    Ok(Affinities { n, p, entropies })
}

fn check_perplexity(n: usize, perplexity: f64) -> Result<()> {
    if n < 5 {
        return Err(hyper_err("tsne_embed", format!("need at least 5 points, got {n}")));
    }
    let upper = (n as f64 - 1.0) / 3.0;
    if !(perplexity > 1.0 && perplexity < upper) {
        return Err(hyper_err(
            "tsne_embed",
            format!("perplexity must lie in (1, {upper:.3}) for {n} points, got {perplexity}"),
        ));
    }
    Ok(())
}

/// Unnormalized Student-t kernel `1 / (1 + |y_i − y_j|²)` and its sum.
fn student_t(y: &[[f64; 2]]) -> (Vec<f64>, f64) {
    let n = y.len();
    let mut num = vec![0.0; n * n];
    num.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            if j != i {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                *v = 1.0 / (1.0 + dx * dx + dy * dy);
            }
        }
    });
    let total = num.par_chunks(n).map(|r| r.iter().sum::<f64>()).sum::<f64>();
    (num, total)
}

const FLOOR: f64 = 1e-12;

/// KL(P‖Q) for the current layout.
pub fn kl_divergence(p: &[f64], y: &[[f64; 2]]) -> f64 {
    let (num, total) = student_t(y);
    p.iter()
        .zip(&num)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &nij)| pij * (pij.max(FLOOR) / (nij / total).max(FLOOR)).ln())
        .sum()
}

pub fn tsne_embed<T: Scalar>(features: &FeatureMatrix<T>, config: &TsneConfig) -> Result<Embedding2D> {
    let aff = calibrate_affinities(features, config.perplexity)?;
    let n = aff.n;
    let p = aff.p;

    let mut rng = substream(config.seed, "tsne/init", 0);
    let init = Normal::new(0.0, 1e-4).expect("positive std");
    let mut y: Vec<[f64; 2]> = (0..n).map(|_| [init.sample(&mut rng), init.sample(&mut rng)]).collect();
    let mut velocity = vec![[0.0; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut kl_after_exaggeration = f64::NAN;

    for iter in 0..config.iterations {
        let exag = if iter < config.exaggeration_iters { config.exaggeration } else { 1.0 };
        let momentum = if iter < config.momentum_switch { config.initial_momentum } else { config.final_momentum };
        let (num, total) = student_t(&y);
        let grad: Vec<[f64; 2]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut g = [0.0; 2];
                for j in 0..n {
                    let nij = num[i * n + j];
                    let w = (exag * p[i * n + j] - nij / total) * nij;
                    g[0] += w * (y[i][0] - y[j][0]);
                    g[1] += w * (y[i][1] - y[j][1]);
                }
                [4.0 * g[0], 4.0 * g[1]]
            })
            .collect();
        for i in 0..n {
            for a in 0..2 {
                let same_sign = (grad[i][a] > 0.0) == (velocity[i][a] > 0.0);
                gains[i][a] = if same_sign { (gains[i][a] * 0.8).max(0.01) } else { gains[i][a] + 0.2 };
                velocity[i][a] = momentum * velocity[i][a] - config.learning_rate * gains[i][a] * grad[i][a];
                y[i][a] += velocity[i][a];
            }
        }
        let mean = y.iter().fold([0.0; 2], |m, v| [m[0] + v[0], m[1] + v[1]]);
        for v in y.iter_mut() {
            v[0] -= mean[0] / n as f64;
            v[1] -= mean[1] / n as f64;
        }
        if iter + 1 == config.exaggeration_iters {
            kl_after_exaggeration = kl_divergence(&p, &y);
        }
    }
    let final_kl = kl_divergence(&p, &y);
    if kl_after_exaggeration.is_nan() {
        kl_after_exaggeration = final_kl;
    }
    Ok(Embedding2D { points: y, final_kl, kl_after_exaggeration, config: config.clone() })
}
