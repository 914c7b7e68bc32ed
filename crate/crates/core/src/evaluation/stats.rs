use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::substream;

/// Frequency of the most common label.
pub fn null_accuracy(labels: &[u32]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::EmptyInput("null_accuracy"));
    }
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let best = sorted.chunk_by(|a, b| a == b).map(<[u32]>::len).max().unwrap_or(0);
    Ok(best as f64 / labels.len() as f64)
}

pub fn fold_change(accuracy: f64, null: f64) -> Result<f64> {
    if !(null > 0.0) {
        return Err(Error::ZeroNull(null));
    }
    Ok(accuracy / null)
}

fn centred(v: &[f64], what: &'static str) -> Result<(Vec<f64>, f64)> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let c: Vec<f64> = v.iter().map(|x| x - mean).collect();
    let ss: f64 = c.iter().map(|x| x * x).sum();
    if !(ss > 0.0) {
        return Err(Error::ZeroVariance(what));
    }
    Ok((c, ss.sqrt()))
}

fn correlation(xc: &[f64], xn: f64, yc: &[f64], yn: f64) -> f64 {
    let cov: f64 = xc.iter().zip(yc).map(|(a, b)| a * b).sum();
    (cov / (xn * yn)).clamp(-1.0, 1.0)
}

const PERMS_PER_STREAM: usize = 1024;

/// Product-moment correlation and a two-sided permutation p-value
/// `(1 + #{|r_perm| >= |r|}) / (1 + n_permutations)`.
pub fn pearson_r(x: &[f64], y: &[f64], n_permutations: usize, seed: u64) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(crate::error::shape_err("pearson_r", "x and y differ in length"));
    }
    if x.len() < 3 {
        return Err(Error::TooFewSamples { needed: 2, got: x.len() });
    }
    let (xc, xn) = centred(x, "pearson_r x")?;
    let (yc, yn) = centred(y, "pearson_r y")?;
    let r = correlation(&xc, xn, &yc, yn);
    // Guards against permutations that reproduce r up to rounding.
    let bar = r.abs() - 1e-12;
    let streams = n_permutations.div_ceil(PERMS_PER_STREAM);
    let extreme: usize = (0..streams)
        .into_par_iter()
        .map(|s| {
            let mut rng = substream(seed, "pearson/perm", s as u64);
            let count = PERMS_PER_STREAM.min(n_permutations - s * PERMS_PER_STREAM);
            let mut perm = yc.clone();
            (0..count)
                .filter(|_| {
                    perm.shuffle(&mut rng);
                    correlation(&xc, xn, &perm, yn).abs() >= bar
                })
                .count()
        })
        .sum();
    Ok((r, (1 + extreme) as f64 / (1 + n_permutations) as f64))
}
