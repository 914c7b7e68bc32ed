//! Probes that measure what a representation knows: leave-one-out kNN
//! accuracy against a majority-class null, treatment-level profile
//! aggregation, t-SNE embeddings and correlation tests.

mod knn;
mod stats;
mod tsne;

pub use knn::{knn_loo_accuracy, knn_loo_predictions, KnnOptions};
pub use stats::{fold_change, null_accuracy, pearson_r};
pub use tsne::{calibrate_affinities, tsne_embed, Affinities, Embedding2D, TsneConfig};

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::synth::Confounder;
use crate::tensor::Tensor;

/// Rows of a `[N, d]` tensor tagged with unique ids.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix<T = f32> {
    rows: Tensor<T>,
    row_ids: Vec<u32>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(rows: Tensor<T>, row_ids: Vec<u32>) -> Result<Self> {
        let s = rows.shape();
        if s.len() != 2 || s[1] == 0 || s[0] != row_ids.len() {
            return Err(shape_err(
                "FeatureMatrix",
                format!("rows {s:?} with {} ids; need [N, d >= 1]", row_ids.len()),
            ));
        }
        let mut seen = row_ids.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("duplicate row id".into()));
        }
        Ok(Self { rows, row_ids })
    }

    /// Rows numbered `0..N`.
    pub fn from_rows(rows: Tensor<T>) -> Result<Self> {
        let n = rows.shape().first().copied().unwrap_or(0);
        Self::new(rows, (0..n as u32).collect())
    }

    pub fn rows(&self) -> &Tensor<T> {
        &self.rows
    }

    pub fn row_ids(&self) -> &[u32] {
        &self.row_ids
    }

    pub fn len(&self) -> usize {
        self.row_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.row_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let d = self.dim();
        &self.rows.data()[i * d..(i + 1) * d]
    }

    /// Each column shifted to zero mean and scaled to unit variance;
    /// constant columns are only centred.
    pub fn standardized(&self) -> Self {
        let (n, d) = (self.len(), self.dim());
        let mut out = vec![T::zero(); n * d];
        for j in 0..d {
            let col: Vec<f64> = (0..n).map(|i| self.row(i)[j].f64()).collect();
            let mean = col.iter().sum::<f64>() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let scale = if var > 0.0 { var.sqrt() } else { 1.0 };
            for i in 0..n {
                out[i * d + j] = T::of((col[i] - mean) / scale);
            }
        }
        Self { rows: Tensor::new(&[n, d], out).expect("same shape"), row_ids: self.row_ids.clone() }
    }
}

/// Mean feature vector per group; output rows ordered by ascending group
/// id, which also becomes the row id.
pub fn aggregate_profiles<T: Scalar>(features: &FeatureMatrix<T>, group_ids: &[u32]) -> Result<FeatureMatrix<T>> {
    if features.is_empty() {
        return Err(Error::EmptyInput("aggregate_profiles"));
    }
    if group_ids.len() != features.len() {
        return Err(shape_err(
            "aggregate_profiles",
            format!("{} group ids for {} rows", group_ids.len(), features.len()),
        ));
    }
    let d = features.dim();
    let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &g) in group_ids.iter().enumerate() {
        let e = sums.entry(g).or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in e.0.iter_mut().zip(features.row(i)) {
            *acc += v.f64();
        }
        e.1 += 1;
    }
    let mut data = Vec::with_capacity(sums.len() * d);
    for (sum, count) in sums.values() {
        data.extend(sum.iter().map(|s| T::of(s / *count as f64)));
    }
    FeatureMatrix::new(Tensor::new(&[sums.len(), d], data)?, sums.keys().copied().collect())
}

/// Majority label per group, ties to the smallest label, in ascending
/// group order.
pub fn group_labels(group_ids: &[u32], labels: &[u32]) -> Result<Vec<u32>> {
    if group_ids.len() != labels.len() {
        return Err(shape_err("group_labels", "group ids and labels differ in length"));
    }
    let mut counts: BTreeMap<u32, BTreeMap<u32, usize>> = BTreeMap::new();
    for (&g, &l) in group_ids.iter().zip(labels) {
        *counts.entry(g).or_default().entry(l).or_default() += 1;
    }
    Ok(counts
        .values()
        .map(|c| {
            let best = c.values().copied().max().unwrap_or(0);
            *c.iter().find(|(_, &n)| n == best).map(|(l, _)| l).unwrap_or(&0)
        })
        .collect())
}

/// One probe outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub probe: String,
    pub k: usize,
    pub n: usize,
    pub accuracy: f64,
    pub null_accuracy: f64,
    pub fold_change: f64,
}

impl EvalReport {
    pub fn new(probe: &str, k: usize, n: usize, accuracy: f64, null_accuracy: f64) -> Result<Self> {
        Ok(Self {
            probe: probe.to_string(),
            k,
            n,
            accuracy,
            null_accuracy,
            fold_change: fold_change(accuracy, null_accuracy)?,
        })
    }

    pub const CSV_HEADER: &'static str = "probe,k,n,accuracy,null,fold_change";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.probe, self.k, self.n, self.accuracy, self.null_accuracy, self.fold_change
        )
    }
}

pub fn reports_to_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from(EvalReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Runs the informative-label probe and, for a categorical confounder,
/// the confounder probe. With group ids, codes are first averaged per
/// group and each group takes its majority label.
pub fn probe_report<T: Scalar>(
    codes: &FeatureMatrix<T>,
    m_labels: &[u32],
    s_values: &Confounder,
    group_ids: Option<&[u32]>,
    options: &KnnOptions,
) -> Result<(EvalReport, Option<EvalReport>)> {
    if m_labels.len() != codes.len() || s_values.len() != codes.len() {
        return Err(shape_err("probe_report", "labels and codes differ in length"));
    }
    let s_cat = s_values.categorical();
    let (features, m, s) = match group_ids {
        Some(g) => (
            aggregate_profiles(codes, g)?,
            group_labels(g, m_labels)?,
            s_cat.map(|s| group_labels(g, s)).transpose()?,
        ),
        None => (codes.clone(), m_labels.to_vec(), s_cat.map(<[u32]>::to_vec)),
    };
    let run = |name: &str, labels: &[u32]| -> Result<EvalReport> {
        let acc = knn_loo_accuracy(&features, labels, options)?;
        EvalReport::new(name, options.k, labels.len(), acc, null_accuracy(labels)?)
    };
    let moa = run("moa", &m)?;
    let batch = s.map(|s| run("batch", &s)).transpose()?;
    Ok((moa, batch))
}
