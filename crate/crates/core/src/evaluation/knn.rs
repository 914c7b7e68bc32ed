use rayon::prelude::*;

use super::FeatureMatrix;
use crate::error::{hyper_err, shape_err, Error, Result};
use crate::scalar::Scalar;

/// Leave-one-out kNN settings.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnOptions {
    pub k: usize,
    /// Standardize each feature column before measuring distances.
    pub standardize: bool,
    /// When set, rows sharing a group id with the query are excluded from
    /// its neighbour candidates (not only the query itself).
    pub exclude_groups: Option<Vec<u32>>,
}

impl Default for KnnOptions {
    fn default() -> Self {
        Self { k: 3, standardize: false, exclude_groups: None }
    }
}

impl KnnOptions {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }
}

fn squared_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum()
}

/// Majority vote over `(distance, label)` pairs sorted by distance. Ties on
/// the vote go to the class with the nearest member, then to the smaller
/// class index.
fn vote(neighbours: &[(f64, u32)]) -> u32 {
    let mut tally: Vec<(u32, usize, f64)> = Vec::new();
    for &(d, l) in neighbours {
        match tally.iter_mut().find(|t| t.0 == l) {
            Some(t) => t.1 += 1,
            None => tally.push((l, 1, d)),
        }
    }
    tally
        .into_iter()
        .min_by(|a, b| b.1.cmp(&a.1).then(a.2.total_cmp(&b.2)).then(a.0.cmp(&b.0)))
        .map(|t| t.0)
        .expect("at least one neighbour")
}

/// Leave-one-out predictions. Neighbours are ordered by Euclidean distance,
/// equal distances by row position.
pub fn knn_loo_predictions<T: Scalar>(
    features: &FeatureMatrix<T>,
    labels: &[u32],
    options: &KnnOptions,
) -> Result<Vec<u32>> {
    let n = features.len();
    let k = options.k;
    if k == 0 {
        return Err(hyper_err("knn_loo_accuracy", "k must be at least 1"));
    }
    if labels.len() != n {
        return Err(shape_err("knn_loo_accuracy", format!("{} labels for {n} rows", labels.len())));
    }
    if n <= k {
        return Err(Error::TooFewSamples { needed: k, got: n });
    }
    if let Some(g) = &options.exclude_groups {
        if g.len() != n {
            return Err(shape_err("knn_loo_accuracy", "group ids and rows differ in length"));
        }
    }
    let standardized;
    let features = if options.standardize {
        standardized = features.standardized();
        &standardized
    } else {
        features
    };
    (0..n)
        .into_par_iter()
        .map(|i| {
            let q = features.row(i);
            let mut cands: Vec<(f64, usize)> = (0..n)
                .filter(|&j| match &options.exclude_groups {
                    Some(g) => g[j] != g[i],
                    None => j != i,
                })
                .map(|j| (squared_distance(q, features.row(j)), j))
                .collect();
            if cands.len() < k {
                return Err(Error::TooFewSamples { needed: k, got: cands.len() });
            }
            cands.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cands.truncate(k);
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let nb: Vec<(f64, u32)> = cands.iter().map(|&(d, j)| (d, labels[j])).collect();
            Ok(vote(&nb))
        })
        .collect()
}

/// Fraction of rows whose leave-one-out kNN prediction equals their label.
pub fn knn_loo_accuracy<T: Scalar>(features: &FeatureMatrix<T>, labels: &[u32], options: &KnnOptions) -> Result<f64> {
    let pred = knn_loo_predictions(features, labels, options)?;
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn line(xs: &[f64]) -> FeatureMatrix<f64> {
        FeatureMatrix::from_rows(Tensor::from_f64(&[xs.len(), 1], xs).unwrap()).unwrap()
    }

    #[test]
    fn two_pairs_on_a_line() {
        let f = line(&[0.0, 1.0, 10.0, 11.0]);
        assert_eq!(knn_loo_accuracy(&f, &[0, 0, 1, 1], &KnnOptions::with_k(1)).unwrap(), 1.0);
    }

    #[test]
    fn single_label_is_perfect() {
        let f = line(&[3.0, -1.0, 4.0, 1.0, 5.0]);
        for k in 1..5 {
            assert_eq!(knn_loo_accuracy(&f, &[2; 5], &KnnOptions::with_k(k)).unwrap(), 1.0);
        }
    }

    #[test]
    fn vote_ties_prefer_nearest_then_smallest() {
        assert_eq!(vote(&[(1.0, 4), (2.0, 1), (3.0, 1), (4.0, 4)]), 4);
        assert_eq!(vote(&[(1.0, 4), (1.0, 2)]), 2);
        assert_eq!(vote(&[(1.0, 4), (2.0, 2), (3.0, 2)]), 2);
    }

    #[test]
    fn too_few_samples() {
        let f = line(&[0.0, 1.0, 2.0]);
        assert!(matches!(
            knn_loo_accuracy(&f, &[0, 1, 0], &KnnOptions::with_k(3)),
            Err(Error::TooFewSamples { .. })
        ));
    }

    #[test]
    fn group_exclusion_removes_same_group_neighbours() {
        let f = line(&[0.0, 0.1, 5.0, 5.1]);
        let labels = [0, 0, 1, 1];
        let opts = KnnOptions { k: 1, exclude_groups: Some(vec![0, 0, 1, 1]), ..KnnOptions::default() };
        assert_eq!(knn_loo_accuracy(&f, &labels, &opts).unwrap(), 0.0);
    }
}
