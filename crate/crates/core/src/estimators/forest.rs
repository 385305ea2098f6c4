//! Bagged regression forest.
//!
//! CART-style regression trees fit to binary outcomes: each tree trains on a
//! bootstrap resample, splits minimize the sum of squared errors over a
//! random feature subset, and leaves predict the mean outcome of their rows.
//! The forest prediction is the mean over trees, clamped to `[0, 1]`.
//!
//! Everything is deterministic given the input stream: tree `t` draws its
//! bootstrap and feature subsets from stream child `("tree", t)`, trees are
//! grown in parallel but collected in index order, and split ties resolve to
//! the first candidate in draw order.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

use super::{FitFlag, TrainingSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestFitParams {
    pub n_trees: usize,
    pub max_depth: usize,
    /// Minimum rows on each side of a split.
    pub min_leaf: usize,
    /// Candidate features per split; defaults to `ceil(sqrt(p))`.
    pub features_per_split: Option<usize>,
}

impl Default for ForestFitParams {
    fn default() -> Self {
        ForestFitParams {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 5,
            features_per_split: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<Tree>,
    pub dim: usize,
    pub epoch_of_fit: u64,
    pub flags: Vec<FitFlag>,
    /// Mean squared error on out-of-bag rows, when any row was left out.
    pub oob_mse: Option<f64>,
}

impl ForestModel {
    pub fn predict_values(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        Ok((sum / self.trees.len() as f64).clamp(0.0, 1.0))
    }
}

/// Fit a forest on `train`, drawing all randomness from `stream`.
pub fn fit_forest(
    train: &TrainingSet,
    params: &ForestFitParams,
    stream: &RngStream,
) -> Result<ForestModel> {
    let n = train.n_rows();
    let p = train.dim();
    if n == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if params.n_trees == 0 {
        return Err(Error::config("forest.n_trees", "must be >= 1"));
    }
    if params.min_leaf == 0 {
        return Err(Error::config("forest.min_leaf", "must be >= 1"));
    }
    let m = params
        .features_per_split
        .unwrap_or_else(|| (p as f64).sqrt().ceil() as usize)
        .clamp(1, p);

    let mut flags = Vec::new();
    let first = train.label(0);
    if (0..n).all(|i| train.label(i) == first) {
        flags.push(FitFlag::AllOneClass);
    }

    let grown: Vec<(Tree, Vec<bool>)> = (0..params.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream.derive("tree", t as u64).rng();
            let mut in_bag = vec![false; n];
            let rows: Vec<usize> = (0..n)
                .map(|_| {
                    let i = rng.gen_range(0..n);
                    in_bag[i] = true;
                    i
                })
                .collect();
            (grow_tree(train, rows, params, m, &mut rng), in_bag)
        })
        .collect();

    // Out-of-bag error: average each row's predictions over the trees that
    // never saw it. Serial pass for reproducible float accumulation.
    let mut oob_sum = vec![0.0; n];
    let mut oob_count = vec![0u32; n];
    for (tree, in_bag) in &grown {
        for i in 0..n {
            if !in_bag[i] {
                oob_sum[i] += tree.predict(train.row(i));
                oob_count[i] += 1;
            }
        }
    }
    let mut se = 0.0;
    let mut covered = 0usize;
    for i in 0..n {
        if oob_count[i] > 0 {
            let pred = oob_sum[i] / oob_count[i] as f64;
            se += (pred - train.label(i)).powi(2);
            covered += 1;
        }
    }
    let oob_mse = (covered > 0).then(|| se / covered as f64);

    Ok(ForestModel {
        trees: grown.into_iter().map(|(t, _)| t).collect(),
        dim: p,
        epoch_of_fit: train.epoch(),
        flags,
        oob_mse,
    })
}

/// Grow one tree on the given (possibly repeated) row indices.
fn grow_tree(
    train: &TrainingSet,
    rows: Vec<usize>,
    params: &ForestFitParams,
    features_per_split: usize,
    rng: &mut impl Rng,
) -> Tree {
    let p = train.dim();
    let mut nodes = Vec::new();
    nodes.push(Node::Leaf { value: 0.0 });
    let mut pending = vec![(0usize, rows, 0usize)];
    let mut feature_scratch: Vec<usize> = (0..p).collect();

    while let Some((at, rows, depth)) = pending.pop() {
        let n = rows.len();
        let mean = rows.iter().map(|&i| train.label(i)).sum::<f64>() / n as f64;
        let pure = rows.iter().all(|&i| train.label(i) == train.label(rows[0]));

        let split = if depth >= params.max_depth || n < 2 * params.min_leaf || pure {
            None
        } else {
            best_split(train, &rows, params.min_leaf, features_per_split, &mut feature_scratch, rng)
        };

        match split {
            None => nodes[at] = Node::Leaf { value: mean },
            Some((feature, threshold)) => {
                let (left_rows, right_rows): (Vec<usize>, Vec<usize>) = rows
                    .into_iter()
                    .partition(|&i| train.row(i)[feature] <= threshold);
                let left = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                let right = nodes.len();
                nodes.push(Node::Leaf { value: 0.0 });
                nodes[at] = Node::Split {
                    feature: feature as u32,
                    threshold,
                    left: left as u32,
                    right: right as u32,
                };
                // Push right first so the left child is processed next,
                // keeping rng consumption order fixed.
                pending.push((right, right_rows, depth + 1));
                pending.push((left, left_rows, depth + 1));
            }
        }
    }
    Tree { nodes }
}

/// Best `(feature, threshold)` over a random feature subset, maximizing the
/// between-group sum of squares. Returns `None` when no split keeps
/// `min_leaf` rows on both sides with distinct values.
fn best_split(
    train: &TrainingSet,
    rows: &[usize],
    min_leaf: usize,
    features_per_split: usize,
    feature_scratch: &mut [usize],
    rng: &mut impl Rng,
) -> Option<(usize, f64)> {
    let n = rows.len();
    // Partial Fisher-Yates: the first `features_per_split` entries become the
    // candidate set, in draw order.
    for k in 0..features_per_split.min(feature_scratch.len()) {
        let j = rng.gen_range(k..feature_scratch.len());
        feature_scratch.swap(k, j);
    }

    let mut best: Option<(f64, usize, f64)> = None;
    let mut pairs: Vec<(f64, f64)> = Vec::with_capacity(n);
    for &f in feature_scratch[..features_per_split.min(feature_scratch.len())].iter() {
        pairs.clear();
        pairs.extend(rows.iter().map(|&i| (train.row(i)[f], train.label(i))));
        pairs.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));

        let total: f64 = pairs.iter().map(|&(_, y)| y).sum();
        let mut left_sum = 0.0;
        for i in 0..n - 1 {
            left_sum += pairs[i].1;
            let n_left = i + 1;
            let n_right = n - n_left;
            if n_left < min_leaf || n_right < min_leaf || pairs[i + 1].0 <= pairs[i].0 {
                continue;
            }
            let right_sum = total - left_sum;
            let score = left_sum * left_sum / n_left as f64
                + right_sum * right_sum / n_right as f64;
            if best.map_or(true, |(s, _, _)| score > s) {
                best = Some((score, f, (pairs[i].0 + pairs[i + 1].0) / 2.0));
            }
        }
    }
    best.map(|(_, f, thr)| (f, thr))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covariates::Schema;
    use crate::qtransform::logistic;

    fn step_data() -> TrainingSet {
        // One feature, clean step at 4.5.
        let mut t = TrainingSet::new(Schema::unbounded_real(1), 0);
        for i in 0..10 {
            t.push(&[i as f64], i >= 5).unwrap();
        }
        t
    }

    #[test]
    fn single_tree_finds_the_step() {
        let train = step_data();
        let params = ForestFitParams {
            max_depth: 1,
            min_leaf: 2,
            ..Default::default()
        };
        let mut rng = RngStream::from_seed(0).rng();
        let tree = grow_tree(&train, (0..10).collect(), &params, 1, &mut rng);
        match &tree.nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(*feature, 0);
                assert_eq!(*threshold, 4.5);
            }
            other => panic!("expected a split at the root, got {other:?}"),
        }
        assert_eq!(tree.predict(&[2.0]), 0.0);
        assert_eq!(tree.predict(&[7.0]), 1.0);
    }

    #[test]
    fn min_leaf_blocks_splits_on_tiny_nodes() {
        let mut t = TrainingSet::new(Schema::unbounded_real(1), 0);
        for i in 0..6 {
            t.push(&[i as f64], i >= 3).unwrap();
        }
        let params = ForestFitParams {
            min_leaf: 5,
            ..Default::default()
        };
        let mut rng = RngStream::from_seed(0).rng();
        let tree = grow_tree(&t, (0..6).collect(), &params, 1, &mut rng);
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(tree.predict(&[0.0]), 0.5);
    }

    fn smooth_data(n: usize, seed: u64) -> TrainingSet {
        let stream = RngStream::from_seed(seed);
        let xs = stream.derive("x", 0).normal_vec(n * 2, 0.0, 1.0);
        let us = stream.derive("u", 0).uniform_vec(n, 0.0, 1.0);
        let mut t = TrainingSet::new(Schema::unbounded_real(2), 0);
        for i in 0..n {
            let row = &xs[i * 2..i * 2 + 2];
            t.push(row, us[i] < logistic(row[0] - row[1])).unwrap();
        }
        t
    }

    #[test]
    fn forest_tracks_a_smooth_risk_surface() {
        let train = smooth_data(6000, 21);
        let params = ForestFitParams {
            n_trees: 150,
            max_depth: 10,
            ..Default::default()
        };
        let model = fit_forest(&train, &params, &RngStream::from_seed(3).derive("forest", 0)).unwrap();
        let mut worst: f64 = 0.0;
        let mut total = 0.0;
        let mut count = 0;
        for a in -2..=2 {
            for b in -2..=2 {
                let x = [a as f64 * 0.5, b as f64 * 0.5];
                let truth = logistic(x[0] - x[1]);
                let err = (model.predict_values(&x).unwrap() - truth).abs();
                worst = worst.max(err);
                total += err;
                count += 1;
            }
        }
        let mae = total / count as f64;
        assert!(mae < 0.06, "mean abs error {mae}, worst {worst}");
        assert!(model.flags.is_empty());
    }

    #[test]
    fn oob_error_beats_label_variance() {
        let train = smooth_data(3000, 22);
        let params = ForestFitParams {
            n_trees: 80,
            ..Default::default()
        };
        let model = fit_forest(&train, &params, &RngStream::from_seed(4)).unwrap();
        let mean = train.labels().iter().sum::<f64>() / train.n_rows() as f64;
        let var = train
            .labels()
            .iter()
            .map(|y| (y - mean).powi(2))
            .sum::<f64>()
            / train.n_rows() as f64;
        let oob = model.oob_mse.expect("oob rows exist");
        // Irreducible Bernoulli noise keeps this well above zero, but a fit
        // that learned anything must beat predicting the global mean.
        assert!(oob < var, "oob {oob} vs variance {var}");
    }

    #[test]
    fn fits_are_deterministic_per_stream() {
        let train = smooth_data(800, 23);
        let params = ForestFitParams {
            n_trees: 20,
            ..Default::default()
        };
        let a = fit_forest(&train, &params, &RngStream::from_seed(5)).unwrap();
        let b = fit_forest(&train, &params, &RngStream::from_seed(5)).unwrap();
        let c = fit_forest(&train, &params, &RngStream::from_seed(6)).unwrap();
        let probe = [0.3, -0.4];
        assert_eq!(
            a.predict_values(&probe).unwrap().to_bits(),
            b.predict_values(&probe).unwrap().to_bits()
        );
        assert_ne!(
            a.predict_values(&probe).unwrap().to_bits(),
            c.predict_values(&probe).unwrap().to_bits()
        );
        assert_eq!(a.oob_mse, b.oob_mse);
    }

    #[test]
    fn constant_labels_give_constant_forest() {
        let mut t = TrainingSet::new(Schema::unbounded_real(2), 0);
        for i in 0..50 {
            t.push(&[i as f64, -(i as f64)], true).unwrap();
        }
        let model = fit_forest(
            &t,
            &ForestFitParams { n_trees: 10, ..Default::default() },
            &RngStream::from_seed(7),
        )
        .unwrap();
        assert_eq!(model.flags, vec![FitFlag::AllOneClass]);
        assert_eq!(model.predict_values(&[3.0, 14.0]).unwrap(), 1.0);
        assert_eq!(model.predict_values(&[-90.0, 2.0]).unwrap(), 1.0);
    }

    #[test]
    fn predictions_stay_in_unit_interval() {
        let train = smooth_data(500, 31);
        let model = fit_forest(
            &train,
            &ForestFitParams { n_trees: 30, ..Default::default() },
            &RngStream::from_seed(8),
        )
        .unwrap();
        for mag in [0.1, 1.0, 10.0, 1e4] {
            let v = model.predict_values(&[mag, -mag]).unwrap();
            assert!((0.0..=1.0).contains(&v));
        }
    }
}
