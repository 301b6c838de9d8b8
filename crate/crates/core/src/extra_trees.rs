//! Extremely randomized regression trees.
//!
//! Every tree is grown on the full training set (no bootstrap). At each node,
//! `k` distinct non-constant features are drawn, each gets one cut point drawn
//! uniformly between its minimum and maximum at the node, and the candidate
//! with the largest relative variance reduction wins. Nodes with fewer than
//! `min_leaf` samples, zero target variance or only constant features become
//! leaves. Predictions average the leaf values of all trees.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Dense row-major feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    data: Vec<f64>,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, cols: usize) -> Result<Self> {
        if cols == 0 {
            return Err(Error::Input("matrix must have at least one column".into()));
        }
        if data.len() % cols != 0 {
            return Err(Error::Input(format!(
                "{} values do not fill rows of {cols} columns",
                data.len()
            )));
        }
        Ok(Matrix { data, cols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Input("rows have different lengths".into()));
        }
        Matrix::new(rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect(), cols)
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.cols
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn select(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix { data, cols: self.cols }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleConfig {
    pub n_trees: usize,
    /// Candidate features per node; `None` uses every input feature.
    pub k_candidates: Option<usize>,
    /// Nodes with fewer samples than this are not split (`l_min`).
    pub min_leaf: usize,
    pub seed: u64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            n_trees: 50,
            k_candidates: None,
            min_leaf: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: u32,
        cut: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: f64,
        count: u32,
    },
}

/// A single tree stored as a flat node array; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    #[inline]
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split {
                    feature,
                    cut,
                    left,
                    right,
                } => {
                    i = if x[feature as usize] <= cut {
                        left as usize
                    } else {
                        right as usize
                    }
                }
            }
        }
    }
}

/// A split candidate with its relative variance reduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitScore {
    pub feature: usize,
    pub cut: f64,
    pub score: f64,
}

/// Relative variance reduction of splitting `idx` at `x[feature] <= cut`.
/// `node_ss` is the node's sum of squared deviations around `mean`.
fn score_split(x: &Matrix, y: &[f64], idx: &[usize], feature: usize, cut: f64, mean: f64, node_ss: f64) -> f64 {
    let (mut nl, mut s1l, mut s2l) = (0usize, 0.0, 0.0);
    let (mut s1r, mut s2r) = (0.0, 0.0);
    for &i in idx {
        let d = y[i] - mean;
        if x.at(i, feature) <= cut {
            nl += 1;
            s1l += d;
            s2l += d * d;
        } else {
            s1r += d;
            s2r += d * d;
        }
    }
    let nr = idx.len() - nl;
    if nl == 0 || nr == 0 {
        return 0.0;
    }
    let ss_l = s2l - s1l * s1l / nl as f64;
    let ss_r = s2r - s1r * s1r / nr as f64;
    ((node_ss - ss_l - ss_r) / node_ss).clamp(0.0, 1.0)
}

fn grow_tree(x: &Matrix, y: &[f64], k: usize, min_leaf: usize, rng: &mut Rng, mut on_split: impl FnMut(SplitScore)) -> Tree {
    let mut idx: Vec<usize> = (0..y.len()).collect();
    let mut nodes = vec![Node::Leaf { value: 0.0, count: 0 }];
    // (node slot, start, end) ranges of `idx` still to be processed.
    let mut stack = vec![(0usize, 0usize, idx.len())];
    let mut usable = Vec::with_capacity(x.cols());
    let mut bounds = vec![(0.0, 0.0); x.cols()];

    while let Some((slot, start, end)) = stack.pop() {
        let members = &idx[start..end];
        let n = members.len();
        let mean = members.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
        let leaf = Node::Leaf {
            value: mean,
            count: n as u32,
        };
        let node_ss: f64 = members.iter().map(|&i| (y[i] - mean).powi(2)).sum();
        if n < min_leaf || node_ss <= 0.0 {
            nodes[slot] = leaf;
            continue;
        }

        usable.clear();
        for (j, b) in bounds.iter_mut().enumerate() {
            let (lo, hi) = members.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                let v = x.at(i, j);
                (lo.min(v), hi.max(v))
            });
            *b = (lo, hi);
            if hi > lo {
                usable.push(j);
            }
        }
        if usable.is_empty() {
            nodes[slot] = leaf;
            continue;
        }

        let take = k.min(usable.len());
        let (chosen, _) = usable.partial_shuffle(rng, take);
        let mut best: Option<SplitScore> = None;
        for &feature in chosen.iter() {
            let (lo, hi) = bounds[feature];
            let mut cut = rng.random_range(lo..hi);
            if cut >= hi {
                cut = lo;
            }
            let score = score_split(x, y, members, feature, cut, mean, node_ss);
            if best.is_none_or(|b| score > b.score) {
                best = Some(SplitScore { feature, cut, score });
            }
        }
        let best = best.expect("at least one candidate");
        on_split(best);

        // Partition idx[start..end] so that left members come first.
        let slice = &mut idx[start..end];
        let mut mid = 0;
        for i in 0..slice.len() {
            if x.at(slice[i], best.feature) <= best.cut {
                slice.swap(i, mid);
                mid += 1;
            }
        }
        let left = nodes.len();
        nodes.push(Node::Leaf { value: 0.0, count: 0 });
        nodes.push(Node::Leaf { value: 0.0, count: 0 });
        nodes[slot] = Node::Split {
            feature: best.feature as u32,
            cut: best.cut,
            left: left as u32,
            right: left as u32 + 1,
        };
        stack.push((left + 1, start + mid, end));
        stack.push((left, start, start + mid));
    }
    Tree { nodes }
}

fn check_training_data(x: &Matrix, y: &[f64]) -> Result<()> {
    if y.is_empty() {
        return Err(Error::Input("cannot fit on an empty dataset".into()));
    }
    if x.rows() != y.len() {
        return Err(Error::Input(format!(
            "{} feature rows but {} targets",
            x.rows(),
            y.len()
        )));
    }
    if x.data.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Input("training data contains NaN or infinite values".into()));
    }
    Ok(())
}

/// A fitted ensemble of extremely randomized trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ensemble {
    config: EnsembleConfig,
    n_features: usize,
    trees: Vec<Tree>,
}

impl Ensemble {
    /// Fits `config.n_trees` trees in parallel; tree `t` draws from its own
    /// stream derived from `config.seed`.
    pub fn fit(x: &Matrix, y: &[f64], config: &EnsembleConfig) -> Result<Self> {
        Self::fit_traced(x, y, config, |_| {})
    }

    /// Like [`fit`](Self::fit), reporting every accepted split to `on_split`.
    pub fn fit_traced(
        x: &Matrix,
        y: &[f64],
        config: &EnsembleConfig,
        on_split: impl Fn(SplitScore) + Sync,
    ) -> Result<Self> {
        check_training_data(x, y)?;
        let k = config.k_candidates.unwrap_or(x.cols());
        if config.n_trees == 0 || k == 0 || k > x.cols() || config.min_leaf == 0 {
            return Err(Error::Config(format!(
                "invalid ensemble config for {} features: {config:?}",
                x.cols()
            )));
        }
        let trees = (0..config.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng::rng_for(config.seed, &[t as u64]);
                grow_tree(x, y, k, config.min_leaf, &mut rng, &on_split)
            })
            .collect();
        Ok(Ensemble {
            config: config.clone(),
            n_features: x.cols(),
            trees,
        })
    }

    /// Builds an ensemble from already grown trees.
    pub fn from_trees(config: EnsembleConfig, n_features: usize, trees: Vec<Tree>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::Input("ensemble needs at least one tree".into()));
        }
        Ok(Ensemble {
            config,
            n_features,
            trees,
        })
    }

    pub fn config(&self) -> &EnsembleConfig {
        &self.config
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features {
            return Err(Error::Input(format!(
                "expected {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        Ok(self.predict_unchecked(x))
    }

    /// Mean of the leaf values reached by `x`; the caller guarantees its length.
    #[inline]
    pub fn predict_unchecked(&self, x: &[f64]) -> f64 {
        self.trees.iter().map(|t| t.predict(x)).sum::<f64>() / self.trees.len() as f64
    }

    pub fn predict_rows(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::Input(format!(
                "expected {} features, got {}",
                self.n_features,
                x.cols()
            )));
        }
        Ok((0..x.rows())
            .into_par_iter()
            .map(|i| self.predict_unchecked(x.row(i)))
            .collect())
    }
}

/// Chooses `min_leaf` among `candidates` by k-fold cross-validated MSE.
/// Ties go to the larger value.
pub fn cv_select_lmin(
    x: &Matrix,
    y: &[f64],
    candidates: &[usize],
    folds: usize,
    base: &EnsembleConfig,
    rng: &mut Rng,
) -> Result<usize> {
    check_training_data(x, y)?;
    if candidates.is_empty() {
        return Err(Error::Config("no min_leaf candidates".into()));
    }
    if candidates.len() == 1 {
        return Ok(candidates[0]);
    }
    if folds < 2 || y.len() < folds {
        return Err(Error::Input(format!(
            "{} samples cannot be split into {folds} folds",
            y.len()
        )));
    }
    let mut order: Vec<usize> = (0..y.len()).collect();
    order.shuffle(rng);
    let splits: Vec<(Matrix, Vec<f64>, Matrix, Vec<f64>)> = (0..folds)
        .map(|f| {
            let (test, train): (Vec<(usize, usize)>, Vec<(usize, usize)>) =
                order.iter().copied().enumerate().partition(|(pos, _)| pos % folds == f);
            let test: Vec<usize> = test.into_iter().map(|(_, i)| i).collect();
            let train: Vec<usize> = train.into_iter().map(|(_, i)| i).collect();
            (
                x.select(&train),
                train.iter().map(|&i| y[i]).collect(),
                x.select(&test),
                test.iter().map(|&i| y[i]).collect(),
            )
        })
        .collect();

    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut best = (f64::INFINITY, sorted[0]);
    for &lmin in &sorted {
        let config = EnsembleConfig {
            min_leaf: lmin,
            ..base.clone()
        };
        let mut sse = 0.0;
        for (xt, yt, xv, yv) in &splits {
            let model = Ensemble::fit(xt, yt, &config)?;
            let pred = model.predict_rows(xv)?;
            sse += pred.iter().zip(yv).map(|(p, t)| (p - t).powi(2)).sum::<f64>();
        }
        let mse = sse / y.len() as f64;
        if mse <= best.0 {
            best = (mse, lmin);
        }
    }
    Ok(best.1)
}
