//! Squared-loss gradient-boosted regression trees with exact greedy splits.

use serde::{Deserialize, Serialize};

use super::{validate_training, LearnerError};
use crate::linalg::{canonical_order, reorder};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbrtParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_samples_leaf: usize,
}

impl Default for GbrtParams {
    fn default() -> Self {
        GbrtParams { n_trees: 300, max_depth: 3, learning_rate: 0.1, min_samples_leaf: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf {
        value: f64,
    },
    /// Rows with `x[feature] <= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    /// Node 0 is the root.
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match &self.nodes[at] {
                Node::Leaf { value } => return *value,
                Node::Split { feature, threshold, left, right } => {
                    at = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbrtModel {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    pub base_prediction: f64,
    pub n_trees: usize,
    pub n_features: usize,
}

impl GbrtModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64, LearnerError> {
        if x.len() != self.n_features {
            return Err(LearnerError::DimensionMismatch { expected: self.n_features, got: x.len() });
        }
        Ok(self.base_prediction + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>())
    }

    /// Prediction using only the first `k` trees.
    pub fn predict_staged(&self, x: &[f64], k: usize) -> f64 {
        self.base_prediction + self.learning_rate * self.trees.iter().take(k).map(|t| t.predict(x)).sum::<f64>()
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    residual: &'a [f64],
    params: &'a GbrtParams,
    nodes: Vec<Node>,
}

struct BestSplit {
    gain: f64,
    feature: usize,
    threshold: f64,
}

impl Builder<'_> {
    fn mean(&self, rows: &[usize]) -> f64 {
        rows.iter().map(|&i| self.residual[i]).sum::<f64>() / rows.len() as f64
    }

    fn best_split(&self, rows: &[usize]) -> Option<BestSplit> {
        let n = rows.len();
        let min_leaf = self.params.min_samples_leaf.max(1);
        if n < 2 * min_leaf {
            return None;
        }
        let total: f64 = rows.iter().map(|&i| self.residual[i]).sum();
        let base = total * total / n as f64;
        let mut best: Option<BestSplit> = None;
        let d = self.x[rows[0]].len();
        let mut sorted = rows.to_vec();
        for feature in 0..d {
            sorted.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]).then(a.cmp(&b)));
            let mut left_sum = 0.0;
            for k in 0..n - 1 {
                left_sum += self.residual[sorted[k]];
                let n_left = k + 1;
                let (lo, hi) = (self.x[sorted[k]][feature], self.x[sorted[k + 1]][feature]);
                if n_left < min_leaf || n - n_left < min_leaf || lo == hi {
                    continue;
                }
                let right_sum = total - left_sum;
                let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / (n - n_left) as f64 - base;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some(BestSplit { gain, feature, threshold });
                }
            }
        }
        best
    }

    fn grow(&mut self, rows: Vec<usize>, depth: usize) -> usize {
        let id = self.nodes.len();
        self.nodes.push(Node::Leaf { value: self.mean(&rows) });
        if depth >= self.params.max_depth {
            return id;
        }
        let Some(split) = self.best_split(&rows) else { return id };
        let (l, r): (Vec<usize>, Vec<usize>) = rows.iter().partition(|&&i| self.x[i][split.feature] <= split.threshold);
        let left = self.grow(l, depth + 1);
        let right = self.grow(r, depth + 1);
        self.nodes[id] = Node::Split { feature: split.feature, threshold: split.threshold, left, right };
        id
    }
}

/// Deterministic: split search has no randomness, so `_seed` is unused.
pub fn fit_gbrt(x: &[Vec<f64>], y: &[f64], params: &GbrtParams, _seed: u64) -> Result<GbrtModel, LearnerError> {
    let d = validate_training(x, y)?;
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) || params.max_depth == 0 {
        return Err(LearnerError::InvalidParams(format!("{params:?}")));
    }
    let order = canonical_order(x, y);
    let (x, y) = (reorder(x, &order), reorder(y, &order));
    let base = y.iter().sum::<f64>() / y.len() as f64;
    let mut pred = vec![base; y.len()];
    let mut trees = Vec::with_capacity(params.n_trees);
    for _ in 0..params.n_trees {
        let residual: Vec<f64> = y.iter().zip(&pred).map(|(t, p)| t - p).collect();
        let mut b = Builder { x: &x, residual: &residual, params, nodes: Vec::new() };
        b.grow((0..x.len()).collect(), 0);
        let tree = Tree { nodes: b.nodes };
        for (p, row) in pred.iter_mut().zip(&x) {
            *p += params.learning_rate * tree.predict(row);
        }
        trees.push(tree);
    }
    Ok(GbrtModel {
        trees,
        learning_rate: params.learning_rate,
        base_prediction: base,
        n_trees: params.n_trees,
        n_features: d,
    })
}
