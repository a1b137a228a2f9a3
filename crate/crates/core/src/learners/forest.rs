//! Multi-output CART regression forest with bootstrap and random feature
//! subsets. Leaves keep the (bootstrap) indices of the training rows they
//! hold so callers can sample from the leaf population.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::rng_for;

/// How many candidate features each split examines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MaxFeatures {
    /// `ceil(p/3)` for regression targets, `ceil(sqrt(p))` for classification.
    #[default]
    Auto,
    All,
    Sqrt,
    Third,
    Count(usize),
}

impl MaxFeatures {
    pub fn resolve(self, p: usize, classification: bool) -> usize {
        let k = match self {
            MaxFeatures::Auto if classification => (p as f64).sqrt().ceil() as usize,
            MaxFeatures::Auto | MaxFeatures::Third => p.div_ceil(3),
            MaxFeatures::All => p,
            MaxFeatures::Sqrt => (p as f64).sqrt().ceil() as usize,
            MaxFeatures::Count(c) => c,
        };
        k.clamp(1, p.max(1))
    }
}

fn default_trees() -> usize {
    100
}

fn default_leaf() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    #[serde(default = "default_trees")]
    pub n_trees: usize,
    #[serde(default)]
    pub max_depth: Option<usize>,
    #[serde(default = "default_leaf")]
    pub min_samples_leaf: usize,
    #[serde(default)]
    pub max_features: MaxFeatures,
    #[serde(default = "default_true")]
    pub bootstrap: bool,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: default_trees(),
            max_depth: None,
            min_samples_leaf: default_leaf(),
            max_features: MaxFeatures::Auto,
            bootstrap: true,
        }
    }
}

impl ForestConfig {
    /// Defaults for modelling a group from the remaining columns.
    pub fn conditional() -> Self {
        ForestConfig {
            min_samples_leaf: 5,
            ..ForestConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig("forest needs at least one tree".into()));
        }
        if self.min_samples_leaf == 0 {
            return Err(Error::InvalidConfig("min_samples_leaf must be >= 1".into()));
        }
        if self.max_depth == Some(0) {
            return Err(Error::InvalidConfig("max_depth must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Node {
    Split {
        feature: u32,
        threshold: f64,
        left: u32,
        right: u32,
    },
    Leaf {
        value: Vec<f64>,
        members: Vec<u32>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn leaf_of(&self, row: &[f64]) -> usize {
        let mut at = 0usize;
        loop {
            match &self.nodes[at] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    at = if row[*feature as usize] <= *threshold {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
                Node::Leaf { .. } => return at,
            }
        }
    }

    pub fn predict_row(&self, row: &[f64]) -> &[f64] {
        match &self.nodes[self.leaf_of(row)] {
            Node::Leaf { value, .. } => value,
            Node::Split { .. } => unreachable!(),
        }
    }

    /// Training-row indices (with bootstrap multiplicity) in the leaf `row` reaches.
    pub fn leaf_members(&self, row: &[f64]) -> &[u32] {
        match &self.nodes[self.leaf_of(row)] {
            Node::Leaf { members, .. } => members,
            Node::Split { .. } => unreachable!(),
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<Tree>,
    n_features: usize,
    n_outputs: usize,
}

struct Builder<'a> {
    x: &'a Matrix,
    y: &'a Matrix,
    min_leaf: usize,
    max_depth: usize,
    mtry: usize,
    nodes: Vec<Node>,
}

impl Forest {
    /// Fits on `x` (n x p) against the targets `y` (n x q).
    pub fn fit(cfg: &ForestConfig, x: &Matrix, y: &Matrix, classification: bool, seed: u64) -> Result<Forest> {
        cfg.validate()?;
        if x.rows() != y.rows() {
            return Err(Error::ShapeMismatch(format!("{} rows vs {} targets", x.rows(), y.rows())));
        }
        if x.rows() == 0 || x.cols() == 0 || y.cols() == 0 {
            return Err(Error::ShapeMismatch("forest needs non-empty inputs and targets".into()));
        }
        let mtry = cfg.max_features.resolve(x.cols(), classification);
        let max_depth = cfg.max_depth.unwrap_or(usize::MAX);
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = rng_for(seed, "tree", t as u64);
                let n = x.rows();
                let mut sample: Vec<u32> = if cfg.bootstrap {
                    (0..n).map(|_| rng.random_range(0..n) as u32).collect()
                } else {
                    (0..n as u32).collect()
                };
                let mut b = Builder {
                    x,
                    y,
                    min_leaf: cfg.min_samples_leaf,
                    max_depth,
                    mtry,
                    nodes: Vec::new(),
                };
                b.grow(&mut sample, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Forest {
            trees,
            n_features: x.cols(),
            n_outputs: y.cols(),
        })
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_outputs(&self) -> usize {
        self.n_outputs
    }

    /// Mean of the trees' leaf values, n x q.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "forest trained on {} columns, got {}",
                self.n_features,
                x.cols()
            )));
        }
        let q = self.n_outputs;
        let mut out = Matrix::zeros(x.rows(), q);
        let scale = 1.0 / self.trees.len() as f64;
        for i in 0..x.rows() {
            let row = x.row(i);
            let dst = out.row_mut(i);
            for t in &self.trees {
                for (d, v) in dst.iter_mut().zip(t.predict_row(row)) {
                    *d += v;
                }
            }
            dst.iter_mut().for_each(|d| *d *= scale);
        }
        Ok(out)
    }

    /// Structural check for a deserialized forest: children point forward,
    /// features exist and every value is finite.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::MalformedModel(msg));
        if self.trees.is_empty() {
            return bad("forest has no trees".into());
        }
        for (t, tree) in self.trees.iter().enumerate() {
            let len = tree.nodes.len();
            if len == 0 {
                return bad(format!("tree {t} is empty"));
            }
            for (id, node) in tree.nodes.iter().enumerate() {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => {
                        let forward = |c: u32| (c as usize) > id && (c as usize) < len;
                        if (*feature as usize) >= self.n_features || !threshold.is_finite() || !forward(*left) || !forward(*right) {
                            return bad(format!("tree {t} node {id}: invalid split"));
                        }
                    }
                    Node::Leaf { value, .. } => {
                        if value.len() != self.n_outputs || value.iter().any(|v| !v.is_finite()) {
                            return bad(format!("tree {t} node {id}: invalid leaf"));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Builder<'_> {
    fn leaf(&mut self, sample: &[u32]) -> u32 {
        let q = self.y.cols();
        let mut value = vec![0.0; q];
        for &i in sample {
            for (v, t) in value.iter_mut().zip(self.y.row(i as usize)) {
                *v += t;
            }
        }
        let inv = 1.0 / sample.len() as f64;
        value.iter_mut().for_each(|v| *v *= inv);
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Leaf {
            value,
            members: sample.to_vec(),
        });
        id
    }

    fn grow<R: Rng>(&mut self, sample: &mut [u32], depth: usize, rng: &mut R) -> u32 {
        let m = sample.len();
        if depth >= self.max_depth || m < 2 * self.min_leaf || self.is_pure(sample) {
            return self.leaf(sample);
        }
        let Some((feature, threshold)) = self.best_split(sample, rng) else {
            return self.leaf(sample);
        };
        // partition in place: rows with x <= threshold first
        let mut lo = 0;
        for i in 0..m {
            if self.x[(sample[i] as usize, feature)] <= threshold {
                sample.swap(lo, i);
                lo += 1;
            }
        }
        let id = self.nodes.len() as u32;
        self.nodes.push(Node::Split {
            feature: feature as u32,
            threshold,
            left: 0,
            right: 0,
        });
        let (left_s, right_s) = sample.split_at_mut(lo);
        let left = self.grow(left_s, depth + 1, rng);
        let right = self.grow(right_s, depth + 1, rng);
        if let Node::Split { left: l, right: r, .. } = &mut self.nodes[id as usize] {
            *l = left;
            *r = right;
        }
        id
    }

    fn is_pure(&self, sample: &[u32]) -> bool {
        let first = self.y.row(sample[0] as usize);
        sample[1..].iter().all(|&i| self.y.row(i as usize) == first)
    }

    /// Best (feature, threshold) by total squared-error reduction over all
    /// outputs, among `mtry` randomly chosen features.
    fn best_split<R: Rng>(&self, sample: &[u32], rng: &mut R) -> Option<(usize, f64)> {
        let p = self.x.cols();
        let q = self.y.cols();
        let m = sample.len();
        let mut total = vec![0.0; q];
        for &i in sample {
            for (t, v) in total.iter_mut().zip(self.y.row(i as usize)) {
                *t += v;
            }
        }
        let parent: f64 = total.iter().map(|s| s * s).sum::<f64>() / m as f64;
        let mut best: Option<(usize, f64)> = None;
        let mut best_score = parent + 1e-12 * parent.abs().max(1e-300);
        let mut order: Vec<(f64, u32)> = Vec::with_capacity(m);
        let mut left = vec![0.0; q];
        for feature in index::sample(rng, p, self.mtry) {
            order.clear();
            order.extend(sample.iter().map(|&i| (self.x[(i as usize, feature)], i)));
            order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            if order[0].0 == order[m - 1].0 {
                continue;
            }
            left.iter_mut().for_each(|v| *v = 0.0);
            for pos in 0..m - 1 {
                let row = self.y.row(order[pos].1 as usize);
                for (l, v) in left.iter_mut().zip(row) {
                    *l += v;
                }
                let n_left = pos + 1;
                if n_left < self.min_leaf {
                    continue;
                }
                if m - n_left < self.min_leaf {
                    break;
                }
                if order[pos].0 == order[pos + 1].0 {
                    continue;
                }
                let nl = n_left as f64;
                let nr = (m - n_left) as f64;
                let mut score = 0.0;
                for (l, t) in left.iter().zip(&total) {
                    let r = t - l;
                    score += l * l / nl + r * r / nr;
                }
                if score > best_score {
                    best_score = score;
                    best = Some((feature, 0.5 * (order[pos].0 + order[pos + 1].0)));
                }
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy(n: usize, seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Matrix::zeros(n, 3);
        let mut y = Matrix::zeros(n, 2);
        for i in 0..n {
            for j in 0..3 {
                x[(i, j)] = rng.random_range(-1.0..1.0);
            }
            y[(i, 0)] = if x[(i, 0)] > 0.0 { 1.0 } else { -1.0 };
            y[(i, 1)] = 2.0 * x[(i, 1)];
        }
        (x, y)
    }

    #[test]
    fn prediction_is_mean_of_trees() {
        let (x, y) = toy(120, 1);
        let f = Forest::fit(&ForestConfig { n_trees: 7, ..ForestConfig::default() }, &x, &y, false, 3).unwrap();
        let pred = f.predict(&x).unwrap();
        for i in 0..x.rows() {
            for o in 0..2 {
                let mean = f.trees().iter().map(|t| t.predict_row(x.row(i))[o]).sum::<f64>() / 7.0;
                assert!((pred[(i, o)] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn learns_step_and_linear_targets() {
        let (x, y) = toy(600, 2);
        let (xt, yt) = toy(200, 9);
        let f = Forest::fit(&ForestConfig::default(), &x, &y, false, 4).unwrap();
        let pred = f.predict(&xt).unwrap();
        let mse: f64 = (0..200).map(|i| (pred[(i, 1)] - yt[(i, 1)]).powi(2)).sum::<f64>() / 200.0;
        let var: f64 = (0..200).map(|i| yt[(i, 1)].powi(2)).sum::<f64>() / 200.0;
        assert!(mse < 0.1 * var, "mse {mse} var {var}");
        let sign_errors = (0..200).filter(|&i| pred[(i, 0)].signum() != yt[(i, 0)]).count();
        assert!(sign_errors < 15, "{sign_errors}");
    }

    #[test]
    fn leaves_respect_min_size_and_members_match_values() {
        let (x, y) = toy(200, 3);
        let cfg = ForestConfig {
            n_trees: 5,
            min_samples_leaf: 5,
            ..ForestConfig::default()
        };
        let f = Forest::fit(&cfg, &x, &y, false, 1).unwrap();
        for t in f.trees() {
            for i in 0..x.rows() {
                let members = t.leaf_members(x.row(i));
                assert!(members.len() >= 5);
                let mean: f64 = members.iter().map(|&m| y[(m as usize, 1)]).sum::<f64>() / members.len() as f64;
                assert!((mean - t.predict_row(x.row(i))[1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let (x, y) = toy(100, 5);
        let cfg = ForestConfig { n_trees: 10, ..ForestConfig::default() };
        let a = Forest::fit(&cfg, &x, &y, false, 8).unwrap();
        let b = Forest::fit(&cfg, &x, &y, false, 8).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mtry_rules() {
        assert_eq!(MaxFeatures::Auto.resolve(20, false), 7);
        assert_eq!(MaxFeatures::Auto.resolve(20, true), 5);
        assert_eq!(MaxFeatures::All.resolve(20, false), 20);
        assert_eq!(MaxFeatures::Count(50).resolve(20, false), 20);
    }

    #[test]
    fn shape_mismatch() {
        let (x, y) = toy(50, 5);
        let f = Forest::fit(&ForestConfig { n_trees: 2, ..ForestConfig::default() }, &x, &y, false, 8).unwrap();
        assert!(f.predict(&Matrix::zeros(3, 2)).is_err());
    }
}
