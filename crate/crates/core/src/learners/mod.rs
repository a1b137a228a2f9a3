//! Base estimators behind one fit/predict interface.
//!
//! Predictions are raw regression values, or logits for binary tasks; the
//! sigmoid is applied only inside the loss.

pub mod forest;
pub mod linear;
pub mod mlp;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{GroupSpec, ProjectionSet, Task};

pub use forest::{Forest, ForestConfig, MaxFeatures};
pub use linear::{LinearConfig, LinearModel};
pub use mlp::{MlpConfig, Network, Stacking};

/// Minimum number of training rows accepted by [`fit`].
pub const MIN_TRAIN_ROWS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnerConfig {
    Mlp(MlpConfig),
    Forest(ForestConfig),
    Linear(LinearConfig),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LearnerKind {
    Mlp,
    Forest,
    Linear,
}

/// Per-column affine standardization estimated on the training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Standardizer {
        let (n, p) = (x.rows(), x.cols());
        let mut mean = vec![0.0; p];
        for i in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(i)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        let mut var = vec![0.0; p];
        for i in 0..n {
            for ((s, v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n.max(1) as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = x.clone();
        for i in 0..out.rows() {
            for ((v, m), s) in out.row_mut(i).iter_mut().zip(&self.mean).zip(&self.scale) {
                *v = (*v - m) / s;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Model {
    Mlp {
        x_scaler: Standardizer,
        y_mean: f64,
        y_scale: f64,
        network: Network,
    },
    Forest(Forest),
    Linear(LinearModel),
}

/// A trained estimator with deterministic prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedLearner {
    task: Task,
    n_features: usize,
    model: Model,
}

/// Trains the configured estimator on one fold.
pub fn fit(config: &LearnerConfig, x: &Matrix, y: &[f64], task: Task, seed: u64) -> Result<FittedLearner> {
    if x.rows() != y.len() {
        return Err(Error::ShapeMismatch(format!("{} rows vs {} outcomes", x.rows(), y.len())));
    }
    if x.rows() < MIN_TRAIN_ROWS {
        return Err(Error::TooFewSamples {
            needed: MIN_TRAIN_ROWS,
            got: x.rows(),
        });
    }
    if !x.is_finite() || y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidDataset("non-finite training data".into()));
    }
    if task == Task::Binary && y.iter().all(|&v| v == y[0]) {
        return Err(Error::DegenerateOutcome);
    }
    let model = match config {
        LearnerConfig::Mlp(cfg) => {
            let x_scaler = Standardizer::fit(x);
            let xs = x_scaler.apply(x);
            let (y_mean, y_scale) = match task {
                Task::Regression => {
                    let n = y.len() as f64;
                    let m = y.iter().sum::<f64>() / n;
                    let sd = (y.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                    (m, if sd > 1e-12 { sd } else { 1.0 })
                }
                Task::Binary => (0.0, 1.0),
            };
            let ys: Vec<f64> = y.iter().map(|v| (v - y_mean) / y_scale).collect();
            let network = mlp::train(cfg, &xs, &ys, task, seed)?;
            Model::Mlp {
                x_scaler,
                y_mean,
                y_scale,
                network,
            }
        }
        LearnerConfig::Forest(cfg) => {
            let targets = Matrix::from_vec(y.len(), 1, y.to_vec())?;
            Model::Forest(Forest::fit(cfg, x, &targets, task == Task::Binary, seed)?)
        }
        LearnerConfig::Linear(cfg) => Model::Linear(LinearModel::fit(cfg, x, y, task)?),
    };
    Ok(FittedLearner {
        task,
        n_features: x.cols(),
        model,
    })
}

/// Clamp used when turning probabilities into logits.
pub const PROB_CLAMP: f64 = 1e-12;

fn logit(p: f64) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (p / (1.0 - p)).ln()
}

impl FittedLearner {
    pub fn kind(&self) -> LearnerKind {
        match self.model {
            Model::Mlp { .. } => LearnerKind::Mlp,
            Model::Forest(_) => LearnerKind::Forest,
            Model::Linear(_) => LearnerKind::Linear,
        }
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    /// Regression values or logits, one per row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<f64>> {
        if x.cols() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "learner trained on {} columns, got {}",
                self.n_features,
                x.cols()
            )));
        }
        Ok(match &self.model {
            Model::Mlp {
                x_scaler,
                y_mean,
                y_scale,
                network,
            } => {
                let out = network.forward(&x_scaler.apply(x));
                out.into_iter().map(|o| o * y_scale + y_mean).collect()
            }
            Model::Forest(f) => {
                let p = f.predict(x)?;
                match self.task {
                    Task::Regression => p.as_slice().to_vec(),
                    Task::Binary => p.as_slice().iter().map(|&v| logit(v)).collect(),
                }
            }
            Model::Linear(m) => (0..x.rows()).map(|i| m.predict_row(x.row(i))).collect(),
        })
    }

    /// Rejects deserialized state that `predict` cannot use: shapes that do
    /// not chain, dangling tree nodes, non-finite parameters.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::MalformedModel(msg.into()));
        let p = self.n_features;
        match &self.model {
            Model::Mlp {
                x_scaler,
                y_mean,
                y_scale,
                network,
            } => {
                if x_scaler.mean.len() != p || x_scaler.scale.len() != p {
                    return bad("standardizer width does not match the features");
                }
                let scale_ok = |s: &f64| s.is_finite() && *s > 0.0;
                if x_scaler.mean.iter().any(|m| !m.is_finite()) || !x_scaler.scale.iter().all(scale_ok) {
                    return bad("invalid standardizer");
                }
                if !y_mean.is_finite() || !scale_ok(y_scale) {
                    return bad("invalid outcome scaling");
                }
                if network.input_dim() != p {
                    return bad("network width does not match the features");
                }
                network.check()
            }
            Model::Forest(f) => {
                if f.n_features() != p || f.n_outputs() != 1 {
                    return bad("forest shape does not match the features");
                }
                f.check()
            }
            Model::Linear(m) => {
                if m.weights.len() != p || !m.intercept.is_finite() || m.weights.iter().any(|w| !w.is_finite()) {
                    return bad("invalid linear model");
                }
                Ok(())
            }
        }
    }

    /// Trained projection sub-layer weights, present iff this is a stacked MLP.
    pub fn projection(&self) -> Option<ProjectionSet> {
        match &self.model {
            Model::Mlp { network, .. } => network.projection().map(|p| p.as_projection_set()),
            _ => None,
        }
    }

    /// Input columns as seen by the projection: standardized with the
    /// training-fold statistics (identity for non-MLP learners).
    pub fn standardize(&self, x: &Matrix) -> Matrix {
        match &self.model {
            Model::Mlp { x_scaler, .. } => x_scaler.apply(x),
            _ => x.clone(),
        }
    }

    /// Group summaries `x'` of a stacked MLP: standardize, then project.
    pub fn project(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "learner trained on {} columns, got {}",
                self.n_features,
                x.cols()
            )));
        }
        match &self.model {
            Model::Mlp { x_scaler, network, .. } if network.projection().is_some() => {
                Ok(network.project(&x_scaler.apply(x)))
            }
            _ => Err(Error::InvalidConfig("learner has no projection sub-layer".into())),
        }
    }

    /// Predicts from already-projected inputs, skipping the projection layer.
    pub fn predict_projected(&self, z: &Matrix) -> Result<Vec<f64>> {
        match &self.model {
            Model::Mlp {
                y_mean,
                y_scale,
                network,
                ..
            } if network.projection().is_some() => {
                if z.cols() != network.body_input_dim() {
                    return Err(Error::ShapeMismatch(format!(
                        "projected input has {} columns, network expects {}",
                        z.cols(),
                        network.body_input_dim()
                    )));
                }
                Ok(network.forward_body(z).into_iter().map(|o| o * y_scale + y_mean).collect())
            }
            _ => Err(Error::InvalidConfig("learner has no projection sub-layer".into())),
        }
    }
}

/// Concatenates `x^{G_k} U_k` over groups, then appends uncovered columns.
pub fn project_groups(x: &Matrix, projection: &ProjectionSet, spec: &GroupSpec) -> Result<Matrix> {
    projection.check_against(spec)?;
    spec.validate(x.cols())?;
    let uncovered = spec.uncovered(x.cols());
    let width = projection.projected_width() + uncovered.len();
    let mut out = Matrix::zeros(x.rows(), width);
    for i in 0..x.rows() {
        let src = x.row(i);
        let dst = out.row_mut(i);
        let mut off = 0;
        for (g, u) in spec.groups.iter().zip(&projection.matrices) {
            let d = u.cols();
            for (r, &c) in g.iter().enumerate() {
                for (o, w) in dst[off..off + d].iter_mut().zip(u.row(r)) {
                    *o += src[c] * w;
                }
            }
            off += d;
        }
        for (o, &c) in dst[off..].iter_mut().zip(&uncovered) {
            *o = src[c];
        }
    }
    Ok(out)
}
