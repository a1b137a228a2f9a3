//! Ordinary least squares and logistic regression (Newton iterations).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cholesky, cholesky_solve, Matrix};
use crate::types::Task;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    /// Ridge penalty on the (non-intercept) weights; tiny by default, only to
    /// keep collinear designs solvable.
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_ridge() -> f64 {
    1e-8
}

impl Default for LinearConfig {
    fn default() -> Self {
        LinearConfig { ridge: default_ridge() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        self.intercept + row.iter().zip(&self.weights).map(|(x, w)| x * w).sum::<f64>()
    }

    pub fn fit(cfg: &LinearConfig, x: &Matrix, y: &[f64], task: Task) -> Result<LinearModel> {
        match task {
            Task::Regression => fit_ols(cfg, x, y),
            Task::Binary => fit_logistic(cfg, x, y),
        }
    }
}

/// Weighted normal equations with an unpenalized intercept column.
fn solve_weighted(cfg: &LinearConfig, x: &Matrix, w: &[f64], z: &[f64]) -> Result<Vec<f64>> {
    let (n, p) = (x.rows(), x.cols());
    let d = p + 1;
    let mut xtx = Matrix::zeros(d, d);
    let mut xtz = vec![0.0; d];
    let mut row = vec![0.0; d];
    for i in 0..n {
        row[0] = 1.0;
        row[1..].copy_from_slice(x.row(i));
        for a in 0..d {
            let wa = w[i] * row[a];
            xtz[a] += wa * z[i];
            for b in 0..=a {
                xtx[(a, b)] += wa * row[b];
            }
        }
    }
    let scale = (1..d).map(|a| xtx[(a, a)]).fold(0.0, f64::max).max(1.0);
    for a in 0..d {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
        if a > 0 {
            xtx[(a, a)] += cfg.ridge * scale;
        }
    }
    let l = cholesky(&xtx)?;
    if (0..d).any(|a| l[(a, a)] == 0.0) {
        return Err(Error::ShapeMismatch("singular design in linear model".into()));
    }
    Ok(cholesky_solve(&l, &xtz))
}

fn fit_ols(cfg: &LinearConfig, x: &Matrix, y: &[f64]) -> Result<LinearModel> {
    let w = vec![1.0; x.rows()];
    let coef = solve_weighted(cfg, x, &w, y)?;
    Ok(LinearModel {
        intercept: coef[0],
        weights: coef[1..].to_vec(),
    })
}

fn fit_logistic(cfg: &LinearConfig, x: &Matrix, y: &[f64]) -> Result<LinearModel> {
    let n = x.rows();
    let mut model = LinearModel {
        weights: vec![0.0; x.cols()],
        intercept: 0.0,
    };
    // a slightly larger ridge keeps separable data from diverging
    let cfg = LinearConfig {
        ridge: cfg.ridge.max(1e-6),
    };
    for _ in 0..50 {
        let mut w = vec![0.0; n];
        let mut z = vec![0.0; n];
        for i in 0..n {
            let eta = model.predict_row(x.row(i));
            let p = (1.0 / (1.0 + (-eta).exp())).clamp(1e-10, 1.0 - 1e-10);
            w[i] = p * (1.0 - p);
            z[i] = eta + (y[i] - p) / w[i];
        }
        let coef = solve_weighted(&cfg, x, &w, &z)?;
        let change = coef[1..]
            .iter()
            .zip(&model.weights)
            .map(|(a, b)| (a - b).abs())
            .fold((coef[0] - model.intercept).abs(), f64::max);
        model.intercept = coef[0];
        model.weights = coef[1..].to_vec();
        if change < 1e-9 {
            break;
        }
    }
    if !model.intercept.is_finite() || model.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFiniteLoss("logistic regression diverged".into()));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_exact_line() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0], vec![2.0, 1.0], vec![3.0, 5.0]]);
        let y: Vec<f64> = (0..4).map(|i| 1.5 + 2.0 * x[(i, 0)] - x[(i, 1)]).collect();
        let m = LinearModel::fit(&LinearConfig::default(), &x, &y, Task::Regression).unwrap();
        assert!((m.intercept - 1.5).abs() < 1e-6);
        assert!((m.weights[0] - 2.0).abs() < 1e-6);
        assert!((m.weights[1] + 1.0).abs() < 1e-6);
    }

    #[test]
    fn logistic_separates_direction() {
        let rows: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 - 20.0) / 10.0]).collect();
        let x = Matrix::from_rows(&rows);
        // overlapping classes so the maximum-likelihood slope is finite
        let y: Vec<f64> = (0..40)
            .map(|i| if rows[i][0] + 0.8 * (7.0 * i as f64).sin() > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let m = LinearModel::fit(&LinearConfig::default(), &x, &y, Task::Binary).unwrap();
        assert!(m.weights[0] > 0.5, "slope {}", m.weights[0]);
        assert!(m.weights[0].is_finite());
    }
}
