//! Competing group-importance methods: marginal t-tests, leave-one-group-in,
//! leave-one-group-out, group permutation and group-complement permutation.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::conditional::PermutationMode;
use crate::error::{Error, Result};
use crate::inference::{
    self, fit_cross, importance_statistics, loss_delta, prediction_score, stream_seed, ImportanceConfig,
    LossDeltaMatrix,
};
use crate::learners::{self, ForestConfig, LearnerConfig};
use crate::matrix::{spd_inverse, Matrix};
use crate::types::{derive_seed, rng_for, Dataset, GroupSpec, SplitPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMethod {
    Marginal,
    Logi,
    Logo,
    Gpfi,
    Gopfi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineScore {
    pub method: BaselineMethod,
    pub scores: Vec<f64>,
    pub p_values: Option<Vec<f64>>,
    /// Held-out score of the fitted learner, when there is a single one.
    pub prediction_score: Option<f64>,
}

impl BaselineScore {
    /// Whether a larger score means a more important group.
    pub fn higher_is_important(&self) -> bool {
        self.method != BaselineMethod::Marginal
    }
}

/// Minimum two-sided coefficient p-value of an OLS fit of `y` on each group alone.
pub fn run_marginal(data: &Dataset, spec: &GroupSpec) -> Result<BaselineScore> {
    spec.validate(data.p())?;
    let n = data.n();
    let mut p_values = Vec::with_capacity(spec.len());
    for (k, cols) in spec.groups.iter().enumerate() {
        if n <= cols.len() + 1 {
            return Err(Error::TooFewSamples {
                needed: cols.len() + 2,
                got: n,
            });
        }
        let p = match group_t_tests(data.x(), data.y(), cols) {
            Some(ps) => ps.into_iter().fold(1.0, f64::min),
            None => {
                log::warn!("marginal: singular design for group {k}; reporting p = 1");
                1.0
            }
        };
        p_values.push(p);
    }
    Ok(BaselineScore {
        method: BaselineMethod::Marginal,
        scores: p_values.clone(),
        p_values: Some(p_values),
        prediction_score: None,
    })
}

/// Two-sided t-test p-values of the slopes, or `None` for a singular design.
fn group_t_tests(x: &Matrix, y: &[f64], cols: &[usize]) -> Option<Vec<f64>> {
    let n = x.rows();
    let d = cols.len() + 1;
    let mut design = Matrix::zeros(n, d);
    for i in 0..n {
        let row = design.row_mut(i);
        row[0] = 1.0;
        for (k, &c) in cols.iter().enumerate() {
            row[k + 1] = x[(i, c)];
        }
    }
    let xt = design.transpose();
    let inv = spd_inverse(&xt.matmul(&design), 1e-12)?;
    let xty: Vec<f64> = (0..d).map(|a| xt.row(a).iter().zip(y).map(|(u, v)| u * v).sum()).collect();
    let beta: Vec<f64> = (0..d).map(|a| inv.row(a).iter().zip(&xty).map(|(u, v)| u * v).sum()).collect();
    let sse: f64 = (0..n)
        .map(|i| {
            let fit: f64 = design.row(i).iter().zip(&beta).map(|(u, v)| u * v).sum();
            (y[i] - fit).powi(2)
        })
        .sum();
    let df = (n - d) as f64;
    let sigma2 = sse / df;
    let t_dist = StudentsT::new(0.0, 1.0, df).ok()?;
    Some(
        (1..d)
            .map(|a| {
                let se = (sigma2 * inv[(a, a)]).sqrt();
                if se > 0.0 {
                    let t = beta[a] / se;
                    (2.0 * t_dist.sf(t.abs())).clamp(0.0, 1.0)
                } else if beta[a] != 0.0 {
                    0.0
                } else {
                    1.0
                }
            })
            .collect(),
    )
}

fn forest_learner(cfg: &ForestConfig) -> LearnerConfig {
    LearnerConfig::Forest(cfg.clone())
}

fn fold_xy(data: &Dataset, rows: &[usize], cols: &[usize]) -> (Matrix, Vec<f64>) {
    let x = data.x().select_rows(rows).select_columns(cols);
    (x, rows.iter().map(|&i| data.y()[i]).collect())
}

/// Held-out R² gain of a forest fit on each group alone over predicting the training mean.
pub fn run_logi(data: &Dataset, spec: &GroupSpec, forest_cfg: &ForestConfig, seed: u64) -> Result<BaselineScore> {
    inference::check_inputs(data, spec)?;
    let plan = SplitPlan::new(data.n(), derive_seed(seed, "cross-fit", 0));
    let mut scores = Vec::with_capacity(spec.len());
    for (k, cols) in spec.groups.iter().enumerate() {
        let (mut sse, mut sse_null) = (0.0, 0.0);
        for fold in 0..2u8 {
            let (xtr, ytr) = fold_xy(data, &plan.indices(1 - fold), cols);
            let (xte, yte) = fold_xy(data, &plan.indices(fold), cols);
            let targets = Matrix::from_vec(ytr.len(), 1, ytr.clone())?;
            let forest = learners::Forest::fit(
                forest_cfg,
                &xtr,
                &targets,
                false,
                derive_seed(seed, "logi", (2 * k + fold as usize) as u64),
            )?;
            let pred = forest.predict(&xte)?;
            let mean = ytr.iter().sum::<f64>() / ytr.len() as f64;
            for (i, &y) in yte.iter().enumerate() {
                sse += (y - pred[(i, 0)]).powi(2);
                sse_null += (y - mean).powi(2);
            }
        }
        scores.push(if sse_null > 0.0 { 1.0 - sse / sse_null } else { 0.0 });
    }
    Ok(BaselineScore {
        method: BaselineMethod::Logi,
        scores,
        p_values: None,
        prediction_score: None,
    })
}

/// Refits without each group; Wald test on the held-out per-sample loss increase.
pub fn run_logo(data: &Dataset, spec: &GroupSpec, forest_cfg: &ForestConfig, seed: u64) -> Result<BaselineScore> {
    inference::check_inputs(data, spec)?;
    if spec.len() < 2 {
        return Err(Error::InvalidGroupSpec("LOGO needs at least two groups".into()));
    }
    let plan = SplitPlan::new(data.n(), derive_seed(seed, "cross-fit", 0));
    let cfg = forest_learner(forest_cfg);
    let all: Vec<usize> = (0..data.p()).collect();
    let task = data.task();
    let mut full_pred = Vec::with_capacity(2);
    let mut y_all = Vec::new();
    let mut pred_all = Vec::new();
    for fold in 0..2u8 {
        let (xtr, ytr) = fold_xy(data, &plan.indices(1 - fold), &all);
        let (xte, yte) = fold_xy(data, &plan.indices(fold), &all);
        let full = learners::fit(&cfg, &xtr, &ytr, task, derive_seed(seed, "learner", fold as u64))?;
        let pred = full.predict(&xte)?;
        y_all.extend_from_slice(&yte);
        pred_all.extend_from_slice(&pred);
        full_pred.push(pred);
    }
    let mut scores = Vec::with_capacity(spec.len());
    let mut p_values = Vec::with_capacity(spec.len());
    for k in 0..spec.len() {
        let keep = spec.complement(k, data.p());
        let mut deltas = Vec::with_capacity(data.n());
        for fold in 0..2u8 {
            let (xtr, ytr) = fold_xy(data, &plan.indices(1 - fold), &keep);
            let (xte, yte) = fold_xy(data, &plan.indices(fold), &keep);
            // same seed as the full model, so only the removed columns differ
            let reduced = learners::fit(&cfg, &xtr, &ytr, task, derive_seed(seed, "learner", fold as u64))?;
            let pred = reduced.predict(&xte)?;
            for (i, &y) in yte.iter().enumerate() {
                deltas.push(loss_delta(y, full_pred[fold as usize][i], pred[i], task)?);
            }
        }
        let stats = importance_statistics(&LossDeltaMatrix::new(
            Matrix::from_vec(deltas.len(), 1, deltas)?,
            k,
            task,
        )?)?;
        scores.push(stats.mean);
        p_values.push(stats.p_value);
    }
    Ok(BaselineScore {
        method: BaselineMethod::Logo,
        scores,
        p_values: Some(p_values),
        prediction_score: Some(prediction_score(&y_all, &pred_all, task)),
    })
}

/// Group permutation importance: the importance pipeline with joint standard
/// permutation and a forest learner.
pub fn run_gpfi(
    data: &Dataset,
    spec: &GroupSpec,
    forest_cfg: &ForestConfig,
    permutations: usize,
    seed: u64,
) -> Result<BaselineScore> {
    let cfg = ImportanceConfig {
        permutations,
        ..ImportanceConfig::new(forest_learner(forest_cfg), PermutationMode::Standard)
    };
    let report = inference::run_importance(data, spec, &cfg, seed)?;
    let mut scores = Vec::with_capacity(spec.len());
    let mut p_values = Vec::with_capacity(spec.len());
    for g in &report.groups {
        let imp = g.importance.as_ref().ok_or_else(|| {
            let f = g.failure.as_ref().map(|f| f.message.clone()).unwrap_or_default();
            Error::InvalidConfig(format!("GPFI failed for group {}: {f}", g.group))
        })?;
        scores.push(imp.mean);
        p_values.push(imp.p_value);
    }
    Ok(BaselineScore {
        method: BaselineMethod::Gpfi,
        scores,
        p_values: Some(p_values),
        prediction_score: Some(report.prediction_score),
    })
}

/// Group-complement permutation: every column outside the group is shuffled
/// jointly. Score is minus the mean loss increase over the intact model, so
/// the group that keeps the most signal scores highest.
pub fn run_gopfi(
    data: &Dataset,
    spec: &GroupSpec,
    forest_cfg: &ForestConfig,
    permutations: usize,
    seed: u64,
) -> Result<BaselineScore> {
    if spec.len() < 2 {
        return Err(Error::InvalidGroupSpec("GOPFI needs at least two groups".into()));
    }
    if permutations == 0 {
        return Err(Error::InvalidConfig("permutations must be >= 1".into()));
    }
    let cfg = ImportanceConfig::new(forest_learner(forest_cfg), PermutationMode::Standard);
    let fit = fit_cross(data, spec, &cfg, seed)?;
    let task = data.task();
    let mut sums = vec![0.0; spec.len()];
    let mut count = 0usize;
    let mut y_all = Vec::new();
    let mut pred_all = Vec::new();
    for fold in 0..2u8 {
        let rows = fit.plan.indices(fold);
        let x = data.x().select_rows(&rows);
        let y: Vec<f64> = rows.iter().map(|&i| data.y()[i]).collect();
        let learner = &fit.learners[fold as usize];
        let yhat = learner.predict(&x)?;
        y_all.extend_from_slice(&y);
        pred_all.extend_from_slice(&yhat);
        count += y.len() * permutations;
        for (k, sum) in sums.iter_mut().enumerate() {
            let rest = spec.complement(k, data.p());
            let mut rng = rng_for(stream_seed(seed, fold as usize, k), "complement-permute", 0);
            for _ in 0..permutations {
                let mut perm: Vec<usize> = (0..x.rows()).collect();
                perm.shuffle(&mut rng);
                let mut xb = x.clone();
                xb.set_columns(&rest, &x.select_rows(&perm).select_columns(&rest));
                let ytilde = learner.predict(&xb)?;
                for i in 0..y.len() {
                    *sum += loss_delta(y[i], yhat[i], ytilde[i], task)?;
                }
            }
        }
    }
    Ok(BaselineScore {
        method: BaselineMethod::Gopfi,
        scores: sums.into_iter().map(|s| -s / count as f64).collect(),
        p_values: None,
        prediction_score: Some(prediction_score(&y_all, &pred_all, task)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate, BlockCovarianceConfig, OutcomeConfig, SimulationConfig};
    use crate::types::Task;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, "test", 0);
        let mut m = Matrix::zeros(n, p);
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        m
    }

    fn quick_forest() -> ForestConfig {
        ForestConfig {
            n_trees: 30,
            ..ForestConfig::default()
        }
    }

    #[test]
    fn marginal_strong_signal_and_singular_group() {
        let mut x = gaussian(200, 3, 1);
        let mut rng = rng_for(1, "noise", 0);
        for i in 0..200 {
            x[(i, 2)] = x[(i, 1)];
        }
        let y: Vec<f64> = (0..200)
            .map(|i| 3.0 * x[(i, 0)] + 0.01 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let data = Dataset::new(x, y, Task::Regression).unwrap();
        let spec = GroupSpec::new(vec![vec![0], vec![1, 2]]);
        let s = run_marginal(&data, &spec).unwrap();
        let p = s.p_values.as_ref().unwrap();
        assert!(p[0] < 1e-6);
        assert_eq!(p[1], 1.0);
        assert!(!s.higher_is_important());
    }

    #[test]
    fn marginal_matches_textbook_simple_regression() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0], vec![5.0]]);
        let y = vec![1.1, 1.9, 3.2, 3.8, 5.3];
        let data = Dataset::new(x, y.clone(), Task::Regression).unwrap();
        let p = run_marginal(&data, &GroupSpec::singletons(1)).unwrap().p_values.unwrap()[0];
        // slope 1.03, intercept -0.03, SSE 0.163, Sxx 10
        let t = 1.03 / (0.163f64 / 3.0 / 10.0).sqrt();
        let expect = 2.0 * StudentsT::new(0.0, 1.0, 3.0).unwrap().sf(t);
        assert!((p - expect).abs() < 1e-9, "{p} vs {expect}");
    }

    #[test]
    fn marginal_leaks_through_correlation() {
        let sim = simulate(
            &SimulationConfig {
                n: 300,
                covariance: BlockCovarianceConfig {
                    n_blocks: 2,
                    block_size: 2,
                    rho_intra: 0.8,
                    rho_inter: 0.8,
                },
                outcome: OutcomeConfig {
                    signal_groups: 1,
                    ..OutcomeConfig::default()
                },
                duplicate_group: None,
            },
            4,
        )
        .unwrap();
        let p = run_marginal(&sim.data, &sim.groups).unwrap().p_values.unwrap();
        assert!(p[0] < 1e-3 && p[1] < 1e-3, "{p:?}");
    }

    fn two_group_data(n: usize, seed: u64) -> Dataset {
        let x = gaussian(n, 4, seed);
        let mut rng = rng_for(seed, "noise", 0);
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * x[(i, 0)] + x[(i, 1)] + 0.3 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Dataset::new(x, y, Task::Regression).unwrap()
    }

    #[test]
    fn logi_scores_signal_and_null() {
        let data = two_group_data(400, 2);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        // wide leaves: a fully grown forest on pure noise scores about -0.2 out of sample
        let smooth = ForestConfig {
            min_samples_leaf: 40,
            ..ForestConfig::default()
        };
        let s = run_logi(&data, &spec, &smooth, 1).unwrap();
        assert!(s.scores[0] > 0.6, "{:?}", s.scores);
        assert!(s.scores[1].abs() <= 0.05, "{:?}", s.scores);
        assert!(s.p_values.is_none());
    }

    #[test]
    fn logi_rewards_a_correlated_null_group() {
        let sim = simulate(
            &SimulationConfig {
                n: 400,
                covariance: BlockCovarianceConfig {
                    n_blocks: 2,
                    block_size: 2,
                    rho_intra: 0.8,
                    rho_inter: 0.8,
                },
                outcome: OutcomeConfig {
                    signal_groups: 1,
                    ..OutcomeConfig::default()
                },
                duplicate_group: None,
            },
            6,
        )
        .unwrap();
        let s = run_logi(&sim.data, &sim.groups, &quick_forest(), 2).unwrap();
        assert!(s.scores[1] > 0.2, "{:?}", s.scores);
    }

    #[test]
    fn logo_signal_and_null() {
        let data = two_group_data(400, 3);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        let s = run_logo(&data, &spec, &quick_forest(), 1).unwrap();
        let p = s.p_values.unwrap();
        assert!(p[0] < 1e-6, "{p:?}");
        assert!(s.scores[0] > 2.0, "{:?}", s.scores);
        assert!(s.scores[1].abs() < 0.3, "{:?}", s.scores);
        assert!(run_logo(&data, &GroupSpec::new(vec![vec![0, 1, 2, 3]]), &quick_forest(), 1).is_err());
    }

    #[test]
    fn gpfi_equals_standard_importance_pipeline() {
        let data = two_group_data(200, 4);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        let s = run_gpfi(&data, &spec, &quick_forest(), 5, 7).unwrap();
        let cfg = ImportanceConfig {
            permutations: 5,
            ..ImportanceConfig::new(LearnerConfig::Forest(quick_forest()), PermutationMode::Standard)
        };
        let r = inference::run_importance(&data, &spec, &cfg, 7).unwrap();
        for (k, g) in r.groups.iter().enumerate() {
            let imp = g.importance.as_ref().unwrap();
            assert_eq!(s.scores[k], imp.mean);
            assert_eq!(s.p_values.as_ref().unwrap()[k], imp.p_value);
        }
        assert!(s.scores[0] > s.scores[1]);
    }

    #[test]
    fn gopfi_prefers_the_signal_group() {
        let data = two_group_data(300, 5);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        let s = run_gopfi(&data, &spec, &quick_forest(), 3, 2).unwrap();
        assert!(s.scores[0] > s.scores[1], "{:?}", s.scores);
        assert!(s.higher_is_important());
    }
}
