//! Importance scores, Wald statistics and p-values with 2-fold cross-fitting.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::conditional::{fit_conditional, fit_conditional_on, permute_standard, PermutationMode};
use crate::error::{Error, Result};
use crate::learners::{self, FittedLearner, ForestConfig, LearnerConfig, Stacking};
use crate::matrix::Matrix;
use crate::types::{derive_seed, Dataset, GroupSpec, SplitPlan, Task};

/// Probability clamp applied before taking logs in the binary loss.
pub const PROB_EPS: f64 = 1e-12;
/// Standard deviations below this are treated as degenerate.
pub const DEGENERATE_STD: f64 = 1e-12;
/// Smallest dataset accepted by [`run_importance`].
pub const MIN_ROWS: usize = 40;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// One-sided p-value `1 - Φ(z)`, evaluated without cancellation in the upper tail.
pub fn upper_tail_p(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn clamped_probs(logit: f64) -> (f64, f64) {
    let lo = PROB_EPS;
    let hi = 1.0 - PROB_EPS;
    (sigmoid(logit).clamp(lo, hi), sigmoid(-logit).clamp(lo, hi))
}

/// Loss increase of sample `i` when its prediction moves from `yhat` to `ytilde`.
/// Binary inputs are logits.
pub fn loss_delta(y: f64, yhat: f64, ytilde: f64, task: Task) -> Result<f64> {
    let l = match task {
        Task::Regression => (y - ytilde).powi(2) - (y - yhat).powi(2),
        Task::Binary => {
            let (p_hat, q_hat) = clamped_probs(yhat);
            let (p_til, q_til) = clamped_probs(ytilde);
            y * (p_hat / p_til).ln() + (1.0 - y) * (q_hat / q_til).ln()
        }
    };
    if l.is_finite() {
        Ok(l)
    } else {
        Err(Error::NonFiniteLoss(format!("y={y} yhat={yhat} ytilde={ytilde}")))
    }
}

/// Per-sample, per-permutation loss deltas `l_i^{J,b}` for one group.
#[derive(Debug, Clone, PartialEq)]
pub struct LossDeltaMatrix {
    values: Matrix,
    group: usize,
    task: Task,
}

impl LossDeltaMatrix {
    pub fn new(values: Matrix, group: usize, task: Task) -> Result<Self> {
        if values.cols() == 0 {
            return Err(Error::ShapeMismatch("loss deltas need at least one permutation".into()));
        }
        if !values.is_finite() {
            return Err(Error::NonFiniteLoss(format!("loss deltas of group {group}")));
        }
        Ok(LossDeltaMatrix { values, group, task })
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_test(&self) -> usize {
        self.values.rows()
    }

    pub fn permutations(&self) -> usize {
        self.values.cols()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub mean: f64,
    pub std: f64,
    pub z: f64,
    pub p_value: f64,
    pub n_test_total: usize,
    /// Set when the per-sample deltas had (numerically) zero spread.
    #[serde(default)]
    pub degenerate: bool,
}

/// Compensated summation, so statistics stay accurate when the mean is near zero.
fn neumaier_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Wald statistic over per-sample means of the loss deltas.
///
/// `std` is the spread of the per-sample means `d_i`; the statistic divides
/// the mean by its standard error `std / sqrt(n)`.
pub fn importance_statistics(deltas: &LossDeltaMatrix) -> Result<GroupImportance> {
    let n = deltas.n_test();
    if n < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: n });
    }
    let b = deltas.permutations() as f64;
    let d: Vec<f64> = (0..n).map(|i| neumaier_sum(deltas.values.row(i).iter().copied()) / b).collect();
    let mean = neumaier_sum(d.iter().copied()) / n as f64;
    let ss = neumaier_sum(d.iter().map(|v| (v - mean) * (v - mean)));
    let std = (ss / (n - 1) as f64).sqrt();
    if std < DEGENERATE_STD {
        log::warn!("group {}: loss deltas have zero spread", deltas.group);
        return Ok(GroupImportance {
            mean,
            std,
            z: 0.0,
            p_value: 0.5,
            n_test_total: n,
            degenerate: true,
        });
    }
    let z = mean / (std / (n as f64).sqrt());
    Ok(GroupImportance {
        mean,
        std,
        z,
        p_value: upper_tail_p(z).clamp(0.0, 1.0),
        n_test_total: n,
        degenerate: false,
    })
}

fn default_permutations() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceConfig {
    pub learner: LearnerConfig,
    #[serde(default)]
    pub permutation: PermutationMode,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Learn group summaries inside the network (MLP learners only).
    #[serde(default)]
    pub stacking: bool,
    /// Summary width per group when stacking; empty means 1 for every group.
    #[serde(default)]
    pub stacking_dims: Vec<usize>,
    #[serde(default = "ForestConfig::conditional")]
    pub conditional_forest: ForestConfig,
    /// What a stacked group summary is conditioned on.
    #[serde(default)]
    pub conditioning: ConditioningSpace,
}

/// Conditioning set used when the learner works on group summaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditioningSpace {
    /// The summary of `J` given every original column outside `J`.
    #[default]
    Input,
    /// The summary of `J` given the other groups' summaries only.
    Summary,
}

impl ImportanceConfig {
    pub fn new(learner: LearnerConfig, permutation: PermutationMode) -> Self {
        ImportanceConfig {
            learner,
            permutation,
            permutations: default_permutations(),
            stacking: false,
            stacking_dims: Vec::new(),
            conditional_forest: ForestConfig::conditional(),
            conditioning: ConditioningSpace::Input,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.permutations == 0 {
            return Err(Error::InvalidConfig("permutations must be >= 1".into()));
        }
        if self.stacking && !matches!(self.learner, LearnerConfig::Mlp(_)) {
            return Err(Error::InvalidConfig("stacking requires the mlp learner".into()));
        }
        self.conditional_forest.validate()
    }

    /// The learner configuration actually trained, with stacking bound to `spec`.
    pub fn resolved_learner(&self, spec: &GroupSpec) -> LearnerConfig {
        match (&self.learner, self.stacking) {
            (LearnerConfig::Mlp(m), true) => {
                let mut m = m.clone();
                m.stacking = Some(Stacking {
                    groups: spec.clone(),
                    dims: self.stacking_dims.clone(),
                });
                LearnerConfig::Mlp(m)
            }
            (other, _) => other.clone(),
        }
    }
}

/// Learners trained on each half of a split; `learners[f]` never saw fold `f`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub plan: SplitPlan,
    pub learners: Vec<FittedLearner>,
    pub fit_seconds: f64,
}

/// Seed for everything random about group `group` when scoring fold `fold`.
pub fn stream_seed(master: u64, fold: usize, group: usize) -> u64 {
    derive_seed(derive_seed(master, "importance-fold", fold as u64), "group", group as u64)
}

pub fn check_inputs(data: &Dataset, spec: &GroupSpec) -> Result<()> {
    if data.n() < MIN_ROWS {
        return Err(Error::TooFewSamples {
            needed: MIN_ROWS,
            got: data.n(),
        });
    }
    spec.validate(data.p())
}

/// Fits the base learner on each fold's complement.
pub fn fit_cross(data: &Dataset, spec: &GroupSpec, cfg: &ImportanceConfig, seed: u64) -> Result<CrossFit> {
    cfg.validate()?;
    check_inputs(data, spec)?;
    let plan = SplitPlan::new(data.n(), derive_seed(seed, "cross-fit", 0));
    let learner_cfg = cfg.resolved_learner(spec);
    let start = Instant::now();
    let mut fitted = Vec::with_capacity(2);
    for fold in 0..2u8 {
        let train = plan.indices(1 - fold);
        let x = data.x().select_rows(&train);
        let y: Vec<f64> = train.iter().map(|&i| data.y()[i]).collect();
        fitted.push(learners::fit(
            &learner_cfg,
            &x,
            &y,
            data.task(),
            derive_seed(seed, "learner", fold as u64),
        )?);
    }
    Ok(CrossFit {
        plan,
        learners: fitted,
        fit_seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupFailure {
    pub error: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: usize,
    pub name: String,
    pub importance: Option<GroupImportance>,
    pub failure: Option<GroupFailure>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceReport {
    pub groups: Vec<GroupResult>,
    /// Held-out R² (regression) or accuracy (binary), pooled over both folds.
    pub prediction_score: f64,
    pub fit_seconds: f64,
    /// Conditional fits, reconstructions, re-predictions and statistics.
    pub importance_seconds: f64,
}

impl ImportanceReport {
    /// p-values in group order; failed groups get `None`.
    pub fn p_values(&self) -> Vec<Option<f64>> {
        self.groups.iter().map(|g| g.importance.as_ref().map(|i| i.p_value)).collect()
    }

    pub fn means(&self) -> Vec<Option<f64>> {
        self.groups.iter().map(|g| g.importance.as_ref().map(|i| i.mean)).collect()
    }
}

/// Cross-fitted importance of every group.
pub fn run_importance(data: &Dataset, spec: &GroupSpec, cfg: &ImportanceConfig, seed: u64) -> Result<ImportanceReport> {
    let fit = fit_cross(data, spec, cfg, seed)?;
    score_importance(data, spec, cfg, &fit, seed)
}

/// Held-out predictions of each learner, in the row order of `plan.indices(fold)`.
fn fold_data(data: &Dataset, plan: &SplitPlan, fold: u8) -> (Vec<usize>, Matrix, Vec<f64>) {
    let rows = plan.indices(fold);
    let x = data.x().select_rows(&rows);
    let y = rows.iter().map(|&i| data.y()[i]).collect();
    (rows, x, y)
}

/// Scores every group given already fitted cross-fit learners.
pub fn score_importance(
    data: &Dataset,
    spec: &GroupSpec,
    cfg: &ImportanceConfig,
    fit: &CrossFit,
    seed: u64,
) -> Result<ImportanceReport> {
    cfg.validate()?;
    check_inputs(data, spec)?;
    if fit.plan.folds.len() != data.n() || fit.learners.len() != 2 {
        return Err(Error::ShapeMismatch("cross-fit model does not match the dataset".into()));
    }
    let start = Instant::now();
    let k = spec.len();
    let task = data.task();
    let mut per_group: Vec<Vec<Result<Matrix>>> = (0..k).map(|_| Vec::with_capacity(2)).collect();
    let mut all_y = Vec::with_capacity(data.n());
    let mut all_pred = Vec::with_capacity(data.n());
    for fold in 0..2u8 {
        let learner = &fit.learners[fold as usize];
        let (_, x, y) = fold_data(data, &fit.plan, fold);
        let yhat = learner.predict(&x)?;
        all_y.extend_from_slice(&y);
        all_pred.extend_from_slice(&yhat);
        // with stacking, groups are reconstructed in the learned summary space
        let stacked = learner.projection();
        let (work, wspec) = match &stacked {
            Some(proj) => (learner.project(&x)?, proj.projected_spec(spec)),
            None => (x.clone(), spec.clone()),
        };
        let predict = |m: &Matrix| -> Result<Vec<f64>> {
            if stacked.is_some() {
                learner.predict_projected(m)
            } else {
                learner.predict(m)
            }
        };
        let raw = match (&stacked, cfg.conditioning) {
            (Some(_), ConditioningSpace::Input) => Some((&x, spec)),
            _ => None,
        };
        let results: Vec<Result<Matrix>> = (0..k)
            .into_par_iter()
            .map(|j| {
                let ctx = GroupContext {
                    x: &work,
                    spec: &wspec,
                    raw,
                    y: &y,
                    yhat: &yhat,
                    task,
                };
                group_deltas(&ctx, j, cfg, stream_seed(seed, fold as usize, j), &predict)
            })
            .collect();
        for (j, r) in results.into_iter().enumerate() {
            per_group[j].push(r);
        }
    }
    let groups = per_group
        .into_iter()
        .enumerate()
        .map(|(j, folds)| {
            let outcome = concat_rows(folds)
                .and_then(|m| LossDeltaMatrix::new(m, j, task))
                .and_then(|d| importance_statistics(&d));
            match outcome {
                Ok(imp) => GroupResult {
                    group: j,
                    name: spec.names[j].clone(),
                    importance: Some(imp),
                    failure: None,
                },
                Err(e) => {
                    log::warn!("group {j} ({}) failed: {e}", spec.names[j]);
                    GroupResult {
                        group: j,
                        name: spec.names[j].clone(),
                        importance: None,
                        failure: Some(GroupFailure {
                            error: e.name().to_string(),
                            message: e.to_string(),
                        }),
                    }
                }
            }
        })
        .collect();
    Ok(ImportanceReport {
        groups,
        prediction_score: prediction_score(&all_y, &all_pred, task),
        fit_seconds: fit.fit_seconds,
        importance_seconds: start.elapsed().as_secs_f64(),
    })
}

fn concat_rows(parts: Vec<Result<Matrix>>) -> Result<Matrix> {
    let mut data = Vec::new();
    let (mut rows, mut cols) = (0, None);
    for part in parts {
        let m = part?;
        if *cols.get_or_insert(m.cols()) != m.cols() {
            return Err(Error::ShapeMismatch("fold delta widths differ".into()));
        }
        rows += m.rows();
        data.extend_from_slice(m.as_slice());
    }
    Matrix::from_vec(rows, cols.unwrap_or(0), data)
}

/// Inputs shared by every group of one fold.
struct GroupContext<'a> {
    /// Working matrix the learner consumes (group summaries when stacked).
    x: &'a Matrix,
    spec: &'a GroupSpec,
    /// Original design and groups, when summaries are conditioned on it.
    raw: Option<(&'a Matrix, &'a GroupSpec)>,
    y: &'a [f64],
    yhat: &'a [f64],
    task: Task,
}

fn group_deltas<F>(ctx: &GroupContext<'_>, j: usize, cfg: &ImportanceConfig, seed: u64, predict: &F) -> Result<Matrix>
where
    F: Fn(&Matrix) -> Result<Vec<f64>>,
{
    let (x, spec, y, yhat, task) = (ctx.x, ctx.spec, ctx.y, ctx.yhat, ctx.task);
    let n = x.rows();
    let cols = &spec.groups[j];
    let fit_seed = derive_seed(seed, "conditional-fit", 0);
    let sampler = match (cfg.permutation.sampler_mode(), ctx.raw) {
        (Some(mode), Some((raw, raw_spec))) => {
            let rest = raw_spec.complement(j, raw.cols());
            Some(fit_conditional_on(
                raw.select_columns(&rest),
                x.select_columns(cols),
                cols.clone(),
                j,
                mode,
                &cfg.conditional_forest,
                fit_seed,
            )?)
        }
        (Some(mode), None) => Some(fit_conditional(x, spec, j, mode, &cfg.conditional_forest, fit_seed)?),
        (None, _) => None,
    };
    let mut out = Matrix::zeros(n, cfg.permutations);
    let mut xb = x.clone();
    for b in 0..cfg.permutations {
        let block = match &sampler {
            Some(s) => s.reconstruct(b, derive_seed(seed, "reconstruct", 0)),
            None => permute_standard(x, spec, j, derive_seed(seed, "permute", b as u64)),
        };
        xb.set_columns(cols, &block);
        let ytilde = predict(&xb)?;
        for i in 0..n {
            out[(i, b)] = loss_delta(y[i], yhat[i], ytilde[i], task)?;
        }
    }
    Ok(out)
}

/// R² for regression, accuracy (logit > 0) for binary outcomes.
pub fn prediction_score(y: &[f64], pred: &[f64], task: Task) -> f64 {
    match task {
        Task::Regression => {
            let m = y.iter().sum::<f64>() / y.len() as f64;
            let sse: f64 = y.iter().zip(pred).map(|(a, p)| (a - p).powi(2)).sum();
            let sst: f64 = y.iter().map(|a| (a - m).powi(2)).sum();
            if sst > 0.0 {
                1.0 - sse / sst
            } else {
                0.0
            }
        }
        Task::Binary => {
            let hits = y.iter().zip(pred).filter(|(a, p)| (**p > 0.0) == (**a > 0.5)).count();
            hits as f64 / y.len() as f64
        }
    }
}
