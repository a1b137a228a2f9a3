//! Multi-run experiments over an inter-block correlation sweep, with ranking,
//! type-I error, power and timing metrics.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_gopfi, run_gpfi, run_logi, run_logo, run_marginal, BaselineScore};
use crate::conditional::PermutationMode;
use crate::error::{Error, Result};
use crate::inference::{run_importance, ConditioningSpace, ImportanceConfig};
use crate::learners::{ForestConfig, LearnerConfig, MlpConfig};
use crate::simulation::{simulate, BlockCovarianceConfig, InteractionConfig, OutcomeConfig, SimulationConfig};
use crate::types::{derive_seed, Dataset, GroupSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "bcpi-dnn")]
    BcpiDnn,
    #[serde(rename = "bcpi-rf")]
    BcpiRf,
    #[serde(rename = "bpi-dnn")]
    BpiDnn,
    #[serde(rename = "marginal")]
    Marginal,
    #[serde(rename = "logi")]
    Logi,
    #[serde(rename = "logo")]
    Logo,
    #[serde(rename = "gpfi")]
    Gpfi,
    #[serde(rename = "gopfi")]
    Gopfi,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::BcpiDnn,
        Method::BcpiRf,
        Method::BpiDnn,
        Method::Marginal,
        Method::Logi,
        Method::Logo,
        Method::Gpfi,
        Method::Gopfi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::BcpiDnn => "bcpi-dnn",
            Method::BcpiRf => "bcpi-rf",
            Method::BpiDnn => "bpi-dnn",
            Method::Marginal => "marginal",
            Method::Logi => "logi",
            Method::Logo => "logo",
            Method::Gpfi => "gpfi",
            Method::Gopfi => "gopfi",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}")))
    }
}

/// Whether small or large values mark an important group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    SmallerIsImportant,
    LargerIsImportant,
}

/// Mann-Whitney AUC of `values` against `truth`, ties credited one half.
///
/// Computed from mid-ranks in exact integer arithmetic.
pub fn auc_ranking(values: &[f64], truth: &[bool], direction: Direction) -> Result<f64> {
    if values.len() != truth.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} values vs {} labels",
            values.len(),
            truth.len()
        )));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::InvalidConfig("NaN in ranked values".into()));
    }
    let n1 = truth.iter().filter(|&&t| t).count() as u64;
    let n0 = truth.len() as u64 - n1;
    if n1 == 0 || n0 == 0 {
        return Err(Error::DegenerateTruth);
    }
    let key = |v: f64| match direction {
        Direction::LargerIsImportant => v,
        Direction::SmallerIsImportant => -v,
    };
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| key(values[a]).total_cmp(&key(values[b])));
    // twice the rank sum of the important items, with mid-ranks for ties
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && key(values[order[j + 1]]) == key(values[order[i]]) {
            j += 1;
        }
        // ranks i+1..=j+1 share the mean (i + j + 2) / 2
        let twice_mid = (i + j + 2) as u64;
        let important = order[i..=j].iter().filter(|&&k| truth[k]).count() as u64;
        twice_rank_sum += twice_mid * important;
        i = j + 1;
    }
    let numerator = twice_rank_sum - n1 * (n1 + 1);
    Ok(numerator as f64 / (2 * n1 * n0) as f64)
}

fn pooled_rate(pvalues: &[Vec<f64>], truth: &[bool], alpha: f64, want: bool) -> Option<f64> {
    let mut cells = 0usize;
    let mut hits = 0usize;
    for run in pvalues {
        for (&p, &t) in run.iter().zip(truth) {
            if t == want {
                cells += 1;
                hits += usize::from(p < alpha);
            }
        }
    }
    (cells > 0).then(|| hits as f64 / cells as f64)
}

/// Fraction of (run, null group) cells rejected at `alpha`.
pub fn type_one_error(pvalues: &[Vec<f64>], truth: &[bool], alpha: f64) -> Result<f64> {
    pooled_rate(pvalues, truth, alpha, false).ok_or(Error::NoNullGroups)
}

/// Fraction of (run, important group) cells rejected at `alpha`.
pub fn power(pvalues: &[Vec<f64>], truth: &[bool], alpha: f64) -> Result<f64> {
    pooled_rate(pvalues, truth, alpha, true).ok_or(Error::NoSignalGroups)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KsResult {
    pub n: usize,
    /// sup (F_n(t) - t): excess of small p-values.
    pub d_plus: f64,
    /// sup (t - F_n(t)): excess of large p-values.
    pub d_minus: f64,
    pub p_two_sided: f64,
    /// p-value of the one-sided test against anti-conservative deviation.
    pub p_anticonservative: f64,
}

impl KsResult {
    /// Uniform at `level`, or any deviation is towards larger p-values.
    pub fn uniform_or_conservative(&self, level: f64) -> bool {
        self.p_two_sided >= level || self.p_anticonservative >= level
    }
}

/// Kolmogorov survival function `P(K > lambda)`.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let term = (-2.0 * (k * k) as f64 * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Kolmogorov-Smirnov test of `p` against Uniform(0, 1).
pub fn ks_uniform(p: &[f64]) -> Result<KsResult> {
    if p.is_empty() {
        return Err(Error::InvalidConfig("KS test of an empty sample".into()));
    }
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidConfig("KS sample outside [0, 1]".into()));
    }
    let mut s = p.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let (mut d_plus, mut d_minus) = (0.0f64, 0.0f64);
    for (i, &v) in s.iter().enumerate() {
        d_plus = d_plus.max((i + 1) as f64 / n - v);
        d_minus = d_minus.max(v - i as f64 / n);
    }
    let d = d_plus.max(d_minus);
    let sq = n.sqrt();
    // Stephens' small-sample correction
    let p_two_sided = kolmogorov_sf((sq + 0.12 + 0.11 / sq) * d);
    let p_anticonservative = (-2.0 * n * d_plus * d_plus).exp().min(1.0);
    Ok(KsResult {
        n: s.len(),
        d_plus,
        d_minus,
        p_two_sided,
        p_anticonservative,
    })
}

fn default_runs() -> usize {
    100
}
fn default_sweep() -> Vec<f64> {
    vec![0.0, 0.2, 0.5, 0.8]
}
fn default_alpha() -> f64 {
    0.05
}
fn default_permutations() -> usize {
    100
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub n: usize,
    pub n_blocks: usize,
    pub block_size: usize,
    pub rho_intra: f64,
    #[serde(default = "default_sweep")]
    pub rho_inter_sweep: Vec<f64>,
    pub outcome: OutcomeConfig,
    #[serde(default)]
    pub duplicate_group: Option<usize>,
    pub methods: Vec<Method>,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_permutations")]
    pub permutations: usize,
    /// Internal stacking for the network-based methods.
    #[serde(default = "default_true")]
    pub stacking: bool,
    /// Conditional scheme used by the BCPI methods.
    #[serde(default)]
    pub permutation: PermutationMode,
    #[serde(default)]
    pub mlp: MlpConfig,
    /// Learner of BCPI-RF and of the forest-based baselines.
    #[serde(default)]
    pub forest: ForestConfig,
    #[serde(default = "ForestConfig::conditional")]
    pub conditional_forest: ForestConfig,
    #[serde(default)]
    pub conditioning: ConditioningSpace,
}

impl ExperimentConfig {
    /// n=300, p=20 (4 blocks of 5), rho_intra=0.8, 2 signal groups, SNR 2, 50 runs, B=50.
    pub fn desk_exp1() -> Self {
        ExperimentConfig {
            name: "desk-exp1".into(),
            n: 300,
            n_blocks: 4,
            block_size: 5,
            rho_intra: 0.8,
            rho_inter_sweep: default_sweep(),
            outcome: OutcomeConfig {
                signal_groups: 2,
                ..OutcomeConfig::default()
            },
            duplicate_group: None,
            methods: Method::ALL.to_vec(),
            runs: 50,
            alpha: default_alpha(),
            permutations: 50,
            stacking: true,
            permutation: PermutationMode::ConditionalAdditive,
            mlp: MlpConfig::default(),
            forest: ForestConfig::default(),
            conditional_forest: ForestConfig::conditional(),
            conditioning: ConditioningSpace::Input,
        }
    }

    /// n=1000, p=50 (10 blocks of 5), 5 signal groups, 100 runs, B=100.
    pub fn paper_exp1() -> Self {
        ExperimentConfig {
            name: "paper-exp1".into(),
            n: 1000,
            n_blocks: 10,
            block_size: 5,
            outcome: OutcomeConfig::default(),
            runs: 100,
            permutations: 100,
            ..Self::desk_exp1()
        }
    }

    /// n=1000, p=1000 (10 groups of 100), DNN methods with and without stacking.
    pub fn paper_exp2() -> Self {
        ExperimentConfig {
            name: "paper-exp2".into(),
            n: 1000,
            n_blocks: 10,
            block_size: 100,
            outcome: OutcomeConfig::default(),
            methods: vec![Method::BcpiDnn, Method::BpiDnn],
            runs: 100,
            permutations: 100,
            ..Self::desk_exp1()
        }
    }

    /// Desk-scale quadratic-interaction variant at rho_inter = 0.5, 30 runs.
    pub fn desk_nonlinear() -> Self {
        ExperimentConfig {
            name: "desk-nonlinear".into(),
            rho_inter_sweep: vec![0.5],
            outcome: OutcomeConfig {
                signal_groups: 2,
                interactions: Some(InteractionConfig::default()),
                ..OutcomeConfig::default()
            },
            runs: 30,
            ..Self::desk_exp1()
        }
    }

    /// All-null model with unit noise, 100 runs.
    pub fn desk_null() -> Self {
        ExperimentConfig {
            name: "desk-null".into(),
            rho_inter_sweep: vec![0.0],
            outcome: OutcomeConfig {
                signal_groups: 0,
                sigma: Some(1.0),
                ..OutcomeConfig::default()
            },
            methods: vec![Method::BcpiDnn],
            runs: 100,
            ..Self::desk_exp1()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk-exp1" => Ok(Self::desk_exp1()),
            "paper-exp1" => Ok(Self::paper_exp1()),
            "paper-exp2" => Ok(Self::paper_exp2()),
            "desk-nonlinear" => Ok(Self::desk_nonlinear()),
            "desk-null" => Ok(Self::desk_null()),
            other => Err(Error::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }

    pub fn simulation(&self, rho_inter: f64) -> SimulationConfig {
        SimulationConfig {
            n: self.n,
            covariance: BlockCovarianceConfig {
                n_blocks: self.n_blocks,
                block_size: self.block_size,
                rho_intra: self.rho_intra,
                rho_inter,
            },
            outcome: self.outcome.clone(),
            duplicate_group: self.duplicate_group,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidConfig("runs must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidConfig(format!("alpha must lie in (0, 1), got {}", self.alpha)));
        }
        if self.methods.is_empty() || self.rho_inter_sweep.is_empty() {
            return Err(Error::InvalidConfig("need at least one method and one rho_inter".into()));
        }
        if self.permutations == 0 {
            return Err(Error::InvalidConfig("permutations must be >= 1".into()));
        }
        for &rho in &self.rho_inter_sweep {
            let sim = self.simulation(rho);
            sim.covariance.validate()?;
            sim.outcome.validate(&sim.covariance.groups())?;
        }
        self.mlp.validate()?;
        self.forest.validate()?;
        self.conditional_forest.validate()
    }

    fn importance_config(&self, method: Method) -> ImportanceConfig {
        let (learner, permutation, stacking) = match method {
            Method::BcpiDnn => (LearnerConfig::Mlp(self.mlp.clone()), self.permutation, self.stacking),
            Method::BpiDnn => (LearnerConfig::Mlp(self.mlp.clone()), PermutationMode::Standard, self.stacking),
            _ => (LearnerConfig::Forest(self.forest.clone()), self.permutation, false),
        };
        ImportanceConfig {
            learner,
            permutation,
            permutations: self.permutations,
            stacking,
            stacking_dims: Vec::new(),
            conditional_forest: self.conditional_forest.clone(),
            conditioning: self.conditioning,
        }
    }
}

/// What one method produced on one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodOutput {
    pub scores: Vec<f64>,
    pub p_values: Option<Vec<f64>>,
    pub higher_is_important: bool,
    pub prediction_score: Option<f64>,
    pub fit_seconds: Option<f64>,
    pub importance_seconds: Option<f64>,
}

impl From<BaselineScore> for MethodOutput {
    fn from(b: BaselineScore) -> Self {
        MethodOutput {
            higher_is_important: b.higher_is_important(),
            scores: b.scores,
            p_values: b.p_values,
            prediction_score: b.prediction_score,
            fit_seconds: None,
            importance_seconds: None,
        }
    }
}

/// Runs `method` on one dataset.
pub fn run_method(
    method: Method,
    data: &Dataset,
    spec: &GroupSpec,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Result<MethodOutput> {
    match method {
        Method::BcpiDnn | Method::BcpiRf | Method::BpiDnn => {
            let report = run_importance(data, spec, &cfg.importance_config(method), seed)?;
            let mut scores = Vec::with_capacity(spec.len());
            let mut p_values = Vec::with_capacity(spec.len());
            for g in &report.groups {
                match (&g.importance, &g.failure) {
                    (Some(imp), _) => {
                        scores.push(imp.mean);
                        p_values.push(imp.p_value);
                    }
                    (None, failure) => {
                        let msg = failure.as_ref().map(|f| f.message.clone()).unwrap_or_default();
                        return Err(Error::InvalidConfig(format!("group {} failed: {msg}", g.name)));
                    }
                }
            }
            Ok(MethodOutput {
                scores,
                p_values: Some(p_values),
                higher_is_important: true,
                prediction_score: Some(report.prediction_score),
                fit_seconds: Some(report.fit_seconds),
                importance_seconds: Some(report.importance_seconds),
            })
        }
        Method::Marginal => run_marginal(data, spec).map(Into::into),
        Method::Logi => run_logi(data, spec, &cfg.forest, seed).map(Into::into),
        Method::Logo => run_logo(data, spec, &cfg.forest, seed).map(Into::into),
        Method::Gpfi => run_gpfi(data, spec, &cfg.forest, cfg.permutations, seed).map(Into::into),
        Method::Gopfi => run_gopfi(data, spec, &cfg.forest, cfg.permutations, seed).map(Into::into),
    }
}

/// One (method, rho_inter, run) cell of an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawRecord {
    pub method: Method,
    pub rho_inter: f64,
    pub run: usize,
    pub data_seed: u64,
    pub method_seed: u64,
    pub truth: Vec<bool>,
    pub scores: Option<Vec<f64>>,
    pub p_values: Option<Vec<f64>>,
    pub higher_is_important: bool,
    pub prediction_score: Option<f64>,
    pub time_seconds: f64,
    pub fit_seconds: Option<f64>,
    pub importance_seconds: Option<f64>,
    pub error: Option<String>,
}

impl RawRecord {
    /// The record with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> RawRecord {
        RawRecord {
            time_seconds: 0.0,
            fit_seconds: self.fit_seconds.map(|_| 0.0),
            importance_seconds: self.importance_seconds.map(|_| 0.0),
            ..self.clone()
        }
    }

    /// AUC of this run: p-values when available, scores otherwise.
    pub fn auc(&self) -> Result<f64> {
        match (&self.p_values, &self.scores) {
            (Some(p), _) => auc_ranking(p, &self.truth, Direction::SmallerIsImportant),
            (None, Some(s)) => {
                let dir = if self.higher_is_important {
                    Direction::LargerIsImportant
                } else {
                    Direction::SmallerIsImportant
                };
                auc_ranking(s, &self.truth, dir)
            }
            (None, None) => Err(Error::InvalidConfig("record has no scores".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub method: Method,
    pub rho_inter: f64,
    pub runs_ok: usize,
    pub runs_failed: usize,
    /// Mean per-run AUC; empty when no run has both null and important groups.
    pub auc: Option<f64>,
    pub type1: Option<f64>,
    pub power: Option<f64>,
    pub time_seconds: f64,
    pub prediction_score: Option<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Aggregates raw records into one row per (method, rho_inter), in that order.
pub fn aggregate(records: &[RawRecord], alpha: f64) -> Vec<MetricsRow> {
    let mut cells: BTreeMap<(Method, u64), Vec<&RawRecord>> = BTreeMap::new();
    for r in records {
        cells.entry((r.method, r.rho_inter.to_bits())).or_default().push(r);
    }
    let mut rows: Vec<MetricsRow> = cells
        .into_values()
        .map(|mut rs| {
            rs.sort_by_key(|r| r.run);
            let ok: Vec<&RawRecord> = rs.iter().copied().filter(|r| r.error.is_none()).collect();
            let aucs: Vec<f64> = ok.iter().filter_map(|r| r.auc().ok()).collect();
            let (mut nulls, mut hits_null, mut signals, mut hits_signal) = (0usize, 0usize, 0usize, 0usize);
            let mut any_p = false;
            for r in &ok {
                if let Some(p) = &r.p_values {
                    any_p = true;
                    for (&pv, &t) in p.iter().zip(&r.truth) {
                        if t {
                            signals += 1;
                            hits_signal += usize::from(pv < alpha);
                        } else {
                            nulls += 1;
                            hits_null += usize::from(pv < alpha);
                        }
                    }
                }
            }
            let rate = |hits: usize, cells: usize| (any_p && cells > 0).then(|| hits as f64 / cells as f64);
            let times: Vec<f64> = ok.iter().map(|r| r.time_seconds).collect();
            let scores: Vec<f64> = ok.iter().filter_map(|r| r.prediction_score).collect();
            MetricsRow {
                method: rs[0].method,
                rho_inter: rs[0].rho_inter,
                runs_ok: ok.len(),
                runs_failed: rs.len() - ok.len(),
                auc: mean(&aucs),
                type1: rate(hits_null, nulls),
                power: rate(hits_signal, signals),
                time_seconds: mean(&times).unwrap_or(0.0),
                prediction_score: mean(&scores),
            }
        })
        .collect();
    rows.sort_by(|a, b| a.method.cmp(&b.method).then(a.rho_inter.total_cmp(&b.rho_inter)));
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub rows: Vec<MetricsRow>,
    pub records: Vec<RawRecord>,
}

/// Worker count from `BCPI_WORKERS`, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("BCPI_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs every (method, rho_inter, run) cell and aggregates the metrics.
///
/// Datasets and method seeds depend only on (rho index, run), so all methods
/// see the same data and paired comparisons are possible.
pub fn run_experiment(cfg: &ExperimentConfig, seed: u64) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut jobs = Vec::new();
    for &method in &cfg.methods {
        for (ri, &rho) in cfg.rho_inter_sweep.iter().enumerate() {
            for run in 0..cfg.runs {
                jobs.push((method, ri, rho, run));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count())
        .build()
        .map_err(|e| Error::InvalidConfig(format!("worker pool: {e}")))?;
    let records: Vec<RawRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, ri, rho, run)| {
                let cell = (ri * cfg.runs + run) as u64;
                let data_seed = derive_seed(seed, "data", cell);
                let method_seed = derive_seed(seed, "method", cell);
                run_cell(cfg, method, rho, run, data_seed, method_seed)
            })
            .collect()
    });
    for r in records.iter().filter(|r| r.error.is_some()) {
        log::warn!(
            "{} rho={} run {} failed: {}",
            r.method,
            r.rho_inter,
            r.run,
            r.error.as_deref().unwrap_or("")
        );
    }
    Ok(ExperimentOutput {
        rows: aggregate(&records, cfg.alpha),
        records,
    })
}

fn run_cell(cfg: &ExperimentConfig, method: Method, rho: f64, run: usize, data_seed: u64, method_seed: u64) -> RawRecord {
    let mut record = RawRecord {
        method,
        rho_inter: rho,
        run,
        data_seed,
        method_seed,
        truth: Vec::new(),
        scores: None,
        p_values: None,
        higher_is_important: true,
        prediction_score: None,
        time_seconds: 0.0,
        fit_seconds: None,
        importance_seconds: None,
        error: None,
    };
    let sim = match simulate(&cfg.simulation(rho), data_seed) {
        Ok(s) => s,
        Err(e) => {
            record.error = Some(format!("{}: {e}", e.name()));
            return record;
        }
    };
    record.truth = sim.truth.important_groups.clone();
    let start = Instant::now();
    let out = run_method(method, &sim.data, &sim.groups, cfg, method_seed);
    record.time_seconds = start.elapsed().as_secs_f64();
    match out {
        Ok(o) => {
            record.scores = Some(o.scores);
            record.p_values = o.p_values;
            record.higher_is_important = o.higher_is_important;
            record.prediction_score = o.prediction_score;
            record.fit_seconds = o.fit_seconds;
            record.importance_seconds = o.importance_seconds;
        }
        Err(e) => record.error = Some(format!("{}: {e}", e.name())),
    }
    record
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 9] = [
    "method",
    "rho_inter",
    "runs_ok",
    "runs_failed",
    "auc",
    "type1",
    "power",
    "time_seconds",
    "prediction_score",
];

pub fn write_metrics_csv<W: Write>(w: W, rows: &[MetricsRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.write_record([
            r.method.name().to_string(),
            r.rho_inter.to_string(),
            r.runs_ok.to_string(),
            r.runs_failed.to_string(),
            opt(r.auc),
            opt(r.type1),
            opt(r.power),
            r.time_seconds.to_string(),
            opt(r.prediction_score),
        ])?;
    }
    out.flush()?;
    Ok(())
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedMetrics(msg.into())
}

fn parse_f64(field: &str, what: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| malformed(format!("{what}: not a number: {field:?}")))
}

fn parse_opt(field: &str, what: &str) -> Result<Option<f64>> {
    if field.is_empty() {
        Ok(None)
    } else {
        parse_f64(field, what).map(Some)
    }
}

fn parse_rate(field: &str, what: &str) -> Result<Option<f64>> {
    let v = parse_opt(field, what)?;
    if let Some(x) = v {
        if !(0.0..=1.0).contains(&x) {
            return Err(malformed(format!("{what} outside [0, 1]: {x}")));
        }
    }
    Ok(v)
}

/// Parses `metrics.csv`; rejects missing columns, bad numbers and empty files.
pub fn read_metrics_csv<R: std::io::Read>(r: R) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(malformed(format!("unexpected header {:?}", headers.iter().collect::<Vec<_>>())));
    }
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| malformed(e.to_string()))?;
        if rec.len() != METRICS_HEADER.len() {
            return Err(malformed(format!("row {}: {} fields", line + 1, rec.len())));
        }
        let method = rec[0].parse::<Method>().map_err(|_| malformed(format!("unknown method {:?}", &rec[0])))?;
        let count = |f: &str, what: &str| f.parse::<usize>().map_err(|_| malformed(format!("{what}: {f:?}")));
        let rho_inter = parse_f64(&rec[1], "rho_inter")?;
        let time_seconds = parse_f64(&rec[7], "time_seconds")?;
        if !rho_inter.is_finite() || !time_seconds.is_finite() || time_seconds < 0.0 {
            return Err(malformed(format!("row {}: invalid rho or time", line + 1)));
        }
        rows.push(MetricsRow {
            method,
            rho_inter,
            runs_ok: count(&rec[2], "runs_ok")?,
            runs_failed: count(&rec[3], "runs_failed")?,
            auc: parse_rate(&rec[4], "auc")?,
            type1: parse_rate(&rec[5], "type1")?,
            power: parse_rate(&rec[6], "power")?,
            time_seconds,
            prediction_score: parse_opt(&rec[8], "prediction_score")?,
        });
    }
    if rows.is_empty() {
        return Err(malformed("no metrics rows"));
    }
    Ok(rows)
}

pub fn write_raw_jsonl<W: Write>(mut w: W, records: &[RawRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Parses `raw.jsonl`, one record per non-blank line.
pub fn read_raw_jsonl<R: BufRead>(r: R) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RawRecord =
            serde_json::from_str(&line).map_err(|e| malformed(format!("raw line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::rng_for;
    use proptest::prelude::*;
    use rand::Rng;

    fn brute_auc(v: &[f64], t: &[bool], smaller: bool) -> f64 {
        let (mut twice, mut pairs) = (0u64, 0u64);
        for i in (0..v.len()).filter(|&i| t[i]) {
            for j in (0..v.len()).filter(|&j| !t[j]) {
                pairs += 1;
                let better = if smaller { v[i] < v[j] } else { v[i] > v[j] };
                twice += if better { 2 } else if v[i] == v[j] { 1 } else { 0 };
            }
        }
        twice as f64 / (2 * pairs) as f64
    }

    #[test]
    fn auc_examples() {
        let t = [true, true, false, false];
        let s = Direction::SmallerIsImportant;
        assert_eq!(auc_ranking(&[0.01, 0.02, 0.5, 0.6], &t, s).unwrap(), 1.0);
        assert_eq!(auc_ranking(&[0.01, 0.5, 0.02, 0.6], &t, s).unwrap(), 0.75);
        assert_eq!(auc_ranking(&[0.3; 4], &t, s).unwrap(), 0.5);
        assert!(matches!(auc_ranking(&[0.1, 0.2], &[true, true], s), Err(Error::DegenerateTruth)));
    }

    proptest! {
        #[test]
        fn auc_matches_pairwise_enumeration(
            cells in proptest::collection::vec((0u8..6, any::<bool>()), 2..50),
            smaller in any::<bool>(),
        ) {
            let v: Vec<f64> = cells.iter().map(|c| c.0 as f64 / 4.0).collect();
            let t: Vec<bool> = cells.iter().map(|c| c.1).collect();
            prop_assume!(t.iter().any(|&x| x) && t.iter().any(|&x| !x));
            let dir = if smaller { Direction::SmallerIsImportant } else { Direction::LargerIsImportant };
            prop_assert_eq!(auc_ranking(&v, &t, dir).unwrap(), brute_auc(&v, &t, smaller));
        }
    }

    #[test]
    fn rates_examples() {
        let truth = [true, true, false, false, false];
        // 3 runs x 5 groups, counted by hand: signal hits 2 + 1 + 2 = 5 of 6, null hits 0 + 1 + 0 of 9
        let p = vec![
            vec![0.001, 0.01, 0.2, 0.5, 0.9],
            vec![0.04, 0.3, 0.01, 0.06, 0.05],
            vec![0.0, 0.049, 0.051, 0.7, 0.5],
        ];
        assert_eq!(power(&p, &truth, 0.05).unwrap(), 5.0 / 6.0);
        assert_eq!(type_one_error(&p, &truth, 0.05).unwrap(), 1.0 / 9.0);
        assert_eq!(type_one_error(&[vec![0.5, 0.5]], &[true, false], 0.05).unwrap(), 0.0);
        assert_eq!(power(&[vec![1e-5, 0.9, 1e-6]], &[true, false, true], 0.05).unwrap(), 1.0);
        assert_eq!(power(&[vec![0.01, 0.9]], &[true, true], 0.05).unwrap(), 0.5);
        assert!(matches!(type_one_error(&p, &[true; 5], 0.05), Err(Error::NoNullGroups)));
        assert!(matches!(power(&p, &[false; 5], 0.05), Err(Error::NoSignalGroups)));
    }

    #[test]
    fn uniform_type_one_error_is_nominal() {
        let mut rng = rng_for(3, "uniform", 0);
        let p: Vec<Vec<f64>> = (0..100).map(|_| (0..100).map(|_| rng.random::<f64>()).collect()).collect();
        let rate = type_one_error(&p, &[false; 100], 0.05).unwrap();
        assert!((rate - 0.05).abs() <= 0.005, "{rate}");
    }

    #[test]
    fn ks_detects_shapes() {
        let mut rng = rng_for(4, "ks", 0);
        let u: Vec<f64> = (0..500).map(|_| rng.random::<f64>()).collect();
        assert!(ks_uniform(&u).unwrap().p_two_sided > 0.01);
        let small: Vec<f64> = u.iter().map(|v| v * v).collect();
        let r = ks_uniform(&small).unwrap();
        assert!(r.p_two_sided < 0.01 && !r.uniform_or_conservative(0.01));
        let large: Vec<f64> = u.iter().map(|v| v.sqrt()).collect();
        let r = ks_uniform(&large).unwrap();
        assert!(r.p_two_sided < 0.01 && r.uniform_or_conservative(0.01));
        // a single point: D = max(1 - v, v)
        let r = ks_uniform(&[0.3]).unwrap();
        assert!((r.d_plus - 0.7).abs() < 1e-15 && (r.d_minus - 0.3).abs() < 1e-15);
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // tabulated critical values of the limiting distribution
        assert!((kolmogorov_sf(1.3581) - 0.05).abs() < 1e-4);
        assert!((kolmogorov_sf(1.6276) - 0.01).abs() < 1e-4);
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            n: 80,
            n_blocks: 3,
            block_size: 2,
            rho_inter_sweep: vec![0.2],
            outcome: OutcomeConfig {
                signal_groups: 1,
                ..OutcomeConfig::default()
            },
            methods: vec![Method::Marginal],
            runs: 2,
            permutations: 3,
            ..ExperimentConfig::desk_exp1()
        }
    }

    #[test]
    fn experiment_bookkeeping_and_determinism() {
        let cfg = tiny_config();
        let a = run_experiment(&cfg, 11).unwrap();
        assert_eq!(a.rows.len(), 1);
        assert_eq!(a.records.len(), 2);
        assert_eq!(a.rows[0].runs_ok, 2);
        let b = run_experiment(&cfg, 11).unwrap();
        let strip = |o: &ExperimentOutput| -> Vec<RawRecord> { o.records.iter().map(RawRecord::without_timing).collect() };
        let mut buf_a = Vec::new();
        let mut buf_b = Vec::new();
        write_raw_jsonl(&mut buf_a, &strip(&a)).unwrap();
        write_raw_jsonl(&mut buf_b, &strip(&b)).unwrap();
        assert_eq!(buf_a, buf_b);
    }

    #[test]
    fn aggregates_recompute_from_archive() {
        let mut cfg = tiny_config();
        cfg.methods = vec![Method::Marginal, Method::Logi, Method::BcpiRf];
        cfg.forest.n_trees = 10;
        cfg.conditional_forest.n_trees = 10;
        let out = run_experiment(&cfg, 5).unwrap();
        let mut raw = Vec::new();
        write_raw_jsonl(&mut raw, &out.records).unwrap();
        let parsed = read_raw_jsonl(raw.as_slice()).unwrap();
        assert_eq!(aggregate(&parsed, cfg.alpha), out.rows);
        let mut csv_bytes = Vec::new();
        write_metrics_csv(&mut csv_bytes, &out.rows).unwrap();
        assert_eq!(read_metrics_csv(csv_bytes.as_slice()).unwrap(), out.rows);
        let logi = out.rows.iter().find(|r| r.method == Method::Logi).unwrap();
        assert!(logi.type1.is_none() && logi.auc.is_some());
    }

    #[test]
    fn failures_are_counted() {
        let mut cfg = tiny_config();
        cfg.n = 30; // below the importance pipeline's minimum
        cfg.methods = vec![Method::BcpiRf];
        let out = run_experiment(&cfg, 1).unwrap();
        assert_eq!(out.rows[0].runs_failed, 2);
        assert_eq!(out.rows[0].runs_ok, 0);
        assert!(out.records[0].error.as_deref().unwrap().starts_with("TooFewSamples"));
    }

    #[test]
    fn metrics_parser_rejects_bad_input() {
        assert!(matches!(read_metrics_csv("".as_bytes()), Err(Error::MalformedMetrics(_))));
        let header = METRICS_HEADER.join(",");
        assert!(matches!(read_metrics_csv(header.as_bytes()), Err(Error::MalformedMetrics(_))));
        let bad = format!("{header}\nbcpi-dnn,0.5,3,0,1.5,,,0.1,\n");
        assert!(matches!(read_metrics_csv(bad.as_bytes()), Err(Error::MalformedMetrics(_))));
        let unknown = format!("{header}\nfoo,0.5,3,0,0.5,,,0.1,\n");
        assert!(read_metrics_csv(unknown.as_bytes()).is_err());
    }

    #[test]
    fn presets_validate() {
        for name in ["desk-exp1", "paper-exp1", "paper-exp2", "desk-nonlinear", "desk-null"] {
            ExperimentConfig::preset(name).unwrap().validate().unwrap();
        }
        let json = serde_json::to_string(&ExperimentConfig::desk_exp1()).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ExperimentConfig::desk_exp1());
        assert_eq!(serde_json::to_string(&Method::BcpiDnn).unwrap(), r#""bcpi-dnn""#);
    }
}
