//! Synthetic benchmarks: block-correlated Gaussian designs with linear or
//! pairwise-interaction outcomes and known important groups.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{cholesky, Matrix};
use crate::types::{derive_seed, rng_for, Dataset, GroupSpec, Task};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockCovarianceConfig {
    pub n_blocks: usize,
    pub block_size: usize,
    pub rho_intra: f64,
    pub rho_inter: f64,
}

impl BlockCovarianceConfig {
    pub fn p(&self) -> usize {
        self.n_blocks * self.block_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.block_size == 0 {
            return Err(Error::InvalidConfig("covariance needs at least one block of one column".into()));
        }
        for (name, rho) in [("rho_intra", self.rho_intra), ("rho_inter", self.rho_inter)] {
            if !(0.0..1.0).contains(&rho) {
                return Err(Error::InvalidConfig(format!("{name} = {rho} outside [0, 1)")));
            }
        }
        if self.rho_inter > self.rho_intra {
            return Err(Error::InvalidConfig(format!(
                "rho_inter = {} exceeds rho_intra = {}",
                self.rho_inter, self.rho_intra
            )));
        }
        Ok(())
    }

    pub fn groups(&self) -> GroupSpec {
        GroupSpec::contiguous(self.n_blocks, self.block_size)
    }
}

/// Unit diagonal, `rho_intra` within blocks, `rho_inter` across blocks.
pub fn build_block_covariance(cfg: &BlockCovarianceConfig) -> Result<Matrix> {
    cfg.validate()?;
    let sigma = block_covariance_unchecked(cfg);
    cholesky(&sigma)?;
    Ok(sigma)
}

fn block_covariance_unchecked(cfg: &BlockCovarianceConfig) -> Matrix {
    let p = cfg.p();
    let mut sigma = Matrix::zeros(p, p);
    for a in 0..p {
        for b in 0..p {
            sigma[(a, b)] = if a == b {
                1.0
            } else if a / cfg.block_size == b / cfg.block_size {
                cfg.rho_intra
            } else {
                cfg.rho_inter
            };
        }
    }
    sigma
}

/// `n` i.i.d. rows from `N(0, sigma)` via the Cholesky factor.
pub fn sample_design(sigma: &Matrix, n: usize, seed: u64) -> Result<Matrix> {
    let l = cholesky(sigma)?;
    let p = sigma.rows();
    let mut rng = rng_for(seed, "design", 0);
    let mut x = Matrix::zeros(n, p);
    let mut z = vec![0.0; p];
    for i in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let row = x.row_mut(i);
        for (a, out) in row.iter_mut().enumerate() {
            let lrow = l.row(a);
            *out = lrow[..=a].iter().zip(&z).map(|(l, z)| l * z).sum();
        }
    }
    Ok(x)
}

/// Which column pairs receive a quadratic coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InteractionPairs {
    /// Every pair `k < j` among the signal columns.
    #[default]
    AllSignalPairs,
    Explicit(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct InteractionConfig {
    #[serde(default)]
    pub pairs: InteractionPairs,
}

fn default_pool() -> Vec<f64> {
    vec![3.0, -3.0, 2.0, -2.0, 1.0, -1.0, 0.5, -0.5]
}

fn default_snr() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeConfig {
    pub signal_groups: usize,
    pub signals_per_group: usize,
    #[serde(default = "default_pool")]
    pub coefficient_pool: Vec<f64>,
    #[serde(default = "default_snr")]
    pub snr: f64,
    /// Explicit noise level; bypasses SNR scaling (needed for null models).
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default)]
    pub interactions: Option<InteractionConfig>,
}

impl Default for OutcomeConfig {
    fn default() -> Self {
        OutcomeConfig {
            signal_groups: 5,
            signals_per_group: 1,
            coefficient_pool: default_pool(),
            snr: default_snr(),
            sigma: None,
            interactions: None,
        }
    }
}

impl OutcomeConfig {
    pub fn validate(&self, spec: &GroupSpec) -> Result<()> {
        if self.signal_groups > spec.len() {
            return Err(Error::InvalidConfig(format!(
                "{} signal groups but only {} groups",
                self.signal_groups,
                spec.len()
            )));
        }
        if let Some(g) = spec.groups[..self.signal_groups]
            .iter()
            .find(|g| g.len() < self.signals_per_group)
        {
            return Err(Error::InvalidConfig(format!(
                "{} signals per group exceed a group of {}",
                self.signals_per_group,
                g.len()
            )));
        }
        if self.signal_groups > 0 && self.signals_per_group > 0 && self.coefficient_pool.is_empty() {
            return Err(Error::InvalidConfig("empty coefficient pool".into()));
        }
        if self.snr.is_nan() || self.snr <= 0.0 {
            return Err(Error::InvalidConfig(format!("snr must be positive, got {}", self.snr)));
        }
        if let Some(s) = self.sigma {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidConfig(format!("sigma must be finite and >= 0, got {s}")));
            }
        }
        Ok(())
    }
}

/// Main effects and pairwise interaction coefficients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficients {
    pub beta: Vec<f64>,
    /// `(k, j, coefficient)` with `k < j`.
    pub quadratic: Vec<(usize, usize, f64)>,
}

impl Coefficients {
    /// A group is important iff it holds a nonzero main effect or takes part
    /// in a nonzero interaction.
    pub fn important_groups(&self, spec: &GroupSpec) -> Vec<bool> {
        let p = self.beta.len();
        let mut active = vec![false; p];
        for (j, &b) in self.beta.iter().enumerate() {
            active[j] |= b != 0.0;
        }
        for &(k, j, c) in &self.quadratic {
            if c != 0.0 {
                active[k] = true;
                active[j] = true;
            }
        }
        spec.groups
            .iter()
            .map(|g| g.iter().any(|&c| c < p && active[c]))
            .collect()
    }

    /// Noise-free signal of one row.
    pub fn signal(&self, row: &[f64]) -> f64 {
        let main: f64 = row.iter().zip(&self.beta).map(|(x, b)| x * b).sum();
        let quad: f64 = self
            .quadratic
            .iter()
            .map(|&(k, j, c)| c * row[k] * row[j])
            .sum();
        main + quad
    }
}

/// Places i.i.d. draws from the coefficient pool on the first
/// `signals_per_group` columns of each of the first `signal_groups` groups.
pub fn draw_beta(cfg: &OutcomeConfig, spec: &GroupSpec, p: usize, seed: u64) -> Result<Coefficients> {
    cfg.validate(spec)?;
    let mut rng = rng_for(seed, "beta", 0);
    let mut beta = vec![0.0; p];
    let mut signal_cols = Vec::new();
    for g in &spec.groups[..cfg.signal_groups] {
        for &c in &g[..cfg.signals_per_group] {
            if c >= p {
                return Err(Error::IndexOutOfRange {
                    group: 0,
                    name: String::new(),
                    index: c,
                    p,
                });
            }
            beta[c] = *cfg.coefficient_pool.choose(&mut rng).expect("pool checked non-empty");
            signal_cols.push(c);
        }
    }
    let mut quadratic = Vec::new();
    if let Some(inter) = &cfg.interactions {
        let pairs: Vec<(usize, usize)> = match &inter.pairs {
            InteractionPairs::AllSignalPairs => {
                let mut cols = signal_cols.clone();
                cols.sort_unstable();
                let mut pairs = Vec::new();
                for a in 0..cols.len() {
                    for b in (a + 1)..cols.len() {
                        pairs.push((cols[a], cols[b]));
                    }
                }
                pairs
            }
            InteractionPairs::Explicit(pairs) => pairs.clone(),
        };
        let mut qrng = rng_for(seed, "beta-quad", 0);
        for (k, j) in pairs {
            if k >= j || j >= p {
                return Err(Error::InvalidConfig(format!("interaction pair ({k}, {j}) is not k < j < p")));
            }
            let c = *cfg
                .coefficient_pool
                .choose(&mut qrng)
                .ok_or_else(|| Error::InvalidConfig("empty coefficient pool".into()))?;
            quadratic.push((k, j, c));
        }
    }
    Ok(Coefficients { beta, quadratic })
}

/// `y = signal + sigma * eps` with `sigma = ||signal|| / (snr sqrt(n))` unless
/// an explicit sigma is configured. Returns `(y, sigma)`.
pub fn simulate_outcome(
    x: &Matrix,
    coefs: &Coefficients,
    cfg: &OutcomeConfig,
    seed: u64,
) -> Result<(Vec<f64>, f64)> {
    if coefs.beta.len() != x.cols() {
        return Err(Error::ShapeMismatch(format!(
            "beta has {} entries for {} columns",
            coefs.beta.len(),
            x.cols()
        )));
    }
    let n = x.rows();
    let signal: Vec<f64> = (0..n).map(|i| coefs.signal(x.row(i))).collect();
    let sigma = match cfg.sigma {
        Some(s) => s,
        None => {
            let norm = signal.iter().map(|s| s * s).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::ZeroSignal);
            }
            noise_scale(norm, cfg.snr, n)
        }
    };
    let mut rng = rng_for(seed, "noise", 0);
    let y = signal
        .iter()
        .map(|s| s + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Ok((y, sigma))
}

/// `||signal||_2 / (snr * sqrt(n))`.
pub fn noise_scale(signal_norm: f64, snr: f64, n: usize) -> f64 {
    signal_norm / (snr * (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulatedTruth {
    pub beta: Vec<f64>,
    #[serde(default)]
    pub quadratic: Vec<(usize, usize, f64)>,
    pub sigma: f64,
    pub important_groups: Vec<bool>,
}

/// Everything needed to draw one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub n: usize,
    pub covariance: BlockCovarianceConfig,
    pub outcome: OutcomeConfig,
    /// Appends an exact copy of this group's columns as an extra group.
    #[serde(default)]
    pub duplicate_group: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Simulated {
    pub data: Dataset,
    pub groups: GroupSpec,
    pub truth: SimulatedTruth,
}

/// Draws design, coefficients and outcome from independent derived streams.
pub fn simulate(cfg: &SimulationConfig, seed: u64) -> Result<Simulated> {
    let sigma_mat = build_block_covariance(&cfg.covariance)?;
    let mut groups = cfg.covariance.groups();
    let p = cfg.covariance.p();
    let mut x = sample_design(&sigma_mat, cfg.n, derive_seed(seed, "sim-design", 0))?;
    let coefs = draw_beta(&cfg.outcome, &groups, p, derive_seed(seed, "sim-beta", 0))?;
    let (y, sigma) = simulate_outcome(&x, &coefs, &cfg.outcome, derive_seed(seed, "sim-noise", 0))?;
    let mut beta = coefs.beta.clone();
    let mut important = coefs.important_groups(&groups);
    if let Some(k) = cfg.duplicate_group {
        let src = groups
            .groups
            .get(k)
            .cloned()
            .ok_or_else(|| Error::InvalidConfig(format!("cannot duplicate missing group {k}")))?;
        let copy = x.select_columns(&src);
        let start = x.cols();
        x = x.hstack(&copy);
        groups.groups.push((start..start + src.len()).collect());
        groups.names.push(format!("{}_copy", groups.names[k]));
        beta.extend(std::iter::repeat_n(0.0, src.len()));
        important.push(false);
    }
    let data = Dataset::new(x, y, Task::Regression)?;
    Ok(Simulated {
        data,
        groups,
        truth: SimulatedTruth {
            beta,
            quadratic: coefs.quadratic,
            sigma,
            important_groups: important,
        },
    })
}
