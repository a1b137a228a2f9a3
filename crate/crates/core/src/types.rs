//! Shared data model: datasets, group partitions, projections, fold plans and
//! seed derivation.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    #[default]
    Regression,
    Binary,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(Task::Regression),
            "binary" => Ok(Task::Binary),
            other => Err(Error::InvalidConfig(format!("unknown task {other:?}"))),
        }
    }
}

/// Design matrix, outcome and task kind.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Matrix,
    y: Vec<f64>,
    task: Task,
    feature_names: Vec<String>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<f64>, task: Task) -> Result<Self> {
        let names = (0..x.cols()).map(|j| format!("x{j}")).collect();
        Self::with_names(x, y, task, names)
    }

    pub fn with_names(x: Matrix, y: Vec<f64>, task: Task, feature_names: Vec<String>) -> Result<Self> {
        if y.len() != x.rows() {
            return Err(Error::InvalidDataset(format!(
                "{} outcomes for {} rows",
                y.len(),
                x.rows()
            )));
        }
        if feature_names.len() != x.cols() {
            return Err(Error::InvalidDataset(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                x.cols()
            )));
        }
        if !x.is_finite() {
            return Err(Error::InvalidDataset("design matrix has non-finite entries".into()));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDataset("outcome has non-finite entries".into()));
        }
        if task == Task::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidDataset("binary outcome must be 0 or 1".into()));
        }
        Ok(Dataset {
            x,
            y,
            task,
            feature_names,
        })
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn p(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, rows: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(rows),
            y: rows.iter().map(|&i| self.y[i]).collect(),
            task: self.task,
            feature_names: self.feature_names.clone(),
        }
    }
}

/// Partition of (a subset of) the columns into named groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub groups: Vec<Vec<usize>>,
    pub names: Vec<String>,
}

impl GroupSpec {
    /// Groups named `g0`, `g1`, ...
    pub fn new(groups: Vec<Vec<usize>>) -> Self {
        let names = (0..groups.len()).map(|k| format!("g{k}")).collect();
        GroupSpec { groups, names }
    }

    /// `n_blocks` consecutive blocks of `block_size` columns.
    pub fn contiguous(n_blocks: usize, block_size: usize) -> Self {
        GroupSpec::new(
            (0..n_blocks)
                .map(|k| (k * block_size..(k + 1) * block_size).collect())
                .collect(),
        )
    }

    /// One group per column.
    pub fn singletons(p: usize) -> Self {
        GroupSpec::new((0..p).map(|j| vec![j]).collect())
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        validate_group_spec(self, p)
    }

    /// Columns outside group `k`, in increasing order (other groups and
    /// uncovered columns alike).
    pub fn complement(&self, k: usize, p: usize) -> Vec<usize> {
        let mut inside = vec![false; p];
        for &c in &self.groups[k] {
            inside[c] = true;
        }
        (0..p).filter(|&c| !inside[c]).collect()
    }

    /// Columns not assigned to any group, in increasing order.
    pub fn uncovered(&self, p: usize) -> Vec<usize> {
        let mut covered = vec![false; p];
        for g in &self.groups {
            for &c in g {
                covered[c] = true;
            }
        }
        (0..p).filter(|&c| !covered[c]).collect()
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let spec: GroupSpec = serde_json::from_str(s)?;
        if spec.names.len() != spec.groups.len() {
            return Err(Error::InvalidGroupSpec(format!(
                "{} names for {} groups",
                spec.names.len(),
                spec.groups.len()
            )));
        }
        Ok(spec)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("group spec serializes")
    }
}

/// Checks disjointness, range and non-emptiness of every group.
pub fn validate_group_spec(spec: &GroupSpec, p: usize) -> Result<()> {
    if spec.groups.is_empty() {
        return Err(Error::InvalidGroupSpec("at least one group is required".into()));
    }
    if spec.names.len() != spec.groups.len() {
        return Err(Error::InvalidGroupSpec(format!(
            "{} names for {} groups",
            spec.names.len(),
            spec.groups.len()
        )));
    }
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for (k, g) in spec.groups.iter().enumerate() {
        let name = spec.names[k].clone();
        if g.is_empty() {
            return Err(Error::EmptyGroup { group: k, name });
        }
        for &index in g {
            if index >= p {
                return Err(Error::IndexOutOfRange {
                    group: k,
                    name,
                    index,
                    p,
                });
            }
            if let Some(&other) = owner.get(&index) {
                return Err(Error::OverlappingGroups {
                    group: k,
                    name,
                    index,
                    other,
                });
            }
            owner.insert(index, k);
        }
    }
    Ok(())
}

/// Per-group projection matrices `U_k` of shape `|G_k| x d_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSet {
    pub matrices: Vec<Matrix>,
}

impl ProjectionSet {
    pub fn dims(&self) -> Vec<usize> {
        self.matrices.iter().map(Matrix::cols).collect()
    }

    /// Total projected width `p'` (group summaries only).
    pub fn projected_width(&self) -> usize {
        self.matrices.iter().map(Matrix::cols).sum()
    }

    pub fn check_against(&self, spec: &GroupSpec) -> Result<()> {
        if self.matrices.len() != spec.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} projections for {} groups",
                self.matrices.len(),
                spec.len()
            )));
        }
        for (k, (u, g)) in self.matrices.iter().zip(&spec.groups).enumerate() {
            if u.rows() != g.len() || u.cols() == 0 || u.cols() > g.len() {
                return Err(Error::ShapeMismatch(format!(
                    "projection {k} is {}x{} for a group of {}",
                    u.rows(),
                    u.cols(),
                    g.len()
                )));
            }
            if !u.is_finite() {
                return Err(Error::ShapeMismatch(format!("projection {k} has non-finite entries")));
            }
        }
        Ok(())
    }

    /// Group structure over the projected columns: group `k` owns its `d_k`
    /// consecutive summary columns; the `n_uncovered` passthrough columns at
    /// the end stay ungrouped.
    pub fn projected_spec(&self, spec: &GroupSpec) -> GroupSpec {
        let mut offset = 0;
        let groups = self
            .matrices
            .iter()
            .map(|u| {
                let g: Vec<usize> = (offset..offset + u.cols()).collect();
                offset += u.cols();
                g
            })
            .collect();
        GroupSpec {
            groups,
            names: spec.names.clone(),
        }
    }
}

/// Two-fold assignment for cross-fitting.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub folds: Vec<u8>,
    pub seed: u64,
}

impl SplitPlan {
    /// Random balanced halves; deterministic in `(n, seed)`.
    pub fn new(n: usize, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "split", 0));
        order.shuffle(&mut rng);
        let mut folds = vec![0u8; n];
        for &i in &order[n.div_ceil(2)..] {
            folds[i] = 1;
        }
        SplitPlan { folds, seed }
    }

    /// Row indices of `fold`, increasing.
    pub fn indices(&self, fold: u8) -> Vec<usize> {
        self.folds
            .iter()
            .enumerate()
            .filter(|(_, &f)| f == fold)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Mixes a master seed with a purpose label and index into an independent
/// stream seed.
pub fn derive_seed(master: u64, purpose: &str, index: u64) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ fnv1a(purpose.as_bytes()));
    splitmix64(h ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

pub fn rng_for(master: u64, purpose: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, purpose, index))
}
