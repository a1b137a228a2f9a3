//! Conditional reconstruction of a group from the remaining columns.
//!
//! A multi-output forest predicts `x^J` from `x^{-J}` on the fold being
//! scored (in-sample: the fold is both fitted and reconstructed). Additive mode adds jointly shuffled residuals back to the
//! predictions; leaf sampling replaces each row by the full target vector of
//! a training row drawn from a leaf that row reaches.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learners::{Forest, ForestConfig};
use crate::matrix::Matrix;
use crate::types::{rng_for, GroupSpec};

/// How a group is replaced when measuring its importance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PermutationMode {
    #[default]
    #[serde(rename = "conditional-additive")]
    ConditionalAdditive,
    #[serde(rename = "conditional-sampling")]
    ConditionalSampling,
    #[serde(rename = "standard")]
    Standard,
}

impl PermutationMode {
    pub fn sampler_mode(self) -> Option<SamplerMode> {
        match self {
            PermutationMode::ConditionalAdditive => Some(SamplerMode::Additive),
            PermutationMode::ConditionalSampling => Some(SamplerMode::LeafSampling),
            PermutationMode::Standard => None,
        }
    }
}

impl std::str::FromStr for PermutationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional-additive" => Ok(PermutationMode::ConditionalAdditive),
            "conditional-sampling" => Ok(PermutationMode::ConditionalSampling),
            "standard" => Ok(PermutationMode::Standard),
            other => Err(Error::InvalidConfig(format!("unknown permutation mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerMode {
    Additive,
    LeafSampling,
}

#[derive(Debug, Clone)]
pub struct ConditionalSampler {
    group: Vec<usize>,
    mode: SamplerMode,
    forest: Forest,
    conditioning: Matrix,
    targets: Matrix,
    predictions: Matrix,
    residuals: Matrix,
}

/// Fits the conditional model of group `j` on the rows of `x`.
pub fn fit_conditional(
    x: &Matrix,
    spec: &GroupSpec,
    j: usize,
    mode: SamplerMode,
    forest_cfg: &ForestConfig,
    seed: u64,
) -> Result<ConditionalSampler> {
    if j >= spec.len() {
        return Err(Error::InvalidGroupSpec(format!("group {j} out of {} groups", spec.len())));
    }
    let group = spec.groups[j].clone();
    if group.is_empty() {
        return Err(Error::EmptyGroup {
            group: j,
            name: spec.names[j].clone(),
        });
    }
    let rest = spec.complement(j, x.cols());
    if rest.is_empty() {
        return Err(Error::EmptyConditioningSet { group: j });
    }
    fit_conditional_on(x.select_columns(&rest), x.select_columns(&group), group, j, mode, forest_cfg, seed)
}

/// Fits the conditional model of `targets` (the columns `group` of the working
/// matrix) on an arbitrary `conditioning` matrix with the same rows.
pub fn fit_conditional_on(
    conditioning: Matrix,
    targets: Matrix,
    group: Vec<usize>,
    j: usize,
    mode: SamplerMode,
    forest_cfg: &ForestConfig,
    seed: u64,
) -> Result<ConditionalSampler> {
    if conditioning.cols() == 0 {
        return Err(Error::EmptyConditioningSet { group: j });
    }
    if conditioning.rows() != targets.rows() || targets.cols() != group.len() {
        return Err(Error::ShapeMismatch(format!(
            "conditioning {}x{} vs targets {}x{} for {} columns",
            conditioning.rows(),
            conditioning.cols(),
            targets.rows(),
            targets.cols(),
            group.len()
        )));
    }
    let forest = Forest::fit(forest_cfg, &conditioning, &targets, false, seed)?;
    let predictions = forest.predict(&conditioning)?;
    let mut residuals = targets.clone();
    for (r, p) in residuals.as_mut_slice().iter_mut().zip(predictions.as_slice()) {
        *r -= p;
    }
    Ok(ConditionalSampler {
        group,
        mode,
        forest,
        conditioning,
        targets,
        predictions,
        residuals,
    })
}

impl ConditionalSampler {
    pub fn group(&self) -> &[usize] {
        &self.group
    }

    pub fn mode(&self) -> SamplerMode {
        self.mode
    }

    pub fn predictions(&self) -> &Matrix {
        &self.predictions
    }

    pub fn residuals(&self) -> &Matrix {
        &self.residuals
    }

    pub fn n_rows(&self) -> usize {
        self.targets.rows()
    }

    /// The `b`-th reconstruction `x̃^{J,b}` (rows × |J|).
    pub fn reconstruct(&self, b: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, "reconstruct", b as u64);
        match self.mode {
            SamplerMode::Additive => {
                let mut perm: Vec<usize> = (0..self.n_rows()).collect();
                perm.shuffle(&mut rng);
                self.reconstruct_with_permutation(&perm)
            }
            SamplerMode::LeafSampling => {
                let n = self.n_rows();
                let trees = self.forest.trees();
                let mut out = Matrix::zeros(n, self.group.len());
                for i in 0..n {
                    let tree = &trees[rng.random_range(0..trees.len())];
                    let members = tree.leaf_members(self.conditioning.row(i));
                    let m = members[rng.random_range(0..members.len())] as usize;
                    out.row_mut(i).copy_from_slice(self.targets.row(m));
                }
                out
            }
        }
    }

    /// Additive reconstruction `x̂ + ε[perm]` with residual rows taken in `perm` order.
    pub fn reconstruct_with_permutation(&self, perm: &[usize]) -> Matrix {
        assert_eq!(perm.len(), self.n_rows(), "permutation length");
        let mut out = self.predictions.clone();
        for (i, &src) in perm.iter().enumerate() {
            for (o, e) in out.row_mut(i).iter_mut().zip(self.residuals.row(src)) {
                *o += e;
            }
        }
        out
    }
}

/// Group `j`'s columns with one row permutation applied to all of them.
pub fn permute_standard(x: &Matrix, spec: &GroupSpec, j: usize, seed: u64) -> Matrix {
    let mut perm: Vec<usize> = (0..x.rows()).collect();
    perm.shuffle(&mut rng_for(seed, "permute", 0));
    x.select_rows(&perm).select_columns(&spec.groups[j])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learners::MaxFeatures;
    use rand::Rng;
    use proptest::prelude::*;
    use rand_distr::StandardNormal;

    fn gaussian(n: usize, p: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, "test", 0);
        let mut m = Matrix::zeros(n, p);
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        m
    }

    fn small_forest() -> ForestConfig {
        ForestConfig {
            n_trees: 20,
            ..ForestConfig::conditional()
        }
    }

    fn column_mean(m: &Matrix, c: usize) -> f64 {
        m.column(c).iter().sum::<f64>() / m.rows() as f64
    }

    #[test]
    fn mode_names() {
        for (s, m) in [
            ("conditional-additive", PermutationMode::ConditionalAdditive),
            ("conditional-sampling", PermutationMode::ConditionalSampling),
            ("standard", PermutationMode::Standard),
        ] {
            assert_eq!(s.parse::<PermutationMode>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{s}\""));
        }
        assert!("shuffle".parse::<PermutationMode>().is_err());
    }

    #[test]
    fn predictable_group_has_small_residuals() {
        let mut x = gaussian(400, 3, 1);
        for i in 0..400 {
            x[(i, 2)] = 2.0 * x[(i, 0)] - x[(i, 1)];
        }
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2]]);
        let cfg = ForestConfig {
            n_trees: 50,
            min_samples_leaf: 1,
            max_features: MaxFeatures::All,
            ..ForestConfig::default()
        };
        let s = fit_conditional(&x, &spec, 1, SamplerMode::Additive, &cfg, 3).unwrap();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let ratio = norm(s.residuals().as_slice()) / norm(&x.column(2));
        assert!(ratio <= 0.05, "ratio {ratio}");
    }

    #[test]
    fn independent_group_keeps_its_variance() {
        let x = gaussian(2000, 3, 2);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2]]);
        // in-sample leaves of 5 rows absorb part of a row's own value, so use wider leaves here
        let cfg = ForestConfig {
            min_samples_leaf: 50,
            ..ForestConfig::conditional()
        };
        let s = fit_conditional(&x, &spec, 1, SamplerMode::Additive, &cfg, 4).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64
        };
        let ratio = var(s.residuals().as_slice()) / var(&x.column(2));
        assert!((ratio - 1.0).abs() <= 0.1, "ratio {ratio}");
    }

    #[test]
    fn single_group_has_no_conditioning_set() {
        let x = gaussian(50, 3, 3);
        let spec = GroupSpec::new(vec![vec![0, 1, 2]]);
        assert!(matches!(
            fit_conditional(&x, &spec, 0, SamplerMode::Additive, &small_forest(), 0),
            Err(Error::EmptyConditioningSet { group: 0 })
        ));
    }

    #[test]
    fn zero_residuals_reconstruct_targets() {
        // constant group column: the forest predicts it exactly
        let mut x = gaussian(60, 3, 4);
        for i in 0..60 {
            x[(i, 2)] = 1.5;
        }
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2]]);
        let s = fit_conditional(&x, &spec, 1, SamplerMode::Additive, &small_forest(), 0).unwrap();
        assert!(s.residuals().as_slice().iter().all(|&e| e == 0.0));
        assert_eq!(s.reconstruct(3, 9).column(0), x.column(2));
    }

    #[test]
    fn identity_permutation_is_a_no_op() {
        let x = gaussian(80, 4, 5);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        let s = fit_conditional(&x, &spec, 1, SamplerMode::Additive, &small_forest(), 0).unwrap();
        let id: Vec<usize> = (0..80).collect();
        let rec = s.reconstruct_with_permutation(&id);
        for i in 0..80 {
            for (k, &c) in [2usize, 3].iter().enumerate() {
                assert!((rec[(i, k)] - x[(i, c)]).abs() <= 1e-12 * x[(i, c)].abs().max(1.0));
            }
        }
    }

    #[test]
    fn leaf_sampling_draws_training_rows() {
        let x = gaussian(120, 5, 6);
        let spec = GroupSpec::new(vec![vec![0, 1, 2], vec![3, 4]]);
        let s = fit_conditional(&x, &spec, 1, SamplerMode::LeafSampling, &small_forest(), 0).unwrap();
        let rows: Vec<Vec<f64>> = (0..120).map(|i| vec![x[(i, 3)], x[(i, 4)]]).collect();
        for b in 0..3 {
            let rec = s.reconstruct(b, 11);
            for i in 0..120 {
                // one shared draw: the whole row is some training row's group values
                assert!(rows.iter().any(|r| r.as_slice() == rec.row(i)));
            }
        }
    }

    #[test]
    fn standard_permutation_keeps_rows_together() {
        let mut x = gaussian(50, 3, 7);
        for i in 0..50 {
            x[(i, 1)] = 2.0 * x[(i, 0)];
        }
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2]]);
        let block = permute_standard(&x, &spec, 0, 3);
        let mut seen: Vec<Vec<f64>> = (0..50).map(|i| block.row(i).to_vec()).collect();
        let mut orig: Vec<Vec<f64>> = (0..50).map(|i| vec![x[(i, 0)], x[(i, 1)]]).collect();
        seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
        orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(seen, orig);
        for i in 0..50 {
            assert_eq!(block[(i, 1)], 2.0 * block[(i, 0)]);
        }
        assert_ne!(block.column(0), x.column(0));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn additive_preserves_means_and_residual_multiset(seed in 0u64..1000, b in 0usize..50) {
            let x = gaussian(40, 4, seed);
            let spec = GroupSpec::new(vec![vec![0], vec![1, 2], vec![3]]);
            let s = fit_conditional(&x, &spec, 1, SamplerMode::Additive, &small_forest(), seed).unwrap();
            let mut perm: Vec<usize> = (0..40).collect();
            perm.shuffle(&mut rng_for(seed, "prop", b as u64));
            let rec = s.reconstruct_with_permutation(&perm);
            for (k, &c) in [1usize, 2].iter().enumerate() {
                let (a, m) = (column_mean(&rec, k), column_mean(&x, c));
                prop_assert!((a - m).abs() <= 1e-12 * (1.0 + m.abs()) * 40.0);
            }
            // residuals implied by a seeded reconstruction are a row permutation of the fitted ones
            let rec = s.reconstruct(b, seed);
            let key = |m: &Matrix, r: usize| m.row(r).to_vec();
            let mut implied: Vec<Vec<f64>> = (0..40)
                .map(|r| rec.row(r).iter().zip(s.predictions().row(r)).map(|(a, p)| a - p).collect())
                .collect();
            let mut fitted: Vec<Vec<f64>> = (0..40).map(|r| key(s.residuals(), r)).collect();
            implied.sort_by(|a, b| a.partial_cmp(b).unwrap());
            fitted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (u, v) in implied.iter().zip(&fitted) {
                for (a, e) in u.iter().zip(v) {
                    prop_assert!((a - e).abs() <= 1e-12 * (1.0 + e.abs()) * 8.0);
                }
            }
            prop_assert_eq!(&rec, &s.reconstruct(b, seed));
        }
    }
}
