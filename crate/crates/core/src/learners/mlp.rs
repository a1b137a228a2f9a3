//! Feed-forward ReLU network trained with Adam and early stopping.
//!
//! With stacking enabled the first layer is a bias-free block-diagonal
//! linear map: each group's standardized inputs feed only that group's
//! `d_k` summary units, and ungrouped columns pass through unchanged. The
//! summary weights are trained jointly with the rest of the network.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::types::{rng_for, GroupSpec, ProjectionSet, Task};

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_lr() -> f64 {
    1e-3
}
fn default_epochs() -> usize {
    200
}
fn default_batch() -> usize {
    64
}
fn default_patience() -> usize {
    20
}
fn default_val() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    #[serde(default = "default_hidden")]
    pub hidden_layers: Vec<usize>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_val")]
    pub validation_fraction: f64,
    #[serde(default)]
    pub stacking: Option<Stacking>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden_layers: default_hidden(),
            learning_rate: default_lr(),
            max_epochs: default_epochs(),
            batch_size: default_batch(),
            early_stop_patience: default_patience(),
            validation_fraction: default_val(),
            stacking: None,
        }
    }
}

/// Group layout for the projection sub-layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stacking {
    pub groups: GroupSpec,
    /// Summary units per group; all ones when empty.
    #[serde(default)]
    pub dims: Vec<usize>,
}

impl Stacking {
    pub fn new(groups: GroupSpec) -> Self {
        Stacking { groups, dims: Vec::new() }
    }

    pub fn resolved_dims(&self) -> Result<Vec<usize>> {
        if self.dims.is_empty() {
            return Ok(vec![1; self.groups.len()]);
        }
        if self.dims.len() != self.groups.len() {
            return Err(Error::InvalidConfig(format!(
                "{} projection dims for {} groups",
                self.dims.len(),
                self.groups.len()
            )));
        }
        for (k, (&d, g)) in self.dims.iter().zip(&self.groups.groups).enumerate() {
            if d == 0 || d > g.len() {
                return Err(Error::InvalidConfig(format!(
                    "group {k}: projected dim {d} outside 1..={}",
                    g.len()
                )));
            }
        }
        Ok(self.dims.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Projection {
    groups: Vec<Vec<usize>>,
    weights: Vec<Matrix>,
    passthrough: Vec<usize>,
}

impl Projection {
    fn width(&self) -> usize {
        self.weights.iter().map(Matrix::cols).sum::<usize>() + self.passthrough.len()
    }

    pub fn as_projection_set(&self) -> ProjectionSet {
        ProjectionSet {
            matrices: self.weights.clone(),
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.width());
        for i in 0..x.rows() {
            let src = x.row(i);
            let dst = out.row_mut(i);
            let mut off = 0;
            for (g, u) in self.groups.iter().zip(&self.weights) {
                let d = u.cols();
                for (r, &c) in g.iter().enumerate() {
                    let v = src[c];
                    for (o, w) in dst[off..off + d].iter_mut().zip(u.row(r)) {
                        *o += v * w;
                    }
                }
                off += d;
            }
            for (o, &c) in dst[off..].iter_mut().zip(&self.passthrough) {
                *o = src[c];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    /// out x in
    w: Matrix,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, input: &Matrix, relu: bool) -> Matrix {
        let n_out = self.w.rows();
        let mut out = Matrix::zeros(input.rows(), n_out);
        for i in 0..input.rows() {
            let a = input.row(i);
            let dst = out.row_mut(i);
            for (o, d) in dst.iter_mut().enumerate() {
                let s: f64 = self.w.row(o).iter().zip(a).map(|(w, x)| w * x).sum::<f64>() + self.b[o];
                *d = if relu && s < 0.0 { 0.0 } else { s };
            }
        }
        out
    }
}

/// Network parameters (and, with the same layout, their gradients).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    input_dim: usize,
    projection: Option<Projection>,
    layers: Vec<Dense>,
}

impl Network {
    /// Random initialization: He-normal for ReLU layers, variance `1/fan_in`
    /// for the output and projection weights.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden: &[usize],
        stacking: Option<(&GroupSpec, &[usize])>,
        rng: &mut R,
    ) -> Result<Network> {
        let projection = match stacking {
            Some((spec, dims)) => {
                spec.validate(input_dim)?;
                let weights = spec
                    .groups
                    .iter()
                    .zip(dims)
                    .map(|(g, &d)| {
                        let scale = (1.0 / g.len() as f64).sqrt();
                        let mut u = Matrix::zeros(g.len(), d);
                        u.as_mut_slice()
                            .iter_mut()
                            .for_each(|v| *v = scale * rng.sample::<f64, _>(StandardNormal));
                        u
                    })
                    .collect();
                Some(Projection {
                    groups: spec.groups.clone(),
                    weights,
                    passthrough: spec.uncovered(input_dim),
                })
            }
            None => None,
        };
        let mut width = projection.as_ref().map_or(input_dim, Projection::width);
        let mut layers = Vec::new();
        for (l, &h) in hidden.iter().chain(std::iter::once(&1)).enumerate() {
            let is_output = l == hidden.len();
            let std = if is_output {
                (1.0 / width as f64).sqrt()
            } else {
                (2.0 / width as f64).sqrt()
            };
            let mut w = Matrix::zeros(h, width);
            w.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = std * rng.sample::<f64, _>(StandardNormal));
            layers.push(Dense { w, b: vec![0.0; h] });
            width = h;
        }
        Ok(Network {
            input_dim,
            projection,
            layers,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn projection(&self) -> Option<&Projection> {
        self.projection.as_ref()
    }

    /// Applies the projection sub-layer (identity when stacking is off).
    pub fn project(&self, x: &Matrix) -> Matrix {
        match &self.projection {
            Some(p) => p.apply(x),
            None => x.clone(),
        }
    }

    /// Output of the layers after the projection, given already-projected inputs.
    pub fn forward_body(&self, z: &Matrix) -> Vec<f64> {
        let mut a = z.clone();
        let last = self.layers.len() - 1;
        for (l, layer) in self.layers.iter().enumerate() {
            a = layer.forward(&a, l < last);
        }
        a.as_slice().to_vec()
    }

    pub fn forward(&self, x: &Matrix) -> Vec<f64> {
        self.forward_body(&self.project(x))
    }

    pub fn body_input_dim(&self) -> usize {
        self.layers[0].w.cols()
    }

    /// Shape and finiteness check for a deserialized network.
    pub fn check(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::MalformedModel(format!("network: {msg}")));
        let finite = |m: &Matrix| m.as_slice().iter().all(|v| v.is_finite());
        let mut width = self.input_dim;
        if let Some(p) = &self.projection {
            if p.groups.len() != p.weights.len() {
                return bad("projection groups and weights differ in count");
            }
            for (g, u) in p.groups.iter().zip(&p.weights) {
                if u.rows() != g.len() || u.cols() == 0 || !finite(u) {
                    return bad("projection block has the wrong shape");
                }
            }
            if p.groups.iter().flatten().chain(&p.passthrough).any(|&c| c >= self.input_dim) {
                return bad("projection references a missing column");
            }
            width = p.width();
        }
        if self.layers.is_empty() {
            return bad("no layers");
        }
        for layer in &self.layers {
            if layer.w.cols() != width || layer.b.len() != layer.w.rows() || layer.w.rows() == 0 {
                return bad("layer shapes do not chain");
            }
            if !finite(&layer.w) || layer.b.iter().any(|v| !v.is_finite()) {
                return bad("non-finite weights");
            }
            width = layer.w.rows();
        }
        if width != 1 {
            return bad("output layer must have one unit");
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(p) = &self.projection {
            out.extend(p.weights.iter().map(Matrix::as_slice));
        }
        for l in &self.layers {
            out.push(l.w.as_slice());
            out.push(&l.b);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(p) = &mut self.projection {
            out.extend(p.weights.iter_mut().map(Matrix::as_mut_slice));
        }
        for l in &mut self.layers {
            out.push(l.w.as_mut_slice());
            out.push(&mut l.b);
        }
        out
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) {
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
    }

    fn zeros_like(&self) -> Network {
        let mut g = self.clone();
        for t in g.tensors_mut() {
            t.iter_mut().for_each(|v| *v = 0.0);
        }
        g
    }

    /// Mean loss over the batch (half squared error, or logistic loss on
    /// logits) and its gradient with respect to every parameter.
    pub fn loss_and_gradient(&self, x: &Matrix, y: &[f64], task: Task) -> (f64, Network) {
        let n = x.rows();
        let z0 = self.project(x);
        let last = self.layers.len() - 1;
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(z0);
        for (l, layer) in self.layers.iter().enumerate() {
            let next = layer.forward(acts.last().expect("non-empty"), l < last);
            acts.push(next);
        }
        let out = acts.last().expect("output").as_slice();
        let inv_n = 1.0 / n as f64;
        let mut loss = 0.0;
        let mut delta = Matrix::zeros(n, 1);
        for i in 0..n {
            let (li, gi) = pointwise_loss(out[i], y[i], task);
            loss += li;
            delta[(i, 0)] = gi * inv_n;
        }
        loss *= inv_n;

        let mut grad = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            let input = &acts[l];
            let layer = &self.layers[l];
            let g = &mut grad.layers[l];
            let n_out = layer.w.rows();
            for i in 0..n {
                let a = input.row(i);
                for o in 0..n_out {
                    let d = delta[(i, o)];
                    if d == 0.0 {
                        continue;
                    }
                    g.b[o] += d;
                    for (gw, &av) in g.w.row_mut(o).iter_mut().zip(a) {
                        *gw += d * av;
                    }
                }
            }
            if l == 0 && self.projection.is_none() {
                break;
            }
            let mut prev = Matrix::zeros(n, layer.w.cols());
            for i in 0..n {
                let dst = prev.row_mut(i);
                for o in 0..n_out {
                    let d = delta[(i, o)];
                    if d == 0.0 {
                        continue;
                    }
                    for (p, &w) in dst.iter_mut().zip(layer.w.row(o)) {
                        *p += d * w;
                    }
                }
            }
            if l > 0 {
                // ReLU derivative from the post-activation
                for (p, &a) in prev.as_mut_slice().iter_mut().zip(input.as_slice()) {
                    if a <= 0.0 {
                        *p = 0.0;
                    }
                }
            }
            delta = prev;
        }
        if let (Some(p), Some(gp)) = (&self.projection, &mut grad.projection) {
            // delta now holds d loss / d projected input
            for i in 0..n {
                let xrow = x.row(i);
                let drow = delta.row(i);
                let mut off = 0;
                for (g, gu) in p.groups.iter().zip(gp.weights.iter_mut()) {
                    let d = gu.cols();
                    for (r, &c) in g.iter().enumerate() {
                        let v = xrow[c];
                        for (gw, &dv) in gu.row_mut(r).iter_mut().zip(&drow[off..off + d]) {
                            *gw += v * dv;
                        }
                    }
                    off += d;
                }
            }
        }
        (loss, grad)
    }

    pub fn mean_loss(&self, x: &Matrix, y: &[f64], task: Task) -> f64 {
        let out = self.forward(x);
        out.iter().zip(y).map(|(&o, &t)| pointwise_loss(o, t, task).0).sum::<f64>() / y.len() as f64
    }
}

/// Loss and derivative with respect to the raw output.
fn pointwise_loss(out: f64, target: f64, task: Task) -> (f64, f64) {
    match task {
        Task::Regression => {
            let r = out - target;
            (0.5 * r * r, r)
        }
        Task::Binary => {
            // softplus(out) - target * out, written stably
            let sp = if out > 0.0 {
                out + (-out).exp().ln_1p()
            } else {
                out.exp().ln_1p()
            };
            let s = 1.0 / (1.0 + (-out).exp());
            (sp - target * out, s - target)
        }
    }
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            lr,
        }
    }

    fn step(&mut self, net: &mut Network, grad: &Network) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut at = 0;
        for (p, g) in net.tensors_mut().into_iter().zip(grad.tensors()) {
            for (w, &gv) in p.iter_mut().zip(g) {
                let m = &mut self.m[at];
                let v = &mut self.v[at];
                *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * gv;
                *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * gv * gv;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
                at += 1;
            }
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_layers.contains(&0) {
            return Err(Error::InvalidConfig("hidden layer widths must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and max_epochs must be >= 1".into()));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::InvalidConfig("validation_fraction must be in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Trains a network on already-standardized inputs and targets.
pub fn train(cfg: &MlpConfig, x: &Matrix, y: &[f64], task: Task, seed: u64) -> Result<Network> {
    cfg.validate()?;
    let n = x.rows();
    let mut rng = rng_for(seed, "mlp", 0);
    let dims;
    let stacking = match &cfg.stacking {
        Some(s) => {
            dims = s.resolved_dims()?;
            Some((&s.groups, dims.as_slice()))
        }
        None => None,
    };
    let mut net = Network::init(x.cols(), &cfg.hidden_layers, stacking, &mut rng)?;
    // start from the constant predictor: zero output weights, bias at the base rate
    let last = net.layers.len() - 1;
    net.layers[last].w.as_mut_slice().iter_mut().for_each(|w| *w = 0.0);
    if task == Task::Binary {
        let rate = (y.iter().sum::<f64>() / n as f64).clamp(1e-3, 1.0 - 1e-3);
        net.layers[last].b[0] = (rate / (1.0 - rate)).ln();
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_val = if n >= 20 {
        ((n as f64) * cfg.validation_fraction).round() as usize
    } else {
        0
    };
    let (val_idx, train_idx) = order.split_at(n_val);
    let mut train_idx = train_idx.to_vec();
    let (xv, yv) = if n_val > 0 {
        (x.select_rows(val_idx), val_idx.iter().map(|&i| y[i]).collect::<Vec<_>>())
    } else {
        (x.clone(), y.to_vec())
    };

    let mut adam = Adam::new(net.n_params(), cfg.learning_rate);
    let mut best = net.mean_loss(&xv, &yv, task);
    let mut best_net = net.clone();
    let mut stale = 0;
    for _epoch in 0..cfg.max_epochs {
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            let xb = x.select_rows(batch);
            let yb: Vec<f64> = batch.iter().map(|&i| y[i]).collect();
            let (loss, grad) = net.loss_and_gradient(&xb, &yb, task);
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss(format!("training loss {loss}")));
            }
            adam.step(&mut net, &grad);
        }
        let val = net.mean_loss(&xv, &yv, task);
        if !val.is_finite() {
            return Err(Error::NonFiniteLoss(format!("validation loss {val}")));
        }
        if val < best - 1e-12 {
            best = val;
            best_net = net.clone();
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(best_net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        let mut m = Matrix::zeros(rows, cols);
        m.as_mut_slice().iter_mut().for_each(|v| *v = rng.sample(StandardNormal));
        m
    }

    fn max_relative_gradient_error(net: &Network, x: &Matrix, y: &[f64], task: Task) -> f64 {
        let (_, grad) = net.loss_and_gradient(x, y, task);
        let analytic = grad.flat_params();
        let theta = net.flat_params();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for k in 0..theta.len() {
            let mut plus = net.clone();
            let mut minus = net.clone();
            let mut tp = theta.clone();
            tp[k] += h;
            plus.set_flat_params(&tp);
            let mut tm = theta.clone();
            tm[k] -= h;
            minus.set_flat_params(&tm);
            let numeric = (plus.mean_loss(x, y, task) - minus.mean_loss(x, y, task)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[k].abs()).max(1e-8);
            worst = worst.max((numeric - analytic[k]).abs() / denom);
        }
        worst
    }

    #[test]
    fn gradient_check_ten_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // 1 -> 3 -> 1: 3 + 3 + 3 + 1 = 10 parameters
        let net = Network::init(1, &[3], None, &mut rng).unwrap();
        assert_eq!(net.n_params(), 10);
        let x = random_matrix(6, 1, &mut rng);
        let y: Vec<f64> = (0..6).map(|i| x[(i, 0)].sin()).collect();
        let err = max_relative_gradient_error(&net, &x, &y, Task::Regression);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn gradient_check_stacked_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![3, 4]]);
        let net = Network::init(5, &[4, 3], Some((&spec, &[1, 2])), &mut rng).unwrap();
        let x = random_matrix(8, 5, &mut rng);
        let y: Vec<f64> = (0..8).map(|i| x[(i, 0)] - x[(i, 4)]).collect();
        let err = max_relative_gradient_error(&net, &x, &y, Task::Regression);
        assert!(err < 1e-4, "relative error {err}");
        let yb: Vec<f64> = y.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let err = max_relative_gradient_error(&net, &x, &yb, Task::Binary);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn projection_block_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = GroupSpec::new(vec![vec![0, 1], vec![2, 3]]);
        let net = Network::init(5, &[2], Some((&spec, &[1, 1])), &mut rng).unwrap();
        let p = net.projection().unwrap();
        let x = Matrix::from_rows(&[vec![1.0, 2.0, 3.0, 4.0, 9.0]]);
        let z = net.project(&x);
        let u = &p.weights;
        assert_eq!(z.cols(), 3);
        assert!((z[(0, 0)] - (u[0][(0, 0)] + 2.0 * u[0][(1, 0)])).abs() < 1e-15);
        assert!((z[(0, 1)] - (3.0 * u[1][(0, 0)] + 4.0 * u[1][(1, 0)])).abs() < 1e-15);
        assert_eq!(z[(0, 2)], 9.0);
    }

    #[test]
    fn rejects_bad_dims() {
        let s = Stacking {
            groups: GroupSpec::new(vec![vec![0, 1]]),
            dims: vec![3],
        };
        assert!(s.resolved_dims().is_err());
    }
}
