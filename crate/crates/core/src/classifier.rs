//! l2-regularized logistic regression, fit by damped Newton iterations with
//! a backtracking line search. Fully deterministic.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::{EmbeddingDataset, LabeledSet};

#[derive(Debug, Error, PartialEq)]
pub enum ClassifierError {
    #[error("degenerate training set: {0}")]
    Degenerate(&'static str),
    #[error("vector has dimension {got}, model has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("initial point has dimension {got}, expected {expected}")]
    BadInit { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            tol: 1e-6,
            max_iters: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub iterations: usize,
    pub grad_norm: f64,
    /// Objective value at the start and after every iteration.
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
    pub meta: TrainingMeta,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl ClassifierModel {
    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    #[inline]
    pub fn decision(&self, v: &[f32]) -> f64 {
        self.weights
            .iter()
            .zip(v)
            .map(|(w, x)| w * *x as f64)
            .sum::<f64>()
            + self.bias
    }

    /// `P(positive | v)` without the dimension check.
    #[inline]
    pub fn proba(&self, v: &[f32]) -> f64 {
        sigmoid(self.decision(v))
    }
}

pub fn predict_proba(model: &ClassifierModel, vector: &[f32]) -> Result<f64, ClassifierError> {
    if vector.len() != model.dim() {
        return Err(ClassifierError::DimensionMismatch {
            expected: model.dim(),
            got: vector.len(),
        });
    }
    Ok(model.proba(vector))
}

/// Training examples as borrowed rows with `+1/-1` targets.
pub struct TrainingData<'a> {
    rows: Vec<&'a [f32]>,
    targets: Vec<f64>,
    d: usize,
}

impl<'a> TrainingData<'a> {
    pub fn new(d: usize, rows: Vec<&'a [f32]>, targets: Vec<f64>) -> Self {
        assert_eq!(rows.len(), targets.len());
        assert!(rows.iter().all(|r| r.len() == d));
        Self { rows, targets, d }
    }

    pub fn from_labeled(labeled: &LabeledSet, dataset: &'a EmbeddingDataset) -> Self {
        let rows = labeled.rows().map(|r| dataset.row(r)).collect();
        let targets = labeled
            .entries()
            .iter()
            .map(|(_, l)| l.sign() as f64)
            .collect();
        Self::new(dataset.dim(), rows, targets)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Mean log-loss plus `lambda/2 |w|^2` (bias unpenalized) and its gradient
/// with respect to `(w, b)`; `params` holds `d` weights followed by the bias.
pub fn objective(data: &TrainingData, lambda: f64, params: &[f64]) -> (f64, Vec<f64>) {
    let d = data.d;
    let n = data.len() as f64;
    let (w, b) = (&params[..d], params[d]);
    let mut loss = 0.0;
    let mut grad = vec![0.0; d + 1];
    for (x, y) in data.rows.iter().zip(&data.targets) {
        let z: f64 = w.iter().zip(x.iter()).map(|(wi, xi)| wi * *xi as f64).sum::<f64>() + b;
        loss += softplus(-y * z);
        // d/dz softplus(-y z) = -y * sigmoid(-y z)
        let coef = -y * sigmoid(-y * z);
        for (g, xi) in grad.iter_mut().zip(x.iter()) {
            *g += coef * *xi as f64;
        }
        grad[d] += coef;
    }
    loss /= n;
    for g in grad.iter_mut() {
        *g /= n;
    }
    let mut reg = 0.0;
    for (g, wi) in grad.iter_mut().zip(w) {
        *g += lambda * wi;
        reg += wi * wi;
    }
    (loss + 0.5 * lambda * reg, grad)
}

fn hessian(data: &TrainingData, lambda: f64, params: &[f64]) -> DMatrix<f64> {
    let d = data.d;
    let n = data.len() as f64;
    let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
    let mut xt = vec![0.0; d + 1];
    for x in &data.rows {
        for (t, xi) in xt.iter_mut().zip(x.iter()) {
            *t = *xi as f64;
        }
        xt[d] = 1.0;
        let z: f64 = params.iter().zip(&xt).map(|(p, v)| p * v).sum();
        let s = sigmoid(z);
        let c = s * (1.0 - s) / n;
        for i in 0..=d {
            let ci = c * xt[i];
            for j in i..=d {
                h[(i, j)] += ci * xt[j];
            }
        }
    }
    for i in 0..=d {
        for j in 0..i {
            h[(i, j)] = h[(j, i)];
        }
        if i < d {
            h[(i, i)] += lambda;
        }
    }
    h
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn newton_direction(h: DMatrix<f64>, g: &[f64]) -> Vec<f64> {
    let rhs = -DVector::from_column_slice(g);
    let scale = h.diagonal().amax().max(1e-300);
    let mut damping = 0.0;
    loop {
        let mut hd = h.clone();
        for i in 0..hd.nrows() {
            hd[(i, i)] += damping;
        }
        if let Some(chol) = hd.cholesky() {
            return chol.solve(&rhs).as_slice().to_vec();
        }
        damping = if damping == 0.0 { 1e-12 * scale } else { damping * 10.0 };
        if damping > 1e6 * scale {
            // gradient descent fallback
            return rhs.as_slice().to_vec();
        }
    }
}

/// Fits from the zero vector.
pub fn train(labeled: &LabeledSet, dataset: &EmbeddingDataset, config: &TrainConfig) -> Result<ClassifierModel, ClassifierError> {
    let data = TrainingData::from_labeled(labeled, dataset);
    fit(&data, config, None)
}

pub fn fit(data: &TrainingData, config: &TrainConfig, init: Option<&[f64]>) -> Result<ClassifierModel, ClassifierError> {
    if data.is_empty() {
        return Err(ClassifierError::Degenerate("no labeled examples"));
    }
    let has_pos = data.targets.iter().any(|y| *y > 0.0);
    let has_neg = data.targets.iter().any(|y| *y < 0.0);
    if !(has_pos && has_neg) {
        return Err(ClassifierError::Degenerate("only one class present"));
    }
    let d = data.d;
    let mut params = match init {
        Some(p) if p.len() != d + 1 => {
            return Err(ClassifierError::BadInit {
                expected: d + 1,
                got: p.len(),
            })
        }
        Some(p) => p.to_vec(),
        None => vec![0.0; d + 1],
    };
    let lambda = config.lambda;
    let (mut loss, mut grad) = objective(data, lambda, &params);
    let mut history = vec![loss];
    let mut iterations = 0;
    while iterations < config.max_iters && inf_norm(&grad) > config.tol {
        let dir = newton_direction(hessian(data, lambda, &params), &grad);
        let slope: f64 = dir.iter().zip(&grad).map(|(a, b)| a * b).sum();
        let mut step = 1.0;
        let mut accepted = None;
        while step > 1e-14 {
            let trial: Vec<f64> = params.iter().zip(&dir).map(|(p, s)| p + step * s).collect();
            let (l, g) = objective(data, lambda, &trial);
            if l <= loss + 1e-4 * step * slope.min(0.0) {
                accepted = Some((trial, l, g));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((p, l, g)) => {
                params = p;
                loss = l;
                grad = g;
                history.push(loss);
            }
            // no representable decrease left
            None => break,
        }
    }
    let bias = params[d];
    params.truncate(d);
    Ok(ClassifierModel {
        weights: params,
        bias,
        lambda,
        meta: TrainingMeta {
            iterations,
            grad_norm: inf_norm(&grad),
            loss_history: history,
        },
    })
}
