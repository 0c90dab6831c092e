//! Euclidean projection onto the convex hull of a finite point set.
//!
//! Away-step Frank-Wolfe gives a certified duality gap; Wolfe's min-norm
//! point iteration then refines the answer to working precision. The better
//! of the two is returned.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub point: Vec<f64>,
    /// Convex weights, one per input point.
    pub weights: Vec<f64>,
    /// Frank-Wolfe duality gap of `point` for the objective
    /// `0.5 * |p - x|^2`; an upper bound on its suboptimality.
    pub gap: f64,
    pub distance: f64,
    pub iterations: usize,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `sum_j w_j q_j` for the translated points `q`.
fn combine(q: &[Vec<f64>], w: &[f64], d: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    for (qj, &wj) in q.iter().zip(w) {
        if wj != 0.0 {
            for (vi, qi) in v.iter_mut().zip(qj) {
                *vi += wj * qi;
            }
        }
    }
    v
}

fn gap_of(q: &[Vec<f64>], v: &[f64]) -> f64 {
    let vv = dot(v, v);
    let min = q.iter().map(|qj| dot(qj, v)).fold(f64::INFINITY, f64::min);
    (vv - min).max(0.0)
}

const AFW_MAX_ITERS: usize = 20_000;

fn away_step_fw(q: &[Vec<f64>], tol: f64) -> (Vec<f64>, usize) {
    let n = q.len();
    let start = (0..n)
        .min_by(|a, b| dot(&q[*a], &q[*a]).total_cmp(&dot(&q[*b], &q[*b])))
        .expect("non-empty hull");
    let mut w = vec![0.0; n];
    w[start] = 1.0;
    let mut v = q[start].clone();
    let mut iters = 0;
    while iters < AFW_MAX_ITERS {
        iters += 1;
        let grads: Vec<f64> = q.iter().map(|qj| dot(qj, &v)).collect();
        let vv = dot(&v, &v);
        let s = (0..n).min_by(|a, b| grads[*a].total_cmp(&grads[*b])).unwrap();
        let fw_gap = vv - grads[s];
        if fw_gap <= tol {
            break;
        }
        let a = (0..n)
            .filter(|j| w[*j] > 0.0)
            .max_by(|x, y| grads[*x].total_cmp(&grads[*y]))
            .unwrap();
        let away_gap = grads[a] - vv;
        // direction in point space and its step cap
        let (dir, max_step, toward) = if fw_gap >= away_gap {
            let dir: Vec<f64> = q[s].iter().zip(&v).map(|(x, y)| x - y).collect();
            (dir, 1.0, true)
        } else {
            let dir: Vec<f64> = v.iter().zip(&q[a]).map(|(x, y)| x - y).collect();
            let cap = w[a] / (1.0f64 - w[a]).max(f64::MIN_POSITIVE);
            (dir, cap, false)
        };
        let dd = dot(&dir, &dir);
        if dd == 0.0 {
            break;
        }
        let step = (-dot(&v, &dir) / dd).clamp(0.0, max_step);
        if step == 0.0 {
            break;
        }
        if toward {
            for wj in w.iter_mut() {
                *wj *= 1.0 - step;
            }
            w[s] += step;
        } else {
            for wj in w.iter_mut() {
                *wj *= 1.0 + step;
            }
            w[a] -= step;
            if step == max_step {
                w[a] = 0.0;
            }
        }
        for (vi, di) in v.iter_mut().zip(&dir) {
            *vi += step * di;
        }
    }
    (w, iters)
}

/// Affine min-norm combination of the corral, `None` if degenerate.
fn affine_min_norm(q: &[Vec<f64>], corral: &[usize]) -> Option<Vec<f64>> {
    let m = corral.len();
    let mut a = DMatrix::<f64>::zeros(m + 1, m + 1);
    for (i, &ci) in corral.iter().enumerate() {
        for (j, &cj) in corral.iter().enumerate() {
            a[(i, j)] = dot(&q[ci], &q[cj]);
        }
        a[(i, m)] = 1.0;
        a[(m, i)] = 1.0;
    }
    let mut rhs = DVector::<f64>::zeros(m + 1);
    rhs[m] = 1.0;
    let sol = a.lu().solve(&rhs)?;
    let mu: Vec<f64> = sol.iter().take(m).copied().collect();
    if mu.iter().all(|x| x.is_finite()) {
        Some(mu)
    } else {
        None
    }
}

const WOLFE_MAX_ITERS: usize = 1_000;

/// Wolfe's min-norm point algorithm over `conv(q)`.
fn wolfe(q: &[Vec<f64>], d: usize) -> Option<Vec<f64>> {
    let n = q.len();
    let scale = q.iter().map(|qj| dot(qj, qj)).fold(0.0, f64::max).max(1e-300);
    let start = (0..n).min_by(|a, b| dot(&q[*a], &q[*a]).total_cmp(&dot(&q[*b], &q[*b])))?;
    let mut corral = vec![start];
    let mut lambda = vec![1.0];
    for _ in 0..WOLFE_MAX_ITERS {
        let v = combine(&corral.iter().map(|c| q[*c].clone()).collect::<Vec<_>>(), &lambda, d);
        let vv = dot(&v, &v);
        let (j, g) = (0..n)
            .map(|j| (j, dot(&q[j], &v)))
            .min_by(|a, b| a.1.total_cmp(&b.1))?;
        if vv - g <= 1e-15 * scale || corral.contains(&j) {
            break;
        }
        corral.push(j);
        lambda.push(0.0);
        // minor cycles
        loop {
            let mu = affine_min_norm(q, &corral)?;
            if mu.iter().all(|x| *x > 1e-15) {
                lambda = mu;
                break;
            }
            let theta = lambda
                .iter()
                .zip(&mu)
                .filter(|(_, m)| **m <= 1e-15)
                .map(|(l, m)| l / (l - m))
                .fold(f64::INFINITY, f64::min)
                .clamp(0.0, 1.0);
            for (l, m) in lambda.iter_mut().zip(&mu) {
                *l = (1.0 - theta) * *l + theta * m;
            }
            let mut i = 0;
            while i < corral.len() {
                if lambda[i] <= 1e-15 {
                    corral.remove(i);
                    lambda.remove(i);
                } else {
                    i += 1;
                }
            }
            if corral.is_empty() {
                return None;
            }
            let total: f64 = lambda.iter().sum();
            lambda.iter_mut().for_each(|l| *l /= total);
        }
    }
    let mut w = vec![0.0; n];
    for (c, l) in corral.iter().zip(&lambda) {
        w[*c] = *l;
    }
    Some(w)
}

/// Projects `x` onto the convex hull of `points`, stopping Frank-Wolfe once
/// the duality gap is at most `tol`.
pub fn project_onto_hull(x: &[f64], points: &[Vec<f64>], tol: f64) -> Projection {
    assert!(!points.is_empty(), "hull of an empty set");
    let d = x.len();
    let q: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(x).map(|(a, b)| a - b).collect())
        .collect();
    let (w_fw, iterations) = away_step_fw(&q, tol);
    let v_fw = combine(&q, &w_fw, d);
    let mut best = (w_fw, v_fw);
    if let Some(w) = wolfe(&q, d) {
        let v = combine(&q, &w, d);
        if dot(&v, &v) <= dot(&best.1, &best.1) {
            best = (w, v);
        }
    }
    let (weights, v) = best;
    let gap = gap_of(&q, &v);
    let point: Vec<f64> = v.iter().zip(x).map(|(a, b)| a + b).collect();
    Projection {
        distance: dot(&v, &v).sqrt(),
        point,
        weights,
        gap,
        iterations,
    }
}
