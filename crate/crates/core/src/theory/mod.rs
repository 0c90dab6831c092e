//! Simulator for the analyzable variant of the nearest-neighbor restricted
//! loop: d-1 chains of membership queries in a continuous convex domain,
//! each stepping from its smallest-margin point toward the max-margin
//! hyperplane separating it from the opposite class.

mod hull;

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hull::{project_onto_hull, Projection};

/// Frank-Wolfe stopping gap for every hull projection.
pub const HULL_TOL: f64 = 1e-8;
const SEPARABLE_EPS: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum TheoryError {
    #[error("non-separable: point lies in the opposite hull")]
    NonSeparable,
    #[error("empty opposite set")]
    EmptyOpposite,
    #[error("invalid instance: {0}")]
    Instance(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Max-margin hyperplane `{z : w.z = b}` between a point and a finite set.
#[derive(Clone, Debug, PartialEq)]
pub struct MarginResult {
    pub w: Vec<f64>,
    pub b: f64,
    pub margin: f64,
    /// Projection of the point onto the opposite hull.
    pub support_point: Vec<f64>,
    pub gap: f64,
}

impl MarginResult {
    /// Signed distance of `z` from the hyperplane, positive on the side of
    /// the opposite set.
    pub fn signed_distance(&self, z: &[f64]) -> f64 {
        dot(&self.w, z) - self.b
    }
}

/// Solves the dual: project `point` onto `conv(opposite)`, then read the
/// separator off the segment between the two.
pub fn max_margin_separator(point: &[f64], opposite: &[Vec<f64>]) -> Result<MarginResult, TheoryError> {
    if opposite.is_empty() {
        return Err(TheoryError::EmptyOpposite);
    }
    let proj = project_onto_hull(point, opposite, HULL_TOL);
    let x_t = proj.point;
    let len = dist(&x_t, point);
    if len <= SEPARABLE_EPS {
        return Err(TheoryError::NonSeparable);
    }
    let w: Vec<f64> = x_t.iter().zip(point).map(|(a, b)| (a - b) / len).collect();
    let b = (dot(&x_t, &x_t) - dot(point, point)) / (2.0 * len);
    Ok(MarginResult {
        w,
        b,
        margin: len / 2.0,
        support_point: x_t,
        gap: proj.gap,
    })
}

/// Unit normal maximizing `min_i y_i w.x_i`: the normalized min-norm point
/// of `conv{y_i x_i}`.
pub fn fit_homogeneous_separator(points: &[Vec<f64>], labels: &[i8]) -> Result<Vec<f64>, TheoryError> {
    if !labels.contains(&1) || !labels.contains(&-1) {
        return Err(TheoryError::Instance("both labels required".into()));
    }
    let signed: Vec<Vec<f64>> = points
        .iter()
        .zip(labels)
        .map(|(p, y)| p.iter().map(|v| v * *y as f64).collect())
        .collect();
    let origin = vec![0.0; points[0].len()];
    let proj = project_onto_hull(&origin, &signed, HULL_TOL);
    let n = norm(&proj.point);
    if n <= SEPARABLE_EPS {
        return Err(TheoryError::NonSeparable);
    }
    Ok(proj.point.iter().map(|v| v / n).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
}

impl Domain {
    pub fn contains(&self, x: &[f64]) -> bool {
        const TOL: f64 = 1e-9;
        match self {
            Domain::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - TOL && *v <= h + TOL),
            Domain::Ball { center, radius } => dist(x, center) <= radius + TOL,
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        match self {
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(l, h)| rng.gen_range(*l..=*h)).collect(),
            Domain::Ball { center, radius } => loop {
                let x: Vec<f64> = center.iter().map(|_| rng.gen_range(-1.0..=1.0)).collect();
                if norm(&x) <= 1.0 {
                    break x.iter().zip(center).map(|(v, c)| c + radius * v).collect();
                }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeometryInstance {
    pub d: usize,
    pub w_star: Vec<f64>,
    pub domain: Domain,
    pub delta: f64,
    /// One starting point per chain.
    pub seeds: Vec<Vec<f64>>,
    /// Additional labeled points available from the start.
    pub aux: Vec<Vec<f64>>,
    pub epsilon: f64,
}

impl GeometryInstance {
    /// `w_star = e1`. Chain `i` starts at `gamma (e1 + 2 e_{i+1})` and the
    /// opposite side holds `-gamma (e1 + e_{i+1})`. Every seed sits at
    /// distance `gamma` from the true boundary, the initial homogeneous
    /// separator is tilted, and the layout scales with `gamma`.
    pub fn chains(d: usize, gamma: f64, delta: f64, epsilon: f64) -> Self {
        const UP: f64 = 2.0;
        const DOWN: f64 = 1.0;
        assert!(d >= 2);
        let mut w_star = vec![0.0; d];
        w_star[0] = 1.0;
        let mut seeds = Vec::new();
        let mut aux = Vec::new();
        for i in 0..d - 1 {
            let mut p = vec![0.0; d];
            p[0] = gamma;
            p[i + 1] = UP * gamma;
            let mut n = vec![0.0; d];
            n[0] = -gamma;
            n[i + 1] = -DOWN * gamma;
            seeds.push(p);
            aux.push(n);
        }
        let half = gamma * (UP + 1.0) + 1.0;
        Self {
            d,
            w_star,
            domain: Domain::Box {
                lo: vec![-half; d],
                hi: vec![half; d],
            },
            delta,
            seeds,
            aux,
            epsilon,
        }
    }

    /// Seeds `e1 + m e_{i+1}` with negatives `-e1 + m e_{i+1}` in an
    /// unbounded-enough ball, `delta = 1/2`.
    pub fn spread_layout(d: usize, m: f64, epsilon: f64) -> Self {
        let mut w_star = vec![0.0; d];
        w_star[0] = 1.0;
        let point = |s: f64, i: usize| {
            let mut v = vec![0.0; d];
            v[0] = s;
            v[i + 1] = m;
            v
        };
        Self {
            d,
            w_star,
            domain: Domain::Ball {
                center: vec![0.0; d],
                radius: 2.0 * (m + 1.0),
            },
            delta: 0.5,
            seeds: (0..d - 1).map(|i| point(1.0, i)).collect(),
            aux: (0..d - 1).map(|i| point(-1.0, i)).collect(),
            epsilon,
        }
    }

    pub fn label(&self, x: &[f64]) -> i8 {
        if dot(&self.w_star, x) >= 0.0 {
            1
        } else {
            -1
        }
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        let bad = |m: &str| Err(TheoryError::Instance(m.into()));
        if (norm(&self.w_star) - 1.0).abs() > 1e-9 || self.w_star.len() != self.d {
            return bad("w_star must be a unit vector of dimension d");
        }
        if self.delta <= 0.0 || self.epsilon <= 0.0 {
            return bad("delta and epsilon must be positive");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        for p in self.seeds.iter().chain(&self.aux) {
            if p.len() != self.d {
                return bad("point dimension differs from d");
            }
            if !self.domain.contains(p) {
                return bad("point outside domain");
            }
        }
        let labels: Vec<i8> = self.seeds.iter().chain(&self.aux).map(|p| self.label(p)).collect();
        if !labels.contains(&1) || !labels.contains(&-1) {
            return bad("initial labeled set needs both labels");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Variant {
    /// Query restricted to the delta-ball around the chosen chain point.
    NnGraph,
    /// Query the projection onto the separator directly.
    ProjectAnywhere,
    /// Query restricted to the unqueried points of a finite uniform sample
    /// within distance delta.
    FinitePool { size: usize, rng_seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: usize,
    pub chain: usize,
    pub rho: f64,
    pub w_err: f64,
    pub queries_total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub rows: Vec<TraceRow>,
    pub converged: bool,
    /// Queries spent when the loop stopped.
    pub queries: usize,
    /// Points queried by each chain, in order, starting with its seed.
    pub chains: Vec<Vec<Vec<f64>>>,
    /// Distance of each chain's seed from its opposite hull.
    pub initial_rho: Vec<f64>,
}

impl Trace {
    pub fn rho_series(&self, chain: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.chain == chain).map(|r| r.rho).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TheoryError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["round", "chain", "rho", "w_err", "queries_total"])?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

struct Labeled {
    points: Vec<Vec<f64>>,
    labels: Vec<i8>,
}

impl Labeled {
    fn opposite(&self, y: i8) -> Vec<Vec<f64>> {
        self.points
            .iter()
            .zip(&self.labels)
            .filter(|(_, l)| **l != y)
            .map(|(p, _)| p.clone())
            .collect()
    }
}

/// Runs the chains for up to `max_rounds` rounds. Round `r` starts by
/// fitting the separator to everything labeled so far; the run stops as
/// soon as that separator is within `epsilon` of `w_star`.
pub fn run_modified_seals(inst: &GeometryInstance, variant: &Variant, max_rounds: usize) -> Result<Trace, TheoryError> {
    inst.validate()?;
    let mut pool: Vec<Vec<f64>> = match variant {
        Variant::FinitePool { size, rng_seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(*rng_seed);
            (0..*size).map(|_| inst.domain.sample(&mut rng)).collect()
        }
        _ => Vec::new(),
    };
    let mut labeled = Labeled {
        points: inst.seeds.iter().chain(&inst.aux).cloned().collect(),
        labels: inst.seeds.iter().chain(&inst.aux).map(|p| inst.label(p)).collect(),
    };
    let mut chains: Vec<Vec<Vec<f64>>> = inst.seeds.iter().map(|s| vec![s.clone()]).collect();
    let initial_rho = inst
        .seeds
        .iter()
        .map(|s| {
            let opp = labeled.opposite(inst.label(s));
            max_margin_separator(s, &opp).map(|m| 2.0 * m.margin)
        })
        .collect::<Result<Vec<_>, _>>()?;

    let mut rows = Vec::new();
    let mut queries = 0usize;
    let mut converged = false;
    for round in 0..=max_rounds {
        let w_hat = fit_homogeneous_separator(&labeled.points, &labeled.labels)?;
        let w_err = dist(&w_hat, &inst.w_star);
        converged = w_err <= inst.epsilon;
        let mut picks = Vec::with_capacity(chains.len());
        for (i, chain) in chains.iter().enumerate() {
            let mut best: Option<(f64, usize, MarginResult)> = None;
            for (j, x) in chain.iter().enumerate() {
                let opp = labeled.opposite(inst.label(x));
                let m = max_margin_separator(x, &opp)?;
                if best.as_ref().map_or(true, |b| m.margin < b.0) {
                    best = Some((m.margin, j, m));
                }
            }
            let (margin, j, sep) = best.expect("chains are never empty");
            let rho = 2.0 * margin;
            rows.push(TraceRow {
                round,
                chain: i,
                rho,
                w_err,
                queries_total: queries,
            });
            picks.push((chain[j].clone(), rho, sep));
        }
        if converged || round == max_rounds {
            break;
        }
        // every chain decides against the same labeled set; merge afterwards
        let mut new_points = Vec::new();
        for (i, (x_bar, rho, sep)) in picks.into_iter().enumerate() {
            let mid: Vec<f64> = x_bar
                .iter()
                .zip(&sep.support_point)
                .map(|(a, b)| 0.5 * (a + b))
                .collect();
            let query = match variant {
                Variant::ProjectAnywhere => Some(mid),
                Variant::NnGraph => Some(if rho >= 2.0 * inst.delta {
                    x_bar.iter().zip(&sep.w).map(|(a, w)| a + inst.delta * w).collect()
                } else {
                    mid
                }),
                Variant::FinitePool { .. } => {
                    let pick = pool
                        .iter()
                        .enumerate()
                        .filter(|(_, p)| dist(p, &x_bar) <= inst.delta)
                        .min_by(|a, b| {
                            sep.signed_distance(a.1)
                                .abs()
                                .total_cmp(&sep.signed_distance(b.1).abs())
                                .then(a.0.cmp(&b.0))
                        })
                        .map(|(k, _)| k);
                    pick.map(|k| pool.swap_remove(k))
                }
            };
            if let Some(q) = query {
                new_points.push((i, q));
            }
        }
        for (i, q) in new_points {
            queries += 1;
            labeled.labels.push(inst.label(&q));
            labeled.points.push(q.clone());
            chains[i].push(q);
        }
    }
    Ok(Trace {
        rows,
        converged,
        queries,
        chains,
        initial_rho,
    })
}

/// Least-squares fit of `queries ~ c0 + c1 (gamma/delta) + c2 ln(delta/eps)`.
/// Returns the coefficients and R².
pub fn fit_query_model(samples: &[(f64, f64, f64, f64)]) -> (Vec<f64>, f64) {
    let n = samples.len();
    let x = DMatrix::from_fn(n, 3, |i, j| {
        let (g, d, e, _) = samples[i];
        match j {
            0 => 1.0,
            1 => g / d,
            _ => (d / e).ln(),
        }
    });
    let y = DVector::from_iterator(n, samples.iter().map(|s| s.3));
    let coef = (x.transpose() * &x)
        .lu()
        .solve(&(x.transpose() * &y))
        .unwrap_or_else(|| DVector::zeros(3));
    let fitted = &x * &coef;
    let mean = y.mean();
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted.iter()).map(|(a, b)| (a - b).powi(2)).sum();
    let r2 = if ss_tot == 0.0 { 1.0 } else { 1.0 - ss_res / ss_tot };
    (coef.iter().copied().collect(), r2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separator_closed_form() {
        let m = max_margin_separator(&[2.0, 0.0], &[vec![-1.0, 0.0]]).unwrap();
        assert!((m.margin - 1.5).abs() < 1e-12);
        assert!((m.w[0] + 1.0).abs() < 1e-12 && m.w[1].abs() < 1e-12);
        assert!((m.b + 0.5).abs() < 1e-12);
        // hyperplane z1 = 0.5
        assert!(m.signed_distance(&[0.5, 3.0]).abs() < 1e-12);
    }

    #[test]
    fn separator_errors() {
        assert!(matches!(max_margin_separator(&[0.0], &[]), Err(TheoryError::EmptyOpposite)));
        let tri = [vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(matches!(
            max_margin_separator(&[0.25, 0.25], &tri),
            Err(TheoryError::NonSeparable)
        ));
    }

    #[test]
    fn homogeneous_symmetric_pair() {
        let w = fit_homogeneous_separator(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[1, -1]).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && w[1].abs() < 1e-12);
    }

    #[test]
    fn instance_labels_and_validation() {
        let inst = GeometryInstance::chains(3, 1.0, 0.1, 0.01);
        inst.validate().unwrap();
        assert_eq!(inst.label(&inst.seeds[0]), 1);
        assert_eq!(inst.label(&inst.aux[1]), -1);
        assert_eq!(inst.label(&[0.0, 5.0, 5.0]), 1);
        let mut bad = inst.clone();
        bad.w_star = vec![2.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spread_layout_is_separable() {
        let inst = GeometryInstance::spread_layout(4, 6.0 * 3f64.sqrt(), 0.1);
        inst.validate().unwrap();
        let pts: Vec<Vec<f64>> = inst.seeds.iter().chain(&inst.aux).cloned().collect();
        let labels: Vec<i8> = pts.iter().map(|p| inst.label(p)).collect();
        let w = fit_homogeneous_separator(&pts, &labels).unwrap();
        assert!(pts.iter().zip(&labels).all(|(p, y)| *y as f64 * dot(&w, p) > 0.0));
        for (s, rho) in inst.seeds.iter().zip(
            inst.seeds.iter().map(|s| 2.0 * max_margin_separator(s, &inst.aux).unwrap().margin),
        ) {
            assert!((rho - 2.0).abs() < 1e-9, "{s:?}");
        }
    }

    #[test]
    fn loose_epsilon_needs_no_queries() {
        let inst = GeometryInstance::chains(2, 1.0, 0.1, 10.0);
        let t = run_modified_seals(&inst, &Variant::NnGraph, 50).unwrap();
        assert!(t.converged);
        assert_eq!(t.queries, 0);
    }

    #[test]
    fn query_model_recovers_exact_linear_data() {
        let mut s = Vec::new();
        for g in [0.5, 1.0, 2.0] {
            for d in [0.02, 0.05] {
                for e in [1e-2, 1e-3] {
                    s.push((g, d, e, 3.0 + 2.0 * g / d + 1.5 * (d / e as f64).ln()));
                }
            }
        }
        let (c, r2) = fit_query_model(&s);
        assert!((c[1] - 2.0).abs() < 1e-8 && (c[2] - 1.5).abs() < 1e-8);
        assert!((r2 - 1.0).abs() < 1e-12);
    }
}
