#![allow(dead_code)]

//! Independent reference implementations used as test oracles.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use bitvec::prelude::*;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seals_core::classifier::{train, TrainConfig};
use seals_core::store::{EmbeddingDataset, Label, LabeledSet};
use seals_core::synthetic::{generate, SyntheticSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` unit rows of dimension `d` drawn uniformly from a cube and
/// normalized.
pub fn unit_rows(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    let mut out = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f32> = (0..d).map(|_| r.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-6);
        out.extend(v.iter().map(|x| x / norm));
    }
    out
}

pub fn dataset(n: usize, d: usize, seed: u64, concepts: &[(&str, Vec<usize>)]) -> EmbeddingDataset {
    let labels = concepts
        .iter()
        .map(|(name, rows)| {
            let mut bits = bitvec![0; n];
            for &r in rows {
                bits.set(r, true);
            }
            (name.to_string(), bits)
        })
        .collect();
    let ids = (0..n).map(|i| format!("id{i}")).collect();
    EmbeddingDataset::new(d, unit_rows(n, d, seed), ids, labels).unwrap()
}

pub fn small_synthetic(n: usize, d: usize, num_concepts: usize, prevalence: f64, seed: u64) -> EmbeddingDataset {
    generate(
        &SyntheticSpec {
            n,
            d,
            num_concepts,
            prevalence,
            rng_seed: seed,
            ..SyntheticSpec::default()
        },
        0,
    )
    .unwrap()
}

fn dist64(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Full sort by (distance, row) over non-excluded rows.
pub fn brute_knn(ds: &EmbeddingDataset, query: &[f32], k: usize, exclude: &BTreeSet<usize>) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = (0..ds.len())
        .filter(|r| !exclude.contains(r))
        .map(|r| (r, dist64(query, ds.row(r))))
        .collect();
    all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// Mean over positives of precision at their rank; equal scores rank in
/// input order.
pub fn brute_ap(scores: &[f64], positive: &[bool]) -> f64 {
    let n = scores.len();
    let rank = |i: usize| -> usize {
        (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1
    };
    let pos: Vec<usize> = (0..n).filter(|i| positive[*i]).collect();
    let mut total = 0.0;
    for &i in &pos {
        let ri = rank(i);
        let hits = pos.iter().filter(|&&j| rank(j) <= ri).count();
        total += hits as f64 / ri as f64;
    }
    total / pos.len() as f64
}

/// Component label per node (root of a union-find).
pub fn union_find_components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        let mut c = x;
        while p[c] != r {
            let next = p[c];
            p[c] = r;
            c = next;
        }
        r
    }
    let mut parent: Vec<usize> = (0..n).collect();
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    (0..n).map(|x| find(&mut parent, x)).collect()
}

pub const UNREACHABLE: usize = usize::MAX / 4;

pub fn floyd_warshall(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<usize>> {
    let mut d = vec![vec![UNREACHABLE; n]; n];
    for (i, row) in d.iter_mut().enumerate() {
        row[i] = 0;
    }
    for &(a, b) in edges {
        if a != b {
            d[a][b] = 1;
            d[b][a] = 1;
        }
    }
    for k in 0..n {
        for i in 0..n {
            for j in 0..n {
                let via = d[i][k] + d[k][j];
                if via < d[i][j] {
                    d[i][j] = via;
                }
            }
        }
    }
    d
}

/// Largest component (first found among equal sizes, scanning nodes in
/// order) and its mean pairwise distance.
pub fn oracle_structure(n: usize, edges: &[(usize, usize)]) -> (Vec<usize>, Option<f64>) {
    if n == 0 {
        return (Vec::new(), None);
    }
    let comp = union_find_components(n, edges);
    let mut size: HashMap<usize, usize> = HashMap::new();
    for c in &comp {
        *size.entry(*c).or_default() += 1;
    }
    let top = *size.values().max().unwrap();
    let first = (0..n).find(|i| size[&comp[*i]] == top).unwrap();
    let lc: Vec<usize> = (0..n).filter(|i| comp[*i] == comp[first]).collect();
    if lc.len() < 2 {
        return (lc, None);
    }
    let fw = floyd_warshall(n, edges);
    let total: usize = lc.iter().flat_map(|a| lc.iter().map(move |b| (*a, *b))).map(|(a, b)| fw[a][b]).sum();
    let avg = total as f64 / (lc.len() * (lc.len() - 1)) as f64;
    (lc, Some(avg))
}

/// Projection onto the hull by enumerating every affinely independent
/// subset of up to `d + 1` points and keeping the nearest feasible affine
/// projection.
pub fn brute_hull_projection(x: &[f64], points: &[Vec<f64>]) -> (Vec<f64>, f64) {
    let d = x.len();
    let n = points.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut consider = |subset: &[usize]| {
        let s0 = &points[subset[0]];
        let m = subset.len() - 1;
        let (point, coefs) = if m == 0 {
            (s0.clone(), vec![1.0])
        } else {
            let dmat = DMatrix::from_fn(d, m, |i, j| points[subset[j + 1]][i] - s0[i]);
            let gram = dmat.transpose() * &dmat;
            if gram.determinant().abs() < 1e-12 {
                return;
            }
            let rhs = dmat.transpose() * DVector::from_fn(d, |i, _| x[i] - s0[i]);
            let Some(mu) = gram.lu().solve(&rhs) else { return };
            let mut coefs = vec![1.0 - mu.sum()];
            coefs.extend(mu.iter());
            let p: Vec<f64> = (0..d).map(|i| s0[i] + (0..m).map(|j| mu[j] * dmat[(i, j)]).sum::<f64>()).collect();
            (p, coefs)
        };
        if coefs.iter().any(|c| *c < -1e-12) {
            return;
        }
        let dist = point.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if best.as_ref().map_or(true, |b| dist < b.1) {
            best = Some((point, dist));
        }
    };
    let mut stack: Vec<usize> = Vec::new();
    fn rec(start: usize, n: usize, max: usize, stack: &mut Vec<usize>, f: &mut dyn FnMut(&[usize])) {
        if !stack.is_empty() {
            f(stack);
        }
        if stack.len() == max {
            return;
        }
        for i in start..n {
            stack.push(i);
            rec(i + 1, n, max, stack, f);
            stack.pop();
        }
    }
    rec(0, n, d + 1, &mut stack, &mut consider);
    best.expect("non-empty point set")
}

/// Unit normal maximizing the smallest signed margin, by scanning angles.
pub fn grid_search_separator(points: &[[f64; 2]], labels: &[i8], steps: usize) -> ([f64; 2], f64) {
    let mut best = ([0.0, 0.0], f64::NEG_INFINITY);
    for s in 0..steps {
        let t = std::f64::consts::TAU * s as f64 / steps as f64;
        let w = [t.cos(), t.sin()];
        let m = points
            .iter()
            .zip(labels)
            .map(|(p, y)| *y as f64 * (w[0] * p[0] + w[1] * p[1]))
            .fold(f64::INFINITY, f64::min);
        if m > best.1 {
            best = (w, m);
        }
    }
    best
}

fn entropy(p: f64) -> f64 {
    let t = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    t(p) + t(1.0 - p)
}

fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0f64, 0f64, 0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0)
}

/// Information-density selection over a k-NN restricted pool, recomputing
/// every row's mean similarity from scratch each time it is scored. The
/// mean of a row is always taken over the pool as it stood when that row
/// was first scored. Returns the labeling order after the seed.
pub fn reference_id_seals(
    ds: &EmbeddingDataset,
    truth: &BitSlice,
    seed: &LabeledSet,
    k: usize,
    beta: f64,
    batch: usize,
    budget: usize,
    train_cfg: &TrainConfig,
) -> Vec<usize> {
    let mut labeled = seed.clone();
    let mut members: BTreeSet<usize> = labeled.rows().collect();
    let knn = |row: usize, members: &BTreeSet<usize>| -> Vec<usize> {
        brute_knn(ds, ds.row(row), k, members).into_iter().map(|(r, _)| r).collect()
    };
    let mut pool: BTreeSet<usize> = BTreeSet::new();
    for row in labeled.rows().collect::<Vec<_>>() {
        pool.extend(knn(row, &members));
    }
    let mut reference: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    while labeled.len() < budget {
        let model = train(&labeled, ds, train_cfg).unwrap();
        assert!(!pool.is_empty(), "reference pool ran dry");
        let score = |row: usize, reference: &BTreeMap<usize, Vec<usize>>| -> f64 {
            let snap = &reference[&row];
            let mean = snap.iter().map(|s| cosine(ds.row(row), ds.row(*s))).sum::<f64>() / snap.len() as f64;
            entropy(model.proba(ds.row(row))) * mean.signum() * mean.abs().powf(beta)
        };
        for &r in &pool {
            reference.entry(r).or_insert_with(|| pool.iter().copied().collect());
        }
        let mut candidates: BTreeMap<usize, f64> = pool.iter().map(|&r| (r, score(r, &reference))).collect();
        let want = batch.min(budget - labeled.len());
        for _ in 0..want {
            let Some((&row, _)) = candidates
                .iter()
                .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(a.0)))
            else {
                break;
            };
            candidates.remove(&row);
            pool.remove(&row);
            labeled.push(row, Label::from_bool(truth[row])).unwrap();
            members.insert(row);
            order.push(row);
            let added: Vec<usize> = knn(row, &members).into_iter().filter(|r| pool.insert(*r)).collect();
            for &r in &added {
                reference.entry(r).or_insert_with(|| pool.iter().copied().collect());
            }
            for r in added {
                candidates.insert(r, score(r, &reference));
            }
        }
    }
    order
}

/// Checks a k-NN answer against the brute-force one. Rows whose distances
/// agree to `tol` may swap places, since the index accumulates in f32.
pub fn knn_agrees(
    ds: &EmbeddingDataset,
    query: &[f32],
    got: &[usize],
    want: &[(usize, f64)],
    exclude: &BTreeSet<usize>,
    tol: f64,
) -> Result<(), String> {
    if got.len() != want.len() {
        return Err(format!("length {} vs {}", got.len(), want.len()));
    }
    let unique: BTreeSet<usize> = got.iter().copied().collect();
    if unique.len() != got.len() {
        return Err("duplicate rows".into());
    }
    if let Some(r) = got.iter().find(|r| exclude.contains(r)) {
        return Err(format!("excluded row {r} returned"));
    }
    for (i, (row, (wrow, wd))) in got.iter().zip(want).enumerate() {
        let d = dist64(query, ds.row(*row));
        if (d - wd).abs() > tol {
            return Err(format!("position {i}: row {row} at {d}, expected row {wrow} at {wd}"));
        }
    }
    Ok(())
}

/// Unit rows with noisy linear labels; both classes always present.
pub fn logistic_instance(seed: u64, n: usize, d: usize) -> (Vec<f32>, Vec<f64>) {
    let v = unit_rows(n, d, seed);
    let mut r = rng(seed ^ 0xabc);
    // label noise keeps the optimum finite even with small lambda
    let mut t: Vec<f64> = (0..n)
        .map(|i| {
            let s = v[i * d] + 0.3 * v[i * d + 1];
            if (s > 0.0) ^ r.gen_bool(0.15) {
                1.0
            } else {
                -1.0
            }
        })
        .collect();
    t[0] = 1.0;
    t[1] = -1.0;
    (v, t)
}
