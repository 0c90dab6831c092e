//! Random-hyperplane LSH. On unit vectors `|x - y|^2 = 2 - 2 cos(x, y)`, so
//! sign-of-projection signatures are locality sensitive for Euclidean
//! distance as well as for angle.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_query, sq_euclidean, IndexError, KnnIndex, KnnQueryResult, TopK};
use crate::rng::derive_seed;
use crate::store::{EmbeddingDataset, RowSet};

const INDEX_MAGIC: &[u8; 4] = b"SIX1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LshParams {
    pub num_tables: usize,
    pub bits_per_table: usize,
    #[serde(default)]
    pub rng_seed: u64,
    /// Extra buckets probed per table beyond the query's own bucket.
    #[serde(default)]
    pub probe_radius: usize,
}

impl Default for LshParams {
    fn default() -> Self {
        Self {
            num_tables: 16,
            bits_per_table: 12,
            rng_seed: 0,
            probe_radius: 16,
        }
    }
}

impl LshParams {
    fn validate(&self) -> Result<(), IndexError> {
        if self.num_tables == 0 {
            return Err(IndexError::InvalidParams("num_tables must be at least 1".into()));
        }
        if self.bits_per_table > 64 {
            return Err(IndexError::InvalidParams(format!(
                "bits_per_table {} exceeds 64",
                self.bits_per_table
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Table {
    /// `bits * d` hyperplane normals, row-major.
    planes: Vec<f32>,
    buckets: HashMap<u64, Vec<u32>>,
}

#[derive(Clone, Debug)]
pub struct LshIndex {
    dataset: Arc<EmbeddingDataset>,
    params: LshParams,
    tables: Vec<Table>,
}

/// Table `t` draws its hyperplanes from a stream derived from `(seed, t)`, so
/// an index with more tables probes a superset of the buckets of one with
/// fewer.
pub fn build_lsh(dataset: Arc<EmbeddingDataset>, params: LshParams) -> Result<LshIndex, IndexError> {
    params.validate()?;
    let d = dataset.dim();
    let mut tables = Vec::with_capacity(params.num_tables);
    for t in 0..params.num_tables {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(params.rng_seed, &[t as u64]));
        let planes: Vec<f32> = (0..params.bits_per_table * d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let mut table = Table {
            planes,
            buckets: HashMap::new(),
        };
        for row in 0..dataset.len() {
            let (key, _) = signature(&table.planes, params.bits_per_table, dataset.row(row));
            table.buckets.entry(key).or_default().push(row as u32);
        }
        tables.push(table);
    }
    Ok(LshIndex {
        dataset,
        params,
        tables,
    })
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Returns the bucket key and the per-bit projections.
fn signature(planes: &[f32], bits: usize, v: &[f32]) -> (u64, Vec<f32>) {
    let d = v.len();
    let mut key = 0u64;
    let mut proj = Vec::with_capacity(bits);
    for b in 0..bits {
        let p = dot(&planes[b * d..(b + 1) * d], v);
        if p >= 0.0 {
            key |= 1 << b;
        }
        proj.push(p);
    }
    (key, proj)
}

/// Bucket keys to probe after the home bucket, most promising first: single
/// bit flips by ascending `|projection|`, then pairs by ascending sum.
fn probe_sequence(key: u64, proj: &[f32], count: usize) -> Vec<u64> {
    if count == 0 || proj.is_empty() {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..proj.len()).collect();
    order.sort_by(|a, b| proj[*a].abs().total_cmp(&proj[*b].abs()).then(a.cmp(b)));
    let mut probes: Vec<(f32, u64)> = order
        .iter()
        .map(|&b| (proj[b].abs(), key ^ (1 << b)))
        .collect();
    if count > probes.len() {
        for (i, &a) in order.iter().enumerate() {
            for &b in &order[i + 1..] {
                probes.push((proj[a].abs() + proj[b].abs(), key ^ (1 << a) ^ (1 << b)));
            }
        }
        probes[proj.len()..].sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    }
    probes.into_iter().take(count).map(|(_, k)| k).collect()
}

impl LshIndex {
    pub fn params(&self) -> &LshParams {
        &self.params
    }

    /// Per-table bucket keys of an arbitrary vector.
    pub fn signatures(&self, v: &[f32]) -> Vec<u64> {
        self.tables
            .iter()
            .map(|t| signature(&t.planes, self.params.bits_per_table, v).0)
            .collect()
    }

    /// Number of distinct candidate rows a query would re-rank.
    pub fn candidate_count(&self, v: &[f32]) -> usize {
        self.candidates(v).len()
    }

    fn candidates(&self, v: &[f32]) -> Vec<u32> {
        let mut out = Vec::new();
        for t in &self.tables {
            let (key, proj) = signature(&t.planes, self.params.bits_per_table, v);
            let probes = probe_sequence(key, &proj, self.params.probe_radius);
            for k in std::iter::once(key).chain(probes) {
                if let Some(rows) = t.buckets.get(&k) {
                    out.extend_from_slice(rows);
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Persists parameters, hyperplanes and buckets in the `SIX1` layout.
    pub fn write_to(&self, mut w: impl Write) -> Result<(), IndexError> {
        let d = self.dataset.dim();
        w.write_all(INDEX_MAGIC)?;
        w.write_all(&(self.params.num_tables as u32).to_le_bytes())?;
        w.write_all(&(self.params.bits_per_table as u32).to_le_bytes())?;
        w.write_all(&self.params.rng_seed.to_le_bytes())?;
        w.write_all(&(self.params.probe_radius as u32).to_le_bytes())?;
        w.write_all(&(d as u32).to_le_bytes())?;
        w.write_all(&(self.dataset.len() as u64).to_le_bytes())?;
        for t in &self.tables {
            for p in &t.planes {
                w.write_all(&p.to_le_bytes())?;
            }
            let mut keys: Vec<&u64> = t.buckets.keys().collect();
            keys.sort();
            w.write_all(&(keys.len() as u64).to_le_bytes())?;
            for k in keys {
                let rows = &t.buckets[k];
                w.write_all(&k.to_le_bytes())?;
                w.write_all(&(rows.len() as u32).to_le_bytes())?;
                for r in rows {
                    w.write_all(&r.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(dataset: Arc<EmbeddingDataset>, mut r: impl Read) -> Result<Self, IndexError> {
        fn u32_of(r: &mut impl Read) -> Result<u32, IndexError> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        }
        fn u64_of(r: &mut impl Read) -> Result<u64, IndexError> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(u64::from_le_bytes(b))
        }
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != INDEX_MAGIC {
            return Err(IndexError::Format(format!("bad magic {magic:?}")));
        }
        let params = LshParams {
            num_tables: u32_of(&mut r)? as usize,
            bits_per_table: u32_of(&mut r)? as usize,
            rng_seed: u64_of(&mut r)?,
            probe_radius: u32_of(&mut r)? as usize,
        };
        params.validate()?;
        let d = u32_of(&mut r)? as usize;
        let n = u64_of(&mut r)? as usize;
        if d != dataset.dim() || n != dataset.len() {
            return Err(IndexError::Format(format!(
                "index built for {n}x{d}, dataset is {}x{}",
                dataset.len(),
                dataset.dim()
            )));
        }
        let mut tables = Vec::with_capacity(params.num_tables);
        for _ in 0..params.num_tables {
            let mut planes = Vec::with_capacity(params.bits_per_table * d);
            for _ in 0..params.bits_per_table * d {
                planes.push(f32::from_bits(u32_of(&mut r)?));
            }
            let nb = u64_of(&mut r)?;
            let mut buckets = HashMap::new();
            for _ in 0..nb {
                let key = u64_of(&mut r)?;
                let len = u32_of(&mut r)? as usize;
                let mut rows = Vec::with_capacity(len);
                for _ in 0..len {
                    let row = u32_of(&mut r)?;
                    if row as usize >= n {
                        return Err(IndexError::Format(format!("row {row} out of range")));
                    }
                    rows.push(row);
                }
                buckets.insert(key, rows);
            }
            tables.push(Table { planes, buckets });
        }
        Ok(Self {
            dataset,
            params,
            tables,
        })
    }
}

impl KnnIndex for LshIndex {
    fn dataset(&self) -> &EmbeddingDataset {
        &self.dataset
    }

    /// Re-ranks bucket candidates by exact distance. Returns fewer than `k`
    /// neighbors when the probed buckets hold fewer candidates.
    fn query(&self, vector: &[f32], k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError> {
        check_query(&self.dataset, vector, k)?;
        let mut top = TopK::new(k);
        for row in self.candidates(vector) {
            let row = row as usize;
            if !exclude.contains(row) {
                top.push(row, sq_euclidean(vector, self.dataset.row(row)));
            }
        }
        Ok(top.finish(k))
    }
}
