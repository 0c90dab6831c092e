//! k-nearest-neighbor backends over Euclidean distance on unit vectors.
//!
//! [`ExactIndex`] is a brute-force scan and doubles as the ground truth for
//! [`LshIndex`]. [`CachedIndex`] memoizes per-row neighbor lists for engines
//! that repeatedly expand around the same rows.

mod cache;
mod exact;
mod lsh;

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::store::{EmbeddingDataset, RowSet};

pub use cache::CachedIndex;
pub use exact::{build_exact, ExactIndex};
pub use lsh::{build_lsh, LshIndex, LshParams};

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("query has dimension {got}, index has {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("invalid LSH parameters: {0}")]
    InvalidParams(String),
    #[error("row {row} out of range for index of {n} rows")]
    RowOutOfRange { row: usize, n: usize },
    #[error("index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub row: usize,
    pub distance: f32,
}

/// Neighbors sorted by non-decreasing distance, ties by lower row.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnQueryResult {
    pub neighbors: Vec<Neighbor>,
    pub k_requested: usize,
}

impl KnnQueryResult {
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.neighbors.iter().map(|n| n.row)
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }
}

pub trait KnnIndex: Send + Sync {
    fn dataset(&self) -> &EmbeddingDataset;

    fn query(&self, vector: &[f32], k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError>;

    /// Neighbors of an indexed row. The row itself is only excluded if it is
    /// in `exclude`.
    fn query_row(&self, row: usize, k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError> {
        let n = self.dataset().len();
        if row >= n {
            return Err(IndexError::RowOutOfRange { row, n });
        }
        self.query(self.dataset().row(row), k, exclude)
    }
}

pub(crate) fn check_query(dataset: &EmbeddingDataset, vector: &[f32], k: usize) -> Result<(), IndexError> {
    if vector.len() != dataset.dim() {
        return Err(IndexError::DimensionMismatch {
            expected: dataset.dim(),
            got: vector.len(),
        });
    }
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    Ok(())
}

/// Squared Euclidean distance with a fixed eight-lane accumulation order.
#[inline]
pub fn sq_euclidean(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0f32; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            let t = x[i] - y[i];
            acc[i] += t * t;
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        let t = x - y;
        tail += t * t;
    }
    (acc[0] + acc[4]) + (acc[1] + acc[5]) + (acc[2] + acc[6]) + (acc[3] + acc[7]) + tail
}

#[derive(Clone, Copy, Debug)]
struct Candidate {
    sq: f32,
    row: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.sq.total_cmp(&other.sq).then(self.row.cmp(&other.row))
    }
}

/// Bounded max-heap keeping the `k` best `(distance, row)` pairs.
pub(crate) struct TopK {
    k: usize,
    heap: BinaryHeap<Candidate>,
}

impl TopK {
    pub(crate) fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    #[inline]
    pub(crate) fn push(&mut self, row: usize, sq: f32) {
        let c = Candidate { sq, row };
        if self.heap.len() < self.k {
            self.heap.push(c);
        } else if let Some(mut top) = self.heap.peek_mut() {
            if c < *top {
                *top = c;
            }
        }
    }

    pub(crate) fn finish(self, k_requested: usize) -> KnnQueryResult {
        let neighbors = self
            .heap
            .into_sorted_vec()
            .into_iter()
            .map(|c| Neighbor {
                row: c.row,
                distance: c.sq.sqrt(),
            })
            .collect();
        KnnQueryResult {
            neighbors,
            k_requested,
        }
    }
}
