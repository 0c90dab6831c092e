use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use super::{IndexError, KnnIndex, KnnQueryResult};
use crate::store::{EmbeddingDataset, RowSet};

/// Memoizes the unfiltered top-`k + slack` list of each queried row and
/// answers filtered row queries from it when enough rows survive the
/// exclusion set; otherwise falls through to the wrapped index. Answers are
/// identical to the wrapped index's.
pub struct CachedIndex<I> {
    inner: I,
    slack: usize,
    lists: Mutex<HashMap<(usize, usize), Arc<KnnQueryResult>>>,
}

impl<I: KnnIndex> CachedIndex<I> {
    pub fn new(inner: I, slack: usize) -> Self {
        Self {
            inner,
            slack,
            lists: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &I {
        &self.inner
    }

    pub fn cached_rows(&self) -> usize {
        self.lists.lock().unwrap().len()
    }
}

impl<I: KnnIndex> KnnIndex for CachedIndex<I> {
    fn dataset(&self) -> &EmbeddingDataset {
        self.inner.dataset()
    }

    fn query(&self, vector: &[f32], k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError> {
        self.inner.query(vector, k, exclude)
    }

    fn query_row(&self, row: usize, k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError> {
        let wide = k + self.slack;
        let cached = self.lists.lock().unwrap().get(&(row, wide)).cloned();
        let list = match cached {
            Some(list) => list,
            None => {
                let list = Arc::new(self.inner.query_row(row, wide, &RowSet::new())?);
                self.lists.lock().unwrap().insert((row, wide), list.clone());
                list
            }
        };
        let kept: Vec<_> = list
            .neighbors
            .iter()
            .filter(|n| !exclude.contains(n.row))
            .take(k)
            .copied()
            .collect();
        // A short unfiltered list means the universe is exhausted, so the
        // filtered prefix is complete even when it holds fewer than k rows.
        if kept.len() == k || list.neighbors.len() < wide {
            Ok(KnnQueryResult {
                neighbors: kept,
                k_requested: k,
            })
        } else {
            self.inner.query_row(row, k, exclude)
        }
    }
}
