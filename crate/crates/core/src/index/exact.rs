use std::sync::Arc;

use super::{check_query, sq_euclidean, IndexError, KnnIndex, KnnQueryResult, TopK};
use crate::store::{EmbeddingDataset, RowSet};

/// Brute-force scan over every row.
#[derive(Clone, Debug)]
pub struct ExactIndex {
    dataset: Arc<EmbeddingDataset>,
}

pub fn build_exact(dataset: Arc<EmbeddingDataset>) -> ExactIndex {
    ExactIndex { dataset }
}

impl KnnIndex for ExactIndex {
    fn dataset(&self) -> &EmbeddingDataset {
        &self.dataset
    }

    fn query(&self, vector: &[f32], k: usize, exclude: &RowSet) -> Result<KnnQueryResult, IndexError> {
        check_query(&self.dataset, vector, k)?;
        let d = self.dataset.dim();
        let mut top = TopK::new(k);
        for (row, v) in self.dataset.vectors().chunks_exact(d).enumerate() {
            if exclude.contains(row) {
                continue;
            }
            top.push(row, sq_euclidean(vector, v));
        }
        Ok(top.finish(k))
    }
}
