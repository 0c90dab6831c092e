//! Per-concept nearest-neighbor graphs among positives and the two structure
//! statistics reported for them.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::index::{build_exact, build_lsh, IndexError, KnnIndex, LshParams};
use crate::store::{EmbeddingDataset, RowSet, StoreError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("concept {concept} has {found} positives, need at least 2")]
    TooFewPositives { concept: String, found: usize },
    #[error("largest component has a single node")]
    TrivialComponent,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Index(#[from] IndexError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GraphIndex {
    #[default]
    Exact,
    Lsh(LshParams),
}

/// Undirected simple graph. Node `i` stands for dataset row `nodes[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptGraph {
    pub nodes: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
}

impl ConceptGraph {
    /// Builds from an edge list over local node indices. Self-loops and
    /// duplicate edges are dropped.
    pub fn from_edges(nodes: Vec<usize>, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let mut adjacency = vec![Vec::new(); nodes.len()];
        for (a, b) in edges {
            if a != b {
                adjacency[a].push(b);
                adjacency[b].push(a);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
            list.dedup();
        }
        Self { nodes, adjacency }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.adjacency[node]
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    /// Component id per node, numbered in order of first appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut comp = vec![usize::MAX; self.len()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for start in 0..self.len() {
            if comp[start] != usize::MAX {
                continue;
            }
            comp[start] = next;
            queue.push_back(start);
            while let Some(u) = queue.pop_front() {
                for &v in &self.adjacency[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        queue.push_back(v);
                    }
                }
            }
            next += 1;
        }
        comp
    }

    /// Nodes of the largest component; ties go to the one found first.
    pub fn largest_component(&self) -> Vec<usize> {
        let comp = self.components();
        let count = comp.iter().max().map_or(0, |m| m + 1);
        let mut sizes = vec![0usize; count];
        for &c in &comp {
            sizes[c] += 1;
        }
        let Some(best) = (0..count).max_by(|a, b| sizes[*a].cmp(&sizes[*b]).then(b.cmp(a))) else {
            return Vec::new();
        };
        (0..self.len()).filter(|i| comp[*i] == best).collect()
    }

    /// Unweighted distances from `source`; unreachable nodes get `usize::MAX`.
    pub fn bfs(&self, source: usize) -> Vec<usize> {
        let mut dist = vec![usize::MAX; self.len()];
        dist[source] = 0;
        let mut queue = VecDeque::from([source]);
        while let Some(u) = queue.pop_front() {
            for &v in &self.adjacency[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        dist
    }
}

pub fn largest_component_fraction(g: &ConceptGraph) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    g.largest_component().len() as f64 / g.len() as f64
}

/// Mean shortest-path length over all pairs of the largest component.
pub fn avg_shortest_path(g: &ConceptGraph) -> Result<f64, GraphError> {
    let lc = g.largest_component();
    if lc.len() < 2 {
        return Err(GraphError::TrivialComponent);
    }
    let mut total = 0u64;
    for &s in &lc {
        let dist = g.bfs(s);
        total += lc.iter().map(|t| dist[*t] as u64).sum::<u64>();
    }
    let pairs = (lc.len() * (lc.len() - 1)) as f64;
    Ok(total as f64 / pairs)
}

/// k-NN graph among a concept's positives, with an edge whenever either
/// endpoint lists the other.
pub fn build_concept_graph(
    dataset: &EmbeddingDataset,
    concept: &str,
    k: usize,
    index: &GraphIndex,
) -> Result<ConceptGraph, GraphError> {
    let positives = dataset.positives(concept)?;
    if positives.len() < 2 {
        return Err(GraphError::TooFewPositives {
            concept: concept.to_string(),
            found: positives.len(),
        });
    }
    let d = dataset.dim();
    let mut vectors = Vec::with_capacity(positives.len() * d);
    for &r in &positives {
        vectors.extend_from_slice(dataset.row(r));
    }
    let ids = positives.iter().map(|r| dataset.id(*r).to_string()).collect();
    let sub = Arc::new(EmbeddingDataset::new(d, vectors, ids, BTreeMap::new())?);
    let idx: Box<dyn KnnIndex> = match index {
        GraphIndex::Exact => Box::new(build_exact(sub.clone())),
        GraphIndex::Lsh(p) => Box::new(build_lsh(sub.clone(), p.clone())?),
    };
    let mut this = RowSet::with_capacity(positives.len());
    let mut edges = Vec::new();
    for a in 0..positives.len() {
        this.insert(a);
        for b in idx.query_row(a, k, &this)?.rows() {
            edges.push((a, b));
        }
        this.remove(a);
    }
    Ok(ConceptGraph::from_edges(positives, edges))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptStructure {
    pub concept: String,
    pub total_positives: usize,
    pub lc_fraction: f64,
    /// Missing when the largest component is a single node.
    pub avg_shortest_path: Option<f64>,
}

pub fn analyze_concept(
    dataset: &EmbeddingDataset,
    concept: &str,
    k: usize,
    index: &GraphIndex,
) -> Result<ConceptStructure, GraphError> {
    let g = build_concept_graph(dataset, concept, k, index)?;
    Ok(ConceptStructure {
        concept: concept.to_string(),
        total_positives: g.len(),
        lc_fraction: largest_component_fraction(&g),
        avg_shortest_path: avg_shortest_path(&g).ok(),
    })
}

/// Writes the structure table; the header is present even with no rows.
pub fn write_structure_csv<W: Write>(out: W, rows: &[ConceptStructure]) -> Result<(), GraphError> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(["concept", "total_positives", "lc_fraction", "avg_shortest_path"])?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use bitvec::prelude::*;

    fn path(n: usize) -> ConceptGraph {
        ConceptGraph::from_edges((0..n).collect(), (1..n).map(|i| (i - 1, i)))
    }

    fn complete(n: usize) -> ConceptGraph {
        let edges = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b)));
        ConceptGraph::from_edges((0..n).collect(), edges)
    }

    #[test]
    fn path_and_star_values() {
        assert!((avg_shortest_path(&path(3)).unwrap() - 4.0 / 3.0).abs() < 1e-12);
        let star = ConceptGraph::from_edges((0..5).collect(), (1..5).map(|i| (0, i)));
        assert!((avg_shortest_path(&star).unwrap() - 1.6).abs() < 1e-12);
        assert_eq!(avg_shortest_path(&complete(6)).unwrap(), 1.0);
    }

    #[test]
    fn component_fractions() {
        assert_eq!(largest_component_fraction(&complete(4)), 1.0);
        let edgeless = ConceptGraph::from_edges((0..5).collect(), []);
        assert_eq!(largest_component_fraction(&edgeless), 0.2);
        assert!(matches!(avg_shortest_path(&edgeless), Err(GraphError::TrivialComponent)));
        let split = ConceptGraph::from_edges(
            (0..10).collect(),
            (1..6).map(|i| (i - 1, i)).chain((7..10).map(|i| (i - 1, i))),
        );
        assert_eq!(largest_component_fraction(&split), 0.6);
    }

    #[test]
    fn self_loops_and_duplicates_dropped() {
        let g = ConceptGraph::from_edges(vec![0, 1], [(0, 0), (0, 1), (1, 0)]);
        assert_eq!(g.edge_count(), 1);
        assert_eq!(g.neighbors(0), &[1]);
    }

    fn two_clusters() -> EmbeddingDataset {
        let s = 0.01f32;
        let mut v = Vec::new();
        for i in 0..4 {
            let t = i as f32 * s;
            v.extend([(1.0 - t * t).sqrt(), t]);
        }
        for i in 0..3 {
            let t = i as f32 * s;
            v.extend([t, (1.0 - t * t).sqrt()]);
        }
        v.extend([-1.0, 0.0]);
        let ids = (0..8).map(|i| format!("p{i}")).collect();
        let bits: BitVec = (0..8).map(|i| i < 7).collect();
        EmbeddingDataset::new(2, v, ids, BTreeMap::from([("c".to_string(), bits)])).unwrap()
    }

    #[test]
    fn separated_clusters_form_two_components() {
        let ds = two_clusters();
        let g = build_concept_graph(&ds, "c", 2, &GraphIndex::Exact).unwrap();
        assert_eq!(g.len(), 7);
        let comp = g.components();
        assert_eq!(comp.iter().max(), Some(&1));
        assert!((largest_component_fraction(&g) - 4.0 / 7.0).abs() < 1e-12);
    }

    #[test]
    fn two_positives_make_one_edge() {
        let ds = two_clusters();
        let mut bits = bitvec![0; 8];
        bits.set(0, true);
        bits.set(7, true);
        let ds = EmbeddingDataset::new(
            2,
            ds.vectors().to_vec(),
            ds.ids().to_vec(),
            BTreeMap::from([("pair".to_string(), bits)]),
        )
        .unwrap();
        let g = build_concept_graph(&ds, "pair", 1, &GraphIndex::Exact).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert_eq!(largest_component_fraction(&g), 1.0);
        assert_eq!(g.nodes, vec![0, 7]);
    }

    #[test]
    fn csv_header_only_when_empty() {
        let mut buf = Vec::new();
        write_structure_csv(&mut buf, &[]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "concept,total_positives,lc_fraction,avg_shortest_path\n");
    }
}
