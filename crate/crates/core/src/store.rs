//! Embedding datasets, the on-disk vector format, manifests and seed sets.
//!
//! A dataset is the unlabeled pool: `n` unit-normalized `d`-dimensional
//! vectors with external string ids and, optionally, hidden per-concept
//! labels used when the oracle labeler stands in for a human.
//!
//! The vector file is `"SEV1"`, `u32 n`, `u32 d` and 12 reserved zero bytes, followed by
//! `n * d` little-endian `f32` values in row-major order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use bitvec::prelude::*;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const VECTOR_MAGIC: &[u8; 4] = b"SEV1";
pub const VECTOR_HEADER_LEN: usize = 24;

/// Rows whose norm differs from one by more than this are rejected on load.
pub const NORM_TOLERANCE: f32 = 1e-3;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed manifest {path}: {source}")]
    Manifest {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad vector file header: {0}")]
    Header(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("zero-norm row {0}")]
    ZeroNorm(usize),
    #[error("row {row} is not unit-normalized (norm {norm})")]
    NotNormalized { row: usize, norm: f32 },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
    #[error("unknown id {id:?} in concept {concept:?}")]
    UnknownId { concept: String, id: String },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("concept {concept:?} has {available} positives, {requested} requested")]
    InsufficientPositives {
        concept: String,
        available: usize,
        requested: usize,
    },
    #[error("concept {concept:?} has {available} negatives, {requested} requested")]
    InsufficientNegatives {
        concept: String,
        available: usize,
        requested: usize,
    },
    #[error("invalid seed spec: {0}")]
    InvalidSeed(String),
    #[error("row {0} already labeled")]
    AlreadyLabeled(usize),
    #[error("row {row} out of range for dataset of {n} rows")]
    RowOutOfRange { row: usize, n: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Binary label of one example for one concept.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Label {
    Positive,
    Negative,
}

impl Label {
    pub fn from_bool(positive: bool) -> Self {
        if positive {
            Label::Positive
        } else {
            Label::Negative
        }
    }

    pub fn is_positive(self) -> bool {
        self == Label::Positive
    }

    /// `+1` or `-1`.
    pub fn sign(self) -> i8 {
        match self {
            Label::Positive => 1,
            Label::Negative => -1,
        }
    }

    pub fn from_sign(sign: i64) -> Option<Self> {
        match sign {
            1 => Some(Label::Positive),
            -1 => Some(Label::Negative),
            _ => None,
        }
    }
}

impl Serialize for Label {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i8(self.sign())
    }
}

impl<'de> Deserialize<'de> for Label {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let v = i64::deserialize(d)?;
        Label::from_sign(v).ok_or_else(|| serde::de::Error::custom("label must be +1 or -1"))
    }
}

/// A growable set of row indices backed by a bitset.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RowSet {
    bits: BitVec,
    len: usize,
}

impl RowSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            bits: bitvec![0; n],
            len: 0,
        }
    }

    pub fn contains(&self, row: usize) -> bool {
        self.bits.get(row).map(|b| *b).unwrap_or(false)
    }

    /// Returns `true` if the row was newly inserted.
    pub fn insert(&mut self, row: usize) -> bool {
        if row >= self.bits.len() {
            self.bits.resize(row + 1, false);
        }
        if self.bits[row] {
            return false;
        }
        self.bits.set(row, true);
        self.len += 1;
        true
    }

    pub fn remove(&mut self, row: usize) -> bool {
        if self.contains(row) {
            self.bits.set(row, false);
            self.len -= 1;
            true
        } else {
            false
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter_ones()
    }
}

impl FromIterator<usize> for RowSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut set = RowSet::new();
        for row in iter {
            set.insert(row);
        }
        set
    }
}

/// The unlabeled pool `U`: row-major unit vectors plus ids and oracle labels.
#[derive(Clone, Debug)]
pub struct EmbeddingDataset {
    n: usize,
    d: usize,
    vectors: Vec<f32>,
    ids: Vec<String>,
    id_index: HashMap<String, usize>,
    oracle_labels: BTreeMap<String, BitVec>,
    payloads: Option<Vec<String>>,
}

impl EmbeddingDataset {
    /// Builds a dataset from already-normalized rows.
    pub fn new(
        d: usize,
        vectors: Vec<f32>,
        ids: Vec<String>,
        oracle_labels: BTreeMap<String, BitVec>,
    ) -> Result<Self, StoreError> {
        if d == 0 {
            return Err(StoreError::Shape("dimension must be positive".into()));
        }
        if vectors.len() % d != 0 {
            return Err(StoreError::Shape(format!(
                "{} floats is not a multiple of d={d}",
                vectors.len()
            )));
        }
        let n = vectors.len() / d;
        if ids.len() != n {
            return Err(StoreError::Shape(format!("{} ids for {n} rows", ids.len())));
        }
        let mut id_index = HashMap::with_capacity(n);
        for (row, id) in ids.iter().enumerate() {
            if id_index.insert(id.clone(), row).is_some() {
                return Err(StoreError::DuplicateId(id.clone()));
            }
        }
        for (name, bits) in &oracle_labels {
            if bits.len() != n {
                return Err(StoreError::Shape(format!(
                    "concept {name:?} has {} labels for {n} rows",
                    bits.len()
                )));
            }
        }
        for (row, v) in vectors.chunks_exact(d).enumerate() {
            let norm = l2_norm(v);
            if !norm.is_finite() || (norm - 1.0).abs() > NORM_TOLERANCE {
                return Err(StoreError::NotNormalized { row, norm });
            }
        }
        Ok(Self {
            n,
            d,
            vectors,
            ids,
            id_index,
            oracle_labels,
            payloads: None,
        })
    }

    /// Attaches one opaque payload URI per row.
    pub fn with_payloads(mut self, payloads: Vec<String>) -> Result<Self, StoreError> {
        if payloads.len() != self.n {
            return Err(StoreError::Shape(format!(
                "{} payloads for {} rows",
                payloads.len(),
                self.n
            )));
        }
        self.payloads = Some(payloads);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn id(&self, row: usize) -> &str {
        &self.ids[row]
    }

    pub fn row_of(&self, id: &str) -> Option<usize> {
        self.id_index.get(id).copied()
    }

    pub fn payload(&self, row: usize) -> Option<&str> {
        self.payloads.as_ref().map(|p| p[row].as_str())
    }

    pub fn concepts(&self) -> impl Iterator<Item = &str> {
        self.oracle_labels.keys().map(String::as_str)
    }

    pub fn concept_labels(&self, concept: &str) -> Option<&BitVec> {
        self.oracle_labels.get(concept)
    }

    pub fn positives(&self, concept: &str) -> Result<Vec<usize>, StoreError> {
        self.concept_labels(concept)
            .map(|bits| bits.iter_ones().collect())
            .ok_or_else(|| StoreError::UnknownConcept(concept.to_string()))
    }
}

pub(crate) fn l2_norm(v: &[f32]) -> f32 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt() as f32
}

/// Normalizes every row in place; fails on an all-zero row.
pub fn normalize_rows(vectors: &mut [f32], d: usize) -> Result<(), StoreError> {
    for (row, v) in vectors.chunks_exact_mut(d).enumerate() {
        let norm = l2_norm(v);
        if norm == 0.0 || !norm.is_finite() {
            return Err(StoreError::ZeroNorm(row));
        }
        for x in v.iter_mut() {
            *x /= norm;
        }
    }
    Ok(())
}

pub fn write_vectors(path: &Path, n: usize, d: usize, vectors: &[f32]) -> Result<(), StoreError> {
    if vectors.len() != n * d {
        return Err(StoreError::Shape(format!(
            "{} floats for {n}x{d}",
            vectors.len()
        )));
    }
    let n32 = u32::try_from(n).map_err(|_| StoreError::Shape("n exceeds u32".into()))?;
    let d32 = u32::try_from(d).map_err(|_| StoreError::Shape("d exceeds u32".into()))?;
    let mut buf = Vec::with_capacity(VECTOR_HEADER_LEN + vectors.len() * 4);
    buf.extend_from_slice(VECTOR_MAGIC);
    buf.extend_from_slice(&n32.to_le_bytes());
    buf.extend_from_slice(&d32.to_le_bytes());
    // reserved u64 plus four bytes of padding up to the fixed header size
    buf.extend_from_slice(&[0u8; VECTOR_HEADER_LEN - 12]);
    for x in vectors {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf).map_err(io_err(path))
}

/// Reads a vector file, returning `(n, d, row-major floats)`.
pub fn read_vectors(path: &Path) -> Result<(usize, usize, Vec<f32>), StoreError> {
    let mut file = fs::File::open(path).map_err(io_err(path))?;
    let mut header = [0u8; VECTOR_HEADER_LEN];
    file.read_exact(&mut header)
        .map_err(|_| StoreError::Header(format!("{} is shorter than the header", path.display())))?;
    if &header[0..4] != VECTOR_MAGIC {
        return Err(StoreError::Header(format!(
            "bad magic {:?} in {}",
            &header[0..4],
            path.display()
        )));
    }
    let n = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    file.read_to_end(&mut body).map_err(io_err(path))?;
    if body.len() != n * d * 4 {
        return Err(StoreError::Shape(format!(
            "header says {n}x{d} but body holds {} bytes",
            body.len()
        )));
    }
    let vectors = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((n, d, vectors))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ConceptEntry {
    pub name: String,
    pub positives: PathBuf,
}

/// JSON manifest describing a dataset on disk. Relative paths resolve against
/// the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct Manifest {
    pub vectors: PathBuf,
    pub ids: PathBuf,
    #[serde(default)]
    pub concepts: Vec<ConceptEntry>,
    #[serde(default)]
    pub normalize: bool,
    /// One opaque URI per line, aligned with `ids`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub payloads: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<String>, StoreError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(io_err(path))?;
        let line = line.trim_end_matches('\r');
        if !line.is_empty() {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

pub fn load_dataset(manifest_path: &Path) -> Result<EmbeddingDataset, StoreError> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| StoreError::Manifest {
        path: manifest_path.to_path_buf(),
        source,
    })?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let (n, d, mut vectors) = read_vectors(&resolve(&manifest.vectors))?;
    if manifest.normalize {
        normalize_rows(&mut vectors, d.max(1))?;
    }
    let ids = read_lines(&resolve(&manifest.ids))?;
    if ids.len() != n {
        return Err(StoreError::Shape(format!(
            "vector file has {n} rows but id file has {}",
            ids.len()
        )));
    }
    let mut id_index = HashMap::with_capacity(n);
    for (row, id) in ids.iter().enumerate() {
        if id_index.insert(id.as_str(), row).is_some() {
            return Err(StoreError::DuplicateId(id.clone()));
        }
    }
    let mut labels = BTreeMap::new();
    for concept in &manifest.concepts {
        let mut bits = bitvec![0; n];
        for id in read_lines(&resolve(&concept.positives))? {
            let row = *id_index.get(id.as_str()).ok_or_else(|| StoreError::UnknownId {
                concept: concept.name.clone(),
                id: id.clone(),
            })?;
            bits.set(row, true);
        }
        labels.insert(concept.name.clone(), bits);
    }
    drop(id_index);
    let dataset = EmbeddingDataset::new(d, vectors, ids, labels)?;
    match &manifest.payloads {
        Some(p) => dataset.with_payloads(read_lines(&resolve(p))?),
        None => Ok(dataset),
    }
}

/// Writes `<dir>/<stem>.sev`, `<stem>.ids`, one positives file per concept
/// and `<stem>.json`; returns the manifest path.
pub fn save_dataset(dataset: &EmbeddingDataset, dir: &Path, stem: &str) -> Result<PathBuf, StoreError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let vec_name = format!("{stem}.sev");
    write_vectors(&dir.join(&vec_name), dataset.len(), dataset.dim(), dataset.vectors())?;

    let ids_name = format!("{stem}.ids");
    write_lines(&dir.join(&ids_name), dataset.ids().iter().map(String::as_str))?;

    let mut concepts = Vec::new();
    for (name, bits) in &dataset.oracle_labels {
        let file = format!("{stem}.{name}.pos");
        write_lines(&dir.join(&file), bits.iter_ones().map(|r| dataset.id(r)))?;
        concepts.push(ConceptEntry {
            name: name.clone(),
            positives: PathBuf::from(file),
        });
    }
    let payloads = match &dataset.payloads {
        Some(p) => {
            let file = format!("{stem}.payloads");
            write_lines(&dir.join(&file), p.iter().map(String::as_str))?;
            Some(PathBuf::from(file))
        }
        None => None,
    };
    let manifest = Manifest {
        vectors: PathBuf::from(vec_name),
        ids: PathBuf::from(ids_name),
        concepts,
        normalize: false,
        payloads,
    };
    let path = dir.join(format!("{stem}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn write_lines<'a>(path: &Path, lines: impl Iterator<Item = &'a str>) -> Result<(), StoreError> {
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

/// How to draw the initial labeled set for one concept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSpec {
    pub concept: String,
    #[serde(default = "SeedSpec::default_positives")]
    pub num_positives: usize,
    #[serde(default = "SeedSpec::default_ratio")]
    pub negative_ratio: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

impl SeedSpec {
    fn default_positives() -> usize {
        5
    }

    fn default_ratio() -> usize {
        19
    }

    pub fn new(concept: impl Into<String>, rng_seed: u64) -> Self {
        Self {
            concept: concept.into(),
            num_positives: Self::default_positives(),
            negative_ratio: Self::default_ratio(),
            rng_seed,
        }
    }

    pub fn size(&self) -> usize {
        self.num_positives * (1 + self.negative_ratio)
    }
}

/// The labeled set `L_r` in labeling order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSet {
    pub concept: String,
    entries: Vec<(usize, Label)>,
    #[serde(skip)]
    members: RowSet,
}

impl LabeledSet {
    pub fn new(concept: impl Into<String>) -> Self {
        Self {
            concept: concept.into(),
            entries: Vec::new(),
            members: RowSet::new(),
        }
    }

    pub fn from_entries(
        concept: impl Into<String>,
        entries: impl IntoIterator<Item = (usize, Label)>,
    ) -> Result<Self, StoreError> {
        let mut set = Self::new(concept);
        for (row, label) in entries {
            set.push(row, label)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, row: usize, label: Label) -> Result<(), StoreError> {
        if !self.members.insert(row) {
            return Err(StoreError::AlreadyLabeled(row));
        }
        self.entries.push((row, label));
        Ok(())
    }

    pub fn entries(&self) -> &[(usize, Label)] {
        &self.entries
    }

    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|(r, _)| *r)
    }

    pub fn contains(&self, row: usize) -> bool {
        self.members.contains(row)
    }

    pub fn members(&self) -> &RowSet {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Count of positive labels, i.e. the active-search utility.
    pub fn positives(&self) -> usize {
        self.entries.iter().filter(|(_, l)| l.is_positive()).count()
    }

    /// Rebuilds the membership index after deserialization.
    pub fn reindex(&mut self) {
        self.members = self.entries.iter().map(|(r, _)| *r).collect();
    }
}

/// Draws `num_positives` positives and `num_positives * negative_ratio`
/// negatives uniformly without replacement. Rows outside the concept's
/// positive list count as negatives.
pub fn build_seed(dataset: &EmbeddingDataset, spec: &SeedSpec) -> Result<LabeledSet, StoreError> {
    if spec.num_positives == 0 {
        return Err(StoreError::InvalidSeed("num_positives must be at least 1".into()));
    }
    let bits = dataset
        .concept_labels(&spec.concept)
        .ok_or_else(|| StoreError::UnknownConcept(spec.concept.clone()))?;
    let positives: Vec<usize> = bits.iter_ones().collect();
    let negatives: Vec<usize> = bits.iter_zeros().collect();
    if positives.len() < spec.num_positives {
        return Err(StoreError::InsufficientPositives {
            concept: spec.concept.clone(),
            available: positives.len(),
            requested: spec.num_positives,
        });
    }
    let num_negatives = spec.num_positives * spec.negative_ratio;
    if negatives.len() < num_negatives {
        return Err(StoreError::InsufficientNegatives {
            concept: spec.concept.clone(),
            available: negatives.len(),
            requested: num_negatives,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let pos = sample(&mut rng, positives.len(), spec.num_positives);
    let neg = sample(&mut rng, negatives.len(), num_negatives);
    let entries = pos
        .iter()
        .map(|i| (positives[i], Label::Positive))
        .chain(neg.iter().map(|i| (negatives[i], Label::Negative)));
    LabeledSet::from_entries(spec.concept.clone(), entries)
}
