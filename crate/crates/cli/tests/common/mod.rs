#![allow(dead_code)]

use std::path::{Path, PathBuf};

use serde_json::{json, Value};

/// Small synthetic corpus: 2,000 rows, 2 concepts of 40 positives.
pub fn small_synthetic() -> Value {
    json!({
        "n": 2000,
        "d": 8,
        "num_concepts": 2,
        "prevalence": 0.02,
        "rng_seed": 7
    })
}

pub fn write_config(dir: &Path, name: &str, config: &Value) -> PathBuf {
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(config).unwrap()).unwrap();
    path
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seals")
}
