mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::Command;

use common::{bin, small_synthetic, write_config};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seals_core::store::{save_dataset, EmbeddingDataset};
use serde_json::{json, Value};

fn run_config(strategies: &[&str]) -> Value {
    json!({
        "schema_version": 1,
        "dataset": { "synthetic": small_synthetic() },
        "strategies": strategies,
        "k": 10,
        "batch_size": 20,
        "budget": 160,
        "repetitions": 1,
        "rng_seed": 11,
        "timings": false
    })
}

fn seals(args: &[&str]) -> std::process::Output {
    Command::new(bin())
        .args(args)
        .env_remove("SEALS_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn read_dir_files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect()
}

#[test]
fn run_writes_lines_and_summary_for_each_experiment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &run_config(&["MaxEnt-All", "MaxEnt-SEALS"]));
    let out = tmp.path().join("out");
    let o = seals(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    let summary: Value = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    for name in ["MaxEnt-All", "MaxEnt-SEALS"] {
        let row = &summary[name];
        let map = row["mAP_mean"].as_f64().unwrap();
        assert!(map > 0.0 && map <= 1.0, "{name}: {row}");
        assert!(row["recall_mean"].as_f64().unwrap() > 0.0);
        assert_eq!(row["per_concept_ap"].as_object().unwrap().len(), 2);
    }
    let lines = fs::read_to_string(out.join("MaxEnt-SEALS.jsonl")).unwrap();
    let parsed: Vec<Value> = lines.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 2 concepts, rounds at 100, 120, 140, 160 labels
    assert_eq!(parsed.len(), 8);
    assert_eq!(parsed[3]["labeled"], 160);
    assert!(parsed.iter().all(|l| l["t_select_s"] == 0.0));
}

#[test]
fn fixed_seed_reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &run_config(&["MLP-SEALS", "Random-All", "ID-SEALS"]));
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let o = seals(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(read_dir_files(&out));
    }
    assert_eq!(outputs[0].len(), 4);
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn unknown_strategy_exits_with_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.json", &run_config(&["MaxEnt-All", "Entropy-SEALS"]));
    let o = seals(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("schema") && err.contains("Entropy"), "{err}");
}

#[test]
fn wrong_schema_version_exits_with_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut v = run_config(&["MaxEnt-All"]);
    v["schema_version"] = json!(9);
    let cfg = write_config(tmp.path(), "bad.json", &v);
    let o = seals(&["run", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn resume_reuses_checkpoints_and_rejects_corrupt_ones() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "run.json", &run_config(&["MaxEnt-SEALS"]));
    let out = tmp.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    assert!(seals(&args).status.success());
    let first = read_dir_files(&out);

    // a finished cell is restored rather than rerun
    let cp = out.join("checkpoints").join("MaxEnt-SEALS").join("concept_00__rep0.json");
    assert!(cp.exists());
    fs::remove_file(out.join("MaxEnt-SEALS.jsonl")).unwrap();
    assert!(seals(&args).status.success());
    assert_eq!(read_dir_files(&out), first);

    fs::write(&cp, b"{ not json").unwrap();
    let o = seals(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkpoint"));
}

#[test]
fn data_dir_env_supplies_the_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let spec = write_config(tmp.path(), "synth.json", &small_synthetic());
    let o = seals(&["synth", "--config", spec.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.json").exists());

    let mut v = run_config(&["MaxEnt-All"]);
    v.as_object_mut().unwrap().remove("dataset");
    let cfg = write_config(tmp.path(), "run.json", &v);
    let out = tmp.path().join("out");
    let args = ["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let missing = seals(&args);
    assert_eq!(missing.status.code(), Some(1));

    let o = Command::new(bin()).args(args).env("SEALS_DATA_DIR", &data).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));

    // the manifest dataset and the generated one give the same results
    let mut direct = run_config(&["MaxEnt-All"]);
    direct["timings"] = json!(false);
    let cfg2 = write_config(tmp.path(), "direct.json", &direct);
    let out2 = tmp.path().join("out2");
    assert!(seals(&["run", "--config", cfg2.to_str().unwrap(), "--out", out2.to_str().unwrap()])
        .status
        .success());
    assert_eq!(
        fs::read(out.join("MaxEnt-All.jsonl")).unwrap(),
        fs::read(out2.join("MaxEnt-All.jsonl")).unwrap()
    );
}

fn graph_config(dataset: &Path, concepts: &[&str], k: usize) -> Value {
    json!({
        "schema_version": 1,
        "dataset": { "manifest": dataset },
        "concepts": concepts,
        "graph": { "k": k }
    })
}

fn analyze(tmp: &Path, cfg: &Value) -> String {
    let path = write_config(tmp, "graph.json", cfg);
    let out = tmp.join("graph_out");
    let o = seals(&["analyze-graph", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    fs::read_to_string(out.join("structure.csv")).unwrap()
}

/// Random unit rows; each concept holds its listed rows.
fn planted_dataset(dir: &Path, n: usize, d: usize, concepts: &[(&str, Vec<usize>)], seed: u64) -> (EmbeddingDataset, std::path::PathBuf) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vectors = Vec::with_capacity(n * d);
    for _ in 0..n {
        let v: Vec<f32> = (0..d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        vectors.extend(v.iter().map(|x| x / norm));
    }
    let ids = (0..n).map(|i| format!("row{i}")).collect();
    let labels = concepts
        .iter()
        .map(|(name, rows)| {
            let mut bits = bitvec::bitvec![0; n];
            for &r in rows {
                bits.set(r, true);
            }
            (name.to_string(), bits)
        })
        .collect();
    let ds = EmbeddingDataset::new(d, vectors, ids, labels).unwrap();
    let manifest = save_dataset(&ds, dir, "planted").unwrap();
    (ds, manifest)
}

#[test]
fn analyze_graph_with_no_concepts_writes_only_the_header() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, manifest) = planted_dataset(tmp.path(), 20, 3, &[("a", vec![1, 2, 3])], 1);
    let csv = analyze(tmp.path(), &graph_config(&manifest, &[], 3));
    assert_eq!(csv, "concept,total_positives,lc_fraction,avg_shortest_path\n");
}

#[test]
fn analyze_graph_pair_is_one_component() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, manifest) = planted_dataset(tmp.path(), 20, 3, &[("pair", vec![4, 9])], 2);
    let csv = analyze(tmp.path(), &graph_config(&manifest, &["pair"], 1));
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[1], "pair,2,1.0,1.0");
}

/// Brute-force structure: k-NN by sorted f64 distances, union-find
/// components, Floyd-Warshall distances.
fn oracle_structure(ds: &EmbeddingDataset, concept: &str, k: usize) -> (usize, f64, Option<f64>) {
    let pos = ds.positives(concept).unwrap();
    let m = pos.len();
    let dist = |a: usize, b: usize| -> f64 {
        ds.row(pos[a])
            .iter()
            .zip(ds.row(pos[b]))
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let mut adj = vec![vec![false; m]; m];
    for a in 0..m {
        let mut others: Vec<usize> = (0..m).filter(|b| *b != a).collect();
        others.sort_by(|x, y| dist(a, *x).total_cmp(&dist(a, *y)).then(x.cmp(y)));
        for &b in others.iter().take(k) {
            adj[a][b] = true;
            adj[b][a] = true;
        }
    }
    let mut parent: Vec<usize> = (0..m).collect();
    fn find(p: &mut Vec<usize>, x: usize) -> usize {
        if p[x] != x {
            let r = find(p, p[x]);
            p[x] = r;
        }
        p[x]
    }
    for a in 0..m {
        for b in 0..m {
            if adj[a][b] {
                let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
                parent[ra] = rb;
            }
        }
    }
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for a in 0..m {
        *sizes.entry(find(&mut parent, a)).or_default() += 1;
    }
    // largest component, lowest member wins ties
    let top = *sizes.values().max().unwrap();
    let first = (0..m).find(|a| sizes[&find(&mut parent, *a)] == top).unwrap();
    let best = find(&mut parent, first);
    let lc: Vec<usize> = (0..m).filter(|a| find(&mut parent, *a) == best).collect();
    let inf = usize::MAX / 4;
    let mut fw = vec![vec![inf; m]; m];
    for a in 0..m {
        fw[a][a] = 0;
        for b in 0..m {
            if adj[a][b] {
                fw[a][b] = 1;
            }
        }
    }
    for via in 0..m {
        for a in 0..m {
            for b in 0..m {
                fw[a][b] = fw[a][b].min(fw[a][via] + fw[via][b]);
            }
        }
    }
    let avg = if lc.len() < 2 {
        None
    } else {
        let total: usize = lc.iter().flat_map(|a| lc.iter().map(move |b| (a, b))).map(|(a, b)| fw[*a][*b]).sum();
        Some(total as f64 / (lc.len() * (lc.len() - 1)) as f64)
    };
    (m, lc.len() as f64 / m as f64, avg)
}

#[test]
fn analyze_graph_matches_brute_force_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let concepts = vec![
        ("sparse", (0..300).step_by(7).collect::<Vec<_>>()),
        ("dense", (0..300).step_by(3).collect()),
        ("tiny", vec![5, 50, 150]),
    ];
    let (ds, manifest) = planted_dataset(tmp.path(), 300, 5, &concepts, 3);
    let names: Vec<&str> = concepts.iter().map(|c| c.0).collect();
    let k = 2;
    let csv = analyze(tmp.path(), &graph_config(&manifest, &names, k));
    let mut reader = csv::Reader::from_reader(csv.as_bytes());
    let rows: Vec<(String, usize, f64, Option<f64>)> = reader.deserialize().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 3);
    for (row, name) in rows.iter().zip(&names) {
        let (m, lc, avg) = oracle_structure(&ds, name, k);
        assert_eq!(&row.0, name);
        assert_eq!(row.1, m);
        assert_eq!(row.2, lc, "{name}");
        match (row.3, avg) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "{name}: {a} vs {b}"),
            (a, b) => assert_eq!(a, b, "{name}"),
        }
    }
}

fn theory(args: &[&str]) -> (Vec<Vec<f64>>, String) {
    let o = seals(&[&["theory"], args].concat());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8(o.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("round,chain,rho,w_err,queries_total"));
    let rows = lines
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect();
    (rows, String::from_utf8(o.stderr).unwrap())
}

#[test]
fn theory_default_converges() {
    let (rows, err) = theory(&[]);
    assert!(err.contains("converged: true"), "{err}");
    let last = rows.last().unwrap();
    assert!(last[3] <= 0.01);
}

#[test]
fn theory_loose_epsilon_spends_no_queries() {
    let (rows, err) = theory(&["--epsilon", "1.5"]);
    assert!(err.contains("queries: 0"), "{err}");
    assert!(rows.iter().all(|r| r[4] == 0.0));
}

#[test]
fn theory_project_anywhere_needs_no_more_queries() {
    let tmp = tempfile::tempdir().unwrap();
    let params = write_config(tmp.path(), "t.json", &json!({"d": 3, "gamma": 2.0, "delta": 0.05, "epsilon": 0.005}));
    let p = params.to_str().unwrap();
    let queries = |variant: &str| {
        let (rows, _) = theory(&["--config", p, "--variant", variant]);
        rows.last().unwrap()[4]
    };
    let nn = queries("nn-graph");
    let pa = queries("project-anywhere");
    assert!(pa <= nn, "{pa} > {nn}");
    assert!(nn > 0.0);
}
