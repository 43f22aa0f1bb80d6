use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use adapert::data::{compute_degs, effect_size_strata, load_expression, DegOptions};
use adapert::graph::load_edge_list;
use adapert::model::load_checkpoint;
use serde_json::Value;
use tempfile::TempDir;

const SMALL: &str = r#"
[synth]
n_genes = 40
n_perturbations = 8
cells_per_condition = 6
module_size = 10
embedding_dim = 8

[data]
fallback_embedding_dim = 8

[model]
structural_dim = 4
latent_dim = 6
score_dim = 4
hidden_dim = 8
selection_mode = "top_m"
top_m = 3

[train]
max_epochs = 2
batch_size = 4
patience = 0
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_adapert"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn adapert")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "adapert {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Fixture {
    _tmp: TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = TempDir::new().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, SMALL).unwrap();
        let data = root.join("data");
        ok(&["synth", "--config", s(&config), "--seed", "3", "--out", s(&data)]);
        Fixture {
            _tmp: tmp,
            root,
            config,
            data,
        }
    }

    fn input_flags(&self) -> Vec<String> {
        vec![
            "--config".into(),
            s(&self.config).into(),
            "--expression".into(),
            s(&self.data.join("expression.csv")).into(),
            "--graph".into(),
            s(&self.data.join("graph.tsv")).into(),
            "--embeddings".into(),
            s(&self.data.join("embeddings.csv")).into(),
        ]
    }

    fn cmd(&self, sub: &str, out: &Path, extra: &[&str]) -> Vec<String> {
        let mut v = vec![sub.to_string()];
        v.extend(self.input_flags());
        v.push("--out".into());
        v.push(s(out).into());
        v.extend(extra.iter().map(|x| x.to_string()));
        v
    }

    fn train(&self, name: &str, extra: &[&str]) -> PathBuf {
        let out = self.root.join(name);
        let args = self.cmd("train", &out, extra);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
        out
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_files_parse_back() {
    let f = Fixture::new();
    let ds = load_expression(f.data.join("expression.csv")).unwrap();
    assert_eq!(ds.gene_count(), 40);
    assert_eq!(ds.perturbation_count(), 8);
    let g = load_edge_list(f.data.join("graph.tsv"), ds.vocab()).unwrap();
    assert_eq!(g.dropped, 0);
    assert!(g.graph.edge_count() > 0);
    assert!(f.data.join("config.toml").exists());
}

#[test]
fn synth_is_byte_identical_for_a_seed() {
    let f = Fixture::new();
    let again = f.root.join("again");
    ok(&["synth", "--config", s(&f.config), "--seed", "3", "--out", s(&again)]);
    for name in ["expression.csv", "graph.tsv", "embeddings.csv", "manifest.json"] {
        assert_eq!(fs::read(f.data.join(name)).unwrap(), fs::read(again.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn zero_noise_manifest_matches_called_degs() {
    let f = Fixture::new();
    let cfg = f.root.join("quiet.toml");
    fs::write(&cfg, SMALL.replace("[synth]\n", "[synth]\nnoise_sigma = 0.0\n")).unwrap();
    let out = f.root.join("quiet");
    ok(&["synth", "--config", s(&cfg), "--seed", "5", "--out", s(&out)]);
    let ds = load_expression(out.join("expression.csv")).unwrap();
    let table = compute_degs(&ds, &DegOptions::default()).unwrap();
    let manifest = json(&out.join("manifest.json"));
    for (name, entry) in &table.perturbations {
        let planted: Vec<&str> = manifest["perturbations"][name]["degs"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap())
            .collect();
        let called: Vec<&str> = entry.degs().into_iter().map(|i| ds.vocab().name(i)).collect();
        assert_eq!(called, planted, "{name}");
    }
}

#[test]
fn one_epoch_smoke_run_writes_a_readable_checkpoint() {
    let f = Fixture::new();
    let out = f.train("smoke", &["--max-epochs", "1"]);
    let (manifest, model) = load_checkpoint(&out).unwrap();
    assert_eq!(manifest.vocab.len(), 40);
    assert_eq!(model.dims.genes, 40);
    let history = json(&out.join("history.json"));
    assert_eq!(history["epochs"].as_array().unwrap().len(), 1);
    assert!(out.join("config.toml").exists());
}

#[test]
fn missing_graph_file_is_reported_by_path() {
    let f = Fixture::new();
    let missing = f.root.join("nowhere").join("graph.tsv");
    let out = run(&[
        "train",
        "--config",
        s(&f.config),
        "--expression",
        s(&f.data.join("expression.csv")),
        "--graph",
        s(&missing),
        "--out",
        s(&f.root.join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn ablation_flag_is_recorded_in_history() {
    let f = Fixture::new();
    let out = f.train("nonon", &["--ablation", "no_non_deg"]);
    let h = json(&out.join("history.json"));
    assert_eq!(h["lambda_non"].as_f64(), Some(0.0));
    assert_eq!(h["ablation"].as_str(), Some("no_non_deg"));
}

#[test]
fn invalid_config_exits_with_usage_code() {
    let tmp = TempDir::new().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "[train]\nepochs = 3\n").unwrap();
    let out = run(&["synth", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let out = run(&["train", "--out", s(tmp.path())]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn oracle_evaluation_is_perfect() {
    let f = Fixture::new();
    let out = f.root.join("oracle");
    let args = f.cmd("eval", &out, &["--oracle"]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let m = json(&out.join("metrics.json"));
    for metric in ["pearson_delta", "pds", "des_fdr"] {
        let mean = m["overall"][metric]["mean"].as_f64().unwrap();
        assert!((mean - 1.0).abs() < 1e-12, "{metric} = {mean}");
    }
}

#[test]
fn eval_is_deterministic_and_strata_agree() {
    let f = Fixture::new();
    let ckpt = f.train("model", &[]);
    let (a, b) = (f.root.join("eval_a"), f.root.join("eval_b"));
    for out in [&a, &b] {
        let args = f.cmd("eval", out, &["--checkpoint", s(&ckpt)]);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    }
    assert_eq!(fs::read(a.join("metrics.json")).unwrap(), fs::read(b.join("metrics.json")).unwrap());

    let (manifest, _) = load_checkpoint(&ckpt).unwrap();
    let test = manifest.split.unwrap().test;
    let ds = load_expression(f.data.join("expression.csv")).unwrap();
    let table = adapert::data::compute_degs_for(&ds, &test, &DegOptions::default()).unwrap();
    let strata = effect_size_strata(&table);
    let m = json(&a.join("metrics.json"));
    for name in &test {
        assert_eq!(
            m["per_perturbation"][name]["stratum"].as_str(),
            Some(strata[name].as_str()),
            "{name}"
        );
        assert!(a.join(format!("scatter_{name}.csv")).exists());
    }
}

#[test]
fn train_is_byte_identical_for_a_seed() {
    let f = Fixture::new();
    let a = f.train("det_a", &["--seed", "11"]);
    let b = f.train("det_b", &["--seed", "11"]);
    for name in ["history.json", "checkpoint.json", "checkpoint.bin"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

#[test]
fn predict_writes_profiles_and_subgraphs() {
    let f = Fixture::new();
    let ckpt = f.train("model", &[]);
    let out = f.root.join("pred");
    let ds = load_expression(f.data.join("expression.csv")).unwrap();
    let pert = ds.perturbation_names()[0].clone();
    let args = f.cmd("predict", &out, &["--checkpoint", s(&ckpt), "--perturbation", &pert]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let csv = fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 2);
    assert!(csv.lines().nth(1).unwrap().starts_with(&pert));
    let sub = json(&out.join("subgraphs.json"));
    let selected = sub[&pert]["selected"].as_array().unwrap();
    assert!(selected.iter().any(|g| g.as_str() == Some(pert.as_str())));
}

#[test]
fn graph_stats_match_hand_counts() {
    let tmp = TempDir::new().unwrap();
    // Path a-b-c-d-e with weights rising along the path.
    let g = tmp.path().join("path.tsv");
    fs::write(&g, "a\tb\t0.1\nb\tc\t0.2\nc\td\t0.3\nd\te\t0.4\n").unwrap();
    let out = tmp.path().join("stats");
    ok(&["graph-stats", "--graph", s(&g), "--out", s(&out)]);
    let r = json(&out.join("graph_stats.json"));
    assert_eq!(r["original"]["nodes"].as_u64(), Some(5));
    assert_eq!(r["original"]["edges"].as_u64(), Some(4));
    assert_eq!(r["original"]["mean_degree"].as_f64(), Some(1.6));
    assert_eq!(r["original"]["median_degree"].as_u64(), Some(2));
    assert_eq!(r["original"]["max_degree"].as_u64(), Some(2));
    assert!(r["filtered"].is_null());

    let cfg = tmp.path().join("k1.toml");
    fs::write(&cfg, "[graph]\ntop_k = 1\n").unwrap();
    ok(&["graph-stats", "--config", s(&cfg), "--graph", s(&g), "--out", s(&out)]);
    let r = json(&out.join("graph_stats.json"));
    // Top-1 nominations: a→b, b→c, c→d, d→e, e→d; each edge has at least one.
    assert_eq!(r["filtered"]["stats"]["edges"].as_u64(), Some(4));
    assert_eq!(r["filtered"]["nominations_within_k"].as_bool(), Some(true));

    fs::write(&cfg, "[graph]\ntop_k = 1\ntopk_mode = \"mutual\"\n").unwrap();
    ok(&["graph-stats", "--config", s(&cfg), "--graph", s(&g), "--out", s(&out)]);
    let r = json(&out.join("graph_stats.json"));
    // Only d–e is nominated from both ends.
    assert_eq!(r["filtered"]["stats"]["edges"].as_u64(), Some(1));
    assert_eq!(r["filtered"]["nominations_within_k"].as_bool(), Some(true));
}

#[test]
fn deg_coverage_grows_with_hops() {
    let f = Fixture::new();
    let out = f.root.join("cov");
    let args = f.cmd("deg-coverage", &out, &[]);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
    let r = json(&out.join("deg_coverage.json"));
    let by_hop: Vec<f64> = r["mean_by_hop"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(by_hop.len(), 5);
    for w in by_hop.windows(2) {
        assert!(w[1] >= w[0], "{by_hop:?}");
    }
    assert!(by_hop[1] > by_hop[0]);
}
