//! One function per subcommand. Each reads a resolved [`RunConfig`] and
//! writes its outputs under the configured output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use adapert::data::{
    compute_degs, load_embeddings, load_expression, pseudobulk_of, split_by_perturbation,
    synth_generate, PerturbationDataset, SemanticEmbeddings, SplitSpec,
};
use adapert::graph::{
    degree_stats, edge_list_vocab, load_edge_list, nominations, topk_filter_with, write_edge_list,
    DegreeStats, GeneVocab, KnowledgeGraph, TopkMode,
};
use adapert::model::{
    forward, load_checkpoint, save_checkpoint, CheckpointManifest, Mode, Model, ModelInputs,
    Prediction,
};
use adapert::pipeline::{evaluate, Predictor};
use adapert::metrics::MetricsReport;
use adapert::training::{self, TrainHistory};
use adapert::{Error, Result};
use log::{info, warn};
use serde::Serialize;

use crate::config::{io_error, RunConfig};

pub const EXPRESSION_FILE: &str = "expression.csv";
pub const GRAPH_FILE: &str = "graph.tsv";
pub const EMBEDDINGS_FILE: &str = "embeddings.csv";
pub const SYNTH_MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SUBGRAPHS_FILE: &str = "subgraphs.json";
pub const GRAPH_STATS_FILE: &str = "graph_stats.json";
pub const FILTERED_GRAPH_FILE: &str = "graph_filtered.tsv";
pub const DEG_COVERAGE_FILE: &str = "deg_coverage.json";

fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir()?.to_path_buf();
    fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
    cfg.write_effective(&dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn required<'a>(path: &'a Option<PathBuf>, key: &str, flag: &str) -> Result<&'a Path> {
    path.as_deref()
        .ok_or_else(|| Error::Usage(format!("no {key} given: set paths.{key} or pass {flag}")))
}

/// Expression data, the (optionally filtered) graph and embeddings.
pub struct Inputs {
    pub dataset: PerturbationDataset,
    pub graph: KnowledgeGraph,
    pub embeddings: SemanticEmbeddings,
}

fn load_graph(cfg: &RunConfig, vocab: &GeneVocab) -> Result<KnowledgeGraph> {
    let path = required(&cfg.paths.graph, "graph", "--graph")?;
    let load = load_edge_list(path, vocab)?;
    if load.dropped > 0 {
        warn!("{}: skipped {} edge(s) naming genes outside the expression data", path.display(), load.dropped);
    }
    match cfg.graph.top_k {
        Some(k) => topk_filter_with(&load.graph, k, cfg.graph.topk_mode),
        None => Ok(load.graph),
    }
}

pub fn load_inputs(cfg: &RunConfig, embedding_dim: usize) -> Result<Inputs> {
    let dataset = load_expression(required(&cfg.paths.expression, "expression", "--expression")?)?;
    let graph = load_graph(cfg, dataset.vocab())?;
    let embeddings = match &cfg.paths.embeddings {
        Some(p) => load_embeddings(p, dataset.vocab(), embedding_dim)?,
        None => SemanticEmbeddings::hashed(dataset.vocab(), embedding_dim),
    };
    Ok(Inputs {
        dataset,
        graph,
        embeddings,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SynthFiles {
    pub expression: PathBuf,
    pub graph: PathBuf,
    pub embeddings: PathBuf,
    pub manifest: PathBuf,
}

pub fn synth(cfg: &RunConfig) -> Result<SynthFiles> {
    let dir = prepare_out(cfg)?;
    let out = synth_generate(&cfg.synth, cfg.seed)?;
    let files = SynthFiles {
        expression: dir.join(EXPRESSION_FILE),
        graph: dir.join(GRAPH_FILE),
        embeddings: dir.join(EMBEDDINGS_FILE),
        manifest: dir.join(SYNTH_MANIFEST_FILE),
    };
    out.dataset.save(&files.expression)?;
    write_edge_list(&files.graph, &out.graph, out.dataset.vocab())?;
    out.embeddings.save(&files.embeddings, out.dataset.vocab())?;
    write_json(&files.manifest, &out.manifest)?;
    info!(
        "wrote {} genes, {} perturbations, {} edges to {}",
        out.dataset.gene_count(),
        out.dataset.perturbation_count(),
        out.graph.edge_count(),
        dir.display()
    );
    Ok(files)
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub history: TrainHistory,
    pub split: SplitSpec,
    pub out: PathBuf,
}

pub fn train(cfg: &RunConfig) -> Result<TrainRun> {
    let dir = prepare_out(cfg)?;
    let inputs = load_inputs(cfg, cfg.data.fallback_embedding_dim)?;
    let split = split_by_perturbation(&inputs.dataset, cfg.data.split, cfg.seed)?;
    let tc = cfg.train_config();
    let out = training::train(&inputs.dataset, &split, &inputs.graph, &inputs.embeddings, &tc)?;
    let manifest = CheckpointManifest::for_model(
        &out.model,
        cfg.seed,
        inputs.dataset.vocab().names().to_vec(),
        Some(split.clone()),
        Some(out.huber_delta),
    );
    save_checkpoint(&dir, &manifest, &out.model.params)?;
    write_text(&dir.join(HISTORY_FILE), &(out.history.to_json()? + "\n"))?;
    info!(
        "best validation Pearson-delta {:.4} at epoch {}",
        out.history.best_val_pearson_delta, out.history.best_epoch
    );
    Ok(TrainRun {
        history: out.history,
        split,
        out: dir,
    })
}

/// A checkpointed model together with inputs that match it.
struct Loaded {
    manifest: CheckpointManifest,
    model: Model,
    inputs: Inputs,
    model_inputs: ModelInputs,
}

fn load_trained(cfg: &RunConfig) -> Result<Loaded> {
    let ckpt = required(&cfg.paths.checkpoint, "checkpoint", "--checkpoint")?;
    let (manifest, model) = load_checkpoint(ckpt)?;
    let inputs = load_inputs(cfg, model.dims.semantic_dim)?;
    if inputs.dataset.vocab().names() != manifest.vocab.as_slice() {
        return Err(Error::Data(format!(
            "checkpoint {} was trained on a different gene vocabulary",
            ckpt.display()
        )));
    }
    if inputs.embeddings.dim() != model.dims.semantic_dim {
        return Err(Error::Data(format!(
            "embeddings have width {}, checkpoint expects {}",
            inputs.embeddings.dim(),
            model.dims.semantic_dim
        )));
    }
    let control = pseudobulk_of(&inputs.dataset, &[])?.control;
    let model_inputs = ModelInputs::new(
        inputs.dataset.vocab(),
        &inputs.graph,
        &inputs.embeddings,
        control,
        model.config.weighted_aggregation,
    )?;
    Ok(Loaded {
        manifest,
        model,
        inputs,
        model_inputs,
    })
}

/// Test perturbations: from the checkpoint when there is one, otherwise a
/// fresh split under the configured seed.
fn test_split(cfg: &RunConfig, manifest: Option<&CheckpointManifest>, dataset: &PerturbationDataset) -> Result<Vec<String>> {
    match manifest.and_then(|m| m.split.as_ref()) {
        Some(split) => Ok(split.test.clone()),
        None => Ok(split_by_perturbation(dataset, cfg.data.split, cfg.seed)?.test),
    }
}

/// Scores the checkpoint (or, with `oracle`, the observed profiles) on the
/// test split.
pub fn eval(cfg: &RunConfig, oracle: bool) -> Result<MetricsReport> {
    let dir = prepare_out(cfg)?;
    let deg = cfg.data.deg_options();
    let output = if oracle {
        let inputs = load_inputs(cfg, cfg.data.fallback_embedding_dim)?;
        let manifest = match &cfg.paths.checkpoint {
            Some(p) => Some(load_checkpoint(p)?.0),
            None => None,
        };
        let perts = test_split(cfg, manifest.as_ref(), &inputs.dataset)?;
        let out = evaluate(&inputs.dataset, &perts, Predictor::Oracle, &deg, &cfg.metrics)?;
        out.write_scatters(&dir, &inputs.dataset)?;
        out
    } else {
        let l = load_trained(cfg)?;
        let perts = test_split(cfg, Some(&l.manifest), &l.inputs.dataset)?;
        let predictor = Predictor::Model {
            model: &l.model,
            inputs: &l.model_inputs,
        };
        let out = evaluate(&l.inputs.dataset, &perts, predictor, &deg, &cfg.metrics)?;
        out.write_scatters(&dir, &l.inputs.dataset)?;
        out
    };
    write_text(&dir.join(METRICS_FILE), &(output.report.to_json()? + "\n"))?;
    Ok(output.report)
}

#[derive(Clone, Debug, Serialize)]
struct SubgraphRecord {
    selected: Vec<String>,
    alpha: Vec<f64>,
}

/// Eval-mode predictions for `perturbations`, or the test split when empty.
pub fn predict(cfg: &RunConfig, perturbations: &[String]) -> Result<Vec<Prediction>> {
    let dir = prepare_out(cfg)?;
    let l = load_trained(cfg)?;
    let perts = if perturbations.is_empty() {
        test_split(cfg, Some(&l.manifest), &l.inputs.dataset)?
    } else {
        perturbations.to_vec()
    };
    let preds = forward(&l.model, &l.model_inputs, &perts, &Mode::Eval)?;
    let vocab = l.inputs.dataset.vocab();

    let path = dir.join(PREDICTIONS_FILE);
    let file = fs::File::create(&path).map_err(|e| io_error(&path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| io_error(&path, e);
    write!(w, "perturbation").map_err(io)?;
    for g in vocab.names() {
        write!(w, ",{g}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for p in &preds {
        write!(w, "{}", p.perturbation).map_err(io)?;
        for v in &p.x_hat {
            write!(w, ",{v}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let subgraphs: BTreeMap<&str, SubgraphRecord> = preds
        .iter()
        .filter_map(|p| {
            p.selection.as_ref().map(|s| {
                let rec = SubgraphRecord {
                    selected: s.selected.iter().map(|&i| vocab.name(i).to_string()).collect(),
                    alpha: s.alpha.clone(),
                };
                (p.perturbation.as_str(), rec)
            })
        })
        .collect();
    write_json(&dir.join(SUBGRAPHS_FILE), &subgraphs)?;
    Ok(preds)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TopkReport {
    pub k: usize,
    pub mode: TopkMode,
    pub stats: DegreeStats,
    /// Every kept edge is nominated as required by `mode`, and no node
    /// nominates more than `k` kept edges.
    pub nominations_within_k: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GraphStatsReport {
    pub genes_in_vocab: usize,
    pub dropped_edges: usize,
    pub original: DegreeStats,
    pub filtered: Option<TopkReport>,
}

fn nominations_within_k(original: &KnowledgeGraph, filtered: &KnowledgeGraph, k: usize, mode: TopkMode) -> bool {
    let noms = nominations(original, k);
    let nominated = |u: usize, v: usize| noms[u].binary_search(&v).is_ok();
    let edges_ok = filtered.edges().all(|(u, v, _)| match mode {
        TopkMode::Union => nominated(u, v) || nominated(v, u),
        TopkMode::Mutual => nominated(u, v) && nominated(v, u),
    });
    let bound_ok = (0..filtered.node_count()).all(|u| {
        filtered.neighbors(u).iter().filter(|&&v| nominated(u, v)).count() <= k
    });
    edges_ok && bound_ok
}

/// Degree statistics of the graph before and after top-k filtering. Uses the
/// expression vocabulary when one is configured, else every gene in the edge
/// list.
pub fn graph_stats(cfg: &RunConfig) -> Result<GraphStatsReport> {
    let dir = prepare_out(cfg)?;
    let path = required(&cfg.paths.graph, "graph", "--graph")?;
    let vocab = match &cfg.paths.expression {
        Some(p) => load_expression(p)?.vocab().clone(),
        None => edge_list_vocab(path)?,
    };
    let load = load_edge_list(path, &vocab)?;
    let filtered = match cfg.graph.top_k {
        Some(k) => {
            let g = topk_filter_with(&load.graph, k, cfg.graph.topk_mode)?;
            write_edge_list(dir.join(FILTERED_GRAPH_FILE), &g, &vocab)?;
            Some(TopkReport {
                k,
                mode: cfg.graph.topk_mode,
                stats: degree_stats(&g),
                nominations_within_k: nominations_within_k(&load.graph, &g, k, cfg.graph.topk_mode),
            })
        }
        None => None,
    };
    let report = GraphStatsReport {
        genes_in_vocab: vocab.len(),
        dropped_edges: load.dropped,
        original: degree_stats(&load.graph),
        filtered,
    };
    write_json(&dir.join(GRAPH_STATS_FILE), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CoverageReport {
    /// Mean coverage at hop `h` for `h = 0..=max_hops`; hop 0 counts only
    /// the perturbed gene itself.
    pub mean_by_hop: Vec<f64>,
    pub per_perturbation: BTreeMap<String, Vec<f64>>,
    /// Perturbations skipped for an empty DEG set or an unknown target gene.
    pub skipped: Vec<String>,
}

/// Fraction of each perturbation's DEGs within `h` graph hops of its target.
pub fn deg_coverage(cfg: &RunConfig) -> Result<CoverageReport> {
    let dir = prepare_out(cfg)?;
    let dataset = load_expression(required(&cfg.paths.expression, "expression", "--expression")?)?;
    let graph = load_graph(cfg, dataset.vocab())?;
    let table = compute_degs(&dataset, &cfg.data.deg_options())?;
    let hops = cfg.graph.max_hops;
    let mut per = BTreeMap::new();
    let mut skipped = Vec::new();
    for (name, entry) in &table.perturbations {
        let degs = entry.degs();
        let Some(src) = dataset.vocab().index_of(name) else {
            skipped.push(name.clone());
            continue;
        };
        if degs.is_empty() {
            skipped.push(name.clone());
            continue;
        }
        let hop0 = if degs.contains(&src) { 1.0 } else { 0.0 } / degs.len() as f64;
        let mut cov = vec![hop0];
        cov.extend(adapert::graph::deg_coverage(&graph, src, &degs, hops)?);
        per.insert(name.clone(), cov);
    }
    let mean_by_hop = (0..=hops)
        .map(|h| {
            if per.is_empty() {
                0.0
            } else {
                per.values().map(|c: &Vec<f64>| c[h]).sum::<f64>() / per.len() as f64
            }
        })
        .collect();
    let report = CoverageReport {
        mean_by_hop,
        per_perturbation: per,
        skipped,
    };
    write_json(&dir.join(DEG_COVERAGE_FILE), &report)?;
    Ok(report)
}
