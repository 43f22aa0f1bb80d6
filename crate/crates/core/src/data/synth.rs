//! Synthetic perturbation data with planted sparse responses.
//!
//! Genes are grouped into modules that are densely connected in the graph
//! and share an embedding direction. Each perturbation knocks down one
//! target gene and moves a planted DEG set drawn from the target's module,
//! nearest graph neighbors first. Every gene carries one fixed signed response,
//! so perturbations in the same module produce overlapping signatures.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{PerturbationDataset, SampleBlock};
use crate::data::deg::Stratum;
use crate::data::embeddings::{hash_embedding, SemanticEmbeddings};
use crate::error::{Error, Result};
use crate::graph::{hop_distances, GeneVocab, KnowledgeGraph};
use crate::numerics::Matrix;
use crate::seed::{rng_for, STREAM_SYNTH};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_genes: usize,
    pub n_perturbations: usize,
    pub cells_per_condition: usize,
    /// Planted DEG fraction for the small, medium and large strata.
    pub deg_fraction: [f64; 3],
    pub effect_magnitude: f64,
    pub noise_sigma: f64,
    pub module_size: usize,
    pub embedding_dim: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_genes: 200,
            n_perturbations: 40,
            cells_per_condition: 20,
            deg_fraction: [0.03, 0.07, 0.15],
            effect_magnitude: 0.5,
            noise_sigma: 0.1,
            module_size: 20,
            embedding_dim: 32,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Usage(format!("invalid synthetic config: {m}")));
        if self.n_genes < 20 {
            return bad(format!("n_genes = {} (need >= 20)", self.n_genes));
        }
        if self.n_perturbations < 4 || self.n_perturbations > self.n_genes {
            return bad(format!(
                "n_perturbations = {} (need 4..={})",
                self.n_perturbations, self.n_genes
            ));
        }
        if self.cells_per_condition < 4 {
            return bad(format!("cells_per_condition = {} (need >= 4)", self.cells_per_condition));
        }
        if self.deg_fraction.iter().any(|f| !(*f > 0.0 && *f <= 1.0)) {
            return bad(format!("deg_fraction {:?} outside (0, 1]", self.deg_fraction));
        }
        if !(self.effect_magnitude >= 0.0 && self.effect_magnitude.is_finite()) {
            return bad(format!("effect_magnitude = {}", self.effect_magnitude));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma = {}", self.noise_sigma));
        }
        if self.module_size < 2 {
            return bad(format!("module_size = {} (need >= 2)", self.module_size));
        }
        if self.embedding_dim == 0 {
            return bad("embedding_dim = 0".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedPerturbation {
    pub target: String,
    pub module: usize,
    pub stratum: Stratum,
    /// Planted DEG gene names in vocabulary order.
    pub degs: Vec<String>,
}

/// Ground truth written next to synthetic data files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub perturbations: BTreeMap<String, PlantedPerturbation>,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub dataset: PerturbationDataset,
    /// Planted DEG gene indices per perturbation, ascending.
    pub truth: BTreeMap<String, Vec<usize>>,
    pub graph: KnowledgeGraph,
    pub embeddings: SemanticEmbeddings,
    pub manifest: SynthManifest,
}

const BASELINE_RANGE: (f64, f64) = (1.0, 3.0);
const WITHIN_MODULE_EDGE_P: f64 = 0.3;
const CROSS_MODULE_EDGE_P: f64 = 0.5;
const GENE_EMBEDDING_NOISE: f64 = 0.5;

pub fn gene_names(n: usize) -> Vec<String> {
    let width = n.saturating_sub(1).to_string().len().max(3);
    (0..n).map(|i| format!("G{i:0width$}")).collect()
}

pub fn synth_generate(config: &SynthConfig, seed: u64) -> Result<SynthOutput> {
    config.validate()?;
    let n = config.n_genes;
    let mut rng = rng_for(seed, &[STREAM_SYNTH]);
    let vocab = GeneVocab::new(gene_names(n))?;

    // Module membership.
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let modules: Vec<Vec<usize>> = order
        .chunks(config.module_size)
        .map(|c| {
            let mut m = c.to_vec();
            m.sort_unstable();
            m
        })
        .collect();
    let mut module_of = vec![0usize; n];
    for (mi, members) in modules.iter().enumerate() {
        for &g in members {
            module_of[g] = mi;
        }
    }

    // Graph: a ring plus random chords inside each module, sparse bridges across.
    let mut edges = Vec::new();
    for members in &modules {
        let k = members.len();
        for i in 0..k {
            if k > 1 {
                edges.push((members[i], members[(i + 1) % k], rng.random_range(0.5..1.0)));
            }
            for j in i + 2..k {
                if rng.random::<f64>() < WITHIN_MODULE_EDGE_P {
                    edges.push((members[i], members[j], rng.random_range(0.5..1.0)));
                }
            }
        }
    }
    if modules.len() > 1 {
        for g in 0..n {
            if rng.random::<f64>() < CROSS_MODULE_EDGE_P {
                let other = loop {
                    let cand = rng.random_range(0..n);
                    if module_of[cand] != module_of[g] {
                        break cand;
                    }
                };
                edges.push((g, other, rng.random_range(0.1..0.4)));
            }
        }
    }
    let graph = KnowledgeGraph::from_edges(n, edges)?;

    // Baseline expression and one fixed signed response per gene.
    let baseline: Vec<f64> = (0..n)
        .map(|_| rng.random_range(BASELINE_RANGE.0..BASELINE_RANGE.1))
        .collect();
    let response: Vec<f64> = (0..n)
        .map(|_| {
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            sign * rng.random_range(0.75..1.25)
        })
        .collect();

    // Targets spread round-robin over modules.
    let mut pools: Vec<Vec<usize>> = modules.clone();
    for p in &mut pools {
        p.shuffle(&mut rng);
    }
    let mut targets = Vec::with_capacity(config.n_perturbations);
    let mut mi = 0;
    while targets.len() < config.n_perturbations {
        let slot = mi % pools.len();
        if let Some(g) = pools[slot].pop() {
            targets.push(g);
        }
        mi += 1;
    }
    let mut strata_order: Vec<usize> = (0..targets.len()).collect();
    strata_order.shuffle(&mut rng);

    let cells = config.cells_per_condition;
    let noisy_block = |rng: &mut rand_chacha::ChaCha8Rng, mean: &[f64]| -> Matrix {
        let mut m = Matrix::zeros(cells, n);
        for r in 0..cells {
            for (g, v) in m.row_mut(r).iter_mut().enumerate() {
                let noise: f64 = if config.noise_sigma > 0.0 {
                    config.noise_sigma * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                *v = (mean[g] + noise).max(0.0);
            }
        }
        m
    };

    let control_values = noisy_block(&mut rng, &baseline);
    let control = SampleBlock::new(
        (0..cells).map(|i| format!("ctrl_{i:04}")).collect(),
        control_values,
    )?;

    let mut perturbations = BTreeMap::new();
    let mut truth = BTreeMap::new();
    let mut planted = BTreeMap::new();
    for (j, &target) in targets.iter().enumerate() {
        let stratum = Stratum::ALL[strata_order[j] % 3];
        let fraction = config.deg_fraction[strata_order[j] % 3];
        let k = ((fraction * n as f64).round() as usize).clamp(1, n);

        let dist = hop_distances(&graph, target)?;
        let tiebreak: Vec<u64> = (0..n).map(|_| rng.random()).collect();
        let module = module_of[target];
        let mut candidates: Vec<usize> = (0..n).collect();
        candidates.sort_by_key(|&g| {
            (
                module_of[g] != module,
                g != target,
                dist[g].unwrap_or(usize::MAX),
                tiebreak[g],
            )
        });
        let mut degs: Vec<usize> = candidates.into_iter().take(k).collect();
        degs.sort_unstable();

        let mut mean = baseline.clone();
        for &g in &degs {
            let effect = if g == target {
                -config.effect_magnitude
            } else {
                config.effect_magnitude * response[g]
            };
            mean[g] = baseline[g] + effect.max(-0.9 * baseline[g]);
        }
        let name = vocab.name(target).to_string();
        let values = noisy_block(&mut rng, &mean);
        let ids = (0..cells).map(|i| format!("{name}_{i:04}")).collect();
        perturbations.insert(name.clone(), SampleBlock::new(ids, values)?);
        planted.insert(
            name.clone(),
            PlantedPerturbation {
                target: name.clone(),
                module,
                stratum,
                degs: degs.iter().map(|&g| vocab.name(g).to_string()).collect(),
            },
        );
        truth.insert(name, degs);
    }

    let dim = config.embedding_dim;
    let mut vectors = BTreeMap::new();
    for (g, name) in vocab.names().iter().enumerate() {
        let shared = hash_embedding(&format!("module/{seed}/{}", module_of[g]), dim);
        let own = hash_embedding(name, dim);
        let mut v: Vec<f64> = shared
            .iter()
            .zip(&own)
            .map(|(a, b)| a + GENE_EMBEDDING_NOISE * b)
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        vectors.insert(name.clone(), v);
    }
    let embeddings = SemanticEmbeddings::new(dim, vectors)?;

    let dataset = PerturbationDataset::new(vocab, control, perturbations)?;
    Ok(SynthOutput {
        dataset,
        truth,
        graph,
        embeddings,
        manifest: SynthManifest {
            seed,
            config: config.clone(),
            perturbations: planted,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::deg::{compute_degs, DegOptions};

    fn small() -> SynthConfig {
        SynthConfig {
            n_genes: 60,
            n_perturbations: 8,
            cells_per_condition: 6,
            module_size: 10,
            embedding_dim: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_noise_recovers_planted_sets_exactly() {
        let cfg = SynthConfig {
            noise_sigma: 0.0,
            ..small()
        };
        let out = synth_generate(&cfg, 5).unwrap();
        let table = compute_degs(&out.dataset, &DegOptions::default()).unwrap();
        for (name, planted) in &out.truth {
            let e = table.get(name).unwrap();
            assert_eq!(&e.degs(), planted, "{name}");
            for (g, &p) in e.pvalues.iter().enumerate() {
                let expected = if planted.contains(&g) { 0.0 } else { 1.0 };
                assert_eq!(p, expected);
            }
        }
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let a = synth_generate(&small(), 9).unwrap();
        let b = synth_generate(&small(), 9).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.embeddings, b.embeddings);
        assert_eq!(a.manifest, b.manifest);
        let c = synth_generate(&small(), 10).unwrap();
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn planted_sets_have_stratum_sizes_and_include_target() {
        let out = synth_generate(&small(), 1).unwrap();
        for (name, p) in &out.manifest.perturbations {
            let expected = match p.stratum {
                Stratum::Small => (0.03f64 * 60.0).round() as usize,
                Stratum::Medium => (0.07f64 * 60.0).round() as usize,
                Stratum::Large => (0.15f64 * 60.0).round() as usize,
            };
            assert_eq!(p.degs.len(), expected.max(1));
            assert!(p.degs.contains(name));
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            SynthConfig { n_genes: 10, ..small() },
            SynthConfig { n_perturbations: 3, ..small() },
            SynthConfig { cells_per_condition: 3, ..small() },
            SynthConfig { noise_sigma: -1.0, ..small() },
        ] {
            assert!(matches!(synth_generate(&cfg, 0), Err(Error::Usage(_))));
        }
    }

    #[test]
    fn same_module_embeddings_are_closer() {
        let out = synth_generate(&small(), 2).unwrap();
        let names = out.dataset.vocab().names().to_vec();
        let module_of: BTreeMap<&str, usize> = out
            .manifest
            .perturbations
            .values()
            .map(|p| (p.target.as_str(), p.module))
            .collect();
        let targets: Vec<&str> = module_of.keys().copied().collect();
        let cos = |a: &str, b: &str| -> f64 {
            let (x, y) = (out.embeddings.get(a).unwrap(), out.embeddings.get(b).unwrap());
            x.iter().zip(y).map(|(p, q)| p * q).sum()
        };
        let (mut same, mut diff) = (Vec::new(), Vec::new());
        for (i, a) in targets.iter().enumerate() {
            for b in &targets[i + 1..] {
                if module_of[a] == module_of[b] {
                    same.push(cos(a, b));
                } else {
                    diff.push(cos(a, b));
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(!same.is_empty() && !diff.is_empty(), "{names:?}");
        assert!(mean(&same) > mean(&diff) + 0.3);
    }
}
