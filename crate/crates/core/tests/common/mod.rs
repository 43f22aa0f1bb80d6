#![allow(dead_code)]

use std::collections::BTreeMap;

use adapert::data::{compute_degs_for, pseudobulk_of, DegOptions, DegTable, PerturbationDataset, SampleBlock, SemanticEmbeddings};
use adapert::graph::{GeneVocab, KnowledgeGraph};
use adapert::loss::{batch_loss, LossTarget, LossWeights};
use adapert::model::{forward_batch, Ablation, Mode, Model, ModelConfig, ModelInputs, SubgraphSelection};
use adapert::numerics::Matrix;
use adapert::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOY_PERTS: [&str; 3] = ["G1", "G3", "G4"];

/// Ten genes; only G0..G5 carry edges, the other four are isolated nodes.
pub struct Toy {
    pub dataset: PerturbationDataset,
    pub graph: KnowledgeGraph,
    pub embeddings: SemanticEmbeddings,
    pub inputs: ModelInputs,
    pub model: Model,
    pub table: DegTable,
    pub x_pert: BTreeMap<String, Vec<f64>>,
    pub control: Vec<f64>,
    pub perts: Vec<String>,
}

pub enum Term {
    Recon,
    NonDeg,
    Align,
    Total,
}

pub fn toy(ablation: Ablation, seed: u64) -> Toy {
    let n = 10;
    let names: Vec<String> = (0..n).map(|i| format!("G{i}")).collect();
    let vocab = GeneVocab::new(names.clone()).unwrap();
    let edges = vec![
        (0, 1, 0.9),
        (1, 2, 0.8),
        (2, 3, 0.7),
        (3, 4, 0.6),
        (4, 5, 0.5),
        (5, 0, 0.4),
        (1, 4, 0.3),
    ];
    let graph = KnowledgeGraph::from_edges(n, edges).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..n).map(|_| rng.random_range(1.0..3.0)).collect();
    let block = |rng: &mut ChaCha8Rng, shift: &[(usize, f64)], tag: &str| {
        let mut m = Matrix::zeros(5, n);
        for r in 0..5 {
            for g in 0..n {
                let s = shift.iter().find(|(i, _)| *i == g).map_or(0.0, |x| x.1);
                m.set(r, g, (base[g] + s + 0.1 * rng.random_range(-1.0..1.0)).max(0.0));
            }
        }
        SampleBlock::new((0..5).map(|i| format!("{tag}{i}")).collect(), m).unwrap()
    };
    let control = block(&mut rng, &[], "c");
    let mut perturbations = BTreeMap::new();
    perturbations.insert("G1".to_string(), block(&mut rng, &[(1, -0.8), (2, 0.6)], "a"));
    perturbations.insert("G3".to_string(), block(&mut rng, &[(3, -0.9), (4, 0.5), (8, 0.7)], "b"));
    perturbations.insert("G4".to_string(), block(&mut rng, &[(4, -0.7), (0, -0.6)], "d"));
    let dataset = PerturbationDataset::new(vocab.clone(), control, perturbations).unwrap();
    let embeddings = SemanticEmbeddings::hashed(&vocab, 4);
    let perts: Vec<String> = TOY_PERTS.iter().map(|s| s.to_string()).collect();
    let table = compute_degs_for(&dataset, &perts, &DegOptions::default()).unwrap();
    let bulk = pseudobulk_of(&dataset, &perts).unwrap();
    let inputs = ModelInputs::new(&vocab, &graph, &embeddings, bulk.control.clone(), false).unwrap();
    let config = ModelConfig {
        layers: 2,
        structural_dim: 3,
        latent_dim: 4,
        score_dim: 3,
        hidden_dim: 5,
        ablation,
        ..ModelConfig::default()
    };
    let model = Model::new(config, 4, &bulk.control, perts.clone(), seed).unwrap();
    Toy {
        dataset,
        graph,
        embeddings,
        inputs,
        model,
        table,
        x_pert: bulk.perturbations,
        control: bulk.control,
        perts,
    }
}

impl Toy {
    /// Selections from one seeded train-mode pass, for replay in frozen mode.
    pub fn frozen_selections(&self, seed: u64) -> BTreeMap<String, SubgraphSelection> {
        let batch = forward_batch(&self.model, &self.inputs, &self.perts, &Mode::Train { seed }).unwrap();
        batch
            .outputs
            .into_iter()
            .map(|o| (o.perturbation, o.selection.unwrap()))
            .collect()
    }

    pub fn loss_and_grads(
        &self,
        params: &[Matrix],
        mode: &Mode,
        weights: &LossWeights,
        term: &Term,
    ) -> Result<(f64, Vec<Matrix>)> {
        let model = self.model.with_params(self.model.params.with_tensors(params.to_vec())?);
        let mut batch = forward_batch(&model, &self.inputs, &self.perts, mode)?;
        let targets: Vec<LossTarget> = self
            .perts
            .iter()
            .map(|p| LossTarget {
                x_pert: &self.x_pert[p],
                control: &self.control,
                deg: self.table.get(p).unwrap(),
            })
            .collect();
        let (nodes, _) = batch_loss(&mut batch, &model, &targets, weights)?;
        let root = match term {
            Term::Recon => nodes.recon,
            Term::NonDeg => nodes.non_deg,
            Term::Align => nodes.align.expect("context path"),
            Term::Total => nodes.total,
        };
        let value = batch.tape.value(root).data()[0];
        let mut grads = batch.tape.backward(root)?;
        let g = batch.params.iter().map(|&id| grads.take(id).unwrap()).collect();
        Ok((value, g))
    }
}
