//! Expression data, differential-expression calls, splits, embeddings and
//! the synthetic generator.

pub mod dataset;
pub mod deg;
pub mod embeddings;
pub mod split;
pub mod stats;
pub mod synth;

pub use dataset::{load_expression, pseudobulk, pseudobulk_of, PerturbationDataset, Pseudobulk, SampleBlock, CONTROL_LABEL};
pub use deg::{compute_degs, compute_degs_for, deg_entry, effect_size_strata, Correction, DegEntry, DegOptions, DegTable, Stratum};
pub use embeddings::{hash_embedding, load_embeddings, SemanticEmbeddings};
pub use split::{split_by_perturbation, split_names, SplitSpec};
pub use stats::welch_t_test;
pub use synth::{synth_generate, SynthConfig, SynthManifest, SynthOutput};
