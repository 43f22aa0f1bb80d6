//! Per-gene semantic embedding vectors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::graph::GeneVocab;

const HASH_DOMAIN: &str = "adapert/hash-embedding/v1";

#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEmbeddings {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
}

/// Deterministic unit vector seeded from a gene name.
pub fn hash_embedding(name: &str, dim: usize) -> Vec<f64> {
    let mut hasher = Sha256::new();
    hasher.update(HASH_DOMAIN.as_bytes());
    hasher.update((dim as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest[..32]);
    let mut rng = ChaCha8Rng::from_seed(seed);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

impl SemanticEmbeddings {
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for (g, v) in &vectors {
            if v.len() != dim {
                return Err(Error::Data(format!(
                    "embedding for `{g}` has dimension {}, expected {dim}",
                    v.len()
                )));
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Data(format!("embedding for `{g}` is not finite")));
            }
        }
        Ok(SemanticEmbeddings { dim, vectors })
    }

    /// Hash fallback for every gene in `vocab`.
    pub fn hashed(vocab: &GeneVocab, dim: usize) -> Self {
        let vectors = vocab
            .names()
            .iter()
            .map(|g| (g.clone(), hash_embedding(g, dim)))
            .collect();
        SemanticEmbeddings { dim, vectors }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, gene: &str) -> Option<&[f64]> {
        self.vectors.get(gene).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Writes `gene,v0,…` rows in vocabulary order.
    pub fn save(&self, path: impl AsRef<Path>, vocab: &GeneVocab) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        write!(out, "gene").map_err(io)?;
        for i in 0..self.dim {
            write!(out, ",v{i}").map_err(io)?;
        }
        writeln!(out).map_err(io)?;
        for g in vocab.names() {
            if let Some(v) = self.vectors.get(g) {
                write!(out, "{g}").map_err(io)?;
                for x in v {
                    write!(out, ",{x}").map_err(io)?;
                }
                writeln!(out).map_err(io)?;
            }
        }
        out.flush().map_err(io)
    }
}

pub fn load_embeddings(path: impl AsRef<Path>, vocab: &GeneVocab, fallback_dim: usize) -> Result<SemanticEmbeddings> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_embeddings(file, vocab, fallback_dim, &path.display().to_string())
}

/// Reads `gene,v0,…,v{d−1}` rows; vocabulary genes missing from the file get
/// [`hash_embedding`]. `fallback_dim` applies only when the file has no rows.
pub fn parse_embeddings(
    reader: impl Read,
    vocab: &GeneVocab,
    fallback_dim: usize,
    source: &str,
) -> Result<SemanticEmbeddings> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let mut dim: Option<usize> = None;
    let mut vectors = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            path: source.to_string(),
            line: e.position().map_or(0, |p| p.line()),
            detail: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.is_empty() || (rec.len() == 1 && rec[0].trim().is_empty()) {
            continue;
        }
        let values = rec
            .iter()
            .skip(1)
            .map(|f| {
                f.trim().parse::<f64>().map_err(|_| Error::Parse {
                    path: source.to_string(),
                    line,
                    detail: format!("invalid embedding value `{f}`"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match dim {
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Data(format!(
                    "{source} line {line}: embedding length {} differs from {d}",
                    values.len()
                )))
            }
            _ => {}
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{source} line {line}: non-finite embedding value")));
        }
        if vocab.index_of(&rec[0]).is_some() {
            vectors.insert(rec[0].to_string(), values);
        }
    }
    let dim = dim.unwrap_or(fallback_dim);
    if dim == 0 {
        return Err(Error::Data(format!("{source}: embedding dimension is zero")));
    }
    for g in vocab.names() {
        if !vectors.contains_key(g) {
            vectors.insert(g.clone(), hash_embedding(g, dim));
        }
    }
    SemanticEmbeddings::new(dim, vectors)
}
