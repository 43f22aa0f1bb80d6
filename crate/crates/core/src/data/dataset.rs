//! Expression data grouped by perturbation label.
//!
//! Every read of a perturbation block goes through [`PerturbationDataset::block`],
//! which counts accesses per perturbation. Training code is checked against
//! these counters to prove it never touches held-out blocks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};
use crate::graph::GeneVocab;
use crate::numerics::Matrix;

/// Perturbation-column label marking control cells.
pub const CONTROL_LABEL: &str = "control";

/// Samples × genes block with per-sample identifiers.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBlock {
    pub ids: Vec<String>,
    pub values: Matrix,
}

impl SampleBlock {
    pub fn new(ids: Vec<String>, values: Matrix) -> Result<Self> {
        if ids.len() != values.rows() {
            return Err(Error::dim(
                "sample block",
                format!("{} ids for {} rows", ids.len(), values.rows()),
            ));
        }
        Ok(SampleBlock { ids, values })
    }

    pub fn samples(&self) -> usize {
        self.values.rows()
    }
}

pub struct PerturbationDataset {
    vocab: GeneVocab,
    control: SampleBlock,
    perturbations: BTreeMap<String, SampleBlock>,
    access: BTreeMap<String, AtomicUsize>,
}

impl Clone for PerturbationDataset {
    /// Clones data; access counters start at zero.
    fn clone(&self) -> Self {
        PerturbationDataset {
            vocab: self.vocab.clone(),
            control: self.control.clone(),
            perturbations: self.perturbations.clone(),
            access: self
                .perturbations
                .keys()
                .map(|k| (k.clone(), AtomicUsize::new(0)))
                .collect(),
        }
    }
}

impl std::fmt::Debug for PerturbationDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PerturbationDataset")
            .field("genes", &self.vocab.len())
            .field("control_samples", &self.control.samples())
            .field("perturbations", &self.perturbations.len())
            .finish()
    }
}

impl PartialEq for PerturbationDataset {
    fn eq(&self, other: &Self) -> bool {
        self.vocab == other.vocab
            && self.control == other.control
            && self.perturbations == other.perturbations
    }
}

fn validate_block(label: &str, block: &SampleBlock, genes: usize) -> Result<()> {
    if block.values.cols() != genes {
        return Err(Error::Data(format!(
            "block `{label}` has {} gene columns, vocabulary has {genes}",
            block.values.cols()
        )));
    }
    if block.samples() < 2 {
        return Err(Error::Data(format!(
            "block `{label}` has {} sample(s); at least 2 are required",
            block.samples()
        )));
    }
    if let Some(v) = block.values.data().iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(Error::Data(format!(
            "block `{label}` contains invalid expression value {v}; expected finite log1p values >= 0"
        )));
    }
    Ok(())
}

impl PerturbationDataset {
    pub fn new(
        vocab: GeneVocab,
        control: SampleBlock,
        perturbations: BTreeMap<String, SampleBlock>,
    ) -> Result<Self> {
        validate_block(CONTROL_LABEL, &control, vocab.len())?;
        for (label, block) in &perturbations {
            if label == CONTROL_LABEL {
                return Err(Error::Data("perturbation label `control` is reserved".into()));
            }
            validate_block(label, block, vocab.len())?;
        }
        let access = perturbations
            .keys()
            .map(|k| (k.clone(), AtomicUsize::new(0)))
            .collect();
        Ok(PerturbationDataset {
            vocab,
            control,
            perturbations,
            access,
        })
    }

    pub fn vocab(&self) -> &GeneVocab {
        &self.vocab
    }

    pub fn gene_count(&self) -> usize {
        self.vocab.len()
    }

    pub fn control(&self) -> &SampleBlock {
        &self.control
    }

    /// Sorted perturbation labels. Does not count as a block access.
    pub fn perturbation_names(&self) -> Vec<String> {
        self.perturbations.keys().cloned().collect()
    }

    pub fn perturbation_count(&self) -> usize {
        self.perturbations.len()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.perturbations.contains_key(name)
    }

    /// Sample block of one perturbation; each call is counted.
    pub fn block(&self, name: &str) -> Result<&SampleBlock> {
        let block = self
            .perturbations
            .get(name)
            .ok_or_else(|| Error::Usage(format!("unknown perturbation `{name}`")))?;
        if let Some(counter) = self.access.get(name) {
            counter.fetch_add(1, Ordering::Relaxed);
        }
        Ok(block)
    }

    pub fn access_count(&self, name: &str) -> usize {
        self.access
            .get(name)
            .map_or(0, |c| c.load(Ordering::Relaxed))
    }

    pub fn reset_access_counts(&self) {
        for c in self.access.values() {
            c.store(0, Ordering::Relaxed);
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_expression(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut out = BufWriter::new(file);
        self.write_csv(&mut out).map_err(|e| Error::io(path, e))?;
        out.flush().map_err(|e| Error::io(path, e))
    }

    /// Control rows first, then perturbations in label order.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        write!(out, "sample_id,perturbation")?;
        for g in self.vocab.names() {
            write!(out, ",{g}")?;
        }
        writeln!(out)?;
        let blocks = std::iter::once((CONTROL_LABEL, &self.control))
            .chain(self.perturbations.iter().map(|(k, v)| (k.as_str(), v)));
        for (label, block) in blocks {
            for (r, id) in block.ids.iter().enumerate() {
                write!(out, "{id},{label}")?;
                for v in block.values.row(r) {
                    write!(out, ",{v}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }
}

pub fn load_expression(path: impl AsRef<Path>) -> Result<PerturbationDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_expression(file, &path.display().to_string())
}

/// Parses `sample_id,perturbation,<gene1>,…` CSV text.
pub fn parse_expression(reader: impl Read, source: &str) -> Result<PerturbationDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let parse_err = |line: u64, detail: String| Error::Parse {
        path: source.to_string(),
        line,
        detail,
    };

    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(1, e.to_string()))?,
        None => return Err(parse_err(1, "empty file".into())),
    };
    if header.len() < 3 || &header[0] != "sample_id" || &header[1] != "perturbation" {
        return Err(parse_err(
            1,
            "header must be `sample_id,perturbation,<gene1>,...`".into(),
        ));
    }
    let genes: Vec<String> = header.iter().skip(2).map(str::to_string).collect();
    let vocab = GeneVocab::new(genes.clone()).map_err(|e| parse_err(1, e.to_string()))?;
    let n = vocab.len();

    let mut groups: BTreeMap<String, (Vec<String>, Vec<f64>)> = BTreeMap::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].trim().is_empty() {
            continue;
        }
        if rec.len() != n + 2 {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", n + 2, rec.len()),
            ));
        }
        let entry = groups.entry(rec[1].to_string()).or_default();
        entry.0.push(rec[0].to_string());
        for (j, field) in rec.iter().skip(2).enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                parse_err(line, format!("invalid value `{field}` for gene `{}`", genes[j]))
            })?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Data(format!(
                    "{source} line {line}: expression value {v} is not a finite log1p value >= 0"
                )));
            }
            entry.1.push(v);
        }
    }

    let (ids, values) = groups
        .remove(CONTROL_LABEL)
        .ok_or_else(|| Error::Data(format!("{source}: no `{CONTROL_LABEL}` rows")))?;
    let control = SampleBlock::new(ids.clone(), Matrix::from_vec(ids.len(), n, values)?)?;
    let mut perturbations = BTreeMap::new();
    for (label, (ids, values)) in groups {
        let block = SampleBlock::new(ids.clone(), Matrix::from_vec(ids.len(), n, values)?)?;
        perturbations.insert(label, block);
    }
    PerturbationDataset::new(vocab, control, perturbations)
}

/// Mean profiles of control and perturbed samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Pseudobulk {
    pub control: Vec<f64>,
    pub perturbations: BTreeMap<String, Vec<f64>>,
}

impl Pseudobulk {
    /// `x̄_p − x̄_c` for one perturbation.
    pub fn delta(&self, name: &str) -> Option<Vec<f64>> {
        self.perturbations
            .get(name)
            .map(|p| p.iter().zip(&self.control).map(|(a, b)| a - b).collect())
    }
}

pub fn pseudobulk(dataset: &PerturbationDataset) -> Result<Pseudobulk> {
    pseudobulk_of(dataset, &dataset.perturbation_names())
}

/// Pseudobulk restricted to `names`; only those blocks are read.
pub fn pseudobulk_of(dataset: &PerturbationDataset, names: &[String]) -> Result<Pseudobulk> {
    let control = dataset.control().values.col_means().into_vec();
    let mut perturbations = BTreeMap::new();
    for name in names {
        let block = dataset.block(name)?;
        perturbations.insert(name.clone(), block.values.col_means().into_vec());
    }
    Ok(Pseudobulk {
        control,
        perturbations,
    })
}
