//! Perturbation-level train/validation/test splits.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::dataset::PerturbationDataset;
use crate::error::{Error, Result};
use crate::seed::{rng_for, STREAM_SPLIT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub seed: u64,
}

impl SplitSpec {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.val).chain(&self.test)
    }
}

/// Split sizes: floor each share, hand leftovers to the largest fractional
/// remainders (ties to the earlier split), then make sure every split with
/// a nonzero fraction holds at least one perturbation.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    if fractions.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Usage(format!("split fractions must be >= 0, got {fractions:?}")));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Usage(format!("split fractions must sum to 1, got {total}")));
    }
    let nonzero = fractions.iter().filter(|&&f| f > 0.0).count();
    if n < nonzero {
        return Err(Error::Usage(format!(
            "{n} perturbation(s) cannot fill {nonzero} nonempty split(s)"
        )));
    }
    let raw: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, r) in sizes.iter_mut().zip(&raw) {
        *s = r.floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if fractions[i] > 0.0 {
            sizes[i] += 1;
            left -= 1;
        }
    }
    for i in 0..3 {
        if fractions[i] > 0.0 && sizes[i] == 0 {
            let donor = (0..3).max_by_key(|&j| (sizes[j], std::cmp::Reverse(j))).unwrap();
            sizes[donor] -= 1;
            sizes[i] = 1;
        }
    }
    Ok(sizes)
}

pub fn split_names(names: &[String], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    let sizes = split_sizes(names.len(), fractions)?;
    let mut shuffled = names.to_vec();
    shuffled.sort();
    shuffled.dedup();
    if shuffled.len() != names.len() {
        return Err(Error::Usage("duplicate perturbation names".into()));
    }
    shuffled.shuffle(&mut rng_for(seed, &[STREAM_SPLIT]));
    let mut rest = shuffled.into_iter();
    let mut take = |k: usize| {
        let mut v: Vec<String> = rest.by_ref().take(k).collect();
        v.sort();
        v
    };
    let train = take(sizes[0]);
    let val = take(sizes[1]);
    let test = take(sizes[2]);
    Ok(SplitSpec {
        train,
        val,
        test,
        seed,
    })
}

/// Shuffled split of the dataset's perturbations; reads no sample block.
pub fn split_by_perturbation(
    dataset: &PerturbationDataset,
    fractions: [f64; 3],
    seed: u64,
) -> Result<SplitSpec> {
    split_names(&dataset.perturbation_names(), fractions, seed)
}
