//! Contrastive sentence pairs from few-shot labelled examples.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `k` labelled sentences per class, drawn with a recorded seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSet {
    /// `(text, class index)`.
    pub items: Vec<(String, usize)>,
    /// Indices of the items in the split they were drawn from.
    pub source_ids: Vec<usize>,
    /// Class names; a label `c` refers to `classes[c]`.
    pub classes: Vec<String>,
    pub shots_per_class: usize,
    pub sampling_seed: u64,
    /// Classes that had fewer than `shots_per_class` items, with the number missing.
    #[serde(default)]
    pub shortfall: BTreeMap<usize, usize>,
}

impl FewShotSet {
    /// Builds a set from explicit items; every class must occur at least once.
    pub fn from_items(items: Vec<(String, usize)>, classes: Vec<String>, sampling_seed: u64) -> Result<Self> {
        let source_ids = (0..items.len()).collect();
        let mut counts = vec![0usize; classes.len()];
        for (_, c) in &items {
            *counts
                .get_mut(*c)
                .ok_or_else(|| Error::Config(format!("label {c} outside {} classes", classes.len())))? += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Config(format!("class `{}` has no items", classes[c])));
        }
        let shots_per_class = counts.iter().copied().max().unwrap_or(0);
        Ok(Self { items, source_ids, classes, shots_per_class, sampling_seed, shortfall: BTreeMap::new() })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn texts(&self) -> Vec<&str> {
        self.items.iter().map(|(t, _)| t.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|&(_, c)| c).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes.len()];
        for &(_, c) in &self.items {
            counts[c] += 1;
        }
        counts
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledSentencePair {
    pub s1: String,
    pub s2: String,
    /// 1 for a same-class pair, 0 otherwise.
    pub y: u8,
    /// Item positions within the few-shot set.
    pub i: usize,
    pub j: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairStrategy {
    /// Every unordered pair of items.
    Exhaustive,
    /// Every positive pair plus as many uniformly sampled negatives.
    #[default]
    BalancedSampled,
}

impl PairStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "exhaustive" => Ok(Self::Exhaustive),
            "balanced" | "balanced_sampled" => Ok(Self::BalancedSampled),
            other => Err(Error::Config(format!("unknown pair strategy `{other}`"))),
        }
    }
}

pub fn generate_pairs(fs: &FewShotSet, strategy: PairStrategy, rng_seed: u64) -> Result<Vec<LabeledSentencePair>> {
    let present = fs.class_counts().iter().filter(|&&n| n > 0).count();
    if present < 2 {
        return Err(Error::NoNegatives);
    }
    let n = fs.items.len();
    let mut positives = Vec::new();
    let mut negatives = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if fs.items[i].1 == fs.items[j].1 {
                positives.push((i, j));
            } else {
                negatives.push((i, j));
            }
        }
    }
    if positives.is_empty() {
        return Err(Error::NoPositives);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    if strategy == PairStrategy::BalancedSampled && negatives.len() > positives.len() {
        let mut picked = sample(&mut rng, negatives.len(), positives.len()).into_vec();
        picked.sort_unstable();
        negatives = picked.into_iter().map(|k| negatives[k]).collect();
    }
    let mut out: Vec<LabeledSentencePair> = positives
        .into_iter()
        .map(|p| (p, 1))
        .chain(negatives.into_iter().map(|p| (p, 0)))
        .map(|((i, j), y)| LabeledSentencePair {
            s1: fs.items[i].0.clone(),
            s2: fs.items[j].0.clone(),
            y,
            i,
            j,
        })
        .collect();
    out.shuffle(&mut rng);
    Ok(out)
}

/// Seed for the pairs of epoch `epoch` of a run seeded with `seed`.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(counts: &[usize]) -> FewShotSet {
        let classes = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let items = counts
            .iter()
            .enumerate()
            .flat_map(|(c, &n)| (0..n).map(move |i| (format!("class {c} item {i}"), c)))
            .collect();
        FewShotSet::from_items(items, classes, 0).unwrap()
    }

    fn count(pairs: &[LabeledSentencePair], y: u8) -> usize {
        pairs.iter().filter(|p| p.y == y).count()
    }

    #[test]
    fn exhaustive_two_classes_of_eight() {
        let pairs = generate_pairs(&set(&[8, 8]), PairStrategy::Exhaustive, 1).unwrap();
        assert_eq!(count(&pairs, 1), 2 * 28);
        assert_eq!(count(&pairs, 0), 64);
    }

    #[test]
    fn balanced_three_classes_of_two() {
        let pairs = generate_pairs(&set(&[2, 2, 2]), PairStrategy::BalancedSampled, 1).unwrap();
        assert_eq!(count(&pairs, 1), 3);
        assert_eq!(count(&pairs, 0), 3);
    }

    #[test]
    fn degenerate_sets_are_errors() {
        assert!(matches!(generate_pairs(&set(&[1, 1]), PairStrategy::Exhaustive, 0), Err(Error::NoPositives)));
        assert!(matches!(generate_pairs(&set(&[5]), PairStrategy::Exhaustive, 0), Err(Error::NoNegatives)));
        assert!(FewShotSet::from_items(vec![("a".into(), 0)], vec!["x".into(), "y".into()], 0).is_err());
    }

    #[test]
    fn same_seed_same_pairs_different_seed_different_order() {
        let fs = set(&[4, 4, 4]);
        let a = generate_pairs(&fs, PairStrategy::BalancedSampled, 3).unwrap();
        assert_eq!(a, generate_pairs(&fs, PairStrategy::BalancedSampled, 3).unwrap());
        assert_ne!(a, generate_pairs(&fs, PairStrategy::BalancedSampled, 4).unwrap());
        assert_ne!(epoch_seed(3, 0), epoch_seed(3, 1));
    }

    proptest! {
        #[test]
        fn labels_and_counts_are_correct(
            counts in proptest::collection::vec(1usize..7, 2..5), seed in any::<u64>(),
        ) {
            prop_assume!(counts.iter().any(|&n| n >= 2));
            let fs = set(&counts);
            let n: usize = counts.iter().sum();
            let pos: usize = counts.iter().map(|&c| c * (c - 1) / 2).sum();
            let neg = (n * n - counts.iter().map(|c| c * c).sum::<usize>()) / 2;
            let ex = generate_pairs(&fs, PairStrategy::Exhaustive, seed).unwrap();
            prop_assert_eq!(count(&ex, 1), pos);
            prop_assert_eq!(count(&ex, 0), neg);
            let bal = generate_pairs(&fs, PairStrategy::BalancedSampled, seed).unwrap();
            prop_assert_eq!(count(&bal, 1), pos);
            prop_assert_eq!(count(&bal, 0), neg.min(pos));
            for p in ex.iter().chain(&bal) {
                prop_assert_ne!(p.i, p.j);
                prop_assert_eq!(p.y == 1, fs.items[p.i].1 == fs.items[p.j].1);
                prop_assert_eq!(&p.s1, &fs.items[p.i].0);
            }
            // sampled negatives are distinct
            let mut seen: Vec<(usize, usize)> = bal.iter().map(|p| (p.i, p.j)).collect();
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), bal.len());
        }
    }
}
