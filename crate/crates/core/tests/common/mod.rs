#![allow(dead_code)]

use civic_lens::corpus::{generate_synthetic, split_dataset, Split, SplitSpec, SyntheticConfig};
use civic_lens::features::WordVocab;
use civic_lens::preprocess::{concatenate_history, normalizer_for, NormalizedHistory};
use civic_lens::trainer::Examples;
use civic_lens::LabeledDataset;

/// A synthetic corpus split 70/10/20 with normalized histories and
/// word-level token ids built on the training split.
pub struct Prepared {
    pub split: Split,
    pub train_hist: Vec<NormalizedHistory>,
    pub valid_hist: Vec<NormalizedHistory>,
    pub test_hist: Vec<NormalizedHistory>,
    pub vocab: WordVocab,
}

fn histories(ds: &LabeledDataset) -> Vec<NormalizedHistory> {
    let norm = normalizer_for(ds.platform);
    ds.users
        .iter()
        .map(|u| concatenate_history(u, norm.as_ref()).unwrap())
        .collect()
}

impl Prepared {
    pub fn new(cfg: &SyntheticConfig, split_seed: u64) -> Self {
        let ds = generate_synthetic(cfg).unwrap();
        let split = split_dataset(&ds, &SplitSpec::with_seed(split_seed)).unwrap();
        let train_hist = histories(&split.train);
        let vocab = WordVocab::build(&train_hist, 2, 10_000).unwrap();
        Prepared {
            valid_hist: histories(&split.valid),
            test_hist: histories(&split.test),
            train_hist,
            split,
            vocab,
        }
    }

    fn ids(&self, hist: &[NormalizedHistory], ds: &LabeledDataset) -> Examples<Vec<usize>> {
        Examples::new(hist.iter().map(|h| self.vocab.encode(&h.tokens)).collect(), ds.labels()).unwrap()
    }

    pub fn train_ids(&self) -> Examples<Vec<usize>> {
        self.ids(&self.train_hist, &self.split.train)
    }

    pub fn valid_ids(&self) -> Examples<Vec<usize>> {
        self.ids(&self.valid_hist, &self.split.valid)
    }

    pub fn test_ids(&self) -> Examples<Vec<usize>> {
        self.ids(&self.test_hist, &self.split.test)
    }
}
