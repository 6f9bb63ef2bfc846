//! Labeled DNA records, datasets, stratified splits and synthetic corpora.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::seed::{self, stream};
use crate::{Error, Result};

/// Base symbols in canonical order. `N` is a first-class symbol.
pub const ALPHABET: [u8; 5] = *b"ACGTN";

/// Number of binary features emitted by [`make_synthetic`].
pub const SYNTHETIC_FEATURES: usize = 8;

pub fn is_base(b: u8) -> bool {
    ALPHABET.contains(&b)
}

/// One engineered DNA sequence with its phenotype bits and lab label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DnaRecord {
    pub id: String,
    sequence: String,
    pub features: Vec<bool>,
    pub lab: usize,
}

impl DnaRecord {
    pub fn new(
        id: impl Into<String>,
        sequence: impl Into<String>,
        features: Vec<bool>,
        lab: usize,
    ) -> Result<Self> {
        let id = id.into();
        let sequence = sequence.into();
        validate_sequence(&id, &sequence)?;
        Ok(DnaRecord {
            id,
            sequence,
            features,
            lab,
        })
    }

    pub fn sequence(&self) -> &str {
        &self.sequence
    }
}

fn validate_sequence(id: &str, sequence: &str) -> Result<()> {
    if sequence.is_empty() {
        return Err(Error::EmptySequence(id.into()));
    }
    match sequence.chars().enumerate().find(|(_, c)| !c.is_ascii() || !is_base(*c as u8)) {
        Some((position, symbol)) => Err(Error::InvalidSymbol {
            record: id.into(),
            symbol,
            position,
        }),
        None => Ok(()),
    }
}

/// Ordered lab names. Index `len()` is reserved for the "unseen" lab.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabVocab {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl LabVocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_names<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = LabVocab::new();
        for name in names {
            let name = name.into();
            if vocab.index.contains_key(&name) {
                return Err(Error::DuplicateLab(name));
            }
            vocab.intern(name);
        }
        Ok(vocab)
    }

    /// Returns the index for `name`, appending it if new.
    pub fn intern(&mut self, name: impl Into<String>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            return i;
        }
        let i = self.names.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        i
    }

    pub fn get(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn unseen_index(&self) -> usize {
        self.names.len()
    }
}

/// An immutable, validated collection of records.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    records: Vec<DnaRecord>,
    lab_vocab: LabVocab,
    feature_count: usize,
}

impl Dataset {
    /// Validates the dataset invariants: record ids unique, every lab index in
    /// the vocabulary, every feature vector `feature_count` wide.
    pub fn new(records: Vec<DnaRecord>, lab_vocab: LabVocab, feature_count: usize) -> Result<Self> {
        let mut ids = BTreeSet::new();
        for r in &records {
            if !ids.insert(r.id.as_str()) {
                return Err(Error::DuplicateId(r.id.clone()));
            }
            if r.lab >= lab_vocab.len() {
                return Err(Error::LabOutOfRange {
                    lab: r.lab,
                    labs: lab_vocab.len(),
                });
            }
            if r.features.len() != feature_count {
                return Err(Error::FeatureWidth {
                    record: r.id.clone(),
                    expected: feature_count,
                    found: r.features.len(),
                });
            }
        }
        Ok(Dataset {
            records,
            lab_vocab,
            feature_count,
        })
    }

    /// Builds a dataset from `(id, sequence, lab name, features)` rows with the
    /// lab vocabulary in first-appearance order. `F` comes from the first row.
    pub fn from_rows<I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, String, String, Vec<bool>)>,
    {
        let mut vocab = LabVocab::new();
        let mut records = Vec::new();
        let mut width = None;
        for (id, sequence, lab, features) in rows {
            let expected = *width.get_or_insert(features.len());
            if features.len() != expected {
                return Err(Error::FeatureWidth {
                    record: id,
                    expected,
                    found: features.len(),
                });
            }
            let lab = vocab.intern(lab);
            records.push(DnaRecord::new(id, sequence, features, lab)?);
        }
        Dataset::new(records, vocab, width.unwrap_or(0))
    }

    pub fn records(&self) -> &[DnaRecord] {
        &self.records
    }

    pub fn lab_vocab(&self) -> &LabVocab {
        &self.lab_vocab
    }

    pub fn lab_count(&self) -> usize {
        self.lab_vocab.len()
    }

    pub fn feature_count(&self) -> usize {
        self.feature_count
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records at `indices`, same vocabulary.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
            lab_vocab: self.lab_vocab.clone(),
            feature_count: self.feature_count,
        }
    }

    /// Keeps only records whose lab is in `labs`, renumbering the vocabulary
    /// to the order given.
    pub fn restrict_labs(&self, labs: &[usize]) -> Result<Dataset> {
        let mut vocab = LabVocab::new();
        let mut remap = BTreeMap::new();
        for &lab in labs {
            let name = self.lab_vocab.name(lab).ok_or(Error::LabOutOfRange {
                lab,
                labs: self.lab_count(),
            })?;
            remap.insert(lab, vocab.intern(name));
        }
        let records = self
            .records
            .iter()
            .filter_map(|r| {
                remap.get(&r.lab).map(|&lab| DnaRecord {
                    lab,
                    ..r.clone()
                })
            })
            .collect();
        Dataset::new(records, vocab, self.feature_count)
    }

    /// Re-indexes the labels against another vocabulary (e.g. the one stored
    /// with a checkpoint). Fails if any lab name is missing from `vocab`.
    pub fn with_vocab(&self, vocab: &LabVocab) -> Result<Dataset> {
        let mut records = Vec::with_capacity(self.records.len());
        for r in &self.records {
            let name = self.lab_vocab.name(r.lab).unwrap_or_default();
            let lab = vocab
                .get(name)
                .ok_or_else(|| Error::UnknownLab(name.into()))?;
            records.push(DnaRecord { lab, ..r.clone() });
        }
        Dataset::new(records, vocab.clone(), self.feature_count)
    }

    /// Record indices grouped by lab.
    pub fn by_lab(&self) -> Vec<Vec<usize>> {
        let mut groups = alloc::vec![Vec::new(); self.lab_count()];
        for (i, r) in self.records.iter().enumerate() {
            groups[r.lab].push(i);
        }
        groups
    }
}

/// Per-lab proportional split into (train, validation, test).
///
/// Each lab's records are shuffled with a lab-specific stream derived from
/// `seed`; the validation and test shares are rounded, the remainder goes to
/// train. Labs with fewer than three records are placed entirely in train.
/// Output datasets keep the input record order and vocabulary.
pub fn split_stratified(
    ds: &Dataset,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    let (ftrain, fval, ftest) = fractions;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(ftrain > 0.0 && fval > 0.0 && ftest > 0.0) || ((ftrain + fval + ftest) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got ({ftrain}, {fval}, {ftest})"
        )));
    }
    let mut which = alloc::vec![0u8; ds.len()];
    for (lab, mut members) in ds.by_lab().into_iter().enumerate() {
        let n = members.len();
        if n < 3 {
            continue;
        }
        members.shuffle(&mut seed::rng(seed, &[stream::SPLIT, lab as u64]));
        let round = |f: f64| libm_round(n as f64 * f) as usize;
        let mut n_val = round(fval).max(1);
        let mut n_test = round(ftest).max(1);
        // keep at least one record for training
        while n_val + n_test > n - 1 {
            if n_val >= n_test {
                n_val -= 1;
            } else {
                n_test -= 1;
            }
        }
        let n_train = n - n_val - n_test;
        for &i in &members[n_train..n_train + n_val] {
            which[i] = 1;
        }
        for &i in &members[n_train + n_val..n_train + n_val + n_test] {
            which[i] = 2;
        }
    }
    let pick = |part: u8| -> Vec<usize> { (0..ds.len()).filter(|&i| which[i] == part).collect() };
    Ok((ds.subset(&pick(0)), ds.subset(&pick(1)), ds.subset(&pick(2))))
}

fn libm_round(x: f64) -> f64 {
    num_traits::Float::round(x)
}

/// Parameters for [`make_synthetic`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub n_labs: usize,
    pub per_lab: usize,
    pub motif_len: usize,
    pub seq_len: usize,
    pub noise: f64,
    pub seed: u64,
}

/// Generates a desk-scale attribution corpus.
///
/// Every lab owns a private random motif planted at a random position in
/// otherwise uniform-random sequences over `ACGT`. Each base is then
/// substituted by a different random base with probability `noise`. The
/// `SYNTHETIC_FEATURES` binary features are the low bits of the lab index.
/// Records are emitted lab by lab, so the vocabulary order equals lab order.
pub fn make_synthetic(spec: SyntheticSpec) -> Result<Dataset> {
    let SyntheticSpec {
        n_labs,
        per_lab,
        motif_len,
        seq_len,
        noise,
        seed,
    } = spec;
    if n_labs < 2 {
        return Err(Error::invalid("make_synthetic needs at least two labs"));
    }
    if motif_len >= seq_len || motif_len == 0 {
        return Err(Error::invalid("motif_len must be in [1, seq_len)"));
    }
    if !(0.0..=1.0).contains(&noise) {
        return Err(Error::invalid("noise must be a probability"));
    }
    const BASES: &[u8; 4] = b"ACGT";
    let mut rng = seed::rng(seed, &[stream::SYNTH]);
    let motifs: Vec<Vec<u8>> = (0..n_labs)
        .map(|_| (0..motif_len).map(|_| BASES[rng.gen_range(0..4)]).collect())
        .collect();
    let mut vocab = LabVocab::new();
    let mut records = Vec::with_capacity(n_labs * per_lab);
    for (lab, motif) in motifs.iter().enumerate() {
        vocab.intern(format!("lab{lab:04}"));
        let features: Vec<bool> = (0..SYNTHETIC_FEATURES).map(|bit| (lab >> bit) & 1 == 1).collect();
        for i in 0..per_lab {
            let mut seq: Vec<u8> = (0..seq_len).map(|_| BASES[rng.gen_range(0..4)]).collect();
            let at = rng.gen_range(0..=seq_len - motif_len);
            seq[at..at + motif_len].copy_from_slice(motif);
            if noise > 0.0 {
                for b in seq.iter_mut() {
                    if rng.gen_bool(noise) {
                        let old = BASES.iter().position(|x| x == b).unwrap_or(0);
                        *b = BASES[(old + rng.gen_range(1..4)) % 4];
                    }
                }
            }
            // Only ACGT were written, so this is valid UTF-8.
            let seq = String::from_utf8(seq).unwrap_or_default();
            records.push(DnaRecord::new(
                format!("lab{lab:04}_seq{i:05}"),
                seq,
                features.clone(),
                lab,
            )?);
        }
    }
    Dataset::new(records, vocab, SYNTHETIC_FEATURES)
}
