//! Inference: lab rankings with test-time augmentation, top-k accuracy,
//! unknown-lab detection and lab embeddings synthesized from samples.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::DnaRecord;
use crate::model::{
    classifier_probs, embed_sequence, lab_similarities, InputBatch, Model, ModelConfig, ModelKind, TripletParams,
};
use crate::numeric::{Scalar, L2_EPS};
use crate::seed::{self, stream};
use crate::tokenize::{prepare_input, Tokenizer};
use crate::{Error, Result};

/// Number of test-time shifts used when none is given.
pub const DEFAULT_TTA: usize = 8;

/// Producer of a ranking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RankingKind {
    #[serde(rename = "triplet")]
    Triplet,
    #[serde(rename = "classifier")]
    Classifier,
    #[serde(rename = "ensemble-borda")]
    EnsembleBorda,
    #[serde(rename = "ensemble-copeland")]
    EnsembleCopeland,
}

impl RankingKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RankingKind::Triplet => "triplet",
            RankingKind::Classifier => "classifier",
            RankingKind::EnsembleBorda => "ensemble-borda",
            RankingKind::EnsembleCopeland => "ensemble-copeland",
        }
    }
}

impl From<ModelKind> for RankingKind {
    fn from(k: ModelKind) -> Self {
        match k {
            ModelKind::Triplet => RankingKind::Triplet,
            ModelKind::Classifier => RankingKind::Classifier,
        }
    }
}

/// Every real lab exactly once, best first. Equal scores are ordered by lab
/// index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub kind: RankingKind,
    entries: Vec<(usize, f64)>,
    /// Averaged similarity to the unseen row (triplet rankings only).
    pub unseen_score: Option<f64>,
}

impl Ranking {
    /// Ranks labs `0..scores.len()` by `scores`.
    pub fn from_scores(kind: RankingKind, scores: &[f64]) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::invalid("ranking over zero labs"));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite {
                op: "ranking",
                node: i,
            });
        }
        let mut entries: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(Ranking {
            kind,
            entries,
            unseen_score: None,
        })
    }

    /// Builds a ranking from an explicit order; scores must be non-increasing
    /// and ties must already be in lab order.
    pub fn from_entries(kind: RankingKind, entries: Vec<(usize, f64)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("ranking over zero labs"));
        }
        let mut seen = vec![false; entries.len()];
        for &(lab, s) in &entries {
            if lab >= entries.len() || seen[lab] {
                return Err(Error::invalid(format!("ranking is not a permutation of 0..{}", entries.len())));
            }
            if !s.is_finite() {
                return Err(Error::NonFinite { op: "ranking", node: lab });
            }
            seen[lab] = true;
        }
        for w in entries.windows(2) {
            if w[1].1 > w[0].1 || (w[1].1 == w[0].1 && w[1].0 < w[0].0) {
                return Err(Error::invalid("ranking order disagrees with its scores"));
            }
        }
        Ok(Ranking {
            kind,
            entries,
            unseen_score: None,
        })
    }

    /// Builds a ranking from a best-first permutation of labs, scoring
    /// position `i` as `-i`.
    pub fn from_order(kind: RankingKind, labs: &[usize]) -> Result<Self> {
        Ranking::from_entries(kind, labs.iter().enumerate().map(|(i, &l)| (l, -(i as f64))).collect())
    }

    pub fn entries(&self) -> &[(usize, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn labs(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.0)
    }

    /// Zero-based position of `lab`.
    pub fn position(&self, lab: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.0 == lab)
    }

    pub fn top(&self) -> (usize, f64) {
        self.entries[0]
    }
}

/// Zero-based rank of `truth` under the ranking rule (descending, ties by
/// lab index) without sorting.
pub fn rank_position<T: Scalar>(scores: &[T], truth: usize) -> usize {
    let t = scores[truth];
    scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| s > t || (s == t && j < truth))
        .count()
}

/// `n` base-level shift offsets for a sequence of `len` bases; the first is 0.
pub fn tta_offsets(len: usize, n: usize, seed: u64) -> Vec<usize> {
    let mut rng = seed::rng(seed, &[stream::TTA]);
    let mut out = vec![0];
    out.extend((1..n).map(|_| rng.gen_range(0..len.max(1))));
    out
}

fn shifted_batch<T: Scalar>(
    tok: &Tokenizer,
    record: &DnaRecord,
    offsets: &[usize],
    config: &ModelConfig,
) -> Result<InputBatch<T>> {
    if record.features.len() != config.feature_count {
        return Err(Error::FeatureWidth {
            record: record.id.clone(),
            expected: config.feature_count,
            found: record.features.len(),
        });
    }
    let seqs = offsets
        .iter()
        .map(|&o| prepare_input(tok, record, o, config.max_len))
        .collect::<Result<Vec<_>>>()?;
    let feats = vec![&record.features[..]; offsets.len()];
    InputBatch::new(&seqs, &feats, config)
}

fn column_means<T: Scalar>(rows: usize, cols: usize, data: &[T]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x.as_f64();
        }
    }
    out.iter_mut().for_each(|x| *x /= rows as f64);
    out
}

/// Ranks every lab for one record, averaging the model's native output
/// (similarities or probabilities) over `tta_n` shifted copies.
pub fn rank_labs<T: Scalar>(model: &Model<T>, tok: &Tokenizer, record: &DnaRecord, tta_n: usize, seed: u64) -> Result<Ranking> {
    if tta_n == 0 {
        return Err(Error::invalid("tta must be at least 1"));
    }
    let offsets = tta_offsets(record.sequence().len(), tta_n, seed);
    let config = model.config();
    let batch = shifted_batch::<T>(tok, record, &offsets, config)?;
    match model {
        Model::Triplet(p) => {
            let e = embed_sequence(p, &batch)?;
            let s = lab_similarities(p, &e, true)?;
            let mut means = column_means(s.rows(), s.cols(), s.data());
            let unseen = means.pop();
            let mut r = Ranking::from_scores(RankingKind::Triplet, &means)?;
            r.unseen_score = unseen;
            Ok(r)
        }
        Model::Classifier(p) => {
            let probs = classifier_probs(p, &batch)?;
            Ranking::from_scores(RankingKind::Classifier, &column_means(probs.rows(), probs.cols(), probs.data()))
        }
    }
}

/// Fraction of rankings whose truth is within the first `k` entries.
pub fn top_k_accuracy(rankings: &[Ranking], truths: &[usize], k: usize) -> Result<f64> {
    if rankings.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} rankings for {} truths",
            rankings.len(),
            truths.len()
        )));
    }
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if rankings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = rankings
        .iter()
        .zip(truths)
        .filter(|(r, &t)| r.entries.iter().take(k).any(|e| e.0 == t))
        .count();
    Ok(hits as f64 / rankings.len() as f64)
}

/// Unknown when the best real lab scores below `threshold` or the unseen row
/// beats it.
pub fn detect_unknown(r: &Ranking, unseen_score: f64, threshold: f64) -> bool {
    let top = r.top().1;
    top < threshold || unseen_score > top
}

/// Mean of the per-shift embeddings of one record (not renormalized).
pub fn sequence_embedding<T: Scalar>(
    p: &TripletParams<T>,
    tok: &Tokenizer,
    record: &DnaRecord,
    tta_n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if tta_n == 0 {
        return Err(Error::invalid("tta must be at least 1"));
    }
    let offsets = tta_offsets(record.sequence().len(), tta_n, seed);
    let batch = shifted_batch::<T>(tok, record, &offsets, &p.config)?;
    let e = embed_sequence(p, &batch)?;
    Ok(column_means(e.rows(), e.cols(), e.data()))
}

/// Unit-norm lab embedding: the L2-normalized mean of the records'
/// TTA-averaged embeddings. Record `i` draws its shifts from
/// `derive(seed, [i])`.
pub fn lab_embedding_from_samples<T: Scalar>(
    p: &TripletParams<T>,
    tok: &Tokenizer,
    records: &[DnaRecord],
    tta_n: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if records.is_empty() {
        return Err(Error::invalid("lab embedding needs at least one sample"));
    }
    let mut mean = vec![0.0; p.config.embed_dim];
    for (i, r) in records.iter().enumerate() {
        let e = sequence_embedding(p, tok, r, tta_n, seed::derive(seed, &[i as u64]))?;
        mean.iter_mut().zip(&e).for_each(|(m, x)| *m += x);
    }
    let sq: f64 = mean.iter().map(|x| x * x).sum();
    if sq == 0.0 {
        return Err(Error::ZeroNorm { what: "lab embedding", row: 0 });
    }
    let n = num_traits::Float::sqrt(sq + L2_EPS);
    mean.iter_mut().for_each(|x| *x /= n);
    Ok(mean)
}
