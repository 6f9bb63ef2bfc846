//! Training loops for the triplet network and the classifier.
//!
//! Both loops are single-threaded and fully determined by the seed: epoch
//! `e` shuffles with `[SHUFFLE, e]` and shifts record `i` with
//! `[SHIFT, e, i]`.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Dataset;
use crate::mining::{hard_negatives, MiningBatch};
use crate::model::{
    classifier_forward, triplet_forward, ClassifierParams, InputBatch, ModelConfig, Parameters, TripletForward, TripletParams,
};
use crate::numeric::{AdamConfig, AdamState, Graph, NodeId, Precision, Scalar, Tensor};
use crate::rank::rank_position;
use crate::seed::{self, stream};
use crate::tokenize::{prepare_input, TokenSeq, Tokenizer};
use crate::{Error, Result};

/// `max(0, m - sim_ap + sim_an)`.
pub fn triplet_loss(sim_ap: f64, sim_an: f64, margin: f64) -> f64 {
    (margin - sim_ap + sim_an).max(0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub unseen_weight: f64,
    /// Fresh random circular shift per record per epoch.
    pub augment: bool,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            margin: 0.2,
            unseen_weight: 1.0,
            augment: true,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.margin > 0.0) || !self.margin.is_finite() {
            return Err(Error::invalid("margin must be positive"));
        }
        if !(self.unseen_weight >= 0.0) || !self.unseen_weight.is_finite() {
            return Err(Error::invalid("unseen_weight must be non-negative"));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            ..AdamConfig::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// One row of the training log. Train rows use the outputs seen during the
/// epoch (before each update); val rows use unshifted inputs after it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub top1: f64,
    pub top10: f64,
}

/// Nodes of the triplet objective built on a forward pass.
pub struct TripletLoss {
    /// Scalar mean loss.
    pub loss: NodeId,
    /// `(B, L)` anchor-to-real-lab similarities.
    pub similarities: NodeId,
    pub negatives: Vec<usize>,
}

/// Mean over the batch of
/// `hinge(sim(a, pos), sim(a, neg)) + unseen_weight * hinge(sim(a, pos), sim(a, unseen))`
/// with negatives mined from the current values of `fwd`.
pub fn triplet_loss_graph<T: Scalar>(
    g: &mut Graph<T>,
    fwd: &TripletForward,
    labels: &[usize],
    margin: f64,
    unseen_weight: f64,
) -> Result<TripletLoss> {
    let labs = g.value(fwd.labs).rows() - 1;
    let mined = hard_negatives(&MiningBatch::new(
        labels.to_vec(),
        g.value(fwd.anchors).clone(),
        g.value(fwd.labs).clone(),
    )?)?;
    let pos = g.gather(fwd.labs, labels)?;
    let neg = g.gather(fwd.labs, &mined.labs)?;
    let unseen = g.gather(fwd.labs, &vec![labs; labels.len()])?;
    let real: Vec<usize> = (0..labs).collect();
    let real = g.gather(fwd.labs, &real)?;
    let similarities = g.matmul_t(fwd.anchors, real)?;

    let ap = g.row_dot(fwd.anchors, pos)?;
    let an = g.row_dot(fwd.anchors, neg)?;
    let au = g.row_dot(fwd.anchors, unseen)?;
    let m = T::of(margin);
    let gap = g.sub(an, ap)?;
    let gap = g.add_scalar(gap, m)?;
    let hard = g.relu(gap)?;
    let gap = g.sub(au, ap)?;
    let gap = g.add_scalar(gap, m)?;
    let away = g.relu(gap)?;
    let away = g.scale(away, T::of(unseen_weight))?;
    let per_anchor = g.add(hard, away)?;
    let loss = g.mean(per_anchor)?;
    Ok(TripletLoss {
        loss,
        similarities,
        negatives: mined.labs,
    })
}

fn check_inputs(ds: &Dataset, tok: &Tokenizer, mc: &ModelConfig, tc: &TrainConfig) -> Result<()> {
    tc.validate()?;
    mc.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if ds.lab_count() < 2 {
        return Err(Error::invalid("training needs at least two labs"));
    }
    if ds.lab_count() != mc.lab_count || ds.feature_count() != mc.feature_count {
        return Err(Error::invalid(format!(
            "dataset has {} labs and {} features, model expects {} and {}",
            ds.lab_count(),
            ds.feature_count(),
            mc.lab_count,
            mc.feature_count
        )));
    }
    if tok.vocab_size() > mc.vocab_size {
        return Err(Error::invalid(format!(
            "tokenizer has {} tokens, model vocabulary is {}",
            tok.vocab_size(),
            mc.vocab_size
        )));
    }
    Ok(())
}

/// Records of one mini-batch, already shifted and encoded.
struct PreparedBatch<T> {
    input: InputBatch<T>,
    labels: Vec<usize>,
}

fn prepare<T: Scalar>(
    ds: &Dataset,
    indices: &[usize],
    offsets: &[usize],
    tok: &Tokenizer,
    mc: &ModelConfig,
) -> Result<PreparedBatch<T>> {
    let mut seqs: Vec<TokenSeq> = Vec::with_capacity(indices.len());
    let mut feats: Vec<&[bool]> = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    for (&i, &off) in indices.iter().zip(offsets) {
        let r = &ds.records()[i];
        seqs.push(prepare_input(tok, r, off, mc.max_len)?);
        feats.push(&r.features);
        labels.push(r.lab);
    }
    Ok(PreparedBatch {
        input: InputBatch::new(&seqs, &feats, mc)?,
        labels,
    })
}

/// Shuffled batches of record indices and their shift offsets for `epoch`.
fn epoch_plan(ds: &Dataset, tc: &TrainConfig, epoch: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let mut order: Vec<usize> = (0..ds.len()).collect();
    order.shuffle(&mut seed::rng(tc.seed, &[stream::SHUFFLE, epoch as u64]));
    order
        .chunks(tc.batch_size)
        .map(|chunk| {
            let offsets = chunk
                .iter()
                .map(|&i| {
                    if tc.augment {
                        let len = ds.records()[i].sequence().len();
                        seed::rng(tc.seed, &[stream::SHIFT, epoch as u64, i as u64]).gen_range(0..len)
                    } else {
                        0
                    }
                })
                .collect();
            (chunk.to_vec(), offsets)
        })
        .collect()
}

fn eval_batches(ds: &Dataset, batch_size: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let all: Vec<usize> = (0..ds.len()).collect();
    all.chunks(batch_size).map(|c| (c.to_vec(), vec![0; c.len()])).collect()
}

#[derive(Default)]
struct Tally {
    loss: f64,
    hits1: usize,
    hits10: usize,
    n: usize,
}

impl Tally {
    fn add<T: Scalar>(&mut self, loss: f64, scores: &Tensor<T>, labels: &[usize]) {
        self.loss += loss * labels.len() as f64;
        for (r, &truth) in labels.iter().enumerate() {
            let pos = rank_position(scores.row(r), truth);
            self.hits1 += usize::from(pos < 1);
            self.hits10 += usize::from(pos < 10);
        }
        self.n += labels.len();
    }

    fn log(&self, epoch: usize, split: Split) -> EpochLog {
        let n = self.n.max(1) as f64;
        EpochLog {
            epoch,
            split,
            loss: self.loss / n,
            top1: self.hits1 as f64 / n,
            top10: self.hits10 as f64 / n,
        }
    }
}

fn diverged(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { .. } | Error::ZeroNorm { .. } => Error::Diverged { epoch, batch },
        other => other,
    }
}

/// Applies one Adam step from `grads` (keyed by parameter name).
fn apply<T: Scalar, P: Parameters<T>>(
    p: &mut P,
    adam: &mut AdamState<T>,
    grads: &alloc::collections::BTreeMap<String, Tensor<T>>,
    epoch: usize,
    batch: usize,
) -> Result<()> {
    let mut slots = p.named_mut();
    let gs: Vec<&Tensor<T>> = slots.iter().map(|(n, _)| &grads[n]).collect();
    if gs.iter().any(|g| !g.all_finite()) {
        return Err(Error::Diverged { epoch, batch });
    }
    let mut params: Vec<&mut Tensor<T>> = slots.iter_mut().map(|(_, t)| &mut **t).collect();
    adam.step(&mut params, &gs)
}

fn new_adam<T: Scalar, P: Parameters<T>>(p: &P, tc: &TrainConfig) -> AdamState<T> {
    let named = p.named();
    AdamState::new(tc.adam(), named.iter().map(|(_, t)| t.shape()))
}

/// Triplet-network training. The model's margin is set from `tc`.
pub fn train_triplet<T: Scalar>(
    train: &Dataset,
    val: Option<&Dataset>,
    tok: &Tokenizer,
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(TripletParams<T>, Vec<EpochLog>)> {
    check_inputs(train, tok, mc, tc)?;
    let mut mc = mc.clone();
    mc.margin = tc.margin;
    let mut params = TripletParams::<T>::init(&mc, tc.seed)?;
    let mut adam = new_adam(&params, tc);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut log = Vec::new();
    for epoch in 0..tc.epochs {
        let mut tally = Tally::default();
        for (b, (indices, offsets)) in epoch_plan(train, tc, epoch).iter().enumerate() {
            let step = || -> Result<_> {
                let batch = prepare::<T>(train, indices, offsets, tok, &mc)?;
                let mut g = Graph::new();
                let fwd = triplet_forward(&mut g, &params, &batch.input)?;
                let obj = triplet_loss_graph(&mut g, &fwd, &batch.labels, tc.margin, tc.unseen_weight)?;
                let grads = g.gradients(obj.loss, &wrt)?;
                let loss = g.value(obj.loss).data()[0].as_f64();
                let sims = g.value(obj.similarities).clone();
                Ok((grads, loss, sims, batch.labels))
            };
            let (grads, loss, sims, labels) = step().map_err(|e| diverged(e, epoch + 1, b + 1))?;
            tally.add(loss, &sims, &labels);
            apply(&mut params, &mut adam, &grads, epoch + 1, b + 1)?;
        }
        log.push(tally.log(epoch + 1, Split::Train));
        if let Some(v) = val {
            log.push(evaluate_triplet(&params, v, tok, tc)?.log(epoch + 1, Split::Val));
        }
    }
    Ok((params, log))
}

fn evaluate_triplet<T: Scalar>(p: &TripletParams<T>, ds: &Dataset, tok: &Tokenizer, tc: &TrainConfig) -> Result<Tally> {
    let mut tally = Tally::default();
    for (indices, offsets) in eval_batches(ds, tc.batch_size) {
        let batch = prepare::<T>(ds, &indices, &offsets, tok, &p.config)?;
        let mut g = Graph::new();
        let fwd = triplet_forward(&mut g, p, &batch.input)?;
        let obj = triplet_loss_graph(&mut g, &fwd, &batch.labels, tc.margin, tc.unseen_weight)?;
        tally.add(g.value(obj.loss).data()[0].as_f64(), g.value(obj.similarities), &batch.labels);
    }
    Ok(tally)
}

/// Supervised softmax cross-entropy training.
pub fn train_classifier<T: Scalar>(
    train: &Dataset,
    val: Option<&Dataset>,
    tok: &Tokenizer,
    mc: &ModelConfig,
    tc: &TrainConfig,
) -> Result<(ClassifierParams<T>, Vec<EpochLog>)> {
    check_inputs(train, tok, mc, tc)?;
    let mut params = ClassifierParams::<T>::init(mc, tc.seed)?;
    let mut adam = new_adam(&params, tc);
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut log = Vec::new();
    for epoch in 0..tc.epochs {
        let mut tally = Tally::default();
        for (b, (indices, offsets)) in epoch_plan(train, tc, epoch).iter().enumerate() {
            let step = || -> Result<_> {
                let batch = prepare::<T>(train, indices, offsets, tok, mc)?;
                let mut g = Graph::new();
                let fwd = classifier_forward(&mut g, &params, &batch.input)?;
                let ce = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
                let loss = g.mean(ce)?;
                let grads = g.gradients(loss, &wrt)?;
                let value = g.value(loss).data()[0].as_f64();
                Ok((grads, value, g.value(fwd.logits).clone(), batch.labels))
            };
            let (grads, loss, logits, labels) = step().map_err(|e| diverged(e, epoch + 1, b + 1))?;
            tally.add(loss, &logits, &labels);
            apply(&mut params, &mut adam, &grads, epoch + 1, b + 1)?;
        }
        log.push(tally.log(epoch + 1, Split::Train));
        if let Some(v) = val {
            log.push(evaluate_classifier(&params, v, tok, tc)?.log(epoch + 1, Split::Val));
        }
    }
    Ok((params, log))
}

fn evaluate_classifier<T: Scalar>(p: &ClassifierParams<T>, ds: &Dataset, tok: &Tokenizer, tc: &TrainConfig) -> Result<Tally> {
    let mut tally = Tally::default();
    for (indices, offsets) in eval_batches(ds, tc.batch_size) {
        let batch = prepare::<T>(ds, &indices, &offsets, tok, &p.config)?;
        let mut g = Graph::new();
        let fwd = classifier_forward(&mut g, p, &batch.input)?;
        let ce = g.softmax_cross_entropy(fwd.logits, &batch.labels)?;
        let loss = g.mean(ce)?;
        tally.add(g.value(loss).data()[0].as_f64(), g.value(fwd.logits), &batch.labels);
    }
    Ok(tally)
}

/// Mean cross-entropy of `p` on `ds` with unshifted inputs.
pub fn classifier_loss<T: Scalar>(p: &ClassifierParams<T>, ds: &Dataset, tok: &Tokenizer) -> Result<f64> {
    let tc = TrainConfig::default();
    let t = evaluate_classifier(p, ds, tok, &tc)?;
    Ok(t.loss / t.n.max(1) as f64)
}

/// Mean triplet objective of `p` on `ds` with unshifted inputs.
pub fn triplet_objective<T: Scalar>(p: &TripletParams<T>, ds: &Dataset, tok: &Tokenizer, unseen_weight: f64) -> Result<f64> {
    let tc = TrainConfig {
        margin: p.config.margin,
        unseen_weight,
        ..TrainConfig::default()
    };
    let t = evaluate_triplet(p, ds, tok, &tc)?;
    Ok(t.loss / t.n.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_synthetic, SyntheticSpec};
    use crate::model::{embed_sequence, lab_similarities};
    use crate::numeric::grad_check;
    use crate::tokenize::train_bpe;
    use alloc::collections::BTreeMap;

    #[test]
    fn hinge_examples() {
        assert_eq!(triplet_loss(1.0, 0.0, 0.2), 0.0);
        assert!((triplet_loss(0.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        assert!((triplet_loss(0.4, 0.4, 0.2) - 0.2).abs() < 1e-12);
        assert_eq!(triplet_loss(0.5, 0.3, 0.2), 0.0);
    }

    fn tiny_setup(labs: usize, per_lab: usize, noise: f64) -> (Dataset, Tokenizer, ModelConfig) {
        let ds = make_synthetic(SyntheticSpec {
            n_labs: labs,
            per_lab,
            motif_len: 8,
            seq_len: 60,
            noise,
            seed: 3,
        })
        .unwrap();
        let seqs: Vec<&str> = ds.records().iter().map(|r| r.sequence()).collect();
        let tok = train_bpe(&seqs, 40).unwrap();
        let mc = ModelConfig {
            vocab_size: tok.vocab_size(),
            max_len: 48,
            token_embed_dim: 8,
            kernel_sizes: vec![3, 5],
            filters_per_kernel: 16,
            feature_count: ds.feature_count(),
            embed_dim: 12,
            lab_count: ds.lab_count(),
            hidden_dim: 16,
            margin: 0.2,
        };
        (ds, tok, mc)
    }

    fn tc(epochs: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            learning_rate: 3e-3,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { margin: 0.0, ..TrainConfig::default() }.validate().is_err());
        let (ds, tok, mc) = tiny_setup(3, 4, 0.0);
        let one = ds.restrict_labs(&[0]).unwrap();
        let mc1 = ModelConfig { lab_count: 1, ..mc };
        assert!(train_triplet::<f32>(&one, None, &tok, &mc1, &tc(1, 0)).is_err());
    }

    #[test]
    fn triplet_loss_decreases_and_is_deterministic() {
        let (ds, tok, mc) = tiny_setup(10, 20, 0.0);
        let (p1, log1) = train_triplet::<f32>(&ds, None, &tok, &mc, &tc(5, 7)).unwrap();
        let (p2, log2) = train_triplet::<f32>(&ds, None, &tok, &mc, &tc(5, 7)).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(log1, log2);
        let losses: Vec<f64> = log1.iter().map(|r| r.loss).collect();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn training_separates_true_labs_and_repels_unseen() {
        let (ds, tok, mc) = tiny_setup(6, 12, 0.0);
        let init = TripletParams::<f64>::init(&mc, 11).unwrap();
        let (p, _) = train_triplet::<f64>(&ds, None, &tok, &mc, &tc(12, 11)).unwrap();
        let all: Vec<usize> = (0..ds.len()).collect();
        let batch = prepare::<f64>(&ds, &all, &vec![0; ds.len()], &tok, &mc).unwrap();
        let unseen_mean = |q: &TripletParams<f64>| {
            let e = embed_sequence(q, &batch.input).unwrap();
            let s = lab_similarities(q, &e, true).unwrap();
            (0..s.rows()).map(|r| s.row(r)[mc.lab_count]).sum::<f64>() / s.rows() as f64
        };
        assert!(unseen_mean(&p) < unseen_mean(&init));

        let e = embed_sequence(&p, &batch.input).unwrap();
        let mined = hard_negatives(&MiningBatch::new(batch.labels.clone(), e.clone(), p.lab_table.clone()).unwrap()).unwrap();
        let s = lab_similarities(&p, &e, false).unwrap();
        let pos: f64 = batch.labels.iter().enumerate().map(|(r, &l)| s.row(r)[l]).sum();
        let neg: f64 = mined.labs.iter().enumerate().map(|(r, &l)| s.row(r)[l]).sum();
        assert!(pos > neg);
    }

    #[test]
    fn classifier_starts_near_uniform_and_improves() {
        let (ds, tok, mc) = tiny_setup(10, 8, 0.0);
        let init = ClassifierParams::<f64>::init(&mc, 4).unwrap();
        let l0 = classifier_loss(&init, &ds, &tok).unwrap();
        let ln10 = 10f64.ln();
        assert!((l0 - ln10).abs() < 0.1 * ln10, "{l0}");
        let (p1, log) = train_classifier::<f32>(&ds, Some(&ds), &tok, &mc, &tc(5, 4)).unwrap();
        let (p2, _) = train_classifier::<f32>(&ds, Some(&ds), &tok, &mc, &tc(5, 4)).unwrap();
        assert_eq!(p1, p2);
        let train: Vec<f64> = log.iter().filter(|r| r.split == Split::Train).map(|r| r.loss).collect();
        assert_eq!(train.len(), 5);
        assert_eq!(log.len(), 10);
        assert!(train.windows(2).all(|w| w[1] < w[0]), "{train:?}");
    }

    #[test]
    fn small_adam_step_reduces_a_single_triplet() {
        let (ds, tok, mc) = tiny_setup(4, 3, 0.1);
        let p = TripletParams::<f64>::init(&mc, 2).unwrap();
        let batch = prepare::<f64>(&ds, &[5], &[0], &tok, &mc).unwrap();
        let loss_of = |q: &TripletParams<f64>| {
            let mut g = Graph::new();
            let fwd = triplet_forward(&mut g, q, &batch.input).unwrap();
            let obj = triplet_loss_graph(&mut g, &fwd, &batch.labels, 0.2, 1.0).unwrap();
            (g, obj.loss)
        };
        let (g, loss) = loss_of(&p);
        let before = g.value(loss).data()[0];
        assert!(before > 0.0);
        let names: Vec<String> = p.named().into_iter().map(|(n, _)| n).collect();
        let wrt: Vec<&str> = names.iter().map(String::as_str).collect();
        let grads = g.gradients(loss, &wrt).unwrap();
        let mut q = p.clone();
        let cfg = TrainConfig { learning_rate: 1e-4, ..TrainConfig::default() };
        let mut adam = new_adam(&q, &cfg);
        apply(&mut q, &mut adam, &grads, 1, 1).unwrap();
        let (g2, loss2) = loss_of(&q);
        assert!(g2.value(loss2).data()[0] < before);
    }

    #[test]
    fn triplet_objective_gradients_match_finite_differences() {
        let (ds, tok, mut mc) = tiny_setup(3, 2, 0.1);
        mc.token_embed_dim = 3;
        mc.filters_per_kernel = 4;
        mc.embed_dim = 4;
        mc.max_len = 12;
        let p = TripletParams::<f64>::init(&mc, 9).unwrap();
        let batch = prepare::<f64>(&ds, &[0, 2, 4], &[0, 3, 7], &tok, &mc).unwrap();
        let mut g = Graph::new();
        let fwd = triplet_forward(&mut g, &p, &batch.input).unwrap();
        let obj = triplet_loss_graph(&mut g, &fwd, &batch.labels, 0.5, 1.0).unwrap();
        let point: BTreeMap<String, Tensor<f64>> = p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let err = grad_check(&mut g, obj.loss, &point, 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }
}
