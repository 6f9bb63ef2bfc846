//! The convolutional sequence encoder and its two heads.
//!
//! Both models share one layout up to the feature vector: token embedding,
//! a bank of 1-D convolutions with different kernel sizes, ReLU and masked
//! max-over-time pooling, then the pooled features concatenated with the
//! record's binary features. The classifier continues with a ReLU hidden
//! layer and a softmax output over labs; the triplet network projects to an
//! L2-normalized embedding that is compared against a learned lab table by
//! cosine similarity. The two models never share weights.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::numeric::{Graph, NodeId, Scalar, Tensor, L2_EPS};
use crate::seed::{self, stream};
use crate::tokenize::{TokenSeq, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use crate::{Error, Result};

/// Architecture and loss hyperparameters. Persisted with checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub token_embed_dim: usize,
    pub kernel_sizes: Vec<usize>,
    pub filters_per_kernel: usize,
    pub feature_count: usize,
    pub embed_dim: usize,
    pub lab_count: usize,
    pub hidden_dim: usize,
    pub margin: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            vocab_size: DEFAULT_VOCAB_SIZE,
            max_len: DEFAULT_MAX_LEN,
            token_embed_dim: 64,
            kernel_sizes: vec![3, 4, 5],
            filters_per_kernel: 128,
            feature_count: 0,
            embed_dim: 200,
            lab_count: 0,
            hidden_dim: 256,
            margin: 0.2,
        }
    }
}

impl ModelConfig {
    /// Defaults for everything except the data-dependent sizes.
    pub fn new(vocab_size: usize, feature_count: usize, lab_count: usize) -> Self {
        ModelConfig {
            vocab_size,
            feature_count,
            lab_count,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let max_kernel = self.max_kernel();
        let dims = [
            self.vocab_size,
            self.max_len,
            self.token_embed_dim,
            self.filters_per_kernel,
            self.lab_count,
            self.hidden_dim,
        ];
        if dims.contains(&0) || self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if max_kernel > self.max_len {
            return Err(Error::invalid(format!(
                "kernel size {max_kernel} exceeds max_len {}",
                self.max_len
            )));
        }
        if self.embed_dim < 2 {
            return Err(Error::invalid("embed_dim must be at least 2"));
        }
        if !(self.margin > 0.0) {
            return Err(Error::invalid("margin must be positive"));
        }
        Ok(())
    }

    pub fn max_kernel(&self) -> usize {
        self.kernel_sizes.iter().copied().max().unwrap_or(0)
    }

    /// Width of the pooled conv features plus the binary features.
    pub fn feature_width(&self) -> usize {
        self.kernel_sizes.len() * self.filters_per_kernel + self.feature_count
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Triplet,
    Classifier,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Triplet => "triplet",
            ModelKind::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub kernel: usize,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Token embedding table plus the convolution bank.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder<T> {
    pub token_embedding: Tensor<T>,
    pub convs: Vec<ConvLayer<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletParams<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub projector: DenseLayer<T>,
    /// `(L + 1, E)`; row `L` is the unseen lab.
    pub lab_table: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams<T> {
    pub config: ModelConfig,
    pub encoder: Encoder<T>,
    pub hidden: DenseLayer<T>,
    pub output: DenseLayer<T>,
}

/// Uniform access to a model's tensors in a fixed order.
pub trait Parameters<T: Scalar>: Sized {
    const KIND: ModelKind;

    fn config(&self) -> &ModelConfig;

    /// All-zero parameters with the shapes implied by `config`.
    fn zeros(config: &ModelConfig) -> Result<Self>;

    fn named(&self) -> Vec<(String, &Tensor<T>)>;

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)>;

    /// Builds parameters by asking `lookup` for every tensor by name.
    fn from_named(
        config: &ModelConfig,
        mut lookup: impl FnMut(&str) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        for (name, slot) in p.named_mut() {
            let t = lookup(&name)?;
            if t.shape() != slot.shape() {
                return Err(Error::shape(
                    "parameters",
                    format!("{name}: expected {:?}, got {:?}", slot.shape(), t.shape()),
                ));
            }
            *slot = t;
        }
        Ok(p)
    }

    fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn conv_name(k: usize, part: &str) -> String {
    format!("conv{k}.{part}")
}

impl<T: Scalar> Encoder<T> {
    fn zeros(c: &ModelConfig) -> Self {
        Encoder {
            token_embedding: Tensor::zeros(&[c.vocab_size, c.token_embed_dim]),
            convs: c
                .kernel_sizes
                .iter()
                .map(|&k| ConvLayer {
                    kernel: k,
                    weight: Tensor::zeros(&[k, c.token_embed_dim, c.filters_per_kernel]),
                    bias: Tensor::zeros(&[c.filters_per_kernel]),
                })
                .collect(),
        }
    }

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![(String::from("token_embedding"), &self.token_embedding)];
        for c in &self.convs {
            out.push((conv_name(c.kernel, "weight"), &c.weight));
            out.push((conv_name(c.kernel, "bias"), &c.bias));
        }
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![(String::from("token_embedding"), &mut self.token_embedding)];
        for c in &mut self.convs {
            out.push((conv_name(c.kernel, "weight"), &mut c.weight));
            out.push((conv_name(c.kernel, "bias"), &mut c.bias));
        }
        out
    }

    fn init(&mut self, rng: &mut seed::Rng) {
        normal_fill(&mut self.token_embedding, rng);
        for c in &mut self.convs {
            let s = c.weight.shape().to_vec();
            glorot_fill(&mut c.weight, s[0] * s[1], s[0] * s[2], rng);
        }
    }

    fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            token_embedding: self.token_embedding.cast(),
            convs: self
                .convs
                .iter()
                .map(|c| ConvLayer {
                    kernel: c.kernel,
                    weight: c.weight.cast(),
                    bias: c.bias.cast(),
                })
                .collect(),
        }
    }
}

impl<T: Scalar> DenseLayer<T> {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseLayer {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    fn init(&mut self, rng: &mut seed::Rng) {
        let (i, o) = (self.weight.rows(), self.weight.cols());
        glorot_fill(&mut self.weight, i, o, rng);
    }

    fn cast<U: Scalar>(&self) -> DenseLayer<U> {
        DenseLayer {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

fn glorot_fill<T: Scalar>(t: &mut Tensor<T>, fan_in: usize, fan_out: usize, rng: &mut seed::Rng) {
    let limit = num_traits::Float::sqrt(6.0 / (fan_in + fan_out) as f64);
    for x in t.data_mut() {
        *x = T::of(rng.gen_range(-limit..limit));
    }
}

fn normal_fill<T: Scalar>(t: &mut Tensor<T>, rng: &mut seed::Rng) {
    let dist = Normal::new(0.0, 0.05).expect("valid normal");
    for x in t.data_mut() {
        *x = T::of(dist.sample(rng));
    }
}

impl<T: Scalar> Parameters<T> for TripletParams<T> {
    const KIND: ModelKind = ModelKind::Triplet;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn zeros(c: &ModelConfig) -> Result<Self> {
        c.validate()?;
        Ok(TripletParams {
            config: c.clone(),
            encoder: Encoder::zeros(c),
            projector: DenseLayer::zeros(c.feature_width(), c.embed_dim),
            lab_table: Tensor::zeros(&[c.lab_count + 1, c.embed_dim]),
        })
    }

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named();
        out.push(("projector.weight".into(), &self.projector.weight));
        out.push(("projector.bias".into(), &self.projector.bias));
        out.push(("lab_table".into(), &self.lab_table));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.named_mut();
        out.push(("projector.weight".into(), &mut self.projector.weight));
        out.push(("projector.bias".into(), &mut self.projector.bias));
        out.push(("lab_table".into(), &mut self.lab_table));
        out
    }
}

impl<T: Scalar> TripletParams<T> {
    /// Glorot-uniform conv and dense weights, zero biases, `N(0, 0.05)`
    /// token and lab embeddings.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(seed, &[stream::INIT, 1]);
        p.encoder.init(&mut rng);
        p.projector.init(&mut rng);
        normal_fill(&mut p.lab_table, &mut rng);
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> TripletParams<U> {
        TripletParams {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            projector: self.projector.cast(),
            lab_table: self.lab_table.cast(),
        }
    }

    /// Appends a lab row just before the unseen row (which stays last).
    pub fn with_appended_lab(&self, embedding: &[T]) -> Result<Self> {
        let e = self.config.embed_dim;
        if embedding.len() != e {
            return Err(Error::shape("lab_table", format!("embedding has {} values, expected {e}", embedding.len())));
        }
        let l = self.config.lab_count;
        let mut data = self.lab_table.data()[..l * e].to_vec();
        data.extend_from_slice(embedding);
        data.extend_from_slice(self.lab_table.row(l));
        let mut p = self.clone();
        p.config.lab_count = l + 1;
        p.lab_table = Tensor::matrix(l + 2, e, data)?;
        Ok(p)
    }
}

impl<T: Scalar> Parameters<T> for ClassifierParams<T> {
    const KIND: ModelKind = ModelKind::Classifier;

    fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn zeros(c: &ModelConfig) -> Result<Self> {
        c.validate()?;
        Ok(ClassifierParams {
            config: c.clone(),
            encoder: Encoder::zeros(c),
            hidden: DenseLayer::zeros(c.feature_width(), c.hidden_dim),
            output: DenseLayer::zeros(c.hidden_dim, c.lab_count),
        })
    }

    fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = self.encoder.named();
        out.push(("hidden.weight".into(), &self.hidden.weight));
        out.push(("hidden.bias".into(), &self.hidden.bias));
        out.push(("output.weight".into(), &self.output.weight));
        out.push(("output.bias".into(), &self.output.bias));
        out
    }

    fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = self.encoder.named_mut();
        out.push(("hidden.weight".into(), &mut self.hidden.weight));
        out.push(("hidden.bias".into(), &mut self.hidden.bias));
        out.push(("output.weight".into(), &mut self.output.weight));
        out.push(("output.bias".into(), &mut self.output.bias));
        out
    }
}

impl<T: Scalar> ClassifierParams<T> {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng(seed, &[stream::INIT, 2]);
        p.encoder.init(&mut rng);
        p.hidden.init(&mut rng);
        p.output.init(&mut rng);
        Ok(p)
    }

    pub fn cast<U: Scalar>(&self) -> ClassifierParams<U> {
        ClassifierParams {
            config: self.config.clone(),
            encoder: self.encoder.cast(),
            hidden: self.hidden.cast(),
            output: self.output.cast(),
        }
    }
}

/// Either trained model.
#[derive(Debug, Clone, PartialEq)]
pub enum Model<T> {
    Triplet(TripletParams<T>),
    Classifier(ClassifierParams<T>),
}

impl<T: Scalar> Model<T> {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Triplet(_) => ModelKind::Triplet,
            Model::Classifier(_) => ModelKind::Classifier,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Model::Triplet(p) => &p.config,
            Model::Classifier(p) => &p.config,
        }
    }
}

/// A batch of fixed-length token sequences with their binary features.
///
/// Only the leading `width` columns of each padded sequence are kept, where
/// `width` covers every window that pooling can select
/// (`max true_len + max kernel - 1`, capped at `max_len`). Windows starting at
/// or past `true_len` are ignored by pooling, so the trimmed batch gives the
/// same outputs as the fully padded one.
#[derive(Debug, Clone, PartialEq)]
pub struct InputBatch<T> {
    ids: Vec<u32>,
    lens: Vec<usize>,
    width: usize,
    features: Tensor<T>,
}

impl<T: Scalar> InputBatch<T> {
    pub fn new(seqs: &[TokenSeq], features: &[&[bool]], config: &ModelConfig) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if seqs.len() != features.len() {
            return Err(Error::shape("batch", "one feature vector per sequence required"));
        }
        let kmax = config.max_kernel();
        let longest = seqs.iter().map(|s| s.true_len).max().unwrap_or(0);
        let width = (longest + kmax.saturating_sub(1)).clamp(kmax, config.max_len);
        let mut ids = Vec::with_capacity(seqs.len() * width);
        let mut lens = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.ids.len() != config.max_len || s.true_len == 0 || s.true_len > config.max_len {
                return Err(Error::shape(
                    "batch",
                    format!("sequence of {} ids (true_len {}) for max_len {}", s.ids.len(), s.true_len, config.max_len),
                ));
            }
            if s.ids.iter().any(|&id| id as usize >= config.vocab_size) {
                return Err(Error::shape("batch", "token id outside the model vocabulary"));
            }
            ids.extend_from_slice(&s.ids[..width]);
            lens.push(s.true_len);
        }
        let mut feat = Vec::with_capacity(seqs.len() * config.feature_count);
        for f in features {
            if f.len() != config.feature_count {
                return Err(Error::shape(
                    "batch",
                    format!("{} features, model expects {}", f.len(), config.feature_count),
                ));
            }
            feat.extend(f.iter().map(|&b| if b { T::one() } else { T::zero() }));
        }
        Ok(InputBatch {
            ids,
            lens,
            width,
            features: Tensor::matrix(seqs.len(), config.feature_count, feat)?,
        })
    }

    pub fn len(&self) -> usize {
        self.lens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lens.is_empty()
    }
}

/// Named parameter inputs of a graph, in [`Parameters::named`] order.
pub struct ParamNodes {
    pub names: Vec<String>,
    pub ids: Vec<NodeId>,
}

impl ParamNodes {
    fn get(&self, name: &str) -> NodeId {
        let i = self.names.iter().position(|n| n == name).expect("parameter fed to graph");
        self.ids[i]
    }
}

/// Feeds every parameter tensor into `g` as a named input.
pub fn feed<T: Scalar, P: Parameters<T>>(g: &mut Graph<T>, p: &P) -> Result<ParamNodes> {
    let mut names = Vec::new();
    let mut ids = Vec::new();
    for (name, t) in p.named() {
        ids.push(g.input(&name, t.clone())?);
        names.push(name);
    }
    Ok(ParamNodes { names, ids })
}

/// Encoder up to the concatenated `(B, n_kernels * filters + F)` features.
fn encode<T: Scalar>(g: &mut Graph<T>, nodes: &ParamNodes, c: &ModelConfig, batch: &InputBatch<T>) -> Result<NodeId> {
    let emb = g.embedding(nodes.get("token_embedding"), &batch.ids, batch.len(), batch.width)?;
    let mut parts = Vec::with_capacity(c.kernel_sizes.len() + 1);
    for &k in &c.kernel_sizes {
        let w = nodes.get(&conv_name(k, "weight"));
        let b = nodes.get(&conv_name(k, "bias"));
        let conv = g.conv1d(emb, w, b, Some(&batch.lens))?;
        let pooled = g.max_over_time(conv, Some(&batch.lens))?;
        // relu commutes with max, so pooling first is the same as relu(conv)
        parts.push(g.relu(pooled)?);
    }
    parts.push(g.constant(batch.features.clone()));
    g.concat(&parts)
}

/// Graph nodes of a triplet-network forward pass.
pub struct TripletForward {
    pub params: ParamNodes,
    /// `(B, E)` unit-norm sequence embeddings.
    pub anchors: NodeId,
    /// `(L + 1, E)` unit-norm lab rows, unseen last.
    pub labs: NodeId,
}

pub fn triplet_forward<T: Scalar>(g: &mut Graph<T>, p: &TripletParams<T>, batch: &InputBatch<T>) -> Result<TripletForward> {
    let params = feed(g, p)?;
    let features = encode(g, &params, &p.config, batch)?;
    let projected = g.dense(features, params.get("projector.weight"), params.get("projector.bias"))?;
    let anchors = g.l2_normalize(projected)?;
    let labs = g.l2_normalize(params.get("lab_table"))?;
    Ok(TripletForward { params, anchors, labs })
}

/// Graph nodes of a classifier forward pass.
pub struct ClassifierForward {
    pub params: ParamNodes,
    /// `(B, L)` pre-softmax scores.
    pub logits: NodeId,
}

pub fn classifier_forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &ClassifierParams<T>,
    batch: &InputBatch<T>,
) -> Result<ClassifierForward> {
    let params = feed(g, p)?;
    let features = encode(g, &params, &p.config, batch)?;
    let hidden = g.dense(features, params.get("hidden.weight"), params.get("hidden.bias"))?;
    let hidden = g.relu(hidden)?;
    let logits = g.dense(hidden, params.get("output.weight"), params.get("output.bias"))?;
    Ok(ClassifierForward { params, logits })
}

/// `(B, E)` unit-norm sequence embeddings.
pub fn embed_sequence<T: Scalar>(p: &TripletParams<T>, batch: &InputBatch<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = triplet_forward(&mut g, p, batch)?;
    Ok(g.value(f.anchors).clone())
}

/// `(B, L)` softmax probabilities.
pub fn classifier_probs<T: Scalar>(p: &ClassifierParams<T>, batch: &InputBatch<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let f = classifier_forward(&mut g, p, batch)?;
    let probs = g.softmax(f.logits)?;
    Ok(g.value(probs).clone())
}

/// Cosine similarity of each (unit-norm) sequence embedding against every
/// normalized lab row: `(B, L)`, or `(B, L + 1)` with the unseen row last.
pub fn lab_similarities<T: Scalar>(
    p: &TripletParams<T>,
    seq_embeddings: &Tensor<T>,
    include_unseen: bool,
) -> Result<Tensor<T>> {
    let e = p.config.embed_dim;
    if seq_embeddings.shape().len() != 2 || seq_embeddings.cols() != e {
        return Err(Error::shape(
            "lab_similarities",
            format!("embeddings {:?}, expected (B, {e})", seq_embeddings.shape()),
        ));
    }
    let rows = if include_unseen { p.config.lab_count + 1 } else { p.config.lab_count };
    let labs = normalized_rows(&p.lab_table, rows, "lab_table")?;
    let mut out = Vec::with_capacity(seq_embeddings.rows() * rows);
    for b in 0..seq_embeddings.rows() {
        let s = seq_embeddings.row(b);
        for l in labs.chunks_exact(e) {
            out.push(s.iter().zip(l).fold(T::zero(), |acc, (&x, &y)| acc + x * y));
        }
    }
    Tensor::matrix(seq_embeddings.rows(), rows, out)
}

/// The first `rows` rows of `t`, each scaled to unit norm.
pub fn normalized_rows<T: Scalar>(t: &Tensor<T>, rows: usize, what: &'static str) -> Result<Vec<T>> {
    let mut out = Vec::with_capacity(rows * t.cols());
    for r in 0..rows {
        let row = t.row(r);
        let sq: T = row.iter().map(|&x| x * x).sum();
        if sq == T::zero() {
            return Err(Error::ZeroNorm { what, row: r });
        }
        let n = (sq + T::of(L2_EPS)).sqrt();
        out.extend(row.iter().map(|&x| x / n));
    }
    Ok(out)
}
