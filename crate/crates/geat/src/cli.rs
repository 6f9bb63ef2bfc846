//! The `geat` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use geat_core::cluster::{elbow_k, kmeans, DEFAULT_MAX_ITERS, DEFAULT_RESTARTS};
use geat_core::corpus::{make_synthetic, split_stratified, Dataset, LabVocab, SyntheticSpec};
use geat_core::ensemble::{borda_aggregate, copeland_aggregate, RankingProfile};
use geat_core::model::{Model, ModelConfig, TripletParams};
use geat_core::numeric::{Precision, Tensor};
use geat_core::rank::{
    detect_unknown, lab_embedding_from_samples, rank_labs, sequence_embedding, top_k_accuracy, Ranking, RankingKind,
    DEFAULT_TTA,
};
use geat_core::seed;
use geat_core::tokenize::{train_bpe, DEFAULT_MAX_LEN, DEFAULT_VOCAB_SIZE};
use geat_core::train::{train_classifier, train_triplet, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;

use crate::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
use crate::data::{read_dataset, read_labs, read_tokenizer, write_dataset, write_labs, write_tokenizer};
use crate::error::{GeatError, Result};
use crate::manifest::{sibling, RunManifest};
use crate::pca::project_2d;
use crate::tables::{
    read_lab_embeddings, read_rankings, write_clusters, write_embeddings, write_log, write_pca, write_rankings,
    write_report, write_unknown, write_wcss, UnknownRow,
};

#[derive(Debug, Parser)]
#[command(name = "geat", version, about = "Attribute engineered DNA sequences to their lab of origin")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus with planted lab motifs, already split.
    Synth(SynthArgs),
    /// Stratified train/val/test split of a dataset CSV.
    Split(SplitArgs),
    /// Learn BPE merges from a dataset's sequences.
    TokenizerTrain(TokenizerArgs),
    /// Train a triplet network or a softmax classifier.
    Train(TrainArgs),
    /// Top-k accuracy of a checkpoint on a labelled dataset.
    Evaluate(EvaluateArgs),
    /// Rank every lab for every record, optionally flagging unknown labs.
    Rank(RankArgs),
    /// Aggregate ranking CSVs with Borda or Copeland voting.
    Ensemble(EnsembleArgs),
    /// K-means over lab embeddings with elbow selection of k.
    Cluster(ClusterArgs),
    /// Export lab and sequence embeddings of a triplet checkpoint.
    Embed(EmbedArgs),
    /// Add a lab to a triplet checkpoint from a few of its sequences.
    LabFromSamples(LabFromSamplesArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelChoice {
    Triplet,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Rule {
    Borda,
    Copeland,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PrecisionChoice {
    F32,
    F64,
}

impl From<PrecisionChoice> for Precision {
    fn from(p: PrecisionChoice) -> Self {
        match p {
            PrecisionChoice::F32 => Precision::F32,
            PrecisionChoice::F64 => Precision::F64,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    /// Directory for all.csv, train.csv, val.csv, test.csv and labs.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n_labs: usize,
    #[arg(long, default_value_t = 40)]
    pub per_lab: usize,
    #[arg(long, default_value_t = 24)]
    pub motif_len: usize,
    #[arg(long, default_value_t = 600)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    /// Train, validation and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct SplitArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Lab vocabulary sidecar; defaults to first-appearance order.
    #[arg(long)]
    pub labs: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct TokenizerArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Target vocabulary size including PAD and the five bases.
    #[arg(long, default_value_t = DEFAULT_VOCAB_SIZE)]
    pub vocab_size: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub model: ModelChoice,
    #[arg(long)]
    pub train: PathBuf,
    /// Validation set, scored after every epoch.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub labs: Option<PathBuf>,
    #[arg(long)]
    pub tokenizer: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Training log CSV; defaults to `<out>.log.csv`.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.2)]
    pub margin: f64,
    #[arg(long, default_value_t = 1.0)]
    pub unseen_weight: f64,
    /// Disable random circular shifts during training.
    #[arg(long)]
    pub no_augment: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = PrecisionChoice::F32)]
    pub precision: PrecisionChoice,
    #[arg(long, default_value_t = DEFAULT_MAX_LEN)]
    pub max_len: usize,
    #[arg(long, default_value_t = 64)]
    pub token_embed_dim: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [3, 4, 5])]
    pub kernel_sizes: Vec<usize>,
    #[arg(long, default_value_t = 128)]
    pub filters: usize,
    #[arg(long, default_value_t = 200)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 256)]
    pub hidden_dim: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Report CSV (`k,accuracy`).
    #[arg(long)]
    pub out: PathBuf,
    /// Cut-offs to report; 1, 5 and 10 are always included.
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_TTA)]
    pub tta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args, Serialize)]
pub struct RankArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Ranking CSV (`record_id,rank,lab_name,score`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TTA)]
    pub tta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only write the best `top` labs per record.
    #[arg(long)]
    pub top: Option<usize>,
    /// Flag records whose best lab scores below this (or below the unseen row).
    #[arg(long)]
    pub unknown_threshold: Option<f64>,
    /// Unknown-lab CSV; defaults to `<out>.unknown.csv`.
    #[arg(long)]
    pub unknown_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    /// Ranking CSVs, one per model.
    #[arg(long, num_args = 1.., required = true)]
    pub rankings: Vec<PathBuf>,
    #[arg(long, value_enum)]
    pub rule: Rule,
    /// Lab vocabulary; defaults to the sorted lab names of the first ranking.
    #[arg(long)]
    pub labs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClusterArgs {
    /// Triplet checkpoint whose lab table is clustered.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    pub checkpoint: Option<PathBuf>,
    /// Lab embedding CSV (`lab_name,e0..`).
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Cluster CSV (`lab_name,cluster`).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [1, 10])]
    pub k_range: Vec<usize>,
    /// Use this k instead of the elbow choice.
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_RESTARTS)]
    pub restarts: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// WCSS curve CSV; defaults to `<out>.wcss.csv`.
    #[arg(long)]
    pub wcss_out: Option<PathBuf>,
    /// 2-D PCA projection CSV (`lab_name,x,y`).
    #[arg(long)]
    pub pca_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EmbedArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Lab embedding CSV (`lab_name,e0..`), unit rows.
    #[arg(long)]
    pub labs_out: Option<PathBuf>,
    /// Also export the unseen row, named `<unseen>`.
    #[arg(long)]
    pub include_unseen: bool,
    /// Records whose sequence embeddings are exported to `--out`.
    #[arg(long, requires = "out")]
    pub data: Option<PathBuf>,
    /// Sequence embedding CSV (`record_id,e0..`).
    #[arg(long, requires = "data")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub tta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// 2-D PCA projection of the lab embeddings.
    #[arg(long)]
    pub pca_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct LabFromSamplesArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Sample sequences of the new lab (their lab column is ignored).
    #[arg(long)]
    pub data: PathBuf,
    /// Name of the new lab.
    #[arg(long)]
    pub name: String,
    /// New checkpoint with the lab appended.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TTA)]
    pub tta: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the synthesized embedding (`lab_name,e0..`).
    #[arg(long)]
    pub embedding_out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

/// Runs the CLI on `argv` (program name first) and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let args: Vec<String> = argv.iter().skip(1).map(|a| a.to_string_lossy().into_owned()).collect();
    configure_threads();
    match execute(cli.command, args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Sizes the global worker pool from `GEAT_THREADS` (default: all cores).
fn configure_threads() {
    if let Some(n) = std::env::var("GEAT_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // a pool may already exist when run() is called twice in one process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

fn execute(command: Command, argv: Vec<String>) -> Result<()> {
    match command {
        Command::Synth(a) => synth(&a, argv),
        Command::Split(a) => split(&a, argv),
        Command::TokenizerTrain(a) => tokenizer_train(&a, argv),
        Command::Train(a) => train(&a, argv),
        Command::Evaluate(a) => evaluate(&a, argv),
        Command::Rank(a) => rank(&a, argv),
        Command::Ensemble(a) => ensemble(&a, argv),
        Command::Cluster(a) => cluster(&a, argv),
        Command::Embed(a) => embed(&a, argv),
        Command::LabFromSamples(a) => lab_from_samples(&a, argv),
        Command::Replay(a) => replay(&a),
    }
}

fn usage(msg: impl Into<String>) -> GeatError {
    GeatError::Usage(msg.into())
}

/// Refuses to overwrite any input.
fn check_disjoint(inputs: &[PathBuf], outputs: &[PathBuf]) -> Result<()> {
    let canon = |p: &Path| fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    for o in outputs {
        if inputs.iter().any(|i| canon(i) == canon(o)) {
            return Err(usage(format!("output {} would overwrite an input", o.display())));
        }
    }
    Ok(())
}

fn record_run<A: Serialize>(
    subcommand: &str,
    argv: Vec<String>,
    args: &A,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    manifest_path: &Path,
) -> Result<()> {
    let config = serde_json::to_value(args).map_err(|e| GeatError::Data(e.to_string()))?;
    RunManifest {
        tool: "geat".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        subcommand: subcommand.into(),
        argv,
        seed,
        config,
        inputs,
        outputs,
    }
    .write(manifest_path)
}

fn manifest_for(out: &Path) -> PathBuf {
    sibling(out, "manifest.json")
}

fn fractions(v: &[f64]) -> Result<(f64, f64, f64)> {
    match v {
        [a, b, c] => Ok((*a, *b, *c)),
        _ => Err(usage("--fractions takes three comma-separated values")),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| GeatError::io(dir, e))
}

fn write_splits(dir: &Path, ds: &Dataset, fr: (f64, f64, f64), seed: u64) -> Result<Vec<PathBuf>> {
    let (train, val, test) = split_stratified(ds, fr, seed)?;
    let mut outputs = Vec::new();
    for (name, part) in [("train.csv", &train), ("val.csv", &val), ("test.csv", &test)] {
        let p = dir.join(name);
        write_dataset(&p, part)?;
        outputs.push(p);
    }
    let labs = dir.join("labs.txt");
    write_labs(&labs, ds.lab_vocab())?;
    outputs.push(labs);
    Ok(outputs)
}

fn synth(a: &SynthArgs, argv: Vec<String>) -> Result<()> {
    let fr = fractions(&a.fractions)?;
    let ds = make_synthetic(SyntheticSpec {
        n_labs: a.n_labs,
        per_lab: a.per_lab,
        motif_len: a.motif_len,
        seq_len: a.seq_len,
        noise: a.noise,
        seed: a.seed,
    })?;
    create_dir(&a.out_dir)?;
    let all = a.out_dir.join("all.csv");
    write_dataset(&all, &ds)?;
    let mut outputs = vec![all];
    outputs.extend(write_splits(&a.out_dir, &ds, fr, a.seed)?);
    record_run("synth", argv, a, Some(a.seed), vec![], outputs, &a.out_dir.join("manifest.json"))
}

fn load_vocab(labs: &Option<PathBuf>) -> Result<Option<LabVocab>> {
    labs.as_deref().map(read_labs).transpose()
}

fn split(a: &SplitArgs, argv: Vec<String>) -> Result<()> {
    let fr = fractions(&a.fractions)?;
    let vocab = load_vocab(&a.labs)?;
    let ds = read_dataset(&a.data, vocab.as_ref())?;
    create_dir(&a.out_dir)?;
    let mut inputs = vec![a.data.clone()];
    inputs.extend(a.labs.clone());
    let planned: Vec<PathBuf> = ["train.csv", "val.csv", "test.csv", "labs.txt"].iter().map(|n| a.out_dir.join(n)).collect();
    check_disjoint(&inputs, &planned)?;
    let outputs = write_splits(&a.out_dir, &ds, fr, a.seed)?;
    record_run("split", argv, a, Some(a.seed), inputs, outputs, &a.out_dir.join("manifest.json"))
}

fn tokenizer_train(a: &TokenizerArgs, argv: Vec<String>) -> Result<()> {
    check_disjoint(&[a.data.clone()], &[a.out.clone()])?;
    let ds = read_dataset(&a.data, None)?;
    let seqs: Vec<&str> = ds.records().iter().map(|r| r.sequence()).collect();
    let tok = train_bpe(&seqs, a.vocab_size)?;
    write_tokenizer(&a.out, &tok)?;
    record_run("tokenizer-train", argv, a, None, vec![a.data.clone()], vec![a.out.clone()], &manifest_for(&a.out))
}

fn train(a: &TrainArgs, argv: Vec<String>) -> Result<()> {
    let log_path = a.log.clone().unwrap_or_else(|| sibling(&a.out, "log.csv"));
    let mut inputs = vec![a.train.clone(), a.tokenizer.clone()];
    inputs.extend(a.val.clone());
    inputs.extend(a.labs.clone());
    check_disjoint(&inputs, &[a.out.clone(), log_path.clone()])?;

    let tok = read_tokenizer(&a.tokenizer)?;
    let vocab = load_vocab(&a.labs)?;
    let train_ds = read_dataset(&a.train, vocab.as_ref())?;
    let vocab = train_ds.lab_vocab().clone();
    let val_ds = a.val.as_deref().map(|p| read_dataset(p, Some(&vocab))).transpose()?;
    let mc = ModelConfig {
        vocab_size: tok.vocab_size(),
        max_len: a.max_len,
        token_embed_dim: a.token_embed_dim,
        kernel_sizes: a.kernel_sizes.clone(),
        filters_per_kernel: a.filters,
        feature_count: train_ds.feature_count(),
        embed_dim: a.embed_dim,
        lab_count: vocab.len(),
        hidden_dim: a.hidden_dim,
        margin: a.margin,
    };
    let tc = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        learning_rate: a.learning_rate,
        margin: a.margin,
        unseen_weight: a.unseen_weight,
        augment: !a.no_augment,
        seed: a.seed,
        precision: a.precision.into(),
    };
    let val = val_ds.as_ref();
    let (model, log) = match (a.model, a.precision) {
        (ModelChoice::Triplet, PrecisionChoice::F32) => {
            let (p, log) = train_triplet::<f32>(&train_ds, val, &tok, &mc, &tc)?;
            (Model::Triplet(p), log)
        }
        (ModelChoice::Triplet, PrecisionChoice::F64) => {
            let (p, log) = train_triplet::<f64>(&train_ds, val, &tok, &mc, &tc)?;
            (Model::Triplet(p.cast()), log)
        }
        (ModelChoice::Classifier, PrecisionChoice::F32) => {
            let (p, log) = train_classifier::<f32>(&train_ds, val, &tok, &mc, &tc)?;
            (Model::Classifier(p), log)
        }
        (ModelChoice::Classifier, PrecisionChoice::F64) => {
            let (p, log) = train_classifier::<f64>(&train_ds, val, &tok, &mc, &tc)?;
            (Model::Classifier(p.cast()), log)
        }
    };
    let ckpt = Checkpoint {
        model,
        labs: vocab,
        tokenizer: tok,
        precision: tc.precision,
    };
    write_checkpoint(&a.out, &ckpt)?;
    write_log(&log_path, &log)?;
    record_run("train", argv, a, Some(a.seed), inputs, vec![a.out.clone(), log_path], &manifest_for(&a.out))
}

/// Rankings for every record, computed in parallel; record `i` (file order)
/// uses shift seed `derive(seed, [i])`.
fn rank_all(ckpt: &Checkpoint, ds: &Dataset, tta: usize, seed: u64) -> Result<Vec<Ranking>> {
    if tta == 0 {
        return Err(usage("--tta must be at least 1"));
    }
    if ds.feature_count() != ckpt.config().feature_count {
        return Err(GeatError::Data(format!(
            "dataset has {} features, checkpoint expects {}",
            ds.feature_count(),
            ckpt.config().feature_count
        )));
    }
    let rankings = ds
        .records()
        .par_iter()
        .enumerate()
        .map(|(i, r)| rank_labs(&ckpt.model, &ckpt.tokenizer, r, tta, seed::derive(seed, &[i as u64])))
        .collect::<geat_core::Result<Vec<_>>>()?;
    Ok(rankings)
}

fn evaluate(a: &EvaluateArgs, argv: Vec<String>) -> Result<()> {
    check_disjoint(&[a.checkpoint.clone(), a.data.clone()], &[a.out.clone()])?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let ds = read_dataset(&a.data, None)?;
    let ds = ds.with_vocab(&ckpt.labs).map_err(|e| match e {
        geat_core::Error::UnknownLab(name) => GeatError::Data(format!(
            "{}: lab {name:?} is not in the checkpoint's lab vocabulary ({} labs)",
            a.data.display(),
            ckpt.labs.len()
        )),
        other => other.into(),
    })?;
    let rankings = rank_all(&ckpt, &ds, a.tta, a.seed)?;
    let truths: Vec<usize> = ds.records().iter().map(|r| r.lab).collect();
    let mut ks: Vec<usize> = a.k.iter().copied().chain([1, 5, 10]).collect();
    ks.sort_unstable();
    ks.dedup();
    if ks.contains(&0) {
        return Err(usage("--k values must be at least 1"));
    }
    let rows = ks
        .iter()
        .map(|&k| Ok((k, top_k_accuracy(&rankings, &truths, k)?)))
        .collect::<Result<Vec<_>>>()?;
    write_report(&a.out, &rows)?;
    record_run(
        "evaluate",
        argv,
        a,
        Some(a.seed),
        vec![a.checkpoint.clone(), a.data.clone()],
        vec![a.out.clone()],
        &manifest_for(&a.out),
    )
}

fn sorted_by_id(ds: &Dataset, rankings: Vec<Ranking>) -> Vec<(String, Ranking)> {
    let mut rows: Vec<(String, Ranking)> = ds.records().iter().map(|r| r.id.clone()).zip(rankings).collect();
    rows.sort_by(|x, y| x.0.cmp(&y.0));
    rows
}

fn rank(a: &RankArgs, argv: Vec<String>) -> Result<()> {
    let unknown_path = a.unknown_threshold.map(|_| a.unknown_out.clone().unwrap_or_else(|| sibling(&a.out, "unknown.csv")));
    let inputs = vec![a.checkpoint.clone(), a.data.clone()];
    let mut outputs = vec![a.out.clone()];
    outputs.extend(unknown_path.clone());
    check_disjoint(&inputs, &outputs)?;
    if a.top == Some(0) {
        return Err(usage("--top must be at least 1"));
    }
    let ckpt = read_checkpoint(&a.checkpoint)?;
    // labs of the records are not needed and may be unknown to the model
    let ds = read_dataset(&a.data, None)?;
    let rows = sorted_by_id(&ds, rank_all(&ckpt, &ds, a.tta, a.seed)?);
    write_rankings(&a.out, &rows, &ckpt.labs, a.top)?;
    if let (Some(threshold), Some(path)) = (a.unknown_threshold, &unknown_path) {
        let flags: Vec<UnknownRow> = rows
            .iter()
            .map(|(id, r)| {
                let (lab, score) = r.top();
                UnknownRow {
                    record_id: id.clone(),
                    top_lab: ckpt.labs.name(lab).unwrap_or_default().to_string(),
                    top_score: score,
                    unseen_score: r.unseen_score,
                    unknown: detect_unknown(r, r.unseen_score.unwrap_or(f64::NEG_INFINITY), threshold),
                }
            })
            .collect();
        write_unknown(path, &flags)?;
    }
    let kind = RankingKind::from(ckpt.kind());
    let config = serde_json::json!({ "args": a, "kind": kind.as_str() });
    record_run("rank", argv, &config, Some(a.seed), inputs, outputs, &manifest_for(&a.out))
}

fn ranking_vocab(a: &EnsembleArgs) -> Result<LabVocab> {
    if let Some(p) = &a.labs {
        return read_labs(p);
    }
    let first = &a.rankings[0];
    let mut reader = csv::Reader::from_path(first).map_err(|e| GeatError::format(first, e.to_string()))?;
    let mut names = std::collections::BTreeSet::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| GeatError::format(first, e.to_string()))?;
        if let Some(name) = rec.get(2) {
            names.insert(name.to_string());
        }
    }
    Ok(LabVocab::from_names(names)?)
}

fn ensemble(a: &EnsembleArgs, argv: Vec<String>) -> Result<()> {
    let mut inputs = a.rankings.clone();
    inputs.extend(a.labs.clone());
    check_disjoint(&inputs, &[a.out.clone()])?;
    let labs = ranking_vocab(a)?;
    let voters = a
        .rankings
        .iter()
        .map(|p| read_rankings(p, &labs, RankingKind::Triplet))
        .collect::<Result<Vec<_>>>()?;
    let ids: Vec<&String> = voters[0].keys().collect();
    for (p, v) in a.rankings.iter().zip(&voters).skip(1) {
        if v.keys().collect::<Vec<_>>() != ids {
            return Err(GeatError::Data(format!(
                "{} ranks a different set of records than {}",
                p.display(),
                a.rankings[0].display()
            )));
        }
    }
    let mut rows = Vec::with_capacity(ids.len());
    for id in ids {
        let profile = RankingProfile::new(voters.iter().map(|v| v[id].clone()).collect())?;
        let r = match a.rule {
            Rule::Borda => borda_aggregate(&profile)?,
            Rule::Copeland => copeland_aggregate(&profile)?,
        };
        rows.push((id.clone(), r));
    }
    write_rankings(&a.out, &rows, &labs, None)?;
    let kind = match a.rule {
        Rule::Borda => RankingKind::EnsembleBorda,
        Rule::Copeland => RankingKind::EnsembleCopeland,
    };
    // the ranking CSV has no kind column; the manifest carries it
    let config = serde_json::json!({ "args": a, "kind": kind.as_str() });
    record_run("ensemble", argv, &config, None, inputs, vec![a.out.clone()], &manifest_for(&a.out))
}

fn triplet_of(ckpt: &Checkpoint, path: &Path) -> Result<TripletParams<f32>> {
    match &ckpt.model {
        Model::Triplet(p) => Ok(p.clone()),
        Model::Classifier(_) => Err(GeatError::Data(format!(
            "{} is a classifier checkpoint; lab embeddings need a triplet model",
            path.display()
        ))),
    }
}

/// Unit-norm lab table rows (real labs, plus the unseen row when asked).
fn lab_rows(p: &TripletParams<f32>, include_unseen: bool) -> Result<Vec<Vec<f64>>> {
    let rows = p.config.lab_count + usize::from(include_unseen);
    let t: Tensor<f64> = p.lab_table.cast();
    let flat = geat_core::model::normalized_rows(&t, rows, "lab_table")?;
    Ok(flat.chunks_exact(p.config.embed_dim).map(<[f64]>::to_vec).collect())
}

fn cluster(a: &ClusterArgs, argv: Vec<String>) -> Result<()> {
    let wcss_path = a.wcss_out.clone().unwrap_or_else(|| sibling(&a.out, "wcss.csv"));
    let inputs: Vec<PathBuf> = a.checkpoint.iter().chain(&a.embeddings).cloned().collect();
    let mut outputs = vec![a.out.clone(), wcss_path.clone()];
    outputs.extend(a.pca_out.clone());
    check_disjoint(&inputs, &outputs)?;
    let (names, points) = match (&a.checkpoint, &a.embeddings) {
        (Some(c), _) => {
            let ckpt = read_checkpoint(c)?;
            let p = triplet_of(&ckpt, c)?;
            let rows = lab_rows(&p, false)?;
            let e = p.config.embed_dim;
            (ckpt.labs.names().to_vec(), Tensor::matrix(rows.len(), e, rows.concat())?)
        }
        (None, Some(path)) => {
            let (names, t) = read_lab_embeddings(path)?;
            let flat = geat_core::model::normalized_rows(&t, t.rows(), "embeddings")?;
            (names, Tensor::matrix(t.rows(), t.cols(), flat)?)
        }
        (None, None) => return Err(usage("pass --checkpoint or --embeddings")),
    };
    let (k_min, k_max) = match a.k_range[..] {
        [lo, hi] => (lo, hi.min(points.rows())),
        _ => return Err(usage("--k-range takes two values")),
    };
    if k_min == 0 || k_min > k_max {
        return Err(usage(format!("--k-range [{k_min}, {k_max}] is empty for {} labs", points.rows())));
    }
    let sweep = elbow_k(&points, k_min, k_max, a.seed, a.restarts)?;
    let chosen = match a.k {
        None => sweep.runs[sweep.k - k_min].clone(),
        Some(k) if (k_min..=k_max).contains(&k) => sweep.runs[k - k_min].clone(),
        Some(k) => kmeans(&points, k, seed::derive(a.seed, &[k as u64, 0]), DEFAULT_MAX_ITERS)?,
    };
    write_clusters(&a.out, &names, &chosen.assignments)?;
    write_wcss(&wcss_path, &sweep.curve)?;
    if let Some(p) = &a.pca_out {
        write_pca(p, &names, &project_2d(&points))?;
    }
    let config = serde_json::json!({ "args": a, "chosen_k": chosen.k, "elbow_k": sweep.k });
    record_run("cluster", argv, &config, Some(a.seed), inputs, outputs, &manifest_for(&a.out))
}

fn embed(a: &EmbedArgs, argv: Vec<String>) -> Result<()> {
    let mut inputs = vec![a.checkpoint.clone()];
    inputs.extend(a.data.clone());
    let outputs: Vec<PathBuf> = a.labs_out.iter().chain(&a.out).chain(&a.pca_out).cloned().collect();
    if outputs.is_empty() {
        return Err(usage("nothing to do: pass --labs-out, --out or --pca-out"));
    }
    check_disjoint(&inputs, &outputs)?;
    if a.tta == 0 {
        return Err(usage("--tta must be at least 1"));
    }
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let p = triplet_of(&ckpt, &a.checkpoint)?;
    let mut names = ckpt.labs.names().to_vec();
    if a.include_unseen {
        names.push("<unseen>".into());
    }
    let rows = lab_rows(&p, a.include_unseen)?;
    if let Some(path) = &a.labs_out {
        write_embeddings(path, "lab_name", &names, &rows)?;
    }
    if let Some(path) = &a.pca_out {
        let t = Tensor::matrix(rows.len(), p.config.embed_dim, rows.concat())?;
        write_pca(path, &names, &project_2d(&t))?;
    }
    if let (Some(data), Some(out)) = (&a.data, &a.out) {
        let ds = read_dataset(data, None)?;
        let embs = ds
            .records()
            .par_iter()
            .enumerate()
            .map(|(i, r)| sequence_embedding(&p, &ckpt.tokenizer, r, a.tta, seed::derive(a.seed, &[i as u64])))
            .collect::<geat_core::Result<Vec<_>>>()?;
        let mut rows: Vec<(String, Vec<f64>)> = ds.records().iter().map(|r| r.id.clone()).zip(embs).collect();
        rows.sort_by(|x, y| x.0.cmp(&y.0));
        let (ids, vecs): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().unzip();
        write_embeddings(out, "record_id", &ids, &vecs)?;
    }
    let manifest = outputs[0].clone();
    record_run("embed", argv, a, Some(a.seed), inputs, outputs, &manifest_for(&manifest))
}

fn lab_from_samples(a: &LabFromSamplesArgs, argv: Vec<String>) -> Result<()> {
    let inputs = vec![a.checkpoint.clone(), a.data.clone()];
    let mut outputs = vec![a.out.clone()];
    outputs.extend(a.embedding_out.clone());
    check_disjoint(&inputs, &outputs)?;
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let p = triplet_of(&ckpt, &a.checkpoint)?;
    if ckpt.labs.get(&a.name).is_some() {
        return Err(GeatError::Data(format!("lab {:?} already exists in the checkpoint", a.name)));
    }
    let ds = read_dataset(&a.data, None)?;
    let e = lab_embedding_from_samples(&p, &ckpt.tokenizer, ds.records(), a.tta, a.seed)?;
    let row: Vec<f32> = e.iter().map(|&x| x as f32).collect();
    let extended = p.with_appended_lab(&row)?;
    let mut labs = ckpt.labs.clone();
    labs.intern(a.name.clone());
    write_checkpoint(
        &a.out,
        &Checkpoint {
            model: Model::Triplet(extended),
            labs,
            tokenizer: ckpt.tokenizer.clone(),
            precision: ckpt.precision,
        },
    )?;
    if let Some(path) = &a.embedding_out {
        write_embeddings(path, "lab_name", &[a.name.clone()], &[e])?;
    }
    record_run("lab-from-samples", argv, a, Some(a.seed), inputs, outputs, &manifest_for(&a.out))
}

fn replay(a: &ReplayArgs) -> Result<()> {
    let m = RunManifest::read(&a.manifest)?;
    if m.subcommand == "replay" || m.argv.first().map(String::as_str) == Some("replay") {
        return Err(usage("a replay manifest cannot be replayed"));
    }
    let argv: Vec<String> = std::iter::once("geat".to_string()).chain(m.argv.iter().cloned()).collect();
    let cli = Cli::try_parse_from(&argv).map_err(|e| usage(format!("manifest arguments no longer parse: {e}")))?;
    execute(cli.command, m.argv)
}
