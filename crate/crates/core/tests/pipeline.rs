//! The library used end to end through its public API only.

use geat_core::cluster::elbow_k;
use geat_core::corpus::{make_synthetic, split_stratified, SyntheticSpec};
use geat_core::ensemble::{borda_aggregate, copeland_aggregate, RankingProfile};
use geat_core::model::{ClassifierParams, Model, ModelConfig};
use geat_core::numeric::{Precision, Tensor};
use geat_core::rank::{lab_embedding_from_samples, rank_labs, top_k_accuracy};
use geat_core::tokenize::train_bpe;
use geat_core::train::{train_classifier, train_triplet, TrainConfig};

#[test]
fn synthetic_corpus_to_rankings_ensembles_and_clusters() {
    let ds = make_synthetic(SyntheticSpec {
        n_labs: 6,
        per_lab: 20,
        motif_len: 10,
        seq_len: 100,
        noise: 0.0,
        seed: 4,
    })
    .unwrap();
    let (train, val, test) = split_stratified(&ds, (0.7, 0.15, 0.15), 4).unwrap();
    let seqs: Vec<&str> = train.records().iter().map(|r| r.sequence()).collect();
    let tok = train_bpe(&seqs, 48).unwrap();
    let mc = ModelConfig {
        max_len: 100,
        token_embed_dim: 12,
        kernel_sizes: vec![3, 5],
        filters_per_kernel: 24,
        embed_dim: 16,
        hidden_dim: 24,
        ..ModelConfig::new(tok.vocab_size(), ds.feature_count(), ds.lab_count())
    };
    let tc = TrainConfig {
        epochs: 12,
        batch_size: 16,
        learning_rate: 3e-3,
        seed: 4,
        ..TrainConfig::default()
    };
    let (trip, log) = train_triplet::<f32>(&train, Some(&val), &tok, &mc, &tc).unwrap();
    assert_eq!(log.len(), 2 * tc.epochs);
    let (clf, _) = train_classifier::<f64>(&train, None, &tok, &mc, &TrainConfig { precision: Precision::F64, ..tc.clone() }).unwrap();
    let clf: ClassifierParams<f32> = clf.cast();

    let models = [Model::Triplet(trip.clone()), Model::Classifier(clf)];
    let truths: Vec<usize> = test.records().iter().map(|r| r.lab).collect();
    let mut per_model = Vec::new();
    for m in &models {
        let rankings: Vec<_> = test.records().iter().map(|r| rank_labs(m, &tok, r, 4, 1).unwrap()).collect();
        let top3 = top_k_accuracy(&rankings, &truths, 3).unwrap();
        assert!(top3 >= top_k_accuracy(&rankings, &truths, 1).unwrap());
        assert!(top3 > 0.5, "{:?}: top-3 {top3}", m.kind());
        per_model.push(rankings);
    }
    for i in 0..test.len() {
        let profile = RankingProfile::new(vec![per_model[0][i].clone(), per_model[1][i].clone()]).unwrap();
        for r in [borda_aggregate(&profile).unwrap(), copeland_aggregate(&profile).unwrap()] {
            let mut labs: Vec<usize> = r.labs().collect();
            labs.sort_unstable();
            assert_eq!(labs, (0..ds.lab_count()).collect::<Vec<_>>());
        }
    }

    // a lab rebuilt from its own sequences lands close to its learned row
    let lab0: Vec<_> = train.records().iter().filter(|r| r.lab == 0).cloned().collect();
    let e = lab_embedding_from_samples(&trip, &tok, &lab0, 2, 0).unwrap();
    let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-9);

    let table: Tensor<f64> = trip.lab_table.cast();
    let rows = Tensor::matrix(ds.lab_count(), mc.embed_dim, table.data()[..ds.lab_count() * mc.embed_dim].to_vec()).unwrap();
    let elbow = elbow_k(&rows, 1, 4, 0, 3).unwrap();
    assert!((1..=4).contains(&elbow.k));
    assert!(elbow.curve.windows(2).all(|w| w[1].1 <= w[0].1));
}
