use std::fs;

use geat::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, MAGIC};
use geat::data::{read_dataset, read_labs, read_tokenizer, tokenizer_from_str, write_dataset, write_labs, write_tokenizer};
use geat::manifest::{sibling, RunManifest};
use geat::tables::{read_lab_embeddings, read_rankings, write_embeddings, write_rankings};
use geat::GeatError;
use geat_core::corpus::{make_synthetic, LabVocab, SyntheticSpec};
use geat_core::model::{ClassifierParams, Model, ModelConfig, TripletParams};
use geat_core::numeric::Precision;
use geat_core::rank::{Ranking, RankingKind};
use geat_core::tokenize::train_bpe;

fn corpus() -> geat_core::corpus::Dataset {
    make_synthetic(SyntheticSpec {
        n_labs: 3,
        per_lab: 4,
        motif_len: 6,
        seq_len: 50,
        noise: 0.0,
        seed: 2,
    })
    .unwrap()
}

fn small_config(vocab: usize, features: usize, labs: usize) -> ModelConfig {
    ModelConfig {
        max_len: 20,
        token_embed_dim: 4,
        kernel_sizes: vec![2, 3],
        filters_per_kernel: 3,
        embed_dim: 5,
        hidden_dim: 6,
        ..ModelConfig::new(vocab, features, labs)
    }
}

#[test]
fn dataset_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus();
    let path = dir.path().join("d.csv");
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path, None).unwrap();
    assert_eq!(back.records(), ds.records());
    assert_eq!(back.lab_vocab(), ds.lab_vocab());
    let header = fs::read_to_string(&path).unwrap();
    assert!(header.starts_with("id,sequence,lab_id,f0,f1,"));
}

#[test]
fn dataset_errors_carry_line_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.csv");
    let cases = [
        ("id,sequence,lab_id\nr1,ACGT,a\nr2,ACXT,a\n", 3),
        ("id,sequence,lab_id,f0\nr1,ACGT,a,1\nr2,ACGT,a,2\n", 3),
        ("id,sequence,lab_id,f0\nr1,ACGT,a,1\nr1,ACGT,b,0\n", 3),
        ("id,sequence,lab_id,f0\nr1,ACGT,a\n", 2),
        ("id,sequence,lab_id\nr1,,a\n", 2),
    ];
    for (text, line) in cases {
        fs::write(&path, text).unwrap();
        match read_dataset(&path, None) {
            Err(GeatError::Parse { line: l, .. }) => assert_eq!(l, line, "{text:?}"),
            other => panic!("{text:?}: {other:?}"),
        }
    }
    fs::write(&path, "name,seq\n").unwrap();
    assert!(read_dataset(&path, None).is_err());
}

#[test]
fn vocab_sidecar_fixes_lab_indices() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.csv");
    fs::write(&data, "id,sequence,lab_id\nr1,ACGT,beta\nr2,ACGT,alpha\n").unwrap();
    let labs = dir.path().join("labs.txt");
    write_labs(&labs, &LabVocab::from_names(["alpha", "beta", "gamma"]).unwrap()).unwrap();
    let vocab = read_labs(&labs).unwrap();
    let ds = read_dataset(&data, Some(&vocab)).unwrap();
    assert_eq!(ds.records()[0].lab, 1);
    assert_eq!(ds.records()[1].lab, 0);
    assert_eq!(ds.lab_count(), 3);
    assert_eq!(fs::read_to_string(&labs).unwrap(), "alpha\nbeta\ngamma\n");
}

#[test]
fn tokenizer_file_roundtrip_and_validation() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus();
    let seqs: Vec<&str> = ds.records().iter().map(|r| r.sequence()).collect();
    let tok = train_bpe(&seqs, 30).unwrap();
    let path = dir.path().join("tok.txt");
    write_tokenizer(&path, &tok).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("GEAT-BPE v1"));
    assert_eq!(lines.next(), Some("ACGTN"));
    assert_eq!(lines.count(), tok.merges().len());
    assert_eq!(read_tokenizer(&path).unwrap(), tok);

    let p = dir.path().join("x");
    assert!(tokenizer_from_str("GEAT-BPE v2\nACGTN\n", &p).is_err());
    assert!(tokenizer_from_str("GEAT-BPE v1\nACGT\n", &p).is_err());
    assert!(tokenizer_from_str("GEAT-BPE v1\nACGTN\nAC\tG\n", &p).is_err());
    assert!(tokenizer_from_str("GEAT-BPE v1\nACGTN\nA\tC\nAC\tG\n", &p).is_ok());
}

#[test]
fn checkpoint_roundtrip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let ds = corpus();
    let seqs: Vec<&str> = ds.records().iter().map(|r| r.sequence()).collect();
    let tok = train_bpe(&seqs, 20).unwrap();
    let mc = small_config(tok.vocab_size(), ds.feature_count(), ds.lab_count());
    for model in [
        Model::Triplet(TripletParams::<f32>::init(&mc, 1).unwrap()),
        Model::Classifier(ClassifierParams::<f32>::init(&mc, 1).unwrap()),
    ] {
        let ckpt = Checkpoint {
            model,
            labs: ds.lab_vocab().clone(),
            tokenizer: tok.clone(),
            precision: Precision::F64,
        };
        let path = dir.path().join("m.ckpt");
        write_checkpoint(&path, &ckpt).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(read_checkpoint(&path).unwrap(), ckpt);
        assert_eq!(ckpt.to_bytes().unwrap(), bytes, "encoding is deterministic");

        let mut truncated = bytes.clone();
        truncated.pop();
        assert!(Checkpoint::from_bytes(&truncated, &path).is_err());
        let mut trailing = bytes.clone();
        trailing.extend_from_slice(&[0; 4]);
        assert!(Checkpoint::from_bytes(&trailing, &path).is_err());
        let mut magic = bytes.clone();
        magic[0] = b'X';
        assert!(Checkpoint::from_bytes(&magic, &path).is_err());
        let mut version = bytes.clone();
        version[8] = 9;
        assert!(Checkpoint::from_bytes(&version, &path).is_err());
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan, &path).is_err());
    }
}

#[test]
fn ranking_csv_roundtrip_keeps_order() {
    let dir = tempfile::tempdir().unwrap();
    let labs = LabVocab::from_names(["a", "b", "c"]).unwrap();
    let rows = vec![
        ("r2".to_string(), Ranking::from_scores(RankingKind::Triplet, &[0.1, 0.9, 0.5]).unwrap()),
        ("r1".to_string(), Ranking::from_scores(RankingKind::Triplet, &[0.3, 0.2, 0.1]).unwrap()),
    ];
    let path = dir.path().join("r.csv");
    write_rankings(&path, &rows, &labs, None).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert!(text.starts_with("record_id,rank,lab_name,score\nr2,1,b,0.9\n"));
    let back = read_rankings(&path, &labs, RankingKind::Triplet).unwrap();
    assert_eq!(back.keys().collect::<Vec<_>>(), ["r1", "r2"]);
    assert_eq!(back["r2"].labs().collect::<Vec<_>>(), [1, 2, 0]);
    assert_eq!(back["r1"].labs().collect::<Vec<_>>(), [0, 1, 2]);

    // partial rankings cannot be aggregated
    let top = dir.path().join("top.csv");
    write_rankings(&top, &rows, &labs, Some(2)).unwrap();
    assert!(matches!(read_rankings(&top, &labs, RankingKind::Triplet), Err(GeatError::Format { .. })));
}

#[test]
fn embedding_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.csv");
    let names = vec!["x".to_string(), "y".to_string()];
    write_embeddings(&path, "lab_name", &names, &[vec![0.25, -1.0], vec![1.0, 0.5]]).unwrap();
    let (n, t) = read_lab_embeddings(&path).unwrap();
    assert_eq!(n, names);
    assert_eq!(t.shape(), &[2, 2]);
    assert_eq!(t.data(), &[0.25, -1.0, 1.0, 0.5]);
}

#[test]
fn manifest_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let path = sibling(&out, "manifest.json");
    assert_eq!(path, dir.path().join("out.csv.manifest.json"));
    let m = RunManifest {
        tool: "geat".into(),
        version: "0.1.0".into(),
        subcommand: "rank".into(),
        argv: vec!["rank".into(), "--seed".into(), "3".into()],
        seed: Some(3),
        config: serde_json::json!({ "tta": 8 }),
        inputs: vec!["a".into()],
        outputs: vec![out],
    };
    m.write(&path).unwrap();
    assert_eq!(RunManifest::read(&path).unwrap(), m);
}
