//! CSV outputs: training logs, rankings, evaluation reports, embeddings and
//! clustering results.

use std::collections::BTreeMap;
use std::path::Path;

use geat_core::corpus::LabVocab;
use geat_core::numeric::Tensor;
use geat_core::rank::{Ranking, RankingKind};
use geat_core::train::EpochLog;

use crate::error::{GeatError, Result};

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> GeatError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => GeatError::io(path, source),
        kind => GeatError::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{kind:?}"),
        },
    }
}

fn write_rows<I, R>(path: &Path, header: &[String], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = writer(path)?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| GeatError::io(path, e))
}

fn header(names: &[&str]) -> Vec<String> {
    names.iter().map(|s| s.to_string()).collect()
}

/// `epoch,split,loss,top1,top10`.
pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    write_rows(
        path,
        &header(&["epoch", "split", "loss", "top1", "top10"]),
        log.iter().map(|r| {
            [
                r.epoch.to_string(),
                r.split.as_str().to_string(),
                r.loss.to_string(),
                r.top1.to_string(),
                r.top10.to_string(),
            ]
        }),
    )
}

/// `record_id,rank,lab_name,score`, records in the given order, at most
/// `top` labs per record.
pub fn write_rankings(path: &Path, rankings: &[(String, Ranking)], labs: &LabVocab, top: Option<usize>) -> Result<()> {
    let mut rows = Vec::new();
    for (id, r) in rankings {
        for (i, &(lab, score)) in r.entries().iter().take(top.unwrap_or(usize::MAX)).enumerate() {
            let name = labs
                .name(lab)
                .ok_or_else(|| GeatError::Data(format!("lab index {lab} missing from the vocabulary")))?;
            rows.push([id.clone(), (i + 1).to_string(), name.to_string(), score.to_string()]);
        }
    }
    write_rows(path, &header(&["record_id", "rank", "lab_name", "score"]), rows)
}

/// Reads a full ranking per record. Only the order is kept: rank `i` gets
/// score `-i`. Records come back sorted by id.
pub fn read_rankings(path: &Path, labs: &LabVocab, kind: RankingKind) -> Result<BTreeMap<String, Ranking>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let h = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if h.iter().collect::<Vec<_>>() != ["record_id", "rank", "lab_name", "score"] {
        return Err(GeatError::format(path, "expected header record_id,rank,lab_name,score"));
    }
    let mut by_record: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |m: String| GeatError::Parse {
            path: path.to_path_buf(),
            line,
            message: m,
        };
        let rank: usize = rec[1].parse().map_err(|_| parse(format!("bad rank {:?}", &rec[1])))?;
        let lab = labs.get(&rec[2]).ok_or_else(|| parse(format!("unknown lab {:?}", &rec[2])))?;
        by_record.entry(rec[0].to_string()).or_default().push((rank, lab));
    }
    let mut out = BTreeMap::new();
    for (id, mut rows) in by_record {
        rows.sort_unstable();
        if rows.len() != labs.len() || rows.iter().enumerate().any(|(i, &(rank, _))| rank != i + 1) {
            return Err(GeatError::format(
                path,
                format!("record {id:?} must rank all {} labs exactly once (ranks 1..{})", labs.len(), labs.len()),
            ));
        }
        let order: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let r = Ranking::from_order(kind, &order).map_err(|e| GeatError::format(path, format!("record {id:?}: {e}")))?;
        out.insert(id, r);
    }
    if out.is_empty() {
        return Err(GeatError::format(path, "no rankings"));
    }
    Ok(out)
}

/// `k,accuracy`.
pub fn write_report(path: &Path, rows: &[(usize, f64)]) -> Result<()> {
    write_rows(path, &header(&["k", "accuracy"]), rows.iter().map(|(k, a)| [k.to_string(), a.to_string()]))
}

/// `<key>,e0..e{E-1}` with one row per name.
pub fn write_embeddings(path: &Path, key: &str, names: &[String], rows: &[Vec<f64>]) -> Result<()> {
    let width = rows.first().map_or(0, Vec::len);
    let mut h = vec![key.to_string()];
    h.extend((0..width).map(|i| format!("e{i}")));
    write_rows(
        path,
        &h,
        names.iter().zip(rows).map(|(n, r)| std::iter::once(n.clone()).chain(r.iter().map(|x| x.to_string()))),
    )
}

/// Reads `lab_name,e0..` back as names and an `(N, E)` matrix.
pub fn read_lab_embeddings(path: &Path) -> Result<(Vec<String>, Tensor<f64>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let h = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if h.get(0) != Some("lab_name") || h.len() < 2 {
        return Err(GeatError::format(path, "expected header lab_name,e0,..."));
    }
    let width = h.len() - 1;
    let mut names = Vec::new();
    let mut data = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        names.push(rec[0].to_string());
        for v in rec.iter().skip(1) {
            let x: f64 = v.parse().map_err(|_| GeatError::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("bad number {v:?}"),
            })?;
            data.push(x);
        }
    }
    if names.is_empty() {
        return Err(GeatError::format(path, "no embeddings"));
    }
    let t = Tensor::matrix(names.len(), width, data)?;
    Ok((names, t))
}

/// `lab_name,cluster`.
pub fn write_clusters(path: &Path, names: &[String], assignments: &[usize]) -> Result<()> {
    write_rows(
        path,
        &header(&["lab_name", "cluster"]),
        names.iter().zip(assignments).map(|(n, c)| [n.clone(), c.to_string()]),
    )
}

/// `k,wcss`.
pub fn write_wcss(path: &Path, curve: &[(usize, f64)]) -> Result<()> {
    write_rows(path, &header(&["k", "wcss"]), curve.iter().map(|(k, w)| [k.to_string(), w.to_string()]))
}

/// `lab_name,x,y`.
pub fn write_pca(path: &Path, names: &[String], coords: &[[f64; 2]]) -> Result<()> {
    write_rows(
        path,
        &header(&["lab_name", "x", "y"]),
        names.iter().zip(coords).map(|(n, c)| [n.clone(), c[0].to_string(), c[1].to_string()]),
    )
}

/// One row per record of the unknown-lab decision.
pub struct UnknownRow {
    pub record_id: String,
    pub top_lab: String,
    pub top_score: f64,
    pub unseen_score: Option<f64>,
    pub unknown: bool,
}

/// `record_id,top_lab,top_score,unseen_score,unknown`.
pub fn write_unknown(path: &Path, rows: &[UnknownRow]) -> Result<()> {
    write_rows(
        path,
        &header(&["record_id", "top_lab", "top_score", "unseen_score", "unknown"]),
        rows.iter().map(|r| {
            [
                r.record_id.clone(),
                r.top_lab.clone(),
                r.top_score.to_string(),
                r.unseen_score.map_or_else(String::new, |s| s.to_string()),
                u8::from(r.unknown).to_string(),
            ]
        }),
    )
}
