//! Dataset CSV, lab vocabulary sidecar and tokenizer text files.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use geat_core::corpus::{Dataset, LabVocab};
use geat_core::tokenize::Tokenizer;

use crate::error::{GeatError, Result};

const ID: &str = "id";
const SEQUENCE: &str = "sequence";
const LAB: &str = "lab_id";

/// First line of a tokenizer file.
pub const TOKENIZER_MAGIC: &str = "GEAT-BPE v1";

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> GeatError {
    GeatError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

/// Reads `id,sequence,lab_id,f0..f{F-1}`. Labs are numbered in order of first
/// appearance unless `vocab` is given, in which case every lab must be in it.
pub fn read_dataset(path: &Path, vocab: Option<&LabVocab>) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 3 || names[..3] != [ID, SEQUENCE, LAB] {
        return Err(parse_err(path, 1, format!("header must start with {ID},{SEQUENCE},{LAB}")));
    }
    for (i, name) in names[3..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(parse_err(path, 1, format!("feature column {} is named {name:?}, expected \"f{i}\"", i + 3)));
        }
    }
    let width = names.len();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_error(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(path, line, format!("{} columns, header has {width}", rec.len())));
        }
        let features = rec
            .iter()
            .skip(3)
            .map(|v| match v.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(path, line, format!("feature value {other:?} is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        rows.push((rec[0].to_string(), rec[1].trim().to_string(), rec[2].to_string(), features));
        lines.push(line);
    }
    // validate row by row first so errors carry a line number
    for ((id, seq, _, f), &line) in rows.iter().zip(&lines) {
        geat_core::corpus::DnaRecord::new(id.clone(), seq.clone(), f.clone(), 0)
            .map_err(|e| parse_err(path, line, e.to_string()))?;
    }
    let ds = Dataset::from_rows(rows.iter().cloned()).map_err(|e| match &e {
        geat_core::Error::DuplicateId(id) => {
            let line = rows.iter().zip(&lines).filter(|(r, _)| &r.0 == id).nth(1).map_or(0, |(_, &l)| l);
            parse_err(path, line, e.to_string())
        }
        _ => GeatError::Core(e),
    })?;
    if ds.is_empty() {
        return Err(GeatError::format(path, "no records"));
    }
    match vocab {
        Some(v) => Ok(ds.with_vocab(v)?),
        None => Ok(ds),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> GeatError {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(source) => GeatError::io(path, source),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

pub fn write_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec![ID.to_string(), SEQUENCE.to_string(), LAB.to_string()];
    header.extend((0..ds.feature_count()).map(|i| format!("f{i}")));
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for r in ds.records() {
        let lab = ds.lab_vocab().name(r.lab).expect("validated lab index");
        let mut row = vec![r.id.clone(), r.sequence().to_string(), lab.to_string()];
        row.extend(r.features.iter().map(|&b| if b { "1" } else { "0" }.to_string()));
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| GeatError::io(path, e))
}

/// One lab name per line; line `i` (zero-based) is lab `i`.
pub fn read_labs(path: &Path) -> Result<LabVocab> {
    let text = fs::read_to_string(path).map_err(|e| GeatError::io(path, e))?;
    let names: Vec<&str> = text.lines().collect();
    if let Some(i) = names.iter().position(|n| n.is_empty()) {
        return Err(parse_err(path, i as u64 + 1, "empty lab name"));
    }
    if names.is_empty() {
        return Err(GeatError::format(path, "no lab names"));
    }
    Ok(LabVocab::from_names(names)?)
}

pub fn write_labs(path: &Path, labs: &LabVocab) -> Result<()> {
    let mut out = String::new();
    for n in labs.names() {
        out.push_str(n);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| GeatError::io(path, e))
}

pub fn tokenizer_to_string(tok: &Tokenizer) -> String {
    let mut out = format!("{TOKENIZER_MAGIC}\n");
    out.push_str(std::str::from_utf8(&geat_core::corpus::ALPHABET).expect("ascii alphabet"));
    out.push('\n');
    for (l, r) in tok.merge_strings() {
        out.push_str(l);
        out.push('\t');
        out.push_str(r);
        out.push('\n');
    }
    out
}

pub fn tokenizer_from_str(text: &str, path: &Path) -> Result<Tokenizer> {
    let mut lines = text.lines();
    if lines.next() != Some(TOKENIZER_MAGIC) {
        return Err(parse_err(path, 1, format!("expected {TOKENIZER_MAGIC:?}")));
    }
    let alphabet = std::str::from_utf8(&geat_core::corpus::ALPHABET).expect("ascii alphabet");
    if lines.next() != Some(alphabet) {
        return Err(parse_err(path, 2, format!("expected alphabet {alphabet:?}")));
    }
    let mut merges = Vec::new();
    for (i, line) in lines.enumerate() {
        let (l, r) = line
            .split_once('\t')
            .ok_or_else(|| parse_err(path, i as u64 + 3, "merge line must be left<TAB>right"))?;
        merges.push((l, r));
    }
    Tokenizer::from_merge_strings(merges).map_err(|e| GeatError::format(path, e.to_string()))
}

pub fn read_tokenizer(path: &Path) -> Result<Tokenizer> {
    let text = fs::read_to_string(path).map_err(|e| GeatError::io(path, e))?;
    tokenizer_from_str(&text, path)
}

pub fn write_tokenizer(path: &Path, tok: &Tokenizer) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| GeatError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(tokenizer_to_string(tok).as_bytes())
        .and_then(|_| w.flush())
        .map_err(|e| GeatError::io(path, e))
}
