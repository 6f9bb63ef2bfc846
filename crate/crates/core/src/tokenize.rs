//! Byte-pair encoding over the DNA alphabet, circular shifts and fixed-length
//! model inputs.
//!
//! Token ids: `0` is PAD, `1..=5` are the base symbols in [`ALPHABET`] order,
//! and merge `i` (in training order) produces token `6 + i`. `N` never takes
//! part in a merge, so no token spans an ambiguity symbol.

use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::{Ordering, Reverse};

use hashbrown::HashMap;

use crate::corpus::{DnaRecord, ALPHABET};
use crate::{Error, Result};

pub const PAD_ID: u32 = 0;
pub const DEFAULT_VOCAB_SIZE: usize = 1001;
pub const DEFAULT_MAX_LEN: usize = 1000;
/// PAD plus the five base symbols.
pub const MIN_VOCAB_SIZE: usize = ALPHABET.len() + 1;

const N_ID: u32 = 5;

/// A trained BPE tokenizer. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(u32, u32)>,
    tokens: Vec<Vec<u8>>,
    ranks: HashMap<(u32, u32), u32>,
}

impl Tokenizer {
    /// Tokenizer with only the base symbols.
    pub fn base() -> Self {
        let mut tokens = vec![Vec::new()];
        tokens.extend(ALPHABET.iter().map(|&b| vec![b]));
        Tokenizer {
            merges: Vec::new(),
            tokens,
            ranks: HashMap::new(),
        }
    }

    /// Rebuilds a tokenizer from merge pairs given as token strings, in
    /// training order. Each merge may only reference tokens already defined.
    pub fn from_merge_strings<'a, I>(merges: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let mut tok = Tokenizer::base();
        let mut by_string: HashMap<Vec<u8>, u32> = HashMap::new();
        for (id, t) in tok.tokens.iter().enumerate().skip(1) {
            by_string.insert(t.clone(), id as u32);
        }
        for (left, right) in merges {
            let lookup = |s: &str| {
                by_string
                    .get(s.as_bytes())
                    .copied()
                    .ok_or_else(|| Error::invalid(format!("merge references undefined token {s:?}")))
            };
            let (l, r) = (lookup(left)?, lookup(right)?);
            if l == N_ID || r == N_ID {
                return Err(Error::invalid("merges may not involve N"));
            }
            let id = tok.push_merge(l, r);
            let s = tok.tokens[id as usize].clone();
            if by_string.insert(s.clone(), id).is_some() {
                return Err(Error::invalid(format!(
                    "duplicate token string {:?}",
                    String::from_utf8_lossy(&s)
                )));
            }
        }
        Ok(tok)
    }

    fn push_merge(&mut self, left: u32, right: u32) -> u32 {
        let id = self.tokens.len() as u32;
        let mut s = self.tokens[left as usize].clone();
        s.extend_from_slice(&self.tokens[right as usize]);
        self.tokens.push(s);
        self.ranks.insert((left, right), self.merges.len() as u32);
        self.merges.push((left, right));
        id
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn pad_id(&self) -> u32 {
        PAD_ID
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Token string for `id` (empty for PAD).
    pub fn token(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    /// Merges as `(left, right)` token strings in training order.
    pub fn merge_strings(&self) -> impl Iterator<Item = (&str, &str)> + '_ {
        self.merges.iter().map(move |&(l, r)| {
            let s = |id: u32| core::str::from_utf8(&self.tokens[id as usize]).unwrap_or("");
            (s(l), s(r))
        })
    }

    /// Encodes a sequence by applying the merges in training order, each
    /// merge at its leftmost remaining occurrence first.
    ///
    /// Implemented as a rank-ordered heap over adjacent pairs: a pair created
    /// by merge `r` can only match later merges, so always taking the lowest
    /// ranked (then leftmost) pair reproduces the sequential passes exactly.
    pub fn encode(&self, sequence: &str) -> Result<Vec<u32>> {
        if sequence.is_empty() {
            return Err(Error::EmptySequence(String::new()));
        }
        let mut ids = base_ids(sequence)?;
        let n = ids.len();
        if self.merges.is_empty() || n == 1 {
            return Ok(ids);
        }
        const NONE: usize = usize::MAX;
        let mut next: Vec<usize> = (1..=n).map(|i| if i == n { NONE } else { i }).collect();
        let mut prev: Vec<usize> = (0..n).map(|i| if i == 0 { NONE } else { i - 1 }).collect();
        let mut alive = vec![true; n];
        let mut heap = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&r) = self.ranks.get(&(ids[i], ids[i + 1])) {
                heap.push(Reverse((r, i)));
            }
        }
        while let Some(Reverse((rank, i))) = heap.pop() {
            let j = next[i];
            if !alive[i] || j == NONE {
                continue;
            }
            let (l, r) = self.merges[rank as usize];
            if ids[i] != l || ids[j] != r {
                continue;
            }
            ids[i] = 6 + rank;
            alive[j] = false;
            let after = next[j];
            next[i] = after;
            if after != NONE {
                prev[after] = i;
                if let Some(&r) = self.ranks.get(&(ids[i], ids[after])) {
                    heap.push(Reverse((r, i)));
                }
            }
            let before = prev[i];
            if before != NONE {
                if let Some(&r) = self.ranks.get(&(ids[before], ids[i])) {
                    heap.push(Reverse((r, before)));
                }
            }
        }
        Ok((0..n).filter(|&i| alive[i]).map(|i| ids[i]).collect())
    }

    /// Concatenates token strings. PAD and unknown ids are errors.
    pub fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut out = Vec::new();
        for &id in ids {
            if id == PAD_ID || id as usize >= self.tokens.len() {
                return Err(Error::InvalidToken(id));
            }
            out.extend_from_slice(&self.tokens[id as usize]);
        }
        String::from_utf8(out).map_err(|_| Error::invalid("token table is not UTF-8"))
    }
}

fn base_id(b: u8) -> Option<u32> {
    ALPHABET.iter().position(|&a| a == b).map(|p| p as u32 + 1)
}

fn base_ids(sequence: &str) -> Result<Vec<u32>> {
    sequence
        .bytes()
        .enumerate()
        .map(|(position, b)| {
            base_id(b).ok_or_else(|| Error::InvalidSymbol {
                record: String::new(),
                symbol: sequence[position..].chars().next().unwrap_or('?'),
                position,
            })
        })
        .collect()
}

/// Greedy BPE training.
///
/// Repeatedly merges the most frequent adjacent pair (overlapping occurrences
/// counted) until `vocab_size` tokens exist or no pair occurs twice. Ties go to
/// the lexicographically smallest concatenated string, then the smallest left
/// token string. Pair counts are updated incrementally around each merge site.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize) -> Result<Tokenizer> {
    if vocab_size < MIN_VOCAB_SIZE {
        return Err(Error::invalid(format!(
            "vocab_size must be at least {MIN_VOCAB_SIZE}, got {vocab_size}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("BPE corpus is empty"));
    }
    // Split on N: merges never cross it, and N itself never merges.
    let mut words: Vec<Vec<u32>> = Vec::new();
    for s in corpus {
        let ids = base_ids(s.as_ref())?;
        for chunk in ids.split(|&id| id == N_ID) {
            if chunk.len() >= 2 {
                words.push(chunk.to_vec());
            }
        }
    }
    let mut counts: HashMap<(u32, u32), i64> = HashMap::new();
    for w in &words {
        for p in w.windows(2) {
            *counts.entry((p[0], p[1])).or_insert(0) += 1;
        }
    }
    let mut tok = Tokenizer::base();
    while tok.vocab_size() < vocab_size {
        let mut best: Option<((u32, u32), i64)> = None;
        for (&pair, &c) in counts.iter() {
            if c < 2 {
                continue;
            }
            let better = match best {
                None => true,
                Some((bp, bc)) => c > bc || (c == bc && tok.pair_order(pair, bp) == Ordering::Less),
            };
            if better {
                best = Some((pair, c));
            }
        }
        let Some(((a, b), _)) = best else { break };
        let m = tok.push_merge(a, b);
        for w in words.iter_mut() {
            merge_word(w, a, b, m, &mut counts);
        }
        counts.retain(|_, c| *c > 0);
    }
    Ok(tok)
}

impl Tokenizer {
    fn pair_order(&self, x: (u32, u32), y: (u32, u32)) -> Ordering {
        let s = |id: u32| self.tokens[id as usize].as_slice();
        let cx = s(x.0).iter().chain(s(x.1));
        let cy = s(y.0).iter().chain(s(y.1));
        cx.cmp(cy).then_with(|| s(x.0).cmp(s(y.0)))
    }
}

fn merge_word(w: &mut Vec<u32>, a: u32, b: u32, m: u32, counts: &mut HashMap<(u32, u32), i64>) {
    if w.len() < 2 || !w.windows(2).any(|p| p[0] == a && p[1] == b) {
        return;
    }
    let mut bump = |pair: (u32, u32), d: i64| *counts.entry(pair).or_insert(0) += d;
    let mut out: Vec<u32> = Vec::with_capacity(w.len());
    let mut i = 0;
    while i < w.len() {
        if i + 1 < w.len() && w[i] == a && w[i + 1] == b {
            if let Some(&left) = out.last() {
                bump((left, a), -1);
                bump((left, m), 1);
            }
            bump((a, b), -1);
            if let Some(&right) = w.get(i + 2) {
                bump((b, right), -1);
                bump((m, right), 1);
            }
            out.push(m);
            i += 2;
        } else {
            out.push(w[i]);
            i += 1;
        }
    }
    *w = out;
}

/// Rotates right by `offset mod len`: the last characters move to the front.
pub fn circular_shift(sequence: &str, offset: usize) -> String {
    if sequence.is_empty() {
        return String::new();
    }
    let bytes = sequence.as_bytes();
    let k = offset % bytes.len();
    let split = bytes.len() - k;
    let mut out = String::with_capacity(bytes.len());
    out.push_str(&sequence[split..]);
    out.push_str(&sequence[..split]);
    out
}

/// Fixed-length model input: `ids.len() == max_len`, PAD after `true_len`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<u32>,
    pub true_len: usize,
}

/// Shift at base level, encode, keep the first `max_len` tokens, right-pad.
pub fn prepare_input(
    tok: &Tokenizer,
    record: &DnaRecord,
    offset: usize,
    max_len: usize,
) -> Result<TokenSeq> {
    if max_len == 0 {
        return Err(Error::invalid("max_len must be positive"));
    }
    let shifted = circular_shift(record.sequence(), offset);
    let mut ids = tok.encode(&shifted).map_err(|e| match e {
        Error::InvalidSymbol {
            symbol, position, ..
        } => Error::InvalidSymbol {
            record: record.id.clone(),
            symbol,
            position,
        },
        Error::EmptySequence(_) => Error::EmptySequence(record.id.clone()),
        other => other,
    })?;
    ids.truncate(max_len);
    let true_len = ids.len();
    ids.resize(max_len, PAD_ID);
    Ok(TokenSeq { ids, true_len })
}
