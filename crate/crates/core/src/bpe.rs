//! Byte-level byte-pair encoding.
//!
//! The base alphabet is the 256 byte values, so encoding is total over any
//! text. Id 256 is reserved for the record delimiter; merge `i` (0-based)
//! creates id `257 + i`. Merges are learned across all bytes, whitespace
//! included; there is no pre-tokenization.
//!
//! Vocabulary file layout:
//!
//! ```text
//! forumlm-bpe v1 size=<total ids> specials=1
//! <left hex> <right hex>      one merge per line, priority order
//! ```
//!
//! where each side is the lowercase hex of the symbol's byte expansion.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::fmt::Write as _;

use thiserror::Error;

use crate::exec::Execution;

pub type TokenId = u32;
pub type TokenSequence = Vec<TokenId>;

pub const RECORD_DELIMITER: &str = "<|record|>";
/// Reserved id of the record delimiter. Never produced by a merge.
pub const RECORD_TOKEN: TokenId = 256;
pub const NUM_SPECIAL_TOKENS: usize = 1;
const FIRST_MERGE_ID: TokenId = 257;
const FILE_MAGIC: &str = "forumlm-bpe";
const FILE_VERSION: &str = "v1";

/// Desk-scale default vocabulary size.
pub const DEFAULT_VOCAB_SIZE: usize = 4_000;

#[derive(Debug, Error)]
pub enum BpeError {
    #[error("target vocabulary size {0} must exceed {min}", min = FIRST_MERGE_ID)]
    TargetTooSmall(usize),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error("token id {id} at position {position} is outside the vocabulary (size {size})")]
    UnknownToken { position: usize, id: TokenId, size: usize },
    #[error("vocabulary file line {line}: {message}")]
    Format { line: usize, message: String },
    #[error("invalid merge {index}: {message}")]
    InvalidMerge { index: usize, message: String },
}

#[inline]
fn pair_key(left: TokenId, right: TokenId) -> u64 {
    ((left as u64) << 32) | right as u64
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    merges: Vec<(TokenId, TokenId)>,
    expansions: Vec<Vec<u8>>,
    ranks: HashMap<u64, u32>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::byte_level()
    }
}

impl Vocabulary {
    /// Bytes plus the special token, no merges.
    pub fn byte_level() -> Self {
        let mut expansions: Vec<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
        expansions.push(RECORD_DELIMITER.as_bytes().to_vec());
        Vocabulary {
            merges: Vec::new(),
            expansions,
            ranks: HashMap::new(),
        }
    }

    /// Builds a vocabulary from an ordered merge list, checking that each
    /// merge only refers to ids that exist when it is created and that no two
    /// tokens share a byte expansion.
    pub fn from_merges(merges: Vec<(TokenId, TokenId)>) -> Result<Self, BpeError> {
        let mut vocab = Self::byte_level();
        let mut seen: HashSet<Vec<u8>> = vocab.expansions[..256].iter().cloned().collect();
        for (index, &(l, r)) in merges.iter().enumerate() {
            let next_id = FIRST_MERGE_ID + index as TokenId;
            for part in [l, r] {
                if part >= next_id || part == RECORD_TOKEN {
                    return Err(BpeError::InvalidMerge {
                        index,
                        message: format!("part {part} does not exist before id {next_id}"),
                    });
                }
            }
            let bytes = vocab.merged_bytes(l, r);
            if !seen.insert(bytes.clone()) {
                return Err(BpeError::InvalidMerge {
                    index,
                    message: "duplicate byte expansion".into(),
                });
            }
            vocab.push_merge(l, r, bytes);
        }
        Ok(vocab)
    }

    fn merged_bytes(&self, l: TokenId, r: TokenId) -> Vec<u8> {
        let mut bytes = self.expansions[l as usize].clone();
        bytes.extend_from_slice(&self.expansions[r as usize]);
        bytes
    }

    fn push_merge(&mut self, l: TokenId, r: TokenId, bytes: Vec<u8>) {
        self.ranks.insert(pair_key(l, r), self.merges.len() as u32);
        self.merges.push((l, r));
        self.expansions.push(bytes);
    }

    /// Total number of ids: bytes, specials and merges.
    pub fn size(&self) -> usize {
        self.expansions.len()
    }

    pub fn merges(&self) -> &[(TokenId, TokenId)] {
        &self.merges
    }

    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        self.expansions.get(id as usize).map(Vec::as_slice)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == RECORD_TOKEN
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        self.encode_bytes(text.as_bytes())
    }

    /// Applies the merges in priority order. Equal-rank occurrences are
    /// merged left to right.
    pub fn encode_bytes(&self, bytes: &[u8]) -> TokenSequence {
        const NONE: u32 = u32::MAX;
        const DEAD: TokenId = TokenId::MAX;

        let n = bytes.len();
        if n < 2 || self.merges.is_empty() {
            return bytes.iter().map(|&b| b as TokenId).collect();
        }
        let mut sym: Vec<TokenId> = bytes.iter().map(|&b| b as TokenId).collect();
        let mut next: Vec<u32> = (1..=n as u32).collect();
        next[n - 1] = NONE;
        let mut prev: Vec<u32> = (0..n as u32).map(|i| i.wrapping_sub(1)).collect();
        prev[0] = NONE;

        let mut heap: BinaryHeap<Reverse<(u32, u32)>> = BinaryHeap::new();
        for i in 0..n - 1 {
            if let Some(&rank) = self.ranks.get(&pair_key(sym[i], sym[i + 1])) {
                heap.push(Reverse((rank, i as u32)));
            }
        }

        while let Some(Reverse((rank, i))) = heap.pop() {
            let i = i as usize;
            if sym[i] == DEAD {
                continue;
            }
            let j = next[i];
            if j == NONE {
                continue;
            }
            let j = j as usize;
            if self.ranks.get(&pair_key(sym[i], sym[j])) != Some(&rank) {
                continue;
            }
            let merged = FIRST_MERGE_ID + rank;
            let after = next[j];
            sym[i] = merged;
            sym[j] = DEAD;
            next[i] = after;
            if after != NONE {
                prev[after as usize] = i as u32;
                if let Some(&r) = self.ranks.get(&pair_key(merged, sym[after as usize])) {
                    heap.push(Reverse((r, i as u32)));
                }
            }
            let before = prev[i];
            if before != NONE {
                if let Some(&r) = self.ranks.get(&pair_key(sym[before as usize], merged)) {
                    heap.push(Reverse((r, before)));
                }
            }
        }

        sym.into_iter().filter(|&s| s != DEAD).collect()
    }

    pub fn count_tokens(&self, text: &str) -> usize {
        self.encode(text).len()
    }

    pub fn decode_bytes(&self, tokens: &[TokenId]) -> Result<Vec<u8>, BpeError> {
        let mut out = Vec::with_capacity(tokens.len() * 2);
        for (position, &id) in tokens.iter().enumerate() {
            let bytes = self.token_bytes(id).ok_or(BpeError::UnknownToken {
                position,
                id,
                size: self.size(),
            })?;
            out.extend_from_slice(bytes);
        }
        Ok(out)
    }

    /// Decodes to text. Multi-byte characters split by truncation become
    /// U+FFFD.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, BpeError> {
        let bytes = self.decode_bytes(tokens)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Every token sequence (specials excluded) whose bytes spell `word`.
    /// Returns at most `limit` sequences.
    pub fn segmentations(&self, word: &[u8], limit: usize) -> Vec<TokenSequence> {
        let mut by_bytes: HashMap<&[u8], TokenId> = HashMap::new();
        for (id, bytes) in self.expansions.iter().enumerate() {
            if id as TokenId != RECORD_TOKEN && bytes.len() <= word.len() {
                by_bytes.insert(bytes.as_slice(), id as TokenId);
            }
        }
        let mut out = Vec::new();
        let mut stack: Vec<TokenId> = Vec::new();
        fn walk(
            word: &[u8],
            at: usize,
            by_bytes: &HashMap<&[u8], TokenId>,
            stack: &mut Vec<TokenId>,
            out: &mut Vec<TokenSequence>,
            limit: usize,
        ) {
            if out.len() >= limit {
                return;
            }
            if at == word.len() {
                out.push(stack.clone());
                return;
            }
            for end in at + 1..=word.len() {
                if let Some(&id) = by_bytes.get(&word[at..end]) {
                    stack.push(id);
                    walk(word, end, by_bytes, stack, out, limit);
                    stack.pop();
                }
            }
        }
        if !word.is_empty() {
            walk(word, 0, &by_bytes, &mut stack, &mut out, limit);
        }
        out
    }

    pub fn to_file_string(&self) -> String {
        let mut out = format!(
            "{FILE_MAGIC} {FILE_VERSION} size={} specials={NUM_SPECIAL_TOKENS}\n",
            self.size()
        );
        for &(l, r) in &self.merges {
            let _ = writeln!(
                out,
                "{} {}",
                hex(&self.expansions[l as usize]),
                hex(&self.expansions[r as usize])
            );
        }
        out
    }

    pub fn from_file_str(src: &str) -> Result<Self, BpeError> {
        let mut lines = src.lines();
        let header = lines.next().ok_or(BpeError::Format {
            line: 1,
            message: "missing header".into(),
        })?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let size = match fields.as_slice() {
            [FILE_MAGIC, FILE_VERSION, size, specials] => {
                if *specials != format!("specials={NUM_SPECIAL_TOKENS}") {
                    return Err(BpeError::Format {
                        line: 1,
                        message: format!("unsupported {specials}"),
                    });
                }
                size.strip_prefix("size=")
                    .and_then(|s| s.parse::<usize>().ok())
                    .ok_or(BpeError::Format {
                        line: 1,
                        message: format!("bad size field {size:?}"),
                    })?
            }
            _ => {
                return Err(BpeError::Format {
                    line: 1,
                    message: format!("unrecognized header {header:?}"),
                })
            }
        };

        let mut by_bytes: HashMap<Vec<u8>, TokenId> = (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        let mut merges = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| BpeError::Format { line: line_no, message };
            let (l, r) = line.split_once(' ').ok_or_else(|| bad("expected two symbols".into()))?;
            let lb = unhex(l).ok_or_else(|| bad(format!("bad hex {l:?}")))?;
            let rb = unhex(r).ok_or_else(|| bad(format!("bad hex {r:?}")))?;
            let lid = *by_bytes.get(&lb).ok_or_else(|| bad(format!("unknown symbol {l}")))?;
            let rid = *by_bytes.get(&rb).ok_or_else(|| bad(format!("unknown symbol {r}")))?;
            let mut merged = lb;
            merged.extend_from_slice(&rb);
            let id = FIRST_MERGE_ID + merges.len() as TokenId;
            if by_bytes.insert(merged, id).is_some() {
                return Err(bad("duplicate byte expansion".into()));
            }
            merges.push((lid, rid));
        }
        let vocab = Self::from_merges(merges)?;
        if vocab.size() != size {
            return Err(BpeError::Format {
                line: 1,
                message: format!("header size {size} but file defines {}", vocab.size()),
            });
        }
        Ok(vocab)
    }
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn unhex(s: &str) -> Option<Vec<u8>> {
    if s.is_empty() || !s.len().is_multiple_of(2) {
        return None;
    }
    (0..s.len())
        .step_by(2)
        .map(|i| u8::from_str_radix(s.get(i..i + 2)?, 16).ok())
        .collect()
}

/// Outcome of [`train_bpe`].
#[derive(Debug, Clone)]
pub struct BpeTraining {
    pub vocab: Vocabulary,
    /// Training ran out of pairs occurring at least twice before reaching
    /// the target size.
    pub stopped_early: bool,
}

#[derive(PartialEq, Eq)]
struct Candidate {
    count: i64,
    left: Vec<u8>,
    right: Vec<u8>,
    pair: (TokenId, TokenId),
}

impl Ord for Candidate {
    // Max-heap: highest count first, then lexicographically smallest
    // (left bytes, right bytes).
    fn cmp(&self, other: &Self) -> Ordering {
        self.count
            .cmp(&other.count)
            .then_with(|| other.left.cmp(&self.left))
            .then_with(|| other.right.cmp(&self.right))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

type PairCounts = HashMap<u64, (i64, Vec<u32>)>;

/// Learns merges by descending adjacent-pair frequency until `target_size`
/// ids exist or no pair occurs at least twice. Pairs are counted at every
/// adjacent position (overlaps included); each document is a separate
/// sequence. Equal counts break lexicographically on the byte expansions.
/// A pair whose merged bytes equal an existing token is never merged.
pub fn train_bpe<S: AsRef<str> + Sync>(
    corpus: &[S],
    target_size: usize,
    exec: Execution,
) -> Result<BpeTraining, BpeError> {
    if target_size <= FIRST_MERGE_ID as usize {
        return Err(BpeError::TargetTooSmall(target_size));
    }
    if corpus.iter().all(|d| d.as_ref().is_empty()) {
        return Err(BpeError::EmptyCorpus);
    }
    let mut trainer = Trainer::new(corpus, exec);
    let wanted = target_size - FIRST_MERGE_ID as usize;
    while trainer.vocab.merges.len() < wanted {
        if !trainer.merge_best() {
            break;
        }
    }
    let stopped_early = trainer.vocab.merges.len() < wanted;
    if stopped_early {
        log::warn!(
            "bpe: no pair occurs twice after {} merges; vocabulary size {} < target {}",
            trainer.vocab.merges.len(),
            trainer.vocab.size(),
            target_size
        );
    }
    Ok(BpeTraining {
        vocab: trainer.vocab,
        stopped_early,
    })
}

struct Trainer {
    vocab: Vocabulary,
    known: HashSet<Vec<u8>>,
    sym: Vec<TokenId>,
    next: Vec<u32>,
    prev: Vec<u32>,
    counts: HashMap<u64, i64>,
    positions: HashMap<u64, Vec<u32>>,
    heap: BinaryHeap<Candidate>,
}

const NONE: u32 = u32::MAX;
const DEAD: TokenId = TokenId::MAX;

impl Trainer {
    fn new<S: AsRef<str> + Sync>(corpus: &[S], exec: Execution) -> Self {
        let mut offsets = Vec::with_capacity(corpus.len());
        let mut total = 0usize;
        for doc in corpus {
            offsets.push(total);
            total += doc.as_ref().len();
        }
        assert!(total < NONE as usize, "corpus exceeds 4 GiB");

        let mut sym = Vec::with_capacity(total);
        let mut next = Vec::with_capacity(total);
        let mut prev = Vec::with_capacity(total);
        for doc in corpus {
            let bytes = doc.as_ref().as_bytes();
            let base = sym.len() as u32;
            for (k, &b) in bytes.iter().enumerate() {
                sym.push(b as TokenId);
                let k = k as u32;
                next.push(if (k as usize) + 1 < bytes.len() {
                    base + k + 1
                } else {
                    NONE
                });
                prev.push(if k > 0 { base + k - 1 } else { NONE });
            }
        }

        // Per-document pair scans are independent; merging them in document
        // order keeps every position list ascending.
        let docs: Vec<(usize, &[u8])> = offsets
            .iter()
            .zip(corpus)
            .map(|(&o, d)| (o, d.as_ref().as_bytes()))
            .collect();
        let per_doc: Vec<PairCounts> = exec.map(&docs, |&(offset, bytes)| {
            let mut local: PairCounts = HashMap::new();
            for (k, w) in bytes.windows(2).enumerate() {
                let e = local.entry(pair_key(w[0] as TokenId, w[1] as TokenId)).or_default();
                e.0 += 1;
                e.1.push((offset + k) as u32);
            }
            local
        });
        let mut counts: HashMap<u64, i64> = HashMap::new();
        let mut positions: HashMap<u64, Vec<u32>> = HashMap::new();
        for local in per_doc {
            for (key, (c, pos)) in local {
                *counts.entry(key).or_default() += c;
                positions.entry(key).or_default().extend(pos);
            }
        }

        let vocab = Vocabulary::byte_level();
        let known = vocab.expansions[..256].iter().cloned().collect();
        let mut trainer = Trainer {
            vocab,
            known,
            sym,
            next,
            prev,
            counts,
            positions,
            heap: BinaryHeap::new(),
        };
        let keys: Vec<u64> = trainer.counts.keys().copied().collect();
        for key in keys {
            trainer.push_candidate(key);
        }
        trainer
    }

    fn push_candidate(&mut self, key: u64) {
        let count = self.counts.get(&key).copied().unwrap_or(0);
        if count < 2 {
            return;
        }
        let pair = ((key >> 32) as TokenId, key as TokenId);
        self.heap.push(Candidate {
            count,
            left: self.vocab.expansions[pair.0 as usize].clone(),
            right: self.vocab.expansions[pair.1 as usize].clone(),
            pair,
        });
    }

    fn pop_best(&mut self) -> Option<(TokenId, TokenId, Vec<u8>)> {
        while let Some(c) = self.heap.pop() {
            let key = pair_key(c.pair.0, c.pair.1);
            if self.counts.get(&key).copied().unwrap_or(0) != c.count {
                continue;
            }
            let mut merged = c.left;
            merged.extend_from_slice(&c.right);
            if self.known.contains(&merged) {
                // permanently excluded; drop its bookkeeping
                self.counts.remove(&key);
                self.positions.remove(&key);
                continue;
            }
            return Some((c.pair.0, c.pair.1, merged));
        }
        None
    }

    fn bump(&mut self, key: u64, delta: i64, touched: &mut HashSet<u64>) {
        let e = self.counts.entry(key).or_default();
        *e += delta;
        if *e <= 0 {
            self.counts.remove(&key);
        }
        touched.insert(key);
    }

    fn merge_best(&mut self) -> bool {
        let Some((a, b, bytes)) = self.pop_best() else {
            return false;
        };
        let merged = FIRST_MERGE_ID + self.vocab.merges.len() as TokenId;
        self.known.insert(bytes.clone());
        self.vocab.push_merge(a, b, bytes);

        let key_ab = pair_key(a, b);
        let mut pos = self.positions.remove(&key_ab).unwrap_or_default();
        pos.sort_unstable();
        pos.dedup();
        let mut touched: HashSet<u64> = HashSet::new();

        for i in pos {
            let i = i as usize;
            if self.sym[i] != a {
                continue;
            }
            let j = self.next[i];
            if j == NONE || self.sym[j as usize] != b {
                continue;
            }
            let j = j as usize;
            let before = self.prev[i];
            let after = self.next[j];
            if before != NONE {
                let s = self.sym[before as usize];
                self.bump(pair_key(s, a), -1, &mut touched);
                self.bump(pair_key(s, merged), 1, &mut touched);
                self.positions.entry(pair_key(s, merged)).or_default().push(before);
            }
            if after != NONE {
                let s = self.sym[after as usize];
                self.bump(pair_key(b, s), -1, &mut touched);
                self.bump(pair_key(merged, s), 1, &mut touched);
                self.positions.entry(pair_key(merged, s)).or_default().push(i as u32);
                self.prev[after as usize] = i as u32;
            }
            self.bump(key_ab, -1, &mut touched);
            self.sym[i] = merged;
            self.sym[j] = DEAD;
            self.next[i] = after;
        }

        touched.remove(&key_ab);
        self.counts.remove(&key_ab);
        let mut touched: Vec<u64> = touched.into_iter().collect();
        touched.sort_unstable();
        for key in touched {
            if !self.counts.contains_key(&key) {
                self.positions.remove(&key);
            }
            self.push_candidate(key);
        }
        true
    }
}
