//! Autoregressive language-model backends.
//!
//! [`LanguageModel`] is the seam the decoder consumes. [`NGramModel`] is the
//! desk-scale backend: a Markov truncation of the full-history
//! factorization `p(x_1..x_n) = p(x_1) * prod_i p(x_i | x_<i)`, with
//! additive smoothing
//!
//! ```text
//! p(t | ctx) = (count(ctx, t) + alpha) / (total(ctx) + alpha * vocab_size)
//! ```
//!
//! where `ctx` is the last `order - 1` tokens of the history. Each record is
//! counted from an empty history, so short contexts are record-start states.
//!
//! Model file layout (text, one entry per line, sorted):
//!
//! ```text
//! forumlm-ngram v1
//! order <n>
//! alpha <f64>
//! vocab_size <v>
//! end_token <id|none>
//! <ctx ids space-separated, or '-' for empty>\t<token>\t<count>
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;

use thiserror::Error;

use crate::bpe::{TokenId, TokenSequence};

pub const DEFAULT_ORDER: usize = 4;
pub const DEFAULT_ALPHA: f64 = 0.1;
const FILE_MAGIC: &str = "forumlm-ngram v1";

#[derive(Debug, Error)]
pub enum LmError {
    #[error("no training records")]
    EmptyCorpus,
    #[error("order must be at least 1")]
    ZeroOrder,
    #[error("smoothing constant must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("vocabulary size must be positive")]
    EmptyVocabulary,
    #[error("token {token} is outside the model vocabulary of {vocab_size}")]
    TokenOutOfRange { token: TokenId, vocab_size: usize },
    #[error("cannot score an empty sequence")]
    EmptySequence,
    #[error("model file line {line}: {message}")]
    Format { line: usize, message: String },
}

/// A probability for every token id below the vocabulary size, as sparse
/// `(id, p)` entries sorted by id. Ids not listed have probability zero.
#[derive(Debug, Clone, PartialEq)]
pub struct NextTokenDistribution {
    entries: Vec<(TokenId, f64)>,
}

impl NextTokenDistribution {
    pub fn from_dense(probs: Vec<f64>) -> Self {
        NextTokenDistribution {
            entries: probs
                .into_iter()
                .enumerate()
                .filter(|&(_, p)| p > 0.0)
                .map(|(i, p)| (i as TokenId, p))
                .collect(),
        }
    }

    /// Entries must have distinct ids; they are sorted here.
    pub fn from_entries(mut entries: Vec<(TokenId, f64)>) -> Self {
        entries.retain(|&(_, p)| p > 0.0);
        entries.sort_by_key(|&(t, _)| t);
        NextTokenDistribution { entries }
    }

    pub fn entries(&self) -> &[(TokenId, f64)] {
        &self.entries
    }

    pub fn prob(&self, token: TokenId) -> f64 {
        self.entries
            .binary_search_by_key(&token, |&(t, _)| t)
            .map(|i| self.entries[i].1)
            .unwrap_or(0.0)
    }

    pub fn support_len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.entries.iter().map(|&(_, p)| p).sum()
    }

    /// Highest-probability token, lowest id on ties.
    pub fn argmax(&self) -> Option<TokenId> {
        self.entries
            .iter()
            .fold(None, |best: Option<(TokenId, f64)>, &(t, p)| match best {
                Some((_, bp)) if bp >= p => best,
                _ => Some((t, p)),
            })
            .map(|(t, _)| t)
    }
}

/// Given a context, produce the next-token distribution.
pub trait LanguageModel: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn next_token_distribution(&self, context: &[TokenId]) -> NextTokenDistribution;

    /// Sum of stepwise log conditionals, the first token scored under the
    /// empty context.
    fn sequence_log_prob(&self, tokens: &[TokenId]) -> Result<f64, LmError> {
        if tokens.is_empty() {
            return Err(LmError::EmptySequence);
        }
        Ok(self.continuation_log_prob(&[], tokens))
    }

    /// `log p(continuation | context)` by the chain rule.
    fn continuation_log_prob(&self, context: &[TokenId], continuation: &[TokenId]) -> f64 {
        let mut history: Vec<TokenId> = context.to_vec();
        let mut total = 0.0;
        for &t in continuation {
            total += self.next_token_distribution(&history).prob(t).ln();
            history.push(t);
        }
        total
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct ContextCounts {
    total: u64,
    next: BTreeMap<TokenId, u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NGramModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    end_token: Option<TokenId>,
    counts: BTreeMap<Vec<TokenId>, ContextCounts>,
}

impl NGramModel {
    /// Counts every (history, token) event of every record. When `end_token`
    /// is set it is appended to each record as a final event.
    pub fn train<'a, I>(
        records: I,
        vocab_size: usize,
        order: usize,
        alpha: f64,
        end_token: Option<TokenId>,
    ) -> Result<Self, LmError>
    where
        I: IntoIterator<Item = &'a [TokenId]>,
    {
        let mut model = NGramModel::empty(vocab_size, order, alpha, end_token)?;
        let mut any = false;
        for record in records {
            any = true;
            model.add_record(record)?;
        }
        if !any {
            return Err(LmError::EmptyCorpus);
        }
        Ok(model)
    }

    fn empty(vocab_size: usize, order: usize, alpha: f64, end_token: Option<TokenId>) -> Result<Self, LmError> {
        if order == 0 {
            return Err(LmError::ZeroOrder);
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(LmError::BadAlpha(alpha));
        }
        if vocab_size == 0 {
            return Err(LmError::EmptyVocabulary);
        }
        if let Some(t) = end_token {
            if t as usize >= vocab_size {
                return Err(LmError::TokenOutOfRange { token: t, vocab_size });
            }
        }
        Ok(NGramModel {
            order,
            alpha,
            vocab_size,
            end_token,
            counts: BTreeMap::new(),
        })
    }

    fn add_record(&mut self, record: &[TokenId]) -> Result<(), LmError> {
        let mut events: Vec<TokenId> = record.to_vec();
        events.extend(self.end_token);
        for (i, &t) in events.iter().enumerate() {
            if t as usize >= self.vocab_size {
                return Err(LmError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.vocab_size,
                });
            }
            let start = i.saturating_sub(self.order - 1);
            let entry = self.counts.entry(events[start..i].to_vec()).or_default();
            entry.total += 1;
            *entry.next.entry(t).or_default() += 1;
        }
        Ok(())
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn end_token(&self) -> Option<TokenId> {
        self.end_token
    }

    /// Exact count of `token` following `context` (context used verbatim).
    pub fn count(&self, context: &[TokenId], token: TokenId) -> u64 {
        self.counts
            .get(context)
            .and_then(|c| c.next.get(&token))
            .copied()
            .unwrap_or(0)
    }

    fn history<'c>(&self, context: &'c [TokenId]) -> &'c [TokenId] {
        &context[context.len().saturating_sub(self.order - 1)..]
    }

    pub fn prob(&self, context: &[TokenId], token: TokenId) -> f64 {
        let denom_extra = self.alpha * self.vocab_size as f64;
        match self.counts.get(self.history(context)) {
            Some(c) => {
                let n = c.next.get(&token).copied().unwrap_or(0) as f64;
                (n + self.alpha) / (c.total as f64 + denom_extra)
            }
            None => 1.0 / self.vocab_size as f64,
        }
    }

    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{FILE_MAGIC}");
        let _ = writeln!(out, "order {}", self.order);
        let _ = writeln!(out, "alpha {:?}", self.alpha);
        let _ = writeln!(out, "vocab_size {}", self.vocab_size);
        match self.end_token {
            Some(t) => {
                let _ = writeln!(out, "end_token {t}");
            }
            None => out.push_str("end_token none\n"),
        }
        for (ctx, c) in &self.counts {
            let ctx_field = if ctx.is_empty() {
                "-".to_string()
            } else {
                ctx.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
            };
            for (tok, n) in &c.next {
                let _ = writeln!(out, "{ctx_field}\t{tok}\t{n}");
            }
        }
        out
    }

    pub fn from_file_str(src: &str) -> Result<Self, LmError> {
        let mut lines = src.lines().enumerate();
        let mut header = |key: &str| -> Result<String, LmError> {
            let (idx, line) = lines.next().ok_or(LmError::Format {
                line: 0,
                message: format!("missing {key}"),
            })?;
            if key == "magic" {
                return if line == FILE_MAGIC {
                    Ok(String::new())
                } else {
                    Err(LmError::Format {
                        line: idx + 1,
                        message: format!("unrecognized header {line:?}"),
                    })
                };
            }
            line.strip_prefix(key)
                .and_then(|v| v.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or(LmError::Format {
                    line: idx + 1,
                    message: format!("expected {key}"),
                })
        };
        let bad = |line: usize, message: String| LmError::Format { line, message };
        header("magic")?;
        let order = header("order")?.parse::<usize>().map_err(|e| bad(2, e.to_string()))?;
        let alpha = header("alpha")?.parse::<f64>().map_err(|e| bad(3, e.to_string()))?;
        let vocab_size = header("vocab_size")?
            .parse::<usize>()
            .map_err(|e| bad(4, e.to_string()))?;
        let end = header("end_token")?;
        let end_token = match end.as_str() {
            "none" => None,
            s => Some(s.parse::<TokenId>().map_err(|e| bad(5, e.to_string()))?),
        };
        let mut model = NGramModel::empty(vocab_size, order, alpha, end_token)?;

        for (idx, line) in src.lines().enumerate().skip(5) {
            let line_no = idx + 1;
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [ctx, tok, n] = fields.as_slice() else {
                return Err(bad(line_no, "expected three tab-separated fields".into()));
            };
            let ctx: Vec<TokenId> = if *ctx == "-" {
                Vec::new()
            } else {
                ctx.split(' ')
                    .map(|t| t.parse::<TokenId>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| bad(line_no, e.to_string()))?
            };
            if ctx.len() >= order {
                return Err(bad(line_no, "context longer than order - 1".into()));
            }
            let tok: TokenId = tok
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(line_no, e.to_string()))?;
            let n: u64 = n
                .parse()
                .map_err(|e: std::num::ParseIntError| bad(line_no, e.to_string()))?;
            if tok as usize >= vocab_size || ctx.iter().any(|&t| t as usize >= vocab_size) {
                return Err(bad(line_no, "token outside vocabulary".into()));
            }
            let entry = model.counts.entry(ctx).or_default();
            entry.total += n;
            *entry.next.entry(tok).or_default() += n;
        }
        Ok(model)
    }
}

impl LanguageModel for NGramModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_token_distribution(&self, context: &[TokenId]) -> NextTokenDistribution {
        let v = self.vocab_size;
        let Some(c) = self.counts.get(self.history(context)) else {
            return NextTokenDistribution::from_dense(vec![1.0 / v as f64; v]);
        };
        let denom = c.total as f64 + self.alpha * v as f64;
        let base = self.alpha / denom;
        let mut probs = vec![base; v];
        for (&t, &n) in &c.next {
            probs[t as usize] = (n as f64 + self.alpha) / denom;
        }
        NextTokenDistribution::from_dense(probs)
    }
}

/// Convenience for callers holding token sequences.
pub fn train_ngram(
    records: &[TokenSequence],
    vocab_size: usize,
    order: usize,
    alpha: f64,
    end_token: Option<TokenId>,
) -> Result<NGramModel, LmError> {
    NGramModel::train(records.iter().map(Vec::as_slice), vocab_size, order, alpha, end_token)
}
