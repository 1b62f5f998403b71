//! Constrained stochastic beam search.
//!
//! Each step, every live beam queries the backend, keeps the top-k tokens
//! (renormalized), masks tokens that would complete a banned sequence or
//! repeat an n-gram of context + prefix, and draws `samples_per_beam`
//! distinct candidates from what remains. Candidates from all beams are
//! pooled with finished beams and pruned to `beam_size` by joint
//! log-likelihood under the backend's unmodified distribution.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::{TokenId, TokenSequence, Vocabulary, RECORD_TOKEN};
use crate::exec::Execution;
use crate::lm::{LanguageModel, NextTokenDistribution};

pub const QUOTE_MARKER: &str = "Citat:";
pub const DEFAULT_BANNED_WORDS: &[&str] = &["mod"];
/// Cap on token spellings generated per banned word.
const MAX_SEGMENTATIONS: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub top_k: usize,
    /// 0 disables n-gram blocking.
    pub no_repeat_ngram: usize,
    pub banned_sequences: Vec<TokenSequence>,
    /// Byte strings that may not appear anywhere in the generated text.
    pub banned_text: Vec<String>,
    pub max_total_tokens: usize,
    pub max_new_tokens: usize,
    pub rng_seed: u64,
    /// Defaults to `beam_size`.
    pub samples_per_beam: Option<usize>,
    /// Rank by `log_prob / len^p` instead of raw `log_prob`.
    pub length_penalty: Option<f64>,
    /// Stop when the output starts a new `[userK]:` post header.
    pub stop_at_post_header: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 6,
            top_k: 50,
            no_repeat_ngram: 3,
            banned_sequences: Vec::new(),
            banned_text: Vec::new(),
            max_total_tokens: 400,
            max_new_tokens: 120,
            rng_seed: 0,
            samples_per_beam: None,
            length_penalty: None,
            stop_at_post_header: true,
        }
    }
}

impl DecodeConfig {
    pub fn samples_per_beam(&self) -> usize {
        self.samples_per_beam.unwrap_or(self.beam_size)
    }

    /// Bans every token spelling of each word. With `as_text`, the word is
    /// also banned as a byte substring of the output.
    pub fn ban_words<S: AsRef<str>>(&mut self, vocab: &Vocabulary, words: &[S], as_text: bool) {
        for w in words {
            let w = w.as_ref();
            if w.is_empty() {
                continue;
            }
            let spellings = vocab.segmentations(w.as_bytes(), MAX_SEGMENTATIONS);
            if spellings.len() == MAX_SEGMENTATIONS {
                log::warn!("banned word {w:?}: token spellings capped at {MAX_SEGMENTATIONS}");
            }
            for s in spellings {
                if !self.banned_sequences.contains(&s) {
                    self.banned_sequences.push(s);
                }
            }
            if as_text && !self.banned_text.iter().any(|t| t == w) {
                self.banned_text.push(w.to_owned());
            }
        }
    }

    /// Forbids quote blocks in the output.
    pub fn ban_quotes(&mut self, vocab: &Vocabulary) {
        self.ban_words(vocab, &[QUOTE_MARKER], true);
    }

    fn validate(&self, context_len: usize) -> Result<(), DecodeError> {
        if self.beam_size == 0 || self.top_k == 0 || self.samples_per_beam() == 0 {
            return Err(DecodeError::InvalidConfig(
                "beam_size, top_k and samples_per_beam must be at least 1".into(),
            ));
        }
        if self.banned_sequences.iter().any(Vec::is_empty) {
            return Err(DecodeError::InvalidConfig("empty banned sequence".into()));
        }
        if context_len + 1 > self.max_total_tokens {
            return Err(DecodeError::ContextTooLong {
                context: context_len,
                max_total: self.max_total_tokens,
            });
        }
        Ok(())
    }
}

/// One word per line; blank lines and `#` comments are skipped.
pub fn parse_word_list(src: &str) -> Vec<String> {
    src.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    PostHeader,
    RecordDelimiter,
    MaxNewTokens,
    MaxTotalTokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedResponse {
    /// The response body: generated text up to the terminator, trailing
    /// whitespace trimmed.
    pub text: String,
    /// Every generated token, terminator included.
    pub tokens: TokenSequence,
    pub joint_log_prob: f64,
    /// Backend log-probability of each generated token.
    pub step_log_probs: Vec<f64>,
    pub steps: usize,
    pub finish: FinishReason,
}

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("invalid decode configuration: {0}")]
    InvalidConfig(String),
    #[error("context of {context} tokens leaves no room under max_total_tokens {max_total}")]
    ContextTooLong { context: usize, max_total: usize },
    #[error("every beam dead-ended after {} tokens", .partial.len())]
    DeadEnd {
        partial: TokenSequence,
        partial_text: String,
    },
    #[error(transparent)]
    Bpe(#[from] crate::bpe::BpeError),
}

/// Constraints removed every candidate token.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("all candidate tokens are masked")]
pub struct AllMasked;

/// Keeps the `k` most probable tokens (lower id first on ties) and rescales
/// them to sum to one.
pub fn top_k_renormalize(dist: &NextTokenDistribution, k: usize) -> NextTokenDistribution {
    let mut entries = dist.entries().to_vec();
    if k < entries.len() {
        entries.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        entries.truncate(k);
    }
    renormalize(entries).expect("non-empty support")
}

fn renormalize(entries: Vec<(TokenId, f64)>) -> Result<NextTokenDistribution, AllMasked> {
    let total: f64 = entries.iter().map(|&(_, p)| p).sum();
    if entries.is_empty() || total <= 0.0 {
        return Err(AllMasked);
    }
    Ok(NextTokenDistribution::from_entries(
        entries.into_iter().map(|(t, p)| (t, p / total)).collect(),
    ))
}

/// Tokens that would complete a repeated n-gram or a banned sequence.
pub fn blocked_tokens(context: &[TokenId], prefix: &[TokenId], config: &DecodeConfig) -> HashSet<TokenId> {
    let mut blocked = HashSet::new();

    let n = config.no_repeat_ngram;
    if n >= 1 {
        let full: Vec<TokenId> = context.iter().chain(prefix).copied().collect();
        if full.len() + 1 >= n {
            let suffix = &full[full.len() + 1 - n..];
            for window in full.windows(n) {
                if &window[..n - 1] == suffix {
                    blocked.insert(window[n - 1]);
                }
            }
        }
    }

    for seq in &config.banned_sequences {
        let (last, head) = seq.split_last().expect("validated non-empty");
        if prefix.ends_with(head) {
            blocked.insert(*last);
        }
    }
    blocked
}

/// Zeroes blocked tokens and renormalizes.
pub fn apply_constraints(
    dist: &NextTokenDistribution,
    context: &[TokenId],
    prefix: &[TokenId],
    config: &DecodeConfig,
) -> Result<NextTokenDistribution, AllMasked> {
    let blocked = blocked_tokens(context, prefix, config);
    renormalize(
        dist.entries()
            .iter()
            .filter(|(t, _)| !blocked.contains(t))
            .copied()
            .collect(),
    )
}

/// Zeroes tokens whose bytes would complete a banned substring of the
/// generated text, then renormalizes.
pub fn apply_text_bans(
    dist: &NextTokenDistribution,
    vocab: &Vocabulary,
    generated: &[u8],
    banned: &[String],
) -> Result<NextTokenDistribution, AllMasked> {
    if banned.is_empty() {
        return Ok(dist.clone());
    }
    let longest = banned.iter().map(String::len).max().unwrap_or(0);
    let tail = &generated[generated.len().saturating_sub(longest.saturating_sub(1))..];
    let mut window = Vec::with_capacity(tail.len() + 16);
    renormalize(
        dist.entries()
            .iter()
            .filter(|&&(t, _)| {
                window.clear();
                window.extend_from_slice(tail);
                window.extend_from_slice(vocab.token_bytes(t).unwrap_or_default());
                !banned.iter().any(|w| contains(&window, w.as_bytes()))
            })
            .copied()
            .collect(),
    )
}

fn contains(haystack: &[u8], needle: &[u8]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

/// Start of the first line shaped `[user<digits>]:`.
pub fn find_post_header(bytes: &[u8]) -> Option<usize> {
    let mut line_start = 0;
    loop {
        let rest = &bytes[line_start..];
        if let Some(after) = rest.strip_prefix(b"[user") {
            let digits = after.iter().take_while(|b| b.is_ascii_digit()).count();
            if digits > 0 && after[digits..].starts_with(b"]:") {
                return Some(line_start);
            }
        }
        let nl = rest.iter().position(|&b| b == b'\n')?;
        line_start += nl + 1;
    }
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: TokenSequence,
    bytes: Vec<u8>,
    log_prob: f64,
    step_log_probs: Vec<f64>,
    finished: Option<(FinishReason, usize)>,
}

impl Beam {
    fn rank_score(&self, length_penalty: Option<f64>) -> f64 {
        match length_penalty {
            Some(p) if !self.tokens.is_empty() => self.log_prob / (self.tokens.len() as f64).powf(p),
            _ => self.log_prob,
        }
    }

    fn into_response(self, finish: FinishReason) -> GeneratedResponse {
        let body_end = match self.finished {
            Some((_, end)) => end,
            None => self.bytes.len(),
        };
        let text = String::from_utf8_lossy(&self.bytes[..body_end]).trim_end().to_owned();
        GeneratedResponse {
            text,
            steps: self.tokens.len(),
            tokens: self.tokens,
            joint_log_prob: self.log_prob,
            step_log_probs: self.step_log_probs,
            finish,
        }
    }
}

fn compare_beams(a: &Beam, b: &Beam, length_penalty: Option<f64>) -> Ordering {
    b.rank_score(length_penalty)
        .partial_cmp(&a.rank_score(length_penalty))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Generates a continuation of `context`. Deterministic for fixed backend,
/// context and config (seed included).
pub fn generate<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    context: &[TokenId],
    config: &DecodeConfig,
) -> Result<GeneratedResponse, DecodeError> {
    config.validate(context.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    let spb = config.samples_per_beam();

    let mut beams = vec![Beam {
        tokens: Vec::new(),
        bytes: Vec::new(),
        log_prob: 0.0,
        step_log_probs: Vec::new(),
        finished: None,
    }];
    let mut full = context.to_vec();

    loop {
        let generated = beams.iter().find(|b| b.finished.is_none()).map(|b| b.tokens.len());
        let Some(generated) = generated else { break };
        if generated >= config.max_new_tokens || context.len() + generated >= config.max_total_tokens {
            break;
        }

        let mut pool: Vec<Beam> = Vec::new();
        let mut expanded_any = false;
        for beam in &beams {
            if beam.finished.is_some() {
                pool.push(beam.clone());
                continue;
            }
            full.truncate(context.len());
            full.extend_from_slice(&beam.tokens);
            let raw = model.next_token_distribution(&full);
            let top = top_k_renormalize(&raw, config.top_k);
            let constrained = apply_constraints(&top, context, &beam.tokens, config)
                .and_then(|d| apply_text_bans(&d, vocab, &beam.bytes, &config.banned_text));
            let Ok(dist) = constrained else { continue };
            expanded_any = true;

            let mut picks: Vec<TokenId> = dist
                .entries()
                .choose_multiple_weighted(&mut rng, spb, |&(_, p)| p)
                .expect("weights are positive and finite")
                .map(|&(t, _)| t)
                .collect();
            picks.sort_unstable();

            for t in picks {
                let lp = raw.prob(t).ln();
                let mut next = beam.clone();
                next.tokens.push(t);
                next.log_prob += lp;
                next.step_log_probs.push(lp);
                if t == RECORD_TOKEN {
                    next.finished = Some((FinishReason::RecordDelimiter, next.bytes.len()));
                } else {
                    next.bytes.extend_from_slice(vocab.token_bytes(t).unwrap_or_default());
                    if config.stop_at_post_header {
                        if let Some(at) = find_post_header(&next.bytes) {
                            next.finished = Some((FinishReason::PostHeader, at));
                        }
                    }
                }
                pool.push(next);
            }
        }

        if !expanded_any && pool.iter().all(|b| b.finished.is_none()) {
            let best = beams
                .iter()
                .min_by(|a, b| compare_beams(a, b, config.length_penalty))
                .expect("at least one beam");
            return Err(DecodeError::DeadEnd {
                partial: best.tokens.clone(),
                partial_text: String::from_utf8_lossy(&best.bytes).into_owned(),
            });
        }

        pool.sort_by(|a, b| compare_beams(a, b, config.length_penalty));
        pool.dedup_by(|a, b| a.tokens == b.tokens);
        pool.truncate(config.beam_size);
        beams = pool;
        if !expanded_any {
            break;
        }
    }

    let best_finished = beams
        .iter()
        .filter(|b| b.finished.is_some())
        .min_by(|a, b| compare_beams(a, b, config.length_penalty));
    if let Some(b) = best_finished {
        let reason = b.finished.expect("finished").0;
        return Ok(b.clone().into_response(reason));
    }
    let best = beams
        .into_iter()
        .min_by(|a, b| compare_beams(a, b, config.length_penalty))
        .expect("at least one beam");
    let reason = if best.tokens.len() >= config.max_new_tokens {
        FinishReason::MaxNewTokens
    } else {
        FinishReason::MaxTotalTokens
    };
    Ok(best.into_response(reason))
}

/// Runs [`generate`] once per seed; results are in seed order.
pub fn generate_many<M: LanguageModel + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    context: &[TokenId],
    config: &DecodeConfig,
    seeds: &[u64],
    exec: Execution,
) -> Vec<Result<GeneratedResponse, DecodeError>> {
    exec.map(seeds, |&seed| {
        let cfg = DecodeConfig {
            rng_seed: seed,
            ..config.clone()
        };
        generate(model, vocab, context, &cfg)
    })
}
