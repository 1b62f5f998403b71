//! Serialization of threads into bounded-token training records.
//!
//! A record looks like
//!
//! ```text
//! Dator och IT > Hårdvara: PC
//! Luft eller vattenkylning till cpu
//!
//! [user1]:
//! first post
//!
//! [user2]:
//! Citat: [user1]
//!         quoted line
//! reply
//! ```
//!
//! Usernames are replaced by `[userK]` placeholders in order of first
//! appearance within the thread. Continuation records repeat the two header
//! lines. Records carry no trailing newline.

use std::collections::HashMap;

use crate::bpe::{Vocabulary, RECORD_DELIMITER};
use crate::exec::Execution;
use crate::thread::{ForumThread, Post};

pub const DEFAULT_RECORD_BUDGET: usize = 400;
pub const QUOTE_INDENT: &str = "        ";

/// Placeholder labels for one thread.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnonymizationMap {
    labels: HashMap<String, usize>,
}

impl AnonymizationMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// The placeholder for `user`, assigning the next free one if unseen.
    pub fn label(&mut self, user: &str) -> String {
        let next = self.labels.len() + 1;
        let k = *self.labels.entry(user.to_owned()).or_insert(next);
        format!("[user{k}]")
    }

    pub fn get(&self, user: &str) -> Option<String> {
        self.labels.get(user).map(|k| format!("[user{k}]"))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Renders one post. The author is labelled before the quoted author.
pub fn render_post(post: &Post, map: &mut AnonymizationMap) -> String {
    let mut out = map.label(&post.author);
    out.push_str(":\n");
    if let Some(q) = &post.quote {
        out.push_str("Citat: ");
        out.push_str(&map.label(&q.author));
        out.push('\n');
        for line in q.text.lines() {
            out.push_str(QUOTE_INDENT);
            out.push_str(line);
            out.push('\n');
        }
    }
    out.push_str(&post.body);
    out
}

/// Forum path line, title line and the blank separator line.
pub fn render_header(thread: &ForumThread) -> String {
    format!("{}\n{}\n\n", thread.forum, thread.title)
}

/// The whole thread as one unbounded record.
pub fn render_thread(thread: &ForumThread) -> String {
    let mut map = AnonymizationMap::new();
    let posts: Vec<String> = thread.posts.iter().map(|p| render_post(p, &mut map)).collect();
    render_header(thread) + &posts.join("\n\n")
}

/// Drops the quote, keeping the body verbatim.
pub fn strip_quotes(post: &Post) -> Post {
    Post {
        quote: None,
        ..post.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingRecord {
    pub text: String,
    pub source_thread: usize,
    pub part_index: usize,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FormatWarning {
    /// A single post did not fit in a record on its own and was cut.
    TruncatedPost {
        source_thread: usize,
        post_index: usize,
        original_tokens: usize,
    },
    /// The budget cannot hold even the header plus one token.
    HeaderExceedsBudget { source_thread: usize, header_tokens: usize },
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FormattedThread {
    pub records: Vec<TrainingRecord>,
    pub warnings: Vec<FormatWarning>,
}

/// Packs threads into records of at most `budget` tokens.
pub struct RecordFormatter<'v> {
    vocab: &'v Vocabulary,
    budget: usize,
}

impl<'v> RecordFormatter<'v> {
    pub fn new(vocab: &'v Vocabulary, budget: usize) -> Self {
        RecordFormatter { vocab, budget }
    }

    pub fn budget(&self) -> usize {
        self.budget
    }

    /// Greedy packing at post boundaries: a post joins the current record
    /// unless the record would then exceed the budget. A post that exceeds
    /// the budget alone is emitted in its own record, truncated.
    pub fn format_thread(&self, source_thread: usize, thread: &ForumThread) -> FormattedThread {
        let header = render_header(thread);
        let header_tokens = self.vocab.count_tokens(&header);
        let mut out = FormattedThread::default();
        if header_tokens >= self.budget {
            out.warnings.push(FormatWarning::HeaderExceedsBudget {
                source_thread,
                header_tokens,
            });
            log::warn!(
                "thread {source_thread}: header alone is {header_tokens} tokens, budget {}",
                self.budget
            );
            return out;
        }

        let mut map = AnonymizationMap::new();
        let rendered: Vec<String> = thread.posts.iter().map(|p| render_post(p, &mut map)).collect();

        // (text, token_count) of the record under construction
        let mut current: Option<(String, usize)> = None;
        for (post_index, post) in rendered.iter().enumerate() {
            if let Some((text, _)) = &current {
                let candidate = format!("{text}\n\n{post}");
                let n = self.vocab.count_tokens(&candidate);
                if n <= self.budget {
                    current = Some((candidate, n));
                    continue;
                }
                let (text, n) = current.take().unwrap();
                self.push(&mut out, source_thread, text, n);
            }
            let alone = format!("{header}{post}");
            let n = self.vocab.count_tokens(&alone);
            if n <= self.budget {
                current = Some((alone, n));
            } else {
                let (text, n) = self.truncate(&alone);
                out.warnings.push(FormatWarning::TruncatedPost {
                    source_thread,
                    post_index,
                    original_tokens: self.vocab.count_tokens(&alone),
                });
                log::warn!(
                    "thread {source_thread}: post {post_index} truncated to fit {} tokens",
                    self.budget
                );
                self.push(&mut out, source_thread, text, n);
            }
        }
        if let Some((text, n)) = current {
            self.push(&mut out, source_thread, text, n);
        }
        out
    }

    fn push(&self, out: &mut FormattedThread, source_thread: usize, text: String, token_count: usize) {
        let part_index = out.records.len();
        out.records.push(TrainingRecord {
            text,
            source_thread,
            part_index,
            token_count,
        });
    }

    /// Cuts `text` at a token boundary (backed off to a UTF-8 boundary) so
    /// that re-encoding it fits the budget.
    fn truncate(&self, text: &str) -> (String, usize) {
        let ids = self.vocab.encode(text);
        let mut keep = self.budget.min(ids.len());
        loop {
            let bytes = self.vocab.decode_bytes(&ids[..keep]).expect("ids come from encode");
            let cut = match std::str::from_utf8(&bytes) {
                Ok(s) => s.len(),
                Err(e) => e.valid_up_to(),
            };
            let s = String::from_utf8(bytes[..cut].to_vec()).expect("valid prefix");
            let n = self.vocab.count_tokens(&s);
            if n <= self.budget {
                return (s, n);
            }
            keep -= 1;
        }
    }

    /// Formats a corpus; record order follows thread order.
    pub fn format_corpus(&self, threads: &[ForumThread], exec: Execution) -> FormattedThread {
        let indexed: Vec<(usize, &ForumThread)> = threads.iter().enumerate().collect();
        let parts = exec.map(&indexed, |&(i, t)| self.format_thread(i, t));
        let mut all = FormattedThread::default();
        for p in parts {
            all.records.extend(p.records);
            all.warnings.extend(p.warnings);
        }
        all
    }
}

/// Record file: each record followed by a line holding only the delimiter.
pub fn write_record_file<'a>(records: impl IntoIterator<Item = &'a TrainingRecord>) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.text);
        out.push('\n');
        out.push_str(RECORD_DELIMITER);
        out.push('\n');
    }
    out
}

/// Splits a record file back into record texts.
pub fn read_record_file(src: &str) -> Vec<String> {
    let mut records = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for line in src.lines() {
        if line == RECORD_DELIMITER {
            records.push(current.join("\n"));
            current.clear();
        } else {
            current.push(line);
        }
    }
    if current.iter().any(|l| !l.is_empty()) {
        records.push(current.join("\n"));
    }
    records
}
