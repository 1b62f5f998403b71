//! Forum threads and the line-delimited thread interchange format.
//!
//! One thread per line, each line a JSON object:
//!
//! ```text
//! {"forum":["Dator och IT","Hårdvara: PC"],"title":"...","posts":[{"author":"u1","body":"..."},
//!   {"author":"u2","body":"...","quote":{"author":"u1","text":"..."}}]}
//! ```
//!
//! Blank lines are ignored. Quote text is kept verbatim.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ThreadError {
    #[error("line {line}: malformed thread record: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: thread {title:?}: post {post_index} has an empty body")]
    EmptyBody {
        line: usize,
        title: String,
        post_index: usize,
    },
    #[error("line {line}: thread {title:?} has no posts")]
    NoPosts { line: usize, title: String },
    #[error("line {line}: thread {title:?} has an empty forum path")]
    EmptyForum { line: usize, title: String },
}

/// Forum names from the top-level forum downward.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ForumPath(Vec<String>);

impl ForumPath {
    /// Returns `None` for an empty path.
    pub fn new(segments: Vec<String>) -> Option<Self> {
        if segments.is_empty() {
            None
        } else {
            Some(ForumPath(segments))
        }
    }

    pub fn segments(&self) -> &[String] {
        &self.0
    }

    /// The top-level forum, used as the stratum of a thread.
    pub fn top_level(&self) -> &str {
        &self.0[0]
    }
}

impl fmt::Display for ForumPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0.join(" > "))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Quote {
    pub author: String,
    pub text: String,
    /// The quoted author has not posted earlier in the thread.
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Post {
    pub author: String,
    pub body: String,
    pub quote: Option<Quote>,
}

impl Post {
    pub fn new(author: impl Into<String>, body: impl Into<String>) -> Self {
        Post {
            author: author.into(),
            body: body.into(),
            quote: None,
        }
    }

    pub fn with_quote(mut self, author: impl Into<String>, text: impl Into<String>) -> Self {
        self.quote = Some(Quote {
            author: author.into(),
            text: text.into(),
            external: false,
        });
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForumThread {
    pub forum: ForumPath,
    pub title: String,
    pub posts: Vec<Post>,
}

impl ForumThread {
    /// Builds a thread, validating it and computing quote `external` flags.
    pub fn new(forum: ForumPath, title: impl Into<String>, posts: Vec<Post>) -> Result<Self, ThreadError> {
        let mut thread = ForumThread {
            forum,
            title: title.into(),
            posts,
        };
        thread.validate(0)?;
        thread.flag_external_quotes();
        Ok(thread)
    }

    fn validate(&self, line: usize) -> Result<(), ThreadError> {
        if self.posts.is_empty() {
            return Err(ThreadError::NoPosts {
                line,
                title: self.title.clone(),
            });
        }
        if let Some(post_index) = self.posts.iter().position(|p| p.body.trim().is_empty()) {
            return Err(ThreadError::EmptyBody {
                line,
                title: self.title.clone(),
                post_index,
            });
        }
        Ok(())
    }

    fn flag_external_quotes(&mut self) {
        let mut seen: HashSet<String> = HashSet::new();
        for post in &mut self.posts {
            if let Some(q) = &mut post.quote {
                q.external = !seen.contains(&q.author);
            }
            seen.insert(post.author.clone());
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireThread {
    forum: Vec<String>,
    title: String,
    posts: Vec<WirePost>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WirePost {
    author: String,
    body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    quote: Option<WireQuote>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireQuote {
    author: String,
    text: String,
}

/// Parses a thread interchange file. Input order is preserved.
pub fn parse_thread_file(bytes: &[u8]) -> Result<Vec<ForumThread>, ThreadError> {
    let text = std::str::from_utf8(bytes).map_err(|e| {
        let line = bytes[..e.valid_up_to()].iter().filter(|&&b| b == b'\n').count() + 1;
        ThreadError::Malformed {
            line,
            message: format!("invalid UTF-8: {e}"),
        }
    })?;

    let mut threads = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let wire: WireThread = serde_json::from_str(raw).map_err(|e| ThreadError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let forum = ForumPath::new(wire.forum).ok_or_else(|| ThreadError::EmptyForum {
            line,
            title: wire.title.clone(),
        })?;
        let posts = wire
            .posts
            .into_iter()
            .map(|p| Post {
                author: p.author,
                body: p.body,
                quote: p.quote.map(|q| Quote {
                    author: q.author,
                    text: q.text,
                    external: false,
                }),
            })
            .collect();
        let mut thread = ForumThread {
            forum,
            title: wire.title,
            posts,
        };
        thread.validate(line)?;
        thread.flag_external_quotes();
        threads.push(thread);
    }
    Ok(threads)
}

/// Serializes threads into the interchange format, one line per thread.
pub fn write_thread_file(threads: &[ForumThread]) -> String {
    let mut out = String::new();
    for t in threads {
        let wire = WireThread {
            forum: t.forum.segments().to_vec(),
            title: t.title.clone(),
            posts: t
                .posts
                .iter()
                .map(|p| WirePost {
                    author: p.author.clone(),
                    body: p.body.clone(),
                    quote: p.quote.as_ref().map(|q| WireQuote {
                        author: q.author.clone(),
                        text: q.text.clone(),
                    }),
                })
                .collect(),
        };
        // serde_json escapes newlines inside strings, so one thread stays on one line
        out.push_str(&serde_json::to_string(&wire).expect("thread serializes"));
        out.push('\n');
    }
    out
}
