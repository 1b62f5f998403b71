//! Blinded evaluation study construction.
//!
//! Threads are drawn in equal numbers from each top-level forum among those
//! that qualify: the final (quote-stripped) response is short, the rendered
//! context fits the token limit, and there are enough posts. For every
//! selected thread the study holds two items: the original final response
//! and a generated replacement. Which item is which lives only in the
//! provenance ledger; the annotator-facing study file carries no origin.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bpe::Vocabulary;
use crate::decode::{generate, DecodeConfig, DecodeError};
use crate::exec::{mix_seed, stable_hash, Execution};
use crate::format::{render_header, render_post, strip_quotes, AnonymizationMap};
use crate::lm::LanguageModel;
use crate::thread::{ForumThread, Post};

pub const STUDY_FORMAT: &str = "forumlm-study v1";
pub const PROVENANCE_FORMAT: &str = "forumlm-provenance v1";

#[derive(Debug, Error)]
pub enum StudyError {
    #[error("invalid study configuration: {0}")]
    InvalidConfig(String),
    #[error("stratum {stratum:?} has {qualifiers} qualifying threads, {needed} needed")]
    Understocked {
        stratum: String,
        qualifiers: usize,
        needed: usize,
    },
    #[error("pool has top-level forums {found:?} but {expected} strata are configured; list them explicitly")]
    StrataMismatch { expected: usize, found: Vec<String> },
    #[error("generation failed for every candidate thread in stratum {stratum:?}")]
    ReservesExhausted { stratum: String },
    #[error("study and provenance ledger disagree: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// How item pairs are spread over annotator groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupAssignment {
    /// Each thread goes to one group with both its items; groups share no
    /// thread.
    #[default]
    ThreadDisjoint,
    /// Every group sees each thread at most once; a thread's two items go to
    /// different groups.
    Crossed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub num_threads: usize,
    pub num_strata: usize,
    /// Top-level forums to stratify over; defaults to those in the pool.
    pub strata: Option<Vec<String>>,
    pub groups: usize,
    pub annotators_per_group: usize,
    /// Annotator ids per group; defaults to `g<G>-a<A>`.
    pub annotators: Option<Vec<Vec<String>>>,
    pub max_response_chars: usize,
    pub max_context_tokens: usize,
    pub min_context_posts: usize,
    pub max_context_posts: usize,
    pub reserves_per_stratum: usize,
    pub assignment: GroupAssignment,
    pub rng_seed: u64,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            num_threads: 120,
            num_strata: 12,
            strata: None,
            groups: 2,
            annotators_per_group: 3,
            annotators: None,
            max_response_chars: 200,
            max_context_tokens: 350,
            min_context_posts: 2,
            max_context_posts: 3,
            reserves_per_stratum: 2,
            assignment: GroupAssignment::ThreadDisjoint,
            rng_seed: 0,
        }
    }
}

impl StudyConfig {
    pub fn validate(&self) -> Result<(), StudyError> {
        let bad = |m: &str| Err(StudyError::InvalidConfig(m.to_owned()));
        if self.num_threads == 0 || self.num_strata == 0 || self.groups == 0 {
            return bad("num_threads, num_strata and groups must be positive");
        }
        if !self.num_threads.is_multiple_of(self.num_strata) {
            return bad("num_threads must be divisible by num_strata");
        }
        if !self.num_threads.is_multiple_of(self.groups) {
            return bad("num_threads must be divisible by groups");
        }
        if self.annotators_per_group == 0 || self.annotators_per_group.is_multiple_of(2) {
            return bad("annotators_per_group must be odd so every item has a strict majority");
        }
        if self.min_context_posts == 0 || self.min_context_posts > self.max_context_posts {
            return bad("context post range must satisfy 1 <= min <= max");
        }
        if self.assignment == GroupAssignment::Crossed && self.groups < 2 {
            return bad("crossed assignment needs at least two groups");
        }
        if let Some(strata) = &self.strata {
            if strata.len() != self.num_strata {
                return bad("explicit strata list must have num_strata entries");
            }
        }
        if let Some(a) = &self.annotators {
            if a.len() != self.groups || a.iter().any(|g| g.len() != self.annotators_per_group) {
                return bad("annotator roster must have groups x annotators_per_group ids");
            }
            let mut seen = HashSet::new();
            if !a.iter().flatten().all(|id| seen.insert(id)) {
                return bad("annotator ids must be unique");
            }
        }
        Ok(())
    }

    pub fn threads_per_stratum(&self) -> usize {
        self.num_threads / self.num_strata
    }

    pub fn roster(&self) -> Vec<Vec<String>> {
        self.annotators.clone().unwrap_or_else(|| {
            (1..=self.groups)
                .map(|g| (1..=self.annotators_per_group).map(|a| format!("g{g}-a{a}")).collect())
                .collect()
        })
    }
}

/// Why a thread cannot be used.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Disqualified {
    TooFewPosts { posts: usize },
    ResponseTooLong { chars: usize },
    ContextTooLong { tokens: usize },
}

/// Header plus the first `posts` rendered posts, and the placeholder map
/// after them.
pub fn render_context(thread: &ForumThread, posts: usize) -> (String, AnonymizationMap) {
    let mut map = AnonymizationMap::new();
    let rendered: Vec<String> = thread.posts[..posts].iter().map(|p| render_post(p, &mut map)).collect();
    (render_header(thread) + &rendered.join("\n\n"), map)
}

/// Tries each allowed context length, shortest first; returns the first
/// that qualifies. Characters are Unicode scalar values of the
/// quote-stripped body.
pub fn qualify(thread: &ForumThread, vocab: &Vocabulary, cfg: &StudyConfig) -> Result<usize, Disqualified> {
    let mut first_failure = None;
    for c in cfg.min_context_posts..=cfg.max_context_posts {
        let failure = if thread.posts.len() < c + 1 {
            Disqualified::TooFewPosts {
                posts: thread.posts.len(),
            }
        } else {
            let chars = strip_quotes(&thread.posts[c]).body.chars().count();
            let tokens = vocab.count_tokens(&render_context(thread, c).0);
            if chars > cfg.max_response_chars {
                Disqualified::ResponseTooLong { chars }
            } else if tokens > cfg.max_context_tokens {
                Disqualified::ContextTooLong { tokens }
            } else {
                return Ok(c);
            }
        };
        first_failure.get_or_insert(failure);
    }
    Err(first_failure.expect("non-empty range"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedThread {
    pub source_index: usize,
    pub stratum: String,
    pub context_posts: usize,
    pub thread: ForumThread,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Strata in configured order, threads within a stratum in draw order.
    pub selected: Vec<SelectedThread>,
    pub reserves: BTreeMap<String, Vec<SelectedThread>>,
    pub strata: Vec<String>,
}

/// Draws `num_threads / num_strata` qualifying threads per stratum, plus
/// reserves, uniformly by seed.
pub fn select_threads(
    pool: &[ForumThread],
    vocab: &Vocabulary,
    cfg: &StudyConfig,
    exec: Execution,
) -> Result<Selection, StudyError> {
    cfg.validate()?;
    let strata: Vec<String> = match &cfg.strata {
        Some(s) => s.clone(),
        None => {
            let mut found: Vec<String> = Vec::new();
            for t in pool {
                let top = t.forum.top_level();
                if !found.iter().any(|f| f == top) {
                    found.push(top.to_owned());
                }
            }
            if found.len() != cfg.num_strata {
                found.sort();
                return Err(StudyError::StrataMismatch {
                    expected: cfg.num_strata,
                    found,
                });
            }
            found
        }
    };

    let verdicts = exec.map(pool, |t| qualify(t, vocab, cfg));
    let mut by_stratum: BTreeMap<&str, Vec<(usize, usize)>> = BTreeMap::new();
    for (i, (t, v)) in pool.iter().zip(&verdicts).enumerate() {
        if let Ok(c) = v {
            by_stratum.entry(t.forum.top_level()).or_default().push((i, *c));
        }
    }

    let per = cfg.threads_per_stratum();
    let mut selection = Selection {
        selected: Vec::new(),
        reserves: BTreeMap::new(),
        strata: strata.clone(),
    };
    for stratum in &strata {
        let mut qualifiers = by_stratum.remove(stratum.as_str()).unwrap_or_default();
        if qualifiers.len() < per {
            return Err(StudyError::Understocked {
                stratum: stratum.clone(),
                qualifiers: qualifiers.len(),
                needed: per,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, stable_hash(stratum.as_bytes())));
        qualifiers.shuffle(&mut rng);
        let take = |&(i, c): &(usize, usize)| SelectedThread {
            source_index: i,
            stratum: stratum.clone(),
            context_posts: c,
            thread: pool[i].clone(),
        };
        selection.selected.extend(qualifiers[..per].iter().map(take));
        let reserve_end = (per + cfg.reserves_per_stratum).min(qualifiers.len());
        selection
            .reserves
            .insert(stratum.clone(), qualifiers[per..reserve_end].iter().map(take).collect());
    }
    Ok(selection)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Human,
    Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemQuote {
    pub author: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextPost {
    pub author: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quote: Option<ItemQuote>,
    pub body: String,
}

/// An annotator-facing study item. Carries no origin.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StudyItem {
    pub item_id: String,
    pub group: usize,
    pub forum: Vec<String>,
    pub title: String,
    pub context: Vec<ContextPost>,
    /// The context as it appears in a training record.
    pub thread_context: String,
    pub response_author: String,
    pub final_response: String,
}

impl StudyItem {
    pub fn stratum(&self) -> &str {
        self.forum.first().map(String::as_str).unwrap_or_default()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupRoster {
    pub annotators: Vec<String>,
    /// Presentation order.
    pub items: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub item_id: String,
    pub origin: Origin,
    pub stratum: String,
    pub source_thread: usize,
    pub context_posts: usize,
    pub group: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_log_prob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Replacement {
    pub stratum: String,
    pub failed_thread: usize,
    pub replacement_thread: usize,
    pub reason: String,
}

/// Server-side record of where every item came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceLedger {
    pub format: String,
    pub study_id: String,
    pub entries: Vec<ProvenanceEntry>,
    pub replacements: Vec<Replacement>,
}

impl ProvenanceLedger {
    pub fn entry(&self, item_id: &str) -> Option<&ProvenanceEntry> {
        self.entries.iter().find(|e| e.item_id == item_id)
    }
}

/// Annotator-facing study document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyFile {
    pub format: String,
    pub study_id: String,
    pub config: StudyConfig,
    pub decode: DecodeConfig,
    pub groups: Vec<GroupRoster>,
    pub items: Vec<StudyItem>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub file: StudyFile,
    pub ledger: ProvenanceLedger,
}

impl Study {
    pub fn id(&self) -> &str {
        &self.file.study_id
    }

    pub fn config(&self) -> &StudyConfig {
        &self.file.config
    }

    pub fn items(&self) -> &[StudyItem] {
        &self.file.items
    }

    pub fn item(&self, item_id: &str) -> Option<&StudyItem> {
        self.file.items.iter().find(|i| i.item_id == item_id)
    }

    pub fn origin(&self, item_id: &str) -> Option<Origin> {
        self.ledger.entry(item_id).map(|e| e.origin)
    }

    /// Group index of an annotator.
    pub fn group_of(&self, annotator: &str) -> Option<usize> {
        self.file
            .groups
            .iter()
            .position(|g| g.annotators.iter().any(|a| a == annotator))
    }

    /// Items in the annotator's presentation order.
    pub fn items_for(&self, annotator: &str) -> Option<Vec<&StudyItem>> {
        let g = self.group_of(annotator)?;
        Some(
            self.file.groups[g]
                .items
                .iter()
                .filter_map(|id| self.item(id))
                .collect(),
        )
    }

    pub fn study_json(&self) -> String {
        serde_json::to_string_pretty(&self.file).expect("study serializes") + "\n"
    }

    pub fn ledger_json(&self) -> String {
        serde_json::to_string_pretty(&self.ledger).expect("ledger serializes") + "\n"
    }

    pub fn from_json(study: &str, ledger: &str) -> Result<Self, StudyError> {
        let file: StudyFile = serde_json::from_str(study)?;
        let ledger: ProvenanceLedger = serde_json::from_str(ledger)?;
        let inconsistent = |m: String| Err(StudyError::Inconsistent(m));
        if file.format != STUDY_FORMAT || ledger.format != PROVENANCE_FORMAT {
            return inconsistent("unsupported file format".into());
        }
        if file.study_id != ledger.study_id {
            return inconsistent(format!("study id {} vs ledger {}", file.study_id, ledger.study_id));
        }
        let ids: HashSet<&str> = file.items.iter().map(|i| i.item_id.as_str()).collect();
        let ledger_ids: HashSet<&str> = ledger.entries.iter().map(|e| e.item_id.as_str()).collect();
        if ids != ledger_ids || ids.len() != file.items.len() {
            return inconsistent("item ids differ or repeat".into());
        }
        for item in &file.items {
            if item.group >= file.groups.len() || !file.groups[item.group].items.contains(&item.item_id) {
                return inconsistent(format!("item {} not listed in its group", item.item_id));
            }
        }
        Ok(Study { file, ledger })
    }
}

struct Pair {
    selected: SelectedThread,
    human: String,
    model: String,
    model_log_prob: f64,
    response_author: String,
    context: Vec<ContextPost>,
    thread_context: String,
}

fn context_posts(thread: &ForumThread, posts: usize) -> Vec<ContextPost> {
    let mut map = AnonymizationMap::new();
    thread.posts[..posts]
        .iter()
        .map(|p| {
            let author = map.label(&p.author);
            let quote = p.quote.as_ref().map(|q| ItemQuote {
                author: map.label(&q.author),
                text: q.text.clone(),
            });
            ContextPost {
                author,
                quote,
                body: p.body.clone(),
            }
        })
        .collect()
}

/// Context text plus the next post's header line, ready for generation.
pub fn generation_prompt(thread: &ForumThread, context_posts: usize) -> (String, String) {
    let (text, mut map) = render_context(thread, context_posts);
    let author = map.label(&thread.posts[context_posts].author);
    (format!("{text}\n\n{author}:\n"), author)
}

fn make_pair<M: LanguageModel + ?Sized>(
    sel: &SelectedThread,
    model: &M,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Pair, String> {
    let c = sel.context_posts;
    let (prompt, response_author) = generation_prompt(&sel.thread, c);
    let cfg = DecodeConfig {
        rng_seed: mix_seed(decode.rng_seed, sel.source_index as u64),
        ..decode.clone()
    };
    let generated = generate(model, vocab, &vocab.encode(&prompt), &cfg).map_err(|e: DecodeError| e.to_string())?;
    if generated.text.trim().is_empty() {
        return Err("empty generated response".into());
    }
    let human: Post = strip_quotes(&sel.thread.posts[c]);
    Ok(Pair {
        selected: sel.clone(),
        human: human.body,
        model: generated.text,
        model_log_prob: generated.joint_log_prob,
        response_author,
        context: context_posts(&sel.thread, c),
        thread_context: render_context(&sel.thread, c).0,
    })
}

/// Builds the study: one human and one generated item per selected thread,
/// groups assigned, presentation order shuffled. Generation runs per thread
/// under `exec`; a thread whose generation fails is replaced by the next
/// reserve of its stratum.
pub fn build_study<M: LanguageModel + ?Sized>(
    selection: &Selection,
    model: &M,
    vocab: &Vocabulary,
    decode: &DecodeConfig,
    cfg: &StudyConfig,
    exec: Execution,
) -> Result<Study, StudyError> {
    cfg.validate()?;
    if selection.selected.len() != cfg.num_threads {
        return Err(StudyError::InvalidConfig(format!(
            "selection has {} threads, config expects {}",
            selection.selected.len(),
            cfg.num_threads
        )));
    }
    let mut decode = decode.clone();
    decode.ban_quotes(vocab);

    let attempts = exec.map(&selection.selected, |s| make_pair(s, model, vocab, &decode));
    let mut reserves: BTreeMap<&str, std::slice::Iter<'_, SelectedThread>> =
        selection.reserves.iter().map(|(k, v)| (k.as_str(), v.iter())).collect();
    let mut replacements = Vec::new();
    let mut pairs = Vec::with_capacity(attempts.len());
    for (sel, attempt) in selection.selected.iter().zip(attempts) {
        let mut result = attempt;
        let mut failed = sel.source_index;
        while let Err(reason) = result {
            let next = reserves
                .get_mut(sel.stratum.as_str())
                .and_then(Iterator::next)
                .ok_or_else(|| StudyError::ReservesExhausted {
                    stratum: sel.stratum.clone(),
                })?;
            log::warn!(
                "study: thread {failed} in {:?} replaced by reserve {}: {reason}",
                sel.stratum,
                next.source_index
            );
            replacements.push(Replacement {
                stratum: sel.stratum.clone(),
                failed_thread: failed,
                replacement_thread: next.source_index,
                reason,
            });
            failed = next.source_index;
            result = make_pair(next, model, vocab, &decode);
        }
        pairs.push(result.expect("loop exits on success"));
    }

    let mut id_rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, 0x1D5));
    let mut used_ids = HashSet::new();
    let mut fresh_id = || loop {
        let id = format!("{:016x}", id_rng.gen::<u64>());
        if used_ids.insert(id.clone()) {
            return id;
        }
    };

    let g = cfg.groups;
    let roster = cfg.roster();
    let mut groups: Vec<GroupRoster> = roster
        .into_iter()
        .map(|annotators| GroupRoster {
            annotators,
            items: Vec::new(),
        })
        .collect();
    let mut items = Vec::with_capacity(2 * pairs.len());
    let mut entries = Vec::with_capacity(2 * pairs.len());
    for (k, pair) in pairs.iter().enumerate() {
        let (human_group, model_group) = match cfg.assignment {
            GroupAssignment::ThreadDisjoint => (k % g, k % g),
            GroupAssignment::Crossed => ((k + 1) % g, k % g),
        };
        for (origin, group, response) in [
            (Origin::Human, human_group, &pair.human),
            (Origin::Model, model_group, &pair.model),
        ] {
            let item_id = fresh_id();
            items.push(StudyItem {
                item_id: item_id.clone(),
                group,
                forum: pair.selected.thread.forum.segments().to_vec(),
                title: pair.selected.thread.title.clone(),
                context: pair.context.clone(),
                thread_context: pair.thread_context.clone(),
                response_author: pair.response_author.clone(),
                final_response: response.clone(),
            });
            entries.push(ProvenanceEntry {
                item_id: item_id.clone(),
                origin,
                stratum: pair.selected.stratum.clone(),
                source_thread: pair.selected.source_index,
                context_posts: pair.selected.context_posts,
                group,
                joint_log_prob: (origin == Origin::Model).then_some(pair.model_log_prob),
            });
            groups[group].items.push(item_id);
        }
    }
    for (gi, group) in groups.iter_mut().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, 0x6000 + gi as u64));
        group.items.shuffle(&mut rng);
    }
    // canonical item order: by group, then presentation order
    let position: BTreeMap<&str, (usize, usize)> = groups
        .iter()
        .enumerate()
        .flat_map(|(gi, gr)| gr.items.iter().enumerate().map(move |(p, id)| (id.as_str(), (gi, p))))
        .collect();
    items.sort_by_key(|i| position[i.item_id.as_str()]);
    entries.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let fingerprint = items
        .iter()
        .fold(cfg.rng_seed, |h, i| mix_seed(h, stable_hash(i.item_id.as_bytes())));
    let study_id = format!("study-{fingerprint:016x}");
    Ok(Study {
        file: StudyFile {
            format: STUDY_FORMAT.into(),
            study_id: study_id.clone(),
            config: cfg.clone(),
            decode,
            groups,
            items,
        },
        ledger: ProvenanceLedger {
            format: PROVENANCE_FORMAT.into(),
            study_id,
            entries,
            replacements,
        },
    })
}
