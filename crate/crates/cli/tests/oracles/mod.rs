//! Independent reference implementations used by the acceptance suite.
//! None of these call into the code they check beyond shared data types.

use std::collections::{BTreeMap, HashMap, HashSet};

use forumlm::thread::{ForumPath, ForumThread, Post};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FORUMS: [&str; 12] = [
    "Samhälle",
    "Politik",
    "Kultur & Media",
    "Vetenskap & humaniora",
    "Dator och IT",
    "Sport & träning",
    "Hem, bostad & familj",
    "Droger",
    "Livsstil",
    "Ekonomi",
    "Fordon & trafik",
    "Resor",
];

const SUBFORUMS: [&str; 6] = ["Allmänt", "Nyheter", "Frågor", "Tips och råd", "Diskussion", "Övrigt"];

const WORDS: [&str; 64] = [
    "jag",
    "du",
    "det",
    "är",
    "inte",
    "och",
    "att",
    "som",
    "en",
    "på",
    "med",
    "för",
    "har",
    "kan",
    "men",
    "om",
    "så",
    "vad",
    "tror",
    "väl",
    "bara",
    "mycket",
    "bättre",
    "sämre",
    "dator",
    "bil",
    "resa",
    "pris",
    "fråga",
    "svar",
    "någon",
    "vet",
    "alltid",
    "aldrig",
    "kanske",
    "ganska",
    "helt",
    "rätt",
    "fel",
    "gammal",
    "ny",
    "köpa",
    "sälja",
    "hemma",
    "jobbet",
    "tycker",
    "håller",
    "med",
    "dig",
    "honom",
    "henne",
    "där",
    "här",
    "idag",
    "igår",
    "imorgon",
    "överklockning",
    "kylning",
    "fläkt",
    "semester",
    "flaska",
    "ålder",
    "motor",
    "ekvation",
];

fn sentence(rng: &mut ChaCha8Rng, words: usize) -> String {
    let words: Vec<&str> = (0..words).map(|_| *WORDS.choose(rng).unwrap()).collect();
    let mut first = words[0].chars();
    let head: String = first.next().unwrap().to_uppercase().chain(first).collect();
    let end = *[".", "?", "!", "..", "."].choose(rng).unwrap();
    std::iter::once(head.as_str())
        .chain(words[1..].iter().copied())
        .collect::<Vec<_>>()
        .join(" ")
        + end
}

fn body(rng: &mut ChaCha8Rng, sentences: usize, words: std::ops::Range<usize>) -> String {
    let lines: Vec<String> = (0..sentences)
        .map(|_| {
            let n = rng.gen_range(words.clone());
            sentence(rng, n)
        })
        .collect();
    let mut out = String::new();
    for (i, l) in lines.iter().enumerate() {
        if i > 0 {
            out.push(if rng.gen_bool(0.3) { '\n' } else { ' ' });
        }
        out.push_str(l);
    }
    out
}

fn thread(rng: &mut ChaCha8Rng, forum: &str, posts: usize, long_posts: bool) -> ForumThread {
    let sub = SUBFORUMS.choose(rng).unwrap();
    let n = rng.gen_range(2..7);
    let title = sentence(rng, n).trim_end_matches(['.', '?', '!']).to_owned();
    let users: Vec<String> = (0..rng.gen_range(2..6))
        .map(|_| format!("medlem{}", rng.gen_range(1..500)))
        .collect();
    let mut out: Vec<Post> = Vec::with_capacity(posts);
    for i in 0..posts {
        let author = users[i % users.len()].clone();
        let n = if long_posts && rng.gen_bool(0.08) {
            rng.gen_range(20..90)
        } else {
            rng.gen_range(1..4)
        };
        let mut post = Post::new(author, body(rng, n, 3..14));
        if i > 0 && rng.gen_bool(0.25) {
            let j = rng.gen_range(0..i);
            let quoted = out[j].body.lines().next().unwrap().to_owned();
            post = post.with_quote(out[j].author.clone(), quoted);
        }
        out.push(post);
    }
    let path = ForumPath::new(vec![forum.to_owned(), (*sub).to_owned()]).unwrap();
    ForumThread::new(path, title, out).unwrap()
}

/// Training corpus: threads over all forums, some with very long posts.
pub fn training_threads(n: usize, seed: u64) -> Vec<ForumThread> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let posts = rng.gen_range(2..10);
            thread(&mut rng, FORUMS[i % FORUMS.len()], posts, true)
        })
        .collect()
}

/// Held-out pool: short threads, `per_forum` in every forum.
pub fn pool_threads(per_forum: usize, seed: u64) -> Vec<ForumThread> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for _ in 0..per_forum {
        for f in FORUMS {
            let posts = rng.gen_range(3..5);
            out.push(thread(&mut rng, f, posts, false));
        }
    }
    out
}

/// Random strings over a mix of scripts, including 4-byte characters.
pub fn random_unicode(rng: &mut ChaCha8Rng) -> String {
    const POOL: &[char] = &[
        'a', 'b', 'e', 'r', 's', 't', ' ', '\n', 'å', 'ä', 'ö', 'Å', 'é', 'ß', 'ж', 'ы', 'λ', 'Ω', '中', '文', 'ひ',
        'ら', '😀', '🚀', '\u{0301}', '\u{200d}', '\t', '"', '\\',
    ];
    let len = rng.gen_range(0..40);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.1) {
                char::from_u32(rng.gen_range(0x20..0x2FFFF)).unwrap_or('?')
            } else {
                *POOL.choose(rng).unwrap()
            }
        })
        .collect()
}

/// Brute-force BPE training: recount every adjacent pair from scratch each
/// round, take the most frequent (ties: smallest left bytes, then right),
/// skip pairs seen fewer than twice or spelling an existing token, and
/// merge left to right.
pub fn bpe_merges(corpus: &[&str], target_size: usize) -> Vec<(Vec<u8>, Vec<u8>)> {
    let mut seqs: Vec<Vec<Vec<u8>>> = corpus.iter().map(|d| d.bytes().map(|b| vec![b]).collect()).collect();
    let mut known: HashSet<Vec<u8>> = (0..=255u8).map(|b| vec![b]).collect();
    let mut merges = Vec::new();
    while 257 + merges.len() < target_size {
        let mut counts: HashMap<(Vec<u8>, Vec<u8>), usize> = HashMap::new();
        for s in &seqs {
            for w in s.windows(2) {
                *counts.entry((w[0].clone(), w[1].clone())).or_default() += 1;
            }
        }
        let best = counts
            .into_iter()
            .filter(|((l, r), c)| *c >= 2 && !known.contains(&[l.as_slice(), r.as_slice()].concat()))
            .max_by(|(a, ca), (b, cb)| ca.cmp(cb).then_with(|| b.cmp(a)));
        let Some(((l, r), _)) = best else { break };
        let merged = [l.as_slice(), r.as_slice()].concat();
        for s in &mut seqs {
            let mut out = Vec::with_capacity(s.len());
            let mut i = 0;
            while i < s.len() {
                if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(s[i].clone());
                    i += 1;
                }
            }
            *s = out;
        }
        known.insert(merged);
        merges.push((l, r));
    }
    merges
}

/// Tokenizes by applying each merge in order over the whole sequence.
/// Merge `r` creates id `257 + r`.
pub fn bpe_encode(merges: &[(u32, u32)], text: &str) -> Vec<u32> {
    let mut s: Vec<u32> = text.bytes().map(u32::from).collect();
    for (rank, &(l, r)) in merges.iter().enumerate() {
        let mut out = Vec::with_capacity(s.len());
        let mut i = 0;
        while i < s.len() {
            if i + 1 < s.len() && s[i] == l && s[i + 1] == r {
                out.push(257 + rank as u32);
                i += 2;
            } else {
                out.push(s[i]);
                i += 1;
            }
        }
        s = out;
    }
    s
}

/// Add-alpha n-gram counts kept as plain maps; history is truncated to
/// `order - 1` tokens, and shorter histories at record start stay short.
pub struct NGramOracle {
    order: usize,
    alpha: f64,
    vocab: usize,
    counts: HashMap<Vec<u32>, HashMap<u32, f64>>,
}

impl NGramOracle {
    pub fn new(records: &[Vec<u32>], vocab: usize, order: usize, alpha: f64) -> Self {
        let mut counts: HashMap<Vec<u32>, HashMap<u32, f64>> = HashMap::new();
        for r in records {
            for i in 0..r.len() {
                let ctx = r[i.saturating_sub(order - 1)..i].to_vec();
                *counts.entry(ctx).or_default().entry(r[i]).or_default() += 1.0;
            }
        }
        NGramOracle {
            order,
            alpha,
            vocab,
            counts,
        }
    }

    pub fn prob(&self, history: &[u32], token: u32) -> f64 {
        let ctx = &history[history.len().saturating_sub(self.order - 1)..];
        match self.counts.get(ctx) {
            None => 1.0 / self.vocab as f64,
            Some(next) => {
                let total: f64 = next.values().sum();
                (next.get(&token).copied().unwrap_or(0.0) + self.alpha) / (total + self.alpha * self.vocab as f64)
            }
        }
    }
}

/// Per-item vote tally used by the statistics oracle.
#[derive(Clone, Copy)]
pub struct Votes {
    pub model: bool,
    /// Bit i set: annotator i answered "not human".
    pub q1: u8,
    /// Bit i set: annotator i answered "adds information".
    pub q2: u8,
}

#[derive(Debug, Default, PartialEq, Eq, Clone)]
pub struct Expected {
    pub items: u32,
    pub humanlike_majority: u32,
    pub humanlike_unanimous: u32,
    pub informative_majority: u32,
    pub informative_unanimous: u32,
    pub both: u32,
    pub per_stratum: BTreeMap<String, (u32, u32)>,
}

/// Enumerates majorities and unanimity directly from vote bits, three
/// annotators per item.
pub fn tally(items: &[Votes], stratum: impl Fn(usize) -> String) -> (Expected, Expected) {
    let mut model = Expected::default();
    let mut human = Expected::default();
    for (i, v) in items.iter().enumerate() {
        let humanlike = 3 - v.q1.count_ones();
        let informative = v.q2.count_ones();
        let e = if v.model { &mut model } else { &mut human };
        e.items += 1;
        let hm = humanlike >= 2;
        let im = informative >= 2;
        e.humanlike_majority += hm as u32;
        e.humanlike_unanimous += (humanlike == 3) as u32;
        e.informative_majority += im as u32;
        e.informative_unanimous += (informative == 3) as u32;
        e.both += (hm && im) as u32;
        let s = e.per_stratum.entry(stratum(i)).or_default();
        s.0 += hm as u32;
        s.1 += 1;
    }
    (model, human)
}

/// Percent rounded half up, computed in floating point as a cross-check.
pub fn percent(count: u32, total: u32) -> u32 {
    if total == 0 {
        0
    } else {
        (100.0 * count as f64 / total as f64 + 0.5).floor() as u32
    }
}
