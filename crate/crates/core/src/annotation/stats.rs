use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::AnnotationAnswer;
use crate::study::{Origin, Study};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("{} items lack a full set of answers (first: {})", .0.len(), .0[0])]
    Incomplete(Vec<String>),
    #[error("answer refers to unknown item {0}")]
    UnknownItem(String),
    #[error("item {0} has no provenance entry")]
    MissingProvenance(String),
}

/// `count` out of `total`, kept exact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ratio {
    pub count: u32,
    pub total: u32,
}

impl Ratio {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            f64::from(self.count) / f64::from(self.total)
        }
    }

    /// Whole percent, halves rounded up.
    pub fn percent(&self) -> u32 {
        if self.total == 0 {
            return 0;
        }
        let (c, t) = (u64::from(self.count), u64::from(self.total));
        ((200 * c + t) / (2 * t)) as u32
    }

    fn add(&mut self, hit: bool) {
        self.total += 1;
        self.count += u32::from(hit);
    }
}

/// Vote tallies for one fully (or partially) answered item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemVerdict {
    pub item_id: String,
    pub origin: Origin,
    pub stratum: String,
    pub annotators: u32,
    pub humanlike_votes: u32,
    pub informative_votes: u32,
}

impl ItemVerdict {
    pub fn humanlike_majority(&self) -> bool {
        2 * self.humanlike_votes > self.annotators
    }

    pub fn humanlike_unanimous(&self) -> bool {
        self.humanlike_votes == self.annotators
    }

    pub fn informative_majority(&self) -> bool {
        2 * self.informative_votes > self.annotators
    }

    pub fn informative_unanimous(&self) -> bool {
        self.informative_votes == self.annotators
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OriginResults {
    pub items: u32,
    pub humanlike_majority: Ratio,
    pub humanlike_unanimous: Ratio,
    /// All annotators gave the same answer, either way.
    pub humanlike_agreement: Ratio,
    pub informative_majority: Ratio,
    pub informative_unanimous: Ratio,
    pub informative_agreement: Ratio,
    pub humanlike_and_informative: Ratio,
    /// Majority-humanlike share per top-level forum.
    pub per_stratum: BTreeMap<String, Ratio>,
}

impl OriginResults {
    fn add(&mut self, v: &ItemVerdict) {
        self.items += 1;
        let h_all_same = v.humanlike_votes == 0 || v.humanlike_unanimous();
        let i_all_same = v.informative_votes == 0 || v.informative_unanimous();
        self.humanlike_majority.add(v.humanlike_majority());
        self.humanlike_unanimous.add(v.humanlike_unanimous());
        self.humanlike_agreement.add(h_all_same);
        self.informative_majority.add(v.informative_majority());
        self.informative_unanimous.add(v.informative_unanimous());
        self.informative_agreement.add(i_all_same);
        self.humanlike_and_informative
            .add(v.humanlike_majority() && v.informative_majority());
        self.per_stratum
            .entry(v.stratum.clone())
            .or_default()
            .add(v.humanlike_majority());
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub model: OriginResults,
    pub human: OriginResults,
    /// Items left out because not every annotator answered.
    pub incomplete_items: Vec<String>,
}

impl ResultsTable {
    pub fn origin(&self, origin: Origin) -> &OriginResults {
        match origin {
            Origin::Model => &self.model,
            Origin::Human => &self.human,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.incomplete_items.is_empty()
    }
}

/// Tallies answers per item and aggregates by origin. With `strict`, any
/// item lacking an answer from every annotator of its group is an error;
/// otherwise such items are skipped and listed.
pub fn compute_results(study: &Study, answers: &[AnnotationAnswer], strict: bool) -> Result<ResultsTable, StatsError> {
    let mut by_item: HashMap<&str, HashMap<&str, &AnnotationAnswer>> = HashMap::new();
    for a in answers {
        let item = study
            .item(&a.item_id)
            .ok_or_else(|| StatsError::UnknownItem(a.item_id.clone()))?;
        let roster = &study.file.groups[item.group].annotators;
        if !roster.contains(&a.annotator_id) {
            log::warn!(
                "ignoring answer by {} outside the roster of item {}",
                a.annotator_id,
                a.item_id
            );
            continue;
        }
        by_item
            .entry(item.item_id.as_str())
            .or_default()
            .entry(&a.annotator_id)
            .or_insert(a);
    }

    let mut table = ResultsTable {
        model: OriginResults::default(),
        human: OriginResults::default(),
        incomplete_items: Vec::new(),
    };
    for item in study.items() {
        let entry = study
            .ledger
            .entry(&item.item_id)
            .ok_or_else(|| StatsError::MissingProvenance(item.item_id.clone()))?;
        let n = study.file.groups[item.group].annotators.len() as u32;
        let votes = by_item.get(item.item_id.as_str());
        if votes.map_or(0, |v| v.len()) as u32 != n {
            table.incomplete_items.push(item.item_id.clone());
            continue;
        }
        let votes = votes.expect("checked above");
        let verdict = ItemVerdict {
            item_id: item.item_id.clone(),
            origin: entry.origin,
            stratum: entry.stratum.clone(),
            annotators: n,
            humanlike_votes: votes.values().filter(|a| !a.q1_not_human).count() as u32,
            informative_votes: votes.values().filter(|a| a.q2_adds_info).count() as u32,
        };
        match entry.origin {
            Origin::Model => table.model.add(&verdict),
            Origin::Human => table.human.add(&verdict),
        }
    }
    if strict && !table.incomplete_items.is_empty() {
        return Err(StatsError::Incomplete(table.incomplete_items));
    }
    Ok(table)
}
