//! Answer collection and result aggregation for a blinded study.

mod report;
mod stats;
mod store;

pub use report::{format_percent, plot_data_csv, render_table, ReportOptions};
pub use stats::{compute_results, ItemVerdict, OriginResults, Ratio, ResultsTable, StatsError};
pub use store::{read_answer_log, AnswerError, AnswerLog, AnswerStore, RecordOutcome};

use serde::{Deserialize, Serialize};

/// The two questions, in the order they are shown.
pub const QUESTION_NOT_HUMAN: &str =
    "Do you think this response was generated by a language model, and not written by a human?";
pub const QUESTION_ADDS_INFO: &str =
    "Does the final response contribute to the discussion with new information or perspectives?";

/// One annotator's judgement of one item. A negative answer to the first
/// question counts as humanlike.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationAnswer {
    pub item_id: String,
    pub annotator_id: String,
    pub q1_not_human: bool,
    pub q2_adds_info: bool,
    /// Milliseconds since the Unix epoch; ignored when comparing answers.
    #[serde(default)]
    pub timestamp: u64,
}

impl AnnotationAnswer {
    pub fn same_judgement(&self, other: &AnnotationAnswer) -> bool {
        self.item_id == other.item_id
            && self.annotator_id == other.annotator_id
            && self.q1_not_human == other.q1_not_human
            && self.q2_adds_info == other.q2_adds_info
    }
}
