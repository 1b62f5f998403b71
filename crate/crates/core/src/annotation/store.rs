use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use thiserror::Error;

use super::AnnotationAnswer;
use crate::study::{Study, StudyItem};

#[derive(Debug, Error)]
pub enum AnswerError {
    #[error("unknown item {0}")]
    UnknownItem(String),
    #[error("unknown annotator {0}")]
    UnknownAnnotator(String),
    #[error("item {item_id} is not assigned to annotator {annotator_id}")]
    WrongGroup { item_id: String, annotator_id: String },
    #[error("annotator {annotator_id} already answered item {item_id} differently")]
    Conflict { item_id: String, annotator_id: String },
    #[error("answer log {path}, line {line}: {message}")]
    Corrupt {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    Recorded,
    /// Same judgement already on file.
    Duplicate,
}

struct Inner {
    log: Option<File>,
    answers: Vec<AnnotationAnswer>,
    index: HashMap<(String, String), usize>,
}

/// Append-only answer log for one study. The file is the source of truth;
/// the in-memory index is rebuilt from it on open.
pub struct AnswerStore {
    study: Arc<Study>,
    path: Option<PathBuf>,
    inner: Mutex<Inner>,
}

impl AnswerStore {
    pub fn in_memory(study: Arc<Study>) -> Self {
        AnswerStore {
            study,
            path: None,
            inner: Mutex::new(Inner {
                log: None,
                answers: Vec::new(),
                index: HashMap::new(),
            }),
        }
    }

    /// Opens (or creates) a JSON-lines log and replays it. A truncated last
    /// line, as left by a crash mid-write, is cut off.
    pub fn open(study: Arc<Study>, path: impl AsRef<Path>) -> Result<Self, AnswerError> {
        let path = path.as_ref().to_path_buf();
        let replay = if path.exists() {
            read_answer_log(&path)?
        } else {
            AnswerLog::default()
        };
        let mut file = OpenOptions::new().create(true).append(true).open(&path)?;
        let len = file.metadata()?.len();
        if len > replay.valid_len {
            file.set_len(replay.valid_len)?;
        } else if len < replay.valid_len {
            // last record complete but unterminated
            file.write_all(b"\n")?;
        }
        let index = replay
            .answers
            .iter()
            .enumerate()
            .map(|(i, a)| ((a.item_id.clone(), a.annotator_id.clone()), i))
            .collect();
        Ok(AnswerStore {
            study,
            path: Some(path),
            inner: Mutex::new(Inner {
                log: Some(file),
                answers: replay.answers,
                index,
            }),
        })
    }

    pub fn study(&self) -> &Arc<Study> {
        &self.study
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn authorize(&self, item_id: &str, annotator_id: &str) -> Result<&StudyItem, AnswerError> {
        let item = self
            .study
            .item(item_id)
            .ok_or_else(|| AnswerError::UnknownItem(item_id.to_owned()))?;
        let group = self
            .study
            .group_of(annotator_id)
            .ok_or_else(|| AnswerError::UnknownAnnotator(annotator_id.to_owned()))?;
        if item.group != group {
            return Err(AnswerError::WrongGroup {
                item_id: item_id.to_owned(),
                annotator_id: annotator_id.to_owned(),
            });
        }
        Ok(item)
    }

    /// Records an answer. Resubmitting the same judgement is a no-op;
    /// a different judgement for the same item is rejected.
    pub fn record(&self, answer: AnnotationAnswer) -> Result<RecordOutcome, AnswerError> {
        self.authorize(&answer.item_id, &answer.annotator_id)?;
        let mut inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let key = (answer.item_id.clone(), answer.annotator_id.clone());
        if let Some(&j) = inner.index.get(&key) {
            return if inner.answers[j].same_judgement(&answer) {
                Ok(RecordOutcome::Duplicate)
            } else {
                Err(AnswerError::Conflict {
                    item_id: answer.item_id,
                    annotator_id: answer.annotator_id,
                })
            };
        }
        if let Some(log) = inner.log.as_mut() {
            let mut line = serde_json::to_string(&answer).expect("answer serializes");
            line.push('\n');
            log.write_all(line.as_bytes())?;
            log.sync_data()?;
        }
        let n = inner.answers.len();
        inner.index.insert(key, n);
        inner.answers.push(answer);
        Ok(RecordOutcome::Recorded)
    }

    /// All answers in arrival order.
    pub fn snapshot(&self) -> Vec<AnnotationAnswer> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner()).answers.clone()
    }

    pub fn answer(&self, item_id: &str, annotator_id: &str) -> Option<AnnotationAnswer> {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        let j = *inner.index.get(&(item_id.to_owned(), annotator_id.to_owned()))?;
        Some(inner.answers[j].clone())
    }

    pub fn items_for(&self, annotator_id: &str) -> Result<Vec<&StudyItem>, AnswerError> {
        self.study
            .items_for(annotator_id)
            .ok_or_else(|| AnswerError::UnknownAnnotator(annotator_id.to_owned()))
    }

    /// First item in presentation order the annotator has not answered, with
    /// its 0-based position; `None` once all are done.
    pub fn next_for(&self, annotator_id: &str) -> Result<Option<(usize, &StudyItem)>, AnswerError> {
        let items = self.items_for(annotator_id)?;
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        Ok(items
            .into_iter()
            .enumerate()
            .find(|(_, it)| !inner.index.contains_key(&(it.item_id.clone(), annotator_id.to_owned()))))
    }

    pub fn answered_count(&self, annotator_id: &str) -> usize {
        let inner = self.inner.lock().unwrap_or_else(|p| p.into_inner());
        inner.answers.iter().filter(|a| a.annotator_id == annotator_id).count()
    }
}

/// Replayed contents of an answer log.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AnswerLog {
    /// First answer per (item, annotator), in log order.
    pub answers: Vec<AnnotationAnswer>,
    /// Bytes up to the end of the last complete line.
    pub valid_len: u64,
}

/// Reads a log without modifying it. Later answers for an (item, annotator)
/// pair already seen are dropped; an unparseable final line is treated as
/// torn.
pub fn read_answer_log(path: &Path) -> Result<AnswerLog, AnswerError> {
    let reader = BufReader::new(File::open(path)?);
    let lines: Vec<Vec<u8>> = reader.split(b'\n').collect::<Result<_, _>>()?;
    let mut out = AnswerLog::default();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    let total = lines.len();
    for (i, line) in lines.iter().enumerate() {
        if line.iter().all(u8::is_ascii_whitespace) {
            out.valid_len += line.len() as u64 + 1;
            continue;
        }
        match serde_json::from_slice::<AnnotationAnswer>(line) {
            Ok(a) => {
                out.valid_len += line.len() as u64 + 1;
                match seen.get(&(a.item_id.clone(), a.annotator_id.clone())) {
                    Some(&j) if !out.answers[j].same_judgement(&a) => {
                        log::warn!("answer log line {}: conflicting answer ignored", i + 1);
                    }
                    Some(_) => {}
                    None => {
                        seen.insert((a.item_id.clone(), a.annotator_id.clone()), out.answers.len());
                        out.answers.push(a);
                    }
                }
            }
            Err(e) if i + 1 == total => {
                log::warn!("answer log {}: dropping torn last line: {e}", path.display());
            }
            Err(e) => {
                return Err(AnswerError::Corrupt {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}
