//! Data model, corpus ingestion and tokenization for both tasks.
//!
//! A corpus file is UTF-8 JSON Lines, one process per line:
//!
//! ```text
//! {"id": "r1", "task": "recipes",
//!  "steps": [{"text": "Melt the butter.", "tokens": ["melt", "the", "butter", "."], "pos": ["V", "DT", "N", "."]}],
//!  "entities": [{"name": "butter", "labels": [1], "combined": [0]}]}
//! ```
//!
//! Recipes labels are `0`/`1`; ProPara labels are one of `"O"`, `"C"`,
//! `"E"`, `"M"`, `"D"`. Combined flags are only allowed on Recipes records.

mod tokenize;
mod vocab;

use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::crf::{expand_gold, SurfaceTag};
use crate::error::{Error, Result};

pub use tokenize::tokenize;
pub use vocab::{
    build_vocab, vocab_from_tokens, Vocabulary, CLS, CLS_ID, PAD, PAD_ID, SEP, SEP_ID, SPECIALS,
    START, START_ID, UNK, UNK_ID,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Recipes,
    #[serde(rename = "propara")]
    ProPara,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::Recipes => "recipes",
            TaskKind::ProPara => "propara",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "recipes" => Ok(TaskKind::Recipes),
            "propara" => Ok(TaskKind::ProPara),
            other => Err(Error::Validation(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub text: String,
    pub tokens: Vec<String>,
    pub pos: Option<Vec<String>>,
}

impl Step {
    pub fn from_text(text: &str) -> Self {
        Self {
            text: text.to_string(),
            tokens: tokenize(text),
            pos: None,
        }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self {
            text: tokens.join(" "),
            tokens,
            pos: None,
        }
    }

    pub fn with_pos(mut self, pos: Vec<String>) -> Self {
        self.pos = Some(pos);
        self
    }
}

/// Per-step gold labels of a tracked entity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Labels {
    Presence(Vec<bool>),
    Tags(Vec<SurfaceTag>),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Presence(v) => v.len(),
            Labels::Tags(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn presence(&self) -> Option<&[bool]> {
        match self {
            Labels::Presence(v) => Some(v),
            Labels::Tags(_) => None,
        }
    }

    pub fn tags(&self) -> Option<&[SurfaceTag]> {
        match self {
            Labels::Tags(v) => Some(v),
            Labels::Presence(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntityTrack {
    pub name: String,
    pub name_tokens: Vec<String>,
    pub labels: Labels,
    pub combined: Option<Vec<bool>>,
}

impl EntityTrack {
    pub fn new(name: &str, labels: Labels, combined: Option<Vec<bool>>) -> Self {
        Self {
            name: name.to_string(),
            name_tokens: tokenize(name),
            labels,
            combined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Process {
    pub id: String,
    pub task: TaskKind,
    pub steps: Vec<Step>,
    pub entities: Vec<EntityTrack>,
}

impl Process {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Checks every structural and lifecycle invariant of a process.
    pub fn validate(&self) -> Result<()> {
        let invalid = |entity: &str, message: String| Error::InvalidProcess {
            process: self.id.clone(),
            entity: entity.to_string(),
            message,
        };
        if self.steps.is_empty() {
            return Err(invalid("-", "process has no steps".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.tokens.is_empty() {
                return Err(invalid("-", format!("step {} has no tokens", i + 1)));
            }
            if let Some(pos) = &step.pos {
                if pos.len() != step.tokens.len() {
                    return Err(invalid(
                        "-",
                        format!(
                            "step {} has {} tokens but {} pos tags",
                            i + 1,
                            step.tokens.len(),
                            pos.len()
                        ),
                    ));
                }
            }
        }
        let t = self.steps.len();
        for entity in &self.entities {
            if entity.name_tokens.is_empty() {
                return Err(invalid(&entity.name, "entity name has no tokens".into()));
            }
            if entity.labels.len() != t {
                return Err(invalid(
                    &entity.name,
                    format!("{} labels for {} steps", entity.labels.len(), t),
                ));
            }
            match (&entity.labels, self.task) {
                (Labels::Presence(_), TaskKind::Recipes) => {}
                (Labels::Tags(tags), TaskKind::ProPara) => {
                    expand_gold(tags).map_err(|e| invalid(&entity.name, e.to_string()))?;
                }
                _ => {
                    return Err(invalid(
                        &entity.name,
                        format!("label kind does not match task {}", self.task),
                    ))
                }
            }
            match (&entity.combined, self.task) {
                (Some(c), TaskKind::Recipes) if c.len() != t => {
                    return Err(invalid(
                        &entity.name,
                        format!("{} combined flags for {} steps", c.len(), t),
                    ))
                }
                (Some(_), TaskKind::ProPara) => {
                    return Err(invalid(
                        &entity.name,
                        "combined flags are only defined for recipes".into(),
                    ))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawStep {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pos: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct RawEntity {
    name: String,
    labels: Vec<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    combined: Option<Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    id: String,
    task: TaskKind,
    steps: Vec<RawStep>,
    entities: Vec<RawEntity>,
}

fn parse_label_presence(v: &Value) -> std::result::Result<bool, String> {
    match v.as_u64() {
        Some(0) => Ok(false),
        Some(1) => Ok(true),
        _ => Err(format!("recipes label must be 0 or 1, got {v}")),
    }
}

fn parse_label_tag(v: &Value) -> std::result::Result<SurfaceTag, String> {
    v.as_str()
        .and_then(SurfaceTag::parse)
        .ok_or_else(|| format!("propara label must be one of O, C, E, M, D, got {v}"))
}

impl RawRecord {
    fn into_process(self) -> std::result::Result<Process, String> {
        let steps = self
            .steps
            .into_iter()
            .map(|s| Step {
                tokens: s.tokens.unwrap_or_else(|| tokenize(&s.text)),
                text: s.text,
                pos: s.pos,
            })
            .collect();
        let mut entities = Vec::with_capacity(self.entities.len());
        for e in self.entities {
            let labels = match self.task {
                TaskKind::Recipes => Labels::Presence(
                    e.labels
                        .iter()
                        .map(parse_label_presence)
                        .collect::<std::result::Result<_, _>>()?,
                ),
                TaskKind::ProPara => Labels::Tags(
                    e.labels
                        .iter()
                        .map(parse_label_tag)
                        .collect::<std::result::Result<_, _>>()?,
                ),
            };
            let combined = match e.combined {
                None => None,
                Some(flags) => Some(
                    flags
                        .into_iter()
                        .map(|f| match f {
                            0 => Ok(false),
                            1 => Ok(true),
                            other => Err(format!("combined flag must be 0 or 1, got {other}")),
                        })
                        .collect::<std::result::Result<_, _>>()?,
                ),
            };
            entities.push(EntityTrack {
                name_tokens: tokenize(&e.name),
                name: e.name,
                labels,
                combined,
            });
        }
        Ok(Process {
            id: self.id,
            task: self.task,
            steps,
            entities,
        })
    }

    fn from_process(p: &Process) -> Self {
        RawRecord {
            id: p.id.clone(),
            task: p.task,
            steps: p
                .steps
                .iter()
                .map(|s| RawStep {
                    text: s.text.clone(),
                    tokens: Some(s.tokens.clone()),
                    pos: s.pos.clone(),
                })
                .collect(),
            entities: p
                .entities
                .iter()
                .map(|e| RawEntity {
                    name: e.name.clone(),
                    labels: match &e.labels {
                        Labels::Presence(v) => {
                            v.iter().map(|&b| Value::from(u8::from(b))).collect()
                        }
                        Labels::Tags(v) => v.iter().map(|t| Value::from(t.as_str())).collect(),
                    },
                    combined: e
                        .combined
                        .as_ref()
                        .map(|c| c.iter().map(|&b| u8::from(b)).collect()),
                })
                .collect(),
        }
    }
}

/// Parses one JSON record.
pub fn parse_record(line: &str) -> std::result::Result<Process, String> {
    let raw: RawRecord = serde_json::from_str(line).map_err(|e| e.to_string())?;
    raw.into_process()
}

/// Serializes one process as a single-line JSON record.
pub fn record_to_json(p: &Process) -> String {
    serde_json::to_string(&RawRecord::from_process(p)).expect("corpus records always serialize")
}

/// Loads and validates a JSON Lines corpus of the given task.
pub fn load_corpus(path: &Path, task: TaskKind) -> Result<Vec<Process>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut processes = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let process = parse_record(&line).map_err(parse_err)?;
        if process.task != task {
            return Err(parse_err(format!(
                "record task {} does not match requested task {}",
                process.task, task
            )));
        }
        process.validate()?;
        processes.push(process);
    }
    Ok(processes)
}

pub fn save_corpus(processes: &[Process], path: &Path) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in processes {
        writeln!(out, "{}", record_to_json(p))?;
    }
    out.flush()?;
    Ok(())
}
