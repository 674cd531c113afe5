//! Rule-based Recipes baselines: majority class, exact match and first
//! occurrence.

use std::collections::HashSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::corpus::{EntityTrack, Process, Step, TaskKind};
use crate::error::{Error, Result};

/// Version tag of the bundled stopword list.
pub const STOPWORDS_VERSION: &str = "v1";
const STOPWORDS_TXT: &str = include_str!("../resources/stopwords.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    Majority,
    ExactMatch,
    FirstOcc,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stopwords(HashSet<String>);

impl Stopwords {
    /// Parses a one-token-per-line list; `#` starts a comment line.
    pub fn parse(text: &str) -> Self {
        Self(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(str::to_lowercase)
                .collect(),
        )
    }

    pub fn bundled() -> &'static Stopwords {
        static LIST: OnceLock<Stopwords> = OnceLock::new();
        LIST.get_or_init(|| Stopwords::parse(STOPWORDS_TXT))
    }

    pub fn contains(&self, token: &str) -> bool {
        self.0.contains(&token.to_lowercase())
    }
}

/// True iff every non-stopword entity token occurs in the step.
///
/// Comparison is case-insensitive with no stemming. An entity made only of
/// stopwords falls back to requiring all of its tokens.
pub fn matches(entity: &EntityTrack, step: &Step) -> bool {
    matches_with(entity, step, Stopwords::bundled())
}

pub fn matches_with(entity: &EntityTrack, step: &Step, stopwords: &Stopwords) -> bool {
    let step_tokens: HashSet<String> = step.tokens.iter().map(|t| t.to_lowercase()).collect();
    let content: Vec<&String> = entity
        .name_tokens
        .iter()
        .filter(|t| !stopwords.contains(t))
        .collect();
    let required: Vec<&String> = if content.is_empty() {
        entity.name_tokens.iter().collect()
    } else {
        content
    };
    !required.is_empty()
        && required
            .iter()
            .all(|t| step_tokens.contains(&t.to_lowercase()))
}

/// Most frequent presence label over training cells; ties go to absence.
pub fn majority_label(train: &[Process]) -> Result<bool> {
    let (mut pos, mut total) = (0usize, 0usize);
    for p in train {
        require_recipes(p)?;
        for e in &p.entities {
            if let Some(labels) = e.labels.presence() {
                pos += labels.iter().filter(|&&b| b).count();
                total += labels.len();
            }
        }
    }
    Ok(2 * pos > total)
}

fn require_recipes(p: &Process) -> Result<()> {
    if p.task != TaskKind::Recipes {
        return Err(Error::Validation(format!(
            "baselines apply to recipes only; process `{}` is {}",
            p.id, p.task
        )));
    }
    Ok(())
}

/// Entity x step presence grid predicted by a baseline.
pub fn predict_baseline(
    kind: BaselineKind,
    p: &Process,
    train_majority_label: bool,
) -> Result<Vec<Vec<bool>>> {
    require_recipes(p)?;
    let t = p.num_steps();
    Ok(p.entities
        .iter()
        .map(|e| {
            let hits = p.steps.iter().map(|s| matches(e, s));
            match kind {
                BaselineKind::Majority => vec![train_majority_label; t],
                BaselineKind::ExactMatch => hits.collect(),
                BaselineKind::FirstOcc => {
                    let mut seen = false;
                    hits.map(|h| {
                        seen |= h;
                        seen
                    })
                    .collect()
                }
            }
        })
        .collect())
}
