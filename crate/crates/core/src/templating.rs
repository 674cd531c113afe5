//! Transformer input layouts for the entity-conditioned and
//! post-conditioned model variants.
//!
//! | variant   | layout |
//! |-----------|--------|
//! | SentFirst | `[START] e [SEP] s1 [SEP] … s(t-1) [SEP] st [CLS]` |
//! | SentLast  | `[START] s1 [SEP] … s(t-1) [SEP] st [SEP] e [CLS]` |
//! | DocFirst  | `[START] e [SEP] s1 [CLS] s2 [CLS] … sT [CLS]` |
//! | DocLast   | `[START] s1 [SEP] e [CLS] s2 [SEP] e [CLS] … sT [SEP] e [CLS]` |
//! | PostCond  | `[START] s1 [SEP] … [SEP] st [CLS]` |
//!
//! Every `[CLS]` is an anchor whose final hidden state carries the
//! prediction for one `(entity, step)` slot.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::corpus::{Process, Vocabulary, CLS_ID, SEP_ID, START_ID};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TemplateVariant {
    SentFirst,
    SentLast,
    DocFirst,
    DocLast,
    PostCond,
}

impl TemplateVariant {
    pub fn is_document_level(self) -> bool {
        matches!(self, TemplateVariant::DocFirst | TemplateVariant::DocLast)
    }

    pub fn is_entity_conditioned(self) -> bool {
        self != TemplateVariant::PostCond
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TemplateVariant::SentFirst => "sent-first",
            TemplateVariant::SentLast => "sent-last",
            TemplateVariant::DocFirst => "doc-first",
            TemplateVariant::DocLast => "doc-last",
            TemplateVariant::PostCond => "post-cond",
        })
    }
}

/// Which step(s) an encoding predicts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepSelector {
    All,
    Step(usize),
}

/// A prediction slot: the `[CLS]` position and the `(entity, step)` it
/// answers for. Post-conditioned anchors are shared by every entity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Anchor {
    pub position: usize,
    pub entity: Option<usize>,
    /// 1-based step index.
    pub step: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemplateEncoding {
    pub token_ids: Vec<usize>,
    pub anchors: Vec<Anchor>,
    pub variant: TemplateVariant,
    /// Positions of each inserted copy of the conditioned entity.
    pub entity_token_positions: Vec<Vec<usize>>,
}

impl TemplateEncoding {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// `(position, entity, step)` for every slot, expanding shared anchors
    /// over `num_entities`.
    pub fn slots(&self, num_entities: usize) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for a in &self.anchors {
            match a.entity {
                Some(e) => out.push((a.position, e, a.step)),
                None => out.extend((0..num_entities).map(|e| (a.position, e, a.step))),
            }
        }
        out
    }

    pub fn render(&self, vocab: &Vocabulary) -> String {
        vocab.render(&self.token_ids)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Special(usize),
    Entity(usize),
    Word(usize),
    Anchor(usize),
}

#[derive(Default)]
struct Builder {
    pieces: Vec<Piece>,
    entity_runs: Vec<(usize, usize)>,
}

impl Builder {
    fn special(&mut self, id: usize) {
        self.pieces.push(Piece::Special(id));
    }

    fn entity(&mut self, ids: &[usize]) {
        let start = self.pieces.len();
        self.pieces.extend(ids.iter().map(|&id| Piece::Entity(id)));
        self.entity_runs.push((start, ids.len()));
    }

    fn words(&mut self, ids: &[usize]) {
        self.pieces.extend(ids.iter().map(|&id| Piece::Word(id)));
    }

    fn anchor(&mut self, step: usize) {
        self.pieces.push(Piece::Anchor(step));
    }

    fn finish(
        self,
        variant: TemplateVariant,
        entity: Option<usize>,
        max_len: usize,
    ) -> Result<TemplateEncoding> {
        let Builder {
            mut pieces,
            entity_runs,
        } = self;
        // Truncate the oldest step words first; specials, entity copies and
        // anchors are never dropped.
        let mut keep = vec![true; pieces.len()];
        let mut excess = pieces.len().saturating_sub(max_len);
        for (i, p) in pieces.iter().enumerate() {
            if excess == 0 {
                break;
            }
            if matches!(p, Piece::Word(_)) {
                keep[i] = false;
                excess -= 1;
            }
        }
        if excess > 0 {
            return Err(Error::TooLong {
                len: pieces.len(),
                max: max_len,
            });
        }
        let mut new_index = vec![usize::MAX; pieces.len()];
        let mut kept = Vec::with_capacity(pieces.len());
        for (i, p) in pieces.drain(..).enumerate() {
            if keep[i] {
                new_index[i] = kept.len();
                kept.push(p);
            }
        }
        let mut token_ids = Vec::with_capacity(kept.len());
        let mut anchors = Vec::new();
        for (pos, p) in kept.iter().enumerate() {
            match *p {
                Piece::Special(id) | Piece::Entity(id) | Piece::Word(id) => token_ids.push(id),
                Piece::Anchor(step) => {
                    token_ids.push(CLS_ID);
                    anchors.push(Anchor {
                        position: pos,
                        entity,
                        step,
                    });
                }
            }
        }
        let entity_token_positions = entity_runs
            .into_iter()
            .map(|(start, len)| (start..start + len).map(|i| new_index[i]).collect())
            .collect();
        Ok(TemplateEncoding {
            token_ids,
            anchors,
            variant,
            entity_token_positions,
        })
    }
}

/// Builds encodings with a configurable sequence-length cap.
#[derive(Debug, Clone, Copy)]
pub struct Templater {
    pub max_len: usize,
}

impl Default for Templater {
    fn default() -> Self {
        Self {
            max_len: DEFAULT_MAX_LEN,
        }
    }
}

impl Templater {
    pub fn new(max_len: usize) -> Self {
        Self { max_len }
    }

    pub fn encode_entity_conditioned(
        &self,
        p: &Process,
        entity_index: usize,
        step: StepSelector,
        variant: TemplateVariant,
        vocab: &Vocabulary,
    ) -> Result<TemplateEncoding> {
        let entity = p.entities.get(entity_index).ok_or_else(|| {
            Error::Validation(format!(
                "process `{}` has no entity {entity_index} ({} entities)",
                p.id,
                p.entities.len()
            ))
        })?;
        let t_len = p.num_steps();
        let steps: Vec<Vec<usize>> = p.steps.iter().map(|s| vocab.ids(&s.tokens)).collect();
        let ent = vocab.ids(&entity.name_tokens);
        let mut b = Builder::default();
        b.special(START_ID);
        match (variant, step) {
            (TemplateVariant::DocFirst, StepSelector::All) => {
                b.entity(&ent);
                b.special(SEP_ID);
                for (i, s) in steps.iter().enumerate() {
                    b.words(s);
                    b.anchor(i + 1);
                }
            }
            (TemplateVariant::DocLast, StepSelector::All) => {
                for (i, s) in steps.iter().enumerate() {
                    b.words(s);
                    b.special(SEP_ID);
                    b.entity(&ent);
                    b.anchor(i + 1);
                }
            }
            (TemplateVariant::SentFirst, StepSelector::Step(t)) => {
                check_step(p, t)?;
                b.entity(&ent);
                b.special(SEP_ID);
                push_joined(&mut b, &steps[..t]);
                b.anchor(t);
            }
            (TemplateVariant::SentLast, StepSelector::Step(t)) => {
                check_step(p, t)?;
                push_joined(&mut b, &steps[..t]);
                b.special(SEP_ID);
                b.entity(&ent);
                b.anchor(t);
            }
            (TemplateVariant::PostCond, _) => {
                return Err(Error::Validation(
                    "post-conditioned encodings carry no entity; use encode_post_conditioned"
                        .into(),
                ))
            }
            (v, s) => return Err(Error::Validation(format!(
                "variant {v} cannot be built for step selector {s:?} (process has {t_len} steps)"
            ))),
        }
        b.finish(variant, Some(entity_index), self.max_len)
    }

    pub fn encode_post_conditioned(
        &self,
        p: &Process,
        step: usize,
        vocab: &Vocabulary,
    ) -> Result<TemplateEncoding> {
        check_step(p, step)?;
        let steps: Vec<Vec<usize>> = p.steps[..step]
            .iter()
            .map(|s| vocab.ids(&s.tokens))
            .collect();
        let mut b = Builder::default();
        b.special(START_ID);
        push_joined(&mut b, &steps);
        b.anchor(step);
        b.finish(TemplateVariant::PostCond, None, self.max_len)
    }

    /// All encodings needed to cover every `(entity, step)` label of `p`.
    ///
    /// Sentence-level variants give `T x m` encodings (entity-major),
    /// document-level variants one per entity, and `PostCond` one per step.
    pub fn instances_for_task(
        &self,
        p: &Process,
        variant: TemplateVariant,
        vocab: &Vocabulary,
    ) -> Result<Vec<TemplateEncoding>> {
        let t_len = p.num_steps();
        let m = p.entities.len();
        match variant {
            TemplateVariant::PostCond => (1..=t_len)
                .map(|t| self.encode_post_conditioned(p, t, vocab))
                .collect(),
            v if v.is_document_level() => (0..m)
                .map(|e| self.encode_entity_conditioned(p, e, StepSelector::All, v, vocab))
                .collect(),
            v => (0..m)
                .flat_map(|e| (1..=t_len).map(move |t| (e, t)))
                .map(|(e, t)| self.encode_entity_conditioned(p, e, StepSelector::Step(t), v, vocab))
                .collect(),
        }
    }
}

fn check_step(p: &Process, t: usize) -> Result<()> {
    if t == 0 || t > p.num_steps() {
        return Err(Error::Validation(format!(
            "step {t} out of range for process `{}` with {} steps",
            p.id,
            p.num_steps()
        )));
    }
    Ok(())
}

fn push_joined(b: &mut Builder, steps: &[Vec<usize>]) {
    for (i, s) in steps.iter().enumerate() {
        if i > 0 {
            b.special(SEP_ID);
        }
        b.words(s);
    }
}

pub fn encode_entity_conditioned(
    p: &Process,
    entity_index: usize,
    step: StepSelector,
    variant: TemplateVariant,
    vocab: &Vocabulary,
) -> Result<TemplateEncoding> {
    Templater::default().encode_entity_conditioned(p, entity_index, step, variant, vocab)
}

pub fn encode_post_conditioned(
    p: &Process,
    step: usize,
    vocab: &Vocabulary,
) -> Result<TemplateEncoding> {
    Templater::default().encode_post_conditioned(p, step, vocab)
}

pub fn instances_for_task(
    p: &Process,
    variant: TemplateVariant,
    vocab: &Vocabulary,
) -> Result<Vec<TemplateEncoding>> {
    Templater::default().instances_for_task(p, variant, vocab)
}
