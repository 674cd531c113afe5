//! Gradient attribution over input positions and input-ablation studies.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::baselines::Stopwords;
use crate::corpus::{Process, Step, Vocabulary, CLS_ID, PAD_ID, SEP_ID, START_ID};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::Model;
use crate::params::Parameters;
use crate::templating::TemplateEncoding;
use crate::transformer::{backward, cross_entropy, forward, ForwardOptions, OutputGrads};

/// How a position's input gradient is reduced to one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceKind {
    /// L2 norm of the gradient.
    #[default]
    GradNorm,
    /// Absolute value of the gradient dotted with the input embedding.
    GradTimesInput,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attribution {
    /// One score per encoding position.
    pub scores: Vec<f64>,
    pub token_ids: Vec<usize>,
    pub anchor_index: usize,
    pub target_class: usize,
    pub kind: RelevanceKind,
    /// Gold-class loss at the anchor.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenScore {
    pub token: String,
    pub score: f64,
}

impl Attribution {
    pub fn dump(&self, vocab: &Vocabulary) -> Vec<TokenScore> {
        self.token_ids
            .iter()
            .zip(&self.scores)
            .map(|(&id, &score)| TokenScore {
                token: vocab.token(id).unwrap_or("[UNK]").to_string(),
                score,
            })
            .collect()
    }

    /// Positions ordered by descending score, ties by position.
    pub fn ranked(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Highest-scoring position that is neither a special token nor an
    /// inserted copy of the entity, nor a token in `exclude_ids`.
    pub fn top_content_position(
        &self,
        enc: &TemplateEncoding,
        exclude_ids: &[usize],
    ) -> Option<usize> {
        let inserted: HashSet<usize> = enc
            .entity_token_positions
            .iter()
            .flatten()
            .copied()
            .collect();
        self.ranked().into_iter().find(|&i| {
            let id = self.token_ids[i];
            !is_special(id) && !inserted.contains(&i) && !exclude_ids.contains(&id)
        })
    }

    /// Text table of the `k` highest-scoring positions.
    pub fn top_k_table(&self, vocab: &Vocabulary, k: usize) -> String {
        let mut s = format!(
            "{:>4}  {:>4}  {:<16} {:>12}\n",
            "rank", "pos", "token", "score"
        );
        for (r, i) in self.ranked().into_iter().take(k).enumerate() {
            let tok = vocab.token(self.token_ids[i]).unwrap_or("[UNK]");
            s.push_str(&format!(
                "{:>4}  {:>4}  {:<16} {:>12.6e}\n",
                r + 1,
                i,
                tok,
                self.scores[i]
            ));
        }
        s
    }
}

fn is_special(id: usize) -> bool {
    matches!(id, PAD_ID | START_ID | SEP_ID | CLS_ID)
}

/// Gradient of the target-class loss at one anchor with respect to every
/// input embedding vector, reduced per position.
///
/// `entity` must hold the entity's token ids when the model uses a
/// post-conditioned head, whose anchors are shared by all entities.
pub fn attribute(
    model: &Model,
    enc: &TemplateEncoding,
    anchor_index: usize,
    target_class: usize,
    entity: Option<&[usize]>,
    kind: RelevanceKind,
) -> Result<Attribution> {
    if let Some(name) = model.first_non_finite() {
        return Err(Error::NonFinite(name));
    }
    let anchor = enc.anchors.get(anchor_index).ok_or_else(|| {
        Error::Validation(format!(
            "anchor {anchor_index} out of range ({} anchors)",
            enc.anchors.len()
        ))
    })?;
    let classes = model.spec.num_classes();
    if target_class >= classes {
        return Err(Error::Validation(format!(
            "target class {target_class} out of range ({classes} classes)"
        )));
    }
    if model.spec.head != HeadKind::Conditioned && entity.is_none() {
        return Err(Error::Validation(
            "post-conditioned attribution needs an entity".into(),
        ));
    }
    let trace = forward(
        &model.encoder,
        &model.config,
        &enc.token_ids,
        ForwardOptions::cached(),
    )?;
    let z = model.slot_scores(&trace, anchor.position, entity)?;
    let (loss, dz) = cross_entropy(z.view(), target_class);
    let mut scratch = model.zeros_like();
    let mut d_states = ndarray::Array2::zeros(trace.states.dim());
    model.slot_backward(
        &trace,
        anchor.position,
        entity,
        &dz,
        &mut scratch,
        &mut d_states,
    )?;
    let back = backward(
        &model.encoder,
        &model.config,
        &trace,
        &OutputGrads {
            d_states: Some(d_states),
            d_logits: None,
        },
    )?;
    let scores = back
        .d_inputs
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, g)| match kind {
            RelevanceKind::GradNorm => g.dot(&g).sqrt(),
            RelevanceKind::GradTimesInput => {
                let x =
                    &model.encoder.token_emb.row(enc.token_ids[i]) + &model.encoder.pos_emb.row(i);
                g.dot(&x).abs()
            }
        })
        .collect();
    Ok(Attribution {
        scores,
        token_ids: enc.token_ids.clone(),
        anchor_index,
        target_class,
        kind,
        loss,
    })
}

/// Which input words to remove before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub drop_verbs: bool,
    pub drop_other_entities: bool,
}

impl AblationSpec {
    pub fn new(drop_verbs: bool, drop_other_entities: bool) -> Result<Self> {
        let s = Self {
            drop_verbs,
            drop_other_entities,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.drop_verbs && !self.drop_other_entities {
            return Err(Error::Validation(
                "ablation must drop verbs, other entities, or both".into(),
            ));
        }
        Ok(())
    }
}

/// Verb tags: `V`, `VERB`, and the Penn `VB*` family.
pub fn is_verb_tag(tag: &str) -> bool {
    tag == "V" || tag == "VERB" || tag.starts_with("VB")
}

/// Tag given to the placeholder that replaces an emptied step.
pub const EMPTY_STEP_TAG: &str = "X";

/// Removes words from every step; labels are untouched.
///
/// `drop_other_entities` works per conditioned entity, so a process with
/// `m > 1` entities becomes `m` single-entity processes with ids
/// `"{id}#{index}"`. Stopwords in other entities' names are kept.
pub fn ablate(corpus: &[Process], spec: AblationSpec) -> Result<Vec<Process>> {
    spec.validate()?;
    let stop = Stopwords::bundled();
    let mut out = Vec::new();
    for p in corpus {
        if spec.drop_verbs {
            if let Some(i) = p.steps.iter().position(|s| s.pos.is_none()) {
                return Err(Error::Validation(format!(
                    "process `{}` step {} has no POS tags; verb ablation needs them",
                    p.id,
                    i + 1
                )));
            }
        }
        if spec.drop_other_entities && p.entities.len() > 1 {
            for (k, e) in p.entities.iter().enumerate() {
                let own: HashSet<&str> = e.name_tokens.iter().map(String::as_str).collect();
                let others: HashSet<&str> = p
                    .entities
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .flat_map(|(_, o)| o.name_tokens.iter().map(String::as_str))
                    .filter(|t| !own.contains(t) && !stop.contains(t))
                    .collect();
                out.push(Process {
                    id: format!("{}#{k}", p.id),
                    task: p.task,
                    steps: p
                        .steps
                        .iter()
                        .map(|s| filter_step(s, spec.drop_verbs, &others))
                        .collect(),
                    entities: vec![e.clone()],
                });
            }
        } else {
            let none = HashSet::new();
            out.push(Process {
                steps: p
                    .steps
                    .iter()
                    .map(|s| filter_step(s, spec.drop_verbs, &none))
                    .collect(),
                ..p.clone()
            });
        }
    }
    Ok(out)
}

fn filter_step(step: &Step, drop_verbs: bool, drop_tokens: &HashSet<&str>) -> Step {
    let keep: Vec<usize> = (0..step.tokens.len())
        .filter(|&i| {
            let verb = drop_verbs && step.pos.as_ref().is_some_and(|p| is_verb_tag(&p[i]));
            !verb && !drop_tokens.contains(step.tokens[i].to_lowercase().as_str())
        })
        .collect();
    if keep.len() == step.tokens.len() {
        return step.clone();
    }
    if keep.is_empty() {
        let s = Step::from_tokens(vec!["[UNK]".to_string()]);
        return match step.pos {
            Some(_) => s.with_pos(vec![EMPTY_STEP_TAG.to_string()]),
            None => s,
        };
    }
    let s = Step::from_tokens(keep.iter().map(|&i| step.tokens[i].clone()).collect());
    match &step.pos {
        Some(p) => s.with_pos(keep.iter().map(|&i| p[i].clone()).collect()),
        None => s,
    }
}
