//! A complete tracker: encoder, prediction head and CRF transition scores,
//! with per-process losses and gradients.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::{Process, TaskKind, Vocabulary};
use crate::crf::{
    self, fold_to_surface, nll_loss, viterbi, SurfaceTag, TagLattice, NUM_SURFACE, NUM_TAGS,
};
use crate::error::{Error, Result};
use crate::heads::{
    attn_backward, attn_forward, conditioned_backward, entity_embedding, entity_embedding_backward,
    indep_backward, indep_logits, EntityRepresentation, HeadKind, HeadParams,
};
use crate::params::{slice_mut_of, tensor_ref, Parameters, TensorRef};
use crate::templating::{TemplateEncoding, TemplateVariant, Templater};
use crate::transformer::{
    backward, cross_entropy, forward, lm_loss, ForwardOptions, ForwardTrace, MaskMode, ModelConfig,
    OutputGrads, TransformerParams,
};

/// Template variant, head and task of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: TemplateVariant,
    pub head: HeadKind,
    pub task: TaskKind,
}

impl ModelSpec {
    pub fn new(variant: TemplateVariant, head: HeadKind, task: TaskKind) -> Result<Self> {
        let spec = Self {
            variant,
            head,
            task,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Entity-conditioned templates need the conditioned head; `PostCond`
    /// needs indep or attn.
    pub fn validate(&self) -> Result<()> {
        let ok = match self.variant {
            TemplateVariant::PostCond => self.head != HeadKind::Conditioned,
            _ => self.head == HeadKind::Conditioned,
        };
        if !ok {
            return Err(Error::Incompatible(format!(
                "template {} cannot be used with the {:?} head",
                self.variant, self.head
            )));
        }
        Ok(())
    }

    /// Output width of the head: presence classes or surface tags.
    pub fn num_classes(&self) -> usize {
        match self.task {
            TaskKind::Recipes => 2,
            TaskKind::ProPara => NUM_SURFACE,
        }
    }
}

/// The variant names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VariantChoice {
    SentFirst,
    SentLast,
    DocFirst,
    DocLast,
    PostIndep,
    PostAttn,
}

impl VariantChoice {
    pub fn template_and_head(self) -> (TemplateVariant, HeadKind) {
        match self {
            VariantChoice::SentFirst => (TemplateVariant::SentFirst, HeadKind::Conditioned),
            VariantChoice::SentLast => (TemplateVariant::SentLast, HeadKind::Conditioned),
            VariantChoice::DocFirst => (TemplateVariant::DocFirst, HeadKind::Conditioned),
            VariantChoice::DocLast => (TemplateVariant::DocLast, HeadKind::Conditioned),
            VariantChoice::PostIndep => (TemplateVariant::PostCond, HeadKind::Indep),
            VariantChoice::PostAttn => (TemplateVariant::PostCond, HeadKind::Attn),
        }
    }
}

impl FromStr for VariantChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string()))
            .map_err(|_| Error::Validation(format!("unknown variant `{s}`")))
    }
}

impl fmt::Display for VariantChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("unit variant");
        f.write_str(v.as_str().unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub spec: ModelSpec,
    pub encoder: TransformerParams,
    pub head: HeadParams,
    /// `6 x 6` CRF transition scores; only trained for ProPara.
    pub transitions: Array2<f64>,
}

impl Model {
    pub fn zeros(config: &ModelConfig, spec: ModelSpec) -> Self {
        Self {
            config: config.clone(),
            spec,
            encoder: TransformerParams::zeros(config),
            head: HeadParams::zeros(spec.head, config.d_model, spec.num_classes()),
            transitions: Array2::zeros((NUM_TAGS, NUM_TAGS)),
        }
    }

    pub fn init(config: &ModelConfig, spec: ModelSpec, rng: &mut dyn RngCore) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        let encoder = TransformerParams::init(config, rng);
        let mut head = HeadParams::init(
            spec.head,
            config.d_model,
            spec.num_classes(),
            config.init_std,
            rng,
        );
        if config.precision == crate::transformer::Precision::F32 {
            head.round_to_f32();
        }
        Ok(Self {
            config: config.clone(),
            spec,
            encoder,
            head,
            transitions: Array2::zeros((NUM_TAGS, NUM_TAGS)),
        })
    }

    /// Gradient buffer with this model's shapes.
    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.config, self.spec)
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        if vocab.len() != self.config.vocab_size {
            return Err(Error::Incompatible(format!(
                "model expects a vocabulary of {} entries, got {}",
                self.config.vocab_size,
                vocab.len()
            )));
        }
        Ok(())
    }

    fn entity_rep(&self, ids: &[usize]) -> Result<EntityRepresentation> {
        entity_embedding(&self.encoder.token_emb, ids)
    }

    /// Raw head scores for one slot read from `trace`.
    ///
    /// `entity` is required by the post-conditioned heads and ignored by
    /// the conditioned one.
    pub fn slot_scores(
        &self,
        trace: &ForwardTrace,
        position: usize,
        entity: Option<&[usize]>,
    ) -> Result<Array1<f64>> {
        if position >= trace.len() {
            return Err(Error::Shape(format!(
                "slot {position} outside trace of length {}",
                trace.len()
            )));
        }
        match self.spec.head {
            HeadKind::Conditioned => Ok(trace.states.row(position).dot(&self.head.w_task)),
            HeadKind::Indep => {
                let g = self.entity_rep(require_entity(entity)?)?;
                indep_logits(trace.states.row(position), &g, &self.head)
            }
            HeadKind::Attn => {
                let g = self.entity_rep(require_entity(entity)?)?;
                Ok(attn_forward(trace.states.view(), &g, &self.head)?.logits)
            }
        }
    }

    /// Accumulates the head gradients of `d_scores` into `grads` and
    /// `d_states`; embedding gradients of `g_e` go to `grads.encoder`.
    pub fn slot_backward(
        &self,
        trace: &ForwardTrace,
        position: usize,
        entity: Option<&[usize]>,
        d_scores: &Array1<f64>,
        grads: &mut Model,
        d_states: &mut Array2<f64>,
    ) -> Result<()> {
        match self.spec.head {
            HeadKind::Conditioned => {
                conditioned_backward(
                    trace,
                    position,
                    &self.head,
                    d_scores.view(),
                    &mut grads.head.w_task,
                    d_states,
                );
            }
            HeadKind::Indep => {
                let ids = require_entity(entity)?;
                let g = self.entity_rep(ids)?;
                let ig =
                    indep_backward(trace.states.row(position), &g, &self.head, d_scores.view());
                grads.head.w_task += &ig.d_w_task;
                let mut row = d_states.row_mut(position);
                row += &ig.d_h;
                entity_embedding_backward(&mut grads.encoder.token_emb, ids, ig.d_g.view());
            }
            HeadKind::Attn => {
                let ids = require_entity(entity)?;
                let g = self.entity_rep(ids)?;
                let fwd = attn_forward(trace.states.view(), &g, &self.head)?;
                let ag = attn_backward(trace.states.view(), &g, &self.head, &fwd, d_scores.view());
                grads.head.w_task += &ag.d_w_task;
                grads.head.w_sim += &ag.d_w_sim;
                *d_states += &ag.d_states;
                entity_embedding_backward(&mut grads.encoder.token_emb, ids, ag.d_g.view());
            }
        }
        Ok(())
    }

    fn run(
        &self,
        p: &Process,
        vocab: &Vocabulary,
        templater: &Templater,
        cache: bool,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<ProcessRun> {
        if p.task != self.spec.task {
            return Err(Error::Incompatible(format!(
                "process `{}` is a {} process but the model was built for {}",
                p.id, p.task, self.spec.task
            )));
        }
        let entity_ids: Vec<Vec<usize>> = p
            .entities
            .iter()
            .map(|e| vocab.ids(&e.name_tokens))
            .collect();
        let encodings = templater.instances_for_task(p, self.spec.variant, vocab)?;
        let t_len = p.num_steps();
        let mut slots: Vec<Vec<Option<Slot>>> = vec![vec![None; t_len]; p.entities.len()];
        let mut instances = Vec::with_capacity(encodings.len());
        for (i, enc) in encodings.into_iter().enumerate() {
            let opts = ForwardOptions {
                cache,
                rng: rng.as_mut().map(|r| &mut **r as &mut dyn RngCore),
            };
            let trace = forward(&self.encoder, &self.config, &enc.token_ids, opts)?;
            for (position, e, step) in enc.slots(p.entities.len()) {
                let entity =
                    (self.spec.head != HeadKind::Conditioned).then(|| entity_ids[e].as_slice());
                let scores = self.slot_scores(&trace, position, entity)?;
                slots[e][step - 1] = Some(Slot {
                    instance: i,
                    position,
                    scores,
                });
            }
            instances.push(Instance { enc, trace });
        }
        let slots = slots
            .into_iter()
            .map(|row| row.into_iter().collect::<Option<Vec<_>>>())
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| {
                Error::Validation(format!(
                    "process `{}`: templates left a slot unfilled",
                    p.id
                ))
            })?;
        Ok(ProcessRun {
            instances,
            slots,
            entity_ids,
        })
    }

    /// Raw scores, one row per `(entity, step)`.
    pub fn scores(
        &self,
        p: &Process,
        vocab: &Vocabulary,
        templater: &Templater,
    ) -> Result<Vec<Vec<Array1<f64>>>> {
        let run = self.run(p, vocab, templater, false, None)?;
        Ok(run
            .slots
            .into_iter()
            .map(|row| row.into_iter().map(|s| s.scores).collect())
            .collect())
    }

    /// Per-entity CRF lattices built from the surface tag potentials.
    pub fn lattices(
        &self,
        p: &Process,
        vocab: &Vocabulary,
        templater: &Templater,
    ) -> Result<Vec<TagLattice>> {
        if self.spec.task != TaskKind::ProPara {
            return Err(Error::Incompatible(
                "tag lattices exist only for ProPara models".into(),
            ));
        }
        self.scores(p, vocab, templater)?
            .iter()
            .map(|rows| TagLattice::from_surface(stack(rows).view(), self.transitions.clone()))
            .collect()
    }

    pub fn predict(
        &self,
        p: &Process,
        vocab: &Vocabulary,
        templater: &Templater,
    ) -> Result<Prediction> {
        match self.spec.task {
            TaskKind::Recipes => Ok(Prediction::Presence(
                self.scores(p, vocab, templater)?
                    .iter()
                    .map(|rows| rows.iter().map(|z| z[1] > z[0]).collect())
                    .collect(),
            )),
            TaskKind::ProPara => Ok(Prediction::Tags(
                self.lattices(p, vocab, templater)?
                    .iter()
                    .map(|lat| viterbi(lat).tags)
                    .collect(),
            )),
        }
    }

    /// `L_task + lm_lambda * L_lm` on one process and its gradient.
    ///
    /// The task loss is the mean anchor cross-entropy (Recipes) or the mean
    /// per-entity CRF NLL (ProPara); the LM loss is the mean per-encoding
    /// next-token loss and is skipped for bidirectional encoders.
    pub fn loss_and_grad(
        &self,
        p: &Process,
        vocab: &Vocabulary,
        templater: &Templater,
        lm_lambda: f64,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<ProcessGrad> {
        let run = self.run(p, vocab, templater, true, rng)?;
        let mut grads = self.zeros_like();
        let m = p.entities.len();
        let t_len = p.num_steps();
        let mut d_scores: Vec<Vec<Array1<f64>>> = vec![Vec::with_capacity(t_len); m];
        let mut task = 0.0;
        match self.spec.task {
            TaskKind::Recipes => {
                let n = (m * t_len) as f64;
                for (e, entity) in p.entities.iter().enumerate() {
                    let labels = entity.labels.presence().ok_or_else(|| {
                        Error::Validation(format!(
                            "recipe `{}` entity `{}` lacks presence labels",
                            p.id, entity.name
                        ))
                    })?;
                    for (t, &present) in labels.iter().enumerate() {
                        let (l, g) =
                            cross_entropy(run.slots[e][t].scores.view(), usize::from(present));
                        task += l / n;
                        d_scores[e].push(g / n);
                    }
                }
            }
            TaskKind::ProPara => {
                let w = 1.0 / m as f64;
                for (e, entity) in p.entities.iter().enumerate() {
                    let gold = entity.labels.tags().ok_or_else(|| {
                        Error::Validation(format!(
                            "process `{}` entity `{}` lacks tag labels",
                            p.id, entity.name
                        ))
                    })?;
                    let rows: Vec<Array1<f64>> =
                        run.slots[e].iter().map(|s| s.scores.clone()).collect();
                    let lat =
                        TagLattice::from_surface(stack(&rows).view(), self.transitions.clone())?;
                    let out = nll_loss(&lat, gold)?;
                    task += w * out.loss;
                    grads.transitions.scaled_add(w, &out.d_transitions);
                    let surf = fold_to_surface(&out.d_potentials) * w;
                    d_scores[e].extend(surf.rows().into_iter().map(|r| r.to_owned()));
                }
            }
        }

        let n_inst = run.instances.len();
        let use_lm = lm_lambda > 0.0 && self.config.mask_mode == MaskMode::Causal;
        let mut d_states: Vec<Array2<f64>> = run
            .instances
            .iter()
            .map(|inst| Array2::zeros(inst.trace.states.dim()))
            .collect();
        for (e, row) in run.slots.iter().enumerate() {
            for (t, slot) in row.iter().enumerate() {
                let entity =
                    (self.spec.head != HeadKind::Conditioned).then(|| run.entity_ids[e].as_slice());
                let inst = &run.instances[slot.instance];
                self.slot_backward(
                    &inst.trace,
                    slot.position,
                    entity,
                    &d_scores[e][t],
                    &mut grads,
                    &mut d_states[slot.instance],
                )?;
            }
        }
        let mut lm = 0.0;
        for (inst, ds) in run.instances.iter().zip(d_states) {
            let d_logits = if use_lm {
                let out = lm_loss(&inst.trace, &inst.enc.token_ids)?;
                lm += out.loss / n_inst as f64;
                Some(out.d_logits * (lm_lambda / n_inst as f64))
            } else {
                None
            };
            let back = backward(
                &self.encoder,
                &self.config,
                &inst.trace,
                &OutputGrads {
                    d_states: Some(ds),
                    d_logits,
                },
            )?;
            grads.encoder.add_scaled(&back.grads, 1.0);
        }
        Ok(ProcessGrad {
            task_loss: task,
            lm_loss: lm,
            loss: task + if use_lm { lm_lambda * lm } else { 0.0 },
            grads,
        })
    }
}

fn require_entity(entity: Option<&[usize]>) -> Result<&[usize]> {
    entity.ok_or_else(|| {
        Error::Validation("post-conditioned heads need the entity's token ids".into())
    })
}

fn stack(rows: &[Array1<f64>]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(i, j)| rows[i][j])
}

impl Parameters for Model {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = self.encoder.tensors();
        out.extend(self.head.tensors());
        out.push(tensor_ref("crf.transitions", &self.transitions));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.head.tensors_mut());
        out.push(slice_mut_of(&mut self.transitions));
        out
    }
}

#[derive(Debug, Clone)]
struct Slot {
    instance: usize,
    position: usize,
    scores: Array1<f64>,
}

struct Instance {
    enc: TemplateEncoding,
    trace: ForwardTrace,
}

struct ProcessRun {
    instances: Vec<Instance>,
    /// `[entity][step]`.
    slots: Vec<Vec<Slot>>,
    entity_ids: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ProcessGrad {
    pub task_loss: f64,
    pub lm_loss: f64,
    pub loss: f64,
    pub grads: Model,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Presence(Vec<Vec<bool>>),
    Tags(Vec<Vec<SurfaceTag>>),
}

impl Prediction {
    /// True when every decoded tag sequence is a valid lifecycle.
    pub fn is_lifecycle_valid(&self) -> bool {
        match self {
            Prediction::Presence(_) => true,
            Prediction::Tags(seqs) => seqs.iter().all(|s| crf::expand_gold(s).is_ok()),
        }
    }
}
