//! Prediction heads mapping transformer states to per-(entity, step)
//! class distributions or CRF tag potentials.
//!
//! * conditioned: `softmax(h_[CLS] W_task)` at each anchor of an
//!   entity-conditioned encoding;
//! * indep: `softmax([h_[CLS]; g_e] W_task)`;
//! * attn: `a_i = g_eᵀ W_sim h_i`, `α = softmax(a)`, `c = Σ α_i h_i`,
//!   `softmax(c W_task)`.
//!
//! `g_e` is the sum of the entity's token embeddings, read from the
//! encoder's own embedding table.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{slice_mut_of, tensor_ref, Parameters, TensorRef};
use crate::templating::TemplateEncoding;
use crate::transformer::{softmax_in_place, ForwardTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Conditioned,
    Indep,
    Attn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    ClassProbs,
    TagPotentials,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// `in x classes`, where `in` is `2 d` for indep and `d` otherwise.
    pub w_task: Array2<f64>,
    /// `d x d` bilinear similarity used by the attn head.
    pub w_sim: Array2<f64>,
}

impl HeadParams {
    pub fn input_width(kind: HeadKind, d_model: usize) -> usize {
        match kind {
            HeadKind::Indep => 2 * d_model,
            HeadKind::Conditioned | HeadKind::Attn => d_model,
        }
    }

    pub fn zeros(kind: HeadKind, d_model: usize, classes: usize) -> Self {
        Self {
            w_task: Array2::zeros((Self::input_width(kind, d_model), classes)),
            w_sim: Array2::zeros((d_model, d_model)),
        }
    }

    pub fn init(
        kind: HeadKind,
        d_model: usize,
        classes: usize,
        std: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let mut p = Self::zeros(kind, d_model, classes);
        let normal = Normal::new(0.0, std).expect("valid deviation");
        p.w_task.iter_mut().for_each(|x| *x = normal.sample(rng));
        if kind == HeadKind::Attn {
            p.w_sim.iter_mut().for_each(|x| *x = normal.sample(rng));
        }
        p
    }
}

impl Parameters for HeadParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            tensor_ref("head.w_task", &self.w_task),
            tensor_ref("head.w_sim", &self.w_sim),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            slice_mut_of(&mut self.w_task),
            slice_mut_of(&mut self.w_sim),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntityRepresentation {
    pub g: Array1<f64>,
}

/// `g_e = Σ emb(e_i)` over the entity's token ids.
pub fn entity_embedding(
    token_emb: &Array2<f64>,
    entity_tokens: &[usize],
) -> Result<EntityRepresentation> {
    if entity_tokens.is_empty() {
        return Err(Error::Validation("entity has no tokens".into()));
    }
    let mut g = Array1::zeros(token_emb.ncols());
    for &id in entity_tokens {
        if id >= token_emb.nrows() {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: token_emb.nrows(),
            });
        }
        g += &token_emb.row(id);
    }
    Ok(EntityRepresentation { g })
}

/// Scatters a gradient on `g_e` back onto the embedding rows.
pub fn entity_embedding_backward(
    d_token_emb: &mut Array2<f64>,
    entity_tokens: &[usize],
    d_g: ArrayView1<f64>,
) {
    for &id in entity_tokens {
        let mut row = d_token_emb.row_mut(id);
        row += &d_g;
    }
}

pub fn softmax(z: &Array1<f64>) -> Array1<f64> {
    let mut p = z.to_vec();
    softmax_in_place(&mut p);
    Array1::from(p)
}

fn check_width(w_task: &Array2<f64>, width: usize) -> Result<()> {
    if w_task.nrows() != width {
        return Err(Error::Shape(format!(
            "W_task expects input width {}, got {width}",
            w_task.nrows()
        )));
    }
    Ok(())
}

/// Raw scores `[h_cls; g_e] W_task`.
pub fn indep_logits(
    h_cls: ArrayView1<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
) -> Result<Array1<f64>> {
    check_width(&params.w_task, h_cls.len() + g.g.len())?;
    let d = h_cls.len();
    let w = &params.w_task;
    Ok(h_cls.dot(&w.slice(ndarray::s![..d, ..])) + g.g.dot(&w.slice(ndarray::s![d.., ..])))
}

pub fn predict_indep(
    h_cls: ArrayView1<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
) -> Result<Array1<f64>> {
    Ok(softmax(&indep_logits(h_cls, g, params)?))
}

pub struct IndepGrads {
    pub d_w_task: Array2<f64>,
    pub d_h: Array1<f64>,
    pub d_g: Array1<f64>,
}

pub fn indep_backward(
    h_cls: ArrayView1<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
    d_logits: ArrayView1<f64>,
) -> IndepGrads {
    let d = h_cls.len();
    let c = ndarray::concatenate(Axis(0), &[h_cls, g.g.view()]).expect("1-d concat");
    let d_w_task = outer(c.view(), d_logits);
    let dc = params.w_task.dot(&d_logits);
    IndepGrads {
        d_w_task,
        d_h: dc.slice(ndarray::s![..d]).to_owned(),
        d_g: dc.slice(ndarray::s![d..]).to_owned(),
    }
}

fn outer(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Array2<f64> {
    let a2 = a.insert_axis(Axis(1));
    let b2 = b.insert_axis(Axis(0));
    a2.dot(&b2)
}

/// Intermediate values of the attn head.
#[derive(Debug, Clone)]
pub struct AttnForward {
    pub scores: Array1<f64>,
    pub alpha: Array1<f64>,
    pub context: Array1<f64>,
    pub logits: Array1<f64>,
}

pub fn attn_forward(
    states: ArrayView2<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
) -> Result<AttnForward> {
    if states.nrows() == 0 {
        return Err(Error::Validation(
            "attention over an empty state sequence".into(),
        ));
    }
    if states.ncols() != g.g.len() || params.w_sim.dim() != (g.g.len(), states.ncols()) {
        return Err(Error::Shape(format!(
            "states {:?}, g_e {}, W_sim {:?}",
            states.dim(),
            g.g.len(),
            params.w_sim.dim()
        )));
    }
    check_width(&params.w_task, states.ncols())?;
    let query = params.w_sim.t().dot(&g.g);
    let scores = states.dot(&query);
    attn_from_scores(states, scores, params)
}

/// The attn head from precomputed scores `a`; exposed so that masked
/// (`-inf`) positions can be injected directly.
pub fn attn_from_scores(
    states: ArrayView2<f64>,
    scores: Array1<f64>,
    params: &HeadParams,
) -> Result<AttnForward> {
    if scores.len() != states.nrows() {
        return Err(Error::Shape(format!(
            "{} scores for {} states",
            scores.len(),
            states.nrows()
        )));
    }
    let alpha = softmax(&scores);
    let mut context = Array1::zeros(states.ncols());
    for (w, h) in alpha.iter().zip(states.rows()) {
        if *w != 0.0 {
            context.scaled_add(*w, &h);
        }
    }
    let logits = context.dot(&params.w_task);
    Ok(AttnForward {
        scores,
        alpha,
        context,
        logits,
    })
}

pub fn predict_attn(
    states: ArrayView2<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
) -> Result<Array1<f64>> {
    Ok(softmax(&attn_forward(states, g, params)?.logits))
}

pub struct AttnGrads {
    pub d_w_task: Array2<f64>,
    pub d_w_sim: Array2<f64>,
    pub d_states: Array2<f64>,
    pub d_g: Array1<f64>,
}

pub fn attn_backward(
    states: ArrayView2<f64>,
    g: &EntityRepresentation,
    params: &HeadParams,
    fwd: &AttnForward,
    d_logits: ArrayView1<f64>,
) -> AttnGrads {
    let d_w_task = outer(fwd.context.view(), d_logits);
    let dc = params.w_task.dot(&d_logits);
    let d_alpha = states.dot(&dc);
    let mean = fwd.alpha.dot(&d_alpha);
    let d_scores: Array1<f64> = fwd
        .alpha
        .iter()
        .zip(d_alpha.iter())
        .map(|(a, da)| a * (da - mean))
        .collect();
    let query = params.w_sim.t().dot(&g.g);
    let mut d_states = outer(fwd.alpha.view(), dc.view());
    d_states += &outer(d_scores.view(), query.view());
    let weighted = states.t().dot(&d_scores);
    AttnGrads {
        d_w_task,
        d_w_sim: outer(g.g.view(), weighted.view()),
        d_states,
        d_g: params.w_sim.dot(&weighted),
    }
}

/// One output row attributed to an anchor's slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorOutput {
    pub position: usize,
    pub entity: Option<usize>,
    pub step: usize,
    pub row: Array1<f64>,
}

/// Per-anchor outputs of the conditioned head.
pub fn predict_conditioned(
    trace: &ForwardTrace,
    enc: &TemplateEncoding,
    params: &HeadParams,
    mode: OutputMode,
) -> Result<Vec<AnchorOutput>> {
    if enc.anchors.is_empty() {
        return Err(Error::Validation("encoding has no anchors".into()));
    }
    check_width(&params.w_task, trace.states.ncols())?;
    enc.anchors
        .iter()
        .map(|a| {
            if a.position >= trace.states.nrows() {
                return Err(Error::Shape(format!(
                    "anchor at {} outside trace of length {}",
                    a.position,
                    trace.states.nrows()
                )));
            }
            let z = trace.states.row(a.position).dot(&params.w_task);
            let row = match mode {
                OutputMode::ClassProbs => softmax(&z),
                OutputMode::TagPotentials => z,
            };
            Ok(AnchorOutput {
                position: a.position,
                entity: a.entity,
                step: a.step,
                row,
            })
        })
        .collect()
}

/// Accumulates the conditioned head's gradients for raw scores at
/// `position` into `d_w_task` and `d_states`.
pub fn conditioned_backward(
    trace: &ForwardTrace,
    position: usize,
    params: &HeadParams,
    d_logits: ArrayView1<f64>,
    d_w_task: &mut Array2<f64>,
    d_states: &mut Array2<f64>,
) {
    let h = trace.states.row(position);
    *d_w_task += &outer(h, d_logits);
    let mut row = d_states.row_mut(position);
    row += &params.w_task.dot(&d_logits);
}
