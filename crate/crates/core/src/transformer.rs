//! A small pre-norm transformer encoder with hand-written backward passes.
//!
//! Each block computes `x + Attn(LN(x))` followed by `x + FFN(LN(x))` with
//! GELU activations; a final layer norm produces the contextual states
//! `X = [h_1 .. h_m]` and a linear projection produces LM logits. Learned
//! absolute position embeddings are added to token embeddings.

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::PAD_ID;
use crate::error::{Error, Result};
use crate::params::{slice_mut_of, tensor_ref, Parameters, TensorRef};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Causal,
    Bidirectional,
}

/// Storage precision of parameters. Arithmetic is always `f64`; `F32`
/// rounds parameters to single precision after every update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub mask_mode: MaskMode,
    #[serde(default)]
    pub dropout: f64,
    pub precision: Precision,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_init_std() -> f64 {
    0.02
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            d_model: 32,
            n_heads: 2,
            n_layers: 2,
            d_ff: 64,
            max_positions: 512,
            mask_mode: MaskMode::Causal,
            dropout: 0.0,
            precision: Precision::F32,
            init_std: default_init_std(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_positions", self.max_positions),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Validation(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Validation(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Validation(format!(
                "dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub ln1_gain: Array1<f64>,
    pub ln1_bias: Array1<f64>,
    pub w_q: Array2<f64>,
    pub b_q: Array1<f64>,
    pub w_k: Array2<f64>,
    pub b_k: Array1<f64>,
    pub w_v: Array2<f64>,
    pub b_v: Array1<f64>,
    pub w_o: Array2<f64>,
    pub b_o: Array1<f64>,
    pub ln2_gain: Array1<f64>,
    pub ln2_bias: Array1<f64>,
    pub w_ff1: Array2<f64>,
    pub b_ff1: Array1<f64>,
    pub w_ff2: Array2<f64>,
    pub b_ff2: Array1<f64>,
}

impl LayerParams {
    fn zeros(d: usize, d_ff: usize) -> Self {
        Self {
            ln1_gain: Array1::zeros(d),
            ln1_bias: Array1::zeros(d),
            w_q: Array2::zeros((d, d)),
            b_q: Array1::zeros(d),
            w_k: Array2::zeros((d, d)),
            b_k: Array1::zeros(d),
            w_v: Array2::zeros((d, d)),
            b_v: Array1::zeros(d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gain: Array1::zeros(d),
            ln2_bias: Array1::zeros(d),
            w_ff1: Array2::zeros((d, d_ff)),
            b_ff1: Array1::zeros(d_ff),
            w_ff2: Array2::zeros((d_ff, d)),
            b_ff2: Array1::zeros(d),
        }
    }

    fn named(&self, l: usize) -> Vec<TensorRef<'_>> {
        let p = |n: &str| format!("layers.{l}.{n}");
        vec![
            tensor_ref(p("ln1_gain"), &self.ln1_gain),
            tensor_ref(p("ln1_bias"), &self.ln1_bias),
            tensor_ref(p("w_q"), &self.w_q),
            tensor_ref(p("b_q"), &self.b_q),
            tensor_ref(p("w_k"), &self.w_k),
            tensor_ref(p("b_k"), &self.b_k),
            tensor_ref(p("w_v"), &self.w_v),
            tensor_ref(p("b_v"), &self.b_v),
            tensor_ref(p("w_o"), &self.w_o),
            tensor_ref(p("b_o"), &self.b_o),
            tensor_ref(p("ln2_gain"), &self.ln2_gain),
            tensor_ref(p("ln2_bias"), &self.ln2_bias),
            tensor_ref(p("w_ff1"), &self.w_ff1),
            tensor_ref(p("b_ff1"), &self.b_ff1),
            tensor_ref(p("w_ff2"), &self.w_ff2),
            tensor_ref(p("b_ff2"), &self.b_ff2),
        ]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            slice_mut_of(&mut self.ln1_gain),
            slice_mut_of(&mut self.ln1_bias),
            slice_mut_of(&mut self.w_q),
            slice_mut_of(&mut self.b_q),
            slice_mut_of(&mut self.w_k),
            slice_mut_of(&mut self.b_k),
            slice_mut_of(&mut self.w_v),
            slice_mut_of(&mut self.b_v),
            slice_mut_of(&mut self.w_o),
            slice_mut_of(&mut self.b_o),
            slice_mut_of(&mut self.ln2_gain),
            slice_mut_of(&mut self.ln2_bias),
            slice_mut_of(&mut self.w_ff1),
            slice_mut_of(&mut self.b_ff1),
            slice_mut_of(&mut self.w_ff2),
            slice_mut_of(&mut self.b_ff2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    /// `V x d`; row `i` is `emb(i)`.
    pub token_emb: Array2<f64>,
    /// `P x d`.
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerParams>,
    pub lnf_gain: Array1<f64>,
    pub lnf_bias: Array1<f64>,
    /// `d x V`.
    pub lm_head: Array2<f64>,
}

impl TransformerParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        Self {
            token_emb: Array2::zeros((cfg.vocab_size, d)),
            pos_emb: Array2::zeros((cfg.max_positions, d)),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams::zeros(d, cfg.d_ff))
                .collect(),
            lnf_gain: Array1::zeros(d),
            lnf_bias: Array1::zeros(d),
            lm_head: Array2::zeros((d, cfg.vocab_size)),
        }
    }

    /// Normal(0, init_std) weights, zero biases, unit norm gains.
    pub fn init(cfg: &ModelConfig, rng: &mut dyn RngCore) -> Self {
        let mut p = Self::zeros(cfg);
        let normal = Normal::new(0.0, cfg.init_std).expect("init_std is a valid deviation");
        let mut fill = |a: &mut Array2<f64>| a.iter_mut().for_each(|x| *x = normal.sample(rng));
        fill(&mut p.token_emb);
        fill(&mut p.pos_emb);
        for layer in &mut p.layers {
            fill(&mut layer.w_q);
            fill(&mut layer.w_k);
            fill(&mut layer.w_v);
            fill(&mut layer.w_o);
            fill(&mut layer.w_ff1);
            fill(&mut layer.w_ff2);
            layer.ln1_gain.fill(1.0);
            layer.ln2_gain.fill(1.0);
        }
        fill(&mut p.lm_head);
        p.lnf_gain.fill(1.0);
        if cfg.precision == Precision::F32 {
            p.round_to_f32();
        }
        p
    }
}

impl Parameters for TransformerParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = vec![
            tensor_ref("token_emb", &self.token_emb),
            tensor_ref("pos_emb", &self.pos_emb),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(l));
        }
        out.push(tensor_ref("lnf_gain", &self.lnf_gain));
        out.push(tensor_ref("lnf_bias", &self.lnf_bias));
        out.push(tensor_ref("lm_head", &self.lm_head));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = vec![
            slice_mut_of(&mut self.token_emb),
            slice_mut_of(&mut self.pos_emb),
        ];
        for layer in &mut self.layers {
            out.extend(layer.slices_mut());
        }
        out.push(slice_mut_of(&mut self.lnf_gain));
        out.push(slice_mut_of(&mut self.lnf_bias));
        out.push(slice_mut_of(&mut self.lm_head));
        out
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    ln1: NormCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    ctx: Array2<f64>,
    attn_drop: Option<Array2<f64>>,
    ln2: NormCache,
    b: Array2<f64>,
    pre_act: Array2<f64>,
    act: Array2<f64>,
    ffn_drop: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
struct Cache {
    layers: Vec<LayerCache>,
    lnf: NormCache,
}

/// Result of a forward pass over one sequence.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub token_ids: Vec<usize>,
    pub mask_mode: MaskMode,
    /// Residual stream entering each block, plus the final block output;
    /// element 0 is the input embedding `tok + pos`.
    pub hidden: Vec<Array2<f64>>,
    /// Final normalized states, one `d_model` row per position.
    pub states: Array2<f64>,
    /// `n x V` language-model logits.
    pub logits: Array2<f64>,
    cache: Option<Cache>,
}

impl ForwardTrace {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

/// Upstream gradients flowing into a trace.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads {
    /// Gradient with respect to `states`, `n x d`.
    pub d_states: Option<Array2<f64>>,
    /// Gradient with respect to `logits`, `n x V`.
    pub d_logits: Option<Array2<f64>>,
}

pub struct BackwardOutput {
    pub grads: TransformerParams,
    /// Gradient with respect to the input embedding of each position.
    pub d_inputs: Array2<f64>,
}

#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub cache: bool,
    /// Enables dropout when the config asks for it.
    pub rng: Option<&'a mut dyn RngCore>,
}

impl ForwardOptions<'_> {
    pub fn cached() -> Self {
        Self {
            cache: true,
            rng: None,
        }
    }
}

fn layer_norm(x: &Array2<f64>, gain: &Array1<f64>, bias: &Array1<f64>) -> (Array2<f64>, NormCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, NormCache { xhat, inv_std })
}

/// Returns `(dx, dgain, dbias)`.
fn layer_norm_backward(
    dy: &Array2<f64>,
    gain: &Array1<f64>,
    cache: &NormCache,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let d = dy.ncols() as f64;
    let dgain = (dy * &cache.xhat).sum_axis(Axis(0));
    let dbias = dy.sum_axis(Axis(0));
    let dxhat = dy * gain;
    let mut dx = Array2::zeros(dy.dim());
    for i in 0..dy.nrows() {
        let g = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_g = g.sum() / d;
        let mean_gx = g.dot(&xh) / d;
        let inv = cache.inv_std[i];
        let mut out = dx.row_mut(i);
        for j in 0..g.len() {
            out[j] = inv * (g[j] - mean_g - xh[j] * mean_gx);
        }
    }
    (dx, dgain, dbias)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn dropout_mask(shape: (usize, usize), p: f64, rng: &mut dyn RngCore) -> Array2<f64> {
    let keep = 1.0 / (1.0 - p);
    Array2::from_shape_simple_fn(shape, || if rng.random::<f64>() < p { 0.0 } else { keep })
}

fn attention_allowed(mode: MaskMode, ids: &[usize], i: usize, j: usize) -> bool {
    if i == j {
        return true;
    }
    if mode == MaskMode::Causal && j > i {
        return false;
    }
    ids[j] != PAD_ID
}

/// Runs the encoder over one token sequence.
pub fn forward(
    params: &TransformerParams,
    cfg: &ModelConfig,
    token_ids: &[usize],
    opts: ForwardOptions<'_>,
) -> Result<ForwardTrace> {
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::Validation("empty input sequence".into()));
    }
    if n > cfg.max_positions {
        return Err(Error::TooLong {
            len: n,
            max: cfg.max_positions,
        });
    }
    if let Some(&id) = token_ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    let ForwardOptions {
        cache: want_cache,
        mut rng,
    } = opts;
    let dropout = if cfg.dropout > 0.0 {
        rng.as_mut().map(|_| cfg.dropout)
    } else {
        None
    };

    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = Array2::zeros((n, d));
    for (i, &id) in token_ids.iter().enumerate() {
        let row = &params.token_emb.row(id) + &params.pos_emb.row(i);
        x.row_mut(i).assign(&row);
    }
    let mut hidden = vec![x.clone()];
    let mut layer_caches = Vec::with_capacity(params.layers.len());

    for layer in &params.layers {
        let (a, ln1) = layer_norm(&x, &layer.ln1_gain, &layer.ln1_bias);
        let q = a.dot(&layer.w_q) + &layer.b_q;
        let k = a.dot(&layer.w_k) + &layer.b_k;
        let v = a.dot(&layer.w_v) + &layer.b_v;
        let mut ctx = Array2::zeros((n, d));
        let mut probs = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let mut sc = qh.dot(&kh.t()) * scale;
            for i in 0..n {
                let mut row = sc.row_mut(i);
                for j in 0..n {
                    if !attention_allowed(cfg.mask_mode, token_ids, i, j) {
                        row[j] = f64::NEG_INFINITY;
                    }
                }
                softmax_in_place(row.as_slice_mut().expect("contiguous row"));
            }
            ctx.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
            probs.push(sc);
        }
        let mut attn_out = ctx.dot(&layer.w_o) + &layer.b_o;
        let attn_drop = match (dropout, rng.as_mut()) {
            (Some(p), Some(r)) => {
                let m = dropout_mask((n, d), p, &mut **r);
                attn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &attn_out;

        let (b, ln2) = layer_norm(&x, &layer.ln2_gain, &layer.ln2_bias);
        let pre_act = b.dot(&layer.w_ff1) + &layer.b_ff1;
        let act = pre_act.mapv(gelu);
        let mut ffn_out = act.dot(&layer.w_ff2) + &layer.b_ff2;
        let ffn_drop = match (dropout, rng.as_mut()) {
            (Some(p), Some(r)) => {
                let m = dropout_mask((n, d), p, &mut **r);
                ffn_out *= &m;
                Some(m)
            }
            _ => None,
        };
        x += &ffn_out;
        hidden.push(x.clone());

        if want_cache {
            layer_caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                ctx,
                attn_drop,
                ln2,
                b,
                pre_act,
                act,
                ffn_drop,
            });
        }
    }

    let (states, lnf) = layer_norm(&x, &params.lnf_gain, &params.lnf_bias);
    let logits = states.dot(&params.lm_head);
    Ok(ForwardTrace {
        token_ids: token_ids.to_vec(),
        mask_mode: cfg.mask_mode,
        hidden,
        states,
        logits,
        cache: want_cache.then_some(Cache {
            layers: layer_caches,
            lnf,
        }),
    })
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in row.iter_mut() {
        *x = if *x == f64::NEG_INFINITY {
            0.0
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

/// Exact reverse-mode gradients for every parameter and input embedding.
pub fn backward(
    params: &TransformerParams,
    cfg: &ModelConfig,
    trace: &ForwardTrace,
    upstream: &OutputGrads,
) -> Result<BackwardOutput> {
    let cache = trace.cache.as_ref().ok_or(Error::MissingCache)?;
    let n = trace.len();
    let d = cfg.d_model;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut grads = TransformerParams::zeros(cfg);

    let mut d_states = match &upstream.d_states {
        Some(g) if g.dim() != (n, d) => {
            return Err(Error::Shape(format!(
                "d_states {:?} vs ({n}, {d})",
                g.dim()
            )))
        }
        Some(g) => g.clone(),
        None => Array2::zeros((n, d)),
    };
    if let Some(dl) = &upstream.d_logits {
        if dl.dim() != trace.logits.dim() {
            return Err(Error::Shape(format!(
                "d_logits {:?} vs {:?}",
                dl.dim(),
                trace.logits.dim()
            )));
        }
        grads.lm_head = trace.states.t().dot(dl);
        d_states += &dl.dot(&params.lm_head.t());
    }

    let (mut dx, dg, db) = layer_norm_backward(&d_states, &params.lnf_gain, &cache.lnf);
    grads.lnf_gain = dg;
    grads.lnf_bias = db;

    for (l, (layer, lc)) in params.layers.iter().zip(&cache.layers).enumerate().rev() {
        let g = &mut grads.layers[l];

        // x_out = x_mid + drop(gelu(LN2(x_mid) W1 + b1) W2 + b2)
        let mut d_ffn = dx.clone();
        if let Some(m) = &lc.ffn_drop {
            d_ffn *= m;
        }
        g.w_ff2 = lc.act.t().dot(&d_ffn);
        g.b_ff2 = d_ffn.sum_axis(Axis(0));
        let mut d_pre = d_ffn.dot(&layer.w_ff2.t());
        d_pre.zip_mut_with(&lc.pre_act, |dv, &u| *dv *= gelu_grad(u));
        g.w_ff1 = lc.b.t().dot(&d_pre);
        g.b_ff1 = d_pre.sum_axis(Axis(0));
        let d_b = d_pre.dot(&layer.w_ff1.t());
        let (d_mid, dg2, db2) = layer_norm_backward(&d_b, &layer.ln2_gain, &lc.ln2);
        g.ln2_gain = dg2;
        g.ln2_bias = db2;
        dx += &d_mid;

        // x_mid = x_in + drop(Attn(LN1(x_in)) W_o + b_o)
        let mut d_attn = dx.clone();
        if let Some(m) = &lc.attn_drop {
            d_attn *= m;
        }
        g.w_o = lc.ctx.t().dot(&d_attn);
        g.b_o = d_attn.sum_axis(Axis(0));
        let d_ctx = d_attn.dot(&layer.w_o.t());
        let mut dq = Array2::zeros((n, d));
        let mut dk = Array2::zeros((n, d));
        let mut dv = Array2::zeros((n, d));
        for (h, p) in lc.probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_ctx_h = d_ctx.slice(cols);
            dv.slice_mut(cols).assign(&p.t().dot(&d_ctx_h));
            let dp = d_ctx_h.dot(&lc.v.slice(cols).t());
            let mut dsc = Array2::zeros((n, n));
            for i in 0..n {
                let pr = p.row(i);
                let dpr = dp.row(i);
                let dot = pr.dot(&dpr);
                let mut out = dsc.row_mut(i);
                for j in 0..n {
                    out[j] = pr[j] * (dpr[j] - dot) * scale;
                }
            }
            dq.slice_mut(cols).assign(&dsc.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&dsc.t().dot(&lc.q.slice(cols)));
        }
        g.w_q = lc.a.t().dot(&dq);
        g.b_q = dq.sum_axis(Axis(0));
        g.w_k = lc.a.t().dot(&dk);
        g.b_k = dk.sum_axis(Axis(0));
        g.w_v = lc.a.t().dot(&dv);
        g.b_v = dv.sum_axis(Axis(0));
        let d_a = dq.dot(&layer.w_q.t()) + dk.dot(&layer.w_k.t()) + dv.dot(&layer.w_v.t());
        let (d_in, dg1, db1) = layer_norm_backward(&d_a, &layer.ln1_gain, &lc.ln1);
        g.ln1_gain = dg1;
        g.ln1_bias = db1;
        dx += &d_in;
    }

    for (i, &id) in trace.token_ids.iter().enumerate() {
        let row = dx.row(i);
        let mut t = grads.token_emb.row_mut(id);
        t += &row;
        let mut p = grads.pos_emb.row_mut(i);
        p += &row;
    }
    Ok(BackwardOutput {
        grads,
        d_inputs: dx,
    })
}

/// Mean next-token cross-entropy and its gradient with respect to logits.
#[derive(Debug, Clone)]
pub struct LmLoss {
    pub loss: f64,
    pub d_logits: Array2<f64>,
    /// Number of scored positions.
    pub targets: usize,
}

/// Next-token loss of a causal trace; PAD targets are ignored.
pub fn lm_loss(trace: &ForwardTrace, token_ids: &[usize]) -> Result<LmLoss> {
    if trace.mask_mode != MaskMode::Causal {
        return Err(Error::UnsupportedObjective(
            "next-token loss requires causal masking".into(),
        ));
    }
    if token_ids.len() != trace.logits.nrows() {
        return Err(Error::Shape(format!(
            "{} token ids for {} logit rows",
            token_ids.len(),
            trace.logits.nrows()
        )));
    }
    Ok(lm_loss_from_logits(&trace.logits, token_ids))
}

pub fn lm_loss_from_logits(logits: &Array2<f64>, token_ids: &[usize]) -> LmLoss {
    let n = token_ids.len();
    let mut d_logits = Array2::zeros(logits.dim());
    let targets: Vec<(usize, usize)> = (0..n.saturating_sub(1))
        .map(|i| (i, token_ids[i + 1]))
        .filter(|&(_, t)| t != PAD_ID)
        .collect();
    if targets.is_empty() {
        return LmLoss {
            loss: 0.0,
            d_logits,
            targets: 0,
        };
    }
    let weight = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    for &(i, target) in &targets {
        let (l, grad) = cross_entropy(logits.row(i), target);
        loss += l * weight;
        d_logits.row_mut(i).assign(&(grad * weight));
    }
    LmLoss {
        loss,
        d_logits,
        targets: targets.len(),
    }
}

/// `-log softmax(z)[target]` and its gradient `softmax(z) - onehot`.
pub fn cross_entropy(z: ArrayView1<f64>, target: usize) -> (f64, Array1<f64>) {
    let mut p = z.to_vec();
    let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + p.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    softmax_in_place(&mut p);
    let mut grad = Array1::from(p);
    grad[target] -= 1.0;
    (lse - z[target], grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(mode: MaskMode) -> ModelConfig {
        ModelConfig {
            vocab_size: 13,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 12,
            max_positions: 16,
            mask_mode: mode,
            dropout: 0.0,
            precision: Precision::F64,
            init_std: 0.3,
        }
    }

    fn setup(mode: MaskMode, seed: u64) -> (ModelConfig, TransformerParams) {
        let c = cfg(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = TransformerParams::init(&c, &mut rng);
        // Non-trivial norm parameters so every group is exercised.
        for layer in &mut p.layers {
            layer.ln1_gain.mapv_inplace(|_| rng.random_range(0.5..1.5));
            layer.ln2_bias.mapv_inplace(|_| rng.random_range(-0.2..0.2));
            layer.b_q.mapv_inplace(|_| rng.random_range(-0.2..0.2));
        }
        (c, p)
    }

    #[test]
    fn single_token_gives_single_state() {
        let (c, p) = setup(MaskMode::Causal, 1);
        let tr = forward(&p, &c, &[5], ForwardOptions::default()).unwrap();
        assert_eq!(tr.states.dim(), (1, 8));
        assert_eq!(tr.hidden.len(), 3);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (c, p) = setup(MaskMode::Causal, 1);
        assert!(matches!(
            forward(&p, &c, &[1; 17], ForwardOptions::default()),
            Err(Error::TooLong { .. })
        ));
        assert!(matches!(
            forward(&p, &c, &[13], ForwardOptions::default()),
            Err(Error::TokenOutOfRange { id: 13, .. })
        ));
        let tr = forward(&p, &c, &[5, 6], ForwardOptions::default()).unwrap();
        assert!(matches!(
            backward(&p, &c, &tr, &OutputGrads::default()),
            Err(Error::MissingCache)
        ));
    }

    #[test]
    fn causal_prefix_is_unchanged_by_later_edits() {
        let (c, p) = setup(MaskMode::Causal, 2);
        let a = [5, 6, 7, 8, 9, 10];
        let mut b = a;
        b[3] = 12;
        let ta = forward(&p, &c, &a, ForwardOptions::default()).unwrap();
        let tb = forward(&p, &c, &b, ForwardOptions::default()).unwrap();
        assert_eq!(ta.states.slice(s![..3, ..]), tb.states.slice(s![..3, ..]));
        assert_ne!(ta.states.row(3), tb.states.row(3));
    }

    #[test]
    fn uniform_logits_give_log_vocab() {
        let logits = Array2::zeros((4, 9));
        let out = lm_loss_from_logits(&logits, &[5, 6, 7, 8]);
        assert!((out.loss - 9f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_zero_loss() {
        let ids = [5, 6, 7];
        let mut logits = Array2::zeros((3, 9));
        logits[[0, 6]] = 1e6;
        logits[[1, 7]] = 1e6;
        assert!(lm_loss_from_logits(&logits, &ids).loss.abs() < 1e-12);
    }

    #[test]
    fn pad_targets_are_ignored() {
        let mut logits = Array2::zeros((3, 9));
        logits[[1, 3]] = 50.0;
        let out = lm_loss_from_logits(&logits, &[5, 6, PAD_ID]);
        assert_eq!(out.targets, 1);
        assert!((out.loss - 9f64.ln()).abs() < 1e-12);
        assert!(out.d_logits.row(1).iter().all(|&g| g == 0.0));
    }

    #[test]
    fn bidirectional_lm_loss_is_unsupported() {
        let (c, p) = setup(MaskMode::Bidirectional, 3);
        let tr = forward(&p, &c, &[5, 6], ForwardOptions::default()).unwrap();
        assert!(matches!(
            lm_loss(&tr, &[5, 6]),
            Err(Error::UnsupportedObjective(_))
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let (c, p) = setup(MaskMode::Causal, 4);
        let tr = forward(&p, &c, &[5, 6, 7], ForwardOptions::cached()).unwrap();
        let out = backward(&p, &c, &tr, &OutputGrads::default()).unwrap();
        assert_eq!(out.grads.l2_norm(), 0.0);
    }

    #[test]
    fn unused_embedding_rows_get_no_gradient() {
        let (c, p) = setup(MaskMode::Causal, 5);
        let ids = [5, 6, 7, 5];
        let tr = forward(&p, &c, &ids, ForwardOptions::cached()).unwrap();
        let lm = lm_loss(&tr, &ids).unwrap();
        let out = backward(
            &p,
            &c,
            &tr,
            &OutputGrads {
                d_states: None,
                d_logits: Some(lm.d_logits),
            },
        )
        .unwrap();
        for row in [0usize, 1, 2, 3, 4, 8, 9, 10, 11, 12] {
            assert!(
                out.grads.token_emb.row(row).iter().all(|&g| g == 0.0),
                "row {row}"
            );
        }
        assert!(out.grads.token_emb.row(5).iter().any(|&g| g != 0.0));
    }

    fn fd_check(mode: MaskMode, seed: u64) {
        let (c, p) = setup(mode, seed);
        let ids = [5, 9, 6, 12, 7, 5, 8, 10, 11];
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let target =
            Array2::from_shape_simple_fn((ids.len(), c.d_model), || rng.random_range(-1.0..1.0));
        // loss = sum(states * target) + lm loss (causal only)
        let loss_of = |p: &TransformerParams| {
            let tr = forward(p, &c, &ids, ForwardOptions::default()).unwrap();
            let mut l = (&tr.states * &target).sum();
            if mode == MaskMode::Causal {
                l += lm_loss(&tr, &ids).unwrap().loss;
            }
            l
        };
        let tr = forward(&p, &c, &ids, ForwardOptions::cached()).unwrap();
        let d_logits = (mode == MaskMode::Causal).then(|| lm_loss(&tr, &ids).unwrap().d_logits);
        let out = backward(
            &p,
            &c,
            &tr,
            &OutputGrads {
                d_states: Some(target.clone()),
                d_logits,
            },
        )
        .unwrap();
        let analytic: Vec<Vec<f64>> = out
            .grads
            .tensors()
            .iter()
            .map(|t| t.data.to_vec())
            .collect();
        let names: Vec<String> = out.grads.tensors().iter().map(|t| t.name.clone()).collect();
        let eps = 1e-5;
        let mut probe = p.clone();
        for (ti, grad) in analytic.iter().enumerate() {
            for (j, &g) in grad.iter().enumerate() {
                let orig = probe.tensors()[ti].data[j];
                probe.tensors_mut()[ti][j] = orig + eps;
                let lp = loss_of(&probe);
                probe.tensors_mut()[ti][j] = orig - eps;
                let lm = loss_of(&probe);
                probe.tensors_mut()[ti][j] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                let tol = 1e-4 * fd.abs().max(g.abs()) + 1e-8;
                assert!(
                    (fd - g).abs() <= tol,
                    "{}[{j}]: fd {fd} vs analytic {g}",
                    names[ti]
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_causal() {
        fd_check(MaskMode::Causal, 7);
    }

    #[test]
    fn gradients_match_finite_differences_bidirectional() {
        fd_check(MaskMode::Bidirectional, 8);
    }

    #[test]
    fn permutation_equivariance_without_positions() {
        let (c, mut p) = setup(MaskMode::Bidirectional, 9);
        p.pos_emb.fill(0.0);
        let ids = [5, 6, 7, 8, 9];
        let perm = [3, 0, 4, 1, 2];
        let permuted: Vec<usize> = perm.iter().map(|&i| ids[i]).collect();
        let a = forward(&p, &c, &ids, ForwardOptions::default()).unwrap();
        let b = forward(&p, &c, &permuted, ForwardOptions::default()).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            for j in 0..c.d_model {
                assert!((a.states[[i, j]] - b.states[[k, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropout_only_applies_with_rng() {
        let (mut c, p) = setup(MaskMode::Causal, 10);
        c.dropout = 0.5;
        let ids = [5, 6, 7, 8];
        let a = forward(&p, &c, &ids, ForwardOptions::default()).unwrap();
        let b = forward(&p, &c, &ids, ForwardOptions::default()).unwrap();
        assert_eq!(a.states, b.states);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = forward(
            &p,
            &c,
            &ids,
            ForwardOptions {
                cache: true,
                rng: Some(&mut rng),
            },
        )
        .unwrap();
        assert_ne!(a.states, d.states);
    }
}
