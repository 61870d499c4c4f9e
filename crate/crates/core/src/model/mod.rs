//! Tiny decoder-only transformer used three ways: policy (LM head + value
//! head), reward model (scalar head), and the shared backbone both inherit.
//!
//! Parameters live in one flat `Vec<f32>` in a fixed documented order (see
//! `checkpoint`); all arithmetic runs in f64 for gradient accuracy, and f32
//! is only the storage format. Layers: learned token + position embeddings,
//! pre-norm blocks (causal attention, GELU MLP), final layernorm.

pub mod checkpoint;
pub mod gradcheck;
pub mod optim;
pub mod sampler;

use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSeq, BOS, SEP};
use crate::seeding;
use rand::Rng;

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("context length {len} exceeds max_context {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("non-finite {what} (param l2 {l2:.3e}, max abs {max_abs:.3e})")]
    NonFinite { what: String, l2: f64, max_abs: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: u32,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_context: usize,
    /// Kept for completeness; must be 0 (the model is deterministic).
    pub dropout: f64,
}

impl ModelConfig {
    /// post cap + response cap + BOS and SEP; EOS is only ever a prediction
    /// target, never an input token, so it needs no slot.
    pub fn for_caps(vocab_size: u32, post_cap: usize, response_cap: usize) -> Self {
        ModelConfig {
            vocab_size,
            d_model: 32,
            n_layers: 2,
            n_heads: 2,
            max_context: post_cap + response_cap + 2,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 {
            return Err(ModelError::BadConfig("n_layers must be >= 1".into()));
        }
        if self.max_context < 4 {
            return Err(ModelError::BadConfig(format!(
                "max_context {} < 4",
                self.max_context
            )));
        }
        if self.vocab_size < 5 {
            return Err(ModelError::BadConfig("vocab_size must cover specials".into()));
        }
        if self.dropout != 0.0 {
            return Err(ModelError::BadConfig("dropout must be 0".into()));
        }
        Ok(())
    }

    fn ff(&self) -> usize {
        4 * self.d_model
    }

    fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Offsets of one block's parameters inside the flat vector.
#[derive(Clone, Copy, Debug)]
pub(crate) struct BlockOff {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    pub tok_emb: usize,
    pub pos_emb: usize,
    pub blocks: Vec<BlockOff>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub backbone_len: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let ff = cfg.ff();
        let v = cfg.vocab_size as usize;
        let mut at = 0usize;
        let mut take = |n: usize| {
            let here = at;
            at += n;
            here
        };
        let tok_emb = take(v * d);
        let pos_emb = take(cfg.max_context * d);
        let mut blocks = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            blocks.push(BlockOff {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(d * ff),
                b1: take(ff),
                w2: take(ff * d),
                b2: take(d),
            });
        }
        let lnf_g = take(d);
        let lnf_b = take(d);
        Layout { tok_emb, pos_emb, blocks, lnf_g, lnf_b, backbone_len: at }
    }
}

// --- forward/backward plumbing ---

/// Everything the backward pass needs, cached per sequence.
pub(crate) struct Trace {
    t: usize,
    ids: Vec<u32>,
    blocks: Vec<BlockTrace>,
    lnf_xhat: Vec<f64>,
    lnf_rstd: Vec<f64>,
    /// Final hidden states after the last layernorm, `t * d`.
    pub y: Vec<f64>,
}

struct BlockTrace {
    ln1_xhat: Vec<f64>,
    ln1_rstd: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att: Vec<f64>, // [head][query][key], causal entries only nonzero
    mix: Vec<f64>, // concatenated head outputs, pre-projection
    ln2_xhat: Vec<f64>,
    ln2_rstd: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

fn layer_norm(
    x: &[f64],
    t: usize,
    d: usize,
    g: &[f32],
    b: &[f32],
    out: &mut Vec<f64>,
    xhat: &mut Vec<f64>,
    rstd: &mut Vec<f64>,
) {
    out.resize(t * d, 0.0);
    xhat.resize(t * d, 0.0);
    rstd.resize(t, 0.0);
    for i in 0..t {
        let row = &x[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = rs;
        for c in 0..d {
            let xh = (row[c] - mean) * rs;
            xhat[i * d + c] = xh;
            out[i * d + c] = xh * g[c] as f64 + b[c] as f64;
        }
    }
}

/// dx for a layernorm row given dy, using cached xhat and rstd.
fn layer_norm_backward(
    dy: &[f64],
    xhat: &[f64],
    rstd: &[f64],
    g: &[f32],
    t: usize,
    d: usize,
    dx: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..t {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..d {
            let dyv = dy[i * d + c];
            let xh = xhat[i * d + c];
            dg[c] += dyv * xh;
            db[c] += dyv;
            let dxh = dyv * g[c] as f64;
            sum_dxhat += dxh;
            sum_dxhat_xhat += dxh * xh;
        }
        let inv_d = 1.0 / d as f64;
        for c in 0..d {
            let dxh = dy[i * d + c] * g[c] as f64;
            let xh = xhat[i * d + c];
            dx[i * d + c] +=
                rstd[i] * (dxh - inv_d * sum_dxhat - xh * inv_d * sum_dxhat_xhat);
        }
    }
}

/// y[t, out] = x[t, in] * w[in, out] + b[out]; w row-major by input index.
fn linear(x: &[f64], t: usize, n_in: usize, n_out: usize, w: &[f32], b: Option<&[f32]>, y: &mut Vec<f64>) {
    y.clear();
    y.resize(t * n_out, 0.0);
    for i in 0..t {
        let xi = &x[i * n_in..(i + 1) * n_in];
        let yi = &mut y[i * n_out..(i + 1) * n_out];
        if let Some(b) = b {
            for o in 0..n_out {
                yi[o] = b[o] as f64;
            }
        }
        for (c, &xv) in xi.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            let wrow = &w[c * n_out..(c + 1) * n_out];
            for o in 0..n_out {
                yi[o] += xv * wrow[o] as f64;
            }
        }
    }
}

fn linear_backward(
    x: &[f64],
    dy: &[f64],
    t: usize,
    n_in: usize,
    n_out: usize,
    w: &[f32],
    dx: &mut [f64],
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) {
    for i in 0..t {
        let xi = &x[i * n_in..(i + 1) * n_in];
        let dyi = &dy[i * n_out..(i + 1) * n_out];
        for c in 0..n_in {
            let wrow = &w[c * n_out..(c + 1) * n_out];
            let dwrow = &mut dw[c * n_out..(c + 1) * n_out];
            let xv = xi[c];
            let mut acc = 0.0;
            for o in 0..n_out {
                let g = dyi[o];
                acc += g * wrow[o] as f64;
                dwrow[o] += g * xv;
            }
            dx[i * n_in + c] += acc;
        }
    }
    if let Some(db) = db {
        for i in 0..t {
            let dyi = &dy[i * n_out..(i + 1) * n_out];
            for o in 0..n_out {
                db[o] += dyi[o];
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let th = u.tanh();
    let sech2 = 1.0 - th * th;
    0.5 * (1.0 + th) + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn check_tokens(ids: &[u32], cfg: &ModelConfig) -> Result<(), ModelError> {
    if ids.len() > cfg.max_context {
        return Err(ModelError::ContextOverflow { len: ids.len(), max: cfg.max_context });
    }
    if let Some(&id) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab_size });
    }
    Ok(())
}

/// Runs the backbone and caches activations; `y` holds final hidden states.
pub(crate) fn backbone_forward(
    params: &[f32],
    cfg: &ModelConfig,
    lay: &Layout,
    ids: &[u32],
) -> Trace {
    let t = ids.len();
    let d = cfg.d_model;
    let ff = cfg.ff();
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = vec![0.0f64; t * d];
    for (i, &id) in ids.iter().enumerate() {
        let te = &params[lay.tok_emb + id as usize * d..][..d];
        let pe = &params[lay.pos_emb + i * d..][..d];
        for c in 0..d {
            x[i * d + c] = te[c] as f64 + pe[c] as f64;
        }
    }

    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for off in &lay.blocks {
        let x_in = x.clone();
        let mut n1 = Vec::new();
        let mut ln1_xhat = Vec::new();
        let mut ln1_rstd = Vec::new();
        layer_norm(
            &x_in,
            t,
            d,
            &params[off.ln1_g..][..d],
            &params[off.ln1_b..][..d],
            &mut n1,
            &mut ln1_xhat,
            &mut ln1_rstd,
        );
        let mut q = Vec::new();
        let mut k = Vec::new();
        let mut v = Vec::new();
        linear(&n1, t, d, d, &params[off.wq..][..d * d], Some(&params[off.bq..][..d]), &mut q);
        linear(&n1, t, d, d, &params[off.wk..][..d * d], Some(&params[off.bk..][..d]), &mut k);
        linear(&n1, t, d, d, &params[off.wv..][..d * d], Some(&params[off.bv..][..d]), &mut v);

        let mut att = vec![0.0f64; nh * t * t];
        let mut mix = vec![0.0f64; t * d];
        for h in 0..nh {
            let hoff = h * hd;
            for i in 0..t {
                let arow = &mut att[h * t * t + i * t..][..t];
                let qi = &q[i * d + hoff..][..hd];
                let mut maxs = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[j * d + hoff..][..hd];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    arow[j] = s;
                    maxs = maxs.max(s);
                }
                let mut denom = 0.0;
                for j in 0..=i {
                    let e = (arow[j] - maxs).exp();
                    arow[j] = e;
                    denom += e;
                }
                for j in 0..=i {
                    arow[j] /= denom;
                }
                let mrow = &mut mix[i * d + hoff..][..hd];
                for j in 0..=i {
                    let a = arow[j];
                    let vj = &v[j * d + hoff..][..hd];
                    for c in 0..hd {
                        mrow[c] += a * vj[c];
                    }
                }
            }
        }

        let mut attn_out = Vec::new();
        linear(&mix, t, d, d, &params[off.wo..][..d * d], Some(&params[off.bo..][..d]), &mut attn_out);
        let mut x_mid = x_in.clone();
        for (xm, ao) in x_mid.iter_mut().zip(&attn_out) {
            *xm += ao;
        }

        let mut n2 = Vec::new();
        let mut ln2_xhat = Vec::new();
        let mut ln2_rstd = Vec::new();
        layer_norm(
            &x_mid,
            t,
            d,
            &params[off.ln2_g..][..d],
            &params[off.ln2_b..][..d],
            &mut n2,
            &mut ln2_xhat,
            &mut ln2_rstd,
        );
        let mut h_pre = Vec::new();
        linear(&n2, t, d, ff, &params[off.w1..][..d * ff], Some(&params[off.b1..][..ff]), &mut h_pre);
        let h_act: Vec<f64> = h_pre.iter().map(|&z| gelu(z)).collect();
        let mut mlp_out = Vec::new();
        linear(&h_act, t, ff, d, &params[off.w2..][..ff * d], Some(&params[off.b2..][..d]), &mut mlp_out);

        x = x_mid.clone();
        for (xo, mo) in x.iter_mut().zip(&mlp_out) {
            *xo += mo;
        }

        blocks.push(BlockTrace {
            ln1_xhat,
            ln1_rstd,
            q,
            k,
            v,
            att,
            mix,
            ln2_xhat,
            ln2_rstd,
            h_pre,
            h_act,
        });
    }

    let mut y = Vec::new();
    let mut lnf_xhat = Vec::new();
    let mut lnf_rstd = Vec::new();
    layer_norm(
        &x,
        t,
        d,
        &params[lay.lnf_g..][..d],
        &params[lay.lnf_b..][..d],
        &mut y,
        &mut lnf_xhat,
        &mut lnf_rstd,
    );

    Trace { t, ids: ids.to_vec(), blocks, lnf_xhat, lnf_rstd, y }
}

/// Simultaneous mutable views of a weight-gradient block and the bias (or
/// beta) block that the layout places directly after it.
fn grad_pair(
    grads: &mut [f64],
    w_off: usize,
    w_len: usize,
    b_off: usize,
    b_len: usize,
) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(b_off, w_off + w_len, "bias must follow its weight block");
    grads[w_off..b_off + b_len].split_at_mut(w_len)
}

/// Accumulates backbone gradients into `grads` given dL/dy.
pub(crate) fn backbone_backward(
    params: &[f32],
    cfg: &ModelConfig,
    lay: &Layout,
    trace: &Trace,
    dy: &[f64],
    grads: &mut [f64],
) {
    let t = trace.t;
    let d = cfg.d_model;
    let ff = cfg.ff();
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut dx = vec![0.0f64; t * d];
    let (g_lnf, b_lnf) = grad_pair(grads, lay.lnf_g, d, lay.lnf_b, d);
    layer_norm_backward(
        dy,
        &trace.lnf_xhat,
        &trace.lnf_rstd,
        &params[lay.lnf_g..][..d],
        t,
        d,
        &mut dx,
        g_lnf,
        b_lnf,
    );

    for (off, bt) in lay.blocks.iter().zip(&trace.blocks).rev() {
        // x_out = x_mid + mlp(ln2(x_mid)); dx arrives as d(x_out).
        let d_mlp_out = dx.clone();
        let mut d_h_act = vec![0.0f64; t * ff];
        let mut d_x_mid = dx; // residual path
        let (g_w2, g_b2) = grad_pair(grads, off.w2, ff * d, off.b2, d);
        linear_backward(
            &bt.h_act,
            &d_mlp_out,
            t,
            ff,
            d,
            &params[off.w2..][..ff * d],
            &mut d_h_act,
            g_w2,
            Some(g_b2),
        );
        let mut d_h_pre = vec![0.0f64; t * ff];
        for i in 0..t * ff {
            d_h_pre[i] = d_h_act[i] * gelu_grad(bt.h_pre[i]);
        }
        // n2 must be recomputed for the W1 weight gradient.
        let mut n2 = vec![0.0f64; t * d];
        for i in 0..t * d {
            n2[i] = bt.ln2_xhat[i] * params[off.ln2_g + i % d] as f64
                + params[off.ln2_b + i % d] as f64;
        }
        let mut d_n2 = vec![0.0f64; t * d];
        let (g_w1, g_b1) = grad_pair(grads, off.w1, d * ff, off.b1, ff);
        linear_backward(
            &n2,
            &d_h_pre,
            t,
            d,
            ff,
            &params[off.w1..][..d * ff],
            &mut d_n2,
            g_w1,
            Some(g_b1),
        );
        let (g_ln2g, g_ln2b) = grad_pair(grads, off.ln2_g, d, off.ln2_b, d);
        layer_norm_backward(
            &d_n2,
            &bt.ln2_xhat,
            &bt.ln2_rstd,
            &params[off.ln2_g..][..d],
            t,
            d,
            &mut d_x_mid,
            g_ln2g,
            g_ln2b,
        );

        // x_mid = x_in + wo(mix) + bo
        let d_attn_out = d_x_mid.clone();
        let mut d_x_in = d_x_mid; // residual path
        let mut d_mix = vec![0.0f64; t * d];
        let (g_wo, g_bo) = grad_pair(grads, off.wo, d * d, off.bo, d);
        linear_backward(
            &bt.mix,
            &d_attn_out,
            t,
            d,
            d,
            &params[off.wo..][..d * d],
            &mut d_mix,
            g_wo,
            Some(g_bo),
        );

        let mut d_q = vec![0.0f64; t * d];
        let mut d_k = vec![0.0f64; t * d];
        let mut d_v = vec![0.0f64; t * d];
        for h in 0..nh {
            let hoff = h * hd;
            for i in 0..t {
                let arow = &bt.att[h * t * t + i * t..][..t];
                let dmrow = &d_mix[i * d + hoff..][..hd];
                // datt and softmax backward over keys j <= i
                let mut datt = vec![0.0f64; i + 1];
                for j in 0..=i {
                    let vj = &bt.v[j * d + hoff..][..hd];
                    let mut acc = 0.0;
                    for c in 0..hd {
                        acc += dmrow[c] * vj[c];
                        // dv accumulated below to keep one pass per j
                    }
                    datt[j] = acc;
                    let dvj = &mut d_v[j * d + hoff..][..hd];
                    for c in 0..hd {
                        dvj[c] += arow[j] * dmrow[c];
                    }
                }
                let dot: f64 = (0..=i).map(|j| arow[j] * datt[j]).sum();
                let qi = &bt.q[i * d + hoff..][..hd];
                for j in 0..=i {
                    let ds = arow[j] * (datt[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &bt.k[j * d + hoff..][..hd];
                    let dqi = &mut d_q[i * d + hoff..][..hd];
                    for c in 0..hd {
                        dqi[c] += ds * kj[c];
                    }
                    let dkj = &mut d_k[j * d + hoff..][..hd];
                    for c in 0..hd {
                        dkj[c] += ds * qi[c];
                    }
                }
            }
        }

        let mut n1 = vec![0.0f64; t * d];
        for i in 0..t * d {
            n1[i] = bt.ln1_xhat[i] * params[off.ln1_g + i % d] as f64
                + params[off.ln1_b + i % d] as f64;
        }
        let mut d_n1 = vec![0.0f64; t * d];
        let (g_wq, g_bq) = grad_pair(grads, off.wq, d * d, off.bq, d);
        linear_backward(
            &n1,
            &d_q,
            t,
            d,
            d,
            &params[off.wq..][..d * d],
            &mut d_n1,
            g_wq,
            Some(g_bq),
        );
        let (g_wk, g_bk) = grad_pair(grads, off.wk, d * d, off.bk, d);
        linear_backward(
            &n1,
            &d_k,
            t,
            d,
            d,
            &params[off.wk..][..d * d],
            &mut d_n1,
            g_wk,
            Some(g_bk),
        );
        let (g_wv, g_bv) = grad_pair(grads, off.wv, d * d, off.bv, d);
        linear_backward(
            &n1,
            &d_v,
            t,
            d,
            d,
            &params[off.wv..][..d * d],
            &mut d_n1,
            g_wv,
            Some(g_bv),
        );
        let (g_ln1g, g_ln1b) = grad_pair(grads, off.ln1_g, d, off.ln1_b, d);
        layer_norm_backward(
            &d_n1,
            &bt.ln1_xhat,
            &bt.ln1_rstd,
            &params[off.ln1_g..][..d],
            t,
            d,
            &mut d_x_in,
            g_ln1g,
            g_ln1b,
        );

        dx = d_x_in;
    }

    for (i, &id) in trace.ids.iter().enumerate() {
        let dtok = &mut grads[lay.tok_emb + id as usize * d..][..d];
        for c in 0..d {
            dtok[c] += dx[i * d + c];
        }
        let dpos = &mut grads[lay.pos_emb + i * d..][..d];
        for c in 0..d {
            dpos[c] += dx[i * d + c];
        }
    }
}

fn init_backbone(params: &mut [f32], cfg: &ModelConfig, lay: &Layout, rng: &mut impl Rng) {
    let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
    use rand_distr::Distribution;
    let d = cfg.d_model;
    let ff = cfg.ff();
    let v = cfg.vocab_size as usize;
    let mut fill = |off: usize, n: usize| {
        for p in &mut params[off..off + n] {
            *p = normal.sample(rng) as f32;
        }
    };
    fill(lay.tok_emb, v * d);
    fill(lay.pos_emb, cfg.max_context * d);
    for off in lay.blocks.clone() {
        fill(off.wq, d * d);
        fill(off.wk, d * d);
        fill(off.wv, d * d);
        fill(off.wo, d * d);
        fill(off.w1, d * ff);
        fill(off.w2, ff * d);
    }
    for off in &lay.blocks {
        for c in 0..d {
            params[off.ln1_g + c] = 1.0;
            params[off.ln2_g + c] = 1.0;
        }
    }
    for c in 0..d {
        params[lay.lnf_g + c] = 1.0;
    }
}

/// `[BOS] post [SEP] response?` — the only input layout the models see.
pub(crate) fn assemble(post: &[u32], response: Option<&[u32]>) -> Vec<u32> {
    let mut ids = Vec::with_capacity(post.len() + response.map_or(0, |r| r.len()) + 2);
    ids.push(BOS);
    ids.extend_from_slice(post);
    ids.push(SEP);
    if let Some(r) = response {
        ids.extend_from_slice(r);
    }
    ids
}

/// Stable log-softmax of one logits row.
pub(crate) fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|z| (z - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|z| z - lse).collect()
}

pub struct PolicyModel {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub(crate) layout: Layout,
}

impl std::fmt::Debug for PolicyModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyModel")
            .field("config", &self.config)
            .field("n_params", &self.params.len())
            .finish()
    }
}

impl Clone for PolicyModel {
    fn clone(&self) -> Self {
        PolicyModel {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl PolicyModel {
    pub fn n_params(cfg: &ModelConfig) -> usize {
        let lay = Layout::new(cfg);
        let d = cfg.d_model;
        let v = cfg.vocab_size as usize;
        lay.backbone_len + d * v + d + 1
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<PolicyModel, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; Self::n_params(&config)];
        let mut rng = seeding::rng(seeding::mix(seed, seeding::SALT_INIT));
        init_backbone(&mut params, &config, &layout, &mut rng);
        // LM head random; value head zero so V starts at exactly 0.
        let normal = rand_distr::Normal::new(0.0, INIT_STD).expect("valid std");
        use rand_distr::Distribution;
        let lm = layout.backbone_len;
        let d = config.d_model;
        let v = config.vocab_size as usize;
        for p in &mut params[lm..lm + d * v] {
            *p = normal.sample(&mut rng) as f32;
        }
        Ok(PolicyModel { config, params, layout })
    }

    pub fn zeroed(config: ModelConfig) -> Result<PolicyModel, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0f32; Self::n_params(&config)];
        Ok(PolicyModel { config, params, layout })
    }

    pub(crate) fn lm_head_off(&self) -> usize {
        self.layout.backbone_len
    }

    /// First parameter index of the value head; everything below it is the
    /// shared trunk plus the language-model head.
    pub fn value_w_off(&self) -> usize {
        self.layout.backbone_len + self.config.d_model * self.config.vocab_size as usize
    }

    pub(crate) fn value_b_off(&self) -> usize {
        self.value_w_off() + self.config.d_model
    }

    pub(crate) fn trace(&self, ids: &[u32]) -> Result<Trace, ModelError> {
        check_tokens(ids, &self.config)?;
        Ok(backbone_forward(&self.params, &self.config, &self.layout, ids))
    }

    /// Logits for the next token after input row `row` of a trace.
    pub(crate) fn logits_row(&self, trace: &Trace, row: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let v = self.config.vocab_size as usize;
        let y = &trace.y[row * d..(row + 1) * d];
        let w = &self.params[self.lm_head_off()..][..d * v];
        let mut out = vec![0.0f64; v];
        for (c, &h) in y.iter().enumerate() {
            let wrow = &w[c * v..(c + 1) * v];
            for o in 0..v {
                out[o] += h * wrow[o] as f64;
            }
        }
        out
    }

    pub(crate) fn value_row(&self, trace: &Trace, row: usize) -> f64 {
        let d = self.config.d_model;
        let y = &trace.y[row * d..(row + 1) * d];
        let w = &self.params[self.value_w_off()..][..d];
        let mut acc = self.params[self.value_b_off()] as f64;
        for c in 0..d {
            acc += y[c] * w[c] as f64;
        }
        acc
    }

    /// Full per-position logits matrix; rows are next-token distributions.
    pub fn forward_logits(&self, context: &TokenSeq) -> Result<Vec<Vec<f64>>, ModelError> {
        let trace = self.trace(context.ids())?;
        Ok((0..trace.t).map(|i| self.logits_row(&trace, i)).collect())
    }

    /// Sum of −log p over response tokens plus the EOS target.
    pub fn nll(&self, post: &TokenSeq, response: &TokenSeq) -> Result<f64, ModelError> {
        let ids = assemble(post.ids(), Some(response.ids()));
        let trace = self.trace(&ids)?;
        let targets = nll_targets(post.len(), response.ids());
        let mut loss = 0.0;
        for (row, tok) in targets {
            let lp = log_softmax(&self.logits_row(&trace, row));
            loss -= lp[tok as usize];
        }
        Ok(loss)
    }

    /// nll plus gradient accumulation into `grads` (scaled by `scale`).
    pub fn nll_grad(
        &self,
        post: &TokenSeq,
        response: &TokenSeq,
        scale: f64,
        grads: &mut [f64],
    ) -> Result<f64, ModelError> {
        let ids = assemble(post.ids(), Some(response.ids()));
        let trace = self.trace(&ids)?;
        let targets = nll_targets(post.len(), response.ids());
        let d = self.config.d_model;
        let v = self.config.vocab_size as usize;
        let mut loss = 0.0;
        let mut dy = vec![0.0f64; trace.t * d];
        let lm_off = self.lm_head_off();
        let w = &self.params[lm_off..][..d * v];
        for (row, tok) in targets {
            let logits = self.logits_row(&trace, row);
            let lp = log_softmax(&logits);
            loss -= lp[tok as usize];
            // dlogits = (softmax - onehot) * scale
            let yrow = &trace.y[row * d..(row + 1) * d];
            for o in 0..v {
                let mut dl = lp[o].exp();
                if o == tok as usize {
                    dl -= 1.0;
                }
                dl *= scale;
                if dl == 0.0 {
                    continue;
                }
                // accumulate into lm head and into dy
                for c in 0..d {
                    grads[lm_off + c * v + o] += dl * yrow[c];
                }
                for c in 0..d {
                    dy[row * d + c] += dl * w[c * v + o] as f64;
                }
            }
        }
        backbone_backward(&self.params, &self.config, &self.layout, &trace, &dy, grads);
        Ok(loss)
    }
}

/// (input row, target token) pairs for teacher forcing: the SEP row predicts
/// response[0], each response row predicts its successor, the last predicts
/// EOS.
pub(crate) fn nll_targets(post_len: usize, response: &[u32]) -> Vec<(usize, u32)> {
    let sep_row = post_len + 1;
    let mut out = Vec::with_capacity(response.len() + 1);
    for (j, &tok) in response.iter().enumerate() {
        out.push((sep_row + j, tok));
    }
    out.push((sep_row + response.len(), crate::corpus::EOS));
    out
}

pub struct RewardModel {
    pub config: ModelConfig,
    pub params: Vec<f32>,
    pub(crate) layout: Layout,
}

impl std::fmt::Debug for RewardModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RewardModel")
            .field("config", &self.config)
            .field("n_params", &self.params.len())
            .finish()
    }
}

impl Clone for RewardModel {
    fn clone(&self) -> Self {
        RewardModel {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
        }
    }
}

impl RewardModel {
    pub fn n_params(cfg: &ModelConfig) -> usize {
        Layout::new(cfg).backbone_len + cfg.d_model + 1
    }

    /// Backbone copied from the (SFT) policy; scalar head zero-initialized,
    /// so the untrained reward of every input is exactly 0.
    pub fn from_policy(policy: &PolicyModel) -> RewardModel {
        let config = policy.config.clone();
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; Self::n_params(&config)];
        params[..layout.backbone_len]
            .copy_from_slice(&policy.params[..layout.backbone_len]);
        RewardModel { config, params, layout }
    }

    pub fn init(config: ModelConfig, seed: u64) -> Result<RewardModel, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0f32; Self::n_params(&config)];
        let mut rng = seeding::rng(seeding::mix(seed, seeding::SALT_INIT));
        init_backbone(&mut params, &config, &layout, &mut rng);
        Ok(RewardModel { config, params, layout })
    }

    /// All-zero parameters; scores every input exactly 0.
    pub fn zeroed(config: ModelConfig) -> Result<RewardModel, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let params = vec![0.0f32; Self::n_params(&config)];
        Ok(RewardModel { config, params, layout })
    }

    fn head_w_off(&self) -> usize {
        self.layout.backbone_len
    }

    fn head_b_off(&self) -> usize {
        self.layout.backbone_len + self.config.d_model
    }

    /// Scalar head over the final position of `[BOS] post [SEP] response`.
    pub fn reward_score(&self, post: &TokenSeq, response: &TokenSeq) -> Result<f64, ModelError> {
        let ids = assemble(post.ids(), Some(response.ids()));
        check_tokens(&ids, &self.config)?;
        let trace = backbone_forward(&self.params, &self.config, &self.layout, &ids);
        Ok(self.score_from_trace(&trace))
    }

    fn score_from_trace(&self, trace: &Trace) -> f64 {
        let d = self.config.d_model;
        let row = trace.t - 1;
        let y = &trace.y[row * d..(row + 1) * d];
        let w = &self.params[self.head_w_off()..][..d];
        let mut acc = self.params[self.head_b_off()] as f64;
        for c in 0..d {
            acc += y[c] * w[c] as f64;
        }
        acc
    }

    /// Score plus gradient of `dscore * score` into `grads`.
    pub fn score_grad(
        &self,
        post: &TokenSeq,
        response: &TokenSeq,
        dscore: f64,
        grads: &mut [f64],
    ) -> Result<f64, ModelError> {
        let ids = assemble(post.ids(), Some(response.ids()));
        check_tokens(&ids, &self.config)?;
        let trace = backbone_forward(&self.params, &self.config, &self.layout, &ids);
        let score = self.score_from_trace(&trace);
        let d = self.config.d_model;
        let row = trace.t - 1;
        let y = &trace.y[row * d..(row + 1) * d];
        let w_off = self.head_w_off();
        let mut dy = vec![0.0f64; trace.t * d];
        for c in 0..d {
            grads[w_off + c] += dscore * y[c];
            dy[row * d + c] = dscore * self.params[w_off + c] as f64;
        }
        grads[self.head_b_off()] += dscore;
        backbone_backward(&self.params, &self.config, &self.layout, &trace, &dy, grads);
        Ok(score)
    }
}

/// l2 norm and max abs of the parameter vector, for failure diagnostics.
pub fn param_norms(params: &[f32]) -> (f64, f64) {
    let mut l2 = 0.0f64;
    let mut max_abs = 0.0f64;
    for &p in params {
        let p = p as f64;
        l2 += p * p;
        max_abs = max_abs.max(p.abs());
    }
    (l2.sqrt(), max_abs)
}

pub fn non_finite_error(what: &str, params: &[f32]) -> ModelError {
    let (l2, max_abs) = param_norms(params);
    ModelError::NonFinite { what: what.to_string(), l2, max_abs }
}
