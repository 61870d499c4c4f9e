//! Top-p (nucleus) sampling with bit-reproducible tie handling.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{assemble, log_softmax, ModelError, PolicyModel};
use crate::corpus::{TokenSeq, EOS};
use crate::seeding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_p: f64,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { top_p: 0.7, temperature: 0.95, max_new_tokens: 16 }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ModelError::BadConfig(format!("top_p {} not in (0,1]", self.top_p)));
        }
        if !(self.temperature > 0.0) {
            return Err(ModelError::BadConfig(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if self.max_new_tokens == 0 {
            return Err(ModelError::BadConfig("max_new_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// One nucleus draw from a logits row. Probabilities are
/// softmax(logits/temperature) sorted descending (probability ties broken by
/// token id ascending); the nucleus is the smallest prefix with cumulative
/// mass >= top_p; the draw renormalizes within it. Tokens outside the
/// nucleus have exactly zero probability.
pub fn sample_from_logits(logits: &[f64], top_p: f64, temperature: f64, rng: &mut ChaCha8Rng) -> u32 {
    let scaled: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
    let probs: Vec<f64> = log_softmax(&scaled).iter().map(|lp| lp.exp()).collect();
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        probs[b].partial_cmp(&probs[a]).unwrap().then_with(|| a.cmp(&b))
    });
    let mut cut = 0;
    let mut mass = 0.0;
    for (rank, &tok) in order.iter().enumerate() {
        mass += probs[tok];
        cut = rank + 1;
        if mass >= top_p {
            break;
        }
    }
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &tok in &order[..cut] {
        acc += probs[tok];
        if u < acc {
            return tok as u32;
        }
    }
    order[cut - 1] as u32
}

/// One decoded response plus everything a PPO rollout needs about it.
#[derive(Clone, Debug)]
pub struct Decoded {
    /// Sampled tokens with the terminating EOS stripped.
    pub tokens: Vec<u32>,
    pub ended_with_eos: bool,
    /// Raw (temperature-1) log-probability of every sampled action,
    /// EOS included; matches teacher-forced re-evaluation exactly.
    pub logprobs: Vec<f64>,
    /// Value-head estimate at the state each action was taken from.
    pub values: Vec<f64>,
}

/// Autoregressive top-p decoding; full forward per step (no cache).
/// EOS is masked at the first step so a response is never empty.
pub fn decode(
    model: &PolicyModel,
    post: &TokenSeq,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<Decoded, ModelError> {
    cfg.validate()?;
    let mut rng = seeding::rng(seed);
    let mut ctx = assemble(post.ids(), None);
    let prefix = ctx.len();
    // Generation budget keeps the context within max_context at all times.
    let budget = cfg.max_new_tokens.min(model.config.max_context.saturating_sub(prefix));
    if budget == 0 {
        return Err(ModelError::ContextOverflow {
            len: prefix + 1,
            max: model.config.max_context,
        });
    }
    let mut out = Decoded {
        tokens: Vec::new(),
        ended_with_eos: false,
        logprobs: Vec::new(),
        values: Vec::new(),
    };
    for step in 0..budget {
        let trace = model.trace(&ctx)?;
        let row = ctx.len() - 1;
        let logits = model.logits_row(&trace, row);
        let value = model.value_row(&trace, row);
        let tok = if step == 0 {
            let mut masked = logits.clone();
            masked[EOS as usize] = f64::NEG_INFINITY;
            sample_from_logits(&masked, cfg.top_p, cfg.temperature, &mut rng)
        } else {
            sample_from_logits(&logits, cfg.top_p, cfg.temperature, &mut rng)
        };
        // Recorded behavior log-prob is always the unmasked raw softmax, so
        // teacher-forced re-evaluation reproduces it bit-for-bit.
        out.logprobs.push(log_softmax(&logits)[tok as usize]);
        out.values.push(value);
        if tok == EOS {
            out.ended_with_eos = true;
            break;
        }
        out.tokens.push(tok);
        ctx.push(tok);
    }
    Ok(out)
}

/// The sampled response as a plain sequence (terminating EOS stripped).
pub fn sample_top_p(
    model: &PolicyModel,
    post: &TokenSeq,
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<TokenSeq, ModelError> {
    let decoded = decode(model, post, cfg, seed)?;
    Ok(TokenSeq::new(decoded.tokens).expect("first-step EOS mask keeps responses non-empty"))
}
