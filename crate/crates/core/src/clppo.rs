//! PPO with a training curriculum: reward enhancement (a gold-overlap bonus),
//! reward ranking (keep the top fraction of each rollout batch), and
//! self-paced selection under a geometrically decaying threshold.

use std::path::Path;

use rayon::prelude::*;

use crate::corpus::{RlExample, TokenSeq, EOS};
use crate::metrics;
use crate::model::optim::OptimizerState;
use crate::model::sampler::{decode, SamplerConfig};
use crate::model::{assemble, log_softmax, non_finite_error, PolicyModel, RewardModel};
use crate::seeding::{self, mix3, SALT_BATCH, SALT_ROLLOUT};
use crate::TrainError;

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurriculumConfig {
    /// Weight of the gold-overlap bonus added to the reward-model score.
    pub alpha: f64,
    /// Keep the top floor(b*m/k) samples of every rollout batch.
    pub k: usize,
    /// Initial self-paced threshold.
    pub lambda0: f64,
    /// Per-step threshold decay: lambda <- lambda - mu*lambda.
    pub mu: f64,
    /// Responses sampled per post.
    pub m: usize,
}

impl Default for CurriculumConfig {
    fn default() -> Self {
        CurriculumConfig { alpha: 0.5, k: 3, lambda0: 1.0, mu: 0.2, m: 4 }
    }
}

impl CurriculumConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(TrainError::BadConfig(format!(
                "alpha must be finite and >= 0, got {}",
                self.alpha
            )));
        }
        if self.k < 1 {
            return Err(TrainError::BadConfig("k must be >= 1".into()));
        }
        if self.m < 1 {
            return Err(TrainError::BadConfig("m must be >= 1".into()));
        }
        // mu = 0 (no decay) is the neutralized configuration; only the
        // half-open upper side is rejected.
        if !(0.0..1.0).contains(&self.mu) {
            return Err(TrainError::BadConfig(format!(
                "mu must be in [0, 1), got {}",
                self.mu
            )));
        }
        if self.lambda0.is_nan() {
            return Err(TrainError::BadConfig("lambda0 must not be NaN".into()));
        }
        Ok(())
    }

    /// All three curriculum strategies switched off: no bonus, keep every
    /// sample, threshold below any attainable reward and never decaying.
    pub fn neutral(m: usize) -> CurriculumConfig {
        CurriculumConfig { alpha: 0.0, k: 1, lambda0: f64::NEG_INFINITY, mu: 0.0, m }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurriculumState {
    pub lambda_current: f64,
    pub step: u64,
}

impl CurriculumState {
    pub fn new(cfg: &CurriculumConfig) -> CurriculumState {
        CurriculumState { lambda_current: cfg.lambda0, step: 0 }
    }
}

/// lambda <- lambda - mu*lambda, applied in the multiplicative form
/// lambda*(1-mu) so a -inf sentinel survives mu = 0 (the literal form would
/// produce 0 * inf = NaN). Closed form: lambda_t = lambda0 * (1-mu)^t.
pub fn advance_lambda(state: &mut CurriculumState, mu: f64) {
    state.lambda_current *= 1.0 - mu;
    state.step += 1;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PpoConfig {
    pub clip_epsilon: f64,
    pub value_loss_coef: f64,
    /// Per-token penalty toward the frozen reference policy.
    pub kl_coef: f64,
    pub discount: f64,
    pub gae_lambda: f64,
    /// Optimizer passes over each batch's selected samples.
    pub ppo_epochs: usize,
    /// Posts per RL step.
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub learning_rate: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_epsilon: 0.2,
            value_loss_coef: 0.5,
            kl_coef: 0.02,
            discount: 1.0,
            gae_lambda: 0.95,
            ppo_epochs: 2,
            batch_size: 16,
            total_steps: 300,
            seed: 0,
            learning_rate: 1e-4,
        }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "clip_epsilon must be in (0, 1), got {}",
                self.clip_epsilon
            )));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(TrainError::BadConfig(format!(
                "discount must be in (0, 1], got {}",
                self.discount
            )));
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(TrainError::BadConfig(format!(
                "gae_lambda must be in [0, 1], got {}",
                self.gae_lambda
            )));
        }
        if !(self.value_loss_coef >= 0.0 && self.value_loss_coef.is_finite()) {
            return Err(TrainError::BadConfig("value_loss_coef must be finite and >= 0".into()));
        }
        if !(self.kl_coef >= 0.0 && self.kl_coef.is_finite()) {
            return Err(TrainError::BadConfig("kl_coef must be finite and >= 0".into()));
        }
        if self.ppo_epochs < 1 {
            return Err(TrainError::BadConfig("ppo_epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RolloutSample {
    /// Event id of the answered post; also keys the sample's rollout seed.
    pub post_id: u64,
    /// Index among the post's m draws.
    pub sample_index: usize,
    /// Position of the post inside the batch's `posts`.
    pub post_slot: usize,
    pub response: TokenSeq,
    pub ended_with_eos: bool,
    /// Behavior log-prob of every sampled action (EOS included if reached).
    pub logprobs: Vec<f64>,
    /// Value estimate at the state each action was taken from.
    pub values: Vec<f64>,
    pub rm_reward: f64,
    /// Best gold-overlap F1, in [0, 1]; zero until scored.
    pub rouge_bonus: f64,
    /// rm_reward + alpha * rouge_bonus.
    pub enhanced_reward: f64,
    pub rank_kept: bool,
    pub selfpaced_v: bool,
}

#[derive(Clone, Debug)]
pub struct RolloutBatch {
    pub posts: Vec<RlExample>,
    /// Samples per post.
    pub m: usize,
    /// b*m samples, grouped by post in `posts` order.
    pub samples: Vec<RolloutSample>,
}

/// m top-p responses per post under a frozen policy snapshot. Each sample's
/// seed derives from (seed, post_id, sample_index), so results are identical
/// regardless of scheduling.
pub fn rollout(
    policy: &PolicyModel,
    posts: &[RlExample],
    cfg: &CurriculumConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<RolloutBatch, TrainError> {
    if posts.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let jobs: Vec<(usize, usize)> = (0..posts.len())
        .flat_map(|slot| (0..cfg.m).map(move |j| (slot, j)))
        .collect();
    let samples = jobs
        .par_iter()
        .map(|&(slot, j)| -> Result<RolloutSample, TrainError> {
            let post = &posts[slot];
            let d = decode(policy, &post.post, sampler, mix3(seed, post.event_id, j as u64))?;
            Ok(RolloutSample {
                post_id: post.event_id,
                sample_index: j,
                post_slot: slot,
                response: TokenSeq::new(d.tokens).expect("decoded responses are never empty"),
                ended_with_eos: d.ended_with_eos,
                logprobs: d.logprobs,
                values: d.values,
                rm_reward: 0.0,
                rouge_bonus: 0.0,
                enhanced_reward: 0.0,
                rank_kept: false,
                selfpaced_v: false,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RolloutBatch { posts: posts.to_vec(), m: cfg.m, samples })
}

/// Overlap bonus and enhanced reward: the bonus is the best ROUGE-L F1
/// against the gold trendy responses; the enhancement adds alpha times it.
pub fn enhance_reward(
    rm_reward: f64,
    response: &TokenSeq,
    gold_trendy: &[TokenSeq],
    alpha: f64,
) -> (f64, f64) {
    assert!(!gold_trendy.is_empty(), "at least one gold response is required");
    let bonus = gold_trendy
        .iter()
        .map(|g| {
            metrics::rouge_l(response, g)
                .expect("token sequences are non-empty")
                .f1
        })
        .fold(0.0f64, f64::max);
    (bonus, rm_reward + alpha * bonus)
}

/// Reward-model score plus enhancement for every sample in the batch.
pub fn score_rollouts(
    rm: &RewardModel,
    batch: &mut RolloutBatch,
    alpha: f64,
) -> Result<(), TrainError> {
    let RolloutBatch { posts, samples, .. } = batch;
    let posts: &[RlExample] = posts;
    samples.par_iter_mut().try_for_each(|s| -> Result<(), TrainError> {
        let post = &posts[s.post_slot];
        s.rm_reward = rm.reward_score(&post.post, &s.response)?;
        let (bonus, re) = enhance_reward(s.rm_reward, &s.response, &post.gold_trendy, alpha);
        s.rouge_bonus = bonus;
        s.enhanced_reward = re;
        Ok(())
    })
}

/// Flags the top floor(n/k) samples by enhanced reward. Boundary ties resolve
/// by (post_id, sample_index) ascending. Sample order itself never changes;
/// only the flags do. Returns the kept count.
pub fn rank_and_shortlist(batch: &mut RolloutBatch, k: usize) -> Result<usize, TrainError> {
    if k < 1 {
        return Err(TrainError::BadConfig("k must be >= 1".into()));
    }
    let n = batch.samples.len();
    let n_keep = n / k;
    if n_keep == 0 {
        return Err(TrainError::BadConfig(format!(
            "ranking with k={k} over {n} samples would keep none"
        )));
    }
    if k == 1 {
        for s in &mut batch.samples {
            s.rank_kept = true;
        }
        return Ok(n);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let sa = &batch.samples[a];
        let sb = &batch.samples[b];
        sb.enhanced_reward
            .total_cmp(&sa.enhanced_reward)
            .then(sa.post_id.cmp(&sb.post_id))
            .then(sa.sample_index.cmp(&sb.sample_index))
    });
    for (rank, &i) in order.iter().enumerate() {
        batch.samples[i].rank_kept = rank < n_keep;
    }
    Ok(n_keep)
}

/// v = 1 on rank-kept samples whose enhanced reward clears the threshold
/// (inclusive); 0 everywhere else. Returns the selected count.
pub fn self_paced_select(batch: &mut RolloutBatch, state: &CurriculumState) -> usize {
    let mut n = 0;
    for s in &mut batch.samples {
        s.selfpaced_v = s.rank_kept && s.enhanced_reward >= state.lambda_current;
        n += s.selfpaced_v as usize;
    }
    n
}

/// Teacher-forced re-evaluation: log-prob and value of every action of
/// `response` under `policy` (the EOS action included when the rollout ended
/// with one). Bit-identical to what decoding recorded when `policy` is the
/// unchanged behavior snapshot.
pub fn action_logprobs_values(
    policy: &PolicyModel,
    post: &TokenSeq,
    response: &TokenSeq,
    ended_with_eos: bool,
) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let ids = assemble(post.ids(), Some(response.ids()));
    let trace = policy.trace(&ids)?;
    let sep_row = post.len() + 1;
    let n_actions = response.len() + ended_with_eos as usize;
    let mut lps = Vec::with_capacity(n_actions);
    let mut vals = Vec::with_capacity(n_actions);
    for j in 0..n_actions {
        let row = sep_row + j;
        let action = if j < response.len() { response.ids()[j] } else { EOS };
        let lsm = log_softmax(&policy.logits_row(&trace, row));
        lps.push(lsm[action as usize]);
        vals.push(policy.value_row(&trace, row));
    }
    Ok((lps, vals))
}

/// Per-action rewards: a KL penalty toward the reference policy on every
/// action, plus the terminal reward on the last one.
pub(crate) fn per_token_rewards(
    behavior_lp: &[f64],
    ref_lp: &[f64],
    terminal: f64,
    kl_coef: f64,
) -> Vec<f64> {
    let mut r: Vec<f64> = behavior_lp
        .iter()
        .zip(ref_lp)
        .map(|(b, rf)| -kl_coef * (b - rf))
        .collect();
    if let Some(last) = r.last_mut() {
        *last += terminal;
    }
    r
}

/// Generalized advantage estimation with a zero terminal value.
/// returns[t] = advantages[t] + values[t].
pub(crate) fn gae(
    rewards: &[f64],
    values: &[f64],
    discount: f64,
    lam: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0f64; n];
    let mut next_adv = 0.0;
    let mut next_value = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + discount * next_value - values[t];
        next_adv = delta + discount * lam * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let ret: Vec<f64> = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, ret)
}

/// One sample of a frozen update view.
#[derive(Clone, Debug)]
pub struct PpoSampleView {
    pub post: TokenSeq,
    pub response: TokenSeq,
    pub ended_with_eos: bool,
    pub behavior_logprobs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

/// Everything the clipped-surrogate objective needs, with advantages and
/// returns fixed from the behavior rollout (they do not move between the
/// inner optimizer passes).
#[derive(Clone, Debug)]
pub struct PpoView {
    pub samples: Vec<PpoSampleView>,
    /// Total action count: the token-mean denominator.
    pub n_tokens: usize,
    /// Mean behavior-minus-reference log-prob gap (the KL monitor).
    pub kl: f64,
}

/// Builds the frozen update view for the selected samples: reference
/// log-probs, per-token rewards, advantages, and returns.
pub fn prepare_update(
    batch: &RolloutBatch,
    selected: &[usize],
    ref_policy: &PolicyModel,
    cfg: &PpoConfig,
) -> Result<PpoView, TrainError> {
    if selected.is_empty() {
        return Err(TrainError::BadConfig(
            "ppo update needs at least one selected sample".into(),
        ));
    }
    let mut samples = Vec::with_capacity(selected.len());
    let mut n_tokens = 0usize;
    let mut kl_sum = 0.0;
    for &i in selected {
        let s = &batch.samples[i];
        let post = &batch.posts[s.post_slot].post;
        let (ref_lp, _) = action_logprobs_values(ref_policy, post, &s.response, s.ended_with_eos)?;
        let rewards = per_token_rewards(&s.logprobs, &ref_lp, s.enhanced_reward, cfg.kl_coef);
        let (advantages, returns) = gae(&rewards, &s.values, cfg.discount, cfg.gae_lambda);
        n_tokens += s.logprobs.len();
        kl_sum += s.logprobs.iter().zip(&ref_lp).map(|(b, r)| b - r).sum::<f64>();
        samples.push(PpoSampleView {
            post: post.clone(),
            response: s.response.clone(),
            ended_with_eos: s.ended_with_eos,
            behavior_logprobs: s.logprobs.clone(),
            advantages,
            returns,
        });
    }
    Ok(PpoView { samples, n_tokens, kl: kl_sum / n_tokens as f64 })
}

/// Token-mean clipped-surrogate policy loss against a frozen view. A pure
/// function of the trunk and language-model head; the value head never
/// enters.
pub fn surrogate_loss(policy: &PolicyModel, view: &PpoView, clip: f64) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in &view.samples {
        let (lp_new, _) = action_logprobs_values(policy, &s.post, &s.response, s.ended_with_eos)?;
        for (j, lp) in lp_new.iter().enumerate() {
            let ratio = (lp - s.behavior_logprobs[j]).exp();
            let a = s.advantages[j];
            total -= (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a);
        }
    }
    Ok(total / view.n_tokens as f64)
}

/// Token-mean squared error of the value head against the view's returns.
pub fn value_loss(policy: &PolicyModel, view: &PpoView) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for s in &view.samples {
        let (_, v_new) = action_logprobs_values(policy, &s.post, &s.response, s.ended_with_eos)?;
        for (j, v) in v_new.iter().enumerate() {
            let e = v - s.returns[j];
            total += e * e;
        }
    }
    Ok(total / view.n_tokens as f64)
}

pub struct SurrogateEval {
    /// Token-mean clipped-surrogate loss.
    pub policy_loss: f64,
    /// Token-mean value error, without the coefficient.
    pub value_loss: f64,
    /// max |ratio - 1| over all actions in this pass.
    pub max_ratio_err: f64,
}

/// One gradient evaluation of the full objective
/// surrogate + value_loss_coef * value mse. Surrogate gradients flow to the
/// trunk and language-model head; value gradients only to the value head,
/// so zero advantages leave the whole parameter vector untouched.
pub fn surrogate_grad(
    policy: &PolicyModel,
    view: &PpoView,
    cfg: &PpoConfig,
    grads: &mut [f64],
) -> Result<SurrogateEval, TrainError> {
    let d = policy.config.d_model;
    let v = policy.config.vocab_size as usize;
    let lm_off = policy.value_w_off() - d * v;
    let vw_off = policy.value_w_off();
    let vb_off = vw_off + d;
    let n_tok = view.n_tokens as f64;
    let mut total_pol = 0.0;
    let mut total_val = 0.0;
    let mut max_ratio_err = 0.0f64;

    for s in &view.samples {
        let ids = assemble(s.post.ids(), Some(s.response.ids()));
        let trace = policy.trace(&ids)?;
        let sep_row = s.post.len() + 1;
        let n_actions = s.response.len() + s.ended_with_eos as usize;
        let mut dy = vec![0.0f64; ids.len() * d];
        for j in 0..n_actions {
            let row = sep_row + j;
            let action =
                if j < s.response.len() { s.response.ids()[j] } else { EOS } as usize;
            let logits = policy.logits_row(&trace, row);
            let lsm = log_softmax(&logits);
            let ratio = (lsm[action] - s.behavior_logprobs[j]).exp();
            if !ratio.is_finite() {
                return Err(non_finite_error("ppo importance ratio", &policy.params).into());
            }
            max_ratio_err = max_ratio_err.max((ratio - 1.0).abs());
            let a = s.advantages[j];
            let surr1 = ratio * a;
            let surr2 = ratio.clamp(1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon) * a;
            total_pol -= surr1.min(surr2);
            // The clipped branch is constant in the parameters, so the
            // gradient is live only while the unclipped branch is active.
            let dlp = if surr1 <= surr2 { -a * ratio / n_tok } else { 0.0 };
            let y = &trace.y[row * d..(row + 1) * d];
            if dlp != 0.0 {
                let w = &policy.params[lm_off..lm_off + d * v];
                for (o, &l) in lsm.iter().enumerate() {
                    let dlogit = dlp * ((o == action) as u8 as f64 - l.exp());
                    for c in 0..d {
                        grads[lm_off + c * v + o] += dlogit * y[c];
                        dy[row * d + c] += dlogit * w[c * v + o] as f64;
                    }
                }
            }
            // Value head only; the trunk is detached from the value error.
            let v_new = policy.value_row(&trace, row);
            let e = v_new - s.returns[j];
            total_val += e * e;
            let dv = cfg.value_loss_coef * 2.0 * e / n_tok;
            for c in 0..d {
                grads[vw_off + c] += dv * y[c];
            }
            grads[vb_off] += dv;
        }
        crate::model::backbone_backward(
            &policy.params,
            &policy.config,
            &policy.layout,
            &trace,
            &dy,
            grads,
        );
    }
    let policy_loss = total_pol / n_tok;
    let value_loss = total_val / n_tok;
    if !policy_loss.is_finite() || !value_loss.is_finite() {
        return Err(non_finite_error("ppo loss", &policy.params).into());
    }
    Ok(SurrogateEval { policy_loss, value_loss, max_ratio_err })
}

pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub kl: f64,
    /// max |ratio - 1| on the first inner pass, where behavior equals the
    /// target policy; a numerical self-check, expected ~0.
    pub max_ratio_err_epoch0: f64,
}

/// ppo_epochs optimizer passes over the selected samples of one batch.
/// Losses reported are from the first pass, before any parameter movement.
pub fn ppo_update(
    policy: &mut PolicyModel,
    ref_policy: &PolicyModel,
    batch: &RolloutBatch,
    selected: &[usize],
    cfg: &PpoConfig,
    opt: &mut OptimizerState,
) -> Result<UpdateStats, TrainError> {
    let view = prepare_update(batch, selected, ref_policy, cfg)?;
    let mut grads = vec![0.0f64; policy.params.len()];
    let mut stats: Option<UpdateStats> = None;
    for epoch in 0..cfg.ppo_epochs {
        grads.iter_mut().for_each(|g| *g = 0.0);
        let eval = surrogate_grad(policy, &view, cfg, &mut grads)?;
        if epoch == 0 {
            stats = Some(UpdateStats {
                policy_loss: eval.policy_loss,
                value_loss: eval.value_loss,
                kl: view.kl,
                max_ratio_err_epoch0: eval.max_ratio_err,
            });
        }
        opt.apply(&mut policy.params, &grads)?;
    }
    Ok(stats.expect("ppo_epochs >= 1"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepStats {
    pub step: u64,
    /// Threshold in force when this step selected its samples.
    pub lambda: f64,
    pub n_kept: usize,
    pub n_selected: usize,
    /// Batch mean of raw reward-model scores.
    pub mean_r: f64,
    /// Batch mean of enhanced rewards.
    pub mean_re: f64,
    /// None when the step skipped its update (nothing selected).
    pub policy_loss: Option<f64>,
    pub value_loss: Option<f64>,
    pub kl: Option<f64>,
    /// Every sample obeyed rm_reward <= r^e <= rm_reward + alpha this step.
    pub enhance_bound_ok: bool,
}

fn enhance_bound_ok(batch: &RolloutBatch, alpha: f64) -> bool {
    batch.samples.iter().all(|s| {
        s.enhanced_reward >= s.rm_reward && s.enhanced_reward <= s.rm_reward + alpha
    })
}

fn batch_means(batch: &RolloutBatch) -> (f64, f64) {
    let n = batch.samples.len() as f64;
    let r = batch.samples.iter().map(|s| s.rm_reward).sum::<f64>() / n;
    let re = batch.samples.iter().map(|s| s.enhanced_reward).sum::<f64>() / n;
    (r, re)
}

/// The step's training posts: a seeded draw without replacement, or the
/// whole dataset when it is smaller than the batch size.
fn draw_batch(rl: &[RlExample], seed: u64, step: u64, b: usize) -> Vec<RlExample> {
    let take = b.min(rl.len());
    let mut rng = seeding::rng(mix3(seed, SALT_BATCH, step));
    rand::seq::index::sample(&mut rng, rl.len(), take)
        .into_iter()
        .map(|i| rl[i].clone())
        .collect()
}

/// The full curriculum loop: rollout, score, enhance, rank, select, update,
/// decay. Steps that select nothing skip the update but still decay the
/// threshold, keeping the schedule purely step-indexed.
pub fn train_clppo(
    policy: PolicyModel,
    rm: &RewardModel,
    rl: &[RlExample],
    cur: &CurriculumConfig,
    ppo: &PpoConfig,
    sampler: &SamplerConfig,
) -> Result<(PolicyModel, Vec<StepStats>), TrainError> {
    cur.validate()?;
    ppo.validate()?;
    sampler.validate()?;
    if rl.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut policy = policy;
    let ref_policy = policy.clone();
    let mut opt = OptimizerState::new(ppo.learning_rate, policy.params.len());
    let mut state = CurriculumState::new(cur);
    let mut stats = Vec::with_capacity(ppo.total_steps);
    for step in 0..ppo.total_steps as u64 {
        let posts = draw_batch(rl, ppo.seed, step, ppo.batch_size);
        let mut batch =
            rollout(&policy, &posts, cur, sampler, mix3(ppo.seed, SALT_ROLLOUT, step))?;
        score_rollouts(rm, &mut batch, cur.alpha)?;
        let n_kept = rank_and_shortlist(&mut batch, cur.k)?;
        let n_selected = self_paced_select(&mut batch, &state);
        let (mean_r, mean_re) = batch_means(&batch);
        let mut entry = StepStats {
            step,
            lambda: state.lambda_current,
            n_kept,
            n_selected,
            mean_r,
            mean_re,
            policy_loss: None,
            value_loss: None,
            kl: None,
            enhance_bound_ok: enhance_bound_ok(&batch, cur.alpha),
        };
        if n_selected > 0 {
            let selected: Vec<usize> = batch
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| s.selfpaced_v)
                .map(|(i, _)| i)
                .collect();
            let u = ppo_update(&mut policy, &ref_policy, &batch, &selected, ppo, &mut opt)?;
            entry.policy_loss = Some(u.policy_loss);
            entry.value_loss = Some(u.value_loss);
            entry.kl = Some(u.kl);
        }
        stats.push(entry);
        advance_lambda(&mut state, cur.mu);
    }
    Ok((policy, stats))
}

/// Plain PPO: every rollout sample trains and the reward is the raw
/// reward-model score. Shares the batching, rollout, and update code with
/// the curriculum loop so the two match step for step when the curriculum
/// is neutralized.
pub fn train_ppo(
    policy: PolicyModel,
    rm: &RewardModel,
    rl: &[RlExample],
    m: usize,
    ppo: &PpoConfig,
    sampler: &SamplerConfig,
) -> Result<(PolicyModel, Vec<StepStats>), TrainError> {
    ppo.validate()?;
    sampler.validate()?;
    if rl.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if m < 1 {
        return Err(TrainError::BadConfig("m must be >= 1".into()));
    }
    let neutral = CurriculumConfig::neutral(m);
    let mut policy = policy;
    let ref_policy = policy.clone();
    let mut opt = OptimizerState::new(ppo.learning_rate, policy.params.len());
    let mut stats = Vec::with_capacity(ppo.total_steps);
    for step in 0..ppo.total_steps as u64 {
        let posts = draw_batch(rl, ppo.seed, step, ppo.batch_size);
        let mut batch =
            rollout(&policy, &posts, &neutral, sampler, mix3(ppo.seed, SALT_ROLLOUT, step))?;
        {
            let RolloutBatch { posts, samples, .. } = &mut batch;
            let posts: &[RlExample] = posts;
            samples.par_iter_mut().try_for_each(|s| -> Result<(), TrainError> {
                s.rm_reward = rm.reward_score(&posts[s.post_slot].post, &s.response)?;
                // Same arithmetic as a zero-alpha enhancement, so a
                // neutralized curriculum run reproduces this bit for bit.
                s.enhanced_reward = s.rm_reward + 0.0;
                s.rank_kept = true;
                s.selfpaced_v = true;
                Ok(())
            })?;
        }
        let n = batch.samples.len();
        let (mean_r, mean_re) = batch_means(&batch);
        let selected: Vec<usize> = (0..n).collect();
        let u = ppo_update(&mut policy, &ref_policy, &batch, &selected, ppo, &mut opt)?;
        stats.push(StepStats {
            step,
            lambda: f64::NEG_INFINITY,
            n_kept: n,
            n_selected: n,
            mean_r,
            mean_re,
            policy_loss: Some(u.policy_loss),
            value_loss: Some(u.value_loss),
            kl: Some(u.kl),
            enhance_bound_ok: true,
        });
    }
    Ok((policy, stats))
}

/// Stats CSV: step, lambda, n_kept, n_selected, mean_r, mean_re,
/// policy_loss, value_loss, kl. Skipped-update steps leave the loss cells
/// empty.
pub fn write_stats_csv(path: &Path, stats: &[StepStats]) -> Result<(), TrainError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,lambda,n_kept,n_selected,mean_r,mean_re,policy_loss,value_loss,kl")?;
    for s in stats {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            s.step,
            s.lambda,
            s.n_kept,
            s.n_selected,
            s.mean_r,
            s.mean_re,
            cell(s.policy_loss),
            cell(s.value_loss),
            cell(s.kl),
        )?;
    }
    w.flush()?;
    Ok(())
}
