//! Pairwise reward model training on like-count preference pairs.

use serde::{Deserialize, Serialize};

use crate::corpus::PreferencePair;
use crate::model::optim::OptimizerState;
use crate::model::{non_finite_error, RewardModel};
use crate::seeding::{self, mix3, SALT_FLIP, SALT_SHUFFLE};
use crate::TrainError;

use rand::seq::SliceRandom;
use rand::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RmConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Fraction of pairs whose winner/loser labels are swapped before
    /// training, to probe robustness. Applied per split, deterministically.
    pub label_flip_rate: f64,
}

impl Default for RmConfig {
    fn default() -> Self {
        RmConfig {
            learning_rate: 0.001,
            batch_size: 16,
            epochs: 5,
            seed: 0,
            label_flip_rate: 0.0,
        }
    }
}

impl RmConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(TrainError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::BadConfig("learning_rate must be > 0".into()));
        }
        if !(0.0..0.5).contains(&self.label_flip_rate) {
            return Err(TrainError::BadConfig(format!(
                "label_flip_rate must be in [0, 0.5), got {}",
                self.label_flip_rate
            )));
        }
        Ok(())
    }
}

/// -log sigmoid(margin) via the stable softplus identity
/// softplus(-x) = max(-x, 0) + ln(1 + exp(-|x|)).
pub fn rm_pair_loss(margin: f64) -> f64 {
    (-margin).max(0.0) + (-margin.abs()).exp().ln_1p()
}

/// d loss / d margin = -sigmoid(-margin), computed without overflow.
fn rm_pair_loss_grad(margin: f64) -> f64 {
    if margin >= 0.0 {
        -(-margin).exp() / (1.0 + (-margin).exp())
    } else {
        -1.0 / (1.0 + margin.exp())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RmEpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

pub struct RmOutcome {
    pub rm: RewardModel,
    pub curve: Vec<RmEpochStats>,
    /// Epoch whose dev accuracy selected the returned parameters.
    pub best_epoch: usize,
}

/// Deterministic per-split label corruption: pair i is flipped when the
/// i-th draw from the split's stream falls under the rate.
pub fn flipped_view(pairs: &[PreferencePair], rate: f64, seed: u64, split_tag: u64) -> Vec<PreferencePair> {
    if rate == 0.0 {
        return pairs.to_vec();
    }
    let mut rng = seeding::rng(mix3(seed, SALT_FLIP, split_tag));
    pairs
        .iter()
        .map(|p| {
            let flip = rng.random::<f64>() < rate;
            if flip {
                PreferencePair {
                    post: p.post.clone(),
                    y_w: p.y_l.clone(),
                    y_l: p.y_w.clone(),
                }
            } else {
                p.clone()
            }
        })
        .collect()
}

/// Fraction of pairs scored in the labeled order; score ties count 0.5.
pub fn rm_accuracy(rm: &RewardModel, pairs: &[PreferencePair]) -> Result<f64, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut correct = 0.0;
    for p in pairs {
        let sw = rm.reward_score(&p.post, &p.y_w)?;
        let sl = rm.reward_score(&p.post, &p.y_l)?;
        if sw > sl {
            correct += 1.0;
        } else if sw == sl {
            correct += 0.5;
        }
    }
    Ok(correct / pairs.len() as f64)
}

pub const SPLIT_TAG_TRAIN: u64 = 0;
pub const SPLIT_TAG_DEV: u64 = 1;

pub fn train_reward(
    rm: RewardModel,
    train: &[PreferencePair],
    dev: &[PreferencePair],
    cfg: &RmConfig,
) -> Result<RmOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let train = flipped_view(train, cfg.label_flip_rate, cfg.seed, SPLIT_TAG_TRAIN);
    let dev = flipped_view(dev, cfg.label_flip_rate, cfg.seed, SPLIT_TAG_DEV);

    let mut rm = rm;
    let mut opt = OptimizerState::new(cfg.learning_rate, rm.params.len());
    let mut grads = vec![0.0f64; rm.params.len()];
    let mut curve = Vec::new();
    let mut best: Option<(f64, usize, Vec<f32>)> = None;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::rng(mix3(cfg.seed, SALT_SHUFFLE, epoch as u64)));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let p = &train[i];
                let sw = rm.reward_score(&p.post, &p.y_w)?;
                let sl = rm.reward_score(&p.post, &p.y_l)?;
                let margin = sw - sl;
                batch_loss += rm_pair_loss(margin);
                let g = rm_pair_loss_grad(margin) * scale;
                rm.score_grad(&p.post, &p.y_w, g, &mut grads)?;
                rm.score_grad(&p.post, &p.y_l, -g, &mut grads)?;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(non_finite_error("rm batch loss", &rm.params).into());
            }
            opt.apply(&mut rm.params, &grads)?;
            epoch_loss += batch_loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let dev_accuracy = rm_accuracy(&rm, &dev)?;
        curve.push(RmEpochStats { epoch, train_loss, dev_accuracy });
        let improved = best.as_ref().map_or(true, |(b, _, _)| dev_accuracy > *b);
        if improved {
            best = Some((dev_accuracy, epoch, rm.params.clone()));
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    rm.params = best_params;
    Ok(RmOutcome { rm, curve, best_epoch })
}

pub fn write_rm_curve_csv(path: &std::path::Path, curve: &[RmEpochStats]) -> Result<(), TrainError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,train_loss,dev_accuracy")?;
    for p in curve {
        writeln!(w, "{},{},{}", p.epoch, p.train_loss, p.dev_accuracy)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CorpusConfig, TokenSeq};
    use crate::model::gradcheck::{central_diff, sample_indices};
    use crate::model::ModelConfig;

    fn tiny_rm(seed: u64) -> RewardModel {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 24,
            dropout: 0.0,
        };
        RewardModel::init(cfg, seed).unwrap()
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq::new(ids.to_vec()).unwrap()
    }

    #[test]
    fn pair_loss_reference_points() {
        assert!((rm_pair_loss(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(rm_pair_loss(20.0) < 1e-8);
        assert!((rm_pair_loss(-20.0) - 20.0).abs() < 1e-8);
        // Extreme margins stay finite.
        assert!(rm_pair_loss(-1e6).is_finite());
        assert!(rm_pair_loss(1e6).is_finite());
    }

    #[test]
    fn pair_loss_antisymmetry_bound() {
        // loss(m) + loss(-m) = m + 2*softplus(-m) >= 2 ln 2, equality at 0.
        for m in [-7.5, -1.0, 0.0, 0.3, 4.0] {
            let s = rm_pair_loss(m) + rm_pair_loss(-m);
            assert!(s >= 2.0 * std::f64::consts::LN_2 - 1e-12, "m={m} s={s}");
        }
        let at_zero = rm_pair_loss(0.0) + rm_pair_loss(0.0);
        assert!((at_zero - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn pair_loss_grad_matches_finite_difference() {
        for m in [-3.0, -0.5, 0.0, 0.5, 3.0] {
            let h = 1e-6;
            let fd = (rm_pair_loss(m + h) - rm_pair_loss(m - h)) / (2.0 * h);
            assert!((rm_pair_loss_grad(m) - fd).abs() < 1e-9, "m={m}");
        }
    }

    #[test]
    fn score_shift_leaves_loss_unchanged() {
        // Adding a constant to the score head bias shifts every score by the
        // same amount, so all pair margins and losses are unchanged.
        let mut rm = tiny_rm(11);
        let post = seq(&[4, 5, 6]);
        let a = seq(&[7, 8]);
        let b = seq(&[9, 10, 11]);
        let margin = rm.reward_score(&post, &a).unwrap() - rm.reward_score(&post, &b).unwrap();
        let bias = rm.params.len() - 1;
        rm.params[bias] += 3.25;
        let shifted =
            rm.reward_score(&post, &a).unwrap() - rm.reward_score(&post, &b).unwrap();
        assert!((margin - shifted).abs() < 1e-6);
        assert!((rm_pair_loss(margin) - rm_pair_loss(shifted)).abs() < 1e-6);
    }

    #[test]
    fn pairwise_loss_gradient_finite_difference() {
        let rm = tiny_rm(5);
        let post = seq(&[4, 5, 6, 7]);
        let y_w = seq(&[8, 9]);
        let y_l = seq(&[10, 11, 12]);

        let mut grads = vec![0.0f64; rm.params.len()];
        let margin =
            rm.reward_score(&post, &y_w).unwrap() - rm.reward_score(&post, &y_l).unwrap();
        let g = rm_pair_loss_grad(margin);
        rm.score_grad(&post, &y_w, g, &mut grads).unwrap();
        rm.score_grad(&post, &y_l, -g, &mut grads).unwrap();

        let mut loss = |params: &[f32]| {
            let probe = RewardModel {
                config: rm.config.clone(),
                params: params.to_vec(),
                layout: rm.layout.clone(),
            };
            let m = probe.reward_score(&post, &y_w).unwrap()
                - probe.reward_score(&post, &y_l).unwrap();
            rm_pair_loss(m)
        };
        let mut params = rm.params.clone();
        let mut worst = 0.0f64;
        for idx in sample_indices(params.len(), 25, 99) {
            let fd = central_diff(&mut loss, &mut params, idx, 1e-4);
            let a = grads[idx];
            let rel = (a - fd).abs() / (a.abs() + fd.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "worst rel err {worst}");
    }

    #[test]
    fn accuracy_counts_ties_as_half() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 24,
            dropout: 0.0,
        };
        // Zeroed model scores every sequence 0: all pairs tie.
        let rm = RewardModel::zeroed(cfg).unwrap();
        let pairs = vec![
            PreferencePair { post: seq(&[4, 5]), y_w: seq(&[6]), y_l: seq(&[7]) },
            PreferencePair { post: seq(&[4, 5]), y_w: seq(&[8]), y_l: seq(&[9]) },
        ];
        assert_eq!(rm_accuracy(&rm, &pairs).unwrap(), 0.5);
    }

    #[test]
    fn flip_rate_zero_is_identity_and_rates_are_deterministic() {
        let cfg = CorpusConfig { seed: 3, n_events: 8, ..CorpusConfig::default() };
        let events = corpus::generate_corpus(&cfg).unwrap();
        let pairs = corpus::build_rm(&events, 4).unwrap();
        let same = flipped_view(&pairs, 0.0, 7, SPLIT_TAG_TRAIN);
        assert_eq!(same.len(), pairs.len());
        for (a, b) in same.iter().zip(&pairs) {
            assert_eq!(a.y_w.ids(), b.y_w.ids());
        }
        let v1 = flipped_view(&pairs, 0.4, 7, SPLIT_TAG_TRAIN);
        let v2 = flipped_view(&pairs, 0.4, 7, SPLIT_TAG_TRAIN);
        let flips1: Vec<bool> = v1
            .iter()
            .zip(&pairs)
            .map(|(a, b)| a.y_w.ids() != b.y_w.ids())
            .collect();
        let flips2: Vec<bool> = v2
            .iter()
            .zip(&pairs)
            .map(|(a, b)| a.y_w.ids() != b.y_w.ids())
            .collect();
        assert_eq!(flips1, flips2);
        let frac = flips1.iter().filter(|&&f| f).count() as f64 / flips1.len() as f64;
        assert!((frac - 0.4).abs() < 0.15, "realized flip fraction {frac}");
        // Different split tags draw different streams.
        let dev_view = flipped_view(&pairs, 0.4, 7, SPLIT_TAG_DEV);
        let flips_dev: Vec<bool> = dev_view
            .iter()
            .zip(&pairs)
            .map(|(a, b)| a.y_w.ids() != b.y_w.ids())
            .collect();
        assert_ne!(flips1, flips_dev);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CorpusConfig { seed: 4, n_events: 6, ..CorpusConfig::default() };
        let events = corpus::generate_corpus(&cfg).unwrap();
        let pairs = corpus::build_rm(&events, 4).unwrap();
        let model_cfg = ModelConfig::for_caps(cfg.vocab_size, cfg.post_cap, cfg.response_cap);
        let rm_cfg = RmConfig { epochs: 2, ..RmConfig::default() };
        let a = train_reward(
            RewardModel::init(model_cfg.clone(), 8).unwrap(),
            &pairs[6..],
            &pairs[..6],
            &rm_cfg,
        )
        .unwrap();
        let b = train_reward(
            RewardModel::init(model_cfg, 8).unwrap(),
            &pairs[6..],
            &pairs[..6],
            &rm_cfg,
        )
        .unwrap();
        assert_eq!(
            a.rm.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            b.rm.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.dev_accuracy, y.dev_accuracy);
        }
    }

    #[test]
    fn invalid_flip_rate_is_rejected() {
        let cfg = RmConfig { label_flip_rate: 0.5, ..RmConfig::default() };
        assert!(matches!(cfg.validate(), Err(TrainError::BadConfig(_))));
        let cfg = RmConfig { label_flip_rate: -0.1, ..RmConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
