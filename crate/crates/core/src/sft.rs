//! Supervised fine-tuning: next-token NLL on (post, trendy response) pairs.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::SftExample;
use crate::model::optim::OptimizerState;
use crate::model::{non_finite_error, PolicyModel};
use crate::seeding::{self, mix3, SALT_SHUFFLE};
use crate::TrainError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Early stop after this many epochs without a dev improvement.
    pub patience: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { learning_rate: 0.002, batch_size: 16, epochs: 10, seed: 0, patience: 2 }
    }
}

impl SftConfig {
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
        Ok(())
    }
}

/// One optimizer step of the loss curve. `train_nll` is the batch mean of
/// per-example nll sums; `dev_nll` (per-token mean) is filled on the last
/// step of each epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftCurvePoint {
    pub step: u64,
    pub train_nll: f64,
    pub dev_nll: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SftEpochStats {
    pub epoch: usize,
    /// Mean per-example nll over the epoch's training batches.
    pub train_nll: f64,
    /// Mean per-token nll on dev (None when no dev set was given).
    pub dev_nll: Option<f64>,
}

pub struct SftOutcome {
    pub policy: PolicyModel,
    pub curve: Vec<SftCurvePoint>,
    pub epochs: Vec<SftEpochStats>,
    /// Epoch whose dev loss selected the returned parameters.
    pub best_epoch: usize,
}

/// Mean per-token nll: total nll over total predicted tokens (response
/// tokens plus the EOS target).
pub fn mean_token_nll(policy: &PolicyModel, dataset: &[SftExample]) -> Result<f64, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for ex in dataset {
        total += policy.nll(&ex.post, &ex.gold)?;
        tokens += ex.gold.len() + 1;
    }
    Ok(total / tokens as f64)
}

/// exp(mean per-token nll); a uniform model scores exactly vocab_size.
pub fn perplexity(policy: &PolicyModel, dataset: &[SftExample]) -> Result<f64, TrainError> {
    Ok(mean_token_nll(policy, dataset)?.exp())
}

pub fn train_sft(
    policy: PolicyModel,
    train: &[SftExample],
    dev: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftOutcome, TrainError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut policy = policy;
    let mut opt = OptimizerState::new(cfg.learning_rate, policy.params.len());
    let mut grads = vec![0.0f64; policy.params.len()];
    let mut curve = Vec::new();
    let mut epochs = Vec::new();
    let mut step = 0u64;
    let mut best: Option<(f64, usize, Vec<f32>)> = None;
    let mut stall = 0usize;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut seeding::rng(mix3(cfg.seed, SALT_SHUFFLE, epoch as u64)));
        let mut epoch_loss = 0.0;
        let n_batches = order.chunks(cfg.batch_size).count();
        for (bi, batch) in order.chunks(cfg.batch_size).enumerate() {
            grads.iter_mut().for_each(|g| *g = 0.0);
            let scale = 1.0 / batch.len() as f64;
            let mut batch_loss = 0.0;
            for &i in batch {
                let ex = &train[i];
                batch_loss += policy.nll_grad(&ex.post, &ex.gold, scale, &mut grads)?;
            }
            batch_loss *= scale;
            if !batch_loss.is_finite() {
                return Err(non_finite_error("sft batch loss", &policy.params).into());
            }
            opt.apply(&mut policy.params, &grads)?;
            epoch_loss += batch_loss * batch.len() as f64;
            step += 1;
            let last_in_epoch = bi + 1 == n_batches;
            let dev_nll = if last_in_epoch && !dev.is_empty() {
                Some(mean_token_nll(&policy, dev)?)
            } else {
                None
            };
            curve.push(SftCurvePoint { step, train_nll: batch_loss, dev_nll });
        }
        let train_nll = epoch_loss / train.len() as f64;
        let dev_nll = curve.last().and_then(|p| p.dev_nll);
        epochs.push(SftEpochStats { epoch, train_nll, dev_nll });

        match dev_nll {
            Some(d) => {
                let improved = best.as_ref().map_or(true, |(b, _, _)| d < *b);
                if improved {
                    best = Some((d, epoch, policy.params.clone()));
                    stall = 0;
                } else {
                    stall += 1;
                    if stall > cfg.patience {
                        break;
                    }
                }
            }
            None => best = Some((f64::INFINITY, epoch, policy.params.clone())),
        }
    }

    let (_, best_epoch, best_params) = best.expect("at least one epoch ran");
    policy.params = best_params;
    Ok(SftOutcome { policy, curve, epochs, best_epoch })
}

/// Loss-curve CSV: step, train_nll, dev_nll (blank off epoch boundaries).
pub fn write_curve_csv(path: &Path, curve: &[SftCurvePoint]) -> Result<(), TrainError> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,train_nll,dev_nll")?;
    for p in curve {
        match p.dev_nll {
            Some(d) => writeln!(w, "{},{},{}", p.step, p.train_nll, d)?,
            None => writeln!(w, "{},{},", p.step, p.train_nll)?,
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{self, CorpusConfig, TokenSeq};
    use crate::model::ModelConfig;

    fn tiny_model(seed: u64) -> PolicyModel {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 24,
            dropout: 0.0,
        };
        PolicyModel::init(cfg, seed).unwrap()
    }

    fn ex(post: &[u32], gold: &[u32]) -> SftExample {
        SftExample {
            post: TokenSeq::new(post.to_vec()).unwrap(),
            gold: TokenSeq::new(gold.to_vec()).unwrap(),
        }
    }

    #[test]
    fn single_example_nll_collapses() {
        let policy = tiny_model(3);
        let data = vec![ex(&[4, 5, 6], &[7, 8])];
        let initial = policy.nll(&data[0].post, &data[0].gold).unwrap();
        let cfg = SftConfig {
            learning_rate: 0.01,
            batch_size: 1,
            epochs: 200,
            seed: 1,
            patience: usize::MAX,
        };
        let out = train_sft(policy, &data, &[], &cfg).unwrap();
        let trained = out.policy.nll(&data[0].post, &data[0].gold).unwrap();
        assert!(
            trained < 0.1 * initial,
            "nll {initial} should collapse, got {trained}"
        );
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = CorpusConfig { seed: 5, n_events: 6, ..CorpusConfig::default() };
        let events = corpus::generate_corpus(&cfg).unwrap();
        let data = corpus::build_sft(&events).unwrap();
        let model_cfg = ModelConfig::for_caps(cfg.vocab_size, cfg.post_cap, cfg.response_cap);
        let sft_cfg = SftConfig { epochs: 2, ..SftConfig::default() };
        let a = train_sft(
            PolicyModel::init(model_cfg.clone(), 9).unwrap(),
            &data,
            &data[..10],
            &sft_cfg,
        )
        .unwrap();
        let b = train_sft(
            PolicyModel::init(model_cfg, 9).unwrap(),
            &data,
            &data[..10],
            &sft_cfg,
        )
        .unwrap();
        assert_eq!(
            a.policy.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            b.policy.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        let curve_a: Vec<f64> = a.curve.iter().map(|p| p.train_nll).collect();
        let curve_b: Vec<f64> = b.curve.iter().map(|p| p.train_nll).collect();
        assert_eq!(curve_a, curve_b);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let policy = tiny_model(3);
        assert!(matches!(
            train_sft(policy, &[], &[], &SftConfig::default()),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn batch_loss_is_mean_of_example_nlls() {
        let policy = tiny_model(7);
        let data = vec![
            ex(&[4, 5], &[6, 7]),
            ex(&[8, 9], &[10]),
            ex(&[11], &[12, 13, 14]),
        ];
        // One epoch, one batch; the recorded batch loss must equal the mean
        // of per-example nlls under the starting parameters.
        let expect: f64 = data
            .iter()
            .map(|e| policy.nll(&e.post, &e.gold).unwrap())
            .sum::<f64>()
            / data.len() as f64;
        let cfg = SftConfig {
            learning_rate: 1e-6,
            batch_size: 3,
            epochs: 1,
            seed: 0,
            patience: 0,
        };
        let out = train_sft(policy, &data, &[], &cfg).unwrap();
        assert!((out.curve[0].train_nll - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_model_perplexity_is_vocab_size() {
        let cfg = ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 24,
            dropout: 0.0,
        };
        let policy = PolicyModel::zeroed(cfg).unwrap();
        let data = vec![ex(&[4, 5, 6], &[7, 8]), ex(&[9], &[10, 11, 12])];
        let ppl = perplexity(&policy, &data).unwrap();
        assert!((ppl - 16.0).abs() < 1e-9, "{ppl}");
        assert!(perplexity(&tiny_model(1), &data).unwrap() >= 1.0);
    }

    #[test]
    fn dev_selection_keeps_best_epoch() {
        let cfg = CorpusConfig { seed: 2, n_events: 6, ..CorpusConfig::default() };
        let events = corpus::generate_corpus(&cfg).unwrap();
        let data = corpus::build_sft(&events).unwrap();
        let model_cfg = ModelConfig::for_caps(cfg.vocab_size, cfg.post_cap, cfg.response_cap);
        let out = train_sft(
            PolicyModel::init(model_cfg, 4).unwrap(),
            &data[10..],
            &data[..10],
            &SftConfig { epochs: 3, ..SftConfig::default() },
        )
        .unwrap();
        let best_dev = out.epochs[out.best_epoch].dev_nll.unwrap();
        for e in &out.epochs {
            assert!(best_dev <= e.dev_nll.unwrap() + 1e-12);
        }
        // Returned params really are the best epoch's checkpoint.
        let dev = &data[..10];
        let reported = mean_token_nll(&out.policy, dev).unwrap();
        assert!((reported - best_dev).abs() < 1e-9);
    }
}
