//! Command-line front end: corpus generation, the three training stages,
//! evaluation, and the experiment driver.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use trendlm::clppo::{self, CurriculumConfig, PpoConfig};
use trendlm::corpus::{self, CorpusConfig, DatasetBundle, EventRecord, SFT_GOLDS_PER_EVENT};
use trendlm::harness::{self, Algo};
use trendlm::metrics::{evaluate_top_k, MetricReport};
use trendlm::model::checkpoint;
use trendlm::model::sampler::SamplerConfig;
use trendlm::model::{ModelConfig, PolicyModel, RewardModel};
use trendlm::reward::{self, RmConfig};
use trendlm::sft::{self, SftConfig};

#[derive(Parser)]
#[command(
    name = "trendlm",
    about = "Trend-aware response generation: corpus, SFT, reward model, curriculum PPO, evaluation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CorpusArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    n_events: usize,
    #[arg(long, default_value_t = 64)]
    vocab_size: u32,
    #[arg(long, default_value_t = 8)]
    n_topics: u32,
    #[arg(long, default_value_t = 48)]
    post_cap: usize,
    #[arg(long, default_value_t = 16)]
    response_cap: usize,
    #[arg(long, default_value_t = 1.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 20)]
    responses_per_event: usize,
    /// Read events from a JSONL file instead of regenerating them.
    #[arg(long)]
    events: Option<PathBuf>,
}

impl CorpusArgs {
    fn config(&self) -> CorpusConfig {
        CorpusConfig {
            seed: self.seed,
            n_events: self.n_events,
            vocab_size: self.vocab_size,
            n_topics: self.n_topics,
            post_cap: self.post_cap,
            response_cap: self.response_cap,
            noise_sigma: self.noise_sigma,
            responses_per_event: self.responses_per_event,
        }
    }

    fn load(&self) -> Result<(CorpusConfig, Vec<EventRecord>)> {
        let cfg = self.config();
        let events = match &self.events {
            Some(path) => corpus::read_events(path, &cfg)
                .with_context(|| format!("reading events from {}", path.display()))?,
            None => corpus::generate_corpus(&cfg)?,
        };
        Ok((cfg, events))
    }
}

#[derive(Args, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 2)]
    n_heads: usize,
}

impl ModelArgs {
    fn config(&self, corpus: &CorpusConfig) -> ModelConfig {
        let mut cfg =
            ModelConfig::for_caps(corpus.vocab_size, corpus.post_cap, corpus.response_cap);
        cfg.d_model = self.d_model;
        cfg.n_layers = self.n_layers;
        cfg.n_heads = self.n_heads;
        cfg
    }
}

#[derive(Args, Clone)]
struct SamplerArgs {
    #[arg(long, default_value_t = 0.7)]
    top_p: f64,
    #[arg(long, default_value_t = 0.95)]
    temperature: f64,
    #[arg(long, default_value_t = 16)]
    max_new_tokens: usize,
}

impl SamplerArgs {
    fn config(&self) -> SamplerConfig {
        SamplerConfig {
            top_p: self.top_p,
            temperature: self.temperature,
            max_new_tokens: self.max_new_tokens,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and dataset bundle.
    GenCorpus {
        #[command(flatten)]
        corpus: CorpusArgs,
        /// Preference pairs per positive for the reward-model split.
        #[arg(long, default_value_t = 4)]
        negatives_per_positive: usize,
        /// Output directory for events.jsonl and the dataset files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning on (post, gold response) pairs.
    TrainSft {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 0.002)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 2)]
        patience: usize,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss-curve CSV output path.
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Pairwise reward-model training on preference pairs.
    TrainRm {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        model: ModelArgs,
        /// Warm-start from a policy checkpoint (shared trunk); random init
        /// when omitted.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, default_value_t = 0.001)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long, default_value_t = 0.0)]
        flip_rate: f64,
        #[arg(long, default_value_t = 4)]
        negatives_per_positive: usize,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// RL fine-tuning with PPO or curriculum PPO.
    TrainRl {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        /// Policy checkpoint to start from (usually the SFT output).
        #[arg(long)]
        policy: PathBuf,
        /// Reward-model checkpoint.
        #[arg(long)]
        rm: PathBuf,
        /// ppo = neutralized configuration; clppo = full curriculum.
        #[arg(long, default_value = "clppo")]
        algo: String,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 0.2)]
        mu: f64,
        #[arg(long, default_value_t = 1.0)]
        lambda0: f64,
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        train_seed: u64,
        #[arg(long, default_value_t = 16)]
        batch_size: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long)]
        out: PathBuf,
        /// Per-step stats CSV output path.
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Score a policy's top-k generations on the held-out test posts.
    Eval {
        #[command(flatten)]
        corpus: CorpusArgs,
        #[command(flatten)]
        sampler: SamplerArgs,
        #[arg(long)]
        policy: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5])]
        ks: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        eval_seed: u64,
        /// Also write the reports as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a full experiment file: all (variant, seed) pipelines plus
    /// comparison tables.
    RunExp {
        /// Flat key-value experiment file.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory for manifest, stats, and comparisons.
        #[arg(long)]
        out: PathBuf,
        /// Baseline variant for comparisons; defaults to the first variant.
        #[arg(long)]
        baseline: Option<String>,
    },
}

fn report_table(reports: &[MetricReport]) -> String {
    let mut out = format!(
        "{:<3} {:>8} {:>8} {:>8} {:>8} {:>12} {:>12}\n",
        "k", "rouge1", "rouge2", "rouge_l", "bleu", "m_distinct_1", "m_distinct_2"
    );
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
    for r in reports {
        out.push_str(&format!(
            "{:<3} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>12} {:>12}\n",
            r.k,
            r.rouge1,
            r.rouge2,
            r.rouge_l,
            r.bleu,
            opt(r.m_distinct_1),
            opt(r.m_distinct_2)
        ));
    }
    out
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenCorpus { corpus: args, negatives_per_positive, out } => {
            let (cfg, events) = args.load()?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            corpus::write_events(&out.join("events.jsonl"), &events)?;
            let bundle = DatasetBundle::build(&events, cfg.seed, negatives_per_positive)?;
            corpus::save_bundle(&out, &cfg, &bundle)?;
            println!(
                "wrote {} events and dataset bundle ({} sft train examples, {} rm train pairs, {} rl posts) to {}",
                events.len(),
                bundle.sft.train.len(),
                bundle.rm.train.len(),
                bundle.rl.train.len(),
                out.display()
            );
        }
        Command::TrainSft {
            corpus: args,
            model,
            lr,
            batch_size,
            epochs,
            patience,
            train_seed,
            out,
            curve,
        } => {
            let (cfg, events) = args.load()?;
            let (train, dev, _) = corpus::split_events(&events, cfg.seed)?;
            let train = corpus::build_sft(&train)?;
            let dev = corpus::build_sft(&dev)?;
            let model_cfg = model.config(&cfg);
            let init = PolicyModel::init(model_cfg, train_seed)?;
            let sft_cfg = SftConfig {
                learning_rate: lr,
                batch_size,
                epochs,
                seed: train_seed,
                patience,
            };
            let outcome = sft::train_sft(init, &train, &dev, &sft_cfg)?;
            checkpoint::save_policy(&out, &outcome.policy)?;
            if let Some(path) = curve {
                sft::write_curve_csv(&path, &outcome.curve)?;
            }
            let ppl = sft::perplexity(&outcome.policy, &dev)?;
            println!(
                "sft done: best epoch {}, dev perplexity {:.3}, checkpoint {}",
                outcome.best_epoch,
                ppl,
                out.display()
            );
        }
        Command::TrainRm {
            corpus: args,
            model,
            init,
            lr,
            batch_size,
            epochs,
            flip_rate,
            negatives_per_positive,
            train_seed,
            out,
            curve,
        } => {
            let (cfg, events) = args.load()?;
            let (train, dev, _) = corpus::split_events(&events, cfg.seed)?;
            let train = corpus::build_rm(&train, negatives_per_positive)?;
            let dev = corpus::build_rm(&dev, negatives_per_positive)?;
            let model_cfg = model.config(&cfg);
            let rm_init = match init {
                Some(path) => {
                    let policy = checkpoint::load_policy(&path, Some(cfg.vocab_size))?;
                    RewardModel::from_policy(&policy)
                }
                None => RewardModel::init(model_cfg, train_seed)?,
            };
            let rm_cfg = RmConfig {
                learning_rate: lr,
                batch_size,
                epochs,
                seed: train_seed,
                label_flip_rate: flip_rate,
            };
            let outcome = reward::train_reward(rm_init, &train, &dev, &rm_cfg)?;
            checkpoint::save_reward(&out, &outcome.rm)?;
            if let Some(path) = curve {
                reward::write_rm_curve_csv(&path, &outcome.curve)?;
            }
            let acc = outcome.curve[outcome.best_epoch].dev_accuracy;
            println!(
                "rm done: best epoch {}, dev accuracy {:.3}, checkpoint {}",
                outcome.best_epoch,
                acc,
                out.display()
            );
        }
        Command::TrainRl {
            corpus: args,
            sampler,
            policy,
            rm,
            algo,
            alpha,
            k,
            mu,
            lambda0,
            m,
            steps,
            train_seed,
            batch_size,
            lr,
            out,
            stats,
        } => {
            let (cfg, events) = args.load()?;
            let (train, _, _) = corpus::split_events(&events, cfg.seed)?;
            let rl = corpus::build_rl(&train)?;
            let policy = checkpoint::load_policy(&policy, Some(cfg.vocab_size))?;
            let rm = checkpoint::load_reward(&rm, Some(cfg.vocab_size))?;
            let algo: Algo = algo.parse()?;
            let ppo = PpoConfig {
                batch_size,
                total_steps: steps,
                seed: train_seed,
                learning_rate: lr,
                ..PpoConfig::default()
            };
            let sampler = sampler.config();
            let (trained, step_stats) = match algo {
                Algo::Clppo => {
                    let cur = CurriculumConfig { alpha, k, lambda0, mu, m };
                    clppo::train_clppo(policy, &rm, &rl, &cur, &ppo, &sampler)?
                }
                Algo::Ppo => clppo::train_ppo(policy, &rm, &rl, m, &ppo, &sampler)?,
            };
            checkpoint::save_policy(&out, &trained)?;
            if let Some(path) = stats {
                clppo::write_stats_csv(&path, &step_stats)?;
            }
            let updated = step_stats.iter().filter(|s| s.policy_loss.is_some()).count();
            println!(
                "{algo} done: {} steps ({} with updates), mean r^e last step {:.4}, checkpoint {}",
                step_stats.len(),
                updated,
                step_stats.last().map(|s| s.mean_re).unwrap_or(f64::NAN),
                out.display()
            );
        }
        Command::Eval { corpus: args, sampler, policy, ks, eval_seed, json } => {
            let (cfg, events) = args.load()?;
            let (_, _, test) = corpus::split_events(&events, cfg.seed)?;
            let policy = checkpoint::load_policy(&policy, Some(cfg.vocab_size))?;
            let posts: Vec<(u64, corpus::TokenSeq)> =
                test.iter().map(|ev| (ev.event_id, ev.post.clone())).collect();
            let golds = test
                .iter()
                .map(|ev| {
                    let g = ev.responses[..SFT_GOLDS_PER_EVENT.min(ev.responses.len())]
                        .iter()
                        .map(|r| r.text.clone())
                        .collect::<Vec<_>>();
                    (ev.event_id, g)
                })
                .collect();
            let sampler = sampler.config();
            let k_max = *ks.iter().max().context("at least one k is required")?;
            let gens =
                harness::generate_for_eval(&policy, &posts, &sampler, k_max, eval_seed)?;
            let mut reports = Vec::new();
            for &k in &ks {
                let head = gens
                    .iter()
                    .map(|(id, g)| (*id, g[..k].to_vec()))
                    .collect();
                reports.push(evaluate_top_k(&head, &golds, k)?);
            }
            let json_text = serde_json::to_string_pretty(&reports)?;
            if let Some(path) = &json {
                std::fs::write(path, &json_text)?;
            }
            println!("{json_text}");
            print!("{}", report_table(&reports));
        }
        Command::RunExp { spec, out, baseline } => {
            let spec = harness::read_experiment_file(&spec)?;
            std::fs::create_dir_all(&out)
                .with_context(|| format!("creating {}", out.display()))?;
            let result = harness::run_experiment(&spec)?;
            harness::write_manifest_json(&out.join("manifest.json"), &result.manifest)?;
            for art in &result.artifacts {
                if !art.rl_stats.is_empty() {
                    let name = format!("rl_stats_{}_seed{}.csv", art.variant, art.seed);
                    clppo::write_stats_csv(&out.join(name), &art.rl_stats)?;
                }
            }
            let base = baseline.unwrap_or_else(|| spec.variants[0].name.clone());
            for v in &spec.variants {
                if v.name == base {
                    continue;
                }
                let cmp = harness::compare_report(&result.manifest, &base, &v.name)?;
                let stem = format!("compare_{}_vs_{}", base, v.name);
                std::fs::write(out.join(format!("{stem}.csv")), harness::compare_to_csv(&cmp))?;
                let text = harness::compare_to_text(&cmp);
                std::fs::write(out.join(format!("{stem}.txt")), &text)?;
                println!("== {} vs {} ==\n{text}", base, v.name);
            }
            let failures = result.manifest.runs.iter().filter(|r| r.error.is_some()).count();
            println!(
                "experiment done: {} runs ({} failed), manifest {} (content hash {})",
                result.manifest.runs.len(),
                failures,
                out.join("manifest.json").display(),
                &result.manifest.content_hash[..16]
            );
        }
    }
    Ok(())
}
