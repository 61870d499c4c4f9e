//! End-to-end experiment driver: per (variant, seed) it trains the full
//! pipeline (supervised fine-tuning, reward model, RL), scores top-k
//! generations on held-out posts, and assembles a reproducible manifest of
//! content hashes, metric reports, and stage timings.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clppo::{train_clppo, train_ppo, CurriculumConfig, PpoConfig, StepStats};
use crate::corpus::{
    self, CorpusConfig, EventRecord, TokenSeq, SFT_GOLDS_PER_EVENT,
};
use crate::metrics::{evaluate_top_k, MetricReport};
use crate::model::sampler::{sample_top_p, SamplerConfig};
use crate::model::{ModelConfig, PolicyModel, RewardModel};
use crate::reward::{train_reward, RmConfig};
use crate::seeding::{
    mix, mix3, SALT_STAGE_EVAL, SALT_STAGE_RL, SALT_STAGE_RM, SALT_STAGE_SFT,
};
use crate::sft::{train_sft, SftConfig};
use crate::TrainError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    Ppo,
    Clppo,
}

impl std::str::FromStr for Algo {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, TrainError> {
        match s {
            "ppo" => Ok(Algo::Ppo),
            "clppo" => Ok(Algo::Clppo),
            other => Err(TrainError::BadConfig(format!(
                "unknown algo '{other}' (expected ppo or clppo)"
            ))),
        }
    }
}

impl std::fmt::Display for Algo {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Algo::Ppo => "ppo",
            Algo::Clppo => "clppo",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantSpec {
    pub name: String,
    pub algo: Algo,
    /// Curriculum knobs; for plain PPO only `m` (samples per post) is used.
    pub curriculum: CurriculumConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub sft: SftConfig,
    pub rm: RmConfig,
    pub ppo: PpoConfig,
    pub sampler: SamplerConfig,
    /// Preference pairs per positive when building reward-model data.
    pub negatives_per_positive: usize,
    pub variants: Vec<VariantSpec>,
    pub seeds: Vec<u64>,
    pub eval_ks: Vec<usize>,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let model =
            ModelConfig::for_caps(corpus.vocab_size, corpus.post_cap, corpus.response_cap);
        ExperimentSpec {
            corpus,
            model,
            sft: SftConfig::default(),
            rm: RmConfig::default(),
            ppo: PpoConfig::default(),
            sampler: SamplerConfig::default(),
            negatives_per_positive: 4,
            variants: vec![
                VariantSpec {
                    name: "ppo".into(),
                    algo: Algo::Ppo,
                    curriculum: CurriculumConfig::neutral(CurriculumConfig::default().m),
                },
                VariantSpec {
                    name: "clppo".into(),
                    algo: Algo::Clppo,
                    curriculum: CurriculumConfig::default(),
                },
            ],
            seeds: vec![1, 2, 3],
            eval_ks: vec![1, 3, 5],
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.corpus.validate()?;
        self.model.validate()?;
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(TrainError::BadConfig(format!(
                "model vocab {} != corpus vocab {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        let need = self.corpus.post_cap + self.corpus.response_cap + 2;
        if self.model.max_context < need {
            return Err(TrainError::BadConfig(format!(
                "max_context {} cannot hold post + response + markers ({need})",
                self.model.max_context
            )));
        }
        self.sft.validate()?;
        self.rm.validate()?;
        self.ppo.validate()?;
        self.sampler.validate()?;
        if self.negatives_per_positive < 1 {
            return Err(TrainError::BadConfig("negatives_per_positive must be >= 1".into()));
        }
        // Preference pairing draws negatives from responses ranked below the
        // supervised golds; fail here rather than mid-run.
        let pool_floor = corpus::SFT_GOLDS_PER_EVENT
            + corpus::TOP_TRENDY
            + self.negatives_per_positive;
        if self.corpus.responses_per_event < pool_floor {
            return Err(TrainError::BadConfig(format!(
                "responses_per_event {} leaves too small a negative pool; need >= {pool_floor}",
                self.corpus.responses_per_event
            )));
        }
        if self.seeds.is_empty() {
            return Err(TrainError::BadConfig("at least one seed is required".into()));
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(TrainError::BadConfig("seeds must be unique".into()));
        }
        if self.variants.is_empty() {
            return Err(TrainError::BadConfig("at least one variant is required".into()));
        }
        let mut names: Vec<&str> = self.variants.iter().map(|v| v.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.variants.len() {
            return Err(TrainError::BadConfig("variant names must be unique".into()));
        }
        for v in &self.variants {
            v.curriculum
                .validate()
                .map_err(|e| TrainError::BadConfig(format!("variant '{}': {e}", v.name)))?;
        }
        if self.eval_ks.is_empty() {
            return Err(TrainError::BadConfig("at least one eval k is required".into()));
        }
        let mut ks = self.eval_ks.clone();
        ks.sort_unstable();
        ks.dedup();
        if ks.len() != self.eval_ks.len() {
            return Err(TrainError::BadConfig("eval_ks must be unique".into()));
        }
        for &k in &self.eval_ks {
            if !matches!(k, 1 | 3 | 5) {
                return Err(TrainError::BadConfig(format!("eval k must be 1, 3, or 5, got {k}")));
            }
        }
        Ok(())
    }
}

/// Wall-clock seconds per stage; excluded from content hashing.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageTimings {
    pub sft: f64,
    pub rm: f64,
    pub rl: f64,
    pub eval: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// Content digests of the stage outputs (config + parameters).
    pub sft_hash: String,
    pub rm_hash: String,
    pub rl_hash: String,
    /// One report per eval k, in eval_ks order; empty when the run failed.
    pub reports: Vec<MetricReport>,
    pub timings: StageTimings,
    pub error: Option<String>,
}

/// Mean and population standard deviation of one metric over seeds.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AggregateRow {
    pub variant: String,
    pub k: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    /// Digest of the full experiment spec.
    pub spec_digest: String,
    /// Digest of the generated corpus.
    pub corpus_hash: String,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<AggregateRow>,
    /// Digest over everything above except wall-clock timings.
    pub content_hash: String,
}

/// Digest of a model as content: config JSON followed by little-endian
/// parameter bytes. Equal digests mean bitwise-equal models.
pub fn model_digest(config: &ModelConfig, params: &[f32]) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(config).expect("config serializes"));
    for p in params {
        h.update(p.to_le_bytes());
    }
    crate::hex(&h.finalize())
}

fn corpus_digest(events: &[EventRecord]) -> String {
    let mut h = Sha256::new();
    for ev in events {
        h.update(serde_json::to_vec(ev).expect("event serializes"));
        h.update(b"\n");
    }
    crate::hex(&h.finalize())
}

fn spec_digest(spec: &ExperimentSpec) -> String {
    let bytes = serde_json::to_vec(spec).expect("spec serializes");
    crate::hex(&Sha256::digest(&bytes))
}

impl RunManifest {
    /// Recomputes the deterministic digest; timings never enter it.
    pub fn compute_content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.spec_digest.as_bytes());
        h.update(self.corpus_hash.as_bytes());
        for r in &self.runs {
            h.update(r.variant.as_bytes());
            h.update(r.seed.to_le_bytes());
            h.update(r.sft_hash.as_bytes());
            h.update(r.rm_hash.as_bytes());
            h.update(r.rl_hash.as_bytes());
            h.update(serde_json::to_vec(&r.reports).expect("reports serialize"));
            h.update(r.error.as_deref().unwrap_or("").as_bytes());
            h.update(b"\n");
        }
        for a in &self.aggregates {
            h.update(serde_json::to_vec(a).expect("aggregate serializes"));
        }
        crate::hex(&h.finalize())
    }
}

/// Per-run data that stays in memory: RL step statistics keyed like the
/// manifest's runs (same order).
pub struct RunArtifacts {
    pub variant: String,
    pub seed: u64,
    pub rl_stats: Vec<StepStats>,
}

pub struct ExperimentOutput {
    pub manifest: RunManifest,
    pub artifacts: Vec<RunArtifacts>,
}

struct SharedStages {
    policy: PolicyModel,
    rm: RewardModel,
    sft_hash: String,
    rm_hash: String,
    sft_secs: f64,
    rm_secs: f64,
}

/// Supervised fine-tuning and reward-model training for one seed; every
/// variant under that seed reuses the result.
fn run_shared_stages(
    spec: &ExperimentSpec,
    data: &StageData,
    seed: u64,
) -> Result<SharedStages, TrainError> {
    let t0 = Instant::now();
    let sft_seed = mix(seed, SALT_STAGE_SFT);
    let init = PolicyModel::init(spec.model.clone(), sft_seed)?;
    let sft_cfg = SftConfig { seed: sft_seed, ..spec.sft.clone() };
    let sft = train_sft(init, &data.sft_train, &data.sft_dev, &sft_cfg)?;
    let sft_secs = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let rm_seed = mix(seed, SALT_STAGE_RM);
    let rm_init = RewardModel::from_policy(&sft.policy);
    let rm_cfg = RmConfig { seed: rm_seed, ..spec.rm.clone() };
    let rm = train_reward(rm_init, &data.rm_train, &data.rm_dev, &rm_cfg)?;
    let rm_secs = t1.elapsed().as_secs_f64();

    Ok(SharedStages {
        sft_hash: model_digest(&sft.policy.config, &sft.policy.params),
        rm_hash: model_digest(&rm.rm.config, &rm.rm.params),
        policy: sft.policy,
        rm: rm.rm,
        sft_secs,
        rm_secs,
    })
}

struct StageData {
    sft_train: Vec<corpus::SftExample>,
    sft_dev: Vec<corpus::SftExample>,
    rm_train: Vec<corpus::PreferencePair>,
    rm_dev: Vec<corpus::PreferencePair>,
    rl_train: Vec<corpus::RlExample>,
    /// Top gold responses per held-out test post, keyed by event id.
    eval_golds: BTreeMap<u64, Vec<TokenSeq>>,
    test_posts: Vec<(u64, TokenSeq)>,
}

fn build_stage_data(spec: &ExperimentSpec, events: &[EventRecord]) -> Result<StageData, TrainError> {
    let (train, dev, test) = corpus::split_events(events, spec.corpus.seed)?;
    let npp = spec.negatives_per_positive;
    let eval_golds = test
        .iter()
        .map(|ev| {
            let golds = ev.responses[..SFT_GOLDS_PER_EVENT.min(ev.responses.len())]
                .iter()
                .map(|r| r.text.clone())
                .collect();
            (ev.event_id, golds)
        })
        .collect();
    Ok(StageData {
        sft_train: corpus::build_sft(&train)?,
        sft_dev: corpus::build_sft(&dev)?,
        rm_train: corpus::build_rm(&train, npp)?,
        rm_dev: corpus::build_rm(&dev, npp)?,
        rl_train: corpus::build_rl(&train)?,
        eval_golds,
        test_posts: test.iter().map(|ev| (ev.event_id, ev.post.clone())).collect(),
    })
}

/// k generations per held-out post under per-(post, index) seeds. Takes the
/// policy immutably, so evaluation can never change what it measures.
pub fn generate_for_eval(
    policy: &PolicyModel,
    posts: &[(u64, TokenSeq)],
    sampler: &SamplerConfig,
    k: usize,
    seed: u64,
) -> Result<BTreeMap<u64, Vec<TokenSeq>>, TrainError> {
    let mut out = BTreeMap::new();
    for (post_id, post) in posts {
        let mut gens = Vec::with_capacity(k);
        for j in 0..k {
            gens.push(sample_top_p(policy, post, sampler, mix3(seed, *post_id, j as u64))?);
        }
        out.insert(*post_id, gens);
    }
    Ok(out)
}

fn eval_reports(
    policy: &PolicyModel,
    data: &StageData,
    sampler: &SamplerConfig,
    eval_ks: &[usize],
    seed: u64,
) -> Result<Vec<MetricReport>, TrainError> {
    let k_max = *eval_ks.iter().max().expect("eval_ks validated non-empty");
    let gens = generate_for_eval(policy, &data.test_posts, sampler, k_max, seed)?;
    let mut reports = Vec::with_capacity(eval_ks.len());
    for &k in eval_ks {
        let head: BTreeMap<u64, Vec<TokenSeq>> = gens
            .iter()
            .map(|(id, g)| (*id, g[..k].to_vec()))
            .collect();
        reports.push(evaluate_top_k(&head, &data.eval_golds, k)?);
    }
    Ok(reports)
}

/// The metric columns of a report, in fixed output order.
pub fn report_fields(r: &MetricReport) -> Vec<(&'static str, f64)> {
    let mut out = vec![
        ("rouge1", r.rouge1),
        ("rouge2", r.rouge2),
        ("rouge_l", r.rouge_l),
        ("bleu", r.bleu),
    ];
    if let Some(v) = r.m_distinct_1 {
        out.push(("m_distinct_1", v));
    }
    if let Some(v) = r.m_distinct_2 {
        out.push(("m_distinct_2", v));
    }
    out
}

fn aggregate(spec: &ExperimentSpec, runs: &[RunRecord]) -> Vec<AggregateRow> {
    let mut rows = Vec::new();
    for v in &spec.variants {
        let ok_runs: Vec<&RunRecord> = runs
            .iter()
            .filter(|r| r.variant == v.name && r.error.is_none())
            .collect();
        if ok_runs.is_empty() {
            continue;
        }
        for (ki, &k) in spec.eval_ks.iter().enumerate() {
            let fields: Vec<Vec<(&'static str, f64)>> =
                ok_runs.iter().map(|r| report_fields(&r.reports[ki])).collect();
            for (mi, &(name, _)) in fields[0].iter().enumerate() {
                let vals: Vec<f64> = fields.iter().map(|f| f[mi].1).collect();
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                rows.push(AggregateRow {
                    variant: v.name.clone(),
                    k,
                    metric: name.to_string(),
                    mean,
                    std: var.max(0.0).sqrt(),
                    n_seeds: vals.len(),
                });
            }
        }
    }
    rows
}

/// Runs every (variant, seed) combination: shared SFT and reward-model
/// stages per seed, then RL and evaluation per variant. Stage failures are
/// recorded on the affected runs and the rest continue.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutput, TrainError> {
    spec.validate()?;
    let events = corpus::generate_corpus(&spec.corpus)?;
    let corpus_hash = corpus_digest(&events);
    let data = build_stage_data(spec, &events)?;

    let shared: Vec<(u64, Result<SharedStages, String>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_shared_stages(spec, &data, seed).map_err(|e| e.to_string())))
        .collect();

    let jobs: Vec<(usize, usize)> = (0..spec.variants.len())
        .flat_map(|vi| (0..spec.seeds.len()).map(move |si| (vi, si)))
        .collect();
    let mut results: Vec<(RunRecord, Vec<StepStats>)> = jobs
        .par_iter()
        .map(|&(vi, si)| {
            let variant = &spec.variants[vi];
            let seed = spec.seeds[si];
            let mut record = RunRecord {
                variant: variant.name.clone(),
                seed,
                sft_hash: String::new(),
                rm_hash: String::new(),
                rl_hash: String::new(),
                reports: Vec::new(),
                timings: StageTimings::default(),
                error: None,
            };
            let stages = match &shared[si].1 {
                Ok(s) => s,
                Err(e) => {
                    record.error = Some(e.clone());
                    return (record, Vec::new());
                }
            };
            record.sft_hash = stages.sft_hash.clone();
            record.rm_hash = stages.rm_hash.clone();
            record.timings.sft = stages.sft_secs;
            record.timings.rm = stages.rm_secs;

            let t0 = Instant::now();
            let ppo_cfg = PpoConfig { seed: mix(seed, SALT_STAGE_RL), ..spec.ppo.clone() };
            let rl = match variant.algo {
                Algo::Clppo => train_clppo(
                    stages.policy.clone(),
                    &stages.rm,
                    &data.rl_train,
                    &variant.curriculum,
                    &ppo_cfg,
                    &spec.sampler,
                ),
                Algo::Ppo => train_ppo(
                    stages.policy.clone(),
                    &stages.rm,
                    &data.rl_train,
                    variant.curriculum.m,
                    &ppo_cfg,
                    &spec.sampler,
                ),
            };
            let (policy, stats) = match rl {
                Ok(x) => x,
                Err(e) => {
                    record.error = Some(format!("rl stage: {e}"));
                    return (record, Vec::new());
                }
            };
            record.timings.rl = t0.elapsed().as_secs_f64();
            record.rl_hash = model_digest(&policy.config, &policy.params);

            let t1 = Instant::now();
            match eval_reports(
                &policy,
                &data,
                &spec.sampler,
                &spec.eval_ks,
                mix(seed, SALT_STAGE_EVAL),
            ) {
                Ok(reports) => record.reports = reports,
                Err(e) => record.error = Some(format!("eval stage: {e}")),
            }
            record.timings.eval = t1.elapsed().as_secs_f64();
            (record, stats)
        })
        .collect();

    let mut runs = Vec::with_capacity(results.len());
    let mut artifacts = Vec::with_capacity(results.len());
    for (record, stats) in results.drain(..) {
        artifacts.push(RunArtifacts {
            variant: record.variant.clone(),
            seed: record.seed,
            rl_stats: stats,
        });
        runs.push(record);
    }
    let aggregates = aggregate(spec, &runs);
    let mut manifest = RunManifest {
        spec_digest: spec_digest(spec),
        corpus_hash,
        runs,
        aggregates,
        content_hash: String::new(),
    };
    manifest.content_hash = manifest.compute_content_hash();
    Ok(ExperimentOutput { manifest, artifacts })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareRow {
    pub k: usize,
    pub metric: String,
    pub baseline_mean: f64,
    pub test_mean: f64,
    /// test minus baseline.
    pub delta: f64,
    /// Seeds where the test variant strictly beats the baseline.
    pub test_wins: usize,
    pub n_seeds: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub baseline: String,
    pub test: String,
    pub rows: Vec<CompareRow>,
}

/// Pairs the two variants' successful runs seed by seed and reports the
/// per-metric mean delta plus the per-seed win count.
pub fn compare_report(
    manifest: &RunManifest,
    baseline: &str,
    test: &str,
) -> Result<CompareReport, TrainError> {
    let collect = |name: &str| -> Vec<&RunRecord> {
        manifest.runs.iter().filter(|r| r.variant == name).collect()
    };
    for name in [baseline, test] {
        if collect(name).is_empty() {
            return Err(TrainError::BadConfig(format!(
                "variant '{name}' is not in the manifest"
            )));
        }
    }
    let paired: Vec<(&RunRecord, &RunRecord)> = collect(baseline)
        .into_iter()
        .filter(|r| r.error.is_none())
        .filter_map(|b| {
            collect(test)
                .into_iter()
                .find(|t| t.seed == b.seed && t.error.is_none())
                .map(|t| (b, t))
        })
        .collect();
    if paired.is_empty() {
        return Err(TrainError::BadConfig(format!(
            "no seed has successful runs for both '{baseline}' and '{test}'"
        )));
    }
    let n_reports = paired[0].0.reports.len();
    let mut rows = Vec::new();
    for ki in 0..n_reports {
        let k = paired[0].0.reports[ki].k;
        let base_fields: Vec<Vec<(&'static str, f64)>> =
            paired.iter().map(|(b, _)| report_fields(&b.reports[ki])).collect();
        let test_fields: Vec<Vec<(&'static str, f64)>> =
            paired.iter().map(|(_, t)| report_fields(&t.reports[ki])).collect();
        for mi in 0..base_fields[0].len() {
            let name = base_fields[0][mi].0;
            let b_vals: Vec<f64> = base_fields.iter().map(|f| f[mi].1).collect();
            let t_vals: Vec<f64> = test_fields.iter().map(|f| f[mi].1).collect();
            let n = paired.len() as f64;
            let b_mean = b_vals.iter().sum::<f64>() / n;
            let t_mean = t_vals.iter().sum::<f64>() / n;
            rows.push(CompareRow {
                k,
                metric: name.to_string(),
                baseline_mean: b_mean,
                test_mean: t_mean,
                delta: t_mean - b_mean,
                test_wins: b_vals.iter().zip(&t_vals).filter(|(b, t)| t > b).count(),
                n_seeds: paired.len(),
            });
        }
    }
    Ok(CompareReport { baseline: baseline.to_string(), test: test.to_string(), rows })
}

pub fn compare_to_csv(report: &CompareReport) -> String {
    let mut out = String::from("k,metric,baseline_mean,test_mean,delta,test_wins,n_seeds\n");
    for r in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.k, r.metric, r.baseline_mean, r.test_mean, r.delta, r.test_wins, r.n_seeds
        ));
    }
    out
}

/// Aligned text table of a comparison, mean columns to four decimals.
pub fn compare_to_text(report: &CompareReport) -> String {
    let mut out = format!(
        "{:<3} {:<14} {:>12} {:>12} {:>9} {:>6}\n",
        "k", "metric", &report.baseline, &report.test, "delta", "wins"
    );
    for r in &report.rows {
        out.push_str(&format!(
            "{:<3} {:<14} {:>12.4} {:>12.4} {:>+9.4} {:>3}/{}\n",
            r.k, r.metric, r.baseline_mean, r.test_mean, r.delta, r.test_wins, r.n_seeds
        ));
    }
    out
}

pub fn write_manifest_json(path: &Path, manifest: &RunManifest) -> Result<(), TrainError> {
    let text = serde_json::to_string_pretty(manifest)
        .map_err(|e| TrainError::BadConfig(format!("manifest serialization: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses the flat key-value experiment format: one `key = value` per line,
/// `#` comments, unknown keys rejected. Variants come from
/// `variant.<name>.<field>` lines and keep first-appearance order.
pub fn parse_experiment_file(text: &str) -> Result<ExperimentSpec, TrainError> {
    let mut spec = ExperimentSpec::default();
    spec.variants.clear();
    let mut variant_order: Vec<String> = Vec::new();
    let mut variant_algos: BTreeMap<String, Algo> = BTreeMap::new();
    let mut variant_curs: BTreeMap<String, CurriculumConfig> = BTreeMap::new();
    let mut model_dims: (usize, usize, usize) =
        (spec.model.d_model, spec.model.n_layers, spec.model.n_heads);

    fn parse_as<T: std::str::FromStr>(key: &str, val: &str) -> Result<T, TrainError>
    where
        T::Err: std::fmt::Display,
    {
        val.parse::<T>().map_err(|e| {
            TrainError::BadConfig(format!("key '{key}': cannot parse '{val}': {e}"))
        })
    }

    fn parse_list<T: std::str::FromStr>(key: &str, val: &str) -> Result<Vec<T>, TrainError>
    where
        T::Err: std::fmt::Display,
    {
        val.split(',')
            .map(|item| parse_as::<T>(key, item.trim()))
            .collect()
    }

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, val) = line.split_once('=').ok_or_else(|| {
            TrainError::BadConfig(format!("line {}: expected 'key = value'", lineno + 1))
        })?;
        let key = key.trim();
        let val = val.trim();
        match key {
            "corpus.seed" => spec.corpus.seed = parse_as(key, val)?,
            "corpus.n_events" => spec.corpus.n_events = parse_as(key, val)?,
            "corpus.vocab_size" => spec.corpus.vocab_size = parse_as(key, val)?,
            "corpus.n_topics" => spec.corpus.n_topics = parse_as(key, val)?,
            "corpus.post_cap" => spec.corpus.post_cap = parse_as(key, val)?,
            "corpus.response_cap" => spec.corpus.response_cap = parse_as(key, val)?,
            "corpus.noise_sigma" => spec.corpus.noise_sigma = parse_as(key, val)?,
            "corpus.responses_per_event" => {
                spec.corpus.responses_per_event = parse_as(key, val)?
            }
            "model.d_model" => model_dims.0 = parse_as(key, val)?,
            "model.n_layers" => model_dims.1 = parse_as(key, val)?,
            "model.n_heads" => model_dims.2 = parse_as(key, val)?,
            "sft.learning_rate" => spec.sft.learning_rate = parse_as(key, val)?,
            "sft.batch_size" => spec.sft.batch_size = parse_as(key, val)?,
            "sft.epochs" => spec.sft.epochs = parse_as(key, val)?,
            "sft.patience" => spec.sft.patience = parse_as(key, val)?,
            "rm.learning_rate" => spec.rm.learning_rate = parse_as(key, val)?,
            "rm.batch_size" => spec.rm.batch_size = parse_as(key, val)?,
            "rm.epochs" => spec.rm.epochs = parse_as(key, val)?,
            "rm.label_flip_rate" => spec.rm.label_flip_rate = parse_as(key, val)?,
            "rm.negatives_per_positive" => {
                spec.negatives_per_positive = parse_as(key, val)?
            }
            "ppo.clip_epsilon" => spec.ppo.clip_epsilon = parse_as(key, val)?,
            "ppo.value_loss_coef" => spec.ppo.value_loss_coef = parse_as(key, val)?,
            "ppo.kl_coef" => spec.ppo.kl_coef = parse_as(key, val)?,
            "ppo.discount" => spec.ppo.discount = parse_as(key, val)?,
            "ppo.gae_lambda" => spec.ppo.gae_lambda = parse_as(key, val)?,
            "ppo.ppo_epochs" => spec.ppo.ppo_epochs = parse_as(key, val)?,
            "ppo.batch_size" => spec.ppo.batch_size = parse_as(key, val)?,
            "ppo.total_steps" => spec.ppo.total_steps = parse_as(key, val)?,
            "ppo.learning_rate" => spec.ppo.learning_rate = parse_as(key, val)?,
            "sampler.top_p" => spec.sampler.top_p = parse_as(key, val)?,
            "sampler.temperature" => spec.sampler.temperature = parse_as(key, val)?,
            "sampler.max_new_tokens" => spec.sampler.max_new_tokens = parse_as(key, val)?,
            "seeds" => spec.seeds = parse_list(key, val)?,
            "eval_ks" => spec.eval_ks = parse_list(key, val)?,
            _ => {
                let Some(rest) = key.strip_prefix("variant.") else {
                    return Err(TrainError::BadConfig(format!(
                        "line {}: unknown experiment key '{key}'",
                        lineno + 1
                    )));
                };
                let Some((name, field)) = rest.split_once('.') else {
                    return Err(TrainError::BadConfig(format!(
                        "line {}: variant keys look like variant.<name>.<field>",
                        lineno + 1
                    )));
                };
                if !variant_curs.contains_key(name) {
                    variant_order.push(name.to_string());
                    variant_curs.insert(name.to_string(), CurriculumConfig::default());
                }
                let cur = variant_curs.get_mut(name).expect("inserted above");
                match field {
                    "algo" => {
                        variant_algos.insert(name.to_string(), parse_as(key, val)?);
                    }
                    "alpha" => cur.alpha = parse_as(key, val)?,
                    "k" => cur.k = parse_as(key, val)?,
                    "lambda0" => cur.lambda0 = parse_as(key, val)?,
                    "mu" => cur.mu = parse_as(key, val)?,
                    "m" => cur.m = parse_as(key, val)?,
                    other => {
                        return Err(TrainError::BadConfig(format!(
                            "line {}: unknown variant field '{other}'",
                            lineno + 1
                        )));
                    }
                }
            }
        }
    }
    for name in &variant_order {
        let algo = *variant_algos.get(name).ok_or_else(|| {
            TrainError::BadConfig(format!("variant '{name}' never sets its algo"))
        })?;
        let mut curriculum = variant_curs[name].clone();
        if algo == Algo::Ppo {
            // Plain PPO only reads m; pin the rest to the neutral values so
            // the stored spec says what actually ran.
            curriculum = CurriculumConfig::neutral(curriculum.m);
        }
        spec.variants.push(VariantSpec { name: name.clone(), algo, curriculum });
    }
    spec.model =
        ModelConfig::for_caps(spec.corpus.vocab_size, spec.corpus.post_cap, spec.corpus.response_cap);
    spec.model.d_model = model_dims.0;
    spec.model.n_layers = model_dims.1;
    spec.model.n_heads = model_dims.2;
    spec.validate()?;
    Ok(spec)
}

pub fn read_experiment_file(path: &Path) -> Result<ExperimentSpec, TrainError> {
    parse_experiment_file(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> ExperimentSpec {
        let corpus = CorpusConfig {
            seed: 11,
            n_events: 12,
            vocab_size: 24,
            n_topics: 2,
            post_cap: 12,
            response_cap: 8,
            noise_sigma: 0.5,
            responses_per_event: 16,
        };
        let model = ModelConfig::for_caps(24, 12, 8);
        ExperimentSpec {
            corpus,
            model,
            sft: SftConfig { epochs: 2, ..Default::default() },
            rm: RmConfig { epochs: 2, ..Default::default() },
            ppo: PpoConfig {
                total_steps: 2,
                batch_size: 2,
                ..Default::default()
            },
            sampler: SamplerConfig { max_new_tokens: 6, ..Default::default() },
            negatives_per_positive: 2,
            variants: vec![
                VariantSpec {
                    name: "ppo".into(),
                    algo: Algo::Ppo,
                    curriculum: CurriculumConfig::neutral(2),
                },
                VariantSpec {
                    name: "clppo".into(),
                    algo: Algo::Clppo,
                    curriculum: CurriculumConfig { m: 2, lambda0: 0.2, ..Default::default() },
                },
            ],
            seeds: vec![1, 2],
            eval_ks: vec![1, 3],
        }
    }

    #[test]
    fn tiny_experiment_runs_and_is_deterministic() {
        let spec = tiny_spec();
        let a = run_experiment(&spec).unwrap();
        assert_eq!(a.manifest.runs.len(), 4);
        for run in &a.manifest.runs {
            assert!(run.error.is_none(), "{:?}", run.error);
            assert_eq!(run.reports.len(), 2);
            assert!(!run.sft_hash.is_empty() && !run.rm_hash.is_empty());
            assert!(!run.rl_hash.is_empty());
        }
        assert_eq!(a.artifacts.len(), 4);
        assert!(a.artifacts.iter().all(|art| art.rl_stats.len() == 2));
        // Same seed means same shared stages for both variants.
        let by = |v: &str, s: u64| {
            a.manifest
                .runs
                .iter()
                .find(|r| r.variant == v && r.seed == s)
                .unwrap()
                .clone()
        };
        assert_eq!(by("ppo", 1).sft_hash, by("clppo", 1).sft_hash);
        assert_eq!(by("ppo", 1).rm_hash, by("clppo", 1).rm_hash);
        assert_ne!(by("ppo", 1).sft_hash, by("ppo", 2).sft_hash);

        let b = run_experiment(&spec).unwrap();
        assert_eq!(a.manifest.content_hash, b.manifest.content_hash);
        assert_eq!(a.manifest.content_hash, a.manifest.compute_content_hash());
    }

    #[test]
    fn aggregates_are_seed_means() {
        let spec = tiny_spec();
        let out = run_experiment(&spec).unwrap();
        for row in &out.manifest.aggregates {
            let vals: Vec<f64> = out
                .manifest
                .runs
                .iter()
                .filter(|r| r.variant == row.variant && r.error.is_none())
                .map(|r| {
                    let rep = r.reports.iter().find(|rep| rep.k == row.k).unwrap();
                    report_fields(rep)
                        .into_iter()
                        .find(|(name, _)| *name == row.metric)
                        .unwrap()
                        .1
                })
                .collect();
            assert_eq!(vals.len(), row.n_seeds);
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((mean - row.mean).abs() <= 1e-15, "{} vs {}", mean, row.mean);
        }
    }

    #[test]
    fn generation_for_eval_leaves_policy_bits_alone() {
        let model = ModelConfig::for_caps(24, 12, 8);
        let policy = PolicyModel::init(model, 5).unwrap();
        let before = model_digest(&policy.config, &policy.params);
        let posts = vec![
            (0u64, TokenSeq::new(vec![4, 5, 6, 7]).unwrap()),
            (1u64, TokenSeq::new(vec![6, 7, 8]).unwrap()),
        ];
        let sampler = SamplerConfig { max_new_tokens: 5, ..Default::default() };
        let gens = generate_for_eval(&policy, &posts, &sampler, 3, 99).unwrap();
        assert_eq!(gens.len(), 2);
        assert!(gens.values().all(|g| g.len() == 3));
        assert_eq!(before, model_digest(&policy.config, &policy.params));
    }

    #[test]
    fn compare_report_deltas_and_errors() {
        let spec = tiny_spec();
        let out = run_experiment(&spec).unwrap();
        let cmp = compare_report(&out.manifest, "ppo", "clppo").unwrap();
        assert!(!cmp.rows.is_empty());
        for row in &cmp.rows {
            assert!((row.delta - (row.test_mean - row.baseline_mean)).abs() <= 1e-15);
            assert!(row.test_wins <= row.n_seeds);
            assert_eq!(row.n_seeds, 2);
        }
        // A variant against itself is all zeros and no strict wins.
        let same = compare_report(&out.manifest, "ppo", "ppo").unwrap();
        for row in &same.rows {
            assert_eq!(row.delta, 0.0);
            assert_eq!(row.test_wins, 0);
        }
        assert!(compare_report(&out.manifest, "ppo", "nope").is_err());
        let csv = compare_to_csv(&cmp);
        assert!(csv.starts_with("k,metric,baseline_mean,test_mean,delta,test_wins,n_seeds\n"));
        assert_eq!(csv.lines().count(), cmp.rows.len() + 1);
        let text = compare_to_text(&cmp);
        assert!(text.contains("rouge_l"));
    }

    #[test]
    fn experiment_file_parses_and_rejects_unknowns() {
        let text = "\
# comparison on a small corpus
corpus.seed = 11
corpus.n_events = 12
corpus.vocab_size = 24
corpus.n_topics = 2
corpus.post_cap = 12
corpus.response_cap = 8
corpus.noise_sigma = 0.5
corpus.responses_per_event = 16
rm.negatives_per_positive = 2
ppo.total_steps = 2
ppo.batch_size = 2
sampler.max_new_tokens = 6
seeds = 1, 2
eval_ks = 1, 3

variant.ppo.algo = ppo
variant.ppo.m = 2
variant.clppo.algo = clppo
variant.clppo.m = 2
variant.clppo.lambda0 = 0.2
";
        let spec = parse_experiment_file(text).unwrap();
        assert_eq!(spec.corpus.n_events, 12);
        assert_eq!(spec.seeds, vec![1, 2]);
        assert_eq!(spec.eval_ks, vec![1, 3]);
        assert_eq!(spec.variants.len(), 2);
        assert_eq!(spec.variants[0].name, "ppo");
        assert_eq!(spec.variants[0].algo, Algo::Ppo);
        assert_eq!(spec.variants[0].curriculum.lambda0, f64::NEG_INFINITY);
        assert_eq!(spec.variants[1].curriculum.lambda0, 0.2);
        assert_eq!(spec.model.vocab_size, 24);
        assert_eq!(spec.model.max_context, 22);

        assert!(parse_experiment_file("nonsense.key = 1").is_err());
        assert!(parse_experiment_file("no equals sign").is_err());
        assert!(parse_experiment_file("variant.x.algo = what").is_err());
        // -inf must parse for lambda0.
        let inf = "variant.v.algo = clppo\nvariant.v.lambda0 = -inf\ncorpus.n_events = 12\n\
corpus.vocab_size = 24\ncorpus.n_topics = 2\ncorpus.post_cap = 12\ncorpus.response_cap = 8\n\
corpus.responses_per_event = 18";
        let spec = parse_experiment_file(inf).unwrap();
        assert_eq!(spec.variants[0].curriculum.lambda0, f64::NEG_INFINITY);
    }

    #[test]
    fn spec_validation_catches_bad_shapes() {
        let mut spec = tiny_spec();
        spec.seeds = vec![1, 1];
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.variants[1].name = "ppo".into();
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.eval_ks = vec![2];
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.model.vocab_size = 64;
        assert!(spec.validate().is_err());
        let mut spec = tiny_spec();
        spec.variants.clear();
        assert!(spec.validate().is_err());
    }

    #[test]
    fn manifest_json_roundtrips() {
        let spec = tiny_spec();
        let out = run_experiment(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        write_manifest_json(&path, &out.manifest).unwrap();
        let back: RunManifest =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(back.content_hash, out.manifest.content_hash);
        assert_eq!(back.compute_content_hash(), out.manifest.content_hash);
        assert_eq!(back.runs.len(), out.manifest.runs.len());
    }
}

