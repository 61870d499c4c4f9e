//! Consumer-style integration tests: drive the public API the way the CLI
//! does, with files on disk where files belong.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use trendlm::clppo::{train_clppo, write_stats_csv, CurriculumConfig, PpoConfig};
use trendlm::corpus::{
    build_rl, build_rm, build_sft, generate_corpus, split_events, CorpusConfig, EventRecord,
    TokenSeq, SFT_GOLDS_PER_EVENT,
};
use trendlm::harness::{
    compare_report, generate_for_eval, model_digest, run_experiment, write_manifest_json,
    Algo, ExperimentOutput, ExperimentSpec, VariantSpec,
};
use trendlm::metrics::evaluate_top_k;
use trendlm::model::checkpoint::{load_policy, load_reward, save_policy, save_reward};
use trendlm::model::sampler::SamplerConfig;
use trendlm::model::{ModelConfig, PolicyModel, RewardModel};
use trendlm::reward::{train_reward, RmConfig};
use trendlm::sft::{train_sft, SftConfig};

fn tiny_corpus() -> CorpusConfig {
    CorpusConfig {
        seed: 40,
        n_events: 18,
        vocab_size: 32,
        n_topics: 3,
        post_cap: 14,
        response_cap: 8,
        noise_sigma: 0.5,
        responses_per_event: 16,
    }
}

/// Golds for evaluation: each test event's supervised responses.
fn eval_golds(events: &[EventRecord]) -> BTreeMap<u64, Vec<TokenSeq>> {
    events
        .iter()
        .map(|ev| {
            let golds: Vec<TokenSeq> = ev.responses[..SFT_GOLDS_PER_EVENT]
                .iter()
                .map(|r| r.text.clone())
                .collect();
            (ev.event_id, golds)
        })
        .collect()
}

#[test]
fn full_pipeline_trains_and_evaluates() {
    let corpus = tiny_corpus();
    let events = generate_corpus(&corpus).unwrap();
    let (train_ev, dev_ev, test_ev) = split_events(&events, corpus.seed).unwrap();
    let mcfg = ModelConfig::for_caps(corpus.vocab_size, corpus.post_cap, corpus.response_cap);

    let sft = train_sft(
        PolicyModel::init(mcfg.clone(), 1).unwrap(),
        &build_sft(&train_ev).unwrap(),
        &build_sft(&dev_ev).unwrap(),
        &SftConfig { epochs: 2, ..Default::default() },
    )
    .unwrap();
    assert!(sft.policy.params.iter().all(|p| p.is_finite()));

    let rm = train_reward(
        RewardModel::from_policy(&sft.policy),
        &build_rm(&train_ev, 3).unwrap(),
        &build_rm(&dev_ev, 3).unwrap(),
        &RmConfig { epochs: 1, ..Default::default() },
    )
    .unwrap();
    assert!(rm.curve.iter().all(|p| (0.0..=1.0).contains(&p.dev_accuracy)));

    let sampler = SamplerConfig { max_new_tokens: 6, ..Default::default() };
    let (policy, stats) = train_clppo(
        sft.policy,
        &rm.rm,
        &build_rl(&train_ev).unwrap(),
        &CurriculumConfig { m: 2, ..Default::default() },
        &PpoConfig { total_steps: 5, batch_size: 2, ..Default::default() },
        &sampler,
    )
    .unwrap();
    assert_eq!(stats.len(), 5);
    assert!(stats.iter().all(|s| s.enhance_bound_ok));

    // Evaluation generates fresh samples and must leave the policy intact.
    let posts: Vec<(u64, TokenSeq)> =
        test_ev.iter().map(|ev| (ev.event_id, ev.post.clone())).collect();
    let digest_before = model_digest(&policy.config, &policy.params);
    let gens = generate_for_eval(&policy, &posts, &sampler, 3, 5).unwrap();
    assert_eq!(model_digest(&policy.config, &policy.params), digest_before);

    assert_eq!(gens.len(), posts.len());
    assert!(gens.values().all(|g| g.len() == 3));
    let report = evaluate_top_k(&gens, &eval_golds(&test_ev), 3).unwrap();
    assert_eq!(report.k, 3);
    for (name, v) in [
        ("rouge1", report.rouge1),
        ("rouge2", report.rouge2),
        ("rouge_l", report.rouge_l),
        ("bleu", report.bleu),
        ("m_distinct_1", report.m_distinct_1.unwrap()),
        ("m_distinct_2", report.m_distinct_2.unwrap()),
    ] {
        assert!((0.0..=1.0).contains(&v), "{name} = {v} out of range");
    }
}

#[test]
fn checkpoints_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let mcfg = ModelConfig::for_caps(32, 14, 8);

    let policy = PolicyModel::init(mcfg.clone(), 9).unwrap();
    let path = dir.path().join("policy.ckpt");
    save_policy(&path, &policy).unwrap();
    let loaded = load_policy(&path, Some(32)).unwrap();
    assert_eq!(loaded.config, policy.config);
    let bits = |p: &[f32]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&loaded.params), bits(&policy.params));
    assert!(load_policy(&path, Some(64)).is_err(), "vocab mismatch must refuse");

    let rm = RewardModel::init(mcfg, 10).unwrap();
    let rm_path = dir.path().join("rm.ckpt");
    save_reward(&rm_path, &rm).unwrap();
    let loaded = load_reward(&rm_path, None).unwrap();
    assert_eq!(bits(&loaded.params), bits(&rm.params));

    // Kind confusion and truncation must error, not crash or mis-load.
    assert!(load_policy(&rm_path, None).is_err(), "reward file is not a policy");
    let bytes = std::fs::read(&rm_path).unwrap();
    std::fs::write(&rm_path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(load_reward(&rm_path, None).is_err(), "truncated file must refuse");
}

fn tiny_experiment() -> &'static ExperimentOutput {
    static CELL: OnceLock<ExperimentOutput> = OnceLock::new();
    CELL.get_or_init(|| {
        let corpus = tiny_corpus();
        let model =
            ModelConfig::for_caps(corpus.vocab_size, corpus.post_cap, corpus.response_cap);
        let spec = ExperimentSpec {
            corpus,
            model,
            sft: SftConfig { epochs: 1, ..Default::default() },
            rm: RmConfig { epochs: 1, ..Default::default() },
            ppo: PpoConfig { total_steps: 2, batch_size: 2, ..Default::default() },
            sampler: SamplerConfig { max_new_tokens: 6, ..Default::default() },
            negatives_per_positive: 3,
            variants: vec![
                VariantSpec {
                    name: "ppo".into(),
                    algo: Algo::Ppo,
                    curriculum: CurriculumConfig::neutral(2),
                },
                VariantSpec {
                    name: "clppo".into(),
                    algo: Algo::Clppo,
                    curriculum: CurriculumConfig { m: 2, ..Default::default() },
                },
            ],
            seeds: vec![1, 2],
            eval_ks: vec![1, 3],
        };
        spec.validate().unwrap();
        run_experiment(&spec).unwrap()
    })
}

#[test]
fn experiment_manifest_survives_disk_and_self_compare_is_zero() {
    let out = tiny_experiment();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("manifest.json");
    write_manifest_json(&path, &out.manifest).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: trendlm::harness::RunManifest = serde_json::from_str(&text).unwrap();
    assert_eq!(back.content_hash, out.manifest.content_hash);
    assert_eq!(back.compute_content_hash(), out.manifest.content_hash);

    let cmp = compare_report(&out.manifest, "ppo", "ppo").unwrap();
    assert!(!cmp.rows.is_empty());
    for row in &cmp.rows {
        assert_eq!(row.delta, 0.0, "{}@k={} self-delta must be zero", row.metric, row.k);
        assert_eq!(row.test_wins, 0, "no strict self-wins");
        assert_eq!(row.n_seeds, 2);
    }
    assert!(compare_report(&out.manifest, "ppo", "absent").is_err());
}

#[test]
fn rl_stats_csv_has_one_row_per_step() {
    let out = tiny_experiment();
    let art = &out.artifacts[0];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stats.csv");
    write_stats_csv(&path, &art.rl_stats).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "step,lambda,n_kept,n_selected,mean_r,mean_re,policy_loss,value_loss,kl"
    );
    assert_eq!(lines.count(), art.rl_stats.len());
}
