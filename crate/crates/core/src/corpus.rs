//! Synthetic event corpus and the three datasets derived from it.
//!
//! An event is one post plus a pile of responses ranked by noisy like-counts.
//! Each event has a latent topic with a 4-token "trendy template"; a response
//! of quality q contains exactly round(4q) template tokens, and its likes are
//! floor(exp(4q + 2 + Normal(0, sigma))). Quality is therefore recoverable
//! from token overlap, which is what makes reward learning checkable.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::seeding::{self, mix, mix3};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const NUM_SPECIALS: u32 = 4;

/// Tokens per trendy template.
pub const TEMPLATE_LEN: usize = 4;

/// Like model: likes = floor(exp(LIKE_GAIN * q + LIKE_BASE + noise)).
pub const LIKE_GAIN: f64 = 4.0;
pub const LIKE_BASE: f64 = 2.0;

/// Golds per event for supervised training.
pub const SFT_GOLDS_PER_EVENT: usize = 10;
/// Positives per event for preference pairs and reward enhancement.
pub const TOP_TRENDY: usize = 3;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("token sequence must be non-empty")]
    EmptySequence,
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: u32, vocab: u32 },
    #[error("sequence length {len} exceeds cap {cap}")]
    SequenceTooLong { len: usize, cap: usize },
    #[error("invalid corpus config: {0}")]
    BadConfig(String),
    #[error("need at least 3 events to split train/dev/test, got {0}")]
    TooFewEvents(usize),
    #[error("event {event_id} has {got} responses, need {need}")]
    TooFewResponses { event_id: u64, got: usize, need: usize },
    #[error("event {event_id} has {pool} responses below rank 10, need {need}")]
    SmallNegativePool { event_id: u64, pool: usize, need: usize },
    #[error("event {event_id} responses are not sorted by likes desc, text asc")]
    UnsortedResponses { event_id: u64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

/// Bounded integer token sequence. Always non-empty; vocab and length caps
/// are contextual and enforced at corpus boundaries via [`TokenSeq::check`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "Vec<u32>", try_from = "Vec<u32>")]
pub struct TokenSeq(Vec<u32>);

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Result<Self, CorpusError> {
        if ids.is_empty() {
            return Err(CorpusError::EmptySequence);
        }
        Ok(TokenSeq(ids))
    }

    pub fn ids(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn check(&self, vocab_size: u32, cap: usize) -> Result<(), CorpusError> {
        if self.0.len() > cap {
            return Err(CorpusError::SequenceTooLong { len: self.0.len(), cap });
        }
        if let Some(&id) = self.0.iter().find(|&&id| id >= vocab_size) {
            return Err(CorpusError::TokenOutOfRange { id, vocab: vocab_size });
        }
        Ok(())
    }
}

impl From<TokenSeq> for Vec<u32> {
    fn from(seq: TokenSeq) -> Vec<u32> {
        seq.0
    }
}

impl TryFrom<Vec<u32>> for TokenSeq {
    type Error = CorpusError;
    fn try_from(ids: Vec<u32>) -> Result<Self, CorpusError> {
        TokenSeq::new(ids)
    }
}

/// First `cap` tokens; shorter sequences pass through unchanged.
pub fn truncate(seq: &TokenSeq, cap: usize) -> TokenSeq {
    assert!(cap >= 1, "cap must be >= 1");
    if seq.len() <= cap {
        seq.clone()
    } else {
        TokenSeq(seq.0[..cap].to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    #[serde(rename = "text")]
    pub text: TokenSeq,
    #[serde(rename = "likes")]
    pub like_count: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub event_id: u64,
    pub post: TokenSeq,
    /// Sorted by like_count desc, ties by ascending token-lexicographic text.
    pub responses: Vec<ResponseRecord>,
}

/// Minimum responses per event: top-10 golds plus a rank-11+ negative pool.
pub const MIN_RESPONSES: usize = 13;

impl EventRecord {
    fn check_sorted(&self) -> Result<(), CorpusError> {
        let ok = self.responses.windows(2).all(|w| {
            w[0].like_count > w[1].like_count
                || (w[0].like_count == w[1].like_count && w[0].text <= w[1].text)
        });
        if ok {
            Ok(())
        } else {
            Err(CorpusError::UnsortedResponses { event_id: self.event_id })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SftExample {
    pub post: TokenSeq,
    pub gold: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub post: TokenSeq,
    pub y_w: TokenSeq,
    pub y_l: TokenSeq,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlExample {
    /// Source event id; also keys per-sample rollout seeds.
    pub event_id: u64,
    pub post: TokenSeq,
    /// The event's top-3 responses, rank order.
    pub gold_trendy: Vec<TokenSeq>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_events: usize,
    pub vocab_size: u32,
    pub n_topics: u32,
    pub post_cap: usize,
    pub response_cap: usize,
    pub noise_sigma: f64,
    pub responses_per_event: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 0,
            n_events: 200,
            vocab_size: 64,
            n_topics: 8,
            post_cap: 48,
            response_cap: 16,
            noise_sigma: 1.0,
            responses_per_event: 20,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        // Token ranges: specials, one marker per topic, one 4-token template
        // per topic, then a filler pool that must be non-empty.
        let reserved = NUM_SPECIALS as u64
            + self.n_topics as u64 * (1 + TEMPLATE_LEN as u64);
        if (self.vocab_size as u64) <= reserved {
            return Err(CorpusError::BadConfig(format!(
                "vocab_size {} too small: {} topics reserve {} ids",
                self.vocab_size, self.n_topics, reserved
            )));
        }
        if self.n_topics == 0 {
            return Err(CorpusError::BadConfig("n_topics must be >= 1".into()));
        }
        if self.post_cap < self.response_cap {
            return Err(CorpusError::BadConfig(format!(
                "post_cap {} < response_cap {}",
                self.post_cap, self.response_cap
            )));
        }
        if self.response_cap < TEMPLATE_LEN + 1 {
            return Err(CorpusError::BadConfig(format!(
                "response_cap {} cannot hold a full template",
                self.response_cap
            )));
        }
        if self.post_cap < TEMPLATE_LEN + 2 {
            return Err(CorpusError::BadConfig(format!(
                "post_cap {} cannot hold marker + template",
                self.post_cap
            )));
        }
        if !self.noise_sigma.is_finite() || self.noise_sigma < 0.0 {
            return Err(CorpusError::BadConfig("noise_sigma must be finite and >= 0".into()));
        }
        if self.responses_per_event < MIN_RESPONSES {
            return Err(CorpusError::BadConfig(format!(
                "responses_per_event {} < minimum {}",
                self.responses_per_event, MIN_RESPONSES
            )));
        }
        Ok(())
    }

    /// Marker token for a topic.
    pub fn topic_marker(&self, topic: u32) -> u32 {
        NUM_SPECIALS + topic
    }

    /// The topic's 4 template tokens.
    pub fn template(&self, topic: u32) -> [u32; TEMPLATE_LEN] {
        let base = NUM_SPECIALS + self.n_topics + topic * TEMPLATE_LEN as u32;
        [base, base + 1, base + 2, base + 3]
    }

    fn filler_range(&self) -> std::ops::Range<u32> {
        (NUM_SPECIALS + self.n_topics * (1 + TEMPLATE_LEN as u32))..self.vocab_size
    }
}

/// Quality levels a response can take: fraction of the template it contains.
const QUALITY_LEVELS: [usize; 5] = [0, 1, 2, 3, 4];

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<EventRecord>, CorpusError> {
    cfg.validate()?;
    if cfg.n_events < 3 {
        return Err(CorpusError::TooFewEvents(cfg.n_events));
    }
    let mut events = Vec::with_capacity(cfg.n_events);
    for event_id in 0..cfg.n_events as u64 {
        events.push(generate_event(cfg, event_id));
    }
    Ok(events)
}

fn generate_event(cfg: &CorpusConfig, event_id: u64) -> EventRecord {
    let mut rng = seeding::rng(mix3(cfg.seed, seeding::SALT_EVENT, event_id));
    let topic = rng.random_range(0..cfg.n_topics);
    let template = cfg.template(topic);
    let fillers = cfg.filler_range();

    // Post: topic marker up front, full template plus filler shuffled behind.
    let post_hi = 16.min(cfg.post_cap);
    let post_len = rng.random_range(10.min(post_hi)..=post_hi);
    let mut body: Vec<u32> = template.to_vec();
    while body.len() < post_len - 1 {
        body.push(rng.random_range(fillers.clone()));
    }
    body.shuffle(&mut rng);
    let mut post = vec![cfg.topic_marker(topic)];
    post.extend(body);

    let noise = if cfg.noise_sigma > 0.0 {
        Some(Normal::new(0.0, cfg.noise_sigma).expect("validated sigma"))
    } else {
        None
    };

    let mut responses = Vec::with_capacity(cfg.responses_per_event);
    for r in 0..cfg.responses_per_event {
        // Response 0 is always full-quality so every event is recoverable
        // at zero noise; the rest spread over the five quality levels.
        let hits = if r == 0 {
            TEMPLATE_LEN
        } else {
            QUALITY_LEVELS[rng.random_range(0..QUALITY_LEVELS.len())]
        };
        let resp_hi = 10.min(cfg.response_cap);
        let len = rng.random_range((TEMPLATE_LEN + 2).min(resp_hi)..=resp_hi);
        let mut text: Vec<u32> = template[..hits].to_vec();
        while text.len() < len {
            text.push(rng.random_range(fillers.clone()));
        }
        let q = hits as f64 / TEMPLATE_LEN as f64;
        let eps = match &noise {
            Some(n) => n.sample(&mut rng),
            None => 0.0,
        };
        let like_count = (LIKE_GAIN * q + LIKE_BASE + eps).exp().floor() as u64;
        responses.push(ResponseRecord { text: TokenSeq(text), like_count });
    }
    responses.sort_by(|a, b| {
        b.like_count.cmp(&a.like_count).then_with(|| a.text.cmp(&b.text))
    });

    EventRecord { event_id, post: TokenSeq(post), responses }
}

pub fn build_sft(events: &[EventRecord]) -> Result<Vec<SftExample>, CorpusError> {
    let mut out = Vec::with_capacity(events.len() * SFT_GOLDS_PER_EVENT);
    for ev in events {
        if ev.responses.len() < SFT_GOLDS_PER_EVENT {
            return Err(CorpusError::TooFewResponses {
                event_id: ev.event_id,
                got: ev.responses.len(),
                need: SFT_GOLDS_PER_EVENT,
            });
        }
        for resp in &ev.responses[..SFT_GOLDS_PER_EVENT] {
            out.push(SftExample { post: ev.post.clone(), gold: resp.text.clone() });
        }
    }
    Ok(out)
}

pub fn build_rm(
    events: &[EventRecord],
    negatives_per_positive: usize,
) -> Result<Vec<PreferencePair>, CorpusError> {
    let mut out = Vec::new();
    for ev in events {
        let pool: &[ResponseRecord] = if ev.responses.len() > SFT_GOLDS_PER_EVENT {
            &ev.responses[SFT_GOLDS_PER_EVENT..]
        } else {
            &[]
        };
        let need = TOP_TRENDY + negatives_per_positive;
        if pool.len() < need {
            return Err(CorpusError::SmallNegativePool {
                event_id: ev.event_id,
                pool: pool.len(),
                need,
            });
        }
        for (rank, pos) in ev.responses[..TOP_TRENDY].iter().enumerate() {
            // Seeded draw without replacement per positive: walk a shuffled
            // pool, skipping like ties; a shortfall just emits fewer pairs.
            let mut order: Vec<usize> = (0..pool.len()).collect();
            let mut rng =
                seeding::rng(mix3(ev.event_id, seeding::SALT_NEG, rank as u64));
            order.shuffle(&mut rng);
            let mut taken = 0;
            for idx in order {
                if taken == negatives_per_positive {
                    break;
                }
                let neg = &pool[idx];
                if pos.like_count > neg.like_count {
                    out.push(PreferencePair {
                        post: ev.post.clone(),
                        y_w: pos.text.clone(),
                        y_l: neg.text.clone(),
                    });
                    taken += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn build_rl(events: &[EventRecord]) -> Result<Vec<RlExample>, CorpusError> {
    let mut out = Vec::with_capacity(events.len());
    for ev in events {
        if ev.responses.len() < TOP_TRENDY {
            return Err(CorpusError::TooFewResponses {
                event_id: ev.event_id,
                got: ev.responses.len(),
                need: TOP_TRENDY,
            });
        }
        out.push(RlExample {
            event_id: ev.event_id,
            post: ev.post.clone(),
            gold_trendy: ev.responses[..TOP_TRENDY]
                .iter()
                .map(|r| r.text.clone())
                .collect(),
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Split<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub sft: Split<SftExample>,
    pub rm: Split<PreferencePair>,
    pub rl: Split<RlExample>,
    /// Event ids per partition, kept to make split hygiene checkable.
    pub event_ids: Split<u64>,
}

/// Shuffle events by seed, then cut 70/15/15 (dev and test get at least one
/// event each).
pub fn split_events(
    events: &[EventRecord],
    seed: u64,
) -> Result<(Vec<EventRecord>, Vec<EventRecord>, Vec<EventRecord>), CorpusError> {
    if events.len() < 3 {
        return Err(CorpusError::TooFewEvents(events.len()));
    }
    let mut order: Vec<usize> = (0..events.len()).collect();
    order.shuffle(&mut seeding::rng(mix(seed, seeding::SALT_SPLIT)));
    let n = events.len();
    let n_dev = ((n as f64 * 0.15).round() as usize).max(1);
    let n_test = n_dev;
    let n_train = n - n_dev - n_test;
    let pick = |ix: &[usize]| ix.iter().map(|&i| events[i].clone()).collect::<Vec<_>>();
    Ok((
        pick(&order[..n_train]),
        pick(&order[n_train..n_train + n_dev]),
        pick(&order[n_train + n_dev..]),
    ))
}

impl DatasetBundle {
    pub fn build(
        events: &[EventRecord],
        seed: u64,
        negatives_per_positive: usize,
    ) -> Result<DatasetBundle, CorpusError> {
        let (train, dev, test) = split_events(events, seed)?;
        let ids = |evs: &[EventRecord]| evs.iter().map(|e| e.event_id).collect::<Vec<_>>();
        let bundle = DatasetBundle {
            sft: Split {
                train: build_sft(&train)?,
                dev: build_sft(&dev)?,
                test: build_sft(&test)?,
            },
            rm: Split {
                train: build_rm(&train, negatives_per_positive)?,
                dev: build_rm(&dev, negatives_per_positive)?,
                test: build_rm(&test, negatives_per_positive)?,
            },
            rl: Split {
                train: build_rl(&train)?,
                dev: build_rl(&dev)?,
                test: build_rl(&test)?,
            },
            event_ids: Split { train: ids(&train), dev: ids(&dev), test: ids(&test) },
        };
        bundle.assert_disjoint();
        Ok(bundle)
    }

    /// Split hygiene: no event id occurs in two partitions.
    pub fn assert_disjoint(&self) {
        let train: BTreeSet<_> = self.event_ids.train.iter().collect();
        let dev: BTreeSet<_> = self.event_ids.dev.iter().collect();
        let test: BTreeSet<_> = self.event_ids.test.iter().collect();
        assert!(train.is_disjoint(&dev), "train/dev share event ids");
        assert!(train.is_disjoint(&test), "train/test share event ids");
        assert!(dev.is_disjoint(&test), "dev/test share event ids");
    }
}

// --- JSONL persistence ---

pub fn write_events(path: &Path, events: &[EventRecord]) -> Result<(), CorpusError> {
    write_jsonl(path, events)
}

/// Reads events and re-validates every invariant against `cfg`.
pub fn read_events(path: &Path, cfg: &CorpusConfig) -> Result<Vec<EventRecord>, CorpusError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: EventRecord = serde_json::from_str(&line)
            .map_err(|source| CorpusError::Json { line: i + 1, source })?;
        ev.post.check(cfg.vocab_size, cfg.post_cap)?;
        for resp in &ev.responses {
            resp.text.check(cfg.vocab_size, cfg.response_cap)?;
        }
        if ev.responses.len() < MIN_RESPONSES {
            return Err(CorpusError::TooFewResponses {
                event_id: ev.event_id,
                got: ev.responses.len(),
                need: MIN_RESPONSES,
            });
        }
        ev.check_sorted()?;
        events.push(ev);
    }
    Ok(events)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CorpusError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut w, row)
            .map_err(|source| CorpusError::Json { line: 0, source })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes the nine dataset files plus a manifest with the config and a
/// sha256 per file.
pub fn save_bundle(
    dir: &Path,
    cfg: &CorpusConfig,
    bundle: &DatasetBundle,
) -> Result<(), CorpusError> {
    use sha2::{Digest, Sha256};
    std::fs::create_dir_all(dir)?;
    let mut hashes = Vec::new();
    macro_rules! emit {
        ($name:expr, $rows:expr) => {{
            let path = dir.join($name);
            write_jsonl(&path, $rows)?;
            let bytes = std::fs::read(&path)?;
            hashes.push(($name.to_string(), crate::hex(&Sha256::digest(&bytes))));
        }};
    }
    emit!("sft_train.jsonl", &bundle.sft.train);
    emit!("sft_dev.jsonl", &bundle.sft.dev);
    emit!("sft_test.jsonl", &bundle.sft.test);
    emit!("rm_train.jsonl", &bundle.rm.train);
    emit!("rm_dev.jsonl", &bundle.rm.dev);
    emit!("rm_test.jsonl", &bundle.rm.test);
    emit!("rl_train.jsonl", &bundle.rl.train);
    emit!("rl_dev.jsonl", &bundle.rl.dev);
    emit!("rl_test.jsonl", &bundle.rl.test);
    #[derive(Serialize)]
    struct BundleManifest<'a> {
        cfg: &'a CorpusConfig,
        files: Vec<(String, String)>,
    }
    let manifest = BundleManifest { cfg, files: hashes };
    let mut w = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut w, &manifest)
        .map_err(|source| CorpusError::Json { line: 0, source })?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> CorpusConfig {
        CorpusConfig { seed: 7, n_events: 12, ..CorpusConfig::default() }
    }

    fn quality_of(cfg: &CorpusConfig, topic: u32, text: &TokenSeq) -> f64 {
        let template = cfg.template(topic);
        let hits = template
            .iter()
            .filter(|t| text.ids().contains(t))
            .count();
        hits as f64 / TEMPLATE_LEN as f64
    }

    fn topic_of(cfg: &CorpusConfig, ev: &EventRecord) -> u32 {
        let topic = ev.post.ids()[0] - NUM_SPECIALS;
        assert!(topic < cfg.n_topics, "post must open with its topic marker");
        topic
    }

    #[test]
    fn zero_noise_like_counts_follow_quality() {
        let cfg = CorpusConfig { noise_sigma: 0.0, ..small_cfg() };
        let events = generate_corpus(&cfg).unwrap();
        for ev in &events {
            let topic = topic_of(&cfg, ev);
            for resp in &ev.responses {
                let q = quality_of(&cfg, topic, &resp.text);
                let expect = (LIKE_GAIN * q + LIKE_BASE).exp().floor() as u64;
                assert_eq!(resp.like_count, expect);
            }
            // Forced by the like formula: q=1.0 -> 403, q=0.0 -> 7.
            let q_top = quality_of(&cfg, topic, &ev.responses[0].text);
            assert_eq!(q_top, 1.0);
            assert_eq!(ev.responses[0].like_count, 403);
            if let Some(worst) = ev
                .responses
                .iter()
                .find(|r| quality_of(&cfg, topic, &r.text) == 0.0)
            {
                assert_eq!(worst.like_count, 7);
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg();
        let a = generate_corpus(&cfg).unwrap();
        let b = generate_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        let json_a = serde_json::to_string(&a).unwrap();
        let json_b = serde_json::to_string(&b).unwrap();
        assert_eq!(json_a, json_b);
    }

    #[test]
    fn like_counts_are_right_skewed() {
        let cfg = CorpusConfig {
            seed: 1,
            n_events: 200,
            noise_sigma: 1.0,
            ..CorpusConfig::default()
        };
        let events = generate_corpus(&cfg).unwrap();
        let likes: Vec<f64> = events
            .iter()
            .flat_map(|e| e.responses.iter().map(|r| r.like_count as f64))
            .collect();
        let skew = sample_skewness(&likes);
        assert!(skew > 1.0, "sample skewness {skew} should exceed 1");
    }

    fn sample_skewness(xs: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let m3 = xs.iter().map(|x| (x - mean).powi(3)).sum::<f64>() / n;
        m3 / m2.powf(1.5)
    }

    #[test]
    fn rejects_too_few_events() {
        let cfg = CorpusConfig { n_events: 2, ..small_cfg() };
        assert!(matches!(generate_corpus(&cfg), Err(CorpusError::TooFewEvents(2))));
    }

    #[test]
    fn responses_are_rank_sorted() {
        let events = generate_corpus(&small_cfg()).unwrap();
        for ev in &events {
            ev.check_sorted().unwrap();
            assert!(ev.responses.len() >= MIN_RESPONSES);
        }
    }

    #[test]
    fn sft_takes_top_ten_per_event() {
        let events = generate_corpus(&small_cfg()).unwrap();
        let sft = build_sft(&events).unwrap();
        assert_eq!(sft.len(), events.len() * SFT_GOLDS_PER_EVENT);
        for (i, ev) in events.iter().enumerate() {
            let rows = &sft[i * SFT_GOLDS_PER_EVENT..(i + 1) * SFT_GOLDS_PER_EVENT];
            for (j, row) in rows.iter().enumerate() {
                assert_eq!(row.post, ev.post);
                assert_eq!(row.gold, ev.responses[j].text);
            }
        }
    }

    #[test]
    fn sft_rejects_thin_event_naming_it() {
        let mut events = generate_corpus(&small_cfg()).unwrap();
        events[3].responses.truncate(9);
        let err = build_sft(&events).unwrap_err();
        match err {
            CorpusError::TooFewResponses { event_id, got, need } => {
                assert_eq!(event_id, events[3].event_id);
                assert_eq!(got, 9);
                assert_eq!(need, 10);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn rm_pairs_are_strict_and_low_rank() {
        let events = generate_corpus(&small_cfg()).unwrap();
        let pairs = build_rm(&events, 4).unwrap();
        assert!(!pairs.is_empty());
        for pair in &pairs {
            let ev = events.iter().find(|e| e.post == pair.post).unwrap();
            let likes = |t: &TokenSeq| {
                ev.responses.iter().find(|r| &r.text == t).unwrap().like_count
            };
            assert!(likes(&pair.y_w) > likes(&pair.y_l));
            let w_rank = ev.responses.iter().position(|r| r.text == pair.y_w).unwrap();
            let l_rank = ev.responses.iter().position(|r| r.text == pair.y_l).unwrap();
            assert!(w_rank < TOP_TRENDY);
            assert!(l_rank >= SFT_GOLDS_PER_EVENT);
        }
        // Up to 3 positives x negatives_per_positive per event; ties shrink it.
        assert!(pairs.len() <= events.len() * TOP_TRENDY * 4);
        let per_event = pairs.len() as f64 / events.len() as f64;
        assert!(per_event > 6.0, "expected most draws to land, got {per_event}");
    }

    #[test]
    fn rm_skips_like_ties() {
        let cfg = small_cfg();
        let mut events = generate_corpus(&cfg).unwrap();
        // Flatten one event: every response gets the same like count, so
        // every candidate pair violates the strict inequality.
        for r in events[0].responses.iter_mut() {
            r.like_count = 500;
        }
        events[0].responses.sort_by(|a, b| a.text.cmp(&b.text));
        let one = &events[..1];
        let pairs = build_rm(one, 2).unwrap();
        assert!(pairs.is_empty(), "tied likes must produce no pairs");
    }

    #[test]
    fn rm_rejects_small_pool() {
        let mut events = generate_corpus(&small_cfg()).unwrap();
        events[0].responses.truncate(MIN_RESPONSES);
        let err = build_rm(&events[..1], 4).unwrap_err();
        assert!(matches!(err, CorpusError::SmallNegativePool { pool: 3, need: 7, .. }));
    }

    #[test]
    fn rm_is_deterministic() {
        let events = generate_corpus(&small_cfg()).unwrap();
        assert_eq!(build_rm(&events, 4).unwrap(), build_rm(&events, 4).unwrap());
    }

    #[test]
    fn rl_takes_top_three() {
        let events = generate_corpus(&small_cfg()).unwrap();
        let rl = build_rl(&events).unwrap();
        assert_eq!(rl.len(), events.len());
        for (row, ev) in rl.iter().zip(&events) {
            assert_eq!(row.event_id, ev.event_id);
            assert_eq!(row.gold_trendy.len(), TOP_TRENDY);
            for (g, r) in row.gold_trendy.iter().zip(&ev.responses) {
                assert_eq!(g, &r.text);
            }
        }
        let one = build_rl(&events[..1]).unwrap();
        assert_eq!(one.len(), 1);
    }

    #[test]
    fn ten_to_one_sft_rl_ratio() {
        let events = generate_corpus(&small_cfg()).unwrap();
        let sft = build_sft(&events).unwrap();
        let rl = build_rl(&events).unwrap();
        assert_eq!(sft.len(), 10 * rl.len());
    }

    #[test]
    fn truncate_caps_and_passes_through() {
        let long = TokenSeq::new((4..204).collect()).unwrap();
        assert_eq!(truncate(&long, 128).len(), 128);
        assert_eq!(truncate(&long, 128).ids(), &long.ids()[..128]);
        let short = TokenSeq::new((4..14).collect()).unwrap();
        assert_eq!(truncate(&short, 128), short);
        let resp = TokenSeq::new((4..44).collect()).unwrap();
        assert_eq!(truncate(&resp, 32).len(), 32);
    }

    #[test]
    fn bundle_splits_are_disjoint_and_deterministic() {
        let cfg = CorpusConfig { n_events: 40, ..small_cfg() };
        let events = generate_corpus(&cfg).unwrap();
        let a = DatasetBundle::build(&events, 9, 4).unwrap();
        let b = DatasetBundle::build(&events, 9, 4).unwrap();
        a.assert_disjoint();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.event_ids.dev.len(), 6);
        assert_eq!(a.event_ids.test.len(), 6);
        assert_eq!(a.event_ids.train.len(), 28);
    }

    #[test]
    fn events_roundtrip_through_jsonl() {
        let cfg = small_cfg();
        let events = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_events(&path, &events).unwrap();
        let back = read_events(&path, &cfg).unwrap();
        assert_eq!(events, back);
        let raw = std::fs::read_to_string(&path).unwrap();
        let first = raw.lines().next().unwrap();
        let v: serde_json::Value = serde_json::from_str(first).unwrap();
        assert!(v.get("event_id").is_some());
        assert!(v["post"].is_array());
        assert!(v["responses"][0].get("likes").is_some());
    }

    #[test]
    fn read_events_rejects_out_of_vocab() {
        let cfg = small_cfg();
        let events = generate_corpus(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_events(&path, &events).unwrap();
        let strict = CorpusConfig { vocab_size: 5, ..cfg };
        assert!(matches!(
            read_events(&path, &strict),
            Err(CorpusError::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn bundle_files_and_manifest_written() {
        let cfg = CorpusConfig { n_events: 20, ..small_cfg() };
        let events = generate_corpus(&cfg).unwrap();
        let bundle = DatasetBundle::build(&events, cfg.seed, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_bundle(dir.path(), &cfg, &bundle).unwrap();
        for name in [
            "sft_train.jsonl",
            "sft_dev.jsonl",
            "sft_test.jsonl",
            "rm_train.jsonl",
            "rm_dev.jsonl",
            "rm_test.jsonl",
            "rl_train.jsonl",
            "rl_dev.jsonl",
            "rl_test.jsonl",
            "manifest.json",
        ] {
            assert!(dir.path().join(name).exists(), "missing {name}");
        }
        let manifest: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap())
                .unwrap();
        assert_eq!(manifest["files"].as_array().unwrap().len(), 9);
        assert_eq!(manifest["cfg"]["n_events"], 20);
    }

    #[test]
    fn empty_token_seq_rejected() {
        assert!(TokenSeq::new(vec![]).is_err());
        let json: Result<TokenSeq, _> = serde_json::from_str("[]");
        assert!(json.is_err());
    }

    #[test]
    fn quality_one_response_exists_per_event() {
        // Zero-noise recoverability plus: even with noise the rank-1 gold of
        // a noiseless corpus carries the full template.
        let cfg = CorpusConfig { noise_sigma: 0.0, ..small_cfg() };
        for ev in generate_corpus(&cfg).unwrap() {
            let topic = topic_of(&cfg, &ev);
            assert_eq!(quality_of(&cfg, topic, &ev.responses[0].text), 1.0);
        }
    }
}
