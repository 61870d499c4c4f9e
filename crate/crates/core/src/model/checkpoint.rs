//! Versioned binary checkpoints.
//!
//! Layout: magic `TLMCKPT\0`, format version (u32 LE), model kind (u8:
//! 0 policy, 1 reward), config JSON (u32 LE length + bytes), parameter count
//! (u64 LE), then parameters as contiguous little-endian f32 in flat-vector
//! order. Parameter order: token embeddings, position embeddings, per block
//! (ln1 gamma/beta, Wq/bq, Wk/bk, Wv/bv, Wo/bo, ln2 gamma/beta, W1/b1,
//! W2/b2), final ln gamma/beta; then for a policy the LM head, value weights,
//! value bias; for a reward model the scalar head weights and bias.

use std::io::{Read, Write};
use std::path::Path;

use super::{Layout, ModelConfig, ModelError, PolicyModel, RewardModel};

const MAGIC: &[u8; 8] = b"TLMCKPT\0";
const VERSION: u32 = 1;

const KIND_POLICY: u8 = 0;
const KIND_REWARD: u8 = 1;

fn write_checkpoint(
    path: &Path,
    kind: u8,
    config: &ModelConfig,
    params: &[f32],
) -> Result<(), ModelError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[kind])?;
    let cfg_json = serde_json::to_vec(config)
        .map_err(|e| ModelError::Checkpoint(format!("config serialization: {e}")))?;
    w.write_all(&(cfg_json.len() as u32).to_le_bytes())?;
    w.write_all(&cfg_json)?;
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for &p in params {
        w.write_all(&p.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct RawCheckpoint {
    kind: u8,
    config: ModelConfig,
    params: Vec<f32>,
}

fn read_checkpoint(path: &Path) -> Result<RawCheckpoint, ModelError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let fail = |what: &str| ModelError::Checkpoint(format!("truncated or corrupt file: {what}"));
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fail("magic"))?;
    if &magic != MAGIC {
        return Err(ModelError::Checkpoint("bad magic bytes".into()));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| fail("version"))?;
    let version = u32::from_le_bytes(u32buf);
    if version != VERSION {
        return Err(ModelError::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let mut kind = [0u8; 1];
    r.read_exact(&mut kind).map_err(|_| fail("kind"))?;
    r.read_exact(&mut u32buf).map_err(|_| fail("config length"))?;
    let cfg_len = u32::from_le_bytes(u32buf) as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|_| fail("config"))?;
    let config: ModelConfig = serde_json::from_slice(&cfg_bytes)
        .map_err(|e| ModelError::Checkpoint(format!("config parse: {e}")))?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf).map_err(|_| fail("param count"))?;
    let count = u64::from_le_bytes(u64buf) as usize;
    let mut params = Vec::with_capacity(count);
    let mut f32buf = [0u8; 4];
    for _ in 0..count {
        r.read_exact(&mut f32buf).map_err(|_| fail("parameters"))?;
        params.push(f32::from_le_bytes(f32buf));
    }
    Ok(RawCheckpoint { kind: kind[0], config, params })
}

fn check_shape(expect: usize, got: usize, what: &str) -> Result<(), ModelError> {
    if expect != got {
        return Err(ModelError::Checkpoint(format!(
            "{what} parameter count mismatch: expected {expect}, file has {got}"
        )));
    }
    Ok(())
}

/// Rejects checkpoints whose vocab differs from the caller's expectation.
fn check_vocab(cfg: &ModelConfig, expect_vocab: Option<u32>) -> Result<(), ModelError> {
    if let Some(v) = expect_vocab {
        if cfg.vocab_size != v {
            return Err(ModelError::Checkpoint(format!(
                "vocab mismatch: expected {v}, checkpoint has {}",
                cfg.vocab_size
            )));
        }
    }
    Ok(())
}

pub fn save_policy(path: &Path, model: &PolicyModel) -> Result<(), ModelError> {
    write_checkpoint(path, KIND_POLICY, &model.config, &model.params)
}

pub fn load_policy(path: &Path, expect_vocab: Option<u32>) -> Result<PolicyModel, ModelError> {
    let raw = read_checkpoint(path)?;
    if raw.kind != KIND_POLICY {
        return Err(ModelError::Checkpoint(format!(
            "expected a policy checkpoint (kind {KIND_POLICY}), found kind {}",
            raw.kind
        )));
    }
    raw.config.validate()?;
    check_vocab(&raw.config, expect_vocab)?;
    check_shape(PolicyModel::n_params(&raw.config), raw.params.len(), "policy")?;
    let layout = Layout::new(&raw.config);
    Ok(PolicyModel { config: raw.config, params: raw.params, layout })
}

pub fn save_reward(path: &Path, model: &RewardModel) -> Result<(), ModelError> {
    write_checkpoint(path, KIND_REWARD, &model.config, &model.params)
}

pub fn load_reward(path: &Path, expect_vocab: Option<u32>) -> Result<RewardModel, ModelError> {
    let raw = read_checkpoint(path)?;
    if raw.kind != KIND_REWARD {
        return Err(ModelError::Checkpoint(format!(
            "expected a reward checkpoint (kind {KIND_REWARD}), found kind {}",
            raw.kind
        )));
    }
    raw.config.validate()?;
    check_vocab(&raw.config, expect_vocab)?;
    check_shape(RewardModel::n_params(&raw.config), raw.params.len(), "reward")?;
    let layout = Layout::new(&raw.config);
    Ok(RewardModel { config: raw.config, params: raw.params, layout })
}

/// sha256 of the checkpoint bytes, for run manifests.
pub fn file_digest(path: &Path) -> Result<String, ModelError> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(crate::hex(&Sha256::digest(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::TokenSeq;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_context: 24,
            dropout: 0.0,
        }
    }

    #[test]
    fn policy_roundtrip_is_bitwise() {
        let model = PolicyModel::init(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        save_policy(&path, &model).unwrap();
        let back = load_policy(&path, Some(16)).unwrap();
        assert_eq!(model.config, back.config);
        assert_eq!(
            model.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            back.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
        let x = TokenSeq::new(vec![4, 5, 6]).unwrap();
        assert_eq!(model.forward_logits(&x).unwrap(), back.forward_logits(&x).unwrap());
    }

    #[test]
    fn reward_roundtrip_is_bitwise() {
        let policy = PolicyModel::init(cfg(), 1).unwrap();
        let rm = RewardModel::from_policy(&policy);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rm.ckpt");
        save_reward(&path, &rm).unwrap();
        let back = load_reward(&path, None).unwrap();
        assert_eq!(
            rm.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>(),
            back.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn truncated_file_is_an_error() {
        let model = PolicyModel::init(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        save_policy(&path, &model).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3usize, 10, 40, bytes.len() - 5] {
            let short = dir.path().join(format!("cut{cut}.ckpt"));
            std::fs::write(&short, &bytes[..cut]).unwrap();
            assert!(load_policy(&short, None).is_err(), "cut at {cut} must fail");
        }
    }

    #[test]
    fn wrong_kind_rejected() {
        let policy = PolicyModel::init(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        save_policy(&path, &policy).unwrap();
        let err = load_reward(&path, None).unwrap_err();
        assert!(err.to_string().contains("kind"));
    }

    #[test]
    fn vocab_mismatch_rejected_with_both_sizes() {
        let model = PolicyModel::init(cfg(), 42).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.ckpt");
        save_policy(&path, &model).unwrap();
        let err = load_policy(&path, Some(64)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("64") && msg.contains("16"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOTACKPT________________").unwrap();
        assert!(load_policy(&path, None).is_err());
    }
}
