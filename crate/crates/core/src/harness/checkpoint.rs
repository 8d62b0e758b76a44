//! Training-state checkpoints.
//!
//! A checkpoint is a self-describing binary file: the config echoed as
//! text, the step/epoch counters, the derived-randomness record, the model
//! parameters, the optimizer momentum buffers, and the loss history. All
//! randomness in the trainer is a pure function of (seed, epoch, step, slice
//! identity), so the counters are the complete RNG state. Parameter maps
//! are written in sorted order; save -> load -> save is byte-identical.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::containers::{read_exact_buf, read_f64, read_params, read_u32, read_u64, write_params};
use crate::error::CheckpointError;
use crate::params::ParamStore;

pub const CKPT_MAGIC: &[u8; 8] = b"FSGCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

pub struct TrainState {
    pub config: ModelConfig,
    pub step: usize,
    pub epoch: usize,
    pub params: ParamStore,
    pub momentum: ParamStore,
    pub best_metric: Option<f64>,
    pub history: Vec<HistoryEntry>,
}

pub fn checkpoint_save(state: &TrainState, path: &Path) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    let config_text = state.config.to_text();
    w.write_all(&(config_text.len() as u32).to_le_bytes())?;
    w.write_all(config_text.as_bytes())?;
    w.write_all(&(state.step as u64).to_le_bytes())?;
    w.write_all(&(state.epoch as u64).to_le_bytes())?;
    match state.best_metric {
        Some(m) => {
            w.write_all(&[1u8])?;
            w.write_all(&m.to_bits().to_le_bytes())?;
        }
        None => {
            w.write_all(&[0u8])?;
            w.write_all(&0u64.to_le_bytes())?;
        }
    }
    write_params(&mut w, &state.params)?;
    write_params(&mut w, &state.momentum)?;
    w.write_all(&(state.history.len() as u64).to_le_bytes())?;
    for entry in &state.history {
        w.write_all(&entry.step.to_le_bytes())?;
        w.write_all(&entry.loss.to_bits().to_le_bytes())?;
        w.write_all(&entry.lr.to_bits().to_le_bytes())?;
    }
    Ok(())
}

pub fn checkpoint_load(path: &Path) -> Result<TrainState, CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    read_checkpoint(&mut r)
}

fn read_checkpoint<R: Read>(r: &mut R) -> Result<TrainState, CheckpointError> {
    let magic = read_exact_buf(r, 8)?;
    if magic != CKPT_MAGIC {
        return Err(CheckpointError::Malformed(
            "bad magic (not a checkpoint)".into(),
        ));
    }
    let version = read_u32(r)?;
    if version != CKPT_VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: CKPT_VERSION,
        });
    }
    let config_len = read_u32(r)? as usize;
    if config_len > 1 << 20 {
        return Err(CheckpointError::Malformed("oversized config block".into()));
    }
    let config_text = String::from_utf8(read_exact_buf(r, config_len)?)
        .map_err(|e| CheckpointError::Malformed(format!("config text: {e}")))?;
    let config = ModelConfig::parse(&config_text)
        .map_err(|e| CheckpointError::Malformed(format!("embedded config: {e}")))?;
    let step = read_u64(r)? as usize;
    let epoch = read_u64(r)? as usize;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let best_raw = read_f64(r)?;
    let best_metric = (flag[0] == 1).then_some(best_raw);
    let params = read_params(r)?;
    let momentum = read_params(r)?;
    let count = read_u64(r)? as usize;
    let mut history = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        history.push(HistoryEntry {
            step: read_u64(r)?,
            loss: read_f64(r)?,
            lr: read_f64(r)?,
        });
    }
    Ok(TrainState {
        config,
        step,
        epoch,
        params,
        momentum,
        best_metric,
        history,
    })
}

/// Load a checkpoint and require its embedded config to match `expected`
/// (ignoring fields that do not alter the parameter set is deliberately NOT
/// done: a resumed run must be the same experiment).
pub fn checkpoint_load_matching(
    path: &Path,
    expected: &ModelConfig,
) -> Result<TrainState, CheckpointError> {
    let state = checkpoint_load(path)?;
    if &state.config != expected {
        let mut reason = String::from("checkpoint config differs");
        if state.config.variant != expected.variant {
            reason = format!(
                "checkpoint variant {} vs requested {}",
                state.config.variant.as_str(),
                expected.variant.as_str()
            );
        }
        return Err(CheckpointError::ConfigMismatch(reason));
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Variant;
    use crate::network::Model;

    fn tiny_state() -> TrainState {
        let config = ModelConfig::compact(Variant::OnlyMewb);
        let (_, params) = Model::build(&config).unwrap();
        let momentum = {
            let mut m = ParamStore::new();
            for (name, value) in params.iter() {
                m.insert(name.to_string(), ndarray::ArrayD::zeros(value.raw_dim()));
            }
            m
        };
        TrainState {
            config,
            step: 17,
            epoch: 2,
            params,
            momentum,
            best_metric: Some(0.75),
            history: vec![
                HistoryEntry {
                    step: 0,
                    loss: 2.5,
                    lr: 0.01,
                },
                HistoryEntry {
                    step: 1,
                    loss: 2.25,
                    lr: 0.0099,
                },
            ],
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = std::env::temp_dir().join(format!("fsg-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        let state = tiny_state();
        checkpoint_save(&state, &p1).unwrap();
        let loaded = checkpoint_load(&p1).unwrap();
        assert_eq!(loaded.step, 17);
        assert_eq!(loaded.epoch, 2);
        assert_eq!(loaded.best_metric, Some(0.75));
        assert_eq!(loaded.history, state.history);
        checkpoint_save(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn mismatched_variant_is_rejected() {
        let dir = std::env::temp_dir().join(format!("fsg-ckpt2-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("a.ckpt");
        let state = tiny_state();
        checkpoint_save(&state, &p).unwrap();
        let other = ModelConfig::compact(Variant::Full);
        match checkpoint_load_matching(&p, &other) {
            Err(CheckpointError::ConfigMismatch(msg)) => {
                assert!(msg.contains("variant"), "{msg}");
            }
            other => panic!("expected ConfigMismatch, got {:?}", other.map(|_| ())),
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn garbage_is_malformed() {
        let dir = std::env::temp_dir().join(format!("fsg-ckpt3-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("junk.ckpt");
        std::fs::write(&p, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            checkpoint_load(&p),
            Err(CheckpointError::Malformed(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }
}
