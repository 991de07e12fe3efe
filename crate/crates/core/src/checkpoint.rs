//! Binary checkpoint format.
//!
//! Layout: magic `AFRD`, version `u32` LE, entry count `u32`, then per
//! entry `u32` name length, UTF-8 name, `u8` dtype (0 = f32), `u32` rank,
//! `u32` dims; after the manifest come the raw little-endian f32 blobs in
//! manifest order. Saving is deterministic, so save→load→save is
//! byte-identical.

use crate::model::{AfrdModel, FusionMode, ModelConfig};
use crate::tensor::Real;
use crate::train::AdamW;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"AFRD";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: not an AFRD checkpoint")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("truncated or corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint is missing entry '{0}'")]
    MissingEntry(String),
    #[error("entry '{name}': expected {expected} values, got {got}")]
    ShapeMismatch { name: String, expected: usize, got: usize },
    #[error("invalid model config in checkpoint: {0}")]
    BadConfig(String),
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f32>,
}

fn config_blob(config: &ModelConfig) -> Entry {
    let (kind, j) = match config.fusion {
        FusionMode::Attention => (0.0, 0.0),
        FusionMode::Mean => (1.0, 0.0),
        FusionMode::Single(j) => (2.0, j as f32),
    };
    let data = vec![
        config.n_lightings as f32,
        config.image_size as f32,
        config.in_channels as f32,
        config.stem_width as f32,
        config.stage_widths[0] as f32,
        config.stage_widths[1] as f32,
        config.stage_widths[2] as f32,
        config.embed_width as f32,
        kind,
        j,
        config.pooled_attention as u8 as f32,
        config.normalize_input as u8 as f32,
    ];
    Entry {
        name: "meta/config".into(),
        shape: vec![12],
        data,
    }
}

fn config_from_blob(data: &[f32]) -> Result<ModelConfig, CheckpointError> {
    if data.len() != 12 {
        return Err(CheckpointError::BadConfig(format!("config blob has {} values", data.len())));
    }
    let fusion = match data[8] as u32 {
        0 => FusionMode::Attention,
        1 => FusionMode::Mean,
        2 => FusionMode::Single(data[9] as usize),
        k => return Err(CheckpointError::BadConfig(format!("unknown fusion kind {k}"))),
    };
    Ok(ModelConfig {
        n_lightings: data[0] as usize,
        image_size: data[1] as usize,
        in_channels: data[2] as usize,
        stem_width: data[3] as usize,
        stage_widths: [data[4] as usize, data[5] as usize, data[6] as usize],
        embed_width: data[7] as usize,
        fusion,
        pooled_attention: data[10] != 0.0,
        normalize_input: data[11] != 0.0,
    })
}

fn collect_entries<R: Real>(model: &AfrdModel<R>, state: Option<&AdamW<R>>) -> Vec<Entry> {
    let mut entries = vec![config_blob(&model.config)];
    for (name, t) in model.named_params() {
        entries.push(Entry {
            name,
            shape: t.shape().to_vec(),
            data: t.to_vec().iter().map(|v| v.as_f32()).collect(),
        });
    }
    for (name, bn) in model.named_buffers() {
        entries.push(Entry {
            name: format!("{name}.running_mean"),
            shape: vec![bn.running_mean.borrow().len()],
            data: bn.running_mean.borrow().iter().map(|v| v.as_f32()).collect(),
        });
        entries.push(Entry {
            name: format!("{name}.running_var"),
            shape: vec![bn.running_var.borrow().len()],
            data: bn.running_var.borrow().iter().map(|v| v.as_f32()).collect(),
        });
    }
    if let Some(s) = state {
        entries.push(Entry {
            name: "optim/t".into(),
            shape: vec![1],
            data: vec![s.t as f32],
        });
        for (i, (name, _)) in model.trainable_params().iter().enumerate() {
            entries.push(Entry {
                name: format!("optim/m/{name}"),
                shape: vec![s.m[i].len()],
                data: s.m[i].iter().map(|v| v.as_f32()).collect(),
            });
            entries.push(Entry {
                name: format!("optim/v/{name}"),
                shape: vec![s.v[i].len()],
                data: s.v[i].iter().map(|v| v.as_f32()).collect(),
            });
        }
    }
    entries
}

/// Write model parameters, batch-norm statistics and (optionally) optimizer
/// moments to `path`.
pub fn save_checkpoint<R: Real>(
    model: &AfrdModel<R>,
    state: Option<&AdamW<R>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let entries = collect_entries(model, state);
    let io = |source: std::io::Error| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in &entries {
        buf.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(e.name.as_bytes());
        buf.push(DTYPE_F32);
        buf.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for d in &e.shape {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
    }
    for e in &entries {
        for v in &e.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&buf).map_err(io)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| CheckpointError::Corrupt("unexpected end of file".into()))?;
    Ok(u32::from_le_bytes(b))
}

/// Read back a model (and optimizer state when present). No partial model
/// is returned on any failure.
pub fn load_checkpoint<R: Real>(path: &Path) -> Result<(AfrdModel<R>, Option<AdamW<R>>), CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut r = &bytes[..];
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CheckpointError::Corrupt("file too short".into()))?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)
            .map_err(|_| CheckpointError::Corrupt("truncated manifest".into()))?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Corrupt("non-utf8 entry name".into()))?;
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)
            .map_err(|_| CheckpointError::Corrupt("truncated manifest".into()))?;
        if dtype[0] != DTYPE_F32 {
            return Err(CheckpointError::Corrupt(format!("unsupported dtype {}", dtype[0])));
        }
        let rank = read_u32(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        manifest.push((name, shape));
    }
    let mut entries: Vec<Entry> = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut data = vec![0f32; n];
        for v in data.iter_mut() {
            let mut b = [0u8; 4];
            r.read_exact(&mut b)
                .map_err(|_| CheckpointError::Corrupt(format!("truncated blob for '{name}'")))?;
            *v = f32::from_le_bytes(b);
        }
        entries.push(Entry { name, shape, data });
    }

    let find = |name: &str| -> Result<&Entry, CheckpointError> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| CheckpointError::MissingEntry(name.to_string()))
    };

    let config = config_from_blob(&find("meta/config")?.data)?;
    let model: AfrdModel<R> =
        AfrdModel::init(config, 0).map_err(|e| CheckpointError::BadConfig(e.to_string()))?;

    let fill = |name: &str, expected: usize| -> Result<Vec<R>, CheckpointError> {
        let e = find(name)?;
        if e.data.len() != expected {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected,
                got: e.data.len(),
            });
        }
        Ok(e.data.iter().map(|v| R::from_f32(*v)).collect())
    };

    for (name, t) in model.named_params() {
        let data = fill(&name, t.numel())?;
        t.set_data(data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    for (name, bn) in model.named_buffers() {
        let c = bn.running_mean.borrow().len();
        *bn.running_mean.borrow_mut() = fill(&format!("{name}.running_mean"), c)?;
        *bn.running_var.borrow_mut() = fill(&format!("{name}.running_var"), c)?;
    }

    let state = if entries.iter().any(|e| e.name == "optim/t") {
        let params = model.trainable_params();
        let mut s = AdamW::new(&params);
        s.t = find("optim/t")?.data[0] as u64;
        for (i, (name, p)) in params.iter().enumerate() {
            s.m[i] = fill(&format!("optim/m/{name}"), p.numel())?;
            s.v[i] = fill(&format!("optim/v/{name}"), p.numel())?;
        }
        Some(s)
    } else {
        None
    };
    Ok((model, state))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ImageSet, Label};
    use crate::train::{train, TrainConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_lightings: 2,
            image_size: 32,
            ..ModelConfig::default()
        }
    }

    fn toy_sets(n: usize, seed: u64) -> Vec<ImageSet<f32>> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let images = (0..2)
                    .map(|_| (0..3 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect())
                    .collect();
                ImageSet::new(format!("s{i}"), images, 32, 32, Label::Normal, None).unwrap()
            })
            .collect()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = AfrdModel::<f32>::init(tiny_config(), 7).unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        save_checkpoint(&model, None, &p1).unwrap();
        let (loaded, state) = load_checkpoint::<f32>(&p1).unwrap();
        assert!(state.is_none());
        save_checkpoint(&loaded, None, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_model_scores_identically() {
        let dir = tempfile::tempdir().unwrap();
        let sets = toy_sets(4, 11);
        let model = AfrdModel::<f32>::init(tiny_config(), 5).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            ..TrainConfig::default()
        };
        train(&model, &sets, &cfg).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let (loaded, _) = load_checkpoint::<f32>(&path).unwrap();
        let probe = &toy_sets(1, 99)[0];
        let a = crate::score::score(&model, probe, 0.0).unwrap();
        let b = crate::score::score(&loaded, probe, 0.0).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.image_score, b.image_score);
    }

    #[test]
    fn optimizer_state_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let model = AfrdModel::<f32>::init(tiny_config(), 5).unwrap();
        let params = model.trainable_params();
        let mut state = AdamW::new(&params);
        state.t = 17;
        for (i, slot) in state.m.iter_mut().enumerate() {
            for (j, v) in slot.iter_mut().enumerate() {
                *v = (i as f32 + 1.0) * 0.01 + j as f32 * 1e-5;
            }
        }
        for slot in state.v.iter_mut() {
            for (j, v) in slot.iter_mut().enumerate() {
                *v = 0.5 + j as f32 * 1e-6;
            }
        }
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, Some(&state), &path).unwrap();
        let (_, loaded) = load_checkpoint::<f32>(&path).unwrap();
        let loaded = loaded.expect("optimizer state present");
        assert_eq!(loaded.t, state.t);
        assert_eq!(loaded.m, state.m);
        assert_eq!(loaded.v, state.v);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = AfrdModel::<f32>::init(tiny_config(), 7).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint::<f32>(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn bad_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = AfrdModel::<f32>::init(tiny_config(), 7).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::BadVersion(99))
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let model = AfrdModel::<f32>::init(tiny_config(), 7).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, None, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(CheckpointError::Corrupt(_))
        ));
    }
}
