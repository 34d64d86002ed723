//! `SAVM` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "SAVM" | version u32
//! mode u8 (0 = savae, 1 = nvdm) | m u32 | d u32 | k u32
//! n_layers u32 | widths u32 * n_layers | train_samples u32 | eval_samples u32
//! n_arrays u32
//! per array: name (u32 length + UTF-8) | ndims u32 | dims u64 * ndims | f64 data
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ModelConfig, ModelMode, ModelParams, ParamSet};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SAVM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported checkpoint version {found} (expected {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint holds a {found} model but a {expected} model was required")]
    ModeMismatch { expected: ModelMode, found: ModelMode },
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt<T>(msg: impl Into<String>) -> Result<T> {
    Err(CheckpointError::CorruptCheckpoint(msg.into()))
}

pub fn to_bytes(params: &ModelParams, config: &ModelConfig) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * params.num_parameters());
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(match config.mode {
        ModelMode::Savae => 0,
        ModelMode::Nvdm => 1,
    });
    for v in [config.vocab_size, config.latent_dim, config.window, config.encoder_layers.len()] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &w in &config.encoder_layers {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(config.train_samples as u32).to_le_bytes());
    out.extend_from_slice(&(config.eval_samples as u32).to_le_bytes());

    let shapes = params.shapes();
    let tensors = params.tensors();
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for ((name, shape), (_, data)) in shapes.iter().zip(&tensors) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        for x in data.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelParams, ModelConfig)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return corrupt("bad magic");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let mode = match r.take(1)?[0] {
        0 => ModelMode::Savae,
        1 => ModelMode::Nvdm,
        other => return corrupt(format!("unknown model mode tag {other}")),
    };
    let vocab_size = r.u32()? as usize;
    let latent_dim = r.u32()? as usize;
    let window = r.u32()? as usize;
    let n_layers = r.u32()? as usize;
    if n_layers > 64 {
        return corrupt(format!("implausible encoder depth {n_layers}"));
    }
    let encoder_layers = (0..n_layers)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let config = ModelConfig {
        mode,
        vocab_size,
        latent_dim,
        window,
        encoder_layers,
        train_samples: r.u32()? as usize,
        eval_samples: r.u32()? as usize,
    };
    if let Err(e) = config.validate() {
        return corrupt(e.to_string());
    }

    let expected = ModelParams::zeros(&config).shapes();
    let total: usize = expected
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum();
    if total.saturating_mul(8) > bytes.len() {
        return corrupt("file too short for the declared model shape");
    }
    let n_arrays = r.u32()? as usize;
    if n_arrays != expected.len() {
        return corrupt(format!(
            "expected {} arrays for this config, found {n_arrays}",
            expected.len()
        ));
    }
    let mut params = ModelParams::zeros(&config);
    for ((exp_name, exp_shape), (_, dst)) in expected.iter().zip(params.tensors_mut()) {
        let name = r.string()?;
        if &name != exp_name {
            return corrupt(format!("expected array '{exp_name}', found '{name}'"));
        }
        let ndims = r.u32()? as usize;
        if ndims != exp_shape.len() {
            return corrupt(format!("array '{name}' has {ndims} dims, expected {}", exp_shape.len()));
        }
        let shape = (0..ndims)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        if &shape != exp_shape {
            return corrupt(format!("array '{name}' has shape {shape:?}, expected {exp_shape:?}"));
        }
        for x in dst.iter_mut() {
            *x = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            if !x.is_finite() {
                return corrupt(format!("non-finite value in '{name}'"));
            }
        }
    }
    if r.pos != bytes.len() {
        return corrupt("trailing bytes");
    }
    Ok((params, config))
}

pub fn save_checkpoint(params: &ModelParams, config: &ModelConfig, path: &Path) -> Result<()> {
    let io = |e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut f = fs::File::create(path).map_err(io)?;
    f.write_all(&to_bytes(params, config)).map_err(io)?;
    f.flush().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, ModelConfig)> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and rejects it unless it holds a `mode` model.
pub fn load_checkpoint_as(path: &Path, mode: ModelMode) -> Result<(ModelParams, ModelConfig)> {
    let (params, config) = load_checkpoint(path)?;
    if config.mode != mode {
        return Err(CheckpointError::ModeMismatch {
            expected: mode,
            found: config.mode,
        });
    }
    Ok((params, config))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.buf.len() => {
                let out = &self.buf[self.pos..end];
                self.pos = end;
                Ok(out)
            }
            _ => corrupt(format!("truncated at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .or_else(|_| corrupt("invalid UTF-8 array name"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn small(mode: ModelMode) -> ModelConfig {
        match mode {
            ModelMode::Savae => ModelConfig::savae(7, 3, 2),
            ModelMode::Nvdm => ModelConfig::nvdm(7, 3),
        }
        .with_encoder_layers(vec![5, 4])
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for mode in [ModelMode::Savae, ModelMode::Nvdm] {
            let config = small(mode);
            let params = ModelParams::init(&config, &mut Rng::new(21));
            let bytes = to_bytes(&params, &config);
            let (p2, c2) = from_bytes(&bytes).unwrap();
            assert_eq!(c2, config);
            assert_eq!(p2, params);
            assert_eq!(to_bytes(&p2, &c2), bytes);
        }
    }

    #[test]
    fn truncated_is_corrupt() {
        let config = small(ModelMode::Savae);
        let bytes = to_bytes(&ModelParams::init(&config, &mut Rng::new(1)), &config);
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                from_bytes(&bytes[..cut]),
                Err(CheckpointError::CorruptCheckpoint(_))
            ));
        }
    }

    #[test]
    fn version_mismatch() {
        let config = small(ModelMode::Nvdm);
        let mut bytes = to_bytes(&ModelParams::zeros(&config), &config);
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&bytes),
            Err(CheckpointError::UnsupportedVersion { found: 99, .. })
        ));
    }

    #[test]
    fn shape_mismatch_detected() {
        let config = small(ModelMode::Savae);
        let mut bytes = to_bytes(&ModelParams::zeros(&config), &config);
        // Flip the mode tag: array list no longer matches the config.
        bytes[8] = 1;
        assert!(matches!(from_bytes(&bytes), Err(CheckpointError::CorruptCheckpoint(_))));
    }

    #[test]
    fn savae_checkpoint_rejected_by_nvdm_loader() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.savm");
        let config = small(ModelMode::Savae);
        save_checkpoint(&ModelParams::zeros(&config), &config, &path).unwrap();
        assert!(matches!(
            load_checkpoint_as(&path, ModelMode::Nvdm),
            Err(CheckpointError::ModeMismatch { .. })
        ));
        assert!(load_checkpoint_as(&path, ModelMode::Savae).is_ok());
    }
}
