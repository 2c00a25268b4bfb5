//! Checkpoint bundle: a `key=value` text section describing the run plus
//! named `.bvt` blobs for every parameter, buffer and optimizer moment.
//!
//! ```text
//! "BVCK" | u32 version | u32 text_len | text | u32 count |
//!   count × (u32 name_len | name | u64 blob_len | bvt blob)
//! ```

use std::path::Path;

use sha2::{Digest, Sha256};

use super::bvt::{decode_tensor, encode_tensor};
use crate::error::{Error, Result};
use crate::fusion_model::{BevFusionModel, ModelConfig};
use crate::numerics::{Array, Real, Tensor};
use crate::training::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"BVCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub text: Vec<(String, String)>,
    pub blobs: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.text
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn blob(&self, name: &str) -> Option<&Tensor> {
        self.blobs.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut text = String::new();
    for (k, v) in &ck.text {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::contract(format!(
                "checkpoint text entry `{k}` is not a single key=value line"
            )));
        }
        text.push_str(&format!("{k}={v}\n"));
    }
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u32).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(ck.blobs.len() as u32).to_le_bytes());
    for (name, t) in &ck.blobs {
        let blob = encode_tensor(t)?;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, n: u64, what: &str) -> Result<usize> {
        let n = usize::try_from(n).unwrap_or(usize::MAX);
        if n > self.bytes.len() - self.pos {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("{what} length {n} runs past end of file"),
            ));
        }
        Ok(n)
    }
}

/// Parse a checkpoint image. `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut c = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if c.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad checkpoint magic"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let n = c.u32("text length")? as u64;
    let n = c.len(n, "text")?;
    let text_at = c.pos;
    let raw = c.take(n, "text")?;
    let text = std::str::from_utf8(raw).map_err(|e| {
        Error::format(
            path,
            (text_at + e.valid_up_to()) as u64,
            "text is not UTF-8",
        )
    })?;
    let mut entries = Vec::new();
    for line in text.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(
                path,
                text_at as u64,
                format!("text line `{line}` lacks `=`"),
            )
        })?;
        entries.push((k.to_string(), v.to_string()));
    }
    let count = c.u32("blob count")?;
    let mut blobs = Vec::new();
    for _ in 0..count {
        let n = c.u32("name length")? as u64;
        let n = c.len(n, "name")?;
        let at = c.pos;
        let name = std::str::from_utf8(c.take(n, "name")?)
            .map_err(|_| Error::format(path, at as u64, "blob name is not UTF-8"))?
            .to_string();
        let n = c.u64("blob length")?;
        let n = c.len(n, "blob")?;
        let at = c.pos;
        let t = decode_tensor(c.take(n, "blob")?, path).map_err(|e| match e {
            Error::Format { path, offset, msg } => Error::Format {
                path,
                offset: offset + at as u64,
                msg: format!("blob `{name}`: {msg}"),
            },
            other => other,
        })?;
        blobs.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(
            path,
            c.pos as u64,
            "trailing bytes after last blob",
        ));
    }
    Ok(Checkpoint {
        text: entries,
        blobs,
    })
}

/// Hex SHA-256 over the architecture entries.
pub fn config_hash(cfg: &ModelConfig) -> String {
    let mut h = Sha256::new();
    for (k, v) in cfg.entries() {
        h.update(format!("{k}={v}\n"));
    }
    format!("{:x}", h.finalize())
}

pub fn model_checkpoint<F: Real>(model: &BevFusionModel<F>, state: &TrainState<F>) -> Checkpoint {
    let mut text: Vec<(String, String)> = model
        .config
        .entries()
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    text.push(("config_hash".into(), config_hash(&model.config)));
    text.push(("dtype".into(), F::DTYPE_NAME.into()));
    text.push(("step".into(), state.adam.step.to_string()));
    text.push(("epoch".into(), state.epoch.to_string()));
    text.push(("seed".into(), state.seed.to_string()));
    text.push((
        "best_val_dba".into(),
        state
            .best_val_dba
            .map(|v| format!("{v:e}"))
            .unwrap_or_default(),
    ));
    let mut blobs = Vec::new();
    for (i, e) in model.store.entries().iter().enumerate() {
        blobs.push((format!("param/{}", e.name), Tensor::from_array(&e.value)));
        if e.trainable {
            let shape = e.value.shape().to_vec();
            for (tag, buf) in [("adam_m", &state.adam.m[i]), ("adam_v", &state.adam.v[i])] {
                let a = Array::new(shape.clone(), buf.clone()).expect("moment shape");
                blobs.push((format!("{tag}/{}", e.name), Tensor::from_array(&a)));
            }
        }
    }
    Checkpoint { text, blobs }
}

pub fn save_checkpoint<F: Real>(
    path: &Path,
    model: &BevFusionModel<F>,
    state: &TrainState<F>,
) -> Result<()> {
    let bytes = encode_checkpoint(&model_checkpoint(model, state))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Rebuild a model and its training state from `ck`, which must have been
/// written for an architecture equal to `config`.
pub fn restore<F: Real>(
    ck: &Checkpoint,
    config: &ModelConfig,
    path: &Path,
) -> Result<(BevFusionModel<F>, TrainState<F>)> {
    for (k, v) in config.entries() {
        match ck.get(k) {
            Some(have) if have == v => {}
            have => {
                return Err(Error::CheckpointMismatch {
                    key: k.to_string(),
                    checkpoint: have.unwrap_or("<missing>").to_string(),
                    config: v,
                })
            }
        }
    }
    let mut model = BevFusionModel::<F>::new(config.clone(), 0)?;
    let mut adam = AdamState::new(&model.store);
    let names: Vec<(usize, String, bool)> = model
        .store
        .entries()
        .iter()
        .enumerate()
        .map(|(i, e)| (i, e.name.clone(), e.trainable))
        .collect();
    let fetch = |key: String, shape: &[usize]| -> Result<Array<F>> {
        let t = ck
            .blob(&key)
            .ok_or_else(|| Error::format(path, 0, format!("checkpoint lacks `{key}`")))?;
        if t.shape() != shape {
            return Err(Error::CheckpointMismatch {
                key,
                checkpoint: format!("{:?}", t.shape()),
                config: format!("{shape:?}"),
            });
        }
        t.to_array()
    };
    for (i, name, trainable) in names {
        let shape = model.store.entries()[i].value.shape().to_vec();
        model.store.entries_mut()[i].value = fetch(format!("param/{name}"), &shape)?;
        if trainable {
            adam.m[i] = fetch(format!("adam_m/{name}"), &shape)?.into_data();
            adam.v[i] = fetch(format!("adam_v/{name}"), &shape)?.into_data();
        }
    }
    let num = |k: &str| -> Result<u64> {
        ck.get(k)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::format(path, 0, format!("checkpoint text lacks numeric `{k}`")))
    };
    adam.step = num("step")?;
    let state = TrainState {
        adam,
        epoch: num("epoch")? as usize,
        seed: num("seed")?,
        best_val_dba: ck.get("best_val_dba").and_then(|v| v.parse().ok()),
    };
    Ok((model, state))
}

pub fn load_checkpoint<F: Real>(
    path: &Path,
    config: &ModelConfig,
) -> Result<(BevFusionModel<F>, TrainState<F>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ck = decode_checkpoint(&bytes, path)?;
    restore(&ck, config, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::TensorData;

    fn tiny() -> ModelConfig {
        ModelConfig {
            grid: 8,
            c_bev: 8,
            c_back: 8,
            camera_size: 16,
            xattn_layers: 1,
            xattn_heads: 2,
            temporal_layers: 1,
            temporal_heads: 2,
            gps_hidden: 4,
            head_hidden: 8,
            beams: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = BevFusionModel::<f32>::new(tiny(), 3).unwrap();
        let mut st = TrainState::new(&m.store, 11);
        st.adam.step = 7;
        st.epoch = 2;
        st.best_val_dba = Some(0.625);
        st.adam.m[1].iter_mut().for_each(|v| *v = 0.5);
        let bytes = encode_checkpoint(&model_checkpoint(&m, &st)).unwrap();
        let ck = decode_checkpoint(&bytes, Path::new("m.ck")).unwrap();
        let (m2, st2) = restore::<f32>(&ck, &tiny(), Path::new("m.ck")).unwrap();
        assert_eq!(st2, st);
        for (a, b) in m.store.entries().iter().zip(m2.store.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert_eq!(
            encode_checkpoint(&model_checkpoint(&m2, &st2)).unwrap(),
            bytes
        );
    }

    #[test]
    fn mismatch_names_the_key() {
        let m = BevFusionModel::<f32>::new(tiny(), 3).unwrap();
        let st = TrainState::new(&m.store, 0);
        let ck = model_checkpoint(&m, &st);
        let other = ModelConfig { beams: 6, ..tiny() };
        match restore::<f32>(&ck, &other, Path::new("m.ck")) {
            Err(Error::CheckpointMismatch {
                key,
                checkpoint,
                config,
            }) => {
                assert_eq!(key, "beams");
                assert_eq!((checkpoint.as_str(), config.as_str()), ("4", "6"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn corrupt_images_are_format_errors() {
        let ck = Checkpoint {
            text: vec![("a".into(), "1".into())],
            blobs: vec![(
                "x".into(),
                Tensor::new(vec![2], TensorData::U8(vec![1, 2])).unwrap(),
            )],
        };
        let good = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&good, Path::new("c")).unwrap(), ck);
        let mut bad = good.clone();
        bad[1] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad, Path::new("c")),
            Err(Error::Format { offset: 0, .. })
        ));
        for cut in 0..good.len() {
            assert!(decode_checkpoint(&good[..cut], Path::new("c")).is_err());
        }
        let mut extra = good.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra, Path::new("c")).is_err());
    }
}
