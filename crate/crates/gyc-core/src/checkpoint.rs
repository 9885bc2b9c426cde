//! Checkpoint container: a magic string, a JSON header and named raw
//! little-endian `f64` arrays. Round-trips are bit-exact.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{GycError, Result};
use crate::math::Mat;
use crate::model::{LayerParams, LmParams, ModelConfig};
use crate::vocab::Vocabulary;

pub const LM_MAGIC: &str = "GYC-LM-v1";
pub const CLF_MAGIC: &str = "GYC-CLF-v1";

/// Provenance recorded alongside trained weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub corpus_hash: String,
    pub seed: u64,
    pub epochs: usize,
    pub final_loss: f64,
}

/// A trained model, its vocabulary and training metadata.
#[derive(Debug, Clone)]
pub struct LmCheckpoint {
    pub params: LmParams,
    pub vocab: Vocabulary,
    pub meta: TrainingMeta,
}

#[derive(Serialize, Deserialize)]
struct LmHeader {
    config: ModelConfig,
    vocab: Vocabulary,
    meta: TrainingMeta,
}

impl LmCheckpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_value(LmHeader {
            config: self.params.config.clone(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
        })?;
        let mut arrays: Vec<(String, &Mat)> =
            vec![("wte".into(), &self.params.wte), ("wpe".into(), &self.params.wpe)];
        for (i, l) in self.params.layers.iter().enumerate() {
            arrays.push((format!("layer{i}.wq"), &l.wq));
            arrays.push((format!("layer{i}.wk"), &l.wk));
            arrays.push((format!("layer{i}.wv"), &l.wv));
            arrays.push((format!("layer{i}.wo"), &l.wo));
            arrays.push((format!("layer{i}.fc1"), &l.fc1));
            arrays.push((format!("layer{i}.fc2"), &l.fc2));
        }
        write_container(path, LM_MAGIC, &header, &arrays)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut arrays) = read_container(path, LM_MAGIC)?;
        let header: LmHeader = serde_json::from_value(header)?;
        let config = header.config;
        config.validate()?;
        if header.vocab.size() != config.vocab_size {
            return Err(GycError::Checkpoint("vocabulary size disagrees with config".into()));
        }
        let mut take = |name: &str, rows: usize, cols: usize| -> Result<Mat> {
            let m = arrays
                .remove(name)
                .ok_or_else(|| GycError::Checkpoint(format!("missing array '{name}'")))?;
            if m.rows != rows || m.cols != cols {
                return Err(GycError::Checkpoint(format!(
                    "array '{name}' is {}x{}, expected {rows}x{cols}",
                    m.rows, m.cols
                )));
            }
            Ok(m)
        };
        let d = config.d_model;
        let wte = take("wte", config.vocab_size, d)?;
        let wpe = take("wpe", config.max_seq_len, d)?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            layers.push(LayerParams {
                wq: take(&format!("layer{i}.wq"), d, d)?,
                wk: take(&format!("layer{i}.wk"), d, d)?,
                wv: take(&format!("layer{i}.wv"), d, d)?,
                wo: take(&format!("layer{i}.wo"), d, d)?,
                fc1: take(&format!("layer{i}.fc1"), config.d_ff, d)?,
                fc2: take(&format!("layer{i}.fc2"), d, config.d_ff)?,
            });
        }
        if !arrays.is_empty() {
            return Err(GycError::Checkpoint(format!(
                "unexpected arrays in checkpoint: {:?}",
                arrays.keys().collect::<Vec<_>>()
            )));
        }
        Ok(LmCheckpoint {
            params: LmParams { config, wte, wpe, layers },
            vocab: header.vocab,
            meta: header.meta,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayDir {
    name: String,
    rows: usize,
    cols: usize,
}

/// Writes `magic` + '\n' + u64 header length + header JSON + raw arrays.
///
/// The header JSON gains an `arrays` field describing name and shape of each
/// trailing array in order.
pub fn write_container(
    path: &Path,
    magic: &str,
    header: &Value,
    arrays: &[(String, &Mat)],
) -> Result<()> {
    let mut header = header.clone();
    let dir: Vec<ArrayDir> = arrays
        .iter()
        .map(|(n, m)| ArrayDir { name: n.clone(), rows: m.rows, cols: m.cols })
        .collect();
    header
        .as_object_mut()
        .ok_or_else(|| GycError::Checkpoint("header must be a JSON object".into()))?
        .insert("arrays".into(), serde_json::to_value(&dir)?);
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(magic.as_bytes())?;
    w.write_all(b"\n")?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, m) in arrays {
        for v in &m.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a container written by [`write_container`], validating the magic.
pub fn read_container(path: &Path, magic: &str) -> Result<(Value, BTreeMap<String, Mat>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic_buf = vec![0u8; magic.len() + 1];
    r.read_exact(&mut magic_buf)
        .map_err(|_| GycError::Checkpoint("file too short for magic".into()))?;
    if &magic_buf[..magic.len()] != magic.as_bytes() || magic_buf[magic.len()] != b'\n' {
        return Err(GycError::Checkpoint(format!(
            "bad magic: expected '{magic}', found '{}'",
            String::from_utf8_lossy(&magic_buf[..magic.len()])
        )));
    }
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf)?;
    let header_len = u64::from_le_bytes(len_buf) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: Value = serde_json::from_slice(&header_bytes)?;
    let dir: Vec<ArrayDir> = serde_json::from_value(
        header
            .get("arrays")
            .cloned()
            .ok_or_else(|| GycError::Checkpoint("header lacks 'arrays'".into()))?,
    )?;

    let mut arrays = BTreeMap::new();
    for spec in dir {
        let n = spec.rows * spec.cols;
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf).map_err(|_| {
                GycError::Checkpoint(format!("array '{}' truncated", spec.name))
            })?;
            data.push(f64::from_le_bytes(buf));
        }
        arrays.insert(spec.name, Mat::from_data(spec.rows, spec.cols, data));
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(GycError::Checkpoint("trailing bytes after arrays".into()));
    }
    Ok((header, arrays))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_checkpoint() -> LmCheckpoint {
        let vocab = Vocabulary::from_words(["a", "b", "c"]).unwrap();
        let mut config = ModelConfig::desk(vocab.size());
        config.n_layers = 1;
        config.n_heads = 2;
        config.d_model = 8;
        config.head_dim = 4;
        config.d_ff = 16;
        config.max_seq_len = 6;
        let params = LmParams::init(config, 3).unwrap();
        LmCheckpoint {
            params,
            vocab,
            meta: TrainingMeta {
                corpus_hash: "00".into(),
                seed: 3,
                epochs: 0,
                final_loss: 1.25,
            },
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = tiny_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gyc");
        ck.save(&path).unwrap();
        let back = LmCheckpoint::load(&path).unwrap();
        assert_eq!(ck.params, back.params);
        assert_eq!(ck.meta, back.meta);
        assert_eq!(ck.vocab.size(), back.vocab.size());

        // A second save of the loaded checkpoint produces identical bytes.
        let path2 = dir.path().join("model2.gyc");
        back.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let ck = tiny_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gyc");
        ck.save(&path).unwrap();
        match read_container(&path, CLF_MAGIC) {
            Err(GycError::Checkpoint(msg)) => assert!(msg.contains("bad magic")),
            other => panic!("expected checkpoint error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ck = tiny_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.gyc");
        ck.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(LmCheckpoint::load(&path).is_err());
    }
}
