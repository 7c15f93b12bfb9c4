//! Checkpoint container: one JSON header line (model config plus caller
//! metadata), then named parameter blobs as 32-bit little-endian floats.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;

use super::{Mat, Model, ModelConfig, Tensors};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: ModelConfig,
    pub step: usize,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub fn save(
    path: &Path,
    model: &Model<f32>,
    meta: serde_json::Map<String, serde_json::Value>,
) -> Result<()> {
    let header = CheckpointHeader {
        config: model.config.clone(),
        step: model.step,
        meta,
    };
    let mut bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Config(format!("checkpoint header: {e}")))?;
    bytes.push(b'\n');
    for ((name, _, _), mat) in model.config.layout().iter().zip(&model.params.mats) {
        bytes.extend_from_slice(&(name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(name.as_bytes());
        bytes.extend_from_slice(&(mat.rows as u32).to_le_bytes());
        bytes.extend_from_slice(&(mat.cols as u32).to_le_bytes());
        for v in &mat.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    io::write_atomic(path, &bytes)
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let display = path.display().to_string();
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::parse(&display, 1, "missing header line"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::parse(&display, 1, e.to_string()))?;
    header.config.validate()?;

    let mut offset = newline + 1;
    let take = |offset: &mut usize, n: usize| -> Result<&[u8]> {
        if *offset + n > bytes.len() {
            return Err(Error::parse(&display, 1, "truncated checkpoint"));
        }
        let slice = &bytes[*offset..*offset + n];
        *offset += n;
        Ok(slice)
    };
    let read_u32 = |offset: &mut usize| -> Result<u32> {
        let b = take(offset, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };

    let layout = header.config.layout();
    let mut mats = Vec::with_capacity(layout.len());
    for (want_name, want_rows, want_cols) in &layout {
        let name_len = read_u32(&mut offset)? as usize;
        let name = String::from_utf8(take(&mut offset, name_len)?.to_vec())
            .map_err(|_| Error::parse(&display, 1, "bad blob name"))?;
        let rows = read_u32(&mut offset)? as usize;
        let cols = read_u32(&mut offset)? as usize;
        if &name != want_name || rows != *want_rows || cols != *want_cols {
            return Err(Error::parse(
                &display,
                1,
                format!(
                    "blob {name} ({rows}x{cols}) does not match layout {want_name} ({want_rows}x{want_cols})"
                ),
            ));
        }
        let raw = take(&mut offset, rows * cols * 4)?;
        let mut data = Vec::with_capacity(rows * cols);
        for chunk in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        mats.push(Mat { rows, cols, data });
    }
    if offset != bytes.len() {
        return Err(Error::parse(&display, 1, "trailing bytes in checkpoint"));
    }
    Ok((
        Model {
            config: header.config.clone(),
            params: Tensors { mats },
            step: header.step,
        },
        header,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq: 8,
            vocab_size: 10,
            tie_embeddings: true,
            dropout: 0.0,
            seed: 9,
        };
        let mut model = Model::<f32>::new(config).unwrap();
        model.step = 42;
        let mut meta = serde_json::Map::new();
        meta.insert("config_hash".into(), serde_json::json!("abc123"));
        let path = dir.path().join("model.ckpt");
        save(&path, &model, meta).unwrap();
        let (back, header) = load(&path).unwrap();
        assert_eq!(header.step, 42);
        assert_eq!(header.meta["config_hash"], "abc123");
        assert_eq!(back.config, model.config);
        for (a, b) in back.params.mats.iter().zip(&model.params.mats) {
            let ab: Vec<u32> = a.data.iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn truncated_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let config = ModelConfig {
            dim: 8,
            layers: 1,
            heads: 2,
            ffn_mult: 2,
            max_seq: 8,
            vocab_size: 10,
            tie_embeddings: true,
            dropout: 0.0,
            seed: 9,
        };
        let model = Model::<f32>::new(config).unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, serde_json::Map::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
        assert!(load(&path).is_err());
    }
}
