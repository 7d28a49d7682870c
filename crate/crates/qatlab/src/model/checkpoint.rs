//! Flat named-tensor checkpoint container: an 8-byte magic, a length-
//! prefixed JSON manifest (config echo, dtype, tensor directory, free-form
//! metadata), then raw little-endian f32 blobs in directory order.
//! Round-trips are bit-exact.

use super::{Model, ModelConfig, Param, ParamKind};
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"QATCKPT1";

pub type CheckpointMeta = BTreeMap<String, String>;

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
    meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: ParamKind,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    /// Element count.
    len: u64,
}

pub fn save_checkpoint(path: &Path, model: &Model<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors = Vec::new();
    let mut offset = 0u64;
    for p in model.params() {
        let len = p.tensor.numel() as u64;
        tensors.push(TensorEntry {
            name: p.name.clone(),
            kind: p.kind,
            shape: p.tensor.shape().to_vec(),
            offset,
            len,
        });
        offset += len * 4;
    }
    let manifest = Manifest {
        dtype: "f32".to_string(),
        config: *model.config(),
        tensors,
        meta: meta.clone(),
    };
    let manifest_bytes =
        serde_json::to_vec(&manifest).map_err(|e| Error::data(format!("manifest encode: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&manifest_bytes)?;
    for p in model.params() {
        for &v in p.tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model<f32>, CheckpointMeta)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "not a checkpoint: bad magic {:?} in {}",
            magic,
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)?;
    let manifest_len = u64::from_le_bytes(len_bytes) as usize;
    let mut manifest_bytes = vec![0u8; manifest_len];
    r.read_exact(&mut manifest_bytes)?;
    let manifest: Manifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::data(format!("manifest decode: {e}")))?;
    if manifest.dtype != "f32" {
        return Err(Error::data(format!(
            "unsupported checkpoint dtype '{}'",
            manifest.dtype
        )));
    }

    let mut params = Vec::with_capacity(manifest.tensors.len());
    let mut expected_offset = 0u64;
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(Error::data(format!(
                "tensor '{}' at offset {} (expected {expected_offset})",
                entry.name, entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        if numel as u64 != entry.len {
            return Err(Error::data(format!(
                "tensor '{}' length {} disagrees with shape {:?}",
                entry.name, entry.len, entry.shape
            )));
        }
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let tensor = Tensor::new(entry.shape.clone(), data)?;
        params.push(Param {
            name: entry.name.clone(),
            kind: entry.kind,
            tensor,
        });
        expected_offset += entry.len * 4;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::data("trailing bytes after final tensor"));
    }
    let model = Model::from_parts(manifest.config, params)?;
    Ok((model, manifest.meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::size_preset;
    use crate::quant::QuantMode;

    fn tmp_model() -> Model<f32> {
        let mut cfg = size_preset("desk-S").unwrap();
        cfg.seq_len = 16;
        Model::<f32>::init_from_seed(cfg, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qckpt");
        let model = tmp_model();
        let mut meta = CheckpointMeta::new();
        meta.insert("step".to_string(), "42".to_string());
        save_checkpoint(&path, &model, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&path).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(loaded.config(), model.config());
        for (a, b) in model.params().iter().zip(loaded.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            let bits_a: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{}", a.name);
        }
    }

    #[test]
    fn round_trip_preserves_losses_and_probe() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qckpt");
        let model = tmp_model();
        save_checkpoint(&path, &model, &CheckpointMeta::new()).unwrap();
        let (loaded, _) = load_checkpoint(&path).unwrap();
        let tokens: Vec<u16> = (0..17).map(|i| (i * 13 % 256) as u16).collect();
        let a = model.eval_loss(&tokens, QuantMode::Int6).unwrap();
        let b = loaded.eval_loss(&tokens, QuantMode::Int6).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert_eq!(
            model.mean_grid_distance().unwrap().to_bits(),
            loaded.mean_grid_distance().unwrap().to_bits()
        );
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.qckpt");
        std::fs::write(&path, b"NOTAFILE________").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qckpt");
        let model = tmp_model();
        save_checkpoint(&path, &model, &CheckpointMeta::new()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
