//! Checkpoint container: magic `SSPOTCKP`, version byte, length-prefixed JSON
//! header (model config, optimizer hyperparameters, step counter, named
//! tensor directory with shapes/offsets/CRC32), then raw little-endian f64
//! tensor blobs in directory order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{count_parameters, ModelConfig, ModelParams};
use crate::optim::{OptimConfig, OptimState};
use crate::tensor::{Tensor, CELL_STRIDE_LAYERS};

pub const MAGIC: &[u8; 8] = b"SSPOTCKP";
pub const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob section.
    offset: u64,
    crc32: u32,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub model_config: ModelConfig,
    pub optim: OptimConfig,
    pub step: u64,
    /// Trainable parameter count (tied filters counted once).
    pub param_count: usize,
    #[serde(rename = "tensors")]
    directory: Vec<TensorEntry>,
}

fn tensor_bytes(data: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(data.len() * 8);
    for v in data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

/// All serialized tensors: model parameters then optimizer moments, in the
/// canonical parameter order.
fn directory_tensors(params: &ModelParams, optim: &OptimState) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let named = params.named_tensors();
    let mut out: Vec<(String, Vec<usize>, Vec<f64>)> = named
        .iter()
        .map(|(n, t)| (n.clone(), t.shape().to_vec(), t.to_vec()))
        .collect();
    for (kind, moments) in [("m", &optim.m), ("v", &optim.v)] {
        for ((name, t), m) in named.iter().zip(moments) {
            out.push((format!("optim.{kind}.{name}"), t.shape().to_vec(), m.clone()));
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, optim: &OptimState, path: &Path) -> Result<()> {
    let tensors = directory_tensors(params, optim);
    let mut directory = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        directory.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset,
            crc32: crc32fast::hash(&tensor_bytes(data)),
        });
        offset += (data.len() * 8) as u64;
    }
    let header = CheckpointHeader {
        model_config: params.config.clone(),
        optim: optim.config,
        step: optim.step,
        param_count: count_parameters(params),
        directory,
    };
    let header_json = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(header_json.len() as u32).to_le_bytes())?;
        w.write_all(&header_json)?;
        for (_, _, data) in &tensors {
            w.write_all(&tensor_bytes(data))?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Header only, without loading blobs.
pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
    let mut r = BufReader::new(File::open(path)?);
    read_header_from(&mut r, path)
}

fn read_header_from(r: &mut impl Read, path: &Path) -> Result<CheckpointHeader> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::runtime(format!("{}: truncated before magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::runtime(format!(
            "{}: bad magic {:?}, not a checkpoint file",
            path.display(),
            magic
        )));
    }
    let mut version = [0u8; 1];
    r.read_exact(&mut version)
        .map_err(|_| Error::runtime(format!("{}: truncated version byte", path.display())))?;
    if version[0] != VERSION {
        return Err(Error::runtime(format!(
            "{}: unsupported checkpoint version {}",
            path.display(),
            version[0]
        )));
    }
    let mut len = [0u8; 4];
    r.read_exact(&mut len)
        .map_err(|_| Error::runtime(format!("{}: truncated header length", path.display())))?;
    let mut header_json = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut header_json)
        .map_err(|_| Error::runtime(format!("{}: truncated header", path.display())))?;
    serde_json::from_slice(&header_json)
        .map_err(|e| Error::runtime(format!("{}: malformed header: {e}", path.display())))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, OptimState)> {
    let mut r = BufReader::new(File::open(path)?);
    let header = read_header_from(&mut r, path)?;
    let mut blobs: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    // Entries were written contiguously in directory order.
    let mut expected_offset = 0u64;
    for entry in &header.directory {
        if entry.offset != expected_offset {
            return Err(Error::runtime(format!(
                "{}: tensor {} at offset {} but blob cursor is {expected_offset}",
                path.display(),
                entry.name,
                entry.offset
            )));
        }
        let numel: usize = entry.shape.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        r.read_exact(&mut bytes).map_err(|_| {
            Error::runtime(format!("{}: truncated blob for tensor {}", path.display(), entry.name))
        })?;
        if crc32fast::hash(&bytes) != entry.crc32 {
            return Err(Error::runtime(format!(
                "{}: CRC32 mismatch for tensor {}",
                path.display(),
                entry.name
            )));
        }
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blobs.insert(entry.name.clone(), (entry.shape.clone(), data));
        expected_offset += (numel * 8) as u64;
    }

    let mut take_param = |name: &str| -> Result<Tensor> {
        let (shape, data) = blobs
            .remove(name)
            .ok_or_else(|| Error::runtime(format!("{}: missing tensor {name}", path.display())))?;
        Ok(Tensor::from_vec(shape, data)?.requires_grad(true))
    };

    let cfg = header.model_config.clone();
    cfg.validate()?;
    let mut enc_filters = Vec::new();
    let mut enc_biases = Vec::new();
    for i in 0..CELL_STRIDE_LAYERS {
        enc_filters.push(take_param(&format!("enc.{i}.weight"))?);
        enc_biases.push(take_param(&format!("enc.{i}.bias"))?);
    }
    let dec_biases = (0..CELL_STRIDE_LAYERS)
        .map(|j| take_param(&format!("dec.{j}.bias")))
        .collect::<Result<Vec<_>>>()?;
    let class_head = (take_param("head.class.weight")?, take_param("head.class.bias")?);
    let obj_head = (take_param("head.obj.weight")?, take_param("head.obj.bias")?);
    let box_head = (take_param("head.box.weight")?, take_param("head.box.bias")?);
    let params = ModelParams {
        config: cfg,
        enc_filters,
        enc_biases,
        dec_biases,
        class_head,
        obj_head,
        box_head,
    };

    let named = params.named_tensors();
    let mut optim = OptimState::new(header.optim, &named);
    optim.step = header.step;
    for (kind, slot) in [("m", &mut optim.m), ("v", &mut optim.v)] {
        for ((name, _), dst) in named.iter().zip(slot.iter_mut()) {
            let key = format!("optim.{kind}.{name}");
            let (_, data) = blobs
                .remove(&key)
                .ok_or_else(|| Error::runtime(format!("{}: missing tensor {key}", path.display())))?;
            *dst = data;
        }
    }
    Ok((params, optim))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;

    fn desk_pair() -> (ModelParams, OptimState) {
        let cfg = ModelConfig { image_h: 64, image_w: 64, ..ModelConfig::desk() };
        let params = build_model(&cfg, 17).unwrap();
        let mut optim = OptimState::new(OptimConfig::default(), &params.named_tensors());
        optim.step = 42;
        for m in optim.m.iter_mut() {
            for (i, v) in m.iter_mut().enumerate() {
                *v = i as f64 * 0.5;
            }
        }
        (params, optim)
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (params, optim) = desk_pair();
        save_checkpoint(&params, &optim, &path).unwrap();
        let (loaded, loaded_optim) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, params.config);
        assert_eq!(loaded_optim.step, 42);
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(loaded.named_tensors().iter()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.to_vec().iter().zip(b.to_vec()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        for (a, b) in optim.m.iter().zip(&loaded_optim.m) {
            assert_eq!(a, b);
        }
        // Tied structure survives: mutating an encoder filter is visible
        // through the same tensor the decoder will use.
        assert!(loaded.enc_filters[0].is_tracked());
    }

    #[test]
    fn header_reports_param_count() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (params, optim) = desk_pair();
        save_checkpoint(&params, &optim, &path).unwrap();
        let header = read_header(&path).unwrap();
        assert_eq!(header.param_count, count_parameters(&params));
    }

    #[test]
    fn truncated_file_is_rejected_whole() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (params, optim) = desk_pair();
        save_checkpoint(&params, &optim, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let cut = path.with_file_name("cut.ckpt");
        std::fs::write(&cut, &bytes[..bytes.len() - 100]).unwrap();
        let err = load_checkpoint(&cut).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn corrupted_blob_fails_crc() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (params, optim) = desk_pair();
        save_checkpoint(&params, &optim, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let n = bytes.len();
        bytes[n - 9] ^= 0xff;
        let bad = path.with_file_name("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        let err = load_checkpoint(&bad).unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");
    }

    #[test]
    fn wrong_magic_is_not_a_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("noise.bin");
        std::fs::write(&path, b"definitely not a checkpoint").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
