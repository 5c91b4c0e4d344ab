//! Binary model checkpoints.
//!
//! Layout: an 8-byte magic, a little-endian u32 format version, a u64 header
//! length, a JSON header, then every parameter tensor as raw little-endian
//! f64 words. The header records the model dimensions, the seen class ids in
//! classifier column order, the training configuration, and an index of
//! tensor names with shapes and element offsets into the blob. Round-trips
//! are bit-exact because values never leave f64.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::networks::{ModelDims, ModelParams};

const MAGIC: [u8; 8] = *b"SPHGATE\0";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, counted in f64 elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dims: ModelDims,
    seen_class_ids: Vec<i64>,
    train: TrainConfig,
    tensors: Vec<TensorEntry>,
}

fn parse_err(detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

/// Tensor names in the exact order `ModelParams::tensors_mut` yields slices.
/// Encoder parameter groups are keyed `theta_*`, decoder and classifier
/// groups `phi_*`.
fn tensor_names() -> [&'static str; 22] {
    [
        "theta_f.trunk.w",
        "theta_f.trunk.b",
        "theta_f.mu_head.w",
        "theta_f.mu_head.b",
        "theta_f.kappa_head.w",
        "theta_f.kappa_head.b",
        "theta_a.trunk.w",
        "theta_a.trunk.b",
        "theta_a.mu_head.w",
        "theta_a.mu_head.b",
        "theta_a.kappa_head.w",
        "theta_a.kappa_head.b",
        "phi_f.hidden.w",
        "phi_f.hidden.b",
        "phi_f.out.w",
        "phi_f.out.b",
        "phi_a.hidden.w",
        "phi_a.hidden.b",
        "phi_a.out.w",
        "phi_a.out.b",
        "phi_cls.w",
        "phi_cls.b",
    ]
}

fn tensor_shapes(model: &ModelParams) -> Vec<Vec<usize>> {
    let lin = |w_rows: usize, w_cols: usize| vec![vec![w_rows, w_cols], vec![w_cols]];
    let mut shapes = Vec::new();
    for enc in [&model.enc_f, &model.enc_a] {
        shapes.extend(lin(enc.spec.input_dim, enc.spec.hidden_dim));
        shapes.extend(lin(enc.spec.hidden_dim, enc.spec.latent_dim));
        shapes.extend(lin(enc.spec.hidden_dim, 1));
    }
    for dec in [&model.dec_f, &model.dec_a] {
        shapes.extend(lin(dec.spec.latent_dim, dec.spec.hidden_dim));
        shapes.extend(lin(dec.spec.hidden_dim, dec.spec.output_dim));
    }
    shapes.extend(lin(model.dims.latent_dim, model.dims.n_seen_classes));
    shapes
}

/// Writes a model and the configuration it was trained with.
pub fn save(path: &Path, model: &ModelParams, train: &TrainConfig) -> Result<()> {
    let mut working = model.clone();
    let slices = working.tensors_mut();
    let shapes = tensor_shapes(model);
    let mut tensors = Vec::with_capacity(slices.len());
    let mut offset = 0usize;
    for ((name, shape), slice) in tensor_names().iter().zip(shapes).zip(&slices) {
        tensors.push(TensorEntry {
            name: (*name).to_string(),
            shape,
            offset,
        });
        offset += slice.len();
    }
    let header = Header {
        dims: model.dims.clone(),
        seen_class_ids: model.seen_class_ids.clone(),
        train: train.clone(),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| parse_err(format!("header serialization failed: {e}")))?;

    let mut out = Vec::with_capacity(24 + header_bytes.len() + offset * 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for slice in &slices {
        for &v in slice.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

/// Reads a checkpoint back; fails loudly on any structural inconsistency.
pub fn load(path: &Path) -> Result<(ModelParams, TrainConfig)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 20 {
        return Err(parse_err("file shorter than the fixed preamble"));
    }
    if bytes[..8] != MAGIC {
        return Err(parse_err("bad magic; not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(parse_err(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let blob_start = 20 + header_len;
    if bytes.len() < blob_start {
        return Err(parse_err("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[20..blob_start])
        .map_err(|e| parse_err(format!("header JSON: {e}")))?;

    let mut model = ModelParams::zeros(header.dims.clone(), header.seen_class_ids.clone())?;
    let names = tensor_names();
    if header.tensors.len() != names.len() {
        return Err(parse_err(format!(
            "expected {} tensors, header lists {}",
            names.len(),
            header.tensors.len()
        )));
    }
    let shapes = tensor_shapes(&model);
    let blob = &bytes[blob_start..];
    let mut expected_offset = 0usize;
    let mut slices = model.tensors_mut();
    for (i, slice) in slices.iter_mut().enumerate() {
        let entry = &header.tensors[i];
        if entry.name != names[i] {
            return Err(parse_err(format!(
                "tensor {i} is named {:?}, expected {:?}",
                entry.name, names[i]
            )));
        }
        if entry.shape != shapes[i] {
            return Err(parse_err(format!(
                "tensor {} has shape {:?}, model dimensions imply {:?}",
                entry.name, entry.shape, shapes[i]
            )));
        }
        if entry.offset != expected_offset {
            return Err(parse_err(format!(
                "tensor {} at offset {}, expected {}",
                entry.name, entry.offset, expected_offset
            )));
        }
        let start = expected_offset * 8;
        let end = start + slice.len() * 8;
        if blob.len() < end {
            return Err(parse_err("blob shorter than the tensor index requires"));
        }
        for (k, v) in slice.iter_mut().enumerate() {
            let b = &blob[start + k * 8..start + k * 8 + 8];
            *v = f64::from_le_bytes(b.try_into().unwrap());
        }
        expected_offset += slice.len();
    }
    if blob.len() != expected_offset * 8 {
        return Err(parse_err(format!(
            "blob holds {} bytes, tensor index accounts for {}",
            blob.len(),
            expected_offset * 8
        )));
    }
    drop(slices);
    Ok((model, header.train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::ModelDims;

    fn small_model() -> ModelParams {
        let dims = ModelDims {
            feat_dim: 6,
            attr_dim: 4,
            latent_dim: 3,
            hidden_dim: 5,
            n_seen_classes: 3,
            kappa_max: 400.0,
        };
        ModelParams::init(dims, vec![10, 20, 30], 42).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let model = small_model();
        let mut train = TrainConfig::default();
        train.epochs = 7;
        train.seed = 42;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &train).unwrap();
        let (loaded, loaded_train) = load(&path).unwrap();
        assert_eq!(loaded_train, train);
        assert_eq!(loaded.seen_class_ids, model.seen_class_ids);
        let mut a = model.clone();
        let mut b = loaded.clone();
        for (sa, sb) in a.tensors_mut().into_iter().zip(b.tensors_mut()) {
            for (va, vb) in sa.iter().zip(sb.iter()) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let model = small_model();
        let train = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &train).unwrap();

        let mut bytes = fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.path().join("bad.ckpt");
        fs::write(&bad, &bytes).unwrap();
        assert!(matches!(load(&bad), Err(Error::Parse { .. })));

        let good = fs::read(&path).unwrap();
        let cut = dir.path().join("cut.ckpt");
        fs::write(&cut, &good[..good.len() - 9]).unwrap();
        assert!(matches!(load(&cut), Err(Error::Parse { .. })));
    }

    #[test]
    fn rejects_future_versions() {
        let model = small_model();
        let train = TrainConfig::default();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &model, &train).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8] = 99;
        fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"));
    }
}
