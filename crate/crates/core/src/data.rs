//! Dataset bundles: validation, on-disk format, and synthetic generation.
//!
//! A bundle directory holds a `manifest.txt` of `key = value` lines plus one
//! binary file per array. Real-valued arrays are little-endian f32, row
//! major; labels, class ids, and split indices are little-endian i64. In
//! memory everything is f64. Loading validates every structural invariant
//! eagerly and reports the first violation with a dedicated error.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{DataError, Result};

/// A GZSL dataset: per-sample features and labels, per-class attribute
/// vectors, the seen/unseen class partition, and three disjoint row splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    /// n x d feature matrix.
    pub features: Array2<f64>,
    /// Per-row class labels, length n.
    pub labels: Vec<i64>,
    /// c x a attribute matrix; row k describes class `class_ids[k]`.
    pub attributes: Array2<f64>,
    pub class_ids: Vec<i64>,
    pub seen_classes: Vec<i64>,
    pub unseen_classes: Vec<i64>,
    pub train_idx: Vec<usize>,
    pub test_seen_idx: Vec<usize>,
    pub test_unseen_idx: Vec<usize>,
}

/// Parameters for `make_synthetic`.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticSpec {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub attr_dim: usize,
    pub feat_dim: usize,
    pub samples_per_class: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

/// Per-dimension affine normalization fitted on training rows.
#[derive(Debug, Clone)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl DatasetBundle {
    /// Checks every structural invariant; the constructor paths all call
    /// this, so a bundle in hand is always consistent.
    pub fn validate(&self) -> std::result::Result<(), DataError> {
        let n = self.features.nrows();
        if self.labels.len() != n {
            return Err(DataError::ShapeMismatch {
                array: "labels".into(),
                expected: n,
                actual: self.labels.len(),
            });
        }
        if self.class_ids.len() != self.attributes.nrows() {
            return Err(DataError::ShapeMismatch {
                array: "class_ids".into(),
                expected: self.attributes.nrows(),
                actual: self.class_ids.len(),
            });
        }
        let mut attr_rows = HashMap::new();
        for (k, &c) in self.class_ids.iter().enumerate() {
            if attr_rows.insert(c, k).is_some() {
                return Err(DataError::DuplicateClass(c));
            }
        }
        let seen: HashSet<i64> = self.seen_classes.iter().copied().collect();
        let unseen: HashSet<i64> = self.unseen_classes.iter().copied().collect();
        if let Some(&c) = self.seen_classes.iter().find(|c| unseen.contains(c)) {
            return Err(DataError::ClassOverlap(c));
        }
        for &c in self.seen_classes.iter().chain(&self.unseen_classes) {
            if !attr_rows.contains_key(&c) {
                return Err(DataError::LabelWithoutAttribute(c));
            }
        }
        let mut used = HashSet::new();
        let splits: [(&str, &[usize], &HashSet<i64>, &str); 3] = [
            ("train_idx", &self.train_idx, &seen, "seen"),
            ("test_seen_idx", &self.test_seen_idx, &seen, "seen"),
            ("test_unseen_idx", &self.test_unseen_idx, &unseen, "unseen"),
        ];
        for (split, idx, side_set, side) in splits {
            for &i in idx {
                if i >= n {
                    return Err(DataError::IndexOutOfRange {
                        index: i as i64,
                        split: split.into(),
                        len: n,
                    });
                }
                if !used.insert(i) {
                    return Err(DataError::IndexOverlap { index: i });
                }
                let label = self.labels[i];
                if !side_set.contains(&label) {
                    return Err(DataError::SplitLabelViolation {
                        split: split.into(),
                        row: i,
                        label,
                        side: side.into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn feat_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn attr_dim(&self) -> usize {
        self.attributes.ncols()
    }

    /// Attribute row of one class.
    pub fn attribute_row(&self, class_id: i64) -> std::result::Result<Array1<f64>, DataError> {
        let k = self
            .class_ids
            .iter()
            .position(|&c| c == class_id)
            .ok_or(DataError::LabelWithoutAttribute(class_id))?;
        Ok(self.attributes.row(k).to_owned())
    }

    /// Attribute rows stacked in the order of `ids`.
    pub fn attribute_matrix(&self, ids: &[i64]) -> std::result::Result<Array2<f64>, DataError> {
        let mut out = Array2::zeros((ids.len(), self.attr_dim()));
        for (r, &c) in ids.iter().enumerate() {
            out.row_mut(r).assign(&self.attribute_row(c)?);
        }
        Ok(out)
    }

    /// Feature rows gathered by index.
    pub fn features_of(&self, idx: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((idx.len(), self.feat_dim()));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&self.features.row(i));
        }
        out
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<i64> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }

    /// Standardizes every feature dimension in place using statistics from
    /// the training rows only (population variance; tiny deviations are
    /// floored so constant dimensions pass through unscaled).
    pub fn standardize(&mut self) -> Standardizer {
        let d = self.feat_dim();
        let train = self.features_of(&self.train_idx);
        let n = train.nrows().max(1) as f64;
        let mut mean = Array1::zeros(d);
        let mut std = Array1::zeros(d);
        for j in 0..d {
            let col = train.column(j);
            let m = col.sum() / n;
            let var = col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            mean[j] = m;
            std[j] = var.sqrt().max(1e-12);
        }
        for mut row in self.features.rows_mut() {
            for j in 0..d {
                row[j] = (row[j] - mean[j]) / std[j];
            }
        }
        Standardizer { mean, std }
    }
}

const MANIFEST: &str = "manifest.txt";

/// Array files a bundle directory contains, keyed by manifest entry.
const FILE_KEYS: [&str; 9] = [
    "features",
    "labels",
    "attributes",
    "class_ids",
    "seen_classes",
    "unseen_classes",
    "train_idx",
    "test_seen_idx",
    "test_unseen_idx",
];

fn read_manifest(path: &Path) -> std::result::Result<HashMap<String, String>, DataError> {
    let text = fs::read_to_string(path).map_err(|_| DataError::MissingFile(path.to_owned()))?;
    let mut map = HashMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| DataError::BadManifest {
            key: line.to_string(),
        })?;
        let key = key.trim().to_string();
        if map.insert(key.clone(), value.trim().to_string()).is_some() {
            return Err(DataError::BadManifest { key });
        }
    }
    Ok(map)
}

fn manifest_usize(
    map: &HashMap<String, String>,
    key: &str,
) -> std::result::Result<usize, DataError> {
    map.get(key)
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| DataError::BadManifest { key: key.into() })
}

fn read_f32_matrix(
    path: &Path,
    rows: usize,
    cols: usize,
    name: &str,
) -> std::result::Result<Array2<f64>, DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.to_owned()))?;
    let expected = rows * cols;
    if bytes.len() != expected * 4 {
        return Err(DataError::ShapeMismatch {
            array: name.into(),
            expected,
            actual: bytes.len() / 4,
        });
    }
    let mut out = Array2::zeros((rows, cols));
    for (k, v) in out.iter_mut().enumerate() {
        let b: [u8; 4] = bytes[k * 4..k * 4 + 4].try_into().unwrap();
        *v = f32::from_le_bytes(b) as f64;
    }
    Ok(out)
}

fn read_i64_vec(
    path: &Path,
    expected: usize,
    name: &str,
) -> std::result::Result<Vec<i64>, DataError> {
    let bytes = fs::read(path).map_err(|_| DataError::MissingFile(path.to_owned()))?;
    if bytes.len() != expected * 8 {
        return Err(DataError::ShapeMismatch {
            array: name.into(),
            expected,
            actual: bytes.len() / 8,
        });
    }
    Ok((0..expected)
        .map(|k| i64::from_le_bytes(bytes[k * 8..k * 8 + 8].try_into().unwrap()))
        .collect())
}

fn indices_from_i64(
    raw: Vec<i64>,
    split: &str,
    len: usize,
) -> std::result::Result<Vec<usize>, DataError> {
    raw.into_iter()
        .map(|v| {
            if v < 0 || v as usize >= len {
                Err(DataError::IndexOutOfRange {
                    index: v,
                    split: split.into(),
                    len,
                })
            } else {
                Ok(v as usize)
            }
        })
        .collect()
}

/// Loads and validates a bundle directory.
pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    let map = read_manifest(&dir.join(MANIFEST))?;
    for key in ["format", "real_dtype", "int_dtype"] {
        let _ = map
            .get(key)
            .ok_or_else(|| DataError::BadManifest { key: key.into() })?;
    }
    if map["format"] != "1" {
        return Err(DataError::BadManifest {
            key: "format".into(),
        }
        .into());
    }
    if map["real_dtype"] != "f32le" || map["int_dtype"] != "i64le" {
        let key = if map["real_dtype"] != "f32le" {
            "real_dtype"
        } else {
            "int_dtype"
        };
        return Err(DataError::BadManifest { key: key.into() }.into());
    }
    let n = manifest_usize(&map, "n_samples")?;
    let d = manifest_usize(&map, "feat_dim")?;
    let a = manifest_usize(&map, "attr_dim")?;
    let c = manifest_usize(&map, "n_classes")?;
    let counts: HashMap<&str, usize> = [
        ("features", n * d),
        ("labels", n),
        ("attributes", c * a),
        ("class_ids", c),
        ("seen_classes", manifest_usize(&map, "n_seen_classes")?),
        ("unseen_classes", manifest_usize(&map, "n_unseen_classes")?),
        ("train_idx", manifest_usize(&map, "n_train")?),
        ("test_seen_idx", manifest_usize(&map, "n_test_seen")?),
        ("test_unseen_idx", manifest_usize(&map, "n_test_unseen")?),
    ]
    .into();
    let file = |key: &str| -> std::result::Result<std::path::PathBuf, DataError> {
        Ok(dir.join(map.get(key).ok_or_else(|| DataError::BadManifest {
            key: key.into(),
        })?))
    };

    let features = read_f32_matrix(&file("features")?, n, d, "features")?;
    let attributes = read_f32_matrix(&file("attributes")?, c, a, "attributes")?;
    let labels = read_i64_vec(&file("labels")?, counts["labels"], "labels")?;
    let class_ids = read_i64_vec(&file("class_ids")?, counts["class_ids"], "class_ids")?;
    let seen_classes = read_i64_vec(
        &file("seen_classes")?,
        counts["seen_classes"],
        "seen_classes",
    )?;
    let unseen_classes = read_i64_vec(
        &file("unseen_classes")?,
        counts["unseen_classes"],
        "unseen_classes",
    )?;
    let train_idx = indices_from_i64(
        read_i64_vec(&file("train_idx")?, counts["train_idx"], "train_idx")?,
        "train_idx",
        n,
    )?;
    let test_seen_idx = indices_from_i64(
        read_i64_vec(
            &file("test_seen_idx")?,
            counts["test_seen_idx"],
            "test_seen_idx",
        )?,
        "test_seen_idx",
        n,
    )?;
    let test_unseen_idx = indices_from_i64(
        read_i64_vec(
            &file("test_unseen_idx")?,
            counts["test_unseen_idx"],
            "test_unseen_idx",
        )?,
        "test_unseen_idx",
        n,
    )?;

    let bundle = DatasetBundle {
        features,
        labels,
        attributes,
        class_ids,
        seen_classes,
        unseen_classes,
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    };
    bundle.validate()?;
    Ok(bundle)
}

fn write_f32_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(m.len() * 4);
    for &v in m.iter() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_i64_vec(path: &Path, v: &[i64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(v.len() * 8);
    for &x in v {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Writes a validated bundle into `dir` (created if absent). Real values are
/// narrowed to f32 on disk, so save -> load -> save is byte-stable.
pub fn save_bundle(dir: &Path, bundle: &DatasetBundle) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut push = |k: &str, v: String| {
        writeln!(manifest, "{k} = {v}").expect("string write cannot fail");
    };
    push("format", "1".into());
    push("real_dtype", "f32le".into());
    push("int_dtype", "i64le".into());
    push("n_samples", bundle.features.nrows().to_string());
    push("feat_dim", bundle.feat_dim().to_string());
    push("attr_dim", bundle.attr_dim().to_string());
    push("n_classes", bundle.class_ids.len().to_string());
    push("n_seen_classes", bundle.seen_classes.len().to_string());
    push("n_unseen_classes", bundle.unseen_classes.len().to_string());
    push("n_train", bundle.train_idx.len().to_string());
    push("n_test_seen", bundle.test_seen_idx.len().to_string());
    push("n_test_unseen", bundle.test_unseen_idx.len().to_string());
    for key in FILE_KEYS {
        push(key, format!("{key}.bin"));
    }
    fs::write(dir.join(MANIFEST), manifest)?;

    write_f32_matrix(&dir.join("features.bin"), &bundle.features)?;
    write_f32_matrix(&dir.join("attributes.bin"), &bundle.attributes)?;
    write_i64_vec(&dir.join("labels.bin"), &bundle.labels)?;
    write_i64_vec(&dir.join("class_ids.bin"), &bundle.class_ids)?;
    write_i64_vec(&dir.join("seen_classes.bin"), &bundle.seen_classes)?;
    write_i64_vec(&dir.join("unseen_classes.bin"), &bundle.unseen_classes)?;
    let as_i64 = |v: &[usize]| v.iter().map(|&i| i as i64).collect::<Vec<_>>();
    write_i64_vec(&dir.join("train_idx.bin"), &as_i64(&bundle.train_idx))?;
    write_i64_vec(&dir.join("test_seen_idx.bin"), &as_i64(&bundle.test_seen_idx))?;
    write_i64_vec(
        &dir.join("test_unseen_idx.bin"),
        &as_i64(&bundle.test_unseen_idx),
    )?;
    Ok(())
}

/// Generates a deterministic synthetic bundle. Class attributes are uniform
/// on the attribute sphere; sample features are a fixed random affine lift
/// of the class attribute plus isotropic Gaussian noise. Seen classes split
/// 80/20 into train and test rows (rounded so every seen class trains on at
/// least one row); unseen classes contribute test rows only.
pub fn make_synthetic(spec: SyntheticSpec) -> Result<DatasetBundle> {
    if spec.n_seen < 2 || spec.n_unseen < 1 {
        return Err(crate::error::Error::invalid_argument(
            "need at least 2 seen classes and 1 unseen class",
        ));
    }
    if spec.attr_dim < 2 || spec.feat_dim < 1 || spec.samples_per_class < 1 {
        return Err(crate::error::Error::invalid_argument(
            "dimensions and samples per class must be positive (attr_dim at least 2)",
        ));
    }
    if !(spec.noise_scale >= 0.0 && spec.noise_scale.is_finite()) {
        return Err(crate::error::Error::invalid_argument(
            "noise_scale must be finite and nonnegative",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.n_seen + spec.n_unseen;
    let n = c * spec.samples_per_class;

    let mut attributes = Array2::zeros((c, spec.attr_dim));
    for mut row in attributes.rows_mut() {
        loop {
            for v in row.iter_mut() {
                *v = rng.sample::<f64, _>(StandardNormal);
            }
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nrm > 1e-9 {
                row.mapv_inplace(|v| v / nrm);
                break;
            }
        }
    }

    // The lift is shared by all classes; scaling by 1/sqrt(attr_dim) keeps
    // feature magnitudes O(1) regardless of dimensions.
    let scale = 1.0 / (spec.attr_dim as f64).sqrt();
    let lift = Array2::from_shape_fn((spec.attr_dim, spec.feat_dim), |_| {
        rng.sample::<f64, _>(StandardNormal) * scale
    });
    let offset = Array1::from_shape_fn(spec.feat_dim, |_| {
        rng.sample::<f64, _>(StandardNormal) * 0.1
    });

    let class_means = attributes.dot(&lift) + &offset;
    let mut features = Array2::zeros((n, spec.feat_dim));
    let mut labels = Vec::with_capacity(n);
    for k in 0..c {
        for s in 0..spec.samples_per_class {
            let r = k * spec.samples_per_class + s;
            labels.push(k as i64);
            let mut row = features.row_mut(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v = class_means[(k, j)]
                    + spec.noise_scale * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }

    let mut train_idx = Vec::new();
    let mut test_seen_idx = Vec::new();
    let mut test_unseen_idx = Vec::new();
    let per_class_train = ((spec.samples_per_class as f64) * 0.8).ceil() as usize;
    for k in 0..c {
        let base = k * spec.samples_per_class;
        if k < spec.n_seen {
            for s in 0..spec.samples_per_class {
                if s < per_class_train {
                    train_idx.push(base + s);
                } else {
                    test_seen_idx.push(base + s);
                }
            }
        } else {
            test_unseen_idx.extend(base..base + spec.samples_per_class);
        }
    }

    let bundle = DatasetBundle {
        features,
        labels,
        attributes,
        class_ids: (0..c as i64).collect(),
        seen_classes: (0..spec.n_seen as i64).collect(),
        unseen_classes: (spec.n_seen as i64..c as i64).collect(),
        train_idx,
        test_seen_idx,
        test_unseen_idx,
    };
    bundle.validate()?;
    Ok(bundle)
}
