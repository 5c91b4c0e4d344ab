//! Per-class cosine boundaries for the seen/unseen decision.
//!
//! Each seen class gets a center (the attribute encoder's mean direction for
//! its attribute vector) and a threshold eta chosen so that a fraction gamma
//! of the class's own training similarities lies at or above it. A test
//! feature is declared seen when its best center similarity clears that
//! center's threshold. Inference uses posterior mean directions throughout,
//! never samples, so every decision is deterministic.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::networks::ModelParams;
use crate::vmf::UnitVector;

/// One seen class's center and threshold.
#[derive(Debug, Clone)]
pub struct ClassBoundary {
    pub class_id: i64,
    pub center: UnitVector,
    pub eta: f64,
}

/// All seen-class boundaries, sorted by class id.
#[derive(Debug, Clone)]
pub struct BoundarySet {
    boundaries: Vec<ClassBoundary>,
    gamma: f64,
}

/// Outcome of the seen/unseen decision for one feature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OodDecision {
    /// 1 for seen, 0 for unseen.
    pub label: u8,
    /// Cosine similarity to the nearest seen center.
    pub max_similarity: f64,
    /// `max_similarity - eta` of the nearest class; the ROC sweep score.
    pub margin: f64,
    /// The nearest seen class (lowest id on exact ties).
    pub best_class: i64,
}

impl BoundarySet {
    /// Validates uniqueness, ranges, and sorts by class id.
    pub fn new(mut boundaries: Vec<ClassBoundary>, gamma: f64) -> Result<Self> {
        if boundaries.is_empty() {
            return Err(Error::invalid_state("boundary set has no classes"));
        }
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::invalid_argument(format!(
                "gamma must lie strictly inside (0, 1), got {gamma}"
            )));
        }
        let mut ids = HashSet::new();
        for b in &boundaries {
            if !ids.insert(b.class_id) {
                return Err(Error::invalid_argument(format!(
                    "duplicate boundary for class {}",
                    b.class_id
                )));
            }
            if !(b.eta >= -1.0 && b.eta <= 1.0) {
                return Err(Error::invalid_argument(format!(
                    "eta for class {} is {}, outside [-1, 1]",
                    b.class_id, b.eta
                )));
            }
        }
        boundaries.sort_by_key(|b| b.class_id);
        Ok(BoundarySet { boundaries, gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn boundaries(&self) -> &[ClassBoundary] {
        &self.boundaries
    }

    /// The decision rule on an already-encoded latent direction.
    pub fn decide(&self, z: &ArrayView1<f64>) -> Result<OodDecision> {
        let dim = self.boundaries[0].center.dim();
        if z.len() != dim {
            return Err(Error::invalid_argument(format!(
                "latent has dimension {}, boundaries use {dim}",
                z.len()
            )));
        }
        let mut best: Option<(f64, usize)> = None;
        for (k, b) in self.boundaries.iter().enumerate() {
            let sim = b.center.as_view().dot(z);
            // Strict improvement keeps the lowest class id on exact ties,
            // because the list is sorted by id.
            if best.map_or(true, |(s, _)| sim > s) {
                best = Some((sim, k));
            }
        }
        let (max_similarity, k) = best.expect("constructor rejects empty sets");
        let b = &self.boundaries[k];
        Ok(OodDecision {
            label: u8::from(max_similarity >= b.eta),
            max_similarity,
            margin: max_similarity - b.eta,
            best_class: b.class_id,
        })
    }
}

/// Encodes one attribute row per class and returns the mean directions.
pub fn compute_centers(
    attributes: &ArrayView2<f64>,
    class_ids: &[i64],
    model: &ModelParams,
) -> Result<Vec<(i64, UnitVector)>> {
    if attributes.nrows() != class_ids.len() {
        return Err(Error::invalid_argument(format!(
            "{} attribute rows for {} class ids",
            attributes.nrows(),
            class_ids.len()
        )));
    }
    if class_ids.is_empty() {
        return Err(Error::invalid_argument("no classes to build centers for"));
    }
    let (enc, _) = model.enc_a.forward(attributes, model.dims.kappa_max)?;
    class_ids
        .iter()
        .zip(enc.mu.rows())
        .map(|(&c, row)| Ok((c, UnitVector::new(row.to_owned())?)))
        .collect()
}

/// The ascending order statistic realizing the lower (1 - gamma) quantile.
/// The tiny relative nudge absorbs float error in `(1 - gamma) * n` so that
/// exactly representable cases (0.1 * 10 = 1) land on the intended index.
fn quantile_index(n: usize, gamma: f64) -> usize {
    let target = (1.0 - gamma) * n as f64 + 1e-9 * n as f64;
    (target.floor() as usize).min(n - 1)
}

/// Builds the threshold for every center from that class's own training
/// similarities.
pub fn compute_thresholds(
    train_features: &ArrayView2<f64>,
    train_labels: &[i64],
    centers: &[(i64, UnitVector)],
    gamma: f64,
    model: &ModelParams,
) -> Result<BoundarySet> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::invalid_argument(format!(
            "gamma must lie strictly inside (0, 1), got {gamma}"
        )));
    }
    if train_features.nrows() != train_labels.len() {
        return Err(Error::invalid_argument(
            "feature row count differs from label count",
        ));
    }
    let (enc, _) = model.enc_f.forward(train_features, model.dims.kappa_max)?;
    let mut boundaries = Vec::with_capacity(centers.len());
    for (class_id, center) in centers {
        let mut sims: Vec<f64> = train_labels
            .iter()
            .enumerate()
            .filter(|(_, &y)| y == *class_id)
            .map(|(i, _)| center.as_view().dot(&enc.mu.row(i)))
            .collect();
        if sims.is_empty() {
            return Err(Error::MissingClass {
                class_id: *class_id,
            });
        }
        sims.sort_by(|a, b| a.total_cmp(b));
        let eta = sims[quantile_index(sims.len(), gamma)];
        boundaries.push(ClassBoundary {
            class_id: *class_id,
            center: center.clone(),
            eta,
        });
    }
    BoundarySet::new(boundaries, gamma)
}

/// Centers plus thresholds straight from a bundle's seen classes.
pub fn build_from_bundle(
    bundle: &DatasetBundle,
    model: &ModelParams,
    gamma: f64,
) -> Result<BoundarySet> {
    let attrs = bundle.attribute_matrix(&bundle.seen_classes)?;
    let centers = compute_centers(&attrs.view(), &bundle.seen_classes, model)?;
    let train_x = bundle.features_of(&bundle.train_idx);
    let train_y = bundle.labels_of(&bundle.train_idx);
    compute_thresholds(&train_x.view(), &train_y, &centers, gamma, model)
}

/// Encodes a feature to its mean direction and applies the decision rule.
pub fn classify_ood(
    x: &ArrayView1<f64>,
    set: &BoundarySet,
    model: &ModelParams,
) -> Result<OodDecision> {
    let batch = x
        .to_owned()
        .into_shape_with_order((1, x.len()))
        .expect("1 x d reshape cannot fail");
    Ok(classify_ood_batch(&batch.view(), set, model)?.remove(0))
}

/// Batch variant of `classify_ood`; one encoder pass for all rows.
pub fn classify_ood_batch(
    x: &ArrayView2<f64>,
    set: &BoundarySet,
    model: &ModelParams,
) -> Result<Vec<OodDecision>> {
    let (enc, _) = model.enc_f.forward(x, model.dims.kappa_max)?;
    enc.mu.rows().into_iter().map(|z| set.decide(&z)).collect()
}

/// Writes the set as a text table: a gamma line, then one line per class
/// holding class_id, eta, and the center components. 17 significant digits
/// make the decimal round-trip exact for f64.
pub fn save_boundaries(path: &Path, set: &BoundarySet) -> Result<()> {
    let mut out = String::new();
    writeln!(out, "gamma = {:.16e}", set.gamma).expect("string write cannot fail");
    for b in set.boundaries() {
        write!(out, "{} {:.16e}", b.class_id, b.eta).expect("string write cannot fail");
        for v in b.center.as_view().iter() {
            write!(out, " {v:.16e}").expect("string write cannot fail");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn boundary_parse_err(detail: impl Into<String>) -> Error {
    Error::Parse {
        what: "boundary table".into(),
        detail: detail.into(),
    }
}

/// Reads a table written by `save_boundaries`, revalidating everything.
pub fn load_boundaries(path: &Path) -> Result<BoundarySet> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let gamma_line = lines
        .next()
        .ok_or_else(|| boundary_parse_err("empty file"))?;
    let gamma: f64 = gamma_line
        .strip_prefix("gamma = ")
        .and_then(|v| v.trim().parse().ok())
        .ok_or_else(|| boundary_parse_err(format!("bad gamma line: {gamma_line:?}")))?;
    let mut boundaries = Vec::new();
    let mut dim = None;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let class_id: i64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| boundary_parse_err(format!("line {}: bad class id", lineno + 2)))?;
        let eta: f64 = parts
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| boundary_parse_err(format!("line {}: bad eta", lineno + 2)))?;
        let center: Vec<f64> = parts
            .map(|v| {
                v.parse()
                    .map_err(|_| boundary_parse_err(format!("line {}: bad center", lineno + 2)))
            })
            .collect::<Result<_>>()?;
        if let Some(d) = dim {
            if center.len() != d {
                return Err(boundary_parse_err(format!(
                    "line {}: center has {} components, expected {d}",
                    lineno + 2,
                    center.len()
                )));
            }
        } else {
            dim = Some(center.len());
        }
        boundaries.push(ClassBoundary {
            class_id,
            eta,
            center: UnitVector::new(Array1::from_vec(center))?,
        });
    }
    BoundarySet::new(boundaries, gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::TrainConfig;
    use crate::data::{make_synthetic, SyntheticSpec};
    use crate::networks::ModelDims;
    use ndarray::array;

    fn test_model(feat: usize, attr: usize, latent: usize) -> ModelParams {
        ModelParams::init(
            ModelDims {
                feat_dim: feat,
                attr_dim: attr,
                latent_dim: latent,
                hidden_dim: 6,
                n_seen_classes: 2,
                kappa_max: 500.0,
            },
            vec![0, 1],
            77,
        )
        .unwrap()
    }

    fn unit(v: Vec<f64>) -> UnitVector {
        UnitVector::normalized(Array1::from_vec(v)).unwrap()
    }

    fn manual_set(etas: &[f64]) -> BoundarySet {
        let centers = [
            unit(vec![1.0, 0.0, 0.0]),
            unit(vec![0.0, 1.0, 0.0]),
        ];
        BoundarySet::new(
            etas.iter()
                .zip(centers)
                .enumerate()
                .map(|(k, (&eta, center))| ClassBoundary {
                    class_id: k as i64,
                    center,
                    eta,
                })
                .collect(),
            0.9,
        )
        .unwrap()
    }

    #[test]
    fn centers_are_unit_and_deterministic() {
        let model = test_model(5, 4, 3);
        let attrs = array![[0.5, 0.5, 0.5, 0.5], [1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.5, 0.5]];
        let out = compute_centers(&attrs.view(), &[3, 7, 9], &model).unwrap();
        assert_eq!(out.len(), 3);
        for (_, c) in &out {
            let n: f64 = c.as_view().iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
        // Identical attribute rows map to identical centers.
        assert_eq!(out[0].1.as_view(), out[2].1.as_view());
    }

    #[test]
    fn quantile_matches_the_order_statistics_example() {
        // Similarities 0.1..1.0 with gamma 0.9: eta is 0.2 and exactly 9 of
        // 10 values clear it.
        let sims: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let idx = quantile_index(sims.len(), 0.9);
        assert_eq!(sims[idx], 0.2);
        assert_eq!(sims.iter().filter(|&&s| s >= sims[idx]).count(), 9);
        // gamma near 1 keeps every sample: eta falls to the minimum.
        assert_eq!(sims[quantile_index(sims.len(), 0.999999)], 0.1);
        // A single-sample class uses that sample for any gamma.
        assert_eq!(quantile_index(1, 0.2), 0);
        assert_eq!(quantile_index(1, 0.95), 0);
    }

    #[test]
    fn decision_rule_handles_the_edge_cases() {
        let set = manual_set(&[0.5, 0.5]);
        // Latent exactly on a center: similarity 1 beats any eta <= 1.
        let d = set.decide(&array![1.0, 0.0, 0.0].view()).unwrap();
        assert_eq!(d.label, 1);
        assert_eq!(d.best_class, 0);
        assert!((d.max_similarity - 1.0).abs() < 1e-12);
        // Orthogonal to all centers with positive etas: unseen.
        let d = set.decide(&array![0.0, 0.0, 1.0].view()).unwrap();
        assert_eq!(d.label, 0);
        // Similarity exactly at eta: the comparator is >=, so seen.
        let z = array![0.5, (1.0f64 - 0.25).sqrt(), 0.0];
        let set_tie = manual_set(&[0.9, z[1]]);
        let d = set_tie.decide(&z.view()).unwrap();
        assert_eq!(d.best_class, 1);
        assert_eq!(d.margin, 0.0);
        assert_eq!(d.label, 1);
        // Exact similarity ties resolve to the lowest class id.
        let dz = array![std::f64::consts::FRAC_1_SQRT_2, std::f64::consts::FRAC_1_SQRT_2, 0.0];
        let d = manual_set(&[0.0, 0.0]).decide(&dz.view()).unwrap();
        assert_eq!(d.best_class, 0);
    }

    #[test]
    fn empty_set_is_rejected() {
        assert!(BoundarySet::new(vec![], 0.9).is_err());
    }

    fn synthetic_fixture() -> (DatasetBundle, ModelParams) {
        let bundle = make_synthetic(SyntheticSpec {
            n_seen: 3,
            n_unseen: 2,
            attr_dim: 4,
            feat_dim: 5,
            samples_per_class: 30,
            noise_scale: 0.2,
            seed: 5,
        })
        .unwrap();
        let cfg = TrainConfig::default();
        let model = ModelParams::init(
            ModelDims {
                feat_dim: 5,
                attr_dim: 4,
                latent_dim: 4,
                hidden_dim: 6,
                n_seen_classes: 3,
                kappa_max: cfg.kappa_max,
            },
            bundle.seen_classes.clone(),
            13,
        )
        .unwrap();
        (bundle, model)
    }

    #[test]
    fn coverage_tracks_gamma_within_one_over_n() {
        let (bundle, model) = synthetic_fixture();
        let train_x = bundle.features_of(&bundle.train_idx);
        let train_y = bundle.labels_of(&bundle.train_idx);
        for gamma in [0.8, 0.9, 0.95] {
            let set = build_from_bundle(&bundle, &model, gamma).unwrap();
            let (enc, _) = model.enc_f.forward(&train_x.view(), 500.0).unwrap();
            for b in set.boundaries() {
                let rows: Vec<usize> = (0..train_y.len())
                    .filter(|&i| train_y[i] == b.class_id)
                    .collect();
                let kept = rows
                    .iter()
                    .filter(|&&i| b.center.as_view().dot(&enc.mu.row(i)) >= b.eta)
                    .count();
                let frac = kept as f64 / rows.len() as f64;
                assert!(
                    (frac - gamma).abs() <= 1.0 / rows.len() as f64 + 1e-12,
                    "gamma {gamma}, class {}: coverage {frac}",
                    b.class_id
                );
            }
        }
    }

    #[test]
    fn raising_gamma_never_raises_eta_or_flips_seen_to_unseen() {
        let (bundle, model) = synthetic_fixture();
        let gammas = [0.5, 0.7, 0.8, 0.9, 0.95, 0.99];
        let sets: Vec<BoundarySet> = gammas
            .iter()
            .map(|&g| build_from_bundle(&bundle, &model, g).unwrap())
            .collect();
        for w in sets.windows(2) {
            for (lo, hi) in w[0].boundaries().iter().zip(w[1].boundaries()) {
                assert_eq!(lo.class_id, hi.class_id);
                assert!(hi.eta <= lo.eta + 1e-15);
            }
        }
        let test_x = bundle.features_of(&bundle.test_unseen_idx);
        let mut prev: Option<Vec<u8>> = None;
        for set in &sets {
            let labels: Vec<u8> = classify_ood_batch(&test_x.view(), set, &model)
                .unwrap()
                .iter()
                .map(|d| d.label)
                .collect();
            if let Some(prev) = &prev {
                for (a, b) in prev.iter().zip(&labels) {
                    assert!(b >= a, "raising gamma flipped a seen decision to unseen");
                }
            }
            prev = Some(labels);
        }
    }

    #[test]
    fn missing_training_class_is_reported() {
        let (bundle, model) = synthetic_fixture();
        let attrs = bundle.attribute_matrix(&bundle.seen_classes).unwrap();
        let mut ids = bundle.seen_classes.clone();
        ids[0] = 999; // a class with no training rows
        let centers = compute_centers(&attrs.view(), &ids, &model).unwrap();
        let train_x = bundle.features_of(&bundle.train_idx);
        let train_y = bundle.labels_of(&bundle.train_idx);
        let err = compute_thresholds(&train_x.view(), &train_y, &centers, 0.9, &model)
            .unwrap_err();
        assert!(matches!(err, Error::MissingClass { class_id: 999 }));
    }

    #[test]
    fn same_latent_means_same_decision() {
        let (bundle, model) = synthetic_fixture();
        let set = build_from_bundle(&bundle, &model, 0.9).unwrap();
        let x = bundle.features.row(0).to_owned();
        let d1 = classify_ood(&x.view(), &set, &model).unwrap();
        let d2 = classify_ood(&x.view(), &set, &model).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn boundary_table_round_trips_exactly() {
        let (bundle, model) = synthetic_fixture();
        let set = build_from_bundle(&bundle, &model, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("boundaries.txt");
        save_boundaries(&path, &set).unwrap();
        let loaded = load_boundaries(&path).unwrap();
        assert_eq!(loaded.gamma().to_bits(), set.gamma().to_bits());
        for (a, b) in set.boundaries().iter().zip(loaded.boundaries()) {
            assert_eq!(a.class_id, b.class_id);
            assert_eq!(a.eta.to_bits(), b.eta.to_bits());
            for (u, v) in a.center.as_view().iter().zip(b.center.as_view()) {
                assert_eq!(u.to_bits(), v.to_bits());
            }
        }
    }
}
