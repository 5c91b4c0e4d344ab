//! The gated classifier: a seen expert behind the boundary gate, and a
//! pluggable unseen expert.
//!
//! The gate is hard. Whichever side the boundary decision picks is the only
//! expert that runs; the other is never consulted. The seen expert is the
//! feature encoder followed by the latent classifier. Unseen experts either
//! come from a baseline built on attribute centers or from a prediction file
//! produced by an external model.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use ndarray::{ArrayView1, ArrayView2};

use crate::boundary::BoundarySet;
use crate::error::{Error, Result};
use crate::networks::{classify_latent, ModelParams};
use crate::vmf::UnitVector;

/// Which expert produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Route {
    Seen,
    Unseen,
}

/// One routed prediction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GzslPrediction {
    pub class_id: i64,
    pub route: Route,
    /// The gate margin (best similarity minus that class's threshold).
    pub gate_score: f64,
}

/// A classifier over unseen classes only. `latent` is the feature encoder's
/// mean direction for `feature`; implementations may use either, or only the
/// row index. Implementations must return class ids from the unseen set.
pub trait UnseenExpert {
    fn predict(
        &self,
        test_index: usize,
        feature: &ArrayView1<f64>,
        latent: &ArrayView1<f64>,
    ) -> Result<i64>;
}

/// Baseline unseen expert: nearest attribute-encoder center by cosine
/// similarity, ties to the lowest class id.
pub struct NearestCenterExpert {
    centers: Vec<(i64, UnitVector)>,
}

impl NearestCenterExpert {
    /// Builds centers by encoding one attribute row per unseen class.
    pub fn from_attributes(
        attributes: &ArrayView2<f64>,
        class_ids: &[i64],
        model: &ModelParams,
    ) -> Result<Self> {
        let centers = crate::boundary::compute_centers(attributes, class_ids, model)?;
        Self::from_centers(centers)
    }

    pub fn from_centers(mut centers: Vec<(i64, UnitVector)>) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid_argument(
                "nearest-center expert needs at least one class",
            ));
        }
        centers.sort_by_key(|(c, _)| *c);
        Ok(NearestCenterExpert { centers })
    }
}

impl UnseenExpert for NearestCenterExpert {
    fn predict(
        &self,
        _test_index: usize,
        _feature: &ArrayView1<f64>,
        latent: &ArrayView1<f64>,
    ) -> Result<i64> {
        let mut best: Option<(f64, i64)> = None;
        for (c, center) in &self.centers {
            let sim = center.as_view().dot(latent);
            // Strict improvement over a sorted list keeps the lowest id on
            // ties.
            if best.map_or(true, |(s, _)| sim > s) {
                best = Some((sim, *c));
            }
        }
        Ok(best.expect("constructor rejects empty center lists").1)
    }
}

/// Unseen expert backed by an external prediction file: one line per test
/// row, `test_index, class_id`.
#[derive(Debug)]
pub struct FilePredictions {
    by_index: HashMap<usize, i64>,
}

impl FilePredictions {
    /// Parses and validates a prediction file: every line must parse, every
    /// class must be unseen, no index may repeat, and every required test
    /// index must be covered.
    pub fn load(path: &Path, required: &[usize], unseen_classes: &[i64]) -> Result<Self> {
        let parse_err = |lineno: usize, detail: &str| Error::Parse {
            what: format!("prediction file {}", path.display()),
            detail: format!("line {lineno}: {detail}"),
        };
        let unseen: HashSet<i64> = unseen_classes.iter().copied().collect();
        let text = fs::read_to_string(path)?;
        let mut by_index = HashMap::new();
        for (k, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (idx, class) = line
                .split_once(',')
                .ok_or_else(|| parse_err(k + 1, "expected `test_index, class_id`"))?;
            let idx: usize = idx
                .trim()
                .parse()
                .map_err(|_| parse_err(k + 1, "bad test index"))?;
            let class: i64 = class
                .trim()
                .parse()
                .map_err(|_| parse_err(k + 1, "bad class id"))?;
            if !unseen.contains(&class) {
                return Err(Error::invalid_argument(format!(
                    "prediction file assigns class {class} to test index {idx}, but {class} is not an unseen class"
                )));
            }
            if by_index.insert(idx, class).is_some() {
                return Err(parse_err(k + 1, "duplicate test index"));
            }
        }
        let missing: Vec<usize> = required
            .iter()
            .copied()
            .filter(|i| !by_index.contains_key(i))
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingPredictions { indices: missing });
        }
        Ok(FilePredictions { by_index })
    }
}

impl UnseenExpert for FilePredictions {
    fn predict(
        &self,
        test_index: usize,
        _feature: &ArrayView1<f64>,
        _latent: &ArrayView1<f64>,
    ) -> Result<i64> {
        self.by_index
            .get(&test_index)
            .copied()
            .ok_or(Error::MissingPredictions {
                indices: vec![test_index],
            })
    }
}

/// Seen-expert prediction for a batch of features: encode to the mean
/// direction, then take the classifier argmax (first maximum wins, and the
/// class list is sorted, so ties fall to the lowest id).
pub fn seen_expert_predict_batch(
    features: &ArrayView2<f64>,
    model: &ModelParams,
) -> Result<Vec<i64>> {
    let (enc, _) = model.enc_f.forward(features, model.dims.kappa_max)?;
    let (logp, _) = classify_latent(&model.cls, &enc.mu.view())?;
    Ok(logp
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0usize;
            for (k, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = k;
                }
            }
            model.seen_class_ids[best]
        })
        .collect())
}

pub fn seen_expert_predict(x: &ArrayView1<f64>, model: &ModelParams) -> Result<i64> {
    let batch = x
        .to_owned()
        .into_shape_with_order((1, x.len()))
        .expect("1 x d reshape cannot fail");
    Ok(seen_expert_predict_batch(&batch.view(), model)?.remove(0))
}

/// Routes every row through the gate and exactly one expert.
///
/// `test_indices[i]` is the dataset row index of `features` row `i`; it is
/// what file-based experts key on.
pub fn gzsl_predict_batch(
    features: &ArrayView2<f64>,
    test_indices: &[usize],
    set: &BoundarySet,
    model: &ModelParams,
    expert: &dyn UnseenExpert,
) -> Result<Vec<GzslPrediction>> {
    if features.nrows() != test_indices.len() {
        return Err(Error::invalid_argument(
            "one test index is needed per feature row",
        ));
    }
    let (enc, _) = model.enc_f.forward(features, model.dims.kappa_max)?;
    let mut out = Vec::with_capacity(test_indices.len());
    for (row, &test_index) in test_indices.iter().enumerate() {
        let latent = enc.mu.row(row);
        let decision = set.decide(&latent)?;
        let prediction = if decision.label == 1 {
            // The latent is already the seen expert's input; classify it
            // directly rather than re-encoding.
            let (logp, _) = classify_latent(&model.cls, &latent.insert_axis(ndarray::Axis(0)))?;
            let row0 = logp.row(0);
            let mut best = 0usize;
            for (k, v) in row0.iter().enumerate() {
                if *v > row0[best] {
                    best = k;
                }
            }
            GzslPrediction {
                class_id: model.seen_class_ids[best],
                route: Route::Seen,
                gate_score: decision.margin,
            }
        } else {
            GzslPrediction {
                class_id: expert.predict(test_index, &features.row(row), &latent)?,
                route: Route::Unseen,
                gate_score: decision.margin,
            }
        };
        out.push(prediction);
    }
    Ok(out)
}

pub fn gzsl_predict(
    x: &ArrayView1<f64>,
    test_index: usize,
    set: &BoundarySet,
    model: &ModelParams,
    expert: &dyn UnseenExpert,
) -> Result<GzslPrediction> {
    let batch = x
        .to_owned()
        .into_shape_with_order((1, x.len()))
        .expect("1 x d reshape cannot fail");
    Ok(gzsl_predict_batch(&batch.view(), &[test_index], set, model, expert)?.remove(0))
}
