//! The two spherical-VAE networks and the latent classifier.
//!
//! Every network is a two-layer perceptron in f64 with hand-written forward
//! and backward passes. The encoder splits after a shared ReLU trunk into a
//! mean-direction head (normalized onto the sphere) and a single-unit
//! concentration head (softplus, clamped). The decoder mirrors the encoder
//! without an output activation. Gradient correctness is enforced by
//! finite-difference checks in the tests and in the training loss suite.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Shape of an encoder: input -> hidden trunk -> (latent direction, kappa).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub latent_dim: usize,
}

/// Shape of a decoder: latent -> hidden -> output, no output activation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DecoderSpec {
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

/// A dense affine layer; `y = x W + b` with `W` stored input-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Linear {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        // Fan-in scaled uniform on both weights and biases.
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut w = Array2::zeros((fan_in, fan_out));
        for x in w.iter_mut() {
            *x = rng.random_range(-bound..bound);
        }
        let mut b = Array1::zeros(fan_out);
        for x in b.iter_mut() {
            *x = rng.random_range(-bound..bound);
        }
        Linear { w, b }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: Array2::zeros((fan_in, fan_out)),
            b: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w);
        y += &self.b;
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input
    /// gradient.
    fn backward(
        &self,
        x: &ArrayView2<f64>,
        dy: &ArrayView2<f64>,
        grad: &mut Linear,
    ) -> Array2<f64> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }
}

fn relu_inplace(x: &mut Array2<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Encoder parameters: shared trunk plus the two heads.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub spec: EncoderSpec,
    pub trunk: Linear,
    pub mu_head: Linear,
    pub kappa_head: Linear,
}

/// Forward artifacts an encoder backward pass needs.
pub struct EncodeCache {
    x: Array2<f64>,
    /// Post-ReLU trunk activations; the ReLU mask is `h > 0`.
    h: Array2<f64>,
    mu_tilde: Array2<f64>,
    norms: Array1<f64>,
    kappa_pre: Array1<f64>,
}

/// Batch of posterior parameters produced by an encoder.
pub struct Encoded {
    /// Unit mean directions, one row per input.
    pub mu: Array2<f64>,
    pub kappa: Array1<f64>,
}

impl EncoderParams {
    pub fn init<R: Rng>(spec: EncoderSpec, rng: &mut R) -> Self {
        EncoderParams {
            spec,
            trunk: Linear::init(spec.input_dim, spec.hidden_dim, rng),
            mu_head: Linear::init(spec.hidden_dim, spec.latent_dim, rng),
            kappa_head: Linear::init(spec.hidden_dim, 1, rng),
        }
    }

    fn zeros(spec: EncoderSpec) -> Self {
        EncoderParams {
            spec,
            trunk: Linear::zeros(spec.input_dim, spec.hidden_dim),
            mu_head: Linear::zeros(spec.hidden_dim, spec.latent_dim),
            kappa_head: Linear::zeros(spec.hidden_dim, 1),
        }
    }

    pub fn forward(&self, x: &ArrayView2<f64>, kappa_max: f64) -> Result<(Encoded, EncodeCache)> {
        if x.ncols() != self.spec.input_dim {
            return Err(Error::invalid_argument(format!(
                "encoder expects {} input columns, got {}",
                self.spec.input_dim,
                x.ncols()
            )));
        }
        let mut h = self.trunk.forward(x);
        relu_inplace(&mut h);
        let mu_tilde = self.mu_head.forward(&h.view());
        let n = x.nrows();
        let mut mu = mu_tilde.clone();
        let mut norms = Array1::zeros(n);
        for (i, mut row) in mu.rows_mut().into_iter().enumerate() {
            let nrm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
            norms[i] = nrm;
            row.mapv_inplace(|v| v / nrm);
        }
        let kappa_pre = self.kappa_head.forward(&h.view()).index_axis_move(Axis(1), 0);
        let kappa = kappa_pre.mapv(|s| softplus(s).min(kappa_max));
        Ok((
            Encoded { mu, kappa },
            EncodeCache {
                x: x.to_owned(),
                h,
                mu_tilde,
                norms,
                kappa_pre,
            },
        ))
    }

    /// Backward from upstream gradients on `(mu, kappa)`; accumulates into
    /// `grad` (same shape as `self`).
    pub fn backward(
        &self,
        cache: &EncodeCache,
        dmu: &ArrayView2<f64>,
        dkappa: &Array1<f64>,
        kappa_max: f64,
        grad: &mut EncoderParams,
    ) {
        let n = cache.x.nrows();
        // Through row normalization: dmu_tilde = (dmu - mu (mu . dmu)) / norm.
        let mut dmu_tilde = dmu.to_owned();
        for i in 0..n {
            let nrm = cache.norms[i];
            let mu_row = cache.mu_tilde.row(i).mapv(|v| v / nrm);
            let dot = mu_row.dot(&dmu.row(i));
            let mut row = dmu_tilde.row_mut(i);
            for k in 0..row.len() {
                row[k] = (row[k] - mu_row[k] * dot) / nrm;
            }
        }
        // Through softplus and the clamp: zero slope once clamped.
        let mut dkpre = Array2::zeros((n, 1));
        for i in 0..n {
            let s = cache.kappa_pre[i];
            if softplus(s) < kappa_max {
                dkpre[(i, 0)] = dkappa[i] * sigmoid(s);
            }
        }
        let mut dh = self
            .mu_head
            .backward(&cache.h.view(), &dmu_tilde.view(), &mut grad.mu_head);
        dh += &self
            .kappa_head
            .backward(&cache.h.view(), &dkpre.view(), &mut grad.kappa_head);
        // ReLU mask.
        ndarray::Zip::from(&mut dh).and(&cache.h).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.trunk
            .backward(&cache.x.view(), &dh.view(), &mut grad.trunk);
    }
}

/// Decoder parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub spec: DecoderSpec,
    pub hidden: Linear,
    pub out: Linear,
}

pub struct DecodeCache {
    z: Array2<f64>,
    h: Array2<f64>,
}

impl DecoderParams {
    pub fn init<R: Rng>(spec: DecoderSpec, rng: &mut R) -> Self {
        DecoderParams {
            spec,
            hidden: Linear::init(spec.latent_dim, spec.hidden_dim, rng),
            out: Linear::init(spec.hidden_dim, spec.output_dim, rng),
        }
    }

    fn zeros(spec: DecoderSpec) -> Self {
        DecoderParams {
            spec,
            hidden: Linear::zeros(spec.latent_dim, spec.hidden_dim),
            out: Linear::zeros(spec.hidden_dim, spec.output_dim),
        }
    }

    pub fn forward(&self, z: &ArrayView2<f64>) -> Result<(Array2<f64>, DecodeCache)> {
        if z.ncols() != self.spec.latent_dim {
            return Err(Error::invalid_argument(format!(
                "decoder expects {} latent columns, got {}",
                self.spec.latent_dim,
                z.ncols()
            )));
        }
        let mut h = self.hidden.forward(z);
        relu_inplace(&mut h);
        let y = self.out.forward(&h.view());
        Ok((
            y,
            DecodeCache {
                z: z.to_owned(),
                h,
            },
        ))
    }

    /// Backward from an upstream gradient on the reconstruction; returns the
    /// gradient on the latent input.
    pub fn backward(
        &self,
        cache: &DecodeCache,
        dy: &ArrayView2<f64>,
        grad: &mut DecoderParams,
    ) -> Array2<f64> {
        let mut dh = self.out.backward(&cache.h.view(), dy, &mut grad.out);
        ndarray::Zip::from(&mut dh).and(&cache.h).for_each(|d, &h| {
            if h <= 0.0 {
                *d = 0.0;
            }
        });
        self.hidden
            .backward(&cache.z.view(), &dh.view(), &mut grad.hidden)
    }
}

pub struct ClassifyCache {
    z: Array2<f64>,
    /// Softmax probabilities, needed for the log-softmax Jacobian.
    probs: Array2<f64>,
}

/// Log-softmax class scores for latent vectors under a linear classifier.
pub fn classify_latent(
    cls: &Linear,
    z: &ArrayView2<f64>,
) -> Result<(Array2<f64>, ClassifyCache)> {
    if z.ncols() != cls.w.nrows() {
        return Err(Error::invalid_argument(format!(
            "classifier expects {} latent columns, got {}",
            cls.w.nrows(),
            z.ncols()
        )));
    }
    let logits = cls.forward(z);
    let mut log_probs = logits;
    let mut probs = Array2::zeros(log_probs.raw_dim());
    for (mut row, mut prow) in log_probs
        .rows_mut()
        .into_iter()
        .zip(probs.rows_mut().into_iter())
    {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
        for (p, &lp) in prow.iter_mut().zip(row.iter()) {
            *p = lp.exp();
        }
    }
    Ok((
        log_probs,
        ClassifyCache {
            z: z.to_owned(),
            probs,
        },
    ))
}

/// Backward of `classify_latent` from a gradient on the log-probabilities;
/// returns the latent gradient.
pub fn classify_latent_backward(
    cls: &Linear,
    cache: &ClassifyCache,
    dlogp: &ArrayView2<f64>,
    grad: &mut Linear,
) -> Array2<f64> {
    let mut dlogits = dlogp.to_owned();
    for (i, mut row) in dlogits.rows_mut().into_iter().enumerate() {
        let s: f64 = row.iter().sum();
        for (k, v) in row.iter_mut().enumerate() {
            *v -= cache.probs[(i, k)] * s;
        }
    }
    cls.backward(&cache.z.view(), &dlogits.view(), grad)
}

/// Dimensions and limits the whole model was built with.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub attr_dim: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    pub n_seen_classes: usize,
    pub kappa_max: f64,
}

/// All trainable parameters: the two encoders, the two decoders, and the
/// latent classifier over seen classes.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    /// Seen class ids in classifier column order.
    pub seen_class_ids: Vec<i64>,
    pub enc_f: EncoderParams,
    pub enc_a: EncoderParams,
    pub dec_f: DecoderParams,
    pub dec_a: DecoderParams,
    pub cls: Linear,
}

impl ModelParams {
    /// Initializes every tensor from a master seed; tensors are filled in a
    /// fixed order (enc_f, enc_a, dec_f, dec_a, cls), so one seed pins every
    /// weight.
    pub fn init(dims: ModelDims, seen_class_ids: Vec<i64>, seed: u64) -> Result<Self> {
        if dims.n_seen_classes != seen_class_ids.len() {
            return Err(Error::invalid_argument(
                "n_seen_classes disagrees with the class id list",
            ));
        }
        if dims.n_seen_classes == 0 {
            return Err(Error::invalid_argument("model needs at least one seen class"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_f = EncoderParams::init(
            EncoderSpec {
                input_dim: dims.feat_dim,
                hidden_dim: dims.hidden_dim,
                latent_dim: dims.latent_dim,
            },
            &mut rng,
        );
        let enc_a = EncoderParams::init(
            EncoderSpec {
                input_dim: dims.attr_dim,
                hidden_dim: dims.hidden_dim,
                latent_dim: dims.latent_dim,
            },
            &mut rng,
        );
        let dec_f = DecoderParams::init(
            DecoderSpec {
                latent_dim: dims.latent_dim,
                hidden_dim: dims.hidden_dim,
                output_dim: dims.feat_dim,
            },
            &mut rng,
        );
        let dec_a = DecoderParams::init(
            DecoderSpec {
                latent_dim: dims.latent_dim,
                hidden_dim: dims.hidden_dim,
                output_dim: dims.attr_dim,
            },
            &mut rng,
        );
        let cls = Linear::init(dims.latent_dim, dims.n_seen_classes, &mut rng);
        Ok(ModelParams {
            dims,
            seen_class_ids,
            enc_f,
            enc_a,
            dec_f,
            dec_a,
            cls,
        })
    }

    /// All tensors zeroed; used for gradient accumulators and as the blank
    /// slate a checkpoint loads into.
    pub fn zeros(dims: ModelDims, seen_class_ids: Vec<i64>) -> Result<Self> {
        if dims.n_seen_classes != seen_class_ids.len() {
            return Err(Error::invalid_argument(
                "n_seen_classes disagrees with the class id list",
            ));
        }
        let enc_spec = |input_dim| EncoderSpec {
            input_dim,
            hidden_dim: dims.hidden_dim,
            latent_dim: dims.latent_dim,
        };
        let dec_spec = |output_dim| DecoderSpec {
            latent_dim: dims.latent_dim,
            hidden_dim: dims.hidden_dim,
            output_dim,
        };
        Ok(ModelParams {
            enc_f: EncoderParams::zeros(enc_spec(dims.feat_dim)),
            enc_a: EncoderParams::zeros(enc_spec(dims.attr_dim)),
            dec_f: DecoderParams::zeros(dec_spec(dims.feat_dim)),
            dec_a: DecoderParams::zeros(dec_spec(dims.attr_dim)),
            cls: Linear::zeros(dims.latent_dim, dims.n_seen_classes),
            dims,
            seen_class_ids,
        })
    }

    /// Same shapes, all zeros; the gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ModelParams::zeros(self.dims.clone(), self.seen_class_ids.clone())
            .expect("shapes of an existing model are consistent")
    }

    /// Flattened views of every parameter tensor in a fixed order; the
    /// optimizer walks two models in lockstep through this.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![
            self.enc_f.trunk.w.as_slice_mut().unwrap(),
            self.enc_f.trunk.b.as_slice_mut().unwrap(),
            self.enc_f.mu_head.w.as_slice_mut().unwrap(),
            self.enc_f.mu_head.b.as_slice_mut().unwrap(),
            self.enc_f.kappa_head.w.as_slice_mut().unwrap(),
            self.enc_f.kappa_head.b.as_slice_mut().unwrap(),
            self.enc_a.trunk.w.as_slice_mut().unwrap(),
            self.enc_a.trunk.b.as_slice_mut().unwrap(),
            self.enc_a.mu_head.w.as_slice_mut().unwrap(),
            self.enc_a.mu_head.b.as_slice_mut().unwrap(),
            self.enc_a.kappa_head.w.as_slice_mut().unwrap(),
            self.enc_a.kappa_head.b.as_slice_mut().unwrap(),
            self.dec_f.hidden.w.as_slice_mut().unwrap(),
            self.dec_f.hidden.b.as_slice_mut().unwrap(),
            self.dec_f.out.w.as_slice_mut().unwrap(),
            self.dec_f.out.b.as_slice_mut().unwrap(),
            self.dec_a.hidden.w.as_slice_mut().unwrap(),
            self.dec_a.hidden.b.as_slice_mut().unwrap(),
            self.dec_a.out.w.as_slice_mut().unwrap(),
            self.dec_a.out.b.as_slice_mut().unwrap(),
            self.cls.w.as_slice_mut().unwrap(),
            self.cls.b.as_slice_mut().unwrap(),
        ]
    }

    /// Immutable counterpart of `tensors_mut`, same order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        vec![
            self.enc_f.trunk.w.as_slice().unwrap(),
            self.enc_f.trunk.b.as_slice().unwrap(),
            self.enc_f.mu_head.w.as_slice().unwrap(),
            self.enc_f.mu_head.b.as_slice().unwrap(),
            self.enc_f.kappa_head.w.as_slice().unwrap(),
            self.enc_f.kappa_head.b.as_slice().unwrap(),
            self.enc_a.trunk.w.as_slice().unwrap(),
            self.enc_a.trunk.b.as_slice().unwrap(),
            self.enc_a.mu_head.w.as_slice().unwrap(),
            self.enc_a.mu_head.b.as_slice().unwrap(),
            self.enc_a.kappa_head.w.as_slice().unwrap(),
            self.enc_a.kappa_head.b.as_slice().unwrap(),
            self.dec_f.hidden.w.as_slice().unwrap(),
            self.dec_f.hidden.b.as_slice().unwrap(),
            self.dec_f.out.w.as_slice().unwrap(),
            self.dec_f.out.b.as_slice().unwrap(),
            self.dec_a.hidden.w.as_slice().unwrap(),
            self.dec_a.hidden.b.as_slice().unwrap(),
            self.dec_a.out.w.as_slice().unwrap(),
            self.dec_a.out.b.as_slice().unwrap(),
            self.cls.w.as_slice().unwrap(),
            self.cls.b.as_slice().unwrap(),
        ]
    }

    pub fn n_params(&self) -> usize {
        let lin = |l: &Linear| l.w.len() + l.b.len();
        let enc = |e: &EncoderParams| lin(&e.trunk) + lin(&e.mu_head) + lin(&e.kappa_head);
        let dec = |d: &DecoderParams| lin(&d.hidden) + lin(&d.out);
        enc(&self.enc_f) + enc(&self.enc_a) + dec(&self.dec_f) + dec(&self.dec_a) + lin(&self.cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn toy_dims() -> ModelDims {
        ModelDims {
            feat_dim: 6,
            attr_dim: 4,
            latent_dim: 3,
            hidden_dim: 5,
            n_seen_classes: 3,
            kappa_max: 5000.0,
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = ModelParams::init(toy_dims(), vec![0, 1, 2], 9).unwrap();
        let b = ModelParams::init(toy_dims(), vec![0, 1, 2], 9).unwrap();
        let c = ModelParams::init(toy_dims(), vec![0, 1, 2], 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.n_params() > 0);
    }

    #[test]
    fn encoder_outputs_unit_directions_and_softplus_kappa() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 4).unwrap();
        let x = Array2::from_shape_fn((7, 6), |(i, j)| ((i * 6 + j) as f64 * 0.37).sin());
        let (enc, _) = model.enc_f.forward(&x.view(), 5000.0).unwrap();
        for row in enc.mu.rows() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
        assert!(enc.kappa.iter().all(|&k| k > 0.0 && k <= 5000.0));
    }

    #[test]
    fn zeroed_kappa_head_gives_log_two() {
        let mut model = ModelParams::init(toy_dims(), vec![0, 1, 2], 4).unwrap();
        model.enc_f.kappa_head.w.fill(0.0);
        model.enc_f.kappa_head.b.fill(0.0);
        let x = Array2::from_shape_fn((3, 6), |(i, j)| (i as f64) - (j as f64) * 0.5);
        let (enc, _) = model.enc_f.forward(&x.view(), 5000.0).unwrap();
        for &k in enc.kappa.iter() {
            assert!((k - std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn kappa_clamps_at_the_maximum() {
        let mut model = ModelParams::init(toy_dims(), vec![0, 1, 2], 4).unwrap();
        model.enc_f.kappa_head.b.fill(1e6);
        let x = Array2::zeros((2, 6));
        let (enc, _) = model.enc_f.forward(&x.view(), 123.0).unwrap();
        assert!(enc.kappa.iter().all(|&k| k == 123.0));
    }

    #[test]
    fn decode_is_row_deterministic() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 2).unwrap();
        let z = array![[0.6, 0.8, 0.0], [0.6, 0.8, 0.0], [0.0, 1.0, 0.0]];
        let (y, _) = model.dec_f.forward(&z.view()).unwrap();
        assert_eq!(y.row(0), y.row(1));
        assert_ne!(y.row(0), y.row(2));
        assert_eq!(y.ncols(), 6);
    }

    #[test]
    fn uniform_classifier_scores_minus_log_n() {
        let dims = toy_dims();
        let cls = Linear::zeros(dims.latent_dim, 3);
        let z = array![[0.0, 0.6, 0.8], [1.0, 0.0, 0.0]];
        let (logp, _) = classify_latent(&cls, &z.view()).unwrap();
        for v in logp.iter() {
            assert!((v - (-(3.0f64).ln())).abs() < 1e-15);
        }
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 2).unwrap();
        let bad = Array2::<f64>::zeros((2, 5));
        assert!(model.enc_f.forward(&bad.view(), 100.0).is_err());
        assert!(model.dec_f.forward(&bad.view()).is_err());
        assert!(classify_latent(&model.cls, &bad.view()).is_err());
    }

    /// Finite-difference harness over one scalar functional of a network.
    fn fd_check(
        mut eval: impl FnMut(&ModelParams) -> f64,
        params: &ModelParams,
        analytic: &ModelParams,
        tol: f64,
    ) {
        let mut p = params.clone();
        let mut a = analytic.clone();
        let h = 1e-6;
        let mut worst = 0.0f64;
        let n_tensors = p.tensors_mut().len();
        for t in 0..n_tensors {
            let len = p.tensors_mut()[t].len();
            for i in 0..len {
                let orig = p.tensors_mut()[t][i];
                p.tensors_mut()[t][i] = orig + h;
                let up = eval(&p);
                p.tensors_mut()[t][i] = orig - h;
                let dn = eval(&p);
                p.tensors_mut()[t][i] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = a.tensors_mut()[t][i];
                let rel = (fd - an).abs() / fd.abs().max(1e-6);
                worst = worst.max(rel);
                assert!(rel < tol, "tensor {t} entry {i}: fd {fd}, analytic {an}");
            }
        }
        assert!(worst < tol);
    }

    #[test]
    fn decoder_gradients_match_finite_differences() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 5).unwrap();
        let z = array![[0.6, 0.8, 0.0], [0.0, 0.28, 0.96], [-1.0, 0.0, 0.0]];
        let target = Array2::from_shape_fn((3, 6), |(i, j)| ((i + 2 * j) as f64 * 0.21).cos());

        let eval = |p: &ModelParams| -> f64 {
            let (y, _) = p.dec_f.forward(&z.view()).unwrap();
            (&y - &target).mapv(|d| d * d).sum() / z.nrows() as f64
        };
        let mut grad = model.zeros_like();
        let (y, cache) = model.dec_f.forward(&z.view()).unwrap();
        let dy = (&y - &target) * (2.0 / z.nrows() as f64);
        model.dec_f.backward(&cache, &dy.view(), &mut grad.dec_f);
        fd_check(eval, &model, &grad, 1e-5);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 6).unwrap();
        let x = Array2::from_shape_fn((4, 6), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin());
        // Scalar functional mixing both heads: sum mu . v + sum log kappa.
        let v = array![0.3, -0.7, 0.5];

        let eval = |p: &ModelParams| -> f64 {
            let (enc, _) = p.enc_f.forward(&x.view(), 5000.0).unwrap();
            enc.mu.dot(&v).sum() + enc.kappa.mapv(f64::ln).sum()
        };
        let mut grad = model.zeros_like();
        let (enc, cache) = model.enc_f.forward(&x.view(), 5000.0).unwrap();
        let dmu = Array2::from_shape_fn(enc.mu.raw_dim(), |(_, j)| v[j]);
        let dkappa = enc.kappa.mapv(|k| 1.0 / k);
        model
            .enc_f
            .backward(&cache, &dmu.view(), &dkappa, 5000.0, &mut grad.enc_f);
        fd_check(eval, &model, &grad, 1e-5);
    }

    #[test]
    fn classifier_gradients_match_finite_differences() {
        let model = ModelParams::init(toy_dims(), vec![0, 1, 2], 7).unwrap();
        let z = array![[0.6, 0.8, 0.0], [0.0, 0.28, 0.96]];
        let labels = [2usize, 0];

        let eval = |p: &ModelParams| -> f64 {
            let (logp, _) = classify_latent(&p.cls, &z.view()).unwrap();
            -labels
                .iter()
                .enumerate()
                .map(|(i, &c)| logp[(i, c)])
                .sum::<f64>()
                / z.nrows() as f64
        };
        let mut grad = model.zeros_like();
        let (_, cache) = classify_latent(&model.cls, &z.view()).unwrap();
        let mut dlogp = Array2::zeros((2, 3));
        for (i, &c) in labels.iter().enumerate() {
            dlogp[(i, c)] = -1.0 / z.nrows() as f64;
        }
        classify_latent_backward(&model.cls, &cache, &dlogp.view(), &mut grad.cls);
        fd_check(eval, &model, &grad, 1e-5);
    }
}
