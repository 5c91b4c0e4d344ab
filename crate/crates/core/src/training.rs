//! Loss composition and the optimization loop.
//!
//! The objective couples four terms: feature reconstruction plus a weighted
//! transport alignment of the two posterior families, attribute
//! reconstruction plus the same (shared) transport term, cross-modal
//! reconstruction, and a latent classification loss on seen classes. All
//! gradients are hand-written; finite-difference checks cover every term.
//!
//! Randomness discipline: every latent draw comes from a substream keyed by
//! the batch seed and the datum's content (not its batch position), so loss
//! values are invariant to within-batch shuffling up to float summation
//! order, and finite-difference probes of the parameters never decorrelate
//! the draws.

use std::collections::HashMap;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::data::DatasetBundle;
use crate::error::{Error, Result};
use crate::networks::{
    classify_latent, classify_latent_backward, ModelDims, ModelParams,
};
use crate::sinkhorn;
use crate::vmf;

/// Per-batch loss values, each a mean over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_f_svae: f64,
    pub l_a_svae: f64,
    pub l_cr: f64,
    pub l_cls: f64,
    pub l_overall: f64,
}

/// Raw per-batch terms before loss weights are applied; `emd` appears in
/// both modality losses, computed once.
#[derive(Debug, Clone, Copy)]
pub struct BatchTerms {
    pub mse_f: f64,
    pub mse_a: f64,
    pub emd: f64,
    pub cross: f64,
    /// Mean negative log-likelihood summed over the two modalities; zero
    /// when no labels were supplied.
    pub nll: f64,
    pub emd_pairs_unconverged: usize,
}

const FNV_OFFSET: u64 = 0xcbf29ce484222325;
const FNV_PRIME: u64 = 0x100000001b3;

/// Incremental FNV-1a over 8-byte words; used to key per-datum substreams.
struct ContentHash(u64);

impl ContentHash {
    fn new(master: u64, tag: u64) -> Self {
        let mut h = ContentHash(FNV_OFFSET);
        h.push(master);
        h.push(tag);
        h
    }

    fn push(&mut self, word: u64) {
        for byte in word.to_le_bytes() {
            self.0 ^= byte as u64;
            self.0 = self.0.wrapping_mul(FNV_PRIME);
        }
    }

    fn push_row(&mut self, row: &ArrayView1<f64>) {
        for &v in row.iter() {
            self.push(v.to_bits());
        }
    }

    fn finish(self) -> u64 {
        self.0
    }
}

/// Substream seed for one datum; `tag` separates the draw roles (feature
/// reconstruction, attribute reconstruction, the two transport sides).
fn datum_seed(master: u64, tag: u64, x: &ArrayView1<f64>, a: &ArrayView1<f64>) -> u64 {
    let mut h = ContentHash::new(master, tag);
    h.push_row(x);
    h.push_row(a);
    h.finish()
}

/// Which composite is being differentiated; components with zero weight are
/// skipped entirely in the backward pass, so a zero weight means literally
/// no gradient flow through that term.
#[derive(Clone, Copy)]
struct TermWeights {
    f: f64,
    a: f64,
    cr: f64,
    cls: f64,
}

struct BatchEval {
    terms: BatchTerms,
}

/// Forward pass for all loss terms, optionally accumulating the gradient of
/// `w.f * l_f + w.a * l_a + w.cr * l_cr + w.cls * l_cls` into `grads`.
fn eval_batch(
    model: &ModelParams,
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    dense_labels: Option<&[usize]>,
    cfg: &TrainConfig,
    seed: u64,
    w: TermWeights,
    mut grads: Option<&mut ModelParams>,
) -> Result<BatchEval> {
    let n = x.nrows();
    if n == 0 || a.nrows() != n {
        return Err(Error::invalid_argument(
            "loss batches need matching, nonempty feature and attribute row counts",
        ));
    }
    if let Some(labels) = dense_labels {
        if labels.len() != n {
            return Err(Error::invalid_argument("label count differs from batch size"));
        }
        if let Some(&bad) = labels.iter().find(|&&c| c >= model.dims.n_seen_classes) {
            return Err(Error::invalid_argument(format!(
                "dense label {bad} exceeds the classifier width {}",
                model.dims.n_seen_classes
            )));
        }
    }
    let kappa_max = model.dims.kappa_max;
    let (enc_x, cache_x) = model.enc_f.forward(x, kappa_max)?;
    let (enc_a, cache_a) = model.enc_a.forward(a, kappa_max)?;

    // One reconstruction draw per datum and modality, content-keyed.
    let latent = model.dims.latent_dim;
    let mut z_f = Array2::zeros((n, latent));
    let mut z_a = Array2::zeros((n, latent));
    let mut caches_f = Vec::with_capacity(n);
    let mut caches_a = Vec::with_capacity(n);
    let mut emd_seeds = Vec::with_capacity(n);
    for i in 0..n {
        let (xr, ar) = (x.row(i), a.row(i));
        let mut rng = ChaCha8Rng::seed_from_u64(datum_seed(seed, 0xF0, &xr, &ar));
        let (z, c) = vmf::sample_row_with_cache(
            enc_x.mu.row(i),
            enc_x.kappa[i],
            &mut rng,
            vmf::DEFAULT_PROPOSAL_CAP,
        )?;
        z_f.row_mut(i).assign(&z);
        caches_f.push(c);
        let mut rng = ChaCha8Rng::seed_from_u64(datum_seed(seed, 0xA0, &xr, &ar));
        let (z, c) = vmf::sample_row_with_cache(
            enc_a.mu.row(i),
            enc_a.kappa[i],
            &mut rng,
            vmf::DEFAULT_PROPOSAL_CAP,
        )?;
        z_a.row_mut(i).assign(&z);
        caches_a.push(c);
        emd_seeds.push((
            datum_seed(seed, 0xEF, &xr, &ar),
            datum_seed(seed, 0xEA, &xr, &ar),
        ));
    }

    let inv_n = 1.0 / n as f64;
    let mse = |pred: &Array2<f64>, target: &ArrayView2<f64>| -> f64 {
        pred.iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            * inv_n
    };

    let (recon_x, dcache_fx) = model.dec_f.forward(&z_f.view())?;
    let (recon_a, dcache_aa) = model.dec_a.forward(&z_a.view())?;
    let mse_f = mse(&recon_x, x);
    let mse_a = mse(&recon_a, a);

    // Cross reconstruction reuses the same draws with decoders swapped.
    let (cross_x, dcache_fa) = model.dec_f.forward(&z_a.view())?;
    let (cross_a, dcache_af) = model.dec_a.forward(&z_f.view())?;
    let cross = mse(&cross_x, x) + mse(&cross_a, a);

    let cls_pass = dense_labels.map(|labels| {
        let (logp_f, ccache_f) = classify_latent(&model.cls, &z_f.view()).expect("dims fixed");
        let (logp_a, ccache_a) = classify_latent(&model.cls, &z_a.view()).expect("dims fixed");
        let mut nll = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            nll -= logp_f[(i, y)] + logp_a[(i, y)];
        }
        (nll * inv_n, ccache_f, ccache_a)
    });
    let nll = cls_pass.as_ref().map_or(0.0, |(v, _, _)| *v);

    let emd = sinkhorn::batch_pair_emd_seeded(
        &enc_x.mu.view(),
        &enc_x.kappa,
        &enc_a.mu.view(),
        &enc_a.kappa,
        cfg.samples_per_posterior,
        &cfg.sinkhorn,
        &emd_seeds,
    )?;

    if let Some(grads) = grads.as_deref_mut() {
        let mut dz_f = Array2::zeros((n, latent));
        let mut dz_a = Array2::zeros((n, latent));
        if w.f != 0.0 {
            let dy = (&recon_x - x) * (2.0 * w.f * inv_n);
            dz_f += &model.dec_f.backward(&dcache_fx, &dy.view(), &mut grads.dec_f);
        }
        if w.a != 0.0 {
            let dy = (&recon_a - a) * (2.0 * w.a * inv_n);
            dz_a += &model.dec_a.backward(&dcache_aa, &dy.view(), &mut grads.dec_a);
        }
        if w.cr != 0.0 {
            let dy = (&cross_x - x) * (2.0 * w.cr * inv_n);
            dz_a += &model.dec_f.backward(&dcache_fa, &dy.view(), &mut grads.dec_f);
            let dy = (&cross_a - a) * (2.0 * w.cr * inv_n);
            dz_f += &model.dec_a.backward(&dcache_af, &dy.view(), &mut grads.dec_a);
        }
        if w.cls != 0.0 {
            if let Some((_, ccache_f, ccache_a)) = cls_pass.as_ref() {
                let labels = dense_labels.expect("cls_pass implies labels");
                let mut dlogp = Array2::zeros((n, model.dims.n_seen_classes));
                for (i, &y) in labels.iter().enumerate() {
                    dlogp[(i, y)] = -w.cls * inv_n;
                }
                dz_f += &classify_latent_backward(
                    &model.cls,
                    ccache_f,
                    &dlogp.view(),
                    &mut grads.cls,
                );
                dz_a += &classify_latent_backward(
                    &model.cls,
                    ccache_a,
                    &dlogp.view(),
                    &mut grads.cls,
                );
            }
        }

        // Through the reparameterized draws onto the posterior parameters.
        let mut dmu_f = Array2::zeros((n, latent));
        let mut dkappa_f = Array1::zeros(n);
        let mut dmu_a = Array2::zeros((n, latent));
        let mut dkappa_a = Array1::zeros(n);
        for i in 0..n {
            let (gm, gk) = vmf::sample_row_backward(
                enc_x.mu.row(i),
                enc_x.kappa[i],
                &caches_f[i],
                dz_f.row(i),
            );
            dmu_f.row_mut(i).assign(&gm);
            dkappa_f[i] = gk;
            let (gm, gk) = vmf::sample_row_backward(
                enc_a.mu.row(i),
                enc_a.kappa[i],
                &caches_a[i],
                dz_a.row(i),
            );
            dmu_a.row_mut(i).assign(&gm);
            dkappa_a[i] = gk;
        }
        let ce = w.f * cfg.lambda_f + w.a * cfg.lambda_a;
        if ce != 0.0 {
            dmu_f.scaled_add(ce, &emd.grad_mu_f);
            dkappa_f.scaled_add(ce, &emd.grad_kappa_f);
            dmu_a.scaled_add(ce, &emd.grad_mu_a);
            dkappa_a.scaled_add(ce, &emd.grad_kappa_a);
        }
        model
            .enc_f
            .backward(&cache_x, &dmu_f.view(), &dkappa_f, kappa_max, &mut grads.enc_f);
        model
            .enc_a
            .backward(&cache_a, &dmu_a.view(), &dkappa_a, kappa_max, &mut grads.enc_a);
    }

    Ok(BatchEval {
        terms: BatchTerms {
            mse_f,
            mse_a,
            emd: emd.value,
            cross,
            nll,
            emd_pairs_unconverged: emd.pairs_unconverged,
        },
    })
}

fn breakdown_from_terms(t: &BatchTerms, cfg: &TrainConfig) -> LossBreakdown {
    let l_f_svae = t.mse_f + cfg.lambda_f * t.emd;
    let l_a_svae = t.mse_a + cfg.lambda_a * t.emd;
    let l_cr = t.cross;
    let l_cls = t.nll;
    LossBreakdown {
        l_f_svae,
        l_a_svae,
        l_cr,
        l_cls,
        l_overall: l_f_svae + l_a_svae + cfg.alpha * l_cr + cfg.beta * l_cls,
    }
}

/// Maps raw class labels onto classifier column indices.
pub fn dense_labels(model: &ModelParams, labels: &[i64]) -> Result<Vec<usize>> {
    let index: HashMap<i64, usize> = model
        .seen_class_ids
        .iter()
        .enumerate()
        .map(|(k, &c)| (c, k))
        .collect();
    labels
        .iter()
        .map(|c| {
            index.get(c).copied().ok_or_else(|| {
                Error::invalid_argument(format!("label {c} is not a seen class of this model"))
            })
        })
        .collect()
}

/// All raw loss terms for one batch, forward only.
pub fn batch_terms(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    labels: Option<&[usize]>,
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<BatchTerms> {
    let zero = TermWeights {
        f: 0.0,
        a: 0.0,
        cr: 0.0,
        cls: 0.0,
    };
    Ok(eval_batch(model, x, a, labels, cfg, seed, zero, None)?.terms)
}

/// Feature-side loss: feature reconstruction plus the weighted transport
/// alignment term. Returns the scalar and its parameter gradients.
pub fn loss_f_svae(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, ModelParams)> {
    let w = TermWeights {
        f: 1.0,
        a: 0.0,
        cr: 0.0,
        cls: 0.0,
    };
    let mut grads = model.zeros_like();
    let eval = eval_batch(model, x, a, None, cfg, seed, w, Some(&mut grads))?;
    Ok((eval.terms.mse_f + cfg.lambda_f * eval.terms.emd, grads))
}

/// Attribute-side loss, mirroring `loss_f_svae`; its transport term is the
/// same scalar the feature side uses, computed once.
pub fn loss_a_svae(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, ModelParams)> {
    let w = TermWeights {
        f: 0.0,
        a: 1.0,
        cr: 0.0,
        cls: 0.0,
    };
    let mut grads = model.zeros_like();
    let eval = eval_batch(model, x, a, None, cfg, seed, w, Some(&mut grads))?;
    Ok((eval.terms.mse_a + cfg.lambda_a * eval.terms.emd, grads))
}

/// Cross-modal reconstruction: attribute draws through the feature decoder
/// against x, feature draws through the attribute decoder against a.
pub fn loss_cross_recon(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, ModelParams)> {
    let w = TermWeights {
        f: 0.0,
        a: 0.0,
        cr: 1.0,
        cls: 0.0,
    };
    let mut grads = model.zeros_like();
    let eval = eval_batch(model, x, a, None, cfg, seed, w, Some(&mut grads))?;
    Ok((eval.terms.cross, grads))
}

/// Classification loss: mean NLL of the labels under the latent classifier,
/// on one draw from each modality's posterior.
pub fn loss_cls(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    labels: &[usize],
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(f64, ModelParams)> {
    let w = TermWeights {
        f: 0.0,
        a: 0.0,
        cr: 0.0,
        cls: 1.0,
    };
    let mut grads = model.zeros_like();
    let eval = eval_batch(model, x, a, Some(labels), cfg, seed, w, Some(&mut grads))?;
    Ok((eval.terms.nll, grads))
}

/// The full objective and its gradients; `l_overall` is the minimized
/// quantity.
pub fn overall_loss(
    x: &ArrayView2<f64>,
    a: &ArrayView2<f64>,
    labels: &[usize],
    model: &ModelParams,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(LossBreakdown, ModelParams)> {
    let w = TermWeights {
        f: 1.0,
        a: 1.0,
        cr: cfg.alpha,
        cls: cfg.beta,
    };
    let mut grads = model.zeros_like();
    let eval = eval_batch(model, x, a, Some(labels), cfg, seed, w, Some(&mut grads))?;
    Ok((breakdown_from_terms(&eval.terms, cfg), grads))
}

/// Adam with the conventional moment defaults.
struct Adam {
    m: ModelParams,
    v: ModelParams,
    t: usize,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(model: &ModelParams, lr: f64) -> Self {
        Adam {
            m: model.zeros_like(),
            v: model.zeros_like(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
        let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
        let g_all = grads.tensors();
        let mut p_all = params.tensors_mut();
        let mut m_all = self.m.tensors_mut();
        let mut v_all = self.v.tensors_mut();
        for t in 0..g_all.len() {
            let (g, p) = (g_all[t], &mut p_all[t]);
            let (m, v) = (&mut m_all[t], &mut v_all[t]);
            for k in 0..g.len() {
                m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g[k];
                v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                p[k] -= self.lr * mhat / (vhat.sqrt() + Self::EPS);
            }
        }
    }
}

/// One training-step record handed to the observer.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub losses: LossBreakdown,
}

/// Events the training loop reports as it runs.
pub enum TrainEvent<'a> {
    Step(StepRecord),
    EpochEnd {
        epoch: usize,
        mean: LossBreakdown,
        model: &'a ModelParams,
    },
}

/// Per-epoch mean loss records for the whole run.
#[derive(Debug, Clone, Default)]
pub struct FitReport {
    pub epoch_losses: Vec<LossBreakdown>,
    pub steps: usize,
}

/// Trains on the bundle's training split with the configured optimizer.
pub fn fit(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<(ModelParams, FitReport)> {
    fit_with_observer(bundle, cfg, |_| Ok(()))
}

/// `fit` with a per-step/per-epoch observer (logging, checkpoint cadence).
pub fn fit_with_observer(
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut observer: impl FnMut(TrainEvent) -> Result<()>,
) -> Result<(ModelParams, FitReport)> {
    bundle.validate()?;
    if bundle.train_idx.is_empty() {
        return Err(Error::invalid_state("bundle has no training rows"));
    }
    if cfg.batch_size == 0 || cfg.learning_rate <= 0.0 {
        return Err(Error::invalid_argument(
            "batch_size must be >= 1 and learning_rate positive",
        ));
    }
    let dims = ModelDims {
        feat_dim: bundle.feat_dim(),
        attr_dim: bundle.attr_dim(),
        latent_dim: cfg.latent_dim,
        hidden_dim: cfg.hidden_dim,
        n_seen_classes: bundle.seen_classes.len(),
        kappa_max: cfg.kappa_max,
    };
    let mut model = ModelParams::init(dims, bundle.seen_classes.clone(), cfg.seed)?;

    let x_train = bundle.features_of(&bundle.train_idx);
    let raw_labels = bundle.labels_of(&bundle.train_idx);
    let a_train = bundle.attribute_matrix(&raw_labels)?;
    let labels = dense_labels(&model, &raw_labels)?;
    let n = x_train.nrows();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261696e); // distinct from the init stream
    let mut order: Vec<usize> = (0..n).collect();
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut report = FitReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = LossBreakdown {
            l_f_svae: 0.0,
            l_a_svae: 0.0,
            l_cr: 0.0,
            l_cls: 0.0,
            l_overall: 0.0,
        };
        let mut batches = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let bx = gather(&x_train, chunk);
            let ba = gather(&a_train, chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let batch_seed = rng.next_u64();

            let w = TermWeights {
                f: 1.0,
                a: 1.0,
                cr: cfg.alpha,
                cls: cfg.beta,
            };
            let mut grads = model.zeros_like();
            let eval = eval_batch(
                &model,
                &bx.view(),
                &ba.view(),
                Some(&by),
                cfg,
                batch_seed,
                w,
                Some(&mut grads),
            )?;
            let losses = breakdown_from_terms(&eval.terms, cfg);
            check_finite(&losses, epoch, step)?;
            adam.step(&mut model, &grads);

            epoch_sum.l_f_svae += losses.l_f_svae;
            epoch_sum.l_a_svae += losses.l_a_svae;
            epoch_sum.l_cr += losses.l_cr;
            epoch_sum.l_cls += losses.l_cls;
            epoch_sum.l_overall += losses.l_overall;
            batches += 1;
            report.steps += 1;
            observer(TrainEvent::Step(StepRecord {
                epoch,
                step,
                losses,
            }))?;
        }
        let inv = 1.0 / batches as f64;
        let mean = LossBreakdown {
            l_f_svae: epoch_sum.l_f_svae * inv,
            l_a_svae: epoch_sum.l_a_svae * inv,
            l_cr: epoch_sum.l_cr * inv,
            l_cls: epoch_sum.l_cls * inv,
            l_overall: epoch_sum.l_overall * inv,
        };
        report.epoch_losses.push(mean);
        observer(TrainEvent::EpochEnd {
            epoch,
            mean,
            model: &model,
        })?;
    }
    Ok((model, report))
}

fn gather(src: &Array2<f64>, rows: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), src.ncols()));
    for (r, &i) in rows.iter().enumerate() {
        out.row_mut(r).assign(&src.row(i));
    }
    out
}

fn check_finite(l: &LossBreakdown, epoch: usize, batch: usize) -> Result<()> {
    let components = [
        ("l_f_svae", l.l_f_svae),
        ("l_a_svae", l.l_a_svae),
        ("l_cr", l.l_cr),
        ("l_cls", l.l_cls),
        ("l_overall", l.l_overall),
    ];
    for (component, v) in components {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                component,
                epoch,
                batch,
            });
        }
    }
    Ok(())
}
