//! von Mises-Fisher distributions on the unit hypersphere.
//!
//! The density on the sphere embedded in `R^m` is
//!
//! ```text
//! q(z | mu, kappa) = C_m(kappa) * exp(kappa * mu^T z)
//! C_m(kappa)       = kappa^(m/2 - 1) / ((2 pi)^(m/2) * I_(m/2-1)(kappa))
//! ```
//!
//! where `I_v` is the modified Bessel function of the first kind. All Bessel
//! work happens in log space so that large concentrations (`kappa` up to 1e4
//! at `m` up to 1024) never overflow. Sampling follows the classic envelope
//! rejection scheme on the cosine `w = mu^T z` with a Householder reflection
//! carrying the north pole onto `mu`; the accepted transformation is kept
//! differentiable with respect to both `mu` and `kappa`.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Default cap on rejection proposals per accepted draw.
pub const DEFAULT_PROPOSAL_CAP: usize = 1000;

const NORM_TOL: f64 = 1e-6;

/// A vector validated (and snapped) to unit Euclidean norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Array1<f64>);

impl UnitVector {
    /// Accepts a vector whose norm is within `1e-6` of one and rescales it to
    /// machine-precision unit norm.
    pub fn new(v: Array1<f64>) -> Result<Self> {
        if v.len() < 2 {
            return Err(Error::invalid_argument(format!(
                "unit vector needs dimension >= 2, got {}",
                v.len()
            )));
        }
        let n = norm(&v.view());
        if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
            return Err(Error::invalid_argument(format!(
                "vector norm {n} is not within {NORM_TOL} of 1"
            )));
        }
        Ok(UnitVector(v / n))
    }

    /// Normalizes an arbitrary nonzero vector onto the sphere.
    pub fn normalized(v: Array1<f64>) -> Result<Self> {
        let n = norm(&v.view());
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::invalid_argument(
                "cannot normalize a (near-)zero vector onto the sphere".to_string(),
            ));
        }
        Ok(UnitVector(v / n))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn into_inner(self) -> Array1<f64> {
        self.0
    }
}

/// Parameters of one vMF distribution.
#[derive(Debug, Clone)]
pub struct VmfParams {
    pub mu: UnitVector,
    pub kappa: f64,
}

impl VmfParams {
    pub fn new(mu: UnitVector, kappa: f64) -> Result<Self> {
        if !kappa.is_finite() || kappa < 0.0 {
            return Err(Error::invalid_argument(format!(
                "kappa must be finite and >= 0, got {kappa}"
            )));
        }
        Ok(VmfParams { mu, kappa })
    }

    pub fn dim(&self) -> usize {
        self.mu.dim()
    }
}

/// A batch of unit-norm latent vectors, one per row.
#[derive(Debug, Clone)]
pub struct LatentBatch(Array2<f64>);

impl LatentBatch {
    /// Validates every row to unit norm within `1e-9`.
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        for (i, row) in rows.rows().into_iter().enumerate() {
            let n = norm(&row);
            if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
                return Err(Error::invalid_argument(format!(
                    "latent row {i} has norm {n}, expected 1 within 1e-9"
                )));
            }
        }
        Ok(LatentBatch(rows))
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }
}

pub(crate) fn norm(v: &ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Log surface area of the unit sphere in `R^m`: `log(2 pi^(m/2) / Gamma(m/2))`.
pub fn log_hypersphere_area(m: usize) -> f64 {
    let h = m as f64 / 2.0;
    std::f64::consts::LN_2 + h * std::f64::consts::PI.ln() - libm::lgamma(h)
}

/// `log I_v(x)` for `v >= 0`, `x >= 0`, evaluated in log space.
///
/// Power series with all-positive terms,
///
/// ```text
/// I_v(x) = sum_j (x/2)^(v+2j) / (j! * Gamma(v+j+1)),
/// ```
///
/// accumulated against a running maximum so no intermediate ever leaves f64
/// range. Term count grows roughly like `x/2`, which stays cheap for the
/// concentrations this crate works at.
pub fn log_bessel_i(v: f64, x: f64) -> f64 {
    assert!(v >= 0.0 && x >= 0.0, "log_bessel_i needs v >= 0, x >= 0");
    if x == 0.0 {
        return if v == 0.0 { 0.0 } else { f64::NEG_INFINITY };
    }
    let lh = (x / 2.0).ln();
    // log of the j-th term, maintained by recurrence.
    let mut t = v * lh - libm::lgamma(v + 1.0);
    let mut max = t;
    let mut sum = 1.0;
    let mut j = 0usize;
    loop {
        j += 1;
        t += 2.0 * lh - (j as f64).ln() - (v + j as f64).ln();
        if t > max {
            sum = sum * (max - t).exp() + 1.0;
            max = t;
        } else {
            let e = (t - max).exp();
            sum += e;
            // Terms decay geometrically once past the series peak near x/2.
            if e < 1e-19 * sum && (j as f64) > x / 2.0 {
                break;
            }
        }
        debug_assert!(j < 10_000_000, "bessel series failed to terminate");
    }
    max + sum.ln()
}

/// Ratio `I_(v+1)(x) / I_v(x)` by the Gauss continued fraction with modified
/// Lentz evaluation. This is the stable route for the mean resultant length;
/// forming the two Bessel values separately and dividing would waste the
/// shared exponential scale.
fn bessel_i_ratio(v: f64, x: f64) -> f64 {
    debug_assert!(x > 0.0);
    let tiny = 1e-300;
    let mut f: f64 = tiny;
    let mut c: f64 = f;
    let mut d: f64 = 0.0;
    for k in 1..=2_000_000usize {
        let b = 2.0 * (v + k as f64) / x;
        d = b + d;
        if d == 0.0 {
            d = tiny;
        }
        c = b + 1.0 / c;
        if c == 0.0 {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            return f;
        }
    }
    // The fraction converges for every x > 0; reaching this means the cap is
    // far too small for the argument scale.
    panic!("bessel ratio continued fraction did not converge (v={v}, x={x})");
}

fn validate_dim_kappa(m: usize, kappa: f64) -> Result<()> {
    if m < 2 {
        return Err(Error::invalid_argument(format!(
            "sphere dimension m must be >= 2, got {m}"
        )));
    }
    if !kappa.is_finite() || kappa < 0.0 {
        return Err(Error::invalid_argument(format!(
            "kappa must be finite and >= 0, got {kappa}"
        )));
    }
    Ok(())
}

/// `log C_m(kappa)`, the log normalizing constant of the vMF density.
///
/// At `kappa = 0` this is the uniform density, `-log area(S^(m-1))`.
pub fn log_norm_const(m: usize, kappa: f64) -> Result<f64> {
    validate_dim_kappa(m, kappa)?;
    if kappa == 0.0 {
        return Ok(-log_hypersphere_area(m));
    }
    let half = m as f64 / 2.0;
    let v = half - 1.0;
    Ok(v * kappa.ln() - half * (2.0 * std::f64::consts::PI).ln() - log_bessel_i(v, kappa))
}

/// Log density of `z` under `vMF(mu, kappa)`.
pub fn log_pdf(params: &VmfParams, z: &UnitVector) -> Result<f64> {
    if z.dim() != params.dim() {
        return Err(Error::invalid_argument(format!(
            "dimension mismatch: params are {}-dimensional, z is {}-dimensional",
            params.dim(),
            z.dim()
        )));
    }
    let dot = params.mu.as_view().dot(&z.as_view());
    Ok(log_norm_const(params.dim(), params.kappa)? + params.kappa * dot)
}

/// Mean resultant length `A_m(kappa) = I_(m/2)(kappa) / I_(m/2-1)(kappa)`,
/// the expected cosine between a draw and the mean direction.
pub fn mean_resultant_ratio(m: usize, kappa: f64) -> Result<f64> {
    validate_dim_kappa(m, kappa)?;
    if kappa == 0.0 {
        return Ok(0.0);
    }
    Ok(bessel_i_ratio(m as f64 / 2.0 - 1.0, kappa))
}

/// KL divergence from `vMF(mu, kappa)` to the uniform distribution on the
/// sphere: `kappa * A_m(kappa) + log C_m(kappa) + log area(S^(m-1))`.
/// Exactly zero at `kappa = 0`.
pub fn kl_to_uniform(params: &VmfParams) -> Result<f64> {
    let m = params.dim();
    if params.kappa == 0.0 {
        return Ok(0.0);
    }
    Ok(params.kappa * mean_resultant_ratio(m, params.kappa)?
        + log_norm_const(m, params.kappa)?
        + log_hypersphere_area(m))
}

/// Cached quantities from one accepted draw, enough to replay the pathwise
/// derivative of the transformation that produced it.
#[derive(Debug, Clone)]
pub struct DrawCache {
    /// Cosine of the draw against the mean direction.
    pub w: f64,
    /// The accepted envelope variate.
    eps: f64,
    /// Envelope parameter `b(kappa)`.
    b: f64,
    /// Tangent direction on the equator of the north pole frame.
    v: Array1<f64>,
    /// Householder unit vector mapping the pole to `mu`; `None` when `mu`
    /// already is the pole.
    hh_u: Option<Array1<f64>>,
}

fn envelope_b(m: usize, kappa: f64) -> f64 {
    let d = (m - 1) as f64;
    // Algebraically (-2k + sqrt(4k^2 + d^2)) / d, rearranged to avoid
    // cancellation at large kappa.
    d / (2.0 * kappa + (4.0 * kappa * kappa + d * d).sqrt())
}

/// One draw from `vMF(mu, kappa)` using `rng`, with its pathwise cache.
///
/// The tangent direction is drawn before the rejection loop so that a flipped
/// accept/reject decision under a perturbed `kappa` disturbs only the cosine
/// of this particular draw.
pub fn sample_row_with_cache<R: Rng>(
    mu: ArrayView1<f64>,
    kappa: f64,
    rng: &mut R,
    cap: usize,
) -> Result<(Array1<f64>, DrawCache)> {
    let m = mu.len();
    validate_dim_kappa(m, kappa)?;
    let d = (m - 1) as f64;

    let mut v = Array1::zeros(m - 1);
    loop {
        for x in v.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal);
        }
        let n = norm(&v.view());
        if n > 1e-12 {
            v /= n;
            break;
        }
    }

    let b = envelope_b(m, kappa);
    let x0 = (1.0 - b) / (1.0 + b);
    let c = kappa * x0 + d * (1.0 - x0 * x0).ln();
    let beta = Beta::new(d / 2.0, d / 2.0)
        .map_err(|e| Error::invalid_argument(format!("envelope Beta({}, {}): {e}", d / 2.0, d / 2.0)))?;

    let mut accepted: Option<(f64, f64)> = None;
    for _ in 0..cap {
        let eps: f64 = beta.sample(rng);
        let w = (1.0 - (1.0 + b) * eps) / (1.0 - (1.0 - b) * eps);
        let u: f64 = rng.random();
        if kappa * w + d * (1.0 - x0 * w).ln() - c >= u.ln() {
            accepted = Some((w, eps));
            break;
        }
    }
    let (w, eps) = accepted.ok_or(Error::SamplingFailure { kappa, cap })?;

    // Assemble in the north pole frame, then reflect the pole onto mu.
    let r = (1.0 - w * w).max(0.0).sqrt();
    let mut z = Array1::zeros(m);
    z[0] = w;
    for k in 1..m {
        z[k] = r * v[k - 1];
    }
    let mut t = -&mu;
    t[0] += 1.0;
    let tn = norm(&t.view());
    let hh_u = if tn < 1e-12 {
        None
    } else {
        let u = t / tn;
        let proj = 2.0 * u.dot(&z);
        z.zip_mut_with(&u, |zi, ui| *zi -= proj * ui);
        Some(u)
    };
    let zn = norm(&z.view());
    z /= zn;
    Ok((
        z,
        DrawCache {
            w,
            eps,
            b,
            v,
            hh_u,
        },
    ))
}

/// Pathwise gradient of one cached draw: maps an upstream gradient on `z`
/// back to gradients on `mu` and `kappa`, holding the accepted variates
/// fixed.
pub fn sample_row_backward(
    mu: ArrayView1<f64>,
    kappa: f64,
    cache: &DrawCache,
    grad_z: ArrayView1<f64>,
) -> (Array1<f64>, f64) {
    let m = mu.len();
    let d = (m - 1) as f64;
    let w = cache.w;
    let r = (1.0 - w * w).max(1e-300).sqrt();

    // Rebuild the pole-frame vector z' = (w, r*v).
    let mut zp = Array1::zeros(m);
    zp[0] = w;
    for k in 1..m {
        zp[k] = r * cache.v[k - 1];
    }

    // Pull the upstream gradient through the Householder reflection
    // z = z' - 2 u (u . z'); the reflection is its own transpose.
    let (grad_zp, grad_mu) = match &cache.hh_u {
        None => (grad_z.to_owned(), Array1::zeros(m)),
        Some(u) => {
            let gz = grad_z;
            let u_dot_g = u.dot(&gz);
            let u_dot_zp = u.dot(&zp);
            let mut gzp = gz.to_owned();
            gzp.zip_mut_with(u, |g, ui| *g -= 2.0 * u_dot_g * ui);
            // d z_k / d u_p = -2 delta_kp (u.z') - 2 u_k z'_p
            let mut gu = Array1::zeros(m);
            for p in 0..m {
                gu[p] = -2.0 * gz[p] * u_dot_zp - 2.0 * u_dot_g * zp[p];
            }
            // u = t / |t| with t = e1 - mu, so d u = (I - u u^T) dt / |t|
            // and dt = -dmu.
            let mut t = -&mu;
            t[0] += 1.0;
            let tn = norm(&t.view());
            let u_dot_gu = u.dot(&gu);
            let mut gmu = Array1::zeros(m);
            for p in 0..m {
                gmu[p] = -(gu[p] - u[p] * u_dot_gu) / tn;
            }
            (gzp, gmu)
        }
    };

    // Cosine path: z' = (w, sqrt(1-w^2) v), so dz'/dw = (1, -w/r * v).
    let mut gw = grad_zp[0];
    let mut tang = 0.0;
    for k in 1..m {
        tang += grad_zp[k] * cache.v[k - 1];
    }
    gw += tang * (-w / r);

    // w = (1 - (1+b)eps) / (1 - (1-b)eps) with the accepted eps held fixed.
    let eps = cache.eps;
    let b = cache.b;
    let denom = 1.0 - (1.0 - b) * eps;
    let dw_db = -2.0 * eps * (1.0 - eps) / (denom * denom);
    let s = (4.0 * kappa * kappa + d * d).sqrt();
    let db_dk = -d * (2.0 + 4.0 * kappa / s) / ((2.0 * kappa + s) * (2.0 * kappa + s));
    let grad_kappa = gw * dw_db * db_dk;

    (grad_mu, grad_kappa)
}

/// Draws `n` samples from one vMF distribution.
///
/// Each draw runs on its own substream seeded from `rng`, so the draws are
/// independent of how many proposals their siblings consumed.
pub fn sample<R: Rng>(params: &VmfParams, n: usize, rng: &mut R) -> Result<LatentBatch> {
    sample_capped(params, n, rng, DEFAULT_PROPOSAL_CAP)
}

/// `sample` with an explicit rejection proposal cap.
pub fn sample_capped<R: Rng>(
    params: &VmfParams,
    n: usize,
    rng: &mut R,
    cap: usize,
) -> Result<LatentBatch> {
    let m = params.dim();
    let seeds: Vec<u64> = (0..n).map(|_| rng.next_u64()).collect();
    let mut out = Array2::zeros((n, m));
    for (i, seed) in seeds.iter().enumerate() {
        let mut sub = ChaCha8Rng::seed_from_u64(*seed);
        let (z, _) = sample_row_with_cache(params.mu.as_view(), params.kappa, &mut sub, cap)?;
        out.row_mut(i).assign(&z);
    }
    LatentBatch::new(out)
}
