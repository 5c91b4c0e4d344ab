//! Run configuration shared by training, evaluation, and the CLI.

use serde::{Deserialize, Serialize};

/// Settings for the entropic transport solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// Entropic regularization strength.
    pub epsilon: f64,
    /// Iteration budget at the target epsilon.
    pub max_iters: usize,
    /// Convergence threshold on the worst marginal violation.
    pub convergence_tol: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.05,
            max_iters: 200,
            convergence_tol: 1e-6,
        }
    }
}

/// Hyperparameters for joint training of the two spherical VAEs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Weight of the transport term inside the visual-stream loss.
    pub lambda_f: f64,
    /// Weight of the transport term inside the attribute-stream loss.
    pub lambda_a: f64,
    /// Weight of the cross-reconstruction loss.
    pub alpha: f64,
    /// Weight of the latent classification loss.
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Draws per posterior when building the per-pair transport clouds.
    pub samples_per_posterior: usize,
    /// Upper clamp on encoder concentration outputs.
    pub kappa_max: f64,
    /// Whether the pipeline standardized features with training-split
    /// statistics before encoding. Recorded so that evaluation can refit
    /// and apply the identical transform.
    #[serde(default)]
    pub standardize: bool,
    pub sinkhorn: SinkhornConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_f: 1.0,
            lambda_a: 1.0,
            alpha: 1.0,
            beta: 1.0,
            learning_rate: 1e-3,
            batch_size: 128,
            epochs: 100,
            latent_dim: 128,
            hidden_dim: 4096,
            samples_per_posterior: 16,
            kappa_max: 5000.0,
            standardize: false,
            sinkhorn: SinkhornConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Renders the configuration as sorted `key = value` lines. Reports embed
    /// this text so any result can be traced back to the exact settings.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("alpha", format!("{}", self.alpha));
        push("batch_size", format!("{}", self.batch_size));
        push("beta", format!("{}", self.beta));
        push("epochs", format!("{}", self.epochs));
        push("hidden_dim", format!("{}", self.hidden_dim));
        push("kappa_max", format!("{}", self.kappa_max));
        push("lambda_a", format!("{}", self.lambda_a));
        push("lambda_f", format!("{}", self.lambda_f));
        push("latent_dim", format!("{}", self.latent_dim));
        push("learning_rate", format!("{}", self.learning_rate));
        push("samples_per_posterior", format!("{}", self.samples_per_posterior));
        push("seed", format!("{}", self.seed));
        push("sinkhorn_convergence_tol", format!("{}", self.sinkhorn.convergence_tol));
        push("sinkhorn_epsilon", format!("{}", self.sinkhorn.epsilon));
        push("sinkhorn_max_iters", format!("{}", self.sinkhorn.max_iters));
        push("standardize", format!("{}", self.standardize));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_documented_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lambda_f, 1.0);
        assert_eq!(cfg.lambda_a, 1.0);
        assert_eq!(cfg.alpha, 1.0);
        assert_eq!(cfg.beta, 1.0);
        assert_eq!(cfg.learning_rate, 1e-3);
        assert_eq!(cfg.batch_size, 128);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.latent_dim, 128);
        assert_eq!(cfg.sinkhorn.epsilon, 0.05);
        assert_eq!(cfg.sinkhorn.max_iters, 200);
        assert_eq!(cfg.sinkhorn.convergence_tol, 1e-6);
    }

    #[test]
    fn kv_rendering_is_deterministic() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.to_kv(), cfg.to_kv());
        assert!(cfg.to_kv().contains("latent_dim = 128\n"));
    }
}
