//! Causal saliency, retention probability, and stochastic thinning.
//!
//! A sample with keyword count `k` has saliency `f = tanh(k / gamma)`.
//! With normalized density `d`, the baseline `b = 1 / (1 + alpha d)` is
//! blended with a causal bonus: `g = b + lambda f (1 - b)`. Each sample is
//! kept iff its own uniform draw `xi <= g`.

pub mod properties;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use properties::{verify_properties, CheckStatus, PropertyCheck, PropertySummary};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("alpha must be a finite value > 0, got {0}")]
    Alpha(f64),
    #[error("lambda must lie in [0, 1], got {0}")]
    Lambda(f64),
    #[error("gamma must be a finite value > 0, got {0}")]
    Gamma(f64),
    #[error("k must be at least 1")]
    K,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetentionConfig {
    #[serde(default = "defaults::alpha")]
    pub alpha: f64,
    #[serde(default = "defaults::lambda")]
    pub lambda: f64,
    #[serde(default = "defaults::gamma")]
    pub gamma: f64,
    #[serde(default = "defaults::k")]
    pub k: usize,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn alpha() -> f64 {
        1.0
    }
    pub fn lambda() -> f64 {
        0.5
    }
    pub fn gamma() -> f64 {
        8.0
    }
    pub fn k() -> usize {
        crate::density::DEFAULT_K
    }
}

impl Default for RetentionConfig {
    fn default() -> Self {
        RetentionConfig {
            alpha: defaults::alpha(),
            lambda: defaults::lambda(),
            gamma: defaults::gamma(),
            k: defaults::k(),
            seed: 0,
        }
    }
}

impl RetentionConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(ConfigError::Alpha(self.alpha));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ConfigError::Lambda(self.lambda));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(ConfigError::Gamma(self.gamma));
        }
        if self.k == 0 {
            return Err(ConfigError::K);
        }
        Ok(())
    }
}

pub fn causal_saliency(keyword_count: u64, gamma: f64) -> f64 {
    (keyword_count as f64 / gamma).tanh()
}

pub fn retention_probability(f: f64, d: f64, config: &RetentionConfig) -> f64 {
    let base = 1.0 / (1.0 + config.alpha * d);
    base + config.lambda * f * (1.0 - base)
}

/// Algebraically equal rewriting of [`retention_probability`].
pub fn retention_closed_form(f: f64, d: f64, config: &RetentionConfig) -> f64 {
    let (a, l) = (config.alpha, config.lambda);
    (1.0 + a * l * f * d) / (1.0 + a * d)
}

/// Uniform draw in `[0, 1)` for one sample. The generator is keyed by a
/// 64-bit hash of `(seed, sample_id)`, so a draw does not depend on which
/// other samples exist or the order they are processed in.
pub fn draw_xi(seed: u64, sample_id: &str) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    let key = u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"));
    ChaCha8Rng::seed_from_u64(key).random::<f64>()
}

/// Upstream scores for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreInput {
    pub sample_id: String,
    pub keyword_count: u64,
    pub raw_ratio: f64,
    pub density: f64,
}

/// One line of the score file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub keyword_count: u64,
    #[serde(rename = "f")]
    pub saliency: f64,
    #[serde(rename = "r")]
    pub raw_ratio: f64,
    #[serde(rename = "d")]
    pub density: f64,
    #[serde(rename = "g")]
    pub retention_prob: f64,
    pub xi: f64,
    pub retained: bool,
}

/// Scores and thins, preserving input order.
pub fn select(inputs: &[ScoreInput], config: &RetentionConfig) -> Vec<ScoredSample> {
    inputs
        .par_iter()
        .map(|s| {
            let saliency = causal_saliency(s.keyword_count, config.gamma);
            let g = retention_probability(saliency, s.density, config);
            let xi = draw_xi(config.seed, &s.sample_id);
            ScoredSample {
                sample_id: s.sample_id.clone(),
                keyword_count: s.keyword_count,
                saliency,
                raw_ratio: s.raw_ratio,
                density: s.density,
                retention_prob: g,
                xi,
                retained: xi <= g,
            }
        })
        .collect()
}

/// Expected retained size and its binomial standard deviation.
pub fn expected_retained_size(scored: &[ScoredSample]) -> (f64, f64) {
    let (mean, var) = scored.iter().fold((0.0, 0.0), |(m, v), s| {
        (
            m + s.retention_prob,
            v + s.retention_prob * (1.0 - s.retention_prob),
        )
    });
    (mean, var.max(0.0).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preservation {
    pub ratio: f64,
    pub lower_bound: f64,
    pub corpus_mass: f64,
    pub retained_mass: f64,
    pub mean_saliency: f64,
    /// The corpus carries no causal mass; the ratio is reported as 1.
    pub degenerate: bool,
}

/// Share of total saliency mass kept by the retained samples, with the
/// expectation lower bound `lambda * mean(f)`.
pub fn causal_preservation(scored: &[ScoredSample], lambda: f64) -> Preservation {
    let corpus_mass: f64 = scored.iter().map(|s| s.saliency).sum();
    let retained_mass: f64 = scored
        .iter()
        .filter(|s| s.retained)
        .map(|s| s.saliency)
        .sum();
    let mean_saliency = if scored.is_empty() {
        0.0
    } else {
        corpus_mass / scored.len() as f64
    };
    let degenerate = corpus_mass == 0.0;
    Preservation {
        ratio: if degenerate {
            1.0
        } else {
            retained_mass / corpus_mass
        },
        lower_bound: lambda * mean_saliency,
        corpus_mass,
        retained_mass,
        mean_saliency,
        degenerate,
    }
}

/// Bound on `|g(f', d') - g(f, d)|` when `|f' - f| <= eps_f` and `|d' - d| <= eps_d`.
pub fn perturbation_bound(config: &RetentionConfig, eps_f: f64, eps_d: f64) -> f64 {
    let a = config.alpha;
    a * eps_d + config.lambda * (a / (1.0 + a)) * eps_f
}

/// Half-width, in standard deviations, of the band a realized retained
/// size is expected to fall in.
pub const SIZE_BAND_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionReport {
    pub config: RetentionConfig,
    pub k_used: usize,
    pub corpus_size: usize,
    pub expected_size: f64,
    pub realized_size: usize,
    pub size_stddev: f64,
    pub size_within_band: bool,
    pub mean_saliency: f64,
    pub causal_mass_corpus: f64,
    pub causal_mass_retained: f64,
    pub preservation_ratio: f64,
    pub preservation_lower_bound: f64,
    pub preservation_degenerate: bool,
    /// Realized ratio fell below the expectation bound; informational only.
    pub preservation_below_bound: bool,
    pub properties: PropertySummary,
    pub encoder: String,
    pub engine: String,
    pub generated_at_unix: u64,
}

impl SelectionReport {
    pub fn build(
        config: &RetentionConfig,
        k_used: usize,
        scored: &[ScoredSample],
        properties: PropertySummary,
        encoder: String,
        engine: String,
        generated_at_unix: u64,
    ) -> Self {
        let (expected_size, size_stddev) = expected_retained_size(scored);
        let realized_size = scored.iter().filter(|s| s.retained).count();
        let p = causal_preservation(scored, config.lambda);
        SelectionReport {
            config: *config,
            k_used,
            corpus_size: scored.len(),
            expected_size,
            realized_size,
            size_stddev,
            size_within_band: (realized_size as f64 - expected_size).abs()
                <= SIZE_BAND_SIGMAS * size_stddev,
            mean_saliency: p.mean_saliency,
            causal_mass_corpus: p.corpus_mass,
            causal_mass_retained: p.retained_mass,
            preservation_ratio: p.ratio,
            preservation_lower_bound: p.lower_bound,
            preservation_degenerate: p.degenerate,
            preservation_below_bound: p.ratio < p.lower_bound,
            properties,
            encoder,
            engine,
            generated_at_unix,
        }
    }
}
