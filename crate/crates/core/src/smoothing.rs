//! Median smoothing of uncertainty scores with certified bounds.
//!
//! For a score `s` and Gaussian noise of scale `σ`, the smoothed median at
//! any `x + δ` with `‖δ‖₂ ≤ r` lies between the `Φ(-r/σ)` and `Φ(r/σ)`
//! quantiles of the noisy scores at `x`. Those quantiles are bounded with
//! binomial order statistics of a finite sample, `conf_alpha / 2` per side.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::eval::Measure;
use crate::models::Model;
use crate::numerics::{binom_tails, std_normal_cdf, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_conf_alpha")]
    pub conf_alpha: f64,
    #[serde(default = "default_measure")]
    pub measure: Measure,
}

fn default_samples() -> usize {
    1000
}

fn default_conf_alpha() -> f64 {
    0.001
}

fn default_measure() -> Measure {
    Measure::DiffEntropy
}

impl SmoothingConfig {
    pub fn new(sigma: f64, measure: Measure) -> Self {
        Self {
            sigma,
            n_samples: default_samples(),
            conf_alpha: default_conf_alpha(),
            measure,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::domain("smoothing", format!("sigma must be > 0, got {}", self.sigma)));
        }
        if self.n_samples == 0 {
            return Err(Error::domain("smoothing", "n_samples must be >= 1"));
        }
        if !(self.conf_alpha > 0.0 && self.conf_alpha < 1.0) {
            return Err(Error::domain("smoothing", format!("conf_alpha must be in (0, 1), got {}", self.conf_alpha)));
        }
        Ok(())
    }
}

/// Bounds on the smoothed score at distance up to `radius`. Missing order
/// statistics give infinite bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifiedScore {
    pub m_lower: f64,
    pub m_median: f64,
    pub m_upper: f64,
    pub radius: f64,
}

impl CertifiedScore {
    pub fn width(&self) -> f64 {
        self.m_upper - self.m_lower
    }
}

/// `cfg.n_samples` scores at `x + σε`, sorted ascending. Scores follow the
/// measure's uncertainty orientation, so precision enters as `-α₀`.
pub fn smoothed_scores(model: &Model, x: &[f64], cfg: &SmoothingConfig, rng: &mut RngStream) -> Result<Vec<f64>> {
    cfg.validate()?;
    if x.len() != model.input_dim() {
        return Err(Error::Contract(format!(
            "input has {} features, model expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    let d = x.len();
    let mut data = Vec::with_capacity(cfg.n_samples * d);
    for _ in 0..cfg.n_samples {
        data.extend(x.iter().map(|v| v + cfg.sigma * rng.standard_normal()));
    }
    let noisy = Tensor::new(cfg.n_samples, d, data)?;
    let alphas = model.alphas(&noisy).or_else(|_| {
        // locate the first failing sample
        for i in 0..noisy.rows() {
            if let Err(e) = model.alphas(&noisy.select_rows(&[i])) {
                return Err(Error::Sample {
                    index: i,
                    source: Box::new(e),
                });
            }
        }
        Err(Error::NonFinite { op: "smoothed_scores" })
    })?;
    let mut scores = cfg.measure.scores(&alphas)?;
    scores.sort_by(f64::total_cmp);
    Ok(scores)
}

/// 1-based order statistic indices bounding the `p_low` quantile from below
/// and the `p_high` quantile from above, each with confidence
/// `1 - conf_alpha / 2`.
pub fn order_statistic_indices(
    n: usize,
    p_low: f64,
    p_high: f64,
    conf_alpha: f64,
) -> Result<(Option<usize>, Option<usize>)> {
    if !(0.0 < p_low && p_low <= p_high && p_high < 1.0) {
        return Err(Error::domain("order_statistic_indices", format!("need 0 < p_low <= p_high < 1, got {p_low}, {p_high}")));
    }
    if !(conf_alpha > 0.0 && conf_alpha < 1.0) {
        return Err(Error::domain("order_statistic_indices", "conf_alpha must be in (0, 1)"));
    }
    let half = 0.5 * conf_alpha;
    let (cdf_lo, _) = binom_tails(n as u64, p_low);
    let (_, sf_hi) = binom_tails(n as u64, p_high);
    // Pr[X <= k-1] <= α/2 with X ~ Bin(n, p_low)
    let k_lo = (1..=n).rev().find(|&k| cdf_lo[k - 1] <= half);
    // Pr[X <= k-1] >= 1 - α/2, i.e. Pr[X > k-1] <= α/2, with X ~ Bin(n, p_high)
    let k_hi = (1..=n).find(|&k| sf_hi[k - 1] <= half);
    Ok((k_lo, k_hi))
}

/// Certified bounds for every radius in `radii`, all from one sample.
pub fn certify_radii(
    model: &Model,
    x: &[f64],
    cfg: &SmoothingConfig,
    radii: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<CertifiedScore>> {
    if let Some(r) = radii.iter().find(|r| !(**r >= 0.0)) {
        return Err(Error::domain("certify", format!("radius must be >= 0, got {r}")));
    }
    let s = smoothed_scores(model, x, cfg, rng)?;
    radii.iter().map(|&r| bounds_from_sample(&s, cfg, r)).collect()
}

pub fn certify(model: &Model, x: &[f64], cfg: &SmoothingConfig, radius: f64, rng: &mut RngStream) -> Result<CertifiedScore> {
    Ok(certify_radii(model, x, cfg, &[radius], rng)?[0])
}

/// Bounds from an ascending sample of smoothed scores.
pub fn bounds_from_sample(sorted: &[f64], cfg: &SmoothingConfig, radius: f64) -> Result<CertifiedScore> {
    let n = sorted.len();
    if n == 0 {
        return Err(Error::domain("certify", "empty sample"));
    }
    let p_low = std_normal_cdf(-radius / cfg.sigma);
    let p_high = std_normal_cdf(radius / cfg.sigma);
    let (k_lo, k_hi) = if p_low > 0.0 && p_high < 1.0 {
        order_statistic_indices(n, p_low, p_high, cfg.conf_alpha)?
    } else {
        (None, None)
    };
    Ok(CertifiedScore {
        m_lower: k_lo.map_or(f64::NEG_INFINITY, |k| sorted[k - 1]),
        m_median: sorted[n.div_ceil(2) - 1],
        m_upper: k_hi.map_or(f64::INFINITY, |k| sorted[k - 1]),
        radius,
    })
}

/// Certifies every row of `xs` in parallel. Row `i` samples from
/// `rng.derive(key + i)` for a key drawn from `rng`.
pub fn certify_batch(
    model: &Model,
    xs: &Tensor,
    cfg: &SmoothingConfig,
    radii: &[f64],
    rng: &mut RngStream,
) -> Result<Vec<Vec<CertifiedScore>>> {
    cfg.validate()?;
    let key = rng.next_u64();
    (0..xs.rows())
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(key.wrapping_add(i as u64));
            certify_radii(model, xs.row_slice(i), cfg, radii, &mut r).map_err(|e| Error::Sample {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}
