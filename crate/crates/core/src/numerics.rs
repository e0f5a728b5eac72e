//! Special functions, standard-normal helpers and seeded random streams.
//!
//! `ln_gamma` uses the Lanczos approximation (g = 7, nine coefficients) below 10
//! and the Stirling series above. `digamma` and `trigamma` shift the argument
//! up with their recurrences until it is at least 6 and then apply the
//! asymptotic expansions.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

const LANCZOS_G: f64 = 7.0;
const LANCZOS_COEF: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];
const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;
const ASYMPTOTIC_SHIFT: f64 = 6.0;

/// `ln Γ(x)` for `x > 0`.
pub fn lgamma(x: f64) -> Result<f64> {
    check_positive("lgamma", x)?;
    Ok(ln_gamma(x))
}

/// `ψ(x) = d/dx ln Γ(x)` for `x > 0`.
pub fn digamma(x: f64) -> Result<f64> {
    check_positive("digamma", x)?;
    Ok(psi(x))
}

/// `ψ₁(x) = d²/dx² ln Γ(x)` for `x > 0`.
pub fn trigamma(x: f64) -> Result<f64> {
    check_positive("trigamma", x)?;
    Ok(psi1(x))
}

fn check_positive(func: &'static str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::domain(func, format!("argument must be finite and > 0, got {x}")))
    }
}

/// Unchecked `ln Γ`; NaN outside the domain.
pub(crate) fn ln_gamma(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    if x < 0.5 {
        // Lanczos loses relative accuracy towards zero.
        return ln_gamma(x + 1.0) - x.ln();
    }
    if x >= 10.0 {
        return stirling_ln_gamma(x);
    }
    let z = x - 1.0;
    let mut sum = LANCZOS_COEF[0];
    for (i, c) in LANCZOS_COEF.iter().enumerate().skip(1) {
        sum += c / (z + i as f64);
    }
    let t = z + LANCZOS_G + 0.5;
    HALF_LN_2PI + (z + 0.5) * t.ln() - t + sum.ln()
}

fn stirling_ln_gamma(x: f64) -> f64 {
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    // Bernoulli terms B_{2k} / (2k (2k-1) x^{2k-1})
    let series = inv
        * (1.0 / 12.0
            + inv2
                * (-1.0 / 360.0
                    + inv2
                        * (1.0 / 1260.0
                            + inv2
                                * (-1.0 / 1680.0
                                    + inv2 * (1.0 / 1188.0 + inv2 * (-691.0 / 360_360.0))))));
    (x - 0.5) * x.ln() - x + HALF_LN_2PI + series
}

/// Unchecked digamma; NaN outside the domain.
pub(crate) fn psi(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_SHIFT {
        shift -= 1.0 / x;
        x += 1.0;
    }
    let inv2 = 1.0 / (x * x);
    let series = inv2
        * (1.0 / 12.0
            - inv2
                * (1.0 / 120.0
                    - inv2
                        * (1.0 / 252.0
                            - inv2
                                * (1.0 / 240.0
                                    - inv2
                                        * (1.0 / 132.0
                                            - inv2 * (691.0 / 32_760.0 - inv2 / 12.0))))));
    shift + x.ln() - 0.5 / x - series
}

/// Unchecked trigamma; NaN outside the domain.
pub(crate) fn psi1(x: f64) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return f64::NAN;
    }
    let mut x = x;
    let mut shift = 0.0;
    while x < ASYMPTOTIC_SHIFT {
        shift += 1.0 / (x * x);
        x += 1.0;
    }
    let inv = 1.0 / x;
    let inv2 = inv * inv;
    let series = inv
        + 0.5 * inv2
        + inv
            * inv2
            * (1.0 / 6.0
                - inv2
                    * (1.0 / 30.0
                        - inv2
                            * (1.0 / 42.0
                                - inv2
                                    * (1.0 / 30.0
                                        - inv2
                                            * (5.0 / 66.0
                                                - inv2 * (691.0 / 2730.0 - inv2 * 7.0 / 6.0))))));
    shift + series
}

/// Standard normal CDF Φ(x).
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

fn check_probability(func: &'static str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::domain(func, format!("probability must lie in [0, 1], got {p}")))
    }
}

fn ln_binom_pmf(j: u64, n: u64, ln_p: f64, ln_q: f64, ln_n_fact: f64) -> f64 {
    let (jf, nf) = (j as f64, n as f64);
    let mut out = ln_n_fact - ln_gamma(jf + 1.0) - ln_gamma(nf - jf + 1.0);
    // 0 * ln 0 is 0 here
    if j > 0 {
        out += jf * ln_p;
    }
    if j < n {
        out += (nf - jf) * ln_q;
    }
    out
}

/// `Pr[Binomial(n, p) <= k]`.
///
/// Sums the probability mass of the shorter tail in the log domain, so the
/// small tail values that confidence bounds depend on keep full precision.
pub fn binom_cdf(k: u64, n: u64, p: f64) -> Result<f64> {
    check_probability("binom_cdf", p)?;
    if n == 0 {
        return Err(Error::domain("binom_cdf", "n must be positive"));
    }
    if k > n {
        return Err(Error::domain("binom_cdf", format!("k = {k} exceeds n = {n}")));
    }
    if k == n {
        return Ok(1.0);
    }
    if p == 0.0 {
        return Ok(1.0);
    }
    if p == 1.0 {
        return Ok(0.0);
    }
    let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
    let ln_n_fact = ln_gamma(n as f64 + 1.0);
    let pmf = |j| ln_binom_pmf(j, n, ln_p, ln_q, ln_n_fact).exp();
    if (k as f64) < n as f64 * p {
        Ok(kahan_sum((0..=k).map(pmf)).min(1.0))
    } else {
        Ok((1.0 - kahan_sum((k + 1..=n).map(pmf))).max(0.0))
    }
}

/// Lower and upper tails for every `k`: `cdf[k] = Pr[X <= k]` and
/// `sf[k] = Pr[X > k]`, each accumulated from its own end.
pub(crate) fn binom_tails(n: u64, p: f64) -> (Vec<f64>, Vec<f64>) {
    let len = n as usize + 1;
    let mut pmf = vec![0.0; len];
    if p <= 0.0 {
        pmf[0] = 1.0;
    } else if p >= 1.0 {
        pmf[len - 1] = 1.0;
    } else {
        let (ln_p, ln_q) = (p.ln(), (-p).ln_1p());
        let ln_n_fact = ln_gamma(n as f64 + 1.0);
        for (j, v) in pmf.iter_mut().enumerate() {
            *v = ln_binom_pmf(j as u64, n, ln_p, ln_q, ln_n_fact).exp();
        }
    }
    let mut cdf = vec![0.0; len];
    let mut acc = 0.0f64;
    for j in 0..len {
        acc += pmf[j];
        cdf[j] = acc.min(1.0);
    }
    let mut sf = vec![0.0; len];
    let mut acc = 0.0f64;
    for j in (0..len).rev() {
        sf[j] = acc.min(1.0);
        acc += pmf[j];
    }
    (cdf, sf)
}

fn kahan_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    sum
}

/// A reproducible random stream.
///
/// Backed by ChaCha8 keyed with `seed` (expanded through `seed_from_u64`) and
/// positioned on ChaCha stream `stream_id`. The generator and the normal
/// sampler (`rand_distr::StandardNormal`, ziggurat) are fixed, so a
/// `(seed, stream_id)` pair produces the same sequence on every platform.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream with the same seed and a stream id derived from
    /// `(self.stream_id, label)`. Does not advance `self`.
    pub fn derive(&self, label: u64) -> RngStream {
        RngStream::new(self.seed, splitmix64(self.stream_id ^ splitmix64(label)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform integer in `[0, bound)`.
    pub fn below(&mut self, bound: usize) -> usize {
        self.rng.random_range(0..bound)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// `Gamma(shape, 1)` draw; `shape` must be positive and finite.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        Gamma::new(shape, 1.0).expect("positive shape").sample(&mut self.rng)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One isotropic Gaussian draw around `mean`.
pub fn gauss_sample(rng: &mut RngStream, mean: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::domain("gauss_sample", format!("sigma must be > 0, got {sigma}")));
    }
    Ok(mean
        .iter()
        .map(|m| m + sigma * rng.standard_normal())
        .collect())
}
