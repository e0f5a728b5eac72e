//! The Dirichlet distribution over class probabilities and its closed-form
//! uncertainty measures.
//!
//! Every measure exists twice: on a single [`DirichletParams`] in plain `f64`,
//! and in [`batch`] as differentiable tape operations over an `n x K` matrix of
//! concentrations, which is what training and attacks use.

use serde::{Deserialize, Serialize};

use crate::autodiff::softplus;
use crate::error::{Error, Result};
use crate::numerics::{ln_gamma, psi, RngStream};

/// Soft labels are clamped to `[PDF_FLOOR, 1]` and renormalised before their
/// Dirichlet log-density is taken.
pub const PDF_FLOOR: f64 = 1e-6;

/// Concentration vector `α` of a Dirichlet over `K >= 2` classes.
#[derive(Debug, Clone, PartialEq)]
pub struct DirichletParams {
    alpha: Vec<f64>,
    alpha0: f64,
}

impl DirichletParams {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() < 2 {
            return Err(Error::domain("dirichlet", "need at least two classes"));
        }
        if let Some(bad) = alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(Error::domain(
                "dirichlet",
                format!("concentrations must be finite and > 0, got {bad}"),
            ));
        }
        let alpha0 = alpha.iter().sum();
        Ok(Self { alpha, alpha0 })
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha0(&self) -> f64 {
        self.alpha0
    }

    pub fn num_classes(&self) -> usize {
        self.alpha.len()
    }

    /// `p̄_c = α_c / α₀`.
    pub fn predictive_mean(&self) -> Vec<f64> {
        self.alpha.iter().map(|a| a / self.alpha0).collect()
    }

    /// Index of the largest concentration (= argmax of the predictive mean).
    pub fn predicted_class(&self) -> usize {
        argmax(&self.alpha)
    }

    /// `α₀`.
    pub fn precision(&self) -> f64 {
        self.alpha0
    }

    pub fn differential_entropy(&self) -> f64 {
        let a0 = self.alpha0;
        let psi0 = psi(a0);
        let sum_lg: f64 = self.alpha.iter().map(|&a| ln_gamma(a)).sum();
        let cross: f64 = self
            .alpha
            .iter()
            .map(|&a| (a - 1.0) * (psi(a) - psi0))
            .sum();
        sum_lg - ln_gamma(a0) - cross
    }

    /// `E_{p ~ Dir(α)}[H(p)]`.
    pub fn expected_entropy(&self) -> f64 {
        let psi0 = psi(self.alpha0 + 1.0);
        -self
            .alpha
            .iter()
            .map(|&a| a / self.alpha0 * (psi(a + 1.0) - psi0))
            .sum::<f64>()
    }

    /// `H(p̄) - E[H(p)]`.
    pub fn mutual_information(&self) -> f64 {
        let psi0 = psi(self.alpha0 + 1.0);
        -self
            .alpha
            .iter()
            .map(|&a| {
                let p = a / self.alpha0;
                p * (p.ln() - psi(a + 1.0) + psi0)
            })
            .sum::<f64>()
    }

    /// Entropy of the predictive mean.
    pub fn total_entropy(&self) -> f64 {
        -self
            .predictive_mean()
            .iter()
            .map(|p| if *p > 0.0 { p * p.ln() } else { 0.0 })
            .sum::<f64>()
    }

    /// `E_{p ~ Dir(α)}[-ln p_y] = ψ(α₀) - ψ(α_y)`.
    pub fn expected_cross_entropy(&self, y: usize) -> Result<f64> {
        let a = self.class(y)?;
        Ok(psi(self.alpha0) - psi(a))
    }

    /// `E_{p ~ Dir(α)} ||e_y - p||²`.
    pub fn expected_squared_error(&self, y: usize) -> Result<f64> {
        self.class(y)?;
        let a0 = self.alpha0;
        Ok(self
            .alpha
            .iter()
            .enumerate()
            .map(|(c, &a)| {
                let p = a / a0;
                let target = if c == y { 1.0 } else { 0.0 };
                (target - p).powi(2) + p * (1.0 - p) / (a0 + 1.0)
            })
            .sum())
    }

    /// One draw from the distribution via normalised Gamma variates.
    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        let g: Vec<f64> = self.alpha.iter().map(|&a| rng.gamma(a)).collect();
        let total: f64 = g.iter().sum();
        g.iter().map(|v| v / total).collect()
    }

    /// `ln Dir(p | α)` for `p` strictly inside the simplex.
    pub fn log_pdf(&self, p: &[f64]) -> Result<f64> {
        if p.len() != self.alpha.len() {
            return Err(Error::shape(
                "dirichlet_log_pdf",
                format!("{} probabilities for {} classes", p.len(), self.alpha.len()),
            ));
        }
        if p.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::NonFinite {
                op: "dirichlet_log_pdf",
            });
        }
        let ln_b: f64 = self.alpha.iter().map(|&a| ln_gamma(a)).sum::<f64>() - ln_gamma(self.alpha0);
        let body: f64 = self
            .alpha
            .iter()
            .zip(p)
            .map(|(&a, &pc)| (a - 1.0) * pc.ln())
            .sum();
        Ok(body - ln_b)
    }

    fn class(&self, y: usize) -> Result<f64> {
        self.alpha.get(y).copied().ok_or_else(|| {
            Error::Index(format!("class {y} out of range for K = {}", self.alpha.len()))
        })
    }
}

/// `KL(Dir(a) || Dir(b))`.
pub fn dirichlet_kl(a: &DirichletParams, b: &DirichletParams) -> Result<f64> {
    if a.num_classes() != b.num_classes() {
        return Err(Error::shape(
            "dirichlet_kl",
            format!("K = {} vs K = {}", a.num_classes(), b.num_classes()),
        ));
    }
    let psi_a0 = psi(a.alpha0);
    let mut out = ln_gamma(a.alpha0) - ln_gamma(b.alpha0);
    for (&ac, &bc) in a.alpha.iter().zip(&b.alpha) {
        out += ln_gamma(bc) - ln_gamma(ac) + (ac - bc) * (psi(ac) - psi_a0);
    }
    Ok(out)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// Clamp to `[PDF_FLOOR, 1]` and renormalise.
pub fn clamp_soft_label(p: &[f64]) -> Vec<f64> {
    let clamped: Vec<f64> = p.iter().map(|v| v.clamp(PDF_FLOOR, 1.0)).collect();
    let total: f64 = clamped.iter().sum();
    clamped.into_iter().map(|v| v / total).collect()
}

/// How network outputs become concentrations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// `α = 1 + link(logits)`
    OffsetOne,
    /// `α = link(logits)`
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    Exp,
    Softplus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Parametrization {
    pub kind: ParamKind,
    pub link: Link,
}

impl Parametrization {
    pub const DIRECT_EXP: Parametrization = Parametrization {
        kind: ParamKind::Direct,
        link: Link::Exp,
    };
    pub const OFFSET_SOFTPLUS: Parametrization = Parametrization {
        kind: ParamKind::OffsetOne,
        link: Link::Softplus,
    };

    /// Softplus for `1 + link`, exp for the direct form.
    pub fn default_for(kind: ParamKind) -> Self {
        match kind {
            ParamKind::OffsetOne => Self::OFFSET_SOFTPLUS,
            ParamKind::Direct => Self::DIRECT_EXP,
        }
    }

    fn apply(&self, v: f64) -> f64 {
        let linked = match self.link {
            Link::Exp => v.exp(),
            Link::Softplus => softplus(v),
        };
        match self.kind {
            ParamKind::OffsetOne => 1.0 + linked,
            ParamKind::Direct => linked,
        }
    }
}

pub fn alpha_from_logits(logits: &[f64], parm: Parametrization) -> Result<DirichletParams> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            op: "alpha_from_logits",
        });
    }
    let alpha: Vec<f64> = logits.iter().map(|&v| parm.apply(v)).collect();
    if alpha.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite {
            op: "alpha_from_logits",
        });
    }
    DirichletParams::new(alpha)
}

/// Differentiable versions over a batch: `alpha` is `n x K`, per-sample
/// results are `n x 1` columns.
pub mod batch {
    use super::{Link, ParamKind, Parametrization};
    use crate::autodiff::{Tensor, Var};

    pub fn alpha_from_logits<'t>(logits: Var<'t>, parm: Parametrization) -> Var<'t> {
        let linked = match parm.link {
            Link::Exp => logits.exp(),
            Link::Softplus => logits.softplus(),
        };
        match parm.kind {
            ParamKind::OffsetOne => linked + 1.0,
            ParamKind::Direct => linked,
        }
    }

    pub fn precision(alpha: Var<'_>) -> Var<'_> {
        alpha.row_sums()
    }

    pub fn predictive_mean(alpha: Var<'_>) -> Var<'_> {
        alpha / alpha.row_sums()
    }

    pub fn differential_entropy(alpha: Var<'_>) -> Var<'_> {
        let a0 = alpha.row_sums();
        let cross = ((alpha - 1.0) * (alpha.digamma() - a0.digamma())).row_sums();
        alpha.lgamma().row_sums() - a0.lgamma() - cross
    }

    pub fn expected_entropy(alpha: Var<'_>) -> Var<'_> {
        let a0 = alpha.row_sums();
        let p = alpha / a0;
        -(p * ((alpha + 1.0).digamma() - (a0 + 1.0).digamma())).row_sums()
    }

    pub fn mutual_information(alpha: Var<'_>) -> Var<'_> {
        let a0 = alpha.row_sums();
        let ln_p = alpha.log() - a0.log();
        let p = alpha / a0;
        -(p * (ln_p - (alpha + 1.0).digamma() + (a0 + 1.0).digamma())).row_sums()
    }

    /// `ψ(α₀) - ψ(α_y)` per row.
    pub fn expected_cross_entropy<'t>(alpha: Var<'t>, labels: &[usize]) -> Var<'t> {
        alpha.row_sums().digamma() - alpha.pick(labels).digamma()
    }

    /// Cross-entropy of the predictive mean, `ln α₀ - ln α_y`.
    pub fn mean_cross_entropy<'t>(alpha: Var<'t>, labels: &[usize]) -> Var<'t> {
        alpha.row_sums().log() - alpha.pick(labels).log()
    }

    /// `E ||e_y - p||²` per row.
    pub fn expected_squared_error<'t>(alpha: Var<'t>, labels: &[usize]) -> Var<'t> {
        let [n, k] = alpha.shape();
        let mut onehot = Tensor::zeros(n, k);
        for (i, &y) in labels.iter().enumerate() {
            onehot.data_mut()[i * k + y] = 1.0;
        }
        let y = alpha.tape().constant(onehot);
        let a0 = alpha.row_sums();
        let p = alpha / a0;
        let var = p * (-p + 1.0) / (a0 + 1.0);
        ((y - p).square() + var).row_sums()
    }

    /// `KL(Dir(a) || Dir(b))` per row; either side may be a constant.
    pub fn kl<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
        let a0 = a.row_sums();
        let b0 = b.row_sums();
        let cross = ((a - b) * (a.digamma() - a0.digamma())).row_sums();
        a0.lgamma() - a.lgamma().row_sums() - b0.lgamma() + b.lgamma().row_sums() + cross
    }

    /// `ln Dir(p | α)` per row for soft labels `p` already inside the simplex.
    pub fn log_pdf<'t>(alpha: Var<'t>, p: Var<'t>) -> Var<'t> {
        let ln_b = alpha.lgamma().row_sums() - alpha.row_sums().lgamma();
        ((alpha - 1.0) * p.log()).row_sums() - ln_b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, Tape, Tensor};
    use crate::numerics::RngStream;
    use proptest::prelude::*;

    fn dir(a: &[f64]) -> DirichletParams {
        DirichletParams::new(a.to_vec()).unwrap()
    }

    #[test]
    fn validation() {
        assert!(DirichletParams::new(vec![1.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, 0.0]).is_err());
        assert!(DirichletParams::new(vec![1.0, f64::NAN]).is_err());
        let d = dir(&[2.0, 3.0, 5.0]);
        assert_eq!(d.alpha0(), 10.0);
    }

    #[test]
    fn parametrizations() {
        let direct = alpha_from_logits(&[0.0, 0.0], Parametrization::DIRECT_EXP).unwrap();
        assert_eq!(direct.alpha(), &[1.0, 1.0]);
        let offset = Parametrization {
            kind: ParamKind::OffsetOne,
            link: Link::Exp,
        };
        assert_eq!(alpha_from_logits(&[0.0, 0.0], offset).unwrap().alpha(), &[2.0, 2.0]);
        let d = alpha_from_logits(&[2f64.ln(), 3f64.ln()], Parametrization::DIRECT_EXP).unwrap();
        assert!((d.alpha()[0] - 2.0).abs() < 1e-15 && (d.alpha()[1] - 3.0).abs() < 1e-15);
        let sp = alpha_from_logits(&[-50.0, 3.0], Parametrization::OFFSET_SOFTPLUS).unwrap();
        assert!(sp.alpha().iter().all(|&a| a >= 1.0));
        assert!(alpha_from_logits(&[f64::NAN, 0.0], Parametrization::DIRECT_EXP).is_err());
    }

    #[test]
    fn mean_and_precision() {
        assert_eq!(dir(&[1.0, 1.0]).predictive_mean(), vec![0.5, 0.5]);
        let d = dir(&[2.0, 3.0, 5.0]);
        let m = d.predictive_mean();
        assert!((m[0] - 0.2).abs() < 1e-15 && (m[1] - 0.3).abs() < 1e-15 && (m[2] - 0.5).abs() < 1e-15);
        assert_eq!(d.predicted_class(), 2);
        assert_eq!(dir(&[1.0, 1.0]).precision(), 2.0);
        let scaled = dir(&[6.0, 9.0, 15.0]);
        assert!((scaled.precision() - 3.0 * d.precision()).abs() < 1e-12);
    }

    #[test]
    fn differential_entropy_values() {
        assert!(dir(&[1.0, 1.0]).differential_entropy().abs() < 1e-14);
        assert!((dir(&[1.0, 1.0, 1.0]).differential_entropy() + 2f64.ln()).abs() < 1e-14);
        let a = dir(&[0.7, 3.0, 9.5]).differential_entropy();
        let b = dir(&[9.5, 0.7, 3.0]).differential_entropy();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn mutual_information_values() {
        let mi = dir(&[1.0, 1.0]).mutual_information();
        assert!((mi - (2f64.ln() - 0.5)).abs() < 1e-12);
        assert!(dir(&[1000.0, 1000.0]).mutual_information() <= 1e-3);
        let a = dir(&[0.7, 3.0, 9.5]).mutual_information();
        let b = dir(&[3.0, 9.5, 0.7]).mutual_information();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn expected_entropy_values() {
        assert!((dir(&[1.0, 1.0]).expected_entropy() - 0.5).abs() < 1e-12);
        assert!((dir(&[1e6, 1e6]).expected_entropy() - 2f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn kl_values() {
        let a = dir(&[2.0, 2.0]);
        assert!(dirichlet_kl(&a, &a).unwrap().abs() < 1e-14);
        // closed form: lnΓ(4) - 2lnΓ(2) - lnΓ(2) + 0 + 2(1)(ψ(2) - ψ(4)) = ln 6 - 5/3
        let want = 6f64.ln() - 5.0 / 3.0;
        assert!((dirichlet_kl(&a, &dir(&[1.0, 1.0])).unwrap() - want).abs() < 1e-12);
        assert!((want - 0.1251).abs() < 1e-4);
        assert!(dirichlet_kl(&a, &dir(&[1.0, 1.0, 1.0])).is_err());
        // ln Γ(11) - ln Γ(10) + 9 (ψ(10) - ψ(11)) = ln 10 - 0.9
        let k = dirichlet_kl(&dir(&[10.0, 1.0]), &dir(&[1.0, 1.0])).unwrap();
        assert!((k - (10f64.ln() - 0.9)).abs() < 1e-12, "{k}");
    }

    #[test]
    fn log_pdf_values() {
        assert!(dir(&[1.0, 1.0]).log_pdf(&[0.3, 0.7]).unwrap().abs() < 1e-14);
        assert!((dir(&[2.0, 2.0]).log_pdf(&[0.5, 0.5]).unwrap() - 1.5f64.ln()).abs() < 1e-12);
        assert!(matches!(
            dir(&[2.0, 2.0]).log_pdf(&[0.0, 1.0]),
            Err(Error::NonFinite { .. })
        ));
        assert!(dir(&[2.0, 2.0]).log_pdf(&clamp_soft_label(&[0.0, 1.0])).is_ok());
        // trapezoid integral of the density over the 2-simplex
        let d = dir(&[2.5, 1.7]);
        let n = 20_000;
        let h = 1.0 / n as f64;
        let mut total = 0.0;
        for i in 1..n {
            let x = i as f64 * h;
            total += d.log_pdf(&[x, 1.0 - x]).unwrap().exp() * h;
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn expected_cross_entropy_values() {
        assert!((dir(&[1.0, 1.0]).expected_cross_entropy(0).unwrap() - 1.0).abs() < 1e-12);
        let big = dir(&[1e6, 1e6]).expected_cross_entropy(0).unwrap();
        assert!((big - 2f64.ln()).abs() < 1e-3);
        assert!(matches!(dir(&[1.0, 1.0]).expected_cross_entropy(2), Err(Error::Index(_))));
    }

    #[test]
    fn expected_squared_error_values() {
        let v = dir(&[1.0, 1.0]).expected_squared_error(0).unwrap();
        assert!((v - 2.0 / 3.0).abs() < 1e-14);
        assert!(dir(&[1e9, 1.0]).expected_squared_error(0).unwrap() < 1e-8);
    }

    fn random_alpha(rng: &mut RngStream, lo: f64, hi: f64) -> Vec<f64> {
        let k = 2 + rng.below(4);
        (0..k).map(|_| lo + (hi - lo) * rng.uniform()).collect()
    }

    #[test]
    fn flat_dirichlet_maximises_entropy() {
        let mut rng = RngStream::new(17, 0);
        for _ in 0..10_000 {
            let a = random_alpha(&mut rng, 0.1, 50.0);
            let flat = dir(&vec![1.0; a.len()]).differential_entropy();
            assert!(dir(&a).differential_entropy() <= flat + 1e-12);
        }
    }

    #[test]
    fn monte_carlo_agrees_with_closed_forms() {
        // 2e4 draws per alpha here; the acceptance suite runs 1e6.
        let mut rng = RngStream::new(23, 0);
        for _ in 0..5 {
            let a = random_alpha(&mut rng, 0.6, 8.0);
            let d = dir(&a);
            let other = dir(&a.iter().rev().map(|v| v + 0.5).collect::<Vec<_>>());
            let n = 20_000;
            let (mut s_h, mut s_h2, mut s_e, mut s_e2) = (0.0, 0.0, 0.0, 0.0);
            let (mut s_k, mut s_k2) = (0.0, 0.0);
            for _ in 0..n {
                let p = d.sample(&mut rng);
                let nlp = -d.log_pdf(&p).unwrap();
                s_h += nlp;
                s_h2 += nlp * nlp;
                let ent: f64 = -p.iter().map(|v| v * v.ln()).sum::<f64>();
                s_e += ent;
                s_e2 += ent * ent;
                let lr = -nlp - other.log_pdf(&p).unwrap();
                s_k += lr;
                s_k2 += lr * lr;
            }
            let nf = n as f64;
            let (mh, me) = (s_h / nf, s_e / nf);
            let se_h = ((s_h2 / nf - mh * mh) / nf).sqrt();
            let se_e = ((s_e2 / nf - me * me) / nf).sqrt();
            assert!((mh - d.differential_entropy()).abs() < 4.0 * se_h, "{a:?}");
            assert!((me - d.expected_entropy()).abs() < 4.0 * se_e, "{a:?}");
            let (mk, se_k) = (s_k / nf, ((s_k2 / nf - (s_k / nf).powi(2)) / nf).sqrt());
            assert!((mk - dirichlet_kl(&d, &other).unwrap()).abs() < 4.0 * se_k, "{a:?}");
        }
    }

    #[test]
    fn batch_matches_scalar() {
        let rows = vec![vec![1.0, 1.0, 1.0], vec![0.5, 2.0, 7.5], vec![30.0, 1.2, 4.0]];
        let labels = [0, 2, 1];
        let t = Tape::new();
        let alpha = t.constant(Tensor::from_rows(&rows).unwrap());
        let de = batch::differential_entropy(alpha).value().unwrap();
        let mi = batch::mutual_information(alpha).value().unwrap();
        let ee = batch::expected_entropy(alpha).value().unwrap();
        let ce = batch::expected_cross_entropy(alpha, &labels).value().unwrap();
        let se = batch::expected_squared_error(alpha, &labels).value().unwrap();
        let pr = batch::precision(alpha).value().unwrap();
        let target = t.constant(Tensor::filled(3, 3, 1.0));
        let kl = batch::kl(alpha, target).value().unwrap();
        for (i, r) in rows.iter().enumerate() {
            let d = dir(r);
            assert!((de.data()[i] - d.differential_entropy()).abs() < 1e-12);
            assert!((mi.data()[i] - d.mutual_information()).abs() < 1e-12);
            assert!((ee.data()[i] - d.expected_entropy()).abs() < 1e-12);
            assert!((ce.data()[i] - d.expected_cross_entropy(labels[i]).unwrap()).abs() < 1e-12);
            assert!((se.data()[i] - d.expected_squared_error(labels[i]).unwrap()).abs() < 1e-12);
            assert!((pr.data()[i] - d.precision()).abs() < 1e-12);
            let flat = dir(&[1.0, 1.0, 1.0]);
            assert!((kl.data()[i] - dirichlet_kl(&d, &flat).unwrap()).abs() < 1e-12);
        }
    }

    #[test]
    fn measure_gradients() {
        let mut rng = RngStream::new(31, 0);
        let data: Vec<f64> = (0..12).map(|_| 0.3 + 6.0 * rng.uniform()).collect();
        let alpha = Tensor::new(3, 4, data).unwrap();
        let labels = [0usize, 3, 1];
        let checks: Vec<(&str, f64)> = vec![
            ("diffE", grad_check(|_, a| batch::differential_entropy(a).sum(), &alpha, 1e-5).unwrap()),
            ("MI", grad_check(|_, a| batch::mutual_information(a).sum(), &alpha, 1e-5).unwrap()),
            ("EE", grad_check(|_, a| batch::expected_entropy(a).sum(), &alpha, 1e-5).unwrap()),
            ("prec", grad_check(|_, a| batch::precision(a).sum(), &alpha, 1e-5).unwrap()),
            ("CE", grad_check(|_, a| batch::expected_cross_entropy(a, &labels).sum(), &alpha, 1e-5).unwrap()),
            ("SE", grad_check(|_, a| batch::expected_squared_error(a, &labels).sum(), &alpha, 1e-5).unwrap()),
            ("KL fwd", grad_check(|t, a| {
                let b = t.constant(Tensor::filled(3, 4, 1.5));
                batch::kl(b, a).sum()
            }, &alpha, 1e-5).unwrap()),
            ("KL rev", grad_check(|t, a| {
                let b = t.constant(Tensor::filled(3, 4, 1.5));
                batch::kl(a, b).sum()
            }, &alpha, 1e-5).unwrap()),
            ("logpdf", grad_check(|t, a| {
                let p = t.constant(Tensor::new(3, 4, vec![0.1, 0.2, 0.3, 0.4, 0.25, 0.25, 0.25, 0.25, 0.7, 0.1, 0.1, 0.1]).unwrap());
                batch::log_pdf(a, p).sum()
            }, &alpha, 1e-5).unwrap()),
        ];
        for (name, err) in checks {
            assert!(err <= 1e-5, "{name}: {err}");
        }
    }

    #[test]
    fn diff_entropy_of_linear_logits_gradient() {
        let mut rng = RngStream::new(37, 0);
        let w = Tensor::new(3, 4, (0..12).map(|_| rng.uniform() - 0.5).collect()).unwrap();
        let x = Tensor::new(2, 3, (0..6).map(|_| 2.0 * rng.uniform() - 1.0).collect()).unwrap();
        let err = grad_check(
            |t, wv| {
                let logits = t.constant(x.clone()).matmul(wv);
                batch::differential_entropy(batch::alpha_from_logits(logits, Parametrization::DIRECT_EXP)).sum()
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }

    proptest! {
        #[test]
        fn decomposition_identity(a in proptest::collection::vec(0.05f64..100.0, 2..7)) {
            let d = dir(&a);
            let lhs = d.mutual_information() + d.expected_entropy();
            prop_assert!((lhs - d.total_entropy()).abs() < 1e-10);
        }

        #[test]
        fn mi_is_bounded(a in proptest::collection::vec(0.05f64..100.0, 2..7)) {
            let d = dir(&a);
            let mi = d.mutual_information();
            prop_assert!(mi >= -1e-12 && mi <= (a.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn kl_is_nonnegative(
            a in proptest::collection::vec(0.1f64..30.0, 3),
            b in proptest::collection::vec(0.1f64..30.0, 3),
        ) {
            prop_assert!(dirichlet_kl(&dir(&a), &dir(&b)).unwrap() >= -1e-10);
        }

        #[test]
        fn jensen_for_expected_ce(a in proptest::collection::vec(0.1f64..50.0, 2..6), y in 0usize..6) {
            let y = y % a.len();
            let d = dir(&a);
            let ce_mean = -(d.predictive_mean()[y]).ln();
            prop_assert!(d.expected_cross_entropy(y).unwrap() >= ce_mean - 1e-12);
        }
    }
}
