//! Gradient (FGSM, PGD) and black-box (Gaussian noise) attacks on class
//! predictions and uncertainty measures.
//!
//! Every routine works on a batch of rows at once. Rows never interact, so a
//! batch gives bit-for-bit the same results as attacking each row alone.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dirichlet::batch;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::{lgamma, RngStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    Noise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    /// Cross-entropy of the predictive mean, `ln α₀ - ln α_y`.
    CrossEntropy,
    DiffEntropy,
    MutualInfo,
    /// `α₀`.
    Precision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Maximize,
    Minimize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    L2,
    Linf,
}

impl Norm {
    pub fn of(self, v: &[f64]) -> f64 {
        match self {
            Norm::L2 => v.iter().map(|x| x * x).sum::<f64>().sqrt(),
            Norm::Linf => v.iter().fold(0.0, |m, x| m.max(x.abs())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub method: AttackMethod,
    pub loss_target: LossTarget,
    #[serde(default)]
    pub direction: Direction,
    #[serde(default)]
    pub norm: Norm,
    /// Ball radius; for `Noise` the Gaussian standard deviation.
    pub radius: f64,
    #[serde(default = "default_pgd_steps")]
    pub pgd_steps: usize,
    /// Defaults to `2.5 * radius / pgd_steps`.
    #[serde(default)]
    pub pgd_step_size: Option<f64>,
    #[serde(default = "default_noise_samples")]
    pub noise_samples: usize,
    /// Per-feature bounds `[lo, hi]` applied to every coordinate.
    #[serde(default)]
    pub clip_box: Option<[f64; 2]>,
}

fn default_pgd_steps() -> usize {
    40
}

fn default_noise_samples() -> usize {
    10
}

impl AttackSpec {
    pub fn new(method: AttackMethod, loss_target: LossTarget) -> Self {
        Self {
            method,
            loss_target,
            direction: Direction::Maximize,
            norm: Norm::L2,
            radius: 0.1,
            pgd_steps: default_pgd_steps(),
            pgd_step_size: None,
            noise_samples: default_noise_samples(),
            clip_box: None,
        }
    }

    pub fn with_radius(mut self, radius: f64) -> Self {
        self.radius = radius;
        self
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    pub fn with_norm(mut self, norm: Norm) -> Self {
        self.norm = norm;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::domain("attack", format!("radius must be >= 0, got {}", self.radius)));
        }
        if self.pgd_steps == 0 || self.noise_samples == 0 {
            return Err(Error::domain("attack", "pgd_steps and noise_samples must be >= 1"));
        }
        if let Some(s) = self.pgd_step_size {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::domain("attack", "pgd_step_size must be > 0"));
            }
        }
        if let Some([lo, hi]) = self.clip_box {
            if !(lo <= hi) {
                return Err(Error::domain("attack", "clip_box needs lo <= hi"));
            }
        }
        Ok(())
    }

    pub fn step_size(&self) -> f64 {
        self.pgd_step_size
            .unwrap_or(2.5 * self.radius / self.pgd_steps as f64)
    }

    fn sign(&self) -> f64 {
        match self.direction {
            Direction::Maximize => 1.0,
            Direction::Minimize => -1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    /// Objective at `x_adv` (negated for `Minimize`).
    pub achieved_loss: f64,
    /// `achieved_loss` minus the objective at the clean input.
    pub loss_delta: f64,
    /// Distance from the clean input in the spec's norm.
    pub norm_used: f64,
}

/// Per-row attack target on concentrations `alpha` (`n x 1`), before the
/// direction sign.
pub fn target_var<'t>(alpha: Var<'t>, target: LossTarget, labels: Option<&[usize]>) -> Result<Var<'t>> {
    Ok(match target {
        LossTarget::CrossEntropy => {
            let labels =
                labels.ok_or_else(|| Error::Contract("cross-entropy attack needs labels".into()))?;
            batch::mean_cross_entropy(alpha, labels)
        }
        LossTarget::DiffEntropy => batch::differential_entropy(alpha),
        LossTarget::MutualInfo => batch::mutual_information(alpha),
        LossTarget::Precision => batch::precision(alpha),
    })
}

fn check_inputs(model: &Model, xs: &Tensor, spec: &AttackSpec, labels: Option<&[usize]>) -> Result<()> {
    spec.validate()?;
    if xs.cols() != model.input_dim() {
        return Err(Error::Contract(format!(
            "inputs have {} features, model expects {}",
            xs.cols(),
            model.input_dim()
        )));
    }
    if let Some(l) = labels {
        if l.len() != xs.rows() {
            return Err(Error::shape("attack", format!("{} labels for {} rows", l.len(), xs.rows())));
        }
        if let Some(bad) = l.iter().find(|&&y| y >= model.num_classes) {
            return Err(Error::Index(format!("label {bad} for {} classes", model.num_classes)));
        }
    }
    if spec.loss_target == LossTarget::CrossEntropy && labels.is_none() {
        return Err(Error::Contract("cross-entropy attack needs labels".into()));
    }
    Ok(())
}

/// Signed objective per row and, if asked, its gradient w.r.t. the inputs.
fn objective(
    model: &Model,
    xs: &Tensor,
    spec: &AttackSpec,
    labels: Option<&[usize]>,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    let tape = Tape::new();
    let x = tape.input(xs.clone());
    let values = target_var(model.alpha_var(&tape, x), spec.loss_target, labels)?.scale(spec.sign());
    let out = values.value()?;
    if !out.is_finite() {
        return Err(Error::NonFinite { op: "attack_loss" });
    }
    let grad = if with_grad {
        let g = tape.backward(values.sum())?.wrt(x);
        if !g.is_finite() {
            return Err(Error::NonFinite { op: "attack_loss" });
        }
        Some(g)
    } else {
        None
    };
    Ok((out.into_data(), grad))
}

/// Attack objective and its input gradient at a single point.
pub fn attack_loss(model: &Model, x: &[f64], spec: &AttackSpec, label: Option<usize>) -> Result<(f64, Vec<f64>)> {
    let xs = Tensor::row(x.to_vec());
    let labels = label.map(|y| vec![y]);
    check_inputs(model, &xs, spec, labels.as_deref())?;
    let (v, g) = objective(model, &xs, spec, labels.as_deref(), true)?;
    Ok((v[0], g.expect("requested").into_data()))
}

/// Nearest point to `x_cand` in the `norm` ball of `radius` around `x0`,
/// intersected with `clip_box`.
pub fn project(x_cand: &[f64], x0: &[f64], radius: f64, norm: Norm, clip_box: Option<[f64; 2]>) -> Vec<f64> {
    let mut out = x_cand.to_vec();
    project_into(&mut out, x0, radius, norm, clip_box);
    out
}

fn project_into(x: &mut [f64], x0: &[f64], radius: f64, norm: Norm, clip_box: Option<[f64; 2]>) {
    let ball = |x: &mut [f64]| match norm {
        Norm::Linf => {
            for (v, c) in x.iter_mut().zip(x0) {
                *v = v.clamp(c - radius, c + radius);
            }
        }
        Norm::L2 => {
            let d = x.iter().zip(x0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            if d > radius {
                let s = if d > 0.0 { radius / d } else { 0.0 };
                for (v, c) in x.iter_mut().zip(x0) {
                    *v = c + (*v - c) * s;
                }
            }
        }
    };
    ball(x);
    if let Some([lo, hi]) = clip_box {
        for v in x.iter_mut() {
            *v = v.clamp(lo, hi);
        }
        ball(x);
    }
}

fn unit_step(g: &[f64], norm: Norm) -> Vec<f64> {
    match norm {
        Norm::Linf => g
            .iter()
            .map(|v| if *v > 0.0 { 1.0 } else if *v < 0.0 { -1.0 } else { 0.0 })
            .collect(),
        Norm::L2 => {
            let n = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                g.iter().map(|v| v / n).collect()
            } else {
                vec![0.0; g.len()]
            }
        }
    }
}

fn results(xs: &Tensor, adv: &Tensor, achieved: &[f64], clean: &[f64], norm: Norm) -> Vec<AttackResult> {
    (0..xs.rows())
        .map(|i| {
            let diff: Vec<f64> = adv.row_slice(i).iter().zip(xs.row_slice(i)).map(|(a, b)| a - b).collect();
            AttackResult {
                x_adv: adv.row_slice(i).to_vec(),
                achieved_loss: achieved[i],
                loss_delta: achieved[i] - clean[i],
                norm_used: norm.of(&diff),
            }
        })
        .collect()
}

fn step_rows(x: &mut Tensor, x0: &Tensor, grad: &Tensor, size: f64, spec: &AttackSpec) {
    let d = x.cols();
    for i in 0..x.rows() {
        let dir = unit_step(grad.row_slice(i), spec.norm);
        let row = &mut x.data_mut()[i * d..(i + 1) * d];
        for (v, s) in row.iter_mut().zip(&dir) {
            *v += size * s;
        }
        project_into(row, x0.row_slice(i), spec.radius, spec.norm, spec.clip_box);
    }
}

fn fgsm_rows(model: &Model, xs: &Tensor, spec: &AttackSpec, labels: Option<&[usize]>) -> Result<Vec<AttackResult>> {
    let (clean, grad) = objective(model, xs, spec, labels, true)?;
    let mut adv = xs.clone();
    step_rows(&mut adv, xs, &grad.expect("requested"), spec.radius, spec);
    let (mut achieved, _) = objective(model, &adv, spec, labels, false)?;
    // a step that lowers the objective is dropped
    let d = xs.cols();
    for i in 0..xs.rows() {
        if achieved[i] < clean[i] {
            achieved[i] = clean[i];
            adv.data_mut()[i * d..(i + 1) * d].copy_from_slice(xs.row_slice(i));
        }
    }
    Ok(results(xs, &adv, &achieved, &clean, spec.norm))
}

/// Steps from the clean input; the best iterate is returned per row. The
/// clean point and the FGSM point count as iterates.
fn pgd_rows(model: &Model, xs: &Tensor, spec: &AttackSpec, labels: Option<&[usize]>) -> Result<Vec<AttackResult>> {
    let size = spec.step_size();
    let mut x = xs.clone();
    let (clean, mut grad) = objective(model, &x, spec, labels, true)?;
    let mut best = clean.clone();
    let mut best_x = xs.clone();
    let d = xs.cols();
    let mut keep = |x: &Tensor, vals: &[f64]| {
        for i in 0..x.rows() {
            if vals[i] > best[i] {
                best[i] = vals[i];
                best_x.data_mut()[i * d..(i + 1) * d].copy_from_slice(x.row_slice(i));
            }
        }
    };
    let mut f = xs.clone();
    step_rows(&mut f, xs, grad.as_ref().expect("requested"), spec.radius, spec);
    keep(&f, &objective(model, &f, spec, labels, false)?.0);
    for step in 1..=spec.pgd_steps {
        step_rows(&mut x, xs, &grad.expect("requested"), size, spec);
        let last = step == spec.pgd_steps;
        let (vals, g) = objective(model, &x, spec, labels, !last)?;
        keep(&x, &vals);
        grad = g;
    }
    Ok(results(xs, &best_x, &best, &clean, spec.norm))
}

/// `rngs[i]` drives row `i`.
fn noise_rows(
    model: &Model,
    xs: &Tensor,
    spec: &AttackSpec,
    labels: Option<&[usize]>,
    rngs: &mut [RngStream],
) -> Result<Vec<AttackResult>> {
    let (n, d, m) = (xs.rows(), xs.cols(), spec.noise_samples);
    let (clean, _) = objective(model, xs, spec, labels, false)?;
    // candidate j of row i sits at row i * m + j
    let mut cand = Vec::with_capacity(n * m * d);
    for (i, rng) in rngs.iter_mut().enumerate() {
        for _ in 0..m {
            cand.extend(xs.row_slice(i).iter().map(|v| v + spec.radius * rng.standard_normal()));
        }
    }
    let cand = Tensor::new(n * m, d, cand)?;
    let cand_labels: Option<Vec<usize>> = labels.map(|l| l.iter().flat_map(|&y| std::iter::repeat_n(y, m)).collect());
    let (vals, _) = objective(model, &cand, spec, cand_labels.as_deref(), false)?;
    let mut adv = Tensor::zeros(n, d);
    let mut achieved = vec![0.0; n];
    for i in 0..n {
        let mut best = i * m;
        for j in i * m..(i + 1) * m {
            if vals[j] > vals[best] {
                best = j;
            }
        }
        achieved[i] = vals[best];
        adv.data_mut()[i * d..(i + 1) * d].copy_from_slice(cand.row_slice(best));
    }
    Ok(results(xs, &adv, &achieved, &clean, spec.norm))
}

fn single(xs: &[f64]) -> Tensor {
    Tensor::row(xs.to_vec())
}

pub fn fgsm(model: &Model, x: &[f64], spec: &AttackSpec, label: Option<usize>) -> Result<AttackResult> {
    let labels = label.map(|y| vec![y]);
    let xs = single(x);
    check_inputs(model, &xs, spec, labels.as_deref())?;
    Ok(fgsm_rows(model, &xs, spec, labels.as_deref())?.remove(0))
}

pub fn pgd(model: &Model, x: &[f64], spec: &AttackSpec, label: Option<usize>) -> Result<AttackResult> {
    let labels = label.map(|y| vec![y]);
    let xs = single(x);
    check_inputs(model, &xs, spec, labels.as_deref())?;
    Ok(pgd_rows(model, &xs, spec, labels.as_deref())?.remove(0))
}

/// Best of `noise_samples` Gaussian draws with standard deviation
/// `spec.radius` around `x`; no projection.
pub fn noise_attack(
    model: &Model,
    x: &[f64],
    spec: &AttackSpec,
    label: Option<usize>,
    rng: &mut RngStream,
) -> Result<AttackResult> {
    let labels = label.map(|y| vec![y]);
    let xs = single(x);
    check_inputs(model, &xs, spec, labels.as_deref())?;
    let mut owned = [rng.clone()];
    let out = noise_rows(model, &xs, spec, labels.as_deref(), &mut owned)?.remove(0);
    *rng = owned[0].clone();
    Ok(out)
}

const CHUNK: usize = 64;

/// Attack every row of `xs`. Rows are processed in parallel chunks; noise
/// row `i` draws from `rng.derive(key + i)` for a key taken from `rng`, so
/// the output does not depend on the chunking.
pub fn attack_batch(
    model: &Model,
    xs: &Tensor,
    spec: &AttackSpec,
    labels: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Vec<AttackResult>> {
    check_inputs(model, xs, spec, labels)?;
    if xs.rows() == 0 {
        return Ok(Vec::new());
    }
    let key = rng.next_u64();
    let starts: Vec<usize> = (0..xs.rows()).step_by(CHUNK).collect();
    let chunks: Vec<Result<Vec<AttackResult>>> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + CHUNK).min(xs.rows());
            let idx: Vec<usize> = (s..e).collect();
            let part = xs.select_rows(&idx);
            let lab = labels.map(|l| &l[s..e]);
            let out = match spec.method {
                AttackMethod::Fgsm => fgsm_rows(model, &part, spec, lab),
                AttackMethod::Pgd => pgd_rows(model, &part, spec, lab),
                AttackMethod::Noise => {
                    let mut rngs: Vec<RngStream> = idx.iter().map(|&i| rng_for(rng, key, i)).collect();
                    noise_rows(model, &part, spec, lab, &mut rngs)
                }
            };
            out.map_err(|e| Error::Sample {
                index: s,
                source: Box::new(e),
            })
        })
        .collect();
    let mut out = Vec::with_capacity(xs.rows());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

fn rng_for(rng: &RngStream, key: u64, i: usize) -> RngStream {
    rng.derive(key.wrapping_add(i as u64))
}

/// Attacks `xs` once per spec. The specs must differ only in radius and are
/// run in ascending radius order. For FGSM and PGD a row keeps the point
/// found at a smaller radius when that point scores higher, so the achieved
/// objective never decreases with the radius. Spec `j` draws noise from
/// `rng.derive(j)`. Results come back in the order of `specs`.
pub fn attack_nested(
    model: &Model,
    xs: &Tensor,
    specs: &[AttackSpec],
    labels: Option<&[usize]>,
    rng: &RngStream,
) -> Result<Vec<Vec<AttackResult>>> {
    if let Some(first) = specs.first() {
        let same = |s: &AttackSpec| AttackSpec { radius: first.radius, ..s.clone() } == *first;
        if !specs.iter().all(same) {
            return Err(Error::Contract("nested attack specs differ in more than the radius".into()));
        }
    }
    let mut order: Vec<usize> = (0..specs.len()).collect();
    order.sort_by(|&a, &b| specs[a].radius.total_cmp(&specs[b].radius));
    let mut out: Vec<Option<Vec<AttackResult>>> = vec![None; specs.len()];
    let mut prev: Option<Vec<AttackResult>> = None;
    for j in order {
        let spec = &specs[j];
        let mut res = attack_batch(model, xs, spec, labels, &mut rng.derive(j as u64))?;
        if spec.method != AttackMethod::Noise {
            if let Some(prev) = &prev {
                for (r, p) in res.iter_mut().zip(prev) {
                    if p.achieved_loss > r.achieved_loss {
                        *r = p.clone();
                    }
                }
            }
        }
        prev = Some(res.clone());
        out[j] = Some(res);
    }
    Ok(out.into_iter().map(|r| r.expect("every spec ran")).collect())
}

/// Adversarial copies of every row of `xs`, as one tensor.
pub fn perturb(
    model: &Model,
    xs: &Tensor,
    spec: &AttackSpec,
    labels: Option<&[usize]>,
    rng: &mut RngStream,
) -> Result<Tensor> {
    let res = attack_batch(model, xs, spec, labels, rng)?;
    let rows: Vec<Vec<f64>> = res.into_iter().map(|r| r.x_adv).collect();
    if rows.is_empty() {
        return Ok(Tensor::zeros(0, xs.cols()));
    }
    Tensor::from_rows(&rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RadiusMode {
    /// Smallest L2 ball containing the L∞ ball: `sqrt(D) ε`.
    Superset,
    /// Volume-equivalence radius `Γ(D/2 + 1)^{1/D} sqrt(π) ε`.
    Volume,
}

/// L2 radius corresponding to an L∞ radius in `dim` dimensions.
pub fn radius_convert(eps_inf: f64, dim: usize, mode: RadiusMode) -> Result<f64> {
    if !(eps_inf >= 0.0) || dim == 0 {
        return Err(Error::domain("radius_convert", "need eps_inf >= 0 and dim >= 1"));
    }
    let d = dim as f64;
    Ok(match mode {
        RadiusMode::Superset => d.sqrt() * eps_inf,
        RadiusMode::Volume => (lgamma(0.5 * d + 1.0)? / d).exp() * std::f64::consts::PI.sqrt() * eps_inf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelKind;

    fn random_model(kind: ModelKind, dim: usize, k: usize, seed: u64) -> Model {
        let mut m = Model::init(kind, dim, k, &[8], 3, 2, &mut RngStream::new(seed, 0)).unwrap();
        m.class_counts = (0..k).map(|c| 10.0 + c as f64).collect();
        m
    }

    #[test]
    fn projections() {
        assert_eq!(project(&[0.1, 0.2], &[0.0, 0.0], 1.0, Norm::L2, None), vec![0.1, 0.2]);
        let p = project(&[3.0, 4.0], &[0.0, 0.0], 1.0, Norm::L2, None);
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        assert_eq!(project(&[0.7, -0.2], &[0.0, 0.0], 0.5, Norm::Linf, None), vec![0.5, -0.2]);
        let b = project(&[3.0, -4.0], &[0.5, 0.5], 2.0, Norm::L2, Some([0.0, 1.0]));
        assert!(b.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(Norm::L2.of(&[b[0] - 0.5, b[1] - 0.5]) <= 2.0 + 1e-9);
    }

    #[test]
    fn projection_sweep() {
        let mut rng = RngStream::new(1, 1);
        for trial in 0..1000 {
            let d = 1 + rng.below(6);
            let x0: Vec<f64> = (0..d).map(|_| rng.uniform()).collect();
            let cand: Vec<f64> = (0..d).map(|_| 6.0 * rng.uniform() - 3.0).collect();
            let r = 2.0 * rng.uniform();
            let norm = if trial % 2 == 0 { Norm::L2 } else { Norm::Linf };
            let clip = (trial % 3 == 0).then_some([0.0, 1.0]);
            let p = project(&cand, &x0, r, norm, clip);
            let diff: Vec<f64> = p.iter().zip(&x0).map(|(a, b)| a - b).collect();
            assert!(norm.of(&diff) <= r + 1e-9);
            if clip.is_some() {
                assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn precision_target_value_and_gradient() {
        let m = random_model(ModelKind::Priornet, 3, 4, 2);
        let x = [0.3, -0.6, 1.1];
        let spec = AttackSpec::new(AttackMethod::Fgsm, LossTarget::Precision);
        let (v, g) = attack_loss(&m, &x, &spec, None).unwrap();
        let a0: f64 = m.alphas(&Tensor::row(x.to_vec())).unwrap().data().iter().sum();
        assert!((v - a0).abs() < 1e-12);
        for j in 0..3 {
            let mut hi = x;
            hi[j] += 1e-6;
            let mut lo = x;
            lo[j] -= 1e-6;
            let f = |p: [f64; 3]| attack_loss(&m, &p, &spec, None).unwrap().0;
            let num = (f(hi) - f(lo)) / 2e-6;
            assert!((num - g[j]).abs() / (num.abs() + g[j].abs()).max(1e-8) <= 1e-5);
        }
        let (vm, gm) = attack_loss(&m, &x, &spec.clone().with_direction(Direction::Minimize), None).unwrap();
        assert_eq!(vm, -v);
        assert!(gm.iter().zip(&g).all(|(a, b)| *a == -b));
    }

    #[test]
    fn flat_output_has_zero_diff_entropy() {
        let mut m = random_model(ModelKind::Priornet, 2, 2, 3);
        let zeros = m.params().iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        m.set_params(zeros);
        let spec = AttackSpec::new(AttackMethod::Pgd, LossTarget::DiffEntropy);
        assert!(attack_loss(&m, &[1.0, 2.0], &spec, None).unwrap().0.abs() < 1e-14);
    }

    #[test]
    fn cross_entropy_requires_label() {
        let m = random_model(ModelKind::Evnet, 2, 3, 4);
        let spec = AttackSpec::new(AttackMethod::Fgsm, LossTarget::CrossEntropy);
        assert!(matches!(attack_loss(&m, &[0.0, 0.0], &spec, None), Err(Error::Contract(_))));
        assert!(fgsm(&m, &[0.0, 0.0], &spec, Some(1)).is_ok());
    }

    #[test]
    fn zero_radius_is_identity() {
        let m = random_model(ModelKind::PostnetFlow, 3, 3, 5);
        let x = [0.2, 0.4, -0.1];
        let mut rng = RngStream::new(0, 0);
        for method in [AttackMethod::Fgsm, AttackMethod::Pgd, AttackMethod::Noise] {
            let spec = AttackSpec::new(method, LossTarget::DiffEntropy).with_radius(0.0);
            let r = match method {
                AttackMethod::Noise => noise_attack(&m, &x, &spec, None, &mut rng).unwrap(),
                AttackMethod::Fgsm => fgsm(&m, &x, &spec, None).unwrap(),
                AttackMethod::Pgd => pgd(&m, &x, &spec, None).unwrap(),
            };
            assert_eq!(r.x_adv, x.to_vec(), "{method:?}");
            assert_eq!(r.loss_delta, 0.0);
        }
    }

    #[test]
    fn fgsm_linear_case() {
        // one input, one-unit hidden layer, logits (w x, 0) under direct+exp:
        // precision = exp(w x) + 1 grows with x for w > 0
        let mut m = Model::init(ModelKind::Priornet, 1, 2, &[1], 1, 1, &mut RngStream::new(0, 0)).unwrap();
        m.set_params(vec![
            Tensor::scalar(1.0),
            Tensor::scalar(5.0),
            Tensor::row(vec![0.5, 0.0]),
            Tensor::row(vec![0.0, 0.0]),
        ]);
        let spec = AttackSpec::new(AttackMethod::Fgsm, LossTarget::Precision).with_radius(0.3);
        let r = fgsm(&m, &[0.2], &spec, None).unwrap();
        assert!((r.x_adv[0] - 0.5).abs() < 1e-15);
        let linf = spec.clone().with_norm(Norm::Linf);
        assert!((fgsm(&m, &[0.2], &linf, None).unwrap().x_adv[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constraints_hold_for_random_models() {
        let mut rng = RngStream::new(6, 0);
        for trial in 0..60 {
            let kind = ModelKind::ALL[trial % 5];
            let m = random_model(kind, 4, 3, trial as u64);
            let x: Vec<f64> = (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
            let norm = if trial % 2 == 0 { Norm::L2 } else { Norm::Linf };
            let r = 0.05 + rng.uniform();
            let clip = (trial % 3 == 0).then_some([-1.0, 1.0]);
            for method in [AttackMethod::Fgsm, AttackMethod::Pgd] {
                let spec = AttackSpec {
                    clip_box: clip,
                    ..AttackSpec::new(method, LossTarget::CrossEntropy).with_radius(r).with_norm(norm)
                };
                let res = match method {
                    AttackMethod::Fgsm => fgsm(&m, &x, &spec, Some(trial % 3)).unwrap(),
                    _ => pgd(&m, &x, &spec, Some(trial % 3)).unwrap(),
                };
                assert!(res.norm_used <= r + 1e-9);
                if clip.is_some() {
                    assert!(res.x_adv.iter().all(|v| (-1.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn pgd_finds_boundary_of_quadratic() {
        // EvNet with an identity-like encoder: precision grows with |x|^2 via
        // softplus of squared features is not expressible, so use the ball
        // geometry directly: maximise precision of a monotone model along x.
        let mut m = Model::init(ModelKind::Priornet, 2, 2, &[2], 1, 1, &mut RngStream::new(0, 0)).unwrap();
        m.set_params(vec![
            Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::row(vec![0.0, 0.0]),
            Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::row(vec![0.0, 0.0]),
        ]);
        let spec = AttackSpec::new(AttackMethod::Pgd, LossTarget::Precision).with_radius(1.0);
        let x0 = [0.1, 0.0];
        let p = pgd(&m, &x0, &spec, None).unwrap();
        let f = fgsm(&m, &x0, &AttackSpec { method: AttackMethod::Fgsm, ..spec.clone() }, None).unwrap();
        assert!((p.norm_used - 1.0).abs() < 1e-9);
        assert!(p.achieved_loss >= f.achieved_loss - 1e-12);
    }

    #[test]
    fn noise_picks_best_candidate() {
        let m = random_model(ModelKind::Evnet, 3, 3, 9);
        let x = [0.5, -0.5, 0.25];
        let spec = AttackSpec::new(AttackMethod::Noise, LossTarget::MutualInfo).with_radius(0.7);
        let mut r1 = RngStream::new(12, 3);
        let res = noise_attack(&m, &x, &spec, None, &mut r1).unwrap();
        // replay the same draws
        let mut r2 = RngStream::new(12, 3);
        let mut best = f64::NEG_INFINITY;
        for _ in 0..spec.noise_samples {
            let c: Vec<f64> = x.iter().map(|v| v + 0.7 * r2.standard_normal()).collect();
            best = best.max(attack_loss(&m, &c, &spec, None).unwrap().0);
        }
        assert_eq!(res.achieved_loss, best);
        let mut r3 = RngStream::new(12, 3);
        assert_eq!(noise_attack(&m, &x, &spec, None, &mut r3).unwrap(), res);
    }

    #[test]
    fn batch_matches_single_row_attacks() {
        let m = random_model(ModelKind::PostnetFlow, 3, 3, 10);
        let mut rng = RngStream::new(13, 0);
        let n = 150;
        let xs = Tensor::new(n, 3, (0..3 * n).map(|_| 2.0 * rng.uniform() - 1.0).collect()).unwrap();
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        for method in [AttackMethod::Fgsm, AttackMethod::Pgd] {
            let spec = AttackSpec::new(method, LossTarget::CrossEntropy).with_radius(0.4);
            let batch = attack_batch(&m, &xs, &spec, Some(&labels), &mut RngStream::new(0, 0)).unwrap();
            assert_eq!(batch.len(), n);
            for i in [0, 63, 64, 149] {
                let one = match method {
                    AttackMethod::Fgsm => fgsm(&m, xs.row_slice(i), &spec, Some(labels[i])).unwrap(),
                    _ => pgd(&m, xs.row_slice(i), &spec, Some(labels[i])).unwrap(),
                };
                assert_eq!(batch[i], one);
            }
        }
        let spec = AttackSpec::new(AttackMethod::Noise, LossTarget::DiffEntropy).with_radius(0.4);
        let a = attack_batch(&m, &xs, &spec, None, &mut RngStream::new(5, 0)).unwrap();
        let b = attack_batch(&m, &xs, &spec, None, &mut RngStream::new(5, 0)).unwrap();
        assert_eq!(a, b);
        let empty = attack_batch(&m, &Tensor::zeros(0, 3), &spec, None, &mut RngStream::new(5, 0)).unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn radius_conversions() {
        assert_eq!(radius_convert(1.0, 784, RadiusMode::Superset).unwrap(), 28.0);
        let v = radius_convert(1.0, 784, RadiusMode::Volume).unwrap();
        assert!((v - 21.391_132_182_553_948).abs() < 1e-9, "{v}");
        assert_eq!(radius_convert(0.0, 5, RadiusMode::Volume).unwrap(), 0.0);
        // D = 2: Γ(2) = 1
        let r2 = radius_convert(1.0, 2, RadiusMode::Volume).unwrap();
        assert!((r2 - std::f64::consts::PI.sqrt()).abs() < 1e-12);
    }
}
