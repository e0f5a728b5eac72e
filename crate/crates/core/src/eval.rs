//! Ranking metrics, the three binary evaluation tasks and guaranteed
//! performance from certified bounds.
//!
//! Label 1 is always the positive, high-uncertainty side: wrongly
//! classified, perturbed or out-of-distribution.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_batch, AttackMethod, AttackSpec, LossTarget, Norm};
use crate::autodiff::Tensor;
use crate::data::Dataset;
use crate::dirichlet::DirichletParams;
use crate::error::{Error, Result};
use crate::models::Model;
use crate::numerics::RngStream;
use crate::smoothing::CertifiedScore;

/// Uncertainty measure used as a task score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    DiffEntropy,
    MutualInfo,
    /// Scored as `-α₀` so that higher means more uncertain.
    Precision,
}

impl Measure {
    pub const ALL: [Measure; 3] = [Measure::DiffEntropy, Measure::MutualInfo, Measure::Precision];

    pub fn name(self) -> &'static str {
        match self {
            Measure::DiffEntropy => "diff_entropy",
            Measure::MutualInfo => "mutual_info",
            Measure::Precision => "precision",
        }
    }

    /// Uncertainty score of one concentration vector.
    pub fn score(self, alpha: &[f64]) -> Result<f64> {
        let d = DirichletParams::new(alpha.to_vec())?;
        Ok(match self {
            Measure::DiffEntropy => d.differential_entropy(),
            Measure::MutualInfo => d.mutual_information(),
            Measure::Precision => -d.precision(),
        })
    }

    /// Score of every row of an `n x K` concentration tensor.
    pub fn scores(self, alphas: &Tensor) -> Result<Vec<f64>> {
        (0..alphas.rows())
            .map(|i| {
                self.score(alphas.row_slice(i)).map_err(|e| Error::Sample {
                    index: i,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Correct (0) vs wrong (1) predictions.
    Confidence,
    /// Clean (0) vs attacked (1) copies.
    AttackDetect,
    /// In-distribution (0) vs out-of-distribution (1).
    OodDetect,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Confidence, TaskKind::AttackDetect, TaskKind::OodDetect];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Confidence => "confidence",
            TaskKind::AttackDetect => "attack_detect",
            TaskKind::OodDetect => "ood_detect",
        }
    }
}

/// Which side of an OOD-detection task is attacked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    #[default]
    IdAttack,
    OodAttack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Lowest,
    Highest,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BinaryTask {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl BinaryTask {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::shape("binary_task", format!("{} scores, {} labels", scores.len(), labels.len())));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Metric("labels must be 0 or 1".into()));
        }
        Ok(Self { scores, labels })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    fn counts(&self) -> Result<(usize, usize)> {
        if self.scores.iter().any(|s| s.is_nan()) {
            return Err(Error::Metric("NaN score".into()));
        }
        let pos = self.labels.iter().filter(|&&l| l == 1).count();
        let neg = self.labels.len() - pos;
        if pos == 0 || neg == 0 {
            return Err(Error::Metric(format!("need both labels, got {pos} positive and {neg} negative")));
        }
        Ok((pos, neg))
    }

    /// `(positives, negatives)` per distinct score, highest score first.
    fn groups(&self) -> Vec<(usize, usize)> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out: Vec<(usize, usize)> = Vec::new();
        let mut prev: Option<f64> = None;
        for i in order {
            let s = self.scores[i];
            if prev != Some(s) {
                out.push((0, 0));
                prev = Some(s);
            }
            let g = out.last_mut().expect("pushed");
            if self.labels[i] == 1 {
                g.0 += 1;
            } else {
                g.1 += 1;
            }
        }
        out
    }
}

/// Average precision in `[0, 100]`.
///
/// Within a group of tied scores holding `p` positives and `n` negatives the
/// positives are spread evenly: the `j`-th sits at the fractional rank
/// `r + j (p + n) / p`, where `r` items score higher. Without ties this is
/// the usual average precision; a fully tied task scores the positive
/// prevalence, and raising a negative or lowering a positive never
/// increases the result.
pub fn auc_pr(task: &BinaryTask) -> Result<f64> {
    let (pos, _) = task.counts()?;
    let (mut tp, mut r, mut ap) = (0u128, 0u128, 0.0);
    for (p, n) in task.groups() {
        let (p, m) = (p as u128, (p + n) as u128);
        for j in 1..=p {
            // (tp + j) / (r + j m / p) as one rounding
            ap += (p * (tp + j)) as f64 / (p * r + j * m) as f64;
        }
        tp += p;
        r += m;
    }
    Ok(100.0 * ap / pos as f64)
}

/// Area under the ROC curve in `[0, 100]`, ties counted as one half.
pub fn auc_roc(task: &BinaryTask) -> Result<f64> {
    let (pos, neg) = task.counts()?;
    // walk groups from the lowest score up
    let (mut below_neg, mut u) = (0usize, 0.0);
    for (p, n) in task.groups().into_iter().rev() {
        u += p as f64 * (below_neg as f64 + 0.5 * n as f64);
        below_neg += n;
    }
    Ok(100.0 * u / (pos as f64 * neg as f64))
}

/// Percentage of matching entries.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("accuracy", format!("{} predictions, {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Test accuracy of `model` on `ds`, optionally under an attack.
pub fn model_accuracy(model: &Model, ds: &Dataset, attack: Option<&AttackSpec>, rng: &mut RngStream) -> Result<f64> {
    let x = inputs(model, ds, attack, rng)?;
    accuracy(&model.predict(&x)?, &ds.labels)
}

/// AUC-PR after every item takes the bound least (`Lowest`) or most
/// (`Highest`) favourable to the ranking.
pub fn guaranteed_performance(bounds: &[CertifiedScore], labels: &[u8], side: Side) -> Result<f64> {
    if bounds.len() != labels.len() {
        return Err(Error::shape("guaranteed_performance", format!("{} bounds, {} labels", bounds.len(), labels.len())));
    }
    let scores = bounds
        .iter()
        .zip(labels)
        .map(|(b, &l)| match (side, l) {
            (Side::Lowest, 0) | (Side::Highest, 1) => b.m_upper,
            _ => b.m_lower,
        })
        .collect();
    auc_pr(&BinaryTask::new(scores, labels.to_vec())?)
}

/// Empirical AUC-PR on the smoothed medians.
pub fn empirical_performance(bounds: &[CertifiedScore], labels: &[u8]) -> Result<f64> {
    auc_pr(&BinaryTask::new(bounds.iter().map(|b| b.m_median).collect(), labels.to_vec())?)
}

fn inputs(model: &Model, ds: &Dataset, attack: Option<&AttackSpec>, rng: &mut RngStream) -> Result<Tensor> {
    match attack {
        None => Ok(ds.features.clone()),
        Some(spec) => {
            let labels = (spec.loss_target == LossTarget::CrossEntropy).then_some(ds.labels.as_slice());
            let rows: Vec<Vec<f64>> = attack_batch(model, &ds.features, spec, labels, rng)?
                .into_iter()
                .map(|r| r.x_adv)
                .collect();
            if rows.is_empty() {
                return Ok(Tensor::zeros(0, ds.dim()));
            }
            Tensor::from_rows(&rows)
        }
    }
}

/// Concentrations and binary labels of a task, before a measure is chosen.
#[derive(Debug, Clone)]
pub struct TaskInputs {
    pub alphas: Tensor,
    pub labels: Vec<u8>,
}

impl TaskInputs {
    pub fn task(&self, measure: Measure) -> Result<BinaryTask> {
        BinaryTask::new(measure.scores(&self.alphas)?, self.labels.clone())
    }
}

/// Inputs and binary labels of a task after the attack, if any.
#[derive(Debug, Clone)]
pub struct TaskPoints {
    pub x: Tensor,
    pub labels: Vec<u8>,
}

/// Applies the attack for one task. Confidence labels compare the model's
/// prediction at the (attacked) input with the true label.
#[allow(clippy::too_many_arguments)]
pub fn task_points(
    kind: TaskKind,
    model: &Model,
    clean: &Dataset,
    aux: Option<&Dataset>,
    attack: Option<&AttackSpec>,
    scenario: Scenario,
    rng: &mut RngStream,
) -> Result<TaskPoints> {
    let attacked = match (kind, scenario) {
        (TaskKind::OodDetect, Scenario::OodAttack) => {
            let ood = aux.ok_or_else(|| Error::Contract("OOD detection needs an OOD set".into()))?;
            if attack.is_some_and(|s| s.loss_target == LossTarget::CrossEntropy) {
                return Err(Error::Contract("OOD inputs have no labels to attack".into()));
            }
            ood
        }
        _ => clean,
    };
    let adv = match attack {
        Some(spec) => Some(inputs(model, attacked, Some(spec), rng)?),
        None => None,
    };
    task_points_from(kind, model, clean, aux, adv.as_ref(), scenario)
}

/// Like [`task_points`] with the attack already applied. `adv` holds the
/// attacked rows of `clean`, or of `aux` for OOD detection under
/// [`Scenario::OodAttack`].
pub fn task_points_from(
    kind: TaskKind,
    model: &Model,
    clean: &Dataset,
    aux: Option<&Dataset>,
    adv: Option<&Tensor>,
    scenario: Scenario,
) -> Result<TaskPoints> {
    let stack = |a: Tensor, b: Tensor| -> Result<TaskPoints> {
        let mut labels = vec![0u8; a.rows()];
        labels.extend(std::iter::repeat_n(1u8, b.rows()));
        Ok(TaskPoints {
            x: Tensor::vstack(&[&a, &b])?,
            labels,
        })
    };
    let or_clean = |ds: &Dataset| adv.cloned().unwrap_or_else(|| ds.features.clone());
    match kind {
        TaskKind::Confidence => {
            let x = or_clean(clean);
            let labels = model
                .predict(&x)?
                .iter()
                .zip(&clean.labels)
                .map(|(p, y)| u8::from(p != y))
                .collect();
            Ok(TaskPoints { x, labels })
        }
        TaskKind::AttackDetect => {
            let adv = adv.ok_or_else(|| Error::Contract("attack detection needs an attack".into()))?;
            stack(clean.features.clone(), adv.clone())
        }
        TaskKind::OodDetect => {
            let ood = aux.ok_or_else(|| Error::Contract("OOD detection needs an OOD set".into()))?;
            match scenario {
                Scenario::IdAttack => stack(or_clean(clean), ood.features.clone()),
                Scenario::OodAttack => stack(clean.features.clone(), or_clean(ood)),
            }
        }
    }
}

/// Runs the model (and the attack, if any) for one task.
#[allow(clippy::too_many_arguments)]
pub fn task_inputs(
    kind: TaskKind,
    model: &Model,
    clean: &Dataset,
    aux: Option<&Dataset>,
    attack: Option<&AttackSpec>,
    scenario: Scenario,
    rng: &mut RngStream,
) -> Result<TaskInputs> {
    let p = task_points(kind, model, clean, aux, attack, scenario, rng)?;
    Ok(TaskInputs {
        alphas: model.alphas(&p.x)?,
        labels: p.labels,
    })
}

#[allow(clippy::too_many_arguments)]
pub fn build_task(
    kind: TaskKind,
    model: &Model,
    clean: &Dataset,
    aux: Option<&Dataset>,
    attack: Option<&AttackSpec>,
    scenario: Scenario,
    measure: Measure,
    rng: &mut RngStream,
) -> Result<BinaryTask> {
    task_inputs(kind, model, clean, aux, attack, scenario, rng)?.task(measure)
}

/// One cell of a sweep. `error` is set when the cell failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub task: TaskKind,
    pub measure: Measure,
    pub method: AttackMethod,
    pub loss_target: LossTarget,
    pub norm: Norm,
    pub radius: f64,
    pub seed: u64,
    pub auc_pr: Option<f64>,
    pub auc_roc: Option<f64>,
    pub error: Option<String>,
}

/// Evaluates every `(seed, attack, task, measure)` combination. Each
/// `(seed, attack, task)` cell runs on its own random stream and in
/// parallel; rows come back in grid order.
pub fn measure_sweep(
    models: &[(u64, &Model)],
    clean: &Dataset,
    aux: Option<&Dataset>,
    grid: &[AttackSpec],
    scenario: Scenario,
    tasks: &[TaskKind],
    measures: &[Measure],
) -> Vec<SweepRow> {
    let mut cells = Vec::new();
    for (s, &(seed, model)) in models.iter().enumerate() {
        for (a, spec) in grid.iter().enumerate() {
            for (t, &task) in tasks.iter().enumerate() {
                cells.push((s, seed, model, a, spec, t, task));
            }
        }
    }
    cells
        .par_iter()
        .flat_map_iter(|&(s, seed, model, a, spec, t, task)| {
            let label = ((s * grid.len() + a) * tasks.len() + t) as u64;
            let mut rng = RngStream::new(seed, 3).derive(label);
            let prepared = task_inputs(task, model, clean, aux, Some(spec), scenario, &mut rng);
            measures.iter().map(move |&measure| {
                let metrics = prepared.as_ref().map_err(|e| e.to_string()).and_then(|p| {
                    let bt = p.task(measure).map_err(|e| e.to_string())?;
                    Ok((auc_pr(&bt).map_err(|e| e.to_string())?, auc_roc(&bt).map_err(|e| e.to_string())?))
                });
                let (auc_pr, auc_roc, error) = match metrics {
                    Ok((p, r)) => (Some(p), Some(r), None),
                    Err(e) => (None, None, Some(e)),
                };
                SweepRow {
                    task,
                    measure,
                    method: spec.method,
                    loss_target: spec.loss_target,
                    norm: spec.norm,
                    radius: spec.radius,
                    seed,
                    auc_pr,
                    auc_roc,
                    error,
                }
            })
            .collect::<Vec<_>>()
        })
        .collect()
}

/// Mean and sample standard deviation over seeds of one sweep cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub task: TaskKind,
    pub measure: Measure,
    pub method: AttackMethod,
    pub loss_target: LossTarget,
    pub norm: Norm,
    pub radius: f64,
    pub n_seeds: usize,
    pub auc_pr_mean: Option<f64>,
    pub auc_pr_std: Option<f64>,
    pub auc_roc_mean: Option<f64>,
    pub auc_roc_std: Option<f64>,
}

pub fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (Some(mean), std)
}

/// Groups rows that differ only in seed; failed rows are skipped.
pub fn summarize(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut out: Vec<(SweepSummary, Vec<f64>, Vec<f64>)> = Vec::new();
    for r in rows {
        let pos = out.iter().position(|(s, _, _)| {
            s.task == r.task
                && s.measure == r.measure
                && s.method == r.method
                && s.loss_target == r.loss_target
                && s.norm == r.norm
                && s.radius.total_cmp(&r.radius) == Ordering::Equal
        });
        let i = pos.unwrap_or_else(|| {
            out.push((
                SweepSummary {
                    task: r.task,
                    measure: r.measure,
                    method: r.method,
                    loss_target: r.loss_target,
                    norm: r.norm,
                    radius: r.radius,
                    n_seeds: 0,
                    auc_pr_mean: None,
                    auc_pr_std: None,
                    auc_roc_mean: None,
                    auc_roc_std: None,
                },
                Vec::new(),
                Vec::new(),
            ));
            out.len() - 1
        });
        if let (Some(p), Some(q)) = (r.auc_pr, r.auc_roc) {
            out[i].0.n_seeds += 1;
            out[i].1.push(p);
            out[i].2.push(q);
        }
    }
    out.into_iter()
        .map(|(mut s, pr, roc)| {
            (s.auc_pr_mean, s.auc_pr_std) = mean_std(&pr);
            (s.auc_roc_mean, s.auc_roc_std) = mean_std(&roc);
            s
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::models::{train, ModelKind, TrainConfig};

    fn task(scores: &[f64], labels: &[u8]) -> BinaryTask {
        BinaryTask::new(scores.to_vec(), labels.to_vec()).unwrap()
    }

    /// Per-positive evaluation with the tie convention spelled out item by
    /// item; reduces to textbook AP without ties.
    fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let mut ap = 0.0;
        for i in (0..scores.len()).filter(|&i| labels[i] == 1) {
            let above = (0..scores.len()).filter(|&k| scores[k] > scores[i]).count() as f64;
            let tp_above = (0..scores.len()).filter(|&k| scores[k] > scores[i] && labels[k] == 1).count() as f64;
            let tied: Vec<usize> = (0..scores.len()).filter(|&k| scores[k] == scores[i]).collect();
            let p = tied.iter().filter(|&&k| labels[k] == 1).count() as f64;
            let m = tied.len() as f64;
            // this positive takes the average slot among the p tied ones
            let slots: f64 = (1..=p as usize).map(|j| (tp_above + j as f64) / (above + j as f64 * m / p)).sum();
            ap += slots / p;
        }
        100.0 * ap / pos
    }

    fn strict_ap(scores: &[f64], labels: &[u8]) -> f64 {
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let (mut tp, mut ap) = (0.0, 0.0);
        for (rank, &i) in order.iter().enumerate() {
            if labels[i] == 1 {
                tp += 1.0;
                ap += tp / (rank + 1) as f64;
            }
        }
        100.0 * ap / pos
    }

    fn roc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
        let (mut u, mut pairs) = (0.0, 0.0);
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    u += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        100.0 * u / pairs
    }

    #[test]
    fn metric_examples() {
        let t = task(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]);
        assert!((auc_pr(&t).unwrap() - 250.0 / 3.0).abs() < 1e-12);
        let perfect = task(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]);
        assert_eq!(auc_pr(&perfect).unwrap(), 100.0);
        assert_eq!(auc_roc(&perfect).unwrap(), 100.0);
        let flat = task(&[1.0; 6], &[0, 1, 0, 1, 0, 1]);
        assert_eq!(auc_roc(&flat).unwrap(), 50.0);
        assert_eq!(auc_pr(&flat).unwrap(), 50.0);
        assert!(matches!(auc_pr(&task(&[1.0, 2.0], &[1, 1])), Err(Error::Metric(_))));
        assert!(matches!(auc_roc(&task(&[1.0, 2.0], &[0, 0])), Err(Error::Metric(_))));
        assert!(auc_pr(&task(&[f64::NAN, 2.0], &[0, 1])).is_err());
        // clean/attacked pairs tied pairwise
        let pairs = task(&[3.0, 3.0, 2.0, 2.0, 1.0, 1.0], &[0, 1, 0, 1, 0, 1]);
        assert_eq!(auc_pr(&pairs).unwrap(), 50.0);
    }

    #[test]
    fn tie_moves_never_help() {
        // group-end precision would score the second ranking higher
        let a = task(&[3.0, 1.0, 3.0], &[0, 1, 1]);
        let b = task(&[3.0, 1.0, 1.0], &[0, 1, 1]);
        assert!(auc_pr(&b).unwrap() <= auc_pr(&a).unwrap());
        assert_eq!(auc_pr(&b).unwrap(), strict_ap(&[3.0, 2.0, 1.0], &[0, 1, 1]));
        let mut rng = RngStream::new(12, 0);
        for _ in 0..20_000 {
            let n = 2 + rng.below(8);
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.below(4) as f64).collect();
            let mut worse = scores.clone();
            let i = rng.below(n);
            let step = 1.0 + rng.below(3) as f64;
            worse[i] += if labels[i] == 0 { step } else { -step };
            assert!(auc_pr(&task(&worse, &labels)).unwrap() <= auc_pr(&task(&scores, &labels)).unwrap());
        }
    }

    #[test]
    fn distinct_scores_give_textbook_ap() {
        let mut rng = RngStream::new(13, 0);
        for _ in 0..500 {
            let n = 2 + rng.below(40);
            let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
            let labels: Vec<u8> = (0..n).map(|i| u8::from(i % 3 == 0)).collect();
            let got = auc_pr(&task(&scores, &labels)).unwrap();
            assert!((got - strict_ap(&scores, &labels)).abs() < 1e-9);
        }
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[0, 1, 2, 3], &[0, 1, 2, 0]).unwrap(), 75.0);
        assert!(accuracy(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn random_scores_give_prevalence() {
        let mut rng = RngStream::new(8, 0);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.uniform()).collect();
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let ap = auc_pr(&task(&scores, &labels)).unwrap();
        assert!((ap - 50.0).abs() <= 3.0, "{ap}");
    }

    #[test]
    fn infinite_scores_rank_at_the_ends() {
        let t = task(&[f64::INFINITY, 5.0, f64::NEG_INFINITY, f64::INFINITY], &[1, 0, 0, 0]);
        assert_eq!(auc_roc(&t).unwrap(), roc_oracle(&t.scores, &t.labels));
        assert_eq!(auc_pr(&t).unwrap(), ap_oracle(&t.scores, &t.labels));
        assert_eq!(auc_pr(&t).unwrap(), 50.0);
    }

    #[test]
    fn exhaustive_small_oracle() {
        let alphabet = [0.0, 0.5, 1.0];
        for n in 2..=8usize {
            let total = 3usize.pow(n as u32) * (1 << n);
            for code in 0..total {
                let (mut c, mut scores, mut labels) = (code, Vec::new(), Vec::new());
                for _ in 0..n {
                    scores.push(alphabet[c % 3]);
                    c /= 3;
                }
                for _ in 0..n {
                    labels.push((c % 2) as u8);
                    c /= 2;
                }
                let t = task(&scores, &labels);
                if !labels.contains(&0) || !labels.contains(&1) {
                    assert!(auc_pr(&t).is_err());
                    continue;
                }
                assert!((auc_pr(&t).unwrap() - ap_oracle(&scores, &labels)).abs() < 1e-9);
                assert!((auc_roc(&t).unwrap() - roc_oracle(&scores, &labels)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn monotone_transform_invariance() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..30).map(|_| (rng.uniform() * 5.0).round()).collect();
            let labels: Vec<u8> = (0..30).map(|i| u8::from(i % 3 == 0)).collect();
            let warped: Vec<f64> = scores.iter().map(|s| (s * 0.7).exp() - 3.0).collect();
            let (a, b) = (task(&scores, &labels), task(&warped, &labels));
            assert_eq!(auc_pr(&a).unwrap(), auc_pr(&b).unwrap());
            assert_eq!(auc_roc(&a).unwrap(), auc_roc(&b).unwrap());
        }
    }

    #[test]
    fn guaranteed_sandwich() {
        let mut rng = RngStream::new(10, 0);
        for _ in 0..200 {
            let n = 4 + rng.below(20);
            let mut bounds = Vec::new();
            let mut labels = Vec::new();
            for i in 0..n {
                let mid = rng.uniform();
                let lo = if rng.uniform() < 0.1 { f64::NEG_INFINITY } else { mid - 0.3 * rng.uniform() };
                let hi = if rng.uniform() < 0.1 { f64::INFINITY } else { mid + 0.3 * rng.uniform() };
                bounds.push(CertifiedScore {
                    m_lower: lo,
                    m_median: mid,
                    m_upper: hi,
                    radius: 0.1,
                });
                labels.push(u8::from(i % 2 == 0));
            }
            let lo = guaranteed_performance(&bounds, &labels, Side::Lowest).unwrap();
            let emp = empirical_performance(&bounds, &labels).unwrap();
            let hi = guaranteed_performance(&bounds, &labels, Side::Highest).unwrap();
            assert!(lo <= emp && emp <= hi, "{lo} {emp} {hi}");
        }
        let degenerate: Vec<CertifiedScore> = [0.2, 0.9, 0.4]
            .iter()
            .map(|&v| CertifiedScore {
                m_lower: v,
                m_median: v,
                m_upper: v,
                radius: 0.0,
            })
            .collect();
        let l = [0u8, 1, 0];
        let e = empirical_performance(&degenerate, &l).unwrap();
        assert_eq!(guaranteed_performance(&degenerate, &l, Side::Lowest).unwrap(), e);
        assert_eq!(guaranteed_performance(&degenerate, &l, Side::Highest).unwrap(), e);
    }

    fn blob_model() -> (Model, Dataset, Dataset) {
        let (ds, ood) = synth_blobs(3, 2, 60, 6.0, 30.0, 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 40,
            hidden_dims: vec![16],
            latent_dim: 2,
            flow_depth: 2,
            learning_rate: 5e-3,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let (m, _) = train(ModelKind::PostnetFlow, &ds, &ds, None, &cfg).unwrap();
        (m, ds, ood)
    }

    #[test]
    fn tasks_on_blobs() {
        let (m, ds, ood) = blob_model();
        let mut rng = RngStream::new(0, 3);
        let t = build_task(TaskKind::OodDetect, &m, &ds, Some(&ood), None, Scenario::IdAttack, Measure::DiffEntropy, &mut rng)
            .unwrap();
        assert!(auc_pr(&t).unwrap() >= 95.0);
        let zero = AttackSpec::new(AttackMethod::Pgd, LossTarget::DiffEntropy).with_radius(0.0);
        let t = build_task(TaskKind::AttackDetect, &m, &ds, None, Some(&zero), Scenario::IdAttack, Measure::MutualInfo, &mut rng)
            .unwrap();
        assert_eq!(t.len(), 2 * ds.len());
        assert_eq!(auc_pr(&t).unwrap(), 50.0);
        assert!(matches!(
            build_task(TaskKind::OodDetect, &m, &ds, None, None, Scenario::IdAttack, Measure::DiffEntropy, &mut rng),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            build_task(TaskKind::AttackDetect, &m, &ds, None, None, Scenario::IdAttack, Measure::DiffEntropy, &mut rng),
            Err(Error::Contract(_))
        ));
        let conf = build_task(TaskKind::Confidence, &m, &ds, None, None, Scenario::IdAttack, Measure::Precision, &mut rng).unwrap();
        if !conf.labels.contains(&1) {
            assert!(matches!(auc_pr(&conf), Err(Error::Metric(_))));
        }
    }

    #[test]
    fn sweep_shape_and_radius_zero() {
        let (m, ds, ood) = blob_model();
        let grid: Vec<AttackSpec> = [0.0, 0.5]
            .iter()
            .map(|&r| AttackSpec::new(AttackMethod::Pgd, LossTarget::DiffEntropy).with_radius(r))
            .collect();
        let tasks = [TaskKind::OodDetect, TaskKind::AttackDetect];
        let measures = [Measure::DiffEntropy, Measure::Precision];
        let rows = measure_sweep(&[(0, &m), (1, &m)], &ds, Some(&ood), &grid, Scenario::IdAttack, &tasks, &measures);
        assert_eq!(rows.len(), 2 * 2 * 2 * 2);
        let clean = build_task(TaskKind::OodDetect, &m, &ds, Some(&ood), None, Scenario::IdAttack, Measure::DiffEntropy, &mut RngStream::new(0, 3))
            .unwrap();
        let r0 = rows
            .iter()
            .find(|r| r.radius == 0.0 && r.task == TaskKind::OodDetect && r.measure == Measure::DiffEntropy)
            .unwrap();
        assert_eq!(r0.auc_pr, Some(auc_pr(&clean).unwrap()));
        let again = measure_sweep(&[(0, &m), (1, &m)], &ds, Some(&ood), &grid, Scenario::IdAttack, &tasks, &measures);
        assert_eq!(rows, again);
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 8);
        assert!(summary.iter().all(|s| s.n_seeds == 2 && s.auc_pr_std.is_some()));
    }
}
