//! Training objectives. Each takes an `n x K` concentration variable and
//! returns a scalar mean over the batch.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tensor, Var};
use crate::dirichlet::{batch, clamp_soft_label};
use crate::error::{Error, Result};

/// Argument order of the PriorNet KL terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(Dir(target) || q)`
    #[default]
    AsWritten,
    /// `KL(q || Dir(target))`
    Reverse,
}

/// Target concentrations: `id_true` on the label, `id_other` elsewhere, and a
/// flat `ood` value for out-of-distribution inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorTargets {
    pub id_true: f64,
    pub id_other: f64,
    pub ood: f64,
}

impl Default for PriorTargets {
    fn default() -> Self {
        Self {
            id_true: 10.0,
            id_other: 1.0,
            ood: 1.0,
        }
    }
}

/// `mean_i (E[CE(p, y_i)] - λ H(Dir(α_i)))`.
pub fn loss_postnet<'t>(alpha: Var<'t>, labels: &[usize], lambda: f64) -> Var<'t> {
    let ce = batch::expected_cross_entropy(alpha, labels);
    if lambda == 0.0 {
        return ce.mean();
    }
    (ce - batch::differential_entropy(alpha).scale(lambda)).mean()
}

fn kl_term<'t>(alpha: Var<'t>, target: Var<'t>, direction: KlDirection) -> Var<'t> {
    match direction {
        KlDirection::AsWritten => batch::kl(target, alpha),
        KlDirection::Reverse => batch::kl(alpha, target),
    }
}

/// Mean KL to the per-sample ID target plus `ood_weight` times the mean KL to
/// the flat OOD target. The two means are taken separately.
pub fn loss_priornet<'t>(
    alpha_id: Var<'t>,
    labels: &[usize],
    alpha_ood: Option<Var<'t>>,
    targets: PriorTargets,
    ood_weight: f64,
    direction: KlDirection,
) -> Result<Var<'t>> {
    let alpha_ood =
        alpha_ood.ok_or_else(|| Error::Contract("PriorNet requires OOD data for training".into()))?;
    let tape = alpha_id.tape();
    let [n, k] = alpha_id.shape();
    let mut target = Tensor::filled(n, k, targets.id_other);
    for (i, &y) in labels.iter().enumerate() {
        target.data_mut()[i * k + y] = targets.id_true;
    }
    let id = kl_term(alpha_id, tape.constant(target), direction).mean();
    let [m, k_ood] = alpha_ood.shape();
    let flat = tape.constant(Tensor::filled(m, k_ood, targets.ood));
    let ood = kl_term(alpha_ood, flat, direction).mean();
    Ok(id + ood.scale(ood_weight))
}

/// `-(1/n) Σ_i Σ_m ln Dir(π_im | α_i)`; each of the `M` soft-label tensors is
/// `n x K` and gets clamped and renormalised row-wise first.
pub fn loss_ddnet<'t>(alpha: Var<'t>, soft_labels: &[Tensor]) -> Result<Var<'t>> {
    let tape = alpha.tape();
    let mut total: Option<Var<'t>> = None;
    for pi in soft_labels {
        if pi.shape() != alpha.shape() {
            return Err(Error::shape(
                "loss_ddnet",
                format!("soft labels {:?} vs alpha {:?}", pi.shape(), alpha.shape()),
            ));
        }
        let rows: Vec<Vec<f64>> = pi.row_vecs().iter().map(|r| clamp_soft_label(r)).collect();
        let p = tape.constant(Tensor::from_rows(&rows)?);
        let ll = batch::log_pdf(alpha, p);
        total = Some(match total {
            Some(acc) => acc + ll,
            None => ll,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("no soft labels".into()))?;
    Ok(-total.mean())
}

/// `mean_i E ||e_{y_i} - p||²` in closed form.
pub fn loss_evnet<'t>(alpha: Var<'t>, labels: &[usize]) -> Var<'t> {
    batch::expected_squared_error(alpha, labels).mean()
}
