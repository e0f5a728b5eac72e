use std::cell::RefCell;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{loss_ddnet, loss_evnet, loss_postnet, loss_priornet, KlDirection, PriorTargets};
use super::mlp::{self, MlpConfig};
use super::{Model, ModelKind};
use crate::attacks::{self, AttackSpec};
use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Validation loss is checked every `eval_every` epochs.
    pub eval_every: usize,
    /// Evaluation rounds without improvement before stopping.
    pub patience: usize,
    /// PostNet weight on the entropy regulariser.
    pub entropy_reg: f64,
    /// PriorNet weight on the OOD term.
    pub ood_weight: f64,
    pub kl_direction: KlDirection,
    pub alpha_id_target: f64,
    pub alpha_ood_target: f64,
    /// DDNet ensemble size.
    pub ensemble_size: usize,
    pub hidden_dims: Vec<usize>,
    pub latent_dim: usize,
    pub flow_depth: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 64,
            max_epochs: 1000,
            eval_every: 2,
            patience: 10,
            entropy_reg: 1e-5,
            ood_weight: 1.0,
            kl_direction: KlDirection::AsWritten,
            alpha_id_target: 10.0,
            alpha_ood_target: 1.0,
            ensemble_size: 5,
            hidden_dims: vec![64, 64],
            latent_dim: 6,
            flow_depth: 6,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("alpha_id_target", self.alpha_id_target),
            ("alpha_ood_target", self.alpha_ood_target),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("entropy_reg", self.entropy_reg), ("ood_weight", self.ood_weight)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Contract(format!("{name} must be nonnegative, got {v}")));
            }
        }
        let counts = [
            ("batch_size", self.batch_size),
            ("max_epochs", self.max_epochs),
            ("eval_every", self.eval_every),
            ("patience", self.patience),
            ("latent_dim", self.latent_dim),
            ("flow_depth", self.flow_depth),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Contract(format!("{name} must be positive")));
            }
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Contract("hidden_dims must be nonempty and positive".into()));
        }
        Ok(())
    }

    fn prior_targets(&self) -> PriorTargets {
        PriorTargets {
            id_true: self.alpha_id_target,
            id_other: 1.0,
            ood: self.alpha_ood_target,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// `(epoch, validation loss)` at every evaluation.
    pub evaluations: Vec<(usize, f64)>,
    /// Mean training loss per epoch.
    pub train_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &[Tensor], lr: f64) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            t: 0,
            lr,
        }
    }

    fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = Self::B1 * *m + (1.0 - Self::B1) * g;
                *v = Self::B2 * *v + (1.0 - Self::B2) * g * g;
                *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
            }
        }
    }
}

type BatchLoss<'a> = dyn for<'t> Fn(&'t Tape, &[Var<'t>], &[Tensor], &[usize]) -> Result<Var<'t>> + 'a;
type ValLoss<'a> = dyn Fn(&[Tensor]) -> Result<f64> + 'a;

fn training_error(epoch: usize, e: Error) -> Error {
    match e {
        e @ Error::Training { .. } => e,
        other => Error::Training {
            epoch,
            msg: other.to_string(),
        },
    }
}

/// Adam with early stopping; returns the parameters of the best validation
/// round. The final epoch is always evaluated.
fn fit(
    mut params: Vec<Tensor>,
    n_train: usize,
    cfg: &TrainConfig,
    batch_loss: &BatchLoss<'_>,
    val_loss: &ValLoss<'_>,
) -> Result<(Vec<Tensor>, TrainLog)> {
    if n_train == 0 {
        return Err(Error::Contract("empty training set".into()));
    }
    let mut shuffle = RngStream::new(cfg.seed, 2);
    let mut adam = Adam::new(&params, cfg.learning_rate);
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut log = TrainLog {
        best_val_loss: f64::INFINITY,
        ..Default::default()
    };
    let mut best = params.clone();
    let mut bad_rounds = 0;
    for epoch in 1..=cfg.max_epochs {
        shuffle.shuffle(&mut order);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
            let loss = batch_loss(&tape, &vars, &params, idx).map_err(|e| training_error(epoch, e))?;
            let value = loss.item().map_err(|e| training_error(epoch, e))?;
            if !value.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("loss became {value}"),
                });
            }
            let grads: Gradients = tape.backward(loss).map_err(|e| training_error(epoch, e))?;
            let g: Vec<Tensor> = vars.iter().map(|v| grads.wrt(*v)).collect();
            if g.iter().any(|t| !t.is_finite()) {
                return Err(Error::Training {
                    epoch,
                    msg: "non-finite gradient".into(),
                });
            }
            adam.step(&mut params, &g);
            total += value * idx.len() as f64;
            count += idx.len();
        }
        log.train_losses.push(total / count as f64);
        log.epochs_run = epoch;
        if epoch % cfg.eval_every == 0 || epoch == cfg.max_epochs {
            let v = val_loss(&params).map_err(|e| training_error(epoch, e))?;
            if !v.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("validation loss became {v}"),
                });
            }
            log.evaluations.push((epoch, v));
            if v < log.best_val_loss {
                log.best_val_loss = v;
                log.best_epoch = epoch;
                best = params.clone();
                bad_rounds = 0;
            } else {
                bad_rounds += 1;
                if bad_rounds >= cfg.patience {
                    log.stopped_early = epoch < cfg.max_epochs;
                    break;
                }
            }
        }
    }
    Ok((best, log))
}

fn check_dims(train: &Dataset, val: &Dataset) -> Result<()> {
    if train.dim() != val.dim() || train.num_classes() != val.num_classes() {
        return Err(Error::Contract("train and validation sets disagree in shape".into()));
    }
    if train.num_classes() < 2 {
        return Err(Error::Contract("need at least two classes".into()));
    }
    Ok(())
}

/// Train a single model with Adam and early stopping on validation loss.
/// PriorNet needs `ood_train`; the other kinds reject it. DDNet runs the full
/// ensemble-distillation pipeline.
pub fn train(
    kind: ModelKind,
    train: &Dataset,
    val: &Dataset,
    ood_train: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    train_impl(kind, train, val, ood_train, None, cfg)
}

/// Like [`train`], with every batch augmented by its attacked copy under the
/// current weights (same labels).
pub fn adversarial_train(
    kind: ModelKind,
    train: &Dataset,
    val: &Dataset,
    ood_train: Option<&Dataset>,
    attack: &AttackSpec,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    attack.validate()?;
    train_impl(kind, train, val, ood_train, Some(attack), cfg)
}

/// Labelled batch after optional adversarial augmentation.
fn batch_inputs(
    model: &Model,
    ds: &Dataset,
    idx: &[usize],
    attack: Option<(&AttackSpec, &RefCell<RngStream>)>,
) -> Result<(Tensor, Vec<usize>)> {
    let x = ds.features.select_rows(idx);
    let labels: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
    match attack {
        None => Ok((x, labels)),
        Some((spec, rng)) => {
            let adv = attacks::perturb(model, &x, spec, Some(&labels), &mut rng.borrow_mut())?;
            Ok((Tensor::vstack(&[&x, &adv])?, [labels.clone(), labels].concat()))
        }
    }
}

fn train_impl(
    kind: ModelKind,
    train: &Dataset,
    val: &Dataset,
    ood_train: Option<&Dataset>,
    attack: Option<&AttackSpec>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    check_dims(train, val)?;
    match (kind, ood_train) {
        (ModelKind::Priornet, None) => {
            return Err(Error::Contract("PriorNet requires OOD data for training".into()))
        }
        (ModelKind::Priornet, Some(o)) if o.is_empty() => {
            return Err(Error::Contract("PriorNet requires OOD data for training".into()))
        }
        (ModelKind::Priornet, Some(o)) if o.dim() != train.dim() => {
            return Err(Error::Contract("OOD data has a different feature count".into()))
        }
        (ModelKind::Priornet, _) => {}
        (_, Some(_)) => return Err(Error::Contract(format!("{kind} does not train on OOD data"))),
        (ModelKind::Ddnet, None) => return ddnet_pipeline(train, val, attack, cfg),
        _ => {}
    }
    let mut init_rng = RngStream::new(cfg.seed, 1);
    let mut template = Model::init(
        kind,
        train.dim(),
        train.num_classes(),
        &cfg.hidden_dims,
        cfg.latent_dim,
        cfg.flow_depth,
        &mut init_rng,
    )?;
    template.class_counts = train.class_counts().iter().map(|&c| c as f64).collect();

    let (ood_fit, ood_val) = ood_holdout(ood_train, cfg.seed);
    let ood_rng = RefCell::new(RngStream::new(cfg.seed, 5));
    let attack_rng = RefCell::new(RngStream::new(cfg.seed, 3));

    let batch_loss: &BatchLoss<'_> = &|tape, vars, params, idx| {
        let mut current = template.clone();
        current.set_params(params.to_vec());
        let (x, labels) = batch_inputs(&current, train, idx, attack.map(|a| (a, &attack_rng)))?;
        let alpha = template.forward_with(vars, tape.constant(x));
        let alpha_ood = match &ood_fit {
            Some(o) => {
                let mut rng = ood_rng.borrow_mut();
                let pick: Vec<usize> = (0..idx.len()).map(|_| rng.below(o.len())).collect();
                Some(template.forward_with(vars, tape.constant(o.features.select_rows(&pick))))
            }
            None => None,
        };
        objective(kind, cfg, alpha, &labels, alpha_ood)
    };

    let val_loss = |params: &[Tensor]| -> Result<f64> {
        let mut current = template.clone();
        current.set_params(params.to_vec());
        val_objective(&current, cfg, val, ood_val.as_ref())
    };

    let (best, log) = fit(template.params().to_vec(), train.len(), cfg, batch_loss, &val_loss)?;
    template.set_params(best);
    Ok((template, log))
}

/// PriorNet holds out a fifth of the OOD data for validation.
fn ood_holdout(ood_train: Option<&Dataset>, seed: u64) -> (Option<Dataset>, Option<Dataset>) {
    match ood_train {
        Some(o) if o.len() >= 2 => {
            let mut idx: Vec<usize> = (0..o.len()).collect();
            RngStream::new(seed, 4).shuffle(&mut idx);
            let (v, f) = idx.split_at((o.len() / 5).max(1));
            (Some(o.subset(f)), Some(o.subset(v)))
        }
        Some(o) => (Some(o.clone()), Some(o.clone())),
        None => (None, None),
    }
}

fn val_objective(model: &Model, cfg: &TrainConfig, val: &Dataset, ood_val: Option<&Dataset>) -> Result<f64> {
    let tape = Tape::new();
    let alpha = model.alpha_var(&tape, tape.constant(val.features.clone()));
    let alpha_ood = ood_val.map(|o| model.alpha_var(&tape, tape.constant(o.features.clone())));
    objective(model.kind, cfg, alpha, &val.labels, alpha_ood)?.item()
}

/// The validation loss early stopping saw for a model trained by [`train`]
/// with the same data and config. DDNet is not supported because its loss
/// depends on the ensemble.
pub fn validation_loss(model: &Model, val: &Dataset, ood_train: Option<&Dataset>, cfg: &TrainConfig) -> Result<f64> {
    if model.kind == ModelKind::Ddnet {
        return Err(Error::Contract("DDNet validation loss needs the ensemble".into()));
    }
    let (_, ood_val) = ood_holdout(ood_train, cfg.seed);
    val_objective(model, cfg, val, ood_val.as_ref())
}

fn objective<'t>(
    kind: ModelKind,
    cfg: &TrainConfig,
    alpha: Var<'t>,
    labels: &[usize],
    alpha_ood: Option<Var<'t>>,
) -> Result<Var<'t>> {
    Ok(match kind {
        ModelKind::PostnetFlow | ModelKind::PostnetDirect => loss_postnet(alpha, labels, cfg.entropy_reg),
        ModelKind::Evnet => loss_evnet(alpha, labels),
        ModelKind::Priornet => loss_priornet(
            alpha,
            labels,
            alpha_ood,
            cfg.prior_targets(),
            cfg.ood_weight,
            cfg.kl_direction,
        )?,
        ModelKind::Ddnet => {
            return Err(Error::Contract("DDNet trains through the distillation pipeline".into()))
        }
    })
}

fn softmax_ce<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    (logits.logsumexp_rows() - logits.pick(labels)).mean()
}

/// One softmax ensemble member; returns its parameters.
pub(crate) fn train_member(train: &Dataset, val: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<Vec<Tensor>> {
    let member_cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    let mlp_cfg = MlpConfig {
        input_dim: train.dim(),
        hidden_dims: cfg.hidden_dims.clone(),
        output_dim: train.num_classes(),
    };
    let params = mlp_cfg.init(&mut RngStream::new(seed, 1))?;
    let batch_loss: &BatchLoss<'_> = &|tape, vars, _params, idx| {
        let x = tape.constant(train.features.select_rows(idx));
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        Ok(softmax_ce(mlp::forward(vars, x), &labels))
    };
    let val_loss = |params: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
        softmax_ce(mlp::forward(&vars, tape.constant(val.features.clone())), &val.labels).item()
    };
    Ok(fit(params, train.len(), &member_cfg, batch_loss, &val_loss)?.0)
}

pub(crate) fn member_softmax(params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    let tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.constant(p.clone())).collect();
    mlp::forward(&vars, tape.constant(x.clone())).softmax_rows().value()
}

/// Train `M` softmax networks with distinct seeds, then distil their
/// predictions into a direct-parametrised Dirichlet network.
pub fn train_ddnet_pipeline(train: &Dataset, val: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainLog)> {
    cfg.validate()?;
    check_dims(train, val)?;
    ddnet_pipeline(train, val, None, cfg)
}

fn ddnet_pipeline(
    train: &Dataset,
    val: &Dataset,
    attack: Option<&AttackSpec>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainLog)> {
    if cfg.ensemble_size < 2 {
        return Err(Error::Contract("DDNet needs an ensemble of at least two".into()));
    }
    let members: Vec<Vec<Tensor>> = (0..cfg.ensemble_size)
        .into_par_iter()
        .map(|m| {
            let seed = cfg.seed.wrapping_mul(1000).wrapping_add(m as u64 + 1);
            train_member(train, val, cfg, seed).map_err(|e| Error::Ensemble {
                member: m,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let soft = |x: &Tensor| -> Result<Vec<Tensor>> { members.iter().map(|p| member_softmax(p, x)).collect() };
    let soft_train = soft(&train.features)?;
    let soft_val = soft(&val.features)?;

    let mut template = Model::init(
        ModelKind::Ddnet,
        train.dim(),
        train.num_classes(),
        &cfg.hidden_dims,
        cfg.latent_dim,
        cfg.flow_depth,
        &mut RngStream::new(cfg.seed, 1),
    )?;
    template.class_counts = train.class_counts().iter().map(|&c| c as f64).collect();
    let attack_rng = RefCell::new(RngStream::new(cfg.seed, 3));

    let batch_loss: &BatchLoss<'_> = &|tape, vars, params, idx| {
        let mut current = template.clone();
        current.set_params(params.to_vec());
        let (x, _) = batch_inputs(&current, train, idx, attack.map(|a| (a, &attack_rng)))?;
        let copies = x.rows() / idx.len();
        let pis: Vec<Tensor> = soft_train
            .iter()
            .map(|s| {
                let one = s.select_rows(idx);
                let parts: Vec<&Tensor> = std::iter::repeat_n(&one, copies).collect();
                Tensor::vstack(&parts)
            })
            .collect::<Result<_>>()?;
        loss_ddnet(template.forward_with(vars, tape.constant(x)), &pis)
    };
    let val_loss = |params: &[Tensor]| -> Result<f64> {
        let mut current = template.clone();
        current.set_params(params.to_vec());
        let tape = Tape::new();
        loss_ddnet(current.alpha_var(&tape, tape.constant(val.features.clone())), &soft_val)?.item()
    };
    let (best, log) = fit(template.params().to_vec(), train.len(), cfg, batch_loss, &val_loss)?;
    template.set_params(best);
    Ok((template, log))
}
