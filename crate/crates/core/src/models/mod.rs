//! Dirichlet-based classifiers: an MLP encoder plus, for PostNet, per-class
//! radial-flow densities on its latent output.

pub mod flow;
pub mod loss;
pub mod mlp;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::container::Container;
use crate::dirichlet::{batch, DirichletParams, Link, ParamKind, Parametrization};
use crate::error::{Error, Result};
use crate::numerics::RngStream;

pub use flow::RadialFlowStack;
pub use loss::{loss_ddnet, loss_evnet, loss_postnet, loss_priornet, KlDirection, PriorTargets};
pub use mlp::MlpConfig;
pub use train::{adversarial_train, train, train_ddnet_pipeline, validation_loss, TrainConfig, TrainLog};

const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    PostnetFlow,
    PostnetDirect,
    Priornet,
    Ddnet,
    Evnet,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::PostnetFlow,
        ModelKind::PostnetDirect,
        ModelKind::Priornet,
        ModelKind::Ddnet,
        ModelKind::Evnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::PostnetFlow => "postnet_flow",
            ModelKind::PostnetDirect => "postnet_direct",
            ModelKind::Priornet => "priornet",
            ModelKind::Ddnet => "ddnet",
            ModelKind::Evnet => "evnet",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Contract(format!("unknown model kind {s:?}")))
    }

    /// PostNet and EvNet add one to a positive link, PriorNet and DDNet
    /// exponentiate directly.
    pub fn parametrization(self) -> Parametrization {
        match self {
            ModelKind::PostnetFlow => Parametrization {
                kind: ParamKind::OffsetOne,
                link: Link::Exp,
            },
            ModelKind::PostnetDirect | ModelKind::Evnet => Parametrization::OFFSET_SOFTPLUS,
            ModelKind::Priornet | ModelKind::Ddnet => Parametrization::DIRECT_EXP,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// A trained (or freshly initialised) network. Immutable once built;
/// inference takes `&self` and is safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub mlp: MlpConfig,
    pub num_classes: usize,
    /// Flow depth, zero unless `kind` is `PostnetFlow`.
    pub flow_depth: usize,
    /// Training-set class counts `N_c` scaling flow densities.
    pub class_counts: Vec<f64>,
    pub config_digest: String,
    params: Vec<Tensor>,
}

impl Model {
    pub fn init(
        kind: ModelKind,
        input_dim: usize,
        num_classes: usize,
        hidden_dims: &[usize],
        latent_dim: usize,
        flow_depth: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Contract("need at least two classes".into()));
        }
        let flow = kind == ModelKind::PostnetFlow;
        let mlp = MlpConfig {
            input_dim,
            hidden_dims: hidden_dims.to_vec(),
            output_dim: if flow { latent_dim } else { num_classes },
        };
        let mut params = mlp.init(rng)?;
        if flow {
            let stack = RadialFlowStack::init(flow_depth, latent_dim, num_classes, rng)?;
            params.extend(stack.tensors().cloned());
        }
        Ok(Self {
            kind,
            mlp,
            num_classes,
            flow_depth: if flow { flow_depth } else { 0 },
            class_counts: vec![0.0; num_classes],
            config_digest: String::new(),
            params,
        })
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim
    }

    pub fn parametrization(&self) -> Parametrization {
        self.kind.parametrization()
    }

    pub(crate) fn set_params(&mut self, params: Vec<Tensor>) {
        debug_assert_eq!(params.len(), self.params.len());
        self.params = params;
    }

    pub fn flow(&self) -> Option<RadialFlowStack> {
        if self.kind != ModelKind::PostnetFlow {
            return None;
        }
        let n = self.mlp.num_tensors();
        RadialFlowStack::from_tensors(self.mlp.output_dim, self.num_classes, self.params[n..].to_vec()).ok()
    }

    /// Concentrations `n x K` from bound parameter variables.
    pub fn forward_with<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let n_mlp = self.mlp.num_tensors();
        let out = mlp::forward(&params[..n_mlp], x);
        match self.kind {
            ModelKind::PostnetFlow => {
                let log_q = RadialFlowStack::log_density_var(self.num_classes, &params[n_mlp..], out);
                let counts = x.tape().constant(Tensor::row(self.class_counts.clone()));
                (log_q.exp() * counts) + 1.0
            }
            _ => batch::alpha_from_logits(out, self.parametrization()),
        }
    }

    /// Concentrations on `tape` with the weights held constant; gradients flow
    /// only into `x`.
    pub fn alpha_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let params: Vec<Var<'t>> = self.params.iter().map(|p| tape.constant(p.clone())).collect();
        self.forward_with(&params, x)
    }

    /// Concentrations for every row of `x`.
    pub fn alphas(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "model_forward",
                format!("input has {} features, model expects {}", x.cols(), self.input_dim()),
            ));
        }
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let alpha = self.alpha_var(&tape, xv).value()?;
        if !alpha.is_finite() {
            return Err(Error::NonFinite { op: "model_forward" });
        }
        Ok(alpha)
    }

    pub fn model_forward(&self, x: &Tensor) -> Result<Vec<DirichletParams>> {
        self.alphas(x)?
            .row_vecs()
            .into_iter()
            .map(DirichletParams::new)
            .collect()
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let a = self.alphas(x)?;
        Ok((0..a.rows()).map(|i| crate::dirichlet::argmax(a.row_slice(i))).collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new();
        c.set("content", "model");
        c.set("format_version", FORMAT_VERSION);
        c.set("model_kind", self.kind);
        c.set("input_dim", self.mlp.input_dim);
        c.set(
            "hidden_dims",
            self.mlp.hidden_dims.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
        );
        c.set("output_dim", self.mlp.output_dim);
        c.set("num_classes", self.num_classes);
        c.set("flow_depth", self.flow_depth);
        let p = self.parametrization();
        c.set("parametrization", format!("{}+{}", kind_name(p.kind), link_name(p.link)));
        c.set(
            "class_counts",
            self.class_counts.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
        );
        c.set("config_digest", &self.config_digest);
        for (name, t) in self.param_names().into_iter().zip(&self.params) {
            c.push(&name, t.clone());
        }
        c
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.mlp.num_tensors() / 2 {
            names.push(format!("mlp.{l}.weight"));
            names.push(format!("mlp.{l}.bias"));
        }
        for l in 0..self.flow_depth {
            names.push(format!("flow.{l}.z0"));
            names.push(format!("flow.{l}.log_a"));
            names.push(format!("flow.{l}.b_raw"));
        }
        names
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let bad = |msg: String| Error::Format {
            path: Default::default(),
            msg,
        };
        if c.get("content")? != "model" {
            return Err(bad("container does not hold a model".into()));
        }
        let version: u32 = c.parse("format_version")?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let kind = ModelKind::parse(c.get("model_kind")?).map_err(|e| bad(e.to_string()))?;
        let list = |key: &str| -> Result<Vec<String>> {
            let v = c.get(key)?;
            Ok(if v.is_empty() {
                vec![]
            } else {
                v.split(',').map(str::to_string).collect()
            })
        };
        let hidden_dims = list("hidden_dims")?
            .iter()
            .map(|s| s.parse().map_err(|_| bad("bad hidden_dims".into())))
            .collect::<Result<Vec<usize>>>()?;
        let class_counts = list("class_counts")?
            .iter()
            .map(|s| s.parse().map_err(|_| bad("bad class_counts".into())))
            .collect::<Result<Vec<f64>>>()?;
        let mut model = Model {
            kind,
            mlp: MlpConfig {
                input_dim: c.parse("input_dim")?,
                hidden_dims,
                output_dim: c.parse("output_dim")?,
            },
            num_classes: c.parse("num_classes")?,
            flow_depth: c.parse("flow_depth")?,
            class_counts,
            config_digest: c.get("config_digest")?.to_string(),
            params: Vec::new(),
        };
        model.mlp.validate()?;
        if model.class_counts.len() != model.num_classes {
            return Err(bad("class_counts length does not match num_classes".into()));
        }
        let names = model.param_names();
        let mut params = Vec::with_capacity(names.len());
        for name in &names {
            params.push(c.array(name)?.clone());
        }
        for ((fan_in, fan_out), wb) in model.mlp.layer_dims().into_iter().zip(params.chunks(2)) {
            if wb[0].shape() != [fan_in, fan_out] || wb[1].shape() != [1, fan_out] {
                return Err(bad("layer shapes do not match the manifest".into()));
            }
        }
        model.params = params;
        if kind == ModelKind::PostnetFlow && model.flow().is_none() {
            return Err(bad("flow tensors do not match the manifest".into()));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?).map_err(|e| match e {
            Error::Format { msg, .. } => Error::Format {
                path: path.to_path_buf(),
                msg,
            },
            other => other,
        })
    }
}

fn kind_name(k: ParamKind) -> &'static str {
    match k {
        ParamKind::OffsetOne => "offset_one",
        ParamKind::Direct => "direct",
    }
}

fn link_name(l: Link) -> &'static str {
    match l {
        Link::Exp => "exp",
        Link::Softplus => "softplus",
    }
}
