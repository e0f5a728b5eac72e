//! Experiment configuration: a TOML document that fully determines a run.
//!
//! Unknown keys are rejected and errors carry JSON-pointer paths such as
//! `/train/learning_rate`. The digest is the SHA-256 of the canonical JSON
//! form of the parsed config, defaults included, so two files that differ
//! only in layout or in spelling out a default share a digest.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackMethod, AttackSpec, Direction, LossTarget, Norm};
use crate::data::{LabelColumn, OodProtocol, Scaling};
use crate::error::{Error, Result};
use crate::eval::{Measure, Scenario, TaskKind};
use crate::models::{ModelKind, TrainConfig};
use crate::smoothing::SmoothingConfig;

pub const SCHEMA_VERSION: u32 = 1;

const DEFAULT_RADII: [f64; 7] = [0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Relative paths resolve against the config file's directory.
    pub output_dir: PathBuf,
    /// Number of runs; run `i` uses seed `train.seed + i`.
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub ood_protocol: Option<OodProtocol>,
    pub models: Vec<ModelKind>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub attacks: AttackGrid,
    #[serde(default)]
    pub smoothing: Option<SmoothingSection>,
    #[serde(default = "default_tasks")]
    pub tasks: Vec<TaskKind>,
    #[serde(default = "default_measures")]
    pub measures: Vec<Measure>,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<Scenario>,
}

fn default_seeds() -> u64 {
    5
}

fn default_tasks() -> Vec<TaskKind> {
    TaskKind::ALL.to_vec()
}

fn default_measures() -> Vec<Measure> {
    vec![Measure::DiffEntropy]
}

fn default_scenarios() -> Vec<Scenario> {
    vec![Scenario::IdAttack, Scenario::OodAttack]
}

/// Exactly one of `csv` and `synth` must be set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    #[serde(default)]
    pub csv: Option<CsvSource>,
    #[serde(default)]
    pub synth: Option<SynthSource>,
    #[serde(default)]
    pub scaling: Scaling,
    #[serde(default = "default_fractions")]
    pub fractions: [f64; 3],
}

fn default_fractions() -> [f64; 3] {
    [0.6, 0.2, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CsvSource {
    pub path: PathBuf,
    pub label_column: LabelColumn,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

/// Gaussian blobs plus one OOD blob; see [`crate::data::synth_blobs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub k: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub separation: f64,
    pub ood_shift: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Cartesian grid of attacks. `direction` overrides the per-scenario default
/// of [`default_direction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackGrid {
    pub methods: Vec<AttackMethod>,
    pub loss_targets: Vec<LossTarget>,
    pub norms: Vec<Norm>,
    pub radii: Vec<f64>,
    pub direction: Option<Direction>,
    pub pgd_steps: usize,
    pub pgd_step_size: Option<f64>,
    pub noise_samples: usize,
    pub clip_box: Option<[f64; 2]>,
}

impl Default for AttackGrid {
    fn default() -> Self {
        let base = AttackSpec::new(AttackMethod::Pgd, LossTarget::CrossEntropy);
        Self {
            methods: vec![AttackMethod::Pgd],
            loss_targets: vec![LossTarget::CrossEntropy, LossTarget::DiffEntropy],
            norms: vec![Norm::L2],
            radii: DEFAULT_RADII.to_vec(),
            direction: None,
            pgd_steps: base.pgd_steps,
            pgd_step_size: None,
            noise_samples: base.noise_samples,
            clip_box: None,
        }
    }
}

/// Label attacks always maximise cross-entropy. Uncertainty attacks push ID
/// inputs toward high uncertainty and OOD inputs toward low uncertainty;
/// precision moves opposite to the entropy measures.
pub fn default_direction(target: LossTarget, scenario: Scenario) -> Direction {
    let raise_uncertainty = scenario == Scenario::IdAttack;
    match target {
        LossTarget::CrossEntropy => Direction::Maximize,
        LossTarget::DiffEntropy | LossTarget::MutualInfo if raise_uncertainty => Direction::Maximize,
        LossTarget::DiffEntropy | LossTarget::MutualInfo => Direction::Minimize,
        LossTarget::Precision if raise_uncertainty => Direction::Minimize,
        LossTarget::Precision => Direction::Maximize,
    }
}

impl AttackGrid {
    /// One spec per method, loss target, norm and radius, in that nesting
    /// order (radius fastest).
    pub fn specs(&self, scenario: Scenario) -> Vec<AttackSpec> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &target in &self.loss_targets {
                for &norm in &self.norms {
                    for &radius in &self.radii {
                        out.push(self.spec(method, target, norm, radius, scenario));
                    }
                }
            }
        }
        out
    }

    pub fn spec(&self, method: AttackMethod, target: LossTarget, norm: Norm, radius: f64, scenario: Scenario) -> AttackSpec {
        AttackSpec {
            direction: self.direction.unwrap_or_else(|| default_direction(target, scenario)),
            norm,
            radius,
            pgd_steps: self.pgd_steps,
            pgd_step_size: self.pgd_step_size,
            noise_samples: self.noise_samples,
            clip_box: self.clip_box,
            ..AttackSpec::new(method, target)
        }
    }
}

/// Smoothed evaluation. Each cell attacks the base model with `method`
/// under L2 at one of `radii`, then certifies the attacked points at that
/// radius. Confidence and attack detection use label attacks; OOD detection
/// attacks the smoothing measure itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmoothingSection {
    pub sigma: f64,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default = "default_conf_alpha")]
    pub conf_alpha: f64,
    #[serde(default = "default_measure")]
    pub measure: Measure,
    #[serde(default = "default_radii")]
    pub radii: Vec<f64>,
    #[serde(default = "default_method")]
    pub method: AttackMethod,
    /// Caps the points taken from each evaluation set.
    #[serde(default)]
    pub max_points: Option<usize>,
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

/// The smoothed tables stop at radius 2.
fn default_radii() -> Vec<f64> {
    DEFAULT_RADII[..6].to_vec()
}

fn default_method() -> AttackMethod {
    AttackMethod::Pgd
}

impl SmoothingSection {
    pub fn smoothing_config(&self) -> SmoothingConfig {
        SmoothingConfig {
            sigma: self.sigma,
            n_samples: self.n_samples,
            conf_alpha: self.conf_alpha,
            measure: self.measure,
        }
    }

    /// The uncertainty attack matching the certified measure.
    pub fn uncertainty_target(&self) -> LossTarget {
        match self.measure {
            Measure::DiffEntropy => LossTarget::DiffEntropy,
            Measure::MutualInfo => LossTarget::MutualInfo,
            Measure::Precision => LossTarget::Precision,
        }
    }

    pub fn loss_target(&self, task: TaskKind) -> LossTarget {
        match task {
            TaskKind::OodDetect => self.uncertainty_target(),
            TaskKind::Confidence | TaskKind::AttackDetect => LossTarget::CrossEntropy,
        }
    }
}

fn config_error(pointer: impl Into<String>, msg: impl Into<String>) -> Error {
    Error::Config {
        pointer: pointer.into(),
        msg: msg.into(),
    }
}

/// `a.b.c` or `a.b[2]` to `/a/b/c` and `/a/b/2`.
fn pointer_of(path: &serde_path_to_error::Path) -> String {
    let mut out = String::new();
    for seg in path.iter() {
        use serde_path_to_error::Segment;
        match seg {
            Segment::Seq { index } => out.push_str(&format!("/{index}")),
            Segment::Map { key } => out.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => out.push_str(&format!("/{variant}")),
            Segment::Unknown => out.push_str("/?"),
        }
    }
    if out.is_empty() {
        out.push('/');
    }
    out
}

/// Sets `dotted.key = value` in a parsed document. The value is read as a
/// TOML value when it parses as one and as a string otherwise.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error("/", format!("override {assignment:?} is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(config_error("/", format!("bad override key {key:?}")));
    }
    let mut table = doc;
    for (i, part) in parts[..parts.len() - 1].iter().enumerate() {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            config_error(format!("/{}", parts[..=i].join("/")), "override path crosses a non-table value")
        })?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Parses `text`, applies `key=value` overrides, then validates.
    pub fn from_toml_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text).map_err(|e| config_error("/", e.to_string().trim_end()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(doc))
            .map_err(|e| config_error(pointer_of(e.path()), e.inner().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        Self::from_toml_with(&std::fs::read_to_string(path)?, overrides)
    }

    /// Canonical JSON: struct fields in declaration order, defaults filled.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Lower-case hex SHA-256 of [`Self::canonical_json`].
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.canonical_json().as_bytes());
        hash.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn seed_values(&self) -> Vec<u64> {
        (0..self.seeds).map(|i| self.train.seed.wrapping_add(i)).collect()
    }

    fn has_ood_train(&self) -> bool {
        self.dataset.synth.is_some() || self.ood_protocol.as_ref().is_some_and(|p| !p.ood_train_classes.is_empty())
    }

    fn has_ood_test(&self) -> bool {
        self.dataset.synth.is_some() || self.ood_protocol.as_ref().is_some_and(|p| !p.ood_test_classes.is_empty())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(config_error(
                "/schema_version",
                format!("unsupported schema version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        if self.seeds == 0 {
            return Err(config_error("/seeds", "need at least one seed"));
        }
        match (&self.dataset.csv, &self.dataset.synth) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(config_error("/dataset", "set exactly one of dataset.csv and dataset.synth"))
            }
            (None, Some(s)) => {
                if self.ood_protocol.is_some() {
                    return Err(config_error("/ood_protocol", "synthetic data brings its own OOD set"));
                }
                if !(s.separation > 0.0) || s.k < 2 || s.dim == 0 || s.n_per_class == 0 {
                    return Err(config_error(
                        "/dataset/synth",
                        "need k >= 2, dim >= 1, n_per_class >= 1 and separation > 0",
                    ));
                }
            }
            (Some(_), None) => {}
        }
        let f = self.dataset.fractions;
        if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(config_error("/dataset/fractions", format!("{f:?} must be nonnegative and sum to 1")));
        }
        if self.models.is_empty() {
            return Err(config_error("/models", "list at least one model"));
        }
        for (i, m) in self.models.iter().enumerate() {
            if self.models[..i].contains(m) {
                return Err(config_error(format!("/models/{i}"), format!("{m} is listed twice")));
            }
            if *m == ModelKind::Priornet && !self.has_ood_train() {
                return Err(config_error(
                    format!("/models/{i}"),
                    "priornet needs OOD training data: set ood_protocol.ood_train_classes",
                ));
            }
        }
        self.train
            .validate()
            .map_err(|e| config_error("/train", e.to_string()))?;
        if self.tasks.is_empty() {
            return Err(config_error("/tasks", "list at least one task"));
        }
        if let Some(i) = self.tasks.iter().position(|t| *t == TaskKind::OodDetect) {
            if !self.has_ood_test() {
                return Err(config_error(
                    format!("/tasks/{i}"),
                    "ood_detect needs OOD test data: set ood_protocol.ood_test_classes",
                ));
            }
        }
        if self.measures.is_empty() {
            return Err(config_error("/measures", "list at least one measure"));
        }
        if self.scenarios.is_empty() {
            return Err(config_error("/scenarios", "list at least one scenario"));
        }
        let g = &self.attacks;
        for (name, empty) in [
            ("methods", g.methods.is_empty()),
            ("loss_targets", g.loss_targets.is_empty()),
            ("norms", g.norms.is_empty()),
            ("radii", g.radii.is_empty()),
        ] {
            if empty {
                return Err(config_error(format!("/attacks/{name}"), "must not be empty"));
            }
        }
        for (i, r) in g.radii.iter().enumerate() {
            if !(*r >= 0.0 && r.is_finite()) {
                return Err(config_error(format!("/attacks/radii/{i}"), format!("radius must be >= 0, got {r}")));
            }
        }
        for spec in g.specs(Scenario::IdAttack) {
            spec.validate().map_err(|e| config_error("/attacks", e.to_string()))?;
        }
        if let Some(s) = &self.smoothing {
            s.smoothing_config()
                .validate()
                .map_err(|e| config_error("/smoothing", e.to_string()))?;
            if s.radii.is_empty() {
                return Err(config_error("/smoothing/radii", "must not be empty"));
            }
            for (i, r) in s.radii.iter().enumerate() {
                if !(*r >= 0.0 && r.is_finite()) {
                    return Err(config_error(format!("/smoothing/radii/{i}"), format!("radius must be >= 0, got {r}")));
                }
            }
            if s.max_points == Some(0) {
                return Err(config_error("/smoothing/max_points", "must be positive"));
            }
        }
        Ok(())
    }

    /// The dataset path resolved against `base`.
    pub fn resolve(base: &Path, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            base.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
schema_version = 1
output_dir = "out"
models = ["evnet"]

[dataset.synth]
k = 3
dim = 2
n_per_class = 20
separation = 10.0
ood_shift = 20.0
"#;

    fn pointer(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Config { pointer, .. }) => pointer,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.seeds, 5);
        assert_eq!(c.seed_values(), vec![0, 1, 2, 3, 4]);
        assert_eq!(c.attacks.radii, DEFAULT_RADII.to_vec());
        assert_eq!(c.tasks, TaskKind::ALL.to_vec());
        assert_eq!(c.train, TrainConfig::default());
    }

    #[test]
    fn unknown_keys_report_their_path() {
        assert_eq!(pointer(&format!("{MINIMAL}\n[train]\nlearning_rte = 0.1\n")), "/train/learning_rte");
        assert_eq!(pointer(&format!("bogus = 1\n{MINIMAL}")), "/bogus");
        assert_eq!(pointer(&format!("{MINIMAL}\n[train]\nlearning_rate = \"fast\"\n")), "/train/learning_rate");
        assert_eq!(pointer(&MINIMAL.replace("\"evnet\"", "\"evnet\", \"resnet\"")), "/models/1");
        assert_eq!(pointer(&MINIMAL.replace("schema_version = 1", "schema_version = 2")), "/schema_version");
        assert_eq!(pointer(&format!("{MINIMAL}\n[attacks]\nradii = [0.0, -1.0]\n")), "/attacks/radii/1");
    }

    #[test]
    fn semantic_checks() {
        let csv = MINIMAL.replace(
            "[dataset.synth]\nk = 3\ndim = 2\nn_per_class = 20\nseparation = 10.0\nood_shift = 20.0\n",
            "[dataset.csv]\npath = \"x.csv\"\nlabel_column = \"class\"\n",
        );
        assert_eq!(pointer(&csv), "/tasks/2");
        let csv_no_ood = csv.replace("models = [\"evnet\"]", "models = [\"evnet\", \"priornet\"]\ntasks = [\"confidence\"]");
        assert_eq!(pointer(&csv_no_ood), "/models/1");
        let with_protocol = format!("{csv_no_ood}\n[ood_protocol]\nood_train_classes = [\"window\"]\n");
        assert!(ExperimentConfig::from_toml_str(&with_protocol).is_ok());
        assert_eq!(pointer(&format!("{MINIMAL}\n[dataset.csv]\npath = \"x\"\nlabel_column = 0\n")), "/dataset");
        assert_eq!(pointer(&format!("{MINIMAL}\n[smoothing]\nsigma = 0.0\n")), "/smoothing");
    }

    #[test]
    fn digest_ignores_layout_and_spelled_out_defaults() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml_str(&format!("# comment\n{MINIMAL}\n[train]\nlearning_rate = 1e-3\n")).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
        let c = ExperimentConfig::from_toml_str(&format!("{MINIMAL}\n[train]\nlearning_rate = 2e-3\n")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn overrides_apply_before_validation() {
        let o = |s: &str| vec![s.to_string()];
        let c = ExperimentConfig::from_toml_with(MINIMAL, &o("train.learning_rate=0.05")).unwrap();
        assert_eq!(c.train.learning_rate, 0.05);
        let c = ExperimentConfig::from_toml_with(MINIMAL, &o("output_dir=elsewhere")).unwrap();
        assert_eq!(c.output_dir, PathBuf::from("elsewhere"));
        let c = ExperimentConfig::from_toml_with(MINIMAL, &o("dataset.scaling=min_max")).unwrap();
        assert_eq!(c.dataset.scaling, Scaling::MinMax);
        assert!(matches!(
            ExperimentConfig::from_toml_with(MINIMAL, &o("seeds=0")),
            Err(Error::Config { pointer, .. }) if pointer == "/seeds"
        ));
        assert!(ExperimentConfig::from_toml_with(MINIMAL, &o("no_equals")).is_err());
    }

    #[test]
    fn directions_follow_scenario() {
        use Direction::*;
        let d = default_direction;
        assert_eq!(d(LossTarget::CrossEntropy, Scenario::OodAttack), Maximize);
        assert_eq!(d(LossTarget::DiffEntropy, Scenario::IdAttack), Maximize);
        assert_eq!(d(LossTarget::DiffEntropy, Scenario::OodAttack), Minimize);
        assert_eq!(d(LossTarget::Precision, Scenario::IdAttack), Minimize);
        assert_eq!(d(LossTarget::Precision, Scenario::OodAttack), Maximize);
        let g = AttackGrid::default();
        assert_eq!(g.specs(Scenario::IdAttack).len(), 2 * 7);
    }
}
