//! Run orchestration behind the `dbu` subcommands.
//!
//! A run directory holds `run.json` (digest and canonical config) and one
//! subdirectory per stage. Each stage reads only files written by earlier
//! stages, so stages can be rerun or resumed independently. Every output
//! carries the config digest in its header.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{attack_nested, AttackResult, AttackSpec, LossTarget};
use crate::autodiff::Tensor;
use crate::config::{ExperimentConfig, SynthSource};
use crate::container::Container;
use crate::data::{load_csv, prepare, prepare_with_ood, synth_blobs, Dataset, Prepared};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, auc_pr, auc_roc, empirical_performance, guaranteed_performance, task_points, task_points_from, Measure,
    Scenario,
    Side, TaskKind,
};
use crate::models::{train, train_ddnet_pipeline, Model, ModelKind, TrainConfig, TrainLog};
use crate::numerics::RngStream;
use crate::smoothing::certify_batch;

pub const RUN_FILE: &str = "run.json";

/// RNG streams for evaluation stages, kept apart from the training streams.
const STREAM_EVAL: u64 = 3;
const STREAM_SMOOTH: u64 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RunRecord {
    config_digest: String,
    config: ExperimentConfig,
    /// Directory the config file lived in.
    base_dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config_digest: String,
    pub model: ModelKind,
    pub seed: u64,
    pub log: TrainLog,
}

/// Restricts a command to some models and seeds. Empty lists select all.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub models: Vec<ModelKind>,
    pub seeds: Vec<u64>,
}

/// A validated config bound to its output directory.
#[derive(Debug, Clone)]
pub struct Run {
    pub config: ExperimentConfig,
    pub digest: String,
    /// Directory relative dataset paths resolve against.
    pub base_dir: PathBuf,
    pub out: PathBuf,
}

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Writes a tab-separated table behind a `#` header line.
pub(crate) fn write_tsv(path: &Path, header: &str, columns: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut s = format!("# {header}\n{}\n", columns.join("\t"));
    for r in rows {
        s.push_str(&r.join("\t"));
        s.push('\n');
    }
    fs::write(path, s)?;
    Ok(())
}

/// Reads a table written by [`write_tsv`]: column names and rows.
pub(crate) fn read_tsv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.is_empty());
    let columns: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            msg: "no header row".into(),
        })?
        .split('\t')
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for line in lines {
        let r: Vec<String> = line.split('\t').map(str::to_string).collect();
        if r.len() != columns.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                msg: format!("row has {} fields, header {}", r.len(), columns.len()),
            });
        }
        rows.push(r);
    }
    Ok((columns, rows))
}

fn missing(path: &Path) -> Error {
    Error::MissingArtifacts(vec![path.display().to_string()])
}

impl Run {
    /// Loads a config file; relative paths resolve against its directory.
    pub fn from_config_file(path: &Path, overrides: &[String]) -> Result<Self> {
        let config = ExperimentConfig::load(path, overrides)?;
        let base = match path.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        Self::new(config, &base)
    }

    pub fn new(config: ExperimentConfig, base_dir: &Path) -> Result<Self> {
        config.validate()?;
        let out = ExperimentConfig::resolve(base_dir, &config.output_dir);
        Ok(Self {
            digest: config.digest(),
            config,
            base_dir: base_dir.to_path_buf(),
            out,
        })
    }

    /// Reopens an existing run directory from its `run.json`. Relative
    /// dataset paths resolve against the directory the config named it from.
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_FILE);
        if !path.exists() {
            return Err(missing(&path));
        }
        let rec: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Format {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        rec.config.validate()?;
        let base = if rec.base_dir.is_dir() {
            rec.base_dir.clone()
        } else {
            base_for(run_dir, &rec.config.output_dir)
        };
        let run = Self {
            digest: rec.config.digest(),
            config: rec.config,
            base_dir: base,
            out: run_dir.to_path_buf(),
        };
        if run.digest != rec.config_digest {
            return Err(Error::Format {
                path,
                msg: "stored digest does not match the stored config".into(),
            });
        }
        Ok(run)
    }

    /// Creates the output directory and `run.json`, refusing to mix runs.
    pub fn init_dir(&self) -> Result<()> {
        fs::create_dir_all(&self.out)?;
        let path = self.out.join(RUN_FILE);
        if path.exists() {
            let rec: RunRecord = serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::Format {
                path: path.clone(),
                msg: e.to_string(),
            })?;
            if rec.config_digest != self.digest {
                return Err(Error::Contract(format!(
                    "{} holds a run with config digest {}, this config has {}",
                    self.out.display(),
                    rec.config_digest,
                    self.digest
                )));
            }
            return Ok(());
        }
        let rec = RunRecord {
            config_digest: self.digest.clone(),
            config: self.config.clone(),
            base_dir: fs::canonicalize(&self.base_dir).unwrap_or_else(|_| self.base_dir.clone()),
        };
        fs::write(&path, serde_json::to_string_pretty(&rec).expect("serializable") + "\n")?;
        Ok(())
    }

    fn cells(&self, sel: &Selection) -> Vec<(ModelKind, u64)> {
        let mut out = Vec::new();
        for &kind in &self.config.models {
            if !sel.models.is_empty() && !sel.models.contains(&kind) {
                continue;
            }
            for seed in self.config.seed_values() {
                if sel.seeds.is_empty() || sel.seeds.contains(&seed) {
                    out.push((kind, seed));
                }
            }
        }
        out
    }

    pub fn model_path(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.out.join("models").join(format!("{kind}_s{seed}.dbu"))
    }

    pub fn log_path(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.out.join("logs").join(format!("{kind}_s{seed}.json"))
    }

    pub fn attack_dir(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.out.join("attacks").join(format!("{kind}_s{seed}"))
    }

    pub fn certify_path(&self, kind: ModelKind, seed: u64) -> PathBuf {
        self.out.join("certify").join(format!("{kind}_s{seed}.tsv"))
    }

    /// `stem` is one of `auc`, `accuracy`, `scores` and `smoothed`.
    pub fn eval_path(&self, kind: ModelKind, seed: u64, stem: &str) -> PathBuf {
        self.out.join("eval").join(format!("{kind}_s{seed}_{stem}.tsv"))
    }

    fn header(&self, what: &str, kind: ModelKind, seed: u64) -> String {
        format!("dbu {what} config_digest={} model={kind} seed={seed}", self.digest)
    }

    /// The raw dataset and, for synthetic data, its OOD set.
    fn raw_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let d = &self.config.dataset;
        if let Some(csv) = &d.csv {
            let path = ExperimentConfig::resolve(&self.base_dir, &csv.path);
            if !path.exists() {
                return Err(missing(&path));
            }
            Ok((load_csv(&path, &csv.label_column, csv.delimiter)?, None))
        } else {
            let s = d.synth.as_ref().expect("validated");
            let (id, ood) = synth_blobs(s.k, s.dim, s.n_per_class, s.separation, s.ood_shift, s.seed)?;
            Ok((id, Some(ood)))
        }
    }

    fn data_path(&self, seed: u64, part: &str) -> PathBuf {
        self.out.join("data").join(format!("s{seed}_{part}.dbu"))
    }

    const PARTS: [&'static str; 5] = ["train", "val", "test", "ood_train", "ood_test"];

    /// Scaled splits for one seed, from the cache in `data/` when it was
    /// written under this digest.
    pub fn prepared(&self, seed: u64) -> Result<Prepared> {
        if let Some(p) = self.cached(seed) {
            return Ok(p);
        }
        let d = &self.config.dataset;
        let (raw, ood) = self.raw_data()?;
        let p = match ood {
            Some(o) => prepare_with_ood(&raw, &o, d.fractions, d.scaling, seed)?,
            None => prepare(&raw, self.config.ood_protocol.as_ref(), d.fractions, d.scaling, seed)?,
        };
        for (part, ds) in Self::PARTS.iter().zip([&p.train, &p.val, &p.test, &p.ood_train, &p.ood_test]) {
            let path = self.data_path(seed, part);
            fs::create_dir_all(path.parent().expect("has parent"))?;
            let mut c = ds.to_container();
            c.set("config_digest", &self.digest);
            c.save(&path)?;
        }
        Ok(p)
    }

    fn cached(&self, seed: u64) -> Option<Prepared> {
        let mut sets = Vec::new();
        for part in Self::PARTS {
            let c = Container::load(&self.data_path(seed, part)).ok()?;
            if c.get("config_digest").ok()? != self.digest {
                return None;
            }
            sets.push(Dataset::from_container(&c).ok()?);
        }
        let [train, val, test, ood_train, ood_test]: [Dataset; 5] = sets.try_into().ok()?;
        Some(Prepared {
            train,
            val,
            test,
            ood_train,
            ood_test,
            warnings: Vec::new(),
        })
    }

    pub fn load_model(&self, kind: ModelKind, seed: u64) -> Result<Model> {
        let path = self.model_path(kind, seed);
        if !path.exists() {
            return Err(missing(&path));
        }
        let m = Model::load(&path)?;
        if m.config_digest != self.digest {
            return Err(Error::Contract(format!(
                "{} was trained under config digest {}",
                path.display(),
                m.config_digest
            )));
        }
        Ok(m)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            ..self.config.train.clone()
        }
    }
}

/// Where a run directory's config must have lived for its `output_dir` to
/// resolve to `run_dir`; used when the recorded directory has moved.
fn base_for(run_dir: &Path, output_dir: &Path) -> PathBuf {
    if output_dir.is_absolute() {
        return PathBuf::from("/");
    }
    let mut base = run_dir.to_path_buf();
    for _ in output_dir.components() {
        base.pop();
    }
    base
}

/// Trains every selected model and seed; writes model files and logs.
pub fn cmd_train(run: &Run, sel: &Selection) -> Result<Vec<PathBuf>> {
    run.init_dir()?;
    let cells = run.cells(sel);
    let seeds: Vec<u64> = {
        let mut s: Vec<u64> = cells.iter().map(|c| c.1).collect();
        s.sort_unstable();
        s.dedup();
        s
    };
    for &seed in &seeds {
        run.prepared(seed)?;
    }
    let written: Vec<Vec<PathBuf>> = cells
        .par_iter()
        .map(|&(kind, seed)| {
            let p = run.prepared(seed)?;
            let cfg = run.train_config(seed);
            let (mut model, log) = match kind {
                ModelKind::Ddnet => train_ddnet_pipeline(&p.train, &p.val, &cfg)?,
                ModelKind::Priornet => train(kind, &p.train, &p.val, Some(&p.ood_train), &cfg)?,
                _ => train(kind, &p.train, &p.val, None, &cfg)?,
            };
            model.config_digest = run.digest.clone();
            let mpath = run.model_path(kind, seed);
            fs::create_dir_all(mpath.parent().expect("has parent"))?;
            model.save(&mpath)?;
            let lpath = run.log_path(kind, seed);
            fs::create_dir_all(lpath.parent().expect("has parent"))?;
            let rec = TrainRecord {
                config_digest: run.digest.clone(),
                model: kind,
                seed,
                log,
            };
            fs::write(&lpath, serde_json::to_string_pretty(&rec).expect("serializable") + "\n")?;
            Ok(vec![mpath, lpath])
        })
        .collect::<Result<_>>()?;
    Ok(written.concat())
}

/// snake_case name of a unit enum variant, as used in config files.
pub(crate) fn snake<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(serde_json::Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

pub fn archive_name(spec: &AttackSpec) -> String {
    format!(
        "{}_{}_{}_r{}.dbu",
        snake(&spec.method),
        snake(&spec.loss_target),
        snake(&spec.norm),
        spec.radius
    )
}

/// Attacks the ID test set with every spec of the grid. One archive per
/// spec holds `x_adv`, `achieved_loss`, `loss_delta` and `norm_used`.
pub fn cmd_attack(run: &Run, sel: &Selection) -> Result<Vec<PathBuf>> {
    run.init_dir()?;
    let specs = run.config.attacks.specs(Scenario::IdAttack);
    let mut written = Vec::new();
    for (kind, seed) in run.cells(sel) {
        let model = run.load_model(kind, seed)?;
        let test = run.prepared(seed)?.test;
        if model.input_dim() != test.dim() {
            return Err(Error::Contract(format!(
                "model expects {} features, dataset has {}",
                model.input_dim(),
                test.dim()
            )));
        }
        let dir = run.attack_dir(kind, seed);
        fs::create_dir_all(&dir)?;
        let groups = radius_groups(&specs);
        let results: Vec<Vec<Vec<AttackResult>>> = groups
            .par_iter()
            .enumerate()
            .map(|(g, idx)| {
                let group: Vec<AttackSpec> = idx.iter().map(|&i| specs[i].clone()).collect();
                let labels = (group[0].loss_target == LossTarget::CrossEntropy).then_some(test.labels.as_slice());
                let rng = RngStream::new(seed, STREAM_EVAL).derive(g as u64);
                attack_nested(&model, &test.features, &group, labels, &rng)
            })
            .collect::<Result<_>>()?;
        let jobs: Vec<(&AttackSpec, &Vec<AttackResult>)> = groups
            .iter()
            .zip(&results)
            .flat_map(|(idx, res)| idx.iter().zip(res).map(|(&i, r)| (&specs[i], r)))
            .collect();
        let paths: Vec<PathBuf> = jobs
            .par_iter()
            .map(|&(spec, res)| {
                let col = |f: &dyn Fn(&AttackResult) -> f64| Tensor::column(res.iter().map(f).collect());
                let mut c = Container::new();
                c.set("content", "attack_archive");
                c.set("config_digest", &run.digest);
                c.set("model", kind);
                c.set("seed", seed);
                c.set("method", snake(&spec.method));
                c.set("loss_target", snake(&spec.loss_target));
                c.set("direction", snake(&spec.direction));
                c.set("norm", snake(&spec.norm));
                c.set("radius", fmt_f64(spec.radius));
                c.push("x_adv", adv_tensor(res, test.dim())?);
                c.push("achieved_loss", col(&|r| r.achieved_loss));
                c.push("loss_delta", col(&|r| r.loss_delta));
                c.push("norm_used", col(&|r| r.norm_used));
                let path = dir.join(archive_name(spec));
                c.save(&path)?;
                Ok(path)
            })
            .collect::<Result<_>>()?;
        written.extend(paths);
    }
    Ok(written)
}

/// Evaluation sets capped at `max_points` rows each.
fn capped(ds: &Dataset, max_points: Option<usize>) -> Dataset {
    match max_points {
        Some(m) if m < ds.len() => ds.subset(&(0..m).collect::<Vec<_>>()),
        _ => ds.clone(),
    }
}

/// Certifies clean test and OOD-test points at every smoothing radius; one
/// row per point and radius.
pub fn cmd_certify(run: &Run, sel: &Selection) -> Result<Vec<PathBuf>> {
    run.init_dir()?;
    let s = run
        .config
        .smoothing
        .as_ref()
        .ok_or_else(|| Error::Config {
            pointer: "/smoothing".into(),
            msg: "certify needs a [smoothing] section".into(),
        })?;
    let cfg = s.smoothing_config();
    let mut written = Vec::new();
    for (kind, seed) in run.cells(sel) {
        let model = run.load_model(kind, seed)?;
        let p = run.prepared(seed)?;
        let mut rows = Vec::new();
        for (set, ds) in [("test", &p.test), ("ood_test", &p.ood_test)] {
            let ds = capped(ds, s.max_points);
            if ds.is_empty() {
                continue;
            }
            let mut rng = RngStream::new(seed, STREAM_SMOOTH).derive(u64::from(set == "ood_test"));
            let certs = certify_batch(&model, &ds.features, &cfg, &s.radii, &mut rng)?;
            for (i, per_radius) in certs.iter().enumerate() {
                let label = if set == "test" { ds.labels[i].to_string() } else { "ood".into() };
                for c in per_radius {
                    rows.push(vec![
                        set.to_string(),
                        i.to_string(),
                        label.clone(),
                        fmt_f64(c.radius),
                        fmt_f64(c.m_lower),
                        fmt_f64(c.m_median),
                        fmt_f64(c.m_upper),
                    ]);
                }
            }
        }
        let path = run.certify_path(kind, seed);
        let header = format!(
            "{} sigma={} n_samples={} conf_alpha={} measure={}",
            run.header("certify", kind, seed),
            cfg.sigma,
            cfg.n_samples,
            cfg.conf_alpha,
            cfg.measure.name()
        );
        write_tsv(
            &path,
            &header,
            &["set", "index", "label", "radius", "m_lower", "m_median", "m_upper"],
            &rows,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Indices of `specs` grouped by everything but the radius.
fn radius_groups(specs: &[AttackSpec]) -> Vec<Vec<usize>> {
    let mut groups: Vec<(AttackSpec, Vec<usize>)> = Vec::new();
    for (i, s) in specs.iter().enumerate() {
        let key = AttackSpec { radius: 0.0, ..s.clone() };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, g)) => g.push(i),
            None => groups.push((key, vec![i])),
        }
    }
    groups.into_iter().map(|(_, g)| g).collect()
}

/// Attacked copies of `ds` for every spec, in spec order. Specs that differ
/// only in radius are attacked together with [`attack_nested`]. A failed
/// group leaves its message in place of the tensors.
fn attacked_sets(
    model: &Model,
    ds: &Dataset,
    specs: &[AttackSpec],
    rng: &RngStream,
) -> Vec<std::result::Result<Tensor, String>> {
    let groups = radius_groups(specs);
    let per_group: Vec<_> = groups
        .par_iter()
        .enumerate()
        .map(|(g, idx)| {
            let group: Vec<AttackSpec> = idx.iter().map(|&i| specs[i].clone()).collect();
            let labels = (group[0].loss_target == LossTarget::CrossEntropy).then_some(ds.labels.as_slice());
            attack_nested(model, &ds.features, &group, labels, &rng.derive(g as u64))
                .and_then(|res| res.into_iter().map(|r| adv_tensor(&r, ds.dim())).collect::<Result<Vec<_>>>())
                .map_err(|e| e.to_string())
        })
        .collect();
    let mut out: Vec<Option<std::result::Result<Tensor, String>>> = vec![None; specs.len()];
    for (idx, res) in groups.iter().zip(per_group) {
        for (k, &i) in idx.iter().enumerate() {
            out[i] = Some(res.as_ref().map(|t| t[k].clone()).map_err(Clone::clone));
        }
    }
    out.into_iter().map(|o| o.expect("every spec is grouped")).collect()
}

fn adv_tensor(res: &[AttackResult], dim: usize) -> Result<Tensor> {
    let mut x = Vec::with_capacity(res.len() * dim);
    for r in res {
        x.extend_from_slice(&r.x_adv);
    }
    Tensor::new(res.len(), dim, x)
}

/// One cell of the base-model sweep.
#[derive(Debug, Clone, Copy)]
struct Cell {
    scenario: Scenario,
    spec_index: usize,
    task: TaskKind,
}

/// Tasks other than OOD detection only run under the ID-side scenario, and
/// OOD inputs cannot take label attacks.
pub(crate) fn applicable(task: TaskKind, scenario: Scenario, target: LossTarget) -> bool {
    match (task, scenario) {
        (TaskKind::OodDetect, Scenario::OodAttack) => target != LossTarget::CrossEntropy,
        (_, Scenario::IdAttack) => true,
        (_, Scenario::OodAttack) => false,
    }
}

/// Base-model sweep, accuracy under label attacks, diffE score dumps for
/// OOD detection and, with a `[smoothing]` section, the smoothed cells.
pub fn cmd_eval(run: &Run, sel: &Selection) -> Result<Vec<PathBuf>> {
    run.init_dir()?;
    let c = &run.config;
    let mut written = Vec::new();
    for (kind, seed) in run.cells(sel) {
        let model = run.load_model(kind, seed)?;
        let p = run.prepared(seed)?;
        let aux = (!p.ood_test.is_empty()).then_some(&p.ood_test);

        let specs: Vec<Vec<AttackSpec>> = c.scenarios.iter().map(|&s| c.attacks.specs(s)).collect();
        let id_specs = c.attacks.specs(Scenario::IdAttack);
        let rng = RngStream::new(seed, STREAM_EVAL);
        let id_adv = attacked_sets(&model, &p.test, &id_specs, &rng.derive(0));
        let adv: Vec<Vec<std::result::Result<Tensor, String>>> = c
            .scenarios
            .iter()
            .zip(&specs)
            .map(|(&scenario, sp)| match scenario {
                Scenario::IdAttack => id_adv.clone(),
                Scenario::OodAttack => {
                    let kept: Vec<AttackSpec> =
                        sp.iter().filter(|s| s.loss_target != LossTarget::CrossEntropy).cloned().collect();
                    let mut sets = attacked_sets(&model, &p.ood_test, &kept, &rng.derive(1)).into_iter();
                    sp.iter()
                        .map(|s| match s.loss_target {
                            LossTarget::CrossEntropy => Err("OOD inputs have no labels to attack".to_string()),
                            _ => sets.next().expect("one set per spec"),
                        })
                        .collect()
                }
            })
            .collect();
        let mut cells = Vec::new();
        for (si, &scenario) in c.scenarios.iter().enumerate() {
            for (a, spec) in specs[si].iter().enumerate() {
                for &task in &c.tasks {
                    if applicable(task, scenario, spec.loss_target) {
                        cells.push((
                            si,
                            Cell {
                                scenario,
                                spec_index: a,
                                task,
                            },
                        ));
                    }
                }
            }
        }
        let results: Vec<(Vec<Vec<String>>, Vec<Vec<String>>)> = cells
            .par_iter()
            .map(|&(si, cell)| {
                let spec = &specs[si][cell.spec_index];
                let pts = adv[si][cell.spec_index].clone().map_err(Error::Contract).and_then(|x| {
                    task_points_from(cell.task, &model, &p.test, aux, Some(&x), cell.scenario)
                });
                let alphas = pts.and_then(|pt| Ok((model.alphas(&pt.x)?, pt.labels)));
                let key = vec![
                    cell.task.name().to_string(),
                    snake(&cell.scenario),
                    String::new(),
                    snake(&spec.method),
                    snake(&spec.loss_target),
                    snake(&spec.norm),
                    fmt_f64(spec.radius),
                ];
                let mut rows = Vec::new();
                for &measure in &c.measures {
                    let mut row = key.clone();
                    row[2] = measure.name().to_string();
                    let metrics = alphas.as_ref().map_err(|e| e.to_string()).and_then(|(a, labels)| {
                        let t = crate::eval::BinaryTask::new(measure.scores(a).map_err(|e| e.to_string())?, labels.clone())
                            .map_err(|e| e.to_string())?;
                        Ok((auc_pr(&t).map_err(|e| e.to_string())?, auc_roc(&t).map_err(|e| e.to_string())?))
                    });
                    match metrics {
                        Ok((pr, roc)) => row.extend([fmt_f64(pr), fmt_f64(roc), String::new()]),
                        Err(e) => row.extend(["NA".into(), "NA".into(), e.replace(['\t', '\n'], " ")]),
                    }
                    rows.push(row);
                }
                let mut scores = Vec::new();
                if cell.task == TaskKind::OodDetect {
                    if let Ok((a, labels)) = &alphas {
                        let s = Measure::DiffEntropy.scores(a)?;
                        for (v, l) in s.iter().zip(labels) {
                            let mut r = key.clone();
                            r.remove(2);
                            r.remove(0);
                            r.extend([l.to_string(), fmt_f64(*v)]);
                            scores.push(r);
                        }
                    }
                }
                Ok((rows, scores))
            })
            .collect::<Result<_>>()?;
        let (auc_rows, score_rows): (Vec<_>, Vec<_>) = results.into_iter().unzip();
        let path = run.eval_path(kind, seed, "auc");
        write_tsv(
            &path,
            &run.header("eval", kind, seed),
            &[
                "task",
                "scenario",
                "measure",
                "method",
                "loss_target",
                "norm",
                "radius",
                "auc_pr",
                "auc_roc",
                "error",
            ],
            &auc_rows.concat(),
        )?;
        written.push(path);
        let path = run.eval_path(kind, seed, "scores");
        write_tsv(
            &path,
            &run.header("diffE scores", kind, seed),
            &["scenario", "method", "loss_target", "norm", "radius", "label", "score"],
            &score_rows.concat(),
        )?;
        written.push(path);

        let acc_rows: Vec<Vec<String>> = id_specs
            .iter()
            .zip(&id_adv)
            .filter(|(s, _)| s.loss_target == LossTarget::CrossEntropy)
            .map(|(spec, x)| {
                let x = x.clone().map_err(Error::Contract)?;
                let acc = accuracy(&model.predict(&x)?, &p.test.labels)?;
                Ok(vec![snake(&spec.method), snake(&spec.norm), fmt_f64(spec.radius), fmt_f64(acc)])
            })
            .collect::<Result<_>>()?;
        let path = run.eval_path(kind, seed, "accuracy");
        write_tsv(
            &path,
            &run.header("accuracy", kind, seed),
            &["method", "norm", "radius", "accuracy"],
            &acc_rows,
        )?;
        written.push(path);

        if let Some(s) = &c.smoothing {
            let path = run.eval_path(kind, seed, "smoothed");
            let rows = smoothed_cells(run, &model, &p, seed, s)?;
            write_tsv(
                &path,
                &run.header("smoothed", kind, seed),
                &["task", "scenario", "radius", "lowest", "empirical", "highest"],
                &rows,
            )?;
            written.push(path);
        }
    }
    Ok(written)
}

fn smoothed_cells(
    run: &Run,
    model: &Model,
    p: &Prepared,
    seed: u64,
    s: &crate::config::SmoothingSection,
) -> Result<Vec<Vec<String>>> {
    let c = &run.config;
    let cfg = s.smoothing_config();
    let test = capped(&p.test, s.max_points);
    let ood = capped(&p.ood_test, s.max_points);
    let aux = (!ood.is_empty()).then_some(&ood);
    let mut cells = Vec::new();
    for &scenario in &c.scenarios {
        for &task in &c.tasks {
            if applicable(task, scenario, s.loss_target(task)) {
                for &r in &s.radii {
                    cells.push((task, scenario, r));
                }
            }
        }
    }
    cells
        .par_iter()
        .enumerate()
        .map(|(idx, &(task, scenario, radius))| {
            let spec = c
                .attacks
                .spec(s.method, s.loss_target(task), crate::attacks::Norm::L2, radius, scenario);
            let mut rng = RngStream::new(seed, STREAM_EVAL).derive(1 << 32 | idx as u64);
            let pts = task_points(task, model, &test, aux, Some(&spec), scenario, &mut rng)?;
            let mut srng = RngStream::new(seed, STREAM_SMOOTH).derive(1 << 32 | idx as u64);
            let bounds: Vec<_> = certify_batch(model, &pts.x, &cfg, &[radius], &mut srng)?
                .into_iter()
                .map(|v| v[0])
                .collect();
            let cell = |r: Result<f64>| r.map(fmt_f64).unwrap_or_else(|_| "NA".into());
            Ok(vec![
                task.name().to_string(),
                snake(&scenario),
                fmt_f64(radius),
                cell(guaranteed_performance(&bounds, &pts.labels, Side::Lowest)),
                cell(empirical_performance(&bounds, &pts.labels)),
                cell(guaranteed_performance(&bounds, &pts.labels, Side::Highest)),
            ])
        })
        .collect()
}

/// Writes synthetic blobs as CSV: `x0 .. x{d-1}` then `class`, with the OOD
/// cluster labelled `ood`.
pub fn cmd_data_synth(src: &SynthSource, out: &Path) -> Result<()> {
    let (id, ood) = synth_blobs(src.k, src.dim, src.n_per_class, src.separation, src.ood_shift, src.seed)?;
    let json = serde_json::to_string(src).expect("serializable");
    let digest: String = {
        use sha2::{Digest, Sha256};
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    };
    let mut s = format!("# dbu data-synth config_digest={digest} params={json}\n");
    let cols: Vec<String> = (0..id.dim()).map(|j| format!("x{j}")).collect();
    s.push_str(&cols.join(","));
    s.push_str(",class\n");
    for (ds, ood_rows) in [(&id, false), (&ood, true)] {
        for i in 0..ds.len() {
            let mut fields: Vec<String> = ds.row(i).iter().map(|v| fmt_f64(*v)).collect();
            fields.push(if ood_rows { "ood".into() } else { ds.class_names[ds.labels[i]].clone() });
            s.push_str(&fields.join(","));
            s.push('\n');
        }
    }
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, s)?;
    Ok(())
}
