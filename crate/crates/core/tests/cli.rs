use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use dbu_core::container::Container;
use dbu_core::data::{load_csv, LabelColumn};
use dbu_core::models::{validation_loss, Model, ModelKind};
use dbu_core::run::Run;
use serde_json::Value;
use tempfile::TempDir;

const CONFIG: &str = r#"
schema_version = 1
output_dir = "run"
seeds = 2
models = ["postnet_flow", "priornet", "evnet"]

[dataset.synth]
k = 3
dim = 2
n_per_class = 60
separation = 8.0
ood_shift = 16.0
seed = 3

[train]
learning_rate = 0.01
hidden_dims = [12]
latent_dim = 2
flow_depth = 2
max_epochs = 60

[attacks]
methods = ["fgsm", "pgd"]
loss_targets = ["cross_entropy", "diff_entropy"]
norms = ["l2", "linf"]
radii = [0.0, 0.5, 1.0, 2.0]
pgd_steps = 10

[smoothing]
sigma = 0.5
n_samples = 100
radii = [0.0, 0.25, 0.5]
max_points = 20
"#;

fn dbu(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbu")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = dbu(args);
    assert!(out.status.success(), "dbu {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn error_record(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(line.trim()).unwrap_or_else(|_| panic!("not JSON: {line}"));
    v["error"].clone()
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, text).unwrap();
    path
}

/// A finished run of every subcommand.
struct Finished {
    _dir: TempDir,
    config: PathBuf,
    run_dir: PathBuf,
}

fn pipeline() -> Finished {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), CONFIG);
    let c = config.to_str().unwrap();
    for cmd in ["train", "attack", "certify", "eval"] {
        ok(&[cmd, "--config", c]);
    }
    let run_dir = dir.path().join("run");
    ok(&["report", run_dir.to_str().unwrap()]);
    Finished {
        _dir: dir,
        config,
        run_dir,
    }
}

fn finished() -> &'static Finished {
    static RUN: OnceLock<Finished> = OnceLock::new();
    RUN.get_or_init(pipeline)
}

fn tsv(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().to_string();
    let cols = lines.next().unwrap().split('\t').map(String::from).collect();
    let rows = lines.map(|l| l.split('\t').map(String::from).collect()).collect();
    (header, cols, rows)
}

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.insert(p.clone(), fs::read(&p).unwrap());
        }
    }
    out
}

#[test]
fn reloaded_model_reproduces_validation_loss() {
    let f = finished();
    let run = Run::open(&f.run_dir).unwrap();
    for kind in [ModelKind::PostnetFlow, ModelKind::Priornet, ModelKind::Evnet] {
        let m = Model::load(&run.model_path(kind, 0)).unwrap();
        let log: Value = serde_json::from_str(&fs::read_to_string(run.log_path(kind, 0)).unwrap()).unwrap();
        let p = run.prepared(0).unwrap();
        let ood = (kind == ModelKind::Priornet).then_some(&p.ood_train);
        let v = validation_loss(&m, &p.val, ood, &run.train_config(0)).unwrap();
        assert_eq!(v, log["log"]["best_val_loss"].as_f64().unwrap(), "{kind}");
        assert_eq!(log["config_digest"], run.digest.as_str());
    }
}

#[test]
fn priornet_without_ood_is_rejected_before_training() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("blobs.csv");
    ok(&[
        "data-synth", "--k", "3", "--dim", "2", "--n-per-class", "20", "--separation", "8", "--ood-shift", "16",
        "--out", csv.to_str().unwrap(),
    ]);
    let config = write_config(
        dir.path(),
        "schema_version = 1\noutput_dir = \"run\"\nmodels = [\"evnet\", \"priornet\"]\ntasks = [\"confidence\"]\n\
         [dataset.csv]\npath = \"blobs.csv\"\nlabel_column = \"class\"\n",
    );
    let out = dbu(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    let e = error_record(&out);
    assert_eq!(e["kind"], "config");
    assert_eq!(e["pointer"], "/models/1");
    assert!(!dir.path().join("run").join("models").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = TempDir::new().unwrap();
    let config = write_config(dir.path(), &CONFIG.replace("max_epochs = 60", "max_epochs = 60\nmax_epoch = 3"));
    let out = dbu(&["train", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["pointer"], "/train/max_epoch");

    let config = write_config(dir.path(), CONFIG);
    let out = dbu(&["train", "--config", config.to_str().unwrap(), "--set", "train.lr=0.1"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["pointer"], "/train/lr");

    let out = dbu(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_record(&out)["kind"], "usage");
}

#[test]
fn same_config_gives_identical_model_files() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let text = CONFIG.replace("seeds = 2", "seeds = 1");
    for d in [&a, &b] {
        let c = write_config(d.path(), &text);
        ok(&["train", "--config", c.to_str().unwrap(), "--model", "postnet_flow", "--model", "evnet"]);
    }
    let (fa, fb) = (files_under(&a.path().join("run/models")), files_under(&b.path().join("run/models")));
    assert_eq!(fa.len(), 2);
    for ((pa, ba), (_, bb)) in fa.iter().zip(&fb) {
        assert!(ba == bb, "{} differs", pa.display());
    }
}

#[test]
fn attack_archives() {
    let f = finished();
    let run = Run::open(&f.run_dir).unwrap();
    let test = run.prepared(1).unwrap().test;
    let grid = run.config.attacks.specs(dbu_core::eval::Scenario::IdAttack);
    assert_eq!(grid.len(), 2 * 2 * 2 * 4);
    let mut rows = 0;
    for spec in &grid {
        let path = run.attack_dir(ModelKind::Evnet, 1).join(dbu_core::run::archive_name(spec));
        let c = Container::load(&path).unwrap();
        assert_eq!(c.get("config_digest").unwrap(), run.digest);
        let x = c.array("x_adv").unwrap();
        let used = c.array("norm_used").unwrap();
        rows += x.rows();
        for i in 0..x.rows() {
            let diff: Vec<f64> = x.row_slice(i).iter().zip(test.row(i)).map(|(a, b)| a - b).collect();
            let n = spec.norm.of(&diff);
            assert!((n - used.row_slice(i)[0]).abs() < 1e-12);
            assert!(n <= spec.radius + 1e-9, "{path:?} row {i}: {n}");
            if spec.radius == 0.0 {
                assert_eq!(x.row_slice(i), test.row(i));
            }
        }
    }
    assert_eq!(rows, test.len() * grid.len());
}

#[test]
fn attack_rejects_mismatched_model() {
    let f = finished();
    let out = dbu(&["attack", "--config", f.config.to_str().unwrap(), "--set", "dataset.synth.dim=3"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(error_record(&out)["kind"], "contract");
}

#[test]
fn certificates() {
    let f = finished();
    let run = Run::open(&f.run_dir).unwrap();
    let path = run.certify_path(ModelKind::PostnetFlow, 0);
    let before = fs::read(&path).unwrap();
    let (header, cols, rows) = tsv(&path);
    assert!(header.contains(&format!("config_digest={}", run.digest)));
    let col = |name: &str| cols.iter().position(|c| c == name).unwrap();
    let (set, idx, radius, lo, med, hi) =
        (col("set"), col("index"), col("radius"), col("m_lower"), col("m_median"), col("m_upper"));
    let mut widths: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for r in &rows {
        let v = |i: usize| r[i].parse::<f64>().unwrap();
        assert!(v(lo) <= v(med) && v(med) <= v(hi), "{r:?}");
        widths.entry((r[set].clone(), r[idx].clone())).or_default().push((v(radius), v(hi) - v(lo)));
    }
    assert_eq!(widths.len(), 40);
    for w in widths.values_mut() {
        w.sort_by(|a, b| a.0.total_cmp(&b.0));
        assert_eq!(w.len(), 3);
        assert!(w.windows(2).all(|p| p[1].1 >= p[0].1), "{w:?}");
    }
    // rerun in a copy so other tests never see a half-written file
    let copy = TempDir::new().unwrap();
    let root = f.config.parent().unwrap();
    for (p, bytes) in files_under(root) {
        let dest = copy.path().join(p.strip_prefix(root).unwrap());
        fs::create_dir_all(dest.parent().unwrap()).unwrap();
        fs::write(dest, bytes).unwrap();
    }
    let rel = path.strip_prefix(root).unwrap();
    fs::remove_file(copy.path().join(rel)).unwrap();
    let c = copy.path().join("config.toml");
    ok(&["certify", "--config", c.to_str().unwrap(), "--model", "postnet_flow", "--seed", "0"]);
    assert!(fs::read(copy.path().join(rel)).unwrap() == before);
}

#[test]
fn empty_run_dir_lists_expected_files() {
    let dir = TempDir::new().unwrap();
    let out = dbu(&["report", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(3));
    let e = error_record(&out);
    assert_eq!(e["kind"], "missing_artifacts");
    let missing: Vec<&str> = e["missing"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(missing.iter().any(|m| m.ends_with("run.json")), "{missing:?}");
}

#[test]
fn triple_tables_are_sandwiched() {
    let f = finished();
    let mut checked = 0;
    for (p, _) in files_under(&f.run_dir.join("report")) {
        let name = p.file_name().unwrap().to_str().unwrap();
        if !name.starts_with("smoothed_") {
            continue;
        }
        let (_, cols, rows) = tsv(&p);
        assert_eq!(cols, ["model", "r=0", "r=0.25", "r=0.5"]);
        for r in rows {
            for cell in &r[1..] {
                if cell == "NA" {
                    continue;
                }
                let v: Vec<f64> = cell.split(" / ").map(|s| s.parse().unwrap()).collect();
                assert!(v[0] <= v[1] && v[1] <= v[2], "{name}: {cell}");
                checked += 1;
            }
        }
    }
    for (p, _) in files_under(&f.run_dir.join("eval")) {
        if !p.to_str().unwrap().ends_with("_smoothed.tsv") {
            continue;
        }
        let (_, cols, rows) = tsv(&p);
        let col = |name: &str| cols.iter().position(|c| c == name).unwrap();
        for r in rows {
            if r[col("empirical")] == "NA" {
                continue;
            }
            let v = |n: &str| r[col(n)].parse::<f64>().unwrap();
            assert!(v("lowest") <= v("empirical") && v("empirical") <= v("highest"), "{r:?}");
            checked += 1;
        }
    }
    assert!(checked > 0);
}

#[test]
fn histograms_are_valid_svg() {
    let f = finished();
    let digest = Run::open(&f.run_dir).unwrap().digest;
    let svgs: Vec<_> = files_under(&f.run_dir.join("report/hist")).into_iter().collect();
    assert!(!svgs.is_empty());
    for (p, bytes) in svgs {
        let text = String::from_utf8(bytes).unwrap();
        let doc = roxmltree::Document::parse(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        for series in ["id", "ood"] {
            let g = doc
                .descendants()
                .find(|n| n.has_tag_name("g") && n.attribute("class") == Some(series))
                .unwrap_or_else(|| panic!("{}: no {series} group", p.display()));
            let widths: Vec<&str> = g.children().filter(|n| n.has_tag_name("rect")).map(|n| n.attribute("width").unwrap()).collect();
            assert!((1..=50).contains(&widths.len()), "{}", p.display());
            assert!(widths.iter().all(|w| *w == widths[0]));
        }
        assert!(doc.descendants().any(|n| n.attribute("class") == Some("threshold")));
        assert!(text.contains(&format!("config_digest={digest}")));
    }
}

#[test]
fn outputs_carry_the_config_digest() {
    let f = finished();
    let digest = Run::open(&f.run_dir).unwrap().digest;
    for (p, bytes) in files_under(&f.run_dir) {
        let name = p.to_str().unwrap();
        if name.ends_with(".tsv") {
            let first = String::from_utf8(bytes).unwrap().lines().next().unwrap().to_string();
            assert!(first.contains(&format!("config_digest={digest}")), "{name}");
        } else if name.ends_with(".dbu") {
            assert_eq!(Container::load(&p).unwrap().get("config_digest").unwrap(), digest, "{name}");
        }
    }
}

#[test]
fn two_runs_produce_identical_tables() {
    let a = finished();
    let b = pipeline();
    let ta = files_under(&a.run_dir.join("report"));
    let tb = files_under(&b.run_dir.join("report"));
    assert_eq!(ta.len(), tb.len());
    for ((pa, x), (_, y)) in ta.iter().zip(&tb) {
        assert!(x == y, "{} differs", pa.display());
    }
}

#[test]
fn synthetic_csv_loads() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("b.csv");
    ok(&[
        "data-synth", "--k", "4", "--dim", "3", "--n-per-class", "25", "--separation", "6", "--ood-shift", "12",
        "--seed", "9", "--out", csv.to_str().unwrap(),
    ]);
    let ds = load_csv(&csv, &LabelColumn::Name("class".into()), ',').unwrap();
    assert_eq!(ds.dim(), 3);
    assert_eq!(ds.len(), 4 * 25 + 25);
    assert_eq!(ds.num_classes(), 5);
    assert!(fs::read_to_string(&csv).unwrap().starts_with("# dbu data-synth config_digest="));
}
