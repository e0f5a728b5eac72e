//! Tables and histograms from a finished run directory.
//!
//! Every table has models as rows and radii as columns, averaged over
//! seeds. A cell is `NA` unless every seed contributed a value; absent
//! files and cells are listed in `report/missing.txt`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::models::ModelKind;
use crate::attacks::LossTarget;
use crate::run::{applicable, fmt_f64, read_tsv, snake, write_tsv, Run};

pub const HIST_BINS: usize = 50;

#[derive(Debug, Clone, Default)]
pub struct ReportOutcome {
    pub written: Vec<PathBuf>,
    /// Absent input files and the table cells they left empty.
    pub missing: Vec<String>,
}

/// Parsed rows of one eval table per (model, seed); `None` when absent.
type Loaded = BTreeMap<(ModelKind, u64), Option<Vec<BTreeMap<String, String>>>>;

fn load_all(run: &Run, stem: &str, missing: &mut Vec<String>) -> Result<Loaded> {
    let mut out = BTreeMap::new();
    for &kind in &run.config.models {
        for seed in run.config.seed_values() {
            let path = run.eval_path(kind, seed, stem);
            let rows = if path.exists() {
                let (cols, rows) = read_tsv(&path)?;
                Some(
                    rows.into_iter()
                        .map(|r| cols.iter().cloned().zip(r).collect())
                        .collect(),
                )
            } else {
                missing.push(format!("file {}", path.display()));
                None
            };
            out.insert((kind, seed), rows);
        }
    }
    Ok(out)
}

/// Mean over seeds of the `value` column of the single row matching
/// `key`, or `None` if any seed lacks a finite value.
fn seed_mean(loaded: &Loaded, kind: ModelKind, key: &[(&str, String)], value: &str) -> Option<f64> {
    let mut vals = Vec::new();
    for ((k, _), rows) in loaded {
        if *k != kind {
            continue;
        }
        let row = rows
            .as_ref()?
            .iter()
            .find(|r| key.iter().all(|(c, v)| r.get(*c) == Some(v)))?;
        let v: f64 = row.get(value)?.parse().ok()?;
        if !v.is_finite() {
            return None;
        }
        vals.push(v);
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

fn radius_columns(radii: &[f64]) -> Vec<String> {
    std::iter::once("model".to_string())
        .chain(radii.iter().map(|r| format!("r={r}")))
        .collect()
}

/// Builds every table and histogram the run's artifacts allow.
pub fn cmd_report(run_dir: &Path) -> Result<ReportOutcome> {
    let run = Run::open(run_dir)?;
    let c = &run.config;
    let mut expected = Vec::new();
    let mut stems = vec!["auc", "accuracy", "scores"];
    if c.smoothing.is_some() {
        stems.push("smoothed");
    }
    for &kind in &c.models {
        for seed in c.seed_values() {
            for stem in &stems {
                expected.push(run.eval_path(kind, seed, stem));
            }
        }
    }
    if !expected.iter().any(|p| p.exists()) {
        let mut list = vec![run.out.join(crate::run::RUN_FILE).display().to_string()];
        list.extend(expected.iter().map(|p| p.display().to_string()));
        return Err(Error::MissingArtifacts(list));
    }

    let dir = run.out.join("report");
    fs::create_dir_all(&dir)?;
    let header = format!("dbu report config_digest={}", run.digest);
    let mut out = ReportOutcome::default();
    let mut missing = Vec::new();

    let auc = load_all(&run, "auc", &mut missing)?;
    let g = &c.attacks;
    for &scenario in &c.scenarios {
        for &task in &c.tasks {
            for &measure in &c.measures {
                for &method in &g.methods {
                    for &target in &g.loss_targets {
                        if !applicable(task, scenario, target) {
                            continue;
                        }
                        for &norm in &g.norms {
                            let name = format!(
                                "auc_pr_{}_{}_{}_{}_{}_{}.tsv",
                                task.name(),
                                snake(&scenario),
                                measure.name(),
                                snake(&method),
                                snake(&target),
                                snake(&norm)
                            );
                            let mut rows = Vec::new();
                            for &kind in &c.models {
                                let mut row = vec![kind.to_string()];
                                for &r in &g.radii {
                                    let key = [
                                        ("task", task.name().to_string()),
                                        ("scenario", snake(&scenario)),
                                        ("measure", measure.name().to_string()),
                                        ("method", snake(&method)),
                                        ("loss_target", snake(&target)),
                                        ("norm", snake(&norm)),
                                        ("radius", fmt_f64(r)),
                                    ];
                                    row.push(match seed_mean(&auc, kind, &key, "auc_pr") {
                                        Some(v) => format!("{v:.2}"),
                                        None => {
                                            missing.push(format!("cell {name} {kind} r={r}: no value for some seed"));
                                            "NA".into()
                                        }
                                    });
                                }
                                rows.push(row);
                            }
                            let path = dir.join(name);
                            let cols = radius_columns(&g.radii);
                            write_tsv(&path, &header, &cols.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
                            out.written.push(path);
                        }
                    }
                }
            }
        }
    }

    let acc = load_all(&run, "accuracy", &mut missing)?;
    if g.loss_targets.contains(&LossTarget::CrossEntropy) {
        for &method in &g.methods {
            for &norm in &g.norms {
                let name = format!("accuracy_{}_{}.tsv", snake(&method), snake(&norm));
                let mut rows = Vec::new();
                for &kind in &c.models {
                    let mut row = vec![kind.to_string()];
                    for &r in &g.radii {
                        let key = [
                            ("method", snake(&method)),
                            ("norm", snake(&norm)),
                            ("radius", fmt_f64(r)),
                        ];
                        row.push(match seed_mean(&acc, kind, &key, "accuracy") {
                            Some(v) => format!("{v:.2}"),
                            None => {
                                missing.push(format!("cell {name} {kind} r={r}: no value for some seed"));
                                "NA".into()
                            }
                        });
                    }
                    rows.push(row);
                }
                let path = dir.join(name);
                let cols = radius_columns(&g.radii);
                write_tsv(&path, &header, &cols.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
                out.written.push(path);
            }
        }
    }

    if let Some(s) = &c.smoothing {
        let sm = load_all(&run, "smoothed", &mut missing)?;
        for &scenario in &c.scenarios {
            for &task in &c.tasks {
                if !applicable(task, scenario, s.loss_target(task)) {
                    continue;
                }
                let name = format!("smoothed_{}_{}.tsv", task.name(), snake(&scenario));
                let mut rows = Vec::new();
                for &kind in &c.models {
                    let mut row = vec![kind.to_string()];
                    for &r in &s.radii {
                        let key = [
                            ("task", task.name().to_string()),
                            ("scenario", snake(&scenario)),
                            ("radius", fmt_f64(r)),
                        ];
                        let parts: Option<Vec<f64>> = ["lowest", "empirical", "highest"]
                            .iter()
                            .map(|col| seed_mean(&sm, kind, &key, col))
                            .collect();
                        row.push(match parts {
                            Some(v) => format!("{:.2} / {:.2} / {:.2}", v[0], v[1], v[2]),
                            None => {
                                missing.push(format!("cell {name} {kind} r={r}: no value for some seed"));
                                "NA".into()
                            }
                        });
                    }
                    rows.push(row);
                }
                let path = dir.join(name);
                let cols = radius_columns(&s.radii);
                write_tsv(&path, &header, &cols.iter().map(String::as_str).collect::<Vec<_>>(), &rows)?;
                out.written.push(path);
            }
        }
    }

    let scores = load_all(&run, "scores", &mut missing)?;
    out.written.extend(histograms(&scores, &dir.join("hist"), &header)?);

    let mpath = dir.join("missing.txt");
    if missing.is_empty() {
        if mpath.exists() {
            fs::remove_file(&mpath)?;
        }
    } else {
        fs::write(&mpath, format!("# {header}\n{}\n", missing.join("\n")))?;
        out.written.push(mpath);
    }
    out.missing = missing;
    Ok(out)
}

type Group = (ModelKind, String, String, String, String, String);

fn histograms(scores: &Loaded, dir: &Path, header: &str) -> Result<Vec<PathBuf>> {
    let mut groups: BTreeMap<Group, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for ((kind, _), rows) in scores {
        for r in rows.iter().flatten() {
            let key = (
                *kind,
                r["scenario"].clone(),
                r["method"].clone(),
                r["loss_target"].clone(),
                r["norm"].clone(),
                r["radius"].clone(),
            );
            let v: f64 = match r["score"].parse() {
                Ok(v) if f64::is_finite(v) => v,
                _ => continue,
            };
            let entry = groups.entry(key).or_default();
            if r["label"] == "0" {
                entry.0.push(v);
            } else {
                entry.1.push(v);
            }
        }
    }
    let mut written = Vec::new();
    if groups.is_empty() {
        return Ok(written);
    }
    fs::create_dir_all(dir)?;
    for ((kind, scenario, method, target, norm, radius), (id, ood)) in &groups {
        let title = format!("{kind}: diffE, {scenario} {method} {target} {norm} r={radius}");
        let svg = histogram_svg(id, ood, &title, header);
        let path = dir.join(format!("{kind}_{scenario}_{method}_{target}_{norm}_r{radius}.svg"));
        fs::write(&path, svg)?;
        written.push(path);
    }
    Ok(written)
}

/// Threshold at a bin edge minimising the balanced error of "OOD iff score
/// above threshold", i.e. where the normalised histograms cross.
pub fn crossover(id: &[f64], ood: &[f64], edges: &[f64]) -> f64 {
    let mut best = (f64::INFINITY, edges[0]);
    for &t in edges {
        let fp = id.iter().filter(|&&v| v > t).count() as f64 / id.len().max(1) as f64;
        let fn_ = ood.iter().filter(|&&v| v <= t).count() as f64 / ood.len().max(1) as f64;
        if fp + fn_ < best.0 {
            best = (fp + fn_, t);
        }
    }
    best.1
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two overlaid 50-bin histograms (ID and OOD, each normalised to unit
/// mass) on a shared range, with the crossover threshold as a dashed line.
pub fn histogram_svg(id: &[f64], ood: &[f64], title: &str, header: &str) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (60.0, 20.0, 40.0, 50.0);
    let all = id.iter().chain(ood);
    let mut lo = all.clone().fold(f64::INFINITY, |a, &b| a.min(b));
    let mut hi = all.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !lo.is_finite() || !hi.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let width = (hi - lo) / HIST_BINS as f64;
    let edges: Vec<f64> = (0..=HIST_BINS).map(|i| lo + i as f64 * width).collect();
    let counts = |xs: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; HIST_BINS];
        for &x in xs {
            let b = (((x - lo) / width) as usize).min(HIST_BINS - 1);
            c[b] += 1.0;
        }
        let n = xs.len().max(1) as f64;
        c.iter().map(|v| v / n).collect()
    };
    let (ci, co) = (counts(id), counts(ood));
    let top = ci.iter().chain(&co).fold(0.0f64, |a, &b| a.max(b)).max(1e-12);
    let pw = w - ml - mr;
    let ph = h - mt - mb;
    let x_of = |v: f64| ml + (v - lo) / (hi - lo) * pw;
    let y_of = |f: f64| mt + ph - f / top * ph;

    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    let _ = writeln!(s, "<!-- {} -->", xml_escape(header));
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect x=\"0\" y=\"0\" width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\" text-anchor=\"middle\">{}</text>",
        w / 2.0,
        xml_escape(title)
    );
    for (freqs, colour, name) in [(&ci, "#1f77b4", "id"), (&co, "#ff7f0e", "ood")] {
        let _ = writeln!(s, "<g class=\"{name}\" fill=\"{colour}\" fill-opacity=\"0.5\">");
        for (b, &f) in freqs.iter().enumerate() {
            if f == 0.0 {
                continue;
            }
            let x0 = x_of(edges[b]);
            let y = y_of(f);
            let _ = writeln!(
                s,
                "<rect x=\"{x0:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\"/>",
                pw / HIST_BINS as f64,
                mt + ph - y
            );
        }
        s.push_str("</g>\n");
    }
    let _ = writeln!(
        s,
        "<line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>",
        mt + ph,
        ml + pw
    );
    let _ = writeln!(s, "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>", mt + ph);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            "<text x=\"{:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{:.3}</text>",
            x_of(v),
            mt + ph + 16.0,
            v
        );
    }
    let _ = writeln!(
        s,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">differential entropy</text>",
        ml + pw / 2.0,
        h - 12.0
    );
    if !id.is_empty() && !ood.is_empty() {
        let t = crossover(id, ood, &edges);
        let xt = x_of(t);
        let _ = writeln!(
            s,
            "<line class=\"threshold\" x1=\"{xt:.2}\" y1=\"{mt}\" x2=\"{xt:.2}\" y2=\"{}\" stroke=\"black\" stroke-dasharray=\"4 3\"/>",
            mt + ph
        );
    }
    let _ = writeln!(
        s,
        "<g font-family=\"sans-serif\" font-size=\"11\"><rect x=\"{0}\" y=\"{1}\" width=\"10\" height=\"10\" fill=\"#1f77b4\" fill-opacity=\"0.5\"/><text x=\"{2}\" y=\"{3}\">ID (n={4})</text><rect x=\"{0}\" y=\"{5}\" width=\"10\" height=\"10\" fill=\"#ff7f0e\" fill-opacity=\"0.5\"/><text x=\"{2}\" y=\"{6}\">OOD (n={7})</text></g>",
        w - mr - 110.0,
        mt + 4.0,
        w - mr - 95.0,
        mt + 13.0,
        id.len(),
        mt + 20.0,
        mt + 29.0,
        ood.len()
    );
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossover_separates_disjoint_sets() {
        let id = [0.0, 0.1, 0.2];
        let ood = [1.0, 1.1];
        let edges: Vec<f64> = (0..=10).map(|i| i as f64 * 0.11).collect();
        let t = crossover(&id, &ood, &edges);
        assert!(t >= 0.2 && t < 1.0);
    }

    #[test]
    fn histogram_has_fixed_layout() {
        let svg = histogram_svg(&[1.0, 2.0, 2.5], &[3.0, 4.0], "t & <x>", "h");
        assert!(svg.starts_with("<?xml"));
        assert!(svg.contains("class=\"threshold\""));
        assert!(svg.contains("t &amp; &lt;x&gt;"));
        let rects = svg.matches("<rect x=").count();
        // background, five non-empty bins, two legend swatches
        assert_eq!(rects, 1 + 5 + 2);
        let degenerate = histogram_svg(&[1.0], &[], "t", "h");
        assert!(!degenerate.contains("threshold"));
    }
}
