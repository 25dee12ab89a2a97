use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use actjepa::evalkit::{
    write_report, EvalRow, EvalTable, ProbeReport, ProbeRun, ReportTables, CURVE_CSV, EVAL_CSV, PROBE_CSV,
};
use actjepa::trainer::{AlternationCurve, CurvePoint};
use actjepa::{Error, Result};

pub const COMPARISON_CSV: &str = "comparison.csv";
pub const SUCCESS_SVG: &str = "success.svg";

fn integrity(path: &Path, what: impl std::fmt::Display) -> Error {
    Error::Integrity(format!("{}: {what}", path.display()))
}

/// Files named `name` under `root`, sorted, skipping the `skip` subtree.
fn find(root: &Path, name: &str, skip: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let entries = fs::read_dir(root).map_err(|e| Error::Io {
        path: root.to_path_buf(),
        source: e,
    })?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            if !same_path(&p, skip) {
                find(&p, name, skip, out)?;
            }
        } else if p.file_name().is_some_and(|n| n == name) {
            out.push(p);
        }
    }
    Ok(())
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    }
}

fn read_rows(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(integrity(path, "unexpected header"));
    }
    let width = header.split(',').count();
    lines
        .map(|l| {
            let cells: Vec<String> = l.split(',').map(str::to_string).collect();
            if cells.len() == width {
                Ok(cells)
            } else {
                Err(integrity(path, format!("row `{l}` has {} cells", cells.len())))
            }
        })
        .collect()
}

fn num<T: std::str::FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse().map_err(|_| integrity(path, format!("bad number `{s}`")))
}

fn parse_eval(path: &Path) -> Result<Vec<EvalRow>> {
    read_rows(path, "model,task,train_seed,eval_seed,success,steps,queries")?
        .into_iter()
        .map(|c| {
            Ok(EvalRow {
                model: c[0].clone(),
                task: c[1].clone(),
                train_seed: num(path, &c[2])?,
                eval_seed: num(path, &c[3])?,
                success: num::<u8>(path, &c[4])? == 1,
                steps: num(path, &c[5])?,
                queries: num(path, &c[6])?,
            })
        })
        .collect()
}

fn parse_probe(path: &Path, reports: &mut Vec<ProbeReport>) -> Result<()> {
    let rows = read_rows(path, "model,probe_seed,rmse_x100,ate_x100,encoder_hash_before,encoder_hash_after")?;
    for c in rows.into_iter().filter(|c| c[1] != "mean") {
        let run = ProbeRun {
            probe_seed: num(path, &c[1])?,
            rmse: num::<f64>(path, &c[2])? / 100.0,
            ate: num::<f64>(path, &c[3])? / 100.0,
            encoder_hash_before: c[4].clone(),
            encoder_hash_after: c[5].clone(),
        };
        match reports.iter_mut().find(|r| r.model == c[0]) {
            Some(r) => r.runs.push(run),
            None => reports.push(ProbeReport {
                model: c[0].clone(),
                runs: vec![run],
            }),
        }
    }
    Ok(())
}

fn parse_curve(path: &Path) -> Result<AlternationCurve> {
    let rows = read_rows(path, "pretrain_epoch,finetune_action_loss,pretrain_observation_loss,encoder_hash")?;
    let points = rows
        .into_iter()
        .map(|c| {
            Ok(CurvePoint {
                pretrain_epoch: num(path, &c[0])?,
                finetune_action_loss: num(path, &c[1])?,
                pretrain_observation_loss: num(path, &c[2])?,
                encoder_hash: c[3].clone(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(AlternationCurve { points })
}

/// One row per model: success rate and probe errors, blank when missing.
pub fn comparison_csv(eval: &EvalTable, probes: &[ProbeReport]) -> (String, Vec<String>) {
    let aggs = eval.aggregates();
    let mut models: Vec<String> = aggs.iter().map(|a| a.model.clone()).collect();
    for p in probes {
        if !models.contains(&p.model) {
            models.push(p.model.clone());
        }
    }
    let mut s = String::from("model,success,success_mean,success_std,probe_rmse_x100,probe_ate_x100\n");
    let mut warnings = Vec::new();
    for m in &models {
        let _ = write!(s, "{m}");
        match aggs.iter().find(|a| &a.model == m) {
            Some(a) => {
                let _ = write!(s, ",{},{:.4},{:.4}", a.display(), a.mean, a.std);
            }
            None => {
                s.push_str(",,,");
                warnings.push(format!("no evaluation data for `{m}`"));
            }
        }
        match probes.iter().find(|p| &p.model == m) {
            Some(p) => {
                let (rm, rs) = p.rmse_mean_std();
                let (am, as_) = p.ate_mean_std();
                let _ = writeln!(
                    s,
                    ",{:.3} ± {:.3},{:.3} ± {:.3}",
                    100.0 * rm,
                    100.0 * rs,
                    100.0 * am,
                    100.0 * as_
                );
            }
            None => {
                s.push_str(",,\n");
                warnings.push(format!("no probe data for `{m}`"));
            }
        }
    }
    (s, warnings)
}

/// Bar chart of mean success per model with a std whisker.
pub fn success_svg(eval: &EvalTable) -> String {
    let aggs = eval.aggregates();
    let (w, h, m) = (480.0, 320.0, 48.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">Success rate (%)</text>"#,
        w / 2.0
    );
    let _ = writeln!(s, r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - m, w - m / 2.0, h - m);
    let slot = (w - 1.5 * m) / aggs.len().max(1) as f64;
    let sy = |v: f64| (h - m) - v.clamp(0.0, 100.0) / 100.0 * (h - 1.5 * m);
    for (i, a) in aggs.iter().enumerate() {
        let x = m + slot * i as f64 + slot * 0.2;
        let bw = slot * 0.6;
        let _ = writeln!(
            s,
            r#"<rect class="bar" x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{:.2}" fill="steelblue"/>"#,
            sy(a.mean),
            (h - m) - sy(a.mean)
        );
        let cx = x + bw / 2.0;
        let _ = writeln!(
            s,
            r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
            sy(a.mean - a.std),
            sy(a.mean + a.std)
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.2}" y="{}" text-anchor="middle" font-size="12">{} ({})</text>"#,
            h - m + 16.0,
            a.model,
            a.display()
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Merges every eval, probe and alternation table under `runs` into `out`.
pub fn report(runs: &Path, out: &Path) -> Result<()> {
    if !runs.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", runs.display())));
    }
    let (mut evals, mut probes, mut curves) = (Vec::new(), Vec::new(), Vec::new());
    find(runs, EVAL_CSV, out, &mut evals)?;
    find(runs, PROBE_CSV, out, &mut probes)?;
    find(runs, CURVE_CSV, out, &mut curves)?;

    let mut eval = EvalTable { rows: Vec::new() };
    for p in &evals {
        eval.rows.extend(parse_eval(p)?);
    }
    let mut probe_reports = Vec::new();
    for p in &probes {
        parse_probe(p, &mut probe_reports)?;
    }
    let curve = curves.first().map(|p| parse_curve(p)).transpose()?;
    if curves.len() > 1 {
        eprintln!("warning: {} alternation curves found; using {}", curves.len(), curves[0].display());
    }
    if curve.is_none() {
        eprintln!("warning: no alternation curve found under {}", runs.display());
    }

    let (comparison, warnings) = comparison_csv(&eval, &probe_reports);
    if eval.rows.is_empty() && probe_reports.is_empty() {
        eprintln!("warning: no evaluation or probe data found under {}", runs.display());
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let tables = ReportTables {
        eval: (!eval.rows.is_empty()).then_some(&eval),
        probes: (!probe_reports.is_empty()).then_some(&probe_reports[..]),
        curve: curve.as_ref(),
    };
    write_report(&tables, out)?;
    let put = |name: &str, body: &str| {
        let path = out.join(name);
        fs::write(&path, body).map_err(|e| Error::Io { path, source: e })
    };
    put(COMPARISON_CSV, &comparison)?;
    if !eval.rows.is_empty() {
        put(SUCCESS_SVG, &success_svg(&eval))?;
    }
    print!("{comparison}");
    Ok(())
}
