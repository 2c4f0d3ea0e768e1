//! Markdown summary and static SVG charts from the metric files of a run.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::presets::{Cell, MetricsFile, Table, PRESETS};

/// Tables longer than this are summarised instead of printed.
const MAX_MD_ROWS: usize = 40;

#[derive(Debug, Clone, Copy)]
enum Kind {
    /// One bar per row, labelled by the joined label columns.
    Bar { labels: &'static [&'static str], y: &'static str },
    /// One polyline per distinct value of `group`.
    Line { x: &'static str, y: &'static str, group: &'static str },
    Scatter { x: &'static str, y: &'static str, group: &'static str },
}

#[derive(Debug, Clone, Copy)]
struct ChartSpec {
    preset: &'static str,
    table: &'static str,
    name: &'static str,
    title: &'static str,
    kind: Kind,
}

const fn bar(preset: &'static str, table: &'static str, name: &'static str, title: &'static str, labels: &'static [&'static str], y: &'static str) -> ChartSpec {
    ChartSpec { preset, table, name, title, kind: Kind::Bar { labels, y } }
}

const fn line(preset: &'static str, table: &'static str, name: &'static str, title: &'static str, x: &'static str, y: &'static str, group: &'static str) -> ChartSpec {
    ChartSpec { preset, table, name, title, kind: Kind::Line { x, y, group } }
}

const CHARTS: &[ChartSpec] = &[
    bar("dissociation", "dissociation", "dref", "Mean Δ_refine per policy", &["policy"], "dref_mean"),
    bar("dissociation", "dissociation", "nll", "Mixture NLL per policy", &["policy"], "nll"),
    bar("dissociation", "dissociation", "leff", "Mean L̂_eff per policy", &["policy"], "leff_mean"),
    bar("cluster-rank", "cluster_rank", "rank", "Mean cluster rank of selected experts", &["policy"], "mean_rank"),
    bar("expert-quality", "expert_quality", "angles", "Angular deviation from the blended velocity", &["status"], "angle_deg"),
    bar("disagreement", "quartiles", "quartiles", "Distance to Top-2 sample by disagreement quartile", &["quartile"], "distance_mean"),
    bar("local-error", "local_error", "eps", "Local truncation error (coarse step)", &["policy"], "eps_h"),
    line("leff-trace", "leff_trace", "cumulative", "Running max of ‖J‖ (median over samples)", "t", "cum_p50", "policy"),
    line("leff-trace", "leff_trace", "iqr", "Cumulative IQR of ‖J‖", "t", "cum_iqr", "policy"),
    bar("refinement", "refinement", "dref", "Mean Δ_refine per policy", &["policy"], "dref_mean"),
    ChartSpec {
        preset: "refinement",
        table: "samples",
        name: "scatter",
        title: "Δ_refine against L̂_eff",
        kind: Kind::Scatter { x: "leff", y: "delta_refine", group: "policy" },
    },
    line("decomposition", "decomposition", "router", "Router term ‖Σ v_k ∇w_k‖ over time", "t", "router_mean", "policy"),
    line("decomposition", "decomposition", "expert", "Expert term ‖Σ w_k ∇v_k‖ over time", "t", "expert_mean", "policy"),
    line("temp-sweep", "temp_sweep", "entropy", "Routing entropy against temperature", "temperature", "entropy", ""),
    line("temp-sweep", "temp_sweep", "dref", "Δ_refine against temperature", "temperature", "dref_mean", ""),
    line("topp-sweep", "topp_sweep", "dref", "Δ_refine against top-p", "p", "dref_mean", ""),
    bar("counterfactual", "counterfactual", "dref", "Counterfactual routing: mean Δ_refine", &["condition"], "dref_mean"),
    bar("failure-modes", "failure_modes", "poor", "Poor-convergence rate", &["policy", "thresholds"], "poor_convergence"),
    bar("switching", "predictors", "auc", "Top-1 failure predictors (AUC)", &["predictor"], "auc_high_dref"),
    bar("generalization", "generalization", "dref", "Δ_refine by regime and distribution", &["policy", "regime", "distribution"], "dref_mean"),
    bar("strong-specialization", "alignment", "angles", "Angular deviation by system", &["system", "status"], "angle_deg"),
    line("convergence", "convergence", "exceed", "Exceedance fraction against step count", "steps", "exceed_fraction", "field"),
    line("leff-consistency", "leff_consistency", "leff", "L̂_eff against step size", "h", "leff_mean", "field"),
];

#[derive(Debug, Clone, Default)]
pub struct ReportSummary {
    pub markdown: PathBuf,
    pub charts: Vec<PathBuf>,
    pub presets_found: Vec<String>,
}

pub fn read_table(path: &Path) -> anyhow::Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    let mut t = Table {
        name: name.to_string(),
        header,
        rows: Vec::new(),
    };
    for rec in r.records() {
        t.rows.push(rec?.iter().map(|c| Cell(c.to_string())).collect());
    }
    Ok(t)
}

fn load_preset(dir: &Path) -> anyhow::Result<(Vec<Table>, Option<MetricsFile>)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let tables = files.iter().map(|p| read_table(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let metrics_path = dir.join("metrics.json");
    let metrics = if metrics_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(metrics_path)?)?)
    } else {
        None
    };
    Ok((tables, metrics))
}

/// Render `report/summary.md` and the charts under `run_dir/report`.
pub fn write_report(run_dir: &Path) -> anyhow::Result<ReportSummary> {
    let exp_dir = run_dir.join("experiments");
    let out_dir = run_dir.join("report");
    std::fs::create_dir_all(&out_dir)?;
    let mut md = String::from("# Experiment report\n\n");
    let mut summary = ReportSummary::default();
    for (preset, _) in PRESETS {
        let dir = exp_dir.join(preset);
        if !dir.is_dir() {
            continue;
        }
        let (tables, metrics) = load_preset(&dir)?;
        if tables.is_empty() || tables.iter().all(|t| t.rows.is_empty()) {
            let _ = writeln!(md, "## {preset}\n\nNo metric rows were found in `{}`.\n", dir.display());
            continue;
        }
        summary.presets_found.push(preset.to_string());
        let _ = writeln!(md, "## {preset}\n");
        if let Some(m) = &metrics {
            for note in &m.notes {
                let _ = writeln!(md, "- {note}");
            }
            if !m.notes.is_empty() {
                md.push('\n');
            }
        }
        for spec in CHARTS.iter().filter(|c| c.preset == *preset) {
            let Some(t) = tables.iter().find(|t| t.name == spec.table) else { continue };
            let Some(svg) = render(spec, t) else { continue };
            let file = format!("{}_{}.svg", preset, spec.name);
            std::fs::write(out_dir.join(&file), svg)?;
            let _ = writeln!(md, "![{}]({file})\n", spec.title);
            summary.charts.push(out_dir.join(file));
        }
        for t in &tables {
            md.push_str(&markdown_table(t));
        }
    }
    if summary.presets_found.is_empty() {
        let _ = writeln!(
            md,
            "No experiment metrics found under `{}`. Run `ddmlab experiment <name> --out {}` first.",
            exp_dir.display(),
            run_dir.display()
        );
    }
    let path = out_dir.join("summary.md");
    std::fs::write(&path, md)?;
    summary.markdown = path;
    Ok(summary)
}

fn fmt_cell(s: &str) -> String {
    match s.parse::<f64>() {
        Ok(v) if s.contains('.') || s.contains('e') => fmt_num(v),
        _ => s.to_string(),
    }
}

fn fmt_num(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-3 {
        format!("{v:.3e}")
    } else {
        let digits = (3 - v.abs().log10().floor() as i32).clamp(0, 6) as usize;
        format!("{v:.digits$}")
    }
}

pub fn markdown_table(t: &Table) -> String {
    let mut s = format!("**{}**", t.name);
    if t.rows.len() > MAX_MD_ROWS {
        let _ = writeln!(s, " ({} rows; see `{}.csv`)\n", t.rows.len(), t.name);
        return s;
    }
    s.push_str("\n\n");
    let _ = writeln!(s, "| {} |", t.header.join(" | "));
    let _ = writeln!(s, "|{}", "---|".repeat(t.header.len()));
    for row in &t.rows {
        let cells: Vec<String> = row.iter().map(|c| fmt_cell(&c.0)).collect();
        let _ = writeln!(s, "| {} |", cells.join(" | "));
    }
    s.push('\n');
    s
}

fn render(spec: &ChartSpec, t: &Table) -> Option<String> {
    let col = |name: &str| t.header.iter().position(|h| h == name);
    match spec.kind {
        Kind::Bar { labels, y } => {
            let yi = col(y)?;
            let li: Vec<usize> = labels.iter().map(|l| col(l)).collect::<Option<_>>()?;
            let bars: Vec<(String, f64)> = t
                .rows
                .iter()
                .filter_map(|r| {
                    let v = r[yi].0.parse::<f64>().ok()?;
                    let label = li.iter().map(|&i| r[i].0.as_str()).collect::<Vec<_>>().join(" / ");
                    Some((label, v))
                })
                .collect();
            (!bars.is_empty()).then(|| bar_chart(spec.title, y, &bars))
        }
        Kind::Line { x, y, group } | Kind::Scatter { x, y, group } => {
            let (xi, yi) = (col(x)?, col(y)?);
            let gi = col(group);
            let mut series: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
            for r in &t.rows {
                let (Ok(xv), Ok(yv)) = (r[xi].0.parse::<f64>(), r[yi].0.parse::<f64>()) else { continue };
                let g = gi.map_or(String::new(), |i| r[i].0.clone());
                match series.iter_mut().find(|(n, _)| *n == g) {
                    Some((_, pts)) => pts.push((xv, yv)),
                    None => series.push((g, vec![(xv, yv)])),
                }
            }
            if series.is_empty() {
                return None;
            }
            let lines = matches!(spec.kind, Kind::Line { .. });
            Some(xy_chart(spec.title, x, y, &series, lines))
        }
    }
}

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 90.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn header(title: &str) -> String {
    format!(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"11\">\n<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n<text x=\"{:.1}\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
        W / 2.0,
        escape(title)
    )
}

/// Range padded to include zero when the data sit on one side of it.
fn span(values: impl Iterator<Item = f64>, include_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    if include_zero {
        lo = lo.min(0.0);
        hi = hi.max(0.0);
    }
    if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
        lo -= 0.5;
        hi += 0.5;
    }
    (lo, hi)
}

fn axes(s: &mut String, ylo: f64, yhi: f64, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, H - BOTTOM, TOP);
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>");
    let _ = writeln!(s, "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>");
    for i in 0..=4 {
        let v = ylo + (yhi - ylo) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(s, "<line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{x0}\" y2=\"{y:.1}\" stroke=\"black\"/>", x0 - 4.0);
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>", x0 - 6.0, y + 4.0, fmt_num(v));
    }
    let _ = writeln!(
        s,
        "<text x=\"14\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.1})\">{}</text>",
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

pub fn bar_chart(title: &str, ylabel: &str, bars: &[(String, f64)]) -> String {
    let mut s = header(title);
    let (lo, hi) = span(bars.iter().map(|b| b.1), true);
    axes(&mut s, lo, hi, ylabel);
    let plot_w = W - RIGHT - LEFT;
    let slot = plot_w / bars.len() as f64;
    let ypos = |v: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (v - lo) / (hi - lo);
    for (i, (label, v)) in bars.iter().enumerate() {
        let x = LEFT + slot * i as f64 + slot * 0.15;
        let (ya, yb) = (ypos(*v), ypos(0.0));
        let _ = writeln!(
            s,
            "<rect x=\"{x:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{}\"/>",
            ya.min(yb),
            slot * 0.7,
            (ya - yb).abs(),
            PALETTE[i % PALETTE.len()]
        );
        let cx = x + slot * 0.35;
        let _ = writeln!(s, "<text x=\"{cx:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", ya.min(yb) - 4.0, fmt_num(*v));
        let ly = H - BOTTOM + 14.0;
        let _ = writeln!(
            s,
            "<text x=\"{cx:.1}\" y=\"{ly:.1}\" text-anchor=\"end\" transform=\"rotate(-30 {cx:.1} {ly:.1})\">{}</text>",
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

pub fn xy_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(String, Vec<(f64, f64)>)], lines: bool) -> String {
    let mut s = header(title);
    let pts = || series.iter().flat_map(|(_, p)| p.iter().copied());
    let (xlo, xhi) = span(pts().map(|p| p.0), false);
    let (ylo, yhi) = span(pts().map(|p| p.1), lines);
    axes(&mut s, ylo, yhi, ylabel);
    let xpos = |v: f64| LEFT + (W - RIGHT - LEFT) * (v - xlo) / (xhi - xlo);
    let ypos = |v: f64| (H - BOTTOM) - (H - BOTTOM - TOP) * (v - ylo) / (yhi - ylo);
    for i in 0..=4 {
        let v = xlo + (xhi - xlo) * i as f64 / 4.0;
        let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", xpos(v), H - BOTTOM + 16.0, fmt_num(v));
    }
    let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>", (LEFT + W - RIGHT) / 2.0, H - BOTTOM + 36.0, escape(xlabel));
    for (i, (name, p)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if lines {
            let mut sorted = p.clone();
            sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
            let path: Vec<String> = sorted.iter().map(|&(x, y)| format!("{:.1},{:.1}", xpos(x), ypos(y))).collect();
            let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", path.join(" "));
        }
        for &(x, y) in p {
            let r = if lines { 3.0 } else { 2.0 };
            let _ = writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{r}\" fill=\"{color}\" fill-opacity=\"0.7\"/>", xpos(x), ypos(y));
        }
        if !name.is_empty() {
            let ly = TOP + 16.0 * i as f64;
            let lx = W - RIGHT + 12.0;
            let _ = writeln!(s, "<rect x=\"{lx:.1}\" y=\"{:.1}\" width=\"10\" height=\"10\" fill=\"{color}\"/>", ly - 9.0);
            let _ = writeln!(s, "<text x=\"{:.1}\" y=\"{ly:.1}\">{}</text>", lx + 14.0, escape(name));
        }
    }
    s.push_str("</svg>\n");
    s
}
