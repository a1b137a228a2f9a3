//! SVG panels and a markdown summary from benchmark outputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::bench::{Method, MetricsRow, RawRecord};
use crate::error::{Error, Result};

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 320.0;
const MARGIN_LEFT: f64 = 60.0;
const MARGIN_RIGHT: f64 = 120.0;
const MARGIN_TOP: f64 = 30.0;
const MARGIN_BOTTOM: f64 = 45.0;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Auc,
    TypeOne,
    Power,
    Log10Time,
}

impl Panel {
    pub const ALL: [Panel; 4] = [Panel::Auc, Panel::TypeOne, Panel::Power, Panel::Log10Time];

    pub fn file_name(self) -> &'static str {
        match self {
            Panel::Auc => "auc.svg",
            Panel::TypeOne => "type1.svg",
            Panel::Power => "power.svg",
            Panel::Log10Time => "time.svg",
        }
    }

    fn title(self) -> &'static str {
        match self {
            Panel::Auc => "AUC",
            Panel::TypeOne => "Type-I error",
            Panel::Power => "Power",
            Panel::Log10Time => "log10 time per run (s)",
        }
    }

    fn value(self, row: &MetricsRow) -> Option<f64> {
        match self {
            Panel::Auc => row.auc,
            Panel::TypeOne => row.type1,
            Panel::Power => row.power,
            Panel::Log10Time => (row.runs_ok > 0 && row.time_seconds > 0.0).then(|| row.time_seconds.log10()),
        }
    }
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(1e-9);
        MARGIN_LEFT + (x - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(1e-9);
        HEIGHT - MARGIN_BOTTOM - (y - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn hline(svg: &mut String, f: &Frame, y: f64, dashed: bool, class: &str) {
    let dash = if dashed { r#" stroke-dasharray="6,4""# } else { "" };
    let _ = writeln!(
        svg,
        r##"<line class="{class}" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#000"{dash} data-y="{y}"/>"##,
        f.px(f.x_min),
        f.py(y),
        f.px(f.x_max),
        f.py(y)
    );
}

/// One panel: a line per method over the inter-block correlation sweep.
pub fn render_panel(panel: Panel, rows: &[MetricsRow], alpha: f64) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::MalformedMetrics("empty sweep".into()));
    }
    let mut series: BTreeMap<Method, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let entry = series.entry(r.method).or_default();
        if let Some(v) = panel.value(r) {
            entry.push((r.rho_inter, v));
        }
    }
    for pts in series.values_mut() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let xs = rows.iter().map(|r| r.rho_inter);
    let (x_min, x_max) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (x_min, x_max) = if x_max > x_min { (x_min, x_max) } else { (x_min - 0.5, x_max + 0.5) };
    let (y_min, y_max) = match panel {
        Panel::Log10Time => {
            let vals: Vec<f64> = series.values().flatten().map(|p| p.1).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if vals.is_empty() {
                (-1.0, 1.0)
            } else {
                ((lo - 0.5).floor(), (hi + 0.5).ceil())
            }
        }
        _ => (0.0, 1.0),
    };
    let f = Frame {
        x_min,
        x_max,
        y_min,
        y_max,
    };

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, WIDTH / 2.0, panel.title());
    let _ = writeln!(
        svg,
        r##"<rect x="{MARGIN_LEFT}" y="{MARGIN_TOP}" width="{}" height="{}" fill="none" stroke="#444"/>"##,
        WIDTH - MARGIN_LEFT - MARGIN_RIGHT,
        HEIGHT - MARGIN_TOP - MARGIN_BOTTOM
    );
    for i in 0..=4 {
        let y = y_min + (y_max - y_min) * i as f64 / 4.0;
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{y:.2}</text>"#, MARGIN_LEFT - 6.0, f.py(y) + 4.0);
    }
    let mut ticks: Vec<f64> = rows.iter().map(|r| r.rho_inter).collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{x}</text>"#, f.px(x), HEIGHT - MARGIN_BOTTOM + 16.0);
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">rho_inter</text>"#,
        (MARGIN_LEFT + WIDTH - MARGIN_RIGHT) / 2.0,
        HEIGHT - 8.0
    );
    match panel {
        Panel::Auc => hline(&mut svg, &f, 0.5, false, "chance"),
        Panel::TypeOne => hline(&mut svg, &f, alpha, true, "alpha"),
        _ => {}
    }
    for (i, (method, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !pts.is_empty() {
            let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y))).collect();
            let _ = writeln!(
                svg,
                r#"<polyline class="series" data-method="{method}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                coords.join(" ")
            );
            for &(x, y) in pts {
                let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, f.px(x), f.py(y));
            }
        }
        let ly = MARGIN_TOP + 14.0 * i as f64 + 8.0;
        let lx = WIDTH - MARGIN_RIGHT + 10.0;
        let _ = writeln!(
            svg,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{method}</text>"#,
            lx + 16.0,
            lx + 20.0,
            ly + 4.0
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into())
}

/// Markdown table of every row, plus failed runs when the raw archive is given.
pub fn summary_markdown(rows: &[MetricsRow], raw: Option<&[RawRecord]>, generated_at: &str) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Benchmark summary\n\nGenerated at {generated_at}.\n");
    let _ = writeln!(md, "| method | rho_inter | runs ok | runs failed | AUC | type-I | power | time (s) | prediction score |");
    let _ = writeln!(md, "|---|---|---|---|---|---|---|---|---|");
    for r in rows {
        let _ = writeln!(
            md,
            "| {} | {} | {} | {} | {} | {} | {} | {:.3} | {} |",
            r.method,
            r.rho_inter,
            r.runs_ok,
            r.runs_failed,
            cell(r.auc),
            cell(r.type1),
            cell(r.power),
            r.time_seconds,
            cell(r.prediction_score)
        );
    }
    if let Some(records) = raw {
        let failed: Vec<&RawRecord> = records.iter().filter(|r| r.error.is_some()).collect();
        let _ = writeln!(md, "\n{} raw records, {} failed.", records.len(), failed.len());
        for r in failed {
            let _ = writeln!(md, "- {} rho={} run {}: {}", r.method, r.rho_inter, r.run, r.error.as_deref().unwrap_or(""));
        }
    }
    md
}

/// Writes the four panels and `summary.md` into `out`; returns the files written.
pub fn render_report(rows: &[MetricsRow], raw: Option<&[RawRecord]>, alpha: f64, out: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::MalformedMetrics("empty sweep".into()));
    }
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    for panel in Panel::ALL {
        let path = out.join(panel.file_name());
        std::fs::write(&path, render_panel(panel, rows, alpha)?)?;
        written.push(path);
    }
    let stamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| format!("unix time {}", d.as_secs()))
        .unwrap_or_else(|_| "unknown time".into());
    let path = out.join("summary.md");
    std::fs::write(&path, summary_markdown(rows, raw, &stamp))?;
    written.push(path);
    Ok(written)
}
