//! Dependency-free SVG line plots with fixed styling, so reruns are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::channel::{budget_trace, ChannelParams, ChannelTrace};
use crate::error::{Error, Result};

use super::{SweepResult, SweepRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 170.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinePlot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

/// About five round tick values covering `[lo, hi]`.
fn ticks(lo: f64, hi: f64) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= 6.0).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() as i64;
    let end = (hi / step).floor() as i64;
    (start..=end).map(|i| i as f64 * step).collect()
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e4 || v.abs() < 1e-2 {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.2}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LinePlot {
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        let pts: Vec<&(f64, f64)> = self.series.iter().flat_map(|s| &s.points).filter(|(x, y)| x.is_finite() && y.is_finite()).collect();
        if pts.is_empty() {
            return None;
        }
        let fold = |f: fn(&(f64, f64)) -> f64| {
            pts.iter().map(|p| f(p)).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        let (mut x0, mut x1) = fold(|p| p.0);
        let (mut y0, mut y1) = fold(|p| p.1);
        if x1 - x0 < 1e-12 {
            x0 -= 1.0;
            x1 += 1.0;
        }
        let pad = ((y1 - y0) * 0.08).max(1e-3 * y1.abs().max(1.0));
        y0 -= pad;
        y1 += pad;
        Some((x0, x1, y0, y1))
    }

    pub fn to_svg(&self) -> Result<String> {
        let (x0, x1, y0, y1) = self.bounds().ok_or_else(|| Error::Value(format!("plot {:?} has no finite points", self.title)))?;
        let pw = WIDTH - MARGIN_L - MARGIN_R;
        let ph = HEIGHT - MARGIN_T - MARGIN_B;
        let sx = |x: f64| MARGIN_L + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| MARGIN_T + ph - (y - y0) / (y1 - y0) * ph;
        let mut s = String::new();
        let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#);
        let _ = writeln!(s, r#"<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="22" text-anchor="middle" font-size="14">{}</text>"#, MARGIN_L + pw / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
        for t in ticks(x0, x1) {
            let x = sx(t);
            let _ = writeln!(s, r##"<line x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/>"##, MARGIN_T, MARGIN_T + ph);
            let _ = writeln!(s, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, MARGIN_T + ph + 16.0, fmt_tick(t));
        }
        for t in ticks(y0, y1) {
            let y = sy(t);
            let _ = writeln!(s, r##"<line x1="{MARGIN_L}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/>"##, MARGIN_L + pw);
            let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, MARGIN_L - 6.0, y + 4.0, fmt_tick(t));
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, MARGIN_L + pw / 2.0, HEIGHT - 14.0, escape(&self.x_label));
        let (lx, ly) = (18.0, MARGIN_T + ph / 2.0);
        let _ = writeln!(s, r#"<text x="{lx}" y="{ly:.1}" text-anchor="middle" transform="rotate(-90 {lx} {ly:.1})">{}</text>"#, escape(&self.y_label));
        for (i, ser) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = ser.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()).map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let dash = if ser.dashed { r#" stroke-dasharray="6 4""# } else { "" };
            let _ = writeln!(s, r#"<polyline class="series" fill="none" stroke="{color}" stroke-width="2"{dash} points="{}"/>"#, pts.join(" "));
            for p in &pts {
                let (cx, cy) = p.split_once(',').expect("formatted point");
                let _ = writeln!(s, r#"<circle class="point" cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            }
            let ly = MARGIN_T + 12.0 + 18.0 * i as f64;
            let lx = MARGIN_L + pw + 12.0;
            let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{:.1}" y2="{ly}" stroke="{color}" stroke-width="2"{dash}/>"#, lx + 22.0);
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, lx + 28.0, ly + 4.0, escape(&ser.label));
        }
        s.push_str("</svg>\n");
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_svg()?).map_err(|e| Error::io(path, e))
    }
}

fn curve_label(r: &SweepRow) -> String {
    if r.variant == "E1D1" {
        "E1D1 (joint)".into()
    } else if r.ndpca {
        format!("{} NDPCA", r.variant)
    } else {
        format!("{} naive", r.variant)
    }
}

/// One series per key, points sorted by budget.
fn group_rows<K: Ord>(rows: &[&SweepRow], key: impl Fn(&SweepRow) -> K, label: impl Fn(&SweepRow) -> String, y: impl Fn(&SweepRow) -> f64) -> Vec<Series> {
    let mut groups: BTreeMap<K, (String, Vec<(f64, f64)>)> = BTreeMap::new();
    for r in rows {
        groups.entry(key(r)).or_insert_with(|| (label(r), Vec::new())).1.push((r.budget as f64, y(r)));
    }
    groups
        .into_values()
        .map(|(label, mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            Series { label, points, dashed: false }
        })
        .collect()
}

fn weight_key(w: f64) -> i64 {
    (w * 1e9).round() as i64
}

/// Writes the figure analogues for a sweep table; returns the files written.
///
/// `bandwidth.svg` follows the dimension budget of `trace` (a built-in
/// synthetic trace when absent). `psnr_task_agnostic.svg` and
/// `psnr_task_aware.svg` plot PSNR against total bandwidth for the rows
/// without and with a perceptual weight; `rdp.svg` plots the task loss of
/// task-aware rows, one curve per weight.
pub fn emit_plots(sweep_csv: &Path, out_dir: &Path, trace: Option<(&ChannelTrace, &ChannelParams)>) -> Result<Vec<PathBuf>> {
    let sweep = SweepResult::read_csv(sweep_csv)?;
    if sweep.rows.is_empty() {
        return Err(Error::Value(format!("{} has no rows to plot", sweep_csv.display())));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let default_params = ChannelParams::default();
    let owned;
    let (tr, params) = match trace {
        Some(t) => t,
        None => {
            owned = super::demo_capacity_trace(&default_params)?;
            (&owned, &default_params)
        }
    };
    let budgets = budget_trace(tr, params)?;
    let per_dim = crate::channel::source_bitrate(1, params)?;
    let plot = LinePlot {
        title: "Bandwidth retention under a varying channel".into(),
        x_label: "Time [s]".into(),
        y_label: "Total bandwidth".into(),
        series: vec![
            Series {
                label: "capacity / rate per float".into(),
                points: tr.samples.iter().map(|s| (s.time_s, s.capacity_bps / per_dim)).collect(),
                dashed: true,
            },
            Series {
                label: "transmitted floats".into(),
                points: tr.samples.iter().zip(&budgets).map(|(s, &b)| (s.time_s, b as f64)).collect(),
                dashed: false,
            },
        ],
    };
    let p = out_dir.join("bandwidth.svg");
    plot.write(&p)?;
    written.push(p);

    let agnostic: Vec<&SweepRow> = sweep.rows.iter().filter(|r| r.weight.is_none()).collect();
    let aware: Vec<&SweepRow> = sweep.rows.iter().filter(|r| r.weight.is_some()).collect();
    let psnr_plot = |rows: &[&SweepRow], title: &str, file: &str, written: &mut Vec<PathBuf>| -> Result<()> {
        if rows.is_empty() {
            return Ok(());
        }
        let with_weight = rows.iter().any(|r| r.weight.is_some_and(|w| w != rows[0].weight.unwrap_or(0.0)));
        let series = group_rows(
            rows,
            |r| (r.variant.clone(), r.ndpca, r.weight.map(weight_key)),
            |r| match (with_weight, r.weight) {
                (true, Some(w)) => format!("{} (w={w})", curve_label(r)),
                _ => curve_label(r),
            },
            |r| r.psnr_db,
        );
        let plot = LinePlot { title: title.into(), x_label: "Total bandwidth".into(), y_label: "PSNR [dB]".into(), series };
        let p = out_dir.join(file);
        plot.write(&p)?;
        written.push(p);
        Ok(())
    };
    psnr_plot(&agnostic, "Task-agnostic training", "psnr_task_agnostic.svg", &mut written)?;
    psnr_plot(&aware, "Task-aware training", "psnr_task_aware.svg", &mut written)?;

    if !aware.is_empty() {
        let series = group_rows(
            &aware,
            |r| (r.weight.map(weight_key), r.variant.clone(), r.ndpca),
            |r| format!("perceptual weight {}", r.weight.unwrap_or(0.0)),
            |r| r.task,
        );
        let plot = LinePlot {
            title: "Rate-distortion-perception".into(),
            x_label: "Total bandwidth".into(),
            y_label: "Distortion (score-matching loss)".into(),
            series,
        };
        let p = out_dir.join("rdp.svg");
        plot.write(&p)?;
        written.push(p);
    }
    Ok(written)
}
