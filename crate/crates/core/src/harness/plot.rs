//! λ-sweep plots: one SVG per drift with ORR on the left axis and ADI on
//! the right, and a CSV of exactly the plotted values.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::report::aggregate;
use super::{PolicyKind, ResultRow};
use crate::error::{Error, Result};

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 70.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

struct Point {
    lambda: String,
    orr: String,
    orr_std: String,
    adi: String,
    adi_std: String,
}

fn fmt(v: f64) -> String {
    format!("{v:.6}")
}

/// Padded `[lo, hi]` so that a constant series still spans some height.
fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let pad = if hi > lo { (hi - lo) * 0.1 } else { lo.abs().max(1.0) * 0.05 };
    (lo - pad, hi + pad)
}

fn svg(drift: f64, pts: &[(f64, f64, f64)], labels: &[Point]) -> String {
    let (x0, x1) = range(pts.iter().map(|p| p.0));
    let (o0, o1) = range(pts.iter().map(|p| p.1));
    let (a0, a1) = range(pts.iter().map(|p| p.2));
    let px = |x: f64| LEFT + (x - x0) / (x1 - x0) * (W - LEFT - RIGHT);
    let py = |y: f64, lo: f64, hi: f64| H - BOTTOM - (y - lo) / (hi - lo) * (H - TOP - BOTTOM);
    let (xr, yb) = (W - RIGHT, H - BOTTOM);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">lambda sweep, drift {drift}</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{LEFT} {TOP} V{yb} H{xr} V{TOP}" fill="none" stroke="black"/>"#
    );
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let y = yb - f * (H - TOP - BOTTOM);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y:.2}" text-anchor="end" fill="steelblue">{:.4}</text>"#,
            LEFT - 6.0,
            o0 + f * (o1 - o0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{y:.2}" fill="darkred">{:.2}</text>"#,
            xr + 6.0,
            a0 + f * (a1 - a0)
        );
        let x = LEFT + f * (xr - LEFT);
        let _ = writeln!(
            s,
            r#"<text x="{x:.2}" y="{}" text-anchor="middle">{:.3}</text>"#,
            yb + 18.0,
            x0 + f * (x1 - x0)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">lambda</text>"#,
        W / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="18" y="{0}" text-anchor="middle" fill="steelblue" transform="rotate(-90 18 {0})">ORR</text>"#,
        H / 2.0
    );
    let _ = writeln!(
        s,
        r#"<text x="{0}" y="{1}" text-anchor="middle" fill="darkred" transform="rotate(90 {0} {1})">ADI</text>"#,
        W - 18.0,
        H / 2.0
    );

    let line = |color: &str, dash: &str, ys: &dyn Fn(&(f64, f64, f64)) -> f64| -> String {
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(k, p)| format!("{}{:.2} {:.2}", if k == 0 { "M" } else { "L" }, px(p.0), ys(p)))
            .collect();
        format!(
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="2"{dash}/>"#,
            d.join(" ")
        )
    };
    let _ = writeln!(s, "{}", line("steelblue", "", &|p| py(p.1, o0, o1)));
    let _ = writeln!(
        s,
        "{}",
        line("darkred", r#" stroke-dasharray="6 4""#, &|p| py(p.2, a0, a1))
    );
    for (p, l) in pts.iter().zip(labels) {
        let _ = writeln!(
            s,
            r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="steelblue" data-lambda="{}" data-orr="{}"/>"#,
            px(p.0),
            py(p.1, o0, o1),
            l.lambda,
            l.orr
        );
        let _ = writeln!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="7" height="7" fill="darkred" data-lambda="{}" data-adi="{}"/>"#,
            px(p.0) - 3.5,
            py(p.2, a0, a1) - 3.5,
            l.lambda,
            l.adi
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Writes `lambda_sweep_d{drift}.svg` and `.csv` for every drift that has
/// IL or kl_based rows, using the final-`window` averages. IL counts as
/// λ = 0. Returns the written paths.
pub fn emit_plots(rows: &[ResultRow], window: usize, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let stats = aggregate(rows, window);
    let mut drifts: Vec<u64> = stats
        .keys()
        .filter(|(_, p, _)| *p != PolicyKind::Nod)
        .map(|(d, _, _)| *d)
        .collect();
    drifts.dedup();
    if drifts.is_empty() {
        return Err(Error::Report("no λ-sweep rows to plot".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for drift_bits in drifts {
        let drift = f64::from_bits(drift_bits);
        let mut sweep: Vec<(f64, f64, f64, f64, f64)> = stats
            .iter()
            .filter(|((d, p, _), _)| *d == drift_bits && *p != PolicyKind::Nod)
            .map(|((_, _, l), s)| (f64::from_bits(*l), s.3, s.4, s.1, s.2))
            .collect();
        sweep.sort_by(|a, b| a.0.total_cmp(&b.0));
        sweep.dedup_by(|a, b| a.0 == b.0);

        let labels: Vec<Point> = sweep
            .iter()
            .map(|p| Point {
                lambda: fmt(p.0),
                orr: fmt(p.1),
                orr_std: fmt(p.2),
                adi: fmt(p.3),
                adi_std: fmt(p.4),
            })
            .collect();
        // Plot from the rounded values so the picture is a view of the CSV.
        let parse = |s: &str| s.parse::<f64>().unwrap_or(f64::NAN);
        let pts: Vec<(f64, f64, f64)> = labels
            .iter()
            .map(|l| (parse(&l.lambda), parse(&l.orr), parse(&l.adi)))
            .collect();

        let mut csv = String::from("lambda,orr_mean,orr_std,adi_mean,adi_std\n");
        for l in &labels {
            let _ = writeln!(csv, "{},{},{},{},{}", l.lambda, l.orr, l.orr_std, l.adi, l.adi_std);
        }
        let csv_path = out_dir.join(format!("lambda_sweep_d{drift}.csv"));
        let svg_path = out_dir.join(format!("lambda_sweep_d{drift}.svg"));
        std::fs::write(&csv_path, csv)?;
        std::fs::write(&svg_path, svg(drift, &pts, &labels))?;
        written.push(svg_path);
        written.push(csv_path);
    }
    Ok(written)
}
