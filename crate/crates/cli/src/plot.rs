//! Deterministic SVG line plots of trajectory CSV files.

use std::fmt::Write as _;

use anyhow::{anyhow, bail, Result};

use crate::io::ENVELOPE_COLUMNS;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum PlotKind {
    Temperature,
    Controls,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;

/// Temperature axis limits, K.
pub const TEMPERATURE_RANGE: [f64; 2] = [341.0, 358.0];

struct Frame {
    x: [f64; 2],
    y: [f64; 2],
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x[0]) / (self.x[1] - self.x[0]) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let y = y.clamp(self.y[0], self.y[1]);
        H - BOTTOM - (y - self.y[0]) / (self.y[1] - self.y[0]) * (H - TOP - BOTTOM)
    }

    fn points(&self, xs: &[f64], ys: &[f64]) -> String {
        let mut s = String::new();
        for (i, (x, y)) in xs.iter().zip(ys).enumerate() {
            if i > 0 {
                s.push(' ');
            }
            let _ = write!(s, "{:.2},{:.2}", self.px(*x), self.py(*y));
        }
        s
    }
}

fn ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect()
}

fn axes(svg: &mut String, f: &Frame, xlabel: &str, ylabel: &str) {
    let (x0, x1, y0, y1) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
    let _ = writeln!(svg, r#"<rect x="{x0}" y="{y0}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y1 - y0);
    for t in ticks(f.x[0], f.x[1], 5) {
        let px = f.px(t);
        let _ = writeln!(svg, r#"<line x1="{px:.2}" y1="{y1}" x2="{px:.2}" y2="{}" stroke="black"/>"#, y1 + 5.0);
        let _ = writeln!(svg, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{t:.1}</text>"#, y1 + 20.0);
    }
    for t in ticks(f.y[0], f.y[1], 5) {
        let py = f.py(t);
        let _ = writeln!(svg, r#"<line x1="{}" y1="{py:.2}" x2="{x0}" y2="{py:.2}" stroke="black"/>"#, x0 - 5.0);
        let _ = writeln!(svg, r#"<text x="{}" y="{:.2}" text-anchor="end">{t:.2}</text>"#, x0 - 8.0, py + 4.0);
    }
    let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{xlabel}</text>"#, (x0 + x1) / 2.0, H - 10.0);
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{:.1}" text-anchor="middle" transform="rotate(-90 15 {:.1})">{ylabel}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );
}

fn polyline(svg: &mut String, f: &Frame, xs: &[f64], ys: &[f64], style: &str) {
    let _ = writeln!(svg, r#"<polyline fill="none" {style} points="{}"/>"#, f.points(xs, ys));
}

fn col<'a>(header: &[String], rows: &'a [Vec<f64>], name: &str) -> Result<Vec<f64>> {
    let j = header.iter().position(|h| h == name).ok_or_else(|| anyhow!("trajectory has no column {name}"))?;
    Ok(rows.iter().map(|r: &'a Vec<f64>| r[j]).collect())
}

fn x_range(t: &[f64]) -> [f64; 2] {
    let (lo, hi) = (t[0], t[t.len() - 1]);
    if hi > lo {
        [lo, hi]
    } else {
        [lo, lo + 1.0]
    }
}

/// Renders `kind` from trajectory CSV columns. `boiling` holds the light and
/// heavy boiling points drawn dashed on temperature plots.
pub fn emit_plot(header: &[String], rows: &[Vec<f64>], kind: PlotKind, boiling: [f64; 2]) -> Result<String> {
    if rows.is_empty() {
        bail!("trajectory has no rows");
    }
    let t = col(header, rows, "t")?;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    svg += &format!("<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n");
    match kind {
        PlotKind::Temperature => {
            let f = Frame { x: x_range(&t), y: TEMPERATURE_RANGE };
            let n = (1..).take_while(|i| header.iter().any(|h| *h == format!("T_{i}"))).count();
            if n == 0 {
                bail!("trajectory has no temperature columns");
            }
            for i in 2..n {
                polyline(&mut svg, &f, &t, &col(header, rows, &format!("T_{i}"))?, r##"stroke="#9e9e9e" stroke-width="0.8""##);
            }
            polyline(&mut svg, &f, &t, &col(header, rows, "T_1")?, r##"stroke="#d62728" stroke-width="2" class="reboiler""##);
            if n > 1 {
                let top = col(header, rows, &format!("T_{n}"))?;
                polyline(&mut svg, &f, &t, &top, r##"stroke="#1f77b4" stroke-width="2" class="condenser""##);
            }
            for tb in boiling {
                let py = f.py(tb);
                let _ = writeln!(
                    svg,
                    r#"<line class="boiling" x1="{LEFT}" y1="{py:.2}" x2="{}" y2="{py:.2}" stroke="black" stroke-dasharray="6,4"/>"#,
                    W - RIGHT
                );
            }
            axes(&mut svg, &f, "time (min)", "temperature (K)");
        }
        PlotKind::Controls => {
            let l = col(header, rows, "L_T")?;
            let v = col(header, rows, "V_B")?;
            let has_env = ENVELOPE_COLUMNS.iter().all(|c| header.iter().any(|h| h == c));
            let mut lo = l.iter().chain(&v).copied().fold(f64::INFINITY, f64::min);
            let mut hi = l.iter().chain(&v).copied().fold(f64::NEG_INFINITY, f64::max);
            let bands = if has_env {
                let b = ["L_T", "V_B"].map(|c| (col(header, rows, &format!("{c}_min")), col(header, rows, &format!("{c}_max"))));
                let mut out = Vec::new();
                for (a, z) in b {
                    let (a, z) = (a?, z?);
                    lo = a.iter().copied().fold(lo, f64::min);
                    hi = z.iter().copied().fold(hi, f64::max);
                    out.push((a, z));
                }
                out
            } else {
                vec![]
            };
            let pad = ((hi - lo) * 0.05).max(1e-3);
            let f = Frame { x: x_range(&t), y: [lo - pad, hi + pad] };
            let colours = ["#1f77b4", "#d62728"];
            for ((a, z), c) in bands.iter().zip(colours) {
                let mut pts = f.points(&t, a);
                let rt: Vec<f64> = t.iter().rev().copied().collect();
                let rz: Vec<f64> = z.iter().rev().copied().collect();
                pts.push(' ');
                pts += &f.points(&rt, &rz);
                let _ = writeln!(svg, r#"<polygon class="envelope" fill="{c}" fill-opacity="0.25" stroke="none" points="{pts}"/>"#);
            }
            polyline(&mut svg, &f, &t, &l, r##"stroke="#1f77b4" stroke-width="1.5" class="reflux""##);
            polyline(&mut svg, &f, &t, &v, r##"stroke="#d62728" stroke-width="1.5" class="boilup""##);
            axes(&mut svg, &f, "time (min)", "L_T, V_B (kmol/min)");
        }
    }
    svg += "</svg>\n";
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(with_env: bool) -> (Vec<String>, Vec<Vec<f64>>) {
        let mut header: Vec<String> = ["t", "T_1", "T_2", "T_3", "L_T", "V_B"].map(String::from).to_vec();
        let mut rows = vec![
            vec![0.0, 356.0, 350.0, 340.0, 2.5, 3.0],
            vec![1.0, 355.0, 349.0, 342.0, 2.6, 3.1],
        ];
        if with_env {
            header.extend(ENVELOPE_COLUMNS.map(String::from));
            for r in &mut rows {
                let (l, v) = (r[4], r[5]);
                r.extend([l - 0.1, l + 0.1, v - 0.1, v + 0.1, 0.05, 0.05]);
            }
        }
        (header, rows)
    }

    #[test]
    fn temperature_plot_clips_to_axis_range() {
        let (h, r) = traj(false);
        let svg = emit_plot(&h, &r, PlotKind::Temperature, [341.9, 357.4]).unwrap();
        assert_eq!(svg.matches("class=\"boiling\"").count(), 2);
        assert!(svg.contains("class=\"reboiler\"") && svg.contains("class=\"condenser\""));
        // 340 K lies below the axis and is drawn on the lower frame edge
        assert!(svg.contains(&format!("{:.2},{:.2}", LEFT, H - BOTTOM)));
        assert_eq!(svg, emit_plot(&h, &r, PlotKind::Temperature, [341.9, 357.4]).unwrap());
    }

    #[test]
    fn envelope_band_only_with_columns() {
        let (h, r) = traj(false);
        assert!(!emit_plot(&h, &r, PlotKind::Controls, [0.0, 1.0]).unwrap().contains("envelope"));
        let (h, r) = traj(true);
        assert_eq!(emit_plot(&h, &r, PlotKind::Controls, [0.0, 1.0]).unwrap().matches("class=\"envelope\"").count(), 2);
    }

    #[test]
    fn missing_columns_are_errors() {
        let h = vec!["t".to_string(), "x".to_string()];
        assert!(emit_plot(&h, &[vec![0.0, 1.0]], PlotKind::Controls, [0.0, 1.0]).is_err());
        assert!(emit_plot(&h, &[], PlotKind::Temperature, [0.0, 1.0]).is_err());
    }
}
