//! Figure data and self-contained SVG / PGM renderings.

use std::fmt::Write as _;

use super::pipeline::{SweepRow, SweepSlope, MODES};
use crate::error::{Error, Result};
use crate::evalstat::{rows_for, Metric, MetricsRow, ModelTag};
use crate::volume::Volume;

/// Five-number summary of one model's values on one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxStats {
    pub model: ModelTag,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
    pub n: usize,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(rows: &[MetricsRow], metric: Metric) -> Vec<BoxStats> {
    ModelTag::ALL
        .into_iter()
        .filter_map(|model| {
            let mut v: Vec<f64> = rows_for(rows, model).iter().map(|r| metric.of(r)).collect();
            if v.is_empty() {
                return None;
            }
            v.sort_by(f64::total_cmp);
            Some(BoxStats {
                model,
                min: v[0],
                q1: quantile(&v, 0.25),
                median: quantile(&v, 0.5),
                q3: quantile(&v, 0.75),
                max: v[v.len() - 1],
                mean: v.iter().sum::<f64>() / v.len() as f64,
                n: v.len(),
            })
        })
        .collect()
}

pub fn box_csv(boxes: &[BoxStats]) -> String {
    let mut s = String::from("model,min,q1,median,q3,max,mean,n\n");
    for b in boxes {
        let _ = writeln!(s, "{},{},{},{},{},{},{},{}", b.model.tag(), b.min, b.q1, b.median, b.q3, b.max, b.mean, b.n);
    }
    s
}

const W: f64 = 480.0;
const H: f64 = 320.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 30.0;
const BOTTOM: f64 = 50.0;
const COLOURS: [&str; 3] = ["#7f7f7f", "#1f77b4", "#d62728"];

fn colour(model: ModelTag) -> &'static str {
    COLOURS[ModelTag::ALL.iter().position(|m| *m == model).expect("known model")]
}

/// Finite data range padded by 5%, never empty.
fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { lo.abs().max(1e-3) * 0.05 };
    (lo - pad, hi + pad)
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x.0) / (self.x.1 - self.x.0) * (W - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        let y = y.clamp(self.y.0, self.y.1);
        H - BOTTOM - (y - self.y.0) / (self.y.1 - self.y.0) * (H - TOP - BOTTOM)
    }

    fn frame(&self, svg: &mut String, title: &str, ylabel: &str) {
        let _ = writeln!(
            svg,
            r##"<rect x="{LEFT}" y="{TOP}" width="{}" height="{}" fill="none" stroke="#000"/>"##,
            W - LEFT - RIGHT,
            H - TOP - BOTTOM
        );
        let _ = writeln!(svg, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{title}</text>"#, W / 2.0);
        let _ = writeln!(
            svg,
            r#"<text x="14" y="{}" font-size="11" transform="rotate(-90 14 {})" text-anchor="middle">{ylabel}</text>"#,
            H / 2.0,
            H / 2.0
        );
        for k in 0..=4 {
            let v = self.y.0 + (self.y.1 - self.y.0) * k as f64 / 4.0;
            let y = self.py(v);
            let _ = writeln!(
                svg,
                r##"<line x1="{}" y1="{y:.1}" x2="{LEFT}" y2="{y:.1}" stroke="#000"/><text x="{}" y="{:.1}" font-size="10" text-anchor="end">{}</text>"##,
                LEFT - 4.0,
                LEFT - 6.0,
                y + 3.0,
                tick(v)
            );
        }
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == 0.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.4}")
    }
}

fn svg_open(data: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n<!-- data\n{}-->\n<rect width=\"100%\" height=\"100%\" fill=\"#fff\"/>\n",
        data.replace("--", "- -")
    )
}

/// Boxplot (whiskers at min/max) of one metric per model.
pub fn box_svg(boxes: &[BoxStats], metric: Metric) -> String {
    let mut svg = svg_open(&box_csv(boxes));
    let ax = Axes {
        x: (0.0, boxes.len().max(1) as f64),
        y: span(boxes.iter().flat_map(|b| [b.min, b.max])),
    };
    ax.frame(&mut svg, &format!("{} per model", metric.name().to_uppercase()), metric.name());
    for (i, b) in boxes.iter().enumerate() {
        let cx = ax.px(i as f64 + 0.5);
        let half = 0.3 * (ax.px(1.0) - ax.px(0.0)) / 2.0;
        let c = colour(b.model);
        let _ = writeln!(
            svg,
            r#"<line x1="{cx:.1}" y1="{:.1}" x2="{cx:.1}" y2="{:.1}" stroke="{c}"/>"#,
            ax.py(b.min),
            ax.py(b.max)
        );
        let _ = writeln!(
            svg,
            r#"<rect x="{:.1}" y="{:.1}" width="{:.1}" height="{:.1}" fill="{c}" fill-opacity="0.3" stroke="{c}"/>"#,
            cx - half,
            ax.py(b.q3),
            2.0 * half,
            (ax.py(b.q1) - ax.py(b.q3)).max(0.5)
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-width="2"/>"#,
            cx - half,
            ax.py(b.median),
            cx + half,
            ax.py(b.median)
        );
        let _ = writeln!(
            svg,
            r#"<text x="{cx:.1}" y="{}" font-size="11" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            b.model.label()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Metric against dose: mean ± sd per model with the fitted regression line.
pub fn dose_svg(rows: &[SweepRow], slopes: &[SweepSlope], metric: Metric) -> String {
    let mine: Vec<&SweepRow> = rows.iter().filter(|r| r.metric == metric).collect();
    let mut data = String::from("model,dose,mean,sd,n\n");
    for r in &mine {
        let _ = writeln!(data, "{},{},{},{},{}", r.model.tag(), r.dose, r.mean, r.sd, r.n);
    }
    for s in slopes.iter().filter(|s| s.metric == metric) {
        let _ = writeln!(data, "fit {}: slope {} intercept {} p {}", s.model.tag(), s.slope, s.intercept, s.p_slope);
    }
    let mut svg = svg_open(&data);
    let ax = Axes {
        x: span(mine.iter().map(|r| r.dose)),
        y: span(mine.iter().flat_map(|r| [r.mean - r.sd, r.mean + r.sd])),
    };
    ax.frame(&mut svg, &format!("{} vs dose", metric.name().to_uppercase()), metric.name());
    let doses: Vec<f64> = {
        let mut d: Vec<f64> = mine.iter().map(|r| r.dose).collect();
        d.sort_by(f64::total_cmp);
        d.dedup();
        d
    };
    for d in &doses {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{:.0}%</text>"#,
            ax.px(*d),
            H - BOTTOM + 14.0,
            d * 100.0
        );
    }
    for (k, mode) in MODES.iter().enumerate() {
        let model = super::pipeline::model_tag(*mode);
        let c = colour(model);
        let pts: Vec<&&SweepRow> = mine.iter().filter(|r| r.model == model).collect();
        let poly: Vec<String> = pts.iter().map(|r| format!("{:.1},{:.1}", ax.px(r.dose), ax.py(r.mean))).collect();
        let _ = writeln!(svg, r#"<polyline points="{}" fill="none" stroke="{c}"/>"#, poly.join(" "));
        for r in &pts {
            let x = ax.px(r.dose);
            let _ = writeln!(
                svg,
                r#"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="{c}"/><circle cx="{x:.1}" cy="{:.1}" r="3" fill="{c}"/>"#,
                ax.py(r.mean - r.sd),
                ax.py(r.mean + r.sd),
                ax.py(r.mean)
            );
        }
        if let (Some(fit), Some(&lo), Some(&hi)) =
            (slopes.iter().find(|s| s.metric == metric && s.model == model), doses.first(), doses.last())
        {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="{c}" stroke-dasharray="5,3"/>"#,
                ax.px(lo),
                ax.py(fit.intercept + fit.slope * lo),
                ax.px(hi),
                ax.py(fit.intercept + fit.slope * hi)
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-size="11" fill="{c}">{}</text>"#,
            LEFT + 8.0,
            TOP + 14.0 + 14.0 * k as f64,
            model.label()
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Binary PGM of the mid-axial slice as five tiles
/// `[PC | LD | prediction | SD | abs-error]`, each `D x H` (x by y).
/// Images are clamped to `[0, 1]`; the error tile is stretched by its own
/// maximum, recorded in a header comment.
pub fn slice_panel(pc: &Volume, ld: &Volume, pred: &Volume, sd: &Volume) -> Result<Vec<u8>> {
    for (v, what) in [(ld, "ld"), (pred, "prediction"), (sd, "sd")] {
        if v.dims() != pc.dims() {
            return Err(Error::shape(format!("slice panel: {what} dims {:?} differ from {:?}", v.dims(), pc.dims())));
        }
    }
    let [nx, ny, nz] = pc.dims();
    let z = nz / 2;
    let err: Vec<f64> = (0..nx * ny)
        .map(|i| (pred.get(i % nx, i / nx, z) - sd.get(i % nx, i / nx, z)).abs())
        .collect();
    let emax = err.iter().cloned().fold(0.0, f64::max);
    let escale = if emax > 0.0 { 1.0 / emax } else { 1.0 };
    let byte = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = format!("P5\n# mid-axial z={z}; abs-error scaled by {escale}\n{} {ny}\n255\n", 5 * nx).into_bytes();
    for y in 0..ny {
        for v in [pc, ld, pred, sd] {
            out.extend((0..nx).map(|x| byte(v.get(x, y, z))));
        }
        out.extend((0..nx).map(|x| byte(err[y * nx + x] * escale)));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn panel_layout() {
        let dims = [6, 4, 3];
        let a = Volume::from_fn(dims, [1.0; 3], |x, _, _| x as f64 / 5.0).unwrap();
        let b = a.map(|v| v * 0.5);
        let pgm = slice_panel(&a, &b, &b, &a).unwrap();
        let text = String::from_utf8_lossy(&pgm);
        let header_end = text.match_indices('\n').nth(3).unwrap().0 + 1;
        assert!(text.starts_with("P5\n# mid-axial z=1;"));
        assert!(text[..header_end].ends_with("30 4\n255\n"));
        let px = &pgm[header_end..];
        assert_eq!(px.len(), 30 * 4);
        assert_eq!(px[5], 255);
        assert_eq!(px[29], 255, "error tile stretched to full scale");
        assert!(slice_panel(&a, &Volume::zeros([6, 4, 4], [1.0; 3]).unwrap(), &b, &a).is_err());
    }

    #[test]
    fn box_svg_embeds_data() {
        let rows: Vec<MetricsRow> = (0..4)
            .map(|i| MetricsRow {
                subject_id: format!("s{i}"),
                model: ModelTag::Longitudinal,
                dose: 0.25,
                mse: i as f64,
                psnr: 30.0,
                ssim: 0.9,
            })
            .collect();
        let b = box_stats(&rows, Metric::Mse);
        assert_eq!(b.len(), 1);
        assert_eq!((b[0].q1, b[0].median, b[0].q3), (0.75, 1.5, 2.25));
        let svg = box_svg(&b, Metric::Mse);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("longitudinal,0,0.75,1.5,2.25,3,1.5,4"));
    }
}
