//! Bin curves and disparity histograms for trained models.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::diffcore::Tensor;
use crate::geometry::DepthRange;
use crate::nets::{depth_forward, Model, OUTPUT_SCALES};
use crate::{Error, Result};

pub const HISTOGRAM_BINS: usize = 32;

/// Counts over `HISTOGRAM_BINS` equal cells of `[0, 1]`; values outside are
/// clamped into the end cells, non-finite values are skipped.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Histogram {
    pub counts: Vec<usize>,
    pub valid: usize,
}

impl Histogram {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let mut counts = vec![0; HISTOGRAM_BINS];
        let mut valid = 0;
        for v in values {
            if !v.is_finite() {
                continue;
            }
            let i = ((v.clamp(0.0, 1.0) * HISTOGRAM_BINS as f64) as usize).min(HISTOGRAM_BINS - 1);
            counts[i] += 1;
            valid += 1;
        }
        Self { counts, valid }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageReport {
    pub name: String,
    /// Bin values per output scale, finest first.
    pub bins: Vec<Vec<f64>>,
    pub predicted: Histogram,
    pub ground_truth: Option<Histogram>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Ground-truth depth expressed as normalized disparity after aligning its
/// median with the prediction's.
fn gt_disparity(gt: &Tensor, pred_disp: &Tensor, range: &DepthRange) -> Vec<f64> {
    let valid: Vec<f64> = gt.data().iter().copied().filter(|&d| d > 0.0 && d.is_finite()).collect();
    if valid.is_empty() {
        return Vec::new();
    }
    let pred_depth: Vec<f64> = pred_disp.data().iter().map(|&d| range.to_depth(d)).collect();
    let s = median(pred_depth) / median(valid.clone());
    valid.iter().map(|&d| range.to_disparity(d * s)).collect()
}

pub fn analyze(name: &str, img: &Tensor, gt: Option<&Tensor>, model: &Model) -> Result<ImageReport> {
    let outs = depth_forward(img, model)?;
    let range = DepthRange::default();
    let predicted = Histogram::of(outs[0].disparity.data().iter().copied());
    let ground_truth = match gt {
        Some(g) => {
            if g.len() != outs[0].disparity.len() {
                return Err(Error::ShapeMismatch {
                    op: "bins_report",
                    left: g.shape().to_vec(),
                    right: outs[0].disparity.shape().to_vec(),
                });
            }
            Some(Histogram::of(gt_disparity(g, &outs[0].disparity, &range)))
        }
        None => None,
    };
    Ok(ImageReport {
        name: name.to_string(),
        bins: outs.iter().map(|o| o.bins.values().to_vec()).collect(),
        predicted,
        ground_truth,
    })
}

pub fn bins_csv(r: &ImageReport) -> String {
    let mut s = String::from("scale,index,value\n");
    for (k, b) in r.bins.iter().enumerate() {
        for (i, v) in b.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", OUTPUT_SCALES[k], i + 1, v);
        }
    }
    s
}

pub fn histogram_csv(r: &ImageReport) -> String {
    let mut s = String::from("lo,hi,predicted");
    if r.ground_truth.is_some() {
        s.push_str(",ground_truth");
    }
    s.push('\n');
    let w = 1.0 / HISTOGRAM_BINS as f64;
    for i in 0..HISTOGRAM_BINS {
        let _ = write!(s, "{},{},{}", i as f64 * w, (i + 1) as f64 * w, r.predicted.counts[i]);
        if let Some(g) = &r.ground_truth {
            let _ = write!(s, ",{}", g.counts[i]);
        }
        s.push('\n');
    }
    s
}

const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// Bin curves on the left, histograms on the right.
pub fn render_svg(r: &ImageReport) -> String {
    let (pw, ph, pad) = (320.0, 240.0, 30.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{}" height="{}" font-family="sans-serif" font-size="10">"#,
        2.0 * pw + 3.0 * pad,
        ph + 2.0 * pad
    );
    let _ = writeln!(s, r#"<text x="{pad}" y="15">{} bin values</text>"#, r.name);
    let _ = writeln!(
        s,
        r#"<rect x="{pad}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for (k, b) in r.bins.iter().enumerate() {
        let n = b.len();
        let pts: Vec<String> = b
            .iter()
            .enumerate()
            .map(|(i, v)| {
                let x = pad + pw * (i + 1) as f64 / n as f64;
                let y = pad + ph * (1.0 - v.clamp(0.0, 1.0));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" points="{}"><title>scale 1/{}</title></polyline>"#,
            COLORS[k % COLORS.len()],
            pts.join(" "),
            OUTPUT_SCALES[k]
        );
    }
    let x0 = 2.0 * pad + pw;
    let _ = writeln!(s, r#"<text x="{x0}" y="15">disparity histogram</text>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{x0}" y="{pad}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    let mut hists = vec![("predicted", &r.predicted, COLORS[0])];
    if let Some(g) = &r.ground_truth {
        hists.push(("ground truth", g, COLORS[1]));
    }
    let peak = hists
        .iter()
        .flat_map(|(_, h, _)| h.counts.iter().map(|&c| c as f64 / h.valid.max(1) as f64))
        .fold(0.0, f64::max)
        .max(1e-12);
    let bw = pw / HISTOGRAM_BINS as f64 / hists.len() as f64;
    for (j, (label, h, color)) in hists.iter().enumerate() {
        for (i, &c) in h.counts.iter().enumerate() {
            let frac = c as f64 / h.valid.max(1) as f64 / peak;
            let bh = ph * frac;
            let x = x0 + (i * hists.len() + j) as f64 * bw;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{bw:.2}" height="{bh:.2}" fill="{color}"><title>{label}: {c}</title></rect>"#,
                pad + ph - bh
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Write `{name}_bins.csv`, `{name}_hist.csv` and optionally `{name}.svg`.
pub fn write_report(dir: &Path, r: &ImageReport, svg: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = [
        (format!("{}_bins.csv", r.name), bins_csv(r)),
        (format!("{}_hist.csv", r.name), histogram_csv(r)),
    ];
    for (f, body) in files {
        let p = dir.join(f);
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    if svg {
        let p = dir.join(format!("{}.svg", r.name));
        fs::write(&p, render_svg(r)).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_conserves_counts() {
        let h = Histogram::of([0.0, 0.5, 1.0, 1.5, -1.0, f64::NAN]);
        assert_eq!(h.valid, 5);
        assert_eq!(h.counts.iter().sum::<usize>(), 5);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 2);
        assert_eq!(h.counts[0], 2);
    }
}
