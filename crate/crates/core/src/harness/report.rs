//! CSV tables and SVG plots.
//!
//! Schemas:
//! - `sweep_<variation>.csv`: `degree,feature_kind,accuracy,f1,mcc`
//! - `heatmap.csv`: `beta,epochs,feature_kind,accuracy`
//! - `iou.csv`: `phase,class_id,iou`
//! - `history.csv`: `epoch,train_loss,test_loss,test_acc,test_f1,test_mcc`
//!
//! Floats carry six decimals; `beta` is printed in scientific notation so
//! small weights stay distinguishable.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::{HeatmapCell, IouRow, SweepRow, VariationKind};
use crate::features::FeatureKind;
use crate::recognition::EpochRecord;

#[derive(Debug, Error)]
#[error("cannot write {path}: {source}")]
pub struct ReportError {
    pub path: PathBuf,
    #[source]
    pub source: std::io::Error,
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    pub sweeps: Vec<(VariationKind, Vec<SweepRow>)>,
    pub heatmap: Option<Vec<HeatmapCell>>,
    pub iou: Option<Vec<IouRow>>,
    pub history: Option<Vec<EpochRecord>>,
}

fn f6(v: f64) -> String {
    format!("{v:.6}")
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("degree,feature_kind,accuracy,f1,mcc\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(s, "{},{},{},{},{}", f6(r.degree), r.kind, f6(m.accuracy), f6(m.macro_f1), f6(m.mcc)).unwrap();
    }
    s
}

pub fn heatmap_csv(cells: &[HeatmapCell]) -> String {
    let mut s = String::from("beta,epochs,feature_kind,accuracy\n");
    for c in cells {
        writeln!(s, "{:.6e},{},{},{}", c.beta, c.epochs, c.kind, f6(c.accuracy)).unwrap();
    }
    s
}

pub fn iou_csv(rows: &[IouRow]) -> String {
    let mut s = String::from("phase,class_id,iou\n");
    for r in rows {
        writeln!(s, "{},{},{}", r.phase.name(), r.class_id, f6(r.iou)).unwrap();
    }
    s
}

pub fn history_csv(history: &[EpochRecord]) -> String {
    let opt = |v: Option<f64>| v.map(f6).unwrap_or_default();
    let mut s = String::from("epoch,train_loss,test_loss,test_acc,test_f1,test_mcc\n");
    for h in history {
        let m = h.test.as_ref();
        writeln!(
            s,
            "{},{},{},{},{},{}",
            h.epoch,
            f6(h.train_loss),
            opt(h.test_loss),
            opt(m.map(|m| m.accuracy)),
            opt(m.map(|m| m.macro_f1)),
            opt(m.map(|m| m.mcc))
        )
        .unwrap();
    }
    s
}

const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// Accuracy against degree, one line per feature kind.
pub fn plot_sweep_svg(title: &str, rows: &[SweepRow]) -> String {
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let xs: Vec<f64> = rows.iter().map(|r| r.degree).collect();
    let (x0, x1) = (xs.iter().copied().fold(f64::INFINITY, f64::min), xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    let span = if x1 > x0 { x1 - x0 } else { 1.0 };
    let px = |x: f64| pad + (x - x0) / span * (w - 2.0 * pad);
    let py = |y: f64| h - pad - y.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = svg_open(w, h);
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, w / 2.0, escape(title)).unwrap();
    axes(&mut s, w, h, pad);
    for tick in [0.0, 0.25, 0.5, 0.75, 1.0] {
        writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{tick:.2}</text>"#, pad - 4.0, py(tick) + 3.0).unwrap();
    }
    let mut degrees = xs.clone();
    degrees.dedup();
    for d in &degrees {
        writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{d}</text>"#, px(*d), h - pad + 14.0).unwrap();
    }
    for (i, kind) in kinds_in(rows.iter().map(|r| r.kind)).into_iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> =
            rows.iter().filter(|r| r.kind == kind).map(|r| format!("{:.1},{:.1}", px(r.degree), py(r.metrics.accuracy))).collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" ")).unwrap();
        writeln!(s, r#"<text x="{}" y="{}" fill="{color}" font-size="12">{kind}</text>"#, w - pad - 40.0, pad + 14.0 * i as f64).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// One accuracy grid per feature kind; darker cells are more accurate.
pub fn plot_heatmap_svg(cells: &[HeatmapCell]) -> String {
    let mut betas: Vec<f64> = cells.iter().map(|c| c.beta).collect();
    betas.sort_by(f64::total_cmp);
    betas.dedup();
    let mut epochs: Vec<usize> = cells.iter().map(|c| c.epochs).collect();
    epochs.sort_unstable();
    epochs.dedup();
    let kinds = kinds_in(cells.iter().map(|c| c.kind));
    let (cell, pad) = (36.0, 60.0);
    let panel_w = pad + cell * epochs.len() as f64 + 20.0;
    let (w, h) = (panel_w * kinds.len().max(1) as f64, pad + cell * betas.len() as f64 + 40.0);
    let mut s = svg_open(w, h);
    for (k, kind) in kinds.iter().enumerate() {
        let ox = panel_w * k as f64;
        writeln!(s, r#"<text x="{}" y="20" font-size="13">{kind} accuracy (rows: beta, columns: epochs)</text>"#, ox + pad).unwrap();
        for (j, e) in epochs.iter().enumerate() {
            writeln!(s, r#"<text x="{:.1}" y="{}" text-anchor="middle" font-size="10">{e}</text>"#, ox + pad + cell * (j as f64 + 0.5), pad - 6.0)
                .unwrap();
        }
        for (i, b) in betas.iter().enumerate() {
            let y = pad + cell * i as f64;
            writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end" font-size="10">{b:e}</text>"#, ox + pad - 4.0, y + cell / 2.0 + 3.0).unwrap();
            for (j, e) in epochs.iter().enumerate() {
                let Some(c) = cells.iter().find(|c| c.kind == *kind && c.beta == *b && c.epochs == *e) else { continue };
                let shade = (255.0 * (1.0 - c.accuracy.clamp(0.0, 1.0))).round() as u8;
                let x = ox + pad + cell * j as f64;
                writeln!(
                    s,
                    r#"<rect x="{x:.1}" y="{y:.1}" width="{cell}" height="{cell}" fill="rgb({shade},{shade},255)"><title>{:.3}</title></rect>"#,
                    c.accuracy
                )
                .unwrap();
            }
        }
    }
    s.push_str("</svg>\n");
    s
}

fn kinds_in(it: impl Iterator<Item = FeatureKind>) -> Vec<FeatureKind> {
    let mut v: Vec<FeatureKind> = it.collect();
    v.sort();
    v.dedup();
    v
}

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
    )
}

fn axes(s: &mut String, w: f64, h: f64, pad: f64) {
    writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad).unwrap();
    writeln!(s, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad).unwrap();
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

pub fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf, ReportError> {
    let path = dir.join(name);
    std::fs::create_dir_all(dir)
        .and_then(|_| std::fs::write(&path, contents))
        .map_err(|source| ReportError { path: path.clone(), source })?;
    Ok(path)
}

/// Writes every table present in `results`, plus plots, and returns the
/// paths in the order written.
pub fn emit_report(results: &ExperimentResults, out_dir: &Path) -> Result<Vec<PathBuf>, ReportError> {
    let mut written = Vec::new();
    for (variation, rows) in &results.sweeps {
        let name = variation.name();
        written.push(write_file(out_dir, &format!("sweep_{name}.csv"), &sweep_csv(rows))?);
        written.push(write_file(out_dir, &format!("sweep_{name}.svg"), &plot_sweep_svg(&format!("accuracy under {name}"), rows))?);
    }
    if let Some(cells) = &results.heatmap {
        written.push(write_file(out_dir, "heatmap.csv", &heatmap_csv(cells))?);
        written.push(write_file(out_dir, "heatmap.svg", &plot_heatmap_svg(cells))?);
    }
    if let Some(rows) = &results.iou {
        written.push(write_file(out_dir, "iou.csv", &iou_csv(rows))?);
    }
    if let Some(h) = &results.history {
        written.push(write_file(out_dir, "history.csv", &history_csv(h))?);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Phase;
    use crate::recognition::RecognitionMetrics;

    fn sweep() -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for (i, d) in [30.0, 90.0, 180.0].into_iter().enumerate() {
            for kind in FeatureKind::ALL {
                let a = 0.9 - 0.1 * i as f64;
                rows.push(SweepRow { degree: d, kind, metrics: RecognitionMetrics { accuracy: a, macro_f1: a - 0.05, mcc: a - 0.1 } });
            }
        }
        rows
    }

    #[test]
    fn sweep_table_has_one_row_per_cell() {
        let csv = sweep_csv(&sweep());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "degree,feature_kind,accuracy,f1,mcc");
        assert_eq!(lines[1], "30.000000,style,0.900000,0.850000,0.800000");
    }

    #[test]
    fn report_is_deterministic() {
        let cells: Vec<HeatmapCell> = [1e-4, 1.0]
            .into_iter()
            .flat_map(|beta| [1, 200].map(|epochs| HeatmapCell { beta, epochs, kind: FeatureKind::Style, accuracy: 0.5 }))
            .collect();
        let results = ExperimentResults {
            sweeps: vec![(VariationKind::Rotation, sweep())],
            heatmap: Some(cells),
            iou: Some(vec![IouRow { phase: Phase::Pre, class_id: 0, iou: 1.0 }]),
            history: None,
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let fa = emit_report(&results, a.path()).unwrap();
        let fb = emit_report(&results, b.path()).unwrap();
        assert_eq!(fa.len(), 5);
        for (x, y) in fa.iter().zip(&fb) {
            assert_eq!(x.file_name(), y.file_name());
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        }
        let heat = std::fs::read_to_string(a.path().join("heatmap.csv")).unwrap();
        assert!(heat.lines().nth(1).unwrap().starts_with("1.000000e-4,1,style,"));
    }

    #[test]
    fn unwritable_directory() {
        let f = tempfile::NamedTempFile::new().unwrap();
        let results = ExperimentResults { iou: Some(vec![]), ..Default::default() };
        assert!(emit_report(&results, &f.path().join("sub")).is_err());
    }
}
