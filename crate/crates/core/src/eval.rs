//! Error metrics and report emission.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::SolutionField;

/// `‖pred − truth‖_F / ‖truth‖_F` over every entry, slices included.
pub fn relative_l2(pred: &SolutionField, truth: &SolutionField) -> Result<f64> {
    pred.check_same_shape(truth, "prediction")?;
    let denom = truth.frobenius_norm();
    if denom == 0.0 {
        return Err(Error::Degenerate("truth field has zero norm".into()));
    }
    let num = pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| (p - t).powi(2))
        .sum::<f64>()
        .sqrt();
    Ok(num / denom)
}

/// `|pred − truth| / mean(|truth|)` elementwise.
pub fn error_field(pred: &SolutionField, truth: &SolutionField) -> Result<SolutionField> {
    pred.check_same_shape(truth, "prediction")?;
    let scale = truth.data().iter().map(|v| v.abs()).sum::<f64>() / truth.len() as f64;
    if scale == 0.0 {
        return Err(Error::Degenerate("truth field has zero mean magnitude".into()));
    }
    let data = pred.data().iter().zip(truth.data()).map(|(p, t)| (p - t).abs() / scale).collect();
    SolutionField::from_vec_3d(truth.rows(), truth.cols(), truth.depth(), data)
}

/// Sample mean and sample standard deviation (`n − 1` denominator, 0 for a
/// single value).
pub fn aggregate(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Contract("cannot aggregate an empty list".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Ok((mean, 0.0));
    }
    let ss = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
    Ok((mean, (ss / (n - 1.0)).sqrt()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method_tag: String,
    pub pde: String,
    pub fidelity_mode: String,
    pub ensemble_k: usize,
    pub run: usize,
    pub rel_l2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method_tag: String,
    pub pde: String,
    pub fidelity_mode: String,
    pub ensemble_k: usize,
    pub runs: usize,
    pub mean_rel_l2: f64,
    pub std_rel_l2: f64,
}

/// Groups rows by method and setting, averaging `rel_l2` within each run
/// first and then aggregating across runs.
pub fn summarize(rows: &[ResultRow]) -> Result<Vec<SummaryRow>> {
    type Key = (String, String, String, usize);
    let mut groups: BTreeMap<Key, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        let key = (r.method_tag.clone(), r.pde.clone(), r.fidelity_mode.clone(), r.ensemble_k);
        groups.entry(key).or_default().entry(r.run).or_default().push(r.rel_l2);
    }
    groups
        .into_iter()
        .map(|((method_tag, pde, fidelity_mode, ensemble_k), runs)| {
            let per_run: Vec<f64> = runs.values().map(|v| aggregate(v).map(|a| a.0)).collect::<Result<_>>()?;
            let (mean, std) = aggregate(&per_run)?;
            Ok(SummaryRow {
                method_tag,
                pde,
                fidelity_mode,
                ensemble_k,
                runs: per_run.len(),
                mean_rel_l2: mean,
                std_rel_l2: std,
            })
        })
        .collect()
}

pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results(path: &Path) -> Result<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Csv(e)
    }
}

/// Renders `field` as grayscale with `lo` black and `hi` white, slices laid
/// side by side. A collapsed range renders everything black.
pub fn render_png(field: &SolutionField, lo: f64, hi: f64, path: &Path) -> Result<()> {
    let (rows, cols, depth) = field.shape();
    let width = u32::try_from(cols * depth).map_err(|_| Error::Contract("image too wide".into()))?;
    let height = u32::try_from(rows).map_err(|_| Error::Contract("image too tall".into()))?;
    let span = hi - lo;
    let mut img = GrayImage::new(width, height);
    for k in 0..depth {
        for r in 0..rows {
            for c in 0..cols {
                let v = field.data()[(k * rows + r) * cols + c];
                let level = if span > 0.0 { ((v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
                img.put_pixel((k * cols + c) as u32, r as u32, Luma([(level * 255.0).round() as u8]));
            }
        }
    }
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// One predicted field next to its reference.
#[derive(Debug, Clone)]
pub struct Comparison {
    pub name: String,
    pub pred: SolutionField,
    pub truth: SolutionField,
}

fn bounds(field: &SolutionField) -> (f64, f64) {
    field
        .data()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Writes `results.csv`, `summary.csv` and, per comparison, the prediction,
/// truth and error images. Prediction and truth share the truth's range.
pub fn emit_report(rows: &[ResultRow], comparisons: &[Comparison], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    let results = out_dir.join("results.csv");
    write_csv(rows, &results)?;
    written.push(results);
    if !rows.is_empty() {
        let summary = out_dir.join("summary.csv");
        write_csv(&summarize(rows)?, &summary)?;
        written.push(summary);
    }
    for cmp in comparisons {
        let err = error_field(&cmp.pred, &cmp.truth)?;
        let (lo, hi) = bounds(&cmp.truth);
        let (_, emax) = bounds(&err);
        for (suffix, field, lo, hi) in [
            ("pred", &cmp.pred, lo, hi),
            ("truth", &cmp.truth, lo, hi),
            ("error", &err, 0.0, emax),
        ] {
            let path = out_dir.join(format!("{}_{suffix}.png", cmp.name));
            render_png(field, lo, hi, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}
