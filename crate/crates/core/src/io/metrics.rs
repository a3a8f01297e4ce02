//! Temporal proxy metrics and the CSV files written next to a run.
//!
//! Row `i` of the metrics table describes frame `i`:
//!
//! * `flicker`: mean `|f[i+1] - f[i]|`, undefined on the last frame;
//! * `smoothness`: mean `|f[i+1] - 2 f[i] + f[i-1]|`, undefined on the
//!   first and last frames (so absent everywhere when `K < 3`);
//! * `patch_consistency`: Pearson correlation of the center patch of frame
//!   `i` with that of frame 0. When both patches are constant the
//!   correlation is defined as 1, when only one is it is 0.
//!
//! Undefined entries are written as `nan`. A final `mean` row averages the
//! defined entries of each column.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::latent::LatentVideo;
use crate::pipeline::StepReport;

pub const METRICS_HEADER: [&str; 4] = ["index", "flicker", "smoothness", "patch_consistency"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub index: usize,
    pub flicker: f64,
    pub smoothness: f64,
    pub patch_consistency: f64,
}

/// Center `ceil(H/2) x ceil(W/2)` window, all channels.
fn center_patch(z: &LatentVideo, k: usize) -> Vec<f64> {
    let s = z.shape();
    let (ph, pw) = (s.height.div_ceil(2), s.width.div_ceil(2));
    let (y0, x0) = ((s.height - ph) / 2, (s.width - pw) / 2);
    let mut out = Vec::with_capacity(s.channels * ph * pw);
    for c in 0..s.channels {
        for y in y0..y0 + ph {
            for x in x0..x0 + pw {
                out.push(z.get(k, c, y, x) as f64);
            }
        }
    }
    out
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    match (saa > 0.0, sbb > 0.0) {
        (false, false) => 1.0,
        (true, true) => (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0),
        _ => 0.0,
    }
}

fn mean_abs(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    values.map(f64::abs).sum::<f64>() / n as f64
}

pub fn compute_metrics(z: &LatentVideo) -> Vec<MetricsRow> {
    let k = z.frames();
    let n = z.shape().frame_len();
    let frame = |i: usize| z.frame(i).iter().map(|&v| v as f64);
    let anchor = center_patch(z, 0);
    (0..k)
        .map(|i| {
            let flicker =
                if i + 1 < k { mean_abs(frame(i + 1).zip(frame(i)).map(|(a, b)| a - b), n) } else { f64::NAN };
            let smoothness = if i >= 1 && i + 1 < k {
                mean_abs(frame(i + 1).zip(frame(i)).zip(frame(i - 1)).map(|((a, b), c)| a - 2.0 * b + c), n)
            } else {
                f64::NAN
            };
            let patch_consistency = correlation(&center_patch(z, i), &anchor);
            MetricsRow { index: i, flicker, smoothness, patch_consistency }
        })
        .collect()
}

/// Column means over the defined (non-nan) entries.
pub fn summarize(rows: &[MetricsRow]) -> [f64; 3] {
    let mean = |f: fn(&MetricsRow) -> f64| {
        let vals: Vec<f64> = rows.iter().map(f).filter(|v| !v.is_nan()).collect();
        if vals.is_empty() {
            f64::NAN
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    [mean(|r| r.flicker), mean(|r| r.smoothness), mean(|r| r.patch_consistency)]
}

/// Nine significant digits, `nan` for missing values.
pub fn format_sig(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.8e}")
    }
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Protocol(format!("csv: {other:?}")),
    }
}

pub fn write_metrics_csv<W: Write>(mut out: W, rows: &[MetricsRow]) -> Result<()> {
    writeln!(out, "# proxy temporal metrics; not comparable to benchmark scores")?;
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.index.to_string(),
            format_sig(r.flicker),
            format_sig(r.smoothness),
            format_sig(r.patch_consistency),
        ])
        .map_err(csv_err)?;
    }
    let [f, s, p] = summarize(rows);
    w.write_record(["mean".to_string(), format_sig(f), format_sig(s), format_sig(p)]).map_err(csv_err)?;
    w.flush()?;
    Ok(())
}

pub fn save_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_metrics_csv(file, rows)
}

/// Parses a metrics CSV: per-frame rows and the `mean` row.
pub fn read_metrics_csv(text: &str) -> Result<(Vec<MetricsRow>, Option<[f64; 3]>)> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().collect::<Vec<_>>() != METRICS_HEADER {
        return Err(Error::Protocol(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    let mut mean = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let num = |i: usize| {
            rec[i].parse::<f64>().map_err(|e| Error::Parse { line: line + 3, message: format!("{}: {e}", &rec[i]) })
        };
        let vals = [num(1)?, num(2)?, num(3)?];
        if &rec[0] == "mean" {
            mean = Some(vals);
        } else {
            let index = rec[0].parse().map_err(|e| Error::Parse { line: line + 3, message: format!("index: {e}") })?;
            rows.push(MetricsRow { index, flicker: vals[0], smoothness: vals[1], patch_consistency: vals[2] });
        }
    }
    Ok((rows, mean))
}

pub const REPORT_HEADER: [&str; 15] = [
    "step",
    "t_from",
    "t_to",
    "gamma",
    "global_clips",
    "local_clips",
    "residual_global",
    "residual_local",
    "loss_total",
    "loss_pixel",
    "loss_freq",
    "loss_amplitude",
    "loss_phase",
    "grad_norm",
    "growth",
];

/// One row per step. Absent values (a disabled path or refinement) are
/// empty fields. Wall time is left out so the file is reproducible.
pub fn write_report_csv<W: Write>(out: W, reports: &[StepReport]) -> Result<()> {
    let opt = |v: Option<f64>| v.map(format_sig).unwrap_or_default();
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER).map_err(csv_err)?;
    for r in reports {
        let l = r.vmcr.as_ref();
        w.write_record([
            r.step.to_string(),
            r.t_from.to_string(),
            r.t_to.to_string(),
            format_sig(r.gamma),
            r.global_clips.to_string(),
            r.local_clips.to_string(),
            opt(r.residual_global),
            opt(r.residual_local),
            opt(l.map(|l| l.total)),
            opt(l.map(|l| l.pixel)),
            opt(l.map(|l| l.freq)),
            opt(l.map(|l| l.amplitude)),
            opt(l.map(|l| l.phase)),
            opt(l.map(|l| l.grad_norm)),
            format_sig(r.growth),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_report(path: impl AsRef<Path>, reports: &[StepReport]) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_report_csv(file, reports)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::LatentShape;

    #[test]
    fn constant_video() {
        let z = LatentVideo::filled(LatentShape::new(4, 2, 3, 3).unwrap(), 0.7);
        let rows = compute_metrics(&z);
        assert_eq!(summarize(&rows), [0.0, 0.0, 1.0]);
        assert!(rows[3].flicker.is_nan() && rows[0].smoothness.is_nan() && rows[3].smoothness.is_nan());
    }

    #[test]
    fn linear_ramp() {
        let shape = LatentShape::new(5, 1, 2, 2).unwrap();
        let z = LatentVideo::from_fn(shape, |k, _, y, x| 0.25 * k as f32 + (y * 2 + x) as f32).unwrap();
        let [f, s, p] = summarize(&compute_metrics(&z));
        assert!((f - 0.25).abs() < 1e-12);
        assert_eq!(s, 0.0);
        assert!((p - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_video_has_no_smoothness() {
        let z = LatentVideo::filled(LatentShape::new(2, 1, 1, 1).unwrap(), 1.0);
        assert!(summarize(&compute_metrics(&z))[1].is_nan());
    }

    #[test]
    fn csv_round_trip_at_nine_digits() {
        let shape = LatentShape::new(4, 1, 2, 2).unwrap();
        let z = LatentVideo::from_fn(shape, |k, _, y, x| ((k * 7 + y * 3 + x) % 5) as f32 * 0.123457 - 0.3).unwrap();
        let rows = compute_metrics(&z);
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# proxy"));
        let (back, mean) = read_metrics_csv(&text).unwrap();
        let close = |a: f64, b: f64| (a.is_nan() && b.is_nan()) || (a - b).abs() <= 1e-8 * b.abs().max(1e-300);
        for (a, b) in back.iter().zip(&rows) {
            assert_eq!(a.index, b.index);
            assert!(close(a.flicker, b.flicker) && close(a.smoothness, b.smoothness));
            assert!(close(a.patch_consistency, b.patch_consistency));
        }
        let expect = summarize(&rows);
        assert!(mean.unwrap().iter().zip(expect).all(|(a, b)| close(*a, b)));
    }

    #[test]
    fn sig_format() {
        assert_eq!(format_sig(0.1), "1.00000000e-1");
        assert_eq!(format_sig(f64::NAN), "nan");
        assert_eq!(format_sig(-1234.5), "-1.23450000e3");
    }
}
