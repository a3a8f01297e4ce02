//! Files a run reads and writes: NPY latents, PPM frames and CSV tables.

use std::path::{Path, PathBuf};

use crate::config::Normalize;
use crate::error::Result;
use crate::pipeline::RunResult;

pub mod metrics;
pub mod npy;
pub mod ppm;

pub use metrics::{compute_metrics, save_metrics, save_report, MetricsRow};
pub use npy::{load_latent, save_latent};
pub use ppm::export_frames;

/// Writes `z0.npy`, `metrics.csv`, `report.csv` and, when `frames` is set,
/// `frames/frame_*.ppm` under `dir`. Returns the written paths.
pub fn write_run_outputs(dir: impl AsRef<Path>, result: &RunResult, frames: Option<Normalize>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut written = vec![dir.join("z0.npy"), dir.join("metrics.csv"), dir.join("report.csv")];
    save_latent(&written[0], &result.z0)?;
    save_metrics(&written[1], &compute_metrics(&result.z0))?;
    save_report(&written[2], &result.reports)?;
    if let Some(normalize) = frames {
        written.extend(export_frames(&result.z0, dir.join("frames"), normalize)?);
    }
    Ok(written)
}
