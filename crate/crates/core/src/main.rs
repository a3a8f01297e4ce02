use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use glcd_core::checks::run_suites;
use glcd_core::config::{Normalize, PipelineConfig};
use glcd_core::io::{compute_metrics, export_frames, load_latent, save_metrics, write_run_outputs};
use glcd_core::pipeline::{build_denoiser, Pipeline, StepOverrides};
use glcd_core::Error;

#[derive(Parser)]
#[command(name = "glcd", version, about = "Global-local collaborative denoising for long latent videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the sampler and write z0.npy, metrics.csv, report.csv and frames.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `run.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print clip maps, the blend schedule and the noise filter as JSON.
    Inspect {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle and invariant suites.
    Check {
        /// Only suites whose name contains this string.
        #[arg(long)]
        filter: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write PPM frames for a saved latent.
    Export {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "minmax")]
        normalize: NormalizeArg,
    },
    /// Write proxy temporal metrics for a saved latent.
    Metrics {
        #[arg(long)]
        latent: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum NormalizeArg {
    Minmax,
    Clamp,
}

impl From<NormalizeArg> for Normalize {
    fn from(n: NormalizeArg) -> Self {
        match n {
            NormalizeArg::Minmax => Normalize::Minmax,
            NormalizeArg::Clamp => Normalize::Clamp,
        }
    }
}

fn load_config(path: &PathBuf) -> glcd_core::Result<PipelineConfig> {
    let cfg = PipelineConfig::load(path)?;
    log::info!("resolved config from {}:\n{}", path.display(), cfg.to_toml_string()?);
    Ok(cfg)
}

fn generate(config: PathBuf, out: PathBuf, seed: Option<u64>) -> glcd_core::Result<()> {
    let mut cfg = load_config(&config)?;
    if let Some(seed) = seed {
        cfg.run.seed = seed;
    }
    let pipeline = Pipeline::new(cfg.clone())?;
    let denoiser = build_denoiser(&cfg, pipeline.schedule().clone())?;
    log::info!("denoiser {}, shape {:?}", denoiser.name(), pipeline.shape().as_array());
    let result = match pipeline.run(denoiser.as_ref()) {
        Ok(r) => r,
        Err(failure) => {
            if !failure.reports.is_empty() {
                std::fs::create_dir_all(&out)?;
                glcd_core::io::save_report(out.join("report.csv"), &failure.reports)?;
            }
            return Err(failure.error);
        }
    };
    for r in &result.reports {
        log::debug!("step {} t {}->{} gamma {:.3e} growth {:.3}", r.step, r.t_from, r.t_to, r.gamma, r.growth);
    }
    let frames = cfg.run.export_frames.then_some(cfg.run.normalize);
    let written = write_run_outputs(&out, &result, frames)?;
    println!("{}", json!({ "written": written, "steps": result.reports.len(), "seed": result.seed }));
    Ok(())
}

fn inspect(config: PathBuf) -> glcd_core::Result<()> {
    let cfg = load_config(&config)?;
    let pipeline = Pipeline::new(cfg.clone())?;
    let row = |m: &glcd_core::clip_maps::ClipMap, t: Option<usize>| json!({ "path": m.path(), "clip_id": m.clip_id(), "indices": m.indices(), "shift": m.shift(), "t": t });
    let global: Vec<_> = pipeline.global_maps()?.iter().map(|m| row(m, None)).collect();
    let mut local = Vec::new();
    let mut gamma = Vec::new();
    for (step, (t_from, t_to)) in pipeline.schedule().transitions().into_iter().enumerate() {
        local.extend(pipeline.local_maps(t_from)?.iter().map(|m| row(m, Some(t_from))));
        gamma.push(json!({ "step": step, "t_from": t_from, "t_to": t_to, "gamma": pipeline.gamma(t_from, &StepOverrides::default()) }));
    }
    let filter = pipeline.filter()?;
    let [k, h, w] = filter.dims();
    let mask = filter.mask();
    let temporal: Vec<f64> = (0..k).map(|t| filter.at(t, 0, 0)).collect();
    let r = pipeline.resolved();
    let doc = json!({
        "shape": pipeline.shape().as_array(),
        "dilation": r.dilation,
        "stride": r.stride,
        "global_clips": global.len(),
        "maps": global.into_iter().chain(local).collect::<Vec<_>>(),
        "gamma": gamma,
        "filter": {
            "kind": filter.kind(),
            "cutoff": filter.cutoff(),
            "dims": [k, h, w],
            "min": mask.iter().cloned().fold(f64::INFINITY, f64::min),
            "max": mask.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            "mean": mask.iter().sum::<f64>() / mask.len() as f64,
            "temporal_profile": temporal,
        },
    });
    println!("{}", serde_json::to_string_pretty(&doc).expect("json values serialize"));
    Ok(())
}

fn check(filter: Option<String>, seed: u64) -> ExitCode {
    let outcomes = run_suites(filter.as_deref(), seed);
    if outcomes.is_empty() {
        eprintln!("{}", json!({ "error": "usage", "message": format!("no suite matches {filter:?}") }));
        return ExitCode::from(2);
    }
    for o in &outcomes {
        println!("{o}");
    }
    if outcomes.iter().all(|o| o.passed) {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(command: Command) -> glcd_core::Result<()> {
    match command {
        Command::Generate { config, out, seed } => generate(config, out, seed),
        Command::Inspect { config } => inspect(config),
        Command::Check { .. } => unreachable!(),
        Command::Export { latent, out, normalize } => {
            let z = load_latent(&latent)?;
            let written = export_frames(&z, &out, normalize.into())?;
            println!("{}", json!({ "written": written.len(), "dir": out }));
            Ok(())
        }
        Command::Metrics { latent, out } => {
            let z = load_latent(&latent)?;
            save_metrics(&out, &compute_metrics(&z))?;
            println!("{}", json!({ "written": out }));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::Check { filter, seed } = cli.command {
        return check(filter, seed);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = |e: &Error| json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{}", report(&e));
            ExitCode::FAILURE
        }
    }
}
