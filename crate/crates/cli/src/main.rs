use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mvdiff::bridge::{serve_stdio, serve_tcp, Endpoint, ServeOptions};
use mvdiff::denoise::{Denoiser, OracleDenoiser};
use mvdiff::pipeline::{
    read_pfm, run_demo2d, run_eval, run_generate, run_refine, run_render, GenerateOptions,
    RunConfig,
};
use mvdiff::{Error, LatentField, Result};

#[derive(Parser)]
#[command(
    name = "mvdiff",
    version,
    about = "Multi-view consistent diffusion sampling"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write per-step predictions, blends, guided noise, warps and
    /// occlusion maps as PFM.
    #[arg(long)]
    dump_intermediates: bool,
    /// Worker threads.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Sample view-consistent images over the configured rig.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Spawn a denoiser backend speaking the wire protocol over stdio.
        #[arg(long, conflicts_with = "backend_addr")]
        backend_cmd: Option<String>,
        /// Connect to a denoiser backend at host:port.
        #[arg(long)]
        backend_addr: Option<String>,
    },
    /// Refine a mesh against per-view normal maps.
    Refine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: PathBuf,
        /// One normal map per rig view, or a directory holding them.
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
    },
    /// Render free-view frames from rig images.
    Render {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        mesh: PathBuf,
        /// One image per rig view, or a directory holding them.
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
    },
    /// Cross-view PSNR/SSIM of rig images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, num_args = 1.., required = true)]
        images: Vec<PathBuf>,
    },
    /// Coupled sampling of several processes on one image plane.
    Demo2d {
        #[command(flatten)]
        common: Common,
    },
    /// Serve the oracle denoiser over the wire protocol.
    #[command(hide = true)]
    Serve {
        #[arg(long, value_enum, default_value = "stdio")]
        mode: Mode,
        /// Oracle target latent (PFM).
        #[arg(long)]
        target: PathBuf,
        /// TCP listen address.
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Stop accepting after this many TCP connections.
        #[arg(long)]
        max_connections: Option<usize>,
        /// Exit without answering after this many requests.
        #[arg(long)]
        exit_after: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Stdio,
    Tcp,
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = Some(o.clone());
    }
    if common.dump_intermediates {
        cfg.dump_intermediates = true;
    }
    if let Some(w) = common.workers {
        cfg.workers = Some(w);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            common,
            backend_cmd,
            backend_addr,
        } => {
            let cfg = load(&common)?;
            let endpoint = backend_cmd
                .map(Endpoint::Command)
                .or(backend_addr.map(Endpoint::Tcp));
            let s = run_generate(&cfg, GenerateOptions { endpoint })?;
            println!(
                "wrote {} files to {}; mean cross-view PSNR {:.3} dB, SSIM {:.4} over {} pairs ({} excluded)",
                s.manifest.files.len(),
                s.out.display(),
                s.report.mean_psnr,
                s.report.mean_ssim,
                s.report.pairs.len(),
                s.report.excluded.len()
            );
        }
        Command::Refine {
            common,
            mesh,
            targets,
        } => {
            let cfg = load(&common)?;
            let s = run_refine(&cfg, &mesh, &targets)?;
            let first = s.outcome.trace.first().map_or(0.0, |r| r.data_loss);
            let last = s.outcome.trace.last().map_or(0.0, |r| r.data_loss);
            println!(
                "refined over {} iterations; data loss {first:.6e} -> {last:.6e}",
                s.outcome.trace.len().saturating_sub(1)
            );
        }
        Command::Render {
            common,
            mesh,
            images,
        } => {
            let cfg = load(&common)?;
            let s = run_render(&cfg, &mesh, &images)?;
            println!("rendered {} frames", s.frames);
        }
        Command::Eval { common, images } => {
            let cfg = load(&common)?;
            let r = run_eval(&cfg, &images)?;
            println!(
                "mean cross-view PSNR {:.3} dB, SSIM {:.4} over {} pairs ({} excluded)",
                r.mean_psnr,
                r.mean_ssim,
                r.pairs.len(),
                r.excluded.len()
            );
        }
        Command::Demo2d { common } => {
            let cfg = load(&common)?;
            let s = run_demo2d(&cfg)?;
            println!(
                "{} processes: pairwise max-abs {:.3e}, mode {} at max-abs {:.3e}, consensus {}; vanilla modes {:?}",
                s.processes, s.pairwise_max_abs, s.mode, s.mode_max_abs, s.consensus, s.vanilla_modes
            );
        }
        Command::Serve {
            mode,
            target,
            listen,
            max_connections,
            exit_after,
        } => {
            let target = read_pfm(&target).map_err(|e| Error::config("--target", e.to_string()))?;
            let denoiser: Arc<dyn Denoiser> =
                Arc::new(OracleDenoiser::new(LatentField::latent(target)));
            let opts = ServeOptions { exit_after };
            match mode {
                Mode::Stdio => {
                    serve_stdio(&*denoiser, opts)?;
                }
                Mode::Tcp => {
                    let listener = TcpListener::bind(&listen)?;
                    // the bound address lets callers use port 0
                    println!("{}", listener.local_addr()?);
                    serve_tcp(listener, denoiser, opts, max_connections)?;
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
