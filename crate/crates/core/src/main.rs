//! Command-line surface: dataset synthesis, pretraining, adaptation
//! training, evaluation, gradient checking, and attention-map export.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use i3net::checkpoint::load_checkpoint;
use i3net::config::Config;
use i3net::copm::domain_attention;
use i3net::data::{read_ppm, write_dataset, write_pgm_normalized, Domain, SceneSpec};
use i3net::detector::{stack_images, DetectionModel};
use i3net::graph::{gradcheck_suite, Graph};
use i3net::train::{evaluate_checkpoint, pretrain_mlc, train};
use i3net::Error;

#[derive(Parser)]
#[command(name = "i3net", about = "Domain-adaptive one-stage detector on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset directory (PPM images + annotations).
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// `source` or `target`.
        #[arg(long)]
        domain: String,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        /// Class frequencies as `f1,f2,f3`; defaults to the domain's own.
        #[arg(long)]
        freq: Option<String>,
    },
    /// Train the image-level multi-label classifier on the source set.
    PretrainMlc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run adaptation training (requires a pretrain-mlc checkpoint).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated components to disable: `dcbr,copm,rjca`.
        #[arg(long)]
        disable: Option<String>,
    },
    /// Per-class AP / mAP report of a checkpoint on a labeled set.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient checks of the op suite.
    Gradcheck {
        /// Only ops whose name contains this string.
        #[arg(long)]
        op: Option<String>,
    },
    /// Write the fused attention map of one image as a PGM heat map.
    ExportAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_freqs(s: &str) -> Result<Vec<f64>, Error> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("bad frequency {t:?}: {e}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Synth { out, domain, count, seed, freq } => {
            let domain = Domain::parse(&domain)?;
            let mut spec = match domain {
                Domain::Source => SceneSpec::source(seed),
                Domain::Target => SceneSpec::target(seed),
            };
            if let Some(f) = freq {
                spec.class_frequencies = parse_freqs(&f)?;
            }
            let data = write_dataset(&out, &spec, count)?;
            println!("wrote {} {} images to {}", data.len(), domain.tag(), out.display());
        }
        Cmd::PretrainMlc { config } => {
            let cfg = Config::from_file(&config)?;
            let report = pretrain_mlc(&cfg)?;
            println!(
                "pretrained multi-label classifier: mean loss {:.6} -> {:.6}\ncheckpoint: {}",
                report.initial_loss,
                report.final_loss,
                report.checkpoint.display()
            );
        }
        Cmd::Train { config, out, disable } => {
            let mut cfg = Config::from_file(&config)?;
            if let Some(list) = disable {
                for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                    match name {
                        "dcbr" => cfg.enable_dcbr = false,
                        "copm" => cfg.enable_copm = false,
                        "rjca" => cfg.enable_rjca = false,
                        other => {
                            return Err(Error::Config(format!(
                                "unknown component {other:?} (want dcbr|copm|rjca)"
                            )))
                        }
                    }
                }
            }
            let report = train(&cfg, &out)?;
            println!(
                "trained {} steps\nmetrics: {}\nfinal checkpoint: {}",
                report.steps,
                report.metrics_path.display(),
                report.final_checkpoint.display()
            );
        }
        Cmd::Eval { checkpoint, data } => {
            print!("{}", evaluate_checkpoint(&checkpoint, &data)?);
        }
        Cmd::Gradcheck { op } => {
            let results = gradcheck_suite(op.as_deref(), 8)?;
            if results.is_empty() {
                return Err(Error::Invalid(format!(
                    "no op matches {:?}",
                    op.unwrap_or_default()
                )));
            }
            let mut worst = ("", 0.0);
            for (name, err) in &results {
                println!("{name:<16} max rel err {err:.3e}");
                if *err > worst.1 {
                    worst = (name, *err);
                }
            }
            println!("worst: {} at {:.3e} (bound 1e-4)", worst.0, worst.1);
            if worst.1 >= 1e-4 {
                return Err(Error::Invalid(format!(
                    "gradient check failed: {} at {:.3e}",
                    worst.0, worst.1
                )));
            }
        }
        Cmd::ExportAttention { checkpoint, image, out } => {
            let (model_cfg, params, _) = load_checkpoint(&checkpoint)?;
            let model = DetectionModel::from_parts(model_cfg, params);
            let img = read_ppm(&image)?;
            let mut g = Graph::new();
            let bound = model.params.bind(&mut g, &|_| true);
            let x = g.constant(stack_images(&[&img])?);
            let taps = model.forward(&mut g, &bound, x)?;
            let att = domain_attention(&mut g, &bound, &taps, 1)?;
            let map = g.value(att).data();
            let side = (map.len() as f64).sqrt() as usize;
            write_pgm_normalized(&out, map, side, side)?;
            println!("wrote {}x{side} attention map to {}", side, out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
