use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use v2v_core::perception::write_scenes;
use v2v_harness::config::RunConfig;
use v2v_harness::data::{scenes, Split};
use v2v_harness::evaluate::ChannelPoint;
use v2v_harness::metrics::write_metrics;
use v2v_harness::pipeline::{self, Scheme};
use v2v_harness::sweep::{evaluate_points, parse_modes, Axis, Models};
use v2v_harness::{seeds, HarnessError, Result};

#[derive(Parser)]
#[command(name = "v2v", version, about = "Cooperative perception over simulated V2V channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one scheme and write its checkpoint and train_log.csv
    Train {
        #[arg(long)]
        scheme: u8,
        #[arg(long)]
        config: Option<PathBuf>,
        /// initial backbone for schemes 1-2, frozen backbone for scheme 3
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Evaluate the trained models along one channel axis
    Sweep {
        #[arg(long)]
        axis: String,
        #[arg(long, default_value = "ego-only,unweighted,weighted")]
        modes: String,
        #[arg(long)]
        config: Option<PathBuf>,
        /// defaults to <output_dir>/metrics.csv
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the trained models at one channel point (ideal by default)
    Evaluate {
        #[arg(long)]
        snr: Option<f64>,
        /// path-loss exponent; the SNR then holds at 1 m
        #[arg(long)]
        path_loss_n: Option<f64>,
        /// OFDM pilot count
        #[arg(long)]
        pilots: Option<usize>,
        #[arg(long, default_value = "ego-only,unweighted,weighted")]
        modes: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write generated scenes as JSON lines
    GenScenes {
        #[arg(long, default_value = "test")]
        split: String,
        /// defaults to the split size in the config
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// defaults to <output_dir>/scenes_<split>.jsonl
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn train(cfg: &RunConfig, scheme: u8, from: Option<&Path>) -> Result<()> {
    let scheme = Scheme::from_number(scheme)
        .ok_or_else(|| HarnessError::Config(format!("scheme must be 1, 2 or 3, got {scheme}")))?;
    let out = &cfg.output_dir;
    if scheme == Scheme::Weighted {
        let path = from.map(Path::to_path_buf).unwrap_or_else(|| Scheme::Distorted.checkpoint(out));
        let backbone = pipeline::load_backbone(&path)?;
        let train = pipeline::training_scenes(cfg)?;
        let (net, log) = pipeline::run_scheme3(cfg, &backbone, &train)?;
        for e in &log {
            eprintln!(
                "epoch {} loss {:.6} mean W+ {:.3} mean W- {:.3}",
                e.epoch, e.loss, e.mean_w_pos, e.mean_w_neg
            );
        }
        return pipeline::save_weighting(out, &net, &log);
    }
    let init = from.map(pipeline::load_backbone).transpose()?;
    let train = pipeline::training_scenes(cfg)?;
    let (model, log) = pipeline::run_supervised(cfg, scheme, &train, init)?;
    for e in &log {
        eprintln!("epoch {} loss {:.6} lr {:.2e}", e.epoch, e.loss, e.lr);
    }
    pipeline::save_backbone(out, scheme, &model, &log)
}

fn evaluate(cfg: &RunConfig, points: &[ChannelPoint], modes: &str, out: Option<&Path>) -> Result<()> {
    let modes = parse_modes(modes)?;
    let dir = &cfg.output_dir;
    let load_opt = |s: Scheme| {
        let p = s.checkpoint(dir);
        p.is_file().then(|| pipeline::load_backbone(&p)).transpose()
    };
    let scheme1 = load_opt(Scheme::Ideal)?;
    let scheme2 = load_opt(Scheme::Distorted)?;
    let wpath = Scheme::Weighted.checkpoint(dir);
    let weighting = wpath.is_file().then(|| pipeline::load_weighting(&wpath)).transpose()?;
    let models = Models {
        scheme1: scheme1.as_ref(),
        scheme2: scheme2.as_ref(),
        weighting: weighting.as_ref(),
    };
    let test = pipeline::test_scenes(cfg)?;
    let anchors = pipeline::anchors(cfg);
    let seed = seeds::derive(cfg.seed, "eval", 0);
    let records = evaluate_points(&models, points, &modes, &test, &anchors, &cfg.evaluation, seed)?;
    let path = out.map(Path::to_path_buf).unwrap_or_else(|| dir.join("metrics.csv"));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_metrics(BufWriter::new(File::create(&path)?), &records)?;
    eprintln!("wrote {} rows to {}", records.len(), path.display());
    Ok(())
}

fn point_from_flags(
    cfg: &RunConfig,
    snr: Option<f64>,
    path_loss_n: Option<f64>,
    pilots: Option<usize>,
) -> Result<ChannelPoint> {
    match (snr, path_loss_n, pilots) {
        (None, None, None) => Ok(ChannelPoint::Ideal),
        (_, Some(_), Some(_)) => Err(HarnessError::Config("--path-loss-n and --pilots are exclusive".into())),
        (Some(snr_db), None, None) => Ok(ChannelPoint::FlatSnr { snr_db }),
        (s, Some(n), None) => Ok(ChannelPoint::PathLoss {
            n,
            snr_db: s.unwrap_or(cfg.evaluation.pathloss_snr_db),
        }),
        (s, None, Some(p)) => Ok(ChannelPoint::Ofdm {
            pilots: p,
            snr_db: s.unwrap_or(cfg.evaluation.pilots_snr_db),
        }),
    }
}

fn gen_scenes(cfg: &RunConfig, split: &str, count: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (split, default_count) = match split {
        "train" => (Split::Train, cfg.dataset.train),
        "val" => (Split::Val, cfg.dataset.val),
        "test" => (Split::Test, cfg.dataset.test),
        other => return Err(HarnessError::Config(format!("unknown split {other:?}"))),
    };
    let list = scenes(&cfg.scene, cfg.seed, split, count.unwrap_or(default_count))?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.output_dir.join(format!("scenes_{}.jsonl", split.tag())));
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_scenes(&mut BufWriter::new(File::create(&path)?), &list)?;
    eprintln!("wrote {} scenes to {}", list.len(), path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            scheme,
            config,
            from_checkpoint,
        } => train(&load_config(config.as_deref())?, scheme, from_checkpoint.as_deref()),
        Command::Sweep {
            axis,
            modes,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let axis: Axis = axis.parse()?;
            evaluate(&cfg, &axis.points(&cfg.evaluation), &modes, out.as_deref())
        }
        Command::Evaluate {
            snr,
            path_loss_n,
            pilots,
            modes,
            config,
            out,
        } => {
            let cfg = load_config(config.as_deref())?;
            let point = point_from_flags(&cfg, snr, path_loss_n, pilots)?;
            evaluate(&cfg, &[point], &modes, out.as_deref())
        }
        Command::GenScenes {
            split,
            count,
            config,
            out,
        } => gen_scenes(&load_config(config.as_deref())?, &split, count, out.as_deref()),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
