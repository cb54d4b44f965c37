//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 for usage errors, 2 for data errors, 3 for numeric failures.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;

use crate::augment::{augment_demo, RcConfig};
use crate::error::{CarError, Result};
use crate::image::Image2D;
use crate::io::{carf, checkpoint, config, create_dir, dataset, pgm};
use crate::metrics::{evaluate_pair, MetricsRecord};
use crate::synthdeform::synth_pair;
use crate::trainer::{self, TrainConfig};
use crate::warp::DeformationField;

#[derive(Parser, Debug)]
#[command(name = "carreg", version, about = "Contrast-agnostic deformable registration")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantom pairs with ground-truth deformations.
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        pairs: u64,
        #[arg(long, num_args = 2, value_names = ["H", "W"], default_values_t = [64, 64])]
        size: Vec<usize>,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Preview random-contrast renderings of one image.
    Augment {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        samples: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        rc_kernel: usize,
        #[arg(long, default_value_t = crate::augment::DEFAULT_DEPTH)]
        depth: usize,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Held-out dataset scored after every epoch.
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        no_clr: bool,
        /// Train on the raw pairs without random contrasts.
        #[arg(long)]
        no_rc: bool,
        #[arg(long)]
        rc_kernel: Option<usize>,
        #[arg(long)]
        share_encoders: bool,
    },
    /// Register a moving image to a fixed image.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, requires = "fixed_mask")]
        moving_mask: Option<PathBuf>,
        #[arg(long, requires = "moving_mask")]
        fixed_mask: Option<PathBuf>,
    },
    /// Score every pair of a manifest and write one CSV row per pair.
    Evaluate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match dispatch(cli.cmd) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Simulate {
            out,
            pairs,
            size,
            classes,
            seed,
        } => simulate(&out, pairs, size[0], size[1], classes, seed),
        Command::Augment {
            input,
            out,
            samples,
            seed,
            rc_kernel,
            depth,
        } => {
            let cfg = RcConfig {
                kernel_size: rc_kernel,
                ..RcConfig::with_depth(depth)
            };
            augment_preview(&input, &out, samples, seed, &cfg)
        }
        Command::Train {
            config: cfg_path,
            data,
            out,
            val,
            no_clr,
            no_rc,
            rc_kernel,
            share_encoders,
        } => {
            let mut cfg = match &cfg_path {
                Some(p) => config::load(p)?,
                None => TrainConfig::default(),
            };
            cfg.no_clr |= no_clr;
            cfg.augment &= !no_rc;
            cfg.arch.share_encoders |= share_encoders;
            if let Some(k) = rc_kernel {
                cfg.rc_kernel_size = k;
            }
            cfg.validate()?;
            create_dir(&out)?;
            crate::io::write_file(&out.join("config.txt"), config::serialize(&cfg).as_bytes())?;
            let outcome = trainer::train(&cfg, &data, val.as_deref(), &out)?;
            if let Some(last) = outcome.log.last() {
                eprintln!(
                    "trained {} steps; final total loss {:.6}",
                    outcome.log.len(),
                    last.loss.total
                );
            }
            Ok(())
        }
        Command::Register {
            checkpoint: ck,
            moving,
            fixed,
            out,
            moving_mask,
            fixed_mask,
        } => register(&ck, &moving, &fixed, &out, moving_mask.as_deref(), fixed_mask.as_deref()),
        Command::Evaluate { pairs, out } => evaluate(&pairs, &out),
    }
}

/// Reads a CARF or (by extension) PGM image.
pub fn read_any_image(path: &Path) -> Result<Image2D> {
    if path.extension().map_or(false, |e| e.eq_ignore_ascii_case("pgm")) {
        pgm::read_pgm(path)
    } else {
        carf::read_image(path)
    }
}

fn simulate(out: &Path, pairs: u64, h: usize, w: usize, classes: usize, seed: u64) -> Result<()> {
    if pairs == 0 {
        return Err(CarError::invalid("--pairs must be at least 1"));
    }
    let pool = trainer::thread_pool(trainer::worker_threads())?;
    let samples = pool.install(|| {
        (0..pairs)
            .into_par_iter()
            .map(|i| synth_pair(seed, i, h, w, classes))
            .collect::<Result<Vec<_>>>()
    })?;
    dataset::write_dataset(out, &samples)
}

fn augment_preview(input: &Path, out: &Path, samples: u64, seed: u64, cfg: &RcConfig) -> Result<()> {
    let img = read_any_image(input)?;
    create_dir(out)?;
    for (i, r) in augment_demo(seed, cfg, &img, samples)?.iter().enumerate() {
        carf::write_image(&out.join(format!("aug_{:03}.carf", i)), r)?;
        pgm::write_pgm(&out.join(format!("aug_{:03}.pgm", i)), r)?;
    }
    Ok(())
}

pub const METRICS_HEADER: &str = "pair,dice,hd95,folding_pct,grad_jac";

pub fn metrics_line(pair: &str, m: &MetricsRecord) -> String {
    let hd = m.hd95.map_or_else(|| "NA".to_string(), |v| v.to_string());
    format!("{},{},{},{},{}", pair, m.dice, hd, m.folding_pct, m.grad_jac)
}

fn register(
    ck: &Path,
    moving: &Path,
    fixed: &Path,
    out: &Path,
    moving_mask: Option<&Path>,
    fixed_mask: Option<&Path>,
) -> Result<()> {
    let model = checkpoint::load(ck)?.model;
    let m = read_any_image(moving)?;
    let f = read_any_image(fixed)?;
    let masks = match (moving_mask, fixed_mask) {
        (Some(a), Some(b)) => Some((carf::read_mask(a)?, carf::read_mask(b)?)),
        _ => None,
    };
    let reg = trainer::register(&model, &m, &f, masks.as_ref().map(|(a, b)| (a, b)))?;
    create_dir(out)?;
    carf::write_field(&out.join("field.carf"), &reg.field)?;
    carf::write_image(&out.join("warped.carf"), &reg.warped)?;
    pgm::write_pgm(&out.join("warped.pgm"), &reg.warped)?;
    if let Some(rec) = &reg.metrics {
        let text = format!("{}\n{}\n", METRICS_HEADER, metrics_line("0", rec));
        crate::io::write_file(&out.join("metrics.csv"), text.as_bytes())?;
    }
    Ok(())
}

fn evaluate(manifest: &Path, out: &Path) -> Result<()> {
    let entries = dataset::read_manifest(manifest)?;
    let pool = trainer::thread_pool(trainer::worker_threads())?;
    let records = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let mm = carf::read_mask(&e.moving_mask)?;
                let mf = carf::read_mask(&e.fixed_mask)?;
                let field = match &e.field {
                    Some(p) => carf::read_field(p)?,
                    None => DeformationField::zeros(mm.height(), mm.width()),
                };
                evaluate_pair(&mm, &mf, &field)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let file = std::fs::File::create(out).map_err(|e| CarError::io(out, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io_err = |e| CarError::io(out, e);
    writeln!(w, "{}", METRICS_HEADER).map_err(io_err)?;
    for (i, r) in records.iter().enumerate() {
        writeln!(w, "{}", metrics_line(&i.to_string(), r)).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}
