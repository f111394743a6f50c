use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use log::{info, warn};

use sffnet::audit::{self, AUDITS};
use sffnet::config::{RunConfig, Variant, CONFIG_KEYS};
use sffnet::data::io::{self, CLASS_NAMES};
use sffnet::data::{Dataset, Sample, Split};
use sffnet::metrics::{format_summary, write_empty_report, write_report};
use sffnet::train::checkpoint::Checkpoint;
use sffnet::train::{self, Trainer, LAST_CHECKPOINT};
use sffnet::wavelet::{haar_dwt2, haar_idwt2};
use sffnet::{Error, Tensor};

#[derive(Parser)]
#[command(name = "sffnet", version, about = "Spatial/frequency fusion segmentation experiments on CPU")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic aerial-tile corpus.
    GenData {
        /// Run configuration; its [data] section describes the corpus.
        #[arg(long, visible_alias = "spec")]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        count: usize,
        /// Overrides data.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Config override `key=value`; repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Train a network; writes log.csv, last.ckpt and best.ckpt into --out.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint (its configuration applies unless --config is given).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Overrides train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Evaluate a checkpoint; writes a per-class metrics CSV and the confusion matrix.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "metrics.csv")]
        out: PathBuf,
        /// Confusion matrix dump (rows are truth classes).
        #[arg(long, default_value = "confusion.csv")]
        confusion: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Auto)]
        split: SplitArg,
    },
    /// Write the Haar sub-bands of an image's luminance as greyscale PNGs.
    Decompose {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference audits of every differentiable operation and module.
    Gradcheck {
        /// Audit name, or `all`.
        #[arg(long, default_value = "all")]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt every backward pass by 1%; every audit should then fail.
        #[arg(long)]
        inject_fault: bool,
    },
    /// Train the seven component variants and tabulate their scores.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "ablation.csv")]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum SplitArg {
    /// Validation split, or the training split when there is none.
    Auto,
    Train,
    Val,
    All,
}

enum Failure {
    Numeric(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn config_help() -> String {
    let width = CONFIG_KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (TOML sections, or --set section.key=value):\n");
    for (k, d) in CONFIG_KEYS {
        s.push_str(&format!("  {k:width$}  {d}\n"));
    }
    s
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().after_help(config_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => e.exit(),
    };
    let result = match cli.cmd {
        Cmd::GenData {
            config,
            out,
            count,
            seed,
            overrides,
        } => gen_data(config.as_deref(), &out, count, seed, &overrides),
        Cmd::Train {
            config,
            data,
            out,
            resume,
            seed,
            overrides,
        } => train_cmd(config.as_deref(), &data, &out, resume.as_deref(), seed, &overrides),
        Cmd::Eval {
            checkpoint,
            data,
            out,
            confusion,
            split,
        } => eval(&checkpoint, &data, &out, &confusion, split),
        Cmd::Decompose { image, out } => decompose(&image, &out),
        Cmd::Gradcheck {
            module,
            seed,
            inject_fault,
        } => gradcheck(&module, seed, inject_fault),
        Cmd::Ablate {
            config,
            data,
            out,
            seed,
            overrides,
        } => ablate(config.as_deref(), &data, &out, seed, &overrides),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Numeric(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig, Error> {
    let base = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cfg = base.with_overrides(overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(config: Option<&Path>, out: &Path, count: usize, seed: Option<u64>, overrides: &[String]) -> CmdResult {
    let mut cfg = load_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let start = std::time::Instant::now();
    let ds = Dataset::synthetic(&cfg.data, count)?;
    ds.write(out)?;
    info!(
        "wrote {count} tiles of {size}x{size} ({} val) to {} in {:.2?}",
        ds.indices(Split::Val).len(),
        out.display(),
        start.elapsed(),
        size = cfg.data.size,
    );
    Ok(())
}

fn train_cmd(
    config: Option<&Path>,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    seed: Option<u64>,
    overrides: &[String],
) -> CmdResult {
    let ds = Dataset::load(data)?;
    let mut trainer = match resume {
        Some(ck_path) => {
            let ck = Checkpoint::read(ck_path)?;
            let mut cfg = match config {
                Some(p) => RunConfig::load(p)?,
                None => ck.config.clone(),
            }
            .with_overrides(overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            info!("resuming from {} after {} epochs", ck_path.display(), ck.epochs);
            Trainer::resume(&ck, Some(&cfg))?
        }
        None => {
            let mut cfg = load_config(config, overrides)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            Trainer::new(&cfg)?
        }
    };
    info!(
        "{} parameters, {} training tiles",
        trainer.store.num_scalars(),
        ds.indices(Split::Train).len()
    );
    let outcome = trainer.fit(&ds, Some(out))?;
    let best = match outcome.best_epoch {
        Some(e) => format!("best mIoU {:.4} at epoch {e}", outcome.best_miou),
        None if outcome.best_miou.is_nan() => "never evaluated".to_string(),
        None => format!("best mIoU {:.4} from before the resume", outcome.best_miou),
    };
    println!(
        "trained to epoch {}; {best}; checkpoint {}",
        trainer.epochs_done,
        out.join(LAST_CHECKPOINT).display()
    );
    Ok(())
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, confusion: &Path, split: SplitArg) -> CmdResult {
    let ck = Checkpoint::read(checkpoint)?;
    let ds = Dataset::load(data)?;
    let (net, store, _) = ck.restore()?;
    let cfg = &ck.config;
    let indices = match split {
        SplitArg::Auto => Trainer::eval_split(&ds),
        SplitArg::Train => ds.indices(Split::Train),
        SplitArg::Val => ds.indices(Split::Val),
        SplitArg::All => (0..ds.len()).collect(),
    };
    if indices.is_empty() {
        warn!("evaluation split is empty; writing a header-only report");
        write_empty_report(out)?;
        return Ok(());
    }
    let samples: Vec<&Sample> = indices.iter().map(|&i| &ds.samples[i]).collect();
    ds.check(cfg.model.num_classes, cfg.train.ignore_index)?;
    let cm = train::evaluate(&net, &store, &samples, cfg.train.ignore_index)?;
    let m = cm.metrics(&cfg.metrics.exclude_classes);
    write_report(out, &m, &CLASS_NAMES)?;
    std::fs::write(confusion, cm.to_csv()).map_err(|e| Failure::Usage(format!("{}: {e}", confusion.display())))?;
    println!("{} tiles: {}", samples.len(), format_summary(&m));
    Ok(())
}

/// Rec. 601 luma of the top-left `h x w` region of a `(1, 3, H, W)` image.
fn luminance(img: &Tensor, h: usize, w: usize) -> Tensor {
    let [_, _, ih, iw] = img.dims();
    let d = img.data();
    let hw = ih * iw;
    Tensor::from_fn([1, 1, h, w], |_, _, y, x| {
        let p = y * iw + x;
        0.299 * d[p] + 0.587 * d[hw + p] + 0.114 * d[2 * hw + p]
    })
}

fn psnr(a: &Tensor, b: &Tensor) -> f64 {
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.numel() as f64;
    10.0 * (1.0 / mse).log10()
}

fn decompose(image: &Path, out: &Path) -> CmdResult {
    let img = io::read_image(image)?;
    let [_, _, h, w] = img.dims();
    let (he, we) = (h - h % 2, w - w % 2);
    if he == 0 || we == 0 {
        return Err(Failure::Usage(format!("{}: image must be at least 2x2", image.display())));
    }
    if (he, we) != (h, w) {
        warn!("cropping {h}x{w} to {he}x{we} for the transform");
    }
    let gray = luminance(&img, he, we);
    let quad = haar_dwt2(&gray)?;
    let recon = haar_idwt2(&quad)?;
    std::fs::create_dir_all(out).map_err(|e| Failure::Usage(format!("{}: {e}", out.display())))?;
    // A spans [0, 2] under the 1/2 filters; detail magnitudes span [0, 1].
    io::write_gray(&out.join("A.png"), &quad.a.map(|v| v / 2.0))?;
    for (name, band) in [("H", &quad.h), ("V", &quad.v), ("D", &quad.d)] {
        io::write_gray(&out.join(format!("{name}.png")), &band.map(f64::abs))?;
    }
    io::write_gray(&out.join("input.png"), &gray)?;
    io::write_gray(&out.join("reconstruction.png"), &recon)?;
    io::TensorFile::from_tensor(&quad.stacked(), io::DType::F64).write(&out.join("bands.sfft"))?;
    let [eh, ev, ed] = quad.detail_energy();
    println!(
        "bands {}x{}; detail energy H {eh:.6e} V {ev:.6e} D {ed:.6e}; reconstruction PSNR {:.2} dB",
        he / 2,
        we / 2,
        psnr(&gray, &recon)
    );
    Ok(())
}

fn gradcheck(module: &str, seed: u64, fault: bool) -> CmdResult {
    let names: Vec<&str> = if module == "all" {
        AUDITS.iter().map(|a| a.name).collect()
    } else {
        match audit::find(module) {
            Some(a) => vec![a.name],
            None => {
                let known: Vec<&str> = AUDITS.iter().map(|a| a.name).collect();
                return Err(Failure::Usage(format!("unknown module {module}; known: all, {}", known.join(", "))));
            }
        }
    };
    let mut failed = Vec::new();
    println!("{:<18} {:>12} {:>8}  result", "module", "max_rel_err", "tol");
    for name in names {
        let r = audit::run(name, seed, fault)?;
        let ok = r.passed();
        println!(
            "{name:<18} {:>12.3e} {:>8.0e}  {}",
            r.max_rel_err(),
            r.tol,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Numeric(format!("gradient audit failed: {}", failed.join(", "))))
    }
}

fn ablate(config: Option<&Path>, data: &Path, out: &Path, seed: Option<u64>, overrides: &[String]) -> CmdResult {
    let mut cfg = load_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let ds = Dataset::load(data)?;
    ds.check(cfg.model.num_classes, cfg.train.ignore_index)?;
    let rows = train::ablate(&cfg, &ds, &Variant::ALL)?;
    train::write_ablation(out, &rows)?;
    println!("{:<24} {:>9} {:>7} {:>7} {:>7}", "variant", "params", "meanF1", "OA", "mIoU");
    for r in &rows {
        println!(
            "{:<24} {:>9} {:>7.2} {:>7.2} {:>7.2}",
            r.variant.label(),
            r.params,
            100.0 * r.metrics.mean_f1,
            100.0 * r.metrics.oa,
            100.0 * r.metrics.miou
        );
    }
    Ok(())
}
