use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsid_core::checkpoint::load_checkpoint;
use fsid_core::config::RunConfig;
use fsid_core::data::{load_all, load_image, save_png, synth_dataset, DatasetSpec, GT_DIR, LOW_DIR};
use fsid_core::fourier::{image_amplitude, image_phase, swap_amplitude};
use fsid_core::gradcheck::DEFAULT_TOLERANCE;
use fsid_core::gradsuite::{self, SUITES};
use fsid_core::network::{forward_padded, Ablation, Network};
use fsid_core::tensor::{with_precision, Precision, Tensor};
use fsid_core::train::{evaluate, log_path, train};

#[derive(Parser)]
#[command(name = "fsidnet", version, about = "Two-stage frequency-spatial low-light enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on a paired dataset (<data>/low and <data>/high).
    Train(TrainArgs),
    /// Train one of the ablation variants.
    Ablate {
        /// full, model1..model6, or a full variant name such as model4_no_iem
        #[arg(long)]
        variant: Ablation,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Enhance an image or every image in a directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the stage-1 output as <name>_stage1.png.
        #[arg(long)]
        dump_stage1: bool,
    },
    /// Report per-image and mean PSNR/SSIM on a paired dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Combine the amplitude spectrum of one image with the phase of another.
    FourierSwap {
        #[arg(long)]
        amp: PathBuf,
        #[arg(long)]
        phase: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the finite-difference gradient suites.
    Gradcheck {
        /// One of tensor, fourier, blocks, iem, losses; all when omitted.
        #[arg(long)]
        module: Option<String>,
    },
    /// Write a synthetic paired dataset in the layout `train` expects.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// TOML file with [network] and [train] tables; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn run_training(args: &TrainArgs, variant: Option<Ablation>) -> Result<()> {
    let mut config = match &args.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None => {
            let mut c = RunConfig::default();
            c.override_seed(std::env::var(fsid_core::config::SEED_ENV).ok().as_deref())?;
            c
        }
    };
    if let Some(v) = variant {
        config.network.ablation = v;
    }
    config.train.out_dir = Some(args.out.clone());
    config.validate()?;

    let spec = DatasetSpec::from_root(&args.data, config.train.crop, config.train.augment, config.train.seed);
    spec.validate()?;
    let pairs = load_all(&spec).with_context(|| format!("loading dataset {}", args.data.display()))?;
    if pairs.is_empty() {
        bail!("no images found in {}", spec.low_dir.display());
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("config.toml"), config.to_toml()?)?;

    let net = Network::build(config.network.clone())?;
    println!(
        "{} pairs, variant {}, {} parameters",
        pairs.len(),
        config.network.ablation,
        net.parameter_count()
    );
    let mut log = fs::File::create(log_path(&args.out))?;
    let mut write_err = None;
    train(&net, &pairs, &config.train, &mut |entry| {
        println!("{entry}");
        if let Err(e) = writeln!(log, "{entry}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).context("writing the training log");
    }
    println!("checkpoint written to {}", args.out.join("final.fsid").display());
    Ok(())
}

fn image_files(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(input)
        .with_context(|| format!("reading {}", input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "ppm" | "pgm" | "pnm"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Loads an image as a batch of one.
fn load_batch(path: &Path) -> Result<Tensor> {
    let x = load_image(path)?;
    let shape = x.shape().to_vec();
    Ok(x.reshape(&[1, shape[0], shape[1], shape[2]])?)
}

fn infer(ckpt: &Path, input: &Path, out: &Path, dump_stage1: bool) -> Result<()> {
    let net = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let files = image_files(input)?;
    if files.is_empty() {
        bail!("no images found at {}", input.display());
    }
    fs::create_dir_all(out)?;
    with_precision(Precision::Double, || -> Result<()> {
        for file in &files {
            let trace = forward_padded(&net, &load_batch(file)?)?;
            let stem = file.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let target = out.join(format!("{stem}.png"));
            save_png(&trace.y2, &target)?;
            if dump_stage1 {
                save_png(&trace.y1, &out.join(format!("{stem}_stage1.png")))?;
            }
            println!("{} -> {}", file.display(), target.display());
        }
        Ok(())
    })
}

fn eval(ckpt: &Path, data: &Path) -> Result<()> {
    let net = load_checkpoint(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let pairs = load_all(&DatasetSpec::from_root(data, None, false, 0))?;
    let report = evaluate(&net, &pairs)?;
    for m in &report.images {
        println!("{}\tpsnr={:.4}\tssim={:.4}", m.id, m.psnr, m.ssim);
    }
    println!("mean\tpsnr={:.4}\tssim={:.4}", report.mean_psnr, report.mean_ssim);
    Ok(())
}

fn fourier_swap(amp: &Path, phase: &Path, out: &Path) -> Result<()> {
    let a = load_batch(amp)?;
    let p = load_batch(phase)?;
    if a.shape() != p.shape() {
        bail!("images differ in size: {:?} vs {:?}", a.shape(), p.shape());
    }
    let swapped = with_precision(Precision::Double, || swap_amplitude(&image_amplitude(&a)?, &image_phase(&p)?))?;
    save_png(&swapped, out)?;
    Ok(())
}

fn gradcheck(module: Option<&str>) -> Result<bool> {
    let names: Vec<&str> = match module {
        Some(m) => vec![m],
        None => SUITES.to_vec(),
    };
    let mut ok = true;
    for name in names {
        for r in gradsuite::run(name)? {
            let pass = r.passes(DEFAULT_TOLERANCE);
            ok &= pass;
            println!(
                "{name:8} {:28} max_rel_err={:.3e} checked={:4} {}",
                r.name,
                r.max_rel_error,
                r.checked,
                if pass { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(ok)
}

fn synth(out: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    for dir in [LOW_DIR, GT_DIR] {
        fs::create_dir_all(out.join(dir))?;
    }
    for pair in synth_dataset(seed, count, size)? {
        let name = format!("{}.png", pair.id);
        save_png(&pair.low, &out.join(LOW_DIR).join(&name))?;
        save_png(&pair.gt, &out.join(GT_DIR).join(&name))?;
    }
    println!("wrote {count} pairs to {}", out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => run_training(args, None).map(|_| true),
        Command::Ablate { variant, train } => run_training(train, Some(*variant)).map(|_| true),
        Command::Infer {
            ckpt,
            input,
            out,
            dump_stage1,
        } => infer(ckpt, input, out, *dump_stage1).map(|_| true),
        Command::Eval { ckpt, data } => eval(ckpt, data).map(|_| true),
        Command::FourierSwap { amp, phase, out } => fourier_swap(amp, phase, out).map(|_| true),
        Command::Gradcheck { module } => gradcheck(module.as_deref()),
        Command::Synth { out, count, size, seed } => synth(out, *count, *size, *seed).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
