//! Command-line driver: train, enhance, snrmap, eval.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lowlight::checkpoint::Checkpoint;
use lowlight::config::parse_config;
use lowlight::error::{Error, Result};
use lowlight::image::{load_image, save_gray_map, save_image};
use lowlight::metrics::evaluate_dir;
use lowlight::model::enhance;
use lowlight::snr::compute_snr_map;
use lowlight::train::{model_from_checkpoint, train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "lowlight",
    version,
    about = "Unsupervised low-light image enhancement"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the low-light images of a LOL-layout dataset.
    Train(TrainArgs),
    /// Enhance a PNG file or a directory of PNGs with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Write the SNR map and binary mask of an image as grayscale PNGs.
    Snrmap(SnrmapArgs),
    /// Compare two directories of same-named PNGs with PSNR/SSIM.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Dataset layout: lol-v1 or lol-v2-real.
    #[arg(long)]
    dataset: Option<String>,
    /// Output directory for checkpoints and loss.csv.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Optimization steps [default: 2000].
    #[arg(long)]
    iters: Option<u64>,
    /// Crops per step [default: 4].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: Option<u64>,
    /// Adam learning rate [default: 1e-3].
    #[arg(long)]
    lr: Option<f64>,
    /// Training crop side in pixels [default: 128].
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    crop: Option<u64>,
    /// RNG seed [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Reconstruction-vs-brightness weight [default: 0.1].
    #[arg(long)]
    lambda1: Option<f64>,
    /// Illumination smoothness weight [default: 0.1].
    #[arg(long)]
    lambda2: Option<f64>,
    /// Structure-awareness factor inside the exponential [default: 10].
    #[arg(long)]
    lambda3: Option<f64>,
    /// Reflectance TV weight [default: 0.01].
    #[arg(long)]
    lambda4: Option<f64>,
    /// Feature channels [default: 48].
    #[arg(long)]
    channels: Option<u64>,
    /// Residual conv blocks in the shallow branch [default: 3].
    #[arg(long)]
    res_blocks: Option<u64>,
    /// Residual attention blocks [default: 2].
    #[arg(long)]
    blocks: Option<u64>,
    /// Attention layers per block [default: 2].
    #[arg(long)]
    layers: Option<u64>,
    /// Attention window side [default: 8].
    #[arg(long)]
    window: Option<u64>,
    /// Attention heads [default: 4].
    #[arg(long)]
    heads: Option<u64>,
    /// SNR denoiser kernel side, odd [default: 5].
    #[arg(long)]
    kernel: Option<u64>,
    /// SNR division guard [default: 1e-6].
    #[arg(long)]
    eps: Option<f64>,
    /// SNR mask threshold [default: 0.5].
    #[arg(long)]
    threshold: Option<f64>,
    /// Disable SNR guidance: unmasked attention, fixed 0.5 fusion.
    #[arg(long)]
    no_snr: bool,
    /// Steps between periodic checkpoints [default: 500].
    #[arg(long)]
    ckpt_every: Option<u64>,
    /// Resume from an existing checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// key=value config file; explicit flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EnhanceArgs {
    /// Trained checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PNG file or directory of PNGs.
    #[arg(long)]
    input: PathBuf,
    /// Output directory (created if needed).
    #[arg(long)]
    out_dir: PathBuf,
    /// Also write the illumination map as <stem>.illum.png.
    #[arg(long)]
    emit_illumination: bool,
}

#[derive(Args)]
struct SnrmapArgs {
    /// Input PNG.
    #[arg(long)]
    input: PathBuf,
    /// Output directory [default: alongside the input].
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Box denoiser kernel side, odd [default: 5].
    #[arg(long, default_value_t = 5)]
    kernel: u64,
    /// Division guard [default: 1e-6].
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    /// Binarization threshold [default: 0.5].
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predictions.
    #[arg(long)]
    pred_dir: PathBuf,
    /// Directory of references with matching filenames.
    #[arg(long)]
    gt_dir: PathBuf,
    /// Also write the CSV here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Enhance(args) => cmd_enhance(args),
        Command::Snrmap(args) => cmd_snrmap(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut map: BTreeMap<String, String> = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_config(&text)?
        }
        None => BTreeMap::new(),
    };

    let overrides = [
        ("data_dir", args.data_dir.map(|p| p.display().to_string())),
        ("dataset", args.dataset),
        ("out_dir", args.out_dir.map(|p| p.display().to_string())),
        ("iters", args.iters.map(|v| v.to_string())),
        ("batch_size", args.batch_size.map(|v| v.to_string())),
        ("lr", args.lr.map(|v| v.to_string())),
        ("crop", args.crop.map(|v| v.to_string())),
        ("seed", args.seed.map(|v| v.to_string())),
        ("lambda1", args.lambda1.map(|v| v.to_string())),
        ("lambda2", args.lambda2.map(|v| v.to_string())),
        ("lambda3", args.lambda3.map(|v| v.to_string())),
        ("lambda4", args.lambda4.map(|v| v.to_string())),
        ("channels", args.channels.map(|v| v.to_string())),
        ("res_blocks", args.res_blocks.map(|v| v.to_string())),
        ("blocks", args.blocks.map(|v| v.to_string())),
        ("layers", args.layers.map(|v| v.to_string())),
        ("window", args.window.map(|v| v.to_string())),
        ("heads", args.heads.map(|v| v.to_string())),
        ("snr_kernel", args.kernel.map(|v| v.to_string())),
        ("snr_eps", args.eps.map(|v| v.to_string())),
        ("snr_threshold", args.threshold.map(|v| v.to_string())),
        ("ckpt_every", args.ckpt_every.map(|v| v.to_string())),
        ("snr_enabled", args.no_snr.then(|| "false".to_string())),
    ];
    for (key, value) in overrides {
        if let Some(v) = value {
            map.insert(key.to_string(), v);
        }
    }

    let mut config = TrainConfig::from_map(&map)?;
    config.resume = args.resume;
    let ckpt = train(&config)?;
    println!(
        "finished at step {}; checkpoint at {}",
        ckpt.iteration()?,
        config.out_dir.join("checkpoint_final.ckpt").display()
    );
    Ok(())
}

fn png_stem(path: &Path) -> String {
    path.file_stem().unwrap_or_default().to_string_lossy().into_owned()
}

fn cmd_enhance(args: EnhanceArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&args.ckpt)?;
    let (params, snr, _) = model_from_checkpoint(&ckpt)?;

    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut v: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .map_err(|e| Error::io(&args.input, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
            })
            .collect();
        v.sort();
        v
    } else {
        vec![args.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Argument(format!(
            "no PNG inputs under {}",
            args.input.display()
        )));
    }

    std::fs::create_dir_all(&args.out_dir).map_err(|e| Error::io(&args.out_dir, e))?;
    for path in inputs {
        let img = load_image(&path)?;
        if args.emit_illumination {
            let guidance = snr.guidance(&img)?;
            let out = lowlight::model::forward_with_guidance(&img, &params, &guidance)?;
            let name = path.file_name().unwrap_or_default();
            save_image(&out.reflectance, &args.out_dir.join(name))?;
            save_gray_map(
                img.height(),
                img.width(),
                out.illumination.data(),
                &args.out_dir.join(format!("{}.illum.png", png_stem(&path))),
            )?;
        } else {
            let enhanced = enhance(&img, &params, &snr)?;
            let name = path.file_name().unwrap_or_default();
            save_image(&enhanced, &args.out_dir.join(name))?;
        }
        println!("enhanced {}", path.display());
    }
    Ok(())
}

fn cmd_snrmap(args: SnrmapArgs) -> Result<()> {
    let img = load_image(&args.input)?;
    let snr = compute_snr_map(&img, args.kernel as usize, args.eps, args.threshold)?;
    let out_dir = match args.out_dir {
        Some(d) => d,
        None => args
            .input
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
    let stem = png_stem(&args.input);
    let (h, w) = (img.height(), img.width());
    save_gray_map(h, w, snr.continuous.data(), &out_dir.join(format!("{stem}.snr.png")))?;
    save_gray_map(h, w, snr.mask.data(), &out_dir.join(format!("{stem}.mask.png")))?;
    println!("wrote {stem}.snr.png and {stem}.mask.png to {}", out_dir.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let table = evaluate_dir(&args.pred_dir, &args.gt_dir)?;
    let csv = table.to_csv();
    print!("{csv}");
    if let Some(out) = args.out {
        std::fs::write(&out, &csv).map_err(|e| Error::io(&out, e))?;
    }
    Ok(())
}
