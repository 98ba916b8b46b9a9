use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use colorfuse_core::colorspace::RgbImage;
use colorfuse_core::config::TrainConfig;
use colorfuse_core::dataset::{load_rgb, save_rgb};
use colorfuse_core::extractor::{load_pretrained, make_stub_extractor, EmbeddingExtractor, UnloadedExtractor};
use colorfuse_core::fid::{evaluate_images, load_image_dir, FidReport};
use colorfuse_core::generator::{Generator, Variant};
use colorfuse_core::trainer::{self, build_extractor, load_generator};

#[derive(Parser)]
#[command(name = "colorfuse", version, about = "Train, apply and evaluate a luminance-conditioned colourisation GAN")]
struct Cli {
    /// Increase log detail (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a generator/discriminator pair from a config file or preset.
    Train(TrainArgs),
    /// Colourise one image or every image in a directory.
    Colorize(ColorizeArgs),
    /// Fréchet distance between real images and generated ones.
    EvalFid(EvalFidArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML config path, or a preset name (unsplash-50ep, coco-2phase, desk-64).
    #[arg(long)]
    config: PathBuf,
    /// Dotted override applied after the file is parsed, e.g. `optimizer.lr=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set variant=...`.
    #[arg(long)]
    variant: Option<Variant>,
    /// Continue from a checkpoint directory, manifest, or run directory.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct ColorizeArgs {
    /// Checkpoint directory, manifest, or run directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image or directory (scanned recursively).
    #[arg(long = "in")]
    input: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Appended to each input stem.
    #[arg(long, default_value = "_color")]
    suffix: String,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Stub,
    Pretrained,
}

#[derive(Args)]
struct EvalFidArgs {
    /// Directory of reference images.
    #[arg(long)]
    real: PathBuf,
    /// Directory of generated images.
    #[arg(long, conflicts_with_all = ["ckpt", "gray"], required_unless_present = "ckpt")]
    gen: Option<PathBuf>,
    /// Generate on the fly from this checkpoint (needs --gray).
    #[arg(long, requires = "gray")]
    ckpt: Option<PathBuf>,
    /// Inputs to colourise with --ckpt.
    #[arg(long, requires = "ckpt")]
    gray: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "stub")]
    backend: BackendArg,
    /// Weights manifest for the pretrained backend.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Weight seed of the stub backend.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Where to write the JSON report.
    #[arg(long, default_value = "fid_report.json")]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Colorize(a) => cmd_colorize(a),
        Command::EvalFid(a) => cmd_eval_fid(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut overrides = a.overrides;
    if let Some(v) = a.variant {
        overrides.push(format!("variant=\"{v}\""));
    }
    let cfg = TrainConfig::load(&a.config, &overrides).with_context(|| format!("invalid config {}", a.config.display()))?;
    let extractor = build_extractor(&cfg.extractor)?;
    let summary = trainer::run(&cfg, extractor.clone(), a.resume.as_deref())?;
    println!("steps: {}", summary.steps);
    if let Some(l) = summary.last {
        println!("last: l1 {:.6} adv_g {:.6} loss_d {:.6}", l.l1, l.adv_g, l.total_d);
    }
    println!("extractor invocations: {}", extractor.invocations());
    println!("metrics: {}", summary.metrics.display());
    println!("checkpoint: {}", summary.final_checkpoint.display());
    Ok(())
}

/// Generator plus the extractor its variant needs.
struct Colorizer {
    gen: Generator,
    extractor: Option<Arc<dyn EmbeddingExtractor>>,
    size: usize,
}

impl Colorizer {
    fn load(ckpt: &Path) -> Result<Self> {
        let (gen, m) = load_generator(ckpt).with_context(|| format!("cannot load checkpoint {}", ckpt.display()))?;
        let extractor = if m.variant.uses_extractor() { Some(build_extractor(&m.config.extractor)?) } else { None };
        Ok(Self { gen, extractor, size: m.image_size })
    }

    fn apply(&mut self, img: &RgbImage) -> Result<RgbImage> {
        Ok(self.gen.colorize(img, self.size, self.extractor.as_deref())?)
    }
}

fn list_inputs(input: &Path) -> Result<Vec<(PathBuf, RgbImage)>> {
    if input.is_dir() {
        let (ok, skipped) = load_image_dir(input)?;
        if !skipped.is_empty() {
            eprintln!("skipped {} unreadable file(s)", skipped.len());
        }
        Ok(ok)
    } else if input.is_file() {
        Ok(vec![(input.to_path_buf(), load_rgb(input)?)])
    } else {
        bail!("input {} does not exist", input.display())
    }
}

fn cmd_colorize(a: ColorizeArgs) -> Result<()> {
    let mut colorizer = Colorizer::load(&a.ckpt)?;
    let inputs = list_inputs(&a.input)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("cannot create {}", a.out.display()))?;
    for (path, img) in &inputs {
        let start = Instant::now();
        let out_img = colorizer.apply(img)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = a.out.join(format!("{stem}{}.png", a.suffix));
        save_rgb(&out_img, &dest)?;
        println!("{} -> {} ({:.1} ms)", path.display(), dest.display(), start.elapsed().as_secs_f64() * 1e3);
    }
    println!("colourised {} image(s)", inputs.len());
    Ok(())
}

fn fid_extractor(a: &EvalFidArgs) -> Result<Arc<dyn EmbeddingExtractor>> {
    Ok(match a.backend {
        BackendArg::Stub => Arc::new(make_stub_extractor(a.seed)),
        BackendArg::Pretrained => match &a.weights {
            Some(w) => Arc::new(load_pretrained(w)?),
            None => Arc::new(UnloadedExtractor { reason: "pass --weights <manifest.json> for the pretrained backend".into() }),
        },
    })
}

fn cmd_eval_fid(a: EvalFidArgs) -> Result<()> {
    for dir in [Some(&a.real), a.gen.as_ref(), a.gray.as_ref()].into_iter().flatten() {
        if !dir.is_dir() {
            bail!("directory {} does not exist", dir.display());
        }
    }
    let extractor = fid_extractor(&a)?;
    let (real, skipped_real) = load_image_dir(&a.real)?;
    let (generated, skipped_gen) = match (&a.gen, &a.ckpt, &a.gray) {
        (Some(dir), _, _) => {
            let (imgs, skipped) = load_image_dir(dir)?;
            (imgs.into_iter().map(|(_, i)| i).collect::<Vec<_>>(), skipped.len())
        }
        (None, Some(ckpt), Some(gray)) => {
            let mut colorizer = Colorizer::load(ckpt)?;
            let (imgs, skipped) = load_image_dir(gray)?;
            let out = imgs.iter().map(|(_, i)| colorizer.apply(i)).collect::<Result<Vec<_>>>()?;
            (out, skipped.len())
        }
        _ => bail!("pass either --gen or both --ckpt and --gray"),
    };
    let real: Vec<RgbImage> = real.into_iter().map(|(_, i)| i).collect();
    let report: FidReport = evaluate_images(extractor.as_ref(), &real, &generated, skipped_real.len() + skipped_gen)?;
    println!("FID: {:.6}", report.fid);
    println!("backend: {}", report.backend);
    println!("images: real {} generated {} skipped {}", report.n_real, report.n_generated, report.skipped);
    let json = serde_json::to_string_pretty(&report)?;
    std::fs::write(&a.report, json + "\n").with_context(|| format!("cannot write {}", a.report.display()))?;
    Ok(())
}
