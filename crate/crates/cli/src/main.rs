use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use freqsr_core::analysis::{export_histogram, profile_corpus, read_histogram_csv, Thresholds};
use freqsr_core::data::{
    self, crop_to_multiple, degrade, list_images, load_luminance, resize_bicubic, Dataset,
    DatasetManifest, Split,
};
use freqsr_core::eval::{load_eval_set, run_eval, super_resolve_rgb};
use freqsr_core::plot::{loss_chart, save_png, vfp_histogram_chart};
use freqsr_core::train::{
    load_checkpoint, read_training_log, train_from, TrainOptions, TrainState,
};
use freqsr_core::{Config, Error};

#[derive(Parser)]
#[command(
    name = "freqsr",
    version,
    about = "Arbitrary-scale super-resolution in the block-DCT domain"
)]
struct Cli {
    /// More log output (repeat for trace).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Valid-frequency-point statistics of HR/LR pairs.
    Analyze(AnalyzeArgs),
    /// Train a model on a directory of images.
    Train(TrainArgs),
    /// PSNR/SSIM of a checkpoint against bicubic on a directory of images.
    Eval(EvalArgs),
    /// Super-resolve one image.
    Infer(InferArgs),
    /// Render charts from CSV outputs.
    Plot {
        #[command(subcommand)]
        chart: PlotCommand,
    },
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Ground-truth images.
    #[arg(long)]
    hr_dir: PathBuf,
    /// Degraded counterparts (same file names); generated from --scales if absent.
    #[arg(long, requires = "scale")]
    lr_dir: Option<PathBuf>,
    /// Scale of the images in --lr-dir.
    #[arg(long, value_parser = parse_scale)]
    scale: Option<f64>,
    /// Scales to degrade at when no --lr-dir is given.
    #[arg(long, value_delimiter = ',', value_parser = parse_scale, default_values_t = [2.0, 3.0, 4.0])]
    scales: Vec<f64>,
    /// Per-scale thresholds, e.g. `2=0.09,3=0.2,4=0.5`.
    #[arg(long, default_value = "2=0.09,3=0.2,4=0.5")]
    thresholds: String,
    /// Histogram CSV; a JSON copy is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// TOML configuration; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of training images.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, default_value = "train")]
    split: Split,
    /// Output directory for the log, manifest and checkpoint.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint (its config wins over --config).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Drop the scale-aware expert convolutions.
    #[arg(long)]
    no_sfa: bool,
    /// Chain residual blocks without dense fusion.
    #[arg(long)]
    no_dense: bool,
    /// Use this valid frequency point for every block instead of the policy.
    #[arg(long)]
    fixed_action: Option<usize>,
    /// Progress line interval in steps.
    #[arg(long, default_value_t = 50)]
    log_every: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Directory of ground-truth images.
    #[arg(long)]
    data_dir: PathBuf,
    #[arg(long, value_delimiter = ',', value_parser = parse_scale, default_values_t = [2.0, 3.0, 4.0])]
    scales: Vec<f64>,
    /// Per-image CSV.
    #[arg(long, default_value = "eval.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_scale)]
    scale: f64,
    #[arg(long)]
    output: PathBuf,
}

#[derive(Subcommand)]
enum PlotCommand {
    /// Bar chart per scale from an `analyze` CSV.
    Vfp { input: PathBuf, output: PathBuf },
    /// Loss curves from a training log.
    Losses { input: PathBuf, output: PathBuf },
}

fn parse_scale(s: &str) -> Result<f64, String> {
    let r: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    freqsr_core::check_scale(r).map_err(|e| e.to_string())?;
    Ok(r)
}

fn require(path: &Path) -> anyhow::Result<()> {
    if !path.exists() {
        return Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        }
        .into());
    }
    Ok(())
}

fn create_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(())
}

fn analyze(a: AnalyzeArgs) -> anyhow::Result<()> {
    require(&a.hr_dir)?;
    let thresholds = Thresholds::parse(&a.thresholds)?;
    let files = list_images(&a.hr_dir)?;
    if files.is_empty() {
        return Err(Error::Empty(format!("no images in {}", a.hr_dir.display())).into());
    }
    let mut pairs = Vec::new();
    for f in &files {
        let hr = crop_to_multiple(&load_luminance(f)?, 8)?;
        let (h, w) = (hr.shape()[0], hr.shape()[1]);
        match (&a.lr_dir, a.scale) {
            (Some(dir), Some(r)) => {
                let lr_path = dir.join(f.file_name().expect("listed file"));
                require(&lr_path)?;
                let lr = load_luminance(&lr_path)?;
                let lr = if lr.shape().len() == 2 && lr.shape()[0] >= h && lr.shape()[1] >= w {
                    data::crop(&lr, 0, 0, h, w)?
                } else {
                    resize_bicubic(&lr, h, w)?
                };
                pairs.push((hr, lr, r));
            }
            _ => {
                for &r in &a.scales {
                    pairs.push((hr.clone(), degrade(&hr, r)?, r));
                }
            }
        }
    }
    let hists = profile_corpus(&pairs, &thresholds)?;
    create_parent(&a.out)?;
    let json = export_histogram(&hists, &a.out)?;
    for h in &hists {
        println!(
            "x{:.2} T={} blocks={} vfp min={} max={} mean={:.2} share[2,4]={:.1}%",
            h.scale,
            h.threshold,
            h.total_blocks,
            h.min().unwrap_or(0),
            h.max().unwrap_or(0),
            h.mean(),
            100.0 * h.fraction_in(2, 4)
        );
    }
    log::info!("wrote {} and {}", a.out.display(), json.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> anyhow::Result<()> {
    require(&a.data_dir)?;
    let mut state = match &a.resume {
        Some(p) => {
            require(p)?;
            load_checkpoint(p)?
        }
        None => {
            let mut cfg = match &a.config {
                Some(p) => {
                    require(p)?;
                    Config::from_file(p)?
                }
                None => Config::default(),
            };
            if let Some(s) = a.seed {
                cfg.train.seed = s;
            }
            cfg.sfr.use_sfa &= !a.no_sfa;
            cfg.sfr.use_dense &= !a.no_dense;
            if a.fixed_action.is_some() {
                cfg.sfd.fixed_action = a.fixed_action;
            }
            if let Some(n) = a.steps {
                cfg.train.steps = n;
            }
            TrainState::new(cfg)?
        }
    };
    if let (Some(_), Some(n)) = (&a.resume, a.steps) {
        state.model.config.train.steps = n;
    }
    state.model.config.validate()?;
    let t = state.model.config.train.clone();
    let manifest = DatasetManifest::build(&a.data_dir, a.split, t.patch_size, t.patch_stride)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    manifest.save(&a.out.join("manifest.json"))?;
    std::fs::write(
        a.out.join("config.toml"),
        state.model.config.to_toml_string(),
    )
    .with_context(|| format!("writing {}", a.out.join("config.toml").display()))?;
    let dataset = Arc::new(Dataset::open(manifest)?);
    log::info!(
        "training {} steps from step {} on {} patches ({} parameters)",
        t.steps,
        state.step,
        dataset.len(),
        state.model.store.numel()
    );
    let opts = TrainOptions {
        log: Some(a.out.join("train_log.csv")),
        checkpoint: Some(a.out.join("model.ckpt")),
        log_every: a.log_every,
    };
    let reports = train_from(&mut state, dataset, &opts)?;
    if let Some(last) = reports.last() {
        println!(
            "step {} l_sfr {:.6} l_dct {:.3e} l_sfd {:.4} l_total {:.6}",
            last.step, last.l_sfr, last.l_dct, last.l_sfd, last.l_total
        );
    }
    println!("checkpoint {}", a.out.join("model.ckpt").display());
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> anyhow::Result<()> {
    require(&a.checkpoint)?;
    require(&a.data_dir)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let images = load_eval_set(&a.data_dir)?;
    let tag = a
        .data_dir
        .file_name()
        .map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let report = run_eval(
        &state.model,
        &images,
        &a.scales,
        &tag,
        &a.checkpoint.display().to_string(),
    )?;
    create_parent(&a.out)?;
    report.write_csv(&a.out)?;
    print!("{}", report.summary_table());
    Ok(())
}

fn infer(a: InferArgs) -> anyhow::Result<()> {
    require(&a.checkpoint)?;
    require(&a.input)?;
    let state = load_checkpoint(&a.checkpoint)?;
    let img = data::load_rgb(&a.input)?;
    let out = super_resolve_rgb(&state.model, &img, a.scale)?;
    create_parent(&a.output)?;
    out.save(&a.output).map_err(|e| Error::Image {
        path: a.output.clone(),
        source: e,
    })?;
    println!(
        "{}x{} -> {}x{}",
        img.width(),
        img.height(),
        out.width(),
        out.height()
    );
    Ok(())
}

fn plot(c: PlotCommand) -> anyhow::Result<()> {
    let (input, output) = match &c {
        PlotCommand::Vfp { input, output } | PlotCommand::Losses { input, output } => {
            (input, output)
        }
    };
    require(input)?;
    let img = match c {
        PlotCommand::Vfp { .. } => vfp_histogram_chart(&read_histogram_csv(input)?, 800, 200)?,
        PlotCommand::Losses { .. } => loss_chart(&read_training_log(input)?, 800, 400)?,
    };
    create_parent(output)?;
    save_png(&img, output)?;
    Ok(())
}

/// Exit status by error category.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Scale(_)) => 2,
        Some(Error::Config(_)) => 3,
        Some(Error::Io { .. }) | Some(Error::Image { .. }) => 4,
        Some(Error::NonFinite(_)) => 6,
        Some(_) => 5,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 4,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Plot { chart } => plot(chart),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
