use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use wildsplat::io::{load_ply, save_png};
use wildsplat::mask::{MaskProvider, MaskRequest, OracleMasks, ProviderKind, RemoteMasks, RemoteOptions, ViewKind, ZeroMasks};
use wildsplat::raster::{render, RenderSettings};
use wildsplat::synth::{build_scene, export_scene, to_sfm_model};
use wildsplat::trainer::{evaluate, latest_checkpoint, load_checkpoint, Dataset, EvalReport, MetricsLog, Trainer};
use wildsplat::GaussianField;

mod config;
mod dump;

use config::CliConfig;

#[derive(Parser)]
#[command(name = "wildsplat", version, about = "Sparse-view Gaussian splatting for scenes with transient distractors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scene directory.
    Synth(SynthArgs),
    /// Optimize a field on a scene.
    Train(TrainArgs),
    /// Score a field on a scene's held-out views.
    Eval(EvalArgs),
    /// Render every camera of a scene.
    Render(RenderArgs),
}

#[derive(Args)]
struct Common {
    /// JSON configuration; command-line flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scene directory written by `synth`; without one the configured
    /// synthetic scene is built in memory.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ProviderArgs {
    #[arg(long, value_parser = ["oracle", "zero", "remote"])]
    provider: Option<String>,
    /// Base URL of the model server used by the remote provider.
    #[arg(long)]
    bridge_url: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of training views.
    #[arg(long)]
    views: Option<usize>,
    #[arg(long)]
    test_views: Option<usize>,
    #[arg(long)]
    distractor_rate: Option<f64>,
    /// Image width and height in pixels.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    provider: ProviderArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iters: Option<u64>,
    /// Checkpoint directory to continue from, or `latest`.
    #[arg(long)]
    resume: Option<String>,
    /// Write sparsity maps at every replication round and a dump on divergence.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    provider: ProviderArgs,
    /// A `.ply` file, a checkpoint directory, or a training output directory.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Write a render, opacity heatmap and mask overlay per test view.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
}

impl Common {
    fn resolve(&self) -> Result<CliConfig> {
        let mut cfg = CliConfig::load(self.config.as_deref())?;
        if self.scene.is_some() {
            cfg.scene.clone_from(&self.scene);
        }
        if self.out.is_some() {
            cfg.out.clone_from(&self.out);
        }
        Ok(cfg)
    }
}

impl ProviderArgs {
    fn apply(&self, cfg: &mut CliConfig) -> Result<()> {
        if let Some(p) = &self.provider {
            cfg.train.provider = p.parse()?;
        }
        if self.bridge_url.is_some() {
            cfg.bridge_url.clone_from(&self.bridge_url);
        }
        Ok(())
    }
}

fn load_dataset(cfg: &CliConfig) -> Result<Dataset> {
    match &cfg.scene {
        Some(dir) => Dataset::load(dir).with_context(|| format!("cannot load scene {}", dir.display())),
        None => {
            let scene = build_scene(&cfg.synth)?;
            let sfm = to_sfm_model(&scene, cfg.sfm.fraction, cfg.sfm.noise, cfg.synth.seed)?;
            Ok(Dataset::from_scene(&scene, sfm)?)
        }
    }
}

fn make_provider(cfg: &CliConfig, dataset: &Dataset) -> Result<Box<dyn MaskProvider>> {
    Ok(match cfg.train.provider {
        ProviderKind::Zero => Box::new(ZeroMasks),
        ProviderKind::Oracle => match &dataset.oracle_masks {
            Some(masks) => Box::new(OracleMasks::new(masks.clone())),
            None => bail!("the scene has no masks/ directory; use --provider zero or remote"),
        },
        ProviderKind::Remote => {
            let url = cfg.bridge_url.as_deref().context("the remote mask provider needs --bridge-url")?;
            Box::new(RemoteMasks::new(url, RemoteOptions::default())?)
        }
    })
}

fn load_field(path: &Path) -> Result<GaussianField> {
    let ply = if path.is_file() {
        path.to_path_buf()
    } else if path.join("field.ply").is_file() {
        path.join("field.ply")
    } else if path.join("checkpoints").is_dir() {
        latest_checkpoint(&path.join("checkpoints"))?.join("field.ply")
    } else {
        bail!("no field found at {}", path.display());
    };
    load_ply(&ply).with_context(|| format!("cannot load field {}", ply.display()))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    let spec = &mut cfg.synth;
    if let Some(s) = args.seed {
        spec.seed = s;
    }
    if let Some(v) = args.views {
        spec.n_train = v;
    }
    if let Some(v) = args.test_views {
        spec.n_test = v;
    }
    if let Some(r) = args.distractor_rate {
        spec.distractor_rate = r;
    }
    if let Some(s) = args.size {
        spec.width = s;
        spec.height = s;
        spec.focal = s as f64;
    }
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let scene = build_scene(&cfg.synth)?;
    let sfm = to_sfm_model(&scene, cfg.sfm.fraction, cfg.sfm.noise, cfg.synth.seed)?;
    export_scene(&scene, out, &sfm).with_context(|| format!("cannot write scene to {}", out.display()))?;
    let with_distractors = (0..scene.train_cameras.len()).filter(|v| scene.distractor_count(*v) > 0).count();
    println!(
        "wrote {} training and {} test views to {} ({with_distractors} with distractors)",
        scene.train_cameras.len(),
        scene.test_cameras.len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.provider.apply(&mut cfg)?;
    if let Some(s) = args.seed {
        cfg.train.seed = s;
    }
    if let Some(n) = args.iters {
        cfg.train.total_iters = n;
    }
    cfg.dump |= args.dump;
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    let checkpoints = out.join("checkpoints");
    let resume = match args.resume.as_deref() {
        None => None,
        Some("latest") => Some(latest_checkpoint(&checkpoints).context("nothing to resume from")?),
        Some(dir) => Some(PathBuf::from(dir)),
    };
    let resumed = match &resume {
        Some(dir) => {
            let (state, mut saved) = load_checkpoint(dir).with_context(|| format!("cannot load checkpoint {}", dir.display()))?;
            saved.total_iters = cfg.train.total_iters;
            if saved != cfg.train {
                log::warn!("continuing with the configuration stored in {}", dir.display());
            }
            saved.validate()?;
            Some((state, saved))
        }
        None => None,
    };
    let dataset = load_dataset(&cfg)?;
    let provider = make_provider(&cfg, &dataset)?;

    std::fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let resume_at = resumed.as_ref().map(|(s, _)| s.iteration);
    let log = MetricsLog::open(&out.join("metrics.jsonl"), resume_at)?;
    let trainer = match resumed {
        Some((state, config)) => {
            log::info!("resuming at iteration {}", state.iteration);
            Trainer::with_state(config, &dataset, provider.as_ref(), state)?
        }
        None => Trainer::new(cfg.train.clone(), &dataset, provider.as_ref())?,
    };
    let dump_dir = out.join("dump");
    let mut trainer = trainer.with_log(log).with_checkpoints(checkpoints);
    if cfg.dump {
        trainer = trainer.with_dump_dir(dump_dir.clone());
    }
    while trainer.state.iteration < trainer.config.total_iters {
        let report = trainer.step()?;
        if report.replication.is_some() {
            if cfg.dump {
                std::fs::create_dir_all(&dump_dir)?;
                for (v, stats) in trainer.state.stats.views.iter().enumerate() {
                    if let Some(stats) = stats {
                        let name = format!("sparsity_iter{:06}_view{v:03}.png", report.iteration);
                        save_png(&dump_dir.join(name), &dump::heatmap(&stats.sparsity))?;
                    }
                }
            }
        }
    }
    let report = evaluate(&trainer.state.field, &dataset.test, trainer.config.background)?;
    println!(
        "trained {} iterations: {} Gaussians, test PSNR {:.3} dB, SSIM {:.4}",
        trainer.state.iteration,
        trainer.state.field.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    Ok(())
}

fn write_csv(report: &EvalReport, sink: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["view", "psnr", "ssim"])?;
    for v in &report.views {
        w.write_record([v.name.clone(), v.psnr.to_string(), v.ssim.to_string()])?;
    }
    w.write_record(["mean".to_string(), report.mean_psnr.to_string(), report.mean_ssim.to_string()])?;
    w.flush()?;
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    args.provider.apply(&mut cfg)?;
    cfg.dump |= args.dump;
    cfg.validate()?;
    let field = load_field(&args.checkpoint)?;
    let dataset = load_dataset(&cfg)?;
    let report = evaluate(&field, &dataset.test, cfg.train.background)?;
    write_csv(&report, std::io::stdout().lock())?;
    let Some(out) = &cfg.out else {
        if cfg.dump {
            bail!("--dump needs --out");
        }
        return Ok(());
    };
    std::fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    write_csv(&report, File::create(out.join("eval.csv"))?)?;
    if cfg.dump {
        let provider = make_provider(&cfg, &dataset)?;
        let dir = out.join("dump");
        std::fs::create_dir_all(&dir)?;
        let settings = RenderSettings { background: cfg.train.background };
        for (i, view) in dataset.test.iter().enumerate() {
            let stem = view.name.trim_end_matches(".png");
            let rendered = render(&field, &view.camera, &settings)?;
            let mask = provider.get_mask(&MaskRequest { image: &rendered.image, prompt: &cfg.train.prompt, view: ViewKind::Test(i) })?;
            save_png(&dir.join(format!("{stem}_render.png")), &rendered.image)?;
            save_png(&dir.join(format!("{stem}_opacity.png")), &dump::heatmap(&rendered.opacity))?;
            save_png(&dir.join(format!("{stem}_mask.png")), &dump::mask_overlay(&view.image, &mask))?;
        }
    }
    Ok(())
}

fn cmd_render(args: RenderArgs) -> Result<()> {
    let cfg = args.common.resolve()?;
    cfg.validate()?;
    let out = cfg.out_dir()?;
    let field = load_field(&args.checkpoint)?;
    let dataset = load_dataset(&cfg)?;
    let settings = RenderSettings { background: cfg.train.background };
    for (sub, views) in [("train", &dataset.train), ("test", &dataset.test)] {
        let dir = out.join(sub);
        std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
        for view in views {
            save_png(&dir.join(&view.name), &render(&field, &view.camera, &settings)?.image)?;
        }
    }
    println!("rendered {} views to {}", dataset.train.len() + dataset.test.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WILDSPLAT_LOG", "info")).init();
    let result = match Cli::parse().command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Render(a) => cmd_render(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
