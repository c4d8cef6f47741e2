use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use tcr_core::annotations::Rect;
use tcr_core::eval::{evaluate, tune_thresholds, write_sweep_csv, SweepMode, GRID_STEP, SWEEP_FACTORS};
use tcr_core::experiment::{self, ExperimentConfig};
use tcr_core::pipeline::{run_pipeline, Analyzer, PipelineConfig};
use tcr_core::postprocess::Thresholds;
use tcr_core::slide::synth::SynthParams;
use tcr_core::slide::SlidePyramid;
use tcr_core::trainer::{save_checkpoint, write_curve_csv, CheckpointMeta, Split, TrainConfig};
use tcr_core::unet::ModelKind;

#[derive(Parser)]
#[command(name = "tcr", version, about = "Tumor cell ratio analysis of H&E slide pyramids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze a region of one slide.
    Analyze(AnalyzeArgs),
    /// Train a DT+CL or SEG model on a synthetic corpus.
    Train(TrainArgs),
    /// Tune t_d and t_c on the training and validation slides.
    Tune(TuneArgs),
    /// Evaluate a pipeline config on the test slides.
    Eval(EvalArgs),
    /// Train and evaluate DT+CL at several magnifications.
    Sweep(SweepArgs),
    /// Write synthetic annotated slides.
    Synth(SynthArgs),
    /// Run the HTTP analysis service.
    Serve(ServeArgs),
}

fn parse_rect(s: &str) -> Result<Rect, String> {
    Rect::parse(s).ok_or_else(|| format!("expected X,Y,W,H, got {s:?}"))
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    slide: PathBuf,
    /// Level-0 region X,Y,W,H; the whole slide when omitted.
    #[arg(long, value_parser = parse_rect)]
    region: Option<Rect>,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    heatmap_um: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Detcls,
    Seg,
}

impl From<Kind> for ModelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Detcls => ModelKind::DetCls,
            Kind::Seg => ModelKind::Seg,
        }
    }
}

#[derive(Args, Clone)]
struct CorpusArgs {
    /// Directory of annotated slide pyramids.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args, Clone)]
struct TrainingArgs {
    /// Resize factor relative to 40X (default 0.5 for DT+CL, 0.25 for SEG).
    #[arg(long)]
    factor: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    examples: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    val_patches: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    no_augment: bool,
}

impl TrainingArgs {
    fn config(&self, kind: ModelKind) -> TrainConfig {
        let mut c = TrainConfig::desk(kind);
        c.seed = self.seed;
        c.augment = !self.no_augment;
        if let Some(v) = self.factor {
            c.factor = v;
        }
        if let Some(v) = self.epochs {
            c.max_epochs = v;
        }
        if let Some(v) = self.examples {
            c.examples_per_epoch = v;
        }
        if let Some(v) = self.patch {
            c.patch_size = v;
        }
        if let Some(v) = self.batch {
            c.batch_size = v;
        }
        if let Some(v) = self.val_patches {
            c.val_patches = v;
        }
        if let Some(v) = self.lr {
            c.lr = v;
        }
        c
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long, value_enum)]
    kind: Kind,
    #[command(flatten)]
    training: TrainingArgs,
    /// Weight file; the config sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Training curve CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
}

#[derive(Args)]
struct TuneArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value_t = GRID_STEP)]
    step: f64,
    /// Config written with the tuned thresholds.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[command(flatten)]
    training: TrainingArgs,
    /// Columns to fill; all when omitted.
    #[arg(long, value_enum)]
    mode: Vec<Mode>,
    #[arg(long, value_delimiter = ',')]
    factors: Option<Vec<f64>>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    workers: usize,
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Mode {
    Det,
    Cls,
    Detcls,
}

impl From<Mode> for SweepMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Det => SweepMode::Det,
            Mode::Cls => SweepMode::Cls,
            Mode::Detcls => SweepMode::DetCls,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 1980)]
    width: u64,
    #[arg(long, default_value_t = 1980)]
    height: u64,
    #[arg(long, default_value_t = 512)]
    tile_size: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    #[arg(long)]
    slides: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Jobs running at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Tile workers per job.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long, default_value = "tcr-state")]
    state: PathBuf,
    #[arg(long)]
    static_dir: Option<PathBuf>,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Analyze(a) => analyze(a),
        Command::Train(a) => train(a),
        Command::Tune(a) => tune(a),
        Command::Eval(a) => eval(a),
        Command::Sweep(a) => sweep(a),
        Command::Synth(a) => synth(a),
        Command::Serve(a) => serve(a),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn load_analyzer(path: &Path) -> Result<(PipelineConfig, Analyzer)> {
    let cfg = PipelineConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    let an = Analyzer::from_config(&cfg)?;
    Ok((cfg, an))
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let slide = SlidePyramid::open(&a.slide)?;
    let (_, mut an) = load_analyzer(&a.config)?;
    if let Some(um) = a.heatmap_um {
        if !(um > 0.0) {
            bail!("--heatmap-um must be positive");
        }
        an.heatmap_um = um;
    }
    let region = a.region.unwrap_or_else(|| slide.bounds());
    let out = run_pipeline(&slide, &region, &an, a.workers, None)?;
    tracing::info!(
        tcr = out.overall_tcr,
        cells = out.n_cells,
        tiles = out.tiles,
        mm2_per_s = out.throughput_mm2_s,
        "analysis done"
    );
    if out.partial {
        tracing::warn!(failed = out.failures.len(), "some tiles failed; output is partial");
    }
    write_json(&a.out, &out)
}

fn train(a: TrainArgs) -> Result<()> {
    let corpus = experiment::open_corpus(&a.corpus.corpus)?;
    let split = experiment::split_corpus(&corpus, a.corpus.split_seed)?;
    let cfg = a.training.config(a.kind.into());
    let trained = experiment::train_model(&corpus, &split, &cfg, a.training.seed)?;
    let best = trained.best_val_loss;
    let meta = CheckpointMeta { config: cfg, best_epoch: trained.best_epoch, best_val_loss: best };
    save_checkpoint(&trained.model, &meta, &a.out)?;
    if let Some(path) = &a.curve {
        let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_curve_csv(f, &trained.curve)?;
    }
    tracing::info!(best_epoch = trained.best_epoch, best_val_loss = best, seconds = trained.seconds, "training done");
    Ok(())
}

fn tune(a: TuneArgs) -> Result<()> {
    let corpus = experiment::open_corpus(&a.corpus.corpus)?;
    let split = experiment::split_corpus(&corpus, a.corpus.split_seed)?;
    let (mut cfg, an) = load_analyzer(&a.config)?;
    let mut slides = split.slides_in(Split::Train);
    slides.extend(split.slides_in(Split::Validation));
    let rois = experiment::eval_rois(&corpus, &slides, &an, a.step, a.workers)?;
    let r = tune_thresholds(&rois, a.step, cfg.thresholds.alpha)?;
    tracing::info!(t_d = r.thresholds.t_d, t_c = r.thresholds.t_c, f1 = r.detection_f1, tcr_error = r.tcr_error, "tuned");
    cfg.thresholds = r.thresholds;
    cfg.save(&a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let corpus = experiment::open_corpus(&a.corpus.corpus)?;
    let split = experiment::split_corpus(&corpus, a.corpus.split_seed)?;
    let (cfg, an) = load_analyzer(&a.config)?;
    let rois = experiment::eval_rois(&corpus, &split.slides_in(Split::Test), &an, cfg.thresholds.t_d, a.workers)?;
    let report = evaluate(&rois, &cfg.thresholds)?;
    println!(
        "detection F1 {:.4}  classification accuracy {:.4}  TCR MAE {:.4}",
        report.detection.f1, report.classification.accuracy, report.tcr_error
    );
    if let Some(out) = &a.out {
        write_json(out, &report)?;
    }
    Ok(())
}

fn sweep(a: SweepArgs) -> Result<()> {
    let corpus = experiment::open_corpus(&a.corpus.corpus)?;
    let cfg = ExperimentConfig {
        detcls: a.training.config(ModelKind::DetCls),
        seg: None,
        grid_step: GRID_STEP,
        alpha: Thresholds::default().alpha,
        split_seed: a.corpus.split_seed,
        model_seed: a.training.seed,
        workers: a.workers,
    };
    let factors = a.factors.clone().unwrap_or_else(|| SWEEP_FACTORS.to_vec());
    let mut points = experiment::magnification_sweep(&corpus, &cfg, &factors)?;
    let modes: Vec<SweepMode> = a.mode.iter().map(|&m| m.into()).collect();
    if !modes.is_empty() {
        for p in &mut points {
            if !modes.contains(&SweepMode::Det) {
                p.det = None;
            }
            if !modes.contains(&SweepMode::Cls) {
                p.cls = None;
            }
            if !modes.contains(&SweepMode::DetCls) {
                p.det_cls = None;
            }
        }
    }
    let f = std::fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_sweep_csv(f, &points)?;
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let base = SynthParams { width: a.width, height: a.height, tile_size: a.tile_size, ..Default::default() };
    let slides = experiment::generate_corpus(&a.out, a.count, &base, a.seed)?;
    for s in &slides {
        let tumor = s.annotations.points.iter().filter(|p| p.class == tcr_core::annotations::CellClass::Tumor).count();
        println!("{}\t{} cells\t{} tumor", s.id, s.annotations.points.len(), tumor);
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let cfg = tcr_server::ServerConfig {
        slide_root: a.slides,
        state_dir: a.state,
        model_config: a.config,
        concurrent_jobs: a.jobs,
        pipeline_workers: a.workers,
        static_dir: a.static_dir,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(tcr_server::serve(cfg, a.listen))?;
    Ok(())
}
