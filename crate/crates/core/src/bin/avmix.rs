use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use avmix::aslmask::LocalizationMap;
use avmix::features::LogMelParams;
use avmix::harness::{
    evaluate, plot, read_metrics, run_ablation, spectrogram, train_run, waveform_window, Axis, EvalPolicy, RunConfig,
    TrainData, TrainState, METRICS_FILE,
};
use avmix::models::{load_params, Model, ModelConfig};
use avmix::synthdata::{generate_dataset, read_bundle, write_bundle, GenConfig};
use avmix::{Error, Result};

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($t)*);
    }};
}

#[derive(Parser)]
#[command(name = "avmix", version, about = "Semi-supervised audio-visual classification with localization-guided token mixup")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset bundle.
    GenData(GenArgs),
    /// Train a model and evaluate it on the test split.
    Train(TrainArgs),
    /// Evaluate a checkpoint with multi-view averaging.
    Eval(EvalArgs),
    /// Sweep one configuration axis over several seeds.
    Ablate(AblateArgs),
    /// Draw loss/accuracy curves and saliency overlays.
    Plot(PlotArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Output directory of the bundle.
    #[arg(long)]
    out: PathBuf,
    /// TOML file with generator settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    per_class_labeled: Option<usize>,
    #[arg(long)]
    per_class_unlabeled: Option<usize>,
    #[arg(long)]
    per_class_test: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    sample_rate: Option<u32>,
    #[arg(long)]
    eval_frames: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    #[arg(long)]
    sprite_size: Option<usize>,
    /// Largest sprite displacement per frame in pixels.
    #[arg(long)]
    max_step: Option<f64>,
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML with dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset bundle directory; overrides `dataset` in the config.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// `key=value` override, repeatable, e.g. `--set mask.type=tube`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Output directory for metrics, checkpoint and summary.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value_t = 5)]
    segments: usize,
    #[arg(long, default_value_t = 3)]
    crops: usize,
    #[arg(long, default_value_t = 28)]
    crop_size: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// mask-type, contrastive, tau, frames-per-map or method.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values; defaults to the axis grid.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
    /// Single seed; replaces `--seeds`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    /// Run directory containing the metrics log.
    #[arg(long)]
    run: Option<PathBuf>,
    /// Output directory for the images.
    #[arg(long)]
    out: PathBuf,
    /// Dataset for saliency overlays.
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Test samples to overlay.
    #[arg(long, value_delimiter = ',', default_value = "0")]
    samples: Vec<usize>,
    /// Run configuration selecting the localizer.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn gen_data(a: GenArgs) -> Result<()> {
    let mut c = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            toml::from_str::<GenConfig>(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => GenConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => { $( if let Some(v) = a.$f { c.$f = v; } )* };
    }
    set!(
        seed,
        num_classes,
        per_class_labeled,
        per_class_unlabeled,
        per_class_test,
        frames,
        height,
        width,
        channels,
        sample_rate,
        eval_frames,
        patch_size,
        sprite_size,
        max_step
    );
    let bundle = generate_dataset(&c)?;
    write_bundle(&bundle, &a.out)?;
    say!(
        "wrote {} labeled, {} unlabeled, {} test samples to {}",
        bundle.labeled.len(),
        bundle.unlabeled.len(),
        bundle.test.len(),
        a.out.display()
    );
    Ok(())
}

fn io_err(p: &Path, e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::NotFound {
        Error::MissingPath(p.to_path_buf())
    } else {
        Error::Io {
            path: p.to_path_buf(),
            source: e,
        }
    }
}

fn load_config(run: &RunArgs) -> Result<RunConfig> {
    let base = match &run.config {
        Some(p) => {
            if !p.exists() {
                return Err(Error::MissingPath(p.clone()));
            }
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&run.overrides)?;
    if let Some(d) = &run.dataset {
        cfg.dataset = Some(d.clone());
    }
    Ok(cfg)
}

fn dataset_of(cfg: &RunConfig) -> Result<PathBuf> {
    let p = cfg
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("no dataset given (use --dataset or `dataset` in the config)".into()))?;
    if !p.exists() {
        return Err(Error::MissingPath(p));
    }
    Ok(p)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&a.run)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let path = dataset_of(&cfg)?;
    cfg.validate()?;
    let bundle = read_bundle(&path)?;
    let outcome = train_run(&cfg, &bundle, Some(&a.out))?;
    let s = &outcome.summary;
    say!(
        "steps={} accuracy={:.4} views={} parameters={}",
        s.steps, s.eval.accuracy, s.eval.views, s.parameters
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    if !a.checkpoint.exists() {
        return Err(Error::MissingPath(a.checkpoint));
    }
    if !a.dataset.exists() {
        return Err(Error::MissingPath(a.dataset));
    }
    let (params, meta) = load_params(&a.checkpoint)?;
    let config: ModelConfig = serde_json::from_value(meta["model"].clone())?;
    let features: LogMelParams = serde_json::from_value(meta["features"].clone())?;
    let model = Model::with_params(config, &params)?;
    let bundle = read_bundle(&a.dataset)?;
    let policy = EvalPolicy {
        segments: a.segments,
        crops: a.crops,
        crop_size: a.crop_size,
        every_epochs: 0,
    };
    let report = evaluate(&model, &params, &bundle, &features, &policy)?;
    say!(
        "views={} samples={} accuracy={:.4}",
        report.views, report.samples, report.accuracy
    );
    for (c, acc) in report.per_class.iter().enumerate() {
        say!("class {c}: accuracy={acc:.4} confusion={:?}", report.confusion[c]);
    }
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| io_err(p, e))?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = load_config(&a.run)?;
    let axis: Axis = a.axis.parse()?;
    let path = dataset_of(&cfg)?;
    cfg.validate()?;
    let bundle = read_bundle(&path)?;
    let values = if a.values.is_empty() {
        axis.default_values()
    } else {
        a.values.clone()
    };
    let seeds = match a.seed {
        Some(s) => vec![s],
        None => a.seeds.clone(),
    };
    let table = run_ablation(axis, &values, &cfg, &seeds, &bundle, Some(&a.out))?;
    let _ = write!(std::io::stdout(), "{table}");
    Ok(())
}

fn plot_cmd(a: PlotArgs) -> Result<()> {
    if a.run.is_none() && a.dataset.is_none() {
        return Err(Error::Config("nothing to plot: pass --run and/or --dataset".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    if let Some(run) = &a.run {
        let metrics = read_metrics(&run.join(METRICS_FILE))?;
        plot::line_chart(&plot::loss_series(&metrics), &a.out.join("losses.png"))?;
        plot::line_chart(&plot::accuracy_series(&metrics), &a.out.join("accuracy.png"))?;
        say!("wrote losses.png and accuracy.png to {}", a.out.display());
    }
    if let Some(ds) = &a.dataset {
        let mut cfg = match &a.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        let bundle = read_bundle(ds)?;
        let data = TrainData::prepare(&bundle, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let state = TrainState::init(&cfg, &data, &mut rng)?;
        let mc = &data.model;
        let gen = &bundle.metadata.config;
        for &i in &a.samples {
            let sample = bundle
                .test
                .get(i)
                .ok_or_else(|| Error::InvalidArgument(format!("test sample {i} out of range")))?;
            let clip = sample.clip.window(0, mc.frames)?;
            let region = sample.source.window(0, mc.frames);
            let spec = spectrogram(&waveform_window(gen, sample, 0, mc.frames)?, &cfg.features, mc.steps)?;
            let feats = state.localizer.localize(&clip, &spec, Some(&region), mc.patch, &mut rng)?;
            let loc = LocalizationMap::compute(&feats, mc.grid(), cfg.mask.normalization, cfg.mask.eps)?;
            let p = a.out.join(format!("saliency-{i}.png"));
            plot::saliency_overlay(&clip, &loc.saliency, mc.grid(), Some(&region), 4, &p)?;
            say!("wrote {}", p.display());
        }
    }
    Ok(())
}
