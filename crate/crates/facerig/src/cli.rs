//! `facerig` command line. Every command returns an [`Output`] with a short
//! human summary and a JSON summary; failures become JSON error reports.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use facerig_core::adapter::{
    evaluate_mae, reference_grid, run_ablation_grid, train, Activation, AdapterConfig, Checkpoint,
    TrainConfig, REFERENCE_GRID_MAE,
};
use facerig_core::animation::{estimate_track, export_track, FrameTrack, DEFAULT_FPS};
use facerig_core::datagen::{generate_dataset, DatasetGenerator, GeneratedDataset, RuleSet, Split};
use facerig_core::fitter::{Convention, FitConfig, LandmarkBasis, LandmarkSequence};
use facerig_core::hitl::PreferenceLedger;
use facerig_core::io::{read_json, write_bytes_atomic, write_json_atomic};
use facerig_core::model::{
    generate_synthetic_model, IdentityParams, LandmarkSet2D, MorphableModel,
};
use facerig_core::rig::{
    generate_synthetic_rig, validate_rig, BlendWeights, CharacterRig, Severity,
    DEFAULT_MIX_SPARSITY,
};
use nalgebra::Vector2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::project::{self, AppError, AppResult, Store};
use crate::server;

#[derive(Debug, Parser)]
#[command(
    name = "facerig",
    version,
    about = "Retarget facial expressions onto blendshape rigs"
)]
pub struct Cli {
    /// Seed for every random choice a command makes.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Print the JSON summary instead of the text one.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic morphable face model.
    GenModel(GenModelArgs),
    /// Generate a synthetic character rig on a model's mesh.
    GenRig(GenRigArgs),
    /// Generate (expression, blendweight) training pairs for a rig.
    GenDataset(GenDatasetArgs),
    /// Train an adapter and write a checkpoint.
    Train(TrainArgs),
    /// Report a checkpoint's MAE on a dataset split.
    Eval(EvalArgs),
    /// Train the six reference architectures and rank them by test MAE.
    Ablate(AblateArgs),
    /// Turn a landmark sequence into a blendweight track.
    Animate(AnimateArgs),
    /// Write a synthetic landmark sequence driven by a rig.
    GenSequence(GenSequenceArgs),
    /// Write the animation export of a track file or a stored project.
    Export(ExportArgs),
    /// Run the HTTP service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[arg(long, default_value_t = 800)]
    pub vertices: usize,
    #[arg(long, default_value_t = 80)]
    pub id_dim: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenRigArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Number of blendshapes K.
    #[arg(long)]
    pub blendshapes: usize,
    /// Fraction of expression directions mixed into each blendshape.
    #[arg(long, default_value_t = DEFAULT_MIX_SPARSITY)]
    pub sparsity: f64,
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDatasetArgs {
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Rule file with mutually exclusive channel groups.
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Total sample count; must equal the split total when given.
    #[arg(long)]
    pub count: Option<usize>,
    /// train,val,test
    #[arg(long, default_value = "8000,1000,1000")]
    pub split: Split,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainOptions {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 64)]
    pub batch_size: usize,
}

impl TrainOptions {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, default_value_t = AdapterConfig::DEFAULT_HIDDEN)]
    pub hidden: usize,
    /// relu or leaky-relu
    #[arg(long, default_value = "leaky-relu")]
    pub activation: Activation,
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    pub clamp: bool,
    #[command(flatten)]
    pub train: TrainOptions,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitName,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[command(flatten)]
    pub train: TrainOptions,
    /// Also write the rows as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AnimateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub landmarks: PathBuf,
    /// Expand a single-image input into a neutral-peak-neutral ramp.
    #[arg(long)]
    pub ramp_frames: Option<usize>,
    /// Overrides the sequence's frame rate.
    #[arg(long)]
    pub fps: Option<f64>,
    /// Time fitting plus adapter per frame and print mean ± std.
    #[arg(long)]
    pub report_timing: bool,
    /// Track file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSequenceArgs {
    #[arg(long)]
    pub rig: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = 40)]
    pub frames: usize,
    #[arg(long, default_value_t = DEFAULT_FPS)]
    pub fps: f64,
    /// Gaussian landmark noise, pixels.
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the driving blendweights.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Track file written by `animate`.
    #[arg(long, requires = "rig", conflicts_with = "project")]
    pub track: Option<PathBuf>,
    #[arg(long)]
    pub rig: Option<PathBuf>,
    /// Stored project id.
    #[arg(long)]
    pub project: Option<String>,
    /// Project store; defaults to $FACERIG_STORE.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Project store; defaults to $FACERIG_STORE.
    #[arg(long)]
    pub store: Option<PathBuf>,
}

/// Track file written by `animate` and read by `export`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackFile {
    pub rig_name: String,
    pub fps: f64,
    pub track: FrameTrack,
    #[serde(default)]
    pub ledger: PreferenceLedger,
}

/// Blendweights that drove a generated sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub channels: Vec<String>,
    pub frames: Vec<Vec<f64>>,
}

pub struct Output {
    pub text: String,
    pub json: Value,
}

fn store_or_env(path: Option<PathBuf>) -> Store {
    path.map_or_else(Store::from_env, Store::new)
}

pub fn run(cli: Cli) -> AppResult<Output> {
    let seed = cli.seed;
    match cli.command {
        Command::GenModel(a) => gen_model(a, seed),
        Command::GenRig(a) => gen_rig(a, seed),
        Command::GenDataset(a) => gen_dataset(a, seed),
        Command::Train(a) => train_cmd(a, seed),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a, seed),
        Command::Animate(a) => animate(a),
        Command::GenSequence(a) => gen_sequence(a, seed),
        Command::Export(a) => export(a),
        Command::Serve(a) => serve(a),
    }
}

fn gen_model(a: GenModelArgs, seed: u64) -> AppResult<Output> {
    let model = generate_synthetic_model(seed, a.vertices, a.id_dim)?;
    model.save(&a.out)?;
    Ok(Output {
        text: format!(
            "wrote {} (V={}, D_id={}, seed {seed})",
            a.out.display(),
            a.vertices,
            a.id_dim
        ),
        json: json!({ "out": a.out, "vertices": a.vertices, "id_dim": a.id_dim, "seed": seed }),
    })
}

fn gen_rig(a: GenRigArgs, seed: u64) -> AppResult<Output> {
    let model = MorphableModel::load(&a.model)?;
    let mut rig = generate_synthetic_rig(&model, a.blendshapes, seed, a.sparsity)?;
    if let Some(name) = a.name {
        rig.name = name;
    }
    let diags = validate_rig(&rig);
    rig.save(&a.out)?;
    let warnings = diags
        .iter()
        .filter(|d| d.severity == Severity::Warning)
        .count();
    Ok(Output {
        text: format!(
            "wrote {} ({:?}, K={}, {warnings} warnings)",
            a.out.display(),
            rig.name,
            rig.k()
        ),
        json: json!({ "out": a.out, "name": rig.name, "k": rig.k(), "diagnostics": diags }),
    })
}

fn gen_dataset(a: GenDatasetArgs, seed: u64) -> AppResult<Output> {
    if let Some(count) = a.count {
        if count != a.split.total() {
            return Err(AppError::bad(
                "count",
                format!(
                    "--count {count} disagrees with --split {},{},{} (total {})",
                    a.split.train,
                    a.split.val,
                    a.split.test,
                    a.split.total()
                ),
            ));
        }
    }
    let rig = CharacterRig::load(&a.rig)?;
    let model = MorphableModel::load(&a.model)?;
    let rules = a
        .rules
        .as_ref()
        .map(RuleSet::load)
        .transpose()?
        .unwrap_or_default();
    let started = Instant::now();
    let data = generate_dataset(&rig, &model, &rules, a.split, &FitConfig::default(), seed)?;
    let seconds = started.elapsed().as_secs_f64();
    data.save(&a.out)?;
    Ok(Output {
        text: format!(
            "wrote {} (train {}, val {}, test {}, resampled {}, {seconds:.1} s)",
            a.out.display(),
            data.train.len(),
            data.val.len(),
            data.test.len(),
            data.resampled
        ),
        json: json!({
            "out": a.out,
            "train": data.train.len(),
            "val": data.val.len(),
            "test": data.test.len(),
            "resampled": data.resampled,
            "seconds": seconds,
        }),
    })
}

fn dataset_k(data: &GeneratedDataset) -> AppResult<usize> {
    data.k()
        .ok_or_else(|| AppError::bad("dataset", "dataset has no samples"))
}

fn train_cmd(a: TrainArgs, seed: u64) -> AppResult<Output> {
    let data = GeneratedDataset::load(&a.dataset)?;
    let config = AdapterConfig::new(dataset_k(&data)?, a.hidden, a.activation, a.clamp);
    let (net, report) = train(config, &a.train.config(seed), &data)?;
    Checkpoint::new(&net, Some(seed), Some(report.clone())).save(&a.out)?;
    Ok(Output {
        text: format!(
            "wrote {} ({}, test MAE {:.4}, best epoch {}, {:.1} s)",
            a.out.display(),
            config.label(),
            report.test_mae,
            report.best_epoch,
            report.wall_clock_seconds
        ),
        json: json!({
            "out": a.out,
            "config": config,
            "label": config.label(),
            "test_mae": report.test_mae,
            "best_epoch": report.best_epoch,
            "seconds": report.wall_clock_seconds,
        }),
    })
}

fn eval(a: EvalArgs) -> AppResult<Output> {
    let net = Checkpoint::load(&a.checkpoint)?.to_net()?;
    let data = GeneratedDataset::load(&a.dataset)?;
    let pairs = match a.split {
        SplitName::Train => &data.train,
        SplitName::Val => &data.val,
        SplitName::Test => &data.test,
    };
    let mae = evaluate_mae(&net, pairs)?;
    Ok(Output {
        text: format!(
            "MAE {mae:.6} over {} {} samples",
            pairs.len(),
            format!("{:?}", a.split).to_lowercase()
        ),
        json: json!({ "mae": mae, "samples": pairs.len() }),
    })
}

fn ablate(a: AblateArgs, seed: u64) -> AppResult<Output> {
    let data = GeneratedDataset::load(&a.dataset)?;
    let grid = reference_grid(dataset_k(&data)?);
    let rows = run_ablation_grid(&data, &grid, &a.train.config(seed))?;
    let reference = |label: &str| {
        grid.iter()
            .position(|c| c.label() == label)
            .map(|i| REFERENCE_GRID_MAE[i])
    };
    let mut text = format!(
        "{:<4} {:<20} {:>10} {:>10}\n",
        "rank", "config", "MAE", "reference"
    );
    let mut json_rows = Vec::new();
    for (i, row) in rows.iter().enumerate() {
        let r = reference(&row.label);
        text += &format!(
            "{:<4} {:<20} {:>10.4} {:>10}\n",
            i + 1,
            row.label,
            row.test_mae,
            r.map_or("-".into(), |v| format!("{v:.2}"))
        );
        json_rows.push(json!({
            "rank": i + 1,
            "label": row.label,
            "config": row.config,
            "test_mae": row.test_mae,
            "reference_mae": r,
            "best_epoch": row.best_epoch,
            "seconds": row.wall_clock_seconds,
        }));
    }
    let json = json!({ "rows": json_rows });
    if let Some(out) = &a.out {
        write_json_atomic(out, &json)?;
    }
    Ok(Output {
        text: text.trim_end().to_string(),
        json,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Sequential fit + adapter time per frame, in seconds.
fn time_frames(
    model: &MorphableModel,
    net: &facerig_core::adapter::AdapterNet,
    frames: &[LandmarkSet2D],
) -> AppResult<Vec<f64>> {
    let basis = LandmarkBasis::new(model, &IdentityParams::zeros(model.id_dim()))?;
    let config = FitConfig::default();
    frames
        .iter()
        .map(|f| {
            let started = Instant::now();
            let fit = basis.fit(f, &config)?;
            std::hint::black_box(net.forward(&fit.gamma));
            Ok(started.elapsed().as_secs_f64())
        })
        .collect()
}

fn animate(a: AnimateArgs) -> AppResult<Output> {
    let model = MorphableModel::load(&a.model)?;
    let rig = CharacterRig::load(&a.rig)?;
    let net = Checkpoint::load(&a.checkpoint)?.to_net()?;
    if net.config.out_dim != rig.k() {
        return Err(AppError::bad(
            "checkpoint",
            format!(
                "checkpoint outputs K={} channels but rig {:?} has K={}",
                net.config.out_dim,
                rig.name,
                rig.k()
            ),
        ));
    }
    let seq = LandmarkSequence::load(&a.landmarks)?;
    let fps = a.fps.or(seq.fps).unwrap_or(DEFAULT_FPS);
    let frames = seq.model_frames();
    let timing = if a.report_timing {
        Some(mean_std(&time_frames(&model, &net, &frames)?))
    } else {
        None
    };
    let mut track = estimate_track(
        &frames,
        &model,
        &IdentityParams::zeros(model.id_dim()),
        &net,
        &FitConfig::default(),
    )?;
    if let Some(n) = a.ramp_frames {
        if track.len() != 1 {
            return Err(AppError::bad(
                "ramp_frames",
                format!(
                    "ramp expansion needs a single-image input, got {} frames",
                    track.len()
                ),
            ));
        }
        track = track.expand_ramp(n)?;
    }
    let file = TrackFile {
        rig_name: rig.name.clone(),
        fps,
        track,
        ledger: PreferenceLedger::default(),
    };
    write_json_atomic(&a.out, &file)?;
    let mut text = format!(
        "wrote {} ({} frames, {} keyframes)",
        a.out.display(),
        file.track.len(),
        file.track.keyframes().len()
    );
    let mut json = json!({
        "out": a.out,
        "frames": file.track.len(),
        "keyframes": file.track.keyframes(),
    });
    if let Some((mean, std)) = timing {
        text += &format!(
            "\nper-frame time (fit + adapter): {mean:.6} ± {std:.6} s over {} frames",
            frames.len()
        );
        json["timing"] =
            json!({ "mean_seconds": mean, "std_seconds": std, "frames": frames.len() });
    }
    Ok(Output { text, json })
}

/// Smooth per-channel curves: a sparse set of channels rises and falls with
/// random amplitude, frequency and phase.
fn driving_curves(k: usize, frames: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = DatasetGenerator::sample_rng(seed, 0);
    let channels: Vec<Option<(f64, f64, f64)>> = (0..k)
        .map(|_| {
            let active = rng.random_bool(0.3);
            let amp = rng.random_range(0.2..0.9);
            let cycles = rng.random_range(0.5..2.0);
            let phase = rng.random_range(0.0..std::f64::consts::TAU);
            active.then_some((amp, cycles, phase))
        })
        .collect();
    (0..frames)
        .map(|t| {
            let u = t as f64 / frames.max(2).saturating_sub(1) as f64;
            channels
                .iter()
                .map(|c| {
                    c.map_or(0.0, |(amp, cycles, phase)| {
                        amp * 0.5 * (1.0 - (std::f64::consts::TAU * cycles * u + phase).cos())
                    })
                })
                .collect()
        })
        .collect()
}

fn gen_sequence(a: GenSequenceArgs, seed: u64) -> AppResult<Output> {
    if a.frames == 0 {
        return Err(AppError::bad(
            "frames",
            "a sequence needs at least one frame",
        ));
    }
    if !(a.noise >= 0.0 && a.noise.is_finite()) {
        return Err(AppError::bad(
            "noise",
            format!("noise {} must be nonnegative", a.noise),
        ));
    }
    let rig = CharacterRig::load(&a.rig)?;
    let model = MorphableModel::load(&a.model)?;
    let generator = DatasetGenerator::new(&rig, &model, FitConfig::default())?;
    let curves = driving_curves(rig.k(), a.frames, seed);
    let mut rng = DatasetGenerator::sample_rng(seed, 1);
    let noise = Normal::new(0.0, a.noise).map_err(|e| AppError::bad("noise", e.to_string()))?;
    let frames = curves
        .iter()
        .map(|alpha| {
            let observed = generator.observe(&BlendWeights::new(alpha.clone())?)?;
            // pixel coordinates of a 640x480 image
            Ok(observed.map(|p| {
                Vector2::new(
                    320.0 + p.x + noise.sample(&mut rng),
                    240.0 - p.y + noise.sample(&mut rng),
                )
            }))
        })
        .collect::<facerig_core::Result<Vec<_>>>()?;
    let seq = LandmarkSequence {
        convention: Convention::ImageYDown,
        fps: Some(a.fps),
        frames,
    };
    seq.validate()?;
    seq.save(&a.out)?;
    if let Some(truth) = &a.truth {
        write_json_atomic(
            truth,
            &TruthFile {
                channels: rig.channel_names(),
                frames: curves,
            },
        )?;
    }
    Ok(Output {
        text: format!("wrote {} ({} frames)", a.out.display(), a.frames),
        json: json!({ "out": a.out, "frames": a.frames, "truth": a.truth }),
    })
}

fn export(a: ExportArgs) -> AppResult<Output> {
    let export = match (&a.track, &a.project) {
        (Some(track), None) => {
            let file: TrackFile = read_json(track)?;
            let rig_path = a.rig.as_deref().expect("clap requires --rig with --track");
            let rig = CharacterRig::load(rig_path)?;
            export_track(&file.track, &rig, file.fps, &file.ledger)?
        }
        (None, Some(id)) => {
            let store = store_or_env(a.store.clone());
            let state = store.load_state(id)?;
            let assets = store.load_assets(id)?;
            project::export(&assets, &state)?
        }
        _ => {
            return Err(AppError::bad(
                "track",
                "give either --track with --rig, or --project",
            ))
        }
    };
    let bytes = export.to_bytes()?;
    write_out(&a.out, &bytes)?;
    let digest = server::sha256_hex(&bytes);
    Ok(Output {
        text: format!(
            "wrote {} ({} frames, sha256 {digest})",
            a.out.display(),
            export.frames.len()
        ),
        json: json!({ "out": a.out, "frames": export.frames.len(), "sha256": digest }),
    })
}

fn write_out(path: &Path, bytes: &[u8]) -> AppResult<()> {
    write_bytes_atomic(path, bytes).map_err(|e| {
        AppError::Core(facerig_core::Error::File {
            path: path.to_path_buf(),
            source: Box::new(e.into()),
        })
    })
}

fn serve(a: ServeArgs) -> AppResult<Output> {
    let store = store_or_env(a.store);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| AppError::Internal(e.to_string()))?;
    runtime
        .block_on(server::serve(a.bind, store))
        .map_err(|e| AppError::Internal(format!("server on {}: {e}", a.bind)))?;
    Ok(Output {
        text: "server stopped".into(),
        json: json!({ "stopped": true }),
    })
}

/// Machine-readable report for a command that failed.
pub fn error_report(err: &AppError) -> String {
    err.report().to_string()
}

/// Parses `args`, runs the command and returns the process exit code. Text
/// goes to `out`, error reports to `err`.
pub fn main_with<I, T>(args: I, out: &mut dyn std::io::Write, err: &mut dyn std::io::Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(out, "{e}");
                return 0;
            }
            let report = json!({ "error": { "kind": "usage", "message": e.to_string().trim() } });
            let _ = writeln!(err, "{report}");
            return 2;
        }
    };
    let as_json = cli.json;
    match run(cli) {
        Ok(o) => {
            let _ = if as_json {
                writeln!(out, "{}", o.json)
            } else {
                writeln!(out, "{}", o.text)
            };
            0
        }
        Err(e) => {
            let _ = writeln!(err, "{}", error_report(&e));
            1
        }
    }
}
