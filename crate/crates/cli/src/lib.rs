//! The `portrait` command line.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use portrait_core::checkpoint::{load_checkpoint, save_checkpoint};
use portrait_core::config::RunConfig;
use portrait_core::curation::{curate_manifest, CurationConfig};
use portrait_core::dataset::{list_scenes, load_scene, manifest_record, save_scene, scene_sample};
use portrait_core::flow::{train_loop, FlowConfig, TrainSample, TrainState};
use portrait_core::generator::Denoiser;
use portrait_core::reenact::{
    run_reenactment, BenchItem, ConstantOracle, DiffusionModel, Mode, PortraitModel, PuppetOracle,
    ReenactInput, VerbatimOracle,
};
use portrait_core::scene::{generate_synthetic_scene, SceneSpec};
use portrait_core::seed::{derive, Stream};
use portrait_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "portrait",
    version,
    about = "Expression-driven multi-character portrait animation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic scenes, their tracks, and a curation manifest.
    Synth(SynthArgs),
    /// Train a denoiser on a directory of scenes.
    Train(TrainArgs),
    /// Animate a source frame with a driving scene's tracks.
    Sample(SampleArgs),
    /// Score a model with the self- or cross-reenactment protocol.
    Eval(EvalArgs),
    /// Filter a clip manifest.
    Curate(CurateArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 1)]
    characters: usize,
    #[arg(long, default_value_t = 16)]
    frames: usize,
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Overrides `train.out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Continue from a checkpoint up to `train.steps` total steps.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene path without extension, e.g. `data/scene_000`.
    #[arg(long)]
    driving: PathBuf,
    /// Scene whose first frame is the source image; defaults to the driving scene.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, default_value_t = FlowConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = FlowConfig::default().cfg_scale)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mode: Mode,
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    ckpt: Option<PathBuf>,
    /// Score a reference model instead: `verbatim`, `puppet` or `gray`.
    #[arg(long)]
    oracle: Option<String>,
    #[arg(long)]
    bench_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long, default_value_t = FlowConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = FlowConfig::default().cfg_scale)]
    cfg: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct CurateArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = CurationConfig::default().blur_threshold)]
    blur_th: f64,
    #[arg(long, default_value_t = CurationConfig::default().motion_threshold)]
    motion_th: f64,
    #[arg(long, default_value_t = CurationConfig::default().angle_threshold)]
    angle_th: f64,
    #[arg(long, default_value_t = CurationConfig::default().min_persons)]
    min_persons: usize,
}

/// Parses `argv` (including the program name), runs the command, and returns
/// the process exit code: 0 on success, 2 on usage errors, 1 on failures.
pub fn run_cli<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Curate(a) => curate(a),
    }
}

fn scene_id(i: usize) -> String {
    format!("scene_{i:03}")
}

fn synth(a: SynthArgs) -> Result<()> {
    let mut manifest = String::new();
    for i in 0..a.count {
        let scene = generate_synthetic_scene(&SceneSpec {
            seed: derive(a.seed, Stream::Scene, i as u64),
            characters: a.characters,
            frames: a.frames,
            height: a.height,
            width: a.width,
            amplitude: a.amplitude,
            ..SceneSpec::default()
        })?;
        let id = scene_id(i);
        save_scene(&a.out, &id, &scene)?;
        manifest.push_str(&serde_json_line(&manifest_record(&id, &scene)?)?);
    }
    let path = a.out.join("manifest.jsonl");
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    fs::write(&path, manifest).map_err(|e| io_err(&path, e))?;
    println!("wrote {} scenes to {}", a.count, a.out.display());
    Ok(())
}

fn serde_json_line<T: serde::Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string(v)?;
    s.push('\n');
    Ok(s)
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn load_all(dir: &Path) -> Result<Vec<(String, portrait_core::scene::SyntheticScene)>> {
    let ids = list_scenes(dir)?;
    if ids.is_empty() {
        return Err(Error::IncompleteInput(vec![format!(
            "scenes in {}",
            dir.display()
        )]));
    }
    ids.into_iter()
        .map(|id| load_scene(dir, &id).map(|s| (id, s)))
        .collect()
}

/// Splits `dir/scene_000` into its directory and scene id.
fn split_scene_path(p: &Path) -> Result<(PathBuf, String)> {
    let id = p
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::Config(format!("not a scene path: {}", p.display())))?;
    let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, id.to_string()))
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(d) = a.data {
        cfg.data_dir = d.display().to_string();
    }
    if let Some(o) = a.out {
        cfg.out = o.display().to_string();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let mut state = match &a.resume {
        Some(p) => {
            let (state, stored) = load_checkpoint(p)?;
            if stored.model != cfg.model || stored.seed != cfg.seed {
                return Err(Error::Config(
                    "checkpoint model or seed differs from the config".into(),
                ));
            }
            state
        }
        None => TrainState::new(Denoiser::new(cfg.model, cfg.seed)?, cfg.seed),
    };
    let scenes = load_all(Path::new(&cfg.data_dir))?;
    let samples: Vec<TrainSample> = scenes
        .iter()
        .map(|(_, s)| scene_sample(&state.model, s))
        .collect::<Result<_>>()?;
    let remaining = cfg.train_steps.saturating_sub(state.step);
    let log_every = cfg.log_every;
    train_loop(
        &mut state,
        &samples,
        &cfg.flow,
        remaining,
        cfg.batch,
        |step, loss| {
            if log_every > 0 && step % log_every == 0 {
                eprintln!("step {step} loss {loss:.6}");
            }
        },
    )?;
    let out = PathBuf::from(&cfg.out);
    save_checkpoint(&state, &cfg, &out)?;
    println!("saved step {} to {}", state.step, out.display());
    Ok(())
}

fn diffusion(ckpt: &Path, steps: usize, cfg_scale: f64, seed: u64) -> Result<DiffusionModel> {
    let (state, cfg) = load_checkpoint(ckpt)?;
    let flow = FlowConfig {
        steps,
        cfg_scale,
        ..cfg.flow
    };
    flow.validate()?;
    Ok(DiffusionModel {
        denoiser: state.model,
        flow,
        seed,
    })
}

fn sample(a: SampleArgs) -> Result<()> {
    let model = diffusion(&a.ckpt, a.steps, a.cfg, a.seed)?;
    let (dir, id) = split_scene_path(&a.driving)?;
    let driving = load_scene(&dir, &id)?;
    let source_scene = match &a.source {
        Some(p) => {
            let (dir, id) = split_scene_path(p)?;
            load_scene(&dir, &id)?
        }
        None => driving.clone(),
    };
    let source = source_scene.clip.frame(0)?;
    let clip = model.generate(&ReenactInput {
        source: &source,
        source_scene: &source_scene,
        driving: &driving,
        counter: 0,
    })?;
    clip.write(&a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model: Box<dyn PortraitModel> = match (&a.oracle, &a.ckpt) {
        (Some(name), _) => match name.as_str() {
            "verbatim" => Box::new(VerbatimOracle),
            "puppet" => Box::new(PuppetOracle),
            "gray" => Box::new(ConstantOracle(0.5)),
            other => return Err(Error::Config(format!("unknown oracle `{other}`"))),
        },
        (None, Some(ckpt)) => Box::new(diffusion(ckpt, a.steps, a.cfg, a.seed)?),
        (None, None) => unreachable!("clap requires --ckpt or --oracle"),
    };
    let scenes = load_all(&a.bench_dir)?;
    let n = scenes.len();
    let items: Vec<BenchItem> = scenes
        .iter()
        .enumerate()
        .map(|(i, (id, s))| BenchItem {
            clip_id: id.clone(),
            driving: s.clone(),
            source: (a.mode == Mode::Cross).then(|| scenes[(i + 1) % n].1.clone()),
        })
        .collect();
    let report = run_reenactment(a.mode, &items, model.as_ref())?;
    report.write(&a.report)?;
    let summary: Vec<String> = report
        .aggregate
        .iter()
        .map(|(k, v)| format!("{k}={v:.4}"))
        .collect();
    println!("{} clips, {}", report.clips.len(), summary.join(" "));
    Ok(())
}

fn curate(a: CurateArgs) -> Result<()> {
    let cfg = CurationConfig {
        min_persons: a.min_persons,
        blur_threshold: a.blur_th,
        motion_threshold: a.motion_th,
        angle_threshold: a.angle_th,
        ..CurationConfig::default()
    };
    let s = curate_manifest(&a.input, &a.out, &cfg)?;
    for e in &s.errors {
        eprintln!("{e}");
    }
    println!(
        "read {} accepted {} rejected {:?}",
        s.read, s.accepted, s.rejected_by_stage
    );
    Ok(())
}
