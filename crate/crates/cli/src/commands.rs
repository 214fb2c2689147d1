use std::error::Error as StdError;
use std::path::{Path, PathBuf};

use physlatent::eval::{self, EvalProtocol, Prediction, RuntimeStats};
use physlatent::nn::{load_checkpoint, ModelSet};
use physlatent::scenarios::{decode_frames, generate, Dataset, ScenarioConfig, SimulationMeta, Split};
use physlatent::training::{self, PipelineKind, SimContext, TrainConfig, Transfer};
use physlatent::Error;

use crate::manifest::{io, prepare_output, RunManifest};
use crate::{Cli, Command, SplitArg};

type CmdResult = std::result::Result<(), Box<dyn StdError>>;

/// Checkpoint argument naming the plain reduced solver.
pub const BASELINE: &str = "baseline";

pub const ROLLOUT_MAGIC: &[u8; 8] = b"PLROLL01";

pub fn run(cli: &Cli) -> CmdResult {
    let root = cli.out_root.as_deref();
    match &cli.command {
        Command::GenerateData { config, out, seed } => generate_data(config, &out.out, out.force, *seed, root),
        Command::Train { config, data, out, init, seed } => {
            train(config, data, &out.out, out.force, init.as_deref(), *seed, root)
        }
        Command::Evaluate { checkpoint, data, out, split, start, steps, seed } => {
            evaluate(checkpoint, data, &out.out, out.force, *split, *start, *steps, *seed, root)
        }
        Command::Rollout { checkpoint, frame, index, steps, out, seed } => {
            rollout(checkpoint, frame, *index, *steps, &out.out, out.force, *seed, root)
        }
        Command::Benchmark { checkpoint, data, steps, repeats, out, force, seed } => {
            benchmark(checkpoint, data, *steps, *repeats, out, *force, *seed, root)
        }
    }
}

fn read_text(path: &Path) -> physlatent::Result<String> {
    std::fs::read_to_string(path).map_err(|e| io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> physlatent::Result<()> {
    std::fs::write(path, bytes).map_err(|e| io(path, e))
}

fn generate_data(config_path: &Path, out: &Path, force: bool, seed: Option<u64>, root: Option<&Path>) -> CmdResult {
    let mut config = ScenarioConfig::from_toml(&read_text(config_path)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let text = config.to_toml();
    let dir = prepare_output(out, root, force)?;
    let mut manifest = RunManifest::new("generate-data", Some((config_path, &text)), config.seed, &dir);
    log::info!("generating {} simulations of {} frames", config.simulations, config.frames);
    let dataset = generate(&config)?;
    dataset.save(&dir)?;
    write(&dir.join("config.toml"), text.as_bytes())?;
    manifest.write()?;
    let train = dataset.train().count();
    let validation = dataset.validation().count();
    println!(
        "{}: {} simulations ({train} train, {validation} validation), {} frames each, {} frames total",
        dir.display(),
        dataset.simulations.len(),
        config.frames,
        dataset.frame_count()
    );
    Ok(())
}

fn train(
    config_path: &Path,
    data: &Path,
    out: &Path,
    force: bool,
    init: Option<&Path>,
    seed: Option<u64>,
    root: Option<&Path>,
) -> CmdResult {
    let mut config = TrainConfig::from_toml(&read_text(config_path)?)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    let text = config.to_toml();
    let dataset = Dataset::load(data)?;
    let init = match init {
        Some(p) => Some(load_checkpoint(p)?.0),
        None => None,
    };
    let dir = prepare_output(out, root, force)?;
    let mut manifest = RunManifest::new("train", Some((config_path, &text)), config.seed, &dir);
    write(&dir.join("config.toml"), text.as_bytes())?;
    let outcome = training::train(&config, &dataset, init, Some(&dir))?;
    manifest.write()?;
    let last = outcome.log.last();
    println!(
        "{}: {} epochs, {} Adam steps, {} restarts, final train loss {}, validation loss {}",
        dir.join("model.ckpt").display(),
        outcome.log.len(),
        outcome.adam_steps,
        outcome.restarts,
        last.map(|l| format!("{:e}", l.train_loss)).unwrap_or_else(|| "-".into()),
        last.and_then(|l| l.validation_loss).map(|v| format!("{v:e}")).unwrap_or_else(|| "-".into()),
    );
    Ok(())
}

/// Loads a trained checkpoint, or the empty model set of the baseline.
fn load_model(checkpoint: &str, scenario: &ScenarioConfig) -> physlatent::Result<(ModelSet<f32>, PipelineKind)> {
    if checkpoint == BASELINE {
        return Ok((ModelSet::default(), PipelineKind::Baseline));
    }
    let (models, kind, _) = training::load_trained(Path::new(checkpoint), scenario)?;
    Ok((models, kind))
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    checkpoint: &str,
    data: &Path,
    out: &Path,
    force: bool,
    split: SplitArg,
    start: Option<usize>,
    steps: Option<usize>,
    seed: u64,
    root: Option<&Path>,
) -> CmdResult {
    let dataset = Dataset::load(data)?;
    let (models, kind) = load_model(checkpoint, &dataset.config)?;
    let sims: Vec<_> = dataset
        .simulations
        .iter()
        .filter(|s| match split {
            SplitArg::All => true,
            SplitArg::Train => s.meta.split == Split::Train,
            SplitArg::Validation => s.meta.split == Split::Validation,
        })
        .collect();
    let frames = sims.iter().map(|s| s.frames.len()).min().unwrap_or(0);
    let mut protocol = EvalProtocol::for_scenario(&dataset.config, frames);
    if let Some(s) = start {
        protocol.start = s;
        protocol.steps = frames.saturating_sub(s + 1);
    }
    if let Some(n) = steps {
        protocol.steps = n;
    }
    let dir = prepare_output(out, root, force)?;
    let mut manifest = RunManifest::new("evaluate", None, seed, &dir);
    let report = eval::evaluate(&dataset.config, &sims, kind, &models, protocol)?;
    eval::emit_report(&report, &dir)?;
    manifest.write()?;
    if let Some(row) = report.row(kind.name(), "pooled") {
        println!(
            "{}: {} on {} trajectories, {} steps from frame {}: velocity MAE {:e} ({:+.2}% vs baseline), vorticity MAE {:e} ({:+.2}%)",
            dir.join("metrics.csv").display(),
            kind.name(),
            sims.len(),
            protocol.steps,
            protocol.start,
            row.velocity_mae,
            row.improvement_velocity_mae,
            row.vorticity_mae,
            row.improvement_vorticity_mae
        );
    }
    Ok(())
}

/// Simulation metadata and scenario of a `frames.bin` inside a dataset
/// directory.
fn frame_context(frame: &Path) -> physlatent::Result<(ScenarioConfig, SimulationMeta)> {
    let sim_dir = frame.parent().unwrap_or(Path::new("."));
    let data_dir = sim_dir.parent().unwrap_or(Path::new("."));
    let parse = |path: PathBuf| -> physlatent::Result<serde_json::Value> {
        serde_json::from_str(&read_text(&path)?)
            .map_err(|e| Error::FormatError { offset: 0, message: format!("{}: {e}", path.display()) })
    };
    let format = |path: &Path, e: serde_json::Error| Error::FormatError { offset: 0, message: format!("{}: {e}", path.display()) };
    let ds_path = data_dir.join("dataset.json");
    let mut ds = parse(ds_path.clone())?;
    let config: ScenarioConfig = serde_json::from_value(ds["config"].take()).map_err(|e| format(&ds_path, e))?;
    config.validate()?;
    let meta_path = sim_dir.join("meta.json");
    let meta: SimulationMeta = serde_json::from_value(parse(meta_path.clone())?).map_err(|e| format(&meta_path, e))?;
    Ok((config, meta))
}

/// `PLROLL01`, then little-endian `u32` frame count and values per frame,
/// then the values as little-endian `f32`.
pub fn encode_rollout(frames: &[Vec<f64>]) -> Vec<u8> {
    let len = frames.first().map_or(0, Vec::len);
    let mut out = Vec::with_capacity(16 + 4 * len * frames.len());
    out.extend_from_slice(ROLLOUT_MAGIC);
    out.extend_from_slice(&(frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(len as u32).to_le_bytes());
    for f in frames {
        for &v in f {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn rollout(
    checkpoint: &str,
    frame: &Path,
    index: usize,
    steps: usize,
    out: &Path,
    force: bool,
    seed: u64,
    root: Option<&Path>,
) -> CmdResult {
    let (config, meta) = frame_context(frame)?;
    let fine = config.fine_domain()?;
    let bytes = std::fs::read(frame).map_err(|e| io(frame, e))?;
    let frames = decode_frames(&fine, &bytes)?;
    if index >= frames.len() {
        return Err(Box::new(Error::Config { field: "index".into(), message: format!("{} holds {} frames", frame.display(), frames.len()) }));
    }
    let (models, kind) = load_model(checkpoint, &config)?;
    let dir = prepare_output(out, root, force)?;
    let mut manifest = RunManifest::new("rollout", None, seed, &dir);
    let transfer = Transfer::<f32>::from_scenario(&config)?;
    let ctx = SimContext::<f32>::new(&config, &meta)?;
    let Prediction { latent, velocity, marker } = eval::predict(kind, &models, &transfer, &ctx, &frames[index..], steps)?;
    let decoded: Vec<Vec<f64>> = velocity.iter().map(|g| g.data.clone()).collect();
    if decoded.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Box::new(Error::NumericalFailure { primitive: "rollout".into() }));
    }
    write(&dir.join("decoded.bin"), &encode_rollout(&decoded))?;
    write(&dir.join("latent.bin"), &encode_rollout(&latent))?;
    if let Some(m) = &marker {
        let m: Vec<Vec<f64>> = m.iter().map(|g| g.data.clone()).collect();
        write(&dir.join("marker.bin"), &encode_rollout(&m))?;
    }
    let summary = serde_json::json!({
        "model": kind.name(),
        "simulation": meta.index,
        "start_frame": index,
        "steps": steps,
        "frames": decoded.len(),
        "fine": [fine.nx, fine.ny],
        "coarse": [transfer.coarse.nx, transfer.coarse.ny],
        "decoded": "decoded.bin: centered velocity, channel-major (u then v), x fastest",
        "latent": "latent.bin: reduced face vector, u faces then v faces",
    });
    write(&dir.join("rollout.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    manifest.write()?;
    println!("{}: {} decoded frames ({} steps)", dir.display(), decoded.len(), steps);
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn benchmark(
    checkpoint: &str,
    data: &Path,
    steps: usize,
    repeats: usize,
    out: &Option<PathBuf>,
    force: bool,
    seed: u64,
    root: Option<&Path>,
) -> CmdResult {
    let dataset = Dataset::load(data)?;
    let (models, kind) = load_model(checkpoint, &dataset.config)?;
    let sim = dataset.simulations.first().ok_or_else(|| Error::Config { field: "data".into(), message: "dataset holds no simulation".into() })?;
    let frame = sim.frames.first().ok_or_else(|| Error::Config { field: "data".into(), message: "simulation holds no frame".into() })?;
    let out = out.clone().unwrap_or_else(|| PathBuf::from("benchmark"));
    let dir = prepare_output(&out, root, force)?;
    let mut manifest = RunManifest::new("benchmark", None, seed, &dir);

    let transfer = Transfer::<f32>::from_scenario(&dataset.config)?;
    let ctx = SimContext::<f32>::new(&dataset.config, &sim.meta)?;
    let mut rows: Vec<(String, RuntimeStats)> = Vec::new();
    if kind != PipelineKind::Baseline {
        rows.push((kind.name().into(), eval::benchmark_model(kind, &models, &transfer, &ctx, frame, steps, repeats)?));
    }
    rows.push((
        BASELINE.into(),
        eval::benchmark_model(PipelineKind::Baseline, &ModelSet::default(), &transfer, &ctx, frame, steps, repeats)?,
    ));
    // The fine solver as it runs for data generation.
    let reference = dataset.config.solver(&sim.meta, false)?;
    rows.push(("reference".into(), eval::benchmark_reference(&reference, frame, steps, repeats)?));

    let mut csv = String::from("model,steps,repeats,mean_seconds,stddev_seconds\n");
    for (name, s) in &rows {
        csv.push_str(&format!("{name},{steps},{},{:e},{:e}\n", s.samples.len(), s.mean, s.stddev));
        println!("{name:>12}: {:.4} s ± {:.4} s for {steps} steps ({repeats} runs)", s.mean, s.stddev);
    }
    write(&dir.join("runtime.csv"), csv.as_bytes())?;
    manifest.write()?;
    Ok(())
}
