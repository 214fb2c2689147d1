//! Minibatch training loop.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    loss_eq1, norm, sol_loss, Adam, AdamHyper, ModelKind, ParamBlock, Pipeline, PipelineKind, SimContext, SrSource,
    TrainConfig, Transfer, WindowData,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{expect_arch, parameter_init, save_checkpoint, CheckpointMeta, ModelConfig, ModelRole, ModelSet, Network};
use crate::rng::{derive_seed, stream};
use crate::scenarios::{Dataset, ScenarioConfig, ScenarioKind, Split};
use crate::solver::StateVar;

/// Start frame of a training sample within one simulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Window {
    pub sim: usize,
    pub start: usize,
}

/// Every window of `steps + 1` consecutive frames in the given split.
pub fn training_windows(dataset: &Dataset, split: Split, steps: usize) -> Vec<Window> {
    let mut out = Vec::new();
    for (sim, s) in dataset.simulations.iter().enumerate() {
        if s.meta.split != split || s.frames.len() <= steps {
            continue;
        }
        out.extend((0..s.frames.len() - steps).map(|start| Window { sim, start }));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
    pub lr: f64,
    pub wall_time: f64,
}

pub struct TrainOutcome {
    pub models: ModelSet<f32>,
    pub log: Vec<EpochLog>,
    pub restarts: usize,
    pub adam_steps: u64,
}

/// Stored in checkpoint metadata so inference can rebuild the rollout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineInfo {
    pub pipeline: PipelineKind,
    pub model_kind: ModelKind,
    pub scenario: ScenarioKind,
}

struct Setup<'d> {
    config: &'d TrainConfig,
    dataset: &'d Dataset,
    transfer: Transfer<f32>,
    contexts: Vec<SimContext<f32>>,
    trainable: Vec<ModelRole>,
    kind: PipelineKind,
}

type Grads = BTreeMap<ModelRole, Vec<f64>>;

impl<'d> Setup<'d> {
    fn new(config: &'d TrainConfig, dataset: &'d Dataset, models: &ModelSet<f32>) -> Result<Self> {
        if dataset.config.kind != config.scenario {
            return Err(Error::config(
                "scenario",
                format!("dataset is {}, config expects {}", dataset.config.kind.name(), config.scenario.name()),
            ));
        }
        let transfer = Transfer::from_scenario(&dataset.config)?;
        let contexts = dataset
            .simulations
            .iter()
            .map(|s| SimContext::new(&dataset.config, &s.meta))
            .collect::<Result<Vec<_>>>()?;
        let kind = match (config.model_kind, config.sr_source) {
            (ModelKind::SrOnly, SrSource::Upstream) => match PipelineKind::infer(models) {
                k @ (PipelineKind::Sol | PipelineKind::DilResnet) => k,
                _ => return Err(Error::config("sr_source", "upstream training needs a corrector or Dil-ResNet model")),
            },
            _ => config.pipeline_kind(),
        };
        for role in kind.required_roles() {
            models.require(role)?;
        }
        Ok(Self { config, dataset, transfer, contexts, trainable: config.trainable_roles(), kind })
    }
}

/// Mean training objective of `models` over every window of `split` at the
/// final step count, without input noise.
pub fn dataset_loss(config: &TrainConfig, dataset: &Dataset, models: &ModelSet<f32>, split: Split) -> Result<f64> {
    let setup = Setup::new(config, dataset, models)?;
    let windows = training_windows(dataset, split, setup.span(config.steps));
    if windows.is_empty() {
        return Err(Error::config("steps", "no evaluation window"));
    }
    let losses: Vec<Result<(f64, Grads)>> =
        windows.par_iter().map(|w| setup.sample(models, *w, config.steps, 0, false)).collect();
    let mut total = 0.0;
    for l in losses {
        total += l?.0;
    }
    Ok(total / windows.len() as f64)
}

impl Setup<'_> {
    /// Steps spanned by one sample at stage step count `n`.
    fn span(&self, n: usize) -> usize {
        match self.config.model_kind {
            ModelKind::DilResnet => 1,
            _ => n,
        }
    }

    /// Loss of one window and, when `grad` is set, its gradient for every
    /// trainable network.
    fn sample(&self, models: &ModelSet<f32>, w: Window, n: usize, noise_seed: u64, grad: bool) -> Result<(f64, Grads)> {
        let span = self.span(n);
        let frames = &self.dataset.simulations[w.sim].frames[w.start..=w.start + span];
        let data = WindowData::<f32>::from_frames(frames);
        let tape = if grad { Tape::new() } else { Tape::no_grad() };
        let ctx = &self.contexts[w.sim];
        let p = Pipeline::new(self.kind, models, &self.transfer, ctx)?;
        let b = p.bind(&tape, if grad { &self.trainable } else { &[] });
        let cfg = self.config;
        let loss = match cfg.model_kind {
            ModelKind::Ato => {
                let rec = p.record(&b, &tape, &data, span)?;
                loss_eq1(&rec, cfg.lambda_hires, cfg.latent_weight(), cfg.norm)?
            }
            ModelKind::Sol => {
                let roll = p.rollout(&b, &tape, &data, span)?;
                let targets = (1..=span)
                    .map(|i| self.transfer.down_faces(&tape.constant(data.velocity[i].clone())))
                    .collect::<Result<Vec<_>>>()?;
                sol_loss(&roll.latent[1..], &targets, cfg.lambda_hires, cfg.norm)?
            }
            ModelKind::DilResnet => {
                let s = self.transfer.down_faces(&tape.constant(data.velocity[0].clone()))?;
                // Input noise is a training-time augmentation only.
                let s = if grad && cfg.noise_sigma > 0.0 {
                    let dist = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
                    let mut rng = stream(noise_seed, &[]);
                    let noise: Vec<f64> = (0..s.len()).map(|_| dist.sample(&mut rng)).collect();
                    s.add(&tape.constant(Tensor::from_f64(&[s.len()], &noise)?))?
                } else {
                    s
                };
                let marker = p.reduce_marker(&tape, data.marker[0].as_ref())?;
                let force = match &data.force[0] {
                    Some(g) => Some(p.encode_force(&b, &tape.constant(g.clone()))?),
                    None => None,
                };
                let next = p.advance(&b, &StateVar { velocity: s, marker }, force.as_ref())?;
                let target = self.transfer.down_faces(&tape.constant(data.velocity[1].clone()))?;
                next.velocity.sub(&target)?.square().mean()
            }
            ModelKind::SrOnly => {
                let mut terms = Vec::with_capacity(span);
                let refs = (1..=span)
                    .map(|i| self.transfer.fine_centered(&tape.constant(data.velocity[i].clone())))
                    .collect::<Result<Vec<_>>>()?;
                match cfg.sr_source {
                    SrSource::Reference => {
                        for (i, r) in refs.iter().enumerate() {
                            let x = self.transfer.down_faces(&tape.constant(data.velocity[i + 1].clone()))?;
                            terms.push(norm(&p.decode(&b, &x)?, r, cfg.norm)?);
                        }
                    }
                    SrSource::Upstream => {
                        let roll = p.rollout(&b, &tape, &data, span)?;
                        for (d, r) in roll.decoded.iter().zip(&refs) {
                            terms.push(norm(d, r, cfg.norm)?);
                        }
                    }
                }
                let refs: Vec<&Var<'_, f32>> = terms.iter().collect();
                Var::concat(&refs)?.sum().scale(cfg.lambda_hires as f32)
            }
        };
        let value = loss.item() as f64;
        if !value.is_finite() {
            return Err(Error::NumericalFailure { primitive: "loss".into() });
        }
        let mut grads = Grads::new();
        if grad {
            let g = tape.backward(&loss)?;
            for role in &self.trainable {
                let net = models.require(*role)?;
                grads.insert(*role, net.gradient(&g, &b.vars[role]).into_iter().map(|x| x as f64).collect());
            }
        }
        Ok((value, grads))
    }
}

/// True for failures that a restart with a smaller learning rate may fix.
fn is_divergence(e: &Error) -> bool {
    matches!(
        e,
        Error::NumericalFailure { .. }
            | Error::RolloutDiverged { .. }
            | Error::PoissonDivergence { .. }
            | Error::SimulationFailed { .. }
    )
}

fn scale_last_layer(net: &mut Network<f32>, s: f64) {
    if let Some(l) = net.layers.last_mut() {
        l.weights = l.weights.map(|x| (x as f64 * s) as f32);
        l.bias = l.bias.map(|x| (x as f64 * s) as f32);
    }
}

/// Fresh networks for the trainable roles missing from `init`.
fn initial_models(config: &TrainConfig, dataset: &Dataset, init: Option<ModelSet<f32>>) -> ModelSet<f32> {
    let mc = config.model_config(&dataset.config);
    let fresh: ModelSet<f32> = parameter_init(&mc, derive_seed(config.seed, &[0x696e_6974]));
    let mut models = init.unwrap_or_default();
    if config.model_kind == ModelKind::Ato {
        // A warm start from a fuller model drops the networks an ablation removes.
        let keep = config.trainable_roles();
        models.networks.retain(|r, _| keep.contains(r));
    }
    for (role, mut net) in fresh.networks {
        if models.get(role).is_none() {
            scale_last_layer(&mut net, config.final_layer_scale);
            models.insert(role, net);
        }
    }
    models
}

pub fn config_hash(config: &TrainConfig) -> String {
    let digest = Sha256::digest(config.to_toml().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn apply_update(models: &mut ModelSet<f32>, adam: &mut Adam, grads: &Grads, lr: f64) -> Result<()> {
    let mut flats: Vec<(ModelRole, Vec<f32>)> = Vec::new();
    for role in grads.keys() {
        flats.push((*role, models.require(*role)?.flat()));
    }
    {
        let mut blocks = Vec::new();
        for (role, flat) in flats.iter_mut() {
            let net = models.require(*role)?;
            let g = &grads[role];
            let mut rest: &mut [f32] = flat;
            let mut offset = 0;
            for (l, layer) in net.layers.iter().enumerate() {
                let n = layer.weights.len() + layer.bias.len();
                let (head, tail) = std::mem::take(&mut rest).split_at_mut(n);
                blocks.push(ParamBlock { name: format!("{}.conv{l}", role.name()), params: head, grad: &g[offset..offset + n] });
                rest = tail;
                offset += n;
            }
        }
        adam.step(lr, &mut blocks)?;
    }
    for (role, flat) in flats {
        models.get_mut(role).expect("present").set_flat(&flat)?;
    }
    Ok(())
}

/// Runs every stage of the configuration. Checkpoints and the CSV log go
/// to `out` when given.
pub fn train(
    config: &TrainConfig,
    dataset: &Dataset,
    init: Option<ModelSet<f32>>,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut models = initial_models(config, dataset, init);
    let setup = Setup::new(config, dataset, &models)?;
    let kind = setup.kind;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let info = PipelineInfo { pipeline: kind, model_kind: config.model_kind, scenario: config.scenario };
    let meta = |steps: u64| CheckpointMeta {
        seed: config.seed,
        step: steps,
        config_hash: config_hash(config),
        networks: Vec::new(),
        pipeline: Some(serde_json::to_value(&info).expect("serializable")),
    };

    let started = Instant::now();
    let mut log = Vec::new();
    let mut restarts = 0;
    let mut adam_steps = 0;
    for (stage_idx, &n) in config.stages().iter().enumerate() {
        let span = setup.span(n);
        let train_windows = training_windows(dataset, Split::Train, span);
        if train_windows.is_empty() {
            return Err(Error::config("steps", format!("no training window of {} frames", span + 1)));
        }
        let val_windows = training_windows(dataset, Split::Validation, span);
        let snapshot = models.clone();
        let mut stage_restarts = 0;
        'stage: loop {
            let lr_scale = 0.5f64.powi(stage_restarts as i32);
            let mut adam = Adam::new(AdamHyper::default());
            let mut stage_log = Vec::new();
            for epoch in 0..config.epochs {
                let lr = config.lr.at(epoch) * lr_scale;
                let mut order = train_windows.clone();
                let labels = [stage_idx as u64, stage_restarts as u64, epoch as u64];
                order.shuffle(&mut stream(config.seed, &labels));
                order.truncate(config.windows_per_epoch.unwrap_or(order.len()));
                let mut losses = Vec::new();
                let mut failure = None;
                for (bi, batch) in order.chunks(config.batch_size).enumerate() {
                    let results: Vec<Result<(f64, Grads)>> = batch
                        .par_iter()
                        .enumerate()
                        .map(|(k, w)| {
                            let seed = derive_seed(config.seed, &[labels[0], labels[1], labels[2], bi as u64, k as u64]);
                            setup.sample(&models, *w, n, seed, true)
                        })
                        .collect();
                    let mut sum = Grads::new();
                    let mut batch_loss = 0.0;
                    for r in results {
                        let (l, g) = match r {
                            Ok(v) => v,
                            Err(e) if is_divergence(&e) => {
                                failure = Some(e);
                                break;
                            }
                            Err(e) => return Err(e),
                        };
                        batch_loss += l;
                        for (role, gr) in g {
                            let acc = sum.entry(role).or_insert_with(|| vec![0.0; gr.len()]);
                            acc.iter_mut().zip(&gr).for_each(|(a, b)| *a += b);
                        }
                    }
                    if failure.is_none() {
                        let inv = 1.0 / batch.len() as f64;
                        sum.values_mut().for_each(|g| g.iter_mut().for_each(|x| *x *= inv));
                        match apply_update(&mut models, &mut adam, &sum, lr) {
                            Ok(()) => {}
                            Err(e) if is_divergence(&e) => failure = Some(e),
                            Err(e) => return Err(e),
                        }
                        losses.push(batch_loss * inv);
                    }
                    if let Some(e) = failure.take() {
                        stage_restarts += 1;
                        restarts += 1;
                        if stage_restarts > config.max_restarts {
                            return Err(Error::TrainingAborted(format!(
                                "stage N={n} diverged {stage_restarts} times, last: {e}"
                            )));
                        }
                        log::warn!("stage N={n} epoch {epoch}: {e}; restarting with lr x{}", 0.5f64.powi(stage_restarts as i32));
                        models = snapshot.clone();
                        continue 'stage;
                    }
                }
                let train_loss = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
                let validation_loss = if val_windows.is_empty() {
                    None
                } else {
                    let vals: Vec<Result<(f64, Grads)>> =
                        val_windows.par_iter().map(|w| setup.sample(&models, *w, n, 0, false)).collect();
                    let mut total = 0.0;
                    for v in vals {
                        total += v?.0;
                    }
                    Some(total / val_windows.len() as f64)
                };
                let entry = EpochLog {
                    epoch,
                    stage: n,
                    train_loss,
                    validation_loss,
                    lr,
                    wall_time: started.elapsed().as_secs_f64(),
                };
                log::info!("stage N={n} epoch {epoch}: train {train_loss:.6} lr {lr:.3e}");
                stage_log.push(entry);
            }
            adam_steps += adam.steps;
            log.extend(stage_log);
            break;
        }
        if let Some(dir) = out {
            save_checkpoint(&dir.join(format!("stage_n{n}.ckpt")), &models, &meta(adam_steps))?;
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&dir.join("model.ckpt"), &models, &meta(adam_steps))?;
        write_log(&dir.join("train_log.csv"), &log)?;
    }
    Ok(TrainOutcome { models, log, restarts, adam_steps })
}

pub const LOG_HEADER: &str = "epoch,stage,train_loss,validation_loss,lr,wall_time";

pub fn write_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from(LOG_HEADER);
    text.push('\n');
    for e in log {
        let val = e.validation_loss.map(|v| format!("{v:.9e}")).unwrap_or_default();
        text.push_str(&format!(
            "{},{},{:.9e},{},{:.6e},{:.3}\n",
            e.epoch, e.stage, e.train_loss, val, e.lr, e.wall_time
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Loads a trained checkpoint for use on `scenario`, checking the scenario
/// kind and every network's architecture.
pub fn load_trained(path: &Path, scenario: &ScenarioConfig) -> Result<(ModelSet<f32>, PipelineKind, CheckpointMeta)> {
    let (models, meta) = crate::nn::load_checkpoint(path)?;
    let kind = match &meta.pipeline {
        Some(v) => {
            let info: PipelineInfo = serde_json::from_value(v.clone())
                .map_err(|e| Error::IncompatibleCheckpoint(format!("pipeline metadata: {e}")))?;
            if info.scenario != scenario.kind {
                return Err(Error::IncompatibleCheckpoint(format!(
                    "trained on {}, data is {}",
                    info.scenario.name(),
                    scenario.kind.name()
                )));
            }
            info.pipeline
        }
        None => PipelineKind::infer(&models),
    };
    let mc = ModelConfig { padding: scenario.padding(), extra_inputs: scenario.extra_inputs(), roles: Vec::new() };
    for role in models.networks.keys() {
        expect_arch(&models, *role, &mc.arch(*role))?;
    }
    for role in kind.required_roles() {
        models.require(role).map_err(|_| Error::IncompatibleCheckpoint(format!("missing {} network", role.name())))?;
    }
    Ok((models, kind, meta))
}
