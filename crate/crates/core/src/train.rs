//! Adversarial training: losses, the alternating update step, the epoch
//! loop with checkpointing, and checkpoint IO.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, NamedTensor};
use crate::data::{DatasetManifest, PairedSample};
use crate::error::{CheckpointError, Error, Result};
use crate::nets::{
    self, build_discriminator, build_generator, images_to_tensor, DiscriminatorConfig, Mode, NetworkParams,
    UNetConfig,
};
use crate::tensor::{adam_step, AdamConfig, AdamState, Graph, NodeId, Real, Tensor};

pub const LOG_HEADER: &str = "epoch,d_loss,g_adv,g_l1,v_estimate,seconds";
pub const LOG_FILE: &str = "train_log.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub checkpoint_every: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Weight of the L1 reconstruction term; 0 leaves the pure adversarial loss.
    pub l1_weight: f64,
    pub log_clamp_epsilon: f64,
    pub seed: u64,
    /// Use `+log(1 - D(G))` for the generator instead of `-log D(G)`.
    pub literal_generator_loss: bool,
    pub manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            checkpoint_every: 5,
            batch_size: 4,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            l1_weight: 100.0,
            log_clamp_epsilon: 1e-7,
            seed: 0,
            literal_generator_loss: false,
            manifest: None,
            out_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(Error::invalid("train", "validate", d));
        if self.epochs == 0 || self.checkpoint_every == 0 || self.batch_size == 0 {
            return bad(format!(
                "epochs ({}), checkpoint_every ({}) and batch_size ({}) must be at least 1",
                self.epochs, self.checkpoint_every, self.batch_size
            ));
        }
        if !(self.l1_weight >= 0.0) || !(self.learning_rate >= 0.0) {
            return bad(format!(
                "l1_weight {} and learning_rate {} must be non-negative",
                self.l1_weight, self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas ({}, {}) must lie in [0, 1)", self.beta1, self.beta2));
        }
        if !(self.log_clamp_epsilon > 0.0 && self.log_clamp_epsilon < 0.5) {
            return bad(format!("log_clamp_epsilon {} must lie in (0, 0.5)", self.log_clamp_epsilon));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: 1e-8,
        }
    }

    /// Epochs at which a checkpoint is written.
    pub fn checkpoint_epochs(&self) -> Vec<usize> {
        (1..=self.epochs)
            .filter(|&e| e == 1 || e % self.checkpoint_every == 0 || e == self.epochs)
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub generator: UNetConfig,
    pub discriminator: DiscriminatorConfig,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub v_estimate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub v_estimate: f64,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch, self.d_loss, self.g_adv, self.g_l1, self.v_estimate, self.seconds
        )
    }
}

fn check_scores<T: Real>(op: &'static str, name: &str, t: &Tensor<T>) -> Result<()> {
    let (lo, hi) = (T::zero(), T::one());
    if let Some(v) = t.data().iter().find(|&&v| !(v >= lo && v <= hi)) {
        return Err(Error::invalid("train", op, format!("{name} score {v:?} outside [0, 1]")));
    }
    Ok(())
}

/// Empirical `E[log D(x|y)] + E[log(1 - D(G(z|y)))]` with log clamping.
pub fn gan_value<T: Real>(d_real: &Tensor<T>, d_fake: &Tensor<T>, clamp_eps: f64) -> Result<f64> {
    check_scores("gan_value", "real", d_real)?;
    check_scores("gan_value", "fake", d_fake)?;
    if !(clamp_eps > 0.0) {
        return Err(Error::invalid("train", "gan_value", format!("clamp epsilon {clamp_eps} must be positive")));
    }
    let mean_log = |t: &Tensor<T>, flip: bool| {
        t.data()
            .iter()
            .map(|v| {
                let v = v.to_f64().unwrap();
                let v = if flip { 1.0 - v } else { v };
                v.max(clamp_eps).ln()
            })
            .sum::<f64>()
            / t.numel() as f64
    };
    Ok(mean_log(d_real, false) + mean_log(d_fake, true))
}

/// `-[mean log d_real + mean log(1 - d_fake)]`.
pub fn discriminator_loss<T: Real>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId, clamp_eps: f64) -> Result<NodeId> {
    check_scores("discriminator_loss", "real", g.value(d_real))?;
    check_scores("discriminator_loss", "fake", g.value(d_fake))?;
    let lr = g.clamp_log(d_real, clamp_eps)?;
    let a = g.mean(lr)?;
    let inv = g.one_minus(d_fake)?;
    let lf = g.clamp_log(inv, clamp_eps)?;
    let b = g.mean(lf)?;
    let v = g.add(a, b)?;
    g.scale(v, -1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdversarialForm {
    /// `-mean log D(G)`.
    NonSaturating,
    /// `+mean log(1 - D(G))`, the minimax form.
    Literal,
}

#[derive(Debug, Clone, Copy)]
pub struct GeneratorLoss {
    pub total: NodeId,
    pub adversarial: NodeId,
    /// Unweighted mean absolute error.
    pub l1: NodeId,
}

/// Adversarial term plus `l1_weight * mean|generated - target|`.
pub fn generator_loss<T: Real>(
    g: &mut Graph<T>,
    d_fake: NodeId,
    generated: NodeId,
    target: NodeId,
    l1_weight: f64,
    clamp_eps: f64,
    form: AdversarialForm,
) -> Result<GeneratorLoss> {
    if !(l1_weight >= 0.0) {
        return Err(Error::invalid("train", "generator_loss", format!("l1 weight {l1_weight} must be non-negative")));
    }
    let (gs, ts) = (g.value(generated).shape(), g.value(target).shape());
    if gs != ts {
        return Err(Error::shape("train", "generator_loss", format!("generated {gs:?} vs target {ts:?}")));
    }
    check_scores("generator_loss", "fake", g.value(d_fake))?;
    let adversarial = match form {
        AdversarialForm::NonSaturating => {
            let l = g.clamp_log(d_fake, clamp_eps)?;
            let m = g.mean(l)?;
            g.scale(m, -1.0)?
        }
        AdversarialForm::Literal => {
            let inv = g.one_minus(d_fake)?;
            let l = g.clamp_log(inv, clamp_eps)?;
            g.mean(l)?
        }
    };
    let diff = g.sub(generated, target)?;
    let ad = g.abs(diff)?;
    let l1 = g.mean(ad)?;
    let weighted = g.scale(l1, l1_weight)?;
    let total = g.add(adversarial, weighted)?;
    Ok(GeneratorLoss { total, adversarial, l1 })
}

/// Both networks with optimizer state and the last completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub generator: NetworkParams<f32>,
    pub discriminator: NetworkParams<f32>,
    pub gen_opt: AdamState<f32>,
    pub disc_opt: AdamState<f32>,
    pub epoch: usize,
}

fn disc_seed(seed: u64) -> u64 {
    seed ^ 0xD15C_0000_0000_0001
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainState {
    pub fn new(model: &ModelConfig, adam: AdamConfig, seed: u64) -> Result<Self> {
        let generator = build_generator(&model.generator, seed)?;
        let discriminator = build_discriminator(&model.discriminator, disc_seed(seed))?;
        Ok(TrainState {
            gen_opt: AdamState::new(adam, generator.tensors()),
            disc_opt: AdamState::new(adam, discriminator.tensors()),
            generator,
            discriminator,
            epoch: 0,
        })
    }

    pub fn to_named(&self) -> Vec<NamedTensor> {
        let mut out = self.generator.to_named("gen.");
        out.extend(self.discriminator.to_named("disc."));
        for (tag, net, opt) in [
            ("gen", &self.generator, &self.gen_opt),
            ("disc", &self.discriminator, &self.disc_opt),
        ] {
            for (kind, moments) in [("m", &opt.first_moment), ("v", &opt.second_moment)] {
                for (name, t) in net.names().zip(moments) {
                    out.push((format!("adam.{tag}.{kind}.{name}"), t.clone()));
                }
            }
            out.push((format!("adam.{tag}.step"), Tensor::scalar(opt.step_count as f32)));
        }
        out.push(("train.epoch".to_string(), Tensor::scalar(self.epoch as f32)));
        out
    }

    /// Restore from checkpoint tensors laid out for `model`.
    pub fn from_named(model: &ModelConfig, adam: AdamConfig, tensors: &[NamedTensor]) -> Result<Self, CheckpointError> {
        let fresh = |e: Error| CheckpointError::Malformed(e.to_string());
        let mut generator: NetworkParams<f32> = build_generator(&model.generator, 0).map_err(fresh)?;
        let mut discriminator: NetworkParams<f32> = build_discriminator(&model.discriminator, 0).map_err(fresh)?;
        generator.load_named("gen.", tensors)?;
        discriminator.load_named("disc.", tensors)?;
        let get = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| CheckpointError::Missing(name.to_string()))
        };
        let counter = |name: &str| -> Result<u64, CheckpointError> {
            let t = get(name)?;
            let v = t.data()[0];
            if t.numel() != 1 || v < 0.0 || v.fract() != 0.0 {
                return Err(CheckpointError::Malformed(format!("{name} is not a non-negative integer scalar")));
            }
            Ok(v as u64)
        };
        let mut known: Vec<String> = Vec::new();
        let mut opts = Vec::new();
        for (tag, net) in [("gen", &generator), ("disc", &discriminator)] {
            let mut opt = AdamState::new(adam, net.tensors());
            for (kind, moments) in [("m", &mut opt.first_moment), ("v", &mut opt.second_moment)] {
                for (name, slot) in net.names().zip(moments.iter_mut()) {
                    let full = format!("adam.{tag}.{kind}.{name}");
                    let t = get(&full)?;
                    if t.shape() != slot.shape() {
                        return Err(CheckpointError::ShapeMismatch {
                            name: full,
                            expected: slot.shape().to_vec(),
                            found: t.shape().to_vec(),
                        });
                    }
                    *slot = t.clone();
                    known.push(full);
                }
            }
            let step = format!("adam.{tag}.step");
            opt.step_count = counter(&step)?;
            known.push(step);
            opts.push(opt);
        }
        let epoch = counter("train.epoch")? as usize;
        for (n, _) in tensors {
            let ok = n.starts_with("gen.") || n.starts_with("disc.") || n == "train.epoch" || known.contains(n);
            if !ok {
                return Err(CheckpointError::Unexpected(n.clone()));
            }
        }
        let disc_opt = opts.pop().unwrap();
        let gen_opt = opts.pop().unwrap();
        Ok(TrainState {
            generator,
            discriminator,
            gen_opt,
            disc_opt,
            epoch,
        })
    }
}

pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    checkpoint::write(path, &state.to_named())
}

pub fn load_checkpoint(path: &Path, model: &ModelConfig, adam: AdamConfig) -> Result<TrainState> {
    let tensors = checkpoint::read(path)?;
    TrainState::from_named(model, adam, &tensors).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })
}

/// Load only the generator weights from a checkpoint.
pub fn load_generator(path: &Path, cfg: &UNetConfig) -> Result<NetworkParams<f32>> {
    let tensors = checkpoint::read(path)?;
    let mut p: NetworkParams<f32> = build_generator(cfg, 0)?;
    p.load_named("gen.", &tensors).map_err(|source| Error::Checkpoint {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(p)
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch_{epoch:04}.bin")
}

fn update<T: Real>(g: &Graph<T>, bound: &nets::Bound, params: &mut NetworkParams<T>, opt: &mut AdamState<T>) -> Result<()> {
    let grads: Vec<Tensor<T>> = bound.0.iter().map(|&id| g.grad_or_zeros(id)).collect();
    let grad_refs: Vec<&Tensor<T>> = grads.iter().collect();
    let mut ps: Vec<&mut Tensor<T>> = params.tensors_mut().collect();
    adam_step(&mut ps, &grad_refs, opt)
}

/// One discriminator update on real and detached fake pairs, then one
/// generator update through the freshly updated discriminator.
pub fn train_step(
    state: &mut TrainState,
    model: &ModelConfig,
    batch: &[&PairedSample],
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<StepRecord> {
    if batch.is_empty() {
        return Err(Error::invalid("train", "train_step", "empty batch"));
    }
    let conditions: Vec<_> = batch.iter().map(|s| &s.condition).collect();
    let labels: Vec<_> = batch.iter().map(|s| &s.label).collect();
    let eps = cfg.log_clamp_epsilon;
    let mut g = Graph::<f32>::new();
    let cond = g.constant(images_to_tensor(&conditions)?);
    let target = g.constant(images_to_tensor(&labels)?);

    let gen = state.generator.bind(&mut g, true);
    let fake = nets::generator_forward(&mut g, &model.generator, &gen, cond, Mode::Train, dropout_seed)?;
    let fake_detached = g.detach(fake);

    let disc = state.discriminator.bind(&mut g, true);
    let d_real = nets::discriminator_forward(&mut g, &model.discriminator, &disc, cond, target)?;
    let d_fake = nets::discriminator_forward(&mut g, &model.discriminator, &disc, cond, fake_detached)?;
    let d_loss = discriminator_loss(&mut g, d_real, d_fake, eps)?;
    g.backward(d_loss)?;
    debug_assert!(gen.0.iter().all(|&id| g.grad(id).is_none()));
    update(&g, &disc, &mut state.discriminator, &mut state.disc_opt)?;
    let d_loss_value = g.value(d_loss).data()[0] as f64;
    let v_estimate = gan_value(g.value(d_real), g.value(d_fake), eps)?;

    g.zero_grad();
    let disc_frozen = state.discriminator.bind(&mut g, false);
    let d_fake_g = nets::discriminator_forward(&mut g, &model.discriminator, &disc_frozen, cond, fake)?;
    let form = if cfg.literal_generator_loss {
        AdversarialForm::Literal
    } else {
        AdversarialForm::NonSaturating
    };
    let gl = generator_loss(&mut g, d_fake_g, fake, target, cfg.l1_weight, eps, form)?;
    g.backward(gl.total)?;
    update(&g, &gen, &mut state.generator, &mut state.gen_opt)?;

    let scalar = |id: NodeId| g.value(id).data()[0] as f64;
    Ok(StepRecord {
        d_loss: d_loss_value,
        g_adv: scalar(gl.adversarial),
        g_l1: scalar(gl.l1),
        v_estimate,
    })
}

fn with_context(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { module, op, detail } => Error::NonFinite {
            module,
            op,
            detail: format!("{detail} (epoch {epoch}, step {step})"),
        },
        other => other,
    }
}

fn check_samples(samples: &[PairedSample], model: &ModelConfig) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::data("train", "train", "dataset has no samples"))?;
    for s in samples {
        if !s.condition.same_dims(&first.condition) {
            return Err(Error::data(
                "train",
                "train",
                format!("sample {} differs in size from {}", s.source_id, first.source_id),
            ));
        }
    }
    let (c, gen) = (first.condition.channels(), &model.generator);
    if c != gen.in_channels || gen.out_channels != 1 || model.discriminator.in_channels != c + 1 {
        return Err(Error::invalid(
            "train",
            "train",
            format!(
                "{c}-channel conditions need generator in/out {c}/1 and discriminator in {}, got {}/{} and {}",
                c + 1,
                gen.in_channels,
                gen.out_channels,
                model.discriminator.in_channels
            ),
        ));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub state: TrainState,
}

fn open_log(out_dir: &Path, resume_epoch: usize) -> Result<File> {
    let path = out_dir.join(LOG_FILE);
    let mut kept = vec![LOG_HEADER.to_string()];
    if resume_epoch > 0 && path.exists() {
        let f = File::open(&path).map_err(|e| Error::io("train", "open_log", &path, e))?;
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(|e| Error::io("train", "open_log", &path, e))?;
            let epoch: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
            if epoch.is_some_and(|e| e <= resume_epoch) {
                kept.push(line);
            }
        }
    }
    let mut f = File::create(&path).map_err(|e| Error::io("train", "open_log", &path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io("train", "open_log", &path, e))?;
    }
    Ok(f)
}

/// Run the epoch loop over in-memory samples, optionally from a resumed state.
pub fn train_samples(
    cfg: &TrainConfig,
    model: &ModelConfig,
    samples: &[PairedSample],
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_samples(samples, model)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io("train", "train", out_dir, e))?;
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::new(model, cfg.adam(), cfg.seed)?,
    };
    if state.epoch >= cfg.epochs {
        return Err(Error::invalid(
            "train",
            "train",
            format!("checkpoint is at epoch {} but only {} epochs requested", state.epoch, cfg.epochs),
        ));
    }
    // the optimizer settings always come from the current config
    state.gen_opt.config = cfg.adam();
    state.disc_opt.config = cfg.adam();

    let log_path = out_dir.join(LOG_FILE);
    let mut log = open_log(out_dir, state.epoch)?;
    let ckpt_epochs = cfg.checkpoint_epochs();
    let mut records = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in state.epoch + 1..=cfg.epochs {
        let started = Instant::now();
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 0)));
        let mut sums = [0.0f64; 4];
        let mut steps = 0;
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&PairedSample> = idx.iter().map(|&i| &samples[i]).collect();
            let seed = mix(cfg.seed, epoch as u64, step as u64 + 1);
            let r = train_step(&mut state, model, &batch, cfg, seed).map_err(|e| with_context(e, epoch, step))?;
            for (s, v) in sums.iter_mut().zip([r.d_loss, r.g_adv, r.g_l1, r.v_estimate]) {
                *s += v;
            }
            steps += 1;
        }
        state.epoch = epoch;
        let n = steps as f64;
        let rec = EpochRecord {
            epoch,
            d_loss: sums[0] / n,
            g_adv: sums[1] / n,
            g_l1: sums[2] / n,
            v_estimate: sums[3] / n,
            seconds: started.elapsed().as_secs_f64(),
        };
        if ckpt_epochs.contains(&epoch) {
            let path = out_dir.join(checkpoint_name(epoch));
            save_checkpoint(&path, &state)?;
            checkpoints.push(path);
        }
        writeln!(log, "{}", rec.csv_row()).map_err(|e| Error::io("train", "train", &log_path, e))?;
        log::info!(
            "epoch {epoch}/{}: d_loss {:.4} g_adv {:.4} g_l1 {:.4} V {:.4} ({:.1}s)",
            cfg.epochs,
            rec.d_loss,
            rec.g_adv,
            rec.g_l1,
            rec.v_estimate,
            rec.seconds
        );
        records.push(rec);
    }
    let final_checkpoint = out_dir.join(FINAL_CHECKPOINT);
    save_checkpoint(&final_checkpoint, &state)?;
    Ok(TrainOutcome {
        records,
        checkpoints,
        final_checkpoint,
        state,
    })
}

/// Train from `cfg.manifest` into `cfg.out_dir`, resuming from `resume` if given.
pub fn train(cfg: &TrainConfig, model: &ModelConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let manifest = cfg
        .manifest
        .as_deref()
        .ok_or_else(|| Error::invalid("train", "train", "no dataset manifest given"))?;
    let out_dir = cfg
        .out_dir
        .as_deref()
        .ok_or_else(|| Error::invalid("train", "train", "no output directory given"))?;
    let samples = DatasetManifest::load(manifest)?.load_samples()?;
    let state = resume.map(|p| load_checkpoint(p, model, cfg.adam())).transpose()?;
    train_samples(cfg, model, &samples, out_dir, state)
}
