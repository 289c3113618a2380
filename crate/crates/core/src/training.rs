//! Cross-entropy training of the soft prompt and soft embedding.
//!
//! Every step scores the batch images against the text vectors of all
//! training pairs, so the softmax denominator always covers the full seen
//! label set. Shuffling is re-derived from `(seed, epoch)` at the start of
//! each epoch, which makes a resumed run identical to an uninterrupted one
//! given only the parameters, optimizer state and epoch counter.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{LrSchedule, Optimizer, OptimizerConfig, OptimizerKind, Tape, Tensor};
use crate::checkpoint;
use crate::data::{CompositionSpace, CzslSetting, Pair, Phase, Sample, Split};
use crate::encoders::{init_frozen, EncoderDims, ImageFeatureTable};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, Summary};
use crate::model::{argmax, ModelSnapshot, DEFAULT_TAU};
use crate::prompt::{init_prompt_state, PromptInit, PromptMode, PromptState, EMBEDDING_PARAM, PROMPT_PARAM};

/// Stream offset separating shuffle randomness from initialization.
const SHUFFLE_STREAM: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub mode: PromptMode,
    pub tau: f64,
    pub prompt_len: usize,
    pub prompt_init: PromptInit,
    /// Write `epoch-NNN.ckpt` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Stop after this many epochs without a new best validation AUC; 0 disables.
    pub patience: usize,
    pub d_model: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ctx_len: usize,
    pub causal: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let dims = EncoderDims::default();
        Self {
            epochs: 30,
            batch_size: 64,
            lr: 0.01,
            optimizer: OptimizerKind::Adam,
            schedule: LrSchedule::Constant,
            seed: 0,
            mode: PromptMode::PromptCompVl,
            tau: DEFAULT_TAU,
            prompt_len: 3,
            prompt_init: PromptInit::Random,
            checkpoint_every: 0,
            patience: 0,
            d_model: dims.d_model,
            blocks: dims.blocks,
            heads: dims.heads,
            ctx_len: dims.ctx_len,
            causal: dims.causal,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

impl TrainConfig {
    pub const KEYS: [&'static str; 17] = [
        "epochs",
        "batch_size",
        "lr",
        "optimizer",
        "schedule",
        "seed",
        "mode",
        "tau",
        "prompt_len",
        "prompt_init",
        "checkpoint_every",
        "patience",
        "d_model",
        "blocks",
        "heads",
        "ctx_len",
        "causal",
    ];

    /// Set one field from its text form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "optimizer" => self.optimizer = value.parse()?,
            "schedule" => self.schedule = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "mode" => self.mode = value.parse()?,
            "tau" => self.tau = parse(key, value)?,
            "prompt_len" => self.prompt_len = parse(key, value)?,
            "prompt_init" => self.prompt_init = value.parse()?,
            "checkpoint_every" => self.checkpoint_every = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "blocks" => self.blocks = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ctx_len" => self.ctx_len = parse(key, value)?,
            "causal" => self.causal = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every field as `(key, value)` in [`Self::KEYS`] order.
    pub fn entries(&self) -> Vec<(String, String)> {
        let v = [
            self.epochs.to_string(),
            self.batch_size.to_string(),
            self.lr.to_string(),
            self.optimizer.to_string(),
            self.schedule.to_string(),
            self.seed.to_string(),
            self.mode.to_string(),
            self.tau.to_string(),
            self.prompt_len.to_string(),
            self.prompt_init.to_string(),
            self.checkpoint_every.to_string(),
            self.patience.to_string(),
            self.d_model.to_string(),
            self.blocks.to_string(),
            self.heads.to_string(),
            self.ctx_len.to_string(),
            self.causal.to_string(),
        ];
        Self::KEYS.iter().map(|k| k.to_string()).zip(v).collect()
    }

    pub fn from_entries(entries: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in entries {
            if !c.set(k, v)? {
                return Err(Error::Config(format!("unknown training key '{k}'")));
            }
        }
        Ok(c)
    }

    pub fn dims(&self, d_img: usize) -> EncoderDims {
        EncoderDims {
            d_model: self.d_model,
            blocks: self.blocks,
            heads: self.heads,
            ctx_len: self.ctx_len,
            d_img,
            causal: self.causal,
        }
    }

    pub fn optimizer_config(&self) -> OptimizerConfig {
        match self.optimizer {
            OptimizerKind::Sgd => OptimizerConfig::sgd(self.lr),
            OptimizerKind::Adam => OptimizerConfig::adam(self.lr),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be non-negative, got {}", self.lr)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.tau)));
        }
        self.dims(1).validate()?;
        crate::prompt::check_layout(self.prompt_len, self.ctx_len)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val: Option<Summary>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        let mut s = format!(
            "epoch={} loss={:.6} seen_acc={:.4}",
            self.epoch, self.loss, self.train_acc
        );
        if let Some(v) = self.val {
            s.push_str(&format!(
                " val_S={:.4} val_U={:.4} val_HM={:.4} val_AUC={:.4}",
                v.s, v.u, v.hm, v.auc
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BestSnapshot {
    pub epoch: usize,
    pub auc: f64,
    pub prompt: PromptState,
}

/// Everything a checkpoint holds.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    pub snapshot: ModelSnapshot,
    pub optimizer: Optimizer,
    pub best: Option<BestSnapshot>,
    pub history: Vec<EpochRecord>,
}

impl TrainState {
    /// Fresh state: frozen encoders and prompt both derived from `config.seed`.
    pub fn init(config: &TrainConfig, space: &CompositionSpace, d_img: usize) -> Result<Self> {
        config.validate()?;
        let encoders = init_frozen(config.seed, config.dims(d_img))?;
        let prompt = init_prompt_state(
            space,
            config.mode,
            config.prompt_len,
            config.d_model,
            config.seed,
            None,
            config.prompt_init,
        )?;
        let snapshot = ModelSnapshot::new(
            encoders,
            prompt,
            config.tau,
            space.attrs().to_vec(),
            space.objs().to_vec(),
        )?;
        Ok(Self {
            config: config.clone(),
            epoch: 0,
            snapshot,
            optimizer: Optimizer::new(config.optimizer_config()),
            best: None,
            history: Vec::new(),
        })
    }

    /// The validation-selected snapshot, or the latest one if there is none.
    pub fn best_snapshot(&self) -> ModelSnapshot {
        let mut s = self.snapshot.clone();
        if let Some(b) = &self.best {
            s.prompt = b.prompt.clone();
        }
        s
    }

    pub fn is_finished(&self) -> bool {
        if self.epoch >= self.config.epochs {
            return true;
        }
        let p = self.config.patience;
        match &self.best {
            Some(b) if p > 0 => self.epoch - b.epoch >= p,
            _ => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainStats {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best: Option<Summary>,
    pub wall_clock_secs: f64,
}

/// Result of one optimization step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutput {
    pub loss: f64,
    pub correct: usize,
}

/// Loss over `images` (unit rows) labelled by indices into `pairs`, and the
/// gradient for each prompt parameter in [`PromptState::params`] order
/// (`None` for frozen ones).
pub fn loss_and_grads(
    snapshot: &ModelSnapshot,
    images: &Tensor,
    labels: &[usize],
    pairs: &[Pair],
) -> Result<(StepOutput, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let vars = snapshot.prompt.register(&mut tape);
    let texts = snapshot.texts_on_tape(&mut tape, vars, pairs)?;
    let img = tape.constant(images.clone());
    let tt = tape.transpose(texts)?;
    let sims = tape.matmul(img, tt)?;
    let logits = tape.scale(sims, 1.0 / snapshot.tau())?;
    let loss = tape.cross_entropy(logits, labels)?;
    let lv = tape.value(logits);
    let correct = (0..labels.len())
        .filter(|&i| argmax(lv.row(i)) == Some(labels[i]))
        .count();
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::State(format!("training loss is not finite: {loss_value}")));
    }
    tape.backward(loss)?;
    let mut grads = Vec::new();
    grads.extend(vars.prompt.map(|v| tape.grad(v).cloned()));
    grads.push(tape.grad(vars.embedding).cloned());
    Ok((
        StepOutput {
            loss: loss_value,
            correct,
        },
        grads,
    ))
}

/// Score `images` against all training `pairs`, backpropagate the
/// cross-entropy and update only the trainable prompt blocks.
pub fn train_step_on(
    snapshot: &mut ModelSnapshot,
    optimizer: &mut Optimizer,
    images: &Tensor,
    labels: &[usize],
    pairs: &[Pair],
) -> Result<StepOutput> {
    let (out, grads) = loss_and_grads(snapshot, images, labels, pairs)?;
    let params = snapshot.prompt.params_mut();
    optimizer.step(params.into_iter().zip(grads.iter().map(Option::as_ref)))?;
    Ok(out)
}

/// [`train_step_on`] for a batch of samples; every sample must carry a training pair.
pub fn train_step(
    snapshot: &mut ModelSnapshot,
    optimizer: &mut Optimizer,
    space: &CompositionSpace,
    features: &ImageFeatureTable,
    batch: &[&Sample],
) -> Result<StepOutput> {
    let pairs = space.train_pairs();
    let index: HashMap<Pair, usize> = pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        let &l = index.get(&s.pair).ok_or_else(|| {
            Error::Data(format!(
                "sample '{}' is labelled '{}', which is not a training pair",
                s.image_id,
                space.pair_name(s.pair)
            ))
        })?;
        labels.push(l);
    }
    let ids: Vec<&str> = batch.iter().map(|s| s.image_id.as_str()).collect();
    let images = snapshot.image_matrix(features, &ids)?;
    train_step_on(snapshot, optimizer, &images, &labels, pairs)
}

/// Drives epochs over a fixed space and feature table.
pub struct Trainer<'a> {
    space: &'a CompositionSpace,
    features: &'a ImageFeatureTable,
    state: TrainState,
    images: Tensor,
    labels: Vec<usize>,
    has_val: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(config: &TrainConfig, space: &'a CompositionSpace, features: &'a ImageFeatureTable) -> Result<Self> {
        let state = TrainState::init(config, space, features.d_img())?;
        Self::resume(state, space, features)
    }

    pub fn resume(state: TrainState, space: &'a CompositionSpace, features: &'a ImageFeatureTable) -> Result<Self> {
        state.config.validate()?;
        state.snapshot.check_space(space)?;
        let pairs = space.train_pairs();
        let index: HashMap<Pair, usize> = pairs.iter().enumerate().map(|(i, p)| (*p, i)).collect();
        let train: Vec<&Sample> = space.samples_in(Split::Train).collect();
        if train.is_empty() {
            return Err(Error::Data("no training images".into()));
        }
        let ids: Vec<&str> = train.iter().map(|s| s.image_id.as_str()).collect();
        let images = state.snapshot.image_matrix(features, &ids)?;
        let labels = train.iter().map(|s| index[&s.pair]).collect();
        let has_val = space.samples_in(Split::Val).next().is_some();
        Ok(Self {
            space,
            features,
            state,
            images,
            labels,
            has_val,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.is_finished()
    }

    fn steps_per_epoch(&self) -> usize {
        self.labels.len().div_ceil(self.state.config.batch_size)
    }

    /// Train one epoch, validate, and update the best snapshot.
    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let cfg = self.state.config.clone();
        let n = self.labels.len();
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(SHUFFLE_STREAM + self.state.epoch as u64);
        order.shuffle(&mut rng);
        let total_steps = (cfg.epochs * self.steps_per_epoch()) as u64;
        let d = self.images.cols();
        let (mut loss_sum, mut correct) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let mut data = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                data.extend_from_slice(self.images.row(i));
            }
            let batch = Tensor::matrix(chunk.len(), d, data)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| self.labels[i]).collect();
            let step = self.state.optimizer.steps();
            self.state.optimizer.set_lr(cfg.schedule.lr_at(cfg.lr, step, total_steps));
            let out = train_step_on(
                &mut self.state.snapshot,
                &mut self.state.optimizer,
                &batch,
                &labels,
                self.space.train_pairs(),
            )?;
            loss_sum += out.loss * chunk.len() as f64;
            correct += out.correct;
        }
        self.state.epoch += 1;
        let val = if self.has_val {
            let r = evaluate(
                &self.state.snapshot,
                self.space,
                self.features,
                CzslSetting::Generalized,
                Phase::Val,
                None,
            )?;
            Some(r.summary)
        } else {
            None
        };
        let auc = val.map_or(f64::NEG_INFINITY, |v| v.auc);
        if self.state.best.as_ref().is_none_or(|b| auc > b.auc) {
            self.state.best = Some(BestSnapshot {
                epoch: self.state.epoch,
                auc,
                prompt: self.state.snapshot.prompt.clone(),
            });
        }
        let record = EpochRecord {
            epoch: self.state.epoch,
            loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            val,
        };
        self.state.history.push(record);
        Ok(record)
    }
}

/// Where [`run`] writes its files.
#[derive(Clone, Debug)]
pub struct OutputDir {
    pub dir: PathBuf,
}

impl OutputDir {
    pub const FINAL: &'static str = "checkpoint.ckpt";
    pub const LOG: &'static str = "train.log";

    /// Create the directory and confirm it is writable.
    pub fn prepare(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let probe = dir.join(".write-test");
        fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
        fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join(Self::FINAL)
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> PathBuf {
        self.dir.join(format!("epoch-{epoch:03}.ckpt"))
    }
}

/// Train to completion from `trainer`'s current state. With `out`, writes
/// cadence checkpoints, the final checkpoint and the per-epoch log.
pub fn run(mut trainer: Trainer<'_>, out: Option<&OutputDir>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<(TrainState, TrainStats)> {
    let started = Instant::now();
    let every = trainer.state().config.checkpoint_every;
    while !trainer.is_finished() {
        let rec = trainer.run_epoch()?;
        on_epoch(&rec);
        if let Some(o) = out {
            if every > 0 && rec.epoch % every == 0 {
                checkpoint::save(trainer.state(), &o.epoch_checkpoint(rec.epoch))?;
            }
        }
    }
    let state = trainer.into_state();
    if let Some(o) = out {
        checkpoint::save(&state, &o.final_checkpoint())?;
        let log: String = state.history.iter().map(|r| r.log_line() + "\n").collect();
        let path = o.dir.join(OutputDir::LOG);
        fs::write(&path, log).map_err(|e| Error::io(&path, e))?;
    }
    let best = state.best.as_ref();
    let stats = TrainStats {
        epochs: state.history.clone(),
        best_epoch: best.map(|b| b.epoch),
        best: best.and_then(|b| state.history.get(b.epoch - 1)).and_then(|r| r.val),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok((state, stats))
}

/// Fresh training run. Refuses modes with nothing to train.
pub fn train(
    config: &TrainConfig,
    space: &CompositionSpace,
    features: &ImageFeatureTable,
    out: Option<&Path>,
) -> Result<(TrainState, TrainStats)> {
    config.validate()?;
    if config.mode == PromptMode::ClipHard || (config.mode == PromptMode::CoopSoftPrompt && config.prompt_len == 0) {
        return Err(Error::Config(format!(
            "mode {} with prompt length {} has no trainable parameters; evaluate it without training instead",
            config.mode, config.prompt_len
        )));
    }
    let out = out.map(OutputDir::prepare).transpose()?;
    let trainer = Trainer::new(config, space, features)?;
    run(trainer, out.as_ref(), |_| {})
}

/// Names of the blocks a mode lets the optimizer change.
pub fn trainable_names(mode: PromptMode) -> Vec<&'static str> {
    let mut v = Vec::new();
    if mode.trains_prompt() {
        v.push(PROMPT_PARAM);
    }
    if mode.trains_embedding() {
        v.push(EMBEDDING_PARAM);
    }
    v
}
