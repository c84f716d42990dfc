//! Momentum-SGD training loop with checkpointing and JSON-lines logging.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Checkpoint, CheckpointError, Graph, Tensor};
use crate::dataset::{Dataset, DatasetError};
use crate::geometry::GridBox;
use crate::imaging::{flow_to_rgb, LabImage};
use crate::losses::{DetectionTargets, LossReport, LossWeights};
use crate::model::{input_tensors, Model, ModelConfig, ModelError, Supervision};
use crate::pairwise::{PairError, PairSet, SupervisionGrid, SupervisionParams};
use crate::synth::SceneSample;

pub const FINAL_CHECKPOINT: &str = "model.mswt";
pub const LAST_GOOD_CHECKPOINT: &str = "last_good.mswt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const STEP_RECORD: &str = "__step";
pub const MOMENTUM_PREFIX: &str = "momentum/";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pair(#[from] PairError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("i/o error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("non-finite loss at step {step} ({report}); last good parameters saved to {checkpoint}")]
    NonFinite { step: usize, report: String, checkpoint: PathBuf },
    #[error("checkpoint {0} does not hold a resumable training state")]
    NotResumable(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Fraction of `iterations` after which the rate is multiplied by
    /// `lr_decay_factor`.
    pub lr_decay_at: f64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub checkpoint_interval: usize,
    pub log_interval: usize,
    pub seed: u64,
    pub train_data: PathBuf,
    pub val_data: PathBuf,
    pub loss: LossWeights,
    pub supervision: SupervisionParams,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            learning_rate: 0.01,
            lr_decay_at: 0.8,
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            grad_clip: 10.0,
            checkpoint_interval: 1000,
            log_interval: 10,
            seed: 0,
            train_data: PathBuf::from("data/train"),
            val_data: PathBuf::from("data/val"),
            loss: LossWeights::default(),
            supervision: SupervisionParams::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 || self.checkpoint_interval == 0 || self.log_interval == 0 {
            return bad("batch_size, checkpoint_interval and log_interval must be positive");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_decay_at) || !(self.lr_decay_factor > 0.0) {
            return bad("lr_decay_at must lie in [0, 1] and lr_decay_factor be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return bad("momentum must lie in [0, 1); weight_decay and grad_clip must be non-negative");
        }
        let l = &self.loss;
        if !(l.lambda_proj >= 0.0 && l.lambda_pair >= 0.0 && (0.0..=1.0).contains(&l.warmup_fraction)) {
            return bad("loss weights must be non-negative and warmup_fraction in [0, 1]");
        }
        self.supervision.validate()?;
        self.model.validate()?;
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.loss.warmup_fraction * self.iterations as f64).round() as usize
    }

    /// Learning rate used for the update taking step `step` (0-based).
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let decay_step = (self.lr_decay_at * self.iterations as f64).floor() as usize;
        if step >= decay_step && self.lr_decay_at < 1.0 {
            self.learning_rate * self.lr_decay_factor
        } else {
            self.learning_rate
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Network inputs and score-map supervision for one sample.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub image: Tensor,
    pub flow: Tensor,
    pub supervision: Supervision,
}

/// Score-map extents for an input of `h x w`.
pub fn grid_extent(config: &ModelConfig, h: usize, w: usize) -> (usize, usize) {
    (1..config.widths.len()).fold((h, w), |(h, w), _| (h.div_ceil(2), w.div_ceil(2)))
}

pub fn prepare_sample(sample: &SceneSample, model: &ModelConfig, params: &SupervisionParams) -> Result<PreparedSample, TrainError> {
    let (image, flow) = input_tensors(&sample.frame_t, &sample.flow, model.flow_input);
    let (h, w) = (sample.frame_t.height, sample.frame_t.width);
    let (gh, gw) = grid_extent(model, h, w);
    let stride = model.stride();
    let grid = SupervisionGrid::resample(&LabImage::from_rgb(&sample.frame_t), &flow_to_rgb(&sample.flow, None), &sample.flow, gh, gw);
    let boxes: Vec<_> = sample.instances.iter().map(|i| i.bbox).collect();
    let grid_boxes: Vec<_> = boxes.iter().map(|b| GridBox::from_pixel_box(b, stride, gh, gw)).collect();
    let pair_sets = grid_boxes.iter().map(|&b| PairSet::build(b, &grid, params)).collect::<Result<Vec<_>, _>>()?;
    let targets = DetectionTargets::assign(&boxes, gh, gw, stride, model.center_radius);
    Ok(PreparedSample {
        image,
        flow,
        supervision: Supervision {
            boxes,
            grid_boxes,
            pair_sets,
            targets,
        },
    })
}

pub fn prepare_dataset(data: &Dataset, model: &ModelConfig, params: &SupervisionParams) -> Result<Vec<PreparedSample>, TrainError> {
    (0..data.len())
        .into_par_iter()
        .map(|i| prepare_sample(&data.load(i)?, model, params))
        .collect()
}

/// Parameters, optimizer state and step counter.
pub struct TrainState {
    pub model: Model,
    pub velocity: Vec<Vec<f64>>,
    pub step: usize,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        let model = Model::new(config.model.clone(), config.seed)?;
        let velocity = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Ok(Self { model, velocity, step: 0 })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        for ((name, t), v) in self.model.params.iter().zip(&self.velocity) {
            let m = Tensor::new(t.shape().to_vec(), v.clone()).expect("velocity matches parameter");
            ck.push(format!("{MOMENTUM_PREFIX}{name}"), m);
        }
        ck.push(STEP_RECORD, Tensor::scalar(self.step as f64));
        ck
    }

    /// Restores a state written by [`TrainState::to_checkpoint`].
    pub fn resume(config: &TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let ck = Checkpoint::load(path)?;
        let mut state = Self::new(config)?;
        state.model.load_checkpoint(&ck)?;
        let step = ck.get(STEP_RECORD).and_then(Tensor::item).ok_or_else(|| TrainError::NotResumable(path.to_path_buf()))?;
        state.step = step as usize;
        for ((name, t), v) in state.model.params.iter().zip(state.velocity.iter_mut()) {
            let m = ck
                .get(&format!("{MOMENTUM_PREFIX}{name}"))
                .filter(|m| m.shape() == t.shape())
                .ok_or_else(|| TrainError::NotResumable(path.to_path_buf()))?;
            v.copy_from_slice(m.data());
        }
        Ok(state)
    }
}

/// Deterministic sample order: one seeded permutation per epoch.
struct BatchSampler {
    seed: u64,
    n: usize,
    epoch: Option<usize>,
    order: Vec<usize>,
}

impl BatchSampler {
    fn new(seed: u64, n: usize) -> Self {
        Self {
            seed,
            n,
            epoch: None,
            order: Vec::new(),
        }
    }

    fn at(&mut self, position: usize) -> usize {
        let epoch = position / self.n;
        if self.epoch != Some(epoch) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(epoch as u64 + 1);
            self.order = (0..self.n).collect();
            self.order.shuffle(&mut rng);
            self.epoch = Some(epoch);
        }
        self.order[position % self.n]
    }

    fn batch(&mut self, step: usize, size: usize) -> Vec<usize> {
        (0..size).map(|j| self.at(step * size + j)).collect()
    }
}

#[derive(Serialize)]
struct LogLine<'a> {
    #[serde(flatten)]
    report: &'a LossReport,
    lr: f64,
}

/// Averaged batch objective and its parameter gradient.
pub fn batch_gradient(
    model: &Model,
    samples: &[&PreparedSample],
    step: usize,
    warmup_steps: usize,
    weights: &LossWeights,
) -> Result<(LossReport, Vec<Vec<f64>>), TrainError> {
    let mut acc: Vec<Vec<f64>> = model.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    let mut report = LossReport {
        step: step + 1,
        pairwise: 0.0,
        projection: 0.0,
        detection: 0.0,
        total: 0.0,
        n_pairs: 0,
    };
    let scale = 1.0 / samples.len() as f64;
    for s in samples {
        let mut g = Graph::new();
        let leaves = model.leaves(&mut g);
        let loss = model.sample_loss(&mut g, &leaves, &s.image, &s.flow, &s.supervision, step, warmup_steps, weights)?;
        report.total += scale * g.value(loss.total).item().unwrap_or(f64::NAN);
        report.detection += scale * loss.detection;
        report.projection += scale * loss.projection;
        report.pairwise += scale * loss.pairwise;
        report.n_pairs += loss.n_pairs;
        g.backward(loss.total).map_err(ModelError::from)?;
        for (a, gr) in acc.iter_mut().zip(model.params.collect_grads(&g, &leaves)) {
            for (x, y) in a.iter_mut().zip(gr) {
                *x += scale * y;
            }
        }
    }
    Ok((report, acc))
}

/// Clips to `max_norm` in place and returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

fn sgd_update(state: &mut TrainState, grads: &[Vec<f64>], lr: f64, momentum: f64, weight_decay: f64) {
    let ids: Vec<_> = state.model.params.ids().collect();
    for ((id, grad), vel) in ids.into_iter().zip(grads).zip(state.velocity.iter_mut()) {
        let w = state.model.params.get_mut(id).data_mut();
        for ((w, &g), v) in w.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = momentum * *v + g + weight_decay * *w;
            *w -= lr * *v;
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub steps: usize,
    pub last_report: Option<LossReport>,
}

/// Runs training from `state.step` up to `config.iterations`, writing
/// `config.toml`, the log, interval checkpoints and `model.mswt` into `out`.
pub fn train_with(
    config: &TrainConfig,
    samples: &[PreparedSample],
    mut state: TrainState,
    out: &Path,
    mut on_step: impl FnMut(&LossReport),
) -> Result<(TrainState, TrainOutcome), TrainError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(DatasetError::Empty.into());
    }
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(io_err(&ckpt_dir))?;
    let cfg_path = out.join("config.toml");
    fs::write(&cfg_path, config.to_toml()).map_err(io_err(&cfg_path))?;
    let log_path = out.join(LOG_FILE);
    let log_file = if state.step == 0 {
        File::create(&log_path)
    } else {
        OpenOptions::new().append(true).create(true).open(&log_path)
    }
    .map_err(io_err(&log_path))?;
    let mut log = BufWriter::new(log_file);
    let mut sampler = BatchSampler::new(config.seed, samples.len());
    let warmup = config.warmup_steps();
    let start = state.step;
    let mut last = None;
    while state.step < config.iterations {
        let step = state.step;
        let batch: Vec<&PreparedSample> = sampler.batch(step, config.batch_size).into_iter().map(|i| &samples[i]).collect();
        let (report, mut grads) = batch_gradient(&state.model, &batch, step, warmup, &config.loss)?;
        let grads_finite = grads.iter().flatten().all(|g| g.is_finite());
        if !report.is_finite() || !grads_finite {
            let path = out.join(LAST_GOOD_CHECKPOINT);
            state.to_checkpoint().save(&path)?;
            log.flush().map_err(io_err(&log_path))?;
            return Err(TrainError::NonFinite {
                step: step + 1,
                report: report.to_json_line(),
                checkpoint: path,
            });
        }
        clip_global_norm(&mut grads, config.grad_clip);
        let lr = config.learning_rate_at(step);
        sgd_update(&mut state, &grads, lr, config.momentum, config.weight_decay);
        state.step += 1;
        let s = state.step;
        if s == 1 || s % config.log_interval == 0 || s == config.iterations {
            let line = serde_json::to_string(&LogLine { report: &report, lr }).expect("log line serializes");
            writeln!(log, "{line}").map_err(io_err(&log_path))?;
        }
        if s % config.checkpoint_interval == 0 {
            state.to_checkpoint().save(&ckpt_dir.join(format!("step_{s:06}.mswt")))?;
        }
        on_step(&report);
        last = Some(report);
    }
    log.flush().map_err(io_err(&log_path))?;
    let final_checkpoint = out.join(FINAL_CHECKPOINT);
    state.to_checkpoint().save(&final_checkpoint)?;
    let outcome = TrainOutcome {
        final_checkpoint,
        steps: state.step - start,
        last_report: last,
    };
    Ok((state, outcome))
}

/// Trains on the split at `config.train_data`, optionally resuming.
pub fn train(config: &TrainConfig, out: &Path, resume: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let data = Dataset::open(&config.train_data)?;
    let samples = prepare_dataset(&data, &config.model, &config.supervision)?;
    let state = match resume {
        Some(p) => TrainState::resume(config, p)?,
        None => TrainState::new(config)?,
    };
    train_with(config, &samples, state, out, |_| {}).map(|(_, o)| o)
}
