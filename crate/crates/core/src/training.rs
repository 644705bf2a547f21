//! Minibatch training with the ranking loss.
//!
//! Randomness is a pure function of `(seed, epoch)` for the batch order and
//! `(seed, step)` for caption choice, so a run restarted from a checkpoint at
//! step `t` sees exactly the batches the uninterrupted run would have.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::loss::{ranking_loss_graph, DEFAULT_MARGIN};
use crate::model::{init_params, ModelConfig};
use crate::optim::{Optimizer, OptimizerSettings, OptimizerState};
use crate::params::ParamStore;
use crate::record::{CaptionSequence, VideoRecord};
use crate::similarity::similarity_graph;
use crate::text_encoder::encode_texts_graph;
use crate::video_encoder::{encode_videos_graph, prepare_video, PreparedVideo};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSettings {
    pub steps: usize,
    pub batch_size: usize,
    pub margin: f64,
    /// Save a checkpoint every this many steps; 0 disables periodic saves.
    pub checkpoint_every: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            steps: 2000,
            batch_size: 32,
            margin: DEFAULT_MARGIN,
            checkpoint_every: 0,
        }
    }
}

impl TrainSettings {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.batch_size < 2 {
            v.push("training.batch_size: must be ≥ 2".to_string());
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            v.push("training.margin: must be finite and ≥ 0".to_string());
        }
        v
    }
}

/// Training videos with their captions, pre-pooled where possible.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    pub videos: Vec<PreparedVideo<f64>>,
    pub captions: Vec<Vec<CaptionSequence<f64>>>,
}

impl TrainingSet {
    pub fn new(records: &[VideoRecord<f64>], cfg: &ModelConfig) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::Integrity(format!(
                "training needs at least 2 videos, got {}",
                records.len()
            )));
        }
        let mut videos = Vec::with_capacity(records.len());
        let mut captions = Vec::with_capacity(records.len());
        for r in records {
            if r.captions.is_empty() {
                return Err(Error::Integrity(format!("`{}` has no captions", r.id)));
            }
            videos.push(prepare_video(r, cfg)?);
            captions.push(r.captions.clone());
        }
        Ok(TrainingSet { videos, captions })
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

/// SplitMix64 finalizer over `(seed, stream, index)`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

const STREAM_EPOCH: u64 = 1;
const STREAM_CAPTION: u64 = 2;

/// Video indices and chosen caption indices for 0-based `step`.
///
/// Each epoch is a fresh permutation cut into `ceil(N / B)` batches; the
/// last one may be short.
pub fn batch_for_step(data: &TrainingSet, batch_size: usize, seed: u64, step: usize) -> Vec<(usize, usize)> {
    let n = data.len();
    let per_epoch = n.div_ceil(batch_size);
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_EPOCH, epoch as u64)));
    let end = ((slot + 1) * batch_size).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, STREAM_CAPTION, step as u64));
    order[slot * batch_size..end]
        .iter()
        .map(|&v| (v, rng.random_range(0..data.captions[v].len())))
        .collect()
}

/// Loss and gradients of one batch.
pub fn batch_loss(
    cfg: &ModelConfig,
    params: &ParamStore<f64>,
    data: &TrainingSet,
    batch: &[(usize, usize)],
    margin: f64,
) -> Result<(f64, ParamStore<f64>)> {
    let videos: Vec<_> = batch.iter().map(|&(v, _)| &data.videos[v]).collect();
    let captions: Vec<_> = batch.iter().map(|&(v, c)| &data.captions[v][c]).collect();
    crate::graph::gradients(params, |g: &mut Graph<'_, f64>| {
        let vb = encode_videos_graph(g, cfg, &videos)?;
        let tb = encode_texts_graph(g, cfg, &captions)?;
        let s = similarity_graph(g, &vb, &tb)?;
        ranking_loss_graph(g, s, margin)
    })
}

/// Parameters, optimizer moments and loss history at some step.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore<f64>,
    pub optimizer: OptimizerState<f64>,
    pub losses: Vec<f64>,
}

pub struct Trainer<'d> {
    pub model: ModelConfig,
    pub settings: TrainSettings,
    pub seed: u64,
    pub data: &'d TrainingSet,
    pub params: ParamStore<f64>,
    pub optimizer: Optimizer<f64>,
    /// Loss of every completed step.
    pub losses: Vec<f64>,
}

impl<'d> Trainer<'d> {
    pub fn new(
        model: ModelConfig,
        settings: TrainSettings,
        optim: OptimizerSettings,
        data: &'d TrainingSet,
        seed: u64,
    ) -> Result<Self> {
        let params = init_params(&model, seed)?;
        let optimizer = Optimizer::new(optim, &params)?;
        Self::assemble(model, settings, data, seed, params, optimizer, Vec::new())
    }

    /// Continues from a saved state.
    pub fn resume(
        model: ModelConfig,
        settings: TrainSettings,
        optim: OptimizerSettings,
        data: &'d TrainingSet,
        seed: u64,
        state: TrainState,
    ) -> Result<Self> {
        if state.optimizer.step as usize != state.losses.len() {
            return Err(Error::Integrity(format!(
                "optimizer is at step {} but the loss log has {} entries",
                state.optimizer.step,
                state.losses.len()
            )));
        }
        let v = optim.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        let optimizer = Optimizer::from_state(optim, state.optimizer);
        Self::assemble(model, settings, data, seed, state.params, optimizer, state.losses)
    }

    /// Snapshot of everything [`Trainer::resume`] needs.
    pub fn state(&self) -> TrainState {
        TrainState {
            params: self.params.clone(),
            optimizer: self.optimizer.state.clone(),
            losses: self.losses.clone(),
        }
    }

    fn assemble(
        model: ModelConfig,
        settings: TrainSettings,
        data: &'d TrainingSet,
        seed: u64,
        params: ParamStore<f64>,
        optimizer: Optimizer<f64>,
        losses: Vec<f64>,
    ) -> Result<Self> {
        let v = settings.violations();
        if !v.is_empty() {
            return Err(Error::Config(v.join("; ")));
        }
        model.validate()?;
        Ok(Trainer {
            model,
            settings,
            seed,
            data,
            params,
            optimizer,
            losses,
        })
    }

    /// Steps completed so far.
    pub fn step_count(&self) -> usize {
        self.losses.len()
    }

    pub fn step(&mut self) -> Result<f64> {
        let t = self.step_count();
        let batch = batch_for_step(self.data, self.settings.batch_size, self.seed, t);
        let (loss, grads) = batch_loss(&self.model, &self.params, self.data, &batch, self.settings.margin)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: t,
                loss,
                batch: batch.iter().map(|&(v, _)| self.data.videos[v].id.clone()).collect(),
            });
        }
        self.optimizer.step(&mut self.params, &grads)?;
        self.losses.push(loss);
        Ok(loss)
    }

    /// Runs until `settings.steps` steps are done, calling `on_checkpoint`
    /// after every `checkpoint_every`-th step.
    pub fn run(&mut self, mut on_checkpoint: impl FnMut(&Trainer<'d>) -> Result<()>) -> Result<()> {
        while self.step_count() < self.settings.steps {
            self.step()?;
            let every = self.settings.checkpoint_every;
            if every > 0 && self.step_count().is_multiple_of(every) {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }
}
