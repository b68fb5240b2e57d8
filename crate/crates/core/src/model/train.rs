//! Minibatch training with Adam on the F-beta loss.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{backward_from, batch_tensor, forward, forward_train, probs_as_maps, NetParams};
use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image, SaliencyMap};
use crate::objective::{fusion_loss, fusion_loss_and_gradient, LossConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub first_moment_decay: f64,
    pub second_moment_decay: f64,
    pub base_lr: f64,
    pub batch_size: usize,
    /// Scales `base_lr`; the self-supervision schedule doubles it per iteration.
    pub lr_multiplier: f64,
    pub epsilon: f64,
    pub loss: LossConfig,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            first_moment_decay: 0.9,
            second_moment_decay: 0.999,
            base_lr: 1e-4,
            batch_size: 20,
            lr_multiplier: 1.0,
            epsilon: 1e-8,
            loss: LossConfig::default(),
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("first_moment_decay", self.first_moment_decay),
            ("second_moment_decay", self.second_moment_decay),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if !(self.base_lr > 0.0) || !(self.lr_multiplier > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        self.loss.validate()
    }

    pub fn lr(&self) -> f64 {
        self.base_lr * self.lr_multiplier
    }
}

/// First and second moment estimates for each tensor, plus the step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamState {
    pub fn new(params: &NetParams) -> Self {
        let zeros: Vec<Vec<f32>> = params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    fn apply(&mut self, params: &mut NetParams, grads: &[Vec<f32>], cfg: &OptimConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.first_moment_decay, cfg.second_moment_decay);
        let t = self.step as i32;
        let c1 = (1.0 - b1.powi(t)) as f32;
        let c2 = (1.0 - b2.powi(t)) as f32;
        let lr = cfg.lr() as f32;
        let eps = cfg.epsilon as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (k, tensor) in params.tensors.iter_mut().enumerate() {
            if !tensor.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((p, &g), mi), vi) in tensor.data.iter_mut().zip(&grads[k]).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * g;
                *vi = b2 * *vi + (1.0 - b2) * g * g;
                let mh = *mi / c1;
                let vh = *vi / c2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// `u128` word position, kept as a decimal string for JSON portability.
    pub word_pos: String,
}

impl RngState {
    fn capture(rng: &ChaCha8Rng, seed: u64) -> Self {
        Self {
            seed,
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::invalid(format!("bad RNG word position '{}'", self.word_pos)))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: NetParams,
    pub adam: AdamState,
    pub optim: OptimConfig,
    pub epoch: usize,
    pub rng: RngState,
    pub loss_trace: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, serde_json::to_vec(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_slice(&bytes).map_err(|e| Error::Load {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

/// One training example: image plus the target masks averaged by the loss.
#[derive(Clone, Debug)]
pub struct TrainSample<'a> {
    pub id: &'a str,
    pub image: &'a Image<f32>,
    pub targets: Vec<&'a BinaryMask>,
}

/// Receives each sample's training-pass prediction.
pub type EpochHook<'h> = dyn FnMut(&str, &SaliencyMap<f32>) -> Result<()> + 'h;

pub struct Trainer {
    pub params: NetParams,
    pub adam: AdamState,
    pub optim: OptimConfig,
    pub epoch: usize,
    /// Mean training loss of every completed epoch.
    pub loss_trace: Vec<f64>,
    rng: ChaCha8Rng,
    shuffle_seed: u64,
}

impl Trainer {
    pub fn new(params: NetParams, optim: OptimConfig, shuffle_seed: u64) -> Result<Self> {
        optim.validate()?;
        Ok(Self {
            adam: AdamState::new(&params),
            params,
            optim,
            epoch: 0,
            loss_trace: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(shuffle_seed),
            shuffle_seed,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            adam: self.adam.clone(),
            optim: self.optim.clone(),
            epoch: self.epoch,
            rng: RngState::capture(&self.rng, self.shuffle_seed),
            loss_trace: self.loss_trace.clone(),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        ck.optim.validate()?;
        if ck.adam.m.len() != ck.params.tensors.len() || ck.adam.v.len() != ck.params.tensors.len() {
            return Err(Error::invalid("optimizer state does not match the parameters"));
        }
        Ok(Self {
            rng: ck.rng.restore()?,
            shuffle_seed: ck.rng.seed,
            params: ck.params,
            adam: ck.adam,
            optim: ck.optim,
            epoch: ck.epoch,
            loss_trace: ck.loss_trace,
        })
    }

    /// Runs `epochs` reshuffled passes. The hook, if any, sees every sample's
    /// prediction once per epoch.
    pub fn run(&mut self, samples: &[TrainSample<'_>], epochs: usize, mut hook: Option<&mut EpochHook<'_>>) -> Result<()> {
        if epochs == 0 {
            return Ok(());
        }
        if samples.is_empty() {
            return Err(Error::invalid("no training samples"));
        }
        if self.optim.batch_size > samples.len() {
            return Err(Error::invalid(format!(
                "batch size {} exceeds the {} training samples",
                self.optim.batch_size,
                samples.len()
            )));
        }
        if let Some(s) = samples.iter().find(|s| s.targets.is_empty()) {
            return Err(Error::invalid(format!("sample '{}' has no target", s.id)));
        }
        let mut order: Vec<usize> = (0..samples.len()).collect();
        for _ in 0..epochs {
            order.sort_unstable();
            order.shuffle(&mut self.rng);
            let mut epoch_loss = 0.0;
            let mut batch_trace = Vec::new();
            for (bi, chunk) in order.chunks(self.optim.batch_size).enumerate() {
                let images: Vec<&Image<f32>> = chunk.iter().map(|&i| samples[i].image).collect();
                let batch = batch_tensor(&images)?;
                let (probs, cache) = forward_train(&mut self.params, &batch)?;
                let maps = probs_as_maps(&probs)?;
                let mut dprobs = probs.same_shape();
                let scale = 1.0 / chunk.len() as f64;
                let mut batch_loss = 0.0;
                for (b, (&i, map)) in chunk.iter().zip(&maps).enumerate() {
                    let s = &samples[i];
                    if let Some(h) = hook.as_deref_mut() {
                        h(s.id, map)?;
                    }
                    let (loss, grad) = fusion_loss_and_gradient(&map.cast::<f64>(), &s.targets, &self.optim.loss)?;
                    batch_loss += loss * scale;
                    for (d, g) in dprobs.sample_mut(b).iter_mut().zip(grad) {
                        *d = (g * scale) as f32;
                    }
                }
                batch_trace.push(batch_loss);
                if !batch_loss.is_finite() {
                    return Err(Error::NonFiniteLoss {
                        epoch: self.epoch,
                        batch: bi,
                        trace: batch_trace,
                    });
                }
                // parameters before the running-stat update drive the backward pass identically
                let grads = backward_from(&self.params, &cache, &dprobs)?;
                self.adam.apply(&mut self.params, &grads, &self.optim);
                epoch_loss += batch_loss * chunk.len() as f64;
            }
            self.loss_trace.push(epoch_loss / samples.len() as f64);
            self.epoch += 1;
            log::debug!("epoch {} loss {:.5}", self.epoch, epoch_loss / samples.len() as f64);
        }
        Ok(())
    }
}

/// Trains a copy of `params` and returns it.
pub fn train_epochs(
    params: &NetParams,
    samples: &[TrainSample<'_>],
    optim: &OptimConfig,
    epochs: usize,
    shuffle_seed: u64,
    hook: Option<&mut EpochHook<'_>>,
) -> Result<NetParams> {
    let mut trainer = Trainer::new(params.clone(), optim.clone(), shuffle_seed)?;
    trainer.run(samples, epochs, hook)?;
    Ok(trainer.params)
}

/// Mean inference-mode loss over samples.
pub fn loss_on(params: &NetParams, samples: &[TrainSample<'_>], cfg: &LossConfig) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut total = 0.0;
    for s in samples {
        let map = forward(params, s.image)?;
        total += fusion_loss(&map.cast::<f64>(), &s.targets, cfg)?;
    }
    Ok(total / samples.len() as f64)
}
