use djscc_tensor::{AdamState, Graph};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{draw_channel, paired, Fading};
use crate::data::{batch_tensor, MultibandImage};
use crate::error::{config, Error, Result};
use crate::model::{apply_channel, AttentionSwitch, ConditionRanges, ConditionSpec, ModelConfig, Network};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSpec {
    pub model: ModelConfig,
    pub ranges: ConditionRanges,
    /// A single condition trains a per-condition model; several are sampled
    /// uniformly, one per batch.
    pub conditions: Vec<ConditionSpec>,
    pub fading: Fading,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decayed_learning_rate: f64,
    /// First epoch (0-based) that uses `decayed_learning_rate`.
    pub decay_epoch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl TrainSpec {
    pub fn new(model: ModelConfig, conditions: Vec<ConditionSpec>, seed: u64) -> Self {
        Self {
            model,
            ranges: ConditionRanges::default(),
            conditions,
            fading: Fading::Loo,
            batch_size: 32,
            learning_rate: 1e-3,
            decayed_learning_rate: 1e-4,
            decay_epoch: 50,
            epochs: 100,
            seed,
        }
    }

    fn validate(&self, dataset_len: usize) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(config("training needs at least one channel condition"));
        }
        if self.batch_size == 0 || self.batch_size > dataset_len {
            return Err(config(format!(
                "batch size {} must lie in [1, {dataset_len}] (the dataset size)",
                self.batch_size
            )));
        }
        for lr in [self.learning_rate, self.decayed_learning_rate] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(config(format!("learning rates must be positive, got {lr}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainLog {
    /// Mean training loss of each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
}

/// Seed offset separating weight initialization from the data/channel stream.
const INIT_STREAM: u64 = 0x696e_6974;

pub fn train(spec: &TrainSpec, dataset: &[MultibandImage]) -> Result<(Network, TrainLog)> {
    spec.validate(dataset.len())?;
    let mut net = Network::new(&spec.model, spec.ranges, spec.seed ^ INIT_STREAM)?;
    let mut adam = AdamState::new(net.params(), spec.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = net.channels().k;
    let power = spec.model.power_constraint;
    let batches_per_epoch = dataset.len() / spec.batch_size;
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog { epoch_losses: Vec::with_capacity(spec.epochs), steps: 0 };
    let mut g = Graph::new();

    for epoch in 0..spec.epochs {
        if epoch == spec.decay_epoch {
            adam.learning_rate = spec.decayed_learning_rate;
        }
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks_exact(spec.batch_size).take(batches_per_epoch) {
            let cond = spec.conditions[rng.random_range(0..spec.conditions.len())];
            let images: Vec<&MultibandImage> = chunk.iter().map(|&i| &dataset[i]).collect();
            let x = batch_tensor(&images)?;
            let mut gains = Vec::with_capacity(chunk.len());
            let mut noise = Vec::with_capacity(chunk.len());
            for _ in chunk {
                let (h, n) = draw_channel(spec.fading, &cond, power, k, &mut rng)?;
                gains.push(h);
                noise.push(n);
            }

            g.reset();
            let xi = g.constant(x)?;
            let c = if spec.model.attention_enabled {
                Some(g.constant(net.condition_tensor(&vec![cond; chunk.len()]))?)
            } else {
                None
            };
            let arch = net.architecture();
            let z = arch.encode(&mut g, net.params(), xi, c, AttentionSwitch::Active)?;
            let h = g.constant(paired(&gains))?;
            let n = g.constant(paired(&noise))?;
            let r = apply_channel(&mut g, z, h, n)?;
            let y = arch.decode(&mut g, net.params(), r, c, AttentionSwitch::Active)?;
            let loss = g.mse(y, xi)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("training loss became {value} at step {}", log.steps)));
            }
            let grads = g.backward(loss)?.for_params(net.params());
            adam.step(net.params_mut(), &grads)?;
            total += value;
            log.steps += 1;
        }
        log.epoch_losses.push(total / batches_per_epoch as f64);
    }
    Ok((net, log))
}
