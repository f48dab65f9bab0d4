use std::path::{Path, PathBuf};

use djscc_tensor::{checkpoint, Graph, NodeId, Padding, ParamId, ParamStore, Scalar, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::condition::{ConditionRanges, ConditionSpec};
use super::config::{derive_channel_count, ChannelCount, ModelConfig};
use crate::error::{config, Error, Result};

/// Floor on the pre-normalization symbol norm.
const NORM_FLOOR: f64 = 1e-12;
const PRELU_INIT: f64 = 0.25;

/// Complex symbols for a batch, stored `[B, 2k]` with (re, im) pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SymbolVector<T = f32> {
    pub data: Tensor<T>,
}

impl<T: Scalar> SymbolVector<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() != 2 || !data.shape()[1].is_multiple_of(2) || data.shape()[1] == 0 {
            return Err(config(format!("symbol tensor must be [B, 2k], got {:?}", data.shape())));
        }
        Ok(Self { data })
    }

    pub fn from_complex(rows: &[Vec<Complex64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != k) {
            return Err(config("symbol rows differ in length"));
        }
        let data = rows.iter().flatten().flat_map(|z| [T::from_f64(z.re), T::from_f64(z.im)]).collect();
        Self::new(Tensor::new([rows.len(), 2 * k], data)?)
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[0]
    }

    /// Complex symbols per item.
    pub fn k(&self) -> usize {
        self.data.shape()[1] / 2
    }

    pub fn to_complex(&self, item: usize) -> Vec<Complex64> {
        let row = &self.data.data()[item * 2 * self.k()..(item + 1) * 2 * self.k()];
        row.chunks(2).map(|p| Complex64::new(p[0].as_f64(), p[1].as_f64())).collect()
    }

    /// `(1/k) Σ |z_i|²` for one item.
    pub fn average_power(&self, item: usize) -> f64 {
        self.to_complex(item).iter().map(|z| z.norm_sqr()).sum::<f64>() / self.k() as f64
    }
}

/// `z = sqrt(kP) · z̃ / max(‖z̃‖, 1e-12)` per batch item of a `[B, 2k]` node.
pub fn power_normalize<T: Scalar>(g: &mut Graph<T>, symbols: NodeId, power: f64) -> Result<NodeId> {
    let shape = g.value(symbols).shape().to_vec();
    if shape.len() != 2 || !shape[1].is_multiple_of(2) {
        return Err(config(format!("symbol tensor must be [B, 2k], got {shape:?}")));
    }
    let k = (shape[1] / 2) as f64;
    Ok(g.row_normalize(symbols, T::from_f64((k * power).sqrt()), T::from_f64(NORM_FLOOR))?)
}

/// `ẑ = z·h + n` on paired-real symbol tensors.
pub fn apply_channel<T: Scalar>(g: &mut Graph<T>, z: NodeId, h: NodeId, n: NodeId) -> Result<NodeId> {
    let faded = g.complex_mul(z, h)?;
    Ok(g.add(faded, n)?)
}

/// Per-module parameter count of an attention block over `features` channels.
pub fn attention_param_count(features: usize, hidden: usize) -> usize {
    (features + 4) * hidden + hidden + hidden * features + features
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionSwitch {
    Active,
    /// Skip every attention module, equivalent to forcing all scales to 1.
    Bypass,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    stride: usize,
    transpose: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ResBlock {
    conv1: ConvLayer,
    act1: ParamId,
    conv2: ConvLayer,
    skip: Option<ConvLayer>,
    act2: ParamId,
}

/// Parameter handles of one attention module.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionModule {
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

/// Parameter layout of a network: which stored tensors play which role.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    config: ModelConfig,
    channels: ChannelCount,
    enc_blocks: Vec<ResBlock>,
    enc_attention: Vec<AttentionModule>,
    enc_out: ConvLayer,
    dec_in: ConvLayer,
    dec_in_act: ParamId,
    dec_blocks: Vec<ResBlock>,
    dec_attention: Vec<AttentionModule>,
    dec_out: ConvLayer,
}

struct Builder<'a, R> {
    store: ParamStore<f32>,
    rng: &'a mut R,
    kernel: [usize; 2],
}

impl<R: Rng> Builder<'_, R> {
    fn add(&mut self, name: String, t: Tensor<f32>) -> Result<ParamId> {
        Ok(self.store.add(name, t)?)
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, size: [usize; 2], stride: usize, transpose: bool) -> Result<ConvLayer> {
        let [kh, kw] = size;
        let bound = (6.0 / ((kh * kw) as f64 * (cin + cout) as f64)).sqrt();
        let shape = if transpose { [kh, kw, cout, cin] } else { [kh, kw, cin, cout] };
        let init = Tensor::uniform(shape, bound, self.rng);
        let kernel = self.add(format!("{name}.kernel"), init)?;
        let bias = self.add(format!("{name}.bias"), Tensor::zeros([cout]))?;
        Ok(ConvLayer { kernel, bias, stride, transpose })
    }

    fn prelu(&mut self, name: &str, channels: usize) -> Result<ParamId> {
        self.add(format!("{name}.slope"), Tensor::full([channels], PRELU_INIT as f32))
    }

    fn block(&mut self, name: &str, cin: usize, cout: usize, stride: usize, transpose: bool) -> Result<ResBlock> {
        let k = self.kernel;
        let conv1 = self.conv(&format!("{name}.conv1"), cin, cout, k, stride, transpose)?;
        let act1 = self.prelu(&format!("{name}.prelu1"), cout)?;
        let conv2 = self.conv(&format!("{name}.conv2"), cout, cout, k, 1, transpose)?;
        let skip = if stride != 1 || cin != cout {
            Some(self.conv(&format!("{name}.skip"), cin, cout, [1, 1], stride, transpose)?)
        } else {
            None
        };
        let act2 = self.prelu(&format!("{name}.prelu2"), cout)?;
        Ok(ResBlock { conv1, act1, conv2, skip, act2 })
    }

    fn attention(&mut self, name: &str, features: usize, hidden: usize) -> Result<AttentionModule> {
        let dense = |b: &mut Self, n: String, fin: usize, fout: usize| {
            let bound = (6.0 / (fin + fout) as f64).sqrt();
            let init = Tensor::uniform([fin, fout], bound, b.rng);
            b.add(n, init)
        };
        let fc1_weight = dense(self, format!("{name}.fc1.weight"), features + 4, hidden)?;
        let fc1_bias = self.add(format!("{name}.fc1.bias"), Tensor::zeros([hidden]))?;
        let fc2_weight = dense(self, format!("{name}.fc2.weight"), hidden, features)?;
        let fc2_bias = self.add(format!("{name}.fc2.bias"), Tensor::zeros([features]))?;
        Ok(AttentionModule { fc1_weight, fc1_bias, fc2_weight, fc2_bias })
    }
}

fn conv_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, layer: &ConvLayer, x: NodeId) -> Result<NodeId> {
    let k = g.param(store, layer.kernel)?;
    let b = g.param(store, layer.bias)?;
    let y = if layer.transpose {
        g.conv2d_transpose(x, k, layer.stride, Padding::Same)?
    } else {
        g.conv2d(x, k, layer.stride, Padding::Same)?
    };
    Ok(g.bias_add(y, b)?)
}

fn prelu_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, slope: ParamId, x: NodeId) -> Result<NodeId> {
    let a = g.param(store, slope)?;
    Ok(g.prelu(x, a)?)
}

fn block_forward<T: Scalar>(g: &mut Graph<T>, store: &ParamStore<T>, block: &ResBlock, x: NodeId) -> Result<NodeId> {
    let y = conv_forward(g, store, &block.conv1, x)?;
    let y = prelu_forward(g, store, block.act1, y)?;
    let y = conv_forward(g, store, &block.conv2, y)?;
    let skip = match &block.skip {
        Some(layer) => conv_forward(g, store, layer, x)?,
        None => x,
    };
    let y = g.add(y, skip)?;
    prelu_forward(g, store, block.act2, y)
}

/// Rescale each feature channel by a sigmoid gate computed from pooled
/// features and the normalized condition vector `condition[B, 4]`.
pub fn attention_forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    module: &AttentionModule,
    features: NodeId,
    condition: NodeId,
) -> Result<NodeId> {
    let pooled = g.global_avg_pool(features)?;
    let input = g.concat(pooled, condition)?;
    let (w1, b1) = (g.param(store, module.fc1_weight)?, g.param(store, module.fc1_bias)?);
    let hidden = g.dense(input, w1, b1)?;
    let hidden = g.relu(hidden)?;
    let (w2, b2) = (g.param(store, module.fc2_weight)?, g.param(store, module.fc2_bias)?);
    let logits = g.dense(hidden, w2, b2)?;
    let scales = g.sigmoid(logits)?;
    Ok(g.channel_mul(features, scales)?)
}

impl Architecture {
    /// Lay out and randomly initialize every parameter for `config`.
    pub fn build<R: Rng>(config: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<f32>)> {
        let channels = derive_channel_count(config)?;
        let f = config.filters_per_block;
        let bands = config.input_shape[2];
        let mut b = Builder { store: ParamStore::new(), rng, kernel: config.kernel };

        let mut enc_blocks = Vec::new();
        let mut enc_attention = Vec::new();
        for (i, &s) in config.block_strides.iter().enumerate() {
            let cin = if i == 0 { bands } else { f };
            enc_blocks.push(b.block(&format!("enc.block{i}"), cin, f, s, false)?);
            if config.attention_enabled {
                enc_attention.push(b.attention(&format!("enc.att{i}"), f, config.attention_hidden)?);
            }
        }
        let enc_out = b.conv("enc.out", f, channels.c, config.kernel, 1, false)?;

        let dec_in = b.conv("dec.in", channels.c, f, config.kernel, 1, true)?;
        let dec_in_act = b.prelu("dec.in.prelu", f)?;
        let mut dec_blocks = Vec::new();
        let mut dec_attention = Vec::new();
        for (i, &s) in config.block_strides.iter().rev().enumerate() {
            dec_blocks.push(b.block(&format!("dec.block{i}"), f, f, s, true)?);
            if config.attention_enabled {
                dec_attention.push(b.attention(&format!("dec.att{i}"), f, config.attention_hidden)?);
            }
        }
        let dec_out = b.conv("dec.out", f, bands, config.kernel, 1, true)?;

        let arch = Self {
            config: config.clone(),
            channels,
            enc_blocks,
            enc_attention,
            enc_out,
            dec_in,
            dec_in_act,
            dec_blocks,
            dec_attention,
            dec_out,
        };
        Ok((arch, b.store))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn channels(&self) -> &ChannelCount {
        &self.channels
    }

    pub fn attention_modules(&self) -> impl Iterator<Item = &AttentionModule> {
        self.enc_attention.iter().chain(&self.dec_attention)
    }

    fn check_condition(&self, condition: Option<NodeId>, switch: AttentionSwitch) -> Result<Option<NodeId>> {
        if !self.config.attention_enabled || switch == AttentionSwitch::Bypass {
            return Ok(None);
        }
        condition.map(Some).ok_or_else(|| config("attention is enabled but no channel condition was supplied"))
    }

    /// Image `[B,H,W,bands]` to power-normalized symbols `[B, 2k]`.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        image: NodeId,
        condition: Option<NodeId>,
        switch: AttentionSwitch,
    ) -> Result<NodeId> {
        let [h, w, bands] = self.config.input_shape;
        let shape = g.value(image).shape().to_vec();
        if shape.len() != 4 || shape[1..] != [h, w, bands] {
            return Err(config(format!("image batch must be [B, {h}, {w}, {bands}], got {shape:?}")));
        }
        let cond = self.check_condition(condition, switch)?;
        let mut x = image;
        for (i, block) in self.enc_blocks.iter().enumerate() {
            x = block_forward(g, store, block, x)?;
            if let (Some(c), Some(m)) = (cond, self.enc_attention.get(i)) {
                x = attention_forward(g, store, m, x, c)?;
            }
        }
        let x = conv_forward(g, store, &self.enc_out, x)?;
        let flat = g.reshape(x, &[shape[0], 2 * self.channels.k])?;
        power_normalize(g, flat, self.config.power_constraint)
    }

    /// Received symbols `[B, 2k]` to a reconstruction `[B,H,W,bands]` in (0,1).
    pub fn decode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        symbols: NodeId,
        condition: Option<NodeId>,
        switch: AttentionSwitch,
    ) -> Result<NodeId> {
        let shape = g.value(symbols).shape().to_vec();
        if shape.len() != 2 || shape[1] != 2 * self.channels.k {
            return Err(config(format!("symbols must be [B, {}], got {shape:?}", 2 * self.channels.k)));
        }
        let cond = self.check_condition(condition, switch)?;
        let [bh, bw] = self.channels.bottleneck;
        let x = g.reshape(symbols, &[shape[0], bh, bw, self.channels.c])?;
        let x = conv_forward(g, store, &self.dec_in, x)?;
        let mut x = prelu_forward(g, store, self.dec_in_act, x)?;
        for (i, block) in self.dec_blocks.iter().enumerate() {
            x = block_forward(g, store, block, x)?;
            if let (Some(c), Some(m)) = (cond, self.dec_attention.get(i)) {
                x = attention_forward(g, store, m, x, c)?;
            }
        }
        let x = conv_forward(g, store, &self.dec_out, x)?;
        Ok(g.sigmoid(x)?)
    }
}

/// Sidecar document stored next to a checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    model: ModelConfig,
    condition_ranges: ConditionRanges,
}

/// An architecture together with its trained weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    arch: Architecture,
    params: ParamStore<f32>,
    ranges: ConditionRanges,
}

impl Network {
    pub fn new(config: &ModelConfig, ranges: ConditionRanges, seed: u64) -> Result<Self> {
        ranges.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (arch, params) = Architecture::build(config, &mut rng)?;
        Ok(Self { arch, params, ranges })
    }

    /// Attach existing weights to the layout for `config`. Every expected
    /// parameter must be present with the right shape.
    pub fn from_parts(config: &ModelConfig, ranges: ConditionRanges, params: ParamStore<f32>) -> Result<Self> {
        let mut net = Self::new(config, ranges, 0)?;
        net.load_weights(&params)?;
        Ok(net)
    }

    fn load_weights(&mut self, params: &ParamStore<f32>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(config(format!(
                "checkpoint has {} parameters, architecture expects {}",
                params.len(),
                self.params.len()
            )));
        }
        let copied = self.params.copy_matching(params)?;
        if copied != self.params.len() {
            let missing: Vec<_> =
                self.params.iter().map(|p| p.name.as_str()).filter(|n| params.find(n).is_none()).collect();
            return Err(config(format!("checkpoint is missing parameters: {}", missing.join(", "))));
        }
        Ok(())
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn channels(&self) -> &ChannelCount {
        &self.arch.channels
    }

    pub fn ranges(&self) -> &ConditionRanges {
        &self.ranges
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<f32> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn attention_params(&self) -> usize {
        self.arch
            .attention_modules()
            .flat_map(|m| [m.fc1_weight, m.fc1_bias, m.fc2_weight, m.fc2_bias])
            .map(|id| self.params.get(id).numel())
            .sum()
    }

    /// Overwrite parameters shared by name with `other` (e.g. the
    /// non-attention weights of a basic network). Returns how many matched.
    pub fn copy_shared_weights(&mut self, other: &Network) -> Result<usize> {
        Ok(self.params.copy_matching(&other.params)?)
    }

    /// Normalized attention inputs, `[B, 4]`.
    pub fn condition_tensor<T: Scalar>(&self, conditions: &[ConditionSpec]) -> Tensor<T> {
        let data = conditions.iter().flat_map(|c| self.ranges.normalize(c)).map(T::from_f64).collect();
        Tensor::new([conditions.len(), 4], data).expect("four values per condition")
    }

    fn condition_node<T: Scalar>(&self, g: &mut Graph<T>, conditions: &[ConditionSpec], batch: usize) -> Result<Option<NodeId>> {
        if !self.arch.config.attention_enabled {
            return Ok(None);
        }
        if conditions.len() != batch {
            return Err(config(format!("{} conditions supplied for a batch of {batch}", conditions.len())));
        }
        Ok(Some(g.constant(self.condition_tensor(conditions))?))
    }

    pub fn encode(&self, images: &Tensor<f32>, conditions: &[ConditionSpec]) -> Result<SymbolVector> {
        let mut g = Graph::new();
        let x = g.constant(images.clone())?;
        let c = self.condition_node(&mut g, conditions, images.shape().first().copied().unwrap_or(0))?;
        let z = self.arch.encode(&mut g, &self.params, x, c, AttentionSwitch::Active)?;
        SymbolVector::new(g.value(z).clone())
    }

    pub fn decode(&self, symbols: &SymbolVector, conditions: &[ConditionSpec]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let z = g.constant(symbols.data.clone())?;
        let c = self.condition_node(&mut g, conditions, symbols.batch())?;
        let x = self.arch.decode(&mut g, &self.params, z, c, AttentionSwitch::Active)?;
        Ok(g.value(x).clone())
    }

    /// Full encode, channel, decode pass without gradient bookkeeping.
    /// `gains` and `noise` are `[B, 2k]` paired-real tensors.
    pub fn transmit(
        &self,
        images: &Tensor<f32>,
        conditions: &[ConditionSpec],
        gains: &Tensor<f32>,
        noise: &Tensor<f32>,
        switch: AttentionSwitch,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let batch = images.shape().first().copied().unwrap_or(0);
        let x = g.constant(images.clone())?;
        let c = match switch {
            AttentionSwitch::Active => self.condition_node(&mut g, conditions, batch)?,
            AttentionSwitch::Bypass => None,
        };
        let z = self.arch.encode(&mut g, &self.params, x, c, switch)?;
        let h = g.constant(gains.clone())?;
        let n = g.constant(noise.clone())?;
        let r = apply_channel(&mut g, z, h, n)?;
        let y = self.arch.decode(&mut g, &self.params, r, c, switch)?;
        Ok(g.value(y).clone())
    }

    fn sidecar_path(checkpoint: &Path) -> PathBuf {
        checkpoint.with_extension("toml")
    }

    /// Write the weights to `path` and the architecture to `path` with a
    /// `.toml` extension.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        checkpoint::save(&self.params, path)?;
        let sidecar = Sidecar { model: self.arch.config.clone(), condition_ranges: self.ranges };
        let text = toml::to_string(&sidecar).map_err(|e| Error::Config(format!("serializing sidecar: {e}")))?;
        std::fs::write(Self::sidecar_path(path), text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let sidecar_path = Self::sidecar_path(path);
        let text = std::fs::read_to_string(&sidecar_path)?;
        let sidecar: Sidecar =
            toml::from_str(&text).map_err(|e| config(format!("{}: {e}", sidecar_path.display())))?;
        let params = checkpoint::load(path)?;
        Self::from_parts(&sidecar.model, sidecar.condition_ranges, params)
    }

    /// Checkpoint size in bytes.
    pub fn checkpoint_bytes(&self) -> usize {
        checkpoint::encoded_len(&self.params)
    }
}
