//! Residual-block encoder–decoder for voxelwise tumor probability.
//!
//! Encoder level 0 starts with a stem convolution; every deeper level opens
//! with a stride-2 convolution that halves the grid. Each decoder level
//! upsamples with a stride-2 transposed convolution, concatenates the
//! encoder skip of the same level, and runs its residual blocks. Blocks are
//! pre-activation (norm, relu, conv, twice). The output is a final norm and
//! relu, then a 1×1×1 convolution and a sigmoid.

mod inference;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use inference::{threshold_mask, tiled_probabilities, ProbabilityModel, Tiling};

use crate::error::{Error, Result};
use crate::tensor::{
    add, concat_channels, conv3d, conv_transpose3d, instance_norm, relu, sigmoid, Adam, Checkpoint,
    Parameter, Real, Tensor,
};

const NORM_EPS: Real = 1e-5;
const CONFIG_KEY: &str = "network_config";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub channel_cap: usize,
    pub levels: usize,
    pub blocks_per_level: Vec<usize>,
    pub kernel_size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 16,
            channel_cap: 128,
            levels: 4,
            blocks_per_level: vec![1, 2, 2, 4],
            kernel_size: 3,
            in_channels: 1,
            out_channels: 1,
        }
    }
}

impl NetworkConfig {
    /// Base 8, three levels, blocks (1, 2, 2).
    pub fn desk() -> Self {
        NetworkConfig {
            base_channels: 8,
            levels: 3,
            blocks_per_level: vec![1, 2, 2],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0
            || self.base_channels == 0
            || self.in_channels == 0
            || self.out_channels == 0
        {
            return Err(Error::invalid("levels and channel counts must be positive"));
        }
        if self.blocks_per_level.len() != self.levels {
            return Err(Error::invalid(format!(
                "blocks_per_level has {} entries for {} levels",
                self.blocks_per_level.len(),
                self.levels
            )));
        }
        if self.blocks_per_level.contains(&0) {
            return Err(Error::invalid(
                "every level needs at least one residual block",
            ));
        }
        if self.channel_cap < self.base_channels {
            return Err(Error::invalid(format!(
                "channel_cap ({}) is below base_channels ({})",
                self.channel_cap, self.base_channels
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "kernel_size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    /// Spatial extents must be multiples of this.
    pub fn downsampling_factor(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn param_count(&self) -> Result<usize> {
        Ok(layout(self)?
            .specs
            .iter()
            .map(|s| s.shape.iter().product::<usize>())
            .sum())
    }
}

pub fn channels_at_level(base: usize, level: usize, cap: usize) -> usize {
    let factor = u32::try_from(level)
        .ok()
        .and_then(|l| 1usize.checked_shl(l))
        .unwrap_or(usize::MAX);
    base.saturating_mul(factor).min(cap)
}

#[derive(Debug, Clone, Copy)]
enum Init {
    He { fan_in: usize },
    Const(Real),
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

#[derive(Debug, Clone, Copy)]
struct ConvRef {
    weight: usize,
    bias: usize,
    stride: usize,
    padding: usize,
    transposed: bool,
}

#[derive(Debug, Clone, Copy)]
struct NormRef {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct Block {
    norm1: NormRef,
    conv1: ConvRef,
    norm2: NormRef,
    conv2: ConvRef,
    projection: Option<ConvRef>,
}

#[derive(Debug, Clone)]
struct Level {
    channels: usize,
    /// Stem, stride-2 down conv, or transposed up conv.
    entry: ConvRef,
    blocks: Vec<Block>,
}

struct Layout {
    specs: Vec<ParamSpec>,
    encoder: Vec<Level>,
    /// Deepest-first; `decoder[i]` reconstructs encoder level `levels - 2 - i`.
    decoder: Vec<Level>,
    head_norm: NormRef,
    head: ConvRef,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    k: usize,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, stride: usize) -> ConvRef {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![cout, cin, k, k, k],
            Init::He {
                fan_in: cin * k * k * k,
            },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![cout], Init::Const(0.0));
        ConvRef {
            weight,
            bias,
            stride,
            padding: k / 2,
            transposed: false,
        }
    }

    fn up(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvRef {
        // each output voxel receives exactly one tap per input channel
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![cin, cout, 2, 2, 2],
            Init::He { fan_in: cin },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![cout], Init::Const(0.0));
        ConvRef {
            weight,
            bias,
            stride: 2,
            padding: 0,
            transposed: true,
        }
    }

    fn norm(&mut self, prefix: &str, c: usize) -> NormRef {
        NormRef {
            gamma: self.push(format!("{prefix}.gamma"), vec![c], Init::Const(1.0)),
            beta: self.push(format!("{prefix}.beta"), vec![c], Init::Const(0.0)),
        }
    }

    fn block(&mut self, prefix: &str, cin: usize, cout: usize) -> Block {
        let k = self.k;
        Block {
            norm1: self.norm(&format!("{prefix}.norm1"), cin),
            conv1: self.conv(&format!("{prefix}.conv1"), cin, cout, k, 1),
            norm2: self.norm(&format!("{prefix}.norm2"), cout),
            conv2: self.conv(&format!("{prefix}.conv2"), cout, cout, k, 1),
            projection: (cin != cout)
                .then(|| self.conv(&format!("{prefix}.proj"), cin, cout, 1, 1)),
        }
    }
}

fn layout(config: &NetworkConfig) -> Result<Layout> {
    config.validate()?;
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        k: config.kernel_size,
    };
    let ch = |l| channels_at_level(config.base_channels, l, config.channel_cap);
    let k = config.kernel_size;

    let mut encoder = Vec::with_capacity(config.levels);
    for l in 0..config.levels {
        let c = ch(l);
        let entry = if l == 0 {
            b.conv("enc.level0.stem", config.in_channels, c, k, 1)
        } else {
            b.conv(&format!("enc.level{l}.down"), ch(l - 1), c, k, 2)
        };
        let blocks = (0..config.blocks_per_level[l])
            .map(|i| b.block(&format!("enc.level{l}.block{i}"), c, c))
            .collect();
        encoder.push(Level {
            channels: c,
            entry,
            blocks,
        });
    }

    let mut decoder = Vec::with_capacity(config.levels - 1);
    for l in (0..config.levels - 1).rev() {
        let c = ch(l);
        let entry = b.up(&format!("dec.level{l}.up"), ch(l + 1), c);
        let blocks = (0..config.blocks_per_level[l])
            .map(|i| {
                let cin = if i == 0 { 2 * c } else { c };
                b.block(&format!("dec.level{l}.block{i}"), cin, c)
            })
            .collect();
        decoder.push(Level {
            channels: c,
            entry,
            blocks,
        });
    }

    // final norm and relu ahead of the output conv
    let head_norm = b.norm("head.norm", ch(0));
    let head = b.conv("head", ch(0), config.out_channels, 1, 1);
    Ok(Layout {
        specs: b.specs,
        encoder,
        decoder,
        head_norm,
        head,
    })
}

/// A built network: its configuration, named parameters and wiring.
pub struct Network {
    config: NetworkConfig,
    params: Vec<Parameter>,
    encoder: Vec<Level>,
    decoder: Vec<Level>,
    head_norm: NormRef,
    head: ConvRef,
}

impl std::fmt::Debug for Network {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Network")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl Clone for Network {
    /// Deep copy with fresh, gradient-free parameter tensors.
    fn clone(&self) -> Self {
        let params = self
            .params
            .iter()
            .map(|p| Parameter {
                name: p.name.clone(),
                tensor: Tensor::parameter(p.tensor.shape(), p.tensor.values().to_vec())
                    .expect("shape already validated"),
                trainable: p.trainable,
            })
            .collect();
        Network {
            config: self.config.clone(),
            params,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            head_norm: self.head_norm,
            head: self.head,
        }
    }
}

/// He-normal weights, zero biases, unit norm scales; deterministic in `seed`.
pub fn build_network(config: &NetworkConfig, seed: u64) -> Result<Network> {
    let Layout {
        specs,
        encoder,
        decoder,
        head_norm,
        head,
    } = layout(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = specs
        .into_iter()
        .map(|s| {
            let n: usize = s.shape.iter().product();
            let data = match s.init {
                Init::Const(v) => vec![v; n],
                Init::He { fan_in } => {
                    let normal =
                        Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng) as Real).collect()
                }
            };
            Parameter::new(s.name, &s.shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Network {
        config: config.clone(),
        params,
        encoder,
        decoder,
        head_norm,
        head,
    })
}

impl Network {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&self) {
        self.params.iter().for_each(Parameter::zero_grad);
    }

    /// Output channels of each encoder level, shallowest first.
    pub fn encoder_channels(&self) -> Vec<usize> {
        self.encoder.iter().map(|l| l.channels).collect()
    }

    /// Output channels of each transposed convolution, deepest first.
    pub fn decoder_channels(&self) -> Vec<usize> {
        self.decoder.iter().map(|l| l.channels).collect()
    }

    pub fn encoder_blocks(&self) -> Vec<usize> {
        self.encoder.iter().map(|l| l.blocks.len()).collect()
    }

    pub fn decoder_blocks(&self) -> Vec<usize> {
        self.decoder.iter().map(|l| l.blocks.len()).collect()
    }

    pub fn downsampling_count(&self) -> usize {
        self.encoder.len() - 1
    }

    pub fn upsampling_count(&self) -> usize {
        self.decoder.len()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 || shape[1] != self.config.in_channels {
            return Err(Error::shape(format!(
                "network input must be [N, {}, D, H, W], got {shape:?}",
                self.config.in_channels
            )));
        }
        let m = self.config.downsampling_factor();
        if shape[2..].iter().any(|&d| d % m != 0) {
            return Err(Error::shape(format!(
                "spatial dims {:?} must each be a multiple of {m} for {} levels",
                &shape[2..],
                self.config.levels
            )));
        }
        Ok(())
    }

    /// Probabilities with the same shape as `input`, tracked for backward.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let tensors: Vec<Tensor> = self.params.iter().map(|p| p.tensor.clone()).collect();
        self.forward_with(&tensors, input)
    }

    /// Untracked forward pass for inference.
    pub fn forward_frozen(&self, input: &Tensor) -> Result<Tensor> {
        let tensors: Vec<Tensor> = self.params.iter().map(|p| p.tensor.detach()).collect();
        self.forward_with(&tensors, input)
    }

    fn forward_with(&self, p: &[Tensor], input: &Tensor) -> Result<Tensor> {
        self.check_input(input.shape())?;
        let conv = |x: &Tensor, c: &ConvRef| {
            if c.transposed {
                conv_transpose3d(x, &p[c.weight], &p[c.bias], c.stride)
            } else {
                conv3d(x, &p[c.weight], &p[c.bias], c.stride, c.padding)
            }
        };
        let block = |x: &Tensor, b: &Block| -> Result<Tensor> {
            let h = relu(&instance_norm(
                x,
                &p[b.norm1.gamma],
                &p[b.norm1.beta],
                NORM_EPS,
            )?);
            let h = conv(&h, &b.conv1)?;
            let h = relu(&instance_norm(
                &h,
                &p[b.norm2.gamma],
                &p[b.norm2.beta],
                NORM_EPS,
            )?);
            let h = conv(&h, &b.conv2)?;
            let shortcut = match &b.projection {
                Some(c) => conv(x, c)?,
                None => x.clone(),
            };
            add(&h, &shortcut)
        };

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut x = input.clone();
        for level in &self.encoder {
            x = conv(&x, &level.entry)?;
            for b in &level.blocks {
                x = block(&x, b)?;
            }
            skips.push(x.clone());
        }
        skips.pop();
        for level in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder level");
            x = concat_channels(&conv(&x, &level.entry)?, &skip)?;
            for b in &level.blocks {
                x = block(&x, b)?;
            }
        }
        let n = &self.head_norm;
        let x = relu(&instance_norm(&x, &p[n.gamma], &p[n.beta], NORM_EPS)?);
        Ok(sigmoid(&conv(&x, &self.head)?))
    }

    /// Checkpoint carrying the configuration for reconstruction.
    pub fn to_checkpoint(
        &self,
        optimizer: Option<&Adam>,
        metadata: BTreeMap<String, String>,
    ) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::new(self.clone().params);
        ckpt.metadata = metadata;
        ckpt.metadata
            .insert(CONFIG_KEY.into(), serde_json::to_string(&self.config)?);
        ckpt.optimizer = optimizer.cloned();
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Network> {
        let text = ckpt
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::format("checkpoint carries no network configuration"))?;
        let config: NetworkConfig = serde_json::from_str(text)?;
        let mut net = build_network(&config, 0)?;
        let stored: HashMap<&str, &Parameter> =
            ckpt.params.iter().map(|p| (p.name.as_str(), p)).collect();
        if stored.len() != net.params.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} parameters, configuration needs {}",
                stored.len(),
                net.params.len()
            )));
        }
        for p in &mut net.params {
            let s = stored
                .get(p.name.as_str())
                .ok_or_else(|| Error::format(format!("checkpoint lacks parameter {}", p.name)))?;
            if s.tensor.shape() != p.tensor.shape() {
                return Err(Error::format(format!(
                    "parameter {} has shape {:?} in the checkpoint, expected {:?}",
                    p.name,
                    s.tensor.shape(),
                    p.tensor.shape()
                )));
            }
            p.tensor = Tensor::parameter(s.tensor.shape(), s.tensor.values().to_vec())?;
            p.trainable = s.trainable;
        }
        Ok(net)
    }

    pub fn save(
        &self,
        path: &Path,
        optimizer: Option<&Adam>,
        metadata: BTreeMap<String, String>,
    ) -> Result<()> {
        self.to_checkpoint(optimizer, metadata)?.save(path)
    }

    pub fn load(path: &Path) -> Result<(Network, Checkpoint)> {
        let ckpt = Checkpoint::load(path)?;
        Ok((Network::from_checkpoint(&ckpt)?, ckpt))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            base_channels: 2,
            channel_cap: 4,
            levels: 3,
            blocks_per_level: vec![1, 1, 2],
            ..Default::default()
        }
    }

    #[test]
    fn channel_schedule() {
        let got: Vec<_> = (0..5).map(|l| channels_at_level(16, l, 128)).collect();
        assert_eq!(got, vec![16, 32, 64, 128, 128]);
        assert_eq!(channels_at_level(8, 10, 128), 128);
        assert_eq!(channels_at_level(24, 0, 128), 24);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny();
        c.blocks_per_level.pop();
        assert!(build_network(&c, 0).is_err());
        let c = NetworkConfig {
            channel_cap: 1,
            ..tiny()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_unique_and_count_consistent() {
        let net = build_network(&tiny(), 3).unwrap();
        let mut names: Vec<_> = net.params().iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), net.params().len());
        assert_eq!(net.param_count(), tiny().param_count().unwrap());
    }

    #[test]
    fn single_level_has_no_resampling() {
        let c = NetworkConfig {
            levels: 1,
            blocks_per_level: vec![2],
            base_channels: 2,
            ..Default::default()
        };
        let net = build_network(&c, 0).unwrap();
        assert_eq!((net.downsampling_count(), net.upsampling_count()), (0, 0));
        let x = Tensor::full(&[1, 1, 3, 5, 7], 0.3).unwrap();
        assert_eq!(net.forward(&x).unwrap().shape(), &[1, 1, 3, 5, 7]);
    }

    #[test]
    fn indivisible_input_names_multiple() {
        let net = build_network(&tiny(), 0).unwrap();
        let x = Tensor::zeros(&[1, 1, 4, 6, 8]).unwrap();
        let err = net.forward(&x).unwrap_err().to_string();
        assert!(err.contains("multiple of 4"), "{err}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = build_network(&tiny(), 5).unwrap();
        let ckpt = net.to_checkpoint(None, BTreeMap::new()).unwrap();
        let mut buf = Vec::new();
        ckpt.write_to(&mut buf).unwrap();
        let back =
            Network::from_checkpoint(&Checkpoint::read_from(&mut &buf[..]).unwrap()).unwrap();
        assert_eq!(back.config(), net.config());
        for (a, b) in back.params().iter().zip(net.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.tensor.values(), b.tensor.values());
        }
    }
}
