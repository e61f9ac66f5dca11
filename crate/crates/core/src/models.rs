//! The centroid network, the instance (hypernetwork) network and the
//! transpose-convolution decoders used for the bottleneck comparison.
//!
//! Both CNNs share one trunk: eight 3×3 convolutions with widths
//! 32,32,32,32,64,64,64,64 (dilation 2 from the third on), a dropout after
//! every odd convolution and three 2×2 max-poolings, followed by two 64-wide
//! 1×1 convolutions. The centroid head is a single ReLU 1×1 convolution
//! (166,305 parameters in total); the instance head is a 257-wide linear 1×1
//! convolution whose center vector feeds the fixed mask decoder (182,945).

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{Activation, CoordinateGrid, DecoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, CoordDecoder, Dense, Layer, Network, TransposeConv2x2};
use crate::tensor::Real;

/// Side of a preprocessed tile.
pub const TILE_SIZE: usize = 256;
/// Side of an instance patch and of a decoded mask.
pub const PATCH_SIZE: usize = 64;
/// Side of the centroid grid.
pub const GRID_SIZE: usize = 32;
/// Tile pixels per centroid grid cell.
pub const CELL_STRIDE: usize = TILE_SIZE / GRID_SIZE;

pub const CENTROID_PARAMS: usize = 166_305;
pub const INSTANCE_PARAMS: usize = 182_945;

pub const ARCH_CENTROID: &str = "centroid";
pub const ARCH_INSTANCE: &str = "instance";
const ARCH_TCONV_PREFIX: &str = "instance-tconv-";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub seed: u64,
    pub dropout: f32,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self { seed: 0, dropout: 0.25 }
    }
}

/// Which decoder turns the trunk's center vector into a mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DecoderKind {
    /// The fixed 257-parameter coordinate perceptron.
    Vec2Instance,
    /// Learnable upsampling decoder; the whole model has roughly `budget`
    /// parameters.
    TransposeConv { budget: usize },
}

impl DecoderKind {
    pub fn arch_id(&self) -> String {
        match self {
            DecoderKind::Vec2Instance => ARCH_INSTANCE.into(),
            DecoderKind::TransposeConv { budget } => format!("{ARCH_TCONV_PREFIX}{budget}"),
        }
    }
}

fn conv<T: Real>(cin: usize, cout: usize, k: usize, dilation: usize, act: Activation) -> Layer<T> {
    Layer::Conv2d(Conv2d::new(cin, cout, k, dilation, act))
}

/// Shared feature extractor, 166,240 parameters, spatial stride 8.
fn trunk<T: Real>(dropout: f32) -> Vec<Layer<T>> {
    use Activation::Relu;
    vec![
        conv(3, 32, 3, 1, Relu),
        Layer::Dropout(dropout),
        conv(32, 32, 3, 1, Relu),
        Layer::MaxPool2,
        conv(32, 32, 3, 2, Relu),
        Layer::Dropout(dropout),
        conv(32, 32, 3, 2, Relu),
        Layer::MaxPool2,
        conv(32, 64, 3, 2, Relu),
        Layer::Dropout(dropout),
        conv(64, 64, 3, 2, Relu),
        Layer::MaxPool2,
        conv(64, 64, 3, 2, Relu),
        Layer::Dropout(dropout),
        conv(64, 64, 3, 2, Relu),
        conv(64, 64, 1, 1, Relu),
        conv(64, 64, 1, 1, Relu),
    ]
}

fn initialized<T: Real>(mut net: Network<T>, seed: u64) -> Network<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.init_uniform(&mut rng);
    net
}

/// 256×256×3 tile → 32×32×1 centroid activation map.
pub fn build_centroid_net<T: Real>(cfg: &NetConfig) -> Network<T> {
    let mut layers = trunk(cfg.dropout);
    layers.push(conv(64, 1, 1, 1, Activation::Relu));
    initialized(Network::new(ARCH_CENTROID, (TILE_SIZE, TILE_SIZE, 3), layers), cfg.seed)
}

/// Trunk plus the 257-wide linear head; emits an 8×8×257 parameter map.
/// The head bias starts at [`base_decoder`].
pub fn build_instance_trunk<T: Real>(cfg: &NetConfig) -> Network<T> {
    let mut layers = trunk(cfg.dropout);
    layers.push(conv(64, DecoderConfig::MASK.param_count(), 1, 1, Activation::Linear));
    let mut net = initialized(Network::new(ARCH_INSTANCE, (PATCH_SIZE, PATCH_SIZE, 3), layers), cfg.seed);
    if let Some(Layer::Conv2d(head)) = net.layers.last_mut() {
        head.bias = base_decoder(&DecoderConfig::MASK, cfg.seed);
    }
    net
}

/// End-to-end instance model: 64×64×3 patch → 64×64×1 mask through the
/// center parameter vector and the fixed decoder.
pub fn build_instance_net<T: Real>(cfg: &NetConfig) -> Network<T> {
    let mut net = build_instance_trunk(cfg);
    net.layers.push(Layer::CenterVector);
    net.layers.push(Layer::Decoder(CoordDecoder {
        config: DecoderConfig::MASK,
        grid: CoordinateGrid::new(PATCH_SIZE),
    }));
    Network::new(ARCH_INSTANCE, net.input_shape, net.layers)
}

/// Parameter vector of a freshly initialized mask decoder, used as the bias
/// of the 257-wide head so that the bottleneck vector is not near zero at
/// the first step. Each layer draws from `±1/sqrt(fan_in)`.
pub fn base_decoder<T: Real>(cfg: &DecoderConfig, seed: u64) -> Vec<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let second_layer = (cfg.input_dim + 1) * cfg.hidden_units;
    let first = 1.0 / libm::sqrt(cfg.input_dim as f64);
    let second = 1.0 / libm::sqrt(cfg.hidden_units as f64);
    (0..cfg.param_count())
        .map(|i| {
            let limit = if i < second_layer { first } else { second };
            T::from_f64(rng.gen_range(-limit..limit))
        })
        .collect()
}

const TCONV_MID: usize = 16;
const TCONV_SEED_SIDE: usize = PATCH_SIZE / 8;

fn tconv_param_count(width: usize) -> usize {
    let p = DecoderConfig::MASK.param_count();
    let seed_map = TCONV_SEED_SIDE * TCONV_SEED_SIDE * width;
    (p * seed_map + seed_map)
        + (4 * width * TCONV_MID + TCONV_MID)
        + (4 * TCONV_MID * TCONV_MID + TCONV_MID)
        + (4 * TCONV_MID + 1)
}

/// Learnable decoder from the 257-vector to a 64×64 mask: a dense layer onto
/// an 8×8×`w` seed map, then three stride-2 transpose convolutions
/// (`w`→16→16→1, sigmoid output). `budget` counts the whole instance model,
/// the shared trunk and 257-wide head included; `w` is the smallest width
/// whose total is closest to it. Budgets that cannot be met within ±5% are
/// rejected.
pub fn build_ablation_decoder<T: Real>(budget: usize, seed: u64) -> Result<Network<T>> {
    let total = |w: usize| INSTANCE_PARAMS + tconv_param_count(w);
    let width = (1..=256).min_by_key(|&w| total(w).abs_diff(budget)).expect("non-empty range");
    let count = total(width);
    if count.abs_diff(budget) * 20 > budget {
        return Err(Error::Config(format!(
            "transpose-conv model cannot reach a budget of {budget} parameters (closest {count})"
        )));
    }
    let p = DecoderConfig::MASK.param_count();
    let layers = vec![
        Layer::Dense(Dense::new(p, TCONV_SEED_SIDE, TCONV_SEED_SIDE, width, Activation::Relu)),
        Layer::TransposeConv2x2(TransposeConv2x2::new(width, TCONV_MID, Activation::Relu)),
        Layer::TransposeConv2x2(TransposeConv2x2::new(TCONV_MID, TCONV_MID, Activation::Relu)),
        Layer::TransposeConv2x2(TransposeConv2x2::new(TCONV_MID, 1, Activation::Sigmoid)),
    ];
    let arch = DecoderKind::TransposeConv { budget }.arch_id();
    Ok(initialized(Network::new(arch, (1, 1, p), layers), seed))
}

/// Instance model for either decoder. Both variants share the trunk
/// initialization for a given seed.
pub fn build_instance_model<T: Real>(kind: DecoderKind, cfg: &NetConfig) -> Result<Network<T>> {
    match kind {
        DecoderKind::Vec2Instance => Ok(build_instance_net(cfg)),
        DecoderKind::TransposeConv { budget } => {
            let decoder = build_ablation_decoder::<T>(budget, cfg.seed.wrapping_add(1))?;
            let mut layers = build_instance_trunk::<T>(cfg).layers;
            layers.push(Layer::CenterVector);
            layers.extend(decoder.layers);
            Ok(Network::new(kind.arch_id(), (PATCH_SIZE, PATCH_SIZE, 3), layers))
        }
    }
}

/// Rebuilds an untrained network from its architecture id, for checkpoint
/// loading.
pub fn build_by_arch<T: Real>(arch: &str, cfg: &NetConfig) -> Result<Network<T>> {
    if arch == ARCH_CENTROID {
        return Ok(build_centroid_net(cfg));
    }
    if arch == ARCH_INSTANCE {
        return Ok(build_instance_net(cfg));
    }
    if let Some(budget) = arch.strip_prefix(ARCH_TCONV_PREFIX) {
        let budget = budget
            .parse()
            .map_err(|_| Error::Config(format!("bad decoder budget in architecture `{arch}`")))?;
        return build_instance_model(DecoderKind::TransposeConv { budget }, cfg);
    }
    Err(Error::Config(format!("unknown architecture `{arch}`")))
}

/// Index of the parameter-vector cell on a `side × side` map.
pub fn center_index(side: usize) -> (usize, usize) {
    (side / 2, side / 2)
}
