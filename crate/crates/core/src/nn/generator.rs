use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::layers::{leaky_relu, sigmoid, BatchNorm, BnTap, ForwardMode, Linear, SpectralConv2d};
use super::module::{join, Module, ParamKind};
use crate::data::{ChannelStats, ImageShape};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorVariant {
    /// Two upsampling stages from `h/4 x w/4` (CIFAR / Tiny-ImageNet layout).
    Shallow,
    /// Four upsampling stages from `h/16 x w/16` (ImageNet layout).
    Deep,
}

impl GeneratorVariant {
    pub fn downsample(&self) -> usize {
        match self {
            GeneratorVariant::Shallow => 4,
            GeneratorVariant::Deep => 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image: ImageShape,
    pub latent_dim: usize,
    /// Channel multiplier applied to the 128/64 reference widths.
    pub scale: f64,
    pub variant: GeneratorVariant,
    /// Keep the batch norm that follows the output sigmoid.
    pub trailing_bn: bool,
}

impl GeneratorConfig {
    pub fn new(image: ImageShape, scale: f64) -> Self {
        Self {
            image,
            latent_dim: 256,
            scale,
            variant: GeneratorVariant::Shallow,
            trailing_bn: true,
        }
    }

    fn width(&self, reference: usize) -> usize {
        ((reference as f64 * self.scale).round() as usize).max(1)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorOutput {
    pub image: Tensor,
    /// Sigmoid output before the trailing batch norm.
    pub pre_norm: Tensor,
    /// Batch statistics of the generator's own normalization layers.
    pub taps: Vec<BnTap>,
}

#[derive(Debug, Clone)]
struct GenBlock {
    conv: SpectralConv2d,
    bn: BatchNorm,
    upsample: bool,
}

/// Linear -> BN1d -> reshape -> [SN-conv, BN, LeakyReLU, 2x upsample]* ->
/// SN-conv -> sigmoid -> BN.
#[derive(Debug, Clone)]
pub struct GeneratorModel {
    config: GeneratorConfig,
    linear: Linear,
    input_bn: BatchNorm,
    blocks: Vec<GenBlock>,
    out_conv: SpectralConv2d,
    out_bn: Option<BatchNorm>,
    base: (usize, usize, usize),
}

impl GeneratorModel {
    pub fn new(config: GeneratorConfig, seed: u64, dtype: DType) -> Result<Self> {
        let ImageShape {
            channels,
            height,
            width,
        } = config.image;
        let down = config.variant.downsample();
        if height == 0 || width == 0 || height % down != 0 || width % down != 0 {
            return Err(Error::BadShape(format!(
                "{height}x{width} images need sides divisible by {down} for the {:?} generator",
                config.variant
            )));
        }
        if config.latent_dim == 0 || !(config.scale > 0.0) {
            return Err(Error::InvalidArgument("generator latent dim and scale must be positive".into()));
        }
        let mut rng = rng::stream(seed, "generator/init");
        let c_wide = config.width(128);
        let c_narrow = config.width(64);
        let base = (c_wide, height / down, width / down);
        let linear = Linear::new(config.latent_dim, base.0 * base.1 * base.2, true, &mut rng, dtype)?;
        let input_bn = BatchNorm::new(base.0 * base.1 * base.2, true, dtype)?;
        // (in, out, upsample after)
        let plan: Vec<(usize, usize, bool)> = match config.variant {
            GeneratorVariant::Shallow => vec![(c_wide, c_wide, true), (c_wide, c_narrow, true)],
            GeneratorVariant::Deep => vec![
                (c_wide, c_wide, true),
                (c_wide, c_wide, true),
                (c_wide, c_narrow, true),
                (c_narrow, c_narrow, true),
            ],
        };
        let blocks = plan
            .into_iter()
            .map(|(i, o, up)| {
                Ok(GenBlock {
                    conv: SpectralConv2d::new(i, o, 3, 1, &mut rng, dtype)?,
                    bn: BatchNorm::new(o, true, dtype)?,
                    upsample: up,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let out_conv = SpectralConv2d::new(c_narrow, channels, 3, 1, &mut rng, dtype)?;
        let out_bn = if config.trailing_bn {
            Some(BatchNorm::new(channels, false, dtype)?)
        } else {
            None
        };
        Ok(Self {
            config,
            linear,
            input_bn,
            blocks,
            out_conv,
            out_bn,
            base,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn spectral_layers(&self) -> Vec<&SpectralConv2d> {
        self.blocks.iter().map(|b| &b.conv).chain(std::iter::once(&self.out_conv)).collect()
    }

    /// One power iteration per spectral-norm layer; call before each
    /// training step.
    pub fn refresh_spectral_norms(&mut self) -> Result<()> {
        for b in &mut self.blocks {
            b.conv.power_iteration(1)?;
        }
        self.out_conv.power_iteration(1)
    }

    /// Generator batch-norm layers as `(mean, var)` running statistics.
    pub fn running_stats(&self) -> Vec<(Tensor, Tensor)> {
        let mut out = vec![(self.input_bn.running_mean().clone(), self.input_bn.running_var().clone())];
        for b in &self.blocks {
            out.push((b.bn.running_mean().clone(), b.bn.running_var().clone()));
        }
        if let Some(bn) = &self.out_bn {
            out.push((bn.running_mean().clone(), bn.running_var().clone()));
        }
        out
    }

    pub fn forward(&self, z: &Tensor, mode: ForwardMode) -> Result<GeneratorOutput> {
        if z.rank() != 2 || z.dim(1)? != self.config.latent_dim {
            return Err(Error::DimMismatch(format!(
                "generator expects (B, {}), got {:?}",
                self.config.latent_dim,
                z.dims()
            )));
        }
        let batch = z.dim(0)?;
        let mut taps = Vec::new();
        let (h, tap) = self.input_bn.forward(&self.linear.forward(z)?, mode)?;
        taps.extend(tap);
        let mut h = h.reshape((batch, self.base.0, self.base.1, self.base.2))?;
        for block in &self.blocks {
            let (y, tap) = block.bn.forward(&block.conv.forward(&h)?, mode)?;
            taps.extend(tap);
            h = leaky_relu(&y, 0.2)?;
            if block.upsample {
                let (_, _, hh, ww) = h.dims4()?;
                h = h.upsample_nearest2d(2 * hh, 2 * ww)?;
            }
        }
        let pre_norm = sigmoid(&self.out_conv.forward(&h)?)?;
        let image = match &self.out_bn {
            Some(bn) => {
                let (y, tap) = bn.forward(&pre_norm, mode)?;
                taps.extend(tap);
                y
            }
            None => pre_norm.clone(),
        };
        Ok(GeneratorOutput { image, pre_norm, taps })
    }

    pub fn update_running_stats(&mut self, taps: &[BnTap]) -> Result<()> {
        let expected = 1 + self.blocks.len() + usize::from(self.out_bn.is_some());
        if taps.len() != expected {
            return Err(Error::LayerMismatch(format!("{} taps for {expected} generator layers", taps.len())));
        }
        self.input_bn.update_running(&taps[0])?;
        for (b, tap) in self.blocks.iter_mut().zip(&taps[1..]) {
            b.bn.update_running(tap)?;
        }
        if let Some(bn) = &mut self.out_bn {
            bn.update_running(&taps[expected - 1])?;
        }
        Ok(())
    }
}

impl Module for GeneratorModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.linear.visit(&join(prefix, "linear"), f);
        self.input_bn.visit(&join(prefix, "input_bn"), f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.out_conv.visit(&join(prefix, "out_conv"), f);
        if let Some(bn) = &self.out_bn {
            bn.visit(&join(prefix, "out_bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.linear.visit_mut(&join(prefix, "linear"), f);
        self.input_bn.visit_mut(&join(prefix, "input_bn"), f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("block{i}.conv")), f);
            b.bn.visit_mut(&join(prefix, &format!("block{i}.bn")), f);
        }
        self.out_conv.visit_mut(&join(prefix, "out_conv"), f);
        if let Some(bn) = &mut self.out_bn {
            bn.visit_mut(&join(prefix, "out_bn"), f);
        }
    }
}

/// Noisy layer `Z`: BN1d over the anchor followed by a linear map into the
/// generator's latent space. Re-created from a fresh seed every round.
#[derive(Debug, Clone)]
pub struct NoisyLayer {
    bn: BatchNorm,
    linear: Linear,
}

impl NoisyLayer {
    pub fn new(embed_dim: usize, latent_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        if embed_dim == 0 || latent_dim == 0 {
            return Err(Error::InvalidArgument("noisy layer dims must be positive".into()));
        }
        let mut rng: Rng = rng::stream(seed, "noisy-layer/init");
        Ok(Self {
            bn: BatchNorm::new(embed_dim, true, dtype)?,
            linear: Linear::new(embed_dim, latent_dim, true, &mut rng, dtype)?,
        })
    }

    pub fn forward(&self, anchors: &Tensor) -> Result<Tensor> {
        let (h, _) = self.bn.forward(anchors, ForwardMode::Train)?;
        self.linear.forward(&h)
    }
}

impl Module for NoisyLayer {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.bn.visit(&join(prefix, "bn"), f);
        self.linear.visit(&join(prefix, "linear"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.bn.visit_mut(&join(prefix, "bn"), f);
        self.linear.visit_mut(&join(prefix, "linear"), f);
    }
}

/// Normalization applied to raw generator output before it reaches the teacher.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataStatsMode {
    /// Learnable mean and scale trained with the generator.
    Lds,
    /// Fixed training-set statistics.
    Tds,
    /// Fixed random statistics.
    Rds,
    /// No normalization.
    None,
}

/// Per-channel `(x - mu) / sigma` with `sigma = exp(log_sigma) > 0`.
#[derive(Debug, Clone)]
pub struct LearnableDataStats {
    mode: DataStatsMode,
    mean: Tensor,
    log_std: Tensor,
}

impl LearnableDataStats {
    pub const INIT_MEAN: f64 = 0.5;
    pub const INIT_STD: f64 = 0.25;

    pub fn new(mode: DataStatsMode, channels: usize, dataset_stats: Option<&ChannelStats>, seed: u64, dtype: DType) -> Result<Self> {
        let (mean, std): (Vec<f64>, Vec<f64>) = match mode {
            DataStatsMode::Lds => (vec![Self::INIT_MEAN; channels], vec![Self::INIT_STD; channels]),
            DataStatsMode::None => (vec![0.0; channels], vec![1.0; channels]),
            DataStatsMode::Tds => {
                let s = dataset_stats.ok_or_else(|| Error::InvalidArgument("tds mode needs dataset statistics".into()))?;
                if s.mean.len() != channels || s.std.len() != channels {
                    return Err(Error::DimMismatch("dataset statistics channel count".into()));
                }
                (
                    s.mean.iter().map(|&v| v as f64).collect(),
                    s.std.iter().map(|&v| v as f64).collect(),
                )
            }
            DataStatsMode::Rds => {
                use rand::Rng as _;
                let mut rng = rng::stream(seed, "data-stats/random");
                (
                    (0..channels).map(|_| rng.random_range(0.0..1.0)).collect(),
                    (0..channels).map(|_| rng.random_range(0.1..1.0)).collect(),
                )
            }
        };
        let device = candle_core::Device::Cpu;
        Ok(Self {
            mode,
            mean: Tensor::from_vec(mean, channels, &device)?.to_dtype(dtype)?,
            log_std: Tensor::from_vec(std.iter().map(|s| s.ln()).collect::<Vec<_>>(), channels, &device)?.to_dtype(dtype)?,
        })
    }

    pub fn mode(&self) -> DataStatsMode {
        self.mode
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn std(&self) -> Result<Tensor> {
        Ok(self.log_std.exp()?)
    }

    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        if self.mode == DataStatsMode::None {
            return Ok(x.clone());
        }
        let c = self.mean.dim(0)?;
        let mean = self.mean.reshape((1, c, 1, 1))?;
        let std = self.std()?.reshape((1, c, 1, 1))?;
        Ok(x.broadcast_sub(&mean)?.broadcast_div(&std)?)
    }
}

impl Module for LearnableDataStats {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        let kind = if self.mode == DataStatsMode::Lds {
            ParamKind::Trainable
        } else {
            ParamKind::Buffer
        };
        f(&join(prefix, "mean"), &self.mean, kind);
        f(&join(prefix, "log_std"), &self.log_std, kind);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        let kind = if self.mode == DataStatsMode::Lds {
            ParamKind::Trainable
        } else {
            ParamKind::Buffer
        };
        f(&join(prefix, "mean"), &mut self.mean, kind);
        f(&join(prefix, "log_std"), &mut self.log_std, kind);
    }
}

/// `(B, latent)` standard-normal noise used when the noisy layer is bypassed.
pub fn gaussian_latent(batch: usize, latent_dim: usize, seed: u64, dtype: DType) -> Result<Tensor> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = rng::stream(seed, "latent/noise");
    let v: Vec<f64> = (0..batch * latent_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    Ok(Tensor::from_vec(v, (batch, latent_dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
}
