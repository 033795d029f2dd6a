use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use super::layers::{max_pool2x2, BatchNorm, BnTap, Conv2d, ForwardMode, Linear};
use super::module::{join, Module, ParamKind};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    SmallCnn,
    Resnet18Like,
}

impl FromStr for ArchKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "small_cnn" => Ok(Self::SmallCnn),
            "resnet18_like" => Ok(Self::Resnet18Like),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchKind::SmallCnn => "small_cnn",
            ArchKind::Resnet18Like => "resnet18_like",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub arch: ArchKind,
    /// Base channel width; `small_cnn` yields `4 * width` features,
    /// `resnet18_like` yields `8 * width` (64 reproduces ResNet18).
    pub width: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Anchor dimension `d_e` that the projector maps features into.
    pub embed_dim: usize,
    /// L2-normalize projector outputs onto the unit sphere of the anchors.
    pub normalize_projection: bool,
}

impl ClassifierConfig {
    pub fn feature_dim(&self) -> usize {
        match self.arch {
            ArchKind::SmallCnn => 4 * self.width,
            ArchKind::Resnet18Like => 8 * self.width,
        }
    }
}

/// Output of a classifier forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierOutput {
    pub logits: Tensor,
    /// Penultimate features `f`.
    pub features: Tensor,
    /// Batch statistics at every normalization input, in layer order
    /// (empty in `Eval` mode).
    pub taps: Vec<BnTap>,
}

#[derive(Debug, Clone)]
struct ConvBnBlock {
    conv: Conv2d,
    bn: BatchNorm,
    pool: bool,
}

impl ConvBnBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, pool: bool, rng: &mut Rng, dtype: DType) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng, dtype)?,
            bn: BatchNorm::new(out_ch, true, dtype)?,
            pool,
        })
    }

    fn forward(&self, x: &Tensor, mode: ForwardMode, taps: &mut Vec<BnTap>) -> Result<Tensor> {
        let (y, tap) = self.bn.forward(&self.conv.forward(x)?, mode)?;
        taps.extend(tap);
        let y = y.relu()?;
        Ok(if self.pool { max_pool2x2(&y)? } else { y })
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(&join(prefix, "conv"), f);
        self.bn.visit(&join(prefix, "bn"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.bn.visit_mut(&join(prefix, "bn"), f);
    }
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm,
    conv2: Conv2d,
    bn2: BatchNorm,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl BasicBlock {
    fn new(in_ch: usize, out_ch: usize, stride: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let shortcut = if stride != 1 || in_ch != out_ch {
            Some((
                Conv2d::new(in_ch, out_ch, 1, stride, 0, false, rng, dtype)?,
                BatchNorm::new(out_ch, true, dtype)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1: Conv2d::new(in_ch, out_ch, 3, stride, 1, false, rng, dtype)?,
            bn1: BatchNorm::new(out_ch, true, dtype)?,
            conv2: Conv2d::new(out_ch, out_ch, 3, 1, 1, false, rng, dtype)?,
            bn2: BatchNorm::new(out_ch, true, dtype)?,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, mode: ForwardMode, taps: &mut Vec<BnTap>) -> Result<Tensor> {
        let (h, tap) = self.bn1.forward(&self.conv1.forward(x)?, mode)?;
        taps.extend(tap);
        let (h, tap) = self.bn2.forward(&self.conv2.forward(&h.relu()?)?, mode)?;
        taps.extend(tap);
        let skip = match &self.shortcut {
            Some((conv, bn)) => {
                let (s, tap) = bn.forward(&conv.forward(x)?, mode)?;
                taps.extend(tap);
                s
            }
            None => x.clone(),
        };
        Ok((h + skip)?.relu()?)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        let mut v = vec![&self.bn1, &self.bn2];
        v.extend(self.shortcut.as_ref().map(|(_, bn)| bn));
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        v.extend(self.shortcut.as_mut().map(|(_, bn)| bn));
        v
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv1.visit(&join(prefix, "conv1"), f);
        self.bn1.visit(&join(prefix, "bn1"), f);
        self.conv2.visit(&join(prefix, "conv2"), f);
        self.bn2.visit(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &self.shortcut {
            conv.visit(&join(prefix, "shortcut.conv"), f);
            bn.visit(&join(prefix, "shortcut.bn"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv1.visit_mut(&join(prefix, "conv1"), f);
        self.bn1.visit_mut(&join(prefix, "bn1"), f);
        self.conv2.visit_mut(&join(prefix, "conv2"), f);
        self.bn2.visit_mut(&join(prefix, "bn2"), f);
        if let Some((conv, bn)) = &mut self.shortcut {
            conv.visit_mut(&join(prefix, "shortcut.conv"), f);
            bn.visit_mut(&join(prefix, "shortcut.bn"), f);
        }
    }
}

#[derive(Debug, Clone)]
enum Backbone {
    SmallCnn(Vec<ConvBnBlock>),
    Resnet { stem: ConvBnBlock, blocks: Vec<BasicBlock> },
}

impl Backbone {
    fn new(config: &ClassifierConfig, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let w = config.width;
        if w == 0 {
            return Err(Error::InvalidArgument("classifier width must be positive".into()));
        }
        Ok(match config.arch {
            ArchKind::SmallCnn => Backbone::SmallCnn(vec![
                ConvBnBlock::new(config.in_channels, w, 1, true, rng, dtype)?,
                ConvBnBlock::new(w, 2 * w, 1, true, rng, dtype)?,
                ConvBnBlock::new(2 * w, 4 * w, 1, false, rng, dtype)?,
            ]),
            ArchKind::Resnet18Like => {
                let stem = ConvBnBlock::new(config.in_channels, w, 1, false, rng, dtype)?;
                let mut blocks = Vec::new();
                let mut in_ch = w;
                for (stage, mult) in [1, 2, 4, 8].into_iter().enumerate() {
                    let out_ch = w * mult;
                    let stride = if stage == 0 { 1 } else { 2 };
                    blocks.push(BasicBlock::new(in_ch, out_ch, stride, rng, dtype)?);
                    blocks.push(BasicBlock::new(out_ch, out_ch, 1, rng, dtype)?);
                    in_ch = out_ch;
                }
                Backbone::Resnet { stem, blocks }
            }
        })
    }

    fn forward(&self, x: &Tensor, mode: ForwardMode, taps: &mut Vec<BnTap>) -> Result<Tensor> {
        let mut h = x.clone();
        match self {
            Backbone::SmallCnn(blocks) => {
                for b in blocks {
                    h = b.forward(&h, mode, taps)?;
                }
            }
            Backbone::Resnet { stem, blocks } => {
                h = stem.forward(&h, mode, taps)?;
                for b in blocks {
                    h = b.forward(&h, mode, taps)?;
                }
            }
        }
        Ok(h.mean((2, 3))?)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm> {
        match self {
            Backbone::SmallCnn(blocks) => blocks.iter().map(|b| &b.bn).collect(),
            Backbone::Resnet { stem, blocks } => std::iter::once(&stem.bn)
                .chain(blocks.iter().flat_map(|b| b.batch_norms()))
                .collect(),
        }
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm> {
        match self {
            Backbone::SmallCnn(blocks) => blocks.iter_mut().map(|b| &mut b.bn).collect(),
            Backbone::Resnet { stem, blocks } => std::iter::once(&mut stem.bn)
                .chain(blocks.iter_mut().flat_map(|b| b.batch_norms_mut()))
                .collect(),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        match self {
            Backbone::SmallCnn(blocks) => {
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("block{i}")), f);
                }
            }
            Backbone::Resnet { stem, blocks } => {
                stem.visit(&join(prefix, "stem"), f);
                for (i, b) in blocks.iter().enumerate() {
                    b.visit(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        match self {
            Backbone::SmallCnn(blocks) => {
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("block{i}")), f);
                }
            }
            Backbone::Resnet { stem, blocks } => {
                stem.visit_mut(&join(prefix, "stem"), f);
                for (i, b) in blocks.iter_mut().enumerate() {
                    b.visit_mut(&join(prefix, &format!("layer{i}")), f);
                }
            }
        }
    }
}

/// Backbone + unified classification head + linear projector `W` into the
/// anchor space.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    config: ClassifierConfig,
    backbone: Backbone,
    head: Linear,
    projector: Linear,
    dtype: DType,
}

impl ClassifierModel {
    pub fn new(config: ClassifierConfig, seed: u64, dtype: DType) -> Result<Self> {
        if config.num_classes == 0 || config.embed_dim == 0 || config.in_channels == 0 {
            return Err(Error::InvalidArgument("classifier dims must be positive".into()));
        }
        let mut rng = rng::stream(seed, "classifier/init");
        let backbone = Backbone::new(&config, &mut rng, dtype)?;
        let head = Linear::new(config.feature_dim(), config.num_classes, true, &mut rng, dtype)?;
        let projector = Linear::new(config.feature_dim(), config.embed_dim, true, &mut rng, dtype)?;
        Ok(Self {
            config,
            backbone,
            head,
            projector,
            dtype,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn projector(&self) -> &Linear {
        &self.projector
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<ClassifierOutput> {
        if x.rank() != 4 || x.dim(1)? != self.config.in_channels {
            return Err(Error::DimMismatch(format!(
                "classifier expects (B, {}, H, W), got {:?}",
                self.config.in_channels,
                x.dims()
            )));
        }
        let mut taps = Vec::new();
        let features = self.backbone.forward(x, mode, &mut taps)?;
        let logits = self.head.forward(&features)?;
        Ok(ClassifierOutput { logits, features, taps })
    }

    /// `W(f)`: projects features into the anchor space.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        let p = self.projector.forward(features)?;
        if !self.config.normalize_projection {
            return Ok(p);
        }
        let norm = p.sqr()?.sum_keepdim(D::Minus1)?.affine(1.0, 1e-12)?.sqrt()?;
        Ok(p.broadcast_div(&norm)?)
    }

    /// Running statistics `(mean, var)` of every normalization layer, in the
    /// same order as `ClassifierOutput::taps`.
    pub fn running_stats(&self) -> Vec<(Tensor, Tensor)> {
        self.backbone
            .batch_norms()
            .into_iter()
            .map(|bn| (bn.running_mean().clone(), bn.running_var().clone()))
            .collect()
    }

    pub fn update_running_stats(&mut self, taps: &[BnTap]) -> Result<()> {
        let mut norms = self.backbone.batch_norms_mut();
        if norms.len() != taps.len() {
            return Err(Error::LayerMismatch(format!("{} taps for {} batch-norm layers", taps.len(), norms.len())));
        }
        for (bn, tap) in norms.iter_mut().zip(taps) {
            bn.update_running(tap)?;
        }
        Ok(())
    }

    /// Grows the head to `new_num_classes`; old rows are copied unchanged and
    /// new rows are freshly initialized from `seed`.
    pub fn extend_head(&mut self, new_num_classes: usize, seed: u64) -> Result<()> {
        let current = self.config.num_classes;
        if new_num_classes < current {
            return Err(Error::ShrinkingHead {
                current,
                requested: new_num_classes,
            });
        }
        if new_num_classes == current {
            return Ok(());
        }
        let mut rng = rng::stream(seed, &format!("classifier/head-{new_num_classes}"));
        self.head.grow_outputs(new_num_classes - current, &mut rng)?;
        self.config.num_classes = new_num_classes;
        Ok(())
    }
}

impl Module for ClassifierModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.backbone.visit(&join(prefix, "backbone"), f);
        self.head.visit(&join(prefix, "head"), f);
        self.projector.visit(&join(prefix, "projector"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.backbone.visit_mut(&join(prefix, "backbone"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
        self.projector.visit_mut(&join(prefix, "projector"), f);
    }
}

/// Builds a classifier from a textual architecture id.
pub fn build_classifier(
    arch_id: &str,
    width: usize,
    num_classes: usize,
    embed_dim: usize,
    seed: u64,
    dtype: DType,
) -> Result<ClassifierModel> {
    let arch: ArchKind = arch_id.parse()?;
    ClassifierModel::new(
        ClassifierConfig {
            arch,
            width,
            in_channels: 3,
            num_classes,
            embed_dim,
            normalize_projection: true,
        },
        seed,
        dtype,
    )
}
