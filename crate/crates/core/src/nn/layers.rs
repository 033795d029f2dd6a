use candle_core::{DType, Tensor, D};

use super::module::{constant, join, uniform, Module, ParamKind};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// How batch-norm layers normalize during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Batch statistics; batch stats are returned for running-stat updates.
    Train,
    /// Running statistics; nothing captured.
    Eval,
    /// Running statistics, but the batch mean/variance of every
    /// normalization input is captured (kept in the graph) for inversion.
    Inversion,
}

/// Batch statistics observed at the input of one normalization layer.
#[derive(Debug, Clone)]
pub struct BnTap {
    /// Per-channel mean, shape `(C,)`.
    pub mean: Tensor,
    /// Per-channel biased variance, shape `(C,)`.
    pub var: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, bias: bool, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = uniform(rng, &[out_dim, in_dim], bound, dtype)?;
        let bias = if bias {
            Some(uniform(rng, &[out_dim], bound, dtype)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(Error::BadShape(format!("linear weight must be 2-d, got {:?}", weight.dims())));
        }
        if let Some(b) = &bias {
            if b.dims() != [weight.dim(0)?] {
                return Err(Error::BadShape(format!("linear bias {:?} vs weight {:?}", b.dims(), weight.dims())));
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> Option<&Tensor> {
        self.bias.as_ref()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 2 || x.dim(1)? != self.in_dim() {
            return Err(Error::DimMismatch(format!(
                "linear expects (B, {}), got {:?}",
                self.in_dim(),
                x.dims()
            )));
        }
        let y = x.matmul(&self.weight.t()?)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        })
    }

    /// Appends freshly initialized output rows; existing rows are untouched.
    pub fn grow_outputs(&mut self, extra: usize, rng: &mut Rng) -> Result<()> {
        let dtype = self.weight.dtype();
        let bound = 1.0 / (self.in_dim() as f64).sqrt();
        let w_new = uniform(rng, &[extra, self.in_dim()], bound, dtype)?;
        self.weight = Tensor::cat(&[&self.weight.detach(), &w_new], 0)?;
        if let Some(b) = &self.bias {
            let b_new = uniform(rng, &[extra], bound, dtype)?;
            self.bias = Some(Tensor::cat(&[&b.detach(), &b_new], 0)?);
        }
        Ok(())
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    padding: usize,
    stride: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut Rng,
        dtype: DType,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = uniform(rng, &[out_ch, in_ch, kernel, kernel], bound, dtype)?;
        let bias = if bias {
            Some(uniform(rng, &[out_ch], bound, dtype)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            padding,
            stride,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    fn forward_with(&self, x: &Tensor, weight: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(weight, self.padding, self.stride, 1, 1)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dim(0)?, 1, 1))?)?,
            None => y,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.forward_with(x, &self.weight)
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &self.weight, ParamKind::Trainable);
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        f(&join(prefix, "weight"), &mut self.weight, ParamKind::Trainable);
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
    }
}

/// Conv2d whose weight is divided by a power-iteration estimate of its
/// largest singular value. `u`/`v` are buffers refreshed outside the graph.
#[derive(Debug, Clone)]
pub struct SpectralConv2d {
    conv: Conv2d,
    u: Tensor,
    v: Tensor,
}

impl SpectralConv2d {
    /// Warm-up stops once the estimate moves by less than this fraction.
    pub const WARMUP_TOLERANCE: f64 = 1e-7;
    pub const WARMUP_MAX_ITERATIONS: usize = 2000;

    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, rng: &mut Rng, dtype: DType) -> Result<Self> {
        let conv = Conv2d::new(in_ch, out_ch, kernel, 1, padding, true, rng, dtype)?;
        let rest = in_ch * kernel * kernel;
        let u = l2_normalize(&uniform(rng, &[out_ch, 1], 1.0, dtype)?)?;
        let v = l2_normalize(&uniform(rng, &[rest, 1], 1.0, dtype)?)?;
        let mut layer = Self { conv, u, v };
        layer.converge()?;
        Ok(layer)
    }

    /// Power iteration until the singular value estimate settles.
    pub fn converge(&mut self) -> Result<()> {
        let mut previous = self.sigma()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        for _ in 0..Self::WARMUP_MAX_ITERATIONS {
            self.power_iteration(1)?;
            let sigma = self.sigma()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if (sigma - previous).abs() <= Self::WARMUP_TOLERANCE * sigma.abs() {
                break;
            }
            previous = sigma;
        }
        Ok(())
    }

    fn weight_matrix(&self) -> Result<Tensor> {
        let out = self.conv.out_channels();
        Ok(self.conv.weight.reshape((out, ()))?)
    }

    pub fn power_iteration(&mut self, iterations: usize) -> Result<()> {
        let w = self.weight_matrix()?.detach();
        let (mut u, mut v) = (self.u.clone(), self.v.clone());
        for _ in 0..iterations {
            v = l2_normalize(&w.t()?.matmul(&u)?)?;
            u = l2_normalize(&w.matmul(&v)?)?;
        }
        self.u = u.detach();
        self.v = v.detach();
        Ok(())
    }

    /// Current estimate `u^T W v` of the top singular value (kept in the graph).
    pub fn sigma(&self) -> Result<Tensor> {
        let w = self.weight_matrix()?;
        Ok(self.u.t()?.matmul(&w.matmul(&self.v)?)?.reshape(())?)
    }

    pub fn normalized_weight(&self) -> Result<Tensor> {
        Ok(self.conv.weight.broadcast_div(&self.sigma()?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.conv.forward_with(x, &self.normalized_weight()?)
    }
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_all()?.sqrt()?.affine(1.0, 1e-12)?;
    Ok(x.broadcast_div(&norm)?)
}

impl Module for SpectralConv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        self.conv.visit(prefix, f);
        f(&join(prefix, "sn_u"), &self.u, ParamKind::Buffer);
        f(&join(prefix, "sn_v"), &self.v, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        self.conv.visit_mut(prefix, f);
        f(&join(prefix, "sn_u"), &mut self.u, ParamKind::Buffer);
        f(&join(prefix, "sn_v"), &mut self.v, ParamKind::Buffer);
    }
}

/// Batch normalization over dim 1 of `(B, C)` or `(B, C, H, W)` inputs.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    weight: Option<Tensor>,
    bias: Option<Tensor>,
    running_mean: Tensor,
    running_var: Tensor,
    eps: f64,
    momentum: f64,
}

impl BatchNorm {
    pub fn new(features: usize, affine: bool, dtype: DType) -> Result<Self> {
        let (weight, bias) = if affine {
            (
                Some(constant(1.0, &[features], dtype)?),
                Some(constant(0.0, &[features], dtype)?),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            weight,
            bias,
            running_mean: constant(0.0, &[features], dtype)?,
            running_var: constant(1.0, &[features], dtype)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn features(&self) -> usize {
        self.running_mean.dims()[0]
    }

    pub fn running_mean(&self) -> &Tensor {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Tensor {
        &self.running_var
    }

    fn param_shape(&self, rank: usize) -> Vec<usize> {
        let mut shape = vec![1; rank];
        shape[1] = self.features();
        shape
    }

    fn batch_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (mean, var) = match x.rank() {
            2 => {
                let mean = x.mean_keepdim(0)?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim(0)?;
                (mean, var)
            }
            4 => {
                let mean = x.mean_keepdim((0, 2, 3))?;
                let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((0, 2, 3))?;
                (mean, var)
            }
            r => return Err(Error::BadShape(format!("batch norm expects rank 2 or 4, got {r}"))),
        };
        Ok((mean, var))
    }

    pub fn forward(&self, x: &Tensor, mode: ForwardMode) -> Result<(Tensor, Option<BnTap>)> {
        if x.dim(1)? != self.features() {
            return Err(Error::DimMismatch(format!(
                "batch norm over {} features got input {:?}",
                self.features(),
                x.dims()
            )));
        }
        let shape = self.param_shape(x.rank());
        let count = x.elem_count() / self.features();
        let (normalized, tap) = match mode {
            ForwardMode::Train => {
                let (mean, var) = Self::batch_stats(x)?;
                let y = x
                    .broadcast_sub(&mean)?
                    .broadcast_div(&var.affine(1.0, self.eps)?.sqrt()?)?;
                let tap = BnTap {
                    mean: mean.flatten_all()?,
                    var: var.flatten_all()?,
                    count,
                };
                (y, Some(tap))
            }
            ForwardMode::Eval | ForwardMode::Inversion => {
                let tap = if mode == ForwardMode::Inversion {
                    let (mean, var) = Self::batch_stats(x)?;
                    Some(BnTap {
                        mean: mean.flatten_all()?,
                        var: var.flatten_all()?,
                        count,
                    })
                } else {
                    None
                };
                let rm = self.running_mean.reshape(shape.as_slice())?;
                let rv = self.running_var.reshape(shape.as_slice())?;
                let y = x.broadcast_sub(&rm)?.broadcast_div(&rv.affine(1.0, self.eps)?.sqrt()?)?;
                (y, tap)
            }
        };
        let y = match (&self.weight, &self.bias) {
            (Some(w), Some(b)) => normalized
                .broadcast_mul(&w.reshape(shape.as_slice())?)?
                .broadcast_add(&b.reshape(shape.as_slice())?)?,
            _ => normalized,
        };
        Ok((y, tap))
    }

    /// Exponential running-stat update with the unbiased batch variance.
    pub fn update_running(&mut self, tap: &BnTap) -> Result<()> {
        let m = self.momentum;
        let mean = tap.mean.detach();
        let correction = if tap.count > 1 {
            tap.count as f64 / (tap.count - 1) as f64
        } else {
            1.0
        };
        let var = tap.var.detach().affine(correction, 0.0)?;
        self.running_mean = ((self.running_mean.affine(1.0 - m, 0.0)? + mean.affine(m, 0.0)?)?).detach();
        self.running_var = ((self.running_var.affine(1.0 - m, 0.0)? + var.affine(m, 0.0)?)?).detach();
        Ok(())
    }
}

impl Module for BatchNorm {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind)) {
        if let (Some(w), Some(b)) = (&self.weight, &self.bias) {
            f(&join(prefix, "weight"), w, ParamKind::Trainable);
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
        f(&join(prefix, "running_mean"), &self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &self.running_var, ParamKind::Buffer);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind)) {
        if let (Some(w), Some(b)) = (&mut self.weight, &mut self.bias) {
            f(&join(prefix, "weight"), w, ParamKind::Trainable);
            f(&join(prefix, "bias"), b, ParamKind::Trainable);
        }
        f(&join(prefix, "running_mean"), &mut self.running_mean, ParamKind::Buffer);
        f(&join(prefix, "running_var"), &mut self.running_var, ParamKind::Buffer);
    }
}

/// 2x2 stride-2 max pooling over `(B, C, H, W)`; odd trailing rows and
/// columns are dropped. The gradient reaches every position equal to its
/// window maximum at full scale.
pub fn max_pool2x2(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (ho, wo) = (h / 2, w / 2);
    let x = if h % 2 == 1 || w % 2 == 1 {
        x.narrow(2, 0, 2 * ho)?.narrow(3, 0, 2 * wo)?
    } else {
        x.clone()
    };
    Ok(x.reshape((b, c, ho, 2, wo, 2))?.max(5)?.max(3)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - x.neg()?.relu()?.affine(slope, 0.0)?)?)
}

/// Logistic sigmoid written through `tanh`, which stays finite in backward.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(x.affine(0.5, 0.0)?.tanh()?.affine(0.5, 0.5)?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// Row-wise argmax of a `(B, K)` tensor.
pub fn argmax_rows(x: &Tensor) -> Result<Vec<usize>> {
    let rows = x.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (i, v) in r.iter().enumerate() {
                if *v > r[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}
