//! Training and generation objectives.
//!
//! Every reduction over samples is an arithmetic mean over the batch.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{argmax_rows, log_softmax, BnTap, Linear};

/// Per-task weights of the current-task and previous-task client losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScaleFactors {
    pub alpha_cur_t: f64,
    pub alpha_pre_t: f64,
    pub kappa: f64,
    pub delta: f64,
}

impl ScaleFactors {
    /// Factors that reproduce `L_cur` alone (first task).
    pub fn current_only() -> Self {
        Self {
            alpha_cur_t: 1.0,
            alpha_pre_t: 0.0,
            kappa: f64::NAN,
            delta: f64::NAN,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_bn: f64,
    pub lambda_oh: f64,
    pub lambda_ltc: f64,
    /// Bounding radius `r` on the squared anchor distance.
    pub radius: f64,
    pub kd_temperature: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_bn: 1.0,
            lambda_oh: 0.5,
            lambda_ltc: 5.0,
            radius: 0.015,
            kd_temperature: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_bn", self.lambda_bn),
            ("lambda_oh", self.lambda_oh),
            ("lambda_ltc", self.lambda_ltc),
            ("radius", self.radius),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be a finite nonnegative number, got {v}")));
            }
        }
        if !(self.kd_temperature > 0.0) || !self.kd_temperature.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "kd_temperature must be positive, got {}",
                self.kd_temperature
            )));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::DimMismatch(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_temperature(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// Per-sample `max(0, ||e - p||^2 - r)` for already projected features `p`, shape `(B,)`.
pub fn bounding_per_sample(projected: &Tensor, anchors: &Tensor, radius: f64) -> Result<Tensor> {
    same_shape(projected, anchors, "bounding loss")?;
    if radius < 0.0 || !radius.is_finite() {
        return Err(Error::InvalidArgument(format!("radius must be nonnegative, got {radius}")));
    }
    let sq = (anchors - projected)?.sqr()?.sum(D::Minus1)?;
    Ok(sq.affine(1.0, -radius)?.relu()?)
}

/// Bounding loss on projected features, averaged over the batch.
pub fn bounding_loss_projected(projected: &Tensor, anchors: &Tensor, radius: f64) -> Result<Tensor> {
    Ok(bounding_per_sample(projected, anchors, radius)?.mean_all()?)
}

/// `mean_i max(0, ||e_i - W(f_i)||^2 - r)`.
pub fn bounding_loss(features: &Tensor, anchors: &Tensor, projector: &Linear, radius: f64) -> Result<Tensor> {
    bounding_loss_projected(&projector.forward(features)?, anchors, radius)
}

/// Mean squared difference over all elements.
pub fn feature_mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "feature mse")?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Per-sample `KL(softmax(t / tau) || softmax(s / tau))`, shape `(B,)`.
pub fn kl_per_sample(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    same_shape(student_logits, teacher_logits, "kl divergence")?;
    check_temperature(tau)?;
    let log_p = log_softmax(&teacher_logits.affine(1.0 / tau, 0.0)?)?;
    let log_q = log_softmax(&student_logits.affine(1.0 / tau, 0.0)?)?;
    Ok((log_p.exp()? * (log_p - log_q)?)?.sum(D::Minus1)?)
}

/// Distillation KL with the teacher distribution as reference, batch mean.
pub fn kd_kl(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    Ok(kl_per_sample(student_logits, teacher_logits, tau)?.mean_all()?)
}

/// `(B, K)` one-hot matrix for `labels`.
pub fn one_hot(labels: &[usize], width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut values = vec![0f32; labels.len() * width];
    for (i, &y) in labels.iter().enumerate() {
        if y >= width {
            return Err(Error::HeadTooNarrow { label: y, width });
        }
        values[i * width + y] = 1.0;
    }
    Ok(Tensor::from_vec(values, (labels.len(), width), device)?.to_dtype(dtype)?)
}

/// Softmax cross-entropy, batch mean.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (batch, width) = logits.dims2()?;
    if batch != labels.len() {
        return Err(Error::DimMismatch(format!("{batch} logit rows for {} labels", labels.len())));
    }
    let mask = one_hot(labels, width, logits.dtype(), logits.device())?;
    Ok((log_softmax(logits)? * mask)?.sum(D::Minus1)?.mean_all()?.neg()?)
}

/// Adaptive scale factors for tasks after the first.
pub fn adaptive_scale_factors(n_new: usize, n_prev: usize, alpha_cur: f64, alpha_pre: f64) -> Result<ScaleFactors> {
    if n_prev == 0 {
        return Err(Error::InvalidTaskOne);
    }
    if n_new == 0 {
        return Err(Error::InvalidArgument("current task has no classes".into()));
    }
    let kappa = (n_new as f64 / 2.0 + 1.0).log2();
    let delta = (n_prev as f64 / n_new as f64).sqrt();
    Ok(ScaleFactors {
        alpha_cur_t: (1.0 + 1.0 / kappa) / delta * alpha_cur,
        alpha_pre_t: kappa * delta * alpha_pre,
        kappa,
        delta,
    })
}

/// `CE(logits, y) + lambda_ltc * bounding(W(f), e, r)`; `projected` is `W(f)`.
pub fn client_loss_current(
    logits: &Tensor,
    labels: &[usize],
    projected: &Tensor,
    anchors: &Tensor,
    radius: f64,
    lambda_ltc: f64,
) -> Result<Tensor> {
    let ce = cross_entropy(logits, labels)?;
    if lambda_ltc == 0.0 {
        return Ok(ce);
    }
    let bound = bounding_loss_projected(projected, anchors, radius)?;
    Ok((ce + bound.affine(lambda_ltc, 0.0)?)?)
}

/// `KL(server || client)` over the server head width plus feature MSE.
pub fn client_loss_previous(
    client_logits: &Tensor,
    server_logits: &Tensor,
    client_features: &Tensor,
    server_features: &Tensor,
    tau: f64,
) -> Result<Tensor> {
    let (_, server_width) = server_logits.dims2()?;
    let (_, client_width) = client_logits.dims2()?;
    if client_width < server_width {
        return Err(Error::DimMismatch(format!(
            "client head {client_width} narrower than server head {server_width}"
        )));
    }
    let client_old = client_logits.narrow(1, 0, server_width)?;
    let kd = kd_kl(&client_old, server_logits, tau)?;
    Ok((kd + feature_mse(client_features, server_features)?)?)
}

pub fn client_total(l_cur: &Tensor, l_pre: &Tensor, factors: &ScaleFactors) -> Result<Tensor> {
    Ok((l_cur.affine(factors.alpha_cur_t, 0.0)? + l_pre.affine(factors.alpha_pre_t, 0.0)?)?)
}

/// Teacher cross-entropy on synthetic images against their pseudo labels.
pub fn gen_oh_loss(teacher_logits: &Tensor, pseudo_labels: &[usize]) -> Result<Tensor> {
    cross_entropy(teacher_logits, pseudo_labels)
}

const NORM_EPS: f64 = 1e-16;

fn l2_norm(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum_all()?.affine(1.0, NORM_EPS)?.sqrt()?)
}

/// `sum_l ||mu_l(x) - mu_l|| + ||var_l(x) - var_l||` (unsquared L2 norms).
pub fn gen_bn_loss(batch_stats: &[BnTap], running_stats: &[(Tensor, Tensor)]) -> Result<Tensor> {
    if batch_stats.len() != running_stats.len() || batch_stats.is_empty() {
        return Err(Error::LayerMismatch(format!(
            "{} captured layers vs {} running-stat layers",
            batch_stats.len(),
            running_stats.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (l, (tap, (mean, var))) in batch_stats.iter().zip(running_stats).enumerate() {
        if tap.mean.dims() != mean.dims() || tap.var.dims() != var.dims() {
            return Err(Error::LayerMismatch(format!(
                "layer {l}: batch stats {:?} vs running stats {:?}",
                tap.mean.dims(),
                mean.dims()
            )));
        }
        let term = (l2_norm(&(&tap.mean - mean)?)? + l2_norm(&(&tap.var - var)?)?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty layer list"))
}

/// Disagreement indicator `omega_i = [argmax t_i != argmax s_i]`.
pub fn disagreement_mask(student_logits: &Tensor, teacher_logits: &Tensor) -> Result<Vec<bool>> {
    same_shape(student_logits, teacher_logits, "disagreement mask")?;
    let s = argmax_rows(student_logits)?;
    let t = argmax_rows(teacher_logits)?;
    Ok(s.iter().zip(&t).map(|(a, b)| a != b).collect())
}

/// `-mean_i omega_i * KL_i`; the indicator carries no gradient.
pub fn gen_adv_loss(student_logits: &Tensor, teacher_logits: &Tensor, tau: f64) -> Result<Tensor> {
    let omega = disagreement_mask(student_logits, teacher_logits)?;
    let kl = kl_per_sample(student_logits, teacher_logits, tau)?;
    let mask: Vec<f32> = omega.iter().map(|&w| if w { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask, omega.len(), kl.device())?.to_dtype(kl.dtype())?;
    Ok((kl * mask)?.mean_all()?.neg()?)
}

/// Bounding loss on the teacher's projected features of synthetic images.
pub fn gen_ltc_loss(teacher_projected: &Tensor, anchors: &Tensor, radius: f64) -> Result<Tensor> {
    bounding_loss_projected(teacher_projected, anchors, radius)
}

pub fn gen_total(adv: &Tensor, bn: &Tensor, oh: &Tensor, ltc: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    let mut total = adv.clone();
    for (term, w) in [(bn, weights.lambda_bn), (oh, weights.lambda_oh), (ltc, weights.lambda_ltc)] {
        total = (total + term.affine(w, 0.0)?)?;
    }
    Ok(total)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
