use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Non-trainable state such as batch-norm running statistics.
    Buffer,
}

/// Named traversal over a model's tensors.
///
/// Traversal order is fixed per architecture; state dicts rely on names only.
pub trait Module {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor, ParamKind));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor, ParamKind));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Ordered map of parameter name to an owned, detached tensor.
pub type StateDict = BTreeMap<String, Tensor>;

/// Copies every tensor of `module` (parameters and buffers) into fresh storage.
pub fn state_dict(module: &dyn Module) -> Result<StateDict> {
    let mut out = StateDict::new();
    let mut err = None;
    module.visit("", &mut |name, t, _| match t.copy() {
        Ok(c) => {
            out.insert(name.to_string(), c.detach());
        }
        Err(e) => err = Some(e),
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(out),
    }
}

pub fn trainable_names(module: &dyn Module) -> Vec<String> {
    let mut out = Vec::new();
    module.visit("", &mut |name, _, kind| {
        if kind == ParamKind::Trainable {
            out.push(name.to_string());
        }
    });
    out
}

/// Replaces every tensor of `module` with the entry of the same name.
/// Names and shapes must match exactly; tensors are converted to `dtype`.
pub fn load_state_dict(module: &mut dyn Module, state: &StateDict, dtype: DType) -> Result<()> {
    let mut expected = 0usize;
    let mut err: Option<Error> = None;
    module.visit_mut("", &mut |name, t, _| {
        expected += 1;
        if err.is_some() {
            return;
        }
        match state.get(name) {
            None => err = Some(Error::ShapeMismatch(format!("state dict has no entry `{name}`"))),
            Some(src) if src.dims() != t.dims() => {
                err = Some(Error::ShapeMismatch(format!(
                    "`{name}`: expected {:?}, found {:?}",
                    t.dims(),
                    src.dims()
                )))
            }
            Some(src) => match src.to_dtype(dtype) {
                Ok(v) => *t = v.detach(),
                Err(e) => err = Some(e.into()),
            },
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if expected != state.len() {
        return Err(Error::ShapeMismatch(format!(
            "state dict has {} entries, module expects {expected}",
            state.len()
        )));
    }
    Ok(())
}

/// Turns every trainable tensor into a fresh variable and returns them in
/// traversal order. The module keeps sharing storage with the variables, so
/// optimizer updates are visible to subsequent forward passes.
pub fn attach_trainable(module: &mut dyn Module) -> Result<Vec<Var>> {
    let mut vars = Vec::new();
    let mut err = None;
    module.visit_mut("", &mut |_, t, kind| {
        if kind != ParamKind::Trainable || err.is_some() {
            return;
        }
        match t.copy().and_then(|c| Var::from_tensor(&c.detach())) {
            Ok(v) => {
                *t = v.as_tensor().clone();
                vars.push(v);
            }
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e.into()),
        None => Ok(vars),
    }
}

/// Serializes every tensor as little-endian `f32` in name order.
pub fn state_dict_bytes(state: &StateDict) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    for t in state.values() {
        let v = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
        out.extend(v.iter().flat_map(|x| x.to_le_bytes()));
    }
    Ok(out)
}

pub fn tensor_to_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub(crate) fn uniform(rng: &mut Rng, dims: &[usize], bound: f64, dtype: DType) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let dist = Uniform::new_inclusive(-bound, bound).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let values: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(values, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

pub(crate) fn constant(value: f64, dims: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::full(value, dims, &Device::Cpu)?.to_dtype(dtype)?)
}

/// Copy of `module` whose tensors share storage but are detached from any
/// variable, so forward passes through it accumulate no parameter gradients.
pub fn detached<M: Module + Clone>(module: &M) -> M {
    let mut copy = module.clone();
    copy.visit_mut("", &mut |_, t, _| *t = t.detach());
    copy
}
