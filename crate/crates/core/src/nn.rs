//! Small tensor helpers shared by the token table and the toy backend.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Result};

pub const DTYPE: DType = DType::F64;

pub fn device() -> Device {
    Device::Cpu
}

/// `x @ w^T + b` for `w` of shape `(out, in)`.
pub fn linear(x: &Tensor, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
    let y = x.broadcast_matmul(&w.t()?)?;
    Ok(match b {
        Some(b) => y.broadcast_add(b)?,
        None => y,
    })
}

/// Layer norm over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + 1e-5)?.sqrt()?)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

pub fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Result<Tensor> {
    let dist = Normal::new(0.0, std).map_err(|e| input_err!("bad std {std}: {e}"))?;
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &device())?)
}

/// Fan-in scaled uniform init for a `(out, in)` weight.
pub fn fan_in_uniform(rng: &mut impl Rng, out: usize, inp: usize) -> Result<Tensor> {
    uniform(rng, &[out, inp], 1.0 / (inp as f64).sqrt())
}

pub fn zeros(shape: &[usize]) -> Result<Tensor> {
    Ok(Tensor::zeros(shape, DTYPE, &device())?)
}

/// Serializable copy of a tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(TensorRecord {
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DTYPE)?.to_vec1::<f64>()?,
        })
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let n: usize = self.shape.iter().product();
        if n != self.data.len() {
            return Err(input_err!("tensor record has {} values for shape {:?}", self.data.len(), self.shape));
        }
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), &device())?)
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;
pub type VarMap = BTreeMap<String, Var>;

pub fn record_map(map: &TensorMap) -> Result<BTreeMap<String, TensorRecord>> {
    map.iter()
        .map(|(k, t)| Ok((k.clone(), TensorRecord::from_tensor(t)?)))
        .collect()
}

pub fn restore_map(records: &BTreeMap<String, TensorRecord>) -> Result<TensorMap> {
    records
        .iter()
        .map(|(k, r)| Ok((k.clone(), r.to_tensor()?)))
        .collect()
}

pub fn vars_to_tensors(vars: &VarMap) -> TensorMap {
    vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
}

pub fn tensors_to_vars(map: &TensorMap) -> Result<VarMap> {
    map.iter()
        .map(|(k, t)| Ok((k.clone(), Var::from_tensor(&t.copy()?)?)))
        .collect()
}

pub fn get<'a>(map: &'a TensorMap, name: &str) -> Result<&'a Tensor> {
    map.get(name)
        .ok_or_else(|| crate::Error::Internal(format!("missing parameter {name}")))
}
