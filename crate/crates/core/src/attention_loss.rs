//! Per-location normalised attention loss.
//!
//! Cross-attention maps of the part tokens are averaged over the selected
//! layers, normalised at every location so present parts share the attention
//! mass, and compared to the part masks with a binary cross-entropy. The
//! backward pass is written out by hand and reused by the training graph
//! through [`AttentionLossOp`].

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{input_err, Error, Result};
use crate::part_discovery::PartMaskSet;

/// Normalisation denominator floor.
pub const NORM_EPS: f64 = 1e-8;
/// Clamp applied to normalised attention before taking logs.
pub const LOG_CLAMP: f64 = 1e-6;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLossKind {
    /// Location-normalised binary cross-entropy.
    #[default]
    NormalizedEntropy,
    /// Mean squared error between the layer-mean map and the mask; ablation only.
    Mse,
}

/// Head-averaged cross-attention of the part tokens: `L x P x HW`, one column
/// per part slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionStack {
    layer_ids: Vec<String>,
    slots: Vec<usize>,
    cells: usize,
    values: Vec<f64>,
}

impl AttentionStack {
    pub fn new(layer_ids: Vec<String>, slots: Vec<usize>, cells: usize, values: Vec<f64>) -> Result<Self> {
        if layer_ids.is_empty() {
            return Err(input_err!("an attention stack needs at least one layer"));
        }
        let mut sorted = slots.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != slots.len() {
            return Err(input_err!("duplicate slot column in attention stack"));
        }
        if values.len() != layer_ids.len() * slots.len() * cells {
            return Err(input_err!(
                "attention stack has {} values, expected {}x{}x{cells}",
                values.len(),
                layer_ids.len(),
                slots.len()
            ));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Numeric(format!("attention value {v} outside [0, 1]")));
        }
        Ok(AttentionStack {
            layer_ids,
            slots,
            cells,
            values,
        })
    }

    pub fn layer_ids(&self) -> &[String] {
        &self.layer_ids
    }

    pub fn slots(&self) -> &[usize] {
        &self.slots
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ids.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, layer: usize, column: usize, cell: usize) -> f64 {
        self.values[(layer * self.slots.len() + column) * self.cells + cell]
    }

    /// `P x HW` mean over layers.
    pub fn layer_mean(&self) -> Vec<f64> {
        let p = self.slots.len();
        let l = self.num_layers() as f64;
        let mut out = vec![0.0; p * self.cells];
        for layer in self.values.chunks_exact(p * self.cells) {
            for (o, v) in out.iter_mut().zip(layer) {
                *o += v;
            }
        }
        out.iter_mut().for_each(|o| *o /= l);
        out
    }

    /// Keeps only the columns of the given slots (in their existing order).
    pub fn restrict_to(&self, keep: &[usize]) -> AttentionStack {
        let cols: Vec<usize> = (0..self.slots.len())
            .filter(|&c| keep.contains(&self.slots[c]))
            .collect();
        let mut values = Vec::with_capacity(self.num_layers() * cols.len() * self.cells);
        for l in 0..self.num_layers() {
            for &c in &cols {
                let start = (l * self.slots.len() + c) * self.cells;
                values.extend_from_slice(&self.values[start..start + self.cells]);
            }
        }
        AttentionStack {
            layer_ids: self.layer_ids.clone(),
            slots: cols.iter().map(|&c| self.slots[c]).collect(),
            cells: self.cells,
            values,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAttention {
    pub slots: Vec<usize>,
    pub cells: usize,
    /// `P x HW`.
    pub values: Vec<f64>,
    /// Per-location denominator before the floor was applied.
    pub denominators: Vec<f64>,
}

impl NormalizedAttention {
    pub fn column(&self, c: usize) -> &[f64] {
        &self.values[c * self.cells..(c + 1) * self.cells]
    }
}

pub fn normalize(stack: &AttentionStack) -> NormalizedAttention {
    let mean = stack.layer_mean();
    let (p, hw) = (stack.slots.len(), stack.cells);
    let mut denominators = vec![0.0; hw];
    for c in 0..p {
        for x in 0..hw {
            denominators[x] += mean[c * hw + x];
        }
    }
    let mut values = mean;
    for c in 0..p {
        for x in 0..hw {
            values[c * hw + x] /= denominators[x].max(NORM_EPS);
        }
    }
    NormalizedAttention {
        slots: stack.slots.clone(),
        cells: hw,
        values,
        denominators,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnLoss {
    pub value: f64,
    /// Number of (part, location) terms averaged; zero means no supervision.
    pub terms: usize,
}

impl AttnLoss {
    pub fn supervised(&self) -> bool {
        self.terms > 0
    }
}

fn check_masks(slots: &[usize], cells: usize, masks: &PartMaskSet) -> Result<()> {
    if masks.cells() != cells {
        return Err(input_err!(
            "attention has {cells} locations but masks are {}x{}",
            masks.resolution().0,
            masks.resolution().1
        ));
    }
    if let Some(s) = slots.iter().find(|&&s| s >= masks.num_slots()) {
        return Err(input_err!("attention column for slot {s} has no mask"));
    }
    Ok(())
}

fn clamp(a: f64) -> f64 {
    a.clamp(LOG_CLAMP, 1.0 - LOG_CLAMP)
}

/// Binary cross-entropy of normalised attention against the masks, averaged
/// over (present part, location) pairs. Columns of absent slots are skipped.
pub fn attention_loss(normed: &NormalizedAttention, masks: &PartMaskSet) -> Result<AttnLoss> {
    check_masks(&normed.slots, normed.cells, masks)?;
    let mut sum = 0.0;
    let mut terms = 0;
    for (c, &slot) in normed.slots.iter().enumerate() {
        if !masks.present(slot) {
            continue;
        }
        let target = masks.mask(slot);
        for (a, &s) in normed.column(c).iter().zip(target) {
            let a = clamp(*a);
            sum -= if s == 1 { a.ln() } else { (1.0 - a).ln() };
            terms += 1;
        }
    }
    Ok(AttnLoss {
        value: if terms == 0 { 0.0 } else { sum / terms as f64 },
        terms,
    })
}

pub fn total_loss(ldm_loss: f64, attn_loss: f64, lambda: f64) -> Result<f64> {
    if !ldm_loss.is_finite() || !attn_loss.is_finite() || !lambda.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss component (ldm={ldm_loss}, attn={attn_loss}, lambda={lambda})"
        )));
    }
    Ok(ldm_loss + lambda * attn_loss)
}

/// Loss and its gradient with respect to every raw stack value.
///
/// Absent slots are dropped before normalisation, so they neither contribute
/// terms nor change the other parts' normalised maps; their gradient is zero.
pub fn attention_objective(
    stack: &AttentionStack,
    masks: &PartMaskSet,
    kind: AttentionLossKind,
) -> Result<(AttnLoss, Vec<f64>)> {
    check_masks(&stack.slots, stack.cells, masks)?;
    let (p, hw, l) = (stack.slots.len(), stack.cells, stack.num_layers());
    let active: Vec<bool> = stack.slots.iter().map(|&s| masks.present(s)).collect();
    let n_active = active.iter().filter(|&&a| a).count();
    let terms = n_active * hw;
    let mut grad = vec![0.0; stack.values.len()];
    if terms == 0 {
        return Ok((AttnLoss { value: 0.0, terms: 0 }, grad));
    }
    let mean = stack.layer_mean();
    // Gradient with respect to the layer mean, P x HW.
    let mut g_mean = vec![0.0; p * hw];
    let mut sum = 0.0;
    match kind {
        AttentionLossKind::NormalizedEntropy => {
            for x in 0..hw {
                let denom: f64 = (0..p).filter(|&c| active[c]).map(|c| mean[c * hw + x]).sum();
                let d = denom.max(NORM_EPS);
                // dLoss/dA_hat for every active column at this location.
                let mut g_hat = vec![0.0; p];
                let mut weighted = 0.0;
                for c in (0..p).filter(|&c| active[c]) {
                    let s = masks.mask(stack.slots[c])[x] as f64;
                    let a_hat = mean[c * hw + x] / d;
                    let a = clamp(a_hat);
                    sum -= s * a.ln() + (1.0 - s) * (1.0 - a).ln();
                    let inside = a_hat > LOG_CLAMP && a_hat < 1.0 - LOG_CLAMP;
                    g_hat[c] = if inside {
                        (-s / a + (1.0 - s) / (1.0 - a)) / terms as f64
                    } else {
                        0.0
                    };
                    weighted += g_hat[c] * a_hat;
                }
                for c in (0..p).filter(|&c| active[c]) {
                    g_mean[c * hw + x] = if denom > NORM_EPS {
                        (g_hat[c] - weighted) / denom
                    } else {
                        g_hat[c] / NORM_EPS
                    };
                }
            }
        }
        AttentionLossKind::Mse => {
            for c in (0..p).filter(|&c| active[c]) {
                let target = masks.mask(stack.slots[c]);
                for x in 0..hw {
                    let diff = mean[c * hw + x] - target[x] as f64;
                    sum += diff * diff;
                    g_mean[c * hw + x] = 2.0 * diff / terms as f64;
                }
            }
        }
    }
    for layer in 0..l {
        for i in 0..p * hw {
            grad[layer * p * hw + i] = g_mean[i] / l as f64;
        }
    }
    Ok((
        AttnLoss {
            value: sum / terms as f64,
            terms,
        },
        grad,
    ))
}

/// Scalar loss over an `L x P x HW` tensor, differentiable through
/// [`attention_objective`]'s analytic gradient.
#[derive(Debug, Clone)]
pub struct AttentionLossOp {
    pub layer_ids: Vec<String>,
    pub slots: Vec<usize>,
    pub masks: PartMaskSet,
    pub kind: AttentionLossKind,
}

impl AttentionLossOp {
    fn stack_from(&self, values: Vec<f64>) -> candle_core::Result<AttentionStack> {
        let cells = self.masks.cells();
        // Softmax outputs can overshoot 1 by an ulp.
        let values = values.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        AttentionStack::new(self.layer_ids.clone(), self.slots.clone(), cells, values)
            .map_err(|e| candle_core::Error::Msg(e.to_string()))
    }

    fn objective(&self, values: Vec<f64>) -> candle_core::Result<(AttnLoss, Vec<f64>)> {
        let stack = self.stack_from(values)?;
        attention_objective(&stack, &self.masks, self.kind).map_err(|e| candle_core::Error::Msg(e.to_string()))
    }
}

impl CustomOp1 for AttentionLossOp {
    fn name(&self) -> &'static str {
        "part-attention-loss"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let values: Vec<f64> = match storage {
            CpuStorage::F64(v) => strided(v, layout)?,
            CpuStorage::F32(v) => strided(v, layout)?.into_iter().map(f64::from).collect(),
            _ => candle_core::bail!("attention loss expects f32 or f64 input"),
        };
        let (loss, _) = self.objective(values)?;
        let out = match storage {
            CpuStorage::F32(_) => CpuStorage::F32(vec![loss.value as f32]),
            _ => CpuStorage::F64(vec![loss.value]),
        };
        Ok((out, Shape::from(())))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let values = arg.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
        let (_, grad) = self.objective(values)?;
        let grad = Tensor::from_vec(grad, arg.shape(), arg.device())?.to_dtype(arg.dtype())?;
        Ok(Some(grad.broadcast_mul(grad_res)?))
    }
}

fn strided<T: Copy>(data: &[T], layout: &Layout) -> candle_core::Result<Vec<T>> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(data[a..b].to_vec()),
        None => candle_core::bail!("attention loss expects a contiguous tensor"),
    }
}

/// Head-averaged attention of the part-token columns for batch element `b`,
/// as an `L x P x N` tensor (still attached to the graph).
///
/// `maps` holds `(layer id, (B, heads, N, context))` probabilities as returned
/// by the denoiser.
pub fn collect_attention(
    maps: &[(String, Tensor)],
    layer_ids: &[String],
    b: usize,
    token_columns: &[usize],
) -> Result<Tensor> {
    if layer_ids.is_empty() {
        return Err(Error::Config("attention layer list is empty".into()));
    }
    let idx = Tensor::from_vec(
        token_columns.iter().map(|&c| c as u32).collect::<Vec<_>>(),
        token_columns.len(),
        &candle_core::Device::Cpu,
    )?;
    let mut layers = Vec::with_capacity(layer_ids.len());
    for id in layer_ids {
        let (_, probs) = maps.iter().find(|(name, _)| name == id).ok_or_else(|| {
            let known: Vec<&str> = maps.iter().map(|(n, _)| n.as_str()).collect();
            Error::Config(format!("unknown attention layer {id:?}; the backend has {known:?}"))
        })?;
        let context = probs.dim(3)?;
        if let Some(c) = token_columns.iter().find(|&&c| c >= context) {
            return Err(Error::Internal(format!(
                "token column {c} is outside the {context}-token context"
            )));
        }
        let head_mean = probs.get(b)?.mean(0)?;
        layers.push(head_mean.index_select(&idx, 1)?.t()?);
    }
    Ok(Tensor::stack(&layers, 0)?.contiguous()?)
}

impl AttentionStack {
    /// Detached copy of an `L x P x N` tensor from [`collect_attention`].
    pub fn from_tensor(t: &Tensor, layer_ids: Vec<String>, slots: Vec<usize>) -> Result<Self> {
        let cells = t.dim(2)?;
        let values = t
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .map(|v| v.clamp(0.0, 1.0))
            .collect();
        AttentionStack::new(layer_ids, slots, cells, values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> (AttentionStack, PartMaskSet) {
        let stack = AttentionStack::new(vec!["l0".into()], vec![1, 2], 2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let masks = PartMaskSet::new(3, 1, 2, vec![0, 0, 1, 0, 0, 1], vec![false, true, true]).unwrap();
        (stack, masks)
    }

    #[test]
    fn uniform_attention_costs_ln2() {
        let (stack, masks) = two_by_two();
        let loss = attention_loss(&normalize(&stack), &masks).unwrap();
        assert!((loss.value - std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(loss.terms, 4);
    }

    #[test]
    fn single_part_normalizes_to_one() {
        let stack = AttentionStack::new(vec!["a".into(), "b".into()], vec![0], 3, vec![0.2, 0.0, 0.7, 0.4, 0.0, 0.1]).unwrap();
        let n = normalize(&stack);
        assert_eq!(n.values, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn equal_maps_split_evenly() {
        let stack = AttentionStack::new(vec!["a".into()], vec![0, 1], 2, vec![0.3, 0.8, 0.3, 0.8]).unwrap();
        assert!(normalize(&stack).values.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn perfect_match_is_near_zero() {
        let stack = AttentionStack::new(vec!["a".into()], vec![0, 1], 2, vec![0.9, 0.0, 0.0, 0.6]).unwrap();
        let masks = PartMaskSet::new(2, 1, 2, vec![1, 0, 0, 1], vec![true, true]).unwrap();
        let loss = attention_loss(&normalize(&stack), &masks).unwrap();
        assert!(loss.value <= 1e-5);
    }

    #[test]
    fn all_absent_means_no_supervision() {
        let stack = AttentionStack::new(vec!["a".into()], vec![1], 2, vec![0.3, 0.4]).unwrap();
        let masks = PartMaskSet::new(2, 1, 2, vec![1, 1, 0, 0], vec![true, false]).unwrap();
        let loss = attention_loss(&normalize(&stack), &masks).unwrap();
        assert_eq!(loss, AttnLoss { value: 0.0, terms: 0 });
        assert!(!loss.supervised());
        let (obj, grad) = attention_objective(&stack, &masks, AttentionLossKind::NormalizedEntropy).unwrap();
        assert_eq!(obj.value, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn resolution_mismatch_is_an_input_error() {
        let (stack, _) = two_by_two();
        let masks = PartMaskSet::new(3, 1, 3, vec![0; 9], vec![false; 3]).unwrap();
        assert!(matches!(attention_loss(&normalize(&stack), &masks), Err(Error::Input(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        assert!((total_loss(1.0, 0.5, 0.01).unwrap() - 1.005).abs() < 1e-15);
        assert_eq!(total_loss(0.25, 3.0, 0.0).unwrap(), 0.25);
        assert!(matches!(total_loss(f64::NAN, 0.0, 0.01), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_out_of_range_attention() {
        assert!(AttentionStack::new(vec!["a".into()], vec![0], 1, vec![1.5]).is_err());
        assert!(AttentionStack::new(vec![], vec![0], 1, vec![]).is_err());
    }

    #[test]
    fn objective_matches_plain_loss() {
        let (stack, masks) = two_by_two();
        let (obj, _) = attention_objective(&stack, &masks, AttentionLossKind::NormalizedEntropy).unwrap();
        let plain = attention_loss(&normalize(&stack), &masks).unwrap();
        assert!((obj.value - plain.value).abs() < 1e-15);
    }

    #[test]
    fn custom_op_forward_and_backward() {
        let (stack, masks) = two_by_two();
        let op = AttentionLossOp {
            layer_ids: stack.layer_ids().to_vec(),
            slots: stack.slots().to_vec(),
            masks: masks.clone(),
            kind: AttentionLossKind::NormalizedEntropy,
        };
        let var = candle_core::Var::from_vec(vec![0.6f64, 0.2, 0.3, 0.5], (1, 2, 2), &candle_core::Device::Cpu).unwrap();
        let loss = var.as_tensor().apply_op1(op).unwrap();
        let grads = loss.backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let stack = AttentionStack::new(vec!["l0".into()], vec![1, 2], 2, vec![0.6, 0.2, 0.3, 0.5]).unwrap();
        let (expect_loss, expect) = attention_objective(&stack, &masks, AttentionLossKind::NormalizedEntropy).unwrap();
        assert!((loss.to_scalar::<f64>().unwrap() - expect_loss.value).abs() < 1e-15);
        assert_eq!(g, expect);
    }
}
