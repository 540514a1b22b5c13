//! Straight-through gradients: the loss is evaluated at `Π ⊙ w` and the
//! resulting gradient is applied to all of `w` as if masking were the
//! identity. SR-STE adds `λ (1 - Π) ⊙ w` on the masked layers.

use crate::error::{dim, Result};
use crate::masks::{LayerMasks, SparsityPlan};
use crate::models::{loss_and_grad, Batch, ModelSpec, ParamSet};

#[derive(Debug, Clone, PartialEq)]
pub struct SteOutput {
    /// Loss at the masked point.
    pub loss: f64,
    pub grads: ParamSet,
    pub masks: LayerMasks,
}

pub fn ste_grad_with_masks(
    spec: &ModelSpec,
    params: &ParamSet,
    masks: &LayerMasks,
    batch: &Batch,
) -> Result<(f64, ParamSet)> {
    let masked = masks.apply(params)?;
    loss_and_grad(spec, &masked, batch)
}

/// Masks are computed from the current weights of every planned layer.
pub fn ste_grad(spec: &ModelSpec, params: &ParamSet, plan: &SparsityPlan, batch: &Batch) -> Result<SteOutput> {
    plan.validate(params)?;
    let masks = plan.compute_masks(params, None)?;
    let (loss, grads) = ste_grad_with_masks(spec, params, &masks, batch)?;
    Ok(SteOutput { loss, grads, masks })
}

/// Adds `λ (1 - Π) ⊙ w` to the gradient of every masked layer.
pub fn srste_regularize(grads: &mut ParamSet, params: &ParamSet, masks: &LayerMasks, lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) {
        return Err(crate::Error::Domain(format!("SR-STE λ must be non-negative, got {lambda}")));
    }
    if lambda == 0.0 {
        return Ok(());
    }
    for (name, mask) in masks.iter() {
        let w = params.get(name).ok_or_else(|| dim(format!("no weights for mask {name}")))?;
        let g = grads.get_mut(name).ok_or_else(|| dim(format!("no gradient for mask {name}")))?;
        let pi = mask.values().data();
        for ((gi, wi), p) in g.data_mut().iter_mut().zip(w.data()).zip(pi) {
            *gi += lambda * (1.0 - p) * wi;
        }
    }
    Ok(())
}

pub fn srste_grad_with_masks(
    spec: &ModelSpec,
    params: &ParamSet,
    masks: &LayerMasks,
    batch: &Batch,
    lambda: f64,
) -> Result<(f64, ParamSet)> {
    let (loss, mut grads) = ste_grad_with_masks(spec, params, masks, batch)?;
    srste_regularize(&mut grads, params, masks, lambda)?;
    Ok((loss, grads))
}

pub fn srste_grad(
    spec: &ModelSpec,
    params: &ParamSet,
    plan: &SparsityPlan,
    batch: &Batch,
    lambda: f64,
) -> Result<SteOutput> {
    let mut out = ste_grad(spec, params, plan, batch)?;
    srste_regularize(&mut out.grads, params, &out.masks, lambda)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::{Mask, NMRatio};
    use crate::models::{forward_loss, grad, Activation};
    use crate::tensor::Tensor;

    /// ½(uᵀx - y)² with y = 2 so the residual at u = Π⊙w = [1, 0] is 1 and
    /// the gradient is exactly x.
    fn linear_case() -> (ModelSpec, ParamSet, LayerMasks, Batch) {
        let spec = ModelSpec::linear(2, 1);
        let mut params = ParamSet::new();
        params.insert("linear.weight", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap());
        let mut masks = LayerMasks::new();
        masks.insert(
            "linear.weight",
            Mask::from_tensor(Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap(), NMRatio::new(1, 2).unwrap()).unwrap(),
        );
        let batch = Batch {
            inputs: Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(),
            targets: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        };
        (spec, params, masks, batch)
    }

    #[test]
    fn ste_linear_oracle() {
        let (spec, params, masks, batch) = linear_case();
        let (_, g) = ste_grad_with_masks(&spec, &params, &masks, &batch).unwrap();
        assert_eq!(g.get("linear.weight").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn srste_linear_oracle() {
        let (spec, params, masks, batch) = linear_case();
        let (_, g) = srste_grad_with_masks(&spec, &params, &masks, &batch, 0.01).unwrap();
        let g = g.get("linear.weight").unwrap().data();
        assert_eq!(g[0], 3.0);
        assert!((g[1] - 4.02).abs() < 1e-15);
        let (_, g0) = srste_grad_with_masks(&spec, &params, &masks, &batch, 0.0).unwrap();
        let (_, gs) = ste_grad_with_masks(&spec, &params, &masks, &batch).unwrap();
        assert_eq!(g0, gs);
        assert!(srste_grad_with_masks(&spec, &params, &masks, &batch, -1.0).is_err());
    }

    fn mlp_case() -> (ModelSpec, ParamSet, Batch) {
        let spec = ModelSpec::mlp(vec![4, 8, 3], Activation::Tanh);
        let params = spec.init_params(17).unwrap();
        let batch = Batch {
            inputs: Tensor::new(vec![2, 4], vec![0.1, -0.4, 1.0, 0.3, 2.0, 0.0, -1.0, 0.5]).unwrap(),
            targets: Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap(),
        };
        (spec, params, batch)
    }

    #[test]
    fn dense_ratio_reduces_to_plain_grad() {
        let (spec, params, batch) = mlp_case();
        let plan = SparsityPlan::uniform_weights(&params, NMRatio::new(4, 4).unwrap());
        let out = ste_grad(&spec, &params, &plan, &batch).unwrap();
        assert_eq!(out.grads, grad(&spec, &params, &batch).unwrap());
        let sr = srste_grad(&spec, &params, &plan, &batch, 0.5).unwrap();
        assert_eq!(sr.grads, out.grads);
    }

    #[test]
    fn masked_forward_matches_loss_at_masked_weights() {
        let (spec, params, batch) = mlp_case();
        let plan = SparsityPlan::new().with_layer("fc0.weight", NMRatio::new(1, 4).unwrap());
        let out = ste_grad(&spec, &params, &plan, &batch).unwrap();
        let masked = out.masks.apply(&params).unwrap();
        assert_eq!(out.loss, forward_loss(&spec, &masked, &batch).unwrap());
        // straight-through: pruned coordinates still receive gradient
        let g = out.grads.get("fc0.weight").unwrap().data();
        let pi = out.masks.get("fc0.weight").unwrap().values().data();
        assert!(g.iter().zip(pi).any(|(g, p)| *p == 0.0 && *g != 0.0));
    }
}
