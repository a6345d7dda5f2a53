use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Activations captured for one MLP block.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    /// Activation pattern `O_l` (`B × T × d_ff`): the MLP hidden output after
    /// the nonlinearity and before the second projection or gating product.
    pub pattern: Var,
    /// Input to the first MLP projection (`B × T × d_model`), absent when
    /// the block was skipped.
    pub mlp_input: Option<Var>,
    pub skipped: bool,
}

/// Per-layer activation patterns of one traced forward pass.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
    /// Validity mask (`B × T`) of the rows the MLP blocks processed,
    /// including virtual prompt/prefix rows.
    pub mask: Tensor,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn pattern_values<'g>(&self, g: &'g Graph) -> Vec<&'g Tensor> {
        self.layers.iter().map(|l| g.value(l.pattern)).collect()
    }

    /// Feature maps `s_l` for every layer.
    pub fn feature_maps(&self, g: &mut Graph) -> Result<Vec<Var>> {
        self.layers
            .iter()
            .map(|l| feature_map(g, l.pattern, &self.mask))
            .collect()
    }
}

/// Mean of `pattern` (`B × T × F`) over all unmasked `(b, t)` positions.
pub fn feature_map(g: &mut Graph, pattern: Var, mask: &Tensor) -> Result<Var> {
    let shape = g.shape(pattern).to_vec();
    if shape.len() != 3 || mask.shape() != &shape[..2] {
        return Err(Error::dim(
            "feature_map",
            format!("pattern {shape:?} with mask {:?}", mask.shape()),
        ));
    }
    let valid = mask.data().iter().filter(|&&m| m != 0.0).count();
    if valid == 0 {
        return Err(Error::contract("feature map over an all-masked batch"));
    }
    let m = g.constant(mask.reshaped(vec![shape[0], shape[1], 1])?);
    let kept = g.mul(pattern, m)?;
    let total = g.sum_axes(kept, &[0, 1])?;
    g.scale(total, 1.0 / valid as f64)
}

/// Mask broadcastable over a `B × T × F` tensor.
pub(crate) fn mask_3d(g: &mut Graph, mask: &Tensor) -> Result<Var> {
    let s = mask.shape();
    Ok(g.constant(mask.reshaped(vec![s[0], s[1], 1])?))
}
