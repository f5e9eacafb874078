//! Multi-head self-attention and its augmented form, where exemplar keys
//! and values are concatenated behind the target's own so that target
//! queries can pull exemplar appearance.
//!
//! The concatenated logits split into an intra-target block and a
//! target-to-exemplar block; the latter is the implicit matching cost that
//! the adapter refines. Concatenation order is always target first, then
//! exemplar. Scaling is per-head: 1/sqrt(d/m).

use crate::error::{Error, Result};
use crate::numeric::{concat, Tensor};

/// Static description of one attention site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnLayerCfg {
    pub layer: usize,
    /// Token width d at this site.
    pub dim: usize,
    /// Head count m; d must be divisible by m.
    pub heads: usize,
    /// Spatial extent of the token grid.
    pub h: usize,
    pub w: usize,
    /// Whether exemplar keys/values are concatenated at this site.
    pub augmented: bool,
    /// Whether the 4D adapter refines this site's cross logits.
    pub adapted: bool,
}

impl AttnLayerCfg {
    pub fn new(
        layer: usize,
        dim: usize,
        heads: usize,
        h: usize,
        w: usize,
        augmented: bool,
        adapted: bool,
    ) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::config(format!(
                "attention layer {layer}: dim {dim} not divisible by {heads} heads"
            )));
        }
        if adapted && !augmented {
            return Err(Error::config(format!(
                "attention layer {layer}: adapted requires augmented"
            )));
        }
        if layer == 0 && adapted {
            return Err(Error::config(
                "attention layer 0 is never adapted (it precedes structure conditioning)"
                    .to_string(),
            ));
        }
        Ok(AttnLayerCfg { layer, dim, heads, h, w, augmented, adapted })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }
}

/// `[n, d] -> [m, n, d/m]`.
pub fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    if d % heads != 0 {
        return Err(Error::shape(format!("split_heads: {d} not divisible by {heads}")));
    }
    x.reshape(&[n, heads, d / heads])?.permute(&[1, 0, 2])
}

/// `[m, n, d/m] -> [n, d]`.
pub fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (m, n, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.permute(&[1, 0, 2])?.reshape(&[n, m * dh])
}

/// Per-head scaled logits `q k^T / sqrt(d/m)` for `[m, n, dh]` inputs.
pub fn scaled_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dh = q.shape()[2];
    q.matmul(&k.transpose_last2()?)
        .map(|a| a.scale(1.0 / (dh as f64).sqrt()))
}

/// Plain multi-head self-attention over token matrices `[n, d]`.
pub fn self_attention(q: &Tensor, k: &Tensor, v: &Tensor, cfg: &AttnLayerCfg) -> Result<Tensor> {
    if q.shape() != [cfg.tokens(), cfg.dim] {
        return Err(Error::shape(format!(
            "self_attention: q {:?} vs cfg [{}, {}]",
            q.shape(),
            cfg.tokens(),
            cfg.dim
        )));
    }
    let qh = split_heads(q, cfg.heads)?;
    let kh = split_heads(k, cfg.heads)?;
    let vh = split_heads(v, cfg.heads)?;
    let logits = scaled_logits(&qh, &kh)?;
    let weights = logits.softmax_lastdim()?;
    merge_heads(&weights.matmul(&vh)?)
}

/// Per-layer, per-timestep attention tensors of the augmented path, with the
/// head axis retained.
#[derive(Debug, Clone)]
pub struct AttnState {
    pub q_y: Tensor,
    pub k_y: Tensor,
    pub v_y: Tensor,
    pub k_x: Tensor,
    pub v_x: Tensor,
    /// Intra-target logits `[m, n, n]`.
    pub a_yy: Tensor,
    /// Target-to-exemplar logits `[m, n, n_x]` (the implicit matching cost).
    pub a_yx: Tensor,
    pub cfg: AttnLayerCfg,
    pub timestep: usize,
}

impl AttnState {
    /// Builds the augmented state from per-head tensors `[m, n, d/m]`.
    /// Exemplar tensors may have a different token count than the target's.
    pub fn build(
        q_y: Tensor,
        k_y: Tensor,
        v_y: Tensor,
        k_x: Tensor,
        v_x: Tensor,
        cfg: AttnLayerCfg,
        timestep: usize,
    ) -> Result<AttnState> {
        let m = cfg.heads;
        let dh = cfg.head_dim();
        let n = cfg.tokens();
        for (name, t, want_n) in [
            ("q_y", &q_y, n),
            ("k_y", &k_y, n),
            ("v_y", &v_y, n),
        ] {
            if t.shape() != [m, want_n, dh] {
                return Err(Error::shape(format!(
                    "attn state {name}: {:?} vs [{m}, {want_n}, {dh}]",
                    t.shape()
                )));
            }
        }
        if k_x.shape()[0] != m || k_x.shape()[2] != dh || k_x.shape() != v_x.shape() {
            return Err(Error::shape(format!(
                "attn state exemplar: k_x {:?} v_x {:?}",
                k_x.shape(),
                v_x.shape()
            )));
        }
        // One logits pass over the concatenated keys, split afterwards, so
        // concat(split) is the identity by construction.
        let k_cat = concat(&[k_y.clone(), k_x.clone()], 1)?;
        let full = scaled_logits(&q_y, &k_cat)?;
        let n_x = k_x.shape()[1];
        let a_yy = full.narrow(2, 0, n)?;
        let a_yx = full.narrow(2, n, n_x)?;
        Ok(AttnState { q_y, k_y, v_y, k_x, v_x, a_yy, a_yx, cfg, timestep })
    }

    /// The two blocks of the concatenated logits.
    pub fn split_logits(&self) -> (Tensor, Tensor) {
        (self.a_yy.clone(), self.a_yx.clone())
    }
}

/// Attention over the concatenated key axis. When `refined` is given it
/// replaces the target-to-exemplar logits block (shape-checked against it);
/// otherwise this is the plain augmented baseline.
///
/// Returns tokens `[n, d]`.
pub fn augmented_attention(state: &AttnState, refined: Option<&Tensor>) -> Result<Tensor> {
    let logits_yx = match refined {
        Some(r) => {
            if r.shape() != state.a_yx.shape() {
                return Err(Error::shape(format!(
                    "refined logits {:?} vs {:?}",
                    r.shape(),
                    state.a_yx.shape()
                )));
            }
            r.clone()
        }
        None => state.a_yx.clone(),
    };
    let logits = concat(&[state.a_yy.clone(), logits_yx], 2)?;
    let weights = logits.softmax_lastdim()?;
    let v_cat = concat(&[state.v_y.clone(), state.v_x.clone()], 1)?;
    merge_heads(&weights.matmul(&v_cat)?)
}
