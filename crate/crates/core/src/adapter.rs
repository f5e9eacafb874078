//! The appearance-matching adapter: concatenates the implicit attention
//! cost with the categorical cost along a channel axis and aggregates the
//! 4D volume with a lightweight separable convolution network, emitting a
//! residual refinement of the cross-image logits.
//!
//! Each stage is a center-pivot separable 4D convolution: one 3x3 conv over
//! the exemplar plane applied at every target position, one 3x3 conv over
//! the target plane applied at every exemplar position, summed. Two stages
//! with a softplus between them; the final stage is zero-initialized so the
//! untrained adapter is exactly the identity through its residual.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{concat, ParamSet, Tensor};
use crate::segcost::CatCost;

#[derive(Debug, Clone, Copy)]
pub struct AdapterCfg {
    pub heads: usize,
    pub c_mid: usize,
    /// When set, every head runs through the same two-channel network
    /// (head + categorical cost) with no cross-head mixing.
    pub grouped: bool,
}

impl Default for AdapterCfg {
    fn default() -> Self {
        AdapterCfg { heads: 4, c_mid: 8, grouped: false }
    }
}

impl AdapterCfg {
    fn stage1_io(&self) -> (usize, usize) {
        if self.grouped {
            (2, self.c_mid)
        } else {
            (self.heads + 1, self.c_mid)
        }
    }

    fn stage2_io(&self) -> (usize, usize) {
        if self.grouped {
            (self.c_mid, 1)
        } else {
            (self.c_mid, self.heads)
        }
    }
}

/// One separable 4D conv: a pair of 3x3 kernels plus per-branch biases.
#[derive(Debug, Clone)]
pub struct Cp4dStage {
    pub w_kl: Tensor,
    pub b_kl: Tensor,
    pub w_ij: Tensor,
    pub b_ij: Tensor,
}

#[derive(Debug, Clone)]
pub struct AdapterLayer {
    pub stage1: Cp4dStage,
    pub stage2: Cp4dStage,
}

/// Adapter parameters for every adapted attention layer.
#[derive(Debug, Clone)]
pub struct AdapterStack {
    pub cfg: AdapterCfg,
    pub layers: BTreeMap<usize, AdapterLayer>,
}

fn stage_paths(layer: usize, stage: usize) -> [String; 4] {
    let base = format!("adapter.L{layer}.stage{stage}");
    [
        format!("{base}.kl.weight"),
        format!("{base}.kl.bias"),
        format!("{base}.ij.weight"),
        format!("{base}.ij.bias"),
    ]
}

impl AdapterStack {
    /// Creates fresh parameters for `adapted_layers` and registers them in
    /// `params` under `adapter.L<idx>.*`. The final stage starts at zero.
    pub fn init(
        cfg: AdapterCfg,
        adapted_layers: &[usize],
        params: &mut ParamSet,
        seed: u64,
    ) -> Result<AdapterStack> {
        let mut layers = BTreeMap::new();
        for &layer in adapted_layers {
            let mut r = crate::rng::stream_rng(seed, 0xada0 + layer as u64);
            let (in1, out1) = cfg.stage1_io();
            let (in2, out2) = cfg.stage2_io();
            let scale1 = (2.0 / (in1 as f64 * 9.0)).sqrt();
            let mut randw = |shape: &[usize], s: f64| -> Tensor {
                let mut t = Tensor::randn(shape, &mut r);
                t.update_data(|d| d.iter_mut().for_each(|v| *v *= s));
                t = Tensor::leaf_like(&t);
                t
            };
            let stage1 = Cp4dStage {
                w_kl: randw(&[out1, in1, 3, 3], scale1),
                b_kl: Tensor::zeros(&[out1]),
                w_ij: randw(&[out1, in1, 3, 3], scale1),
                b_ij: Tensor::zeros(&[out1]),
            };
            let stage2 = Cp4dStage {
                w_kl: Tensor::zeros(&[out2, in2, 3, 3]),
                b_kl: Tensor::zeros(&[out2]),
                w_ij: Tensor::zeros(&[out2, in2, 3, 3]),
                b_ij: Tensor::zeros(&[out2]),
            };
            for (stage_idx, stage) in [(1usize, &stage1), (2, &stage2)] {
                let paths = stage_paths(layer, stage_idx);
                params.insert(&paths[0], stage.w_kl.clone())?;
                params.insert(&paths[1], stage.b_kl.clone())?;
                params.insert(&paths[2], stage.w_ij.clone())?;
                params.insert(&paths[3], stage.b_ij.clone())?;
            }
            layers.insert(layer, AdapterLayer { stage1, stage2 });
        }
        Ok(AdapterStack { cfg, layers })
    }

    /// Binds to parameters already present in `params` (a loaded checkpoint).
    pub fn bind(cfg: AdapterCfg, params: &ParamSet) -> Result<AdapterStack> {
        let mut layers = BTreeMap::new();
        let layer_ids: std::collections::BTreeSet<usize> = params
            .paths()
            .filter_map(|p| {
                p.strip_prefix("adapter.L")
                    .and_then(|rest| rest.split('.').next())
                    .and_then(|n| n.parse().ok())
            })
            .collect();
        if layer_ids.is_empty() {
            return Err(Error::state("no adapter.* entries in parameter set".to_string()));
        }
        for layer in layer_ids {
            let grab = |stage: usize| -> Result<Cp4dStage> {
                let paths = stage_paths(layer, stage);
                Ok(Cp4dStage {
                    w_kl: params.tensor(&paths[0])?,
                    b_kl: params.tensor(&paths[1])?,
                    w_ij: params.tensor(&paths[2])?,
                    b_ij: params.tensor(&paths[3])?,
                })
            };
            let stage1 = grab(1)?;
            let (in1, out1) = cfg.stage1_io();
            if stage1.w_kl.shape() != [out1, in1, 3, 3] {
                return Err(Error::shape(format!(
                    "adapter L{layer} stage1 weights {:?}, expected [{out1}, {in1}, 3, 3]",
                    stage1.w_kl.shape()
                )));
            }
            layers.insert(layer, AdapterLayer { stage1, stage2: grab(2)? });
        }
        Ok(AdapterStack { cfg, layers })
    }

    pub fn layer(&self, idx: usize) -> Option<&AdapterLayer> {
        self.layers.get(&idx)
    }
}

impl Tensor {
    /// Fresh untracked leaf sharing nothing with `t`.
    fn leaf_like(t: &Tensor) -> Tensor {
        Tensor::from_vec(t.to_vec(), t.shape()).expect("leaf_like")
    }
}

/// Concatenates the per-head implicit cost `[m, h, w, h2, w2]` with the
/// categorical cost as channel `m`.
pub fn build_r(a: &Tensor, cost: &CatCost) -> Result<Tensor> {
    if a.rank() != 5 {
        return Err(Error::shape(format!("build_r: implicit cost rank {}", a.rank())));
    }
    let (h, w, h2, w2) = (a.shape()[1], a.shape()[2], a.shape()[3], a.shape()[4]);
    if cost.shape != (h, w, h2, w2) {
        return Err(Error::shape(format!(
            "build_r: categorical cost {:?} vs implicit {:?}",
            cost.shape,
            a.shape()
        )));
    }
    let c = Tensor::from_vec(cost.values.clone(), &[1, h, w, h2, w2])?;
    concat(&[a.clone(), c], 0)
}

/// Applies one center-pivot stage to `[c_in, h, w, h2, w2]`.
fn cp4d_stage(x: &Tensor, stage: &Cp4dStage) -> Result<Tensor> {
    let (c_in, h, w, h2, w2) = (
        x.shape()[0],
        x.shape()[1],
        x.shape()[2],
        x.shape()[3],
        x.shape()[4],
    );
    let c_out = stage.w_kl.shape()[0];
    // Conv over the exemplar plane, batched over target positions.
    let kl = x
        .permute(&[1, 2, 0, 3, 4])?
        .reshape(&[h * w, c_in, h2, w2])?
        .conv2d(&stage.w_kl, 1, 1)?
        .add_bias_channels(&stage.b_kl)?
        .reshape(&[h, w, c_out, h2, w2])?
        .permute(&[2, 0, 1, 3, 4])?;
    // Conv over the target plane, batched over exemplar positions.
    let ij = x
        .permute(&[3, 4, 0, 1, 2])?
        .reshape(&[h2 * w2, c_in, h, w])?
        .conv2d(&stage.w_ij, 1, 1)?
        .add_bias_channels(&stage.b_ij)?
        .reshape(&[h2, w2, c_out, h, w])?
        .permute(&[2, 3, 4, 0, 1])?;
    kl.add(&ij)
}

/// The aggregation network: two separable stages with a softplus between.
/// Input `[m(+1), h, w, h2, w2]`, output `[m, h, w, h2, w2]` (grouped mode
/// routes every head through the same two-channel network).
pub fn phi_forward(r: &Tensor, layer: &AdapterLayer, cfg: &AdapterCfg) -> Result<Tensor> {
    if !cfg.grouped {
        let s1 = cp4d_stage(r, &layer.stage1)?;
        return cp4d_stage(&s1.softplus(), &layer.stage2);
    }
    let m = cfg.heads;
    let cat_channel = r.narrow(0, m, 1)?;
    let mut outs = Vec::with_capacity(m);
    for head in 0..m {
        let rj = concat(&[r.narrow(0, head, 1)?, cat_channel.clone()], 0)?;
        let s1 = cp4d_stage(&rj, &layer.stage1)?;
        outs.push(cp4d_stage(&s1.softplus(), &layer.stage2)?);
    }
    concat(&outs, 0)
}

/// Residual refinement `O = phi(concat(A, C)) + A` on a 5D implicit cost.
pub fn refine(a: &Tensor, cost: &CatCost, layer: &AdapterLayer, cfg: &AdapterCfg) -> Result<Tensor> {
    let r = build_r(a, cost)?;
    phi_forward(&r, layer, cfg)?.add(a)
}

/// Refinement entry point for attention-shaped logits `[m, n, n_x]` with
/// `n = h*w` and `n_x = h2*w2` taken from the categorical cost.
pub fn refine_logits(
    a_yx: &Tensor,
    cost: &CatCost,
    layer: &AdapterLayer,
    cfg: &AdapterCfg,
) -> Result<Tensor> {
    let (h, w, h2, w2) = cost.shape;
    let m = a_yx.shape()[0];
    if a_yx.shape() != [m, h * w, h2 * w2] {
        return Err(Error::shape(format!(
            "refine_logits: logits {:?} vs cost {:?}",
            a_yx.shape(),
            cost.shape
        )));
    }
    let a5 = a_yx.reshape(&[m, h, w, h2, w2])?;
    refine(&a5, cost, layer, cfg)?.reshape(&[m, h * w, h2 * w2])
}

/// Ablation path: masks the implicit cost with the categorical cost
/// directly. Where C = 0 the logit drops to -1e9, unless the whole row has
/// no C = 1 entry, in which case the row is left untouched so its softmax
/// stays well-defined.
///
/// Inference-only: the output is a fresh constant tensor.
pub fn refine_categorical_only(a_yx: &Tensor, cost: &CatCost) -> Result<Tensor> {
    const MASKED: f64 = -1e9;
    let m = a_yx.shape()[0];
    let rows = cost.rows();
    let cols = cost.cols();
    if a_yx.shape() != [m, rows, cols] {
        return Err(Error::shape(format!(
            "refine_categorical_only: logits {:?} vs cost {:?}",
            a_yx.shape(),
            cost.shape
        )));
    }
    let mut out = a_yx.to_vec();
    for row in 0..rows {
        let crow = &cost.values[row * cols..(row + 1) * cols];
        if crow.iter().all(|&v| v == 0.0) {
            continue;
        }
        for head in 0..m {
            let base = (head * rows + row) * cols;
            for (c, &cv) in crow.iter().enumerate() {
                if cv == 0.0 {
                    out[base + c] = MASKED;
                }
            }
        }
    }
    Tensor::from_vec(out, a_yx.shape())
}
