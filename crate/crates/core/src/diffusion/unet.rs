//! The structure-conditioned denoiser.
//!
//! A small UNet over 32x32 RGB latents with two downsampling stages.
//! Label-map conditioning is embedded and added right after the first
//! downsampling block; the ten self-attention sites sit on the 8x8 trunk.
//! The same network serves both branches of the sampler: run in `Capture`
//! mode it records per-layer keys/values (the exemplar side), run in
//! `Augment` mode it consumes them, optionally refining the cross logits
//! with the adapter or the raw categorical mask.

use std::collections::BTreeMap;
use std::rc::Rc;

use crate::adapter::{self, AdapterStack};
use crate::attention::{
    augmented_attention, scaled_logits, self_attention, split_heads, AttnLayerCfg, AttnState,
};
use crate::error::{Error, Result};
use crate::numeric::{concat, ParamSet, Tensor};
use crate::scene::SegMap;
use crate::segcost::CatCost;

pub const ATTN_SITES: usize = 10;

#[derive(Debug, Clone)]
pub struct NetCfg {
    pub resolution: usize,
    pub ch0: usize,
    pub ch1: usize,
    pub ch2: usize,
    pub heads: usize,
    pub num_classes: usize,
    pub temb_dim: usize,
    pub groups: usize,
}

impl Default for NetCfg {
    fn default() -> Self {
        NetCfg {
            resolution: 32,
            ch0: 8,
            ch1: 16,
            ch2: 32,
            heads: 4,
            num_classes: 6,
            temb_dim: 32,
            groups: 4,
        }
    }
}

impl NetCfg {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % 4 != 0 {
            return Err(Error::config(format!(
                "resolution {} must be divisible by 4",
                self.resolution
            )));
        }
        for (name, c) in [("ch0", self.ch0), ("ch1", self.ch1), ("ch2", self.ch2)] {
            if c % self.groups != 0 {
                return Err(Error::config(format!(
                    "{name}={c} not divisible by norm groups {}",
                    self.groups
                )));
            }
        }
        if self.ch2 % self.heads != 0 {
            return Err(Error::config(format!(
                "ch2={} not divisible by {} heads",
                self.ch2, self.heads
            )));
        }
        Ok(())
    }

    /// Trunk resolution where attention runs.
    pub fn attn_hw(&self) -> usize {
        self.resolution / 4
    }

    /// Static configs of the ten attention sites: all augmented-capable,
    /// layer 0 never adapted.
    pub fn attn_layer_cfgs(&self) -> Result<Vec<AttnLayerCfg>> {
        (0..ATTN_SITES)
            .map(|layer| {
                AttnLayerCfg::new(
                    layer,
                    self.ch2,
                    self.heads,
                    self.attn_hw(),
                    self.attn_hw(),
                    true,
                    layer != 0,
                )
            })
            .collect()
    }
}

// ── Parameter plumbing ──────────────────────────────────────────────────

enum Init {
    Zeros,
    Ones,
    He,
    Xavier,
    Normal(f64),
}

enum Builder<'a> {
    Init { params: &'a mut ParamSet, seed: u64, counter: u64 },
    Bind(&'a ParamSet),
}

impl<'a> Builder<'a> {
    fn tensor(&mut self, path: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        match self {
            Builder::Init { params, seed, counter } => {
                let mut r = crate::rng::stream_rng(*seed, *counter);
                *counter += 1;
                let numel: usize = shape.iter().product();
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let data: Vec<f64> = match init {
                    Init::Zeros => vec![0.0; numel],
                    Init::Ones => vec![1.0; numel],
                    Init::He => {
                        let s = (2.0 / fan_in as f64).sqrt();
                        normals(numel, s, &mut r)
                    }
                    Init::Xavier => {
                        let s = (1.0 / fan_in as f64).sqrt();
                        normals(numel, s, &mut r)
                    }
                    Init::Normal(s) => normals(numel, s, &mut r),
                };
                let t = Tensor::from_vec(data, shape)?;
                params.insert(path, t.clone())?;
                Ok(t)
            }
            Builder::Bind(params) => {
                let t = params.tensor(path)?;
                if t.shape() != shape {
                    return Err(Error::shape(format!(
                        "parameter `{path}`: checkpoint shape {:?} vs expected {:?}",
                        t.shape(),
                        shape
                    )));
                }
                Ok(t)
            }
        }
    }
}

fn normals(n: usize, scale: f64, r: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
    use rand::Rng;
    (0..n).map(|_| r.sample::<f64, _>(rand_distr::StandardNormal) * scale).collect()
}

// ── Layers ──────────────────────────────────────────────────────────────

#[derive(Clone)]
struct Conv {
    w: Tensor,
    b: Tensor,
    stride: usize,
    pad: usize,
}

impl Conv {
    fn build(b: &mut Builder, path: &str, cout: usize, cin: usize, k: usize, stride: usize, init: Init) -> Result<Conv> {
        Ok(Conv {
            w: b.tensor(&format!("{path}.weight"), &[cout, cin, k, k], init)?,
            b: b.tensor(&format!("{path}.bias"), &[cout], Init::Zeros)?,
            stride,
            pad: (k - 1) / 2,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.conv2d(&self.w, self.stride, self.pad)?.add_bias_channels(&self.b)
    }
}

#[derive(Clone)]
struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn build(b: &mut Builder, path: &str, din: usize, dout: usize, init: Init) -> Result<Linear> {
        Ok(Linear {
            w: b.tensor(&format!("{path}.weight"), &[din, dout], init)?,
            b: b.tensor(&format!("{path}.bias"), &[dout], Init::Zeros)?,
        })
    }

    /// `[n, din] -> [n, dout]`.
    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w)?.add_bias_row(&self.b)
    }
}

#[derive(Clone)]
struct Norm {
    gamma: Tensor,
    beta: Tensor,
    groups: usize,
}

impl Norm {
    fn build(b: &mut Builder, path: &str, c: usize, groups: usize) -> Result<Norm> {
        Ok(Norm {
            gamma: b.tensor(&format!("{path}.gamma"), &[c], Init::Ones)?,
            beta: b.tensor(&format!("{path}.beta"), &[c], Init::Zeros)?,
            groups,
        })
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.group_norm(&self.gamma, &self.beta, self.groups, 1e-5)
    }
}

#[derive(Clone)]
struct ResBlock {
    norm1: Norm,
    conv1: Conv,
    temb: Linear,
    norm2: Norm,
    conv2: Conv,
}

impl ResBlock {
    fn build(b: &mut Builder, path: &str, c: usize, temb_dim: usize, groups: usize) -> Result<ResBlock> {
        Ok(ResBlock {
            norm1: Norm::build(b, &format!("{path}.norm1"), c, groups)?,
            conv1: Conv::build(b, &format!("{path}.conv1"), c, c, 3, 1, Init::He)?,
            temb: Linear::build(b, &format!("{path}.temb"), temb_dim, c, Init::Xavier)?,
            norm2: Norm::build(b, &format!("{path}.norm2"), c, groups)?,
            conv2: Conv::build(b, &format!("{path}.conv2"), c, c, 3, 1, Init::He)?,
        })
    }

    fn apply(&self, x: &Tensor, temb: &Tensor) -> Result<Tensor> {
        let c = self.conv1.w.shape()[0];
        let h = self.conv1.apply(&self.norm1.apply(x)?.silu())?;
        let shift = self.temb.apply(&temb.silu())?.reshape(&[c])?;
        let h = h.add_bias_channels(&shift)?;
        let h = self.conv2.apply(&self.norm2.apply(&h)?.silu())?;
        x.add(&h)
    }
}

#[derive(Clone)]
struct AttnSite {
    cfg: AttnLayerCfg,
    norm: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl AttnSite {
    fn build(b: &mut Builder, path: &str, cfg: AttnLayerCfg, groups: usize) -> Result<AttnSite> {
        let d = cfg.dim;
        Ok(AttnSite {
            cfg,
            norm: Norm::build(b, &format!("{path}.norm"), d, groups)?,
            q: Linear::build(b, &format!("{path}.q"), d, d, Init::Xavier)?,
            k: Linear::build(b, &format!("{path}.k"), d, d, Init::Xavier)?,
            v: Linear::build(b, &format!("{path}.v"), d, d, Init::Xavier)?,
            out: Linear::build(b, &format!("{path}.out"), d, d, Init::Normal(0.05))?,
        })
    }
}

// ── Run modes ───────────────────────────────────────────────────────────

/// Per-layer exemplar keys/values captured by an appearance pass, already
/// split into heads: `[m, n, d/m]`, gradient-detached.
#[derive(Debug, Clone)]
pub struct CapturedKv {
    pub layer: usize,
    pub k: Tensor,
    pub v: Tensor,
}

/// Categorical costs per adapted layer, prebuilt at each layer's resolution.
pub type LayerCosts = BTreeMap<usize, Rc<CatCost>>;

/// How the cross-image logits are treated at adapted sites.
pub enum RefineSpec<'a> {
    /// Plain augmented attention.
    Baseline,
    /// Residual 4D aggregation of implicit + categorical cost.
    Adapter { stack: &'a AdapterStack, costs: &'a LayerCosts },
    /// Hard categorical masking, no learned refinement.
    CatMask { costs: &'a LayerCosts },
}

/// Captured attention tensors for visualization.
#[derive(Debug)]
pub struct AttnProbe {
    /// Which site to record.
    pub layer: usize,
    pub data: Option<ProbeData>,
}

#[derive(Debug, Clone)]
pub struct ProbeData {
    pub a_yy: Tensor,
    pub a_yx: Tensor,
    /// Refined cross logits, present when an adapter/mask path ran.
    pub refined: Option<Tensor>,
    pub cfg: AttnLayerCfg,
    pub timestep: usize,
}

/// Attention behavior for one forward pass.
pub enum AttnRun<'a> {
    /// Plain self-attention everywhere.
    SelfOnly,
    /// Self-attention, recording each site's keys/values.
    Capture(&'a mut Vec<CapturedKv>),
    /// Augmented attention over captured exemplar keys/values.
    Augment {
        exemplar: &'a [CapturedKv],
        refine: RefineSpec<'a>,
        probe: Option<&'a mut AttnProbe>,
    },
}

// ── The denoiser ────────────────────────────────────────────────────────

pub struct DenoiserNet {
    pub cfg: NetCfg,
    conv_in: Conv,
    res0: ResBlock,
    down1: Conv,
    cond_embed: Tensor,
    cond_conv: Conv,
    res1: ResBlock,
    down2: Conv,
    trunk_res: Vec<Option<ResBlock>>,
    sites: Vec<AttnSite>,
    up1: Conv,
    res2: ResBlock,
    up2: Conv,
    norm_out: Norm,
    conv_out: Conv,
    temb1: Linear,
    temb2: Linear,
}

impl DenoiserNet {
    /// Creates parameters under `net.*` in `params`.
    pub fn init(cfg: &NetCfg, params: &mut ParamSet, seed: u64) -> Result<DenoiserNet> {
        Self::construct(cfg, Builder::Init { params, seed, counter: 0 })
    }

    /// Binds to previously created/loaded `net.*` parameters.
    pub fn bind(cfg: &NetCfg, params: &ParamSet) -> Result<DenoiserNet> {
        Self::construct(cfg, Builder::Bind(params))
    }

    fn construct(cfg: &NetCfg, mut b: Builder) -> Result<DenoiserNet> {
        cfg.validate()?;
        let (c0, c1, c2, g) = (cfg.ch0, cfg.ch1, cfg.ch2, cfg.groups);
        let site_cfgs = cfg.attn_layer_cfgs()?;
        let conv_in = Conv::build(&mut b, "net.conv_in", c0, 3, 3, 1, Init::He)?;
        let res0 = ResBlock::build(&mut b, "net.res0", c0, cfg.temb_dim, g)?;
        let down1 = Conv::build(&mut b, "net.down1", c1, c0, 3, 2, Init::He)?;
        let cond_embed =
            b.tensor("net.cond.embed", &[cfg.num_classes, c1], Init::Normal(0.5))?;
        // Zero-init so conditioning fades in during training.
        let cond_conv = Conv::build(&mut b, "net.cond.conv", c1, c1, 3, 1, Init::Zeros)?;
        let res1 = ResBlock::build(&mut b, "net.res1", c1, cfg.temb_dim, g)?;
        let down2 = Conv::build(&mut b, "net.down2", c2, c1, 3, 2, Init::He)?;
        let mut trunk_res = Vec::with_capacity(ATTN_SITES);
        let mut sites = Vec::with_capacity(ATTN_SITES);
        for (layer, site_cfg) in site_cfgs.into_iter().enumerate() {
            // A conv res-block ahead of every other attention site.
            trunk_res.push(if layer % 2 == 0 {
                Some(ResBlock::build(&mut b, &format!("net.blk{layer}.res"), c2, cfg.temb_dim, g)?)
            } else {
                None
            });
            sites.push(AttnSite::build(&mut b, &format!("net.attn.L{layer}"), site_cfg, g)?);
        }
        let up1 = Conv::build(&mut b, "net.up1", c1, c2, 3, 1, Init::He)?;
        let res2 = ResBlock::build(&mut b, "net.res2", c1, cfg.temb_dim, g)?;
        let up2 = Conv::build(&mut b, "net.up2", c0, c1, 3, 1, Init::He)?;
        let norm_out = Norm::build(&mut b, "net.norm_out", c0, g)?;
        let conv_out = Conv::build(&mut b, "net.conv_out", 3, c0, 3, 1, Init::Zeros)?;
        let temb1 = Linear::build(&mut b, "net.temb1", cfg.temb_dim, cfg.temb_dim, Init::Xavier)?;
        let temb2 = Linear::build(&mut b, "net.temb2", cfg.temb_dim, cfg.temb_dim, Init::Xavier)?;
        Ok(DenoiserNet {
            cfg: cfg.clone(),
            conv_in,
            res0,
            down1,
            cond_embed,
            cond_conv,
            res1,
            down2,
            trunk_res,
            sites,
            up1,
            res2,
            up2,
            norm_out,
            conv_out,
            temb1,
            temb2,
        })
    }

    pub fn attn_cfgs(&self) -> Vec<AttnLayerCfg> {
        self.sites.iter().map(|s| s.cfg).collect()
    }

    fn timestep_embedding(&self, t: usize) -> Result<Tensor> {
        let dim = self.cfg.temb_dim;
        let half = dim / 2;
        let mut data = vec![0.0; dim];
        for i in 0..half {
            let freq = (-(10_000.0f64.ln()) * i as f64 / (half - 1).max(1) as f64).exp();
            data[i] = (t as f64 * freq).sin();
            data[half + i] = (t as f64 * freq).cos();
        }
        Tensor::from_vec(data, &[1, dim])
    }

    fn seg_features(&self, seg: &SegMap) -> Result<Tensor> {
        let side = self.cfg.resolution / 2;
        let k = self.cfg.num_classes;
        if seg.num_classes != k {
            return Err(Error::config(format!(
                "segmentation has {} classes, net expects {k}",
                seg.num_classes
            )));
        }
        let small = seg.resize_nearest(side, side);
        let mut onehot = vec![0.0; side * side * k];
        for (i, &l) in small.labels.iter().enumerate() {
            onehot[i * k + l as usize] = 1.0;
        }
        let oh = Tensor::from_vec(onehot, &[side * side, k])?;
        let emb = oh.matmul(&self.cond_embed)?; // [n, ch1]
        let planes = emb
            .reshape(&[side, side, self.cfg.ch1])?
            .permute(&[2, 0, 1])?;
        self.cond_conv.apply(&planes)
    }

    fn attn_tokens(&self, site: &AttnSite, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let tokens = self
            .site_norm(site, x)?
            .permute(&[1, 2, 0])?
            .reshape(&[h * w, c])?;
        Ok((
            site.q.apply(&tokens)?,
            site.k.apply(&tokens)?,
            site.v.apply(&tokens)?,
        ))
    }

    fn site_norm(&self, site: &AttnSite, x: &Tensor) -> Result<Tensor> {
        site.norm.apply(x)
    }

    fn tokens_to_planes(&self, t: &Tensor, h: usize, w: usize) -> Result<Tensor> {
        let c = t.shape()[1];
        t.reshape(&[h, w, c])?.permute(&[2, 0, 1])
    }

    fn run_site(
        &self,
        layer: usize,
        x: &Tensor,
        t: usize,
        run: &mut AttnRun,
    ) -> Result<Tensor> {
        let site = &self.sites[layer];
        let (h, w) = (site.cfg.h, site.cfg.w);
        let (q, k, v) = self.attn_tokens(site, x)?;
        let attended = match run {
            AttnRun::SelfOnly => self_attention(&q, &k, &v, &site.cfg)?,
            AttnRun::Capture(store) => {
                let kh = split_heads(&k, site.cfg.heads)?;
                let vh = split_heads(&v, site.cfg.heads)?;
                store.push(CapturedKv { layer, k: kh.detach(), v: vh.detach() });
                self_attention(&q, &k, &v, &site.cfg)?
            }
            AttnRun::Augment { exemplar, refine, probe } => {
                let kv = exemplar
                    .iter()
                    .find(|c| c.layer == layer)
                    .ok_or_else(|| {
                        Error::state(format!("no captured exemplar keys/values for layer {layer}"))
                    })?;
                let state = AttnState::build(
                    split_heads(&q, site.cfg.heads)?,
                    split_heads(&k, site.cfg.heads)?,
                    split_heads(&v, site.cfg.heads)?,
                    kv.k.clone(),
                    kv.v.clone(),
                    site.cfg,
                    t,
                )?;
                let refined: Option<Tensor> = match refine {
                    RefineSpec::Baseline => None,
                    RefineSpec::Adapter { stack, costs } => {
                        if site.cfg.adapted {
                            match (stack.layer(layer), costs.get(&layer)) {
                                (Some(lp), Some(cost)) => Some(adapter::refine_logits(
                                    &state.a_yx,
                                    cost,
                                    lp,
                                    &stack.cfg,
                                )?),
                                _ => None,
                            }
                        } else {
                            None
                        }
                    }
                    RefineSpec::CatMask { costs } => {
                        if site.cfg.adapted {
                            costs
                                .get(&layer)
                                .map(|cost| adapter::refine_categorical_only(&state.a_yx, cost))
                                .transpose()?
                        } else {
                            None
                        }
                    }
                };
                if let Some(p) = probe.as_deref_mut() {
                    if p.layer == layer {
                        p.data = Some(ProbeData {
                            a_yy: state.a_yy.detach(),
                            a_yx: state.a_yx.detach(),
                            refined: refined.as_ref().map(|r| r.detach()),
                            cfg: site.cfg,
                            timestep: t,
                        });
                    }
                }
                augmented_attention(&state, refined.as_ref())?
            }
        };
        let out = site.out.apply(&attended)?;
        x.add(&self.tokens_to_planes(&out, h, w)?)
    }

    /// Predicts the noise in `z` at training timestep `t` under label-map
    /// conditioning.
    pub fn forward(&self, z: &Tensor, t: usize, seg: &SegMap, mut run: AttnRun) -> Result<Tensor> {
        let r = self.cfg.resolution;
        if z.shape() != [3, r, r] {
            return Err(Error::shape(format!(
                "denoiser input {:?}, want [3, {r}, {r}]",
                z.shape()
            )));
        }
        if seg.height != r || seg.width != r {
            return Err(Error::shape(format!(
                "segmentation {}x{} vs resolution {r}",
                seg.height, seg.width
            )));
        }
        let temb = {
            let e = self.timestep_embedding(t)?;
            self.temb2.apply(&self.temb1.apply(&e)?.silu())?
        };
        let mut x = self.conv_in.apply(z)?;
        x = self.res0.apply(&x, &temb)?;
        let skip32 = x.clone();
        x = self.down1.apply(&x)?;
        x = x.add(&self.seg_features(seg)?)?;
        x = self.res1.apply(&x, &temb)?;
        let skip16 = x.clone();
        x = self.down2.apply(&x)?;
        for layer in 0..ATTN_SITES {
            if let Some(res) = &self.trunk_res[layer] {
                x = res.apply(&x, &temb)?;
            }
            x = self.run_site(layer, &x, t, &mut run)?;
        }
        x = self.up1.apply(&x.upsample_nearest2x()?)?;
        x = x.add(&skip16)?;
        x = self.res2.apply(&x, &temb)?;
        x = self.up2.apply(&x.upsample_nearest2x()?)?;
        x = x.add(&skip32)?;
        let x = self.norm_out.apply(&x)?.silu();
        self.conv_out.apply(&x)
    }
}
