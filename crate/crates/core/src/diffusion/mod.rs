//! Noise schedule, denoiser network, and the dual-branch sampler.

mod sample;
mod schedule;
mod unet;

pub use sample::{
    build_layer_costs, ddim_invert, ddim_invert_with, ddim_sample_with, generate, generate_probe,
    image_to_tensor, tensor_to_image, GenMode, SampleProbe,
};
pub use schedule::{ddim_move, scale_mix, NoiseSchedule};
pub use unet::{
    AttnProbe, AttnRun, CapturedKv, DenoiserNet, LayerCosts, NetCfg, ProbeData, RefineSpec,
    ATTN_SITES,
};
