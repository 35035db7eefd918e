use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Modulation, ModelConfig};
use crate::tape::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zero,
    /// Normal with standard deviation `1 / sqrt(fan_in)`.
    FanIn,
    Normal(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(name: String, shape: Vec<usize>, init: Init) -> Self {
        Self { name, shape, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Indices of one block's parameters within the store.
#[derive(Debug, Clone, Copy)]
pub struct BlockParams {
    pub mod_u: usize,
    /// `V` for low rank, `M` for full rank.
    pub mod_v: usize,
    pub mod_bias: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub rel_bias: usize,
    pub proj_w: usize,
    pub proj_b: usize,
    pub mlp1_w: usize,
    pub mlp1_b: usize,
    pub mlp2_w: usize,
    pub mlp2_b: usize,
}

/// Indices of the network's parameters within the store.
#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub embed_p_w: usize,
    pub embed_p_b: usize,
    pub embed_s_w: usize,
    pub embed_s_b: usize,
    pub time1_w: usize,
    pub time1_b: usize,
    pub time2_w: usize,
    pub time2_b: usize,
    pub down_w: usize,
    pub up_w: usize,
    pub recover_s_w: usize,
    pub recover_s_b: usize,
    pub recover_p_w: usize,
    pub recover_p_b: usize,
    pub layers: [Vec<BlockParams>; 3],
}

/// Enumerates every parameter tensor of the network in storage order.
/// Nothing is allocated, so this also serves the full-size configuration.
pub fn param_specs(cfg: &ModelConfig) -> (Vec<ParamSpec>, ParamIndex) {
    let mut specs = Vec::new();
    let mut add = |name: String, shape: Vec<usize>, init: Init| {
        specs.push(ParamSpec::new(name, shape, init));
        specs.len() - 1
    };
    let e = cfg.embed_dim;
    let td = cfg.time_embed_dim;
    let [pz, ph, pw] = cfg.pressure_patch;
    let kp = cfg.n_pressure_vars * pz * ph * pw;
    let ks = (cfg.n_surface + cfg.cond_channels) * ph * pw;
    let ksr = cfg.n_surface * ph * pw;
    let f: usize = cfg.merge.iter().product();

    let embed_p_w = add("embed.pressure.weight".into(), vec![kp, e], Init::FanIn);
    let embed_p_b = add("embed.pressure.bias".into(), vec![e], Init::Zero);
    let embed_s_w = add("embed.surface.weight".into(), vec![ks, e], Init::FanIn);
    let embed_s_b = add("embed.surface.bias".into(), vec![e], Init::Zero);
    let time1_w = add("time.fc1.weight".into(), vec![td, td], Init::FanIn);
    let time1_b = add("time.fc1.bias".into(), vec![td], Init::Zero);
    let time2_w = add("time.fc2.weight".into(), vec![td, td], Init::FanIn);
    let time2_b = add("time.fc2.bias".into(), vec![td], Init::Zero);

    let mut layers: [Vec<BlockParams>; 3] = Default::default();
    let mut down_w = 0;
    let mut up_w = 0;
    for (li, &(c, heads, dims)) in cfg.layer_shapes().iter().enumerate() {
        if li == 1 {
            down_w = add("down.weight".into(), vec![f * e, 2 * e], Init::FanIn);
        }
        if li == 2 {
            // Zero so the middle layer starts switched off.
            up_w = add("up.weight".into(), vec![2 * e, f * e], Init::Zero);
        }
        let w = cfg.effective_window(dims);
        let table = (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1);
        let hidden = cfg.mlp_ratio * c;
        for b in 0..cfg.depths[li] {
            let p = format!("layer{}.{b}", li + 1);
            let (mod_u, mod_v) = match cfg.modulation {
                Modulation::LowRank => (
                    add(format!("{p}.mod.u"), vec![td, cfg.lowrank_r], Init::FanIn),
                    add(format!("{p}.mod.v"), vec![cfg.lowrank_r, 6 * c], Init::Zero),
                ),
                Modulation::FullRank => {
                    let m = add(format!("{p}.mod.m"), vec![td, 6 * c], Init::Zero);
                    (m, m)
                }
            };
            layers[li].push(BlockParams {
                mod_u,
                mod_v,
                mod_bias: add(format!("{p}.mod.bias"), vec![6 * c], Init::Zero),
                qkv_w: add(format!("{p}.attn.qkv.weight"), vec![c, 3 * c], Init::FanIn),
                qkv_b: add(format!("{p}.attn.qkv.bias"), vec![3 * c], Init::Zero),
                rel_bias: add(format!("{p}.attn.rel_bias"), vec![table, heads], Init::Normal(0.02)),
                proj_w: add(format!("{p}.attn.proj.weight"), vec![c, c], Init::FanIn),
                proj_b: add(format!("{p}.attn.proj.bias"), vec![c], Init::Zero),
                mlp1_w: add(format!("{p}.mlp.fc1.weight"), vec![c, hidden], Init::FanIn),
                mlp1_b: add(format!("{p}.mlp.fc1.bias"), vec![hidden], Init::Zero),
                mlp2_w: add(format!("{p}.mlp.fc2.weight"), vec![hidden, c], Init::FanIn),
                mlp2_b: add(format!("{p}.mlp.fc2.bias"), vec![c], Init::Zero),
            });
        }
    }
    let recover_s_w = add("recover.surface.weight".into(), vec![e, ksr], Init::FanIn);
    let recover_s_b = add("recover.surface.bias".into(), vec![ksr], Init::Zero);
    let recover_p_w = add("recover.pressure.weight".into(), vec![e, kp], Init::FanIn);
    let recover_p_b = add("recover.pressure.bias".into(), vec![kp], Init::Zero);

    let index = ParamIndex {
        embed_p_w,
        embed_p_b,
        embed_s_w,
        embed_s_b,
        time1_w,
        time1_b,
        time2_w,
        time2_b,
        down_w,
        up_w,
        recover_s_w,
        recover_s_b,
        recover_p_w,
        recover_p_b,
        layers,
    };
    (specs, index)
}

/// Enumerated parameter count: (total, modulation only).
pub fn enumerate_parameters(cfg: &ModelConfig) -> (usize, usize) {
    let (specs, _) = param_specs(cfg);
    let total = specs.iter().map(ParamSpec::numel).sum();
    let modulation = specs
        .iter()
        .filter(|s| s.name.contains(".mod."))
        .map(ParamSpec::numel)
        .sum();
    (total, modulation)
}

/// Allocates and initializes parameters from the configuration seed.
pub fn init_params(cfg: &ModelConfig, specs: &[ParamSpec]) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    specs
        .iter()
        .map(|s| {
            let n = s.numel();
            let std = match s.init {
                Init::Zero => return Tensor::zeros(s.shape.clone()),
                Init::FanIn => 1.0 / (s.shape[0] as f64).sqrt(),
                Init::Normal(std) => std,
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            Tensor::new(s.shape.clone(), (0..n).map(|_| dist.sample(&mut rng)).collect())
        })
        .collect()
}
