//! Time-modulated windowed-attention velocity network.
//!
//! Pressure-level variables are cut into 3D patches, surface variables and
//! conditioning channels into 2D patches, and both are embedded into one latent
//! map whose depth axis holds the surface slab first. Three layers of
//! attention blocks follow, the middle one at reduced resolution and doubled
//! width; the first layer's output is added back after the second and third.
//! Every block is modulated by the flow time through a low-rank projection
//! whose output starts at zero, so a fresh network is the identity on its
//! latent map.

mod config;
pub mod layout;
mod params;

use std::sync::Arc;

use thiserror::Error;

pub use config::{ModelConfig, Modulation};
pub use layout::{Layout, WindowLayout};
pub use params::{enumerate_parameters, init_params, param_specs, BlockParams, Init, ParamIndex, ParamSpec};

use crate::tape::{AttnSpec, Graph, Tensor, Var};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite activations after {0}")]
    NonFinite(String),
    #[error("parameter {name}: expected shape {expected:?}, found {found:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("input has {found} values, expected {expected}")]
    InputSize { expected: usize, found: usize },
}

/// Standard sin/cos frequency ladder: first half sines, second half cosines.
pub fn sinusoidal_time_embed(t: f64, dim: usize) -> Result<Vec<f64>, NetError> {
    if dim == 0 || dim % 2 != 0 {
        return Err(NetError::Config(format!("time embedding dim {dim} must be even")));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|k| (-(10_000f64).ln() * k as f64 / half as f64).exp())
        .collect();
    let mut out: Vec<f64> = freqs.iter().map(|f| (t * f).sin()).collect();
    out.extend(freqs.iter().map(|f| (t * f).cos()));
    Ok(out)
}

/// Largest absolute contribution of one residual sub-block.
#[derive(Debug, Clone, PartialEq)]
pub struct SubblockTrace {
    pub name: String,
    pub max_contribution: f64,
}

#[derive(Debug, Clone)]
pub struct VelocityNet {
    pub config: ModelConfig,
    pub specs: Vec<ParamSpec>,
    pub index: ParamIndex,
    pub params: Vec<Tensor>,
    layout: Arc<Layout>,
}

impl VelocityNet {
    /// Fresh network initialized from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, NetError> {
        config.validate()?;
        let (specs, index) = param_specs(&config);
        let params = init_params(&config, &specs);
        let layout = Arc::new(Layout::new(&config));
        Ok(Self {
            config,
            specs,
            index,
            params,
            layout,
        })
    }

    /// Network with the given parameter tensors, in `param_specs` order.
    pub fn from_params(config: ModelConfig, params: Vec<Tensor>) -> Result<Self, NetError> {
        let mut net = Self::new(config)?;
        if params.len() != net.specs.len() {
            return Err(NetError::Config(format!(
                "expected {} parameter tensors, found {}",
                net.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in net.specs.iter().zip(&params) {
            if spec.shape != p.shape {
                return Err(NetError::ParamShape {
                    name: spec.name.clone(),
                    expected: spec.shape.clone(),
                    found: p.shape.clone(),
                });
            }
        }
        net.params = params;
        Ok(net)
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn state_len(&self) -> usize {
        self.config.n_channels() * self.config.n_lat * self.config.n_lon
    }

    pub fn cond_len(&self) -> usize {
        self.config.cond_channels * self.config.n_lat * self.config.n_lon
    }

    fn p<'a>(&'a self, g: &mut Graph<'a>, id: usize) -> Var {
        g.param(id, &self.params[id])
    }

    fn linear<'a>(&'a self, g: &mut Graph<'a>, x: Var, w: usize, b: Option<usize>) -> Var {
        let wv = self.p(g, w);
        let y = g.matmul(x, wv);
        match b {
            Some(b) => {
                let bv = self.p(g, b);
                g.add_row_bias(y, bv)
            }
            None => y,
        }
    }

    fn check_inputs(&self, g: &Graph, x: Var, cond: Var) -> Result<(), NetError> {
        for (v, expected) in [(x, self.state_len()), (cond, self.cond_len())] {
            let found = g.value(v).len();
            if found != expected {
                return Err(NetError::InputSize { expected, found });
            }
        }
        Ok(())
    }

    /// Patch embedding of `x` (flat `C x H x W`) with conditioning `cond`
    /// (flat `cond_channels x H x W`); returns the `[tokens, embed_dim]` latent.
    pub fn embed<'a>(&'a self, g: &mut Graph<'a>, x: Var, cond: Var) -> Result<Var, NetError> {
        self.check_inputs(g, x, cond)?;
        let lay = &self.layout;
        let ix = &self.index;
        let e = self.config.embed_dim;
        let [d, hl, wl] = lay.dims;
        let n = self.state_len() + self.cond_len();
        let xc = g.concat(&[x, cond], vec![n]);
        let pe = g.gather(
            xc,
            lay.embed_pressure.clone(),
            vec![(d - 1) * hl * wl, lay.pressure_patch_len],
        );
        let pe = self.linear(g, pe, ix.embed_p_w, Some(ix.embed_p_b));
        let se = g.gather(xc, lay.embed_surface.clone(), vec![hl * wl, lay.surface_patch_len]);
        let se = self.linear(g, se, ix.embed_s_w, Some(ix.embed_s_b));
        Ok(g.concat(&[se, pe], vec![d * hl * wl, e]))
    }

    /// Inverse of `embed`: per-token linear recovery, then cropping to the grid.
    pub fn recover<'a>(&'a self, g: &mut Graph<'a>, latent: Var) -> Var {
        let lay = &self.layout;
        let ix = &self.index;
        let e = self.config.embed_dim;
        let [d, hl, wl] = lay.dims;
        let ns = hl * wl;
        let s = g.slice(latent, 0, ns * e, vec![ns, e]);
        let p = g.slice(latent, ns * e, (d - 1) * ns * e, vec![(d - 1) * ns, e]);
        let rs = self.linear(g, s, ix.recover_s_w, Some(ix.recover_s_b));
        let rp = self.linear(g, p, ix.recover_p_w, Some(ix.recover_p_b));
        let total = ns * lay.surface_out_len + (d - 1) * ns * lay.pressure_patch_len;
        let cat = g.concat(&[rs, rp], vec![total]);
        g.gather(cat, lay.recover.clone(), vec![self.state_len()])
    }

    /// `silu` of the time features that feed every block's modulation.
    fn time_features<'a>(&'a self, g: &mut Graph<'a>, t: f64) -> Result<Var, NetError> {
        let td = self.config.time_embed_dim;
        let emb = sinusoidal_time_embed(t * self.config.time_scale, td)?;
        let emb = g.constant(Tensor::new(vec![1, td], emb));
        let h = self.linear(g, emb, self.index.time1_w, Some(self.index.time1_b));
        let h = g.silu(h);
        let h = self.linear(g, h, self.index.time2_w, Some(self.index.time2_b));
        Ok(g.silu(h))
    }

    /// The six modulation chunks (scale, shift, gate for attention, then MLP).
    pub fn modulation<'a>(&'a self, g: &mut Graph<'a>, t_act: Var, bp: &BlockParams, c: usize) -> [Var; 6] {
        let m = match self.config.modulation {
            Modulation::LowRank => {
                let u = self.linear(g, t_act, bp.mod_u, None);
                self.linear(g, u, bp.mod_v, Some(bp.mod_bias))
            }
            Modulation::FullRank => self.linear(g, t_act, bp.mod_v, Some(bp.mod_bias)),
        };
        std::array::from_fn(|k| g.slice(m, k * c, c, vec![c]))
    }

    #[allow(clippy::too_many_arguments)]
    fn block<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        t_act: Var,
        bp: &BlockParams,
        wl: &WindowLayout,
        heads: usize,
        c: usize,
        name: &str,
        trace: &mut Option<&mut Vec<SubblockTrace>>,
    ) -> Result<Var, NetError> {
        let n = g.value(x).len() / c;
        let [scale1, shift1, gate1, scale2, shift2, gate2] = self.modulation(g, t_act, bp, c);

        let h = g.layer_norm(x);
        let h = g.modulate(h, scale1, shift1);
        let hw = g.gather(h, wl.partition.clone(), vec![wl.n_windows * wl.tokens, c]);
        let qkv = self.linear(g, hw, bp.qkv_w, Some(bp.qkv_b));
        let rel = self.p(g, bp.rel_bias);
        let spec = AttnSpec {
            n_windows: wl.n_windows,
            tokens: wl.tokens,
            heads,
            dim: c,
            rel_index: wl.rel_index.clone(),
            mask: wl.mask.clone(),
        };
        let a = g.window_attention(qkv, rel, spec);
        let a = self.linear(g, a, bp.proj_w, Some(bp.proj_b));
        let a = g.gather(a, wl.merge.clone(), vec![n, c]);
        record(g, trace, &format!("{name}.attn"), gate1, a);
        let x = g.gated_add(x, gate1, a);

        let h = g.layer_norm(x);
        let h = g.modulate(h, scale2, shift2);
        let h = self.linear(g, h, bp.mlp1_w, Some(bp.mlp1_b));
        let h = g.gelu(h);
        let h = self.linear(g, h, bp.mlp2_w, Some(bp.mlp2_b));
        record(g, trace, &format!("{name}.mlp"), gate2, h);
        let x = g.gated_add(x, gate2, h);

        if g.value(x).data.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite(name.to_string()));
        }
        Ok(x)
    }

    fn layer<'a>(
        &'a self,
        g: &mut Graph<'a>,
        mut h: Var,
        t_act: Var,
        li: usize,
        trace: &mut Option<&mut Vec<SubblockTrace>>,
    ) -> Result<Var, NetError> {
        let (c, heads, _) = self.config.layer_shapes()[li];
        for (b, bp) in self.index.layers[li].iter().enumerate() {
            let wl = &self.layout.windows[li][b % 2];
            h = self.block(g, h, t_act, bp, wl, heads, c, &format!("layer{}.{b}", li + 1), trace)?;
        }
        Ok(h)
    }

    /// Velocity at state `x`, flow time `t` and conditioning `cond`.
    pub fn forward<'a>(&'a self, g: &mut Graph<'a>, x: Var, t: f64, cond: Var) -> Result<Var, NetError> {
        self.forward_traced(g, x, t, cond, None)
    }

    /// As `forward`, also recording every residual sub-block's contribution.
    pub fn forward_traced<'a>(
        &'a self,
        g: &mut Graph<'a>,
        x: Var,
        t: f64,
        cond: Var,
        mut trace: Option<&mut Vec<SubblockTrace>>,
    ) -> Result<Var, NetError> {
        let lay = &self.layout;
        let e = self.config.embed_dim;
        let f: usize = self.config.merge.iter().product();
        let n2: usize = lay.merged.iter().product();
        let n1: usize = lay.dims.iter().product();

        let tokens = self.embed(g, x, cond)?;
        let t_act = self.time_features(g, t)?;
        let h1 = self.layer(g, tokens, t_act, 0, &mut trace)?;

        let d = g.gather(h1, lay.down.clone(), vec![n2, f * e]);
        let d = g.layer_norm(d);
        let d = self.linear(g, d, self.index.down_w, None);
        let h2 = self.layer(g, d, t_act, 1, &mut trace)?;

        let u = self.linear(g, h2, self.index.up_w, None);
        let u = g.gather(u, lay.up.clone(), vec![n1, e]);
        let u = g.add(u, h1);
        let h3 = self.layer(g, u, t_act, 2, &mut trace)?;
        let out = g.add(h3, h1);
        Ok(self.recover(g, out))
    }

    /// Forward pass without gradient tracking on flat slices.
    pub fn evaluate(&self, x: &[f64], t: f64, cond: &[f64]) -> Result<Vec<f64>, NetError> {
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::new(vec![x.len()], x.to_vec()));
        let cv = g.constant(Tensor::new(vec![cond.len()], cond.to_vec()));
        let y = self.forward(&mut g, xv, t, cv)?;
        let out = g.value(y).data.clone();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(NetError::NonFinite("recovery".into()));
        }
        Ok(out)
    }
}

fn record(
    g: &Graph,
    trace: &mut Option<&mut Vec<SubblockTrace>>,
    name: &str,
    gate: Var,
    y: Var,
) {
    if let Some(tr) = trace.as_deref_mut() {
        let gate = &g.value(gate).data;
        let c = gate.len();
        let max = g
            .value(y)
            .data
            .iter()
            .enumerate()
            .map(|(i, v)| (gate[i % c] * v).abs())
            .fold(0.0, f64::max);
        tr.push(SubblockTrace {
            name: name.to_string(),
            max_contribution: max,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_lat: 6,
            n_lon: 8,
            n_surface: 2,
            n_pressure_vars: 2,
            n_levels: 3,
            cond_channels: 2,
            embed_dim: 8,
            depths: [1, 2, 1],
            n_heads: 2,
            pressure_patch: [2, 2, 2],
            surface_patch: [2, 2],
            window: [2, 2, 2],
            merge: [1, 2, 2],
            time_embed_dim: 8,
            lowrank_r: 2,
            modulation: Modulation::LowRank,
            mlp_ratio: 2,
            time_scale: 1000.0,
            seed: 3,
        }
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    fn embed_recover_twice(net: &VelocityNet, x: &[f64], cond: &[f64]) -> Vec<f64> {
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::new(vec![x.len()], x.to_vec()));
        let cv = g.constant(Tensor::new(vec![cond.len()], cond.to_vec()));
        let tok = net.embed(&mut g, xv, cv).unwrap();
        let two = g.scale(tok, 2.0);
        let y = net.recover(&mut g, two);
        g.value(y).data.clone()
    }

    #[test]
    fn time_embed_basics() {
        let e = sinusoidal_time_embed(0.0, 8).unwrap();
        assert_eq!(&e[..4], &[0.0; 4]);
        assert_eq!(&e[4..], &[1.0; 4]);
        assert!(sinusoidal_time_embed(0.5, 7).is_err());
        let a = sinusoidal_time_embed(1000.0 / 6.0, 16).unwrap();
        let b = sinusoidal_time_embed(2000.0 / 6.0, 16).unwrap();
        assert_ne!(a, b);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(norm <= 4.0 + 1e-12);
    }

    #[test]
    fn fresh_network_is_embed_then_recover() {
        let net = VelocityNet::new(tiny_config()).unwrap();
        let x = random(net.state_len(), 1);
        let c = random(net.cond_len(), 2);
        let mut trace = Vec::new();
        let mut g = Graph::inference();
        let xv = g.constant(Tensor::new(vec![x.len()], x.clone()));
        let cv = g.constant(Tensor::new(vec![c.len()], c.clone()));
        let y = net.forward_traced(&mut g, xv, 0.5, cv, Some(&mut trace)).unwrap();
        assert_eq!(trace.len(), 8);
        assert!(trace.iter().all(|t| t.max_contribution == 0.0));
        let want = embed_recover_twice(&net, &x, &c);
        for (a, b) in g.value(y).data.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn output_shape_and_determinism() {
        let net = VelocityNet::new(tiny_config()).unwrap();
        let x = random(net.state_len(), 4);
        let c = random(net.cond_len(), 5);
        let a = net.evaluate(&x, 1.0 / 6.0, &c).unwrap();
        let b = net.evaluate(&x, 1.0 / 6.0, &c).unwrap();
        assert_eq!(a.len(), x.len());
        assert_eq!(a, b);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let net = VelocityNet::new(tiny_config()).unwrap();
        let err = net.evaluate(&[0.0; 3], 0.0, &vec![0.0; net.cond_len()]).unwrap_err();
        assert!(matches!(err, NetError::InputSize { .. }));
    }

    #[test]
    fn parameter_count_closed_form_matches_enumeration() {
        for modulation in [Modulation::LowRank, Modulation::FullRank] {
            let mut cfg = tiny_config();
            cfg.modulation = modulation;
            let net = VelocityNet::new(cfg.clone()).unwrap();
            assert_eq!(cfg.count_parameters(), enumerate_parameters(&cfg));
            assert_eq!(cfg.count_parameters().0, net.n_params());
        }
    }

    #[test]
    fn longitude_patch_shift_moves_latent() {
        let cfg = tiny_config();
        let net = VelocityNet::new(cfg.clone()).unwrap();
        let (h, w, pw) = (cfg.n_lat, cfg.n_lon, cfg.pressure_patch[2]);
        let x = random(net.state_len(), 6);
        let c = random(net.cond_len(), 7);
        let roll = |v: &[f64]| -> Vec<f64> {
            let mut out = v.to_vec();
            for (k, o) in out.iter_mut().enumerate() {
                let (plane, j) = (k / w, k % w);
                *o = v[plane * w + (j + w - pw) % w];
            }
            out
        };
        let latent = |x: &[f64], c: &[f64]| {
            let mut g = Graph::inference();
            let xv = g.constant(Tensor::new(vec![x.len()], x.to_vec()));
            let cv = g.constant(Tensor::new(vec![c.len()], c.to_vec()));
            let t = net.embed(&mut g, xv, cv).unwrap();
            g.value(t).data.clone()
        };
        let a = latent(&x, &c);
        let b = latent(&roll(&x), &roll(&c));
        let [d, hl, wl] = net.layout().dims;
        let e = cfg.embed_dim;
        assert_eq!(h.div_ceil(2), hl);
        for dd in 0..d {
            for i in 0..hl {
                for j in 0..wl {
                    let src = ((dd * hl + i) * wl + j) * e;
                    let dst = ((dd * hl + i) * wl + (j + 1) % wl) * e;
                    assert_eq!(&a[src..src + e], &b[dst..dst + e]);
                }
            }
        }
    }
}
