use serde::{Deserialize, Serialize};

use super::NetError;
use crate::grid::{GridSpec, VariableRegistry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modulation {
    /// `silu(t) U V + b` with U: tdim x r and V: r x 6C.
    LowRank,
    /// `silu(t) M + b` with M: tdim x 6C.
    FullRank,
}

/// Architecture of the velocity network, including the data layout it was
/// built for so a checkpoint is self-describing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_lat: usize,
    pub n_lon: usize,
    pub n_surface: usize,
    pub n_pressure_vars: usize,
    pub n_levels: usize,
    pub cond_channels: usize,
    pub embed_dim: usize,
    pub depths: [usize; 3],
    /// Heads in the outer layers; the middle layer uses twice as many.
    pub n_heads: usize,
    pub pressure_patch: [usize; 3],
    pub surface_patch: [usize; 2],
    pub window: [usize; 3],
    /// Patch-merging factor between the outer and middle layers.
    pub merge: [usize; 3],
    pub time_embed_dim: usize,
    pub lowrank_r: usize,
    pub modulation: Modulation,
    pub mlp_ratio: usize,
    /// Flow time is multiplied by this before the sinusoidal embedding.
    pub time_scale: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Small default sized for a workstation CPU.
    pub fn desk(grid: &GridSpec, registry: &VariableRegistry) -> Self {
        Self {
            embed_dim: 64,
            depths: [1, 2, 1],
            n_heads: 4,
            pressure_patch: [2, 4, 4],
            surface_patch: [4, 4],
            window: [2, 6, 6],
            merge: [1, 2, 2],
            time_embed_dim: 64,
            lowrank_r: 8,
            ..Self::for_data(grid, registry)
        }
    }

    /// Data-dependent fields filled from a grid and registry; the rest default.
    pub fn for_data(grid: &GridSpec, registry: &VariableRegistry) -> Self {
        Self {
            n_lat: grid.n_lat(),
            n_lon: grid.n_lon(),
            n_surface: registry.n_surface(),
            n_pressure_vars: registry.pressure_vars.len(),
            n_levels: registry.levels.len(),
            cond_channels: registry.n_conditioning(),
            embed_dim: 64,
            depths: [1, 2, 1],
            n_heads: 4,
            pressure_patch: [2, 4, 4],
            surface_patch: [4, 4],
            window: [2, 6, 6],
            merge: [1, 2, 2],
            time_embed_dim: 64,
            lowrank_r: 8,
            modulation: Modulation::LowRank,
            mlp_ratio: 4,
            time_scale: 1000.0,
            seed: 0,
        }
    }

    /// Full-resolution architecture: 1 degree grid, 6 surface and 5x13 upper-air variables.
    pub fn full_scale() -> Self {
        Self {
            n_lat: 181,
            n_lon: 360,
            n_surface: 6,
            n_pressure_vars: 5,
            n_levels: 13,
            cond_channels: 11,
            embed_dim: 256,
            depths: [2, 12, 2],
            n_heads: 8,
            pressure_patch: [2, 4, 4],
            surface_patch: [4, 4],
            window: [2, 6, 12],
            merge: [2, 2, 2],
            time_embed_dim: 256,
            lowrank_r: 32,
            modulation: Modulation::LowRank,
            mlp_ratio: 4,
            time_scale: 1000.0,
            seed: 0,
        }
    }

    pub fn n_channels(&self) -> usize {
        self.n_surface + self.n_pressure_vars * self.n_levels
    }

    /// Checks the configuration against a data layout.
    pub fn matches(&self, grid: &GridSpec, registry: &VariableRegistry) -> Result<(), NetError> {
        let ok = self.n_lat == grid.n_lat()
            && self.n_lon == grid.n_lon()
            && self.n_surface == registry.n_surface()
            && self.n_pressure_vars == registry.pressure_vars.len()
            && self.n_levels == registry.levels.len()
            && self.cond_channels == registry.n_conditioning();
        if ok {
            Ok(())
        } else {
            Err(NetError::Config("model was built for a different grid or variable set".into()))
        }
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let bad = |m: String| Err(NetError::Config(m));
        if self.n_lat == 0 || self.n_lon == 0 || self.n_channels() == 0 {
            return bad("empty grid or channel set".into());
        }
        if self.n_pressure_vars == 0 || self.n_levels == 0 {
            return bad("at least one pressure-level variable is required".into());
        }
        if self.embed_dim == 0 || self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            ));
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim {} must be even", self.time_embed_dim));
        }
        if self.modulation == Modulation::LowRank {
            let cap = self.time_embed_dim.min(6 * self.embed_dim);
            if self.lowrank_r < 1 || self.lowrank_r >= cap {
                return bad(format!("lowrank_r {} must lie in [1, {cap})", self.lowrank_r));
            }
        }
        let all = self
            .pressure_patch
            .iter()
            .chain(&self.surface_patch)
            .chain(&self.window)
            .chain(&self.merge);
        if all.into_iter().any(|&v| v == 0) || self.mlp_ratio == 0 {
            return bad("patch, window, merge sizes and mlp_ratio must be positive".into());
        }
        if self.surface_patch != [self.pressure_patch[1], self.pressure_patch[2]] {
            return bad("surface and pressure patches must share their horizontal size".into());
        }
        if self.depths.iter().any(|&d| d == 0) {
            return bad("every layer needs at least one block".into());
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return bad("time_scale must be positive".into());
        }
        Ok(())
    }

    /// Latent (D, H, W) after patch embedding; depth includes the surface slab.
    pub fn latent_dims(&self) -> [usize; 3] {
        let [pz, ph, pw] = self.pressure_patch;
        [
            self.n_levels.div_ceil(pz) + 1,
            self.n_lat.div_ceil(ph),
            self.n_lon.div_ceil(pw),
        ]
    }

    /// Latent (D, H, W) in the middle layer.
    pub fn merged_dims(&self) -> [usize; 3] {
        let d = self.latent_dims();
        [
            d[0].div_ceil(self.merge[0]),
            d[1].div_ceil(self.merge[1]),
            d[2].div_ceil(self.merge[2]),
        ]
    }

    /// Window actually used on a latent of the given dims.
    pub fn effective_window(&self, dims: [usize; 3]) -> [usize; 3] {
        [
            self.window[0].min(dims[0]),
            self.window[1].min(dims[1]),
            self.window[2].min(dims[2]),
        ]
    }

    /// (channels, heads, latent dims) of each of the three layers.
    pub fn layer_shapes(&self) -> [(usize, usize, [usize; 3]); 3] {
        let outer = (self.embed_dim, self.n_heads, self.latent_dims());
        [outer, (2 * self.embed_dim, 2 * self.n_heads, self.merged_dims()), outer]
    }

    /// Modulation parameters of one block with `channels` width.
    pub fn modulation_params(&self, channels: usize) -> usize {
        let six = 6 * channels;
        match self.modulation {
            Modulation::LowRank => self.time_embed_dim * self.lowrank_r + self.lowrank_r * six + six,
            Modulation::FullRank => self.time_embed_dim * six + six,
        }
    }

    /// Closed-form parameter count: (total, modulation only).
    pub fn count_parameters(&self) -> (usize, usize) {
        let e = self.embed_dim;
        let [pz, ph, pw] = self.pressure_patch;
        let kp = self.n_pressure_vars * pz * ph * pw;
        let ks = (self.n_surface + self.cond_channels) * ph * pw;
        let ksr = self.n_surface * ph * pw;
        let td = self.time_embed_dim;
        let f = self.merge.iter().product::<usize>();
        let mut total = (kp + 1) * e + (ks + 1) * e // embeddings
            + 2 * (td * td + td) // time MLP
            + 2 * (f * e) * (2 * e) // merge down and up, no bias
            + (e + 1) * ksr + (e + 1) * kp; // recovery
        let mut modulation = 0;
        for (layer, &(c, heads, dims)) in self.layer_shapes().iter().enumerate() {
            let w = self.effective_window(dims);
            let table = (2 * w[0] - 1) * (2 * w[1] - 1) * (2 * w[2] - 1);
            let r = self.mlp_ratio;
            let block = 3 * c * c + 3 * c // qkv
                + table * heads
                + c * c + c // projection
                + 2 * r * c * c + r * c + c; // MLP
            let m = self.modulation_params(c);
            total += self.depths[layer] * (block + m);
            modulation += self.depths[layer] * m;
        }
        (total, modulation)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_scale_latent_shape() {
        let c = ModelConfig::full_scale();
        assert_eq!(c.latent_dims(), [8, 46, 90]);
        assert_eq!(c.merged_dims(), [4, 23, 45]);
    }

    #[test]
    fn desk_latent_shape() {
        let grid = GridSpec::regular(32, 64, false).unwrap();
        let reg = VariableRegistry::new(
            vec![],
            vec!["Z".into(), "Q".into(), "T".into(), "U".into()],
            vec![200, 500, 850],
            vec![],
            vec![],
        )
        .unwrap();
        let c = ModelConfig::desk(&grid, &reg);
        assert_eq!(c.latent_dims(), [3, 8, 16]);
    }

    #[test]
    fn rank_bounds() {
        let mut c = ModelConfig::full_scale();
        assert!(c.validate().is_ok());
        c.lowrank_r = 0;
        assert!(c.validate().is_err());
        c.lowrank_r = 256;
        assert!(c.validate().is_err());
        c.modulation = Modulation::FullRank;
        assert!(c.validate().is_ok());
    }

    #[test]
    fn odd_time_dim_rejected() {
        let mut c = ModelConfig::full_scale();
        c.time_embed_dim = 255;
        assert!(c.validate().is_err());
    }
}
