//! Precomputed gather maps for every reshuffling step of the network.
//!
//! Latent maps are stored token-major: token `(d, i, j)` of a `(D, H, W)` map
//! sits at row `(d * H + i) * W + j`, with channels contiguous.

use std::sync::Arc;

use crate::tape::ZERO_INDEX;

use super::ModelConfig;

/// Additive attention logit for token pairs that may not interact.
pub const MASKED: f64 = -1e9;

fn token(dims: [usize; 3], d: usize, i: usize, j: usize) -> usize {
    (d * dims[1] + i) * dims[2] + j
}

/// Window partitioning of one latent shape, shifted or not.
#[derive(Debug, Clone)]
pub struct WindowLayout {
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub n_windows: usize,
    pub tokens: usize,
    /// Element gather from the token map into `[n_windows * tokens, C]`.
    pub partition: Arc<Vec<u32>>,
    /// Element gather back from windows to tokens.
    pub merge: Arc<Vec<u32>>,
    pub rel_index: Arc<Vec<u32>>,
    pub table_len: usize,
    pub mask: Option<Arc<Vec<f64>>>,
}

impl WindowLayout {
    /// Depth and latitude do not wrap, so tokens brought together by the cyclic
    /// shift across those seams are masked apart. Longitude is periodic and is
    /// never masked. Padding tokens only see each other.
    pub fn new(dims: [usize; 3], window: [usize; 3], shifted: bool, channels: usize) -> Self {
        let shift: [usize; 3] =
            std::array::from_fn(|a| if shifted && dims[a] > window[a] { window[a] / 2 } else { 0 });
        let padded: [usize; 3] = std::array::from_fn(|a| dims[a].div_ceil(window[a]) * window[a]);
        let counts: [usize; 3] = std::array::from_fn(|a| padded[a] / window[a]);
        let n_windows = counts.iter().product();
        let tokens = window.iter().product();
        let n_tokens: usize = dims.iter().product();

        let mut slot_token = vec![None; n_windows * tokens];
        let mut labels = vec![0u32; n_windows * tokens];
        let mut slot = 0;
        for wa in 0..counts[0] {
            for wb in 0..counts[1] {
                for wc in 0..counts[2] {
                    for p in 0..window[0] {
                        for q in 0..window[1] {
                            for r in 0..window[2] {
                                let rolled = [wa * window[0] + p, wb * window[1] + q, wc * window[2] + r];
                                let raw: [usize; 3] = std::array::from_fn(|a| rolled[a] + shift[a]);
                                let orig: [usize; 3] = std::array::from_fn(|a| raw[a] % padded[a]);
                                if (0..3).any(|a| orig[a] >= dims[a]) {
                                    labels[slot] = 4;
                                } else {
                                    slot_token[slot] = Some(token(dims, orig[0], orig[1], orig[2]));
                                    labels[slot] =
                                        (raw[0] >= padded[0]) as u32 | (((raw[1] >= padded[1]) as u32) << 1);
                                }
                                slot += 1;
                            }
                        }
                    }
                }
            }
        }

        let mut partition = Vec::with_capacity(n_windows * tokens * channels);
        let mut merge = vec![0u32; n_tokens * channels];
        for (s, tok) in slot_token.iter().enumerate() {
            for c in 0..channels {
                match tok {
                    Some(t) => {
                        partition.push((t * channels + c) as u32);
                        merge[t * channels + c] = (s * channels + c) as u32;
                    }
                    None => partition.push(ZERO_INDEX),
                }
            }
        }

        let span: [usize; 3] = std::array::from_fn(|a| 2 * window[a] - 1);
        let coords: Vec<[usize; 3]> = (0..tokens)
            .map(|k| [k / (window[1] * window[2]), (k / window[2]) % window[1], k % window[2]])
            .collect();
        let mut rel_index = Vec::with_capacity(tokens * tokens);
        for a in &coords {
            for b in &coords {
                let o: [usize; 3] = std::array::from_fn(|x| a[x] + window[x] - 1 - b[x]);
                rel_index.push(((o[0] * span[1] + o[1]) * span[2] + o[2]) as u32);
            }
        }

        let mask = if labels.iter().all(|&l| l == 0) {
            None
        } else {
            let mut m = vec![0.0; n_windows * tokens * tokens];
            for w in 0..n_windows {
                let lab = &labels[w * tokens..(w + 1) * tokens];
                for i in 0..tokens {
                    for j in 0..tokens {
                        if lab[i] != lab[j] {
                            m[(w * tokens + i) * tokens + j] = MASKED;
                        }
                    }
                }
            }
            Some(Arc::new(m))
        };

        Self {
            window,
            shift,
            n_windows,
            tokens,
            partition: Arc::new(partition),
            merge: Arc::new(merge),
            rel_index: Arc::new(rel_index),
            table_len: span.iter().product(),
            mask,
        }
    }
}

/// All index maps for one model configuration.
#[derive(Debug, Clone)]
pub struct Layout {
    pub dims: [usize; 3],
    pub merged: [usize; 3],
    pub pad_top: usize,
    pub pressure_patch_len: usize,
    pub surface_patch_len: usize,
    pub surface_out_len: usize,
    /// Gathers pressure patches from `[state | cond]` into `[D_p * H * W tokens, patch]`.
    pub embed_pressure: Arc<Vec<u32>>,
    pub embed_surface: Arc<Vec<u32>>,
    /// Gathers the recovered patch rows `[surface | pressure]` into `C x H x W`.
    pub recover: Arc<Vec<u32>>,
    pub down: Arc<Vec<u32>>,
    pub up: Arc<Vec<u32>>,
    /// Unshifted and shifted windows for each of the three layers.
    pub windows: [[WindowLayout; 2]; 3],
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (h, w) = (cfg.n_lat, cfg.n_lon);
        let [pz, ph, pw] = cfg.pressure_patch;
        let dims = cfg.latent_dims();
        let merged = cfg.merged_dims();
        let (dp, hl, wl) = (dims[0] - 1, dims[1], dims[2]);
        let pad_top = (hl * ph - h) / 2;
        let (s, vp, l) = (cfg.n_surface, cfg.n_pressure_vars, cfg.n_levels);
        let n_state = cfg.n_channels() * h * w;
        let row = |i: usize, py: usize| (i * ph + py).saturating_sub(pad_top).min(h - 1);
        let col = |j: usize, px: usize| (j * pw + px) % w;

        let pressure_patch_len = vp * pz * ph * pw;
        let mut embed_pressure = Vec::with_capacity(dp * hl * wl * pressure_patch_len);
        for d in 0..dp {
            for i in 0..hl {
                for j in 0..wl {
                    for v in 0..vp {
                        for lz in 0..pz {
                            for py in 0..ph {
                                for px in 0..pw {
                                    let lev = d * pz + lz;
                                    embed_pressure.push(if lev >= l {
                                        ZERO_INDEX
                                    } else {
                                        let c = s + v * l + lev;
                                        ((c * h + row(i, py)) * w + col(j, px)) as u32
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }

        let surface_patch_len = (s + cfg.cond_channels) * ph * pw;
        let mut embed_surface = Vec::with_capacity(hl * wl * surface_patch_len);
        for i in 0..hl {
            for j in 0..wl {
                for k in 0..s + cfg.cond_channels {
                    for py in 0..ph {
                        for px in 0..pw {
                            let plane = (row(i, py)) * w + col(j, px);
                            embed_surface.push(if k < s {
                                (k * h * w + plane) as u32
                            } else {
                                (n_state + (k - s) * h * w + plane) as u32
                            });
                        }
                    }
                }
            }
        }

        let surface_out_len = s * ph * pw;
        let surface_block = hl * wl * surface_out_len;
        let mut recover = Vec::with_capacity(n_state);
        for c in 0..cfg.n_channels() {
            for y in 0..h {
                for x in 0..w {
                    let (i, py) = ((y + pad_top) / ph, (y + pad_top) % ph);
                    let (j, px) = (x / pw, x % pw);
                    let idx = if c < s {
                        (i * wl + j) * surface_out_len + (c * ph + py) * pw + px
                    } else {
                        let (v, lev) = ((c - s) / l, (c - s) % l);
                        let (d, lz) = (lev / pz, lev % pz);
                        surface_block
                            + ((d * hl + i) * wl + j) * pressure_patch_len
                            + ((v * pz + lz) * ph + py) * pw
                            + px
                    };
                    recover.push(idx as u32);
                }
            }
        }

        let e = cfg.embed_dim;
        let f = cfg.merge;
        let fprod = f.iter().product::<usize>();
        let mut down = Vec::with_capacity(merged.iter().product::<usize>() * fprod * e);
        for a in 0..merged[0] {
            for b in 0..merged[1] {
                for c in 0..merged[2] {
                    for u in 0..f[0] {
                        for v in 0..f[1] {
                            for x in 0..f[2] {
                                let src = [a * f[0] + u, b * f[1] + v, c * f[2] + x];
                                for ch in 0..e {
                                    down.push(if (0..3).any(|k| src[k] >= dims[k]) {
                                        ZERO_INDEX
                                    } else {
                                        (token(dims, src[0], src[1], src[2]) * e + ch) as u32
                                    });
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut up = Vec::with_capacity(dims.iter().product::<usize>() * e);
        for d in 0..dims[0] {
            for i in 0..dims[1] {
                for j in 0..dims[2] {
                    let t2 = token(merged, d / f[0], i / f[1], j / f[2]);
                    let sub = ((d % f[0]) * f[1] + i % f[1]) * f[2] + j % f[2];
                    for ch in 0..e {
                        up.push(((t2 * fprod + sub) * e + ch) as u32);
                    }
                }
            }
        }

        let windows = cfg.layer_shapes().map(|(c, _, d)| {
            let win = cfg.effective_window(d);
            [WindowLayout::new(d, win, false, c), WindowLayout::new(d, win, true, c)]
        });

        Self {
            dims,
            merged,
            pad_top,
            pressure_patch_len,
            surface_patch_len,
            surface_out_len,
            embed_pressure: Arc::new(embed_pressure),
            embed_surface: Arc::new(embed_surface),
            recover: Arc::new(recover),
            down: Arc::new(down),
            up: Arc::new(up),
            windows,
        }
    }
}
