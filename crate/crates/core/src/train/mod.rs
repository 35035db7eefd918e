//! Two-stage training of the velocity network.
//!
//! Stage 1 regresses the velocity at an interpolated state onto the finite
//! difference between two states a block apart (six hours by default).
//! Stage 2 rolls the network out through hourly Euler steps and penalizes the
//! hourly states directly, backpropagating through the whole chain.

pub mod optim;
pub mod weights;

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Timelike, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{load_model, store_model, Archive, CheckpointError, DType};
use crate::dataset::Dataset;
use crate::grid::{GridError, GridSpec, NormStats, VariableRegistry};
use crate::net::{ModelConfig, Modulation, NetError, VelocityNet};
use crate::ode::{substep_schedule, ConditionProvider, GridConditions, OdeError, RolloutConfig};
use crate::tape::{Graph, Tensor};
use crate::transport::dynamic_path_sample;

pub use optim::{clip_grad_norm, grad_norm, learning_rate, AdamW, EmaState, OptimError, Schedule};
pub use weights::{
    compute_w_var, level_weights, stage1_loss, stage2_loss, w_tau, weighted_mse, WeightError, WeightScheme,
};

/// Pair spacing used for the variable weights, whatever the training stage.
pub const W_VAR_PAIR_HOURS: usize = 6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Weight(#[from] WeightError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Ode(#[from] OdeError),
    #[error("metrics log: {0}")]
    Metrics(String),
}

/// Architecture settings a training config may override; data-dependent
/// sizes always come from the dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelOverrides {
    pub embed_dim: Option<usize>,
    pub depths: Option<[usize; 3]>,
    pub n_heads: Option<usize>,
    pub pressure_patch: Option<[usize; 3]>,
    pub surface_patch: Option<[usize; 2]>,
    pub window: Option<[usize; 3]>,
    pub merge: Option<[usize; 3]>,
    pub time_embed_dim: Option<usize>,
    pub lowrank_r: Option<usize>,
    pub modulation: Option<Modulation>,
    pub mlp_ratio: Option<usize>,
    pub seed: Option<u64>,
}

impl ModelOverrides {
    pub fn apply(&self, mut c: ModelConfig, default_seed: u64) -> ModelConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { c.$f = v; } )* };
        }
        set!(embed_dim, depths, n_heads, pressure_patch, surface_patch, window, merge, time_embed_dim, lowrank_r, modulation, mlp_ratio);
        c.seed = self.seed.unwrap_or(default_seed);
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    /// Stage 2 rollout length in hours.
    pub ar_steps: usize,
    /// Hours spanned by one stage-1 pair and one Euler block.
    pub block_hours: usize,
    /// Stage-1 pairs start at UTC hours divisible by this; 0 means `block_hours`.
    pub align_hours: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; by default one pass over the samples.
    pub steps_per_epoch: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_learning_rate: f64,
    pub schedule: Schedule,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: Option<f64>,
    pub ema_decay: f64,
    pub ema_warmup: bool,
    pub seed: u64,
    /// Stage 2: recompute each Euler step during the backward pass instead of
    /// keeping the whole rollout graph in memory.
    pub recompute: bool,
    pub clock_per_substep: bool,
    /// Inclusive time window of states used for training, RFC 3339.
    pub train_start: Option<String>,
    pub train_end: Option<String>,
    pub model: ModelOverrides,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: 1,
            ar_steps: 6,
            block_hours: 6,
            align_hours: 0,
            epochs: 1,
            steps_per_epoch: None,
            batch_size: 4,
            learning_rate: 3e-4,
            min_learning_rate: 0.0,
            schedule: Schedule::Cosine,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            grad_clip: None,
            ema_decay: 0.999,
            ema_warmup: false,
            seed: 0,
            recompute: false,
            clock_per_substep: true,
            train_start: None,
            train_end: None,
            model: ModelOverrides::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !matches!(self.stage, 1 | 2) {
            return bad("stage must be 1 or 2");
        }
        if self.block_hours == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("block_hours, batch_size and epochs must be positive");
        }
        if self.stage == 2 && (self.ar_steps == 0 || self.ar_steps % self.block_hours != 0) {
            return bad("stage-2 ar_steps must be a positive multiple of block_hours");
        }
        if !(self.learning_rate >= 0.0 && self.min_learning_rate >= 0.0) {
            return bad("learning rates must be non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay must lie in [0, 1]");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        for t in [&self.train_start, &self.train_end].into_iter().flatten() {
            parse_time(t)?;
        }
        Ok(())
    }

    pub fn align(&self) -> usize {
        if self.align_hours == 0 {
            self.block_hours
        } else {
            self.align_hours
        }
    }

    pub fn rollout(&self, horizon_hours: usize) -> RolloutConfig {
        RolloutConfig {
            steps_per_block: self.block_hours,
            delta_t: 1.0 / self.block_hours as f64,
            horizon_hours,
            clock_per_substep: self.clock_per_substep,
        }
    }
}

fn parse_time(s: &str) -> Result<DateTime<Utc>, TrainError> {
    DateTime::parse_from_rfc3339(s)
        .map(|t| t.with_timezone(&Utc))
        .map_err(|e| TrainError::Config(format!("bad time {s:?}: {e}")))
}

/// Normalized, flattened states with their conditioning and loss weights.
pub struct TrainData {
    pub grid: GridSpec,
    pub stats: NormStats,
    pub registry: VariableRegistry,
    pub times: Vec<DateTime<Utc>>,
    pub states: Vec<Vec<f64>>,
    pub conditions: GridConditions,
    pub weights: WeightScheme,
    index: HashMap<DateTime<Utc>, usize>,
}

impl TrainData {
    /// Normalizes the states of `ds` that fall in `[start, end]`.
    pub fn from_dataset(
        ds: &Dataset,
        stats: &NormStats,
        start: Option<DateTime<Utc>>,
        end: Option<DateTime<Utc>>,
    ) -> Result<Self, TrainError> {
        let mut times = Vec::new();
        let mut states = Vec::new();
        for s in &ds.states {
            if start.is_some_and(|t| s.timestamp < t) || end.is_some_and(|t| s.timestamp > t) {
                continue;
            }
            let n = stats.normalize(s)?;
            times.push(s.timestamp);
            states.push(n.values.into_raw_vec_and_offset().0);
        }
        let conditions = GridConditions::for_dataset(ds)?;
        let mut data = Self {
            grid: ds.grid.clone(),
            stats: stats.clone(),
            registry: ds.registry.clone(),
            index: times.iter().enumerate().map(|(i, t)| (*t, i)).collect(),
            times,
            states,
            conditions,
            weights: WeightScheme::uniform(ds.registry.n_channels(), ds.grid.n_lat(), ds.grid.n_lon()),
        };
        let pairs = data.pairs(W_VAR_PAIR_HOURS, W_VAR_PAIR_HOURS);
        let plane = data.grid.n_lat() * data.grid.n_lon();
        let w_var = compute_w_var(
            pairs.iter().map(|&(a, b)| (data.states[a].as_slice(), data.states[b].as_slice())),
            &data.registry,
            plane,
        )?;
        data.weights = WeightScheme::for_data(&data.grid, &data.registry, w_var)?;
        Ok(data)
    }

    pub fn index_of(&self, t: &DateTime<Utc>) -> Option<usize> {
        self.index.get(t).copied()
    }

    /// Index pairs `(k, k + hours)` with the start hour divisible by `align`.
    pub fn pairs(&self, hours: usize, align: usize) -> Vec<(usize, usize)> {
        self.times
            .iter()
            .enumerate()
            .filter(|(_, t)| t.minute() == 0 && t.second() == 0 && (t.hour() as usize) % align == 0)
            .filter_map(|(k, t)| self.index_of(&(*t + Duration::hours(hours as i64))).map(|j| (k, j)))
            .collect()
    }

    /// Start indices of `steps + 1` consecutive hourly states.
    pub fn sequences(&self, steps: usize) -> Vec<usize> {
        (0..self.times.len().saturating_sub(steps))
            .filter(|&k| (1..=steps).all(|j| self.times[k + j] == self.times[k] + Duration::hours(j as i64)))
            .collect()
    }

    pub fn cond_at(&self, t: DateTime<Utc>) -> Result<Vec<f64>, TrainError> {
        Ok(self.conditions.cond_at(t)?)
    }
}

/// Zero-filled gradients for every parameter of `net`.
fn zero_grads(net: &VelocityNet) -> Vec<Vec<f64>> {
    net.params.iter().map(|p| vec![0.0; p.len()]).collect()
}

fn add_param_grads(acc: &mut [Vec<f64>], grads: &crate::tape::Gradients) {
    for (id, g) in grads.params() {
        if let Some(g) = g {
            acc[id].iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
    }
}

/// Stage-1 loss and parameter gradients for one sample.
pub fn stage1_sample_grad(
    net: &VelocityNet,
    x_t: &[f64],
    t: f64,
    cond: &[f64],
    target: &[f64],
    weights: &WeightScheme,
) -> Result<(f64, Vec<Vec<f64>>), NetError> {
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(vec![x_t.len()], x_t.to_vec()));
    let c = g.constant(Tensor::new(vec![cond.len()], cond.to_vec()));
    let v = net.forward(&mut g, x, t, c)?;
    let loss = g.weighted_sq(v, Arc::new(target.to_vec()), weights.element.clone(), target.len() as f64);
    let value = g.value(loss).data[0];
    let grads = g.backward(loss);
    let mut out = zero_grads(net);
    add_param_grads(&mut out, &grads);
    Ok((value, out))
}

/// One stage-2 training sequence: the initial state, the hourly truths, and
/// for each Euler step its flow time and conditioning.
pub struct RolloutSample<'a> {
    pub x0: &'a [f64],
    pub truths: Vec<&'a [f64]>,
    pub steps: Vec<(f64, Vec<f64>)>,
    pub delta_t: f64,
}

/// Stage-2 rollout loss and parameter gradients, keeping the full graph.
pub fn stage2_sample_grad(
    net: &VelocityNet,
    sample: &RolloutSample,
    weights: &WeightScheme,
) -> Result<(f64, Vec<Vec<f64>>), NetError> {
    let n = sample.x0.len() as f64;
    let mut g = Graph::new();
    let mut x = g.constant(Tensor::new(vec![sample.x0.len()], sample.x0.to_vec()));
    let mut total = None;
    for (j, (t, cond)) in sample.steps.iter().enumerate() {
        let c = g.constant(Tensor::new(vec![cond.len()], cond.clone()));
        let v = net.forward(&mut g, x, *t, c)?;
        x = g.add_scaled(x, v, sample.delta_t);
        let l = g.weighted_sq(x, Arc::new(sample.truths[j].to_vec()), weights.element.clone(), n);
        let wl = w_tau((j + 1) as f64);
        total = Some(match total {
            None => g.scale(l, wl),
            Some(acc) => g.add_scaled(acc, l, wl),
        });
    }
    let total = total.expect("at least one step");
    let value = g.value(total).data[0];
    let grads = g.backward(total);
    let mut out = zero_grads(net);
    add_param_grads(&mut out, &grads);
    Ok((value, out))
}

/// Same result as `stage2_sample_grad`, holding only one Euler step's graph
/// at a time: states are stored, and each step is rebuilt during the
/// backward sweep.
pub fn stage2_sample_grad_recompute(
    net: &VelocityNet,
    sample: &RolloutSample,
    weights: &WeightScheme,
) -> Result<(f64, Vec<Vec<f64>>), NetError> {
    let n = sample.x0.len();
    let mut xs: Vec<Vec<f64>> = vec![sample.x0.to_vec()];
    let mut loss = 0.0;
    for (j, (t, cond)) in sample.steps.iter().enumerate() {
        let v = net.evaluate(&xs[j], *t, cond)?;
        let next: Vec<f64> = xs[j].iter().zip(&v).map(|(a, b)| a + sample.delta_t * b).collect();
        let l: f64 = next
            .iter()
            .zip(sample.truths[j])
            .zip(weights.element.iter())
            .map(|((p, q), w)| w * (p - q) * (p - q))
            .sum::<f64>()
            / n as f64;
        loss += w_tau((j + 1) as f64) * l;
        xs.push(next);
    }
    let mut out = zero_grads(net);
    let mut gx = vec![0.0; n];
    for j in (0..sample.steps.len()).rev() {
        let c = 2.0 * w_tau((j + 1) as f64) / n as f64;
        for (k, g) in gx.iter_mut().enumerate() {
            *g += c * weights.element[k] * (xs[j + 1][k] - sample.truths[j][k]);
        }
        let (t, cond) = &sample.steps[j];
        let mut g = Graph::new();
        let xin = g.input(Tensor::new(vec![n], xs[j].clone()));
        let cv = g.constant(Tensor::new(vec![cond.len()], cond.clone()));
        let v = net.forward(&mut g, xin, *t, cv)?;
        let xn = g.add_scaled(xin, v, sample.delta_t);
        let grads = g.backward_with_seeds(&[(xn, &gx)]);
        add_param_grads(&mut out, &grads);
        gx = grads.wrt(xin).expect("input feeds the step").to_vec();
    }
    Ok((loss, out))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// How a training run obtains its starting network.
pub enum TrainInit {
    /// New network; architecture overrides come from the training config.
    Fresh,
    /// Continue an interrupted run of the same stage.
    Resume(Archive),
    /// Start from another run's averaged weights with fresh optimizer state.
    FineTune(Archive),
}

pub const EMA_PREFIX: &str = "ema/";
const ADAM_M_PREFIX: &str = "adam_m/";
const ADAM_V_PREFIX: &str = "adam_v/";

pub struct Trainer<'d> {
    pub config: TrainConfig,
    pub data: &'d TrainData,
    pub net: VelocityNet,
    pub opt: AdamW,
    pub ema: EmaState,
    pub step: usize,
    samples: usize,
    pool: rayon::ThreadPool,
}

/// Worker threads: `FLOWCAST_NUM_THREADS` if set, otherwise rayon's default.
pub fn thread_count() -> usize {
    std::env::var("FLOWCAST_NUM_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or_else(rayon::current_num_threads)
}

impl<'d> Trainer<'d> {
    pub fn new(config: TrainConfig, data: &'d TrainData, init: TrainInit) -> Result<Self, TrainError> {
        config.validate()?;
        let (net, opt, ema, step) = match init {
            TrainInit::Fresh => {
                let mc = config
                    .model
                    .apply(ModelConfig::desk(&data.grid, &data.registry), config.seed);
                let net = VelocityNet::new(mc)?;
                let opt = AdamW::new(&net.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
                let ema = EmaState::new(&net.params, config.ema_decay, config.ema_warmup);
                (net, opt, ema, 0)
            }
            TrainInit::FineTune(archive) => {
                let prefix = if archive.get(&format!("{EMA_PREFIX}embed.pressure.weight")).is_ok() {
                    EMA_PREFIX
                } else {
                    crate::checkpoint::PARAM_PREFIX
                };
                let net = load_model(&archive, prefix)?;
                let opt = AdamW::new(&net.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
                let ema = EmaState::new(&net.params, config.ema_decay, config.ema_warmup);
                (net, opt, ema, 0)
            }
            TrainInit::Resume(archive) => {
                let saved: TrainConfig = serde_json::from_value(
                    archive
                        .meta
                        .get("train")
                        .cloned()
                        .ok_or_else(|| TrainError::Config("checkpoint has no training state".into()))?,
                )
                .map_err(CheckpointError::from)?;
                if saved != config {
                    return Err(TrainError::Config("resume requires the original training config".into()));
                }
                let net = load_model(&archive, crate::checkpoint::PARAM_PREFIX)?;
                let step = meta_u64(&archive, "step")? as usize;
                let mut opt = AdamW::new(&net.params, config.beta1, config.beta2, config.adam_eps, config.weight_decay);
                opt.step = meta_u64(&archive, "adam_step")?;
                opt.m = group(&archive, ADAM_M_PREFIX, &net)?;
                opt.v = group(&archive, ADAM_V_PREFIX, &net)?;
                let mut ema = EmaState::new(&net.params, config.ema_decay, config.ema_warmup);
                ema.shadow = group(&archive, EMA_PREFIX, &net)?;
                ema.updates = meta_u64(&archive, "ema_updates")?;
                (net, opt, ema, step)
            }
        };
        net.config.matches(&data.grid, &data.registry)?;
        let samples = match config.stage {
            1 => data.pairs(config.block_hours, config.align()).len(),
            _ => data.sequences(config.ar_steps).len(),
        };
        if samples == 0 {
            return Err(TrainError::Data("no training samples in the selected period".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(thread_count())
            .build()
            .map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(Self {
            config,
            data,
            net,
            opt,
            ema,
            step,
            samples,
            pool,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config
            .steps_per_epoch
            .unwrap_or_else(|| self.samples.div_ceil(self.config.batch_size))
    }

    pub fn total_steps(&self) -> usize {
        self.config.epochs * self.steps_per_epoch()
    }

    /// Deterministic RNG for one optimizer step.
    fn step_rng(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(step as u64 + 1);
        rng
    }

    /// Loss and gradient summed over one batch, evaluated in parallel and
    /// reduced in sample order so the result does not depend on threading.
    fn batch_grad(&self, rng: &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f64>>), TrainError> {
        let data = self.data;
        let cfg = &self.config;
        let b = cfg.batch_size;
        let results: Vec<Result<(f64, Vec<Vec<f64>>), TrainError>> = if cfg.stage == 1 {
            let pairs = data.pairs(cfg.block_hours, cfg.align());
            let draws: Vec<((usize, usize), f64)> = (0..b)
                .map(|_| {
                    let p = pairs[rng.random_range(0..pairs.len())];
                    // Open interval (0, 1).
                    let t = loop {
                        let t: f64 = rng.random();
                        if t > 0.0 {
                            break t;
                        }
                    };
                    (p, t)
                })
                .collect();
            self.pool.install(|| {
                draws
                    .par_iter()
                    .map(|&((k, j), t)| {
                        let ps = dynamic_path_sample(&data.states[k], &data.states[j], t, 0.0, None)
                            .map_err(|e| TrainError::Data(e.to_string()))?;
                        let ms = (t * cfg.block_hours as f64 * 3_600_000.0).round() as i64;
                        let cond = data.cond_at(data.times[k] + Duration::milliseconds(ms))?;
                        Ok(stage1_sample_grad(&self.net, &ps.x_t, t, &cond, &ps.u_target, &data.weights)?)
                    })
                    .collect()
            })
        } else {
            let starts = data.sequences(cfg.ar_steps);
            let picks: Vec<usize> = (0..b).map(|_| starts[rng.random_range(0..starts.len())]).collect();
            let rc = cfg.rollout(cfg.ar_steps);
            self.pool.install(|| {
                picks
                    .par_iter()
                    .map(|&k| {
                        let sample = self.rollout_sample(k, &rc)?;
                        Ok(if cfg.recompute {
                            stage2_sample_grad_recompute(&self.net, &sample, &data.weights)?
                        } else {
                            stage2_sample_grad(&self.net, &sample, &data.weights)?
                        })
                    })
                    .collect()
            })
        };
        let mut loss = 0.0;
        let mut grads = zero_grads(&self.net);
        for r in results {
            let (l, g) = r?;
            loss += l;
            for (acc, gi) in grads.iter_mut().zip(&g) {
                acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
            }
        }
        let inv = 1.0 / b as f64;
        grads.iter_mut().flat_map(|g| g.iter_mut()).for_each(|v| *v *= inv);
        Ok((loss * inv, grads))
    }

    /// The `ar_steps + 1` hourly states starting at index `k`, with the
    /// schedule of flow times and conditioning shared with inference.
    pub fn rollout_sample(&self, k: usize, rc: &RolloutConfig) -> Result<RolloutSample<'d>, TrainError> {
        let data = self.data;
        let t = self.config.ar_steps;
        let steps = substep_schedule(data.times[k], rc, t)
            .into_iter()
            .map(|(ft, clock)| Ok((ft, data.cond_at(clock)?)))
            .collect::<Result<Vec<_>, TrainError>>()?;
        Ok(RolloutSample {
            x0: &data.states[k],
            truths: (1..=t).map(|j| data.states[k + j].as_slice()).collect(),
            steps,
            delta_t: rc.delta_t,
        })
    }

    /// One optimizer step.
    pub fn train_step(&mut self) -> Result<StepLog, TrainError> {
        let step = self.step;
        let mut rng = self.step_rng(step);
        let (loss, mut grads) = match self.batch_grad(&mut rng) {
            Err(TrainError::Net(NetError::NonFinite(_))) => return Err(TrainError::NonFinite { step }),
            other => other?,
        };
        let norm = match self.config.grad_clip {
            Some(max) => clip_grad_norm(&mut grads, max),
            None => grad_norm(&grads),
        };
        if !loss.is_finite() || !norm.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        let lr = learning_rate(
            self.config.schedule,
            self.config.learning_rate,
            self.config.min_learning_rate,
            step,
            self.total_steps(),
        );
        self.opt.update(&mut self.net.params, &grads, lr)?;
        self.ema.update(&self.net.params)?;
        self.step += 1;
        Ok(StepLog {
            step,
            loss,
            lr,
            grad_norm: norm,
        })
    }

    /// Network carrying the averaged weights.
    pub fn ema_net(&self) -> VelocityNet {
        let mut n = self.net.clone();
        n.params = self.ema.shadow.clone();
        n
    }

    pub fn checkpoint(&self) -> Result<Archive, TrainError> {
        let mut a = Archive::new(serde_json::json!({
            "train": self.config,
            "step": self.step,
            "adam_step": self.opt.step,
            "ema_updates": self.ema.updates,
            "stage": self.config.stage,
            "norm_stats": self.data.stats.to_text(),
        }));
        store_model(&mut a, &self.net, crate::checkpoint::PARAM_PREFIX)?;
        for (prefix, tensors) in [
            (EMA_PREFIX, &self.ema.shadow),
            (ADAM_M_PREFIX, &self.opt.m),
            (ADAM_V_PREFIX, &self.opt.v),
        ] {
            for (spec, t) in self.net.specs.iter().zip(tensors) {
                a.push(format!("{prefix}{}", spec.name), t.clone());
            }
        }
        Ok(a)
    }

    /// Runs the remaining epochs. With an output directory, appends to
    /// `metrics.csv` and writes `epoch-N.ckpt` and `latest.ckpt` after each
    /// epoch; a failure leaves the last completed epoch's files in place.
    pub fn run(&mut self, out: Option<&Path>) -> Result<Vec<StepLog>, TrainError> {
        let mut metrics = match out {
            Some(dir) => Some(MetricsLog::open(&dir.join("metrics.csv"))?),
            None => None,
        };
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let mut logs = Vec::new();
        while self.step < total {
            let log = self.train_step()?;
            log::debug!("step {} loss {:.6e} lr {:.3e} |g| {:.3e}", log.step, log.loss, log.lr, log.grad_norm);
            if let Some(m) = metrics.as_mut() {
                m.write(&log)?;
            }
            logs.push(log);
            if self.step % spe == 0 {
                let epoch = self.step / spe;
                log::info!("epoch {epoch} done at step {}, loss {:.6e}", self.step, log.loss);
                if let Some(dir) = out {
                    let a = self.checkpoint()?;
                    a.write(&dir.join(format!("epoch-{epoch}.ckpt")), DType::F64)?;
                    a.write(&dir.join("latest.ckpt"), DType::F64)?;
                }
            }
        }
        Ok(logs)
    }
}

fn meta_u64(a: &Archive, key: &str) -> Result<u64, TrainError> {
    a.meta
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| TrainError::Config(format!("checkpoint metadata lacks {key}")))
}

fn group(a: &Archive, prefix: &str, net: &VelocityNet) -> Result<Vec<Tensor>, TrainError> {
    net.specs
        .iter()
        .map(|s| Ok(a.get(&format!("{prefix}{}", s.name))?.clone()))
        .collect()
}

struct MetricsLog {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl MetricsLog {
    fn open(path: &Path) -> Result<Self, TrainError> {
        let err = |e: std::io::Error| TrainError::Metrics(format!("{}: {e}", path.display()));
        let fresh = !path.exists() || std::fs::metadata(path).map_err(err)?.len() == 0;
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(err)?;
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(file);
        if fresh {
            writer
                .write_record(["step", "loss", "lr", "grad_norm"])
                .map_err(|e| TrainError::Metrics(e.to_string()))?;
        }
        Ok(Self {
            writer,
            path: path.to_path_buf(),
        })
    }

    fn write(&mut self, log: &StepLog) -> Result<(), TrainError> {
        let err = |e: csv::Error| TrainError::Metrics(format!("{}: {e}", self.path.display()));
        self.writer
            .write_record(&[
                log.step.to_string(),
                format!("{:?}", log.loss),
                format!("{:?}", log.lr),
                format!("{:?}", log.grad_norm),
            ])
            .map_err(err)?;
        self.writer
            .flush()
            .map_err(|e| TrainError::Metrics(format!("{}: {e}", self.path.display())))
    }
}

/// Reads a metrics CSV written by a training run.
pub fn read_metrics(path: &Path) -> Result<Vec<StepLog>, TrainError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| TrainError::Metrics(e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| TrainError::Metrics(e.to_string())))
        .collect()
}

/// Normalization statistics over the training window of a dataset.
pub fn training_stats(
    ds: &Dataset,
    start: Option<DateTime<Utc>>,
    end: Option<DateTime<Utc>>,
) -> Result<NormStats, TrainError> {
    let states: Vec<_> = ds
        .states
        .iter()
        .filter(|s| !(start.is_some_and(|t| s.timestamp < t) || end.is_some_and(|t| s.timestamp > t)))
        .cloned()
        .collect();
    Ok(crate::grid::compute_norm_stats(&states, &ds.registry)?)
}

/// Training window from the config's optional bounds.
pub fn train_window(cfg: &TrainConfig) -> Result<(Option<DateTime<Utc>>, Option<DateTime<Utc>>), TrainError> {
    Ok((
        cfg.train_start.as_deref().map(parse_time).transpose()?,
        cfg.train_end.as_deref().map(parse_time).transpose()?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::StateField;
    use chrono::TimeZone;
    use ndarray::Array3;
    use rand::Rng;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2021, 3, 1, 0, 0, 0).unwrap()
    }

    /// Hourly states on a 6 x 8 grid, skipping the hours in `gaps`.
    fn dataset(hours: usize, gaps: &[usize]) -> Dataset {
        let grid = GridSpec::regular(6, 8, false).unwrap();
        let reg = VariableRegistry::new(
            vec!["MSLP".into(), "T2M".into()],
            vec!["Z".into(), "T".into()],
            vec![200, 500, 850],
            vec!["SIN_LAT".into()],
            vec!["SIN_TOD".into()],
        )
        .unwrap();
        let mut ds = Dataset::new(grid, reg);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let base: Vec<f64> = (0..8 * 48).map(|_| rng.random_range(-1.0..1.0)).collect();
        for h in (0..hours).filter(|h| !gaps.contains(h)) {
            let ph = h as f64 * 0.3;
            let v = Array3::from_shape_fn((8, 6, 8), |(c, i, j)| {
                let k = (c * 6 + i) * 8 + j;
                base[k] + (ph + j as f64 * 0.7 + c as f64).sin() * (1.0 + 0.1 * i as f64)
            });
            ds.states.push(StateField::new(v, t0() + Duration::hours(h as i64), false));
        }
        ds
    }

    fn tiny(stage: u8) -> TrainConfig {
        TrainConfig {
            stage,
            batch_size: 2,
            epochs: 1,
            steps_per_epoch: Some(2),
            learning_rate: 1e-3,
            model: ModelOverrides {
                embed_dim: Some(8),
                depths: Some([1, 1, 1]),
                n_heads: Some(2),
                pressure_patch: Some([2, 2, 2]),
                surface_patch: Some([2, 2]),
                window: Some([2, 2, 2]),
                time_embed_dim: Some(8),
                lowrank_r: Some(2),
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn train_data(ds: &Dataset) -> TrainData {
        let stats = training_stats(ds, None, None).unwrap();
        TrainData::from_dataset(ds, &stats, None, None).unwrap()
    }

    /// Fresh network with every parameter jittered so no path is exactly zero.
    fn jittered(cfg: &TrainConfig, data: &TrainData) -> VelocityNet {
        let mc = cfg.model.apply(ModelConfig::desk(&data.grid, &data.registry), 1);
        let mut net = VelocityNet::new(mc).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in &mut net.params {
            p.data.iter_mut().for_each(|v| *v += rng.random_range(-0.05..0.05));
        }
        net
    }

    #[test]
    fn config_toml_roundtrip_and_validation() {
        let cfg = tiny(2);
        assert_eq!(TrainConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let parsed = TrainConfig::from_toml("stage = 1\nbatch_size = 3\n[model]\nembed_dim = 16\n").unwrap();
        assert_eq!(parsed.batch_size, 3);
        assert_eq!(parsed.model.embed_dim, Some(16));
        assert_eq!(parsed.weight_decay, 0.1);
        assert!(TrainConfig::from_toml("stage = 3").is_err());
        assert!(TrainConfig::from_toml("stage = 2\nar_steps = 7").is_err());
        assert!(TrainConfig::from_toml("bogus = 1").is_err());
        assert!(TrainConfig::from_toml("train_start = \"yesterday\"").is_err());
    }

    #[test]
    fn sample_enumeration() {
        let ds = dataset(30, &[15]);
        let data = train_data(&ds);
        // Six-hour pairs start at 00, 06, 12 and 18 and need both ends present.
        let pairs = data.pairs(6, 6);
        let starts: Vec<usize> = pairs.iter().map(|&(k, _)| data.times[k].hour() as usize).collect();
        assert_eq!(starts, vec![0, 6, 12, 18]);
        for &(k, j) in &pairs {
            assert_eq!(data.times[j] - data.times[k], Duration::hours(6));
        }
        // A stage-2 sample at ar_steps = 6 is 7 consecutive hourly states.
        for k in data.sequences(6) {
            let hrs: Vec<i64> = (0..7).map(|j| (data.times[k + j] - t0()).num_hours()).collect();
            assert!(hrs.windows(2).all(|w| w[1] == w[0] + 1), "{hrs:?}");
            assert!(!hrs.contains(&15));
        }
        // Starts 0..=8 and 16..=23 survive the gap at hour 15.
        assert_eq!(data.sequences(6).len(), 9 + 8);
    }

    #[test]
    fn stage1_gradient_matches_finite_differences() {
        let ds = dataset(13, &[]);
        let data = train_data(&ds);
        let cfg = tiny(1);
        let net = jittered(&cfg, &data);
        let ps = dynamic_path_sample(&data.states[0], &data.states[6], 0.4, 0.0, None).unwrap();
        let cond = data.cond_at(data.times[0] + Duration::minutes(144)).unwrap();
        let (loss, grads) = stage1_sample_grad(&net, &ps.x_t, 0.4, &cond, &ps.u_target, &data.weights).unwrap();
        let v = net.evaluate(&ps.x_t, 0.4, &cond).unwrap();
        let direct = stage1_loss(&v, &data.states[0], &data.states[6], &data.weights).unwrap();
        assert!((loss - direct).abs() < 1e-12 * direct.max(1.0));
        let h = 1e-5;
        for (pid, k) in [(0, 3), (net.params.len() - 1, 1), (net.params.len() / 2, 0)] {
            let mut probe = net.clone();
            let mut at = |d: f64| {
                probe.params[pid].data[k] = net.params[pid].data[k] + d;
                stage1_sample_grad(&probe, &ps.x_t, 0.4, &cond, &ps.u_target, &data.weights).unwrap().0
            };
            let fd = (at(h) - at(-h)) / (2.0 * h);
            let g = grads[pid][k];
            assert!((fd - g).abs() < 1e-6 * (1.0 + g.abs()), "param {pid}[{k}]: fd {fd} vs {g}");
        }
    }

    #[test]
    fn stage2_recompute_agrees_with_full_graph() {
        let ds = dataset(13, &[]);
        let data = train_data(&ds);
        let cfg = TrainConfig { ar_steps: 6, ..tiny(2) };
        let trainer = Trainer::new(cfg.clone(), &data, TrainInit::Fresh).unwrap();
        let net = jittered(&cfg, &data);
        let sample = trainer.rollout_sample(2, &cfg.rollout(6)).unwrap();
        assert_eq!(sample.steps.len(), 6);
        let (l1, g1) = stage2_sample_grad(&net, &sample, &data.weights).unwrap();
        let (l2, g2) = stage2_sample_grad_recompute(&net, &sample, &data.weights).unwrap();
        assert!((l1 - l2).abs() < 1e-12 * l1.abs());
        let scale = grad_norm(&g1);
        assert!(scale > 0.0);
        for (a, b) in g1.iter().flatten().zip(g2.iter().flatten()) {
            assert!((a - b).abs() < 1e-10 * scale, "{a} vs {b}");
        }
        // The loss agrees with a plain Euler rollout scored by stage2_loss.
        let mut x = sample.x0.to_vec();
        let mut fc = Vec::new();
        for (t, c) in &sample.steps {
            let v = net.evaluate(&x, *t, c).unwrap();
            x.iter_mut().zip(&v).for_each(|(a, b)| *a += sample.delta_t * b);
            fc.push(x.clone());
        }
        let truths: Vec<Vec<f64>> = sample.truths.iter().map(|t| t.to_vec()).collect();
        let direct = stage2_loss(&fc, &truths, &data.weights).unwrap();
        assert!((l1 - direct).abs() < 1e-12 * direct);
    }

    #[test]
    fn stage1_training_is_deterministic() {
        let ds = dataset(30, &[]);
        let data = train_data(&ds);
        let cfg = TrainConfig {
            steps_per_epoch: Some(4),
            learning_rate: 3e-3,
            ..tiny(1)
        };
        let run = || {
            let mut tr = Trainer::new(cfg.clone(), &data, TrainInit::Fresh).unwrap();
            tr.run(None).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.len(), 4);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits());
            assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
        }
    }

    #[test]
    fn resume_reproduces_next_step_bitwise() {
        let ds = dataset(13, &[]);
        let data = train_data(&ds);
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: Some(2),
            ema_decay: 0.9,
            ar_steps: 6,
            ..tiny(2)
        };
        let dir = tempfile::tempdir().unwrap();
        let mut full = Trainer::new(cfg.clone(), &data, TrainInit::Fresh).unwrap();
        let logs = full.run(Some(dir.path())).unwrap();
        assert_eq!(logs.len(), 4);

        let archive = Archive::read(&dir.path().join("epoch-1.ckpt")).unwrap();
        let mut resumed = Trainer::new(cfg.clone(), &data, TrainInit::Resume(archive)).unwrap();
        assert_eq!(resumed.step, 2);
        let rest = resumed.run(None).unwrap();
        for (x, y) in rest.iter().zip(&logs[2..]) {
            assert_eq!(x, y);
        }
        for (a, b) in resumed.ema.shadow.iter().zip(&full.ema.shadow) {
            assert!(a.data.iter().zip(&b.data).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        let latest = Archive::read(&dir.path().join("latest.ckpt")).unwrap();
        assert_eq!(latest.meta["step"], 4);
        let metrics = read_metrics(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(metrics, logs);

        let other = TrainConfig { seed: 1, ..cfg };
        let archive = Archive::read(&dir.path().join("epoch-1.ckpt")).unwrap();
        assert!(Trainer::new(other, &data, TrainInit::Resume(archive)).is_err());
    }

    #[test]
    fn nan_aborts_and_keeps_last_checkpoint() {
        let ds = dataset(13, &[]);
        let good = train_data(&ds);
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: Some(1),
            ..tiny(1)
        };
        let dir = tempfile::tempdir().unwrap();
        let mut tr = Trainer::new(cfg.clone(), &good, TrainInit::Fresh).unwrap();
        tr.train_step().unwrap();
        tr.checkpoint().unwrap().write(&dir.path().join("latest.ckpt"), DType::F64).unwrap();
        let before = std::fs::read(dir.path().join("latest.ckpt")).unwrap();

        let mut bad = train_data(&ds);
        bad.states.iter_mut().for_each(|s| s[0] = f64::NAN);
        let archive = Archive::read(&dir.path().join("latest.ckpt")).unwrap();
        let mut tr = Trainer::new(cfg, &bad, TrainInit::Resume(archive)).unwrap();
        match tr.run(Some(dir.path())) {
            Err(TrainError::NonFinite { step }) => assert_eq!(step, 1),
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
        assert_eq!(std::fs::read(dir.path().join("latest.ckpt")).unwrap(), before);
    }

    #[test]
    fn fine_tune_starts_from_averaged_weights() {
        let ds = dataset(13, &[]);
        let data = train_data(&ds);
        let mut s1 = Trainer::new(TrainConfig { ema_decay: 0.5, ..tiny(1) }, &data, TrainInit::Fresh).unwrap();
        s1.run(None).unwrap();
        let ema = s1.ema_net();
        let s2 = Trainer::new(tiny(2), &data, TrainInit::FineTune(s1.checkpoint().unwrap())).unwrap();
        assert_eq!(s2.step, 0);
        assert_eq!(s2.net.params, ema.params);
        assert_ne!(s2.net.params, s1.net.params);
    }
}
