//! Trajectory-consistency plus contrastive pre-training.

mod augment;

pub use augment::{augment, horizontal_flip, AugmentConfig};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{ema_update, encode, project, AdamW, AdamWConfig, ModelParams};
use crate::numerics::{Graph, SeededRng, Tensor, Var};
use crate::schedule::{adjacent_pair, CurriculumState, NoiseSchedule, ScheduleConfig, TrajectoryPair};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub tau: f64,
    /// EMA rate of the consistency target; `0` uses the online encoder with
    /// gradients stopped.
    pub mu1: f64,
    /// Start rate of the contrastive target EMA.
    pub mu2: f64,
    /// End rate of the contrastive target EMA.
    pub mu2_end: f64,
    /// Steepness of the EMA ramp.
    pub ema_steepness: f64,
    /// Ramp the contrastive EMA from `mu2` to `mu2_end`; otherwise hold `mu2`.
    pub dynamic_ema: bool,
    pub batch_size: usize,
    pub iters: u64,
    pub optimizer: AdamWConfig,
    pub augment: AugmentConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            mu1: 0.0,
            mu2: 0.99,
            mu2_end: 0.9999,
            ema_steepness: 10.0,
            dynamic_ema: true,
            batch_size: 64,
            iters: 2000,
            optimizer: AdamWConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(invalid!("temperature must be positive, got {}", self.tau));
        }
        for (name, mu) in [("mu1", self.mu1), ("mu2", self.mu2), ("mu2_end", self.mu2_end)] {
            crate::numerics::check_probability(mu, name)?;
        }
        if self.dynamic_ema && !(self.mu2 < self.mu2_end) {
            return Err(invalid!("dynamic EMA needs mu2 < mu2_end"));
        }
        if self.batch_size < 2 {
            return Err(invalid!("batch size must be at least 2, got {}", self.batch_size));
        }
        self.optimizer.validate()?;
        self.augment.validate()
    }

    /// Contrastive-target EMA rate after iteration `k` of `total`.
    pub fn contrastive_rate(&self, k: u64, total: u64) -> Result<f64> {
        if self.dynamic_ema {
            ema_schedule(k, total, self.mu2, self.mu2_end, self.ema_steepness)
        } else {
            Ok(self.mu2)
        }
    }
}

/// Sigmoid ramp of the EMA rate from `start` at `k = 0` to `end` at
/// `k = total`.
///
/// With `l = sqrt(k/K (E^2 - S^2) + S^2)` and `q = (l - S) / (E - S)`, the
/// rate is `S + (E - S) tanh(m q / 2) / tanh(m / 2)`; larger `m` rises faster.
pub fn ema_schedule(k: u64, total: u64, start: f64, end: f64, steepness: f64) -> Result<f64> {
    if k > total {
        return Err(invalid!("iteration {k} beyond total {total}"));
    }
    if !(start < end) || !(steepness > 0.0) {
        return Err(invalid!("EMA ramp needs start < end and positive steepness"));
    }
    if total == 0 {
        return Ok(start);
    }
    let frac = k as f64 / total as f64;
    let l = (frac * (end * end - start * start) + start * start).sqrt();
    let q = ((l - start) / (end - start)).clamp(0.0, 1.0);
    let s = ((0.5 * steepness * q).tanh() / (0.5 * steepness).tanh()).clamp(0.0, 1.0);
    Ok(start + (end - start) * s)
}

/// Mean over rows of `-log softmax(a_i . c_j / tau)_{j = i}`.
///
/// `anchors` and `candidates` are `[B, D]` with unit-norm rows; row `i` of
/// each forms the positive pair and every other candidate is a negative.
pub fn info_nce(g: &mut Graph, anchors: Var, candidates: Var, tau: f64) -> Result<Var> {
    let (sa, sc) = (g.value(anchors).shape(), g.value(candidates).shape());
    if sa.len() != 2 || sa != sc {
        return Err(shape_err!("info_nce needs matching [B, D] inputs, got {sa:?} and {sc:?}"));
    }
    if !(tau > 0.0) {
        return Err(invalid!("temperature must be positive, got {tau}"));
    }
    for v in [anchors, candidates] {
        let t = g.value(v);
        if (0..t.rows()).any(|i| t.row(i).iter().all(|&x| x == 0.0)) {
            return Err(invalid!("info_nce received a zero-norm vector"));
        }
    }
    let b = sa[0];
    let logits = g.matmul(anchors, candidates, true)?;
    let logits = g.scale(logits, 1.0 / tau)?;
    let logp = g.log_softmax(logits)?;
    let diag: Vec<usize> = (0..b).collect();
    let pos = g.gather_last(logp, &diag)?;
    let mean = g.mean(pos)?;
    g.scale(mean, -1.0)
}

/// One pre-training batch: clean images, two augmented views of each, and
/// one trajectory pair per image sharing the interval index `n`.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub x0: Tensor,
    pub z1: Tensor,
    pub z2: Tensor,
    pub pairs: Vec<TrajectoryPair>,
    pub n: usize,
    /// `t_n` and `t_{n-1}` of the schedule the pairs were drawn from.
    pub t_n: f64,
    pub t_prev: f64,
    /// Time at which clean views enter the encoder.
    pub t_clean: f64,
}

impl PretrainBatch {
    /// Draws `n` uniformly from `1..=N`, then per image an adjacent pair and
    /// two augmented views.
    pub fn assemble(
        x0: &Tensor,
        shape: [usize; 3],
        schedule: &NoiseSchedule,
        augment_cfg: &AugmentConfig,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        let per: usize = shape.iter().product();
        if x0.rank() != 2 || x0.shape()[1] != per {
            return Err(shape_err!("batch of {shape:?} images has shape {:?}", x0.shape()));
        }
        let b = x0.shape()[0];
        let n = 1 + rng.below(schedule.intervals());
        let mut pairs = Vec::with_capacity(b);
        let mut z1 = Vec::with_capacity(b * per);
        let mut z2 = Vec::with_capacity(b * per);
        for i in 0..b {
            let img = Tensor::new(vec![per], x0.row(i).to_vec())?;
            pairs.push(adjacent_pair(&img, n, schedule, rng)?);
            z1.extend(augment(x0.row(i), shape, rng, augment_cfg));
            z2.extend(augment(x0.row(i), shape, rng, augment_cfg));
        }
        Ok(Self {
            x0: x0.clone(),
            z1: Tensor::new(vec![b, per], z1)?,
            z2: Tensor::new(vec![b, per], z2)?,
            pairs,
            n,
            t_n: schedule.time(n),
            t_prev: schedule.time(n - 1),
            t_clean: schedule.time(0),
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    fn stack(&self, pick: impl Fn(&TrajectoryPair) -> &Tensor) -> Result<Tensor> {
        let per = self.x0.shape()[1];
        let mut data = Vec::with_capacity(self.len() * per);
        for p in &self.pairs {
            data.extend_from_slice(pick(p).data());
        }
        Tensor::new(vec![self.len(), per], data)
    }

    /// `[B, CHW]` stack of the later pair members `x_{t_n}`.
    pub fn noisy(&self) -> Result<Tensor> {
        self.stack(|p| &p.x_tn)
    }

    /// `[B, CHW]` stack of the earlier pair members `x_{t_{n-1}}`.
    pub fn less_noisy(&self) -> Result<Tensor> {
        self.stack(|p| &p.x_tn_minus1)
    }
}

/// Where the consistency candidates come from.
#[derive(Clone, Copy, Debug)]
pub enum ConsistencyTarget<'a> {
    /// The online encoder with gradients stopped.
    Online,
    /// A separate EMA mirror of the encoder.
    Mirror(&'a crate::model::ParamSet),
}

/// Consistency term: normalized `g(x_{t_n}, t_n)` against stop-gradient
/// normalized target representations of `x_{t_{n-1}}` at `t_{n-1}`. The
/// projector is not used.
pub fn consistency_loss(
    g: &mut Graph,
    params: &ModelParams,
    theta: &[Var],
    target: ConsistencyTarget,
    batch: &PretrainBatch,
    tau: f64,
) -> Result<Var> {
    let b = batch.len();
    let anchors = encode(g, &params.config, theta, &batch.noisy()?, &vec![batch.t_n; b])?;
    let anchors = g.l2_normalize(anchors)?;
    let target_params = match target {
        ConsistencyTarget::Online => &params.theta,
        ConsistencyTarget::Mirror(p) => p,
    };
    let frozen = target_params.bind(g, false);
    let cand = encode(g, &params.config, &frozen, &batch.less_noisy()?, &vec![batch.t_prev; b])?;
    let cand = g.l2_normalize(cand)?;
    info_nce(g, anchors, cand, tau)
}

/// Contrastive term: normalized `p_nu(g_theta(z1, t_0))` against the
/// normalized EMA target `p_nu_ema(g_theta_ema(z2, t_0))`.
pub fn contrastive_loss(
    g: &mut Graph,
    params: &ModelParams,
    theta: &[Var],
    nu: &[Var],
    batch: &PretrainBatch,
    tau: f64,
) -> Result<Var> {
    let b = batch.len();
    let times = vec![batch.t_clean; b];
    let rep = encode(g, &params.config, theta, &batch.z1, &times)?;
    let anchors = project(g, &params.config, nu, rep)?;
    let anchors = g.l2_normalize(anchors)?;
    let theta_t = params.theta_ema.bind(g, false);
    let nu_t = params.nu_ema.bind(g, false);
    let rep_t = encode(g, &params.config, &theta_t, &batch.z2, &times)?;
    let cand = project(g, &params.config, &nu_t, rep_t)?;
    let cand = g.l2_normalize(cand)?;
    info_nce(g, anchors, cand, tau)
}

/// Per-step metrics, one JSON line each.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    /// Completed iterations including this one.
    pub iter: u64,
    pub loss_consistency: f64,
    pub loss_contrastive: f64,
    pub mu: f64,
    pub n: usize,
    #[serde(rename = "N")]
    pub intervals: usize,
}

/// One optimizer step on `consistency + contrastive` at zero-based
/// iteration `k`, followed by the EMA update of the contrastive target with
/// the rate for `k + 1` completed iterations.
pub fn pretrain_step(
    params: &mut ModelParams,
    optimizer: &mut AdamW,
    batch: &PretrainBatch,
    config: &PretrainConfig,
    k: u64,
    intervals: usize,
) -> Result<PretrainMetrics> {
    let mut g = Graph::new();
    let theta = params.theta.bind(&mut g, true);
    let nu = params.nu.bind(&mut g, true);
    let target = match (&params.theta_consistency_ema, config.mu1 > 0.0) {
        (Some(mirror), true) => ConsistencyTarget::Mirror(mirror),
        _ => ConsistencyTarget::Online,
    };
    let cons = consistency_loss(&mut g, params, &theta, target, batch, config.tau)?;
    let contr = contrastive_loss(&mut g, params, &theta, &nu, batch, config.tau)?;
    let total = g.add(cons, contr)?;
    let (lc, lk) = (g.value(cons).item()?, g.value(contr).item()?);
    if !(lc.is_finite() && lk.is_finite()) {
        return Err(Error::NonFinite(format!(
            "pretrain loss at iteration {k}: consistency={lc}, contrastive={lk}"
        )));
    }
    let grads = g.backward(total)?;
    let flat: Vec<Tensor> = theta
        .iter()
        .chain(&nu)
        .map(|v| grads.get(*v).cloned())
        .collect::<Result<_>>()?;
    drop(g);
    optimizer.update(&mut [&mut params.theta, &mut params.nu], &flat)?;

    let done = k + 1;
    let mu = config.contrastive_rate(done, config.iters.max(done))?;
    ema_update(&mut params.theta_ema, &params.theta, mu)?;
    ema_update(&mut params.nu_ema, &params.nu, mu)?;
    if config.mu1 > 0.0 {
        let mirror = params
            .theta_consistency_ema
            .get_or_insert_with(|| params.theta.clone());
        ema_update(mirror, &params.theta, config.mu1)?;
    }
    Ok(PretrainMetrics {
        iter: done,
        loss_consistency: lc,
        loss_contrastive: lk,
        mu,
        n: batch.n,
        intervals,
    })
}

/// Resumable pre-training loop state.
#[derive(Clone, Debug, PartialEq)]
pub struct Pretrainer {
    pub params: ModelParams,
    pub optimizer: AdamW,
    pub rng: SeededRng,
    /// Number of completed iterations.
    pub iter: u64,
}

impl Pretrainer {
    pub fn new(params: ModelParams, config: &PretrainConfig, rng: SeededRng) -> Result<Self> {
        config.validate()?;
        let optimizer = AdamW::new(config.optimizer.clone(), &[&params.theta, &params.nu])?;
        let mut params = params;
        if config.mu1 > 0.0 && params.theta_consistency_ema.is_none() {
            params.theta_consistency_ema = Some(params.theta.clone());
        }
        Ok(Self {
            params,
            optimizer,
            rng,
            iter: 0,
        })
    }

    /// Runs until `config.iters` or `stop_at` iterations are complete,
    /// whichever is first, reporting each step to `on_step`.
    pub fn run(
        &mut self,
        data: &Dataset,
        config: &PretrainConfig,
        schedule: &ScheduleConfig,
        stop_at: Option<u64>,
        mut on_step: impl FnMut(&PretrainMetrics) -> Result<()>,
    ) -> Result<()> {
        config.validate()?;
        if data.len() < config.batch_size {
            return Err(invalid!(
                "dataset has {} images, fewer than the batch size {}",
                data.len(),
                config.batch_size
            ));
        }
        if data.shape() != self.params.config.input_shape {
            return Err(shape_err!(
                "dataset images {:?} do not match encoder input {:?}",
                data.shape(),
                self.params.config.input_shape
            ));
        }
        let end = stop_at.map_or(config.iters, |s| s.min(config.iters));
        let mut cached: Option<NoiseSchedule> = None;
        while self.iter < end {
            let k = self.iter;
            let intervals = CurriculumState {
                n_start: schedule.n_start,
                n_end: schedule.n_end,
                k,
                total: config.iters,
            }
            .intervals()?;
            if cached.as_ref().map(|s| s.intervals()) != Some(intervals) {
                cached = Some(NoiseSchedule::from_config(schedule, intervals)?);
            }
            let grid = cached.as_ref().expect("schedule cached above");
            let idx = sample_indices(&mut self.rng, data.len(), config.batch_size);
            let x0 = data.images_at(&idx)?;
            let batch = PretrainBatch::assemble(&x0, data.shape(), grid, &config.augment, &mut self.rng)?;
            let metrics = pretrain_step(&mut self.params, &mut self.optimizer, &batch, config, k, intervals)?;
            self.iter += 1;
            on_step(&metrics)?;
        }
        Ok(())
    }
}

/// `count` distinct indices below `len` by a partial Fisher-Yates shuffle.
pub(crate) fn sample_indices(rng: &mut SeededRng, len: usize, count: usize) -> Vec<usize> {
    let mut pool: Vec<usize> = (0..len).collect();
    for i in 0..count {
        let j = i + rng.below(len - i);
        pool.swap(i, j);
    }
    pool.truncate(count);
    pool
}

#[cfg(test)]
mod tests;
