//! Meta-training: the differentiable filter over episode segments, the
//! combined filter and multi-step loss, the optimizer loop, and finite
//! difference gradient checks.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cholesky_with_jitter, Backend, Eval, Mat, Tape};
use crate::error::{Error, Result};
use crate::model::{decoder_init_g, decoder_step_g, encode_g, features_g, gate_context_g, noise_var_g, AgentState, Bound, ModelConfig, ModelParameters, SceneWindow};
use crate::predictor::{kde_loss_g, rollout_g, RolloutNoise, RolloutOptions, ThetaSource};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One agent's segment: an encoder window followed by a stream of frames.
///
/// `window.ego_history.last()` is the first filter state. Transition `t`
/// goes from state `t` to state `t + 1`, where state `t + 1` is
/// `stream[t]`. Rollouts are launched at `anchors` (a state index) and are
/// scored against the following `horizon` states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub window: SceneWindow,
    pub stream: Vec<AgentState>,
    pub anchors: Vec<usize>,
}

impl Episode {
    pub fn transitions(&self) -> usize {
        self.stream.len()
    }

    /// Positions of all filter states, starting with the window's current one.
    pub fn positions(&self) -> Result<Vec<[f64; 2]>> {
        let mut out = vec![self.window.current()?.position];
        out.extend(self.stream.iter().map(|s| s.position));
        Ok(out)
    }

    /// Inverse-dynamics labels `(pos_{t+1} - pos_t) / model_dt`.
    pub fn labels(&self, cfg: &ModelConfig) -> Result<Vec<[f64; 2]>> {
        let pos = self.positions()?;
        Ok(pos
            .windows(2)
            .map(|w| [(w[1][0] - w[0][0]) / cfg.dt, (w[1][1] - w[0][1]) / cfg.dt])
            .collect())
    }
}

/// Optimization and loss settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    /// Observed transitions before the rollout anchor.
    pub observed: usize,
    pub horizon: usize,
    pub particles: usize,
    pub lambda_filter: f64,
    pub lambda_kde: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    pub freeze_process_noise: bool,
    pub detach_diffusion: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            lr_decay: 0.5,
            decay_every: 15,
            batch_size: 16,
            observed: 8,
            horizon: 12,
            particles: 8,
            lambda_filter: 1.0,
            lambda_kde: 1.0,
            clip_norm: 10.0,
            epochs: 30,
            seed: 0,
            validation_fraction: 0.1,
            freeze_process_noise: false,
            detach_diffusion: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.lr_decay > 0.0 && self.clip_norm > 0.0) {
            return Err(Error::Config("training rates and clip threshold must be positive".into()));
        }
        if self.batch_size == 0 || self.horizon == 0 || self.particles == 0 || self.decay_every == 0 {
            return Err(Error::Config("batch size, horizon, particles and decay_every must be positive".into()));
        }
        if !(self.lambda_filter >= 0.0 && self.lambda_kde >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(Error::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Transitions per episode implied by the observed count and horizon.
    pub fn segment_len(&self) -> usize {
        self.observed + self.horizon
    }
}

/// Switches for the filter inside the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub lambda_filter: f64,
    pub lambda_kde: f64,
    /// `false` keeps the belief at the prior throughout the segment.
    pub corrections: bool,
    pub freeze_process_noise: bool,
    pub detach_diffusion: bool,
}

impl From<&TrainConfig> for LossOptions {
    fn from(c: &TrainConfig) -> Self {
        Self {
            lambda_filter: c.lambda_filter,
            lambda_kde: c.lambda_kde,
            corrections: true,
            freeze_process_noise: c.freeze_process_noise,
            detach_diffusion: c.detach_diffusion,
        }
    }
}

/// Loss value and its parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub filter: f64,
    pub kde: f64,
}

struct LossVars<V> {
    total: V,
    filter: f64,
    kde: f64,
}

/// Prior covariance factor `strict_lower(raw) + diag(softplus(diag raw))`.
fn prior_root_g<B: Backend>(b: &mut B, raw: &B::V, p: usize) -> B::V {
    let strict = b.constant(Mat::from_fn(p, p, |i, j| if i > j { 1.0 } else { 0.0 }));
    let eye = b.constant(Mat::identity(p, p));
    let low = b.mul(raw, &strict);
    let sp = b.softplus(raw);
    let diag = b.mul(&sp, &eye);
    b.add(&low, &diag)
}

/// One output's belief in backend form: `1 x p` mean and `p x p` covariance.
struct BeliefVars<V> {
    mean: V,
    cov: V,
}

fn episode_loss_g<B: Backend>(
    b: &mut B,
    p: &Bound<B::V>,
    cfg: &ModelConfig,
    episode: &Episode,
    opts: &LossOptions,
    noises: &[RolloutNoise],
) -> Result<LossVars<B::V>> {
    let labels = episode.labels(cfg)?;
    if labels.is_empty() {
        return Err(Error::InvalidInput("episode needs at least one transition".into()));
    }
    if noises.len() != episode.anchors.len() {
        return Err(Error::dim("rollout noise sets", episode.anchors.len(), noises.len()));
    }
    let positions = episode.positions()?;
    for (&k, nz) in episode.anchors.iter().zip(noises) {
        if k + nz.horizon() > labels.len() {
            return Err(Error::InvalidInput(format!(
                "anchor {k} with horizon {} exceeds {} transitions",
                nz.horizon(),
                labels.len()
            )));
        }
    }
    let (pd, d) = (cfg.feature_dim, cfg.output_dim);
    let ratio = episode.window.dt / cfg.dt;

    let v = encode_g(b, p, cfg, &episode.window)?;
    let ctx = gate_context_g(b, p, &v);
    let h0 = decoder_init_g(b, p, &v);
    let cur = episode.window.current()?;
    let v0 = b.constant(Mat::from_row_slice(1, 2, &[cur.velocity[0] * ratio, cur.velocity[1] * ratio]));
    let mut h = decoder_step_g(b, p, cfg, &ctx, &v0, &h0);

    let mut q = b.softplus(p.get("dyn.q_raw"));
    if opts.freeze_process_noise {
        q = b.detach(&q);
    }
    let eye = b.constant(Mat::identity(pd, pd));
    let qdiag = b.mul(&eye, &q);

    let prior: Vec<BeliefVars<B::V>> = (0..d)
        .map(|j| {
            let mean = b.slice(p.get("prior.mean"), j, 1, 0, pd);
            let root = prior_root_g(b, p.get(&format!("prior.chol.{j}")), pd);
            let rt = b.transpose(&root);
            let cov = b.matmul(&root, &rt);
            BeliefVars { mean, cov }
        })
        .collect();
    let mut post: Vec<BeliefVars<B::V>> = prior.iter().map(|x| BeliefVars { mean: x.mean.clone(), cov: x.cov.clone() }).collect();

    let mut nll_total: Option<B::V> = None;
    let mut kde_total: Option<B::V> = None;
    let mut kde_sum = 0.0;
    for (t, y) in labels.iter().enumerate() {
        let pred: Vec<BeliefVars<B::V>> = post
            .iter()
            .map(|bv| BeliefVars {
                mean: bv.mean.clone(),
                cov: b.add(&bv.cov, &qdiag),
            })
            .collect();

        for (a, _) in episode.anchors.iter().enumerate().filter(|(_, &k)| k == t) {
            let noise = &noises[a];
            let sources = pred
                .iter()
                .map(|bv| {
                    let root = cholesky_with_jitter(b, &bv.cov).ok_or_else(|| Error::Numerical(format!("belief covariance at anchor {t} is not positive definite")))?;
                    Ok(ThetaSource { mean: bv.mean.clone(), root })
                })
                .collect::<Result<Vec<_>>>()?;
            let start = AgentState::new(positions[t], if t == 0 {
                [cur.velocity[0] * ratio, cur.velocity[1] * ratio]
            } else {
                labels[t - 1]
            });
            let trace = rollout_g(b, p, cfg, &sources, &ctx, &h, &start, noise, RolloutOptions { detach_diffusion: opts.detach_diffusion })?;
            let truth = &positions[t + 1..t + 1 + noise.horizon()];
            let kde = kde_loss_g(b, &trace.positions, &trace.variances, truth)?;
            kde_sum += b.scalar_value(&kde);
            kde_total = Some(match kde_total {
                None => kde,
                Some(acc) => b.add(&acc, &kde),
            });
        }

        let phi = features_g(b, p, &h);
        let var = noise_var_g(b, p, cfg, &h);
        let phit = b.transpose(&phi);
        let mut next = Vec::with_capacity(d);
        for (j, bv) in pred.into_iter().enumerate() {
            let u = b.matmul(&bv.cov, &phit);
            let pu = b.matmul(&phi, &u);
            let vj = b.slice(&var, 0, 1, j, 1);
            let innov_var = b.add(&pu, &vj);
            let pv = b.scalar_value(&innov_var);
            if !(pv > 0.0 && pv.is_finite()) {
                return Err(Error::Numerical(format!("innovation variance {pv:e} at filter step {t}, output {j}")));
            }
            let prod = b.mul(&phi, &bv.mean);
            let mu = b.row_sum(&prod);
            let yj = b.scalar(y[j]);
            let e = b.sub(&yj, &mu);
            let e2 = b.square(&e);
            let quad = b.div(&e2, &innov_var);
            let lp = b.ln(&innov_var);
            let s = b.add(&quad, &lp);
            let s = b.offset(&s, LN_2PI);
            let nll = b.scale(&s, 0.5);
            nll_total = Some(match nll_total {
                None => nll,
                Some(acc) => b.add(&acc, &nll),
            });
            if opts.corrections {
                let gain = b.div(&u, &innov_var);
                let gt = b.transpose(&gain);
                let step = b.mul(&gt, &e);
                let mean = b.add(&bv.mean, &step);
                let ut = b.transpose(&u);
                let outer = b.matmul(&gain, &ut);
                let cov = b.sub(&bv.cov, &outer);
                next.push(BeliefVars { mean, cov });
            }
        }
        if opts.corrections {
            post = next;
        }
        let a = b.constant(Mat::from_row_slice(1, 2, y));
        h = decoder_step_g(b, p, cfg, &ctx, &a, &h);
    }

    let nll_total = nll_total.expect("at least one transition");
    let filter = b.scalar_value(&nll_total);
    let mut total = b.scale(&nll_total, opts.lambda_filter);
    if let Some(k) = kde_total {
        let scaled = b.scale(&k, opts.lambda_kde / episode.anchors.len() as f64);
        total = b.add(&total, &scaled);
    }
    let kde = if episode.anchors.is_empty() { 0.0 } else { kde_sum / episode.anchors.len() as f64 };
    Ok(LossVars { total, filter, kde })
}

fn loss_value(v: &LossVars<std::rc::Rc<Mat>>) -> LossParts {
    LossParts {
        total: v.total[(0, 0)],
        filter: v.filter,
        kde: v.kde,
    }
}

/// Draws rollout noise for every anchor of `episode`.
pub fn draw_noise(cfg: &ModelConfig, episode: &Episode, horizon: usize, particles: usize, rng: &mut ChaCha8Rng) -> Vec<RolloutNoise> {
    episode
        .anchors
        .iter()
        .map(|_| RolloutNoise::draw(particles, horizon, cfg.feature_dim, cfg.output_dim, rng))
        .collect()
}

/// Combined loss under fixed rollout noise.
pub fn episode_loss_with_noise(params: &ModelParameters, episode: &Episode, opts: &LossOptions, noises: &[RolloutNoise]) -> Result<LossParts> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let v = episode_loss_g(&mut b, &p, &params.config, episode, opts, noises)?;
    Ok(loss_value(&v))
}

/// Combined loss with rollout noise drawn from `rng`.
pub fn episode_loss(params: &ModelParameters, episode: &Episode, config: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<f64> {
    let noises = draw_noise(&params.config, episode, config.horizon, config.particles, rng);
    Ok(episode_loss_with_noise(params, episode, &LossOptions::from(config), &noises)?.total)
}

/// Gradients keyed by parameter name.
pub type Gradients = BTreeMap<String, Mat>;

/// Loss and reverse-mode gradients under fixed rollout noise.
pub fn episode_gradient(params: &ModelParameters, episode: &Episode, opts: &LossOptions, noises: &[RolloutNoise]) -> Result<(LossParts, Gradients)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let v = episode_loss_g(&mut tape, &p, &params.config, episode, opts, noises)?;
    let grads = tape.backward(v.total);
    let parts = LossParts {
        total: tape.scalar_value(&v.total),
        filter: v.filter,
        kde: v.kde,
    };
    let out = p.iter().map(|(name, var)| (name.clone(), grads.wrt(*var))).collect();
    Ok((parts, out))
}

/// A scalar objective over the model parameters.
pub trait LossFn: Sync {
    fn eval<B: Backend>(&self, b: &mut B, p: &Bound<B::V>, cfg: &ModelConfig) -> Result<B::V>;
}

/// The combined episode loss as a [`LossFn`].
pub struct EpisodeObjective<'a> {
    pub episode: &'a Episode,
    pub options: LossOptions,
    pub noises: &'a [RolloutNoise],
}

impl LossFn for EpisodeObjective<'_> {
    fn eval<B: Backend>(&self, b: &mut B, p: &Bound<B::V>, cfg: &ModelConfig) -> Result<B::V> {
        Ok(episode_loss_g(b, p, cfg, self.episode, &self.options, self.noises)?.total)
    }
}

/// Per-group gradient comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    /// `|g_a - g_n| / max(|g_a|, |g_n|)` over the whole group.
    pub norm_rel_err: f64,
    pub analytic_norm: f64,
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
    pub loss: f64,
}

/// Entries with both gradients below this size are compared absolutely.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// Compares reverse-mode gradients of `loss` with central differences of
/// step `step` on every parameter entry.
pub fn check_gradients<L: LossFn>(params: &ModelParameters, loss: &L, step: f64) -> Result<GradCheckReport> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = loss.eval(&mut tape, &bound, cfg)?;
    let value = tape.scalar_value(&out);
    let grads = tape.backward(out);

    let eval_at = |p: &ModelParameters| -> Result<f64> {
        let mut b = Eval;
        let bound = p.bind(&mut b);
        let v = loss.eval(&mut b, &bound, cfg)?;
        Ok(v[(0, 0)])
    };

    let names = params.names();
    let groups = names
        .par_iter()
        .map(|name| {
            let analytic = grads.wrt(*bound.get(name));
            let base = params.get(name).expect("named tensor");
            let mut numeric = Mat::zeros(base.nrows(), base.ncols());
            let mut work = params.clone();
            for idx in 0..base.len() {
                let orig = base[idx];
                work.get_mut(name).expect("named tensor")[idx] = orig + step;
                let up = eval_at(&work)?;
                work.get_mut(name).expect("named tensor")[idx] = orig - step;
                let down = eval_at(&work)?;
                work.get_mut(name).expect("named tensor")[idx] = orig;
                numeric[idx] = (up - down) / (2.0 * step);
            }
            let max_rel_err = analytic
                .iter()
                .zip(numeric.iter())
                .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_CHECK_FLOOR))
                .fold(0.0, f64::max);
            let diff = (&analytic - &numeric).norm();
            let scale = analytic.norm().max(numeric.norm());
            Ok(GroupCheck {
                name: name.clone(),
                entries: base.len(),
                max_rel_err,
                norm_rel_err: if scale > 0.0 { diff / scale } else { 0.0 },
                analytic_norm: analytic.norm(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { step, groups, max_rel_err, loss: value })
}

/// Gradient check of the combined episode loss under fixed noise.
pub fn gradient_check(params: &ModelParameters, episode: &Episode, opts: &LossOptions, noises: &[RolloutNoise]) -> Result<GradCheckReport> {
    check_gradients(params, &EpisodeObjective { episode, options: *opts, noises }, 1e-5)
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Mat>,
    v: BTreeMap<String, Mat>,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

impl Adam {
    /// Applies one update to every parameter accepted by `mask`.
    pub fn step(&mut self, params: &mut ModelParameters, grads: &Gradients, lr: f64, mask: impl Fn(&str) -> bool) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, w) in params.iter_mut() {
            if !mask(name) {
                continue;
            }
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(g.nrows(), g.ncols()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(g.nrows(), g.ncols()));
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scales `grads` so that their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.values().map(|g| g.norm_squared()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            *g *= s;
        }
    }
    norm
}

/// One structured training log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub filter: f64,
    pub kde: f64,
    pub learning_rate: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<LogRecord>,
}

impl TrainingLog {
    pub fn validation(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| r.split == "validation")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "kebab-case")]
pub enum TrainStatus {
    Completed,
    Diverged { epoch: usize, message: String },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation loss.
    pub params: ModelParameters,
    pub log: TrainingLog,
    pub best_epoch: usize,
    pub status: TrainStatus,
}

/// Seed for a `(purpose, epoch, index)` triple.
pub fn derive_seed(seed: u64, epoch: u64, index: u64) -> u64 {
    let mut x = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [epoch, index] {
        x = x.wrapping_add(v.wrapping_mul(0xbf58_476d_1ce4_e5b9));
        x ^= x >> 31;
        x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^= x >> 29;
    }
    x
}

const VALIDATION_EPOCH: u64 = u64::MAX;

fn mean_loss(params: &ModelParameters, episodes: &[&Episode], config: &TrainConfig, opts: &LossOptions, epoch: u64) -> Result<LossParts> {
    let parts = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch, i as u64));
            let noises = draw_noise(&params.config, ep, config.horizon, config.particles, &mut rng);
            episode_loss_with_noise(params, ep, opts, &noises)
        })
        .collect::<Result<Vec<_>>>()?;
    let n = parts.len().max(1) as f64;
    Ok(LossParts {
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
        filter: parts.iter().map(|p| p.filter).sum::<f64>() / n,
        kde: parts.iter().map(|p| p.kde).sum::<f64>() / n,
    })
}

/// Mean combined loss over `episodes` under fixed seeded noise.
pub fn evaluate_loss(params: &ModelParameters, episodes: &[Episode], config: &TrainConfig) -> Result<LossParts> {
    let refs: Vec<&Episode> = episodes.iter().collect();
    mean_loss(params, &refs, config, &LossOptions::from(config), VALIDATION_EPOCH)
}

/// Mean loss and gradient over a batch; reduction order follows the batch.
pub fn batch_gradient(
    params: &ModelParameters,
    batch: &[&Episode],
    opts: &LossOptions,
    noise_for: impl Fn(usize, &Episode) -> Vec<RolloutNoise> + Sync,
) -> Result<(LossParts, Gradients)> {
    let results = batch
        .par_iter()
        .enumerate()
        .map(|(i, ep)| episode_gradient(params, ep, opts, &noise_for(i, ep)))
        .collect::<Result<Vec<_>>>()?;
    let n = results.len() as f64;
    let mut parts = LossParts::default();
    let mut grads: Gradients = BTreeMap::new();
    for (lp, g) in results {
        parts.total += lp.total / n;
        parts.filter += lp.filter / n;
        parts.kde += lp.kde / n;
        for (name, m) in g {
            match grads.get_mut(&name) {
                Some(acc) => *acc += m / n,
                None => {
                    grads.insert(name, m / n);
                }
            }
        }
    }
    Ok((parts, grads))
}

fn finite_grads(g: &Gradients) -> bool {
    g.values().all(|m| m.iter().all(|v| v.is_finite()))
}

/// Trains all parameters on `episodes`, keeping the parameters with the
/// lowest validation loss.
pub fn train(params: &ModelParameters, episodes: &[Episode], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("training needs at least one episode".into()));
    }
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, VALIDATION_EPOCH - 1, 0)));
    let n_val = if episodes.len() > 1 { ((episodes.len() as f64) * config.validation_fraction).ceil() as usize } else { 0 };
    let n_val = n_val.min(episodes.len() - 1);
    let val: Vec<&Episode> = order[..n_val].iter().map(|&i| &episodes[i]).collect();
    let mut train_idx: Vec<usize> = order[n_val..].to_vec();
    let val_set: Vec<&Episode> = if val.is_empty() { train_idx.iter().map(|&i| &episodes[i]).collect() } else { val };

    let opts = LossOptions::from(config);
    let mask = |name: &str| !(config.freeze_process_noise && name == "dyn.q_raw");
    let mut current = params.clone();
    let mut adam = Adam::default();
    let mut log = TrainingLog::default();
    let start = Instant::now();
    let elapsed = |s: &Instant| s.elapsed().as_secs_f64() * 1e3;

    let init_val = mean_loss(&current, &val_set, config, &opts, VALIDATION_EPOCH)?;
    log.records.push(LogRecord {
        epoch: 0,
        split: "validation".into(),
        loss: init_val.total,
        filter: init_val.filter,
        kde: init_val.kde,
        learning_rate: config.learning_rate,
        wall_ms: elapsed(&start),
    });
    let mut best = (init_val.total, 0usize, current.clone());
    let mut status = TrainStatus::Completed;

    'epochs: for epoch in 1..=config.epochs {
        let lr = config.learning_rate * config.lr_decay.powi(((epoch - 1) / config.decay_every) as i32);
        train_idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, epoch as u64, u64::MAX)));
        let mut acc = LossParts::default();
        let mut batches = 0usize;
        for chunk in train_idx.chunks(config.batch_size) {
            let batch: Vec<&Episode> = chunk.iter().map(|&i| &episodes[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|&i| derive_seed(config.seed, epoch as u64, i as u64)).collect();
            let res = batch_gradient(&current, &batch, &opts, |i, ep| {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[i]);
                draw_noise(&current.config, ep, config.horizon, config.particles, &mut rng)
            });
            let (parts, mut grads) = match res {
                Ok(r) if r.0.total.is_finite() && finite_grads(&r.1) => r,
                Ok(r) => {
                    status = TrainStatus::Diverged { epoch, message: format!("non-finite loss {}", r.0.total) };
                    break 'epochs;
                }
                Err(e) => {
                    status = TrainStatus::Diverged { epoch, message: e.to_string() };
                    break 'epochs;
                }
            };
            clip_global_norm(&mut grads, config.clip_norm);
            let mut next = current.clone();
            adam.step(&mut next, &grads, lr, mask);
            if !next.is_finite() {
                status = TrainStatus::Diverged { epoch, message: "non-finite parameters after update".into() };
                break 'epochs;
            }
            current = next;
            acc.total += parts.total;
            acc.filter += parts.filter;
            acc.kde += parts.kde;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        log.records.push(LogRecord {
            epoch,
            split: "train".into(),
            loss: acc.total / nb,
            filter: acc.filter / nb,
            kde: acc.kde / nb,
            learning_rate: lr,
            wall_ms: elapsed(&start),
        });
        let vl = match mean_loss(&current, &val_set, config, &opts, VALIDATION_EPOCH) {
            Ok(v) if v.total.is_finite() => v,
            Ok(v) => {
                status = TrainStatus::Diverged { epoch, message: format!("non-finite validation loss {}", v.total) };
                break;
            }
            Err(e) => {
                status = TrainStatus::Diverged { epoch, message: e.to_string() };
                break;
            }
        };
        log.records.push(LogRecord {
            epoch,
            split: "validation".into(),
            loss: vl.total,
            filter: vl.filter,
            kde: vl.kde,
            learning_rate: lr,
            wall_ms: elapsed(&start),
        });
        if vl.total < best.0 {
            best = (vl.total, epoch, current.clone());
        }
    }
    Ok(TrainOutcome {
        params: best.2,
        log,
        best_epoch: best.1,
        status,
    })
}
