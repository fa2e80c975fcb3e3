//! Particle rollouts of the forecaster and the kernel-density multi-step
//! loss.
//!
//! Every particle draws its own last layer from the belief, then per step
//! samples an action from `N(Φ(h) θ, Σ(h))`, integrates it, advances the
//! decoder on the new state and lets its last layer diffuse. Position
//! uncertainty from the action noise is accumulated as `dt² Σ_k Σ_k`.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Backend, Eval, Mat};
use crate::bayes::{covariance_sqrt, FactoredBelief};
use crate::error::{Error, Result};
use crate::model::{decoder_step_g, features_g, gate_context_g, noise_var_g, AgentState, Bound, DecoderState, GateContext, ModelConfig, row_mat, ModelParameters, SceneEncoding};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// One sampled forecast.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryParticle {
    /// `T + 1` states, starting with the anchor state.
    pub states: Vec<AgentState>,
    pub actions: Vec<[f64; 2]>,
    /// Diagonal action noise at each step.
    pub step_noise: Vec<[f64; 2]>,
    /// Diagonal position covariance after each step.
    pub integrated_variance: Vec<[f64; 2]>,
    /// `T + 1` entries, each holding one last-layer vector per output.
    pub last_layer_path: Vec<Vec<DVector<f64>>>,
}

/// `N` forecasts over a common horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub particles: Vec<TrajectoryParticle>,
    pub horizon: usize,
    pub particle_count: usize,
}

impl PredictionSet {
    /// Predicted positions, `[particle][step]`, excluding the anchor.
    pub fn positions(&self) -> Vec<Vec<[f64; 2]>> {
        self.particles
            .iter()
            .map(|p| p.states[1..].iter().map(|s| s.position).collect())
            .collect()
    }

    /// Position variances, `[particle][step]`.
    pub fn variances(&self) -> Vec<Vec<[f64; 2]>> {
        self.particles.iter().map(|p| p.integrated_variance.clone()).collect()
    }
}

/// Standard normal draws that fully determine a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutNoise {
    /// Per output: `N x p` draws for the initial last layer.
    pub theta: Vec<Mat>,
    /// Per step: `N x d` action draws.
    pub action: Vec<Mat>,
    /// Per step and output: `N x p` diffusion draws.
    pub diffusion: Vec<Vec<Mat>>,
}

impl RolloutNoise {
    pub fn draw<R: Rng + ?Sized>(n: usize, horizon: usize, p: usize, d: usize, rng: &mut R) -> Self {
        let mut normal = |r: usize, c: usize| Mat::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let theta = (0..d).map(|_| normal(n, p)).collect();
        let mut action = Vec::with_capacity(horizon);
        let mut diffusion = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            action.push(normal(n, d));
            diffusion.push((0..d).map(|_| normal(n, p)).collect());
        }
        Self { theta, action, diffusion }
    }

    /// All-zero draws: the noise-free mean rollout.
    pub fn zeros(n: usize, horizon: usize, p: usize, d: usize) -> Self {
        Self {
            theta: vec![Mat::zeros(n, p); d],
            action: vec![Mat::zeros(n, d); horizon],
            diffusion: vec![vec![Mat::zeros(n, p); d]; horizon],
        }
    }

    pub fn particles(&self) -> usize {
        self.theta.first().map_or(0, Mat::nrows)
    }

    pub fn horizon(&self) -> usize {
        self.action.len()
    }

    /// Replaces the draws of particle `i` with those of `other`'s particle `i`.
    fn replace_particle(&mut self, i: usize, other: &RolloutNoise) {
        for (a, b) in self.theta.iter_mut().zip(&other.theta) {
            a.set_row(i, &b.row(i));
        }
        for (a, b) in self.action.iter_mut().zip(&other.action) {
            a.set_row(i, &b.row(i));
        }
        for (sa, sb) in self.diffusion.iter_mut().zip(&other.diffusion) {
            for (a, b) in sa.iter_mut().zip(sb) {
                a.set_row(i, &b.row(i));
            }
        }
    }
}

/// Rollout switches.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RolloutOptions {
    /// Stop gradients through the last-layer diffusion draws.
    pub detach_diffusion: bool,
}

/// Backend values produced by a rollout; each entry has one row per particle.
pub struct RolloutTrace<V> {
    pub positions: Vec<V>,
    pub variances: Vec<V>,
    pub actions: Vec<V>,
    pub step_noise: Vec<V>,
    /// Per output, the `T + 1` last-layer matrices.
    pub thetas: Vec<Vec<V>>,
}

/// Last-layer belief for one output in backend form: a `1 x p` mean and a
/// `p x p` lower square root of the covariance.
pub struct ThetaSource<V> {
    pub mean: V,
    pub root: V,
}

/// Batched rollout over all particles of `noise`.
///
/// `h` is the `1 x h` decoder state that has already consumed `start`, and
/// `start.velocity` is in model units.
#[allow(clippy::too_many_arguments)]
pub fn rollout_g<B: Backend>(
    b: &mut B,
    p: &Bound<B::V>,
    cfg: &ModelConfig,
    sources: &[ThetaSource<B::V>],
    ctx: &GateContext<B::V>,
    h: &B::V,
    start: &AgentState,
    noise: &RolloutNoise,
    opts: RolloutOptions,
) -> Result<RolloutTrace<B::V>> {
    let n = noise.particles();
    let horizon = noise.horizon();
    let d = cfg.output_dim;
    if n == 0 || horizon == 0 {
        return Err(Error::InvalidInput("rollout needs at least one particle and one step".into()));
    }
    if sources.len() != d || noise.theta.len() != d {
        return Err(Error::dim("rollout outputs", d, sources.len()));
    }
    let dt = cfg.dt;
    let q = b.softplus(p.get("dyn.q_raw"));
    let q_sd = b.sqrt(&q);

    let mut thetas: Vec<Vec<B::V>> = Vec::with_capacity(d);
    for (src, z) in sources.iter().zip(&noise.theta) {
        let zc = b.constant(z.clone());
        let rt = b.transpose(&src.root);
        let spread = b.matmul(&zc, &rt);
        thetas.push(vec![b.add(&spread, &src.mean)]);
    }

    let ones = Mat::from_element(n, 1, 1.0);
    let pos0 = Mat::from_fn(n, 2, |_, j| start.position[j]);
    let mut pos = b.constant(pos0);
    let ones_v = b.constant(ones);
    let mut hh = b.matmul(&ones_v, h);
    let mut var_acc: Option<B::V> = None;

    let mut out = RolloutTrace {
        positions: Vec::with_capacity(horizon),
        variances: Vec::with_capacity(horizon),
        actions: Vec::with_capacity(horizon),
        step_noise: Vec::with_capacity(horizon),
        thetas: Vec::new(),
    };

    for k in 0..horizon {
        let phi = features_g(b, p, &hh);
        let var = noise_var_g(b, p, cfg, &hh);
        let mut cols = Vec::with_capacity(d);
        for th in &thetas {
            let cur = th.last().expect("theta path is non-empty");
            let prod = b.mul(&phi, cur);
            cols.push(b.row_sum(&prod));
        }
        let mean = b.hcat(&cols);
        let sd = b.sqrt(&var);
        let eps = b.constant(noise.action[k].clone());
        let jitter = b.mul(&sd, &eps);
        let a = b.add(&mean, &jitter);
        let step = b.scale(&a, dt);
        pos = b.add(&pos, &step);
        let dv = b.scale(&var, dt * dt);
        let acc = match var_acc.take() {
            None => dv,
            Some(prev) => b.add(&prev, &dv),
        };
        out.positions.push(pos.clone());
        out.variances.push(acc.clone());
        out.actions.push(a.clone());
        out.step_noise.push(var);
        var_acc = Some(acc);

        hh = decoder_step_g(b, p, cfg, ctx, &a, &hh);
        for (j, th) in thetas.iter_mut().enumerate() {
            let zc = b.constant(noise.diffusion[k][j].clone());
            let mut inc = b.mul(&zc, &q_sd);
            if opts.detach_diffusion {
                inc = b.detach(&inc);
            }
            let cur = th.last().expect("theta path is non-empty").clone();
            th.push(b.add(&cur, &inc));
        }
    }
    out.thetas = thetas;
    Ok(out)
}

/// Negative mean log density of `truth` under the per-step Gaussian mixtures
/// with kernel means `positions[τ]` and diagonal covariances `variances[τ]`.
pub fn kde_loss_g<B: Backend>(b: &mut B, positions: &[B::V], variances: &[B::V], truth: &[[f64; 2]]) -> Result<B::V> {
    let horizon = positions.len();
    if horizon == 0 {
        return Err(Error::InvalidInput("empty prediction horizon".into()));
    }
    if truth.len() != horizon || variances.len() != horizon {
        return Err(Error::dim("ground-truth horizon", horizon, truth.len()));
    }
    let n = b.value(&positions[0]).nrows();
    if n == 0 {
        return Err(Error::InvalidInput("kde loss needs at least one particle".into()));
    }
    let ln_n = (n as f64).ln();
    let mut total: Option<B::V> = None;
    for ((pos, var), t) in positions.iter().zip(variances).zip(truth) {
        let tv = b.constant(Mat::from_row_slice(1, 2, t));
        let diff = b.sub(pos, &tv);
        let sq = b.square(&diff);
        let quad = b.div(&sq, var);
        let lv = b.ln(var);
        let s = b.add(&quad, &lv);
        let s = b.offset(&s, LN_2PI);
        let per = b.row_sum(&s);
        let logk = b.scale(&per, -0.5);
        let lse = b.log_sum_exp(&logk);
        total = Some(match total {
            None => lse,
            Some(acc) => b.add(&acc, &lse),
        });
    }
    let total = total.expect("non-empty horizon");
    let mean = b.scale(&total, -1.0 / horizon as f64);
    Ok(b.offset(&mean, ln_n))
}

/// Kernel-density loss of a prediction set against the true future.
pub fn kde_loss(pred: &PredictionSet, truth: &[AgentState]) -> Result<f64> {
    if pred.particles.is_empty() {
        return Err(Error::InvalidInput("kde loss needs at least one particle".into()));
    }
    if truth.len() != pred.horizon {
        return Err(Error::dim("ground-truth horizon", pred.horizon, truth.len()));
    }
    let mut b = Eval;
    let n = pred.particles.len();
    let mut positions = Vec::with_capacity(pred.horizon);
    let mut variances = Vec::with_capacity(pred.horizon);
    for k in 0..pred.horizon {
        positions.push(b.constant(Mat::from_fn(n, 2, |i, j| pred.particles[i].states[k + 1].position[j])));
        variances.push(b.constant(Mat::from_fn(n, 2, |i, j| pred.particles[i].integrated_variance[k][j])));
    }
    let t: Vec<[f64; 2]> = truth.iter().map(|s| s.position).collect();
    let v = kde_loss_g(&mut b, &positions, &variances, &t)?;
    Ok(v[(0, 0)])
}

/// Position covariances `dt² Σ_{k ≤ τ} Σ_k` from per-step diagonal noise.
pub fn integrated_variance(step_noise: &[DVector<f64>], dt: f64) -> Vec<DVector<f64>> {
    let mut out = Vec::with_capacity(step_noise.len());
    let mut acc: Option<DVector<f64>> = None;
    for s in step_noise {
        let next = match acc {
            None => s * (dt * dt),
            Some(ref a) => a + s * (dt * dt),
        };
        out.push(next.clone());
        acc = Some(next);
    }
    out
}

/// Seed offset for the one-time resampling of failed particles.
const RESAMPLE_STREAM: u64 = 0x5e_ed0f_fa11;

/// Samples `n` forecasts of `horizon` steps from the anchor.
#[allow(clippy::too_many_arguments)]
pub fn rollout<R: Rng + ?Sized>(
    params: &ModelParameters,
    belief: &FactoredBelief,
    v: &SceneEncoding,
    h: &DecoderState,
    start: &AgentState,
    n: usize,
    horizon: usize,
    rng: &mut R,
) -> Result<PredictionSet> {
    let cfg = &params.config;
    if n == 0 || horizon == 0 {
        return Err(Error::InvalidInput("rollout needs N >= 1 and T >= 1".into()));
    }
    let noise = RolloutNoise::draw(n, horizon, cfg.feature_dim, cfg.output_dim, rng);
    let seed: u64 = rng.random();
    rollout_with_noise(params, belief, v, h, start, noise, Some(seed))
}

/// Noise-free mean forecast.
pub fn mean_rollout(params: &ModelParameters, belief: &FactoredBelief, v: &SceneEncoding, h: &DecoderState, start: &AgentState, horizon: usize) -> Result<PredictionSet> {
    let cfg = &params.config;
    let noise = RolloutNoise::zeros(1, horizon, cfg.feature_dim, cfg.output_dim);
    rollout_with_noise(params, belief, v, h, start, noise, None)
}

/// Rollout under given draws. Particles that reach a non-finite state are
/// redrawn once from a stream derived from `resample_seed`; a second failure
/// is an error.
pub fn rollout_with_noise(
    params: &ModelParameters,
    belief: &FactoredBelief,
    v: &SceneEncoding,
    h: &DecoderState,
    start: &AgentState,
    mut noise: RolloutNoise,
    resample_seed: Option<u64>,
) -> Result<PredictionSet> {
    let cfg = &params.config;
    if belief.output_dim() != cfg.output_dim || belief.feature_dim() != cfg.feature_dim {
        return Err(Error::dim(
            "rollout belief",
            format!("{}x{}", cfg.output_dim, cfg.feature_dim),
            format!("{}x{}", belief.output_dim(), belief.feature_dim()),
        ));
    }
    if v.vector.len() != cfg.encoding_dim {
        return Err(Error::dim("scene encoding", cfg.encoding_dim, v.vector.len()));
    }
    if h.hidden.len() != cfg.decoder_hidden {
        return Err(Error::dim("decoder state", cfg.decoder_hidden, h.hidden.len()));
    }
    let roots = belief
        .dims
        .iter()
        .map(|bd| covariance_sqrt(&bd.cov))
        .collect::<Result<Vec<_>>>()?;

    let mut resampled = false;
    loop {
        let set = run_eval(params, belief, &roots, v, h, start, &noise)?;
        let bad: Vec<usize> = set
            .particles
            .iter()
            .enumerate()
            .filter(|(_, p)| !particle_finite(p))
            .map(|(i, _)| i)
            .collect();
        if bad.is_empty() {
            return Ok(set);
        }
        match resample_seed {
            Some(seed) if !resampled => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RESAMPLE_STREAM);
                let fresh = RolloutNoise::draw(noise.particles(), noise.horizon(), cfg.feature_dim, cfg.output_dim, &mut rng);
                for &i in &bad {
                    noise.replace_particle(i, &fresh);
                }
                resampled = true;
            }
            _ => {
                return Err(Error::Numerical(format!(
                    "rollout produced non-finite states for particles {bad:?} (start {:?})",
                    start.position
                )))
            }
        }
    }
}

fn particle_finite(p: &TrajectoryParticle) -> bool {
    p.states.iter().all(AgentState::is_finite) && p.integrated_variance.iter().flatten().all(|v| v.is_finite())
}

fn run_eval(
    params: &ModelParameters,
    belief: &FactoredBelief,
    roots: &[Mat],
    v: &SceneEncoding,
    h: &DecoderState,
    start: &AgentState,
    noise: &RolloutNoise,
) -> Result<PredictionSet> {
    let cfg = &params.config;
    let mut b = Eval;
    let p = params.bind(&mut b);
    let sources: Vec<ThetaSource<_>> = belief
        .dims
        .iter()
        .zip(roots)
        .map(|(bd, r)| ThetaSource {
            mean: b.constant(row_mat(&bd.mean)),
            root: b.constant(r.clone()),
        })
        .collect();
    let vv = b.constant(row_mat(&v.vector));
    let ctx = gate_context_g(&mut b, &p, &vv);
    let hh = b.constant(row_mat(&h.hidden));
    let trace = rollout_g(&mut b, &p, cfg, &sources, &ctx, &hh, start, noise, RolloutOptions::default())?;

    let n = noise.particles();
    let horizon = noise.horizon();
    let dt = cfg.dt;
    let particles = (0..n)
        .map(|i| {
            let mut states = Vec::with_capacity(horizon + 1);
            states.push(*start);
            let mut actions = Vec::with_capacity(horizon);
            for k in 0..horizon {
                let a = [trace.actions[k][(i, 0)], trace.actions[k][(i, 1)]];
                let prev: AgentState = states[k];
                let pos = [trace.positions[k][(i, 0)], trace.positions[k][(i, 1)]];
                states.push(AgentState {
                    position: pos,
                    velocity: a,
                    acceleration: [(a[0] - prev.velocity[0]) / dt, (a[1] - prev.velocity[1]) / dt],
                    heading: if a == [0.0, 0.0] || !a.iter().all(|x| x.is_finite()) { prev.heading } else { crate::model::heading_of(a) },
                });
                actions.push(a);
            }
            let pick = |m: &Mat| [m[(i, 0)], m[(i, 1)]];
            TrajectoryParticle {
                states,
                actions,
                step_noise: trace.step_noise.iter().map(|m| pick(m)).collect(),
                integrated_variance: trace.variances.iter().map(|m| pick(m)).collect(),
                last_layer_path: (0..=horizon)
                    .map(|k| trace.thetas.iter().map(|th| th[k].row(i).transpose()).collect())
                    .collect(),
            }
        })
        .collect();
    Ok(PredictionSet {
        particles,
        horizon,
        particle_count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decoder_init, ModelConfig};
    use nalgebra::DMatrix;

    fn setup() -> (ModelParameters, SceneEncoding, DecoderState) {
        let p = ModelParameters::init(&ModelConfig::with_width(8)).unwrap();
        let v = SceneEncoding { vector: DVector::from_fn(8, |i, _| (i as f64).cos() * 0.3) };
        let h = decoder_init(&v, &p).unwrap();
        (p, v, h)
    }

    #[test]
    fn prefix_sum_of_constant_noise() {
        let s = vec![DVector::from_vec(vec![0.2, 0.5]); 7];
        let v = integrated_variance(&s, 1.0);
        for (k, vk) in v.iter().enumerate() {
            assert!((vk[0] - 0.2 * (k + 1) as f64).abs() < 1e-14);
            assert!((vk[1] - 0.5 * (k + 1) as f64).abs() < 1e-14);
        }
        let single = integrated_variance(&s[..1], 0.4);
        assert!((single[0][0] - 0.16 * 0.2).abs() < 1e-16);
    }

    #[test]
    fn noise_free_collapse() {
        let (mut p, v, h) = setup();
        *p.get_mut("dyn.q_raw").unwrap() = Mat::from_element(1, 8, -800.0);
        let mut belief = p.prior_belief();
        for bd in &mut belief.dims {
            bd.cov = DMatrix::zeros(8, 8);
            bd.mean = DVector::from_fn(8, |i, _| 0.1 * i as f64);
        }
        let mut noise = RolloutNoise::draw(5, 4, 8, 2, &mut ChaCha8Rng::seed_from_u64(1));
        for a in &mut noise.action {
            a.fill(0.0);
        }
        let start = AgentState::new([1.0, 2.0], [0.5, 0.0]);
        let set = rollout_with_noise(&p, &belief, &v, &h, &start, noise, None).unwrap();
        let mean = mean_rollout(&p, &belief, &v, &h, &start, 4).unwrap();
        for particle in &set.particles {
            assert_eq!(particle.states, mean.particles[0].states);
        }
    }

    #[test]
    fn seeded_rollouts_repeat() {
        let (p, v, h) = setup();
        let belief = p.prior_belief();
        let start = AgentState::new([0.0, 0.0], [1.0, 0.0]);
        let a = rollout(&p, &belief, &v, &h, &start, 6, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = rollout(&p, &belief, &v, &h, &start, 6, 5, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.particle_count, 6);
        assert_eq!(a.particles[0].states.len(), 6);
        assert_eq!(a.particles[0].last_layer_path.len(), 6);
    }

    #[test]
    fn rollout_variance_is_prefix_sum() {
        let (p, v, h) = setup();
        let set = rollout(&p, &p.prior_belief(), &v, &h, &AgentState::default(), 3, 6, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let dt = p.config.dt;
        for particle in &set.particles {
            let steps: Vec<DVector<f64>> = particle.step_noise.iter().map(|s| DVector::from_row_slice(s)).collect();
            let v = integrated_variance(&steps, dt);
            for (a, b) in v.iter().zip(&particle.integrated_variance) {
                assert!((a[0] - b[0]).abs() < 1e-15 && (a[1] - b[1]).abs() < 1e-15);
            }
        }
    }

    fn particle(states: Vec<[f64; 2]>, vars: Vec<[f64; 2]>) -> TrajectoryParticle {
        let mut s = vec![AgentState::default()];
        s.extend(states.iter().map(|&p| AgentState::new(p, [0.0, 0.0])));
        TrajectoryParticle {
            actions: vec![[0.0; 2]; vars.len()],
            step_noise: vars.clone(),
            integrated_variance: vars,
            last_layer_path: vec![],
            states: s,
        }
    }

    #[test]
    fn single_kernel_is_gaussian_nll() {
        let p = particle(vec![[1.0, 0.0], [2.0, 1.0]], vec![[0.5, 0.25], [1.0, 2.0]]);
        let set = PredictionSet { particles: vec![p], horizon: 2, particle_count: 1 };
        let truth = vec![AgentState::new([1.5, -0.5], [0.0; 2]), AgentState::new([2.0, 0.0], [0.0; 2])];
        let nll = |x: f64, m: f64, v: f64| 0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v);
        let expected = 0.5 * (nll(1.5, 1.0, 0.5) + nll(-0.5, 0.0, 0.25) + nll(2.0, 2.0, 1.0) + nll(0.0, 1.0, 2.0));
        assert!((kde_loss(&set, &truth).unwrap() - expected).abs() < 1e-13);
    }

    #[test]
    fn identical_particles_match_single() {
        let p = particle(vec![[1.0, 0.0]], vec![[0.5, 0.25]]);
        let one = PredictionSet { particles: vec![p.clone()], horizon: 1, particle_count: 1 };
        let many = PredictionSet { particles: vec![p; 4], horizon: 1, particle_count: 4 };
        let truth = vec![AgentState::new([0.3, 0.3], [0.0; 2])];
        let a = kde_loss(&one, &truth).unwrap();
        let b = kde_loss(&many, &truth).unwrap();
        assert!((a - b).abs() < 1e-14);
    }

    #[test]
    fn kde_rejects_horizon_mismatch() {
        let p = particle(vec![[1.0, 0.0]], vec![[0.5, 0.25]]);
        let set = PredictionSet { particles: vec![p], horizon: 1, particle_count: 1 };
        assert!(kde_loss(&set, &[]).is_err());
        let empty = PredictionSet { particles: vec![], horizon: 1, particle_count: 0 };
        assert!(kde_loss(&empty, &[AgentState::default()]).is_err());
    }
}
