//! Deployment-time adaptation: per-agent online filtering, offline shared
//! adaptation, gradient finetuning and the sequential hybrid.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bayes::{FactoredBelief, FactoredObservation, ParamDynamics};
use crate::error::{Error, Result};
use crate::model::{decoder_init, decoder_step, encode, is_last_layer_param, observation, AgentState, DecoderState, ModelParameters, SceneEncoding, SceneWindow};
use crate::predictor::{mean_rollout, rollout, PredictionSet};
use crate::training::{batch_gradient, clip_global_norm, derive_seed, draw_noise, Adam, Episode, LossOptions, TrainConfig, TrainStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AdaptationMode {
    #[default]
    Online,
    Offline,
    /// No adaptation: the belief stays at the learned prior.
    K0,
    Finetune,
    /// Finetuning of the prior parameters with the filter disabled.
    K0Finetune,
    Hybrid,
}

impl AdaptationMode {
    /// Whether exact belief updates are applied.
    pub fn uses_filter(self) -> bool {
        !matches!(self, Self::K0 | Self::K0Finetune)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneScope {
    /// Only the `prior.*` tensors.
    LastLayer,
    #[default]
    WholeModel,
}

impl FinetuneScope {
    pub fn contains(self, name: &str) -> bool {
        match self {
            Self::LastLayer => is_last_layer_param(name),
            Self::WholeModel => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptationConfig {
    pub mode: AdaptationMode,
    /// Exact updates before the hybrid switches to finetuning.
    pub switch_count: usize,
    /// Defaults to a tenth of the training rate.
    pub finetune_lr: Option<f64>,
    pub finetune_steps: usize,
    pub scope: FinetuneScope,
    /// Cap on offline exact updates; `None` uses every transition.
    pub offline_updates: Option<usize>,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            mode: AdaptationMode::Online,
            switch_count: 100,
            finetune_lr: None,
            finetune_steps: 50,
            scope: FinetuneScope::WholeModel,
            offline_updates: None,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(lr) = self.finetune_lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("finetune learning rate must be positive, got {lr}")));
            }
        }
        Ok(())
    }

    pub fn learning_rate(&self, train: &TrainConfig) -> f64 {
        self.finetune_lr.unwrap_or(train.learning_rate * 0.1)
    }
}

/// One entry of the adaptation trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TraceRecord {
    Exact {
        index: usize,
        scene_id: u64,
        agent_id: u64,
        step: u64,
        innovation_norm: f64,
        nll_before: f64,
        nll_after: f64,
    },
    Gradient {
        index: usize,
        step: usize,
        loss: f64,
        learning_rate: f64,
    },
}

impl TraceRecord {
    pub fn is_exact(&self) -> bool {
        matches!(self, Self::Exact { .. })
    }
}

/// Online state of one deployed agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentAdapterState {
    pub scene_id: u64,
    pub agent_id: u64,
    /// Posterior after the observed steps.
    pub belief: FactoredBelief,
    pub encoding: SceneEncoding,
    /// Decoder state whose features predict the next action.
    pub hidden: DecoderState,
    /// Last observed state in data units.
    pub last: AgentState,
    /// Velocity of the last transition in model units.
    pub last_action: [f64; 2],
    /// Frames skipped since the last observation.
    pub missed: usize,
    pub steps: u64,
    pub data_dt: f64,
    pub adapt: bool,
}

impl AgentAdapterState {
    /// Encodes the window's history and starts from `prior`.
    pub fn start(window: &SceneWindow, params: &ModelParameters, prior: &FactoredBelief, adapt: bool) -> Result<Self> {
        window.validate()?;
        let cfg = &params.config;
        let v = encode(window, params)?;
        let h0 = decoder_init(&v, params)?;
        let cur = *window.current()?;
        let ratio = window.dt / cfg.dt;
        let vel = [cur.velocity[0] * ratio, cur.velocity[1] * ratio];
        let hidden = decoder_step(&AgentState::new(cur.position, vel), &h0, &v, params)?;
        Ok(Self {
            scene_id: window.scene_id,
            agent_id: window.agent_id,
            belief: prior.clone(),
            encoding: v,
            hidden,
            last: cur,
            last_action: vel,
            missed: 0,
            steps: 0,
            data_dt: window.dt,
            adapt,
        })
    }

    /// Belief used for forecasting: the posterior propagated one step.
    pub fn forecast_belief(&self, params: &ModelParameters) -> Result<FactoredBelief> {
        self.belief.predict(&params.dynamics())
    }

    fn anchor(&self) -> AgentState {
        AgentState::new(self.last.position, self.last_action)
    }

    pub fn forecast<R: Rng + ?Sized>(&self, params: &ModelParameters, particles: usize, horizon: usize, rng: &mut R) -> Result<PredictionSet> {
        let belief = self.forecast_belief(params)?;
        rollout(params, &belief, &self.encoding, &self.hidden, &self.anchor(), particles, horizon, rng)
    }

    pub fn mean_forecast(&self, params: &ModelParameters, horizon: usize) -> Result<PredictionSet> {
        let belief = self.forecast_belief(params)?;
        mean_rollout(params, &belief, &self.encoding, &self.hidden, &self.anchor(), horizon)
    }
}

fn nll(belief: &FactoredBelief, obs: &FactoredObservation, y: &DVector<f64>) -> Result<f64> {
    Ok(-belief.predictive(obs)?.log_density(y)?)
}

/// Processes the next frame of an online stream. `None` marks a missing
/// frame: the belief is propagated without a correction and the next label
/// spans the gap.
pub fn observe_online(adapter: &AgentAdapterState, next: Option<&AgentState>, params: &ModelParameters) -> Result<(AgentAdapterState, Option<TraceRecord>)> {
    let cfg = &params.config;
    let dynamics = params.dynamics();
    let mut out = adapter.clone();
    let Some(next) = next else {
        if out.adapt {
            out.belief = out.belief.predict(&dynamics)?;
        }
        out.missed += 1;
        return Ok((out, None));
    };
    if !next.is_finite() {
        return Err(Error::InvalidInput(format!("agent {}: non-finite observation", adapter.agent_id)));
    }
    let span = cfg.dt * (adapter.missed + 1) as f64;
    let a = [(next.position[0] - adapter.last.position[0]) / span, (next.position[1] - adapter.last.position[1]) / span];
    let y = DVector::from_column_slice(&a);
    let obs = observation(&adapter.hidden, params)?;
    let mut record = None;
    if adapter.adapt {
        let pred = adapter.belief.predict(&dynamics)?;
        let before = nll(&pred, &obs, &y)?;
        let (post, traces) = pred
            .correct(&obs, &y)
            .map_err(|e| Error::Numerical(format!("agent {} step {}: {e}", adapter.agent_id, adapter.steps)))?;
        let innovation = traces.iter().map(|t| t.innovation.norm_squared()).sum::<f64>().sqrt();
        let after = nll(&post, &obs, &y)?;
        record = Some(TraceRecord::Exact {
            index: adapter.steps as usize,
            scene_id: adapter.scene_id,
            agent_id: adapter.agent_id,
            step: adapter.steps + 1,
            innovation_norm: innovation,
            nll_before: before,
            nll_after: after,
        });
        out.belief = post;
    }
    out.hidden = decoder_step(&AgentState::new(next.position, a), &adapter.hidden, &adapter.encoding, params)?;
    out.last = *next;
    out.last_action = a;
    out.missed = 0;
    out.steps += 1;
    Ok((out, record))
}

/// Features, noise and label of one observed transition.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub episode: usize,
    pub scene_id: u64,
    pub agent_id: u64,
    pub step: u64,
    pub observation: FactoredObservation,
    pub label: DVector<f64>,
}

/// Canonical processing order: episodes sorted by scene, start frame and
/// agent, each episode's transitions consecutively.
pub fn episode_order(episodes: &[Episode]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..episodes.len()).collect();
    order.sort_by_key(|&i| {
        let w = &episodes[i].window;
        (w.scene_id, w.frame, w.agent_id)
    });
    order
}

/// Transitions of `episodes` in the order given by `order`. The decoder is
/// driven by observed states, so features do not depend on the belief.
pub fn transitions_in_order(params: &ModelParameters, episodes: &[Episode], order: &[usize]) -> Result<Vec<Transition>> {
    let chains = order
        .par_iter()
        .map(|&i| {
            let ep = &episodes[i];
            let prior = params.prior_belief();
            let mut adapter = AgentAdapterState::start(&ep.window, params, &prior, false)?;
            let mut out = Vec::with_capacity(ep.stream.len());
            for (k, s) in ep.stream.iter().enumerate() {
                let span = params.config.dt;
                let a = [(s.position[0] - adapter.last.position[0]) / span, (s.position[1] - adapter.last.position[1]) / span];
                out.push(Transition {
                    episode: i,
                    scene_id: ep.window.scene_id,
                    agent_id: ep.window.agent_id,
                    step: k as u64,
                    observation: observation(&adapter.hidden, params)?,
                    label: DVector::from_column_slice(&a),
                });
                adapter = observe_online(&adapter, Some(s), params)?.0;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(chains.into_iter().flatten().collect())
}

pub fn offline_transitions(params: &ModelParameters, episodes: &[Episode]) -> Result<Vec<Transition>> {
    transitions_in_order(params, episodes, &episode_order(episodes))
}

/// Sequential predict/correct over `transitions` into one belief.
pub fn run_filter(prior: &FactoredBelief, dynamics: &ParamDynamics, transitions: &[Transition]) -> Result<(FactoredBelief, Vec<TraceRecord>)> {
    let mut belief = prior.clone();
    let mut trace = Vec::with_capacity(transitions.len());
    for (i, t) in transitions.iter().enumerate() {
        let pred = belief.predict(dynamics)?;
        let before = nll(&pred, &t.observation, &t.label)?;
        let (post, traces) = pred
            .correct(&t.observation, &t.label)
            .map_err(|e| Error::Numerical(format!("offline sample {i}: {e}")))?;
        let after = nll(&post, &t.observation, &t.label)?;
        trace.push(TraceRecord::Exact {
            index: i,
            scene_id: t.scene_id,
            agent_id: t.agent_id,
            step: t.step,
            innovation_norm: traces.iter().map(|x| x.innovation.norm_squared()).sum::<f64>().sqrt(),
            nll_before: before,
            nll_after: after,
        });
        belief = post;
    }
    Ok((belief, trace))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineOutcome {
    /// Shared belief for use as the deployment prior.
    pub belief: FactoredBelief,
    pub trace: Vec<TraceRecord>,
}

/// Adapts one shared belief on a small target dataset.
pub fn adapt_offline(params: &ModelParameters, episodes: &[Episode], config: &AdaptationConfig) -> Result<OfflineOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("offline adaptation needs a non-empty dataset".into()));
    }
    let prior = params.prior_belief();
    if !config.mode.uses_filter() {
        return Ok(OfflineOutcome { belief: prior, trace: Vec::new() });
    }
    let tr = offline_transitions(params, episodes)?;
    let n = config.offline_updates.map_or(tr.len(), |k| k.min(tr.len()));
    let (belief, trace) = run_filter(&prior, &params.dynamics(), &tr[..n])?;
    Ok(OfflineOutcome { belief, trace })
}

/// Shared beliefs after each of `counts` updates, from one filter pass.
pub fn offline_checkpoints(params: &ModelParameters, transitions: &[Transition], counts: &[usize]) -> Result<Vec<FactoredBelief>> {
    let dynamics = params.dynamics();
    let mut sorted: Vec<usize> = counts.to_vec();
    sorted.sort_unstable();
    let mut belief = params.prior_belief();
    let mut done = 0usize;
    let mut at = std::collections::BTreeMap::new();
    for &c in &sorted {
        let c = c.min(transitions.len());
        if c > done {
            belief = run_filter(&belief, &dynamics, &transitions[done..c])?.0;
            done = c;
        }
        at.insert(c, belief.clone());
    }
    Ok(counts.iter().map(|c| at[&(*c).min(transitions.len())].clone()).collect())
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub params: ModelParameters,
    pub trace: Vec<TraceRecord>,
    pub status: TrainStatus,
}

/// Seed offset for finetuning noise.
const FINETUNE_STREAM: u64 = 0xf1_7e;

/// Gradient steps on the combined loss over `episodes`, restricted to the
/// configured scope. Rollout noise is fixed per episode. A diverging step
/// reverts to the last finite parameters.
pub fn finetune(params: &ModelParameters, episodes: &[Episode], config: &AdaptationConfig, train: &TrainConfig) -> Result<FinetuneOutcome> {
    config.validate()?;
    train.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("finetuning needs a non-empty dataset".into()));
    }
    let lr = config.learning_rate(train);
    let scope = if config.mode == AdaptationMode::K0Finetune { FinetuneScope::LastLayer } else { config.scope };
    let opts = LossOptions {
        corrections: config.mode.uses_filter(),
        ..LossOptions::from(train)
    };
    let order = episode_order(episodes);
    let chunks: Vec<&[usize]> = order.chunks(train.batch_size).collect();
    let noises: Vec<_> = episodes
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, FINETUNE_STREAM, i as u64));
            draw_noise(&params.config, ep, train.horizon, train.particles, &mut rng)
        })
        .collect();
    let mut current = params.clone();
    let mut adam = Adam::default();
    let mut trace = Vec::with_capacity(config.finetune_steps);
    let mut status = TrainStatus::Completed;
    for step in 0..config.finetune_steps {
        let idx = chunks[step % chunks.len()];
        let batch: Vec<&Episode> = idx.iter().map(|&i| &episodes[i]).collect();
        let res = batch_gradient(&current, &batch, &opts, |k, _| noises[idx[k]].clone());
        let (parts, mut grads) = match res {
            Ok(r) if r.0.total.is_finite() && r.1.values().all(|m| m.iter().all(|v| v.is_finite())) => r,
            Ok(r) => {
                status = TrainStatus::Diverged { epoch: step, message: format!("non-finite loss {}", r.0.total) };
                break;
            }
            Err(e) => {
                status = TrainStatus::Diverged { epoch: step, message: e.to_string() };
                break;
            }
        };
        clip_global_norm(&mut grads, train.clip_norm);
        let mut next = current.clone();
        adam.step(&mut next, &grads, lr, |name| scope.contains(name) && !(train.freeze_process_noise && name == "dyn.q_raw"));
        trace.push(TraceRecord::Gradient { index: step, step: step + 1, loss: parts.total, learning_rate: lr });
        if !next.is_finite() {
            status = TrainStatus::Diverged { epoch: step, message: "non-finite parameters after update".into() };
            break;
        }
        current = next;
    }
    Ok(FinetuneOutcome { params: current, trace, status })
}

#[derive(Debug, Clone)]
pub struct HybridOutcome {
    pub params: ModelParameters,
    pub belief: FactoredBelief,
    /// Exact updates followed by gradient steps.
    pub trace: Vec<TraceRecord>,
    pub status: TrainStatus,
}

/// Exact updates on the first `switch_count` transitions, written into the
/// prior, followed by finetuning on the episodes not yet touched.
pub fn adapt_hybrid(params: &ModelParameters, episodes: &[Episode], config: &AdaptationConfig, train: &TrainConfig) -> Result<HybridOutcome> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(Error::InvalidInput("hybrid adaptation needs a non-empty dataset".into()));
    }
    let order = episode_order(episodes);
    let tr = transitions_in_order(params, episodes, &order)?;
    let m = config.switch_count.min(tr.len());
    let mut current = params.clone();
    let mut trace = Vec::new();
    if m > 0 {
        let (belief, t) = run_filter(&params.prior_belief(), &params.dynamics(), &tr[..m])?;
        current.set_prior(&belief)?;
        trace = t;
    }
    let touched: std::collections::BTreeSet<usize> = tr[..m].iter().map(|t| t.episode).collect();
    let rest: Vec<Episode> = order.iter().filter(|i| !touched.contains(i)).map(|&i| episodes[i].clone()).collect();
    let mut status = TrainStatus::Completed;
    if !rest.is_empty() && config.finetune_steps > 0 {
        let ft_config = AdaptationConfig { mode: AdaptationMode::Finetune, ..config.clone() };
        let ft = finetune(&current, &rest, &ft_config, train)?;
        let offset = trace.len();
        trace.extend(ft.trace.into_iter().map(|r| match r {
            TraceRecord::Gradient { index, step, loss, learning_rate } => TraceRecord::Gradient { index: index + offset, step, loss, learning_rate },
            other => other,
        }));
        current = ft.params;
        status = ft.status;
    }
    Ok(HybridOutcome { belief: current.prior_belief(), params: current, trace, status })
}
