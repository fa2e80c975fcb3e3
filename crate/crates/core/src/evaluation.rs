//! Online and offline evaluation protocols.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptation::{adapt_hybrid, episode_order, finetune, observe_online, offline_checkpoints, offline_transitions, AdaptationConfig, AdaptationMode, AgentAdapterState, TraceRecord};
use crate::bayes::FactoredBelief;
use crate::error::{Error, Result};
use crate::metrics::{self, ade, bootstrap_ci, fde, median, traj_nll, MetricOptions, MetricsReport};
use crate::model::{AgentState, ModelParameters, SceneWindow};
use crate::predictor::PredictionSet;
use crate::training::{derive_seed, Episode, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OnlineOptions {
    /// Observed adaptation steps after the initial forecast.
    pub steps: usize,
    pub horizon: usize,
    pub particles: usize,
    pub mode: AdaptationMode,
    pub seed: u64,
}

impl Default for OnlineOptions {
    fn default() -> Self {
        Self {
            steps: 8,
            horizon: 12,
            particles: 50,
            mode: AdaptationMode::Online,
            seed: 0,
        }
    }
}

/// Forecast quality of one agent after each number of observed steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineAgentResult {
    pub scene_id: u64,
    pub agent_id: u64,
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub nll: Vec<f64>,
    pub trace: Vec<TraceRecord>,
}

/// Streams each window's future into a per-agent adapter. The forecast at
/// step `k` is made before the `k`-th future state is observed, so no
/// information from the scored horizon reaches the adapter.
pub fn online_protocol(params: &ModelParameters, prior: &FactoredBelief, windows: &[SceneWindow], opts: &OnlineOptions) -> Result<Vec<OnlineAgentResult>> {
    if opts.horizon == 0 || opts.particles == 0 {
        return Err(Error::Config("online protocol needs a positive horizon and particle count".into()));
    }
    let need = opts.steps + opts.horizon;
    if let Some(w) = windows.iter().find(|w| w.future.len() < need) {
        return Err(Error::InvalidInput(format!(
            "window of agent {} has {} future frames, need {need}",
            w.agent_id,
            w.future.len()
        )));
    }
    windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let mut adapter = AgentAdapterState::start(w, params, prior, opts.mode.uses_filter())?;
            let mut res = OnlineAgentResult {
                scene_id: w.scene_id,
                agent_id: w.agent_id,
                ade: Vec::new(),
                fde: Vec::new(),
                nll: Vec::new(),
                trace: Vec::new(),
            };
            for k in 0..=opts.steps {
                let truth: Vec<[f64; 2]> = w.future[k..k + opts.horizon].iter().map(|s| s.position).collect();
                let mean: Vec<[f64; 2]> = adapter.mean_forecast(params, opts.horizon)?.positions().remove(0);
                res.ade.push(ade(&mean, &truth)?);
                res.fde.push(fde(&mean, &truth)?);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64, k as u64));
                let set = adapter.forecast(params, opts.particles, opts.horizon, &mut rng)?;
                res.nll.push(traj_nll(&set, &truth)?);
                if k < opts.steps {
                    let (next, record) = observe_online(&adapter, Some(&w.future[k]), params)?;
                    res.trace.extend(record);
                    adapter = next;
                }
            }
            Ok(res)
        })
        .collect()
}

/// Median ADE across agents at one step, with a bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepSummary {
    pub step: usize,
    pub median_ade: f64,
    pub lo: f64,
    pub hi: f64,
    pub mean_ade: f64,
    pub mean_fde: f64,
    pub median_fde: f64,
    pub mean_nll: f64,
}

pub fn summarize_online(results: &[OnlineAgentResult], bootstrap: usize, seed: u64) -> Result<Vec<StepSummary>> {
    let Some(first) = results.first() else {
        return Err(Error::InvalidInput("no online results to summarize".into()));
    };
    (0..first.ade.len())
        .map(|k| {
            let a: Vec<f64> = results.iter().map(|r| r.ade[k]).collect();
            let f: Vec<f64> = results.iter().map(|r| r.fde[k]).collect();
            let n: Vec<f64> = results.iter().map(|r| r.nll[k]).collect();
            let (lo, hi) = bootstrap_ci(&a, median, bootstrap, 0.95, derive_seed(seed, k as u64, 7))?;
            Ok(StepSummary {
                step: k,
                median_ade: median(&a),
                lo,
                hi,
                mean_ade: metrics::mean(&a),
                mean_fde: metrics::mean(&f),
                median_fde: median(&f),
                mean_nll: metrics::mean(&n),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OfflineOptions {
    /// Update counts at which the shared belief is evaluated.
    pub counts: Vec<usize>,
    /// Trailing history frames of each evaluation window filtered per agent
    /// before forecasting.
    pub observed: usize,
    pub horizon: usize,
    pub particles: usize,
    pub metrics: MetricOptions,
    pub seed: u64,
}

impl Default for OfflineOptions {
    fn default() -> Self {
        Self {
            counts: (0..=10).map(|k| k * 100).collect(),
            observed: 8,
            horizon: 12,
            particles: 50,
            metrics: MetricOptions::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineCheckpoint {
    pub updates: usize,
    pub report: MetricsReport,
}

/// Splits the last `observed` history frames off a window. Neighbors absent
/// at the new current frame are dropped.
pub fn split_window(window: &SceneWindow, observed: usize) -> Result<(SceneWindow, Vec<AgentState>)> {
    let n = window.ego_history.len();
    if n < observed + 2 {
        return Err(Error::InvalidInput(format!(
            "window of agent {} has {n} history frames, need {} to observe {observed}",
            window.agent_id,
            observed + 2
        )));
    }
    let keep = n - observed;
    let prefix = SceneWindow {
        ego_history: window.ego_history[..keep].to_vec(),
        neighbor_histories: window
            .neighbor_histories
            .iter()
            .filter(|h| h.len() > observed)
            .map(|h| h[..h.len() - observed].to_vec())
            .collect(),
        frame: window.frame - observed as i64,
        short_history: false,
        ..window.clone()
    };
    Ok((prefix, window.ego_history[keep..].to_vec()))
}

/// Sampled sets, mean paths and ground truths, one entry per window.
pub type Forecasts = (Vec<PredictionSet>, Vec<Vec<[f64; 2]>>, Vec<Vec<[f64; 2]>>);

/// Forecasts for held-out windows from a deployment prior. The last
/// `observed` history frames are filtered per agent first when `adapt` is set,
/// and only drive the decoder otherwise.
#[allow(clippy::too_many_arguments)]
pub fn forecast_windows(
    params: &ModelParameters,
    belief: &FactoredBelief,
    windows: &[SceneWindow],
    observed: usize,
    adapt: bool,
    horizon: usize,
    particles: usize,
    seed: u64,
) -> Result<Forecasts> {
    if let Some(w) = windows.iter().find(|w| w.future.len() < horizon) {
        return Err(Error::InvalidInput(format!("window of agent {} is shorter than the horizon", w.agent_id)));
    }
    let out = windows
        .par_iter()
        .enumerate()
        .map(|(i, w)| {
            let (prefix, seen) = split_window(w, observed)?;
            let mut adapter = AgentAdapterState::start(&prefix, params, belief, adapt)?;
            for s in &seen {
                adapter = observe_online(&adapter, Some(s), params)?.0;
            }
            let mean = adapter.mean_forecast(params, horizon)?.positions().remove(0);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
            let set = adapter.forecast(params, particles, horizon, &mut rng)?;
            let truth: Vec<[f64; 2]> = w.future[..horizon].iter().map(|s| s.position).collect();
            Ok((set, mean, truth))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::with_capacity(out.len());
    let mut means = Vec::with_capacity(out.len());
    let mut truths = Vec::with_capacity(out.len());
    for (s, m, t) in out {
        sets.push(s);
        means.push(m);
        truths.push(t);
    }
    Ok((sets, means, truths))
}

/// Adapts a shared belief on `adapt` and evaluates `eval` after each count
/// of updates, each agent starting from the shared belief. `mode` K0
/// evaluates the prior at every count without per-agent updates.
pub fn offline_protocol(params: &ModelParameters, adapt: &[Episode], eval: &[SceneWindow], mode: AdaptationMode, opts: &OfflineOptions) -> Result<Vec<OfflineCheckpoint>> {
    if eval.is_empty() {
        return Err(Error::InvalidInput("offline protocol needs evaluation windows".into()));
    }
    let beliefs = if mode.uses_filter() {
        let tr = offline_transitions(params, adapt)?;
        offline_checkpoints(params, &tr, &opts.counts)?
    } else {
        vec![params.prior_belief(); opts.counts.len()]
    };
    opts.counts
        .iter()
        .zip(beliefs)
        .map(|(&updates, belief)| {
            let (sets, means, truths) = forecast_windows(params, &belief, eval, opts.observed, mode.uses_filter(), opts.horizon, opts.particles, opts.seed)?;
            Ok(OfflineCheckpoint { updates, report: metrics::report(&sets, &means, &truths, &opts.metrics)? })
        })
        .collect()
}

/// Leading episodes in canonical order holding at least `budget` transitions.
pub fn episodes_for_budget(episodes: &[Episode], budget: usize) -> Vec<Episode> {
    let mut out = Vec::new();
    let mut total = 0usize;
    for i in episode_order(episodes) {
        if total >= budget {
            break;
        }
        total += episodes[i].stream.len();
        out.push(episodes[i].clone());
    }
    out
}

/// Offline curve for any mode. Each count is a data budget in transitions:
/// filter modes use that many exact updates, finetuning modes adapt on the
/// episodes covering the budget.
pub fn offline_curve(
    params: &ModelParameters,
    adapt: &[Episode],
    eval: &[SceneWindow],
    config: &AdaptationConfig,
    train: &TrainConfig,
    opts: &OfflineOptions,
) -> Result<Vec<OfflineCheckpoint>> {
    match config.mode {
        AdaptationMode::Online | AdaptationMode::Offline | AdaptationMode::K0 => offline_protocol(params, adapt, eval, config.mode, opts),
        AdaptationMode::Finetune | AdaptationMode::K0Finetune | AdaptationMode::Hybrid => opts
            .counts
            .iter()
            .map(|&updates| {
                let data = episodes_for_budget(adapt, updates);
                let (p, belief) = if data.is_empty() {
                    (params.clone(), params.prior_belief())
                } else if config.mode == AdaptationMode::Hybrid {
                    let cfg = AdaptationConfig { switch_count: config.switch_count.min(updates), ..config.clone() };
                    let out = adapt_hybrid(params, &data, &cfg, train)?;
                    (out.params, out.belief)
                } else {
                    let out = finetune(params, &data, config, train)?;
                    let b = out.params.prior_belief();
                    (out.params, b)
                };
                let (sets, means, truths) = forecast_windows(&p, &belief, eval, opts.observed, config.mode.uses_filter(), opts.horizon, opts.particles, opts.seed)?;
                Ok(OfflineCheckpoint { updates, report: metrics::report(&sets, &means, &truths, &opts.metrics)? })
            })
            .collect(),
    }
}

/// First full-history window of every agent, keeping only those with at
/// least `future` frames ahead.
pub fn first_window_per_agent(windows: &[SceneWindow], future: usize) -> Vec<SceneWindow> {
    let mut seen = std::collections::BTreeSet::new();
    windows
        .iter()
        .filter(|w| !w.short_history && w.future.len() >= future)
        .filter(|w| seen.insert((w.scene_id, w.agent_id)))
        .cloned()
        .collect()
}
