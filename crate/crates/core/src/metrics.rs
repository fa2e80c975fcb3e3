//! Displacement errors, trajectory NLL, HPD calibration and bootstrap
//! intervals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AgentState;
use crate::predictor::{kde_loss, PredictionSet};
use crate::training::derive_seed;

/// Variance assigned to degenerate mixture components.
pub const VARIANCE_FLOOR: f64 = 1e-6;

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn check_horizon(pred: usize, truth: usize) -> Result<()> {
    if pred != truth || pred == 0 {
        return Err(Error::dim("trajectory horizon", truth, pred));
    }
    Ok(())
}

/// Mean Euclidean distance over the horizon.
pub fn ade(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_horizon(pred.len(), truth.len())?;
    Ok(pred.iter().zip(truth).map(|(a, b)| dist(*a, *b)).sum::<f64>() / pred.len() as f64)
}

/// Distance at the final step.
pub fn fde(pred: &[[f64; 2]], truth: &[[f64; 2]]) -> Result<f64> {
    check_horizon(pred.len(), truth.len())?;
    Ok(dist(pred[pred.len() - 1], truth[truth.len() - 1]))
}

/// Smallest ADE over the first `k` particles.
pub fn min_ade_k(pred: &PredictionSet, truth: &[[f64; 2]], k: usize) -> Result<f64> {
    if k == 0 || pred.particles.len() < k {
        return Err(Error::InvalidInput(format!("minADE_{k} needs at least {k} particles, have {}", pred.particles.len())));
    }
    let mut best = f64::INFINITY;
    for p in &pred.particles[..k] {
        let pos: Vec<[f64; 2]> = p.states[1..].iter().map(|s| s.position).collect();
        best = best.min(ade(&pos, truth)?);
    }
    Ok(best)
}

/// Trajectory NLL under the particle mixture.
pub fn traj_nll(pred: &PredictionSet, truth: &[[f64; 2]]) -> Result<f64> {
    let states: Vec<AgentState> = truth.iter().map(|p| AgentState::new(*p, [0.0, 0.0])).collect();
    kde_loss(pred, &states)
}

/// Equal-weight mixture of axis-aligned 2-D Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture2 {
    pub means: Vec<[f64; 2]>,
    pub variances: Vec<[f64; 2]>,
}

impl Mixture2 {
    pub fn new(means: Vec<[f64; 2]>, variances: Vec<[f64; 2]>) -> Result<Self> {
        if means.is_empty() || means.len() != variances.len() {
            return Err(Error::dim("mixture components", means.len(), variances.len()));
        }
        let variances = variances.into_iter().map(|v| [v[0].max(VARIANCE_FLOOR), v[1].max(VARIANCE_FLOOR)]).collect();
        Ok(Self { means, variances })
    }

    /// Mixture at step `tau` of a prediction set.
    pub fn at_step(pred: &PredictionSet, tau: usize) -> Result<Self> {
        if tau >= pred.horizon {
            return Err(Error::InvalidInput(format!("step {tau} beyond horizon {}", pred.horizon)));
        }
        Self::new(
            pred.particles.iter().map(|p| p.states[tau + 1].position).collect(),
            pred.particles.iter().map(|p| p.integrated_variance[tau]).collect(),
        )
    }

    pub fn log_density(&self, x: [f64; 2]) -> f64 {
        let terms: Vec<f64> = self
            .means
            .iter()
            .zip(&self.variances)
            .map(|(m, v)| {
                let q = (x[0] - m[0]).powi(2) / v[0] + (x[1] - m[1]).powi(2) / v[1];
                -0.5 * q - 0.5 * (v[0] * v[1]).ln() - std::f64::consts::LN_2 - std::f64::consts::PI.ln()
            })
            .collect();
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln() - (self.means.len() as f64).ln()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        let i = rng.random_range(0..self.means.len());
        let (m, v) = (self.means[i], self.variances[i]);
        let z0: f64 = rng.sample(StandardNormal);
        let z1: f64 = rng.sample(StandardNormal);
        [m[0] + v[0].sqrt() * z0, m[1] + v[1].sqrt() * z1]
    }
}

/// Mass of the smallest highest-density region containing `x`, estimated as
/// the fraction of `samples` fresh draws with a higher density than `x`.
pub fn hpd_level<R: Rng + ?Sized>(mix: &Mixture2, x: [f64; 2], samples: usize, rng: &mut R) -> f64 {
    let fx = mix.log_density(x);
    let above = (0..samples).filter(|_| mix.log_density(mix.sample(rng)) > fx).count();
    above as f64 / samples as f64
}

/// `k / 20` for `k = 1..19`.
pub fn default_levels() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCurve {
    pub levels: Vec<f64>,
    pub coverage: Vec<f64>,
    /// Mean absolute gap between coverage and level.
    pub ece: f64,
    pub max_deviation: f64,
    pub points: usize,
}

/// Coverage curve from per-point HPD levels.
pub fn curve_from_levels(hpd: &[f64], levels: &[f64]) -> Result<CalibrationCurve> {
    if hpd.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one point".into()));
    }
    if levels.is_empty() || levels.iter().any(|l| !(*l > 0.0 && *l < 1.0)) || levels.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidInput("levels must be strictly increasing within (0, 1)".into()));
    }
    let coverage: Vec<f64> = levels.iter().map(|l| hpd.iter().filter(|h| **h <= *l).count() as f64 / hpd.len() as f64).collect();
    let gaps: Vec<f64> = coverage.iter().zip(levels).map(|(c, l)| (c - l).abs()).collect();
    Ok(CalibrationCurve {
        levels: levels.to_vec(),
        ece: gaps.iter().sum::<f64>() / gaps.len() as f64,
        max_deviation: gaps.iter().cloned().fold(0.0, f64::max),
        coverage,
        points: hpd.len(),
    })
}

/// HPD levels of every (prediction, step) ground-truth position. Each point
/// draws from its own seeded stream, so the result does not depend on
/// scheduling.
pub fn hpd_levels(preds: &[PredictionSet], truths: &[Vec<[f64; 2]>], samples: usize, seed: u64) -> Result<Vec<f64>> {
    if preds.len() != truths.len() {
        return Err(Error::dim("calibration truths", preds.len(), truths.len()));
    }
    let mut jobs = Vec::new();
    for (i, (p, t)) in preds.iter().zip(truths).enumerate() {
        check_horizon(p.horizon, t.len())?;
        for tau in 0..p.horizon {
            jobs.push((i, tau));
        }
    }
    jobs.par_iter()
        .map(|&(i, tau)| {
            let mix = Mixture2::at_step(&preds[i], tau)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, tau as u64));
            Ok(hpd_level(&mix, truths[i][tau], samples, &mut rng))
        })
        .collect()
}

pub fn calibration(preds: &[PredictionSet], truths: &[Vec<[f64; 2]>], levels: &[f64], samples: usize, seed: u64) -> Result<CalibrationCurve> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one prediction".into()));
    }
    curve_from_levels(&hpd_levels(preds, truths, samples, seed)?, levels)
}

/// Percentile bootstrap interval of `stat` over resampled `values`.
pub fn bootstrap_ci(values: &[f64], stat: impl Fn(&[f64]) -> f64, resamples: usize, confidence: f64, seed: u64) -> Result<(f64, f64)> {
    if values.is_empty() || resamples == 0 {
        return Err(Error::InvalidInput("bootstrap needs values and resamples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buf = vec![0.0; values.len()];
    let mut stats: Vec<f64> = (0..resamples)
        .map(|_| {
            for b in buf.iter_mut() {
                *b = values[rng.random_range(0..values.len())];
            }
            stat(&buf)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    let alpha = (1.0 - confidence) / 2.0;
    let pick = |q: f64| {
        let pos = q * (stats.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        stats[lo] + (pos - lo as f64) * (stats[hi] - stats[lo])
    };
    Ok((pick(alpha), pick(1.0 - alpha)))
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Point estimate with a 95% bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Estimate {
    pub fn of(values: &[f64], stat: impl Fn(&[f64]) -> f64 + Copy, opts: &MetricOptions, stream: u64) -> Result<Self> {
        let (lo, hi) = bootstrap_ci(values, stat, opts.bootstrap, 0.95, derive_seed(opts.seed, stream, 0))?;
        Ok(Self { value: stat(values), lo, hi })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricOptions {
    pub levels: Vec<f64>,
    pub rank_samples: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        Self {
            levels: default_levels(),
            rank_samples: 512,
            bootstrap: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ade: Estimate,
    pub fde: Estimate,
    pub min_ade_5: Option<Estimate>,
    pub min_ade_10: Option<Estimate>,
    pub nll: Estimate,
    pub ece: f64,
    pub max_deviation: f64,
    pub calibration_curve: Vec<(f64, f64)>,
    pub agents: usize,
    pub points: usize,
}

/// Per-agent metric values behind a report.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentMetrics {
    pub ade: Vec<f64>,
    pub fde: Vec<f64>,
    pub min_ade_5: Vec<f64>,
    pub min_ade_10: Vec<f64>,
    pub nll: Vec<f64>,
}

/// Per-agent values from sampled sets, mean trajectories and truths.
pub fn agent_metrics(samples: &[PredictionSet], means: &[Vec<[f64; 2]>], truths: &[Vec<[f64; 2]>]) -> Result<AgentMetrics> {
    if samples.len() != truths.len() || means.len() != truths.len() {
        return Err(Error::dim("evaluated agents", truths.len(), samples.len().min(means.len())));
    }
    let mut out = AgentMetrics::default();
    for ((s, m), t) in samples.iter().zip(means).zip(truths) {
        out.ade.push(ade(m, t)?);
        out.fde.push(fde(m, t)?);
        if s.particles.len() >= 5 {
            out.min_ade_5.push(min_ade_k(s, t, 5)?);
        }
        if s.particles.len() >= 10 {
            out.min_ade_10.push(min_ade_k(s, t, 10)?);
        }
        out.nll.push(traj_nll(s, t)?);
    }
    Ok(out)
}

pub fn report(samples: &[PredictionSet], means: &[Vec<[f64; 2]>], truths: &[Vec<[f64; 2]>], opts: &MetricOptions) -> Result<MetricsReport> {
    let m = agent_metrics(samples, means, truths)?;
    let cal = calibration(samples, truths, &opts.levels, opts.rank_samples, derive_seed(opts.seed, 99, 0))?;
    let full = |v: &Vec<f64>, stream| -> Result<Option<Estimate>> {
        if v.len() == truths.len() {
            Estimate::of(v, mean, opts, stream).map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(MetricsReport {
        ade: Estimate::of(&m.ade, mean, opts, 1)?,
        fde: Estimate::of(&m.fde, mean, opts, 2)?,
        min_ade_5: full(&m.min_ade_5, 3)?,
        min_ade_10: full(&m.min_ade_10, 4)?,
        nll: Estimate::of(&m.nll, mean, opts, 5)?,
        ece: cal.ece,
        max_deviation: cal.max_deviation,
        calibration_curve: cal.levels.iter().cloned().zip(cal.coverage.iter().cloned()).collect(),
        agents: truths.len(),
        points: cal.points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::predictor::TrajectoryParticle;

    fn set(paths: &[Vec<[f64; 2]>], var: f64) -> PredictionSet {
        let particles = paths
            .iter()
            .map(|p| {
                let mut states = vec![AgentState::new([0.0, 0.0], [0.0, 0.0])];
                states.extend(p.iter().map(|q| AgentState::new(*q, [0.0, 0.0])));
                TrajectoryParticle {
                    states,
                    actions: vec![[0.0; 2]; p.len()],
                    step_noise: vec![[var; 2]; p.len()],
                    integrated_variance: vec![[var; 2]; p.len()],
                    last_layer_path: Vec::new(),
                }
            })
            .collect();
        PredictionSet { particles, horizon: paths[0].len(), particle_count: paths.len() }
    }

    #[test]
    fn displacement_basics() {
        let a = vec![[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]];
        assert_eq!(ade(&a, &a).unwrap(), 0.0);
        assert_eq!(fde(&a, &a).unwrap(), 0.0);
        let shifted: Vec<[f64; 2]> = a.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        assert!((ade(&shifted, &a).unwrap() - 5.0).abs() < 1e-12);
        let mut last = a.clone();
        last[2] = [2.0, 0.5];
        assert!((fde(&last, &a).unwrap() - 0.5).abs() < 1e-12);
        assert!(ade(&a[..2], &a).is_err());
    }

    #[test]
    fn hand_computed_pair() {
        let pred = vec![[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]];
        let truth = vec![[0.0, 1.0], [1.0, 1.0], [5.0, 4.0]];
        assert!((ade(&pred, &truth).unwrap() - 2.0).abs() < 1e-12);
        assert!((fde(&pred, &truth).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn min_ade_brute_force() {
        let truth = vec![[1.0, 0.0], [2.0, 0.0]];
        let paths = vec![vec![[1.0, 1.0], [2.0, 1.0]], vec![[1.0, 0.2], [2.0, -0.2]], vec![[0.0, 0.0], [0.0, 0.0]]];
        let s = set(&paths, 0.1);
        let brute = paths.iter().map(|p| ade(p, &truth).unwrap()).fold(f64::INFINITY, f64::min);
        assert!((min_ade_k(&s, &truth, 3).unwrap() - brute).abs() < 1e-15);
        assert!((min_ade_k(&s, &truth, 1).unwrap() - ade(&paths[0], &truth).unwrap()).abs() < 1e-15);
        assert!(min_ade_k(&s, &truth, 4).is_err());
        let exact = set(std::slice::from_ref(&truth), 0.1);
        assert_eq!(min_ade_k(&exact, &truth, 1).unwrap(), 0.0);
    }

    #[test]
    fn point_mass_is_always_covered() {
        let truth = vec![vec![[1.0, 2.0]]];
        let s = set(&[vec![[1.0, 2.0]]], 0.0);
        let curve = calibration(&[s], &truth, &default_levels(), 256, 0).unwrap();
        assert!(curve.coverage.iter().all(|c| *c == 1.0));
        let expected = default_levels().iter().map(|l| 1.0 - l).sum::<f64>() / 19.0;
        assert!((curve.ece - expected).abs() < 1e-12);
    }

    #[test]
    fn gaussian_hpd_matches_chi_square() {
        let mix = Mixture2::new(vec![[0.0, 0.0]], vec![[0.25, 0.25]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for r in [0.2f64, 0.5, 0.8, 1.2] {
            let analytic = 1.0 - (-r * r / (2.0 * 0.25)).exp();
            let est = hpd_level(&mix, [r, 0.0], 20000, &mut rng);
            assert!((est - analytic).abs() < 0.015, "r={r}: {est} vs {analytic}");
        }
    }

    #[test]
    fn mixture_density_normalizes() {
        let mix = Mixture2::new(vec![[0.0, 0.0], [1.0, -0.5]], vec![[0.3, 0.1], [0.05, 0.2]]).unwrap();
        let h = 0.01;
        let mut total = 0.0;
        for i in -300..400 {
            for j in -300..300 {
                total += mix.log_density([i as f64 * h, j as f64 * h]).exp() * h * h;
            }
        }
        assert!((total - 1.0).abs() < 1e-3, "{total}");
    }

    #[test]
    fn bootstrap_brackets_mean() {
        let v: Vec<f64> = (0..200).map(|i| (i % 17) as f64).collect();
        let (lo, hi) = bootstrap_ci(&v, mean, 1000, 0.95, 1).unwrap();
        let m = mean(&v);
        assert!(lo < m && m < hi);
        assert_eq!(bootstrap_ci(&v, mean, 1000, 0.95, 1).unwrap(), (lo, hi));
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn levels_validated() {
        assert!(curve_from_levels(&[0.5], &[0.5, 0.4]).is_err());
        assert!(curve_from_levels(&[0.5], &[0.0, 0.4]).is_err());
        assert!(curve_from_levels(&[], &[0.5]).is_err());
    }
}
