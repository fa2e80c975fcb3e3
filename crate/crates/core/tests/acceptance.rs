//! Acceptance criteria. Prints one `[PASS]`/`[FAIL]` line per criterion and
//! exits non-zero if any criterion fails.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use adaptraj::adaptation::{adapt_hybrid, adapt_offline, finetune, observe_online, AdaptationConfig, AdaptationMode, AgentAdapterState, TraceRecord};
use adaptraj::bayes::{correct_step, predict_step, FactoredBelief, FactoredObservation, LastLayerBelief, ObservationModel, ParamDynamics};
use adaptraj::data::{episodes, extract_windows, generate_seeded, transfer_preset, DomainSpec, EpisodeSpec};
use adaptraj::evaluation::{first_window_per_agent, offline_protocol, online_protocol, summarize_online, OfflineOptions, OnlineOptions};
use adaptraj::metrics::{ade, calibration, default_levels, traj_nll, Mixture2};
use adaptraj::model::{AgentState, ModelConfig, ModelParameters, SceneWindow};
use adaptraj::predictor::{integrated_variance, kde_loss, PredictionSet, RolloutNoise, TrajectoryParticle};
use adaptraj::training::{derive_seed, gradient_check, train, Episode, LossOptions, TrainConfig};
use nalgebra::{DMatrix, DVector, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| gauss(rng) / (n as f64).sqrt());
    &a * a.transpose() + DMatrix::identity(n, n) * 0.5
}

fn max_rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs() / y.abs().max(f64::MIN_POSITIVE)).fold(0.0, f64::max)
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let p = rng.random_range(1..=16);
        let d = rng.random_range(1..=4);
        let k = rng.random_range(1..=50);
        let m0 = DVector::from_fn(p, |_, _| gauss(&mut rng));
        let s0 = random_spd(p, &mut rng);
        let dynamics = ParamDynamics::identity(p);
        let mut belief = LastLayerBelief::new(m0.clone(), s0.clone()).unwrap();
        let s0_inv = s0.clone().cholesky().unwrap().inverse();
        let mut precision = s0_inv.clone();
        let mut info = &s0_inv * &m0;
        for _ in 0..k {
            let phi = DMatrix::from_fn(d, p, |_, _| gauss(&mut rng));
            let r = random_spd(d, &mut rng);
            let y = DVector::from_fn(d, |_, _| 2.0 * gauss(&mut rng));
            belief = predict_step(&belief, &dynamics).unwrap();
            belief = correct_step(&belief, &ObservationModel::new(phi.clone(), r.clone()).unwrap(), &y).unwrap().0;
            let r_inv = r.cholesky().unwrap().inverse();
            precision += phi.transpose() * &r_inv * &phi;
            info += phi.transpose() * &r_inv * &y;
        }
        let cov = precision.cholesky().unwrap().inverse();
        let mean = &cov * &info;
        worst = worst.max(max_rel(&DMatrix::from_column_slice(p, 1, belief.mean.as_slice()), &DMatrix::from_column_slice(p, 1, mean.as_slice())));
        worst = worst.max(max_rel(&belief.cov, &cov));
    }
    let elapsed = t.elapsed();
    outcome(worst < 1e-8 && elapsed < Duration::from_secs(10), format!("recursive vs batch posterior, max relative entry error {worst:.2e} (< 1e-8), {elapsed:.2?} (< 10 s)"))
}

fn gradient_episode(rng: &mut ChaCha8Rng, transitions: usize, anchor: usize) -> Episode {
    let dt = 0.5;
    let mut track = |start: [f64; 2]| {
        let mut pos = start;
        let mut vel = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
        let mut out = Vec::new();
        for _ in 0..3 + transitions {
            out.push(AgentState::new(pos, vel));
            vel = [vel[0] + rng.random_range(-0.3..0.3), vel[1] + rng.random_range(-0.3..0.3)];
            pos = [pos[0] + vel[0] * dt, pos[1] + vel[1] * dt];
        }
        out
    };
    let ego = track([0.0, 0.0]);
    let n1 = track([1.0, -0.5]);
    let n2 = track([-0.8, 1.2]);
    Episode {
        window: SceneWindow {
            ego_history: ego[..3].to_vec(),
            neighbor_histories: vec![n1[..3].to_vec(), n2[..3].to_vec()],
            dt,
            ..Default::default()
        },
        stream: ego[3..].to_vec(),
        anchors: vec![anchor],
    }
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let mut cfg = ModelConfig::with_width(16);
        cfg.init_seed = seed;
        let params = ModelParameters::init(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let ep = gradient_episode(&mut rng, 6, 3);
        let noise = vec![RolloutNoise::draw(4, 3, cfg.feature_dim, 2, &mut rng)];
        let opts = LossOptions { lambda_filter: 1.0, lambda_kde: 1.0, corrections: true, freeze_process_noise: false, detach_diffusion: false };
        worst = worst.max(gradient_check(&params, &ep, &opts, &noise).unwrap().max_rel_err);
    }
    let elapsed = t.elapsed();
    outcome(worst < 1e-4 && elapsed < Duration::from_secs(120), format!("episode loss gradients over 10 seeds, max relative error {worst:.2e} (< 1e-4), {elapsed:.2?} (< 2 min)"))
}

fn particle(path: Vec<[f64; 2]>, var: Vec<[f64; 2]>) -> TrajectoryParticle {
    let t = var.len();
    TrajectoryParticle {
        states: path.into_iter().map(|p| AgentState::new(p, [0.0, 0.0])).collect(),
        actions: vec![[0.0; 2]; t],
        step_noise: vec![[0.0; 2]; t],
        integrated_variance: var,
        last_layer_path: Vec::new(),
    }
}

fn random_set(rng: &mut ChaCha8Rng, n: usize, horizon: usize, spread: f64) -> PredictionSet {
    let particles = (0..n)
        .map(|_| {
            let path = (0..=horizon).map(|k| [spread * gauss(rng) + k as f64 * 0.3, spread * gauss(rng)]).collect();
            let var = (0..horizon).map(|_| [rng.random_range(0.05..1.5), rng.random_range(0.05..1.5)]).collect();
            particle(path, var)
        })
        .collect();
    PredictionSet { particles, horizon, particle_count: n }
}

fn criterion_3() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(1..=5);
        let horizon = rng.random_range(1..=4);
        let set = random_set(&mut rng, n, horizon, 0.7);
        let truth: Vec<AgentState> = (1..=horizon).map(|k| AgentState::new([k as f64 * 0.3 + 0.5 * gauss(&mut rng), 0.5 * gauss(&mut rng)], [0.0; 2])).collect();
        let got = kde_loss(&set, &truth).unwrap();
        let mut direct = 0.0;
        for (tau, x) in truth.iter().enumerate() {
            let density: f64 = set
                .particles
                .iter()
                .map(|p| {
                    let m = p.states[tau + 1].position;
                    let v = p.integrated_variance[tau];
                    (0..2).map(|j| Normal::new(m[j], v[j].sqrt()).unwrap().pdf(x.position[j])).product::<f64>()
                })
                .sum::<f64>()
                / n as f64;
            direct -= density.ln();
        }
        direct /= horizon as f64;
        worst = worst.max((got - direct).abs() / direct.abs());
    }
    let elapsed = t.elapsed();
    outcome(worst < 1e-10 && elapsed < Duration::from_secs(10), format!("kde loss vs direct mixture density over 100 sets, max relative error {worst:.2e} (< 1e-10), {elapsed:.2?} (< 10 s)"))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    let exact = |noise: &[[f64; 2]], dt: f64| -> Vec<Matrix2<f64>> {
        let a: Matrix2<f64> = Matrix2::identity();
        let b: Matrix2<f64> = Matrix2::identity() * dt;
        let mut p: Matrix2<f64> = Matrix2::zeros();
        noise
            .iter()
            .map(|s| {
                p = a * p * a.transpose() + b * Matrix2::new(s[0], 0.0, 0.0, s[1]) * b.transpose();
                p
            })
            .collect::<Vec<_>>()
    };
    for horizon in 1..=20 {
        let dt = rng.random_range(0.05..1.0);
        let noise: Vec<[f64; 2]> = (0..horizon).map(|_| [rng.random_range(0.01..3.0), rng.random_range(0.01..3.0)]).collect();
        let got = integrated_variance(&noise.iter().map(|s| DVector::from_row_slice(s)).collect::<Vec<_>>(), dt);
        for (g, e) in got.iter().zip(exact(&noise, dt)) {
            for j in 0..2 {
                worst = worst.max((g[j] - e[(j, j)]).abs() / e[(j, j)]);
            }
        }
    }
    let cfg = ModelConfig::with_width(8);
    let params = ModelParameters::init(&cfg).unwrap();
    let ep = gradient_episode(&mut rng, 1, 0);
    let adapter = AgentAdapterState::start(&ep.window, &params, &params.prior_belief(), true).unwrap();
    let set = adapter.forecast(&params, 6, 20, &mut rng).unwrap();
    for p in &set.particles {
        for (g, e) in p.integrated_variance.iter().zip(exact(&p.step_noise, cfg.dt)) {
            for j in 0..2 {
                worst = worst.max((g[j] - e[(j, j)]).abs() / e[(j, j)]);
            }
        }
    }
    outcome(worst < 1e-12, format!("integrated variance vs exact linear-Gaussian propagation for T <= 20, max relative error {worst:.2e} (< 1e-12)"))
}

/// Base-domain model shared by the transfer criteria.
fn base_model() -> &'static (ModelParameters, Duration) {
    static MODEL: OnceLock<(ModelParameters, Duration)> = OnceLock::new();
    MODEL.get_or_init(|| {
        let t = Instant::now();
        let source = transfer_preset("speed-shift").unwrap().source;
        let ds = generate_seeded(&source, 60).unwrap();
        let cfg = ModelConfig::with_width(32);
        let tc = TrainConfig { epochs: 30, ..Default::default() };
        let spec = EpisodeSpec { encoder_frames: cfg.encoder_frames, observed: tc.observed, horizon: tc.horizon, stride: 8 };
        let eps = episodes(&ds, &spec).unwrap();
        let out = train(&ModelParameters::init(&cfg).unwrap(), &eps, &tc).unwrap();
        (out.params, t.elapsed())
    })
}

fn online_windows(target: &DomainSpec, steps: usize, horizon: usize) -> Vec<SceneWindow> {
    let ds = generate_seeded(&DomainSpec { seed: 7, ..target.clone() }, 60).unwrap();
    first_window_per_agent(&extract_windows(&ds, 8, steps + horizon), steps + horizon)
}

fn criterion_5() -> Outcome {
    let t = Instant::now();
    let (params, _) = base_model();
    let target = transfer_preset("speed-shift").unwrap().target;
    let windows = online_windows(&target, 8, 12);
    let run = |mode| {
        let opts = OnlineOptions { steps: 8, mode, ..Default::default() };
        summarize_online(&online_protocol(params, &params.prior_belief(), &windows, &opts).unwrap(), 1000, 5).unwrap()
    };
    let ours = run(AdaptationMode::Online);
    let k0 = run(AdaptationMode::K0);
    let (o, k) = (ours[8], k0[8]);
    let non_increasing = (1..=8).filter(|&s| ours[s].median_ade <= ours[s - 1].median_ade).count();
    let elapsed = t.elapsed();
    let pass = windows.len() >= 200 && o.hi < k.lo && non_increasing >= 6 && elapsed < Duration::from_secs(1800);
    outcome(
        pass,
        format!(
            "speed x1.5, {} agents: median ADE at 8 steps ours {:.3} [{:.3}, {:.3}] vs K0 {:.3} [{:.3}, {:.3}]; non-increasing on {non_increasing}/8 steps (>= 6); {elapsed:.1?} incl. training",
            windows.len(),
            o.median_ade,
            o.lo,
            o.hi,
            k.median_ade,
            k.lo,
            k.hi
        ),
    )
}

fn criterion_6() -> Outcome {
    let (params, _) = base_model();
    let pair = transfer_preset("freq-shift").unwrap();
    let windows = online_windows(&pair.target, 10, 12);
    let opts = OnlineOptions { steps: 10, mode: AdaptationMode::Online, ..Default::default() };
    let s = summarize_online(&online_protocol(params, &params.prior_belief(), &windows, &opts).unwrap(), 1000, 6).unwrap();
    let reduction = 1.0 - s[10].mean_fde / s[0].mean_fde;
    outcome(
        reduction >= 0.30,
        format!(
            "dt {} -> {}, {} agents: mean FDE {:.3} -> {:.3} after 10 updates, reduction {:.1}% (>= 30%)",
            pair.source.dt,
            pair.target.dt,
            windows.len(),
            s[0].mean_fde,
            s[10].mean_fde,
            100.0 * reduction
        ),
    )
}

fn criterion_7() -> Outcome {
    let (params, _) = base_model();
    let target = transfer_preset("freq-shift").unwrap().target;
    let cfg = &params.config;
    let adapt_ds = generate_seeded(&DomainSpec { seed: 11, ..target.clone() }, 20).unwrap();
    let tc = TrainConfig::default();
    let adapt = episodes(&adapt_ds, &EpisodeSpec { encoder_frames: cfg.encoder_frames, observed: tc.observed, horizon: tc.horizon, stride: 23 }).unwrap();
    let eval_ds = generate_seeded(&DomainSpec { seed: 12, ..target }, 30).unwrap();
    let opts = OfflineOptions { counts: vec![0, 1000], ..Default::default() };
    let history = cfg.encoder_frames - 1 + opts.observed;
    let windows = first_window_per_agent(&extract_windows(&eval_ds, history, opts.horizon), opts.horizon);
    let curve = offline_protocol(params, &adapt, &windows, AdaptationMode::Offline, &opts).unwrap();
    let (a, b) = (&curve[0].report, &curve[1].report);
    outcome(
        b.ece < a.ece && b.max_deviation < a.max_deviation,
        format!(
            "dt shift offline, {} windows: ECE {:.4} -> {:.4} after {} updates; max deviation {:.4} -> {:.4} (both must decrease)",
            windows.len(),
            a.ece,
            b.ece,
            curve[1].updates,
            a.max_deviation,
            b.max_deviation
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut preds = Vec::new();
    let mut truths = Vec::new();
    for _ in 0..1000 {
        let n = rng.random_range(1..=5);
        let set = random_set(&mut rng, n, 2, 1.0);
        let truth = (0..2).map(|tau| Mixture2::at_step(&set, tau).unwrap().sample(&mut rng)).collect();
        preds.push(set);
        truths.push(truth);
    }
    let curve = calibration(&preds, &truths, &default_levels(), 512, 80).unwrap();
    outcome(curve.ece < 0.03, format!("{} points drawn from the evaluated mixtures, 512 rank samples: ECE {:.4} (< 0.03)", curve.points, curve.ece))
}

fn time_median(reps: usize, mut f: impl FnMut()) -> f64 {
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let sizes = [32usize, 64, 128, 256, 512];
    let mut logs = Vec::new();
    for &p in &sizes {
        let belief = LastLayerBelief::new(DVector::from_fn(p, |_, _| gauss(&mut rng)), random_spd(p, &mut rng)).unwrap();
        let obs = ObservationModel::new(DMatrix::from_fn(2, p, |_, _| gauss(&mut rng)), DMatrix::identity(2, 2) * 0.3).unwrap();
        let y = DVector::from_fn(2, |_, _| gauss(&mut rng));
        let reps = (4_000_000 / (p * p)).clamp(5, 2000);
        let t = time_median(reps, || {
            std::hint::black_box(correct_step(&belief, &obs, &y).unwrap());
        });
        logs.push(((p as f64).ln(), t.ln()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|l| l.0).sum::<f64>() / n;
    let my = logs.iter().map(|l| l.1).sum::<f64>() / n;
    let slope = logs.iter().map(|l| (l.0 - mx) * (l.1 - my)).sum::<f64>() / logs.iter().map(|l| (l.0 - mx).powi(2)).sum::<f64>();

    let p = 32;
    let dims = (0..2).map(|_| LastLayerBelief::new(DVector::from_fn(p, |_, _| gauss(&mut rng)), random_spd(p, &mut rng)).unwrap()).collect();
    let belief = FactoredBelief::new(dims).unwrap();
    let obs = FactoredObservation::new(DMatrix::from_fn(2, p, |_, _| gauss(&mut rng)), DVector::from_element(2, 0.3)).unwrap();
    let y = DVector::from_fn(2, |_, _| gauss(&mut rng));
    let single = time_median(201, || {
        std::hint::black_box(belief.correct(&obs, &y).unwrap());
    });
    outcome(
        slope <= 2.3 && single < 1e-3,
        format!("correct_step runtime exponent in p over 32..512: {slope:.2} (<= 2.3); diagonal update at p=32, d=2: {:.1} us (< 1 ms)", single * 1e6),
    )
}

fn small_target_episodes(stride: usize) -> Vec<Episode> {
    let target = transfer_preset("speed-shift").unwrap().target;
    let ds = generate_seeded(&DomainSpec { seed: 11, ..target }, 10).unwrap();
    let tc = TrainConfig::default();
    episodes(&ds, &EpisodeSpec { encoder_frames: 3, observed: tc.observed, horizon: tc.horizon, stride }).unwrap()
}

fn criterion_10() -> Outcome {
    let params = ModelParameters::init(&ModelConfig::with_width(8)).unwrap();
    let eps = small_target_episodes(23);
    let config = AdaptationConfig { mode: AdaptationMode::Hybrid, switch_count: 100, finetune_steps: 5, ..Default::default() };
    let out = adapt_hybrid(&params, &eps, &config, &TrainConfig::default()).unwrap();
    let first_gradient = out.trace.iter().position(|r| !r.is_exact()).unwrap_or(out.trace.len());
    let exact_before = out.trace[..first_gradient].iter().filter(|r| r.is_exact()).count();
    let exact_total = out.trace.iter().filter(|r| r.is_exact()).count();
    let gradients = out.trace.len() - exact_total;
    outcome(
        exact_before == 100 && exact_total == 100 && gradients > 0,
        format!("hybrid M=100: {exact_before} exact updates before the first gradient step, {exact_total} in total, then {gradients} gradient steps"),
    )
}

fn criterion_11() -> Outcome {
    let params = ModelParameters::init(&ModelConfig::with_width(8)).unwrap();
    let prior = params.prior_belief();
    let target = transfer_preset("speed-shift").unwrap().target;
    let ds = generate_seeded(&DomainSpec { seed: 7, ..target }, 6).unwrap();
    let windows = first_window_per_agent(&extract_windows(&ds, 8, 14), 14);
    let opts = OnlineOptions { steps: 6, horizon: 8, particles: 10, mode: AdaptationMode::K0, seed: 3 };
    let k0 = online_protocol(&params, &prior, &windows, &opts).unwrap();

    // The prior model: the same decoder inputs, with the belief held at the prior.
    let mut identical = !k0.is_empty();
    let mut beliefs_fixed = true;
    for (i, (w, res)) in windows.iter().zip(&k0).enumerate() {
        let mut adapter = AgentAdapterState::start(w, &params, &prior, false).unwrap();
        for k in 0..=opts.steps {
            beliefs_fixed &= adapter.belief == prior;
            let reference = AgentAdapterState { belief: prior.clone(), ..adapter.clone() };
            let truth: Vec<[f64; 2]> = w.future[k..k + opts.horizon].iter().map(|s| s.position).collect();
            let mean = reference.mean_forecast(&params, opts.horizon).unwrap().positions().remove(0);
            let ade = ade(&mean, &truth).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64, k as u64));
            let nll = traj_nll(&reference.forecast(&params, opts.particles, opts.horizon, &mut rng).unwrap(), &truth).unwrap();
            identical &= ade.to_bits() == res.ade[k].to_bits() && nll.to_bits() == res.nll[k].to_bits();
            if k < opts.steps {
                adapter = observe_online(&adapter, Some(&w.future[k]), &params).unwrap().0;
            }
        }
        identical &= res.trace.is_empty();
    }
    let eps = small_target_episodes(23);
    let offline_k0 = adapt_offline(&params, &eps, &AdaptationConfig { mode: AdaptationMode::K0, ..Default::default() }).unwrap();
    identical &= offline_k0.belief == prior && offline_k0.trace.is_empty();

    let config = AdaptationConfig { mode: AdaptationMode::K0Finetune, finetune_steps: 5, ..Default::default() };
    let tuned = finetune(&params, &eps, &config, &TrainConfig::default()).unwrap();
    let gradient_steps = tuned.trace.iter().filter(|r| matches!(r, TraceRecord::Gradient { .. })).count();
    let mut others_frozen = true;
    let mut changed = Vec::new();
    for (name, before) in params.iter() {
        let after = tuned.params.get(name).unwrap();
        let same = before.iter().zip(after.iter()).all(|(a, b)| a.to_bits() == b.to_bits());
        if name.starts_with("prior.") {
            if !same {
                changed.push(name.clone());
            }
        } else {
            others_frozen &= same;
        }
    }
    outcome(
        identical && beliefs_fixed && others_frozen && !changed.is_empty() && gradient_steps > 0,
        format!(
            "K0 forecasts bit-identical to the prior model over {} agents: {}; K0+finetune ({gradient_steps} steps) changed only {:?}, all other tensors bit-identical: {others_frozen}",
            windows.len(),
            identical && beliefs_fixed,
            changed
        ),
    )
}

fn main() {
    let criteria: [(usize, fn() -> Outcome); 11] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
        (10, criterion_10),
        (11, criterion_11),
    ];
    let mut failed = Vec::new();
    for (n, f) in criteria {
        let o = f();
        println!("[{}] criterion {n}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        if !o.pass {
            failed.push(n);
        }
    }
    let (_, train_time) = base_model();
    println!("shared base-domain training: {train_time:.1?}");
    if failed.is_empty() {
        println!("acceptance: all 11 criteria passed");
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
