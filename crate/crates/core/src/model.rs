//! Recurrent encoder-decoder: scene encoding, decoder state, last-layer
//! features and state-dependent noise.
//!
//! All network code is written once against [`Backend`] and used both for
//! plain evaluation and for recording a gradient tape. Inputs follow a row
//! convention: a batch of `n` inputs is an `n x k` matrix and weights are
//! `k x m`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{inv_softplus, softplus, Backend, Eval, Mat};
use crate::bayes::{FactoredBelief, FactoredObservation, LastLayerBelief, ParamDynamics};
use crate::error::{Error, Result};

/// Kinematic state of one agent at one frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AgentState {
    pub position: [f64; 2],
    pub velocity: [f64; 2],
    #[serde(default)]
    pub acceleration: [f64; 2],
    #[serde(default)]
    pub heading: f64,
}

impl AgentState {
    pub fn new(position: [f64; 2], velocity: [f64; 2]) -> Self {
        Self {
            position,
            velocity,
            acceleration: [0.0; 2],
            heading: heading_of(velocity),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(&self.velocity)
            .chain(&self.acceleration)
            .all(|v| v.is_finite())
            && self.heading.is_finite()
    }

    /// Same state with the velocity multiplied by `ratio`.
    pub fn with_velocity_scale(mut self, ratio: f64) -> Self {
        self.velocity = [self.velocity[0] * ratio, self.velocity[1] * ratio];
        self
    }
}

/// Heading of a velocity in `(-π, π]`; zero for a stationary agent.
pub fn heading_of(v: [f64; 2]) -> f64 {
    if v[0] == 0.0 && v[1] == 0.0 {
        return 0.0;
    }
    let h = v[1].atan2(v[0]);
    if h == -std::f64::consts::PI {
        std::f64::consts::PI
    } else {
        h
    }
}

/// Single-integrator step: `position' = position + a dt`, `velocity' = a`.
pub fn dynamics_step(s: &AgentState, a: [f64; 2], dt: f64) -> Result<AgentState> {
    if !a.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite action {a:?}")));
    }
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let acceleration = [(a[0] - s.velocity[0]) / dt, (a[1] - s.velocity[1]) / dt];
    Ok(AgentState {
        position: [s.position[0] + a[0] * dt, s.position[1] + a[1] * dt],
        velocity: a,
        acceleration,
        heading: if a == [0.0, 0.0] { s.heading } else { heading_of(a) },
    })
}

/// One agent's history, its neighbors, and optionally the ground-truth future.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneWindow {
    #[serde(default)]
    pub scene_id: u64,
    #[serde(default)]
    pub agent_id: u64,
    /// Frame index of the last history entry.
    #[serde(default)]
    pub frame: i64,
    pub ego_history: Vec<AgentState>,
    /// Neighbor histories, each aligned so that its last entry is at the
    /// same frame as the last ego entry.
    #[serde(default)]
    pub neighbor_histories: Vec<Vec<AgentState>>,
    #[serde(default)]
    pub context: Vec<f64>,
    #[serde(default)]
    pub future: Vec<AgentState>,
    pub dt: f64,
    /// Set when fewer history frames than requested were available.
    #[serde(default)]
    pub short_history: bool,
}

impl SceneWindow {
    pub fn current(&self) -> Result<&AgentState> {
        self.ego_history
            .last()
            .ok_or_else(|| Error::InvalidInput("empty ego history".into()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.ego_history.is_empty() {
            return Err(Error::InvalidInput("empty ego history".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidInput(format!("window dt must be positive, got {}", self.dt)));
        }
        let finite = self.ego_history.iter().chain(self.neighbor_histories.iter().flatten()).chain(&self.future).all(AgentState::is_finite);
        if !finite {
            return Err(Error::InvalidInput("window contains non-finite states".into()));
        }
        Ok(())
    }
}

/// Scene encoding `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneEncoding {
    pub vector: DVector<f64>,
}

/// Decoder hidden state `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub hidden: DVector<f64>,
}

/// Network sizes and input conventions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: usize,
    pub decoder_hidden: usize,
    pub encoding_dim: usize,
    pub attention_dim: usize,
    /// Last-layer length p, including the constant feature.
    pub feature_dim: usize,
    pub output_dim: usize,
    pub context_dim: usize,
    /// Number of history frames fed to the encoder.
    pub encoder_frames: usize,
    pub neighbor_radius: f64,
    pub max_neighbors: usize,
    pub pos_scale: f64,
    pub vel_scale: f64,
    /// Integration step the model is trained at, in seconds.
    pub dt: f64,
    pub noise_floor: f64,
    pub noise_ceiling: f64,
    pub init_noise_var: f64,
    pub prior_var: f64,
    pub process_noise_init: f64,
    pub feature_init_scale: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: 32,
            decoder_hidden: 32,
            encoding_dim: 32,
            attention_dim: 32,
            feature_dim: 32,
            output_dim: 2,
            context_dim: 0,
            encoder_frames: 3,
            neighbor_radius: 4.0,
            max_neighbors: 8,
            pos_scale: 0.5,
            vel_scale: 1.0,
            dt: 0.5,
            noise_floor: 1e-6,
            noise_ceiling: 1e3,
            init_noise_var: 0.05,
            prior_var: 0.5,
            process_noise_init: 1e-4,
            feature_init_scale: 1.5,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// All network widths set to `w`.
    pub fn with_width(w: usize) -> Self {
        Self {
            encoder_hidden: w,
            decoder_hidden: w,
            encoding_dim: w,
            attention_dim: w,
            feature_dim: w,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("encoder_hidden", self.encoder_hidden),
            ("decoder_hidden", self.decoder_hidden),
            ("encoding_dim", self.encoding_dim),
            ("attention_dim", self.attention_dim),
            ("encoder_frames", self.encoder_frames),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.feature_dim < 2 {
            return Err(Error::Config("model.feature_dim must be at least 2".into()));
        }
        if self.output_dim != 2 {
            return Err(Error::Config("model.output_dim must be 2 for planar actions".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config("model.dt must be positive".into()));
        }
        if !(self.noise_floor > 0.0 && self.noise_ceiling > self.noise_floor) {
            return Err(Error::Config("model noise bounds need 0 < floor < ceiling".into()));
        }
        if !(self.init_noise_var > self.noise_floor && self.init_noise_var < self.noise_ceiling) {
            return Err(Error::Config("model.init_noise_var must lie inside the noise bounds".into()));
        }
        if !(self.prior_var > 0.0 && self.process_noise_init > 0.0) {
            return Err(Error::Config("model prior and process variances must be positive".into()));
        }
        if !(self.neighbor_radius >= 0.0 && self.pos_scale > 0.0 && self.vel_scale > 0.0) {
            return Err(Error::Config("model input scales must be positive".into()));
        }
        Ok(())
    }

    /// Expected shape of every named tensor.
    pub fn tensor_shapes(&self) -> Vec<(String, (usize, usize))> {
        let (eh, dh, e, a, p, d) = (
            self.encoder_hidden,
            self.decoder_hidden,
            self.encoding_dim,
            self.attention_dim,
            self.feature_dim,
            self.output_dim,
        );
        let mut out = Vec::new();
        for branch in ["enc.ego", "enc.nb"] {
            for g in ["z", "r", "n"] {
                out.push((format!("{branch}.w{g}"), (INPUT_DIM, eh)));
                out.push((format!("{branch}.u{g}"), (eh, eh)));
                out.push((format!("{branch}.b{g}"), (1, eh)));
            }
        }
        out.push(("enc.att.wq".into(), (eh, a)));
        out.push(("enc.att.wk".into(), (eh, a)));
        out.push(("enc.att.v".into(), (a, 1)));
        out.push(("enc.proj.w".into(), (2 * eh + self.context_dim, e)));
        out.push(("enc.proj.b".into(), (1, e)));
        out.push(("dec.init.w".into(), (e, dh)));
        out.push(("dec.init.b".into(), (1, dh)));
        for g in ["z", "r", "n"] {
            out.push((format!("dec.cell.w{g}"), (d, dh)));
            out.push((format!("dec.cell.v{g}"), (e, dh)));
            out.push((format!("dec.cell.u{g}"), (dh, dh)));
            out.push((format!("dec.cell.b{g}"), (1, dh)));
        }
        out.push(("head.feat.w".into(), (dh, p - 1)));
        out.push(("head.feat.b".into(), (1, p - 1)));
        out.push(("head.noise.w".into(), (dh, d)));
        out.push(("head.noise.b".into(), (1, d)));
        out.push(("prior.mean".into(), (d, p)));
        for j in 0..d {
            out.push((format!("prior.chol.{j}"), (p, p)));
        }
        out.push(("dyn.q_raw".into(), (1, p)));
        out
    }
}

/// Per-frame encoder input: relative position and velocity.
const INPUT_DIM: usize = 4;

/// Whether a parameter belongs to the adaptive last layer.
pub fn is_last_layer_param(name: &str) -> bool {
    name.starts_with("prior.")
}

/// Serialized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

/// All learned quantities of the model, stored as named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    pub config: ModelConfig,
    tensors: BTreeMap<String, Mat>,
}

impl ModelParameters {
    /// Seeded initialization: uniform `±1/sqrt(fan_in)` weights, zero
    /// biases, a diagonal prior and a small process noise.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut tensors = BTreeMap::new();
        for (name, (r, c)) in config.tensor_shapes() {
            let last = name.rsplit('.').next().unwrap_or_default();
            let m = if name == "head.noise.b" {
                Mat::from_element(r, c, noise_bias(config))
            } else if last.starts_with('b') && last.len() <= 2 || name == "prior.mean" {
                Mat::zeros(r, c)
            } else if name.starts_with("prior.chol.") {
                let raw = inv_softplus(config.prior_var.sqrt());
                Mat::from_diagonal_element(r, c, raw)
            } else if name == "dyn.q_raw" {
                Mat::from_element(r, c, inv_softplus(config.process_noise_init))
            } else {
                let scale = match name.as_str() {
                    "head.feat.w" => config.feature_init_scale,
                    "head.noise.w" => 0.1,
                    _ => 1.0,
                } / (r as f64).sqrt();
                let dist = Uniform::new_inclusive(-scale, scale).expect("finite init range");
                Mat::from_fn(r, c, |_, _| dist.sample(&mut rng))
            };
            tensors.insert(name, m);
        }
        Ok(Self { config: config.clone(), tensors })
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|m| m.iter().all(|v| v.is_finite()))
    }

    pub fn bind<B: Backend>(&self, b: &mut B) -> Bound<B::V> {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, m)| (k.clone(), b.leaf(m.clone())))
                .collect(),
        }
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.tensors
            .iter()
            .map(|(name, m)| TensorRecord {
                name: name.clone(),
                rows: m.nrows(),
                cols: m.ncols(),
                data: (0..m.nrows()).flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>()).collect(),
            })
            .collect()
    }

    pub fn from_records(config: &ModelConfig, records: &[TensorRecord]) -> Result<Self> {
        config.validate()?;
        let mut tensors = BTreeMap::new();
        for r in records {
            if r.data.len() != r.rows * r.cols {
                return Err(Error::Serde(format!("tensor {} has {} entries for shape {}x{}", r.name, r.data.len(), r.rows, r.cols)));
            }
            tensors.insert(r.name.clone(), DMatrix::from_row_slice(r.rows, r.cols, &r.data));
        }
        for (name, shape) in config.tensor_shapes() {
            match tensors.get(&name) {
                None => return Err(Error::Serde(format!("checkpoint is missing tensor {name}"))),
                Some(m) if m.shape() != shape => {
                    return Err(Error::Serde(format!(
                        "tensor {name} has shape {}x{}, expected {}x{}",
                        m.nrows(),
                        m.ncols(),
                        shape.0,
                        shape.1
                    )))
                }
                _ => {}
            }
        }
        if tensors.len() != config.tensor_shapes().len() {
            return Err(Error::Serde("checkpoint contains unknown tensors".into()));
        }
        let out = Self { config: config.clone(), tensors };
        if !out.is_finite() {
            return Err(Error::Serde("checkpoint contains non-finite values".into()));
        }
        Ok(out)
    }

    /// Learned prior belief, one block per output dimension.
    pub fn prior_belief(&self) -> FactoredBelief {
        let mean = &self.tensors["prior.mean"];
        let dims = (0..self.config.output_dim)
            .map(|j| {
                let l = chol_factor(&self.tensors[&format!("prior.chol.{j}")]);
                LastLayerBelief {
                    mean: mean.row(j).transpose(),
                    cov: &l * l.transpose(),
                    step: 0,
                }
            })
            .collect();
        FactoredBelief { dims }
    }

    /// Writes `belief` into the prior parameters.
    pub fn set_prior(&mut self, belief: &FactoredBelief) -> Result<()> {
        let (d, p) = (self.config.output_dim, self.config.feature_dim);
        if belief.output_dim() != d || belief.feature_dim() != p {
            return Err(Error::dim("prior belief", format!("{d}x{p}"), format!("{}x{}", belief.output_dim(), belief.feature_dim())));
        }
        for (j, b) in belief.dims.iter().enumerate() {
            let chol = nalgebra::Cholesky::new((&b.cov + b.cov.transpose()) * 0.5)
                .ok_or_else(|| Error::Numerical(format!("belief block {j} is not positive definite")))?;
            let l = chol.l();
            let mut raw = l.clone();
            for i in 0..p {
                raw[(i, i)] = inv_softplus(l[(i, i)]);
            }
            self.tensors.insert(format!("prior.chol.{j}"), raw);
            self.tensors
                .get_mut("prior.mean")
                .expect("prior mean present")
                .row_mut(j)
                .copy_from(&b.mean.transpose());
        }
        Ok(())
    }

    /// Random-walk last-layer dynamics with the learned process noise.
    pub fn dynamics(&self) -> ParamDynamics {
        ParamDynamics::random_walk(self.tensors["dyn.q_raw"].row(0).transpose().map(softplus))
    }
}

fn noise_bias(config: &ModelConfig) -> f64 {
    // Invert the bounded link at the requested initial variance.
    let (f, c, s) = (config.noise_floor, config.noise_ceiling, config.init_noise_var);
    let u = c * (s - f) / (c - (s - f));
    inv_softplus(u)
}

/// Lower-triangular factor with a softplus diagonal from raw entries.
pub fn chol_factor(raw: &Mat) -> Mat {
    let n = raw.nrows();
    Mat::from_fn(n, n, |i, j| match i.cmp(&j) {
        std::cmp::Ordering::Greater => raw[(i, j)],
        std::cmp::Ordering::Equal => softplus(raw[(i, i)]),
        std::cmp::Ordering::Less => 0.0,
    })
}

/// Parameters bound into a backend.
pub struct Bound<V> {
    vars: BTreeMap<String, V>,
}

impl<V> Bound<V> {
    pub fn get(&self, name: &str) -> &V {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &V)> {
        self.vars.iter()
    }
}

/// Precomputed context contribution to the three decoder gates.
pub struct GateContext<V> {
    z: V,
    r: V,
    n: V,
}

fn gru<B: Backend>(b: &mut B, p: &Bound<B::V>, pre: &str, x: &B::V, h: &B::V, ctx: Option<&GateContext<B::V>>) -> B::V {
    let gate = |b: &mut B, g: &str, hh: &B::V, extra: Option<&B::V>| {
        let xw = b.matmul(x, p.get(&format!("{pre}.w{g}")));
        let hu = b.matmul(hh, p.get(&format!("{pre}.u{g}")));
        let mut s = b.add(&xw, &hu);
        s = b.add(&s, p.get(&format!("{pre}.b{g}")));
        if let Some(e) = extra {
            s = b.add(&s, e);
        }
        s
    };
    let zs = gate(b, "z", h, ctx.map(|c| &c.z));
    let z = b.sigmoid(&zs);
    let rs = gate(b, "r", h, ctx.map(|c| &c.r));
    let r = b.sigmoid(&rs);
    let rh = b.mul(&r, h);
    let ns = gate(b, "n", &rh, ctx.map(|c| &c.n));
    let n = b.tanh(&ns);
    // h' = (1 - z) n + z h = n + z (h - n)
    let diff = b.sub(h, &n);
    let zd = b.mul(&z, &diff);
    b.add(&n, &zd)
}

fn state_input(s: &AgentState, origin: [f64; 2], ratio: f64, cfg: &ModelConfig) -> [f64; INPUT_DIM] {
    [
        (s.position[0] - origin[0]) * cfg.pos_scale,
        (s.position[1] - origin[1]) * cfg.pos_scale,
        s.velocity[0] * ratio * cfg.vel_scale,
        s.velocity[1] * ratio * cfg.vel_scale,
    ]
}

/// Encoder inputs after frame selection, neighbor filtering and canonical
/// ordering.
struct EncoderInputs {
    ego: Vec<[f64; INPUT_DIM]>,
    /// Per frame, one row per neighbor.
    neighbors: Vec<Vec<[f64; INPUT_DIM]>>,
    context: Vec<f64>,
}

fn encoder_inputs(cfg: &ModelConfig, window: &SceneWindow) -> Result<EncoderInputs> {
    window.validate()?;
    if window.context.len() != cfg.context_dim {
        return Err(Error::dim("scene context", cfg.context_dim, window.context.len()));
    }
    let ratio = window.dt / cfg.dt;
    let frames = cfg.encoder_frames.min(window.ego_history.len());
    let ego_hist = &window.ego_history[window.ego_history.len() - frames..];
    let cur = ego_hist[frames - 1].position;
    let ego = ego_hist.iter().map(|s| state_input(s, cur, ratio, cfg)).collect();

    let mut cands: Vec<(f64, Vec<[f64; INPUT_DIM]>)> = window
        .neighbor_histories
        .iter()
        .filter(|h| h.len() >= frames)
        .filter_map(|h| {
            let h = &h[h.len() - frames..];
            let last = h[frames - 1].position;
            let dist = ((last[0] - cur[0]).powi(2) + (last[1] - cur[1]).powi(2)).sqrt();
            (dist <= cfg.neighbor_radius).then(|| (dist, h.iter().map(|s| state_input(s, cur, ratio, cfg)).collect()))
        })
        .collect();
    let by_content = |a: &Vec<[f64; INPUT_DIM]>, b: &Vec<[f64; INPUT_DIM]>| {
        a.iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| by_content(&a.1, &b.1)));
    cands.truncate(cfg.max_neighbors);
    cands.sort_by(|a, b| by_content(&a.1, &b.1));
    let neighbors = (0..frames).map(|k| cands.iter().map(|c| c.1[k]).collect()).collect();
    Ok(EncoderInputs {
        ego,
        neighbors,
        context: window.context.clone(),
    })
}

fn rows_matrix(rows: &[[f64; INPUT_DIM]]) -> Mat {
    Mat::from_fn(rows.len(), INPUT_DIM, |i, j| rows[i][j])
}

/// Scene encoding as a `1 x e` row.
pub fn encode_g<B: Backend>(b: &mut B, p: &Bound<B::V>, cfg: &ModelConfig, window: &SceneWindow) -> Result<B::V> {
    let inputs = encoder_inputs(cfg, window)?;
    let eh = cfg.encoder_hidden;
    let mut h = b.constant(Mat::zeros(1, eh));
    for row in &inputs.ego {
        let x = b.constant(rows_matrix(std::slice::from_ref(row)));
        h = gru(b, p, "enc.ego", &x, &h, None);
    }
    let k = inputs.neighbors.first().map_or(0, Vec::len);
    let pooled = if k == 0 {
        b.constant(Mat::zeros(1, eh))
    } else {
        let mut hn = b.constant(Mat::zeros(k, eh));
        for rows in &inputs.neighbors {
            let x = b.constant(rows_matrix(rows));
            hn = gru(b, p, "enc.nb", &x, &hn, None);
        }
        let keys = b.matmul(&hn, p.get("enc.att.wk"));
        let query = b.matmul(&h, p.get("enc.att.wq"));
        let pre = b.add(&keys, &query);
        let act = b.tanh(&pre);
        let scores = b.matmul(&act, p.get("enc.att.v"));
        let lse = b.log_sum_exp(&scores);
        let centered = b.sub(&scores, &lse);
        let weights = b.exp(&centered);
        let wt = b.transpose(&weights);
        b.matmul(&wt, &hn)
    };
    let mut parts = vec![h, pooled];
    if cfg.context_dim > 0 {
        parts.push(b.constant(Mat::from_row_slice(1, cfg.context_dim, &inputs.context)));
    }
    let cat = b.hcat(&parts);
    let lin = b.matmul(&cat, p.get("enc.proj.w"));
    let lin = b.add(&lin, p.get("enc.proj.b"));
    Ok(b.tanh(&lin))
}

/// Initial decoder state `1 x h` from the encoding.
pub fn decoder_init_g<B: Backend>(b: &mut B, p: &Bound<B::V>, v: &B::V) -> B::V {
    let lin = b.matmul(v, p.get("dec.init.w"));
    let lin = b.add(&lin, p.get("dec.init.b"));
    b.tanh(&lin)
}

/// Encoding contribution to each decoder gate; computed once per rollout.
pub fn gate_context_g<B: Backend>(b: &mut B, p: &Bound<B::V>, v: &B::V) -> GateContext<B::V> {
    GateContext {
        z: b.matmul(v, p.get("dec.cell.vz")),
        r: b.matmul(v, p.get("dec.cell.vr")),
        n: b.matmul(v, p.get("dec.cell.vn")),
    }
}

/// Decoder step on a batch: `vel` is `n x 2` in model units, `h` is `n x h`.
pub fn decoder_step_g<B: Backend>(b: &mut B, p: &Bound<B::V>, cfg: &ModelConfig, ctx: &GateContext<B::V>, vel: &B::V, h: &B::V) -> B::V {
    let x = b.scale(vel, cfg.vel_scale);
    gru(b, p, "dec.cell", &x, h, Some(ctx))
}

/// Feature rows `φ(h)` of shape `n x p`; the last column is the constant 1.
pub fn features_g<B: Backend>(b: &mut B, p: &Bound<B::V>, h: &B::V) -> B::V {
    let n = b.value(h).nrows();
    let lin = b.matmul(h, p.get("head.feat.w"));
    let lin = b.add(&lin, p.get("head.feat.b"));
    let act = b.tanh(&lin);
    let one = b.constant(Mat::from_element(n, 1, 1.0));
    b.hcat(&[act, one])
}

/// Per-output action variances `n x d` through the bounded positive link.
pub fn noise_var_g<B: Backend>(b: &mut B, p: &Bound<B::V>, cfg: &ModelConfig, h: &B::V) -> B::V {
    let lin = b.matmul(h, p.get("head.noise.w"));
    let lin = b.add(&lin, p.get("head.noise.b"));
    let u = b.softplus(&lin);
    bounded_link(b, cfg, &u)
}

fn bounded_link<B: Backend>(b: &mut B, cfg: &ModelConfig, u: &B::V) -> B::V {
    let c = cfg.noise_ceiling;
    let num = b.scale(u, c);
    let den = b.offset(u, c);
    let sat = b.div(&num, &den);
    b.offset(&sat, cfg.noise_floor)
}

/// Value of the noise link at pre-activation `z`.
pub fn noise_link(cfg: &ModelConfig, z: f64) -> f64 {
    let u = softplus(z);
    cfg.noise_floor + u * cfg.noise_ceiling / (cfg.noise_ceiling + u)
}

/// Scales data-unit velocities of a window into model units.
pub fn velocity_ratio(cfg: &ModelConfig, data_dt: f64) -> f64 {
    data_dt / cfg.dt
}

/// `1 x n` matrix holding the entries of `v`.
pub fn row_mat(v: &DVector<f64>) -> Mat {
    Mat::from_iterator(1, v.len(), v.iter().copied())
}

fn row(v: &Mat) -> DVector<f64> {
    v.row(0).transpose()
}

/// Scene encoding of a window.
pub fn encode(window: &SceneWindow, params: &ModelParameters) -> Result<SceneEncoding> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let v = encode_g(&mut b, &p, &params.config, window)?;
    Ok(SceneEncoding { vector: row(&v) })
}

pub fn decoder_init(v: &SceneEncoding, params: &ModelParameters) -> Result<DecoderState> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let vv = encoding_row(&mut b, v, &params.config)?;
    let h = decoder_init_g(&mut b, &p, &vv);
    Ok(DecoderState { hidden: row(&h) })
}

fn encoding_row(b: &mut Eval, v: &SceneEncoding, cfg: &ModelConfig) -> Result<<Eval as Backend>::V> {
    if v.vector.len() != cfg.encoding_dim {
        return Err(Error::dim("scene encoding", cfg.encoding_dim, v.vector.len()));
    }
    Ok(b.constant(row_mat(&v.vector)))
}

fn hidden_row(b: &mut Eval, h: &DecoderState, cfg: &ModelConfig) -> Result<<Eval as Backend>::V> {
    if h.hidden.len() != cfg.decoder_hidden {
        return Err(Error::dim("decoder state", cfg.decoder_hidden, h.hidden.len()));
    }
    Ok(b.constant(row_mat(&h.hidden)))
}

/// Advances the decoder with `state`, whose velocity is in model units.
pub fn decoder_step(state: &AgentState, h: &DecoderState, v: &SceneEncoding, params: &ModelParameters) -> Result<DecoderState> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let cfg = &params.config;
    let vv = encoding_row(&mut b, v, cfg)?;
    let ctx = gate_context_g(&mut b, &p, &vv);
    let hh = hidden_row(&mut b, h, cfg)?;
    let vel = b.constant(Mat::from_row_slice(1, 2, &state.velocity));
    let out = decoder_step_g(&mut b, &p, cfg, &ctx, &vel, &hh);
    Ok(DecoderState { hidden: row(&out) })
}

/// Feature matrix `Φ(h)` of shape `d x p`; every row is the shared feature
/// vector.
pub fn features(h: &DecoderState, params: &ModelParameters) -> Result<DMatrix<f64>> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let hh = hidden_row(&mut b, h, &params.config)?;
    let phi = features_g(&mut b, &p, &hh);
    let d = params.config.output_dim;
    Ok(DMatrix::from_fn(d, phi.ncols(), |_, j| phi[(0, j)]))
}

/// Diagonal action noise `Σ(h)` of shape `d x d`.
pub fn noise_cov(h: &DecoderState, params: &ModelParameters) -> Result<DMatrix<f64>> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let hh = hidden_row(&mut b, h, &params.config)?;
    let var = noise_var_g(&mut b, &p, &params.config, &hh);
    Ok(DMatrix::from_diagonal(&row(&var)))
}

/// Per-output observation model at decoder state `h`.
pub fn observation(h: &DecoderState, params: &ModelParameters) -> Result<FactoredObservation> {
    let mut b = Eval;
    let p = params.bind(&mut b);
    let hh = hidden_row(&mut b, h, &params.config)?;
    let phi = features_g(&mut b, &p, &hh);
    let var = noise_var_g(&mut b, &p, &params.config, &hh);
    let d = params.config.output_dim;
    FactoredObservation::new(DMatrix::from_fn(d, phi.ncols(), |_, j| phi[(0, j)]), row(&var))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelParameters {
        ModelParameters::init(&ModelConfig::with_width(8)).unwrap()
    }

    fn walk(start: [f64; 2], vel: [f64; 2], n: usize, dt: f64) -> Vec<AgentState> {
        (0..n)
            .map(|k| AgentState::new([start[0] + vel[0] * dt * k as f64, start[1] + vel[1] * dt * k as f64], vel))
            .collect()
    }

    fn window_with(neighbors: Vec<Vec<AgentState>>) -> SceneWindow {
        SceneWindow {
            ego_history: walk([0.0, 0.0], [1.0, 0.2], 4, 0.5),
            neighbor_histories: neighbors,
            dt: 0.5,
            ..Default::default()
        }
    }

    #[test]
    fn one_euler_step() {
        let s = AgentState::new([0.0, 0.0], [0.0, 0.0]);
        let out = dynamics_step(&s, [1.0, 2.0], 0.4).unwrap();
        assert!((out.position[0] - 0.4).abs() < 1e-15 && (out.position[1] - 0.8).abs() < 1e-15);
        assert_eq!(out.velocity, [1.0, 2.0]);
    }

    #[test]
    fn zero_action_rests() {
        let s = AgentState::new([3.0, -1.0], [2.0, 0.0]);
        let out = dynamics_step(&s, [0.0, 0.0], 0.5).unwrap();
        assert_eq!(out.position, s.position);
        assert_eq!(out.velocity, [0.0, 0.0]);
    }

    #[test]
    fn repeated_constant_action_is_linear() {
        let a = [0.3, -0.7];
        let mut s = AgentState::default();
        for _ in 0..12 {
            s = dynamics_step(&s, a, 0.25).unwrap();
        }
        assert!((s.position[0] - 12.0 * 0.25 * a[0]).abs() < 1e-12);
        assert!((s.position[1] - 12.0 * 0.25 * a[1]).abs() < 1e-12);
    }

    #[test]
    fn non_finite_action_rejected() {
        assert!(dynamics_step(&AgentState::default(), [f64::NAN, 0.0], 0.1).is_err());
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a, b);
        let mut cfg = ModelConfig::with_width(8);
        cfg.init_seed = 1;
        assert_ne!(ModelParameters::init(&cfg).unwrap(), a);
    }

    #[test]
    fn init_noise_matches_requested_variance() {
        let p = small();
        let h = DecoderState { hidden: DVector::zeros(8) };
        let s = noise_cov(&h, &p).unwrap();
        assert!((s[(0, 0)] - p.config.init_noise_var).abs() < 1e-12);
    }

    #[test]
    fn noise_respects_floor_and_is_monotone() {
        let cfg = ModelConfig::default();
        let mut prev = 0.0;
        for k in -400..400 {
            let v = noise_link(&cfg, k as f64 * 0.1);
            assert!(v >= cfg.noise_floor && v <= cfg.noise_floor + cfg.noise_ceiling);
            assert!(v >= prev);
            prev = v;
        }
        assert!(noise_link(&cfg, -1e3) >= 1e-6);
    }

    #[test]
    fn feature_rows_share_backbone() {
        let p = small();
        let h = DecoderState { hidden: DVector::from_fn(8, |i, _| (i as f64 * 0.3).sin()) };
        let phi = features(&h, &p).unwrap();
        assert_eq!(phi.row(0), phi.row(1));
        assert_eq!(phi[(0, 7)], 1.0);
    }

    #[test]
    fn empty_history_rejected() {
        let w = SceneWindow { dt: 0.5, ..Default::default() };
        assert!(matches!(encode(&w, &small()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn neighbor_permutation_is_exact() {
        let p = small();
        let n1 = walk([1.0, 1.0], [0.5, 0.0], 4, 0.5);
        let n2 = walk([-1.0, 0.5], [0.0, 1.0], 4, 0.5);
        let n3 = walk([0.5, -1.5], [1.0, 1.0], 4, 0.5);
        let a = encode(&window_with(vec![n1.clone(), n2.clone(), n3.clone()]), &p).unwrap();
        let b = encode(&window_with(vec![n3, n1, n2]), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn no_neighbors_equals_far_neighbors() {
        let p = small();
        let far = walk([100.0, 100.0], [0.5, 0.0], 4, 0.5);
        let a = encode(&window_with(vec![]), &p).unwrap();
        let b = encode(&window_with(vec![far]), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn translation_invariant_encoding() {
        let p = small();
        let nb = walk([1.0, 1.0], [0.5, 0.0], 4, 0.5);
        let w = window_with(vec![nb]);
        let shift = |s: &AgentState| AgentState { position: [s.position[0] + 17.25, s.position[1] - 3.5], ..*s };
        let mut moved = w.clone();
        moved.ego_history = w.ego_history.iter().map(shift).collect();
        moved.neighbor_histories = w.neighbor_histories.iter().map(|h| h.iter().map(shift).collect()).collect();
        let a = encode(&w, &p).unwrap();
        let b = encode(&moved, &p).unwrap();
        assert!((a.vector - b.vector).amax() < 1e-12);
    }

    #[test]
    fn decoder_init_is_lipschitz() {
        let p = small();
        let v = SceneEncoding { vector: DVector::from_fn(8, |i, _| 0.1 * i as f64 - 0.3) };
        let h0 = decoder_init(&v, &p).unwrap();
        for delta in [1e-3, 1e-5] {
            let mut vd = v.clone();
            vd.vector[2] += delta;
            let hd = decoder_init(&vd, &p).unwrap();
            let change = (hd.hidden - &h0.hidden).norm();
            assert!(change <= 4.0 * delta, "change {change} for delta {delta}");
        }
        let zero = SceneEncoding { vector: DVector::zeros(8) };
        let hz = decoder_init(&zero, &p).unwrap();
        let expected = p.get("dec.init.b").unwrap().map(f64::tanh);
        assert_eq!(hz.hidden, expected.row(0).transpose());
    }

    #[test]
    fn hidden_state_stays_bounded() {
        let p = small();
        let v = SceneEncoding { vector: DVector::from_element(8, 0.5) };
        let mut h = decoder_init(&v, &p).unwrap();
        let s = AgentState::new([0.0, 0.0], [50.0, -80.0]);
        for _ in 0..100 {
            h = decoder_step(&s, &h, &v, &p).unwrap();
            assert!(h.hidden.iter().all(|x| x.is_finite() && x.abs() <= 1.0));
        }
    }

    #[test]
    fn prior_round_trips_through_parameters() {
        let mut p = small();
        let mut belief = p.prior_belief();
        belief.dims[0].mean[3] = 0.7;
        belief.dims[1].cov[(0, 1)] = 0.05;
        belief.dims[1].cov[(1, 0)] = 0.05;
        p.set_prior(&belief).unwrap();
        let back = p.prior_belief();
        for j in 0..2 {
            assert!((&back.dims[j].mean - &belief.dims[j].mean).amax() < 1e-14);
            assert!((&back.dims[j].cov - &belief.dims[j].cov).amax() < 1e-12);
        }
    }

    #[test]
    fn records_round_trip() {
        let p = small();
        let back = ModelParameters::from_records(&p.config, &p.to_records()).unwrap();
        assert_eq!(back, p);
        let mut recs = p.to_records();
        recs.pop();
        assert!(ModelParameters::from_records(&p.config, &recs).is_err());
    }
}
