//! Synthetic multi-domain trajectories, file ingestion, resampling and
//! window extraction.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AgentState, SceneWindow};
use crate::training::Episode;

/// Parameters of a synthetic pedestrian domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    /// Recording interval in seconds.
    pub dt: f64,
    pub speed_scale: f64,
    /// Nominal walking speed before scaling, m/s.
    pub nominal_speed: f64,
    /// Relative per-agent spread of the desired speed.
    pub speed_jitter: f64,
    /// Rotation rate of the desired heading, rad/s.
    pub turn_bias: f64,
    pub interaction_radius: f64,
    pub interaction_gain: f64,
    /// Side of the square region holding start and goal positions, m.
    pub arena: f64,
    /// Minimum start-to-goal distance, m.
    pub min_goal_distance: f64,
    pub agents_min: usize,
    pub agents_max: usize,
    /// Recorded frames per scene.
    pub frames: usize,
    /// Velocity relaxation time, s.
    pub relaxation: f64,
    /// Stationary standard deviation of the velocity perturbation, m/s.
    pub velocity_noise: f64,
    /// Correlation time of the velocity perturbation, s.
    pub noise_time: f64,
    /// Standard deviation of additive position measurement noise, m.
    pub position_noise: f64,
    /// Integration substeps per recorded frame.
    pub substeps: usize,
    pub seed: u64,
}

impl Default for DomainSpec {
    fn default() -> Self {
        Self {
            name: "base".into(),
            dt: 0.5,
            speed_scale: 1.0,
            nominal_speed: 1.2,
            speed_jitter: 0.15,
            turn_bias: 0.0,
            interaction_radius: 2.0,
            interaction_gain: 3.0,
            arena: 16.0,
            min_goal_distance: 8.0,
            agents_min: 3,
            agents_max: 6,
            frames: 40,
            relaxation: 1.0,
            velocity_noise: 0.15,
            noise_time: 2.0,
            position_noise: 0.02,
            substeps: 10,
            seed: 0,
        }
    }
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("domain {}: dt must be positive", self.name)));
        }
        let non_negative = [
            self.speed_scale,
            self.nominal_speed,
            self.speed_jitter,
            self.interaction_radius,
            self.interaction_gain,
            self.velocity_noise,
            self.position_noise,
            self.min_goal_distance,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config(format!("domain {}: scales must be non-negative", self.name)));
        }
        if !(self.relaxation > 0.0 && self.noise_time > 0.0 && self.arena > 0.0) || !self.turn_bias.is_finite() {
            return Err(Error::Config(format!("domain {}: time constants and arena must be positive", self.name)));
        }
        if self.agents_max == 0 || self.agents_min > self.agents_max {
            return Err(Error::Config(format!("domain {}: infeasible agent count range", self.name)));
        }
        if self.frames == 0 || self.substeps == 0 {
            return Err(Error::Config(format!("domain {}: frames and substeps must be positive", self.name)));
        }
        Ok(())
    }

    /// Named single domains: `base`, `fast`, `curved`, `crowded`, `dt-0.1`.
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self::default();
        let spec = match name {
            "base" => base,
            "fast" => Self { name: "fast".into(), speed_scale: 1.5, ..base },
            "curved" => Self { name: "curved".into(), turn_bias: 0.35, ..base },
            "crowded" => Self {
                name: "crowded".into(),
                interaction_radius: 3.0,
                interaction_gain: 6.0,
                agents_min: 8,
                agents_max: 12,
                arena: 10.0,
                min_goal_distance: 5.0,
                ..base
            },
            "dt-0.1" => Self { name: "dt-0.1".into(), dt: 0.1, frames: 200, ..base },
            other => return Err(Error::Config(format!("unknown domain preset {other}"))),
        };
        Ok(spec)
    }
}

/// Source and target domains of a canonical transfer experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferPair {
    pub name: String,
    pub source: DomainSpec,
    pub target: DomainSpec,
}

/// `speed-shift`, `turn-shift`, `freq-shift` or `interaction-shift`.
pub fn transfer_preset(name: &str) -> Result<TransferPair> {
    let (source, target) = match name {
        "speed-shift" => (DomainSpec::preset("base")?, DomainSpec::preset("fast")?),
        "turn-shift" => (DomainSpec::preset("base")?, DomainSpec::preset("curved")?),
        "freq-shift" => (DomainSpec::preset("base")?, DomainSpec::preset("dt-0.1")?),
        "interaction-shift" => (
            DomainSpec { interaction_gain: 0.0, name: "sparse".into(), ..DomainSpec::preset("base")? },
            DomainSpec::preset("crowded")?,
        ),
        other => return Err(Error::Config(format!("unknown transfer preset {other}"))),
    };
    Ok(TransferPair { name: name.into(), source, target })
}

/// One agent's uniformly sampled track.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Track {
    pub agent_id: u64,
    /// Frame index of the first state; time is `frame * dt`.
    pub start_frame: i64,
    pub states: Vec<AgentState>,
    /// Set for degenerate tracks such as a single observation.
    #[serde(default)]
    pub flagged: bool,
}

impl Track {
    pub fn end_frame(&self) -> i64 {
        self.start_frame + self.states.len() as i64 - 1
    }

    /// State at absolute frame `f`, if present.
    pub fn at(&self, f: i64) -> Option<&AgentState> {
        let k = f - self.start_frame;
        if k < 0 {
            return None;
        }
        self.states.get(k as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub scene_id: u64,
    pub tracks: Vec<Track>,
}

/// Trajectories on a common time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryDataset {
    pub scenes: Vec<Scene>,
    pub dt: f64,
    /// Where the data came from: a spec name or a source file hash.
    pub provenance: String,
}

impl TrajectoryDataset {
    pub fn agent_count(&self) -> usize {
        self.scenes.iter().map(|s| s.tracks.len()).sum()
    }

    pub fn record_count(&self) -> usize {
        self.scenes.iter().flat_map(|s| &s.tracks).map(|t| t.states.len()).sum()
    }

    /// Mean speed over all finite-difference velocities after the first frame
    /// of each track.
    pub fn mean_speed(&self) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for t in self.scenes.iter().flat_map(|s| &s.tracks) {
            for s in t.states.iter().skip(1) {
                sum += s.velocity[0].hypot(s.velocity[1]);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }

    /// Splits scenes into a leading part with `fraction` of the scenes and the rest.
    pub fn split(&self, fraction: f64) -> (TrajectoryDataset, TrajectoryDataset) {
        let k = ((self.scenes.len() as f64) * fraction).round() as usize;
        let k = k.min(self.scenes.len());
        let part = |scenes: &[Scene]| TrajectoryDataset {
            scenes: scenes.to_vec(),
            dt: self.dt,
            provenance: self.provenance.clone(),
        };
        (part(&self.scenes[..k]), part(&self.scenes[k..]))
    }

    /// One line per observation: `scene agent frame x y`.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for s in &self.scenes {
            for t in &s.tracks {
                for (k, st) in t.states.iter().enumerate() {
                    out.push_str(&format!(
                        "{} {} {} {:.17e} {:.17e}\n",
                        s.scene_id,
                        t.agent_id,
                        t.start_frame + k as i64,
                        st.position[0],
                        st.position[1]
                    ));
                }
            }
        }
        out
    }
}

/// Velocities by backward differences; the first frame uses the forward
/// difference, and a single frame gets zero velocity.
pub fn finite_difference_states(positions: &[[f64; 2]], dt: f64) -> Vec<AgentState> {
    let n = positions.len();
    (0..n)
        .map(|k| {
            let v = if n < 2 {
                [0.0, 0.0]
            } else {
                let (a, b) = if k == 0 { (0, 1) } else { (k - 1, k) };
                [(positions[b][0] - positions[a][0]) / dt, (positions[b][1] - positions[a][1]) / dt]
            };
            let acc = if k >= 2 {
                let p = &positions;
                [(p[k][0] - 2.0 * p[k - 1][0] + p[k - 2][0]) / (dt * dt), (p[k][1] - 2.0 * p[k - 1][1] + p[k - 2][1]) / (dt * dt)]
            } else {
                [0.0, 0.0]
            };
            AgentState { acceleration: acc, ..AgentState::new(positions[k], v) }
        })
        .collect()
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(StandardNormal)
}

/// Social-force style simulation of `scenes` scenes.
///
/// Each agent starts at rest speed toward a sampled goal, its desired heading
/// rotates at `turn_bias`, and its velocity relaxes toward the desired
/// velocity plus a correlated perturbation, while neighbors within
/// `interaction_radius` push it away.
pub fn generate<R: Rng + ?Sized>(spec: &DomainSpec, scenes: usize, rng: &mut R) -> Result<TrajectoryDataset> {
    spec.validate()?;
    let mut out = Vec::with_capacity(scenes);
    for scene_id in 0..scenes as u64 {
        let n = rng.random_range(spec.agents_min..=spec.agents_max);
        if n == 0 {
            return Err(Error::Config(format!("domain {}: scene with zero agents", spec.name)));
        }
        out.push(simulate_scene(spec, scene_id, n, rng));
    }
    Ok(TrajectoryDataset {
        scenes: out,
        dt: spec.dt,
        provenance: format!("synthetic:{}", spec.name),
    })
}

/// Initial condition of one simulated agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentInit {
    pub position: [f64; 2],
    /// Initial desired heading, rad.
    pub heading: f64,
    /// Desired speed, m/s.
    pub speed: f64,
}

fn simulate_scene<R: Rng + ?Sized>(spec: &DomainSpec, scene_id: u64, n: usize, rng: &mut R) -> Scene {
    let half = spec.arena / 2.0;
    let mut agents = Vec::with_capacity(n);
    for _ in 0..n {
        let start = [rng.random_range(-half..half), rng.random_range(-half..half)];
        let mut goal;
        let mut tries = 0;
        loop {
            goal = [rng.random_range(-half..half), rng.random_range(-half..half)];
            tries += 1;
            if (goal[0] - start[0]).hypot(goal[1] - start[1]) >= spec.min_goal_distance || tries > 100 {
                break;
            }
        }
        agents.push(AgentInit {
            position: start,
            heading: (goal[1] - start[1]).atan2(goal[0] - start[0]),
            speed: spec.speed_scale * spec.nominal_speed * (1.0 + spec.speed_jitter * normal(rng)).max(0.0),
        });
    }
    simulate_agents(spec, scene_id, &agents, rng)
}

/// Runs the dynamics of `spec` from explicit initial conditions.
pub fn simulate_agents<R: Rng + ?Sized>(spec: &DomainSpec, scene_id: u64, agents: &[AgentInit], rng: &mut R) -> Scene {
    let n = agents.len();
    let mut pos: Vec<[f64; 2]> = agents.iter().map(|a| a.position).collect();
    let mut heading: Vec<f64> = agents.iter().map(|a| a.heading).collect();
    let speed: Vec<f64> = agents.iter().map(|a| a.speed).collect();
    let mut vel: Vec<[f64; 2]> = (0..n).map(|i| [speed[i] * heading[i].cos(), speed[i] * heading[i].sin()]).collect();
    let ou_sd = spec.velocity_noise * spec.speed_scale;
    let mut pert: Vec<[f64; 2]> = (0..n).map(|_| [ou_sd * normal(rng), ou_sd * normal(rng)]).collect();

    let h = spec.dt / spec.substeps as f64;
    let decay = (-h / spec.noise_time).exp();
    let kick = ou_sd * (1.0 - decay * decay).sqrt();
    let mut recorded: Vec<Vec<[f64; 2]>> = vec![Vec::with_capacity(spec.frames); n];
    for frame in 0..spec.frames {
        for (i, r) in recorded.iter_mut().enumerate() {
            let noise = if spec.position_noise > 0.0 { [spec.position_noise * normal(rng), spec.position_noise * normal(rng)] } else { [0.0, 0.0] };
            r.push([pos[i][0] + noise[0], pos[i][1] + noise[1]]);
        }
        if frame + 1 == spec.frames {
            break;
        }
        for _ in 0..spec.substeps {
            let mut acc = vec![[0.0; 2]; n];
            for i in 0..n {
                let target = [speed[i] * heading[i].cos() + pert[i][0], speed[i] * heading[i].sin() + pert[i][1]];
                acc[i] = [(target[0] - vel[i][0]) / spec.relaxation, (target[1] - vel[i][1]) / spec.relaxation];
                if spec.interaction_gain > 0.0 {
                    for j in 0..n {
                        if i == j {
                            continue;
                        }
                        let dx = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
                        let dist = dx[0].hypot(dx[1]);
                        if dist < spec.interaction_radius && dist > 1e-9 {
                            let f = spec.interaction_gain * (spec.interaction_radius - dist) / (spec.interaction_radius * dist);
                            acc[i][0] += f * dx[0] * speed[i].max(0.1);
                            acc[i][1] += f * dx[1] * speed[i].max(0.1);
                        }
                    }
                }
            }
            for i in 0..n {
                vel[i] = [vel[i][0] + h * acc[i][0], vel[i][1] + h * acc[i][1]];
                pos[i] = [pos[i][0] + h * vel[i][0], pos[i][1] + h * vel[i][1]];
                heading[i] += spec.turn_bias * h;
                if ou_sd > 0.0 {
                    pert[i] = [decay * pert[i][0] + kick * normal(rng), decay * pert[i][1] + kick * normal(rng)];
                }
            }
        }
    }
    let tracks = recorded
        .into_iter()
        .enumerate()
        .map(|(i, p)| Track {
            agent_id: i as u64,
            start_frame: 0,
            flagged: p.len() < 2,
            states: finite_difference_states(&p, spec.dt),
        })
        .collect();
    Scene { scene_id, tracks }
}

/// Layout of an input trajectory file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    /// Whitespace-separated `frame agent x y`, or `scene agent frame x y`
    /// with five columns.
    Whitespace,
    /// Comma-separated with a header naming `frame`, `agent` (or
    /// `agent_id`/`ped`/`ped_id`), `x`, `y` and optionally `scene`.
    Csv,
}

struct RawRecord {
    scene: u64,
    agent: u64,
    frame: i64,
    pos: [f64; 2],
    line: usize,
}

fn parse_field<T: std::str::FromStr>(s: &str, what: &str, path: &Path, line: usize) -> Result<T> {
    s.trim().parse::<T>().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        message: format!("cannot parse {what} from {s:?}"),
    })
}

/// Integer id from a field such as `3` or `3.0`.
fn parse_id(s: &str, what: &str, path: &Path, line: usize) -> Result<i64> {
    if let Ok(v) = s.trim().parse::<i64>() {
        return Ok(v);
    }
    let f: f64 = parse_field(s, what, path, line)?;
    if f.fract() != 0.0 || !f.is_finite() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line,
            message: format!("{what} {s:?} is not an integer"),
        });
    }
    Ok(f as i64)
}

fn parse_whitespace(text: &str, path: &Path) -> Result<Vec<RawRecord>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let f: Vec<&str> = content.split_whitespace().collect();
        let (scene, agent, frame, x, y) = match f.len() {
            4 => ("0", f[1], f[0], f[2], f[3]),
            5 => (f[0], f[1], f[2], f[3], f[4]),
            k => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line,
                    message: format!("expected 4 or 5 fields, found {k}"),
                })
            }
        };
        out.push(RawRecord {
            scene: parse_id(scene, "scene id", path, line)? as u64,
            agent: parse_id(agent, "agent id", path, line)? as u64,
            frame: parse_id(frame, "frame", path, line)?,
            pos: [parse_field(x, "x", path, line)?, parse_field(y, "y", path, line)?],
            line,
        });
    }
    Ok(out)
}

fn parse_csv(text: &str, path: &Path) -> Result<Vec<RawRecord>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse { path: path.to_path_buf(), line: 1, message: e.to_string() })?
        .clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let find = |names: &[&str]| headers.iter().position(|h| names.iter().any(|n| h.eq_ignore_ascii_case(n)));
    let missing = |what: &str| Error::Parse { path: path.to_path_buf(), line: 1, message: format!("header lacks a {what} column") };
    let frame_c = find(&["frame", "frame_id"]).ok_or_else(|| missing("frame"))?;
    let agent_c = find(&["agent", "agent_id", "ped", "ped_id"]).ok_or_else(|| missing("agent"))?;
    let x_c = find(&["x"]).ok_or_else(|| missing("x"))?;
    let y_c = find(&["y"]).ok_or_else(|| missing("y"))?;
    let scene_c = find(&["scene", "scene_id"]);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Parse { path: path.to_path_buf(), line, message: e.to_string() })?;
        let get = |c: usize| rec.get(c).ok_or_else(|| Error::Parse { path: path.to_path_buf(), line, message: format!("missing column {}", c + 1) });
        out.push(RawRecord {
            scene: match scene_c {
                Some(c) => parse_id(get(c)?, "scene id", path, line)? as u64,
                None => 0,
            },
            agent: parse_id(get(agent_c)?, "agent id", path, line)? as u64,
            frame: parse_id(get(frame_c)?, "frame", path, line)?,
            pos: [parse_field(get(x_c)?, "x", path, line)?, parse_field(get(y_c)?, "y", path, line)?],
            line,
        });
    }
    Ok(out)
}

/// Reads a trajectory file. `dt` is the time between consecutive frames of
/// the file's frame stride.
pub fn ingest(path: &Path, format: FileFormat, dt: f64) -> Result<TrajectoryDataset> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text, path, format, dt)
}

/// [`ingest`] on in-memory text; `path` is used for messages.
pub fn ingest_str(text: &str, path: &Path, format: FileFormat, dt: f64) -> Result<TrajectoryDataset> {
    if !(dt > 0.0) {
        return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
    }
    let records = match format {
        FileFormat::Whitespace => parse_whitespace(text, path)?,
        FileFormat::Csv => parse_csv(text, path)?,
    };
    use sha2::{Digest, Sha256};
    let provenance = format!("file:{}", hex::encode(Sha256::digest(text.as_bytes())));
    if let Some(r) = records.iter().find(|r| !(r.pos[0].is_finite() && r.pos[1].is_finite())) {
        return Err(Error::Parse { path: path.to_path_buf(), line: r.line, message: "non-finite coordinate".into() });
    }

    let mut groups: BTreeMap<(u64, u64), Vec<&RawRecord>> = BTreeMap::new();
    for r in &records {
        groups.entry((r.scene, r.agent)).or_default().push(r);
    }
    for g in groups.values_mut() {
        g.sort_by_key(|r| r.frame);
    }
    let mut stride: Option<i64> = None;
    for ((_, agent), g) in &groups {
        for w in g.windows(2) {
            let gap = w[1].frame - w[0].frame;
            if gap == 0 {
                return Err(Error::Parse { path: path.to_path_buf(), line: w[1].line, message: format!("agent {agent} has a duplicate frame {}", w[1].frame) });
            }
            stride = Some(stride.map_or(gap, |s| s.min(gap)));
        }
    }
    let stride = stride.unwrap_or(1);
    let origin = records.iter().map(|r| r.frame).min().unwrap_or(0);

    let mut scenes: BTreeMap<u64, Vec<Track>> = BTreeMap::new();
    for ((scene, agent), g) in groups {
        if let Some(w) = g.windows(2).find(|w| w[1].frame - w[0].frame != stride) {
            return Err(Error::InvalidInput(format!(
                "agent {agent} in scene {scene} has non-uniform frame spacing ({} then {}, stride {stride})",
                w[0].frame, w[1].frame
            )));
        }
        if (g[0].frame - origin) % stride != 0 {
            return Err(Error::InvalidInput(format!("agent {agent} in scene {scene} is off the common frame grid")));
        }
        let positions: Vec<[f64; 2]> = g.iter().map(|r| r.pos).collect();
        scenes.entry(scene).or_default().push(Track {
            agent_id: agent,
            start_frame: (g[0].frame - origin) / stride,
            flagged: positions.len() < 2,
            states: finite_difference_states(&positions, dt),
        });
    }
    Ok(TrajectoryDataset {
        scenes: scenes.into_iter().map(|(scene_id, tracks)| Scene { scene_id, tracks }).collect(),
        dt,
        provenance,
    })
}

/// Linearly interpolates every track onto the grid of `target_dt`.
pub fn resample(dataset: &TrajectoryDataset, target_dt: f64) -> Result<TrajectoryDataset> {
    if !(target_dt > 0.0) {
        return Err(Error::InvalidInput(format!("target dt must be positive, got {target_dt}")));
    }
    let max_span = dataset
        .scenes
        .iter()
        .flat_map(|s| &s.tracks)
        .map(|t| (t.states.len().saturating_sub(1)) as f64 * dataset.dt)
        .fold(0.0, f64::max);
    if dataset.agent_count() > 0 && target_dt > max_span + 1e-9 {
        return Err(Error::InvalidInput(format!("target dt {target_dt} exceeds the longest track span {max_span}")));
    }
    let snap = |x: f64| {
        let r = x.round();
        if (x - r).abs() < 1e-9 {
            r
        } else {
            x
        }
    };
    let scenes = dataset
        .scenes
        .iter()
        .map(|scene| {
            let tracks = scene
                .tracks
                .iter()
                .filter_map(|t| {
                    let t0 = t.start_frame as f64 * dataset.dt;
                    let t1 = t.end_frame() as f64 * dataset.dt;
                    let first = snap(t0 / target_dt).ceil() as i64;
                    let last = snap(t1 / target_dt).floor() as i64;
                    if last < first {
                        return None;
                    }
                    let positions: Vec<[f64; 2]> = (first..=last)
                        .map(|m| {
                            let u = snap((m as f64 * target_dt - t0) / dataset.dt).max(0.0);
                            let k = (u.floor() as usize).min(t.states.len() - 1);
                            let frac = u - k as f64;
                            let a = t.states[k].position;
                            if frac <= 0.0 || k + 1 >= t.states.len() {
                                a
                            } else {
                                let b = t.states[k + 1].position;
                                [a[0] + frac * (b[0] - a[0]), a[1] + frac * (b[1] - a[1])]
                            }
                        })
                        .collect();
                    Some(Track {
                        agent_id: t.agent_id,
                        start_frame: first,
                        flagged: positions.len() < 2,
                        states: finite_difference_states(&positions, target_dt),
                    })
                })
                .collect();
            Scene { scene_id: scene.scene_id, tracks }
        })
        .collect();
    Ok(TrajectoryDataset {
        scenes,
        dt: target_dt,
        provenance: dataset.provenance.clone(),
    })
}

/// Histories of the other agents of `scene` aligned to end at `frame`,
/// starting no earlier than `from`; sorted by agent id.
fn neighbor_histories(scene: &Scene, ego: u64, from: i64, frame: i64) -> Vec<Vec<AgentState>> {
    let mut others: Vec<&Track> = scene.tracks.iter().filter(|t| t.agent_id != ego && t.at(frame).is_some()).collect();
    others.sort_by_key(|t| t.agent_id);
    others
        .into_iter()
        .map(|t| {
            let start = from.max(t.start_frame);
            (start..=frame).filter_map(|f| t.at(f).copied()).collect()
        })
        .collect()
}

/// Sliding windows with up to `history` past frames and exactly `horizon`
/// future frames, ordered by scene, agent and frame.
///
/// A window needs at least two history frames; windows with fewer than
/// `history + 1` are flagged as short.
pub fn extract_windows(dataset: &TrajectoryDataset, history: usize, horizon: usize) -> Vec<SceneWindow> {
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        let mut tracks: Vec<&Track> = scene.tracks.iter().collect();
        tracks.sort_by_key(|t| t.agent_id);
        for t in tracks {
            let len = t.states.len();
            if len < 2 + horizon {
                continue;
            }
            for c in 1..len - horizon {
                let h0 = c.saturating_sub(history);
                let frame = t.start_frame + c as i64;
                out.push(SceneWindow {
                    scene_id: scene.scene_id,
                    agent_id: t.agent_id,
                    frame,
                    ego_history: t.states[h0..=c].to_vec(),
                    neighbor_histories: neighbor_histories(scene, t.agent_id, t.start_frame + h0 as i64, frame),
                    context: Vec::new(),
                    future: t.states[c + 1..=c + horizon].to_vec(),
                    dt: dataset.dt,
                    short_history: c - h0 < history,
                });
            }
        }
    }
    out
}

/// How tracks are cut into training episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub encoder_frames: usize,
    pub observed: usize,
    pub horizon: usize,
    /// Frames between consecutive episode starts of one agent.
    pub stride: usize,
}

impl EpisodeSpec {
    pub fn frames(&self) -> usize {
        self.encoder_frames + self.observed + self.horizon
    }
}

/// Episodes cut from every track, ordered by scene, agent and start frame.
pub fn episodes(dataset: &TrajectoryDataset, spec: &EpisodeSpec) -> Result<Vec<Episode>> {
    if spec.encoder_frames == 0 || spec.horizon == 0 || spec.stride == 0 {
        return Err(Error::Config("episode encoder frames, horizon and stride must be positive".into()));
    }
    let total = spec.frames();
    let mut out = Vec::new();
    for scene in &dataset.scenes {
        let mut tracks: Vec<&Track> = scene.tracks.iter().collect();
        tracks.sort_by_key(|t| t.agent_id);
        for t in tracks {
            let mut s = 0;
            while s + total <= t.states.len() {
                let c = s + spec.encoder_frames - 1;
                let frame = t.start_frame + c as i64;
                out.push(Episode {
                    window: SceneWindow {
                        scene_id: scene.scene_id,
                        agent_id: t.agent_id,
                        frame,
                        ego_history: t.states[s..=c].to_vec(),
                        neighbor_histories: neighbor_histories(scene, t.agent_id, t.start_frame + s as i64, frame),
                        context: Vec::new(),
                        future: Vec::new(),
                        dt: dataset.dt,
                        short_history: false,
                    },
                    stream: t.states[c + 1..s + total].to_vec(),
                    anchors: vec![spec.observed],
                });
                s += spec.stride;
            }
        }
    }
    Ok(out)
}

/// Seeded dataset for a domain, using the domain's own seed.
pub fn generate_seeded(spec: &DomainSpec, scenes: usize) -> Result<TrajectoryDataset> {
    generate(spec, scenes, &mut ChaCha8Rng::seed_from_u64(spec.seed))
}
