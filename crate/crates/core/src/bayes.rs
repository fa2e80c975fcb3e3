//! Gaussian beliefs over the adaptive last layer and their exact filter
//! updates.
//!
//! The model is `y = Φ θ + ε`, `ε ~ N(0, Σ_ε)`, with the last layer drifting as
//! `θ' = A θ + b + ε_θ`, `ε_θ ~ N(0, diag(q))`. Prediction and correction are
//! the usual Kalman recursions over θ.
//!
//! Two layouts are supported. [`LastLayerBelief`] is a single joint belief
//! with a full covariance. [`FactoredBelief`] keeps one independent belief
//! per output dimension, which is the layout the forecaster uses: every
//! output dimension shares the same feature row structure and the filter cost
//! stays quadratic in the feature count.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian belief `N(mean, cov)` over a length-p last layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LastLayerBelief {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub step: u64,
}

impl LastLayerBelief {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let p = mean.len();
        if cov.shape() != (p, p) {
            return Err(Error::dim("belief covariance", format!("{p}x{p}"), shape(&cov)));
        }
        Ok(Self { mean, cov, step: 0 })
    }

    pub fn isotropic(p: usize, variance: f64) -> Self {
        Self {
            mean: DVector::zeros(p),
            cov: DMatrix::identity(p, p) * variance,
            step: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks symmetry and positive semi-definiteness up to round-off.
    pub fn check_invariants(&self) -> Result<()> {
        let asym = (&self.cov - self.cov.transpose()).amax();
        if asym > 1e-10 {
            return Err(Error::Numerical(format!(
                "belief covariance asymmetric by {asym:e}"
            )));
        }
        let eig = SymmetricEigen::new(self.cov.clone());
        let min = eig.eigenvalues.min();
        if min < -1e-10 {
            return Err(Error::Numerical(format!(
                "belief covariance has eigenvalue {min:e}"
            )));
        }
        Ok(())
    }
}

/// Last-layer dynamics `θ' = A θ + b + ε_θ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamDynamics {
    pub transition: DMatrix<f64>,
    pub offset: DVector<f64>,
    /// Diagonal of the process noise covariance.
    pub process_noise: DVector<f64>,
}

impl ParamDynamics {
    pub fn identity(p: usize) -> Self {
        Self::random_walk(DVector::zeros(p))
    }

    pub fn random_walk(process_noise: DVector<f64>) -> Self {
        let p = process_noise.len();
        Self {
            transition: DMatrix::identity(p, p),
            offset: DVector::zeros(p),
            process_noise,
        }
    }

    pub fn dim(&self) -> usize {
        self.offset.len()
    }

    pub fn has_diagonal_transition(&self) -> bool {
        let a = &self.transition;
        (0..a.ncols()).all(|j| (0..a.nrows()).all(|i| i == j || a[(i, j)] == 0.0))
    }

    fn validate(&self, p: usize) -> Result<()> {
        if self.transition.shape() != (p, p) {
            return Err(Error::dim("transition", format!("{p}x{p}"), shape(&self.transition)));
        }
        if self.offset.len() != p {
            return Err(Error::dim("offset", p, self.offset.len()));
        }
        if self.process_noise.len() != p {
            return Err(Error::dim("process noise", p, self.process_noise.len()));
        }
        if self.process_noise.iter().any(|&q| !(q >= 0.0)) {
            return Err(Error::InvalidInput(
                "process noise entries must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Observation `y = Φ θ + ε` with `Φ` of shape d x p and noise covariance d x d.
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationModel {
    pub features: DMatrix<f64>,
    pub noise: DMatrix<f64>,
}

impl ObservationModel {
    pub fn new(features: DMatrix<f64>, noise: DMatrix<f64>) -> Result<Self> {
        let d = features.nrows();
        if noise.shape() != (d, d) {
            return Err(Error::dim("observation noise", format!("{d}x{d}"), shape(&noise)));
        }
        if (0..d).any(|i| !(noise[(i, i)] > 0.0)) {
            return Err(Error::InvalidInput(
                "observation noise diagonal must be positive".into(),
            ));
        }
        Ok(Self { features, noise })
    }

    fn check(&self, p: usize) -> Result<()> {
        if self.features.ncols() != p {
            return Err(Error::dim("feature columns", p, self.features.ncols()));
        }
        let d = self.features.nrows();
        if self.noise.shape() != (d, d) {
            return Err(Error::dim("observation noise", format!("{d}x{d}"), shape(&self.noise)));
        }
        Ok(())
    }
}

/// Intermediate quantities of a correction.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrectionTrace {
    pub innovation_cov: DMatrix<f64>,
    pub gain: DMatrix<f64>,
    pub innovation: DVector<f64>,
}

/// How the posterior covariance is formed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceUpdate {
    /// `S - K (Φ S)` followed by symmetrization.
    #[default]
    Standard,
    /// `(I - KΦ) S (I - KΦ)ᵀ + K Σ_ε Kᵀ`.
    Joseph,
}

/// Multivariate Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Gaussian {
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        let d = self.mean.len();
        if x.len() != d {
            return Err(Error::dim("gaussian argument", d, x.len()));
        }
        let chol = factor_spd(&self.cov, "predictive covariance")?;
        let r = x - &self.mean;
        let w = chol.solve(&r);
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(-0.5 * (d as f64 * LN_2PI + logdet + r.dot(&w)))
    }
}

/// Cholesky factorization with a single `1e-9 I` jitter retry.
fn factor_spd(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok(c);
    }
    let n = m.nrows();
    let jittered = m + DMatrix::identity(n, n) * 1e-9;
    Cholesky::new(jittered).ok_or_else(|| {
        let diag_min = (0..n).map(|i| m[(i, i)]).fold(f64::INFINITY, f64::min);
        Error::Numerical(format!(
            "{what} is not positive definite (n={n}, min diagonal {diag_min:e})"
        ))
    })
}

fn shape(m: &DMatrix<f64>) -> String {
    format!("{}x{}", m.nrows(), m.ncols())
}

/// Parameter prediction: `mean' = A mean + b`, `S' = A S Aᵀ + diag(q)`.
pub fn predict_step(belief: &LastLayerBelief, dynamics: &ParamDynamics) -> Result<LastLayerBelief> {
    let p = belief.dim();
    dynamics.validate(p)?;
    let a = &dynamics.transition;
    let mean = a * &belief.mean + &dynamics.offset;
    let mut cov = a * &belief.cov * a.transpose();
    for i in 0..p {
        cov[(i, i)] += dynamics.process_noise[i];
    }
    Ok(LastLayerBelief {
        mean,
        cov,
        step: belief.step + 1,
    })
}

/// Kalman correction with the standard covariance update.
pub fn correct_step(
    belief: &LastLayerBelief,
    obs: &ObservationModel,
    y: &DVector<f64>,
) -> Result<(LastLayerBelief, CorrectionTrace)> {
    correct_step_with(belief, obs, y, CovarianceUpdate::Standard)
}

pub fn correct_step_with(
    belief: &LastLayerBelief,
    obs: &ObservationModel,
    y: &DVector<f64>,
    update: CovarianceUpdate,
) -> Result<(LastLayerBelief, CorrectionTrace)> {
    let p = belief.dim();
    obs.check(p)?;
    let d = obs.features.nrows();
    if y.len() != d {
        return Err(Error::dim("observation", d, y.len()));
    }
    if belief.cov.shape() != (p, p) {
        return Err(Error::dim("belief covariance", format!("{p}x{p}"), shape(&belief.cov)));
    }
    let phi = &obs.features;
    // Φ S first; every later product reuses it.
    let phi_s = rows_times(phi, &belief.cov);
    let innovation_cov = &phi_s * phi.transpose() + &obs.noise;
    let chol = factor_spd(&innovation_cov, "innovation covariance")?;
    // K = S Φᵀ P⁻¹ = (P⁻¹ Φ S)ᵀ for symmetric S and P.
    let gain_t = chol.solve(&phi_s);
    let gain = gain_t.transpose();
    let innovation = y - phi * &belief.mean;
    let mean = &belief.mean + &gain * &innovation;
    let cov = match update {
        CovarianceUpdate::Standard => {
            // K Φ S = Uᵀ U with U = L⁻¹ Φ S.
            let u = chol.l().solve_lower_triangular(&phi_s).ok_or_else(|| Error::Numerical("singular innovation factor".into()))?;
            symmetric_downdate(&belief.cov, &u)
        }
        CovarianceUpdate::Joseph => {
            let ikh = DMatrix::identity(p, p) - &gain * phi;
            let mut c = &ikh * &belief.cov * ikh.transpose() + &gain * &obs.noise * gain.transpose();
            symmetrize(&mut c);
            c
        }
    };
    Ok((
        LastLayerBelief {
            mean,
            cov,
            step: belief.step,
        },
        CorrectionTrace {
            innovation_cov,
            gain,
            innovation,
        },
    ))
}

/// `Φ S` for a short, wide `Φ`, one contiguous pass over the columns of `S`.
fn rows_times(phi: &DMatrix<f64>, s: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, n) = phi.shape();
    let phi_t = phi.transpose();
    let pt = phi_t.as_slice();
    let mut out = DMatrix::zeros(d, n);
    for (j, col) in s.as_slice().chunks_exact(n).enumerate() {
        for k in 0..d {
            let row = &pt[k * n..(k + 1) * n];
            out[(k, j)] = row.iter().zip(col).map(|(a, b)| a * b).sum();
        }
    }
    out
}

/// `(S + Sᵀ) / 2 - Uᵀ U` in one tiled pass over `S`.
fn symmetric_downdate(s: &DMatrix<f64>, u: &DMatrix<f64>) -> DMatrix<f64> {
    const TILE: usize = 32;
    let n = s.nrows();
    let d = u.nrows();
    let sv = s.as_slice();
    let uv = u.as_slice();
    let mut out = vec![0.0; n * n];
    for jb in (0..n).step_by(TILE) {
        for ib in (0..=jb).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                let uj = &uv[j * d..(j + 1) * d];
                for i in ib..(ib + TILE).min(j + 1) {
                    let ui = &uv[i * d..(i + 1) * d];
                    let dot: f64 = ui.iter().zip(uj).map(|(a, b)| a * b).sum();
                    let v = 0.5 * (sv[i + j * n] + sv[j + i * n]) - dot;
                    out[i + j * n] = v;
                    out[j + i * n] = v;
                }
            }
        }
    }
    DMatrix::from_vec(n, n, out)
}

/// Averages `m` with its transpose, tile by tile to stay cache friendly.
fn symmetrize(m: &mut DMatrix<f64>) {
    const TILE: usize = 32;
    let n = m.nrows();
    for jb in (0..n).step_by(TILE) {
        for ib in (0..=jb).step_by(TILE) {
            for j in jb..(jb + TILE).min(n) {
                for i in ib..(ib + TILE).min(j) {
                    let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
    }
}

/// Predictive distribution `N(Φ mean, Φ S Φᵀ + Σ_ε)`.
pub fn predictive_distribution(belief: &LastLayerBelief, obs: &ObservationModel) -> Result<Gaussian> {
    obs.check(belief.dim())?;
    let phi = &obs.features;
    let mean = phi * &belief.mean;
    let mut cov = phi * &belief.cov * phi.transpose() + &obs.noise;
    symmetrize(&mut cov);
    Ok(Gaussian { mean, cov })
}

/// A square root `L` of a PSD matrix with `L Lᵀ = cov`.
///
/// Uses Cholesky when possible and a clipped eigendecomposition for
/// singular PSD inputs.
pub fn covariance_sqrt(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if let Some(c) = Cholesky::new(cov.clone()) {
        return Ok(c.l());
    }
    let eig = SymmetricEigen::new(cov.clone());
    let scale = eig.eigenvalues.amax().max(1.0);
    let min = eig.eigenvalues.min();
    if min < -1e-10 * scale || !min.is_finite() {
        return Err(Error::Numerical(format!(
            "covariance is not positive semi-definite (min eigenvalue {min:e})"
        )));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots))
}

/// Reparameterized sample `mean + L z` for given standard normals `z`.
pub fn sample_last_layer_with(belief: &LastLayerBelief, z: &DVector<f64>) -> Result<DVector<f64>> {
    if z.len() != belief.dim() {
        return Err(Error::dim("standard normal draw", belief.dim(), z.len()));
    }
    let l = covariance_sqrt(&belief.cov)?;
    Ok(&belief.mean + l * z)
}

/// Draws `θ ~ N(mean, S)`.
pub fn sample_last_layer<R: Rng + ?Sized>(belief: &LastLayerBelief, rng: &mut R) -> Result<DVector<f64>> {
    let z = DVector::from_fn(belief.dim(), |_, _| rng.sample::<f64, _>(StandardNormal));
    sample_last_layer_with(belief, &z)
}

/// One independent belief per output dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredBelief {
    pub dims: Vec<LastLayerBelief>,
}

/// Per-output observation: row `j` of `features` maps belief `j` to output
/// `j`, and `noise[j]` is that output's variance.
#[derive(Debug, Clone, PartialEq)]
pub struct FactoredObservation {
    pub features: DMatrix<f64>,
    pub noise: DVector<f64>,
}

impl FactoredObservation {
    pub fn new(features: DMatrix<f64>, noise: DVector<f64>) -> Result<Self> {
        if noise.len() != features.nrows() {
            return Err(Error::dim("per-output noise", features.nrows(), noise.len()));
        }
        if noise.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidInput("observation noise must be positive".into()));
        }
        Ok(Self { features, noise })
    }

    pub fn output_dim(&self) -> usize {
        self.features.nrows()
    }

    fn row(&self, j: usize) -> ObservationModel {
        ObservationModel {
            features: self.features.rows(j, 1).into_owned(),
            noise: DMatrix::from_element(1, 1, self.noise[j]),
        }
    }

    /// Equivalent joint observation over the stacked last layer.
    pub fn to_joint(&self) -> ObservationModel {
        let (d, p) = self.features.shape();
        let mut features = DMatrix::zeros(d, d * p);
        for j in 0..d {
            features
                .view_mut((j, j * p), (1, p))
                .copy_from(&self.features.rows(j, 1));
        }
        ObservationModel {
            features,
            noise: DMatrix::from_diagonal(&self.noise),
        }
    }
}

impl FactoredBelief {
    pub fn new(dims: Vec<LastLayerBelief>) -> Result<Self> {
        let Some(first) = dims.first() else {
            return Err(Error::InvalidInput("factored belief needs at least one output".into()));
        };
        let p = first.dim();
        if let Some(bad) = dims.iter().find(|b| b.dim() != p) {
            return Err(Error::dim("per-output belief", p, bad.dim()));
        }
        Ok(Self { dims })
    }

    pub fn output_dim(&self) -> usize {
        self.dims.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.dims[0].dim()
    }

    pub fn step(&self) -> u64 {
        self.dims[0].step
    }

    /// Applies the same dynamics to every output; `A` must be diagonal.
    pub fn predict(&self, dynamics: &ParamDynamics) -> Result<Self> {
        if !dynamics.has_diagonal_transition() {
            return Err(Error::Config(
                "per-output beliefs require a diagonal transition matrix".into(),
            ));
        }
        let dims = self
            .dims
            .iter()
            .map(|b| predict_step(b, dynamics))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dims })
    }

    pub fn correct(
        &self,
        obs: &FactoredObservation,
        y: &DVector<f64>,
    ) -> Result<(Self, Vec<CorrectionTrace>)> {
        self.correct_with(obs, y, CovarianceUpdate::Standard)
    }

    pub fn correct_with(
        &self,
        obs: &FactoredObservation,
        y: &DVector<f64>,
        update: CovarianceUpdate,
    ) -> Result<(Self, Vec<CorrectionTrace>)> {
        let d = self.output_dim();
        if obs.output_dim() != d {
            return Err(Error::dim("per-output observation rows", d, obs.output_dim()));
        }
        if y.len() != d {
            return Err(Error::dim("observation", d, y.len()));
        }
        let mut dims = Vec::with_capacity(d);
        let mut traces = Vec::with_capacity(d);
        for (j, b) in self.dims.iter().enumerate() {
            let yj = DVector::from_element(1, y[j]);
            let (post, trace) = correct_step_with(b, &obs.row(j), &yj, update)?;
            dims.push(post);
            traces.push(trace);
        }
        Ok((Self { dims }, traces))
    }

    /// Predictive distribution; the covariance is diagonal.
    pub fn predictive(&self, obs: &FactoredObservation) -> Result<Gaussian> {
        let d = self.output_dim();
        if obs.output_dim() != d {
            return Err(Error::dim("per-output observation rows", d, obs.output_dim()));
        }
        let mut mean = DVector::zeros(d);
        let mut cov = DMatrix::zeros(d, d);
        for (j, b) in self.dims.iter().enumerate() {
            let g = predictive_distribution(b, &obs.row(j))?;
            mean[j] = g.mean[0];
            cov[(j, j)] = g.cov[(0, 0)];
        }
        Ok(Gaussian { mean, cov })
    }

    /// Stacked joint belief with block-diagonal covariance.
    pub fn to_joint(&self) -> LastLayerBelief {
        let d = self.output_dim();
        let p = self.feature_dim();
        let mut mean = DVector::zeros(d * p);
        let mut cov = DMatrix::zeros(d * p, d * p);
        for (j, b) in self.dims.iter().enumerate() {
            mean.rows_mut(j * p, p).copy_from(&b.mean);
            cov.view_mut((j * p, j * p), (p, p)).copy_from(&b.cov);
        }
        LastLayerBelief {
            mean,
            cov,
            step: self.step(),
        }
    }
}

/// Flat serialized form `{p, mode, mean[], cov[]}`.
///
/// `mode` is `"full"` for a joint belief or `"per-output"` for a factored
/// one; in the latter `mean` holds the d stacked means and `cov` the d
/// stacked p x p blocks, each row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefRecord {
    pub p: usize,
    pub mode: String,
    #[serde(default)]
    pub step: u64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(m.len());
    for i in 0..m.nrows() {
        out.extend(m.row(i).iter());
    }
    out
}

impl From<&LastLayerBelief> for BeliefRecord {
    fn from(b: &LastLayerBelief) -> Self {
        Self {
            p: b.dim(),
            mode: "full".into(),
            step: b.step,
            mean: b.mean.iter().copied().collect(),
            cov: row_major(&b.cov),
        }
    }
}

impl From<&FactoredBelief> for BeliefRecord {
    fn from(b: &FactoredBelief) -> Self {
        Self {
            p: b.feature_dim(),
            mode: "per-output".into(),
            step: b.step(),
            mean: b.dims.iter().flat_map(|d| d.mean.iter().copied()).collect(),
            cov: b.dims.iter().flat_map(|d| row_major(&d.cov)).collect(),
        }
    }
}

impl BeliefRecord {
    fn block(&self, k: usize) -> LastLayerBelief {
        let p = self.p;
        LastLayerBelief {
            mean: DVector::from_row_slice(&self.mean[k * p..(k + 1) * p]),
            cov: DMatrix::from_row_slice(p, p, &self.cov[k * p * p..(k + 1) * p * p]),
            step: self.step,
        }
    }

    fn blocks(&self) -> Result<usize> {
        let p = self.p;
        if p == 0 || !self.mean.len().is_multiple_of(p) {
            return Err(Error::Serde(format!(
                "belief mean length {} is not a multiple of p={p}",
                self.mean.len()
            )));
        }
        let d = self.mean.len() / p;
        if self.cov.len() != d * p * p {
            return Err(Error::Serde(format!(
                "belief covariance length {} does not match {d} blocks of {p}x{p}",
                self.cov.len()
            )));
        }
        Ok(d)
    }

    pub fn to_full(&self) -> Result<LastLayerBelief> {
        if self.mode != "full" {
            return Err(Error::Serde(format!("expected full belief, found {}", self.mode)));
        }
        if self.blocks()? != 1 {
            return Err(Error::Serde("full belief must contain one block".into()));
        }
        Ok(self.block(0))
    }

    pub fn to_factored(&self) -> Result<FactoredBelief> {
        if self.mode != "per-output" {
            return Err(Error::Serde(format!(
                "expected per-output belief, found {}",
                self.mode
            )));
        }
        let d = self.blocks()?;
        FactoredBelief::new((0..d).map(|k| self.block(k)).collect())
    }
}
