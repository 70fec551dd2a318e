//! Gaussian fluctuation limit: driver covariance, driver sampling and the
//! linear Volterra system for `(Ŝ, F̂, Û, Î)`.
//!
//! The four drivers `(Ĵ, M̂, Ĵ₁, M̂₁)` are the centered Gaussian processes
//! with the covariance of one mean-field agent's
//! `(γ_{A(t)}(ς(t)), λ_{A(t)}(ς(t)), 1{ς(t) ≥ η}, 1{ς(t) < η})`. They are
//! stacked per grid point at index `4 i + c`, so the joint covariance is a
//! `4G × 4G` matrix estimated from simulated agents.
//!
//! With `c = Ŝ F̄ - Ĵ F̄ + S̄ F̂` the system reads
//!
//! ```text
//! Ŝ(t) = Ĵ(t) - ∫_0^t K₀(t,s) F̂(s) ds - ∫_0^t ∫_s^t K₂(t,s,r) F̂(r) F̄(s) S̄(s) dr ds + ∫_0^t K(t,s) c(s) ds
//! F̂(t) = M̂(t) + ∫_0^t λ̄(t-s) c(s) ds
//! Û(t) = Ĵ₁(t) - ∫_0^t K₀'(t,s) F̂(s) ds - ∫_0^t ∫_s^t K₂'(t,s,r) F̂(r) F̄(s) S̄(s) dr ds + ∫_0^t K'(t,s) c(s) ds
//! Î(t) = M̂₁(t) + ∫_0^t F^c(t-s) c(s) ds
//! ```
//!
//! where the unprimed kernels carry `γ(t-s)` and the primed ones
//! `1{t-s ≥ η}`. Setting `corollary_literal` replaces `Ĵ` by `Ĵ₁` inside the
//! `Û` integrand.

use nalgebra::{DMatrix, DVector};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::flln::LimitSolution;
use crate::grid::{trapezoid_weight, TimeGrid};
use crate::profiles::{Expectation, KernelKind, Model};
use crate::simulator::{simulate_agents, stream_seed, AgentPath, SimError};

/// Drivers per grid point.
pub const COMPONENTS: usize = 4;
/// Smallest agent count accepted by the covariance estimator.
pub const MIN_SAMPLES: usize = 100;
/// Agents per accumulation chunk; fixed so sums do not depend on threads.
const CHUNK: usize = 512;
const JITTER_LEVELS: [f64; 5] = [1e-12, 1e-11, 1e-10, 1e-9, 1e-8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FcltError {
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { got: usize, min: usize },
    #[error("grid mismatch: expected {expected} points, got {got}")]
    GridMismatch { expected: usize, got: usize },
    #[error("covariance not positive semidefinite even with jitter {jitter:.1e} (smallest eigenvalue {smallest_eigenvalue:.3e})")]
    NotPositiveSemidefinite { jitter: f64, smallest_eigenvalue: f64 },
    #[error("singular step system at grid index {0}")]
    SingularStep(usize),
    #[error(transparent)]
    Simulation(#[from] SimError),
}

/// Driver component of the stacked vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Driver {
    /// `Ĵ`, fluctuation of `γ`.
    J = 0,
    /// `M̂`, fluctuation of `λ`.
    M = 1,
    /// `Ĵ₁`, fluctuation of `1{ς ≥ η}`.
    J1 = 2,
    /// `M̂₁`, fluctuation of `1{ς < η}`.
    M1 = 3,
}

impl Driver {
    pub const ALL: [Driver; 4] = [Driver::J, Driver::M, Driver::J1, Driver::M1];
}

#[inline]
pub fn stacked_index(i: usize, c: Driver) -> usize {
    COMPONENTS * i + c as usize
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// Joint covariance of the stacked drivers.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceModel {
    pub grid: TimeGrid,
    pub samples: usize,
    /// Sample mean of the agent functionals.
    pub mean: DVector<f64>,
    /// Unbiased sample covariance.
    pub cov: DMatrix<f64>,
    /// Standard error of each covariance entry.
    pub se: DMatrix<f64>,
}

impl CovarianceModel {
    pub fn dim(&self) -> usize {
        self.cov.nrows()
    }

    pub fn get(&self, a: Driver, i: usize, b: Driver, j: usize) -> f64 {
        self.cov[(stacked_index(i, a), stacked_index(j, b))]
    }

    pub fn stderr(&self, a: Driver, i: usize, b: Driver, j: usize) -> f64 {
        self.se[(stacked_index(i, a), stacked_index(j, b))]
    }

    /// Scaled copy (for tests of the Gaussian scaling law).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            cov: &self.cov * factor,
            se: &self.se * factor.abs(),
            ..self.clone()
        }
    }

    /// Symmetry, nonnegative diagonal and the entry bounds implied by the
    /// ranges of the functionals.
    pub fn check_invariants(&self, lambda_star: f64) -> Result<(), String> {
        let n = self.dim();
        let scale = |c: usize| if c == Driver::M as usize { lambda_star } else { 1.0 };
        for a in 0..n {
            if self.cov[(a, a)] < 0.0 {
                return Err(format!("negative variance at {a}"));
            }
            for b in 0..n {
                let v = self.cov[(a, b)];
                if v != self.cov[(b, a)] {
                    return Err(format!("asymmetric at ({a}, {b})"));
                }
                // |Cov(X, Y)| ≤ range(X) range(Y) / 4 · (M/(M-1)) ≤ range(X) range(Y).
                if v.abs() > scale(a % COMPONENTS) * scale(b % COMPONENTS) * (1.0 + 1e-12) {
                    return Err(format!("entry ({a}, {b}) = {v} exceeds its bound"));
                }
            }
        }
        Ok(())
    }
}

fn agent_row(path: &AgentPath, out: &mut [f64]) {
    for g in 0..path.infectivity.len() {
        let inf = if path.infectious[g] { 1.0 } else { 0.0 };
        out[COMPONENTS * g] = path.susceptibility[g];
        out[COMPONENTS * g + 1] = path.infectivity[g];
        out[COMPONENTS * g + 2] = 1.0 - inf;
        out[COMPONENTS * g + 3] = inf;
    }
}

fn chunk_matrix(model: &Model, flln: &LimitSolution, seed: u64, lo: usize, hi: usize) -> Result<DMatrix<f64>, SimError> {
    let grid = flln.grid;
    let dim = COMPONENTS * grid.len();
    let paths = simulate_agents(model, &grid, &flln.fbar, seed, lo..hi)?;
    let mut z = DMatrix::zeros(hi - lo, dim);
    let mut row = vec![0.0; dim];
    for (r, p) in paths.iter().enumerate() {
        agent_row(p, &mut row);
        for (c, v) in row.iter().enumerate() {
            z[(r, c)] = *v;
        }
    }
    Ok(z)
}

/// Estimate the driver covariance on the solution's grid from `samples`
/// independent agents (Bernoulli initial profiles) driven by `flln.fbar`.
pub fn estimate_driver_covariance(
    model: &Model,
    flln: &LimitSolution,
    samples: usize,
    seed: u64,
) -> Result<CovarianceModel, FcltError> {
    if samples < MIN_SAMPLES {
        return Err(FcltError::TooFewSamples {
            got: samples,
            min: MIN_SAMPLES,
        });
    }
    let grid = flln.grid;
    if flln.fbar.len() != grid.len() {
        return Err(FcltError::GridMismatch {
            expected: grid.len(),
            got: flln.fbar.len(),
        });
    }
    let dim = COMPONENTS * grid.len();
    let chunks: Vec<(usize, usize)> = (0..samples)
        .step_by(CHUNK)
        .map(|lo| (lo, (lo + CHUNK).min(samples)))
        .collect();

    // First pass: means.
    let sums = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let z = chunk_matrix(model, flln, seed, lo, hi)?;
            Ok(z.row_sum().transpose())
        })
        .collect::<Result<Vec<DVector<f64>>, SimError>>()?;
    let mut mean = DVector::zeros(dim);
    for s in &sums {
        mean += s;
    }
    mean /= samples as f64;

    // Second pass: centered second and fourth moments.
    let moments = chunks
        .par_iter()
        .map(|&(lo, hi)| {
            let mut z = chunk_matrix(model, flln, seed, lo, hi)?;
            for mut row in z.row_iter_mut() {
                row -= mean.transpose();
            }
            let sq = z.component_mul(&z);
            Ok((z.tr_mul(&z), sq.tr_mul(&sq)))
        })
        .collect::<Result<Vec<_>, SimError>>()?;
    let mut c2 = DMatrix::zeros(dim, dim);
    let mut c4 = DMatrix::zeros(dim, dim);
    for (a, b) in &moments {
        c2 += a;
        c4 += b;
    }
    let m = samples as f64;
    let cov = &c2 / (m - 1.0);
    let mut se = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in 0..dim {
            let biased = c2[(a, b)] / m;
            let var = (c4[(a, b)] / m - biased * biased).max(0.0);
            se[(a, b)] = (var / m).sqrt();
        }
    }
    // Enforce exact symmetry against rounding in the products.
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(CovarianceModel {
        grid,
        samples,
        mean,
        cov,
        se,
    })
}

/// One joint sample of the four drivers on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DriverSample {
    pub grid: TimeGrid,
    pub jhat: Vec<f64>,
    pub mhat: Vec<f64>,
    pub jhat1: Vec<f64>,
    pub mhat1: Vec<f64>,
}

impl DriverSample {
    pub fn zeros(grid: TimeGrid) -> Self {
        let n = grid.len();
        Self {
            grid,
            jhat: vec![0.0; n],
            mhat: vec![0.0; n],
            jhat1: vec![0.0; n],
            mhat1: vec![0.0; n],
        }
    }

    pub fn from_fn(grid: TimeGrid, f: impl Fn(Driver, f64) -> f64) -> Self {
        let eval = |c| grid.times().map(|t| f(c, t)).collect();
        Self {
            grid,
            jhat: eval(Driver::J),
            mhat: eval(Driver::M),
            jhat1: eval(Driver::J1),
            mhat1: eval(Driver::M1),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        let s = |v: &[f64]| v.iter().map(|x| a * x).collect();
        Self {
            grid: self.grid,
            jhat: s(&self.jhat),
            mhat: s(&self.mhat),
            jhat1: s(&self.jhat1),
            mhat1: s(&self.mhat1),
        }
    }

    pub fn component(&self, c: Driver) -> &[f64] {
        match c {
            Driver::J => &self.jhat,
            Driver::M => &self.mhat,
            Driver::J1 => &self.jhat1,
            Driver::M1 => &self.mhat1,
        }
    }
}

/// Cholesky factor of the covariance restricted to coordinates with
/// nonzero variance, with diagonal jitter.
#[derive(Debug, Clone)]
pub struct DriverSampler {
    grid: TimeGrid,
    dim: usize,
    active: Vec<usize>,
    factor: DMatrix<f64>,
    jitter: f64,
}

impl DriverSampler {
    /// Factorize, escalating the jitter (relative to the largest variance)
    /// from `1e-12` to `1e-8`.
    pub fn new(cov: &CovarianceModel) -> Result<Self, FcltError> {
        let dim = cov.dim();
        let active: Vec<usize> = (0..dim).filter(|&a| cov.cov[(a, a)] > 0.0).collect();
        let sub = DMatrix::from_fn(active.len(), active.len(), |a, b| cov.cov[(active[a], active[b])]);
        if active.is_empty() {
            return Ok(Self {
                grid: cov.grid,
                dim,
                active,
                factor: DMatrix::zeros(0, 0),
                jitter: 0.0,
            });
        }
        let scale = active.iter().map(|&a| cov.cov[(a, a)]).fold(0.0, f64::max);
        for level in JITTER_LEVELS {
            let mut m = sub.clone();
            for a in 0..m.nrows() {
                m[(a, a)] += level * scale;
            }
            if let Some(ch) = m.cholesky() {
                log::debug!("driver covariance factorized with relative jitter {level:e}");
                return Ok(Self {
                    grid: cov.grid,
                    dim,
                    active,
                    factor: ch.l(),
                    jitter: level * scale,
                });
            }
        }
        let smallest = sub.symmetric_eigenvalues().min();
        Err(FcltError::NotPositiveSemidefinite {
            jitter: JITTER_LEVELS[JITTER_LEVELS.len() - 1] * scale,
            smallest_eigenvalue: smallest,
        })
    }

    /// Absolute diagonal jitter that was needed.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn sample(&self, seed: u64) -> DriverSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xi = DVector::from_fn(self.active.len(), |_, _| StandardNormal.sample(&mut rng));
        let z = &self.factor * xi;
        let mut full = vec![0.0; self.dim];
        for (k, &a) in self.active.iter().enumerate() {
            full[a] = z[k];
        }
        let n = self.grid.len();
        let pick = |c: Driver| (0..n).map(|i| full[stacked_index(i, c)]).collect();
        DriverSample {
            grid: self.grid,
            jhat: pick(Driver::J),
            mhat: pick(Driver::M),
            jhat1: pick(Driver::J1),
            mhat1: pick(Driver::M1),
        }
    }
}

/// One solved fluctuation path.
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationPath {
    pub grid: TimeGrid,
    pub shat: Vec<f64>,
    pub fhat: Vec<f64>,
    pub uhat: Vec<f64>,
    pub ihat: Vec<f64>,
}

/// Driver-independent discretization of the fluctuation system around one
/// limit solution. Path solves are `O(G²)`.
#[derive(Debug, Clone)]
pub struct FluctuationOperator {
    grid: TimeGrid,
    fbar: Vec<f64>,
    sbar: Vec<f64>,
    lbar: Vec<f64>,
    survival: Vec<f64>,
    /// `K(t_i, t_j)` (triangle).
    k_gamma: Vec<f64>,
    /// `K'(t_i, t_j)` (triangle).
    k_ind: Vec<f64>,
    /// Coefficient of `F̂(t_l)` in the two subtracted terms of `Ŝ(t_i)`.
    pair: Vec<f64>,
    /// Same for `Û(t_i)`.
    pair_ind: Vec<f64>,
    corollary_literal: bool,
}

impl FluctuationOperator {
    pub fn new(model: &Model, flln: &LimitSolution, corollary_literal: bool) -> Self {
        let grid = flln.grid;
        let dt = grid.dt();
        let n = grid.len();
        let engine = model.kernel_engine().for_grid(&grid);
        let force = engine.force_unchecked(dt, &flln.fbar);
        let fresh = Expectation::new(&model.law);
        let lbar = grid.times().map(|t| fresh.mean_infectivity(t)).collect();
        let survival = grid.times().map(|t| fresh.duration_survival(t)).collect();
        let rho: Vec<f64> = flln.fbar.iter().zip(&flln.sbar).map(|(f, s)| f * s).collect();

        let rows: Vec<[Vec<f64>; 4]> = (0..n)
            .into_par_iter()
            .map(|i| {
                let t = grid.time(i);
                let mut kg = vec![0.0; i + 1];
                let mut ki = vec![0.0; i + 1];
                let mut pair = vec![0.0; i + 1];
                let mut pair_ind = vec![0.0; i + 1];
                for j in 0..=i {
                    let s = grid.time(j);
                    kg[j] = engine.entry(KernelKind::GammaSurv, &force, t, s, t);
                    ki[j] = engine.entry(KernelKind::IndSurv, &force, t, s, t);
                    let w = trapezoid_weight(dt, 0, i, j);
                    pair[j] = w * engine.entry(KernelKind::InitGammaPairSurv, &force, t, 0.0, s);
                    pair_ind[j] = w * engine.entry(KernelKind::InitIndGammaSurv, &force, t, 0.0, s);
                }
                // ∫_0^t ∫_s^t K₂(t,s,r) F̂(r) ρ(s) dr ds, outer weight on s_j,
                // inner trapezoid on [s_j, t_i] at r_l.
                for j in 0..i {
                    let outer = trapezoid_weight(dt, 0, i, j) * rho[j];
                    if outer == 0.0 {
                        continue;
                    }
                    let s = grid.time(j);
                    for l in j..=i {
                        let w = outer * trapezoid_weight(dt, j, i, l);
                        let [kp, kip] = engine.pair_survival(&force, t, s, grid.time(l));
                        pair[l] += w * kp;
                        pair_ind[l] += w * kip;
                    }
                }
                [kg, ki, pair, pair_ind]
            })
            .collect();
        let mut op = Self {
            grid,
            fbar: flln.fbar.clone(),
            sbar: flln.sbar.clone(),
            lbar,
            survival,
            k_gamma: Vec::with_capacity(n * (n + 1) / 2),
            k_ind: Vec::with_capacity(n * (n + 1) / 2),
            pair: Vec::with_capacity(n * (n + 1) / 2),
            pair_ind: Vec::with_capacity(n * (n + 1) / 2),
            corollary_literal,
        };
        for [kg, ki, p, pi] in rows {
            op.k_gamma.extend(kg);
            op.k_ind.extend(ki);
            op.pair.extend(p);
            op.pair_ind.extend(pi);
        }
        op
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    fn check(&self, d: &DriverSample) -> Result<(), FcltError> {
        let n = self.grid.len();
        for c in Driver::ALL {
            if d.component(c).len() != n {
                return Err(FcltError::GridMismatch {
                    expected: n,
                    got: d.component(c).len(),
                });
            }
        }
        Ok(())
    }

    /// March `(Ŝ, F̂)` forward, solving a 2×2 system at each grid point,
    /// then evaluate `(Û, Î)` by quadrature.
    pub fn solve(&self, d: &DriverSample) -> Result<FluctuationPath, FcltError> {
        self.check(d)?;
        let n = self.grid.len();
        let dt = self.grid.dt();
        let mut x = vec![0.0; n];
        let mut y = vec![0.0; n];
        let mut c = vec![0.0; n];
        for i in 0..n {
            let (f, s, jj) = (self.fbar[i], self.sbar[i], d.jhat[i]);
            let mut xk = d.jhat[i];
            let mut yk = d.mhat[i];
            for j in 0..i {
                let w = trapezoid_weight(dt, 0, i, j);
                xk += -self.pair[tri(i, j)] * y[j] + w * self.k_gamma[tri(i, j)] * c[j];
                yk += w * self.lbar[i - j] * c[j];
            }
            let w = trapezoid_weight(dt, 0, i, i);
            let a = w * self.k_gamma[tri(i, i)];
            let b = w * self.lbar[0];
            let p = self.pair[tri(i, i)];
            // (1 - aF) x + (p - aS) y = xk - a Ĵ F
            // -bF x + (1 - bS) y = yk - b Ĵ F
            let (m11, m12, r1) = (1.0 - a * f, p - a * s, xk - a * jj * f);
            let (m21, m22, r2) = (-b * f, 1.0 - b * s, yk - b * jj * f);
            let det = m11 * m22 - m12 * m21;
            if det.abs() < 1e-12 {
                return Err(FcltError::SingularStep(i));
            }
            x[i] = (r1 * m22 - m12 * r2) / det;
            y[i] = (m11 * r2 - m21 * r1) / det;
            c[i] = x[i] * f - jj * f + s * y[i];
        }
        let (uhat, ihat) = self.compartments(d, &y, &c);
        Ok(FluctuationPath {
            grid: self.grid,
            shat: x,
            fhat: y,
            uhat,
            ihat,
        })
    }

    fn compartments(&self, d: &DriverSample, y: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.len();
        let dt = self.grid.dt();
        let mut uhat = vec![0.0; n];
        let mut ihat = vec![0.0; n];
        for i in 0..n {
            let mut u = d.jhat1[i];
            let mut v = d.mhat1[i];
            for j in 0..=i {
                let w = trapezoid_weight(dt, 0, i, j);
                let cu = if self.corollary_literal {
                    c[j] + (d.jhat[j] - d.jhat1[j]) * self.fbar[j]
                } else {
                    c[j]
                };
                u += -self.pair_ind[tri(i, j)] * y[j] + w * self.k_ind[tri(i, j)] * cu;
                v += w * self.survival[i - j] * c[j];
            }
            uhat[i] = u;
            ihat[i] = v;
        }
        (uhat, ihat)
    }

    /// Sup-norm residual of the four discrete equations, recomputed from
    /// the path.
    pub fn residual(&self, d: &DriverSample, p: &FluctuationPath) -> f64 {
        let n = self.grid.len();
        let dt = self.grid.dt();
        let c: Vec<f64> = (0..n)
            .map(|i| p.shat[i] * self.fbar[i] - d.jhat[i] * self.fbar[i] + self.sbar[i] * p.fhat[i])
            .collect();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let mut xs = d.jhat[i];
            let mut ys = d.mhat[i];
            for j in 0..=i {
                let w = trapezoid_weight(dt, 0, i, j);
                xs += -self.pair[tri(i, j)] * p.fhat[j] + w * self.k_gamma[tri(i, j)] * c[j];
                ys += w * self.lbar[i - j] * c[j];
            }
            worst = worst.max((xs - p.shat[i]).abs()).max((ys - p.fhat[i]).abs());
        }
        let (u, v) = self.compartments(d, &p.fhat, &c);
        for i in 0..n {
            worst = worst.max((u[i] - p.uhat[i]).abs()).max((v[i] - p.ihat[i]).abs());
        }
        worst
    }
}

/// Draw `count` driver samples and solve each; sample `k` uses the seed
/// derived from `(seed, k)`.
pub fn sample_paths(
    op: &FluctuationOperator,
    sampler: &DriverSampler,
    seed: u64,
    count: usize,
) -> Result<Vec<FluctuationPath>, FcltError> {
    (0..count)
        .into_par_iter()
        .map(|k| op.solve(&sampler.sample(stream_seed(seed, k as u64, -3))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flln::{solve_flln, SolverSettings};
    use crate::profiles::{DurationLaw, InitialLaw, ProfileLaw};

    fn model(p: f64) -> Model {
        let law = ProfileLaw::sis_gradual(2.0, DurationLaw::Exponential { rate: 1.0 }, 1.0).unwrap();
        let init = InitialLaw::like_fresh(p, &law).unwrap();
        Model::new(law, init)
    }

    fn smooth_driver(grid: TimeGrid) -> DriverSample {
        DriverSample::from_fn(grid, |c, t| match c {
            Driver::J => 0.3 * t.sin(),
            Driver::M => 0.5 * (2.0 * t).cos(),
            Driver::J1 => 0.2 * (1.0 + t).ln(),
            Driver::M1 => -0.2 * (1.0 + t).ln(),
        })
    }

    fn sup(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn zero_driver_gives_zero_path() {
        let m = model(0.1);
        let grid = TimeGrid::new(2.0, 0.1).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let op = FluctuationOperator::new(&m, &flln, false);
        let p = op.solve(&DriverSample::zeros(grid)).unwrap();
        for v in [&p.shat, &p.fhat, &p.uhat, &p.ihat] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn linear_in_driver_and_exact_at_zero() {
        let m = model(0.1);
        let grid = TimeGrid::new(3.0, 0.1).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let op = FluctuationOperator::new(&m, &flln, false);
        let d = smooth_driver(grid);
        let p = op.solve(&d).unwrap();
        let q = op.solve(&d.scaled(-2.5)).unwrap();
        for (a, b) in [(&p.shat, &q.shat), (&p.fhat, &q.fhat), (&p.uhat, &q.uhat), (&p.ihat, &q.ihat)] {
            for (x, y) in a.iter().zip(b.iter()) {
                assert!((y + 2.5 * x).abs() <= 1e-12 * (1.0 + x.abs()));
            }
        }
        assert_eq!(p.shat[0], d.jhat[0]);
        assert_eq!(p.fhat[0], d.mhat[0]);
        assert_eq!(p.uhat[0], d.jhat1[0]);
        assert_eq!(p.ihat[0], d.mhat1[0]);
        assert!(op.residual(&d, &p) < 1e-12);
    }

    #[test]
    fn compartment_fluctuations_cancel() {
        // With the common integrand, Û + Î = Ĵ₁ + M̂₁ (both kernel families
        // add up to the survival identity of the limit).
        let m = model(0.2);
        let grid = TimeGrid::new(3.0, 0.05).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let op = FluctuationOperator::new(&m, &flln, false);
        let d = smooth_driver(grid);
        let p = op.solve(&d).unwrap();
        for i in 0..grid.len() {
            let sum = p.uhat[i] + p.ihat[i] - d.jhat1[i] - d.mhat1[i];
            assert!(sum.abs() < 1e-3, "{i}: {sum}");
        }
        let lit = FluctuationOperator::new(&m, &flln, true).solve(&d).unwrap();
        assert_eq!(lit.ihat, p.ihat);
        let n = grid.len() - 1;
        assert!((lit.uhat[n] + lit.ihat[n] - d.jhat1[n] - d.mhat1[n]).abs() > 1e-2);
    }

    #[test]
    fn refinement_ratio_is_about_four() {
        let m = model(0.1);
        let coarse = TimeGrid::new(2.0, 0.1).unwrap();
        let grids = [coarse, coarse.refined(), coarse.refined().refined()];
        let paths: Vec<FluctuationPath> = grids
            .iter()
            .map(|g| {
                let flln = solve_flln(&m, g, &SolverSettings::default()).unwrap();
                FluctuationOperator::new(&m, &flln, false).solve(&smooth_driver(*g)).unwrap()
            })
            .collect();
        let on = |p: &FluctuationPath, k: usize| -> Vec<f64> { p.fhat.iter().step_by(k).copied().collect() };
        let e1 = sup(&on(&paths[0], 1), &on(&paths[1], 2));
        let e2 = sup(&on(&paths[1], 2), &on(&paths[2], 4));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn decoupled_case_matches_neumann_series() {
        // p = 0: F̄ ≡ 0 and S̄ ≡ 1, so F̂ = M̂ + ∫ λ̄(t-s) F̂(s) ds.
        let m = model(0.0);
        let grid = TimeGrid::new(4.0, 0.05).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let op = FluctuationOperator::new(&m, &flln, false);
        let d = DriverSample::from_fn(grid, |c, t| if c == Driver::M { (1.5 * t).sin() + 0.2 } else { 0.0 });
        let p = op.solve(&d).unwrap();
        let n = grid.len();
        let lbar: Vec<f64> = grid.times().map(|t| 2.0 * (-t).exp()).collect();
        let mut term = d.mhat.clone();
        let mut total = d.mhat.clone();
        for _ in 0..200 {
            let next: Vec<f64> = (0..n)
                .map(|i| {
                    (0..=i)
                        .map(|j| trapezoid_weight(grid.dt(), 0, i, j) * lbar[i - j] * term[j])
                        .sum()
                })
                .collect();
            for (t, v) in total.iter_mut().zip(&next) {
                *t += v;
            }
            term = next;
            if term.iter().all(|v| v.abs() < 1e-16) {
                break;
            }
        }
        assert!(sup(&p.fhat, &total) < 1e-6, "{}", sup(&p.fhat, &total));
    }

    #[test]
    fn covariance_of_trivial_model_is_zero() {
        let m = model(0.0);
        let grid = TimeGrid::new(2.0, 0.5).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let cov = estimate_driver_covariance(&m, &flln, 200, 1).unwrap();
        assert!(cov.cov.iter().all(|&v| v == 0.0));
        let sampler = DriverSampler::new(&cov).unwrap();
        let d = sampler.sample(5);
        assert!(d.mhat.iter().chain(&d.jhat).all(|&v| v == 0.0));
        assert!(matches!(
            estimate_driver_covariance(&m, &flln, 10, 1),
            Err(FcltError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn initial_infectivity_variance_is_bernoulli() {
        let m = model(0.1);
        let grid = TimeGrid::new(1.0, 0.25).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let cov = estimate_driver_covariance(&m, &flln, 20_000, 3).unwrap();
        let v = cov.get(Driver::M, 0, Driver::M, 0);
        let se = cov.stderr(Driver::M, 0, Driver::M, 0);
        assert!((v - 0.36).abs() < 3.0 * se, "{v} ± {se}");
        cov.check_invariants(2.0).unwrap();
    }

    #[test]
    fn sampled_variances_match_covariance() {
        let m = model(0.3);
        let grid = TimeGrid::new(2.0, 0.25).unwrap();
        let flln = solve_flln(&m, &grid, &SolverSettings::default()).unwrap();
        let cov = estimate_driver_covariance(&m, &flln, 4000, 4).unwrap();
        let sampler = DriverSampler::new(&cov).unwrap();
        assert!(sampler.jitter() <= 1e-8 * 4.0);
        let k = 10_000;
        let draws: Vec<DriverSample> = (0..k).map(|s| sampler.sample(s as u64)).collect();
        for c in Driver::ALL {
            for i in [0, 4, 8] {
                let target = cov.get(c, i, c, i);
                let emp = draws.iter().map(|d| d.component(c)[i].powi(2)).sum::<f64>() / k as f64;
                assert!((emp - target).abs() <= 0.05 * target + 1e-9, "{c:?} {i}: {emp} vs {target}");
            }
        }
        // Scaling the covariance by 4 doubles the standard deviations.
        let big = DriverSampler::new(&cov.scaled(4.0)).unwrap();
        let a = sampler.sample(77);
        let b = big.sample(77);
        for i in 0..grid.len() {
            assert!((b.mhat[i] - 2.0 * a.mhat[i]).abs() < 1e-3 * (1.0 + a.mhat[i].abs()));
        }
    }
}
