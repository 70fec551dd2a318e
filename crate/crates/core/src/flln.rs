//! Deterministic solver for the law-of-large-numbers limit.
//!
//! Unknowns on a uniform grid: average susceptibility `S̄`, force of
//! infection `F̄`, and the compartment fractions `Ū`, `Ī`:
//!
//! ```text
//! S̄(t) = E[γ₀(t) e^{-∫_0^t γ₀ F̄}] + ∫_0^t E[γ(t-s) e^{-∫_s^t γ(r-s) F̄(r) dr}] S̄(s) F̄(s) ds
//! F̄(t) = Ī(0) λ̄₀(t) + ∫_0^t λ̄(t-s) S̄(s) F̄(s) ds
//! Ū(t) = E[1{t ≥ η₀} e^{-∫_0^t γ₀ F̄}] + ∫_0^t E[1{t-s ≥ η} e^{-∫_s^t γ(r-s) F̄(r) dr}] S̄(s) F̄(s) ds
//! Ī(t) = Ī(0) F₀^c(t) + ∫_0^t F^c(t-s) S̄(s) F̄(s) ds
//! ```
//!
//! All integrals use the trapezoid rule. The default scheme marches in time:
//! at `t_i` the only unknown inside the kernels is `F̄(t_i)` (through the last
//! cell of the exposure integral), so each step runs a short fixed point on
//! `(S̄_i, F̄_i)`. Whole-grid Picard iteration is available as a cross-check.

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::grid::{trapezoid_weight, GridError, TimeGrid};
use crate::profiles::{Expectation, KernelEngine, KernelKind, Model};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FllnError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error("no convergence after {iterations} iterations (residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("rates must be positive, got lambda={lambda}, mu={mu}")]
    BadRates { lambda: f64, mu: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Step-by-step with an inner fixed point per grid point.
    #[default]
    Marching,
    /// Fixed-point iteration on the whole grid, rebuilding the kernel table
    /// from the current force each sweep.
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iter: usize,
    pub scheme: Scheme,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            scheme: Scheme::Marching,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SolverReport {
    pub scheme: Scheme,
    /// Picard sweeps, or the largest inner iteration count of one step.
    pub iterations: usize,
    /// Total kernel-row evaluations (marching) or sweeps (Picard).
    pub total_iterations: usize,
    /// Last sup-norm update of `(S̄, F̄)`.
    pub residual: f64,
    /// `max_t |Ū(t) + Ī(t) - 1|`, a discretization error of order `dt²`.
    pub conservation_defect: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LimitSolution {
    pub grid: TimeGrid,
    pub sbar: Vec<f64>,
    pub fbar: Vec<f64>,
    pub ubar: Vec<f64>,
    pub ibar: Vec<f64>,
    pub report: SolverReport,
}

impl LimitSolution {
    /// Samples on a coarser grid whose step is an integer multiple of this
    /// one's and whose horizon does not exceed it.
    pub fn restricted(&self, coarse: &TimeGrid) -> Option<LimitSolution> {
        let ratio = coarse.dt() / self.grid.dt();
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-9 * ratio || coarse.steps() * k as usize > self.grid.steps() {
            return None;
        }
        let k = k as usize;
        let pick = |v: &[f64]| (0..coarse.len()).map(|i| v[i * k]).collect();
        Some(LimitSolution {
            grid: *coarse,
            sbar: pick(&self.sbar),
            fbar: pick(&self.fbar),
            ubar: pick(&self.ubar),
            ibar: pick(&self.ibar),
            report: self.report.clone(),
        })
    }
}

struct Problem<'a> {
    engine: KernelEngine,
    fresh: Expectation,
    grid: &'a TimeGrid,
    p: f64,
    lambda_star: f64,
    /// `λ̄(t_k)` for fresh profiles.
    lbar: Vec<f64>,
    /// `Ī(0) λ̄₀(t_k)`.
    source: Vec<f64>,
}

impl<'a> Problem<'a> {
    fn new(model: &Model, grid: &'a TimeGrid) -> Self {
        let engine = model.kernel_engine().for_grid(grid);
        let fresh = Expectation::new(&model.law);
        let initial = Expectation::new(model.init.infected_profile());
        let p = model.init.p_infected();
        let lbar = grid.times().map(|t| fresh.mean_infectivity(t)).collect();
        let source = grid
            .times()
            .map(|t| if p > 0.0 { p * initial.mean_infectivity(t) } else { 0.0 })
            .collect();
        Self {
            engine,
            fresh,
            grid,
            p,
            lambda_star: model.lambda_star(),
            lbar,
            source,
        }
    }

    /// `Σ_{j<i} ω_j λ̄(t_i - t_j) S_j F_j` plus the source term.
    fn force_known(&self, i: usize, sf: &[f64]) -> f64 {
        let dt = self.grid.dt();
        let mut acc = self.source[i];
        for j in 0..i {
            acc += trapezoid_weight(dt, 0, i, j) * self.lbar[i - j] * sf[j];
        }
        acc
    }

    /// Row `i` of the `S̄` and `Ū` equations for a force known on
    /// `t_0..=t_i`, linearized in `F̄(t_i)`: `[S known part, its slope,
    /// Ū known part, its slope]` (diagonal terms excluded) plus the diagonal
    /// kernels `GammaSurv(t_i, t_i)` and `IndSurv(t_i, t_i)`.
    fn linearized_row(&self, i: usize, fbar: &[f64], sf: &[f64]) -> ([f64; 4], f64, f64) {
        let grid = self.grid;
        let dt = grid.dt();
        let force = self.engine.force_unchecked(dt, &fbar[..=i]);
        let mut unit = vec![0.0; i + 1];
        unit[i] = 1.0;
        let hat = self.engine.force_unchecked(dt, &unit);
        let t = grid.time(i);
        let init = self.engine.survival_with_slope(&force, &hat, t, 0.0, true);
        // Terms are collected in order and summed sequentially so the result
        // does not depend on the thread count.
        let terms: Vec<[f64; 4]> = (0..i)
            .into_par_iter()
            .with_min_len(64)
            .map(|j| {
                let k = self.engine.survival_with_slope(&force, &hat, t, grid.time(j), false);
                let w = trapezoid_weight(dt, 0, i, j) * sf[j];
                [w * k[0], w * k[1], w * k[2], w * k[3]]
            })
            .collect();
        let sum = terms
            .iter()
            .fold([0.0; 4], |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]);
        let diag = self.engine.survival_with_slope(&force, &hat, t, t, false);
        let row = [
            init[0] + sum[0],
            init[1] + sum[1],
            init[2] + sum[2],
            init[3] + sum[3],
        ];
        (row, diag[0], diag[2])
    }

    /// Solve `S = B(F) + d_S S F`, `F = A + d_F S F` for one step, with
    /// `B(F) = b + b' (F - f0)`.
    #[allow(clippy::too_many_arguments)]
    fn local_solve(&self, a: f64, b: f64, slope: f64, f0: f64, d_s: f64, d_f: f64) -> (f64, f64) {
        let mut f = f0;
        let mut s = b;
        for _ in 0..200 {
            s = ((b + slope * (f - f0)) / (1.0 - d_s * f)).clamp(0.0, 1.0);
            let f_new = (a / (1.0 - d_f * s)).clamp(0.0, self.lambda_star);
            let done = (f_new - f).abs() <= 1e-15 * (1.0 + f.abs());
            f = f_new;
            if done {
                break;
            }
        }
        (s, f)
    }

    /// Time marching. The exposure integrals are linear in `F̄(t_i)` and its
    /// weight inside them is at most `dt/2`, so each kernel differs from its
    /// linearization by at most `dt²/8 (ΔF)²`; a step is accepted once that
    /// bound, summed over the row, is below `tol`.
    fn march(&self, settings: &SolverSettings) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>, SolverReport), FllnError> {
        let n = self.grid.len();
        let dt = self.grid.dt();
        let half = 0.5 * dt;
        let mut sbar = vec![0.0; n];
        let mut fbar = vec![0.0; n];
        let mut ubar = vec![0.0; n];
        let mut sf = vec![0.0; n];
        let mut worst_passes = 0;
        let mut total = 0;
        let mut residual: f64 = 0.0;
        let mut mass = 1.0;
        for i in 0..n {
            let a = self.force_known(i, &sf);
            let mut f0 = match i {
                0 => a,
                1 => fbar[0],
                _ => (2.0 * fbar[i - 1] - fbar[i - 2]).clamp(0.0, self.lambda_star),
            };
            let mut passes = 0;
            loop {
                passes += 1;
                fbar[i] = f0;
                let (row, k_diag, ind_diag) = self.linearized_row(i, &fbar, &sf);
                // The integrals over [0, t_0] are empty.
                let (d_s, d_f, d_u) = if i == 0 {
                    (0.0, 0.0, 0.0)
                } else {
                    (half * k_diag, half * self.lbar[0], half * ind_diag)
                };
                let (s, f) = self.local_solve(a, row[0], row[1], f0, d_s, d_f);
                let delta = f - f0;
                let bound = dt * dt / 8.0 * delta * delta * mass;
                sbar[i] = s;
                fbar[i] = f;
                ubar[i] = (row[2] + row[3] * delta + d_u * s * f).clamp(0.0, 1.0);
                if bound < settings.tol {
                    residual = residual.max(bound);
                    break;
                }
                if passes >= settings.max_iter {
                    return Err(FllnError::NotConverged {
                        iterations: passes,
                        residual: bound,
                    });
                }
                f0 = f;
            }
            sf[i] = sbar[i] * fbar[i];
            mass += trapezoid_weight(dt, 0, i + 1, i) * sf[i];
            worst_passes = worst_passes.max(passes);
            total += passes;
        }
        Ok((
            sbar,
            fbar,
            ubar,
            SolverReport {
                scheme: Scheme::Marching,
                iterations: worst_passes,
                total_iterations: total,
                residual,
                conservation_defect: 0.0,
            },
        ))
    }

    fn picard(&self, settings: &SolverSettings) -> Result<(Vec<f64>, Vec<f64>, SolverReport), FllnError> {
        let grid = self.grid;
        let n = grid.len();
        let initial = self.engine.initial();
        let mut fbar = self.source.clone();
        let mut sbar: Vec<f64> = grid
            .times()
            .map(|t| {
                let infected = if self.p > 0.0 { initial.mean_susceptibility(t) } else { 0.0 };
                self.p * infected + (1.0 - self.p)
            })
            .collect();
        let mut change = f64::INFINITY;
        for iteration in 1..=settings.max_iter {
            let force = self.engine.force_unchecked(grid.dt(), &fbar);
            let sf: Vec<f64> = sbar.iter().zip(&fbar).map(|(s, f)| s * f).collect();
            let rows: Vec<(f64, f64)> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let t = grid.time(i);
                    let mut s = self.engine.entry(KernelKind::InitGammaSurv, &force, t, 0.0, t);
                    let mut f = self.source[i];
                    for j in 0..=i {
                        let w = trapezoid_weight(grid.dt(), 0, i, j);
                        if w == 0.0 {
                            continue;
                        }
                        let k = self.engine.entry(KernelKind::GammaSurv, &force, t, grid.time(j), t);
                        s += w * k * sf[j];
                        f += w * self.lbar[i - j] * sf[j];
                    }
                    (s.clamp(0.0, 1.0), f.clamp(0.0, self.lambda_star))
                })
                .collect();
            change = 0.0;
            for (i, (s, f)) in rows.into_iter().enumerate() {
                change = change.max((s - sbar[i]).abs()).max((f - fbar[i]).abs());
                sbar[i] = s;
                fbar[i] = f;
            }
            if change < settings.tol {
                return Ok((
                    sbar,
                    fbar,
                    SolverReport {
                        scheme: Scheme::Picard,
                        iterations: iteration,
                        total_iterations: iteration,
                        residual: change,
                        conservation_defect: 0.0,
                    },
                ));
            }
        }
        Err(FllnError::NotConverged {
            iterations: settings.max_iter,
            residual: change,
        })
    }

    /// `Ī` by its renewal equation.
    fn infected(&self, sbar: &[f64], fbar: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let initial = self.engine.initial();
        let sf: Vec<f64> = sbar.iter().zip(fbar).map(|(s, f)| s * f).collect();
        let survival: Vec<f64> = grid.times().map(|t| self.fresh.duration_survival(t)).collect();
        (0..grid.len())
            .map(|i| {
                let mut inf = if self.p > 0.0 {
                    self.p * initial.duration_survival(grid.time(i))
                } else {
                    0.0
                };
                for j in 0..=i {
                    inf += trapezoid_weight(grid.dt(), 0, i, j) * survival[i - j] * sf[j];
                }
                inf.clamp(0.0, 1.0)
            })
            .collect()
    }

    /// `Ū` from the survival kernels of the final force.
    fn uninfected(&self, sbar: &[f64], fbar: &[f64]) -> Vec<f64> {
        let grid = self.grid;
        let force = self.engine.force_unchecked(grid.dt(), fbar);
        let sf: Vec<f64> = sbar.iter().zip(fbar).map(|(s, f)| s * f).collect();
        (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let t = grid.time(i);
                let mut u = self.engine.entry(KernelKind::InitIndSurv, &force, t, 0.0, t);
                for j in 0..=i {
                    let w = trapezoid_weight(grid.dt(), 0, i, j);
                    if w == 0.0 {
                        continue;
                    }
                    u += w * self.engine.entry(KernelKind::IndSurv, &force, t, grid.time(j), t) * sf[j];
                }
                u.clamp(0.0, 1.0)
            })
            .collect()
    }
}

fn conservation_defect(ubar: &[f64], ibar: &[f64]) -> f64 {
    ubar.iter()
        .zip(ibar)
        .map(|(u, i)| (u + i - 1.0).abs())
        .fold(0.0, f64::max)
}

/// Solve the limit system on `grid`.
pub fn solve_flln(model: &Model, grid: &TimeGrid, settings: &SolverSettings) -> Result<LimitSolution, FllnError> {
    if !(settings.tol.is_finite() && settings.tol > 0.0) {
        return Err(FllnError::BadTolerance(settings.tol));
    }
    let problem = Problem::new(model, grid);
    let (sbar, fbar, ubar, mut report) = match settings.scheme {
        Scheme::Marching => {
            let (s, f, u, r) = problem.march(settings)?;
            (s, f, Some(u), r)
        }
        Scheme::Picard => {
            let (s, f, r) = problem.picard(settings)?;
            (s, f, None, r)
        }
    };
    let ubar = ubar.unwrap_or_else(|| problem.uninfected(&sbar, &fbar));
    let ibar = problem.infected(&sbar, &fbar);
    report.conservation_defect = conservation_defect(&ubar, &ibar);
    Ok(LimitSolution {
        grid: *grid,
        sbar,
        fbar,
        ubar,
        ibar,
        report,
    })
}

/// Recompute `ubar` and `ibar` of a solution from its `(S̄, F̄)` and record
/// the conservation defect.
pub fn derive_compartments(solution: &mut LimitSolution, model: &Model) {
    let problem = Problem::new(model, &solution.grid);
    solution.ubar = problem.uninfected(&solution.sbar, &solution.fbar);
    solution.ibar = problem.infected(&solution.sbar, &solution.fbar);
    solution.report.conservation_defect = conservation_defect(&solution.ubar, &solution.ibar);
}

/// Sup-norm residual of the discrete `(S̄, F̄)` equations, recomputed from
/// scratch with kernels built from the given force.
pub fn discrete_residual(model: &Model, grid: &TimeGrid, sbar: &[f64], fbar: &[f64]) -> f64 {
    let problem = Problem::new(model, grid);
    let sf: Vec<f64> = sbar.iter().zip(fbar).map(|(s, f)| s * f).collect();
    let force = problem.engine.force_unchecked(grid.dt(), fbar);
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let t = grid.time(i);
            let mut s = problem.engine.entry(KernelKind::InitGammaSurv, &force, t, 0.0, t);
            let mut f = problem.source[i];
            for j in 0..=i {
                let w = trapezoid_weight(grid.dt(), 0, i, j);
                s += w * problem.engine.entry(KernelKind::GammaSurv, &force, t, grid.time(j), t) * sf[j];
                f += w * problem.lbar[i - j] * sf[j];
            }
            (s - sbar[i]).abs().max((f - fbar[i]).abs())
        })
        .reduce(|| 0.0, f64::max)
}

/// RK4 solution of `I' = λ (1 - I) I - μ I` on the grid.
pub fn solve_markovian_ode(lambda: f64, mu: f64, i0: f64, grid: &TimeGrid) -> Result<Vec<f64>, FllnError> {
    if !(lambda > 0.0 && mu > 0.0 && lambda.is_finite() && mu.is_finite()) {
        return Err(FllnError::BadRates { lambda, mu });
    }
    let rhs = |i: f64| lambda * (1.0 - i) * i - mu * i;
    let h = grid.dt();
    let mut out = Vec::with_capacity(grid.len());
    let mut y = i0;
    out.push(y);
    for _ in 0..grid.steps() {
        let k1 = rhs(y);
        let k2 = rhs(y + 0.5 * h * k1);
        let k3 = rhs(y + 0.5 * h * k2);
        let k4 = rhs(y + h * k3);
        y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        out.push(y);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiles::{DurationLaw, InitialLaw, ProfileLaw};

    fn markov(p: f64) -> Model {
        let law = ProfileLaw::sis_indicator(2.0, DurationLaw::Exponential { rate: 1.0 }).unwrap();
        let init = InitialLaw::like_fresh(p, &law).unwrap();
        Model::new(law, init)
    }

    fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn no_infection_source() {
        let grid = TimeGrid::new(5.0, 0.1).unwrap();
        let sol = solve_flln(&markov(0.0), &grid, &SolverSettings::default()).unwrap();
        assert!(sol.fbar.iter().all(|&f| f == 0.0));
        assert!(sol.sbar.iter().all(|&s| s == 1.0));
        assert!(sol.ibar.iter().all(|&i| i == 0.0));
        assert!(sol.ubar.iter().all(|&u| u == 1.0));
    }

    #[test]
    fn markovian_sis_matches_ode() {
        let grid = TimeGrid::new(20.0, 0.01).unwrap();
        let sol = solve_flln(&markov(0.1), &grid, &SolverSettings::default()).unwrap();
        let ode = solve_markovian_ode(2.0, 1.0, 0.1, &grid).unwrap();
        assert!(sup_diff(&sol.ibar, &ode) < 1e-3, "{}", sup_diff(&sol.ibar, &ode));
        assert!((sol.ibar[grid.len() - 1] - 0.5).abs() < 0.01);
        assert_eq!(sol.ibar[0], 0.1);
        assert!(sol.report.conservation_defect < 1e-3);
    }

    #[test]
    fn ode_oracle_properties() {
        let grid = TimeGrid::new(20.0, 0.01).unwrap();
        assert!(solve_markovian_ode(2.0, 1.0, 0.0, &grid).unwrap().iter().all(|&i| i == 0.0));
        let up = solve_markovian_ode(2.0, 1.0, 0.1, &grid).unwrap();
        assert!((up[grid.len() - 1] - 0.5).abs() < 0.01);
        let down = solve_markovian_ode(1.0, 2.0, 0.3, &grid).unwrap();
        assert!(down.windows(2).all(|w| w[1] < w[0]));
        assert!(solve_markovian_ode(0.0, 1.0, 0.1, &grid).is_err());
    }

    #[test]
    fn picard_and_marching_agree() {
        let law = ProfileLaw::sis_gradual(1.5, DurationLaw::Gamma { shape: 2.0, scale: 0.5 }, 0.8).unwrap();
        let init = InitialLaw::like_fresh(0.2, &law).unwrap();
        let model = Model::new(law, init);
        let grid = TimeGrid::new(3.0, 0.05).unwrap();
        let march = solve_flln(&model, &grid, &SolverSettings::default()).unwrap();
        let picard = solve_flln(
            &model,
            &grid,
            &SolverSettings {
                scheme: Scheme::Picard,
                ..SolverSettings::default()
            },
        )
        .unwrap();
        assert!(sup_diff(&march.fbar, &picard.fbar) < 1e-8);
        assert!(sup_diff(&march.sbar, &picard.sbar) < 1e-8);
        assert!(discrete_residual(&model, &grid, &march.sbar, &march.fbar) < 1e-8);
        for s in &march.sbar {
            assert!((0.0..=1.0).contains(s));
        }
    }

    #[test]
    fn picard_fixed_point_is_stable() {
        let model = markov(0.1);
        let grid = TimeGrid::new(2.0, 0.05).unwrap();
        let base = SolverSettings {
            scheme: Scheme::Picard,
            ..SolverSettings::default()
        };
        let a = solve_flln(&model, &grid, &base).unwrap();
        let b = solve_flln(&model, &grid, &SolverSettings { max_iter: 400, ..base }).unwrap();
        assert_eq!(a, b);
        let short = solve_flln(&model, &grid, &SolverSettings { max_iter: 2, ..base });
        assert!(matches!(short, Err(FllnError::NotConverged { .. })));
    }

    #[test]
    fn grid_refinement_is_second_order() {
        let law = ProfileLaw::sis_gradual(2.0, DurationLaw::Exponential { rate: 1.0 }, 1.0).unwrap();
        let init = InitialLaw::like_fresh(0.1, &law).unwrap();
        let model = Model::new(law, init);
        let coarse = TimeGrid::new(4.0, 0.1).unwrap();
        let sols: Vec<_> = [coarse, coarse.refined(), coarse.refined().refined()]
            .iter()
            .map(|g| solve_flln(&model, g, &SolverSettings::default()).unwrap())
            .collect();
        let on_coarse = |s: &LimitSolution, stride: usize| -> Vec<f64> {
            s.fbar.iter().step_by(stride).copied().collect()
        };
        let e1 = sup_diff(&on_coarse(&sols[0], 1), &on_coarse(&sols[1], 2));
        let e2 = sup_diff(&on_coarse(&sols[1], 2), &on_coarse(&sols[2], 4));
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }
}
