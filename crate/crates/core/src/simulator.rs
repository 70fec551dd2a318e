//! Exact event-driven simulation of the N-individual model.
//!
//! Every individual `k` owns a dominating Poisson stream of candidate
//! infection times with rate `λ_*` and uniform marks `u ∈ (0, λ_*]`. A
//! candidate at time `t` is accepted iff `u ≤ γ_k(ς_k(t⁻)) F̄^N(t⁻)`, which
//! realizes the thinning construction with no time discretization. On the
//! `i`-th acceptance a fresh profile is drawn from the stream keyed
//! `(seed, k, i)`; the initial profile comes from `(seed, k, 0)`. Because
//! streams are addressed by key, the same randomness drives the population,
//! the mean-field agents and the quarantine variant.
//!
//! Grid outputs are left limits: a grid point that coincides with an event or
//! a profile breakpoint is sampled before it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{CumulativeForce, GridError, TimeGrid};
use crate::profiles::{sample_initial, sample_pair, Model, ProfileRealization};

/// Default cap on the expected number of candidate events `N λ_* T`.
pub const DEFAULT_MAX_CANDIDATES: f64 = 5e8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("population size must be at least 1")]
    EmptyPopulation,
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("expected {expected:.3e} candidate events exceeds the cap {cap:.3e}")]
    TooManyCandidates { expected: f64, cap: f64 },
    #[error("limit curve covers {got} grid points, simulation grid has {expected}")]
    HorizonMismatch { expected: usize, got: usize },
    #[error("quarantined index {index} out of range for population of {n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error("quarantine set must hold one or two distinct indices, got {0:?}")]
    BadQuarantineSet(Vec<usize>),
}

/// How initially infected individuals are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialAssignment {
    /// Individuals `0..⌊N p⌋` are infected, the rest never infected.
    #[default]
    Deterministic,
    /// Each individual is infected independently with probability `p`.
    Bernoulli,
}

/// How `F̄^N(t⁻)` is evaluated at candidate times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForceEvaluation {
    /// Running sum updated at profile breakpoints.
    #[default]
    Incremental,
    /// Full `O(N)` sum at every candidate.
    Direct,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimSettings {
    pub n: usize,
    pub grid: TimeGrid,
    pub seed: u64,
    pub assignment: InitialAssignment,
    pub force: ForceEvaluation,
    pub max_candidates: f64,
}

impl SimSettings {
    pub fn new(n: usize, grid: TimeGrid, seed: u64) -> Self {
        Self {
            n,
            grid,
            seed,
            assignment: InitialAssignment::default(),
            force: ForceEvaluation::default(),
            max_candidates: DEFAULT_MAX_CANDIDATES,
        }
    }

    fn check(&self, model: &Model) -> Result<(), SimError> {
        if self.n == 0 {
            return Err(SimError::EmptyPopulation);
        }
        let expected = self.n as f64 * model.lambda_star() * self.grid.horizon();
        if expected > self.max_candidates {
            return Err(SimError::TooManyCandidates {
                expected,
                cap: self.max_candidates,
            });
        }
        Ok(())
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream keyed `(master, k, i)`; `i = -1` is the candidate
/// stream of individual `k`, `i ≥ 0` its `i`-th profile draw.
pub fn stream_seed(master: u64, k: u64, i: i64) -> u64 {
    splitmix64(splitmix64(splitmix64(master) ^ k) ^ (i as u64))
}

/// Master seed of replicate `r` of an ensemble.
pub fn replicate_seed(master: u64, r: u64) -> u64 {
    stream_seed(master, r, -2)
}

fn stream(master: u64, k: usize, i: i64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, k as u64, i))
}

/// The candidate stream of one individual: `(gap, mark)` pairs.
struct Candidates {
    rng: ChaCha8Rng,
    lambda_star: f64,
}

impl Candidates {
    fn new(master: u64, k: usize, lambda_star: f64) -> Self {
        Self {
            rng: stream(master, k, -1),
            lambda_star,
        }
    }

    // Consumed as gap, mark, gap, mark, ...: the gap is drawn when a
    // candidate is scheduled and its mark when it fires.
    fn gap(&mut self) -> f64 {
        let e: f64 = Exp1.sample(&mut self.rng);
        e / self.lambda_star
    }

    fn mark(&mut self) -> f64 {
        let v: f64 = self.rng.random();
        self.lambda_star * (1.0 - v)
    }
}

/// Initial profile of individual `k`.
pub fn initial_profile(
    model: &Model,
    n: usize,
    k: usize,
    master: u64,
    assignment: InitialAssignment,
) -> ProfileRealization {
    let mut rng = stream(master, k, 0);
    match assignment {
        InitialAssignment::Bernoulli => sample_initial(&model.init, &mut rng),
        InitialAssignment::Deterministic => {
            let infected = (n as f64 * model.init.p_infected()).floor() as usize;
            if k < infected {
                sample_pair(model.init.infected_profile(), &mut rng)
            } else {
                ProfileRealization::never_infected()
            }
        }
    }
}

fn fresh_profile(model: &Model, master: u64, k: usize, i: u32) -> ProfileRealization {
    sample_pair(&model.law, &mut stream(master, k, i as i64))
}

/// One accepted infection: time, individual, new infection index.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: f64,
    pub k: usize,
    pub i: u32,
}

/// Grid samples of one population run.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: TimeGrid,
    pub n: usize,
    pub lambda_star: f64,
    pub fbar: Vec<f64>,
    pub sbar: Vec<f64>,
    pub infected: Vec<usize>,
    pub uninfected: Vec<usize>,
    pub events: Vec<Event>,
}

impl Trajectory {
    /// Checks conservation and the rate bounds at every grid point.
    pub fn check_invariants(&self) -> Result<(), String> {
        for g in 0..self.grid.len() {
            if self.infected[g] + self.uninfected[g] != self.n {
                return Err(format!("conservation fails at grid index {g}"));
            }
            if !(0.0..=self.lambda_star * (1.0 + 1e-12)).contains(&self.fbar[g]) {
                return Err(format!("fbar {} out of range at grid index {g}", self.fbar[g]));
            }
            if !(0.0..=1.0 + 1e-12).contains(&self.sbar[g]) {
                return Err(format!("sbar {} out of range at grid index {g}", self.sbar[g]));
            }
        }
        Ok(())
    }

    /// Event times of each individual, in order.
    pub fn event_times_by_individual(&self) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.n];
        for e in &self.events {
            out[e.k].push(e.t);
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Pending {
    t: f64,
    k: usize,
    /// Infection count of `k` when scheduled; stale once it changes.
    version: u32,
    /// Age of the profile at `t` (breakpoints only).
    age: f64,
}

impl PartialEq for Pending {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Pending {}
impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Pending {
    // Min-heap on (t, k).
    fn cmp(&self, other: &Self) -> Ordering {
        other.t.total_cmp(&self.t).then_with(|| other.k.cmp(&self.k))
    }
}

struct Population<'a> {
    model: &'a Model,
    settings: &'a SimSettings,
    lambda_star: f64,
    weights: Vec<f64>,
    profiles: Vec<ProfileRealization>,
    tau: Vec<f64>,
    count: Vec<u32>,
    streams: Vec<Candidates>,
    candidates: BinaryHeap<Pending>,
    breakpoints: BinaryHeap<Pending>,
    contrib: Vec<f64>,
    fsum: f64,
    updates: usize,
}

impl<'a> Population<'a> {
    fn new(model: &'a Model, settings: &'a SimSettings, quarantined: &[usize]) -> Self {
        let n = settings.n;
        let lambda_star = model.lambda_star();
        let mut weights = vec![1.0; n];
        for &q in quarantined {
            weights[q] = 0.0;
        }
        let profiles: Vec<_> = (0..n)
            .map(|k| initial_profile(model, n, k, settings.seed, settings.assignment))
            .collect();
        let mut streams: Vec<_> = (0..n)
            .map(|k| Candidates::new(settings.seed, k, lambda_star))
            .collect();
        let mut candidates = BinaryHeap::with_capacity(n);
        for (k, s) in streams.iter_mut().enumerate() {
            candidates.push(Pending {
                t: s.gap(),
                k,
                version: 0,
                age: 0.0,
            });
        }
        let mut pop = Self {
            model,
            settings,
            lambda_star,
            weights,
            profiles,
            tau: vec![0.0; n],
            count: vec![0; n],
            streams,
            candidates,
            breakpoints: BinaryHeap::new(),
            contrib: vec![0.0; n],
            fsum: 0.0,
            updates: 0,
        };
        for k in 0..n {
            pop.set_contribution(k, 0.0, 0.0);
        }
        pop.refresh_sum();
        pop
    }

    fn refresh_sum(&mut self) {
        self.fsum = self.contrib.iter().sum();
        self.updates = 0;
    }

    /// Set `k`'s force contribution to its value at profile age `age`
    /// (absolute time `t`) and schedule its next breakpoint.
    fn set_contribution(&mut self, k: usize, t: f64, age: f64) {
        let new = self.weights[k] * self.profiles[k].lambda(age);
        self.fsum += new - self.contrib[k];
        self.contrib[k] = new;
        self.updates += 1;
        if self.updates >= self.settings.n {
            self.refresh_sum();
        }
        if let Some(next) = self.profiles[k].next_infectivity_change(age) {
            self.breakpoints.push(Pending {
                t: t + (next - age),
                k,
                version: self.count[k],
                age: next,
            });
        }
    }

    fn force_left(&self, t: f64) -> f64 {
        let n = self.settings.n as f64;
        let sum = match self.settings.force {
            ForceEvaluation::Incremental => self.fsum,
            ForceEvaluation::Direct => (0..self.settings.n)
                .map(|k| self.weights[k] * self.profiles[k].lambda_left(t - self.tau[k]))
                .sum(),
        };
        (sum / n).clamp(0.0, self.lambda_star)
    }

    fn next_breakpoint_time(&mut self) -> f64 {
        while let Some(top) = self.breakpoints.peek() {
            if top.version == self.count[top.k] {
                return top.t;
            }
            self.breakpoints.pop();
        }
        f64::INFINITY
    }

    fn sample(&self, t: f64, out: &mut Trajectory) {
        let n = self.settings.n;
        let mut s = 0.0;
        let mut infected = 0;
        for k in 0..n {
            let age = t - self.tau[k];
            s += self.profiles[k].gamma_left(age);
            if self.profiles[k].infectious_left(age) {
                infected += 1;
            }
        }
        out.fbar.push(self.force_left(t));
        out.sbar.push((s / n as f64).clamp(0.0, 1.0));
        out.infected.push(infected);
        out.uninfected.push(n - infected);
    }

    fn run(mut self) -> Trajectory {
        let grid = self.settings.grid;
        let horizon = grid.horizon();
        let mut out = Trajectory {
            grid,
            n: self.settings.n,
            lambda_star: self.lambda_star,
            fbar: Vec::with_capacity(grid.len()),
            sbar: Vec::with_capacity(grid.len()),
            infected: Vec::with_capacity(grid.len()),
            uninfected: Vec::with_capacity(grid.len()),
            events: Vec::new(),
        };
        let mut g = 0;
        loop {
            let tc = self.candidates.peek().map_or(f64::INFINITY, |c| c.t);
            let tb = self.next_breakpoint_time();
            let tg = if g < grid.len() { grid.time(g) } else { f64::INFINITY };
            // Ties: grid sample, then candidate, then breakpoint, so both
            // grid values and acceptance tests see left limits.
            if tg <= tc && tg <= tb {
                if tg == f64::INFINITY {
                    break;
                }
                self.sample(tg, &mut out);
                g += 1;
            } else if tc <= tb {
                if tc > horizon {
                    // Only breakpoints past the horizon remain relevant.
                    self.candidates.clear();
                    continue;
                }
                let c = self.candidates.pop().expect("peeked");
                self.candidate(c.t, c.k, &mut out);
            } else {
                let b = self.breakpoints.pop().expect("peeked");
                if b.t > horizon {
                    self.breakpoints.clear();
                    continue;
                }
                self.set_contribution(b.k, b.t, b.age);
            }
        }
        out
    }

    fn candidate(&mut self, t: f64, k: usize, out: &mut Trajectory) {
        let mark = self.streams[k].mark();
        let rate = self.profiles[k].gamma_left(t - self.tau[k]) * self.force_left(t);
        if mark <= rate {
            self.count[k] += 1;
            let i = self.count[k];
            self.tau[k] = t;
            self.profiles[k] = fresh_profile(self.model, self.settings.seed, k, i);
            self.set_contribution(k, t, 0.0);
            out.events.push(Event { t, k, i });
        }
        let gap = self.streams[k].gap();
        self.candidates.push(Pending {
            t: t + gap,
            k,
            version: 0,
            age: 0.0,
        });
    }
}

/// Simulate the population on `settings.grid`.
pub fn simulate_population(model: &Model, settings: &SimSettings) -> Result<Trajectory, SimError> {
    settings.check(model)?;
    Ok(Population::new(model, settings, &[]).run())
}

/// Grid samples of one mean-field agent.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentPath {
    /// Infection times.
    pub events: Vec<f64>,
    /// `γ_{A(t)}(ς(t⁻))`.
    pub susceptibility: Vec<f64>,
    /// `λ_{A(t)}(ς(t⁻))`.
    pub infectivity: Vec<f64>,
    /// `1{ς(t⁻) < η_{A(t)}}`; its complement is `1{ς ≥ η}`.
    pub infectious: Vec<bool>,
}

impl AgentPath {
    pub fn recovered(&self, g: usize) -> f64 {
        if self.infectious[g] {
            0.0
        } else {
            1.0
        }
    }
}

/// Simulate one auxiliary agent against a deterministic force of infection
/// (linear between grid points), using individual `k`'s streams of `master`.
pub fn simulate_agent(
    model: &Model,
    grid: &TimeGrid,
    force: &CumulativeForce,
    master: u64,
    k: usize,
    initial: ProfileRealization,
) -> AgentPath {
    let lambda_star = model.lambda_star();
    let mut cands = Candidates::new(master, k, lambda_star);
    let mut profile = initial;
    let mut tau = 0.0;
    let mut count = 0u32;
    let mut path = AgentPath {
        events: Vec::new(),
        susceptibility: Vec::with_capacity(grid.len()),
        infectivity: Vec::with_capacity(grid.len()),
        infectious: Vec::with_capacity(grid.len()),
    };
    let horizon = grid.horizon();
    let mut t = cands.gap();
    for g in 0..grid.len() {
        let tg = grid.time(g);
        while t < tg && t <= horizon {
            let mark = cands.mark();
            let rate = profile.gamma_left(t - tau) * force.value(t).min(lambda_star);
            if mark <= rate {
                count += 1;
                tau = t;
                profile = fresh_profile(model, master, k, count);
                path.events.push(t);
            }
            t += cands.gap();
        }
        let age = tg - tau;
        path.susceptibility.push(profile.gamma_left(age));
        path.infectivity.push(profile.lambda_left(age));
        path.infectious.push(profile.infectious_left(age));
    }
    // Candidates exactly at the horizon still count as events.
    while t <= horizon {
        let mark = cands.mark();
        let rate = profile.gamma_left(t - tau) * force.value(t).min(lambda_star);
        if mark <= rate {
            count += 1;
            tau = t;
            profile = fresh_profile(model, master, k, count);
            path.events.push(t);
        }
        t += cands.gap();
    }
    path
}

fn limit_force(model: &Model, grid: &TimeGrid, fbar: &[f64]) -> Result<CumulativeForce, SimError> {
    if fbar.len() != grid.len() {
        return Err(SimError::HorizonMismatch {
            expected: grid.len(),
            got: fbar.len(),
        });
    }
    Ok(model.kernel_engine().force(grid.dt(), fbar)?)
}

/// Simulate `count` independent agents with Bernoulli initial profiles,
/// agent `a` using the streams of individual `a` under `master`.
pub fn simulate_agents(
    model: &Model,
    grid: &TimeGrid,
    fbar: &[f64],
    master: u64,
    range: std::ops::Range<usize>,
) -> Result<Vec<AgentPath>, SimError> {
    let force = limit_force(model, grid, fbar)?;
    Ok(range
        .into_par_iter()
        .map(|a| {
            let init = initial_profile(model, 1, a, master, InitialAssignment::Bernoulli);
            simulate_agent(model, grid, &force, master, a, init)
        })
        .collect())
}

/// Population/agent coupling summaries on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingDiagnostics {
    /// `sup_t |A^N_k(t) - A_k(t)|` per individual.
    pub sup_count_gap: Vec<u32>,
    /// `√N (F̄^N - F̃)` with `F̃ = (1/N) Σ_k λ_{k,A_k}(ς_k)`.
    pub fhat1: Vec<f64>,
    /// `√N (F̃ - F̄)`.
    pub fhat2: Vec<f64>,
    /// `√N (S̄^N - S̃)`.
    pub shat1: Vec<f64>,
    /// `√N (S̃ - S̄)`.
    pub shat2: Vec<f64>,
    /// `√N (F̄^N - F̄)`.
    pub fhat: Vec<f64>,
    /// `√N (S̄^N - S̄)`.
    pub shat: Vec<f64>,
}

impl CouplingDiagnostics {
    pub fn mean_sup_count_gap(&self) -> f64 {
        self.sup_count_gap.iter().map(|&v| v as f64).sum::<f64>() / self.sup_count_gap.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledRun {
    pub trajectory: Trajectory,
    pub agents: Vec<AgentPath>,
    pub diagnostics: CouplingDiagnostics,
}

/// `sup_t |#{a ≤ t} - #{b ≤ t}|` for sorted time lists.
pub fn sup_count_gap(a: &[f64], b: &[f64]) -> u32 {
    let (mut i, mut j) = (0, 0);
    let mut best = 0i64;
    while i < a.len() || j < b.len() {
        let ta = a.get(i).copied().unwrap_or(f64::INFINITY);
        let tb = b.get(j).copied().unwrap_or(f64::INFINITY);
        if ta <= tb {
            i += 1;
        }
        if tb <= ta {
            j += 1;
        }
        best = best.max((i as i64 - j as i64).abs());
    }
    best as u32
}

/// Population run and its `N` mean-field agents on shared streams. `fbar`
/// and `sbar` are the limit curves on `settings.grid`.
pub fn simulate_coupled(
    model: &Model,
    settings: &SimSettings,
    fbar: &[f64],
    sbar: &[f64],
) -> Result<CoupledRun, SimError> {
    settings.check(model)?;
    let grid = settings.grid;
    let force = limit_force(model, &grid, fbar)?;
    if sbar.len() != grid.len() {
        return Err(SimError::HorizonMismatch {
            expected: grid.len(),
            got: sbar.len(),
        });
    }
    let trajectory = Population::new(model, settings, &[]).run();
    let n = settings.n;
    let agents: Vec<AgentPath> = (0..n)
        .map(|k| {
            let init = initial_profile(model, n, k, settings.seed, settings.assignment);
            simulate_agent(model, &grid, &force, settings.seed, k, init)
        })
        .collect();
    let by_k = trajectory.event_times_by_individual();
    let sup = by_k
        .iter()
        .zip(&agents)
        .map(|(a, agent)| sup_count_gap(a, &agent.events))
        .collect();
    let root = (n as f64).sqrt();
    let mut d = CouplingDiagnostics {
        sup_count_gap: sup,
        fhat1: Vec::with_capacity(grid.len()),
        fhat2: Vec::with_capacity(grid.len()),
        shat1: Vec::with_capacity(grid.len()),
        shat2: Vec::with_capacity(grid.len()),
        fhat: Vec::with_capacity(grid.len()),
        shat: Vec::with_capacity(grid.len()),
    };
    for g in 0..grid.len() {
        let ftilde = agents.iter().map(|a| a.infectivity[g]).sum::<f64>() / n as f64;
        let stilde = agents.iter().map(|a| a.susceptibility[g]).sum::<f64>() / n as f64;
        d.fhat1.push(root * (trajectory.fbar[g] - ftilde));
        d.fhat2.push(root * (ftilde - fbar[g]));
        d.shat1.push(root * (trajectory.sbar[g] - stilde));
        d.shat2.push(root * (stilde - sbar[g]));
        d.fhat.push(root * (trajectory.fbar[g] - fbar[g]));
        d.shat.push(root * (trajectory.sbar[g] - sbar[g]));
    }
    Ok(CoupledRun {
        trajectory,
        agents,
        diagnostics: d,
    })
}

/// Baseline/variant comparison for a quarantine run.
#[derive(Debug, Clone, PartialEq)]
pub struct QuarantineDiagnostics {
    /// First time each individual's infection history differs between the
    /// runs (for quarantined individuals, also the first time they carry
    /// infectivity in the baseline); `+∞` if never.
    pub divergence: Vec<f64>,
    /// `|D(t)|` on the grid.
    pub descendants: Vec<usize>,
    /// `|F̄^N(t) - F̄^N_{(k)}(t)|` on the grid.
    pub fbar_gap: Vec<f64>,
    /// `|S̄^N(t) - S̄^N_{(k)}(t)|` on the grid.
    pub sbar_gap: Vec<f64>,
    /// Largest excess of a gap over its bound (`≤ 0` when the bounds hold).
    pub worst_excess: f64,
}

impl QuarantineDiagnostics {
    pub fn bounds_hold(&self) -> bool {
        self.worst_excess <= 1e-12
    }

    pub fn final_descendants(&self) -> usize {
        *self.descendants.last().expect("nonempty grid")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuarantineRun {
    pub baseline: Trajectory,
    pub variant: Trajectory,
    pub diagnostics: QuarantineDiagnostics,
}

fn first_divergence(a: &[f64], b: &[f64]) -> f64 {
    for j in 0..a.len().max(b.len()) {
        let ta = a.get(j).copied().unwrap_or(f64::INFINITY);
        let tb = b.get(j).copied().unwrap_or(f64::INFINITY);
        if ta != tb {
            return ta.min(tb);
        }
    }
    f64::INFINITY
}

/// Run the baseline and a variant in which the `quarantined` individuals
/// contribute no infectivity (they remain susceptible).
pub fn simulate_quarantine(
    model: &Model,
    settings: &SimSettings,
    quarantined: &[usize],
) -> Result<QuarantineRun, SimError> {
    settings.check(model)?;
    let n = settings.n;
    if quarantined.is_empty()
        || quarantined.len() > 2
        || (quarantined.len() == 2 && quarantined[0] == quarantined[1])
    {
        return Err(SimError::BadQuarantineSet(quarantined.to_vec()));
    }
    if let Some(&index) = quarantined.iter().find(|&&q| q >= n) {
        return Err(SimError::IndexOutOfRange { index, n });
    }
    let baseline = Population::new(model, settings, &[]).run();
    let variant = Population::new(model, settings, quarantined).run();
    let a = baseline.event_times_by_individual();
    let b = variant.event_times_by_individual();
    let mut divergence: Vec<f64> = a.iter().zip(&b).map(|(x, y)| first_divergence(x, y)).collect();
    for &q in quarantined {
        let init = initial_profile(model, n, q, settings.seed, settings.assignment);
        let carries = if init.lambda(0.0) > 0.0 {
            0.0
        } else {
            a[q].first().copied().unwrap_or(f64::INFINITY)
        };
        divergence[q] = divergence[q].min(carries);
    }
    let grid = settings.grid;
    let lambda_star = model.lambda_star();
    let mut sorted = divergence.clone();
    sorted.sort_by(f64::total_cmp);
    let mut d = QuarantineDiagnostics {
        divergence,
        descendants: Vec::with_capacity(grid.len()),
        fbar_gap: Vec::with_capacity(grid.len()),
        sbar_gap: Vec::with_capacity(grid.len()),
        worst_excess: f64::NEG_INFINITY,
    };
    for g in 0..grid.len() {
        let t = grid.time(g);
        let count = sorted.partition_point(|&x| x <= t);
        let fgap = (baseline.fbar[g] - variant.fbar[g]).abs();
        let sgap = (baseline.sbar[g] - variant.sbar[g]).abs();
        let size = count as f64 / n as f64;
        // Small slack for rounding in the two running sums.
        let slack = 1e-12 * (1.0 + lambda_star);
        d.worst_excess = d
            .worst_excess
            .max(fgap - lambda_star * size - slack)
            .max(sgap - size - slack);
        d.descendants.push(count);
        d.fbar_gap.push(fgap);
        d.sbar_gap.push(sgap);
    }
    Ok(QuarantineRun {
        baseline,
        variant,
        diagnostics: d,
    })
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

    #[test]
    fn no_initial_infection_means_no_events() {
        let model = markov(0.0);
        let s = SimSettings::new(200, TimeGrid::new(5.0, 0.1).unwrap(), 3);
        let tr = simulate_population(&model, &s).unwrap();
        assert!(tr.events.is_empty());
        assert!(tr.fbar.iter().all(|&f| f == 0.0));
        assert!(tr.infected.iter().all(|&i| i == 0));
    }

    #[test]
    fn invariants_and_reproducibility() {
        let model = markov(0.1);
        let s = SimSettings::new(300, TimeGrid::new(5.0, 0.05).unwrap(), 17);
        let a = simulate_population(&model, &s).unwrap();
        a.check_invariants().unwrap();
        let b = simulate_population(&model, &s).unwrap();
        assert_eq!(a, b);
        assert!(!a.events.is_empty());
    }

    #[test]
    fn incremental_and_direct_force_agree() {
        let law = ProfileLaw::sis_gradual(1.5, DurationLaw::Gamma { shape: 2.0, scale: 0.4 }, 1.0).unwrap();
        let init = InitialLaw::like_fresh(0.2, &law).unwrap();
        let model = Model::new(law, init);
        let mut s = SimSettings::new(150, TimeGrid::new(4.0, 0.1).unwrap(), 5);
        let a = simulate_population(&model, &s).unwrap();
        s.force = ForceEvaluation::Direct;
        let b = simulate_population(&model, &s).unwrap();
        assert_eq!(a.events, b.events);
        for (x, y) in a.fbar.iter().zip(&b.fbar) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn resource_guard() {
        let model = markov(0.1);
        let mut s = SimSettings::new(1000, TimeGrid::new(10.0, 0.1).unwrap(), 1);
        s.max_candidates = 100.0;
        assert!(matches!(
            simulate_population(&model, &s),
            Err(SimError::TooManyCandidates { .. })
        ));
    }

    #[test]
    fn sup_gap_merges_lists() {
        assert_eq!(sup_count_gap(&[], &[]), 0);
        assert_eq!(sup_count_gap(&[1.0, 2.0], &[1.0, 2.0]), 0);
        assert_eq!(sup_count_gap(&[1.0, 2.0], &[3.0]), 2);
        assert_eq!(sup_count_gap(&[1.0], &[0.5, 0.7, 1.5]), 2);
    }

    #[test]
    fn agent_with_zero_force_keeps_initial_profile() {
        let model = markov(1.0);
        let grid = TimeGrid::new(3.0, 0.5).unwrap();
        let zero = vec![0.0; grid.len()];
        let agents = simulate_agents(&model, &grid, &zero, 9, 0..50).unwrap();
        for a in &agents {
            assert!(a.events.is_empty());
            for g in 0..grid.len() {
                assert_eq!(a.recovered(g) + if a.infectious[g] { 1.0 } else { 0.0 }, 1.0);
            }
        }
        assert!(matches!(
            simulate_agents(&model, &grid, &zero[1..], 9, 0..1),
            Err(SimError::HorizonMismatch { .. })
        ));
    }

    #[test]
    fn agents_reach_markov_endemic_level() {
        // SIS with λ=2, Exp(1): endemic infected fraction 1/2 and force λ/2.
        let model = markov(0.5);
        let grid = TimeGrid::new(10.0, 0.5).unwrap();
        let f = vec![1.0; grid.len()];
        let agents = simulate_agents(&model, &grid, &f, 21, 0..10_000).unwrap();
        let last = grid.len() - 1;
        let frac = agents.iter().filter(|a| a.infectious[last]).count() as f64 / agents.len() as f64;
        let se = (0.25f64 / 10_000.0).sqrt();
        assert!((frac - 0.5).abs() < 4.0 * se, "{frac}");
    }

    #[test]
    fn coupled_with_no_infection_is_trivial() {
        let model = markov(0.0);
        let grid = TimeGrid::new(2.0, 0.1).unwrap();
        let s = SimSettings::new(100, grid, 2);
        let zeros = vec![0.0; grid.len()];
        let ones = vec![1.0; grid.len()];
        let run = simulate_coupled(&model, &s, &zeros, &ones).unwrap();
        assert!(run.diagnostics.sup_count_gap.iter().all(|&g| g == 0));
        for v in [&run.diagnostics.fhat, &run.diagnostics.shat, &run.diagnostics.fhat1, &run.diagnostics.shat2] {
            assert!(v.iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn coupled_decomposition_adds_up() {
        let model = markov(0.2);
        let grid = TimeGrid::new(1.0, 0.05).unwrap();
        let s = SimSettings::new(200, grid, 8);
        let f: Vec<f64> = grid.times().map(|t| 0.4 * (1.0 + t)).collect();
        let sb: Vec<f64> = grid.times().map(|t| 0.8 - 0.1 * t).collect();
        let run = simulate_coupled(&model, &s, &f, &sb).unwrap();
        let d = &run.diagnostics;
        for g in 0..grid.len() {
            assert!((d.fhat[g] - d.fhat1[g] - d.fhat2[g]).abs() < 1e-9);
            assert!((d.shat[g] - d.shat1[g] - d.shat2[g]).abs() < 1e-9);
        }
    }

    #[test]
    fn quarantine_of_untouched_individual_changes_nothing() {
        let model = markov(0.0);
        let s = SimSettings::new(50, TimeGrid::new(2.0, 0.1).unwrap(), 4);
        let run = simulate_quarantine(&model, &s, &[7]).unwrap();
        assert_eq!(run.baseline, run.variant);
        assert!(run.diagnostics.descendants.iter().all(|&d| d == 0));
        assert!(run.diagnostics.bounds_hold());
        assert!(matches!(
            simulate_quarantine(&model, &s, &[50]),
            Err(SimError::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn quarantine_bounds_hold_pathwise() {
        let model = markov(0.1);
        let grid = TimeGrid::new(1.5, 0.05).unwrap();
        for seed in 0..20 {
            let s = SimSettings::new(200, grid, seed);
            let run = simulate_quarantine(&model, &s, &[0]).unwrap();
            assert!(run.diagnostics.bounds_hold(), "seed {seed}: {}", run.diagnostics.worst_excess);
            assert!(run.diagnostics.descendants[0] >= 1);
        }
    }
}
