//! Random infectivity/susceptibility profiles.
//!
//! A profile is a pair of random functions of the time elapsed since an
//! individual's last infection: the infectivity `λ(x)`, which vanishes after
//! the infectious duration `η`, and the susceptibility `γ(x) ∈ [0, 1]`, which
//! vanishes before `η`. Three families are built in:
//!
//! * `SisIndicator`: `λ(x) = λ 1{x < η}`, `γ(x) = 1{x ≥ η}`;
//! * `SisGradual`: same `λ`, `γ(x) = (1 - exp(-θ (x - η))) 1{x ≥ η}`;
//! * `PiecewiseConstant`: up to seven infectivity segments followed by up to
//!   seven susceptibility segments and a terminal susceptibility level, with
//!   independent segment durations drawn from laws with bounded densities.
//!
//! The module also evaluates every expectation kernel the limit equations
//! need. Each kernel carries the survival factor
//! `exp(-∫_s^t γ(u - s) F(u) du)` of an individual infected at time `s`
//! against a deterministic force of infection `F`. For the two SIS families
//! the expectation over `η` is a Gauss–Legendre quadrature against the
//! duration density (or a point evaluation for deterministic durations); for
//! the piecewise family it is a Monte-Carlo average over a fixed sample of
//! profiles drawn once per law, so repeated evaluations are deterministic.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use rayon::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Gamma as GammaDist};
use thiserror::Error;

use crate::grid::{CumulativeForce, GridError, TimeGrid};

/// Tail mass left out of the quadrature over continuous duration laws.
const QUADRATURE_TAIL: f64 = 1e-13;
const GAUSS_LEGENDRE_NODES: usize = 64;
/// Largest number of segments on either side of a piecewise profile.
pub const MAX_SEGMENTS: usize = 7;
/// Largest grid (points) for which a full three-index kernel table is stored.
pub const MAX_TETRA_GRID: usize = 400;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProfileError {
    #[error("{field}: {reason}")]
    InvalidParameter { field: String, reason: String },
}

fn invalid(field: impl Into<String>, reason: impl Into<String>) -> ProfileError {
    ProfileError::InvalidParameter {
        field: field.into(),
        reason: reason.into(),
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("three-index kernel table for {points} grid points exceeds the cap of {cap}; use the slab API")]
    TableTooLarge { points: usize, cap: usize },
}

/// Law of the infectious duration `η`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DurationLaw {
    Exponential { rate: f64 },
    Deterministic { value: f64 },
    Gamma { shape: f64, scale: f64 },
}

impl DurationLaw {
    pub fn validate(&self, field: &str) -> Result<(), ProfileError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(format!("{field}.{name}"), format!("must be positive and finite, got {v}")))
            }
        };
        match *self {
            DurationLaw::Exponential { rate } => positive("rate", rate),
            DurationLaw::Deterministic { value } => positive("value", value),
            DurationLaw::Gamma { shape, scale } => {
                positive("shape", shape)?;
                positive("scale", scale)
            }
        }
    }

    /// True when the law has a bounded density (so its CDF is Lipschitz).
    pub fn has_bounded_density(&self) -> bool {
        match *self {
            DurationLaw::Exponential { .. } => true,
            DurationLaw::Deterministic { .. } => false,
            DurationLaw::Gamma { shape, .. } => shape >= 1.0,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            DurationLaw::Exponential { rate } => 1.0 / rate,
            DurationLaw::Deterministic { value } => value,
            DurationLaw::Gamma { shape, scale } => shape * scale,
        }
    }

    fn gamma_dist(shape: f64, scale: f64) -> GammaDist {
        GammaDist::new(shape, 1.0 / scale).expect("validated gamma parameters")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            DurationLaw::Exponential { rate } => {
                let e: f64 = Exp1.sample(rng);
                e / rate
            }
            DurationLaw::Deterministic { value } => value,
            DurationLaw::Gamma { shape, scale } => {
                rand_distr::Gamma::new(shape, scale)
                    .expect("validated gamma parameters")
                    .sample(rng)
            }
        }
    }

    /// `P(η ≤ t)`.
    pub fn cdf(&self, t: f64) -> f64 {
        1.0 - self.survival(t)
    }

    /// `P(η > t)`.
    pub fn survival(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 1.0;
        }
        match *self {
            DurationLaw::Exponential { rate } => (-rate * t).exp(),
            DurationLaw::Deterministic { value } => {
                if t >= value {
                    0.0
                } else {
                    1.0
                }
            }
            DurationLaw::Gamma { shape, scale } => Self::gamma_dist(shape, scale).sf(t),
        }
    }

    fn ln_density(&self, t: f64) -> f64 {
        match *self {
            DurationLaw::Exponential { rate } => rate.ln() - rate * t,
            DurationLaw::Deterministic { .. } => f64::NEG_INFINITY,
            DurationLaw::Gamma { shape, scale } => Self::gamma_dist(shape, scale).ln_pdf(t),
        }
    }

    /// Smallest `q` with `P(η > q) ≤ tail` (continuous laws).
    fn upper_quantile(&self, tail: f64) -> f64 {
        match *self {
            DurationLaw::Exponential { rate } => -tail.ln() / rate,
            DurationLaw::Deterministic { value } => value,
            DurationLaw::Gamma { shape, scale } => {
                let dist = Self::gamma_dist(shape, scale);
                let mut hi = shape * scale + 1.0;
                while dist.sf(hi) > tail {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if dist.sf(mid) > tail {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo < 1e-12 * hi {
                        break;
                    }
                }
                hi
            }
        }
    }
}

/// One constant piece of a piecewise profile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub value: f64,
    pub duration: DurationLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseParams {
    /// Consecutive infectious segments starting at infection; `η` is the end
    /// of the last one. Values must lie in `(0, λ_*]`.
    pub infectivity: Vec<Segment>,
    /// Consecutive susceptibility levels starting at `η`, values in `[0, 1]`.
    pub susceptibility: Vec<Segment>,
    /// Susceptibility after the last segment.
    pub final_susceptibility: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    SisIndicator,
    SisGradual,
    PiecewiseConstant,
}

/// Settings of the Monte-Carlo kernel backend (piecewise family).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonteCarloSettings {
    pub samples: usize,
    pub seed: u64,
}

impl Default for MonteCarloSettings {
    fn default() -> Self {
        Self {
            samples: 4096,
            seed: 0x5_eed0_f1a5,
        }
    }
}

/// Joint law of a fresh infection's `(λ, γ)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileLaw {
    family: Family,
    lambda_base: f64,
    duration: DurationLaw,
    waning_rate: f64,
    lambda_star: f64,
    piecewise: Option<PiecewiseParams>,
    monte_carlo: MonteCarloSettings,
}

impl ProfileLaw {
    pub fn sis_indicator(lambda_base: f64, duration: DurationLaw) -> Result<Self, ProfileError> {
        Self::build(Family::SisIndicator, lambda_base, duration, 0.0, None, None)
    }

    pub fn sis_gradual(
        lambda_base: f64,
        duration: DurationLaw,
        waning_rate: f64,
    ) -> Result<Self, ProfileError> {
        Self::build(Family::SisGradual, lambda_base, duration, waning_rate, None, None)
    }

    pub fn piecewise(params: PiecewiseParams) -> Result<Self, ProfileError> {
        let peak = params
            .infectivity
            .iter()
            .map(|s| s.value)
            .fold(0.0, f64::max);
        let duration = params
            .infectivity
            .first()
            .map(|s| s.duration)
            .unwrap_or(DurationLaw::Deterministic { value: 1.0 });
        Self::build(Family::PiecewiseConstant, peak, duration, 0.0, None, Some(params))
    }

    fn build(
        family: Family,
        lambda_base: f64,
        duration: DurationLaw,
        waning_rate: f64,
        lambda_star: Option<f64>,
        piecewise: Option<PiecewiseParams>,
    ) -> Result<Self, ProfileError> {
        if !(lambda_base.is_finite() && lambda_base > 0.0) {
            return Err(invalid("lambda_base", format!("must be positive, got {lambda_base}")));
        }
        duration.validate("duration")?;
        match family {
            Family::SisGradual => {
                if !(waning_rate.is_finite() && waning_rate > 0.0) {
                    return Err(invalid(
                        "waning_rate",
                        format!("must be positive for the gradual family, got {waning_rate}"),
                    ));
                }
            }
            _ => {
                if !(waning_rate.is_finite() && waning_rate >= 0.0) {
                    return Err(invalid("waning_rate", format!("must be nonnegative, got {waning_rate}")));
                }
            }
        }
        if let Some(p) = &piecewise {
            validate_piecewise(p)?;
        }
        let lambda_star = lambda_star.unwrap_or(lambda_base);
        let law = Self {
            family,
            lambda_base,
            duration,
            waning_rate,
            lambda_star,
            piecewise,
            monte_carlo: MonteCarloSettings::default(),
        };
        law.check_lambda_star()?;
        Ok(law)
    }

    fn check_lambda_star(&self) -> Result<(), ProfileError> {
        if !(self.lambda_star.is_finite() && self.lambda_star > 0.0) {
            return Err(invalid("lambda_star", format!("must be positive, got {}", self.lambda_star)));
        }
        if self.lambda_star < self.lambda_base {
            return Err(invalid(
                "lambda_star",
                format!(
                    "bound {} is below the largest infectivity value {}",
                    self.lambda_star, self.lambda_base
                ),
            ));
        }
        Ok(())
    }

    /// Replace the a.s. infectivity bound (must dominate every value).
    pub fn with_lambda_star(mut self, lambda_star: f64) -> Result<Self, ProfileError> {
        self.lambda_star = lambda_star;
        self.check_lambda_star()?;
        Ok(self)
    }

    pub fn with_monte_carlo(mut self, settings: MonteCarloSettings) -> Result<Self, ProfileError> {
        if settings.samples < 2 {
            return Err(invalid("monte_carlo.samples", "need at least 2 samples"));
        }
        self.monte_carlo = settings;
        Ok(self)
    }

    pub fn family(&self) -> Family {
        self.family
    }
    pub fn lambda_base(&self) -> f64 {
        self.lambda_base
    }
    pub fn duration(&self) -> DurationLaw {
        self.duration
    }
    pub fn waning_rate(&self) -> f64 {
        self.waning_rate
    }
    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }
    pub fn piecewise_params(&self) -> Option<&PiecewiseParams> {
        self.piecewise.as_ref()
    }
    pub fn monte_carlo(&self) -> MonteCarloSettings {
        self.monte_carlo
    }

    fn template(&self) -> Option<Template> {
        match self.family {
            Family::SisIndicator => Some(Template {
                lambda: self.lambda_base,
                theta: None,
            }),
            Family::SisGradual => Some(Template {
                lambda: self.lambda_base,
                theta: Some(self.waning_rate),
            }),
            Family::PiecewiseConstant => None,
        }
    }

    /// `λ̄(t) = E[λ(t)]`. Closed form for the SIS families, Monte-Carlo
    /// over the law's fixed profile sample otherwise.
    pub fn mean_infectivity(&self, t: f64) -> f64 {
        Expectation::new(self).mean_infectivity(t)
    }

    /// `F(t) = P(η ≤ t)`.
    pub fn duration_cdf(&self, t: f64) -> f64 {
        1.0 - Expectation::new(self).duration_survival(t)
    }
}

fn validate_piecewise(p: &PiecewiseParams) -> Result<(), ProfileError> {
    if p.infectivity.is_empty() {
        return Err(invalid("piecewise.infectivity", "need at least one infectious segment"));
    }
    if p.infectivity.len() > MAX_SEGMENTS {
        return Err(invalid(
            "piecewise.infectivity",
            format!("at most {MAX_SEGMENTS} segments, got {}", p.infectivity.len()),
        ));
    }
    if p.susceptibility.len() > MAX_SEGMENTS {
        return Err(invalid(
            "piecewise.susceptibility",
            format!("at most {MAX_SEGMENTS} segments, got {}", p.susceptibility.len()),
        ));
    }
    for (side, segments, lo_open) in [
        ("infectivity", &p.infectivity, true),
        ("susceptibility", &p.susceptibility, false),
    ] {
        for (i, seg) in segments.iter().enumerate() {
            let field = format!("piecewise.{side}[{i}]");
            let ok = if lo_open { seg.value > 0.0 } else { seg.value >= 0.0 };
            if !(seg.value.is_finite() && ok) || (!lo_open && seg.value > 1.0) {
                return Err(invalid(format!("{field}.value"), format!("out of range: {}", seg.value)));
            }
            seg.duration.validate(&format!("{field}.duration"))?;
            if !seg.duration.has_bounded_density() {
                return Err(invalid(
                    format!("{field}.duration"),
                    "breakpoint laws need a bounded density (exponential, or gamma with shape >= 1)",
                ));
            }
        }
    }
    if !(0.0..=1.0).contains(&p.final_susceptibility) {
        return Err(invalid(
            "piecewise.final_susceptibility",
            format!("must lie in [0, 1], got {}", p.final_susceptibility),
        ));
    }
    Ok(())
}

/// Law of the initial profiles: a mixture of a never-infected branch
/// (`λ ≡ 0`, `γ ≡ 1`, `η = 0`) and a freshly infected branch.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    p_infected: f64,
    infected_profile: ProfileLaw,
}

impl InitialLaw {
    pub fn new(p_infected: f64, infected_profile: ProfileLaw) -> Result<Self, ProfileError> {
        if !(0.0..=1.0).contains(&p_infected) {
            return Err(invalid("p_infected", format!("must lie in [0, 1], got {p_infected}")));
        }
        Ok(Self {
            p_infected,
            infected_profile,
        })
    }

    /// Initial infected profiles distributed like fresh infections.
    pub fn like_fresh(p_infected: f64, law: &ProfileLaw) -> Result<Self, ProfileError> {
        Self::new(p_infected, law.clone())
    }

    pub fn p_infected(&self) -> f64 {
        self.p_infected
    }

    pub fn infected_profile(&self) -> &ProfileLaw {
        &self.infected_profile
    }

    /// `λ̄₀(t) = E[λ₀(t) | η₀ > 0]`.
    pub fn mean_infectivity(&self, t: f64) -> f64 {
        self.infected_profile.mean_infectivity(t)
    }

    /// `F₀(t) = P(η₀ ≤ t)`, including the never-infected mass at zero.
    pub fn duration_cdf(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        (1.0 - self.p_infected) + self.p_infected * self.infected_profile.duration_cdf(t)
    }
}

/// A fresh-infection law together with the initial-condition law.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub law: ProfileLaw,
    pub init: InitialLaw,
}

impl Model {
    pub fn new(law: ProfileLaw, init: InitialLaw) -> Self {
        Self { law, init }
    }

    /// Rate bound of the candidate streams.
    pub fn lambda_star(&self) -> f64 {
        system_lambda_star(&self.law, &self.init)
    }

    pub fn kernel_engine(&self) -> KernelEngine {
        KernelEngine::new(&self.law, &self.init)
    }
}

/// Largest infectivity any individual can carry, fresh or initial.
pub fn system_lambda_star(law: &ProfileLaw, init: &InitialLaw) -> f64 {
    if init.p_infected() > 0.0 {
        law.lambda_star().max(init.infected_profile().lambda_star())
    } else {
        law.lambda_star()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Template {
    lambda: f64,
    theta: Option<f64>,
}

impl Template {
    fn realize(&self, eta: f64) -> ProfileRealization {
        ProfileRealization {
            eta,
            infectivity: Infectivity::Constant(self.lambda),
            susceptibility: match self.theta {
                Some(theta) => Susceptibility::Waning(theta),
                None => Susceptibility::Indicator,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Infectivity {
    Zero,
    /// `value` on `[0, η)`.
    Constant(f64),
    /// `(end age, value)` pieces; the last end is `η`.
    Steps(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, PartialEq)]
enum Susceptibility {
    /// `γ ≡ 1`.
    Full,
    Indicator,
    Waning(f64),
    /// `(end age, value)` pieces starting at `η`, then `last` forever.
    Steps { pieces: Vec<(f64, f64)>, last: f64 },
}

/// One realized `(λ, γ)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRealization {
    eta: f64,
    infectivity: Infectivity,
    susceptibility: Susceptibility,
}

impl ProfileRealization {
    /// The never-infected initial profile.
    pub fn never_infected() -> Self {
        Self {
            eta: 0.0,
            infectivity: Infectivity::Zero,
            susceptibility: Susceptibility::Full,
        }
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn is_never_infected(&self) -> bool {
        matches!(self.infectivity, Infectivity::Zero)
    }

    /// `λ(x)`, right-continuous.
    pub fn lambda(&self, x: f64) -> f64 {
        match &self.infectivity {
            Infectivity::Zero => 0.0,
            Infectivity::Constant(v) => {
                if (0.0..self.eta).contains(&x) {
                    *v
                } else {
                    0.0
                }
            }
            Infectivity::Steps(pieces) => {
                if x < 0.0 {
                    return 0.0;
                }
                pieces.iter().find(|p| x < p.0).map_or(0.0, |p| p.1)
            }
        }
    }

    /// Left limit `λ(x⁻)`; at `x = 0` the value at zero.
    pub fn lambda_left(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.lambda(0.0);
        }
        match &self.infectivity {
            Infectivity::Zero => 0.0,
            Infectivity::Constant(v) => {
                if x <= self.eta {
                    *v
                } else {
                    0.0
                }
            }
            Infectivity::Steps(pieces) => pieces.iter().find(|p| x <= p.0).map_or(0.0, |p| p.1),
        }
    }

    /// `γ(x)`, right-continuous.
    pub fn gamma(&self, x: f64) -> f64 {
        match &self.susceptibility {
            Susceptibility::Full => 1.0,
            Susceptibility::Indicator => {
                if x >= self.eta {
                    1.0
                } else {
                    0.0
                }
            }
            Susceptibility::Waning(theta) => {
                if x >= self.eta {
                    -(-theta * (x - self.eta)).exp_m1()
                } else {
                    0.0
                }
            }
            Susceptibility::Steps { pieces, last } => {
                if x < self.eta {
                    0.0
                } else {
                    pieces.iter().find(|p| x < p.0).map_or(*last, |p| p.1)
                }
            }
        }
    }

    /// Left limit `γ(x⁻)`; at `x = 0` the value at zero.
    pub fn gamma_left(&self, x: f64) -> f64 {
        if x <= 0.0 {
            return self.gamma(0.0);
        }
        match &self.susceptibility {
            Susceptibility::Full => 1.0,
            Susceptibility::Indicator => {
                if x > self.eta {
                    1.0
                } else {
                    0.0
                }
            }
            Susceptibility::Waning(_) => self.gamma(x),
            Susceptibility::Steps { pieces, last } => {
                if x <= self.eta {
                    0.0
                } else {
                    pieces.iter().find(|p| x <= p.0).map_or(*last, |p| p.1)
                }
            }
        }
    }

    /// `1{x < η}`.
    pub fn infectious(&self, x: f64) -> bool {
        x < self.eta
    }

    /// Left limit of `1{x < η}`; at `x = 0` the value at zero.
    pub fn infectious_left(&self, x: f64) -> bool {
        if x <= 0.0 {
            self.eta > 0.0
        } else {
            x <= self.eta
        }
    }

    /// Next age strictly after `x` at which `λ` may jump.
    pub fn next_infectivity_change(&self, x: f64) -> Option<f64> {
        match &self.infectivity {
            Infectivity::Zero => None,
            Infectivity::Constant(_) => (x < self.eta).then_some(self.eta),
            Infectivity::Steps(pieces) => pieces.iter().map(|p| p.0).find(|&end| end > x),
        }
    }

    /// `∫_s^t γ(u - s) F(u) du` for an individual (re)started at time `s`.
    pub fn exposure(&self, s: f64, t: f64, force: &CumulativeForce) -> f64 {
        if t <= s {
            return 0.0;
        }
        match &self.susceptibility {
            Susceptibility::Full => force.integral(s, t),
            Susceptibility::Indicator => force.integral(s + self.eta, t),
            Susceptibility::Waning(theta) => {
                let b = s + self.eta;
                if b >= t {
                    0.0
                } else {
                    force.waning_integral(*theta, b, t)
                }
            }
            Susceptibility::Steps { pieces, last } => {
                let mut acc = 0.0;
                let mut start = s + self.eta;
                for &(end, value) in pieces {
                    if start >= t {
                        return acc;
                    }
                    let stop = (s + end).min(t);
                    acc += value * force.integral(start, stop);
                    start = s + end;
                }
                if start < t {
                    acc += last * force.integral(start, t);
                }
                acc
            }
        }
    }
}

/// Draw one fresh `(λ, γ)` realization.
pub fn sample_pair<R: Rng + ?Sized>(law: &ProfileLaw, rng: &mut R) -> ProfileRealization {
    if let Some(template) = law.template() {
        let eta = law.duration.sample(rng);
        return template.realize(eta);
    }
    let params = law.piecewise.as_ref().expect("piecewise family carries its segments");
    let mut end = 0.0;
    let mut infectivity = Vec::with_capacity(params.infectivity.len());
    for seg in &params.infectivity {
        end += seg.duration.sample(rng);
        infectivity.push((end, seg.value));
    }
    let eta = end;
    let mut pieces = Vec::with_capacity(params.susceptibility.len());
    for seg in &params.susceptibility {
        end += seg.duration.sample(rng);
        pieces.push((end, seg.value));
    }
    ProfileRealization {
        eta,
        infectivity: Infectivity::Steps(infectivity),
        susceptibility: Susceptibility::Steps {
            pieces,
            last: params.final_susceptibility,
        },
    }
}

/// Draw an initial profile: infected with probability `p_infected`.
pub fn sample_initial<R: Rng + ?Sized>(init: &InitialLaw, rng: &mut R) -> ProfileRealization {
    let u: f64 = rng.random();
    if u < init.p_infected {
        sample_pair(&init.infected_profile, rng)
    } else {
        ProfileRealization::never_infected()
    }
}

fn gauss_legendre() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre_rule(GAUSS_LEGENDRE_NODES))
}

/// Nodes and weights of the `n`-point Gauss–Legendre rule on `[-1, 1]`.
fn gauss_legendre_rule(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, 0.0);
            for j in 0..n {
                let p2 = p1;
                p1 = p0;
                p0 = ((2 * j + 1) as f64 * z * p1 - j as f64 * p2) / (j + 1) as f64;
            }
            dp = n as f64 * (z * p0 - p1) / (z * z - 1.0);
            let dz = p0 / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -z;
        nodes[n - 1 - i] = z;
        let w = 2.0 / ((1.0 - z * z) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

/// `(η, weight × density)` pairs of the Gauss–Legendre rule on `[0, hi]`.
fn quadrature_nodes(duration: &DurationLaw, hi: f64) -> Vec<(f64, f64)> {
    if hi <= 0.0 {
        return Vec::new();
    }
    let (nodes, weights) = gauss_legendre();
    let half = 0.5 * hi;
    nodes
        .iter()
        .zip(weights)
        .map(|(xi, w)| {
            let eta = half * (xi + 1.0);
            (eta, half * w * duration.ln_density(eta).exp())
        })
        .collect()
}

#[derive(Debug)]
struct LagNodes {
    dt: f64,
    nodes: Vec<Vec<(f64, f64)>>,
}

impl LagNodes {
    fn get(&self, upper: f64) -> Option<&Vec<(f64, f64)>> {
        let x = upper / self.dt;
        let d = x.round();
        if d >= 0.0 && (x - d).abs() <= 1e-9 * x.max(1.0) {
            self.nodes.get(d as usize)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone)]
enum Backend {
    Quadrature {
        template: Template,
        duration: DurationLaw,
        upper: f64,
        lags: Option<Arc<LagNodes>>,
    },
    MonteCarlo {
        samples: Vec<ProfileRealization>,
    },
}

/// Expectations over one profile law, by quadrature or a fixed sample.
#[derive(Debug, Clone)]
pub struct Expectation {
    backend: Backend,
}

impl Expectation {
    pub fn new(law: &ProfileLaw) -> Self {
        match law.template() {
            Some(template) => Self {
                backend: Backend::Quadrature {
                    template,
                    duration: law.duration,
                    upper: law.duration.upper_quantile(QUADRATURE_TAIL),
                    lags: None,
                },
            },
            None => Self::monte_carlo(law),
        }
    }

    /// Monte-Carlo backend for any family, with the law's sample settings.
    pub fn monte_carlo(law: &ProfileLaw) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(law.monte_carlo.seed);
        let samples = (0..law.monte_carlo.samples)
            .map(|_| sample_pair(law, &mut rng))
            .collect();
        Self {
            backend: Backend::MonteCarlo { samples },
        }
    }

    /// Precompute quadrature nodes and density weights for every upper
    /// limit that is a whole number of grid steps. Results are unchanged;
    /// repeated kernel evaluation on the grid gets cheaper.
    pub fn for_grid(mut self, grid: &TimeGrid) -> Self {
        if let Backend::Quadrature {
            duration,
            upper: q_hi,
            lags,
            ..
        } = &mut self.backend
        {
            if !matches!(duration, DurationLaw::Deterministic { .. }) {
                let nodes = (0..grid.len())
                    .map(|d| quadrature_nodes(duration, (d as f64 * grid.dt()).min(*q_hi)))
                    .collect();
                *lags = Some(Arc::new(LagNodes { dt: grid.dt(), nodes }));
            }
        }
        self
    }

    pub fn is_monte_carlo(&self) -> bool {
        matches!(self.backend, Backend::MonteCarlo { .. })
    }

    /// `E[g(profile)]` with its Monte-Carlo standard error (zero for
    /// quadrature). `g` must vanish whenever `η > upper`.
    pub fn stats<G>(&self, upper: f64, g: G) -> (f64, f64)
    where
        G: Fn(&ProfileRealization) -> f64,
    {
        match &self.backend {
            Backend::Quadrature {
                template,
                duration,
                upper: q_hi,
                lags,
            } => {
                if let DurationLaw::Deterministic { value } = *duration {
                    // Snap grid-aligned ages onto the point mass.
                    let tol = 1e-9 * value.max(1.0);
                    if (value - upper).abs() <= tol {
                        return (g(&template.realize(upper)), 0.0);
                    }
                    if value < upper {
                        return (g(&template.realize(value)), 0.0);
                    }
                    return (0.0, 0.0);
                }
                let hi = upper.min(*q_hi);
                if hi <= 0.0 {
                    return (0.0, 0.0);
                }
                let cached = lags.as_ref().and_then(|l| l.get(upper));
                let fresh;
                let nodes = match cached {
                    Some(n) => n,
                    None => {
                        fresh = quadrature_nodes(duration, hi);
                        &fresh
                    }
                };
                let mut acc = 0.0;
                for &(eta, w) in nodes {
                    let value = g(&template.realize(eta));
                    if value != 0.0 {
                        acc += w * value;
                    }
                }
                if upper > *q_hi {
                    let tail = duration.survival(*q_hi) - duration.survival(upper);
                    acc += tail * g(&template.realize(*q_hi));
                }
                (acc, 0.0)
            }
            Backend::MonteCarlo { samples } => {
                let m = samples.len() as f64;
                let (mut s1, mut s2) = (0.0, 0.0);
                for p in samples {
                    let v = g(p);
                    s1 += v;
                    s2 += v * v;
                }
                let mean = s1 / m;
                let var = ((s2 - m * mean * mean) / (m - 1.0)).max(0.0);
                (mean, (var / m).sqrt())
            }
        }
    }

    /// Vector-valued `E[g(profile)]` (no standard errors); same contract on
    /// `upper` as [`Expectation::stats`].
    pub fn expect_array<const K: usize, G>(&self, upper: f64, g: G) -> [f64; K]
    where
        G: Fn(&ProfileRealization) -> [f64; K],
    {
        let mut acc = [0.0; K];
        let mut add = |w: f64, v: [f64; K]| {
            for (a, x) in acc.iter_mut().zip(v) {
                *a += w * x;
            }
        };
        match &self.backend {
            Backend::Quadrature {
                template,
                duration,
                upper: q_hi,
                lags,
            } => {
                if let DurationLaw::Deterministic { value } = *duration {
                    let tol = 1e-9 * value.max(1.0);
                    if (value - upper).abs() <= tol {
                        add(1.0, g(&template.realize(upper)));
                    } else if value < upper {
                        add(1.0, g(&template.realize(value)));
                    }
                    return acc;
                }
                let hi = upper.min(*q_hi);
                if hi <= 0.0 {
                    return acc;
                }
                let cached = lags.as_ref().and_then(|l| l.get(upper));
                let fresh;
                let nodes = match cached {
                    Some(n) => n,
                    None => {
                        fresh = quadrature_nodes(duration, hi);
                        &fresh
                    }
                };
                for &(eta, w) in nodes {
                    add(w, g(&template.realize(eta)));
                }
                if upper > *q_hi {
                    let tail = duration.survival(*q_hi) - duration.survival(upper);
                    add(tail, g(&template.realize(*q_hi)));
                }
            }
            Backend::MonteCarlo { samples } => {
                let w = 1.0 / samples.len() as f64;
                for p in samples {
                    add(w, g(p));
                }
            }
        }
        acc
    }

    pub fn expect<G>(&self, upper: f64, g: G) -> f64
    where
        G: Fn(&ProfileRealization) -> f64,
    {
        self.stats(upper, g).0
    }

    pub fn mean_infectivity(&self, t: f64) -> f64 {
        match &self.backend {
            Backend::Quadrature {
                template, duration, ..
            } => template.lambda * duration.survival(t),
            Backend::MonteCarlo { .. } => self.expect(f64::INFINITY, |p| p.lambda(t)),
        }
    }

    /// `P(η > t)`.
    pub fn duration_survival(&self, t: f64) -> f64 {
        match &self.backend {
            Backend::Quadrature { duration, .. } => duration.survival(t),
            Backend::MonteCarlo { .. } => {
                self.expect(f64::INFINITY, |p| if p.eta > t { 1.0 } else { 0.0 })
            }
        }
    }

    /// `E[γ(t)]` of a profile started at zero.
    pub fn mean_susceptibility(&self, t: f64) -> f64 {
        self.expect(t, |p| p.gamma(t))
    }
}

/// Every expectation kernel of the limit equations. With `surv =
/// exp(-∫_s^t γ(u-s) F(u) du)` for fresh profiles and
/// `surv₀ = exp(-∫_0^t γ₀(u) F(u) du)` for initial ones:
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    /// `E[γ(t-s) surv]`, indexed `(t, s)`.
    GammaSurv,
    /// `E[γ(t-s) γ(r-s) surv]`, indexed `(t, s, r)`, `s ≤ r ≤ t`.
    GammaPairSurv,
    /// `E[1{t-s ≥ η} surv]`, indexed `(t, s)`.
    IndSurv,
    /// `E[1{t-s ≥ η} γ(r-s) surv]`, indexed `(t, s, r)`.
    IndGammaSurv,
    /// `E[γ₀(t) surv₀]`, indexed `(t)`.
    InitGammaSurv,
    /// `E[γ₀(t) γ₀(r) surv₀]`, indexed `(t, r)`.
    InitGammaPairSurv,
    /// `E[1{t ≥ η₀} surv₀]`, indexed `(t)`.
    InitIndSurv,
    /// `E[1{t ≥ η₀} γ₀(r) surv₀]`, indexed `(t, r)`.
    InitIndGammaSurv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelShape {
    Curve,
    Triangle,
    Tetra,
}

impl KernelKind {
    pub const ALL: [KernelKind; 8] = [
        KernelKind::GammaSurv,
        KernelKind::GammaPairSurv,
        KernelKind::IndSurv,
        KernelKind::IndGammaSurv,
        KernelKind::InitGammaSurv,
        KernelKind::InitGammaPairSurv,
        KernelKind::InitIndSurv,
        KernelKind::InitIndGammaSurv,
    ];

    pub fn shape(self) -> KernelShape {
        use KernelKind::*;
        match self {
            InitGammaSurv | InitIndSurv => KernelShape::Curve,
            GammaSurv | IndSurv | InitGammaPairSurv | InitIndGammaSurv => KernelShape::Triangle,
            GammaPairSurv | IndGammaSurv => KernelShape::Tetra,
        }
    }
}

/// Grid table of one kernel kind.
///
/// Layout: curves by `i`; triangles `(i, j)`, `j ≤ i`, at `i(i+1)/2 + j`;
/// tetra `(i, j, l)`, `j ≤ l ≤ i`, at `i(i+1)(i+2)/6 + l(l+1)/2 + j`.
#[derive(Debug, Clone)]
pub struct KernelTable {
    kind: KernelKind,
    grid: TimeGrid,
    values: Vec<f64>,
}

#[inline]
fn tri(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

#[inline]
fn tetra(i: usize, j: usize, l: usize) -> usize {
    i * (i + 1) * (i + 2) / 6 + tri(l, j)
}

impl KernelTable {
    pub fn kind(&self) -> KernelKind {
        self.kind
    }
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Curve kinds: `K(t_i)`.
    pub fn at(&self, i: usize) -> f64 {
        debug_assert_eq!(self.kind.shape(), KernelShape::Curve);
        self.values[i]
    }

    /// Triangle kinds: `K(t_i, t_j)`, `j ≤ i`.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.kind.shape(), KernelShape::Triangle);
        debug_assert!(j <= i);
        self.values[tri(i, j)]
    }

    /// Tetra kinds: `K(t_i, s_j, r_l)`, `j ≤ l ≤ i`.
    pub fn get3(&self, i: usize, j: usize, l: usize) -> f64 {
        debug_assert_eq!(self.kind.shape(), KernelShape::Tetra);
        debug_assert!(j <= l && l <= i);
        self.values[tetra(i, j, l)]
    }
}

/// Kernel evaluator for a fresh law and an initial law.
#[derive(Debug, Clone)]
pub struct KernelEngine {
    fresh: Expectation,
    initial: Expectation,
    p_infected: f64,
    waning_rates: Vec<f64>,
    lambda_star: f64,
}

impl KernelEngine {
    pub fn new(law: &ProfileLaw, init: &InitialLaw) -> Self {
        Self::assemble(Expectation::new(law), Expectation::new(init.infected_profile()), law, init)
    }

    /// Engine evaluating every expectation by Monte Carlo, whatever the family.
    pub fn monte_carlo(law: &ProfileLaw, init: &InitialLaw) -> Self {
        Self::assemble(
            Expectation::monte_carlo(law),
            Expectation::monte_carlo(init.infected_profile()),
            law,
            init,
        )
    }

    fn assemble(fresh: Expectation, initial: Expectation, law: &ProfileLaw, init: &InitialLaw) -> Self {
        let mut waning_rates = vec![];
        for l in [law, init.infected_profile()] {
            if l.family() == Family::SisGradual && !waning_rates.contains(&l.waning_rate()) {
                waning_rates.push(l.waning_rate());
            }
        }
        Self {
            fresh,
            initial,
            p_infected: init.p_infected(),
            waning_rates,
            lambda_star: system_lambda_star(law, init),
        }
    }

    /// Engine whose quadrature nodes are cached for `grid`'s lags.
    pub fn for_grid(mut self, grid: &TimeGrid) -> Self {
        self.fresh = self.fresh.for_grid(grid);
        self.initial = self.initial.for_grid(grid);
        self
    }

    pub fn fresh(&self) -> &Expectation {
        &self.fresh
    }

    pub fn initial(&self) -> &Expectation {
        &self.initial
    }

    pub fn p_infected(&self) -> f64 {
        self.p_infected
    }

    pub fn lambda_star(&self) -> f64 {
        self.lambda_star
    }

    /// Build the force of infection for kernel evaluation from grid values.
    pub fn force(&self, dt: f64, values: &[f64]) -> Result<CumulativeForce, GridError> {
        CumulativeForce::new(dt, values, &self.waning_rates)
    }

    pub(crate) fn force_unchecked(&self, dt: f64, values: &[f64]) -> CumulativeForce {
        CumulativeForce::new_unchecked(dt, values, &self.waning_rates)
    }

    fn mix(&self, force: &CumulativeForce, t: f64, stats: impl FnOnce() -> (f64, f64)) -> (f64, f64) {
        let never = (1.0 - self.p_infected) * (-force.integral_to(t)).exp();
        if self.p_infected == 0.0 {
            return (never, 0.0);
        }
        let (m, se) = stats();
        (never + self.p_infected * m, self.p_infected * se)
    }

    /// One kernel entry at absolute times `(t, s, r)` with its Monte-Carlo
    /// standard error. Unused indices are ignored: curves read `t`; initial
    /// two-index kinds read `(t, r)`; fresh two-index kinds read `(t, s)`.
    pub fn entry_stats(
        &self,
        kind: KernelKind,
        force: &CumulativeForce,
        t: f64,
        s: f64,
        r: f64,
    ) -> (f64, f64) {
        use KernelKind::*;
        let surv = |p: &ProfileRealization, start: f64| (-p.exposure(start, t, force)).exp();
        let rec = |p: &ProfileRealization, age: f64| if age >= p.eta { 1.0 } else { 0.0 };
        match kind {
            GammaSurv => self.fresh.stats(t - s, |p| {
                let g = p.gamma(t - s);
                if g == 0.0 {
                    0.0
                } else {
                    g * surv(p, s)
                }
            }),
            IndSurv => self.fresh.stats(t - s, |p| {
                if rec(p, t - s) == 0.0 {
                    0.0
                } else {
                    surv(p, s)
                }
            }),
            GammaPairSurv => self.fresh.stats(r - s, |p| {
                let g = p.gamma(t - s) * p.gamma(r - s);
                if g == 0.0 {
                    0.0
                } else {
                    g * surv(p, s)
                }
            }),
            IndGammaSurv => self.fresh.stats(r - s, |p| {
                let g = rec(p, t - s) * p.gamma(r - s);
                if g == 0.0 {
                    0.0
                } else {
                    g * surv(p, s)
                }
            }),
            InitGammaSurv => self.mix(force, t, || {
                self.initial.stats(t, |p| {
                    let g = p.gamma(t);
                    if g == 0.0 {
                        0.0
                    } else {
                        g * surv(p, 0.0)
                    }
                })
            }),
            InitIndSurv => self.mix(force, t, || {
                self.initial.stats(t, |p| {
                    if rec(p, t) == 0.0 {
                        0.0
                    } else {
                        surv(p, 0.0)
                    }
                })
            }),
            InitGammaPairSurv => self.mix(force, t, || {
                self.initial.stats(r, |p| {
                    let g = p.gamma(t) * p.gamma(r);
                    if g == 0.0 {
                        0.0
                    } else {
                        g * surv(p, 0.0)
                    }
                })
            }),
            InitIndGammaSurv => self.mix(force, t, || {
                self.initial.stats(r, |p| {
                    let g = rec(p, t) * p.gamma(r);
                    if g == 0.0 {
                        0.0
                    } else {
                        g * surv(p, 0.0)
                    }
                })
            }),
        }
    }

    /// Survival kernels of the `S̄` and `Ū` equations together with their
    /// derivatives in the last force value. `hat` is the force that is zero
    /// on the grid except for a one at the last point, so the exposure's
    /// derivative is the exposure under `hat`. Returns
    /// `[GammaSurv, d GammaSurv, IndSurv, d IndSurv]` at `(t, s)`, or the
    /// initial kinds at `t` when `initial` is set.
    pub fn survival_with_slope(
        &self,
        force: &CumulativeForce,
        hat: &CumulativeForce,
        t: f64,
        s: f64,
        initial: bool,
    ) -> [f64; 4] {
        let g = |p: &ProfileRealization| {
            let gamma = p.gamma(t - s);
            let ind = if t - s >= p.eta { 1.0 } else { 0.0 };
            if gamma == 0.0 && ind == 0.0 {
                return [0.0; 4];
            }
            let surv = (-p.exposure(s, t, force)).exp();
            let slope = -surv * p.exposure(s, t, hat);
            [gamma * surv, gamma * slope, ind * surv, ind * slope]
        };
        if !initial {
            return self.fresh.expect_array(t - s, g);
        }
        let surv = (-force.integral_to(t)).exp();
        let never = 1.0 - self.p_infected;
        let mut out = [never * surv, -never * surv * hat.integral_to(t), 0.0, 0.0];
        out[2] = out[0];
        out[3] = out[1];
        if self.p_infected > 0.0 {
            let m = self.initial.expect_array(t, g);
            for (o, v) in out.iter_mut().zip(m) {
                *o += self.p_infected * v;
            }
        }
        out
    }

    /// `[GammaPairSurv, IndGammaSurv]` at `(t, s, r)` from one pass over the
    /// quadrature nodes.
    pub fn pair_survival(&self, force: &CumulativeForce, t: f64, s: f64, r: f64) -> [f64; 2] {
        self.fresh.expect_array(r - s, |p| {
            let g = p.gamma(r - s);
            if g == 0.0 {
                return [0.0; 2];
            }
            let gt = p.gamma(t - s);
            let ind = if t - s >= p.eta { 1.0 } else { 0.0 };
            if gt == 0.0 && ind == 0.0 {
                return [0.0; 2];
            }
            let w = g * (-p.exposure(s, t, force)).exp();
            [gt * w, ind * w]
        })
    }

    #[inline]
    pub fn entry(&self, kind: KernelKind, force: &CumulativeForce, t: f64, s: f64, r: f64) -> f64 {
        self.entry_stats(kind, force, t, s, r).0
    }

    /// Row `i` of a curve or triangle kind: `K(t_i, t_j)` for `j = 0..=i`
    /// (a single value for curves).
    pub fn row(&self, kind: KernelKind, force: &CumulativeForce, grid: &TimeGrid, i: usize, out: &mut Vec<f64>) {
        out.clear();
        let t = grid.time(i);
        match kind.shape() {
            KernelShape::Curve => out.push(self.entry(kind, force, t, 0.0, t)),
            KernelShape::Triangle => {
                let init = matches!(kind, KernelKind::InitGammaPairSurv | KernelKind::InitIndGammaSurv);
                for j in 0..=i {
                    let tj = grid.time(j);
                    let v = if init {
                        self.entry(kind, force, t, 0.0, tj)
                    } else {
                        self.entry(kind, force, t, tj, t)
                    };
                    out.push(v);
                }
            }
            KernelShape::Tetra => panic!("three-index kernels are read by slab"),
        }
    }

    /// Slab `i` of a three-index kind: `K(t_i, s_j, r_l)` for `j ≤ l ≤ i`,
    /// at position `l(l+1)/2 + j`.
    pub fn slab(&self, kind: KernelKind, force: &CumulativeForce, grid: &TimeGrid, i: usize, out: &mut Vec<f64>) {
        assert_eq!(kind.shape(), KernelShape::Tetra);
        out.clear();
        let t = grid.time(i);
        for l in 0..=i {
            let r = grid.time(l);
            for j in 0..=l {
                out.push(self.entry(kind, force, t, grid.time(j), r));
            }
        }
    }
}

/// Tabulate one kernel kind on a grid for a given force of infection.
pub fn eval_kernel(
    engine: &KernelEngine,
    kind: KernelKind,
    fbar: &[f64],
    grid: &TimeGrid,
) -> Result<KernelTable, KernelError> {
    grid.check_len(fbar.len())?;
    let force = engine.force(grid.dt(), fbar)?;
    let n = grid.len();
    let values = match kind.shape() {
        KernelShape::Curve | KernelShape::Triangle => {
            let rows: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut out = Vec::new();
                    engine.row(kind, &force, grid, i, &mut out);
                    out
                })
                .collect();
            rows.concat()
        }
        KernelShape::Tetra => {
            if n > MAX_TETRA_GRID {
                return Err(KernelError::TableTooLarge {
                    points: n,
                    cap: MAX_TETRA_GRID,
                });
            }
            let slabs: Vec<Vec<f64>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let mut out = Vec::new();
                    engine.slab(kind, &force, grid, i, &mut out);
                    out
                })
                .collect();
            slabs.concat()
        }
    };
    Ok(KernelTable {
        kind,
        grid: *grid,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn markov_sis() -> ProfileLaw {
        ProfileLaw::sis_indicator(2.0, DurationLaw::Exponential { rate: 1.0 }).unwrap()
    }

    #[test]
    fn gauss_legendre_integrates_polynomials() {
        let (x, w) = gauss_legendre_rule(64);
        let sum_w: f64 = w.iter().sum();
        assert!((sum_w - 2.0).abs() < 1e-13);
        let m6: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(6)).sum();
        assert!((m6 - 2.0 / 7.0).abs() < 1e-13);
    }

    #[test]
    fn sis_indicator_deterministic_values() {
        let law = ProfileLaw::sis_indicator(2.0, DurationLaw::Deterministic { value: 1.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = sample_pair(&law, &mut rng);
        assert_eq!(p.lambda(0.5), 2.0);
        assert_eq!(p.lambda(1.5), 0.0);
        assert_eq!(p.gamma(0.5), 0.0);
        assert_eq!(p.gamma(1.5), 1.0);
    }

    #[test]
    fn sis_gradual_closed_form() {
        let law = ProfileLaw::sis_gradual(2.0, DurationLaw::Deterministic { value: 1.0 }, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = sample_pair(&law, &mut rng);
        assert!((p.gamma(2.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((p.gamma(2.0) - 0.6321).abs() < 1e-4);
    }

    #[test]
    fn exponential_duration_sample_mean() {
        let law = markov_sis();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let mean = (0..n).map(|_| sample_pair(&law, &mut rng).eta()).sum::<f64>() / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "{mean}");
    }

    #[test]
    fn initial_sampling() {
        let law = ProfileLaw::sis_indicator(2.0, DurationLaw::Deterministic { value: 1.0 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let none = InitialLaw::like_fresh(0.0, &law).unwrap();
        for _ in 0..100 {
            let p = sample_initial(&none, &mut rng);
            assert!(p.is_never_infected());
            assert_eq!(p.gamma(3.7), 1.0);
        }
        let all = InitialLaw::like_fresh(1.0, &law).unwrap();
        assert_eq!(sample_initial(&all, &mut rng).lambda(0.0), 2.0);
        let some = InitialLaw::like_fresh(0.1, &law).unwrap();
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| !sample_initial(&some, &mut rng).is_never_infected())
            .count();
        let frac = hits as f64 / n as f64;
        assert!((frac - 0.1).abs() < 0.003, "{frac}");
    }

    #[test]
    fn mean_infectivity_and_cdf() {
        let law = markov_sis();
        for t in [0.0, 0.3, 1.0, 4.0] {
            assert!((law.mean_infectivity(t) - 2.0 * (-t).exp()).abs() < 1e-14);
        }
        let det = ProfileLaw::sis_indicator(2.0, DurationLaw::Deterministic { value: 1.0 }).unwrap();
        assert_eq!(det.mean_infectivity(1.5), 0.0);
        assert!((law.duration_cdf(1.0) - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert_eq!(det.duration_cdf(0.999), 0.0);
        assert_eq!(det.duration_cdf(1.0), 1.0);
        let init = InitialLaw::like_fresh(0.3, &law).unwrap();
        assert!((init.duration_cdf(0.0) - 0.7).abs() < 1e-15);
    }

    #[test]
    fn gamma_mean_infectivity_matches_monte_carlo() {
        let law = ProfileLaw::sis_indicator(2.0, DurationLaw::Gamma { shape: 2.0, scale: 0.5 }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 1_000_000;
        let hits = (0..n)
            .map(|_| sample_pair(&law, &mut rng).lambda(1.0))
            .sum::<f64>();
        let mc = hits / n as f64;
        let p = mc / 2.0;
        let se = 2.0 * (p * (1.0 - p) / n as f64).sqrt();
        let exact = law.mean_infectivity(1.0);
        // Gamma(2, 1/2): P(η > 1) = (1 + 2) e^{-2}.
        assert!((exact - 2.0 * 3.0 * (-2.0f64).exp()).abs() < 1e-12);
        assert!((mc - exact).abs() < 3.0 * se, "mc {mc} exact {exact} se {se}");
    }

    #[test]
    fn ordering_holds_for_every_family() {
        let families = vec![
            markov_sis(),
            ProfileLaw::sis_gradual(1.5, DurationLaw::Gamma { shape: 3.0, scale: 0.4 }, 0.7).unwrap(),
            piecewise_example(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for law in &families {
            for _ in 0..100_000 {
                let p = sample_pair(law, &mut rng);
                let eta = p.eta();
                // λ vanishes from η on; γ vanishes before η.
                for x in [0.0, 0.5 * eta, 0.999 * eta] {
                    assert!(p.lambda(x) > 0.0 && p.lambda(x) <= law.lambda_star());
                    assert_eq!(p.gamma(x), 0.0);
                }
                for x in [eta, eta + 0.1, eta + 5.0] {
                    assert_eq!(p.lambda(x), 0.0);
                    let g = p.gamma(x);
                    assert!((0.0..=1.0).contains(&g));
                }
            }
        }
    }

    pub(crate) fn piecewise_example() -> ProfileLaw {
        ProfileLaw::piecewise(PiecewiseParams {
            infectivity: vec![
                Segment {
                    value: 1.0,
                    duration: DurationLaw::Exponential { rate: 2.0 },
                },
                Segment {
                    value: 2.5,
                    duration: DurationLaw::Gamma { shape: 2.0, scale: 0.3 },
                },
            ],
            susceptibility: vec![Segment {
                value: 0.4,
                duration: DurationLaw::Exponential { rate: 1.0 },
            }],
            final_susceptibility: 0.9,
        })
        .unwrap()
    }

    #[test]
    fn invalid_parameters_rejected() {
        let err = ProfileLaw::sis_indicator(-1.0, DurationLaw::Exponential { rate: 1.0 }).unwrap_err();
        assert!(err.to_string().starts_with("lambda_base"));
        assert!(ProfileLaw::sis_indicator(1.0, DurationLaw::Exponential { rate: 0.0 }).is_err());
        assert!(ProfileLaw::sis_gradual(1.0, DurationLaw::Exponential { rate: 1.0 }, 0.0).is_err());
        assert!(markov_sis().with_lambda_star(1.0).is_err());
        let bad = ProfileLaw::piecewise(PiecewiseParams {
            infectivity: vec![Segment {
                value: 1.0,
                duration: DurationLaw::Deterministic { value: 1.0 },
            }],
            susceptibility: vec![],
            final_susceptibility: 1.0,
        });
        assert!(bad.is_err());
    }

    fn constant_force(engine: &KernelEngine, grid: &TimeGrid, c: f64) -> Vec<f64> {
        let v = vec![c; grid.len()];
        engine.force(grid.dt(), &v).unwrap();
        v
    }

    #[test]
    fn zero_force_kernels_are_duration_cdf() {
        let law = markov_sis();
        let init = InitialLaw::like_fresh(0.2, &law).unwrap();
        let engine = KernelEngine::new(&law, &init);
        let grid = TimeGrid::new(3.0, 0.1).unwrap();
        let f = constant_force(&engine, &grid, 0.0);
        let k = eval_kernel(&engine, KernelKind::GammaSurv, &f, &grid).unwrap();
        for i in 0..grid.len() {
            for j in 0..=i {
                let a = grid.time(i) - grid.time(j);
                assert!((k.get(i, j) - law.duration_cdf(a)).abs() < 1e-12, "{i} {j}");
            }
            assert_eq!(k.get(i, i), 0.0);
        }
    }

    #[test]
    fn degenerate_susceptibility_kernels() {
        let law = ProfileLaw::piecewise(PiecewiseParams {
            infectivity: vec![Segment {
                value: 1.0,
                duration: DurationLaw::Exponential { rate: 1.0 },
            }],
            susceptibility: vec![],
            final_susceptibility: 0.0,
        })
        .unwrap();
        let init = InitialLaw::like_fresh(0.0, &law).unwrap();
        let engine = KernelEngine::new(&law, &init);
        let grid = TimeGrid::new(2.0, 0.25).unwrap();
        let f = vec![0.3; grid.len()];
        let g = eval_kernel(&engine, KernelKind::GammaSurv, &f, &grid).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
        let gp = eval_kernel(&engine, KernelKind::GammaPairSurv, &f, &grid).unwrap();
        assert!(gp.values().iter().all(|&v| v == 0.0));
        let ind = eval_kernel(&engine, KernelKind::IndSurv, &f, &grid).unwrap();
        // γ ≡ 0 so the survival factor is one and IndSurv is the duration
        // CDF of the fixed Monte-Carlo sample.
        let n = law.monte_carlo().samples as f64;
        for i in 0..grid.len() {
            for j in 0..=i {
                let a = grid.time(i) - grid.time(j);
                let emp = law.duration_cdf(a);
                let exact = 1.0 - (-a).exp();
                assert!((ind.get(i, j) - emp).abs() < 1e-12);
                let se = (exact * (1.0 - exact) / n).sqrt();
                assert!((emp - exact).abs() <= 4.0 * se + 1e-12);
            }
        }
    }

    #[test]
    fn constant_force_closed_form() {
        // E[1{η ≤ a} e^{-c(a-η)}] for η ~ Exp(1): ∫_0^a e^{-c(a-x)} e^{-x} dx.
        let law = markov_sis();
        let init = InitialLaw::like_fresh(0.1, &law).unwrap();
        let engine = KernelEngine::new(&law, &init);
        let grid = TimeGrid::new(5.0, 0.1).unwrap();
        let c = 0.8;
        let f = constant_force(&engine, &grid, c);
        let k = eval_kernel(&engine, KernelKind::GammaSurv, &f, &grid).unwrap();
        let closed = |a: f64| ((-a).exp() - (-c * a).exp()) / (c - 1.0);
        for i in 0..grid.len() {
            for j in 0..=i {
                let a = grid.time(i) - grid.time(j);
                let exact = closed(a);
                let got = k.get(i, j);
                assert!(
                    (got - exact).abs() <= 1e-8 * exact.abs().max(1e-12),
                    "a={a} got {got} exact {exact}"
                );
            }
        }
    }

    #[test]
    fn monte_carlo_backend_agrees_with_quadrature() {
        let law = ProfileLaw::sis_indicator(2.0, DurationLaw::Exponential { rate: 1.0 })
            .unwrap()
            .with_monte_carlo(MonteCarloSettings {
                samples: 20_000,
                seed: 11,
            })
            .unwrap();
        let init = InitialLaw::like_fresh(0.3, &law).unwrap();
        let quad = KernelEngine::new(&law, &init);
        let mc = KernelEngine::monte_carlo(&law, &init);
        let grid = TimeGrid::new(4.5, 0.5).unwrap();
        let f: Vec<f64> = grid.times().map(|t| 0.5 + 0.3 * (t).sin()).collect();
        let fq = quad.force(grid.dt(), &f).unwrap();
        let fm = mc.force(grid.dt(), &f).unwrap();
        for kind in KernelKind::ALL {
            for i in 0..grid.len() {
                let t = grid.time(i);
                for j in 0..=i {
                    let s = grid.time(j);
                    let (a, b) = match kind.shape() {
                        KernelShape::Curve => (t, t),
                        KernelShape::Triangle => (s, t),
                        KernelShape::Tetra => (s, 0.5 * (s + t)),
                    };
                    let (r_arg, s_arg) = match kind {
                        KernelKind::InitGammaPairSurv | KernelKind::InitIndGammaSurv => (a, 0.0),
                        _ => (b, a),
                    };
                    let q = quad.entry(kind, &fq, t, s_arg, r_arg);
                    let (m, se) = mc.entry_stats(kind, &fm, t, s_arg, r_arg);
                    assert!(
                        (q - m).abs() <= 3.0 * se + 1e-12,
                        "{kind:?} t={t} s={s_arg} r={r_arg}: quad {q} mc {m} se {se}"
                    );
                }
            }
        }
    }

    #[test]
    fn kernels_bounded_and_monotone_in_force() {
        let law = ProfileLaw::sis_gradual(2.0, DurationLaw::Gamma { shape: 2.0, scale: 0.5 }, 0.8).unwrap();
        let init = InitialLaw::like_fresh(0.25, &law).unwrap();
        let engine = KernelEngine::new(&law, &init);
        let grid = TimeGrid::new(3.0, 0.2).unwrap();
        let lo: Vec<f64> = grid.times().map(|t| 0.3 + 0.2 * t.cos().abs()).collect();
        let hi: Vec<f64> = lo.iter().map(|v| v + 0.4).collect();
        for kind in KernelKind::ALL {
            let a = eval_kernel(&engine, kind, &lo, &grid).unwrap();
            let b = eval_kernel(&engine, kind, &hi, &grid).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                assert!((0.0..=1.0).contains(x), "{kind:?} {x}");
                assert!(*y <= *x + 1e-15, "{kind:?} not monotone");
            }
        }
    }

    #[test]
    fn kernel_rejects_bad_force() {
        let law = markov_sis();
        let init = InitialLaw::like_fresh(0.1, &law).unwrap();
        let engine = KernelEngine::new(&law, &init);
        let grid = TimeGrid::new(1.0, 0.5).unwrap();
        assert!(matches!(
            eval_kernel(&engine, KernelKind::GammaSurv, &[0.0, 1.0], &grid),
            Err(KernelError::Grid(GridError::LengthMismatch { .. }))
        ));
        assert!(matches!(
            eval_kernel(&engine, KernelKind::GammaSurv, &[0.0, -1.0, 0.0], &grid),
            Err(KernelError::Grid(GridError::BadValue { .. }))
        ));
    }
}
