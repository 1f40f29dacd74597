//! Construction of the finite abstraction on a compact domain.
//!
//! States are the lattice `[D]_eta`, inputs the lattice `[U]_mu`. The
//! `u`-successors of `x` are all lattice points within
//! `beta(theta, tau) + gamma(mu, tau) + eta` of the sampled flow
//! `xi(x, u, tau)`. An input is kept at `x` only when every such lattice
//! point lies in `D`; otherwise it is disabled there.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSystem, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::geometry::{ball_axis_range, lattice, BoxUnion};
use crate::growth::GrowthBound;
use crate::par;
use crate::transition::{to_i32, FiniteSystem, TransitionSystem};

/// Sampling time, state and input lattice spacings, design parameter and
/// target precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantParams {
    pub tau: f64,
    pub eta: f64,
    pub mu: f64,
    pub theta: f64,
    pub epsilon: f64,
}

impl QuantParams {
    /// Checks positivity and `eta <= epsilon <= theta`.
    pub fn check_ordering(&self) -> Result<()> {
        for (name, v) in [
            ("tau", self.tau),
            ("eta", self.eta),
            ("mu", self.mu),
            ("theta", self.theta),
            ("epsilon", self.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::param(format!("{name} must be positive, got {v}")));
            }
        }
        if self.eta > self.epsilon {
            return Err(Error::param(format!(
                "eta = {} exceeds epsilon = {}",
                self.eta, self.epsilon
            )));
        }
        if self.epsilon > self.theta {
            return Err(Error::param(format!(
                "epsilon = {} exceeds theta = {}",
                self.epsilon, self.theta
            )));
        }
        Ok(())
    }

    /// Full check against the input set and domain: additionally
    /// `mu <= min width of U` and `eta <= min width of D`.
    pub fn validate(&self, input_set: &BoxUnion, domain: &BoxUnion) -> Result<()> {
        self.check_ordering()?;
        let mu_hat = input_set.min_width().value();
        if self.mu > mu_hat {
            return Err(Error::param(format!(
                "mu = {} exceeds the minimum input box width {mu_hat}",
                self.mu
            )));
        }
        let eta_hat = domain.min_width().value();
        if self.eta > eta_hat {
            return Err(Error::param(format!(
                "eta = {} exceeds the minimum domain box width {eta_hat}",
                self.eta
            )));
        }
        Ok(())
    }
}

/// `beta(theta, tau) + gamma(mu, tau) + eta`.
pub fn transition_radius(q: &QuantParams, gb: &GrowthBound) -> Result<f64> {
    Ok(gb.beta(q.theta, q.tau)? + gb.gamma(q.mu, q.tau)? + q.eta)
}

/// Knobs for [`build_abstraction_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct AbstractionOptions {
    /// Inputs range over the finite set `[U]_mu` only, so the input term
    /// `gamma(mu, tau)` is left out of the radius.
    pub finite_input_mode: bool,
    /// RK4 substeps when the system has no closed-form flow.
    pub substeps: usize,
    /// Replaces the computed radius. Used to inject deliberately unsound
    /// abstractions when exercising the checkers.
    pub radius_override: Option<f64>,
}

impl Default for AbstractionOptions {
    fn default() -> Self {
        AbstractionOptions {
            finite_input_mode: false,
            substeps: DEFAULT_SUBSTEPS,
            radius_override: None,
        }
    }
}

/// Radius actually used by a build with `options`.
pub fn effective_radius(
    q: &QuantParams,
    gb: &GrowthBound,
    options: &AbstractionOptions,
) -> Result<f64> {
    if let Some(r) = options.radius_override {
        if !(r >= 0.0 && r.is_finite()) {
            return Err(Error::param(format!(
                "radius override must be >= 0, got {r}"
            )));
        }
        return Ok(r);
    }
    if options.finite_input_mode {
        Ok(gb.beta(q.theta, q.tau)? + q.eta)
    } else {
        transition_radius(q, gb)
    }
}

/// Builds the finite abstraction of `sys` restricted to `domain`.
pub fn build_abstraction(
    sys: &ControlSystem,
    gb: &GrowthBound,
    domain: &BoxUnion,
    q: &QuantParams,
    finite_input_mode: bool,
) -> Result<FiniteSystem> {
    build_abstraction_with(
        sys,
        gb,
        domain,
        q,
        &AbstractionOptions {
            finite_input_mode,
            ..Default::default()
        },
    )
}

pub fn build_abstraction_with(
    sys: &ControlSystem,
    gb: &GrowthBound,
    domain: &BoxUnion,
    q: &QuantParams,
    options: &AbstractionOptions,
) -> Result<FiniteSystem> {
    if domain.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            found: domain.dim(),
        });
    }
    q.validate(sys.input_set(), domain)?;
    let radius = effective_radius(q, gb, options)?;
    let states = lattice(domain, q.eta)?;
    let inputs = lattice(sys.input_set(), q.mu)?;
    let stepper = sys.stepper(q.tau, options.substeps)?;
    let occupancy = states.map().occupancy();
    let n = states.dim();
    let m = inputs.len();
    let input_values: Vec<Vec<f64>> = (0..m).map(|u| inputs.value(u)).collect();

    // One row per state: enabled flags and corner table for every input.
    let rows = par::try_map_indexed(states.len(), |x| -> Result<(Vec<bool>, Vec<i32>)> {
        let xq = states.value(x);
        let mut enabled = vec![false; m];
        let mut corners = vec![0i32; m * 2 * n];
        let mut lo = vec![0i64; n];
        let mut hi = vec![0i64; n];
        for (u, uq) in input_values.iter().enumerate() {
            let center = stepper.step(&xq, uq).map_err(|e| Error::Abstraction {
                state: x,
                input: u,
                source: Box::new(e),
            })?;
            for i in 0..n {
                let (l, h) = ball_axis_range(center[i], radius, q.eta);
                lo[i] = l;
                hi[i] = h;
            }
            if occupancy.covers_range(&lo, &hi) {
                enabled[u] = true;
                let slot = &mut corners[u * 2 * n..(u + 1) * 2 * n];
                for i in 0..n {
                    slot[i] = to_i32(lo[i])?;
                    slot[n + i] = to_i32(hi[i])?;
                }
            }
        }
        Ok((enabled, corners))
    })?;

    let mut enabled = Vec::with_capacity(states.len() * m);
    let mut boxes = Vec::with_capacity(states.len() * m * 2 * n);
    for (e, c) in rows {
        enabled.extend(e);
        boxes.extend(c);
    }
    FiniteSystem::from_raw(
        *q,
        radius,
        domain.clone(),
        states,
        sys.input_set().clone(),
        inputs,
        enabled,
        boxes,
    )
}

/// Aggregate counts of an abstraction.
#[derive(Debug, Clone, PartialEq)]
pub struct Stats {
    pub states: usize,
    pub inputs: usize,
    pub enabled_pairs: usize,
    pub min_successors: u64,
    pub max_successors: u64,
    pub mean_successors: f64,
    /// States without any enabled input.
    pub blocking_states: Vec<usize>,
}

pub fn abstraction_stats(s: &FiniteSystem) -> Stats {
    let mut enabled_pairs = 0usize;
    let mut min_successors = u64::MAX;
    let mut max_successors = 0u64;
    let mut total = 0u128;
    let mut blocking_states = Vec::new();
    for x in 0..s.state_count() {
        let mut any = false;
        for u in 0..s.input_count() {
            if let Some(b) = s.successor_box(x, u) {
                any = true;
                enabled_pairs += 1;
                let v = b.volume();
                min_successors = min_successors.min(v);
                max_successors = max_successors.max(v);
                total += v as u128;
            }
        }
        if !any {
            blocking_states.push(x);
        }
    }
    if enabled_pairs == 0 {
        min_successors = 0;
    }
    Stats {
        states: s.state_count(),
        inputs: s.input_count(),
        enabled_pairs,
        min_successors,
        max_successors,
        mean_successors: if enabled_pairs == 0 {
            0.0
        } else {
            total as f64 / enabled_pairs as f64
        },
        blocking_states,
    }
}

impl fmt::Display for Stats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "states:            {}", self.states)?;
        writeln!(f, "inputs:            {}", self.inputs)?;
        writeln!(f, "enabled pairs:     {}", self.enabled_pairs)?;
        writeln!(
            f,
            "successors/pair:   min {} / max {} / mean {:.3}",
            self.min_successors, self.max_successors, self.mean_successors
        )?;
        write!(f, "blocking states:   {}", self.blocking_states.len())
    }
}
