//! Growth bounds `beta`, `gamma` on the divergence of trajectories:
//!
//! `|xi(x, u, t) - xi(x', u', t)| <= beta(|x - x'|, t) + gamma(|u - u'|, t)`.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ControlSystem, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::geometry::BoxUnion;
use crate::par;

pub type BoundFn = Arc<dyn Fn(f64, f64) -> Result<f64> + Send + Sync>;

/// Pair of comparison functions, class K-infinity in their first argument.
#[derive(Clone)]
pub struct GrowthBound {
    beta: BoundFn,
    gamma: BoundFn,
    gamma_is_zero: bool,
    label: String,
}

impl fmt::Debug for GrowthBound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GrowthBound")
            .field("label", &self.label)
            .field("gamma_is_zero", &self.gamma_is_zero)
            .finish()
    }
}

impl GrowthBound {
    pub fn new(label: impl Into<String>, beta: BoundFn, gamma: Option<BoundFn>) -> Self {
        let gamma_is_zero = gamma.is_none();
        GrowthBound {
            beta,
            gamma: gamma.unwrap_or_else(|| Arc::new(|_, _| Ok(0.0))),
            gamma_is_zero,
            label: label.into(),
        }
    }

    pub fn beta(&self, r: f64, t: f64) -> Result<f64> {
        (self.beta)(r, t)
    }

    pub fn gamma(&self, r: f64, t: f64) -> Result<f64> {
        (self.gamma)(r, t)
    }

    /// True when `gamma` is the constant zero function.
    pub fn gamma_is_zero(&self) -> bool {
        self.gamma_is_zero
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    /// Right-hand side of the divergence inequality.
    pub fn bound(&self, state_gap: f64, input_gap: f64, t: f64) -> Result<f64> {
        Ok(self.beta(state_gap, t)? + self.gamma(input_gap, t)?)
    }
}

/// `beta(r, t) = (c0 + c1 t) r`, `gamma = 0`.
pub fn affine_bound(c0: f64, c1: f64) -> Result<GrowthBound> {
    if !(c0 > 0.0 && c0.is_finite()) || !(c1 >= 0.0 && c1.is_finite()) {
        return Err(Error::param(format!(
            "affine bound needs c0 > 0 and c1 >= 0, got c0={c0}, c1={c1}"
        )));
    }
    Ok(GrowthBound::new(
        format!("affine({c0}, {c1})"),
        Arc::new(move |r, t| Ok((c0 + c1 * t) * r)),
        None,
    ))
}

/// Infinity operator norm: maximum absolute row sum.
pub fn inf_norm(m: &DMatrix<f64>) -> f64 {
    m.row_iter()
        .map(|row| row.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn composite_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    if b == a {
        return 0.0;
    }
    let h = (b - a) / panels as f64;
    let mut acc = 0.0;
    for i in 0..panels {
        let l = a + i as f64 * h;
        acc += f(l) + 4.0 * f(l + 0.5 * h) + f(l + h);
    }
    acc * h / 6.0
}

/// Bounds of a linear system `x' = A x + B u`:
/// `beta(r, t) = |e^{At}| r` and `gamma(r, t) = (int_0^t |e^{As} B| ds) r`,
/// valid for `t` in `[0, horizon]`.
pub fn linear_bounds(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    horizon: f64,
    quad_steps: usize,
) -> Result<GrowthBound> {
    if !a.is_square() {
        return Err(Error::param(format!(
            "state matrix must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::DimensionMismatch {
            expected: a.nrows(),
            found: b.nrows(),
        });
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::param(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    if quad_steps == 0 {
        return Err(Error::param("quad_steps must be at least 1"));
    }
    let in_horizon = move |t: f64| -> Result<()> {
        if (0.0..=horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::BoundConstruction(format!(
                "time {t} outside the bound horizon [0, {horizon}]"
            )))
        }
    };
    let a_beta = a.clone();
    let beta: BoundFn = Arc::new(move |r, t| {
        in_horizon(t)?;
        Ok(inf_norm(&(&a_beta * t).exp()) * r)
    });
    let gamma_zero = b.iter().all(|v| *v == 0.0);
    let gamma: Option<BoundFn> = if gamma_zero {
        None
    } else {
        let (a, b) = (a.clone(), b.clone());
        Some(Arc::new(move |r, t| {
            in_horizon(t)?;
            Ok(linear_gamma_integral(&a, &b, t, quad_steps) * r)
        }))
    };
    Ok(GrowthBound::new("linear", beta, gamma))
}

/// `int_0^t |e^{As} B| ds` by composite Simpson with `panels` panels.
pub fn linear_gamma_integral(a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64, panels: usize) -> f64 {
    composite_simpson(|s| inf_norm(&((a * s).exp() * b)), 0.0, t, panels)
}

/// Richardson-style estimate of the Simpson error from panel doubling.
pub fn linear_gamma_error_estimate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    t: f64,
    panels: usize,
) -> f64 {
    let coarse = linear_gamma_integral(a, b, t, panels);
    let fine = linear_gamma_integral(a, b, t, 2 * panels);
    (fine - coarse).abs() / 15.0
}

/// Scalar class-K-infinity function with an inverse.
#[derive(Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum KFunction {
    /// `c r`
    Linear { c: f64 },
    /// `c r^p`
    Power { c: f64, p: f64 },
    /// User function; without `inverse`, inverted by bisection on
    /// `[0, r_max]`.
    #[serde(skip)]
    Custom {
        f: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
        inverse: Option<Arc<dyn Fn(f64) -> f64 + Send + Sync>>,
    },
}

impl fmt::Debug for KFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KFunction::Linear { c } => write!(f, "Linear({c})"),
            KFunction::Power { c, p } => write!(f, "Power({c}, {p})"),
            KFunction::Custom { inverse, .. } => {
                write!(f, "Custom(inverse: {})", inverse.is_some())
            }
        }
    }
}

impl PartialEq for KFunction {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (KFunction::Linear { c: a }, KFunction::Linear { c: b }) => a == b,
            (KFunction::Power { c: a, p: x }, KFunction::Power { c: b, p: y }) => a == b && x == y,
            (KFunction::Custom { f: a, .. }, KFunction::Custom { f: b, .. }) => Arc::ptr_eq(a, b),
            _ => false,
        }
    }
}

impl KFunction {
    pub fn identity() -> Self {
        KFunction::Linear { c: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        match self {
            KFunction::Linear { c } if !(*c > 0.0) => Err(Error::param(format!(
                "linear K-infinity function needs c > 0, got {c}"
            ))),
            KFunction::Power { c, p } if !(*c > 0.0 && *p > 0.0) => Err(Error::param(format!(
                "power K-infinity function needs c, p > 0, got c={c}, p={p}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn eval(&self, r: f64) -> f64 {
        match self {
            KFunction::Linear { c } => c * r,
            KFunction::Power { c, p } => c * r.powf(*p),
            KFunction::Custom { f, .. } => f(r),
        }
    }

    /// Inverse on `[0, inf)`; bisection is limited to `[0, r_max]`.
    pub fn inverse(&self, y: f64, r_max: f64) -> Result<f64> {
        if y < 0.0 || y.is_nan() {
            return Err(Error::BoundConstruction(format!(
                "inverse queried at negative value {y}"
            )));
        }
        match self {
            KFunction::Linear { c } => Ok(y / c),
            KFunction::Power { c, p } => Ok((y / c).powf(1.0 / p)),
            KFunction::Custom {
                inverse: Some(inv), ..
            } => Ok(inv(y)),
            KFunction::Custom { f, inverse: None } => {
                if f(r_max) < y {
                    return Err(Error::BoundConstruction(format!(
                        "inverse of {y} lies beyond r_max = {r_max}"
                    )));
                }
                let (mut lo, mut hi) = (0.0, r_max);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if f(mid) < y {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if hi - lo <= f64::EPSILON * hi {
                        break;
                    }
                }
                Ok(hi)
            }
        }
    }
}

/// Bounding data of an incremental Lyapunov function `V`:
/// `alpha_lower(|x - x'|) <= V(x, x') <= alpha_upper(|x - x'|)` and
/// `dV <= kappa V + sigma(|u - u'|)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovSpec {
    pub alpha_lower: KFunction,
    pub alpha_upper: KFunction,
    pub sigma: KFunction,
    pub kappa: f64,
    /// Search limit for numerically inverted `alpha_lower`.
    #[serde(default = "default_r_max")]
    pub r_max: f64,
}

fn default_r_max() -> f64 {
    1e6
}

/// `(e^{kappa t} - 1) / kappa`, continuous through `kappa = 0`.
pub fn exp_ratio(kappa: f64, t: f64) -> f64 {
    if kappa == 0.0 {
        t
    } else {
        (kappa * t).exp_m1() / kappa
    }
}

/// `beta(r, t) = alpha_lower^{-1}(2 e^{kappa t} alpha_upper(r))`,
/// `gamma(r, t) = alpha_lower^{-1}(2 (e^{kappa t} - 1) / kappa sigma(r))`.
pub fn from_lyapunov(spec: &LyapunovSpec) -> Result<GrowthBound> {
    spec.alpha_lower.validate()?;
    spec.alpha_upper.validate()?;
    spec.sigma.validate()?;
    if !spec.kappa.is_finite() {
        return Err(Error::param("kappa must be finite"));
    }
    for i in 0..=100 {
        let r = i as f64 * 0.1;
        if spec.alpha_lower.eval(r) > spec.alpha_upper.eval(r) {
            return Err(Error::param(format!(
                "alpha_lower exceeds alpha_upper at r = {r}"
            )));
        }
    }
    let s = spec.clone();
    let beta: BoundFn = Arc::new(move |r, t| {
        let y = 2.0 * (s.kappa * t).exp() * s.alpha_upper.eval(r);
        s.alpha_lower.inverse(y, s.r_max)
    });
    let s = spec.clone();
    let gamma: BoundFn = Arc::new(move |r, t| {
        let y = 2.0 * exp_ratio(s.kappa, t) * s.sigma.eval(r);
        s.alpha_lower.inverse(y, s.r_max)
    });
    Ok(GrowthBound::new("lyapunov", beta, Some(gamma)))
}

/// One violated checkpoint of [`validate_bound`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub trial: usize,
    pub t: f64,
    pub x: Vec<f64>,
    pub x_other: Vec<f64>,
    pub u: Vec<f64>,
    pub u_other: Vec<f64>,
    pub distance: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub trials: usize,
    pub checks: usize,
    pub violation_count: usize,
    /// Smallest `bound - distance` seen; negative when something failed.
    pub worst_margin: f64,
    /// Violations in trial order.
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.violation_count == 0
    }
}

pub(crate) fn sample_box_union(set: &BoxUnion, rng: &mut impl Rng) -> Vec<f64> {
    let volumes: Vec<f64> = set
        .boxes()
        .iter()
        .map(|b| b.lower.iter().zip(&b.upper).map(|(l, u)| u - l).product())
        .collect();
    let total: f64 = volumes.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut chosen = &set.boxes()[set.boxes().len() - 1];
    for (b, v) in set.boxes().iter().zip(&volumes) {
        if pick < *v {
            chosen = b;
            break;
        }
        pick -= v;
    }
    chosen
        .lower
        .iter()
        .zip(&chosen.upper)
        .map(|(l, u)| rng.gen_range(*l..=*u))
        .collect()
}

pub(crate) fn sup_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Random number stream for trial `trial` of a run seeded with `seed`;
/// independent of how trials are scheduled.
pub(crate) fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Observed divergence and its bound for one pair of trajectories at `t`.
pub fn divergence_at(
    sys: &ControlSystem,
    gb: &GrowthBound,
    x: &[f64],
    x_other: &[f64],
    u: &[f64],
    u_other: &[f64],
    t: f64,
) -> Result<(f64, f64)> {
    let a = sys.flow(x, u, t, DEFAULT_SUBSTEPS)?;
    let b = sys.flow(x_other, u_other, t, DEFAULT_SUBSTEPS)?;
    let bound = gb.bound(sup_distance(x, x_other), sup_distance(u, u_other), t)?;
    Ok((sup_distance(&a, &b), bound))
}

/// Slack for bounds that are tight in exact arithmetic.
const ROUNDOFF: f64 = 1e-9;

/// Samples state and input pairs and checks the divergence inequality at
/// `t` in `{tau/4, tau/2, 3 tau/4, tau}`.
///
/// Half of the trials draw `x'` near `x` (gap log-uniform in
/// `[1e-3, 1]`), the others draw it independently from `domain`.
pub fn validate_bound(
    sys: &ControlSystem,
    gb: &GrowthBound,
    domain: &BoxUnion,
    tau: f64,
    trials: usize,
    equal_inputs: bool,
    seed: u64,
) -> Result<ValidationReport> {
    if trials == 0 {
        return Err(Error::param("validation needs at least one trial"));
    }
    if !(tau > 0.0) {
        return Err(Error::param(format!("tau must be positive, got {tau}")));
    }
    if domain.dim() != sys.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: sys.state_dim(),
            found: domain.dim(),
        });
    }
    let checkpoints = [0.25 * tau, 0.5 * tau, 0.75 * tau, tau];
    let per_trial = par::try_map_indexed(trials, |trial| -> Result<(f64, Vec<Violation>)> {
        let mut rng = trial_rng(seed, trial);
        let x = sample_box_union(domain, &mut rng);
        let x_other = if trial % 2 == 0 {
            let gap = 10f64.powf(rng.gen_range(-3.0..=0.0));
            let near: Vec<f64> = x.iter().map(|v| v + rng.gen_range(-gap..=gap)).collect();
            if domain.contains_unchecked(&near) {
                near
            } else {
                sample_box_union(domain, &mut rng)
            }
        } else {
            sample_box_union(domain, &mut rng)
        };
        let u = sample_box_union(sys.input_set(), &mut rng);
        let u_other = if equal_inputs {
            u.clone()
        } else {
            sample_box_union(sys.input_set(), &mut rng)
        };
        let mut worst = f64::INFINITY;
        let mut found = Vec::new();
        for &t in &checkpoints {
            let (distance, bound) = divergence_at(sys, gb, &x, &x_other, &u, &u_other, t)?;
            worst = worst.min(bound - distance);
            if distance > bound + ROUNDOFF * bound.max(1.0) {
                found.push(Violation {
                    trial,
                    t,
                    x: x.clone(),
                    x_other: x_other.clone(),
                    u: u.clone(),
                    u_other: u_other.clone(),
                    distance,
                    bound,
                });
            }
        }
        Ok((worst, found))
    })?;
    let worst_margin = per_trial
        .iter()
        .map(|(w, _)| *w)
        .fold(f64::INFINITY, f64::min);
    let violations: Vec<Violation> = per_trial.into_iter().flat_map(|(_, v)| v).collect();
    Ok(ValidationReport {
        trials,
        checks: trials * checkpoints.len(),
        violation_count: violations.len(),
        worst_margin,
        violations,
    })
}
