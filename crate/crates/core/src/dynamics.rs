//! Control systems with constant inputs over one sampling period.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoxUnion;

/// Right-hand side `f(x, u)` written into the output slice.
pub type VectorField = Arc<dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync>;

/// Exact solution `xi(x, u, t)` under a constant input.
pub type FlowFn = Arc<dyn Fn(&[f64], &[f64], f64) -> Vec<f64> + Send + Sync>;

/// Default RK4 substeps per sampling period.
pub const DEFAULT_SUBSTEPS: usize = 10;

/// Steering-angle tangent below which the straight-line branch is used.
pub const STRAIGHT_LINE_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Distance from the rear axle to the reference point.
    pub a: f64,
    /// Wheelbase.
    pub b: f64,
}

impl VehicleParams {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        if !(a.is_finite() && b.is_finite()) || b == 0.0 {
            return Err(Error::param(format!(
                "vehicle parameters need finite a and non-zero b, got a={a}, b={b}"
            )));
        }
        Ok(VehicleParams { a, b })
    }

    fn slip(&self, tan_delta: f64) -> f64 {
        (self.a * tan_delta / self.b).atan()
    }
}

/// `x' = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
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
        Ok(LinearModel { a, b })
    }

    /// Zero-order-hold discretization `(e^{A t}, int_0^t e^{A s} ds B)` from
    /// the exponential of the augmented matrix `[[A, B], [0, 0]] t`.
    pub fn discretize(&self, t: f64) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.a.nrows();
        let m = self.b.ncols();
        let mut aug = DMatrix::zeros(n + m, n + m);
        aug.view_mut((0, 0), (n, n)).copy_from(&(&self.a * t));
        aug.view_mut((0, n), (n, m)).copy_from(&(&self.b * t));
        let e = aug.exp();
        (
            e.view((0, 0), (n, n)).into_owned(),
            e.view((0, n), (n, m)).into_owned(),
        )
    }
}

/// Known closed-form flows.
#[derive(Clone)]
pub enum ExactFlow {
    Vehicle(VehicleParams),
    Linear(LinearModel),
    Custom(FlowFn),
}

impl fmt::Debug for ExactFlow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExactFlow::Vehicle(p) => f.debug_tuple("Vehicle").field(p).finish(),
            ExactFlow::Linear(m) => f.debug_tuple("Linear").field(m).finish(),
            ExactFlow::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

/// A control system with state dimension `n`, input set `U` of dimension
/// `m`, and a vector field evaluated under inputs held constant.
#[derive(Clone)]
pub struct ControlSystem {
    name: String,
    state_dim: usize,
    input_dim: usize,
    input_set: BoxUnion,
    field: VectorField,
    exact: Option<ExactFlow>,
}

impl fmt::Debug for ControlSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("input_set", &self.input_set)
            .field("exact", &self.exact)
            .finish()
    }
}

impl ControlSystem {
    pub fn new(
        name: impl Into<String>,
        state_dim: usize,
        input_set: BoxUnion,
        field: VectorField,
        exact: Option<ExactFlow>,
    ) -> Result<Self> {
        if state_dim == 0 {
            return Err(Error::param("state dimension must be at least 1"));
        }
        let sys = ControlSystem {
            name: name.into(),
            state_dim,
            input_dim: input_set.dim(),
            input_set,
            field,
            exact,
        };
        // Probe the field once so shape errors surface at construction.
        let mut dx = vec![0.0; state_dim];
        (sys.field)(&vec![0.0; state_dim], &vec![0.0; sys.input_dim], &mut dx);
        Ok(sys)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn input_set(&self) -> &BoxUnion {
        &self.input_set
    }

    pub fn exact_flow(&self) -> Option<&ExactFlow> {
        self.exact.as_ref()
    }

    pub fn eval_field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; self.state_dim];
        (self.field)(x, u, &mut dx);
        dx
    }

    /// Copy of the system with the closed-form flow removed, so every flow
    /// goes through the integrator.
    pub fn without_exact_flow(&self) -> Self {
        ControlSystem {
            exact: None,
            ..self.clone()
        }
    }

    fn check_dims(&self, x: &[f64], u: &[f64]) -> Result<()> {
        if x.len() != self.state_dim {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim,
                found: x.len(),
            });
        }
        if u.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                found: u.len(),
            });
        }
        Ok(())
    }

    /// `xi(x, u, t)`, from the closed form when present and from RK4 with
    /// `substeps` steps otherwise.
    pub fn flow(&self, x: &[f64], u: &[f64], t: f64, substeps: usize) -> Result<Vec<f64>> {
        self.stepper(t, substeps)?.step(x, u)
    }

    /// Prepares repeated evaluation of the flow over a fixed duration.
    pub fn stepper(&self, t: f64, substeps: usize) -> Result<Stepper<'_>> {
        if !(t.is_finite() && t >= 0.0) {
            return Err(Error::param(format!("flow duration must be >= 0, got {t}")));
        }
        if substeps == 0 {
            return Err(Error::param("substeps must be at least 1"));
        }
        let kind = match &self.exact {
            Some(ExactFlow::Vehicle(p)) => StepKind::Vehicle(*p),
            Some(ExactFlow::Linear(m)) => {
                let (ad, bd) = m.discretize(t);
                StepKind::Linear { ad, bd }
            }
            Some(ExactFlow::Custom(f)) => StepKind::Custom(f.clone()),
            None => StepKind::Numeric(substeps),
        };
        Ok(Stepper {
            sys: self,
            duration: t,
            kind,
        })
    }
}

enum StepKind {
    Vehicle(VehicleParams),
    Linear { ad: DMatrix<f64>, bd: DMatrix<f64> },
    Custom(FlowFn),
    Numeric(usize),
}

/// Flow over a fixed duration with any per-duration precomputation done.
pub struct Stepper<'a> {
    sys: &'a ControlSystem,
    duration: f64,
    kind: StepKind,
}

impl Stepper<'_> {
    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.sys.check_dims(x, u)?;
        let next = match &self.kind {
            StepKind::Vehicle(p) => vehicle_flow(p, x, u, self.duration),
            StepKind::Linear { ad, bd } => {
                let xs = ad * nalgebra::DVector::from_column_slice(x)
                    + bd * nalgebra::DVector::from_column_slice(u);
                xs.as_slice().to_vec()
            }
            StepKind::Custom(f) => f(x, u, self.duration),
            StepKind::Numeric(substeps) => {
                return flow_numeric(self.sys, x, u, self.duration, *substeps)
            }
        };
        if next.len() != self.sys.state_dim || next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                state: x.to_vec(),
                input: u.to_vec(),
            });
        }
        Ok(next)
    }
}

/// Classic fourth-order Runge-Kutta with `substeps` equal steps over `[0, t]`
/// and the input held constant.
pub fn flow_numeric(
    sys: &ControlSystem,
    x: &[f64],
    u: &[f64],
    t: f64,
    substeps: usize,
) -> Result<Vec<f64>> {
    sys.check_dims(x, u)?;
    if substeps == 0 {
        return Err(Error::param("substeps must be at least 1"));
    }
    let n = sys.state_dim;
    let h = t / substeps as f64;
    let mut state = x.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let f = &sys.field;
    for _ in 0..substeps {
        f(&state, u, &mut k1);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k1[i];
        }
        f(&tmp, u, &mut k2);
        for i in 0..n {
            tmp[i] = state[i] + 0.5 * h * k2[i];
        }
        f(&tmp, u, &mut k3);
        for i in 0..n {
            tmp[i] = state[i] + h * k3[i];
        }
        f(&tmp, u, &mut k4);
        for i in 0..n {
            state[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                state: x.to_vec(),
                input: u.to_vec(),
            });
        }
    }
    Ok(state)
}

/// Kinematic vehicle field; state `(x, y, theta)`, input `(v0, delta)`.
pub fn vehicle_field(p: &VehicleParams, s: &[f64], u: &[f64], dx: &mut [f64]) {
    let (v0, delta) = (u[0], u[1]);
    let tan_d = delta.tan();
    let alpha = p.slip(tan_d);
    let c = alpha.cos();
    dx[0] = v0 * (alpha + s[2]).cos() / c;
    dx[1] = v0 * (alpha + s[2]).sin() / c;
    dx[2] = v0 / p.b * tan_d;
}

/// Closed-form vehicle flow under a constant input.
///
/// The turning branch is written with the product forms
/// `sin(A + h) - sin(A) = 2 cos(A + h/2) sin(h/2)` and
/// `cos(A) - cos(A + h) = 2 sin(A + h/2) sin(h/2)`, which avoid the
/// cancellation of the difference forms when `tan(delta)` is small.
pub fn vehicle_flow(p: &VehicleParams, s: &[f64], u: &[f64], t: f64) -> Vec<f64> {
    let (v0, delta) = (u[0], u[1]);
    let (x0, y0, th0) = (s[0], s[1], s[2]);
    let tan_d = delta.tan();
    if tan_d.abs() <= STRAIGHT_LINE_THRESHOLD {
        return vec![v0 * th0.cos() * t + x0, v0 * th0.sin() * t + y0, th0];
    }
    let alpha = p.slip(tan_d);
    let turn = v0 / p.b * tan_d * t;
    let radius = p.b / (alpha.cos() * tan_d);
    let mid = alpha + th0 + 0.5 * turn;
    let chord = 2.0 * (0.5 * turn).sin();
    vec![
        radius * mid.cos() * chord + x0,
        radius * mid.sin() * chord + y0,
        turn + th0,
    ]
}

/// Parameters accepted by [`builtin_system`]; which fields are required
/// depends on the system name.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b_matrix: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_set: Option<BoxUnion>,
}

/// Row-major nested vectors to a matrix.
pub fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if nrows == 0 || ncols == 0 {
        return Err(Error::param("matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::param("matrix rows have different lengths"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// Builds a catalog system: `vehicle`, `linear`, or `integrator-chain`.
pub fn builtin_system(name: &str, params: &SystemParams) -> Result<ControlSystem> {
    match name {
        "vehicle" => {
            let p = VehicleParams::new(params.a.unwrap_or(0.5), params.b.unwrap_or(1.0))?;
            let input_set = match &params.input_set {
                Some(u) => u.clone(),
                None => BoxUnion::single(vec![-1.0, -1.0], vec![1.0, 1.0])?,
            };
            if input_set.dim() != 2 {
                return Err(Error::param("vehicle input set must be 2-dimensional"));
            }
            let field: VectorField = Arc::new(move |s, u, dx| vehicle_field(&p, s, u, dx));
            ControlSystem::new("vehicle", 3, input_set, field, Some(ExactFlow::Vehicle(p)))
        }
        "linear" => {
            let a = matrix_from_rows(
                params
                    .a_matrix
                    .as_deref()
                    .ok_or_else(|| Error::param("linear system needs a_matrix"))?,
            )?;
            let b = matrix_from_rows(
                params
                    .b_matrix
                    .as_deref()
                    .ok_or_else(|| Error::param("linear system needs b_matrix"))?,
            )?;
            let input_set = params
                .input_set
                .clone()
                .ok_or_else(|| Error::param("linear system needs input_set"))?;
            linear_system("linear", LinearModel::new(a, b)?, input_set)
        }
        "integrator-chain" => {
            let order = params
                .order
                .ok_or_else(|| Error::param("integrator-chain needs order"))?;
            if order == 0 {
                return Err(Error::param("integrator-chain order must be at least 1"));
            }
            let input_set = match &params.input_set {
                Some(u) => u.clone(),
                None => BoxUnion::single(vec![-1.0], vec![1.0])?,
            };
            if input_set.dim() != 1 {
                return Err(Error::param(
                    "integrator-chain input set must be 1-dimensional",
                ));
            }
            let a = DMatrix::from_fn(order, order, |i, j| if j == i + 1 { 1.0 } else { 0.0 });
            let b = DMatrix::from_fn(order, 1, |i, _| if i + 1 == order { 1.0 } else { 0.0 });
            linear_system("integrator-chain", LinearModel::new(a, b)?, input_set)
        }
        other => Err(Error::UnknownSystem(other.to_string())),
    }
}

/// Linear system with its exact zero-order-hold flow installed.
pub fn linear_system(name: &str, model: LinearModel, input_set: BoxUnion) -> Result<ControlSystem> {
    if input_set.dim() != model.b.ncols() {
        return Err(Error::DimensionMismatch {
            expected: model.b.ncols(),
            found: input_set.dim(),
        });
    }
    let n = model.a.nrows();
    let (a, b) = (model.a.clone(), model.b.clone());
    let field: VectorField = Arc::new(move |x, u, dx| {
        for i in 0..a.nrows() {
            let mut acc = 0.0;
            for j in 0..a.ncols() {
                acc += a[(i, j)] * x[j];
            }
            for j in 0..b.ncols() {
                acc += b[(i, j)] * u[j];
            }
            dx[i] = acc;
        }
    });
    ControlSystem::new(name, n, input_set, field, Some(ExactFlow::Linear(model)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vehicle() -> ControlSystem {
        builtin_system("vehicle", &SystemParams::default()).unwrap()
    }

    fn scalar_linear(a: f64, b: f64) -> ControlSystem {
        let params = SystemParams {
            a_matrix: Some(vec![vec![a]]),
            b_matrix: Some(vec![vec![b]]),
            input_set: Some(BoxUnion::single(vec![-1.0], vec![1.0]).unwrap()),
            ..Default::default()
        };
        builtin_system("linear", &params).unwrap()
    }

    #[test]
    fn rk4_exact_for_constant_derivative() {
        let sys = scalar_linear(0.0, 1.0);
        let x = flow_numeric(&sys, &[0.0], &[1.0], 0.3, 1).unwrap();
        assert_eq!(x, vec![0.3]);
    }

    #[test]
    fn rk4_exponential_growth() {
        let sys = scalar_linear(1.0, 0.0);
        let x = flow_numeric(&sys, &[1.0], &[0.0], 0.1, 1).unwrap();
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-7);
        assert!((x[0] - 1.10517091).abs() < 1e-7);
    }

    #[test]
    fn rk4_vehicle_straight_line() {
        let x = flow_numeric(&vehicle(), &[0.0, 0.0, 0.0], &[1.0, 0.0], 0.3, 10).unwrap();
        for (got, want) in x.iter().zip([0.3, 0.0, 0.0]) {
            assert!((got - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn rk4_reports_blow_up() {
        let f: VectorField = Arc::new(|x, _u, dx| dx[0] = x[0] * x[0]);
        let u = BoxUnion::single(vec![0.0], vec![1.0]).unwrap();
        let sys = ControlSystem::new("blowup", 1, u, f, None).unwrap();
        let err = flow_numeric(&sys, &[1e200], &[0.0], 1.0, 4).unwrap_err();
        assert!(matches!(err, Error::Integration { .. }));
    }

    #[test]
    #[allow(clippy::approx_constant)]
    fn vehicle_closed_form_examples() {
        let p = VehicleParams::new(0.5, 1.0).unwrap();
        assert_eq!(
            vehicle_flow(&p, &[0.0, 0.0, 0.0], &[1.0, 0.0], 0.3),
            vec![0.3, 0.0, 0.0]
        );
        let s = vehicle_flow(&p, &[0.0, 0.0, 0.0], &[1.0, 0.7854], 0.3);
        assert!((s[2] - 0.7854f64.tan() * 0.3).abs() < 1e-15);
        assert!((s[2] - 0.3).abs() < 1e-4);
        let start = [3.0, -2.0, 1.1];
        assert_eq!(vehicle_flow(&p, &start, &[0.0, 0.6], 5.0), start.to_vec());
    }

    #[test]
    fn vehicle_rejects_zero_wheelbase() {
        let params = SystemParams {
            b: Some(0.0),
            ..Default::default()
        };
        assert!(matches!(
            builtin_system("vehicle", &params),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn catalog_lookup() {
        let v = vehicle();
        assert_eq!((v.state_dim(), v.input_dim()), (3, 2));
        assert!(matches!(v.exact_flow(), Some(ExactFlow::Vehicle(_))));
        let l = scalar_linear(0.0, 1.0);
        assert_eq!(l.eval_field(&[5.0], &[0.7]), vec![0.7]);
        assert!(matches!(
            builtin_system("pendulum", &SystemParams::default()),
            Err(Error::UnknownSystem(_))
        ));
        assert!(matches!(
            builtin_system("linear", &SystemParams::default()),
            Err(Error::Parameter(_))
        ));
        let chain = builtin_system(
            "integrator-chain",
            &SystemParams {
                order: Some(2),
                ..Default::default()
            },
        )
        .unwrap();
        // x = (p, v), u = 1 for t = 1: p = 1/2, v = 1.
        let x = chain.flow(&[0.0, 0.0], &[1.0], 1.0, 1).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn vehicle_closed_form_matches_rk4() {
        let sys = vehicle();
        let numeric = sys.without_exact_flow();
        let p = VehicleParams::new(0.5, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = [
                rng.gen_range(0.0..10.0),
                rng.gen_range(0.0..10.0),
                rng.gen_range(-3.2..3.2),
            ];
            let u = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let exact = vehicle_flow(&p, &x, &u, 0.3);
            let approx = numeric.flow(&x, &u, 0.3, DEFAULT_SUBSTEPS).unwrap();
            for (a, b) in exact.iter().zip(&approx) {
                assert!((a - b).abs() <= 1e-6, "x={x:?} u={u:?}");
            }
        }
    }

    #[test]
    fn vehicle_branches_agree_near_threshold() {
        let p = VehicleParams::new(0.5, 1.0).unwrap();
        let x = [1.0, 2.0, 0.4];
        let straight = vehicle_flow(&p, &x, &[0.8, 0.0], 0.3);
        for delta in [2e-12, 1e-11, 1e-9] {
            let turning = vehicle_flow(&p, &x, &[0.8, delta], 0.3);
            for (a, b) in straight.iter().zip(&turning) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + delta * 1e9), "delta={delta}");
            }
        }
        let just_above = vehicle_flow(&p, &x, &[0.8, 1.5e-12], 0.3);
        for (a, b) in straight.iter().zip(&just_above) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let sys = vehicle().without_exact_flow();
        let x = [1.0, 1.0, 0.3];
        let u = [1.0, 0.9];
        let mut prev = sys.flow(&x, &u, 0.3, 1).unwrap();
        let mut prev_change = f64::INFINITY;
        for substeps in [2, 4, 8] {
            let next = sys.flow(&x, &u, 0.3, substeps).unwrap();
            let change = prev
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if prev_change.is_finite() && change > 1e-14 {
                assert!(change <= prev_change / 10.0, "{change} vs {prev_change}");
            }
            prev_change = change;
            prev = next;
        }
    }

    proptest! {
        #[test]
        fn vehicle_flow_semigroup(
            x in 0.0f64..10.0, y in 0.0f64..10.0, th in -3.1f64..3.1,
            v in -1.0f64..1.0, d in -1.0f64..1.0,
            t1 in 0.0f64..0.5, t2 in 0.0f64..0.5,
        ) {
            let p = VehicleParams::new(0.5, 1.0).unwrap();
            let u = [v, d];
            let direct = vehicle_flow(&p, &[x, y, th], &u, t1 + t2);
            let mid = vehicle_flow(&p, &[x, y, th], &u, t1);
            let composed = vehicle_flow(&p, &mid, &u, t2);
            for (a, b) in direct.iter().zip(&composed) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
        }
    }
}
