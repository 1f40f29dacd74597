//! Running a symbolic controller on the sampled plant.
//!
//! At every sampling instant the measured state is associated with its
//! nearest lattice point, the controller's input for that abstract state
//! is held for one sampling period, and the plant is integrated forward.

use std::fmt;
use std::fmt::Write as _;

use crate::dynamics::{ControlSystem, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::geometry::{nearest_grid_point, BoxUnion};
use crate::par;
use crate::synthesis::{Controller, Mode, SpecProblem};
use crate::transition::{FiniteSystem, Run, TransitionSystem};

/// Why a refinement step could not produce an input.
#[derive(Debug, Clone, PartialEq)]
pub enum RefineError {
    LeftDomain,
    /// The nearest lattice point is not winning, or not in the lattice at
    /// all (`None`).
    NotWinning(Option<usize>),
}

impl fmt::Display for RefineError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RefineError::LeftDomain => write!(f, "state left the domain"),
            RefineError::NotWinning(Some(x)) => write!(f, "abstract state {x} is not winning"),
            RefineError::NotWinning(None) => write!(f, "no lattice state near the measurement"),
        }
    }
}

/// Abstract state and held input for the measured state `x`.
pub fn refine_step(
    ctrl: &Controller,
    abs: &FiniteSystem,
    x: &[f64],
) -> std::result::Result<(usize, Option<usize>), RefineError> {
    if !abs.domain().contains_unchecked(x) {
        return Err(RefineError::LeftDomain);
    }
    let k = nearest_grid_point(x, abs.eta());
    let state = abs
        .states()
        .position(&k.index)
        .ok_or(RefineError::NotWinning(None))?;
    match ctrl.entry(state) {
        Some(e) => Ok((state, e.input)),
        None => Err(RefineError::NotWinning(Some(state))),
    }
}

/// How a closed-loop run ended.
#[derive(Debug, Clone, PartialEq)]
pub enum Status {
    /// Step budget exhausted.
    Running,
    SpecSatisfied,
    LeftDomain,
    NotWinning(Option<usize>),
    IntegrationFailed(String),
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Status::Running => write!(f, "running"),
            Status::SpecSatisfied => write!(f, "spec-satisfied"),
            Status::LeftDomain => write!(f, "left-domain"),
            Status::NotWinning(Some(x)) => write!(f, "not-winning (abstract state {x})"),
            Status::NotWinning(None) => write!(f, "not-winning (off lattice)"),
            Status::IntegrationFailed(msg) => write!(f, "integration-failed ({msg})"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub state: Option<usize>,
    pub input: Option<usize>,
    /// Held input value, empty when no input was applied.
    pub u: Vec<f64>,
    pub mode: Option<Mode>,
    pub value: Option<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub tau: f64,
    pub state_dim: usize,
    pub input_dim: usize,
    pub samples: Vec<Sample>,
    pub status: Status,
}

impl Trajectory {
    /// The logged abstract states and inputs as a run of the abstraction,
    /// up to the first sample without both.
    pub fn abstract_run(&self) -> Option<Run> {
        let first = self.samples.first()?;
        let mut run = Run::new(first.state?);
        for w in self.samples.windows(2) {
            match (w[0].input, w[1].state) {
                (Some(u), Some(next)) => run.steps.push((u, next)),
                _ => break,
            }
        }
        Some(run)
    }

    /// CSV with header `t,x1..xn,state_index,input_index,u1..um`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t");
        for i in 1..=self.state_dim {
            write!(out, ",x{i}").unwrap();
        }
        out.push_str(",state_index,input_index");
        for i in 1..=self.input_dim {
            write!(out, ",u{i}").unwrap();
        }
        out.push('\n');
        let opt = |v: Option<usize>| v.map_or(String::new(), |v| v.to_string());
        for s in &self.samples {
            write!(out, "{}", s.t).unwrap();
            for v in &s.x {
                write!(out, ",{v}").unwrap();
            }
            write!(out, ",{},{}", opt(s.state), opt(s.input)).unwrap();
            for i in 0..self.input_dim {
                match s.u.get(i) {
                    Some(v) => write!(out, ",{v}").unwrap(),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Gnuplot script reading `csv_name`: the path in the first two state
    /// coordinates with target and obstacle boxes, and each input against
    /// time as a staircase.
    pub fn plot_script(&self, spec: &SpecProblem, csv_name: &str, image_name: &str) -> String {
        let mut g = String::new();
        let rows = 1 + self.input_dim;
        writeln!(g, "set terminal pngcairo size 900,{}", 400 * rows).unwrap();
        writeln!(g, "set output '{image_name}'").unwrap();
        writeln!(g, "set datafile separator ','").unwrap();
        writeln!(g, "set key autotitle columnhead").unwrap();
        writeln!(g, "set multiplot layout {rows},1").unwrap();
        let rect = |g: &mut String, lo: &[f64], hi: &[f64], color: &str| {
            writeln!(
                g,
                "set object rect from {},{} to {},{} fc rgb '{color}' fs transparent solid 0.3 behind",
                lo[0], lo[1], hi[0], hi[1]
            )
            .unwrap();
        };
        if self.state_dim >= 2 {
            for b in spec.target.boxes() {
                rect(&mut g, &b.lower, &b.upper, "green");
            }
            for b in spec.avoid.iter().flat_map(BoxUnion::boxes) {
                rect(&mut g, &b.lower, &b.upper, "red");
            }
            writeln!(g, "set xlabel 'x1'\nset ylabel 'x2'").unwrap();
            writeln!(
                g,
                "plot '{csv_name}' using 2:3 with linespoints title 'trajectory'"
            )
            .unwrap();
        } else {
            writeln!(g, "set xlabel 't'\nset ylabel 'x1'").unwrap();
            writeln!(g, "plot '{csv_name}' using 1:2 with linespoints title 'x1'").unwrap();
        }
        writeln!(g, "unset object").unwrap();
        let first_u = 2 + self.state_dim + 2;
        for i in 0..self.input_dim {
            writeln!(g, "set xlabel 't'\nset ylabel 'u{}'", i + 1).unwrap();
            writeln!(
                g,
                "plot '{csv_name}' using 1:{} with steps title 'u{}'",
                first_u + i,
                i + 1
            )
            .unwrap();
        }
        writeln!(g, "unset multiplot").unwrap();
        g
    }
}

/// Closed-loop run from `x0` until the state has stayed in the target for
/// `stay_horizon` consecutive samples, the controller gives up, or
/// `max_steps` inputs have been applied.
pub fn simulate_closed_loop(
    sys: &ControlSystem,
    ctrl: &Controller,
    abs: &FiniteSystem,
    spec: &SpecProblem,
    x0: &[f64],
    max_steps: usize,
    stay_horizon: usize,
) -> Result<Trajectory> {
    if x0.len() != abs.state_dim() || sys.state_dim() != abs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: abs.state_dim(),
            found: x0.len(),
        });
    }
    if ctrl.state_count() != abs.state_count() {
        return Err(Error::param("controller does not match the abstraction"));
    }
    if stay_horizon == 0 {
        return Err(Error::param("stay horizon must be at least 1"));
    }
    let tau = abs.params().tau;
    let stepper = sys.stepper(tau, DEFAULT_SUBSTEPS)?;
    let mut samples = Vec::new();
    let mut x = x0.to_vec();
    let mut inside = 0usize;
    let mut k = 0usize;
    let status = loop {
        let t = k as f64 * tau;
        let mut sample = Sample {
            t,
            x: x.clone(),
            state: None,
            input: None,
            u: Vec::new(),
            mode: None,
            value: None,
        };
        let refined = refine_step(ctrl, abs, &x);
        match &refined {
            Ok((state, _)) | Err(RefineError::NotWinning(Some(state))) => {
                sample.state = Some(*state);
                if let Some(e) = ctrl.entry(*state) {
                    sample.mode = Some(e.mode);
                    sample.value = e.value;
                }
            }
            _ => {}
        }
        if spec.target.contains_unchecked(&x) {
            inside += 1;
        } else {
            inside = 0;
        }
        if inside >= stay_horizon {
            samples.push(sample);
            break Status::SpecSatisfied;
        }
        let input = match refined {
            Err(RefineError::LeftDomain) => {
                samples.push(sample);
                break Status::LeftDomain;
            }
            Err(RefineError::NotWinning(s)) => {
                samples.push(sample);
                break Status::NotWinning(s);
            }
            Ok((_, None)) => {
                // Target of a pure reach controller: nothing left to apply.
                samples.push(sample);
                break Status::SpecSatisfied;
            }
            Ok((_, Some(u))) => u,
        };
        if k == max_steps {
            samples.push(sample);
            break Status::Running;
        }
        let u = abs.input_value(input);
        sample.input = Some(input);
        sample.u = u.clone();
        samples.push(sample);
        match stepper.step(&x, &u) {
            Ok(next) => x = next,
            Err(e) => break Status::IntegrationFailed(e.to_string()),
        }
        k += 1;
    };
    Ok(Trajectory {
        tau,
        state_dim: abs.state_dim(),
        input_dim: sys.input_dim(),
        samples,
        status,
    })
}

/// Independent runs from each initial state, in input order.
pub fn simulate_batch(
    sys: &ControlSystem,
    ctrl: &Controller,
    abs: &FiniteSystem,
    spec: &SpecProblem,
    initial: &[Vec<f64>],
    max_steps: usize,
    stay_horizon: usize,
) -> Result<Vec<Trajectory>> {
    par::try_map_indexed(initial.len(), |i| {
        simulate_closed_loop(sys, ctrl, abs, spec, &initial[i], max_steps, stay_horizon)
    })
}

/// Outcome of [`check_spec`].
#[derive(Debug, Clone, PartialEq)]
pub enum Verdict {
    Pass,
    /// `sample` is the first offending index, `None` when the trajectory is
    /// empty or never enters the target.
    Fail {
        sample: Option<usize>,
        reason: String,
    },
}

impl Verdict {
    pub fn passed(&self) -> bool {
        matches!(self, Verdict::Pass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Verdict::Pass => write!(f, "pass"),
            Verdict::Fail {
                sample: Some(i),
                reason,
            } => write!(f, "fail at sample {i}: {reason}"),
            Verdict::Fail {
                sample: None,
                reason,
            } => write!(f, "fail: {reason}"),
        }
    }
}

/// Monitors the sampled states only: no sample in the avoid set, some
/// sample in the target, and the last `stay_horizon` samples all in the
/// target. Samples between the first entry and that final window may
/// leave the target.
pub fn check_spec(traj: &Trajectory, spec: &SpecProblem, stay_horizon: usize) -> Verdict {
    let fail = |sample, reason: &str| Verdict::Fail {
        sample,
        reason: reason.to_string(),
    };
    if let Some(i) = traj.samples.iter().position(|s| spec.in_avoid(&s.x)) {
        return fail(Some(i), "sample inside the avoid set");
    }
    let Some(first) = traj
        .samples
        .iter()
        .position(|s| spec.target.contains_unchecked(&s.x))
    else {
        return fail(None, "target never reached");
    };
    let n = traj.samples.len();
    let window = stay_horizon.max(1);
    if n - first < window {
        return fail(
            Some(n - 1),
            "trajectory ends before the stay window is complete",
        );
    }
    if let Some(off) = traj.samples[n - window..]
        .iter()
        .position(|s| !spec.target.contains_unchecked(&s.x))
    {
        return fail(
            Some(n - window + off),
            "sample outside the target in the stay window",
        );
    }
    Verdict::Pass
}

/// Largest distance between a logged continuous state and the lattice
/// point of its abstract state.
pub fn association_gap(traj: &Trajectory, abs: &FiniteSystem) -> f64 {
    traj.samples
        .iter()
        .filter_map(|s| {
            s.state
                .map(|x| crate::transition::sup_dist(&s.x, &abs.output(x)))
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_abstraction, QuantParams};
    use crate::dynamics::{builtin_system, SystemParams};
    use crate::growth::affine_bound;
    use crate::synthesis::reach_and_stay;
    use crate::transition::is_run;

    struct Setup {
        sys: ControlSystem,
        abs: FiniteSystem,
        spec: SpecProblem,
        ctrl: Controller,
    }

    fn plane() -> Setup {
        // Two decoupled single integrators.
        let sys = builtin_system(
            "linear",
            &SystemParams {
                a_matrix: Some(vec![vec![0.0, 0.0], vec![0.0, 0.0]]),
                b_matrix: Some(vec![vec![1.0, 0.0], vec![0.0, 1.0]]),
                input_set: Some(BoxUnion::single(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap()),
                ..Default::default()
            },
        )
        .unwrap();
        let q = QuantParams {
            tau: 0.5,
            eta: 0.2,
            mu: 0.3,
            theta: 0.2,
            epsilon: 0.2,
        };
        let d = BoxUnion::single(vec![0.0, 0.0], vec![6.0, 6.0]).unwrap();
        let abs = build_abstraction(&sys, &affine_bound(1.0, 0.0).unwrap(), &d, &q, true).unwrap();
        let spec = SpecProblem::new(
            BoxUnion::single(vec![4.0, 4.0], vec![5.5, 5.5]).unwrap(),
            Some(BoxUnion::single(vec![2.0, 0.0], vec![2.5, 3.5]).unwrap()),
        )
        .unwrap();
        let ctrl = reach_and_stay(&abs, &spec).unwrap();
        Setup {
            sys,
            abs,
            spec,
            ctrl,
        }
    }

    #[test]
    fn refine_on_and_near_lattice_points() {
        let s = plane();
        let (x, _) = refine_step(&s.ctrl, &s.abs, &[1.0, 4.0]).unwrap();
        assert_eq!(s.abs.output(x), vec![1.0, 4.0]);
        let (y, _) = refine_step(&s.ctrl, &s.abs, &[1.09, 4.09]).unwrap();
        assert_eq!(x, y);
        assert_eq!(
            refine_step(&s.ctrl, &s.abs, &[-1.0, 0.0]),
            Err(RefineError::LeftDomain)
        );
        // Directly behind the obstacle nothing wins.
        let behind = refine_step(&s.ctrl, &s.abs, &[1.8, 1.0]);
        assert!(
            matches!(behind, Err(RefineError::NotWinning(Some(_)))),
            "{behind:?}"
        );
    }

    #[test]
    fn closed_loop_reaches_and_stays() {
        let s = plane();
        let x0 = [0.4, 0.4];
        let traj = simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &x0, 500, 20).unwrap();
        assert_eq!(traj.status, Status::SpecSatisfied);
        assert!(check_spec(&traj, &s.spec, 20).passed());
        assert!(association_gap(&traj, &s.abs) <= s.abs.eta() / 2.0 + 1e-12);
        let run = traj.abstract_run().unwrap();
        assert_eq!(run.len(), traj.samples.len() - 1);
        assert!(is_run(&s.abs, &run));
        for (i, w) in traj.samples.windows(2).enumerate() {
            assert!((w[1].t - w[0].t - 0.5).abs() < 1e-12, "sample {i}");
            assert!(s.abs.is_enabled(w[0].state.unwrap(), w[0].input.unwrap()));
            if w[1].mode == Some(Mode::Reach) {
                assert!(w[1].value < w[0].value);
            }
        }
    }

    #[test]
    fn start_in_core_needs_no_reach_phase() {
        let s = plane();
        let traj =
            simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[4.8, 4.8], 500, 10).unwrap();
        assert_eq!(traj.status, Status::SpecSatisfied);
        assert_eq!(traj.samples.len(), 10);
        assert!(traj.samples.iter().all(|x| x.mode == Some(Mode::Stay)));
    }

    #[test]
    fn terminal_statuses() {
        let s = plane();
        let out =
            simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[7.0, 1.0], 10, 5).unwrap();
        assert_eq!(out.status, Status::LeftDomain);
        assert_eq!(out.samples.len(), 1);
        let lost =
            simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[1.8, 1.0], 10, 5).unwrap();
        assert!(matches!(lost.status, Status::NotWinning(Some(_))));
        let short =
            simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[0.4, 0.4], 2, 5).unwrap();
        assert_eq!(short.status, Status::Running);
        assert_eq!(short.samples.len(), 3);
        assert!(!check_spec(&short, &s.spec, 5).passed());
        assert!(simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[0.4, 0.4], 2, 0).is_err());
    }

    fn fake(points: &[[f64; 2]]) -> Trajectory {
        Trajectory {
            tau: 1.0,
            state_dim: 2,
            input_dim: 0,
            samples: points
                .iter()
                .enumerate()
                .map(|(i, p)| Sample {
                    t: i as f64,
                    x: p.to_vec(),
                    state: None,
                    input: None,
                    u: Vec::new(),
                    mode: None,
                    value: None,
                })
                .collect(),
            status: Status::Running,
        }
    }

    #[test]
    fn monitor_verdicts() {
        let s = plane();
        let good = fake(&[[0.0, 0.0], [4.5, 4.5], [4.6, 4.6]]);
        assert_eq!(check_spec(&good, &s.spec, 2), Verdict::Pass);
        let hit = fake(&[[0.0, 0.0], [2.2, 1.0], [4.5, 4.5], [4.6, 4.6]]);
        assert!(matches!(
            check_spec(&hit, &s.spec, 2),
            Verdict::Fail {
                sample: Some(1),
                ..
            }
        ));
        assert!(matches!(
            check_spec(&fake(&[]), &s.spec, 1),
            Verdict::Fail { sample: None, .. }
        ));
        let left = fake(&[[4.5, 4.5], [4.6, 4.6], [0.0, 0.0]]);
        assert!(matches!(
            check_spec(&left, &s.spec, 2),
            Verdict::Fail {
                sample: Some(2),
                ..
            }
        ));
    }

    #[test]
    fn csv_and_plot_script() {
        let s = plane();
        let traj =
            simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, &[0.4, 0.4], 500, 3).unwrap();
        let csv = traj.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("t,x1,x2,state_index,input_index,u1,u2"));
        assert_eq!(lines.count(), traj.samples.len());
        assert!(csv.lines().nth(1).unwrap().starts_with("0,0.4,0.4,"));
        let g = traj.plot_script(&s.spec, "run.csv", "run.png");
        assert!(g.contains("using 2:3"));
        assert!(g.contains("using 1:6 with steps"));
        assert!(g.contains("from 4,4 to 5.5,5.5"));
    }

    #[test]
    fn batch_matches_single_runs() {
        let s = plane();
        let starts = vec![vec![0.4, 0.4], vec![1.0, 5.0], vec![5.0, 1.0]];
        let all = simulate_batch(&s.sys, &s.ctrl, &s.abs, &s.spec, &starts, 200, 5).unwrap();
        for (x0, t) in starts.iter().zip(&all) {
            let one = simulate_closed_loop(&s.sys, &s.ctrl, &s.abs, &s.spec, x0, 200, 5).unwrap();
            assert_eq!(&one, t);
        }
    }
}
