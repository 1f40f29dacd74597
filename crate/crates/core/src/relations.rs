//! Maximal approximate simulation relations between finite systems, and a
//! sampled check of the relation between the sampled plant and its lattice
//! abstraction.

use std::collections::{HashSet, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::abstraction::{transition_radius, QuantParams};
use crate::dynamics::{ControlSystem, DEFAULT_SUBSTEPS};
use crate::error::{Error, Result};
use crate::geometry::{coord, nearest_index, IndexBox};
use crate::growth::{sample_box_union, trial_rng, GrowthBound};
use crate::par;
use crate::transition::{sup_dist, FiniteSystem, TransitionSystem};

/// Plain or alternating simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelationKind {
    Simulation,
    Alternating,
}

impl RelationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RelationKind::Simulation => "sim",
            RelationKind::Alternating => "alt",
        }
    }
}

impl FromStr for RelationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sim" => Ok(RelationKind::Simulation),
            "alt" => Ok(RelationKind::Alternating),
            other => Err(Error::param(format!("unknown relation mode '{other}'"))),
        }
    }
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A set of `(state of S_a, state of S_b)` pairs.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Relation {
    pairs: Vec<(usize, usize)>,
    index: HashSet<(usize, usize)>,
}

impl Relation {
    pub fn new(mut pairs: Vec<(usize, usize)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let index = pairs.iter().copied().collect();
        Relation { pairs, index }
    }

    /// Pairs in lexicographic order.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn contains(&self, a: usize, b: usize) -> bool {
        self.index.contains(&(a, b))
    }

    /// Every state `0..state_count_a` of `S_a` has a partner.
    pub fn is_total(&self, state_count_a: usize) -> bool {
        let mut seen = vec![false; state_count_a];
        for &(a, _) in &self.pairs {
            if a < state_count_a {
                seen[a] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// Text dump: a header followed by one `a,b` line per pair.
    pub fn dump(&self, header: &RelationHeader) -> String {
        let mut out = String::new();
        out.push_str("symctl-relation 1\n");
        out.push_str(&format!("mode {}\n", header.kind));
        out.push_str(&format!("epsilon {:?}\n", header.epsilon));
        out.push_str(&format!("system_a {}\n", header.system_a));
        out.push_str(&format!("system_b {}\n", header.system_b));
        out.push_str(&format!("pairs {}\n", self.pairs.len()));
        for (a, b) in &self.pairs {
            out.push_str(&format!("{a},{b}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<(RelationHeader, Relation)> {
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("missing '{key}' line")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_string)
                .ok_or_else(|| Error::format(format!("expected '{key}', got '{line}'")))
        };
        if field("symctl-relation")? != "1" {
            return Err(Error::format("unsupported relation format version"));
        }
        let kind = field("mode")?.parse()?;
        let epsilon = field("epsilon")?
            .parse::<f64>()
            .map_err(|e| Error::format(format!("bad epsilon: {e}")))?;
        let system_a = field("system_a")?;
        let system_b = field("system_b")?;
        let count: usize = field("pairs")?
            .parse()
            .map_err(|e| Error::format(format!("bad pair count: {e}")))?;
        let mut pairs = Vec::with_capacity(count);
        for line in lines {
            let (a, b) = line
                .split_once(',')
                .ok_or_else(|| Error::format(format!("bad pair line '{line}'")))?;
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|e| Error::format(format!("bad state index '{s}': {e}")))
            };
            pairs.push((parse(a)?, parse(b)?));
        }
        if pairs.len() != count {
            return Err(Error::format(format!(
                "header announces {count} pairs, found {}",
                pairs.len()
            )));
        }
        let rel = Relation::new(pairs);
        if rel.len() != count {
            return Err(Error::format("duplicate pairs"));
        }
        Ok((
            RelationHeader {
                kind,
                epsilon,
                system_a,
                system_b,
            },
            rel,
        ))
    }
}

/// Metadata written in front of a relation dump.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationHeader {
    pub kind: RelationKind,
    pub epsilon: f64,
    pub system_a: String,
    pub system_b: String,
}

/// Maximal `epsilon`-approximate simulation relation from `a` to `b`.
/// Totality is not imposed; query it with [`Relation::is_total`].
pub fn max_simulation<A, B>(a: &A, b: &B, epsilon: f64) -> Result<Relation>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    Solver::new(a, b, epsilon, RelationKind::Simulation)?.run_worklist()
}

/// Maximal `epsilon`-approximate alternating simulation relation from `a`
/// to `b`.
pub fn max_alt_simulation<A, B>(a: &A, b: &B, epsilon: f64) -> Result<Relation>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    Solver::new(a, b, epsilon, RelationKind::Alternating)?.run_worklist()
}

pub fn max_relation<A, B>(a: &A, b: &B, epsilon: f64, kind: RelationKind) -> Result<Relation>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    Solver::new(a, b, epsilon, kind)?.run_worklist()
}

/// Same fixed point computed by repeated full sweeps. Slow; kept to
/// cross-check the worklist version.
pub fn max_relation_naive<A, B>(a: &A, b: &B, epsilon: f64, kind: RelationKind) -> Result<Relation>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    Solver::new(a, b, epsilon, kind)?.run_sweeps()
}

/// Candidate pairs stored row-wise by `a` state, with liveness flags.
struct Solver<'s, A: ?Sized, B: ?Sized> {
    a: &'s A,
    b: &'s B,
    kind: RelationKind,
    /// `pair_b[row_start[xa]..row_start[xa + 1]]` are the partners of `xa`,
    /// ascending.
    row_start: Vec<usize>,
    pair_a: Vec<usize>,
    pair_b: Vec<usize>,
    alive: Vec<bool>,
    /// Union of successors over all inputs, ascending.
    succ_a: Vec<Vec<usize>>,
    succ_b: Vec<Vec<usize>>,
    stamp: Vec<u64>,
    generation: u64,
}

fn successor_union<S: TransitionSystem + ?Sized>(s: &S) -> Vec<Vec<usize>> {
    par::map_indexed(s.state_count(), |x| {
        let mut all = Vec::new();
        for u in 0..s.input_count() {
            s.for_each_post(x, u, &mut |y| all.push(y));
        }
        all.sort_unstable();
        all.dedup();
        all
    })
}

fn predecessors(succ: &[Vec<usize>]) -> Vec<Vec<usize>> {
    let mut pred = vec![Vec::new(); succ.len()];
    for (x, list) in succ.iter().enumerate() {
        for &y in list {
            pred[y].push(x);
        }
    }
    pred
}

impl<'s, A, B> Solver<'s, A, B>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    fn new(a: &'s A, b: &'s B, epsilon: f64, kind: RelationKind) -> Result<Self> {
        if !(epsilon >= 0.0 && epsilon.is_finite()) {
            return Err(Error::param(format!("epsilon must be >= 0, got {epsilon}")));
        }
        if a.output_dim() != b.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: a.output_dim(),
                found: b.output_dim(),
            });
        }
        let outputs_b: Vec<Vec<f64>> = (0..b.state_count()).map(|x| b.output(x)).collect();
        let rows = par::map_indexed(a.state_count(), |xa| {
            let ya = a.output(xa);
            outputs_b
                .iter()
                .enumerate()
                .filter(|(_, yb)| sup_dist(&ya, yb) <= epsilon)
                .map(|(xb, _)| xb)
                .collect::<Vec<_>>()
        });
        let mut row_start = Vec::with_capacity(rows.len() + 1);
        let mut pair_a = Vec::new();
        let mut pair_b = Vec::new();
        row_start.push(0);
        for (xa, row) in rows.into_iter().enumerate() {
            pair_a.extend(std::iter::repeat_n(xa, row.len()));
            pair_b.extend(row);
            row_start.push(pair_b.len());
        }
        let alive = vec![true; pair_b.len()];
        Ok(Solver {
            a,
            b,
            kind,
            row_start,
            pair_a,
            pair_b,
            alive,
            succ_a: successor_union(a),
            succ_b: successor_union(b),
            stamp: vec![0; b.state_count()],
            generation: 0,
        })
    }

    fn row(&self, xa: usize) -> std::ops::Range<usize> {
        self.row_start[xa]..self.row_start[xa + 1]
    }

    fn pair_id(&self, xa: usize, xb: usize) -> Option<usize> {
        let r = self.row(xa);
        self.pair_b[r.clone()]
            .binary_search(&xb)
            .ok()
            .map(|k| r.start + k)
    }

    fn next_generation(&mut self) -> u64 {
        self.generation += 1;
        self.generation
    }

    /// Marks every live partner of every state in `states_a`.
    fn mark_partners(&mut self, states_a: &[usize], generation: u64) {
        for &ya in states_a {
            for id in self.row(ya) {
                if self.alive[id] {
                    self.stamp[self.pair_b[id]] = generation;
                }
            }
        }
    }

    fn holds(&mut self, id: usize) -> bool {
        let (xa, xb) = (self.pair_a[id], self.pair_b[id]);
        match self.kind {
            RelationKind::Simulation => {
                // Every successor of xa needs a live partner among the
                // successors of xb.
                let g = self.next_generation();
                for &yb in &self.succ_b[xb] {
                    self.stamp[yb] = g;
                }
                let stamp = &self.stamp;
                self.succ_a[xa].iter().all(|&ya| {
                    self.row(ya)
                        .any(|k| self.alive[k] && stamp[self.pair_b[k]] == g)
                })
            }
            RelationKind::Alternating => {
                let inputs_b: Vec<usize> = self.b.enabled_inputs(xb);
                for ua in self.a.enabled_inputs(xa) {
                    // States of S_b related to some ua-successor of xa.
                    let posts_a = self.a.post(xa, ua);
                    let g = self.next_generation();
                    self.mark_partners(&posts_a, g);
                    let stamp = &self.stamp;
                    let matched = inputs_b.iter().any(|&ub| {
                        let mut ok = true;
                        self.b.for_each_post(xb, ub, &mut |yb| ok &= stamp[yb] == g);
                        ok
                    });
                    if !matched {
                        return false;
                    }
                }
                true
            }
        }
    }

    fn run_worklist(mut self) -> Result<Relation> {
        let pred_a = predecessors(&self.succ_a);
        let pred_b = predecessors(&self.succ_b);
        let mut queued = vec![true; self.alive.len()];
        let mut queue: VecDeque<usize> = (0..self.alive.len()).collect();
        let mut pred_mark = vec![0u64; self.b.state_count()];
        let mut pred_generation = 0u64;
        while let Some(id) = queue.pop_front() {
            queued[id] = false;
            if !self.alive[id] || self.holds(id) {
                continue;
            }
            self.alive[id] = false;
            // Only pairs (pa, pb) with pa -> xa and pb -> xb can depend on
            // the deleted pair.
            let (xa, xb) = (self.pair_a[id], self.pair_b[id]);
            pred_generation += 1;
            for &pb in &pred_b[xb] {
                pred_mark[pb] = pred_generation;
            }
            for &pa in &pred_a[xa] {
                for k in self.row(pa) {
                    if self.alive[k] && !queued[k] && pred_mark[self.pair_b[k]] == pred_generation {
                        queued[k] = true;
                        queue.push_back(k);
                    }
                }
            }
        }
        Ok(self.into_relation())
    }

    fn run_sweeps(mut self) -> Result<Relation> {
        loop {
            let mut changed = false;
            for id in 0..self.alive.len() {
                if self.alive[id] && !self.holds(id) {
                    self.alive[id] = false;
                    changed = true;
                }
            }
            if !changed {
                return Ok(self.into_relation());
            }
        }
    }

    fn into_relation(self) -> Relation {
        let pairs = (0..self.alive.len())
            .filter(|&k| self.alive[k])
            .map(|k| (self.pair_a[k], self.pair_b[k]))
            .collect();
        Relation::new(pairs)
    }
}

/// Checks conditions (ii) and (iii) for a given relation, without
/// requiring maximality.
pub fn is_valid_relation<A, B>(
    a: &A,
    b: &B,
    epsilon: f64,
    kind: RelationKind,
    rel: &Relation,
) -> Result<bool>
where
    A: TransitionSystem + ?Sized,
    B: TransitionSystem + ?Sized,
{
    let mut solver = Solver::new(a, b, epsilon, kind)?;
    for &(xa, xb) in rel.pairs() {
        if xa >= a.state_count() || xb >= b.state_count() || solver.pair_id(xa, xb).is_none() {
            return Ok(false);
        }
    }
    for id in 0..solver.alive.len() {
        solver.alive[id] = rel.contains(solver.pair_a[id], solver.pair_b[id]);
    }
    for id in 0..solver.alive.len() {
        if solver.alive[id] && !solver.holds(id) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// How the plant input is drawn in the simulation direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputRegime {
    /// Anywhere in `U`, matched by the closest lattice input.
    Continuous,
    /// Only lattice inputs, matched exactly.
    Lattice,
}

/// Which half of the two-sided relation a sample exercised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// The plant move is matched by the abstraction.
    Simulation,
    /// The abstract input is replayed on the plant.
    Alternating,
}

/// A sampled transition the abstraction failed to match within epsilon.
#[derive(Debug, Clone, PartialEq)]
pub struct TheoremViolation {
    pub trial: usize,
    pub direction: Direction,
    pub state: usize,
    pub input: usize,
    pub x_plant: Vec<f64>,
    pub u_plant: Vec<f64>,
    pub x_plant_next: Vec<f64>,
    /// Distance from `x_plant_next` to the closest stored successor.
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TheoremReport {
    pub trials: usize,
    pub interior_states: usize,
    pub regime: InputRegime,
    /// Radius the abstraction was built with.
    pub radius: f64,
    /// `beta(theta, tau) + gamma(mu, tau) + eta` for the given parameters.
    pub nominal_radius: f64,
    pub gamma_zero: bool,
    pub simulation_violations: usize,
    pub alternating_violations: usize,
    pub worst_simulation_distance: f64,
    pub worst_alternating_distance: f64,
    /// Largest gap between a sampled plant input and its lattice match.
    pub worst_input_gap: f64,
    /// Up to [`MAX_WITNESSES`] violations, in trial order.
    pub witnesses: Vec<TheoremViolation>,
}

pub const MAX_WITNESSES: usize = 32;

impl TheoremReport {
    /// No interior states, so nothing was checked.
    pub fn inconclusive(&self) -> bool {
        self.interior_states == 0
    }

    pub fn violations(&self) -> usize {
        self.simulation_violations + self.alternating_violations
    }

    pub fn passed(&self) -> bool {
        !self.inconclusive() && self.violations() == 0
    }

    /// The abstraction was built with a smaller radius than the nominal one.
    pub fn radius_shrunk(&self) -> bool {
        self.radius < self.nominal_radius * (1.0 - 1e-12)
    }

    pub fn regime_note(&self) -> String {
        let inputs = match self.regime {
            InputRegime::Lattice => "plant inputs restricted to the input lattice",
            InputRegime::Continuous if self.gamma_zero => {
                "continuous plant inputs, growth bound without input term \
                 (guarantee covers lattice inputs only)"
            }
            InputRegime::Continuous => "continuous plant inputs",
        };
        format!(
            "{inputs}; radius {:.6} against nominal {:.6}",
            self.radius, self.nominal_radius
        )
    }
}

impl fmt::Display for TheoremReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.inconclusive() {
            return write!(f, "inconclusive: no interior states");
        }
        writeln!(f, "trials:                 {}", self.trials)?;
        writeln!(f, "interior states:        {}", self.interior_states)?;
        writeln!(f, "regime:                 {}", self.regime_note())?;
        writeln!(
            f,
            "simulation violations:  {} (worst distance {:.6})",
            self.simulation_violations, self.worst_simulation_distance
        )?;
        writeln!(
            f,
            "alternating violations: {} (worst distance {:.6})",
            self.alternating_violations, self.worst_alternating_distance
        )?;
        write!(f, "worst input gap:        {:.6}", self.worst_input_gap)?;
        for v in &self.witnesses {
            write!(
                f,
                "\n  trial {} {:?}: state {} input {} x {:?} u {:?} -> {:?} at distance {:.6}",
                v.trial,
                v.direction,
                v.state,
                v.input,
                v.x_plant,
                v.u_plant,
                v.x_plant_next,
                v.distance
            )?;
        }
        Ok(())
    }
}

/// Smallest sup-distance from `p` to a lattice point of `b`.
pub fn distance_to_index_box(p: &[f64], b: &IndexBox, spacing: f64) -> f64 {
    let mut d: f64 = 0.0;
    for i in 0..p.len() {
        let k = nearest_index(p[i], spacing).clamp(b.lo[i], b.hi[i]);
        d = d.max((coord(k, spacing) - p[i]).abs());
    }
    d
}

/// A lattice input within `mu` of `v`, drawn uniformly among all such
/// inputs. Falls back to the closest lattice input when none is that near.
fn matching_input(s: &FiniteSystem, v: &[f64], rng: &mut impl Rng) -> (usize, f64) {
    let mu = s.inputs().spacing();
    let near: Vec<(usize, f64)> = (0..s.input_count())
        .map(|u| (u, sup_dist(&s.input_value(u), v)))
        .filter(|&(_, d)| d <= mu)
        .collect();
    if near.is_empty() {
        return (0..s.input_count())
            .map(|u| (u, sup_dist(&s.input_value(u), v)))
            .fold((usize::MAX, f64::INFINITY), |best, c| {
                if c.1 < best.1 {
                    c
                } else {
                    best
                }
            });
    }
    near[rng.gen_range(0..near.len())]
}

/// Sampled check of the two-sided epsilon relation between the sampled
/// plant and `abs` on interior states (all inputs enabled).
pub fn mc_theorem_check(
    sys: &ControlSystem,
    gb: &GrowthBound,
    abs: &FiniteSystem,
    q: &QuantParams,
    trials: usize,
    seed: u64,
) -> Result<TheoremReport> {
    mc_theorem_check_with(sys, gb, abs, q, trials, seed, InputRegime::Continuous)
}

pub fn mc_theorem_check_with(
    sys: &ControlSystem,
    gb: &GrowthBound,
    abs: &FiniteSystem,
    q: &QuantParams,
    trials: usize,
    seed: u64,
    regime: InputRegime,
) -> Result<TheoremReport> {
    if trials == 0 {
        return Err(Error::param("trials must be positive"));
    }
    if sys.state_dim() != abs.state_dim() {
        return Err(Error::DimensionMismatch {
            expected: abs.state_dim(),
            found: sys.state_dim(),
        });
    }
    let interior: Vec<usize> = (0..abs.state_count())
        .filter(|&x| (0..abs.input_count()).all(|u| abs.is_enabled(x, u)))
        .collect();
    let mut report = TheoremReport {
        trials,
        interior_states: interior.len(),
        regime,
        radius: abs.radius(),
        nominal_radius: transition_radius(q, gb)?,
        gamma_zero: gb.gamma_is_zero(),
        simulation_violations: 0,
        alternating_violations: 0,
        worst_simulation_distance: 0.0,
        worst_alternating_distance: 0.0,
        worst_input_gap: 0.0,
        witnesses: Vec::new(),
    };
    if interior.is_empty() {
        return Ok(report);
    }
    let stepper = sys.stepper(q.tau, DEFAULT_SUBSTEPS)?;
    let eps = q.epsilon;
    let eta = abs.eta();
    let n = abs.state_dim();

    let outcomes = par::try_map_indexed(trials, |trial| -> Result<[Sample; 2]> {
        let mut rng = trial_rng(seed, trial);
        let x = interior[rng.gen_range(0..interior.len())];
        let xq = abs.output(x);
        let mut x_plant = xq.clone();
        for _ in 0..100 {
            let cand: Vec<f64> = xq.iter().map(|c| c + rng.gen_range(-eps..=eps)).collect();
            if abs.domain().contains_unchecked(&cand) {
                x_plant = cand;
                break;
            }
        }

        let (u_a, v_a, gap) = match regime {
            InputRegime::Continuous => {
                let v = sample_box_union(sys.input_set(), &mut rng);
                let (u, gap) = matching_input(abs, &v, &mut rng);
                (u, v, gap)
            }
            InputRegime::Lattice => {
                let u = rng.gen_range(0..abs.input_count());
                (u, abs.input_value(u), 0.0)
            }
        };
        let u_b = rng.gen_range(0..abs.input_count());

        let check = |direction, u: usize, v: Vec<f64>| -> Result<Sample> {
            let next = stepper.step(&x_plant, &v)?;
            let b = abs
                .successor_box(x, u)
                .expect("interior states enable every input");
            debug_assert_eq!(b.dim(), n);
            let distance = distance_to_index_box(&next, &b, eta);
            Ok(Sample {
                distance,
                violation: (distance > eps).then(|| TheoremViolation {
                    trial,
                    direction,
                    state: x,
                    input: u,
                    x_plant: x_plant.clone(),
                    u_plant: v,
                    x_plant_next: next,
                    distance,
                }),
                input_gap: 0.0,
            })
        };
        let mut a = check(Direction::Simulation, u_a, v_a)?;
        a.input_gap = gap;
        let b = check(Direction::Alternating, u_b, abs.input_value(u_b))?;
        Ok([a, b])
    })?;

    for [a, b] in outcomes {
        report.worst_input_gap = report.worst_input_gap.max(a.input_gap);
        report.worst_simulation_distance = report.worst_simulation_distance.max(a.distance);
        report.worst_alternating_distance = report.worst_alternating_distance.max(b.distance);
        for (sample, counter) in [
            (a, &mut report.simulation_violations),
            (b, &mut report.alternating_violations),
        ] {
            if let Some(v) = sample.violation {
                *counter += 1;
                if report.witnesses.len() < MAX_WITNESSES {
                    report.witnesses.push(v);
                }
            }
        }
    }
    Ok(report)
}

struct Sample {
    distance: f64,
    violation: Option<TheoremViolation>,
    input_gap: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::abstraction::{build_abstraction, build_abstraction_with, AbstractionOptions};
    use crate::dynamics::{builtin_system, SystemParams};
    use crate::geometry::BoxUnion;
    use crate::growth::affine_bound;
    use crate::transition::ExplicitSystem;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sys(outputs: &[f64], inputs: usize, succ: Vec<Vec<Vec<usize>>>) -> ExplicitSystem {
        ExplicitSystem::new(outputs.iter().map(|&y| vec![y]).collect(), inputs, succ).unwrap()
    }

    /// Conditions (ii) and (iii) read straight off the definitions.
    fn valid(
        a: &ExplicitSystem,
        b: &ExplicitSystem,
        eps: f64,
        kind: RelationKind,
        rel: &HashSet<(usize, usize)>,
    ) -> bool {
        rel.iter().all(|&(xa, xb)| {
            if sup_dist(&a.output(xa), &b.output(xb)) > eps {
                return false;
            }
            match kind {
                RelationKind::Simulation => (0..a.input_count()).all(|ua| {
                    a.post(xa, ua).iter().all(|&ya| {
                        (0..b.input_count())
                            .any(|ub| b.post(xb, ub).iter().any(|&yb| rel.contains(&(ya, yb))))
                    })
                }),
                RelationKind::Alternating => a.enabled_inputs(xa).into_iter().all(|ua| {
                    b.enabled_inputs(xb).into_iter().any(|ub| {
                        b.post(xb, ub)
                            .iter()
                            .all(|&yb| a.post(xa, ua).iter().any(|&ya| rel.contains(&(ya, yb))))
                    })
                }),
            }
        })
    }

    /// Union of all valid relations inside the epsilon-close pairs.
    fn brute_force(
        a: &ExplicitSystem,
        b: &ExplicitSystem,
        eps: f64,
        kind: RelationKind,
    ) -> Relation {
        let close: Vec<(usize, usize)> = (0..a.state_count())
            .flat_map(|xa| (0..b.state_count()).map(move |xb| (xa, xb)))
            .filter(|&(xa, xb)| sup_dist(&a.output(xa), &b.output(xb)) <= eps)
            .collect();
        assert!(close.len() <= 20, "instance too large for enumeration");
        let mut union = HashSet::new();
        for mask in 0u32..(1u32 << close.len()) {
            let rel: HashSet<(usize, usize)> = close
                .iter()
                .enumerate()
                .filter(|(i, _)| mask >> i & 1 == 1)
                .map(|(_, &p)| p)
                .collect();
            if valid(a, b, eps, kind, &rel) {
                union.extend(rel);
            }
        }
        Relation::new(union.into_iter().collect())
    }

    fn random_system(rng: &mut ChaCha8Rng, deterministic: bool) -> ExplicitSystem {
        let n = rng.gen_range(1..=5);
        let m = rng.gen_range(1..=3);
        let outputs: Vec<f64> = (0..n).map(|_| rng.gen_range(0..3) as f64).collect();
        let succ = (0..n)
            .map(|_| {
                (0..m)
                    .map(|_| {
                        if rng.gen_bool(0.2) {
                            return Vec::new();
                        }
                        let k = if deterministic {
                            1
                        } else {
                            rng.gen_range(1..=3)
                        };
                        (0..k).map(|_| rng.gen_range(0..n)).collect()
                    })
                    .collect()
            })
            .collect();
        sys(&outputs, m, succ)
    }

    fn random_instance(
        rng: &mut ChaCha8Rng,
        deterministic: bool,
    ) -> (ExplicitSystem, ExplicitSystem, f64) {
        loop {
            let a = random_system(rng, deterministic);
            let b = random_system(rng, deterministic);
            let eps = [0.0, 0.5, 1.0][rng.gen_range(0..3)];
            let close = (0..a.state_count())
                .flat_map(|xa| (0..b.state_count()).map(move |xb| (xa, xb)))
                .filter(|&(xa, xb)| sup_dist(&a.output(xa), &b.output(xb)) <= eps)
                .count();
            if close <= 14 {
                return (a, b, eps);
            }
        }
    }

    #[test]
    fn single_state_identity() {
        let s = sys(&[0.0], 1, vec![vec![vec![0]]]);
        let r = max_simulation(&s, &s, 0.0).unwrap();
        assert_eq!(r.pairs(), &[(0, 0)]);
        assert!(r.is_total(1));
    }

    #[test]
    fn output_threshold() {
        let a = sys(&[0.0], 1, vec![vec![vec![0]]]);
        let b = sys(&[0.1], 1, vec![vec![vec![0]]]);
        assert_eq!(max_simulation(&a, &b, 0.2).unwrap().pairs(), &[(0, 0)]);
        assert!(max_simulation(&a, &b, 0.05).unwrap().is_empty());
        assert!(max_alt_simulation(&a, &b, 0.05).unwrap().is_empty());
    }

    #[test]
    fn chains() {
        // 0 -> 1 -> 2 -> 2 against 0 -> 1 -> 1, outputs 0,1,1 and 0,1.
        let a = sys(
            &[0.0, 1.0, 1.0],
            1,
            vec![vec![vec![1]], vec![vec![2]], vec![vec![2]]],
        );
        let b = sys(&[0.0, 1.0], 1, vec![vec![vec![1]], vec![vec![1]]]);
        let r = max_simulation(&a, &b, 0.0).unwrap();
        assert_eq!(r.pairs(), &[(0, 0), (1, 1), (2, 1)]);
        assert_eq!(r, brute_force(&a, &b, 0.0, RelationKind::Simulation));
        assert!(r.is_total(3));
        // b cannot simulate a when a's tail never ends but b blocks.
        let b = sys(&[0.0, 1.0], 1, vec![vec![vec![1]], vec![vec![]]]);
        let r = max_simulation(&a, &b, 0.0).unwrap();
        assert!(r.is_empty());
    }

    #[test]
    fn alternating_stricter_than_plain() {
        // b's only input from state 0 may land in 1 or 2; only 1 matches a.
        let a = sys(&[0.0, 1.0], 1, vec![vec![vec![1]], vec![vec![1]]]);
        let b = sys(
            &[0.0, 1.0, 2.0],
            1,
            vec![vec![vec![1, 2]], vec![vec![1]], vec![vec![2]]],
        );
        let sim = max_simulation(&a, &b, 0.0).unwrap();
        let alt = max_alt_simulation(&a, &b, 0.0).unwrap();
        assert!(sim.contains(0, 0));
        assert!(!alt.contains(0, 0));
        assert!(alt.contains(1, 1));
        assert_eq!(sim, brute_force(&a, &b, 0.0, RelationKind::Simulation));
        assert_eq!(alt, brute_force(&a, &b, 0.0, RelationKind::Alternating));
    }

    #[test]
    fn matches_brute_force_on_random_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (a, b, eps) = random_instance(&mut rng, false);
            for kind in [RelationKind::Simulation, RelationKind::Alternating] {
                let fast = max_relation(&a, &b, eps, kind).unwrap();
                assert_eq!(
                    fast,
                    brute_force(&a, &b, eps, kind),
                    "{kind} {a:?} {b:?} {eps}"
                );
                assert_eq!(fast, max_relation_naive(&a, &b, eps, kind).unwrap());
            }
        }
    }

    #[test]
    fn deterministic_systems_coincide() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let (a, b, eps) = random_instance(&mut rng, true);
            assert!(a.is_deterministic() && b.is_deterministic());
            assert_eq!(
                max_simulation(&a, &b, eps).unwrap(),
                max_alt_simulation(&a, &b, eps).unwrap()
            );
        }
    }

    #[test]
    fn readding_a_deleted_pair_breaks_validity() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..50 {
            let (a, b, eps) = random_instance(&mut rng, false);
            for kind in [RelationKind::Simulation, RelationKind::Alternating] {
                let r = max_relation(&a, &b, eps, kind).unwrap();
                assert!(is_valid_relation(&a, &b, eps, kind, &r).unwrap());
                for xa in 0..a.state_count() {
                    for xb in 0..b.state_count() {
                        if r.contains(xa, xb) || sup_dist(&a.output(xa), &b.output(xb)) > eps {
                            continue;
                        }
                        let mut bigger = r.pairs().to_vec();
                        bigger.push((xa, xb));
                        let bigger = Relation::new(bigger);
                        assert!(!is_valid_relation(&a, &b, eps, kind, &bigger).unwrap());
                    }
                }
            }
        }
    }

    #[test]
    fn rejects_bad_epsilon_and_metric() {
        let a = sys(&[0.0], 1, vec![vec![vec![0]]]);
        assert!(max_simulation(&a, &a, -1.0).is_err());
        assert!(max_simulation(&a, &a, f64::NAN).is_err());
        let b = ExplicitSystem::new(vec![vec![0.0, 0.0]], 1, vec![vec![vec![0]]]).unwrap();
        assert!(matches!(
            max_alt_simulation(&a, &b, 0.0),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dump_round_trip() {
        let r = Relation::new(vec![(3, 1), (0, 2), (0, 0)]);
        let h = RelationHeader {
            kind: RelationKind::Alternating,
            epsilon: 0.2,
            system_a: "aa".into(),
            system_b: "bb".into(),
        };
        let text = r.dump(&h);
        assert!(text.ends_with("pairs 3\n0,0\n0,2\n3,1\n"));
        let (h2, r2) = Relation::parse(&text).unwrap();
        assert_eq!((h2, r2), (h, r));
        assert!(Relation::parse(&text.replace("pairs 3", "pairs 4")).is_err());
        assert!(Relation::parse("garbage").is_err());
    }

    fn small_vehicle() -> (ControlSystem, GrowthBound, QuantParams, BoxUnion) {
        let sys = builtin_system("vehicle", &SystemParams::default()).unwrap();
        let gb = affine_bound(1.0, 1.267).unwrap();
        let q = QuantParams {
            tau: 0.3,
            eta: 0.2,
            mu: 0.3,
            theta: 0.2,
            epsilon: 0.2,
        };
        let d = BoxUnion::single(vec![0.0, 0.0, -1.2], vec![2.4, 2.4, 1.2]).unwrap();
        (sys, gb, q, d)
    }

    #[test]
    fn abstraction_alt_simulates_itself() {
        let (sys, gb, q, _) = small_vehicle();
        let d = BoxUnion::single(vec![0.0, 0.0, -0.6], vec![1.6, 1.6, 0.6]).unwrap();
        let s = build_abstraction(&sys, &gb, &d, &q, true).unwrap();
        let r = max_alt_simulation(&s, &s, 0.0).unwrap();
        for x in 0..s.state_count() {
            assert!(r.contains(x, x));
        }
        assert!(r.is_total(s.state_count()));
    }

    #[test]
    fn exact_replay_always_matches() {
        let (sys, gb, q, d) = small_vehicle();
        let s = build_abstraction(&sys, &gb, &d, &q, true).unwrap();
        let stepper = sys.stepper(q.tau, DEFAULT_SUBSTEPS).unwrap();
        for x in 0..s.state_count() {
            for u in s.enabled_inputs(x) {
                let next = stepper.step(&s.output(x), &s.input_value(u)).unwrap();
                let b = s.successor_box(x, u).unwrap();
                assert!(distance_to_index_box(&next, &b, q.eta) <= q.eta / 2.0 + 1e-12);
            }
        }
    }

    #[test]
    fn sound_abstraction_passes_and_shrunk_radius_fails() {
        let (sys, gb, q, d) = small_vehicle();
        let s = build_abstraction(&sys, &gb, &d, &q, true).unwrap();
        let report = mc_theorem_check(&sys, &gb, &s, &q, 2000, 7).unwrap();
        assert!(report.interior_states > 0);
        assert!(report.passed(), "{report}");

        let bug = AbstractionOptions {
            finite_input_mode: true,
            radius_override: Some(gb.beta(q.theta, q.tau).unwrap()),
            ..Default::default()
        };
        let bad = build_abstraction_with(&sys, &gb, &d, &q, &bug).unwrap();
        let report = mc_theorem_check(&sys, &gb, &bad, &q, 2000, 7).unwrap();
        assert!(report.simulation_violations > 0, "{report}");
        assert!(!report.witnesses.is_empty());
    }

    #[test]
    fn report_is_independent_of_worker_count() {
        let (sys, gb, q, d) = small_vehicle();
        let s = build_abstraction(&sys, &gb, &d, &q, true).unwrap();
        let one = par::with_workers(Some(1), || {
            mc_theorem_check(&sys, &gb, &s, &q, 500, 3).unwrap()
        });
        let many = par::with_workers(Some(4), || {
            mc_theorem_check(&sys, &gb, &s, &q, 500, 3).unwrap()
        });
        assert_eq!(one, many);
    }

    #[test]
    fn no_interior_states_is_inconclusive() {
        let (sys, gb, q, _) = small_vehicle();
        let d = BoxUnion::single(vec![0.0, 0.0, -0.4], vec![0.4, 0.4, 0.4]).unwrap();
        let s = build_abstraction(&sys, &gb, &d, &q, true).unwrap();
        let report = mc_theorem_check(&sys, &gb, &s, &q, 10, 1).unwrap();
        assert!(report.inconclusive());
        assert!(!report.passed());
        assert!(mc_theorem_check(&sys, &gb, &s, &q, 0, 1).is_err());
    }
}
