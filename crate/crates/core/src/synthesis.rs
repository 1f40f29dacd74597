//! Safety, reach-avoid and reach-and-stay games on finite systems.
//!
//! All solvers return memoryless controllers that pick the smallest input
//! index achieving the fixed-point step, so results are reproducible.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::abstraction::QuantParams;
use crate::error::{Error, Result};
use crate::geometry::BoxUnion;
use crate::par;
use crate::transition::{FiniteSystem, TransitionSystem};

/// Phase a winning state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Still moving towards the target.
    Reach,
    /// Inside the controlled-invariant core.
    Stay,
}

impl Mode {
    fn as_str(self) -> &'static str {
        match self {
            Mode::Reach => "reach",
            Mode::Stay => "stay",
        }
    }
}

/// Controller decision at one winning state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Entry {
    /// `None` for target states of a plain reach game, where nothing remains
    /// to be done.
    pub input: Option<usize>,
    pub mode: Mode,
    /// Steps to the target; `None` stands for "forever" in safety games.
    pub value: Option<u32>,
}

/// Memoryless controller: a partial map from states to inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Controller {
    entries: Vec<Option<Entry>>,
}

impl Controller {
    pub fn new(entries: Vec<Option<Entry>>) -> Self {
        Controller { entries }
    }

    pub fn state_count(&self) -> usize {
        self.entries.len()
    }

    pub fn entry(&self, x: usize) -> Option<&Entry> {
        self.entries.get(x).and_then(Option::as_ref)
    }

    pub fn input(&self, x: usize) -> Option<usize> {
        self.entry(x).and_then(|e| e.input)
    }

    pub fn is_winning(&self, x: usize) -> bool {
        self.entry(x).is_some()
    }

    pub fn winning(&self) -> Vec<usize> {
        (0..self.entries.len())
            .filter(|&x| self.is_winning(x))
            .collect()
    }

    pub fn winning_flags(&self) -> Vec<bool> {
        self.entries.iter().map(Option::is_some).collect()
    }

    pub fn winning_count(&self) -> usize {
        self.entries.iter().filter(|e| e.is_some()).count()
    }

    pub fn entries(&self) -> &[Option<Entry>] {
        &self.entries
    }

    /// Writes the controller file: header lines then one
    /// `state_index,input_index,mode,value` line per winning state.
    pub fn write_to(&self, w: &mut impl Write, header: &ControllerHeader) -> Result<()> {
        let q = &header.params;
        writeln!(w, "symctl-controller 1")?;
        writeln!(w, "system {}", header.system)?;
        writeln!(
            w,
            "params tau={:?} eta={:?} mu={:?} theta={:?} epsilon={:?}",
            q.tau, q.eta, q.mu, q.theta, q.epsilon
        )?;
        writeln!(w, "spec {}", header.spec)?;
        writeln!(w, "states {}", self.entries.len())?;
        writeln!(w, "winning {}", self.winning_count())?;
        writeln!(w, "state_index,input_index,mode,value")?;
        for (x, e) in self.entries.iter().enumerate() {
            if let Some(e) = e {
                let input = e.input.map_or("-".to_string(), |u| u.to_string());
                let value = e.value.map_or("inf".to_string(), |v| v.to_string());
                writeln!(w, "{x},{input},{},{value}", e.mode.as_str())?;
            }
        }
        Ok(())
    }

    pub fn to_text(&self, header: &ControllerHeader) -> String {
        let mut buf = Vec::new();
        self.write_to(&mut buf, header)
            .expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("controller text is ASCII")
    }

    pub fn read_from(r: impl Read) -> Result<(ControllerHeader, Controller)> {
        let mut lines = BufReader::new(r).lines();
        let mut next = |key: &str| -> Result<String> {
            let line = lines
                .next()
                .ok_or_else(|| Error::format(format!("missing '{key}' line")))??;
            line.strip_prefix(key)
                .map(|rest| rest.trim_start().to_string())
                .ok_or_else(|| Error::format(format!("expected '{key}', got '{line}'")))
        };
        if next("symctl-controller")? != "1" {
            return Err(Error::format("unsupported controller format version"));
        }
        let system = next("system")?;
        let params = parse_params(&next("params")?)?;
        let spec = next("spec")?;
        let states = parse_num::<usize>(&next("states")?, "state count")?;
        let winning = parse_num::<usize>(&next("winning")?, "winning count")?;
        if !next("state_index,input_index,mode,value")?.is_empty() {
            return Err(Error::format("bad column header"));
        }
        let mut entries = vec![None; states];
        let mut count = 0;
        let mut last = None;
        for line in lines {
            let line = line?;
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::format(format!("bad controller line '{line}'")));
            }
            let x = parse_num::<usize>(fields[0], "state index")?;
            if x >= states || last.is_some_and(|l| l >= x) {
                return Err(Error::format(format!(
                    "state index {x} out of order or range"
                )));
            }
            last = Some(x);
            let input = match fields[1] {
                "-" => None,
                s => Some(parse_num::<usize>(s, "input index")?),
            };
            let mode = match fields[2] {
                "reach" => Mode::Reach,
                "stay" => Mode::Stay,
                other => return Err(Error::format(format!("unknown mode '{other}'"))),
            };
            let value = match fields[3] {
                "inf" => None,
                s => Some(parse_num::<u32>(s, "value")?),
            };
            entries[x] = Some(Entry { input, mode, value });
            count += 1;
        }
        if count != winning {
            return Err(Error::format(format!(
                "header announces {winning} winning states, found {count}"
            )));
        }
        Ok((
            ControllerHeader {
                system,
                params,
                spec,
            },
            Controller { entries },
        ))
    }

    pub fn save(&self, path: &Path, header: &ControllerHeader) -> Result<()> {
        std::fs::write(path, self.to_text(header))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ControllerHeader, Controller)> {
        Controller::read_from(std::fs::File::open(path)?)
    }
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse()
        .map_err(|e| Error::format(format!("bad {what} '{s}': {e}")))
}

fn parse_params(s: &str) -> Result<QuantParams> {
    let mut vals = [f64::NAN; 5];
    let keys = ["tau", "eta", "mu", "theta", "epsilon"];
    let parts: Vec<&str> = s.split_whitespace().collect();
    if parts.len() != keys.len() {
        return Err(Error::format(format!("bad params line '{s}'")));
    }
    for (i, part) in parts.iter().enumerate() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::format(format!("bad parameter '{part}'")))?;
        if k != keys[i] {
            return Err(Error::format(format!("expected '{}', got '{k}'", keys[i])));
        }
        vals[i] = parse_num(v, k)?;
    }
    Ok(QuantParams {
        tau: vals[0],
        eta: vals[1],
        mu: vals[2],
        theta: vals[3],
        epsilon: vals[4],
    })
}

/// Provenance recorded in a controller file.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerHeader {
    /// Digest of the abstraction the controller was synthesized on.
    pub system: String,
    pub params: QuantParams,
    /// Digest of the specification.
    pub spec: String,
}

/// Reach `target` while avoiding `avoid`, then stay in `target`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecProblem {
    pub target: BoxUnion,
    pub avoid: Option<BoxUnion>,
}

impl SpecProblem {
    pub fn new(target: BoxUnion, avoid: Option<BoxUnion>) -> Result<Self> {
        if let Some(o) = &avoid {
            if o.dim() != target.dim() {
                return Err(Error::DimensionMismatch {
                    expected: target.dim(),
                    found: o.dim(),
                });
            }
        }
        Ok(SpecProblem { target, avoid })
    }

    pub fn in_avoid(&self, x: &[f64]) -> bool {
        self.avoid.as_ref().is_some_and(|o| o.contains_unchecked(x))
    }

    /// SHA-256 over a canonical text rendering of both box lists.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let mut feed = |tag: &str, u: Option<&BoxUnion>| {
            h.update(tag.as_bytes());
            if let Some(u) = u {
                for b in u.boxes() {
                    h.update(format!("{:?}{:?};", b.lower, b.upper).as_bytes());
                }
            }
        };
        feed("target:", Some(&self.target));
        feed("avoid:", self.avoid.as_ref());
        hex::encode(h.finalize())
    }
}

/// Greatest fixed point of `Z -> {x in safe : some u has Post_u(x) in Z}`.
/// Winning states get [`Mode::Stay`], an infinite value, and the least
/// input keeping them inside the winning set.
pub fn safety_fixpoint<S: TransitionSystem + ?Sized>(s: &S, safe: &[bool]) -> Result<Controller> {
    check_flags(s, safe)?;
    let mut z = safe.to_vec();
    loop {
        let set = s.state_set(z.clone());
        let next = par::map_indexed(s.state_count(), |x| {
            z[x] && (0..s.input_count()).any(|u| s.post_within(&set, x, u))
        });
        if next == z {
            let entries = par::map_indexed(s.state_count(), |x| {
                if !z[x] {
                    return None;
                }
                let u = (0..s.input_count())
                    .find(|&u| s.post_within(&set, x, u))
                    .expect("fixed point keeps only states with a safe input");
                Some(Entry {
                    input: Some(u),
                    mode: Mode::Stay,
                    value: None,
                })
            });
            return Ok(Controller { entries });
        }
        z = next;
    }
}

/// Least fixed point of reach-avoid, computed in synchronous levels.
/// Target states get value 0 and no input; a state first added at level `i`
/// gets value `i` and the least input whose successors all lie in level
/// `i - 1`.
pub fn reach_avoid_fixpoint<S: TransitionSystem + ?Sized>(
    s: &S,
    target: &[bool],
    avoid: &[bool],
) -> Result<Controller> {
    check_flags(s, target)?;
    check_flags(s, avoid)?;
    if let Some(x) = (0..s.state_count()).find(|&x| target[x] && avoid[x]) {
        return Err(Error::param(format!(
            "state {x} is both target and avoided"
        )));
    }
    let mut entries: Vec<Option<Entry>> = target
        .iter()
        .map(|&t| {
            t.then_some(Entry {
                input: None,
                mode: Mode::Reach,
                value: Some(0),
            })
        })
        .collect();
    let mut won = target.to_vec();
    let mut level = 0u32;
    loop {
        level += 1;
        let set = s.state_set(won.clone());
        let added = par::map_indexed(s.state_count(), |x| {
            if won[x] || avoid[x] {
                return None;
            }
            (0..s.input_count()).find(|&u| s.post_within(&set, x, u))
        });
        let mut any = false;
        for (x, u) in added.into_iter().enumerate() {
            if let Some(u) = u {
                any = true;
                won[x] = true;
                entries[x] = Some(Entry {
                    input: Some(u),
                    mode: Mode::Reach,
                    value: Some(level),
                });
            }
        }
        if !any {
            return Ok(Controller { entries });
        }
    }
}

fn check_flags<S: TransitionSystem + ?Sized>(s: &S, flags: &[bool]) -> Result<()> {
    if flags.len() != s.state_count() {
        return Err(Error::DimensionMismatch {
            expected: s.state_count(),
            found: flags.len(),
        });
    }
    Ok(())
}

/// Lattice states whose `epsilon`-box fits inside a single box of the
/// target.
pub fn target_states(s: &FiniteSystem, target: &BoxUnion, epsilon: f64) -> Vec<bool> {
    par::map_indexed(s.state_count(), |x| {
        let p = s.output(x);
        target.boxes().iter().any(|b| {
            (0..p.len()).all(|i| b.lower[i] + epsilon <= p[i] && p[i] <= b.upper[i] - epsilon)
        })
    })
}

/// Lattice states within `epsilon` of the avoid set.
pub fn avoid_states(s: &FiniteSystem, avoid: Option<&BoxUnion>, epsilon: f64) -> Vec<bool> {
    match avoid {
        None => vec![false; s.state_count()],
        Some(o) => par::map_indexed(s.state_count(), |x| o.distance(&s.output(x)) <= epsilon),
    }
}

/// Reach-avoid-stay: the target core `I` is the safety winning set of the
/// shrunk target minus inflated obstacles, and the reach game then steers
/// into `I` while avoiding the inflated obstacles.
pub fn reach_and_stay(s: &FiniteSystem, spec: &SpecProblem) -> Result<Controller> {
    let n = s.state_dim();
    for u in std::iter::once(&spec.target).chain(spec.avoid.as_ref()) {
        if u.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: u.dim(),
            });
        }
    }
    let eps = s.params().epsilon;
    let avoid = avoid_states(s, spec.avoid.as_ref(), eps);
    let safe: Vec<bool> = target_states(s, &spec.target, eps)
        .into_iter()
        .zip(&avoid)
        .map(|(t, &a)| t && !a)
        .collect();
    if !safe.iter().any(|&t| t) {
        return Err(Error::param(
            "target contains no lattice state clear of the obstacles",
        ));
    }
    let stay = safety_fixpoint(s, &safe)?;
    let core = stay.winning_flags();
    if !core.iter().any(|&c| c) {
        return Err(Error::CannotRemain);
    }
    let reach = reach_avoid_fixpoint(s, &core, &avoid)?;
    let entries = (0..s.state_count())
        .map(|x| {
            if core[x] {
                stay.entries[x]
            } else {
                reach.entries[x]
            }
        })
        .collect();
    Ok(Controller { entries })
}

/// A winning state whose recorded decision does not do what it promises.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificateFailure {
    pub state: usize,
    pub reason: String,
}

impl fmt::Display for CertificateFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "state {}: {}", self.state, self.reason)
    }
}

/// Checks a controller against the successor lists of `s`: every reach
/// decision leads only to winning states with smaller value or to the stay
/// region, and every stay decision keeps all successors in the stay
/// region. Returns the number of decisions checked.
pub fn check_strategy<S: TransitionSystem + ?Sized>(
    s: &S,
    ctrl: &Controller,
) -> std::result::Result<usize, CertificateFailure> {
    if ctrl.state_count() != s.state_count() {
        return Err(CertificateFailure {
            state: 0,
            reason: format!(
                "controller covers {} states, system has {}",
                ctrl.state_count(),
                s.state_count()
            ),
        });
    }
    let fail = |state, reason: String| Err(CertificateFailure { state, reason });
    let mut checked = 0;
    for x in 0..s.state_count() {
        let Some(e) = ctrl.entry(x) else { continue };
        let Some(u) = e.input else {
            if e.mode == Mode::Reach && e.value == Some(0) {
                continue;
            }
            return fail(x, "missing input".into());
        };
        if u >= s.input_count() || !s.is_enabled(x, u) {
            return fail(x, format!("input {u} is not enabled"));
        }
        checked += 1;
        for y in s.post(x, u) {
            let Some(next) = ctrl.entry(y) else {
                return fail(x, format!("successor {y} is not winning"));
            };
            match (e.mode, next.mode) {
                (Mode::Stay, Mode::Stay) | (Mode::Reach, Mode::Stay) => {}
                (Mode::Stay, Mode::Reach) => {
                    return fail(x, format!("stay decision leaves the core at {y}"));
                }
                (Mode::Reach, Mode::Reach) => {
                    let ok = matches!((e.value, next.value), (Some(a), Some(b)) if b < a);
                    if !ok {
                        return fail(x, format!("value does not decrease towards {y}"));
                    }
                }
            }
        }
    }
    Ok(checked)
}
