//! Finite metric transition systems.
//!
//! [`FiniteSystem`] is the lattice abstraction: its `u`-successors of a state
//! always form a box of lattice indices, so it stores two corners per
//! (state, input) pair instead of an edge list. [`ExplicitSystem`] keeps
//! arbitrary successor lists and is used for hand-built systems and as the
//! reference representation in tests.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use sha2::{Digest, Sha256};

use crate::abstraction::QuantParams;
use crate::error::{Error, Result};
use crate::geometry::{coords, lattice, AxisBox, BoxCounter, BoxUnion, IndexBox, Lattice};

/// A set of states prepared for repeated "is `Post_u(x)` inside the set"
/// queries.
pub struct StateSet {
    flags: Vec<bool>,
    counter: Option<BoxCounter>,
}

impl StateSet {
    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn contains(&self, x: usize) -> bool {
        self.flags[x]
    }
}

/// Read-only view of a finite system `(X, U, ->, Y, H)` with outputs in
/// `R^k` under the infinity norm. States and inputs are `0..count`.
pub trait TransitionSystem: Sync {
    fn state_count(&self) -> usize;

    fn input_count(&self) -> usize;

    /// `H(x)`.
    fn output(&self, x: usize) -> Vec<f64>;

    fn output_dim(&self) -> usize;

    /// True when `Post_u(x)` is non-empty.
    fn is_enabled(&self, x: usize, u: usize) -> bool;

    /// Visits `Post_u(x)` in increasing state order.
    fn for_each_post(&self, x: usize, u: usize, f: &mut dyn FnMut(usize));

    fn post(&self, x: usize, u: usize) -> Vec<usize> {
        let mut out = Vec::new();
        self.for_each_post(x, u, &mut |y| out.push(y));
        out
    }

    /// `U(x)`: inputs with a non-empty successor set.
    fn enabled_inputs(&self, x: usize) -> Vec<usize> {
        (0..self.input_count())
            .filter(|&u| self.is_enabled(x, u))
            .collect()
    }

    fn state_set(&self, flags: Vec<bool>) -> StateSet {
        StateSet {
            flags,
            counter: None,
        }
    }

    /// True when `u` is enabled at `x` and `Post_u(x)` lies inside `set`.
    fn post_within(&self, set: &StateSet, x: usize, u: usize) -> bool {
        if !self.is_enabled(x, u) {
            return false;
        }
        let mut inside = true;
        self.for_each_post(x, u, &mut |y| inside &= set.flags[y]);
        inside
    }

    /// States whose output lies within `eps` of `y`.
    fn states_near(&self, y: &[f64], eps: f64) -> Vec<usize> {
        (0..self.state_count())
            .filter(|&x| sup_dist(&self.output(x), y) <= eps)
            .collect()
    }
}

pub(crate) fn sup_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Checks state and input indices.
pub fn check_pair<S: TransitionSystem + ?Sized>(s: &S, x: usize, u: usize) -> Result<()> {
    if x >= s.state_count() {
        return Err(Error::IndexOutOfRange {
            index: x,
            size: s.state_count(),
        });
    }
    if u >= s.input_count() {
        return Err(Error::IndexOutOfRange {
            index: u,
            size: s.input_count(),
        });
    }
    Ok(())
}

/// `Post_u(x)` with index validation.
pub fn post<S: TransitionSystem + ?Sized>(s: &S, x: usize, u: usize) -> Result<Vec<usize>> {
    check_pair(s, x, u)?;
    Ok(s.post(x, u))
}

/// `U(x)` with index validation.
pub fn enabled_inputs<S: TransitionSystem + ?Sized>(s: &S, x: usize) -> Result<Vec<usize>> {
    if x >= s.state_count() {
        return Err(Error::IndexOutOfRange {
            index: x,
            size: s.state_count(),
        });
    }
    Ok(s.enabled_inputs(x))
}

/// A finite run `x0 -u0-> x1 -u1-> ...`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Run {
    pub start: usize,
    /// `(input, next state)` pairs.
    pub steps: Vec<(usize, usize)>,
}

impl Run {
    pub fn new(start: usize) -> Self {
        Run {
            start,
            steps: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// True iff every step's target is a successor of its source.
pub fn is_run<S: TransitionSystem + ?Sized>(s: &S, run: &Run) -> bool {
    if run.start >= s.state_count() {
        return false;
    }
    let mut at = run.start;
    for &(u, next) in &run.steps {
        if u >= s.input_count() || next >= s.state_count() {
            return false;
        }
        let mut hit = false;
        s.for_each_post(at, u, &mut |y| hit |= y == next);
        if !hit {
            return false;
        }
        at = next;
    }
    true
}

/// Finite system with explicit successor lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ExplicitSystem {
    outputs: Vec<Vec<f64>>,
    input_count: usize,
    /// `successors[x][u]`, sorted and deduplicated; empty when disabled.
    successors: Vec<Vec<Vec<usize>>>,
}

impl ExplicitSystem {
    pub fn new(
        outputs: Vec<Vec<f64>>,
        input_count: usize,
        mut successors: Vec<Vec<Vec<usize>>>,
    ) -> Result<Self> {
        let n = outputs.len();
        let dim = outputs.first().map_or(0, Vec::len);
        if outputs.iter().any(|y| y.len() != dim) {
            return Err(Error::param("outputs must share one dimension"));
        }
        if successors.len() != n {
            return Err(Error::param("one successor row per state required"));
        }
        for row in &mut successors {
            if row.len() != input_count {
                return Err(Error::param("one successor list per input required"));
            }
            for list in row.iter_mut() {
                list.sort_unstable();
                list.dedup();
                if let Some(&bad) = list.iter().find(|&&y| y >= n) {
                    return Err(Error::IndexOutOfRange {
                        index: bad,
                        size: n,
                    });
                }
            }
        }
        Ok(ExplicitSystem {
            outputs,
            input_count,
            successors,
        })
    }

    /// Copies any transition system into explicit form.
    pub fn from_system<S: TransitionSystem + ?Sized>(s: &S) -> Self {
        let outputs = (0..s.state_count()).map(|x| s.output(x)).collect();
        let successors = (0..s.state_count())
            .map(|x| (0..s.input_count()).map(|u| s.post(x, u)).collect())
            .collect();
        ExplicitSystem {
            outputs,
            input_count: s.input_count(),
            successors,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        self.successors.iter().flatten().all(|l| l.len() <= 1)
    }
}

impl TransitionSystem for ExplicitSystem {
    fn state_count(&self) -> usize {
        self.outputs.len()
    }

    fn input_count(&self) -> usize {
        self.input_count
    }

    fn output(&self, x: usize) -> Vec<f64> {
        self.outputs[x].clone()
    }

    fn output_dim(&self) -> usize {
        self.outputs.first().map_or(0, Vec::len)
    }

    fn is_enabled(&self, x: usize, u: usize) -> bool {
        !self.successors[x][u].is_empty()
    }

    fn for_each_post(&self, x: usize, u: usize, f: &mut dyn FnMut(usize)) {
        for &y in &self.successors[x][u] {
            f(y);
        }
    }

    fn post(&self, x: usize, u: usize) -> Vec<usize> {
        self.successors[x][u].clone()
    }
}

/// Lattice abstraction with successor sets stored as index boxes.
#[derive(Debug, Clone)]
pub struct FiniteSystem {
    params: QuantParams,
    radius: f64,
    domain: BoxUnion,
    states: Lattice,
    input_set: BoxUnion,
    inputs: Lattice,
    enabled: Vec<bool>,
    /// `2 n` integers per pair: lower corner then upper corner.
    boxes: Vec<i32>,
}

const MAGIC: &[u8; 8] = b"SYMABS\0\0";
pub const SYSTEM_FORMAT_VERSION: u32 = 1;

impl FiniteSystem {
    /// Assembles a system; `boxes[p]` is the successor box of pair
    /// `p = state * input_count + input`, or `None` when disabled.
    pub fn from_parts(
        params: QuantParams,
        radius: f64,
        domain: BoxUnion,
        states: Lattice,
        input_set: BoxUnion,
        inputs: Lattice,
        boxes: Vec<Option<IndexBox>>,
    ) -> Result<Self> {
        let n = states.dim();
        let pairs = states.len() * inputs.len();
        if boxes.len() != pairs {
            return Err(Error::param(format!(
                "expected {pairs} successor entries, got {}",
                boxes.len()
            )));
        }
        let mut enabled = vec![false; pairs];
        let mut flat = vec![0i32; pairs * 2 * n];
        for (p, b) in boxes.into_iter().enumerate() {
            if let Some(b) = b {
                enabled[p] = true;
                let slot = &mut flat[p * 2 * n..(p + 1) * 2 * n];
                for i in 0..n {
                    slot[i] = to_i32(b.lo[i])?;
                    slot[n + i] = to_i32(b.hi[i])?;
                }
            }
        }
        Self::from_raw(
            params, radius, domain, states, input_set, inputs, enabled, flat,
        )
    }

    /// Like [`from_parts`](Self::from_parts) with the flat corner table
    /// already built (`2 n` integers per pair, ignored when disabled).
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_raw(
        params: QuantParams,
        radius: f64,
        domain: BoxUnion,
        states: Lattice,
        input_set: BoxUnion,
        inputs: Lattice,
        enabled: Vec<bool>,
        boxes: Vec<i32>,
    ) -> Result<Self> {
        let pairs = states.len() * inputs.len();
        if enabled.len() != pairs || boxes.len() != pairs * 2 * states.dim() {
            return Err(Error::param("successor table has the wrong size"));
        }
        let sys = FiniteSystem {
            params,
            radius,
            domain,
            states,
            input_set,
            inputs,
            enabled,
            boxes,
        };
        sys.check_boxes()?;
        Ok(sys)
    }

    fn check_boxes(&self) -> Result<()> {
        let occupancy = self.states.map().occupancy();
        for p in 0..self.enabled.len() {
            if self.enabled[p] {
                let b = self.pair_box(p);
                if b.is_empty() || !occupancy.covers(&b) {
                    return Err(Error::format(format!(
                        "successor box of pair {p} is empty or leaves the state set"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &QuantParams {
        &self.params
    }

    /// Over-approximation radius used for the transitions.
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn domain(&self) -> &BoxUnion {
        &self.domain
    }

    pub fn input_set(&self) -> &BoxUnion {
        &self.input_set
    }

    pub fn states(&self) -> &Lattice {
        &self.states
    }

    pub fn inputs(&self) -> &Lattice {
        &self.inputs
    }

    pub fn state_dim(&self) -> usize {
        self.states.dim()
    }

    pub fn eta(&self) -> f64 {
        self.states.spacing()
    }

    pub fn input_value(&self, u: usize) -> Vec<f64> {
        self.inputs.value(u)
    }

    /// Number of stored (state, input) entries.
    pub fn pair_count(&self) -> usize {
        self.enabled.len()
    }

    fn pair_box(&self, p: usize) -> IndexBox {
        let n = self.state_dim();
        let slot = &self.boxes[p * 2 * n..(p + 1) * 2 * n];
        IndexBox {
            lo: slot[..n].iter().map(|&v| v as i64).collect(),
            hi: slot[n..].iter().map(|&v| v as i64).collect(),
        }
    }

    /// Successor box of `(x, u)` in lattice-index coordinates.
    pub fn successor_box(&self, x: usize, u: usize) -> Option<IndexBox> {
        let p = x * self.inputs.len() + u;
        self.enabled[p].then(|| self.pair_box(p))
    }

    /// Raw `2 n` corner integers of every pair, enabled or not.
    pub fn box_table(&self) -> &[i32] {
        &self.boxes
    }

    /// Writes the portable binary form.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let n = self.state_dim();
        let m = self.inputs.dim();
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(SYSTEM_FORMAT_VERSION)?;
        w.write_u32::<LittleEndian>(n as u32)?;
        w.write_u32::<LittleEndian>(m as u32)?;
        let q = &self.params;
        for v in [q.tau, q.eta, q.mu, q.theta, q.epsilon, self.radius] {
            w.write_f64::<LittleEndian>(v)?;
        }
        w.write_u64::<LittleEndian>(self.states.len() as u64)?;
        w.write_u64::<LittleEndian>(self.inputs.len() as u64)?;
        write_union(w, &self.domain)?;
        write_union(w, &self.input_set)?;
        for &k in self.states.indices() {
            w.write_i64::<LittleEndian>(k)?;
        }
        for &k in self.inputs.indices() {
            w.write_i64::<LittleEndian>(k)?;
        }
        for p in 0..self.enabled.len() {
            if self.enabled[p] {
                w.write_u8(1)?;
                for &v in &self.boxes[p * 2 * n..(p + 1) * 2 * n] {
                    w.write_i32::<LittleEndian>(v)?;
                }
            } else {
                w.write_u8(0)?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)
            .expect("writing to memory cannot fail");
        buf
    }

    /// Hex SHA-256 of the binary form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::format("not a system file (bad magic)"));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SYSTEM_FORMAT_VERSION {
            return Err(Error::format(format!(
                "unsupported system file version {version}"
            )));
        }
        let n = r.read_u32::<LittleEndian>()? as usize;
        let m = r.read_u32::<LittleEndian>()? as usize;
        let mut vals = [0.0; 6];
        for v in &mut vals {
            *v = r.read_f64::<LittleEndian>()?;
        }
        let params = QuantParams {
            tau: vals[0],
            eta: vals[1],
            mu: vals[2],
            theta: vals[3],
            epsilon: vals[4],
        };
        let radius = vals[5];
        let state_count = r.read_u64::<LittleEndian>()? as usize;
        let input_count = r.read_u64::<LittleEndian>()? as usize;
        let domain = read_union(r, n)?;
        let input_set = read_union(r, m)?;
        let states = read_lattice(r, n, params.eta, state_count)?;
        let inputs = read_lattice(r, m, params.mu, input_count)?;
        if states.indices() != lattice(&domain, params.eta)?.indices() {
            return Err(Error::format(
                "state table does not match the domain lattice",
            ));
        }
        let pairs = state_count * input_count;
        let mut enabled = vec![false; pairs];
        let mut boxes = vec![0i32; pairs * 2 * n];
        for p in 0..pairs {
            match r.read_u8()? {
                0 => {}
                1 => {
                    enabled[p] = true;
                    for v in &mut boxes[p * 2 * n..(p + 1) * 2 * n] {
                        *v = r.read_i32::<LittleEndian>()?;
                    }
                }
                flag => return Err(Error::format(format!("bad pair flag {flag}"))),
            }
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::format("trailing bytes after system table"));
        }
        let sys = FiniteSystem {
            params,
            radius,
            domain,
            states,
            input_set,
            inputs,
            enabled,
            boxes,
        };
        sys.check_boxes()?;
        Ok(sys)
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut r)
    }
}

pub(crate) fn to_i32(v: i64) -> Result<i32> {
    i32::try_from(v).map_err(|_| Error::param(format!("lattice index {v} does not fit in 32 bits")))
}

fn write_union(w: &mut impl Write, u: &BoxUnion) -> Result<()> {
    w.write_u32::<LittleEndian>(u.boxes().len() as u32)?;
    for b in u.boxes() {
        for &v in b.lower.iter().chain(&b.upper) {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn read_union(r: &mut impl Read, dim: usize) -> Result<BoxUnion> {
    let count = r.read_u32::<LittleEndian>()? as usize;
    let mut boxes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let mut lower = vec![0.0; dim];
        let mut upper = vec![0.0; dim];
        for v in lower.iter_mut().chain(upper.iter_mut()) {
            *v = r.read_f64::<LittleEndian>()?;
        }
        boxes.push(AxisBox::new(lower, upper)?);
    }
    BoxUnion::new(boxes)
}

fn read_lattice(r: &mut impl Read, dim: usize, spacing: f64, count: usize) -> Result<Lattice> {
    let mut indices = vec![0i64; dim * count];
    for k in &mut indices {
        *k = r.read_i64::<LittleEndian>()?;
    }
    Lattice::from_indices(dim, spacing, indices)
}

impl TransitionSystem for FiniteSystem {
    fn state_count(&self) -> usize {
        self.states.len()
    }

    fn input_count(&self) -> usize {
        self.inputs.len()
    }

    fn output(&self, x: usize) -> Vec<f64> {
        self.states.value(x)
    }

    fn output_dim(&self) -> usize {
        self.state_dim()
    }

    fn is_enabled(&self, x: usize, u: usize) -> bool {
        self.enabled[x * self.inputs.len() + u]
    }

    fn for_each_post(&self, x: usize, u: usize, f: &mut dyn FnMut(usize)) {
        if let Some(b) = self.successor_box(x, u) {
            b.for_each(|k| {
                if let Some(y) = self.states.position(k) {
                    f(y);
                }
            });
        }
    }

    fn state_set(&self, flags: Vec<bool>) -> StateSet {
        let counter = self.states.map().counter(&flags);
        StateSet {
            flags,
            counter: Some(counter),
        }
    }

    fn post_within(&self, set: &StateSet, x: usize, u: usize) -> bool {
        let p = x * self.inputs.len() + u;
        if !self.enabled[p] {
            return false;
        }
        let n = self.state_dim();
        match &set.counter {
            Some(counter) if n <= 8 => {
                let slot = &self.boxes[p * 2 * n..(p + 1) * 2 * n];
                let mut lo = [0i64; 8];
                let mut hi = [0i64; 8];
                for i in 0..n {
                    lo[i] = slot[i] as i64;
                    hi[i] = slot[n + i] as i64;
                }
                counter.covers_range(&lo[..n], &hi[..n])
            }
            Some(counter) => counter.covers(&self.pair_box(p)),
            None => {
                let mut inside = true;
                self.for_each_post(x, u, &mut |y| inside &= set.flags[y]);
                inside
            }
        }
    }

    fn states_near(&self, y: &[f64], eps: f64) -> Vec<usize> {
        let Ok(b) = crate::geometry::ball_lattice_range(y, eps, self.eta()) else {
            return Vec::new();
        };
        let mut out = Vec::new();
        b.for_each(|k| {
            if let Some(x) = self.states.position(k) {
                if sup_dist(&coords(k, self.eta()), y) <= eps {
                    out.push(x);
                }
            }
        });
        out
    }
}
