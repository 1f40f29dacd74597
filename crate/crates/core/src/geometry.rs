//! Uniform lattices, axis-aligned box unions and infinity-norm queries.
//!
//! All membership tests use closed boxes and plain IEEE comparisons; there is
//! no tolerance anywhere, so an abstraction built twice on the same platform
//! is bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A closed axis-aligned box `[lower_1, upper_1] x ... x [lower_n, upper_n]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        let b = AxisBox { lower, upper };
        b.validate()?;
        Ok(b)
    }

    /// Non-empty, matching corner lengths, finite and `lower < upper`.
    pub fn validate(&self) -> Result<()> {
        if self.lower.is_empty() {
            return Err(Error::param("box dimension must be at least 1"));
        }
        if self.lower.len() != self.upper.len() {
            return Err(Error::DimensionMismatch {
                expected: self.lower.len(),
                found: self.upper.len(),
            });
        }
        for (i, (l, u)) in self.lower.iter().zip(&self.upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::param(format!(
                    "box side {i} must satisfy lower < upper, got [{l}, {u}]"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    /// Shortest side length.
    pub fn min_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(f64::INFINITY, f64::min)
    }

    /// Infinity-norm distance from `x` to the box (zero inside).
    pub fn distance(&self, x: &[f64]) -> f64 {
        x.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(v, (l, u))| (l - v).max(v - u).max(0.0))
            .fold(0.0, f64::max)
    }
}

/// Finite union of closed boxes of a common dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<AxisBox>", into = "Vec<AxisBox>")]
pub struct BoxUnion {
    dim: usize,
    boxes: Vec<AxisBox>,
}

impl TryFrom<Vec<AxisBox>> for BoxUnion {
    type Error = Error;

    fn try_from(boxes: Vec<AxisBox>) -> Result<Self> {
        BoxUnion::new(boxes)
    }
}

impl From<BoxUnion> for Vec<AxisBox> {
    fn from(u: BoxUnion) -> Self {
        u.boxes
    }
}

impl BoxUnion {
    /// Builds a non-empty union; every box is validated.
    pub fn new(boxes: Vec<AxisBox>) -> Result<Self> {
        let first = boxes
            .first()
            .ok_or_else(|| Error::param("box union must contain at least one box"))?;
        let dim = first.dim();
        for b in &boxes {
            b.validate()?;
            if b.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: b.dim(),
                });
            }
        }
        Ok(BoxUnion { dim, boxes })
    }

    /// Convenience constructor for a single box.
    pub fn single(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        BoxUnion::new(vec![AxisBox::new(lower, upper)?])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn boxes(&self) -> &[AxisBox] {
        &self.boxes
    }

    /// Closed membership in some box of the union.
    pub fn contains(&self, x: &[f64]) -> Result<bool> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        Ok(self.contains_unchecked(x))
    }

    pub(crate) fn contains_unchecked(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    /// Infinity-norm distance from `x` to the union.
    pub fn distance(&self, x: &[f64]) -> f64 {
        self.boxes
            .iter()
            .map(|b| b.distance(x))
            .fold(f64::INFINITY, f64::min)
    }

    /// Smallest side over all boxes.
    pub fn min_width(&self) -> MinWidth {
        MinWidth(
            self.boxes
                .iter()
                .map(AxisBox::min_width)
                .fold(f64::INFINITY, f64::min),
        )
    }

    /// Componentwise bounding box of the union.
    pub fn hull(&self) -> AxisBox {
        let mut lower = vec![f64::INFINITY; self.dim];
        let mut upper = vec![f64::NEG_INFINITY; self.dim];
        for b in &self.boxes {
            for i in 0..self.dim {
                lower[i] = lower[i].min(b.lower[i]);
                upper[i] = upper[i].max(b.upper[i]);
            }
        }
        AxisBox { lower, upper }
    }
}

/// Minimum box side of a [`BoxUnion`]; lattice spacings above it may leave
/// some box without lattice points.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct MinWidth(pub f64);

impl MinWidth {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// The lattice point `index * spacing`.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPoint {
    pub index: Vec<i64>,
    pub spacing: f64,
}

impl Eq for GridPoint {}

impl GridPoint {
    pub fn value(&self) -> Vec<f64> {
        coords(&self.index, self.spacing)
    }
}

/// Coordinates of the lattice point with integer index `k`.
pub fn coords(k: &[i64], spacing: f64) -> Vec<f64> {
    k.iter().map(|&ki| coord(ki, spacing)).collect()
}

#[inline]
pub fn coord(k: i64, spacing: f64) -> f64 {
    k as f64 * spacing
}

/// Closed integer box `lo[i] ..= hi[i]` in lattice index space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IndexBox {
    pub lo: Vec<i64>,
    pub hi: Vec<i64>,
}

impl IndexBox {
    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lo.iter().zip(&self.hi).any(|(l, h)| l > h)
    }

    /// Number of lattice points in the box.
    pub fn volume(&self) -> u64 {
        if self.is_empty() {
            return 0;
        }
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(l, h)| (h - l + 1) as u64)
            .product()
    }

    pub fn contains(&self, k: &[i64]) -> bool {
        k.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (l, h))| l <= v && v <= h)
    }

    /// Visits every index in lexicographic order.
    pub fn for_each(&self, mut f: impl FnMut(&[i64])) {
        if self.is_empty() {
            return;
        }
        let n = self.dim();
        let mut k = self.lo.clone();
        loop {
            f(&k);
            let mut d = n;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                if k[d] < self.hi[d] {
                    k[d] += 1;
                    break;
                }
                k[d] = self.lo[d];
            }
        }
    }
}

/// Smallest `k` with `k * spacing >= lo`.
fn first_index_at_least(lo: f64, spacing: f64) -> i64 {
    let mut k = (lo / spacing).ceil() as i64;
    while coord(k - 1, spacing) >= lo {
        k -= 1;
    }
    while coord(k, spacing) < lo {
        k += 1;
    }
    k
}

/// Largest `k` with `k * spacing <= hi`.
fn last_index_at_most(hi: f64, spacing: f64) -> i64 {
    let mut k = (hi / spacing).floor() as i64;
    while coord(k + 1, spacing) <= hi {
        k += 1;
    }
    while coord(k, spacing) > hi {
        k -= 1;
    }
    k
}

fn check_spacing(spacing: f64) -> Result<()> {
    if !(spacing.is_finite() && spacing > 0.0) {
        return Err(Error::param(format!(
            "lattice spacing must be positive, got {spacing}"
        )));
    }
    Ok(())
}

/// Lattice points of a [`BoxUnion`] in canonical (lexicographic index) order.
#[derive(Debug, Clone)]
pub struct Lattice {
    spacing: f64,
    dim: usize,
    indices: Vec<i64>,
    map: GridMap,
}

impl Lattice {
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.indices.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Integer index of the `i`-th point.
    pub fn index(&self, i: usize) -> &[i64] {
        &self.indices[i * self.dim..(i + 1) * self.dim]
    }

    /// Flat row-major index table.
    pub fn indices(&self) -> &[i64] {
        &self.indices
    }

    pub fn point(&self, i: usize) -> GridPoint {
        GridPoint {
            index: self.index(i).to_vec(),
            spacing: self.spacing,
        }
    }

    pub fn value(&self, i: usize) -> Vec<f64> {
        coords(self.index(i), self.spacing)
    }

    pub fn points(&self) -> impl Iterator<Item = GridPoint> + '_ {
        (0..self.len()).map(|i| self.point(i))
    }

    /// Position of the lattice point with index `k`, if it belongs to the set.
    pub fn position(&self, k: &[i64]) -> Option<usize> {
        self.map.get(k)
    }

    pub fn map(&self) -> &GridMap {
        &self.map
    }

    /// Rebuilds a lattice from an index table already in canonical order.
    pub fn from_indices(dim: usize, spacing: f64, indices: Vec<i64>) -> Result<Self> {
        check_spacing(spacing)?;
        if dim == 0 || !indices.len().is_multiple_of(dim) {
            return Err(Error::format("lattice index table has wrong length"));
        }
        for w in indices.chunks(dim).collect::<Vec<_>>().windows(2) {
            if w[0] >= w[1] {
                return Err(Error::format("lattice indices are not strictly sorted"));
            }
        }
        let map = GridMap::build(dim, &indices);
        Ok(Lattice {
            spacing,
            dim,
            indices,
            map,
        })
    }
}

/// Enumerates `[A]_spacing`: lattice points inside the union, deduplicated and
/// sorted lexicographically by integer index.
pub fn lattice(set: &BoxUnion, spacing: f64) -> Result<Lattice> {
    check_spacing(spacing)?;
    let width = set.min_width().value();
    if spacing > width {
        return Err(Error::param(format!(
            "lattice spacing {spacing} exceeds the minimum box width {width}"
        )));
    }
    let n = set.dim();
    let mut all: Vec<Vec<i64>> = Vec::new();
    for b in set.boxes() {
        let range = IndexBox {
            lo: b
                .lower
                .iter()
                .map(|&l| first_index_at_least(l, spacing))
                .collect(),
            hi: b
                .upper
                .iter()
                .map(|&u| last_index_at_most(u, spacing))
                .collect(),
        };
        range.for_each(|k| all.push(k.to_vec()));
    }
    all.sort_unstable();
    all.dedup();
    let indices: Vec<i64> = all.into_iter().flatten().collect();
    let map = GridMap::build(n, &indices);
    Ok(Lattice {
        spacing,
        dim: n,
        indices,
        map,
    })
}

/// Nearest lattice point of `[R^n]_spacing` to `x`.
///
/// Each coordinate starts from `floor(x / spacing + 1/2)` and is corrected to
/// the neighbour with the smallest computed distance; exact ties go to the
/// larger index.
pub fn nearest_grid_point(x: &[f64], spacing: f64) -> GridPoint {
    let index = x.iter().map(|&xi| nearest_index(xi, spacing)).collect();
    GridPoint { index, spacing }
}

pub(crate) fn nearest_index(x: f64, spacing: f64) -> i64 {
    let k = (x / spacing + 0.5).floor() as i64;
    let mut best = k;
    let mut best_d = (x - coord(k, spacing)).abs();
    for cand in [k - 1, k + 1] {
        let d = (x - coord(cand, spacing)).abs();
        if d < best_d || (d == best_d && cand > best) {
            best = cand;
            best_d = d;
        }
    }
    best
}

/// Index box of all lattice points `p` with `|p - center|_inf <= radius`.
pub fn ball_lattice_range(center: &[f64], radius: f64, spacing: f64) -> Result<IndexBox> {
    if !(radius >= 0.0) {
        return Err(Error::param(format!(
            "ball radius must be non-negative, got {radius}"
        )));
    }
    check_spacing(spacing)?;
    let mut lo = Vec::with_capacity(center.len());
    let mut hi = Vec::with_capacity(center.len());
    for &c in center {
        let (l, h) = ball_axis_range(c, radius, spacing);
        lo.push(l);
        hi.push(h);
    }
    Ok(IndexBox { lo, hi })
}

#[inline]
pub(crate) fn ball_axis_range(c: f64, radius: f64, spacing: f64) -> (i64, i64) {
    let inside = |k: i64| (coord(k, spacing) - c).abs() <= radius;
    let mut lo = ((c - radius) / spacing).ceil() as i64;
    let mut hi = ((c + radius) / spacing).floor() as i64;
    while inside(lo - 1) {
        lo -= 1;
    }
    while lo <= hi && !inside(lo) {
        lo += 1;
    }
    while inside(hi + 1) {
        hi += 1;
    }
    while hi >= lo && !inside(hi) {
        hi -= 1;
    }
    (lo, hi)
}

/// Dense lookup from lattice index to position, over the bounding box of a
/// sorted index table.
#[derive(Debug, Clone)]
pub struct GridMap {
    lo: Vec<i64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    slots: Vec<u32>,
}

const EMPTY_SLOT: u32 = u32::MAX;

impl GridMap {
    fn build(dim: usize, indices: &[i64]) -> Self {
        let count = indices.len() / dim.max(1);
        if count == 0 {
            return GridMap {
                lo: vec![0; dim],
                shape: vec![0; dim],
                strides: vec![0; dim],
                slots: Vec::new(),
            };
        }
        let mut lo = vec![i64::MAX; dim];
        let mut hi = vec![i64::MIN; dim];
        for k in indices.chunks(dim) {
            for i in 0..dim {
                lo[i] = lo[i].min(k[i]);
                hi[i] = hi[i].max(k[i]);
            }
        }
        let shape: Vec<usize> = lo
            .iter()
            .zip(&hi)
            .map(|(l, h)| (h - l + 1) as usize)
            .collect();
        let strides = row_major_strides(&shape);
        let total: usize = shape.iter().product();
        let mut slots = vec![EMPTY_SLOT; total];
        for (pos, k) in indices.chunks(dim).enumerate() {
            let cell: usize = (0..dim).map(|i| (k[i] - lo[i]) as usize * strides[i]).sum();
            slots[cell] = pos as u32;
        }
        GridMap {
            lo,
            shape,
            strides,
            slots,
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Linear cell offset of `k` within the bounding box.
    pub fn cell(&self, k: &[i64]) -> Option<usize> {
        let mut cell = 0;
        for i in 0..self.lo.len() {
            let off = k[i] - self.lo[i];
            if off < 0 || off as usize >= self.shape[i] {
                return None;
            }
            cell += off as usize * self.strides[i];
        }
        Some(cell)
    }

    pub fn get(&self, k: &[i64]) -> Option<usize> {
        let cell = self.cell(k)?;
        match self.slots[cell] {
            EMPTY_SLOT => None,
            pos => Some(pos as usize),
        }
    }

    /// Counts, via prefix sums, how many positions flagged in `members` fall
    /// inside an index box. Building is linear in the bounding-box volume and
    /// each query costs `2^n` lookups.
    pub fn counter(&self, members: &[bool]) -> BoxCounter {
        BoxCounter::build(self, |pos| members[pos])
    }

    /// Counter over all positions of the map.
    pub fn occupancy(&self) -> BoxCounter {
        BoxCounter::build(self, |_| true)
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

/// Summed-area table over a [`GridMap`] for constant-time box counts.
#[derive(Debug, Clone)]
pub struct BoxCounter {
    lo: Vec<i64>,
    shape: Vec<usize>,
    strides: Vec<usize>,
    sums: Vec<u32>,
}

impl BoxCounter {
    fn build(map: &GridMap, member: impl Fn(usize) -> bool) -> Self {
        let dim = map.dim();
        let shape: Vec<usize> = map.shape.iter().map(|s| s + 1).collect();
        let strides = row_major_strides(&shape);
        let total: usize = shape.iter().product();
        let mut sums = vec![0u32; total];
        if !map.slots.is_empty() {
            // Scatter the members at offset +1 in every axis.
            let mut k = vec![0usize; dim];
            for &slot in &map.slots {
                if slot != EMPTY_SLOT && member(slot as usize) {
                    let cell: usize = (0..dim).map(|i| (k[i] + 1) * strides[i]).sum();
                    sums[cell] = 1;
                }
                for d in (0..dim).rev() {
                    k[d] += 1;
                    if k[d] < map.shape[d] {
                        break;
                    }
                    k[d] = 0;
                }
            }
            for axis in 0..dim {
                let stride = strides[axis];
                for cell in 0..total {
                    let along = (cell / stride) % shape[axis];
                    if along > 0 {
                        sums[cell] += sums[cell - stride];
                    }
                }
            }
        }
        BoxCounter {
            lo: map.lo.clone(),
            shape,
            strides,
            sums,
        }
    }

    /// Number of members inside `b`. Parts of `b` outside the bounding box
    /// contribute nothing.
    pub fn count(&self, b: &IndexBox) -> u64 {
        self.count_range(&b.lo, &b.hi)
    }

    /// [`count`](Self::count) for the box with corners `lo` and `hi`.
    pub fn count_range(&self, b_lo: &[i64], b_hi: &[i64]) -> u64 {
        let dim = self.lo.len();
        if dim <= 8 {
            let (mut lo, mut hi) = ([0usize; 8], [0usize; 8]);
            self.count_with(b_lo, b_hi, &mut lo[..dim], &mut hi[..dim])
        } else {
            self.count_with(b_lo, b_hi, &mut vec![0; dim], &mut vec![0; dim])
        }
    }

    fn count_with(&self, b_lo: &[i64], b_hi: &[i64], lo: &mut [usize], hi: &mut [usize]) -> u64 {
        let dim = lo.len();
        // Clipped half-open bounds in summed-area coordinates.
        for i in 0..dim {
            let max = (self.shape[i] - 1) as i64;
            let l = (b_lo[i] - self.lo[i]).clamp(0, max);
            let h = (b_hi[i] - self.lo[i] + 1).clamp(0, max);
            if h <= l {
                return 0;
            }
            lo[i] = l as usize;
            hi[i] = h as usize;
        }
        let mut total: i64 = 0;
        for corner in 0..(1usize << dim) {
            let mut cell = 0;
            let mut sign = 1i64;
            for i in 0..dim {
                if corner >> i & 1 == 1 {
                    cell += lo[i] * self.strides[i];
                    sign = -sign;
                } else {
                    cell += hi[i] * self.strides[i];
                }
            }
            total += sign * self.sums[cell] as i64;
        }
        total as u64
    }

    /// True when every lattice point of `b` is a member.
    pub fn covers(&self, b: &IndexBox) -> bool {
        self.covers_range(&b.lo, &b.hi)
    }

    pub fn covers_range(&self, lo: &[i64], hi: &[i64]) -> bool {
        let mut volume = 1u64;
        for (l, h) in lo.iter().zip(hi) {
            if l > h {
                return false;
            }
            volume *= (h - l + 1) as u64;
        }
        self.count_range(lo, hi) == volume
    }
}
