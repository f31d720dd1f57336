//! Generalized Haar filter space.
//!
//! A generalized Haar filter of side `m` is an `m x m` matrix of `+1`/`-1`
//! cells. A filter and its negation describe the same constrained kernel
//! (the sign folds into the multiplication factor), so the space keeps one
//! canonical representative per pair: the one whose cell `(0, 0)` is `+1`.
//!
//! The canonical index reads the remaining `m*m - 1` cells in row-major
//! order as a binary number, most significant bit first, with `+1 -> 1`
//! and `-1 -> 0`. Index 0 is therefore the pattern with only the top-left
//! cell positive and `2^(m*m-1) - 1` is the all-positive pattern.

use crate::error::{Error, Result};

/// Smallest supported kernel side.
pub const MIN_SIDE: usize = 2;
/// Largest supported kernel side; `2^15` canonical filters.
pub const MAX_SIDE: usize = 4;

fn check_side(m: usize) -> Result<()> {
    if (MIN_SIDE..=MAX_SIDE).contains(&m) {
        Ok(())
    } else {
        Err(Error::SizeLimit {
            m,
            min: MIN_SIDE,
            max: MAX_SIDE,
        })
    }
}

/// Number of canonical filters of side `m`.
pub fn space_size(m: usize) -> usize {
    1usize << (m * m - 1)
}

/// A canonical sign pattern.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SignPattern {
    m: u8,
    index: u32,
}

impl SignPattern {
    pub fn from_index(m: usize, index: u32) -> Result<Self> {
        check_side(m)?;
        if index as usize >= space_size(m) {
            return Err(Error::config(format!(
                "filter index {index} outside space of size {}",
                space_size(m)
            )));
        }
        Ok(SignPattern { m: m as u8, index })
    }

    /// Canonicalizes an arbitrary sign matrix. Returns the pattern and the
    /// polarity (`+1` or `-1`) such that `cells == polarity * pattern`.
    ///
    /// Cells are read by sign; zero counts as `+1`.
    pub fn canonicalize(m: usize, cells: &[f64]) -> Result<(Self, f64)> {
        check_side(m)?;
        if cells.len() != m * m {
            return Err(Error::dim(format!(
                "expected {} cells for side {m}, got {}",
                m * m,
                cells.len()
            )));
        }
        let polarity = if cells[0] < 0.0 { -1.0 } else { 1.0 };
        let mut index = 0u32;
        for &c in &cells[1..] {
            index <<= 1;
            if c * polarity >= 0.0 {
                index |= 1;
            }
        }
        Ok((SignPattern { m: m as u8, index }, polarity))
    }

    pub fn side(&self) -> usize {
        self.m as usize
    }

    pub fn index(&self) -> u32 {
        self.index
    }

    /// Cell value at row-major position `pos`.
    pub fn cell(&self, pos: usize) -> i8 {
        let n = self.side() * self.side();
        assert!(pos < n, "cell {pos} out of range");
        if pos == 0 {
            return 1;
        }
        let bit = n - 1 - pos;
        if (self.index >> bit) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn cells(&self) -> Vec<i8> {
        (0..self.side() * self.side()).map(|p| self.cell(p)).collect()
    }

    pub fn signs(&self) -> Vec<f64> {
        self.cells().into_iter().map(f64::from).collect()
    }

    /// Row-major positions of the `+1` and `-1` cells.
    pub fn split_cells(&self) -> (Vec<usize>, Vec<usize>) {
        (0..self.side() * self.side()).partition(|&p| self.cell(p) > 0)
    }

    /// The dense kernel `pattern * factor`.
    pub fn scaled(&self, factor: f64) -> Vec<f64> {
        self.cells().into_iter().map(|c| f64::from(c) * factor).collect()
    }
}

/// Any ordered collection of canonical filters sharing one side length.
pub trait FilterBank {
    fn side(&self) -> usize;
    fn len(&self) -> usize;
    /// Canonical index of the filter at `pos`.
    fn index_at(&self, pos: usize) -> u32;
    /// Signs (`+-1.0`) of the filter at `pos`, row-major.
    fn signs_at(&self, pos: usize) -> &[f64];
    /// Signs of every filter, concatenated in bank order.
    fn all_signs(&self) -> &[f64];

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All canonical filters of one side length, ordered by canonical index.
#[derive(Clone, Debug)]
pub struct FilterSpace {
    m: usize,
    signs: Vec<f64>,
}

impl FilterSpace {
    pub fn patterns(&self) -> impl Iterator<Item = SignPattern> + '_ {
        (0..self.len() as u32).map(move |i| SignPattern {
            m: self.m as u8,
            index: i,
        })
    }

    pub fn pattern(&self, index: u32) -> Result<SignPattern> {
        SignPattern::from_index(self.m, index)
    }
}

impl FilterBank for FilterSpace {
    fn side(&self) -> usize {
        self.m
    }

    fn len(&self) -> usize {
        space_size(self.m)
    }

    fn index_at(&self, pos: usize) -> u32 {
        pos as u32
    }

    fn signs_at(&self, pos: usize) -> &[f64] {
        let n = self.m * self.m;
        &self.signs[pos * n..(pos + 1) * n]
    }

    fn all_signs(&self) -> &[f64] {
        &self.signs
    }
}

/// Enumerates every canonical filter of side `m`.
pub fn enumerate_space(m: usize) -> Result<FilterSpace> {
    check_side(m)?;
    let n = m * m;
    let mut signs = Vec::with_capacity(space_size(m) * n);
    for index in 0..space_size(m) as u32 {
        signs.extend(SignPattern { m: m as u8, index }.signs());
    }
    Ok(FilterSpace { m, signs })
}

/// The data-driven subset of the filter space kept for constrained training.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedSpace {
    m: usize,
    selected: Vec<u32>,
    usage_counts: Vec<u64>,
    signs: Vec<f64>,
}

impl ReducedSpace {
    /// Builds a reduced space from an explicit list of canonical indices,
    /// e.g. when loading a model. Usage counts are unknown and left empty.
    pub fn from_indices(m: usize, selected: Vec<u32>) -> Result<Self> {
        check_side(m)?;
        if selected.is_empty() {
            return Err(Error::config("reduced space must hold at least one filter"));
        }
        let mut signs = Vec::with_capacity(selected.len() * m * m);
        for (pos, &idx) in selected.iter().enumerate() {
            if selected[..pos].contains(&idx) {
                return Err(Error::config(format!("filter {idx} selected twice")));
            }
            signs.extend(SignPattern::from_index(m, idx)?.signs());
        }
        Ok(ReducedSpace {
            m,
            selected,
            usage_counts: Vec::new(),
            signs,
        })
    }

    /// The whole space as a "reduced" space, in canonical order.
    pub fn full(m: usize) -> Result<Self> {
        Self::from_indices(m, (0..space_size(m) as u32).collect())
    }

    pub fn selected(&self) -> &[u32] {
        &self.selected
    }

    /// Usage counts over the full space (empty when unknown).
    pub fn usage_counts(&self) -> &[u64] {
        &self.usage_counts
    }

    pub fn pattern_at(&self, pos: usize) -> SignPattern {
        SignPattern {
            m: self.m as u8,
            index: self.selected[pos],
        }
    }

    /// Position of a canonical index within the selection.
    pub fn position_of(&self, index: u32) -> Option<usize> {
        self.selected.iter().position(|&i| i == index)
    }
}

impl FilterBank for ReducedSpace {
    fn side(&self) -> usize {
        self.m
    }

    fn len(&self) -> usize {
        self.selected.len()
    }

    fn index_at(&self, pos: usize) -> u32 {
        self.selected[pos]
    }

    fn signs_at(&self, pos: usize) -> &[f64] {
        let n = self.m * self.m;
        &self.signs[pos * n..(pos + 1) * n]
    }

    fn all_signs(&self) -> &[f64] {
        &self.signs
    }
}

/// Least-squares fit of a kernel to one filter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectionResult {
    /// Canonical filter index.
    pub index: u32,
    /// Position of the filter inside the bank it was searched in.
    pub position: usize,
    pub lambda: f64,
    pub residual: f64,
}

fn check_kernel(w: &[f64], m: usize) -> Result<()> {
    if w.len() != m * m {
        return Err(Error::dim(format!(
            "kernel has {} values, filter side {m} needs {}",
            w.len(),
            m * m
        )));
    }
    Ok(())
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn scale_of(w: &[f64], signs: &[f64]) -> f64 {
    // exact members keep their factor bit-for-bit
    let c = w[0] * signs[0];
    if w.iter().zip(signs).all(|(x, s)| *x == s * c) {
        return c;
    }
    dot(w, signs) / signs.len() as f64
}

/// `sum (w - signs * lambda)^2`
pub fn residual(w: &[f64], signs: &[f64], lambda: f64) -> f64 {
    w.iter()
        .zip(signs)
        .map(|(x, s)| {
            let e = x - s * lambda;
            e * e
        })
        .sum()
}

/// Least-squares multiplication factor of `w` against `f`: `sum(w * f) / m^2`.
pub fn project_scale(w: &[f64], f: &SignPattern) -> Result<f64> {
    check_kernel(w, f.side())?;
    Ok(scale_of(w, &f.signs()))
}

/// Finds the filter in `bank` that fits `w` best in the least-squares sense.
/// Ties go to the lowest canonical index.
pub fn nearest_filter<B: FilterBank + ?Sized>(w: &[f64], bank: &B) -> Result<ProjectionResult> {
    if bank.is_empty() {
        return Err(Error::config("cannot search an empty filter bank"));
    }
    check_kernel(w, bank.side())?;
    let mut best: Option<ProjectionResult> = None;
    for pos in 0..bank.len() {
        let signs = bank.signs_at(pos);
        let lambda = scale_of(w, signs);
        let res = residual(w, signs, lambda);
        let index = bank.index_at(pos);
        let better = match &best {
            None => true,
            Some(b) => res < b.residual || (res == b.residual && index < b.index),
        };
        if better {
            best = Some(ProjectionResult {
                index,
                position: pos,
                lambda,
                residual: res,
            });
        }
    }
    Ok(best.expect("bank is non-empty"))
}

/// Counts, for each kernel, which full-space filter is nearest.
pub fn usage_counts<'a, I>(kernels: I, space: &FilterSpace) -> Result<Vec<u64>>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut counts = vec![0u64; space.len()];
    for w in kernels {
        counts[nearest_filter(w, space)?.index as usize] += 1;
    }
    Ok(counts)
}

/// Keeps the `nr` most used filters, most used first, lower index first on ties.
pub fn select_top_filters(m: usize, usage_counts: &[u64], nr: usize) -> Result<ReducedSpace> {
    check_side(m)?;
    if nr == 0 {
        return Err(Error::config("Nr must be positive"));
    }
    if usage_counts.len() != space_size(m) {
        return Err(Error::dim(format!(
            "usage histogram has {} bins, space has {}",
            usage_counts.len(),
            space_size(m)
        )));
    }
    if nr > usage_counts.len() {
        return Err(Error::config(format!(
            "Nr = {nr} exceeds space size {}",
            usage_counts.len()
        )));
    }
    let mut order: Vec<u32> = (0..usage_counts.len() as u32).collect();
    order.sort_by(|&a, &b| {
        usage_counts[b as usize]
            .cmp(&usage_counts[a as usize])
            .then(a.cmp(&b))
    });
    order.truncate(nr);
    let mut reduced = ReducedSpace::from_indices(m, order)?;
    reduced.usage_counts = usage_counts.to_vec();
    Ok(reduced)
}
