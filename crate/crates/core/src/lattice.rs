//! Subsets of the variable set `N = {0, .., n-1}` as bitmasks, and the
//! O(n·2^n) transforms over the subset lattice.
//!
//! Bit `i` set means variable `i` is present (unmasked). Index 0 is therefore
//! the fully masked input and index `2^n - 1` the untouched one.

use std::fmt;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported variable count; a table holds `2^24` reals at the cap.
pub const MAX_VARIABLES: usize = 24;

pub(crate) fn check_variable_count(n: usize) -> Result<()> {
    if n == 0 || n > MAX_VARIABLES {
        return Err(Error::VariableCount(n));
    }
    Ok(())
}

/// A subset `T ⊆ N` of `n` variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SubsetMask {
    bits: u32,
    n: u8,
}

impl SubsetMask {
    pub fn new(bits: u32, n: usize) -> Result<Self> {
        check_variable_count(n)?;
        if (bits as u64) >= (1u64 << n) {
            return Err(Error::Domain(format!(
                "mask {bits:#b} has bits outside {n} variables"
            )));
        }
        Ok(Self { bits, n: n as u8 })
    }

    pub fn empty(n: usize) -> Result<Self> {
        Self::new(0, n)
    }

    pub fn full(n: usize) -> Result<Self> {
        check_variable_count(n)?;
        Ok(Self {
            bits: full_mask(n) as u32,
            n: n as u8,
        })
    }

    /// Builds a mask from the listed variable indices.
    pub fn from_variables(vars: &[usize], n: usize) -> Result<Self> {
        check_variable_count(n)?;
        let mut bits = 0u32;
        for &v in vars {
            if v >= n {
                return Err(Error::Domain(format!("variable {v} out of range for n={n}")));
            }
            bits |= 1 << v;
        }
        Ok(Self { bits, n: n as u8 })
    }

    pub fn bits(self) -> u32 {
        self.bits
    }

    pub fn index(self) -> usize {
        self.bits as usize
    }

    pub fn n(self) -> usize {
        self.n as usize
    }

    /// Number of participating variables, `|S|`.
    pub fn order(self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn contains(self, var: usize) -> bool {
        var < self.n() && self.bits & (1 << var) != 0
    }

    pub fn is_subset_of(self, other: SubsetMask) -> bool {
        self.bits & !other.bits == 0
    }

    pub fn intersects(self, other: SubsetMask) -> bool {
        self.bits & other.bits != 0
    }

    /// `N \ T` within the mask's own `n` bits.
    pub fn complement(self) -> SubsetMask {
        Self {
            bits: !self.bits & full_mask(self.n()) as u32,
            n: self.n,
        }
    }

    pub fn variables(self) -> impl Iterator<Item = usize> {
        let bits = self.bits;
        (0..self.n()).filter(move |&i| bits & (1 << i) != 0)
    }
}

impl fmt::Display for SubsetMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (k, v) in self.variables().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, "}}")
    }
}

/// Bitmask with the low `n` bits set.
pub fn full_mask(n: usize) -> usize {
    (1usize << n) - 1
}

/// Order (popcount) of a raw lattice index.
pub fn order_of(index: usize) -> usize {
    index.count_ones() as usize
}

/// A real-valued function on the subset lattice, stored densely by bitmask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLattice", into = "RawLattice")]
pub struct LatticeArray {
    n: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawLattice {
    n: usize,
    values: Vec<f64>,
}

impl TryFrom<RawLattice> for LatticeArray {
    type Error = Error;

    fn try_from(raw: RawLattice) -> Result<Self> {
        LatticeArray::new(raw.n, raw.values)
    }
}

impl From<LatticeArray> for RawLattice {
    fn from(a: LatticeArray) -> Self {
        RawLattice {
            n: a.n,
            values: a.values,
        }
    }
}

impl LatticeArray {
    /// Validates length `2^n` and finiteness.
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self> {
        check_variable_count(n)?;
        if values.len() != 1 << n {
            return Err(Error::Dimension {
                expected: 1 << n,
                found: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { n, values })
    }

    pub fn zeros(n: usize) -> Result<Self> {
        check_variable_count(n)?;
        Ok(Self {
            n,
            values: vec![0.0; 1 << n],
        })
    }

    /// Tabulates `f` over every mask.
    pub fn from_fn(n: usize, f: impl FnMut(usize) -> f64) -> Result<Self> {
        check_variable_count(n)?;
        Self::new(n, (0..1usize << n).map(f).collect())
    }

    /// Skips validation; callers guarantee the invariants.
    pub(crate) fn from_raw(n: usize, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), 1 << n);
        Self { n, values }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, mask: SubsetMask) -> f64 {
        self.values[mask.index()]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.values.iter()
    }

    /// Value at the fully masked input, index 0.
    pub fn at_empty(&self) -> f64 {
        self.values[0]
    }

    /// Value at the unmasked input, index `2^n - 1`.
    pub fn at_full(&self) -> f64 {
        self.values[full_mask(self.n)]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> LatticeArray {
        Self::from_raw(self.n, self.values.iter().map(|&v| f(v)).collect())
    }

    pub fn max_abs_diff(&self, other: &LatticeArray) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<usize> for LatticeArray {
    type Output = f64;

    fn index(&self, index: usize) -> &f64 {
        &self.values[index]
    }
}

/// Runs `pair(low, high)` for every (T, T ∪ {i}) pair, bit by bit.
#[inline]
fn butterfly(xs: &mut [f64], mut pair: impl FnMut(&mut f64, &mut f64)) {
    let len = xs.len();
    let mut half = 1;
    while half < len {
        for block in xs.chunks_exact_mut(half * 2) {
            let (lo, hi) = block.split_at_mut(half);
            for (a, b) in lo.iter_mut().zip(hi) {
                pair(a, b);
            }
        }
        half <<= 1;
    }
}

/// `xs[T] <- Σ_{S ⊆ T} xs[S]`.
pub fn zeta_in_place(xs: &mut [f64]) {
    butterfly(xs, |lo, hi| *hi += *lo);
}

/// `xs[S] <- Σ_{T ⊆ S} (-1)^{|S|-|T|} xs[T]`.
pub fn moebius_in_place(xs: &mut [f64]) {
    butterfly(xs, |lo, hi| *hi -= *lo);
}

/// `xs[T] <- Σ_{S ⊇ T} xs[S]`.
pub fn superset_zeta_in_place(xs: &mut [f64]) {
    butterfly(xs, |lo, hi| *lo += *hi);
}

/// `xs[T] <- Σ_{S ⊇ T} (-1)^{|S|-|T|} xs[S]`; the transpose of
/// [`moebius_in_place`].
pub fn superset_moebius_in_place(xs: &mut [f64]) {
    butterfly(xs, |lo, hi| *lo -= *hi);
}

/// Subset sums: `out[T] = Σ_{S⊆T} a[S]`.
pub fn zeta_transform(a: &LatticeArray) -> LatticeArray {
    let mut out = a.values.clone();
    zeta_in_place(&mut out);
    LatticeArray::from_raw(a.n, out)
}

/// Signed subset sums: `out[S] = Σ_{T⊆S} (-1)^{|S|-|T|} v[T]`. Inverse of
/// [`zeta_transform`].
pub fn moebius_transform(v: &LatticeArray) -> LatticeArray {
    let mut out = v.values.clone();
    moebius_in_place(&mut out);
    LatticeArray::from_raw(v.n, out)
}

/// `out[T] = v[N \ T]`.
pub fn reverse_table(v: &LatticeArray) -> LatticeArray {
    let mut out = v.values.clone();
    out.reverse();
    LatticeArray::from_raw(v.n, out)
}
