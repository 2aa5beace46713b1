//! Permutations on `{1..n}` and the restricted sampler behind both block
//! scrambling and pixel shuffling.
//!
//! A [`Permutation`] is stored as its index sequence; the binary matrix is
//! only a derived view ([`PermutationMatrix`]). All indices at this interface
//! are 1-based.
//!
//! The same sequence is read two ways, selected by [`Convention`]:
//!
//! * [`Convention::Block`]: matrix entry `(i, j)` is 1 iff `seq(j) = i`, and
//!   applying the permutation gathers, `ys(i) = xs(seq(i))`.
//! * [`Convention::Pixel`]: matrix entry `(i, j)` is 1 iff `seq(i) = j`, and
//!   applying the permutation scatters, `ys(seq(i)) = xs(i)`.
//!
//! In both cases `apply` equals multiplying the row vector `xs` by the matrix
//! from the right.

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a sequence maps onto a permutation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Convention {
    Block,
    Pixel,
}

/// A bijection on `{1..n}`.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    // 0-based: image[i] = seq(i + 1) - 1
    image: Vec<u32>,
}

impl fmt::Debug for Permutation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("Permutation").field(&self.seq()).finish()
    }
}

impl Permutation {
    pub fn identity(n: u32) -> Self {
        Permutation {
            image: (0..n).collect(),
        }
    }

    /// Builds a permutation from a 1-based sequence, checking it is a bijection.
    pub fn from_seq(seq: &[u32]) -> Result<Self> {
        if seq.is_empty() {
            return Err(Error::InvalidPermutation("empty sequence".into()));
        }
        let n = seq.len();
        let mut seen = vec![false; n];
        let mut image = Vec::with_capacity(n);
        for (i, &v) in seq.iter().enumerate() {
            if v == 0 || v as usize > n {
                return Err(Error::InvalidPermutation(format!(
                    "seq({}) = {v} is outside 1..={n}",
                    i + 1
                )));
            }
            let z = (v - 1) as usize;
            if std::mem::replace(&mut seen[z], true) {
                return Err(Error::InvalidPermutation(format!(
                    "value {v} appears more than once"
                )));
            }
            image.push(v - 1);
        }
        Ok(Permutation { image })
    }

    pub fn len(&self) -> usize {
        self.image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image.is_empty()
    }

    /// The 1-based index sequence.
    pub fn seq(&self) -> Vec<u32> {
        self.image.iter().map(|&v| v + 1).collect()
    }

    /// `seq(i)` for a 1-based `i`.
    pub fn get(&self, i: u32) -> Option<u32> {
        let i = i.checked_sub(1)? as usize;
        self.image.get(i).map(|&v| v + 1)
    }

    pub fn is_identity(&self) -> bool {
        self.image.iter().enumerate().all(|(i, &v)| i == v as usize)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0u32; self.image.len()];
        for (i, &v) in self.image.iter().enumerate() {
            inv[v as usize] = i as u32;
        }
        Permutation { image: inv }
    }

    /// Indices `i` with `seq(i) = i`.
    pub fn fixed_points(&self) -> BTreeSet<u32> {
        self.image
            .iter()
            .enumerate()
            .filter(|&(i, &v)| i == v as usize)
            .map(|(i, _)| i as u32 + 1)
            .collect()
    }

    pub fn to_matrix(&self, convention: Convention) -> PermutationMatrix {
        let n = self.image.len();
        let mut entries = vec![0u8; n * n];
        for (k, &v) in self.image.iter().enumerate() {
            let (row, col) = match convention {
                Convention::Block => (v as usize, k),
                Convention::Pixel => (k, v as usize),
            };
            entries[row * n + col] = 1;
        }
        PermutationMatrix { n, entries }
    }

    /// Reorders `xs` as right-multiplication by `to_matrix(convention)`.
    pub fn apply<T: Clone>(&self, xs: &[T], convention: Convention) -> Result<Vec<T>> {
        self.check_len(xs.len())?;
        Ok(match convention {
            Convention::Block => self.image.iter().map(|&v| xs[v as usize].clone()).collect(),
            Convention::Pixel => {
                let mut ys = xs.to_vec();
                for (x, &v) in xs.iter().zip(&self.image) {
                    ys[v as usize] = x.clone();
                }
                ys
            }
        })
    }

    /// Like [`apply`](Self::apply) but writes into `out`, which must have the
    /// same length as `xs`.
    pub fn apply_into<T: Copy>(&self, xs: &[T], out: &mut [T], convention: Convention) -> Result<()> {
        self.check_len(xs.len())?;
        self.check_len(out.len())?;
        match convention {
            Convention::Block => {
                for (y, &v) in out.iter_mut().zip(&self.image) {
                    *y = xs[v as usize];
                }
            }
            Convention::Pixel => {
                for (&x, &v) in xs.iter().zip(&self.image) {
                    out[v as usize] = x;
                }
            }
        }
        Ok(())
    }

    /// Treats `xs` as `len()` contiguous chunks of `chunk` items and reorders
    /// whole chunks.
    pub fn apply_chunks<T: Copy>(&self, xs: &[T], chunk: usize, convention: Convention) -> Result<Vec<T>> {
        if chunk == 0 || xs.len() != chunk * self.len() {
            return Err(Error::LengthMismatch {
                expected: chunk * self.len(),
                actual: xs.len(),
            });
        }
        let mut out = xs.to_vec();
        for (k, &v) in self.image.iter().enumerate() {
            let (dst, src) = match convention {
                Convention::Block => (k, v as usize),
                Convention::Pixel => (v as usize, k),
            };
            out[dst * chunk..(dst + 1) * chunk].copy_from_slice(&xs[src * chunk..(src + 1) * chunk]);
        }
        Ok(out)
    }

    fn check_len(&self, actual: usize) -> Result<()> {
        if actual != self.len() {
            return Err(Error::LengthMismatch {
                expected: self.len(),
                actual,
            });
        }
        Ok(())
    }

    /// Appends `n` then `seq(1..n)`, all as little-endian `u32`.
    pub fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for &v in &self.image {
            out.extend_from_slice(&(v + 1).to_le_bytes());
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * (self.len() + 1));
        self.write_bytes(&mut out);
        out
    }

    /// Reads one serialized permutation from the front of `buf`, advancing it.
    pub fn read_bytes(buf: &mut &[u8]) -> Result<Self> {
        let n = take_u32(buf, "permutation")? as usize;
        if buf.len() < 4 * n {
            return Err(Error::format("permutation", format!("need {} bytes, have {}", 4 * n, buf.len())));
        }
        let (body, rest) = buf.split_at(4 * n);
        *buf = rest;
        let seq: Vec<u32> = body
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Permutation::from_seq(&seq)
    }
}

pub(crate) fn take_u32(buf: &mut &[u8], what: &'static str) -> Result<u32> {
    if buf.len() < 4 {
        return Err(Error::format(what, "truncated"));
    }
    let (head, rest) = buf.split_at(4);
    *buf = rest;
    Ok(u32::from_le_bytes(head.try_into().unwrap()))
}

/// A square binary matrix with exactly one 1 per row and column.
#[derive(Clone, PartialEq, Eq)]
pub struct PermutationMatrix {
    n: usize,
    // row-major
    entries: Vec<u8>,
}

impl fmt::Debug for PermutationMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows: Vec<&[u8]> = self.entries.chunks(self.n).collect();
        f.debug_struct("PermutationMatrix").field("rows", &rows).finish()
    }
}

impl PermutationMatrix {
    /// Validates the rows of a candidate matrix.
    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidMatrix("empty matrix".into()));
        }
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidMatrix(format!("row {} has {} entries, expected {n}", i + 1, row.len())));
            }
            if let Some(bad) = row.iter().find(|&&e| e > 1) {
                return Err(Error::InvalidMatrix(format!("non-binary entry {bad} in row {}", i + 1)));
            }
            entries.extend_from_slice(row);
        }
        let m = PermutationMatrix { n, entries };
        for i in 0..n {
            let row_sum: u32 = (0..n).map(|j| m.entries[i * n + j] as u32).sum();
            let col_sum: u32 = (0..n).map(|j| m.entries[j * n + i] as u32).sum();
            if row_sum != 1 {
                return Err(Error::InvalidMatrix(format!("row {} has {row_sum} ones", i + 1)));
            }
            if col_sum != 1 {
                return Err(Error::InvalidMatrix(format!("column {} has {col_sum} ones", i + 1)));
            }
        }
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Entry `(i, j)`, 1-based.
    pub fn get(&self, i: usize, j: usize) -> u8 {
        assert!((1..=self.n).contains(&i) && (1..=self.n).contains(&j), "index out of range");
        self.entries[(i - 1) * self.n + (j - 1)]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.entries.chunks(self.n)
    }

    pub fn transpose(&self) -> PermutationMatrix {
        let n = self.n;
        let mut entries = vec![0u8; n * n];
        for i in 0..n {
            for j in 0..n {
                entries[j * n + i] = self.entries[i * n + j];
            }
        }
        PermutationMatrix { n, entries }
    }

    /// Recovers the sequence this matrix encodes under `convention`.
    pub fn to_permutation(&self, convention: Convention) -> Permutation {
        let n = self.n;
        let mut image = vec![0u32; n];
        for i in 0..n {
            for j in 0..n {
                if self.entries[i * n + j] == 1 {
                    match convention {
                        Convention::Block => image[j] = i as u32,
                        Convention::Pixel => image[i] = j as u32,
                    }
                }
            }
        }
        Permutation { image }
    }

    /// Dense `f64` copy, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        self.entries.iter().map(|&e| e as f64).collect()
    }
}

/// How many positions of an `n`-element permutation are pinned, without
/// saying which. This is what gets recorded alongside encrypted data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Restriction {
    pub n: u32,
    pub n_fixed: u32,
}

impl Restriction {
    pub fn new(n: u32, n_fixed: u32) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidRestriction("n must be positive".into()));
        }
        if n_fixed > n {
            return Err(Error::InvalidRestriction(format!("n_fixed = {n_fixed} exceeds n = {n}")));
        }
        Ok(Restriction { n, n_fixed })
    }

    pub fn identity(n: u32) -> Result<Self> {
        Restriction::new(n, n)
    }

    pub fn unrestricted(n: u32) -> Result<Self> {
        Restriction::new(n, 0)
    }

    /// Picks `n_fixed` positions uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> RestrictionSpec {
        let fixed_positions = rand::seq::index::sample(rng, self.n as usize, self.n_fixed as usize)
            .into_iter()
            .map(|i| i as u32 + 1)
            .collect();
        RestrictionSpec {
            n: self.n,
            fixed_positions,
        }
    }

    /// `(n - n_fixed)!`
    pub fn keyspace_size(&self) -> BigUint {
        factorial(self.n - self.n_fixed)
    }
}

/// A concrete set of positions that a permutation must leave in place.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RestrictionSpec {
    n: u32,
    fixed_positions: BTreeSet<u32>,
}

impl RestrictionSpec {
    pub fn new(n: u32, fixed_positions: impl IntoIterator<Item = u32>) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidRestriction("n must be positive".into()));
        }
        let mut set = BTreeSet::new();
        for p in fixed_positions {
            if p == 0 || p > n {
                return Err(Error::InvalidRestriction(format!("fixed position {p} outside 1..={n}")));
            }
            if !set.insert(p) {
                return Err(Error::InvalidRestriction(format!("fixed position {p} listed twice")));
            }
        }
        Ok(RestrictionSpec {
            n,
            fixed_positions: set,
        })
    }

    /// Checks a declared `n_fixed` against the listed positions.
    pub fn with_count(n: u32, n_fixed: u32, fixed_positions: impl IntoIterator<Item = u32>) -> Result<Self> {
        let spec = RestrictionSpec::new(n, fixed_positions)?;
        if spec.n_fixed() != n_fixed {
            return Err(Error::InvalidRestriction(format!(
                "n_fixed = {n_fixed} but {} positions given",
                spec.n_fixed()
            )));
        }
        Ok(spec)
    }

    pub fn identity(n: u32) -> Result<Self> {
        RestrictionSpec::new(n, 1..=n)
    }

    pub fn unrestricted(n: u32) -> Result<Self> {
        RestrictionSpec::new(n, [])
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn n_fixed(&self) -> u32 {
        self.fixed_positions.len() as u32
    }

    pub fn fixed_positions(&self) -> &BTreeSet<u32> {
        &self.fixed_positions
    }

    pub fn restriction(&self) -> Restriction {
        Restriction {
            n: self.n,
            n_fixed: self.n_fixed(),
        }
    }

    /// Number of permutations that fix every listed position.
    pub fn keyspace_size(&self) -> BigUint {
        self.restriction().keyspace_size()
    }

    pub fn is_satisfied_by(&self, p: &Permutation) -> bool {
        p.len() == self.n as usize && self.fixed_positions.iter().all(|&i| p.get(i) == Some(i))
    }

    pub(crate) fn write_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.n.to_le_bytes());
        out.extend_from_slice(&self.n_fixed().to_le_bytes());
        for &p in &self.fixed_positions {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }

    pub(crate) fn read_bytes(buf: &mut &[u8]) -> Result<Self> {
        let n = take_u32(buf, "restriction")?;
        let n_fixed = take_u32(buf, "restriction")?;
        if n_fixed > n {
            return Err(Error::format("restriction", format!("n_fixed {n_fixed} > n {n}")));
        }
        let positions = (0..n_fixed)
            .map(|_| take_u32(buf, "restriction"))
            .collect::<Result<Vec<_>>>()?;
        RestrictionSpec::with_count(n, n_fixed, positions)
    }
}

/// Draws a permutation that fixes every position in `spec` and is uniform over
/// the remaining positions. Extra fixed points in the complement are allowed.
pub fn random_permutation<R: Rng + ?Sized>(spec: &RestrictionSpec, rng: &mut R) -> Permutation {
    let n = spec.n as usize;
    let free: Vec<u32> = (0..spec.n)
        .filter(|i| !spec.fixed_positions.contains(&(i + 1)))
        .collect();
    let mut values = free.clone();
    values.shuffle(rng);
    let mut image: Vec<u32> = (0..n as u32).collect();
    for (&pos, &val) in free.iter().zip(&values) {
        image[pos as usize] = val;
    }
    Permutation { image }
}

pub fn keyspace_size(spec: &RestrictionSpec) -> BigUint {
    spec.keyspace_size()
}

pub fn factorial(k: u32) -> BigUint {
    (2..=k as u64).fold(BigUint::from(1u32), |acc, i| acc * i)
}
