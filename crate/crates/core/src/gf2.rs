//! Bit-packed linear algebra over GF(2).
//!
//! Rows are stored as `u64` words, row-major, so elimination runs as
//! word-level XOR. The symplectic form used for Pauli strings of length
//! `2N` is never materialized: it is applied as a swap of the two column
//! halves.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const WORD: usize = 64;

#[inline]
fn words_for(bits: usize) -> usize {
    bits.div_ceil(WORD)
}

/// Clears the bits past `len` in the last word.
#[inline]
fn mask_tail(words: &mut [u64], len: usize) {
    let rem = len % WORD;
    if rem != 0 {
        if let Some(last) = words.last_mut() {
            *last &= (1u64 << rem) - 1;
        }
    }
}

/// A fixed-length vector over GF(2).
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitVector {
    len: usize,
    words: Vec<u64>,
}

impl BitVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            len,
            words: vec![0; words_for(len)],
        }
    }

    /// Builds a vector from the positions of its set bits.
    pub fn from_support(len: usize, support: &[usize]) -> Result<Self> {
        let mut v = Self::zeros(len);
        for &i in support {
            if i >= len {
                return Err(Error::IndexOutOfRange { index: i, len });
            }
            v.set(i, true);
        }
        Ok(v)
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b {
                v.set(i, true);
            }
        }
        v
    }

    pub fn from_bytes(bits: &[u8]) -> Self {
        let mut v = Self::zeros(bits.len());
        for (i, &b) in bits.iter().enumerate() {
            if b & 1 == 1 {
                v.set(i, true);
            }
        }
        v
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Panics if `i` is out of range.
    #[inline]
    pub fn get(&self, i: usize) -> bool {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        (self.words[i / WORD] >> (i % WORD)) & 1 == 1
    }

    pub fn try_get(&self, i: usize) -> Result<bool> {
        if i >= self.len {
            return Err(Error::IndexOutOfRange {
                index: i,
                len: self.len,
            });
        }
        Ok(self.get(i))
    }

    #[inline]
    pub fn set(&mut self, i: usize, value: bool) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        let mask = 1u64 << (i % WORD);
        if value {
            self.words[i / WORD] |= mask;
        } else {
            self.words[i / WORD] &= !mask;
        }
    }

    #[inline]
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.len, "bit {i} out of range for length {}", self.len);
        self.words[i / WORD] ^= 1u64 << (i % WORD);
    }

    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    /// Indices of the set bits, ascending.
    pub fn support(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.weight());
        for (wi, &w) in self.words.iter().enumerate() {
            let mut w = w;
            while w != 0 {
                let b = w.trailing_zeros() as usize;
                out.push(wi * WORD + b);
                w &= w - 1;
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        (0..self.len).map(|i| self.get(i) as u8).collect()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn xor_assign(&mut self, other: &BitVector) -> Result<()> {
        if self.len != other.len {
            return Err(Error::DimensionMismatch(format!(
                "xor of vectors with lengths {} and {}",
                self.len, other.len
            )));
        }
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a ^= b;
        }
        Ok(())
    }

    pub fn xor(&self, other: &BitVector) -> Result<BitVector> {
        let mut out = self.clone();
        out.xor_assign(other)?;
        Ok(out)
    }

    /// Inner product mod 2.
    pub fn dot(&self, other: &BitVector) -> Result<bool> {
        if self.len != other.len {
            return Err(Error::DimensionMismatch(format!(
                "dot of vectors with lengths {} and {}",
                self.len, other.len
            )));
        }
        Ok(parity_of_and(&self.words, &other.words))
    }

    /// Concatenation `(self | other)`.
    pub fn concat(&self, other: &BitVector) -> BitVector {
        let mut out = BitVector::zeros(self.len + other.len);
        for i in self.support() {
            out.set(i, true);
        }
        for i in other.support() {
            out.set(self.len + i, true);
        }
        out
    }

    /// Bits `start..end` as a new vector.
    pub fn slice(&self, start: usize, end: usize) -> BitVector {
        assert!(start <= end && end <= self.len);
        let mut out = BitVector::zeros(end - start);
        for i in start..end {
            if self.get(i) {
                out.set(i - start, true);
            }
        }
        out
    }
}

impl fmt::Debug for BitVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "BitVector[")?;
        for i in 0..self.len {
            write!(f, "{}", self.get(i) as u8)?;
        }
        write!(f, "]")
    }
}

#[inline]
fn parity_of_and(a: &[u64], b: &[u64]) -> bool {
    a.iter()
        .zip(b)
        .fold(0u32, |acc, (x, y)| acc ^ (x & y).count_ones())
        & 1
        == 1
}

/// A dense GF(2) matrix with bit-packed rows.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BitMatrix {
    rows: usize,
    cols: usize,
    stride: usize,
    words: Vec<u64>,
}

impl BitMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        let stride = words_for(cols);
        Self {
            rows,
            cols,
            stride,
            words: vec![0; rows * stride],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    /// Builds a matrix from per-row column supports.
    pub fn from_row_supports(rows: usize, cols: usize, supports: &[Vec<usize>]) -> Result<Self> {
        if supports.len() != rows {
            return Err(Error::DimensionMismatch(format!(
                "{} row supports given for {rows} rows",
                supports.len()
            )));
        }
        let mut m = Self::zeros(rows, cols);
        for (r, support) in supports.iter().enumerate() {
            for &c in support {
                if c >= cols {
                    return Err(Error::IndexOutOfRange { index: c, len: cols });
                }
                m.set(r, c, true);
            }
        }
        Ok(m)
    }

    /// Builds a matrix from dense 0/1 rows. All rows must have equal length.
    pub fn from_dense(rows: &[Vec<u8>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut m = Self::zeros(rows.len(), cols);
        for (r, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {r} has length {}, expected {cols}",
                    row.len()
                )));
            }
            for (c, &b) in row.iter().enumerate() {
                if b & 1 == 1 {
                    m.set(r, c, true);
                }
            }
        }
        Ok(m)
    }

    pub fn from_rows(rows: &[BitVector], cols: usize) -> Result<Self> {
        let mut m = Self::zeros(rows.len(), cols);
        for (r, v) in rows.iter().enumerate() {
            if v.len() != cols {
                return Err(Error::DimensionMismatch(format!(
                    "row {r} has length {}, expected {cols}",
                    v.len()
                )));
            }
            m.row_words_mut(r).copy_from_slice(v.words());
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        assert!(
            r < self.rows && c < self.cols,
            "entry ({r}, {c}) out of range for {}x{} matrix",
            self.rows,
            self.cols
        );
        (self.words[r * self.stride + c / WORD] >> (c % WORD)) & 1 == 1
    }

    pub fn try_get(&self, r: usize, c: usize) -> Result<bool> {
        if r >= self.rows {
            return Err(Error::IndexOutOfRange {
                index: r,
                len: self.rows,
            });
        }
        if c >= self.cols {
            return Err(Error::IndexOutOfRange {
                index: c,
                len: self.cols,
            });
        }
        Ok(self.get(r, c))
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: bool) {
        assert!(
            r < self.rows && c < self.cols,
            "entry ({r}, {c}) out of range for {}x{} matrix",
            self.rows,
            self.cols
        );
        let mask = 1u64 << (c % WORD);
        let w = &mut self.words[r * self.stride + c / WORD];
        if value {
            *w |= mask;
        } else {
            *w &= !mask;
        }
    }

    pub fn flip(&mut self, r: usize, c: usize) {
        let v = self.get(r, c);
        self.set(r, c, !v);
    }

    #[inline]
    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.stride..(r + 1) * self.stride]
    }

    #[inline]
    fn row_words_mut(&mut self, r: usize) -> &mut [u64] {
        &mut self.words[r * self.stride..(r + 1) * self.stride]
    }

    pub fn row(&self, r: usize) -> BitVector {
        BitVector {
            len: self.cols,
            words: self.row_words(r).to_vec(),
        }
    }

    /// Column indices of the set bits of row `r`, ascending.
    pub fn row_support(&self, r: usize) -> Vec<usize> {
        let mut out = Vec::new();
        for (wi, &w) in self.row_words(r).iter().enumerate() {
            let mut w = w;
            while w != 0 {
                out.push(wi * WORD + w.trailing_zeros() as usize);
                w &= w - 1;
            }
        }
        out
    }

    pub fn row_weight(&self, r: usize) -> usize {
        self.row_words(r).iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn col_weight(&self, c: usize) -> usize {
        (0..self.rows).filter(|&r| self.get(r, c)).count()
    }

    /// Total number of ones.
    pub fn weight(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    fn xor_row_into(&mut self, src: usize, dst: usize) {
        debug_assert_ne!(src, dst);
        let s = self.stride;
        let (a, b) = if src < dst {
            let (lo, hi) = self.words.split_at_mut(dst * s);
            (&lo[src * s..(src + 1) * s], &mut hi[..s])
        } else {
            let (lo, hi) = self.words.split_at_mut(src * s);
            (&hi[..s], &mut lo[dst * s..(dst + 1) * s])
        };
        for (d, x) in b.iter_mut().zip(a) {
            *d ^= x;
        }
    }

    fn swap_rows(&mut self, a: usize, b: usize) {
        if a == b {
            return;
        }
        let s = self.stride;
        for k in 0..s {
            self.words.swap(a * s + k, b * s + k);
        }
    }

    pub fn transpose(&self) -> BitMatrix {
        let mut t = BitMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in self.row_support(r) {
                t.set(c, r, true);
            }
        }
        t
    }

    /// `self · v` mod 2.
    pub fn mul_vec(&self, v: &BitVector) -> Result<BitVector> {
        if v.len() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matrix with {} columns times vector of length {}",
                self.cols,
                v.len()
            )));
        }
        let mut out = BitVector::zeros(self.rows);
        for r in 0..self.rows {
            if parity_of_and(self.row_words(r), v.words()) {
                out.set(r, true);
            }
        }
        Ok(out)
    }

    /// Horizontal concatenation `[self, other]`.
    pub fn hstack(&self, other: &BitMatrix) -> Result<BitMatrix> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch(format!(
                "hstack of {} and {} rows",
                self.rows, other.rows
            )));
        }
        let mut m = BitMatrix::zeros(self.rows, self.cols + other.cols);
        for r in 0..self.rows {
            for c in self.row_support(r) {
                m.set(r, c, true);
            }
            for c in other.row_support(r) {
                m.set(r, self.cols + c, true);
            }
        }
        Ok(m)
    }

    /// Vertical concatenation.
    pub fn vstack(&self, other: &BitMatrix) -> Result<BitMatrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch(format!(
                "vstack of {} and {} columns",
                self.cols, other.cols
            )));
        }
        let mut m = BitMatrix::zeros(self.rows + other.rows, self.cols);
        m.words[..self.words.len()].copy_from_slice(&self.words);
        m.words[self.words.len()..].copy_from_slice(&other.words);
        Ok(m)
    }

    /// Block-diagonal `diag(self, other)`.
    pub fn block_diag(&self, other: &BitMatrix) -> BitMatrix {
        let mut m = BitMatrix::zeros(self.rows + other.rows, self.cols + other.cols);
        for r in 0..self.rows {
            for c in self.row_support(r) {
                m.set(r, c, true);
            }
        }
        for r in 0..other.rows {
            for c in other.row_support(r) {
                m.set(self.rows + r, self.cols + c, true);
            }
        }
        m
    }

    /// Kronecker product `self ⊗ other`.
    pub fn kron(&self, other: &BitMatrix) -> BitMatrix {
        let mut m = BitMatrix::zeros(self.rows * other.rows, self.cols * other.cols);
        for r1 in 0..self.rows {
            for c1 in self.row_support(r1) {
                for r2 in 0..other.rows {
                    for c2 in other.row_support(r2) {
                        m.set(r1 * other.rows + r2, c1 * other.cols + c2, true);
                    }
                }
            }
        }
        m
    }

    /// Removes the listed rows, keeping the others in order.
    pub fn without_rows(&self, removed: &[usize]) -> BitMatrix {
        let keep: Vec<usize> = (0..self.rows).filter(|r| !removed.contains(r)).collect();
        let mut m = BitMatrix::zeros(keep.len(), self.cols);
        for (i, &r) in keep.iter().enumerate() {
            m.row_words_mut(i).copy_from_slice(self.row_words(r));
        }
        m
    }

    /// Swaps the two column halves, i.e. right-multiplies by the symplectic
    /// form `M = [[0, I], [I, 0]]`.
    pub fn swap_halves(&self) -> Result<BitMatrix> {
        if self.cols % 2 != 0 {
            return Err(Error::OddLength(self.cols));
        }
        let half = self.cols / 2;
        let mut m = BitMatrix::zeros(self.rows, self.cols);
        for r in 0..self.rows {
            for c in self.row_support(r) {
                let target = if c < half { c + half } else { c - half };
                m.set(r, target, true);
            }
        }
        Ok(m)
    }

    pub fn rank(&self) -> usize {
        gf2_rref(self).rank
    }
}

impl fmt::Debug for BitMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "BitMatrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            write!(f, "  ")?;
            for c in 0..self.cols {
                write!(f, "{}", self.get(r, c) as u8)?;
            }
            writeln!(f)?;
        }
        write!(f, "]")
    }
}

/// JSON form `{"rows": m, "cols": n, "row_support": [[...], ...]}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitMatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub row_support: Vec<Vec<usize>>,
}

impl From<&BitMatrix> for BitMatrixJson {
    fn from(m: &BitMatrix) -> Self {
        Self {
            rows: m.rows,
            cols: m.cols,
            row_support: (0..m.rows).map(|r| m.row_support(r)).collect(),
        }
    }
}

impl TryFrom<BitMatrixJson> for BitMatrix {
    type Error = Error;

    fn try_from(j: BitMatrixJson) -> Result<Self> {
        for (r, support) in j.row_support.iter().enumerate() {
            if support.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Format(format!(
                    "row_support[{r}] is not strictly ascending"
                )));
            }
        }
        BitMatrix::from_row_supports(j.rows, j.cols, &j.row_support)
    }
}

impl Serialize for BitMatrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BitMatrixJson::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for BitMatrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = BitMatrixJson::deserialize(d)?;
        BitMatrix::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// Reduced row-echelon form together with its pivot columns.
#[derive(Debug, Clone)]
pub struct Rref {
    pub reduced: BitMatrix,
    pub pivots: Vec<usize>,
    pub rank: usize,
}

pub fn gf2_rref(m: &BitMatrix) -> Rref {
    let mut a = m.clone();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..a.cols {
        if row == a.rows {
            break;
        }
        let (wi, bit) = (col / WORD, 1u64 << (col % WORD));
        let Some(p) = (row..a.rows).find(|&r| a.words[r * a.stride + wi] & bit != 0) else {
            continue;
        };
        a.swap_rows(row, p);
        for r in 0..a.rows {
            if r != row && a.words[r * a.stride + wi] & bit != 0 {
                a.xor_row_into(row, r);
            }
        }
        pivots.push(col);
        row += 1;
    }
    let rank = pivots.len();
    Rref {
        reduced: a,
        pivots,
        rank,
    }
}

/// Basis of `{x : M xᵀ = 0}`, one vector per row.
pub fn gf2_nullspace(m: &BitMatrix) -> BitMatrix {
    let Rref {
        reduced, pivots, ..
    } = gf2_rref(m);
    let mut is_pivot = vec![false; m.cols];
    for &p in &pivots {
        is_pivot[p] = true;
    }
    let free: Vec<usize> = (0..m.cols).filter(|&c| !is_pivot[c]).collect();
    let mut basis = BitMatrix::zeros(free.len(), m.cols);
    for (i, &f) in free.iter().enumerate() {
        basis.set(i, f, true);
        for (r, &p) in pivots.iter().enumerate() {
            if reduced.get(r, f) {
                basis.set(i, p, true);
            }
        }
    }
    basis
}

pub fn gf2_matmul(a: &BitMatrix, b: &BitMatrix) -> Result<BitMatrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch(format!(
            "product of {}x{} and {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = BitMatrix::zeros(a.rows, b.cols);
    for r in 0..a.rows {
        for k in a.row_support(r) {
            let s = out.stride;
            let src = &b.words[k * s..(k + 1) * s];
            for (d, x) in out.words[r * s..(r + 1) * s].iter_mut().zip(src) {
                *d ^= x;
            }
        }
    }
    mask_tail(&mut out.words, out.cols);
    Ok(out)
}

/// `aᵀ M b` mod 2 with `M` swapping the X and Z halves. Returns `true` when
/// the two Pauli strings anticommute.
pub fn symplectic_product(a: &BitVector, b: &BitVector) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "symplectic product of lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.len() % 2 != 0 {
        return Err(Error::OddLength(a.len()));
    }
    let n = a.len() / 2;
    let mut parity = false;
    for i in a.support() {
        let partner = if i < n { i + n } else { i - n };
        parity ^= b.get(partner);
    }
    Ok(parity)
}

/// Rows spanning the symplectic complement `{x : H M xᵀ = 0}`.
pub fn normalizer_basis(h: &BitMatrix) -> Result<BitMatrix> {
    if h.cols() % 2 != 0 {
        return Err(Error::OddLength(h.cols()));
    }
    Ok(gf2_nullspace(&h.swap_halves()?))
}

/// Membership oracle for the row space of a fixed matrix.
///
/// Holds the RREF once; each query reduces the vector against the pivot rows.
#[derive(Debug, Clone)]
pub struct RowspaceTester {
    reduced: BitMatrix,
    pivots: Vec<usize>,
}

impl RowspaceTester {
    pub fn new(m: &BitMatrix) -> Self {
        let Rref {
            reduced,
            pivots,
            rank,
        } = gf2_rref(m);
        let reduced = reduced.without_rows(&(rank..m.rows()).collect::<Vec<_>>());
        Self { reduced, pivots }
    }

    pub fn cols(&self) -> usize {
        self.reduced.cols()
    }

    pub fn rank(&self) -> usize {
        self.pivots.len()
    }

    pub fn contains(&self, v: &BitVector) -> Result<bool> {
        if v.len() != self.reduced.cols() {
            return Err(Error::DimensionMismatch(format!(
                "vector of length {} against row space in {} columns",
                v.len(),
                self.reduced.cols()
            )));
        }
        let mut w = v.words().to_vec();
        for (r, &p) in self.pivots.iter().enumerate() {
            if (w[p / WORD] >> (p % WORD)) & 1 == 1 {
                for (d, x) in w.iter_mut().zip(self.reduced.row_words(r)) {
                    *d ^= x;
                }
            }
        }
        Ok(w.iter().all(|&x| x == 0))
    }
}

pub fn in_rowspace(m: &BitMatrix, v: &BitVector) -> Result<bool> {
    RowspaceTester::new(m).contains(v)
}
