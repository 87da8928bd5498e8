//! Classical and CSS code constructions: cyclic codes, toric codes,
//! quantum bicycle codes and hypergraph products.
//!
//! A [`CssCode`] stores the X-type stabilizer supports `a` and the Z-type
//! supports `b`. For an error `(e_x | e_z)` the syndrome is
//! `(a · e_z, b · e_x)`, which is `H M e` for `H = diag(a, b)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gf2::{gf2_matmul, BitMatrix};
use crate::{Error, Result};

/// A classical linear code given by its parity-check matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalCode {
    pub name: String,
    pub h: BitMatrix,
    pub n: usize,
    pub k: usize,
}

impl ClassicalCode {
    pub fn from_parity_check(name: impl Into<String>, h: BitMatrix) -> Self {
        let n = h.cols();
        let k = n - h.rank();
        Self {
            name: name.into(),
            h,
            n,
            k,
        }
    }

    pub fn m(&self) -> usize {
        self.h.rows()
    }

    /// The `[7,4,3]` Hamming code, generator `x³ + x + 1`.
    pub fn hamming743() -> Self {
        let mut c = cyclic_parity_check(7, &[1, 1, 0, 1]).expect("x^3+x+1 divides x^7-1");
        c.name = "hamming743".into();
        c
    }

    /// The narrow-sense `[15,7,5]` BCH code, generator
    /// `(x⁴+x+1)(x⁴+x³+x²+x+1) = x⁸+x⁷+x⁶+x⁴+1`.
    pub fn bch1575() -> Self {
        let mut c = cyclic_parity_check(15, &[1, 0, 0, 0, 1, 0, 1, 1, 1])
            .expect("BCH generator divides x^15-1");
        c.name = "bch1575".into();
        c
    }

    /// Single overall parity check on `n` bits, an `[n, n-1]` code.
    pub fn parity(n: usize) -> Self {
        let h = BitMatrix::from_row_supports(1, n, &[(0..n).collect()]).expect("in range");
        Self::from_parity_check(format!("parity{n}"), h)
    }

    /// Repetition code with the chain of checks `e_i + e_{i+1}`.
    pub fn repetition(n: usize) -> Self {
        let supports: Vec<Vec<usize>> = (0..n.saturating_sub(1)).map(|i| vec![i, i + 1]).collect();
        let h = BitMatrix::from_row_supports(supports.len(), n, &supports).expect("in range");
        Self::from_parity_check(format!("repetition{n}"), h)
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "hamming743" => Ok(Self::hamming743()),
            "bch1575" => Ok(Self::bch1575()),
            _ => {
                if let Some(n) = name.strip_prefix("parity").and_then(|s| s.parse().ok()) {
                    if n >= 2 {
                        return Ok(Self::parity(n));
                    }
                }
                if let Some(n) = name.strip_prefix("repetition").and_then(|s| s.parse().ok()) {
                    if n >= 2 {
                        return Ok(Self::repetition(n));
                    }
                }
                Err(Error::InvalidParameter(format!(
                    "unknown classical code '{name}' (known: hamming743, bch1575, parity<n>, repetition<n>)"
                )))
            }
        }
    }
}

/// Polynomials over GF(2) as coefficient vectors, lowest degree first.
fn poly_trim(mut p: Vec<u8>) -> Vec<u8> {
    while p.len() > 1 && *p.last().unwrap() == 0 {
        p.pop();
    }
    p
}

/// Returns `(quotient, remainder)`.
fn poly_divmod(num: &[u8], den: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let den = poly_trim(den.to_vec());
    let dd = den.len() - 1;
    let mut rem = poly_trim(num.to_vec());
    if rem.len() < den.len() {
        return (vec![0], rem);
    }
    let mut quot = vec![0u8; rem.len() - dd];
    for shift in (0..quot.len()).rev() {
        if rem[shift + dd] == 1 {
            quot[shift] = 1;
            for (i, &c) in den.iter().enumerate() {
                rem[shift + i] ^= c;
            }
        }
    }
    (poly_trim(quot), poly_trim(rem))
}

/// Parity-check matrix of the length-`n` cyclic code generated by `g`
/// (coefficients lowest degree first).
///
/// Rows are shifts of the reciprocal check polynomial
/// `h*(x) = x^k h(1/x)` with `h = (xⁿ - 1) / g`.
pub fn cyclic_parity_check(n: usize, g: &[u8]) -> Result<ClassicalCode> {
    let g = poly_trim(g.to_vec());
    if g.iter().any(|&c| c > 1) {
        return Err(Error::InvalidParameter("generator coefficients must be 0/1".into()));
    }
    let deg_g = g.len() - 1;
    if deg_g == 0 || deg_g > n {
        return Err(Error::InvalidParameter(format!(
            "generator of degree {deg_g} for length {n}"
        )));
    }
    let mut xn1 = vec![0u8; n + 1];
    xn1[0] = 1;
    xn1[n] = 1;
    let (h, rem) = poly_divmod(&xn1, &g);
    if rem.iter().any(|&c| c != 0) {
        return Err(Error::InvalidParameter(format!(
            "generator does not divide x^{n} - 1"
        )));
    }
    let k = n - deg_g;
    let mut supports = Vec::with_capacity(deg_g);
    for row in 0..deg_g {
        let support: Vec<usize> = (0..=k).filter(|&j| h[k - j] == 1).map(|j| row + j).collect();
        supports.push(support);
    }
    let hm = BitMatrix::from_row_supports(deg_g, n, &supports)?;
    Ok(ClassicalCode::from_parity_check(format!("cyclic{n}"), hm))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Orientation {
    Horizontal,
    Vertical,
}

impl Orientation {
    pub fn label(self) -> &'static str {
        match self {
            Orientation::Horizontal => "h",
            Orientation::Vertical => "v",
        }
    }
}

/// Geometry of an `L × L` periodic lattice.
///
/// Edge `h(x, y)` joins vertices `(x, y)` and `(x+1, y)` and has index
/// `y L + x`; edge `v(x, y)` joins `(x, y)` and `(x, y+1)` and has index
/// `L² + y L + x`. Vertex and plaquette `(x, y)` both have index `y L + x`;
/// plaquette `(x, y)` is the face whose lower-left corner is vertex `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToricLattice {
    #[serde(rename = "L")]
    pub l: usize,
}

impl ToricLattice {
    pub fn new(l: usize) -> Self {
        Self { l }
    }

    pub fn num_edges(&self) -> usize {
        2 * self.l * self.l
    }

    pub fn num_sites(&self) -> usize {
        self.l * self.l
    }

    pub fn edge_coord(&self, e: usize) -> (usize, usize, Orientation) {
        let l2 = self.l * self.l;
        let (o, i) = if e < l2 {
            (Orientation::Horizontal, e)
        } else {
            (Orientation::Vertical, e - l2)
        };
        (i % self.l, i / self.l, o)
    }

    pub fn edge_index(&self, x: usize, y: usize, o: Orientation) -> usize {
        let base = (y % self.l) * self.l + x % self.l;
        match o {
            Orientation::Horizontal => base,
            Orientation::Vertical => self.l * self.l + base,
        }
    }

    pub fn site_coord(&self, s: usize) -> (usize, usize) {
        (s % self.l, s / self.l)
    }

    pub fn site_index(&self, x: usize, y: usize) -> usize {
        (y % self.l) * self.l + x % self.l
    }

    /// 0 when check `c` sits at the edge's own site `(x, y)`, 1 for the other
    /// endpoint (vertex checks) or the neighbouring face (plaquette checks).
    pub fn check_role(&self, edge: usize, check: usize) -> u8 {
        let (x, y, _) = self.edge_coord(edge);
        u8::from(check != self.site_index(x, y))
    }
}

/// A CSS stabilizer code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CssCode {
    pub name: String,
    pub n: usize,
    /// X-type stabilizer supports; detects Z errors.
    pub a: BitMatrix,
    /// Z-type stabilizer supports; detects X errors.
    pub b: BitMatrix,
    pub lattice: Option<ToricLattice>,
    pub seed: Option<u64>,
}

impl CssCode {
    pub fn new(name: impl Into<String>, a: BitMatrix, b: BitMatrix) -> Result<Self> {
        if a.cols() != b.cols() {
            return Err(Error::DimensionMismatch(format!(
                "A has {} columns, B has {}",
                a.cols(),
                b.cols()
            )));
        }
        Ok(Self {
            name: name.into(),
            n: a.cols(),
            a,
            b,
            lattice: None,
            seed: None,
        })
    }

    pub fn rank_a(&self) -> usize {
        self.a.rank()
    }

    pub fn rank_b(&self) -> usize {
        self.b.rank()
    }

    /// Number of logical qubits, `n - rank(A) - rank(B)`.
    pub fn k(&self) -> usize {
        self.n - self.rank_a() - self.rank_b()
    }

    pub fn commutes(&self) -> bool {
        gf2_matmul(&self.a, &self.b.transpose())
            .map(|m| m.is_zero())
            .unwrap_or(false)
    }

    /// Full symplectic check matrix `diag(A, B)` over `2n` columns.
    pub fn stabilizer_matrix(&self) -> BitMatrix {
        self.a.block_diag(&self.b)
    }

    pub fn validate(&self) -> ValidationReport {
        let hist_rows = |m: &BitMatrix| {
            let mut h = BTreeMap::new();
            for r in 0..m.rows() {
                *h.entry(m.row_weight(r)).or_insert(0) += 1;
            }
            h
        };
        let hist_cols = |m: &BitMatrix| {
            let mut h = BTreeMap::new();
            for c in 0..m.cols() {
                *h.entry(m.col_weight(c)).or_insert(0) += 1;
            }
            h
        };
        let rank_a = self.rank_a();
        let rank_b = self.rank_b();
        ValidationReport {
            name: self.name.clone(),
            n: self.n,
            k: self.n as i64 - rank_a as i64 - rank_b as i64,
            rank_a,
            rank_b,
            checks_a: self.a.rows(),
            checks_b: self.b.rows(),
            commutes: self.commutes(),
            row_weights_a: hist_rows(&self.a),
            row_weights_b: hist_rows(&self.b),
            col_weights_a: hist_cols(&self.a),
            col_weights_b: hist_cols(&self.b),
        }
    }

    pub fn to_file(&self) -> CodeFile {
        CodeFile {
            name: self.name.clone(),
            n: self.n,
            a: self.a.clone(),
            b: self.b.clone(),
            lattice: self.lattice,
            seed: self.seed,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_file())?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: CodeFile = serde_json::from_str(text)?;
        file.try_into()
    }
}

/// On-disk code description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeFile {
    pub name: String,
    pub n: usize,
    #[serde(rename = "A")]
    pub a: BitMatrix,
    #[serde(rename = "B")]
    pub b: BitMatrix,
    #[serde(default)]
    pub lattice: Option<ToricLattice>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl TryFrom<CodeFile> for CssCode {
    type Error = Error;

    fn try_from(f: CodeFile) -> Result<Self> {
        if f.a.cols() != f.n || f.b.cols() != f.n {
            return Err(Error::Format(format!(
                "code '{}' declares n = {} but matrices have {} and {} columns",
                f.name,
                f.n,
                f.a.cols(),
                f.b.cols()
            )));
        }
        if let Some(lat) = f.lattice {
            if lat.num_edges() != f.n {
                return Err(Error::Format(format!(
                    "lattice L = {} does not match n = {}",
                    lat.l, f.n
                )));
            }
        }
        Ok(CssCode {
            name: f.name,
            n: f.n,
            a: f.a,
            b: f.b,
            lattice: f.lattice,
            seed: f.seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub name: String,
    pub n: usize,
    pub k: i64,
    pub rank_a: usize,
    pub rank_b: usize,
    pub checks_a: usize,
    pub checks_b: usize,
    pub commutes: bool,
    pub row_weights_a: BTreeMap<usize, usize>,
    pub row_weights_b: BTreeMap<usize, usize>,
    pub col_weights_a: BTreeMap<usize, usize>,
    pub col_weights_b: BTreeMap<usize, usize>,
}

/// Toric code on an `L × L` torus: `a` holds the vertex (star) checks,
/// `b` the plaquette checks.
pub fn toric_code(l: usize) -> Result<CssCode> {
    if l < 2 {
        return Err(Error::InvalidParameter(format!("toric code needs L >= 2, got {l}")));
    }
    let lat = ToricLattice::new(l);
    let sites = lat.num_sites();
    let mut a = BitMatrix::zeros(sites, lat.num_edges());
    let mut b = BitMatrix::zeros(sites, lat.num_edges());
    use Orientation::*;
    for y in 0..l {
        for x in 0..l {
            let s = lat.site_index(x, y);
            let xm = (x + l - 1) % l;
            let ym = (y + l - 1) % l;
            for e in [
                lat.edge_index(x, y, Horizontal),
                lat.edge_index(xm, y, Horizontal),
                lat.edge_index(x, y, Vertical),
                lat.edge_index(x, ym, Vertical),
            ] {
                a.set(s, e, true);
            }
            for e in [
                lat.edge_index(x, y, Horizontal),
                lat.edge_index(x, y + 1, Horizontal),
                lat.edge_index(x, y, Vertical),
                lat.edge_index(x + 1, y, Vertical),
            ] {
                b.set(s, e, true);
            }
        }
    }
    let mut code = CssCode::new(format!("toric_L{l}"), a, b)?;
    code.lattice = Some(lat);
    Ok(code)
}

/// Retry budgets for the bicycle construction.
pub const BICYCLE_ROW_RETRIES: usize = 100;
pub const BICYCLE_VECTOR_RETRIES: usize = 100;

/// Circulant whose column `c` is `seed` cyclically shifted down by `c`.
pub fn circulant(seed: &[usize], size: usize) -> BitMatrix {
    let mut c = BitMatrix::zeros(size, size);
    for col in 0..size {
        for &i in seed {
            c.set((i + col) % size, col, true);
        }
    }
    c
}

/// Quantum bicycle code `[[n, k]]` from a random weight-`w` vector of length
/// `n / 2`.
///
/// `H₀ = [C, Cᵀ]` with `C` circulant; `k / 2` random rows are removed. If the
/// remaining rows are not independent, the removed set is resampled (same
/// vector) up to [`BICYCLE_ROW_RETRIES`] times, then a new vector is drawn,
/// up to [`BICYCLE_VECTOR_RETRIES`] times.
pub fn bicycle_code(n: usize, k: usize, w: usize, seed: u64) -> Result<CssCode> {
    if n % 2 != 0 || k % 2 != 0 || n == 0 {
        return Err(Error::InvalidParameter(format!("n = {n} and k = {k} must be even")));
    }
    if k >= n {
        return Err(Error::InvalidParameter(format!("k = {k} must be below n = {n}")));
    }
    let half = n / 2;
    if w == 0 || w > half {
        return Err(Error::InvalidParameter(format!("weight w = {w} must be in 1..={half}")));
    }
    let target_rank = (n - k) / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..BICYCLE_VECTOR_RETRIES {
        let mut support = sample(&mut rng, half, w).into_vec();
        support.sort_unstable();
        let c = circulant(&support, half);
        let h0 = c.hstack(&c.transpose())?;
        for _ in 0..BICYCLE_ROW_RETRIES {
            let mut removed = sample(&mut rng, half, k / 2).into_vec();
            removed.sort_unstable();
            let h = h0.without_rows(&removed);
            if h.rank() == target_rank {
                let mut code = CssCode::new(format!("bicycle_{n}_{k}_{w}"), h.clone(), h)?;
                code.seed = Some(seed);
                return Ok(code);
            }
        }
    }
    Err(Error::Construction(format!(
        "bicycle ({n}, {k}, {w}) with seed {seed}: no full-rank row removal within the retry budget"
    )))
}

/// Hypergraph product of two classical codes:
/// `A = [H₁ ⊗ I_{n₂}, I_{m₁} ⊗ H₂ᵀ]`, `B = [I_{n₁} ⊗ H₂, H₁ᵀ ⊗ I_{m₂}]`.
pub fn hypergraph_product(c1: &ClassicalCode, c2: &ClassicalCode) -> Result<CssCode> {
    let (h1, h2) = (&c1.h, &c2.h);
    let (m1, n1) = (h1.rows(), h1.cols());
    let (m2, n2) = (h2.rows(), h2.cols());
    let a = h1
        .kron(&BitMatrix::identity(n2))
        .hstack(&BitMatrix::identity(m1).kron(&h2.transpose()))?;
    let b = BitMatrix::identity(n1)
        .kron(h2)
        .hstack(&h1.transpose().kron(&BitMatrix::identity(m2)))?;
    debug_assert_eq!(a.cols(), m1 * m2 + n1 * n2);
    CssCode::new(format!("hgp_{}_{}", c1.name, c2.name), a, b)
}
