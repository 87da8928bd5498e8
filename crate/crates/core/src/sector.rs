//! Per-sector decoding data for CSS codes.
//!
//! Under independent X/Z noise a CSS code splits into two classical problems.
//! The X sector decodes `e_x` on the Tanner graph of `b` (syndrome `b · e_x`);
//! an X correction is harmless when the total lies in the row space of `a`.
//! The Z sector mirrors this with `a` and `b` swapped.
//!
//! The degeneracy loss needs `H⊥ M` restricted to one sector. With
//! `H = diag(a, b)`, `H⊥` is spanned by `(ker b | 0)` and `(0 | ker a)`
//! rows, and `M` swaps the halves, so the rows acting on `e_x` are
//! `ker a`: `e_x ∈ rowspace(a)` iff every vector of `ker a` is orthogonal to it.
//! Likewise the Z sector uses `ker b`.

use serde::{Deserialize, Serialize};

use crate::bp::TannerGraph;
use crate::codes::{CssCode, ToricLattice};
use crate::gf2::{gf2_nullspace, BitMatrix, BitVector, RowspaceTester};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sector {
    X,
    Z,
}

impl Sector {
    pub fn label(self) -> &'static str {
        match self {
            Sector::X => "x",
            Sector::Z => "z",
        }
    }
}

/// Which sectors are simulated and decoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SectorPolicy {
    X,
    Z,
    Both,
}

impl SectorPolicy {
    pub fn sectors(self) -> &'static [Sector] {
        match self {
            SectorPolicy::X => &[Sector::X],
            SectorPolicy::Z => &[Sector::Z],
            SectorPolicy::Both => &[Sector::X, Sector::Z],
        }
    }

    /// Sector used when a single model is trained under this policy.
    pub fn training_sector(self) -> Sector {
        match self {
            SectorPolicy::Z => Sector::Z,
            _ => Sector::X,
        }
    }
}

impl std::str::FromStr for SectorPolicy {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(SectorPolicy::X),
            "z" => Ok(SectorPolicy::Z),
            "both" => Ok(SectorPolicy::Both),
            _ => Err(crate::Error::InvalidParameter(format!(
                "unknown sector policy '{s}' (x, z, both)"
            ))),
        }
    }
}

/// Everything needed to sample, decode and classify one sector.
#[derive(Debug, Clone)]
pub struct SectorData {
    pub sector: Sector,
    /// Matrix whose Tanner graph the decoder runs on.
    pub check: BitMatrix,
    pub graph: TannerGraph,
    /// Stabilizers of the same Pauli type as the errors.
    pub stabilizers: BitMatrix,
    pub stabilizer_space: RowspaceTester,
    /// Rows of `H⊥ M` acting on this sector.
    pub loss_matrix: BitMatrix,
    pub lattice: Option<ToricLattice>,
}

impl SectorData {
    pub fn new(code: &CssCode, sector: Sector) -> Result<Self> {
        let (check, stabilizers) = match sector {
            Sector::X => (code.b.clone(), code.a.clone()),
            Sector::Z => (code.a.clone(), code.b.clone()),
        };
        let graph = TannerGraph::new(&check)?;
        let stabilizer_space = RowspaceTester::new(&stabilizers);
        let loss_matrix = gf2_nullspace(&stabilizers);
        Ok(Self {
            sector,
            check,
            graph,
            stabilizers,
            stabilizer_space,
            loss_matrix,
            lattice: code.lattice,
        })
    }

    pub fn n(&self) -> usize {
        self.check.cols()
    }

    pub fn syndrome(&self, error: &BitVector) -> Result<BitVector> {
        self.check.mul_vec(error)
    }
}
