//! Tanner graphs and flooding sum-product belief propagation in the LLR
//! domain.
//!
//! The check update `2 atanh(Π tanh(μ/2))` is evaluated in sign/magnitude
//! form through `φ(x) = -ln tanh(x/2)`, which is its own inverse:
//! the output magnitude is `φ(Σ φ(|μ|))`. Clipping the `atanh` argument to
//! `1 - ε` is the same as flooring the `φ` sum at `-ln(1 - ε)`.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::gf2::{BitMatrix, BitVector};
use crate::{Error, Result};

/// Default `atanh` argument clip.
pub const DEFAULT_CLIP: f64 = 1e-4;

/// Sparse bipartite check/variable adjacency.
///
/// Edges are sorted by `(check, variable)`; every adjacency list refers to
/// edges by that index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TannerGraph {
    m: usize,
    n: usize,
    edge_check: Vec<usize>,
    edge_var: Vec<usize>,
    check_ptr: Vec<usize>,
    var_ptr: Vec<usize>,
    var_edges: Vec<usize>,
    signature: String,
}

impl TannerGraph {
    pub fn new(h: &BitMatrix) -> Result<Self> {
        if h.rows() == 0 || h.cols() == 0 {
            return Err(Error::InvalidParameter("empty parity-check matrix".into()));
        }
        let (m, n) = (h.rows(), h.cols());
        let mut edge_check = Vec::with_capacity(h.weight());
        let mut edge_var = Vec::with_capacity(h.weight());
        let mut check_ptr = Vec::with_capacity(m + 1);
        check_ptr.push(0);
        for c in 0..m {
            for v in h.row_support(c) {
                edge_check.push(c);
                edge_var.push(v);
            }
            check_ptr.push(edge_check.len());
        }
        let mut degree = vec![0usize; n];
        for &v in &edge_var {
            degree[v] += 1;
        }
        let mut var_ptr = Vec::with_capacity(n + 1);
        var_ptr.push(0);
        for d in &degree {
            var_ptr.push(var_ptr.last().unwrap() + d);
        }
        let mut fill = var_ptr[..n].to_vec();
        let mut var_edges = vec![0; edge_var.len()];
        for (e, &v) in edge_var.iter().enumerate() {
            var_edges[fill[v]] = e;
            fill[v] += 1;
        }

        let mut hasher = Sha256::new();
        hasher.update((m as u64).to_le_bytes());
        hasher.update((n as u64).to_le_bytes());
        for (&c, &v) in edge_check.iter().zip(&edge_var) {
            hasher.update((c as u64).to_le_bytes());
            hasher.update((v as u64).to_le_bytes());
        }
        let signature = hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();

        Ok(Self {
            m,
            n,
            edge_check,
            edge_var,
            check_ptr,
            var_ptr,
            var_edges,
            signature,
        })
    }

    /// Number of checks.
    pub fn m(&self) -> usize {
        self.m
    }

    /// Number of variables.
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edge_check.len()
    }

    /// `(check, variable)` of edge `e`.
    #[inline]
    pub fn edge(&self, e: usize) -> (usize, usize) {
        (self.edge_check[e], self.edge_var[e])
    }

    /// Edges of check `c`; contiguous because of the canonical order.
    #[inline]
    pub fn check_edges(&self, c: usize) -> std::ops::Range<usize> {
        self.check_ptr[c]..self.check_ptr[c + 1]
    }

    /// Edges of variable `v`, ascending.
    #[inline]
    pub fn var_edges(&self, v: usize) -> &[usize] {
        &self.var_edges[self.var_ptr[v]..self.var_ptr[v + 1]]
    }

    pub fn var_degree(&self, v: usize) -> usize {
        self.var_ptr[v + 1] - self.var_ptr[v]
    }

    pub fn check_degree(&self, c: usize) -> usize {
        self.check_ptr[c + 1] - self.check_ptr[c]
    }

    /// N(c) as variable indices.
    pub fn check_neighbors(&self, c: usize) -> Vec<usize> {
        self.check_edges(c).map(|e| self.edge_var[e]).collect()
    }

    /// N(v) as check indices.
    pub fn var_neighbors(&self, v: usize) -> Vec<usize> {
        self.var_edges(v).iter().map(|&e| self.edge_check[e]).collect()
    }

    pub fn edge_index(&self, c: usize, v: usize) -> Option<usize> {
        let range = self.check_edges(c);
        let start = range.start;
        self.edge_var[range]
            .binary_search(&v)
            .ok()
            .map(|i| start + i)
    }

    /// Hex SHA-256 of `(m, n, edge list)`.
    pub fn signature(&self) -> &str {
        &self.signature
    }

    /// `H e` for the matrix this graph encodes.
    pub fn syndrome_of(&self, error: &BitVector) -> Result<BitVector> {
        if error.len() != self.n {
            return Err(Error::DimensionMismatch(format!(
                "error of length {} on {} variables",
                error.len(),
                self.n
            )));
        }
        let mut s = BitVector::zeros(self.m);
        for c in 0..self.m {
            let parity = self
                .check_edges(c)
                .fold(false, |acc, e| acc ^ error.get(self.edge_var[e]));
            if parity {
                s.set(c, true);
            }
        }
        Ok(s)
    }
}

pub fn build_tanner(h: &BitMatrix) -> Result<TannerGraph> {
    TannerGraph::new(h)
}

/// Prior LLR `ln((1-p)/p)`.
pub fn prior_llr(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "error probability {p} outside (0, 1)"
        )));
    }
    Ok(((1.0 - p) / p).ln())
}

/// Fermi function `1 / (eˣ + 1)`, the probability of a flip given LLR `x`.
#[inline]
pub fn fermi_sigma(x: f64) -> f64 {
    if x >= 0.0 {
        let t = (-x).exp();
        t / (1.0 + t)
    } else {
        1.0 / (1.0 + x.exp())
    }
}

/// `φ(x) = -ln tanh(x/2) = ln(1 + 2/(eˣ - 1))` for `x ≥ 0`; `φ(0) = ∞`.
#[inline]
pub fn phi(x: f64) -> f64 {
    (2.0 / x.exp_m1()).ln_1p()
}

/// Lower bound on the `φ` sum corresponding to `|Π tanh| ≤ 1 - ε`.
#[inline]
pub fn phi_floor(clip: f64) -> f64 {
    -(-clip).ln_1p()
}

/// Check-to-variable update for one check.
///
/// `incoming[i]` is the v→c message on the check's i-th edge; `out[i]`
/// receives the extrinsic c→v message on that edge. Prefix/suffix sums keep
/// each extrinsic `φ` sum free of cancellation.
pub fn check_node_update(incoming: &[f64], syndrome_bit: bool, clip: f64, out: &mut [f64]) {
    let d = incoming.len();
    debug_assert_eq!(out.len(), d);
    let floor = phi_floor(clip);
    let mut negatives = usize::from(syndrome_bit);
    for &x in incoming {
        negatives += usize::from(x < 0.0);
    }
    // prefix φ sums stored in `out`, suffix accumulated on the way back.
    let mut acc = 0.0;
    for i in 0..d {
        out[i] = acc;
        acc += phi(incoming[i].abs());
    }
    let mut suffix = 0.0;
    for i in (0..d).rev() {
        let x = incoming[i];
        let s = (out[i] + suffix).max(floor);
        suffix += phi(x.abs());
        let neg = negatives - usize::from(x < 0.0);
        let mag = phi(s);
        out[i] = if neg % 2 == 1 { -mag } else { mag };
    }
}

/// Flooding message state, one value per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageState {
    pub vc: Vec<f64>,
    pub cv: Vec<f64>,
}

impl MessageState {
    pub fn new(graph: &TannerGraph) -> Self {
        Self {
            vc: vec![0.0; graph.num_edges()],
            cv: vec![0.0; graph.num_edges()],
        }
    }
}

/// `μ_{v→c} = l_v + Σ_{c' ∈ N(v)∖c} μ_{c'→v}`, from the current `cv`.
pub fn variable_to_check(state: &mut MessageState, priors: &[f64], graph: &TannerGraph) {
    for v in 0..graph.n() {
        let edges = graph.var_edges(v);
        for &e in edges {
            let mut acc = priors[v];
            for &other in edges {
                if other != e {
                    acc += state.cv[other];
                }
            }
            state.vc[e] = acc;
        }
    }
}

/// `μ_{c→v} = (-1)^{s_c} 2 atanh(Π_{v' ∈ N(c)∖v} tanh(μ_{v'→c}/2))`, clipped.
pub fn check_to_variable(
    state: &mut MessageState,
    syndrome: &[bool],
    graph: &TannerGraph,
    clip: f64,
) {
    for c in 0..graph.m() {
        let r = graph.check_edges(c);
        check_node_update(&state.vc[r.clone()], syndrome[c], clip, &mut state.cv[r]);
    }
}

/// `μ_v = l_v + Σ_{c ∈ N(v)} μ_{c→v}`.
pub fn marginalize(state: &MessageState, priors: &[f64], graph: &TannerGraph) -> Vec<f64> {
    (0..graph.n())
        .map(|v| {
            graph
                .var_edges(v)
                .iter()
                .fold(priors[v], |acc, &e| acc + state.cv[e])
        })
        .collect()
}

/// `e_v = 1` iff `μ_v < 0`; a tie decides 0.
pub fn hard_decision(marginals: &[f64]) -> BitVector {
    let mut e = BitVector::zeros(marginals.len());
    for (i, &m) in marginals.iter().enumerate() {
        if m < 0.0 {
            e.set(i, true);
        }
    }
    e
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult {
    #[serde(serialize_with = "serialize_support")]
    pub inferred: BitVector,
    pub marginals: Vec<f64>,
    pub iterations_used: usize,
    pub syndrome_matched: bool,
}

fn serialize_support<S: serde::Serializer>(
    v: &BitVector,
    s: S,
) -> std::result::Result<S::Ok, S::Error> {
    v.support().serialize(s)
}

fn check_inputs(graph: &TannerGraph, syndrome: &BitVector, priors: &[f64]) -> Result<Vec<bool>> {
    if syndrome.len() != graph.m() {
        return Err(Error::DimensionMismatch(format!(
            "syndrome of length {} for {} checks",
            syndrome.len(),
            graph.m()
        )));
    }
    if priors.len() != graph.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} priors for {} variables",
            priors.len(),
            graph.n()
        )));
    }
    Ok((0..syndrome.len()).map(|i| syndrome.get(i)).collect())
}

/// Runs `iterations` flooding iterations and returns the marginals after
/// each one.
pub fn bp_marginals_per_iteration(
    graph: &TannerGraph,
    syndrome: &BitVector,
    priors: &[f64],
    iterations: usize,
    clip: f64,
) -> Result<Vec<Vec<f64>>> {
    let s = check_inputs(graph, syndrome, priors)?;
    let mut state = MessageState::new(graph);
    let mut out = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        variable_to_check(&mut state, priors, graph);
        check_to_variable(&mut state, &s, graph, clip);
        out.push(marginalize(&state, priors, graph));
    }
    Ok(out)
}

/// Standard BP decoding. With `early_stop`, iteration halts as soon as the
/// provisional hard decision reproduces the syndrome.
pub fn bp_decode(
    graph: &TannerGraph,
    syndrome: &BitVector,
    priors: &[f64],
    iterations: usize,
    clip: f64,
    early_stop: bool,
) -> Result<DecodeResult> {
    if iterations == 0 {
        return Err(Error::InvalidParameter("BP needs at least one iteration".into()));
    }
    let s = check_inputs(graph, syndrome, priors)?;
    let mut state = MessageState::new(graph);
    let mut marginals = Vec::new();
    let mut used = 0;
    for _ in 0..iterations {
        variable_to_check(&mut state, priors, graph);
        check_to_variable(&mut state, &s, graph, clip);
        used += 1;
        if early_stop {
            marginals = marginalize(&state, priors, graph);
            if graph.syndrome_of(&hard_decision(&marginals))? == *syndrome {
                break;
            }
        }
    }
    if !early_stop {
        marginals = marginalize(&state, priors, graph);
    }
    let inferred = hard_decision(&marginals);
    let syndrome_matched = graph.syndrome_of(&inferred)? == *syndrome;
    Ok(DecodeResult {
        inferred,
        marginals,
        iterations_used: used,
        syndrome_matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::toric_code;
    use crate::gf2::in_rowspace;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn tanner_examples() {
        let h = BitMatrix::from_dense(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let g = TannerGraph::new(&h).unwrap();
        let edges: Vec<_> = (0..g.num_edges()).map(|e| g.edge(e)).collect();
        assert_eq!(edges, vec![(0, 0), (0, 1), (1, 1), (1, 2)]);
        assert_eq!(g.var_neighbors(1), vec![0, 1]);
        assert_eq!(g.check_neighbors(1), vec![1, 2]);
        assert_eq!(g.edge_index(1, 2), Some(3));
        assert_eq!(g.edge_index(0, 2), None);

        let t = toric_code(2).unwrap();
        let pg = TannerGraph::new(&t.b).unwrap();
        assert_eq!(pg.num_edges(), 16);
        assert!((0..pg.n()).all(|v| pg.var_degree(v) == 2));

        let id = TannerGraph::new(&BitMatrix::identity(3)).unwrap();
        assert!((0..3).all(|c| id.check_neighbors(c) == vec![c]));

        assert!(TannerGraph::new(&BitMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn graph_reproduces_matrix() {
        let t = toric_code(3).unwrap();
        let g = TannerGraph::new(&t.a).unwrap();
        for c in 0..g.m() {
            assert_eq!(g.check_neighbors(c), t.a.row_support(c));
        }
        for v in 0..g.n() {
            let expect: Vec<usize> = (0..t.a.rows()).filter(|&c| t.a.get(c, v)).collect();
            assert_eq!(g.var_neighbors(v), expect);
        }
        assert_ne!(g.signature(), TannerGraph::new(&t.b).unwrap().signature());
    }

    #[test]
    fn prior_llr_examples() {
        assert_eq!(prior_llr(0.5).unwrap(), 0.0);
        assert!(approx(prior_llr(0.01).unwrap(), 4.595_119_850_134_59, 1e-12));
        for p in [1e-6, 0.01, 0.2, 0.49, 0.9] {
            assert!(approx(fermi_sigma(prior_llr(p).unwrap()), p, 1e-12 * p.max(1e-3)));
        }
        assert!(prior_llr(0.0).is_err());
        assert!(prior_llr(1.0).is_err());
    }

    #[test]
    fn variable_to_check_examples() {
        // variable 0 on checks 0 and 1
        let h = BitMatrix::from_dense(&[vec![1, 1], vec![1, 0]]).unwrap();
        let g = TannerGraph::new(&h).unwrap();
        let mut st = MessageState::new(&g);
        let priors = [0.5, 0.7];
        variable_to_check(&mut st, &priors, &g);
        assert_eq!(st.vc, vec![0.5, 0.7, 0.5]);
        let e00 = g.edge_index(0, 0).unwrap();
        let e10 = g.edge_index(1, 0).unwrap();
        st.cv[e00] = 1.0;
        st.cv[e10] = -2.0;
        variable_to_check(&mut st, &priors, &g);
        assert_eq!(st.vc[e00], -1.5);
        // variable 1 has degree 1
        assert_eq!(st.vc[g.edge_index(0, 1).unwrap()], 0.7);
    }

    #[test]
    fn check_to_variable_examples() {
        let mut out = [0.0; 3];
        check_node_update(&[2.0, 2.0, 5.0], false, DEFAULT_CLIP, &mut out);
        let expect = 2.0 * (1.0f64.tanh().powi(2)).atanh();
        assert!(approx(out[2], expect, 1e-12));
        assert!(approx(expect, 1.325_002_747_357_864, 1e-12));
        check_node_update(&[2.0, 2.0, 5.0], true, DEFAULT_CLIP, &mut out);
        assert!(approx(out[2], -expect, 1e-12));
        check_node_update(&[0.0, 3.0, -4.0], false, DEFAULT_CLIP, &mut out);
        assert_eq!(out[1], 0.0);
        assert_eq!(out[2], 0.0);
        assert!(out[0] < 0.0);
    }

    #[test]
    fn check_update_matches_tanh_form() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let d = rng.gen_range(2..7);
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-6.0..6.0)).collect();
            let s = rng.gen_bool(0.5);
            let mut out = vec![0.0; d];
            check_node_update(&x, s, DEFAULT_CLIP, &mut out);
            for i in 0..d {
                let mut p: f64 = x
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, &y)| (y / 2.0).tanh())
                    .product();
                p = p.clamp(-1.0 + DEFAULT_CLIP, 1.0 - DEFAULT_CLIP);
                let expect = if s { -2.0 * p.atanh() } else { 2.0 * p.atanh() };
                assert!(approx(out[i], expect, 1e-9), "{} vs {}", out[i], expect);
            }
        }
    }

    #[test]
    fn clipping_bounds_messages() {
        let mut out = [0.0; 2];
        check_node_update(&[200.0, 300.0], false, DEFAULT_CLIP, &mut out);
        let bound = 2.0 * (1.0 - DEFAULT_CLIP).atanh();
        assert!(approx(out[0], bound, 1e-9));
        assert!(out.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn marginalize_examples() {
        let h = BitMatrix::from_dense(&[vec![1, 0], vec![1, 0]]).unwrap();
        let g = TannerGraph::new(&h).unwrap();
        let mut st = MessageState::new(&g);
        assert_eq!(marginalize(&st, &[1.0, 2.0], &g), vec![1.0, 2.0]);
        st.cv = vec![-0.5, -1.0];
        assert_eq!(marginalize(&st, &[1.0, 2.0], &g), vec![-0.5, 2.0]);
    }

    #[test]
    fn hard_decision_examples() {
        assert_eq!(hard_decision(&[3.1, -0.2]).to_bytes(), vec![0, 1]);
        assert_eq!(hard_decision(&[0.0]).to_bytes(), vec![0]);
        assert!(hard_decision(&[4.0; 5]).is_zero());
    }

    #[test]
    fn zero_syndrome_stops_after_one_iteration() {
        let t = toric_code(3).unwrap();
        let g = TannerGraph::new(&t.b).unwrap();
        let l = prior_llr(0.01).unwrap();
        let r = bp_decode(&g, &BitVector::zeros(g.m()), &vec![l; g.n()], 10, DEFAULT_CLIP, true)
            .unwrap();
        assert!(r.inferred.is_zero());
        assert!(r.syndrome_matched);
        assert_eq!(r.iterations_used, 1);
    }

    #[test]
    fn repetition_code_matches_exact_posterior() {
        let h = BitMatrix::from_dense(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let g = TannerGraph::new(&h).unwrap();
        let p: f64 = 0.1;
        let s = BitVector::from_bytes(&[1, 0]);
        let l = prior_llr(p).unwrap();
        let r = bp_decode(&g, &s, &[l; 3], 10, 0.0, false).unwrap();
        for v in 0..3 {
            let (mut p0, mut p1) = (0.0, 0.0);
            for bits in 0..8u8 {
                let e = BitVector::from_bytes(&[bits & 1, bits >> 1 & 1, bits >> 2 & 1]);
                if g.syndrome_of(&e).unwrap() != s {
                    continue;
                }
                let w = e.weight() as i32;
                let prob = p.powi(w) * (1.0 - p).powi(3 - w);
                if e.get(v) {
                    p1 += prob;
                } else {
                    p0 += prob;
                }
            }
            assert!(approx(r.marginals[v], (p0 / p1).ln(), 1e-10));
        }
    }

    #[test]
    fn single_toric_error_is_corrected_up_to_stabilizers() {
        // L = 3: on L = 2 the two weight-1 explanations differ by a logical
        // and BP cannot break the tie
        let t = toric_code(3).unwrap();
        let g = TannerGraph::new(&t.b).unwrap();
        let l = prior_llr(0.05).unwrap();
        for v in 0..18 {
            let e = BitVector::from_support(18, &[v]).unwrap();
            let s = g.syndrome_of(&e).unwrap();
            let r = bp_decode(&g, &s, &[l; 18], 20, DEFAULT_CLIP, true).unwrap();
            let total = r.inferred.xor(&e).unwrap();
            assert!(in_rowspace(&t.a, &total).unwrap());
        }

        let t = toric_code(2).unwrap();
        let g = TannerGraph::new(&t.b).unwrap();
        let e = BitVector::from_support(8, &[0]).unwrap();
        let s = g.syndrome_of(&e).unwrap();
        let r = bp_decode(&g, &s, &[l; 8], 20, DEFAULT_CLIP, true).unwrap();
        assert!(!r.syndrome_matched);
    }

    #[test]
    fn uniform_priors_give_equal_messages_on_torus() {
        let t = toric_code(4).unwrap();
        let g = TannerGraph::new(&t.b).unwrap();
        let mut st = MessageState::new(&g);
        let priors = vec![prior_llr(0.03).unwrap(); g.n()];
        for _ in 0..3 {
            variable_to_check(&mut st, &priors, &g);
            assert!(st.vc.iter().all(|&x| x == st.vc[0]));
            check_to_variable(&mut st, &vec![false; g.m()], &g, DEFAULT_CLIP);
        }
    }

    #[test]
    fn decode_is_deterministic_and_finite() {
        use rand::{Rng, SeedableRng};
        let t = toric_code(4).unwrap();
        let g = TannerGraph::new(&t.b).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..2000 {
            let e = BitVector::from_bools(&(0..g.n()).map(|_| rng.gen_bool(0.1)).collect::<Vec<_>>());
            let s = g.syndrome_of(&e).unwrap();
            let priors: Vec<f64> = (0..g.n()).map(|_| rng.gen_range(-3.0..8.0)).collect();
            let a = bp_decode(&g, &s, &priors, 15, DEFAULT_CLIP, false).unwrap();
            let b = bp_decode(&g, &s, &priors, 15, DEFAULT_CLIP, false).unwrap();
            assert_eq!(a, b);
            let bound = 2.0 * (1.0 - DEFAULT_CLIP).atanh() * 2.0 + priors.iter().map(|x| x.abs()).fold(0.0, f64::max);
            assert!(a.marginals.iter().all(|m| m.is_finite() && m.abs() <= bound));
        }
    }
}
