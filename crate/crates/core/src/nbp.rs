//! Neural belief propagation: BP unrolled for a fixed number of cycles with
//! trainable weights on the variable-to-check and marginalization layers.
//!
//! Cycle `t` computes
//!
//! ```text
//! μ_{v→c} = l_v b_v^(t) + Σ_{c'∈N(v)∖c} w^(t)_{c'v,vc} μ_{c'→v}   (+ previous μ_{v→c} if residual)
//! μ_{c→v} = (-1)^{s_c} 2 atanh(Π_{v'∈N(c)∖v} tanh(μ_{v'→c}/2))
//! μ_v     = l_v b_v + Σ_{c∈N(v)} w_{cv,v} μ_{c→v}
//! ```
//!
//! The check layer carries no parameters. One readout parameter set is shared
//! by every cycle's marginalization. With every parameter equal to one and no
//! residual, the forward pass performs exactly the floating-point operations
//! of [`crate::bp`].
//!
//! Parameters live in one flat vector in canonical order: for each cycle the
//! cvvc weights sorted by `(v, incoming edge, outgoing edge)` and then the
//! prior biases by `v`; after all cycles the readout weights by edge and the
//! readout biases by `v`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::bp::{check_node_update, hard_decision, TannerGraph, DEFAULT_CLIP};
use crate::codes::{toric_code, Orientation, ToricLattice};
use crate::gf2::BitVector;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Which block of the flat parameter vector an index falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// cvvc weight of cycle `cycle`, pair index `pair`.
    Cvvc { cycle: usize, pair: usize },
    PriorBias { cycle: usize, var: usize },
    MargWeight { edge: usize },
    MargBias { var: usize },
}

/// Translation-invariant description of a parameter on a toric lattice,
/// reduced modulo the tying period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ClassKey {
    Cvvc {
        cycle: usize,
        x: usize,
        y: usize,
        o: Orientation,
        role_in: u8,
        role_out: u8,
    },
    PriorBias {
        cycle: usize,
        x: usize,
        y: usize,
        o: Orientation,
    },
    MargWeight {
        x: usize,
        y: usize,
        o: Orientation,
        role: u8,
    },
    MargBias {
        x: usize,
        y: usize,
        o: Orientation,
    },
}

/// Lattice-translation tying of parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Sharing {
    pub period: (usize, usize),
    /// Class of every parameter.
    pub class_of: Vec<usize>,
    /// Key of every class, in class order.
    pub class_keys: Vec<ClassKey>,
}

impl Sharing {
    pub fn n_classes(&self) -> usize {
        self.class_keys.len()
    }
}

/// Unrolled network parameters for one Tanner graph.
#[derive(Debug, Clone, PartialEq)]
pub struct NbpModel {
    n_cycles: usize,
    residual: bool,
    clip: f64,
    graph_signature: String,
    n_vars: usize,
    n_edges: usize,
    /// `(incoming edge, outgoing edge)` in canonical order.
    pairs: Vec<(usize, usize)>,
    /// For each outgoing edge, its `(incoming edge, pair index)` list.
    out_ptr: Vec<usize>,
    out_pairs: Vec<(usize, usize)>,
    params: Vec<f64>,
    sharing: Option<Sharing>,
}

/// All intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub vc: Vec<Vec<f64>>,
    pub cv: Vec<Vec<f64>>,
    pub marginals: Vec<Vec<f64>>,
    pub syndrome: Vec<bool>,
    pub priors: Vec<f64>,
}

impl ForwardTrace {
    pub fn n_cycles(&self) -> usize {
        self.marginals.len()
    }

    pub fn final_marginals(&self) -> &[f64] {
        self.marginals.last().expect("at least one cycle")
    }

    pub fn inferred(&self) -> BitVector {
        hard_decision(self.final_marginals())
    }
}

impl NbpModel {
    /// Every weight and bias set to one.
    pub fn init_identity(graph: &TannerGraph, n_cycles: usize, residual: bool) -> Result<Self> {
        if n_cycles == 0 {
            return Err(Error::InvalidParameter("N_c must be at least 1".into()));
        }
        let mut pairs = Vec::new();
        for v in 0..graph.n() {
            let edges = graph.var_edges(v);
            for &ein in edges {
                for &eout in edges {
                    if ein != eout {
                        pairs.push((ein, eout));
                    }
                }
            }
        }
        let n_edges = graph.num_edges();
        let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_edges];
        for (k, &(ein, eout)) in pairs.iter().enumerate() {
            buckets[eout].push((ein, k));
        }
        let mut out_ptr = vec![0];
        let mut out_pairs = Vec::with_capacity(pairs.len());
        for b in buckets {
            out_pairs.extend(b);
            out_ptr.push(out_pairs.len());
        }
        let n_params = n_cycles * (pairs.len() + graph.n()) + n_edges + graph.n();
        Ok(Self {
            n_cycles,
            residual,
            clip: DEFAULT_CLIP,
            graph_signature: graph.signature().to_string(),
            n_vars: graph.n(),
            n_edges,
            pairs,
            out_ptr,
            out_pairs,
            params: vec![1.0; n_params],
            sharing: None,
        })
    }

    pub fn n_cycles(&self) -> usize {
        self.n_cycles
    }

    pub fn residual(&self) -> bool {
        self.residual
    }

    pub fn set_residual(&mut self, residual: bool) {
        self.residual = residual;
    }

    pub fn clip(&self) -> f64 {
        self.clip
    }

    pub fn set_clip(&mut self, clip: f64) {
        self.clip = clip;
    }

    pub fn graph_signature(&self) -> &str {
        &self.graph_signature
    }

    pub fn n_vars(&self) -> usize {
        self.n_vars
    }

    pub fn n_edges(&self) -> usize {
        self.n_edges
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    /// cvvc weights per cycle.
    pub fn cvvc_per_cycle(&self) -> usize {
        self.pairs.len()
    }

    fn cycle_stride(&self) -> usize {
        self.pairs.len() + self.n_vars
    }

    pub fn cvvc_offset(&self, cycle: usize) -> usize {
        cycle * self.cycle_stride()
    }

    pub fn bias_offset(&self, cycle: usize) -> usize {
        cycle * self.cycle_stride() + self.pairs.len()
    }

    pub fn marg_w_offset(&self) -> usize {
        self.n_cycles * self.cycle_stride()
    }

    pub fn marg_b_offset(&self) -> usize {
        self.marg_w_offset() + self.n_edges
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameters. Writes that break tying are the caller's problem;
    /// optimizers go through [`NbpModel::set_class_values`].
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn cvvc(&self, cycle: usize) -> &[f64] {
        let o = self.cvvc_offset(cycle);
        &self.params[o..o + self.pairs.len()]
    }

    pub fn prior_bias(&self, cycle: usize) -> &[f64] {
        let o = self.bias_offset(cycle);
        &self.params[o..o + self.n_vars]
    }

    pub fn marg_w(&self) -> &[f64] {
        let o = self.marg_w_offset();
        &self.params[o..o + self.n_edges]
    }

    pub fn marg_b(&self) -> &[f64] {
        let o = self.marg_b_offset();
        &self.params[o..o + self.n_vars]
    }

    /// Incoming `(edge, pair index)` list for outgoing edge `e`.
    #[inline]
    pub fn incoming_pairs(&self, e: usize) -> &[(usize, usize)] {
        &self.out_pairs[self.out_ptr[e]..self.out_ptr[e + 1]]
    }

    pub fn param_kind(&self, index: usize) -> ParamKind {
        let stride = self.cycle_stride();
        if index < self.marg_w_offset() {
            let cycle = index / stride;
            let r = index % stride;
            if r < self.pairs.len() {
                ParamKind::Cvvc { cycle, pair: r }
            } else {
                ParamKind::PriorBias {
                    cycle,
                    var: r - self.pairs.len(),
                }
            }
        } else if index < self.marg_b_offset() {
            ParamKind::MargWeight {
                edge: index - self.marg_w_offset(),
            }
        } else {
            ParamKind::MargBias {
                var: index - self.marg_b_offset(),
            }
        }
    }

    pub fn sharing(&self) -> Option<&Sharing> {
        self.sharing.as_ref()
    }

    /// Number of independent trainable values.
    pub fn n_classes(&self) -> usize {
        self.sharing
            .as_ref()
            .map_or(self.params.len(), Sharing::n_classes)
    }

    /// Parameter index to class index (identity when untied).
    #[inline]
    pub fn class_of(&self, index: usize) -> usize {
        self.sharing.as_ref().map_or(index, |s| s.class_of[index])
    }

    /// Sums per-parameter values into their classes.
    pub fn reduce_to_classes(&self, per_param: &[f64]) -> Vec<f64> {
        match &self.sharing {
            None => per_param.to_vec(),
            Some(s) => {
                let mut out = vec![0.0; s.n_classes()];
                for (i, &g) in per_param.iter().enumerate() {
                    out[s.class_of[i]] += g;
                }
                out
            }
        }
    }

    /// Current value of every class (the value of its first member).
    pub fn class_values(&self) -> Vec<f64> {
        match &self.sharing {
            None => self.params.clone(),
            Some(s) => {
                let mut out = vec![f64::NAN; s.n_classes()];
                for (i, &c) in s.class_of.iter().enumerate().rev() {
                    out[c] = self.params[i];
                }
                out
            }
        }
    }

    /// Writes class values back to every member.
    pub fn set_class_values(&mut self, values: &[f64]) {
        match &self.sharing {
            None => self.params.copy_from_slice(values),
            Some(s) => {
                for (p, &c) in self.params.iter_mut().zip(&s.class_of) {
                    *p = values[c];
                }
            }
        }
    }

    pub fn check_graph(&self, graph: &TannerGraph) -> Result<()> {
        if graph.signature() != self.graph_signature {
            return Err(Error::SignatureMismatch {
                model: self.graph_signature.clone(),
                graph: graph.signature().to_string(),
            });
        }
        Ok(())
    }

    /// Runs all cycles, keeping every intermediate message.
    pub fn forward(
        &self,
        graph: &TannerGraph,
        syndrome: &BitVector,
        priors: &[f64],
    ) -> Result<ForwardTrace> {
        self.check_graph(graph)?;
        if syndrome.len() != graph.m() || priors.len() != graph.n() {
            return Err(Error::DimensionMismatch(format!(
                "syndrome {} / priors {} for a {}x{} graph",
                syndrome.len(),
                priors.len(),
                graph.m(),
                graph.n()
            )));
        }
        let s: Vec<bool> = (0..graph.m()).map(|c| syndrome.get(c)).collect();
        let ne = self.n_edges;
        let mut trace = ForwardTrace {
            vc: Vec::with_capacity(self.n_cycles),
            cv: Vec::with_capacity(self.n_cycles),
            marginals: Vec::with_capacity(self.n_cycles),
            syndrome: s,
            priors: priors.to_vec(),
        };
        let zeros = vec![0.0; ne];
        let marg_w = self.marg_w();
        let marg_b = self.marg_b();
        for t in 0..self.n_cycles {
            let cv_prev = trace.cv.last().unwrap_or(&zeros);
            let vc_prev = trace.vc.last().unwrap_or(&zeros);
            let w = self.cvvc(t);
            let b = self.prior_bias(t);
            let mut vc = vec![0.0; ne];
            for (e, out) in vc.iter_mut().enumerate() {
                let (_, v) = graph.edge(e);
                let mut acc = priors[v] * b[v];
                for &(ein, k) in self.incoming_pairs(e) {
                    acc += cv_prev[ein] * w[k];
                }
                if self.residual {
                    acc += vc_prev[e];
                }
                *out = acc;
            }
            let mut cv = vec![0.0; ne];
            for c in 0..graph.m() {
                let r = graph.check_edges(c);
                check_node_update(&vc[r.clone()], trace.syndrome[c], self.clip, &mut cv[r]);
            }
            let marginals: Vec<f64> = (0..graph.n())
                .map(|v| {
                    graph
                        .var_edges(v)
                        .iter()
                        .fold(priors[v] * marg_b[v], |acc, &e| acc + cv[e] * marg_w[e])
                })
                .collect();
            trace.vc.push(vc);
            trace.cv.push(cv);
            trace.marginals.push(marginals);
        }
        Ok(trace)
    }

    /// Hard decision from the final cycle's marginals.
    pub fn decode(&self, graph: &TannerGraph, syndrome: &BitVector, priors: &[f64]) -> Result<BitVector> {
        Ok(self.forward(graph, syndrome, priors)?.inferred())
    }
}

fn lattice_matches(graph: &TannerGraph, lattice: &ToricLattice) -> bool {
    graph.n() == lattice.num_edges()
        && graph.m() == lattice.num_sites()
        && (0..graph.n()).all(|v| graph.var_degree(v) == 2)
}

fn check_period(lattice: &ToricLattice, period: (usize, usize)) -> Result<()> {
    let (gx, gy) = period;
    if gx == 0 || gy == 0 || lattice.l % gx != 0 || lattice.l % gy != 0 {
        return Err(Error::InvalidParameter(format!(
            "period ({gx}, {gy}) does not divide L = {}",
            lattice.l
        )));
    }
    Ok(())
}

/// Class key of every parameter of `model` on a toric sector graph.
fn class_keys(
    model: &NbpModel,
    graph: &TannerGraph,
    lattice: &ToricLattice,
    period: (usize, usize),
) -> Vec<ClassKey> {
    let (gx, gy) = period;
    let coord = |e: usize| {
        let (_, v) = graph.edge(e);
        let (x, y, o) = lattice.edge_coord(v);
        (x % gx, y % gy, o)
    };
    let var_coord = |v: usize| {
        let (x, y, o) = lattice.edge_coord(v);
        (x % gx, y % gy, o)
    };
    let role = |e: usize| {
        let (c, v) = graph.edge(e);
        lattice.check_role(v, c)
    };
    (0..model.n_params())
        .map(|i| match model.param_kind(i) {
            ParamKind::Cvvc { cycle, pair } => {
                let (ein, eout) = model.pairs[pair];
                let (x, y, o) = coord(eout);
                ClassKey::Cvvc {
                    cycle,
                    x,
                    y,
                    o,
                    role_in: role(ein),
                    role_out: role(eout),
                }
            }
            ParamKind::PriorBias { cycle, var } => {
                let (x, y, o) = var_coord(var);
                ClassKey::PriorBias { cycle, x, y, o }
            }
            ParamKind::MargWeight { edge } => {
                let (x, y, o) = coord(edge);
                ClassKey::MargWeight {
                    x,
                    y,
                    o,
                    role: role(edge),
                }
            }
            ParamKind::MargBias { var } => {
                let (x, y, o) = var_coord(var);
                ClassKey::MargBias { x, y, o }
            }
        })
        .collect()
}

fn build_sharing(
    model: &NbpModel,
    graph: &TannerGraph,
    lattice: &ToricLattice,
    period: (usize, usize),
) -> Result<Sharing> {
    model.check_graph(graph)?;
    if !lattice_matches(graph, lattice) {
        return Err(Error::InvalidParameter(
            "weight tying needs a toric sector graph matching the lattice".into(),
        ));
    }
    check_period(lattice, period)?;
    let keys = class_keys(model, graph, lattice, period);
    let mut index: HashMap<ClassKey, usize> = HashMap::new();
    let mut class_keys = Vec::new();
    let class_of = keys
        .into_iter()
        .map(|k| {
            *index.entry(k).or_insert_with(|| {
                class_keys.push(k);
                class_keys.len() - 1
            })
        })
        .collect();
    Ok(Sharing {
        period,
        class_of,
        class_keys,
    })
}

/// Ties parameters related by lattice translations of `period`. Each class
/// takes the value of its first member in canonical order, which is the
/// member with the smallest lattice coordinates.
pub fn tie_weights_toric(
    model: &NbpModel,
    graph: &TannerGraph,
    lattice: &ToricLattice,
    period: (usize, usize),
) -> Result<NbpModel> {
    let sharing = build_sharing(model, graph, lattice, period)?;
    let mut values = vec![f64::NAN; sharing.n_classes()];
    for (i, &c) in sharing.class_of.iter().enumerate().rev() {
        values[c] = model.params[i];
    }
    let mut tied = model.clone();
    tied.sharing = Some(sharing);
    tied.set_class_values(&values);
    Ok(tied)
}

/// Instantiates a tied model on another lattice size by tiling its class
/// values.
pub fn retarget_tied_model(
    model: &NbpModel,
    new_graph: &TannerGraph,
    new_lattice: &ToricLattice,
) -> Result<NbpModel> {
    let sharing = model.sharing.as_ref().ok_or_else(|| {
        Error::InvalidParameter("retargeting needs a model tied with a lattice period".into())
    })?;
    let period = sharing.period;
    check_period(new_lattice, period)?;
    let values = model.class_values();
    let by_key: HashMap<ClassKey, f64> = sharing
        .class_keys
        .iter()
        .copied()
        .zip(values)
        .collect();
    let mut target = NbpModel::init_identity(new_graph, model.n_cycles, model.residual)?;
    target.clip = model.clip;
    let new_sharing = build_sharing(&target, new_graph, new_lattice, period)?;
    let mut new_values = Vec::with_capacity(new_sharing.n_classes());
    for key in &new_sharing.class_keys {
        let v = by_key.get(key).ok_or_else(|| {
            Error::InvalidParameter(format!("class {key:?} missing from the source model"))
        })?;
        new_values.push(*v);
    }
    target.sharing = Some(new_sharing);
    target.set_class_values(&new_values);
    Ok(target)
}

fn fmt_f64(out: &mut String, x: f64) {
    write!(out, "{x:.16e}").expect("write to string");
}

fn fmt_array(out: &mut String, xs: &[f64]) {
    out.push('[');
    for (i, &x) in xs.iter().enumerate() {
        if i > 0 {
            out.push(',');
        }
        fmt_f64(out, x);
    }
    out.push(']');
}

/// Checkpoint JSON text. Floats carry 17 significant digits.
pub fn checkpoint_json(model: &NbpModel) -> Result<String> {
    if let Some(i) = model.params.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("parameter {i} is not finite")));
    }
    let mut s = String::new();
    s.push_str("{\n");
    writeln!(s, "  \"version\": {CHECKPOINT_VERSION},").unwrap();
    writeln!(s, "  \"graph_signature\": \"{}\",", model.graph_signature).unwrap();
    writeln!(s, "  \"n_cycles\": {},", model.n_cycles).unwrap();
    writeln!(s, "  \"residual\": {},", model.residual).unwrap();
    match &model.sharing {
        None => s.push_str("  \"sharing\": null,\n"),
        Some(sh) => writeln!(
            s,
            "  \"sharing\": {{\"period\": [{}, {}]}},",
            sh.period.0, sh.period.1
        )
        .unwrap(),
    }
    s.push_str("  \"params\": {\n    \"cvvc\": [");
    for t in 0..model.n_cycles {
        if t > 0 {
            s.push(',');
        }
        s.push_str("\n      ");
        fmt_array(&mut s, model.cvvc(t));
    }
    s.push_str("\n    ],\n    \"prior_bias\": [");
    for t in 0..model.n_cycles {
        if t > 0 {
            s.push(',');
        }
        s.push_str("\n      ");
        fmt_array(&mut s, model.prior_bias(t));
    }
    s.push_str("\n    ],\n    \"marg_w\": ");
    fmt_array(&mut s, model.marg_w());
    s.push_str(",\n    \"marg_b\": ");
    fmt_array(&mut s, model.marg_b());
    s.push_str("\n  }\n}\n");
    Ok(s)
}

pub fn save_checkpoint(model: &NbpModel, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_json(model)?)?;
    Ok(())
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SharingFile {
    period: (usize, usize),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsFile {
    cvvc: Vec<Vec<f64>>,
    prior_bias: Vec<Vec<f64>>,
    marg_w: Vec<f64>,
    marg_b: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    version: u32,
    graph_signature: String,
    n_cycles: usize,
    residual: bool,
    sharing: Option<SharingFile>,
    params: ParamsFile,
}

/// Rebuilds the sector graph a toric checkpoint was trained on, if `graph`
/// is a toric sector graph and the parameter counts identify a lattice size.
fn source_toric_graph(
    file: &CheckpointFile,
    graph: &TannerGraph,
    lattice: &ToricLattice,
) -> Result<(TannerGraph, ToricLattice)> {
    let code = toric_code(lattice.l)?;
    let plaquette = TannerGraph::new(&code.b)?;
    let use_plaquettes = plaquette.signature() == graph.signature();
    let n_old = file.params.marg_b.len();
    let l_old = ((n_old / 2) as f64).sqrt().round() as usize;
    if l_old < 2 || 2 * l_old * l_old != n_old {
        return Err(Error::Format(format!(
            "checkpoint with {n_old} variables is not a toric sector"
        )));
    }
    let old_code = toric_code(l_old)?;
    let old_graph = TannerGraph::new(if use_plaquettes { &old_code.b } else { &old_code.a })?;
    if old_graph.signature() != file.graph_signature {
        return Err(Error::SignatureMismatch {
            model: file.graph_signature.clone(),
            graph: old_graph.signature().to_string(),
        });
    }
    Ok((old_graph, ToricLattice::new(l_old)))
}

/// Parses a checkpoint for `graph`.
///
/// `lattice` is needed when the checkpoint is tied. With `retarget`, a tied
/// checkpoint trained on another toric size is tiled onto `graph`.
pub fn load_checkpoint_str(
    text: &str,
    graph: &TannerGraph,
    lattice: Option<&ToricLattice>,
    retarget: bool,
) -> Result<NbpModel> {
    let file: CheckpointFile =
        serde_json::from_str(text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let (source_graph, source_lattice) = if file.graph_signature == graph.signature() {
        (graph.clone(), lattice.copied())
    } else if retarget {
        let lattice = lattice.ok_or_else(|| {
            Error::InvalidParameter("retargeting needs a toric code".into())
        })?;
        if file.sharing.is_none() {
            return Err(Error::InvalidParameter(
                "only tied checkpoints can be retargeted".into(),
            ));
        }
        let (g, l) = source_toric_graph(&file, graph, lattice)?;
        (g, Some(l))
    } else {
        return Err(Error::SignatureMismatch {
            model: file.graph_signature.clone(),
            graph: graph.signature().to_string(),
        });
    };

    let mut model = NbpModel::init_identity(&source_graph, file.n_cycles, file.residual)?;
    let p = &file.params;
    let shape_ok = p.cvvc.len() == file.n_cycles
        && p.prior_bias.len() == file.n_cycles
        && p.cvvc.iter().all(|c| c.len() == model.pairs.len())
        && p.prior_bias.iter().all(|b| b.len() == model.n_vars)
        && p.marg_w.len() == model.n_edges
        && p.marg_b.len() == model.n_vars;
    if !shape_ok {
        return Err(Error::Format("parameter arrays do not match the graph".into()));
    }
    let mut flat = Vec::with_capacity(model.n_params());
    for t in 0..file.n_cycles {
        flat.extend_from_slice(&p.cvvc[t]);
        flat.extend_from_slice(&p.prior_bias[t]);
    }
    flat.extend_from_slice(&p.marg_w);
    flat.extend_from_slice(&p.marg_b);
    model.params = flat;

    if let Some(sh) = &file.sharing {
        let lat = source_lattice.ok_or_else(|| {
            Error::InvalidParameter("tied checkpoint needs a toric lattice".into())
        })?;
        let sharing = build_sharing(&model, &source_graph, &lat, sh.period)?;
        for (i, &c) in sharing.class_of.iter().enumerate() {
            let first = sharing.class_of.iter().position(|&x| x == c).unwrap();
            if model.params[i] != model.params[first] {
                return Err(Error::Format(format!(
                    "parameter {i} breaks tying class {c}"
                )));
            }
        }
        model.sharing = Some(sharing);
    }

    if source_graph.signature() != graph.signature() {
        let lat = lattice.expect("checked above");
        model = retarget_tied_model(&model, graph, lat)?;
    }
    Ok(model)
}

pub fn load_checkpoint(
    path: &Path,
    graph: &TannerGraph,
    lattice: Option<&ToricLattice>,
    retarget: bool,
) -> Result<NbpModel> {
    let text = std::fs::read_to_string(path)?;
    load_checkpoint_str(&text, graph, lattice, retarget)
}
