//! Losses, reverse-mode gradients through the unrolled network, optimizers
//! and the training loop.
//!
//! The degeneracy-aware loss is
//!
//! ```text
//! L(μ; e) = Σ_i f( Σ_k G_ik (e_k + σ(μ_k)) ),   f(x) = |sin(πx/2)|
//! ```
//!
//! where the rows of `G` are the sector rows of `H⊥ M` (see
//! [`crate::sector`]). It vanishes when `e + e_inf` is a stabilizer, so a
//! decoder is not penalized for returning a degenerate correction. The
//! classical alternative is the binary cross entropy against `e` itself.
//!
//! Gradients are computed by hand: the forward trace keeps every message and
//! [`backward`] walks the cycles in reverse. Clipped check outputs and the
//! kinks of `f` get a zero (sub)gradient.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bp::{phi, phi_floor, prior_llr, TannerGraph};
pub use crate::bp::fermi_sigma;
use crate::codes::CssCode;
use crate::eval::{monte_carlo, sample_error, Decoder, DecodingSetup};
use crate::gf2::{BitMatrix, BitVector};
use crate::nbp::{save_checkpoint, tie_weights_toric, ForwardTrace, NbpModel};
use crate::sector::{Sector, SectorData, SectorPolicy};
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Floor applied to probabilities inside the logarithms of the BCE loss.
pub const BCE_FLOOR: f64 = 1e-30;

/// Smooth parity `f(x) = |sin(πx/2)|`: 0 on even integers, 1 on odd ones.
///
/// Evaluated on the reduced argument `r = x - 2 round(x/2) ∈ [-1, 1]`, so
/// even integers give exactly zero.
pub fn smooth_parity(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).round();
    (PI * r / 2.0).sin().abs()
}

/// Derivative of [`smooth_parity`], taken as 0 at the kinks.
pub fn smooth_parity_grad(x: f64) -> f64 {
    let r = x - 2.0 * (x / 2.0).round();
    if r == 0.0 {
        0.0
    } else {
        r.signum() * (PI / 2.0) * (PI * r / 2.0).cos()
    }
}

/// `dσ/dx = -σ(x)(1 - σ(x))`.
#[inline]
fn fermi_sigma_grad(x: f64) -> f64 {
    -fermi_sigma(x) * fermi_sigma(-x)
}

fn check_lengths(marginals: &[f64], error: &BitVector) -> Result<()> {
    if marginals.len() != error.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} marginals for an error of length {}",
            marginals.len(),
            error.len()
        )));
    }
    Ok(())
}

/// Which cycles enter the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    FinalCycle,
    CycleAveraged,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossTarget {
    Degeneracy,
    ClassicalBce,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default = "default_loss_kind")]
    pub kind: LossKind,
    #[serde(default = "default_loss_target")]
    pub target: LossTarget,
    /// Multiplies the whole loss.
    #[serde(default = "one")]
    pub scale: f64,
}

fn default_loss_kind() -> LossKind {
    LossKind::CycleAveraged
}

fn default_loss_target() -> LossTarget {
    LossTarget::Degeneracy
}

fn one() -> f64 {
    1.0
}

impl Default for LossSpec {
    fn default() -> Self {
        Self {
            kind: LossKind::CycleAveraged,
            target: LossTarget::Degeneracy,
            scale: 1.0,
        }
    }
}

/// A [`LossSpec`] bound to a sector's loss matrix.
#[derive(Debug, Clone)]
pub struct Loss {
    pub spec: LossSpec,
    rows: Vec<Vec<usize>>,
    n: usize,
}

impl Loss {
    pub fn new(spec: LossSpec, loss_matrix: &BitMatrix) -> Self {
        Self {
            spec,
            rows: (0..loss_matrix.rows())
                .map(|r| loss_matrix.row_support(r))
                .collect(),
            n: loss_matrix.cols(),
        }
    }

    pub fn for_sector(spec: LossSpec, sector: &SectorData) -> Self {
        Self::new(spec, &sector.loss_matrix)
    }

    /// Loss of one marginal vector and its gradient.
    fn value_and_grad(&self, marginals: &[f64], error: &BitVector) -> (f64, Vec<f64>) {
        let (l, mut g) = match self.spec.target {
            LossTarget::Degeneracy => degeneracy_terms(marginals, error, &self.rows),
            LossTarget::ClassicalBce => bce_terms(marginals, error),
        };
        for x in &mut g {
            *x *= self.spec.scale;
        }
        (l * self.spec.scale, g)
    }

    fn value(&self, marginals: &[f64], error: &BitVector) -> f64 {
        self.value_and_grad(marginals, error).0
    }
}

fn degeneracy_terms(marginals: &[f64], error: &BitVector, rows: &[Vec<usize>]) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut dz = vec![0.0; marginals.len()];
    for row in rows {
        let z: f64 = row
            .iter()
            .map(|&k| f64::from(u8::from(error.get(k))) + fermi_sigma(marginals[k]))
            .sum();
        loss += smooth_parity(z);
        let fz = smooth_parity_grad(z);
        if fz != 0.0 {
            for &k in row {
                dz[k] += fz;
            }
        }
    }
    let grad = dz
        .iter()
        .zip(marginals)
        .map(|(&d, &m)| if d == 0.0 { 0.0 } else { d * fermi_sigma_grad(m) })
        .collect();
    (loss, grad)
}

fn bce_terms(marginals: &[f64], error: &BitVector) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut grad = vec![0.0; marginals.len()];
    for (v, &m) in marginals.iter().enumerate() {
        let p1 = fermi_sigma(m);
        let p0 = fermi_sigma(-m);
        if error.get(v) {
            loss -= p1.max(BCE_FLOOR).ln();
            if p1 > BCE_FLOOR {
                grad[v] = p0;
            }
        } else {
            loss -= p0.max(BCE_FLOOR).ln();
            if p0 > BCE_FLOOR {
                grad[v] = -p1;
            }
        }
    }
    (loss, grad)
}

/// `Σ_i f(Σ_k G_ik (e_k + σ(μ_k)))` with the sums taken over the reals.
pub fn degeneracy_loss(marginals: &[f64], error: &BitVector, loss_matrix: &BitMatrix) -> Result<f64> {
    check_lengths(marginals, error)?;
    if loss_matrix.cols() != marginals.len() {
        return Err(Error::DimensionMismatch(format!(
            "loss matrix with {} columns for {} marginals",
            loss_matrix.cols(),
            marginals.len()
        )));
    }
    let rows: Vec<Vec<usize>> = (0..loss_matrix.rows())
        .map(|r| loss_matrix.row_support(r))
        .collect();
    Ok(degeneracy_terms(marginals, error, &rows).0)
}

/// Binary cross entropy of the marginals against the true error.
pub fn classical_bce_loss(marginals: &[f64], error: &BitVector) -> Result<f64> {
    check_lengths(marginals, error)?;
    Ok(bce_terms(marginals, error).0)
}

fn cycle_weights(kind: LossKind, n_cycles: usize) -> Vec<f64> {
    match kind {
        LossKind::FinalCycle => {
            let mut w = vec![0.0; n_cycles];
            w[n_cycles - 1] = 1.0;
            w
        }
        LossKind::CycleAveraged => vec![1.0 / n_cycles as f64; n_cycles],
    }
}

/// Loss of a forward trace: the final cycle's loss or the mean over cycles.
pub fn cycle_loss(trace: &ForwardTrace, error: &BitVector, loss: &Loss) -> Result<f64> {
    check_lengths(trace.final_marginals(), error)?;
    if loss.n != error.len() {
        return Err(Error::DimensionMismatch("loss matrix / error length".into()));
    }
    Ok(match loss.spec.kind {
        LossKind::FinalCycle => loss.value(trace.final_marginals(), error),
        LossKind::CycleAveraged => {
            let sum: f64 = trace.marginals.iter().map(|m| loss.value(m, error)).sum();
            sum / trace.n_cycles() as f64
        }
    })
}

/// Accumulates `∂L/∂x` for one check given `∂L/∂y` of its outputs.
///
/// `y_i = (-1)^s Π_{j≠i} sgn(x_j) · φ(max(S_i, floor))`, `S_i = Σ_{j≠i} φ(|x_j|)`,
/// so `∂y_i/∂x_j = ±1 / (sinh(S_i) sinh(|x_j|))` off the clip. A zero input
/// makes `φ` infinite; its derivative is taken from the product form,
/// `(-1)^s Π_{k≠i,j} tanh(x_k/2)`.
fn check_node_backward(x: &[f64], syndrome_bit: bool, clip: f64, dy: &[f64], dx: &mut [f64]) {
    let d = x.len();
    let floor = phi_floor(clip);
    let phis: Vec<f64> = x.iter().map(|v| phi(v.abs())).collect();
    let mut negatives = usize::from(syndrome_bit);
    for &v in x {
        negatives += usize::from(v < 0.0);
    }
    let mut prefix = vec![0.0; d + 1];
    for i in 0..d {
        prefix[i + 1] = prefix[i] + phis[i];
    }
    let mut suffix = vec![0.0; d + 1];
    for i in (0..d).rev() {
        suffix[i] = suffix[i + 1] + phis[i];
    }
    for i in 0..d {
        if dy[i] == 0.0 {
            continue;
        }
        let s_i = prefix[i] + suffix[i + 1];
        if !(s_i > floor) {
            continue;
        }
        let sign_i = if (negatives - usize::from(x[i] < 0.0)) % 2 == 1 {
            -1.0
        } else {
            1.0
        };
        let inv_sinh_s = 1.0 / s_i.sinh();
        for j in 0..d {
            if j == i {
                continue;
            }
            let deriv = if phis[j].is_finite() {
                let sign_j = if x[j] < 0.0 { -1.0 } else { 1.0 };
                sign_i * sign_j * inv_sinh_s / x[j].abs().sinh()
            } else {
                let mut prod = if syndrome_bit { -1.0 } else { 1.0 };
                for k in 0..d {
                    if k != i && k != j {
                        prod *= (x[k] / 2.0).tanh();
                    }
                }
                prod
            };
            dx[j] += dy[i] * deriv;
        }
    }
}

/// Exact gradient of [`cycle_loss`] with respect to every model parameter
/// (one entry per parameter; tied classes are reduced by the optimizer via
/// [`NbpModel::reduce_to_classes`]). Returns `(loss, gradient)`.
pub fn backward(
    trace: &ForwardTrace,
    model: &NbpModel,
    graph: &TannerGraph,
    error: &BitVector,
    loss: &Loss,
) -> Result<(f64, Vec<f64>)> {
    model.check_graph(graph)?;
    if trace.n_cycles() != model.n_cycles()
        || trace.priors.len() != graph.n()
        || trace.vc.iter().any(|v| v.len() != graph.num_edges())
    {
        return Err(Error::DimensionMismatch(
            "trace was not produced by this model".into(),
        ));
    }
    check_lengths(trace.final_marginals(), error)?;
    if loss.n != error.len() {
        return Err(Error::DimensionMismatch("loss matrix / error length".into()));
    }

    let n_cycles = model.n_cycles();
    let ne = graph.num_edges();
    let priors = &trace.priors;
    let weights = cycle_weights(loss.spec.kind, n_cycles);
    let mut grad = vec![0.0; model.n_params()];
    let mw_off = model.marg_w_offset();
    let mb_off = model.marg_b_offset();
    let marg_w = model.marg_w();

    let mut total = 0.0;
    // gradients flowing into cv_t and vc_t from later cycles
    let mut d_cv = vec![0.0; ne];
    let mut d_vc_carry = vec![0.0; ne];
    let mut d_vc = vec![0.0; ne];
    let zeros = vec![0.0; ne];

    for t in (0..n_cycles).rev() {
        let alpha = weights[t];
        if alpha != 0.0 {
            let (l, g_mu) = loss.value_and_grad(&trace.marginals[t], error);
            total += alpha * l;
            for v in 0..graph.n() {
                let g = alpha * g_mu[v];
                if g == 0.0 {
                    continue;
                }
                grad[mb_off + v] += g * priors[v];
                for &e in graph.var_edges(v) {
                    grad[mw_off + e] += g * trace.cv[t][e];
                    d_cv[e] += g * marg_w[e];
                }
            }
        }

        d_vc.copy_from_slice(&d_vc_carry);
        for c in 0..graph.m() {
            let r = graph.check_edges(c);
            check_node_backward(
                &trace.vc[t][r.clone()],
                trace.syndrome[c],
                model.clip(),
                &d_cv[r.clone()],
                &mut d_vc[r],
            );
        }

        // vc_t = l b_t + Σ w_t cv_{t-1} (+ vc_{t-1})
        let cv_prev = if t > 0 { &trace.cv[t - 1] } else { &zeros };
        let w = model.cvvc(t);
        let w_off = model.cvvc_offset(t);
        let b_off = model.bias_offset(t);
        d_cv.iter_mut().for_each(|x| *x = 0.0);
        for e in 0..ne {
            let g = d_vc[e];
            if g == 0.0 {
                continue;
            }
            let (_, v) = graph.edge(e);
            grad[b_off + v] += g * priors[v];
            for &(ein, k) in model.incoming_pairs(e) {
                grad[w_off + k] += g * cv_prev[ein];
                d_cv[ein] += g * w[k];
            }
        }
        if model.residual() {
            d_vc_carry.copy_from_slice(&d_vc);
        }
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_optimizer")]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
}

fn default_optimizer() -> OptimizerKind {
    OptimizerKind::Sgd
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-class optimizer accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimState {
    pub fn new(model: &NbpModel) -> Self {
        let n = model.n_classes();
        Self {
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

fn class_grads(model: &NbpModel, grads: &[f64]) -> Result<Vec<f64>> {
    if grads.len() != model.n_params() {
        return Err(Error::DimensionMismatch(format!(
            "{} gradients for {} parameters",
            grads.len(),
            model.n_params()
        )));
    }
    Ok(model.reduce_to_classes(grads))
}

/// `θ ← θ - lr g`, one update per tying class.
pub fn sgd_step(model: &mut NbpModel, grads: &[f64], lr: f64) -> Result<()> {
    let g = class_grads(model, grads)?;
    let mut values = model.class_values();
    for (x, gi) in values.iter_mut().zip(&g) {
        *x -= lr * gi;
    }
    model.set_class_values(&values);
    Ok(())
}

/// Bias-corrected first/second-moment update, one per tying class.
pub fn adam_step(
    model: &mut NbpModel,
    grads: &[f64],
    state: &mut OptimState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let g = class_grads(model, grads)?;
    if state.m.len() != g.len() {
        return Err(Error::DimensionMismatch("optimizer state / model classes".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let mut values = model.class_values();
    for i in 0..g.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    model.set_class_values(&values);
    Ok(())
}

pub fn optimizer_step(
    model: &mut NbpModel,
    grads: &[f64],
    state: &mut OptimState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    match cfg.kind {
        OptimizerKind::Sgd => {
            state.step += 1;
            sgd_step(model, grads, cfg.lr)
        }
        OptimizerKind::Adam => adam_step(model, grads, state, cfg),
    }
}

/// One training example.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub p: f64,
    pub error: BitVector,
    pub syndrome: BitVector,
    pub priors: Vec<f64>,
}

/// `per_rate` i.i.d. Bernoulli(p) errors for each rate, in rate order.
pub fn sample_minibatch(
    sector: &SectorData,
    rates: &[f64],
    per_rate: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Sample>> {
    let n = sector.n();
    let mut out = Vec::with_capacity(rates.len() * per_rate);
    for &p in rates {
        let llr = prior_llr(p)?;
        for _ in 0..per_rate {
            let error = sample_error(n, p, rng);
            let syndrome = sector.syndrome(&error)?;
            out.push(Sample {
                p,
                error,
                syndrome,
                priors: vec![llr; n],
            });
        }
    }
    Ok(out)
}

/// `count` evenly spaced rates from `lo` to `hi`, endpoints included.
pub fn evenly_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..count)
            .map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64)
            .collect(),
    }
}

fn default_rates() -> Vec<f64> {
    evenly_spaced(0.01, 0.05, 6)
}
fn default_batch() -> usize {
    120
}
fn default_sector() -> Sector {
    Sector::X
}
fn default_eval_p() -> f64 {
    0.01
}
fn default_eval_trials() -> usize {
    10_000
}
fn default_clip() -> f64 {
    crate::bp::DEFAULT_CLIP
}

/// Training run description; JSON with unknown keys rejected.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Code file, relative paths resolved against the config file.
    pub code: PathBuf,
    #[serde(default = "default_sector")]
    pub sector: Sector,
    pub n_cycles: usize,
    /// Additive skip of the previous cycle's variable-to-check message.
    #[serde(default)]
    pub residual: bool,
    /// Lattice translation period `[gx, gy]` for weight tying (toric only).
    #[serde(default)]
    pub sharing_period: Option<[usize; 2]>,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_rates")]
    pub rates: Vec<f64>,
    pub minibatches: usize,
    #[serde(default)]
    pub seed: u64,
    /// Write a checkpoint every this many minibatches (0: final only).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Held-out evaluation every this many minibatches (0: never).
    #[serde(default)]
    pub eval_every: usize,
    #[serde(default = "default_eval_p")]
    pub eval_p: f64,
    #[serde(default = "default_eval_trials")]
    pub eval_trials: usize,
    #[serde(default = "default_clip")]
    pub clip: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.optimizer.lr > 0.0) {
            return bad(format!("learning rate {} must be positive", self.optimizer.lr));
        }
        if self.n_cycles == 0 {
            return bad("n_cycles must be at least 1".into());
        }
        if self.rates.is_empty() || self.batch_size % self.rates.len() != 0 || self.batch_size == 0
        {
            return bad(format!(
                "batch size {} is not a positive multiple of {} rates",
                self.batch_size,
                self.rates.len()
            ));
        }
        if let Some(p) = self.rates.iter().find(|&&p| !(p > 0.0 && p < 1.0)) {
            return bad(format!("training rate {p} outside (0, 1)"));
        }
        if !(self.eval_p > 0.0 && self.eval_p < 1.0) {
            return bad(format!("eval_p {} outside (0, 1)", self.eval_p));
        }
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return bad(format!("clip {} outside (0, 1)", self.clip));
        }
        if self.loss.scale <= 0.0 {
            return bad("loss scale must be positive".into());
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&std::fs::read_to_string(path)?)?;
        if cfg.code.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.code = dir.join(&cfg.code);
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalPoint {
    pub p: f64,
    pub flagged: f64,
    pub unflagged: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    /// Minibatches completed, counting this one.
    pub minibatch: usize,
    pub mean_loss: f64,
    pub eval: Option<EvalPoint>,
}

pub const HISTORY_HEADER: &str = "minibatch,mean_loss,eval_p,eval_flagged,eval_unflagged,eval_total";

pub fn history_csv(history: &[HistoryRow]) -> String {
    let mut s = String::from(HISTORY_HEADER);
    s.push('\n');
    for row in history {
        s.push_str(&format!("{},{:.10e}", row.minibatch, row.mean_loss));
        match row.eval {
            Some(e) => s.push_str(&format!(
                ",{},{:.10e},{:.10e},{:.10e}\n",
                crate::eval::format_sig6(e.p),
                e.flagged,
                e.unflagged,
                e.total
            )),
            None => s.push_str(",,,,\n"),
        }
    }
    s
}

/// Fresh model for a config: identity parameters, tied if requested.
pub fn initial_model(config: &TrainConfig, sector: &SectorData) -> Result<NbpModel> {
    let mut model = NbpModel::init_identity(&sector.graph, config.n_cycles, config.residual)?;
    model.set_clip(config.clip);
    if let Some([gx, gy]) = config.sharing_period {
        let lattice = sector.lattice.ok_or_else(|| {
            Error::InvalidParameter("weight sharing needs a toric code".into())
        })?;
        model = tie_weights_toric(&model, &sector.graph, &lattice, (gx, gy))?;
    }
    Ok(model)
}

/// Mean loss and mean gradient of a minibatch. Per-sample work runs in
/// parallel; the reduction is sequential in sample order.
pub fn minibatch_gradient(
    model: &NbpModel,
    sector: &SectorData,
    loss: &Loss,
    samples: &[Sample],
) -> Result<(f64, Vec<f64>)> {
    let per_sample: Vec<Result<(f64, Vec<f64>)>> = samples
        .par_iter()
        .map(|s| {
            let trace = model.forward(&sector.graph, &s.syndrome, &s.priors)?;
            backward(&trace, model, &sector.graph, &s.error, loss)
        })
        .collect();
    let mut total = 0.0;
    let mut grad = vec![0.0; model.n_params()];
    for r in per_sample {
        let (l, g) = r?;
        total += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    let scale = 1.0 / samples.len() as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    Ok((total * scale, grad))
}

/// Trains a model; `on_checkpoint(minibatch, model)` fires at the configured
/// cadence and once at the end.
pub fn train_with<F>(
    config: &TrainConfig,
    code: &CssCode,
    mut on_checkpoint: F,
) -> Result<(NbpModel, Vec<HistoryRow>)>
where
    F: FnMut(usize, &NbpModel) -> Result<()>,
{
    config.validate()?;
    let sector = SectorData::new(code, config.sector)?;
    let loss = Loss::for_sector(config.loss, &sector);
    let mut model = initial_model(config, &sector)?;
    let mut state = OptimState::new(&model);
    let per_rate = config.batch_size / config.rates.len();
    let policy = match config.sector {
        Sector::X => SectorPolicy::X,
        Sector::Z => SectorPolicy::Z,
    };
    let mut history = Vec::with_capacity(config.minibatches);

    for mb in 0..config.minibatches {
        let mut rng = seed::rng(config.seed, stream::MINIBATCH, mb as u64);
        let samples = sample_minibatch(&sector, &config.rates, per_rate, &mut rng)?;
        let (mean_loss, grad) = minibatch_gradient(&model, &sector, &loss, &samples)?;
        if !mean_loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite loss or gradient at minibatch {} (loss {mean_loss})",
                mb + 1
            )));
        }
        optimizer_step(&mut model, &grad, &mut state, &config.optimizer)?;
        if model.params().iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite parameter after minibatch {}",
                mb + 1
            )));
        }
        let done = mb + 1;
        let eval = if config.eval_every > 0 && done % config.eval_every == 0 {
            let setup = DecodingSetup::new(code, policy, |_| Decoder::Nbp(model.clone()))?;
            let tally = monte_carlo(
                &setup,
                config.eval_p,
                config.eval_trials,
                seed::derive(config.seed, stream::TRAIN_EVAL, done as u64),
            )?;
            Some(EvalPoint {
                p: config.eval_p,
                flagged: tally.flagged_rate(),
                unflagged: tally.unflagged_rate(),
                total: tally.failure_rate(),
            })
        } else {
            None
        };
        history.push(HistoryRow {
            minibatch: done,
            mean_loss,
            eval,
        });
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done != config.minibatches {
            on_checkpoint(done, &model)?;
        }
    }
    on_checkpoint(config.minibatches, &model)?;
    Ok((model, history))
}

pub fn train(config: &TrainConfig, code: &CssCode) -> Result<(NbpModel, Vec<HistoryRow>)> {
    train_with(config, code, |_, _| Ok(()))
}

/// Trains and writes `checkpoint.json` (plus `checkpoint_<k>.json` at the
/// cadence) and `history.csv` into `out_dir`.
pub fn run_training(config: &TrainConfig, out_dir: &Path) -> Result<(NbpModel, Vec<HistoryRow>)> {
    let code = CssCode::load(&config.code)?;
    std::fs::create_dir_all(out_dir)?;
    let final_mb = config.minibatches;
    let (model, history) = train_with(config, &code, |mb, model| {
        let name = if mb == final_mb {
            "checkpoint.json".to_string()
        } else {
            format!("checkpoint_{mb}.json")
        };
        save_checkpoint(model, &out_dir.join(name))
    })?;
    std::fs::write(out_dir.join("history.csv"), history_csv(&history))?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bp::hard_decision;
    use crate::codes::toric_code;
    use crate::gf2::in_rowspace;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Marginals of magnitude 40 whose hard decision is `e_inf`.
    fn saturated(e_inf: &BitVector) -> Vec<f64> {
        (0..e_inf.len())
            .map(|i| if e_inf.get(i) { -40.0 } else { 40.0 })
            .collect()
    }

    #[test]
    fn fermi_examples() {
        assert_eq!(fermi_sigma(0.0), 0.5);
        assert!(close(fermi_sigma(3f64.ln()), 0.25, 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let x: f64 = rng.gen_range(-750.0..750.0);
            assert!(close(fermi_sigma(x) + fermi_sigma(-x), 1.0, 1e-15));
            assert!(fermi_sigma(x).is_finite());
        }
    }

    #[test]
    fn smooth_parity_examples() {
        assert_eq!(smooth_parity(0.0), 0.0);
        assert!(close(smooth_parity(1.0), 1.0, 1e-15));
        assert_eq!(smooth_parity(2.0), 0.0);
        assert!(close(smooth_parity(0.5), std::f64::consts::FRAC_1_SQRT_2, 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let x: f64 = rng.gen_range(-10.0..10.0);
            assert!(close(smooth_parity(x), smooth_parity(x + 2.0), 1e-12));
            assert!(close(smooth_parity(x), (PI * x / 2.0).sin().abs(), 1e-12));
        }
        assert_eq!(smooth_parity_grad(2.0), 0.0);
    }

    #[test]
    fn degeneracy_loss_examples() {
        let code = toric_code(2).unwrap();
        let x = SectorData::new(&code, Sector::X).unwrap();
        let e = BitVector::from_support(8, &[1, 6]).unwrap();
        let exact = degeneracy_loss(&saturated(&e), &e, &x.loss_matrix).unwrap();
        assert!(exact <= 1e-15);
        let degenerate = e.xor(&x.stabilizers.row(0)).unwrap();
        assert!(degeneracy_loss(&saturated(&degenerate), &e, &x.loss_matrix).unwrap() <= 1e-15);

        // a logical: in ker(B) but not in rowspace(A)
        let ker_b = crate::gf2::gf2_nullspace(&x.check);
        let logical = (0..ker_b.rows())
            .map(|r| ker_b.row(r))
            .find(|v| !in_rowspace(&x.stabilizers, v).unwrap())
            .unwrap();
        let wrong = e.xor(&logical).unwrap();
        assert!(degeneracy_loss(&saturated(&wrong), &e, &x.loss_matrix).unwrap() >= 1.0);
        assert!(degeneracy_loss(&[0.0; 7], &e, &x.loss_matrix).is_err());
    }

    #[test]
    fn bce_examples() {
        let e = BitVector::from_support(5, &[2]).unwrap();
        assert!(close(classical_bce_loss(&[0.0; 5], &e).unwrap(), 5.0 * 2f64.ln(), 1e-12));
        assert!(classical_bce_loss(&[50.0; 5], &BitVector::zeros(5)).unwrap() < 1e-20);
        let one = BitVector::from_support(1, &[0]).unwrap();
        assert!(close(classical_bce_loss(&[-(3f64.ln())], &one).unwrap(), 0.287_682_1, 1e-7));
    }

    #[test]
    fn cycle_loss_modes() {
        let code = toric_code(2).unwrap();
        let x = SectorData::new(&code, Sector::X).unwrap();
        let e = BitVector::from_support(8, &[3]).unwrap();
        let s = x.syndrome(&e).unwrap();
        let priors = vec![prior_llr(0.1).unwrap(); 8];
        let m1 = NbpModel::init_identity(&x.graph, 1, false).unwrap();
        let t1 = m1.forward(&x.graph, &s, &priors).unwrap();
        let avg = Loss::for_sector(LossSpec::default(), &x);
        let fin = Loss::for_sector(
            LossSpec {
                kind: LossKind::FinalCycle,
                ..LossSpec::default()
            },
            &x,
        );
        assert_eq!(cycle_loss(&t1, &e, &avg).unwrap(), cycle_loss(&t1, &e, &fin).unwrap());

        let mut same = t1.clone();
        same.marginals = vec![t1.marginals[0].clone(); 4];
        assert!(close(cycle_loss(&same, &e, &avg).unwrap(), cycle_loss(&same, &e, &fin).unwrap(), 1e-15));

        let m5 = NbpModel::init_identity(&x.graph, 5, false).unwrap();
        let t5 = m5.forward(&x.graph, &s, &priors).unwrap();
        let per: Vec<f64> = t5
            .marginals
            .iter()
            .map(|m| degeneracy_loss(m, &e, &x.loss_matrix).unwrap())
            .collect();
        let mean = per.iter().sum::<f64>() / 5.0;
        assert!(close(cycle_loss(&t5, &e, &avg).unwrap(), mean, 1e-14));
    }

    fn perturbed_model(graph: &TannerGraph, n_cycles: usize, residual: bool, seed: u64) -> NbpModel {
        let mut m = NbpModel::init_identity(graph, n_cycles, residual).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in m.params_mut() {
            *p += rng.gen_range(-0.3..0.3);
        }
        m
    }

    fn fd_check(model: &NbpModel, sector: &SectorData, e: &BitVector, priors: &[f64], loss: &Loss) {
        let s = sector.syndrome(e).unwrap();
        let trace = model.forward(&sector.graph, &s, priors).unwrap();
        let (l0, grad) = backward(&trace, model, &sector.graph, e, loss).unwrap();
        assert!(close(l0, cycle_loss(&trace, e, loss).unwrap(), 1e-12));
        for i in 0..model.n_params() {
            let theta = model.params()[i];
            let h = 1e-4 * theta.abs().max(1.0);
            let mut plus = model.clone();
            plus.params_mut()[i] = theta + h;
            let mut minus = model.clone();
            minus.params_mut()[i] = theta - h;
            let lp = cycle_loss(&plus.forward(&sector.graph, &s, priors).unwrap(), e, loss).unwrap();
            let lm = cycle_loss(&minus.forward(&sector.graph, &s, priors).unwrap(), e, loss).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            let g = grad[i];
            if g.abs().max(fd.abs()) < 1e-6 {
                assert!((g - fd).abs() <= 1e-8, "param {i}: {g} vs {fd}");
            } else {
                let rel = (g - fd).abs() / g.abs().max(fd.abs());
                assert!(rel <= 1e-4, "param {i}: analytic {g} fd {fd} rel {rel}");
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_tree_code() {
        let h = BitMatrix::from_dense(&[
            vec![1, 1, 0, 0, 0],
            vec![0, 1, 1, 1, 0],
            vec![0, 0, 0, 1, 1],
        ])
        .unwrap();
        // CSS wrapper: X sector checks = b, stabilizer rowspace = a (empty-ish)
        let a = BitMatrix::from_dense(&[vec![1, 1, 1, 1, 1]]).unwrap();
        let code = CssCode::new("tree", a, h).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let e = BitVector::from_support(5, &[1, 4]).unwrap();
        let priors = vec![1.2, 2.0, 0.7, 1.5, 2.5];
        for residual in [false, true] {
            let model = perturbed_model(&sector.graph, 3, residual, 5);
            for target in [LossTarget::Degeneracy, LossTarget::ClassicalBce] {
                let loss = Loss::for_sector(
                    LossSpec {
                        target,
                        ..LossSpec::default()
                    },
                    &sector,
                );
                fd_check(&model, &sector, &e, &priors, &loss);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_on_toric() {
        let code = toric_code(2).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let e = BitVector::from_support(8, &[2]).unwrap();
        let priors = vec![prior_llr(0.08).unwrap(); 8];
        let model = perturbed_model(&sector.graph, 3, false, 6);
        let loss = Loss::for_sector(LossSpec::default(), &sector);
        fd_check(&model, &sector, &e, &priors, &loss);
    }

    #[test]
    fn zero_input_derivative_uses_product_form() {
        let x = [0.0, 1.3, -0.8];
        let dy = [0.0, 1.0, 0.0];
        let mut dx = [0.0; 3];
        check_node_backward(&x, false, 1e-4, &dy, &mut dx);
        // y_1 = 2 atanh(tanh(x0/2) tanh(x2/2)); ∂/∂x0 at 0 = tanh(x2/2)
        assert!(close(dx[0], (-0.4f64).tanh(), 1e-12));
        assert_eq!(dx[2], 0.0);
    }

    #[test]
    fn clipped_paths_have_zero_gradient() {
        let h = BitMatrix::from_dense(&[vec![1, 1, 0], vec![0, 1, 1]]).unwrap();
        let code = CssCode::new("rep3", BitMatrix::from_dense(&[vec![1, 1, 1]]).unwrap(), h).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let model = NbpModel::init_identity(&sector.graph, 2, false).unwrap();
        let e = BitVector::zeros(3);
        let priors = vec![20.0; 3];
        let trace = model.forward(&sector.graph, &BitVector::zeros(2), &priors).unwrap();
        let loss = Loss::for_sector(LossSpec::default(), &sector);
        let (_, grad) = backward(&trace, &model, &sector.graph, &e, &loss).unwrap();
        let o = model.cvvc_offset(1);
        for k in 0..model.cvvc_per_cycle() {
            assert_eq!(grad[o + k], 0.0);
        }
    }

    #[test]
    fn doubling_the_loss_doubles_gradients() {
        let code = toric_code(2).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let model = perturbed_model(&sector.graph, 3, true, 7);
        let e = BitVector::from_support(8, &[0, 5]).unwrap();
        let s = sector.syndrome(&e).unwrap();
        let trace = model.forward(&sector.graph, &s, &[2.5; 8]).unwrap();
        let l1 = Loss::for_sector(LossSpec::default(), &sector);
        let l2 = Loss::for_sector(
            LossSpec {
                scale: 2.0,
                ..LossSpec::default()
            },
            &sector,
        );
        let (a, ga) = backward(&trace, &model, &sector.graph, &e, &l1).unwrap();
        let (b, gb) = backward(&trace, &model, &sector.graph, &e, &l2).unwrap();
        assert_eq!(b, 2.0 * a);
        for (x, y) in ga.iter().zip(&gb) {
            assert_eq!(*y, 2.0 * x);
        }
    }

    #[test]
    fn backward_rejects_foreign_trace() {
        let code = toric_code(2).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let m3 = NbpModel::init_identity(&sector.graph, 3, false).unwrap();
        let m2 = NbpModel::init_identity(&sector.graph, 2, false).unwrap();
        let trace = m3.forward(&sector.graph, &BitVector::zeros(4), &[3.0; 8]).unwrap();
        let loss = Loss::for_sector(LossSpec::default(), &sector);
        assert!(backward(&trace, &m2, &sector.graph, &BitVector::zeros(8), &loss).is_err());
    }

    #[test]
    fn optimizer_steps() {
        let code = toric_code(2).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let mut m = NbpModel::init_identity(&sector.graph, 1, false).unwrap();
        let before = m.clone();
        let np = m.n_params();
        sgd_step(&mut m, &vec![0.0; np], 2e-4).unwrap();
        assert_eq!(m, before);
        sgd_step(&mut m, &vec![0.5; np], 2e-4).unwrap();
        assert!(m.params().iter().all(|&x| close(x, 0.9999, 1e-15)));

        let mut m = before.clone();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 1e-3,
            ..OptimizerConfig::default()
        };
        let mut state = OptimState::new(&m);
        let grads: Vec<f64> = (0..m.n_params()).map(|i| if i % 2 == 0 { 0.3 } else { -2.0 }).collect();
        adam_step(&mut m, &grads, &mut state, &cfg).unwrap();
        for (i, &x) in m.params().iter().enumerate() {
            let expect = if i % 2 == 0 { 1.0 - 1e-3 } else { 1.0 + 1e-3 };
            assert!(close(x, expect, 1e-10));
        }
        let mut z = before.clone();
        let mut st = OptimState::new(&z);
        adam_step(&mut z, &vec![0.0; np], &mut st, &cfg).unwrap();
        assert_eq!(z.params(), before.params());
    }

    #[test]
    fn tied_updates_keep_classes_equal() {
        let code = toric_code(4).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let lat = code.lattice.unwrap();
        let m = NbpModel::init_identity(&sector.graph, 2, false).unwrap();
        let mut tied = tie_weights_toric(&m, &sector.graph, &lat, (2, 2)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let grads: Vec<f64> = (0..tied.n_params()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let expected_class = tied.reduce_to_classes(&grads);
        let before = tied.class_values();
        sgd_step(&mut tied, &grads, 0.1).unwrap();
        let after = tied.class_values();
        for c in 0..tied.n_classes() {
            assert!(close(after[c], before[c] - 0.1 * expected_class[c], 1e-15));
        }
        let sh = tied.sharing().unwrap().clone();
        for (i, &c) in sh.class_of.iter().enumerate() {
            assert_eq!(tied.params()[i], after[c]);
        }
    }

    #[test]
    fn minibatch_sampling() {
        let code = toric_code(3).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let rates = default_rates();
        assert_eq!(rates.len(), 6);
        assert!(close(rates[1], 0.018, 1e-15) && close(rates[5], 0.05, 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let batch = sample_minibatch(&sector, &rates, 20, &mut rng).unwrap();
        assert_eq!(batch.len(), 120);
        for s in &batch {
            assert_eq!(sector.syndrome(&s.error).unwrap(), s.syndrome);
            assert!(close(s.priors[0], prior_llr(s.p).unwrap(), 0.0));
        }
        let quiet = sample_minibatch(&sector, &[1e-12], 50, &mut rng).unwrap();
        assert!(quiet.iter().all(|s| s.error.is_zero() && s.syndrome.is_zero()));
    }

    #[test]
    fn sampled_weight_is_binomial() {
        let code = toric_code(5).unwrap();
        let sector = SectorData::new(&code, Sector::X).unwrap();
        let n = sector.n() as f64;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let draws = 100_000;
        let batch = sample_minibatch(&sector, &[0.05], draws, &mut rng).unwrap();
        let mean = batch.iter().map(|s| s.error.weight() as f64).sum::<f64>() / draws as f64;
        let sigma = (n * 0.05 * 0.95 / draws as f64).sqrt();
        assert!((mean - 0.05 * n).abs() <= 3.0 * sigma, "mean {mean}");
    }

    fn small_config(minibatches: usize) -> TrainConfig {
        TrainConfig {
            code: PathBuf::from("unused.json"),
            sector: Sector::X,
            n_cycles: 3,
            residual: false,
            sharing_period: None,
            loss: LossSpec::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 1e-3,
                ..OptimizerConfig::default()
            },
            batch_size: 12,
            rates: default_rates(),
            minibatches,
            seed: 5,
            checkpoint_every: 0,
            eval_every: 2,
            eval_p: 0.05,
            eval_trials: 200,
            clip: 1e-4,
        }
    }

    #[test]
    fn zero_minibatches_returns_identity() {
        let code = toric_code(2).unwrap();
        let (model, history) = train(&small_config(0), &code).unwrap();
        assert!(history.is_empty());
        assert!(model.params().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn training_is_deterministic() {
        let code = toric_code(3).unwrap();
        let cfg = small_config(4);
        let (m1, h1) = train(&cfg, &code).unwrap();
        let (m2, h2) = train(&cfg, &code).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(history_csv(&h1), history_csv(&h2));
        assert_eq!(h1.len(), 4);
        assert!(h1[1].eval.is_some() && h1[0].eval.is_none());
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config(1);
        cfg.optimizer.lr = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config(1);
        cfg.batch_size = 13;
        assert!(cfg.validate().is_err());
        let text = r#"{"code": "c.json", "n_cycles": 3, "minibatches": 1, "bogus": 1}"#;
        assert!(TrainConfig::from_json(text).is_err());
        let text = r#"{"code": "c.json", "n_cycles": 3, "minibatches": 1}"#;
        let cfg = TrainConfig::from_json(text).unwrap();
        assert_eq!(cfg.batch_size, 120);
        assert_eq!(cfg.optimizer.kind, OptimizerKind::Sgd);
        let echo = serde_json::to_string(&cfg).unwrap();
        assert_eq!(TrainConfig::from_json(&echo).unwrap(), cfg);
    }

    #[test]
    fn hard_decision_of_saturated_marginals_round_trips() {
        let e = BitVector::from_support(6, &[0, 4]).unwrap();
        assert_eq!(hard_decision(&saturated(&e)), e);
    }
}
