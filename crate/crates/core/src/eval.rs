//! Monte-Carlo estimation of logical error rates.
//!
//! Every trial gets its own RNG derived from `(seed, trial index)`, so
//! results do not depend on how trials are split across threads.

use std::fmt::Write as _;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bp::{bp_decode, prior_llr, DEFAULT_CLIP};
use crate::codes::CssCode;
use crate::gf2::{BitMatrix, BitVector, RowspaceTester};
use crate::nbp::NbpModel;
use crate::sector::{Sector, SectorData, SectorPolicy};
use crate::seed::{self, stream};
use crate::{Error, Result};

/// Smallest rate used for decoder priors; `p = 0` would give infinite LLRs.
pub const MIN_PRIOR_RATE: f64 = 1e-12;

const CHUNK: usize = 1024;

/// Each bit independently 1 with probability `p`.
pub fn sample_error(n: usize, p: f64, rng: &mut impl Rng) -> BitVector {
    let mut e = BitVector::zeros(n);
    for i in 0..n {
        if rng.gen::<f64>() < p {
            e.set(i, true);
        }
    }
    e
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    SuccessExact,
    SuccessDegenerate,
    Unflagged,
    Flagged,
}

impl Outcome {
    pub fn label(self) -> &'static str {
        match self {
            Outcome::SuccessExact => "SUCCESS_EXACT",
            Outcome::SuccessDegenerate => "SUCCESS_DEGENERATE",
            Outcome::Unflagged => "UNFLAGGED",
            Outcome::Flagged => "FLAGGED",
        }
    }

    pub fn is_failure(self) -> bool {
        matches!(self, Outcome::Flagged | Outcome::Unflagged)
    }

    /// Label of a trial from its per-sector labels: any flagged sector flags
    /// the trial, then any logical failure, and exact needs every sector exact.
    pub fn combine(self, other: Outcome) -> Outcome {
        // the enum order encodes exactly this precedence
        self.max(other)
    }
}

/// Classification with a prebuilt stabilizer row-space tester.
pub fn classify_with(
    error: &BitVector,
    inferred: &BitVector,
    check: &BitMatrix,
    stabilizers: &RowspaceTester,
) -> Result<Outcome> {
    if error.len() != inferred.len() || error.len() != check.cols() || stabilizers.cols() != error.len() {
        return Err(Error::DimensionMismatch(format!(
            "error {}, inference {}, check matrix {} columns, stabilizers {} columns",
            error.len(),
            inferred.len(),
            check.cols(),
            stabilizers.cols()
        )));
    }
    let total = error.xor(inferred)?;
    if !check.mul_vec(&total)?.is_zero() {
        return Ok(Outcome::Flagged);
    }
    if total.is_zero() {
        return Ok(Outcome::SuccessExact);
    }
    if stabilizers.contains(&total)? {
        Ok(Outcome::SuccessDegenerate)
    } else {
        Ok(Outcome::Unflagged)
    }
}

/// Flagged if `e + e_inf` leaves a syndrome, exact if `e_inf = e`,
/// degenerate if `e + e_inf` is a stabilizer, otherwise a logical failure.
pub fn classify_outcome(
    error: &BitVector,
    inferred: &BitVector,
    check: &BitMatrix,
    stabilizers: &BitMatrix,
) -> Result<Outcome> {
    classify_with(error, inferred, check, &RowspaceTester::new(stabilizers))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeTally {
    pub trials: u64,
    pub flagged: u64,
    pub unflagged: u64,
    pub success_exact: u64,
    pub success_degenerate: u64,
}

impl OutcomeTally {
    pub fn record(&mut self, outcome: Outcome) {
        self.trials += 1;
        match outcome {
            Outcome::Flagged => self.flagged += 1,
            Outcome::Unflagged => self.unflagged += 1,
            Outcome::SuccessExact => self.success_exact += 1,
            Outcome::SuccessDegenerate => self.success_degenerate += 1,
        }
    }

    pub fn merge(&mut self, other: &OutcomeTally) {
        self.trials += other.trials;
        self.flagged += other.flagged;
        self.unflagged += other.unflagged;
        self.success_exact += other.success_exact;
        self.success_degenerate += other.success_degenerate;
    }

    pub fn failures(&self) -> u64 {
        self.flagged + self.unflagged
    }

    fn rate(&self, k: u64) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            k as f64 / self.trials as f64
        }
    }

    pub fn failure_rate(&self) -> f64 {
        self.rate(self.failures())
    }

    pub fn flagged_rate(&self) -> f64 {
        self.rate(self.flagged)
    }

    pub fn unflagged_rate(&self) -> f64 {
        self.rate(self.unflagged)
    }

    /// Wilson 95% interval on the total failure rate.
    pub fn failure_interval(&self) -> (f64, f64) {
        wilson_interval(self.failures(), self.trials, 1.96)
    }
}

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: u64, n: u64, z: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let n_f = n as f64;
    let p = k as f64 / n_f;
    let z2 = z * z;
    let denom = 1.0 + z2 / n_f;
    let center = (p + z2 / (2.0 * n_f)) / denom;
    let half = z / denom * (p * (1.0 - p) / n_f + z2 / (4.0 * n_f * n_f)).sqrt();
    let low = if k == 0 { 0.0 } else { (center - half).max(0.0) };
    let high = if k == n { 1.0 } else { (center + half).min(1.0) };
    (low, high)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    /// Plain BP with a fixed iteration count and no early stopping.
    Bp { iterations: usize, clip: f64 },
    Nbp(NbpModel),
}

impl Decoder {
    pub fn bp(iterations: usize) -> Self {
        Decoder::Bp {
            iterations,
            clip: DEFAULT_CLIP,
        }
    }

    pub fn id(&self) -> String {
        match self {
            Decoder::Bp { iterations, .. } => format!("bp_t{iterations}"),
            Decoder::Nbp(m) => format!("nbp_nc{}", m.n_cycles()),
        }
    }

    pub fn decode(&self, sector: &SectorData, syndrome: &BitVector, priors: &[f64]) -> Result<BitVector> {
        match self {
            Decoder::Bp { iterations, clip } => {
                Ok(bp_decode(&sector.graph, syndrome, priors, *iterations, *clip, false)?.inferred)
            }
            Decoder::Nbp(model) => model.decode(&sector.graph, syndrome, priors),
        }
    }
}

/// The sectors simulated under a policy, each with its decoder.
#[derive(Debug, Clone)]
pub struct DecodingSetup {
    pub code_name: String,
    pub sectors: Vec<(SectorData, Decoder)>,
}

impl DecodingSetup {
    pub fn new(
        code: &CssCode,
        policy: SectorPolicy,
        mut decoder_for: impl FnMut(Sector) -> Decoder,
    ) -> Result<Self> {
        let mut sectors = Vec::new();
        for &s in policy.sectors() {
            let data = SectorData::new(code, s)?;
            let decoder = decoder_for(s);
            if let Decoder::Nbp(m) = &decoder {
                m.check_graph(&data.graph)?;
            }
            sectors.push((data, decoder));
        }
        Ok(Self {
            code_name: code.name.clone(),
            sectors,
        })
    }

    pub fn decoder_id(&self) -> String {
        let ids: Vec<String> = self.sectors.iter().map(|(_, d)| d.id()).collect();
        ids.join("+")
    }

    /// One trial: sample every sector in order from `rng`, decode, label.
    pub fn run_trial(&self, p: f64, priors_rate: f64, rng: &mut impl Rng) -> Result<Outcome> {
        let mut outcome = Outcome::SuccessExact;
        for (data, decoder) in &self.sectors {
            let n = data.n();
            let error = sample_error(n, p, rng);
            let syndrome = data.syndrome(&error)?;
            let priors = vec![prior_llr(priors_rate)?; n];
            let inferred = decoder.decode(data, &syndrome, &priors)?;
            let o = classify_with(&error, &inferred, &data.check, &data.stabilizer_space)?;
            outcome = outcome.combine(o);
        }
        Ok(outcome)
    }
}

/// Runs `trials` independent trials at rate `p`.
pub fn monte_carlo(setup: &DecodingSetup, p: f64, trials: usize, seed: u64) -> Result<OutcomeTally> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("error rate {p} outside [0, 1)")));
    }
    let prior_rate = p.max(MIN_PRIOR_RATE);
    let chunks: Vec<Result<OutcomeTally>> = (0..trials.div_ceil(CHUNK))
        .into_par_iter()
        .map(|c| {
            let mut tally = OutcomeTally::default();
            for t in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                let mut rng = seed::rng(seed, stream::TRIAL, t as u64);
                tally.record(setup.run_trial(p, prior_rate, &mut rng)?);
            }
            Ok(tally)
        })
        .collect();
    let mut total = OutcomeTally::default();
    for c in chunks {
        total.merge(&c?);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub p: f64,
    pub tally: OutcomeTally,
    pub ci: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub decoder_id: String,
    pub code_id: String,
    pub seed: u64,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_HEADER: &str =
    "p_err,trials,flagged,unflagged,success_exact,success_degenerate,total_failure_rate,ci_low,ci_high";

/// Formats like C's `%.6g`.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}")).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn csv_row(out: &mut String, prefix: Option<&str>, pt: &SweepPoint) {
    let t = &pt.tally;
    if let Some(p) = prefix {
        out.push_str(p);
        out.push(',');
    }
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{:.10e},{:.10e},{:.10e}",
        format_sig6(pt.p),
        t.trials,
        t.flagged,
        t.unflagged,
        t.success_exact,
        t.success_degenerate,
        t.failure_rate(),
        pt.ci.0,
        pt.ci.1
    );
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{SWEEP_HEADER}\n");
        for pt in &self.points {
            csv_row(&mut s, None, pt);
        }
        s
    }
}

/// Side-by-side CSV with a leading `decoder` column, rows interleaved by rate.
pub fn compare_csv(results: &[(&str, &SweepResult)]) -> Result<String> {
    let mut s = format!("decoder,{SWEEP_HEADER}\n");
    let len = results.first().map_or(0, |r| r.1.points.len());
    if results.iter().any(|r| r.1.points.len() != len) {
        return Err(Error::DimensionMismatch("sweeps over different rate lists".into()));
    }
    for i in 0..len {
        for (name, r) in results {
            csv_row(&mut s, Some(name), &r.points[i]);
        }
    }
    Ok(s)
}

/// One [`monte_carlo`] per rate, seeded by `derive(seed, SWEEP_POINT, i)`.
pub fn sweep(setup: &DecodingSetup, rates: &[f64], trials: usize, seed: u64) -> Result<SweepResult> {
    if rates.is_empty() {
        return Err(Error::InvalidParameter("empty rate list".into()));
    }
    if rates.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidParameter("rates must be strictly increasing".into()));
    }
    let mut points = Vec::with_capacity(rates.len());
    for (i, &p) in rates.iter().enumerate() {
        let tally = monte_carlo(setup, p, trials, seed::derive(seed, stream::SWEEP_POINT, i as u64))?;
        points.push(SweepPoint {
            p,
            tally,
            ci: tally.failure_interval(),
        });
    }
    Ok(SweepResult {
        decoder_id: setup.decoder_id(),
        code_id: setup.code_name.clone(),
        seed,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codes::toric_code;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sample_error_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_error(50, 0.0, &mut rng).is_zero());
        let draws = 1_000_000;
        let total: usize = (0..draws).map(|_| sample_error(100, 0.01, &mut rng).weight()).sum();
        let mean = total as f64 / draws as f64;
        let sigma = (100.0 * 0.01 * 0.99 / draws as f64).sqrt();
        assert!((mean - 1.0).abs() <= 3.0 * sigma, "mean {mean}");
        let a = sample_error(64, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_error(64, 0.3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn classify_examples() {
        let code = toric_code(2).unwrap();
        let x = SectorData::new(&code, Sector::X).unwrap();
        let e = BitVector::from_support(8, &[0, 5]).unwrap();
        let cls = |inf: &BitVector| classify_outcome(&e, inf, &x.check, &x.stabilizers).unwrap();
        assert_eq!(cls(&e), Outcome::SuccessExact);
        assert_eq!(cls(&e.xor(&x.stabilizers.row(1)).unwrap()), Outcome::SuccessDegenerate);
        let single = BitVector::from_support(8, &[3]).unwrap();
        assert_eq!(
            classify_outcome(&single, &BitVector::zeros(8), &x.check, &x.stabilizers).unwrap(),
            Outcome::Flagged
        );
        // h edges at fixed x wind around the torus and meet every plaquette twice
        let lat = code.lattice.unwrap();
        let logical: Vec<usize> = (0..2).map(|y| lat.edge_index(0, y, crate::codes::Orientation::Horizontal)).collect();
        let logical = BitVector::from_support(8, &logical).unwrap();
        assert!(x.check.mul_vec(&logical).unwrap().is_zero());
        assert!(!x.stabilizer_space.contains(&logical).unwrap());
        assert_eq!(cls(&e.xor(&logical).unwrap()), Outcome::Unflagged);
        assert!(classify_outcome(&e, &BitVector::zeros(7), &x.check, &x.stabilizers).is_err());
    }

    #[test]
    fn joint_labels() {
        use Outcome::*;
        assert_eq!(Flagged.combine(Unflagged), Flagged);
        assert_eq!(Unflagged.combine(SuccessDegenerate), Unflagged);
        assert_eq!(SuccessExact.combine(SuccessDegenerate), SuccessDegenerate);
        assert_eq!(SuccessExact.combine(SuccessExact), SuccessExact);
    }

    #[test]
    fn wilson_examples() {
        let (lo, hi) = wilson_interval(0, 100, 1.96);
        assert_eq!(lo, 0.0);
        // closed form at k = 0: z²/(n + z²)
        assert!((hi - 1.96f64.powi(2) / (100.0 + 1.96f64.powi(2))).abs() < 1e-12);
        assert!((hi - 0.0370).abs() < 5e-5);
        assert_eq!(wilson_interval(40, 40, 1.96).1, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..1000 {
            let n: u64 = rng.gen_range(1..5000);
            let k = rng.gen_range(0..=n);
            let (lo, hi) = wilson_interval(k, n, 1.96);
            let p = k as f64 / n as f64;
            assert!(0.0 <= lo && lo <= p && p <= hi && hi <= 1.0);
        }
    }

    #[test]
    fn format_sig6_matches_printf() {
        assert_eq!(format_sig6(0.01), "0.01");
        assert_eq!(format_sig6(0.018), "0.018");
        assert_eq!(format_sig6(0.05), "0.05");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(1e-5), "1e-05");
        assert_eq!(format_sig6(0.0001234567), "0.000123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e+06");
        assert_eq!(format_sig6(0.9999996), "1");
        assert_eq!(format_sig6(0.0), "0");
    }

    fn toric_setup(l: usize, decoder: Decoder) -> DecodingSetup {
        let code = toric_code(l).unwrap();
        let policy = match decoder {
            Decoder::Bp { .. } => SectorPolicy::Both,
            Decoder::Nbp(_) => SectorPolicy::X,
        };
        DecodingSetup::new(&code, policy, |_| decoder.clone()).unwrap()
    }

    #[test]
    fn tallies_partition_trials() {
        let setup = toric_setup(2, Decoder::bp(5));
        let t = monte_carlo(&setup, 0.05, 10_000, 11).unwrap();
        assert_eq!(t.trials, 10_000);
        assert_eq!(t.flagged + t.unflagged + t.success_exact + t.success_degenerate, t.trials);
        let quiet = monte_carlo(&setup, 0.0, 500, 11).unwrap();
        assert_eq!(quiet.success_exact, 500);
    }

    #[test]
    fn identity_model_matches_bp() {
        let code = toric_code(3).unwrap();
        let graph = SectorData::new(&code, Sector::X).unwrap().graph;
        let model = NbpModel::init_identity(&graph, 6, false).unwrap();
        let a = DecodingSetup::new(&code, SectorPolicy::X, |_| Decoder::bp(6)).unwrap();
        let b = toric_setup(3, Decoder::Nbp(model));
        let ta = monte_carlo(&a, 0.04, 3000, 5).unwrap();
        let tb = monte_carlo(&b, 0.04, 3000, 5).unwrap();
        assert_eq!(ta, tb);
        let sa = sweep(&a, &[0.02, 0.04], 500, 3).unwrap();
        let sb = sweep(&b, &[0.02, 0.04], 500, 3).unwrap();
        assert_eq!(sa.to_csv(), sb.to_csv());
    }

    #[test]
    fn sharding_independence_and_single_point_sweep() {
        let setup = toric_setup(2, Decoder::bp(4));
        let t = monte_carlo(&setup, 0.1, 2500, 8).unwrap();
        let mut manual = OutcomeTally::default();
        for i in 0..2500 {
            let mut rng = seed::rng(8, stream::TRIAL, i);
            manual.record(setup.run_trial(0.1, 0.1, &mut rng).unwrap());
        }
        assert_eq!(t, manual);
        let s = sweep(&setup, &[0.1], 2500, 8).unwrap();
        let direct = monte_carlo(&setup, 0.1, 2500, seed::derive(8, stream::SWEEP_POINT, 0)).unwrap();
        assert_eq!(s.points[0].tally, direct);
        assert!(sweep(&setup, &[0.1, 0.1], 10, 0).is_err());
        assert!(sweep(&setup, &[], 10, 0).is_err());
    }

    #[test]
    fn bp_failure_grows_with_rate() {
        let setup = toric_setup(4, Decoder::bp(12));
        let s = sweep(&setup, &[0.01, 0.03], 20_000, 21).unwrap();
        let csv = s.to_csv();
        assert!(csv.starts_with(SWEEP_HEADER));
        assert_eq!(csv.lines().count(), 3);
        assert!(s.points[1].ci.0 > s.points[0].ci.1);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let code = toric_code(3).unwrap();
        let other = SectorData::new(&toric_code(2).unwrap(), Sector::X).unwrap();
        let model = NbpModel::init_identity(&other.graph, 2, false).unwrap();
        assert!(DecodingSetup::new(&code, SectorPolicy::X, |_| Decoder::Nbp(model.clone())).is_err());
    }
}
