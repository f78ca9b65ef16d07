//! Simulation designs (Cases I to V) and the selection / estimation metrics
//! used to summarize replicated runs.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{LongitudinalDataset, SubjectRecord};
use crate::error::{Error, Result};
use crate::gscad::ModelStructure;
use crate::linalg::sorted_eigen;

const JITTER: f64 = 1e-12;
/// Scale factor turning a median absolute deviation into a normal-consistent SD.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CaseId {
    I,
    II,
    III,
    IV,
    V,
}

impl CaseId {
    pub const ALL: [CaseId; 5] = [CaseId::I, CaseId::II, CaseId::III, CaseId::IV, CaseId::V];
}

impl fmt::Display for CaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CaseId::I => "I",
            CaseId::II => "II",
            CaseId::III => "III",
            CaseId::IV => "IV",
            CaseId::V => "V",
        };
        f.write_str(s)
    }
}

impl FromStr for CaseId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(CaseId::I),
            "II" | "2" => Ok(CaseId::II),
            "III" | "3" => Ok(CaseId::III),
            "IV" | "4" => Ok(CaseId::IV),
            "V" | "5" => Ok(CaseId::V),
            _ => Err(Error::Config(format!("unknown simulation case {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CorrelationFamily {
    CompoundSymmetry,
    Ar1,
    /// `|j - j'| / (2q) + rho^|j - j'|` over the first `q` covariates.
    Banded,
}

/// The true varying coefficient functions, by position.
pub fn varying_truth(q: usize, t: f64) -> f64 {
    match q {
        0 => 5.0 * (1.0 - t).powi(2),
        1 => 3.5 * ((-(3.0 * t - 1.0).powi(2)).exp() + (-(4.0 * t - 3.0).powi(2)).exp()) - 1.5,
        2 => 3.5 * t.max(0.0).sqrt(),
        3 => 6.0 - 2.0 * t,
        4 => 2.0 - 3.0 * (4.0 * PI * t).cos(),
        _ => panic!("no varying coefficient {q}"),
    }
}

pub fn beta0_truth(t: f64) -> f64 {
    3.5 * (2.0 * PI * t).sin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseSpec {
    pub case: CaseId,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub rho: f64,
    pub s0: usize,
}

impl CaseSpec {
    /// `m = 20`, `p = 500`, `s0 = 10`.
    pub fn new(case: CaseId, n: usize, rho: f64) -> Self {
        Self { case, n, m: 20, p: 500, rho, s0: 10 }
    }

    pub fn beta1(&self) -> Vec<f64> {
        match self.case {
            CaseId::II => vec![],
            CaseId::III => vec![5.0, -5.0, 2.5, -2.5, 1.0],
            _ => vec![5.0, -5.0],
        }
    }

    pub fn s1(&self) -> usize {
        self.beta1().len()
    }

    pub fn s2(&self) -> usize {
        match self.case {
            CaseId::II => 5,
            CaseId::III => 0,
            _ => 3,
        }
    }

    /// `(omega, r)` of the error covariance `omega r^|s - t|`.
    pub fn error_params(&self) -> (f64, f64) {
        match self.case {
            CaseId::IV => (0.85, 0.6),
            CaseId::V => (0.95, 0.5),
            _ => (0.85, 0.5),
        }
    }

    pub fn family(&self) -> CorrelationFamily {
        match self.case {
            CaseId::IV => CorrelationFamily::Ar1,
            CaseId::V => CorrelationFamily::Banded,
            _ => CorrelationFamily::CompoundSymmetry,
        }
    }

    pub fn n_correlated(&self) -> usize {
        self.s1() + self.s2() + self.s0
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.m < 2 {
            return Err(Error::Config(format!("need n >= 2 and m >= 2, got n={} m={}", self.n, self.m)));
        }
        if self.n_correlated() > self.p {
            return Err(Error::Config(format!("s1 + s2 + s0 = {} exceeds p = {}", self.n_correlated(), self.p)));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho must lie in [0, 1), got {}", self.rho)));
        }
        Ok(())
    }

    pub fn truth(&self) -> TruthRecord {
        let (s1, s2) = (self.s1(), self.s2());
        TruthRecord {
            case: self.case,
            constant: self.beta1().into_iter().enumerate().collect(),
            varying: (s1..s1 + s2).collect(),
            spurious: (s1 + s2..s1 + s2 + self.s0).collect(),
        }
    }

    /// Correlation matrix of the first `s1 + s2 + s0` latent scores.
    pub fn correlation(&self) -> DMatrix<f64> {
        let q = self.n_correlated();
        DMatrix::from_fn(q, q, |a, b| {
            let d = a.abs_diff(b);
            match self.family() {
                CorrelationFamily::CompoundSymmetry => {
                    if d == 0 {
                        1.0
                    } else {
                        self.rho
                    }
                }
                CorrelationFamily::Ar1 => self.rho.powi(d as i32),
                CorrelationFamily::Banded => d as f64 / (2.0 * q as f64) + self.rho.powi(d as i32),
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub case: CaseId,
    /// `(covariate, value)`.
    pub constant: Vec<(usize, f64)>,
    pub varying: Vec<usize>,
    pub spurious: Vec<usize>,
}

impl TruthRecord {
    pub fn nonzero(&self) -> Vec<usize> {
        let mut v: Vec<usize> = self.constant.iter().map(|c| c.0).chain(self.varying.iter().copied()).collect();
        v.sort_unstable();
        v
    }

    /// Value of the `q`-th true varying coefficient at `t`.
    pub fn varying_at(&self, q: usize, t: f64) -> f64 {
        varying_truth(q, t)
    }
}

/// Per-replicate generator: stream `rep` of the master seed.
pub fn replicate_rng(master_seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(rep);
    rng
}

/// Symmetric square root factor `F` with `F Fᵀ = A` for a PSD matrix.
fn psd_factor(a: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if let Some(ch) = a.clone().cholesky() {
        return Ok(ch.l());
    }
    let (vals, vecs) = sorted_eigen(a);
    let top = vals[0].abs().max(1.0);
    if vals.iter().any(|&v| v < -1e-10 * top) {
        return Err(Error::InvalidInput(format!(
            "{what} is not positive semidefinite (smallest eigenvalue {:.3e})",
            vals[vals.len() - 1]
        )));
    }
    let d = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.max(0.0).sqrt()));
    Ok(vecs * DMatrix::from_diagonal(&d))
}

/// Latent scores `Z` (n x p); covariate `k` of subject `i` is
/// `x_k(t) = sqrt(2) sin(2 pi t) Z[i, k]`.
pub fn gen_covariates<R: Rng>(spec: &CaseSpec, rng: &mut R) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let q = spec.n_correlated();
    let factor = psd_factor(&spec.correlation(), "covariate correlation matrix")?;
    let mut z = DMatrix::zeros(spec.n, spec.p);
    let mut w = DVector::zeros(q);
    for i in 0..spec.n {
        for v in w.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let c = &factor * &w;
        for k in 0..q {
            z[(i, k)] = c[k];
        }
        for k in q..spec.p {
            z[(i, k)] = rng.sample(StandardNormal);
        }
    }
    Ok(z)
}

pub fn covariate_profile(t: f64) -> f64 {
    std::f64::consts::SQRT_2 * (2.0 * PI * t).sin()
}

/// Cholesky factor of `omega r^|t_j - t_k|`, with a jitter retry.
pub fn error_factor(omega: f64, r: f64, times: &[f64]) -> Result<DMatrix<f64>> {
    if !(omega > 0.0) || !(r > 0.0 && r < 1.0) {
        return Err(Error::Config(format!("error process needs omega > 0 and 0 < r < 1, got ({omega}, {r})")));
    }
    let m = times.len();
    let cov = DMatrix::from_fn(m, m, |a, b| omega * r.powf((times[a] - times[b]).abs()));
    if let Some(ch) = cov.clone().cholesky() {
        return Ok(ch.l());
    }
    let jittered = &cov + DMatrix::identity(m, m) * (JITTER * omega);
    jittered.cholesky().map(|c| c.l()).ok_or_else(|| Error::Singular("error covariance is indefinite".into()))
}

/// One draw of the error process for each subject's times.
pub fn gen_errors<R: Rng>(omega: f64, r: f64, times: &[Vec<f64>], rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let mut cache: Option<(&[f64], DMatrix<f64>)> = None;
    let mut out = Vec::with_capacity(times.len());
    for t in times {
        let reuse = matches!(&cache, Some((prev, _)) if *prev == t.as_slice());
        if !reuse {
            cache = Some((t.as_slice(), error_factor(omega, r, t)?));
        }
        let l = &cache.as_ref().unwrap().1;
        let w = DVector::from_fn(t.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
        out.push((l * w).as_slice().to_vec());
    }
    Ok(out)
}

pub fn design_times(m: usize) -> Vec<f64> {
    (0..m).map(|j| j as f64 / (m - 1) as f64).collect()
}

/// Simulated dataset and its truth. Covariates are named `x1..xp`.
pub fn gen_case_with<R: Rng>(spec: &CaseSpec, rng: &mut R) -> Result<(LongitudinalDataset, TruthRecord)> {
    spec.validate()?;
    let truth = spec.truth();
    let times = design_times(spec.m);
    let z = gen_covariates(spec, rng)?;
    let (omega, r) = spec.error_params();
    let errors = gen_errors(omega, r, &vec![times.clone(); spec.n], rng)?;
    let prof: Vec<f64> = times.iter().map(|&t| covariate_profile(t)).collect();
    let b0: Vec<f64> = times.iter().map(|&t| beta0_truth(t)).collect();
    let b2: Vec<Vec<f64>> =
        (0..truth.varying.len()).map(|q| times.iter().map(|&t| varying_truth(q, t)).collect()).collect();
    let subjects = (0..spec.n)
        .map(|i| {
            let covariates: Vec<Vec<f64>> =
                (0..spec.p).map(|k| prof.iter().map(|&s| s * z[(i, k)]).collect()).collect();
            let y = (0..spec.m)
                .map(|j| {
                    let mut v = b0[j] + errors[i][j];
                    for &(k, b) in &truth.constant {
                        v += b * covariates[k][j];
                    }
                    for (q, &k) in truth.varying.iter().enumerate() {
                        v += b2[q][j] * covariates[k][j];
                    }
                    v
                })
                .collect();
            SubjectRecord { id: format!("s{}", i + 1), times: times.clone(), y, covariates }
        })
        .collect();
    let names = (1..=spec.p).map(|k| format!("x{k}")).collect();
    Ok((LongitudinalDataset::new(names, subjects)?, truth))
}

pub fn gen_case(spec: &CaseSpec, seed: u64) -> Result<(LongitudinalDataset, TruthRecord)> {
    gen_case_with(spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Mean, median and `1.4826 * MAD` of a per-replicate statistic.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub robust_sd: f64,
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("no replicates to summarize".into()));
        }
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        let mut v = values.to_vec();
        let med = median(&mut v);
        let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
        Ok(Summary { mean, median: med, robust_sd: MAD_SCALE * median(&mut dev) })
    }
}

/// Outcome of screening and selection in one replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSelection {
    pub constant: Vec<usize>,
    pub varying: Vec<usize>,
    /// Minimum screening prefix containing the true model.
    pub mmms: Option<usize>,
}

impl ReplicateSelection {
    pub fn from_structure(s: &ModelStructure, mmms: Option<usize>) -> Self {
        Self { constant: s.constant_indices(), varying: s.varying.clone(), mmms }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionMetrics {
    pub reps: usize,
    /// `None` when the case has no true varying (constant) coefficient.
    pub cvar: Option<Summary>,
    pub cfix: Option<Summary>,
    pub size: Summary,
    pub under: f64,
    pub over: f64,
    pub tp: Summary,
    pub fp: Summary,
    pub tpvar: Summary,
    pub fpvar: Summary,
    pub tpfix: Summary,
    pub fpfix: Summary,
    pub mmms: Option<Summary>,
    /// Set when a single replicate makes every spread zero by construction.
    pub degenerate_sd: bool,
}

pub fn selection_metrics(reps: &[ReplicateSelection], truth: &TruthRecord) -> Result<SelectionMetrics> {
    if reps.is_empty() {
        return Err(Error::InvalidInput("no replicates".into()));
    }
    let tconst: Vec<usize> = truth.constant.iter().map(|c| c.0).collect();
    let tall = truth.nonzero();
    let mut cols: [Vec<f64>; 8] = Default::default();
    let (mut under, mut over) = (0usize, 0usize);
    for r in reps {
        let sel: Vec<usize> = r.constant.iter().chain(&r.varying).copied().collect();
        let tp = sel.iter().filter(|k| tall.contains(k)).count();
        let fp = sel.len() - tp;
        let tpvar = r.varying.iter().filter(|k| truth.varying.contains(k)).count();
        let tpfix = r.constant.iter().filter(|k| tconst.contains(k)).count();
        let vals = [
            tpvar as f64,
            tpfix as f64,
            sel.len() as f64,
            tp as f64,
            fp as f64,
            (r.varying.len() - tpvar) as f64,
            (r.constant.len() - tpfix) as f64,
            r.mmms.map_or(f64::NAN, |v| v as f64),
        ];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
        if tp < tall.len() {
            under += 1;
        } else if fp > 0 {
            over += 1;
        }
    }
    let nrep = reps.len() as f64;
    let frac = |v: &[f64], d: usize| -> Result<Option<Summary>> {
        if d == 0 {
            return Ok(None);
        }
        Summary::of(&v.iter().map(|x| x / d as f64).collect::<Vec<_>>()).map(Some)
    };
    let mmms = if reps.iter().all(|r| r.mmms.is_some()) { Some(Summary::of(&cols[7])?) } else { None };
    Ok(SelectionMetrics {
        reps: reps.len(),
        cvar: frac(&cols[0], truth.varying.len())?,
        cfix: frac(&cols[1], tconst.len())?,
        size: Summary::of(&cols[2])?,
        under: under as f64 / nrep,
        over: over as f64 / nrep,
        tp: Summary::of(&cols[3])?,
        fp: Summary::of(&cols[4])?,
        tpvar: Summary::of(&cols[0])?,
        fpvar: Summary::of(&cols[5])?,
        tpfix: Summary::of(&cols[1])?,
        fpfix: Summary::of(&cols[6])?,
        mmms,
        degenerate_sd: reps.len() == 1,
    })
}

/// Estimates of the true parameters in one replicate: constants in truth
/// order, then `beta0` and the true varying curves on the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicateEstimate {
    pub constants: Vec<f64>,
    pub curves: Vec<Vec<f64>>,
}

/// Maps a fitted semivarying model onto the true parameters. A true
/// constant fitted as varying contributes the grid average of its curve, a
/// true varying coefficient fitted as constant contributes a flat curve, and
/// an unselected one contributes zero.
pub fn align_estimate(
    truth: &TruthRecord,
    constant_idx: &[usize],
    beta1: &[f64],
    varying_idx: &[usize],
    curves: &[Vec<f64>],
    grid: &[f64],
) -> Result<ReplicateEstimate> {
    if beta1.len() != constant_idx.len() || curves.len() != varying_idx.len() + 1 {
        return Err(Error::Shape("estimate does not match its structure".into()));
    }
    if curves.iter().any(|c| c.len() != grid.len()) {
        return Err(Error::Shape("curve length differs from grid".into()));
    }
    let lookup = |k: usize| -> (Option<f64>, Option<&Vec<f64>>) {
        let c = constant_idx.iter().position(|&j| j == k).map(|q| beta1[q]);
        let v = varying_idx.iter().position(|&j| j == k).map(|q| &curves[q + 1]);
        (c, v)
    };
    let constants = truth
        .constant
        .iter()
        .map(|&(k, _)| match lookup(k) {
            (Some(c), _) => c,
            (None, Some(curve)) => trapezoid(grid, curve),
            _ => 0.0,
        })
        .collect();
    let mut out_curves = vec![curves[0].clone()];
    for &k in &truth.varying {
        out_curves.push(match lookup(k) {
            (_, Some(curve)) => curve.clone(),
            (Some(c), None) => vec![c; grid.len()],
            _ => vec![0.0; grid.len()],
        });
    }
    Ok(ReplicateEstimate { constants, curves: out_curves })
}

/// Trapezoid rule; with grid on [0, 1] this is the integral.
pub fn trapezoid(grid: &[f64], f: &[f64]) -> f64 {
    grid.windows(2).zip(f.windows(2)).map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1])).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRow {
    pub name: String,
    /// MAE for constants, MIAE for curves.
    pub mean_abs: f64,
    /// RMSE for constants, RMISE for curves.
    pub root_mean_sq: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimationMetrics {
    pub reps: usize,
    pub constants: Vec<ErrorRow>,
    pub curves: Vec<ErrorRow>,
}

pub fn estimation_metrics(reps: &[ReplicateEstimate], truth: &TruthRecord, grid: &[f64]) -> Result<EstimationMetrics> {
    if reps.is_empty() {
        return Err(Error::InvalidInput("no replicates".into()));
    }
    let nrep = reps.len() as f64;
    let mut constants = Vec::new();
    for (q, &(_, b)) in truth.constant.iter().enumerate() {
        let (mut a, mut s) = (0.0, 0.0);
        for r in reps {
            let e = r.constants.get(q).ok_or_else(|| Error::Shape("missing constant estimate".into()))? - b;
            a += e.abs();
            s += e * e;
        }
        constants.push(ErrorRow {
            name: format!("beta1{}", q + 1),
            mean_abs: a / nrep,
            root_mean_sq: (s / nrep).sqrt(),
        });
    }
    let mut curves = Vec::new();
    for c in 0..=truth.varying.len() {
        let true_curve: Vec<f64> =
            grid.iter().map(|&t| if c == 0 { beta0_truth(t) } else { varying_truth(c - 1, t) }).collect();
        let (mut a, mut s) = (0.0, 0.0);
        for r in reps {
            let est = r.curves.get(c).ok_or_else(|| Error::Shape("missing curve estimate".into()))?;
            let abs: Vec<f64> = est.iter().zip(&true_curve).map(|(e, t)| (e - t).abs()).collect();
            let sq: Vec<f64> = abs.iter().map(|v| v * v).collect();
            a += trapezoid(grid, &abs);
            s += trapezoid(grid, &sq);
        }
        let name = if c == 0 { "beta0".to_string() } else { format!("beta2{c}") };
        curves.push(ErrorRow { name, mean_abs: a / nrep, root_mean_sq: (s / nrep).sqrt() });
    }
    Ok(EstimationMetrics { reps: reps.len(), constants, curves })
}
