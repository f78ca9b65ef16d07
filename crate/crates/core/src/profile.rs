//! Profile least squares for the semivarying-coefficient model
//! `y(t) = beta0(t) + x1(t)' beta1 + x2(t)' beta2(t) + e(t)`.
//!
//! The varying part is fitted by local-linear smoothing in `t`; the constants
//! come from the closed-form profile estimator. With per-subject error
//! covariances `Lambda_i` every subject's local design and responses are first
//! premultiplied by `Lambda_i^{-1/2}` and the profile criterion is weighted by
//! `Lambda_i^{-1}`; without them the fit runs under working independence.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt17, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::gscad::report_grid;
use crate::ksmooth::{default_bandwidth_grid, pick_best, CvCurve, KernelFamily, KernelSpec, CV_TIE_REL};
use crate::linalg::{inverse_and_inverse_sqrt, scaled_rcond, sorted_eigen};

/// Eigenvalue floor (relative to the mean eigenvalue) for `Lambda_i^{-1}`.
pub const LAMBDA_FLOOR: f64 = 1e-8;
const LOCAL_RCOND_MIN: f64 = 1e-12;
const PROFILE_RCOND_MIN: f64 = 1e-10;
const WIDEN_FACTOR: f64 = 1.5;
const WIDEN_STEPS: usize = 5;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SemiVaryingSpec {
    /// Covariates with constant coefficients (`x1`).
    pub constant_idx: Vec<usize>,
    /// Covariates with varying coefficients (`x2`); the intercept is implicit.
    pub varying_idx: Vec<usize>,
}

impl SemiVaryingSpec {
    pub fn new(constant_idx: Vec<usize>, varying_idx: Vec<usize>) -> Self {
        Self { constant_idx, varying_idx }
    }

    pub fn s1(&self) -> usize {
        self.constant_idx.len()
    }

    pub fn s2(&self) -> usize {
        self.varying_idx.len()
    }

    pub fn validate(&self, p: usize) -> Result<()> {
        let mut seen = vec![false; p];
        for &k in self.constant_idx.iter().chain(&self.varying_idx) {
            if k >= p {
                return Err(Error::InvalidInput(format!("covariate index {k} out of range (p = {p})")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidInput(format!("covariate {k} listed twice in the model structure")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProfileOptions {
    pub kernel: KernelFamily,
    /// Fixed bandwidth; when absent it is chosen by leave-one-subject-out CV.
    pub h1: Option<f64>,
    /// CV grid; defaults to 8 log-spaced values in `[0.05, 0.5]` of the time range.
    pub h1_grid: Option<Vec<f64>>,
    /// Subject-resampling bootstrap replicates (0 disables).
    pub bootstrap: usize,
    pub seed: u64,
}

impl Default for ProfileOptions {
    fn default() -> Self {
        Self { kernel: KernelFamily::Epanechnikov, h1: None, h1_grid: None, bootstrap: 0, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiVaryingFit {
    pub spec: SemiVaryingSpec,
    pub beta1: Vec<f64>,
    pub beta1_se: Option<Vec<f64>>,
    pub grid: Vec<f64>,
    /// `curves[0]` is `beta0`, then one curve per varying covariate, each
    /// sampled on `grid`.
    pub curves: Vec<Vec<f64>>,
    /// Pointwise bootstrap standard errors aligned with `curves`.
    pub curve_se: Option<Vec<Vec<f64>>>,
    /// `y - x1' beta1 - beta0(t) - x2' beta2(t)` at every observation.
    pub residuals: Vec<f64>,
    pub h1: f64,
    pub cv: Option<CvCurve>,
    pub weighted: bool,
    /// Number of local fits that needed a wider bandwidth or a global fit.
    pub fallbacks: usize,
    pub bootstrap_failures: usize,
}

/// Local solution at a single `t0`.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalFit {
    /// `(beta0(t0), beta2(t0))`.
    pub values: Vec<f64>,
    /// Local slopes of the same functions.
    pub slopes: Vec<f64>,
    pub widened: bool,
}

/// Per-subject `Lambda_i^{-1}` and `Lambda_i^{-1/2}`.
#[derive(Clone, Debug)]
pub struct SubjectWeights {
    pub inv: Vec<DMatrix<f64>>,
    pub inv_sqrt: Vec<DMatrix<f64>>,
}

impl SubjectWeights {
    pub fn from_covariances(ds: &LongitudinalDataset, lambdas: &[DMatrix<f64>]) -> Result<Self> {
        if lambdas.len() != ds.n_subjects() {
            return Err(Error::Shape(format!("{} covariance blocks for {} subjects", lambdas.len(), ds.n_subjects())));
        }
        let mut inv = Vec::with_capacity(lambdas.len());
        let mut inv_sqrt = Vec::with_capacity(lambdas.len());
        for (i, l) in lambdas.iter().enumerate() {
            let m = ds.subject_len(i);
            if l.nrows() != m || l.ncols() != m {
                return Err(Error::Shape(format!(
                    "covariance block {i} is {}x{}, expected {m}x{m}",
                    l.nrows(),
                    l.ncols()
                )));
            }
            if l.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput(format!("covariance block {i} has non-finite entries")));
            }
            let (a, b) = inverse_and_inverse_sqrt(l, LAMBDA_FLOOR);
            inv.push(a);
            inv_sqrt.push(b);
        }
        Ok(Self { inv, inv_sqrt })
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            inv: idx.iter().map(|&i| self.inv[i].clone()).collect(),
            inv_sqrt: idx.iter().map(|&i| self.inv_sqrt[i].clone()).collect(),
        }
    }
}

/// Local moments `M = sum K v v'` and `R = sum K v r'` at one `tau`.
#[derive(Clone)]
struct LocalMoments {
    m: DMatrix<f64>,
    r: DMatrix<f64>,
}

impl LocalMoments {
    fn minus(&self, o: &LocalMoments) -> LocalMoments {
        LocalMoments { m: &self.m - &o.m, r: &self.r - &o.r }
    }
}

struct Engine<'a> {
    ds: &'a LongitudinalDataset,
    d: usize,
    s1: usize,
    /// Original-scale local regressors `(1, x2)`, `n_obs x d`.
    u: Vec<f64>,
    /// Transformed `Lambda^{-1/2} (1, x2)` and `Lambda^{-1/2} diag(t) (1, x2)`.
    a: Vec<f64>,
    b: Vec<f64>,
    /// Transformed `[y, x1]`, `n_obs x (1 + s1)`.
    resp: Vec<f64>,
    /// Original `[y, x1]`.
    orig: Vec<f64>,
    weights: Option<&'a SubjectWeights>,
    by_time: Vec<usize>,
    sorted_t: Vec<f64>,
    uniq: Vec<f64>,
    uniq_of_obs: Vec<usize>,
    family: KernelFamily,
}

impl<'a> Engine<'a> {
    fn new(
        ds: &'a LongitudinalDataset,
        spec: &SemiVaryingSpec,
        family: KernelFamily,
        weights: Option<&'a SubjectWeights>,
    ) -> Self {
        let nobs = ds.n_obs();
        let d = spec.s2() + 1;
        let s1 = spec.s1();
        let c = s1 + 1;
        let mut u = vec![0.0; nobs * d];
        let mut orig = vec![0.0; nobs * c];
        for o in 0..nobs {
            u[o * d] = 1.0;
            for (r, &k) in spec.varying_idx.iter().enumerate() {
                u[o * d + 1 + r] = ds.x(k, o);
            }
            orig[o * c] = ds.y()[o];
            for (r, &k) in spec.constant_idx.iter().enumerate() {
                orig[o * c + 1 + r] = ds.x(k, o);
            }
        }
        let times = ds.times();
        let (a, b, resp) = match weights {
            None => {
                let b = (0..nobs * d).map(|i| times[i / d] * u[i]).collect();
                (u.clone(), b, orig.clone())
            }
            Some(w) => {
                let mut a = vec![0.0; nobs * d];
                let mut b = vec![0.0; nobs * d];
                let mut resp = vec![0.0; nobs * c];
                for i in 0..ds.n_subjects() {
                    let range = ds.subject_range(i);
                    let l = &w.inv_sqrt[i];
                    for (ll, o) in range.clone().enumerate() {
                        for (jj, q) in range.clone().enumerate() {
                            let lv = l[(ll, jj)];
                            if lv == 0.0 {
                                continue;
                            }
                            for r in 0..d {
                                a[o * d + r] += lv * u[q * d + r];
                                b[o * d + r] += lv * times[q] * u[q * d + r];
                            }
                            for r in 0..c {
                                resp[o * c + r] += lv * orig[q * c + r];
                            }
                        }
                    }
                }
                (a, b, resp)
            }
        };
        let mut by_time: Vec<usize> = (0..nobs).collect();
        by_time.sort_by(|&p, &q| times[p].total_cmp(&times[q]));
        let sorted_t: Vec<f64> = by_time.iter().map(|&o| times[o]).collect();
        let mut uniq = sorted_t.clone();
        uniq.dedup();
        let uniq_of_obs = times.iter().map(|t| uniq.partition_point(|v| v < t)).collect();
        Self { ds, d, s1, u, a, b, resp, orig, weights, by_time, sorted_t, uniq, uniq_of_obs, family }
    }

    fn accumulate(
        &self,
        tau: f64,
        spec: Option<&KernelSpec>,
        obs: impl Iterator<Item = usize>,
        out: &mut LocalMoments,
    ) {
        let (d, c) = (self.d, self.s1 + 1);
        let mut v = vec![0.0; 2 * d];
        let times = self.ds.times();
        for o in obs {
            let k = spec.map_or(1.0, |s| s.eval(times[o] - tau));
            if k == 0.0 {
                continue;
            }
            for r in 0..d {
                let av = self.a[o * d + r];
                v[r] = av;
                v[d + r] = self.b[o * d + r] - tau * av;
            }
            for p in 0..2 * d {
                let kv = k * v[p];
                for q in p..2 * d {
                    out.m[(p, q)] += kv * v[q];
                }
                for q in 0..c {
                    out.r[(p, q)] += kv * self.resp[o * c + q];
                }
            }
        }
    }

    fn empty_moments(&self) -> LocalMoments {
        LocalMoments { m: DMatrix::zeros(2 * self.d, 2 * self.d), r: DMatrix::zeros(2 * self.d, self.s1 + 1) }
    }

    fn finish(mut lm: LocalMoments) -> LocalMoments {
        let n = lm.m.nrows();
        for p in 0..n {
            for q in 0..p {
                lm.m[(p, q)] = lm.m[(q, p)];
            }
        }
        lm
    }

    /// Moments over all observations (`spec = None`: unit kernel weights).
    fn moments(&self, tau: f64, spec: Option<&KernelSpec>) -> LocalMoments {
        let mut lm = self.empty_moments();
        match spec.and_then(|s| s.family.support().map(|r| r * s.h)) {
            Some(radius) => {
                let lo = self.sorted_t.partition_point(|&t| t < tau - radius);
                let hi = self.sorted_t.partition_point(|&t| t <= tau + radius);
                self.accumulate(tau, spec, self.by_time[lo..hi].iter().copied(), &mut lm);
            }
            None => self.accumulate(tau, spec, 0..self.ds.n_obs(), &mut lm),
        }
        Self::finish(lm)
    }

    fn subject_moments(&self, tau: f64, spec: &KernelSpec, i: usize) -> LocalMoments {
        let mut lm = self.empty_moments();
        self.accumulate(tau, Some(spec), self.ds.subject_range(i), &mut lm);
        Self::finish(lm)
    }

    /// Full local solution `M^{-1} R` (`2d x (1+s1)`), or `None` if singular.
    fn solve(lm: &LocalMoments) -> Option<DMatrix<f64>> {
        if scaled_rcond(&lm.m) < LOCAL_RCOND_MIN {
            return None;
        }
        lm.m.clone().cholesky().map(|ch| ch.solve(&lm.r))
    }

    /// Local solution with the widening / global fallback.
    fn local_solution(&self, tau: f64, h: f64) -> Result<(DMatrix<f64>, bool)> {
        let mut spec = KernelSpec::new(self.family, h)?;
        if let Some(s) = Self::solve(&self.moments(tau, Some(&spec))) {
            return Ok((s, false));
        }
        for _ in 0..WIDEN_STEPS {
            spec.h *= WIDEN_FACTOR;
            if let Some(s) = Self::solve(&self.moments(tau, Some(&spec))) {
                return Ok((s, true));
            }
        }
        Self::solve(&self.moments(tau, None)).map(|s| (s, true)).ok_or_else(|| {
            Error::Singular(format!(
                "local varying-coefficient design at t = {tau} is singular even without localization"
            ))
        })
    }

    /// `(r_y, RX)` at each observation from leading-block coefficients per
    /// unique time.
    fn profile_residuals(&self, coef: &[Option<DMatrix<f64>>], skip: Option<usize>) -> (Vec<f64>, Vec<f64>) {
        let (d, c) = (self.d, self.s1 + 1);
        let nobs = self.ds.n_obs();
        let mut ry = vec![0.0; nobs];
        let mut rx = vec![0.0; nobs * self.s1];
        let subj = self.ds.obs_subjects();
        for o in 0..nobs {
            if Some(subj[o]) == skip {
                continue;
            }
            let cm = coef[self.uniq_of_obs[o]].as_ref().expect("coefficients available");
            for q in 0..c {
                let mut s = 0.0;
                for r in 0..d {
                    s += self.u[o * d + r] * cm[(r, q)];
                }
                let res = self.orig[o * c + q] - s;
                if q == 0 {
                    ry[o] = res;
                } else {
                    rx[o * self.s1 + q - 1] = res;
                }
            }
        }
        (ry, rx)
    }

    /// Closed-form profile estimate of `beta1`.
    fn beta1(&self, ry: &[f64], rx: &[f64], skip: Option<usize>, names: &[String]) -> Result<Vec<f64>> {
        let s1 = self.s1;
        if s1 == 0 {
            return Ok(vec![]);
        }
        let mut a = DMatrix::<f64>::zeros(s1, s1);
        let mut g = DVector::<f64>::zeros(s1);
        for i in 0..self.ds.n_subjects() {
            if Some(i) == skip {
                continue;
            }
            let r = self.ds.subject_range(i);
            let m = r.len();
            let xi = DMatrix::from_fn(m, s1, |j, k| rx[(r.start + j) * s1 + k]);
            let yi = DVector::from_fn(m, |j, _| ry[r.start + j]);
            match self.weights {
                None => {
                    a += xi.tr_mul(&xi);
                    g += xi.tr_mul(&yi);
                }
                Some(w) => {
                    let wx = &w.inv[i] * &xi;
                    a += xi.tr_mul(&wx);
                    g += wx.tr_mul(&yi);
                }
            }
        }
        if scaled_rcond(&a) < PROFILE_RCOND_MIN {
            return Err(Error::RankDeficient(collinear_names(&a, names)));
        }
        let ch = a.clone().cholesky().ok_or_else(|| Error::RankDeficient(collinear_names(&a, names)))?;
        Ok(ch.solve(&g).as_slice().to_vec())
    }

    fn curve_values(coef: &DMatrix<f64>, beta1: &[f64], d: usize) -> Vec<f64> {
        (0..d)
            .map(|r| coef[(r, 0)] - beta1.iter().enumerate().map(|(q, b)| coef[(r, 1 + q)] * b).sum::<f64>())
            .collect()
    }

    /// Solutions at every unique observation time.
    fn coef_at_uniq(&self, h: f64) -> Result<(Vec<Option<DMatrix<f64>>>, usize)> {
        let sols: Vec<Result<(DMatrix<f64>, bool)>> =
            self.uniq.par_iter().map(|&tau| self.local_solution(tau, h)).collect();
        let mut out = Vec::with_capacity(sols.len());
        let mut fallbacks = 0;
        for s in sols {
            let (m, w) = s?;
            fallbacks += w as usize;
            out.push(Some(m.rows(0, self.d).into_owned()));
        }
        Ok((out, fallbacks))
    }

    fn loso_cv(&self, grid: &[f64], names: &[String]) -> Result<CvCurve> {
        let n = self.ds.n_subjects();
        if n < 2 {
            return Err(Error::InvalidInput("cross-validation needs at least two subjects".into()));
        }
        if grid.is_empty() {
            return Err(Error::Config("bandwidth grid is empty".into()));
        }
        let scale: f64 = self.ds.y().iter().map(|v| v * v).sum();
        let scores: Vec<Option<f64>> = grid
            .iter()
            .map(|&h| {
                let spec = KernelSpec::new(self.family, h).ok()?;
                let full: Vec<LocalMoments> = self.uniq.par_iter().map(|&tau| self.moments(tau, Some(&spec))).collect();
                let folds: Vec<Option<f64>> =
                    (0..n).into_par_iter().map(|i| self.fold_loss(&spec, &full, i, names)).collect();
                folds.into_iter().sum::<Option<f64>>().filter(|s| s.is_finite())
            })
            .collect();
        pick_best(grid, scores, CV_TIE_REL * scale)
    }

    fn fold_loss(&self, spec: &KernelSpec, full: &[LocalMoments], i: usize, names: &[String]) -> Option<f64> {
        let coef: Vec<Option<DMatrix<f64>>> = self
            .uniq
            .iter()
            .zip(full)
            .map(|(&tau, lm)| {
                let own = self.subject_moments(tau, spec, i);
                Self::solve(&lm.minus(&own)).map(|s| s.rows(0, self.d).into_owned())
            })
            .collect::<Option<Vec<_>>>()?
            .into_iter()
            .map(Some)
            .collect();
        let (ry, rx) = self.profile_residuals(&coef, Some(i));
        let beta1 = self.beta1(&ry, &rx, Some(i), names).ok()?;
        let (d, c) = (self.d, self.s1 + 1);
        let mut loss = 0.0;
        for o in self.ds.subject_range(i) {
            let cm = coef[self.uniq_of_obs[o]].as_ref()?;
            let vals = Self::curve_values(cm, &beta1, d);
            let mut pred: f64 = (0..d).map(|r| self.u[o * d + r] * vals[r]).sum();
            for q in 0..self.s1 {
                pred += self.orig[o * c + 1 + q] * beta1[q];
            }
            loss += (self.ds.y()[o] - pred).powi(2);
        }
        Some(loss)
    }
}

fn collinear_names(a: &DMatrix<f64>, names: &[String]) -> Vec<String> {
    let d = DVector::from_fn(a.nrows(), |i, _| a[(i, i)].max(f64::MIN_POSITIVE).sqrt());
    let scaled = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)] / (d[i] * d[j]));
    let (_, vecs) = sorted_eigen(&scaled);
    let v = vecs.column(a.nrows() - 1);
    let max = v.amax();
    let mut out: Vec<String> = (0..a.nrows()).filter(|&k| v[k].abs() >= 0.1 * max).map(|k| names[k].clone()).collect();
    if out.is_empty() {
        out = names.to_vec();
    }
    out
}

fn constant_names(ds: &LongitudinalDataset, spec: &SemiVaryingSpec) -> Vec<String> {
    spec.constant_idx.iter().map(|&k| ds.names()[k].clone()).collect()
}

fn weights_for(ds: &LongitudinalDataset, lambdas: Option<&[DMatrix<f64>]>) -> Result<Option<SubjectWeights>> {
    lambdas.map(|l| SubjectWeights::from_covariances(ds, l)).transpose()
}

/// How the refined fit uses the estimated covariances.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMethod {
    /// Each response is corrected by the conditional mean of its error given
    /// the subject's other pilot residuals, `y_j + sum_k (P_jk / P_jj) e_k`
    /// with `P = Lambda^{-1}`, and fitted with weights `P_jj`.
    #[default]
    ConditionalResidual,
    /// Local fits on `Lambda^{-1/2}`-transformed data, `beta1` weighted by
    /// `Lambda^{-1}`.
    Whitened,
}

/// Smallest bandwidth of the CV grid `opts` would search.
pub fn pilot_bandwidth(ds: &LongitudinalDataset, opts: &ProfileOptions) -> f64 {
    let times = ds.times();
    let (lo, hi) = times.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
    let grid = opts.h1_grid.clone().unwrap_or_else(|| default_bandwidth_grid(lo, hi));
    grid.into_iter().fold(f64::INFINITY, f64::min)
}

/// Working-independence fit at [`pilot_bandwidth`]; its residuals feed
/// [`RefineMethod::ConditionalResidual`].
pub fn pilot_residuals(ds: &LongitudinalDataset, spec: &SemiVaryingSpec, opts: &ProfileOptions) -> Result<Vec<f64>> {
    let pilot = ProfileOptions { h1: Some(pilot_bandwidth(ds, opts)), bootstrap: 0, ..opts.clone() };
    Ok(fit_semivarying(ds, spec, &pilot, None)?.residuals)
}

/// Responses corrected by the conditional error mean and the matching
/// diagonal covariances `1 / P_jj`.
pub fn conditional_pseudo_data(
    ds: &LongitudinalDataset,
    lambdas: &[DMatrix<f64>],
    pilot: &[f64],
) -> Result<(LongitudinalDataset, Vec<DMatrix<f64>>)> {
    let w = SubjectWeights::from_covariances(ds, lambdas)?;
    if pilot.len() != ds.n_obs() {
        return Err(Error::Shape(format!("{} pilot residuals for {} observations", pilot.len(), ds.n_obs())));
    }
    let mut y = ds.y().to_vec();
    let mut diag = Vec::with_capacity(ds.n_subjects());
    for (i, p) in w.inv.iter().enumerate() {
        let r = ds.subject_range(i);
        for (j, o) in r.clone().enumerate() {
            for (k, q) in r.clone().enumerate() {
                if k != j {
                    y[o] += p[(j, k)] / p[(j, j)] * pilot[q];
                }
            }
        }
        diag.push(DMatrix::from_diagonal(&DVector::from_iterator(r.len(), (0..r.len()).map(|j| 1.0 / p[(j, j)]))));
    }
    Ok((ds.with_response(y)?, diag))
}

/// Covariance-weighted fit. `pilot` overrides the pilot residuals of
/// [`RefineMethod::ConditionalResidual`]; residuals are always on the
/// original response scale.
pub fn fit_refined(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    opts: &ProfileOptions,
    lambdas: &[DMatrix<f64>],
    method: RefineMethod,
    pilot: Option<&[f64]>,
) -> Result<SemiVaryingFit> {
    match method {
        RefineMethod::Whitened => fit_semivarying(ds, spec, opts, Some(lambdas)),
        RefineMethod::ConditionalResidual => {
            let owned;
            let pilot = match pilot {
                Some(p) => p,
                None => {
                    owned = pilot_residuals(ds, spec, opts)?;
                    &owned
                }
            };
            let (pseudo, diag) = conditional_pseudo_data(ds, lambdas, pilot)?;
            let mut fit = fit_semivarying(&pseudo, spec, opts, Some(&diag))?;
            for ((r, y), yp) in fit.residuals.iter_mut().zip(ds.y()).zip(pseudo.y()) {
                *r += y - yp;
            }
            Ok(fit)
        }
    }
}

/// Local fit of `(beta0, beta2)` at `t0` for a given `beta1`.
pub fn local_fit_given_beta1(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    beta1: &[f64],
    t0: f64,
    h1: f64,
    family: KernelFamily,
    lambdas: Option<&[DMatrix<f64>]>,
) -> Result<LocalFit> {
    spec.validate(ds.n_covariates())?;
    if beta1.len() != spec.s1() {
        return Err(Error::Shape(format!("beta1 has length {}, expected {}", beta1.len(), spec.s1())));
    }
    let w = weights_for(ds, lambdas)?;
    let eng = Engine::new(ds, spec, family, w.as_ref());
    let (sol, widened) = eng.local_solution(t0, h1)?;
    let d = eng.d;
    let values = Engine::curve_values(&sol.rows(0, d).into_owned(), beta1, d);
    let slopes = Engine::curve_values(&sol.rows(d, d).into_owned(), beta1, d);
    Ok(LocalFit { values, slopes, widened })
}

/// Profile estimate of the constant coefficients at bandwidth `h1`.
pub fn profile_constant_fit(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    h1: f64,
    family: KernelFamily,
    lambdas: Option<&[DMatrix<f64>]>,
) -> Result<Vec<f64>> {
    spec.validate(ds.n_covariates())?;
    if spec.s1() == 0 {
        return Err(Error::InvalidInput("profile fit needs at least one constant coefficient".into()));
    }
    let w = weights_for(ds, lambdas)?;
    let eng = Engine::new(ds, spec, family, w.as_ref());
    let (coef, _) = eng.coef_at_uniq(h1)?;
    let (ry, rx) = eng.profile_residuals(&coef, None);
    eng.beta1(&ry, &rx, None, &constant_names(ds, spec))
}

/// Leave-one-subject-out CV over `grid` for the working-independence fit.
pub fn select_h1(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    grid: &[f64],
    family: KernelFamily,
) -> Result<CvCurve> {
    spec.validate(ds.n_covariates())?;
    for &h in grid {
        KernelSpec::new(family, h)?;
    }
    let eng = Engine::new(ds, spec, family, None);
    eng.loso_cv(grid, &constant_names(ds, spec))
}

struct CoreFit {
    beta1: Vec<f64>,
    curves: Vec<Vec<f64>>,
    residuals: Vec<f64>,
    fallbacks: usize,
}

fn core_fit(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    h1: f64,
    family: KernelFamily,
    weights: Option<&SubjectWeights>,
    grid: &[f64],
) -> Result<CoreFit> {
    let eng = Engine::new(ds, spec, family, weights);
    let (coef, mut fallbacks) = eng.coef_at_uniq(h1)?;
    let (ry, rx) = eng.profile_residuals(&coef, None);
    let beta1 = eng.beta1(&ry, &rx, None, &constant_names(ds, spec))?;
    let residuals: Vec<f64> =
        (0..ds.n_obs()).map(|o| ry[o] - (0..eng.s1).map(|q| rx[o * eng.s1 + q] * beta1[q]).sum::<f64>()).collect();
    let d = eng.d;
    let sols: Vec<Result<(DMatrix<f64>, bool)>> = grid.par_iter().map(|&t| eng.local_solution(t, h1)).collect();
    let mut curves = vec![Vec::with_capacity(grid.len()); d];
    for s in sols {
        let (m, w) = s?;
        fallbacks += w as usize;
        let vals = Engine::curve_values(&m.rows(0, d).into_owned(), &beta1, d);
        for (r, v) in vals.into_iter().enumerate() {
            curves[r].push(v);
        }
    }
    Ok(CoreFit { beta1, curves, residuals, fallbacks })
}

/// Full semivarying fit: bandwidth (fixed or by CV), constants, curves on the
/// 101-point grid, residuals and optional bootstrap standard errors. Passing
/// `lambdas` gives the covariance-weighted fit.
pub fn fit_semivarying(
    ds: &LongitudinalDataset,
    spec: &SemiVaryingSpec,
    opts: &ProfileOptions,
    lambdas: Option<&[DMatrix<f64>]>,
) -> Result<SemiVaryingFit> {
    spec.validate(ds.n_covariates())?;
    let weights = weights_for(ds, lambdas)?;
    let (h1, cv) = match opts.h1 {
        Some(h) => (KernelSpec::new(opts.kernel, h)?.h, None),
        None => {
            let times = ds.times();
            let (lo, hi) = times.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &t| (a.min(t), b.max(t)));
            let grid = opts.h1_grid.clone().unwrap_or_else(|| default_bandwidth_grid(lo, hi));
            let cv = select_h1(ds, spec, &grid, opts.kernel)?;
            (cv.best_h(), Some(cv))
        }
    };
    let grid = report_grid();
    let core = core_fit(ds, spec, h1, opts.kernel, weights.as_ref(), &grid)?;

    let (mut beta1_se, mut curve_se, mut failures) = (None, None, 0);
    if opts.bootstrap > 0 {
        let n = ds.n_subjects();
        let reps: Vec<Option<CoreFit>> = (0..opts.bootstrap)
            .into_par_iter()
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(b as u64 + 1);
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
                let sub = ds.subset_subjects(&idx).ok()?;
                let w = weights.as_ref().map(|w| w.subset(&idx));
                core_fit(&sub, spec, h1, opts.kernel, w.as_ref(), &grid).ok()
            })
            .collect();
        let ok: Vec<&CoreFit> = reps.iter().flatten().collect();
        failures = reps.len() - ok.len();
        if ok.len() >= 2 {
            beta1_se = Some((0..spec.s1()).map(|q| sample_sd(ok.iter().map(|f| f.beta1[q]))).collect());
            curve_se = Some(
                (0..core.curves.len())
                    .map(|r| (0..grid.len()).map(|g| sample_sd(ok.iter().map(|f| f.curves[r][g]))).collect())
                    .collect(),
            );
        }
    }

    Ok(SemiVaryingFit {
        spec: spec.clone(),
        beta1: core.beta1,
        beta1_se,
        grid,
        curves: core.curves,
        curve_se,
        residuals: core.residuals,
        h1,
        cv,
        weighted: weights.is_some(),
        fallbacks: core.fallbacks,
        bootstrap_failures: failures,
    })
}

fn sample_sd(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Normal quantile for two-sided 95% bands.
const Z95: f64 = 1.959963984540054;

/// `t,beta0,<varying names>[,lower_*,upper_*]`.
pub fn write_curves_csv<W: Write>(fit: &SemiVaryingFit, names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let labels: Vec<String> =
        std::iter::once("beta0".to_string()).chain(fit.spec.varying_idx.iter().map(|&k| names[k].clone())).collect();
    let mut header = vec!["t".to_string()];
    header.extend(labels.iter().cloned());
    if fit.curve_se.is_some() {
        header.extend(labels.iter().map(|l| format!("lower_{l}")));
        header.extend(labels.iter().map(|l| format!("upper_{l}")));
    }
    w.write_record(&header)?;
    for (g, &t) in fit.grid.iter().enumerate() {
        let mut row = vec![fmt17(t)];
        row.extend(fit.curves.iter().map(|c| fmt17(c[g])));
        if let Some(se) = &fit.curve_se {
            row.extend(fit.curves.iter().zip(se).map(|(c, s)| fmt17(c[g] - Z95 * s[g])));
            row.extend(fit.curves.iter().zip(se).map(|(c, s)| fmt17(c[g] + Z95 * s[g])));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `covariate,estimate,se` (empty `se` without bootstrap).
pub fn write_constants_csv<W: Write>(fit: &SemiVaryingFit, names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "estimate", "se"])?;
    for (q, &k) in fit.spec.constant_idx.iter().enumerate() {
        let se = fit.beta1_se.as_ref().map(|s| fmt17(s[q])).unwrap_or_default();
        w.write_record([names[k].clone(), fmt17(fit.beta1[q]), se])?;
    }
    w.flush()?;
    Ok(())
}
