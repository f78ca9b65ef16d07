//! Group SCAD penalized B-spline estimation with simultaneous variable
//! selection and constant/varying structure identification.
//!
//! Every coefficient function is written in the centered basis
//! `(1, C_2, ..., C_L)` so that its constant part `c` and functional part `f`
//! occupy separate coordinates. The objective is
//!
//! ```text
//! Q(theta) = ||y - g_0 - sum_k g_k x_k||_n^2 + sum_k { p_l1(|c_k|) + p_l2(||f_k||_L2) }
//! ```
//!
//! minimized by local quadratic approximation started from the unpenalized
//! least-squares fit.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::CenteredBasis;
use crate::data::{fmt17, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd_vec, RIDGE_FLOOR};
use crate::nis::RCOND_MIN;

pub const DEFAULT_A0: f64 = 3.7;

/// Number of points on the reporting grid for fitted curves.
pub const REPORT_GRID: usize = 101;

pub fn report_grid() -> Vec<f64> {
    (0..REPORT_GRID).map(|i| i as f64 / (REPORT_GRID - 1) as f64).collect()
}

/// SCAD penalty `p_lambda(u)`.
pub fn scad_penalty(u: f64, lambda: f64, a0: f64) -> Result<f64> {
    if !(u >= 0.0) {
        return Err(Error::InvalidInput(format!("SCAD argument must be nonnegative, got {u}")));
    }
    Ok(scad(u, lambda, a0))
}

pub(crate) fn scad(u: f64, lambda: f64, a0: f64) -> f64 {
    if u <= lambda {
        lambda * u
    } else if u <= a0 * lambda {
        -(u * u - 2.0 * a0 * lambda * u + lambda * lambda) / (2.0 * (a0 - 1.0))
    } else {
        (a0 + 1.0) * lambda * lambda / 2.0
    }
}

/// Derivative `p'_lambda(u)` for `u >= 0`.
pub fn scad_derivative(u: f64, lambda: f64, a0: f64) -> f64 {
    if u <= lambda {
        lambda
    } else {
        (a0 * lambda - u).max(0.0) / (a0 - 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScadConfig {
    pub a0: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    /// Absolute floor on the LQA weight denominators.
    pub lqa_eps: f64,
    /// Absolute threshold below which a constant or functional part is zero.
    pub zero_tol: f64,
    pub max_iter: usize,
    pub conv_tol: f64,
}

impl Default for ScadConfig {
    fn default() -> Self {
        Self {
            a0: DEFAULT_A0,
            lambda1: 0.0,
            lambda2: 0.0,
            lqa_eps: 1e-6,
            zero_tol: 1e-4,
            max_iter: 100,
            conv_tol: 1e-6,
        }
    }
}

impl ScadConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a0 > 2.0) || !self.a0.is_finite() {
            return Err(Error::Config(format!("SCAD a0 must exceed 2, got {}", self.a0)));
        }
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config("SCAD penalty levels must be nonnegative".into()));
        }
        if !(self.lqa_eps > 0.0 && self.zero_tol >= 0.0 && self.conv_tol > 0.0) || self.max_iter == 0 {
            return Err(Error::Config("SCAD tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// How the information criterion trades residual size against model size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BicForm {
    /// `RSS_n + K log N`.
    Plain,
    /// `log(RSS_n) + K log(N) / N`.
    LogRss,
    /// `log(RSS_n) + K log(n) / n` with `n` the number of subjects.
    #[default]
    Subject,
}

impl BicForm {
    pub fn value(self, rss: f64, k: usize, n_obs: usize, n_subjects: usize) -> f64 {
        let k = k as f64;
        let log_rss = rss.max(f64::MIN_POSITIVE).ln();
        let (big, n) = (n_obs as f64, n_subjects as f64);
        match self {
            BicForm::Plain => rss + k * big.ln(),
            BicForm::LogRss => log_rss + k * big.ln() / big,
            BicForm::Subject => log_rss + k * n.ln() / n,
        }
    }
}

/// Settings for the lambda search with `lambda1 = lambda2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuningConfig {
    pub a0: f64,
    /// Number of log-spaced grid points.
    pub grid_size: usize,
    /// Grid endpoints as multiples of `sd(y)`.
    pub grid_lo: f64,
    pub grid_hi: f64,
    /// Explicit grid (absolute values); overrides the log-spaced one.
    pub lambdas: Option<Vec<f64>>,
    pub lqa_eps_rel: f64,
    pub zero_tol_rel: f64,
    pub max_iter: usize,
    pub conv_tol: f64,
    pub bic: BicForm,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            a0: DEFAULT_A0,
            grid_size: 30,
            grid_lo: 1e-3,
            grid_hi: 1.0,
            lambdas: None,
            lqa_eps_rel: 1e-6,
            zero_tol_rel: 1e-4,
            max_iter: 100,
            conv_tol: 1e-6,
            bic: BicForm::default(),
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        match &self.lambdas {
            Some(l) if l.is_empty() || l.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) => {
                return Err(Error::Config("lambda grid must be nonempty with nonnegative finite values".into()))
            }
            None if self.grid_size == 0 || !(self.grid_lo > 0.0) || !(self.grid_hi >= self.grid_lo) => {
                return Err(Error::Config("lambda grid needs grid_size >= 1 and 0 < grid_lo <= grid_hi".into()))
            }
            _ => {}
        }
        if !(self.lqa_eps_rel > 0.0 && self.zero_tol_rel >= 0.0) {
            return Err(Error::Config("lqa_eps_rel must be positive and zero_tol_rel nonnegative".into()));
        }
        self.scad(0.0, 1.0).validate()
    }

    pub fn grid(&self, response_sd: f64) -> Vec<f64> {
        if let Some(l) = &self.lambdas {
            return l.clone();
        }
        log_grid(self.grid_lo * response_sd, self.grid_hi * response_sd, self.grid_size)
    }

    pub fn scad(&self, lambda: f64, response_sd: f64) -> ScadConfig {
        let scale = if response_sd > 0.0 { response_sd } else { 1.0 };
        ScadConfig {
            a0: self.a0,
            lambda1: lambda,
            lambda2: lambda,
            lqa_eps: self.lqa_eps_rel * scale,
            zero_tol: self.zero_tol_rel * scale,
            max_iter: self.max_iter,
            conv_tol: self.conv_tol,
        }
    }
}

pub(crate) fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Covariate indices (into the dataset) split by fitted structure.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelStructure {
    pub zero: Vec<usize>,
    /// `(covariate, fitted constant)`.
    pub constant: Vec<(usize, f64)>,
    pub varying: Vec<usize>,
}

impl ModelStructure {
    pub fn selected(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.constant.iter().map(|c| c.0).chain(self.varying.iter().copied()).collect();
        s.sort_unstable();
        s
    }

    pub fn constant_indices(&self) -> Vec<usize> {
        self.constant.iter().map(|c| c.0).collect()
    }

    /// Parameter count: `L` for the intercept, 1 per constant, `L` per varying.
    pub fn n_params(&self, l: usize) -> usize {
        l + self.constant.len() + l * self.varying.len()
    }
}

/// Squared-loss pieces of the spline regression restricted to `active`.
#[derive(Clone, Debug)]
pub struct GscadDesign {
    basis: CenteredBasis,
    active: Vec<usize>,
    names: Vec<String>,
    gram: DMatrix<f64>,
    rhs: DVector<f64>,
    yy: f64,
    functional_gram_inv: DMatrix<f64>,
    n_obs: usize,
    n_subjects: usize,
    response_sd: f64,
}

impl GscadDesign {
    pub fn new(ds: &LongitudinalDataset, basis: &CenteredBasis, active: &[usize]) -> Result<Self> {
        let p = ds.n_covariates();
        let mut seen = vec![false; p];
        for &k in active {
            if k >= p {
                return Err(Error::InvalidInput(format!("covariate index {k} out of range (p = {p})")));
            }
            if std::mem::replace(&mut seen[k], true) {
                return Err(Error::InvalidInput(format!("covariate index {k} listed twice")));
            }
        }
        let l = basis.dim();
        let dim = (active.len() + 1) * l;
        let nobs = ds.n_obs();
        if dim > nobs {
            return Err(Error::DimensionTooLarge { params: dim, observations: nobs });
        }
        let w = ds.obs_weights();
        let mut z = DMatrix::<f64>::zeros(nobs, dim);
        let mut row = vec![0.0; l];
        for obs in 0..nobs {
            basis.eval_into(ds.times()[obs], &mut row);
            let sw = w[obs].sqrt();
            for j in 0..l {
                z[(obs, j)] = sw * row[j];
            }
            for (pos, &k) in active.iter().enumerate() {
                let xv = sw * ds.x(k, obs);
                for j in 0..l {
                    z[(obs, (pos + 1) * l + j)] = xv * row[j];
                }
            }
        }
        let ys = DVector::from_iterator(nobs, (0..nobs).map(|o| w[o].sqrt() * ds.y()[o]));
        let gram = z.tr_mul(&z);
        let rhs = z.tr_mul(&ys);
        let functional_gram_inv = basis
            .functional_gram()
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Singular("functional Gram of the spline basis".into()))?;
        Ok(Self {
            functional_gram_inv,
            basis: basis.clone(),
            active: active.to_vec(),
            names: active.iter().map(|&k| ds.names()[k].clone()).collect(),
            gram,
            rhs,
            yy: ys.norm_squared(),
            n_obs: nobs,
            n_subjects: ds.n_subjects(),
            response_sd: ds.response_sd(),
        })
    }

    pub fn basis(&self) -> &CenteredBasis {
        &self.basis
    }

    pub fn active(&self) -> &[usize] {
        &self.active
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn n_obs(&self) -> usize {
        self.n_obs
    }

    pub fn n_subjects(&self) -> usize {
        self.n_subjects
    }

    pub fn response_sd(&self) -> f64 {
        self.response_sd
    }

    pub fn dim(&self) -> usize {
        self.gram.nrows()
    }

    /// `||y - Z theta||_n^2`.
    pub fn loss(&self, theta: &DVector<f64>) -> f64 {
        let gt = &self.gram * theta;
        (theta.dot(&gt) - 2.0 * self.rhs.dot(theta) + self.yy).max(0.0)
    }

    fn block(&self, pos: usize) -> usize {
        (pos + 1) * self.basis.dim()
    }

    /// `(|c_k|, ||f_k||_L2)` of covariate block `pos`.
    pub fn part_norms(&self, theta: &DVector<f64>, pos: usize) -> (f64, f64) {
        let (s, l) = (self.block(pos), self.basis.dim());
        let f = self.basis.functional_norm_sq(&theta.as_slice()[s + 1..s + l]).sqrt();
        (theta[s].abs(), f)
    }

    /// Exact penalized objective.
    pub fn objective(&self, theta: &DVector<f64>, cfg: &ScadConfig) -> f64 {
        let mut q = self.loss(theta);
        for pos in 0..self.active.len() {
            let (c, f) = self.part_norms(theta, pos);
            q += scad(c, cfg.lambda1, cfg.a0) + scad(f, cfg.lambda2, cfg.a0);
        }
        q
    }
}

/// Unpenalized weighted least squares in centered coordinates.
pub fn fit_unpenalized(design: &GscadDesign) -> Result<DVector<f64>> {
    solve_spd_vec(&design.gram, &design.rhs, RCOND_MIN, RIDGE_FLOOR)
        .map(|(v, _)| v)
        .ok_or_else(|| Error::Singular("spline regression Gram matrix".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScadFit {
    /// Centered-basis coefficients, intercept block first, then one block per
    /// active covariate.
    pub theta: Vec<f64>,
    pub active: Vec<usize>,
    pub names: Vec<String>,
    pub basis_dim: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `||y - fit||_n^2` at the returned coefficients.
    pub rss: f64,
    pub structure: ModelStructure,
}

impl ScadFit {
    pub fn block(&self, pos: usize) -> &[f64] {
        let l = self.basis_dim;
        &self.theta[pos * l..(pos + 1) * l]
    }

    pub fn intercept_block(&self) -> &[f64] {
        self.block(0)
    }

    /// Block of dataset covariate `k`, if it was active.
    pub fn covariate_block(&self, k: usize) -> Option<&[f64]> {
        self.active.iter().position(|&a| a == k).map(|pos| self.block(pos + 1))
    }
}

/// Zero, constant or varying per active covariate.
pub fn classify_structure(fit: &ScadFit, basis: &CenteredBasis, zero_tol: f64) -> ModelStructure {
    let l = fit.basis_dim;
    let mut s = ModelStructure::default();
    for (pos, &k) in fit.active.iter().enumerate() {
        let b = fit.block(pos + 1);
        let c = b[0];
        let f = basis.functional_norm_sq(&b[1..l]).sqrt();
        if f <= zero_tol {
            if c.abs() <= zero_tol {
                s.zero.push(k);
            } else {
                s.constant.push((k, c));
            }
        } else {
            s.varying.push(k);
        }
    }
    s
}

/// Penalized fit at fixed `(lambda1, lambda2)`.
pub fn fit_group_scad(design: &GscadDesign, cfg: &ScadConfig) -> Result<ScadFit> {
    cfg.validate()?;
    let init = fit_unpenalized(design)?;
    Ok(lqa(design, cfg, init))
}

const DESCENT_SLACK: f64 = 1e-10;

fn lqa(design: &GscadDesign, cfg: &ScadConfig, init: DVector<f64>) -> ScadFit {
    let l = design.basis.dim();
    let q = design.active.len();
    let mf = design.basis.functional_gram();
    // Whether the constant / functional part of each covariate is still free.
    let mut alive_c = vec![true; q];
    let mut alive_f = vec![true; q];
    let mut theta = init;
    let mut obj = design.objective(&theta, cfg);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;
    let penalized = cfg.lambda1 > 0.0 || cfg.lambda2 > 0.0;

    while penalized && iterations < cfg.max_iter {
        iterations += 1;
        let mut free: Vec<usize> = (0..l).collect();
        for pos in 0..q {
            let s = design.block(pos);
            if alive_c[pos] {
                free.push(s);
            }
            if alive_f[pos] {
                free.extend(s + 1..s + l);
            }
        }
        let nf = free.len();
        let mut a = DMatrix::from_fn(nf, nf, |i, j| design.gram[(free[i], free[j])]);
        let rhs = DVector::from_fn(nf, |i, _| design.rhs[free[i]]);
        let mut at = l;
        for pos in 0..q {
            let (c, f) = design.part_norms(&theta, pos);
            if alive_c[pos] {
                a[(at, at)] += 0.5 * scad_derivative(c, cfg.lambda1, cfg.a0) / c.max(cfg.lqa_eps);
                at += 1;
            }
            if alive_f[pos] {
                let wf = 0.5 * scad_derivative(f, cfg.lambda2, cfg.a0) / f.max(cfg.lqa_eps);
                for i in 0..l - 1 {
                    for j in 0..l - 1 {
                        a[(at + i, at + j)] += wf * mf[(i, j)];
                    }
                }
                at += l - 1;
            }
        }
        let Some((sol, _)) = solve_spd_vec(&a, &rhs, RCOND_MIN, RIDGE_FLOOR) else {
            break;
        };
        let mut next = DVector::zeros(theta.len());
        for (i, &c) in free.iter().enumerate() {
            next[c] = sol[i];
        }

        // Parts below zero_tol, or small parts for which zero satisfies the
        // block subgradient condition, are set to exactly zero provided the
        // clamped iterate does not increase the objective.
        let tiny = small_parts(design, &next, &alive_c, &alive_f, cfg.zero_tol, cfg.zero_tol);
        let small = small_parts(design, &next, &alive_c, &alive_f, cfg.lambda1, cfg.lambda2);
        // Loss gradient with a single part set to zero, one part at a time.
        let grad = (&design.gram * &next - &design.rhs) * 2.0;
        let kkt: Vec<(usize, bool)> = small
            .iter()
            .copied()
            .filter(|&(pos, is_c)| {
                let s = design.block(pos);
                if is_c {
                    (grad[s] - 2.0 * design.gram[(s, s)] * next[s]).abs() <= cfg.lambda1
                } else {
                    let own = design.gram.view((s + 1, s + 1), (l - 1, l - 1)) * next.rows(s + 1, l - 1);
                    let g = grad.rows(s + 1, l - 1) - own * 2.0;
                    g.dot(&(&design.functional_gram_inv * &g)) <= cfg.lambda2 * cfg.lambda2
                }
            })
            .chain(tiny.iter().copied())
            .collect();
        let mut accepted = None;
        for kill in [kkt, tiny] {
            if kill.is_empty() {
                continue;
            }
            let mut clamped = next.clone();
            zero_parts(design, &mut clamped, &kill);
            let o = design.objective(&clamped, cfg);
            if o <= obj + DESCENT_SLACK {
                for &(pos, is_c) in &kill {
                    if is_c {
                        alive_c[pos] = false;
                    } else {
                        alive_f[pos] = false;
                    }
                }
                accepted = Some((clamped, o));
                break;
            }
        }
        let (cand, cand_obj) = accepted.unwrap_or_else(|| {
            let o = design.objective(&next, cfg);
            (next, o)
        });
        if cand_obj > obj + DESCENT_SLACK {
            // Only possible through the denominator floor; keep the last iterate.
            break;
        }
        let change = (&cand - &theta).norm() / theta.norm().max(f64::MIN_POSITIVE);
        theta = cand;
        obj = cand_obj;
        trace.push(obj);
        if change < cfg.conv_tol {
            converged = true;
            break;
        }
    }
    if !penalized {
        converged = true;
    }

    let fit = ScadFit {
        rss: design.loss(&theta),
        theta: theta.as_slice().to_vec(),
        active: design.active.clone(),
        names: design.names.clone(),
        basis_dim: l,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        objective_trace: trace,
        converged,
        iterations,
        structure: ModelStructure::default(),
    };
    let structure = classify_structure(&fit, &design.basis, cfg.zero_tol);
    ScadFit { structure, ..fit }
}

/// Alive parts with norm at most the given bound, as `(pos, is_constant)`.
fn small_parts(
    design: &GscadDesign,
    theta: &DVector<f64>,
    alive_c: &[bool],
    alive_f: &[bool],
    bound_c: f64,
    bound_f: f64,
) -> Vec<(usize, bool)> {
    let mut out = Vec::new();
    for pos in 0..alive_c.len() {
        let (c, f) = design.part_norms(theta, pos);
        if alive_c[pos] && c <= bound_c {
            out.push((pos, true));
        }
        if alive_f[pos] && f <= bound_f {
            out.push((pos, false));
        }
    }
    out
}

fn zero_parts(design: &GscadDesign, theta: &mut DVector<f64>, parts: &[(usize, bool)]) {
    let l = design.basis.dim();
    for &(pos, is_c) in parts {
        let s = design.block(pos);
        if is_c {
            theta[s] = 0.0;
        } else {
            theta.rows_mut(s + 1, l - 1).fill(0.0);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BicPath {
    pub lambdas: Vec<f64>,
    pub bic: Vec<f64>,
    pub fits: Vec<ScadFit>,
    pub best: usize,
}

impl BicPath {
    pub fn best_fit(&self) -> &ScadFit {
        &self.fits[self.best]
    }

    pub fn best_lambda(&self) -> f64 {
        self.lambdas[self.best]
    }
}

/// Fits every lambda on the grid (`lambda1 = lambda2`) and keeps the one with
/// the smallest information criterion among converged fits; ties go to the
/// larger lambda.
pub fn bic_path(design: &GscadDesign, tuning: &TuningConfig) -> Result<BicPath> {
    tuning.validate()?;
    let lambdas = tuning.grid(design.response_sd);
    let init = fit_unpenalized(design)?;
    let l = design.basis.dim();
    let fits: Vec<ScadFit> =
        lambdas.par_iter().map(|&lam| lqa(design, &tuning.scad(lam, design.response_sd), init.clone())).collect();
    let bic: Vec<f64> = fits
        .iter()
        .map(|f| tuning.bic.value(f.rss, f.structure.n_params(l), design.n_obs, design.n_subjects))
        .collect();
    let mut best: Option<usize> = None;
    for i in 0..fits.len() {
        if !fits[i].converged {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(b) => {
                let better = bic[i] < bic[b] || (bic[i] == bic[b] && lambdas[i] > lambdas[b]);
                Some(if better { i } else { b })
            }
        };
    }
    let Some(best) = best else {
        let diag: Vec<String> = fits
            .iter()
            .map(|f| {
                format!(
                    "lambda={:.4e}: {} iterations, objective {:.6e}",
                    f.lambda1,
                    f.iterations,
                    f.objective_trace.last().unwrap_or(&f64::NAN)
                )
            })
            .collect();
        return Err(Error::NoConvergentFit(diag.join("; ")));
    };
    Ok(BicPath { lambdas, bic, fits, best })
}

/// `covariate,status,constant` for every active covariate.
pub fn write_structure_csv<W: Write>(fit: &ScadFit, names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["covariate", "status", "constant"])?;
    for &k in &fit.active {
        let s = &fit.structure;
        let (status, value) = if let Some(&(_, c)) = s.constant.iter().find(|c| c.0 == k) {
            ("constant", fmt17(c))
        } else if s.varying.contains(&k) {
            ("varying", String::new())
        } else {
            ("zero", String::new())
        };
        w.write_record([names[k].as_str(), status, value.as_str()])?;
    }
    w.flush()?;
    Ok(())
}

/// Intercept and varying coefficient curves on the 101-point grid:
/// `t,beta0,<varying names>`.
pub fn write_scad_curves_csv<W: Write>(
    fit: &ScadFit,
    basis: &CenteredBasis,
    names: &[String],
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["t".to_string(), "beta0".to_string()];
    header.extend(fit.structure.varying.iter().map(|&k| names[k].clone()));
    w.write_record(&header)?;
    for t in report_grid() {
        let mut row = vec![fmt17(t), fmt17(basis.curve(fit.intercept_block(), t))];
        for &k in &fit.structure.varying {
            let b = fit.covariate_block(k).expect("varying covariate is active");
            row.push(fmt17(basis.curve(b, t)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}
