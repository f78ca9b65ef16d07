//! Nonparametric estimation of the error covariance `phi(u, v)` from
//! residuals: a bivariate local-linear surface for the smooth part `psi` from
//! off-diagonal residual products, truncation to a positive semidefinite
//! operator, and a local-linear variance function on the diagonal.

use std::io::Write;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt17, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::ksmooth::{
    default_bandwidth_grid, local_linear_1d, loso_local_linear, pick_best, CvCurve, KernelFamily, KernelSpec,
    CV_TIE_REL,
};
use crate::linalg::sorted_eigen;
use crate::profile::SemiVaryingFit;

pub const DEFAULT_GRID: usize = 101;
const FLOOR_REL: f64 = 1e-6;
const FLOOR_ABS: f64 = 1e-12;
const WIDEN_FACTOR: f64 = 1.5;
const WIDEN_STEPS: usize = 5;
const RCOND_MIN: f64 = 1e-10;

/// Residuals `(t_ij, e_ij)` grouped by subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSet {
    pub subjects: Vec<Vec<(f64, f64)>>,
}

impl ResidualSet {
    /// Groups per-observation residuals by the dataset's subjects.
    pub fn from_values(ds: &LongitudinalDataset, values: &[f64]) -> Result<Self> {
        if values.len() != ds.n_obs() {
            return Err(Error::Shape(format!("{} residuals for {} observations", values.len(), ds.n_obs())));
        }
        let subjects =
            (0..ds.n_subjects()).map(|i| ds.subject_range(i).map(|o| (ds.times()[o], values[o])).collect()).collect();
        Ok(Self { subjects })
    }

    pub fn values(&self) -> Vec<f64> {
        self.subjects.iter().flatten().map(|p| p.1).collect()
    }

    #[cfg(test)]
    fn scaled(&self, c: f64) -> Self {
        Self { subjects: self.subjects.iter().map(|s| s.iter().map(|&(t, e)| (t, c * e)).collect()).collect() }
    }
}

/// Linear interpolation of a function sampled on an equispaced grid over [0, 1].
pub fn interp_grid(values: &[f64], t: f64) -> f64 {
    let g = values.len();
    if g == 1 {
        return values[0];
    }
    let x = t.clamp(0.0, 1.0) * (g - 1) as f64;
    let i = (x.floor() as usize).min(g - 2);
    let f = x - i as f64;
    if f == 0.0 {
        values[i]
    } else {
        values[i] * (1.0 - f) + values[i + 1] * f
    }
}

/// Residuals of a semivarying fit with curves evaluated by linear
/// interpolation on the fit's grid.
pub fn residuals(ds: &LongitudinalDataset, fit: &SemiVaryingFit) -> Result<ResidualSet> {
    fit.spec.validate(ds.n_covariates())?;
    if fit.beta1.len() != fit.spec.s1() || fit.curves.len() != fit.spec.s2() + 1 {
        return Err(Error::Shape("fit does not match its model structure".into()));
    }
    let values: Vec<f64> = (0..ds.n_obs())
        .map(|o| {
            let t = ds.times()[o];
            let mut r = ds.y()[o] - interp_grid(&fit.curves[0], t);
            for (q, &k) in fit.spec.constant_idx.iter().enumerate() {
                r -= ds.x(k, o) * fit.beta1[q];
            }
            for (q, &k) in fit.spec.varying_idx.iter().enumerate() {
                r -= ds.x(k, o) * interp_grid(&fit.curves[q + 1], t);
            }
            r
        })
        .collect();
    ResidualSet::from_values(ds, &values)
}

/// Distinct `(s, t)` locations of off-diagonal residual products with their
/// multiplicity and summed product, sorted by `s` then `t`.
#[derive(Clone, Debug, Default)]
struct PairCloud {
    s: Vec<f64>,
    t: Vec<f64>,
    count: Vec<f64>,
    sum: Vec<f64>,
}

impl PairCloud {
    fn build(pairs: &mut [(f64, f64, f64)]) -> Self {
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
        let mut c = PairCloud::default();
        for &(s, t, z) in pairs.iter() {
            if c.s.last() == Some(&s) && c.t.last() == Some(&t) {
                *c.count.last_mut().unwrap() += 1.0;
                *c.sum.last_mut().unwrap() += z;
            } else {
                c.s.push(s);
                c.t.push(t);
                c.count.push(1.0);
                c.sum.push(z);
            }
        }
        c
    }

    fn subject_pairs(sub: &[(f64, f64)]) -> Vec<(f64, f64, f64)> {
        let mut out = Vec::with_capacity(sub.len() * sub.len().saturating_sub(1));
        for (j, &(tj, ej)) in sub.iter().enumerate() {
            for (k, &(tk, ek)) in sub.iter().enumerate() {
                if j != k {
                    out.push((tj, tk, ej * ek));
                }
            }
        }
        out
    }

    fn from_residuals(res: &ResidualSet) -> Self {
        let mut all: Vec<(f64, f64, f64)> = res.subjects.iter().flat_map(|s| Self::subject_pairs(s)).collect();
        Self::build(&mut all)
    }

    fn len(&self) -> usize {
        self.s.len()
    }

    /// Weighted moments of the plane fit at `(u, v)`; `spec = None` uses unit weights.
    fn moments(&self, u: f64, v: f64, spec: Option<&KernelSpec>) -> Moments2 {
        let (lo, hi) = match spec.and_then(|k| k.family.support().map(|r| r * k.h)) {
            Some(r) => (self.s.partition_point(|&s| s < u - r), self.s.partition_point(|&s| s <= u + r)),
            None => (0, self.len()),
        };
        let mut m = Moments2::default();
        for i in lo..hi {
            let (ds, dt) = (self.s[i] - u, self.t[i] - v);
            let w = match spec {
                Some(k) => {
                    let kt = k.eval(dt);
                    if kt == 0.0 {
                        continue;
                    }
                    k.eval(ds) * kt
                }
                None => 1.0,
            };
            if w > 0.0 {
                m.add(ds, dt, self.count[i] * w, self.sum[i] * w);
            }
        }
        m
    }
}

#[derive(Clone, Copy, Debug, Default)]
struct Moments2 {
    s: Matrix3<f64>,
    r: Vector3<f64>,
}

impl Moments2 {
    #[inline]
    fn add(&mut self, ds: f64, dt: f64, w: f64, wz: f64) {
        let x = Vector3::new(1.0, ds, dt);
        self.s += x * x.transpose() * w;
        self.r += x * wz;
    }

    fn minus(&self, o: &Moments2) -> Moments2 {
        Moments2 { s: self.s - o.s, r: self.r - o.r }
    }

    fn solve(&self) -> Option<f64> {
        let d = Vector3::new(self.s[(0, 0)], self.s[(1, 1)], self.s[(2, 2)]);
        if d.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let scaled = Matrix3::from_fn(|i, j| self.s[(i, j)] / (d[i] * d[j]).sqrt());
        let ev = SymmetricEigen::new(scaled).eigenvalues;
        if !(ev.min() > RCOND_MIN * ev.max()) {
            return None;
        }
        self.s.cholesky().map(|ch| ch.solve(&self.r)[0])
    }
}

/// `psi~(u, v)` with the widening / global-plane / mean fallback. Returns the
/// estimate and whether a fallback was used.
fn psi_at(cloud: &PairCloud, u: f64, v: f64, spec: &KernelSpec) -> (f64, bool) {
    if let Some(a) = cloud.moments(u, v, Some(spec)).solve() {
        return (a, false);
    }
    let mut wide = *spec;
    for _ in 0..WIDEN_STEPS {
        wide.h *= WIDEN_FACTOR;
        if let Some(a) = cloud.moments(u, v, Some(&wide)).solve() {
            return (a, true);
        }
    }
    let m = cloud.moments(u, v, None);
    if let Some(a) = m.solve() {
        return (a, true);
    }
    (if m.s[(0, 0)] > 0.0 { m.r[0] / m.s[(0, 0)] } else { 0.0 }, true)
}

/// Raw (symmetrized, not yet truncated) surface on a `G x G` grid.
#[derive(Clone, Debug)]
pub struct RawSurface {
    pub grid: Vec<f64>,
    pub values: DMatrix<f64>,
    pub fallbacks: usize,
}

pub fn unit_grid(g: usize) -> Vec<f64> {
    if g == 1 {
        return vec![0.5];
    }
    (0..g).map(|i| i as f64 / (g - 1) as f64).collect()
}

/// Bivariate local-linear smoothing of off-diagonal residual products.
pub fn estimate_psi(res: &ResidualSet, h2: f64, grid_size: usize, family: KernelFamily) -> Result<RawSurface> {
    let spec = KernelSpec::new(family, h2)?;
    if grid_size == 0 {
        return Err(Error::Config("covariance grid size must be positive".into()));
    }
    let cloud = PairCloud::from_residuals(res);
    if cloud.len() == 0 {
        return Err(Error::NotEstimable("no subject has two or more observations".into()));
    }
    let grid = unit_grid(grid_size);
    let cells: Vec<(f64, bool)> = (0..grid_size * grid_size)
        .into_par_iter()
        .map(|idx| psi_at(&cloud, grid[idx / grid_size], grid[idx % grid_size], &spec))
        .collect();
    let fallbacks = cells.iter().filter(|c| c.1).count();
    let raw = DMatrix::from_fn(grid_size, grid_size, |i, j| cells[i * grid_size + j].0);
    let values = (&raw + raw.transpose()) * 0.5;
    Ok(RawSurface { grid, values, fallbacks })
}

/// Leave-one-subject-out CV for `h2`:
/// `sum_i sum_{j != k} {e_ij e_ik - psi~^(-i)(t_ij, t_ik)}^2`.
pub fn select_h2(res: &ResidualSet, grid: &[f64], family: KernelFamily) -> Result<CvCurve> {
    for &h in grid {
        KernelSpec::new(family, h)?;
    }
    if grid.is_empty() {
        return Err(Error::Config("bandwidth grid is empty".into()));
    }
    let cloud = PairCloud::from_residuals(res);
    if cloud.len() == 0 {
        return Err(Error::NotEstimable("no subject has two or more observations".into()));
    }
    if res.subjects.len() < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least two subjects".into()));
    }
    let own: Vec<PairCloud> = res.subjects.iter().map(|s| PairCloud::build(&mut PairCloud::subject_pairs(s))).collect();
    let scale: f64 = own.iter().flat_map(|c| c.sum.iter().zip(&c.count).map(|(s, n)| s * s / n)).sum();
    let scores: Vec<Option<f64>> = grid
        .iter()
        .map(|&h| {
            let spec = KernelSpec { family, h };
            let folds: Vec<Option<f64>> = own
                .par_iter()
                .zip(&res.subjects)
                .map(|(mine, sub)| {
                    // Fit at each of this subject's pair locations without its own pairs.
                    let mut fits = Vec::with_capacity(mine.len());
                    for k in 0..mine.len() {
                        let (u, v) = (mine.s[k], mine.t[k]);
                        let m = cloud.moments(u, v, Some(&spec)).minus(&mine.moments(u, v, Some(&spec)));
                        fits.push(m.solve()?);
                    }
                    let mut loss = 0.0;
                    for (j, &(tj, ej)) in sub.iter().enumerate() {
                        for (k, &(tk, ek)) in sub.iter().enumerate() {
                            if j == k {
                                continue;
                            }
                            let pos = (0..mine.len()).find(|&p| mine.s[p] == tj && mine.t[p] == tk)?;
                            loss += (ej * ek - fits[pos]).powi(2);
                        }
                    }
                    Some(loss)
                })
                .collect();
            folds.into_iter().sum::<Option<f64>>().filter(|s| s.is_finite())
        })
        .collect();
    pick_best(grid, scores, CV_TIE_REL * scale)
}

/// Leading consecutive positive eigenpairs of the discretized operator.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub surface: DMatrix<f64>,
    /// Operator eigenvalues (matrix eigenvalues divided by `G`), all of them,
    /// in decreasing order.
    pub eigenvalues: Vec<f64>,
    /// Number of retained leading positive eigenvalues.
    pub retained: usize,
    /// Retained eigenfunctions on the grid, normalized so `sum f^2 / G = 1`.
    pub eigenfunctions: Vec<Vec<f64>>,
}

/// Keeps the leading run of positive eigenvalues of the operator with kernel
/// `raw` (quadrature weight `1/G`) and rebuilds the surface from them.
pub fn truncate_psd(raw: &DMatrix<f64>) -> Result<Truncation> {
    let g = raw.nrows();
    if raw.ncols() != g {
        return Err(Error::Shape(format!("surface is {}x{}", raw.nrows(), raw.ncols())));
    }
    let (vals, vecs) = sorted_eigen(&(raw / g as f64));
    let retained = vals.iter().take_while(|&&v| v > 0.0).count();
    let scale = (g as f64).sqrt();
    let mut surface = DMatrix::zeros(g, g);
    let mut eigenfunctions = Vec::with_capacity(retained);
    for k in 0..retained {
        let f = vecs.column(k) * scale;
        surface += &f * f.transpose() * vals[k];
        eigenfunctions.push(f.as_slice().to_vec());
    }
    let surface = (&surface + surface.transpose()) * 0.5;
    Ok(Truncation { surface, eigenvalues: vals.as_slice().to_vec(), retained, eigenfunctions })
}

/// Local-linear variance function on the grid, floored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceFunction {
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
    pub floor: f64,
    pub floored: bool,
    pub fallbacks: usize,
}

impl VarianceFunction {
    pub fn at(&self, t: f64) -> f64 {
        interp_grid(&self.values, t)
    }
}

fn variance_floor(res: &ResidualSet) -> f64 {
    let v = res.values();
    let n = v.len() as f64;
    if v.len() < 2 {
        return FLOOR_ABS;
    }
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (FLOOR_REL * var).max(FLOOR_ABS)
}

pub fn estimate_sigma2(res: &ResidualSet, h3: f64, grid_size: usize, family: KernelFamily) -> Result<VarianceFunction> {
    let spec = KernelSpec::new(family, h3)?;
    let pts: Vec<(f64, f64, f64)> = res.subjects.iter().flatten().map(|&(t, e)| (t, e * e, 1.0)).collect();
    if pts.is_empty() {
        return Err(Error::NotEstimable("no residuals".into()));
    }
    let floor = variance_floor(res);
    let grid = unit_grid(grid_size);
    let fits: Vec<Result<crate::ksmooth::LocalLinearFit>> =
        grid.par_iter().map(|&t| local_linear_1d(&pts, t, &spec)).collect();
    let mut values = Vec::with_capacity(grid.len());
    let (mut floored, mut fallbacks) = (false, 0);
    for f in fits {
        let f = f?;
        fallbacks += (f.fallback != crate::ksmooth::Fallback::None) as usize;
        if f.intercept < floor {
            floored = true;
        }
        values.push(f.intercept.max(floor));
    }
    Ok(VarianceFunction { grid, values, floor, floored, fallbacks })
}

/// LOSO CV for `h3` on squared residuals.
pub fn select_h3(res: &ResidualSet, grid: &[f64], family: KernelFamily) -> Result<CvCurve> {
    let groups: Vec<Vec<(f64, f64, f64)>> =
        res.subjects.iter().map(|s| s.iter().map(|&(t, e)| (t, e * e, 1.0)).collect()).collect();
    loso_local_linear(&groups, grid, family)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CovarianceModel {
    pub grid: Vec<f64>,
    /// Truncated `psi`, row-major `G x G`.
    pub psi: Vec<f64>,
    pub eigenvalues: Vec<f64>,
    pub retained: usize,
    pub eigenfunctions: Vec<Vec<f64>>,
    pub sigma2: VarianceFunction,
    pub h2: f64,
    pub h3: f64,
    pub psi_fallbacks: usize,
}

impl CovarianceModel {
    pub fn grid_size(&self) -> usize {
        self.grid.len()
    }

    pub fn psi_matrix(&self) -> DMatrix<f64> {
        let g = self.grid_size();
        DMatrix::from_row_slice(g, g, &self.psi)
    }

    /// Bilinear interpolation of the truncated surface.
    pub fn psi_at(&self, u: f64, v: f64) -> f64 {
        let g = self.grid_size();
        if g == 1 {
            return self.psi[0];
        }
        let locate = |x: f64| {
            let p = x.clamp(0.0, 1.0) * (g - 1) as f64;
            let i = (p.floor() as usize).min(g - 2);
            (i, p - i as f64)
        };
        let (i, fu) = locate(u);
        let (j, fv) = locate(v);
        let at = |a: usize, b: usize| self.psi[a * g + b];
        let mut s = at(i, j) * (1.0 - fu) * (1.0 - fv);
        if fu != 0.0 {
            s += at(i + 1, j) * fu * (1.0 - fv);
        }
        if fv != 0.0 {
            s += at(i, j + 1) * (1.0 - fu) * fv;
        }
        if fu != 0.0 && fv != 0.0 {
            s += at(i + 1, j + 1) * fu * fv;
        }
        s
    }

    pub fn sigma2_at(&self, t: f64) -> f64 {
        self.sigma2.at(t)
    }

    /// Total variance at `t`: `sigma^2(t)`, raised to `psi(t, t)` where it
    /// falls below, since the measurement-error variance is nonnegative.
    /// With a PSD `psi` this keeps every `Lambda_i` PSD.
    pub fn diagonal_at(&self, t: f64) -> f64 {
        self.sigma2_at(t).max(self.psi_at(t, t))
    }

    /// `phi(u, v)`: `psi` off the diagonal, [`Self::diagonal_at`] on it.
    pub fn phi_at(&self, u: f64, v: f64) -> f64 {
        if u == v {
            self.diagonal_at(u)
        } else {
            self.psi_at(u, v)
        }
    }

    /// `Lambda_i`: `psi(t_j, t_k)` for `j != k`, `sigma^2(t_j)` on the diagonal.
    pub fn subject_lambda(&self, times: &[f64]) -> DMatrix<f64> {
        let m = times.len();
        let mut l = DMatrix::zeros(m, m);
        for j in 0..m {
            l[(j, j)] = self.diagonal_at(times[j]);
            for k in 0..j {
                let v = 0.5 * (self.psi_at(times[j], times[k]) + self.psi_at(times[k], times[j]));
                l[(j, k)] = v;
                l[(k, j)] = v;
            }
        }
        l
    }

    pub fn dataset_lambdas(&self, ds: &LongitudinalDataset) -> Vec<DMatrix<f64>> {
        (0..ds.n_subjects()).map(|i| self.subject_lambda(&ds.times()[ds.subject_range(i)])).collect()
    }
}

/// Combines a truncated surface and a variance function.
pub fn assemble_phi(
    trunc: Truncation,
    sigma2: VarianceFunction,
    h2: f64,
    h3: f64,
    psi_fallbacks: usize,
) -> Result<CovarianceModel> {
    let g = trunc.surface.nrows();
    if g != sigma2.grid.len() {
        return Err(Error::Shape(format!("surface grid {g} vs variance grid {}", sigma2.grid.len())));
    }
    let mut psi = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            psi.push(trunc.surface[(i, j)]);
        }
    }
    Ok(CovarianceModel {
        grid: unit_grid(g),
        psi,
        eigenvalues: trunc.eigenvalues,
        retained: trunc.retained,
        eigenfunctions: trunc.eigenfunctions,
        sigma2,
        h2,
        h3,
        psi_fallbacks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CovOptions {
    pub kernel: KernelFamily,
    pub h2: Option<f64>,
    pub h3: Option<f64>,
    pub h2_grid: Option<Vec<f64>>,
    pub h3_grid: Option<Vec<f64>>,
    pub grid_size: usize,
}

impl Default for CovOptions {
    fn default() -> Self {
        Self {
            kernel: KernelFamily::Epanechnikov,
            h2: None,
            h3: None,
            h2_grid: None,
            h3_grid: None,
            grid_size: DEFAULT_GRID,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CovarianceEstimate {
    pub model: CovarianceModel,
    pub h2_cv: Option<CvCurve>,
    pub h3_cv: Option<CvCurve>,
}

/// Bandwidths (fixed or by CV), surface, truncation, variance, assembly.
pub fn estimate_covariance(res: &ResidualSet, opts: &CovOptions) -> Result<CovarianceEstimate> {
    let (lo, hi) =
        res.subjects.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &(t, _)| (a.min(t), b.max(t)));
    if !lo.is_finite() {
        return Err(Error::NotEstimable("no residuals".into()));
    }
    let default_grid = default_bandwidth_grid(lo, hi);
    let (h2, h2_cv) = match opts.h2 {
        Some(h) => (h, None),
        None => {
            let cv = select_h2(res, opts.h2_grid.as_deref().unwrap_or(&default_grid), opts.kernel)?;
            (cv.best_h(), Some(cv))
        }
    };
    let (h3, h3_cv) = match opts.h3 {
        Some(h) => (h, None),
        None => {
            let cv = select_h3(res, opts.h3_grid.as_deref().unwrap_or(&default_grid), opts.kernel)?;
            (cv.best_h(), Some(cv))
        }
    };
    let raw = estimate_psi(res, h2, opts.grid_size, opts.kernel)?;
    let trunc = truncate_psd(&raw.values)?;
    let sigma2 = estimate_sigma2(res, h3, opts.grid_size, opts.kernel)?;
    let model = assemble_phi(trunc, sigma2, h2, h3, raw.fallbacks)?;
    Ok(CovarianceEstimate { model, h2_cv, h3_cv })
}

/// `u,v,psi,phi` over the grid.
pub fn write_surface_csv<W: Write>(model: &CovarianceModel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["u", "v", "psi", "phi"])?;
    let g = model.grid_size();
    for i in 0..g {
        for j in 0..g {
            let (u, v) = (model.grid[i], model.grid[j]);
            let psi = model.psi[i * g + j];
            let phi = if i == j { model.sigma2.values[i] } else { psi };
            w.write_record([fmt17(u), fmt17(v), fmt17(psi), fmt17(phi)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `k,eigenvalue,retained`.
pub fn write_spectrum_csv<W: Write>(model: &CovarianceModel, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "eigenvalue", "retained"])?;
    for (k, &v) in model.eigenvalues.iter().enumerate() {
        w.write_record([(k + 1).to_string(), fmt17(v), ((k < model.retained) as u8).to_string()])?;
    }
    w.flush()?;
    Ok(())
}
