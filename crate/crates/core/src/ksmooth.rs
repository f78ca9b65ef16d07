//! Kernels, scalar local-linear regression and leave-one-subject-out
//! bandwidth selection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelFamily {
    #[default]
    Epanechnikov,
    Gaussian,
    Uniform,
}

impl KernelFamily {
    /// Unscaled kernel `K(u)`.
    pub fn unit(self, u: f64) -> f64 {
        match self {
            KernelFamily::Epanechnikov => 0.75 * (1.0 - u * u).max(0.0),
            KernelFamily::Gaussian => (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt(),
            KernelFamily::Uniform => {
                if u.abs() <= 1.0 {
                    0.5
                } else {
                    0.0
                }
            }
        }
    }

    /// Half-width of the support in units of `h`, `None` if unbounded.
    pub fn support(self) -> Option<f64> {
        match self {
            KernelFamily::Gaussian => None,
            _ => Some(1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub h: f64,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, h: f64) -> Result<Self> {
        if !(h > 0.0) || !h.is_finite() {
            return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
        }
        Ok(Self { family, h })
    }

    /// `K_h(u) = K(u / h) / h`.
    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        self.family.unit(u / self.h) / self.h
    }

    fn widened(&self, factor: f64) -> Self {
        Self { family: self.family, h: self.h * factor }
    }
}

pub fn kernel_eval(spec: &KernelSpec, u: f64) -> Result<f64> {
    KernelSpec::new(spec.family, spec.h)?;
    Ok(spec.eval(u))
}

/// `n` log-spaced bandwidths in `[lo, hi] * (t_max - t_min)`.
pub fn bandwidth_grid(t_min: f64, t_max: f64, lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let range = if t_max > t_min { t_max - t_min } else { 1.0 };
    crate::gscad::log_grid(lo * range, hi * range, n)
}

/// 8 values in `[0.05, 0.5]` of the time range.
pub fn default_bandwidth_grid(t_min: f64, t_max: f64) -> Vec<f64> {
    bandwidth_grid(t_min, t_max, 0.05, 0.5, 8)
}

/// Weighted sums for a local-linear fit around `t0`, with `d = t - t0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub(crate) struct Moments {
    pub s0: f64,
    pub s1: f64,
    pub s2: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Moments {
    #[inline]
    pub fn add(&mut self, d: f64, z: f64, w: f64) {
        let wd = w * d;
        self.s0 += w;
        self.s1 += wd;
        self.s2 += wd * d;
        self.t0 += w * z;
        self.t1 += wd * z;
    }

    pub fn minus(&self, o: &Moments) -> Moments {
        Moments { s0: self.s0 - o.s0, s1: self.s1 - o.s1, s2: self.s2 - o.s2, t0: self.t0 - o.t0, t1: self.t1 - o.t1 }
    }

    /// `(a, b)`, or `None` when the weighted spread of `d` is numerically nil.
    pub fn solve(&self) -> Option<(f64, f64)> {
        if !(self.s0 > 0.0) || !(self.s2 > 0.0) {
            return None;
        }
        let det = self.s0 * self.s2 - self.s1 * self.s1;
        if !(det > 1e-10 * self.s0 * self.s2) {
            return None;
        }
        let a = (self.s2 * self.t0 - self.s1 * self.t1) / det;
        let b = (self.s0 * self.t1 - self.s1 * self.t0) / det;
        Some((a, b))
    }
}

/// How a local-linear estimate was obtained.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fallback {
    None,
    /// Bandwidth enlarged to the given value.
    Widened(f64),
    /// Global weighted linear fit (or weighted mean when all times coincide).
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalLinearFit {
    /// Fitted value at `t0`.
    pub intercept: f64,
    pub slope: f64,
    pub fallback: Fallback,
}

const WIDEN_FACTOR: f64 = 1.5;
const WIDEN_STEPS: usize = 5;

/// Minimizes `sum w_i {z_i - a - b (t_i - t0)}^2 K_h(t_i - t0)` over `(a, b)`
/// from `(t_i, z_i, w_i)` triples.
pub fn local_linear_1d(points: &[(f64, f64, f64)], t0: f64, spec: &KernelSpec) -> Result<LocalLinearFit> {
    KernelSpec::new(spec.family, spec.h)?;
    if points.is_empty() {
        return Err(Error::InvalidInput("local-linear fit needs at least one point".into()));
    }
    let moments = |k: Option<&KernelSpec>| {
        let mut m = Moments::default();
        for &(t, z, w) in points {
            let d = t - t0;
            let kw = k.map_or(1.0, |k| k.eval(d));
            if kw > 0.0 {
                m.add(d, z, w * kw);
            }
        }
        m
    };
    if let Some((a, b)) = moments(Some(spec)).solve() {
        return Ok(LocalLinearFit { intercept: a, slope: b, fallback: Fallback::None });
    }
    let mut wide = *spec;
    for _ in 0..WIDEN_STEPS {
        wide = wide.widened(WIDEN_FACTOR);
        if let Some((a, b)) = moments(Some(&wide)).solve() {
            return Ok(LocalLinearFit { intercept: a, slope: b, fallback: Fallback::Widened(wide.h) });
        }
    }
    let m = moments(None);
    if let Some((a, b)) = m.solve() {
        return Ok(LocalLinearFit { intercept: a, slope: b, fallback: Fallback::Global });
    }
    if m.s0 > 0.0 {
        return Ok(LocalLinearFit { intercept: m.t0 / m.s0, slope: 0.0, fallback: Fallback::Global });
    }
    Err(Error::InvalidInput("local-linear fit has no positive weights".into()))
}

/// Cross-validation scores over a bandwidth grid; `None` marks infeasible `h`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvCurve {
    pub grid: Vec<f64>,
    pub scores: Vec<Option<f64>>,
    pub best: usize,
}

impl CvCurve {
    pub fn best_h(&self) -> f64 {
        self.grid[self.best]
    }
}

/// Generic leave-one-subject-out CV. `fold_loss(h, i)` returns the squared
/// prediction error on subject `i` for a fit without subject `i`. Scores within
/// `tie_tol` of the minimum count as ties and go to the larger bandwidth.
pub fn loso_cv_with<F>(grid: &[f64], n_subjects: usize, fold_loss: F, tie_tol: f64) -> Result<CvCurve>
where
    F: Fn(f64, usize) -> Result<f64> + Sync,
{
    if grid.is_empty() {
        return Err(Error::Config("bandwidth grid is empty".into()));
    }
    if n_subjects < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least two subjects".into()));
    }
    let scores: Vec<Option<f64>> = grid
        .par_iter()
        .map(|&h| {
            let folds: Result<Vec<f64>> = (0..n_subjects).map(|i| fold_loss(h, i)).collect();
            folds.ok().map(|v| v.iter().sum::<f64>()).filter(|s| s.is_finite())
        })
        .collect();
    pick_best(grid, scores, tie_tol)
}

pub(crate) fn pick_best(grid: &[f64], scores: Vec<Option<f64>>, tie_tol: f64) -> Result<CvCurve> {
    let min = scores.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::NoFeasibleBandwidth(format!("every bandwidth in {grid:?} failed on some fold")));
    }
    let limit = min + tie_tol.max(0.0);
    let best = (0..grid.len())
        .filter(|&g| scores[g].is_some_and(|s| s <= limit))
        .max_by(|&a, &b| grid[a].total_cmp(&grid[b]))
        .expect("minimum is attained");
    Ok(CvCurve { grid: grid.to_vec(), scores, best })
}

/// Relative tie tolerance used for CV scores.
pub const CV_TIE_REL: f64 = 1e-10;

/// LOSO CV for scalar local-linear smoothing of grouped `(t, z, w)` points,
/// `CV(h) = sum_i sum_j {z_ij - zhat^(-i)(t_ij)}^2`.
pub fn loso_local_linear(groups: &[Vec<(f64, f64, f64)>], grid: &[f64], family: KernelFamily) -> Result<CvCurve> {
    for &h in grid {
        KernelSpec::new(family, h)?;
    }
    let all: Vec<(f64, f64, f64)> = groups.iter().flatten().copied().collect();
    let scale: f64 = all.iter().map(|p| p.1 * p.1).sum();
    let mut uniq: Vec<f64> = all.iter().map(|p| p.0).collect();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let fold_scores = |h: f64| -> Result<f64> {
        let spec = KernelSpec { family, h };
        let full: Vec<Moments> = uniq
            .iter()
            .map(|&t0| {
                let mut m = Moments::default();
                for &(t, z, w) in &all {
                    let kw = spec.eval(t - t0);
                    if kw > 0.0 {
                        m.add(t - t0, z, w * kw);
                    }
                }
                m
            })
            .collect();
        let mut total = 0.0;
        for (i, g) in groups.iter().enumerate() {
            for &(t0, z0, _) in g {
                let u = uniq.binary_search_by(|v| v.total_cmp(&t0)).expect("time present");
                let mut own = Moments::default();
                for &(t, z, w) in g {
                    let kw = spec.eval(t - t0);
                    if kw > 0.0 {
                        own.add(t - t0, z, w * kw);
                    }
                }
                let pred = match full[u].minus(&own).solve() {
                    Some((a, _)) => a,
                    None => {
                        let train: Vec<(f64, f64, f64)> = groups
                            .iter()
                            .enumerate()
                            .filter(|&(j, _)| j != i)
                            .flat_map(|(_, g)| g.iter().copied())
                            .collect();
                        local_linear_1d(&train, t0, &spec)?.intercept
                    }
                };
                total += (z0 - pred).powi(2);
            }
        }
        Ok(total)
    };
    if grid.is_empty() {
        return Err(Error::Config("bandwidth grid is empty".into()));
    }
    if groups.len() < 2 {
        return Err(Error::InvalidInput("cross-validation needs at least two subjects".into()));
    }
    let scores: Vec<Option<f64>> = grid.par_iter().map(|&h| fold_scores(h).ok().filter(|s| s.is_finite())).collect();
    pick_best(grid, scores, CV_TIE_REL * scale)
}
