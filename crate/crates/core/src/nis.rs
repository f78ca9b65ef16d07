//! Nonparametric independence screening under working independence.
//!
//! Each covariate `x_k` gets a marginal varying-coefficient fit
//! `y(t) ~ a_k(t) + b_k(t) x_k(t)` with both functions expanded in the same
//! B-spline basis, and covariates are ranked by the empirical norm
//! `||b_k||_n^2` of the fitted slope function.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bspline::{BSplineBasis, MAX_ORDER};
use crate::data::{fmt17, LongitudinalDataset};
use crate::error::{Error, Result};
use crate::linalg::{solve_spd, RIDGE_FLOOR};

/// Gram matrices below this scaled reciprocal condition get the ridge floor.
pub(crate) const RCOND_MIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct MarginalFit {
    pub covariate: usize,
    /// Coefficients of the marginal intercept function `a_k`.
    pub intercept_coef: DVector<f64>,
    /// Coefficients of the marginal slope function `b_k`.
    pub slope_coef: DVector<f64>,
    /// `||b_k||_n^2`.
    pub norm_sq: f64,
    /// Set when the covariate carries no usable signal (e.g. identically zero)
    /// or the Gram matrix stayed singular after the ridge floor.
    pub degenerate: Option<String>,
}

/// How many ranked covariates survive screening.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScreenRule {
    /// Keep the first `floor(n^alpha / ln n)`, `alpha` in `[2/5, 1]`.
    Alpha(f64),
    KeepCount(usize),
    /// Keep every covariate with `||b_k||_n^2 >= threshold`.
    Threshold(f64),
}

impl Default for ScreenRule {
    fn default() -> Self {
        ScreenRule::Alpha(1.0)
    }
}

impl ScreenRule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ScreenRule::Alpha(a) if !(0.4..=1.0).contains(&a) => {
                Err(Error::Config(format!("screening alpha must lie in [0.4, 1], got {a}")))
            }
            ScreenRule::KeepCount(0) => Err(Error::Config("screening keep_count must be positive".into())),
            ScreenRule::Threshold(t) if !(t >= 0.0) => {
                Err(Error::Config(format!("screening threshold must be nonnegative, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

/// `min(p, floor(n^alpha / ln n))`; everything is kept when `ln n <= 0`.
pub fn alpha_keep_count(n_subjects: usize, p: usize, alpha: f64) -> usize {
    let n = n_subjects as f64;
    let ln = n.ln();
    if ln <= 0.0 {
        return p;
    }
    ((n.powf(alpha) / ln).floor() as usize).min(p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScreenResult {
    /// Covariate indices by decreasing `norm_sq`, ties by ascending index.
    pub ranked: Vec<usize>,
    /// `norm_sq` aligned with `ranked`.
    pub norms: Vec<f64>,
    pub kept: Vec<usize>,
    pub keep_count: usize,
    pub degenerate: Vec<(usize, String)>,
}

/// Per-observation basis values shared by every marginal fit.
pub(crate) struct ScreeningDesign {
    dim: usize,
    order: usize,
    starts: Vec<usize>,
    values: Vec<f64>,
    weights: Vec<f64>,
    gram_bb: DMatrix<f64>,
    rhs_b: DVector<f64>,
}

impl ScreeningDesign {
    pub(crate) fn new(ds: &LongitudinalDataset, basis: &BSplineBasis) -> Self {
        let (dim, order) = (basis.dim(), basis.order());
        let nobs = ds.n_obs();
        let mut starts = Vec::with_capacity(nobs);
        let mut values = vec![0.0; nobs * order];
        let mut nz = [0.0; MAX_ORDER];
        for (obs, &t) in ds.times().iter().enumerate() {
            starts.push(basis.eval_nonzero(t, &mut nz));
            values[obs * order..(obs + 1) * order].copy_from_slice(&nz[..order]);
        }
        let weights = ds.obs_weights();
        let mut gram_bb = DMatrix::zeros(dim, dim);
        let mut rhs_b = DVector::zeros(dim);
        for obs in 0..nobs {
            let (s, b) = (starts[obs], &values[obs * order..(obs + 1) * order]);
            let w = weights[obs];
            for a in 0..order {
                rhs_b[s + a] += w * b[a] * ds.y()[obs];
                for c in 0..order {
                    gram_bb[(s + a, s + c)] += w * b[a] * b[c];
                }
            }
        }
        Self { dim, order, starts, values, weights, gram_bb, rhs_b }
    }

    pub(crate) fn fit(&self, ds: &LongitudinalDataset, k: usize) -> MarginalFit {
        let (l, ord) = (self.dim, self.order);
        let x = ds.covariate(k);
        let y = ds.y();
        let mut bw = DMatrix::<f64>::zeros(l, l);
        let mut ww = DMatrix::<f64>::zeros(l, l);
        let mut rhs_w = DVector::<f64>::zeros(l);
        for obs in 0..x.len() {
            let (s, b) = (self.starts[obs], &self.values[obs * ord..(obs + 1) * ord]);
            let w = self.weights[obs];
            let xv = x[obs];
            for a in 0..ord {
                rhs_w[s + a] += w * xv * b[a] * y[obs];
                for c in 0..ord {
                    let bb = w * b[a] * b[c];
                    bw[(s + a, s + c)] += xv * bb;
                    ww[(s + a, s + c)] += xv * xv * bb;
                }
            }
        }
        let intercept_only = |why: String| {
            let coef = solve_spd(
                &self.gram_bb,
                &DMatrix::from_column_slice(l, 1, self.rhs_b.as_slice()),
                RCOND_MIN,
                RIDGE_FLOOR,
            )
            .map(|s| s.solution.column(0).into_owned())
            .unwrap_or_else(|| DVector::zeros(l));
            MarginalFit {
                covariate: k,
                intercept_coef: coef,
                slope_coef: DVector::zeros(l),
                norm_sq: 0.0,
                degenerate: Some(why),
            }
        };
        if !(ww.trace() > 1e-14 * self.gram_bb.trace()) {
            return intercept_only(format!("covariate {} is identically zero on the design", ds.names()[k]));
        }
        let mut g = DMatrix::zeros(2 * l, 2 * l);
        g.view_mut((0, 0), (l, l)).copy_from(&self.gram_bb);
        g.view_mut((0, l), (l, l)).copy_from(&bw);
        g.view_mut((l, 0), (l, l)).copy_from(&bw.transpose());
        g.view_mut((l, l), (l, l)).copy_from(&ww);
        let mut rhs = DMatrix::zeros(2 * l, 1);
        rhs.view_mut((0, 0), (l, 1)).copy_from(&self.rhs_b);
        rhs.view_mut((l, 0), (l, 1)).copy_from(&rhs_w);
        match solve_spd(&g, &rhs, RCOND_MIN, RIDGE_FLOOR) {
            Some(sol) => {
                let a = sol.solution.view((0, 0), (l, 1)).column(0).into_owned();
                let b = sol.solution.view((l, 0), (l, 1)).column(0).into_owned();
                let norm_sq = (b.transpose() * &self.gram_bb * &b)[(0, 0)].max(0.0);
                MarginalFit { covariate: k, intercept_coef: a, slope_coef: b, norm_sq, degenerate: None }
            }
            None => intercept_only(format!("marginal Gram of covariate {} is singular", ds.names()[k])),
        }
    }
}

/// Marginal B-spline fit of `y` on `(B, x_k B)` under the empirical inner product.
pub fn fit_marginal(ds: &LongitudinalDataset, k: usize, basis: &BSplineBasis) -> Result<MarginalFit> {
    if k >= ds.n_covariates() {
        return Err(Error::InvalidInput(format!("covariate index {k} out of range (p = {})", ds.n_covariates())));
    }
    Ok(ScreeningDesign::new(ds, basis).fit(ds, k))
}

/// All marginal fits, ordered by covariate index.
pub fn marginal_fits(ds: &LongitudinalDataset, basis: &BSplineBasis) -> Vec<MarginalFit> {
    let design = ScreeningDesign::new(ds, basis);
    (0..ds.n_covariates()).into_par_iter().map(|k| design.fit(ds, k)).collect()
}

/// Ranks all covariates and keeps a leading block according to `rule`.
pub fn screen(ds: &LongitudinalDataset, basis: &BSplineBasis, rule: ScreenRule) -> Result<ScreenResult> {
    rule.validate()?;
    let fits = marginal_fits(ds, basis);
    Ok(rank_fits(&fits, ds.n_subjects(), rule))
}

pub(crate) fn rank_fits(fits: &[MarginalFit], n_subjects: usize, rule: ScreenRule) -> ScreenResult {
    let p = fits.len();
    let mut ranked: Vec<usize> = (0..p).collect();
    let key = |k: usize| if fits[k].degenerate.is_some() { f64::NEG_INFINITY } else { fits[k].norm_sq };
    ranked.sort_by(|&a, &b| key(b).total_cmp(&key(a)).then(a.cmp(&b)));
    let norms: Vec<f64> = ranked.iter().map(|&k| fits[k].norm_sq).collect();
    let keep_count = match rule {
        ScreenRule::Alpha(a) => alpha_keep_count(n_subjects, p, a),
        ScreenRule::KeepCount(c) => c.min(p),
        ScreenRule::Threshold(th) => norms.iter().take_while(|&&v| v >= th).count(),
    };
    let degenerate = fits.iter().filter_map(|f| f.degenerate.clone().map(|d| (f.covariate, d))).collect();
    ScreenResult { kept: ranked[..keep_count].to_vec(), ranked, norms, keep_count, degenerate }
}

/// Minimum model size: the shortest prefix of `ranked` containing `truth`.
pub fn mmms(ranked: &[usize], truth: &[usize]) -> Result<usize> {
    if truth.is_empty() {
        return Err(Error::InvalidInput("true model is empty".into()));
    }
    let p = ranked.len();
    let mut position = vec![usize::MAX; p];
    for (r, &k) in ranked.iter().enumerate() {
        if k >= p {
            return Err(Error::InvalidInput(format!("ranked index {k} out of range")));
        }
        position[k] = r;
    }
    let mut worst = 0;
    for &k in truth {
        if k >= p || position[k] == usize::MAX {
            return Err(Error::InvalidInput(format!("true covariate index {k} out of range (p = {p})")));
        }
        worst = worst.max(position[k] + 1);
    }
    Ok(worst)
}

/// `rank,covariate,norm_sq,kept`.
pub fn write_screen_csv<W: Write>(res: &ScreenResult, names: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "covariate", "norm_sq", "kept"])?;
    for (r, (&k, &v)) in res.ranked.iter().zip(&res.norms).enumerate() {
        let kept = if r < res.keep_count { "1" } else { "0" };
        w.write_record([(r + 1).to_string(), names[k].clone(), fmt17(v), kept.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::SubjectRecord;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy(
        n: usize,
        m: usize,
        p: usize,
        seed: u64,
        noise: f64,
        signal: impl Fn(&[f64], f64) -> f64,
    ) -> LongitudinalDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..n)
            .map(|i| {
                let times: Vec<f64> = (0..m).map(|j| (j as f64 + rng.random::<f64>()) / m as f64).collect();
                let cov: Vec<Vec<f64>> =
                    (0..p).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
                let y = (0..m)
                    .map(|j| {
                        let xs: Vec<f64> = cov.iter().map(|c| c[j]).collect();
                        signal(&xs, times[j]) + noise * rng.random_range(-1.0..1.0)
                    })
                    .collect();
                SubjectRecord { id: format!("s{i}"), times, y, covariates: cov }
            })
            .collect();
        LongitudinalDataset::new((0..p).map(|k| format!("x{k}")).collect(), subjects).unwrap()
    }

    #[test]
    fn perfect_marginal_signal() {
        let ds = toy(40, 6, 2, 1, 0.0, |x, _| x[0]);
        let basis = BSplineBasis::new(5, 3).unwrap();
        let fit = fit_marginal(&ds, 0, &basis).unwrap();
        assert!(fit.degenerate.is_none());
        for &t in &[0.1, 0.5, 0.9] {
            assert!((basis.curve(fit.slope_coef.as_slice(), t) - 1.0).abs() < 1e-8);
            assert!(basis.curve(fit.intercept_coef.as_slice(), t).abs() < 1e-8);
        }
        assert!((fit.norm_sq - 1.0).abs() < 1e-8);
    }

    #[test]
    fn zero_covariate_is_degenerate() {
        let mut ds = toy(10, 4, 2, 2, 0.1, |x, _| x[0]);
        let zeroed = ds.covariate(0).iter().map(|_| 0.0).collect::<Vec<_>>();
        // rebuild with covariate 1 zeroed
        let subjects = (0..ds.n_subjects())
            .map(|i| {
                let r = ds.subject_range(i);
                SubjectRecord {
                    id: ds.subject_ids()[i].clone(),
                    times: ds.times()[r.clone()].to_vec(),
                    y: ds.y()[r.clone()].to_vec(),
                    covariates: vec![ds.covariate(0)[r.clone()].to_vec(), zeroed[r.clone()].to_vec()],
                }
            })
            .collect();
        ds = LongitudinalDataset::new(ds.names().to_vec(), subjects).unwrap();
        let basis = BSplineBasis::new(4, 3).unwrap();
        let fit = fit_marginal(&ds, 1, &basis).unwrap();
        assert!(fit.degenerate.is_some());
        assert_eq!(fit.norm_sq, 0.0);
        let res = screen(&ds, &basis, ScreenRule::KeepCount(2)).unwrap();
        assert_eq!(res.ranked, vec![0, 1]);
        assert_eq!(res.degenerate.len(), 1);
    }

    #[test]
    fn matches_dense_normal_equations() {
        let ds = toy(20, 5, 3, 5, 0.5, |x, t| (2.0 * t).sin() + x[1] * (1.0 + t));
        let basis = BSplineBasis::new(4, 3).unwrap();
        let fit = fit_marginal(&ds, 1, &basis).unwrap();
        // Oracle: explicit design with sqrt weights, normal equations via LU.
        let w = ds.obs_weights();
        let nobs = ds.n_obs();
        let z = DMatrix::from_fn(nobs, 8, |o, c| {
            let b = basis.eval(ds.times()[o]).unwrap();
            if c < 4 {
                b[c]
            } else {
                ds.x(1, o) * b[c - 4]
            }
        });
        let wd = DMatrix::from_diagonal(&DVector::from_vec(w));
        let y = DVector::from_vec(ds.y().to_vec());
        let lhs = z.transpose() * &wd * &z;
        let rhs = z.transpose() * &wd * &y;
        let coef = lhs.lu().solve(&rhs).unwrap();
        for c in 0..4 {
            assert!((coef[c] - fit.intercept_coef[c]).abs() < 1e-10);
            assert!((coef[c + 4] - fit.slope_coef[c]).abs() < 1e-10);
        }
        // residual orthogonal to every regressor
        let resid = &y - &z * &coef;
        let inner = z.transpose() * &wd * resid;
        assert!(inner.amax() < 1e-9);
        // norm from direct empirical evaluation
        let vals: Vec<f64> = ds.times().iter().map(|&t| basis.curve(fit.slope_coef.as_slice(), t)).collect();
        let direct = crate::data::empirical_norm_sq(&ds, &crate::data::SampledFunction::scalar(vals)).unwrap();
        assert!((direct - fit.norm_sq).abs() < 1e-10);
    }

    #[test]
    fn keep_count_rule() {
        assert_eq!(alpha_keep_count(100, 500, 1.0), 21);
        assert_eq!(alpha_keep_count(200, 500, 1.0), 37);
        assert_eq!(alpha_keep_count(100, 3, 1.0), 3);
    }

    #[test]
    fn clamps_to_p_and_ranks() {
        let ds = toy(30, 5, 3, 9, 0.2, |x, _| 3.0 * x[2] + 0.5 * x[0]);
        let basis = BSplineBasis::new(4, 3).unwrap();
        let res = screen(&ds, &basis, ScreenRule::Alpha(1.0)).unwrap();
        assert_eq!(res.keep_count, 3);
        assert_eq!(res.ranked[0], 2);
        assert!(res.norms.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(res.kept, res.ranked);
    }

    #[test]
    fn scale_equivariance_and_duplicate_ties() {
        let ds = toy(25, 5, 4, 3, 0.3, |x, t| x[0] * t + x[3]);
        let basis = BSplineBasis::new(4, 3).unwrap();
        let base = screen(&ds, &basis, ScreenRule::KeepCount(4)).unwrap();
        let scaled = ds.with_response(ds.y().iter().map(|v| -2.5 * v).collect()).unwrap();
        let res = screen(&scaled, &basis, ScreenRule::KeepCount(4)).unwrap();
        assert_eq!(base.ranked, res.ranked);
        for (a, b) in base.norms.iter().zip(&res.norms) {
            assert!((b - 6.25 * a).abs() < 1e-9 * (1.0 + b.abs()));
        }
        // duplicate covariate 3 as a fifth column
        let dup = ds.select_covariates(&[0, 1, 2, 3]).unwrap();
        let fits4 = marginal_fits(&dup, &basis);
        let subjects = (0..ds.n_subjects())
            .map(|i| {
                let r = ds.subject_range(i);
                let mut cov: Vec<Vec<f64>> = (0..4).map(|k| ds.covariate(k)[r.clone()].to_vec()).collect();
                cov.push(ds.covariate(3)[r.clone()].to_vec());
                SubjectRecord {
                    id: ds.subject_ids()[i].clone(),
                    times: ds.times()[r.clone()].to_vec(),
                    y: ds.y()[r].to_vec(),
                    covariates: cov,
                }
            })
            .collect();
        let names = vec!["a".into(), "b".into(), "c".into(), "d".into(), "e".into()];
        let ds5 = LongitudinalDataset::new(names, subjects).unwrap();
        let fits5 = marginal_fits(&ds5, &basis);
        assert_eq!(fits5[4].norm_sq, fits5[3].norm_sq);
        assert_eq!(fits4[3].norm_sq, fits5[3].norm_sq);
        let r5 = rank_fits(&fits5, ds5.n_subjects(), ScreenRule::KeepCount(5));
        let p3 = r5.ranked.iter().position(|&k| k == 3).unwrap();
        assert_eq!(r5.ranked[p3 + 1], 4);
    }

    #[test]
    fn mmms_prefix_scan() {
        assert_eq!(mmms(&[2, 0, 1], &[0, 2]).unwrap(), 2);
        assert_eq!(mmms(&[4, 1, 0, 2, 3], &[4, 1]).unwrap(), 2);
        assert_eq!(mmms(&[4, 1, 0, 2, 3], &[3]).unwrap(), 5);
        assert!(mmms(&[0, 1], &[5]).is_err());
        assert!(mmms(&[0, 1], &[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let res = ScreenResult {
            ranked: vec![1, 0],
            norms: vec![2.0, 1.0],
            kept: vec![1],
            keep_count: 1,
            degenerate: vec![],
        };
        let mut buf = Vec::new();
        write_screen_csv(&res, &["a".into(), "b".into()], &mut buf).unwrap();
        let s = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "rank,covariate,norm_sq,kept");
        assert!(lines[1].starts_with("1,b,2.0000000000000000e0,1"));
        assert!(lines[2].ends_with(",0"));
    }
}
