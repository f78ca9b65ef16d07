//! Equispaced B-spline bases on `[0, 1]` and the split of a spline into its
//! mean (constant part) and a mean-zero functional part.
//!
//! `order` follows the Schumaker convention: order 3 means piecewise
//! quadratic.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// 5-point Gauss-Legendre rule on `[-1, 1]`.
const GL5_NODES: [f64; 5] =
    [-0.906_179_845_938_664_0, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664_0];
const GL5_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Orders above this are rejected; the evaluation scratch lives on the stack.
pub const MAX_ORDER: usize = 10;

#[derive(Clone, Debug, PartialEq)]
pub struct BSplineBasis {
    dim: usize,
    order: usize,
    knots: Vec<f64>,
}

/// `clamp(round(2.5 n^{1/5}), order, 15)`.
pub fn default_num_basis(n_subjects: usize, order: usize) -> usize {
    let l = (2.5 * (n_subjects as f64).powf(0.2)).round() as usize;
    l.min(15).max(order)
}

impl BSplineBasis {
    /// Basis of dimension `dim` with `dim - order` equispaced interior knots.
    pub fn new(dim: usize, order: usize) -> Result<Self> {
        if order == 0 || order > MAX_ORDER {
            return Err(Error::InvalidInput(format!("spline order must be in 1..={MAX_ORDER}, got {order}")));
        }
        if dim < order {
            return Err(Error::InvalidInput(format!("basis dimension {dim} is smaller than the order {order}")));
        }
        let interior = dim - order;
        let mut knots = vec![0.0; order];
        knots.extend((1..=interior).map(|j| j as f64 / (interior + 1) as f64));
        knots.extend(std::iter::repeat_n(1.0, order));
        Ok(Self { dim, order, knots })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn interior_knots(&self) -> &[f64] {
        &self.knots[self.order..self.dim]
    }

    /// Distinct breakpoints `0 = u_0 < ... < u_r = 1`.
    pub fn breakpoints(&self) -> &[f64] {
        &self.knots[self.order - 1..=self.dim]
    }

    fn span(&self, t: f64) -> usize {
        let k = self.order;
        if t >= 1.0 {
            return self.dim - 1;
        }
        // knots[k-1..=dim] are the breakpoints; find the last one <= t.
        let bp = self.breakpoints();
        let pos = bp.partition_point(|&u| u <= t);
        (k - 1 + pos.saturating_sub(1)).min(self.dim - 1)
    }

    /// Writes the `order` possibly-nonzero basis values at `t` into `out` and
    /// returns the index of the first one. `t` is clamped to `[0, 1]`.
    pub fn eval_nonzero(&self, t: f64, out: &mut [f64]) -> usize {
        let t = t.clamp(0.0, 1.0);
        let p = self.order - 1;
        let mu = self.span(t);
        let kn = &self.knots;
        let mut left = [0.0; MAX_ORDER];
        let mut right = [0.0; MAX_ORDER];
        out[0] = 1.0;
        for j in 1..=p {
            left[j] = t - kn[mu + 1 - j];
            right[j] = kn[mu + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = out[r] / (right[r + 1] + left[j - r]);
                out[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            out[j] = saved;
        }
        mu - p
    }

    /// Full basis vector `B(t)`.
    pub fn eval(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::InvalidInput(format!("basis evaluated at {t}, outside [0, 1]")));
        }
        Ok(self.eval_dense(t))
    }

    pub(crate) fn eval_dense(&self, t: f64) -> DVector<f64> {
        let mut nz = [0.0; MAX_ORDER];
        let start = self.eval_nonzero(t, &mut nz);
        let mut v = DVector::zeros(self.dim);
        for (r, &b) in nz[..self.order].iter().enumerate() {
            v[start + r] = b;
        }
        v
    }

    /// `int_0^1 B_j(t) dt = (knot_{j+order} - knot_j) / order`.
    pub fn integrals(&self) -> DVector<f64> {
        let k = self.order;
        DVector::from_fn(self.dim, |j, _| (self.knots[j + k] - self.knots[j]) / k as f64)
    }

    /// Quadrature nodes and weights, 5 Gauss-Legendre points per knot span.
    /// Exact for the product of two splines up to order 5.
    pub fn quadrature(&self) -> (Vec<f64>, Vec<f64>) {
        let bp = self.breakpoints();
        let mut nodes = Vec::with_capacity(5 * (bp.len() - 1));
        let mut weights = Vec::with_capacity(nodes.capacity());
        for w in bp.windows(2) {
            let (a, b) = (w[0], w[1]);
            let half = 0.5 * (b - a);
            for (x, wt) in GL5_NODES.iter().zip(GL5_WEIGHTS.iter()) {
                nodes.push(a + half * (x + 1.0));
                weights.push(half * wt);
            }
        }
        (nodes, weights)
    }

    /// `int_0^1 B(t) B(t)^T dt`.
    pub fn l2_gram(&self) -> DMatrix<f64> {
        let (nodes, weights) = self.quadrature();
        let mut g = DMatrix::zeros(self.dim, self.dim);
        let mut nz = [0.0; MAX_ORDER];
        for (&t, &w) in nodes.iter().zip(&weights) {
            let s = self.eval_nonzero(t, &mut nz);
            for a in 0..self.order {
                for b in 0..self.order {
                    g[(s + a, s + b)] += w * nz[a] * nz[b];
                }
            }
        }
        g
    }

    /// `g(t) = gamma^T B(t)`.
    pub fn curve(&self, gamma: &[f64], t: f64) -> f64 {
        let mut nz = [0.0; MAX_ORDER];
        let s = self.eval_nonzero(t, &mut nz);
        nz[..self.order].iter().enumerate().map(|(r, b)| b * gamma[s + r]).sum()
    }
}

/// Constant/functional split of a spline `g = c + f` with `int f = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decomposition {
    pub constant: f64,
    /// Coordinates of `f` on `C_2, ..., C_L`.
    pub functional: DVector<f64>,
}

/// The basis `(1, C_2, ..., C_L)` with `C_j = B_j - tau_j`, `tau_j = int B_j`.
///
/// Coordinates in this basis are written `theta = (c, d_2, ..., d_L)`; from
/// B-spline coefficients `gamma`, `c = tau^T gamma` and `d_j = gamma_j - gamma_1`.
#[derive(Clone, Debug)]
pub struct CenteredBasis {
    parent: BSplineBasis,
    tau: DVector<f64>,
    gram: DMatrix<f64>,
    functional_gram: DMatrix<f64>,
}

impl CenteredBasis {
    pub fn new(parent: BSplineBasis) -> Self {
        let tau = parent.integrals();
        let gram = parent.l2_gram();
        let l = parent.dim();
        let functional_gram = DMatrix::from_fn(l - 1, l - 1, |a, b| gram[(a + 1, b + 1)] - tau[a + 1] * tau[b + 1]);
        Self { parent, tau, gram, functional_gram }
    }

    pub fn parent(&self) -> &BSplineBasis {
        &self.parent
    }

    pub fn dim(&self) -> usize {
        self.parent.dim()
    }

    pub fn integrals(&self) -> &DVector<f64> {
        &self.tau
    }

    pub fn l2_gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `int C_j C_l` for `j, l >= 2`.
    pub fn functional_gram(&self) -> &DMatrix<f64> {
        &self.functional_gram
    }

    /// Matrix `T` with `theta = T gamma`.
    pub fn to_centered_matrix(&self) -> DMatrix<f64> {
        let l = self.dim();
        let mut t = DMatrix::zeros(l, l);
        for j in 0..l {
            t[(0, j)] = self.tau[j];
        }
        for j in 1..l {
            t[(j, 0)] = -1.0;
            t[(j, j)] = 1.0;
        }
        t
    }

    pub fn to_centered(&self, gamma: &DVector<f64>) -> DVector<f64> {
        let l = self.dim();
        let mut theta = DVector::zeros(l);
        theta[0] = self.tau.dot(gamma);
        for j in 1..l {
            theta[j] = gamma[j] - gamma[0];
        }
        theta
    }

    /// Inverse of [`to_centered`](Self::to_centered):
    /// `gamma_l = c - sum_{j>=2} d_j tau_j + d_l` (with `d_1 = 0`).
    pub fn from_centered(&self, theta: &DVector<f64>) -> DVector<f64> {
        let l = self.dim();
        let shift: f64 = (1..l).map(|j| theta[j] * self.tau[j]).sum();
        DVector::from_fn(l, |j, _| theta[0] - shift + if j == 0 { 0.0 } else { theta[j] })
    }

    /// `(1, C_2(t), ..., C_L(t))`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let mut nz = [0.0; MAX_ORDER];
        let k = self.parent.order();
        let s = self.parent.eval_nonzero(t, &mut nz);
        out[0] = 1.0;
        for j in 1..self.dim() {
            out[j] = -self.tau[j];
        }
        for (r, &b) in nz[..k].iter().enumerate() {
            if s + r >= 1 {
                out[s + r] += b;
            }
        }
    }

    pub fn decompose(&self, gamma: &DVector<f64>) -> Result<Decomposition> {
        if gamma.len() != self.dim() {
            return Err(Error::Shape(format!("{} coefficients for a basis of dimension {}", gamma.len(), self.dim())));
        }
        let theta = self.to_centered(gamma);
        Ok(Decomposition { constant: theta[0], functional: theta.rows(1, self.dim() - 1).into_owned() })
    }

    pub fn recompose(&self, dec: &Decomposition) -> DVector<f64> {
        let mut theta = DVector::zeros(self.dim());
        theta[0] = dec.constant;
        theta.rows_mut(1, self.dim() - 1).copy_from(&dec.functional);
        self.from_centered(&theta)
    }

    /// `||f||_{L2}^2` from the functional coordinates.
    pub fn functional_norm_sq(&self, d: &[f64]) -> f64 {
        let m = &self.functional_gram;
        let mut s = 0.0;
        for a in 0..d.len() {
            let mut row = 0.0;
            for b in 0..d.len() {
                row += m[(a, b)] * d[b];
            }
            s += d[a] * row;
        }
        s.max(0.0)
    }

    /// Value at `t` of the function with centered coordinates `theta`.
    pub fn curve(&self, theta: &[f64], t: f64) -> f64 {
        let mut buf = vec![0.0; self.dim()];
        self.eval_into(t, &mut buf);
        buf.iter().zip(theta).map(|(a, b)| a * b).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook recursive Cox-de Boor definition, right-continuous except at
    /// the right end point.
    fn cox_de_boor(knots: &[f64], j: usize, k: usize, t: f64) -> f64 {
        if k == 1 {
            let last = *knots.last().unwrap();
            let inside = knots[j] <= t && t < knots[j + 1];
            let at_end = t == last && knots[j] < knots[j + 1] && knots[j + 1] == last;
            return if inside || at_end { 1.0 } else { 0.0 };
        }
        let mut v = 0.0;
        let d1 = knots[j + k - 1] - knots[j];
        if d1 > 0.0 {
            v += (t - knots[j]) / d1 * cox_de_boor(knots, j, k - 1, t);
        }
        let d2 = knots[j + k] - knots[j + 1];
        if d2 > 0.0 {
            v += (knots[j + k] - t) / d2 * cox_de_boor(knots, j + 1, k - 1, t);
        }
        v
    }

    /// Independent GL quadrature: 5 points on each knot span, built here.
    fn quad(f: impl Fn(f64) -> f64, breaks: &[f64]) -> f64 {
        let x = [
            -(5.0 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
            -(5.0 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
            0.0,
            (5.0 - 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
            (5.0 + 2.0 * (10.0f64 / 7.0).sqrt()).sqrt() / 3.0,
        ];
        let w0 = (322.0 - 13.0 * 70.0f64.sqrt()) / 900.0;
        let w1 = (322.0 + 13.0 * 70.0f64.sqrt()) / 900.0;
        let w = [w0, w1, 128.0 / 225.0, w1, w0];
        breaks
            .windows(2)
            .map(|ab| {
                let h = 0.5 * (ab[1] - ab[0]);
                (0..5).map(|i| w[i] * f(ab[0] + h * (x[i] + 1.0))).sum::<f64>() * h
            })
            .sum()
    }

    #[test]
    fn bernstein_case() {
        let b = BSplineBasis::new(3, 3).unwrap();
        assert!(b.interior_knots().is_empty());
        let v0 = b.eval(0.0).unwrap();
        assert_eq!(v0.as_slice(), &[1.0, 0.0, 0.0]);
        let v = b.eval(0.5).unwrap();
        for (a, e) in v.iter().zip([0.25, 0.5, 0.25]) {
            assert!((a - e).abs() < 1e-15);
        }
        let v1 = b.eval(1.0).unwrap();
        assert!((v1[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn interior_knots_equispaced() {
        let b = BSplineBasis::new(8, 3).unwrap();
        let ik = b.interior_knots();
        assert_eq!(ik.len(), 5);
        for (j, &k) in ik.iter().enumerate() {
            assert!((k - (j + 1) as f64 / 6.0).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_small_dimension_and_bad_t() {
        assert!(BSplineBasis::new(2, 3).is_err());
        assert!(BSplineBasis::new(4, 0).is_err());
        let b = BSplineBasis::new(5, 3).unwrap();
        assert!(b.eval(-0.01).is_err());
        assert!(b.eval(1.01).is_err());
    }

    #[test]
    fn partition_of_unity_random_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(l, k) in &[(3, 3), (6, 3), (8, 3), (10, 4), (5, 1), (7, 2)] {
            let b = BSplineBasis::new(l, k).unwrap();
            for _ in 0..10_000 {
                let t: f64 = rng.random();
                let v = b.eval(t).unwrap();
                assert!((v.sum() - 1.0).abs() < 1e-12);
                assert!(v.iter().all(|&x| x >= 0.0));
                assert!(v.iter().filter(|&&x| x != 0.0).count() <= k);
            }
            assert!((b.eval(1.0).unwrap().sum() - 1.0).abs() < 1e-12);
            assert!((b.eval(0.0).unwrap().sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_recursive_definition() {
        let b = BSplineBasis::new(8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let t: f64 = rng.random();
            let v = b.eval(t).unwrap();
            for j in 0..8 {
                assert!((v[j] - cox_de_boor(b.knots(), j, 3, t)).abs() < 1e-12);
            }
        }
        let v = b.eval(1.0).unwrap();
        for j in 0..8 {
            assert!((v[j] - cox_de_boor(b.knots(), j, 3, 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn integrals_bernstein_and_quadrature() {
        let b3 = BSplineBasis::new(3, 3).unwrap();
        for v in b3.integrals().iter() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        for &(l, k) in &[(8, 3), (6, 3), (12, 4), (4, 2)] {
            let b = BSplineBasis::new(l, k).unwrap();
            let tau = b.integrals();
            assert!((tau.sum() - 1.0).abs() < 1e-12);
            let breaks: Vec<f64> = b.breakpoints().to_vec();
            for j in 0..l {
                let q = quad(|t| cox_de_boor(b.knots(), j, k, t), &breaks);
                assert!((tau[j] - q).abs() < 1e-12, "j={j}: {} vs {q}", tau[j]);
                assert!(tau[j] > 0.0);
            }
        }
    }

    #[test]
    fn decompose_constant_and_linear() {
        let cb = CenteredBasis::new(BSplineBasis::new(6, 3).unwrap());
        let d = cb.decompose(&DVector::from_element(6, 5.0)).unwrap();
        assert!((d.constant - 5.0).abs() < 1e-12);
        assert!(d.functional.amax() < 1e-12);

        // g(t) = t has Greville-abscissa coefficients.
        let b = cb.parent();
        let k = b.order();
        let greville = DVector::from_fn(6, |j, _| (1..k).map(|r| b.knots()[j + r]).sum::<f64>() / (k - 1) as f64);
        for &t in &[0.0, 0.13, 0.5, 0.77, 1.0] {
            assert!((b.curve(greville.as_slice(), t) - t).abs() < 1e-12);
        }
        let d = cb.decompose(&greville).unwrap();
        assert!((d.constant - 0.5).abs() < 1e-12);
        let mut theta = vec![0.0; 6];
        theta[1..].copy_from_slice(d.functional.as_slice());
        for &t in &[0.0, 0.3, 0.9, 1.0] {
            assert!((cb.curve(&theta, t) - (t - 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn decompose_rejects_wrong_length() {
        let cb = CenteredBasis::new(BSplineBasis::new(5, 3).unwrap());
        assert!(cb.decompose(&DVector::zeros(4)).is_err());
    }

    #[test]
    fn polynomial_reproduction_by_least_squares() {
        for &(l, k) in &[(6, 3), (9, 4), (5, 2)] {
            let b = BSplineBasis::new(l, k).unwrap();
            let grid: Vec<f64> = (0..=400).map(|i| i as f64 / 400.0).collect();
            let x = DMatrix::from_fn(grid.len(), l, |r, c| b.eval_dense(grid[r])[c]);
            for deg in 0..k {
                let y = DVector::from_iterator(grid.len(), grid.iter().map(|t| (t - 0.3).powi(deg as i32)));
                let xtx = x.transpose() * &x;
                let coef = xtx.cholesky().unwrap().solve(&(x.transpose() * &y));
                let resid = (&x * coef - &y).amax();
                assert!(resid < 1e-9, "order {k} degree {deg}: {resid}");
            }
        }
    }

    #[test]
    fn functional_norm_two_ways() {
        let cb = CenteredBasis::new(BSplineBasis::new(8, 3).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let gamma = DVector::from_fn(8, |_, _| rng.random_range(-3.0..3.0));
            let d = cb.decompose(&gamma).unwrap();
            let c = d.constant;
            let direct = quad(|t| (cb.parent().curve(gamma.as_slice(), t) - c).powi(2), cb.parent().breakpoints());
            assert!((cb.functional_norm_sq(d.functional.as_slice()) - direct).abs() < 1e-10);
        }
    }

    proptest! {
        #[test]
        fn pythagoras(coefs in proptest::collection::vec(-5.0f64..5.0, 7)) {
            let cb = CenteredBasis::new(BSplineBasis::new(7, 3).unwrap());
            let gamma = DVector::from_vec(coefs);
            let d = cb.decompose(&gamma).unwrap();
            let breaks = cb.parent().breakpoints().to_vec();
            let g2 = quad(|t| cb.parent().curve(gamma.as_slice(), t).powi(2), &breaks);
            let c = d.constant;
            let f2 = quad(|t| (cb.parent().curve(gamma.as_slice(), t) - c).powi(2), &breaks);
            let fint = quad(|t| cb.parent().curve(gamma.as_slice(), t) - c, &breaks);
            prop_assert!((g2 - (c * c + f2)).abs() < 1e-10);
            prop_assert!(fint.abs() < 1e-10);
            // reconstruction c + f reproduces g
            let back = cb.recompose(&d);
            prop_assert!((back - &gamma).amax() < 1e-12);
        }

        #[test]
        fn decompose_is_linear(g1 in proptest::collection::vec(-5.0f64..5.0, 6),
                               g2 in proptest::collection::vec(-5.0f64..5.0, 6),
                               a in -3.0f64..3.0, b in -3.0f64..3.0) {
            let cb = CenteredBasis::new(BSplineBasis::new(6, 3).unwrap());
            let (g1, g2) = (DVector::from_vec(g1), DVector::from_vec(g2));
            let d1 = cb.decompose(&g1).unwrap();
            let d2 = cb.decompose(&g2).unwrap();
            let d = cb.decompose(&(&g1 * a + &g2 * b)).unwrap();
            prop_assert!((d.constant - (a * d1.constant + b * d2.constant)).abs() < 1e-12);
            prop_assert!((d.functional - (d1.functional * a + d2.functional * b)).amax() < 1e-12);
        }
    }

    #[test]
    fn default_dimension_rule() {
        assert_eq!(default_num_basis(100, 3), 6);
        assert_eq!(default_num_basis(200, 3), 7);
        assert_eq!(default_num_basis(2, 3), 3);
        assert_eq!(default_num_basis(10_000_000, 3), 15);
    }
}
