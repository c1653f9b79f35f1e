//! Spline bases and second-derivative penalties on the log-age scale.
//!
//! Two families are supported: a cardinal natural cubic regression spline
//! (`cs`, with an eigenvalue shrinkage of the penalty null space) and a
//! clamped B-spline basis (`bs`). Both use as many basis functions as there
//! are age groups in the block. Blocks with too few ages fall back to an
//! unpenalized identity basis.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::AgeRange;
use crate::error::{Error, Result};

/// Relative eigenvalue tolerance used for rank and PSD decisions.
pub const EIGEN_REL_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    /// Shrinkage cubic regression spline (`cs`).
    CubicRegressionShrinkage,
    /// Clamped B-spline basis (`bs`).
    BSpline,
    /// One free coefficient per age, no penalty.
    Identity,
}

/// `log(a + 1)` for internal ages `a = 1..=A`.
pub fn log_age_grid(ages: &AgeRange) -> Vec<f64> {
    ages.internal_ages().map(|a| ((a + 1) as f64).ln()).collect()
}

/// Same grid for an arbitrary count of ages starting at internal age `first`.
pub fn log_age_grid_from(first: usize, count: usize) -> Vec<f64> {
    (first..first + count).map(|a| ((a + 1) as f64).ln()).collect()
}

fn check_knots(knots: &[f64]) -> Result<()> {
    if knots.iter().any(|k| !k.is_finite()) {
        return Err(Error::DegenerateKnots("non-finite knot".into()));
    }
    if knots.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::DegenerateKnots(format!("knots must be strictly increasing: {knots:?}")));
    }
    Ok(())
}

/// Band matrices of the natural-spline second-derivative system:
/// `B γ = D β` with `γ` the interior second derivatives.
fn natural_spline_system(knots: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = knots.len();
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    let mut b = DMatrix::zeros(m, m);
    let mut d = DMatrix::zeros(m, n);
    for i in 0..m {
        b[(i, i)] = (h[i] + h[i + 1]) / 3.0;
        if i + 1 < m {
            b[(i, i + 1)] = h[i + 1] / 6.0;
            b[(i + 1, i)] = h[i + 1] / 6.0;
        }
        d[(i, i)] = 1.0 / h[i];
        d[(i, i + 1)] = -1.0 / h[i] - 1.0 / h[i + 1];
        d[(i, i + 2)] = 1.0 / h[i + 1];
    }
    (b, d)
}

/// Cardinal natural cubic spline basis at its own knots and the exact
/// `∫ f''(x)² dx` penalty, before shrinkage.
pub fn build_cr_basis(knots: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_knots(knots)?;
    let n = knots.len();
    if n < 3 {
        return Err(Error::DegenerateKnots(format!("cr basis needs at least 3 knots, got {n}")));
    }
    let (b, d) = natural_spline_system(knots);
    let binv_d = b
        .cholesky()
        .ok_or_else(|| Error::DegenerateKnots("singular natural-spline system".into()))?
        .solve(&d);
    let mut s = d.transpose() * binv_d;
    s = (&s + s.transpose()) * 0.5;
    Ok((DMatrix::identity(n, n), s))
}

/// Natural cubic interpolant through `(knots, values)`.
#[derive(Debug, Clone)]
pub struct NaturalCubic {
    knots: Vec<f64>,
    values: Vec<f64>,
    second: Vec<f64>,
}

impl NaturalCubic {
    pub fn new(knots: &[f64], values: &[f64]) -> Result<Self> {
        check_knots(knots)?;
        let n = knots.len();
        if values.len() != n || n < 3 {
            return Err(Error::LengthMismatch { expected: n.max(3), got: values.len() });
        }
        let (b, d) = natural_spline_system(knots);
        let rhs = d * DVector::from_column_slice(values);
        let inner = b
            .cholesky()
            .ok_or_else(|| Error::DegenerateKnots("singular natural-spline system".into()))?
            .solve(&rhs);
        let mut second = vec![0.0; n];
        second[1..n - 1].copy_from_slice(inner.as_slice());
        Ok(NaturalCubic {
            knots: knots.to_vec(),
            values: values.to_vec(),
            second,
        })
    }

    fn segment(&self, x: f64) -> usize {
        let n = self.knots.len();
        match self.knots.iter().position(|&k| k > x) {
            Some(0) => 0,
            Some(i) => (i - 1).min(n - 2),
            None => n - 2,
        }
    }

    /// Value and second derivative at `x` (linear extrapolation outside the knots).
    pub fn eval(&self, x: f64) -> (f64, f64) {
        let n = self.knots.len();
        if x < self.knots[0] || x > self.knots[n - 1] {
            let (i, j) = if x < self.knots[0] { (0, 1) } else { (n - 2, n - 1) };
            let h = self.knots[j] - self.knots[i];
            let slope = (self.values[j] - self.values[i]) / h
                + if i == 0 {
                    -h * self.second[j] / 6.0
                } else {
                    h * self.second[i] / 6.0
                };
            let anchor = if i == 0 { 0 } else { n - 1 };
            return (self.values[anchor] + slope * (x - self.knots[anchor]), 0.0);
        }
        let i = self.segment(x);
        let h = self.knots[i + 1] - self.knots[i];
        let a = (self.knots[i + 1] - x) / h;
        let b = (x - self.knots[i]) / h;
        let f = a * self.values[i]
            + b * self.values[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1]) * h * h / 6.0;
        (f, a * self.second[i] + b * self.second[i + 1])
    }
}

/// Clamped B-spline basis of a given degree with `n_basis` functions spanning
/// `[lo, hi]` with uniform interior knots.
#[derive(Debug, Clone, PartialEq)]
pub struct BSplineBasis {
    pub degree: usize,
    pub knots: Vec<f64>,
    pub n_basis: usize,
}

impl BSplineBasis {
    pub fn uniform(lo: f64, hi: f64, n_basis: usize, degree: usize) -> Result<Self> {
        if !(hi > lo) {
            return Err(Error::DegenerateKnots(format!("empty span [{lo}, {hi}]")));
        }
        if n_basis < degree + 1 {
            return Err(Error::DegenerateKnots(format!(
                "{n_basis} basis functions is fewer than degree + 1 = {}",
                degree + 1
            )));
        }
        let interior = n_basis - degree - 1;
        let mut knots = vec![lo; degree + 1];
        for k in 1..=interior {
            knots.push(lo + (hi - lo) * k as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(hi, degree + 1));
        Ok(BSplineBasis { degree, knots, n_basis })
    }

    fn span(&self, x: f64) -> usize {
        let p = self.degree;
        let n = self.n_basis;
        if x >= self.knots[n] {
            return n - 1;
        }
        if x <= self.knots[p] {
            return p;
        }
        let mut lo = p;
        let mut hi = n;
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if x < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Derivatives `0..=nd` of all basis functions at `x`; `out[k][i]` is the
    /// k-th derivative of basis function `i`.
    pub fn derivatives(&self, x: f64, nd: usize) -> Vec<Vec<f64>> {
        let p = self.degree;
        let u = &self.knots;
        let span = self.span(x);
        let mut ndu = vec![vec![0.0; p + 1]; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        ndu[0][0] = 1.0;
        for j in 1..=p {
            left[j] = x - u[span + 1 - j];
            right[j] = u[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                ndu[j][r] = right[r + 1] + left[j - r];
                let temp = ndu[r][j - 1] / ndu[j][r];
                ndu[r][j] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            ndu[j][j] = saved;
        }
        let mut ders = vec![vec![0.0; p + 1]; nd + 1];
        for j in 0..=p {
            ders[0][j] = ndu[j][p];
        }
        let mut a = vec![vec![0.0; p + 1]; 2];
        for r in 0..=p {
            let (mut s1, mut s2) = (0usize, 1usize);
            a[0][0] = 1.0;
            for k in 1..=nd.min(p) {
                let mut d = 0.0;
                let rk = r as isize - k as isize;
                let pk = p - k;
                if r >= k {
                    a[s2][0] = a[s1][0] / ndu[pk + 1][rk as usize];
                    d = a[s2][0] * ndu[rk as usize][pk];
                }
                let j1 = if rk >= -1 { 1 } else { (-rk) as usize };
                let j2 = if (r as isize - 1) <= pk as isize { k - 1 } else { p - r };
                for j in j1..=j2 {
                    let idx = (rk + j as isize) as usize;
                    a[s2][j] = (a[s1][j] - a[s1][j - 1]) / ndu[pk + 1][idx];
                    d += a[s2][j] * ndu[idx][pk];
                }
                if r <= pk {
                    a[s2][k] = -a[s1][k - 1] / ndu[pk + 1][r];
                    d += a[s2][k] * ndu[r][pk];
                }
                ders[k][r] = d;
                std::mem::swap(&mut s1, &mut s2);
            }
        }
        let mut factor = p as f64;
        for k in 1..=nd.min(p) {
            for v in ders[k].iter_mut() {
                *v *= factor;
            }
            factor *= (p - k) as f64;
        }
        let mut out = vec![vec![0.0; self.n_basis]; nd + 1];
        for k in 0..=nd {
            for j in 0..=p {
                out[k][span - p + j] = ders[k][j];
            }
        }
        out
    }

    /// Exact `∫ B_i''(x) B_j''(x) dx` over the knot span using 3-point
    /// Gauss–Legendre quadrature on each knot interval.
    pub fn second_derivative_penalty(&self) -> DMatrix<f64> {
        let n = self.n_basis;
        let mut s = DMatrix::zeros(n, n);
        let nodes = [-(0.6f64).sqrt(), 0.0, (0.6f64).sqrt()];
        let weights = [5.0 / 9.0, 8.0 / 9.0, 5.0 / 9.0];
        for w in self.knots.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b <= a {
                continue;
            }
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            for (z, wt) in nodes.iter().zip(weights) {
                let d2 = &self.derivatives(mid + half * z, 2)[2];
                for i in 0..n {
                    if d2[i] == 0.0 {
                        continue;
                    }
                    for j in 0..n {
                        s[(i, j)] += wt * half * d2[i] * d2[j];
                    }
                }
            }
        }
        (&s + s.transpose()) * 0.5
    }
}

/// Degree-`degree` B-spline basis evaluated on the grid and its penalty.
pub fn build_bspline_basis(grid: &[f64], degree: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_knots(grid)?;
    let n = grid.len();
    let basis = BSplineBasis::uniform(grid[0], grid[n - 1], n, degree)?;
    let mut x = DMatrix::zeros(n, n);
    for (r, &g) in grid.iter().enumerate() {
        let vals = &basis.derivatives(g, 0)[0];
        for c in 0..n {
            x[(r, c)] = vals[c];
        }
    }
    Ok((x, basis.second_derivative_penalty()))
}

/// Replace the null-space eigenvalues of a PSD penalty with
/// `epsilon * (smallest non-zero eigenvalue)`, giving a positive definite matrix.
pub fn apply_shrinkage(s: &DMatrix<f64>, epsilon: f64) -> Result<DMatrix<f64>> {
    if !(epsilon > 0.0) {
        return Err(Error::ConfigInvalid(format!("shrinkage epsilon must be positive, got {epsilon}")));
    }
    let eig = SymmetricEigen::new(s.clone());
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroMatrix);
    }
    let tol = EIGEN_REL_TOL * max;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd(min));
    }
    let smallest_nonzero = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v >= tol)
        .fold(f64::INFINITY, f64::min);
    if eig.eigenvalues.iter().all(|&v| v >= tol) {
        return Ok(s.clone());
    }
    let lam = eig
        .eigenvalues
        .map(|v| if v < tol { epsilon * smallest_nonzero } else { v });
    let u = &eig.eigenvectors;
    let out = u * DMatrix::from_diagonal(&lam) * u.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Diagonal down-weighting: `exp(a - 4)` for the first three basis functions, 1 after.
pub fn downweight_matrix(n_basis: usize) -> DVector<f64> {
    DVector::from_fn(n_basis, |i, _| if i < 3 { (i as f64 - 3.0).exp() } else { 1.0 })
}

/// `log |Σ λ_i S_i|_+` (sum of logs of eigenvalues above the relative
/// tolerance) and the rank of the combined matrix.
pub fn generalized_logdet(penalties: &[DMatrix<f64>], lambda: &[f64]) -> Result<(f64, usize)> {
    if penalties.is_empty() {
        return Err(Error::EmptySet("no penalty matrices".into()));
    }
    if penalties.len() != lambda.len() {
        return Err(Error::LengthMismatch { expected: penalties.len(), got: lambda.len() });
    }
    if lambda.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::ConfigInvalid(format!("penalty weights must be positive: {lambda:?}")));
    }
    let n = penalties[0].nrows();
    let mut total = DMatrix::zeros(n, n);
    for (s, &l) in penalties.iter().zip(lambda) {
        total += s * l;
    }
    let total = (&total + total.transpose()) * 0.5;
    let eig = SymmetricEigen::new(total);
    let max = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(Error::AllZeroMatrix);
    }
    let tol = EIGEN_REL_TOL * max;
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < -tol {
        return Err(Error::NotPsd(min));
    }
    let (mut logdet, mut rank) = (0.0, 0);
    for &v in eig.eigenvalues.iter() {
        if v > tol {
            logdet += v.ln();
            rank += 1;
        }
    }
    Ok((logdet, rank))
}

/// Basis, penalties and weights for one age-dependent parameter block.
#[derive(Debug, Clone)]
pub struct SplineBlock {
    pub kind: BasisKind,
    pub n_basis: usize,
    /// Log-age knot positions (the block's age grid).
    pub knots: Vec<f64>,
    /// Rows are ages of the block, columns basis functions.
    pub x: DMatrix<f64>,
    /// Raw penalties `S_i` (after shrinkage for `cs`).
    pub s: Vec<DMatrix<f64>>,
    /// Diagonal of `D`.
    pub d: DVector<f64>,
    /// `D S_i D`.
    pub s_tilde: Vec<DMatrix<f64>>,
    /// `log |Σ S̃_i|_+` at unit weights and its rank.
    pub logdet_unit: f64,
    pub rank: usize,
}

impl SplineBlock {
    /// Build a block over the log-age grid `knots`. Falls back to the identity
    /// basis when the grid is too short for the requested kind.
    pub fn new(kind: BasisKind, knots: &[f64], shrinkage_epsilon: f64, bs_degree: usize) -> Result<Self> {
        check_knots(knots)?;
        let n = knots.len();
        let effective = match kind {
            BasisKind::CubicRegressionShrinkage if n < 3 => BasisKind::Identity,
            BasisKind::BSpline if n < bs_degree + 1 => BasisKind::Identity,
            k => k,
        };
        let (x, s) = match effective {
            BasisKind::Identity => (DMatrix::identity(n, n), Vec::new()),
            BasisKind::CubicRegressionShrinkage => {
                let (x, s) = build_cr_basis(knots)?;
                (x, vec![apply_shrinkage(&s, shrinkage_epsilon)?])
            }
            BasisKind::BSpline => {
                let (x, s) = build_bspline_basis(knots, bs_degree)?;
                (x, vec![s])
            }
        };
        let d = downweight_matrix(n);
        let dm = DMatrix::from_diagonal(&d);
        let s_tilde: Vec<DMatrix<f64>> = s.iter().map(|si| &dm * si * &dm).collect();
        let (logdet_unit, rank) = if s_tilde.is_empty() {
            (0.0, 0)
        } else {
            generalized_logdet(&s_tilde, &vec![1.0; s_tilde.len()])?
        };
        Ok(SplineBlock {
            kind: effective,
            n_basis: n,
            knots: knots.to_vec(),
            x,
            s,
            d,
            s_tilde,
            logdet_unit,
            rank,
        })
    }

    pub fn is_penalized(&self) -> bool {
        !self.s_tilde.is_empty()
    }

    /// `Σ_i S̃_i` (zero matrix for unpenalized blocks).
    pub fn total_penalty(&self) -> DMatrix<f64> {
        let mut t = DMatrix::zeros(self.n_basis, self.n_basis);
        for s in &self.s_tilde {
            t += s;
        }
        t
    }

    /// `log |λ Σ S̃_i|_+ = rank · log λ + log |Σ S̃_i|_+` for a shared weight.
    pub fn logdet_at(&self, log_lambda: f64) -> f64 {
        self.rank as f64 * log_lambda + self.logdet_unit
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn min_eig(m: &DMatrix<f64>) -> f64 {
        SymmetricEigen::new(m.clone()).eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    fn rank(m: &DMatrix<f64>) -> usize {
        let e = SymmetricEigen::new(m.clone()).eigenvalues;
        let max = e.iter().cloned().fold(0.0f64, f64::max);
        e.iter().filter(|&&v| v > EIGEN_REL_TOL * max).count()
    }

    #[test]
    fn grid_spacing_matches_log_age() {
        let g = log_age_grid(&AgeRange::new(1, 10).unwrap());
        assert_relative_eq!(g[0], 2f64.ln());
        assert_relative_eq!(g[1], 3f64.ln());
        assert_relative_eq!(g[2], 4f64.ln());
        let d12 = g[1] - g[0];
        assert_relative_eq!(d12, g[4] - g[2], epsilon = 1e-14);
        assert_relative_eq!(d12, g[7] - g[4], epsilon = 1e-14);
        assert_relative_eq!(d12, 1.5f64.ln(), epsilon = 1e-14);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(log_age_grid_from(1, 1), vec![2f64.ln()]);
    }

    #[test]
    fn cr_basis_is_cardinal_and_annihilates_lines() {
        let knots = log_age_grid_from(1, 8);
        let (x, s) = build_cr_basis(&knots).unwrap();
        assert_eq!(x, DMatrix::identity(8, 8));
        let beta = DVector::from_iterator(8, knots.iter().map(|k| 2.0 - 0.7 * k));
        let q = (beta.transpose() * &s * &beta)[(0, 0)];
        assert!(q.abs() < 1e-10 * s.norm() * beta.norm_squared(), "{q}");
        assert_eq!(rank(&s), 6);
        assert!(min_eig(&s) > -1e-10 * s.norm());
    }

    #[test]
    fn cr_duplicate_knots_rejected() {
        assert!(matches!(build_cr_basis(&[0.0, 1.0, 1.0, 2.0]), Err(Error::DegenerateKnots(_))));
    }

    #[test]
    fn bspline_partition_of_unity_and_rank() {
        let grid = log_age_grid_from(1, 10);
        let (x, s) = build_bspline_basis(&grid, 3).unwrap();
        for r in 0..10 {
            assert_relative_eq!(x.row(r).sum(), 1.0, epsilon = 1e-12);
        }
        assert_eq!(rank(&s), 8);
        assert_eq!(x.clone().svd(false, false).rank(1e-10), 10);
    }

    #[test]
    fn bspline_linear_coefficients_are_unpenalized() {
        // Greville abscissae reproduce linear functions exactly.
        let grid = log_age_grid_from(1, 9);
        let basis = BSplineBasis::uniform(grid[0], grid[8], 9, 3).unwrap();
        let greville: Vec<f64> = (0..9).map(|i| basis.knots[i + 1..i + 4].iter().sum::<f64>() / 3.0).collect();
        let beta = DVector::from_iterator(9, greville.iter().map(|g| 0.3 + 1.7 * g));
        let s = basis.second_derivative_penalty();
        let q = (beta.transpose() * &s * &beta)[(0, 0)];
        assert!(q.abs() <= 1e-12 * s.norm() * beta.norm_squared(), "{q}");
    }

    #[test]
    fn shrinkage_fills_null_space() {
        let knots = log_age_grid_from(1, 6);
        let (_, s) = build_cr_basis(&knots).unwrap();
        let sh = apply_shrinkage(&s, 0.01).unwrap();
        assert_eq!(rank(&sh), 6);
        assert!(sh.determinant() > 0.0);
        let full = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 2.0, 3.0]));
        let same = apply_shrinkage(&full, 0.01).unwrap();
        assert!((same - full).abs().max() <= 1e-12);
        assert!(apply_shrinkage(&s, 0.0).is_err());
    }

    #[test]
    fn downweight_diagonal() {
        let d = downweight_matrix(10);
        let expect = [(-3f64).exp(), (-2f64).exp(), (-1f64).exp(), 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        assert_eq!(d.as_slice(), &expect);
        assert_eq!(downweight_matrix(2).as_slice(), &expect[..2]);
        let dm = DMatrix::from_diagonal(&d);
        let did = &dm * DMatrix::identity(10, 10) * &dm;
        assert_relative_eq!(did[(0, 0)], (-6f64).exp());
        assert_relative_eq!(did[(1, 1)], (-4f64).exp());
        assert_relative_eq!(did[(2, 2)], (-2f64).exp());
        assert_eq!(did[(3, 3)], 1.0);
    }

    #[test]
    fn generalized_logdet_examples() {
        let (ld, r) = generalized_logdet(&[DMatrix::identity(3, 3)], &[2.0]).unwrap();
        assert_relative_eq!(ld, 3.0 * 2f64.ln(), epsilon = 1e-14);
        assert_eq!(r, 3);
        let s = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 4.0]));
        let (ld, r) = generalized_logdet(&[s], &[1.0]).unwrap();
        assert_relative_eq!(ld, 4f64.ln(), epsilon = 1e-14);
        assert_eq!(r, 2);
        assert!(matches!(
            generalized_logdet(&[DMatrix::zeros(2, 2)], &[1.0]),
            Err(Error::AllZeroMatrix)
        ));
    }

    #[test]
    fn identity_fallback_for_short_blocks() {
        let b = SplineBlock::new(BasisKind::BSpline, &log_age_grid_from(1, 3), 0.01, 3).unwrap();
        assert_eq!(b.kind, BasisKind::Identity);
        assert!(!b.is_penalized());
        let b = SplineBlock::new(BasisKind::CubicRegressionShrinkage, &log_age_grid_from(1, 2), 0.01, 3).unwrap();
        assert_eq!(b.kind, BasisKind::Identity);
        let b = SplineBlock::new(BasisKind::BSpline, &log_age_grid_from(1, 3), 0.01, 2).unwrap();
        assert_eq!(b.kind, BasisKind::BSpline);
    }

    #[test]
    fn logdet_scales_with_rank() {
        let b = SplineBlock::new(BasisKind::BSpline, &log_age_grid_from(1, 7), 0.01, 3).unwrap();
        let (direct, rank) = generalized_logdet(&b.s_tilde, &[5f64]).unwrap();
        assert_eq!(rank, 5);
        assert_relative_eq!(b.logdet_at(5f64.ln()), direct, max_relative = 1e-10);
    }
}
