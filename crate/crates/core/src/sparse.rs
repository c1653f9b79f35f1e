//! Symmetric "arrow" matrices: a banded block followed by a dense border.
//!
//! Latent states couple only across adjacent years, so ordering them year by
//! year gives a band; catchability coefficients touch every year and live in
//! the border. Factorization is a band Cholesky plus a dense Schur complement.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArrowStructure {
    pub n_band: usize,
    /// Half-bandwidth of the band block: entries with `|i - j| > half_bw` are zero.
    pub half_bw: usize,
    pub n_border: usize,
}

impl ArrowStructure {
    pub fn dense(n: usize) -> Self {
        ArrowStructure {
            n_band: n,
            half_bw: n.saturating_sub(1),
            n_border: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.n_band + self.n_border
    }

    /// Whether entry `(i, j)` can be non-zero.
    pub fn contains(&self, i: usize, j: usize) -> bool {
        let n = self.n_band;
        i >= n || j >= n || i.abs_diff(j) <= self.half_bw
    }
}

/// Lower-triangle storage of a symmetric arrow matrix.
#[derive(Debug, Clone)]
pub struct ArrowMatrix {
    pub structure: ArrowStructure,
    band: Vec<f64>,
    cross: Vec<f64>,
    border: Vec<f64>,
}

impl ArrowMatrix {
    pub fn zeros(structure: ArrowStructure) -> Self {
        let w1 = structure.half_bw + 1;
        let p = structure.n_border;
        ArrowMatrix {
            structure,
            band: vec![0.0; structure.n_band * w1],
            cross: vec![0.0; structure.n_band * p],
            border: vec![0.0; p * p],
        }
    }

    /// Add `v` to entry `(i, j)` of the full symmetric matrix. Only the lower
    /// triangle is stored, so entries with `i < j` are dropped: callers pass
    /// both orderings of every off-diagonal pair.
    pub fn accumulate(&mut self, i: usize, j: usize, v: f64) {
        if i < j {
            return;
        }
        *self.entry_mut(i, j) += v;
    }

    fn entry_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        let s = self.structure;
        let n = s.n_band;
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j >= n {
            &mut self.border[(i - n) * s.n_border + (j - n)]
        } else if i >= n {
            &mut self.cross[j * s.n_border + (i - n)]
        } else {
            assert!(i - j <= s.half_bw, "entry ({i}, {j}) outside band");
            &mut self.band[i * (s.half_bw + 1) + (i - j)]
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let s = self.structure;
        let n = s.n_band;
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j >= n {
            self.border[(i - n) * s.n_border + (j - n)]
        } else if i >= n {
            self.cross[j * s.n_border + (i - n)]
        } else if i - j <= s.half_bw {
            self.band[i * (s.half_bw + 1) + (i - j)]
        } else {
            0.0
        }
    }

    pub fn add_diagonal(&mut self, shift: f64) {
        for i in 0..self.structure.dim() {
            *self.entry_mut(i, i) += shift;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.structure.dim();
        DMatrix::from_fn(n, n, |i, j| self.get(i, j))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let s = self.structure;
        let n = s.dim();
        let mut y = vec![0.0; n];
        for i in 0..n {
            for j in 0..=i {
                if !s.contains(i, j) {
                    continue;
                }
                let a = self.get(i, j);
                y[i] += a * x[j];
                if i != j {
                    y[j] += a * x[i];
                }
            }
        }
        y
    }

    pub fn cholesky(&self) -> Result<ArrowCholesky> {
        ArrowCholesky::new(self)
    }
}

/// Cholesky factorization of an [`ArrowMatrix`].
#[derive(Debug, Clone)]
pub struct ArrowCholesky {
    structure: ArrowStructure,
    /// Band factor `L_A`, same layout as the band storage.
    l_band: Vec<f64>,
    /// `L_A^{-1} B`, row-major `n_band x n_border`.
    y: Vec<f64>,
    /// Factor of the Schur complement `C - Yᵀ Y`.
    l_schur: DMatrix<f64>,
}

impl ArrowCholesky {
    fn new(m: &ArrowMatrix) -> Result<Self> {
        let s = m.structure;
        let (n, w, p) = (s.n_band, s.half_bw, s.n_border);
        let w1 = w + 1;
        let mut l = m.band.clone();
        for j in 0..n {
            let lo = j.saturating_sub(w);
            let mut d = l[j * w1];
            for k in lo..j {
                let v = l[j * w1 + (j - k)];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return Err(Error::IndefiniteHessian(format!("non-positive pivot {d:e} at row {j}")));
            }
            let djj = d.sqrt();
            l[j * w1] = djj;
            for i in j + 1..(j + w1).min(n) {
                let lo_i = i.saturating_sub(w);
                let mut v = l[i * w1 + (i - j)];
                for k in lo_i.max(lo)..j {
                    v -= l[i * w1 + (i - k)] * l[j * w1 + (j - k)];
                }
                l[i * w1 + (i - j)] = v / djj;
            }
        }
        let mut chol = ArrowCholesky {
            structure: s,
            l_band: l,
            y: vec![0.0; n * p],
            l_schur: DMatrix::zeros(p, p),
        };
        if p == 0 {
            return Ok(chol);
        }
        let mut col = vec![0.0; n];
        for c in 0..p {
            for (i, v) in col.iter_mut().enumerate() {
                *v = m.cross[i * p + c];
            }
            chol.band_forward(&mut col);
            for i in 0..n {
                chol.y[i * p + c] = col[i];
            }
        }
        let mut schur = DMatrix::from_fn(p, p, |a, b| m.border[a.max(b) * p + a.min(b)]);
        for i in 0..n {
            let row = &chol.y[i * p..(i + 1) * p];
            for a in 0..p {
                for b in 0..=a {
                    schur[(a, b)] -= row[a] * row[b];
                }
            }
        }
        for a in 0..p {
            for b in 0..a {
                schur[(b, a)] = schur[(a, b)];
            }
        }
        chol.l_schur = schur
            .cholesky()
            .ok_or_else(|| Error::IndefiniteHessian("border Schur complement not positive definite".into()))?
            .l();
        Ok(chol)
    }

    pub fn structure(&self) -> ArrowStructure {
        self.structure
    }

    fn band_forward(&self, x: &mut [f64]) {
        let (n, w) = (self.structure.n_band, self.structure.half_bw);
        let w1 = w + 1;
        for i in 0..n {
            let mut v = x[i];
            for k in i.saturating_sub(w)..i {
                v -= self.l_band[i * w1 + (i - k)] * x[k];
            }
            x[i] = v / self.l_band[i * w1];
        }
    }

    fn band_backward(&self, x: &mut [f64]) {
        let (n, w) = (self.structure.n_band, self.structure.half_bw);
        let w1 = w + 1;
        for i in (0..n).rev() {
            let mut v = x[i];
            for k in i + 1..(i + w1).min(n) {
                v -= self.l_band[k * w1 + (k - i)] * x[k];
            }
            x[i] = v / self.l_band[i * w1];
        }
    }

    pub fn log_det(&self) -> f64 {
        let w1 = self.structure.half_bw + 1;
        let band: f64 = (0..self.structure.n_band).map(|i| self.l_band[i * w1].ln()).sum();
        let border: f64 = (0..self.structure.n_border).map(|i| self.l_schur[(i, i)].ln()).sum();
        2.0 * (band + border)
    }

    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let s = self.structure;
        let (n, p) = (s.n_band, s.n_border);
        let mut x = rhs.to_vec();
        let (top, bottom) = x.split_at_mut(n);
        self.band_forward(top);
        if p > 0 {
            let mut z2 = nalgebra::DVector::from_column_slice(bottom);
            for i in 0..n {
                for c in 0..p {
                    z2[c] -= self.y[i * p + c] * top[i];
                }
            }
            let l = &self.l_schur;
            let z2 = l.solve_lower_triangular(&z2).expect("schur factor");
            let x2 = l.tr_solve_lower_triangular(&z2).expect("schur factor");
            for i in 0..n {
                for c in 0..p {
                    top[i] -= self.y[i * p + c] * x2[c];
                }
            }
            bottom.copy_from_slice(x2.as_slice());
        }
        self.band_backward(top);
        x
    }

    /// Entries of the inverse on the sparsity pattern of the matrix.
    pub fn selected_inverse(&self) -> SelectedInverse {
        let s = self.structure;
        let (n, w, p) = (s.n_band, s.half_bw, s.n_border);
        let w1 = w + 1;
        let l = &self.l_band;

        // Takahashi recurrences for the band block's own inverse.
        let mut z = vec![0.0; n * w1];
        let zget = |z: &[f64], i: usize, j: usize| {
            let (a, b) = if i >= j { (i, j) } else { (j, i) };
            z[a * w1 + (a - b)]
        };
        for i in (0..n).rev() {
            let lii = l[i * w1];
            let hi = (i + w).min(n - 1);
            for j in (i..=hi).rev() {
                let mut acc = if i == j { 1.0 / lii } else { 0.0 };
                for k in i + 1..=hi {
                    acc -= l[k * w1 + (k - i)] * zget(&z, k, j);
                }
                z[j * w1 + (j - i)] = acc / lii;
            }
        }

        let mut inv = SelectedInverse {
            structure: s,
            band: z,
            cross: vec![0.0; n * p],
            border: DMatrix::zeros(p, p),
        };
        if p == 0 {
            return inv;
        }

        // W = A^{-1} B, S^{-1}, then correct the band block.
        let mut wmat = vec![0.0; n * p];
        let mut col = vec![0.0; n];
        for c in 0..p {
            for i in 0..n {
                col[i] = self.y[i * p + c];
            }
            self.band_backward(&mut col);
            for i in 0..n {
                wmat[i * p + c] = col[i];
            }
        }
        let ident = DMatrix::identity(p, p);
        let tmp = self.l_schur.solve_lower_triangular(&ident).expect("schur factor");
        let sinv = self.l_schur.tr_solve_lower_triangular(&tmp).expect("schur factor");
        let mut ws = vec![0.0; n * p];
        for i in 0..n {
            for c in 0..p {
                let mut v = 0.0;
                for d in 0..p {
                    v += wmat[i * p + d] * sinv[(d, c)];
                }
                ws[i * p + c] = v;
            }
        }
        for i in 0..n {
            for j in i.saturating_sub(w)..=i {
                let mut v = 0.0;
                for c in 0..p {
                    v += ws[i * p + c] * wmat[j * p + c];
                }
                inv.band[i * w1 + (i - j)] += v;
            }
            for c in 0..p {
                inv.cross[i * p + c] = -ws[i * p + c];
            }
        }
        inv.border = sinv;
        inv
    }
}

/// Inverse entries on the arrow pattern.
#[derive(Debug, Clone)]
pub struct SelectedInverse {
    structure: ArrowStructure,
    band: Vec<f64>,
    cross: Vec<f64>,
    border: DMatrix<f64>,
}

impl SelectedInverse {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let s = self.structure;
        let n = s.n_band;
        let (i, j) = if i >= j { (i, j) } else { (j, i) };
        if j >= n {
            self.border[(i - n, j - n)]
        } else if i >= n {
            self.cross[j * s.n_border + (i - n)]
        } else {
            assert!(i - j <= s.half_bw, "inverse entry ({i}, {j}) outside pattern");
            self.band[i * (s.half_bw + 1) + (i - j)]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_arrow(n: usize, w: usize, p: usize, seed: u64) -> ArrowMatrix {
        let s = ArrowStructure { n_band: n, half_bw: w, n_border: p };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = ArrowMatrix::zeros(s);
        let dim = s.dim();
        for i in 0..dim {
            for j in 0..i {
                if s.contains(i, j) {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    m.accumulate(i, j, v);
                    m.accumulate(j, i, v);
                }
            }
        }
        m.add_diagonal(2.0 * (w + p + 1) as f64);
        m
    }

    #[test]
    fn factorization_matches_dense() {
        for (n, w, p) in [(12, 3, 0), (15, 4, 3), (7, 6, 2), (1, 0, 4)] {
            let m = random_arrow(n, w, p, (n * 100 + w * 10 + p) as u64);
            let dense = m.to_dense();
            let chol = m.cholesky().unwrap();
            let expect = dense.clone().cholesky().unwrap().determinant().ln();
            assert!((chol.log_det() - expect).abs() < 1e-10 * expect.abs().max(1.0));
            let rhs: Vec<f64> = (0..n + p).map(|i| (i as f64 * 0.37).sin()).collect();
            let x = chol.solve(&rhs);
            let back = m.mul_vec(&x);
            for (a, b) in back.iter().zip(&rhs) {
                assert!((a - b).abs() < 1e-10);
            }
            let inv = dense.try_inverse().unwrap();
            let sel = chol.selected_inverse();
            for i in 0..n + p {
                for j in 0..n + p {
                    if m.structure.contains(i, j) {
                        assert!((sel.get(i, j) - inv[(i, j)]).abs() < 1e-10, "({i},{j})");
                    }
                }
            }
        }
    }

    #[test]
    fn indefinite_is_reported() {
        let mut m = ArrowMatrix::zeros(ArrowStructure { n_band: 3, half_bw: 1, n_border: 1 });
        for i in 0..4 {
            m.accumulate(i, i, 1.0);
        }
        m.accumulate(3, 0, 2.0);
        m.accumulate(0, 3, 2.0);
        assert!(matches!(m.cholesky(), Err(Error::IndefiniteHessian(_))));
    }
}
