//! Laplace approximation of a latent-variable objective and its outer gradient.
//!
//! An objective `f(u, θ)` is a negative log joint density of inner variables
//! `u` and outer parameters `θ`. The Laplace value is
//! `f(u*, θ) + ½ log det H - (n/2) log 2π` with `u*` the inner mode and `H`
//! the inner Hessian there. Its gradient follows from the implicit function
//! theorem and needs third derivatives contracted with `H⁻¹` entries on the
//! Hessian pattern, which the selected inverse provides.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::sparse::{ArrowCholesky, ArrowMatrix, ArrowStructure, SelectedInverse};

const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// A local coordinate of a term: a linear combination of inner or outer entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Coord {
    pub inner: bool,
    pub combo: Vec<(usize, f64)>,
}

impl Coord {
    pub fn inner(i: usize) -> Self {
        Coord { inner: true, combo: vec![(i, 1.0)] }
    }

    pub fn outer(j: usize) -> Self {
        Coord { inner: false, combo: vec![(j, 1.0)] }
    }

    pub fn inner_combo(combo: Vec<(usize, f64)>) -> Self {
        Coord { inner: true, combo }
    }

    pub fn outer_combo(combo: Vec<(usize, f64)>) -> Self {
        Coord { inner: false, combo }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pass {
    /// Value only.
    Value,
    /// Value, inner gradient and inner Hessian.
    Inner,
    /// Value, outer gradient, mixed Hessian and third-derivative contractions.
    Mode,
}

/// Collects term contributions for one pass.
pub struct Accumulator<'a> {
    pass: Pass,
    pub u: &'a [f64],
    pub theta: &'a [f64],
    value: f64,
    grad_u: Vec<f64>,
    hess: Option<ArrowMatrix>,
    grad_theta: Vec<f64>,
    h_utheta: DMatrix<f64>,
    g_u: Vec<f64>,
    g_theta: Vec<f64>,
    p: Option<&'a SelectedInverse>,
}

impl<'a> Accumulator<'a> {
    fn new(
        pass: Pass,
        u: &'a [f64],
        theta: &'a [f64],
        structure: ArrowStructure,
        p: Option<&'a SelectedInverse>,
    ) -> Self {
        let (n, m) = (u.len(), theta.len());
        let inner = pass == Pass::Inner;
        let mode = pass == Pass::Mode;
        Accumulator {
            pass,
            u,
            theta,
            value: 0.0,
            grad_u: if inner { vec![0.0; n] } else { Vec::new() },
            hess: inner.then(|| ArrowMatrix::zeros(structure)),
            grad_theta: if mode { vec![0.0; m] } else { Vec::new() },
            h_utheta: if mode { DMatrix::zeros(n, m) } else { DMatrix::zeros(0, 0) },
            g_u: if mode { vec![0.0; n] } else { Vec::new() },
            g_theta: if mode { vec![0.0; m] } else { Vec::new() },
            p,
        }
    }

    pub fn pass(&self) -> Pass {
        self.pass
    }

    pub fn order(&self) -> u8 {
        match self.pass {
            Pass::Value => 0,
            Pass::Inner => 2,
            Pass::Mode => 3,
        }
    }

    fn coord_value(&self, c: &Coord) -> f64 {
        let src = if c.inner { self.u } else { self.theta };
        c.combo.iter().map(|&(i, w)| w * src[i]).sum()
    }

    /// Jets for the local coordinates at the current point.
    pub fn locals(&self, coords: &[Coord]) -> Vec<Jet> {
        let vals: Vec<f64> = coords.iter().map(|c| self.coord_value(c)).collect();
        Jet::variables(&vals, self.order())
    }

    /// Scatter a term evaluated on [`Accumulator::locals`] of `coords`.
    pub fn add_term(&mut self, coords: &[Coord], jet: &Jet) {
        self.value += jet.v;
        let k = coords.len();
        match self.pass {
            Pass::Value => {}
            Pass::Inner => {
                let g = jet.grad();
                let hess = self.hess.as_mut().expect("inner pass has a Hessian");
                for a in (0..k).filter(|&a| coords[a].inner) {
                    for &(i, wi) in &coords[a].combo {
                        self.grad_u[i] += wi * g[a];
                    }
                    for b in (0..k).filter(|&b| coords[b].inner) {
                        let h = jet.hess(a, b);
                        if h == 0.0 {
                            continue;
                        }
                        for &(i, wi) in &coords[a].combo {
                            for &(j, wj) in &coords[b].combo {
                                hess.accumulate(i, j, wi * wj * h);
                            }
                        }
                    }
                }
            }
            Pass::Mode => {
                let g = jet.grad();
                let p = self.p.expect("mode pass has the selected inverse");
                let inner: Vec<usize> = (0..k).filter(|&a| coords[a].inner).collect();
                for a in (0..k).filter(|&a| !coords[a].inner) {
                    for &(j, wj) in &coords[a].combo {
                        self.grad_theta[j] += wj * g[a];
                    }
                    for &b in &inner {
                        let h = jet.hess(a, b);
                        for &(i, wi) in &coords[b].combo {
                            for &(j, wj) in &coords[a].combo {
                                self.h_utheta[(i, j)] += wi * wj * h;
                            }
                        }
                    }
                }
                // P projected onto the inner local coordinates.
                let mut pl = vec![0.0; inner.len() * inner.len()];
                for (x, &a) in inner.iter().enumerate() {
                    for (y, &b) in inner.iter().enumerate().skip(x) {
                        let mut s = 0.0;
                        for &(i, wi) in &coords[a].combo {
                            for &(j, wj) in &coords[b].combo {
                                s += wi * wj * p.get(i, j);
                            }
                        }
                        pl[x * inner.len() + y] = s;
                        pl[y * inner.len() + x] = s;
                    }
                }
                for c in 0..k {
                    let mut s = 0.0;
                    for (x, &a) in inner.iter().enumerate() {
                        for (y, &b) in inner.iter().enumerate() {
                            s += jet.third(a, b, c) * pl[x * inner.len() + y];
                        }
                    }
                    let s = 0.5 * s;
                    if s == 0.0 {
                        continue;
                    }
                    let target = if coords[c].inner { &mut self.g_u } else { &mut self.g_theta };
                    for &(i, w) in &coords[c].combo {
                        target[i] += w * s;
                    }
                }
            }
        }
    }

    pub fn add_value(&mut self, v: f64) {
        self.value += v;
    }

    /// Inner gradient entry (inner pass only).
    pub fn add_grad_u(&mut self, i: usize, v: f64) {
        if self.pass == Pass::Inner {
            self.grad_u[i] += v;
        }
    }

    /// Symmetric inner Hessian entry; off-diagonal pairs are added to both halves.
    pub fn add_hess_uu(&mut self, i: usize, j: usize, v: f64) {
        if let Some(h) = self.hess.as_mut() {
            h.accumulate(i, j, v);
            if i != j {
                h.accumulate(j, i, v);
            }
        }
    }

    /// Inner Hessian entry for an ordered pair; callers visit both orders.
    pub fn add_hess_ordered(&mut self, i: usize, j: usize, v: f64) {
        if let Some(h) = self.hess.as_mut() {
            h.accumulate(i, j, v);
        }
    }

    /// `∂f/∂θ_j` (mode pass only).
    pub fn add_grad_theta(&mut self, j: usize, v: f64) {
        if self.pass == Pass::Mode {
            self.grad_theta[j] += v;
        }
    }

    /// `∂²f/∂u_i∂θ_j` (mode pass only).
    pub fn add_h_utheta(&mut self, i: usize, j: usize, v: f64) {
        if self.pass == Pass::Mode {
            self.h_utheta[(i, j)] += v;
        }
    }

    /// `½ tr(P ∂H/∂θ_j)` contributions (mode pass only).
    pub fn add_g_theta(&mut self, j: usize, v: f64) {
        if self.pass == Pass::Mode {
            self.g_theta[j] += v;
        }
    }

    /// Entry of `H⁻¹` on the Hessian pattern (mode pass only).
    pub fn p(&self, i: usize, j: usize) -> f64 {
        self.p.expect("mode pass has the selected inverse").get(i, j)
    }
}

/// A negative log joint density over inner and outer variables.
pub trait LatentObjective: Sync {
    fn n_inner(&self) -> usize;
    fn n_outer(&self) -> usize;
    /// Sparsity pattern of the inner Hessian.
    fn structure(&self) -> ArrowStructure;
    /// Add every term that involves inner variables.
    fn accumulate(&self, acc: &mut Accumulator<'_>) -> Result<()>;
    /// Terms of `θ` alone, added after the Laplace step: value and gradient.
    fn outer_terms(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        (0.0, vec![0.0; theta.len()])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InnerOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        InnerOptions { tol: 1e-8, max_iter: 100 }
    }
}

#[derive(Debug, Clone)]
pub struct InnerSolution {
    pub u: Vec<f64>,
    /// `f(u*, θ)`.
    pub value: f64,
    pub gradient_norm: f64,
    pub hessian: ArrowMatrix,
    pub chol: ArrowCholesky,
    pub iterations: usize,
}

fn check_finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFiniteDensity(format!("{what} evaluated to {v}")))
    }
}

/// `f(u, θ)`.
pub fn objective_value<O: LatentObjective + ?Sized>(obj: &O, u: &[f64], theta: &[f64]) -> Result<f64> {
    let mut acc = Accumulator::new(Pass::Value, u, theta, obj.structure(), None);
    obj.accumulate(&mut acc)?;
    Ok(acc.value)
}

/// Value, inner gradient and inner Hessian.
pub fn inner_derivatives<O: LatentObjective + ?Sized>(
    obj: &O,
    u: &[f64],
    theta: &[f64],
) -> Result<(f64, Vec<f64>, ArrowMatrix)> {
    let mut acc = Accumulator::new(Pass::Inner, u, theta, obj.structure(), None);
    obj.accumulate(&mut acc)?;
    Ok((acc.value, acc.grad_u, acc.hess.expect("inner pass has a Hessian")))
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Newton iterations on `u ↦ f(u, θ)` from `start`.
///
/// One extra step is taken once the tolerance is met, so the mode is as
/// accurate as rounding allows; the returned Hessian belongs to the returned `u`.
pub fn inner_mode<O: LatentObjective + ?Sized>(
    obj: &O,
    theta: &[f64],
    start: &[f64],
    opts: InnerOptions,
) -> Result<InnerSolution> {
    let n = obj.n_inner();
    if start.len() != n {
        return Err(Error::LayoutMismatch { expected: n, got: start.len() });
    }
    let mut u = start.to_vec();
    let mut polished = false;
    let mut it = 0;
    loop {
        let (f, g, h) = inner_derivatives(obj, &u, theta)?;
        check_finite(f, "inner objective")?;
        let gn = inf_norm(&g);
        if !gn.is_finite() {
            return Err(Error::NonFiniteDensity("inner gradient".into()));
        }
        let plain = h.cholesky();
        let shifted = plain.is_err();
        let chol = match plain {
            Ok(c) => c,
            Err(_) => levenberg(&h)?,
        };
        let step: Vec<f64> = chol.solve(&g).iter().map(|x| -x).collect();
        let slope: f64 = step.iter().zip(&g).map(|(a, b)| a * b).sum();
        let scale = f.abs().max(1.0);
        // A Newton decrement near rounding level means a stiff problem has
        // reached its gradient floor even if that floor sits above `tol`.
        let at_floor = !shifted && -slope <= 1e-14 * scale;
        let small = gn <= opts.tol || at_floor;
        let done = small && (polished || gn <= opts.tol * 1e-4 || (!shifted && -slope <= 1e-20 * scale));
        if done || (it >= opts.max_iter && small) {
            if shifted {
                return Err(Error::IndefiniteHessian("inner Hessian not positive definite at the mode".into()));
            }
            return Ok(InnerSolution { u, value: f, gradient_norm: gn, hessian: h, chol, iterations: it });
        }
        if it >= opts.max_iter {
            return Err(Error::InnerDivergence(format!(
                "gradient norm {gn:.3e} (Newton decrement {:.3e}) after {it} Newton iterations",
                -slope
            )));
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + t * b).collect();
            if let Ok(ft) = objective_value(obj, &trial, theta) {
                if ft.is_finite() && ft <= f + 1e-4 * t * slope + 1e-12 * f.abs().max(1.0) {
                    accepted = Some(trial);
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some(next) => u = next,
            None if small && !shifted => {
                return Ok(InnerSolution { u, value: f, gradient_norm: gn, hessian: h, chol, iterations: it });
            }
            None => {
                return Err(Error::InnerDivergence(format!(
                    "line search failed at gradient norm {gn:.3e}"
                )))
            }
        }
        if small {
            polished = true;
        }
        it += 1;
    }
}

/// Factorize `h + τI` for the smallest τ on a ×10 ladder that works.
fn levenberg(h: &ArrowMatrix) -> Result<ArrowCholesky> {
    let n = h.structure.dim();
    let scale = (0..n).map(|i| h.get(i, i).abs()).fold(0.0f64, f64::max).max(1.0);
    let mut tau = 1e-8 * scale;
    for _ in 0..20 {
        let mut shifted = h.clone();
        shifted.add_diagonal(tau);
        if let Ok(c) = shifted.cholesky() {
            return Ok(c);
        }
        tau *= 10.0;
    }
    Err(Error::IndefiniteHessian("no diagonal shift made the inner Hessian positive definite".into()))
}

/// Negative log marginal (Laplace) and the inner solution it was computed at.
pub fn laplace_marginal<O: LatentObjective + ?Sized>(
    obj: &O,
    theta: &[f64],
    start: &[f64],
    opts: InnerOptions,
) -> Result<(f64, InnerSolution)> {
    let sol = inner_mode(obj, theta, start, opts)?;
    let n = obj.n_inner() as f64;
    let v = sol.value + 0.5 * sol.chol.log_det() - 0.5 * n * LOG_2PI;
    Ok((check_finite(v, "Laplace marginal")?, sol))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    /// Laplace value plus outer terms: the quantity minimized over `θ`.
    pub total: f64,
    pub laplace: f64,
    pub gradient: Option<Vec<f64>>,
    /// `∂²f/∂u∂θ` at the mode, kept when the gradient was requested.
    pub h_utheta: Option<DMatrix<f64>>,
    pub inner: InnerSolution,
}

/// Objective over `θ`, optionally with its exact gradient.
pub fn evaluate<O: LatentObjective + ?Sized>(
    obj: &O,
    theta: &[f64],
    start: &[f64],
    opts: InnerOptions,
    with_gradient: bool,
) -> Result<Evaluation> {
    if theta.len() != obj.n_outer() {
        return Err(Error::LayoutMismatch { expected: obj.n_outer(), got: theta.len() });
    }
    let (laplace, inner) = laplace_marginal(obj, theta, start, opts)?;
    let (prior, prior_grad) = obj.outer_terms(theta);
    let total = check_finite(laplace + prior, "outer objective")?;
    if !with_gradient {
        return Ok(Evaluation { total, laplace, gradient: None, h_utheta: None, inner });
    }
    let p = inner.chol.selected_inverse();
    let mut acc = Accumulator::new(Pass::Mode, &inner.u, theta, obj.structure(), Some(&p));
    obj.accumulate(&mut acc)?;
    let v = inner.chol.solve(&acc.g_u);
    let m = theta.len();
    let mut grad = vec![0.0; m];
    for j in 0..m {
        let mut cross = 0.0;
        for (i, vi) in v.iter().enumerate() {
            cross += acc.h_utheta[(i, j)] * vi;
        }
        grad[j] = acc.grad_theta[j] + acc.g_theta[j] - cross + prior_grad[j];
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteDensity("outer gradient".into()));
    }
    let h_utheta = acc.h_utheta;
    Ok(Evaluation { total, laplace, gradient: Some(grad), h_utheta: Some(h_utheta), inner })
}

/// Objective given by one closure over all inner then outer variables, with a
/// dense inner Hessian. Meant for small problems.
pub struct DenseJetObjective<F> {
    pub n_inner: usize,
    pub n_outer: usize,
    pub f: F,
}

impl<F> LatentObjective for DenseJetObjective<F>
where
    F: Fn(&[Jet], &[Jet]) -> Jet + Sync,
{
    fn n_inner(&self) -> usize {
        self.n_inner
    }

    fn n_outer(&self) -> usize {
        self.n_outer
    }

    fn structure(&self) -> ArrowStructure {
        ArrowStructure::dense(self.n_inner)
    }

    fn accumulate(&self, acc: &mut Accumulator<'_>) -> Result<()> {
        let coords: Vec<Coord> = (0..self.n_inner)
            .map(Coord::inner)
            .chain((0..self.n_outer).map(Coord::outer))
            .collect();
        let x = acc.locals(&coords);
        let jet = (self.f)(&x[..self.n_inner], &x[self.n_inner..]);
        acc.add_term(&coords, &jet);
        Ok(())
    }
}
