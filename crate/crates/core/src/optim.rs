//! BFGS with a strong-Wolfe line search.
//!
//! The objective may fail at a trial point; failures count as `+∞` and make
//! the line search shrink the step.

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once `‖g‖∞ ≤ gtol · max(1, |f|)`.
    pub gtol: f64,
    /// Largest ∞-norm of the first trial step.
    pub max_first_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions { max_iter: 1000, gtol: 1e-8, max_first_step: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BfgsStatus {
    GradientTolerance,
    MaxIterations,
    /// No step satisfying the Wolfe conditions could be found.
    LineSearchFailed,
    /// The starting point could not be evaluated.
    StartFailed,
}

#[derive(Debug, Clone)]
pub struct BfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub g: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub status: BfgsStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

struct Point {
    t: f64,
    f: f64,
    d: f64,
    g: Vec<f64>,
    x: Vec<f64>,
}

/// Minimize `f`, which returns the value and gradient or `None` when it
/// cannot be evaluated.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: BfgsOptions) -> BfgsResult
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    let n = x0.len();
    let mut evaluations = 1;
    let Some((mut fx, mut gx)) = f(x0).filter(|(v, g)| v.is_finite() && g.iter().all(|x| x.is_finite())) else {
        return BfgsResult {
            x: x0.to_vec(),
            f: f64::INFINITY,
            g: vec![f64::NAN; n],
            iterations: 0,
            evaluations,
            status: BfgsStatus::StartFailed,
        };
    };
    let mut x = x0.to_vec();
    // Inverse Hessian approximation, row-major.
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    let mut first = true;
    let mut status = BfgsStatus::MaxIterations;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        if inf_norm(&gx) <= opts.gtol * fx.abs().max(1.0) {
            status = BfgsStatus::GradientTolerance;
            break;
        }
        let mut p: Vec<f64> = (0..n).map(|i| -dot(&h[i * n..(i + 1) * n], &gx)).collect();
        let mut slope = dot(&p, &gx);
        if !(slope < 0.0) {
            // Lost descent: restart from steepest descent.
            reset(&mut h, n);
            first = true;
            p = gx.iter().map(|g| -g).collect();
            slope = dot(&p, &gx);
        }
        let t0 = if first { (opts.max_first_step / inf_norm(&p)).min(1.0) } else { 1.0 };
        let found = line_search(&mut f, &x, fx, &gx, &p, slope, t0, &mut evaluations);
        let Some(next) = found else {
            if !first {
                // Retry once along steepest descent with a fresh metric.
                reset(&mut h, n);
                first = true;
                continue;
            }
            status = BfgsStatus::LineSearchFailed;
            break;
        };
        let s: Vec<f64> = next.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = next.g.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                let scale = sy / dot(&y, &y);
                for v in h.iter_mut() {
                    *v *= scale;
                }
            }
            bfgs_update(&mut h, &s, &y, sy);
            first = false;
        }
        x = next.x;
        fx = next.f;
        gx = next.g;
        iterations += 1;
    }
    BfgsResult { x, f: fx, g: gx, iterations, evaluations, status }
}

fn reset(h: &mut [f64], n: usize) {
    h.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
}

/// `H ← (I - ρ s yᵀ) H (I - ρ y sᵀ) + ρ s sᵀ`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i * n..(i + 1) * n], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn line_search<F>(
    f: &mut F,
    x: &[f64],
    f0: f64,
    g0: &[f64],
    p: &[f64],
    d0: f64,
    t0: f64,
    evaluations: &mut usize,
) -> Option<Point>
where
    F: FnMut(&[f64]) -> Option<(f64, Vec<f64>)>,
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut eval = |t: f64, evaluations: &mut usize| -> Point {
        *evaluations += 1;
        let xt: Vec<f64> = x.iter().zip(p).map(|(a, b)| a + t * b).collect();
        match f(&xt) {
            Some((v, g)) if v.is_finite() && g.iter().all(|z| z.is_finite()) => {
                let d = dot(&g, p);
                Point { t, f: v, d, g, x: xt }
            }
            _ => Point { t, f: f64::INFINITY, d: f64::NAN, g: Vec::new(), x: xt },
        }
    };
    let lo0 = Point { t: 0.0, f: f0, d: d0, g: g0.to_vec(), x: x.to_vec() };
    let mut prev = Point { t: 0.0, f: f0, d: d0, g: Vec::new(), x: Vec::new() };
    let mut t = t0;
    for i in 0..30 {
        let cur = eval(t, evaluations);
        if !cur.f.is_finite() {
            // Shrink towards the last good point.
            return zoom(&mut eval, lo0_or(prev, &lo0), cur, f0, d0, evaluations, C1, C2);
        }
        if cur.f > f0 + C1 * t * d0 || (i > 0 && cur.f >= prev.f) {
            return zoom(&mut eval, lo0_or(prev, &lo0), cur, f0, d0, evaluations, C1, C2);
        }
        if cur.d.abs() <= -C2 * d0 {
            return Some(cur);
        }
        if cur.d >= 0.0 {
            return zoom(&mut eval, cur, lo0_or(prev, &lo0), f0, d0, evaluations, C1, C2);
        }
        prev = cur;
        t *= 2.0;
    }
    None
}

/// The previous point, or the origin when none was evaluated yet.
fn lo0_or(prev: Point, origin: &Point) -> Point {
    if prev.t == 0.0 {
        Point { t: 0.0, f: origin.f, d: origin.d, g: origin.g.clone(), x: origin.x.clone() }
    } else {
        prev
    }
}

#[allow(clippy::too_many_arguments)]
fn zoom<E>(
    eval: &mut E,
    mut lo: Point,
    mut hi: Point,
    f0: f64,
    d0: f64,
    evaluations: &mut usize,
    c1: f64,
    c2: f64,
) -> Option<Point>
where
    E: FnMut(f64, &mut usize) -> Point,
{
    for _ in 0..40 {
        let t = interpolate(&lo, &hi);
        let cur = eval(t, evaluations);
        if !cur.f.is_finite() || cur.f > f0 + c1 * t * d0 || cur.f >= lo.f {
            hi = cur;
        } else {
            if cur.d.abs() <= -c2 * d0 {
                return Some(cur);
            }
            if cur.d * (hi.t - lo.t) >= 0.0 {
                hi = lo;
            }
            lo = cur;
        }
        if (hi.t - lo.t).abs() <= 1e-14 * lo.t.abs().max(1e-8) {
            break;
        }
    }
    // Accept a point with sufficient decrease even if curvature failed.
    (lo.t > 0.0 && lo.f < f0).then_some(lo)
}

/// Cubic interpolation between the bracket ends, safeguarded into the bracket.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.t, hi.t);
    let mid = 0.5 * (a + b);
    if !hi.f.is_finite() || !hi.d.is_finite() || !lo.d.is_finite() {
        // Only the low end is trustworthy: bisect towards it.
        return a + 0.3 * (b - a);
    }
    let d1 = lo.d + hi.d - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.d * hi.d;
    if disc < 0.0 {
        return mid;
    }
    let d2 = disc.sqrt().copysign(b - a);
    let t = b - (b - a) * (hi.d + d2 - d1) / (hi.d - lo.d + 2.0 * d2);
    let (l, u) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (u - l);
    if t.is_finite() && t > l + margin && t < u - margin {
        t
    } else {
        mid
    }
}
