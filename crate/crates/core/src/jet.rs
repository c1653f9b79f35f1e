//! Truncated Taylor jets over a handful of local variables.
//!
//! A [`Jet`] carries a value and, depending on its order, the gradient,
//! Hessian and third-derivative tensor with respect to `n` local variables.
//! Density terms are written once against this type; order 0 gives plain
//! values, order 2 the exact Hessian, order 3 what the Laplace gradient needs.

use std::ops::{Add, Mul, Neg, Sub};

#[derive(Debug, Clone, PartialEq)]
pub struct Jet {
    pub v: f64,
    n: usize,
    order: u8,
    g: Vec<f64>,
    h: Vec<f64>,
    t: Vec<f64>,
}

impl Jet {
    pub fn constant(v: f64, n: usize, order: u8) -> Self {
        Jet {
            v,
            n,
            order,
            g: if order >= 1 { vec![0.0; n] } else { Vec::new() },
            h: if order >= 2 { vec![0.0; n * n] } else { Vec::new() },
            t: if order >= 3 { vec![0.0; n * n * n] } else { Vec::new() },
        }
    }

    /// The local variable `i` evaluated at `v`.
    pub fn variable(v: f64, i: usize, n: usize, order: u8) -> Self {
        let mut j = Jet::constant(v, n, order);
        if order >= 1 {
            j.g[i] = 1.0;
        }
        j
    }

    /// Jets for all `values.len()` local variables.
    pub fn variables(values: &[f64], order: u8) -> Vec<Jet> {
        let n = values.len();
        values.iter().enumerate().map(|(i, &v)| Jet::variable(v, i, n, order)).collect()
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn order(&self) -> u8 {
        self.order
    }

    pub fn grad(&self) -> &[f64] {
        &self.g
    }

    pub fn hess(&self, i: usize, j: usize) -> f64 {
        self.h[i * self.n + j]
    }

    pub fn third(&self, i: usize, j: usize, k: usize) -> f64 {
        self.t[(i * self.n + j) * self.n + k]
    }

    fn like(&self, v: f64) -> Jet {
        Jet::constant(v, self.n, self.order)
    }

    /// Chain rule for a scalar function with derivatives `d1, d2, d3` at `self.v`.
    pub fn map(&self, f0: f64, d1: f64, d2: f64, d3: f64) -> Jet {
        let n = self.n;
        let mut out = self.like(f0);
        if self.order >= 1 {
            for i in 0..n {
                out.g[i] = d1 * self.g[i];
            }
        }
        if self.order >= 2 {
            for i in 0..n {
                for j in 0..n {
                    out.h[i * n + j] = d1 * self.h[i * n + j] + d2 * self.g[i] * self.g[j];
                }
            }
        }
        if self.order >= 3 {
            let (g, h) = (&self.g, &self.h);
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let idx = (i * n + j) * n + k;
                        out.t[idx] = d1 * self.t[idx]
                            + d2 * (g[i] * h[j * n + k] + g[j] * h[i * n + k] + g[k] * h[i * n + j])
                            + d3 * g[i] * g[j] * g[k];
                    }
                }
            }
        }
        out
    }

    pub fn exp(&self) -> Jet {
        let e = self.v.exp();
        self.map(e, e, e, e)
    }

    pub fn ln(&self) -> Jet {
        let x = self.v;
        self.map(x.ln(), 1.0 / x, -1.0 / (x * x), 2.0 / (x * x * x))
    }

    pub fn square(&self) -> Jet {
        self * self
    }

    pub fn recip(&self) -> Jet {
        let x = self.v;
        let r = 1.0 / x;
        self.map(r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r)
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&self) -> Jet {
        let x = self.v;
        let f0 = if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let s = 1.0 / (1.0 + (-x).exp());
        let d2 = s * (1.0 - s);
        self.map(f0, s, d2, d2 * (1.0 - 2.0 * s))
    }

    /// `ln(1 - e^{-x})` for `x > 0`.
    pub fn log1m_exp_neg(&self) -> Jet {
        let x = self.v;
        let em1 = x.exp_m1();
        let f0 = (-(-x).exp_m1()).ln();
        let d1 = 1.0 / em1;
        let ex = em1 + 1.0;
        let d2 = -ex / (em1 * em1);
        let d3 = ex * (ex + 1.0) / (em1 * em1 * em1);
        self.map(f0, d1, d2, d3)
    }

    /// `log(e^a + e^b)` evaluated stably.
    pub fn log_sum_exp(a: &Jet, b: &Jet) -> Jet {
        if a.v >= b.v {
            a + &(b - a).softplus()
        } else {
            b + &(a - b).softplus()
        }
    }

    pub fn scale(&self, c: f64) -> Jet {
        Jet {
            v: self.v * c,
            n: self.n,
            order: self.order,
            g: self.g.iter().map(|x| x * c).collect(),
            h: self.h.iter().map(|x| x * c).collect(),
            t: self.t.iter().map(|x| x * c).collect(),
        }
    }

    pub fn add_const(&self, c: f64) -> Jet {
        let mut out = self.clone();
        out.v += c;
        out
    }

    fn zip(&self, other: &Jet, f: impl Fn(f64, f64) -> f64) -> Jet {
        debug_assert_eq!(self.n, other.n);
        debug_assert_eq!(self.order, other.order);
        Jet {
            v: f(self.v, other.v),
            n: self.n,
            order: self.order,
            g: self.g.iter().zip(&other.g).map(|(a, b)| f(*a, *b)).collect(),
            h: self.h.iter().zip(&other.h).map(|(a, b)| f(*a, *b)).collect(),
            t: self.t.iter().zip(&other.t).map(|(a, b)| f(*a, *b)).collect(),
        }
    }

    fn product(&self, y: &Jet) -> Jet {
        let x = self;
        let n = x.n;
        let mut out = x.like(x.v * y.v);
        if x.order >= 1 {
            for i in 0..n {
                out.g[i] = x.v * y.g[i] + y.v * x.g[i];
            }
        }
        if x.order >= 2 {
            for i in 0..n {
                for j in 0..n {
                    let ij = i * n + j;
                    out.h[ij] = x.v * y.h[ij] + y.v * x.h[ij] + x.g[i] * y.g[j] + x.g[j] * y.g[i];
                }
            }
        }
        if x.order >= 3 {
            for i in 0..n {
                for j in 0..n {
                    for k in 0..n {
                        let idx = (i * n + j) * n + k;
                        out.t[idx] = x.v * y.t[idx]
                            + y.v * x.t[idx]
                            + x.g[i] * y.h[j * n + k]
                            + x.g[j] * y.h[i * n + k]
                            + x.g[k] * y.h[i * n + j]
                            + y.g[i] * x.h[j * n + k]
                            + y.g[j] * x.h[i * n + k]
                            + y.g[k] * x.h[i * n + j];
                    }
                }
            }
        }
        out
    }
}

impl Add<&Jet> for &Jet {
    type Output = Jet;
    fn add(self, rhs: &Jet) -> Jet {
        self.zip(rhs, |a, b| a + b)
    }
}

impl Sub<&Jet> for &Jet {
    type Output = Jet;
    fn sub(self, rhs: &Jet) -> Jet {
        self.zip(rhs, |a, b| a - b)
    }
}

impl Mul<&Jet> for &Jet {
    type Output = Jet;
    fn mul(self, rhs: &Jet) -> Jet {
        self.product(rhs)
    }
}

impl Neg for &Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Add<Jet> for Jet {
    type Output = Jet;
    fn add(self, rhs: Jet) -> Jet {
        &self + &rhs
    }
}

impl Sub<Jet> for Jet {
    type Output = Jet;
    fn sub(self, rhs: Jet) -> Jet {
        &self - &rhs
    }
}

impl Mul<Jet> for Jet {
    type Output = Jet;
    fn mul(self, rhs: Jet) -> Jet {
        &self * &rhs
    }
}
