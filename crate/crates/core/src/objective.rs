//! The assessment model as a [`LatentObjective`].
//!
//! Inner variables, year-major: for each year the `A` log abundances then the
//! `K` log F states, followed by every catchability coefficient. Outer
//! variables: process log-sds, the transformed F correlation, the variance
//! coefficients and the estimated log-penalties.

use nalgebra::DMatrix;

use crate::config::{Family, ModelConfig, RhoSpec};
use crate::data::{FleetKind, StockData};
use crate::error::{Error, Result};
use crate::jet::Jet;
use crate::laplace::{Accumulator, Coord, LatentObjective, Pass};
use crate::model::{exchangeable_lower_bound, LatentStates, ObsParams, ProcessParams, FIRST_YEAR_SD, HALF_LOG_2PI};
use crate::params::{BlockId, ParamMap, PenaltyGroup};
use crate::sparse::ArrowStructure;

const LOG_2PI: f64 = 2.0 * HALF_LOG_2PI;

fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Log density of the cap on a log-penalty, `Σ log logistic(δ (K - ρ_i))`.
pub fn log_prior_rho(rho: &[f64], k: f64, delta: f64) -> f64 {
    -rho.iter().map(|r| softplus(delta * (r - k))).sum::<f64>()
}

/// Log density of coefficients under the improper Gaussian prior with
/// precision `Σ λ_i S̃_i`, given the penalties and a log weight per penalty.
pub fn log_prior_beta(beta: &[f64], penalties: &[DMatrix<f64>], log_lambda: &[f64]) -> Result<f64> {
    let n = beta.len();
    let mut total = DMatrix::zeros(n, n);
    for (s, r) in penalties.iter().zip(log_lambda) {
        if s.nrows() != n {
            return Err(Error::LengthMismatch { expected: n, got: s.nrows() });
        }
        total += s * r.exp();
    }
    let lambda: Vec<f64> = log_lambda.iter().map(|r| r.exp()).collect();
    let (logdet, rank) = crate::spline::generalized_logdet(penalties, &lambda)?;
    let b = nalgebra::DVector::from_column_slice(beta);
    let quad = (b.transpose() * &total * &b)[(0, 0)];
    Ok(0.5 * logdet - 0.5 * quad - 0.5 * rank as f64 * LOG_2PI)
}

/// `½ ((x - μ) / e^s)² + s + ½ log 2π`.
fn gauss(x: &Jet, mean: &Jet, log_sd: &Jet) -> Jet {
    let r = x - mean;
    (&r.square() * &log_sd.scale(-2.0).exp()).scale(0.5) + log_sd.add_const(HALF_LOG_2PI)
}

/// Position of everything inside the inner vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InnerLayout {
    pub n_years: usize,
    pub n_ages: usize,
    pub n_states: usize,
    pub n_q: usize,
}

impl InnerLayout {
    pub fn block(&self) -> usize {
        self.n_ages + self.n_states
    }

    pub fn n_band(&self) -> usize {
        self.n_years * self.block()
    }

    pub fn len(&self) -> usize {
        self.n_band() + self.n_q
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn log_n(&self, y: usize, a: usize) -> usize {
        y * self.block() + a
    }

    pub fn log_f(&self, y: usize, s: usize) -> usize {
        y * self.block() + self.n_ages + s
    }

    pub fn q(&self, c: usize) -> usize {
        self.n_band() + c
    }

    pub fn structure(&self) -> ArrowStructure {
        let n = self.n_band();
        ArrowStructure { n_band: n, half_bw: (2 * self.block() - 1).min(n.saturating_sub(1)), n_border: self.n_q }
    }
}

/// Position of everything inside the outer vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OuterLayout {
    pub log_sd_r: usize,
    pub log_sd_n: usize,
    pub log_sd_f: usize,
    pub n_f_groups: usize,
    pub rho_f: Option<usize>,
    pub variance: usize,
    pub n_variance: usize,
    pub rho_variance: Option<usize>,
    pub rho_catchability: Option<usize>,
    pub len: usize,
}

impl OuterLayout {
    pub fn names(&self) -> Vec<String> {
        let mut v = vec!["log_sd_r".to_string(), "log_sd_n".to_string()];
        v.extend((0..self.n_f_groups).map(|g| format!("log_sd_f[{g}]")));
        if self.rho_f.is_some() {
            v.push("rho_f_transformed".into());
        }
        v.extend((0..self.n_variance).map(|c| format!("variance_coef[{c}]")));
        if self.rho_variance.is_some() {
            v.push("log_lambda_variance".into());
        }
        if self.rho_catchability.is_some() {
            v.push("log_lambda_catchability".into());
        }
        v
    }
}

#[derive(Debug, Clone)]
struct Penalty {
    /// Block-diagonal `S̃` over the family's coefficient space.
    s: DMatrix<f64>,
    rank: usize,
    logdet_unit: f64,
    /// Outer index of the log-penalty, or its fixed value.
    rho: RhoSlot,
}

#[derive(Debug, Clone, Copy)]
enum RhoSlot {
    Estimated(usize),
    Fixed(f64),
}

impl Penalty {
    fn build(map: &ParamMap, group: PenaltyGroup, n: usize, rho: RhoSlot) -> Option<Self> {
        if !map.has_penalty(group) {
            return None;
        }
        let mut s = DMatrix::zeros(n, n);
        for b in map.penalized_blocks(group) {
            let t = b.spline.as_ref().expect("penalized block has a basis").total_penalty();
            s.view_mut((b.offset, b.offset), (b.len, b.len)).copy_from(&t);
        }
        let (rank, logdet_unit) = map.penalty_logdet(group);
        Some(Penalty { s, rank, logdet_unit, rho })
    }

    fn log_lambda(&self, theta: &[f64]) -> f64 {
        match self.rho {
            RhoSlot::Estimated(j) => theta[j],
            RhoSlot::Fixed(r) => r,
        }
    }

    /// `-log π_λ(β)`, and `S̃β`.
    fn nll(&self, beta: &[f64], rho: f64) -> (f64, Vec<f64>, f64) {
        let sb: Vec<f64> = (0..beta.len())
            .map(|i| (0..beta.len()).map(|j| self.s[(i, j)] * beta[j]).sum())
            .collect();
        let quad: f64 = sb.iter().zip(beta).map(|(a, b)| a * b).sum();
        let lam = rho.exp();
        let v = 0.5 * lam * quad - 0.5 * (self.rank as f64 * rho + self.logdet_unit) + 0.5 * self.rank as f64 * LOG_2PI;
        (v, sb, quad)
    }
}

#[derive(Debug, Clone)]
enum TermKind {
    FirstYear,
    Recruitment,
    Survival { m: f64 },
    PlusGroup { m_below: f64, m_plus: f64 },
    Catch { log_obs: f64, m: f64 },
    Survey { log_obs: f64, m: f64, timing: f64 },
}

#[derive(Debug, Clone)]
struct Term {
    kind: TermKind,
    coords: Vec<Coord>,
}

impl Term {
    fn eval(&self, x: &[Jet]) -> Jet {
        let c = |v: f64| Jet::constant(v, x[0].dim(), x[0].order());
        match self.kind {
            TermKind::FirstYear => gauss(&x[0], &c(0.0), &c(FIRST_YEAR_SD.ln())),
            TermKind::Recruitment => gauss(&x[0], &x[1], &x[2]),
            TermKind::Survival { m } => {
                let mean = &x[1] - &x[2].exp().add_const(m);
                gauss(&x[0], &mean, &x[3])
            }
            TermKind::PlusGroup { m_below, m_plus } => {
                let a = &x[1] - &x[3].exp().add_const(m_below);
                let b = &x[2] - &x[4].exp().add_const(m_plus);
                gauss(&x[0], &Jet::log_sum_exp(&a, &b), &x[5])
            }
            TermKind::Catch { log_obs, m } => {
                // log F - log Z + log(1 - e^{-Z}) + log N
                let z = x[1].exp().add_const(m);
                let mean = &(&x[1] - &z.ln()) + &(&z.log1m_exp_neg() + &x[0]);
                gauss(&c(log_obs), &mean, &x[2])
            }
            TermKind::Survey { log_obs, m, timing } => {
                let mean = &(&x[2] + &x[0]) - &x[1].exp().add_const(m).scale(timing);
                gauss(&c(log_obs), &mean, &x[3])
            }
        }
    }
}

/// The assessment model for one dataset and configuration.
#[derive(Debug, Clone)]
pub struct SamObjective {
    pub data: StockData,
    pub config: ModelConfig,
    pub map: ParamMap,
    pub inner: InnerLayout,
    pub outer: OuterLayout,
    pub state_of_age: Vec<usize>,
    pub group_of_state: Vec<usize>,
    rho_f_lower: f64,
    rho_f_fixed: Option<f64>,
    terms: Vec<Term>,
    q_penalty: Option<Penalty>,
    var_penalty: Option<Penalty>,
}

impl SamObjective {
    pub fn new(data: &StockData, config: &ModelConfig) -> Result<Self> {
        if data.n_years < 2 {
            return Err(Error::DataTooSmall(format!("{} year(s) of data; at least 2 needed", data.n_years)));
        }
        let map = ParamMap::build(data, config)?;
        let a = data.n_ages();
        let state_of_age = config.f_state_of_age(a);
        let group_of_state = config.f_sd_group_of_state(a);
        let k = group_of_state.len();
        let n_f_groups = group_of_state.iter().max().map_or(0, |g| g + 1);
        let rho_f_lower = exchangeable_lower_bound(k);
        let (rho_f_est, rho_f_fixed) = match config.process.rho_f {
            _ if k == 1 => (false, Some(0.0)),
            RhoSpec::Estimate(_) => (true, None),
            RhoSpec::Fixed(r) => {
                if r <= rho_f_lower {
                    return Err(Error::ConfigInvalid(format!(
                        "rho_f {r} must exceed {rho_f_lower} with {k} F states"
                    )));
                }
                (false, Some(r))
            }
        };

        let mut len = 0;
        let mut take = |n: usize| {
            let at = len;
            len += n;
            at
        };
        let log_sd_r = take(1);
        let log_sd_n = take(1);
        let log_sd_f = take(n_f_groups);
        let rho_f = rho_f_est.then(|| take(1));
        let variance = take(map.n_variance);
        let rho_variance = (map.has_penalty(PenaltyGroup::Variance) && config.fixed_log_lambda.variance.is_none())
            .then(|| take(1));
        let rho_catchability = (map.has_penalty(PenaltyGroup::Catchability)
            && config.fixed_log_lambda.catchability.is_none())
        .then(|| take(1));
        let outer = OuterLayout {
            log_sd_r,
            log_sd_n,
            log_sd_f,
            n_f_groups,
            rho_f,
            variance,
            n_variance: map.n_variance,
            rho_variance,
            rho_catchability,
            len,
        };
        let slot = |est: Option<usize>, fixed: Option<f64>| match est {
            Some(j) => RhoSlot::Estimated(j),
            None => RhoSlot::Fixed(fixed.unwrap_or(0.0)),
        };
        let q_penalty = Penalty::build(
            &map,
            PenaltyGroup::Catchability,
            map.n_catchability,
            slot(rho_catchability, config.fixed_log_lambda.catchability),
        );
        let var_penalty = Penalty::build(
            &map,
            PenaltyGroup::Variance,
            map.n_variance,
            slot(rho_variance, config.fixed_log_lambda.variance),
        );
        let inner = InnerLayout { n_years: data.n_years, n_ages: a, n_states: k, n_q: map.n_catchability };

        let mut obj = SamObjective {
            data: data.clone(),
            config: config.clone(),
            map,
            inner,
            outer,
            state_of_age,
            group_of_state,
            rho_f_lower,
            rho_f_fixed,
            terms: Vec::new(),
            q_penalty,
            var_penalty,
        };
        obj.terms = obj.build_terms()?;
        Ok(obj)
    }

    fn build_terms(&self) -> Result<Vec<Term>> {
        let l = self.inner;
        let o = &self.outer;
        let a_n = l.n_ages;
        let nat = |y: usize, a: usize| self.data.aux.natural_mortality.get(self.data.first_year + y as i32, a);
        let mut terms = Vec::new();
        for a in 0..a_n {
            terms.push(Term { kind: TermKind::FirstYear, coords: vec![Coord::inner(l.log_n(0, a))] });
        }
        for s in 0..l.n_states {
            terms.push(Term { kind: TermKind::FirstYear, coords: vec![Coord::inner(l.log_f(0, s))] });
        }
        for y in 1..l.n_years {
            terms.push(Term {
                kind: TermKind::Recruitment,
                coords: vec![Coord::inner(l.log_n(y, 0)), Coord::inner(l.log_n(y - 1, 0)), Coord::outer(o.log_sd_r)],
            });
            for a in 1..a_n.saturating_sub(1) {
                terms.push(Term {
                    kind: TermKind::Survival { m: nat(y - 1, a - 1) },
                    coords: vec![
                        Coord::inner(l.log_n(y, a)),
                        Coord::inner(l.log_n(y - 1, a - 1)),
                        Coord::inner(l.log_f(y - 1, self.state_of_age[a - 1])),
                        Coord::outer(o.log_sd_n),
                    ],
                });
            }
            if a_n >= 2 {
                let p = a_n - 1;
                terms.push(Term {
                    kind: TermKind::PlusGroup { m_below: nat(y - 1, p - 1), m_plus: nat(y - 1, p) },
                    coords: vec![
                        Coord::inner(l.log_n(y, p)),
                        Coord::inner(l.log_n(y - 1, p - 1)),
                        Coord::inner(l.log_n(y - 1, p)),
                        Coord::inner(l.log_f(y - 1, self.state_of_age[p - 1])),
                        Coord::inner(l.log_f(y - 1, self.state_of_age[p])),
                        Coord::outer(o.log_sd_n),
                    ],
                });
            }
        }
        for r in self.data.obs.iter().filter(|r| !r.missing) {
            let fleet = self.data.fleet(r.fleet).expect("record fleet exists");
            let y = self.data.year_index(r.year).expect("record year in range");
            let a = self.data.ages.index(r.age).expect("record age in range");
            let n = Coord::inner(l.log_n(y, a));
            let f = Coord::inner(l.log_f(y, self.state_of_age[a]));
            let sd_family = match fleet.kind {
                FleetKind::Catch => Family::CatchSd,
                FleetKind::Survey => Family::SurveySd,
            };
            let sd_block = self.block(sd_family, r.fleet)?;
            let local = a - sd_block.age_offset;
            let sd = Coord::outer_combo(sd_block.row(local).into_iter().map(|(c, w)| (o.variance + c, w)).collect());
            let log_obs = r.value.ln();
            let m = nat(y, a);
            match fleet.kind {
                FleetKind::Catch => terms.push(Term { kind: TermKind::Catch { log_obs, m }, coords: vec![n, f, sd] }),
                FleetKind::Survey => {
                    let q_block = self.block(Family::Catchability, r.fleet)?;
                    let q = Coord::inner_combo(
                        q_block.row(local).into_iter().map(|(c, w)| (l.q(c), w)).collect(),
                    );
                    terms.push(Term {
                        kind: TermKind::Survey { log_obs, m, timing: fleet.timing },
                        coords: vec![n, f, q, sd],
                    });
                }
            }
        }
        Ok(terms)
    }

    fn block(&self, family: Family, fleet: usize) -> Result<&crate::params::Block> {
        self.map
            .block(BlockId { family, fleet })
            .ok_or_else(|| Error::ConfigInvalid(format!("no {family} block for fleet {fleet}")))
    }

    /// Correlation of F increments and its derivative with respect to the outer entry.
    pub fn rho_f(&self, theta: &[f64]) -> (f64, f64) {
        match (self.outer.rho_f, self.rho_f_fixed) {
            (Some(j), _) => {
                let s = logistic(theta[j]);
                let lo = self.rho_f_lower;
                (lo + (1.0 - lo) * s, (1.0 - lo) * s * (1.0 - s))
            }
            (None, fixed) => (fixed.unwrap_or(0.0), 0.0),
        }
    }

    /// Outer entry giving correlation `rho`.
    pub fn rho_f_to_outer(&self, rho: f64) -> f64 {
        let lo = self.rho_f_lower;
        let p = ((rho - lo) / (1.0 - lo)).clamp(1e-12, 1.0 - 1e-12);
        (p / (1.0 - p)).ln()
    }

    /// Starting point from the configured initial values.
    pub fn initial_outer(&self) -> Vec<f64> {
        let init = &self.config.init;
        let o = &self.outer;
        let mut t = vec![0.0; o.len];
        t[o.log_sd_r] = init.log_sd_r;
        t[o.log_sd_n] = init.log_sd_n;
        for g in 0..o.n_f_groups {
            t[o.log_sd_f + g] = init.log_sd_f;
        }
        if let Some(j) = o.rho_f {
            let r0 = match self.config.process.rho_f {
                RhoSpec::Estimate(r) | RhoSpec::Fixed(r) => r,
            };
            t[j] = self.rho_f_to_outer(r0);
        }
        for c in 0..o.n_variance {
            t[o.variance + c] = init.log_sd;
        }
        for j in [o.rho_variance, o.rho_catchability].into_iter().flatten() {
            t[j] = init.log_lambda;
        }
        t
    }

    /// Naive cohort start: catch over the Baranov fraction at F = 0.2.
    pub fn initial_inner(&self) -> Vec<f64> {
        let l = self.inner;
        let f0: f64 = 0.2;
        let mut u = vec![0.0; l.len()];
        let a_n = l.n_ages;
        let mut sums = vec![(0.0, 0usize); a_n];
        let mut cell = vec![vec![None; a_n]; l.n_years];
        for r in self.data.obs.iter().filter(|r| !r.missing && r.fleet == 0) {
            let y = self.data.year_index(r.year).expect("year in range");
            let a = self.data.ages.index(r.age).expect("age in range");
            let z = f0 + self.data.aux.natural_mortality.get(r.year, a);
            let v = r.value.ln() - (f0 / z * (1.0 - (-z).exp())).ln();
            cell[y][a] = Some(v);
            sums[a].0 += v;
            sums[a].1 += 1;
        }
        let all: Vec<f64> = sums.iter().filter(|s| s.1 > 0).map(|s| s.0 / s.1 as f64).collect();
        let overall = if all.is_empty() { 10.0 } else { all.iter().sum::<f64>() / all.len() as f64 };
        for y in 0..l.n_years {
            for a in 0..a_n {
                u[l.log_n(y, a)] = cell[y][a].unwrap_or(if sums[a].1 > 0 {
                    sums[a].0 / sums[a].1 as f64
                } else {
                    overall
                });
            }
            for s in 0..l.n_states {
                u[l.log_f(y, s)] = f0.ln();
            }
        }
        for c in 0..l.n_q {
            u[l.q(c)] = self.config.init.log_q;
        }
        u
    }

    /// `initial_inner` with the catchability coefficients moved to their
    /// conditional optimum at `theta`; survey terms are Gaussian in them, so
    /// one Newton step on that block is exact.
    pub fn cold_start(&self, theta: &[f64]) -> Vec<f64> {
        let mut u = self.initial_inner();
        let l = self.inner;
        if l.n_q == 0 {
            return u;
        }
        let Ok((_, g, h)) = crate::laplace::inner_derivatives(self, &u, theta) else {
            return u;
        };
        let q0 = l.q(0);
        let hq = nalgebra::DMatrix::from_fn(l.n_q, l.n_q, |i, j| h.get(q0 + i, q0 + j));
        let gq = nalgebra::DVector::from_fn(l.n_q, |i, _| g[q0 + i]);
        if let Some(c) = hq.cholesky() {
            let step = c.solve(&gq);
            if step.iter().all(|v| v.is_finite()) {
                for i in 0..l.n_q {
                    u[q0 + i] -= step[i];
                }
            }
        }
        u
    }

    pub fn states(&self, u: &[f64]) -> LatentStates {
        let l = self.inner;
        LatentStates {
            log_n: (0..l.n_years).map(|y| (0..l.n_ages).map(|a| u[l.log_n(y, a)]).collect()).collect(),
            log_f: (0..l.n_years).map(|y| (0..l.n_states).map(|s| u[l.log_f(y, s)]).collect()).collect(),
        }
    }

    pub fn process_params(&self, theta: &[f64]) -> ProcessParams {
        let o = &self.outer;
        ProcessParams {
            sd_log_r: theta[o.log_sd_r].exp(),
            sd_log_n: theta[o.log_sd_n].exp(),
            sd_log_f: (0..o.n_f_groups).map(|g| theta[o.log_sd_f + g].exp()).collect(),
            rho_f: self.rho_f(theta).0,
            f_state_of_age: self.state_of_age.clone(),
            f_sd_group_of_state: self.group_of_state.clone(),
        }
    }

    pub fn variance_coefficients<'t>(&self, theta: &'t [f64]) -> &'t [f64] {
        &theta[self.outer.variance..self.outer.variance + self.outer.n_variance]
    }

    pub fn catchability_coefficients<'u>(&self, u: &'u [f64]) -> &'u [f64] {
        &u[self.inner.n_band()..]
    }

    /// Per-fleet, per-stock-age observation parameters.
    pub fn obs_params(&self, theta: &[f64], u: &[f64]) -> Result<ObsParams> {
        let a_n = self.inner.n_ages;
        let var = self.variance_coefficients(theta);
        let q = self.catchability_coefficients(u);
        let mut log_sd = Vec::new();
        let mut log_q = Vec::new();
        for f in &self.data.fleets {
            let fill = |family: Family, coeffs: &[f64]| -> Result<Vec<f64>> {
                let b = self.block(family, f.fleet)?;
                let vals = self.map.evaluate_block(b.id, coeffs)?;
                let mut row = vec![f64::NAN; a_n];
                row[b.age_offset..b.age_offset + b.n_ages].copy_from_slice(&vals);
                Ok(row)
            };
            match f.kind {
                FleetKind::Catch => {
                    log_sd.push(fill(Family::CatchSd, var)?);
                    log_q.push(vec![f64::NAN; a_n]);
                }
                FleetKind::Survey => {
                    log_sd.push(fill(Family::SurveySd, var)?);
                    log_q.push(fill(Family::Catchability, q)?);
                }
            }
        }
        Ok(ObsParams { log_sd, log_q })
    }

    /// Estimated log-penalties (variance, catchability), fixed ones included.
    pub fn log_lambdas(&self, theta: &[f64]) -> (Option<f64>, Option<f64>) {
        (
            self.var_penalty.as_ref().map(|p| p.log_lambda(theta)),
            self.q_penalty.as_ref().map(|p| p.log_lambda(theta)),
        )
    }

    /// `-log π_λ(β_Q)` at the given inner and outer values, zero without a penalty.
    pub fn catchability_prior_nll(&self, u: &[f64], theta: &[f64]) -> f64 {
        self.q_penalty
            .as_ref()
            .map_or(0.0, |p| p.nll(self.catchability_coefficients(u), p.log_lambda(theta)).0)
    }

    fn add_f_increments(&self, acc: &mut Accumulator<'_>) {
        let l = self.inner;
        let o = &self.outer;
        let k = l.n_states;
        let theta = acc.theta;
        let (rho, drho) = self.rho_f(theta);
        let kf = k as f64;
        let a = 1.0 / (1.0 - rho);
        let dd = (1.0 - rho) * (1.0 + (kf - 1.0) * rho);
        let b = rho / dd;
        let da = a * a;
        let db = (1.0 + (kf - 1.0) * rho * rho) / (dd * dd);
        let logdet_r = (kf - 1.0) * (1.0 - rho).ln() + (1.0 + (kf - 1.0) * rho).ln();
        let dlogdet_r = -(kf - 1.0) / (1.0 - rho) + (kf - 1.0) / (1.0 + (kf - 1.0) * rho);
        let sds: Vec<f64> = self.group_of_state.iter().map(|&g| theta[o.log_sd_f + g].exp()).collect();
        let logdet_s: f64 = self.group_of_state.iter().map(|&g| theta[o.log_sd_f + g]).sum();
        let omega = |i: usize, j: usize| ((if i == j { a } else { 0.0 }) - b) / (sds[i] * sds[j]);
        let mode = acc.pass() == Pass::Mode;
        for y in 1..l.n_years {
            let z: Vec<f64> = (0..k)
                .map(|s| (acc.u[l.log_f(y, s)] - acc.u[l.log_f(y - 1, s)]) / sds[s])
                .collect();
            let sz: f64 = z.iter().sum();
            let rz: Vec<f64> = z.iter().map(|zi| a * zi - b * sz).collect();
            let quad: f64 = z.iter().zip(&rz).map(|(p, q)| p * q).sum();
            acc.add_value(0.5 * quad + 0.5 * logdet_r + logdet_s + kf * HALF_LOG_2PI);
            match acc.pass() {
                Pass::Value => {}
                Pass::Inner => {
                    for s in 0..k {
                        let g = rz[s] / sds[s];
                        acc.add_grad_u(l.log_f(y, s), g);
                        acc.add_grad_u(l.log_f(y - 1, s), -g);
                        for t in 0..k {
                            let w = omega(s, t);
                            acc.add_hess_ordered(l.log_f(y, s), l.log_f(y, t), w);
                            acc.add_hess_ordered(l.log_f(y - 1, s), l.log_f(y - 1, t), w);
                            acc.add_hess_ordered(l.log_f(y, s), l.log_f(y - 1, t), -w);
                            acc.add_hess_ordered(l.log_f(y - 1, s), l.log_f(y, t), -w);
                        }
                    }
                }
                Pass::Mode => {
                    debug_assert!(mode);
                    // Projected inverse of the increment: P restricted to d = f_y - f_{y-1}.
                    let mut pd = vec![0.0; k * k];
                    for s in 0..k {
                        for t in 0..k {
                            let (ys, yt) = (l.log_f(y, s), l.log_f(y, t));
                            let (ps, pt) = (l.log_f(y - 1, s), l.log_f(y - 1, t));
                            pd[s * k + t] = acc.p(ys, yt) - acc.p(ys, pt) - acc.p(ps, yt) + acc.p(ps, pt);
                        }
                    }
                    for g in 0..o.n_f_groups {
                        let j = o.log_sd_f + g;
                        let e: Vec<f64> = self.group_of_state.iter().map(|&h| if h == g { 1.0 } else { 0.0 }).collect();
                        let n_g: f64 = e.iter().sum();
                        let ez_sum: f64 = z.iter().zip(&e).map(|(zi, ei)| zi * ei).sum();
                        let grad = -z.iter().zip(&e).zip(&rz).map(|((zi, ei), ri)| zi * ei * ri).sum::<f64>() + n_g;
                        acc.add_grad_theta(j, grad);
                        for s in 0..k {
                            // R⁻¹ (E z) in closed form.
                            let rez = a * e[s] * z[s] - b * ez_sum;
                            let h = (-rez - e[s] * rz[s]) / sds[s];
                            acc.add_h_utheta(l.log_f(y, s), j, h);
                            acc.add_h_utheta(l.log_f(y - 1, s), j, -h);
                        }
                        let mut gt = 0.0;
                        for s in 0..k {
                            for t in 0..k {
                                gt += pd[s * k + t] * omega(s, t) * (e[s] + e[t]);
                            }
                        }
                        acc.add_g_theta(j, -0.5 * gt);
                    }
                    if let Some(j) = o.rho_f {
                        let drz: Vec<f64> = z.iter().map(|zi| da * zi - db * sz).collect();
                        let dquad: f64 = z.iter().zip(&drz).map(|(p, q)| p * q).sum();
                        acc.add_grad_theta(j, drho * (0.5 * dquad + 0.5 * dlogdet_r));
                        for s in 0..k {
                            let h = drho * drz[s] / sds[s];
                            acc.add_h_utheta(l.log_f(y, s), j, h);
                            acc.add_h_utheta(l.log_f(y - 1, s), j, -h);
                        }
                        let mut gt = 0.0;
                        for s in 0..k {
                            for t in 0..k {
                                let dr = (if s == t { da } else { 0.0 }) - db;
                                gt += pd[s * k + t] * dr / (sds[s] * sds[t]);
                            }
                        }
                        acc.add_g_theta(j, 0.5 * drho * gt);
                    }
                }
            }
        }
    }

    fn add_catchability_prior(&self, acc: &mut Accumulator<'_>) {
        let Some(pen) = &self.q_penalty else { return };
        let l = self.inner;
        let rho = pen.log_lambda(acc.theta);
        let lam = rho.exp();
        let beta = self.catchability_coefficients(acc.u);
        let (v, sb, quad) = pen.nll(beta, rho);
        acc.add_value(v);
        match acc.pass() {
            Pass::Value => {}
            Pass::Inner => {
                for i in 0..l.n_q {
                    acc.add_grad_u(l.q(i), lam * sb[i]);
                    for j in 0..l.n_q {
                        let s = pen.s[(i, j)];
                        if s != 0.0 {
                            acc.add_hess_ordered(l.q(i), l.q(j), lam * s);
                        }
                    }
                }
            }
            Pass::Mode => {
                if let RhoSlot::Estimated(j) = pen.rho {
                    acc.add_grad_theta(j, 0.5 * lam * quad - 0.5 * pen.rank as f64);
                    for i in 0..l.n_q {
                        acc.add_h_utheta(l.q(i), j, lam * sb[i]);
                    }
                    let mut tr = 0.0;
                    for i in 0..l.n_q {
                        for k in 0..l.n_q {
                            let s = pen.s[(i, k)];
                            if s != 0.0 {
                                tr += acc.p(l.q(i), l.q(k)) * s;
                            }
                        }
                    }
                    acc.add_g_theta(j, 0.5 * lam * tr);
                }
            }
        }
    }
}

impl LatentObjective for SamObjective {
    fn n_inner(&self) -> usize {
        self.inner.len()
    }

    fn n_outer(&self) -> usize {
        self.outer.len
    }

    fn structure(&self) -> ArrowStructure {
        self.inner.structure()
    }

    fn accumulate(&self, acc: &mut Accumulator<'_>) -> Result<()> {
        for t in &self.terms {
            let x = acc.locals(&t.coords);
            let j = t.eval(&x);
            acc.add_term(&t.coords, &j);
        }
        self.add_f_increments(acc);
        self.add_catchability_prior(acc);
        Ok(())
    }

    fn outer_terms(&self, theta: &[f64]) -> (f64, Vec<f64>) {
        let o = &self.outer;
        let mut v = 0.0;
        let mut g = vec![0.0; theta.len()];
        if let Some(pen) = &self.var_penalty {
            let rho = pen.log_lambda(theta);
            let lam = rho.exp();
            let (pv, sb, quad) = pen.nll(self.variance_coefficients(theta), rho);
            v += pv;
            for (c, s) in sb.iter().enumerate() {
                g[o.variance + c] += lam * s;
            }
            if let RhoSlot::Estimated(j) = pen.rho {
                g[j] += 0.5 * lam * quad - 0.5 * pen.rank as f64;
            }
        }
        let (k, delta) = (self.config.priors.k, self.config.priors.delta);
        for j in [o.rho_variance, o.rho_catchability].into_iter().flatten() {
            v -= log_prior_rho(&[theta[j]], k, delta);
            g[j] += delta * logistic(delta * (theta[j] - k));
        }
        (v, g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RegimeSpec;
    use crate::laplace::{evaluate, objective_value, InnerOptions};
    use crate::model::{obs_nll, process_nll};
    use crate::simulate::{simulate, TruthSpec};
    use approx::assert_relative_eq;

    fn small(config: &ModelConfig) -> (StockData, SamObjective) {
        let t = TruthSpec::example(4, 8, 2);
        let (data, _) = simulate(&ModelConfig::default(), &t, 11).unwrap();
        let obj = SamObjective::new(&data, config).unwrap();
        (data, obj)
    }

    #[test]
    fn rho_prior_constants() {
        assert_eq!(log_prior_rho(&[7.0], 7.0, 100.0), 0.5f64.ln());
        assert!(log_prior_rho(&[0.0], 7.0, 100.0).abs() < 1e-6);
        assert_relative_eq!(log_prior_rho(&[6.9], 7.0, 100.0), -4.5398899e-5, max_relative = 1e-6);
        assert!(log_prior_rho(&[1e6], 7.0, 100.0).is_finite());
    }

    #[test]
    fn beta_prior_scaling_and_null_space() {
        let s = DMatrix::<f64>::identity(3, 3);
        let a = log_prior_beta(&[0.0; 3], &[s.clone()], &[0.0]).unwrap();
        let b = log_prior_beta(&[0.0; 3], &[s], &[2f64.ln()]).unwrap();
        assert_relative_eq!(b - a, 1.5 * 2f64.ln(), epsilon = 1e-12);
        let knots = crate::spline::log_age_grid_from(1, 6);
        let (_, s) = crate::spline::build_cr_basis(&knots).unwrap();
        let beta: Vec<f64> = knots.iter().map(|k| 0.3 - 2.0 * k).collect();
        let with = log_prior_beta(&beta, &[s.clone()], &[1.0]).unwrap();
        let zero = log_prior_beta(&[0.0; 6], &[s], &[1.0]).unwrap();
        assert_relative_eq!(with, zero, epsilon = 1e-9);
    }

    #[test]
    fn objective_equals_model_densities() {
        for cfg in [ModelConfig::default(), ModelConfig::uniform(RegimeSpec::Named("maximal".into()))] {
            let (data, obj) = small(&cfg);
            let mut u = obj.initial_inner();
            for (i, x) in u.iter_mut().enumerate() {
                *x += 0.05 * ((i * 7 % 11) as f64 - 5.0);
            }
            let mut theta = obj.initial_outer();
            for (i, x) in theta.iter_mut().enumerate() {
                *x += 0.03 * ((i * 5 % 7) as f64 - 3.0);
            }
            let f = objective_value(&obj, &u, &theta).unwrap();
            let states = obj.states(&u);
            let expected = process_nll(&states, &obj.process_params(&theta), &data)
                + obs_nll(&states, &obj.obs_params(&theta, &u).unwrap(), &data, &obj.state_of_age)
                + obj.catchability_prior_nll(&u, &theta);
            assert_relative_eq!(f, expected, max_relative = 1e-12);
        }
    }

    #[test]
    fn masked_record_leaves_objective_unchanged() {
        let cfg = ModelConfig::default();
        let (data, obj) = small(&cfg);
        let mut masked = data.clone();
        masked.obs[3].missing = true;
        let mut perturbed = masked.clone();
        perturbed.obs[3].value *= 5.0;
        let a = SamObjective::new(&masked, &cfg).unwrap();
        let b = SamObjective::new(&perturbed, &cfg).unwrap();
        let (u, t) = (obj.initial_inner(), obj.initial_outer());
        assert_eq!(objective_value(&a, &u, &t).unwrap(), objective_value(&b, &u, &t).unwrap());
        assert!(objective_value(&a, &u, &t).unwrap() != objective_value(&obj, &u, &t).unwrap());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut cfg = ModelConfig::default();
        cfg.catchability = crate::config::FleetRegimes::All(RegimeSpec::Named("spline_bs".into()));
        cfg.process.f_sd_groups = Some(vec![0, 0, 1, 1]);
        let (_, obj) = small(&cfg);
        let o = InnerOptions::default();
        let mut theta = obj.initial_outer();
        for (i, x) in theta.iter_mut().enumerate() {
            *x += 0.1 * ((i * 3 % 5) as f64 - 2.0);
        }
        let e = evaluate(&obj, &theta, &obj.initial_inner(), o, true).unwrap();
        let g = e.gradient.unwrap();
        for j in 0..theta.len() {
            let h = 1e-4 * theta[j].abs().max(1.0);
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let fp = evaluate(&obj, &tp, &e.inner.u, o, false).unwrap().total;
            let fm = evaluate(&obj, &tm, &e.inner.u, o, false).unwrap().total;
            let fd = (fp - fm) / (2.0 * h);
            assert!((g[j] - fd).abs() <= 1e-5 * fd.abs().max(1.0), "component {j}: {} vs {fd}", g[j]);
        }
    }
}
