//! Population dynamics, observation densities and derived quantities.
//!
//! Ages are indexed from 0 (youngest) to `A - 1` (plus group). All functions
//! here work on plain values; the estimation code evaluates the same
//! densities on [`crate::jet::Jet`]s.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::data::{AuxKind, FleetKind, StockData};

/// `½ log(2π)`.
pub const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Sd of the diffuse Gaussian prior on first-year log-states.
pub const FIRST_YEAR_SD: f64 = 10.0;

/// Log abundance and log fishing mortality, `[year][age]` and `[year][F state]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStates {
    pub log_n: Vec<Vec<f64>>,
    pub log_f: Vec<Vec<f64>>,
}

impl LatentStates {
    /// Log F per age for year index `y`.
    pub fn log_f_by_age(&self, y: usize, state_of_age: &[usize]) -> Vec<f64> {
        state_of_age.iter().map(|&s| self.log_f[y][s]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessParams {
    pub sd_log_r: f64,
    pub sd_log_n: f64,
    /// One sd per F sd group.
    pub sd_log_f: Vec<f64>,
    /// Correlation of F increments between any two F states.
    pub rho_f: f64,
    pub f_state_of_age: Vec<usize>,
    pub f_sd_group_of_state: Vec<usize>,
}

impl ProcessParams {
    pub fn n_f_states(&self) -> usize {
        self.f_sd_group_of_state.len()
    }

    pub fn f_state_sds(&self) -> Vec<f64> {
        self.f_sd_group_of_state.iter().map(|&g| self.sd_log_f[g]).collect()
    }
}

/// Observation parameters indexed by fleet position and stock age; `NaN` where
/// the fleet does not observe an age. The catch fleet has no catchability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObsParams {
    pub log_sd: Vec<Vec<f64>>,
    pub log_q: Vec<Vec<f64>>,
}

/// Deterministic next-year mean of log abundance. Slot 0 holds the
/// random-walk recruitment mean; the last age is the plus group.
pub fn survival_step(log_n: &[f64], log_f: &[f64], m: &[f64]) -> Vec<f64> {
    let a = log_n.len();
    let mut next = Vec::with_capacity(a);
    next.push(recruitment_mean(log_n[0]));
    if a == 1 {
        return next;
    }
    let surv = |i: usize| log_n[i] - log_f[i].exp() - m[i];
    for i in 1..a - 1 {
        next.push(surv(i - 1));
    }
    next.push(log_add_exp(surv(a - 2), surv(a - 1)));
    next
}

/// Random-walk mean of next year's log recruitment.
pub fn recruitment_mean(log_r_prev: f64) -> f64 {
    log_r_prev
}

pub fn log_add_exp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CatchMean {
    Log(f64),
    /// No fishing, so the expected catch is zero.
    NoCatch,
}

/// Baranov mean of log catch, `log(F/Z (1 - e^{-Z}) N)` with `Z = F + M`.
pub fn catch_mean_log(log_n: f64, log_f: f64, m: f64) -> CatchMean {
    let f = log_f.exp();
    let z = f + m;
    if f == 0.0 || z <= 0.0 {
        return CatchMean::NoCatch;
    }
    CatchMean::Log(log_f - z.ln() + (-(-z).exp_m1()).ln() + log_n)
}

/// Mean log survey index with abundance decayed to the survey time.
pub fn survey_mean_log(log_n: f64, log_f: f64, m: f64, timing: f64, log_q: f64) -> f64 {
    log_q + log_n - timing * (log_f.exp() + m)
}

/// Negative log Gaussian density of `x` with the given mean and sd.
pub fn gaussian_nll(x: f64, mean: f64, sd: f64) -> f64 {
    let r = (x - mean) / sd;
    0.5 * r * r + sd.ln() + HALF_LOG_2PI
}

/// Smallest admissible exchangeable correlation for `k` variables.
pub fn exchangeable_lower_bound(k: usize) -> f64 {
    if k <= 1 {
        -1.0
    } else {
        -1.0 / (k as f64 - 1.0)
    }
}

/// Negative log density of `d ~ N(0, S R S)` with `S = diag(sds)` and
/// exchangeable correlation `rho`.
pub fn exchangeable_nll(d: &[f64], sds: &[f64], rho: f64) -> f64 {
    let k = d.len() as f64;
    let z: Vec<f64> = d.iter().zip(sds).map(|(x, s)| x / s).collect();
    let zz: f64 = z.iter().map(|x| x * x).sum();
    let sz: f64 = z.iter().sum();
    let c = rho / (1.0 + (k - 1.0) * rho);
    let quad = (zz - c * sz * sz) / (1.0 - rho);
    let logdet_r = (k - 1.0) * (1.0 - rho).ln() + (1.0 + (k - 1.0) * rho).ln();
    let logdet_s: f64 = sds.iter().map(|s| s.ln()).sum();
    0.5 * quad + 0.5 * logdet_r + logdet_s + k * HALF_LOG_2PI
}

fn natural_mortality_row(data: &StockData, y: usize) -> Vec<f64> {
    let year = data.first_year + y as i32;
    (0..data.n_ages()).map(|a| data.aux.natural_mortality.get(year, a)).collect()
}

/// Negative log density of the latent states.
pub fn process_nll(states: &LatentStates, params: &ProcessParams, data: &StockData) -> f64 {
    let first_sd = FIRST_YEAR_SD;
    let mut nll = 0.0;
    for &x in states.log_n[0].iter().chain(&states.log_f[0]) {
        nll += gaussian_nll(x, 0.0, first_sd);
    }
    let sds = params.f_state_sds();
    for y in 1..states.log_n.len() {
        let m = natural_mortality_row(data, y - 1);
        let f_prev = states.log_f_by_age(y - 1, &params.f_state_of_age);
        let mean = survival_step(&states.log_n[y - 1], &f_prev, &m);
        for (a, (&x, &mu)) in states.log_n[y].iter().zip(&mean).enumerate() {
            let sd = if a == 0 { params.sd_log_r } else { params.sd_log_n };
            nll += gaussian_nll(x, mu, sd);
        }
        let d: Vec<f64> = states.log_f[y].iter().zip(&states.log_f[y - 1]).map(|(a, b)| a - b).collect();
        nll += if d.len() == 1 {
            gaussian_nll(d[0], 0.0, sds[0])
        } else {
            exchangeable_nll(&d, &sds, params.rho_f)
        };
    }
    nll
}

/// Mean log observation of one record under the given states.
pub fn observation_mean_log(
    states: &LatentStates,
    obs: &ObsParams,
    data: &StockData,
    state_of_age: &[usize],
    fleet_pos: usize,
    y: usize,
    a: usize,
) -> CatchMean {
    let fleet = &data.fleets[fleet_pos];
    let year = data.first_year + y as i32;
    let m = data.aux.natural_mortality.get(year, a);
    let log_n = states.log_n[y][a];
    let log_f = states.log_f[y][state_of_age[a]];
    match fleet.kind {
        FleetKind::Catch => catch_mean_log(log_n, log_f, m),
        FleetKind::Survey => CatchMean::Log(survey_mean_log(log_n, log_f, m, fleet.timing, obs.log_q[fleet_pos][a])),
    }
}

/// Negative log density of the non-missing observations.
pub fn obs_nll(states: &LatentStates, obs: &ObsParams, data: &StockData, state_of_age: &[usize]) -> f64 {
    let mut nll = 0.0;
    for r in data.obs.iter().filter(|r| !r.missing) {
        let pos = data.fleets.iter().position(|f| f.fleet == r.fleet).expect("record fleet exists");
        let y = data.year_index(r.year).expect("record year in range");
        let a = data.ages.index(r.age).expect("record age in range");
        let mean = match observation_mean_log(states, obs, data, state_of_age, pos, y, a) {
            CatchMean::Log(v) => v,
            CatchMean::NoCatch => f64::NEG_INFINITY,
        };
        nll += gaussian_nll(r.value.ln(), mean, obs.log_sd[pos][a].exp());
    }
    nll
}

/// Spawning stock biomass per year.
pub fn ssb(states: &LatentStates, data: &StockData, state_of_age: &[usize]) -> Vec<f64> {
    let aux = &data.aux;
    (0..states.log_n.len())
        .map(|y| {
            let year = data.first_year + y as i32;
            (0..data.n_ages())
                .map(|a| {
                    let f = states.log_f[y][state_of_age[a]].exp();
                    let m = aux.get(AuxKind::NaturalMortality).get(year, a);
                    let pf = aux.get(AuxKind::PropFBeforeSpawn).get(year, a);
                    let pm = aux.get(AuxKind::PropMBeforeSpawn).get(year, a);
                    states.log_n[y][a].exp()
                        * (-pf * f - pm * m).exp()
                        * aux.maturity.get(year, a)
                        * aux.stock_weight.get(year, a)
                })
                .sum()
        })
        .collect()
}

/// Density of a Gaussian, used by tests and the simulator checks.
pub fn gaussian_pdf(x: f64, mean: f64, var: f64) -> f64 {
    (-(x - mean).powi(2) / (2.0 * var)).exp() / (2.0 * PI * var).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn survival_without_mortality() {
        let ln: Vec<f64> = [100.0f64, 50.0, 20.0].iter().map(|x| x.ln()).collect();
        let next = survival_step(&ln, &[f64::NEG_INFINITY; 3], &[0.0; 3]);
        assert_relative_eq!(next[1].exp(), 100.0, epsilon = 1e-10);
        assert_relative_eq!(next[2].exp(), 70.0, epsilon = 1e-10);
        assert_eq!(next[0], ln[0]);
    }

    #[test]
    fn survival_with_mortality() {
        let ln: Vec<f64> = [1000.0f64, 500.0, 200.0].iter().map(|x| x.ln()).collect();
        let lf = [0.2f64.ln(); 3];
        let next = survival_step(&ln, &lf, &[0.2; 3]);
        assert_relative_eq!(next[1].exp(), 670.320046, epsilon = 1e-5);
        assert_relative_eq!(next[2].exp(), 469.224032, epsilon = 1e-5);
        let dead = survival_step(&[0.0, f64::NEG_INFINITY, 3.0], &lf, &[0.2; 3]);
        assert_relative_eq!(dead[2], 3.0 - 0.4, epsilon = 1e-14);
    }

    #[test]
    fn recruitment_density() {
        assert_eq!(recruitment_mean(5.0), 5.0);
        let nll = gaussian_nll(5.6, recruitment_mean(5.0), 0.6);
        assert_relative_eq!((-nll).exp(), gaussian_pdf(0.6, 0.0, 0.36), epsilon = 1e-14);
    }

    #[test]
    fn baranov_catch() {
        assert_eq!(catch_mean_log(1.0, f64::NEG_INFINITY, 0.2), CatchMean::NoCatch);
        let CatchMean::Log(c) = catch_mean_log(1000f64.ln(), 0.5f64.ln(), 0.5) else { panic!() };
        assert_relative_eq!(c.exp(), 316.0602794, epsilon = 1e-6);
        let CatchMean::Log(c) = catch_mean_log(1000f64.ln(), 50f64.ln(), 0.2) else { panic!() };
        assert!((c.exp() - 1000.0 * 50.0 / 50.2).abs() < 1e-8);
    }

    #[test]
    fn survey_mean() {
        assert_eq!(survey_mean_log(2.0, -1.0, 0.3, 0.0, -4.0), -2.0);
        assert_relative_eq!(survey_mean_log(1.0, 0.7f64.ln(), 0.3, 0.5, 0.0), 0.5, epsilon = 1e-14);
        let a = survey_mean_log(1.0, 0.0, 0.3, 0.5, 0.1);
        let b = survey_mean_log(1.0, 0.0, 0.3, 0.5, 0.1 + 2f64.ln());
        assert_relative_eq!(b - a, 2f64.ln(), epsilon = 1e-14);
    }

    #[test]
    fn exchangeable_matches_dense_density() {
        let d = [0.3f64, -0.1, 0.25];
        let sds = [0.2f64, 0.4, 0.3];
        let rho = 0.35;
        let sigma = nalgebra::DMatrix::<f64>::from_fn(3, 3, |i, j| sds[i] * sds[j] * if i == j { 1.0 } else { rho });
        let dv = nalgebra::DVector::from_column_slice(&d);
        let inv = sigma.clone().try_inverse().unwrap();
        let expected = 0.5 * (dv.transpose() * inv * &dv)[(0, 0)] + 0.5 * sigma.determinant().ln() + 3.0 * HALF_LOG_2PI;
        assert_relative_eq!(exchangeable_nll(&d, &sds, rho), expected, epsilon = 1e-12);
        let indep: f64 = d.iter().zip(&sds).map(|(x, s)| gaussian_nll(*x, 0.0, *s)).sum();
        assert_relative_eq!(exchangeable_nll(&d, &sds, 0.0), indep, epsilon = 1e-12);
    }

    #[test]
    fn ssb_scalar() {
        // The second age is immature, so only the first contributes.
        let mut data = crate::data::tests::grid_stock(2, 1, &[]);
        data.aux.stock_weight.values[0] = vec![2.0, 1.0];
        data.aux.maturity.values[0] = vec![0.5, 0.0];
        let states = LatentStates { log_n: vec![vec![1000f64.ln(), 5.0]], log_f: vec![vec![-1.0, -1.0]] };
        assert_relative_eq!(ssb(&states, &data, &[0, 1])[0], 1000.0, epsilon = 1e-9);
        data.aux.maturity.values[0] = vec![0.0, 0.0];
        assert_eq!(ssb(&states, &data, &[0, 1])[0], 0.0);
    }
}
