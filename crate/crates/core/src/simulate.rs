//! Synthetic stocks drawn from the state-space model.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::data::{AgeRange, AuxKind, AuxSet, AuxTable, FleetKind, ObsRecord, StockData};
use crate::error::{Error, Result};
use crate::model::{catch_mean_log, survey_mean_log, survival_step, CatchMean, LatentStates};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SurveyTruth {
    pub timing: f64,
    pub min_age: i32,
    pub max_age: i32,
    /// Log catchability per observed age.
    pub log_q: Vec<f64>,
    /// Log observation sd per observed age.
    pub log_sd: Vec<f64>,
}

/// True parameters and dimensions of a simulated stock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub first_year: i32,
    pub n_years: usize,
    pub min_age: i32,
    pub max_age: i32,
    pub natural_mortality: Vec<f64>,
    pub stock_weight: Vec<f64>,
    pub catch_weight: Vec<f64>,
    pub maturity: Vec<f64>,
    #[serde(default)]
    pub prop_f: f64,
    #[serde(default)]
    pub prop_m: f64,
    /// Log recruitment in the first year.
    pub log_r0: f64,
    /// First-year log F per F state.
    pub log_f0: Vec<f64>,
    pub sd_log_r: f64,
    pub sd_log_n: f64,
    /// One sd per F sd group.
    pub sd_log_f: Vec<f64>,
    pub rho_f: f64,
    /// Catch log sd per age.
    pub catch_log_sd: Vec<f64>,
    pub surveys: Vec<SurveyTruth>,
}

impl TruthSpec {
    /// A stock with `n_ages` ages starting at 1 and smooth, plausible parameters.
    pub fn example(n_ages: usize, n_years: usize, n_surveys: usize) -> Self {
        let ages: Vec<f64> = (1..=n_ages).map(|a| a as f64).collect();
        let sel = |a: f64| 1.0 / (1.0 + (-(a - 2.5) * 1.5).exp());
        let surveys = (0..n_surveys)
            .map(|j| {
                let timing = if j % 2 == 0 { 0.2 } else { 0.7 };
                SurveyTruth {
                    timing,
                    min_age: 1,
                    max_age: n_ages as i32,
                    log_q: ages.iter().map(|&a| -6.0 - 0.3 * j as f64 + 1.2 * sel(a)).collect(),
                    log_sd: ages.iter().map(|&a| parabola(a, -0.9, 0.4)).collect(),
                }
            })
            .collect();
        TruthSpec {
            first_year: 1980,
            n_years,
            min_age: 1,
            max_age: n_ages as i32,
            natural_mortality: vec![0.2; n_ages],
            stock_weight: ages.iter().map(|a| 0.2 * a).collect(),
            catch_weight: ages.iter().map(|a| 0.25 * a).collect(),
            maturity: ages.iter().map(|&a| sel(a + 0.5)).collect(),
            prop_f: 0.0,
            prop_m: 0.0,
            log_r0: 12.0,
            log_f0: ages.iter().map(|&a| (0.4 * sel(a)).ln()).collect(),
            sd_log_r: 0.4,
            sd_log_n: 0.2,
            sd_log_f: vec![0.25],
            rho_f: 0.5,
            catch_log_sd: ages.iter().map(|&a| parabola(a, -1.3, 0.5)).collect(),
            surveys,
        }
    }

    pub fn ages(&self) -> Result<AgeRange> {
        AgeRange::new(self.min_age, self.max_age)
    }

    fn validate(&self, config: &ModelConfig) -> Result<()> {
        let ages = self.ages()?;
        let a = ages.count();
        let bad = |what: &str| Err(Error::ConfigInvalid(format!("truth: {what}")));
        for (name, v) in [
            ("natural_mortality", &self.natural_mortality),
            ("stock_weight", &self.stock_weight),
            ("catch_weight", &self.catch_weight),
            ("maturity", &self.maturity),
            ("catch_log_sd", &self.catch_log_sd),
        ] {
            if v.len() != a {
                return bad(&format!("{name} needs {a} entries"));
            }
        }
        let k = config.n_f_states(a);
        if self.log_f0.len() != k {
            return bad(&format!("log_f0 needs {k} entries"));
        }
        let groups = config.f_sd_group_of_state(a).iter().max().map_or(0, |g| g + 1);
        if self.sd_log_f.len() != groups {
            return bad(&format!("sd_log_f needs {groups} entries"));
        }
        if self.n_years == 0 {
            return bad("n_years must be positive");
        }
        if [self.sd_log_r, self.sd_log_n].iter().chain(&self.sd_log_f).any(|s| !(*s >= 0.0)) {
            return bad("process sds must be non-negative");
        }
        if !(self.rho_f > crate::model::exchangeable_lower_bound(k) && self.rho_f < 1.0) {
            return bad("rho_f outside its admissible range");
        }
        for s in &self.surveys {
            let n = AgeRange::new(s.min_age, s.max_age)?.count();
            if s.min_age < self.min_age || s.max_age > self.max_age || s.log_q.len() != n || s.log_sd.len() != n {
                return bad("survey ages or parameter lengths");
            }
            if !(0.0..1.0).contains(&s.timing) {
                return bad("survey timing must lie in [0, 1)");
            }
        }
        Ok(())
    }
}

/// `c + k (log(a + 1) - log 4.5)²`, a parabola in log age.
fn parabola(age: f64, c: f64, k: f64) -> f64 {
    let x = (age + 1.0).ln() - 4.5f64.ln();
    c + k * x * x * 4.0
}

/// True states and parameters written next to a simulated stock.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub spec: TruthSpec,
    pub seed: u64,
    pub states: LatentStates,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw states and observations. Identical seeds give identical output.
pub fn simulate(config: &ModelConfig, truth: &TruthSpec, seed: u64) -> Result<(StockData, Truth)> {
    truth.validate(config)?;
    let ages = truth.ages()?;
    let a = ages.count();
    let y_n = truth.n_years;
    let state_of_age = config.f_state_of_age(a);
    let group_of_state = config.f_sd_group_of_state(a);
    let k = group_of_state.len();
    let m = &truth.natural_mortality;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Correlated F increments: L z with L L' = S R S.
    let sds: Vec<f64> = group_of_state.iter().map(|&g| truth.sd_log_f[g]).collect();
    let cov = DMatrix::from_fn(k, k, |i, j| sds[i] * sds[j] * if i == j { 1.0 } else { truth.rho_f });
    let chol_l = if sds.iter().all(|s| *s > 0.0) {
        nalgebra::Cholesky::new(cov.clone())
            .ok_or_else(|| Error::ConfigInvalid("F increment covariance not positive definite".into()))?
            .l()
    } else {
        // Degenerate sds: scale a unit-sd factor.
        let unit = DMatrix::from_fn(k, k, |i, j| if i == j { 1.0 } else { truth.rho_f });
        let l = nalgebra::Cholesky::new(unit)
            .ok_or_else(|| Error::ConfigInvalid("F correlation not positive definite".into()))?
            .l();
        DMatrix::from_diagonal(&DVector::from_vec(sds.clone())) * l
    };

    let mut log_f = vec![truth.log_f0.clone()];
    let f_age = |row: &[f64]| -> Vec<f64> { state_of_age.iter().map(|&s| row[s]).collect() };
    // Equilibrium first-year abundance.
    let f0 = f_age(&truth.log_f0);
    let z: Vec<f64> = (0..a).map(|i| f0[i].exp() + m[i]).collect();
    let mut n0 = vec![truth.log_r0; a];
    for i in 1..a {
        n0[i] = n0[i - 1] - z[i - 1];
    }
    if a > 1 {
        n0[a - 1] -= (-(-z[a - 1]).exp_m1()).ln();
    }
    let mut log_n = vec![n0];
    for y in 1..y_n {
        let eps = DVector::from_fn(k, |_, _| normal(&mut rng));
        let inc = &chol_l * eps;
        let f_row: Vec<f64> = (0..k).map(|s| log_f[y - 1][s] + inc[s]).collect();
        let prev_f = f_age(&log_f[y - 1]);
        let mean = survival_step(&log_n[y - 1], &prev_f, m);
        let n_row: Vec<f64> = mean
            .iter()
            .enumerate()
            .map(|(i, mu)| mu + normal(&mut rng) * if i == 0 { truth.sd_log_r } else { truth.sd_log_n })
            .collect();
        log_f.push(f_row);
        log_n.push(n_row);
    }
    let states = LatentStates { log_n, log_f };

    let mut obs = Vec::new();
    let mut kinds = BTreeMap::new();
    kinds.insert(0usize, (FleetKind::Catch, 0.0));
    for (j, s) in truth.surveys.iter().enumerate() {
        kinds.insert(j + 1, (FleetKind::Survey, s.timing));
    }
    for y in 0..y_n {
        let year = truth.first_year + y as i32;
        let fa = f_age(&states.log_f[y]);
        for i in 0..a {
            let mean = match catch_mean_log(states.log_n[y][i], fa[i], m[i]) {
                CatchMean::Log(v) => v,
                CatchMean::NoCatch => return Err(Error::ConfigInvalid("simulated F is zero".into())),
            };
            let v = (mean + normal(&mut rng) * truth.catch_log_sd[i].exp()).exp();
            obs.push(ObsRecord { year, fleet: 0, age: ages.age_at(i), value: v, missing: false });
        }
        for (j, s) in truth.surveys.iter().enumerate() {
            for (l, age) in (s.min_age..=s.max_age).enumerate() {
                let i = ages.index(age).expect("survey age inside stock");
                let mean = survey_mean_log(states.log_n[y][i], fa[i], m[i], s.timing, s.log_q[l]);
                let v = (mean + normal(&mut rng) * s.log_sd[l].exp()).exp();
                obs.push(ObsRecord { year, fleet: j + 1, age, value: v, missing: false });
            }
        }
    }

    let table = |kind, row: &[f64]| AuxTable::constant_rows(kind, truth.first_year, truth.min_age, row, y_n);
    let aux = AuxSet {
        natural_mortality: table(AuxKind::NaturalMortality, m),
        stock_weight: table(AuxKind::StockWeight, &truth.stock_weight),
        catch_weight: table(AuxKind::CatchWeight, &truth.catch_weight),
        maturity: table(AuxKind::Maturity, &truth.maturity),
        prop_f: table(AuxKind::PropFBeforeSpawn, &vec![truth.prop_f; a]),
        prop_m: table(AuxKind::PropMBeforeSpawn, &vec![truth.prop_m; a]),
    };
    let data = StockData::from_parts(ages, &kinds, obs, aux)?;
    Ok((data, Truth { spec: truth.clone(), seed, states }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn same_seed_same_data() {
        let t = TruthSpec::example(5, 12, 2);
        let cfg = ModelConfig::default();
        let (a, _) = simulate(&cfg, &t, 7).unwrap();
        let (b, _) = simulate(&cfg, &t, 7).unwrap();
        let (c, _) = simulate(&cfg, &t, 8).unwrap();
        assert_eq!(a.obs, b.obs);
        assert_ne!(a.obs, c.obs);
    }

    #[test]
    fn zero_noise_lies_on_means() {
        let mut t = TruthSpec::example(4, 6, 1);
        t.sd_log_r = 0.0;
        t.sd_log_n = 0.0;
        t.sd_log_f = vec![0.0];
        t.catch_log_sd = vec![-f64::INFINITY; 4];
        t.surveys[0].log_sd = vec![-f64::INFINITY; 4];
        let (data, truth) = simulate(&ModelConfig::default(), &t, 3).unwrap();
        let s = &truth.states;
        for y in 1..6 {
            assert_eq!(s.log_f[y], s.log_f[0]);
            let mean = survival_step(&s.log_n[y - 1], &s.log_f[y - 1], &t.natural_mortality);
            assert_eq!(s.log_n[y], mean);
        }
        for r in &data.obs {
            let y = data.year_index(r.year).unwrap();
            let i = data.ages.index(r.age).unwrap();
            let expected = if r.fleet == 0 {
                let CatchMean::Log(c) = catch_mean_log(s.log_n[y][i], s.log_f[y][i], 0.2) else { panic!() };
                c
            } else {
                survey_mean_log(s.log_n[y][i], s.log_f[y][i], 0.2, t.surveys[0].timing, t.surveys[0].log_q[i])
            };
            assert_relative_eq!(r.value.ln(), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn equilibrium_first_year() {
        let t = TruthSpec::example(4, 1, 0);
        let (_, truth) = simulate(&ModelConfig::default(), &t, 1).unwrap();
        let n0 = &truth.states.log_n[0];
        let f0: Vec<f64> = t.log_f0.clone();
        let next = survival_step(n0, &f0, &t.natural_mortality);
        for i in 1..4 {
            assert_relative_eq!(next[i], n0[i], epsilon = 1e-12);
        }
    }
}
