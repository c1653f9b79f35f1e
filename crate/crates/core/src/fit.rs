//! Fitting a configuration to a dataset and the serialized result.

use std::cell::RefCell;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::{Family, ModelConfig};
use crate::data::{FleetKind, FleetMeta, StockData};
use crate::error::{Error, Result};
use crate::laplace::{evaluate, Evaluation, InnerOptions};
use crate::model::{ssb, LatentStates};
use crate::objective::SamObjective;
use crate::optim::{minimize, BfgsOptions, BfgsStatus};
use crate::params::{BlockId, ParamCounts};

/// Build identifier embedded in every output.
pub fn build_id() -> String {
    format!("samspline {}", env!("CARGO_PKG_VERSION"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockSummary {
    pub first_year: i32,
    pub last_year: i32,
    pub min_age: i32,
    pub max_age: i32,
    pub fleets: Vec<FleetMeta>,
    pub n_observations: usize,
}

impl StockSummary {
    pub fn of(data: &StockData) -> Self {
        StockSummary {
            first_year: data.first_year,
            last_year: data.last_year(),
            min_age: data.ages.min_age,
            max_age: data.ages.max_age,
            fleets: data.fleets.clone(),
            n_observations: data.n_present(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Convergence {
    pub converged: bool,
    pub reason: String,
    pub gradient_norm: f64,
    /// `converge_tol · max(1, |objective|)`.
    pub gradient_tolerance: f64,
    pub hessian_positive_definite: bool,
    pub optimizer_status: String,
    pub iterations: usize,
    pub evaluations: usize,
    pub restarts_used: usize,
    pub runtime_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub name: String,
    pub estimate: f64,
    pub se: Option<f64>,
}

/// One point of an age-dependent parameter curve, on the log scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub block: Family,
    pub fleet: usize,
    pub age: i32,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YearValue {
    pub year: i32,
    pub estimate: f64,
    pub se: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lambdas {
    pub variance: Option<f64>,
    pub catchability: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProcessEstimates {
    pub sd_log_r: f64,
    pub sd_log_n: f64,
    pub sd_log_f: Vec<f64>,
    pub rho_f: f64,
    pub f_state_of_age: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    pub n_inner: usize,
    pub half_bandwidth: usize,
    pub border: usize,
    pub log_det: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub build: String,
    pub model: String,
    pub stock: StockSummary,
    pub converged: bool,
    pub convergence: Convergence,
    /// Minimized objective: negative Laplace marginal plus outer priors.
    pub objective: f64,
    /// Negative Laplace marginal log-likelihood.
    pub nll_marginal: f64,
    pub lambda_hat: Lambdas,
    pub outer: Vec<Estimate>,
    pub process: ProcessEstimates,
    pub curves: Vec<CurvePoint>,
    pub states: LatentStates,
    pub ssb: Vec<YearValue>,
    pub parameter_counts: ParamCounts,
    pub curvature: Curvature,
    pub inner_modes: Vec<f64>,
}

impl FitResult {
    pub fn curve(&self, block: Family, fleet: usize, age: i32) -> Option<f64> {
        self.curves
            .iter()
            .find(|c| c.block == block && c.fleet == fleet && c.age == age)
            .map(|c| c.estimate)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    /// `block,fleet,age,estimate,se` rows.
    pub fn write_params_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        w.write_record(["block", "fleet", "age", "estimate", "se"]).map_err(csv_err)?;
        for c in &self.curves {
            w.write_record([
                c.block.to_string(),
                c.fleet.to_string(),
                c.age.to_string(),
                c.estimate.to_string(),
                c.se.map_or_else(|| "NA".to_string(), |s| s.to_string()),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Overrides the configured number of restarts.
    pub restarts: Option<usize>,
    /// Starting outer vector instead of the configured initial values.
    pub start: Option<Vec<f64>>,
}

struct Run {
    theta: Vec<f64>,
    eval: Evaluation,
    status: BfgsStatus,
    iterations: usize,
    evaluations: usize,
}

fn inner_options(config: &ModelConfig) -> InnerOptions {
    InnerOptions { tol: config.optimizer.inner_tol, max_iter: config.optimizer.inner_max_iter }
}

/// Minimize the outer objective from `start`; `None` when even the start fails.
fn run_optimizer(obj: &SamObjective, start: &[f64]) -> Option<Run> {
    let cfg = &obj.config;
    let opts = inner_options(cfg);
    let cold = obj.cold_start(start);
    let warm = RefCell::new(cold.clone());
    // Lowest evaluation so far; the optimizer's final point is normally this one.
    let best: RefCell<Option<(Vec<f64>, Evaluation)>> = RefCell::new(None);
    let eval_at = |theta: &[f64]| -> Result<Evaluation> {
        let from = warm.borrow().clone();
        let e = evaluate(obj, theta, &from, opts, true).or_else(|_| evaluate(obj, theta, &cold, opts, true));
        match &e {
            Ok(e) => log::debug!("outer objective {:.10} after {} inner iterations", e.total, e.inner.iterations),
            Err(err) => log::debug!("outer evaluation failed: {err}"),
        }
        let e = e?;
        *warm.borrow_mut() = e.inner.u.clone();
        let mut b = best.borrow_mut();
        if b.as_ref().is_none_or(|(_, old)| e.total < old.total) {
            *b = Some((theta.to_vec(), e.clone()));
        }
        Ok(e)
    };
    let bfgs = BfgsOptions { max_iter: cfg.optimizer.max_iter, gtol: cfg.optimizer.gtol, max_first_step: 1.0 };
    let r = minimize(|t| eval_at(t).ok().map(|e| (e.total, e.gradient.expect("gradient requested"))), start, bfgs);
    if r.status == BfgsStatus::StartFailed {
        return None;
    }
    let (theta, eval) = match best.into_inner() {
        Some((x, e)) if x == r.x => (x, e),
        Some((x, e)) if e.total < r.f => (x, e),
        other => {
            let e = other.map(|(_, e)| e.inner.u).map_or_else(
                || evaluate(obj, &r.x, &cold, opts, true),
                |u| evaluate(obj, &r.x, &u, opts, true).or_else(|_| evaluate(obj, &r.x, &cold, opts, true)),
            );
            (r.x.clone(), e.ok()?)
        }
    };
    Some(Run { theta, eval, status: r.status, iterations: r.iterations, evaluations: r.evaluations })
}

/// Central differences of the analytic gradient, symmetrized.
fn outer_hessian(obj: &SamObjective, theta: &[f64], u: &[f64]) -> Option<DMatrix<f64>> {
    let opts = inner_options(&obj.config);
    let m = theta.len();
    let mut h = DMatrix::zeros(m, m);
    for j in 0..m {
        let step = 1e-4 * theta[j].abs().max(1.0);
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += step;
        tm[j] -= step;
        let gp = evaluate(obj, &tp, u, opts, true).ok()?.gradient?;
        let gm = evaluate(obj, &tm, u, opts, true).ok()?.gradient?;
        for i in 0..m {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Some((&h + h.transpose()) * 0.5)
}

/// Fit with the configured protocol.
pub fn fit(data: &StockData, config: &ModelConfig) -> Result<FitResult> {
    fit_with(data, config, &FitOptions::default())
}

pub fn fit_with(data: &StockData, config: &ModelConfig, options: &FitOptions) -> Result<FitResult> {
    let clock = Instant::now();
    let obj = SamObjective::new(data, config)?;
    let start = options.start.clone().unwrap_or_else(|| obj.initial_outer());
    if start.len() != obj.outer.len {
        return Err(Error::LayoutMismatch { expected: obj.outer.len, got: start.len() });
    }
    let restarts = options.restarts.unwrap_or(config.optimizer.restarts);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let jitter = Normal::new(0.0, 0.5).expect("valid normal");

    let mut best: Option<(Run, Option<DMatrix<f64>>, bool)> = None;
    let mut attempts = 0;
    let mut total_evals = 0;
    for attempt in 0..=restarts {
        attempts = attempt;
        let s: Vec<f64> = if attempt == 0 {
            start.clone()
        } else {
            start.iter().map(|x| x + jitter.sample(&mut rng)).collect()
        };
        let Some(run) = run_optimizer(&obj, &s) else { continue };
        total_evals += run.evaluations;
        let hess = outer_hessian(&obj, &run.theta, &run.eval.inner.u);
        let pd = hess.as_ref().is_some_and(|h| h.clone().cholesky().is_some());
        let gnorm = inf_norm(run.eval.gradient.as_deref().unwrap_or(&[]));
        let ok = pd && gnorm <= config.optimizer.converge_tol * run.eval.total.abs().max(1.0);
        let better = match &best {
            None => true,
            Some((b, _, bok)) => (ok && !bok) || (ok == *bok && run.eval.total < b.eval.total),
        };
        if better {
            best = Some((run, hess, ok));
        }
        if ok {
            break;
        }
    }
    let Some((run, hess, ok)) = best else {
        return Err(Error::InnerDivergence("the objective could not be evaluated at the initial values".into()));
    };
    summarize(&obj, data, run, hess, ok, attempts, total_evals, clock.elapsed().as_secs_f64())
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[allow(clippy::too_many_arguments)]
fn summarize(
    obj: &SamObjective,
    data: &StockData,
    run: Run,
    hess: Option<DMatrix<f64>>,
    ok: bool,
    restarts_used: usize,
    evaluations: usize,
    runtime: f64,
) -> Result<FitResult> {
    let cfg = &obj.config;
    let theta = &run.theta;
    let e = &run.eval;
    let u = &e.inner.u;
    let gnorm = inf_norm(e.gradient.as_deref().unwrap_or(&[]));
    let tol = cfg.optimizer.converge_tol * e.total.abs().max(1.0);
    let pd = hess.as_ref().is_some_and(|h| h.clone().cholesky().is_some());
    let cov = if pd { hess.as_ref().and_then(|h| h.clone().cholesky()).map(|c| c.inverse()) } else { None };
    let reason = if ok {
        "gradient below tolerance and positive definite Hessian".to_string()
    } else if gnorm > tol {
        format!("gradient norm {gnorm:.3e} above tolerance {tol:.3e}")
    } else {
        "outer Hessian not positive definite".to_string()
    };

    let names = obj.outer.names();
    let outer: Vec<Estimate> = theta
        .iter()
        .enumerate()
        .map(|(j, &v)| Estimate {
            name: names[j].clone(),
            estimate: v,
            se: cov.as_ref().map(|c| c[(j, j)].max(0.0).sqrt()),
        })
        .collect();

    // Delta-method variance of a quantity linear in (u, θ) to first order:
    // a·u + b·θ with u responding to θ through the mode.
    let h_ut = e.h_utheta.as_ref().expect("gradient evaluation keeps the mixed Hessian");
    let inner_var = |c: &[(usize, f64)], b: &[(usize, f64)]| -> Option<f64> {
        let cov = cov.as_ref()?;
        let n = u.len();
        let mut dense = vec![0.0; n];
        for &(i, w) in c {
            dense[i] += w;
        }
        let x = e.inner.chol.solve(&dense);
        let var_u: f64 = dense.iter().zip(&x).map(|(a, b)| a * b).sum();
        // Total derivative with respect to θ: b - H_uθᵀ H⁻¹ c.
        let m = theta.len();
        let mut d = vec![0.0; m];
        for &(j, w) in b {
            d[j] += w;
        }
        for (j, dj) in d.iter_mut().enumerate() {
            let mut s = 0.0;
            for (i, xi) in x.iter().enumerate() {
                s += h_ut[(i, j)] * xi;
            }
            *dj -= s;
        }
        let mut var_t = 0.0;
        for i in 0..m {
            for j in 0..m {
                var_t += d[i] * cov[(i, j)] * d[j];
            }
        }
        Some((var_u + var_t).max(0.0).sqrt())
    };

    let mut curves = Vec::new();
    let l = obj.inner;
    for f in &data.fleets {
        let families: &[Family] = match f.kind {
            FleetKind::Catch => &[Family::CatchSd],
            FleetKind::Survey => &[Family::SurveySd, Family::Catchability],
        };
        for &family in families {
            let b = obj.map.block(BlockId { family, fleet: f.fleet }).expect("every fleet has its blocks");
            for i in 0..b.n_ages {
                let row = b.row(i);
                let (estimate, se) = if family == Family::Catchability {
                    let c: Vec<(usize, f64)> = row.iter().map(|&(k, w)| (l.q(k), w)).collect();
                    (c.iter().map(|&(k, w)| w * u[k]).sum(), inner_var(&c, &[]))
                } else {
                    let c: Vec<(usize, f64)> = row.iter().map(|&(k, w)| (obj.outer.variance + k, w)).collect();
                    let v: f64 = c.iter().map(|&(k, w)| w * theta[k]).sum();
                    let se = cov.as_ref().map(|cv| {
                        let mut s = 0.0;
                        for &(a, wa) in &c {
                            for &(bb, wb) in &c {
                                s += wa * wb * cv[(a, bb)];
                            }
                        }
                        s.max(0.0).sqrt()
                    });
                    (v, se)
                };
                curves.push(CurvePoint { block: family, fleet: f.fleet, age: data.ages.age_at(b.age_offset + i), estimate, se });
            }
        }
    }

    let states = obj.states(u);
    let ssb_est = ssb(&states, data, &obj.state_of_age);
    let aux = &data.aux;
    let ssb_series = (0..l.n_years)
        .map(|y| {
            let year = data.first_year + y as i32;
            let mut grad = Vec::new();
            let mut f_grad = vec![0.0; l.n_states];
            for a in 0..l.n_ages {
                let s = obj.state_of_age[a];
                let f = states.log_f[y][s].exp();
                let m = aux.natural_mortality.get(year, a);
                let pf = aux.prop_f.get(year, a);
                let pm = aux.prop_m.get(year, a);
                let term = states.log_n[y][a].exp()
                    * (-pf * f - pm * m).exp()
                    * aux.maturity.get(year, a)
                    * aux.stock_weight.get(year, a);
                grad.push((l.log_n(y, a), term));
                f_grad[s] += -term * pf * f;
            }
            for (s, g) in f_grad.iter().enumerate() {
                if *g != 0.0 {
                    grad.push((l.log_f(y, s), *g));
                }
            }
            YearValue { year, estimate: ssb_est[y], se: inner_var(&grad, &[]) }
        })
        .collect();

    let (rv, rq) = obj.log_lambdas(theta);
    let pp = obj.process_params(theta);
    let structure = obj.inner.structure();
    Ok(FitResult {
        build: build_id(),
        model: cfg.display_name(),
        stock: StockSummary::of(data),
        converged: ok,
        convergence: Convergence {
            converged: ok,
            reason,
            gradient_norm: gnorm,
            gradient_tolerance: tol,
            hessian_positive_definite: pd,
            optimizer_status: format!("{:?}", run.status),
            iterations: run.iterations,
            evaluations,
            restarts_used,
            runtime_seconds: runtime,
        },
        objective: e.total,
        nll_marginal: e.laplace,
        lambda_hat: Lambdas { variance: rv.map(f64::exp), catchability: rq.map(f64::exp) },
        outer,
        process: ProcessEstimates {
            sd_log_r: pp.sd_log_r,
            sd_log_n: pp.sd_log_n,
            sd_log_f: pp.sd_log_f,
            rho_f: pp.rho_f,
            f_state_of_age: pp.f_state_of_age,
        },
        curves,
        states,
        ssb: ssb_series,
        parameter_counts: obj.map.count_parameters(),
        curvature: Curvature {
            n_inner: structure.dim(),
            half_bandwidth: structure.half_bw,
            border: structure.n_border,
            log_det: e.inner.chol.log_det(),
        },
        inner_modes: u.clone(),
    })
}

/// Write `params.csv` next to a fit JSON path.
pub fn params_csv_path(json_path: &Path) -> std::path::PathBuf {
    json_path.with_file_name("params.csv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{simulate, TruthSpec};

    #[test]
    fn simulated_stock_converges() {
        let t = TruthSpec::example(6, 30, 2);
        let cfg = ModelConfig::default();
        let (data, _) = simulate(&cfg, &t, 1).unwrap();
        let r = fit(&data, &cfg).unwrap();
        assert!(r.converged, "{:?}", r.convergence);
        assert!(r.convergence.gradient_norm <= 1e-4);
        assert_eq!(r.curves.len(), 6 * 5);
        assert!(r.ssb.iter().all(|s| s.estimate > 0.0 && s.se.unwrap() > 0.0));

        let obj = SamObjective::new(&data, &cfg).unwrap();
        let start = evaluate(&obj, &obj.initial_outer(), &obj.initial_inner(), inner_options(&cfg), false).unwrap();
        assert!(r.objective <= start.total);

        let again = fit(&data, &cfg).unwrap();
        assert_eq!(r.objective, again.objective);
        assert_eq!(r.inner_modes, again.inner_modes);
    }

    #[test]
    fn one_year_is_too_small() {
        let data = crate::data::tests::grid_stock(3, 1, &[]);
        assert!(matches!(fit(&data, &ModelConfig::default()), Err(Error::DataTooSmall(_))));
    }
}
