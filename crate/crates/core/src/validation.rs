//! Cross- and forward-validation of competing configurations.
//!
//! A fold hides one year of observations, refits, and compares the model's
//! predictions for the hidden cells with what was observed.

use std::collections::BTreeSet;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Family, ModelConfig, RmseScale};
use crate::data::{FleetKind, StockData};
use crate::error::{Error, Result};
use crate::fit::{build_id, csv_err, fit, FitResult};
use crate::model::{catch_mean_log, survey_mean_log, CatchMean};

/// Surveys need this many years of data before a forward target year.
pub const MIN_PRIOR_SURVEY_YEARS: usize = 5;
/// Forward validation needs at least this many years.
pub const MIN_FORWARD_YEARS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FoldKind {
    Cv,
    Forward,
}

impl std::fmt::Display for FoldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FoldKind::Cv => "cv",
            FoldKind::Forward => "forward",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub kind: FoldKind,
    pub target_year: i32,
    /// Surveys removed from the training data (forward folds).
    pub dropped_surveys: Vec<usize>,
    /// Surveys whose target-year records stay in the training data because
    /// they are that survey's only data (cv folds).
    pub exempt_surveys: Vec<usize>,
}

impl FoldSpec {
    pub fn label(&self) -> String {
        format!("{}:{}", self.kind, self.target_year)
    }

    fn excluded(&self, fleet: usize) -> bool {
        self.dropped_surveys.contains(&fleet) || self.exempt_surveys.contains(&fleet)
    }

    /// The dataset the fold's model is fitted to.
    pub fn training_data(&self, data: &StockData) -> Result<StockData> {
        let base = match self.kind {
            FoldKind::Cv => data.clone(),
            FoldKind::Forward => data.truncate_years(self.target_year)?.drop_fleets(&self.dropped_surveys),
        };
        let masked: Vec<usize> = base.fleets.iter().map(|f| f.fleet).filter(|&f| !self.excluded(f)).collect();
        base.mask_observations(self.target_year, Some(&masked))
    }

    /// The configuration adjusted to the fold's surveys.
    pub fn training_config(&self, config: &ModelConfig) -> ModelConfig {
        config.without_fleets(&self.dropped_surveys)
    }

    /// Observed cells hidden from the fit: `(fleet, age, value)`.
    pub fn held_out(&self, data: &StockData) -> Vec<(usize, i32, f64)> {
        data.obs
            .iter()
            .filter(|r| r.year == self.target_year && !r.missing && !self.excluded(r.fleet))
            .map(|r| (r.fleet, r.age, r.value))
            .collect()
    }
}

/// Folds of one kind, in target-year order.
pub fn make_folds(data: &StockData, kind: FoldKind) -> Result<Vec<FoldSpec>> {
    let surveys: Vec<usize> = data.fleets.iter().filter(|f| f.kind == FleetKind::Survey).map(|f| f.fleet).collect();
    let years_of: Vec<Vec<i32>> = surveys.iter().map(|&f| data.years_with_data(f)).collect();
    match kind {
        FoldKind::Cv => {
            if data.n_years < 2 {
                return Err(Error::TooFewYears("cross-validation needs at least 2 years".into()));
            }
            Ok(data
                .years()
                .skip(1)
                .map(|y| FoldSpec {
                    kind,
                    target_year: y,
                    dropped_surveys: Vec::new(),
                    exempt_surveys: surveys
                        .iter()
                        .zip(&years_of)
                        .filter(|(_, ys)| ys.as_slice() == [y])
                        .map(|(&f, _)| f)
                        .collect(),
                })
                .collect())
        }
        FoldKind::Forward => {
            if data.n_years < MIN_FORWARD_YEARS {
                return Err(Error::TooFewYears(format!(
                    "forward validation needs at least {MIN_FORWARD_YEARS} years, got {}",
                    data.n_years
                )));
            }
            let n_targets = data.n_years.div_ceil(3);
            let first_target = data.last_year() - n_targets as i32 + 1;
            Ok((first_target..=data.last_year())
                .map(|y| FoldSpec {
                    kind,
                    target_year: y,
                    dropped_surveys: surveys
                        .iter()
                        .zip(&years_of)
                        .filter(|(_, ys)| ys.iter().filter(|&&v| v < y).count() < MIN_PRIOR_SURVEY_YEARS)
                        .map(|(&f, _)| f)
                        .collect(),
                    exempt_surveys: Vec::new(),
                })
                .collect())
        }
    }
}

/// A held-out cell with its prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellPrediction {
    pub fleet: usize,
    pub age: i32,
    pub observed: f64,
    pub predicted: f64,
}

fn fit_year_index(fit: &FitResult, year: i32) -> Result<usize> {
    let s = &fit.stock;
    if year < s.first_year || year > s.last_year {
        return Err(Error::YearOutOfRange(year));
    }
    Ok((year - s.first_year) as usize)
}

fn age_index(fit: &FitResult, age: i32) -> Result<usize> {
    if age < fit.stock.min_age || age > fit.stock.max_age {
        return Err(Error::invariant(format!("age {age} outside the fitted range"), "prediction"));
    }
    Ok((age - fit.stock.min_age) as usize)
}

/// Predicted value of one observation cell of `year` from a fit.
///
/// The median of the lognormal by default, its mean when `lognormal_mean`.
pub fn predict_cell(
    fit: &FitResult,
    data: &StockData,
    fleet: usize,
    year: i32,
    age: i32,
    lognormal_mean: bool,
) -> Result<f64> {
    let y = fit_year_index(fit, year)?;
    let a = age_index(fit, age)?;
    let meta = data.fleet(fleet).ok_or_else(|| Error::invariant(format!("unknown fleet {fleet}"), "prediction"))?;
    let log_n = fit.states.log_n[y][a];
    let log_f = fit.states.log_f[y][fit.process.f_state_of_age[a]];
    let m = data.aux.natural_mortality.get(year, a);
    let missing_curve = |family| Error::invariant(format!("no {family} estimate for fleet {fleet} age {age}"), "prediction");
    let (mean, sd_family) = match meta.kind {
        FleetKind::Catch => match catch_mean_log(log_n, log_f, m) {
            CatchMean::Log(v) => (v, Family::CatchSd),
            CatchMean::NoCatch => return Ok(0.0),
        },
        FleetKind::Survey => {
            let log_q = fit.curve(Family::Catchability, fleet, age).ok_or_else(|| missing_curve(Family::Catchability))?;
            (survey_mean_log(log_n, log_f, m, meta.timing, log_q), Family::SurveySd)
        }
    };
    let shift = if lognormal_mean {
        let log_sd = fit.curve(sd_family, fleet, age).ok_or_else(|| missing_curve(sd_family))?;
        0.5 * (2.0 * log_sd).exp()
    } else {
        0.0
    };
    Ok((mean + shift).exp())
}

/// Predictions for every held-out cell of a fold.
pub fn predict_fold(fit: &FitResult, fold: &FoldSpec, data: &StockData, lognormal_mean: bool) -> Result<Vec<CellPrediction>> {
    if !fit.converged {
        return Err(Error::NotConverged(fit.convergence.reason.clone()));
    }
    fold.held_out(data)
        .into_iter()
        .map(|(fleet, age, observed)| {
            let predicted = predict_cell(fit, data, fleet, fold.target_year, age, lognormal_mean)?;
            Ok(CellPrediction { fleet, age, observed, predicted })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalForecast {
    pub year: i32,
    /// Multiplier applied to the year's fishing mortality.
    pub f_multiplier: f64,
    pub target_biomass: f64,
    pub biomass: f64,
    /// Catch numbers by age index.
    pub catch: Vec<f64>,
}

/// Baranov catch per age at `s·F`, plus `d catch / d s`.
fn scaled_catch(s: f64, f: &[f64], m: &[f64], n: &[f64]) -> (Vec<f64>, Vec<f64>) {
    f.iter()
        .zip(m)
        .zip(n)
        .map(|((&fa, &ma), &na)| {
            let sf = s * fa;
            let z = sf + ma;
            if z <= 0.0 {
                return (0.0, na * fa);
            }
            let surv = (-z).exp();
            let death = -(-z).exp_m1();
            let c = sf / z * death * na;
            let dc = fa * na * (ma / (z * z) * death + sf / z * surv);
            (c, dc)
        })
        .unzip()
}

/// Scale year `year`'s fishing mortality so the total catch biomass equals
/// `target_biomass`, and return the implied catch at age.
pub fn conditional_catch_forecast(
    fit: &FitResult,
    data: &StockData,
    year: i32,
    target_biomass: f64,
) -> Result<ConditionalForecast> {
    if !(target_biomass > 0.0) || !target_biomass.is_finite() {
        return Err(Error::invariant("target catch biomass must be positive", "conditional forecast"));
    }
    let y = fit_year_index(fit, year)?;
    let n_ages = fit.states.log_n[y].len();
    let n: Vec<f64> = fit.states.log_n[y].iter().map(|v| v.exp()).collect();
    let f: Vec<f64> = (0..n_ages).map(|a| fit.states.log_f[y][fit.process.f_state_of_age[a]].exp()).collect();
    let m: Vec<f64> = (0..n_ages).map(|a| data.aux.natural_mortality.get(year, a)).collect();
    let w: Vec<f64> = (0..n_ages).map(|a| data.aux.catch_weight.get(year, a)).collect();
    let biomass = |s: f64| -> (f64, f64) {
        let (c, dc) = scaled_catch(s, &f, &m, &n);
        (c.iter().zip(&w).map(|(x, y)| x * y).sum(), dc.iter().zip(&w).map(|(x, y)| x * y).sum())
    };
    // As s grows every fished cohort is caught entirely.
    let attainable: f64 = (0..n_ages).filter(|&a| f[a] > 0.0).map(|a| w[a] * n[a]).sum();
    if target_biomass >= attainable {
        return Err(Error::NoRoot { requested: target_biomass, attainable });
    }
    // Newton on t = log s with a maintained bracket.
    let g = |t: f64| -> (f64, f64) {
        let s = t.exp();
        let (b, db) = biomass(s);
        (b.ln() - target_biomass.ln(), s * db / b)
    };
    let (mut lo, mut hi) = (-1.0f64, 1.0f64);
    while g(lo).0 > 0.0 {
        lo -= 2.0 * (hi - lo);
        if lo < -700.0 {
            return Err(Error::invariant("catch biomass does not vanish as F goes to zero", "conditional forecast"));
        }
    }
    while g(hi).0 < 0.0 {
        hi += 2.0 * (hi - lo);
        if hi > 700.0 {
            return Err(Error::NoRoot { requested: target_biomass, attainable });
        }
    }
    let mut t = 0.0f64.clamp(lo, hi);
    for _ in 0..200 {
        let (v, d) = g(t);
        if v.abs() <= 1e-14 {
            break;
        }
        if v > 0.0 {
            hi = t;
        } else {
            lo = t;
        }
        let newton = t - v / d;
        t = if d > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * t.abs().max(1.0) {
            break;
        }
    }
    let s = t.exp();
    let (catch, _) = scaled_catch(s, &f, &m, &n);
    let total = biomass(s).0;
    Ok(ConditionalForecast { year, f_multiplier: s, target_biomass, biomass: total, catch })
}

/// Root mean squared difference, on the raw or log scale.
pub fn rmse(pairs: &[(f64, f64)], scale: RmseScale) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptySet("no prediction/observation pairs".into()));
    }
    let t = |x: f64| match scale {
        RmseScale::Raw => x,
        RmseScale::Log => x.ln(),
    };
    let ss: f64 = pairs.iter().map(|&(p, o)| (t(p) - t(o)).powi(2)).sum();
    Ok((ss / pairs.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    CvCatch,
    CvSurvey,
    FwdCatch,
    FwdSurvey,
    /// Catch at age in forward folds, given the year's observed catch biomass.
    FwdConditional,
}

impl Criterion {
    pub const ALL: [Criterion; 5] =
        [Criterion::CvCatch, Criterion::CvSurvey, Criterion::FwdCatch, Criterion::FwdSurvey, Criterion::FwdConditional];

    pub fn kind(self) -> FoldKind {
        match self {
            Criterion::CvCatch | Criterion::CvSurvey => FoldKind::Cv,
            _ => FoldKind::Forward,
        }
    }
}

impl std::fmt::Display for Criterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Criterion::CvCatch => "cv_catch",
            Criterion::CvSurvey => "cv_survey",
            Criterion::FwdCatch => "fwd_catch",
            Criterion::FwdSurvey => "fwd_survey",
            Criterion::FwdConditional => "fwd_conditional",
        })
    }
}

/// One model fitted to one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRun {
    pub model: String,
    pub fold: FoldSpec,
    pub converged: bool,
    pub error: Option<String>,
    pub objective: Option<f64>,
    pub catch: Vec<CellPrediction>,
    pub survey: Vec<CellPrediction>,
    pub conditional: Vec<CellPrediction>,
    pub conditional_note: Option<String>,
}

impl FoldRun {
    fn cells(&self, criterion: Criterion) -> &[CellPrediction] {
        match criterion {
            Criterion::CvCatch | Criterion::FwdCatch => &self.catch,
            Criterion::CvSurvey | Criterion::FwdSurvey => &self.survey,
            Criterion::FwdConditional => &self.conditional,
        }
    }

    fn pairs(&self, criterion: Criterion) -> Vec<(f64, f64)> {
        if criterion.kind() != self.fold.kind {
            return Vec::new();
        }
        self.cells(criterion).iter().map(|c| (c.predicted, c.observed)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TallyRow {
    pub model: String,
    pub converged: usize,
    pub total: usize,
}

/// Converged counts per model in order of first appearance, then an `All`
/// row counting folds on which every model converged.
pub fn tally_convergence(runs: &[(String, String, bool)]) -> Vec<TallyRow> {
    let mut models: Vec<String> = Vec::new();
    let mut folds: BTreeSet<String> = BTreeSet::new();
    for (m, f, _) in runs {
        if !models.contains(m) {
            models.push(m.clone());
        }
        folds.insert(f.clone());
    }
    let mut rows: Vec<TallyRow> = models
        .iter()
        .map(|m| {
            let mine: Vec<_> = runs.iter().filter(|r| &r.0 == m).collect();
            TallyRow { model: m.clone(), converged: mine.iter().filter(|r| r.2).count(), total: mine.len() }
        })
        .collect();
    let all = folds
        .iter()
        .filter(|f| models.iter().all(|m| runs.iter().any(|r| &r.0 == m && &r.1 == *f && r.2)))
        .count();
    rows.push(TallyRow { model: "All".into(), converged: all, total: folds.len() });
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionSummary {
    pub model: String,
    pub criterion: Criterion,
    /// Pooled over the held-out cells of folds on which every model converged.
    pub rmse: Option<f64>,
    pub rmse_raw: Option<f64>,
    pub rmse_log: Option<f64>,
    pub n_cells: usize,
    pub n_folds: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizedRmse {
    pub model: String,
    pub criterion: Criterion,
    /// Model RMSE over baseline RMSE; below 1 means the model predicts better.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub build: String,
    pub stock: String,
    pub models: Vec<String>,
    pub baseline: Option<String>,
    pub rmse_scale: RmseScale,
    pub lognormal_mean: bool,
    pub runs: Vec<FoldRun>,
    pub convergence_cv: Vec<TallyRow>,
    pub convergence_forward: Vec<TallyRow>,
    pub summary: Vec<CriterionSummary>,
    pub standardized: Vec<StandardizedRmse>,
}

impl EvalReport {
    /// Assemble a report from fold runs and pool the RMSE summaries.
    pub fn from_runs(
        stock: &str,
        models: Vec<String>,
        runs: Vec<FoldRun>,
        rmse_scale: RmseScale,
        lognormal_mean: bool,
    ) -> Self {
        let tally = |kind| {
            let list: Vec<(String, String, bool)> = runs
                .iter()
                .filter(|r| r.fold.kind == kind)
                .map(|r| (r.model.clone(), r.fold.label(), r.converged))
                .collect();
            if list.is_empty() {
                Vec::new()
            } else {
                tally_convergence(&list)
            }
        };
        let convergence_cv = tally(FoldKind::Cv);
        let convergence_forward = tally(FoldKind::Forward);
        let mut report = EvalReport {
            build: build_id(),
            stock: stock.to_string(),
            models,
            baseline: None,
            rmse_scale,
            lognormal_mean,
            runs,
            convergence_cv,
            convergence_forward,
            summary: Vec::new(),
            standardized: Vec::new(),
        };
        report.summary = report.pooled_summary();
        report
    }

    /// Fold labels on which every model converged.
    pub fn shared_folds(&self) -> BTreeSet<String> {
        let labels: BTreeSet<String> = self.runs.iter().map(|r| r.fold.label()).collect();
        labels
            .into_iter()
            .filter(|l| {
                self.models.iter().all(|m| self.runs.iter().any(|r| &r.model == m && &r.fold.label() == l && r.converged))
            })
            .collect()
    }

    fn pooled_summary(&self) -> Vec<CriterionSummary> {
        let shared = self.shared_folds();
        let mut out = Vec::new();
        for m in &self.models {
            for c in Criterion::ALL {
                let runs: Vec<&FoldRun> =
                    self.runs.iter().filter(|r| &r.model == m && shared.contains(&r.fold.label())).collect();
                let pairs: Vec<(f64, f64)> = runs.iter().flat_map(|r| r.pairs(c)).collect();
                let n_folds = runs.iter().filter(|r| !r.pairs(c).is_empty()).count();
                if n_folds == 0 && runs.iter().all(|r| r.fold.kind != c.kind()) {
                    continue;
                }
                let raw = rmse(&pairs, RmseScale::Raw).ok();
                let log = rmse(&pairs, RmseScale::Log).ok();
                let primary = match self.rmse_scale {
                    RmseScale::Raw => raw,
                    RmseScale::Log => log,
                };
                out.push(CriterionSummary {
                    model: m.clone(),
                    criterion: c,
                    rmse: primary,
                    rmse_raw: raw,
                    rmse_log: log,
                    n_cells: pairs.len(),
                    n_folds,
                });
            }
        }
        out
    }

    pub fn summary_for(&self, model: &str, criterion: Criterion) -> Option<&CriterionSummary> {
        self.summary.iter().find(|s| s.model == model && s.criterion == criterion)
    }

    pub fn ratio(&self, model: &str, criterion: Criterion) -> Option<f64> {
        self.standardized.iter().find(|s| s.model == model && s.criterion == criterion).map(|s| s.ratio)
    }

    /// Per-fold RMSE rows: `(model, fold, criterion, rmse, converged)`.
    pub fn fold_rows(&self) -> Vec<(String, String, Criterion, Option<f64>, bool)> {
        let mut rows = Vec::new();
        for r in &self.runs {
            for c in Criterion::ALL.into_iter().filter(|c| c.kind() == r.fold.kind) {
                let v = rmse(&r.pairs(c), self.rmse_scale).ok();
                if c == Criterion::FwdConditional && v.is_none() && r.converged {
                    continue;
                }
                rows.push((r.model.clone(), r.fold.label(), c, v, r.converged));
            }
        }
        rows
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;

        let mut w = csv::Writer::from_path(dir.join("report.csv")).map_err(csv_err)?;
        w.write_record(["stock", "model", "fold", "criterion", "rmse", "converged"]).map_err(csv_err)?;
        for (model, fold, c, v, conv) in self.fold_rows() {
            w.write_record([
                self.stock.clone(),
                model,
                fold,
                c.to_string(),
                v.map_or_else(|| "NA".into(), |x| x.to_string()),
                conv.to_string(),
            ])
            .map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("boxplot_data.csv")).map_err(csv_err)?;
        w.write_record(["stock", "model", "criterion", "standardized_rmse"]).map_err(csv_err)?;
        for s in &self.standardized {
            w.write_record([self.stock.clone(), s.model.clone(), s.criterion.to_string(), s.ratio.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("convergence.csv")).map_err(csv_err)?;
        w.write_record(["kind", "model", "converged", "total"]).map_err(csv_err)?;
        for (kind, rows) in [("cv", &self.convergence_cv), ("forward", &self.convergence_forward)] {
            for t in rows {
                w.write_record([kind.to_string(), t.model.clone(), t.converged.to_string(), t.total.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Ratios of every model's pooled RMSE to the baseline's, per criterion.
pub fn standardize(report: &EvalReport, baseline: &str) -> Result<EvalReport> {
    if !report.models.iter().any(|m| m == baseline) {
        return Err(Error::BaselineMissing(baseline.to_string()));
    }
    let mut out = report.clone();
    out.baseline = Some(baseline.to_string());
    out.standardized = Vec::new();
    for c in Criterion::ALL {
        let Some(base) = report.summary_for(baseline, c).and_then(|s| s.rmse) else { continue };
        for m in &report.models {
            if let Some(v) = report.summary_for(m, c).and_then(|s| s.rmse) {
                let ratio = if m == baseline { 1.0 } else { v / base };
                out.standardized.push(StandardizedRmse { model: m.clone(), criterion: c, ratio });
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Cv,
    Forward,
    Both,
}

impl Mode {
    pub fn kinds(self) -> Vec<FoldKind> {
        match self {
            Mode::Cv => vec![FoldKind::Cv],
            Mode::Forward => vec![FoldKind::Forward],
            Mode::Both => vec![FoldKind::Cv, FoldKind::Forward],
        }
    }
}

#[derive(Debug, Clone)]
pub struct ValidationOptions {
    pub mode: Mode,
    /// Worker threads; `None` uses all cores.
    pub jobs: Option<usize>,
    pub rmse_scale: RmseScale,
    pub lognormal_mean: bool,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions { mode: Mode::Both, jobs: None, rmse_scale: RmseScale::Raw, lognormal_mean: false }
    }
}

/// Fit one model to one fold and predict the held-out cells.
pub fn run_fold(data: &StockData, config: &ModelConfig, fold: &FoldSpec, lognormal_mean: bool) -> FoldRun {
    let model = config.display_name();
    let mut run = FoldRun {
        model,
        fold: fold.clone(),
        converged: false,
        error: None,
        objective: None,
        catch: Vec::new(),
        survey: Vec::new(),
        conditional: Vec::new(),
        conditional_note: None,
    };
    let fitted = fold.training_data(data).and_then(|train| fit(&train, &fold.training_config(config)));
    let fitted = match fitted {
        Ok(v) => v,
        Err(e) => {
            run.error = Some(e.to_string());
            return run;
        }
    };
    run.converged = fitted.converged;
    run.objective = Some(fitted.objective);
    if !fitted.converged {
        run.error = Some(fitted.convergence.reason.clone());
        return run;
    }
    match predict_fold(&fitted, fold, data, lognormal_mean) {
        Ok(cells) => {
            let is_catch = |f: usize| data.fleet(f).is_some_and(|m| m.kind == FleetKind::Catch);
            let (catch, survey): (Vec<_>, Vec<_>) = cells.into_iter().partition(|c| is_catch(c.fleet));
            run.catch = catch;
            run.survey = survey;
        }
        Err(e) => {
            run.error = Some(e.to_string());
            run.converged = false;
            return run;
        }
    }
    if fold.kind == FoldKind::Forward {
        match conditional_cells(&fitted, data, fold, &run.catch) {
            Ok(cells) => run.conditional = cells,
            Err(e) => run.conditional_note = Some(e.to_string()),
        }
    }
    run
}

/// Conditional catch-at-age predictions given the observed catch biomass of the target year.
fn conditional_cells(
    fitted: &FitResult,
    data: &StockData,
    fold: &FoldSpec,
    catch: &[CellPrediction],
) -> Result<Vec<CellPrediction>> {
    let year = fold.target_year;
    let n_ages = data.n_ages();
    if catch.len() != n_ages {
        return Err(Error::EmptySet(format!("catch at age in {year} is incomplete")));
    }
    let biomass: f64 = catch
        .iter()
        .map(|c| {
            let a = data.ages.index(c.age).expect("held-out age inside the stock");
            data.aux.catch_weight.get(year, a) * c.observed
        })
        .sum();
    let forecast = conditional_catch_forecast(fitted, data, year, biomass)?;
    Ok(catch
        .iter()
        .map(|c| {
            let a = data.ages.index(c.age).expect("held-out age inside the stock");
            CellPrediction { fleet: c.fleet, age: c.age, observed: c.observed, predicted: forecast.catch[a] }
        })
        .collect())
}

/// Run every fold of the requested kinds for every model. The first model is
/// the baseline of the standardized ratios.
pub fn run_validation(
    stock: &str,
    data: &StockData,
    models: &[ModelConfig],
    options: &ValidationOptions,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::ConfigInvalid("no models to validate".into()));
    }
    let names: Vec<String> = models.iter().map(|m| m.display_name()).collect();
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        return Err(Error::ConfigInvalid(format!("model names must be distinct: {names:?}")));
    }
    for m in models {
        m.validate(data)?;
    }
    let mut folds = Vec::new();
    for kind in options.mode.kinds() {
        folds.extend(make_folds(data, kind)?);
    }
    let jobs: Vec<(&FoldSpec, &ModelConfig)> = folds.iter().flat_map(|f| models.iter().map(move |m| (f, m))).collect();
    let work = || -> Vec<FoldRun> {
        jobs.par_iter().map(|(f, m)| run_fold(data, m, f, options.lognormal_mean)).collect()
    };
    let runs = match options.jobs {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::ConfigInvalid(format!("thread pool: {e}")))?
            .install(work),
        None => work(),
    };
    let report = EvalReport::from_runs(stock, names.clone(), runs, options.rmse_scale, options.lognormal_mean);
    standardize(&report, &names[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::tests::grid_stock;

    #[test]
    fn cv_folds_skip_the_first_year() {
        let data = grid_stock(3, 24, &[(0.5, 0, 2)]);
        let folds = make_folds(&data, FoldKind::Cv).unwrap();
        assert_eq!(folds.len(), 23);
        assert_eq!(folds[0].target_year, 2001);
        assert_eq!(folds.last().unwrap().target_year, 2023);
    }

    #[test]
    fn forward_folds_cover_the_last_third() {
        let data = grid_stock(3, 24, &[(0.5, 0, 2)]);
        let folds = make_folds(&data, FoldKind::Forward).unwrap();
        let years: Vec<i32> = folds.iter().map(|f| f.target_year).collect();
        assert_eq!(years, (2016..=2023).collect::<Vec<_>>());
        let short = grid_stock(3, 5, &[]);
        assert!(matches!(make_folds(&short, FoldKind::Forward), Err(Error::TooFewYears(_))));
    }

    #[test]
    fn rmse_arithmetic() {
        assert_eq!(rmse(&[(1.0, 1.0), (4.0, 4.0)], RmseScale::Raw).unwrap(), 0.0);
        let v = rmse(&[(1.0, 2.0), (3.0, 5.0)], RmseScale::Raw).unwrap();
        assert!((v - (2.5f64).sqrt()).abs() < 1e-15);
        let logged = rmse(&[(1.0f64.ln(), 2.0f64.ln()), (3.0f64.ln(), 5.0f64.ln())], RmseScale::Raw).unwrap();
        assert_eq!(rmse(&[(1.0, 2.0), (3.0, 5.0)], RmseScale::Log).unwrap(), logged);
        assert!(matches!(rmse(&[], RmseScale::Raw), Err(Error::EmptySet(_))));
    }

    #[test]
    fn tally_rows() {
        let mut runs = Vec::new();
        for m in ["a", "b", "c", "d"] {
            for f in 0..10 {
                let ok = !(m == "c" && f < 2);
                runs.push((m.to_string(), f.to_string(), ok));
            }
        }
        let t = tally_convergence(&runs);
        assert_eq!(t.len(), 5);
        assert_eq!(t[2], TallyRow { model: "c".into(), converged: 8, total: 10 });
        assert_eq!(t[4].model, "All");
        assert!(t[4].converged <= 8);
        let all_ok: Vec<_> = runs.iter().map(|(m, f, _)| (m.clone(), f.clone(), true)).collect();
        assert_eq!(tally_convergence(&all_ok)[4].converged, 10);
    }
}
