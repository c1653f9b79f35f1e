//! Stock data model and CSV input/output.
//!
//! A stock directory holds `obs.csv` (`year,fleet,age,value`), `fleets.csv`
//! (`fleet,kind,timing`) and one `year,<age>...` table per auxiliary input.
//! Internally the catch fleet is always id 0 and surveys are numbered 1..J in
//! order of their first year with data.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Contiguous age range; `max_age` is the plus group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgeRange {
    pub min_age: i32,
    pub max_age: i32,
}

impl AgeRange {
    pub fn new(min_age: i32, max_age: i32) -> Result<Self> {
        if min_age < 0 || max_age <= min_age {
            return Err(Error::invariant(
                format!("need 0 <= min_age < max_age, got {min_age}..{max_age}"),
                "ages",
            ));
        }
        Ok(AgeRange { min_age, max_age })
    }

    /// Number of age groups, A.
    pub fn count(&self) -> usize {
        (self.max_age - self.min_age + 1) as usize
    }

    /// Zero-based position of a data age.
    pub fn index(&self, age: i32) -> Option<usize> {
        (age >= self.min_age && age <= self.max_age).then(|| (age - self.min_age) as usize)
    }

    pub fn age_at(&self, index: usize) -> i32 {
        self.min_age + index as i32
    }

    /// Internal one-based ages 1..=A.
    pub fn internal_ages(&self) -> impl Iterator<Item = usize> {
        1..=self.count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FleetKind {
    Catch,
    Survey,
}

impl fmt::Display for FleetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FleetKind::Catch => write!(f, "catch"),
            FleetKind::Survey => write!(f, "survey"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetMeta {
    pub fleet: usize,
    pub kind: FleetKind,
    /// Fraction of the year elapsed when the fleet samples.
    pub timing: f64,
    pub first_year: i32,
    pub last_year: i32,
    /// Age sub-range covered by the fleet's records.
    pub min_age: i32,
    pub max_age: i32,
}

impl FleetMeta {
    pub fn age_count(&self) -> usize {
        (self.max_age - self.min_age + 1) as usize
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ObsRecord {
    pub year: i32,
    pub fleet: usize,
    pub age: i32,
    /// NaN when the file held `NA`; retained when masked.
    pub value: f64,
    pub missing: bool,
}

impl PartialEq for ObsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.year == other.year
            && self.fleet == other.fleet
            && self.age == other.age
            && self.missing == other.missing
            && (self.value.to_bits() == other.value.to_bits()
                || (self.value.is_nan() && other.value.is_nan()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AuxKind {
    NaturalMortality,
    StockWeight,
    CatchWeight,
    Maturity,
    PropFBeforeSpawn,
    PropMBeforeSpawn,
}

impl AuxKind {
    pub const ALL: [AuxKind; 6] = [
        AuxKind::NaturalMortality,
        AuxKind::StockWeight,
        AuxKind::CatchWeight,
        AuxKind::Maturity,
        AuxKind::PropFBeforeSpawn,
        AuxKind::PropMBeforeSpawn,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            AuxKind::NaturalMortality => "natmort.csv",
            AuxKind::StockWeight => "stockweight.csv",
            AuxKind::CatchWeight => "catchweight.csv",
            AuxKind::Maturity => "maturity.csv",
            AuxKind::PropFBeforeSpawn => "propf.csv",
            AuxKind::PropMBeforeSpawn => "propm.csv",
        }
    }

    fn is_proportion(self) -> bool {
        matches!(
            self,
            AuxKind::Maturity | AuxKind::PropFBeforeSpawn | AuxKind::PropMBeforeSpawn
        )
    }
}

/// Year-by-age table. Lookups past the last row reuse the last row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxTable {
    pub kind: AuxKind,
    pub first_year: i32,
    pub min_age: i32,
    /// One row per year, one column per age.
    pub values: Vec<Vec<f64>>,
}

impl AuxTable {
    /// Table with the same row for every year in `first_year..first_year + n_years`.
    pub fn constant_rows(kind: AuxKind, first_year: i32, min_age: i32, row: &[f64], n_years: usize) -> Self {
        AuxTable {
            kind,
            first_year,
            min_age,
            values: vec![row.to_vec(); n_years],
        }
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.values.len() as i32 - 1
    }

    /// Value at (year, zero-based age index). Years beyond the table repeat the final row.
    pub fn get(&self, year: i32, age_index: usize) -> f64 {
        let row = (year - self.first_year).clamp(0, self.values.len() as i32 - 1) as usize;
        self.values[row][age_index]
    }

    fn validate(&self, ages: &AgeRange, first_year: i32, last_year: i32) -> Result<()> {
        let loc = self.kind.file_name();
        if self.min_age != ages.min_age || self.values.iter().any(|r| r.len() != ages.count()) {
            return Err(Error::invariant("age columns do not match the stock age range", loc));
        }
        if self.first_year > first_year || self.last_year() < last_year {
            return Err(Error::invariant(
                format!("table covers {}..{} but data span {first_year}..{last_year}", self.first_year, self.last_year()),
                loc,
            ));
        }
        for (r, row) in self.values.iter().enumerate() {
            for (c, &v) in row.iter().enumerate() {
                let ok = v.is_finite() && v >= 0.0 && (!self.kind.is_proportion() || v <= 1.0);
                if !ok {
                    return Err(Error::invariant(
                        format!("value {v} out of range"),
                        format!("{loc} year {} age {}", self.first_year + r as i32, ages.age_at(c)),
                    ));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuxSet {
    pub natural_mortality: AuxTable,
    pub stock_weight: AuxTable,
    pub catch_weight: AuxTable,
    pub maturity: AuxTable,
    pub prop_f: AuxTable,
    pub prop_m: AuxTable,
}

impl AuxSet {
    pub fn get(&self, kind: AuxKind) -> &AuxTable {
        match kind {
            AuxKind::NaturalMortality => &self.natural_mortality,
            AuxKind::StockWeight => &self.stock_weight,
            AuxKind::CatchWeight => &self.catch_weight,
            AuxKind::Maturity => &self.maturity,
            AuxKind::PropFBeforeSpawn => &self.prop_f,
            AuxKind::PropMBeforeSpawn => &self.prop_m,
        }
    }

    fn tables(&self) -> [&AuxTable; 6] {
        AuxKind::ALL.map(|k| self.get(k))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StockData {
    pub ages: AgeRange,
    pub first_year: i32,
    pub n_years: usize,
    /// Catch fleet first, then surveys in order of first year.
    pub fleets: Vec<FleetMeta>,
    pub obs: Vec<ObsRecord>,
    pub aux: AuxSet,
}

impl StockData {
    /// Assemble and validate a dataset from in-memory parts.
    ///
    /// Fleets are renumbered (catch 0, surveys by first year of data) and
    /// their timing is taken from `fleet_timing` keyed by the ids used in `obs`.
    pub fn from_parts(
        ages: AgeRange,
        fleet_kinds: &BTreeMap<usize, (FleetKind, f64)>,
        obs: Vec<ObsRecord>,
        aux: AuxSet,
    ) -> Result<Self> {
        let catch_ids: Vec<usize> = fleet_kinds
            .iter()
            .filter(|(_, (k, _))| *k == FleetKind::Catch)
            .map(|(&id, _)| id)
            .collect();
        if catch_ids.len() != 1 {
            return Err(Error::invariant(
                format!("exactly one catch fleet required, found {}", catch_ids.len()),
                "fleets.csv",
            ));
        }
        for (&id, &(kind, timing)) in fleet_kinds {
            let ok = match kind {
                FleetKind::Catch => timing == 0.0,
                FleetKind::Survey => (0.0..1.0).contains(&timing),
            };
            if !ok {
                return Err(Error::invariant(
                    format!("timing {timing} invalid for {kind} fleet"),
                    format!("fleets.csv fleet {id}"),
                ));
            }
        }

        let mut seen = HashSet::new();
        for (i, r) in obs.iter().enumerate() {
            let loc = format!("obs.csv record {} (year {}, fleet {}, age {})", i + 1, r.year, r.fleet, r.age);
            if !fleet_kinds.contains_key(&r.fleet) {
                return Err(Error::invariant("unknown fleet", loc));
            }
            if ages.index(r.age).is_none() {
                return Err(Error::invariant("age outside stock age range", loc));
            }
            if !r.missing && !(r.value.is_finite() && r.value > 0.0) {
                return Err(Error::invariant(format!("value {} must be positive", r.value), loc));
            }
            if !seen.insert((r.year, r.fleet, r.age)) {
                return Err(Error::invariant("duplicate (year, fleet, age)", loc));
            }
        }

        let catch_id = catch_ids[0];
        let catch_years: Vec<i32> = obs
            .iter()
            .filter(|r| r.fleet == catch_id && !r.missing)
            .map(|r| r.year)
            .collect();
        let (first_year, last_year) = match (catch_years.iter().min(), catch_years.iter().max()) {
            (Some(&a), Some(&b)) => (a, b),
            _ => return Err(Error::invariant("no catch observations", "obs.csv")),
        };
        let with_catch: HashSet<i32> = catch_years.into_iter().collect();
        if let Some(gap) = (first_year..=last_year).find(|y| !with_catch.contains(y)) {
            return Err(Error::invariant(
                "years must be contiguous with catch data in every year",
                format!("obs.csv year {gap}"),
            ));
        }

        // Survey rows outside the catch span cannot be linked to modelled years.
        let before = obs.len();
        let obs: Vec<ObsRecord> = obs
            .into_iter()
            .filter(|r| r.year >= first_year && r.year <= last_year)
            .collect();
        if obs.len() < before {
            log::warn!("dropped {} survey records outside catch years {first_year}..{last_year}", before - obs.len());
        }

        let mut metas: Vec<(usize, FleetMeta)> = Vec::new();
        for (&id, &(kind, timing)) in fleet_kinds {
            let recs: Vec<&ObsRecord> = obs.iter().filter(|r| r.fleet == id).collect();
            if recs.is_empty() {
                return Err(Error::invariant("fleet has no observations", format!("fleets.csv fleet {id}")));
            }
            let fy = recs.iter().map(|r| r.year).min().unwrap();
            let ly = recs.iter().map(|r| r.year).max().unwrap();
            let amin = recs.iter().map(|r| r.age).min().unwrap();
            let amax = recs.iter().map(|r| r.age).max().unwrap();
            metas.push((
                id,
                FleetMeta {
                    fleet: 0,
                    kind,
                    timing,
                    first_year: fy,
                    last_year: ly,
                    min_age: amin,
                    max_age: amax,
                },
            ));
        }
        metas.sort_by_key(|(id, m)| (m.kind == FleetKind::Survey, m.first_year, *id));
        let mut renumber = BTreeMap::new();
        let fleets: Vec<FleetMeta> = metas
            .into_iter()
            .enumerate()
            .map(|(new, (old, mut m))| {
                renumber.insert(old, new);
                m.fleet = new;
                m
            })
            .collect();
        let mut obs: Vec<ObsRecord> = obs
            .into_iter()
            .map(|mut r| {
                r.fleet = renumber[&r.fleet];
                r
            })
            .collect();
        obs.sort_by_key(|r| (r.fleet, r.year, r.age));

        let data = StockData {
            ages,
            first_year,
            n_years: (last_year - first_year + 1) as usize,
            fleets,
            obs,
            aux,
        };
        for t in data.aux.tables() {
            t.validate(&data.ages, first_year, last_year)?;
        }
        Ok(data)
    }

    pub fn last_year(&self) -> i32 {
        self.first_year + self.n_years as i32 - 1
    }

    pub fn years(&self) -> impl Iterator<Item = i32> + '_ {
        self.first_year..=self.last_year()
    }

    pub fn year_index(&self, year: i32) -> Option<usize> {
        (year >= self.first_year && year <= self.last_year()).then(|| (year - self.first_year) as usize)
    }

    pub fn n_ages(&self) -> usize {
        self.ages.count()
    }

    /// Number of surveys, J.
    pub fn n_surveys(&self) -> usize {
        self.fleets.iter().filter(|f| f.kind == FleetKind::Survey).count()
    }

    pub fn fleet(&self, id: usize) -> Option<&FleetMeta> {
        self.fleets.iter().find(|f| f.fleet == id)
    }

    /// Number of non-missing observations.
    pub fn n_present(&self) -> usize {
        self.obs.iter().filter(|r| !r.missing).count()
    }

    /// Copy with every record of `year` (optionally restricted to `fleets`) flagged missing.
    pub fn mask_observations(&self, year: i32, fleets: Option<&[usize]>) -> Result<StockData> {
        if self.year_index(year).is_none() {
            return Err(Error::YearOutOfRange(year));
        }
        let mut out = self.clone();
        for r in out.obs.iter_mut() {
            if r.year == year && fleets.is_none_or(|fs| fs.contains(&r.fleet)) {
                r.missing = true;
            }
        }
        Ok(out)
    }

    /// Copy restricted to years `..=last_year`. Fleet ids are kept.
    pub fn truncate_years(&self, last_year: i32) -> Result<StockData> {
        let idx = self.year_index(last_year).ok_or(Error::YearOutOfRange(last_year))?;
        let mut out = self.clone();
        out.n_years = idx + 1;
        out.obs.retain(|r| r.year <= last_year);
        Ok(out)
    }

    /// Copy without the given survey fleets. Remaining fleet ids are kept.
    pub fn drop_fleets(&self, fleets: &[usize]) -> StockData {
        let mut out = self.clone();
        out.fleets.retain(|f| f.kind == FleetKind::Catch || !fleets.contains(&f.fleet));
        out.obs.retain(|r| out.fleets.iter().any(|f| f.fleet == r.fleet));
        out
    }

    /// Years in which a fleet has at least one non-missing record.
    pub fn years_with_data(&self, fleet: usize) -> Vec<i32> {
        let mut ys: Vec<i32> = self
            .obs
            .iter()
            .filter(|r| r.fleet == fleet && !r.missing)
            .map(|r| r.year)
            .collect();
        ys.sort_unstable();
        ys.dedup();
        ys
    }
}

fn parse_err(file: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        file: file.to_string(),
        line,
        message: message.into(),
    }
}

fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<(usize, Vec<String>)>)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let file = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(&file, 1, e.to_string()))?;
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_err(&file, 1, e.to_string()))?
        .iter()
        .map(|s| s.trim_start_matches('\u{feff}').to_string())
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(&file, line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        if rec.iter().all(|f| f.is_empty()) {
            continue;
        }
        rows.push((line, rec.iter().map(str::to_string).collect()));
    }
    Ok((header, rows))
}

fn parse_f64(file: &str, line: usize, field: &str) -> Result<f64> {
    field
        .parse::<f64>()
        .map_err(|_| parse_err(file, line, format!("invalid number {field:?}")))
}

fn parse_int(file: &str, line: usize, field: &str) -> Result<i64> {
    let v = parse_f64(file, line, field)?;
    if v.fract() != 0.0 || !v.is_finite() {
        return Err(parse_err(file, line, format!("expected an integer, got {field:?}")));
    }
    Ok(v as i64)
}

fn expect_header(file: &str, header: &[String], expected: &[&str]) -> Result<()> {
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| h != e) {
        return Err(parse_err(file, 1, format!("expected header {}", expected.join(","))));
    }
    Ok(())
}

fn load_aux(dir: &Path, kind: AuxKind) -> Result<AuxTable> {
    let file = kind.file_name();
    let (header, rows) = read_csv(&dir.join(file))?;
    if header.first().map(String::as_str) != Some("year") || header.len() < 2 {
        return Err(parse_err(file, 1, "expected header year,<age1>,<age2>,..."));
    }
    let ages = header[1..]
        .iter()
        .map(|h| parse_int(file, 1, h).map(|a| a as i32))
        .collect::<Result<Vec<_>>>()?;
    if ages.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(parse_err(file, 1, "age columns must be consecutive"));
    }
    let mut first_year = None;
    let mut values = Vec::with_capacity(rows.len());
    for (i, (line, fields)) in rows.iter().enumerate() {
        if fields.len() != header.len() {
            return Err(parse_err(file, *line, format!("expected {} fields", header.len())));
        }
        let year = parse_int(file, *line, &fields[0])? as i32;
        match first_year {
            None => first_year = Some(year),
            Some(fy) if year != fy + i as i32 => {
                return Err(parse_err(file, *line, "years must be consecutive and ascending"))
            }
            _ => {}
        }
        values.push(
            fields[1..]
                .iter()
                .map(|f| parse_f64(file, *line, f))
                .collect::<Result<Vec<_>>>()?,
        );
    }
    let first_year = first_year.ok_or_else(|| parse_err(file, 2, "table has no rows"))?;
    Ok(AuxTable {
        kind,
        first_year,
        min_age: ages[0],
        values,
    })
}

/// Load and validate a stock directory.
pub fn load_stock(dir: impl AsRef<Path>) -> Result<StockData> {
    let dir = dir.as_ref();

    let (header, rows) = read_csv(&dir.join("fleets.csv"))?;
    expect_header("fleets.csv", &header, &["fleet", "kind", "timing"])?;
    let mut fleet_kinds = BTreeMap::new();
    for (line, f) in &rows {
        if f.len() != 3 {
            return Err(parse_err("fleets.csv", *line, "expected 3 fields"));
        }
        let id = parse_int("fleets.csv", *line, &f[0])?;
        if id < 0 {
            return Err(parse_err("fleets.csv", *line, "fleet id must be non-negative"));
        }
        let kind = match f[1].to_ascii_lowercase().as_str() {
            "catch" => FleetKind::Catch,
            "survey" => FleetKind::Survey,
            other => return Err(parse_err("fleets.csv", *line, format!("unknown kind {other:?}"))),
        };
        let timing = parse_f64("fleets.csv", *line, &f[2])?;
        if fleet_kinds.insert(id as usize, (kind, timing)).is_some() {
            return Err(parse_err("fleets.csv", *line, format!("duplicate fleet {id}")));
        }
    }

    let (header, rows) = read_csv(&dir.join("obs.csv"))?;
    expect_header("obs.csv", &header, &["year", "fleet", "age", "value"])?;
    let mut obs = Vec::with_capacity(rows.len());
    for (line, f) in &rows {
        if f.len() != 4 {
            return Err(parse_err("obs.csv", *line, "expected 4 fields"));
        }
        let year = parse_int("obs.csv", *line, &f[0])? as i32;
        let fleet = parse_int("obs.csv", *line, &f[1])?;
        let age = parse_int("obs.csv", *line, &f[2])? as i32;
        if fleet < 0 {
            return Err(parse_err("obs.csv", *line, "fleet id must be non-negative"));
        }
        let (value, missing) = if f[3] == "NA" {
            (f64::NAN, true)
        } else {
            (parse_f64("obs.csv", *line, &f[3])?, false)
        };
        obs.push(ObsRecord {
            year,
            fleet: fleet as usize,
            age,
            value,
            missing,
        });
    }

    let natural_mortality = load_aux(dir, AuxKind::NaturalMortality)?;
    let ages = AgeRange::new(
        natural_mortality.min_age,
        natural_mortality.min_age + natural_mortality.values[0].len() as i32 - 1,
    )?;
    let aux = AuxSet {
        natural_mortality,
        stock_weight: load_aux(dir, AuxKind::StockWeight)?,
        catch_weight: load_aux(dir, AuxKind::CatchWeight)?,
        maturity: load_aux(dir, AuxKind::Maturity)?,
        prop_f: load_aux(dir, AuxKind::PropFBeforeSpawn)?,
        prop_m: load_aux(dir, AuxKind::PropMBeforeSpawn)?,
    };
    StockData::from_parts(ages, &fleet_kinds, obs, aux)
}

/// Write a stock directory readable by [`load_stock`]. Missing records are written as `NA`.
pub fn save_stock(data: &StockData, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let csv_err = |e: csv::Error| Error::Io(std::io::Error::other(e));

    let mut w = csv::Writer::from_path(dir.join("fleets.csv")).map_err(csv_err)?;
    w.write_record(["fleet", "kind", "timing"]).map_err(csv_err)?;
    for f in &data.fleets {
        w.write_record([f.fleet.to_string(), f.kind.to_string(), f.timing.to_string()])
            .map_err(csv_err)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("obs.csv")).map_err(csv_err)?;
    w.write_record(["year", "fleet", "age", "value"]).map_err(csv_err)?;
    for r in &data.obs {
        let value = if r.missing { "NA".to_string() } else { r.value.to_string() };
        w.write_record([r.year.to_string(), r.fleet.to_string(), r.age.to_string(), value])
            .map_err(csv_err)?;
    }
    w.flush()?;

    for t in data.aux.tables() {
        let mut w = csv::Writer::from_path(dir.join(t.kind.file_name())).map_err(csv_err)?;
        let mut header = vec!["year".to_string()];
        header.extend((0..data.n_ages()).map(|i| (t.min_age + i as i32).to_string()));
        w.write_record(&header).map_err(csv_err)?;
        for (i, row) in t.values.iter().enumerate() {
            let mut rec = vec![(t.first_year + i as i32).to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(())
}
