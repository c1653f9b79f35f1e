//! Side-by-side curves and SSB series from several fits.

use std::path::{Path, PathBuf};

use samspline::fit::FitResult;
use samspline::{Error, Result};

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959963984540054;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

/// Model labels, made unique by suffixing repeated names.
fn labels(fits: &[FitResult]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for f in fits {
        let mut name = f.model.clone();
        let mut k = 2;
        while out.contains(&name) {
            name = format!("{}#{k}", f.model);
            k += 1;
        }
        out.push(name);
    }
    out
}

pub fn write_ssb(fits: &[(String, &FitResult)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["model", "year", "est", "lo", "hi"]).map_err(csv_err)?;
    for (name, f) in fits {
        for s in &f.ssb {
            let (lo, hi) = match s.se {
                Some(se) => (Some(s.estimate - Z95 * se), Some(s.estimate + Z95 * se)),
                None => (None, None),
            };
            w.write_record([name.clone(), s.year.to_string(), s.estimate.to_string(), fmt_opt(lo), fmt_opt(hi)])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_compare(paths: &[PathBuf], out: &Path) -> Result<()> {
    if paths.len() < 2 {
        return Err(Error::ConfigInvalid("compare needs at least 2 fits".into()));
    }
    let fits: Vec<FitResult> = paths.iter().map(FitResult::read_json).collect::<Result<_>>()?;
    let first = &fits[0].stock;
    for (p, f) in paths.iter().zip(&fits).skip(1) {
        if &f.stock != first {
            return Err(Error::StockMismatch(format!("{} was fitted to a different stock", p.display())));
        }
    }
    std::fs::create_dir_all(out)?;
    let names = labels(&fits);

    let mut w = csv::Writer::from_path(out.join("curves.csv")).map_err(csv_err)?;
    w.write_record(["model", "block", "fleet", "age", "estimate", "se", "lo", "hi"]).map_err(csv_err)?;
    for (name, f) in names.iter().zip(&fits) {
        for c in &f.curves {
            let lo = c.se.map(|s| c.estimate - Z95 * s);
            let hi = c.se.map(|s| c.estimate + Z95 * s);
            w.write_record([
                name.clone(),
                c.block.to_string(),
                c.fleet.to_string(),
                c.age.to_string(),
                c.estimate.to_string(),
                fmt_opt(c.se),
                fmt_opt(lo),
                fmt_opt(hi),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;

    let pairs: Vec<(String, &FitResult)> = names.into_iter().zip(&fits).collect();
    write_ssb(&pairs, &out.join("ssb.csv"))
}
