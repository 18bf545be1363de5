//! Reconstruction metrics between a truth table and an estimate table.

use std::path::Path;

use hsde::Truth;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{Table, SCHEMA};
use crate::{CliError, CliResult};

/// Rows of a table together with their time stamps.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema: u32,
    pub rows: usize,
    pub truth_dims: usize,
    pub estimate_dims: usize,
    /// Only defined when both sides have the same width.
    pub mse: Option<f64>,
    pub per_dim_mse: Option<Vec<f64>>,
    /// After the least-squares affine map from estimate to truth.
    pub r2: f64,
    pub r2_per_dim: Vec<f64>,
}

pub fn load_table(t: &Table) -> CliResult<Series> {
    let is_json = t.path.extension().is_some_and(|e| e == "json");
    if is_json {
        if t.columns.is_some() {
            return Err(CliError::config(format!("{}: `columns` applies to CSV tables", t.path.display())));
        }
        let truth = Truth::from_json(&crate::io::read_text(&t.path)?)
            .map_err(|e| CliError::config(format!("{}: {e}", t.path.display())))?;
        let rows = match t.field.as_deref().unwrap_or("latent") {
            "latent" => truth.latent,
            "clean" => truth.clean.ok_or_else(|| missing(&t.path, "clean"))?,
            "x" => truth.x.ok_or_else(|| missing(&t.path, "x"))?,
            other => return Err(CliError::config(format!("unknown truth field `{other}`"))),
        };
        Ok(Series { times: truth.times, rows })
    } else {
        if t.field.is_some() {
            return Err(CliError::config(format!("{}: `field` applies to truth JSON", t.path.display())));
        }
        read_csv_table(&t.path, t.columns.as_deref())
    }
}

fn missing(path: &Path, what: &str) -> CliError {
    CliError::config(format!("{}: truth has no `{what}` field", path.display()))
}

pub fn read_csv_table(path: &Path, columns: Option<&[String]>) -> CliResult<Series> {
    let err = |e: &dyn std::fmt::Display| CliError::config(format!("{}: {e}", path.display()));
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(crate::io::open(path)?);
    let header: Vec<String> = rdr.headers().map_err(|e| err(&e))?.iter().map(String::from).collect();
    let t_col = header.iter().position(|h| h == "t").ok_or_else(|| err(&"no `t` column"))?;
    let picked: Vec<usize> = match columns {
        Some(names) => names
            .iter()
            .map(|n| header.iter().position(|h| h == n).ok_or_else(|| err(&format!("no column `{n}`"))))
            .collect::<CliResult<_>>()?,
        None => {
            let means: Vec<usize> = (0..header.len()).filter(|&i| header[i].starts_with("mean_")).collect();
            if means.is_empty() {
                (0..header.len()).filter(|&i| i != t_col).collect()
            } else {
                means
            }
        }
    };
    if picked.is_empty() {
        return Err(err(&"no data columns"));
    }
    let mut s = Series { times: Vec::new(), rows: Vec::new() };
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| err(&e))?;
        let num = |j: usize| -> CliResult<f64> {
            rec[j].parse().map_err(|_| err(&format!("row {}: `{}` is not a number", i + 1, &rec[j])))
        };
        s.times.push(num(t_col)?);
        s.rows.push(picked.iter().map(|&j| num(j)).collect::<CliResult<_>>()?);
    }
    Ok(s)
}

/// For every truth time, the index of the estimate row stamped at the same time.
pub fn align(truth: &[f64], estimate: &[f64]) -> CliResult<Vec<usize>> {
    let mut order: Vec<usize> = (0..estimate.len()).collect();
    order.sort_by(|&a, &b| estimate[a].total_cmp(&estimate[b]));
    truth
        .iter()
        .map(|&t| {
            let tol = 1e-9 * t.abs().max(1.0);
            let i = order.partition_point(|&j| estimate[j] < t - tol);
            match order.get(i) {
                Some(&j) if (estimate[j] - t).abs() <= tol => Ok(j),
                _ => Err(CliError::config(format!(
                    "length mismatch: truth has {} rows, estimate has {}; no estimate row at t = {t}",
                    truth.len(),
                    estimate.len()
                ))),
            }
        })
        .collect()
}

pub fn evaluate(truth: &Series, estimate: &Series) -> CliResult<Metrics> {
    let idx = align(&truth.times, &estimate.times)?;
    let est: Vec<Vec<f64>> = idx.iter().map(|&j| estimate.rows[j].clone()).collect();
    compare(&truth.rows, &est)
}

fn width(rows: &[Vec<f64>], what: &str) -> CliResult<usize> {
    let w = rows.first().map_or(0, Vec::len);
    if w == 0 || rows.iter().any(|r| r.len() != w) {
        return Err(CliError::config(format!("{what} rows are empty or ragged")));
    }
    Ok(w)
}

/// Metrics between row-aligned tables.
pub fn compare(truth: &[Vec<f64>], est: &[Vec<f64>]) -> CliResult<Metrics> {
    if truth.len() != est.len() {
        return Err(CliError::config(format!(
            "length mismatch: {} truth rows, {} estimate rows",
            truth.len(),
            est.len()
        )));
    }
    let n = truth.len();
    if n < 2 {
        return Err(CliError::config("need at least two rows"));
    }
    let (p, q) = (width(truth, "truth")?, width(est, "estimate")?);
    let per_dim_mse = (p == q).then(|| {
        (0..p)
            .map(|j| truth.iter().zip(est).map(|(a, b)| (a[j] - b[j]).powi(2)).sum::<f64>() / n as f64)
            .collect::<Vec<_>>()
    });
    let mse = per_dim_mse.as_ref().map(|v| v.iter().sum::<f64>() / p as f64);

    let x = DMatrix::from_fn(n, q + 1, |i, j| if j < q { est[i][j] } else { 1.0 });
    let y = DMatrix::from_fn(n, p, |i, j| truth[i][j]);
    let coef = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| CliError::numerical(format!("affine alignment: {e}")))?;
    let resid = &y - &x * coef;
    let mut ss_res = vec![0.0; p];
    let mut ss_tot = vec![0.0; p];
    for j in 0..p {
        let mean = y.column(j).mean();
        ss_res[j] = resid.column(j).norm_squared();
        ss_tot[j] = y.column(j).iter().map(|v| (v - mean).powi(2)).sum();
    }
    let r2_of = |res: f64, tot: f64| {
        if tot > 0.0 {
            1.0 - res / tot
        } else if res == 0.0 {
            1.0
        } else {
            0.0
        }
    };
    let r2_per_dim = (0..p).map(|j| r2_of(ss_res[j], ss_tot[j])).collect();
    let r2 = r2_of(ss_res.iter().sum(), ss_tot.iter().sum());
    Ok(Metrics { schema: SCHEMA, rows: n, truth_dims: p, estimate_dims: q, mse, per_dim_mse, r2, r2_per_dim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use hsde::real::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn truth(n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|i| vec![(i as f64 * 0.1).sin(), (i as f64 * 0.037).cos(), i as f64 / n as f64]).collect()
    }

    #[test]
    fn identical_tables() {
        let t = truth(200);
        let m = compare(&t, &t).unwrap();
        assert_eq!(m.mse, Some(0.0));
        assert!((m.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn additive_noise_mse() {
        let t = truth(20_000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e: Vec<Vec<f64>> = t
            .iter()
            .map(|r| r.iter().map(|v| v + 0.1f64.sqrt() * standard_normal::<f64, _>(&mut rng)).collect())
            .collect();
        let m = compare(&t, &e).unwrap();
        assert!((m.mse.unwrap() - 0.1).abs() < 0.01, "{:?}", m.mse);
    }

    #[test]
    fn linear_transform_is_absorbed() {
        let t = truth(300);
        let a = [[2.0, -1.0, 0.5], [0.3, 0.7, -4.0], [1.0, 1.0, 1.0]];
        let e: Vec<Vec<f64>> =
            t.iter().map(|r| (0..3).map(|i| (0..3).map(|j| a[i][j] * r[j]).sum::<f64>() + 5.0).collect()).collect();
        let m = compare(&t, &e).unwrap();
        assert!((m.r2 - 1.0).abs() < 1e-10, "{}", m.r2);
        assert!(m.mse.unwrap() > 1.0);
    }

    #[test]
    fn alignment_by_time() {
        let idx = align(&[1.0, 2.0, 3.0], &[0.0, 1.0, 2.0, 3.0]).unwrap();
        assert_eq!(idx, vec![1, 2, 3]);
        assert!(align(&[1.0, 2.0, 3.0], &[1.0, 2.0]).is_err());
        assert_eq!(align(&[0.1 + 0.2], &[0.3]).unwrap(), vec![0]);
    }

    #[test]
    fn row_count_mismatch_is_an_input_error() {
        let e = compare(&truth(5), &truth(4)).unwrap_err();
        assert_eq!(e.code, crate::EXIT_INPUT);
    }
}
