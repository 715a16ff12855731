//! Markdown summary of a results CSV, grouped by environment and method.

use std::collections::BTreeMap;
use std::io::Read;

use super::{mean_std, RESULT_COLUMNS};
use crate::SimError;

/// Mean SR, CT and TP (with sample standard deviations) per environment and
/// scheduler+planner pair. Missing columns are a schema error.
pub fn emit_report<R: Read>(input: R) -> Result<String, SimError> {
    let mut rdr = csv::Reader::from_reader(input);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| -> Result<usize, SimError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SimError::Schema(name.to_string()))
    };
    // Every column must be there even if the report does not use it.
    for c in RESULT_COLUMNS {
        col(c)?;
    }
    let (env, sch, pl, sr, ct, tp) = (
        col("env")?,
        col("scheduler")?,
        col("planner")?,
        col("sr")?,
        col("ct_ms")?,
        col("tp")?,
    );
    let mut groups: BTreeMap<(String, String), [Vec<f64>; 3]> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64, SimError> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| SimError::Config(format!("column `{}` is not numeric: {}", &headers[i], &rec[i])))
        };
        let key = (
            rec[env].to_string(),
            format!("{}+{}", rec[sch].to_uppercase(), &rec[pl]),
        );
        let g = groups.entry(key).or_default();
        g[0].push(num(sr)?);
        g[1].push(num(ct)?);
        g[2].push(num(tp)?);
    }
    let mut out = String::from("| env | method | runs | SR | CT | TP |\n|---|---|---|---|---|---|\n");
    for ((e, m), [s, c, t]) in &groups {
        let fmt = |xs: &[f64], p: usize| {
            let (mean, sd) = mean_std(xs);
            format!("{mean:.p$} ± {sd:.p$}")
        };
        out.push_str(&format!(
            "| {e} | {m} | {} | {} | {} | {} |\n",
            s.len(),
            fmt(s, 2),
            fmt(c, 3),
            fmt(t, 4)
        ));
    }
    Ok(out)
}
