//! Aggregation of evaluation reports into one comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::harness::config::Method;
use crate::harness::eval::EvalReport;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: String,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub median_map: f64,
    pub mean_map: f64,
    pub min_map: f64,
    pub max_map: f64,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

/// One row per method. Known methods come first in their canonical order,
/// anything else after them alphabetically.
pub fn aggregate(reports: &[EvalReport]) -> Vec<MethodRow> {
    let mut by_method: BTreeMap<String, Vec<&EvalReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(r.method.clone()).or_default().push(r);
    }
    let rank = |m: &str| Method::ALL.iter().position(|k| k.name() == m).unwrap_or(usize::MAX);
    let mut rows: Vec<MethodRow> = by_method
        .into_iter()
        .map(|(method, rs)| {
            let maps: Vec<f64> = rs.iter().map(|r| r.map).collect();
            let mut seeds: Vec<u64> = rs.iter().map(|r| r.seed).collect();
            seeds.sort_unstable();
            MethodRow {
                method,
                runs: rs.len(),
                seeds,
                median_map: median(&maps).unwrap_or(0.0),
                mean_map: maps.iter().sum::<f64>() / maps.len() as f64,
                min_map: maps.iter().copied().fold(f64::INFINITY, f64::min),
                max_map: maps.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect();
    rows.sort_by(|a, b| rank(&a.method).cmp(&rank(&b.method)).then_with(|| a.method.cmp(&b.method)));
    rows
}

pub fn text_table(rows: &[MethodRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(0).max("method".len());
    let mut out = String::new();
    let _ = writeln!(out, "{:<width$}  {:>4}  {:>10}  {:>8}  {:>8}  {:>8}", "method", "runs", "median_mAP", "mean", "min", "max");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<width$}  {:>4}  {:>10.4}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.method, r.runs, r.median_map, r.mean_map, r.min_map, r.max_map
        );
    }
    out
}

pub const CSV_HEADER: &str = "method,runs,seeds,median_map,mean_map,min_map,max_map";

pub fn csv_rows(rows: &[MethodRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.method,
            r.runs,
            seeds.join(";"),
            r.median_map,
            r.mean_map,
            r.min_map,
            r.max_map
        );
    }
    out
}
