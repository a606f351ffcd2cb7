//! Long-format result rows and their CSV/JSON emission.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

use crate::bounds::format_float;
use crate::error::{Error, Result};

/// One measurement in plot-ready long format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub experiment_id: String,
    pub model_id: String,
    pub t: u64,
    /// Rollout depth, when applicable.
    pub k: Option<u64>,
    pub metric: String,
    pub value: f64,
    pub trial: u64,
    /// Whether the evaluated environment was part of the model's training
    /// set, when that distinction applies.
    pub seen: Option<bool>,
}

pub const ROW_COLUMNS: [&str; 8] =
    ["experiment_id", "model_id", "T", "k", "metric", "value", "trial", "seen"];

/// Write rows with the fixed column order. Empty input yields a header-only
/// file.
pub fn write_rows_csv<W: Write>(rows: &[ReportRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(ROW_COLUMNS)?;
    for r in rows {
        if !r.value.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite metric value in report row: {r:?}"
            )));
        }
        w.write_record(&[
            r.experiment_id.clone(),
            r.model_id.clone(),
            r.t.to_string(),
            r.k.map(|k| k.to_string()).unwrap_or_default(),
            r.metric.clone(),
            format_float(r.value),
            r.trial.to_string(),
            r.seen.map(|s| if s { "seen".into() } else { "unseen".to_string() }).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Parse rows back; the inverse of [`write_rows_csv`].
pub fn read_rows_csv<R: std::io::Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(input);
    let headers = reader.headers()?.clone();
    if headers.iter().ne(ROW_COLUMNS) {
        return Err(Error::Config(format!("unexpected report columns: {headers:?}")));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let rec = record?;
        let parse_f = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Config(format!("bad float {s}: {e}")))
        };
        rows.push(ReportRow {
            experiment_id: rec[0].to_string(),
            model_id: rec[1].to_string(),
            t: rec[2].parse().map_err(|e| Error::Config(format!("bad T: {e}")))?,
            k: if rec[3].is_empty() {
                None
            } else {
                Some(rec[3].parse().map_err(|e| Error::Config(format!("bad k: {e}")))?)
            },
            metric: rec[4].to_string(),
            value: parse_f(&rec[5])?,
            trial: rec[6].parse().map_err(|e| Error::Config(format!("bad trial: {e}")))?,
            seen: match &rec[7] {
                "" => None,
                "seen" => Some(true),
                "unseen" => Some(false),
                other => return Err(Error::Config(format!("bad seen flag {other}"))),
            },
        });
    }
    Ok(rows)
}

/// Group medians/means for the summary JSON: one entry per
/// `(model, metric, T, k, seen)`.
pub fn summarize_rows(rows: &[ReportRow]) -> serde_json::Value {
    #[derive(Default)]
    struct Agg {
        values: Vec<f64>,
    }
    let mut groups: BTreeMap<(String, String, u64, Option<u64>, Option<bool>), Agg> =
        BTreeMap::new();
    for r in rows {
        groups
            .entry((r.model_id.clone(), r.metric.clone(), r.t, r.k, r.seen))
            .or_default()
            .values
            .push(r.value);
    }
    let entries: Vec<serde_json::Value> = groups
        .into_iter()
        .map(|((model, metric, t, k, seen), mut agg)| {
            agg.values.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = agg.values.len();
            let median = if n % 2 == 1 {
                agg.values[n / 2]
            } else {
                0.5 * (agg.values[n / 2 - 1] + agg.values[n / 2])
            };
            let mean = agg.values.iter().sum::<f64>() / n as f64;
            serde_json::json!({
                "model_id": model,
                "metric": metric,
                "T": t,
                "k": k,
                "seen": seen,
                "count": n,
                "mean": mean,
                "median": median,
            })
        })
        .collect();
    serde_json::json!({ "groups": entries })
}
