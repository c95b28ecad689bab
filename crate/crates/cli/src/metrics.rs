//! CSV outputs. Every metrics file starts with a `schema` column so readers
//! can reject files written by an incompatible version. Wall-clock times go
//! to a separate timings file, which keeps the metrics bytes reproducible.

use std::io::{Read, Write};

use fdg_core::fedruntime::PhaseLosses;

use crate::error::{CliError, CliResult};
use crate::variant::Variant;

pub const METRICS_SCHEMA: &str = "fdg-metrics/1";
pub const SUMMARY_SCHEMA: &str = "fdg-summary/1";

pub const METRICS_HEADER: [&str; 9] = [
    "schema",
    "seed",
    "variant",
    "holdout",
    "round",
    "accuracy",
    "loss_global",
    "loss_classifier",
    "loss_domain",
];
pub const SUMMARY_HEADER: [&str; 5] = ["schema", "variant", "runs", "mean_accuracy", "std_accuracy"];
pub const TIMINGS_HEADER: [&str; 4] = ["seed", "variant", "holdout", "seconds"];

/// Result of one (seed, variant, held-out domain) run, taken after the last
/// round. Losses are means over the clients of that round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub seed: u64,
    pub variant: Variant,
    pub holdout: usize,
    pub round: u32,
    pub accuracy: f64,
    pub losses: PhaseLosses,
}

impl MetricsRow {
    /// Order used when merging rows from several runs.
    pub fn sort_key(&self) -> (u64, Variant, usize) {
        (self.seed, self.variant, self.holdout)
    }

    fn record(&self) -> [String; 9] {
        [
            METRICS_SCHEMA.to_string(),
            self.seed.to_string(),
            self.variant.to_string(),
            self.holdout.to_string(),
            self.round.to_string(),
            self.accuracy.to_string(),
            self.losses.global.to_string(),
            self.losses.classifier.to_string(),
            self.losses.domain.to_string(),
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingRow {
    pub seed: u64,
    pub variant: Variant,
    pub holdout: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SummaryRow {
    pub variant: Variant,
    pub runs: usize,
    pub mean: f64,
    /// Sample standard deviation, 0 for a single run.
    pub std: f64,
}

fn csv_err(e: csv::Error) -> CliError {
    CliError::Config(format!("csv: {e}"))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> CliResult<T> {
    let raw = rec.get(i).ok_or_else(|| CliError::Config(format!("metrics row misses column {name}")))?;
    raw.parse()
        .map_err(|_| CliError::Config(format!("metrics column {name}: cannot parse {raw:?}")))
}

fn write_table<W: Write, R: AsRef<[u8]>>(out: W, header: &[&str], rows: impl IntoIterator<Item = Vec<R>>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    w.flush().map_err(|e| CliError::Config(format!("csv: {e}")))
}

pub fn write_metrics<W: Write>(out: W, rows: &[MetricsRow]) -> CliResult<()> {
    write_table(out, &METRICS_HEADER, rows.iter().map(|r| r.record().to_vec()))
}

pub fn metrics_csv(rows: &[MetricsRow]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_metrics(&mut buf, rows)?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn read_metrics<R: Read>(input: R) -> CliResult<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(CliError::Config("metrics file has an unexpected header".into()));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(csv_err)?;
            if rec.get(0) != Some(METRICS_SCHEMA) {
                return Err(CliError::Config(format!(
                    "metrics schema {:?} is not {METRICS_SCHEMA}",
                    rec.get(0).unwrap_or("")
                )));
            }
            Ok(MetricsRow {
                seed: field(&rec, 1, "seed")?,
                variant: field(&rec, 2, "variant")?,
                holdout: field(&rec, 3, "holdout")?,
                round: field(&rec, 4, "round")?,
                accuracy: field(&rec, 5, "accuracy")?,
                losses: PhaseLosses {
                    global: field(&rec, 6, "loss_global")?,
                    classifier: field(&rec, 7, "loss_classifier")?,
                    domain: field(&rec, 8, "loss_domain")?,
                },
            })
        })
        .collect()
}

pub fn timings_csv(rows: &[TimingRow]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_table(
        &mut buf,
        &TIMINGS_HEADER,
        rows.iter().map(|t| {
            vec![t.seed.to_string(), t.variant.to_string(), t.holdout.to_string(), format!("{:.3}", t.seconds)]
        }),
    )?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

/// Mean and sample standard deviation of accuracy per variant, in variant
/// order. Values are summed in row order.
pub fn summarize(rows: &[MetricsRow]) -> Vec<SummaryRow> {
    Variant::ALL
        .iter()
        .filter_map(|&variant| {
            let acc: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.accuracy).collect();
            if acc.is_empty() {
                return None;
            }
            let n = acc.len() as f64;
            let mean = acc.iter().sum::<f64>() / n;
            let std = if acc.len() > 1 {
                (acc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            Some(SummaryRow {
                variant,
                runs: acc.len(),
                mean,
                std,
            })
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> CliResult<String> {
    let mut buf = Vec::new();
    write_table(
        &mut buf,
        &SUMMARY_HEADER,
        rows.iter().map(|s| {
            vec![
                SUMMARY_SCHEMA.to_string(),
                s.variant.to_string(),
                s.runs.to_string(),
                s.mean.to_string(),
                s.std.to_string(),
            ]
        }),
    )?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(seed: u64, variant: Variant, accuracy: f64) -> MetricsRow {
        MetricsRow {
            seed,
            variant,
            holdout: 1,
            round: 5,
            accuracy,
            losses: PhaseLosses {
                global: 0.25,
                classifier: 1.0 / 3.0,
                domain: 0.1,
            },
        }
    }

    #[test]
    fn metrics_round_trip_exactly() {
        let rows = vec![row(0, Variant::V1, 0.9125), row(2, Variant::Full, 2.0 / 3.0)];
        let text = metrics_csv(&rows).unwrap();
        assert!(text.starts_with("schema,seed,variant"));
        assert_eq!(read_metrics(text.as_bytes()).unwrap(), rows);
    }

    #[test]
    fn summary_uses_sample_std() {
        let rows = vec![row(0, Variant::V3, 0.5), row(1, Variant::V3, 1.0), row(0, Variant::V1, 0.75)];
        let s = summarize(&rows);
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].variant, s[0].runs, s[0].mean, s[0].std), (Variant::V1, 1, 0.75, 0.0));
        assert_eq!(s[1].mean, 0.75);
        assert!((s[1].std - 0.125f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn rejects_foreign_schema() {
        let text = metrics_csv(&[row(0, Variant::V1, 0.5)]).unwrap().replace(METRICS_SCHEMA, "fdg-metrics/0");
        assert!(read_metrics(text.as_bytes()).is_err());
    }
}
