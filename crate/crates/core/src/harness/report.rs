//! Result rows, summary tables and plot-ready CSV.

use std::fmt::Write as _;
use std::io::BufRead;

use crate::data::N_GROUPS;
use crate::dro::TrainLog;
use crate::error::{Error, Result};
use crate::methods::Method;
use crate::metrics::GroupMetrics;

/// One evaluation of one run on one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: Method,
    pub seed: u64,
    pub split: String,
    pub acc_avg: f64,
    pub acc_worst: f64,
    pub acc_group: [f64; N_GROUPS],
    pub loss_group: [f64; N_GROUPS],
}

pub const METRICS_HEADER: &str =
    "method,seed,split,acc_avg,acc_worst,acc_g0,acc_g1,acc_g2,acc_g3,loss_g0,loss_g1,loss_g2,loss_g3";

impl MetricsRow {
    pub fn new(method: Method, seed: u64, split: &str, m: &GroupMetrics) -> Self {
        let mut acc_group = [0.0; N_GROUPS];
        let mut loss_group = [0.0; N_GROUPS];
        acc_group.copy_from_slice(&m.per_group_accuracy);
        loss_group.copy_from_slice(&m.per_group_loss);
        Self {
            method,
            seed,
            split: split.to_string(),
            acc_avg: m.average_accuracy,
            acc_worst: m.worst_group_accuracy,
            acc_group,
            loss_group,
        }
    }

    pub fn to_csv_line(&self) -> String {
        let mut line = format!(
            "{},{},{},{:?},{:?}",
            self.method, self.seed, self.split, self.acc_avg, self.acc_worst
        );
        for v in self.acc_group.iter().chain(&self.loss_group) {
            write!(line, ",{v:?}").expect("write to string");
        }
        line
    }

    pub fn parse_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 5 + 2 * N_GROUPS {
            return Err(Error::Parse(format!(
                "metrics row has {} fields: `{line}`",
                fields.len()
            )));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Parse(format!("`{s}`: {e}")));
        let mut acc_group = [0.0; N_GROUPS];
        let mut loss_group = [0.0; N_GROUPS];
        for g in 0..N_GROUPS {
            acc_group[g] = num(fields[5 + g])?;
            loss_group[g] = num(fields[5 + N_GROUPS + g])?;
        }
        Ok(Self {
            method: fields[0].parse()?,
            seed: fields[1].parse().map_err(|e| Error::Parse(format!("seed: {e}")))?,
            split: fields[2].to_string(),
            acc_avg: num(fields[3])?,
            acc_worst: num(fields[4])?,
            acc_group,
            loss_group,
        })
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv_line());
        out.push('\n');
    }
    out
}

pub fn read_metrics_csv<R: BufRead>(input: R) -> Result<Vec<MetricsRow>> {
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if i == 0 {
            if line.trim() != METRICS_HEADER {
                return Err(Error::Parse(format!("unexpected metrics header `{line}`")));
            }
            continue;
        }
        if !line.trim().is_empty() {
            rows.push(MetricsRow::parse_csv_line(&line)?);
        }
    }
    Ok(rows)
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// `mean±sd` in percent with one decimal, e.g. `84.8±0.6`.
pub fn format_cell(mean: f64, sd: f64) -> String {
    format!("{:.1}±{:.1}", 100.0 * mean, 100.0 * sd)
}

/// Selected hyperparameters, when known.
#[derive(Debug, Clone, PartialEq)]
pub struct Chosen {
    pub learning_rate: f64,
    pub eta: Option<f64>,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub n_runs: usize,
    pub acc_avg_mean: f64,
    pub acc_avg_sd: f64,
    pub acc_worst_mean: f64,
    pub acc_worst_sd: f64,
    pub chosen: Option<Chosen>,
}

/// One row per method (in order of first appearance) over rows of `split`.
pub fn summarize(rows: &[MetricsRow], split: &str) -> Vec<SummaryRow> {
    let mut methods: Vec<Method> = Vec::new();
    for r in rows.iter().filter(|r| r.split == split) {
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }
    methods
        .into_iter()
        .map(|method| {
            let sel: Vec<&MetricsRow> = rows.iter().filter(|r| r.split == split && r.method == method).collect();
            let avg: Vec<f64> = sel.iter().map(|r| r.acc_avg).collect();
            let worst: Vec<f64> = sel.iter().map(|r| r.acc_worst).collect();
            let (acc_avg_mean, acc_avg_sd) = mean_sd(&avg);
            let (acc_worst_mean, acc_worst_sd) = mean_sd(&worst);
            SummaryRow {
                method,
                n_runs: sel.len(),
                acc_avg_mean,
                acc_avg_sd,
                acc_worst_mean,
                acc_worst_sd,
                chosen: None,
            }
        })
        .collect()
}

/// Rendered table and its full-precision CSV twin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub text: String,
    pub csv: String,
}

pub fn emit_table(rows: &[SummaryRow]) -> Table {
    let width = rows
        .iter()
        .map(|r| r.method.display_name().len())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut text = format!("{:<width$}  {:>10}  {:>10}\n", "Method", "Average", "Worst Gr.");
    let mut csv =
        String::from("method,n_runs,acc_avg_mean,acc_avg_sd,acc_worst_mean,acc_worst_sd,learning_rate,eta,rate\n");
    let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
    for r in rows {
        writeln!(
            text,
            "{:<width$}  {:>10}  {:>10}",
            r.method.display_name(),
            format_cell(r.acc_avg_mean, r.acc_avg_sd),
            format_cell(r.acc_worst_mean, r.acc_worst_sd)
        )
        .expect("write to string");
        let (lr, eta, rate) = match &r.chosen {
            Some(c) => (opt(Some(c.learning_rate)), opt(c.eta), opt(c.rate)),
            None => Default::default(),
        };
        writeln!(
            csv,
            "{},{},{:?},{:?},{:?},{:?},{lr},{eta},{rate}",
            r.method, r.n_runs, r.acc_avg_mean, r.acc_avg_sd, r.acc_worst_mean, r.acc_worst_sd
        )
        .expect("write to string");
    }
    Table { text, csv }
}

/// Long-format training curves: one row per (run, step, group).
pub fn emit_curves<'a>(runs: impl IntoIterator<Item = (Method, u64, &'a TrainLog)>) -> String {
    let mut out = String::from("method,seed,step,group,loss,q\n");
    for (method, seed, log) in runs {
        for record in &log.steps {
            for g in 0..log.n_groups {
                let loss = record.group_losses[g].map_or_else(String::new, |v| format!("{v:?}"));
                let q = record.q.as_ref().map_or_else(String::new, |q| format!("{:?}", q[g]));
                writeln!(out, "{method},{seed},{},{g},{loss},{q}", record.step).expect("write to string");
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dro::{Phase, StepRecord};

    fn row(method: Method, worst: f64, avg: f64) -> MetricsRow {
        MetricsRow {
            method,
            seed: 1,
            split: "test".into(),
            acc_avg: avg,
            acc_worst: worst,
            acc_group: [worst, avg, avg, avg],
            loss_group: [0.1, 0.2, 0.3, 0.4],
        }
    }

    #[test]
    fn cell_format_matches_table_convention() {
        assert_eq!(format_cell(0.848, 0.006), "84.8±0.6");
        assert_eq!(format_cell(0.5, 0.0), "50.0±0.0");
    }

    #[test]
    fn single_run_has_zero_sd() {
        let rows = vec![row(Method::Cegdro, 0.8, 0.9)];
        let s = summarize(&rows, "test");
        assert_eq!(s[0].acc_worst_sd, 0.0);
        assert!(emit_table(&s).text.contains("±0.0"));
    }

    #[test]
    fn one_csv_row_per_method() {
        let rows = vec![
            row(Method::Erm, 0.6, 0.8),
            row(Method::Erm, 0.7, 0.85),
            row(Method::GroupDro, 0.8, 0.9),
        ];
        let table = emit_table(&summarize(&rows, "test"));
        assert_eq!(table.csv.lines().count(), 1 + 2);
        assert_eq!(table.text.lines().count(), 1 + 2);
        assert!(table.text.contains("65.0±7.1"));
    }

    #[test]
    fn sample_sd() {
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((s - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let rows = vec![row(Method::GroupDroSc, 0.1 + 0.2, 1.0 / 3.0)];
        let back = read_metrics_csv(metrics_csv(&rows).as_bytes()).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn curves_have_k_rows_per_step() {
        let mut log = TrainLog::new(4);
        for step in 1..=3 {
            log.steps.push(StepRecord {
                step,
                phase: Phase::GroupDro,
                group_losses: vec![Some(0.1), None, Some(0.3), Some(0.4)],
                q: Some(vec![0.25; 4]),
                train_loss: 0.2,
            });
        }
        let csv = emit_curves([(Method::GroupDro, 9, &log)]);
        assert_eq!(csv.lines().count(), 1 + 4 * 3);
        assert!(csv.contains("groupdro,9,2,1,,0.25\n"));
    }
}
