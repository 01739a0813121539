//! Seeded selection-then-report protocol.
//!
//! For each method every grid point is trained with `n_selection_runs`
//! selection seeds and scored by mean validation worst-group accuracy. The
//! winning point is retrained with `n_report_runs` fresh report seeds, whose
//! test metrics are aggregated into the result table. All seeds derive from
//! the root seed; selection and report seeds are disjoint.

use std::collections::HashSet;
use std::path::Path;

use rayon::prelude::*;

use crate::data::{generate, Splits, N_GROUPS};
use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::io::write_atomic;
use crate::harness::report::{emit_table, metrics_csv, summarize, Chosen, MetricsRow, SummaryRow, Table};
use crate::methods::{run_method, Method, RunOutput, RunSettings};
use crate::metrics::{select_best, GroupMetrics};
use crate::seed::{self, stream};

/// One hyperparameter point. `eta` and `rate` are `None` for methods that do
/// not use them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperPoint {
    pub learning_rate: f64,
    pub eta: Option<f64>,
    pub rate: Option<f64>,
}

impl HyperPoint {
    fn apply(&self, base: &RunSettings, seed: u64) -> RunSettings {
        let mut s = base.clone();
        s.train.learning_rate = self.learning_rate;
        if let Some(eta) = self.eta {
            s.train.eta = eta;
        }
        if let Some(rate) = self.rate {
            s.schedule.rate = rate;
        }
        s.train.seed = seed;
        s
    }

    fn csv_fields(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| format!("{x:?}"));
        format!("{:?},{},{}", self.learning_rate, opt(self.eta), opt(self.rate))
    }
}

/// Grid points relevant to `method`.
pub fn grid_points(config: &ExperimentConfig, method: Method) -> Vec<HyperPoint> {
    let g = &config.grid;
    let etas: Vec<Option<f64>> = if method.uses_group_weights() {
        g.eta.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let rates: Vec<Option<f64>> = if method.is_curricular() {
        g.rate.iter().copied().map(Some).collect()
    } else {
        vec![None]
    };
    let mut points = Vec::new();
    for &learning_rate in &g.learning_rate {
        for &eta in &etas {
            for &rate in &rates {
                points.push(HyperPoint {
                    learning_rate,
                    eta,
                    rate,
                });
            }
        }
    }
    points
}

pub fn selection_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.n_selection_runs as u64)
        .map(|i| seed::derive(config.root_seed, stream::SELECTION, i))
        .collect()
}

pub fn report_seeds(config: &ExperimentConfig) -> Vec<u64> {
    (0..config.n_report_runs as u64)
        .map(|i| seed::derive(config.root_seed, stream::REPORT, i))
        .collect()
}

#[derive(Debug, Clone)]
pub struct SelectionRun {
    pub method: Method,
    pub point: HyperPoint,
    pub seed: u64,
    pub val: GroupMetrics,
}

#[derive(Debug, Clone)]
pub struct Failure {
    pub method: Method,
    pub point: HyperPoint,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct ReportRun {
    pub seed: u64,
    pub output: RunOutput,
}

#[derive(Debug, Clone)]
pub struct MethodResult {
    pub method: Method,
    pub chosen: HyperPoint,
    /// Validation metrics of the chosen point, averaged over selection seeds.
    pub selection_score: GroupMetrics,
    pub reports: Vec<ReportRun>,
}

impl MethodResult {
    pub fn test_worst(&self) -> Vec<f64> {
        self.reports
            .iter()
            .map(|r| r.output.test.worst_group_accuracy)
            .collect()
    }

    pub fn test_average(&self) -> Vec<f64> {
        self.reports.iter().map(|r| r.output.test.average_accuracy).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub selection: Vec<SelectionRun>,
    pub methods: Vec<MethodResult>,
    pub failures: Vec<Failure>,
}

impl ExperimentResult {
    pub fn method(&self, method: Method) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == method)
    }

    pub fn metrics_rows(&self) -> Vec<MetricsRow> {
        let mut rows = Vec::new();
        for m in &self.methods {
            for r in &m.reports {
                rows.push(MetricsRow::new(m.method, r.seed, "val", &r.output.val));
                rows.push(MetricsRow::new(m.method, r.seed, "test", &r.output.test));
            }
        }
        rows
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut rows = summarize(&self.metrics_rows(), "test");
        for row in &mut rows {
            if let Some(m) = self.method(row.method) {
                row.chosen = Some(Chosen {
                    learning_rate: m.chosen.learning_rate,
                    eta: m.chosen.eta,
                    rate: m.chosen.rate,
                });
            }
        }
        rows
    }

    pub fn table(&self) -> Table {
        emit_table(&self.summary())
    }
}

fn mean_metrics(runs: &[&GroupMetrics]) -> GroupMetrics {
    let n = runs.len() as f64;
    let avg = |f: &dyn Fn(&GroupMetrics) -> f64| runs.iter().map(|m| f(m)).sum::<f64>() / n;
    GroupMetrics {
        per_group_accuracy: (0..N_GROUPS).map(|g| avg(&|m| m.per_group_accuracy[g])).collect(),
        per_group_loss: (0..N_GROUPS).map(|g| avg(&|m| m.per_group_loss[g])).collect(),
        per_group_count: runs[0].per_group_count.clone(),
        average_accuracy: avg(&|m| m.average_accuracy),
        worst_group_accuracy: avg(&|m| m.worst_group_accuracy),
        empty_groups: runs[0].empty_groups.clone(),
    }
}

fn wrap(seed: u64, e: Error) -> Error {
    Error::Run {
        seed,
        source: Box::new(e),
    }
}

/// Run the full protocol. Individual run failures are collected rather than
/// aborting; a method fails as a whole only if no grid point survives.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let data: Splits = generate(&config.data)?;
    let base = config.run_settings();
    let sel_seeds = selection_seeds(config);
    let rep_seeds = report_seeds(config);
    let sel_set: HashSet<u64> = sel_seeds.iter().copied().collect();
    if rep_seeds.iter().any(|s| sel_set.contains(s)) {
        return Err(Error::InvalidConfig("selection and report seeds collide".into()));
    }

    let mut jobs = Vec::new();
    for &method in &config.methods {
        for point in grid_points(config, method) {
            for &seed in &sel_seeds {
                jobs.push((method, point, seed));
            }
        }
    }
    let outcomes: Vec<Result<GroupMetrics>> = jobs
        .par_iter()
        .map(|&(method, point, seed)| {
            run_method(method, &data, &point.apply(&base, seed))
                .map(|out| out.val)
                .map_err(|e| wrap(seed, e))
        })
        .collect();

    let mut selection = Vec::new();
    let mut failures = Vec::new();
    for (&(method, point, seed), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok(val) => selection.push(SelectionRun {
                method,
                point,
                seed,
                val,
            }),
            Err(e) => failures.push(Failure {
                method,
                point,
                seed,
                error: e.to_string(),
            }),
        }
    }

    let mut chosen = Vec::new();
    for &method in &config.methods {
        let candidates: Vec<(HyperPoint, GroupMetrics)> = grid_points(config, method)
            .into_iter()
            .filter(|p| !failures.iter().any(|f| f.method == method && f.point == *p))
            .filter_map(|p| {
                let runs: Vec<&GroupMetrics> = selection
                    .iter()
                    .filter(|r| r.method == method && r.point == p)
                    .map(|r| &r.val)
                    .collect();
                (!runs.is_empty()).then(|| (p, mean_metrics(&runs)))
            })
            .collect();
        match select_best(&candidates) {
            Some(i) => chosen.push((method, candidates[i].clone())),
            None => {
                return Err(Error::InvalidConfig(format!(
                    "every grid point failed for {}",
                    method.key()
                )))
            }
        }
    }

    let report_jobs: Vec<(usize, u64)> = (0..chosen.len())
        .flat_map(|i| rep_seeds.iter().map(move |&s| (i, s)))
        .collect();
    let report_outcomes: Vec<Result<RunOutput>> = report_jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (method, (point, _)) = &chosen[i];
            run_method(*method, &data, &point.apply(&base, seed)).map_err(|e| wrap(seed, e))
        })
        .collect();

    let mut methods: Vec<MethodResult> = chosen
        .into_iter()
        .map(|(method, (point, score))| MethodResult {
            method,
            chosen: point,
            selection_score: score,
            reports: Vec::new(),
        })
        .collect();
    for (&(i, seed), outcome) in report_jobs.iter().zip(report_outcomes) {
        match outcome {
            Ok(output) => methods[i].reports.push(ReportRun { seed, output }),
            Err(e) => failures.push(Failure {
                method: methods[i].method,
                point: methods[i].chosen,
                seed,
                error: e.to_string(),
            }),
        }
    }
    methods.retain(|m| !m.reports.is_empty());

    Ok(ExperimentResult {
        selection,
        methods,
        failures,
    })
}

/// Write every artifact of a sweep under `dir`:
///
/// * `selection.csv`: validation metrics of every selection run
/// * `results.csv`: val and test metrics of every report run
/// * `summary.csv`, `table.txt`: the aggregated table
/// * `failures.csv`: failed runs, if any
/// * `runs/<method>/seed_<seed>/steps.csv` (and `manifest.json` for curriculum
///   methods): per-step logs of report runs
pub fn write_outputs(result: &ExperimentResult, config: &ExperimentConfig, dir: &Path) -> Result<()> {
    write_atomic(&dir.join("config.txt"), config.to_text().as_bytes())?;

    let mut selection =
        String::from("method,learning_rate,eta,rate,seed,acc_avg,acc_worst,acc_g0,acc_g1,acc_g2,acc_g3\n");
    for r in &result.selection {
        selection.push_str(&format!(
            "{},{},{},{:?},{:?}",
            r.method,
            r.point.csv_fields(),
            r.seed,
            r.val.average_accuracy,
            r.val.worst_group_accuracy
        ));
        for a in &r.val.per_group_accuracy {
            selection.push_str(&format!(",{a:?}"));
        }
        selection.push('\n');
    }
    write_atomic(&dir.join("selection.csv"), selection.as_bytes())?;
    write_atomic(&dir.join("results.csv"), metrics_csv(&result.metrics_rows()).as_bytes())?;

    let table = result.table();
    write_atomic(&dir.join("summary.csv"), table.csv.as_bytes())?;
    write_atomic(&dir.join("table.txt"), table.text.as_bytes())?;

    if !result.failures.is_empty() {
        let mut failures = String::from("method,learning_rate,eta,rate,seed,error\n");
        for f in &result.failures {
            failures.push_str(&format!(
                "{},{},{},\"{}\"\n",
                f.method,
                f.point.csv_fields(),
                f.seed,
                f.error.replace('"', "'")
            ));
        }
        write_atomic(&dir.join("failures.csv"), failures.as_bytes())?;
    }

    for m in &result.methods {
        for r in &m.reports {
            write_run_artifacts(&run_dir(dir, m.method, r.seed), r.seed, &r.output)?;
        }
    }
    Ok(())
}

pub fn run_dir(root: &Path, method: Method, seed: u64) -> std::path::PathBuf {
    root.join("runs").join(method.key()).join(format!("seed_{seed}"))
}

/// `steps.csv`, `model.json`, `metrics.csv` and, for curriculum methods,
/// `manifest.json`.
pub fn write_run_artifacts(dir: &Path, seed: u64, output: &RunOutput) -> Result<()> {
    let rows = [
        MetricsRow::new(output.method, seed, "val", &output.val),
        MetricsRow::new(output.method, seed, "test", &output.test),
    ];
    write_atomic(&dir.join("metrics.csv"), metrics_csv(&rows).as_bytes())?;
    let mut steps = Vec::new();
    output.log.write_csv(&mut steps)?;
    write_atomic(&dir.join("steps.csv"), &steps)?;
    write_atomic(&dir.join("model.json"), output.model.to_json()?.as_bytes())?;
    if let Some(manifest) = &output.manifest {
        write_atomic(
            &dir.join("manifest.json"),
            serde_json::to_string_pretty(manifest)?.as_bytes(),
        )?;
    }
    Ok(())
}
