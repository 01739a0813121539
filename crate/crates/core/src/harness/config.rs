//! Flat `key = value` experiment configuration.
//!
//! ```text
//! # comment
//! data.rho = 0.95
//! train.batch_size = 64
//! grid.learning_rate = 0.1, 0.03, 0.01
//! experiment.methods = erm, groupdro, cegdro
//! ```
//!
//! Keys carry a section prefix; unknown keys are rejected. Absent keys keep
//! their defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::curriculum::{CurriculumSchedule, SplitSource};
use crate::data::DataConfig;
use crate::dro::TrainConfig;
use crate::error::{Error, Result};
use crate::methods::{Method, ModelSpec, RunSettings};

/// Hyperparameter values swept during selection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub learning_rate: Vec<f64>,
    pub eta: Vec<f64>,
    pub rate: Vec<f64>,
}

impl Default for Grid {
    fn default() -> Self {
        Self {
            learning_rate: vec![0.1, 0.03, 0.01],
            eta: vec![0.01, 0.1, 1.0],
            rate: vec![0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: CurriculumSchedule,
    pub split_source: SplitSource,
    /// Methods compared by a sweep; `train` uses the first unless overridden.
    pub methods: Vec<Method>,
    pub grid: Grid,
    pub n_selection_runs: usize,
    pub n_report_runs: usize,
    pub root_seed: u64,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            schedule: CurriculumSchedule::default(),
            split_source: SplitSource::GroundTruth,
            methods: Method::ALL.to_vec(),
            grid: Grid::default(),
            n_selection_runs: 8,
            n_report_runs: 3,
            root_seed: 0,
            output_dir: PathBuf::from("results"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Parse(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(Error::Parse(format!("{key}: empty list")));
    }
    Ok(items)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`", lineno + 1)))?;
            config.set(key.trim(), value.trim())?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let d = &mut self.data;
        let t = &mut self.train;
        match key {
            "data.n_train" => d.n_train = parse(key, v)?,
            "data.n_val" => d.n_val = parse(key, v)?,
            "data.n_test" => d.n_test = parse(key, v)?,
            "data.rho" => d.rho = parse(key, v)?,
            "data.mu_core" => d.mu_core = parse(key, v)?,
            "data.sigma_core" => d.sigma_core = parse(key, v)?,
            "data.mu_spur" => d.mu_spur = parse(key, v)?,
            "data.sigma_spur" => d.sigma_spur = parse(key, v)?,
            "data.d_core" => d.d_core = parse(key, v)?,
            "data.d_spur" => d.d_spur = parse(key, v)?,
            "data.d_noise" => d.d_noise = parse(key, v)?,
            "data.seed" => d.seed = parse(key, v)?,
            "model.kind" => self.model.kind = parse(key, v)?,
            "model.hidden_dim" => self.model.hidden_dim = parse(key, v)?,
            "train.learning_rate" => t.learning_rate = parse(key, v)?,
            "train.batch_size" => t.batch_size = parse(key, v)?,
            "train.eta" => t.eta = parse(key, v)?,
            "train.weight_decay" => t.weight_decay = parse(key, v)?,
            "train.max_steps" => t.max_steps = parse(key, v)?,
            "train.seed" => t.seed = parse(key, v)?,
            "curriculum.rate" => self.schedule.rate = parse(key, v)?,
            "curriculum.stage_epochs" => self.schedule.stage_epochs = parse(key, v)?,
            "curriculum.final_epochs" => {
                self.schedule.final_epochs = match v {
                    "auto" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "experiment.split_source" => self.split_source = parse(key, v)?,
            "experiment.method" | "experiment.methods" => self.methods = parse_list(key, v)?,
            "experiment.n_selection_runs" => self.n_selection_runs = parse(key, v)?,
            "experiment.n_report_runs" => self.n_report_runs = parse(key, v)?,
            "experiment.root_seed" => self.root_seed = parse(key, v)?,
            "experiment.output_dir" => self.output_dir = PathBuf::from(v),
            "grid.learning_rate" => self.grid.learning_rate = parse_list(key, v)?,
            "grid.eta" => self.grid.eta = parse_list(key, v)?,
            "grid.rate" => self.grid.rate = parse_list(key, v)?,
            _ => return Err(Error::Parse(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        self.schedule.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("no methods configured".into()));
        }
        if self.n_report_runs == 0 {
            return Err(Error::InvalidConfig("n_report_runs must be at least 1".into()));
        }
        if self.n_selection_runs == 0 {
            return Err(Error::InvalidConfig("n_selection_runs must be at least 1".into()));
        }
        if self.methods.iter().any(|m| m.is_curricular()) && !self.train.batch_size.is_multiple_of(2) {
            return Err(Error::InvalidConfig(
                "curriculum methods need an even batch_size".into(),
            ));
        }
        Ok(())
    }

    /// Settings of a single run of the configured point.
    pub fn run_settings(&self) -> RunSettings {
        RunSettings {
            model: self.model.clone(),
            train: self.train.clone(),
            schedule: self.schedule.clone(),
            split_source: self.split_source,
        }
    }

    /// Flat `key = value` rendering that [`ExperimentConfig::parse`] reads
    /// back to an equal value.
    pub fn to_text(&self) -> String {
        let d = &self.data;
        let t = &self.train;
        let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ");
        let methods = self.methods.iter().map(|m| m.key()).collect::<Vec<_>>().join(", ");
        let final_epochs = self
            .schedule
            .final_epochs
            .map_or_else(|| "auto".to_string(), |e| e.to_string());
        format!(
            "data.n_train = {}\ndata.n_val = {}\ndata.n_test = {}\ndata.rho = {:?}\n\
             data.mu_core = {:?}\ndata.sigma_core = {:?}\ndata.mu_spur = {:?}\ndata.sigma_spur = {:?}\n\
             data.d_core = {}\ndata.d_spur = {}\ndata.d_noise = {}\ndata.seed = {}\n\
             model.kind = {}\nmodel.hidden_dim = {}\n\
             train.learning_rate = {:?}\ntrain.batch_size = {}\ntrain.eta = {:?}\n\
             train.weight_decay = {:?}\ntrain.max_steps = {}\ntrain.seed = {}\n\
             curriculum.rate = {:?}\ncurriculum.stage_epochs = {}\ncurriculum.final_epochs = {}\n\
             experiment.split_source = {}\nexperiment.methods = {}\n\
             experiment.n_selection_runs = {}\nexperiment.n_report_runs = {}\n\
             experiment.root_seed = {}\nexperiment.output_dir = {}\n\
             grid.learning_rate = {}\ngrid.eta = {}\ngrid.rate = {}\n",
            d.n_train,
            d.n_val,
            d.n_test,
            d.rho,
            d.mu_core,
            d.sigma_core,
            d.mu_spur,
            d.sigma_spur,
            d.d_core,
            d.d_spur,
            d.d_noise,
            d.seed,
            self.model.kind,
            self.model.hidden_dim,
            t.learning_rate,
            t.batch_size,
            t.eta,
            t.weight_decay,
            t.max_steps,
            t.seed,
            self.schedule.rate,
            self.schedule.stage_epochs,
            final_epochs,
            self.split_source,
            methods,
            self.n_selection_runs,
            self.n_report_runs,
            self.root_seed,
            self.output_dir.display(),
            join(&self.grid.learning_rate),
            join(&self.grid.eta),
            join(&self.grid.rate),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_dotted_keys_and_lists() {
        let c = ExperimentConfig::parse(
            "# desk run\n data.rho = 0.9 \ngrid.eta = 0.1,1.0\nexperiment.methods = erm, cegdro\n\
             curriculum.final_epochs = 4 # trailing\nmodel.kind = linear\n",
        )
        .unwrap();
        assert_eq!(c.data.rho, 0.9);
        assert_eq!(c.grid.eta, vec![0.1, 1.0]);
        assert_eq!(c.methods, vec![Method::Erm, Method::Cegdro]);
        assert_eq!(c.schedule.final_epochs, Some(4));
        assert_eq!(c.model.kind, crate::model::ModelKind::Linear);
        assert_eq!(c.data.n_train, DataConfig::default().n_train);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(ExperimentConfig::parse("data.bogus = 1").is_err());
        assert!(ExperimentConfig::parse("data.rho = high").is_err());
        assert!(ExperimentConfig::parse("data.rho = 0.4").is_err());
        assert!(ExperimentConfig::parse("experiment.n_report_runs = 0").is_err());
        assert!(ExperimentConfig::parse("just text").is_err());
        assert!(ExperimentConfig::parse("experiment.methods = erm, sgd").is_err());
    }

    #[test]
    fn text_rendering_round_trips() {
        let mut c = ExperimentConfig::default();
        c.grid.learning_rate = vec![0.3, 0.001];
        c.schedule.final_epochs = Some(3);
        c.data.mu_core = 0.1 + 0.2;
        assert_eq!(ExperimentConfig::parse(&c.to_text()).unwrap(), c);
        assert_eq!(
            ExperimentConfig::parse(&ExperimentConfig::default().to_text()).unwrap(),
            ExperimentConfig::default()
        );
    }
}
