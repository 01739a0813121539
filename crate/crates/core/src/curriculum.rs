//! Curriculum-staged GroupDRO.
//!
//! A throwaway model `M'` is trained for one ERM epoch and its per-sample
//! losses rank the training set. The bias-confirming samples are ordered
//! hardest first and the bias-conflicting samples easiest first. Stage `k` of
//! `K = round(1/R)` trains a freshly initialized model with GroupDRO on the
//! first `N_k = floor(|D_C| * k / K)` samples of each order, for `E_s` epochs,
//! with every batch split evenly between the two sets. A final phase of `E_f`
//! epochs runs GroupDRO on the whole training set, still balanced.
//!
//! Two ablations share the machinery: [`Variant::EasyFirstConfirming`] orders
//! the bias-confirming samples easiest first, and
//! [`Variant::StandardCurriculum`] uses one easiest-first order over all
//! samples with no balancing inside stages.

use serde::{Deserialize, Serialize};

use crate::data::{ground_truth_split, Dataset, Split};
use crate::dro::{train_erm, Budget, GroupPartition, GroupWeights, Objective, Phase, TrainConfig, TrainLog, Trainer};
use crate::error::{Error, Result};
use crate::metrics::per_group_mean_loss;
use crate::model::{Architecture, Batch, Model};
use crate::sampler::{BalancedSampler, Sampler, ShuffledSampler};
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitSource {
    GroundTruth,
    Discovered,
}

impl std::str::FromStr for SplitSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ground_truth" => Ok(SplitSource::GroundTruth),
            "discovered" => Ok(SplitSource::Discovered),
            other => Err(Error::Parse(format!("unknown split source `{other}`"))),
        }
    }
}

impl std::fmt::Display for SplitSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitSource::GroundTruth => "ground_truth",
            SplitSource::Discovered => "discovered",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    /// Growth rate `R` of the available fraction per stage, in (0, 1].
    pub rate: f64,
    /// Epochs per stage (`E_s`).
    pub stage_epochs: usize,
    /// Final-phase epochs (`E_f`). `None` fills the remaining step budget.
    pub final_epochs: Option<usize>,
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        Self {
            rate: 0.2,
            stage_epochs: 8,
            final_epochs: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub k: usize,
    /// Fraction `k / K` of the bias-conflicting set in play.
    pub fraction: f64,
    pub n: usize,
}

impl CurriculumSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rate must lie in (0, 1], got {}",
                self.rate
            )));
        }
        if self.stage_epochs == 0 {
            return Err(Error::InvalidConfig("stage_epochs must be at least 1".into()));
        }
        if self.final_epochs == Some(0) {
            return Err(Error::InvalidConfig("final_epochs must be at least 1".into()));
        }
        Ok(())
    }

    /// `K = round(1 / R)`.
    pub fn n_stages(&self) -> usize {
        ((1.0 / self.rate).round() as usize).max(1)
    }

    /// Stage table for a bias-conflicting set of size `n_conflicting`, with
    /// `N_k = floor(n_conflicting * k / K)` in exact integer arithmetic.
    pub fn stages(&self, n_conflicting: usize) -> Result<Vec<Stage>> {
        self.validate()?;
        let big_k = self.n_stages();
        if n_conflicting / big_k == 0 {
            return Err(Error::EmptyStage {
                rate: self.rate,
                n_conflicting,
                min_rate: 1.0 / n_conflicting.max(1) as f64,
            });
        }
        Ok((1..=big_k)
            .map(|k| Stage {
                k,
                fraction: k as f64 / big_k as f64,
                n: n_conflicting * k / big_k,
            })
            .collect())
    }
}

/// The warmup model and its per-sample training losses.
#[derive(Debug, Clone)]
pub struct Warmup {
    pub model: Model,
    /// Loss of the trained warmup model on every training sample.
    pub losses: Vec<f64>,
    pub log: TrainLog,
}

/// Train a freshly initialized model of `arch` for one ERM epoch and score
/// every training sample with it.
pub fn warmup_erm(arch: Architecture, train: &Dataset, config: &TrainConfig) -> Result<Warmup> {
    let mut model = Model::init(arch, seed::derive(config.seed, stream::WARMUP_INIT, 0))?;
    let mut log = train_erm(
        &mut model,
        train,
        config,
        1,
        seed::derive(config.seed, stream::WARMUP_SHUFFLE, 0),
    )?;
    log.steps.iter_mut().for_each(|r| r.phase = Phase::Warmup);
    log.epochs.iter_mut().for_each(|e| e.phase = Phase::Warmup);
    let losses = model.loss_per_sample(&Batch::from_dataset(train))?;
    Ok(Warmup { model, losses, log })
}

/// Misclassified samples are bias-conflicting, the rest bias-confirming.
pub fn discover_split(warmup_model: &Model, train: &Dataset) -> Result<Split> {
    let predictions = warmup_model.predict(train.features())?;
    let (confirming, conflicting): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| predictions[i] == train.labels()[i]);
    Split::new(confirming, conflicting)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Highest loss first.
    HardestFirst,
    /// Lowest loss first.
    EasiestFirst,
}

/// Orders over positions in the split's lists: `confirming[j]` is a position
/// in `split.bias_confirming`, likewise for `conflicting`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SortedOrder {
    pub confirming: Vec<usize>,
    pub conflicting: Vec<usize>,
}

/// Positions of `indices` sorted by `losses[indices[p]]`; ties keep ascending
/// dataset index.
fn order_by_loss(indices: &[usize], losses: &[f64], direction: Direction) -> Vec<usize> {
    let mut positions: Vec<usize> = (0..indices.len()).collect();
    positions.sort_by(|&a, &b| {
        let (la, lb) = (losses[indices[a]], losses[indices[b]]);
        let by_loss = match direction {
            Direction::EasiestFirst => la.total_cmp(&lb),
            Direction::HardestFirst => lb.total_cmp(&la),
        };
        by_loss.then_with(|| indices[a].cmp(&indices[b]))
    });
    positions
}

/// Bias-confirming samples in `confirming_direction` (hardest first for the
/// main method) and bias-conflicting samples easiest first.
pub fn sort_orders(losses: &[f64], split: &Split, confirming_direction: Direction) -> Result<SortedOrder> {
    if let Some(&i) = split
        .bias_confirming
        .iter()
        .chain(&split.bias_conflicting)
        .find(|&&i| i >= losses.len())
    {
        return Err(Error::Shape(format!("no loss for sample {i}")));
    }
    Ok(SortedOrder {
        confirming: order_by_loss(&split.bias_confirming, losses, confirming_direction),
        conflicting: order_by_loss(&split.bias_conflicting, losses, Direction::EasiestFirst),
    })
}

/// Dataset indices selected for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSubset {
    pub confirming: Vec<usize>,
    pub conflicting: Vec<usize>,
}

impl StageSubset {
    pub fn indices(&self) -> Vec<usize> {
        let mut all = self.confirming.clone();
        all.extend(&self.conflicting);
        all
    }
}

/// The first `N_k` samples of each order, for 1-based stage `k`.
pub fn stage_subset(
    split: &Split,
    order: &SortedOrder,
    k: usize,
    schedule: &CurriculumSchedule,
) -> Result<StageSubset> {
    let stages = schedule.stages(split.bias_conflicting.len())?;
    if k == 0 || k > stages.len() {
        return Err(Error::InvalidConfig(format!("stage {k} outside 1..={}", stages.len())));
    }
    let n = stages[k - 1].n;
    if split.bias_confirming.len() < n {
        return Err(Error::InvalidConfig(format!(
            "stage {k} needs {n} bias-confirming samples, split has {}",
            split.bias_confirming.len()
        )));
    }
    Ok(StageSubset {
        confirming: order.confirming[..n]
            .iter()
            .map(|&p| split.bias_confirming[p])
            .collect(),
        conflicting: order.conflicting[..n]
            .iter()
            .map(|&p| split.bias_conflicting[p])
            .collect(),
    })
}

/// All training indices, easiest first under the warmup losses.
pub fn pooled_order(losses: &[f64]) -> Vec<usize> {
    let all: Vec<usize> = (0..losses.len()).collect();
    order_by_loss(&all, losses, Direction::EasiestFirst)
}

/// Stage `k` of the standard easiest-first curriculum: the first
/// `floor(n * k / K)` samples of the pooled order.
pub fn standard_stage_subset(pooled: &[usize], k: usize, n_stages: usize) -> Vec<usize> {
    pooled[..pooled.len() * k / n_stages].to_vec()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Hardest bias-confirming with easiest bias-conflicting, balanced.
    Main,
    /// Easiest bias-confirming with easiest bias-conflicting, balanced.
    EasyFirstConfirming,
    /// Easiest-first over all samples, unbalanced stages.
    StandardCurriculum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub k: usize,
    pub fraction: f64,
    pub n: usize,
    pub subset_size: usize,
    pub epochs: usize,
    pub steps: usize,
    /// Mean loss per weighting group on the stage subset after the stage;
    /// `None` for groups without samples in the subset.
    pub group_losses: Vec<Option<f64>>,
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub variant: Variant,
    pub split_source: SplitSource,
    pub n_confirming: usize,
    pub n_conflicting: usize,
    pub n_groups: usize,
    pub warmup_steps: usize,
    pub stages: Vec<StageReport>,
    pub final_epochs: usize,
    pub final_steps: usize,
    pub total_steps: usize,
    /// File holding the per-step losses and q trajectory.
    pub step_log: String,
}

#[derive(Debug, Clone)]
pub struct CurriculumRun {
    pub model: Model,
    pub log: TrainLog,
    pub manifest: RunManifest,
    pub warmup: Warmup,
    pub split: Split,
}

/// The split and weighting partition for `source`.
pub fn resolve_split(source: SplitSource, train: &Dataset, warmup: &Warmup) -> Result<(Split, GroupPartition)> {
    Ok(match source {
        SplitSource::GroundTruth => (ground_truth_split(train)?, GroupPartition::annotated(train)),
        SplitSource::Discovered => {
            let split = discover_split(&warmup.model, train)?;
            let partition = GroupPartition::from_split(&split, train.len());
            (split, partition)
        }
    })
}

pub fn run_cegdro(
    arch: Architecture,
    train: &Dataset,
    split_source: SplitSource,
    schedule: &CurriculumSchedule,
    config: &TrainConfig,
) -> Result<CurriculumRun> {
    run_variant(Variant::Main, arch, train, split_source, schedule, config)
}

pub fn run_variant(
    variant: Variant,
    arch: Architecture,
    train: &Dataset,
    split_source: SplitSource,
    schedule: &CurriculumSchedule,
    config: &TrainConfig,
) -> Result<CurriculumRun> {
    schedule.validate()?;
    config.validate()?;

    let warmup = warmup_erm(arch, train, config)?;
    let (split, partition) = resolve_split(split_source, train, &warmup)?;
    let stages = schedule.stages(split.bias_conflicting.len())?;
    if variant != Variant::StandardCurriculum && split.bias_confirming.len() < split.bias_conflicting.len() {
        return Err(Error::InvalidConfig(format!(
            "curriculum needs at least as many bias-confirming ({}) as bias-conflicting ({}) samples",
            split.bias_confirming.len(),
            split.bias_conflicting.len()
        )));
    }

    let confirming_direction = match variant {
        Variant::EasyFirstConfirming => Direction::EasiestFirst,
        _ => Direction::HardestFirst,
    };
    let order = sort_orders(&warmup.losses, &split, confirming_direction)?;
    let pooled = pooled_order(&warmup.losses);

    let mut model = Model::init(arch, seed::derive(config.seed, stream::MODEL_INIT, 0))?;
    let mut objective = Objective::GroupDro(GroupWeights::uniform(partition.n_groups, config.eta)?);
    let mut trainer = Trainer::new(train, &partition, config)?;
    let mut reports = Vec::with_capacity(stages.len());

    for stage in &stages {
        let shuffle_seed = seed::derive(config.seed, stream::SHUFFLE, stage.k as u64);
        let (subset, mut sampler): (Vec<usize>, Box<dyn Sampler>) = match variant {
            Variant::StandardCurriculum => {
                let subset = standard_stage_subset(&pooled, stage.k, stages.len());
                let sampler = ShuffledSampler::new(subset.clone(), config.batch_size, shuffle_seed)?;
                (subset, Box::new(sampler))
            }
            _ => {
                let s = stage_subset(&split, &order, stage.k, schedule)?;
                let sampler = BalancedSampler::new(&s.confirming, &s.conflicting, config.batch_size, shuffle_seed)?;
                (s.indices(), Box::new(sampler))
            }
        };
        let before = trainer.log().total_steps();
        trainer.run(
            &mut model,
            &mut objective,
            sampler.as_mut(),
            Budget::Epochs(schedule.stage_epochs),
            Phase::Stage(stage.k),
        )?;
        let subset_batch = Batch::gather(train, &subset, &partition.group_of);
        reports.push(StageReport {
            k: stage.k,
            fraction: stage.fraction,
            n: stage.n,
            subset_size: subset.len(),
            epochs: schedule.stage_epochs,
            steps: trainer.log().total_steps() - before,
            group_losses: per_group_mean_loss(&model, &subset_batch, partition.n_groups)?,
            q: match &objective {
                Objective::GroupDro(w) => w.q().to_vec(),
                Objective::Erm => Vec::new(),
            },
        });
    }

    let mut final_sampler = BalancedSampler::new(
        &split.bias_confirming,
        &split.bias_conflicting,
        config.batch_size,
        seed::derive(config.seed, stream::SHUFFLE, 0),
    )?;
    let curriculum_steps = trainer.log().total_steps();
    let final_epochs = schedule.final_epochs.unwrap_or_else(|| {
        (config.max_steps.saturating_sub(curriculum_steps) / final_sampler.batches_per_epoch()).max(1)
    });
    trainer.run(
        &mut model,
        &mut objective,
        &mut final_sampler,
        Budget::Epochs(final_epochs),
        Phase::Final,
    )?;

    let log = trainer.into_log();
    let manifest = RunManifest {
        variant,
        split_source,
        n_confirming: split.bias_confirming.len(),
        n_conflicting: split.bias_conflicting.len(),
        n_groups: partition.n_groups,
        warmup_steps: warmup.log.total_steps(),
        stages: reports,
        final_epochs,
        final_steps: log.total_steps() - curriculum_steps,
        total_steps: log.total_steps(),
        step_log: "steps.csv".into(),
    };
    Ok(CurriculumRun {
        model,
        log,
        manifest,
        warmup,
        split,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Matrix;

    fn split_of(confirming: Vec<usize>, conflicting: Vec<usize>) -> Split {
        Split::new(confirming, conflicting).unwrap()
    }

    #[test]
    fn orders_by_hand() {
        // D_B at dataset indices 0,1,2 and D_C at 3,4.
        let losses = [0.3, 1.2, 0.7, 0.9, 0.1];
        let split = split_of(vec![0, 1, 2], vec![3, 4]);
        let order = sort_orders(&losses, &split, Direction::HardestFirst).unwrap();
        assert_eq!(order.confirming, vec![1, 2, 0]);
        assert_eq!(order.conflicting, vec![1, 0]);
    }

    #[test]
    fn ties_break_by_ascending_index() {
        let losses = [0.5, 0.5, 0.5, 0.5];
        let split = split_of(vec![0, 1], vec![2, 3]);
        let order = sort_orders(&losses, &split, Direction::HardestFirst).unwrap();
        assert_eq!(order.confirming, vec![0, 1]);
        assert_eq!(order.conflicting, vec![0, 1]);
    }

    #[test]
    fn stage_sizes_use_integer_floor() {
        let schedule = CurriculumSchedule::default();
        let n: Vec<usize> = schedule.stages(7).unwrap().iter().map(|s| s.n).collect();
        assert_eq!(n, vec![1, 2, 4, 5, 7]);
        let s = schedule.stages(50).unwrap();
        assert_eq!(s[0].n, 10);
        assert_eq!(s.last().unwrap().fraction, 1.0);
        assert_eq!(s.last().unwrap().n, 50);
    }

    #[test]
    fn rate_one_is_a_single_stage() {
        let schedule = CurriculumSchedule {
            rate: 1.0,
            ..CurriculumSchedule::default()
        };
        assert_eq!(schedule.stages(3).unwrap().len(), 1);
    }

    #[test]
    fn too_small_rate_reports_minimum() {
        let schedule = CurriculumSchedule {
            rate: 0.1,
            ..CurriculumSchedule::default()
        };
        match schedule.stages(4) {
            Err(Error::EmptyStage { min_rate, .. }) => assert_eq!(min_rate, 0.25),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stage_subsets_are_balanced_and_nested() {
        let losses: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64).collect();
        let split = split_of((0..15).collect(), (15..20).collect());
        let order = sort_orders(&losses, &split, Direction::HardestFirst).unwrap();
        let schedule = CurriculumSchedule::default();
        let mut previous: Vec<usize> = Vec::new();
        for k in 1..=5 {
            let s = stage_subset(&split, &order, k, &schedule).unwrap();
            assert_eq!(s.confirming.len(), k);
            assert_eq!(s.conflicting.len(), k);
            let all = s.indices();
            assert!(previous.iter().all(|i| all.contains(i)));
            previous = all;
        }
        let last = stage_subset(&split, &order, 5, &schedule).unwrap();
        let mut c = last.conflicting.clone();
        c.sort();
        assert_eq!(c, split.bias_conflicting);
        assert!(stage_subset(&split, &order, 6, &schedule).is_err());
    }

    #[test]
    fn discover_split_by_definition() {
        // Linear model whose logit difference is the single feature, so the
        // prediction is 1 iff x > 0.
        let arch = Architecture::linear(1, 2);
        let params = crate::model::Params {
            layers: vec![crate::model::Dense {
                weight: Matrix::from_rows(&[[-1.0], [1.0]]).unwrap(),
                bias: vec![0.0, 0.0],
            }],
        };
        let model = Model::from_params(arch, params).unwrap();
        let features = Matrix::from_rows(&[[-1.0], [1.0], [-2.0]]).unwrap();
        let ds = Dataset::new(features.clone(), vec![0, 1, 1], vec![0, 1, 1]).unwrap();
        let split = discover_split(&model, &ds).unwrap();
        assert_eq!(split.bias_conflicting, vec![2]);
        assert_eq!(split.bias_confirming, vec![0, 1]);

        let perfect = Dataset::new(features, vec![0, 1, 0], vec![0, 1, 0]).unwrap();
        assert!(matches!(discover_split(&model, &perfect), Err(Error::EmptyConflicting)));
    }

    #[test]
    fn standard_stage_takes_global_prefix() {
        let losses = [0.4, 0.1, 0.9, 0.2, 0.3];
        let pooled = pooled_order(&losses);
        assert_eq!(pooled, vec![1, 3, 4, 0, 2]);
        assert_eq!(standard_stage_subset(&pooled, 1, 5), vec![1]);
        assert_eq!(standard_stage_subset(&pooled, 5, 5), pooled);
    }
}
