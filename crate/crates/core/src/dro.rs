//! ERM and online GroupDRO training.
//!
//! GroupDRO keeps a weight `q_g` per group on the probability simplex. Each
//! step computes the mean loss of every group present in the batch, applies
//!
//! ```text
//! q_g <- q_g * exp(eta * loss_g)      for groups in the batch
//! q   <- q / sum(q)
//! ```
//!
//! and then descends `sum_g q_g * loss_g`, i.e. each sample in group `g` is
//! weighted by `q_g / count_g`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Split, N_GROUPS};
use crate::error::{Error, Result};
use crate::model::{Batch, Model};
use crate::sampler::{Sampler, ShuffledSampler};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupWeights {
    q: Vec<f64>,
    eta: f64,
}

/// Tolerance on `sum(q) == 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

impl GroupWeights {
    pub fn uniform(n_groups: usize, eta: f64) -> Result<Self> {
        if n_groups == 0 {
            return Err(Error::InvalidConfig("need at least one group".into()));
        }
        Self::new(vec![1.0 / n_groups as f64; n_groups], eta)
    }

    pub fn new(q: Vec<f64>, eta: f64) -> Result<Self> {
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::InvalidConfig(format!("eta must be finite and >= 0, got {eta}")));
        }
        if q.is_empty() || q.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::InvalidConfig("group weights must be finite and >= 0".into()));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::InvalidConfig(format!("group weights sum to {total}, not 1")));
        }
        Ok(Self { q, eta })
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn n_groups(&self) -> usize {
        self.q.len()
    }
}

/// Exponentiated-gradient update for the listed `(group, mean_loss)` pairs,
/// followed by renormalization onto the simplex.
pub fn groupdro_update(weights: &GroupWeights, group_losses: &[(usize, f64)]) -> Result<GroupWeights> {
    let mut q = weights.q.clone();
    for &(g, loss) in group_losses {
        if g >= q.len() {
            return Err(Error::InvalidConfig(format!(
                "group {g} out of range for {} groups",
                q.len()
            )));
        }
        if !(loss.is_finite() && loss >= 0.0) {
            return Err(Error::InvalidConfig(format!("group {g} has invalid loss {loss}")));
        }
        q[g] *= (weights.eta * loss).exp();
    }
    let total: f64 = q.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Err(Error::DegenerateWeights(total));
    }
    q.iter_mut().for_each(|v| *v /= total);
    Ok(GroupWeights { q, eta: weights.eta })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub eta: f64,
    pub weight_decay: f64,
    pub max_steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            batch_size: 64,
            eta: 0.1,
            weight_decay: 1e-3,
            max_steps: 3000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be finite and >= 0".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::InvalidConfig("eta must be finite and >= 0".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay must be finite and >= 0".into()));
        }
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        Ok(())
    }
}

/// Assignment of training samples to the groups a trainer weights by.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupPartition {
    pub n_groups: usize,
    pub group_of: Vec<usize>,
}

impl GroupPartition {
    /// The four annotation groups `2y + a`.
    pub fn annotated(dataset: &Dataset) -> Self {
        Self {
            n_groups: N_GROUPS,
            group_of: dataset.group_ids().to_vec(),
        }
    }

    /// Two groups: 0 = bias-confirming, 1 = bias-conflicting.
    pub fn from_split(split: &Split, n: usize) -> Self {
        Self {
            n_groups: 2,
            group_of: split.membership(n),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Erm,
    GroupDro,
    Stage(usize),
    Final,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Warmup => f.write_str("warmup"),
            Phase::Erm => f.write_str("erm"),
            Phase::GroupDro => f.write_str("groupdro"),
            Phase::Stage(k) => write!(f, "stage{k}"),
            Phase::Final => f.write_str("final"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based, counted across all phases of a run.
    pub step: usize,
    pub phase: Phase,
    /// Mean loss per group over the batch; `None` for groups absent from it.
    pub group_losses: Vec<Option<f64>>,
    /// Group weights after this step's update; `None` for ERM steps.
    pub q: Option<Vec<f64>>,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub n_groups: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn new(n_groups: usize) -> Self {
        Self {
            n_groups,
            steps: Vec::new(),
            epochs: Vec::new(),
        }
    }

    pub fn total_steps(&self) -> usize {
        self.steps.len()
    }

    pub fn epochs_in(&self, pred: impl Fn(Phase) -> bool) -> usize {
        self.epochs.iter().filter(|e| pred(e.phase)).count()
    }

    /// `step,loss_g0..loss_g{k-1},q_g0..q_g{k-1},train_loss`; absent values
    /// are empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "step")?;
        for g in 0..self.n_groups {
            write!(out, ",loss_g{g}")?;
        }
        for g in 0..self.n_groups {
            write!(out, ",q_g{g}")?;
        }
        writeln!(out, ",train_loss")?;
        for r in &self.steps {
            write!(out, "{}", r.step)?;
            for l in &r.group_losses {
                match l {
                    Some(v) => write!(out, ",{v:?}")?,
                    None => write!(out, ",")?,
                }
            }
            for g in 0..self.n_groups {
                match &r.q {
                    Some(q) => write!(out, ",{:?}", q[g])?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out, ",{:?}", r.train_loss)?;
        }
        Ok(())
    }

    /// Read back a log written by [`TrainLog::write_csv`]. The phase column is
    /// not stored, so records come back as `GroupDro` when they carry group
    /// weights and `Erm` otherwise; epoch records are not restored.
    pub fn read_csv<R: BufRead>(input: R) -> Result<TrainLog> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty step log".into()))??;
        let n_fields = header.split(',').count();
        if n_fields < 4 || (n_fields - 2) % 2 != 0 || !header.starts_with("step,") {
            return Err(Error::Parse(format!("bad step log header `{header}`")));
        }
        let n_groups = (n_fields - 2) / 2;
        let mut log = TrainLog::new(n_groups);
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_fields {
                return Err(Error::Parse(format!(
                    "step log row `{line}` has {} fields",
                    fields.len()
                )));
            }
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| Error::Parse(format!("`{s}`: {e}")))
                }
            };
            let group_losses = fields[1..=n_groups]
                .iter()
                .map(|s| opt(s))
                .collect::<Result<Vec<_>>>()?;
            let q = fields[1 + n_groups..1 + 2 * n_groups]
                .iter()
                .map(|s| opt(s))
                .collect::<Result<Option<Vec<f64>>>>()?;
            log.steps.push(StepRecord {
                step: fields[0].parse().map_err(|e| Error::Parse(format!("step: {e}")))?,
                phase: if q.is_some() { Phase::GroupDro } else { Phase::Erm },
                group_losses,
                q,
                train_loss: opt(fields[n_fields - 1])?.unwrap_or(f64::NAN),
            });
        }
        Ok(log)
    }
}

/// `(group, mean loss)` for present groups, and the count of every group.
type GroupMeans = (Vec<(usize, f64)>, Vec<usize>);

/// Per-group mean of `losses`, listed in ascending group order for groups
/// present in the batch.
fn group_means(losses: &[f64], group_ids: &[usize], n_groups: usize) -> Result<GroupMeans> {
    let mut sums = vec![0.0; n_groups];
    let mut counts = vec![0usize; n_groups];
    for (&l, &g) in losses.iter().zip(group_ids) {
        if g >= n_groups {
            return Err(Error::InvalidConfig(format!(
                "group {g} out of range for {n_groups} groups"
            )));
        }
        sums[g] += l;
        counts[g] += 1;
    }
    let means = (0..n_groups)
        .filter(|&g| counts[g] > 0)
        .map(|g| (g, sums[g] / counts[g] as f64))
        .collect();
    Ok((means, counts))
}

fn per_group_record(means: &[(usize, f64)], n_groups: usize) -> Vec<Option<f64>> {
    let mut out = vec![None; n_groups];
    for &(g, l) in means {
        out[g] = Some(l);
    }
    out
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// One GroupDRO step: group means, weight update, then a weighted SGD step.
/// `step` is only used to label the record and any error.
pub fn groupdro_step(
    model: &mut Model,
    weights: &GroupWeights,
    batch: &Batch,
    config: &TrainConfig,
    step: usize,
) -> Result<(GroupWeights, StepRecord)> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    let pass = model.forward_pass(&batch.features)?;
    let losses = pass.losses(&batch.labels);
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    let n_groups = weights.n_groups();
    let (means, counts) = group_means(&losses, &batch.group_ids, n_groups)?;
    let updated = groupdro_update(weights, &means)?;
    let sample_weights: Vec<f64> = batch
        .group_ids
        .iter()
        .map(|&g| updated.q[g] / counts[g] as f64)
        .collect();
    let grad = model.backward(&pass, batch, &sample_weights)?;
    model.sgd_step(&grad, config.learning_rate, config.weight_decay);
    let record = StepRecord {
        step,
        phase: Phase::GroupDro,
        group_losses: per_group_record(&means, n_groups),
        q: Some(updated.q.clone()),
        train_loss: mean(&losses),
    };
    Ok((updated, record))
}

/// One ERM step on the batch-mean cross-entropy.
pub fn erm_step(
    model: &mut Model,
    batch: &Batch,
    n_groups: usize,
    config: &TrainConfig,
    step: usize,
) -> Result<StepRecord> {
    let pass = model.forward_pass(&batch.features)?;
    let losses = pass.losses(&batch.labels);
    if losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFiniteLoss { step });
    }
    let (means, _) = group_means(&losses, &batch.group_ids, n_groups)?;
    let w = vec![1.0 / batch.len() as f64; batch.len()];
    let grad = model.backward(&pass, batch, &w)?;
    model.sgd_step(&grad, config.learning_rate, config.weight_decay);
    Ok(StepRecord {
        step,
        phase: Phase::Erm,
        group_losses: per_group_record(&means, n_groups),
        q: None,
        train_loss: mean(&losses),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    Erm,
    GroupDro(GroupWeights),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Budget {
    /// Exactly this many full epochs.
    Epochs(usize),
    /// Whole epochs until this many steps; the last epoch is cut short.
    Steps(usize),
}

/// Drives a model through sampler epochs, accumulating one [`TrainLog`]
/// across phases.
pub struct Trainer<'a> {
    dataset: &'a Dataset,
    partition: &'a GroupPartition,
    config: &'a TrainConfig,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, partition: &'a GroupPartition, config: &'a TrainConfig) -> Result<Self> {
        config.validate()?;
        if partition.group_of.len() != dataset.len() {
            return Err(Error::Shape(format!(
                "partition covers {} samples, dataset has {}",
                partition.group_of.len(),
                dataset.len()
            )));
        }
        Ok(Self {
            dataset,
            partition,
            config,
            log: TrainLog::new(partition.n_groups),
        })
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    pub fn run(
        &mut self,
        model: &mut Model,
        objective: &mut Objective,
        sampler: &mut dyn Sampler,
        budget: Budget,
        phase: Phase,
    ) -> Result<()> {
        let mut taken = 0;
        let mut epochs = 0;
        loop {
            match budget {
                Budget::Epochs(n) if epochs >= n => break,
                Budget::Steps(n) if taken >= n => break,
                _ => {}
            }
            let mut steps_this_epoch = 0;
            for indices in sampler.next_epoch() {
                if let Budget::Steps(n) = budget {
                    if taken >= n {
                        break;
                    }
                }
                let batch = Batch::gather(self.dataset, &indices, &self.partition.group_of);
                let step = self.log.steps.len() + 1;
                let mut record = match objective {
                    Objective::Erm => erm_step(model, &batch, self.partition.n_groups, self.config, step)?,
                    Objective::GroupDro(weights) => {
                        let (updated, record) = groupdro_step(model, weights, &batch, self.config, step)?;
                        *weights = updated;
                        record
                    }
                };
                record.phase = phase;
                self.log.steps.push(record);
                taken += 1;
                steps_this_epoch += 1;
            }
            self.log.epochs.push(EpochRecord {
                phase,
                steps: steps_this_epoch,
            });
            epochs += 1;
        }
        Ok(())
    }
}

/// Minibatch SGD on mean cross-entropy over the whole training set for
/// `epochs` epochs.
pub fn train_erm(
    model: &mut Model,
    train: &Dataset,
    config: &TrainConfig,
    epochs: usize,
    shuffle_seed: u64,
) -> Result<TrainLog> {
    if epochs == 0 {
        return Err(Error::InvalidConfig("epochs must be at least 1".into()));
    }
    let partition = GroupPartition::annotated(train);
    let mut trainer = Trainer::new(train, &partition, config)?;
    let mut sampler = ShuffledSampler::new((0..train.len()).collect(), config.batch_size, shuffle_seed)?;
    trainer.run(
        model,
        &mut Objective::Erm,
        &mut sampler,
        Budget::Epochs(epochs),
        Phase::Erm,
    )?;
    Ok(trainer.into_log())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DataConfig};
    use crate::model::Architecture;

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn zero_losses_leave_weights_unchanged() {
        let w = GroupWeights::new(vec![0.1, 0.2, 0.3, 0.4], 3.0).unwrap();
        let u = groupdro_update(&w, &[(0, 0.0), (2, 0.0)]).unwrap();
        assert_close(u.q(), w.q(), 1e-15);
    }

    #[test]
    fn update_matches_hand_evaluation() {
        let w = GroupWeights::uniform(2, 1.0).unwrap();
        let u = groupdro_update(&w, &[(0, std::f64::consts::LN_2), (1, 0.0)]).unwrap();
        assert_close(u.q(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15);
    }

    #[test]
    fn equal_losses_are_symmetric() {
        let w = GroupWeights::uniform(4, 0.7).unwrap();
        let u = groupdro_update(&w, &[(0, 0.4), (1, 0.4), (2, 0.4), (3, 0.4)]).unwrap();
        assert_close(u.q(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn unlisted_groups_keep_relative_proportions() {
        let w = GroupWeights::new(vec![0.1, 0.2, 0.3, 0.4], 1.0).unwrap();
        let u = groupdro_update(&w, &[(3, 2.0)]).unwrap();
        assert!((u.q()[1] / u.q()[0] - 2.0).abs() < 1e-12);
        assert!((u.q()[2] / u.q()[0] - 3.0).abs() < 1e-12);
        assert!(u.q()[3] > 0.4);
    }

    #[test]
    fn update_rejects_bad_inputs() {
        let w = GroupWeights::uniform(2, 1.0).unwrap();
        assert!(groupdro_update(&w, &[(2, 0.1)]).is_err());
        assert!(groupdro_update(&w, &[(0, f64::NAN)]).is_err());
        assert!(groupdro_update(&w, &[(0, -1.0)]).is_err());
        let big = GroupWeights::uniform(2, 1e3).unwrap();
        assert!(matches!(
            groupdro_update(&big, &[(0, 1e3), (1, 1e3)]),
            Err(Error::DegenerateWeights(_))
        ));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let splits = generate(&DataConfig {
            n_train: 200,
            ..DataConfig::default()
        })
        .unwrap();
        let config = TrainConfig {
            learning_rate: 0.0,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let init = Model::init(Architecture::mlp1(20, 4, 2), 3).unwrap();
        let mut model = init.clone();
        train_erm(&mut model, &splits.train, &config, 2, 0).unwrap();
        assert_eq!(model, init);
    }

    #[test]
    fn one_erm_epoch_takes_ceil_steps() {
        let splits = generate(&DataConfig {
            n_train: 203,
            ..DataConfig::default()
        })
        .unwrap();
        let config = TrainConfig {
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut model = Model::init(Architecture::linear(20, 2), 0).unwrap();
        let log = train_erm(&mut model, &splits.train, &config, 1, 0).unwrap();
        assert_eq!(log.total_steps(), 13);
        assert_eq!(log.epochs.len(), 1);
    }

    #[test]
    fn step_budget_truncates_last_epoch() {
        let splits = generate(&DataConfig {
            n_train: 100,
            ..DataConfig::default()
        })
        .unwrap();
        let config = TrainConfig {
            batch_size: 10,
            ..TrainConfig::default()
        };
        let partition = GroupPartition::annotated(&splits.train);
        let mut trainer = Trainer::new(&splits.train, &partition, &config).unwrap();
        let mut model = Model::init(Architecture::linear(20, 2), 0).unwrap();
        let mut sampler = ShuffledSampler::new((0..100).collect(), 10, 0).unwrap();
        trainer
            .run(
                &mut model,
                &mut Objective::Erm,
                &mut sampler,
                Budget::Steps(25),
                Phase::Erm,
            )
            .unwrap();
        assert_eq!(trainer.log().total_steps(), 25);
        let per_epoch: Vec<usize> = trainer.log().epochs.iter().map(|e| e.steps).collect();
        assert_eq!(per_epoch, vec![10, 10, 5]);
    }

    #[test]
    fn step_log_csv_has_fixed_schema() {
        let mut log = TrainLog::new(2);
        log.steps.push(StepRecord {
            step: 1,
            phase: Phase::GroupDro,
            group_losses: vec![Some(0.5), None],
            q: Some(vec![0.6, 0.4]),
            train_loss: 0.5,
        });
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "step,loss_g0,loss_g1,q_g0,q_g1,train_loss\n1,0.5,,0.6,0.4,0.5\n");
        assert_eq!(TrainLog::read_csv(text.as_bytes()).unwrap().steps, log.steps);
    }
}
