//! The five training methods behind one entry point.

use serde::{Deserialize, Serialize};

use crate::curriculum::{
    resolve_split, run_variant, warmup_erm, CurriculumSchedule, RunManifest, SplitSource, Variant,
};
use crate::data::Splits;
use crate::dro::{Budget, GroupPartition, GroupWeights, Objective, Phase, TrainConfig, TrainLog, Trainer};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, GroupMetrics};
use crate::model::{Architecture, Model, ModelKind};
use crate::sampler::ShuffledSampler;
use crate::seed::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Erm,
    GroupDro,
    Cegdro,
    CegdroEf,
    GroupDroSc,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Erm,
        Method::GroupDro,
        Method::GroupDroSc,
        Method::CegdroEf,
        Method::Cegdro,
    ];

    /// Identifier used in configs, file names and CSV columns.
    pub fn key(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::GroupDro => "groupdro",
            Method::Cegdro => "cegdro",
            Method::CegdroEf => "cegdro_ef",
            Method::GroupDroSc => "groupdro_sc",
        }
    }

    /// Row label in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::GroupDro => "GroupDRO",
            Method::Cegdro => "CeGDRO",
            Method::CegdroEf => "CeGDRO-EF",
            Method::GroupDroSc => "GroupDRO+SC",
        }
    }

    pub fn is_curricular(self) -> bool {
        matches!(self, Method::Cegdro | Method::CegdroEf | Method::GroupDroSc)
    }

    pub fn uses_group_weights(self) -> bool {
        self != Method::Erm
    }

    fn variant(self) -> Option<Variant> {
        match self {
            Method::Cegdro => Some(Variant::Main),
            Method::CegdroEf => Some(Variant::EasyFirstConfirming),
            Method::GroupDroSc => Some(Variant::StandardCurriculum),
            _ => None,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.key() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method `{s}`")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub hidden_dim: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            kind: ModelKind::Mlp1,
            hidden_dim: 16,
        }
    }
}

impl ModelSpec {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        match self.kind {
            ModelKind::Linear => Architecture::linear(input_dim, 2),
            ModelKind::Mlp1 => Architecture::mlp1(input_dim, self.hidden_dim, 2),
        }
    }
}

/// Everything a single run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSettings {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub schedule: CurriculumSchedule,
    pub split_source: SplitSource,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub method: Method,
    pub model: Model,
    pub log: TrainLog,
    /// Present for curriculum methods.
    pub manifest: Option<RunManifest>,
    pub val: GroupMetrics,
    pub test: GroupMetrics,
}

/// Train `method` on `data.train` and evaluate on the validation and test
/// splits.
pub fn run_method(method: Method, data: &Splits, settings: &RunSettings) -> Result<RunOutput> {
    let train = &data.train;
    let arch = settings.model.architecture(train.n_features());
    let config = &settings.train;
    config.validate()?;

    let (model, log, manifest) = if let Some(variant) = method.variant() {
        let run = run_variant(variant, arch, train, settings.split_source, &settings.schedule, config)?;
        (run.model, run.log, Some(run.manifest))
    } else {
        let (partition, objective) = match method {
            Method::Erm => (GroupPartition::annotated(train), Objective::Erm),
            _ => {
                let partition = match settings.split_source {
                    SplitSource::GroundTruth => GroupPartition::annotated(train),
                    SplitSource::Discovered => {
                        let warmup = warmup_erm(arch, train, config)?;
                        resolve_split(SplitSource::Discovered, train, &warmup)?.1
                    }
                };
                let weights = GroupWeights::uniform(partition.n_groups, config.eta)?;
                (partition, Objective::GroupDro(weights))
            }
        };
        let phase = match objective {
            Objective::Erm => Phase::Erm,
            Objective::GroupDro(_) => Phase::GroupDro,
        };
        let mut objective = objective;
        let mut model = Model::init(arch, seed::derive(config.seed, stream::MODEL_INIT, 0))?;
        let mut sampler = ShuffledSampler::new(
            (0..train.len()).collect(),
            config.batch_size,
            seed::derive(config.seed, stream::SHUFFLE, 0),
        )?;
        let mut trainer = Trainer::new(train, &partition, config)?;
        trainer.run(
            &mut model,
            &mut objective,
            &mut sampler,
            Budget::Steps(config.max_steps),
            phase,
        )?;
        (model, trainer.into_log(), None)
    };

    Ok(RunOutput {
        method,
        val: evaluate(&model, &data.val)?,
        test: evaluate(&model, &data.test)?,
        model,
        log,
        manifest,
    })
}
