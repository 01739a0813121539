//! Synthetic subpopulation-shift datasets.
//!
//! Each sample carries a binary label `y`, a binary spurious attribute `a` and
//! a feature vector made of three blocks:
//!
//! ```text
//! [ core (d_core) | spurious (d_spur) | noise (d_noise) ]
//! core     ~ Normal(+-mu_core, sigma_core), sign from y
//! spurious ~ Normal(+-mu_spur, sigma_spur), sign from a
//! noise    ~ Normal(0, 1)
//! ```
//!
//! The group of a sample is `2y + a`. In the training split the attribute
//! agrees with the label for a `rho` fraction of each class, so the spurious
//! block is a shortcut; validation and test splits are group-balanced.
//! Group sizes are fixed by stratified exact counts, never sampled.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::seed::{self, stream};

pub const N_CLASSES: usize = 2;
pub const N_GROUPS: usize = 4;

/// Group id of a (label, attribute) pair.
#[inline]
pub fn group_of(label: usize, attribute: usize) -> usize {
    2 * label + attribute
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    attributes: Vec<usize>,
    group_ids: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, attributes: Vec<usize>) -> Result<Self> {
        let n = features.rows();
        if n == 0 {
            return Err(Error::InvalidConfig("dataset must have at least one sample".into()));
        }
        if labels.len() != n || attributes.len() != n {
            return Err(Error::Shape(format!(
                "{n} feature rows, {} labels, {} attributes",
                labels.len(),
                attributes.len()
            )));
        }
        if let Some(&bad) = labels.iter().chain(&attributes).find(|&&v| v > 1) {
            return Err(Error::InvalidConfig(format!("label/attribute {bad} is not binary")));
        }
        if features.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("non-finite feature value".into()));
        }
        let group_ids = labels.iter().zip(&attributes).map(|(&y, &a)| group_of(y, a)).collect();
        Ok(Self {
            features,
            labels,
            attributes,
            group_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn attributes(&self) -> &[usize] {
        &self.attributes
    }

    pub fn group_ids(&self) -> &[usize] {
        &self.group_ids
    }

    pub fn group_counts(&self) -> [usize; N_GROUPS] {
        let mut counts = [0; N_GROUPS];
        for &g in &self.group_ids {
            counts[g] += 1;
        }
        counts
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            features: self.features.gather_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            attributes: indices.iter().map(|&i| self.attributes[i]).collect(),
            group_ids: indices.iter().map(|&i| self.group_ids[i]).collect(),
        }
    }

    /// Columnar CSV: `sample_id,label,attribute,group,f0..f{d-1}`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "sample_id,label,attribute,group")?;
        for j in 0..self.n_features() {
            write!(out, ",f{j}")?;
        }
        writeln!(out)?;
        for i in 0..self.len() {
            write!(
                out,
                "{i},{},{},{}",
                self.labels[i], self.attributes[i], self.group_ids[i]
            )?;
            for v in self.features.row(i) {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(input: R) -> Result<Dataset> {
        let mut lines = input.lines();
        let header = lines.next().ok_or_else(|| Error::Parse("empty dataset csv".into()))??;
        let n_features = header.split(',').count().saturating_sub(4);
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        let mut attributes = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n_features + 4 {
                return Err(Error::Parse(format!(
                    "line {}: expected {} fields, found {}",
                    lineno + 2,
                    n_features + 4,
                    fields.len()
                )));
            }
            let parse_id = |s: &str| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
            };
            let label = parse_id(fields[1])?;
            let attribute = parse_id(fields[2])?;
            if parse_id(fields[3])? != group_of(label, attribute) {
                return Err(Error::Parse(format!(
                    "line {}: group column disagrees with 2*label+attribute",
                    lineno + 2
                )));
            }
            let row = fields[4..]
                .iter()
                .map(|s| {
                    s.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))
                })
                .collect::<Result<Vec<_>>>()?;
            labels.push(label);
            attributes.push(attribute);
            rows.push(row);
        }
        Dataset::new(Matrix::from_rows(&rows)?, labels, attributes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    /// Fraction of each training class whose attribute equals its label.
    pub rho: f64,
    pub mu_core: f64,
    pub sigma_core: f64,
    pub mu_spur: f64,
    pub sigma_spur: f64,
    pub d_core: usize,
    pub d_spur: usize,
    pub d_noise: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 4000,
            n_val: 1000,
            n_test: 4000,
            rho: 0.95,
            mu_core: 1.0,
            sigma_core: 1.5,
            mu_spur: 1.0,
            sigma_spur: 0.5,
            d_core: 5,
            d_spur: 5,
            d_noise: 10,
            seed: 0,
        }
    }
}

impl DataConfig {
    pub fn n_features(&self) -> usize {
        self.d_core + self.d_spur + self.d_noise
    }

    /// Per-coordinate signal-to-noise ratio of the core block.
    pub fn core_snr(&self) -> f64 {
        self.mu_core / self.sigma_core
    }

    /// Per-coordinate signal-to-noise ratio of the spurious block.
    pub fn spurious_snr(&self) -> f64 {
        self.mu_spur / self.sigma_spur
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.5 && self.rho <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "rho must lie in (0.5, 1], got {}",
                self.rho
            )));
        }
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return Err(Error::InvalidConfig("every split needs at least one sample".into()));
        }
        if !(self.sigma_core > 0.0 && self.sigma_spur > 0.0) {
            return Err(Error::InvalidConfig("noise scales must be positive".into()));
        }
        if !(self.mu_core.is_finite() && self.mu_spur.is_finite()) {
            return Err(Error::InvalidConfig("mean offsets must be finite".into()));
        }
        if self.d_core == 0 || self.d_spur == 0 {
            return Err(Error::InvalidConfig("d_core and d_spur must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Generate the train/val/test splits for `config`. Pure in `config`.
pub fn generate(config: &DataConfig) -> Result<Splits> {
    config.validate()?;
    let train = generate_split(config, config.n_train, Some(config.rho), stream::DATA_TRAIN)?;
    let val = generate_split(config, config.n_val, None, stream::DATA_VAL)?;
    let test = generate_split(config, config.n_test, None, stream::DATA_TEST)?;
    Ok(Splits { train, val, test })
}

/// `rho = None` means group-balanced: half of each class agrees with its label.
fn generate_split(config: &DataConfig, n: usize, rho: Option<f64>, tag: u64) -> Result<Dataset> {
    let mut rng = seed::rng(seed::derive(config.seed, tag, 0));

    let mut cells: Vec<(usize, usize)> = Vec::with_capacity(n);
    let class_sizes = [n - n / 2, n / 2];
    for (label, &n_class) in class_sizes.iter().enumerate() {
        let aligned = match rho {
            Some(rho) => ((rho * n_class as f64).round() as usize).min(n_class),
            None => n_class / 2,
        };
        cells.extend(std::iter::repeat_n((label, label), aligned));
        cells.extend(std::iter::repeat_n((label, 1 - label), n_class - aligned));
    }
    cells.shuffle(&mut rng);

    let core = Normal::new(config.mu_core, config.sigma_core).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let spur = Normal::new(config.mu_spur, config.sigma_spur).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let sign = |bit: usize| if bit == 1 { 1.0 } else { -1.0 };

    let d = config.n_features();
    let mut features = Matrix::zeros(n, d);
    for (i, &(label, attribute)) in cells.iter().enumerate() {
        let row = features.row_mut(i);
        let (core_block, rest) = row.split_at_mut(config.d_core);
        let (spur_block, noise_block) = rest.split_at_mut(config.d_spur);
        // Normal(+-mu, sigma) = +-Normal(mu, sigma), which keeps the draw
        // count per row fixed regardless of the sign.
        for v in core_block {
            *v = sign(label) * core.sample(&mut rng);
        }
        for v in spur_block {
            *v = sign(attribute) * spur.sample(&mut rng);
        }
        for v in noise_block {
            *v = noise.sample(&mut rng);
        }
    }
    let (labels, attributes) = cells.into_iter().unzip();
    Dataset::new(features, labels, attributes)
}

/// Partition of training indices into bias-confirming and bias-conflicting
/// samples. Both lists are ascending.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub bias_confirming: Vec<usize>,
    pub bias_conflicting: Vec<usize>,
}

impl Split {
    pub fn new(bias_confirming: Vec<usize>, bias_conflicting: Vec<usize>) -> Result<Self> {
        if bias_conflicting.is_empty() {
            return Err(Error::EmptyConflicting);
        }
        if bias_confirming.is_empty() {
            return Err(Error::EmptyConfirming);
        }
        Ok(Self {
            bias_confirming,
            bias_conflicting,
        })
    }

    pub fn len(&self) -> usize {
        self.bias_confirming.len() + self.bias_conflicting.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Two-way membership vector over `n` samples: 0 for confirming, 1 for
    /// conflicting.
    pub fn membership(&self, n: usize) -> Vec<usize> {
        let mut out = vec![0; n];
        for &i in &self.bias_conflicting {
            out[i] = 1;
        }
        out
    }
}

/// Split by annotation: a sample confirms the bias iff its attribute equals
/// its label.
pub fn ground_truth_split(train: &Dataset) -> Result<Split> {
    let (confirming, conflicting): (Vec<usize>, Vec<usize>) =
        (0..train.len()).partition(|&i| train.attributes[i] == train.labels[i]);
    if conflicting.is_empty() {
        return Err(Error::EmptyConflicting);
    }
    Split::new(confirming, conflicting)
}
