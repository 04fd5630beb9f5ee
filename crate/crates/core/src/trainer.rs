//! Per-condition parameter tables fitted by full-batch Adam.
//!
//! The `tvcgmm` head fits a [`TvcGmmField`] by negative log-likelihood; the
//! `mse` head fits a plain mean table by squared error, the conditional-mean
//! baseline whose samples are over-smooth.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::var_laplacian;
use crate::formats::{load_field, save_field};
use crate::rng::stream;
use crate::sampling::{mean_field, sample, SampleConfig, SampleMode};
use crate::spectral::MelSpectrogram;
use crate::synth::{ConditionedDataset, SINGULAR_PRE_ACTIVATION};
use crate::tvcgmm::{
    chain_targets, nll_and_gradient, nll_batch, softplus_inv, ChainTargets, Chol3, TvcComponent,
    TvcGmmField, DIAG_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Tvcgmm,
    Mse,
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tvcgmm" => Ok(Self::Tvcgmm),
            "mse" => Ok(Self::Mse),
            other => Err(Error::config(format!(
                "unknown head {other:?} (expected tvcgmm or mse)"
            ))),
        }
    }
}

impl std::fmt::Display for Head {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tvcgmm => "tvcgmm",
            Self::Mse => "mse",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Mixture components per bin; ignored by the mse head.
    pub k: usize,
    pub steps: usize,
    pub learning_rate: f64,
    /// Learning rate at the last step as a fraction of `learning_rate`;
    /// the rate decays geometrically in between. `1.0` keeps it fixed.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub head: Head,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_head(Head::Tvcgmm)
    }
}

impl TrainConfig {
    /// Defaults per head: a decaying rate for the mixture head, a fixed
    /// rate for mse.
    pub fn for_head(head: Head) -> Self {
        let tvcgmm = Self {
            k: 2,
            steps: 2000,
            learning_rate: 0.04,
            lr_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.95,
            epsilon: 1e-8,
            head: Head::Tvcgmm,
            seed: 0,
            log_every: 10,
        };
        match head {
            Head::Tvcgmm => tvcgmm,
            Head::Mse => Self {
                lr_decay: 1.0,
                beta2: 0.999,
                head,
                ..tvcgmm
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::config("k must be at least 1"));
        }
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.log_every == 0 {
            return Err(Error::config("log_every must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::config(format!(
                "lr_decay must lie in (0, 1], got {}",
                self.lr_decay
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    fn components(&self) -> usize {
        match self.head {
            Head::Tvcgmm => self.k,
            Head::Mse => 1,
        }
    }
}

struct Adam {
    lr: f64,
    /// Per-step multiplier on `lr`.
    decay: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    fn new(cfg: &TrainConfig, n: usize) -> Self {
        Self {
            lr: cfg.learning_rate,
            decay: cfg.lr_decay.powf(1.0 / (cfg.steps.max(2) - 1) as f64),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.epsilon);
        }
        self.lr *= self.decay;
    }
}

/// Loss of every condition at one logged step.
#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub step: usize,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub config: TrainConfig,
    pub conditions: Vec<u32>,
    /// One field per entry of `conditions`. The mse head stores its mean
    /// table as a single-component field at the variance floor.
    pub fields: Vec<TvcGmmField>,
    pub curve: Vec<CurvePoint>,
    /// Loss after the last update, per condition.
    pub final_losses: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    conditions: Vec<u32>,
    config: TrainConfig,
    final_losses: Vec<f64>,
    files: Vec<String>,
}

const MANIFEST: &str = "manifest.json";
const LOSS_CSV: &str = "loss.csv";

impl ModelBundle {
    pub fn field(&self, condition: u32) -> Result<&TvcGmmField> {
        self.conditions
            .iter()
            .position(|&c| c == condition)
            .map(|i| &self.fields[i])
            .ok_or_else(|| {
                Error::domain(format!(
                    "unknown condition {condition} (model has {:?})",
                    self.conditions
                ))
            })
    }

    /// Writes `cond_<id>.tvcg` per condition, `manifest.json` and `loss.csv`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (c, field) in self.conditions.iter().zip(&self.fields) {
            let name = format!("cond_{c}.tvcg");
            save_field(dir.join(&name), field)?;
            files.push(name);
        }
        let manifest = Manifest {
            conditions: self.conditions.clone(),
            config: self.config,
            final_losses: self.final_losses.clone(),
            files,
        };
        let path = dir.join(MANIFEST);
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(format!("manifest: {e}")))?;
        fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;

        let path = dir.join(LOSS_CSV);
        let mut w = csv::Writer::from_path(&path)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        let mut header = vec!["step".to_string()];
        header.extend(self.conditions.iter().map(|c| format!("cond_{c}")));
        let csv_err = |e: csv::Error| Error::format(format!("loss csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        for point in &self.curve {
            let mut row = vec![point.step.to_string()];
            row.extend(point.losses.iter().map(|l| format!("{l:.9}")));
            w.write_record(&row).map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        Ok(())
    }

    /// Loads fields and manifest; the loss curve is not read back.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("{}: {e}", path.display())))?;
        if manifest.files.len() != manifest.conditions.len() {
            return Err(Error::format("manifest lists a different number of files and conditions"));
        }
        let fields = manifest
            .files
            .iter()
            .map(|f| load_field(dir.join(f)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: manifest.config,
            conditions: manifest.conditions,
            fields,
            curve: Vec::new(),
            final_losses: manifest.final_losses,
        })
    }
}

fn grouped(dataset: &ConditionedDataset) -> Result<(Vec<u32>, Vec<Vec<&MelSpectrogram>>)> {
    if dataset.is_empty() {
        return Err(Error::domain("dataset is empty"));
    }
    dataset.shape()?;
    let ids = dataset.conditions();
    let groups = ids
        .iter()
        .map(|&c| dataset.for_condition(c).collect())
        .collect();
    Ok((ids, groups))
}

fn targets_of(specs: &[&MelSpectrogram]) -> Result<Vec<ChainTargets>> {
    specs.iter().map(|s| chain_targets(s)).collect()
}

fn moments(batch: &[ChainTargets], t: usize, f: usize) -> ([f64; 3], [f64; 3]) {
    let n = batch.len() as f64;
    let mut mean = [0.0; 3];
    for tg in batch {
        let x = tg.get(t, f).0;
        for d in 0..3 {
            mean[d] += x[d] / n;
        }
    }
    let mut var = [0.0; 3];
    for tg in batch {
        let x = tg.get(t, f).0;
        for d in 0..3 {
            var[d] += (x[d] - mean[d]).powi(2) / n;
        }
    }
    (mean, var.map(f64::sqrt))
}

fn init_field(batch: &[ChainTargets], k: usize, seed: u64, index: usize) -> TvcGmmField {
    let (frames, bins) = batch[0].shape();
    let mut rng = stream(seed, index, 0);
    TvcGmmField::from_fn(frames, bins, k, |t, f, _| {
        let (mut mean, std) = moments(batch, t, f);
        if k > 1 {
            for m in &mut mean {
                let e: f64 = StandardNormal.sample(&mut rng);
                *m += 0.1 * e;
            }
        }
        let diag_pre = std.map(|s| softplus_inv(s.max(1e-3) - DIAG_FLOOR));
        TvcComponent::new(0.0, mean, Chol3 { diag_pre, off: [0.0; 3] })
    })
}

/// Initial tvcgmm fields: per-bin target means (plus 0.1-scale jitter when
/// `k > 1`), per-coordinate target std on the diagonal, zero off-diagonals
/// and equal weights.
pub fn init_fields(dataset: &ConditionedDataset, k: usize, seed: u64) -> Result<ModelBundle> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let (conditions, groups) = grouped(dataset)?;
    let fields = groups
        .iter()
        .enumerate()
        .map(|(i, g)| Ok(init_field(&targets_of(g)?, k, seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let losses = vec![f64::NAN; conditions.len()];
    Ok(ModelBundle {
        config: TrainConfig {
            k,
            seed,
            ..TrainConfig::default()
        },
        conditions,
        fields,
        curve: Vec::new(),
        final_losses: losses,
    })
}

/// Squared-error loss of a mean table against `y[t,f]`, and its gradient.
fn mse_and_gradient(mean: &[f64], specs: &[&MelSpectrogram]) -> (f64, Vec<f64>) {
    let scale = 1.0 / (mean.len() * specs.len()) as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; mean.len()];
    for s in specs {
        for ((g, m), y) in grad.iter_mut().zip(mean).zip(s.values().as_slice()) {
            let r = m - y;
            loss += r * r;
            *g += 2.0 * r * scale;
        }
    }
    (loss * scale, grad)
}

/// Mean table as a single-component field: chain means are the table values
/// at the chain positions, with every Cholesky diagonal at the floor.
pub fn mean_table_field(table: &MelSpectrogram) -> TvcGmmField {
    let (frames, bins) = table.shape();
    TvcGmmField::from_fn(frames, bins, 1, |t, f, _| {
        let mean = [
            table.get(t, f),
            table.get((t + 1).min(frames - 1), f),
            table.get(t, (f + 1).min(bins - 1)),
        ];
        let chol = Chol3 {
            diag_pre: [SINGULAR_PRE_ACTIVATION; 3],
            off: [0.0; 3],
        };
        TvcComponent::new(0.0, mean, chol)
    })
}

struct Fitted {
    field: TvcGmmField,
    losses: Vec<f64>,
    final_loss: f64,
}

fn diverged(step: usize, losses: &[f64]) -> Error {
    Error::Training {
        step,
        last_finite_step: losses.len().saturating_sub(1),
        last_loss: losses.last().copied().unwrap_or(f64::NAN),
    }
}

fn fit_tvcgmm(specs: &[&MelSpectrogram], cfg: &TrainConfig, index: usize) -> Result<Fitted> {
    let batch = targets_of(specs)?;
    let mut field = init_field(&batch, cfg.k, cfg.seed, index);
    let mut params = field.to_params();
    let mut adam = Adam::new(cfg, params.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grad) = nll_and_gradient(&field, &batch)?;
        if !loss.is_finite() {
            return Err(diverged(step, &losses));
        }
        losses.push(loss);
        adam.step(&mut params, &grad.to_params());
        if params.iter().any(|p| !p.is_finite()) {
            return Err(diverged(step + 1, &losses));
        }
        field.set_params(&params);
    }
    let final_loss = nll_batch(&field, &batch)?;
    if !final_loss.is_finite() {
        return Err(diverged(cfg.steps, &losses));
    }
    Ok(Fitted {
        field,
        losses,
        final_loss,
    })
}

fn fit_mse(specs: &[&MelSpectrogram], cfg: &TrainConfig) -> Result<Fitted> {
    let (frames, bins) = specs[0].shape();
    let mut table = vec![0.0; frames * bins];
    let mut adam = Adam::new(cfg, table.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grad) = mse_and_gradient(&table, specs);
        if !loss.is_finite() {
            return Err(diverged(step, &losses));
        }
        losses.push(loss);
        adam.step(&mut table, &grad);
    }
    let final_loss = mse_and_gradient(&table, specs).0;
    if !final_loss.is_finite() {
        return Err(diverged(cfg.steps, &losses));
    }
    let table = MelSpectrogram::new(crate::Grid::from_vec(frames, bins, table)?)?;
    Ok(Fitted {
        field: mean_table_field(&table),
        losses,
        final_loss,
    })
}

/// Fits every condition independently (in parallel) with full-batch Adam.
///
/// `curve` holds one point every `log_every` steps: the loss evaluated
/// before update `step`, so the first logged value reflects
/// `log_every − 1` updates. `final_losses` are evaluated after the last update.
pub fn fit(dataset: &ConditionedDataset, cfg: &TrainConfig) -> Result<ModelBundle> {
    cfg.validate()?;
    let (conditions, groups) = grouped(dataset)?;
    let fitted = groups
        .par_iter()
        .enumerate()
        .map(|(i, specs)| match cfg.head {
            Head::Tvcgmm => fit_tvcgmm(specs, cfg, i),
            Head::Mse => fit_mse(specs, cfg),
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let curve = (0..cfg.steps)
        .filter(|s| (s + 1) % cfg.log_every == 0)
        .map(|step| CurvePoint {
            step,
            losses: fitted.iter().map(|f| f.losses[step]).collect(),
        })
        .collect();
    let mut config = *cfg;
    config.k = cfg.components();
    Ok(ModelBundle {
        config,
        conditions,
        final_losses: fitted.iter().map(|f| f.final_loss).collect(),
        fields: fitted.into_iter().map(|f| f.field).collect(),
        curve,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalConfig {
    pub seed: u64,
    /// Sampled spectrograms averaged per mode.
    pub samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, samples: 20 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    pub condition: u32,
    /// Mean NLL (tvcgmm head) or mean squared error (mse head) on the data.
    pub loss: f64,
    pub var_l_mean: f64,
    pub var_l_naive: f64,
    pub var_l_conditional: f64,
    /// Mean Var_L of the dataset's own records.
    pub var_l_ground_truth: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub head: Head,
    pub rows: Vec<ConditionReport>,
}

/// Seed of the `j`-th evaluation sample.
pub fn sample_seed(seed: u64, j: usize) -> u64 {
    seed.wrapping_add(j as u64)
}

/// Var_L of sampled spectrograms averaged over `samples` fixed seeds.
pub fn mean_sample_var_l(field: &TvcGmmField, mode: SampleMode, eval: &EvalConfig) -> Result<f64> {
    if mode == SampleMode::Mean {
        return var_laplacian(&mean_field(field));
    }
    let n = eval.samples.max(1);
    let mut total = 0.0;
    for j in 0..n {
        let s = sample(field, &SampleConfig::new(mode, sample_seed(eval.seed, j)))?;
        total += var_laplacian(&s)?;
    }
    Ok(total / n as f64)
}

pub fn evaluate(
    bundle: &ModelBundle,
    dataset: &ConditionedDataset,
    eval: &EvalConfig,
) -> Result<EvalReport> {
    let (conditions, groups) = grouped(dataset)?;
    if conditions != bundle.conditions {
        return Err(Error::domain(format!(
            "model conditions {:?} do not match dataset conditions {:?}",
            bundle.conditions, conditions
        )));
    }
    let mut rows = Vec::with_capacity(conditions.len());
    for ((&condition, specs), field) in conditions.iter().zip(&groups).zip(&bundle.fields) {
        if field.shape() != specs[0].shape() {
            return Err(Error::domain(format!(
                "condition {condition}: model is {:?} but data is {:?}",
                field.shape(),
                specs[0].shape()
            )));
        }
        let loss = match bundle.config.head {
            Head::Tvcgmm => nll_batch(field, &targets_of(specs)?)?,
            Head::Mse => {
                let table: Vec<f64> = mean_field(field).values().as_slice().to_vec();
                mse_and_gradient(&table, specs).0
            }
        };
        let mut gt = 0.0;
        for s in specs {
            gt += var_laplacian(s)?;
        }
        rows.push(ConditionReport {
            condition,
            loss,
            var_l_mean: mean_sample_var_l(field, SampleMode::Mean, eval)?,
            var_l_naive: mean_sample_var_l(field, SampleMode::Naive, eval)?,
            var_l_conditional: mean_sample_var_l(field, SampleMode::Conditional, eval)?,
            var_l_ground_truth: gt / specs.len() as f64,
        });
    }
    Ok(EvalReport {
        head: bundle.config.head,
        rows,
    })
}
