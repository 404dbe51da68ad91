//! Training, early stopping, evaluation and the seven-model benchmark.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softplus, Checkpoint as TapeMark, LeafBlock, Tape, Var};
use crate::baselines::{
    linreg_fit, mse_u, select_forest, select_tree, BaselineError, BaselineGrid, BaselineModel, Target,
};
use crate::data::{export_csv, import_csv, Column, DataError, Dataset, FlotationRecord, Split, NUM_INPUTS};
use crate::nn::{AdamState, BoundParams, MlpModel, NnError, Standardizer};
use crate::physics::{
    composite_loss, residual_bidirectional, residual_mass_balance, residual_unidirectional, DecodedLambda,
    ExogenousInputs, LambdaVars, PhysicsError, PhysicsKind, PhysicsParams, StateOutputs, PER_HOUR_TO_PER_MINUTE,
};
use crate::preprocess::{iqr_filter, FilterReport, MinMax, PreprocessError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { step: u64, term: &'static str },
    #[error("non-finite validation MSE after step {step}")]
    NonFiniteValidation { step: u64 },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    #[serde(rename = "datadriven")]
    DataDriven,
    PinnBidirectional,
    PinnUnidirectional,
    #[serde(rename = "pinn-massbalance")]
    PinnMassBalance,
    Linreg,
    Tree,
    Forest,
}

impl ModelKind {
    pub const ALL: [ModelKind; 7] = [
        ModelKind::DataDriven,
        ModelKind::PinnBidirectional,
        ModelKind::PinnUnidirectional,
        ModelKind::PinnMassBalance,
        ModelKind::Linreg,
        ModelKind::Tree,
        ModelKind::Forest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::DataDriven => "datadriven",
            ModelKind::PinnBidirectional => "pinn-bidirectional",
            ModelKind::PinnUnidirectional => "pinn-unidirectional",
            ModelKind::PinnMassBalance => "pinn-massbalance",
            ModelKind::Linreg => "linreg",
            ModelKind::Tree => "tree",
            ModelKind::Forest => "forest",
        }
    }

    pub fn from_name(s: &str) -> Option<ModelKind> {
        ModelKind::ALL.iter().copied().find(|k| k.name() == s)
    }

    pub fn physics(self) -> Option<PhysicsKind> {
        match self {
            ModelKind::PinnBidirectional => Some(PhysicsKind::Bidirectional),
            ModelKind::PinnUnidirectional => Some(PhysicsKind::Unidirectional),
            ModelKind::PinnMassBalance => Some(PhysicsKind::MassBalance),
            _ => None,
        }
    }

    pub fn is_neural(self) -> bool {
        matches!(
            self,
            ModelKind::DataDriven
                | ModelKind::PinnBidirectional
                | ModelKind::PinnUnidirectional
                | ModelKind::PinnMassBalance
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    Cell1Paper,
    Cell2Paper,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Cell1Paper => "cell1-paper",
            Preset::Cell2Paper => "cell2-paper",
        }
    }

    pub fn from_name(s: &str) -> Option<Preset> {
        [Preset::Desk, Preset::Cell1Paper, Preset::Cell2Paper]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

/// Width of the auxiliary rate network input: `t`, eleven process
/// variables and the two grades.
pub const R_NET_INPUTS: usize = 1 + 11 + 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub kind: ModelKind,
    pub u_layers: Vec<usize>,
    pub r_layers: Vec<usize>,
    pub lr: f64,
    pub batch_size: usize,
    /// Validation evaluations (one per epoch) without improvement before stopping.
    pub patience: usize,
    pub tolerance: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Initial value of both rate coefficients of the bidirectional model.
    pub alpha_init: f64,
    /// Samples per tape replay; gradients are accumulated across shards.
    pub shard_size: usize,
    pub jitter: f64,
    pub grid: BaselineGrid,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataPaths>,
}

/// Locations of the three split CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPaths {
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
}

impl DataPaths {
    /// `train.csv`, `val.csv` and `test.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            train: dir.join("train.csv"),
            val: dir.join("val.csv"),
            test: dir.join("test.csv"),
        }
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset, kind: ModelKind, seed: u64) -> Self {
        let base = TrainConfig {
            kind,
            u_layers: vec![12, 32, 64, 32, 2],
            r_layers: vec![R_NET_INPUTS, 16, 1],
            lr: 1e-3,
            batch_size: 128,
            patience: 50,
            tolerance: 1e-5,
            max_steps: 20_000,
            seed,
            alpha_init: 0.003,
            shard_size: 32,
            jitter: 1e-8,
            grid: BaselineGrid::default(),
            data: None,
        };
        match preset {
            Preset::Desk => base,
            Preset::Cell1Paper => TrainConfig {
                u_layers: vec![12, 256, 512, 256, 2],
                r_layers: vec![R_NET_INPUTS, 100, 1],
                lr: 1e-5,
                patience: 20_000,
                max_steps: 5_000_000,
                ..base
            },
            Preset::Cell2Paper => TrainConfig {
                u_layers: vec![12, 128, 256, 128, 2],
                r_layers: vec![R_NET_INPUTS, 400, 1],
                lr: 1e-5,
                patience: 30_000,
                max_steps: 5_000_000,
                ..base
            },
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.shard_size == 0 {
            return bad("batch and shard size must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if !(self.tolerance > 0.0) {
            return bad(format!("tolerance {} must be positive", self.tolerance));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {}", self.lr));
        }
        if self.kind.is_neural() {
            if self.u_layers.first() != Some(&NUM_INPUTS) || self.u_layers.last() != Some(&2) {
                return bad(format!("u-net must map {NUM_INPUTS} inputs to 2 outputs, got {:?}", self.u_layers));
            }
            if self.kind == ModelKind::PinnUnidirectional
                && (self.r_layers.first() != Some(&R_NET_INPUTS) || self.r_layers.last() != Some(&1))
            {
                return bad(format!("R-net must map {R_NET_INPUTS} inputs to 1 output, got {:?}", self.r_layers));
            }
        }
        if !(self.alpha_init > 0.0) {
            return bad("alpha_init must be positive".into());
        }
        Ok(())
    }
}

/// Stop/best bookkeeping over a stream of validation losses.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopper {
    pub patience: usize,
    pub tolerance: f64,
    pub best: f64,
    /// 1-based index of the last improving evaluation.
    pub best_index: usize,
    pub seen: usize,
    pub since_best: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, tolerance: f64) -> Self {
        EarlyStopper {
            patience,
            tolerance,
            best: f64::INFINITY,
            best_index: 0,
            seen: 0,
            since_best: 0,
        }
    }

    /// Records one evaluation; returns whether it improved on the best.
    pub fn observe(&mut self, loss: f64) -> bool {
        self.seen += 1;
        let improved = self.best - loss > self.tolerance;
        if improved {
            self.best = loss;
            self.best_index = self.seen;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        improved
    }

    pub fn should_stop(&self) -> bool {
        self.since_best >= self.patience
    }
}

/// Replays a validation history. Returns the 1-based entry after which
/// training stops (if it does) and the 1-based best index.
pub fn early_stop(history: &[f64], patience: usize, tolerance: f64) -> (Option<usize>, usize) {
    let mut s = EarlyStopper::new(patience, tolerance);
    for (i, &l) in history.iter().enumerate() {
        s.observe(l);
        if s.should_stop() {
            return (Some(i + 1), s.best_index);
        }
    }
    (None, s.best_index)
}

/// MSE and MRE of one output.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub mse: f64,
    pub mre: f64,
    /// Samples left out of the MRE because `|actual| < 1e-9`.
    pub mre_excluded: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub c_p: OutputMetrics,
    pub c_f: OutputMetrics,
    /// Squared error summed over both outputs, averaged over samples.
    pub mse_u: f64,
    pub n: usize,
}

pub const MRE_EPS: f64 = 1e-9;

pub fn output_metrics(pred: &[f64], actual: &[f64]) -> Result<OutputMetrics, TrainError> {
    if pred.is_empty() || pred.len() != actual.len() {
        return Err(TrainError::Eval(format!(
            "{} predictions for {} samples",
            pred.len(),
            actual.len()
        )));
    }
    let mse = pred.iter().zip(actual).map(|(p, a)| (p - a) * (p - a)).sum::<f64>() / pred.len() as f64;
    let mut rel = 0.0;
    let mut used = 0usize;
    for (p, a) in pred.iter().zip(actual) {
        if a.abs() >= MRE_EPS {
            rel += (p - a).abs() / a.abs();
            used += 1;
        }
    }
    if used == 0 {
        return Err(TrainError::Eval("every sample has |actual| < 1e-9; MRE undefined".into()));
    }
    Ok(OutputMetrics {
        mse,
        mre: rel / used as f64,
        mre_excluded: pred.len() - used,
    })
}

pub fn evaluate_predictions(pred: &[Target], actual: &[Target]) -> Result<Metrics, TrainError> {
    let col = |v: &[Target], k: usize| v.iter().map(|r| r[k]).collect::<Vec<_>>();
    Ok(Metrics {
        c_p: output_metrics(&col(pred, 0), &col(actual, 0))?,
        c_f: output_metrics(&col(pred, 1), &col(actual, 1))?,
        mse_u: mse_u(pred, actual),
        n: actual.len(),
    })
}

/// A neural soft sensor with its fixed input/output standardization and,
/// for the physics-informed kinds, the physical parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralModel {
    pub kind: ModelKind,
    pub u_net: MlpModel,
    pub input_std: Standardizer,
    pub output_std: Standardizer,
    pub physics: Option<PhysicsParams>,
    pub r_net: Option<MlpModel>,
    pub r_input_std: Option<Standardizer>,
    /// `R = r_scale · softplus(r_net(·))`.
    pub r_scale: f64,
}

impl NeuralModel {
    pub fn init(config: &TrainConfig, train: &Dataset) -> Result<Self, TrainError> {
        let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
        let u_seed: u64 = seeds.gen();
        let r_seed: u64 = seeds.gen();
        let inputs = train.inputs();
        let targets: Vec<Vec<f64>> = train.targets().iter().map(|t| t.to_vec()).collect();
        let physics = config.kind.physics().map(|k| PhysicsParams::new(k, config.alpha_init));
        let unidirectional = config.kind == ModelKind::PinnUnidirectional;
        let r_net = if unidirectional {
            Some(MlpModel::init(&config.r_layers, r_seed)?)
        } else {
            None
        };
        let r_input_std = unidirectional.then(|| {
            let rows: Vec<Vec<f64>> = train.records.iter().map(|r| r.0.to_vec()).collect();
            Standardizer::fit(&rows)
        });
        // typical magnitude of the froth-to-concentrate mass flow Q_c·C_f
        let r_scale = if train.is_empty() {
            1.0
        } else {
            let m = train
                .records
                .iter()
                .map(|r| r.get(Column::Qc) * PER_HOUR_TO_PER_MINUTE * r.get(Column::Cf))
                .sum::<f64>()
                / train.len() as f64;
            if m > 0.0 {
                m
            } else {
                1.0
            }
        };
        Ok(NeuralModel {
            kind: config.kind,
            u_net: MlpModel::init(&config.u_layers, u_seed)?,
            input_std: Standardizer::fit(&inputs),
            output_std: Standardizer::fit(&targets),
            physics,
            r_net,
            r_input_std,
            r_scale,
        })
    }

    pub fn predict(&self, input: &[f64]) -> Result<Target, TrainError> {
        let z = self.u_net.predict(&self.input_std.forward(input))?;
        let u = self.output_std.inverse(&z);
        Ok([u[0], u[1]])
    }

    pub fn predict_dataset(&self, d: &Dataset) -> Result<Vec<Target>, TrainError> {
        d.records.iter().map(|r| self.predict(&r.inputs())).collect()
    }

    /// All trainable parameters: u-net, raw physical parameters, R-net.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut p = self.u_net.params().to_vec();
        if let Some(ph) = &self.physics {
            p.extend(ph.raw());
        }
        if let Some(r) = &self.r_net {
            p.extend_from_slice(r.params());
        }
        p
    }

    pub fn set_flat_params(&mut self, p: &[f64]) -> Result<(), TrainError> {
        let nu = self.u_net.num_params();
        self.u_net.params_mut().copy_from_slice(&p[..nu]);
        let mut off = nu;
        if let Some(ph) = self.physics.as_mut() {
            let k = ph.kind.raw_len();
            ph.set_raw(&p[off..off + k])?;
            off += k;
        }
        if let Some(r) = self.r_net.as_mut() {
            let k = r.num_params();
            r.params_mut().copy_from_slice(&p[off..off + k]);
        }
        Ok(())
    }

    pub fn lambda(&self) -> Option<DecodedLambda> {
        self.physics.as_ref().map(|p| p.decode())
    }
}

/// Parameters bound at the start of a tape.
struct Bound {
    u: BoundParams,
    lambda: Option<(LeafBlock, LambdaVars)>,
    r: Option<BoundParams>,
    mark: TapeMark,
}

impl NeuralModel {
    fn bind(&self, tape: &mut Tape) -> Bound {
        tape.clear();
        let u = self.u_net.bind(tape);
        let lambda = self.physics.as_ref().map(|p| p.bind(tape));
        let r = self.r_net.as_ref().map(|r| r.bind(tape));
        Bound {
            u,
            lambda,
            r,
            mark: tape.checkpoint(),
        }
    }

    /// Records one sample: returns the (C_p, C_f) outputs with time tangents
    /// when `seed_time` is set.
    fn taped_outputs(
        &self,
        tape: &mut Tape,
        b: &Bound,
        rec: &FlotationRecord,
        seed_time: bool,
    ) -> Result<(Vec<Var>, [Var; 2]), TrainError> {
        let x = rec.inputs();
        let xs: Vec<Var> = x
            .iter()
            .enumerate()
            .map(|(i, &v)| tape.lift(v, if seed_time && i == 0 { 1.0 } else { 0.0 }))
            .collect();
        let z = self.input_std.forward_taped(tape, &xs);
        let out = self.u_net.forward(tape, b.u, &z)?;
        let u = self.output_std.inverse_taped(tape, &out);
        Ok((xs, [u[0], u[1]]))
    }

    fn rate(&self, tape: &mut Tape, b: &Bound, xs: &[Var], u: [Var; 2]) -> Result<Var, TrainError> {
        let (net, std, bound) = match (&self.r_net, &self.r_input_std, b.r) {
            (Some(n), Some(s), Some(bp)) => (n, s, bp),
            _ => return Err(TrainError::Config("unidirectional model lacks its rate network".into())),
        };
        let mut input: Vec<Var> = xs.iter().map(|v| v.detached()).collect();
        input.push(u[0].detached());
        input.push(u[1].detached());
        let z = std.forward_taped(tape, &input);
        let out = net.forward(tape, bound, &z)?;
        let sp = tape.softplus(out[0]);
        Ok(tape.scale(sp, self.r_scale))
    }

    /// Loss of one shard with gradients accumulated into `grad`.
    /// Returns `(total, mse_u, mse_f)` contributions of the shard.
    fn shard_loss(
        &self,
        tape: &mut Tape,
        b: &Bound,
        recs: &[&FlotationRecord],
        normalizer: usize,
        grad: &mut [f64],
    ) -> Result<(f64, f64, Option<f64>), TrainError> {
        tape.truncate(b.mark);
        let physics = self.kind.physics();
        let mut preds = Vec::with_capacity(recs.len());
        let mut residuals = Vec::with_capacity(recs.len());
        let mut targets = Vec::with_capacity(recs.len());
        for rec in recs {
            let (xs, u) = self.taped_outputs(tape, b, rec, physics.is_some())?;
            targets.push(rec.targets());
            if let (Some(kind), Some((_, lambda))) = (physics, &b.lambda) {
                let inputs = ExogenousInputs::from_record(rec);
                let st = StateOutputs::from_outputs(tape, u[0], u[1]);
                let f = match kind {
                    PhysicsKind::Bidirectional => {
                        let (a, c) = residual_bidirectional(tape, &inputs, &st, lambda);
                        vec![a, c]
                    }
                    PhysicsKind::Unidirectional => {
                        let r = self.rate(tape, b, &xs, u)?;
                        let (a, c) = residual_unidirectional(tape, &inputs, &st, lambda, r);
                        vec![a, c]
                    }
                    PhysicsKind::MassBalance => vec![residual_mass_balance(tape, &inputs, &st, lambda)],
                };
                residuals.push(f);
            }
            preds.push([u[0].detached(), u[1].detached()]);
        }
        let res = physics.map(|k| (&residuals[..], k));
        let terms = composite_loss(tape, &targets, &preds, res, normalizer)?;
        tape.backward(terms.total).map_err(PhysicsError::from)?;
        let mut off = 0;
        for blk in [Some(b.u.0), b.lambda.as_ref().map(|l| l.0), b.r.map(|r| r.0)]
            .into_iter()
            .flatten()
        {
            for (g, a) in grad[off..off + blk.len()].iter_mut().zip(tape.block_adjoints(blk)) {
                *g += a;
            }
            off += blk.len();
        }
        Ok((
            tape.value(terms.total),
            tape.value(terms.mse_u),
            terms.mse_f.map(|v| tape.value(v)),
        ))
    }
}

/// One row of the per-epoch history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: f64,
    pub train_mse_u: f64,
    pub train_mse_f: Option<f64>,
    pub val_mse_u: f64,
}

/// Test-set traces scaled to [0, 1] by the actual values' range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub t: Vec<f64>,
    pub c_p_actual: Vec<f64>,
    pub c_p_pred: Vec<f64>,
    pub c_f_actual: Vec<f64>,
    pub c_f_pred: Vec<f64>,
}

impl Trace {
    pub fn build(d: &Dataset, pred: &[Target]) -> Self {
        let scale = |actual: Vec<f64>, p: Vec<f64>| -> (Vec<f64>, Vec<f64>) {
            match MinMax::fit(&actual) {
                Ok(m) => (
                    actual.iter().map(|&v| m.scale(v)).collect(),
                    p.iter().map(|&v| m.scale(v)).collect(),
                ),
                Err(_) => (actual, p),
            }
        };
        let (c_p_actual, c_p_pred) = scale(d.column(Column::Cp), pred.iter().map(|r| r[0]).collect());
        let (c_f_actual, c_f_pred) = scale(d.column(Column::Cf), pred.iter().map(|r| r[1]).collect());
        Trace {
            t: d.column(Column::T),
            c_p_actual,
            c_p_pred,
            c_f_actual,
            c_f_pred,
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        w.write_record(["t", "C_p_actual", "C_p_pred", "C_f_actual", "C_f_pred"])
            .map_err(|e| io_err(path, e))?;
        for i in 0..self.t.len() {
            w.write_record(
                [self.t[i], self.c_p_actual[i], self.c_p_pred[i], self.c_f_actual[i], self.c_f_pred[i]]
                    .iter()
                    .map(|v| v.to_string()),
            )
            .map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Full account of one training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub kind: ModelKind,
    pub config: TrainConfig,
    /// Full-train-set MSE_u before the first update (neural kinds).
    pub initial_train_mse_u: Option<f64>,
    pub history: Vec<EpochRecord>,
    /// 1-based index into `history` of the retained checkpoint.
    pub best_epoch: usize,
    pub best_step: u64,
    pub best_val_mse_u: f64,
    pub steps: u64,
    pub stopped_early: bool,
    pub val: Metrics,
    pub test: Metrics,
    pub lambda: Option<DecodedLambda>,
    /// Chosen baseline hyperparameters and their grid scores, when selected.
    pub selection: Option<serde_json::Value>,
    pub trace: Trace,
    /// Not serialized, so reports stay byte-identical across runs.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// A fitted model of any kind, as checkpointed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TrainedModel {
    Neural(NeuralModel),
    Baseline(BaselineModel),
}

impl TrainedModel {
    pub fn predict(&self, input: &[f64]) -> Result<Target, TrainError> {
        match self {
            TrainedModel::Neural(m) => m.predict(input),
            TrainedModel::Baseline(b) => Ok(b.predict(input)),
        }
    }

    pub fn predict_dataset(&self, d: &Dataset) -> Result<Vec<Target>, TrainError> {
        d.records.iter().map(|r| self.predict(&r.inputs())).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let text = serde_json::to_string(self).map_err(|e| io_err(path, e))?;
        std::fs::write(path, text).map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| io_err(path, e))
    }
}

/// Metrics of a model on a dataset.
pub fn evaluate(model: &TrainedModel, d: &Dataset) -> Result<Metrics, TrainError> {
    evaluate_predictions(&model.predict_dataset(d)?, &d.targets())
}

/// The three splits a run consumes.
#[derive(Clone, Debug)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn load(paths: &DataPaths) -> Result<Self, TrainError> {
        Ok(Splits {
            train: import_csv(&paths.train)?,
            val: import_csv(&paths.val)?,
            test: import_csv(&paths.test)?,
        })
    }

    pub fn get(&self, split: Split) -> &Dataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<(), TrainError> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        for split in Split::ALL {
            export_csv(self.get(split), &dir.join(format!("{}.csv", split.name())))?;
        }
        Ok(())
    }

    /// Each split passed through the IQR filter over every non-time column,
    /// with fences computed per split.
    pub fn filtered(&self) -> Result<(Splits, [FilterReport; 3]), PreprocessError> {
        let f = |d: &Dataset| iqr_filter(d, &Column::FILTERABLE);
        let (tr, va, te) = (f(&self.train)?, f(&self.val)?, f(&self.test)?);
        Ok((
            Splits {
                train: tr.dataset.clone(),
                val: va.dataset.clone(),
                test: te.dataset.clone(),
            },
            [tr, va, te],
        ))
    }
}

/// Trains one model and returns its report and best checkpoint.
pub fn train_model(config: &TrainConfig, data: &Splits) -> Result<(RunReport, TrainedModel), TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::Config("empty training set".into()));
    }
    let started = Instant::now();
    let (mut report, model) = if config.kind.is_neural() {
        train_neural(config, data)?
    } else {
        fit_baseline(config, data)?
    };
    report.wall_clock_secs = started.elapsed().as_secs_f64();
    Ok((report, model))
}

fn fit_baseline(config: &TrainConfig, data: &Splits) -> Result<(RunReport, TrainedModel), TrainError> {
    let (x, y) = (data.train.inputs(), data.train.targets());
    let (xv, yv) = (data.val.inputs(), data.val.targets());
    let (model, selection) = match config.kind {
        ModelKind::Linreg => (BaselineModel::Linear(linreg_fit(&x, &y, config.jitter)?), None),
        ModelKind::Tree => {
            let (m, sel) = select_tree(&x, &y, &xv, &yv, &config.grid)?;
            (BaselineModel::Tree(m), Some(serde_json::to_value(sel).expect("serializable")))
        }
        ModelKind::Forest => {
            let (m, sel) = select_forest(&x, &y, &xv, &yv, &config.grid, config.seed)?;
            (BaselineModel::Forest(m), Some(serde_json::to_value(sel).expect("serializable")))
        }
        k => return Err(TrainError::Config(format!("{} is not a baseline", k.name()))),
    };
    let model = TrainedModel::Baseline(model);
    let val = evaluate(&model, &data.val)?;
    let test_pred = model.predict_dataset(&data.test)?;
    let test = evaluate_predictions(&test_pred, &data.test.targets())?;
    Ok((
        RunReport {
            kind: config.kind,
            config: config.clone(),
            initial_train_mse_u: None,
            history: Vec::new(),
            best_epoch: 0,
            best_step: 0,
            best_val_mse_u: val.mse_u,
            steps: 0,
            stopped_early: false,
            val,
            test,
            lambda: None,
            selection,
            trace: Trace::build(&data.test, &test_pred),
            wall_clock_secs: 0.0,
        },
        model,
    ))
}

fn full_mse_u(model: &NeuralModel, d: &Dataset) -> Result<f64, TrainError> {
    Ok(mse_u(&model.predict_dataset(d)?, &d.targets()))
}

fn train_neural(config: &TrainConfig, data: &Splits) -> Result<(RunReport, TrainedModel), TrainError> {
    let mut model = NeuralModel::init(config, &data.train)?;
    let mut params = model.flat_params();
    let mut adam = AdamState::new(params.len(), config.lr);
    let mut grad = vec![0.0; params.len()];
    let mut tape = Tape::new();
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    order_rng.set_stream(1);
    let n = data.train.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut stopper = EarlyStopper::new(config.patience, config.tolerance);
    let mut history = Vec::new();
    let mut best = (model.clone(), 0u64);
    let initial = full_mse_u(&model, &data.train)?;
    let mut step = 0u64;
    let mut stopped_early = false;
    'epochs: while step < config.max_steps {
        order.shuffle(&mut order_rng);
        let (mut sum_total, mut sum_u, mut sum_f) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for batch in order.chunks(config.batch_size) {
            if step >= config.max_steps {
                break;
            }
            grad.iter_mut().for_each(|g| *g = 0.0);
            let b = model.bind(&mut tape);
            let recs: Vec<&FlotationRecord> = batch.iter().map(|&i| &data.train.records[i]).collect();
            let (mut total, mut lu, mut lf) = (0.0, 0.0, None::<f64>);
            for shard in recs.chunks(config.shard_size) {
                let (t, u, f) = model.shard_loss(&mut tape, &b, shard, batch.len(), &mut grad)?;
                total += t;
                lu += u;
                lf = f.map(|f| lf.unwrap_or(0.0) + f);
            }
            if !total.is_finite() {
                let term = if lu.is_finite() { "residual" } else { "data" };
                return Err(TrainError::NonFiniteLoss { step, term });
            }
            adam.step(&mut params, &grad)?;
            model.set_flat_params(&params)?;
            step += 1;
            sum_total += total;
            sum_u += lu;
            sum_f += lf.unwrap_or(0.0);
            batches += 1;
        }
        if batches == 0 {
            break;
        }
        let val = full_mse_u(&model, &data.val)?;
        if !val.is_finite() {
            return Err(TrainError::NonFiniteValidation { step });
        }
        history.push(EpochRecord {
            epoch: history.len() + 1,
            step,
            train_loss: sum_total / batches as f64,
            train_mse_u: sum_u / batches as f64,
            train_mse_f: model.physics.as_ref().map(|_| sum_f / batches as f64),
            val_mse_u: val,
        });
        if stopper.observe(val) {
            best = (model.clone(), step);
        }
        if stopper.should_stop() {
            stopped_early = true;
            break 'epochs;
        }
    }
    let (best_model, best_step) = best;
    let trained = TrainedModel::Neural(best_model.clone());
    let val = evaluate(&trained, &data.val)?;
    let test_pred = trained.predict_dataset(&data.test)?;
    let test = evaluate_predictions(&test_pred, &data.test.targets())?;
    Ok((
        RunReport {
            kind: config.kind,
            config: config.clone(),
            initial_train_mse_u: Some(initial),
            best_epoch: stopper.best_index,
            best_step,
            best_val_mse_u: stopper.best,
            steps: step,
            stopped_early,
            history,
            val,
            test,
            lambda: best_model.lambda(),
            selection: None,
            trace: Trace::build(&data.test, &test_pred),
            wall_clock_secs: 0.0,
        },
        trained,
    ))
}

/// Loss of a batch under the current parameters, without updating them.
/// Returns `(total, mse_u, mse_f)` and the gradient.
pub fn batch_loss(
    model: &NeuralModel,
    records: &[FlotationRecord],
    shard_size: usize,
) -> Result<((f64, f64, Option<f64>), Vec<f64>), TrainError> {
    let mut tape = Tape::new();
    let mut grad = vec![0.0; model.flat_params().len()];
    let b = model.bind(&mut tape);
    let recs: Vec<&FlotationRecord> = records.iter().collect();
    let (mut total, mut lu, mut lf) = (0.0, 0.0, None::<f64>);
    for shard in recs.chunks(shard_size.max(1)) {
        let (t, u, f) = model.shard_loss(&mut tape, &b, shard, records.len(), &mut grad)?;
        total += t;
        lu += u;
        lf = f.map(|f| lf.unwrap_or(0.0) + f);
    }
    Ok(((total, lu, lf), grad))
}

/// One row of the comparison table; metrics are for `C_f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub model: String,
    pub status: String,
    pub val_mse: f64,
    pub val_mre: f64,
    pub test_mse: f64,
    pub test_mre: f64,
    pub test_mse_c_p: f64,
    pub test_mre_c_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub seed: u64,
    pub rows: Vec<BenchRow>,
}

impl BenchmarkTable {
    pub fn row(&self, kind: ModelKind) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.model == kind.name())
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| io_err(path, e))?;
        }
        w.flush().map_err(|e| io_err(path, e))
    }
}

/// Per-kind outcome of a benchmark.
pub struct BenchmarkRun {
    pub table: BenchmarkTable,
    pub runs: Vec<(ModelKind, Result<(RunReport, TrainedModel), TrainError>)>,
}

/// Number of worker threads: `FLOTAPINN_THREADS` if set, else all cores.
pub fn thread_budget() -> usize {
    std::env::var("FLOTAPINN_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Trains every model kind on the same splits. Failed runs are kept in the
/// table with their error as status.
pub fn run_benchmark(configs: &[TrainConfig], data: &Splits, seed: u64) -> BenchmarkRun {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_budget())
        .build()
        .expect("thread pool");
    let runs: Vec<_> = pool.install(|| {
        configs
            .par_iter()
            .map(|c| (c.kind, train_model(c, data)))
            .collect()
    });
    let rows = runs
        .iter()
        .map(|(kind, r)| match r {
            Ok((rep, _)) => BenchRow {
                model: kind.name().into(),
                status: "ok".into(),
                val_mse: rep.val.c_f.mse,
                val_mre: rep.val.c_f.mre,
                test_mse: rep.test.c_f.mse,
                test_mre: rep.test.c_f.mre,
                test_mse_c_p: rep.test.c_p.mse,
                test_mre_c_p: rep.test.c_p.mre,
            },
            Err(e) => BenchRow {
                model: kind.name().into(),
                status: format!("failed: {e}"),
                val_mse: f64::NAN,
                val_mre: f64::NAN,
                test_mse: f64::NAN,
                test_mre: f64::NAN,
                test_mse_c_p: f64::NAN,
                test_mre_c_p: f64::NAN,
            },
        })
        .collect();
    BenchmarkRun {
        table: BenchmarkTable { seed, rows },
        runs,
    }
}

/// Config for every kind from one preset.
pub fn preset_configs(preset: Preset, seed: u64) -> Vec<TrainConfig> {
    ModelKind::ALL
        .iter()
        .map(|&k| TrainConfig::preset(preset, k, seed))
        .collect()
}

/// Writes the table (CSV + JSON), one report, checkpoint and trace per model.
pub fn write_benchmark(run: &BenchmarkRun, dir: &Path) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    run.table.write_csv(&dir.join("benchmark.csv"))?;
    let json = serde_json::to_string_pretty(&run.table).map_err(|e| io_err(dir, e))?;
    std::fs::write(dir.join("benchmark.json"), json).map_err(|e| io_err(dir, e))?;
    for (kind, r) in &run.runs {
        if let Ok((rep, model)) = r {
            write_run(rep, model, dir, kind.name())?;
        }
    }
    Ok(())
}

/// `report_<name>.json`, `checkpoint_<name>.json`, `trace_<name>.csv` and,
/// for neural runs, `history_<name>.csv`.
pub fn write_run(rep: &RunReport, model: &TrainedModel, dir: &Path, name: &str) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join(format!("report_{name}.json"));
    let json = serde_json::to_string_pretty(rep).map_err(|e| io_err(&path, e))?;
    std::fs::write(&path, json).map_err(|e| io_err(&path, e))?;
    model.save(&dir.join(format!("checkpoint_{name}.json")))?;
    rep.trace.write_csv(&dir.join(format!("trace_{name}.csv")))?;
    if !rep.history.is_empty() {
        let path = dir.join(format!("history_{name}.csv"));
        let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path, e))?;
        w.write_record(["epoch", "step", "train_loss", "train_mse_u", "train_mse_f", "val_mse_u"])
            .map_err(|e| io_err(&path, e))?;
        for h in &rep.history {
            w.write_record([
                h.epoch.to_string(),
                h.step.to_string(),
                h.train_loss.to_string(),
                h.train_mse_u.to_string(),
                h.train_mse_f.map_or(String::new(), |v| v.to_string()),
                h.val_mse_u.to_string(),
            ])
            .map_err(|e| io_err(&path, e))?;
        }
        w.flush().map_err(|e| io_err(&path, e))?;
    }
    Ok(())
}

/// Decoded rate network output for a record, for inspection.
pub fn rate_of(model: &NeuralModel, rec: &FlotationRecord) -> Option<f64> {
    let (net, std) = (model.r_net.as_ref()?, model.r_input_std.as_ref()?);
    let c = model.predict(&rec.inputs()).ok()?;
    let mut input = rec.inputs().to_vec();
    input.extend_from_slice(&c);
    let out = net.predict(&std.forward(&input)).ok()?;
    Some(model.r_scale * softplus(out[0]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    #[test]
    fn hand_traced_early_stop() {
        assert_eq!(early_stop(&[1.0, 0.9, 0.9, 0.9, 0.9], 3, 1e-5), (Some(5), 2));
        let tol = 1e-5;
        let falling: Vec<f64> = (0..200).map(|i| 1.0 - 2.0 * tol * i as f64).collect();
        assert_eq!(early_stop(&falling, 3, tol), (None, 200));
        // an improvement of exactly the tolerance does not count
        let exact = [1.0, 1.0 - 0.5, 1.0 - 0.5 - 0.25];
        assert_eq!(early_stop(&exact, 1, 0.25), (Some(3), 2));
    }

    #[test]
    fn single_point_metrics() {
        let m = output_metrics(&[3.0], &[2.0]).unwrap();
        assert_eq!((m.mse, m.mre, m.mre_excluded), (1.0, 0.5, 0));
        let p = output_metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!((p.mse, p.mre), (0.0, 0.0));
        let z = output_metrics(&[1.0, 2.0], &[0.0, 2.0]).unwrap();
        assert_eq!(z.mre_excluded, 1);
        assert!(output_metrics(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn kinds_round_trip_by_name() {
        for k in ModelKind::ALL {
            assert_eq!(ModelKind::from_name(k.name()), Some(k));
            let json = serde_json::to_string(&k).unwrap();
            assert_eq!(json, format!("\"{}\"", k.name()));
        }
        assert_eq!(Preset::from_name("cell2-paper"), Some(Preset::Cell2Paper));
    }

    #[test]
    fn presets_encode_the_architectures() {
        let c1 = TrainConfig::preset(Preset::Cell1Paper, ModelKind::PinnUnidirectional, 0);
        assert_eq!(c1.u_layers, vec![12, 256, 512, 256, 2]);
        assert_eq!(c1.r_layers, vec![14, 100, 1]);
        assert_eq!((c1.lr, c1.batch_size, c1.patience, c1.tolerance), (1e-5, 128, 20_000, 1e-5));
        let c2 = TrainConfig::preset(Preset::Cell2Paper, ModelKind::PinnUnidirectional, 0);
        assert_eq!(c2.u_layers, vec![12, 128, 256, 128, 2]);
        assert_eq!(c2.r_layers, vec![14, 400, 1]);
        assert_eq!(c2.patience, 30_000);
        let d = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 0);
        assert_eq!(d.u_layers, vec![12, 32, 64, 32, 2]);
        assert_eq!(d.patience, 50);
        for c in [c1, c2, d] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 0);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 0);
        c.tolerance = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::PinnUnidirectional, 0);
        c.r_layers = vec![15, 4, 1];
        assert!(c.validate().is_err());
    }

    fn toy_dataset(n: usize) -> Dataset {
        let records = (0..n)
            .map(|i| {
                let t = 5.0 * i as f64;
                let mut r = [0.0; 14];
                r[0] = t;
                for (k, v) in r.iter_mut().enumerate().take(12).skip(1) {
                    *v = 1.0 + 0.1 * k as f64 + 0.05 * ((i * k) as f64 * 0.37).sin();
                }
                r[Column::QAir.index()] = 600.0;
                r[Column::QFeed.index()] = 120.0;
                r[Column::Qt.index()] = 110.0;
                r[Column::Qc.index()] = 10.0;
                r[12] = 2.0 + 0.1 * (t / 50.0).sin();
                r[13] = 11.0 + (t / 40.0).cos();
                FlotationRecord(r)
            })
            .collect();
        Dataset::new(records, Provenance::default())
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let d = toy_dataset(40);
        let data = Splits {
            train: d.clone(),
            val: d.clone(),
            test: d,
        };
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::PinnBidirectional, 3);
        c.lr = 0.0;
        c.batch_size = 16;
        c.patience = 4;
        c.u_layers = vec![12, 6, 2];
        let (rep, model) = train_model(&c, &data).unwrap();
        let init = NeuralModel::init(&c, &data.train).unwrap();
        assert_eq!(model, TrainedModel::Neural(init));
        assert!(rep.stopped_early);
        assert_eq!(rep.history.len(), 5);
        assert_eq!(rep.best_epoch, 1);
        assert!(rep.history.windows(2).all(|w| w[0].val_mse_u == w[1].val_mse_u));
    }

    #[test]
    fn pinn_loss_bounds_data_loss() {
        let d = toy_dataset(20);
        for kind in [ModelKind::PinnBidirectional, ModelKind::PinnUnidirectional, ModelKind::PinnMassBalance] {
            let mut c = TrainConfig::preset(Preset::Desk, kind, 1);
            c.u_layers = vec![12, 5, 2];
            c.r_layers = vec![14, 3, 1];
            let m = NeuralModel::init(&c, &d).unwrap();
            let ((total, lu, lf), grad) = batch_loss(&m, &d.records, 7).unwrap();
            assert!(total >= lu);
            assert!((total - lu - lf.unwrap()).abs() < 1e-12 * total);
            assert_eq!(grad.len(), m.flat_params().len());
        }
    }

    #[test]
    fn sharding_does_not_change_the_loss() {
        let d = toy_dataset(30);
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::PinnBidirectional, 2);
        c.u_layers = vec![12, 5, 2];
        let m = NeuralModel::init(&c, &d).unwrap();
        let ((a, _, _), ga) = batch_loss(&m, &d.records, 30).unwrap();
        let ((b, _, _), gb) = batch_loss(&m, &d.records, 4).unwrap();
        assert!((a - b).abs() < 1e-12 * a);
        for (x, y) in ga.iter().zip(&gb) {
            assert!((x - y).abs() < 1e-10 * (1.0 + y.abs()));
        }
    }

    #[test]
    fn datadriven_loss_is_plain_mse() {
        let d = toy_dataset(25);
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::DataDriven, 4);
        c.u_layers = vec![12, 7, 2];
        let m = NeuralModel::init(&c, &d).unwrap();
        let ((total, lu, lf), _) = batch_loss(&m, &d.records, 6).unwrap();
        let mut naive = 0.0;
        for r in &d.records {
            let p = m.predict(&r.inputs()).unwrap();
            let y = r.targets();
            for k in 0..2 {
                naive += (p[k] - y[k]) * (p[k] - y[k]);
            }
        }
        naive /= d.len() as f64;
        assert_eq!(lf, None);
        assert_eq!(total, lu);
        assert!((total - naive).abs() < 1e-12 * naive);
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut order: Vec<usize> = (0..50).collect();
        order.shuffle(&mut rng);
        let mut sorted = order.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        let mut again: Vec<usize> = (0..50).collect();
        again.shuffle(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(order, again);
    }

    #[test]
    fn reloaded_checkpoint_reproduces_validation_mse() {
        let d = toy_dataset(48);
        let data = Splits {
            train: d.clone(),
            val: toy_dataset(20),
            test: toy_dataset(12),
        };
        let mut c = TrainConfig::preset(Preset::Desk, ModelKind::PinnUnidirectional, 5);
        c.u_layers = vec![12, 6, 2];
        c.r_layers = vec![14, 4, 1];
        c.batch_size = 16;
        c.max_steps = 30;
        let (rep, model) = train_model(&c, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        model.save(&path).unwrap();
        let back = TrainedModel::load(&path).unwrap();
        assert_eq!(back, model);
        let val = evaluate(&back, &data.val).unwrap();
        assert_eq!(val.mse_u.to_bits(), rep.best_val_mse_u.to_bits());
        assert_eq!(rep.steps, 30);
    }
}
