//! Synthetic flotation cell generator.
//!
//! Exogenous inputs are synthesized per split, the two-phase concentration
//! model is integrated with RK4 under a zero-order hold, and measurement noise
//! plus tagged outliers are added on top of the exact trajectory.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{export_csv, Column, DataError, Dataset, FlotationRecord, Provenance, Split};
use crate::nn::{FROTH_FRACTION_MAX, FROTH_FRACTION_MIN, TOTAL_VOLUME};
use crate::physics::PER_HOUR_TO_PER_MINUTE;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulator config: {0}")]
    Config(String),
    #[error("integration blew up at sample {index} (t = {time} min)")]
    BlowUp { index: usize, time: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The eleven exogenous columns, in dataset order.
pub const INPUT_COLUMNS: [Column; 11] = [
    Column::QAir,
    Column::H,
    Column::Cs,
    Column::RsFeed,
    Column::CFeed,
    Column::RAuFeed,
    Column::P80,
    Column::QFeed,
    Column::FsFeed,
    Column::Qt,
    Column::Qc,
];

/// Physical parameters of the generating model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub v_p: f64,
    pub v_f: f64,
    pub alpha_p: f64,
    pub alpha_f: f64,
}

impl Default for TrueParams {
    fn default() -> Self {
        let v_f = TOTAL_VOLUME * 0.055;
        TrueParams {
            v_p: TOTAL_VOLUME - v_f,
            v_f,
            alpha_p: 0.004,
            alpha_f: 0.002,
        }
    }
}

impl TrueParams {
    pub fn validate(&self) -> Result<(), SimError> {
        let frac = self.v_f / TOTAL_VOLUME;
        if (self.v_f + self.v_p - TOTAL_VOLUME).abs() > 1e-9 {
            return Err(SimError::Config(format!(
                "V_f + V_p = {} but must equal {TOTAL_VOLUME}",
                self.v_f + self.v_p
            )));
        }
        if !(FROTH_FRACTION_MIN..=FROTH_FRACTION_MAX).contains(&frac) {
            return Err(SimError::Config(format!("froth fraction {frac} outside [0.04, 0.07]")));
        }
        if !(self.alpha_p >= 0.0 && self.alpha_f >= 0.0) {
            return Err(SimError::Config("rate coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub amplitude: f64,
    pub period_min: f64,
    pub phase: f64,
}

/// `baseline + drift·t + Σ sinusoids + OU wander`, clipped at zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignalSpec {
    pub column: Column,
    pub baseline: f64,
    #[serde(default)]
    pub drift_per_min: f64,
    #[serde(default)]
    pub sinusoids: Vec<Sinusoid>,
    /// Stationary standard deviation of the Ornstein-Uhlenbeck wander.
    #[serde(default)]
    pub wander_sigma: f64,
    #[serde(default = "default_wander_tau")]
    pub wander_tau_min: f64,
}

fn default_wander_tau() -> f64 {
    120.0
}

impl SignalSpec {
    pub fn constant(column: Column, baseline: f64) -> Self {
        SignalSpec {
            column,
            baseline,
            drift_per_min: 0.0,
            sinusoids: Vec::new(),
            wander_sigma: 0.0,
            wander_tau_min: default_wander_tau(),
        }
    }

    fn with(mut self, amplitude: f64, period_min: f64, phase: f64) -> Self {
        self.sinusoids.push(Sinusoid {
            amplitude,
            period_min,
            phase,
        });
        self
    }

    fn wander(mut self, sigma: f64, tau: f64) -> Self {
        self.wander_sigma = sigma;
        self.wander_tau_min = tau;
        self
    }
}

/// Operating regime of one split: one signal per exogenous column.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regime {
    pub signals: Vec<SignalSpec>,
}

impl Regime {
    pub fn signal(&self, c: Column) -> Option<&SignalSpec> {
        self.signals.iter().find(|s| s.column == c)
    }

    pub fn signal_mut(&mut self, c: Column) -> Option<&mut SignalSpec> {
        self.signals.iter_mut().find(|s| s.column == c)
    }

    /// Regime with the given `(Q_feed, C_feed, Q_t, Q_air)` operating point.
    pub fn plant(q_feed: f64, c_feed: f64, q_t: f64, q_air: f64) -> Regime {
        use Column::*;
        Regime {
            signals: vec![
                SignalSpec::constant(QAir, q_air)
                    .with(0.08 * q_air, 610.0, 0.3)
                    .with(0.04 * q_air, 170.0, 1.1)
                    .wander(0.015 * q_air, 90.0),
                SignalSpec::constant(H, 1.2).with(0.05, 430.0, 0.0).wander(0.01, 60.0),
                SignalSpec::constant(Cs, 32.0).with(2.0, 900.0, 2.0).wander(0.4, 120.0),
                SignalSpec::constant(RsFeed, 1.6).with(0.15, 1300.0, 0.7).wander(0.03, 200.0),
                SignalSpec::constant(CFeed, c_feed)
                    .with(0.15 * c_feed, 480.0, 0.0)
                    .with(0.08 * c_feed, 95.0, 2.4)
                    .wander(0.03 * c_feed, 60.0),
                SignalSpec::constant(RAuFeed, 0.85).with(0.04, 700.0, 1.7).wander(0.01, 150.0),
                SignalSpec::constant(P80, 150.0).with(12.0, 1100.0, 0.5).wander(3.0, 180.0),
                SignalSpec::constant(QFeed, q_feed)
                    .with(0.07 * q_feed, 1440.0, 0.9)
                    .with(0.03 * q_feed, 130.0, 0.2)
                    .wander(0.015 * q_feed, 120.0),
                SignalSpec::constant(FsFeed, 45.0).with(3.0, 1000.0, 1.3).wander(0.7, 150.0),
                SignalSpec::constant(Qt, q_t)
                    .with(0.07 * q_t, 1440.0, 1.0)
                    .with(0.03 * q_t, 150.0, 2.9)
                    .wander(0.015 * q_t, 120.0),
                SignalSpec::constant(Qc, 10.0)
                    .with(1.2, 350.0, 0.4)
                    .with(0.5, 75.0, 1.9)
                    .wander(0.2, 45.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        for c in INPUT_COLUMNS {
            match self.signals.iter().filter(|s| s.column == c).count() {
                1 => {}
                0 => return Err(SimError::Config(format!("regime lacks a signal for {c}"))),
                _ => return Err(SimError::Config(format!("regime has several signals for {c}"))),
            }
        }
        if let Some(s) = self.signals.iter().find(|s| !INPUT_COLUMNS.contains(&s.column)) {
            return Err(SimError::Config(format!("{} is not an exogenous input", s.column)));
        }
        for s in &self.signals {
            if s.sinusoids.iter().any(|w| !(w.period_min > 0.0)) || !(s.wander_tau_min > 0.0) {
                return Err(SimError::Config(format!("{}: periods and time constants must be positive", s.column)));
            }
            if s.wander_sigma < 0.0 {
                return Err(SimError::Config(format!("{}: negative wander sigma", s.column)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Regimes {
    pub train: Regime,
    pub val: Regime,
    pub test: Regime,
}

impl Regimes {
    pub fn get(&self, split: Split) -> &Regime {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }
}

/// Gaussian measurement noise per column (not applied to `t`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<(Column, f64)>,
}

impl NoiseSpec {
    pub fn none() -> Self {
        NoiseSpec { sigma: Vec::new() }
    }

    pub fn sigma(&self, c: Column) -> f64 {
        self.sigma.iter().find(|(k, _)| *k == c).map_or(0.0, |(_, s)| *s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitialState {
    Zero,
    /// Equilibrium for the inputs held at their first sample.
    Steady,
    Given { c_p: f64, c_f: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub seed: u64,
    pub sizes: SplitSizes,
    pub sample_interval_min: f64,
    pub substep_min: f64,
    pub true_params: TrueParams,
    pub initial: InitialState,
    pub regimes: Regimes,
    pub noise: NoiseSpec,
    pub outlier_rate: f64,
    pub outlier_scale: f64,
}

impl SimConfig {
    /// Desk-scale defaults: 2000/1000/1200 rows, noisy, with outliers, and a
    /// test period at a higher throughput than training.
    pub fn desk(seed: u64) -> Self {
        use Column::*;
        SimConfig {
            seed,
            sizes: SplitSizes {
                train: 2000,
                val: 1000,
                test: 1200,
            },
            sample_interval_min: 5.0,
            substep_min: 0.05,
            true_params: TrueParams::default(),
            initial: InitialState::Zero,
            regimes: Regimes {
                train: Regime::plant(120.0, 3.0, 110.0, 600.0),
                val: Regime::plant(132.0, 3.2, 121.0, 620.0),
                test: Regime::plant(150.0, 3.6, 139.0, 660.0),
            },
            noise: NoiseSpec {
                sigma: vec![
                    (QAir, 6.0),
                    (H, 0.01),
                    (Cs, 0.3),
                    (RsFeed, 0.02),
                    (CFeed, 0.05),
                    (RAuFeed, 0.01),
                    (P80, 2.0),
                    (QFeed, 1.5),
                    (FsFeed, 0.5),
                    (Qt, 1.5),
                    (Qc, 0.15),
                    (Cp, 0.03),
                    (Cf, 0.25),
                ],
            },
            outlier_rate: 0.02,
            outlier_scale: 10.0,
        }
    }

    /// Row counts of the larger industrial cell.
    pub fn paper_scale(seed: u64) -> Self {
        SimConfig {
            sizes: SplitSizes {
                train: 17724,
                val: 8936,
                test: 11679,
            },
            ..SimConfig::desk(seed)
        }
    }

    /// The desk config without noise or outliers.
    pub fn clean(seed: u64) -> Self {
        SimConfig {
            noise: NoiseSpec::none(),
            outlier_rate: 0.0,
            ..SimConfig::desk(seed)
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.true_params.validate()?;
        if !(self.sample_interval_min > 0.0) {
            return Err(SimError::Config("sample interval must be positive".into()));
        }
        if !(self.substep_min > 0.0 && self.substep_min <= self.sample_interval_min) {
            return Err(SimError::Config("substep must lie in (0, sample interval]".into()));
        }
        if !(0.0..=0.05).contains(&self.outlier_rate) {
            return Err(SimError::Config(format!("outlier rate {} outside [0, 0.05]", self.outlier_rate)));
        }
        if !self.outlier_scale.is_finite() {
            return Err(SimError::Config("outlier scale must be finite".into()));
        }
        if let Some((c, s)) = self.noise.sigma.iter().find(|(c, s)| *c == Column::T || !(*s >= 0.0)) {
            return Err(SimError::Config(format!("bad noise sigma {s} for {c}")));
        }
        for split in Split::ALL {
            self.regimes.get(split).validate()?;
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let cfg: SimConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Sampled exogenous inputs; `values[k]` is in [`INPUT_COLUMNS`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct InputSeries {
    pub times: Vec<f64>,
    pub values: Vec<[f64; 11]>,
}

fn split_stream(split: Split) -> u64 {
    match split {
        Split::Train => 0,
        Split::Val => 1,
        Split::Test => 2,
    }
}

// one RNG stream per (split, purpose) so that changing e.g. the noise level
// leaves the inputs untouched
fn rng_for(seed: u64, split: Split, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split_stream(split) * 8 + purpose);
    rng
}

/// Exogenous input series of one split, sampled every
/// `sample_interval_min` starting at `t = 0`.
pub fn synth_inputs(config: &SimConfig, split: Split) -> InputSeries {
    let n = config.sizes.get(split);
    let dt = config.sample_interval_min;
    let regime = config.regimes.get(split);
    let mut rng = rng_for(config.seed, split, 0);
    let times: Vec<f64> = (0..n).map(|k| k as f64 * dt).collect();
    let mut values = vec![[0.0; 11]; n];
    for (ci, col) in INPUT_COLUMNS.iter().enumerate() {
        let spec = regime.signal(*col).expect("validated regime");
        let a = (-dt / spec.wander_tau_min).exp();
        let innov = spec.wander_sigma * (1.0 - a * a).sqrt();
        let mut wander = spec.wander_sigma * rng.sample::<f64, _>(StandardNormal);
        for (k, &t) in times.iter().enumerate() {
            let periodic: f64 = spec
                .sinusoids
                .iter()
                .map(|s| s.amplitude * (std::f64::consts::TAU * t / s.period_min + s.phase).sin())
                .sum();
            values[k][ci] = (spec.baseline + spec.drift_per_min * t + periodic + wander).max(0.0);
            wander = a * wander + innov * rng.sample::<f64, _>(StandardNormal);
        }
    }
    InputSeries { times, values }
}

/// Inputs that enter the cell dynamics, flows in m³/h as in the data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellDrive {
    pub q_air: f64,
    pub c_feed: f64,
    pub q_feed: f64,
    pub q_t: f64,
    pub q_c: f64,
}

impl CellDrive {
    pub fn from_inputs(v: &[f64; 11]) -> Self {
        CellDrive {
            q_air: v[0],
            c_feed: v[4],
            q_feed: v[7],
            q_t: v[9],
            q_c: v[10],
        }
    }

    /// Linear system `ẋ = A·x + b` for `x = (C_p, C_f)`, per minute.
    pub fn linear_system(&self, p: &TrueParams) -> ([[f64; 2]; 2], [f64; 2]) {
        let air = self.q_air * PER_HOUR_TO_PER_MINUTE;
        let feed = self.q_feed * PER_HOUR_TO_PER_MINUTE;
        let tail = self.q_t * PER_HOUR_TO_PER_MINUTE;
        let conc = self.q_c * PER_HOUR_TO_PER_MINUTE;
        let a = [
            [-(p.alpha_p * air + tail / p.v_p), p.alpha_f * air * p.v_f / p.v_p],
            [p.alpha_p * air * p.v_p / p.v_f, -(p.alpha_f * air + conc / p.v_f)],
        ];
        (a, [self.c_feed * feed / p.v_p, 0.0])
    }
}

/// Right-hand side of the two-phase model: `(dC_p/dt, dC_f/dt)`.
pub fn cell_rhs(p: &TrueParams, drive: &CellDrive, x: [f64; 2]) -> [f64; 2] {
    let (a, b) = drive.linear_system(p);
    [
        a[0][0] * x[0] + a[0][1] * x[1] + b[0],
        a[1][0] * x[0] + a[1][1] * x[1] + b[1],
    ]
}

/// Equilibrium of the model for constant inputs.
pub fn steady_state(p: &TrueParams, drive: &CellDrive) -> [f64; 2] {
    let (a, b) = drive.linear_system(p);
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    [
        (-b[0] * a[1][1] + b[1] * a[0][1]) / det,
        (-b[1] * a[0][0] + b[0] * a[1][0]) / det,
    ]
}

fn rk4_step(p: &TrueParams, d: &CellDrive, x: [f64; 2], h: f64) -> [f64; 2] {
    let add = |x: [f64; 2], k: [f64; 2], s: f64| [x[0] + s * k[0], x[1] + s * k[1]];
    let k1 = cell_rhs(p, d, x);
    let k2 = cell_rhs(p, d, add(x, k1, h / 2.0));
    let k3 = cell_rhs(p, d, add(x, k2, h / 2.0));
    let k4 = cell_rhs(p, d, add(x, k3, h));
    [
        x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

/// Integrates `x` over `duration` minutes with constant inputs, using
/// `ceil(duration / substep)` equal RK4 steps.
pub fn integrate_constant(p: &TrueParams, d: &CellDrive, x0: [f64; 2], duration: f64, substep: f64) -> [f64; 2] {
    let n = (duration / substep - 1e-9).ceil().max(1.0) as usize;
    let h = duration / n as f64;
    (0..n).fold(x0, |x, _| rk4_step(p, d, x, h))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub inputs: InputSeries,
    pub c_p: Vec<f64>,
    pub c_f: Vec<f64>,
    pub dc_p_dt: Vec<f64>,
    pub dc_f_dt: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.c_p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.c_p.is_empty()
    }

    pub fn record(&self, k: usize) -> FlotationRecord {
        let mut r = [0.0; 14];
        r[0] = self.inputs.times[k];
        r[1..12].copy_from_slice(&self.inputs.values[k]);
        r[12] = self.c_p[k];
        r[13] = self.c_f[k];
        FlotationRecord(r)
    }
}

/// RK4 integration with the inputs held constant over each sample interval.
/// Derivatives are the model right-hand side at each sample.
pub fn integrate_cell(
    params: &TrueParams,
    inputs: &InputSeries,
    substep: f64,
    initial: InitialState,
) -> Result<Trajectory, SimError> {
    let n = inputs.times.len();
    let mut traj = Trajectory {
        inputs: inputs.clone(),
        c_p: Vec::with_capacity(n),
        c_f: Vec::with_capacity(n),
        dc_p_dt: Vec::with_capacity(n),
        dc_f_dt: Vec::with_capacity(n),
    };
    if n == 0 {
        return Ok(traj);
    }
    let mut x = match initial {
        InitialState::Zero => [0.0, 0.0],
        InitialState::Steady => steady_state(params, &CellDrive::from_inputs(&inputs.values[0])),
        InitialState::Given { c_p, c_f } => [c_p, c_f],
    };
    for k in 0..n {
        if !(x[0].is_finite() && x[1].is_finite()) {
            return Err(SimError::BlowUp {
                index: k,
                time: inputs.times[k],
            });
        }
        let drive = CellDrive::from_inputs(&inputs.values[k]);
        let dx = cell_rhs(params, &drive, x);
        traj.c_p.push(x[0]);
        traj.c_f.push(x[1]);
        traj.dc_p_dt.push(dx[0]);
        traj.dc_f_dt.push(dx[1]);
        if k + 1 < n {
            let span = inputs.times[k + 1] - inputs.times[k];
            x = integrate_constant(params, &drive, x, span, substep);
        }
    }
    Ok(traj)
}

/// A corrupted dataset with the ground truth of which rows were corrupted.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisyDataset {
    pub dataset: Dataset,
    /// Sorted row indices that received an outlier.
    pub outlier_rows: Vec<usize>,
    /// Column hit in each outlier row, aligned with `outlier_rows`.
    pub outlier_columns: Vec<Column>,
}

impl NoisyDataset {
    pub fn is_outlier(&self) -> Vec<bool> {
        let mut tags = vec![false; self.dataset.len()];
        for &r in &self.outlier_rows {
            tags[r] = true;
        }
        tags
    }
}

/// Adds Gaussian noise, then multiplies one random column of
/// `round(rate·n)` distinct rows by the outlier scale. Grades are clipped at 0.
pub fn inject_noise_outliers(traj: &Trajectory, config: &SimConfig, split: Split) -> NoisyDataset {
    let n = traj.len();
    let mut noise_rng = rng_for(config.seed, split, 1);
    let mut records: Vec<FlotationRecord> = (0..n).map(|k| traj.record(k)).collect();
    let sigmas: Vec<(Column, f64)> = Column::FILTERABLE
        .iter()
        .map(|&c| (c, config.noise.sigma(c)))
        .filter(|(_, s)| *s > 0.0)
        .collect();
    for r in records.iter_mut() {
        for &(c, s) in &sigmas {
            let e: f64 = noise_rng.sample(StandardNormal);
            r.set(c, r.get(c) + s * e);
        }
    }
    let mut out_rng = rng_for(config.seed, split, 2);
    let count = ((config.outlier_rate * n as f64).round() as usize).min(n);
    let mut rows = sample(&mut out_rng, n, count).into_vec();
    rows.sort_unstable();
    let mut columns = Vec::with_capacity(count);
    for &row in &rows {
        let c = Column::FILTERABLE[out_rng.gen_range(0..Column::FILTERABLE.len())];
        let r = &mut records[row];
        r.set(c, r.get(c) * config.outlier_scale);
        columns.push(c);
    }
    for r in records.iter_mut() {
        for c in [Column::Cp, Column::Cf] {
            r.set(c, r.get(c).max(0.0));
        }
    }
    NoisyDataset {
        dataset: Dataset::new(
            records,
            Provenance {
                source: "simulator".into(),
                split: Some(split),
                seed: Some(config.seed),
            },
        ),
        outlier_rows: rows,
        outlier_columns: columns,
    }
}

/// Ground truth written next to the simulated CSVs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimTruth {
    pub seed: u64,
    pub true_params: TrueParams,
    pub froth_fraction: f64,
    pub sizes: SplitSizes,
    pub outlier_counts: [usize; 3],
    pub config: SimConfig,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub train: NoisyDataset,
    pub val: NoisyDataset,
    pub test: NoisyDataset,
    pub truth: SimTruth,
}

impl SimOutput {
    pub fn get(&self, split: Split) -> &NoisyDataset {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    /// Writes `train.csv`, `val.csv`, `test.csv` and `sim_truth.json`.
    pub fn write(&self, dir: &Path) -> Result<(), SimError> {
        std::fs::create_dir_all(dir).map_err(|e| SimError::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        for split in Split::ALL {
            export_csv(&self.get(split).dataset, &dir.join(format!("{}.csv", split.name())))?;
        }
        let path = dir.join("sim_truth.json");
        std::fs::write(&path, serde_json::to_string_pretty(&self.truth)?).map_err(|e| SimError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }
}

/// Generates all three splits.
pub fn simulate(config: &SimConfig) -> Result<SimOutput, SimError> {
    config.validate()?;
    let make = |split| -> Result<NoisyDataset, SimError> {
        let inputs = synth_inputs(config, split);
        let traj = integrate_cell(&config.true_params, &inputs, config.substep_min, config.initial)?;
        Ok(inject_noise_outliers(&traj, config, split))
    };
    let (train, val, test) = (make(Split::Train)?, make(Split::Val)?, make(Split::Test)?);
    let truth = SimTruth {
        seed: config.seed,
        true_params: config.true_params,
        froth_fraction: config.true_params.v_f / TOTAL_VOLUME,
        sizes: config.sizes,
        outlier_counts: [train.outlier_rows.len(), val.outlier_rows.len(), test.outlier_rows.len()],
        config: config.clone(),
    };
    Ok(SimOutput {
        train,
        val,
        test,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64, n: usize) -> SimConfig {
        let mut c = SimConfig::desk(seed);
        c.sizes = SplitSizes {
            train: n,
            val: n,
            test: n,
        };
        c
    }

    #[test]
    fn desk_config_is_valid() {
        SimConfig::desk(1).validate().unwrap();
        SimConfig::paper_scale(1).validate().unwrap();
        let json = serde_json::to_string(&SimConfig::desk(3)).unwrap();
        assert_eq!(SimConfig::from_json(&json).unwrap(), SimConfig::desk(3));
    }

    #[test]
    fn bad_configs_are_rejected() {
        let mut c = SimConfig::desk(1);
        c.outlier_rate = 0.06;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk(1);
        c.true_params.v_f = 26.7 * 0.08;
        c.true_params.v_p = 26.7 - c.true_params.v_f;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk(1);
        c.substep_min = 6.0;
        assert!(c.validate().is_err());
        let mut c = SimConfig::desk(1);
        c.regimes.val.signals.pop();
        assert!(matches!(c.validate(), Err(SimError::Config(m)) if m.contains("Q_c")));
    }

    #[test]
    fn degenerate_signals_are_constant() {
        let mut c = small(4, 50);
        for s in c.regimes.train.signals.iter_mut() {
            *s = SignalSpec::constant(s.column, 2.5);
        }
        let series = synth_inputs(&c, Split::Train);
        assert!(series.values.iter().all(|v| v.iter().all(|&x| x == 2.5)));
        assert_eq!(series.times[3], 15.0);
    }

    #[test]
    fn inputs_are_deterministic_and_nonnegative() {
        let c = small(9, 300);
        assert_eq!(synth_inputs(&c, Split::Val), synth_inputs(&c, Split::Val));
        assert_ne!(synth_inputs(&c, Split::Val), synth_inputs(&c, Split::Test));
        assert!(synth_inputs(&c, Split::Test).values.iter().flatten().all(|&x| x >= 0.0));
    }

    #[test]
    fn zero_feed_stays_at_origin() {
        let mut c = small(2, 40);
        c.regimes.train.signal_mut(Column::CFeed).unwrap().baseline = 0.0;
        c.regimes.train.signal_mut(Column::CFeed).unwrap().sinusoids.clear();
        c.regimes.train.signal_mut(Column::CFeed).unwrap().wander_sigma = 0.0;
        let traj = integrate_cell(&c.true_params, &synth_inputs(&c, Split::Train), 0.05, InitialState::Zero).unwrap();
        assert!(traj.c_p.iter().chain(&traj.c_f).all(|&x| x == 0.0));
    }

    #[test]
    fn steady_state_is_an_equilibrium() {
        let p = TrueParams::default();
        let d = CellDrive {
            q_air: 600.0,
            c_feed: 3.0,
            q_feed: 120.0,
            q_t: 110.0,
            q_c: 10.0,
        };
        let x = steady_state(&p, &d);
        let dx = cell_rhs(&p, &d, x);
        assert!(dx[0].abs() < 1e-14 && dx[1].abs() < 1e-14);
        // grade sits in a plausible band for a rougher concentrate
        assert!(x[1] > 1.0 && x[1] < 50.0, "{x:?}");
        let end = integrate_constant(&p, &d, x, 100.0, 0.05);
        assert!((end[0] - x[0]).abs() < 1e-12 && (end[1] - x[1]).abs() < 1e-12);
    }

    #[test]
    fn blow_up_is_reported_with_index() {
        let p = TrueParams::default();
        let inputs = InputSeries {
            times: vec![0.0, 5.0, 10.0],
            values: vec![[600.0, 1.0, 1.0, 1.0, f64::INFINITY, 1.0, 1.0, 120.0, 1.0, 110.0, 10.0]; 3],
        };
        match integrate_cell(&p, &inputs, 0.05, InitialState::Zero) {
            Err(SimError::BlowUp { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn clean_config_reproduces_trajectory() {
        let mut c = SimConfig::clean(5);
        c.sizes.train = 120;
        let inputs = synth_inputs(&c, Split::Train);
        let traj = integrate_cell(&c.true_params, &inputs, c.substep_min, c.initial).unwrap();
        let noisy = inject_noise_outliers(&traj, &c, Split::Train);
        assert!(noisy.outlier_rows.is_empty());
        for (k, r) in noisy.dataset.records.iter().enumerate() {
            assert_eq!(*r, traj.record(k));
        }
    }

    #[test]
    fn outlier_count_is_exact() {
        let mut c = SimConfig::desk(11);
        c.sizes.train = 10_000;
        c.outlier_rate = 0.02;
        let traj = integrate_cell(&c.true_params, &synth_inputs(&c, Split::Train), 0.05, c.initial).unwrap();
        let noisy = inject_noise_outliers(&traj, &c, Split::Train);
        assert_eq!(noisy.outlier_rows.len(), 200);
        assert_eq!(noisy.is_outlier().iter().filter(|&&b| b).count(), 200);
        assert!(noisy.outlier_rows.windows(2).all(|w| w[0] < w[1]));
        assert!(noisy.dataset.records.iter().all(|r| r.get(Column::Cp) >= 0.0 && r.get(Column::Cf) >= 0.0));
    }

    #[test]
    fn simulate_is_deterministic() {
        let c = small(21, 60);
        let a = simulate(&c).unwrap();
        let b = simulate(&c).unwrap();
        for split in Split::ALL {
            assert_eq!(a.get(split).dataset, b.get(split).dataset);
        }
        assert_eq!(a.truth.outlier_counts, [1, 1, 1]);
    }
}
