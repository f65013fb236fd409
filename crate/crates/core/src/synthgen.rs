//! Synthetic relaxation curves and aging datasets with known ground truth.
//!
//! Each cell ages from `soh_start_pct` to `soh_end_pct` over `n_cycles`.
//! ECM parameters follow monotone drifts indexed by the aging fraction
//! `s = (soh_start − soh) / (soh_start − soh_end)`: resistances rise while
//! OCV and capacitances fall. A record is emitted every `record_every` cycles
//! and at the final cycle.

use std::io::Write;
use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{CellMeta, CycleRecord, Dataset, DatasetError, DatasetId, RelaxationCurve, Validation};
use crate::features::{relaxation_model_voltage, EcmParams};
use crate::seed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingGrid {
    pub interval_s: f64,
    pub n_points: usize,
}

impl SamplingGrid {
    pub fn of(id: DatasetId) -> Self {
        let (interval_s, n_points) = id.expected_sampling();
        SamplingGrid { interval_s, n_points }
    }

    /// `interval, 2·interval, …, n_points·interval`.
    pub fn times(&self) -> Vec<f64> {
        (1..=self.n_points).map(|k| k as f64 * self.interval_s).collect()
    }
}

/// Forward-simulates a relaxation curve with iid Gaussian voltage noise.
/// The curve's charge-end voltage is the model terminal voltage at `t = 0`
/// with the current still flowing: `OCV − I·(R0 + R1 + R2)`.
pub fn gen_relaxation_curve(
    p: &EcmParams,
    current_a: f64,
    grid: SamplingGrid,
    noise_sigma_v: f64,
    seed: u64,
) -> RelaxationCurve {
    let times = grid.times();
    let mut rng = seed::rng(seed);
    let voltages = times
        .iter()
        .map(|&t| {
            let noise: f64 = if noise_sigma_v > 0.0 {
                {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    noise_sigma_v * z
                }
            } else {
                0.0
            };
            relaxation_model_voltage(p, current_a, t) + noise
        })
        .collect();
    let ut0 = p.ocv_v - current_a * (p.r0_ohm + p.r1_ohm + p.r2_ohm);
    RelaxationCurve::new(times, voltages, current_a, ut0).expect("grid times are positive and increasing")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Linear,
    /// Slow at first, accelerating late in life.
    Exp,
}

const EXP_RATE: f64 = 2.0;

impl Shape {
    fn progress(self, s: f64) -> f64 {
        match self {
            Shape::Linear => s,
            Shape::Exp => ((EXP_RATE * s).exp() - 1.0) / (EXP_RATE.exp() - 1.0),
        }
    }
}

/// Parameter value at SOH = `soh_start` (`start`) and at `soh_end` (`end`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Drift {
    pub start: f64,
    pub end: f64,
    #[serde(default = "default_shape")]
    pub shape: Shape,
}

fn default_shape() -> Shape {
    Shape::Linear
}

impl Drift {
    pub const fn linear(start: f64, end: f64) -> Self {
        Drift { start, end, shape: Shape::Linear }
    }

    pub fn at(&self, s: f64) -> f64 {
        self.start + (self.end - self.start) * self.shape.progress(s)
    }

    pub fn span(&self) -> f64 {
        (self.end - self.start).abs()
    }

    fn offset(self, delta: f64) -> Self {
        Drift { start: self.start + delta, end: self.end + delta, shape: self.shape }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgingProfile {
    pub soh_start_pct: f64,
    pub soh_end_pct: f64,
    pub n_cycles: u32,
    pub soh_shape: Shape,
    pub ocv_v: Drift,
    pub r0_ohm: Drift,
    pub r1_ohm: Drift,
    pub r2_ohm: Drift,
    pub c1_f: Drift,
    pub c2_f: Drift,
    pub noise_sigma_v: f64,
    /// Per-cell endpoint perturbation, as a multiple of each drift's span.
    pub heterogeneity: f64,
    pub grid: SamplingGrid,
}

impl Default for AgingProfile {
    fn default() -> Self {
        AgingProfile {
            soh_start_pct: 100.0,
            soh_end_pct: 80.0,
            n_cycles: 601,
            soh_shape: Shape::Linear,
            ocv_v: Drift::linear(4.19, 4.17),
            r0_ohm: Drift::linear(0.020, 0.035),
            r1_ohm: Drift::linear(0.10, 0.20),
            r2_ohm: Drift::linear(0.15, 0.30),
            c1_f: Drift::linear(1500.0, 1250.0),
            c2_f: Drift::linear(5000.0, 3000.0),
            noise_sigma_v: 0.5e-3,
            heterogeneity: 0.0,
            grid: SamplingGrid::of(DatasetId::D1),
        }
    }
}

impl AgingProfile {
    fn drifts(&self) -> [(&'static str, Drift, bool); 6] {
        // (name, drift, increases with aging)
        [
            ("ocv", self.ocv_v, false),
            ("r0", self.r0_ohm, true),
            ("r1", self.r1_ohm, true),
            ("r2", self.r2_ohm, true),
            ("c1", self.c1_f, false),
            ("c2", self.c2_f, false),
        ]
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidProfile(m));
        if !(self.soh_start_pct > self.soh_end_pct && self.soh_end_pct > 0.0) {
            return bad(format!("need soh_start > soh_end > 0, got {} and {}", self.soh_start_pct, self.soh_end_pct));
        }
        if self.n_cycles < 2 {
            return bad("n_cycles must be at least 2".into());
        }
        if !(self.noise_sigma_v >= 0.0) || !(self.heterogeneity >= 0.0) {
            return bad("noise and heterogeneity must be non-negative".into());
        }
        if !(self.grid.interval_s > 0.0) || self.grid.n_points == 0 {
            return bad(format!("invalid sampling grid {:?}", self.grid));
        }
        for (name, d, rising) in self.drifts() {
            if !(d.start > 0.0 && d.end > 0.0) || !d.start.is_finite() || !d.end.is_finite() {
                return bad(format!("{name} drift must stay positive"));
            }
            if rising && d.end < d.start || !rising && d.end > d.start {
                return bad(format!("{name} drift runs against its aging direction"));
            }
        }
        Ok(())
    }

    /// SOH at `cycle` (1-based).
    pub fn soh_at(&self, cycle: u32) -> f64 {
        let s = self.soh_shape.progress((cycle - 1) as f64 / (self.n_cycles - 1) as f64);
        self.soh_start_pct + (self.soh_end_pct - self.soh_start_pct) * s
    }

    /// ECM parameters at aging fraction `s ∈ [0, 1]`.
    pub fn params_at(&self, s: f64) -> EcmParams {
        EcmParams::new(
            self.ocv_v.at(s),
            self.r0_ohm.at(s),
            self.r1_ohm.at(s),
            self.c1_f.at(s),
            self.r2_ohm.at(s),
            self.c2_f.at(s),
        )
    }

    fn perturbed<R: rand::Rng>(&self, rng: &mut R) -> Result<AgingProfile, SynthError> {
        let mut p = self.clone();
        if self.heterogeneity == 0.0 {
            return Ok(p);
        }
        let h = self.heterogeneity;
        let mut draw = |d: Drift| {
            let z: f64 = StandardNormal.sample(rng);
            d.offset(h * z * d.span())
        };
        p.ocv_v = draw(p.ocv_v);
        p.r0_ohm = draw(p.r0_ohm);
        p.r1_ohm = draw(p.r1_ohm);
        p.r2_ohm = draw(p.r2_ohm);
        p.c1_f = draw(p.c1_f);
        p.c2_f = draw(p.c2_f);
        p.validate().map_err(|e| SynthError::InvalidProfile(format!("heterogeneity too large: {e}")))?;
        Ok(p)
    }

    fn shifted(&self, shift: f64) -> AgingProfile {
        let mut p = self.clone();
        let mv = |d: Drift| d.offset(shift * d.span());
        p.ocv_v = mv(p.ocv_v);
        p.r0_ohm = mv(p.r0_ohm);
        p.r1_ohm = mv(p.r1_ohm);
        p.r2_ohm = mv(p.r2_ohm);
        p.c1_f = mv(p.c1_f);
        p.c2_f = mv(p.c2_f);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConditionSpec {
    pub temperature_c: f64,
    pub charge_rate_c: f64,
    pub discharge_rate_c: f64,
    pub profile: AgingProfile,
}

impl Default for ConditionSpec {
    fn default() -> Self {
        ConditionSpec {
            temperature_c: 25.0,
            charge_rate_c: 0.5,
            discharge_rate_c: 1.0,
            profile: AgingProfile::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub dataset_id: DatasetId,
    pub conditions: Vec<ConditionSpec>,
    pub cells_per_condition: usize,
    /// Records are kept at cycles 1, 1 + k, 1 + 2k, … and the last cycle.
    pub record_every: u32,
    pub nominal_capacity_ah: f64,
    /// CV cutoff current; `None` means −0.05 C.
    pub cutoff_current_a: Option<f64>,
    pub cell_prefix: String,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig::benchmark(0)
    }
}

impl SynthConfig {
    /// Three temperatures, six cells each, heterogeneity on, 0.5 mV noise.
    pub fn benchmark(seed: u64) -> Self {
        let profile = AgingProfile { heterogeneity: 0.1, ..AgingProfile::default() };
        let conditions = [(25.0, 601), (35.0, 501), (45.0, 401)]
            .into_iter()
            .map(|(t, n_cycles)| ConditionSpec {
                temperature_c: t,
                profile: AgingProfile { n_cycles, ..profile.clone() },
                ..ConditionSpec::default()
            })
            .collect();
        SynthConfig {
            dataset_id: DatasetId::D1,
            conditions,
            cells_per_condition: 6,
            record_every: 20,
            nominal_capacity_ah: 3.54,
            cutoff_current_a: None,
            cell_prefix: "B".into(),
            seed,
        }
    }

    pub fn with_noise(mut self, noise_sigma_v: f64) -> Self {
        self.conditions.iter_mut().for_each(|c| c.profile.noise_sigma_v = noise_sigma_v);
        self
    }

    pub fn with_heterogeneity(mut self, h: f64) -> Self {
        self.conditions.iter_mut().for_each(|c| c.profile.heterogeneity = h);
        self
    }

    pub fn with_grid(mut self, grid: SamplingGrid) -> Self {
        self.conditions.iter_mut().for_each(|c| c.profile.grid = grid);
        self
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.conditions.is_empty() || self.cells_per_condition == 0 {
            return Err(SynthError::InvalidProfile("need at least one condition and one cell".into()));
        }
        if self.record_every == 0 {
            return Err(SynthError::InvalidProfile("record_every must be at least 1".into()));
        }
        if self.cutoff_current_a.is_some_and(|i| !(i < 0.0)) {
            return Err(SynthError::InvalidProfile("cutoff current must be negative".into()));
        }
        self.conditions.iter().try_for_each(|c| c.profile.validate())
    }

    pub fn cutoff_current(&self) -> f64 {
        self.cutoff_current_a.unwrap_or(-0.05 * self.nominal_capacity_ah)
    }
}

/// Ground truth of one generated record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub cell_id: String,
    pub cycle_number: u32,
    pub soh_pct: f64,
    pub ocv_v: f64,
    pub r0_ohm: f64,
    pub r1_ohm: f64,
    pub r2_ohm: f64,
    pub c1_f: f64,
    pub c2_f: f64,
}

impl TruthRow {
    pub fn params(&self) -> EcmParams {
        EcmParams::new(self.ocv_v, self.r0_ohm, self.r1_ohm, self.c1_f, self.r2_ohm, self.c2_f)
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub dataset: Dataset,
    /// One row per record, in dataset order.
    pub truth: Vec<TruthRow>,
}

fn record_cycles(n_cycles: u32, every: u32) -> Vec<u32> {
    let mut c: Vec<u32> = (1..=n_cycles).step_by(every as usize).collect();
    if *c.last().expect("n_cycles >= 1") != n_cycles {
        c.push(n_cycles);
    }
    c
}

/// Generates the dataset described by `cfg`. Cells are generated in parallel;
/// every cell draws from its own seed stream, so the result does not depend
/// on scheduling.
pub fn gen_aging_dataset(cfg: &SynthConfig) -> Result<SynthOutput, SynthError> {
    cfg.validate()?;
    let current = cfg.cutoff_current();
    let jobs: Vec<(usize, usize)> =
        (0..cfg.conditions.len()).flat_map(|c| (0..cfg.cells_per_condition).map(move |k| (c, k))).collect();
    let cells: Vec<(Vec<CycleRecord>, Vec<TruthRow>)> = jobs
        .par_iter()
        .map(|&(ci, k)| {
            let cond = &cfg.conditions[ci];
            let width = cfg.cells_per_condition.to_string().len().max(2);
            let cell_id = format!("{}{}-{:0width$}", cfg.cell_prefix, ci + 1, k + 1);
            let cell_seed = seed::derive_labeled(cfg.seed, &cell_id, 0);
            let mut rng = seed::rng(seed::derive_labeled(cell_seed, "heterogeneity", 0));
            let profile = cond.profile.perturbed(&mut rng)?;
            let meta = Arc::new(CellMeta::new(
                cell_id.clone(),
                cfg.dataset_id,
                cond.temperature_c,
                cond.charge_rate_c,
                cond.discharge_rate_c,
                cfg.nominal_capacity_ah,
            )?);
            let span = profile.soh_start_pct - profile.soh_end_pct;
            let mut records = Vec::new();
            let mut truth = Vec::new();
            for cycle in record_cycles(profile.n_cycles, cfg.record_every) {
                let soh = profile.soh_at(cycle);
                let p = profile.params_at((profile.soh_start_pct - soh) / span);
                let curve = gen_relaxation_curve(
                    &p,
                    current,
                    profile.grid,
                    profile.noise_sigma_v,
                    seed::derive_labeled(cell_seed, "noise", cycle as u64),
                );
                let rec = CycleRecord::new(meta.clone(), cycle, soh / 100.0 * cfg.nominal_capacity_ah, curve);
                truth.push(TruthRow {
                    cell_id: cell_id.clone(),
                    cycle_number: cycle,
                    soh_pct: rec.soh_pct,
                    ocv_v: p.ocv_v,
                    r0_ohm: p.r0_ohm,
                    r1_ohm: p.r1_ohm,
                    r2_ohm: p.r2_ohm,
                    c1_f: p.c1_f,
                    c2_f: p.c2_f,
                });
                records.push(rec);
            }
            Ok((records, truth))
        })
        .collect::<Result<_, SynthError>>()?;
    let (records, truth): (Vec<Vec<CycleRecord>>, Vec<Vec<TruthRow>>) = cells.into_iter().unzip();
    let (dataset, _) = Dataset::new(records.into_iter().flatten().collect(), &Validation::default())?;
    let mut truth: Vec<TruthRow> = truth.into_iter().flatten().collect();
    truth.sort_by(|a, b| (&a.cell_id, a.cycle_number).cmp(&(&b.cell_id, b.cycle_number)));
    Ok(SynthOutput { dataset, truth })
}

/// Source and target configurations sharing structure; every target drift
/// is moved by `shift` times its span. The target uses a different seed
/// and cell prefix.
pub fn domain_shift_pair(base: &SynthConfig, shift: f64) -> (SynthConfig, SynthConfig) {
    let mut target = base.clone();
    target.seed = seed::derive_labeled(base.seed, "target-domain", 0);
    target.cell_prefix = format!("T{}", base.cell_prefix);
    target.conditions.iter_mut().for_each(|c| c.profile = c.profile.shifted(shift));
    (base.clone(), target)
}

pub const DEFAULT_DOMAIN_SHIFT: f64 = 0.5;

/// Writes truth rows as CSV.
pub fn write_truth<W: Write>(rows: &[TruthRow], writer: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
