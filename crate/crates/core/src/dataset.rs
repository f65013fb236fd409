//! Cycling datasets: cells, per-cycle relaxation curves and SOH labels.
//!
//! The on-disk format is a comma-separated table with one row per
//! `(cycle, sample)`:
//!
//! ```text
//! dataset_id,cell_id,temperature_C,charge_rate_C,discharge_rate_C,nominal_capacity_Ah,
//! cycle_number,capacity_Ah,cutoff_current_A,t_s,voltage_V[,charge_end_voltage_V]
//! ```
//!
//! Rows of one cycle form a contiguous block and share every field except
//! `t_s` and `voltage_V`. Blocks may appear in any order; the loaded
//! [`Dataset`] is always sorted by `(cell_id, cycle_number)`.
//!
//! `cutoff_current_A` may be left empty, in which case it defaults to
//! `-0.05 * nominal_capacity_Ah` (charging is negative). The optional
//! `charge_end_voltage_V` column is the terminal voltage at the instant the
//! rest begins, while the CV cutoff current still flows; it defaults to the
//! schema's `charge_end_voltage_V` (4.2 V).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Canonical column names, in file order.
pub const COLUMNS: [&str; 12] = [
    "dataset_id",
    "cell_id",
    "temperature_C",
    "charge_rate_C",
    "discharge_rate_C",
    "nominal_capacity_Ah",
    "cycle_number",
    "capacity_Ah",
    "cutoff_current_A",
    "t_s",
    "voltage_V",
    "charge_end_voltage_V",
];

/// Columns that may be absent from a file.
const OPTIONAL_COLUMNS: [&str; 2] = ["cutoff_current_A", "charge_end_voltage_V"];

/// Relative tolerance of the `soh_pct == 100 * capacity / nominal` check.
const SOH_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DatasetError {
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: u64, reason: String },
    #[error("duplicate cycle {cycle} for cell {cell_id}")]
    DuplicateCycle { cell_id: String, cycle: u32 },
    #[error("non-monotone sample times in cell {cell_id} cycle {cycle}")]
    NonMonotoneTime { cell_id: String, cycle: u32 },
    #[error("no sample at or before {duration_s} s")]
    EmptyTruncation { duration_s: f64 },
    #[error("invalid relaxation curve: {0}")]
    InvalidCurve(String),
    #[error("invariant violated for cell {cell_id} cycle {cycle}: {reason}")]
    Invariant { cell_id: String, cycle: u32, reason: String },
    #[error("invalid cell metadata for {cell_id}: {reason}")]
    InvalidCell { cell_id: String, reason: String },
    #[error("missing column {0}")]
    MissingColumn(String),
    #[error("unknown dataset id {0:?}")]
    UnknownDatasetId(String),
    #[error("schema config: {0}")]
    Schema(String),
    #[error("i/o: {0}")]
    Io(String),
}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e.to_string())
    }
}

/// Which of the three cell chemistries / sub-datasets a cell belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DatasetId {
    D1,
    D2,
    D3,
}

impl DatasetId {
    /// Expected `(sampling interval [s], samples per curve)`.
    pub fn expected_sampling(self) -> (f64, usize) {
        match self {
            DatasetId::D1 | DatasetId::D2 => (120.0, 14),
            DatasetId::D3 => (30.0, 119),
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::D1 => "D1",
            DatasetId::D2 => "D2",
            DatasetId::D3 => "D3",
        })
    }
}

impl FromStr for DatasetId {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().replace(' ', "").as_str() {
            "D1" | "1" | "DATASET1" => Ok(DatasetId::D1),
            "D2" | "2" | "DATASET2" => Ok(DatasetId::D2),
            "D3" | "3" | "DATASET3" => Ok(DatasetId::D3),
            _ => Err(DatasetError::UnknownDatasetId(s.to_string())),
        }
    }
}

/// `CYA-B/C`: temperature A in °C, charge rate B and discharge rate C in C-rate.
pub fn condition_name(temperature_c: f64, charge_rate_c: f64, discharge_rate_c: f64) -> String {
    format!("CY{temperature_c}-{charge_rate_c}/{discharge_rate_c}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub cell_id: String,
    pub dataset_id: DatasetId,
    pub temperature_c: f64,
    pub charge_rate_c: f64,
    pub discharge_rate_c: f64,
    pub nominal_capacity_ah: f64,
    pub condition_name: String,
}

impl CellMeta {
    pub fn new(
        cell_id: impl Into<String>,
        dataset_id: DatasetId,
        temperature_c: f64,
        charge_rate_c: f64,
        discharge_rate_c: f64,
        nominal_capacity_ah: f64,
    ) -> Result<Self, DatasetError> {
        let cell_id = cell_id.into();
        if !(nominal_capacity_ah.is_finite() && nominal_capacity_ah > 0.0) {
            return Err(DatasetError::InvalidCell {
                cell_id,
                reason: format!("nominal capacity must be > 0, got {nominal_capacity_ah}"),
            });
        }
        for (name, v) in
            [("temperature", temperature_c), ("charge rate", charge_rate_c), ("discharge rate", discharge_rate_c)]
        {
            if !v.is_finite() {
                return Err(DatasetError::InvalidCell { cell_id, reason: format!("{name} is not finite") });
            }
        }
        Ok(CellMeta {
            condition_name: condition_name(temperature_c, charge_rate_c, discharge_rate_c),
            cell_id,
            dataset_id,
            temperature_c,
            charge_rate_c,
            discharge_rate_c,
            nominal_capacity_ah,
        })
    }

    /// Default CV cutoff current: 0.05 C, negative because it is a charging current.
    pub fn default_cutoff_current_a(&self) -> f64 {
        -0.05 * self.nominal_capacity_ah
    }
}

/// Voltage samples of one post-charge rest period.
///
/// `t = 0` is the start of the rest; the first stored sample may be later.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelaxationCurve {
    pub times_s: Vec<f64>,
    pub voltages_v: Vec<f64>,
    /// CV cutoff current, negative when charging.
    pub cutoff_current_a: f64,
    /// Terminal voltage at `t = 0` while the cutoff current still flows.
    pub charge_end_voltage_v: f64,
}

impl RelaxationCurve {
    pub fn new(
        times_s: Vec<f64>,
        voltages_v: Vec<f64>,
        cutoff_current_a: f64,
        charge_end_voltage_v: f64,
    ) -> Result<Self, DatasetError> {
        if times_s.is_empty() {
            return Err(DatasetError::InvalidCurve("no samples".into()));
        }
        if times_s.len() != voltages_v.len() {
            return Err(DatasetError::InvalidCurve(format!(
                "{} times but {} voltages",
                times_s.len(),
                voltages_v.len()
            )));
        }
        if times_s.iter().chain(&voltages_v).any(|v| !v.is_finite()) {
            return Err(DatasetError::InvalidCurve("non-finite sample".into()));
        }
        if times_s[0] < 0.0 {
            return Err(DatasetError::InvalidCurve("negative sample time".into()));
        }
        if times_s.windows(2).any(|w| w[1] <= w[0]) {
            return Err(DatasetError::InvalidCurve("times not strictly increasing".into()));
        }
        if !cutoff_current_a.is_finite() || !charge_end_voltage_v.is_finite() {
            return Err(DatasetError::InvalidCurve("non-finite current or voltage".into()));
        }
        Ok(RelaxationCurve { times_s, voltages_v, cutoff_current_a, charge_end_voltage_v })
    }

    pub fn len(&self) -> usize {
        self.times_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_s.is_empty()
    }

    pub fn last_time(&self) -> f64 {
        *self.times_s.last().expect("curve is non-empty")
    }

    /// Number of samples with `t <= duration_s`.
    pub fn samples_within(&self, duration_s: f64) -> usize {
        self.times_s.partition_point(|&t| t <= duration_s)
    }
}

/// Prefix of `curve` with `t <= duration_s`.
pub fn truncate_relaxation(curve: &RelaxationCurve, duration_s: f64) -> Result<RelaxationCurve, DatasetError> {
    let keep = curve.samples_within(duration_s);
    if keep == 0 {
        return Err(DatasetError::EmptyTruncation { duration_s });
    }
    Ok(RelaxationCurve {
        times_s: curve.times_s[..keep].to_vec(),
        voltages_v: curve.voltages_v[..keep].to_vec(),
        cutoff_current_a: curve.cutoff_current_a,
        charge_end_voltage_v: curve.charge_end_voltage_v,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CycleRecord {
    pub cell: Arc<CellMeta>,
    pub cycle_number: u32,
    pub capacity_ah: f64,
    /// SOH in percent of nominal capacity.
    pub soh_pct: f64,
    pub curve: RelaxationCurve,
}

impl CycleRecord {
    /// Builds a record, deriving `soh_pct` from the capacities.
    pub fn new(cell: Arc<CellMeta>, cycle_number: u32, capacity_ah: f64, curve: RelaxationCurve) -> Self {
        let soh_pct = soh_from_capacity(capacity_ah, cell.nominal_capacity_ah);
        CycleRecord { cell, cycle_number, capacity_ah, soh_pct, curve }
    }

    pub fn cell_id(&self) -> &str {
        &self.cell.cell_id
    }
}

pub fn soh_from_capacity(capacity_ah: f64, nominal_capacity_ah: f64) -> f64 {
    100.0 * capacity_ah / nominal_capacity_ah
}

/// SOH of a record in percent.
pub fn soh_of(record: &CycleRecord) -> f64 {
    soh_from_capacity(record.capacity_ah, record.cell.nominal_capacity_ah)
}

/// Checks applied when assembling a [`Dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Validation {
    /// Downgrade physically-plausible invariant violations to warnings.
    pub lenient: bool,
    #[serde(rename = "voltage_min_V")]
    pub voltage_min_v: f64,
    #[serde(rename = "voltage_max_V")]
    pub voltage_max_v: f64,
}

impl Default for Validation {
    fn default() -> Self {
        Validation { lenient: false, voltage_min_v: 2.0, voltage_max_v: 4.5 }
    }
}

/// Schema configuration for [`load_dataset`].
///
/// Parsed from a TOML key-value file:
///
/// ```toml
/// lenient = true
/// voltage_min_V = 2.0
/// voltage_max_V = 4.5
/// charge_end_voltage_V = 4.2
///
/// [columns]          # canonical name = name used in the file
/// cell_id = "Cell"
/// t_s = "time"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSchemaConfig {
    pub columns: BTreeMap<String, String>,
    #[serde(flatten)]
    pub validation: Validation,
    #[serde(rename = "charge_end_voltage_V")]
    pub charge_end_voltage_v: f64,
}

impl Default for DataSchemaConfig {
    fn default() -> Self {
        DataSchemaConfig { columns: BTreeMap::new(), validation: Validation::default(), charge_end_voltage_v: 4.2 }
    }
}

impl DataSchemaConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, DatasetError> {
        let cfg: DataSchemaConfig = toml::from_str(s).map_err(|e| DatasetError::Schema(e.to_string()))?;
        for key in cfg.columns.keys() {
            if !COLUMNS.contains(&key.as_str()) {
                return Err(DatasetError::Schema(format!("unknown canonical column {key:?}")));
            }
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self, DatasetError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    fn file_column<'a>(&'a self, canonical: &'a str) -> &'a str {
        self.columns.get(canonical).map(String::as_str).unwrap_or(canonical)
    }
}

/// A non-fatal observation made while loading or validating data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Warning {
    pub cell_id: String,
    pub cycle: Option<u32>,
    pub message: String,
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.cycle {
            Some(c) => write!(f, "{} cycle {}: {}", self.cell_id, c, self.message),
            None => write!(f, "{}: {}", self.cell_id, self.message),
        }
    }
}

/// Immutable, validated collection of cycle records sorted by
/// `(cell_id, cycle_number)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    records: Vec<CycleRecord>,
    /// cell_id -> index range into `records`.
    cells: BTreeMap<String, (usize, usize)>,
}

impl Dataset {
    /// Sorts, checks and indexes `records`.
    pub fn new(records: Vec<CycleRecord>, validation: &Validation) -> Result<(Self, Vec<Warning>), DatasetError> {
        let mut records = records;
        records.sort_by(|a, b| (a.cell_id(), a.cycle_number).cmp(&(b.cell_id(), b.cycle_number)));
        let mut warnings = Vec::new();
        let mut metas: HashMap<&str, &Arc<CellMeta>> = HashMap::new();

        for pair in records.windows(2) {
            if pair[0].cell_id() == pair[1].cell_id() && pair[0].cycle_number == pair[1].cycle_number {
                return Err(DatasetError::DuplicateCycle {
                    cell_id: pair[0].cell_id().to_string(),
                    cycle: pair[0].cycle_number,
                });
            }
        }
        for r in &records {
            match metas.get(r.cell_id()) {
                Some(m) if m.as_ref() != r.cell.as_ref() => {
                    return Err(DatasetError::InvalidCell {
                        cell_id: r.cell_id().to_string(),
                        reason: "records disagree on cell metadata".into(),
                    })
                }
                Some(_) => {}
                None => {
                    metas.insert(r.cell_id(), &r.cell);
                }
            }
            check_record(r, validation, &mut warnings)?;
        }

        let mut cells = BTreeMap::new();
        let mut start = 0;
        for i in 1..=records.len() {
            if i == records.len() || records[i].cell_id() != records[start].cell_id() {
                cells.insert(records[start].cell_id().to_string(), (start, i));
                start = i;
            }
        }
        Ok((Dataset { records, cells }, warnings))
    }

    pub fn records(&self) -> &[CycleRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Cell ids in sorted order.
    pub fn cell_ids(&self) -> impl Iterator<Item = &str> {
        self.cells.keys().map(String::as_str)
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn cell(&self, cell_id: &str) -> Option<&Arc<CellMeta>> {
        self.cells.get(cell_id).map(|&(s, _)| &self.records[s].cell)
    }

    pub fn cells(&self) -> impl Iterator<Item = &Arc<CellMeta>> {
        self.cells.values().map(|&(s, _)| &self.records[s].cell)
    }

    /// Records of one cell, ordered by cycle number.
    pub fn records_of_cell(&self, cell_id: &str) -> &[CycleRecord] {
        match self.cells.get(cell_id) {
            Some(&(s, e)) => &self.records[s..e],
            None => &[],
        }
    }

    /// condition name -> sorted cell ids.
    pub fn conditions(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for c in self.cells() {
            out.entry(c.condition_name.clone()).or_default().push(c.cell_id.clone());
        }
        out
    }

    pub fn dataset_ids(&self) -> BTreeSet<DatasetId> {
        self.cells().map(|c| c.dataset_id).collect()
    }

    /// Distinct cell temperatures, ascending.
    pub fn temperatures(&self) -> Vec<f64> {
        let mut t: Vec<f64> = self.cells().map(|c| c.temperature_c).collect();
        t.sort_by(f64::total_cmp);
        t.dedup();
        t
    }

    /// Records for which `keep` returns true. Validity is inherited.
    pub fn filter(&self, mut keep: impl FnMut(&CycleRecord) -> bool) -> Dataset {
        let records: Vec<CycleRecord> = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Dataset::from_sorted(records)
    }

    pub fn select_dataset(&self, id: DatasetId) -> Dataset {
        self.filter(|r| r.cell.dataset_id == id)
    }

    pub fn select_cells<S: AsRef<str>>(&self, cell_ids: &[S]) -> Dataset {
        let set: BTreeSet<&str> = cell_ids.iter().map(AsRef::as_ref).collect();
        self.filter(|r| set.contains(r.cell_id()))
    }

    /// Concatenation of two datasets with disjoint `(cell_id, cycle)` keys.
    pub fn merge(&self, other: &Dataset) -> Result<Dataset, DatasetError> {
        let records = self.records.iter().chain(&other.records).cloned().collect();
        let lenient = Validation { lenient: true, voltage_min_v: f64::NEG_INFINITY, voltage_max_v: f64::INFINITY };
        Dataset::new(records, &lenient).map(|(d, _)| d)
    }

    fn from_sorted(records: Vec<CycleRecord>) -> Dataset {
        let mut cells = BTreeMap::new();
        let mut start = 0;
        for i in 1..=records.len() {
            if i == records.len() || records[i].cell_id() != records[start].cell_id() {
                cells.insert(records[start].cell_id().to_string(), (start, i));
                start = i;
            }
        }
        Dataset { records, cells }
    }
}

fn check_record(r: &CycleRecord, v: &Validation, warnings: &mut Vec<Warning>) -> Result<(), DatasetError> {
    let cell_id = r.cell_id().to_string();
    let cycle = r.cycle_number;
    let soft = |reason: String, warnings: &mut Vec<Warning>| -> Result<(), DatasetError> {
        if v.lenient {
            warnings.push(Warning { cell_id: cell_id.clone(), cycle: Some(cycle), message: reason });
            Ok(())
        } else {
            Err(DatasetError::Invariant { cell_id: cell_id.clone(), cycle, reason })
        }
    };

    if cycle < 1 {
        return Err(DatasetError::Invariant { cell_id, cycle, reason: "cycle_number must be >= 1".into() });
    }
    if !(r.capacity_ah.is_finite() && r.capacity_ah > 0.0) {
        return Err(DatasetError::Invariant { cell_id, cycle, reason: "capacity must be > 0".into() });
    }
    let expected = soh_of(r);
    if (r.soh_pct - expected).abs() > SOH_REL_TOL * expected.abs() {
        return Err(DatasetError::Invariant {
            cell_id,
            cycle,
            reason: format!("soh_pct {} inconsistent with capacity ratio {}", r.soh_pct, expected),
        });
    }
    if !(r.soh_pct > 0.0 && r.soh_pct <= 110.0) {
        soft(format!("SOH {:.3}% outside (0, 110]", r.soh_pct), warnings)?;
    }
    if let Some(bad) = r.curve.voltages_v.iter().find(|&&u| u < v.voltage_min_v || u > v.voltage_max_v) {
        soft(format!("voltage {bad} V outside [{}, {}] V", v.voltage_min_v, v.voltage_max_v), warnings)?;
    }

    let (interval, n_points) = r.cell.dataset_id.expected_sampling();
    if r.curve.len() != n_points {
        warnings.push(Warning {
            cell_id: cell_id.clone(),
            cycle: Some(cycle),
            message: format!("{} samples, expected {n_points}", r.curve.len()),
        });
    }
    let off_grid = r.curve.times_s.windows(2).any(|w| ((w[1] - w[0]) - interval).abs() > 1e-6 * interval);
    if off_grid {
        warnings.push(Warning {
            cell_id,
            cycle: Some(cycle),
            message: format!("sampling interval deviates from {interval} s"),
        });
    }
    Ok(())
}

struct ColumnIndex {
    idx: [Option<usize>; COLUMNS.len()],
}

impl ColumnIndex {
    fn get(&self, canonical: usize) -> Option<usize> {
        self.idx[canonical]
    }
}

struct PendingCycle {
    key: (String, u32),
    first_row: u64,
    shared: Vec<String>,
    times: Vec<f64>,
    voltages: Vec<f64>,
}

// Canonical column positions.
const C_DATASET: usize = 0;
const C_CELL: usize = 1;
const C_TEMP: usize = 2;
const C_CHG: usize = 3;
const C_DCHG: usize = 4;
const C_NOMINAL: usize = 5;
const C_CYCLE: usize = 6;
const C_CAPACITY: usize = 7;
const C_CUTOFF: usize = 8;
const C_T: usize = 9;
const C_V: usize = 10;
const C_CHARGE_END: usize = 11;
const SHARED: [usize; 10] =
    [C_DATASET, C_CELL, C_TEMP, C_CHG, C_DCHG, C_NOMINAL, C_CYCLE, C_CAPACITY, C_CUTOFF, C_CHARGE_END];

/// Loads and validates a dataset file.
pub fn load_dataset(path: &Path, schema: &DataSchemaConfig) -> Result<(Dataset, Vec<Warning>), DatasetError> {
    let file = std::fs::File::open(path)?;
    read_dataset(file, schema)
}

/// Reads the tabular format from any reader. See the module docs.
pub fn read_dataset<R: Read>(reader: R, schema: &DataSchemaConfig) -> Result<(Dataset, Vec<Warning>), DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers().map_err(|e| DatasetError::MalformedRow { row: 1, reason: e.to_string() })?.clone();
    let mut cols = ColumnIndex { idx: [None; COLUMNS.len()] };
    for (ci, canonical) in COLUMNS.iter().enumerate() {
        let name = schema.file_column(canonical);
        cols.idx[ci] = headers.iter().position(|h| h == name);
        if cols.idx[ci].is_none() && !OPTIONAL_COLUMNS.contains(canonical) {
            return Err(DatasetError::MissingColumn(name.to_string()));
        }
    }

    let mut cells: BTreeMap<String, Arc<CellMeta>> = BTreeMap::new();
    let mut seen: BTreeSet<(String, u32)> = BTreeSet::new();
    let mut records = Vec::new();
    let mut pending: Option<PendingCycle> = None;

    for result in rdr.records() {
        let rec = result.map_err(|e| DatasetError::MalformedRow {
            row: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let row = rec.position().map_or(0, |p| p.line());
        let field = |c: usize| -> &str { cols.get(c).and_then(|i| rec.get(i)).unwrap_or("") };
        let shared: Vec<String> = SHARED.iter().map(|&c| field(c).to_string()).collect();
        let cell_id = field(C_CELL).to_string();
        if cell_id.is_empty() {
            return Err(DatasetError::MalformedRow { row, reason: "empty cell_id".into() });
        }
        let cycle: u32 = parse_field(field(C_CYCLE), "cycle_number", row)?;
        let t: f64 = parse_field(field(C_T), "t_s", row)?;
        let u: f64 = parse_field(field(C_V), "voltage_V", row)?;
        let key = (cell_id, cycle);

        let continues = pending.as_ref().is_some_and(|p| p.key == key);
        if continues {
            let p = pending.as_mut().expect("checked");
            if p.shared != shared {
                return Err(DatasetError::MalformedRow {
                    row,
                    reason: "per-cycle fields differ within one cycle".into(),
                });
            }
            if t <= *p.times.last().expect("non-empty") {
                // A block that restarts at its own first time is a second copy of the cycle.
                return Err(if t == p.times[0] {
                    DatasetError::DuplicateCycle { cell_id: key.0, cycle }
                } else {
                    DatasetError::NonMonotoneTime { cell_id: key.0, cycle }
                });
            }
            p.times.push(t);
            p.voltages.push(u);
        } else {
            if let Some(done) = pending.take() {
                records.push(finish_cycle(done, &cols, schema, &mut cells)?);
            }
            if !seen.insert(key.clone()) {
                return Err(DatasetError::DuplicateCycle { cell_id: key.0, cycle });
            }
            pending = Some(PendingCycle { key, first_row: row, shared, times: vec![t], voltages: vec![u] });
        }
    }
    if let Some(done) = pending.take() {
        records.push(finish_cycle(done, &cols, schema, &mut cells)?);
    }
    Dataset::new(records, &schema.validation)
}

fn parse_field<T: FromStr>(s: &str, name: &str, row: u64) -> Result<T, DatasetError> {
    s.parse::<T>().map_err(|_| DatasetError::MalformedRow { row, reason: format!("cannot parse {name} from {s:?}") })
}

fn finish_cycle(
    p: PendingCycle,
    cols: &ColumnIndex,
    schema: &DataSchemaConfig,
    cells: &mut BTreeMap<String, Arc<CellMeta>>,
) -> Result<CycleRecord, DatasetError> {
    let row = p.first_row;
    // `shared` follows the SHARED order.
    let s = |pos: usize| p.shared[pos].as_str();
    let dataset_id: DatasetId = s(0)
        .parse()
        .map_err(|_| DatasetError::MalformedRow { row, reason: format!("unknown dataset_id {:?}", s(0)) })?;
    let meta = CellMeta::new(
        p.key.0.clone(),
        dataset_id,
        parse_field(s(2), "temperature_C", row)?,
        parse_field(s(3), "charge_rate_C", row)?,
        parse_field(s(4), "discharge_rate_C", row)?,
        parse_field(s(5), "nominal_capacity_Ah", row)?,
    )
    .map_err(|e| DatasetError::MalformedRow { row, reason: e.to_string() })?;
    let cell = match cells.get(&meta.cell_id) {
        Some(existing) if existing.as_ref() == &meta => existing.clone(),
        Some(_) => {
            return Err(DatasetError::MalformedRow { row, reason: format!("cell {} metadata changes", meta.cell_id) })
        }
        None => {
            let arc = Arc::new(meta);
            cells.insert(arc.cell_id.clone(), arc.clone());
            arc
        }
    };
    let capacity_ah: f64 = parse_field(s(7), "capacity_Ah", row)?;
    let cutoff = match (cols.get(C_CUTOFF), s(8)) {
        (Some(_), v) if !v.is_empty() => parse_field(v, "cutoff_current_A", row)?,
        _ => cell.default_cutoff_current_a(),
    };
    let charge_end = match (cols.get(C_CHARGE_END), s(9)) {
        (Some(_), v) if !v.is_empty() => parse_field(v, "charge_end_voltage_V", row)?,
        _ => schema.charge_end_voltage_v,
    };
    let curve = RelaxationCurve::new(p.times, p.voltages, cutoff, charge_end).map_err(|e| match e {
        DatasetError::InvalidCurve(_) => DatasetError::MalformedRow { row, reason: e.to_string() },
        other => other,
    })?;
    Ok(CycleRecord::new(cell, p.key.1, capacity_ah, curve))
}

/// Writes `ds` in the tabular format (all optional columns included).
pub fn write_dataset<W: Write>(ds: &Dataset, writer: W) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| DatasetError::Io(e.to_string());
    w.write_record(COLUMNS).map_err(io)?;
    for r in ds.records() {
        let c = &r.cell;
        for (t, u) in r.curve.times_s.iter().zip(&r.curve.voltages_v) {
            w.write_record([
                c.dataset_id.to_string(),
                c.cell_id.clone(),
                c.temperature_c.to_string(),
                c.charge_rate_c.to_string(),
                c.discharge_rate_c.to_string(),
                c.nominal_capacity_ah.to_string(),
                r.cycle_number.to_string(),
                r.capacity_ah.to_string(),
                r.curve.cutoff_current_a.to_string(),
                t.to_string(),
                u.to_string(),
                r.curve.charge_end_voltage_v.to_string(),
            ])
            .map_err(io)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<(), DatasetError> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(ds, f)
}
