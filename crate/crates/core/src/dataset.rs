//! Canonical experiment format, ingestion, windowing, per-experiment
//! normalization, and leak-free split construction.
//!
//! An experiment lives in one directory: `manifest.json` plus one file per
//! modality (`ts.csv`, `phase.csv`, `static.csv`, `text_emb.f32`,
//! `img_feat_<k>.f32`, `audio_mel.csv`, `mol_<k>.graph`). The time series
//! and phase vector are mandatory; everything else is optional and absence
//! is reported through availability flags, never by injecting defaults.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::MolecularGraph;
use crate::{derive_seed, Error, Result};

/// Sliding-window length in timesteps (2 min at 1 Hz).
pub const WINDOW: usize = 120;
/// Window stride in timesteps.
pub const STRIDE: usize = 30;
/// Prediction horizon in timesteps.
pub const HORIZON: usize = 60;
/// Total input channels.
pub const N_CHANNELS: usize = 29;
/// Continuous prediction targets (channel indices `0..21`).
pub const N_CONT_TARGETS: usize = 21;
/// Binary prediction targets (channel indices `21..25`).
pub const N_BIN_TARGETS: usize = 4;
/// Total prediction targets.
pub const N_TARGETS: usize = N_CONT_TARGETS + N_BIN_TARGETS;
/// Timesteps used as the normalization baseline.
pub const BASELINE_STEPS: usize = 300;
/// Floor applied to baseline standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Fixed tabular input width after padding/truncation.
pub const D_TAB: usize = 606;
/// Text embedding width.
pub const TEXT_DIM: usize = 384;
/// Image feature width.
pub const IMG_DIM: usize = 512;
/// Mel-spectrogram bands.
pub const MEL_BANDS: usize = 64;
/// Seconds of process time covered by one mel frame.
pub const MEL_SECONDS_PER_FRAME: usize = 2;

/// Canonical channel order: 21 continuous targets, 4 binary targets,
/// 4 manipulated inputs.
pub const CHANNEL_NAMES: [&str; N_CHANNELS] = [
    "T701", "T702", "T703", "T704", "T705", "T709", "T710", "T711", "T712", "P701", "P702",
    "PDI701", "PDI702", "FT701", "FT702", "FT703", "FT704", "L701", "L702", "QI701", "QI702",
    "LS701", "LS702", "P301", "V701", "U_REFLUX", "U_HEAT", "U_FEED", "U_COOL",
];

/// Column-temperature pairs ordered (lower position, upper position),
/// tracing the column from reboiler liquid to top.
pub const TEMP_PAIR_NAMES: [(&str, &str); 4] = [
    ("T703", "T709"),
    ("T709", "T711"),
    ("T711", "T712"),
    ("T712", "T705"),
];

pub fn channel_index(name: &str) -> Option<usize> {
    CHANNEL_NAMES.iter().position(|&c| c == name)
}

pub fn is_binary_channel(idx: usize) -> bool {
    (N_CONT_TARGETS..N_TARGETS).contains(&idx)
}

/// Temperature pairs as target-row indices `(lower, upper)`.
pub fn temp_pair_rows() -> [(usize, usize); 4] {
    TEMP_PAIR_NAMES.map(|(l, u)| (channel_index(l).unwrap(), channel_index(u).unwrap()))
}

/// Per-timestep operational phase.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Normal,
    Blind,
    Anomalous,
    Recovery,
}

pub const PHASES: [Phase; 4] = [Phase::Normal, Phase::Blind, Phase::Anomalous, Phase::Recovery];

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Normal => "normal",
            Phase::Blind => "blind",
            Phase::Anomalous => "anomalous",
            Phase::Recovery => "recovery",
        }
    }

    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Phase::Normal),
            "blind" => Ok(Phase::Blind),
            "anomalous" => Ok(Phase::Anomalous),
            "recovery" => Ok(Phase::Recovery),
            other => Err(Error::invalid(format!("unknown phase label: {other}"))),
        }
    }

    /// Class index used by the phase head.
    pub fn index(self) -> usize {
        match self {
            Phase::Normal => 0,
            Phase::Blind => 1,
            Phase::Anomalous => 2,
            Phase::Recovery => 3,
        }
    }

    /// Tie-break order for majority votes: normal < recovery < blind < anomalous.
    pub fn severity(self) -> usize {
        match self {
            Phase::Normal => 0,
            Phase::Recovery => 1,
            Phase::Blind => 2,
            Phase::Anomalous => 3,
        }
    }
}

/// Per-window modality availability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Availability {
    pub ts: bool,
    pub gc: bool,
    pub audio: bool,
    pub img: bool,
    pub tab: bool,
    pub text: bool,
    pub mol: bool,
}

impl Availability {
    pub fn all() -> Self {
        Self {
            ts: true,
            gc: true,
            audio: true,
            img: true,
            tab: true,
            text: true,
            mol: true,
        }
    }
}

/// One batch-distillation run with all of its modality channels.
#[derive(Debug, Clone)]
pub struct ExperimentRecord {
    pub id: String,
    pub operating_point: String,
    pub system: String,
    pub is_anomalous: bool,
    /// `[T_total, 29]` at 1 Hz.
    pub ts: Array2<f64>,
    pub phase: Vec<Phase>,
    pub static_tab: Option<Vec<f64>>,
    pub text_emb: Option<Vec<f64>>,
    pub img_feats: Vec<Vec<f64>>,
    /// `[frames, 64]` log-mel spectrogram.
    pub audio_mel: Option<Array2<f64>>,
    pub molecules: Vec<MolecularGraph>,
    pub fault_intervals: Vec<(usize, usize)>,
}

impl ExperimentRecord {
    pub fn t_total(&self) -> usize {
        self.ts.nrows()
    }

    pub fn availability(&self) -> Availability {
        let has_mol = !self.molecules.is_empty();
        Availability {
            ts: true,
            gc: has_mol,
            audio: self.audio_mel.is_some(),
            img: !self.img_feats.is_empty(),
            tab: self.static_tab.is_some(),
            text: self.text_emb.is_some(),
            mol: has_mol,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ts.ncols() != N_CHANNELS {
            return Err(Error::invalid(format!(
                "expected {N_CHANNELS} channels, got {}",
                self.ts.ncols()
            )));
        }
        if self.phase.len() != self.t_total() {
            return Err(Error::invalid(format!(
                "length mismatch: ts has {} steps, phase has {}",
                self.t_total(),
                self.phase.len()
            )));
        }
        if self.t_total() < BASELINE_STEPS {
            return Err(Error::invalid(format!(
                "record too short: {} < {BASELINE_STEPS} baseline steps",
                self.t_total()
            )));
        }
        for (t, row) in self.ts.axis_iter(Axis(0)).enumerate() {
            for c in N_CONT_TARGETS..N_TARGETS {
                let v = row[c];
                if v != 0.0 && v != 1.0 {
                    return Err(Error::invalid(format!(
                        "non-binary value {v} in binary channel {} at t={t}",
                        CHANNEL_NAMES[c]
                    )));
                }
            }
        }
        let any_fault_phase = self.phase.iter().any(|p| *p != Phase::Normal);
        if any_fault_phase != self.is_anomalous {
            return Err(Error::invalid(
                "is_anomalous flag disagrees with phase labels",
            ));
        }
        if let Some(tab) = &self.static_tab {
            if tab.len() < 602 || tab.len() > D_TAB {
                return Err(Error::invalid(format!(
                    "static_tab length {} outside 602..=606",
                    tab.len()
                )));
            }
        }
        Ok(())
    }
}

/// One 120-step training/eval unit with its 60-step target.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// `[120, 29]` input slice.
    pub x: Array2<f64>,
    /// `[60, 25]` target slice (targets only).
    pub y_target: Array2<f64>,
    pub anomaly_label: bool,
    pub phase_label: Phase,
    pub difficulty: f64,
    pub availability: Availability,
    pub experiment_id: String,
    pub t_start: usize,
    /// Fraction of normal timesteps inside the window (drives difficulty).
    pub normal_frac: f64,
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    id: String,
    operating_point: String,
    system: String,
    is_anomalous: bool,
    modalities: Vec<String>,
    #[serde(default)]
    fault_intervals: Vec<(usize, usize)>,
}

fn write_f32_file(path: &Path, data: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(data.len() * 4);
    for v in data {
        bytes.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32_file(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid(format!(
            "{}: length not a multiple of 4",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_matrix_csv(path: &Path, m: &Array2<f64>, header: Option<&[&str]>) -> Result<()> {
    let mut out = String::new();
    if let Some(h) = header {
        out.push_str(&h.join(","));
        out.push('\n');
    }
    for row in m.axis_iter(Axis(0)) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn parse_matrix_csv(path: &Path, expect_header: Option<&[&str]>) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if let Some(expected) = expect_header {
        let header = lines
            .next()
            .ok_or_else(|| Error::invalid(format!("{}: empty file", path.display())))?;
        let cols: Vec<&str> = header.split(',').collect();
        if cols != expected {
            return Err(Error::invalid(format!(
                "{}: unexpected header",
                path.display()
            )));
        }
    }
    let mut data = Vec::new();
    let mut ncols = 0usize;
    let mut nrows = 0usize;
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| Error::invalid(format!("{}: bad number '{c}'", path.display())))
            })
            .collect::<Result<_>>()?;
        if nrows == 0 {
            ncols = row.len();
        } else if row.len() != ncols {
            return Err(Error::invalid(format!(
                "{}: ragged row at line {nrows}",
                path.display()
            )));
        }
        data.extend(row);
        nrows += 1;
    }
    Array2::from_shape_vec((nrows, ncols), data)
        .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
}

/// Write a record as a canonical experiment directory.
pub fn save_experiment(rec: &ExperimentRecord, dir: &Path) -> Result<()> {
    rec.validate()?;
    fs::create_dir_all(dir)?;
    let mut modalities = vec!["ts.csv".to_string(), "phase.csv".to_string()];
    write_matrix_csv(&dir.join("ts.csv"), &rec.ts, Some(&CHANNEL_NAMES))?;
    let phase_text: String = rec
        .phase
        .iter()
        .map(|p| format!("{}\n", p.as_str()))
        .collect();
    fs::write(dir.join("phase.csv"), phase_text)?;
    if let Some(tab) = &rec.static_tab {
        let m = Array2::from_shape_vec((1, tab.len()), tab.clone()).unwrap();
        write_matrix_csv(&dir.join("static.csv"), &m, None)?;
        modalities.push("static.csv".into());
    }
    if let Some(emb) = &rec.text_emb {
        write_f32_file(&dir.join("text_emb.f32"), emb)?;
        modalities.push("text_emb.f32".into());
    }
    for (k, feat) in rec.img_feats.iter().enumerate() {
        let name = format!("img_feat_{k}.f32");
        write_f32_file(&dir.join(&name), feat)?;
        modalities.push(name);
    }
    if let Some(mel) = &rec.audio_mel {
        write_matrix_csv(&dir.join("audio_mel.csv"), mel, None)?;
        modalities.push("audio_mel.csv".into());
    }
    for (k, graph) in rec.molecules.iter().enumerate() {
        let name = format!("mol_{k}.graph");
        fs::write(dir.join(&name), graph.to_text())?;
        modalities.push(name);
    }
    let manifest = Manifest {
        id: rec.id.clone(),
        operating_point: rec.operating_point.clone(),
        system: rec.system.clone(),
        is_anomalous: rec.is_anomalous,
        modalities,
        fault_intervals: rec.fault_intervals.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join("manifest.json"), json)?;
    Ok(())
}

/// Load and validate one experiment directory.
pub fn load_experiment(dir: &Path) -> Result<ExperimentRecord> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
    let ts_path = dir.join("ts.csv");
    if !ts_path.exists() {
        return Err(Error::invalid(format!(
            "missing mandatory ts file: {}",
            ts_path.display()
        )));
    }
    let ts = parse_matrix_csv(&ts_path, Some(&CHANNEL_NAMES))?;
    let phase_text = fs::read_to_string(dir.join("phase.csv"))?;
    let phase: Vec<Phase> = phase_text
        .lines()
        .filter(|l| !l.is_empty())
        .map(Phase::from_str)
        .collect::<Result<_>>()?;

    let mut rec = ExperimentRecord {
        id: manifest.id,
        operating_point: manifest.operating_point,
        system: manifest.system,
        is_anomalous: manifest.is_anomalous,
        ts,
        phase,
        static_tab: None,
        text_emb: None,
        img_feats: Vec::new(),
        audio_mel: None,
        molecules: Vec::new(),
        fault_intervals: manifest.fault_intervals,
    };

    for name in &manifest.modalities {
        let path = dir.join(name);
        match name.as_str() {
            "ts.csv" | "phase.csv" => {}
            "static.csv" => {
                if path.exists() {
                    let m = parse_matrix_csv(&path, None)?;
                    if m.nrows() != 1 {
                        return Err(Error::invalid("static.csv must be a single row"));
                    }
                    rec.static_tab = Some(m.row(0).to_vec());
                }
            }
            "text_emb.f32" => {
                if path.exists() {
                    let v = read_f32_file(&path)?;
                    if v.len() != TEXT_DIM {
                        return Err(Error::invalid(format!(
                            "text_emb.f32 has {} floats, expected {TEXT_DIM}",
                            v.len()
                        )));
                    }
                    rec.text_emb = Some(v);
                }
            }
            "audio_mel.csv" => {
                if path.exists() {
                    let m = parse_matrix_csv(&path, None)?;
                    if m.ncols() != MEL_BANDS {
                        return Err(Error::invalid(format!(
                            "audio_mel.csv has {} bands, expected {MEL_BANDS}",
                            m.ncols()
                        )));
                    }
                    rec.audio_mel = Some(m);
                }
            }
            other if other.starts_with("img_feat_") => {
                if path.exists() {
                    let v = read_f32_file(&path)?;
                    if v.len() != IMG_DIM {
                        return Err(Error::invalid(format!(
                            "{other} has {} floats, expected {IMG_DIM}",
                            v.len()
                        )));
                    }
                    rec.img_feats.push(v);
                }
            }
            other if other.starts_with("mol_") => {
                if path.exists() {
                    rec.molecules
                        .push(MolecularGraph::from_text(&fs::read_to_string(&path)?)?);
                }
            }
            other => {
                return Err(Error::invalid(format!("unknown modality file: {other}")));
            }
        }
    }

    rec.validate()?;
    Ok(rec)
}

/// Load every experiment directory under a corpus root, sorted by id.
pub fn load_corpus(root: &Path) -> Result<Vec<ExperimentRecord>> {
    let mut dirs: Vec<_> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir() && p.join("manifest.json").exists())
        .collect();
    dirs.sort();
    let mut records = Vec::with_capacity(dirs.len());
    for d in dirs {
        records.push(load_experiment(&d)?);
    }
    if records.is_empty() {
        return Err(Error::invalid(format!(
            "no experiment directories under {}",
            root.display()
        )));
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Normalization & windowing
// ---------------------------------------------------------------------------

/// Normalize each continuous channel against the experiment's own first
/// 300 timesteps; binary valve channels are left untouched.
pub fn normalize_per_experiment(rec: &ExperimentRecord) -> Result<ExperimentRecord> {
    if rec.t_total() < BASELINE_STEPS {
        return Err(Error::invalid(format!(
            "cannot normalize: {} < {BASELINE_STEPS} baseline steps",
            rec.t_total()
        )));
    }
    let mut out = rec.clone();
    let baseline = rec.ts.slice(ndarray::s![..BASELINE_STEPS, ..]);
    for c in 0..N_CHANNELS {
        if is_binary_channel(c) {
            continue;
        }
        let col = baseline.column(c);
        let mu = col.mean().unwrap();
        let var = col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / BASELINE_STEPS as f64;
        let sigma = var.sqrt().max(SIGMA_FLOOR);
        let mut target = out.ts.column_mut(c);
        target.mapv_inplace(|v| (v - mu) / sigma);
    }
    Ok(out)
}

/// Segment a record into sliding windows with prediction targets.
/// Windows whose target would run past the end are dropped.
pub fn make_windows(
    rec: &ExperimentRecord,
    window: usize,
    stride: usize,
    horizon: usize,
) -> Vec<WindowSample> {
    let t_total = rec.t_total();
    let avail = rec.availability();
    let mut out = Vec::new();
    if t_total < window + horizon {
        return out;
    }
    let mut t_start = 0usize;
    while t_start + window + horizon <= t_total {
        let x = rec
            .ts
            .slice(ndarray::s![t_start..t_start + window, ..])
            .to_owned();
        let y = rec
            .ts
            .slice(ndarray::s![
                t_start + window..t_start + window + horizon,
                ..N_TARGETS
            ])
            .to_owned();
        let phases = &rec.phase[t_start..t_start + window];
        let mut counts = [0usize; 4];
        for p in phases {
            counts[p.index()] += 1;
        }
        let phase_label = majority_phase(&counts);
        let normal_frac = counts[Phase::Normal.index()] as f64 / window as f64;
        // audio coverage for this window: the slice must be long enough for
        // the conv stack, else the modality is masked for this window
        let mut w_avail = avail;
        if avail.audio {
            let f0 = t_start / MEL_SECONDS_PER_FRAME;
            let f1 = (t_start + window) / MEL_SECONDS_PER_FRAME;
            let frames = rec.audio_mel.as_ref().map(|m| m.nrows()).unwrap_or(0);
            w_avail.audio = f1.min(frames).saturating_sub(f0) >= 16;
        }
        let mut sample = WindowSample {
            x,
            y_target: y,
            anomaly_label: phase_label != Phase::Normal,
            phase_label,
            difficulty: 0.0,
            availability: w_avail,
            experiment_id: rec.id.clone(),
            t_start,
            normal_frac,
        };
        sample.difficulty = crate::trainer::difficulty_of(&sample);
        out.push(sample);
        t_start += stride;
    }
    out
}

/// Majority phase with severity tie-break (more severe wins).
fn majority_phase(counts: &[usize; 4]) -> Phase {
    let mut best = Phase::Normal;
    let mut best_count = 0usize;
    for p in PHASES {
        let c = counts[p.index()];
        if c > best_count || (c == best_count && c > 0 && p.severity() > best.severity()) {
            best = p;
            best_count = c;
        }
    }
    best
}

/// Slice the record's mel frames covering a window, if any.
pub fn audio_slice(rec: &ExperimentRecord, t_start: usize, window: usize) -> Option<Array2<f64>> {
    let mel = rec.audio_mel.as_ref()?;
    let f0 = t_start / MEL_SECONDS_PER_FRAME;
    let f1 = ((t_start + window) / MEL_SECONDS_PER_FRAME).min(mel.nrows());
    if f1 <= f0 {
        return None;
    }
    Some(mel.slice(ndarray::s![f0..f1, ..]).to_owned())
}

// ---------------------------------------------------------------------------
// Split search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

pub const PARTITIONS: [Partition; 3] = [Partition::Train, Partition::Val, Partition::Test];

impl Partition {
    pub fn index(self) -> usize {
        match self {
            Partition::Train => 0,
            Partition::Val => 1,
            Partition::Test => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Val => "val",
            Partition::Test => "test",
        }
    }
}

/// Leak-free assignment of experiments to partitions via their operating
/// points: no operating point ever spans two partitions.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub op_map: BTreeMap<String, Partition>,
}

impl SplitAssignment {
    pub fn partition_ids(&self, p: Partition) -> &[String] {
        match p {
            Partition::Train => &self.train,
            Partition::Val => &self.val,
            Partition::Test => &self.test,
        }
    }

    pub fn partition_of(&self, rec: &ExperimentRecord) -> Option<Partition> {
        self.op_map.get(&rec.operating_point).copied()
    }

    pub fn records<'a>(
        &self,
        records: &'a [ExperimentRecord],
        p: Partition,
    ) -> Vec<&'a ExperimentRecord> {
        let ids = self.partition_ids(p);
        records.iter().filter(|r| ids.contains(&r.id)).collect()
    }
}

/// Lexicographic assignment score; smaller is better. `None` = infeasible.
///
/// Feasibility requires ≥1 normal and ≥1 anomalous experiment in every
/// partition. The first component is the summed deviation of per-partition
/// anomaly ratios from the corpus ratio; the second is the deviation of
/// experiment-count fractions from the requested ratios.
pub fn split_score(
    ops: &[(String, Vec<(bool, String)>)],
    assignment: &[usize],
    ratios: (f64, f64, f64),
) -> Option<(f64, f64)> {
    let mut n = [0usize; 3];
    let mut anom = [0usize; 3];
    for (op_idx, part) in assignment.iter().enumerate() {
        for (is_anom, _) in &ops[op_idx].1 {
            n[*part] += 1;
            if *is_anom {
                anom[*part] += 1;
            }
        }
    }
    let total: usize = n.iter().sum();
    let total_anom: usize = anom.iter().sum();
    for p in 0..3 {
        if n[p] == 0 || anom[p] == 0 || anom[p] == n[p] {
            return None; // a partition lacks a normal or an anomalous run
        }
    }
    let global = total_anom as f64 / total as f64;
    let anomaly_dev: f64 = (0..3)
        .map(|p| (anom[p] as f64 / n[p] as f64 - global).abs())
        .sum();
    let want = [ratios.0, ratios.1, ratios.2];
    let size_dev: f64 = (0..3)
        .map(|p| (n[p] as f64 / total as f64 - want[p]).abs())
        .sum();
    Some((anomaly_dev, size_dev))
}

fn better(a: Option<(f64, f64)>, b: Option<(f64, f64)>) -> bool {
    match (a, b) {
        (Some(_), None) => true,
        (Some((a0, a1)), Some((b0, b1))) => a0 < b0 || (a0 == b0 && a1 < b1),
        _ => false,
    }
}

/// Group records by operating point, ordered by OP name.
pub fn group_by_op(records: &[ExperimentRecord]) -> Vec<(String, Vec<(bool, String)>)> {
    let mut map: BTreeMap<String, Vec<(bool, String)>> = BTreeMap::new();
    for r in records {
        map.entry(r.operating_point.clone())
            .or_default()
            .push((r.is_anomalous, r.id.clone()));
    }
    map.into_iter().collect()
}

/// Best-scoring leak-free split over seeded random partitions of operating
/// points. When the assignment space `3^n_ops` fits within the seed budget
/// the search enumerates it exhaustively instead of sampling, so small
/// corpora always get the optimum.
pub fn search_split(
    records: &[ExperimentRecord],
    n_seeds: usize,
    ratios: (f64, f64, f64),
) -> Result<SplitAssignment> {
    let ops = group_by_op(records);
    let n_ops = ops.len();
    if n_ops < 3 {
        return Err(Error::Infeasible(format!(
            "need at least 3 distinct operating points, got {n_ops}"
        )));
    }
    let total_assignments = 3f64.powi(n_ops as i32);
    let mut best: Option<(Vec<usize>, (f64, f64))> = None;

    let mut consider = |assignment: &[usize], best: &mut Option<(Vec<usize>, (f64, f64))>| {
        if let Some(score) = split_score(&ops, assignment, ratios) {
            let current = best.as_ref().map(|(_, s)| *s);
            if better(Some(score), current) {
                *best = Some((assignment.to_vec(), score));
            }
        }
    };

    if total_assignments <= n_seeds as f64 {
        let mut assignment = vec![0usize; n_ops];
        loop {
            consider(&assignment, &mut best);
            let mut i = 0;
            loop {
                if i == n_ops {
                    break;
                }
                assignment[i] += 1;
                if assignment[i] < 3 {
                    break;
                }
                assignment[i] = 0;
                i += 1;
            }
            if i == n_ops {
                break;
            }
        }
    } else {
        for seed in 0..n_seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(0x5EED_0115, 1, seed as u64));
            let assignment: Vec<usize> = (0..n_ops)
                .map(|_| {
                    let u: f64 = rng.random();
                    if u < ratios.0 {
                        0
                    } else if u < ratios.0 + ratios.1 {
                        1
                    } else {
                        2
                    }
                })
                .collect();
            consider(&assignment, &mut best);
        }
    }

    let (assignment, _) = best.ok_or_else(|| {
        Error::Infeasible(
            "no feasible split: every candidate leaves a partition without both classes".into(),
        )
    })?;

    let mut split = SplitAssignment {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        op_map: BTreeMap::new(),
    };
    for (op_idx, part) in assignment.iter().enumerate() {
        let (op_name, experiments) = &ops[op_idx];
        let partition = PARTITIONS[*part];
        split.op_map.insert(op_name.clone(), partition);
        for (_, id) in experiments {
            match partition {
                Partition::Train => split.train.push(id.clone()),
                Partition::Val => split.val.push(id.clone()),
                Partition::Test => split.test.push(id.clone()),
            }
        }
    }
    split.train.sort();
    split.val.sort();
    split.test.sort();
    Ok(split)
}
