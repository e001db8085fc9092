//! Trial recordings: the on-disk layout, manifest loading, CSV import, and a
//! seeded generator of desk-scale sEMG-like datasets.
//!
//! Trial files are a 32-byte little-endian header followed by `S x C` f32
//! samples in time-major order:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SEMG"
//!      4     4  version (u32, currently 1)
//!      8     4  S, samples per channel (u32)
//!     12     4  C, channel count (u32)
//!     16     4  sample rate in Hz (u32)
//!     20    12  reserved, zero
//!     32   4SC  samples, row-major (time-major) f32
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Class abbreviations in reporting order.
pub const GESTURES: [&str; 10] = ["HC", "T", "I", "M", "R", "L", "T-I", "T-M", "T-R", "T-L"];
pub const N_CLASSES: usize = 10;
pub const N_CHANNELS: usize = 2;
pub const TRIALS_PER_GESTURE: u32 = 6;
pub const SAMPLE_RATE_HZ: u32 = 4000;
pub const TRIAL_SECONDS: u32 = 5;

const MAGIC: &[u8; 4] = b"SEMG";
const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 32;
const MANIFEST_VERSION: u32 = 1;

/// One recording of a single gesture repetition.
#[derive(Debug, Clone, PartialEq)]
pub struct Trial {
    /// `n_samples x n_channels`, time-major.
    pub samples: Vec<f32>,
    pub n_samples: usize,
    pub n_channels: usize,
    pub subject_id: u32,
    pub gesture: usize,
    pub trial_index: u32,
    pub sample_rate_hz: u32,
}

impl Trial {
    pub fn key(&self) -> TrialKey {
        TrialKey {
            subject: self.subject_id,
            gesture: self.gesture,
            trial: self.trial_index,
        }
    }

    pub fn channel(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.samples.iter().skip(c).step_by(self.n_channels).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialKey {
    pub subject: u32,
    pub gesture: usize,
    pub trial: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Real,
    Synthetic,
}

/// The JSON manifest describing a dataset on disk. Paths in `files` are
/// relative to the manifest's directory; `files[subject][gesture][i]` is
/// trial `i + 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    pub provenance: Provenance,
    pub sample_rate_hz: u32,
    pub subjects: Vec<u32>,
    pub gestures: Vec<String>,
    pub trials_per_gesture: u32,
    pub files: BTreeMap<String, BTreeMap<String, Vec<String>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl DatasetManifest {
    /// Trial keys in (subject, gesture, trial) order, with their relative paths.
    pub fn entries(&self) -> Result<Vec<(TrialKey, String)>> {
        let mut out = Vec::new();
        for &subject in &self.subjects {
            let per_gesture = self.files.get(&subject.to_string()).ok_or_else(|| {
                Error::Manifest(format!("no files listed for subject {subject}"))
            })?;
            for (g, label) in self.gestures.iter().enumerate() {
                let Some(paths) = per_gesture.get(label) else {
                    continue;
                };
                for (i, p) in paths.iter().enumerate() {
                    let key = TrialKey {
                        subject,
                        gesture: g,
                        trial: i as u32 + 1,
                    };
                    out.push((key, p.clone()));
                }
            }
        }
        Ok(out)
    }

    /// Number of trials recorded for a (subject, gesture) pair.
    pub fn trial_count(&self, subject: u32, gesture: usize) -> usize {
        self.files
            .get(&subject.to_string())
            .and_then(|m| m.get(self.gestures.get(gesture)?))
            .map_or(0, Vec::len)
    }

    fn validate_schema(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!("unsupported version {}", self.version)));
        }
        if self.gestures.len() != N_CLASSES
            || self.gestures.iter().zip(GESTURES).any(|(a, b)| a != b)
        {
            return Err(Error::Manifest(format!(
                "gestures must be {GESTURES:?} in that order"
            )));
        }
        if self.subjects.is_empty() {
            return Err(Error::Manifest("no subjects".into()));
        }
        if self.sample_rate_hz == 0 {
            return Err(Error::Manifest("sample_rate_hz must be positive".into()));
        }
        Ok(())
    }

    pub fn expected_samples(&self) -> usize {
        (TRIAL_SECONDS * self.sample_rate_hz) as usize
    }
}

struct TrialHandle {
    path: Option<PathBuf>,
    cache: OnceLock<Arc<Trial>>,
}

/// A manifest plus lazily loaded, validated trials.
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub root: PathBuf,
    handles: BTreeMap<TrialKey, TrialHandle>,
}

impl std::fmt::Debug for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dataset")
            .field("root", &self.root)
            .field("n_trials", &self.handles.len())
            .finish()
    }
}

impl Dataset {
    /// Builds an in-memory dataset; used by tests and by the generator.
    pub fn from_trials(manifest: DatasetManifest, trials: Vec<Trial>) -> Self {
        let handles = trials
            .into_iter()
            .map(|t| {
                let cache = OnceLock::new();
                let key = t.key();
                let _ = cache.set(Arc::new(t));
                (key, TrialHandle { path: None, cache })
            })
            .collect();
        Self {
            manifest,
            root: PathBuf::new(),
            handles,
        }
    }

    pub fn n_trials(&self) -> usize {
        self.handles.len()
    }

    pub fn keys(&self) -> impl Iterator<Item = TrialKey> + '_ {
        self.handles.keys().copied()
    }

    pub fn contains(&self, key: TrialKey) -> bool {
        self.handles.contains_key(&key)
    }

    /// Loads (once) and returns a trial.
    pub fn trial(&self, key: TrialKey) -> Result<Arc<Trial>> {
        let handle = self.handles.get(&key).ok_or_else(|| {
            Error::Manifest(format!(
                "trial (subject {}, gesture {}, trial {}) not in dataset",
                key.subject, key.gesture, key.trial
            ))
        })?;
        if let Some(t) = handle.cache.get() {
            return Ok(t.clone());
        }
        let path = handle.path.as_ref().expect("uncached handle has a path");
        let trial = read_trial_file(path, key, Some(self.manifest.sample_rate_hz))?;
        check_duration(&trial, self.manifest.expected_samples())?;
        Ok(handle.cache.get_or_init(|| Arc::new(trial)).clone())
    }
}

fn check_duration(trial: &Trial, expected: usize) -> Result<()> {
    if trial.n_samples != expected {
        return Err(format_err(
            trial.key(),
            format!("expected {expected} samples, found {}", trial.n_samples),
        ));
    }
    Ok(())
}

fn format_err(key: TrialKey, reason: String) -> Error {
    Error::TrialFormat {
        subject: key.subject,
        gesture: key.gesture,
        trial: key.trial,
        reason,
    }
}

/// Reads a manifest and validates every declared trial (existence, header,
/// shape, sample rate, finiteness). Samples are loaded again on demand.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path).map_err(|e| {
        Error::Manifest(format!("cannot read {}: {e}", manifest_path.display()))
    })?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Manifest(format!("{}: {e}", manifest_path.display())))?;
    manifest.validate_schema()?;
    let root = manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let entries = manifest.entries()?;
    for (key, rel) in &entries {
        if !root.join(rel).is_file() {
            return Err(Error::Manifest(format!(
                "trial file {} (subject {}, gesture {}, trial {}) is missing",
                rel, key.subject, key.gesture, key.trial
            )));
        }
    }
    let expected = manifest.expected_samples();
    entries.par_iter().try_for_each(|(key, rel)| {
        let t = read_trial_file(&root.join(rel), *key, Some(manifest.sample_rate_hz))?;
        check_duration(&t, expected)
    })?;
    let handles = entries
        .into_iter()
        .map(|(key, rel)| {
            (
                key,
                TrialHandle {
                    path: Some(root.join(rel)),
                    cache: OnceLock::new(),
                },
            )
        })
        .collect();
    Ok(Dataset {
        manifest,
        root,
        handles,
    })
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn encode_trial(trial: &Trial) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + trial.samples.len() * 4);
    buf.extend_from_slice(MAGIC);
    for v in [
        FORMAT_VERSION,
        trial.n_samples as u32,
        trial.n_channels as u32,
        trial.sample_rate_hz,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.resize(HEADER_LEN, 0);
    for s in &trial.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf
}

pub fn write_trial_file(trial: &Trial, path: &Path) -> Result<()> {
    fs::write(path, encode_trial(trial))?;
    Ok(())
}

/// Parses a trial file, attaching `key` as identity. When `expected_rate` is
/// given the header's rate must match it.
pub fn read_trial_file(path: &Path, key: TrialKey, expected_rate: Option<u32>) -> Result<Trial> {
    let bytes = fs::read(path).map_err(|e| format_err(key, format!("{}: {e}", path.display())))?;
    decode_trial(&bytes, key, expected_rate)
}

pub fn decode_trial(bytes: &[u8], key: TrialKey, expected_rate: Option<u32>) -> Result<Trial> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(format_err(key, "missing SEMG header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, s, c, rate) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != FORMAT_VERSION {
        return Err(format_err(key, format!("unsupported format version {version}")));
    }
    if c != N_CHANNELS {
        return Err(format_err(key, format!("expected {N_CHANNELS} channels, found {c}")));
    }
    if let Some(r) = expected_rate {
        if rate != r {
            return Err(format_err(key, format!("sample rate {rate} Hz, expected {r} Hz")));
        }
    }
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != s * c * 4 {
        return Err(format_err(
            key,
            format!("payload is {} bytes, header implies {}", payload.len(), s * c * 4),
        ));
    }
    let samples: Vec<f32> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(format_err(key, format!("non-finite sample at index {i}")));
    }
    Ok(Trial {
        samples,
        n_samples: s,
        n_channels: c,
        subject_id: key.subject,
        gesture: key.gesture,
        trial_index: key.trial,
        sample_rate_hz: rate,
    })
}

/// Reads a headerless two-column CSV (one row per sample).
pub fn import_csv(path: &Path, key: TrialKey, sample_rate_hz: u32) -> Result<Trial> {
    let file = fs::File::open(path).map_err(|e| format_err(key, format!("{}: {e}", path.display())))?;
    let mut samples = Vec::new();
    for (line_no, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split([',', ';', '\t', ' ']).filter(|s| !s.is_empty()).collect();
        if cols.len() != N_CHANNELS {
            return Err(format_err(
                key,
                format!("line {}: expected {N_CHANNELS} columns, found {}", line_no + 1, cols.len()),
            ));
        }
        for c in cols {
            let v: f32 = c
                .parse()
                .map_err(|_| format_err(key, format!("line {}: bad number {c:?}", line_no + 1)))?;
            if !v.is_finite() {
                return Err(format_err(key, format!("line {}: non-finite value", line_no + 1)));
            }
            samples.push(v);
        }
    }
    Ok(Trial {
        n_samples: samples.len() / N_CHANNELS,
        samples,
        n_channels: N_CHANNELS,
        subject_id: key.subject,
        gesture: key.gesture,
        trial_index: key.trial,
        sample_rate_hz,
    })
}

fn ensure_empty_dir(out_dir: &Path) -> Result<()> {
    if out_dir.exists() {
        let non_empty = fs::read_dir(out_dir)
            .map_err(|e| Error::OutputDir(format!("{}: {e}", out_dir.display())))?
            .next()
            .is_some();
        if non_empty {
            return Err(Error::OutputDir(format!(
                "{} exists and is not empty",
                out_dir.display()
            )));
        }
    }
    fs::create_dir_all(out_dir)?;
    Ok(())
}

fn trial_rel_path(key: TrialKey) -> String {
    format!("S{:02}/{}_{}.semg", key.subject, GESTURES[key.gesture], key.trial)
}

/// Converts a directory of CSV recordings into the binary layout.
///
/// Expected input: `src/<subject dir>/<LABEL>_<trial>.csv`, where the subject
/// directory name ends in the subject number (`S1`, `subject03`, `7`) and
/// `LABEL` is one of [`GESTURES`] (case-insensitive). Recordings longer than
/// five seconds are truncated; shorter ones are rejected.
pub fn ingest_csv_tree(src: &Path, out_dir: &Path, sample_rate_hz: u32) -> Result<DatasetManifest> {
    let mut found: BTreeMap<TrialKey, PathBuf> = BTreeMap::new();
    for entry in fs::read_dir(src).map_err(|e| Error::Manifest(format!("{}: {e}", src.display())))? {
        let entry = entry?;
        if !entry.file_type()?.is_dir() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        let digits: String = name.chars().rev().take_while(char::is_ascii_digit).collect();
        let Ok(subject) = digits.chars().rev().collect::<String>().parse::<u32>() else {
            continue;
        };
        for f in fs::read_dir(entry.path())? {
            let path = f?.path();
            if path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref()
                != Some("csv")
            {
                continue;
            }
            let stem = path.file_stem().unwrap().to_string_lossy().to_ascii_uppercase();
            let Some((label, trial)) = stem.rsplit_once('_') else {
                continue;
            };
            let (Some(gesture), Ok(trial)) =
                (GESTURES.iter().position(|g| *g == label), trial.parse::<u32>())
            else {
                continue;
            };
            found.insert(TrialKey { subject, gesture, trial }, path);
        }
    }
    if found.is_empty() {
        return Err(Error::Manifest(format!("no recordings found under {}", src.display())));
    }
    ensure_empty_dir(out_dir)?;
    let expected = (TRIAL_SECONDS * sample_rate_hz) as usize;
    let mut files: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
    let mut subjects: Vec<u32> = found.keys().map(|k| k.subject).collect();
    subjects.dedup();
    for (key, path) in &found {
        let mut trial = import_csv(path, *key, sample_rate_hz)?;
        if trial.n_samples < expected {
            return Err(format_err(
                *key,
                format!("{} samples, need {expected}", trial.n_samples),
            ));
        }
        trial.samples.truncate(expected * N_CHANNELS);
        trial.n_samples = expected;
        let rel = trial_rel_path(*key);
        fs::create_dir_all(out_dir.join(&rel).parent().unwrap())?;
        write_trial_file(&trial, &out_dir.join(&rel))?;
        let list = files
            .entry(key.subject.to_string())
            .or_default()
            .entry(GESTURES[key.gesture].to_string())
            .or_default();
        if list.len() + 1 != key.trial as usize {
            return Err(Error::Manifest(format!(
                "subject {} gesture {}: trials must be numbered consecutively from 1",
                key.subject, GESTURES[key.gesture]
            )));
        }
        list.push(rel);
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        provenance: Provenance::Real,
        sample_rate_hz,
        subjects,
        gestures: GESTURES.iter().map(|s| s.to_string()).collect(),
        trials_per_gesture: TRIALS_PER_GESTURE,
        files,
        seed: None,
    };
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// A subject-level domain shift applied on top of the subject's profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub subject: u32,
    /// Extra multiplicative gain per channel.
    pub gain_skew: [f64; 2],
    pub channel_swap: bool,
    /// Envelope delay in seconds (positive = later onset).
    pub envelope_shift_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectProfile {
    pub gain: [f64; 2],
    pub noise_floor: f64,
}

/// Piecewise-linear amplitude curve over a trial: `(time_s, amplitude)` knots.
pub type Envelope = Vec<(f64, f64)>;

/// Parameters of the synthetic sEMG-like generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_subjects: u32,
    pub master_seed: u64,
    pub sample_rate_hz: u32,
    /// Carrier centre frequency per class and channel, Hz.
    pub carriers_hz: Vec<[f64; 2]>,
    /// Amplitude envelope per class and channel.
    pub envelopes: Vec<[Envelope; 2]>,
    /// One profile per subject, subject `i + 1` uses entry `i`.
    pub subjects: Vec<SubjectProfile>,
    #[serde(default)]
    pub shifts: Vec<DomainShift>,
    /// Global multiplier on the recorded signal, noise included.
    #[serde(default = "default_amplitude_scale")]
    pub amplitude_scale: f64,
}

/// Output units are chosen so that, at initialization, a window's spatial
/// tokens are several times larger in norm than the Time2Vec tokens.
pub const DEFAULT_AMPLITUDE_SCALE: f64 = 4.0;

fn default_amplitude_scale() -> f64 {
    DEFAULT_AMPLITUDE_SCALE
}

/// Amplitude levels of the per-class envelope plateaus (channel 0, channel 1).
const PLATEAUS: [[f64; 2]; N_CLASSES] = [
    [0.25, 0.25],
    [0.5, 0.5],
    [1.0, 1.0],
    [2.0, 2.0],
    [0.25, 0.5],
    [0.5, 0.25],
    [0.25, 1.0],
    [1.0, 0.25],
    [0.5, 2.0],
    [2.0, 0.5],
];

impl SyntheticSpec {
    pub fn with_subjects(n_subjects: u32, master_seed: u64) -> Self {
        let t_end = TRIAL_SECONDS as f64;
        let carriers_hz = (0..N_CLASSES)
            .map(|g| [50.0 + 35.0 * g as f64, 400.0 - 30.0 * g as f64])
            .collect();
        let envelopes = PLATEAUS
            .iter()
            .enumerate()
            .map(|(g, p)| {
                // Onset ramp, a class-dependent mid-trial swell, offset ramp.
                let swell = 1.0 + 0.1 * ((g % 3) as f64);
                let env = |a: f64| -> Envelope {
                    vec![
                        (0.0, 0.0),
                        (0.2, a),
                        (2.5, a * swell),
                        (t_end - 0.2, a),
                        (t_end, 0.0),
                    ]
                };
                [env(p[0]), env(p[1])]
            })
            .collect();
        let subjects = (0..n_subjects)
            .map(|s| {
                let u = derive_seed(master_seed, &[0xA11CE, s as u64]);
                let frac = |bits: u64| (bits % 10_000) as f64 / 10_000.0;
                SubjectProfile {
                    gain: [0.9 + 0.2 * frac(u), 0.9 + 0.2 * frac(u >> 20)],
                    noise_floor: 0.03 + 0.02 * frac(u >> 40),
                }
            })
            .collect();
        Self {
            n_subjects,
            master_seed,
            sample_rate_hz: SAMPLE_RATE_HZ,
            carriers_hz,
            envelopes,
            subjects,
            shifts: Vec::new(),
            amplitude_scale: DEFAULT_AMPLITUDE_SCALE,
        }
    }

    /// Channel swap with a strong gain skew on one subject.
    pub fn with_adaptation_shift(mut self, subject: u32) -> Self {
        self.shifts.push(DomainShift {
            subject,
            gain_skew: [2.0, 0.5],
            channel_swap: true,
            envelope_shift_s: 0.0,
        });
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.n_subjects == 0 {
            return bad("n_subjects must be at least 1".into());
        }
        if !(self.amplitude_scale > 0.0 && self.amplitude_scale.is_finite()) {
            return bad("amplitude_scale must be positive and finite".into());
        }
        if self.subjects.len() != self.n_subjects as usize {
            return bad(format!(
                "{} subject profiles for {} subjects",
                self.subjects.len(),
                self.n_subjects
            ));
        }
        if self.carriers_hz.len() != N_CLASSES || self.envelopes.len() != N_CLASSES {
            return bad(format!("need {N_CLASSES} carriers and envelopes"));
        }
        let nyquist = self.sample_rate_hz as f64 / 2.0;
        if self.carriers_hz.iter().flatten().any(|&f| !(f > 0.0 && f * 1.1 < nyquist)) {
            return bad("carrier frequencies must lie in (0, nyquist / 1.1)".into());
        }
        for env in self.envelopes.iter().flatten() {
            if env.is_empty() || env.windows(2).any(|w| w[1].0 < w[0].0) {
                return bad("envelope knots must be non-empty and time-ordered".into());
            }
            if env.iter().any(|&(_, a)| !(a.is_finite() && a >= 0.0)) {
                return bad("envelope amplitudes must be finite and non-negative".into());
            }
        }
        for i in 0..N_CLASSES {
            for j in i + 1..N_CLASSES {
                if self.carriers_hz[i] == self.carriers_hz[j] && self.envelopes[i] == self.envelopes[j] {
                    return bad(format!("classes {i} and {j} share carrier and envelope"));
                }
            }
        }
        for s in &self.shifts {
            if s.subject == 0 || s.subject > self.n_subjects {
                return bad(format!("shift names unknown subject {}", s.subject));
            }
        }
        Ok(())
    }

    fn shift_for(&self, subject: u32) -> Option<&DomainShift> {
        self.shifts.iter().find(|s| s.subject == subject)
    }

    /// Synthesizes one trial. Pure function of the spec and the key.
    pub fn synthesize(&self, key: TrialKey) -> Trial {
        let mut rng = rng_from(derive_seed(
            self.master_seed,
            &[key.subject as u64, key.gesture as u64, key.trial as u64],
        ));
        let rate = self.sample_rate_hz as f64;
        let n = (TRIAL_SECONDS * self.sample_rate_hz) as usize;
        let profile = &self.subjects[key.subject as usize - 1];
        let shift = self.shift_for(key.subject);
        let noise = Normal::new(0.0, profile.noise_floor.max(0.0)).unwrap();

        let mut channels = [vec![0.0f64; n], vec![0.0f64; n]];
        for (c, out) in channels.iter_mut().enumerate() {
            // Band-limited carrier: three tones around the centre with random phases.
            let f = self.carriers_hz[key.gesture][c];
            let tones: Vec<(f64, f64)> = [0.9, 1.0, 1.1]
                .iter()
                .map(|m| (f * m, rng.random::<f64>() * std::f64::consts::TAU))
                .collect();
            let norm = (2.0f64 / 3.0).sqrt();
            let env = &self.envelopes[key.gesture][c];
            let delay = shift.map_or(0.0, |s| s.envelope_shift_s);
            for (i, v) in out.iter_mut().enumerate() {
                let t = i as f64 / rate;
                let carrier: f64 = tones
                    .iter()
                    .map(|(fr, ph)| (std::f64::consts::TAU * fr * t + ph).sin())
                    .sum::<f64>()
                    * norm;
                *v = carrier * envelope_at(env, t - delay) * profile.gain[c];
            }
        }
        if let Some(s) = shift {
            if s.channel_swap {
                channels.swap(0, 1);
            }
            for (c, ch) in channels.iter_mut().enumerate() {
                ch.iter_mut().for_each(|v| *v *= s.gain_skew[c]);
            }
        }
        let mut samples = Vec::with_capacity(n * N_CHANNELS);
        for i in 0..n {
            for ch in &channels {
                samples.push(((ch[i] + noise.sample(&mut rng)) * self.amplitude_scale) as f32);
            }
        }
        Trial {
            samples,
            n_samples: n,
            n_channels: N_CHANNELS,
            subject_id: key.subject,
            gesture: key.gesture,
            trial_index: key.trial,
            sample_rate_hz: self.sample_rate_hz,
        }
    }

    pub fn keys(&self) -> Vec<TrialKey> {
        let mut keys = Vec::new();
        for subject in 1..=self.n_subjects {
            for gesture in 0..N_CLASSES {
                for trial in 1..=TRIALS_PER_GESTURE {
                    keys.push(TrialKey { subject, gesture, trial });
                }
            }
        }
        keys
    }

    pub fn manifest(&self) -> DatasetManifest {
        let mut files: BTreeMap<String, BTreeMap<String, Vec<String>>> = BTreeMap::new();
        for key in self.keys() {
            files
                .entry(key.subject.to_string())
                .or_default()
                .entry(GESTURES[key.gesture].to_string())
                .or_default()
                .push(trial_rel_path(key));
        }
        DatasetManifest {
            version: MANIFEST_VERSION,
            provenance: Provenance::Synthetic,
            sample_rate_hz: self.sample_rate_hz,
            subjects: (1..=self.n_subjects).collect(),
            gestures: GESTURES.iter().map(|s| s.to_string()).collect(),
            trials_per_gesture: TRIALS_PER_GESTURE,
            files,
            seed: Some(self.master_seed),
        }
    }

    /// Generates every trial in memory.
    pub fn generate_in_memory(&self) -> Result<Dataset> {
        self.validate()?;
        let trials: Vec<Trial> = self.keys().par_iter().map(|k| self.synthesize(*k)).collect();
        Ok(Dataset::from_trials(self.manifest(), trials))
    }
}

fn envelope_at(env: &[(f64, f64)], t: f64) -> f64 {
    let first = env[0];
    let last = env[env.len() - 1];
    if t <= first.0 {
        return first.1;
    }
    if t >= last.0 {
        return last.1;
    }
    let i = env.partition_point(|&(kt, _)| kt <= t);
    let (t0, a0) = env[i - 1];
    let (t1, a1) = env[i];
    if t1 <= t0 {
        return a1;
    }
    a0 + (a1 - a0) * (t - t0) / (t1 - t0)
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::with_subjects(8, 20_240_601)
    }
}

/// Writes `spec`'s dataset to `out_dir` (which must be empty or absent) and
/// returns its manifest. Output bytes depend only on the spec.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    ensure_empty_dir(out_dir)?;
    for s in 1..=spec.n_subjects {
        fs::create_dir_all(out_dir.join(format!("S{s:02}")))?;
    }
    spec.keys().par_iter().try_for_each(|key| {
        write_trial_file(&spec.synthesize(*key), &out_dir.join(trial_rel_path(*key)))
    })?;
    let manifest = spec.manifest();
    write_manifest(&manifest, &out_dir.join("manifest.json"))?;
    let mut f = fs::File::create(out_dir.join("synthetic_spec.json"))?;
    f.write_all(serde_json::to_string_pretty(spec)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(manifest)
}

/// Per-channel RMS of each window of a trial.
fn window_rms(trial: &Trial, window_len: usize, stride: usize) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + window_len <= trial.n_samples {
        let mut acc = [0.0f64; 2];
        for t in start..start + window_len {
            for (c, a) in acc.iter_mut().enumerate() {
                let v = trial.samples[t * trial.n_channels + c] as f64;
                *a += v * v;
            }
        }
        out.push(acc.map(|a| (a / window_len as f64).sqrt()));
        start += stride;
    }
    out
}

/// Separability check: a nearest-centroid classifier on per-window,
/// per-channel RMS, fit on trials 1-4 of every subject and scored on trial 6.
pub fn rms_centroid_accuracy(ds: &Dataset, window_len: usize, stride: usize) -> Result<f64> {
    let mut sums = [[0.0f64; 2]; N_CLASSES];
    let mut counts = vec![0usize; N_CLASSES];
    let mut test = Vec::new();
    for key in ds.keys().collect::<Vec<_>>() {
        if key.trial == 5 || key.trial > 6 {
            continue;
        }
        let trial = ds.trial(key)?;
        let feats = window_rms(&trial, window_len, stride);
        if key.trial == 6 {
            test.extend(feats.into_iter().map(|f| (key.gesture, f)));
        } else {
            for f in feats {
                sums[key.gesture][0] += f[0];
                sums[key.gesture][1] += f[1];
                counts[key.gesture] += 1;
            }
        }
    }
    if test.is_empty() || counts.contains(&0) {
        return Err(Error::Eval("dataset lacks trials 1-4 or 6 for some class".into()));
    }
    let centroids: Vec<[f64; 2]> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| [s[0] / n as f64, s[1] / n as f64])
        .collect();
    let correct = test
        .iter()
        .filter(|(g, f)| {
            let best = (0..N_CLASSES)
                .min_by(|&a, &b| {
                    let da = (f[0] - centroids[a][0]).powi(2) + (f[1] - centroids[a][1]).powi(2);
                    let db = (f[0] - centroids[b][0]).powi(2) + (f[1] - centroids[b][1]).powi(2);
                    da.total_cmp(&db)
                })
                .unwrap();
            best == *g
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}
