//! Segmentation of trials into fixed-length windows and the leave-one-subject-out
//! fold plans with their chronological and adaptation splits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetManifest, Trial, TrialKey, N_CLASSES, TRIALS_PER_GESTURE};
use crate::error::{Error, Result};

/// 250 ms at 4 kHz.
pub const WINDOW_LEN: usize = 1000;
/// 125 ms at 4 kHz.
pub const WINDOW_STRIDE: usize = 500;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Hard(usize),
    Soft(Vec<f32>),
}

impl Label {
    /// The label as a probability vector over `n_classes`.
    pub fn to_dense(&self, n_classes: usize) -> Vec<f32> {
        match self {
            Label::Hard(c) => {
                let mut v = vec![0.0; n_classes];
                v[*c] = 1.0;
                v
            }
            Label::Soft(v) => v.clone(),
        }
    }

    pub fn hard(&self) -> Option<usize> {
        match self {
            Label::Hard(c) => Some(*c),
            Label::Soft(_) => None,
        }
    }

    /// Class with the largest mass (ties resolve to the lowest index).
    pub fn argmax(&self) -> usize {
        match self {
            Label::Hard(c) => *c,
            Label::Soft(v) => v
                .iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
                .0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowProvenance {
    pub subject: u32,
    pub gesture: usize,
    pub trial_index: u32,
    pub start_offset: usize,
}

/// A `T x C` slice of a trial with its label.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub samples: Vec<f32>,
    pub n_samples: usize,
    pub n_channels: usize,
    pub label: Label,
    pub provenance: WindowProvenance,
    pub is_augmented: bool,
}

impl Window {
    pub fn channel(&self, c: usize) -> impl Iterator<Item = f32> + '_ {
        self.samples.iter().skip(c).step_by(self.n_channels).copied()
    }
}

/// Number of windows `segment_trial` produces.
pub fn window_count(n_samples: usize, window_len: usize, stride: usize) -> usize {
    if n_samples < window_len || stride == 0 {
        0
    } else {
        (n_samples - window_len) / stride + 1
    }
}

/// Cuts a trial into windows at offsets `0, stride, 2*stride, ...`; a trailing
/// partial window is dropped.
pub fn segment_trial(trial: &Trial, window_len: usize, stride: usize) -> Result<Vec<Window>> {
    assert!(stride >= 1, "stride must be positive");
    if trial.n_samples < window_len || window_len == 0 {
        return Err(Error::InsufficientSamples {
            needed: window_len,
            available: trial.n_samples,
        });
    }
    let c = trial.n_channels;
    Ok((0..window_count(trial.n_samples, window_len, stride))
        .map(|i| {
            let start = i * stride;
            Window {
                samples: trial.samples[start * c..(start + window_len) * c].to_vec(),
                n_samples: window_len,
                n_channels: c,
                label: Label::Hard(trial.gesture),
                provenance: WindowProvenance {
                    subject: trial.subject_id,
                    gesture: trial.gesture,
                    trial_index: trial.trial_index,
                    start_offset: start,
                },
                is_augmented: false,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    MsTrain,
    MsVal,
    MsTest,
    AdaptCalib,
    AdaptVal,
    AdaptTest,
}

impl Role {
    pub const ALL: [Role; 6] = [
        Role::MsTrain,
        Role::MsVal,
        Role::MsTest,
        Role::AdaptCalib,
        Role::AdaptVal,
        Role::AdaptTest,
    ];

    pub fn is_adaptation(self) -> bool {
        matches!(self, Role::AdaptCalib | Role::AdaptVal | Role::AdaptTest)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::MsTrain => "ms_train",
            Role::MsVal => "ms_val",
            Role::MsTest => "ms_test",
            Role::AdaptCalib => "adapt_calib",
            Role::AdaptVal => "adapt_val",
            Role::AdaptTest => "adapt_test",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown role {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiSubjectSplit {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptationSplit {
    pub calib: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
}

/// One LOSO fold: the held-out subject, the source cohort, and the trial
/// indices assigned to each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub fold_index: usize,
    pub held_out_subject: u32,
    pub source_subjects: Vec<u32>,
    pub multi_subject_split: MultiSubjectSplit,
    pub adaptation_split: AdaptationSplit,
}

impl FoldPlan {
    pub fn role_trials(&self, role: Role) -> &[u32] {
        match role {
            Role::MsTrain => &self.multi_subject_split.train,
            Role::MsVal => &self.multi_subject_split.val,
            Role::MsTest => &self.multi_subject_split.test,
            Role::AdaptCalib => &self.adaptation_split.calib,
            Role::AdaptVal => &self.adaptation_split.val,
            Role::AdaptTest => &self.adaptation_split.test,
        }
    }

    pub fn role_subjects(&self, role: Role) -> Vec<u32> {
        if role.is_adaptation() {
            vec![self.held_out_subject]
        } else {
            self.source_subjects.clone()
        }
    }

    /// Every (subject, gesture, trial) assigned to `role`.
    pub fn role_keys(&self, role: Role) -> Vec<TrialKey> {
        let mut keys = Vec::new();
        for subject in self.role_subjects(role) {
            for gesture in 0..N_CLASSES {
                for &trial in self.role_trials(role) {
                    keys.push(TrialKey { subject, gesture, trial });
                }
            }
        }
        keys
    }

    /// Pairwise disjointness of (subject, trial) sets between roles of the same
    /// protocol, and exclusion of the held-out subject from multi-subject roles.
    pub fn check_leakage(&self) -> Result<()> {
        if self.source_subjects.contains(&self.held_out_subject) {
            return Err(Error::Leakage(format!(
                "fold {}: held-out subject {} is also a source subject",
                self.fold_index, self.held_out_subject
            )));
        }
        let sets: BTreeMap<Role, BTreeSet<(u32, u32)>> = Role::ALL
            .into_iter()
            .map(|r| {
                let set = self.role_keys(r).into_iter().map(|k| (k.subject, k.trial)).collect();
                (r, set)
            })
            .collect();
        for a in Role::ALL {
            for b in Role::ALL {
                if a < b && a.is_adaptation() == b.is_adaptation() && !sets[&a].is_disjoint(&sets[&b]) {
                    return Err(Error::Leakage(format!(
                        "fold {}: roles {a} and {b} share trials",
                        self.fold_index
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One fold per subject, in manifest order.
pub fn plan_folds(manifest: &DatasetManifest) -> Result<Vec<FoldPlan>> {
    if manifest.subjects.len() < 2 {
        return Err(Error::FoldPlan(format!(
            "need at least 2 subjects, manifest lists {}",
            manifest.subjects.len()
        )));
    }
    for &s in &manifest.subjects {
        for g in 0..N_CLASSES {
            let n = manifest.trial_count(s, g);
            if n != TRIALS_PER_GESTURE as usize {
                return Err(Error::FoldPlan(format!(
                    "subject {s}, gesture {}: {n} trials, need {TRIALS_PER_GESTURE}",
                    manifest.gestures.get(g).map_or("?", String::as_str)
                )));
            }
        }
    }
    let folds = manifest
        .subjects
        .iter()
        .enumerate()
        .map(|(i, &held)| FoldPlan {
            fold_index: i,
            held_out_subject: held,
            source_subjects: manifest.subjects.iter().copied().filter(|&s| s != held).collect(),
            multi_subject_split: MultiSubjectSplit {
                train: vec![1, 2, 3, 4],
                val: vec![5],
                test: vec![6],
            },
            adaptation_split: AdaptationSplit {
                calib: vec![1],
                val: vec![2],
                test: vec![3, 4, 5, 6],
            },
        })
        .collect::<Vec<_>>();
    for f in &folds {
        f.check_leakage()?;
    }
    Ok(folds)
}

/// Windows of every trial assigned to `role`, in (subject, gesture, trial, offset) order.
pub fn materialize_split(
    fold: &FoldPlan,
    role: Role,
    ds: &Dataset,
    window_len: usize,
    stride: usize,
) -> Result<Vec<Window>> {
    let keys = fold.role_keys(role);
    for k in &keys {
        if !ds.contains(*k) {
            return Err(Error::FoldPlan(format!(
                "fold {}: role {role} needs missing trial (subject {}, gesture {}, trial {})",
                fold.fold_index, k.subject, k.gesture, k.trial
            )));
        }
    }
    let per_trial: Vec<Vec<Window>> = keys
        .par_iter()
        .map(|k| ds.trial(*k).and_then(|t| segment_trial(&t, window_len, stride)))
        .collect::<Result<_>>()?;
    Ok(per_trial.into_iter().flatten().collect())
}

/// Audit form of a fold plan: role name to its (subject, gesture, trial) triples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAudit {
    pub fold: usize,
    pub held_out: u32,
    pub roles: BTreeMap<String, Vec<(u32, usize, u32)>>,
}

pub fn fold_audit(fold: &FoldPlan) -> FoldAudit {
    FoldAudit {
        fold: fold.fold_index,
        held_out: fold.held_out_subject,
        roles: Role::ALL
            .into_iter()
            .map(|r| {
                let keys = fold.role_keys(r).into_iter().map(|k| (k.subject, k.gesture, k.trial));
                (r.as_str().to_string(), keys.collect())
            })
            .collect(),
    }
}
