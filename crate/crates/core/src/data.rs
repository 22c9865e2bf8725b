//! Datasets, synthetic trials, fold plans and accuracy statistics.
//!
//! # Dataset container
//!
//! Little-endian throughout:
//!
//! ```text
//! magic        8 bytes "OEEGDSET"
//! version      u32     1
//! n_classes    u32
//! channels     u32     C
//! len          u32     T, samples per channel
//! rate_hz      f64
//! n_trials     u32
//! subject_id   u32 length + UTF-8
//! provenance   u8      0 = file, 1 = synthetic; followed by seed u64
//! trial*       label u32, then C × T f32 samples, channel-major
//! ```

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_arg, Result};
use crate::nn::checkpoint::ByteReader;
use crate::rng::seeded;
use crate::signal::{TrialRecording, WelchConfig};
use crate::{Error, FormatError};

pub const DATASET_MAGIC: &[u8; 8] = b"OEEGDSET";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    File,
    Synthetic { seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub trials: Vec<TrialRecording>,
    pub n_classes: usize,
    pub channels: usize,
    pub len: usize,
    pub rate_hz: f64,
    pub subject_id: String,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.len == 0 || self.n_classes == 0 {
            return Err(Error::InvalidData(format!(
                "dataset needs C, T and n_classes >= 1 (got {}, {}, {})",
                self.channels, self.len, self.n_classes
            )));
        }
        for (i, t) in self.trials.iter().enumerate() {
            if t.channels != self.channels || t.len != self.len || t.rate_hz != self.rate_hz {
                return Err(Error::InvalidData(format!("trial {i} does not match the dataset shape")));
            }
            if t.samples.len() != t.channels * t.len {
                return Err(Error::InvalidData(format!("trial {i} has the wrong sample count")));
            }
            if t.label >= self.n_classes {
                return Err(Error::InvalidData(format!(
                    "trial {i} label {} out of range for {} classes",
                    t.label, self.n_classes
                )));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.trials.iter().map(|t| t.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for t in &self.trials {
            counts[t.label] += 1;
        }
        counts
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.trials.len() * (4 + 4 * self.channels * self.len));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        for v in [self.n_classes, self.channels, self.len] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.rate_hz.to_le_bytes());
        out.extend_from_slice(&(self.trials.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.subject_id.len() as u32).to_le_bytes());
        out.extend_from_slice(self.subject_id.as_bytes());
        match self.provenance {
            Provenance::File => {
                out.push(0);
                out.extend_from_slice(&0u64.to_le_bytes());
            }
            Provenance::Synthetic { seed } => {
                out.push(1);
                out.extend_from_slice(&seed.to_le_bytes());
            }
        }
        for t in &self.trials {
            out.extend_from_slice(&(t.label as u32).to_le_bytes());
            for s in &t.samples {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8)?;
        if magic != DATASET_MAGIC {
            return Err(FormatError::BadMagic {
                expected: String::from_utf8_lossy(DATASET_MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            }
            .into());
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(FormatError::UnsupportedVersion(version).into());
        }
        let field = |r: &mut ByteReader<'_>, name: &str| -> Result<usize> {
            let at = r.pos as u64;
            let v = r.u32()?;
            if v == 0 {
                return Err(FormatError::Validation {
                    offset: at,
                    message: format!("{name} must be positive"),
                }
                .into());
            }
            Ok(v as usize)
        };
        let n_classes = field(&mut r, "n_classes")?;
        let channels = field(&mut r, "channel count")?;
        let len = field(&mut r, "samples per channel")?;
        let rate_at = r.pos as u64;
        let rate_hz = r.f64()?;
        if !(rate_hz > 0.0 && rate_hz.is_finite()) {
            return Err(FormatError::Validation {
                offset: rate_at,
                message: format!("sampling rate {rate_hz} is not positive"),
            }
            .into());
        }
        let n_trials = r.u32()? as usize;
        let subject_id = r.string_u32()?;
        let prov_at = r.pos as u64;
        let provenance = match (r.u8()?, r.u64()?) {
            (0, _) => Provenance::File,
            (1, seed) => Provenance::Synthetic { seed },
            (k, _) => {
                return Err(FormatError::Validation {
                    offset: prov_at,
                    message: format!("unknown provenance tag {k}"),
                }
                .into())
            }
        };
        let per_trial = channels
            .checked_mul(len)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| FormatError::Validation {
                offset: 16,
                message: "trial size overflows".into(),
            })?;
        let mut trials = Vec::with_capacity(n_trials.min(1 << 16));
        for i in 0..n_trials {
            let label = r.u32()?;
            if label as usize >= n_classes {
                return Err(FormatError::LabelOutOfRange {
                    trial: i,
                    label,
                    n_classes: n_classes as u32,
                }
                .into());
            }
            let raw = r.take(per_trial * 4)?;
            let samples = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            trials.push(TrialRecording {
                samples,
                channels,
                len,
                rate_hz,
                label: label as usize,
                subject_id: subject_id.clone(),
            });
        }
        if r.pos != bytes.len() {
            return Err(FormatError::Validation {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            }
            .into());
        }
        Ok(Dataset {
            trials,
            n_classes,
            channels,
            len,
            rate_hz,
            subject_id,
            provenance,
        })
    }

    /// Text manifest written next to the binary container.
    pub fn manifest(&self) -> serde_json::Value {
        serde_json::json!({
            "format": "oeeg-dataset",
            "version": DATASET_VERSION,
            "subject_id": self.subject_id,
            "n_classes": self.n_classes,
            "channels": self.channels,
            "samples_per_channel": self.len,
            "rate_hz": self.rate_hz,
            "n_trials": self.trials.len(),
            "class_counts": self.class_counts(),
            "provenance": self.provenance,
            "sample_encoding": "f32-le, channel-major",
        })
    }
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    std::fs::write(path, dataset.to_bytes())?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&std::fs::read(path)?)
}

/// One band-limited oscillation: `tones` randomly phased sinusoids with
/// frequencies drawn uniformly from `center ± bandwidth/2`. Their total
/// power equals that of a single sinusoid of `amplitude`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillationComponent {
    pub center_hz: f64,
    pub bandwidth_hz: f64,
    pub amplitude: f64,
    pub channels: Vec<usize>,
    #[serde(default = "one")]
    pub tones: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    pub components: Vec<OscillationComponent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_classes: usize,
    pub trials_per_class: usize,
    pub channels: usize,
    pub len: usize,
    pub rate_hz: f64,
    pub noise_sigma: f64,
    pub classes: Vec<ClassSignature>,
    /// Components present in every trial regardless of class.
    pub background: Vec<OscillationComponent>,
    pub subject_id: String,
}

impl SynthSpec {
    /// Class `c` carries a narrow oscillation at `6 + 4.5·c` Hz on a group
    /// of half the channels starting at `c·C / n_classes`; every trial also
    /// carries a 10 Hz background rhythm on all channels.
    pub fn with_default_signatures(
        n_classes: usize,
        trials_per_class: usize,
        channels: usize,
        len: usize,
        rate_hz: f64,
    ) -> Self {
        let group = channels.div_ceil(2).max(1);
        let classes = (0..n_classes)
            .map(|c| {
                let start = c * channels / n_classes;
                ClassSignature {
                    components: vec![OscillationComponent {
                        center_hz: 6.0 + 4.5 * c as f64,
                        bandwidth_hz: 1.0,
                        amplitude: 1.0,
                        channels: (0..group).map(|i| (start + i) % channels.max(1)).collect(),
                        tones: 1,
                    }],
                }
            })
            .collect();
        SynthSpec {
            n_classes,
            trials_per_class,
            channels,
            len,
            rate_hz,
            noise_sigma: 1.0,
            classes,
            background: vec![OscillationComponent {
                center_hz: 10.0,
                bandwidth_hz: 2.0,
                amplitude: 1.0,
                channels: (0..channels).collect(),
                tones: 1,
            }],
            subject_id: "synthetic".into(),
        }
    }

    /// 4 classes × 20 trials, C = 8, T = 2000 at 1 kHz.
    pub fn desk() -> Self {
        Self::with_default_signatures(4, 20, 8, 2000, 1000.0)
    }

    /// 13 classes × 35 trials, C = 30, T = 10000 at 1 kHz.
    pub fn paper_shape() -> Self {
        Self::with_default_signatures(13, 35, 30, 10_000, 1000.0)
    }

    /// Harder task where classes differ only in the power of broad bands
    /// (many-tone components) over a strong noise floor, so per-bin
    /// spectra are noisy and band averages carry the signal.
    pub fn band_structured(n_classes: usize, trials_per_class: usize, channels: usize, len: usize) -> Self {
        let mut spec = Self::with_default_signatures(n_classes, trials_per_class, channels, len, 1000.0);
        for (c, class) in spec.classes.iter_mut().enumerate() {
            for comp in &mut class.components {
                comp.center_hz = 12.0 + 10.0 * c as f64;
                comp.bandwidth_hz = 8.0;
                comp.tones = 16;
                comp.amplitude = 0.6;
            }
        }
        spec.noise_sigma = 3.0;
        spec.subject_id = "band-structured".into();
        spec
    }

    /// [`SynthSpec::band_structured`] at desk dimensions.
    pub fn band_structured_desk() -> Self {
        Self::band_structured(4, 20, 8, 2000)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.trials_per_class == 0 || self.channels == 0 || self.len == 0 {
            return Err(invalid_arg!(
                "classes, trials per class, channels and length must all be positive"
            ));
        }
        if !(self.rate_hz > 0.0 && self.rate_hz.is_finite()) {
            return Err(invalid_arg!("sampling rate must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(invalid_arg!("noise sigma must be non-negative"));
        }
        if self.classes.len() != self.n_classes {
            return Err(invalid_arg!(
                "{} class signatures for {} classes",
                self.classes.len(),
                self.n_classes
            ));
        }
        let band = WelchConfig::default();
        let hi = band.f_hi_hz.min(self.rate_hz / 2.0);
        for comp in self.classes.iter().flat_map(|c| &c.components).chain(&self.background) {
            if !(comp.center_hz > band.f_lo_hz && comp.center_hz < hi) {
                return Err(invalid_arg!(
                    "component center {} Hz outside ({}, {hi}) Hz",
                    comp.center_hz,
                    band.f_lo_hz
                ));
            }
            if !(comp.amplitude > 0.0) || !(comp.bandwidth_hz >= 0.0) || comp.tones == 0 {
                return Err(invalid_arg!("component amplitude, bandwidth and tone count must be positive"));
            }
            if let Some(&c) = comp.channels.iter().find(|&&c| c >= self.channels) {
                return Err(invalid_arg!("component channel {c} out of range"));
            }
        }
        Ok(())
    }
}

fn add_component<R: Rng + ?Sized>(
    samples: &mut [f64],
    len: usize,
    rate_hz: f64,
    comp: &OscillationComponent,
    rng: &mut R,
) {
    let half = comp.bandwidth_hz / 2.0;
    let amp = comp.amplitude / (comp.tones as f64).sqrt();
    for _ in 0..comp.tones {
        let f = if half > 0.0 {
            comp.center_hz + rng.random_range(-half..=half)
        } else {
            comp.center_hz
        };
        let w = 2.0 * std::f64::consts::PI * f / rate_hz;
        for &c in &comp.channels {
            let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
            let row = &mut samples[c * len..(c + 1) * len];
            for (n, x) in row.iter_mut().enumerate() {
                *x += amp * (w * n as f64 + phase).sin();
            }
        }
    }
}

/// Trials are ordered class by class; trial `j` of class `c` draws from its
/// own stream, so the dataset is a pure function of `(spec, seed)`.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_sigma).map_err(|e| invalid_arg!("noise: {e}"))?;
    let (c_n, len) = (spec.channels, spec.len);
    let mut trials = Vec::with_capacity(spec.n_classes * spec.trials_per_class);
    for (label, class) in spec.classes.iter().enumerate() {
        for rep in 0..spec.trials_per_class {
            let mut rng = seeded(seed, &[label as u64, rep as u64]);
            let mut x = vec![0.0f64; c_n * len];
            for comp in class.components.iter().chain(&spec.background) {
                add_component(&mut x, len, spec.rate_hz, comp, &mut rng);
            }
            if spec.noise_sigma > 0.0 {
                for v in &mut x {
                    *v += noise.sample(&mut rng);
                }
            }
            trials.push(TrialRecording {
                samples: x.into_iter().map(|v| v as f32).collect(),
                channels: c_n,
                len,
                rate_hz: spec.rate_hz,
                label,
                subject_id: spec.subject_id.clone(),
            });
        }
    }
    Ok(Dataset {
        trials,
        n_classes: spec.n_classes,
        channels: c_n,
        len,
        rate_hz: spec.rate_hz,
        subject_id: spec.subject_id.clone(),
        provenance: Provenance::Synthetic { seed },
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// Sorted trial indices of each validation fold.
    pub folds: Vec<Vec<usize>>,
    pub seed: u64,
    pub stratified: bool,
}

impl FoldPlan {
    pub fn n_trials(&self) -> usize {
        self.folds.iter().map(Vec::len).sum()
    }

    pub fn validation(&self, fold: usize) -> &[usize] {
        &self.folds[fold]
    }

    /// Every trial not in `fold`, ascending.
    pub fn training(&self, fold: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .folds
            .iter()
            .enumerate()
            .filter(|&(f, _)| f != fold)
            .flat_map(|(_, v)| v.iter().copied())
            .collect();
        out.sort_unstable();
        out
    }

    /// Fold index of each trial.
    pub fn assignment(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_trials()];
        for (f, idx) in self.folds.iter().enumerate() {
            for &i in idx {
                out[i] = f;
            }
        }
        out
    }

    pub fn to_csv(&self, labels: &[usize]) -> String {
        let mut out = String::from("trial,label,fold\n");
        for (i, f) in self.assignment().into_iter().enumerate() {
            out.push_str(&format!("{i},{},{f}\n", labels[i]));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        if lines.next() != Some("trial,label,fold") {
            return Err(Error::InvalidData("fold plan CSV is missing its header".into()));
        }
        let mut assign = Vec::new();
        for (ln, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::InvalidData(format!("fold plan line {}: bad integer {s:?}", ln + 2)))
            };
            if f.len() != 3 || parse(f[0])? != assign.len() {
                return Err(Error::InvalidData(format!("fold plan line {} is malformed", ln + 2)));
            }
            assign.push(parse(f[2])?);
        }
        let k = assign.iter().max().map_or(0, |m| m + 1);
        let mut folds = vec![Vec::new(); k];
        for (i, f) in assign.into_iter().enumerate() {
            folds[f].push(i);
        }
        Ok(FoldPlan {
            k,
            folds,
            seed: 0,
            stratified: false,
        })
    }
}

/// Seeded shuffle, then contiguous partition with fold sizes ⌈n/k⌉ for the
/// first `n mod k` folds and ⌊n/k⌋ for the rest.
pub fn kfold_split(n_trials: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || n_trials < k {
        return Err(invalid_arg!("k-fold needs k >= 2 and at least k trials (k = {k}, n = {n_trials})"));
    }
    let mut idx: Vec<usize> = (0..n_trials).collect();
    idx.shuffle(&mut seeded(seed, &[0xF01D]));
    let (base, extra) = (n_trials / k, n_trials % k);
    let mut folds = Vec::with_capacity(k);
    let mut at = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        let mut fold = idx[at..at + size].to_vec();
        fold.sort_unstable();
        folds.push(fold);
        at += size;
    }
    Ok(FoldPlan {
        k,
        folds,
        seed,
        stratified: false,
    })
}

/// Class-stratified variant: each class is shuffled separately and the
/// concatenated class lists are dealt round-robin, so fold sizes differ by
/// at most one and per-class counts per fold differ by at most one.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 || labels.len() < k {
        return Err(invalid_arg!("k-fold needs k >= 2 and at least k trials (k = {k}, n = {})", labels.len()));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = seeded(seed, &[0x57A7]);
    let mut order = Vec::with_capacity(labels.len());
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(&mut rng);
        order.extend(members);
    }
    let mut folds = vec![Vec::new(); k];
    for (p, i) in order.into_iter().enumerate() {
        folds[p % k].push(i);
    }
    folds.iter_mut().for_each(|f| f.sort_unstable());
    Ok(FoldPlan {
        k,
        folds,
        seed,
        stratified: true,
    })
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for a single
/// value).
pub fn accuracy_stats(per_fold: &[f64]) -> Result<(f64, f64)> {
    if per_fold.is_empty() {
        return Err(invalid_arg!("accuracy statistics need at least one value"));
    }
    Ok((mean(per_fold), sample_std(per_fold)))
}

/// Sample standard deviation of per-subject mean accuracies.
pub fn inter_subject_std(per_subject_means: &[f64]) -> Result<f64> {
    if per_subject_means.len() < 2 {
        return Err(invalid_arg!("inter-subject std needs at least two subjects"));
    }
    Ok(sample_std(per_subject_means))
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Per-subject accuracy summary for one method column.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRow {
    pub subject: String,
    /// `(mean, std)` per method, in column order.
    pub scores: Vec<(f64, f64)>,
}

/// Accuracy table: one row per subject with `mean,std` per method, then an
/// `Average` row and (for two or more subjects) an `Inter-subject std` row.
pub fn metrics_table_csv(methods: &[&str], rows: &[SubjectRow]) -> Result<String> {
    let mut out = String::from("subject");
    for m in methods {
        out.push_str(&format!(",{m}_mean,{m}_std"));
    }
    out.push('\n');
    for r in rows {
        if r.scores.len() != methods.len() {
            return Err(invalid_arg!("subject {} has {} scores for {} methods", r.subject, r.scores.len(), methods.len()));
        }
        out.push_str(&r.subject);
        for (m, s) in &r.scores {
            out.push_str(&format!(",{m},{s}"));
        }
        out.push('\n');
    }
    if rows.is_empty() {
        return Ok(out);
    }
    let column = |j: usize| rows.iter().map(|r| r.scores[j].0).collect::<Vec<f64>>();
    out.push_str("Average");
    for j in 0..methods.len() {
        out.push_str(&format!(",{},", mean(&column(j))));
    }
    out.push('\n');
    if rows.len() >= 2 {
        out.push_str("Inter-subject std");
        for j in 0..methods.len() {
            out.push_str(&format!(",{},", inter_subject_std(&column(j))?));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::welch_psd;

    fn tiny() -> SynthSpec {
        SynthSpec::with_default_signatures(3, 4, 2, 400, 1000.0)
    }

    #[test]
    fn kfold_sizes_and_partition() {
        let plan = kfold_split(455, 10, 1).unwrap();
        let mut sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [45, 45, 45, 45, 45, 46, 46, 46, 46, 46]);
        let mut all: Vec<usize> = plan.folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..455).collect::<Vec<_>>());
        assert!(kfold_split(5, 10, 0).is_err());
        assert!(kfold_split(5, 1, 0).is_err());
    }

    #[test]
    fn kfold_is_seeded() {
        assert_eq!(kfold_split(80, 10, 3).unwrap(), kfold_split(80, 10, 3).unwrap());
        let base = kfold_split(80, 10, 0).unwrap();
        assert!((1..=100).any(|s| kfold_split(80, 10, s).unwrap().folds != base.folds));
    }

    #[test]
    fn stratified_folds_balance_classes() {
        let labels: Vec<usize> = (0..455).map(|i| i / 35).collect();
        let plan = stratified_kfold(&labels, 10, 4).unwrap();
        let sizes: Vec<usize> = plan.folds.iter().map(Vec::len).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for fold in &plan.folds {
            for c in 0..13 {
                let n = fold.iter().filter(|&&i| labels[i] == c).count();
                assert!((3..=4).contains(&n), "class {c} has {n} trials in a fold");
            }
        }
        assert_eq!(plan.assignment().len(), 455);
        for f in 0..10 {
            let train = plan.training(f);
            assert_eq!(train.len() + plan.validation(f).len(), 455);
            assert!(plan.validation(f).iter().all(|i| train.binary_search(i).is_err()));
        }
    }

    #[test]
    fn fold_csv_round_trip() {
        let labels = vec![0, 1, 0, 1, 2, 2, 0];
        let plan = stratified_kfold(&labels, 3, 9).unwrap();
        let back = FoldPlan::from_csv(&plan.to_csv(&labels)).unwrap();
        assert_eq!(back.folds, plan.folds);
    }

    #[test]
    fn stats_anchors() {
        assert_eq!(accuracy_stats(&[1.0, 0.0, 1.0, 0.0]).unwrap().0, 0.5);
        assert_eq!(accuracy_stats(&[0.7; 5]).unwrap().1, 0.0);
        let (m, s) = accuracy_stats(&[0.9, 1.0]).unwrap();
        assert!((m - 0.95).abs() < 1e-15);
        assert!((s - 0.005f64.sqrt()).abs() < 1e-15);
        assert!((s - 0.0707).abs() < 1e-4);
        assert!(accuracy_stats(&[]).is_err());
        assert_eq!(inter_subject_std(&[0.9, 0.9, 0.9]).unwrap(), 0.0);
        assert!((inter_subject_std(&[0.8, 1.0]).unwrap() - 0.02f64.sqrt()).abs() < 1e-15);
        assert!((inter_subject_std(&[1.0, 0.8]).unwrap() - 0.1414).abs() < 1e-4);
        assert!(inter_subject_std(&[0.8]).is_err());
    }

    #[test]
    fn synth_counts_and_determinism() {
        let d = synth_dataset(&tiny(), 7).unwrap();
        assert_eq!(d.trials.len(), 12);
        assert_eq!(d.class_counts(), vec![4, 4, 4]);
        assert_eq!(d, synth_dataset(&tiny(), 7).unwrap());
        assert_ne!(d, synth_dataset(&tiny(), 8).unwrap());
        d.validate().unwrap();
        let mut bad = tiny();
        bad.n_classes = 0;
        bad.classes.clear();
        assert!(synth_dataset(&bad, 0).is_err());
        let mut bad = tiny();
        bad.classes[0].components[0].center_hz = 90.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn noiseless_component_peaks_at_its_bin() {
        let spec = SynthSpec {
            n_classes: 1,
            trials_per_class: 2,
            channels: 3,
            len: 2000,
            rate_hz: 1000.0,
            noise_sigma: 0.0,
            classes: vec![ClassSignature {
                components: vec![OscillationComponent {
                    center_hz: 10.0,
                    bandwidth_hz: 0.0,
                    amplitude: 1.0,
                    channels: vec![0, 2],
                    tones: 1,
                }],
            }],
            background: vec![],
            subject_id: "s".into(),
        };
        let d = synth_dataset(&spec, 1).unwrap();
        for t in &d.trials {
            let psd = welch_psd(t, &WelchConfig::default()).unwrap();
            for c in [0, 2] {
                let row = psd.values.row(c);
                let arg = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
                assert_eq!(psd.freqs_hz[arg], 10.0);
            }
            assert!(psd.values.row(1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn container_round_trip_and_errors() {
        let d = synth_dataset(&tiny(), 2).unwrap();
        let bytes = d.to_bytes();
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), d);
        for cut in [4, 30, bytes.len() - 3] {
            assert!(matches!(
                Dataset::from_bytes(&bytes[..cut]),
                Err(Error::Format(FormatError::Truncated { .. }))
            ));
        }
        let mut zero_c = bytes.clone();
        zero_c[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&zero_c),
            Err(Error::Format(FormatError::Validation { offset: 16, .. }))
        ));
        let header = 8 + 4 + 12 + 8 + 4 + 4 + d.subject_id.len() + 9;
        let mut bad_label = bytes.clone();
        bad_label[header..header + 4].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(
            Dataset::from_bytes(&bad_label),
            Err(Error::Format(FormatError::LabelOutOfRange { label: 9, .. }))
        ));
        let mut magic = bytes;
        magic[..4].copy_from_slice(b"EDF+");
        assert!(matches!(Dataset::from_bytes(&magic), Err(Error::Format(FormatError::BadMagic { .. }))));
    }

    #[test]
    fn metrics_table_layout() {
        let rows = vec![
            SubjectRow { subject: "1".into(), scores: vec![(0.9, 0.1), (0.8, 0.0)] },
            SubjectRow { subject: "2".into(), scores: vec![(1.0, 0.0), (0.8, 0.1)] },
        ];
        let csv = metrics_table_csv(&["OESCN", "OESCN_a1"], &rows).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "subject,OESCN_mean,OESCN_std,OESCN_a1_mean,OESCN_a1_std");
        assert_eq!(lines[1], "1,0.9,0.1,0.8,0");
        assert!(lines[3].starts_with("Average,0.95,"));
        assert!(lines[4].starts_with("Inter-subject std,"));
        assert_eq!(lines.len(), 5);
    }
}
