//! Synthetic multichannel trials with class-dependent spectral structure,
//! plus the binary trial-set format and per-channel standardization.
//!
//! File layout: one JSON header line, then (optionally) little-endian i32
//! labels, then little-endian f32 samples, trial-major then channel-major.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::montage::bundled;
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("trial-set I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("trial-set header: {0}")]
    Header(String),
    #[error("unsupported format version {0} (expected {FORMAT_VERSION})")]
    Version(u32),
    #[error("payload size mismatch: expected {expected} bytes, got {got}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("band at {freq_hz} Hz violates Nyquist (rate {rate_hz} Hz)")]
    Nyquist { freq_hz: f64, rate_hz: f64 },
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// One sinusoidal component of a class recipe.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BandComponent {
    pub freq_hz: f64,
    pub amplitude: f64,
    /// Channel indices (into the montage) carrying this component.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassRecipe {
    pub bands: Vec<BandComponent>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub trials_per_class: usize,
    /// Bundled montage key ("14", "16", "22", "64").
    pub montage: String,
    pub rate_hz: f64,
    pub duration_s: f64,
    pub classes: Vec<ClassRecipe>,
    pub noise_std: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// The benchmark set: 2 classes x 200 trials on the 14-channel consumer
    /// montage at 128 Hz for 2 s. Both classes drive the same six central
    /// channels at the same amplitude and differ only in frequency (10 Hz vs
    /// 22 Hz), so discrimination is purely spectral — channel variances are
    /// identical between classes by construction.
    pub fn default_benchmark() -> Self {
        let central = vec![4, 5, 6, 7, 8, 9]; // T7, P7, O1, O2, P8, T8
        SyntheticSpec {
            trials_per_class: 200,
            montage: "14".into(),
            rate_hz: 128.0,
            duration_s: 2.0,
            classes: vec![
                ClassRecipe {
                    bands: vec![BandComponent {
                        freq_hz: 10.0,
                        amplitude: 1.5,
                        channels: central.clone(),
                    }],
                },
                ClassRecipe {
                    bands: vec![BandComponent {
                        freq_hz: 22.0,
                        amplitude: 1.5,
                        channels: central,
                    }],
                },
            ],
            noise_std: 0.5,
            seed: 7,
        }
    }

    pub fn n_samples(&self) -> usize {
        (self.rate_hz * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<usize, DataError> {
        let m = bundled::by_name(&self.montage)
            .ok_or_else(|| DataError::Spec(format!("unknown montage '{}'", self.montage)))?;
        if self.trials_per_class == 0 || self.classes.is_empty() {
            return Err(DataError::Spec("need at least one class and one trial".into()));
        }
        if self.rate_hz <= 0.0 || self.duration_s <= 0.0 {
            return Err(DataError::Spec("rate and duration must be positive".into()));
        }
        let t = self.rate_hz * self.duration_s;
        if (t - t.round()).abs() > 1e-9 || t.round() < 1.0 {
            return Err(DataError::Spec(format!(
                "duration*rate = {t} is not a positive integer"
            )));
        }
        if self.noise_std < 0.0 {
            return Err(DataError::Spec("noise_std must be nonnegative".into()));
        }
        for recipe in &self.classes {
            for band in &recipe.bands {
                if band.freq_hz >= self.rate_hz / 2.0 {
                    return Err(DataError::Nyquist {
                        freq_hz: band.freq_hz,
                        rate_hz: self.rate_hz,
                    });
                }
                for &c in &band.channels {
                    if c >= m.len() {
                        return Err(DataError::Spec(format!(
                            "band channel {c} out of range for montage '{}'",
                            self.montage
                        )));
                    }
                }
            }
        }
        Ok(m.len())
    }
}

/// A set of trials with optional labels.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialSet {
    pub data: Tensor, // [N, C, T]
    pub labels: Option<Vec<i32>>,
    pub montage: String,
    pub rate_hz: f64,
}

impl TrialSet {
    pub fn n_trials(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn n_channels(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn n_samples(&self) -> usize {
        self.data.shape()[2]
    }

    /// One trial as a [1, C, T] tensor.
    pub fn trial(&self, i: usize) -> Tensor {
        let (c, t) = (self.n_channels(), self.n_samples());
        Tensor::new(
            &[1, c, t],
            self.data.data()[i * c * t..(i + 1) * c * t].to_vec(),
        )
    }

    /// A contiguous [N', C, T] slice of trials.
    pub fn subset(&self, indices: &[usize]) -> TrialSet {
        let (c, t) = (self.n_channels(), self.n_samples());
        let mut data = Vec::with_capacity(indices.len() * c * t);
        for &i in indices {
            data.extend_from_slice(&self.data.data()[i * c * t..(i + 1) * c * t]);
        }
        TrialSet {
            data: Tensor::new(&[indices.len(), c, t], data),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            montage: self.montage.clone(),
            rate_hz: self.rate_hz,
        }
    }
}

/// Generate a trial set. Trials are class-interleaved (0, 1, ..., 0, 1, ...)
/// so contiguous splits stay balanced; every trial derives its own RNG from
/// (seed, trial index).
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<TrialSet, DataError> {
    let c = spec.validate()?;
    let t = spec.n_samples();
    let k = spec.classes.len();
    let n = spec.trials_per_class * k;
    let mut data = vec![0.0f64; n * c * t];
    let mut labels = Vec::with_capacity(n);
    for trial in 0..n {
        let class = trial % k;
        labels.push(class as i32);
        let mut rng =
            ChaCha8Rng::seed_from_u64(spec.seed ^ (trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let base = trial * c * t;
        for band in &spec.classes[class].bands {
            for &ch in &band.channels {
                let phase = rng.gen_range(0.0..2.0 * PI);
                let w = 2.0 * PI * band.freq_hz / spec.rate_hz;
                for ti in 0..t {
                    data[base + ch * t + ti] += band.amplitude * (w * ti as f64 + phase).sin();
                }
            }
        }
        if spec.noise_std > 0.0 {
            let noise = Normal::new(0.0, spec.noise_std).unwrap();
            for v in &mut data[base..base + c * t] {
                *v += noise.sample(&mut rng);
            }
        }
    }
    // samples live on the f32 grid, matching the file format exactly
    let mut tensor = Tensor::new(&[n, c, t], data);
    tensor.round_to_f32();
    Ok(TrialSet {
        data: tensor,
        labels: Some(labels),
        montage: spec.montage.clone(),
        rate_hz: spec.rate_hz,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileHeader {
    format_version: u32,
    montage: String,
    rate_hz: f64,
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    has_labels: bool,
}

pub fn write_trials(set: &TrialSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let header = FileHeader {
        format_version: FORMAT_VERSION,
        montage: set.montage.clone(),
        rate_hz: set.rate_hz,
        n_trials: set.n_trials(),
        n_channels: set.n_channels(),
        n_samples: set.n_samples(),
        has_labels: set.labels.is_some(),
    };
    if let Some(l) = &set.labels {
        if l.len() != set.n_trials() {
            return Err(DataError::Header(format!(
                "{} labels for {} trials",
                l.len(),
                set.n_trials()
            )));
        }
    }
    let mut f = std::fs::File::create(path)?;
    let mut line = serde_json::to_string(&header).map_err(|e| DataError::Header(e.to_string()))?;
    line.push('\n');
    f.write_all(line.as_bytes())?;
    if let Some(labels) = &set.labels {
        for l in labels {
            f.write_all(&l.to_le_bytes())?;
        }
    }
    for v in set.data.data() {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    Ok(())
}

pub fn read_trials(path: impl AsRef<Path>) -> Result<TrialSet, DataError> {
    let mut f = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| DataError::Header("missing header line".into()))?;
    let header: FileHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| DataError::Header(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(DataError::Version(header.format_version));
    }
    let n_vals = header.n_trials * header.n_channels * header.n_samples;
    let label_bytes = if header.has_labels {
        header.n_trials * 4
    } else {
        0
    };
    let expected = label_bytes + n_vals * 4;
    let payload = &bytes[nl + 1..];
    if payload.len() != expected {
        return Err(DataError::SizeMismatch {
            expected,
            got: payload.len(),
        });
    }
    let labels = header.has_labels.then(|| {
        payload[..label_bytes]
            .chunks_exact(4)
            .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect()
    });
    let data: Vec<f64> = payload[label_bytes..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok(TrialSet {
        data: Tensor::new(&[header.n_trials, header.n_channels, header.n_samples], data),
        labels,
        montage: header.montage,
        rate_hz: header.rate_hz,
    })
}

/// Per-channel affine scaler fitted by `standardize`.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// Channels whose std hit the 1e-8 floor.
    pub flagged: Vec<bool>,
}

impl Standardizer {
    pub fn fit(set: &TrialSet) -> Standardizer {
        assert!(set.n_trials() > 0, "cannot standardize an empty trial set");
        let (n, c, t) = (set.n_trials(), set.n_channels(), set.n_samples());
        let count = (n * t) as f64;
        let mut mean = vec![0.0; c];
        let mut scale = vec![0.0; c];
        let mut flagged = vec![false; c];
        for ch in 0..c {
            let mut acc = 0.0;
            for tr in 0..n {
                for ti in 0..t {
                    acc += set.data.at(&[tr, ch, ti]);
                }
            }
            mean[ch] = acc / count;
            let mut var = 0.0;
            for tr in 0..n {
                for ti in 0..t {
                    let d = set.data.at(&[tr, ch, ti]) - mean[ch];
                    var += d * d;
                }
            }
            let std = (var / count).sqrt();
            if std < 1e-8 {
                flagged[ch] = true;
                scale[ch] = 1e-8;
            } else {
                scale[ch] = std;
            }
        }
        Standardizer {
            mean,
            scale,
            flagged,
        }
    }

    pub fn apply(&self, set: &TrialSet) -> TrialSet {
        let (n, c, t) = (set.n_trials(), set.n_channels(), set.n_samples());
        assert_eq!(c, self.mean.len());
        let mut data = set.data.data().to_vec();
        for tr in 0..n {
            for ch in 0..c {
                for ti in 0..t {
                    let i = (tr * c + ch) * t + ti;
                    data[i] = (data[i] - self.mean[ch]) / self.scale[ch];
                }
            }
        }
        TrialSet {
            data: Tensor::new(&[n, c, t], data),
            ..set.clone()
        }
    }

    pub fn inverse(&self, set: &TrialSet) -> TrialSet {
        let (n, c, t) = (set.n_trials(), set.n_channels(), set.n_samples());
        assert_eq!(c, self.mean.len());
        let mut data = set.data.data().to_vec();
        for tr in 0..n {
            for ch in 0..c {
                for ti in 0..t {
                    let i = (tr * c + ch) * t + ti;
                    data[i] = data[i] * self.scale[ch] + self.mean[ch];
                }
            }
        }
        TrialSet {
            data: Tensor::new(&[n, c, t], data),
            ..set.clone()
        }
    }
}

/// Z-score every channel using statistics over all trials and time steps.
pub fn standardize(set: &TrialSet) -> (TrialSet, Standardizer) {
    let s = Standardizer::fit(set);
    (s.apply(set), s)
}

/// Power of one DFT bin of a single channel (direct summation).
fn bin_power(row: &[f64], freq_hz: f64, rate_hz: f64) -> f64 {
    let t = row.len();
    let bin = (freq_hz * t as f64 / rate_hz).round();
    let w = 2.0 * PI * bin / t as f64;
    let (mut re, mut im) = (0.0, 0.0);
    for (ti, v) in row.iter().enumerate() {
        let th = w * ti as f64;
        re += v * th.cos();
        im -= v * th.sin();
    }
    re * re + im * im
}

/// One feature per class recipe: total band power of that recipe's components
/// on their active channels.
pub fn band_power_features(set: &TrialSet, spec: &SyntheticSpec) -> Tensor {
    let (n, c, t) = (set.n_trials(), set.n_channels(), set.n_samples());
    let k = spec.classes.len();
    let mut out = Tensor::zeros(&[n, k]);
    for tr in 0..n {
        for (ki, recipe) in spec.classes.iter().enumerate() {
            let mut acc = 0.0;
            for band in &recipe.bands {
                for &ch in &band.channels {
                    let row = &set.data.data()[(tr * c + ch) * t..(tr * c + ch + 1) * t];
                    acc += bin_power(row, band.freq_hz, spec.rate_hz);
                }
            }
            out.data_mut()[tr * k + ki] = acc;
        }
    }
    out
}

/// Nearest-centroid classifier on band-power features: a ceiling check for
/// how separable the generated classes are. Returns held-out accuracy with
/// the first `train_frac` of trials used for centroids.
pub fn band_power_oracle_accuracy(set: &TrialSet, spec: &SyntheticSpec, train_frac: f64) -> f64 {
    let labels = set.labels.as_ref().expect("oracle needs labels");
    let feats = band_power_features(set, spec);
    let n = set.n_trials();
    let k = spec.classes.len();
    let split = ((n as f64) * train_frac).round() as usize;
    assert!(split >= k && split < n, "bad oracle split");
    let mut centroids = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    for tr in 0..split {
        let y = labels[tr] as usize;
        counts[y] += 1;
        for f in 0..k {
            centroids[y][f] += feats.at(&[tr, f]);
        }
    }
    for (cen, &cnt) in centroids.iter_mut().zip(&counts) {
        assert!(cnt > 0, "oracle training split misses a class");
        for v in cen.iter_mut() {
            *v /= cnt as f64;
        }
    }
    let mut correct = 0usize;
    for tr in split..n {
        let mut best = (f64::INFINITY, 0usize);
        for (y, cen) in centroids.iter().enumerate() {
            let d: f64 = (0..k)
                .map(|f| (feats.at(&[tr, f]) - cen[f]).powi(2))
                .sum();
            if d < best.0 {
                best = (d, y);
            }
        }
        if best.1 == labels[tr] as usize {
            correct += 1;
        }
    }
    correct as f64 / (n - split) as f64
}
