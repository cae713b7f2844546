//! Log mel-filterbank speech front-end.
//!
//! Raw audio is pre-emphasized, cut into overlapping Hamming-windowed frames,
//! mapped to a power spectrum, weighted by triangular mel filters and
//! log-compressed. Defaults follow the usual speech front-end setup:
//! pre-emphasis 0.97, 10 ms windows, 50% overlap, 40 filters, corpus
//! normalization to zero mean and unit variance per coefficient.
//!
//! All operations are pure functions of their inputs; identical input and
//! config produce bit-identical output.

pub mod io;

use ndarray::{Array1, Array2};
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Std components are clamped to this during normalization so degenerate
/// (constant) coefficients normalize to zero instead of dividing by zero.
pub const STD_EPSILON: f64 = 1e-8;

/// A mono audio clip.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample_rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(
                "audio samples must be finite (no NaN/Inf)".into(),
            ));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Filterbank front-end parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterbankConfig {
    /// Pre-emphasis filter coefficient.
    pub pre_emphasis: f64,
    /// Analysis window length in milliseconds.
    pub window_ms: f64,
    /// Fraction of the window shared by consecutive frames, in `[0, 1)`.
    pub overlap_ratio: f64,
    /// Number of triangular mel filters.
    pub n_filters: usize,
    /// FFT size; `None` selects the smallest power of two covering the window.
    pub fft_size: Option<usize>,
    /// Floor applied to filter energies before the log.
    pub log_floor: f64,
    /// Lowest filter edge frequency in Hz.
    pub f_min: f64,
    /// Highest filter edge frequency in Hz; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for FilterbankConfig {
    fn default() -> Self {
        Self {
            pre_emphasis: 0.97,
            window_ms: 10.0,
            overlap_ratio: 0.5,
            n_filters: 40,
            fft_size: None,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: None,
        }
    }
}

impl FilterbankConfig {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(Error::Config(format!(
                "pre_emphasis must be in [0, 1), got {}",
                self.pre_emphasis
            )));
        }
        if !(self.window_ms > 0.0) {
            return Err(Error::Config("window_ms must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_ratio) {
            return Err(Error::Config(format!(
                "overlap_ratio must be in [0, 1), got {}",
                self.overlap_ratio
            )));
        }
        if self.n_filters < 2 {
            return Err(Error::Config("n_filters must be at least 2".into()));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Config("log_floor must be positive".into()));
        }
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = self.f_max.unwrap_or(nyquist);
        if !(self.f_min >= 0.0 && self.f_min < f_max && f_max <= nyquist) {
            return Err(Error::Config(format!(
                "need 0 <= f_min < f_max <= Nyquist, got f_min={} f_max={} Nyquist={}",
                self.f_min, f_max, nyquist
            )));
        }
        let w = self.window_len(sample_rate);
        let fft = self.resolved_fft_size(sample_rate);
        if !fft.is_power_of_two() || fft < w {
            return Err(Error::Config(format!(
                "fft_size must be a power of two >= window length ({w}), got {fft}"
            )));
        }
        Ok(())
    }

    /// Window length in samples.
    pub fn window_len(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Hop length in samples.
    pub fn hop_len(&self, sample_rate: u32) -> usize {
        let w = self.window_len(sample_rate);
        ((w as f64) * (1.0 - self.overlap_ratio)).round().max(1.0) as usize
    }

    pub fn resolved_fft_size(&self, sample_rate: u32) -> usize {
        self.fft_size
            .unwrap_or_else(|| self.window_len(sample_rate).max(1).next_power_of_two())
    }

    pub fn resolved_f_max(&self, sample_rate: u32) -> f64 {
        self.f_max.unwrap_or(sample_rate as f64 / 2.0)
    }

    /// Hex digest identifying this config resolved against a sample rate.
    pub fn config_hash(&self, sample_rate: u32) -> String {
        let mut hasher = Sha256::new();
        hasher.update(sample_rate.to_le_bytes());
        for v in [
            self.pre_emphasis,
            self.window_ms,
            self.overlap_ratio,
            self.n_filters as f64,
            self.resolved_fft_size(sample_rate) as f64,
            self.log_floor,
            self.f_min,
            self.resolved_f_max(sample_rate),
        ] {
            hasher.update(v.to_le_bytes());
        }
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// T x n_filters matrix of log filterbank coefficients plus frame centers.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterbankFeatures {
    pub values: Array2<f64>,
    /// Frame center times in seconds.
    pub frame_times: Vec<f64>,
}

impl FilterbankFeatures {
    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_filters(&self) -> usize {
        self.values.ncols()
    }

    /// Temporal mean over frames: one value per filter.
    pub fn mean_pooled(&self) -> Array1<f64> {
        let t = self.values.nrows().max(1) as f64;
        self.values.sum_axis(ndarray::Axis(0)) / t
    }
}

/// Per-coefficient normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Apply the one-pole pre-emphasis filter `y[n] = x[n] - coeff * x[n-1]`
/// with `y[0] = x[0]`.
pub fn pre_emphasize(clip: &AudioClip, coeff: f64) -> Result<AudioClip> {
    if !(0.0..1.0).contains(&coeff) {
        return Err(Error::InvalidInput(format!(
            "pre-emphasis coeff must be in [0, 1), got {coeff}"
        )));
    }
    if clip.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite audio sample".into()));
    }
    let mut out = Vec::with_capacity(clip.samples.len());
    let mut prev = 0.0;
    for (n, &x) in clip.samples.iter().enumerate() {
        out.push(if n == 0 { x } else { x - coeff * prev });
        prev = x;
    }
    Ok(AudioClip {
        samples: out,
        sample_rate: clip.sample_rate,
    })
}

/// Symmetric Hamming window of the given length.
pub fn hamming_window(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| {
            0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (len - 1) as f64).cos()
        })
        .collect()
}

/// Cut the clip into overlapping frames, each multiplied by a Hamming window.
///
/// Emits `floor((N - W) / H) + 1` frames of length `W`.
pub fn frame_signal(clip: &AudioClip, cfg: &FilterbankConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(clip.sample_rate)?;
    let w = cfg.window_len(clip.sample_rate);
    let h = cfg.hop_len(clip.sample_rate);
    let n = clip.samples.len();
    if n < w {
        return Err(Error::TooShort { got: n, need: w });
    }
    let n_frames = (n - w) / h + 1;
    let window = hamming_window(w);
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let start = t * h;
        let frame: Vec<f64> = clip.samples[start..start + w]
            .iter()
            .zip(window.iter())
            .map(|(x, wv)| x * wv)
            .collect();
        frames.push(frame);
    }
    Ok(frames)
}

/// Hz to mel, HTK convention `2595 * log10(1 + f / 700)`.
pub fn hz_to_mel(f: f64) -> Result<f64> {
    if f < 0.0 || !f.is_finite() {
        return Err(Error::InvalidInput(format!(
            "frequency must be finite and non-negative, got {f}"
        )));
    }
    Ok(2595.0 * (1.0 + f / 700.0).log10())
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(m: f64) -> Result<f64> {
    if m < 0.0 || !m.is_finite() {
        return Err(Error::InvalidInput(format!(
            "mel value must be finite and non-negative, got {m}"
        )));
    }
    Ok(700.0 * (10f64.powf(m / 2595.0) - 1.0))
}

/// Power spectrum of one frame: `|DFT_k|^2 / fft_size` for bins
/// `0..=fft_size/2`. The frame is zero-padded to `fft_size`.
pub fn power_spectrum(frame: &[f64], fft_size: usize) -> Result<Vec<f64>> {
    if frame.len() > fft_size {
        return Err(Error::Shape(format!(
            "frame length {} exceeds fft_size {fft_size}",
            frame.len()
        )));
    }
    if frame.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidInput("non-finite frame sample".into()));
    }
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);
    Ok(power_spectrum_with(frame, fft_size, fft.as_ref()))
}

fn power_spectrum_with(frame: &[f64], fft_size: usize, fft: &dyn rustfft::Fft<f64>) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = frame.iter().map(|&x| Complex::new(x, 0.0)).collect();
    buf.resize(fft_size, Complex::new(0.0, 0.0));
    fft.process(&mut buf);
    buf.iter()
        .take(fft_size / 2 + 1)
        .map(|c| c.norm_sqr() / fft_size as f64)
        .collect()
}

/// Triangular mel filter matrix, `n_filters x (fft_size/2 + 1)`.
///
/// Filter centers are equally spaced in mel between `f_min` and `f_max`,
/// snapped to FFT bins; every row peaks at exactly 1.
pub fn mel_filter_matrix(cfg: &FilterbankConfig, sample_rate: u32) -> Result<Array2<f64>> {
    cfg.validate(sample_rate)?;
    let fft_size = cfg.resolved_fft_size(sample_rate);
    let n_bins = fft_size / 2 + 1;
    let mel_lo = hz_to_mel(cfg.f_min)?;
    let mel_hi = hz_to_mel(cfg.resolved_f_max(sample_rate))?;
    let n = cfg.n_filters;

    let bins: Vec<usize> = (0..n + 2)
        .map(|i| {
            let mel = mel_lo + (mel_hi - mel_lo) * i as f64 / (n + 1) as f64;
            let hz = mel_to_hz(mel).expect("mel edge is non-negative");
            ((fft_size + 1) as f64 * hz / sample_rate as f64).floor() as usize
        })
        .collect();

    let mut m = Array2::zeros((n, n_bins));
    for j in 0..n {
        let (lo, mid, hi) = (bins[j], bins[j + 1], bins[j + 2]);
        for k in lo..mid {
            if k < n_bins {
                m[(j, k)] = (k - lo) as f64 / (mid - lo) as f64;
            }
        }
        for k in mid..hi {
            if k < n_bins {
                m[(j, k)] = (hi - k) as f64 / (hi - mid) as f64;
            }
        }
        let row = m.row(j);
        let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if peak != 1.0 {
            return Err(Error::Config(format!(
                "filter {j} has no unit peak (mel spacing too fine for fft resolution {fft_size}); \
                 reduce n_filters or increase fft_size"
            )));
        }
    }
    Ok(m)
}

/// Full front-end: pre-emphasis, framing, power spectra, mel weighting, log.
pub fn extract_features(clip: &AudioClip, cfg: &FilterbankConfig) -> Result<FilterbankFeatures> {
    cfg.validate(clip.sample_rate)?;
    let emphasized = pre_emphasize(clip, cfg.pre_emphasis)?;
    let frames = frame_signal(&emphasized, cfg)?;
    let fft_size = cfg.resolved_fft_size(clip.sample_rate);
    let mel = mel_filter_matrix(cfg, clip.sample_rate)?;

    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_size);

    let w = cfg.window_len(clip.sample_rate);
    let h = cfg.hop_len(clip.sample_rate);
    let sr = clip.sample_rate as f64;

    let mut values = Array2::zeros((frames.len(), cfg.n_filters));
    let mut frame_times = Vec::with_capacity(frames.len());
    for (t, frame) in frames.iter().enumerate() {
        let ps = Array1::from(power_spectrum_with(frame, fft_size, fft.as_ref()));
        let energies = mel.dot(&ps);
        for (j, &e) in energies.iter().enumerate() {
            values[(t, j)] = e.max(cfg.log_floor).ln();
        }
        frame_times.push((t * h) as f64 / sr + w as f64 / (2.0 * sr));
    }
    Ok(FilterbankFeatures {
        values,
        frame_times,
    })
}

/// Fit per-coefficient mean/std over all frames of a feature corpus.
pub fn fit_norm_stats(features: &[FilterbankFeatures]) -> Result<NormStats> {
    let n_filters = features
        .first()
        .map(|f| f.n_filters())
        .ok_or_else(|| Error::InsufficientData("empty feature corpus".into()))?;
    let total: usize = features.iter().map(|f| f.n_frames()).sum();
    if total < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 feature frames, got {total}"
        )));
    }
    let mut mean = vec![0.0; n_filters];
    for f in features {
        if f.n_filters() != n_filters {
            return Err(Error::Shape(format!(
                "feature corpus mixes {} and {} filters",
                n_filters,
                f.n_filters()
            )));
        }
        for row in f.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                mean[j] += v;
            }
        }
    }
    for m in &mut mean {
        *m /= total as f64;
    }
    let mut var = vec![0.0; n_filters];
    for f in features {
        for row in f.values.rows() {
            for (j, &v) in row.iter().enumerate() {
                let d = v - mean[j];
                var[j] += d * d;
            }
        }
    }
    let std = var
        .iter()
        .map(|v| (v / total as f64).sqrt().max(STD_EPSILON))
        .collect();
    Ok(NormStats { mean, std })
}

/// Z-score features with previously fitted stats.
pub fn apply_norm(features: &FilterbankFeatures, stats: &NormStats) -> FilterbankFeatures {
    let mut values = features.values.clone();
    for mut row in values.rows_mut() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - stats.mean[j]) / stats.std[j];
        }
    }
    FilterbankFeatures {
        values,
        frame_times: features.frame_times.clone(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn clip(samples: Vec<f64>) -> AudioClip {
        AudioClip::new(samples, 16_000).unwrap()
    }

    #[test]
    fn pre_emphasis_formula() {
        let out = pre_emphasize(&clip(vec![1.0, 1.0, 1.0]), 0.97).unwrap();
        assert_eq!(out.samples, vec![1.0, 1.0 - 0.97, 1.0 - 0.97]);
        assert!((out.samples[1] - 0.03).abs() < 1e-15);
        let identity = pre_emphasize(&clip(vec![0.5, -0.25, 0.75]), 0.0).unwrap();
        assert_eq!(identity.samples, vec![0.5, -0.25, 0.75]);
        let impulse = pre_emphasize(&clip(vec![1.0, 0.0, 0.0]), 0.97).unwrap();
        assert_eq!(impulse.samples, vec![1.0, -0.97, 0.0]);
    }

    #[test]
    fn pre_emphasis_rejects_non_finite() {
        let c = AudioClip {
            samples: vec![0.0, f64::NAN],
            sample_rate: 16_000,
        };
        assert!(matches!(
            pre_emphasize(&c, 0.97),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn framing_counts() {
        let cfg = FilterbankConfig::default();
        assert_eq!(frame_signal(&clip(vec![0.0; 400]), &cfg).unwrap().len(), 4);
        assert_eq!(frame_signal(&clip(vec![0.0; 160]), &cfg).unwrap().len(), 1);
        assert!(matches!(
            frame_signal(&clip(vec![0.0; 159]), &cfg),
            Err(Error::TooShort { got: 159, need: 160 })
        ));
    }

    #[test]
    fn mel_scale_landmarks() {
        assert_eq!(hz_to_mel(0.0).unwrap(), 0.0);
        // 2595 * log10(2), evaluated in f64
        assert_relative_eq!(hz_to_mel(700.0).unwrap(), 781.1728387480311, epsilon = 1e-9);
        let round = mel_to_hz(hz_to_mel(4000.0).unwrap()).unwrap();
        assert_relative_eq!(round, 4000.0, epsilon = 1e-6);
        assert!(hz_to_mel(-1.0).is_err());
    }

    #[test]
    fn power_spectrum_zero_and_constant() {
        let zeros = power_spectrum(&[0.0; 160], 256).unwrap();
        assert_eq!(zeros.len(), 129);
        assert!(zeros.iter().all(|&v| v == 0.0));

        // Constant frame value c: DC bin = c^2 * W^2 / fft_size
        let c = 0.7;
        let w = 160usize;
        let ps = power_spectrum(&vec![c; w], 256).unwrap();
        let expected = c * c * (w * w) as f64 / 256.0;
        assert_relative_eq!(ps[0], expected, max_relative = 1e-12);
    }

    #[test]
    fn power_spectrum_concentrates_pure_bin_frequency() {
        // Cosine at exact bin k0 of a 256-point FFT, unwindowed full frame.
        let fft_size = 256;
        let k0 = 24usize;
        let frame: Vec<f64> = (0..fft_size)
            .map(|n| (2.0 * std::f64::consts::PI * k0 as f64 * n as f64 / fft_size as f64).cos())
            .collect();
        let ps = power_spectrum(&frame, fft_size).unwrap();
        let peak = ps[k0];
        for (k, &v) in ps.iter().enumerate() {
            if k != k0 {
                assert!(
                    v < 1e-10 * peak,
                    "bin {k} leaked {v} relative to peak {peak}"
                );
            }
        }
    }

    #[test]
    fn mel_matrix_rows_unimodal_unit_peak() {
        let cfg = FilterbankConfig::default();
        let m = mel_filter_matrix(&cfg, 16_000).unwrap();
        assert_eq!(m.nrows(), 40);
        for (j, row) in m.rows().into_iter().enumerate() {
            let peak = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(peak, 1.0, "row {j}");
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().any(|&v| v > 0.0), "row {j} has empty support");
            // Unimodal: strictly rises to the peak, then falls.
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for k in 1..=argmax {
                assert!(row[k] >= row[k - 1], "row {j} not rising at {k}");
            }
            for k in argmax + 1..row.len() {
                assert!(row[k] <= row[k - 1], "row {j} not falling at {k}");
            }
        }
    }

    #[test]
    fn mel_matrix_support_between_neighbor_peaks() {
        let cfg = FilterbankConfig::default();
        let m = mel_filter_matrix(&cfg, 16_000).unwrap();
        let peaks: Vec<usize> = m
            .rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0
            })
            .collect();
        for j in 1..m.nrows() - 1 {
            for (k, &v) in m.row(j).iter().enumerate() {
                if v > 0.0 {
                    assert!(
                        k > peaks[j - 1] && k < peaks[j + 1],
                        "row {j} support bin {k} outside ({}, {})",
                        peaks[j - 1],
                        peaks[j + 1]
                    );
                }
            }
        }
    }

    #[test]
    fn mel_matrix_rejects_too_many_filters() {
        let cfg = FilterbankConfig {
            n_filters: 200,
            ..FilterbankConfig::default()
        };
        assert!(matches!(
            mel_filter_matrix(&cfg, 16_000),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn silence_hits_log_floor() {
        let cfg = FilterbankConfig::default();
        let f = extract_features(&clip(vec![0.0; 1600]), &cfg).unwrap();
        assert_eq!(f.n_filters(), 40);
        let floor = 1e-10f64.ln();
        for &v in f.values.iter() {
            assert_eq!(v, floor);
        }
    }

    #[test]
    fn pure_tone_maximizes_matching_filter() {
        let cfg = FilterbankConfig::default();
        let sr = 16_000u32;
        let fft_size = cfg.resolved_fft_size(sr);
        let m = mel_filter_matrix(&cfg, sr).unwrap();
        // Center frequency of filter 20: its peak bin.
        let j = 20usize;
        let peak_bin = m
            .row(j)
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let f0 = peak_bin as f64 * sr as f64 / fft_size as f64;
        let samples: Vec<f64> = (0..8000)
            .map(|n| (2.0 * std::f64::consts::PI * f0 * n as f64 / sr as f64).sin())
            .collect();
        let feats = extract_features(&clip(samples), &cfg).unwrap();
        let pooled = feats.mean_pooled();
        let argmax = pooled
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, j);
    }

    #[test]
    fn norm_stats_zero_mean_unit_variance() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let samples: Vec<f64> = (0..16_000).map(|_| rng.gen_range(-0.8..0.8)).collect();
        let cfg = FilterbankConfig::default();
        let f = extract_features(&clip(samples), &cfg).unwrap();
        let stats = fit_norm_stats(std::slice::from_ref(&f)).unwrap();
        let normed = apply_norm(&f, &stats);
        let t = normed.n_frames() as f64;
        for j in 0..normed.n_filters() {
            let col = normed.values.column(j);
            let mean = col.sum() / t;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
            assert!(mean.abs() < 1e-6, "col {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-5, "col {j} var {var}");
        }
    }

    #[test]
    fn norm_constant_corpus_clamps_to_zero() {
        let values = Array2::from_elem((8, 4), 3.25);
        let f = FilterbankFeatures {
            values,
            frame_times: (0..8).map(|i| i as f64).collect(),
        };
        let stats = fit_norm_stats(std::slice::from_ref(&f)).unwrap();
        let normed = apply_norm(&f, &stats);
        assert!(normed.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn norm_twice_is_not_identity() {
        let mut values = Array2::zeros((4, 2));
        for (i, v) in values.iter_mut().enumerate() {
            *v = (i as f64).sin() + i as f64 * 0.1;
        }
        let f = FilterbankFeatures {
            values,
            frame_times: vec![0.0; 4],
        };
        let stats = fit_norm_stats(std::slice::from_ref(&f)).unwrap();
        let once = apply_norm(&f, &stats);
        let twice = apply_norm(&once, &stats);
        assert_ne!(once.values, twice.values);
    }

    #[test]
    fn norm_needs_two_frames() {
        let f = FilterbankFeatures {
            values: Array2::zeros((1, 4)),
            frame_times: vec![0.0],
        };
        assert!(matches!(
            fit_norm_stats(std::slice::from_ref(&f)),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn shift_by_one_hop_shifts_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let n = 4000;
        let base: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = FilterbankConfig::default();
        let hop = cfg.hop_len(16_000);
        let shifted = base[hop..].to_vec();
        let fa = extract_features(&clip(base), &cfg).unwrap();
        let fb = extract_features(&clip(shifted), &cfg).unwrap();
        // Interior rows: row t of the shifted clip equals row t+1 of the original.
        for t in 1..fb.n_frames() - 1 {
            for j in 0..fa.n_filters() {
                let a = fa.values[(t + 1, j)];
                let b = fb.values[(t, j)];
                assert!(
                    (a - b).abs() < 1e-9,
                    "row {t} filter {j}: {a} vs {b}"
                );
            }
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..3200).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cfg = FilterbankConfig::default();
        let a = extract_features(&clip(samples.clone()), &cfg).unwrap();
        let b = extract_features(&clip(samples), &cfg).unwrap();
        for (x, y) in a.values.iter().zip(b.values.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn scaling_up_never_decreases_log_energy(seed in 0u64..1000, alpha in 1.0f64..20.0) {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..800).map(|_| rng.gen_range(-0.05..0.05)).collect();
            let scaled: Vec<f64> = samples.iter().map(|x| x * alpha).collect();
            let cfg = FilterbankConfig::default();
            let fa = extract_features(&clip(samples), &cfg).unwrap();
            let fb = extract_features(&clip(scaled), &cfg).unwrap();
            for (a, b) in fa.values.iter().zip(fb.values.iter()) {
                prop_assert!(b >= a, "scaled {b} < original {a}");
            }
        }

        #[test]
        fn mel_roundtrip(f in 0.0f64..8000.0) {
            let m = hz_to_mel(f).unwrap();
            let back = mel_to_hz(m).unwrap();
            let rel = (back - f).abs() / f.max(1.0);
            prop_assert!(rel < 1e-9);
        }
    }
}
