//! Kaldi-style log mel filterbank features and CMVN statistics.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Waveform;
use crate::parallel::Exec;

/// Single-precision machine epsilon; the energy floor before the log.
pub const DEFAULT_LOG_FLOOR: f64 = 1.1921e-7;
/// Lower bound on any standard deviation used as a CMVN divisor.
pub const STD_FLOOR: f64 = 1e-8;
pub const LOW_FREQ_HZ: f64 = 20.0;

const MATRIX_MAGIC: &[u8; 8] = b"S2TFEAT1";

#[derive(Debug, Error, PartialEq, Clone)]
pub enum FeatureError {
    #[error("audio too short: {samples} samples, need at least {window} for one frame")]
    AudioTooShort { samples: usize, window: usize },
    #[error("invalid fbank config: {0}")]
    InvalidConfig(String),
    #[error("feature dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot finalize CMVN statistics over zero frames")]
    EmptyStats,
    #[error("matrix shape {rows}x{cols} does not match {len} values")]
    ShapeMismatch { rows: usize, cols: usize, len: usize },
    #[error("non-finite value at frame {frame}, bin {bin}")]
    NonFinite { frame: usize, bin: usize },
    #[error("bad feature matrix file: {0}")]
    BadMatrixFile(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowType {
    /// `(0.5 - 0.5 cos(2 pi n / (N - 1)))^0.85`
    #[default]
    Povey,
    Hamming,
    Hanning,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FbankConfig {
    pub num_mel_bins: usize,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub preemphasis: f64,
    pub window: WindowType,
    pub dither: f64,
    /// Seed for the dither noise; ignored when `dither == 0`.
    pub dither_seed: u64,
    pub remove_dc_offset: bool,
    pub snip_edges: bool,
    pub log_floor: f64,
}

impl Default for FbankConfig {
    fn default() -> Self {
        Self {
            num_mel_bins: 80,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            preemphasis: 0.97,
            window: WindowType::Povey,
            dither: 0.0,
            dither_seed: 0,
            remove_dc_offset: true,
            snip_edges: true,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

impl FbankConfig {
    pub fn validate(&self) -> Result<(), FeatureError> {
        let bad = |m: &str| Err(FeatureError::InvalidConfig(m.to_string()));
        if self.num_mel_bins == 0 {
            return bad("num_mel_bins must be >= 1");
        }
        if !(self.frame_length_ms > 0.0 && self.frame_shift_ms > 0.0) {
            return bad("frame length and shift must be positive");
        }
        if self.frame_shift_ms > self.frame_length_ms {
            return bad("frame_shift_ms must not exceed frame_length_ms");
        }
        if self.log_floor.is_nan() || self.log_floor <= 0.0 {
            return bad("log_floor must be positive");
        }
        if self.dither.is_nan() || self.dither < 0.0 {
            return bad("dither must be non-negative");
        }
        Ok(())
    }

    pub fn window_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, rate: u32) -> usize {
        (rate as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }
}

/// Number of frames [`logmel_fbank`] produces for `num_samples` samples.
pub fn frame_count(num_samples: usize, cfg: &FbankConfig, rate: u32) -> usize {
    let win = cfg.window_samples(rate);
    let shift = cfg.shift_samples(rate).max(1);
    if cfg.snip_edges {
        if num_samples < win {
            0
        } else {
            1 + (num_samples - win) / shift
        }
    } else {
        (num_samples + shift / 2) / shift
    }
}

/// Dense row-major `num_frames x feature_dim` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    num_frames: usize,
    feature_dim: usize,
}

impl FeatureMatrix {
    pub fn new(num_frames: usize, feature_dim: usize, data: Vec<f32>) -> Result<Self, FeatureError> {
        if num_frames.checked_mul(feature_dim) != Some(data.len()) {
            return Err(FeatureError::ShapeMismatch { rows: num_frames, cols: feature_dim, len: data.len() });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite { frame: i / feature_dim, bin: i % feature_dim });
        }
        Ok(Self { data, num_frames, feature_dim })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(FeatureError::DimensionMismatch { expected: dim, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, data)
    }

    pub fn filled(num_frames: usize, feature_dim: usize, value: f32) -> Self {
        Self { data: vec![value; num_frames * feature_dim], num_frames, feature_dim }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, frame: usize, bin: usize) -> f32 {
        self.data[frame * self.feature_dim + bin]
    }

    pub fn set(&mut self, frame: usize, bin: usize, v: f32) {
        self.data[frame * self.feature_dim + bin] = v;
    }

    pub fn row(&self, frame: usize) -> &[f32] {
        &self.data[frame * self.feature_dim..(frame + 1) * self.feature_dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.feature_dim.max(1)).take(self.num_frames)
    }

    pub fn column(&self, bin: usize) -> impl Iterator<Item = f32> + '_ {
        self.data.iter().skip(bin).step_by(self.feature_dim.max(1)).copied()
    }

    /// Per-column population mean and standard deviation (unfloored).
    pub fn column_moments(&self) -> (Vec<f64>, Vec<f64>) {
        let dim = self.feature_dim;
        let n = self.num_frames as f64;
        let mut mean = vec![0.0; dim];
        let mut var = vec![0.0; dim];
        if self.num_frames == 0 {
            return (mean, var);
        }
        for row in self.rows() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        for row in self.rows() {
            for ((s, &v), m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt()).collect();
        (mean, std)
    }

    /// Binary form: 8-byte magic, LE u32 frames, LE u32 dim, LE f32 row-major.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * self.data.len());
        out.extend_from_slice(MATRIX_MAGIC);
        out.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FeatureError> {
        if bytes.len() < 16 || &bytes[..8] != MATRIX_MAGIC {
            return Err(FeatureError::BadMatrixFile("missing magic".into()));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let payload = &bytes[16..];
        if rows.checked_mul(cols).and_then(|n| n.checked_mul(4)) != Some(payload.len()) {
            return Err(FeatureError::BadMatrixFile(format!(
                "{rows}x{cols} header but {} payload bytes",
                payload.len()
            )));
        }
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        Self::new(rows, cols, data)
    }

    pub fn is_matrix_file(bytes: &[u8]) -> bool {
        bytes.starts_with(MATRIX_MAGIC)
    }
}

/// Precomputed window, mel filters and FFT plan for one (config, rate) pair.
pub struct FbankComputer {
    cfg: FbankConfig,
    rate: u32,
    window_len: usize,
    shift: usize,
    padded_len: usize,
    window: Vec<f64>,
    banks: Vec<MelBank>,
    fft: Arc<dyn Fft<f64>>,
}

/// One triangular filter restricted to its nonzero FFT bins.
#[derive(Debug, Clone)]
pub struct MelBank {
    pub first_bin: usize,
    pub weights: Vec<f64>,
}

pub fn mel_scale(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn inverse_mel_scale(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

impl FbankComputer {
    pub fn new(cfg: &FbankConfig, rate: u32) -> Result<Self, FeatureError> {
        cfg.validate()?;
        let window_len = cfg.window_samples(rate);
        let shift = cfg.shift_samples(rate);
        if window_len < 2 || shift == 0 {
            return Err(FeatureError::InvalidConfig(format!(
                "{} ms / {} ms at {rate} Hz gives a degenerate frame",
                cfg.frame_length_ms, cfg.frame_shift_ms
            )));
        }
        let nyquist = rate as f64 / 2.0;
        if LOW_FREQ_HZ >= nyquist {
            return Err(FeatureError::InvalidConfig(format!("sample rate {rate} Hz too low")));
        }
        let padded_len = window_len.next_power_of_two();
        let window = window_function(cfg.window, window_len);
        let banks = mel_banks(cfg.num_mel_bins, padded_len, rate as f64);
        let fft = FftPlanner::new().plan_fft_forward(padded_len);
        Ok(Self { cfg: cfg.clone(), rate, window_len, shift, padded_len, window, banks, fft })
    }

    pub fn banks(&self) -> &[MelBank] {
        &self.banks
    }

    pub fn padded_len(&self) -> usize {
        self.padded_len
    }

    pub fn compute(&self, w: &Waveform) -> Result<FeatureMatrix, FeatureError> {
        if w.sample_rate != self.rate {
            return Err(FeatureError::InvalidConfig(format!(
                "waveform at {} Hz, extractor built for {} Hz",
                w.sample_rate, self.rate
            )));
        }
        let num_frames = frame_count(w.len(), &self.cfg, self.rate);
        if num_frames == 0 {
            return Err(FeatureError::AudioTooShort { samples: w.len(), window: self.window_len });
        }
        let dim = self.cfg.num_mel_bins;
        let mut out = vec![0f32; num_frames * dim];
        let mut frame = vec![0f64; self.window_len];
        let mut buf = vec![Complex::new(0.0, 0.0); self.padded_len];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut power = vec![0f64; self.padded_len / 2 + 1];
        let mut rng = (self.cfg.dither > 0.0).then(|| ChaCha8Rng::seed_from_u64(self.cfg.dither_seed));

        for (t, row) in out.chunks_exact_mut(dim).enumerate() {
            self.extract_frame(&w.samples, t, &mut frame);
            if let Some(rng) = rng.as_mut() {
                for s in frame.iter_mut() {
                    let g: f64 = StandardNormal.sample(rng);
                    *s += g * self.cfg.dither;
                }
            }
            self.process_frame(&mut frame);

            for (b, s) in buf.iter_mut().enumerate() {
                *s = Complex::new(frame.get(b).copied().unwrap_or(0.0), 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }

            for (cell, bank) in row.iter_mut().zip(&self.banks) {
                let energy: f64 = bank.weights.iter().zip(&power[bank.first_bin..]).map(|(wt, p)| wt * p).sum();
                *cell = energy.max(self.cfg.log_floor).ln() as f32;
            }
        }
        FeatureMatrix::new(num_frames, dim, out)
    }

    fn extract_frame(&self, samples: &[f32], t: usize, frame: &mut [f64]) {
        let n = samples.len() as i64;
        let start = if self.cfg.snip_edges {
            (t * self.shift) as i64
        } else {
            (t * self.shift + self.shift / 2) as i64 - (self.window_len / 2) as i64
        };
        for (i, s) in frame.iter_mut().enumerate() {
            let mut idx = start + i as i64;
            // Reflect at both edges (only reachable without snip_edges).
            while idx < 0 || idx >= n {
                idx = if idx < 0 { -idx - 1 } else { 2 * n - 1 - idx };
            }
            *s = samples[idx as usize] as f64;
        }
    }

    fn process_frame(&self, frame: &mut [f64]) {
        if self.cfg.remove_dc_offset {
            let mean = frame.iter().sum::<f64>() / frame.len() as f64;
            frame.iter_mut().for_each(|s| *s -= mean);
        }
        let coeff = self.cfg.preemphasis;
        if coeff != 0.0 {
            for i in (1..frame.len()).rev() {
                frame[i] -= coeff * frame[i - 1];
            }
            frame[0] -= coeff * frame[0];
        }
        for (s, w) in frame.iter_mut().zip(&self.window) {
            *s *= w;
        }
    }
}

fn window_function(kind: WindowType, len: usize) -> Vec<f64> {
    let denom = (len - 1) as f64;
    (0..len)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / denom;
            match kind {
                WindowType::Povey => (0.5 - 0.5 * a.cos()).powf(0.85),
                WindowType::Hamming => 0.54 - 0.46 * a.cos(),
                WindowType::Hanning => 0.5 - 0.5 * a.cos(),
            }
        })
        .collect()
}

/// Triangular filters equally spaced on the mel scale from 20 Hz to Nyquist,
/// evaluated on FFT bins `0..padded_len/2`.
fn mel_banks(num_bins: usize, padded_len: usize, rate: f64) -> Vec<MelBank> {
    let num_fft_bins = padded_len / 2;
    let bin_width = rate / padded_len as f64;
    let mel_low = mel_scale(LOW_FREQ_HZ);
    let mel_high = mel_scale(rate / 2.0);
    let delta = (mel_high - mel_low) / (num_bins + 1) as f64;
    (0..num_bins)
        .map(|b| {
            let left = mel_low + b as f64 * delta;
            let center = left + delta;
            let right = center + delta;
            let mut first_bin = None;
            let mut weights = Vec::new();
            for i in 0..num_fft_bins {
                let mel = mel_scale(bin_width * i as f64);
                if mel > left && mel < right {
                    let wt =
                        if mel <= center { (mel - left) / (center - left) } else { (right - mel) / (right - center) };
                    first_bin.get_or_insert(i);
                    weights.push(wt);
                } else if first_bin.is_some() {
                    break;
                }
            }
            MelBank { first_bin: first_bin.unwrap_or(0), weights }
        })
        .collect()
}

/// Log mel filterbank features of a single waveform.
pub fn logmel_fbank(w: &Waveform, cfg: &FbankConfig) -> Result<FeatureMatrix, FeatureError> {
    FbankComputer::new(cfg, w.sample_rate)?.compute(w)
}

/// Features for many waveforms; output order equals input order.
///
/// All waveforms must share one sample rate.
pub fn extract_batch(waves: &[Waveform], cfg: &FbankConfig, exec: Exec) -> Vec<Result<FeatureMatrix, FeatureError>> {
    let Some(first) = waves.first() else { return Vec::new() };
    match FbankComputer::new(cfg, first.sample_rate) {
        Ok(computer) => exec.map(waves, |w| computer.compute(w)),
        Err(e) => waves.iter().map(|_| Err(e.clone())).collect(),
    }
}

/// Per-utterance mean/variance normalization (population variance).
pub fn utterance_cmvn(feat: &FeatureMatrix) -> FeatureMatrix {
    if feat.num_frames() == 0 {
        return feat.clone();
    }
    let (mean, std) = feat.column_moments();
    normalize(feat, &mean, &std)
}

fn normalize(feat: &FeatureMatrix, mean: &[f64], std: &[f64]) -> FeatureMatrix {
    let dim = feat.feature_dim();
    let mut out = feat.clone();
    for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
        let b = i % dim;
        *v = ((*v as f64 - mean[b]) / std[b].max(STD_FLOOR)) as f32;
    }
    out
}

/// Running sums for corpus-level (global) CMVN.
#[derive(Debug, Clone, PartialEq)]
pub struct GcmvnStats {
    pub count: u64,
    pub sum: Vec<f64>,
    pub sum_sq: Vec<f64>,
}

/// Finalized global CMVN parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gcmvn {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GcmvnStats {
    pub fn new(feature_dim: usize) -> Self {
        Self { count: 0, sum: vec![0.0; feature_dim], sum_sq: vec![0.0; feature_dim] }
    }

    pub fn feature_dim(&self) -> usize {
        self.sum.len()
    }

    pub fn accumulate(&mut self, feat: &FeatureMatrix) -> Result<(), FeatureError> {
        if feat.feature_dim() != self.feature_dim() {
            return Err(FeatureError::DimensionMismatch { expected: self.feature_dim(), found: feat.feature_dim() });
        }
        for row in feat.rows() {
            for ((s, q), &v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(row) {
                let v = v as f64;
                *s += v;
                *q += v * v;
            }
        }
        self.count += feat.num_frames() as u64;
        Ok(())
    }

    /// Combine two accumulators (associative and commutative).
    pub fn merge(mut self, other: &GcmvnStats) -> Result<Self, FeatureError> {
        if other.feature_dim() != self.feature_dim() {
            return Err(FeatureError::DimensionMismatch { expected: self.feature_dim(), found: other.feature_dim() });
        }
        self.count += other.count;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.sum_sq.iter_mut().zip(&other.sum_sq).for_each(|(a, b)| *a += b);
        Ok(self)
    }

    pub fn finalize(&self) -> Result<Gcmvn, FeatureError> {
        if self.count == 0 {
            return Err(FeatureError::EmptyStats);
        }
        let n = self.count as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std = self.sum_sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        Ok(Gcmvn { mean, std })
    }
}

impl Gcmvn {
    pub fn apply(&self, feat: &FeatureMatrix) -> Result<FeatureMatrix, FeatureError> {
        if feat.feature_dim() != self.mean.len() || self.std.len() != self.mean.len() {
            return Err(FeatureError::DimensionMismatch { expected: self.mean.len(), found: feat.feature_dim() });
        }
        Ok(normalize(feat, &self.mean, &self.std))
    }
}
