//! Waveform ingestion: WAV/FLAC decoding, test-signal synthesis and speed
//! perturbation.

use std::f64::consts::PI;
use std::io::Cursor;
use std::sync::OnceLock;

use thiserror::Error;

/// PCM16 full-scale divisor; the most negative code maps to exactly -1.0.
pub const PCM16_SCALE: f64 = 32768.0;

#[derive(Debug, Error, PartialEq)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt audio stream: {0}")]
    CorruptStream(String),
    #[error("audio stream contains no samples")]
    Empty,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AudioFormat {
    Wav,
    Flac,
}

impl AudioFormat {
    /// Guess the container from its magic bytes.
    pub fn sniff(bytes: &[u8]) -> Option<Self> {
        if bytes.len() >= 12 && &bytes[0..4] == b"RIFF" && &bytes[8..12] == b"WAVE" {
            Some(AudioFormat::Wav)
        } else if bytes.starts_with(b"fLaC") {
            Some(AudioFormat::Flac)
        } else {
            None
        }
    }
}

/// Mono PCM signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self { samples, sample_rate }
    }

    /// Always 1: multi-channel input is downmixed on ingestion.
    pub fn channel_count(&self) -> usize {
        1
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Mean of `x^2` over the signal.
    pub fn mean_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.samples.len() as f64
    }
}

/// Decode a WAV (PCM16) or FLAC (16-bit) byte stream into a mono waveform.
pub fn decode_audio(bytes: &[u8], hint: Option<AudioFormat>) -> Result<Waveform, AudioError> {
    let format = match hint.or_else(|| AudioFormat::sniff(bytes)) {
        Some(f) => f,
        None => return Err(AudioError::UnsupportedFormat("neither a RIFF/WAVE nor a FLAC stream".into())),
    };
    let (interleaved, channels, rate) = match format {
        AudioFormat::Wav => read_wav(bytes)?,
        AudioFormat::Flac => read_flac(bytes)?,
    };
    let wave = downmix(&interleaved, channels, rate)?;
    if wave.is_empty() {
        return Err(AudioError::Empty);
    }
    Ok(wave)
}

fn read_wav(bytes: &[u8]) -> Result<(Vec<i32>, usize, u32), AudioError> {
    let reader = hound::WavReader::new(Cursor::new(bytes)).map_err(map_hound)?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "WAV {:?} {}-bit (only PCM 16-bit is accepted)",
            spec.sample_format, spec.bits_per_sample
        )));
    }
    let samples =
        reader.into_samples::<i16>().map(|s| s.map(i32::from)).collect::<Result<Vec<_>, _>>().map_err(map_hound)?;
    Ok((samples, spec.channels as usize, spec.sample_rate))
}

fn map_hound(e: hound::Error) -> AudioError {
    match e {
        hound::Error::Unsupported => AudioError::UnsupportedFormat("WAV encoding not supported".into()),
        hound::Error::FormatError(m) => AudioError::CorruptStream(m.to_string()),
        hound::Error::IoError(e) => AudioError::CorruptStream(e.to_string()),
        other => AudioError::CorruptStream(other.to_string()),
    }
}

fn read_flac(bytes: &[u8]) -> Result<(Vec<i32>, usize, u32), AudioError> {
    let mut reader = claxon::FlacReader::new(Cursor::new(bytes)).map_err(map_claxon)?;
    let info = reader.streaminfo();
    if info.bits_per_sample != 16 {
        return Err(AudioError::UnsupportedFormat(format!(
            "FLAC {}-bit (only 16-bit is accepted)",
            info.bits_per_sample
        )));
    }
    let mut samples = reader.samples().collect::<Result<Vec<i32>, _>>().map_err(map_claxon)?;
    if let Some(total) = info.samples {
        // Some encoders pad the last block; STREAMINFO has the true length.
        let expected = (total * info.channels as u64) as usize;
        if samples.len() < expected {
            return Err(AudioError::CorruptStream(format!(
                "FLAC stream truncated: {} of {expected} samples",
                samples.len()
            )));
        }
        samples.truncate(expected);
    }
    Ok((samples, info.channels as usize, info.sample_rate))
}

fn map_claxon(e: claxon::Error) -> AudioError {
    match e {
        claxon::Error::Unsupported(m) => AudioError::UnsupportedFormat(m.to_string()),
        claxon::Error::FormatError(m) => AudioError::CorruptStream(m.to_string()),
        claxon::Error::IoError(e) => AudioError::CorruptStream(e.to_string()),
    }
}

fn downmix(interleaved: &[i32], channels: usize, rate: u32) -> Result<Waveform, AudioError> {
    if channels == 0 {
        return Err(AudioError::CorruptStream("zero channels".into()));
    }
    if rate == 0 {
        return Err(AudioError::CorruptStream("zero sample rate".into()));
    }
    if !interleaved.len().is_multiple_of(channels) {
        return Err(AudioError::CorruptStream("partial trailing frame".into()));
    }
    let samples = interleaved
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 / PCM16_SCALE).sum();
            (sum / channels as f64) as f32
        })
        .collect();
    Ok(Waveform::new(samples, rate))
}

/// Encode as mono PCM16 WAV. Samples are clamped to the representable range.
pub fn encode_wav(w: &Waveform) -> Vec<u8> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut cursor = Cursor::new(Vec::with_capacity(44 + 2 * w.len()));
    {
        let mut writer = hound::WavWriter::new(&mut cursor, spec).expect("in-memory WAV header");
        for &s in &w.samples {
            writer.write_sample(quantize_pcm16(s)).expect("in-memory WAV write");
        }
        writer.finalize().expect("in-memory WAV finalize");
    }
    cursor.into_inner()
}

pub fn quantize_pcm16(s: f32) -> i16 {
    (s as f64 * PCM16_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16
}

/// `amplitude * sin(2*pi*freq*n/rate)` for `round(duration*rate)` samples.
pub fn synth_sine(freq: f64, duration: f64, rate: u32, amplitude: f64) -> Result<Waveform, AudioError> {
    if rate == 0 {
        return Err(AudioError::InvalidArgument("sample rate must be positive".into()));
    }
    let nyquist = rate as f64 / 2.0;
    if !(freq > 0.0 && freq < nyquist) {
        return Err(AudioError::InvalidArgument(format!("frequency {freq} Hz outside (0, {nyquist})")));
    }
    if !(amplitude > 0.0 && amplitude <= 1.0) {
        return Err(AudioError::InvalidArgument(format!("amplitude {amplitude} outside (0, 1]")));
    }
    if !(duration.is_finite() && duration > 0.0) {
        return Err(AudioError::InvalidArgument(format!("duration {duration} must be positive")));
    }
    let len = (duration * rate as f64).round() as usize;
    if len == 0 {
        return Err(AudioError::InvalidArgument("duration rounds to zero samples".into()));
    }
    let step = 2.0 * PI * freq / rate as f64;
    let samples = (0..len).map(|n| (amplitude * (step * n as f64).sin()) as f32).collect();
    Ok(Waveform::new(samples, rate))
}

pub const MIN_SPEED: f64 = 0.5;
pub const MAX_SPEED: f64 = 2.0;

const SINC_ZERO_CROSSINGS: usize = 64;
const KAISER_BETA: f64 = 8.6;
const TABLE_STEPS_PER_CROSSING: usize = 512;

/// Resample-and-relabel speed change: both tempo and pitch scale by `factor`.
///
/// The result has `round(len / factor)` samples at the original nominal rate.
pub fn speed_perturb(w: &Waveform, factor: f64) -> Result<Waveform, AudioError> {
    if !(MIN_SPEED..=MAX_SPEED).contains(&factor) {
        return Err(AudioError::InvalidArgument(format!("speed factor {factor} outside [{MIN_SPEED}, {MAX_SPEED}]")));
    }
    if factor == 1.0 {
        return Ok(w.clone());
    }
    let out_len = (w.len() as f64 / factor).round() as usize;
    Ok(Waveform::new(resample(&w.samples, factor, out_len), w.sample_rate))
}

/// Band-limited interpolation of `input` at positions `m * step`.
fn resample(input: &[f32], step: f64, out_len: usize) -> Vec<f32> {
    let table = sinc_table();
    // Lowpass at the narrower of the two Nyquist bands.
    let cutoff = (1.0 / step).min(1.0);
    let half_width = SINC_ZERO_CROSSINGS as f64 / cutoff;
    let n = input.len() as i64;
    (0..out_len)
        .map(|m| {
            let t = m as f64 * step;
            let lo = ((t - half_width).ceil() as i64).max(0);
            let hi = ((t + half_width).floor() as i64).min(n - 1);
            let mut acc = 0.0f64;
            for k in lo..=hi {
                let u = (t - k as f64).abs() * cutoff;
                acc += input[k as usize] as f64 * kernel_lookup(table, u);
            }
            (acc * cutoff) as f32
        })
        .collect()
}

fn kernel_lookup(table: &[f64], u: f64) -> f64 {
    let pos = u * TABLE_STEPS_PER_CROSSING as f64;
    let i = pos.floor() as usize;
    if i + 1 >= table.len() {
        return 0.0;
    }
    let frac = pos - i as f64;
    table[i] + (table[i + 1] - table[i]) * frac
}

/// Kaiser-windowed sinc sampled on `[0, SINC_ZERO_CROSSINGS]`.
fn sinc_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let len = SINC_ZERO_CROSSINGS * TABLE_STEPS_PER_CROSSING + 1;
        let norm = bessel_i0(KAISER_BETA);
        (0..len)
            .map(|i| {
                let u = i as f64 / TABLE_STEPS_PER_CROSSING as f64;
                let r = u / SINC_ZERO_CROSSINGS as f64;
                let window = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                let sinc = if i == 0 { 1.0 } else { (PI * u).sin() / (PI * u) };
                sinc * window
            })
            .collect()
    })
}

/// Modified Bessel function of the first kind, order zero (power series).
fn bessel_i0(x: f64) -> f64 {
    let half_sq = (x / 2.0) * (x / 2.0);
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= half_sq / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stereo_wav(frames: &[(i16, i16)], rate: u32) -> Vec<u8> {
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut cursor = Cursor::new(Vec::new());
        let mut writer = hound::WavWriter::new(&mut cursor, spec).unwrap();
        for &(l, r) in frames {
            writer.write_sample(l).unwrap();
            writer.write_sample(r).unwrap();
        }
        writer.finalize().unwrap();
        cursor.into_inner()
    }

    #[test]
    fn zero_wav_decodes_to_zero_samples() {
        let w = Waveform::new(vec![0.0; 16000], 16000);
        let decoded = decode_audio(&encode_wav(&w), None).unwrap();
        assert_eq!(decoded.sample_rate, 16000);
        assert_eq!(decoded.len(), 16000);
        assert!(decoded.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn stereo_opposite_channels_average_to_zero() {
        let bytes = stereo_wav(&[(16384, -16384); 100], 8000);
        let w = decode_audio(&bytes, Some(AudioFormat::Wav)).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.samples.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn most_negative_code_is_minus_one() {
        let bytes = stereo_wav(&[(i16::MIN, i16::MIN)], 8000);
        let w = decode_audio(&bytes, None).unwrap();
        assert_eq!(w.samples, vec![-1.0]);
    }

    #[test]
    fn float_wav_is_unsupported() {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut cursor = Cursor::new(Vec::new());
        let mut writer = hound::WavWriter::new(&mut cursor, spec).unwrap();
        writer.write_sample(0.25f32).unwrap();
        writer.finalize().unwrap();
        let err = decode_audio(&cursor.into_inner(), None).unwrap_err();
        assert!(matches!(err, AudioError::UnsupportedFormat(_)), "{err:?}");
    }

    #[test]
    fn garbage_and_truncation() {
        assert!(matches!(decode_audio(b"OggS....", None), Err(AudioError::UnsupportedFormat(_))));
        let mut bytes = encode_wav(&Waveform::new(vec![0.1; 1000], 16000));
        bytes.truncate(30);
        assert!(matches!(decode_audio(&bytes, None), Err(AudioError::CorruptStream(_))));
        assert!(matches!(decode_audio(b"fLaC\0\0", None), Err(AudioError::CorruptStream(_))));
    }

    #[test]
    fn empty_wav_is_rejected() {
        let bytes = encode_wav(&Waveform::new(vec![], 16000));
        assert_eq!(decode_audio(&bytes, None), Err(AudioError::Empty));
    }

    #[test]
    fn sine_examples() {
        let w = synth_sine(440.0, 1.0, 16000, 0.5).unwrap();
        assert_eq!(w.len(), 16000);
        assert_eq!(w.samples[0], 0.0);

        assert!(matches!(synth_sine(4000.0, 0.5, 8000, 0.5), Err(AudioError::InvalidArgument(_))));
        assert!(matches!(synth_sine(100.0, 1.0, 16000, 0.0), Err(AudioError::InvalidArgument(_))));
        assert!(matches!(synth_sine(100.0, 1.0, 16000, 1.5), Err(AudioError::InvalidArgument(_))));

        let w = synth_sine(100.0, 0.01, 16000, 1.0).unwrap();
        assert_eq!(w.len(), 160);
        for (n, &s) in w.samples.iter().enumerate() {
            let expect = (2.0 * PI * 100.0 * n as f64 / 16000.0).sin();
            assert!((s as f64 - expect).abs() < 1e-6);
            assert!(s.abs() <= 1.0);
        }
    }

    #[test]
    fn speed_identity_and_lengths() {
        let w = synth_sine(440.0, 1.0, 16000, 0.5).unwrap();
        assert_eq!(speed_perturb(&w, 1.0).unwrap(), w);
        assert_eq!(speed_perturb(&w, 1.1).unwrap().len(), 14545);
        assert_eq!(speed_perturb(&w, 0.9).unwrap().len(), 17778);
        assert!(speed_perturb(&w, 0.4).is_err());
        assert!(speed_perturb(&w, 2.5).is_err());
    }

    #[test]
    fn kernel_is_interpolating() {
        let table = sinc_table();
        assert_eq!(kernel_lookup(table, 0.0), 1.0);
        for k in 1..10 {
            assert!(kernel_lookup(table, k as f64).abs() < 1e-12);
        }
        assert_eq!(kernel_lookup(table, SINC_ZERO_CROSSINGS as f64 + 1.0), 0.0);
    }

    #[test]
    fn bessel_reference_values() {
        assert_eq!(bessel_i0(0.0), 1.0);
        // I0(1) and I0(8.6) to 12 significant digits.
        assert!((bessel_i0(1.0) - 1.266_065_877_752_008).abs() < 1e-12);
        assert!((bessel_i0(8.6) / 750.461_159_563_166 - 1.0).abs() < 1e-12);
    }
}
