//! MFCC feature extraction.
//!
//! The frontend converts raw audio into the cepstral sequences consumed by
//! the speech encoder: pre-emphasis over the whole signal, 25 ms Hamming
//! windows every 10 ms, a power spectrum, 26 triangular mel filters from
//! 0 Hz to Nyquist, an orthonormal DCT-II keeping coefficients 1..=12, and
//! an appended log frame energy computed from the raw (un-emphasized)
//! samples. Silence is protected by a log floor rather than producing
//! `-inf`.

use std::path::Path;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::{Result, VgsError};

/// Mono audio samples with a sample rate.
#[derive(Debug, Clone)]
pub struct AudioSignal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl AudioSignal {
    /// Wraps samples, rejecting empty input, zero rates, and non-finite
    /// values.
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(VgsError::Invalid("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(VgsError::Invalid("signal has no samples".into()));
        }
        if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
            return Err(VgsError::Invalid(format!(
                "non-finite sample at index {i}"
            )));
        }
        Ok(AudioSignal {
            samples,
            sample_rate,
        })
    }

    pub fn duration_ms(&self) -> f64 {
        self.samples.len() as f64 * 1000.0 / self.sample_rate as f64
    }
}

/// MFCC frontend parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfccConfig {
    pub window_ms: u32,
    pub hop_ms: u32,
    /// Number of cepstral coefficients kept, starting at coefficient 1.
    pub n_cepstra: usize,
    pub n_mel_filters: usize,
    pub include_log_energy: bool,
    pub pre_emphasis: f64,
    /// Floor applied inside every log to keep silence finite.
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 25,
            hop_ms: 10,
            n_cepstra: 12,
            n_mel_filters: 26,
            include_log_energy: true,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop_ms == 0 || self.window_ms < self.hop_ms {
            return Err(VgsError::Invalid(format!(
                "window {} ms must be >= hop {} ms and hop must be positive",
                self.window_ms, self.hop_ms
            )));
        }
        if self.n_cepstra == 0 || self.n_cepstra >= self.n_mel_filters {
            return Err(VgsError::Invalid(format!(
                "need 0 < n_cepstra < n_mel_filters, got {} and {}",
                self.n_cepstra, self.n_mel_filters
            )));
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return Err(VgsError::Invalid(format!(
                "pre-emphasis {} outside [0, 1)",
                self.pre_emphasis
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(VgsError::Invalid("log floor must be positive".into()));
        }
        Ok(())
    }

    /// Feature dimension per frame.
    pub fn dim(&self) -> usize {
        self.n_cepstra + usize::from(self.include_log_energy)
    }

    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as u64 * self.window_ms as u64 / 1000) as usize
    }

    pub fn hop_samples(&self, sample_rate: u32) -> usize {
        (sample_rate as u64 * self.hop_ms as u64 / 1000) as usize
    }
}

/// A frame-by-coefficient MFCC matrix plus the hop that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MfccSequence {
    frames: Array2<f64>,
    pub frame_hop_ms: u32,
}

impl MfccSequence {
    /// Wraps a frames matrix, rejecting non-finite entries.
    pub fn from_frames(frames: Array2<f64>, frame_hop_ms: u32) -> Result<Self> {
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(VgsError::Invalid(
                "mfcc frames contain non-finite values".into(),
            ));
        }
        if frame_hop_ms == 0 {
            return Err(VgsError::Invalid("frame hop must be positive".into()));
        }
        Ok(MfccSequence {
            frames,
            frame_hop_ms,
        })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    /// Number of frames.
    pub fn len(&self) -> usize {
        self.frames.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.nrows() == 0
    }

    /// Coefficients per frame.
    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    /// Narrows every value to `f32` precision so container round-trips are
    /// bit-exact.
    pub fn quantized_to_f32(mut self) -> Self {
        self.frames.mapv_inplace(|v| v as f32 as f64);
        self
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let slice = self
            .frames
            .as_slice()
            .expect("frames are stored row-major");
        crate::containers::write_matrix(
            path,
            crate::containers::MAGIC_MFCC,
            self.frames.nrows(),
            self.frames.ncols(),
            slice,
        )
    }

    /// Loads a sequence saved with [`MfccSequence::save`]; the hop is not
    /// stored in the container and must be supplied by the caller.
    pub fn load(path: &Path, frame_hop_ms: u32) -> Result<Self> {
        let (rows, cols, data) =
            crate::containers::read_matrix(path, crate::containers::MAGIC_MFCC)?;
        let frames = Array2::from_shape_vec((rows, cols), data)
            .expect("read_matrix returns rows*cols values");
        MfccSequence::from_frames(frames, frame_hop_ms)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over FFT bins 0..=nfft/2, spanning 0 Hz to
/// Nyquist. Returns one weight row per filter.
///
/// Filter m rises linearly from corner m to corner m+1 and falls to corner
/// m+2, with the corners equally spaced on the mel scale; weights use the
/// exact bin center frequencies, so adjacent filters sum to one between the
/// first and last corners.
fn mel_filterbank(n_filters: usize, nfft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = nfft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let corners: Vec<f64> = (0..n_filters + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n_filters + 1) as f64))
        .collect();
    let bin_hz = |k: usize| k as f64 * sample_rate as f64 / nfft as f64;
    (0..n_filters)
        .map(|m| {
            let (lo, mid, hi) = (corners[m], corners[m + 1], corners[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = bin_hz(k);
                    if f >= lo && f <= mid && mid > lo {
                        (f - lo) / (mid - lo)
                    } else if f > mid && f <= hi && hi > mid {
                        (hi - f) / (hi - mid)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Computes MFCC frames for a signal.
///
/// Frame `t` covers samples `[t*hop, t*hop + window)`; the frame count is
/// `(len - window) / hop + 1`. Signals shorter than one window are an
/// error. Each output row holds cepstra 1..=n_cepstra followed by the log
/// total energy of the raw frame when enabled.
pub fn compute_mfcc(signal: &AudioSignal, config: &MfccConfig) -> Result<MfccSequence> {
    config.validate()?;
    if let Some(i) = signal.samples.iter().position(|v| !v.is_finite()) {
        return Err(VgsError::Invalid(format!(
            "non-finite sample at index {i}"
        )));
    }
    let win = config.window_samples(signal.sample_rate);
    let hop = config.hop_samples(signal.sample_rate);
    if win == 0 || hop == 0 {
        return Err(VgsError::Invalid(format!(
            "window/hop of {}/{} ms collapse to zero samples at {} Hz",
            config.window_ms, config.hop_ms, signal.sample_rate
        )));
    }
    let x = &signal.samples;
    if x.len() < win {
        return Err(VgsError::TooShort {
            got: x.len(),
            need: win,
            unit: "samples",
        });
    }
    let n_frames = (x.len() - win) / hop + 1;

    // Pre-emphasis over the whole signal; the first sample passes through.
    let mut emphasized = Vec::with_capacity(x.len());
    emphasized.push(x[0]);
    for t in 1..x.len() {
        emphasized.push(x[t] - config.pre_emphasis * x[t - 1]);
    }

    let nfft = win.next_power_of_two();
    let n_bins = nfft / 2 + 1;
    let hamming: Vec<f64> = (0..win)
        .map(|n| {
            if win == 1 {
                1.0
            } else {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos()
            }
        })
        .collect();
    let filters = mel_filterbank(config.n_mel_filters, nfft, signal.sample_rate);

    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(nfft);
    let mut buffer = vec![Complex::new(0.0, 0.0); nfft];

    let n_mel = config.n_mel_filters;
    let dim = config.dim();
    let dct_scale = (2.0 / n_mel as f64).sqrt();
    let mut out = Array2::zeros((n_frames, dim));

    for t in 0..n_frames {
        let start = t * hop;
        for (n, slot) in buffer.iter_mut().enumerate() {
            let v = if n < win {
                emphasized[start + n] * hamming[n]
            } else {
                0.0
            };
            *slot = Complex::new(v, 0.0);
        }
        fft.process(&mut buffer);
        let power: Vec<f64> = buffer[..n_bins].iter().map(|c| c.norm_sqr()).collect();

        let mut log_mel = vec![0.0f64; n_mel];
        for (m, filter) in filters.iter().enumerate() {
            let e: f64 = filter.iter().zip(&power).map(|(w, p)| w * p).sum();
            log_mel[m] = e.max(config.log_floor).ln();
        }
        for k in 1..=config.n_cepstra {
            let mut c = 0.0;
            for (m, &lm) in log_mel.iter().enumerate() {
                c += lm
                    * (std::f64::consts::PI * k as f64 * (m as f64 + 0.5) / n_mel as f64).cos();
            }
            out[[t, k - 1]] = dct_scale * c;
        }
        if config.include_log_energy {
            let energy: f64 = x[start..start + win].iter().map(|v| v * v).sum();
            out[[t, dim - 1]] = energy.max(config.log_floor).ln();
        }
    }

    MfccSequence::from_frames(out, config.hop_ms)
}

/// Reads a mono WAV file; multi-channel input is averaged down to mono.
/// Integer samples are scaled to [-1, 1].
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| VgsError::Invalid(format!("wav {}: {e}", path.display())))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let raw: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>(),
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
        }
    }
    .map_err(|e| VgsError::Invalid(format!("wav {}: {e}", path.display())))?;
    let frames = raw.len() / channels;
    let mono: Vec<f64> = (0..frames)
        .map(|i| raw[i * channels..(i + 1) * channels].iter().sum::<f64>() / channels as f64)
        .collect();
    AudioSignal::new(mono, spec.sample_rate)
}

/// Writes a signal as a 32-bit float mono WAV file.
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| VgsError::Invalid(format!("wav {}: {e}", path.display())))?;
    for &v in &signal.samples {
        writer
            .write_sample(v as f32)
            .map_err(|e| VgsError::Invalid(format!("wav {}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| VgsError::Invalid(format!("wav {}: {e}", path.display())))?;
    Ok(())
}
