//! Log mel-band energy features and the LMEL feature file format.
//!
//! Framing uses 40 ms frames with a 50% hop; each frame is Hamming-windowed,
//! zero-padded to the next power of two, and its power spectrum is pooled by
//! triangular mel filters spanning 0 Hz to Nyquist (unit peak height, mel
//! scale `2595·log10(1 + f/700)`). Energies are floored at `1e-10` before
//! the natural log.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const N_MELS: usize = 40;
pub const FRAME_MS: f64 = 40.0;
pub const OVERLAP: f64 = 0.5;
pub const ENERGY_FLOOR: f64 = 1e-10;

const MAGIC: &[u8; 4] = b"LMEL";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Frame length and hop in samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Framing {
    pub frame_len: usize,
    pub hop: usize,
}

impl Framing {
    /// `frame = round(frame_ms · sr / 1000)`, `hop = floor(frame · (1 − overlap))`.
    pub fn new(sample_rate_hz: u32, frame_ms: f64, overlap: f64) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if !(frame_ms > 0.0) || !(0.0..1.0).contains(&overlap) {
            return Err(Error::Parameter(format!(
                "invalid framing: {frame_ms} ms with overlap {overlap}"
            )));
        }
        let frame_len = (frame_ms * sample_rate_hz as f64 / 1000.0).round() as usize;
        if frame_len == 0 {
            return Err(Error::Parameter("frame shorter than one sample".into()));
        }
        let hop = ((frame_len as f64 * (1.0 - overlap)).floor() as usize).max(1);
        Ok(Framing { frame_len, hop })
    }

    pub fn standard(sample_rate_hz: u32) -> Result<Self> {
        Self::new(sample_rate_hz, FRAME_MS, OVERLAP)
    }

    /// `floor((n − frame) / hop) + 1`; a trailing partial frame is dropped.
    pub fn frame_count(&self, n_samples: usize) -> Result<usize> {
        if n_samples < self.frame_len {
            return Err(Error::Contract(format!(
                "signal of {n_samples} samples is shorter than one {}-sample frame",
                self.frame_len
            )));
        }
        Ok((n_samples - self.frame_len) / self.hop + 1)
    }

    /// Number of samples spanned by `n_frames` frames.
    pub fn samples_for(&self, n_frames: usize) -> usize {
        self.frame_len + n_frames.saturating_sub(1) * self.hop
    }
}

/// Splits `samples` into overlapping frames.
pub fn frame_signal(samples: &[f32], framing: Framing) -> Result<Vec<&[f32]>> {
    let n = framing.frame_count(samples.len())?;
    Ok((0..n)
        .map(|i| &samples[i * framing.hop..i * framing.hop + framing.frame_len])
        .collect())
}

/// Cuts a clip into fixed-length segments; the last one is zero-padded.
pub fn segment_signal(samples: &[f32], sample_rate_hz: u32, segment_seconds: f64) -> Vec<Vec<f32>> {
    let len = ((segment_seconds * sample_rate_hz as f64).round() as usize).max(1);
    samples
        .chunks(len)
        .map(|chunk| {
            let mut seg = chunk.to_vec();
            seg.resize(len, 0.0);
            seg
        })
        .collect()
}

/// Frame-major matrix of natural-log mel energies, `data[frame * n_mels + mel]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub n_frames: usize,
    pub n_mels: usize,
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * n_mels {
            return Err(Error::Dimension(format!(
                "{n_frames}x{n_mels} feature matrix needs {} values, got {}",
                n_frames * n_mels,
                data.len()
            )));
        }
        Ok(FeatureMatrix {
            n_frames,
            n_mels,
            data,
        })
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_mels..(i + 1) * self.n_mels]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, self.n_frames as u32, self.n_mels as u32, 0] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Parses an LMEL buffer; `origin` is used in error messages.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::format(origin, "truncated LMEL header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(origin, "bad magic, expected LMEL"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != VERSION {
            return Err(Error::format(
                origin,
                format!("unsupported LMEL version {}", word(0)),
            ));
        }
        let (n_frames, n_mels) = (word(1) as usize, word(2) as usize);
        let payload = &bytes[HEADER_LEN..];
        let expected = n_frames
            .checked_mul(n_mels)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::format(origin, "LMEL dimensions overflow"))?;
        if payload.len() < expected {
            return Err(Error::format(
                origin,
                format!(
                    "truncated payload: header declares {n_frames}x{n_mels} values ({expected} bytes), found {}",
                    payload.len()
                ),
            ));
        }
        if payload.len() > expected {
            return Err(Error::format(origin, "trailing bytes after LMEL payload"));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(FeatureMatrix {
            n_frames,
            n_mels,
            data,
        })
    }
}

pub fn write_feature_file(fm: &FeatureMatrix, path: &Path) -> Result<()> {
    fs::write(path, fm.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_feature_file(path: &Path) -> Result<FeatureMatrix> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    FeatureMatrix::from_bytes(&bytes, path)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// A sparse triangular filter over FFT bins.
#[derive(Debug, Clone)]
struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Per-sample-rate precomputation (window and filterbank) plus the FFT plan.
pub struct MelExtractor {
    framing: Framing,
    n_fft: usize,
    sample_rate_hz: u32,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelExtractor {
    pub fn new(sample_rate_hz: u32, n_mels: usize) -> Result<Self> {
        Self::with_framing(Framing::standard(sample_rate_hz)?, sample_rate_hz, n_mels)
    }

    pub fn with_framing(framing: Framing, sample_rate_hz: u32, n_mels: usize) -> Result<Self> {
        if n_mels == 0 {
            return Err(Error::Parameter("n_mels must be at least 1".into()));
        }
        let n_fft = framing.frame_len.next_power_of_two();
        let len = framing.frame_len;
        let window = if len == 1 {
            vec![1.0]
        } else {
            (0..len)
                .map(|i| {
                    0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (len - 1) as f64).cos()
                })
                .collect()
        };
        let filters = Self::filterbank(n_mels, n_fft, sample_rate_hz);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MelExtractor {
            framing,
            n_fft,
            sample_rate_hz,
            window,
            filters,
            fft,
        })
    }

    fn filterbank(n_mels: usize, n_fft: usize, sr: u32) -> Vec<MelFilter> {
        let nyquist = sr as f64 / 2.0;
        let top = hz_to_mel(nyquist);
        let edges: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
            .collect();
        let n_bins = n_fft / 2 + 1;
        let bin_hz = sr as f64 / n_fft as f64;
        (0..n_mels)
            .map(|m| {
                let (lo, centre, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let mut first_bin = None;
                let mut weights = Vec::new();
                for k in 0..n_bins {
                    let f = k as f64 * bin_hz;
                    let w = if f >= lo && f <= centre && centre > lo {
                        (f - lo) / (centre - lo)
                    } else if f > centre && f <= hi && hi > centre {
                        (hi - f) / (hi - centre)
                    } else {
                        0.0
                    };
                    if w > 0.0 {
                        first_bin.get_or_insert(k);
                        weights.push(w);
                    } else if first_bin.is_some() {
                        break;
                    }
                }
                MelFilter {
                    first_bin: first_bin.unwrap_or(0),
                    weights,
                }
            })
            .collect()
    }

    pub fn framing(&self) -> Framing {
        self.framing
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn n_mels(&self) -> usize {
        self.filters.len()
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    /// Centre frequency of mel band `m` in Hz.
    pub fn band_centre_hz(&self, m: usize) -> f64 {
        let top = hz_to_mel(self.sample_rate_hz as f64 / 2.0);
        mel_to_hz(top * (m + 1) as f64 / (self.n_mels() + 1) as f64)
    }

    /// Log mel energies of already-framed audio.
    pub fn log_mel_energies(&self, frames: &[&[f32]]) -> Result<FeatureMatrix> {
        let n_mels = self.n_mels();
        let mut data = Vec::with_capacity(frames.len() * n_mels);
        let mut buf = vec![Complex::new(0.0, 0.0); self.n_fft];
        let mut power = vec![0.0f64; self.n_fft / 2 + 1];
        for frame in frames {
            if frame.len() != self.framing.frame_len {
                return Err(Error::Dimension(format!(
                    "frame of {} samples, extractor expects {}",
                    frame.len(),
                    self.framing.frame_len
                )));
            }
            for (i, slot) in buf.iter_mut().enumerate() {
                let re = if i < frame.len() {
                    frame[i] as f64 * self.window[i]
                } else {
                    0.0
                };
                *slot = Complex::new(re, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            for filter in &self.filters {
                let energy: f64 = filter
                    .weights
                    .iter()
                    .zip(&power[filter.first_bin..])
                    .map(|(w, p)| w * p)
                    .sum();
                data.push((energy + ENERGY_FLOOR).ln() as f32);
            }
        }
        FeatureMatrix::new(frames.len(), n_mels, data)
    }

    /// Frames and transforms a mono signal.
    pub fn extract(&self, samples: &[f32]) -> Result<FeatureMatrix> {
        let frames = frame_signal(samples, self.framing)?;
        self.log_mel_energies(&frames)
    }
}
