use std::path::Path;

use crate::error::{Error, Result};

/// Reads a PCM (8/16/24/32-bit) or float WAV file as mono samples in
/// `[−1, 1]`. Integer samples are scaled by `2^(bits−1)`; channels are
/// averaged.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    // Opening separates I/O failures; hound reports short reads as I/O too,
    // but past this point they mean a damaged file.
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let reader = hound::WavReader::new(std::io::BufReader::new(file))
        .map_err(|e| Error::format(path, format!("not a readable WAV file: {e}")))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format(path, "WAV declares zero channels"));
    }
    let bad = |e: hound::Error| Error::format(path, format!("corrupt WAV payload: {e}"));
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .collect::<Result<_, _>>()
            .map_err(bad)?,
        (hound::SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .into_samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<Result<_, _>>()
                .map_err(bad)?
        }
        (format, bits) => {
            return Err(Error::format(
                path,
                format!("unsupported WAV encoding {format:?} {bits}-bit"),
            ))
        }
    };
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    Ok((mono, spec.sample_rate))
}
