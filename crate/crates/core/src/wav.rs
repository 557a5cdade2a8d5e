//! WAV reading/writing and sample-rate conversion.

use std::path::Path;

use rubato::{FftFixedInOut, Resampler};

use crate::dsp::Waveform;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, source: hound::Error) -> Error {
    match source {
        hound::Error::IoError(e) => Error::io(path, e),
        other => Error::Wav {
            path: path.to_path_buf(),
            source: other,
        },
    }
}

/// Reads an integer-PCM or float WAV into a [`Waveform`] with samples in
/// nominal `[-1, 1]`.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let mut reader = hound::WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    let n_ch = spec.channels as usize;
    if n_ch == 0 || n_ch > 2 {
        return Err(Error::format(
            path,
            format!("unsupported channel count {n_ch}"),
        ));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| wav_err(path, e))?,
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 * scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| wav_err(path, e))?
        }
    };
    if interleaved.is_empty() {
        return Err(Error::format(path, "no audio frames"));
    }
    let mut channels = vec![Vec::with_capacity(interleaved.len() / n_ch); n_ch];
    for frame in interleaved.chunks_exact(n_ch) {
        for (c, &v) in frame.iter().enumerate() {
            channels[c].push(v);
        }
    }
    Waveform::new(channels, spec.sample_rate)
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Writes `w` as a WAV file. 16-bit output is clipped to `[-1, 1]`.
pub fn write_wav(path: &Path, w: &Waveform, format: WavFormat) -> Result<()> {
    let spec = hound::WavSpec {
        channels: w.n_channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => hound::SampleFormat::Int,
            WavFormat::Float32 => hound::SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for i in 0..w.len() {
        for ch in w.channels() {
            let v = ch[i];
            match format {
                WavFormat::Pcm16 => {
                    let q = (v.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                    writer.write_sample(q)
                }
                WavFormat::Float32 => writer.write_sample(v as f32),
            }
            .map_err(|e| wav_err(path, e))?;
        }
    }
    writer.finalize().map_err(|e| wav_err(path, e))
}

/// Band-limited resampling to `target_rate`. Output length is
/// `round(len * target / source)`.
pub fn resample(w: &Waveform, target_rate: u32) -> Result<Waveform> {
    if w.sample_rate() == target_rate {
        return Ok(w.clone());
    }
    let n_ch = w.n_channels();
    let expected =
        (w.len() as f64 * target_rate as f64 / w.sample_rate() as f64).round() as usize;
    // FftFixedInOut delays by half its output block; keep that block even so
    // the delay is a whole number of samples.
    let (sr_in, sr_out) = (w.sample_rate() as usize, target_rate as usize);
    let min_block = 2 * sr_in / gcd(sr_in, sr_out);
    let block = min_block * 1024usize.div_ceil(min_block);
    let mut resampler = FftFixedInOut::<f64>::new(sr_in, sr_out, block, n_ch)
    .map_err(|e| Error::Resample(e.to_string()))?;
    let delay = resampler.output_delay();

    let mut out: Vec<Vec<f64>> = vec![Vec::with_capacity(expected + delay); n_ch];
    let mut pos = 0;
    let push = |out: &mut Vec<Vec<f64>>, block: Vec<Vec<f64>>| {
        for (o, b) in out.iter_mut().zip(block) {
            o.extend(b);
        }
    };
    while w.len() - pos >= resampler.input_frames_next() {
        let n = resampler.input_frames_next();
        let chunk: Vec<&[f64]> = w.channels().iter().map(|c| &c[pos..pos + n]).collect();
        let block = resampler
            .process(&chunk, None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        push(&mut out, block);
        pos += n;
    }
    if pos < w.len() {
        let rest: Vec<&[f64]> = w.channels().iter().map(|c| &c[pos..]).collect();
        let block = resampler
            .process_partial(Some(&rest), None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        push(&mut out, block);
    }
    while out[0].len() < expected + delay {
        let block = resampler
            .process_partial::<&[f64]>(None, None)
            .map_err(|e| Error::Resample(e.to_string()))?;
        push(&mut out, block);
    }
    let channels = out
        .into_iter()
        .map(|c| c[delay..delay + expected].to_vec())
        .collect();
    Waveform::new(channels, target_rate)
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}
