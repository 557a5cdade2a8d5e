//! Corpus construction: synthetic panned scenes, stereo ingest, 1 s chunking,
//! swap/flip augmentation, video-level splits, and the JSON-lines manifest.

use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{
    irm_from_magnitudes, log_compress, mixdown, stft_samples, MaskPair, Spectrogram, StftConfig,
    Waveform, DEFAULT_SAMPLE_RATE, IRM_EPS,
};
use crate::error::{Error, Result};
use crate::features::{
    concat_tracks, load_precomputed, save_precomputed, synthetic_position_features, upsample_nearest_from,
    FeatureProviderSpec, FeatureTrack, ProviderKind, VIDEO_FPS,
};
use crate::wav::{read_wav, resample, write_wav, WavFormat};

/// RMS level of rendered sources before panning. Equal energy per scene
/// keeps any one source type from dominating corpus-mean distances.
const SOURCE_RMS: f64 = 0.1;
/// Joint peak level after ingest normalization.
const INGEST_PEAK: f64 = 0.95;
/// Mean-square level below which audio counts as near-silent (-60 dBFS).
pub const NEAR_SILENT_POWER: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Sine { freq_hz: f64 },
    NoiseBand { lo_hz: f64, hi_hz: f64 },
    HarmonicStack { f0_hz: f64, n: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PanTrajectory {
    Constant { p: f64 },
    Linear { p0: f64, p1: f64 },
    /// `0.5 + 0.5 * sin(2 pi t / period_s + phase)`
    Sinusoid { period_s: f64, phase: f64 },
}

impl PanTrajectory {
    /// Pan position at time `t` of a clip lasting `duration` seconds.
    pub fn at(&self, t: f64, duration: f64) -> f64 {
        match *self {
            PanTrajectory::Constant { p } => p,
            PanTrajectory::Linear { p0, p1 } => p0 + (p1 - p0) * (t / duration).clamp(0.0, 1.0),
            PanTrajectory::Sinusoid { period_s, phase } => {
                0.5 + 0.5 * (2.0 * std::f64::consts::PI * t / period_s + phase).sin()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub source: Source,
    pub pan: PanTrajectory,
    pub duration_s: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s > 0.0) {
            return Err(Error::invalid("scene duration must be positive"));
        }
        let nyquist = DEFAULT_SAMPLE_RATE as f64 / 2.0;
        match self.source {
            Source::Sine { freq_hz } if !(freq_hz > 0.0 && freq_hz < nyquist) => {
                return Err(Error::invalid("sine frequency must be in (0, nyquist)"))
            }
            Source::NoiseBand { lo_hz, hi_hz } if !(0.0 <= lo_hz && lo_hz < hi_hz && hi_hz <= nyquist) => {
                return Err(Error::invalid("noise band must satisfy 0 <= lo < hi <= nyquist"))
            }
            Source::HarmonicStack { f0_hz, n } if !(f0_hz > 0.0 && n >= 1 && f0_hz < nyquist) => {
                return Err(Error::invalid("harmonic stack needs f0 in (0, nyquist) and n >= 1"))
            }
            _ => {}
        }
        match self.pan {
            PanTrajectory::Constant { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::invalid("pan values must lie in [0, 1]"))
            }
            PanTrajectory::Linear { p0, p1 }
                if !(0.0..=1.0).contains(&p0) || !(0.0..=1.0).contains(&p1) =>
            {
                Err(Error::invalid("pan values must lie in [0, 1]"))
            }
            PanTrajectory::Sinusoid { period_s, .. } if !(period_s > 0.0) => {
                Err(Error::invalid("sinusoid pan period must be positive"))
            }
            _ => Ok(()),
        }
    }

    pub fn n_samples(&self) -> usize {
        ((self.duration_s * DEFAULT_SAMPLE_RATE as f64).round() as usize).max(1)
    }

    pub fn n_video_frames(&self) -> usize {
        ((self.duration_s * VIDEO_FPS).round() as usize).max(1)
    }

    /// Pan trajectory sampled at the video frame rate.
    pub fn video_pan(&self) -> Vec<f64> {
        (0..self.n_video_frames())
            .map(|k| self.pan.at(k as f64 / VIDEO_FPS, self.duration_s))
            .collect()
    }
}

fn log_uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Draws a scene with a random source and a trajectory cycling through
/// constant, linear and sinusoidal kinds by `index`.
pub fn random_scene(index: usize, duration_s: f64, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let source = match rng.random_range(0..3) {
        0 => Source::Sine {
            freq_hz: log_uniform(&mut rng, 150.0, 4000.0),
        },
        1 => {
            let lo = log_uniform(&mut rng, 150.0, 2000.0);
            Source::NoiseBand {
                lo_hz: lo,
                hi_hz: lo * rng.random_range(1.5..4.0),
            }
        }
        _ => Source::HarmonicStack {
            f0_hz: log_uniform(&mut rng, 100.0, 500.0),
            n: rng.random_range(3..=8),
        },
    };
    let pan = match index % 3 {
        0 => PanTrajectory::Constant {
            p: rng.random_range(0.0..=1.0),
        },
        1 => PanTrajectory::Linear {
            p0: rng.random_range(0.0..=1.0),
            p1: rng.random_range(0.0..=1.0),
        },
        _ => PanTrajectory::Sinusoid {
            period_s: rng.random_range(10.0..20.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        },
    };
    SceneSpec {
        source,
        pan,
        duration_s,
        seed: rng.random(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One video: stereo audio plus its visual feature track.
#[derive(Debug, Clone)]
pub struct ClipRecord {
    pub id: String,
    pub stereo: Waveform,
    pub features: FeatureTrack,
    /// Embeddings of the mirrored video, when a precomputed provider has them.
    pub features_flipped: Option<FeatureTrack>,
    pub provider: FeatureProviderSpec,
    pub split: Split,
    /// Pan trajectory at the video frame rate (synthetic clips only).
    pub oracle_pan: Option<Vec<f64>>,
    pub near_silent: bool,
}

/// One ~1 s training chunk.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub clip_id: String,
    pub chunk_index: usize,
    /// `ln(1 + |X_M|)`, `[frames, bins]`.
    pub mix_logmag: Array2<f64>,
    /// Visual features at the spectrogram frame rate, `[frames, dim]`.
    pub features_aligned: Array2<f64>,
    pub features_flipped: Option<Array2<f64>>,
    pub target_masks: MaskPair,
    pub mix_spec: Spectrogram,
    /// Ground-truth `|X_L|`, `|X_R|`, kept for validation distances.
    pub target_mags: (Array2<f64>, Array2<f64>),
}

impl TrainingSample {
    pub fn n_frames(&self) -> usize {
        self.mix_logmag.nrows()
    }

    pub fn mix_mag(&self) -> Array2<f64> {
        self.mix_spec.magnitude()
    }
}

fn render_source(source: &Source, n: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut s: Vec<f64> = match *source {
        Source::Sine { freq_hz } => {
            let phase = rng.random_range(0.0..two_pi);
            (0..n)
                .map(|i| (two_pi * freq_hz * i as f64 / sr + phase).sin())
                .collect()
        }
        Source::HarmonicStack { f0_hz, n: harmonics } => {
            let partials: Vec<(f64, f64)> = (1..=harmonics)
                .filter(|k| *k as f64 * f0_hz < sr / 2.0)
                .map(|k| (k as f64 * f0_hz, rng.random_range(0.0..two_pi)))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / sr;
                    partials
                        .iter()
                        .enumerate()
                        .map(|(k, (f, ph))| (two_pi * f * t + ph).sin() / (k + 1) as f64)
                        .sum()
                })
                .collect()
        }
        Source::NoiseBand { lo_hz, hi_hz } => {
            let mut buf: Vec<Complex64> = (0..n)
                .map(|_| Complex64::new(StandardNormal.sample(rng), 0.0))
                .collect();
            let mut planner = FftPlanner::<f64>::new();
            planner.plan_fft_forward(n).process(&mut buf);
            for (k, v) in buf.iter_mut().enumerate() {
                let f = k.min(n - k) as f64 * sr / n as f64;
                if f < lo_hz || f > hi_hz {
                    *v = Complex64::new(0.0, 0.0);
                }
            }
            planner.plan_fft_inverse(n).process(&mut buf);
            buf.iter().map(|v| v.re).collect()
        }
    };
    let rms = (s.iter().map(|v| v * v).sum::<f64>() / s.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        let g = SOURCE_RMS / rms;
        s.iter_mut().for_each(|v| *v *= g);
    }
    s
}

/// Renders a single source with constant-power panning:
/// `x_L = cos(theta) s`, `x_R = sin(theta) s`, `theta = pan * pi / 2`.
pub fn synth_scene(id: &str, spec: &SceneSpec, feature_dim: usize) -> Result<ClipRecord> {
    spec.validate()?;
    let sr = DEFAULT_SAMPLE_RATE as f64;
    let n = spec.n_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = render_source(&spec.source, n, sr, &mut rng);
    let (mut left, mut right) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for (i, v) in s.iter().enumerate() {
        let theta = spec.pan.at(i as f64 / sr, spec.duration_s) * std::f64::consts::FRAC_PI_2;
        left.push(theta.cos() * v);
        right.push(theta.sin() * v);
    }
    let pan = spec.video_pan();
    let features = synthetic_position_features(&pan, feature_dim)?;
    Ok(ClipRecord {
        id: id.to_string(),
        stereo: Waveform::stereo(left, right, DEFAULT_SAMPLE_RATE)?,
        features,
        features_flipped: None,
        provider: FeatureProviderSpec::synthetic(feature_dim),
        split: Split::Train,
        oracle_pan: Some(pan),
        near_silent: false,
    })
}

/// Features attached to an ingested recording.
#[derive(Debug, Clone)]
pub struct ClipFeatures {
    pub track: FeatureTrack,
    pub flipped: Option<FeatureTrack>,
    pub provider: FeatureProviderSpec,
}

impl ClipFeatures {
    /// Loads feature streams and concatenates them in the given order
    /// (flow first, then RGB, for two-stream embeddings).
    pub fn load(
        paths: &[PathBuf],
        flipped_paths: Option<&[PathBuf]>,
        kind: ProviderKind,
        expected_dim: Option<usize>,
    ) -> Result<Self> {
        let load_all = |paths: &[PathBuf]| -> Result<FeatureTrack> {
            let mut iter = paths.iter();
            let first = iter
                .next()
                .ok_or_else(|| Error::invalid("clip lists no feature files"))?;
            let mut track = load_precomputed(first, None)?;
            for p in iter {
                track = concat_tracks(&track, &load_precomputed(p, None)?)?;
            }
            if let Some(d) = expected_dim {
                if track.dim() != d {
                    return Err(Error::format(
                        first,
                        format!("dim mismatch: features have {}, dataset expects {d}", track.dim()),
                    ));
                }
            }
            Ok(track)
        };
        let track = load_all(paths)?;
        let flipped = flipped_paths.map(load_all).transpose()?;
        let provider = match kind {
            ProviderKind::SyntheticPosition => FeatureProviderSpec::synthetic(track.dim()),
            ProviderKind::Precomputed => {
                FeatureProviderSpec::precomputed(track.dim(), flipped.is_some())
            }
        };
        Ok(Self {
            track,
            flipped,
            provider,
        })
    }
}

/// Reads a stereo recording, resamples it to 44.1 kHz and applies one peak
/// gain to both channels so interaural level differences survive.
pub fn ingest_stereo(path: &Path, id: &str, features: ClipFeatures) -> Result<ClipRecord> {
    let raw = read_wav(path)?;
    if !raw.is_stereo() {
        return Err(Error::invalid(format!(
            "{}: stereo required, file has {} channel(s)",
            path.display(),
            raw.n_channels()
        )));
    }
    let audio = resample(&raw, DEFAULT_SAMPLE_RATE)?;
    let near_silent = audio.mean_square() < NEAR_SILENT_POWER;
    let peak = audio.peak();
    let stereo = if peak > 0.0 {
        audio.scaled(INGEST_PEAK / peak)
    } else {
        audio
    };
    let span = features.track.duration_s();
    if (span - stereo.duration_s()).abs() > 1.0 / features.track.fps() + 1e-9 {
        return Err(Error::invalid(format!(
            "{id}: audio lasts {:.3} s but features span {:.3} s",
            stereo.duration_s(),
            span
        )));
    }
    Ok(ClipRecord {
        id: id.to_string(),
        stereo,
        features: features.track,
        features_flipped: features.flipped,
        provider: features.provider,
        split: Split::Train,
        oracle_pan: None,
        near_silent,
    })
}

fn chunk_len(chunk_s: f64, sample_rate: u32) -> usize {
    (chunk_s * sample_rate as f64).round() as usize
}

/// Number of whole chunks in a clip.
pub fn n_chunks(clip: &ClipRecord, chunk_s: f64) -> usize {
    let len = chunk_len(chunk_s, clip.stereo.sample_rate());
    if len == 0 {
        0
    } else {
        clip.stereo.len() / len
    }
}

/// True if chunk `k` of `clip` falls below the near-silence threshold.
pub fn chunk_is_silent(clip: &ClipRecord, chunk_s: f64, k: usize) -> bool {
    if clip.near_silent {
        return true;
    }
    let len = chunk_len(chunk_s, clip.stereo.sample_rate());
    let (l, r) = (clip.stereo.channel(0), clip.stereo.channel(1));
    let power: f64 = (k * len..(k + 1) * len)
        .map(|i| (l[i] + r[i]).powi(2))
        .sum::<f64>()
        / len as f64;
    power < NEAR_SILENT_POWER
}

/// Builds the training tensors for chunk `k` of `clip`.
pub fn make_sample(
    clip: &ClipRecord,
    cfg: &StftConfig,
    chunk_s: f64,
    k: usize,
) -> Result<TrainingSample> {
    cfg.validate()?;
    let sr = clip.stereo.sample_rate();
    let len = chunk_len(chunk_s, sr);
    if k >= n_chunks(clip, chunk_s) {
        return Err(Error::invalid(format!("chunk {k} out of range for {}", clip.id)));
    }
    let chunk = clip.stereo.slice(k * len, (k + 1) * len)?;
    let mix = mixdown(&chunk)?;
    let mix_spec = stft_samples(mix.channel(0), cfg);
    let xl = stft_samples(chunk.channel(0), cfg).magnitude();
    let xr = stft_samples(chunk.channel(1), cfg).magnitude();
    let target_masks = irm_from_magnitudes(&xl, &xr, IRM_EPS);
    let mix_logmag = log_compress(&mix_spec.magnitude())?;
    let frames = mix_spec.n_frames();
    let fps = cfg.frame_rate(sr);
    let start = (k * len) as f64 / sr as f64;
    let align = |t: &FeatureTrack| -> Result<Array2<f64>> {
        Ok(upsample_nearest_from(t, frames, fps, start)?.into_vectors())
    };
    Ok(TrainingSample {
        clip_id: clip.id.clone(),
        chunk_index: k,
        mix_logmag,
        features_aligned: align(&clip.features)?,
        features_flipped: clip.features_flipped.as_ref().map(align).transpose()?,
        target_masks,
        mix_spec,
        target_mags: (xl, xr),
    })
}

/// Splits a clip into non-overlapping chunks, dropping near-silent ones.
pub fn make_samples(
    clip: &ClipRecord,
    cfg: &StftConfig,
    chunk_s: f64,
) -> Result<Vec<TrainingSample>> {
    let n = n_chunks(clip, chunk_s);
    if n == 0 {
        return Err(Error::invalid(format!(
            "{}: clip of {:.3} s is shorter than one {chunk_s} s chunk",
            clip.id,
            clip.stereo.duration_s()
        )));
    }
    (0..n)
        .filter(|&k| !chunk_is_silent(clip, chunk_s, k))
        .map(|k| make_sample(clip, cfg, chunk_s, k))
        .collect()
}

/// Exchanges left/right targets and mirrors the features. The mixture is
/// untouched since `x_L + x_R` is swap-invariant.
pub fn swap_flip(sample: &TrainingSample, provider: &FeatureProviderSpec) -> Result<TrainingSample> {
    if !provider.flip_supported {
        return Err(Error::invalid(
            "flip requested but the feature provider cannot mirror features",
        ));
    }
    let mut out = sample.clone();
    out.target_masks = sample.target_masks.swapped();
    out.target_mags = (sample.target_mags.1.clone(), sample.target_mags.0.clone());
    match provider.kind {
        ProviderKind::SyntheticPosition => {
            out.features_aligned = sample.features_aligned.mapv(|v| -v);
        }
        ProviderKind::Precomputed => {
            let flipped = sample.features_flipped.clone().ok_or_else(|| {
                Error::invalid("provider claims flip support but sample has no mirrored features")
            })?;
            out.features_flipped = Some(sample.features_aligned.clone());
            out.features_aligned = flipped;
        }
    }
    Ok(out)
}

/// With probability `p`, applies [`swap_flip`].
pub fn augment_swap_flip<R: Rng + ?Sized>(
    sample: &TrainingSample,
    provider: &FeatureProviderSpec,
    p: f64,
    rng: &mut R,
) -> Result<TrainingSample> {
    if p > 0.0 && !provider.flip_supported {
        return Err(Error::invalid(
            "augmentation enabled but the feature provider cannot mirror features",
        ));
    }
    if p > 0.0 && rng.random::<f64>() < p {
        swap_flip(sample, provider)
    } else {
        Ok(sample.clone())
    }
}

/// Assigns train/test per video id. Ids are sorted before the seeded shuffle
/// so the result does not depend on input order.
///
/// Seeds are grouped into blocks of `ceil(n / n_test)`; a block shares one
/// shuffle and each seed in it holds out a different slice, so every video is
/// held out by some seed in any block.
pub fn assign_splits(ids: &[String], ratio: f64, seed: u64) -> Result<Vec<Split>> {
    if ids.len() < 2 {
        return Err(Error::invalid("at least 2 videos are needed to split"));
    }
    if !(0.0 < ratio && ratio < 1.0) {
        return Err(Error::invalid("split ratio must be in (0, 1)"));
    }
    let n = ids.len();
    let n_train = ((n as f64 * ratio).round() as usize).clamp(1, n - 1);
    let n_test = n - n_train;
    let folds = n.div_ceil(n_test) as u64;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ids[a].cmp(&ids[b]));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed / folds));
    // The last fold may overhang; wrap around so it stays n_test long.
    let start = (seed % folds) as usize * n_test;
    let mut splits = vec![Split::Train; n];
    for j in 0..n_test {
        splits[order[(start + j) % n]] = Split::Test;
    }
    Ok(splits)
}

/// Video-level train/test split.
pub fn split_by_video(
    clips: Vec<ClipRecord>,
    ratio: f64,
    seed: u64,
) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
    let splits = assign_splits(&ids, ratio, seed)?;
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (mut clip, split) in clips.into_iter().zip(splits) {
        clip.split = split;
        match split {
            Split::Train => train.push(clip),
            Split::Test => test.push(clip),
        }
    }
    Ok((train, test))
}

/// Indexed access to training samples, built eagerly or on demand.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn get(&self, i: usize) -> Result<TrainingSample>;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Vec<TrainingSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, i: usize) -> Result<TrainingSample> {
        Ok(self[i].clone())
    }
}

/// Lazily materialized chunks of a clip collection.
pub struct ChunkedCorpus<'a> {
    clips: &'a [ClipRecord],
    cfg: StftConfig,
    chunk_s: f64,
    index: Vec<(usize, usize)>,
}

impl<'a> ChunkedCorpus<'a> {
    pub fn new(clips: &'a [ClipRecord], cfg: StftConfig, chunk_s: f64) -> Result<Self> {
        cfg.validate()?;
        let mut index = Vec::new();
        for (c, clip) in clips.iter().enumerate() {
            for k in 0..n_chunks(clip, chunk_s) {
                if !chunk_is_silent(clip, chunk_s, k) {
                    index.push((c, k));
                }
            }
        }
        Ok(Self {
            clips,
            cfg,
            chunk_s,
            index,
        })
    }

    /// Feature provider shared by the corpus. Mixed providers are rejected.
    pub fn provider(&self) -> Result<FeatureProviderSpec> {
        let first = self
            .clips
            .first()
            .ok_or_else(|| Error::invalid("empty corpus"))?
            .provider;
        if self.clips.iter().any(|c| c.provider != first) {
            return Err(Error::invalid("corpus mixes feature providers"));
        }
        Ok(first)
    }
}

impl SampleSource for ChunkedCorpus<'_> {
    fn len(&self) -> usize {
        self.index.len()
    }
    fn get(&self, i: usize) -> Result<TrainingSample> {
        let (c, k) = self.index[i];
        make_sample(&self.clips[c], &self.cfg, self.chunk_s, k)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleMeta {
    /// Pan at the video frame rate.
    pub pan: Vec<f64>,
    pub scene: SceneSpec,
}

/// One line of the corpus manifest. Paths are relative to the manifest's
/// directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub audio_path: String,
    pub feature_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flipped_feature_paths: Option<Vec<String>>,
    #[serde(default = "default_provider")]
    pub provider: ProviderKind,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleMeta>,
}

fn default_provider() -> ProviderKind {
    ProviderKind::Precomputed
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line)
            .map_err(|e| Error::format(path, format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for rec in records {
        let line = serde_json::to_string(rec).expect("manifest record serializes");
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Loads one manifest record into a clip.
pub fn load_clip(
    base: &Path,
    rec: &ManifestRecord,
    expected_dim: Option<usize>,
) -> Result<ClipRecord> {
    let paths: Vec<PathBuf> = rec.feature_paths.iter().map(|p| resolve(base, p)).collect();
    let flipped: Option<Vec<PathBuf>> = rec
        .flipped_feature_paths
        .as_ref()
        .map(|v| v.iter().map(|p| resolve(base, p)).collect());
    let features = ClipFeatures::load(&paths, flipped.as_deref(), rec.provider, expected_dim)?;
    let mut clip = ingest_stereo(&resolve(base, &rec.audio_path), &rec.id, features)?;
    clip.split = rec.split;
    clip.oracle_pan = rec.oracle.as_ref().map(|o| o.pan.clone());
    Ok(clip)
}

/// Loads every clip listed in a manifest.
pub fn load_corpus(manifest: &Path, expected_dim: Option<usize>) -> Result<Vec<ClipRecord>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .iter()
        .map(|rec| load_clip(base, rec, expected_dim))
        .collect()
}

pub const MANIFEST_NAME: &str = "manifest.jsonl";

/// `n` random scenes with video-level splits. A single clip goes to training.
pub fn synthetic_corpus(
    n: usize,
    duration_s: f64,
    seed: u64,
    feature_dim: usize,
    train_ratio: f64,
) -> Result<Vec<(ClipRecord, SceneSpec)>> {
    if n == 0 {
        return Err(Error::invalid("nothing to generate: clip count is 0"));
    }
    let mut out = (0..n)
        .map(|i| {
            let spec = random_scene(i, duration_s, seed);
            Ok((synth_scene(&format!("scene_{i:05}"), &spec, feature_dim)?, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    if n >= 2 {
        let ids: Vec<String> = out.iter().map(|(c, _)| c.id.clone()).collect();
        for ((clip, _), split) in out.iter_mut().zip(assign_splits(&ids, train_ratio, seed)?) {
            clip.split = split;
        }
    }
    Ok(out)
}

/// Writes `audio/<id>.wav` (float), `features/<id>.feat` and the manifest
/// into `out_dir`; returns the manifest path.
pub fn write_synthetic_corpus(
    out_dir: &Path,
    n: usize,
    duration_s: f64,
    seed: u64,
    feature_dim: usize,
    train_ratio: f64,
) -> Result<PathBuf> {
    let corpus = synthetic_corpus(n, duration_s, seed, feature_dim, train_ratio)?;
    for sub in ["audio", "features"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(corpus.len());
    for (clip, scene) in &corpus {
        let audio = format!("audio/{}.wav", clip.id);
        let feat = format!("features/{}.feat", clip.id);
        write_wav(&out_dir.join(&audio), &clip.stereo, WavFormat::Float32)?;
        save_precomputed(&out_dir.join(&feat), &clip.features)?;
        records.push(ManifestRecord {
            id: clip.id.clone(),
            audio_path: audio,
            feature_paths: vec![feat],
            flipped_feature_paths: None,
            provider: ProviderKind::SyntheticPosition,
            split: clip.split,
            oracle: Some(OracleMeta {
                pan: clip.oracle_pan.clone().unwrap_or_default(),
                scene: *scene,
            }),
        });
    }
    let manifest = out_dir.join(MANIFEST_NAME);
    write_manifest(&manifest, &records)?;
    Ok(manifest)
}

/// Per-frame agreement between a clip's ratio masks and its constant-power
/// pan oracle.
#[derive(Debug, Clone)]
pub struct OracleCheck {
    pub max_error: f64,
    pub checked_bins: usize,
}

/// Compares per-frame ratio masks with `(cos theta, sin theta)` at every bin
/// within `floor_db` of the frame's loudest mixture bin.
pub fn oracle_check(clip: &ClipRecord, cfg: &StftConfig, floor_db: f64) -> Result<OracleCheck> {
    let pan = clip
        .oracle_pan
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("{}: no oracle pan", clip.id)))?;
    let (l, r) = clip.stereo.require_stereo()?;
    let xl = stft_samples(l, cfg).magnitude();
    let xr = stft_samples(r, cfg).magnitude();
    let masks = irm_from_magnitudes(&xl, &xr, IRM_EPS);
    let mix = mixdown(&clip.stereo)?;
    let xm = stft_samples(mix.channel(0), cfg).magnitude();
    let fps = cfg.frame_rate(clip.stereo.sample_rate());
    let ratio = 10f64.powf(-floor_db / 20.0);

    let mut max_error = 0.0f64;
    let mut checked = 0;
    for t in 0..xm.nrows() {
        // Time-varying pans are compared against the pan at the frame centre.
        let p = interp_pan(pan, t as f64 / fps);
        let theta = p * std::f64::consts::FRAC_PI_2;
        let row = xm.row(t);
        let peak = row.iter().cloned().fold(0.0, f64::max);
        if peak <= 0.0 {
            continue;
        }
        for f in 0..row.len() {
            if row[f] >= peak * ratio {
                let e = (masks.left[[t, f]] - theta.cos())
                    .abs()
                    .max((masks.right[[t, f]] - theta.sin()).abs());
                max_error = max_error.max(e);
                checked += 1;
            }
        }
    }
    Ok(OracleCheck {
        max_error,
        checked_bins: checked,
    })
}

/// Linear interpolation of a video-rate pan track at time `t`.
/// Bins within this many dB of the frame peak are checked for constant pans.
pub const ORACLE_FLOOR_DB: f64 = 40.0;
pub const ORACLE_TOL: f64 = 0.02;
/// A moving source changes gain inside each analysis window, so masks only
/// approximate the frame-centre pan; weak leakage bins are skipped.
pub const MOVING_ORACLE_FLOOR_DB: f64 = 20.0;
pub const MOVING_ORACLE_TOL: f64 = 0.1;

/// `(floor_db, tolerance)` for a clip's oracle pan.
pub fn oracle_bounds(pan: &[f64]) -> (f64, f64) {
    let constant = pan.windows(2).all(|w| w[0] == w[1]);
    if constant {
        (ORACLE_FLOOR_DB, ORACLE_TOL)
    } else {
        (MOVING_ORACLE_FLOOR_DB, MOVING_ORACLE_TOL)
    }
}

/// Linear interpolation of the video-rate pan; the segment after the last
/// video frame is extrapolated from the final two frames.
fn interp_pan(pan: &[f64], t: f64) -> f64 {
    if pan.len() == 1 {
        return pan[0];
    }
    let x = (t * VIDEO_FPS).max(0.0);
    let i = (x.floor() as usize).min(pan.len() - 2);
    let w = x - i as f64;
    (pan[i] * (1.0 - w) + pan[i + 1] * w).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{compute_irm, stft};

    fn scene(pan: PanTrajectory, source: Source, duration_s: f64) -> SceneSpec {
        SceneSpec {
            source,
            pan,
            duration_s,
            seed: 42,
        }
    }

    fn energetic_bins(clip: &ClipRecord, cfg: &StftConfig) -> (MaskPair, Vec<(usize, usize)>) {
        let l = Waveform::mono(clip.stereo.channel(0).to_vec(), 44_100).unwrap();
        let r = Waveform::mono(clip.stereo.channel(1).to_vec(), 44_100).unwrap();
        let m = compute_irm(&stft(&l, cfg).unwrap(), &stft(&r, cfg).unwrap(), IRM_EPS).unwrap();
        let mix = stft(&mixdown(&clip.stereo).unwrap(), cfg).unwrap().magnitude();
        let mut bins = Vec::new();
        for t in 0..mix.nrows() {
            let peak = mix.row(t).iter().cloned().fold(0.0, f64::max);
            for f in 0..mix.ncols() {
                if mix[[t, f]] >= peak * 0.01 {
                    bins.push((t, f));
                }
            }
        }
        (m, bins)
    }

    #[test]
    fn center_pan_splits_equally() {
        let spec = scene(PanTrajectory::Constant { p: 0.5 }, Source::Sine { freq_hz: 440.0 }, 1.0);
        let clip = synth_scene("c", &spec, 8).unwrap();
        for i in 0..clip.stereo.len() {
            assert!((clip.stereo.channel(0)[i] - clip.stereo.channel(1)[i]).abs() < 1e-15);
        }
        let (m, bins) = energetic_bins(&clip, &StftConfig::default());
        for (t, f) in bins {
            assert!((m.left[[t, f]] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
            assert!((m.right[[t, f]] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        }
    }

    #[test]
    fn hard_left_has_silent_right() {
        let spec = scene(
            PanTrajectory::Constant { p: 0.0 },
            Source::NoiseBand { lo_hz: 200.0, hi_hz: 4000.0 },
            1.0,
        );
        let clip = synth_scene("l", &spec, 8).unwrap();
        assert!(clip.stereo.channel(1).iter().all(|&v| v == 0.0));
        let (m, bins) = energetic_bins(&clip, &StftConfig::default());
        for (t, f) in bins {
            assert!((m.left[[t, f]] - 1.0).abs() < 1e-6);
            assert_eq!(m.right[[t, f]], 0.0);
        }
    }

    #[test]
    fn quarter_pan_irm_matches_closed_form() {
        let spec = scene(PanTrajectory::Constant { p: 0.25 }, Source::Sine { freq_hz: 1000.0 }, 1.0);
        let clip = synth_scene("q", &spec, 8).unwrap();
        let cfg = StftConfig::default();
        let (m, _) = energetic_bins(&clip, &cfg);
        let bin = (1000.0f64 * 2048.0 / 44_100.0).round() as usize;
        let (cl, cr) = ((std::f64::consts::PI / 8.0).cos(), (std::f64::consts::PI / 8.0).sin());
        assert!((cl - 0.924).abs() < 1e-3 && (cr - 0.383).abs() < 1e-3);
        for t in 0..m.left.nrows() {
            assert!((m.left[[t, bin]] - cl).abs() < 0.02);
            assert!((m.right[[t, bin]] - cr).abs() < 0.02);
        }
    }

    #[test]
    fn scene_validation() {
        let bad = scene(PanTrajectory::Constant { p: 1.5 }, Source::Sine { freq_hz: 440.0 }, 1.0);
        assert!(synth_scene("x", &bad, 8).is_err());
        let bad = scene(PanTrajectory::Constant { p: 0.5 }, Source::Sine { freq_hz: 440.0 }, 0.0);
        assert!(synth_scene("x", &bad, 8).is_err());
    }

    #[test]
    fn feature_span_matches_audio() {
        let spec = scene(
            PanTrajectory::Sinusoid { period_s: 3.0, phase: 0.2 },
            Source::HarmonicStack { f0_hz: 220.0, n: 6 },
            2.5,
        );
        let clip = synth_scene("s", &spec, 16).unwrap();
        assert!((clip.features.duration_s() - clip.stereo.duration_s()).abs() <= 0.1);
        assert_eq!(clip.features.dim(), 16);
    }

    #[test]
    fn chunking_counts_and_shapes() {
        let spec = scene(PanTrajectory::Linear { p0: 0.0, p1: 1.0 }, Source::Sine { freq_hz: 500.0 }, 5.0);
        let clip = synth_scene("k", &spec, 8).unwrap();
        let cfg = StftConfig::default();
        let samples = make_samples(&clip, &cfg, 1.0).unwrap();
        assert_eq!(samples.len(), 5);
        for s in &samples {
            assert_eq!(s.mix_logmag.dim(), (101, 1025));
            assert_eq!(s.features_aligned.dim(), (101, 8));
            assert_eq!(s.target_masks.dim(), (101, 1025));
        }
        let short = synth_scene(
            "short",
            &scene(PanTrajectory::Constant { p: 0.5 }, Source::Sine { freq_hz: 500.0 }, 0.5),
            8,
        )
        .unwrap();
        assert!(make_samples(&short, &cfg, 1.0).is_err());
    }

    #[test]
    fn hard_left_chunk_targets_have_empty_right_mask() {
        let spec = scene(
            PanTrajectory::Constant { p: 0.0 },
            Source::HarmonicStack { f0_hz: 300.0, n: 5 },
            2.0,
        );
        let clip = synth_scene("hl", &spec, 8).unwrap();
        let s = &make_samples(&clip, &StftConfig::default(), 1.0).unwrap()[1];
        assert!(s.target_masks.right.iter().all(|&v| v < 1e-6));
    }

    #[test]
    fn silent_chunks_are_dropped() {
        let spec = scene(PanTrajectory::Constant { p: 0.3 }, Source::Sine { freq_hz: 500.0 }, 3.0);
        let mut clip = synth_scene("z", &spec, 8).unwrap();
        let mut ch = clip.stereo.clone().into_channels();
        for c in ch.iter_mut() {
            c[44_100..88_200].iter_mut().for_each(|v| *v = 0.0);
        }
        clip.stereo = Waveform::new(ch, 44_100).unwrap();
        let samples = make_samples(&clip, &StftConfig::default(), 1.0).unwrap();
        let idx: Vec<usize> = samples.iter().map(|s| s.chunk_index).collect();
        assert_eq!(idx, vec![0, 2]);
    }

    fn one_sample(pan: f64) -> (TrainingSample, FeatureProviderSpec) {
        let spec = scene(PanTrajectory::Constant { p: pan }, Source::Sine { freq_hz: 700.0 }, 1.0);
        let clip = synth_scene("a", &spec, 8).unwrap();
        let p = clip.provider;
        (make_samples(&clip, &StftConfig::default(), 1.0).unwrap().remove(0), p)
    }

    #[test]
    fn swap_flip_is_an_involution() {
        let (s, provider) = one_sample(0.2);
        let twice = swap_flip(&swap_flip(&s, &provider).unwrap(), &provider).unwrap();
        assert_eq!(twice.target_masks, s.target_masks);
        assert_eq!(twice.features_aligned, s.features_aligned);
        assert_eq!(twice.mix_logmag, s.mix_logmag);
    }

    #[test]
    fn hard_left_becomes_hard_right() {
        let (s, provider) = one_sample(0.0);
        let f = swap_flip(&s, &provider).unwrap();
        assert_eq!(f.target_masks.left, s.target_masks.right);
        assert_eq!(f.target_masks.right, s.target_masks.left);
        assert!(f.features_aligned.column(0).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_probability_is_identity_and_unsupported_flip_errors() {
        let (s, provider) = one_sample(0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let same = augment_swap_flip(&s, &provider, 0.0, &mut rng).unwrap();
        assert_eq!(same.target_masks, s.target_masks);
        assert_eq!(same.features_aligned, s.features_aligned);

        let fixed = FeatureProviderSpec::precomputed(8, false);
        assert!(swap_flip(&s, &fixed).is_err());
        assert!(augment_swap_flip(&s, &fixed, 0.5, &mut rng).is_err());
        assert!(augment_swap_flip(&s, &fixed, 0.0, &mut rng).is_ok());
    }

    #[test]
    fn precomputed_flip_swaps_embedding_sets() {
        let (mut s, _) = one_sample(0.3);
        let mirrored = s.features_aligned.mapv(|v| v * 3.0 + 1.0);
        s.features_flipped = Some(mirrored.clone());
        let provider = FeatureProviderSpec::precomputed(8, true);
        let f = swap_flip(&s, &provider).unwrap();
        assert_eq!(f.features_aligned, mirrored);
        let back = swap_flip(&f, &provider).unwrap();
        assert_eq!(back.features_aligned, s.features_aligned);
    }

    #[test]
    fn split_counts_and_determinism() {
        let ids: Vec<String> = (0..10).map(|i| format!("v{i}")).collect();
        let a = assign_splits(&ids, 0.9, 3).unwrap();
        assert_eq!(a.iter().filter(|s| **s == Split::Train).count(), 9);
        assert_eq!(a, assign_splits(&ids, 0.9, 3).unwrap());
        assert!(assign_splits(&ids[..1], 0.9, 3).is_err());
    }

    #[test]
    fn every_video_reaches_test_across_seeds() {
        let ids: Vec<String> = (0..100).map(|i| format!("video-{i:03}")).collect();
        let mut seen = vec![false; ids.len()];
        for seed in 0..50 {
            for (i, s) in assign_splits(&ids, 0.9, seed).unwrap().iter().enumerate() {
                if *s == Split::Test {
                    seen[i] = true;
                }
            }
        }
        let missing: Vec<usize> = (0..ids.len()).filter(|&i| !seen[i]).collect();
        assert!(missing.is_empty(), "never held out: {missing:?}");
    }

    #[test]
    fn oracle_check_flags_swapped_channels() {
        let spec = scene(PanTrajectory::Constant { p: 0.15 }, Source::Sine { freq_hz: 900.0 }, 1.0);
        let clip = synth_scene("o", &spec, 8).unwrap();
        let cfg = StftConfig::default();
        let ok = oracle_check(&clip, &cfg, 40.0).unwrap();
        assert!(ok.max_error < 0.02 && ok.checked_bins > 0);
        let mut bad = clip.clone();
        bad.stereo = clip.stereo.swapped();
        assert!(oracle_check(&bad, &cfg, 40.0).unwrap().max_error > 0.5);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let rec = ManifestRecord {
            id: "a".into(),
            audio_path: "a.wav".into(),
            feature_paths: vec!["a.tensor".into()],
            flipped_feature_paths: None,
            provider: ProviderKind::SyntheticPosition,
            split: Split::Test,
            oracle: Some(OracleMeta {
                pan: vec![0.1, 0.2],
                scene: scene(PanTrajectory::Constant { p: 0.1 }, Source::Sine { freq_hz: 1.0 }, 1.0),
            }),
        };
        write_manifest(&path, &[rec.clone(), rec.clone()]).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), vec![rec.clone(), rec]);
    }

    #[test]
    fn random_scenes_are_valid_and_oracle_consistent() {
        let cfg = StftConfig::default();
        for i in 0..12 {
            let spec = random_scene(i, 5.0, 11);
            spec.validate().unwrap();
            let clip = synth_scene("s", &spec, crate::features::SYNTHETIC_DIM).unwrap();
            let (floor, tol) = oracle_bounds(clip.oracle_pan.as_ref().unwrap());
            let check = oracle_check(&clip, &cfg, floor).unwrap();
            assert!(check.checked_bins > 0);
            assert!(check.max_error < tol, "scene {i} {spec:?}: {}", check.max_error);
        }
        assert_eq!(random_scene(4, 5.0, 11), random_scene(4, 5.0, 11));
        assert_ne!(random_scene(4, 5.0, 11), random_scene(5, 5.0, 11));
    }
}
