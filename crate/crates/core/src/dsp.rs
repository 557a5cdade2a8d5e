//! Signal processing primitives: STFT/ISTFT, mono mixdown, ideal ratio masks
//! and stereo reconstruction from masked mixtures.
//!
//! All functions are pure. Spectrograms are stored frame-major
//! (`[n_frames, n_bins]`), matching the `[time, frequency]` layout used by the
//! model.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 44_100;

/// Regularizer added to the ratio-mask denominator. Silent bins map to 0.
pub const IRM_EPS: f64 = 1e-8;

/// Time-domain audio, one `Vec` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    channels: Vec<Vec<f64>>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(channels: Vec<Vec<f64>>, sample_rate: u32) -> Result<Self> {
        if channels.is_empty() || channels.len() > 2 {
            return Err(Error::invalid(format!(
                "waveform must have 1 or 2 channels, got {}",
                channels.len()
            )));
        }
        let n = channels[0].len();
        if n == 0 {
            return Err(Error::invalid("waveform has no samples"));
        }
        if channels.iter().any(|c| c.len() != n) {
            return Err(Error::invalid("channels differ in length"));
        }
        if channels.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        if sample_rate == 0 {
            return Err(Error::invalid("sample rate must be positive"));
        }
        Ok(Self {
            channels,
            sample_rate,
        })
    }

    pub fn mono(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![samples], sample_rate)
    }

    pub fn stereo(left: Vec<f64>, right: Vec<f64>, sample_rate: u32) -> Result<Self> {
        Self::new(vec![left, right], sample_rate)
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn duration_s(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.channels[idx]
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn into_channels(self) -> Vec<Vec<f64>> {
        self.channels
    }

    pub fn is_stereo(&self) -> bool {
        self.channels.len() == 2
    }

    pub fn require_mono(&self) -> Result<&[f64]> {
        if self.channels.len() != 1 {
            return Err(Error::invalid(format!(
                "expected mono audio, got {} channels",
                self.channels.len()
            )));
        }
        Ok(&self.channels[0])
    }

    pub fn require_stereo(&self) -> Result<(&[f64], &[f64])> {
        if self.channels.len() != 2 {
            return Err(Error::invalid("stereo required"));
        }
        Ok((&self.channels[0], &self.channels[1]))
    }

    /// Left/right exchanged copy. Mono input is returned unchanged.
    pub fn swapped(&self) -> Self {
        let mut channels = self.channels.clone();
        channels.reverse();
        Self {
            channels,
            sample_rate: self.sample_rate,
        }
    }

    /// Samples `[start, end)` of every channel.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::invalid(format!(
                "slice [{start}, {end}) out of range for {} samples",
                self.len()
            )));
        }
        Self::new(
            self.channels.iter().map(|c| c[start..end].to_vec()).collect(),
            self.sample_rate,
        )
    }

    /// Mean square over all channels and samples.
    pub fn mean_square(&self) -> f64 {
        let total: f64 = self.channels.iter().flatten().map(|x| x * x).sum();
        total / (self.len() * self.n_channels()) as f64
    }

    pub fn peak(&self) -> f64 {
        self.channels
            .iter()
            .flatten()
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Multiplies every channel by `gain`.
    pub fn scaled(&self, gain: f64) -> Self {
        Self {
            channels: self
                .channels
                .iter()
                .map(|c| c.iter().map(|x| x * gain).collect())
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Window {
    #[default]
    Hann,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub win_length: usize,
    pub hop_length: usize,
    pub window: Window,
    pub center_pad: bool,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::for_sample_rate(DEFAULT_SAMPLE_RATE)
    }
}

impl StftConfig {
    /// 2048-point FFT, 40 ms Hann window, 10 ms hop.
    pub fn for_sample_rate(sample_rate: u32) -> Self {
        let sr = sample_rate as f64;
        Self {
            fft_size: 2048,
            win_length: (0.040 * sr).round() as usize,
            hop_length: (0.010 * sr).round() as usize,
            window: Window::Hann,
            center_pad: true,
        }
    }

    pub fn n_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count produced by [`stft`] for a signal of `len` samples.
    pub fn n_frames(&self, len: usize) -> usize {
        if self.center_pad {
            1 + len / self.hop_length
        } else if len < self.fft_size {
            1
        } else {
            1 + (len - self.fft_size) / self.hop_length
        }
    }

    /// Spectrogram frames per second.
    pub fn frame_rate(&self, sample_rate: u32) -> f64 {
        sample_rate as f64 / self.hop_length as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.fft_size < 2 || self.fft_size % 2 != 0 {
            return Err(Error::invalid("fft_size must be even and at least 2"));
        }
        if self.win_length == 0 || self.win_length > self.fft_size {
            return Err(Error::invalid(format!(
                "win_length {} must be in [1, fft_size = {}]",
                self.win_length, self.fft_size
            )));
        }
        if self.hop_length == 0 || self.hop_length > self.win_length {
            return Err(Error::invalid(format!(
                "hop_length {} must be in [1, win_length = {}]",
                self.hop_length, self.win_length
            )));
        }
        if !satisfies_cola(&self.window_samples(), self.hop_length) {
            return Err(Error::invalid(format!(
                "window of length {} is not constant-overlap-add at hop {}",
                self.win_length, self.hop_length
            )));
        }
        Ok(())
    }

    /// Analysis window of `win_length` samples (periodic Hann).
    pub fn window_samples(&self) -> Vec<f64> {
        match self.window {
            Window::Hann => hann_periodic(self.win_length),
        }
    }

    /// Window zero-padded to `fft_size`, centered in the frame.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.fft_size];
        let offset = (self.fft_size - self.win_length) / 2;
        out[offset..offset + self.win_length].copy_from_slice(&self.window_samples());
        out
    }
}

pub fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn satisfies_cola(window: &[f64], hop: usize) -> bool {
    let sums: Vec<f64> = (0..hop)
        .map(|phase| window.iter().skip(phase).step_by(hop).sum())
        .collect();
    let max = sums.iter().cloned().fold(f64::MIN, f64::max);
    let min = sums.iter().cloned().fold(f64::MAX, f64::min);
    max > 0.0 && (max - min) / max < 1e-9
}

/// Complex T-F matrix tied to the configuration that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Array2<Complex64>,
    config: StftConfig,
    origin_length: usize,
}

impl Spectrogram {
    pub fn from_parts(
        values: Array2<Complex64>,
        config: StftConfig,
        origin_length: usize,
    ) -> Result<Self> {
        if values.ncols() != config.n_bins() {
            return Err(Error::shape(format!(
                "spectrogram has {} bins, config implies {}",
                values.ncols(),
                config.n_bins()
            )));
        }
        if values.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
            return Err(Error::invalid("spectrogram contains non-finite values"));
        }
        Ok(Self {
            values,
            config,
            origin_length,
        })
    }

    pub fn values(&self) -> &Array2<Complex64> {
        &self.values
    }

    pub fn config(&self) -> &StftConfig {
        &self.config
    }

    pub fn origin_length(&self) -> usize {
        self.origin_length
    }

    pub fn n_frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_bins(&self) -> usize {
        self.values.ncols()
    }

    pub fn magnitude(&self) -> Array2<f64> {
        self.values.mapv(|v| v.norm())
    }

    /// Frames `[start, end)` as a new spectrogram; the origin length becomes
    /// the sample span those frames cover.
    pub fn frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.n_frames() {
            return Err(Error::invalid(format!(
                "frame range [{start}, {end}) out of range for {} frames",
                self.n_frames()
            )));
        }
        let values = self.values.slice(ndarray::s![start..end, ..]).to_owned();
        Ok(Self {
            values,
            config: self.config,
            origin_length: (end - start - 1) * self.config.hop_length + 1,
        })
    }
}

fn check_same_shape<A, B>(a: &Array2<A>, b: &Array2<B>, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// Short-time Fourier transform of a mono waveform.
pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let x = w.require_mono()?;
    Ok(stft_samples(x, cfg))
}

pub(crate) fn stft_samples(x: &[f64], cfg: &StftConfig) -> Spectrogram {
    let n_fft = cfg.fft_size;
    let n_bins = cfg.n_bins();
    let n_frames = cfg.n_frames(x.len());
    let pad = if cfg.center_pad { n_fft / 2 } else { 0 };
    let window = cfg.padded_window();

    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut values = Array2::<Complex64>::zeros((n_frames, n_bins));

    for t in 0..n_frames {
        let start = (t * cfg.hop_length) as isize - pad as isize;
        for (i, b) in buf.iter_mut().enumerate() {
            let idx = start + i as isize;
            let s = if idx >= 0 && (idx as usize) < x.len() {
                x[idx as usize]
            } else {
                0.0
            };
            *b = Complex64::new(s * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (f, v) in values.row_mut(t).iter_mut().enumerate() {
            *v = buf[f];
        }
    }
    Spectrogram {
        values,
        config: *cfg,
        origin_length: x.len(),
    }
}

/// Inverse STFT by weighted overlap-add. Output length equals the
/// spectrogram's origin length.
pub fn istft(s: &Spectrogram, cfg: &StftConfig, sample_rate: u32) -> Result<Waveform> {
    if s.config != *cfg {
        return Err(Error::ConfigMismatch(format!(
            "spectrogram was produced with {:?}, asked to invert with {:?}",
            s.config, cfg
        )));
    }
    cfg.validate()?;
    Waveform::mono(istft_samples(s), sample_rate)
}

pub(crate) fn istft_samples(s: &Spectrogram) -> Vec<f64> {
    let cfg = s.config;
    let n_fft = cfg.fft_size;
    let n_frames = s.n_frames();
    let pad = if cfg.center_pad { n_fft / 2 } else { 0 };
    let window = cfg.padded_window();
    let total = (n_frames - 1) * cfg.hop_length + n_fft;

    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(n_fft);
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    let mut acc = vec![0.0; total];
    let mut norm = vec![0.0; total];
    let scale = 1.0 / n_fft as f64;

    for t in 0..n_frames {
        let row = s.values.row(t);
        for f in 0..n_fft {
            buf[f] = if f <= n_fft / 2 {
                row[f]
            } else {
                row[n_fft - f].conj()
            };
        }
        // DC and Nyquist bins must be real for a real-valued frame.
        buf[0].im = 0.0;
        buf[n_fft / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = t * cfg.hop_length;
        for i in 0..n_fft {
            acc[start + i] += buf[i].re * scale * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }

    (0..s.origin_length)
        .map(|n| {
            let idx = n + pad;
            if idx < total && norm[idx] > 1e-10 {
                acc[idx] / norm[idx]
            } else {
                0.0
            }
        })
        .collect()
}

/// Sums the two channels without clipping.
pub fn mixdown(stereo: &Waveform) -> Result<Waveform> {
    let (l, r) = stereo.require_stereo()?;
    let mix = l.iter().zip(r).map(|(a, b)| a + b).collect();
    Waveform::mono(mix, stereo.sample_rate())
}

/// Per-bin left/right ratio masks.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub left: Array2<f64>,
    pub right: Array2<f64>,
}

impl MaskPair {
    pub fn new(left: Array2<f64>, right: Array2<f64>) -> Result<Self> {
        check_same_shape(&left, &right, "left/right masks")?;
        if left
            .iter()
            .chain(right.iter())
            .any(|&v| !(0.0..=1.0).contains(&v))
        {
            return Err(Error::invalid("mask values must lie in [0, 1]"));
        }
        Ok(Self { left, right })
    }

    pub fn uniform(n_frames: usize, n_bins: usize, left: f64, right: f64) -> Result<Self> {
        Self::new(
            Array2::from_elem((n_frames, n_bins), left),
            Array2::from_elem((n_frames, n_bins), right),
        )
    }

    pub fn dim(&self) -> (usize, usize) {
        self.left.dim()
    }

    pub fn swapped(&self) -> Self {
        Self {
            left: self.right.clone(),
            right: self.left.clone(),
        }
    }
}

/// Ideal ratio masks `sqrt(|X_p|^2 / (|X_L|^2 + |X_R|^2 + eps))`.
pub fn compute_irm(left: &Spectrogram, right: &Spectrogram, eps: f64) -> Result<MaskPair> {
    if !(eps > 0.0) {
        return Err(Error::invalid("eps must be positive"));
    }
    if left.config != right.config {
        return Err(Error::ConfigMismatch(
            "left and right spectrograms use different STFT configs".into(),
        ));
    }
    check_same_shape(&left.values, &right.values, "compute_irm")?;
    Ok(irm_from_magnitudes(&left.magnitude(), &right.magnitude(), eps))
}

pub(crate) fn irm_from_magnitudes(ml: &Array2<f64>, mr: &Array2<f64>, eps: f64) -> MaskPair {
    let mut left = Array2::zeros(ml.dim());
    let mut right = Array2::zeros(ml.dim());
    Zip::from(&mut left)
        .and(&mut right)
        .and(ml)
        .and(mr)
        .for_each(|l, r, &a, &b| {
            let ea = a * a;
            let eb = b * b;
            let denom = ea + eb + eps;
            // min() guards the last ulp; the ratio is < 1 by construction.
            *l = (ea / denom).sqrt().min(1.0);
            *r = (eb / denom).sqrt().min(1.0);
        });
    MaskPair { left, right }
}

/// Masked magnitudes `m_p * |X_M|` for both channels.
pub fn apply_masks(m: &MaskPair, mix: &Spectrogram) -> Result<(Array2<f64>, Array2<f64>)> {
    check_same_shape(&m.left, &mix.values, "apply_masks")?;
    let mag = mix.magnitude();
    Ok((&m.left * &mag, &m.right * &mag))
}

/// Two-channel waveform from masks applied to a mixture; both channels reuse
/// the mixture phase.
pub fn reconstruct_stereo(m: &MaskPair, mix: &Spectrogram, cfg: &StftConfig) -> Result<Waveform> {
    reconstruct_stereo_at(m, mix, cfg, DEFAULT_SAMPLE_RATE)
}

pub fn reconstruct_stereo_at(
    m: &MaskPair,
    mix: &Spectrogram,
    cfg: &StftConfig,
    sample_rate: u32,
) -> Result<Waveform> {
    check_same_shape(&m.left, &mix.values, "reconstruct_stereo")?;
    let channel = |mask: &Array2<f64>| -> Result<Vec<f64>> {
        // mask * X_M == (mask * |X_M|) * exp(i * phase(X_M)) for mask >= 0
        let values = Zip::from(&mix.values)
            .and(mask)
            .map_collect(|&x, &g| x * g);
        let spec = Spectrogram {
            values,
            config: mix.config,
            origin_length: mix.origin_length,
        };
        Ok(istft(&spec, cfg, sample_rate)?.into_channels().remove(0))
    };
    Waveform::stereo(channel(&m.left)?, channel(&m.right)?, sample_rate)
}

/// `ln(1 + mag)` compression of a nonnegative magnitude matrix.
pub fn log_compress(mag: &Array2<f64>) -> Result<Array2<f64>> {
    if mag.iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::invalid("log_compress requires nonnegative input"));
    }
    Ok(mag.mapv(f64::ln_1p))
}
