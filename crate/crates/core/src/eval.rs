//! Distances against ground truth, the MONO baseline, spatialization of a
//! mono mixture, and the all-clips / filtered-clips protocols.

use num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dataset::ClipRecord;
use crate::dsp::{log_compress, mixdown, reconstruct_stereo_at, stft, MaskPair, StftConfig, Waveform};
use crate::error::{Error, Result};
use crate::features::{upsample_nearest, FeatureTrack};
use crate::model::ModelState;

pub const DEFAULT_FILTER_DB: f64 = 3.0;
pub const DEFAULT_ENV_CUTOFF_HZ: f64 = 20.0;
/// Largest feature/audio duration disagreement accepted by [`spatialize`].
pub const MAX_FEATURE_SKEW_S: f64 = 0.5;

/// Trims or zero-pads `pred` to the length of `gt`; refuses gaps over
/// `tolerance` samples.
fn align_lengths(gt: &Waveform, pred: &Waveform, tolerance: usize) -> Result<Waveform> {
    gt.require_stereo()?;
    pred.require_stereo()?;
    if gt.sample_rate() != pred.sample_rate() {
        return Err(Error::invalid(format!(
            "sample rates differ: {} vs {}",
            gt.sample_rate(),
            pred.sample_rate()
        )));
    }
    let (n, m) = (gt.len(), pred.len());
    if n.abs_diff(m) > tolerance {
        return Err(Error::shape(format!(
            "length mismatch: ground truth {n} samples, prediction {m} (tolerance {tolerance})"
        )));
    }
    if n == m {
        return Ok(pred.clone());
    }
    let chans = pred
        .channels()
        .iter()
        .map(|c| {
            let mut c = c.clone();
            c.resize(n, 0.0);
            c
        })
        .collect();
    Waveform::new(chans, pred.sample_rate())
}

/// Sum over channels of the per-frame mean squared magnitude distance
/// `sum_f (|X| - |X~|)^2`. `pred` may differ from `gt` by up to one hop.
pub fn stft_distance(gt: &Waveform, pred: &Waveform, cfg: &StftConfig) -> Result<f64> {
    let pred = align_lengths(gt, pred, cfg.hop_length)?;
    let mut total = 0.0;
    for c in 0..2 {
        let g = stft(&Waveform::mono(gt.channel(c).to_vec(), gt.sample_rate())?, cfg)?.magnitude();
        let p = stft(&Waveform::mono(pred.channel(c).to_vec(), gt.sample_rate())?, cfg)?.magnitude();
        let d: f64 = g.iter().zip(p.iter()).map(|(x, y)| (x - y).powi(2)).sum();
        total += d / g.nrows() as f64;
    }
    Ok(total)
}

/// Magnitude of the analytic signal.
pub fn hilbert_envelope(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n == 0 {
        return Vec::new();
    }
    let mut planner = FftPlanner::<f64>::new();
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, v) in buf.iter_mut().enumerate() {
        let h = if k == 0 || (n % 2 == 0 && k == n / 2) {
            1.0
        } else if k < n.div_ceil(2) {
            2.0
        } else {
            0.0
        };
        *v *= h / n as f64;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    buf.iter().map(|v| v.norm()).collect()
}

/// Second-order Butterworth low-pass (bilinear transform).
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn lowpass(cutoff_hz: f64, sample_rate: f64) -> Self {
        let k = (std::f64::consts::PI * cutoff_hz / sample_rate).tan();
        let s2 = std::f64::consts::SQRT_2;
        let norm = 1.0 / (1.0 + s2 * k + k * k);
        let b0 = k * k * norm;
        Self {
            b: [b0, 2.0 * b0, b0],
            a: [2.0 * (k * k - 1.0) * norm, (1.0 - s2 * k + k * k) * norm],
        }
    }

    /// Transposed direct form II, starting from the steady state of a
    /// constant input `x[0]`.
    fn run(&self, x: &[f64]) -> Vec<f64> {
        let [b0, b1, b2] = self.b;
        let [a1, a2] = self.a;
        let x0 = x.first().copied().unwrap_or(0.0);
        let mut z2 = (b2 - a2) * x0;
        let mut z1 = (b1 - a1) * x0 + z2;
        x.iter()
            .map(|&v| {
                let y = b0 * v + z1;
                z1 = b1 * v - a1 * y + z2;
                z2 = b2 * v - a2 * y;
                y
            })
            .collect()
    }
}

/// Zero-phase low-pass: forward-backward filtering over an odd extension of
/// one cutoff period at each end.
pub fn lowpass_zero_phase(x: &[f64], cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return x.to_vec();
    }
    let pad = ((sample_rate / cutoff_hz).round() as usize).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    let f = Biquad::lowpass(cutoff_hz, sample_rate);
    let mut y = f.run(&ext);
    y.reverse();
    let mut y = f.run(&y);
    y.reverse();
    y[pad..pad + n].to_vec()
}

/// Smoothed Hilbert envelope.
pub fn envelope(x: &[f64], cutoff_hz: f64, sample_rate: f64) -> Vec<f64> {
    lowpass_zero_phase(&hilbert_envelope(x), cutoff_hz, sample_rate)
}

/// Sum over channels of the per-sample mean squared envelope distance.
pub fn env_distance(gt: &Waveform, pred: &Waveform) -> Result<f64> {
    env_distance_with(gt, pred, DEFAULT_ENV_CUTOFF_HZ)
}

pub fn env_distance_with(gt: &Waveform, pred: &Waveform, cutoff_hz: f64) -> Result<f64> {
    gt.require_stereo()?;
    pred.require_stereo()?;
    if gt.len() != pred.len() {
        return Err(Error::shape(format!(
            "length mismatch: ground truth {} samples, prediction {}",
            gt.len(),
            pred.len()
        )));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < gt.sample_rate() as f64 / 2.0) {
        return Err(Error::invalid("envelope cutoff must be in (0, nyquist)"));
    }
    let sr = gt.sample_rate() as f64;
    let mut total = 0.0;
    for c in 0..2 {
        let a = envelope(gt.channel(c), cutoff_hz, sr);
        let b = envelope(pred.channel(c), cutoff_hz, sr);
        total += a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64;
    }
    Ok(total)
}

/// Both channels set to `(x_L + x_R) / 2`.
pub fn mono_baseline(gt: &Waveform) -> Result<Waveform> {
    let (l, r) = gt.require_stereo()?;
    let m: Vec<f64> = l.iter().zip(r).map(|(a, b)| 0.5 * (a + b)).collect();
    Waveform::stereo(m.clone(), m, gt.sample_rate())
}

/// `10 log10(E_L / E_R)`; infinite when one channel is silent, NaN when both are.
pub fn channel_ratio_db(w: &Waveform) -> Result<f64> {
    let (l, r) = w.require_stereo()?;
    let e = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>();
    let (el, er) = (e(l), e(r));
    Ok(if el == 0.0 && er == 0.0 {
        f64::NAN
    } else {
        10.0 * (el / er).log10()
    })
}

/// Clips whose interaural energy ratio reaches `threshold_db` in magnitude.
pub fn filter_clips(clips: &[ClipRecord], threshold_db: f64) -> Result<Vec<&ClipRecord>> {
    let mut out = Vec::new();
    for c in clips {
        if channel_ratio_db(&c.stereo)?.abs() >= threshold_db {
            out.push(c);
        }
    }
    Ok(out)
}

/// Spatialized audio plus per-chunk mean `M_L - M_R`.
#[derive(Debug, Clone)]
pub struct Spatialized {
    pub stereo: Waveform,
    pub masks: MaskPair,
    pub lateralization: Vec<f64>,
}

/// Predicts masks for a mono mixture chunk by chunk and reconstructs stereo
/// with the mixture phase.
pub fn spatialize(
    state: &ModelState,
    mono: &Waveform,
    features: &FeatureTrack,
    cfg: &StftConfig,
    chunk_s: f64,
) -> Result<Spatialized> {
    mono.require_mono().map_err(|_| {
        Error::invalid(format!(
            "input is already spatial ({} channels); a mono mixture is required",
            mono.n_channels()
        ))
    })?;
    let skew = (features.duration_s() - mono.duration_s()).abs();
    if skew > MAX_FEATURE_SKEW_S {
        return Err(Error::invalid(format!(
            "features span {:.3} s but audio lasts {:.3} s",
            features.duration_s(),
            mono.duration_s()
        )));
    }
    let nets = state.networks()?;
    if cfg.n_bins() != state.cls_cfg.n_bins {
        return Err(Error::ConfigMismatch(format!(
            "model expects {} bins, STFT yields {}",
            state.cls_cfg.n_bins,
            cfg.n_bins()
        )));
    }
    let spec = stft(mono, cfg)?;
    let logmag = log_compress(&spec.magnitude())?;
    let (frames, bins) = logmag.dim();
    let fps = cfg.frame_rate(mono.sample_rate());
    let feats = upsample_nearest(features, frames, fps)?.into_vectors();
    let chunk = cfg.n_frames((chunk_s * mono.sample_rate() as f64).round() as usize);
    let mut left = ndarray::Array2::zeros((frames, bins));
    let mut right = ndarray::Array2::zeros((frames, bins));
    let mut lateralization = Vec::new();
    let mut start = 0;
    while start < frames {
        let end = (start + chunk).min(frames);
        let s = ndarray::s![start..end, ..];
        let m = nets
            .synth
            .forward(&state.synth, &logmag.slice(s).to_owned(), &feats.slice(s).to_owned())?;
        lateralization.push((&m.left - &m.right).mean().unwrap_or(0.0));
        left.slice_mut(s).assign(&m.left);
        right.slice_mut(s).assign(&m.right);
        start = end;
    }
    let masks = MaskPair::new(left, right)?;
    let stereo = reconstruct_stereo_at(&masks, &spec, cfg, mono.sample_rate())?;
    Ok(Spatialized {
        stereo,
        masks,
        lateralization,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    All,
    Filtered,
    Both,
}

impl Protocol {
    fn wants_all(self) -> bool {
        matches!(self, Protocol::All | Protocol::Both)
    }

    fn wants_filtered(self) -> bool {
        matches!(self, Protocol::Filtered | Protocol::Both)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "MONO")]
    Mono,
    #[serde(rename = "ASN_no_cls")]
    AsnNoCls,
    #[serde(rename = "ASN")]
    Asn,
}

impl Method {
    pub fn label(self) -> &'static str {
        match self {
            Method::Mono => "MONO",
            Method::AsnNoCls => "ASN w/o classifier",
            Method::Asn => "ASN",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub stft_distance: f64,
    pub env_distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEval {
    pub id: String,
    pub ratio_db: f64,
    pub in_filtered: bool,
    pub scores: Vec<(Method, Scores)>,
}

impl ClipEval {
    pub fn get(&self, m: Method) -> Option<Scores> {
        self.scores.iter().find(|(k, _)| *k == m).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n_clips: usize,
    /// Mean per-clip scores, in table row order.
    pub rows: Vec<(Method, Scores)>,
}

impl Aggregate {
    pub fn get(&self, m: Method) -> Option<Scores> {
        self.rows.iter().find(|(k, _)| *k == m).map(|(_, s)| *s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub filter_threshold_db: f64,
    pub protocol: Protocol,
    pub env_cutoff_hz: f64,
    pub per_clip: Vec<ClipEval>,
    pub all: Option<Aggregate>,
    /// `None` when the protocol skips it or no clip passes the filter.
    pub filtered: Option<Aggregate>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub threshold_db: f64,
    pub protocol: Protocol,
    pub chunk_s: f64,
    pub env_cutoff_hz: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            threshold_db: DEFAULT_FILTER_DB,
            protocol: Protocol::Both,
            chunk_s: 1.0,
            env_cutoff_hz: DEFAULT_ENV_CUTOFF_HZ,
        }
    }
}

fn aggregate(clips: &[&ClipEval]) -> Option<Aggregate> {
    let first = clips.first()?;
    let n = clips.len() as f64;
    let rows = first
        .scores
        .iter()
        .map(|(m, _)| {
            let (mut s, mut e) = (0.0, 0.0);
            for c in clips {
                let sc = c.get(*m).expect("every clip scores the same methods");
                s += sc.stft_distance;
                e += sc.env_distance;
            }
            (
                *m,
                Scores {
                    stft_distance: s / n,
                    env_distance: e / n,
                },
            )
        })
        .collect();
    Some(Aggregate {
        n_clips: clips.len(),
        rows,
    })
}

/// Scores MONO and each trained model on every test clip. The model input
/// is the mixture `x_L + x_R`.
pub fn evaluate(
    clips: &[ClipRecord],
    asn: &ModelState,
    asn_no_cls: Option<&ModelState>,
    cfg: &StftConfig,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if clips.is_empty() {
        return Err(Error::invalid("no test clips to evaluate"));
    }
    for state in std::iter::once(asn).chain(asn_no_cls) {
        if state.synth_cfg.feature_dim != clips[0].features.dim() {
            return Err(Error::ConfigMismatch(format!(
                "model feature dim {} vs corpus {}",
                state.synth_cfg.feature_dim,
                clips[0].features.dim()
            )));
        }
    }
    let mut per_clip = Vec::with_capacity(clips.len());
    for clip in clips {
        let gt = &clip.stereo;
        let ratio_db = channel_ratio_db(gt)?;
        let score = |pred: &Waveform| -> Result<Scores> {
            Ok(Scores {
                stft_distance: stft_distance(gt, pred, cfg)?,
                env_distance: env_distance_with(gt, pred, opts.env_cutoff_hz)?,
            })
        };
        let mix = mixdown(gt)?;
        let mut scores = vec![(Method::Mono, score(&mono_baseline(gt)?)?)];
        if let Some(s) = asn_no_cls {
            let out = spatialize(s, &mix, &clip.features, cfg, opts.chunk_s)?;
            scores.push((Method::AsnNoCls, score(&out.stereo)?));
        }
        let out = spatialize(asn, &mix, &clip.features, cfg, opts.chunk_s)?;
        scores.push((Method::Asn, score(&out.stereo)?));
        per_clip.push(ClipEval {
            id: clip.id.clone(),
            ratio_db,
            in_filtered: ratio_db.abs() >= opts.threshold_db,
            scores,
        });
    }
    let all: Vec<&ClipEval> = per_clip.iter().collect();
    let filtered: Vec<&ClipEval> = per_clip.iter().filter(|c| c.in_filtered).collect();
    Ok(EvalReport {
        filter_threshold_db: opts.threshold_db,
        protocol: opts.protocol,
        env_cutoff_hz: opts.env_cutoff_hz,
        all: if opts.protocol.wants_all() { aggregate(&all) } else { None },
        filtered: if opts.protocol.wants_filtered() {
            aggregate(&filtered)
        } else {
            None
        },
        per_clip,
    })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Methods as rows; STFT and ENV columns for each protocol.
    pub fn to_table(&self) -> String {
        let n_filtered = self.per_clip.iter().filter(|c| c.in_filtered).count();
        let mut blocks: Vec<(String, Option<&Aggregate>)> = Vec::new();
        if self.protocol.wants_all() {
            blocks.push((format!("All clips (n={})", self.per_clip.len()), self.all.as_ref()));
        }
        if self.protocol.wants_filtered() {
            blocks.push((
                format!("Filtered (n={n_filtered}, |ratio| >= {} dB)", self.filter_threshold_db),
                self.filtered.as_ref(),
            ));
        }
        let methods: Vec<Method> = self
            .per_clip
            .first()
            .map(|c| c.scores.iter().map(|(m, _)| *m).collect())
            .unwrap_or_default();
        let mut out = format!("{:<20}", "");
        for (title, _) in &blocks {
            out.push_str(&format!(" | {title:<25}"));
        }
        out.push('\n');
        out.push_str(&format!("{:<20}", "Method"));
        for _ in &blocks {
            out.push_str(&format!(" | {:>12} {:>12}", "STFT", "ENV"));
        }
        out.push('\n');
        for m in methods {
            out.push_str(&format!("{:<20}", m.label()));
            for (_, agg) in &blocks {
                match agg.and_then(|a| a.get(m)) {
                    Some(s) => out.push_str(&format!(
                        " | {:>12.5} {:>12.6}",
                        s.stft_distance, s.env_distance
                    )),
                    None => out.push_str(&format!(" | {:>12} {:>12}", "-", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}
