//! Two-phase training: a classifier update on ground-truth pairs, then a
//! synthesizer update through the frozen classifier.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{augment_swap_flip, assign_splits, ChunkedCorpus, ClipRecord, SampleSource, Split, TrainingSample};
use crate::dsp::StftConfig;
use crate::error::{Error, Result};
use crate::model::{cls_objective, synth_objective, ChunkView, ModelState, Networks};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u64,
    pub seed: u64,
    pub lambda_cls: f64,
    pub augment_p: f64,
    pub chunk_s: f64,
    /// Fraction of training videos held out for best-epoch selection. With 0
    /// the training chunks themselves are scored.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            lambda_cls: 0.1,
            augment_p: 0.5,
            chunk_s: 1.0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be > 0"));
        }
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must be in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) || !(self.weight_decay >= 0.0) || !(self.lambda_cls >= 0.0) {
            return Err(Error::invalid(
                "adam_eps must be > 0; weight_decay and lambda_cls must be >= 0",
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_p) {
            return Err(Error::invalid("augment_p must be in [0, 1]"));
        }
        if !(self.chunk_s > 0.0) {
            return Err(Error::invalid("chunk_s must be > 0"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::invalid("val_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn update(&mut self, params: &mut [f64], grads: &[f64], cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] + cfg.weight_decay * params[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= cfg.learning_rate * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub synth: Adam,
    pub cls: Adam,
}

impl OptimizerState {
    pub fn new(state: &ModelState) -> Self {
        Self {
            synth: Adam::new(state.synth.len()),
            cls: Adam::new(state.cls.len()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub recon: f64,
    pub cls_on_gt: f64,
    pub cls_on_pred: f64,
    pub total: f64,
    /// Fraction of correct/swapped ground-truth presentations classified
    /// correctly before the update.
    pub gt_accuracy: f64,
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub metrics: StepMetrics,
    pub wall_time: f64,
}

pub const METRICS_HEADER: &str = "step,recon,cls_on_gt,cls_on_pred,total,wall_time";

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{:.6}",
            self.step, m.recon, m.cls_on_gt, m.cls_on_pred, m.total, self.wall_time
        )
    }

    pub fn parse(line: &str) -> Option<Self> {
        let v: Vec<&str> = line.split(',').collect();
        if v.len() != 6 {
            return None;
        }
        let f = |i: usize| v[i].parse::<f64>().ok();
        Some(Self {
            step: v[0].parse().ok()?,
            metrics: StepMetrics {
                recon: f(1)?,
                cls_on_gt: f(2)?,
                cls_on_pred: f(3)?,
                total: f(4)?,
                gt_accuracy: f64::NAN,
            },
            wall_time: f(5)?,
        })
    }
}

fn view<'a>(s: &'a TrainingSample, mix_mag: &'a ndarray::Array2<f64>) -> ChunkView<'a> {
    ChunkView {
        mix_logmag: &s.mix_logmag,
        mix_mag,
        features: &s.features_aligned,
        target: &s.target_masks,
    }
}

fn check_finite(step: u64, what: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            step,
            detail: format!("{what} = {v}"),
        })
    }
}

/// Classifier update on ground-truth masked pairs. Synthesizer parameters
/// are untouched. Returns the mean loss and accuracy before the update.
pub fn classifier_phase(
    nets: &Networks,
    state: &mut ModelState,
    opt: &mut Adam,
    batch: &[TrainingSample],
    mags: &[ndarray::Array2<f64>],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    let mut grads = vec![0.0; state.cls.len()];
    let (mut loss, mut correct) = (0.0, 0);
    for (s, mag) in batch.iter().zip(mags) {
        let (l, c) = cls_objective(nets, state, view(s, mag), Some(&mut grads))?;
        loss += l;
        correct += c;
    }
    let n = batch.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    check_finite(state.step, "classifier loss", loss)?;
    opt.update(&mut state.cls, &grads, cfg);
    Ok((loss / n, correct as f64 / (2.0 * n)))
}

/// Synthesizer update on `recon + lambda * cls` with the classifier frozen.
/// Returns mean `(recon, cls_on_pred, total)` before the update.
pub fn synthesizer_phase(
    nets: &Networks,
    state: &mut ModelState,
    opt: &mut Adam,
    batch: &[TrainingSample],
    mags: &[ndarray::Array2<f64>],
    cfg: &TrainConfig,
) -> Result<(f64, f64, f64)> {
    let mut grads = vec![0.0; state.synth.len()];
    let (mut recon, mut cls, mut total) = (0.0, 0.0, 0.0);
    for (s, mag) in batch.iter().zip(mags) {
        let l = synth_objective(nets, state, view(s, mag), cfg.lambda_cls, Some(&mut grads), None)?;
        recon += l.recon;
        cls += l.cls;
        total += l.total;
    }
    let n = batch.len() as f64;
    grads.iter_mut().for_each(|g| *g /= n);
    check_finite(state.step, "total loss", total)?;
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("synthesizer gradient {i} = {}", grads[i]),
        });
    }
    opt.update(&mut state.synth, &grads, cfg);
    Ok((recon / n, cls / n, total / n))
}

/// One classifier phase followed by one synthesizer phase.
pub fn train_step(
    nets: &Networks,
    state: &mut ModelState,
    opt: &mut OptimizerState,
    batch: &[TrainingSample],
    cfg: &TrainConfig,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    for s in batch {
        let finite = s.mix_logmag.iter().chain(s.features_aligned.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                step: state.step,
                detail: format!("non-finite input in {} chunk {}", s.clip_id, s.chunk_index),
            });
        }
    }
    let mags: Vec<_> = batch.iter().map(|s| s.mix_mag()).collect();
    let (cls_on_gt, gt_accuracy) = classifier_phase(nets, state, &mut opt.cls, batch, &mags, cfg)?;
    let (recon, cls_on_pred, total) = synthesizer_phase(nets, state, &mut opt.synth, batch, &mags, cfg)?;
    state.step += 1;
    if !state.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(StepMetrics {
        recon,
        cls_on_gt,
        cls_on_pred,
        total,
        gt_accuracy,
    })
}

/// Mean T-F distance between predicted and target magnitudes over
/// `samples`: per channel, the per-frame mean of the squared magnitude
/// error summed over bins, summed over both channels.
pub fn validation_distance(nets: &Networks, state: &ModelState, samples: &dyn SampleSource) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no validation chunks"));
    }
    let mut acc = 0.0;
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        let m = nets.synth.forward(&state.synth, &s.mix_logmag, &s.features_aligned)?;
        let mag = s.mix_mag();
        let frames = mag.nrows() as f64;
        for (mask, target) in [(&m.left, &s.target_mags.0), (&m.right, &s.target_mags.1)] {
            let d: f64 = ndarray::Zip::from(mask)
                .and(&mag)
                .and(target)
                .fold(0.0, |a, &mk, &x, &t| a + (mk * x - t).powi(2));
            acc += d / frames;
        }
    }
    Ok(acc / samples.len() as f64)
}

/// Held-out classifier accuracy on ground-truth correct/swapped pairs.
pub fn classifier_accuracy(nets: &Networks, state: &ModelState, samples: &dyn SampleSource) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::invalid("no chunks to score"));
    }
    let mut correct = 0;
    for i in 0..samples.len() {
        let s = samples.get(i)?;
        let mag = s.mix_mag();
        correct += cls_objective(nets, state, view(&s, &mag), None)?.1;
    }
    Ok(correct as f64 / (2 * samples.len()) as f64)
}

fn epoch_seed(seed: u64, epoch: u64, stream: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9) ^ stream
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitReport {
    /// State with the lowest validation distance.
    pub best: ModelState,
    pub best_epoch: u64,
    pub best_val: f64,
    pub last: ModelState,
    /// Validation distance after each completed epoch of this run.
    pub val_history: Vec<f64>,
    pub metrics: Vec<MetricsRow>,
    pub checkpoints: Vec<PathBuf>,
}

pub fn epoch_checkpoint_path(dir: &Path, epoch: u64) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

pub fn best_checkpoint_path(dir: &Path) -> PathBuf {
    dir.join("best.ckpt")
}

pub fn metrics_path(dir: &Path) -> PathBuf {
    dir.join("metrics.csv")
}

/// Reads a metrics log written by [`fit`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::format(path, "missing metrics header"));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(|l| MetricsRow::parse(l).ok_or_else(|| Error::format(path, format!("bad metrics row {l:?}"))))
        .collect()
}

fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Training and validation clips for [`fit`]: training-split clips, with
/// `val_fraction` of them held out by video.
pub fn train_val_split(corpus: &[ClipRecord], cfg: &TrainConfig) -> Result<(Vec<ClipRecord>, Vec<ClipRecord>)> {
    let train: Vec<ClipRecord> = corpus.iter().filter(|c| c.split == Split::Train).cloned().collect();
    if train.is_empty() {
        return Err(Error::invalid("corpus has no training clips"));
    }
    if cfg.val_fraction == 0.0 || train.len() < 2 {
        return Ok((train.clone(), train));
    }
    let ids: Vec<String> = train.iter().map(|c| c.id.clone()).collect();
    let roles = assign_splits(&ids, 1.0 - cfg.val_fraction, cfg.seed)?;
    let (mut fit_clips, mut val) = (Vec::new(), Vec::new());
    for (c, r) in train.into_iter().zip(roles) {
        match r {
            Split::Train => fit_clips.push(c),
            Split::Test => val.push(c),
        }
    }
    Ok((fit_clips, val))
}

/// Trains on the corpus's training split, checkpointing each epoch into
/// `checkpoint_dir` (`epoch_NNN.ckpt`, `best.ckpt`, `metrics.csv`).
/// With `resume`, continues from that checkpoint's epoch to `cfg.epochs`.
pub fn fit(
    corpus: &[ClipRecord],
    init: ModelState,
    stft: &StftConfig,
    cfg: &TrainConfig,
    checkpoint_dir: &Path,
    resume: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    stft.validate()?;
    let (train_clips, val_clips) = train_val_split(corpus, cfg)?;
    let train = ChunkedCorpus::new(&train_clips, *stft, cfg.chunk_s)?;
    let val = ChunkedCorpus::new(&val_clips, *stft, cfg.chunk_s)?;
    if train.is_empty() {
        return Err(Error::invalid("training split yields no usable chunks"));
    }
    let provider = train.provider()?;
    if cfg.augment_p > 0.0 && !provider.flip_supported {
        return Err(Error::invalid(
            "augment_p > 0 but the feature provider cannot mirror features",
        ));
    }
    if init.synth_cfg.feature_dim != provider.dim {
        return Err(Error::ConfigMismatch(format!(
            "model feature dim {} vs corpus {}",
            init.synth_cfg.feature_dim, provider.dim
        )));
    }
    if init.cls_cfg.n_bins != stft.n_bins() {
        return Err(Error::ConfigMismatch(format!(
            "classifier expects {} bins, STFT yields {}",
            init.cls_cfg.n_bins,
            stft.n_bins()
        )));
    }
    std::fs::create_dir_all(checkpoint_dir).map_err(|e| Error::io(checkpoint_dir, e))?;

    let mut state = init;
    let mut opt = OptimizerState::new(&state);
    let mut start_epoch = 0;
    let mut metrics = Vec::new();
    let mut best: Option<(f64, u64, ModelState)> = None;
    if let Some(path) = resume {
        let ck = Checkpoint::load(path)?;
        if ck.model.synth_cfg != state.synth_cfg || ck.model.cls_cfg != state.cls_cfg || ck.stft != *stft {
            return Err(Error::ConfigMismatch(format!(
                "{}: checkpoint configuration differs from the run configuration",
                path.display()
            )));
        }
        opt = ck
            .optimizer
            .clone()
            .ok_or_else(|| Error::format(path, "checkpoint has no optimizer state to resume"))?;
        start_epoch = ck.epoch;
        state = ck.model;
        let best_path = best_checkpoint_path(checkpoint_dir);
        if let (Some(v), true) = (ck.best_val, best_path.exists()) {
            let b = Checkpoint::load(&best_path)?;
            best = Some((v, b.epoch, b.model));
        }
        let mp = metrics_path(checkpoint_dir);
        if mp.exists() {
            metrics = read_metrics(&mp)?
                .into_iter()
                .filter(|r| r.step <= state.step)
                .collect();
        }
    }
    let nets = state.networks()?;

    let clock = Instant::now();
    let time_offset = metrics.last().map_or(0.0, |r: &MetricsRow| r.wall_time);
    let mut val_history = Vec::new();
    let mut checkpoints = Vec::new();
    for epoch in start_epoch..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, 0)));
        let mut aug_rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch, 1));
        for idx in order.chunks(cfg.batch_size) {
            let batch = idx
                .iter()
                .map(|&i| augment_swap_flip(&train.get(i)?, &provider, cfg.augment_p, &mut aug_rng))
                .collect::<Result<Vec<_>>>()?;
            let m = train_step(&nets, &mut state, &mut opt, &batch, cfg)?;
            metrics.push(MetricsRow {
                step: state.step,
                metrics: m,
                wall_time: time_offset + clock.elapsed().as_secs_f64(),
            });
        }
        let v = validation_distance(&nets, &state, if val.is_empty() { &train } else { &val })?;
        check_finite(state.step, "validation distance", v)?;
        val_history.push(v);
        let done = epoch + 1;
        if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
            best = Some((v, done, state.clone()));
            Checkpoint {
                model: state.clone(),
                stft: *stft,
                train: Some(cfg.clone()),
                epoch: done,
                best_val: Some(v),
                optimizer: None,
            }
            .save(&best_checkpoint_path(checkpoint_dir))?;
        }
        let path = epoch_checkpoint_path(checkpoint_dir, done);
        Checkpoint {
            model: state.clone(),
            stft: *stft,
            train: Some(cfg.clone()),
            epoch: done,
            best_val: best.as_ref().map(|b| b.0),
            optimizer: Some(opt.clone()),
        }
        .save(&path)?;
        checkpoints.push(path);
        write_metrics(&metrics_path(checkpoint_dir), &metrics)?;
    }
    let (best_val, best_epoch, best_state) = best.ok_or_else(|| {
        Error::invalid(format!(
            "nothing to train: checkpoint already at epoch {start_epoch}, target {}",
            cfg.epochs
        ))
    })?;
    Ok(FitReport {
        best: best_state,
        best_epoch,
        best_val,
        last: state,
        val_history,
        metrics,
        checkpoints,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_samples, random_scene, synth_scene};
    use crate::dsp::Window;
    use crate::model::{ClassifierConfig, SynthesizerConfig};

    pub(crate) fn small_stft() -> StftConfig {
        StftConfig {
            fft_size: 256,
            win_length: 220,
            hop_length: 110,
            window: Window::Hann,
            center_pad: true,
        }
    }

    fn tiny_state(seed: u64) -> ModelState {
        let synth = SynthesizerConfig {
            depth: 2,
            base_channels: 2,
            feature_dim: 8,
            feature_channels: 2,
            leaky_slope: 0.2,
        };
        ModelState::init(synth, ClassifierConfig::new(8, small_stft().n_bins()), seed).unwrap()
    }

    fn batch(n: usize) -> Vec<TrainingSample> {
        let clip = synth_scene("c", &random_scene(0, 1.0, 5), 8).unwrap();
        let mut out = make_samples(&clip, &small_stft(), 0.25).unwrap();
        out.truncate(n);
        out
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn overfits_a_fixed_batch() {
        let mut state = tiny_state(1);
        let nets = state.networks().unwrap();
        let mut opt = OptimizerState::new(&state);
        let b = batch(2);
        let totals: Vec<f64> = (0..50)
            .map(|_| train_step(&nets, &mut state, &mut opt, &b, &cfg()).unwrap().total)
            .collect();
        let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = totals[40..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "head {head} tail {tail}");
        assert!(totals[49] < totals[0]);
        assert_eq!(state.step, 50);
    }

    #[test]
    fn identical_batch_matches_single_sample() {
        let one = batch(1);
        let three = vec![one[0].clone(), one[0].clone(), one[0].clone()];
        let (mut s1, mut s3) = (tiny_state(2), tiny_state(2));
        let nets = s1.networks().unwrap();
        let (mut o1, mut o3) = (OptimizerState::new(&s1), OptimizerState::new(&s3));
        let m1 = train_step(&nets, &mut s1, &mut o1, &one, &cfg()).unwrap();
        let m3 = train_step(&nets, &mut s3, &mut o3, &three, &cfg()).unwrap();
        assert_eq!(m1.total, m3.total);
        assert_eq!(m1.cls_on_gt, m3.cls_on_gt);
        for (a, b) in s1.synth.iter().zip(&s3.synth) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }

    #[test]
    fn phases_touch_only_their_network() {
        let mut state = tiny_state(3);
        let nets = state.networks().unwrap();
        let mut opt = OptimizerState::new(&state);
        let b = batch(2);
        let mags: Vec<_> = b.iter().map(|s| s.mix_mag()).collect();
        let before = state.clone();
        classifier_phase(&nets, &mut state, &mut opt.cls, &b, &mags, &cfg()).unwrap();
        assert_eq!(state.synth, before.synth);
        assert_ne!(state.cls, before.cls);
        let mid = state.clone();
        synthesizer_phase(&nets, &mut state, &mut opt.synth, &b, &mags, &cfg()).unwrap();
        assert_eq!(state.cls, mid.cls);
        assert_ne!(state.synth, mid.synth);
    }

    #[test]
    fn lambda_zero_trajectory_ignores_the_classifier() {
        let c = TrainConfig {
            lambda_cls: 0.0,
            ..cfg()
        };
        let mut a = tiny_state(4);
        let mut b = a.clone();
        b.cls = tiny_state(99).cls;
        let nets = a.networks().unwrap();
        let (mut oa, mut ob) = (OptimizerState::new(&a), OptimizerState::new(&b));
        let data = batch(2);
        for _ in 0..3 {
            train_step(&nets, &mut a, &mut oa, &data, &c).unwrap();
            train_step(&nets, &mut b, &mut ob, &data, &c).unwrap();
        }
        assert_eq!(a.synth, b.synth);
        assert_ne!(a.cls, b.cls);
    }

    #[test]
    fn non_finite_input_aborts_with_step() {
        let mut state = tiny_state(5);
        state.step = 17;
        let nets = state.networks().unwrap();
        let mut opt = OptimizerState::new(&state);
        let mut b = batch(1);
        b[0].mix_logmag[[0, 0]] = f64::NAN;
        match train_step(&nets, &mut state, &mut opt, &b, &cfg()) {
            Err(Error::NonFinite { step, .. }) => assert_eq!(step, 17),
            other => panic!("expected NonFinite, got {other:?}"),
        }
        assert!(train_step(&nets, &mut state, &mut opt, &[], &cfg()).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let c = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 0.01,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, -2.0, 0.5];
        let mut adam = Adam::new(3);
        adam.update(&mut p, &[3.0, -0.1, 0.0], &c);
        // Bias-corrected first step is lr * sign(g) for nonzero g.
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 1.99).abs() < 1e-9);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn metrics_rows_round_trip() {
        let r = MetricsRow {
            step: 3,
            metrics: StepMetrics {
                recon: 0.1 + 0.2,
                cls_on_gt: 1.0 / 3.0,
                cls_on_pred: 2e-9,
                total: 0.5,
                gt_accuracy: 1.0,
            },
            wall_time: 1.25,
        };
        let back = MetricsRow::parse(&r.to_csv()).unwrap();
        assert_eq!(back.step, 3);
        assert_eq!(back.metrics.recon, r.metrics.recon);
        assert_eq!(back.metrics.cls_on_gt, r.metrics.cls_on_gt);
        assert_eq!(back.metrics.cls_on_pred, r.metrics.cls_on_pred);
    }
}
