//! Synthesizer, correspondence classifier, losses and the per-sample
//! objectives of both training phases.

pub mod classifier;
pub mod loss;
pub mod ops;
pub mod unet;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use classifier::{Classifier, ClassifierConfig};
pub use loss::{cls_loss, recon_loss, total_loss, DEFAULT_LAMBDA_CLS};
pub use unet::{Synthesizer, SynthesizerConfig};

use crate::dsp::MaskPair;
use crate::error::{Error, Result};

/// A contiguous range of a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Slot {
    pub off: usize,
    pub len: usize,
}

impl Slot {
    pub fn get<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.off..self.off + self.len]
    }

    pub fn get_mut<'a>(&self, p: &'a mut [f64]) -> &'a mut [f64] {
        &mut p[self.off..self.off + self.len]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Both networks' layouts, built from their configs.
#[derive(Debug, Clone)]
pub struct Networks {
    pub synth: Synthesizer,
    pub cls: Classifier,
}

impl Networks {
    pub fn new(synth: SynthesizerConfig, cls: ClassifierConfig) -> Result<Self> {
        if synth.feature_dim != cls.feature_dim {
            return Err(Error::ConfigMismatch(format!(
                "synthesizer feature dim {} vs classifier {}",
                synth.feature_dim, cls.feature_dim
            )));
        }
        Ok(Self {
            synth: Synthesizer::new(synth)?,
            cls: Classifier::new(cls)?,
        })
    }
}

/// Parameters of both networks plus bookkeeping.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub synth_cfg: SynthesizerConfig,
    pub cls_cfg: ClassifierConfig,
    pub synth: Vec<f64>,
    pub cls: Vec<f64>,
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn init(synth_cfg: SynthesizerConfig, cls_cfg: ClassifierConfig, seed: u64) -> Result<Self> {
        let nets = Networks::new(synth_cfg.clone(), cls_cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let synth = nets.synth.init_params(&mut rng);
        let cls = nets.cls.init_params(&mut rng);
        Ok(Self {
            synth_cfg,
            cls_cfg,
            synth,
            cls,
            step: 0,
            seed,
        })
    }

    pub fn networks(&self) -> Result<Networks> {
        let nets = Networks::new(self.synth_cfg.clone(), self.cls_cfg.clone())?;
        if nets.synth.n_params() != self.synth.len() || nets.cls.n_params() != self.cls.len() {
            return Err(Error::ConfigMismatch(
                "parameter counts do not match the stored configs".into(),
            ));
        }
        Ok(nets)
    }

    pub fn all_finite(&self) -> bool {
        self.synth.iter().chain(&self.cls).all(|v| v.is_finite())
    }
}

/// Masked log-magnitudes `ln(1 + m * |X_M|)` for both channels.
pub fn masked_logmag(masks: &MaskPair, mix_mag: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let f = |m: &Array2<f64>| {
        let mut out = m * mix_mag;
        out.mapv_inplace(f64::ln_1p);
        out
    };
    (f(&masks.left), f(&masks.right))
}

/// Inputs the objectives need from one training chunk.
#[derive(Debug, Clone, Copy)]
pub struct ChunkView<'a> {
    pub mix_logmag: &'a Array2<f64>,
    pub mix_mag: &'a Array2<f64>,
    pub features: &'a Array2<f64>,
    pub target: &'a MaskPair,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthLoss {
    pub recon: f64,
    /// Cross-entropy of the classifier on the predicted pair against label 1.
    pub cls: f64,
    pub total: f64,
}

/// Synthesizer objective `recon + lambda * cls(predicted pair, 1)` for one
/// chunk. Gradients accumulate into `synth_grads` and, if given,
/// `cls_grads`. With `lambda == 0` no gradient passes through the
/// classifier.
pub fn synth_objective(
    nets: &Networks,
    state: &ModelState,
    chunk: ChunkView<'_>,
    lambda_cls: f64,
    synth_grads: Option<&mut [f64]>,
    cls_grads: Option<&mut [f64]>,
) -> Result<SynthLoss> {
    let (pred, cache) = nets
        .synth
        .forward_train(&state.synth, chunk.mix_logmag, chunk.features)?;
    let recon = recon_loss(&pred, chunk.target)?;
    if chunk.mix_mag.dim() != pred.dim() {
        return Err(Error::shape("mixture magnitude shape differs from the masks"));
    }
    let (a, b) = masked_logmag(&pred, chunk.mix_mag);
    let cc = nets.cls.forward_train(&state.cls, chunk.features, &a, &b)?;
    let cls = cls_loss(cc.prob, 1.0)?;
    let total = total_loss(recon, cls, lambda_cls);

    if let Some(sg) = synth_grads {
        let (mut gl, mut gr) = loss::recon_grad(&pred, chunk.target)?;
        if lambda_cls != 0.0 {
            let g_logit = lambda_cls * loss::cls_logit_grad(cc.prob, 1.0);
            let spec = nets
                .cls
                .backward(&state.cls, &cc, g_logit, cls_grads, true)
                .expect("spectral gradients requested");
            // d ln(1 + m x) / dm = x / (1 + m x)
            let chain = |g: &mut Array2<f64>, gs: &Array2<f64>, m: &Array2<f64>| {
                ndarray::Zip::from(g)
                    .and(gs)
                    .and(m)
                    .and(chunk.mix_mag)
                    .for_each(|g, &s, &m, &x| *g += s * x / (1.0 + m * x));
            };
            chain(&mut gl, &spec.a, &pred.left);
            chain(&mut gr, &spec.b, &pred.right);
        }
        nets.synth.backward(&state.synth, &cache, &gl, &gr, sg)?;
    } else if let Some(cg) = cls_grads {
        if lambda_cls != 0.0 {
            let g_logit = lambda_cls * loss::cls_logit_grad(cc.prob, 1.0);
            nets.cls.backward(&state.cls, &cc, g_logit, Some(cg), false);
        }
    }
    Ok(SynthLoss { recon, cls, total })
}

/// Classifier objective on ground-truth masked magnitudes: the mean of the
/// cross-entropies on the correct order (label 1) and the swapped order
/// (label 0). Returns the loss and the number of correct decisions (0..=2).
pub fn cls_objective(
    nets: &Networks,
    state: &ModelState,
    chunk: ChunkView<'_>,
    cls_grads: Option<&mut [f64]>,
) -> Result<(f64, usize)> {
    let (a, b) = masked_logmag(chunk.target, chunk.mix_mag);
    let pos = nets.cls.forward_train(&state.cls, chunk.features, &a, &b)?;
    let neg = nets.cls.forward_train(&state.cls, chunk.features, &b, &a)?;
    let loss = 0.5 * (cls_loss(pos.prob, 1.0)? + cls_loss(neg.prob, 0.0)?);
    let correct = usize::from(pos.prob > 0.5) + usize::from(neg.prob < 0.5);
    if let Some(g) = cls_grads {
        nets.cls
            .backward(&state.cls, &pos, 0.5 * loss::cls_logit_grad(pos.prob, 1.0), Some(&mut *g), false);
        nets.cls
            .backward(&state.cls, &neg, 0.5 * loss::cls_logit_grad(neg.prob, 0.0), Some(g), false);
    }
    Ok((loss, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    struct Fixture {
        nets: Networks,
        state: ModelState,
        mix_logmag: Array2<f64>,
        mix_mag: Array2<f64>,
        features: Array2<f64>,
        target: MaskPair,
    }

    impl Fixture {
        fn view(&self) -> ChunkView<'_> {
            ChunkView {
                mix_logmag: &self.mix_logmag,
                mix_mag: &self.mix_mag,
                features: &self.features,
                target: &self.target,
            }
        }
    }

    /// Depth 2, 2 base channels, 8 frames x 9 bins (fft 16).
    fn fixture(seed: u64) -> Fixture {
        let synth_cfg = SynthesizerConfig {
            depth: 2,
            base_channels: 2,
            feature_dim: 3,
            feature_channels: 2,
            leaky_slope: 0.2,
        };
        let cls_cfg = ClassifierConfig::new(3, 9);
        let state = ModelState::init(synth_cfg.clone(), cls_cfg.clone(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let mix_mag = Array2::from_shape_fn((8, 9), |_| rng.random_range(0.0..4.0));
        let mix_logmag = mix_mag.mapv(f64::ln_1p);
        let features = Array2::from_shape_fn((8, 3), |_| rng.random_range(-1.0..1.0));
        let nets = Networks::new(synth_cfg, cls_cfg).unwrap();
        // Targets sit at least 0.1 from the initial prediction so finite
        // differences never straddle the kink of the absolute error.
        let pred = nets.synth.forward(&state.synth, &mix_logmag, &features).unwrap();
        let mut away = |m: &Array2<f64>| {
            m.mapv(|p| {
                let d = rng.random_range(0.1..0.3);
                if p + d <= 1.0 && (p - d < 0.0 || rng.random_bool(0.5)) {
                    p + d
                } else {
                    p - d
                }
            })
        };
        let target = MaskPair::new(away(&pred.left), away(&pred.right)).unwrap();
        Fixture {
            nets,
            state,
            mix_logmag,
            mix_mag,
            features,
            target,
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    #[test]
    fn state_round_trips_through_json() {
        let fx = fixture(1);
        let s = serde_json::to_string(&fx.state).unwrap();
        let back: ModelState = serde_json::from_str(&s).unwrap();
        assert_eq!(back, fx.state);
        assert!(back.all_finite());
    }

    #[test]
    fn lambda_zero_gradient_is_pure_recon() {
        let fx = fixture(2);
        let mut g0 = vec![0.0; fx.state.synth.len()];
        synth_objective(&fx.nets, &fx.state, fx.view(), 0.0, Some(&mut g0), None).unwrap();
        let (pred, cache) = fx
            .nets
            .synth
            .forward_train(&fx.state.synth, &fx.mix_logmag, &fx.features)
            .unwrap();
        let (gl, gr) = loss::recon_grad(&pred, &fx.target).unwrap();
        let mut g1 = vec![0.0; g0.len()];
        fx.nets.synth.backward(&fx.state.synth, &cache, &gl, &gr, &mut g1).unwrap();
        assert_eq!(g0, g1);
        // And it matches finite differences of recon alone.
        let h = 1e-6;
        for i in (0..g0.len()).step_by(7) {
            let mut s = fx.state.clone();
            s.synth[i] += h;
            let up = synth_objective(&fx.nets, &s, fx.view(), 0.0, None, None).unwrap().recon;
            s.synth[i] -= 2.0 * h;
            let dn = synth_objective(&fx.nets, &s, fx.view(), 0.0, None, None).unwrap().recon;
            let fd = (up - dn) / (2.0 * h);
            assert!((fd - g0[i]).abs() < 1e-6, "param {i}: fd {fd} analytic {}", g0[i]);
        }
        // A different classifier leaves the lambda = 0 gradient unchanged.
        let mut other = fx.state.clone();
        other.cls.iter_mut().for_each(|v| *v *= -1.5);
        let mut g2 = vec![0.0; g0.len()];
        synth_objective(&fx.nets, &other, fx.view(), 0.0, Some(&mut g2), None).unwrap();
        assert_eq!(g0, g2);
    }

    #[test]
    fn cls_objective_counts_and_gradient() {
        let fx = fixture(3);
        let mut g = vec![0.0; fx.state.cls.len()];
        let (loss, correct) = cls_objective(&fx.nets, &fx.state, fx.view(), Some(&mut g)).unwrap();
        assert!(loss.is_finite() && correct <= 2);
        let h = 1e-6;
        for i in (0..g.len()).step_by(11) {
            let mut s = fx.state.clone();
            s.cls[i] += h;
            let up = cls_objective(&fx.nets, &s, fx.view(), None).unwrap().0;
            s.cls[i] -= 2.0 * h;
            let dn = cls_objective(&fx.nets, &s, fx.view(), None).unwrap().0;
            assert!(((up - dn) / (2.0 * h) - g[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn total_loss_gradient_matches_central_differences() {
        let fx = fixture(7);
        let lambda = DEFAULT_LAMBDA_CLS;
        let mut gs = vec![0.0; fx.state.synth.len()];
        let mut gc = vec![0.0; fx.state.cls.len()];
        synth_objective(&fx.nets, &fx.state, fx.view(), lambda, Some(&mut gs), Some(&mut gc)).unwrap();
        let h = 1e-3;
        let total = |s: &ModelState| {
            synth_objective(&fx.nets, s, fx.view(), lambda, None, None)
                .unwrap()
                .total
        };
        let mut worst = (0.0f64, String::new());
        for (which, n) in [("synth", gs.len()), ("cls", gc.len())] {
            for i in 0..n {
                let mut s = fx.state.clone();
                let p = if which == "synth" { &mut s.synth } else { &mut s.cls };
                let orig = p[i];
                p[i] = orig + h;
                let up = total(&s);
                let p = if which == "synth" { &mut s.synth } else { &mut s.cls };
                p[i] = orig - h;
                let dn = total(&s);
                let fd = (up - dn) / (2.0 * h);
                let an = if which == "synth" { gs[i] } else { gc[i] };
                let e = rel_err(an, fd);
                if e > worst.0 {
                    worst = (e, format!("{which}[{i}]: analytic {an:e} fd {fd:e}"));
                }
            }
        }
        assert!(worst.0 < 1e-4, "worst relative error {:e} at {}", worst.0, worst.1);
    }
}
