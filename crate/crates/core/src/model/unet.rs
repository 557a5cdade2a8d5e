//! U-Net mask synthesizer.
//!
//! Encoder: `depth` stride-2 convolutions (kernel 4, padding 1) with leaky
//! rectifiers, channels `base * 2^(l-1)`. At the bottleneck the visual
//! features are pooled to the bottleneck frame rate, projected, broadcast
//! over frequency and concatenated. Decoder: transposed convolutions with
//! rectifiers and skip concatenation; the last layer emits two sigmoid masks.
//! Inputs are zero-padded to a multiple of `2^depth` and outputs cropped.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops::{conv2d_backward, conv2d_forward, tconv2d_backward, tconv2d_forward, Dims, Geometry};
use super::{sigmoid, Slot};
use crate::dsp::MaskPair;
use crate::error::{Error, Result};

const GEOM: Geometry = Geometry {
    kernel: 4,
    stride: 2,
    pad: 1,
};
const MASK_HEADS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesizerConfig {
    pub depth: usize,
    pub base_channels: usize,
    pub feature_dim: usize,
    /// Width of the projected feature map injected at the bottleneck.
    pub feature_channels: usize,
    pub leaky_slope: f64,
}

impl Default for SynthesizerConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            base_channels: 16,
            feature_dim: crate::features::SYNTHETIC_DIM,
            feature_channels: 16,
            leaky_slope: 0.2,
        }
    }
}

impl SynthesizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("synthesizer depth must be >= 1"));
        }
        if self.depth > 12 {
            return Err(Error::invalid("synthesizer depth must be <= 12"));
        }
        if self.base_channels < 1 || self.feature_dim < 1 || self.feature_channels < 1 {
            return Err(Error::invalid(
                "synthesizer channel counts and feature dim must be >= 1",
            ));
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::invalid("leaky slope must be in [0, 1)"));
        }
        Ok(())
    }

    fn channels(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.base_channels << (level - 1)
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    w: Slot,
    b: Slot,
    cin: usize,
    cout: usize,
}

/// Parameter layout and forward/backward passes. Parameters live in a flat
/// slice owned by the caller.
#[derive(Debug, Clone)]
pub struct Synthesizer {
    cfg: SynthesizerConfig,
    enc: Vec<Layer>,
    /// `dec[l - 1]` is decoder level `l`; level 1 is the output layer.
    dec: Vec<Layer>,
    proj_w: Slot,
    proj_b: Slot,
    n_params: usize,
}

/// Activations kept from a training forward pass.
#[derive(Debug, Clone)]
pub struct SynthCache {
    frames: usize,
    bins: usize,
    enc_in: Vec<(Vec<f64>, Dims)>,
    enc_cols: Vec<Vec<f64>>,
    enc_pre: Vec<(Vec<f64>, Dims)>,
    dec_in: Vec<(Vec<f64>, Dims)>,
    dec_pre: Vec<(Vec<f64>, Dims)>,
    pooled: Vec<f64>,
    out: Vec<f64>,
}

impl Synthesizer {
    pub fn new(cfg: SynthesizerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut off = 0;
        let mut slot = |len: usize| {
            let s = Slot { off, len };
            off += len;
            s
        };
        let k2 = GEOM.kernel * GEOM.kernel;
        let mut enc = Vec::new();
        for l in 1..=cfg.depth {
            let (cin, cout) = (cfg.channels(l - 1), cfg.channels(l));
            enc.push(Layer {
                w: slot(cout * cin * k2),
                b: slot(cout),
                cin,
                cout,
            });
        }
        let proj_w = slot(cfg.feature_channels * cfg.feature_dim);
        let proj_b = slot(cfg.feature_channels);
        let mut dec = Vec::new();
        for l in 1..=cfg.depth {
            let cin = if l == cfg.depth {
                cfg.channels(l) + cfg.feature_channels
            } else {
                2 * cfg.channels(l)
            };
            let cout = if l == 1 { MASK_HEADS } else { cfg.channels(l - 1) };
            dec.push(Layer {
                w: slot(cin * cout * k2),
                b: slot(cout),
                cin,
                cout,
            });
        }
        Ok(Self {
            cfg,
            enc,
            dec,
            proj_w,
            proj_b,
            n_params: off,
        })
    }

    pub fn config(&self) -> &SynthesizerConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    /// He-uniform weights and `U(+-1/sqrt(fan_in))` biases, using each
    /// layer's effective fan-in.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        let mut fill = |w: &Slot, b: &Slot, fan_in: usize, rng: &mut R| {
            let bound = (6.0 / fan_in as f64).sqrt();
            for v in w.get_mut(&mut p) {
                *v = rng.random_range(-bound..bound);
            }
            let bound = 1.0 / (fan_in as f64).sqrt();
            for v in b.get_mut(&mut p) {
                *v = rng.random_range(-bound..bound);
            }
        };
        let k2 = GEOM.kernel * GEOM.kernel;
        for layer in &self.enc {
            fill(&layer.w, &layer.b, layer.cin * k2, rng);
        }
        fill(&self.proj_w, &self.proj_b, self.cfg.feature_dim, rng);
        // A stride-2 transposed convolution feeds each output from k^2/4 taps.
        for layer in &self.dec {
            fill(&layer.w, &layer.b, layer.cin * k2 / 4, rng);
        }
        p
    }

    fn check_inputs(&self, params: &[f64], mix: &Array2<f64>, feats: &Array2<f64>) -> Result<()> {
        if params.len() != self.n_params {
            return Err(Error::shape(format!(
                "synthesizer expects {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        if mix.nrows() == 0 || mix.ncols() == 0 {
            return Err(Error::shape("empty spectrogram"));
        }
        if feats.nrows() != mix.nrows() {
            return Err(Error::shape(format!(
                "features have {} frames, spectrogram has {}",
                feats.nrows(),
                mix.nrows()
            )));
        }
        if feats.ncols() != self.cfg.feature_dim {
            return Err(Error::shape(format!(
                "features have dim {}, synthesizer expects {}",
                feats.ncols(),
                self.cfg.feature_dim
            )));
        }
        Ok(())
    }

    /// Predicts the left/right masks for one chunk.
    pub fn forward(&self, params: &[f64], mix_logmag: &Array2<f64>, features: &Array2<f64>) -> Result<MaskPair> {
        Ok(self.forward_train(params, mix_logmag, features)?.0)
    }

    pub fn forward_train(
        &self,
        params: &[f64],
        mix_logmag: &Array2<f64>,
        features: &Array2<f64>,
    ) -> Result<(MaskPair, SynthCache)> {
        self.check_inputs(params, mix_logmag, features)?;
        let (frames, bins) = mix_logmag.dim();
        let unit = 1usize << self.cfg.depth;
        let (hp, wp) = (frames.div_ceil(unit) * unit, bins.div_ceil(unit) * unit);
        let slope = self.cfg.leaky_slope;

        let mut x = vec![0.0; hp * wp];
        for ((t, f), &v) in mix_logmag.indexed_iter() {
            x[t * wp + f] = v;
        }
        let mut cur = (x, Dims::new(1, hp, wp));
        let mut enc_in = Vec::with_capacity(self.cfg.depth);
        let mut enc_cols = Vec::with_capacity(self.cfg.depth);
        let mut enc_pre = Vec::with_capacity(self.cfg.depth);
        let mut enc_out: Vec<Vec<f64>> = Vec::with_capacity(self.cfg.depth);
        for layer in &self.enc {
            let mut cols = Vec::new();
            let (z, zd) = conv2d_forward(
                &cur.0,
                cur.1,
                layer.w.get(params),
                layer.b.get(params),
                layer.cout,
                GEOM,
                &mut cols,
            );
            let e: Vec<f64> = z.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
            enc_in.push(cur);
            enc_cols.push(cols);
            enc_pre.push((z, zd));
            enc_out.push(e.clone());
            cur = (e, zd);
        }

        // Bottleneck feature injection.
        let bd = cur.1;
        let dim = self.cfg.feature_dim;
        let mut pooled = vec![0.0; bd.h * dim];
        for r in 0..bd.h {
            for j in 0..unit {
                let t = (r * unit + j).min(frames - 1);
                for k in 0..dim {
                    pooled[r * dim + k] += features[[t, k]];
                }
            }
        }
        pooled.iter_mut().for_each(|v| *v /= unit as f64);
        let fc = self.cfg.feature_channels;
        let (pw, pb) = (self.proj_w.get(params), self.proj_b.get(params));
        let mut z = Vec::with_capacity((bd.c + fc) * bd.plane());
        z.extend_from_slice(&cur.0);
        for c in 0..fc {
            for r in 0..bd.h {
                let g: f64 = pb[c]
                    + (0..dim)
                        .map(|k| pw[c * dim + k] * pooled[r * dim + k])
                        .sum::<f64>();
                z.extend(std::iter::repeat_n(g, bd.w));
            }
        }
        let mut cur = (z, Dims::new(bd.c + fc, bd.h, bd.w));

        let mut dec_in = vec![(Vec::new(), Dims::new(0, 0, 0)); self.cfg.depth];
        let mut dec_pre = vec![(Vec::new(), Dims::new(0, 0, 0)); self.cfg.depth];
        for l in (1..=self.cfg.depth).rev() {
            let layer = &self.dec[l - 1];
            let (y, yd) = tconv2d_forward(
                &cur.0,
                cur.1,
                layer.w.get(params),
                layer.b.get(params),
                layer.cout,
                GEOM,
            );
            let input = std::mem::replace(&mut cur, (Vec::new(), Dims::new(0, 0, 0)));
            dec_in[l - 1] = input;
            if l > 1 {
                let skip = &enc_out[l - 2];
                let mut u = Vec::with_capacity(y.len() + skip.len());
                u.extend(y.iter().map(|&v| v.max(0.0)));
                u.extend_from_slice(skip);
                cur = (u, Dims::new(2 * yd.c, yd.h, yd.w));
            }
            dec_pre[l - 1] = (y, yd);
        }
        let (y1, y1d) = &dec_pre[0];
        let out: Vec<f64> = y1.iter().map(|&v| sigmoid(v)).collect();
        let plane = y1d.plane();
        let crop = |c: usize| {
            Array2::from_shape_fn((frames, bins), |(t, f)| out[c * plane + t * wp + f])
        };
        let masks = MaskPair::new(crop(0), crop(1))?;
        Ok((
            masks,
            SynthCache {
                frames,
                bins,
                enc_in,
                enc_cols,
                enc_pre,
                dec_in,
                dec_pre,
                pooled,
                out,
            },
        ))
    }

    /// Accumulates into `grads` the parameter gradient given the loss
    /// gradient with respect to each predicted mask.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &SynthCache,
        g_left: &Array2<f64>,
        g_right: &Array2<f64>,
        grads: &mut [f64],
    ) -> Result<()> {
        let dims = (cache.frames, cache.bins);
        if g_left.dim() != dims || g_right.dim() != dims {
            return Err(Error::shape("mask gradient shape differs from the forward pass"));
        }
        if grads.len() != self.n_params {
            return Err(Error::shape("gradient buffer has the wrong length"));
        }
        let depth = self.cfg.depth;
        let slope = self.cfg.leaky_slope;
        let (_, y1d) = cache.dec_pre[0];
        let wp = y1d.w;
        let plane = y1d.plane();
        let mut gy = vec![0.0; y1d.len()];
        for (c, g) in [g_left, g_right].into_iter().enumerate() {
            for ((t, f), &v) in g.indexed_iter() {
                let i = c * plane + t * wp + f;
                let s = cache.out[i];
                gy[i] = v * s * (1.0 - s);
            }
        }

        let mut g_enc: Vec<Vec<f64>> = cache.enc_pre.iter().map(|(z, _)| vec![0.0; z.len()]).collect();
        for l in 1..=depth {
            let layer = &self.dec[l - 1];
            let (u, ud) = &cache.dec_in[l - 1];
            let (_, yd) = cache.dec_pre[l - 1];
            let (gw, gb) = split2(grads, &layer.w, &layer.b);
            let gu = tconv2d_backward(&gy, yd, u, *ud, layer.w.get(params), GEOM, gw, gb);
            let split = self.cfg.channels(l) * ud.plane();
            if l == depth {
                add_into(&mut g_enc[l - 1], &gu[..split]);
                self.project_backward(cache, &gu[split..], *ud, grads);
            } else {
                let (y_up, _) = &cache.dec_pre[l];
                gy = gu[..split]
                    .iter()
                    .zip(y_up)
                    .map(|(&g, &y)| if y > 0.0 { g } else { 0.0 })
                    .collect();
                add_into(&mut g_enc[l - 1], &gu[split..]);
            }
        }

        for l in (1..=depth).rev() {
            let layer = &self.enc[l - 1];
            let (z, zd) = &cache.enc_pre[l - 1];
            let gz: Vec<f64> = g_enc[l - 1]
                .iter()
                .zip(z)
                .map(|(&g, &v)| if v > 0.0 { g } else { slope * g })
                .collect();
            let (_, xd) = cache.enc_in[l - 1];
            let (gw, gb) = split2(grads, &layer.w, &layer.b);
            let gx = conv2d_backward(
                &gz,
                *zd,
                xd,
                layer.w.get(params),
                &cache.enc_cols[l - 1],
                GEOM,
                gw,
                gb,
                l > 1,
            );
            if let Some(gx) = gx {
                add_into(&mut g_enc[l - 2], &gx);
            }
        }
        Ok(())
    }

    fn project_backward(&self, cache: &SynthCache, g_feat: &[f64], ud: Dims, grads: &mut [f64]) {
        let (fc, dim) = (self.cfg.feature_channels, self.cfg.feature_dim);
        let (h, w) = (ud.h, ud.w);
        let (gw, gb) = split2(grads, &self.proj_w, &self.proj_b);
        for c in 0..fc {
            for r in 0..h {
                let g: f64 = g_feat[(c * h + r) * w..(c * h + r + 1) * w].iter().sum();
                gb[c] += g;
                for k in 0..dim {
                    gw[c * dim + k] += g * cache.pooled[r * dim + k];
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Disjoint mutable views of a weight slot and the bias slot right after it.
fn split2<'a>(grads: &'a mut [f64], w: &Slot, b: &Slot) -> (&'a mut [f64], &'a mut [f64]) {
    debug_assert_eq!(w.off + w.len, b.off);
    let (head, tail) = grads[w.off..b.off + b.len].split_at_mut(w.len);
    (head, tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> SynthesizerConfig {
        SynthesizerConfig {
            depth: 2,
            base_channels: 2,
            feature_dim: 3,
            feature_channels: 2,
            leaky_slope: 0.2,
        }
    }

    fn inputs(frames: usize, bins: usize, dim: usize, seed: u64) -> (Array2<f64>, Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Array2::from_shape_fn((frames, bins), |_| rng.random_range(0.0..3.0));
        let f = Array2::from_shape_fn((frames, dim), |_| rng.random_range(-1.0..1.0));
        (x, f)
    }

    #[test]
    fn output_shape_and_range() {
        let s = Synthesizer::new(tiny()).unwrap();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        for (t, b) in [(8, 9), (101, 33), (5, 4)] {
            let (x, f) = inputs(t, b, 3, 1);
            let m = s.forward(&p, &x, &f).unwrap();
            assert_eq!(m.dim(), (t, b));
            for v in m.left.iter().chain(m.right.iter()) {
                assert!(*v > 0.0 && *v < 1.0);
            }
        }
    }

    #[test]
    fn feature_permutation_changes_output() {
        let s = Synthesizer::new(tiny()).unwrap();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(4));
        let (x, f) = inputs(8, 9, 3, 2);
        let mut g = f.clone();
        for t in 0..8 {
            g.row_mut(t).assign(&f.row(7 - t));
        }
        let a = s.forward(&p, &x, &f).unwrap();
        let b = s.forward(&p, &x, &g).unwrap();
        let diff = a
            .left
            .iter()
            .zip(b.left.iter())
            .map(|(u, v)| (u - v).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn forward_is_deterministic() {
        let s = Synthesizer::new(tiny()).unwrap();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(9));
        let (x, f) = inputs(12, 20, 3, 3);
        assert_eq!(s.forward(&p, &x, &f).unwrap(), s.forward(&p, &x, &f).unwrap());
    }

    #[test]
    fn shape_errors() {
        let s = Synthesizer::new(tiny()).unwrap();
        let p = s.init_params(&mut ChaCha8Rng::seed_from_u64(0));
        let (x, f) = inputs(8, 9, 3, 1);
        let (_, f_short) = inputs(7, 9, 3, 1);
        let (_, f_wide) = inputs(8, 9, 4, 1);
        assert!(s.forward(&p, &x, &f_short).unwrap_err().is_validation());
        assert!(s.forward(&p, &x, &f_wide).is_err());
        assert!(s.forward(&p[1..], &x, &f).is_err());
        assert!(Synthesizer::new(SynthesizerConfig { depth: 0, ..tiny() }).is_err());
    }
}
