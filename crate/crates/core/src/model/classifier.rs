//! Correspondence classifier: scores whether a (features, left, right)
//! triple is in the correct left/right order.
//!
//! Each input is mean-pooled over frames. Features go through their own
//! projection; both spectra share one projection. The three embeddings are
//! concatenated in (features, a, b) order and fed to three rectified fully
//! connected layers and a sigmoid output.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{sigmoid, Slot};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub feature_dim: usize,
    pub n_bins: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
}

impl ClassifierConfig {
    pub fn new(feature_dim: usize, n_bins: usize) -> Self {
        Self {
            feature_dim,
            n_bins,
            embed_dim: 16,
            hidden_dims: vec![64, 32, 16],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dims.len() != 3 {
            return Err(Error::invalid(format!(
                "classifier needs exactly 3 hidden layers, got {}",
                self.hidden_dims.len()
            )));
        }
        if self.feature_dim == 0
            || self.n_bins == 0
            || self.embed_dim == 0
            || self.hidden_dims.contains(&0)
        {
            return Err(Error::invalid("classifier dimensions must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Dense {
    w: Slot,
    b: Slot,
    n_in: usize,
    n_out: usize,
}

impl Dense {
    fn forward(&self, p: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, b) = (self.w.get(p), self.b.get(p));
        (0..self.n_out)
            .map(|o| {
                b[o] + w[o * self.n_in..(o + 1) * self.n_in]
                    .iter()
                    .zip(x)
                    .map(|(a, v)| a * v)
                    .sum::<f64>()
            })
            .collect()
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, p: &[f64], x: &[f64], gy: &[f64], grads: &mut [f64]) -> Vec<f64> {
        let w = self.w.get(p);
        let mut gx = vec![0.0; self.n_in];
        for (o, &g) in gy.iter().enumerate() {
            grads[self.b.off + o] += g;
            let row = self.w.off + o * self.n_in;
            for i in 0..self.n_in {
                grads[row + i] += g * x[i];
                gx[i] += g * w[o * self.n_in + i];
            }
        }
        gx
    }
}

#[derive(Debug, Clone)]
pub struct Classifier {
    cfg: ClassifierConfig,
    feat_proj: Dense,
    spec_proj: Dense,
    hidden: Vec<Dense>,
    head: Dense,
    n_params: usize,
}

/// Pooled inputs and activations from a forward pass.
#[derive(Debug, Clone)]
pub struct ClassifierCache {
    frames: usize,
    pooled: [Vec<f64>; 3],
    concat: Vec<f64>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    pub logit: f64,
    pub prob: f64,
}

/// Gradients of the loss with respect to the spectral inputs, per frame.
#[derive(Debug, Clone)]
pub struct SpecGrads {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
}

fn mean_rows(x: &Array2<f64>) -> Vec<f64> {
    let n = x.nrows() as f64;
    x.columns().into_iter().map(|c| c.sum() / n).collect()
}

impl Classifier {
    pub fn new(cfg: ClassifierConfig) -> Result<Self> {
        cfg.validate()?;
        let mut off = 0;
        let mut dense = |n_in: usize, n_out: usize| {
            let d = Dense {
                w: Slot { off, len: n_in * n_out },
                b: Slot {
                    off: off + n_in * n_out,
                    len: n_out,
                },
                n_in,
                n_out,
            };
            off += n_in * n_out + n_out;
            d
        };
        let feat_proj = dense(cfg.feature_dim, cfg.embed_dim);
        let spec_proj = dense(cfg.n_bins, cfg.embed_dim);
        let mut n_in = 3 * cfg.embed_dim;
        let mut hidden = Vec::new();
        for &h in &cfg.hidden_dims {
            hidden.push(dense(n_in, h));
            n_in = h;
        }
        let head = dense(n_in, 1);
        Ok(Self {
            cfg,
            feat_proj,
            spec_proj,
            hidden,
            head,
            n_params: off,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn n_params(&self) -> usize {
        self.n_params
    }

    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut p = vec![0.0; self.n_params];
        for d in [&self.feat_proj, &self.spec_proj]
            .into_iter()
            .chain(&self.hidden)
            .chain([&self.head])
        {
            let bound = (6.0 / d.n_in as f64).sqrt();
            for v in d.w.get_mut(&mut p) {
                *v = rng.random_range(-bound..bound);
            }
            let bound = 1.0 / (d.n_in as f64).sqrt();
            for v in d.b.get_mut(&mut p) {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    /// Probability that `(a, b)` is the correct (left, right) order for the
    /// given features. `a` and `b` are log-compressed magnitudes.
    pub fn forward(
        &self,
        params: &[f64],
        features: &Array2<f64>,
        a: &Array2<f64>,
        b: &Array2<f64>,
    ) -> Result<f64> {
        Ok(self.forward_train(params, features, a, b)?.prob)
    }

    pub fn forward_train(
        &self,
        params: &[f64],
        features: &Array2<f64>,
        a: &Array2<f64>,
        b: &Array2<f64>,
    ) -> Result<ClassifierCache> {
        if params.len() != self.n_params {
            return Err(Error::shape(format!(
                "classifier expects {} parameters, got {}",
                self.n_params,
                params.len()
            )));
        }
        if a.dim() != b.dim() {
            return Err(Error::shape(format!(
                "spectra differ in shape: {:?} vs {:?}",
                a.dim(),
                b.dim()
            )));
        }
        if a.ncols() != self.cfg.n_bins || a.nrows() == 0 {
            return Err(Error::shape(format!(
                "spectra have {} bins, classifier expects {}",
                a.ncols(),
                self.cfg.n_bins
            )));
        }
        if features.ncols() != self.cfg.feature_dim || features.nrows() == 0 {
            return Err(Error::shape(format!(
                "features have dim {}, classifier expects {}",
                features.ncols(),
                self.cfg.feature_dim
            )));
        }
        let pooled = [mean_rows(features), mean_rows(a), mean_rows(b)];
        let mut concat = self.feat_proj.forward(params, &pooled[0]);
        concat.extend(self.spec_proj.forward(params, &pooled[1]));
        concat.extend(self.spec_proj.forward(params, &pooled[2]));
        let mut pre = Vec::new();
        let mut post = Vec::new();
        let mut h = concat.clone();
        for d in &self.hidden {
            let z = d.forward(params, &h);
            h = z.iter().map(|v| v.max(0.0)).collect();
            pre.push(z);
            post.push(h.clone());
        }
        let logit = self.head.forward(params, &h)[0];
        Ok(ClassifierCache {
            frames: a.nrows(),
            pooled,
            concat,
            pre,
            post,
            logit,
            prob: sigmoid(logit),
        })
    }

    /// Backpropagates `g_logit`. Parameter gradients are accumulated into
    /// `grads` when given; spectral input gradients are returned when
    /// `need_spec_grads`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ClassifierCache,
        g_logit: f64,
        grads: Option<&mut [f64]>,
        need_spec_grads: bool,
    ) -> Option<SpecGrads> {
        let mut scratch;
        let grads = match grads {
            Some(g) => g,
            None => {
                scratch = vec![0.0; self.n_params];
                &mut scratch[..]
            }
        };
        let last = cache.post.last().expect("three hidden layers");
        let mut g = self.head.backward(params, last, &[g_logit], grads);
        for (i, d) in self.hidden.iter().enumerate().rev() {
            for (gv, z) in g.iter_mut().zip(&cache.pre[i]) {
                if *z <= 0.0 {
                    *gv = 0.0;
                }
            }
            let input = if i == 0 { &cache.concat } else { &cache.post[i - 1] };
            g = d.backward(params, input, &g, grads);
        }
        let e = self.cfg.embed_dim;
        self.feat_proj.backward(params, &cache.pooled[0], &g[..e], grads);
        let ga = self.spec_proj.backward(params, &cache.pooled[1], &g[e..2 * e], grads);
        let gb = self.spec_proj.backward(params, &cache.pooled[2], &g[2 * e..], grads);
        if !need_spec_grads {
            return None;
        }
        let t = cache.frames;
        let spread = |gv: &[f64]| Array2::from_shape_fn((t, gv.len()), |(_, f)| gv[f] / t as f64);
        Some(SpecGrads {
            a: spread(&ga),
            b: spread(&gb),
        })
    }
}
