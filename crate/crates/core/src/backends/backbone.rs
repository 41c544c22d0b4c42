//! Two-layer convolutional noise predictor with an analytic backward pass.
//!
//! ```text
//! hidden = tanh(conv3x3(x_in) + b1 + W_t · time(t) + W_c · pooled(ctx))
//! eps    = conv1x1(hidden) + b2
//! ```
//!
//! The context term plays the role of cross-attention: it is the only path
//! through which the reference embedding reaches the prediction.

use ndarray::Array3;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{BackboneSpec, DenoisingBackbone, Embedding, TrainableBackbone};
use crate::error::{Error, Result};
use crate::imaging::LatentTensor;

pub const TIME_FEATURES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvBackboneConfig {
    pub input_channels: usize,
    pub output_channels: usize,
    pub hidden_channels: usize,
    pub context_width: usize,
    pub train_timesteps: usize,
}

#[derive(Debug, Clone, Copy)]
struct Layout {
    w1: usize,
    b1: usize,
    wt: usize,
    wc: usize,
    w2: usize,
    b2: usize,
    total: usize,
}

impl ConvBackboneConfig {
    fn layout(&self) -> Layout {
        let (i, o, h, c) = (
            self.input_channels,
            self.output_channels,
            self.hidden_channels,
            self.context_width,
        );
        let w1 = 0;
        let b1 = w1 + h * i * 9;
        let wt = b1 + h;
        let wc = wt + h * TIME_FEATURES;
        let w2 = wc + h * c;
        let b2 = w2 + o * h;
        Layout {
            w1,
            b1,
            wt,
            wc,
            w2,
            b2,
            total: b2 + o,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBackbone {
    config: ConvBackboneConfig,
    spec: BackboneSpec,
    params: Vec<f64>,
}

fn time_features(t: usize, total: usize) -> [f64; TIME_FEATURES] {
    let s = t as f64 / total as f64;
    let pi = std::f64::consts::PI;
    [s, (pi * s).sin(), (pi * s).cos(), (2.0 * pi * s).sin()]
}

impl ConvBackbone {
    pub fn from_parameters(config: ConvBackboneConfig, params: Vec<f64>) -> Result<Self> {
        if config.input_channels == 0 || config.output_channels == 0 || config.hidden_channels == 0 {
            return Err(Error::validation("backbone channel counts must be positive"));
        }
        if config.output_channels > config.input_channels {
            return Err(Error::validation("backbone input must contain the noisy latent"));
        }
        if params.len() != config.parameter_count() {
            return Err(Error::validation(format!(
                "expected {} parameters, got {}",
                config.parameter_count(),
                params.len()
            )));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("non-finite backbone parameter"));
        }
        let spec = BackboneSpec {
            input_channels: config.input_channels,
            output_channels: config.output_channels,
            context_width: config.context_width,
            train_timesteps: config.train_timesteps,
        };
        Ok(Self { config, spec, params })
    }

    pub fn seeded(config: ConvBackboneConfig, seed: u64) -> Result<Self> {
        let l = config.layout();
        let mut rng = crate::seeds::rng(seed);
        let mut normal = |scale: f64| -> f64 {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        };
        let mut params = vec![0.0; l.total];
        let s1 = 1.0 / ((config.input_channels * 9) as f64).sqrt();
        let sc = 1.0 / (config.context_width.max(1) as f64).sqrt();
        let s2 = 0.1 / (config.hidden_channels as f64).sqrt();
        params[l.w1..l.b1].iter_mut().for_each(|p| *p = normal(s1));
        params[l.wt..l.wc].iter_mut().for_each(|p| *p = normal(0.5));
        params[l.wc..l.w2].iter_mut().for_each(|p| *p = normal(sc));
        params[l.w2..l.b2].iter_mut().for_each(|p| *p = normal(s2));
        Self::from_parameters(config, params)
    }

    pub fn config(&self) -> &ConvBackboneConfig {
        &self.config
    }

    /// Input-layer weight tensor shape `(hidden, input, 3, 3)`.
    pub fn input_weight_shape(&self) -> [usize; 4] {
        [self.config.hidden_channels, self.config.input_channels, 3, 3]
    }

    fn check_context(&self, ctx: &Embedding) -> Result<Vec<f64>> {
        if ctx.width() != self.config.context_width {
            return Err(Error::validation(format!(
                "context width {} does not match backbone {}",
                ctx.width(),
                self.config.context_width
            )));
        }
        Ok(ctx.pooled())
    }

    /// Hidden activations `tanh(a)`, shape `(hidden, h, w)` flattened.
    fn hidden(&self, x: &[f64], h: usize, w: usize, t: usize, ctx: &[f64]) -> Vec<f64> {
        let cfg = &self.config;
        let l = cfg.layout();
        let p = &self.params;
        let tf = time_features(t, cfg.train_timesteps);
        let hw = h * w;
        let mut act = vec![0.0; cfg.hidden_channels * hw];
        for hc in 0..cfg.hidden_channels {
            let mut bias = p[l.b1 + hc];
            for (k, f) in tf.iter().enumerate() {
                bias += p[l.wt + hc * TIME_FEATURES + k] * f;
            }
            for (k, c) in ctx.iter().enumerate() {
                bias += p[l.wc + hc * cfg.context_width + k] * c;
            }
            let out = &mut act[hc * hw..(hc + 1) * hw];
            out.iter_mut().for_each(|v| *v = bias);
            for ic in 0..cfg.input_channels {
                let plane = &x[ic * hw..(ic + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let wgt = p[l.w1 + ((hc * cfg.input_channels + ic) * 3 + ky) * 3 + kx];
                        if wgt == 0.0 {
                            continue;
                        }
                        for i in 0..h {
                            let si = i as isize + ky as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            let row = &plane[si as usize * w..(si as usize + 1) * w];
                            for j in 0..w {
                                let sj = j as isize + kx as isize - 1;
                                if sj >= 0 && sj < w as isize {
                                    out[i * w + j] += wgt * row[sj as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        act.iter_mut().for_each(|v| *v = v.tanh());
        act
    }
}

impl DenoisingBackbone for ConvBackbone {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn predict_noise(&self, x_in: &LatentTensor, t: usize, ctx: &Embedding) -> Result<LatentTensor> {
        self.check_input(x_in, t)?;
        let ctx = self.check_context(ctx)?;
        let (_, h, w) = x_in.shape();
        let x = x_in.data().as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let act = self.hidden(x, h, w, t, &ctx);
        let cfg = &self.config;
        let l = cfg.layout();
        let hw = h * w;
        let mut out = vec![0.0; cfg.output_channels * hw];
        for oc in 0..cfg.output_channels {
            let dst = &mut out[oc * hw..(oc + 1) * hw];
            dst.iter_mut().for_each(|v| *v = self.params[l.b2 + oc]);
            for hc in 0..cfg.hidden_channels {
                let wgt = self.params[l.w2 + oc * cfg.hidden_channels + hc];
                let src = &act[hc * hw..(hc + 1) * hw];
                dst.iter_mut().zip(src).for_each(|(d, s)| *d += wgt * s);
            }
        }
        LatentTensor::new(Array3::from_shape_vec((cfg.output_channels, h, w), out).expect("shape"))
    }
}

impl TrainableBackbone for ConvBackbone {
    fn parameters(&self) -> &[f64] {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn backward(&self, x_in: &LatentTensor, t: usize, ctx: &Embedding, grad_output: &LatentTensor) -> Result<Vec<f64>> {
        self.check_input(x_in, t)?;
        let ctx = self.check_context(ctx)?;
        let cfg = &self.config;
        let (_, h, w) = x_in.shape();
        if grad_output.shape() != (cfg.output_channels, h, w) {
            return Err(Error::validation("gradient shape does not match backbone output"));
        }
        let l = cfg.layout();
        let p = &self.params;
        let hw = h * w;
        let x = x_in.data().as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let g = grad_output.data().as_standard_layout();
        let g = g.as_slice().expect("standard layout");
        let act = self.hidden(x, h, w, t, &ctx);
        let tf = time_features(t, cfg.train_timesteps);
        let mut grad = vec![0.0; l.total];

        for oc in 0..cfg.output_channels {
            let go = &g[oc * hw..(oc + 1) * hw];
            grad[l.b2 + oc] = go.iter().sum();
            for hc in 0..cfg.hidden_channels {
                let a = &act[hc * hw..(hc + 1) * hw];
                grad[l.w2 + oc * cfg.hidden_channels + hc] = go.iter().zip(a).map(|(u, v)| u * v).sum();
            }
        }

        // d(loss)/d(pre-activation)
        let mut delta = vec![0.0; cfg.hidden_channels * hw];
        for hc in 0..cfg.hidden_channels {
            for oc in 0..cfg.output_channels {
                let wgt = p[l.w2 + oc * cfg.hidden_channels + hc];
                let go = &g[oc * hw..(oc + 1) * hw];
                delta[hc * hw..(hc + 1) * hw]
                    .iter_mut()
                    .zip(go)
                    .for_each(|(d, u)| *d += wgt * u);
            }
            let a = &act[hc * hw..(hc + 1) * hw];
            delta[hc * hw..(hc + 1) * hw]
                .iter_mut()
                .zip(a)
                .for_each(|(d, v)| *d *= 1.0 - v * v);
        }

        for hc in 0..cfg.hidden_channels {
            let d = &delta[hc * hw..(hc + 1) * hw];
            let sum: f64 = d.iter().sum();
            grad[l.b1 + hc] = sum;
            for (k, f) in tf.iter().enumerate() {
                grad[l.wt + hc * TIME_FEATURES + k] = sum * f;
            }
            for (k, c) in ctx.iter().enumerate() {
                grad[l.wc + hc * cfg.context_width + k] = sum * c;
            }
            for ic in 0..cfg.input_channels {
                let plane = &x[ic * hw..(ic + 1) * hw];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let mut acc = 0.0;
                        for i in 0..h {
                            let si = i as isize + ky as isize - 1;
                            if si < 0 || si >= h as isize {
                                continue;
                            }
                            for j in 0..w {
                                let sj = j as isize + kx as isize - 1;
                                if sj >= 0 && sj < w as isize {
                                    acc += d[i * w + j] * plane[si as usize * w + sj as usize];
                                }
                            }
                        }
                        grad[l.w1 + ((hc * cfg.input_channels + ic) * 3 + ky) * 3 + kx] = acc;
                    }
                }
            }
        }
        Ok(grad)
    }

    fn adapt_input_channels(&self, new_count: usize) -> Result<Self> {
        let old = self.config;
        if new_count < old.input_channels {
            return Err(Error::validation(format!(
                "cannot shrink backbone input from {} to {new_count} channels",
                old.input_channels
            )));
        }
        let new = ConvBackboneConfig {
            input_channels: new_count,
            ..old
        };
        let (lo, ln) = (old.layout(), new.layout());
        let mut params = vec![0.0; ln.total];
        for hc in 0..old.hidden_channels {
            for ic in 0..old.input_channels {
                for k in 0..9 {
                    params[ln.w1 + (hc * new_count + ic) * 9 + k] =
                        self.params[lo.w1 + (hc * old.input_channels + ic) * 9 + k];
                }
            }
        }
        params[ln.b1..].copy_from_slice(&self.params[lo.b1..]);
        Self::from_parameters(new, params)
    }
}
