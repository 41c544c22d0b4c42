//! Forward noising, epsilon-prediction losses, reference dropout,
//! classifier-free guidance and the deterministic DDIM sampler.

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::{Array3, Zip};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::backends::{BackboneSpec, DenoisingBackbone, Embedding, TrainableBackbone};
use crate::conditioning::ConditioningBundle;
use crate::error::{Error, Result};
use crate::imaging::LatentTensor;

pub const DEFAULT_TRAIN_TIMESTEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 0.00085;
pub const DEFAULT_BETA_END: f64 = 0.012;
pub const REFERENCE_DROP_PROB: f64 = 0.2;

/// Cumulative signal levels `ᾱ_t`, strictly decreasing in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    id: String,
    alphas_cumprod: Vec<f64>,
}

impl NoiseSchedule {
    /// Betas linear in `sqrt(β)` between `beta_start` and `beta_end`, as used
    /// by the latent-diffusion inpainting backbones.
    pub fn scaled_linear(train_timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if train_timesteps < 2 || !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
            return Err(Error::validation("invalid noise schedule parameters"));
        }
        let (a, b) = (beta_start.sqrt(), beta_end.sqrt());
        let n = (train_timesteps - 1) as f64;
        let mut prod = 1.0;
        let alphas_cumprod = (0..train_timesteps)
            .map(|i| {
                let s = a + (b - a) * i as f64 / n;
                prod *= 1.0 - s * s;
                prod
            })
            .collect();
        Ok(Self {
            id: format!("scaled_linear:{beta_start}:{beta_end}:{train_timesteps}"),
            alphas_cumprod,
        })
    }

    pub fn from_alphas_cumprod(alphas_cumprod: Vec<f64>) -> Result<Self> {
        if alphas_cumprod.len() < 2 {
            return Err(Error::validation("schedule needs at least two timesteps"));
        }
        if alphas_cumprod.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(Error::validation("ᾱ values must lie in (0, 1]"));
        }
        if alphas_cumprod.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::validation("ᾱ must be strictly decreasing"));
        }
        let id = format!("table:{}", crate::dataset::config_hash(&alphas_cumprod));
        Ok(Self { id, alphas_cumprod })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn train_timesteps(&self) -> usize {
        self.alphas_cumprod.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alphas_cumprod
            .get(t)
            .copied()
            .ok_or_else(|| Error::validation(format!("timestep {t} outside [0, {})", self.train_timesteps())))
    }

    /// `x_t = √ᾱ_t · x0 + √(1−ᾱ_t) · ε`.
    pub fn add_noise(&self, x0: &LatentTensor, eps: &LatentTensor, t: usize) -> Result<LatentTensor> {
        if x0.shape() != eps.shape() {
            return Err(Error::validation("add_noise: latent and noise shapes differ"));
        }
        let ab = self.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        LatentTensor::new(
            Zip::from(x0.data())
                .and(eps.data())
                .map_collect(|&x, &e| sa * x + sn * e),
        )
    }

    /// Trailing spacing: `round(T − i·T/steps) − 1`, starting at `T − 1`.
    pub fn inference_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.train_timesteps();
        if steps == 0 || steps > total {
            return Err(Error::validation(format!("inference steps must be in [1, {total}]")));
        }
        let ratio = total as f64 / steps as f64;
        Ok((0..steps)
            .map(|i| (total as f64 - i as f64 * ratio).round() as usize - 1)
            .collect())
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::scaled_linear(DEFAULT_TRAIN_TIMESTEPS, DEFAULT_BETA_START, DEFAULT_BETA_END)
            .expect("default schedule is valid")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GuidanceConfig {
    pub scale: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            scale: 4.0,
            steps: 50,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale.is_finite() && self.scale >= 0.0) {
            return Err(Error::validation("guidance scale must be finite and non-negative"));
        }
        if self.steps == 0 {
            return Err(Error::validation("at least one inference step is required"));
        }
        Ok(())
    }
}

pub fn gaussian_latent(shape: (usize, usize, usize), rng: &mut impl Rng) -> LatentTensor {
    let data = Array3::from_shape_simple_fn(shape, || StandardNormal.sample(rng));
    LatentTensor::new(data).expect("gaussian samples are finite")
}

/// `c_null` with probability `p`, else `c_ref`.
pub fn drop_reference<'a>(c_ref: &'a Embedding, c_null: &'a Embedding, p: f64, rng: &mut impl Rng) -> &'a Embedding {
    if rng.random_bool(p.clamp(0.0, 1.0)) {
        c_null
    } else {
        c_ref
    }
}

/// `(1 + w)·ε_cond − w·ε_uncond`.
pub fn cfg_combine(eps_cond: &LatentTensor, eps_uncond: &LatentTensor, w: f64) -> Result<LatentTensor> {
    if eps_cond.shape() != eps_uncond.shape() {
        return Err(Error::validation("cfg_combine: prediction shapes differ"));
    }
    LatentTensor::new(
        Zip::from(eps_cond.data())
            .and(eps_uncond.data())
            .map_collect(|&c, &u| (1.0 + w) * c - w * u),
    )
}

/// The random quantities of one training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDraw {
    pub t: usize,
    pub eps: LatentTensor,
    pub drop_reference: bool,
}

impl TrainingDraw {
    pub fn sample(
        bundle: &ConditioningBundle,
        schedule: &NoiseSchedule,
        p_drop: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let target = training_target(bundle)?;
        let t = rng.random_range(0..schedule.train_timesteps());
        let eps = gaussian_latent(target.shape(), rng);
        let drop_reference = rng.random_bool(p_drop.clamp(0.0, 1.0));
        Ok(Self { t, eps, drop_reference })
    }
}

fn training_target(bundle: &ConditioningBundle) -> Result<&LatentTensor> {
    bundle
        .target
        .as_ref()
        .ok_or_else(|| Error::validation("training needs a bundle with a target latent"))
}

fn training_input(
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    draw: &TrainingDraw,
) -> Result<(LatentTensor, usize)> {
    let x_t = schedule.add_noise(training_target(bundle)?, &draw.eps, draw.t)?;
    Ok((LatentTensor::concat(&[&x_t, &bundle.cond])?, bundle.cond.channels()))
}

fn draw_context<'a>(bundle: &'a ConditioningBundle, draw: &TrainingDraw) -> &'a Embedding {
    if draw.drop_reference {
        &bundle.c_null
    } else {
        &bundle.c_ref
    }
}

fn mse(a: &LatentTensor, b: &LatentTensor) -> f64 {
    let n = a.len() as f64;
    Zip::from(a.data())
        .and(b.data())
        .fold(0.0, |s, &p, &q| s + (p - q) * (p - q))
        / n
}

/// Epsilon-prediction loss for a fixed draw.
pub fn loss_for_draw<B: DenoisingBackbone + ?Sized>(
    backbone: &B,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    draw: &TrainingDraw,
) -> Result<f64> {
    let (x_in, _) = training_input(bundle, schedule, draw)?;
    let pred = backbone.predict_noise(&x_in, draw.t, draw_context(bundle, draw))?;
    Ok(mse(&pred, &draw.eps))
}

/// Loss and its parameter gradient for a fixed draw.
pub fn loss_and_grad_for_draw<B: TrainableBackbone>(
    backbone: &B,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    draw: &TrainingDraw,
) -> Result<(f64, Vec<f64>)> {
    let (x_in, _) = training_input(bundle, schedule, draw)?;
    let ctx = draw_context(bundle, draw);
    let pred = backbone.predict_noise(&x_in, draw.t, ctx)?;
    let n = pred.len() as f64;
    let grad_out = LatentTensor::new(
        Zip::from(pred.data())
            .and(draw.eps.data())
            .map_collect(|&p, &e| 2.0 * (p - e) / n),
    )?;
    let grad = backbone.backward(&x_in, draw.t, ctx, &grad_out)?;
    Ok((mse(&pred, &draw.eps), grad))
}

/// Samples `t`, `ε` and the reference dropout, then evaluates the loss.
pub fn training_loss<B: DenoisingBackbone + ?Sized>(
    backbone: &B,
    bundle: &ConditioningBundle,
    schedule: &NoiseSchedule,
    p_drop: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    let draw = TrainingDraw::sample(bundle, schedule, p_drop, rng)?;
    loss_for_draw(backbone, bundle, schedule, &draw)
}

/// Guided noise prediction. `w = 0` skips the unconditional branch.
pub fn guided_noise<B: DenoisingBackbone + ?Sized>(
    backbone: &B,
    x_in: &LatentTensor,
    t: usize,
    c_ref: &Embedding,
    c_null: &Embedding,
    w: f64,
) -> Result<LatentTensor> {
    let eps_cond = backbone.predict_noise(x_in, t, c_ref)?;
    if w == 0.0 {
        return Ok(eps_cond);
    }
    let eps_uncond = backbone.predict_noise(x_in, t, c_null)?;
    cfg_combine(&eps_cond, &eps_uncond, w)
}

/// Draws `z_T` from the guidance seed and denoises it.
pub fn sample<B: DenoisingBackbone + ?Sized>(
    backbone: &B,
    bundle: &ConditioningBundle,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
) -> Result<LatentTensor> {
    let c = backbone.spec().output_channels;
    let mut rng = crate::seeds::stream(guidance.seed, "noise");
    let z = gaussian_latent((c, bundle.cond.height(), bundle.cond.width()), &mut rng);
    sample_from_latent(backbone, bundle, guidance, schedule, z)
}

/// Deterministic DDIM (η = 0) from a given `z_T`; the last step lands on ᾱ = 1.
pub fn sample_from_latent<B: DenoisingBackbone + ?Sized>(
    backbone: &B,
    bundle: &ConditioningBundle,
    guidance: &GuidanceConfig,
    schedule: &NoiseSchedule,
    z: LatentTensor,
) -> Result<LatentTensor> {
    guidance.validate()?;
    if (z.height(), z.width()) != (bundle.cond.height(), bundle.cond.width()) {
        return Err(Error::validation("initial latent does not match the conditioning size"));
    }
    let steps = schedule.inference_timesteps(guidance.steps)?;
    let mut x = z;
    for (i, &t) in steps.iter().enumerate() {
        let x_in = LatentTensor::concat(&[&x, &bundle.cond])?;
        let eps = guided_noise(backbone, &x_in, t, &bundle.c_ref, &bundle.c_null, guidance.scale)?;
        if eps.shape() != x.shape() {
            return Err(Error::validation("backbone output does not match the latent shape"));
        }
        let ab = schedule.alpha_bar(t)?;
        let ab_prev = match steps.get(i + 1) {
            Some(&tp) => schedule.alpha_bar(tp)?,
            None => 1.0,
        };
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        let (sa_p, sn_p) = (ab_prev.sqrt(), (1.0 - ab_prev).sqrt());
        let next = Zip::from(x.data()).and(eps.data()).map_collect(|&xv, &e| {
            let x0 = (xv - sn * e) / sa;
            sa_p * x0 + sn_p * e
        });
        x = LatentTensor::new(next)?;
    }
    Ok(x)
}

/// Widens a pretrained backbone's input layer with zero-initialized channels.
pub fn adapt_input_channels<B: TrainableBackbone>(pretrained: &B, new_count: usize) -> Result<B> {
    pretrained.adapt_input_channels(new_count)
}

/// Counts forward evaluations of the wrapped backbone.
pub struct CountingBackbone<'a, B: ?Sized> {
    inner: &'a B,
    calls: AtomicUsize,
}

impl<'a, B: DenoisingBackbone + ?Sized> CountingBackbone<'a, B> {
    pub fn new(inner: &'a B) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl<B: DenoisingBackbone + ?Sized> DenoisingBackbone for CountingBackbone<'_, B> {
    fn spec(&self) -> &BackboneSpec {
        self.inner.spec()
    }

    fn predict_noise(&self, x_in: &LatentTensor, t: usize, ctx: &Embedding) -> Result<LatentTensor> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict_noise(x_in, t, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conditioning::StageKind;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn random_latent(shape: (usize, usize, usize), seed: u64) -> LatentTensor {
        gaussian_latent(shape, &mut crate::seeds::rng(seed))
    }

    fn emb(v: f64) -> Embedding {
        Embedding::new(Array2::from_elem((1, 3), v)).unwrap()
    }

    /// Returns a fixed tensor regardless of input.
    struct Constant {
        spec: BackboneSpec,
        out: LatentTensor,
    }

    impl DenoisingBackbone for Constant {
        fn spec(&self) -> &BackboneSpec {
            &self.spec
        }
        fn predict_noise(&self, x_in: &LatentTensor, t: usize, _ctx: &Embedding) -> Result<LatentTensor> {
            self.check_input(x_in, t)?;
            Ok(self.out.clone())
        }
    }

    fn bundle(c: usize, cond_channels: usize, target: Option<LatentTensor>) -> ConditioningBundle {
        ConditioningBundle {
            stage: StageKind::Direct,
            cond: random_latent((cond_channels, 4, 4), 91),
            c_ref: emb(1.0),
            c_null: emb(0.0),
            target: target.or(Some(LatentTensor::zeros(c, 4, 4))),
        }
    }

    fn constant(c: usize, cond: usize, out: LatentTensor) -> Constant {
        Constant {
            spec: BackboneSpec {
                input_channels: c + cond,
                output_channels: c,
                context_width: 3,
                train_timesteps: 1000,
            },
            out,
        }
    }

    #[test]
    fn default_schedule_shape() {
        let s = NoiseSchedule::default();
        assert_eq!(s.train_timesteps(), 1000);
        assert!((s.alpha_bar(0).unwrap() - (1.0 - 0.00085)).abs() < 1e-15);
        assert!(s.alpha_bar(999).unwrap() < 0.01);
        assert!(s.alpha_bar(1000).is_err());
        let steps = s.inference_timesteps(50).unwrap();
        assert_eq!((steps[0], steps[1], steps[49]), (999, 979, 19));
    }

    #[test]
    fn add_noise_closed_forms() {
        let s = NoiseSchedule::from_alphas_cumprod(vec![1.0, 0.64, 0.1]).unwrap();
        let x0 = random_latent((2, 3, 3), 1);
        let eps = random_latent((2, 3, 3), 2);
        assert_eq!(s.add_noise(&x0, &eps, 0).unwrap(), x0);
        let xt = s.add_noise(&x0, &eps, 1).unwrap();
        for ((a, b), c) in xt.data().iter().zip(x0.data()).zip(eps.data()) {
            assert!((a - (0.8 * b + 0.6 * c)).abs() < 1e-12);
        }
        let zero = LatentTensor::zeros(2, 3, 3);
        let only = s.add_noise(&x0, &zero, 2).unwrap();
        for (a, b) in only.data().iter().zip(x0.data()) {
            assert!((a - 0.1f64.sqrt() * b).abs() < 1e-15);
        }
        assert!(s.add_noise(&x0, &LatentTensor::zeros(1, 3, 3), 1).is_err());
        assert!(NoiseSchedule::from_alphas_cumprod(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn dropout_extremes() {
        let (a, b) = (emb(1.0), emb(0.0));
        let mut rng = crate::seeds::rng(0);
        assert!((0..100).all(|_| std::ptr::eq(drop_reference(&a, &b, 0.0, &mut rng), &a)));
        assert!((0..100).all(|_| std::ptr::eq(drop_reference(&a, &b, 1.0, &mut rng), &b)));
    }

    #[test]
    fn dropout_rate() {
        let (a, b) = (emb(1.0), emb(0.0));
        let mut rng = crate::seeds::stream(1, "dropout");
        let dropped = (0..20_000)
            .filter(|_| std::ptr::eq(drop_reference(&a, &b, 0.2, &mut rng), &b))
            .count();
        let rate = dropped as f64 / 20_000.0;
        assert!((0.19..=0.21).contains(&rate), "rate {rate}");
    }

    #[test]
    fn cfg_scalar_case() {
        let one = LatentTensor::new(Array3::from_elem((1, 2, 2), 1.0)).unwrap();
        let zero = LatentTensor::zeros(1, 2, 2);
        let g = cfg_combine(&one, &zero, 4.0).unwrap();
        assert!(g.data().iter().all(|&v| v == 5.0));
        assert!(cfg_combine(&one, &LatentTensor::zeros(2, 2, 2), 1.0).is_err());
    }

    #[test]
    fn exact_noise_predictor_has_zero_loss() {
        let s = NoiseSchedule::default();
        let b = bundle(2, 3, None);
        let draw = TrainingDraw::sample(&b, &s, 0.2, &mut crate::seeds::rng(3)).unwrap();
        let stub = constant(2, 3, draw.eps.clone());
        assert_eq!(loss_for_draw(&stub, &b, &s, &draw).unwrap(), 0.0);
    }

    #[test]
    fn zero_predictor_loss_is_noise_power() {
        let s = NoiseSchedule::default();
        let c = 4;
        let b = ConditioningBundle {
            cond: random_latent((1, 64, 64), 4),
            target: Some(LatentTensor::zeros(c, 64, 64)),
            ..bundle(c, 1, None)
        };
        let stub = constant(c, 1, LatentTensor::zeros(c, 64, 64));
        let loss = training_loss(&stub, &b, &s, 0.2, &mut crate::seeds::rng(5)).unwrap();
        // mean of n = 16384 squared unit normals: sd = sqrt(2 / n)
        let sd = (2.0 / (c * 64 * 64) as f64).sqrt();
        assert!((loss - 1.0).abs() < 3.0 * sd, "loss {loss}");
    }

    #[test]
    fn missing_target_and_channel_mismatch_are_errors() {
        let s = NoiseSchedule::default();
        let mut b = bundle(2, 3, None);
        let stub = constant(2, 4, LatentTensor::zeros(2, 4, 4));
        let mut rng = crate::seeds::rng(0);
        assert!(matches!(
            training_loss(&stub, &b, &s, 0.0, &mut rng),
            Err(Error::ChannelMismatch { .. })
        ));
        b.target = None;
        assert!(training_loss(&stub, &b, &s, 0.0, &mut rng).is_err());
    }

    /// Returns the noise that produced `x_t` from a known `x0`.
    struct Oracle {
        spec: BackboneSpec,
        x0: LatentTensor,
        schedule: NoiseSchedule,
    }

    impl DenoisingBackbone for Oracle {
        fn spec(&self) -> &BackboneSpec {
            &self.spec
        }
        fn predict_noise(&self, x_in: &LatentTensor, t: usize, _ctx: &Embedding) -> Result<LatentTensor> {
            let c = self.x0.channels();
            let x_t = x_in.channel_slice(0, c);
            let ab = self.schedule.alpha_bar(t)?;
            LatentTensor::new(
                Zip::from(x_t.data())
                    .and(self.x0.data())
                    .map_collect(|&x, &x0| (x - ab.sqrt() * x0) / (1.0 - ab).sqrt()),
            )
        }
    }

    #[test]
    fn one_step_inversion_recovers_x0() {
        let s = NoiseSchedule::default();
        let x0 = random_latent((4, 4, 4), 10);
        let eps = random_latent((4, 4, 4), 11);
        let b = bundle(4, 3, None);
        let oracle = Oracle {
            spec: BackboneSpec {
                input_channels: 7,
                output_channels: 4,
                context_width: 3,
                train_timesteps: 1000,
            },
            x0: x0.clone(),
            schedule: s.clone(),
        };
        let z = s.add_noise(&x0, &eps, 999).unwrap();
        let g = GuidanceConfig {
            steps: 1,
            ..GuidanceConfig::default()
        };
        let out = sample_from_latent(&oracle, &b, &g, &s, z).unwrap();
        for (a, b) in out.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn unguided_sampling_skips_the_unconditional_branch() {
        let s = NoiseSchedule::default();
        let b = bundle(2, 3, None);
        let stub = constant(2, 3, LatentTensor::zeros(2, 4, 4));
        for (w, per_step) in [(0.0, 1), (4.0, 2)] {
            let counter = CountingBackbone::new(&stub);
            let g = GuidanceConfig {
                scale: w,
                steps: 7,
                seed: 1,
            };
            sample(&counter, &b, &g, &s).unwrap();
            assert_eq!(counter.calls(), 7 * per_step);
        }
    }

    proptest! {
        #[test]
        fn cfg_identities(seed in 0u64..10_000, w in 0.0f64..10.0) {
            let a = random_latent((2, 3, 3), seed);
            let b = random_latent((2, 3, 3), seed + 1);
            prop_assert_eq!(cfg_combine(&a, &b, 0.0).unwrap(), a.clone());
            let same = cfg_combine(&a, &a, w).unwrap();
            for (x, y) in same.data().iter().zip(a.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            let g = cfg_combine(&a, &b, w).unwrap();
            for ((gv, av), bv) in g.data().iter().zip(a.data()).zip(b.data()) {
                prop_assert!((gv - (av + w * (av - bv))).abs() < 1e-12);
            }
        }

        #[test]
        fn add_noise_is_affine_in_x0(seed in 0u64..10_000, t in 0usize..1000) {
            let s = NoiseSchedule::default();
            let a = random_latent((1, 2, 2), seed);
            let b = random_latent((1, 2, 2), seed + 7);
            let eps = random_latent((1, 2, 2), seed + 13);
            let mid = LatentTensor::new((a.data() + b.data()) / 2.0).unwrap();
            let lhs = s.add_noise(&mid, &eps, t).unwrap();
            let xa = s.add_noise(&a, &eps, t).unwrap();
            let xb = s.add_noise(&b, &eps, t).unwrap();
            for ((l, p), q) in lhs.data().iter().zip(xa.data()).zip(xb.data()) {
                prop_assert!((l - (p + q) / 2.0).abs() < 1e-12);
            }
        }
    }
}
