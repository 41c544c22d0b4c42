//! Training and inference for the two-stage and direct methods, plus
//! checkpoint files.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{
    BackendSelection, Backends, ConvBackbone, DenoisingBackbone, DoubleParams, Embedding, TrainableBackbone,
};
use crate::conditioning::{Conditioner, ConditioningBundle, SceneInputs, StageKind};
use crate::dataset::{augment_reference, config_hash, AugmentConfig, ReferenceImage, TrainingRecord};
use crate::diffusion::{
    loss_and_grad_for_draw, loss_for_draw, sample, GuidanceConfig, NoiseSchedule, TrainingDraw, REFERENCE_DROP_PROB,
};
use crate::error::{Error, Result};
use crate::imaging::{average_channels, normalize_depth, BinaryMask, DepthMap, ImageRGB, Normalization, NormalizeMode};
use crate::render::PoseInputs;
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    /// Learning rate at step 0, raised linearly to `lr` over `warmup_steps`.
    pub initial_lr: f64,
    pub warmup_steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            initial_lr: 1e-9,
            warmup_steps: 10_000,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.lr
        } else {
            self.initial_lr + (self.lr - self.initial_lr) * step as f64 / self.warmup_steps as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_timesteps: crate::diffusion::DEFAULT_TRAIN_TIMESTEPS,
            beta_start: crate::diffusion::DEFAULT_BETA_START,
            beta_end: crate::diffusion::DEFAULT_BETA_END,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::scaled_linear(self.train_timesteps, self.beta_start, self.beta_end)
    }
}

/// Shapes of the latent space and the double backbone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub latent_channels: usize,
    pub spatial_factor: usize,
    pub embedding_width: usize,
    pub hidden_channels: usize,
    pub pretrained_tag: String,
    pub backend_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DoubleParams::default();
        Self {
            latent_channels: d.latent_channels,
            spatial_factor: d.spatial_factor,
            embedding_width: d.embedding_width,
            hidden_channels: d.hidden_channels,
            pretrained_tag: d.pretrained_tag,
            backend_seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub resolution: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Caps the step count below `epochs` worth of batches.
    pub max_steps: Option<usize>,
    pub validate_every: usize,
    pub reference_drop_prob: f64,
    pub optimizer: OptimizerConfig,
    pub schedule: ScheduleConfig,
    pub model: ModelConfig,
    pub guidance: GuidanceConfig,
    pub augment: AugmentConfig,
    pub backends: BackendSelection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            resolution: 512,
            batch_size: 32,
            epochs: 30,
            max_steps: None,
            validate_every: 1000,
            reference_drop_prob: REFERENCE_DROP_PROB,
            optimizer: OptimizerConfig::default(),
            schedule: ScheduleConfig::default(),
            model: ModelConfig::default(),
            guidance: GuidanceConfig::default(),
            augment: AugmentConfig::default(),
            backends: BackendSelection::default(),
        }
    }
}

impl RunConfig {
    /// Small-image, few-step settings for CPU runs with the doubles.
    pub fn desk() -> Self {
        Self {
            resolution: 64,
            batch_size: 8,
            epochs: 200,
            max_steps: Some(200),
            validate_every: 50,
            optimizer: OptimizerConfig {
                lr: 1e-2,
                warmup_steps: 20,
                ..OptimizerConfig::default()
            },
            ..Self::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.resolution == 0 || self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return bad("resolution, batch_size, epochs and validate_every must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        let f = self.model.spatial_factor;
        if f == 0 || !self.resolution.is_multiple_of(f) {
            return bad("resolution must be divisible by the spatial factor");
        }
        if self.model.latent_channels == 0 || self.model.embedding_width == 0 || self.model.hidden_channels == 0 {
            return bad("model widths must be positive");
        }
        if !(0.0..=1.0).contains(&self.reference_drop_prob) {
            return bad("reference_drop_prob must be in [0, 1]");
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.initial_lr > 0.0 && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return bad("optimizer rates must be positive");
        }
        if !((0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2)) {
            return bad("optimizer betas must be in [0, 1)");
        }
        self.guidance.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.schedule.build().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn hash(&self) -> String {
        config_hash(self)
    }

    /// Hash of the settings a checkpoint depends on.
    pub fn model_hash(&self) -> String {
        config_hash(&(&self.model, &self.schedule, &self.backends, self.resolution))
    }

    pub fn double_params(&self) -> DoubleParams {
        DoubleParams {
            resolution: self.resolution,
            latent_channels: self.model.latent_channels,
            spatial_factor: self.model.spatial_factor,
            embedding_width: self.model.embedding_width,
            hidden_channels: self.model.hidden_channels,
            train_timesteps: self.schedule.train_timesteps,
            pretrained_tag: self.model.pretrained_tag.clone(),
            seed: self.model.backend_seed,
        }
    }
}

/// AdamW with decoupled weight decay and the configured warmup.
#[derive(Debug, Clone)]
pub struct AdamW {
    cfg: OptimizerConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: usize,
}

impl AdamW {
    pub fn new(cfg: OptimizerConfig, parameter_count: usize) -> Self {
        Self {
            cfg,
            m: vec![0.0; parameter_count],
            v: vec![0.0; parameter_count],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Applies one update; returns the learning rate used.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<f64> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::validation("optimizer state does not match the parameter count"));
        }
        let c = self.cfg;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * (c.weight_decay * params[i] + m_hat / (v_hat.sqrt() + c.eps));
        }
        Ok(lr)
    }
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: u32,
    pub stage: StageKind,
    pub latent_channels: usize,
    pub input_channels: usize,
    pub schedule_id: String,
    /// [`RunConfig::model_hash`] of the training run.
    pub model_hash: String,
    pub step: usize,
    pub backbone: ConvBackbone,
}

impl Checkpoint {
    pub fn new(stage: StageKind, backbone: ConvBackbone, config: &RunConfig, step: usize) -> Result<Self> {
        let schedule = config.schedule.build()?;
        let ckpt = Self {
            format: CHECKPOINT_FORMAT,
            stage,
            latent_channels: config.model.latent_channels,
            input_channels: backbone.spec().input_channels,
            schedule_id: schedule.id().to_string(),
            model_hash: config.model_hash(),
            step,
            backbone,
        };
        ckpt.check_arithmetic()?;
        Ok(ckpt)
    }

    fn check_arithmetic(&self) -> Result<()> {
        let expected = self.stage.backbone_input_channels(self.latent_channels);
        if self.input_channels != expected || self.backbone.spec().input_channels != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: self.backbone.spec().input_channels,
            });
        }
        if self.backbone.spec().output_channels != self.latent_channels {
            return Err(Error::ChannelMismatch {
                expected: self.latent_channels,
                actual: self.backbone.spec().output_channels,
            });
        }
        Ok(())
    }

    /// Refuses a checkpoint of another stage or trained under another model
    /// configuration.
    pub fn verify(&self, stage: StageKind, config: &RunConfig) -> Result<()> {
        if self.stage != stage {
            return Err(Error::StageMismatch {
                expected: stage.to_string(),
                actual: self.stage.to_string(),
            });
        }
        let hash = config.model_hash();
        if self.model_hash != hash {
            return Err(Error::Checkpoint(format!(
                "checkpoint model hash {} does not match configuration hash {hash}",
                self.model_hash
            )));
        }
        let schedule = config.schedule.build()?;
        if self.schedule_id != schedule.id() {
            return Err(Error::Checkpoint(format!(
                "checkpoint schedule {} differs from configured {}",
                self.schedule_id,
                schedule.id()
            )));
        }
        self.check_arithmetic()
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    sha256: String,
    checkpoint: serde_json::Value,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let body = serde_json::to_value(ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let digest = hex::encode(Sha256::digest(body.to_string().as_bytes()));
    let file = CheckpointFile {
        sha256: digest,
        checkpoint: body,
    };
    let text = serde_json::to_string(&file).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(file.checkpoint.to_string().as_bytes()));
    if digest != file.sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: integrity hash mismatch",
            path.display()
        )));
    }
    let ckpt: Checkpoint =
        serde_json::from_value(file.checkpoint).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {}",
            ckpt.format
        )));
    }
    let backbone = ConvBackbone::from_parameters(*ckpt.backbone.config(), ckpt.backbone.parameters().to_vec())?;
    let ckpt = Checkpoint { backbone, ..ckpt };
    ckpt.check_arithmetic()?;
    Ok(ckpt)
}

/// The pretrained backbone widened to the stage's input width.
pub fn initial_backbone(stage: StageKind, backends: &Backends, config: &RunConfig) -> Result<ConvBackbone> {
    let c = config.model.latent_channels;
    let pretrained = backends.backbone.pretrained(c, backends.reference_encoder.width())?;
    let adapted = pretrained.adapt_input_channels(stage.backbone_input_channels(c))?;
    if adapted.input_weight_shape()[1] != stage.backbone_input_channels(c) {
        return Err(Error::ChannelMismatch {
            expected: stage.backbone_input_channels(c),
            actual: adapted.input_weight_shape()[1],
        });
    }
    Ok(adapted)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Lowest-validation-loss parameters.
    pub best: Checkpoint,
    pub last: Checkpoint,
    /// Batch-mean training loss per step.
    pub losses: Vec<f64>,
    pub val_losses: Vec<(usize, f64)>,
    /// Training loss on fixed per-record draws before and after training.
    pub probe_initial: f64,
    pub probe_final: f64,
}

struct Prepared {
    bundle: ConditioningBundle,
    reference: ReferenceImage,
}

fn prepare(stage: StageKind, records: &[TrainingRecord], conditioner: &Conditioner) -> Result<Vec<Prepared>> {
    records
        .iter()
        .map(|r| {
            Ok(Prepared {
                bundle: conditioner.build_training(stage, r)?,
                reference: ReferenceImage {
                    image: r.reference.clone(),
                    fill: r.fill,
                },
            })
        })
        .collect()
}

/// Mean loss over fixed draws, one per bundle.
fn probe_loss<B: DenoisingBackbone>(
    backbone: &B,
    items: &[Prepared],
    draws: &[TrainingDraw],
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut total = 0.0;
    for (p, d) in items.iter().zip(draws) {
        total += loss_for_draw(backbone, &p.bundle, schedule, d)?;
    }
    Ok(total / items.len() as f64)
}

fn fixed_draws(
    items: &[Prepared],
    schedule: &NoiseSchedule,
    p: f64,
    seed: u64,
    label: &str,
) -> Result<Vec<TrainingDraw>> {
    let mut rng = seeds::stream(seed, label);
    items
        .iter()
        .map(|it| TrainingDraw::sample(&it.bundle, schedule, p, &mut rng))
        .collect()
}

pub fn train(
    stage: StageKind,
    train_records: &[TrainingRecord],
    val_records: &[TrainingRecord],
    config: &RunConfig,
    backends: &Backends,
) -> Result<TrainReport> {
    config.validate()?;
    if train_records.is_empty() {
        return Err(Error::validation("training set is empty"));
    }
    let schedule = config.schedule.build()?;
    let conditioner = Conditioner::new(backends.clone());
    let items = prepare(stage, train_records, &conditioner)?;
    let val_items = prepare(stage, val_records, &conditioner)?;
    let mut backbone = initial_backbone(stage, backends, config)?;
    let mut optimizer = AdamW::new(config.optimizer, backbone.parameters().len());

    let p = config.reference_drop_prob;
    let probe_draws = fixed_draws(&items, &schedule, p, config.seed, "probe")?;
    let val_draws = fixed_draws(&val_items, &schedule, p, config.seed, "val")?;
    let validation = |b: &ConvBackbone| -> Result<f64> {
        if val_items.is_empty() {
            probe_loss(b, &items, &probe_draws, &schedule)
        } else {
            probe_loss(b, &val_items, &val_draws, &schedule)
        }
    };

    let batches_per_epoch = items.len().div_ceil(config.batch_size);
    let total_steps = config
        .max_steps
        .unwrap_or(usize::MAX)
        .min(config.epochs.saturating_mul(batches_per_epoch));
    log::info!(
        "stage=train model={stage} config_hash={} model_hash={} records={} val={} steps={total_steps}",
        config.hash(),
        config.model_hash(),
        items.len(),
        val_items.len()
    );

    let probe_initial = probe_loss(&backbone, &items, &probe_draws, &schedule)?;
    let mut best_val = validation(&backbone)?;
    let mut best = Checkpoint::new(stage, backbone.clone(), config, 0)?;
    let mut val_losses = vec![(0, best_val)];
    let mut losses = Vec::with_capacity(total_steps);

    let mut order_rng = seeds::stream(config.seed, &format!("order/{stage}"));
    let mut noise_rng = seeds::stream(config.seed, &format!("noise/{stage}"));
    let mut augment_rng = seeds::stream(config.seed, &format!("augment/{stage}"));
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    for step in 0..total_steps {
        let mut grad = vec![0.0; backbone.parameters().len()];
        let mut loss = 0.0;
        let mut batch = 0usize;
        while batch < config.batch_size.min(items.len()) {
            if cursor == order.len() {
                order = (0..items.len()).collect();
                order.shuffle(&mut order_rng);
                cursor = 0;
            }
            let item = &items[order[cursor]];
            cursor += 1;
            batch += 1;
            let augmented = augment_reference(&item.reference, &config.augment, &mut augment_rng)?;
            let c_ref: Embedding = backends.reference_encoder.embed(&augmented)?;
            let bundle = ConditioningBundle {
                c_ref,
                ..item.bundle.clone()
            };
            let draw = TrainingDraw::sample(&bundle, &schedule, p, &mut noise_rng)?;
            let (l, g) = loss_and_grad_for_draw(&backbone, &bundle, &schedule, &draw)?;
            loss += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let n = batch as f64;
        loss /= n;
        grad.iter_mut().for_each(|g| *g /= n);
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            log::error!("stage=train model={stage} step={step} diverged loss={loss}");
            return Err(Error::Diverged { step, loss });
        }
        let lr = optimizer.step(backbone.parameters_mut(), &grad)?;
        losses.push(loss);
        log::debug!("stage=train model={stage} step={step} loss={loss:.6} lr={lr:.3e}");

        let done = step + 1;
        if done % config.validate_every == 0 || done == total_steps {
            let v = validation(&backbone)?;
            log::info!("stage=train model={stage} step={done} loss={loss:.6} val_loss={v:.6}");
            val_losses.push((done, v));
            if v < best_val {
                best_val = v;
                best = Checkpoint::new(stage, backbone.clone(), config, done)?;
            }
        }
    }
    let probe_final = probe_loss(&backbone, &items, &probe_draws, &schedule)?;
    log::info!("stage=train model={stage} probe_initial={probe_initial:.6} probe_final={probe_final:.6}");
    Ok(TrainReport {
        best,
        last: Checkpoint::new(stage, backbone, config, total_steps)?,
        losses,
        val_losses,
        probe_initial,
        probe_final,
    })
}

/// What inference sees: the scene, the person and the pose. No ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct InferenceInputs {
    pub scene: ImageRGB,
    pub reference: ImageRGB,
    pub fill: [f64; 3],
    pub pose_depth: DepthMap,
    pub mask: BinaryMask,
}

impl InferenceInputs {
    pub fn from_pose(scene: ImageRGB, reference: ImageRGB, fill: [f64; 3], pose: PoseInputs) -> Self {
        Self {
            scene,
            reference,
            fill,
            pose_depth: pose.pose_depth,
            mask: pose.mask,
        }
    }

    /// Copies the non-ground-truth fields of a record.
    pub fn from_record(r: &TrainingRecord) -> Self {
        Self {
            scene: r.scene.clone(),
            reference: r.reference.clone(),
            fill: r.fill,
            pose_depth: r.pose_depth.clone(),
            mask: r.mask.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageOutput {
    pub image: ImageRGB,
    /// Stage-1 depth after channel averaging and clamping.
    pub depth: DepthMap,
}

/// Runs trained backbones on [`InferenceInputs`].
#[derive(Debug)]
pub struct Inference {
    conditioner: Conditioner,
    schedule: NoiseSchedule,
    guidance: GuidanceConfig,
}

impl Inference {
    pub fn new(backends: Backends, schedule: NoiseSchedule, guidance: GuidanceConfig) -> Result<Self> {
        guidance.validate()?;
        Ok(Self {
            conditioner: Conditioner::new(backends),
            schedule,
            guidance,
        })
    }

    pub fn from_config(backends: Backends, config: &RunConfig) -> Result<Self> {
        Self::new(backends, config.schedule.build()?, config.guidance)
    }

    pub fn guidance(&self) -> &GuidanceConfig {
        &self.guidance
    }

    /// `D_s` is always re-estimated from the scene.
    fn scene_depth(&self, inputs: &InferenceInputs) -> Result<DepthMap> {
        if inputs.mask.zero_region().is_none() {
            log::warn!("insertion mask has no zero region; placement is left to the pose depth");
        }
        let raw = self.conditioner.backends().depth.estimate_depth(&inputs.scene)?;
        normalize_depth(&raw, NormalizeMode::percentile())
    }

    fn bundle(
        &self,
        stage: StageKind,
        cond: crate::imaging::LatentTensor,
        inputs: &InferenceInputs,
    ) -> Result<ConditioningBundle> {
        let (c_ref, c_null) = self.conditioner.reference_embeddings(&inputs.reference, inputs.fill)?;
        let b = ConditioningBundle {
            stage,
            cond,
            c_ref,
            c_null,
            target: None,
        };
        b.check(self.conditioner.latent_channels())?;
        Ok(b)
    }

    fn check_backbone(&self, stage: StageKind, backbone: &dyn DenoisingBackbone) -> Result<()> {
        let expected = stage.backbone_input_channels(self.conditioner.latent_channels());
        if backbone.spec().input_channels != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: backbone.spec().input_channels,
            });
        }
        Ok(())
    }

    fn guidance_for(&self, stage: StageKind) -> GuidanceConfig {
        GuidanceConfig {
            seed: seeds::derive(self.guidance.seed, stage.as_str()),
            ..self.guidance
        }
    }

    fn decode(&self, z: &crate::imaging::LatentTensor) -> Result<ImageRGB> {
        Ok(self.conditioner.backends().autoencoder.decode(z)?.to_unit())
    }

    pub fn direct(&self, inputs: &InferenceInputs, backbone: &dyn DenoisingBackbone) -> Result<ImageRGB> {
        self.check_backbone(StageKind::Direct, backbone)?;
        let scene_depth = self.scene_depth(inputs)?;
        let s = SceneInputs {
            scene: &inputs.scene,
            scene_depth: &scene_depth,
            pose_depth: &inputs.pose_depth,
            mask: &inputs.mask,
        };
        let bundle = self.bundle(StageKind::Direct, self.conditioner.direct_condition(&s)?, inputs)?;
        let z = sample(backbone, &bundle, &self.guidance_for(StageKind::Direct), &self.schedule)?;
        self.decode(&z)
    }

    /// Stage 1: composite depth `D̂`, channel-averaged and clamped to `[-1, 1]`.
    pub fn stage1(&self, inputs: &InferenceInputs, backbone: &dyn DenoisingBackbone) -> Result<DepthMap> {
        self.check_backbone(StageKind::Stage1Depth, backbone)?;
        let scene_depth = self.scene_depth(inputs)?;
        let s = SceneInputs {
            scene: &inputs.scene,
            scene_depth: &scene_depth,
            pose_depth: &inputs.pose_depth,
            mask: &inputs.mask,
        };
        let bundle = self.bundle(StageKind::Stage1Depth, self.conditioner.stage1_condition(&s)?, inputs)?;
        let z = sample(
            backbone,
            &bundle,
            &self.guidance_for(StageKind::Stage1Depth),
            &self.schedule,
        )?;
        let decoded = self.conditioner.backends().autoencoder.decode(&z)?.to_signed();
        Ok(average_channels(&decoded).clamped(Normalization::Percentile))
    }

    pub fn stage2(
        &self,
        inputs: &InferenceInputs,
        depth: &DepthMap,
        backbone: &dyn DenoisingBackbone,
    ) -> Result<ImageRGB> {
        self.check_backbone(StageKind::Stage2Rgb, backbone)?;
        let scene_depth = self.scene_depth(inputs)?;
        let s = SceneInputs {
            scene: &inputs.scene,
            scene_depth: &scene_depth,
            pose_depth: &inputs.pose_depth,
            mask: &inputs.mask,
        };
        let bundle = self.bundle(
            StageKind::Stage2Rgb,
            self.conditioner.stage2_condition(&s, depth)?,
            inputs,
        )?;
        let z = sample(
            backbone,
            &bundle,
            &self.guidance_for(StageKind::Stage2Rgb),
            &self.schedule,
        )?;
        self.decode(&z)
    }

    pub fn two_stage(
        &self,
        inputs: &InferenceInputs,
        stage1: &dyn DenoisingBackbone,
        stage2: &dyn DenoisingBackbone,
    ) -> Result<TwoStageOutput> {
        let depth = self.stage1(inputs, stage1)?;
        let image = self.stage2(inputs, &depth, stage2)?;
        Ok(TwoStageOutput { image, depth })
    }
}

pub fn infer_direct(
    inputs: &InferenceInputs,
    ckpt: &Checkpoint,
    config: &RunConfig,
    backends: &Backends,
) -> Result<ImageRGB> {
    ckpt.verify(StageKind::Direct, config)?;
    Inference::from_config(backends.clone(), config)?.direct(inputs, &ckpt.backbone)
}

pub fn infer_two_stage(
    inputs: &InferenceInputs,
    stage1: &Checkpoint,
    stage2: &Checkpoint,
    config: &RunConfig,
    backends: &Backends,
) -> Result<TwoStageOutput> {
    stage1.verify(StageKind::Stage1Depth, config)?;
    stage2.verify(StageKind::Stage2Rgb, config)?;
    Inference::from_config(backends.clone(), config)?.two_stage(inputs, &stage1.backbone, &stage2.backbone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetConfig;
    use crate::synthetic::{synthetic_records, SyntheticSpec};

    fn desk_setup(n: usize) -> (RunConfig, Backends, Vec<TrainingRecord>) {
        let config = RunConfig {
            max_steps: Some(3),
            batch_size: 2,
            validate_every: 2,
            ..RunConfig::desk()
        };
        let backends = Backends::doubles(&config.double_params()).unwrap();
        let dc = DatasetConfig {
            resolution: 64,
            ..DatasetConfig::default()
        };
        let records = synthetic_records(n, SyntheticSpec::default(), &backends, &dc, 2).unwrap();
        (config, backends, records)
    }

    #[test]
    fn warmup_schedule() {
        let o = OptimizerConfig::default();
        assert_eq!(o.lr_at(0), 1e-9);
        assert_eq!(o.lr_at(10_000), 5e-5);
        assert_eq!(o.lr_at(50_000), 5e-5);
        let mid = o.lr_at(5_000);
        assert!((mid - (1e-9 + 5e-5) / 2.0).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = OptimizerConfig {
            lr: 0.1,
            initial_lr: 0.1,
            warmup_steps: 0,
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        };
        let mut opt = AdamW::new(cfg, 2);
        let mut p = vec![1.0, -1.0];
        opt.step(&mut p, &[3.0, -0.5]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn config_toml_roundtrip_and_unknown_keys() {
        let c = RunConfig::desk();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("resolution = 63").is_err());
        let partial = RunConfig::from_toml("seed = 9\n[optimizer]\nlr = 0.5\n").unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.optimizer.warmup_steps, 10_000);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact_and_checked() {
        let (config, backends, records) = desk_setup(2);
        let report = train(StageKind::Direct, &records, &[], &config, &backends).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("direct.ckpt");
        save_checkpoint(&report.last, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back, report.last);
        let inputs = InferenceInputs::from_record(&records[0]);
        let cfg = RunConfig {
            guidance: GuidanceConfig {
                steps: 3,
                ..config.guidance
            },
            ..config.clone()
        };
        assert_eq!(
            infer_direct(&inputs, &back, &cfg, &backends).unwrap(),
            infer_direct(&inputs, &report.last, &cfg, &backends).unwrap()
        );
        assert!(matches!(
            back.verify(StageKind::Stage1Depth, &config),
            Err(Error::StageMismatch { .. })
        ));
        let drifted = RunConfig {
            model: ModelConfig {
                hidden_channels: 8,
                ..config.model.clone()
            },
            ..config.clone()
        };
        assert!(matches!(
            back.verify(StageKind::Direct, &drifted),
            Err(Error::Checkpoint(_))
        ));

        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replacen("\"step\":3", "\"step\":4", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn training_is_reproducible() {
        let (config, backends, records) = desk_setup(3);
        let a = train(StageKind::Stage1Depth, &records, &records[..1], &config, &backends).unwrap();
        let b = train(StageKind::Stage1Depth, &records, &records[..1], &config, &backends).unwrap();
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.best, b.best);
        assert_eq!(a.losses.len(), 3);
        assert_eq!(a.val_losses.iter().map(|v| v.0).collect::<Vec<_>>(), vec![0, 2, 3]);
    }

    #[test]
    fn initial_backbones_have_stage_widths() {
        let (config, backends, _) = desk_setup(1);
        for (stage, width) in [
            (StageKind::Stage1Depth, 18),
            (StageKind::Stage2Rgb, 11),
            (StageKind::Direct, 15),
        ] {
            assert_eq!(
                initial_backbone(stage, &backends, &config)
                    .unwrap()
                    .input_weight_shape()[1],
                width
            );
        }
    }
}
