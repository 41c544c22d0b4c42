//! Interfaces to the pretrained components the pipelines depend on, a
//! name-keyed registry that resolves them up front, and deterministic
//! miniature doubles that make every stage runnable on a CPU.

mod backbone;
mod doubles;

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, BinaryMask, DepthMap, ImageRGB, LatentTensor};
use crate::render::{BodyMesh, CameraSpec};

pub use backbone::{ConvBackbone, ConvBackboneConfig, TIME_FEATURES};
pub use doubles::{
    BorderMeanInpainter, CannedBodyFitter, ChromaKey, ChromaKeyDetector, ChromaKeySegmenter, LinearAutoencoder,
    LuminanceDepth, PooledProjectionEncoder, POOL_SIZE,
};

/// Prompt handed to the scene inpainter when removing the person.
pub const INPAINT_PROMPT: &str = "empty scenery, highly detailed, no people";

/// Name under which every double is registered.
pub const DOUBLE: &str = "double";

/// Reference-encoder output, `tokens × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    data: Array2<f64>,
}

impl Embedding {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::validation("embedding must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("embedding contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn tokens(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    /// Token-mean pooled vector.
    pub fn pooled(&self) -> Vec<f64> {
        let n = self.tokens() as f64;
        (0..self.width()).map(|k| self.data.column(k).sum() / n).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub latent_channels: usize,
    pub spatial_factor: usize,
    pub weights_tag: String,
}

impl AutoencoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 {
            return Err(Error::validation("latent_channels must be at least 1"));
        }
        if !self.spatial_factor.is_power_of_two() {
            return Err(Error::validation(format!(
                "spatial factor {} is not a power of two",
                self.spatial_factor
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub input_channels: usize,
    pub output_channels: usize,
    pub context_width: usize,
    /// Valid timesteps are `0..train_timesteps`.
    pub train_timesteps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BodyFit {
    pub mesh: BodyMesh,
    pub camera: CameraSpec,
}

pub trait PersonDetector: Send + Sync {
    fn detect_person(&self, x: &ImageRGB) -> Result<Option<BBox>>;
}

pub trait PersonSegmenter: Send + Sync {
    /// Silhouette with 1 on person pixels.
    fn segment_person(&self, x: &ImageRGB) -> Result<BinaryMask>;
}

pub trait BodyFitter: Send + Sync {
    /// `None` when no body can be fitted.
    fn fit_body(&self, x: &ImageRGB) -> Result<Option<BodyFit>>;
}

pub trait SceneInpainter: Send + Sync {
    /// Fills pixels where `hole` is 1.
    fn inpaint(&self, x: &ImageRGB, hole: &BinaryMask, prompt: &str) -> Result<ImageRGB>;
}

pub trait DepthEstimator: Send + Sync {
    /// Raw relative depth, larger meaning nearer.
    fn estimate_depth(&self, x: &ImageRGB) -> Result<DepthMap>;
}

pub trait Autoencoder: Send + Sync {
    fn spec(&self) -> &AutoencoderSpec;
    fn encode(&self, x: &ImageRGB) -> Result<LatentTensor>;
    fn decode(&self, z: &LatentTensor) -> Result<ImageRGB>;
}

pub trait ReferenceEncoder: Send + Sync {
    fn width(&self) -> usize;
    fn embed(&self, x: &ImageRGB) -> Result<Embedding>;
}

pub trait DenoisingBackbone: Send + Sync {
    fn spec(&self) -> &BackboneSpec;

    /// Predicts the noise in the leading latent channels of `x_in`.
    fn predict_noise(&self, x_in: &LatentTensor, t: usize, ctx: &Embedding) -> Result<LatentTensor>;

    fn check_input(&self, x_in: &LatentTensor, t: usize) -> Result<()> {
        let spec = self.spec();
        if x_in.channels() != spec.input_channels {
            return Err(Error::ChannelMismatch {
                expected: spec.input_channels,
                actual: x_in.channels(),
            });
        }
        if t >= spec.train_timesteps {
            return Err(Error::validation(format!(
                "timestep {t} outside [0, {})",
                spec.train_timesteps
            )));
        }
        Ok(())
    }
}

/// Backbones whose parameters can be updated by the training loop.
pub trait TrainableBackbone: DenoisingBackbone + Clone {
    fn parameters(&self) -> &[f64];
    fn parameters_mut(&mut self) -> &mut [f64];

    /// Gradient of `<grad_output, predict_noise(x_in, t, ctx)>` w.r.t. the parameters.
    fn backward(&self, x_in: &LatentTensor, t: usize, ctx: &Embedding, grad_output: &LatentTensor) -> Result<Vec<f64>>;

    /// Widens the input layer; new channels start with zero weights.
    fn adapt_input_channels(&self, new_count: usize) -> Result<Self>;
}

/// Builds the pretrained backbone a stage is fine-tuned from.
pub trait BackboneProvider: Send + Sync {
    fn pretrained(&self, latent_channels: usize, context_width: usize) -> Result<ConvBackbone>;
}

/// Which provider to use for each role, by registry name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSelection {
    pub detector: String,
    pub segmenter: String,
    pub fitter: String,
    pub inpainter: String,
    pub depth: String,
    pub autoencoder: String,
    pub reference_encoder: String,
    pub backbone: String,
}

impl Default for BackendSelection {
    fn default() -> Self {
        Self {
            detector: DOUBLE.into(),
            segmenter: DOUBLE.into(),
            fitter: DOUBLE.into(),
            inpainter: DOUBLE.into(),
            depth: DOUBLE.into(),
            autoencoder: DOUBLE.into(),
            reference_encoder: DOUBLE.into(),
            backbone: DOUBLE.into(),
        }
    }
}

/// Construction parameters shared by the doubles.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleParams {
    pub resolution: usize,
    pub latent_channels: usize,
    pub spatial_factor: usize,
    pub embedding_width: usize,
    pub hidden_channels: usize,
    pub train_timesteps: usize,
    /// Identity of the pretrained weights; changes the backbone's seeded init.
    pub pretrained_tag: String,
    pub seed: u64,
}

impl Default for DoubleParams {
    fn default() -> Self {
        Self {
            resolution: 64,
            latent_channels: 4,
            spatial_factor: 8,
            embedding_width: 32,
            hidden_channels: 32,
            train_timesteps: 1000,
            pretrained_tag: "sd-inpainting-2.0".into(),
            seed: 0,
        }
    }
}

/// Every provider a pipeline needs, resolved.
#[derive(Clone)]
pub struct Backends {
    pub detector: Arc<dyn PersonDetector>,
    pub segmenter: Arc<dyn PersonSegmenter>,
    pub fitter: Arc<dyn BodyFitter>,
    pub inpainter: Arc<dyn SceneInpainter>,
    pub depth: Arc<dyn DepthEstimator>,
    pub autoencoder: Arc<dyn Autoencoder>,
    pub reference_encoder: Arc<dyn ReferenceEncoder>,
    pub backbone: Arc<dyn BackboneProvider>,
}

impl Backends {
    /// All doubles, resolved directly.
    pub fn doubles(params: &DoubleParams) -> Result<Backends> {
        BackendRegistry::with_doubles(params)?.resolve(&BackendSelection::default())
    }

    pub fn latent_channels(&self) -> usize {
        self.autoencoder.spec().latent_channels
    }

    pub fn spatial_factor(&self) -> usize {
        self.autoencoder.spec().spatial_factor
    }
}

impl std::fmt::Debug for Backends {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Backends")
            .field("autoencoder", self.autoencoder.spec())
            .field("embedding_width", &self.reference_encoder.width())
            .finish_non_exhaustive()
    }
}

#[derive(Default, Clone)]
pub struct BackendRegistry {
    detectors: BTreeMap<String, Arc<dyn PersonDetector>>,
    segmenters: BTreeMap<String, Arc<dyn PersonSegmenter>>,
    fitters: BTreeMap<String, Arc<dyn BodyFitter>>,
    inpainters: BTreeMap<String, Arc<dyn SceneInpainter>>,
    depths: BTreeMap<String, Arc<dyn DepthEstimator>>,
    autoencoders: BTreeMap<String, Arc<dyn Autoencoder>>,
    reference_encoders: BTreeMap<String, Arc<dyn ReferenceEncoder>>,
    backbones: BTreeMap<String, Arc<dyn BackboneProvider>>,
}

impl BackendRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registry with every double registered under [`DOUBLE`].
    pub fn with_doubles(p: &DoubleParams) -> Result<Self> {
        let key = ChromaKey::default();
        let mut r = Self::new();
        r.register_detector(DOUBLE, Arc::new(ChromaKeyDetector::new(key)));
        r.register_segmenter(DOUBLE, Arc::new(ChromaKeySegmenter::new(key)));
        r.register_fitter(DOUBLE, Arc::new(CannedBodyFitter::new(key)));
        r.register_inpainter(DOUBLE, Arc::new(BorderMeanInpainter));
        r.register_depth(DOUBLE, Arc::new(LuminanceDepth));
        r.register_autoencoder(
            DOUBLE,
            Arc::new(LinearAutoencoder::new(AutoencoderSpec {
                latent_channels: p.latent_channels,
                spatial_factor: p.spatial_factor,
                weights_tag: format!("linear-s2d-{}", p.pretrained_tag),
            })?),
        );
        r.register_reference_encoder(
            DOUBLE,
            Arc::new(PooledProjectionEncoder::seeded(
                p.resolution,
                p.resolution,
                p.embedding_width,
                p.seed,
            )?),
        );
        r.register_backbone(
            DOUBLE,
            Arc::new(ConvBackboneProvider {
                hidden_channels: p.hidden_channels,
                train_timesteps: p.train_timesteps,
                tag: p.pretrained_tag.clone(),
                seed: p.seed,
            }),
        );
        Ok(r)
    }

    pub fn register_detector(&mut self, name: &str, p: Arc<dyn PersonDetector>) {
        self.detectors.insert(name.into(), p);
    }
    pub fn register_segmenter(&mut self, name: &str, p: Arc<dyn PersonSegmenter>) {
        self.segmenters.insert(name.into(), p);
    }
    pub fn register_fitter(&mut self, name: &str, p: Arc<dyn BodyFitter>) {
        self.fitters.insert(name.into(), p);
    }
    pub fn register_inpainter(&mut self, name: &str, p: Arc<dyn SceneInpainter>) {
        self.inpainters.insert(name.into(), p);
    }
    pub fn register_depth(&mut self, name: &str, p: Arc<dyn DepthEstimator>) {
        self.depths.insert(name.into(), p);
    }
    pub fn register_autoencoder(&mut self, name: &str, p: Arc<dyn Autoencoder>) {
        self.autoencoders.insert(name.into(), p);
    }
    pub fn register_reference_encoder(&mut self, name: &str, p: Arc<dyn ReferenceEncoder>) {
        self.reference_encoders.insert(name.into(), p);
    }
    pub fn register_backbone(&mut self, name: &str, p: Arc<dyn BackboneProvider>) {
        self.backbones.insert(name.into(), p);
    }

    /// Resolves every role at once; the error lists all missing providers.
    pub fn resolve(&self, sel: &BackendSelection) -> Result<Backends> {
        let mut missing = Vec::new();
        fn get<T: ?Sized>(
            map: &BTreeMap<String, Arc<T>>,
            role: &str,
            name: &str,
            missing: &mut Vec<String>,
        ) -> Option<Arc<T>> {
            let found = map.get(name).cloned();
            if found.is_none() {
                missing.push(format!("{role}=`{name}`"));
            }
            found
        }
        let detector = get(&self.detectors, "detector", &sel.detector, &mut missing);
        let segmenter = get(&self.segmenters, "segmenter", &sel.segmenter, &mut missing);
        let fitter = get(&self.fitters, "fitter", &sel.fitter, &mut missing);
        let inpainter = get(&self.inpainters, "inpainter", &sel.inpainter, &mut missing);
        let depth = get(&self.depths, "depth", &sel.depth, &mut missing);
        let autoencoder = get(&self.autoencoders, "autoencoder", &sel.autoencoder, &mut missing);
        let reference_encoder = get(
            &self.reference_encoders,
            "reference_encoder",
            &sel.reference_encoder,
            &mut missing,
        );
        let backbone = get(&self.backbones, "backbone", &sel.backbone, &mut missing);
        match (
            detector,
            segmenter,
            fitter,
            inpainter,
            depth,
            autoencoder,
            reference_encoder,
            backbone,
        ) {
            (
                Some(detector),
                Some(segmenter),
                Some(fitter),
                Some(inpainter),
                Some(depth),
                Some(autoencoder),
                Some(reference_encoder),
                Some(backbone),
            ) => Ok(Backends {
                detector,
                segmenter,
                fitter,
                inpainter,
                depth,
                autoencoder,
                reference_encoder,
                backbone,
            }),
            _ => Err(Error::Registry(format!("no provider for {}", missing.join(", ")))),
        }
    }
}

/// Seeded [`ConvBackbone`] standing in for the pretrained inpainting U-Net.
/// Its input width mirrors an inpainting backbone: noisy latent, masked-image
/// latent and one mask channel (`2C + 1`).
#[derive(Debug, Clone)]
pub struct ConvBackboneProvider {
    pub hidden_channels: usize,
    pub train_timesteps: usize,
    pub tag: String,
    pub seed: u64,
}

impl BackboneProvider for ConvBackboneProvider {
    fn pretrained(&self, latent_channels: usize, context_width: usize) -> Result<ConvBackbone> {
        let seed = crate::seeds::derive(self.seed, &format!("backbone/{}", self.tag));
        ConvBackbone::seeded(
            ConvBackboneConfig {
                input_channels: 2 * latent_channels + 1,
                output_channels: latent_channels,
                hidden_channels: self.hidden_channels,
                context_width,
                train_timesteps: self.train_timesteps,
            },
            seed,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_reports_every_missing_provider() {
        let reg = BackendRegistry::with_doubles(&DoubleParams::default()).unwrap();
        let sel = BackendSelection {
            depth: "depth-anything".into(),
            segmenter: "lang-sam".into(),
            ..BackendSelection::default()
        };
        let err = reg.resolve(&sel).err().unwrap().to_string();
        assert!(err.contains("depth=`depth-anything`"), "{err}");
        assert!(err.contains("segmenter=`lang-sam`"), "{err}");
        assert!(BackendRegistry::new().resolve(&BackendSelection::default()).is_err());
        assert!(reg.resolve(&BackendSelection::default()).is_ok());
    }
}
