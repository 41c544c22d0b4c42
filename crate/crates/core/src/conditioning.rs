//! Conditioning tensors for the three models and the reference embeddings.
//!
//! `E(x)` is the autoencoder latent of a 3-channel image (depth maps are
//! replicated to three channels first) and `R(x)` is a single-channel map
//! resized to latent resolution. Block order is fixed; checkpoints depend on it.
//!
//! | stage    | blocks                                   | channels |
//! |----------|------------------------------------------|----------|
//! | stage 1  | E(M*D_s), E(I_s), E(D_s), R(D_p), R(M)    | 3C + 2   |
//! | stage 2  | E(I_s), R(D_cond), R(D_s), R(D_p)         | C + 3    |
//! | direct   | E(M*I_s), E(I_s), R(D_s), R(D_p), R(M)    | 2C + 3   |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backends::{Backends, Embedding};
use crate::dataset::TrainingRecord;
use crate::error::{Error, Result};
use crate::imaging::{
    apply_mask, replicate_channels, resize_to_latent, BinaryMask, DepthMap, ImageRGB, LatentTensor, ValueRange,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageKind {
    #[serde(rename = "stage1")]
    Stage1Depth,
    #[serde(rename = "stage2")]
    Stage2Rgb,
    #[serde(rename = "direct")]
    Direct,
}

impl StageKind {
    pub const ALL: [StageKind; 3] = [StageKind::Stage1Depth, StageKind::Stage2Rgb, StageKind::Direct];

    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::Stage1Depth => "stage1",
            StageKind::Stage2Rgb => "stage2",
            StageKind::Direct => "direct",
        }
    }

    pub fn cond_channels(self, latent_channels: usize) -> usize {
        let c = latent_channels;
        match self {
            StageKind::Stage1Depth => 3 * c + 2,
            StageKind::Stage2Rgb => c + 3,
            StageKind::Direct => 2 * c + 3,
        }
    }

    /// Noisy latent plus conditioning.
    pub fn backbone_input_channels(self, latent_channels: usize) -> usize {
        latent_channels + self.cond_channels(latent_channels)
    }
}

impl fmt::Display for StageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown stage `{s}` (expected stage1, stage2 or direct)")))
    }
}

/// Scene-side inputs shared by training and inference. Holds no ground truth.
#[derive(Debug, Clone, Copy)]
pub struct SceneInputs<'a> {
    pub scene: &'a ImageRGB,
    pub scene_depth: &'a DepthMap,
    pub pose_depth: &'a DepthMap,
    pub mask: &'a BinaryMask,
}

impl<'a> SceneInputs<'a> {
    pub fn of_record(r: &'a TrainingRecord) -> Self {
        Self {
            scene: &r.scene,
            scene_depth: &r.scene_depth,
            pose_depth: &r.pose_depth,
            mask: &r.mask,
        }
    }

    fn validate(&self) -> Result<()> {
        let (h, w) = (self.scene.height(), self.scene.width());
        for d in [self.scene_depth, self.pose_depth] {
            if (d.height(), d.width()) != (h, w) {
                return Err(Error::validation("conditioning depth size differs from the scene"));
            }
            if !d.is_normalized() {
                return Err(Error::validation("conditioning depth maps must be normalized"));
            }
        }
        if !self.mask.same_size(h, w) {
            return Err(Error::validation("conditioning mask size differs from the scene"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditioningBundle {
    pub stage: StageKind,
    pub cond: LatentTensor,
    pub c_ref: Embedding,
    pub c_null: Embedding,
    /// Latent of the supervised target; present only for training bundles.
    pub target: Option<LatentTensor>,
}

impl ConditioningBundle {
    pub fn check(&self, latent_channels: usize) -> Result<()> {
        let expected = self.stage.cond_channels(latent_channels);
        if self.cond.channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: self.cond.channels(),
            });
        }
        if let Some(t) = &self.target {
            if t.channels() != latent_channels || (t.height(), t.width()) != (self.cond.height(), self.cond.width()) {
                return Err(Error::validation("target latent shape does not match the conditioning"));
            }
        }
        Ok(())
    }
}

/// Builds conditioning bundles; caches `∅` per fill color.
pub struct Conditioner {
    backends: Backends,
    null_cache: Mutex<BTreeMap<[u64; 3], Embedding>>,
}

impl fmt::Debug for Conditioner {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Conditioner")
            .field("backends", &self.backends)
            .finish_non_exhaustive()
    }
}

impl Conditioner {
    pub fn new(backends: Backends) -> Self {
        Self {
            backends,
            null_cache: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn backends(&self) -> &Backends {
        &self.backends
    }

    pub fn latent_channels(&self) -> usize {
        self.backends.latent_channels()
    }

    fn encode(&self, x: &ImageRGB) -> Result<LatentTensor> {
        self.backends.autoencoder.encode(x)
    }

    fn encode_depth(&self, d: &DepthMap) -> Result<LatentTensor> {
        self.encode(&replicate_channels(d)?)
    }

    fn resized<T: crate::imaging::LatentResize>(&self, x: &T) -> Result<LatentTensor> {
        resize_to_latent(x, self.backends.spatial_factor())
    }

    /// `(c_ref, ∅)`; `∅` embeds the canvas filled with `fill`.
    pub fn reference_embeddings(&self, reference: &ImageRGB, fill: [f64; 3]) -> Result<(Embedding, Embedding)> {
        let c_ref = self.backends.reference_encoder.embed(reference)?;
        let key = fill.map(f64::to_bits);
        let mut cache = self.null_cache.lock().expect("null-embedding cache poisoned");
        let c_null = match cache.get(&key) {
            Some(e) => e.clone(),
            None => {
                let blank = ImageRGB::filled(reference.height(), reference.width(), fill, ValueRange::Unit)?;
                let e = self.backends.reference_encoder.embed(&blank)?;
                cache.insert(key, e.clone());
                e
            }
        };
        Ok((c_ref, c_null))
    }

    pub fn stage1_condition(&self, s: &SceneInputs<'_>) -> Result<LatentTensor> {
        s.validate()?;
        let masked_depth = apply_mask(s.scene_depth, s.mask)?;
        let blocks = [
            self.encode_depth(&masked_depth)?,
            self.encode(s.scene)?,
            self.encode_depth(s.scene_depth)?,
            self.resized(s.pose_depth)?,
            self.resized(s.mask)?,
        ];
        self.concat_checked(StageKind::Stage1Depth, &blocks)
    }

    pub fn stage2_condition(&self, s: &SceneInputs<'_>, depth_cond: &DepthMap) -> Result<LatentTensor> {
        s.validate()?;
        if (depth_cond.height(), depth_cond.width()) != (s.scene.height(), s.scene.width())
            || !depth_cond.is_normalized()
        {
            return Err(Error::validation(
                "stage-2 depth condition must be a normalized map of the scene size",
            ));
        }
        let blocks = [
            self.encode(s.scene)?,
            self.resized(depth_cond)?,
            self.resized(s.scene_depth)?,
            self.resized(s.pose_depth)?,
        ];
        self.concat_checked(StageKind::Stage2Rgb, &blocks)
    }

    pub fn direct_condition(&self, s: &SceneInputs<'_>) -> Result<LatentTensor> {
        s.validate()?;
        // masked in signed space so the removed region reads as mid-gray
        let masked_scene = apply_mask(&s.scene.to_signed(), s.mask)?;
        let blocks = [
            self.encode(&masked_scene)?,
            self.encode(s.scene)?,
            self.resized(s.scene_depth)?,
            self.resized(s.pose_depth)?,
            self.resized(s.mask)?,
        ];
        self.concat_checked(StageKind::Direct, &blocks)
    }

    fn concat_checked(&self, stage: StageKind, blocks: &[LatentTensor]) -> Result<LatentTensor> {
        let refs: Vec<&LatentTensor> = blocks.iter().collect();
        let cond = LatentTensor::concat(&refs)?;
        let expected = stage.cond_channels(self.latent_channels());
        if cond.channels() != expected {
            return Err(Error::ChannelMismatch {
                expected,
                actual: cond.channels(),
            });
        }
        Ok(cond)
    }

    fn bundle(
        &self,
        stage: StageKind,
        record: &TrainingRecord,
        cond: LatentTensor,
        target: LatentTensor,
    ) -> Result<ConditioningBundle> {
        let (c_ref, c_null) = self.reference_embeddings(&record.reference, record.fill)?;
        let b = ConditioningBundle {
            stage,
            cond,
            c_ref,
            c_null,
            target: Some(target),
        };
        b.check(self.latent_channels())?;
        Ok(b)
    }

    /// Depth-stage training bundle; target is `E(D_GT)`.
    pub fn build_stage1(&self, record: &TrainingRecord) -> Result<ConditioningBundle> {
        let cond = self.stage1_condition(&SceneInputs::of_record(record))?;
        let target = self.encode_depth(&record.gt_depth)?;
        self.bundle(StageKind::Stage1Depth, record, cond, target)
    }

    /// Image-stage training bundle conditioned on `depth_cond` (`D_GT` when
    /// training); target is `E(I_GT)`.
    pub fn build_stage2(&self, record: &TrainingRecord, depth_cond: &DepthMap) -> Result<ConditioningBundle> {
        let cond = self.stage2_condition(&SceneInputs::of_record(record), depth_cond)?;
        let target = self.encode(&record.gt)?;
        self.bundle(StageKind::Stage2Rgb, record, cond, target)
    }

    pub fn build_direct(&self, record: &TrainingRecord) -> Result<ConditioningBundle> {
        let cond = self.direct_condition(&SceneInputs::of_record(record))?;
        let target = self.encode(&record.gt)?;
        self.bundle(StageKind::Direct, record, cond, target)
    }

    /// Training bundle for `stage`, using `D_GT` as the stage-2 depth condition.
    pub fn build_training(&self, stage: StageKind, record: &TrainingRecord) -> Result<ConditioningBundle> {
        match stage {
            StageKind::Stage1Depth => self.build_stage1(record),
            StageKind::Stage2Rgb => self.build_stage2(record, &record.gt_depth),
            StageKind::Direct => self.build_direct(record),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::DoubleParams;
    use crate::dataset::DatasetConfig;
    use crate::synthetic::{synthetic_records, SyntheticSpec};

    fn setup() -> (Conditioner, TrainingRecord) {
        let backends = Backends::doubles(&DoubleParams::default()).unwrap();
        let config = DatasetConfig {
            resolution: 64,
            ..DatasetConfig::default()
        };
        let record = synthetic_records(1, SyntheticSpec::default(), &backends, &config, 5)
            .unwrap()
            .remove(0);
        (Conditioner::new(backends), record)
    }

    fn block(t: &LatentTensor, start: usize, count: usize) -> LatentTensor {
        t.channel_slice(start, count)
    }

    #[test]
    fn channel_arithmetic() {
        for c in [1, 4, 8] {
            assert_eq!(StageKind::Stage1Depth.backbone_input_channels(c), 4 * c + 2);
            assert_eq!(StageKind::Stage2Rgb.backbone_input_channels(c), 2 * c + 3);
            assert_eq!(StageKind::Direct.backbone_input_channels(c), 3 * c + 3);
        }
        assert_eq!(StageKind::Stage1Depth.cond_channels(4), 14);
        assert_eq!(StageKind::Stage2Rgb.cond_channels(4), 7);
        assert_eq!(StageKind::Direct.cond_channels(4), 11);
    }

    #[test]
    fn stage1_blocks_in_order() {
        let (k, r) = setup();
        let b = k.build_stage1(&r).unwrap();
        assert_eq!(b.cond.shape(), (14, 8, 8));
        let e = |x: &ImageRGB| k.backends().autoencoder.encode(x).unwrap();
        let masked = apply_mask(&r.scene_depth, &r.mask).unwrap();
        assert_eq!(block(&b.cond, 0, 4), e(&replicate_channels(&masked).unwrap()));
        assert_eq!(block(&b.cond, 4, 4), e(&r.scene));
        assert_eq!(block(&b.cond, 8, 4), e(&replicate_channels(&r.scene_depth).unwrap()));
        assert_eq!(block(&b.cond, 12, 1), resize_to_latent(&r.pose_depth, 8).unwrap());
        assert_eq!(block(&b.cond, 13, 1), resize_to_latent(&r.mask, 8).unwrap());
        assert_eq!(b.target.unwrap(), e(&replicate_channels(&r.gt_depth).unwrap()));
        // blocks carry different content, so a permutation cannot go unnoticed
        assert_ne!(block(&b.cond, 0, 4), block(&b.cond, 4, 4));
        assert_ne!(block(&b.cond, 12, 1), block(&b.cond, 13, 1));
    }

    #[test]
    fn stage2_and_direct_blocks_in_order() {
        let (k, r) = setup();
        let e = |x: &ImageRGB| k.backends().autoencoder.encode(x).unwrap();
        let s2 = k.build_stage2(&r, &r.gt_depth).unwrap();
        assert_eq!(s2.cond.channels(), 7);
        assert_eq!(block(&s2.cond, 0, 4), e(&r.scene));
        assert_eq!(block(&s2.cond, 4, 1), resize_to_latent(&r.gt_depth, 8).unwrap());
        assert_eq!(block(&s2.cond, 5, 1), resize_to_latent(&r.scene_depth, 8).unwrap());
        assert_eq!(block(&s2.cond, 6, 1), resize_to_latent(&r.pose_depth, 8).unwrap());
        assert_eq!(s2.target.as_ref().unwrap(), &e(&r.gt));

        let d = k.build_direct(&r).unwrap();
        assert_eq!(d.cond.channels(), 11);
        let masked = apply_mask(&r.scene.to_signed(), &r.mask).unwrap();
        assert_eq!(block(&d.cond, 0, 4), e(&masked));
        assert_eq!(block(&d.cond, 4, 4), e(&r.scene));
        assert_eq!(block(&d.cond, 8, 1), resize_to_latent(&r.scene_depth, 8).unwrap());
        assert_eq!(block(&d.cond, 9, 1), resize_to_latent(&r.pose_depth, 8).unwrap());
        assert_eq!(block(&d.cond, 10, 1), resize_to_latent(&r.mask, 8).unwrap());
        assert_ne!(block(&d.cond, 0, 4), block(&d.cond, 4, 4));
    }

    #[test]
    fn full_mask_makes_masked_blocks_equal() {
        let (k, mut r) = setup();
        r.mask = BinaryMask::filled(64, 64, true);
        let s = SceneInputs::of_record(&r);
        let s1 = k.stage1_condition(&s).unwrap();
        assert_eq!(block(&s1, 0, 4), block(&s1, 8, 4));
        let d = k.direct_condition(&s).unwrap();
        assert_eq!(block(&d, 0, 4), block(&d, 4, 4));
    }

    #[test]
    fn stage2_accepts_all_far_depth() {
        let (k, r) = setup();
        let far = DepthMap::new(
            ndarray::Array2::from_elem((64, 64), -1.0),
            crate::imaging::Normalization::Percentile,
        )
        .unwrap();
        assert!(k.build_stage2(&r, &far).is_ok());
        assert!(k
            .build_stage2(&r, &DepthMap::raw(ndarray::Array2::zeros((64, 64))).unwrap())
            .is_err());
    }

    #[test]
    fn null_embedding_is_cached_and_matches_blank_reference() {
        let (k, r) = setup();
        let blank = ImageRGB::filled(64, 64, r.fill, ValueRange::Unit).unwrap();
        let (c_ref, c_null) = k.reference_embeddings(&blank, r.fill).unwrap();
        assert_eq!(c_ref, c_null);
        let (c_ref2, c_null2) = k.reference_embeddings(&r.reference, r.fill).unwrap();
        assert_eq!(c_null2, c_null);
        assert_ne!(c_ref2, c_null2);
        assert_eq!(k.null_cache.lock().unwrap().len(), 1);
    }

    #[test]
    fn builders_are_deterministic() {
        let (k, r) = setup();
        assert_eq!(k.build_direct(&r).unwrap(), k.build_direct(&r).unwrap());
    }

    #[test]
    fn stage_names_parse() {
        for s in StageKind::ALL {
            assert_eq!(s.as_str().parse::<StageKind>().unwrap(), s);
        }
        assert!("stage3".parse::<StageKind>().is_err());
    }
}
