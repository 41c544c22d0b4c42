use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BBox, BinaryMask, DepthMap, ImageRGB, Normalization, ValueRange};

/// Fixed file names inside a record directory.
pub const RECORD_FILES: [&str; 8] = [
    "gt.png",
    "scene.png",
    "ref.png",
    "depth_gt.png",
    "depth_scene.png",
    "depth_pose.png",
    "mask.png",
    "meta.toml",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub video_id: String,
    pub reference_index: usize,
    pub gt_index: usize,
    pub config_hash: String,
    pub reference_bbox: BBox,
    pub gt_bbox: BBox,
}

/// One supervised example. All images are unit range and share one size.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingRecord {
    pub id: String,
    /// I_GT: frame with the person.
    pub gt: ImageRGB,
    /// I_s: the same frame with the person inpainted away.
    pub scene: ImageRGB,
    /// I_ref: the person over `fill`.
    pub reference: ImageRGB,
    pub fill: [f64; 3],
    pub gt_depth: DepthMap,
    pub scene_depth: DepthMap,
    pub pose_depth: DepthMap,
    /// 1 = scene kept, 0 = insertion region.
    pub mask: BinaryMask,
    pub meta: RecordMeta,
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    id: String,
    fill: [f64; 3],
    gt_depth_normalization: Normalization,
    scene_depth_normalization: Normalization,
    pose_depth_normalization: Normalization,
    meta: RecordMeta,
}

impl TrainingRecord {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let bad = |what: &str| Err(Error::validation(format!("record {}: {what}", self.id)));
        for img in [&self.gt, &self.scene, &self.reference] {
            if img.height() != h || img.width() != w {
                return bad("image sizes differ");
            }
            if img.range() != ValueRange::Unit {
                return bad("images must be stored in the unit range");
            }
        }
        for d in [&self.gt_depth, &self.scene_depth, &self.pose_depth] {
            if d.height() != h || d.width() != w {
                return bad("depth sizes differ");
            }
            if !d.is_normalized() {
                return bad("depth maps must be normalized");
            }
        }
        if !self.mask.same_size(h, w) {
            return bad("mask size differs");
        }
        if self.mask.zero_region().is_none() {
            return bad("insertion region is empty");
        }
        if self.fill.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return bad("fill color outside [0, 1]");
        }
        Ok(())
    }
}

/// Writes `record` to `<parent>/<id>` via a temporary directory and rename,
/// so readers never observe a partial record.
pub fn write_record(record: &TrainingRecord, parent: &Path) -> Result<PathBuf> {
    record.validate()?;
    let target = parent.join(&record.id);
    let tmp = parent.join(format!(".tmp-{}-{}", record.id, std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let write = || -> Result<()> {
        record.gt.save_png(&tmp.join("gt.png"))?;
        record.scene.save_png(&tmp.join("scene.png"))?;
        record.reference.save_png(&tmp.join("ref.png"))?;
        record.gt_depth.save_png16(&tmp.join("depth_gt.png"))?;
        record.scene_depth.save_png16(&tmp.join("depth_scene.png"))?;
        record.pose_depth.save_png16(&tmp.join("depth_pose.png"))?;
        record.mask.save_png(&tmp.join("mask.png"))?;
        let meta = MetaFile {
            id: record.id.clone(),
            fill: record.fill,
            gt_depth_normalization: record.gt_depth.normalization(),
            scene_depth_normalization: record.scene_depth.normalization(),
            pose_depth_normalization: record.pose_depth.normalization(),
            meta: record.meta.clone(),
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Config(e.to_string()))?;
        let path = tmp.join("meta.toml");
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_dir_all(&tmp);
        return Err(e);
    }
    if target.exists() {
        std::fs::remove_dir_all(&target).map_err(|e| Error::io(&target, e))?;
    }
    std::fs::rename(&tmp, &target).map_err(|e| Error::io(&target, e))?;
    Ok(target)
}

pub fn read_record(dir: &Path) -> Result<TrainingRecord> {
    let corrupt = |reason: String| Error::CorruptRecord {
        path: dir.to_path_buf(),
        reason,
    };
    if let Some(missing) = RECORD_FILES.iter().find(|f| !dir.join(f).is_file()) {
        return Err(corrupt(format!("missing {missing}")));
    }
    let text = std::fs::read_to_string(dir.join("meta.toml")).map_err(|e| Error::io(dir.join("meta.toml"), e))?;
    let meta: MetaFile = toml::from_str(&text).map_err(|e| corrupt(format!("meta.toml: {e}")))?;
    let load = || -> Result<TrainingRecord> {
        Ok(TrainingRecord {
            id: meta.id.clone(),
            gt: ImageRGB::load_png(&dir.join("gt.png"))?,
            scene: ImageRGB::load_png(&dir.join("scene.png"))?,
            reference: ImageRGB::load_png(&dir.join("ref.png"))?,
            // stored like the reference pixels, so background pixels match it exactly
            fill: meta.fill.map(|c| (c * 255.0).round() / 255.0),
            gt_depth: DepthMap::load_png16(&dir.join("depth_gt.png"), meta.gt_depth_normalization)?,
            scene_depth: DepthMap::load_png16(&dir.join("depth_scene.png"), meta.scene_depth_normalization)?,
            pose_depth: DepthMap::load_png16(&dir.join("depth_pose.png"), meta.pose_depth_normalization)?,
            mask: BinaryMask::load_png(&dir.join("mask.png"))?,
            meta: meta.meta.clone(),
        })
    };
    let record = load().map_err(|e| corrupt(e.to_string()))?;
    record.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(record)
}
