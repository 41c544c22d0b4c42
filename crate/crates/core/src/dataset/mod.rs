//! Annotation-free construction of training records from person videos.
//!
//! A video is a directory of frame images. Frames are sampled at even
//! intervals, two distinct samples form a (reference, ground-truth) pair, and
//! each pair runs through detection, cropping, segmentation, inpainting,
//! body fitting and depth estimation to produce one [`TrainingRecord`].

mod manifest;
mod record;

use std::fmt;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::{BackendSelection, Backends, INPAINT_PROMPT};
use crate::error::{Error, Result};
use crate::imaging::{normalize_depth, reflect_index, BBox, BinaryMask, ImageRGB, NormalizeMode, ValueRange};
use crate::render::build_pose_inputs;

pub use manifest::{DatasetManifest, ManifestEntry, Split, MANIFEST_FILE};
pub use record::{read_record, write_record, RecordMeta, TrainingRecord, RECORD_FILES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SkipReason {
    NoPerson,
    DegenerateBbox,
    EmptySilhouette,
    FitFailure,
    TooFewFrames,
}

impl SkipReason {
    pub const ALL: [SkipReason; 5] = [
        SkipReason::NoPerson,
        SkipReason::DegenerateBbox,
        SkipReason::EmptySilhouette,
        SkipReason::FitFailure,
        SkipReason::TooFewFrames,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SkipReason::NoPerson => "no-person",
            SkipReason::DegenerateBbox => "degenerate-bbox",
            SkipReason::EmptySilhouette => "empty-silhouette",
            SkipReason::FitFailure => "fit-failure",
            SkipReason::TooFewFrames => "too-few-frames",
        }
    }
}

impl fmt::Display for SkipReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference-image augmentation applied at training time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            brightness: 0.1,
            contrast: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self {
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub resolution: usize,
    pub frames_per_video: usize,
    pub pairs_per_video: usize,
    pub dilation_radius: usize,
    /// Square crop side as a multiple of the longer person-bbox side.
    pub crop_context: f64,
    pub fill_color: [f64; 3],
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub backends: BackendSelection,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            resolution: 512,
            frames_per_video: 30,
            pairs_per_video: 1,
            dilation_radius: 12,
            crop_context: 1.5,
            fill_color: [0.5, 0.5, 0.5],
            val_fraction: 0.1,
            test_fraction: 0.1,
            backends: BackendSelection::default(),
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution == 0 {
            return Err(Error::Config("resolution must be positive".into()));
        }
        if self.frames_per_video < 2 {
            return Err(Error::Config("frames_per_video must be at least 2".into()));
        }
        if self.crop_context < 1.0 {
            return Err(Error::Config("crop_context must be at least 1".into()));
        }
        if self.fill_color.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Config("fill_color must be in [0, 1]".into()));
        }
        let fr = self.val_fraction + self.test_fraction;
        if self.val_fraction < 0.0 || self.test_fraction < 0.0 || fr > 1.0 {
            return Err(Error::Config(
                "split fractions must be non-negative and sum to at most 1".into(),
            ));
        }
        Ok(())
    }

    /// Stable short hash of every field; any change yields a new hash.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of the SHA-256 of a value's JSON form.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_string(value).expect("config serializes");
    hex::encode(&Sha256::digest(json.as_bytes())[..8])
}

#[derive(Debug, Clone, PartialEq)]
pub struct FramePair {
    pub video_id: String,
    pub reference_index: usize,
    pub gt_index: usize,
    pub reference_frame: ImageRGB,
    pub gt_frame: ImageRGB,
}

impl FramePair {
    pub fn new(
        video_id: impl Into<String>,
        reference_index: usize,
        gt_index: usize,
        reference_frame: ImageRGB,
        gt_frame: ImageRGB,
    ) -> Result<Self> {
        if reference_index == gt_index {
            return Err(Error::validation("reference and ground-truth frames must differ"));
        }
        Ok(Self {
            video_id: video_id.into(),
            reference_index,
            gt_index,
            reference_frame,
            gt_frame,
        })
    }
}

/// Evenly spaced frame indices with stride `⌊(N−1)/(k−1)⌋`, starting at 0.
pub fn sample_frames(frame_count: usize, count: usize) -> Result<Vec<usize>> {
    if frame_count < 2 {
        return Err(Error::Skipped(SkipReason::TooFewFrames));
    }
    if count >= frame_count {
        return Ok((0..frame_count).collect());
    }
    if count <= 1 {
        return Ok(vec![0]);
    }
    let stride = (frame_count - 1) / (count - 1);
    Ok((0..count).map(|i| i * stride).collect())
}

/// Two distinct entries of `sampled`, drawn uniformly: `(reference, gt)`.
pub fn sample_pair(sampled: &[usize], rng: &mut impl Rng) -> Result<(usize, usize)> {
    if sampled.len() < 2 {
        return Err(Error::Skipped(SkipReason::TooFewFrames));
    }
    let a = rng.random_range(0..sampled.len());
    let mut b = rng.random_range(0..sampled.len() - 1);
    if b >= a {
        b += 1;
    }
    Ok((sampled[a], sampled[b]))
}

/// Square window around the bbox center whose side is `context` times the
/// longer bbox side, reflection-padded where it leaves the frame, resized to
/// `out_size × out_size`.
pub fn crop_person(frame: &ImageRGB, bbox: BBox, context: f64, out_size: usize) -> Result<ImageRGB> {
    if bbox.width() < 2 || bbox.height() < 2 || bbox.x1 > frame.width() || bbox.y1 > frame.height() {
        return Err(Error::Skipped(SkipReason::DegenerateBbox));
    }
    let side = ((bbox.width().max(bbox.height()) as f64) * context).round() as usize;
    let left = bbox.x0 as isize - (side as isize - bbox.width() as isize).div_euclid(2);
    let top = bbox.y0 as isize - (side as isize - bbox.height() as isize).div_euclid(2);
    let (h, w) = (frame.height(), frame.width());
    let window = ImageRGB::from_fn(side, side, frame.range(), |y, x| {
        let sy = reflect_index(top + y as isize, h);
        let sx = reflect_index(left + x as isize, w);
        frame.pixel(sy, sx)
    })?;
    window.resize(out_size, out_size)
}

/// Person pixels over a constant fill, re-centered on the canvas.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub image: ImageRGB,
    pub fill: [f64; 3],
}

impl ReferenceImage {
    /// The unconditional image: the canvas filled with the background color.
    pub fn unconditional(&self) -> ImageRGB {
        ImageRGB::filled(self.image.height(), self.image.width(), self.fill, ValueRange::Unit)
            .expect("fill color validated on construction")
    }

    /// Person pixels, i.e. those differing from the fill color.
    pub fn person_mask(&self) -> BinaryMask {
        BinaryMask::from_fn(self.image.height(), self.image.width(), |y, x| {
            self.image.pixel(y, x) != self.fill
        })
    }
}

pub fn extract_reference(frame: &ImageRGB, silhouette: &BinaryMask, fill: [f64; 3]) -> Result<ReferenceImage> {
    let (h, w) = (frame.height(), frame.width());
    if !silhouette.same_size(h, w) {
        return Err(Error::validation("silhouette does not match frame"));
    }
    let bbox = silhouette
        .bbox_of(true)
        .ok_or(Error::Skipped(SkipReason::EmptySilhouette))?;
    let unit = frame.to_unit();
    let dy = (h as isize - (bbox.y0 + bbox.y1) as isize).div_euclid(2);
    let dx = (w as isize - (bbox.x0 + bbox.x1) as isize).div_euclid(2);
    let image = ImageRGB::from_fn(h, w, ValueRange::Unit, |y, x| {
        let (sy, sx) = (y as isize - dy, x as isize - dx);
        if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w && silhouette.get(sy as usize, sx as usize) {
            unit.pixel(sy as usize, sx as usize)
        } else {
            fill
        }
    })?;
    Ok(ReferenceImage { image, fill })
}

/// Random horizontal flip plus brightness/contrast jitter on person pixels.
pub fn augment_reference(reference: &ReferenceImage, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<ImageRGB> {
    let flip = cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob.clamp(0.0, 1.0));
    let brightness = 1.0 + jitter(cfg.brightness, rng);
    let contrast = 1.0 + jitter(cfg.contrast, rng);
    let mut base = reference.clone();
    if flip {
        base.image = base.image.flip_horizontal();
    }
    if brightness == 1.0 && contrast == 1.0 {
        return Ok(base.image);
    }
    let person = base.person_mask();
    let count = person.count_ones();
    if count == 0 {
        return Ok(base.image);
    }
    let lum = base.image.luminance();
    let mean = lum
        .indexed_iter()
        .filter(|(i, _)| person.data()[*i] == 1)
        .map(|(_, &v)| v)
        .sum::<f64>()
        / count as f64;
    let mut data = base.image.data().clone();
    for ((y, x, _), v) in data.indexed_iter_mut() {
        if person.get(y, x) {
            *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
    ImageRGB::new(data, ValueRange::Unit)
}

fn jitter(amount: f64, rng: &mut impl Rng) -> f64 {
    if amount > 0.0 {
        rng.random_range(-amount..=amount)
    } else {
        0.0
    }
}

/// Runs the full per-pair construction pipeline.
pub fn build_record(pair: &FramePair, backends: &Backends, config: &DatasetConfig) -> Result<TrainingRecord> {
    let res = config.resolution;

    // reference frame → I_ref
    let ref_box = backends
        .detector
        .detect_person(&pair.reference_frame)?
        .ok_or(Error::Skipped(SkipReason::NoPerson))?;
    let ref_crop = crop_person(&pair.reference_frame, ref_box, config.crop_context, res)?;
    let ref_sil = backends.segmenter.segment_person(&ref_crop)?;
    if ref_sil.count_ones() == 0 {
        return Err(Error::Skipped(SkipReason::EmptySilhouette));
    }
    let reference = extract_reference(&ref_crop, &ref_sil, config.fill_color)?;

    // ground-truth frame → I_GT, I_s, D_p, M, D_s, D_GT
    let gt_box = backends
        .detector
        .detect_person(&pair.gt_frame)?
        .ok_or(Error::Skipped(SkipReason::NoPerson))?;
    let gt = crop_person(&pair.gt_frame, gt_box, config.crop_context, res)?.to_unit();
    let gt_sil = backends.segmenter.segment_person(&gt)?;
    if gt_sil.count_ones() == 0 {
        return Err(Error::Skipped(SkipReason::EmptySilhouette));
    }
    let scene = backends.inpainter.inpaint(&gt, &gt_sil, INPAINT_PROMPT)?.to_unit();
    let fit = backends
        .fitter
        .fit_body(&gt)?
        .ok_or(Error::Skipped(SkipReason::FitFailure))?;
    let pose = build_pose_inputs(&fit.mesh, &fit.camera, config.dilation_radius)?;
    let scene_depth = normalize_depth(&backends.depth.estimate_depth(&scene)?, NormalizeMode::percentile())?;
    let gt_depth = normalize_depth(&backends.depth.estimate_depth(&gt)?, NormalizeMode::percentile())?;

    let record = TrainingRecord {
        id: format!("{}_{:05}_{:05}", pair.video_id, pair.reference_index, pair.gt_index),
        gt,
        scene,
        reference: reference.image,
        fill: reference.fill,
        gt_depth,
        scene_depth,
        pose_depth: pose.pose_depth,
        mask: pose.mask,
        meta: RecordMeta {
            video_id: pair.video_id.clone(),
            reference_index: pair.reference_index,
            gt_index: pair.gt_index,
            config_hash: config.hash(),
            reference_bbox: ref_box,
            gt_bbox: gt_box,
        },
    };
    record.validate()?;
    Ok(record)
}

/// Per-run counts from [`prepare_dataset`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PrepareSummary {
    pub written: usize,
    pub skipped: Vec<(String, SkipReason)>,
    pub manifest: DatasetManifest,
}

/// Frame files of a video directory, sorted by name.
pub fn list_frames(video_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut frames: Vec<PathBuf> = read_dir_sorted(video_dir)?
        .into_iter()
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    frames.sort();
    Ok(frames)
}

pub(crate) fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

/// Builds a dataset directory from a directory of videos (one sub-directory
/// of frame images per video).
pub fn prepare_dataset(
    videos_dir: &Path,
    out_dir: &Path,
    config: &DatasetConfig,
    seed: u64,
    backends: &Backends,
) -> Result<PrepareSummary> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let hash = config.hash();
    log::info!("stage=prepare-data config_hash={hash} seed={seed}");

    let mut summary = PrepareSummary::default();
    let mut entries = Vec::new();
    for video in read_dir_sorted(videos_dir)?.into_iter().filter(|p| p.is_dir()) {
        let video_id = video
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("video")
            .to_string();
        let frames = list_frames(&video)?;
        let sampled = match sample_frames(frames.len(), config.frames_per_video) {
            Ok(s) => s,
            Err(Error::Skipped(reason)) => {
                log::warn!("stage=prepare-data video={video_id} skipped={reason}");
                summary.skipped.push((video_id, reason));
                continue;
            }
            Err(e) => return Err(e),
        };
        let mut rng = crate::seeds::stream(seed, &format!("data/{video_id}"));
        for _ in 0..config.pairs_per_video {
            let (ri, gi) = sample_pair(&sampled, &mut rng)?;
            let pair = FramePair::new(
                video_id.clone(),
                ri,
                gi,
                ImageRGB::load_png(&frames[ri])?,
                ImageRGB::load_png(&frames[gi])?,
            )?;
            match build_record(&pair, backends, config) {
                Ok(record) => {
                    if entries.iter().any(|e: &ManifestEntry| e.id == record.id) {
                        continue;
                    }
                    write_record(&record, out_dir)?;
                    log::info!("stage=prepare-data record={} written", record.id);
                    entries.push(ManifestEntry::from_record(&record, Split::Train));
                }
                Err(Error::Skipped(reason)) => {
                    let id = format!("{video_id}_{ri:05}_{gi:05}");
                    log::warn!("stage=prepare-data record={id} skipped={reason}");
                    summary.skipped.push((id, reason));
                }
                Err(e) => return Err(e),
            }
        }
    }

    assign_splits(&mut entries, config, seed);
    let manifest = DatasetManifest::new(hash, entries);
    manifest.write(out_dir)?;
    summary.written = manifest.entries.len();
    summary.manifest = manifest;
    Ok(summary)
}

/// Seeded shuffle, then test, validation and train slices in that order.
fn assign_splits(entries: &mut [ManifestEntry], config: &DatasetConfig, seed: u64) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut crate::seeds::stream(seed, "split"));
    let n = entries.len() as f64;
    let n_test = (config.test_fraction * n).round() as usize;
    let n_val = (config.val_fraction * n).round() as usize;
    for (rank, &i) in order.iter().enumerate() {
        entries[i].split = if rank < n_test {
            Split::Test
        } else if rank < n_test + n_val {
            Split::Val
        } else {
            Split::Train
        };
    }
}

/// A dataset directory loaded into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<(Split, TrainingRecord)>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest = DatasetManifest::read(dir)?;
        manifest.verify_against_directory(dir)?;
        let records = manifest
            .entries
            .iter()
            .map(|e| Ok((e.split, read_record(&dir.join(&e.id))?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { manifest, records })
    }

    pub fn split(&self, split: Split) -> Vec<&TrainingRecord> {
        self.records
            .iter()
            .filter(|(s, _)| *s == split)
            .map(|(_, r)| r)
            .collect()
    }
}
