//! Procedural person videos for tests and desk-scale runs.
//!
//! Scenes are green-dominant textures so the chroma-key doubles can separate
//! them from the person, which is a box-figure body from the canned library
//! walking across the frame.

use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::backends::Backends;
use crate::dataset::{build_record, sample_frames, sample_pair, DatasetConfig, FramePair, TrainingRecord};
use crate::error::{Error, Result};
use crate::imaging::{BBox, ImageRGB, ValueRange};
use crate::render::{body_library, place_in_bbox, render_body_depth, CameraSpec};
use crate::seeds;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    /// Person height as a fraction of the frame height.
    pub person_height: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 96,
            frames: 12,
            person_height: 0.6,
        }
    }
}

/// One deterministic synthetic video; frames are generated on demand.
#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    spec: SyntheticSpec,
    pose: usize,
    clothing: [f64; 3],
    scene: ImageRGB,
}

impl SyntheticVideo {
    pub fn new(index: usize, spec: SyntheticSpec, seed: u64) -> Result<Self> {
        if spec.frames < 2 || spec.height < 16 || spec.width < 16 {
            return Err(Error::validation("synthetic video needs at least 2 frames of 16×16"));
        }
        let mut rng = seeds::stream(seed, &format!("synthetic/{index}"));
        let phases = [0; 4].map(|_| rng.random_range(0.0..std::f64::consts::TAU));
        // red or blue dominant so the chroma key never treats it as scene
        let clothing = if index.is_multiple_of(2) {
            [
                rng.random_range(0.65..0.9),
                rng.random_range(0.2..0.4),
                rng.random_range(0.15..0.35),
            ]
        } else {
            [
                rng.random_range(0.15..0.35),
                rng.random_range(0.25..0.45),
                rng.random_range(0.65..0.9),
            ]
        };
        let scene = scene_texture(spec.height, spec.width, phases)?;
        Ok(Self {
            id: format!("synth{index:03}"),
            spec,
            pose: index % body_library().len(),
            clothing,
            scene,
        })
    }

    pub fn spec(&self) -> SyntheticSpec {
        self.spec
    }

    pub fn scene(&self) -> &ImageRGB {
        &self.scene
    }

    /// Person box at frame `t`: constant size, sliding left to right.
    pub fn person_bbox(&self, t: usize) -> BBox {
        let SyntheticSpec {
            height,
            width,
            frames,
            person_height,
        } = self.spec;
        let ph = ((height as f64 * person_height).round() as usize).clamp(4, height - 2);
        let pw = (ph / 2).max(2);
        let travel = (width - pw - 2) as f64;
        let s = t as f64 / (frames - 1) as f64;
        let x0 = 1 + (0.15 * travel + 0.7 * travel * s).round() as usize;
        let y0 = (height - ph) / 2;
        BBox::new(x0, y0, x0 + pw, y0 + ph)
    }

    pub fn frame(&self, t: usize) -> Result<ImageRGB> {
        if t >= self.spec.frames {
            return Err(Error::validation(format!("frame {t} of {}", self.spec.frames)));
        }
        let cam = CameraSpec::centered(self.spec.height, self.spec.width);
        let mesh = place_in_bbox(&body_library()[self.pose], &cam, self.person_bbox(t));
        let render = render_body_depth(&mesh, &cam)?;
        // shade by depth so the person carries structure
        let depth = render.depth.data();
        let (mut near, mut far) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, &d) in depth.indexed_iter() {
            if render.silhouette.data()[i] == 1 {
                near = near.min(d);
                far = far.max(d);
            }
        }
        let span = (far - near).max(1e-9);
        let mut data = self.scene.data().clone();
        for ((y, x, c), v) in data.indexed_iter_mut() {
            if render.silhouette.get(y, x) {
                let shade = 1.0 - 0.35 * (depth[[y, x]] - near) / span;
                *v = (self.clothing[c] * shade).clamp(0.0, 1.0);
            }
        }
        ImageRGB::new(data, ValueRange::Unit)
    }

    pub fn frames(&self) -> Result<Vec<ImageRGB>> {
        (0..self.spec.frames).map(|t| self.frame(t)).collect()
    }
}

/// Smooth green-dominant texture with a vertical brightness falloff.
pub fn scene_texture(height: usize, width: usize, phases: [f64; 4]) -> Result<ImageRGB> {
    ImageRGB::from_fn(height, width, ValueRange::Unit, |y, x| {
        let (u, v) = (x as f64 / width as f64, y as f64 / height as f64);
        let a = 0.5 + 0.5 * (6.0 * u + phases[0]).sin() * (4.0 * v + phases[1]).cos();
        let b = 0.5 + 0.5 * (9.0 * u * v + phases[2]).sin();
        [0.1 + 0.18 * a, 0.5 + 0.25 * b + 0.2 * v, 0.08 + 0.15 * (1.0 - a)]
    })
}

/// Writes `count` videos as `<dir>/<id>/frame_NNNN.png`.
pub fn write_videos(dir: &Path, count: usize, spec: SyntheticSpec, seed: u64) -> Result<Vec<PathBuf>> {
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let video = SyntheticVideo::new(i, spec, seed)?;
        let vdir = dir.join(&video.id);
        std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
        for (t, frame) in video.frames()?.iter().enumerate() {
            frame.save_png(&vdir.join(format!("frame_{t:04}.png")))?;
        }
        out.push(vdir);
    }
    Ok(out)
}

/// Builds records in memory, one pair per video, following the same frame
/// sampling as the on-disk pipeline.
pub fn synthetic_records(
    count: usize,
    spec: SyntheticSpec,
    backends: &Backends,
    config: &DatasetConfig,
    seed: u64,
) -> Result<Vec<TrainingRecord>> {
    let mut records = Vec::with_capacity(count);
    let mut index = 0;
    while records.len() < count {
        if index >= count * 4 + 8 {
            return Err(Error::validation("synthetic generator keeps producing skipped pairs"));
        }
        let video = SyntheticVideo::new(index, spec, seed)?;
        index += 1;
        let sampled = sample_frames(spec.frames, config.frames_per_video)?;
        let mut rng = seeds::stream(seed, &format!("data/{}", video.id));
        let (ri, gi) = sample_pair(&sampled, &mut rng)?;
        let pair = FramePair::new(video.id.clone(), ri, gi, video.frame(ri)?, video.frame(gi)?)?;
        match build_record(&pair, backends, config) {
            Ok(r) => records.push(r),
            Err(Error::Skipped(reason)) => log::warn!("synthetic video {} skipped: {reason}", video.id),
            Err(e) => return Err(e),
        }
    }
    Ok(records)
}
