//! Deterministic stand-ins for the pretrained providers. Each is small,
//! linear where possible, and cheap enough to run inside unit tests.

use ndarray::{Array2, Array3};
use rand_distr::{Distribution, StandardNormal};

use super::{
    Autoencoder, AutoencoderSpec, BodyFit, BodyFitter, DepthEstimator, Embedding, PersonDetector, PersonSegmenter,
    ReferenceEncoder, SceneInpainter,
};
use crate::error::{Error, Result};
use crate::imaging::{BBox, BinaryMask, DepthMap, ImageRGB, LatentTensor, ValueRange};
use crate::render::{body_library, place_in_bbox, render_body_depth, BodyMesh, CameraSpec};

/// Green-screen classifier: a pixel is background when green exceeds both
/// other channels by more than `tolerance` (unit range).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChromaKey {
    pub tolerance: f64,
}

impl Default for ChromaKey {
    fn default() -> Self {
        Self { tolerance: 0.15 }
    }
}

impl ChromaKey {
    pub fn is_background(&self, p: [f64; 3]) -> bool {
        p[1] - p[0].max(p[2]) > self.tolerance
    }

    pub fn foreground(&self, x: &ImageRGB) -> BinaryMask {
        let unit = x.to_unit();
        BinaryMask::from_fn(unit.height(), unit.width(), |y, xx| {
            !self.is_background(unit.pixel(y, xx))
        })
    }
}

#[derive(Debug, Clone)]
pub struct ChromaKeyDetector {
    key: ChromaKey,
}

impl ChromaKeyDetector {
    pub fn new(key: ChromaKey) -> Self {
        Self { key }
    }
}

impl PersonDetector for ChromaKeyDetector {
    fn detect_person(&self, x: &ImageRGB) -> Result<Option<BBox>> {
        Ok(self.key.foreground(x).bbox_of(true))
    }
}

#[derive(Debug, Clone)]
pub struct ChromaKeySegmenter {
    key: ChromaKey,
}

impl ChromaKeySegmenter {
    pub fn new(key: ChromaKey) -> Self {
        Self { key }
    }
}

impl PersonSegmenter for ChromaKeySegmenter {
    fn segment_person(&self, x: &ImageRGB) -> Result<BinaryMask> {
        Ok(self.key.foreground(x))
    }
}

/// Picks the library body whose bbox-aligned silhouette best overlaps the
/// chroma-keyed person.
#[derive(Debug, Clone)]
pub struct CannedBodyFitter {
    key: ChromaKey,
    library: Vec<BodyMesh>,
    pub min_iou: f64,
}

impl CannedBodyFitter {
    pub fn new(key: ChromaKey) -> Self {
        Self {
            key,
            library: body_library(),
            min_iou: 0.5,
        }
    }

    pub fn with_library(key: ChromaKey, library: Vec<BodyMesh>, min_iou: f64) -> Self {
        Self { key, library, min_iou }
    }
}

fn iou(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&p, &q) in a.data().iter().zip(b.data().iter()) {
        inter += usize::from(p & q);
        union += usize::from(p | q);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

impl BodyFitter for CannedBodyFitter {
    fn fit_body(&self, x: &ImageRGB) -> Result<Option<BodyFit>> {
        let person = self.key.foreground(x);
        let Some(bbox) = person.bbox_of(true) else {
            return Ok(None);
        };
        let camera = CameraSpec::centered(x.height(), x.width());
        let mut best: Option<(f64, BodyMesh)> = None;
        for mesh in &self.library {
            let placed = place_in_bbox(mesh, &camera, bbox);
            let Ok(render) = render_body_depth(&placed, &camera) else {
                continue;
            };
            let score = iou(&render.silhouette, &person);
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, placed));
            }
        }
        Ok(best
            .filter(|(score, _)| *score >= self.min_iou)
            .map(|(_, mesh)| BodyFit { mesh, camera }))
    }
}

/// Fills the hole with the mean color of the non-hole pixels bordering it.
#[derive(Debug, Clone, Copy, Default)]
pub struct BorderMeanInpainter;

impl SceneInpainter for BorderMeanInpainter {
    fn inpaint(&self, x: &ImageRGB, hole: &BinaryMask, prompt: &str) -> Result<ImageRGB> {
        let (h, w) = (x.height(), x.width());
        if !hole.same_size(h, w) {
            return Err(Error::validation("inpainting hole does not match image size"));
        }
        log::debug!("inpaint double: {} hole pixels, prompt {prompt:?}", hole.count_ones());
        if hole.count_ones() == 0 {
            return Ok(x.clone());
        }
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        let mut acc = |p: [f64; 3]| {
            for c in 0..3 {
                sum[c] += p[c];
            }
            n += 1;
        };
        for y in 0..h {
            for xx in 0..w {
                if hole.get(y, xx) {
                    continue;
                }
                let borders = [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)].iter().any(|(dy, dx)| {
                    let (ny, nx) = (y as i64 + dy, xx as i64 + dx);
                    ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && hole.get(ny as usize, nx as usize)
                });
                if borders {
                    acc(x.pixel(y, xx));
                }
            }
        }
        let fill = if n == 0 {
            match x.range() {
                ValueRange::Unit => [0.5; 3],
                ValueRange::Signed => [0.0; 3],
            }
        } else {
            sum.map(|s| s / n as f64)
        };
        let mut data = x.data().clone();
        for ((y, xx, c), v) in data.indexed_iter_mut() {
            if hole.get(y, xx) {
                *v = fill[c];
            }
        }
        ImageRGB::new(data, x.range())
    }
}

/// Raw depth `0.5 + luma` of the unit-range image (brighter reads nearer).
#[derive(Debug, Clone, Copy, Default)]
pub struct LuminanceDepth;

impl DepthEstimator for LuminanceDepth {
    fn estimate_depth(&self, x: &ImageRGB) -> Result<DepthMap> {
        DepthMap::raw(x.to_unit().luminance().mapv(|l| 0.5 + l))
    }
}

/// Space-to-depth autoencoder: each `f×f×3` patch is projected onto `C`
/// orthonormal patch-basis functions (gray level and slopes first, then
/// chroma); decoding applies the transpose, which is the pseudo-inverse.
#[derive(Debug, Clone)]
pub struct LinearAutoencoder {
    spec: AutoencoderSpec,
    /// `C × 3f²`, orthonormal rows; patch index is `(dy·f + dx)·3 + c`.
    basis: Array2<f64>,
    scale: f64,
}

impl LinearAutoencoder {
    pub fn new(spec: AutoencoderSpec) -> Result<Self> {
        spec.validate()?;
        let f = spec.spatial_factor;
        let dim = 3 * f * f;
        if spec.latent_channels > dim {
            return Err(Error::validation(format!(
                "{} latent channels exceed patch dimension {dim}",
                spec.latent_channels
            )));
        }
        let basis = patch_basis(f, spec.latent_channels);
        Ok(Self {
            spec,
            basis,
            scale: 1.0 / (dim as f64).sqrt(),
        })
    }

    pub fn basis(&self) -> &Array2<f64> {
        &self.basis
    }
}

fn patch_basis(f: usize, count: usize) -> Array2<f64> {
    let dim = 3 * f * f;
    let coord = |i: usize| (i as f64 + 0.5) / f as f64 - 0.5;
    let gray = [1.0, 1.0, 1.0];
    let chroma1 = [1.0, 0.0, -1.0];
    let chroma2 = [1.0, -2.0, 1.0];
    type Spatial = fn(f64, f64) -> f64;
    let order: [(Spatial, [f64; 3]); 10] = [
        (|_, _| 1.0, gray),
        (|u, _| u, gray),
        (|_, v| v, gray),
        (|_, _| 1.0, chroma1),
        (|_, _| 1.0, chroma2),
        (|u, v| u * v, gray),
        (|u, _| u, chroma1),
        (|_, v| v, chroma1),
        (|u, _| u, chroma2),
        (|_, v| v, chroma2),
    ];
    let mut candidates: Vec<Vec<f64>> = order
        .iter()
        .map(|(s, col)| {
            let mut v = vec![0.0; dim];
            for dy in 0..f {
                for dx in 0..f {
                    for c in 0..3 {
                        v[(dy * f + dx) * 3 + c] = s(coord(dx), coord(dy)) * col[c];
                    }
                }
            }
            v
        })
        .collect();
    // Remaining directions: unit vectors, in order.
    candidates.extend((0..dim).map(|k| {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }));

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    for mut v in candidates {
        if rows.len() == count {
            break;
        }
        for r in &rows {
            let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-9 {
            rows.push(v.into_iter().map(|a| a / n).collect());
        }
    }
    Array2::from_shape_fn((count, dim), |(i, j)| rows[i][j])
}

impl Autoencoder for LinearAutoencoder {
    fn spec(&self) -> &AutoencoderSpec {
        &self.spec
    }

    fn encode(&self, x: &ImageRGB) -> Result<LatentTensor> {
        let f = self.spec.spatial_factor;
        if !x.height().is_multiple_of(f) || !x.width().is_multiple_of(f) {
            return Err(Error::validation(format!(
                "image {}×{} not divisible by spatial factor {f}",
                x.height(),
                x.width()
            )));
        }
        let x = x.to_signed();
        let (h, w) = (x.height() / f, x.width() / f);
        let c = self.spec.latent_channels;
        let px = x.data();
        let mut z = Array3::zeros((c, h, w));
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    let row = self.basis.row(k);
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            for ch in 0..3 {
                                acc += row[(dy * f + dx) * 3 + ch] * px[[i * f + dy, j * f + dx, ch]];
                            }
                        }
                    }
                    z[[k, i, j]] = acc * self.scale;
                }
            }
        }
        LatentTensor::new(z)
    }

    fn decode(&self, z: &LatentTensor) -> Result<ImageRGB> {
        let c = self.spec.latent_channels;
        if z.channels() != c {
            return Err(Error::validation(format!(
                "decoder expects {c} latent channels, got {}",
                z.channels()
            )));
        }
        let f = self.spec.spatial_factor;
        let (h, w) = (z.height(), z.width());
        let zd = z.data();
        let mut out = Array3::zeros((h * f, w * f, 3));
        for i in 0..h {
            for j in 0..w {
                for dy in 0..f {
                    for dx in 0..f {
                        for ch in 0..3 {
                            let idx = (dy * f + dx) * 3 + ch;
                            let v: f64 = (0..c).map(|k| self.basis[[k, idx]] * zd[[k, i, j]]).sum();
                            out[[i * f + dy, j * f + dx, ch]] = v / self.scale;
                        }
                    }
                }
            }
        }
        ImageRGB::from_clamped(out, ValueRange::Signed)
    }
}

/// Side of the average-pooling grid used by [`PooledProjectionEncoder`].
pub const POOL_SIZE: usize = 16;

/// Embeds a fixed-size image as a fixed projection of its `16×16`
/// average-pooled unit-range pixels; one token.
#[derive(Debug, Clone)]
pub struct PooledProjectionEncoder {
    height: usize,
    width: usize,
    /// `embedding width × (16·16·3)`; pooled index is `(y·16 + x)·3 + c`.
    projection: Array2<f64>,
}

impl PooledProjectionEncoder {
    pub fn seeded(height: usize, width: usize, embedding_width: usize, seed: u64) -> Result<Self> {
        let dim = POOL_SIZE * POOL_SIZE * 3;
        let mut rng = crate::seeds::rng(crate::seeds::derive(seed, "reference-encoder"));
        let norm = 1.0 / (dim as f64).sqrt();
        let projection = Array2::from_shape_fn((embedding_width, dim), |_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * norm
        });
        Self::with_projection(height, width, projection)
    }

    pub fn with_projection(height: usize, width: usize, projection: Array2<f64>) -> Result<Self> {
        if !height.is_multiple_of(POOL_SIZE) || !width.is_multiple_of(POOL_SIZE) || height == 0 || width == 0 {
            return Err(Error::validation(format!(
                "encoder input {height}×{width} must be a positive multiple of {POOL_SIZE}"
            )));
        }
        if projection.dim().1 != POOL_SIZE * POOL_SIZE * 3 || projection.dim().0 == 0 {
            return Err(Error::validation("projection must have 768 columns"));
        }
        Ok(Self {
            height,
            width,
            projection,
        })
    }

    pub fn pool(&self, x: &ImageRGB) -> Result<Vec<f64>> {
        if x.height() != self.height || x.width() != self.width {
            return Err(Error::validation(format!(
                "reference encoder expects {}×{}, got {}×{}",
                self.height,
                self.width,
                x.height(),
                x.width()
            )));
        }
        let unit = x.to_unit();
        let (by, bx) = (self.height / POOL_SIZE, self.width / POOL_SIZE);
        let n = (by * bx) as f64;
        let mut pooled = vec![0.0; POOL_SIZE * POOL_SIZE * 3];
        for py in 0..POOL_SIZE {
            for px in 0..POOL_SIZE {
                for c in 0..3 {
                    let mut s = 0.0;
                    for y in py * by..(py + 1) * by {
                        for xx in px * bx..(px + 1) * bx {
                            s += unit.data()[[y, xx, c]];
                        }
                    }
                    pooled[(py * POOL_SIZE + px) * 3 + c] = s / n;
                }
            }
        }
        Ok(pooled)
    }
}

impl ReferenceEncoder for PooledProjectionEncoder {
    fn width(&self) -> usize {
        self.projection.dim().0
    }

    fn embed(&self, x: &ImageRGB) -> Result<Embedding> {
        let pooled = self.pool(x)?;
        let out = self.projection.dot(&ndarray::Array1::from(pooled));
        Embedding::new(out.insert_axis(ndarray::Axis(0)))
    }
}
