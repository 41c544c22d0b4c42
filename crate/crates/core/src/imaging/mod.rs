//! Pixel- and latent-space primitives shared by every stage of the pipeline.
//!
//! Images are stored `H×W×3` in either the unit range (`[0, 1]`, used for
//! storage and metrics) or the signed range (`[-1, 1]`, used at model I/O).
//! Depth maps are single channel and carry the normalization that produced
//! them. Masks are `{0, 1}`; for the insertion mask the convention is
//! `1 = scene kept`, `0 = insertion region`.

mod io;
mod resize;

use ndarray::{Array2, Array3, Axis};

use crate::error::{Error, Result};

pub use io::{dequantize_depth, quantize_depth};
pub use resize::{pad_reflect_to_multiple, reflect_index, resize_bilinear, Padding};

/// Default percentile bounds for robust depth normalization.
pub const PERCENTILE_LO: f64 = 0.02;
pub const PERCENTILE_HI: f64 = 0.98;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueRange {
    /// `[0, 1]`
    Unit,
    /// `[-1, 1]`
    Signed,
}

impl ValueRange {
    fn bounds(self) -> (f64, f64) {
        match self {
            ValueRange::Unit => (0.0, 1.0),
            ValueRange::Signed => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGB {
    data: Array3<f64>,
    range: ValueRange,
}

impl ImageRGB {
    pub fn new(data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (h, w, c) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation("image must be non-empty"));
        }
        if c != 3 {
            return Err(Error::validation(format!("image must have 3 channels, got {c}")));
        }
        let (lo, hi) = range.bounds();
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && **v >= lo && **v <= hi)) {
            return Err(Error::validation(format!(
                "image value {v} outside declared range [{lo}, {hi}]"
            )));
        }
        Ok(Self { data, range })
    }

    /// Builds an image after clamping every value into `range`.
    pub fn from_clamped(mut data: Array3<f64>, range: ValueRange) -> Result<Self> {
        let (lo, hi) = range.bounds();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("non-finite pixel value"));
        }
        data.mapv_inplace(|v| v.clamp(lo, hi));
        Self::new(data, range)
    }

    pub fn filled(height: usize, width: usize, color: [f64; 3], range: ValueRange) -> Result<Self> {
        let data = Array3::from_shape_fn((height, width, 3), |(_, _, c)| color[c]);
        Self::new(data, range)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn range(&self) -> ValueRange {
        self.range
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.data[[y, x, 0]], self.data[[y, x, 1]], self.data[[y, x, 2]]]
    }

    pub fn to_signed(&self) -> ImageRGB {
        match self.range {
            ValueRange::Signed => self.clone(),
            ValueRange::Unit => ImageRGB {
                data: self.data.mapv(|v| (2.0 * v - 1.0).clamp(-1.0, 1.0)),
                range: ValueRange::Signed,
            },
        }
    }

    pub fn to_unit(&self) -> ImageRGB {
        match self.range {
            ValueRange::Unit => self.clone(),
            ValueRange::Signed => ImageRGB {
                data: self.data.mapv(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0)),
                range: ValueRange::Unit,
            },
        }
    }

    /// Rec. 601 luma, in the image's own range.
    pub fn luminance(&self) -> Array2<f64> {
        Array2::from_shape_fn((self.height(), self.width()), |(y, x)| {
            0.299 * self.data[[y, x, 0]] + 0.587 * self.data[[y, x, 1]] + 0.114 * self.data[[y, x, 2]]
        })
    }

    /// Copies the `[y0, y1) × [x0, x1)` window. Bounds must lie inside the image.
    pub fn crop(&self, bbox: BBox) -> Result<ImageRGB> {
        if bbox.x1 > self.width() || bbox.y1 > self.height() || bbox.is_empty() {
            return Err(Error::validation(format!("crop window {bbox:?} outside image")));
        }
        let view = self
            .data
            .slice(ndarray::s![bbox.y0..bbox.y1, bbox.x0..bbox.x1, ..])
            .to_owned();
        Ok(ImageRGB {
            data: view,
            range: self.range,
        })
    }

    pub fn flip_horizontal(&self) -> ImageRGB {
        let mut data = self.data.clone();
        data.invert_axis(Axis(1));
        ImageRGB {
            data,
            range: self.range,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalization {
    MinMax,
    Percentile,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    data: Array2<f64>,
    normalization: Normalization,
}

impl DepthMap {
    pub fn new(data: Array2<f64>, normalization: Normalization) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation("depth map must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("depth map contains non-finite values"));
        }
        if normalization != Normalization::Raw && data.iter().any(|v| v.abs() > 1.0) {
            return Err(Error::validation("normalized depth outside [-1, 1]"));
        }
        Ok(Self { data, normalization })
    }

    pub fn raw(data: Array2<f64>) -> Result<Self> {
        Self::new(data, Normalization::Raw)
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn normalization(&self) -> Normalization {
        self.normalization
    }

    pub fn is_normalized(&self) -> bool {
        self.normalization != Normalization::Raw
    }

    /// Clamps into `[-1, 1]` and tags the result with `normalization`.
    pub fn clamped(&self, normalization: Normalization) -> DepthMap {
        DepthMap {
            data: self.data.mapv(|v| v.clamp(-1.0, 1.0)),
            normalization,
        }
    }

    pub fn negated(&self) -> DepthMap {
        DepthMap {
            data: self.data.mapv(|v| -v),
            normalization: self.normalization,
        }
    }
}

/// `{0, 1}` mask. Semantics depend on use: silhouettes mark the person with 1,
/// the insertion mask marks the kept scene with 1.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    data: Array2<u8>,
}

impl BinaryMask {
    pub fn new(data: Array2<u8>) -> Result<Self> {
        let (h, w) = data.dim();
        if h == 0 || w == 0 {
            return Err(Error::validation("mask must be non-empty"));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::validation("mask values must be 0 or 1"));
        }
        Ok(Self { data })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            data: Array2::from_elem((height, width), value as u8),
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        Self {
            data: Array2::from_shape_fn((height, width), |(y, x)| f(y, x) as u8),
        }
    }

    pub fn height(&self) -> usize {
        self.data.dim().0
    }

    pub fn width(&self) -> usize {
        self.data.dim().1
    }

    pub fn data(&self) -> &Array2<u8> {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[[y, x]] == 1
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn invert(&self) -> BinaryMask {
        BinaryMask {
            data: self.data.mapv(|v| 1 - v),
        }
    }

    /// Tight bounding box of the pixels equal to `value`, if any.
    pub fn bbox_of(&self, value: bool) -> Option<BBox> {
        let v = value as u8;
        let mut bbox: Option<BBox> = None;
        for ((y, x), &p) in self.data.indexed_iter() {
            if p != v {
                continue;
            }
            bbox = Some(match bbox {
                None => BBox::new(x, y, x + 1, y + 1),
                Some(b) => BBox::new(b.x0.min(x), b.y0.min(y), b.x1.max(x + 1), b.y1.max(y + 1)),
            });
        }
        bbox
    }

    /// Insertion region of an insertion mask (the zero pixels).
    pub fn zero_region(&self) -> Option<BBox> {
        self.bbox_of(false)
    }

    pub fn as_f64(&self) -> Array2<f64> {
        self.data.mapv(f64::from)
    }

    pub fn same_size(&self, height: usize, width: usize) -> bool {
        self.height() == height && self.width() == width
    }
}

/// Axis-aligned box `[x0, x1) × [y0, y1)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_empty(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Center in continuous pixel coordinates.
    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) as f64 / 2.0, (self.y0 + self.y1) as f64 / 2.0)
    }
}

/// `C×h×w` latent-space tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    data: Array3<f64>,
}

impl LatentTensor {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::validation("latent tensor must be non-empty"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("latent tensor contains non-finite values"));
        }
        Ok(Self { data })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            data: Array3::zeros((channels, height, width)),
        }
    }

    pub fn from_plane(plane: Array2<f64>) -> Result<Self> {
        Self::new(plane.insert_axis(Axis(0)))
    }

    pub fn channels(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array3<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Channel-wise concatenation in the given order.
    pub fn concat(parts: &[&LatentTensor]) -> Result<LatentTensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::validation("nothing to concatenate"))?;
        let (h, w) = (first.height(), first.width());
        if let Some(p) = parts.iter().find(|p| p.height() != h || p.width() != w) {
            return Err(Error::validation(format!(
                "spatial mismatch in concat: {h}×{w} vs {}×{}",
                p.height(),
                p.width()
            )));
        }
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data =
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::validation(format!("concat failed: {e}")))?;
        Ok(LatentTensor { data })
    }

    /// Channels `[start, start + count)`.
    pub fn channel_slice(&self, start: usize, count: usize) -> LatentTensor {
        LatentTensor {
            data: self.data.slice(ndarray::s![start..start + count, .., ..]).to_owned(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormalizeMode {
    MinMax,
    Percentile { lo: f64, hi: f64 },
}

impl NormalizeMode {
    pub fn percentile() -> Self {
        NormalizeMode::Percentile {
            lo: PERCENTILE_LO,
            hi: PERCENTILE_HI,
        }
    }

    fn tag(self) -> Normalization {
        match self {
            NormalizeMode::MinMax => Normalization::MinMax,
            NormalizeMode::Percentile { .. } => Normalization::Percentile,
        }
    }
}

/// Linear-interpolated quantile of already sorted values.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Computes the `(low, high)` anchors a mode maps onto `-1` and `+1`.
pub(crate) fn normalization_bounds(values: &[f64], mode: NormalizeMode) -> (f64, f64) {
    match mode {
        NormalizeMode::MinMax => values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        }),
        NormalizeMode::Percentile { lo, hi } => {
            let mut sorted = values.to_vec();
            sorted.sort_by(f64::total_cmp);
            (quantile_sorted(&sorted, lo), quantile_sorted(&sorted, hi))
        }
    }
}

/// Affine map of `[lo, hi]` onto `[-1, 1]`, clamped. A degenerate range maps to 0.
pub(crate) fn affine_to_signed(v: f64, lo: f64, hi: f64) -> f64 {
    if hi <= lo {
        0.0
    } else {
        (2.0 * (v - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0)
    }
}

pub fn normalize_depth(d: &DepthMap, mode: NormalizeMode) -> Result<DepthMap> {
    if let NormalizeMode::Percentile { lo, hi } = mode {
        if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo >= hi {
            return Err(Error::validation(format!("invalid percentile bounds ({lo}, {hi})")));
        }
    }
    if d.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::validation("depth map contains non-finite values"));
    }
    let values: Vec<f64> = d.data.iter().copied().collect();
    let (lo, hi) = normalization_bounds(&values, mode);
    DepthMap::new(d.data.mapv(|v| affine_to_signed(v, lo, hi)), mode.tag())
}

/// Copies a normalized depth map into all three channels of a signed image.
pub fn replicate_channels(d: &DepthMap) -> Result<ImageRGB> {
    if !d.is_normalized() {
        return Err(Error::validation("replicate_channels needs a normalized depth map"));
    }
    let (h, w) = d.data.dim();
    let data = Array3::from_shape_fn((h, w, 3), |(y, x, _)| d.data[[y, x]]);
    ImageRGB::new(data, ValueRange::Signed)
}

/// Per-pixel channel mean. Equal channels return their common value exactly.
pub fn average_channels(x: &ImageRGB) -> DepthMap {
    let data = Array2::from_shape_fn((x.height(), x.width()), |(y, xx)| {
        let [a, b, c] = x.pixel(y, xx);
        a + ((b - a) + (c - a)) / 3.0
    });
    DepthMap {
        data,
        normalization: Normalization::Raw,
    }
}

pub trait ApplyMask: Sized {
    /// Elementwise product with the mask, broadcast over channels.
    fn apply_mask(&self, m: &BinaryMask) -> Result<Self>;
}

impl ApplyMask for ImageRGB {
    fn apply_mask(&self, m: &BinaryMask) -> Result<Self> {
        check_mask_shape(m, self.height(), self.width())?;
        let mut data = self.data.clone();
        for ((y, x, _), v) in data.indexed_iter_mut() {
            *v *= f64::from(m.data[[y, x]]);
        }
        Ok(ImageRGB {
            data,
            range: self.range,
        })
    }
}

impl ApplyMask for DepthMap {
    fn apply_mask(&self, m: &BinaryMask) -> Result<Self> {
        check_mask_shape(m, self.height(), self.width())?;
        let mut data = self.data.clone();
        data.zip_mut_with(&m.data, |v, &k| *v *= f64::from(k));
        Ok(DepthMap {
            data,
            normalization: self.normalization,
        })
    }
}

pub fn apply_mask<T: ApplyMask>(x: &T, m: &BinaryMask) -> Result<T> {
    x.apply_mask(m)
}

fn check_mask_shape(m: &BinaryMask, h: usize, w: usize) -> Result<()> {
    if !m.same_size(h, w) {
        return Err(Error::validation(format!(
            "mask {}×{} does not match {h}×{w}",
            m.height(),
            m.width()
        )));
    }
    Ok(())
}

/// Single-channel maps that can be brought to latent resolution.
pub trait LatentResize {
    fn resize_to_latent(&self, factor: usize) -> Result<LatentTensor>;
}

impl LatentResize for DepthMap {
    fn resize_to_latent(&self, factor: usize) -> Result<LatentTensor> {
        check_factor(factor)?;
        let (padded, _) = pad_reflect_to_multiple(&self.data, factor);
        let (h, w) = padded.dim();
        LatentTensor::from_plane(resize_bilinear(&padded, h / factor, w / factor))
    }
}

impl LatentResize for BinaryMask {
    fn resize_to_latent(&self, factor: usize) -> Result<LatentTensor> {
        check_factor(factor)?;
        let (padded, _) = pad_reflect_to_multiple(&self.as_f64(), factor);
        let (h, w) = padded.dim();
        let (oh, ow) = (h / factor, w / factor);
        // nearest: the source pixel containing the output pixel center
        let plane = Array2::from_shape_fn((oh, ow), |(y, x)| {
            padded[[y * factor + factor / 2, x * factor + factor / 2]]
        });
        LatentTensor::from_plane(plane)
    }
}

pub fn resize_to_latent<T: LatentResize>(x: &T, factor: usize) -> Result<LatentTensor> {
    x.resize_to_latent(factor)
}

fn check_factor(factor: usize) -> Result<()> {
    if factor == 0 {
        return Err(Error::validation("spatial factor must be positive"));
    }
    Ok(())
}

/// Dilates a person silhouette by a disc of `radius` pixels and returns the
/// insertion mask whose zero-region is the tight bbox of the dilated region.
pub fn mask_from_silhouette(silhouette: &BinaryMask, radius: usize) -> Result<BinaryMask> {
    let bbox = silhouette
        .bbox_of(true)
        .ok_or_else(|| Error::validation("empty silhouette: no person pixels"))?;
    // The disc's extreme points lie on the axes, so the dilated bbox is the
    // silhouette bbox grown by `radius` on every side.
    let grown = BBox::new(
        bbox.x0.saturating_sub(radius),
        bbox.y0.saturating_sub(radius),
        (bbox.x1 + radius).min(silhouette.width()),
        (bbox.y1 + radius).min(silhouette.height()),
    );
    Ok(BinaryMask::from_fn(silhouette.height(), silhouette.width(), |y, x| {
        !grown.contains(x, y)
    }))
}
