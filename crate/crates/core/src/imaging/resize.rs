use ndarray::{Array2, Array3};

use super::{ImageRGB, ValueRange};
use crate::error::Result;

/// Right/bottom padding added to reach a multiple of the latent factor.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub bottom: usize,
    pub right: usize,
}

/// Mirror index without repeating the edge sample (`-1 → 1`, `n → n-2`).
pub fn reflect_index(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = i.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

pub fn pad_reflect_to_multiple(x: &Array2<f64>, factor: usize) -> (Array2<f64>, Padding) {
    let (h, w) = x.dim();
    let ph = h.div_ceil(factor) * factor;
    let pw = w.div_ceil(factor) * factor;
    let padding = Padding {
        bottom: ph - h,
        right: pw - w,
    };
    if padding == Padding::default() {
        return (x.clone(), padding);
    }
    let out = Array2::from_shape_fn((ph, pw), |(y, xx)| {
        x[[reflect_index(y as isize, h), reflect_index(xx as isize, w)]]
    });
    (out, padding)
}

/// Half-pixel-centered bilinear resampling with edge clamping, no antialiasing.
pub fn resize_bilinear(x: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = x.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    Array2::from_shape_fn((out_h, out_w), |(oy, ox)| {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
        let top = x[[y0, x0]] * (1.0 - tx) + x[[y0, x1]] * tx;
        let bottom = x[[y1, x0]] * (1.0 - tx) + x[[y1, x1]] * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

impl ImageRGB {
    pub fn resize(&self, out_h: usize, out_w: usize) -> Result<ImageRGB> {
        if out_h == self.height() && out_w == self.width() {
            return Ok(self.clone());
        }
        let mut data = Array3::zeros((out_h, out_w, 3));
        for c in 0..3 {
            let plane = self.data.index_axis(ndarray::Axis(2), c).to_owned();
            data.index_axis_mut(ndarray::Axis(2), c)
                .assign(&resize_bilinear(&plane, out_h, out_w));
        }
        ImageRGB::from_clamped(data, self.range)
    }

    /// Builds an image from per-pixel colors in the unit range.
    pub fn from_fn(
        height: usize,
        width: usize,
        range: ValueRange,
        mut f: impl FnMut(usize, usize) -> [f64; 3],
    ) -> Result<ImageRGB> {
        let mut data = Array3::zeros((height, width, 3));
        for y in 0..height {
            for x in 0..width {
                let p = f(y, x);
                for c in 0..3 {
                    data[[y, x, c]] = p[c];
                }
            }
        }
        ImageRGB::new(data, range)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_without_edge_repeat() {
        assert_eq!(reflect_index(-1, 5), 1);
        assert_eq!(reflect_index(-2, 5), 2);
        assert_eq!(reflect_index(5, 5), 3);
        assert_eq!(reflect_index(6, 5), 2);
        assert_eq!(reflect_index(3, 5), 3);
        assert_eq!(reflect_index(-7, 1), 0);
    }

    #[test]
    fn padding_to_multiple_reflects() {
        let x = Array2::from_shape_fn((3, 5), |(y, x)| (y * 10 + x) as f64);
        let (p, pad) = pad_reflect_to_multiple(&x, 4);
        assert_eq!(pad, Padding { bottom: 1, right: 3 });
        assert_eq!(p.dim(), (4, 8));
        assert_eq!(p[[3, 0]], x[[1, 0]]);
        assert_eq!(p[[0, 5]], x[[0, 3]]);
        assert_eq!(p[[0, 7]], x[[0, 1]]);
    }

    #[test]
    fn bilinear_halving_averages_blocks() {
        let x = Array2::from_shape_fn((4, 4), |(y, x)| (y * 4 + x) as f64);
        let r = resize_bilinear(&x, 2, 2);
        assert!((r[[0, 0]] - (0.0 + 1.0 + 4.0 + 5.0) / 4.0).abs() < 1e-12);
        assert!((r[[1, 1]] - (10.0 + 11.0 + 14.0 + 15.0) / 4.0).abs() < 1e-12);
    }
}
