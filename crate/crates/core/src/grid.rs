//! Binary masks and RGB raster images shared by the corpus, the models,
//! and the metrics.

use ndarray::Array3;

/// Binary H×W grid stored row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub w: usize,
    pub h: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![false; w * h],
        }
    }

    pub fn from_fn(w: usize, h: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(w, h);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(x, y);
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn fg_count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.fg_count() == 0
    }

    pub fn is_full(&self) -> bool {
        self.fg_count() == self.w * self.h
    }

    pub fn fg_pixels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Tight bounding box as (x0, y0, x1, y1), exclusive upper bounds.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut any = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        any.then_some((x0, y0, x1, y1))
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data
            .iter()
            .zip(other.data.iter())
            .any(|(&a, &b)| a && b)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!((self.w, self.h), (other.w, other.h));
        let mut m = self.clone();
        for (a, &b) in m.data.iter_mut().zip(other.data.iter()) {
            *a |= b;
        }
        m
    }

    /// Morphological dilation by `r` pixels (Chebyshev distance).
    pub fn dilate(&self, r: usize) -> Mask {
        let mut out = Mask::new(self.w, self.h);
        for y in 0..self.h {
            for x in 0..self.w {
                if !self.get(x, y) {
                    continue;
                }
                let y0 = y.saturating_sub(r);
                let x0 = x.saturating_sub(r);
                for yy in y0..=(y + r).min(self.h - 1) {
                    for xx in x0..=(x + r).min(self.w - 1) {
                        out.set(xx, yy, true);
                    }
                }
            }
        }
        out
    }

    pub fn complement(&self) -> Mask {
        let mut m = self.clone();
        for b in m.data.iter_mut() {
            *b = !*b;
        }
        m
    }

    /// Downsample by integer factor; an output pixel is set when any of the
    /// covered input pixels is set.
    pub fn downsample_any(&self, factor: usize) -> Mask {
        let (w, h) = (self.w / factor, self.h / factor);
        Mask::from_fn(w, h, |x, y| {
            for dy in 0..factor {
                for dx in 0..factor {
                    if self.get(x * factor + dx, y * factor + dy) {
                        return true;
                    }
                }
            }
            false
        })
    }

    /// Fraction of covered input pixels per output cell, as real grid.
    pub fn downsample_mean(&self, factor: usize) -> ndarray::Array2<f32> {
        let (w, h) = (self.w / factor, self.h / factor);
        let mut out = ndarray::Array2::<f32>::zeros((h, w));
        let inv = 1.0 / (factor * factor) as f32;
        for y in 0..h {
            for x in 0..w {
                let mut cnt = 0usize;
                for dy in 0..factor {
                    for dx in 0..factor {
                        if self.get(x * factor + dx, y * factor + dy) {
                            cnt += 1;
                        }
                    }
                }
                out[(y, x)] = cnt as f32 * inv;
            }
        }
        out
    }
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageU8 {
    pub w: usize,
    pub h: usize,
    pub rgb: Vec<u8>,
}

impl ImageU8 {
    pub fn filled(w: usize, h: usize, color: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(w * h * 3);
        for _ in 0..w * h {
            rgb.extend_from_slice(&color);
        }
        Self { w, h, rgb }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.w + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        let i = (y * self.w + x) * 3;
        self.rgb[i] = c[0];
        self.rgb[i + 1] = c[1];
        self.rgb[i + 2] = c[2];
    }

    /// Channels-first float image in [0, 1].
    pub fn to_chw_f32(&self) -> Array3<f32> {
        let mut out = Array3::<f32>::zeros((3, self.h, self.w));
        for y in 0..self.h {
            for x in 0..self.w {
                let c = self.get(x, y);
                for ch in 0..3 {
                    out[(ch, y, x)] = c[ch] as f32 / 255.0;
                }
            }
        }
        out
    }
}

/// Area-average downsample of a channels-first float image.
pub fn downsample_area(x: &Array3<f32>, factor: usize) -> Array3<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h / factor, w / factor);
    let inv = 1.0 / (factor * factor) as f32;
    let mut out = Array3::<f32>::zeros((c, ho, wo));
    for ci in 0..c {
        for y in 0..ho {
            for xcol in 0..wo {
                let mut acc = 0.0f32;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += x[(ci, y * factor + dy, xcol * factor + dx)];
                    }
                }
                out[(ci, y, xcol)] = acc * inv;
            }
        }
    }
    out
}

/// Quantize a float CHW image in [0,1] back to 8-bit RGB.
pub fn chw_f32_to_image(x: &Array3<f32>) -> ImageU8 {
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut img = ImageU8::filled(w, h, [0, 0, 0]);
    for y in 0..h {
        for xcol in 0..w {
            let mut c = [0u8; 3];
            for ch in 0..3 {
                c[ch] = (x[(ch, y, xcol)].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            img.set(xcol, y, c);
        }
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bbox_of_plus_shape() {
        let mut m = Mask::new(5, 5);
        m.set(2, 1, true);
        m.set(1, 2, true);
        m.set(3, 2, true);
        m.set(2, 3, true);
        assert_eq!(m.bbox(), Some((1, 1, 4, 4)));
    }

    #[test]
    fn dilate_grows_by_one() {
        let mut m = Mask::new(5, 5);
        m.set(2, 2, true);
        let d = m.dilate(1);
        assert_eq!(d.fg_count(), 9);
        assert!(d.get(1, 1) && d.get(3, 3));
    }

    #[test]
    fn downsample_any_vs_mean() {
        let mut m = Mask::new(4, 4);
        m.set(0, 0, true);
        let d = m.downsample_any(2);
        assert!(d.get(0, 0));
        assert!(!d.get(1, 1));
        let mean = m.downsample_mean(2);
        assert!((mean[(0, 0)] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn image_f32_roundtrip() {
        let mut img = ImageU8::filled(3, 2, [10, 20, 30]);
        img.set(1, 1, [200, 100, 50]);
        let f = img.to_chw_f32();
        let back = chw_f32_to_image(&f);
        assert_eq!(img, back);
    }
}
