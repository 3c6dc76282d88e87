//! Plain row-major image buffers.

use crate::error::ShapeError;

/// Three-channel float image, row-major, values nominally in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        Self {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<[f64; 3]>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel buffer does not match {width}x{height}");
        Self {
            width,
            height,
            pixels,
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.pixels[self.index(x, y)]
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_shape(&self, other: &Image) -> Result<(), ShapeError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(ShapeError {
                expected: (self.width, self.height),
                found: (other.width, other.height),
            })
        }
    }

    /// Elementwise `self - other`.
    pub fn sub(&self, other: &Image) -> Image {
        assert!(self.same_shape(other));
        let pixels = self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| [a[0] - b[0], a[1] - b[1], a[2] - b[2]])
            .collect();
        Image::from_pixels(self.width, self.height, pixels)
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        self.pixels
            .iter()
            .zip(&other.pixels)
            .flat_map(|(a, b)| (0..3).map(move |c| (a[c] - b[c]).abs()))
            .fold(0.0, f64::max)
    }

    /// Rounds every channel to the nearest of 256 levels, as an 8-bit file would.
    pub fn quantized(&self) -> Image {
        let pixels = self
            .pixels
            .iter()
            .map(|p| p.map(|v| quantize_u8(v) as f64 / 255.0))
            .collect();
        Image::from_pixels(self.width, self.height, pixels)
    }

    /// Channel-wise mean of the given pixels.
    pub fn mean_over<I: IntoIterator<Item = usize>>(&self, idx: I) -> Option<[f64; 3]> {
        let mut acc = [0.0; 3];
        let mut n = 0usize;
        for i in idx {
            let p = self.pixels[i];
            for c in 0..3 {
                acc[c] += p[c];
            }
            n += 1;
        }
        (n > 0).then(|| acc.map(|v| v / n as f64))
    }
}

#[inline]
pub fn quantize_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
