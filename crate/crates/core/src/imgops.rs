//! Pixel kernels: horizontal flip, rotation with bicubic resampling and
//! max-RGB (white patch) colour normalization.
//!
//! All kernels take an image by reference and return a new one.

use thiserror::Error;

/// Free parameter of the cubic convolution kernel.
pub const CUBIC_A: f64 = -0.5;

/// Angles within this many degrees of a multiple of 90 take the exact
/// index-remap path.
const RIGHT_ANGLE_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ImageError {
    #[error("image dimensions must be at least 1x1, got {width}x{height}")]
    EmptyImage { width: u32, height: u32 },
    #[error("buffer length {len} does not match {width}x{height}x3")]
    BadLength { width: u32, height: u32, len: usize },
}

/// 8-bit interleaved RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, data: Vec<u8>) -> Result<Self, ImageError> {
        if width == 0 || height == 0 {
            return Err(ImageError::EmptyImage { width, height });
        }
        if data.len() != width as usize * height as usize * 3 {
            return Err(ImageError::BadLength { width, height, len: data.len() });
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Result<Self, ImageError> {
        let n = width as usize * height as usize;
        Self::new(width, height, rgb.iter().copied().cycle().take(n * 3).collect())
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Result<Self, ImageError> {
        let mut data = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_raw(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = self.offset(x, y);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    fn offset(&self, x: u32, y: u32) -> usize {
        (y as usize * self.width as usize + x as usize) * 3
    }
}

impl From<image::RgbImage> for ImageBuffer {
    fn from(img: image::RgbImage) -> Self {
        let (width, height) = img.dimensions();
        ImageBuffer { width, height, data: img.into_raw() }
    }
}

impl From<ImageBuffer> for image::RgbImage {
    fn from(img: ImageBuffer) -> Self {
        image::RgbImage::from_raw(img.width, img.height, img.data).expect("length checked on construction")
    }
}

/// Mirrors the image left to right.
pub fn hflip(img: &ImageBuffer) -> ImageBuffer {
    let row_len = img.width as usize * 3;
    let mut data = Vec::with_capacity(img.data.len());
    for row in img.data.chunks_exact(row_len) {
        data.extend(row.chunks_exact(3).rev().flatten());
    }
    ImageBuffer { width: img.width, height: img.height, data }
}

/// Cubic convolution kernel (Keys) with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((CUBIC_A + 2.0) * x - (CUBIC_A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((CUBIC_A * x - 5.0 * CUBIC_A) * x + 8.0 * CUBIC_A) * x - 4.0 * CUBIC_A
    } else {
        0.0
    }
}

/// Weights of the taps at offsets -1, 0, 1, 2 for fractional position `t` in [0, 1).
pub fn cubic_weights(t: f64) -> [f64; 4] {
    [cubic_kernel(1.0 + t), cubic_kernel(t), cubic_kernel(1.0 - t), cubic_kernel(2.0 - t)]
}

fn round_to_u8(v: f64) -> u8 {
    // f64::round is half away from zero
    v.round().clamp(0.0, 255.0) as u8
}

/// Samples the image at a real-valued position, clamping taps to the edge.
fn sample_bicubic(img: &ImageBuffer, sx: f64, sy: f64) -> [u8; 3] {
    let (x0, y0) = (sx.floor(), sy.floor());
    let (wx, wy) = (cubic_weights(sx - x0), cubic_weights(sy - y0));
    let clamp = |v: f64, max: u32| -> u32 { v.clamp(0.0, f64::from(max - 1)) as u32 };
    let xs: [u32; 4] = std::array::from_fn(|i| clamp(x0 + i as f64 - 1.0, img.width));
    let ys: [u32; 4] = std::array::from_fn(|i| clamp(y0 + i as f64 - 1.0, img.height));

    let mut acc = [0.0f64; 3];
    for (j, &y) in ys.iter().enumerate() {
        let mut row = [0.0f64; 3];
        for (i, &x) in xs.iter().enumerate() {
            let p = img.pixel(x, y);
            for c in 0..3 {
                row[c] += wx[i] * f64::from(p[c]);
            }
        }
        for c in 0..3 {
            acc[c] += wy[j] * row[c];
        }
    }
    acc.map(round_to_u8)
}

/// Number of quarter turns if `theta` is (numerically) a multiple of 90°.
fn quarter_turns(theta: f64) -> Option<u32> {
    let q = theta.rem_euclid(360.0) / 90.0;
    let k = q.round();
    ((q - k).abs() * 90.0 < RIGHT_ANGLE_EPS).then_some(k as u32 % 4)
}

/// Exact remap for quarter turns. Returns `None` when the rotated grid is
/// offset by half a pixel (odd `width + height` for 90° and 270°).
fn rotate_quarter(img: &ImageBuffer, turns: u32) -> Option<ImageBuffer> {
    let (w, h) = (i64::from(img.width), i64::from(img.height));
    if turns % 2 == 1 && (w + h) % 2 != 0 {
        return None;
    }
    let out = ImageBuffer::from_fn(img.width, img.height, |x, y| {
        // Doubled coordinates relative to the centre keep everything integral.
        let (dx2, dy2) = (2 * i64::from(x) - (w - 1), 2 * i64::from(y) - (h - 1));
        let (sx2, sy2) = match turns {
            0 => (dx2, dy2),
            1 => (-dy2, dx2),
            2 => (-dx2, -dy2),
            _ => (dy2, -dx2),
        };
        let sx = (sx2 + (w - 1)) / 2;
        let sy = (sy2 + (h - 1)) / 2;
        img.pixel(sx.clamp(0, w - 1) as u32, sy.clamp(0, h - 1) as u32)
    });
    Some(out.expect("dimensions unchanged"))
}

/// Rotates by `theta` degrees about the exact image centre, keeping the
/// canvas size.
///
/// Output pixel `p` samples the input at `c + R(theta) (p - c)` with
/// `R = [[cos, -sin], [sin, cos]]` in x-right/y-down coordinates, so a
/// positive angle turns the picture counter-clockwise as displayed: after
/// 90° the right column becomes the top row. Quarter turns are exact index
/// remaps; other angles use bicubic sampling. Source positions outside the
/// image clamp to the nearest edge pixel.
pub fn rotate(img: &ImageBuffer, theta: f64) -> ImageBuffer {
    if let Some(turns) = quarter_turns(theta) {
        if turns == 0 {
            return img.clone();
        }
        if let Some(out) = rotate_quarter(img, turns) {
            return out;
        }
    }
    let (sin, cos) = theta.to_radians().sin_cos();
    let cx = f64::from(img.width - 1) / 2.0;
    let cy = f64::from(img.height - 1) / 2.0;
    ImageBuffer::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (f64::from(x) - cx, f64::from(y) - cy);
        sample_bicubic(img, cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    })
    .expect("dimensions unchanged")
}

/// Per-channel maxima.
pub fn channel_maxima(img: &ImageBuffer) -> [u8; 3] {
    img.pixels().fold([0u8; 3], |m, p| [m[0].max(p[0]), m[1].max(p[1]), m[2].max(p[2])])
}

/// White-patch colour constancy: scales each channel so its maximum maps
/// to 255. A channel whose maximum is 0 is left alone.
pub fn max_rgb_normalize(img: &ImageBuffer) -> ImageBuffer {
    let maxima = channel_maxima(img);
    let luts: [[u8; 256]; 3] = maxima.map(|m| {
        let m = u32::from(m);
        std::array::from_fn(|s| {
            let s = s as u32;
            if m == 0 {
                s as u8
            } else {
                // round(s * 255 / m), half up, computed exactly
                ((2 * s * 255 + m) / (2 * m)).min(255) as u8
            }
        })
    });
    let data = img
        .data
        .chunks_exact(3)
        .flat_map(|p| [luts[0][p[0] as usize], luts[1][p[1] as usize], luts[2][p[2] as usize]])
        .collect();
    ImageBuffer { width: img.width, height: img.height, data }
}
