//! Row-major floating point images.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ColorImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f64>,
}

impl ColorImage {
    pub fn filled(width: u32, height: u32, value: [f64; 3]) -> Self {
        ColorImage {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [f64; 3] {
        self.data[(y * self.width + x) as usize]
    }

    pub fn same_size(&self, other: &ColorImage) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Box-filter reduction by an integer factor.
    pub fn downsample(&self, factor: u32) -> Result<ColorImage> {
        if factor == 0 || self.width % factor != 0 || self.height % factor != 0 {
            return Err(Error::invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.width, self.height
            )));
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = ColorImage::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for dy in 0..factor {
                    for dx in 0..factor {
                        let p = self.pixel(x * factor + dx, y * factor + dy);
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                }
                out.data[(y * w + x) as usize] = acc.map(|v| v * norm);
            }
        }
        Ok(out)
    }

    /// Nearest-neighbor enlargement by an integer factor.
    pub fn upsample_nearest(&self, factor: u32) -> ColorImage {
        let (w, h) = (self.width * factor, self.height * factor);
        let mut out = ColorImage::filled(w, h, [0.0; 3]);
        for y in 0..h {
            for x in 0..w {
                out.data[(y * w + x) as usize] = self.pixel(x / factor, y / factor);
            }
        }
        out
    }

    /// 8-bit quantization `round(255·clamp(v,0,1))`, interleaved RGB.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().flat_map(|p| p.map(quantize)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != (width * height * 3) as usize {
            return Err(Error::invalid("RGB buffer size does not match dimensions"));
        }
        Ok(ColorImage {
            width,
            height,
            data: bytes
                .chunks_exact(3)
                .map(|c| [c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0])
                .collect(),
        })
    }
}

impl ScalarImage {
    pub fn filled(width: u32, height: u32, value: f64) -> Self {
        ScalarImage {
            width,
            height,
            data: vec![value; (width * height) as usize],
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }

    /// Linear rescale of `[min, max]` onto 8 bits; constant images map to 0.
    pub fn to_gray8_normalized(&self) -> Vec<u8> {
        let (lo, hi) = self
            .data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        self.data
            .iter()
            .map(|&v| if span > 0.0 { quantize((v - lo) / span) } else { 0 })
            .collect()
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (255.0 * v.clamp(0.0, 1.0)).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_averages_blocks() {
        let mut img = ColorImage::filled(4, 2, [0.0; 3]);
        img.data[0] = [1.0, 0.0, 0.0];
        img.data[5] = [0.0, 1.0, 0.0];
        let d = img.downsample(2).unwrap();
        assert_eq!(d.width, 2);
        assert_eq!(d.pixel(0, 0), [0.25, 0.25, 0.0]);
        assert!(img.downsample(3).is_err());
    }

    #[test]
    fn quantize_rounds_and_clamps() {
        assert_eq!(quantize(-0.2), 0);
        assert_eq!(quantize(2.0), 255);
        assert_eq!(quantize(0.5), 128);
    }
}
