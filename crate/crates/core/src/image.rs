//! RGB raster with samples in `[0, 1]`, and the binary PPM (P6) codec used as
//! the interchange format for dataset directories.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, VprError};

pub const MIN_SIDE: usize = 16;

/// Interleaved RGB image, row-major, samples in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(VprError::ShapeError {
                expected: width * height * 3,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> [f32; 3],
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample at continuous pixel-center coordinates, clamping at the border.
    pub fn sample_bilinear(&self, x: f64, y: f64) -> [f32; 3] {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        let p00 = self.pixel(x0, y0);
        let p10 = self.pixel(x1, y0);
        let p01 = self.pixel(x0, y1);
        let p11 = self.pixel(x1, y1);
        let mut out = [0.0f32; 3];
        for c in 0..3 {
            let top = p00[c] as f64 * (1.0 - tx) + p10[c] as f64 * tx;
            let bottom = p01[c] as f64 * (1.0 - tx) + p11[c] as f64 * tx;
            out[c] = (top * (1.0 - ty) + bottom * ty) as f32;
        }
        out
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Checks the size and pixel-range invariants of dataset images.
    pub fn validate(&self, id: &str) -> Result<()> {
        if self.width < MIN_SIDE || self.height < MIN_SIDE {
            return Err(VprError::InvalidImage {
                id: id.to_string(),
                reason: format!(
                    "{}x{} is smaller than the {MIN_SIDE}x{MIN_SIDE} minimum",
                    self.width, self.height
                ),
            });
        }
        if let Some(v) = self.data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(VprError::InvalidImage {
                id: id.to_string(),
                reason: format!("pixel value {v} outside [0, 1]"),
            });
        }
        Ok(())
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

/// Encodes a binary PPM with maxval 255.
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", image.width, image.height);
    let mut out = Vec::with_capacity(header.len() + image.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend(image.to_bytes());
    out
}

/// Decodes a binary PPM (P6). Maxval up to 65535 is accepted; samples are
/// rescaled to `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<RgbImage, String> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos).ok_or("empty file")?;
    if magic != b"P6" {
        return Err(format!(
            "expected P6 magic, found {:?}",
            String::from_utf8_lossy(magic)
        ));
    }
    let mut fields = [0usize; 3];
    for (slot, name) in fields.iter_mut().zip(["width", "height", "maxval"]) {
        let tok = next_token(bytes, &mut pos).ok_or_else(|| format!("missing {name}"))?;
        *slot = std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("bad {name} field"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format!("maxval {maxval} out of range"));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err("missing raster separator".into());
    }
    pos += 1;

    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * 3 * sample_bytes;
    let raster = &bytes[pos..];
    if raster.len() < needed {
        return Err(format!(
            "raster truncated: expected {needed} bytes, found {}",
            raster.len()
        ));
    }
    let scale = maxval as f32;
    let data = if sample_bytes == 1 {
        raster[..needed]
            .iter()
            .map(|&b| (b as f32 / scale).min(1.0))
            .collect()
    } else {
        raster[..needed]
            .chunks_exact(2)
            .map(|c| (u16::from_be_bytes([c[0], c[1]]) as f32 / scale).min(1.0))
            .collect()
    };
    Ok(RgbImage {
        width,
        height,
        data,
    })
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() && bytes[*pos] != b'#' {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let bytes = std::fs::read(path).map_err(|e| VprError::DecodeError {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode_ppm(&bytes).map_err(|reason| VprError::DecodeError {
        path: path.to_path_buf(),
        reason,
    })
}

pub fn write_ppm(path: &Path, image: &RgbImage) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&encode_ppm(image))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P6\n# made by hand\n2 1 # trailing\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 0), [1.0, 0.0, 0.0]);
        assert_eq!(img.pixel(1, 0), [0.0, 1.0, 0.0]);
    }

    #[test]
    fn sixteen_bit_samples() {
        let mut bytes = b"P6 1 1 65535\n".to_vec();
        bytes.extend_from_slice(&[0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0)[0], 1.0);
        assert_eq!(img.pixel(0, 0)[1], 0.0);
        assert!((img.pixel(0, 0)[2] - 0.5).abs() < 1e-4);
    }

    #[test]
    fn rejects_wrong_magic_and_short_raster() {
        assert!(decode_ppm(b"P3 1 1 255\n0 0 0").is_err());
        let err = decode_ppm(b"P6 2 2 255\n\x00\x00").unwrap_err();
        assert!(err.contains("truncated"), "{err}");
    }

    #[test]
    fn encode_then_decode_preserves_quantized_pixels() {
        let img = RgbImage::from_fn(17, 19, |x, y| {
            [x as f32 / 16.0, y as f32 / 18.0, ((x * y) % 7) as f32 / 6.0]
        });
        let decoded = decode_ppm(&encode_ppm(&img)).unwrap();
        let again = decode_ppm(&encode_ppm(&decoded)).unwrap();
        assert_eq!(decoded, again);
        for (a, b) in img.data().iter().zip(decoded.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn validate_checks_size_and_range() {
        assert!(RgbImage::filled(15, 32, [0.5; 3]).validate("a").is_err());
        assert!(RgbImage::filled(16, 16, [0.5; 3]).validate("a").is_ok());
        let mut img = RgbImage::filled(16, 16, [0.5; 3]);
        img.data_mut()[4] = 1.5;
        assert!(img.validate("a").is_err());
    }
}
