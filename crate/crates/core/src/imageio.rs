//! Float images, 8-bit PNG codecs and the raw float buffer format.
//!
//! Raw buffers are little-endian: the 8-byte magic `RCLB-BUF`, then `u32`
//! version, width, height and channel count, then `f32` values laid out as
//! `[row][column][channel]`.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("png decode: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("unsupported image format: {0}")]
    Format(String),
    #[error("image size mismatch: {0}x{1} vs {2}x{3}")]
    Size(u32, u32, u32, u32),
    #[error("not a raw buffer file (bad magic)")]
    BadMagic,
    #[error("raw buffer version {0} unsupported")]
    Version(u32),
    #[error("raw buffer truncated")]
    Truncated,
}

/// Row-major RGB image with values nominally in `[0,1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl RgbImage {
    pub fn new(width: u32, height: u32, fill: [f32; 3]) -> Self {
        let data = (0..width * height).flat_map(|_| fill).collect();
        Self { width, height, data }
    }

    pub fn from_data(width: u32, height: u32, data: Vec<f32>) -> Result<Self, ImageError> {
        if data.len() != (width * height * 3) as usize {
            return Err(ImageError::Format(format!(
                "{} values for a {width}x{height} rgb image",
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn pixels(&self) -> usize {
        (self.width * self.height) as usize
    }

    pub fn get(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: u32, y: u32, c: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| quantize(v)).collect()
    }

    pub fn from_rgb8(width: u32, height: u32, bytes: &[u8]) -> Result<Self, ImageError> {
        Self::from_data(width, height, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    /// Same image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.to_rgb8(), None)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (w, h, ct, data, _) = decode_png(bytes)?;
        let rgb: Vec<u8> = match ct {
            png::ColorType::Rgb => data,
            png::ColorType::Rgba => data.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => data.iter().flat_map(|&v| [v, v, v]).collect(),
            other => return Err(ImageError::Format(format!("{other:?}"))),
        };
        Self::from_rgb8(w, h, &rgb)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        std::fs::write(path, self.encode_png()?)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        Self::decode_png(&std::fs::read(path)?)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Single-channel image in `[0,1]`, used for masks.
#[derive(Clone, Debug, PartialEq)]
pub struct GrayImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl GrayImage {
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        encode_png(self.width, self.height, png::ColorType::Grayscale, &bytes, None)
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (width, height, ct, data, _) = decode_png(bytes)?;
        if ct != png::ColorType::Grayscale {
            return Err(ImageError::Format(format!("mask must be grayscale, got {ct:?}")));
        }
        Ok(Self {
            width,
            height,
            data: data.iter().map(|&b| b as f32 / 255.0).collect(),
        })
    }
}

/// Per-pixel class indices stored as an indexed-colour PNG.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: u32,
    pub height: u32,
    pub labels: Vec<u8>,
}

/// Fixed display palette; index 0 (background) is black.
pub fn palette_color(class: u8) -> [u8; 3] {
    if class == 0 {
        return [0, 0, 0];
    }
    let h = (class as f32 * 0.618_034).fract();
    let [r, g, b] = crate::imageio::hsv_to_rgb([h, 0.75, 0.95]);
    [quantize(r), quantize(g), quantize(b)]
}

impl LabelMap {
    pub fn encode_png(&self) -> Result<Vec<u8>, ImageError> {
        let palette: Vec<u8> = (0..=255u8).flat_map(palette_color).collect();
        encode_png(self.width, self.height, png::ColorType::Indexed, &self.labels, Some(palette))
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, ImageError> {
        let (width, height, ct, labels, _) = decode_png(bytes)?;
        if ct != png::ColorType::Indexed && ct != png::ColorType::Grayscale {
            return Err(ImageError::Format(format!("label map must be indexed, got {ct:?}")));
        }
        Ok(Self { width, height, labels })
    }
}

fn encode_png(
    width: u32,
    height: u32,
    color: png::ColorType,
    data: &[u8],
    palette: Option<Vec<u8>>,
) -> Result<Vec<u8>, ImageError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        if let Some(p) = palette {
            enc.set_palette(p);
        }
        let mut writer = enc.write_header()?;
        writer.write_image_data(data)?;
    }
    Ok(out)
}

type Decoded = (u32, u32, png::ColorType, Vec<u8>, Option<Vec<u8>>);

fn decode_png(bytes: &[u8]) -> Result<Decoded, ImageError> {
    let mut dec = png::Decoder::new(std::io::Cursor::new(bytes));
    // Keep palette indices as stored.
    dec.set_transformations(png::Transformations::IDENTITY);
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(ImageError::Format(format!("bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    let palette = reader.info().palette.as_ref().map(|p| p.to_vec());
    Ok((info.width, info.height, info.color_type, buf, palette))
}

pub fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

pub fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

pub const RAW_MAGIC: &[u8; 8] = b"RCLB-BUF";
pub const RAW_VERSION: u32 = 1;

/// Interleaved float channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RawBuffer {
    pub width: u32,
    pub height: u32,
    pub channels: u32,
    pub data: Vec<f32>,
}

impl RawBuffer {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(RAW_MAGIC);
        for v in [RAW_VERSION, self.width, self.height, self.channels] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, ImageError> {
        let mut magic = [0u8; 8];
        bytes.read_exact(&mut magic).map_err(|_| ImageError::Truncated)?;
        if &magic != RAW_MAGIC {
            return Err(ImageError::BadMagic);
        }
        let mut word = || -> Result<u32, ImageError> {
            let mut b = [0u8; 4];
            bytes.read_exact(&mut b).map_err(|_| ImageError::Truncated)?;
            Ok(u32::from_le_bytes(b))
        };
        let version = word()?;
        if version != RAW_VERSION {
            return Err(ImageError::Version(version));
        }
        let (width, height, channels) = (word()?, word()?, word()?);
        let n = width as usize * height as usize * channels as usize;
        if bytes.len() != n * 4 {
            return Err(ImageError::Truncated);
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn channel(&self, c: u32) -> Vec<f32> {
        self.data
            .iter()
            .skip(c as usize)
            .step_by(self.channels as usize)
            .copied()
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rgb_png_round_trip_is_lossless_on_8bit() {
        let bytes: Vec<u8> = (0..4 * 3 * 3).map(|i| (i * 7) as u8).collect();
        let img = RgbImage::from_rgb8(4, 3, &bytes).unwrap();
        let back = RgbImage::decode_png(&img.encode_png().unwrap()).unwrap();
        assert_eq!(back.to_rgb8(), bytes);
    }

    #[test]
    fn labels_round_trip() {
        let m = LabelMap {
            width: 3,
            height: 2,
            labels: vec![0, 1, 2, 6, 5, 0],
        };
        assert_eq!(LabelMap::decode_png(&m.encode_png().unwrap()).unwrap(), m);
    }

    #[test]
    fn raw_buffer_round_trip_and_errors() {
        let b = RawBuffer {
            width: 2,
            height: 1,
            channels: 2,
            data: vec![0.25, -1.5, 3.0, f32::MIN_POSITIVE],
        };
        let bytes = b.to_bytes();
        assert_eq!(&bytes[..8], b"RCLB-BUF");
        assert_eq!(RawBuffer::from_bytes(&bytes).unwrap(), b);
        assert!(matches!(RawBuffer::from_bytes(&bytes[..bytes.len() - 1]), Err(ImageError::Truncated)));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(RawBuffer::from_bytes(&bad), Err(ImageError::BadMagic)));
    }

    #[test]
    fn hsv_round_trip() {
        for c in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(c));
            for k in 0..3 {
                assert!((back[k] - c[k]).abs() < 1e-6);
            }
        }
    }
}
