//! Colour spaces, flow encodings, and image/flow file I/O.

mod flow;
mod lab;

use std::io::{self, Cursor};
use std::path::Path;

use thiserror::Error;

pub use flow::{encode_vector, flow_to_rgb, saturation_and_hue, wheel_hue, FlowColorImage, FlowField, FLO_TAG};
pub use lab::{lab_to_srgb, linear_to_srgb, srgb8_to_lab, srgb_to_lab, srgb_to_linear, Lab, LabImage};

#[derive(Debug, Error)]
pub enum ImagingError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid extents {width}x{height}")]
    Extents { width: i64, height: i64 },
    #[error("malformed png: {0}")]
    Png(String),
    #[error("unsupported png: {0}")]
    Unsupported(String),
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self, ImagingError> {
        if width == 0 || height == 0 {
            return Err(ImagingError::Extents {
                width: width as i64,
                height: height as i64,
            });
        }
        if data.len() != width * height * 3 {
            return Err(ImagingError::Truncated {
                expected: width * height * 3,
                found: data.len(),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self {
            width,
            height,
            data: rgb.repeat(width * height),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> [u8; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    pub fn read_png(path: &Path) -> Result<Self, ImagingError> {
        Self::from_png_bytes(&std::fs::read(path)?)
    }

    /// Decodes 8-bit PNGs; grayscale and palette images are promoted to RGB
    /// and alpha is dropped.
    pub fn from_png_bytes(bytes: &[u8]) -> Result<Self, ImagingError> {
        let (w, h, channels, buf) = decode_png(bytes)?;
        let data = match channels {
            1 => buf.iter().flat_map(|&g| [g, g, g]).collect(),
            2 => buf.chunks_exact(2).flat_map(|c| [c[0], c[0], c[0]]).collect(),
            3 => buf,
            4 => buf.chunks_exact(4).flat_map(|c| [c[0], c[1], c[2]]).collect(),
            n => return Err(ImagingError::Unsupported(format!("{n} channels"))),
        };
        Self::new(w, h, data)
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImagingError> {
        std::fs::write(path, self.to_png_bytes()?)?;
        Ok(())
    }

    pub fn to_png_bytes(&self) -> Result<Vec<u8>, ImagingError> {
        encode_png(self.width, self.height, png::ColorType::Rgb, &self.data)
    }
}

/// 8-bit single-channel image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn read_png(path: &Path) -> Result<Self, ImagingError> {
        let (w, h, channels, buf) = decode_png(&std::fs::read(path)?)?;
        let data = match channels {
            1 => buf,
            2 => buf.chunks_exact(2).map(|c| c[0]).collect(),
            n => return Err(ImagingError::Unsupported(format!("expected grayscale, got {n} channels"))),
        };
        Ok(Self { width: w, height: h, data })
    }

    pub fn write_png(&self, path: &Path) -> Result<(), ImagingError> {
        std::fs::write(path, encode_png(self.width, self.height, png::ColorType::Grayscale, &self.data)?)?;
        Ok(())
    }
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>), ImagingError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| ImagingError::Png(e.to_string()))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(ImagingError::Unsupported(format!("bit depth {depth:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImagingError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| ImagingError::Png(e.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(ImagingError::Unsupported("unexpanded palette".into())),
    };
    Ok((info.width as usize, info.height as usize, channels, buf))
}

// Fixed encoder settings keep output byte-identical across runs.
fn encode_png(width: usize, height: usize, color: png::ColorType, data: &[u8]) -> Result<Vec<u8>, ImagingError> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        enc.set_compression(png::Compression::Balanced);
        enc.set_filter(png::Filter::Adaptive);
        let mut w = enc.write_header().map_err(|e| ImagingError::Png(e.to_string()))?;
        w.write_image_data(data).map_err(|e| ImagingError::Png(e.to_string()))?;
        w.finish().map_err(|e| ImagingError::Png(e.to_string()))?;
    }
    Ok(out)
}
