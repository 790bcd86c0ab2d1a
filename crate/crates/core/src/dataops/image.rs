use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use fpdeblur_tensor::Tensor;

use crate::{Error, Result};

/// Grayscale raster with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub const MIN_SIDE: usize = 8;

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width < MIN_SIDE || height < MIN_SIDE {
            return Err(Error::Data(format!(
                "image {width}x{height} is smaller than {MIN_SIDE}x{MIN_SIDE}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Data(format!(
                "{} values for a {width}x{height} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::Data(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image from `f(x, y)`, clamping into `[0, 1]`.
    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(clamp_unit(f(x, y)));
            }
        }
        Self::new(width, height, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// `[1, 1, H, W]` tensor view of the image.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone())
            .expect("image dims match data")
    }

    /// Image from sample `index` of a single-channel NCHW tensor, clamped into `[0, 1]`.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 1 || index >= n {
            return Err(Error::Data(format!(
                "cannot take image {index} from tensor {:?}",
                t.shape()
            )));
        }
        let plane = &t.data()[index * h * w..(index + 1) * h * w];
        Self::new(w, h, plane.iter().map(|&v| clamp_unit(v)).collect())
    }

    /// Linear `[0,1] → [0,255]` quantization with rounding.
    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v * 255.0).round() as u8).collect()
    }

    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    /// Round-trips the image through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        Self::from_u8(self.width, self.height, &self.to_u8()).expect("same dims")
    }

    /// Writes an 8-bit single-channel PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::format(path, e))?;
        writer
            .write_image_data(&self.to_u8())
            .map_err(|e| Error::format(path, e))?;
        writer.finish().map_err(|e| Error::format(path, e))
    }

    /// Reads a PNG, converting color images to luma and 16-bit samples to 8-bit.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::format(path, e))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::format(path, "image too large"))?;
        let mut buf = vec![0; size];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let channels = info.color_type.samples();
        let bytes = &buf[..info.buffer_size()];
        let luma: Vec<u8> = match info.color_type {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => {
                bytes.chunks(channels).map(|p| p[0]).collect()
            }
            png::ColorType::Rgb | png::ColorType::Rgba => bytes
                .chunks(channels)
                .map(|p| {
                    (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64).round() as u8
                })
                .collect(),
            png::ColorType::Indexed => {
                return Err(Error::format(path, "indexed PNG was not expanded"))
            }
        };
        Self::from_u8(w, h, &luma).map_err(|e| Error::format(path, e))
    }
}

pub(crate) fn clamp_unit(v: f64) -> f64 {
    if v.is_nan() {
        0.0
    } else {
        v.clamp(0.0, 1.0)
    }
}
