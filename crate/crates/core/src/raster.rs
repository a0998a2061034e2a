//! Row-major per-pixel maps shared by the stereo, geometry and feature stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn new(width: usize, height: usize, fill: T) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(
                "grid.data",
                format!("length {} != {}x{}", data.len(), width, height),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                data.push(f(u, v));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, u: usize, v: usize) -> &T {
        &self.data[v * self.width + u]
    }

    #[inline]
    pub fn get_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.data[v * self.width + u]
    }

    #[inline]
    pub fn set(&mut self, u: usize, v: usize, value: T) {
        self.data[v * self.width + u] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, T> {
        self.data.chunks_exact(self.width.max(1))
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn ensure_dims(&self, dims: (usize, usize)) -> Result<()> {
        if self.dims() != dims {
            return Err(Error::DimensionMismatch {
                expected: dims,
                actual: self.dims(),
            });
        }
        Ok(())
    }
}

pub type Mask = Grid<bool>;

impl Mask {
    pub fn count(&self) -> usize {
        self.as_slice().iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Result<Mask> {
        other.ensure_dims(self.dims())?;
        Ok(Grid {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }
}

/// Luma of an 8-bit RGB pixel (BT.601 weights).
#[inline]
pub fn luma(p: &image::Rgb<u8>) -> f32 {
    0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32
}

pub fn gray(img: &image::RgbImage) -> Grid<f32> {
    let (w, h) = img.dimensions();
    Grid {
        width: w as usize,
        height: h as usize,
        data: img.pixels().map(luma).collect(),
    }
}

/// Encodes a boolean mask as an 8-bit PNG-ready image (255 = set).
pub fn mask_to_luma(mask: &Mask) -> image::GrayImage {
    image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |u, v| {
        image::Luma([if *mask.get(u as usize, v as usize) { 255 } else { 0 }])
    })
}

pub fn luma_to_mask(img: &image::GrayImage) -> Mask {
    Grid::from_fn(img.width() as usize, img.height() as usize, |u, v| {
        img.get_pixel(u as u32, v as u32)[0] >= 128
    })
}

/// Writes a mask as a 1-bit grayscale PNG.
pub fn write_mask_png(path: &std::path::Path, mask: &Mask) -> Result<()> {
    let (w, h) = mask.dims();
    let stride = w.div_ceil(8);
    let mut packed = vec![0u8; stride * h];
    for (v, row) in mask.rows().enumerate() {
        for (u, &set) in row.iter().enumerate() {
            if set {
                packed[v * stride + u / 8] |= 0x80 >> (u % 8);
            }
        }
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let to_err = |e: png::EncodingError| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(to_err)?;
    writer.write_image_data(&packed).map_err(to_err)?;
    writer.finish().map_err(to_err)
}

pub fn read_gray_png(path: &std::path::Path) -> Result<image::GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

/// Reads a mask written by [`write_mask_png`] (or any gray image, set at
/// levels >= 128).
pub fn read_mask_png(path: &std::path::Path) -> Result<Mask> {
    Ok(luma_to_mask(&read_gray_png(path)?))
}
