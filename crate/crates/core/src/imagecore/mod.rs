//! Raster types, PNG I/O, block-mean downsampling and the slide manifest.

mod manifest;
mod png_io;

pub use manifest::{read_manifest, write_manifest, SlideManifestEntry, Split};
pub use png_io::{decode_png, encode_png, load_image, save_image, DEFAULT_DEFLATE_LEVEL};

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major, interleaved.
#[derive(Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl std::fmt::Debug for RasterImage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RasterImage")
            .field("width", &self.width)
            .field("height", &self.height)
            .finish()
    }
}

impl RasterImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "raster dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * 3 {
            return Err(Error::InvalidInput(format!(
                "raster {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Image with every pixel set to `rgb`.
    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self::new(width, height, data)
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [u8; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn pixels(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.data.chunks_exact(3).map(|p| [p[0], p[1], p[2]])
    }

    /// Copies the `w`x`h` region whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::InvalidInput(format!(
                "crop {w}x{h}@({x0},{y0}) exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for y in y0..y0 + h {
            let start = (y * self.width + x0) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Self::new(w, h, data)
    }

    /// Writes `src` into this image with its top-left corner at `(x0, y0)`, clipping at the edges.
    pub fn blit(&mut self, src: &RasterImage, x0: usize, y0: usize) {
        let w = src.width.min(self.width.saturating_sub(x0));
        let h = src.height.min(self.height.saturating_sub(y0));
        for y in 0..h {
            let d = ((y0 + y) * self.width + x0) * 3;
            let s = y * src.width * 3;
            self.data[d..d + w * 3].copy_from_slice(&src.data[s..s + w * 3]);
        }
    }
}

/// Block-mean downsampling with round-half-up.
///
/// Output is `floor(w / factor) x floor(h / factor)`; trailing rows and
/// columns that do not fill a whole block are dropped.
pub fn downsample(img: &RasterImage, factor: usize) -> Result<RasterImage> {
    if factor == 0 {
        return Err(Error::InvalidInput("downsample factor must be >= 1".into()));
    }
    if factor > img.width || factor > img.height {
        return Err(Error::InvalidInput(format!(
            "downsample factor {factor} exceeds image {}x{}",
            img.width, img.height
        )));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let ow = img.width / factor;
    let oh = img.height / factor;
    let n = (factor * factor) as u64;
    let mut data = Vec::with_capacity(ow * oh * 3);
    let mut acc = vec![0u64; ow * 3];
    for by in 0..oh {
        acc.iter_mut().for_each(|a| *a = 0);
        for y in by * factor..(by + 1) * factor {
            let row = &img.data[y * img.width * 3..(y * img.width + ow * factor) * 3];
            for (bx, block) in row.chunks_exact(factor * 3).enumerate() {
                for px in block.chunks_exact(3) {
                    acc[bx * 3] += px[0] as u64;
                    acc[bx * 3 + 1] += px[1] as u64;
                    acc[bx * 3 + 2] += px[2] as u64;
                }
            }
        }
        // (2*sum + n) / (2n) == floor(sum/n + 1/2)
        data.extend(acc.iter().map(|&s| ((2 * s + n) / (2 * n)) as u8));
    }
    RasterImage::new(ow, oh, data)
}
