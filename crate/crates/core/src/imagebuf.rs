//! Minimal grayscale float image buffer shared by morphometry, the synthetic
//! generator and the training-side augmentation.

use std::path::Path;

use image::{GrayImage, ImageReader, Luma};

use crate::error::{CoreError, Result};

/// Single-channel image with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize, fill: f32) -> Self {
        ImageBuf {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), width * height);
        ImageBuf {
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

    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f32) {
        self.data[y * self.width + x] = v;
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = ImageReader::open(path)
            .map_err(|e| CoreError::io(path, e))?
            .decode()
            .map_err(|e| CoreError::ImageDecode {
                path: path.to_path_buf(),
                message: e.to_string(),
            })?
            .into_luma8();
        Ok(Self::from_gray(&img))
    }

    pub fn from_gray(img: &GrayImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
        ImageBuf {
            width: w,
            height: h,
            data,
        }
    }

    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let v = self.get(x as usize, y as usize).clamp(0.0, 1.0);
            Luma([(v * 255.0).round() as u8])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_gray().save(path).map_err(|e| CoreError::ImageDecode {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(self.width - 1 - x, y));
            }
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(x, y, self.get(x, self.height - 1 - y));
            }
        }
        out
    }

    /// Quarter-turn counterclockwise.
    pub fn rot90(&self) -> Self {
        let mut out = ImageBuf::new(self.height, self.width, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, self.width - 1 - x, self.get(x, y));
            }
        }
        out
    }

    /// Median intensity of the one-pixel border ring.
    pub fn border_median(&self) -> f32 {
        let mut ring: Vec<f32> = Vec::new();
        for x in 0..self.width {
            ring.push(self.get(x, 0));
            ring.push(self.get(x, self.height - 1));
        }
        for y in 1..self.height.saturating_sub(1) {
            ring.push(self.get(0, y));
            ring.push(self.get(self.width - 1, y));
        }
        median(&mut ring)
    }

    /// Rotate about the image center by `angle_rad` with bilinear sampling.
    /// Samples falling outside the source are filled with `fill`.
    pub fn rotate_bilinear(&self, angle_rad: f32, fill: f32) -> Self {
        let mut out = ImageBuf::new(self.width, self.height, fill);
        let (cx, cy) = (
            (self.width as f32 - 1.0) / 2.0,
            (self.height as f32 - 1.0) / 2.0,
        );
        let (sin, cos) = angle_rad.sin_cos();
        for y in 0..self.height {
            for x in 0..self.width {
                let dx = x as f32 - cx;
                let dy = y as f32 - cy;
                // inverse map: rotate output coords by -angle
                let sx = cx + cos * dx + sin * dy;
                let sy = cy - sin * dx + cos * dy;
                out.set(x, y, self.sample_bilinear(sx, sy).unwrap_or(fill));
            }
        }
        out
    }

    pub fn resize_bilinear(&self, new_w: usize, new_h: usize) -> Self {
        let mut out = ImageBuf::new(new_w, new_h, 0.0);
        let sx = self.width as f32 / new_w as f32;
        let sy = self.height as f32 / new_h as f32;
        for y in 0..new_h {
            for x in 0..new_w {
                let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width as f32 - 1.0);
                let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height as f32 - 1.0);
                out.set(x, y, self.sample_bilinear(src_x, src_y).unwrap());
            }
        }
        out
    }

    fn sample_bilinear(&self, x: f32, y: f32) -> Option<f32> {
        if x < 0.0 || y < 0.0 || x > (self.width - 1) as f32 || y > (self.height - 1) as f32 {
            return None;
        }
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f32;
        let fy = y - y0 as f32;
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bot = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        Some(top * (1.0 - fy) + bot * fy)
    }
}

pub(crate) fn median(values: &mut [f32]) -> f32 {
    assert!(!values.is_empty());
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}
