//! RGB images, boolean masks and their 8-bit PNG encodings.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};

use crate::error::{Error, Result};

/// Row-major RGB image with channel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn black(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut img = Image::black(width, height);
        img.data
            .chunks_mut(3)
            .for_each(|px| px.copy_from_slice(&rgb));
        img
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape {
                op: "image",
                lhs: vec![height, width, 3],
                rhs: vec![data.len()],
            });
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean_color(&self) -> [f32; 3] {
        let n = (self.width * self.height).max(1) as f64;
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks(3) {
            for c in 0..3 {
                acc[c] += px[c] as f64;
            }
        }
        [
            (acc[0] / n) as f32,
            (acc[1] / n) as f32,
            (acc[2] / n) as f32,
        ]
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = RgbImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            let v = self.pixel(x as usize, y as usize);
            *px = Rgb(v.map(quantize));
        }
        out.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|v| v as f32 / 255.0).collect();
        Image::from_data(w as usize, h as usize, data)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major foreground mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Mask {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Chebyshev dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let mut out = Mask::empty(self.width, self.height);
        let r = radius as isize;
        for y in 0..self.height as isize {
            for x in 0..self.width as isize {
                let hit = (-r..=r).any(|dy| {
                    (-r..=r).any(|dx| {
                        let (nx, ny) = (x + dx, y + dy);
                        nx >= 0
                            && ny >= 0
                            && nx < self.width as isize
                            && ny < self.height as isize
                            && self.get(nx as usize, ny as usize)
                    })
                });
                out.data[y as usize * self.width + x as usize] = hit;
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut out = GrayImage::new(self.width as u32, self.height as u32);
        for (x, y, px) in out.enumerate_pixels_mut() {
            *px = Luma([if self.get(x as usize, y as usize) { 255 } else { 0 }]);
        }
        out.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_luma8();
        let (w, h) = img.dimensions();
        Ok(Mask {
            width: w as usize,
            height: h as usize,
            data: img.into_raw().into_iter().map(|v| v >= 128).collect(),
        })
    }
}

/// Writes a single-channel map (e.g. accumulated opacity) as 8-bit PNG.
pub fn save_gray_png(width: usize, height: usize, values: &[f32], path: &Path) -> Result<()> {
    let mut out = GrayImage::new(width as u32, height as u32);
    for (x, y, px) in out.enumerate_pixels_mut() {
        *px = Luma([quantize(values[y as usize * width + x as usize])]);
    }
    out.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}
