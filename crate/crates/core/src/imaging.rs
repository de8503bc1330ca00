//! 8-bit RGB frames, floating-point crops and PNG I/O.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, CropSpec};
use crate::scalar::{lit, Scalar};

/// An 8-bit RGB frame, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Frame {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "frame {width}x{height} needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn size(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-channel mean intensity in `[0, 1]`.
    pub fn mean_rgb(&self) -> [f64; 3] {
        let mut acc = [0u64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                acc[c] += px[c] as u64;
            }
        }
        let n = (self.width * self.height).max(1) as f64 * 255.0;
        [acc[0] as f64 / n, acc[1] as f64 / n, acc[2] as f64 / n]
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img =
            image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })?.to_rgb8();
        let (w, h) = img.dimensions();
        Self::new(w as usize, h as usize, img.into_raw())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.data.clone())
            .expect("frame buffer size");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), msg: e.to_string() })
    }

    /// Draw a one-pixel rectangle outline, clipped to the frame.
    pub fn draw_box<T: Scalar>(&mut self, b: &BBox<T>, rgb: [u8; 3]) {
        let (w, h) = (self.width as i64, self.height as i64);
        let x0 = b.x.as_f64().round() as i64;
        let y0 = b.y.as_f64().round() as i64;
        let x1 = (b.x + b.w).as_f64().round() as i64 - 1;
        let y1 = (b.y + b.h).as_f64().round() as i64 - 1;
        for x in x0.max(0)..=x1.min(w - 1) {
            for y in [y0, y1] {
                if (0..h).contains(&y) {
                    self.put(x as usize, y as usize, rgb);
                }
            }
        }
        for y in y0.max(0)..=y1.min(h - 1) {
            for x in [x0, x1] {
                if (0..w).contains(&x) {
                    self.put(x as usize, y as usize, rgb);
                }
            }
        }
    }
}

/// Floating-point RGB image, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![T::zero(); width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self { width, height, data }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y, c| self.at(self.width - 1 - x, y, c))
    }

    pub fn scale_intensity(&mut self, k: T) {
        for v in &mut self.data {
            *v = (*v * k).min(T::one());
        }
    }

    pub fn normalized(&self, norm: &PixelNorm) -> Self {
        let (m, s) = (lit::<T>(norm.mean), lit::<T>(norm.std));
        Self { width: self.width, height: self.height, data: self.data.iter().map(|&v| (v - m) / s).collect() }
    }
}

/// Fixed normalisation constants applied to `[0, 1]` intensities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelNorm {
    pub mean: f64,
    pub std: f64,
}

impl Default for PixelNorm {
    fn default() -> Self {
        Self { mean: 0.1, std: 0.15 }
    }
}

/// Bilinearly resample `crop` out of `frame` into `[0, 1]` intensities.
/// Samples falling outside the frame take the frame's mean colour.
pub fn sample_crop<T: Scalar>(frame: &Frame, crop: &CropSpec<T>) -> Image<T> {
    let fill = frame.mean_rgb();
    let n = crop.out_size;
    let (fw, fh) = (frame.width as i64, frame.height as i64);
    let inv255 = 1.0 / 255.0;
    let fetch = |x: i64, y: i64, c: usize| -> f64 {
        if x < 0 || y < 0 || x >= fw || y >= fh {
            fill[c]
        } else {
            frame.data[((y as usize) * frame.width + x as usize) * 3 + c] as f64 * inv255
        }
    };
    let (ox, oy) = crop.origin();
    let (ox, oy) = (ox.as_f64(), oy.as_f64());
    let step = 1.0 / crop.scale.as_f64();
    let mut data = Vec::with_capacity(n * n * 3);
    for v in 0..n {
        let sy = oy + (v as f64 + 0.5) * step - 0.5;
        let y0 = sy.floor();
        let ty = sy - y0;
        for u in 0..n {
            let sx = ox + (u as f64 + 0.5) * step - 0.5;
            let x0 = sx.floor();
            let tx = sx - x0;
            let (xi, yi) = (x0 as i64, y0 as i64);
            for c in 0..3 {
                let top = fetch(xi, yi, c) * (1.0 - tx) + fetch(xi + 1, yi, c) * tx;
                let bot = fetch(xi, yi + 1, c) * (1.0 - tx) + fetch(xi + 1, yi + 1, c) * tx;
                data.push(T::lit(top * (1.0 - ty) + bot * ty));
            }
        }
    }
    Image { width: n, height: n, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_crop_reproduces_pixels() {
        let mut f = Frame::filled(4, 4, [0, 0, 0]);
        f.put(1, 2, [255, 51, 0]);
        let crop = CropSpec::new((2.0f64, 2.0), 4.0, 4).unwrap();
        let img = sample_crop(&f, &crop);
        assert!((img.at(1, 2, 0) - 1.0).abs() < 1e-12);
        assert!((img.at(1, 2, 1) - 0.2).abs() < 1e-12);
        assert_eq!(img.at(0, 0, 0), 0.0);
    }

    #[test]
    fn out_of_frame_uses_mean_colour() {
        let f = Frame::filled(8, 8, [40, 80, 120]);
        let crop = CropSpec::new((-100.0f64, -100.0), 10.0, 5).unwrap();
        let img = sample_crop(&f, &crop);
        for c in 0..3 {
            let expect = [40.0, 80.0, 120.0][c] / 255.0;
            assert!((img.at(2, 2, c) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut f = Frame::filled(5, 3, [1, 2, 3]);
        f.put(4, 2, [200, 100, 50]);
        let p = dir.path().join("f.png");
        f.save_png(&p).unwrap();
        assert_eq!(Frame::load_png(&p).unwrap(), f);
        assert!(matches!(Frame::load_png(&dir.path().join("nope.png")), Err(Error::MissingFile(_))));
    }

    #[test]
    fn flip_is_an_involution() {
        let img = Image::<f32>::from_fn(3, 2, |x, y, c| (x * 7 + y * 3 + c) as f32);
        assert_eq!(img.flip_horizontal().flip_horizontal(), img);
        assert_eq!(img.flip_horizontal().at(0, 1, 2), img.at(2, 1, 2));
    }
}
