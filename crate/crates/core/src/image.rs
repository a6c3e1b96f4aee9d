//! In-memory RGB image with `f64` channels in `[0, 1]`, plus PNG I/O and
//! the resampling helpers the pipeline needs.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::path::Path;

/// RGB image, planar channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: [Vec<f64>; 3],
}

/// Raw-resolution renderer output; same representation as [`Image`].
pub type RawImage = Image;

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        let n = height * width;
        Image {
            height,
            width,
            channels: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let n = height * width;
        Image {
            height,
            width,
            channels: [vec![rgb[0]; n], vec![rgb[1]; n], vec![rgb[2]; n]],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut img = Image::new(height, width);
        for y in 0..height {
            for x in 0..width {
                let px = f(y, x);
                for c in 0..3 {
                    img.channels[c][y * width + x] = px[c];
                }
            }
        }
        img
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> [f64; 3] {
        let i = y * self.width + x;
        [self.channels[0][i], self.channels[1][i], self.channels[2][i]]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, px: [f64; 3]) {
        let i = y * self.width + x;
        for c in 0..3 {
            self.channels[c][i] = px[c];
        }
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        &self.channels[c]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        &mut self.channels[c]
    }

    /// Bilinear sample with edge clamp; coordinates in pixel units.
    pub fn sample_clamped(&self, y: f64, x: f64) -> [f64; 3] {
        let (h, w) = (self.height as isize, self.width as isize);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let clamp = |v: isize, hi: isize| v.clamp(0, hi - 1) as usize;
        let (x0i, y0i) = (x0 as isize, y0 as isize);
        let (xa, xb) = (clamp(x0i, w), clamp(x0i + 1, w));
        let (ya, yb) = (clamp(y0i, h), clamp(y0i + 1, h));
        let mut out = [0.0; 3];
        for c in 0..3 {
            let ch = &self.channels[c];
            let p00 = ch[ya * self.width + xa];
            let p01 = ch[ya * self.width + xb];
            let p10 = ch[yb * self.width + xa];
            let p11 = ch[yb * self.width + xb];
            let top = p00 * (1.0 - fx) + p01 * fx;
            let bot = p10 * (1.0 - fx) + p11 * fx;
            out[c] = top * (1.0 - fy) + bot * fy;
        }
        out
    }

    /// Exact area average by an integer factor; used to bring full-resolution
    /// crops down to the renderer resolution.
    pub fn downsample_area(&self, factor: usize) -> Result<Image> {
        if factor == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(Error::invalid(format!(
                "downsample factor {factor} does not divide {}x{}",
                self.height, self.width
            )));
        }
        let (oh, ow) = (self.height / factor, self.width / factor);
        let mut out = Image::new(oh, ow);
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..3 {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            acc += self.channels[c][(oy * factor + dy) * self.width + ox * factor + dx];
                        }
                    }
                    out.channels[c][oy * ow + ox] = acc * norm;
                }
            }
        }
        Ok(out)
    }

    pub fn all_in_unit_range(&self) -> bool {
        self.channels
            .iter()
            .all(|ch| ch.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()))
    }

    pub fn to_arrays(&self) -> [Array2<f64>; 3] {
        [0, 1, 2].map(|c| {
            Array2::from_shape_vec((self.height, self.width), self.channels[c].clone())
                .expect("image channel shape")
        })
    }

    pub fn from_arrays(channels: [Array2<f64>; 3]) -> Image {
        let (h, w) = channels[0].dim();
        assert!(channels.iter().all(|a| a.dim() == (h, w)));
        let mut img = Image::new(h, w);
        for c in 0..3 {
            img.channels[c] = channels[c].iter().copied().collect();
        }
        img
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut buf = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = self.get(y, x);
                let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Rgb([q(px[0]), q(px[1]), q(px[2])]));
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                out.set(y, x, [
                    p[0] as f64 / 255.0,
                    p[1] as f64 / 255.0,
                    p[2] as f64 / 255.0,
                ]);
            }
        }
        Ok(out)
    }

    /// Save a single-channel map (values clamped to `[0,1]`) as a grayscale PNG.
    pub fn save_gray_png(map: &Array2<f64>, path: &Path) -> Result<()> {
        let (h, w) = map.dim();
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let q = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.put_pixel(x as u32, y as u32, image::Luma([q]));
            }
        }
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn downsample_constant_is_exact() {
        let img = Image::filled(8, 8, [0.25, 0.5, 0.75]);
        let out = img.downsample_area(2).unwrap();
        assert_eq!(out.height(), 4);
        for c in 0..3 {
            for &v in out.channel(c) {
                assert!((v - [0.25, 0.5, 0.75][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bilinear_integer_coords_are_exact() {
        let img = Image::from_fn(4, 4, |y, x| [(y * 4 + x) as f64 / 16.0; 3]);
        for y in 0..4 {
            for x in 0..4 {
                let s = img.sample_clamped(y as f64, x as f64);
                assert_eq!(s, img.get(y, x));
            }
        }
    }

    #[test]
    fn png_round_trip_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.png");
        let img = Image::from_fn(5, 7, |y, x| {
            [(y as f64 / 4.0), (x as f64 / 6.0), 0.5]
        });
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for c in 0..3 {
            for (a, b) in img.channel(c).iter().zip(back.channel(c)) {
                assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
            }
        }
    }
}
