//! 8-bit RGB images with binary PPM (P6) I/O.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub data: Vec<u8>,
}

/// Maps a pixel value to the network's input range `[-1, 1]`.
#[inline]
pub fn normalize(v: u8) -> f64 {
    f64::from(v) / 127.5 - 1.0
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies a `size x size` square whose top-left corner is `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, size: usize) -> Result<Image> {
        if x0 + size > self.width || y0 + size > self.height {
            return Err(Error::dim(format!(
                "crop {size}px at ({x0}, {y0}) leaves the {}x{} image",
                self.width, self.height
            )));
        }
        let mut out = Image::new(size, size);
        for y in 0..size {
            let src = ((y0 + y) * self.width + x0) * 3;
            out.data[y * size * 3..(y + 1) * size * 3]
                .copy_from_slice(&self.data[src..src + size * 3]);
        }
        Ok(out)
    }

    pub fn hflip(&self) -> Image {
        let mut out = Image::new(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Planar, normalized network input.
    pub fn to_tensor(&self) -> Tensor {
        let n = self.width * self.height;
        let mut data = vec![0.0; 3 * n];
        for (p, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * n + p] = normalize(px[c]);
            }
        }
        Tensor {
            channels: 3,
            height: self.height,
            width: self.width,
            data,
        }
    }

    /// Bilinear resampling to `width x height`, pixel centers aligned.
    pub fn resize_bilinear(&self, width: usize, height: usize) -> Image {
        let mut out = Image::new(width, height);
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        let axis = |i: usize, scale: f64, limit: usize| {
            let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(limit - 1);
            (i0, i1, s - i0 as f64)
        };
        let xs: Vec<_> = (0..width).map(|x| axis(x, sx, self.width)).collect();
        for y in 0..height {
            let (y0, y1, fy) = axis(y, sy, self.height);
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let (a, b, c, d) = (self.get(x0, y0), self.get(x1, y0), self.get(x0, y1), self.get(x1, y1));
                let mut px = [0u8; 3];
                for k in 0..3 {
                    let top = f64::from(a[k]) * (1.0 - fx) + f64::from(b[k]) * fx;
                    let bot = f64::from(c[k]) * (1.0 - fx) + f64::from(d[k]) * fx;
                    px[k] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
                }
                out.put(x, y, px);
            }
        }
        out
    }

    /// One-pixel rectangle outline, clipped to the image.
    pub fn draw_box(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, rgb: [u8; 3]) {
        if self.width == 0 || self.height == 0 {
            return;
        }
        let clamp_x = |v: f64| (v.round().max(0.0) as usize).min(self.width - 1);
        let clamp_y = |v: f64| (v.round().max(0.0) as usize).min(self.height - 1);
        let (ax, bx, ay, by) = (clamp_x(x1), clamp_x(x2), clamp_y(y1), clamp_y(y2));
        for x in ax..=bx {
            self.put(x, ay, rgb);
            self.put(x, by, rgb);
        }
        for y in ay..=by {
            self.put(ax, y, rgb);
            self.put(bx, y, rgb);
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
        let mut pos = 0;
        let mut fields = Vec::with_capacity(4);
        while fields.len() < 4 {
            while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
                if bytes[pos] == b'#' {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                } else {
                    pos += 1;
                }
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::data("truncated PPM header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| Error::data("bad PPM header"))?);
        }
        if fields[0] != "P6" {
            return Err(Error::data(format!("unsupported image magic {:?}", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::data(format!("bad PPM field {s:?}")));
        let (width, height, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval != 255 {
            return Err(Error::data(format!("only 8-bit PPM supported, maxval {maxval}")));
        }
        // exactly one whitespace byte separates header and raster
        pos += 1;
        let need = width * height * 3;
        if bytes.len() < pos + need {
            return Err(Error::data("truncated PPM raster"));
        }
        Ok(Image {
            width,
            height,
            data: bytes[pos..pos + need].to_vec(),
        })
    }

    pub fn read_ppm(path: &Path) -> Result<Image> {
        Image::decode_ppm(&fs::read(path)?)
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode_ppm())?;
        Ok(())
    }
}
