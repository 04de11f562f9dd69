//! In-memory images, PNG and PFM I/O, and resampling.
//!
//! Pixel `(x, y)` has its centre at integer coordinates; data is row-major
//! with interleaved channels.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use monoview_autodiff::{lit, Scalar};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self { width, height, channels, data: vec![T::zero(); width * height * channels] }
    }

    pub fn from_data(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Argument(format!(
                "{} values for a {width}×{height}×{channels} image",
                data.len()
            )));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    /// Planar `[C, H, W]` copy.
    pub fn to_planar(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.data.len());
        for c in 0..self.channels {
            for i in 0..self.width * self.height {
                out.push(self.data[i * self.channels + c]);
            }
        }
        out
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, planar: &[T]) -> Result<Self> {
        let mut img = Self::new(width, height, channels);
        if planar.len() != img.data.len() {
            return Err(Error::Argument("planar buffer has the wrong length".into()));
        }
        for c in 0..channels {
            for i in 0..width * height {
                img.data[i * channels + c] = planar[c * width * height + i];
            }
        }
        Ok(img)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { data: self.data.iter().map(|&v| f(v)).collect(), ..*self }
    }

    pub fn mean(&self) -> T {
        self.data.iter().fold(T::zero(), |a, &b| a + b) / lit(self.data.len().max(1) as f64)
    }

    /// Bilinear sample at a real pixel coordinate; outside the image is zero.
    pub fn sample_bilinear(&self, x: T, y: T, c: usize) -> T {
        let (xf, yf) = (x.floor(), y.floor());
        let (fx, fy) = (x - xf, y - yf);
        let (x0, y0) = (xf.to_i64().unwrap_or(i64::MIN / 2), yf.to_i64().unwrap_or(i64::MIN / 2));
        let at = |xi: i64, yi: i64| {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                T::zero()
            } else {
                self.get(xi as usize, yi as usize, c)
            }
        };
        let one = T::one();
        let mut v = T::zero();
        if fx < one && fy < one {
            v += (one - fx) * (one - fy) * at(x0, y0);
        }
        if fx > T::zero() {
            v += fx * (one - fy) * at(x0 + 1, y0);
        }
        if fy > T::zero() {
            v += (one - fx) * fy * at(x0, y0 + 1);
        }
        if fx > T::zero() && fy > T::zero() {
            v += fx * fy * at(x0 + 1, y0 + 1);
        }
        v
    }

    /// Resamples onto a `width × height` grid where output pixel `(u, v)`
    /// maps to `origin + (u + ½, v + ½) / scale` in source centre
    /// coordinates. Downscaling averages a `k × k` grid of bilinear samples
    /// over each output footprint.
    pub fn resample(&self, width: usize, height: usize, origin: [f64; 2], scale: f64) -> Self {
        let k = (1.0 / scale).ceil().max(1.0) as usize;
        let mut out = Self::new(width, height, self.channels);
        let norm = lit::<T>(1.0 / (k * k) as f64);
        for v in 0..height {
            for u in 0..width {
                for c in 0..self.channels {
                    let mut acc = T::zero();
                    for sy in 0..k {
                        for sx in 0..k {
                            let px = origin[0] + (u as f64 + (sx as f64 + 0.5) / k as f64) / scale;
                            let py = origin[1] + (v as f64 + (sy as f64 + 0.5) / k as f64) / scale;
                            acc += self.sample_bilinear(lit(px), lit(py), c);
                        }
                    }
                    out.set(u, v, c, acc * norm);
                }
            }
        }
        out
    }

    /// Plain resize of the whole frame.
    pub fn resize(&self, width: usize, height: usize) -> Self {
        let scale = width as f64 / self.width as f64;
        debug_assert!((scale - height as f64 / self.height as f64).abs() < 1e-12, "aspect change");
        self.resample(width, height, [-0.5, -0.5], scale)
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.to_f64().unwrap().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    /// 8-bit PNG; one channel is written as grayscale, three as RGB.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = match self.channels {
            1 => image::ExtendedColorType::L8,
            3 => image::ExtendedColorType::Rgb8,
            c => return Err(Error::Argument(format!("cannot write a {c}-channel PNG"))),
        };
        image::save_buffer_with_format(path, &self.to_bytes(), self.width as u32, self.height as u32, color, image::ImageFormat::Png)
            .map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })
    }

    /// Reads a PNG converted to `channels` (1 = luma, 3 = RGB), scaled to [0, 1].
    pub fn load_png(path: &Path, channels: usize) -> Result<Self> {
        if !path.exists() {
            return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
        }
        let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), message: e.to_string() })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let raw = match channels {
            1 => img.into_luma8().into_raw(),
            3 => img.into_rgb8().into_raw(),
            c => return Err(Error::Argument(format!("cannot read a PNG as {c} channels"))),
        };
        let data = raw.into_iter().map(|b| lit::<T>(b as f64 / 255.0)).collect();
        Self::from_data(w, h, channels, data)
    }

    /// Portable float map: `Pf` (1 channel) or `PF` (3 channels), little
    /// endian (negative scale), rows stored bottom to top.
    pub fn save_pfm(&self, path: &Path) -> Result<()> {
        let tag = match self.channels {
            1 => "Pf",
            3 => "PF",
            c => return Err(Error::Argument(format!("cannot write a {c}-channel PFM"))),
        };
        let mut buf = format!("{tag}\n{} {}\n-1.0\n", self.width, self.height).into_bytes();
        let row = self.width * self.channels;
        for y in (0..self.height).rev() {
            for v in &self.data[y * row..(y + 1) * row] {
                buf.extend_from_slice(&v.to_f32().unwrap().to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_pfm(path: &Path) -> Result<Self> {
        let bad = |m: &str| Error::Image { path: path.to_path_buf(), message: m.to_string() };
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = BufReader::new(f);
        let mut header = Vec::new();
        while header.len() < 3 {
            let mut line = String::new();
            if reader.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
                return Err(bad("truncated PFM header"));
            }
            header.extend(line.split_whitespace().map(str::to_string));
        }
        let channels = match header[0].as_str() {
            "Pf" => 1,
            "PF" => 3,
            _ => return Err(bad("not a PFM file")),
        };
        let width: usize = header[1].parse().map_err(|_| bad("bad PFM width"))?;
        let height: usize = header.get(2).and_then(|s| s.parse().ok()).ok_or_else(|| bad("bad PFM height"))?;
        let mut scale_line = String::new();
        let scale: f64 = if header.len() > 3 {
            header[3].parse().map_err(|_| bad("bad PFM scale"))?
        } else {
            reader.read_line(&mut scale_line).map_err(|e| Error::io(path, e))?;
            scale_line.trim().parse().map_err(|_| bad("bad PFM scale"))?
        };
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let row = width * channels;
        if bytes.len() != 4 * row * height {
            return Err(bad("PFM payload has the wrong size"));
        }
        let mut data = vec![T::zero(); row * height];
        for (i, chunk) in bytes.chunks(4).enumerate() {
            let raw: [u8; 4] = chunk.try_into().unwrap();
            let v = if scale < 0.0 { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
            let (file_row, col) = (i / row, i % row);
            data[(height - 1 - file_row) * row + col] = T::from_f32(v).unwrap();
        }
        Self::from_data(width, height, channels, data)
    }
}
