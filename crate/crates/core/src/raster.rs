//! Float images, the `IMGF` container, PNG export and image metrics.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{invalid, io_err, CoreError, Result};

pub const IMGF_MAGIC: &[u8; 4] = b"IMGF";
pub const PSNR_CAP: f64 = 99.0;

/// Row-major image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(invalid("image", format!("{width}x{height}x{channels}")));
        }
        if data.len() != width * height * channels {
            return Err(invalid("image", format!("{} values for {width}x{height}x{channels}", data.len())));
        }
        Ok(Image { width, height, channels, data })
    }

    pub fn filled(width: usize, height: usize, value: &[f32]) -> Self {
        let data = value.iter().copied().cycle().take(width * height * value.len()).collect();
        Image { width, height, channels: value.len(), data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }

    /// Channel mean per pixel.
    pub fn grayscale(&self) -> Vec<f64> {
        self.data.chunks(self.channels).map(|p| p.iter().map(|&v| v as f64).sum::<f64>() / self.channels as f64).collect()
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        if (self.width, self.height, self.channels) != (other.width, other.height, other.channels) {
            return Err(invalid(
                "image pair",
                format!(
                    "{}x{}x{} vs {}x{}x{}",
                    self.width, self.height, self.channels, other.width, other.height, other.channels
                ),
            ));
        }
        Ok(())
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        self.same_shape(other)?;
        let s: f64 = self.data.iter().zip(&other.data).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(IMGF_MAGIC)?;
        for v in [self.width, self.height, self.channels] {
            w.write_all(&(v as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let bad = |detail: String| CoreError::Format { what: "IMGF", detail };
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| bad(format!("truncated header: {e}")))?;
        if &head[..4] != IMGF_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(head[4 * i..4 * i + 4].try_into().unwrap()) as usize;
        let (w, h, c) = (word(1), word(2), word(3));
        if w == 0 || h == 0 || c == 0 || w * h * c > 1 << 28 {
            return Err(bad(format!("implausible size {w}x{h}x{c}")));
        }
        let mut raw = vec![0u8; w * h * c * 4];
        r.read_exact(&mut raw).map_err(|e| bad(format!("truncated data: {e}")))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        Image::new(w, h, c, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
        self.write_to(&mut w).and_then(|_| w.flush()).map_err(io_err(path))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Image::read_from(&mut BufReader::new(File::open(path).map_err(io_err(path))?))
    }

    /// 8-bit PNG for inspection. One channel is written as grey after
    /// dividing by `scale`; three channels as RGB clamped to `[0, 1]`.
    pub fn save_png(&self, path: impl AsRef<Path>, scale: f32) -> Result<()> {
        let path = path.as_ref();
        let to8 = |v: f32| ((v / scale).clamp(0.0, 1.0) * 255.0).round() as u8;
        let bytes: Vec<u8> = self.data.iter().map(|&v| to8(v)).collect();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = match self.channels {
            1 => image::GrayImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            3 => image::RgbImage::from_raw(w, h, bytes).map(|im| im.save(path)),
            c => return Err(invalid("image", format!("PNG export needs 1 or 3 channels, got {c}"))),
        };
        match res {
            Some(Ok(())) => Ok(()),
            Some(Err(e)) => Err(CoreError::Format { what: "PNG", detail: format!("{}: {e}", path.display()) }),
            None => unreachable!("buffer sized from the image"),
        }
    }
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let mse = a.mse(b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let mid = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of a `w x h` map.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (ow, oh) = (w - n + 1, h - n + 1);
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid Gaussian windows of the grayscale images.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    ssim_with(a, b, SSIM_WINDOW, SSIM_SIGMA)
}

pub fn ssim_with(a: &Image, b: &Image, window: usize, sigma: f64) -> Result<f64> {
    a.same_shape(b)?;
    if a.width < window || a.height < window {
        return Err(invalid("image", format!("{}x{} is smaller than the {window}x{window} window", a.width, a.height)));
    }
    let (w, h) = (a.width, a.height);
    let (ga, gb) = (a.grayscale(), b.grayscale());
    let k = gaussian_window(window, sigma);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<f64>>();
    let mu_a = filter_valid(&ga, w, h, &k);
    let mu_b = filter_valid(&gb, w, h, &k);
    let aa = filter_valid(&prod(&ga, &ga), w, h, &k);
    let bb = filter_valid(&prod(&gb, &gb), w, h, &k);
    let ab = filter_valid(&prod(&ga, &gb), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / mu_a.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|i| ((i * 37) % 101) as f32 / 100.0).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn psnr_cases() {
        let a = ramp(16, 16);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let z = Image::filled(8, 8, &[0.0; 3]);
        let one = Image::filled(8, 8, &[1.0; 3]);
        assert!(psnr(&z, &one).unwrap().abs() < 1e-12);
        let p = Image::filled(8, 8, &[0.6; 3]);
        let q = Image::filled(8, 8, &[0.5; 3]);
        assert!((psnr(&p, &q).unwrap() - 20.0).abs() < 1e-5);
        assert!(psnr(&a, &z).is_err());
    }

    #[test]
    fn ssim_identical_and_negative() {
        let a = ramp(20, 17);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&ramp(10, 20), &ramp(10, 20)).is_err());
    }

    #[test]
    fn ssim_of_constants_is_luminance_term() {
        let a = Image::filled(12, 12, &[0.2; 3]);
        let b = Image::filled(12, 12, &[0.7; 3]);
        let expect = (2.0 * 0.2 * 0.7 + C1) / (0.04 + 0.49 + C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn imgf_round_trip() {
        let a = ramp(5, 3);
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(Image::read_from(&mut buf.as_slice()).unwrap(), a);
        buf.truncate(20);
        assert!(Image::read_from(&mut buf.as_slice()).is_err());
    }
}
