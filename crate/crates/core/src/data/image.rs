use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Channel-major float image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(Error::shape(
                "image",
                format!("{channels}x{height}x{width} with {} values", data.len()),
            ));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(Error::shape(
                "crop",
                format!(
                    "{h}x{w} at ({y0}, {x0}) outside {}x{}",
                    self.height, self.width
                ),
            ));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let start = (c * self.height + y) * self.width + x0;
                data.extend_from_slice(&self.data[start..start + w]);
            }
        }
        Image::new(self.channels, h, w, data)
    }

    /// Centered `size × size` crop.
    pub fn center_crop(&self, size: usize) -> Result<Image> {
        if size > self.height || size > self.width {
            return Err(Error::Data(format!(
                "image {}x{} smaller than crop {size}",
                self.height, self.width
            )));
        }
        self.crop((self.height - size) / 2, (self.width - size) / 2, size, size)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
        .expect("image dims are positive")
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Snaps every value to the nearest `k/255`, matching an 8-bit round trip.
    pub fn quantize8(&mut self) {
        for v in &mut self.data {
            *v = to_u8(*v) as f32 / 255.0;
        }
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance over all channels and pixels.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| (v as f64 - m).powi(2))
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Image) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .fold(0.0, f64::max)
    }

    /// Writes a binary PPM (`P6`, maxval 255); single-channel images are
    /// replicated to RGB.
    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Data(format!(
                "cannot write {}-channel image as PPM",
                self.channels
            )));
        }
        let mut out = Vec::with_capacity(20 + 3 * self.height * self.width);
        write!(out, "P6\n{} {}\n255\n", self.width, self.height).expect("vec write");
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..3 {
                    let src = if self.channels == 1 { 0 } else { c };
                    out.push(to_u8(self.get(src, y, x)));
                }
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Writes a binary PGM (`P5`) of the channel mean.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(20 + self.height * self.width);
        write!(out, "P5\n{} {}\n255\n", self.width, self.height).expect("vec write");
        for y in 0..self.height {
            for x in 0..self.width {
                let v = (0..self.channels).map(|c| self.get(c, y, x)).sum::<f32>() / self.channels as f32;
                out.push(to_u8(v));
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads binary `P6` or `P5` (8-bit); grayscale is expanded to 3 channels.
    pub fn read_pnm(path: &Path) -> Result<Image> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        decode_pnm(&bytes).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: 1,
            msg,
        })
    }
}

#[inline]
fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let next_token = |pos: &mut usize| -> std::result::Result<String, String> {
        loop {
            while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
                *pos += 1;
            }
            if *pos < bytes.len() && bytes[*pos] == b'#' {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
                continue;
            }
            break;
        }
        let start = *pos;
        while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if start == *pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
    };
    let magic = next_token(&mut pos)?;
    let src_channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => return Err(format!("unsupported magic `{other}` (need P5 or P6)")),
    };
    let parse = |s: String, what: &str| s.parse::<usize>().map_err(|_| format!("bad {what} `{s}`"));
    let width = parse(next_token(&mut pos)?, "width")?;
    let height = parse(next_token(&mut pos)?, "height")?;
    let maxval = parse(next_token(&mut pos)?, "maxval")?;
    if maxval != 255 {
        return Err(format!("maxval {maxval} unsupported (need 255)"));
    }
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height * src_channels;
    let raster = bytes
        .get(pos..pos + need)
        .ok_or_else(|| format!("raster truncated: need {need} bytes"))?;
    let mut img = Image::filled(3, height, width, 0.0);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                let sc = if src_channels == 1 { 0 } else { c };
                let v = raster[(y * width + x) * src_channels + sc] as f32 / 255.0;
                img.set(c, y, x, v);
            }
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_after_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let mut img = Image::new(3, 2, 3, (0..18).map(|i| i as f32 / 17.0).collect()).unwrap();
        img.quantize8();
        img.write_ppm(&path).unwrap();
        assert_eq!(Image::read_pnm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_expands_to_three_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        std::fs::write(&path, b"P5\n# comment\n2 1\n255\n\x00\xff").unwrap();
        let img = Image::read_pnm(&path).unwrap();
        assert_eq!(img.channels(), 3);
        for c in 0..3 {
            assert_eq!(img.get(c, 0, 0), 0.0);
            assert_eq!(img.get(c, 0, 1), 1.0);
        }
    }

    #[test]
    fn truncated_raster_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.ppm");
        std::fs::write(&path, b"P6\n2 2\n255\n\x00\x00").unwrap();
        assert!(matches!(Image::read_pnm(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn crop_extracts_window() {
        let img = Image::new(1, 3, 3, (0..9).map(|i| i as f32).collect()).unwrap();
        let c = img.crop(1, 1, 2, 2).unwrap();
        assert_eq!(c.data(), &[4.0, 5.0, 7.0, 8.0]);
        assert!(img.crop(2, 2, 2, 2).is_err());
    }
}
