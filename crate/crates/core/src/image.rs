//! RGB float images plus PPM (P6) and raw f32 export.

use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

/// Row-major `height x width x 3` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            data: vec![0.0; width * height * 3],
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Dim(format!(
                "{}x{} image needs {} values, got {}",
                width,
                height,
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn pixel(&self, u: usize, v: usize) -> [f64; 3] {
        let i = (v * self.width + u) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, u: usize, v: usize, rgb: [f64; 3]) {
        let i = (v * self.width + u) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Grayscale image stored in all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[f64]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::Dim("gray map size".into()));
        }
        Ok(Image {
            width,
            height,
            data: gray.iter().flat_map(|&g| [g, g, g]).collect(),
        })
    }

    pub fn to_gray(&self) -> Vec<f64> {
        self.data.chunks(3).map(|c| (c[0] + c[1] + c[2]) / 3.0).collect()
    }

    pub fn mse(&self, other: &Image) -> Result<f64> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::Dim("image sizes differ".into()));
        }
        let n = self.data.len() as f64;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
    }

    /// L2 (Frobenius) distance over all channels.
    pub fn l2_distance(&self, other: &Image) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        f.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        // header: magic, width, height, maxval, separated by whitespace (comments allowed)
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < buf.len() && buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < buf.len() && buf[pos] == b'#' {
                while pos < buf.len() && buf[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < buf.len() && !buf[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(Error::Format("truncated PPM header".into()));
            }
            fields.push(String::from_utf8_lossy(&buf[start..pos]).into_owned());
        }
        pos += 1;
        if fields[0] != "P6" {
            return Err(Error::Format(format!("not a binary PPM (magic {})", fields[0])));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("bad PPM field '{s}'")));
        let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
        if max == 0 || max > 255 {
            return Err(Error::Format("only 8-bit PPM is supported".into()));
        }
        let need = w * h * 3;
        if buf.len() < pos + need {
            return Err(Error::Truncated("PPM pixels"));
        }
        let data = buf[pos..pos + need].iter().map(|&b| b as f64 / max as f64).collect();
        Image::from_data(w, h, data)
    }

    /// Raw little-endian f32 dump of the pixel buffer (no header).
    pub fn write_raw_f32(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// `10 log10(1 / mse)`, capped at 99 dB for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(a.mse(b)?))
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}
