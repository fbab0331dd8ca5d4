//! Float images and binary PPM/PGM files.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major `H × W × C` image with values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn from_hwc(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!("{} values for {width}x{height}x{channels}", data.len()),
            ));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// From planar `[C, H, W]` data.
    pub fn from_chw(width: usize, height: usize, channels: usize, chw: &[f64]) -> Result<Self> {
        let n = width * height;
        if chw.len() != n * channels {
            return Err(Error::shape("image", format!("{} planar values for {width}x{height}x{channels}", chw.len())));
        }
        let mut data = vec![0.0; chw.len()];
        for c in 0..channels {
            for i in 0..n {
                data[i * channels + c] = chw[c * n + i];
            }
        }
        Image::from_hwc(width, height, channels, data)
    }

    pub fn to_chw(&self) -> Vec<f64> {
        let n = self.width * self.height;
        let mut out = vec![0.0; self.data.len()];
        for i in 0..n {
            for c in 0..self.channels {
                out[c * n + i] = self.data[i * self.channels + c];
            }
        }
        out
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Rec. 601 luma of an RGB image; single-channel images pass through.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(self.channels)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Quantizes to 8 bits the way the file writers do.
    pub fn quantized(&self) -> Image {
        Image {
            data: self.data.iter().map(|&v| to_byte(v) as f64 / 255.0).collect(),
            ..self.clone()
        }
    }

    fn magic(&self) -> Result<&'static str> {
        match self.channels {
            1 => Ok("P5"),
            3 => Ok("P6"),
            c => Err(Error::InvalidArgument(format!("cannot store {c}-channel image as PPM/PGM"))),
        }
    }

    /// `P6` for three channels, `P5` for one.
    pub fn encode_pnm(&self) -> Result<Vec<u8>> {
        let mut out = format!("{}\n{} {}\n255\n", self.magic()?, self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| to_byte(v)));
        Ok(out)
    }

    pub fn decode_pnm(bytes: &[u8]) -> Result<Self> {
        let mut r = BufReader::new(bytes);
        let magic = next_token(&mut r)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(Error::Format(format!("unsupported image magic {m:?}"))),
        };
        let mut num = |what: &str| -> Result<usize> {
            let tok = next_token(&mut r)?;
            tok.parse().map_err(|_| Error::Format(format!("bad {what} {tok:?}")))
        };
        let (width, height, maxval) = (num("width")?, num("height")?, num("maxval")?);
        if maxval != 255 {
            return Err(Error::Format(format!("only 8-bit images are supported, maxval {maxval}")));
        }
        let mut raw = Vec::new();
        r.read_to_end(&mut raw)?;
        let n = width * height * channels;
        if raw.len() != n {
            return Err(Error::Format(format!("expected {n} pixel bytes, found {}", raw.len())));
        }
        Image::from_hwc(width, height, channels, raw.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode_pnm()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Image::decode_pnm(&std::fs::read(path)?)
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads one whitespace-delimited header token, skipping `#` comments, and
/// consumes exactly one trailing whitespace byte.
fn next_token(r: &mut impl BufRead) -> Result<String> {
    let mut tok = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        if r.read(&mut byte)? == 0 {
            return Err(Error::Format("truncated image header".into()));
        }
        match byte[0] {
            b'#' if tok.is_empty() => {
                let mut line = Vec::new();
                r.read_until(b'\n', &mut line)?;
            }
            c if c.is_ascii_whitespace() => {
                if !tok.is_empty() {
                    return Ok(String::from_utf8_lossy(&tok).into_owned());
                }
            }
            c => tok.push(c),
        }
    }
}

/// Bilinear resize with half-pixel centres and edge clamping.
pub fn resize_bilinear(img: &Image, width: usize, height: usize) -> Image {
    if img.width == width && img.height == height {
        return img.clone();
    }
    let c = img.channels;
    let sx = img.width as f64 / width as f64;
    let sy = img.height as f64 / height as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let s = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut data = vec![0.0; width * height * c];
    for y in 0..height {
        let (y0, y1, fy) = axis(y, sy, img.height);
        for x in 0..width {
            let (x0, x1, fx) = axis(x, sx, img.width);
            for k in 0..c {
                let at = |xx: usize, yy: usize| img.data[(yy * img.width + xx) * c + k];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                data[(y * width + x) * c + k] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Image {
        width,
        height,
        channels: c,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_roundtrip_is_exact_after_quantization() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| i as f64 / 17.0).collect();
        let img = Image::from_hwc(2, 3, 3, data).unwrap();
        let back = Image::decode_pnm(&img.encode_pnm().unwrap()).unwrap();
        assert_eq!(back, img.quantized());
        let gray = img.to_gray();
        assert_eq!(Image::decode_pnm(&gray.encode_pnm().unwrap()).unwrap(), gray.quantized());
    }

    #[test]
    fn header_comments_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\x00\xff";
        let img = Image::decode_pnm(bytes).unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
        assert!(Image::decode_pnm(b"P5\n2 1\n255\n\x00").is_err());
        assert!(Image::decode_pnm(b"P3\n1 1\n255\n0 0 0").is_err());
    }

    #[test]
    fn planar_conversion_roundtrips() {
        let img = Image::from_hwc(3, 2, 3, (0..18).map(f64::from).collect()).unwrap();
        let chw = img.to_chw();
        assert_eq!(&chw[..6], &[0.0, 3.0, 6.0, 9.0, 12.0, 15.0]);
        assert_eq!(Image::from_chw(3, 2, 3, &chw).unwrap(), img);
    }

    #[test]
    fn resize_preserves_constants_and_averages_halves() {
        let c = Image::filled(8, 8, 3, 0.25);
        assert!(resize_bilinear(&c, 5, 3).data.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let img = Image::from_hwc(4, 1, 1, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let half = resize_bilinear(&img, 2, 1);
        assert_eq!(half.data, vec![0.5, 2.5]);
    }
}
