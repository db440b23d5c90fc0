//! Binary PGM (`P5`) and PPM (`P6`) rasters with maxval 255.

use std::fs;
use std::path::Path;

use hiformer_tensor::{Scalar, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RasterKind {
    /// One channel (`P5`).
    Gray,
    /// Interleaved R, G, B (`P6`).
    Rgb,
}

impl RasterKind {
    pub fn channels(self) -> usize {
        match self {
            RasterKind::Gray => 1,
            RasterKind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static str {
        match self {
            RasterKind::Gray => "P5",
            RasterKind::Rgb => "P6",
        }
    }
}

/// Pixel bytes in file order (row-major, channels interleaved).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub kind: RasterKind,
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count");
        Raster { kind: RasterKind::Gray, width, height, pixels }
    }

    pub fn rgb(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), 3 * width * height, "pixel count");
        Raster { kind: RasterKind::Rgb, width, height, pixels }
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let kind = match bytes.get(..2) {
            Some(b"P5") => RasterKind::Gray,
            Some(b"P6") => RasterKind::Rgb,
            Some(m) => return Err(Error::UnsupportedFormat(String::from_utf8_lossy(m).into_owned())),
            None => return Err(Error::CorruptHeader("file too short".into())),
        };
        let mut pos = 2;
        let mut fields = [0usize; 3];
        for field in &mut fields {
            // whitespace and `#` comments may separate header fields
            loop {
                match bytes.get(pos) {
                    Some(b) if b.is_ascii_whitespace() => pos += 1,
                    Some(b'#') => {
                        while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                            pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            let start = pos;
            while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
                pos += 1;
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::CorruptHeader(format!("expected a number at byte {start}")))?;
        }
        let [width, height, maxval] = fields;
        if maxval != 255 {
            return Err(Error::CorruptHeader(format!("maxval {maxval}, expected 255")));
        }
        if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::CorruptHeader("missing separator before pixel data".into()));
        }
        pos += 1;
        let n = width * height * kind.channels();
        let pixels = bytes
            .get(pos..pos + n)
            .ok_or_else(|| Error::CorruptHeader(format!("expected {n} pixel bytes, found {}", bytes.len() - pos)))?
            .to_vec();
        Ok(Raster { kind, width, height, pixels })
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("{}\n{} {}\n255\n", self.kind.magic(), self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Three planes `(3, H, W)` scaled to `[0, 1]`; gray is replicated.
    pub fn to_image<T: Scalar>(&self) -> Tensor<T> {
        let (h, w, c) = (self.height, self.width, self.kind.channels());
        Tensor::from_fn(vec![3, h, w], |i| {
            let (ch, p) = (i / (h * w), i % (h * w));
            let byte = self.pixels[p * c + if c == 1 { 0 } else { ch }];
            T::from_f64_lossy(byte as f64 / 255.0)
        })
    }
}

pub fn read_raster(path: impl AsRef<Path>) -> Result<Raster> {
    Raster::parse(&fs::read(path)?)
}

/// The file as stored: `(C, H, W)` with `C` 1 or 3, scaled to `[0, 1]`.
pub fn image_tensor<T: Scalar>(r: &Raster) -> Tensor<T> {
    let (h, w, c) = (r.height, r.width, r.kind.channels());
    Tensor::from_fn(vec![c, h, w], |i| {
        let (ch, p) = (i / (h * w), i % (h * w));
        T::from_f64_lossy(r.pixels[p * c + ch] as f64 / 255.0)
    })
}

pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    Ok(image_tensor(&read_raster(path)?))
}

/// Label bytes of a `P5` mask with its `(height, width)`.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    let r = read_raster(path)?;
    if r.kind != RasterKind::Gray {
        return Err(Error::UnsupportedFormat("P6 (masks must be P5)".into()));
    }
    Ok((r.pixels, r.height, r.width))
}

/// Writes a `(C, H, W)` image in `[0, 1]` as `P5` (C = 1) or `P6` (C = 3).
pub fn save_image<T: Scalar>(path: impl AsRef<Path>, image: &Tensor<T>) -> Result<()> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::CorruptHeader(format!("image shape {:?} is not (C, H, W)", image.shape())));
    };
    let kind = match c {
        1 => RasterKind::Gray,
        3 => RasterKind::Rgb,
        _ => return Err(Error::UnsupportedFormat(format!("{c} channels"))),
    };
    let mut pixels = vec![0u8; c * h * w];
    for (i, v) in image.data().iter().enumerate() {
        let (ch, p) = (i / (h * w), i % (h * w));
        pixels[p * c + ch] = (v.to_f64_lossy().clamp(0.0, 1.0) * 255.0).round() as u8;
    }
    fs::write(path, Raster { kind, width: w, height: h, pixels }.encode())?;
    Ok(())
}

pub fn save_mask(path: impl AsRef<Path>, labels: &[u8], height: usize, width: usize) -> Result<()> {
    fs::write(path, Raster::gray(width, height, labels.to_vec()).encode())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn p5_bytes_scale_to_unit_range() {
        let bytes = b"P5\n2 2\n255\n\x00\xff\x80\x40";
        let r = Raster::parse(bytes).unwrap();
        let t = image_tensor::<f64>(&r);
        assert_eq!(t.shape(), [1, 2, 2]);
        assert_eq!(t.data(), [0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    }

    #[test]
    fn write_then_read_is_identical() {
        let r = Raster::rgb(2, 1, vec![1, 2, 3, 4, 5, 6]);
        let bytes = r.encode();
        assert_eq!(Raster::parse(&bytes).unwrap(), r);
        assert_eq!(Raster::parse(&bytes).unwrap().encode(), bytes);
    }

    #[test]
    fn p6_is_rgb_interleaved() {
        let bytes = b"P6 1 1 255\n\x0a\x14\x1e";
        let t = image_tensor::<f64>(&Raster::parse(bytes).unwrap());
        assert_eq!(t.shape(), [3, 1, 1]);
        assert_eq!(t.data(), [10.0 / 255.0, 20.0 / 255.0, 30.0 / 255.0]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let r = Raster::parse(b"P5\n# made by hand\n1 1\n255\n\x07").unwrap();
        assert_eq!(r.pixels, [7]);
    }

    #[test]
    fn bad_headers_are_rejected() {
        assert!(matches!(Raster::parse(b"P2\n1 1\n255\n0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(Raster::parse(b"P5\n1 x\n255\n0"), Err(Error::CorruptHeader(_))));
        assert!(matches!(Raster::parse(b"P5\n1 1\n65535\n00"), Err(Error::CorruptHeader(_))));
        assert!(matches!(Raster::parse(b"P5\n2 2\n255\n\x00"), Err(Error::CorruptHeader(_))));
    }
}
