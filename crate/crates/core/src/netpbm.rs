//! Binary Netpbm I/O: PGM (P5) and PPM (P6), 8 bits per sample.
//!
//! Images are stored as `[0, 1]` doubles in memory and quantized to
//! `round(255 v)` on disk. Label maps keep the raw label integer per pixel
//! with [`IGNORE`](crate::grid::IGNORE) written as 255. Masks are written as
//! 0 / 255.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, Mask, PixelGrid};

/// Raw 8-bit raster as read from or written to disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub maxval: u16,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = match self.channels {
            1 => "P5",
            3 => "P6",
            n => panic!("unsupported channel count {n}"),
        };
        let mut out = format!(
            "{}\n{} {}\n{}\n",
            magic, self.width, self.height, self.maxval
        )
        .into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cursor = Header { bytes, pos: 0 };
        let magic = cursor.token(path)?;
        let channels = match magic.as_str() {
            "P5" => 1,
            "P6" => 3,
            other => {
                return Err(PebalError::format(
                    path,
                    format!("unsupported magic {other:?} (expected P5 or P6)"),
                ))
            }
        };
        let width = cursor.number(path, "width")?;
        let height = cursor.number(path, "height")?;
        let maxval = cursor.number(path, "maxval")?;
        if maxval == 0 || maxval > 255 {
            return Err(PebalError::format(
                path,
                format!("maxval {maxval} is not an 8-bit depth"),
            ));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(cursor.pos) {
            Some(b) if b.is_ascii_whitespace() => cursor.pos += 1,
            _ => return Err(PebalError::format(path, "missing separator after maxval")),
        }
        let expected = width * height * channels;
        let body = &bytes[cursor.pos..];
        if body.len() < expected {
            return Err(PebalError::format(
                path,
                format!("raster truncated: {} of {} bytes", body.len(), expected),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            maxval: maxval as u16,
            data: body[..expected].to_vec(),
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PebalError::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| PebalError::io(path, e))?;
        f.write_all(&self.encode())
            .map_err(|e| PebalError::io(path, e))
    }
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self, path: &Path) -> Result<String> {
        self.skip_space_and_comments();
        let start = self.pos;
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() || b == b'#' {
                break;
            }
            self.pos += 1;
        }
        if start == self.pos {
            return Err(PebalError::format(path, "unexpected end of header"));
        }
        Ok(String::from_utf8_lossy(&self.bytes[start..self.pos]).into_owned())
    }

    fn number(&mut self, path: &Path, what: &str) -> Result<usize> {
        let tok = self.token(path)?;
        tok.parse()
            .map_err(|_| PebalError::format(path, format!("bad {what} {tok:?}")))
    }
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB or grayscale image (values in `[0, 1]`) to a raster.
pub fn image_to_raster(image: &PixelGrid) -> Result<Raster> {
    if image.depth() != 1 && image.depth() != 3 {
        return Err(PebalError::arg(format!(
            "only 1- or 3-channel images can be written, got depth {}",
            image.depth()
        )));
    }
    Ok(Raster {
        width: image.width(),
        height: image.height(),
        channels: image.depth(),
        maxval: 255,
        data: image.as_slice().iter().map(|&v| quantize(v)).collect(),
    })
}

pub fn raster_to_image(raster: &Raster) -> PixelGrid {
    let scale = raster.maxval as f64;
    let data = raster.data.iter().map(|&b| b as f64 / scale).collect();
    PixelGrid::from_vec(raster.height, raster.width, raster.channels, data)
        .expect("raster dimensions are consistent")
}

pub fn write_image(path: &Path, image: &PixelGrid) -> Result<()> {
    image_to_raster(image)?.write(path)
}

pub fn read_image(path: &Path) -> Result<PixelGrid> {
    Ok(raster_to_image(&Raster::read(path)?))
}

pub fn labels_to_raster(labels: &LabelMap) -> Raster {
    Raster {
        width: labels.width(),
        height: labels.height(),
        channels: 1,
        maxval: 255,
        data: labels.as_slice().to_vec(),
    }
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    labels_to_raster(labels).write(path)
}

pub fn read_labels(path: &Path, num_inlier_classes: u8) -> Result<LabelMap> {
    let raster = Raster::read(path)?;
    if raster.channels != 1 {
        return Err(PebalError::format(path, "label maps must be PGM"));
    }
    LabelMap::new(raster.height, raster.width, num_inlier_classes, raster.data)
        .map_err(|e| PebalError::format(path, e.to_string()))
}

pub fn write_mask(path: &Path, mask: &Mask) -> Result<()> {
    Raster {
        width: mask.width,
        height: mask.height,
        channels: 1,
        maxval: 255,
        data: mask.bits.iter().map(|&b| if b { 255 } else { 0 }).collect(),
    }
    .write(path)
}

pub fn read_mask(path: &Path) -> Result<Mask> {
    let raster = Raster::read(path)?;
    if raster.channels != 1 {
        return Err(PebalError::format(path, "masks must be PGM"));
    }
    Mask::new(
        raster.height,
        raster.width,
        raster.data.iter().map(|&b| b >= 128).collect(),
    )
}

/// Affine rescale of a score map to `0..=255`; returns the raster and the
/// `(min, max)` it was scaled from.
pub fn score_map_to_raster(map: &PixelGrid) -> Result<(Raster, (f64, f64))> {
    if map.depth() != 1 {
        return Err(PebalError::arg("score maps must be single-channel"));
    }
    let (lo, hi) = (map.min(), map.max());
    let span = hi - lo;
    let data = map
        .as_slice()
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    Ok((
        Raster {
            width: map.width(),
            height: map.height(),
            channels: 1,
            maxval: 255,
            data,
        },
        (lo, hi),
    ))
}
