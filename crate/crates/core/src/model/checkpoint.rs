//! Versioned little-endian checkpoint.
//!
//! Layout (all integers `u32` unless noted, all reals `f64`):
//!
//! ```text
//! magic        8 bytes  "PEBALCKP"
//! version      u32      = 1
//! channels     C
//! filters      K
//! kernel       k
//! inlier       Y
//! head_out     Y or Y + 1
//! seed         u64      extractor seed
//! filters      K·k·k·C  [filter][row][col][channel]
//! filter bias  K
//! feat mean    K
//! feat std     K
//! head W       K·head_out, row-major [feature][class]
//! head b       head_out
//! ```

use std::fs;
use std::path::Path;

use crate::error::{PebalError, Result};
use crate::model::{ClassificationHead, FeatureExtractor};

pub const MAGIC: &[u8; 8] = b"PEBALCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub extractor: FeatureExtractor,
    pub head: ClassificationHead,
    pub num_inlier_classes: usize,
}

impl Checkpoint {
    pub fn new(
        extractor: FeatureExtractor,
        head: ClassificationHead,
        num_inlier_classes: usize,
    ) -> Result<Self> {
        if head.in_dim() != extractor.num_filters() {
            return Err(PebalError::arg(
                "head input does not match extractor output",
            ));
        }
        if head.out_dim() != num_inlier_classes && head.out_dim() != num_inlier_classes + 1 {
            return Err(PebalError::arg(format!(
                "head with {} outputs cannot serve {} inlier classes",
                head.out_dim(),
                num_inlier_classes
            )));
        }
        Ok(Self {
            extractor,
            head,
            num_inlier_classes,
        })
    }

    /// True when the head carries the abstention output.
    pub fn has_abstention(&self) -> bool {
        self.head.out_dim() == self.num_inlier_classes + 1
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let ex = &self.extractor;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for v in [
            VERSION,
            ex.channels() as u32,
            ex.num_filters() as u32,
            ex.kernel_size() as u32,
            self.num_inlier_classes as u32,
            self.head.out_dim() as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&ex.seed().to_le_bytes());
        for block in [
            ex.weights(),
            ex.bias(),
            ex.mean(),
            ex.std(),
            self.head.weights(),
            self.head.biases(),
        ] {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(PebalError::arg("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(PebalError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let c = r.u32()? as usize;
        let k = r.u32()? as usize;
        let ks = r.u32()? as usize;
        let y = r.u32()? as usize;
        let out = r.u32()? as usize;
        let seed = r.u64()?;
        let weights = r.f64s(k * ks * ks * c)?;
        let bias = r.f64s(k)?;
        let mean = r.f64s(k)?;
        let std = r.f64s(k)?;
        let head_w = r.f64s(k * out)?;
        let head_b = r.f64s(out)?;
        if r.pos != bytes.len() {
            return Err(PebalError::arg("trailing bytes after checkpoint"));
        }
        let extractor = FeatureExtractor::from_parts(c, k, ks, seed, weights, bias, mean, std)?;
        let head = ClassificationHead::from_parts(k, out, head_w, head_b)?;
        Self::new(extractor, head, y)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| PebalError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| PebalError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            PebalError::InvalidArgument(msg) => PebalError::format(path, msg),
            other => other,
        })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| PebalError::arg("checkpoint truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| PebalError::arg("bad size"))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect())
    }
}
