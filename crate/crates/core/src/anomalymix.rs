//! AnomalyMix: cut mask-delimited outlier objects and paste them into inlier
//! scenes, labelling the pasted pixels with the anomaly class `Y + 1`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{PebalError, Result};
use crate::grid::{LabeledSample, Mask, PixelGrid};
use crate::netpbm::{read_image, read_mask, write_image, write_mask};
use crate::parallel::{derive_seed, par_map_range};

/// A cut-out object: RGB patch, tight boolean mask and an identifier whose
/// prefix names the shape family.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierObject {
    patch: PixelGrid,
    mask: Mask,
    shape_id: String,
}

impl OutlierObject {
    pub fn new(patch: PixelGrid, mask: Mask, shape_id: impl Into<String>) -> Result<Self> {
        if patch.height() != mask.height || patch.width() != mask.width {
            return Err(PebalError::arg("patch and mask dimensions differ"));
        }
        if mask.popcount() == 0 {
            return Err(PebalError::arg("object mask is empty"));
        }
        let (h, w) = (mask.height, mask.width);
        let row_hit = |r: usize| (0..w).any(|c| mask.get(r, c));
        let col_hit = |c: usize| (0..h).any(|r| mask.get(r, c));
        if !(row_hit(0) && row_hit(h - 1) && col_hit(0) && col_hit(w - 1)) {
            return Err(PebalError::arg(
                "object mask is not tight to its bounding box",
            ));
        }
        Ok(Self {
            patch,
            mask,
            shape_id: shape_id.into(),
        })
    }

    pub fn patch(&self) -> &PixelGrid {
        &self.patch
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn shape_id(&self) -> &str {
        &self.shape_id
    }

    /// `(height, width)` of the tight bounding box.
    pub fn bbox(&self) -> (usize, usize) {
        (self.mask.height, self.mask.width)
    }

    /// Family tag: everything before the first `:` of the shape id.
    pub fn family(&self) -> &str {
        self.shape_id.split(':').next().unwrap_or("")
    }
}

/// Tight-bbox crop of `image` and `mask`.
pub fn cut_object(
    image: &PixelGrid,
    mask: &Mask,
    shape_id: impl Into<String>,
) -> Result<OutlierObject> {
    if image.height() != mask.height || image.width() != mask.width {
        return Err(PebalError::arg("image and mask dimensions differ"));
    }
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..mask.height {
        for c in 0..mask.width {
            if mask.get(r, c) {
                let b = bounds.get_or_insert((r, r, c, c));
                b.0 = b.0.min(r);
                b.1 = b.1.max(r);
                b.2 = b.2.min(c);
                b.3 = b.3.max(c);
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or_else(|| PebalError::arg("cannot cut an empty mask"))?;
    let (h, w) = (r1 - r0 + 1, c1 - c0 + 1);
    let patch = PixelGrid::from_fn(h, w, image.depth(), |r, c, ch| {
        image.get(r0 + r, c0 + c, ch)
    });
    let crop = Mask::from_fn(h, w, |r, c| mask.get(r0 + r, c0 + c));
    OutlierObject::new(patch, crop, shape_id)
}

/// Scaled size under nearest-neighbour resampling.
pub fn scaled_size(bbox: (usize, usize), scale: f64) -> (usize, usize) {
    let f = |n: usize| ((n as f64 * scale).round() as usize).max(1);
    (f(bbox.0), f(bbox.1))
}

/// Nearest-neighbour resample (and optional horizontal flip) of the object.
fn transform(object: &OutlierObject, scale: f64, hflip: bool) -> (PixelGrid, Mask) {
    let (h, w) = object.bbox();
    let (sh, sw) = scaled_size((h, w), scale);
    let src = |r: usize, c: usize| {
        let sr = ((r as f64 + 0.5) * h as f64 / sh as f64) as usize;
        let c = if hflip { sw - 1 - c } else { c };
        let sc = ((c as f64 + 0.5) * w as f64 / sw as f64) as usize;
        (sr.min(h - 1), sc.min(w - 1))
    };
    let patch = PixelGrid::from_fn(sh, sw, object.patch.depth(), |r, c, ch| {
        let (sr, sc) = src(r, c);
        object.patch.get(sr, sc, ch)
    });
    let mask = Mask::from_fn(sh, sw, |r, c| {
        let (sr, sc) = src(r, c);
        object.mask.get(sr, sc)
    });
    (patch, mask)
}

/// Pastes the (scaled, optionally flipped) object with its top-left corner at
/// `location`. Pixels under the mask take the patch colour and label `Y + 1`;
/// nothing else changes.
pub fn paste(
    sample: &LabeledSample,
    object: &OutlierObject,
    location: (usize, usize),
    scale: f64,
    hflip: bool,
) -> Result<LabeledSample> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(PebalError::arg(format!(
            "paste scale must be positive, got {scale}"
        )));
    }
    if object.patch.depth() != sample.image.depth() {
        return Err(PebalError::arg("object and image channel counts differ"));
    }
    let (sh, sw) = scaled_size(object.bbox(), scale);
    let (row, col) = location;
    if row + sh > sample.image.height() || col + sw > sample.image.width() {
        return Err(PebalError::arg(format!(
            "{sh}x{sw} object at ({row}, {col}) does not fit a {}x{} image",
            sample.image.height(),
            sample.image.width()
        )));
    }
    let (patch, mask) = transform(object, scale, hflip);
    let mut out = sample.clone();
    let anomaly = out.labels.anomaly_label();
    for r in 0..sh {
        for c in 0..sw {
            if !mask.get(r, c) {
                continue;
            }
            let width = out.image.width();
            out.image
                .pixel_mut((row + r) * width + col + c)
                .copy_from_slice(patch.pixel(r * sw + c));
            out.labels.set(row + r, col + c, anomaly);
        }
    }
    Ok(out)
}

/// Placement preference: with probability `probability` the object centre is
/// put on a pixel carrying `label`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub label: u8,
    pub probability: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixPolicy {
    pub scale_range: (f64, f64),
    pub allow_hflip: bool,
    pub max_paste_attempts: usize,
    /// Inclusive range of objects per mixed image.
    pub paste_per_image: (usize, usize),
    pub mix_probability: f64,
    /// Upper bound on the anomaly pixel fraction of any output image.
    pub max_anomaly_fraction: f64,
    pub anchor: Option<Anchor>,
}

impl Default for MixPolicy {
    fn default() -> Self {
        Self {
            scale_range: (0.5, 2.0),
            allow_hflip: true,
            max_paste_attempts: 20,
            paste_per_image: (1, 3),
            mix_probability: 1.0,
            max_anomaly_fraction: 0.25,
            anchor: None,
        }
    }
}

impl MixPolicy {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(PebalError::arg(format!(
                "scale range must satisfy 0 < lo <= hi, got [{lo}, {hi}]"
            )));
        }
        if self.paste_per_image.0 > self.paste_per_image.1 {
            return Err(PebalError::arg("paste_per_image range is reversed"));
        }
        if !(0.0..=1.0).contains(&self.mix_probability) {
            return Err(PebalError::arg("mix_probability must lie in [0, 1]"));
        }
        if !(self.max_anomaly_fraction > 0.0 && self.max_anomaly_fraction <= 1.0) {
            return Err(PebalError::arg("max_anomaly_fraction must lie in (0, 1]"));
        }
        if self.max_paste_attempts == 0 {
            return Err(PebalError::arg("max_paste_attempts must be at least 1"));
        }
        if let Some(a) = self.anchor {
            if !(0.0..=1.0).contains(&a.probability) {
                return Err(PebalError::arg("anchor probability must lie in [0, 1]"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub object_index: usize,
    pub shape_id: String,
    pub row: usize,
    pub col: usize,
    pub scale: f64,
    pub hflip: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixOutput {
    pub samples: Vec<LabeledSample>,
    /// Accepted placements per output sample.
    pub placements: Vec<Vec<Placement>>,
    /// Objects dropped after exhausting their paste attempts.
    pub skipped: usize,
}

/// Tries to paste one randomly chosen object into `sample`.
fn try_paste(
    sample: &LabeledSample,
    objects: &[OutlierObject],
    policy: &MixPolicy,
    rng: &mut ChaCha8Rng,
) -> Option<(LabeledSample, Placement)> {
    let (h, w) = (sample.image.height(), sample.image.width());
    let cap = (policy.max_anomaly_fraction * (h * w) as f64).floor() as usize;
    let object_index = rng.random_range(0..objects.len());
    let object = &objects[object_index];
    let anchor_pixels: Vec<usize> = match policy.anchor {
        Some(a) => sample
            .labels
            .as_slice()
            .iter()
            .enumerate()
            .filter(|&(_, &l)| l == a.label)
            .map(|(i, _)| i)
            .collect(),
        None => Vec::new(),
    };
    for _ in 0..policy.max_paste_attempts {
        let (lo, hi) = policy.scale_range;
        let scale = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        let hflip = policy.allow_hflip && rng.random_bool(0.5);
        let (sh, sw) = scaled_size(object.bbox(), scale);
        if sh > h || sw > w {
            continue;
        }
        let anchored = policy
            .anchor
            .is_some_and(|a| !anchor_pixels.is_empty() && rng.random_bool(a.probability));
        let (row, col) = if anchored {
            let p = anchor_pixels[rng.random_range(0..anchor_pixels.len())];
            let (cr, cc) = (p / w, p % w);
            (
                (cr as isize - (sh / 2) as isize).clamp(0, (h - sh) as isize) as usize,
                (cc as isize - (sw / 2) as isize).clamp(0, (w - sw) as isize) as usize,
            )
        } else {
            (rng.random_range(0..=h - sh), rng.random_range(0..=w - sw))
        };
        let Ok(out) = paste(sample, object, (row, col), scale, hflip) else {
            continue;
        };
        let before = sample.labels.anomaly_count();
        let after = out.labels.anomaly_count();
        if after == before || after > cap {
            continue;
        }
        let placement = Placement {
            object_index,
            shape_id: object.shape_id.clone(),
            row,
            col,
            scale,
            hflip,
        };
        return Some((out, placement));
    }
    None
}

/// Mixes one inlier sample with `rng`; returns the result, its placements and
/// the number of skipped objects.
pub fn mix_sample(
    sample: &LabeledSample,
    objects: &[OutlierObject],
    policy: &MixPolicy,
    rng: &mut ChaCha8Rng,
) -> (LabeledSample, Vec<Placement>, usize) {
    let mut current = sample.clone();
    let mut placements = Vec::new();
    let mut skipped = 0;
    if !rng.random_bool(policy.mix_probability) {
        return (current, placements, 0);
    }
    let (lo, hi) = policy.paste_per_image;
    let count = rng.random_range(lo..=hi);
    for _ in 0..count {
        match try_paste(&current, objects, policy, rng) {
            Some((next, p)) => {
                current = next;
                placements.push(p);
            }
            None => skipped += 1,
        }
    }
    (current, placements, skipped)
}

/// Builds the outlier set: each inlier sample is mixed independently with a
/// seed derived from `(seed, index)`.
pub fn make_outlier_set(
    inliers: &[LabeledSample],
    objects: &[OutlierObject],
    policy: &MixPolicy,
    seed: u64,
) -> Result<MixOutput> {
    policy.validate()?;
    if objects.is_empty() {
        return Err(PebalError::arg("object pool is empty"));
    }
    let mixed = par_map_range(inliers.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        mix_sample(&inliers[i], objects, policy, &mut rng)
    });
    let mut out = MixOutput {
        samples: Vec::with_capacity(inliers.len()),
        placements: Vec::with_capacity(inliers.len()),
        skipped: 0,
    };
    for (s, p, k) in mixed {
        out.samples.push(s);
        out.placements.push(p);
        out.skipped += k;
    }
    Ok(out)
}

const POOL_INDEX: &str = "pool.tsv";

fn file_stem(shape_id: &str) -> String {
    shape_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `<stem>.ppm` + `<stem>.pgm` per object and a `pool.tsv` index.
pub fn save_pool(dir: &Path, objects: &[OutlierObject]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| PebalError::io(dir, e))?;
    let mut index = String::from("shape_id\tfile\n");
    for (i, o) in objects.iter().enumerate() {
        let stem = format!("{i:04}_{}", file_stem(&o.shape_id));
        write_image(&dir.join(format!("{stem}.ppm")), &o.patch)?;
        write_mask(&dir.join(format!("{stem}.pgm")), &o.mask)?;
        writeln!(index, "{}\t{stem}", o.shape_id).expect("string write");
    }
    let path = dir.join(POOL_INDEX);
    fs::write(&path, index).map_err(|e| PebalError::io(&path, e))
}

pub fn load_pool(dir: &Path) -> Result<Vec<OutlierObject>> {
    let path = dir.join(POOL_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| PebalError::io(&path, e))?;
    let mut objects = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        let Some((shape_id, stem)) = line.split_once('\t') else {
            return Err(PebalError::format(
                &path,
                format!("line {}: expected 2 columns", n + 1),
            ));
        };
        let patch = read_image(&dir.join(format!("{stem}.ppm")))?;
        let mask = read_mask(&dir.join(format!("{stem}.pgm")))?;
        let object = OutlierObject::new(patch, mask, shape_id)
            .map_err(|e| PebalError::format(dir.join(format!("{stem}.pgm")), e.to_string()))?;
        objects.push(object);
    }
    Ok(objects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::LabelMap;

    fn scene(h: usize, w: usize) -> LabeledSample {
        let image = PixelGrid::from_fn(h, w, 3, |r, c, ch| {
            ((r * 7 + c * 3 + ch) % 11) as f64 / 10.0
        });
        let labels =
            LabelMap::new(h, w, 4, (0..h * w).map(|i| (i % 4) as u8 + 1).collect()).unwrap();
        LabeledSample::new(image, labels).unwrap()
    }

    fn l_object() -> OutlierObject {
        // L shape in a 3x2 box
        let mask = Mask::new(3, 2, vec![true, false, true, false, true, true]).unwrap();
        let patch = PixelGrid::from_fn(3, 2, 3, |r, c, ch| {
            0.1 * (r * 2 + c) as f64 + 0.01 * ch as f64
        });
        OutlierObject::new(patch, mask, "A:ell:0").unwrap()
    }

    #[test]
    fn cut_full_single_and_l_masks() {
        let img = scene(4, 5).image;
        let full = cut_object(&img, &Mask::from_fn(4, 5, |_, _| true), "x").unwrap();
        assert_eq!(full.patch(), &img);
        let one = cut_object(&img, &Mask::from_fn(4, 5, |r, c| r == 2 && c == 3), "x").unwrap();
        assert_eq!(one.bbox(), (1, 1));
        assert_eq!(one.patch().pixel(0), img.pixel(2 * 5 + 3));
        let l = Mask::from_fn(4, 5, |r, c| {
            (c == 1 && (1..=3).contains(&r)) || (r == 3 && c == 2)
        });
        let o = cut_object(&img, &l, "x").unwrap();
        assert_eq!(o.bbox(), (3, 2));
        assert_eq!(o.mask().popcount(), l.popcount());
        assert!(cut_object(&img, &Mask::from_fn(4, 5, |_, _| false), "x").is_err());
    }

    #[test]
    fn object_invariants_enforced() {
        let loose = Mask::new(2, 2, vec![true, false, false, false]).unwrap();
        assert!(OutlierObject::new(PixelGrid::zeros(2, 2, 3), loose, "x").is_err());
        let ok = Mask::new(2, 2, vec![true, false, false, true]).unwrap();
        assert!(OutlierObject::new(PixelGrid::zeros(2, 3, 3), ok.clone(), "x").is_err());
        assert_eq!(
            OutlierObject::new(PixelGrid::zeros(2, 2, 3), ok, "B:cross:1")
                .unwrap()
                .family(),
            "B"
        );
    }

    #[test]
    fn paste_at_unit_scale_is_verbatim() {
        let s = scene(6, 6);
        let o = l_object();
        let out = paste(&s, &o, (2, 3), 1.0, false).unwrap();
        assert_eq!(out.labels.anomaly_count(), o.mask().popcount());
        for r in 0..6 {
            for c in 0..6 {
                let inside =
                    (2..5).contains(&r) && (3..5).contains(&c) && o.mask().get(r - 2, c - 3);
                if inside {
                    assert_eq!(out.labels.get(r, c), 5);
                    assert_eq!(
                        out.image.pixel(r * 6 + c),
                        o.patch().pixel((r - 2) * 2 + c - 3)
                    );
                } else {
                    assert_eq!(out.labels.get(r, c), s.labels.get(r, c));
                    assert_eq!(out.image.pixel(r * 6 + c), s.image.pixel(r * 6 + c));
                }
            }
        }
    }

    #[test]
    fn paste_counts_scaled_mask_and_unions_disjoint_objects() {
        let s = scene(10, 10);
        let o = l_object();
        let patch_mask = transform(&o, 2.0, true).1;
        let out = paste(&s, &o, (0, 0), 2.0, true).unwrap();
        assert_eq!(out.labels.anomaly_count(), patch_mask.popcount());
        let twice = paste(&out, &o, (7, 7), 1.0, false).unwrap();
        assert_eq!(
            twice.labels.anomaly_count(),
            patch_mask.popcount() + o.mask().popcount()
        );
        assert!(paste(&s, &o, (8, 0), 1.0, false).is_err());
        assert!(paste(&s, &o, (0, 9), 1.0, false).is_err());
    }

    #[test]
    fn hflip_mirrors_the_mask() {
        let o = l_object();
        let (_, m) = transform(&o, 1.0, true);
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(m.get(r, c), o.mask().get(r, 1 - c));
            }
        }
    }

    #[test]
    fn zero_mix_probability_is_identity() {
        let inl: Vec<_> = (0..4).map(|_| scene(8, 8)).collect();
        let policy = MixPolicy {
            mix_probability: 0.0,
            ..MixPolicy::default()
        };
        let out = make_outlier_set(&inl, &[l_object()], &policy, 3).unwrap();
        assert_eq!(out.samples, inl);
        assert!(out.samples.iter().all(|s| s.labels.anomaly_count() == 0));
    }

    #[test]
    fn outlier_set_is_deterministic_and_capped() {
        let inl: Vec<_> = (0..12).map(|_| scene(16, 16)).collect();
        let policy = MixPolicy::default();
        let a = make_outlier_set(&inl, &[l_object()], &policy, 9).unwrap();
        let b = make_outlier_set(&inl, &[l_object()], &policy, 9).unwrap();
        assert_eq!(a, b);
        for (s, src) in a.samples.iter().zip(&inl) {
            assert!(s.anomaly_fraction() <= 0.25);
            assert!(s.labels.anomaly_count() > 0);
            for i in 0..256 {
                if s.labels.as_slice()[i] != 5 {
                    assert_eq!(s.labels.as_slice()[i], src.labels.as_slice()[i]);
                    assert_eq!(s.image.pixel(i), src.image.pixel(i));
                }
            }
        }
    }

    #[test]
    fn oversized_objects_are_skipped_and_counted() {
        let inl = vec![scene(4, 4)];
        let big = OutlierObject::new(
            PixelGrid::zeros(6, 6, 3),
            Mask::from_fn(6, 6, |_, _| true),
            "A:r:0",
        )
        .unwrap();
        let policy = MixPolicy {
            scale_range: (1.0, 1.0),
            paste_per_image: (2, 2),
            ..MixPolicy::default()
        };
        let out = make_outlier_set(&inl, &[big], &policy, 0).unwrap();
        assert_eq!(out.skipped, 2);
        assert_eq!(out.samples[0], inl[0]);
    }

    #[test]
    fn anchored_placements_cover_the_anchor_label() {
        let h = 32;
        let image = PixelGrid::zeros(h, h, 3);
        let labels = LabelMap::new(
            h,
            h,
            4,
            (0..h * h)
                .map(|i| if i / h >= 24 { 3 } else { 1 })
                .collect(),
        )
        .unwrap();
        let s = LabeledSample::new(image, labels).unwrap();
        let policy = MixPolicy {
            anchor: Some(Anchor {
                label: 3,
                probability: 1.0,
            }),
            scale_range: (1.0, 1.0),
            paste_per_image: (1, 1),
            ..MixPolicy::default()
        };
        let out = make_outlier_set(&vec![s; 20], &[l_object()], &policy, 1).unwrap();
        for p in out.placements.iter().flatten() {
            assert!(p.row + 1 >= 24, "{p:?}");
        }
    }

    #[test]
    fn pool_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut o = l_object();
        o.patch = o.patch.map(|v| (v * 255.0).round() / 255.0);
        save_pool(dir.path(), &[o.clone(), o.clone()]).unwrap();
        let back = load_pool(dir.path()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].mask(), o.mask());
        assert_eq!(back[0].shape_id(), "A:ell:0");
        for (a, b) in back[0].patch().as_slice().iter().zip(o.patch().as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
