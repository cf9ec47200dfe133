//! Procedural driving scenes and disjoint outlier object families.
//!
//! A scene is a sky band with a skyline of structures above a horizon, and a
//! road trapezoid flanked by shoulder below it. Training outliers come from
//! shape family `A` (ellipses, rectangles and their unions in warm colours);
//! test anomalies come from family `B` (crosses, rings, blobs in a second
//! palette). Families never share a shape id prefix.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::anomalymix::{
    cut_object, load_pool, mix_sample, save_pool, Anchor, MixPolicy, OutlierObject, Placement,
};
use crate::error::{PebalError, Result};
use crate::grid::{LabelMap, LabeledSample, Mask, PixelGrid};
use crate::netpbm::{read_image, read_labels, write_image, write_labels};
use crate::parallel::{derive_seed, par_map_range};

pub type Rgb = [f64; 3];

/// Semantic role of an inlier class in the layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Sky,
    Structure,
    Road,
    Shoulder,
    /// Painted edge lines along the road borders.
    Marking,
}

/// Roles of classes `1..=Y` for the supported class counts.
pub fn roles_for(num_inlier_classes: usize) -> Result<Vec<Role>> {
    use Role::*;
    match num_inlier_classes {
        3 => Ok(vec![Sky, Road, Shoulder]),
        4 => Ok(vec![Sky, Structure, Road, Shoulder]),
        5 => Ok(vec![Sky, Structure, Road, Shoulder, Marking]),
        y => Err(PebalError::arg(format!(
            "the scene layout places 3 to 5 inlier classes, got {y}"
        ))),
    }
}

fn role_color(role: Role) -> Rgb {
    match role {
        Role::Sky => [0.55, 0.75, 0.95],
        Role::Structure => [0.45, 0.40, 0.38],
        Role::Road => [0.30, 0.30, 0.32],
        Role::Shoulder => [0.30, 0.55, 0.25],
        Role::Marking => [0.85, 0.85, 0.80],
    }
}

/// Family `A`: warm, saturated colours (training outliers).
pub const PALETTE_A: [Rgb; 4] = [
    [0.85, 0.12, 0.10],
    [0.95, 0.55, 0.10],
    [0.80, 0.10, 0.60],
    [0.60, 0.05, 0.12],
];

/// Family `B`: test anomalies, disjoint from both the inlier palette and `A`.
pub const PALETTE_B: [Rgb; 5] = [
    [0.95, 0.90, 0.15],
    [0.10, 0.85, 0.85],
    [0.97, 0.97, 0.97],
    [0.10, 0.15, 0.80],
    [0.05, 0.05, 0.05],
];

/// Uniform ranges of the random layout parameters. Fractions are relative to
/// the image height (vertical) or width (horizontal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    pub horizon: (f64, f64),
    /// Building height as a fraction of the horizon row.
    pub building_height: (f64, f64),
    /// Building width in pixels.
    pub building_width: (usize, usize),
    pub gap_probability: f64,
    pub road_center_offset: (f64, f64),
    pub road_top_half_width: (f64, f64),
    pub road_bottom_half_width: (f64, f64),
    /// Edge line width in pixels at the bottom row; shrinks linearly to a
    /// third of that at the horizon.
    pub line_width: (f64, f64),
}

impl Default for Layout {
    fn default() -> Self {
        Self {
            horizon: (0.38, 0.5),
            building_height: (0.25, 0.9),
            building_width: (4, 12),
            gap_probability: 0.2,
            road_center_offset: (-0.1, 0.1),
            road_top_half_width: (0.04, 0.1),
            road_bottom_half_width: (0.28, 0.4),
            line_width: (1.5, 3.0),
        }
    }
}

fn mean(r: (f64, f64)) -> f64 {
    0.5 * (r.0 + r.1)
}

fn draw(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub num_inlier_classes: u8,
    pub noise_sigma: f64,
    /// Mean RGB of classes `1..=Y`.
    pub palette: Vec<Rgb>,
    pub layout: Layout,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self::with_classes(4).expect("4 classes are supported")
    }
}

impl SceneSpec {
    pub fn with_classes(num_inlier_classes: u8) -> Result<Self> {
        let roles = roles_for(num_inlier_classes as usize)?;
        Ok(Self {
            height: 64,
            width: 64,
            num_inlier_classes,
            noise_sigma: 0.05,
            palette: roles.into_iter().map(role_color).collect(),
            layout: Layout::default(),
        })
    }

    pub fn roles(&self) -> Result<Vec<Role>> {
        roles_for(self.num_inlier_classes as usize)
    }

    pub fn validate(&self) -> Result<()> {
        let roles = self.roles()?;
        if self.palette.len() != roles.len() {
            return Err(PebalError::arg(format!(
                "palette has {} colours for {} classes",
                self.palette.len(),
                roles.len()
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(PebalError::arg(
                "noise_sigma must be finite and non-negative",
            ));
        }
        for (i, a) in self.palette.iter().enumerate() {
            if a.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PebalError::arg(format!(
                    "palette colour {} outside [0, 1]",
                    i + 1
                )));
            }
            for (j, b) in self.palette.iter().enumerate().skip(i + 1) {
                let d = dist(a, b);
                if d < 3.0 * self.noise_sigma {
                    return Err(PebalError::arg(format!(
                        "palette colours {} and {} are {d:.3} apart, below 3 sigma",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        if self.height < 8 || self.width < 8 {
            return Err(PebalError::arg("scenes must be at least 8x8"));
        }
        let l = &self.layout;
        let ordered = |r: (f64, f64)| r.0 <= r.1;
        if !(ordered(l.horizon)
            && ordered(l.building_height)
            && ordered(l.road_center_offset)
            && ordered(l.road_top_half_width)
            && ordered(l.road_bottom_half_width)
            && ordered(l.line_width)
            && l.building_width.0 >= 1
            && l.building_width.0 <= l.building_width.1
            && (0.0..1.0).contains(&l.gap_probability)
            && l.horizon.0 > 0.0
            && l.horizon.1 < 1.0)
        {
            return Err(PebalError::arg("inconsistent layout ranges"));
        }
        Ok(())
    }

    /// Class pixel fractions of the layout with every random parameter at its
    /// mean. Areas are products of independent parameters, so these are the
    /// expected fractions up to pixel rounding.
    pub fn expected_class_fractions(&self) -> Result<Vec<f64>> {
        let roles = self.roles()?;
        let l = &self.layout;
        let horizon = mean(l.horizon);
        let ground = 1.0 - horizon;
        let structure = if roles.contains(&Role::Structure) {
            horizon * (1.0 - l.gap_probability) * mean(l.building_height)
        } else {
            0.0
        };
        let road_all = ground * (mean(l.road_top_half_width) + mean(l.road_bottom_half_width));
        let marking = if roles.contains(&Role::Marking) {
            // two lines whose width grows linearly from w/3 to w over the ground rows
            2.0 * ground * self.height as f64 * (2.0 / 3.0) * mean(l.line_width)
                / (self.height * self.width) as f64
        } else {
            0.0
        };
        Ok(roles
            .iter()
            .map(|r| match r {
                Role::Sky => horizon - structure,
                Role::Structure => structure,
                Role::Road => road_all - marking,
                Role::Marking => marking,
                Role::Shoulder => ground - road_all,
            })
            .collect())
    }
}

fn dist(a: &Rgb, b: &Rgb) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Minimum colour distance between any colour in `a` and any in `b`.
pub fn palette_distance(a: &[Rgb], b: &[Rgb]) -> f64 {
    a.iter()
        .flat_map(|x| b.iter().map(move |y| dist(x, y)))
        .fold(f64::INFINITY, f64::min)
}

const MIN_CLASS_FRACTION: f64 = 0.02;
const MAX_LAYOUT_DRAWS: usize = 64;

fn render_labels(spec: &SceneSpec, roles: &[Role], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let (h, w) = (spec.height, spec.width);
    let l = &spec.layout;
    let class_of = |role: Role| roles.iter().position(|&r| r == role).map(|i| i as u8 + 1);
    let sky = class_of(Role::Sky).expect("sky is always present");
    let structure = class_of(Role::Structure);
    let road = class_of(Role::Road).expect("road is always present");
    let shoulder = class_of(Role::Shoulder).expect("shoulder is always present");
    let marking = class_of(Role::Marking);

    let horizon = ((draw(rng, l.horizon) * h as f64).round() as usize).clamp(1, h - 2);
    let mut skyline = vec![horizon; w];
    if structure.is_some() {
        let mut c = 0;
        while c < w {
            let bw = rng.random_range(l.building_width.0..=l.building_width.1);
            let top = if rng.random_bool(l.gap_probability) {
                horizon
            } else {
                let bh = (draw(rng, l.building_height) * horizon as f64).round() as usize;
                horizon - bh.min(horizon)
            };
            for s in skyline.iter_mut().skip(c).take(bw) {
                *s = top;
            }
            c += bw;
        }
    }
    let cx = (0.5 + draw(rng, l.road_center_offset)) * w as f64;
    let top_half = draw(rng, l.road_top_half_width) * w as f64;
    let bottom_half = draw(rng, l.road_bottom_half_width) * w as f64;
    let line = draw(rng, l.line_width);

    let mut labels = Vec::with_capacity(h * w);
    for r in 0..h {
        for (c, &roof) in skyline.iter().enumerate() {
            let label = if r < horizon {
                match structure {
                    Some(s) if r >= roof => s,
                    _ => sky,
                }
            } else {
                let t = (r - horizon) as f64 / (h - 1 - horizon).max(1) as f64;
                let half = top_half + t * (bottom_half - top_half);
                let d = (c as f64 + 0.5 - cx).abs();
                if d <= half {
                    match marking {
                        Some(m) if d > half - line * (1.0 + 2.0 * t) / 3.0 => m,
                        _ => road,
                    }
                } else {
                    shoulder
                }
            };
            labels.push(label);
        }
    }
    labels
}

/// Renders one scene. Every class covers at least 2% of the pixels; layouts
/// that miss this are redrawn from the same stream.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<LabeledSample> {
    spec.validate()?;
    let roles = spec.roles()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.height * spec.width;
    let min_count = (MIN_CLASS_FRACTION * n as f64).ceil() as usize;
    for _ in 0..MAX_LAYOUT_DRAWS {
        let labels = render_labels(spec, &roles, &mut rng);
        let mut counts = vec![0usize; roles.len()];
        for &l in &labels {
            counts[l as usize - 1] += 1;
        }
        if counts.iter().any(|&c| c < min_count) {
            continue;
        }
        let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
        let mut data = Vec::with_capacity(n * 3);
        for &l in &labels {
            let base = spec.palette[l as usize - 1];
            for v in base {
                let jitter = if spec.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                data.push((v + jitter).clamp(0.0, 1.0));
            }
        }
        let image = PixelGrid::from_vec(spec.height, spec.width, 3, data)?;
        let labels = LabelMap::new(spec.height, spec.width, spec.num_inlier_classes, labels)?;
        return LabeledSample::new(image, labels);
    }
    Err(PebalError::arg(format!(
        "layout could not give every class {:.0}% of a {}x{} scene",
        MIN_CLASS_FRACTION * 100.0,
        spec.height,
        spec.width
    )))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Train,
    Test,
}

impl PoolKind {
    pub fn family(self) -> &'static str {
        match self {
            PoolKind::Train => "A",
            PoolKind::Test => "B",
        }
    }

    pub fn palette(self) -> &'static [Rgb] {
        match self {
            PoolKind::Train => &PALETTE_A,
            PoolKind::Test => &PALETTE_B,
        }
    }
}

/// Object canvas side length range in pixels.
const OBJECT_SIZE: (usize, usize) = (6, 14);
const OBJECT_COLOR_JITTER: f64 = 0.05;

fn shape_mask(kind: PoolKind, s: usize, rng: &mut ChaCha8Rng) -> (&'static str, Mask) {
    let sf = s as f64;
    let center = (sf - 1.0) / 2.0;
    let ellipse = |rng: &mut ChaCha8Rng| {
        let (a, b) = (
            rng.random_range(0.3..0.5) * sf,
            rng.random_range(0.3..0.5) * sf,
        );
        let th: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (cy, cx) = (
            center + rng.random_range(-0.1..0.1) * sf,
            center + rng.random_range(-0.1..0.1) * sf,
        );
        move |r: usize, c: usize| {
            let (y, x) = (r as f64 - cy, c as f64 - cx);
            let (u, v) = (x * th.cos() + y * th.sin(), -x * th.sin() + y * th.cos());
            (u / a).powi(2) + (v / b).powi(2) <= 1.0
        }
    };
    let rectangle = |rng: &mut ChaCha8Rng| {
        let (hh, hw) = (
            rng.random_range(0.2..0.5) * sf,
            rng.random_range(0.2..0.5) * sf,
        );
        let (cy, cx) = (
            center + rng.random_range(-0.15..0.15) * sf,
            center + rng.random_range(-0.15..0.15) * sf,
        );
        move |r: usize, c: usize| (r as f64 - cy).abs() <= hh && (c as f64 - cx).abs() <= hw
    };
    match (kind, rng.random_range(0..3)) {
        (PoolKind::Train, 0) => {
            let e = ellipse(rng);
            ("ellipse", Mask::from_fn(s, s, e))
        }
        (PoolKind::Train, 1) => {
            let q = rectangle(rng);
            ("rectangle", Mask::from_fn(s, s, q))
        }
        (PoolKind::Train, _) => {
            let (e, q) = (ellipse(rng), rectangle(rng));
            ("union", Mask::from_fn(s, s, |r, c| e(r, c) || q(r, c)))
        }
        (PoolKind::Test, 0) => {
            let arm = (rng.random_range(0.12..0.22) * sf).max(0.6);
            (
                "cross",
                Mask::from_fn(s, s, |r, c| {
                    (r as f64 - center).abs() <= arm || (c as f64 - center).abs() <= arm
                }),
            )
        }
        (PoolKind::Test, 1) => {
            let outer = center + 0.5;
            let inner = outer * rng.random_range(0.35..0.6);
            (
                "ring",
                Mask::from_fn(s, s, |r, c| {
                    let d = ((r as f64 - center).powi(2) + (c as f64 - center).powi(2)).sqrt();
                    d <= outer && d >= inner
                }),
            )
        }
        (PoolKind::Test, _) => {
            let discs: Vec<(f64, f64, f64)> = (0..rng.random_range(3..=5))
                .map(|_| {
                    (
                        rng.random_range(0.2..0.8) * sf,
                        rng.random_range(0.2..0.8) * sf,
                        rng.random_range(0.15..0.3) * sf,
                    )
                })
                .collect();
            (
                "blob",
                Mask::from_fn(s, s, |r, c| {
                    discs.iter().any(|&(y, x, rad)| {
                        (r as f64 - y).powi(2) + (c as f64 - x).powi(2) <= rad * rad
                    })
                }),
            )
        }
    }
}

/// `n` objects of the pool's shape family and palette; ids are
/// `<family>:<shape>:<index>`.
pub fn generate_object_pool(
    kind: PoolKind,
    n: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<OutlierObject>> {
    if n == 0 {
        return Err(PebalError::arg("object pool size must be at least 1"));
    }
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE))
        .map_err(|e| PebalError::arg(format!("noise sigma: {e}")))?;
    par_map_range(n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
        loop {
            let s = rng.random_range(OBJECT_SIZE.0..=OBJECT_SIZE.1);
            let (shape, mask) = shape_mask(kind, s, &mut rng);
            if mask.popcount() < 4 {
                continue;
            }
            let base = kind.palette()[rng.random_range(0..kind.palette().len())];
            let tint: Vec<f64> = base
                .iter()
                .map(|v| v + rng.random_range(-OBJECT_COLOR_JITTER..=OBJECT_COLOR_JITTER))
                .collect();
            let image = PixelGrid::from_fn(s, s, 3, |_, _, ch| {
                let n = if noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                (tint[ch] + n).clamp(0.0, 1.0)
            });
            return cut_object(&image, &mask, format!("{}:{shape}:{i}", kind.family()));
        }
    })
    .into_iter()
    .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = PebalError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(PebalError::arg(format!("unknown split '{other}'"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub train_objects: usize,
    pub test_objects: usize,
}

impl Default for BenchmarkSizes {
    fn default() -> Self {
        Self {
            train: 64,
            val: 16,
            test: 32,
            train_objects: 64,
            test_objects: 32,
        }
    }
}

/// How family-B anomalies are placed into val/test scenes: 1-2 objects near
/// unit scale, centred on the road 90% of the time.
pub fn anomaly_policy(spec: &SceneSpec) -> Result<MixPolicy> {
    let roles = spec.roles()?;
    let road = roles.iter().position(|&r| r == Role::Road).expect("road") as u8 + 1;
    Ok(MixPolicy {
        scale_range: (0.8, 1.6),
        paste_per_image: (1, 2),
        anchor: Some(Anchor {
            label: road,
            probability: 0.9,
        }),
        ..MixPolicy::default()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleRecord {
    pub id: String,
    pub split: Split,
    pub seed: u64,
    pub anomaly_pixels: usize,
}

/// An in-memory dataset with the same content as its on-disk form (images
/// are quantized to 8 bits on creation).
#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub num_inlier_classes: u8,
    pub seed: u64,
    pub records: Vec<SampleRecord>,
    pub samples: Vec<LabeledSample>,
    /// `(sample id, placement)` of every pasted anomaly.
    pub placements: Vec<(String, Placement)>,
    /// Family-A objects for building the outlier training set.
    pub train_pool: Vec<OutlierObject>,
}

impl Benchmark {
    pub fn split(&self, split: Split) -> Vec<&LabeledSample> {
        self.records
            .iter()
            .zip(&self.samples)
            .filter(|(r, _)| r.split == split)
            .map(|(_, s)| s)
            .collect()
    }

    pub fn split_records(&self, split: Split) -> Vec<&SampleRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.records.iter().filter(|r| r.split == split).count()
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        for sub in ["images", "labels"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| PebalError::io(&p, e))?;
        }
        for (rec, s) in self.records.iter().zip(&self.samples) {
            write_image(
                &dir.join("images").join(format!("{}.ppm", rec.id)),
                &s.image,
            )?;
            write_labels(
                &dir.join("labels").join(format!("{}.pgm", rec.id)),
                &s.labels,
            )?;
        }
        let mut manifest = String::from("id\tsplit\tseed\tanomaly_pixels\n");
        for r in &self.records {
            writeln!(
                manifest,
                "{}\t{}\t{}\t{}",
                r.id, r.split, r.seed, r.anomaly_pixels
            )
            .expect("string write");
        }
        write_text(&dir.join("manifest.tsv"), &manifest)?;
        let mut placements = String::from("id\tshape_id\tobject_index\trow\tcol\tscale\thflip\n");
        for (id, p) in &self.placements {
            writeln!(
                placements,
                "{id}\t{}\t{}\t{}\t{}\t{}\t{}",
                p.shape_id, p.object_index, p.row, p.col, p.scale, p.hflip as u8
            )
            .expect("string write");
        }
        write_text(&dir.join("placements.tsv"), &placements)?;
        let meta = format!(
            "key\tvalue\nnum_inlier_classes\t{}\nseed\t{}\n",
            self.num_inlier_classes, self.seed
        );
        write_text(&dir.join("meta.tsv"), &meta)?;
        save_pool(&dir.join("objects"), &self.train_pool)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("meta.tsv");
        let meta = read_tsv(&meta_path, 2)?;
        let lookup: HashMap<&str, &str> = meta
            .iter()
            .map(|r| (r[0].as_str(), r[1].as_str()))
            .collect();
        let field = |k: &str| -> Result<&str> {
            lookup
                .get(k)
                .copied()
                .ok_or_else(|| PebalError::format(&meta_path, format!("missing key {k}")))
        };
        let num_inlier_classes: u8 = parse(&meta_path, field("num_inlier_classes")?)?;
        let seed: u64 = parse(&meta_path, field("seed")?)?;

        let manifest_path = dir.join("manifest.tsv");
        let mut records = Vec::new();
        let mut samples = Vec::new();
        for row in read_tsv(&manifest_path, 4)? {
            let record = SampleRecord {
                id: row[0].clone(),
                split: row[1]
                    .parse()
                    .map_err(|e: PebalError| PebalError::format(&manifest_path, e.to_string()))?,
                seed: parse(&manifest_path, &row[2])?,
                anomaly_pixels: parse(&manifest_path, &row[3])?,
            };
            let image = read_image(&dir.join("images").join(format!("{}.ppm", record.id)))?;
            let label_path = dir.join("labels").join(format!("{}.pgm", record.id));
            let labels = read_labels(&label_path, num_inlier_classes)?;
            if labels.anomaly_count() != record.anomaly_pixels {
                return Err(PebalError::format(
                    &label_path,
                    format!(
                        "{} anomaly pixels, manifest says {}",
                        labels.anomaly_count(),
                        record.anomaly_pixels
                    ),
                ));
            }
            samples.push(
                LabeledSample::new(image, labels)
                    .map_err(|e| PebalError::format(&label_path, e.to_string()))?,
            );
            records.push(record);
        }
        let placements_path = dir.join("placements.tsv");
        let mut placements = Vec::new();
        for row in read_tsv(&placements_path, 7)? {
            placements.push((
                row[0].clone(),
                Placement {
                    shape_id: row[1].clone(),
                    object_index: parse(&placements_path, &row[2])?,
                    row: parse(&placements_path, &row[3])?,
                    col: parse(&placements_path, &row[4])?,
                    scale: parse(&placements_path, &row[5])?,
                    hflip: parse::<u8>(&placements_path, &row[6])? != 0,
                },
            ));
        }
        let train_pool = load_pool(&dir.join("objects"))?;
        Ok(Self {
            num_inlier_classes,
            seed,
            records,
            samples,
            placements,
            train_pool,
        })
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| PebalError::io(path, e))
}

fn parse<T: FromStr>(path: &Path, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| PebalError::format(path, format!("cannot parse '{s}'")))
}

/// Rows of a headed TSV file, each with exactly `columns` fields.
fn read_tsv(path: &Path, columns: usize) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| PebalError::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<String> = line.split('\t').map(str::to_string).collect();
        if fields.len() != columns {
            return Err(PebalError::format(
                path,
                format!(
                    "line {}: expected {columns} columns, found {}",
                    n + 1,
                    fields.len()
                ),
            ));
        }
        rows.push(fields);
    }
    Ok(rows)
}

fn quantize(image: &PixelGrid) -> PixelGrid {
    image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8 as f64 / 255.0)
}

// Stream ids for derive_seed; every sample and pool gets its own stream.
const STREAM_TRAIN_POOL: u64 = 1;
const STREAM_TEST_POOL: u64 = 2;
const STREAM_SCENES: u64 = 1 << 32;

/// Generates every split. Train scenes are pure inlier. Even-indexed val and
/// test scenes carry pasted family-B anomalies; odd-indexed ones stay pure
/// for inlier segmentation metrics.
pub fn generate_benchmark(
    spec: &SceneSpec,
    sizes: &BenchmarkSizes,
    seed: u64,
) -> Result<Benchmark> {
    spec.validate()?;
    if sizes.train == 0 || sizes.val == 0 || sizes.test == 0 {
        return Err(PebalError::arg("every split needs at least one sample"));
    }
    let train_pool = generate_object_pool(
        PoolKind::Train,
        sizes.train_objects,
        spec.noise_sigma,
        derive_seed(seed, STREAM_TRAIN_POOL),
    )?;
    let test_pool = generate_object_pool(
        PoolKind::Test,
        sizes.test_objects,
        spec.noise_sigma,
        derive_seed(seed, STREAM_TEST_POOL),
    )?;
    let policy = anomaly_policy(spec)?;

    let mut jobs: Vec<(Split, usize)> = Vec::new();
    for (split, n) in [
        (Split::Train, sizes.train),
        (Split::Val, sizes.val),
        (Split::Test, sizes.test),
    ] {
        jobs.extend((0..n).map(|i| (split, i)));
    }
    let generated = par_map_range(
        jobs.len(),
        |j| -> Result<(SampleRecord, LabeledSample, Vec<Placement>)> {
            let (split, i) = jobs[j];
            let sample_seed = derive_seed(seed, STREAM_SCENES + j as u64);
            let scene = generate_scene(spec, sample_seed)?;
            let (sample, placements) = if split != Split::Train && i % 2 == 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(sample_seed, 1));
                loop {
                    let (mixed, placed, _) = mix_sample(&scene, &test_pool, &policy, &mut rng);
                    if !placed.is_empty() {
                        break (mixed, placed);
                    }
                }
            } else {
                (scene, Vec::new())
            };
            let sample = LabeledSample::new(quantize(&sample.image), sample.labels)?;
            let record = SampleRecord {
                id: format!("{}_{i:04}", split.name()),
                split,
                seed: sample_seed,
                anomaly_pixels: sample.labels.anomaly_count(),
            };
            Ok((record, sample, placements))
        },
    );
    let mut bench = Benchmark {
        num_inlier_classes: spec.num_inlier_classes,
        seed,
        records: Vec::new(),
        samples: Vec::new(),
        placements: Vec::new(),
        train_pool: train_pool
            .into_iter()
            .map(|o| {
                let (patch, mask, id) = (
                    quantize(o.patch()),
                    o.mask().clone(),
                    o.shape_id().to_string(),
                );
                OutlierObject::new(patch, mask, id)
            })
            .collect::<Result<_>>()?,
    };
    for g in generated {
        let (record, sample, placements) = g?;
        bench
            .placements
            .extend(placements.into_iter().map(|p| (record.id.clone(), p)));
        bench.records.push(record);
        bench.samples.push(sample);
    }
    Ok(bench)
}
