//! Synthetic thorax slices with a single lung nodule, raw slice loading and
//! dataset manifests.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{ImageGrid, UnitTag};
use crate::io::{self, RawHeader};
use crate::mask::BinaryMask;

pub const AIR_HU: f32 = -1000.0;
pub const SOFT_TISSUE_HU: f32 = 40.0;
pub const LUNG_HU: f32 = -800.0;
pub const VESSEL_HU: f32 = 50.0;
pub const NODULE_HU: f32 = 20.0;

const PLACEMENT_RETRIES: usize = 200;
/// Sub-pixel samples per axis for edge coverage.
const SUPERSAMPLE: usize = 4;

/// Where to put the nodule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoduleCenter {
    Random,
    /// `(x, y)` = `(col, row)` in pixels.
    At(f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub size: usize,
    pub pixel_size: f64,
    /// Nodule diameter in mm; `0` generates a healthy slice.
    pub nodule_diameter: f64,
    pub nodule_center: NoduleCenter,
    pub n_vessels: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            size: 128,
            pixel_size: 2.0,
            nodule_diameter: 15.0,
            nodule_center: NoduleCenter::Random,
            n_vessels: 12,
            seed: 0,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "phantom size must be positive and even, got {}",
                self.size
            )));
        }
        if !(self.pixel_size.is_finite() && self.pixel_size > 0.0) {
            return Err(Error::InvalidArgument("pixel size must be positive".into()));
        }
        if !(self.nodule_diameter.is_finite() && self.nodule_diameter >= 0.0) {
            return Err(Error::InvalidArgument(
                "nodule diameter must be non-negative".into(),
            ));
        }
        Ok(())
    }

    pub fn is_diseased(&self) -> bool {
        self.nodule_diameter > 0.0
    }
}

/// Provenance of a [`LabeledSlice`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceSource {
    Phantom(PhantomSpec),
    File(PathBuf),
}

/// A HU slice with its ground-truth nodule mask.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSlice {
    pub image: ImageGrid,
    pub nodule_mask: BinaryMask,
    /// Lung fields, known for generated phantoms only.
    pub lung_mask: Option<BinaryMask>,
    pub source: SliceSource,
}

impl LabeledSlice {
    pub fn is_diseased(&self) -> bool {
        !self.nodule_mask.is_empty()
    }
}

/// Axis-aligned-then-rotated ellipse in pixel coordinates (`x` = col, `y` = row).
#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    /// Fraction of the pixel at `(row, col)` covered by the ellipse.
    fn coverage(&self, row: usize, col: usize) -> f64 {
        let mut hit = 0;
        for i in 0..SUPERSAMPLE {
            for j in 0..SUPERSAMPLE {
                let y = row as f64 + (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                let x = col as f64 + (j as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
                if self.contains(x, y) {
                    hit += 1;
                }
            }
        }
        hit as f64 / (SUPERSAMPLE * SUPERSAMPLE) as f64
    }

    fn bounds(&self, size: usize) -> (usize, usize, usize, usize) {
        let r = self.a.max(self.b) + 1.0;
        let clip = |v: f64| v.max(0.0).min(size as f64 - 1.0) as usize;
        (
            clip((self.cy - r).floor()),
            clip((self.cy + r).ceil()),
            clip((self.cx - r).floor()),
            clip((self.cx + r).ceil()),
        )
    }
}

fn paint(values: &mut [f64], size: usize, shape: &Ellipse, hu: f64, within: Option<&[f64]>) {
    let (r0, r1, c0, c1) = shape.bounds(size);
    for r in r0..=r1 {
        for c in c0..=c1 {
            let mut cov = shape.coverage(r, c);
            if let Some(region) = within {
                cov *= region[r * size + c];
            }
            if cov > 0.0 {
                let v = &mut values[r * size + c];
                *v += (hu - *v) * cov;
            }
        }
    }
}

fn lung_fields(size: usize) -> [Ellipse; 2] {
    let h = size as f64 / 2.0;
    let center = (size as f64 - 1.0) / 2.0;
    let lung = |side: f64| Ellipse {
        cx: center + side * 0.42 * h,
        cy: center - 0.02 * h,
        a: 0.3 * h,
        b: 0.48 * h,
        angle: 0.0,
    };
    [lung(-1.0), lung(1.0)]
}

/// Generates a slice deterministically from `spec`.
///
/// Air background, a soft-tissue body ellipse, two lung ellipses, vessels as
/// thin bright ellipses restricted to the lungs, and a nodule disk with a
/// linear one-pixel edge. The nodule mask is the set of pixels where the
/// nodule weight exceeds one half.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<LabeledSlice> {
    spec.validate()?;
    let n = spec.size;
    let h = n as f64 / 2.0;
    let center = (n as f64 - 1.0) / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut values = vec![AIR_HU as f64; n * n];
    let body = Ellipse {
        cx: center,
        cy: center,
        a: 0.88 * h,
        b: 0.66 * h,
        angle: 0.0,
    };
    paint(&mut values, n, &body, SOFT_TISSUE_HU as f64, None);

    let lungs = lung_fields(n);
    let mut lung_cov = vec![0.0; n * n];
    for lung in &lungs {
        paint(&mut values, n, lung, LUNG_HU as f64, None);
        let (r0, r1, c0, c1) = lung.bounds(n);
        for r in r0..=r1 {
            for c in c0..=c1 {
                lung_cov[r * n + c] += lung.coverage(r, c);
            }
        }
    }
    lung_cov.iter_mut().for_each(|v| *v = v.min(1.0));

    for _ in 0..spec.n_vessels {
        let lung = lungs[rng.random_range(0..2)];
        let (px, py) = point_in(&lung, 0.85, &mut rng);
        let vessel = Ellipse {
            cx: px,
            cy: py,
            a: rng.random_range(0.06..0.15) * h,
            b: (rng.random_range(0.01..0.025) * h).max(0.6),
            angle: rng.random_range(0.0..PI),
        };
        paint(&mut values, n, &vessel, VESSEL_HU as f64, Some(&lung_cov));
    }

    let mut nodule_mask = BinaryMask::empty(n, n);
    if spec.is_diseased() {
        let radius = spec.nodule_diameter / 2.0 / spec.pixel_size;
        let (nx, ny) = place_nodule(spec, &lungs, radius, &mut rng)?;
        for r in 0..n {
            for c in 0..n {
                let dist = ((c as f64 - nx).powi(2) + (r as f64 - ny).powi(2)).sqrt();
                let w = (radius + 0.5 - dist).clamp(0.0, 1.0);
                if w > 0.0 {
                    let v = &mut values[r * n + c];
                    *v += (NODULE_HU as f64 - *v) * w;
                }
                if w > 0.5 {
                    nodule_mask.set(r, c, true);
                }
            }
        }
    }

    let lung_mask = BinaryMask::from_fn(n, n, |r, c| lung_cov[r * n + c] > 0.0);
    let image = ImageGrid::new(
        n,
        n,
        spec.pixel_size,
        values.into_iter().map(|v| v as f32).collect(),
        UnitTag::Hu,
    )?;
    Ok(LabeledSlice {
        image,
        nodule_mask,
        lung_mask: Some(lung_mask),
        source: SliceSource::Phantom(spec.clone()),
    })
}

fn point_in(e: &Ellipse, shrink: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let r = rng.random_range(0.0f64..1.0).sqrt() * shrink;
    let phi = rng.random_range(0.0..2.0 * PI);
    (e.cx + r * e.a * phi.cos(), e.cy + r * e.b * phi.sin())
}

fn disk_inside(e: &Ellipse, x: f64, y: f64, radius: f64) -> bool {
    (0..48).all(|k| {
        let phi = k as f64 * 2.0 * PI / 48.0;
        e.contains(x + radius * phi.cos(), y + radius * phi.sin())
    })
}

fn place_nodule(
    spec: &PhantomSpec,
    lungs: &[Ellipse; 2],
    radius: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    // one pixel of margin for the soft edge
    let reach = radius + 1.0;
    match spec.nodule_center {
        NoduleCenter::At(x, y) => {
            if lungs.iter().any(|l| disk_inside(l, x, y, reach)) {
                Ok((x, y))
            } else {
                Err(Error::InvalidArgument(format!(
                    "nodule at ({x}, {y}) with radius {radius:.2} px leaves the lung fields"
                )))
            }
        }
        NoduleCenter::Random => {
            for _ in 0..PLACEMENT_RETRIES {
                let lung = &lungs[rng.random_range(0..2)];
                let (x, y) = point_in(lung, 1.0, rng);
                if disk_inside(lung, x, y, reach) {
                    return Ok((x, y));
                }
            }
            Err(Error::InvalidArgument(format!(
                "could not fit a {:.1} mm nodule inside the lung fields",
                spec.nodule_diameter
            )))
        }
    }
}

/// Reads an external HU slice, with its companion mask when one exists.
///
/// The companion mask lives at `<stem>.mask.json`. Without one, the slice is
/// treated as healthy.
pub fn load_raw_slice(path: &Path, header: Option<&RawHeader>) -> Result<LabeledSlice> {
    let image = match header {
        Some(h) => io::read_raw_image_with(path, h)?,
        None => io::read_raw_image(path)?,
    };
    if image.unit() != UnitTag::Hu {
        return Err(Error::InvalidImage(format!(
            "{}: slices must be HU-tagged",
            path.display()
        )));
    }
    let mask_path = mask_path_for(path);
    let nodule_mask = if mask_path.exists() {
        let mask = io::read_mask(&mask_path)?;
        if mask.width() != image.width() || mask.height() != image.height() {
            return Err(Error::ShapeMismatch(format!(
                "{}: mask {}x{} vs image {}x{}",
                mask_path.display(),
                mask.width(),
                mask.height(),
                image.width(),
                image.height()
            )));
        }
        mask
    } else {
        BinaryMask::empty(image.width(), image.height())
    };
    Ok(LabeledSlice {
        image,
        nodule_mask,
        lung_mask: None,
        source: SliceSource::File(path.to_path_buf()),
    })
}

/// Companion mask location for a raw slice.
pub fn mask_path_for(slice: &Path) -> PathBuf {
    slice.with_extension("mask.json")
}

/// Writes a slice (raw + header) and, when diseased, its mask.
pub fn write_slice(path: &Path, slice: &LabeledSlice) -> Result<Option<PathBuf>> {
    io::write_raw_image(path, &slice.image)?;
    if slice.is_diseased() {
        let mask_path = mask_path_for(path);
        io::write_mask(&mask_path, &slice.nodule_mask)?;
        Ok(Some(mask_path))
    } else {
        Ok(None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

/// One line of the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub subject_id: String,
    pub slice_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    pub split: Split,
    pub diseased: bool,
}

pub type Manifest = Vec<ManifestEntry>;

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    io::write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    io::read_json(path)
}

/// Subject counts per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    /// 12/2/8 proportions (about 55/9/36 %), keeping at least one subject
    /// in every split once there are three or more.
    pub fn proportional(n: usize) -> Self {
        if n < 3 {
            return SplitCounts {
                train: n,
                validation: 0,
                test: 0,
            };
        }
        let validation = ((n as f64 * 2.0 / 22.0).round() as usize).max(1);
        let train = ((n as f64 * 12.0 / 22.0).round() as usize)
            .max(1)
            .min(n - validation - 1);
        SplitCounts {
            train,
            validation,
            test: n - train - validation,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Recipe for a phantom cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortSpec {
    pub base: PhantomSpec,
    /// Diseased subjects per split.
    pub diseased: SplitCounts,
    /// Healthy subjects, all assigned to the test split.
    pub healthy: usize,
    /// Nodule diameters are drawn uniformly from this range (mm).
    pub nodule_diameter_range: (f64, f64),
    pub seed: u64,
}

/// Subject description before generation.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortMember {
    pub subject_id: String,
    pub split: Split,
    pub spec: PhantomSpec,
}

/// Lays out a cohort with disjoint subject ids per split.
///
/// Each subject contributes exactly one slice, so splitting by subject is
/// splitting by slice source.
pub fn plan_cohort(cohort: &CohortSpec) -> Result<Vec<CohortMember>> {
    cohort.base.validate()?;
    let (lo, hi) = cohort.nodule_diameter_range;
    if !(lo > 0.0 && hi >= lo) {
        return Err(Error::InvalidArgument(format!(
            "bad nodule diameter range ({lo}, {hi})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cohort.seed);
    let mut members = Vec::new();
    let mut next = 0usize;
    let mut push = |split: Split, diameter: f64, rng: &mut ChaCha8Rng| {
        let spec = PhantomSpec {
            nodule_diameter: diameter,
            nodule_center: NoduleCenter::Random,
            seed: rng.random(),
            ..cohort.base.clone()
        };
        members.push(CohortMember {
            subject_id: format!("S{next:04}"),
            split,
            spec,
        });
        next += 1;
    };
    for (split, count) in [
        (Split::Train, cohort.diseased.train),
        (Split::Validation, cohort.diseased.validation),
        (Split::Test, cohort.diseased.test),
    ] {
        for _ in 0..count {
            let d = if hi > lo {
                rng.random_range(lo..=hi)
            } else {
                lo
            };
            push(split, d, &mut rng);
        }
    }
    for _ in 0..cohort.healthy {
        push(Split::Test, 0.0, &mut rng);
    }
    Ok(members)
}
