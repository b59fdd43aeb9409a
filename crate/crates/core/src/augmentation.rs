//! Seeded image augmentations used to synthesize finetuning queries from
//! reference images.
//!
//! Every op keeps the image size and the pose of its source; geometric ops
//! resample back to the original size with bilinear interpolation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color::{luma, rotate_hue};
use crate::dataset::ImageRecord;
use crate::error::{Result, VprError};
use crate::image::RgbImage;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Appearance,
    Viewpoint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AugmentKind {
    Identity,
    Brightness,
    Contrast,
    HueShift,
    Grayscale,
    Gamma,
    GaussianNoise,
    BoxBlur,
    CropResize,
    HorizontalFlip,
    PerspectiveJitter,
}

impl AugmentKind {
    pub const APPEARANCE: [AugmentKind; 7] = [
        AugmentKind::Brightness,
        AugmentKind::Contrast,
        AugmentKind::HueShift,
        AugmentKind::Grayscale,
        AugmentKind::Gamma,
        AugmentKind::GaussianNoise,
        AugmentKind::BoxBlur,
    ];
    pub const VIEWPOINT: [AugmentKind; 3] = [
        AugmentKind::CropResize,
        AugmentKind::HorizontalFlip,
        AugmentKind::PerspectiveJitter,
    ];

    /// Identity counts as both.
    pub fn categories(self) -> &'static [Category] {
        match self {
            AugmentKind::Identity => &[Category::Appearance, Category::Viewpoint],
            AugmentKind::CropResize
            | AugmentKind::HorizontalFlip
            | AugmentKind::PerspectiveJitter => &[Category::Viewpoint],
            _ => &[Category::Appearance],
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            AugmentKind::Identity => "id",
            AugmentKind::Brightness => "bright",
            AugmentKind::Contrast => "contrast",
            AugmentKind::HueShift => "hue",
            AugmentKind::Grayscale => "gray",
            AugmentKind::Gamma => "gamma",
            AugmentKind::GaussianNoise => "noise",
            AugmentKind::BoxBlur => "blur",
            AugmentKind::CropResize => "crop",
            AugmentKind::HorizontalFlip => "flip",
            AugmentKind::PerspectiveJitter => "persp",
        }
    }
}

/// A fully parameterized augmentation.
#[derive(Clone, Debug, PartialEq)]
pub enum AugmentationOp {
    Identity,
    Brightness {
        offset: f64,
    },
    Contrast {
        gain: f64,
    },
    HueShift {
        degrees: f64,
    },
    Grayscale,
    Gamma {
        exponent: f64,
    },
    GaussianNoise {
        sigma: f64,
    },
    BoxBlur {
        radius: u32,
    },
    /// Crop of relative size `scale`; offsets in `[0, 1]` place the window
    /// within the remaining slack.
    CropResize {
        scale: f64,
        offset_x: f64,
        offset_y: f64,
    },
    HorizontalFlip,
    /// Displacement of the source corners (top-left, top-right,
    /// bottom-right, bottom-left) as fractions of the image side.
    PerspectiveJitter {
        corners: [[f64; 2]; 4],
    },
}

impl AugmentationOp {
    pub fn kind(&self) -> AugmentKind {
        match self {
            AugmentationOp::Identity => AugmentKind::Identity,
            AugmentationOp::Brightness { .. } => AugmentKind::Brightness,
            AugmentationOp::Contrast { .. } => AugmentKind::Contrast,
            AugmentationOp::HueShift { .. } => AugmentKind::HueShift,
            AugmentationOp::Grayscale => AugmentKind::Grayscale,
            AugmentationOp::Gamma { .. } => AugmentKind::Gamma,
            AugmentationOp::GaussianNoise { .. } => AugmentKind::GaussianNoise,
            AugmentationOp::BoxBlur { .. } => AugmentKind::BoxBlur,
            AugmentationOp::CropResize { .. } => AugmentKind::CropResize,
            AugmentationOp::HorizontalFlip => AugmentKind::HorizontalFlip,
            AugmentationOp::PerspectiveJitter { .. } => AugmentKind::PerspectiveJitter,
        }
    }

    pub fn categories(&self) -> &'static [Category] {
        self.kind().categories()
    }
}

impl fmt::Display for AugmentationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentationOp::Brightness { offset } => write!(f, "bright({offset:.3})"),
            AugmentationOp::Contrast { gain } => write!(f, "contrast({gain:.3})"),
            AugmentationOp::HueShift { degrees } => write!(f, "hue({degrees:.1})"),
            AugmentationOp::Gamma { exponent } => write!(f, "gamma({exponent:.3})"),
            AugmentationOp::GaussianNoise { sigma } => write!(f, "noise({sigma:.3})"),
            AugmentationOp::BoxBlur { radius } => write!(f, "blur({radius})"),
            AugmentationOp::CropResize { scale, .. } => write!(f, "crop({scale:.3})"),
            other => f.write_str(other.kind().tag()),
        }
    }
}

/// Sampling ranges per kind. Symmetric ranges are given by their half-width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentRanges {
    pub brightness: f64,
    pub contrast: [f64; 2],
    pub hue_degrees: f64,
    pub gamma: [f64; 2],
    pub noise_sigma: f64,
    pub blur_radius: u32,
    pub crop_scale: [f64; 2],
    pub perspective: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            brightness: 0.3,
            contrast: [0.6, 1.6],
            hue_degrees: 40.0,
            gamma: [0.5, 2.0],
            noise_sigma: 0.08,
            blur_radius: 2,
            crop_scale: [0.7, 1.0],
            perspective: 0.1,
        }
    }
}

impl AugmentRanges {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| {
            Err(VprError::InvalidConfig(format!(
                "augmentation range: {what}"
            )))
        };
        let ordered = |r: [f64; 2]| r[0] <= r[1] && r[0].is_finite() && r[1].is_finite();
        if !(0.0..=1.0).contains(&self.brightness) {
            return bad("brightness must lie in [0, 1]");
        }
        if !ordered(self.contrast) || self.contrast[0] <= 0.0 {
            return bad("contrast must be a positive interval");
        }
        if !(0.0..=180.0).contains(&self.hue_degrees) {
            return bad("hue must lie in [0, 180]");
        }
        if !ordered(self.gamma) || self.gamma[0] <= 0.0 {
            return bad("gamma must be a positive interval");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise sigma must be >= 0");
        }
        if self.blur_radius == 0 {
            return bad("blur radius must be at least 1");
        }
        if !ordered(self.crop_scale) || self.crop_scale[0] <= 0.0 || self.crop_scale[1] > 1.0 {
            return bad("crop scale must lie in (0, 1]");
        }
        if !(0.0..=0.1).contains(&self.perspective) {
            return bad("perspective jitter must lie in [0, 0.1]");
        }
        Ok(())
    }
}

/// Which augmentations may be sampled, and their ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentationSpec {
    kinds: Vec<AugmentKind>,
    pub ranges: AugmentRanges,
}

/// The four category selections accepted in experiment configs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugmentSelection {
    None,
    Appearance,
    Viewpoint,
    All,
}

impl AugmentSelection {
    pub const ALL_FOUR: [AugmentSelection; 4] = [
        AugmentSelection::None,
        AugmentSelection::Appearance,
        AugmentSelection::Viewpoint,
        AugmentSelection::All,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AugmentSelection::None => "none",
            AugmentSelection::Appearance => "appearance",
            AugmentSelection::Viewpoint => "viewpoint",
            AugmentSelection::All => "appearance,viewpoint",
        }
    }
}

impl FromStr for AugmentSelection {
    type Err = VprError;

    fn from_str(s: &str) -> Result<Self> {
        let mut appearance = false;
        let mut viewpoint = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "appearance" => appearance = true,
                "viewpoint" => viewpoint = true,
                "none" => {}
                "all" => {
                    appearance = true;
                    viewpoint = true;
                }
                other => {
                    return Err(VprError::InvalidConfig(format!(
                        "unknown augmentation category `{other}`"
                    )))
                }
            }
        }
        Ok(match (appearance, viewpoint) {
            (false, false) => AugmentSelection::None,
            (true, false) => AugmentSelection::Appearance,
            (false, true) => AugmentSelection::Viewpoint,
            (true, true) => AugmentSelection::All,
        })
    }
}

impl fmt::Display for AugmentSelection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl AugmentationSpec {
    /// Explicit kind list; used for tests and custom setups.
    pub fn with_kinds(kinds: Vec<AugmentKind>, ranges: AugmentRanges) -> Self {
        Self { kinds, ranges }
    }

    /// `None` yields only the identity op. Horizontal flip stays disabled
    /// unless `allow_flip` is set.
    pub fn from_selection(
        selection: AugmentSelection,
        ranges: AugmentRanges,
        allow_flip: bool,
    ) -> Self {
        let mut kinds = Vec::new();
        if matches!(
            selection,
            AugmentSelection::Appearance | AugmentSelection::All
        ) {
            kinds.extend(AugmentKind::APPEARANCE);
        }
        if matches!(
            selection,
            AugmentSelection::Viewpoint | AugmentSelection::All
        ) {
            kinds.extend(
                AugmentKind::VIEWPOINT
                    .into_iter()
                    .filter(|k| allow_flip || *k != AugmentKind::HorizontalFlip),
            );
        }
        if selection == AugmentSelection::None {
            kinds.push(AugmentKind::Identity);
        }
        Self { kinds, ranges }
    }

    pub fn kinds(&self) -> &[AugmentKind] {
        &self.kinds
    }

    pub fn selection(&self) -> AugmentSelection {
        let app = self
            .kinds
            .iter()
            .any(|k| AugmentKind::APPEARANCE.contains(k));
        let view = self
            .kinds
            .iter()
            .any(|k| AugmentKind::VIEWPOINT.contains(k));
        match (app, view) {
            (false, false) => AugmentSelection::None,
            (true, false) => AugmentSelection::Appearance,
            (false, true) => AugmentSelection::Viewpoint,
            (true, true) => AugmentSelection::All,
        }
    }
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::from_selection(AugmentSelection::All, AugmentRanges::default(), false)
    }
}

/// Draws a kind uniformly from the enabled ones, then its parameters
/// uniformly from the configured ranges.
pub fn sample_op(spec: &AugmentationSpec, rng: &mut impl Rng) -> Result<AugmentationOp> {
    if spec.kinds.is_empty() {
        return Err(VprError::NothingToSample);
    }
    let r = &spec.ranges;
    let kind = spec.kinds[rng.random_range(0..spec.kinds.len())];
    let symmetric = |rng: &mut dyn rand::RngCore, half: f64| {
        if half > 0.0 {
            rng.random_range(-half..=half)
        } else {
            0.0
        }
    };
    let interval = |rng: &mut dyn rand::RngCore, [lo, hi]: [f64; 2]| {
        if hi > lo {
            rng.random_range(lo..=hi)
        } else {
            lo
        }
    };
    Ok(match kind {
        AugmentKind::Identity => AugmentationOp::Identity,
        AugmentKind::Brightness => AugmentationOp::Brightness {
            offset: symmetric(rng, r.brightness),
        },
        AugmentKind::Contrast => AugmentationOp::Contrast {
            gain: interval(rng, r.contrast),
        },
        AugmentKind::HueShift => AugmentationOp::HueShift {
            degrees: symmetric(rng, r.hue_degrees),
        },
        AugmentKind::Grayscale => AugmentationOp::Grayscale,
        AugmentKind::Gamma => AugmentationOp::Gamma {
            exponent: interval(rng, r.gamma),
        },
        AugmentKind::GaussianNoise => AugmentationOp::GaussianNoise {
            sigma: interval(rng, [0.0, r.noise_sigma]),
        },
        AugmentKind::BoxBlur => AugmentationOp::BoxBlur {
            radius: rng.random_range(1..=r.blur_radius.max(1)),
        },
        AugmentKind::CropResize => AugmentationOp::CropResize {
            scale: interval(rng, r.crop_scale),
            offset_x: rng.random_range(0.0..=1.0),
            offset_y: rng.random_range(0.0..=1.0),
        },
        AugmentKind::HorizontalFlip => AugmentationOp::HorizontalFlip,
        AugmentKind::PerspectiveJitter => {
            let mut corners = [[0.0; 2]; 4];
            for c in &mut corners {
                c[0] = symmetric(rng, r.perspective);
                c[1] = symmetric(rng, r.perspective);
            }
            AugmentationOp::PerspectiveJitter { corners }
        }
    })
}

/// Applies `op`. The result keeps the source's size and pose; its id gets a
/// `+tag` suffix. Noise draws come from `rng`.
pub fn apply(record: &ImageRecord, op: &AugmentationOp, rng: &mut impl Rng) -> ImageRecord {
    ImageRecord {
        id: format!("{}+{}", record.id, op.kind().tag()),
        image: apply_to_image(&record.image, op, rng),
        pose: record.pose,
    }
}

pub fn apply_to_image(img: &RgbImage, op: &AugmentationOp, rng: &mut impl Rng) -> RgbImage {
    let map_values = |f: &dyn Fn(f64) -> f64| {
        let mut out = img.clone();
        for v in out.data_mut() {
            *v = f(*v as f64).clamp(0.0, 1.0) as f32;
        }
        out
    };
    match *op {
        AugmentationOp::Identity => img.clone(),
        AugmentationOp::Brightness { offset } => map_values(&|v| v + offset),
        AugmentationOp::Contrast { gain } => map_values(&|v| (v - 0.5) * gain + 0.5),
        AugmentationOp::Gamma { exponent } => map_values(&|v| v.max(0.0).powf(exponent)),
        AugmentationOp::HueShift { degrees } => {
            let mut out = img.clone();
            for px in out.data_mut().chunks_exact_mut(3) {
                let rgb = rotate_hue([px[0], px[1], px[2]], degrees);
                for (d, s) in px.iter_mut().zip(rgb) {
                    *d = s.clamp(0.0, 1.0);
                }
            }
            out
        }
        AugmentationOp::Grayscale => {
            let mut out = img.clone();
            for px in out.data_mut().chunks_exact_mut(3) {
                let y = luma([px[0], px[1], px[2]]).clamp(0.0, 1.0) as f32;
                px.fill(y);
            }
            out
        }
        AugmentationOp::GaussianNoise { sigma } => {
            let mut out = img.clone();
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).unwrap();
                for v in out.data_mut() {
                    *v = (*v as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
                }
            }
            out
        }
        AugmentationOp::BoxBlur { radius } => box_blur(img, radius as usize),
        AugmentationOp::HorizontalFlip => {
            let w = img.width();
            RgbImage::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y))
        }
        AugmentationOp::CropResize {
            scale,
            offset_x,
            offset_y,
        } => {
            let (w, h) = (img.width() as f64, img.height() as f64);
            let (cw, ch) = (w * scale, h * scale);
            let x0 = offset_x.clamp(0.0, 1.0) * (w - cw);
            let y0 = offset_y.clamp(0.0, 1.0) * (h - ch);
            resample(img, |x, y| (x0 + x * scale, y0 + y * scale))
        }
        AugmentationOp::PerspectiveJitter { corners } => {
            let (w, h) = (img.width() as f64, img.height() as f64);
            let dst = [[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]];
            let mut src = dst;
            for (s, c) in src.iter_mut().zip(corners) {
                s[0] += c[0] * w;
                s[1] += c[1] * h;
            }
            match homography(&dst, &src) {
                Some(hm) => resample(img, |x, y| {
                    let d = hm[6] * x + hm[7] * y + 1.0;
                    (
                        (hm[0] * x + hm[1] * y + hm[2]) / d,
                        (hm[3] * x + hm[4] * y + hm[5]) / d,
                    )
                }),
                None => img.clone(),
            }
        }
    }
}

/// Bilinear resampling where `map` sends an output point (continuous
/// coordinates, pixel corners at integers) to a source point.
fn resample(img: &RgbImage, map: impl Fn(f64, f64) -> (f64, f64)) -> RgbImage {
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (sx, sy) = map(x as f64 + 0.5, y as f64 + 0.5);
        img.sample_bilinear(sx - 0.5, sy - 0.5)
    })
}

fn box_blur(img: &RgbImage, radius: usize) -> RgbImage {
    if radius == 0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let r = radius as isize;
    let n = (2 * radius + 1) as f64;
    let blur_axis = |src: &RgbImage, horizontal: bool| {
        RgbImage::from_fn(w, h, |x, y| {
            let mut acc = [0.0f64; 3];
            for d in -r..=r {
                let (sx, sy) = if horizontal {
                    ((x as isize + d).clamp(0, w as isize - 1) as usize, y)
                } else {
                    (x, (y as isize + d).clamp(0, h as isize - 1) as usize)
                };
                let p = src.pixel(sx, sy);
                for c in 0..3 {
                    acc[c] += p[c] as f64;
                }
            }
            acc.map(|v| (v / n) as f32)
        })
    };
    blur_axis(&blur_axis(img, true), false)
}

/// Projective map `H` (with `h33 = 1`) sending each `from[i]` to `to[i]`,
/// by Gaussian elimination on the 8x8 system.
fn homography(from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]) -> Option<[f64; 8]> {
    let mut a = [[0.0f64; 9]; 8];
    for i in 0..4 {
        let [x, y] = from[i];
        let [u, v] = to[i];
        a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
        a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
    }
    for col in 0..8 {
        let pivot = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-12 {
            return None;
        }
        a.swap(col, pivot);
        for row in 0..8 {
            if row != col {
                let f = a[row][col] / a[col][col];
                let pivot_row = a[col];
                for (x, p) in a[row][col..].iter_mut().zip(&pivot_row[col..]) {
                    *x -= f * p;
                }
            }
        }
    }
    let mut h = [0.0; 8];
    for i in 0..8 {
        h[i] = a[i][8] / a[i][i];
    }
    Some(h)
}
