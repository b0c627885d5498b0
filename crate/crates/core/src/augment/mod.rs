//! Label-preserving image augmentations and their parameter grids.

mod ops;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::DocumentImage;
use crate::rng;

pub use ops::{gaussian_blur, grid_warp, pad_shift, patch_noise, resize_bilinear, scale_by};

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("unknown augmentation category {0:?}")]
    UnknownCategory(String),
    #[error("category {0} has no image grid")]
    NoGrid(Category),
    #[error("invalid augmentation spec: {0}")]
    InvalidSpec(String),
    #[error("image {width}x{height} is smaller than the {mesh}px warp mesh")]
    TooSmallForMesh { width: usize, height: usize, mesh: u32 },
    #[error("scaling {width}x{height} by {scale} leaves no pixels")]
    ZeroArea { width: usize, height: usize, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Category {
    BlurResize,
    ResizeSweep,
    GaussianNoise,
    PixelShiftPad,
    GridWarp,
    Identity,
}

impl Category {
    /// The five categories that have a 20-point grid.
    pub const IMAGE: [Category; 5] = [
        Category::BlurResize,
        Category::ResizeSweep,
        Category::GaussianNoise,
        Category::PixelShiftPad,
        Category::GridWarp,
    ];

    /// Short command-line name.
    pub fn slug(self) -> &'static str {
        match self {
            Category::BlurResize => "blur-resize",
            Category::ResizeSweep => "resize",
            Category::GaussianNoise => "noise",
            Category::PixelShiftPad => "pad",
            Category::GridWarp => "grid-warp",
            Category::Identity => "identity",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Category {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase().replace('_', "-");
        let found = match lower.as_str() {
            "blur-resize" | "blurresize" | "blur" => Category::BlurResize,
            "resize" | "resize-sweep" | "resizesweep" => Category::ResizeSweep,
            "noise" | "gaussian-noise" | "gaussiannoise" => Category::GaussianNoise,
            "pad" | "pixel-shift-pad" | "pixelshiftpad" => Category::PixelShiftPad,
            "grid-warp" | "gridwarp" | "warp" => Category::GridWarp,
            "identity" => Category::Identity,
            _ => return Err(AugmentError::UnknownCategory(s.to_string())),
        };
        Ok(found)
    }
}

/// Corner the content is shifted toward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    NE,
    SE,
    SW,
    NW,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::NE, Direction::SE, Direction::SW, Direction::NW];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "category")]
pub enum AugmentParams {
    /// Gaussian blur with a `kernel`-px window, then resize by `scale`.
    BlurResize {
        kernel: u32,
        scale: f64,
    },
    ResizeSweep {
        scale: f64,
    },
    /// Additive Gaussian noise that is constant over `patch`-px squares.
    GaussianNoise {
        patch: u32,
        sigma: f64,
    },
    /// Pad by `offset` px on two sides so content moves toward `direction`.
    PixelShiftPad {
        offset: u32,
        direction: Direction,
    },
    /// Smooth random displacement interpolated from a `mesh`-px lattice.
    GridWarp {
        mesh: u32,
        sigma: f64,
    },
    Identity,
}

/// One point of an augmentation grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    #[serde(flatten)]
    pub params: AugmentParams,
    /// Resize factor applied after the distortion.
    pub post_scale: f64,
    #[serde(default)]
    pub warp_seed: Option<u64>,
}

impl AugmentationSpec {
    pub fn new(params: AugmentParams, post_scale: f64) -> Self {
        Self {
            params,
            post_scale,
            warp_seed: None,
        }
    }

    /// The unaltered page at the given scale.
    pub fn identity(post_scale: f64) -> Self {
        Self::new(AugmentParams::Identity, post_scale)
    }

    pub fn category(&self) -> Category {
        match self.params {
            AugmentParams::BlurResize { .. } => Category::BlurResize,
            AugmentParams::ResizeSweep { .. } => Category::ResizeSweep,
            AugmentParams::GaussianNoise { .. } => Category::GaussianNoise,
            AugmentParams::PixelShiftPad { .. } => Category::PixelShiftPad,
            AugmentParams::GridWarp { .. } => Category::GridWarp,
            AugmentParams::Identity => Category::Identity,
        }
    }

    /// JSON with sorted keys; the basis of [`Self::hash`].
    pub fn canonical_json(&self) -> String {
        // serde_json's Value map is a BTreeMap, so keys come out sorted.
        serde_json::to_value(self).expect("spec serializes").to_string()
    }

    /// Hex SHA-256 prefix of the canonical JSON; keys caches and file names.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.canonical_json().as_bytes());
        hex::encode(&digest[..8])
    }

    /// Checks the parameter ranges the grids are drawn from.
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidSpec(msg));
        if !(self.post_scale > 0.0 && self.post_scale <= 2.0) {
            return bad(format!("post_scale {} outside (0, 2]", self.post_scale));
        }
        match &self.params {
            AugmentParams::BlurResize { kernel, scale } => {
                if kernel % 2 == 0 || !(5..=17).contains(kernel) {
                    return bad(format!("blur kernel {kernel} must be odd and in [5, 17]"));
                }
                if !(*scale > 0.0 && *scale <= 2.0) {
                    return bad(format!("scale {scale} outside (0, 2]"));
                }
            }
            AugmentParams::ResizeSweep { scale } => {
                if !(*scale > 0.0 && *scale <= 2.0) {
                    return bad(format!("scale {scale} outside (0, 2]"));
                }
            }
            AugmentParams::GaussianNoise { patch, sigma } => {
                if ![2, 4, 8, 16].contains(patch) {
                    return bad(format!("noise patch {patch} not in {{2,4,8,16}}"));
                }
                if ![4.0, 6.0, 8.0, 10.0, 15.0].contains(sigma) {
                    return bad(format!("noise sigma {sigma} not in {{4,6,8,10,15}}"));
                }
            }
            AugmentParams::PixelShiftPad { offset, .. } => {
                if ![8, 16, 32, 64, 128].contains(offset) {
                    return bad(format!("pad offset {offset} not in {{8,16,32,64,128}}"));
                }
            }
            AugmentParams::GridWarp { mesh, sigma } => {
                if ![70, 85, 100, 115, 130].contains(mesh) {
                    return bad(format!("warp mesh {mesh} not in {{70,85,100,115,130}}"));
                }
                if ![1.0, 2.0, 3.0, 4.0].contains(sigma) {
                    return bad(format!("warp sigma {sigma} not in {{1,2,3,4}}"));
                }
            }
            AugmentParams::Identity => {}
        }
        Ok(())
    }

    fn noise_seed(&self) -> u64 {
        self.warp_seed.unwrap_or_else(|| rng::str_key(&self.canonical_json()))
    }
}

impl fmt::Display for AugmentationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.params {
            AugmentParams::BlurResize { kernel, scale } => write!(f, "blur{kernel}@{scale}"),
            AugmentParams::ResizeSweep { scale } => write!(f, "resize@{scale}"),
            AugmentParams::GaussianNoise { patch, sigma } => write!(f, "noise{patch}/{sigma}"),
            AugmentParams::PixelShiftPad { offset, direction } => write!(f, "pad{offset}{direction:?}"),
            AugmentParams::GridWarp { mesh, sigma } => write!(f, "warp{mesh}/{sigma}"),
            AugmentParams::Identity => write!(f, "identity"),
        }?;
        if self.post_scale != 1.0 {
            write!(f, "x{}", self.post_scale)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationGrid {
    pub category: Category,
    pub specs: Vec<AugmentationSpec>,
}

/// Downscale applied after noise, padding and warping.
pub const HALF_SCALE: f64 = 0.5;

/// The 20-configuration grid for an image category.
pub fn build_grid(category: Category) -> Result<AugmentationGrid, AugmentError> {
    let specs: Vec<AugmentationSpec> = match category {
        Category::BlurResize => {
            let mut specs = Vec::new();
            for kernel in (5..=17).step_by(2) {
                for scale in [1.0, 0.75, 0.5] {
                    if kernel == 17 && scale == 0.5 {
                        continue;
                    }
                    specs.push(AugmentationSpec::new(AugmentParams::BlurResize { kernel, scale }, 1.0));
                }
            }
            specs
        }
        Category::ResizeSweep => (30..=130)
            .step_by(5)
            .filter(|&pct| pct != 100)
            .map(|pct| {
                AugmentationSpec::new(
                    AugmentParams::ResizeSweep {
                        scale: pct as f64 / 100.0,
                    },
                    1.0,
                )
            })
            .collect(),
        Category::GaussianNoise => [2, 4, 8, 16]
            .into_iter()
            .flat_map(|patch| {
                [4.0, 6.0, 8.0, 10.0, 15.0]
                    .into_iter()
                    .map(move |sigma| AugmentationSpec::new(AugmentParams::GaussianNoise { patch, sigma }, HALF_SCALE))
            })
            .collect(),
        Category::PixelShiftPad => [8, 16, 32, 64, 128]
            .into_iter()
            .flat_map(|offset| {
                Direction::ALL.into_iter().map(move |direction| {
                    AugmentationSpec::new(AugmentParams::PixelShiftPad { offset, direction }, HALF_SCALE)
                })
            })
            .collect(),
        Category::GridWarp => [70, 85, 100, 115, 130]
            .into_iter()
            .flat_map(|mesh| [1.0, 2.0, 3.0, 4.0].into_iter().map(move |sigma| (mesh, sigma)))
            .enumerate()
            .map(|(i, (mesh, sigma))| AugmentationSpec {
                params: AugmentParams::GridWarp { mesh, sigma },
                post_scale: HALF_SCALE,
                warp_seed: Some(i as u64),
            })
            .collect(),
        Category::Identity => return Err(AugmentError::NoGrid(category)),
    };
    Ok(AugmentationGrid { category, specs })
}

/// Applies `spec` to `img`. Pure: the same inputs give the same bytes.
pub fn apply_augmentation(img: &DocumentImage, spec: &AugmentationSpec) -> Result<DocumentImage, AugmentError> {
    let distorted = match &spec.params {
        AugmentParams::BlurResize { kernel, scale } => {
            let blurred = gaussian_blur(img, *kernel as usize);
            scale_by(&blurred, *scale)?
        }
        AugmentParams::ResizeSweep { scale } => scale_by(img, *scale)?,
        AugmentParams::GaussianNoise { patch, sigma } => patch_noise(img, *patch as usize, *sigma, spec.noise_seed()),
        AugmentParams::PixelShiftPad { offset, direction } => pad_shift(img, *offset as usize, *direction),
        AugmentParams::GridWarp { mesh, sigma } => grid_warp(img, *mesh, *sigma, spec.noise_seed())?,
        AugmentParams::Identity => img.clone(),
    };
    scale_by(&distorted, spec.post_scale)
}
