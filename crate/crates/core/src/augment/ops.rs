use rand_distr::{Distribution, StandardNormal};

use super::{AugmentError, Direction};
use crate::model::DocumentImage;
use crate::rng;

fn rebuild(src: &DocumentImage, width: usize, height: usize, pixels: Vec<u8>) -> DocumentImage {
    DocumentImage::new(src.id.clone(), width, height, src.channels(), pixels).expect("dimensions checked by caller")
}

#[inline]
fn to_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Standard deviation used for a `k`-pixel Gaussian window.
pub fn blur_sigma(kernel: usize) -> f64 {
    0.3 * ((kernel as f64 - 1.0) / 2.0 - 1.0) + 0.8
}

fn gaussian_weights(kernel: usize) -> Vec<f32> {
    let sigma = blur_sigma(kernel);
    let half = (kernel / 2) as isize;
    let raw: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|w| (w / total) as f32).collect()
}

/// Separable Gaussian blur with a `kernel`-px window and replicated edges.
pub fn gaussian_blur(img: &DocumentImage, kernel: usize) -> DocumentImage {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let weights = gaussian_weights(kernel.max(1) | 1);
    let half = (weights.len() / 2) as isize;
    let src = img.pixels();

    let mut horiz = vec![0f32; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f32;
                for (i, wt) in weights.iter().enumerate() {
                    let sx = (x as isize + i as isize - half).clamp(0, w as isize - 1) as usize;
                    acc += wt * src[(y * w + sx) * ch + c] as f32;
                }
                horiz[(y * w + x) * ch + c] = acc;
            }
        }
    }
    let mut out = vec![0u8; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f32;
                for (i, wt) in weights.iter().enumerate() {
                    let sy = (y as isize + i as isize - half).clamp(0, h as isize - 1) as usize;
                    acc += wt * horiz[(sy * w + x) * ch + c];
                }
                out[(y * w + x) * ch + c] = to_u8(acc);
            }
        }
    }
    rebuild(img, w, h, out)
}

#[inline]
fn sample_bilinear(img: &DocumentImage, fx: f32, fy: f32, c: usize) -> f32 {
    let max_x = (img.width() - 1) as f32;
    let max_y = (img.height() - 1) as f32;
    let fx = fx.clamp(0.0, max_x);
    let fy = fy.clamp(0.0, max_y);
    let x0 = fx.floor() as usize;
    let y0 = fy.floor() as usize;
    let x1 = (x0 + 1).min(img.width() - 1);
    let y1 = (y0 + 1).min(img.height() - 1);
    let tx = fx - x0 as f32;
    let ty = fy - y0 as f32;
    let top = img.get(x0, y0, c) as f32 * (1.0 - tx) + img.get(x1, y0, c) as f32 * tx;
    let bottom = img.get(x0, y1, c) as f32 * (1.0 - tx) + img.get(x1, y1, c) as f32 * tx;
    top * (1.0 - ty) + bottom * ty
}

/// Bilinear resampling with pixel-centre alignment.
pub fn resize_bilinear(img: &DocumentImage, new_w: usize, new_h: usize) -> DocumentImage {
    let ch = img.channels();
    let sx = img.width() as f32 / new_w as f32;
    let sy = img.height() as f32 / new_h as f32;
    let mut out = vec![0u8; new_w * new_h * ch];
    for y in 0..new_h {
        let fy = (y as f32 + 0.5) * sy - 0.5;
        for x in 0..new_w {
            let fx = (x as f32 + 0.5) * sx - 0.5;
            for c in 0..ch {
                out[(y * new_w + x) * ch + c] = to_u8(sample_bilinear(img, fx, fy, c));
            }
        }
    }
    rebuild(img, new_w, new_h, out)
}

/// Resizes both axes by `scale` (rounded); a scale of exactly 1 is a no-op.
pub fn scale_by(img: &DocumentImage, scale: f64) -> Result<DocumentImage, AugmentError> {
    if scale == 1.0 {
        return Ok(img.clone());
    }
    let new_w = (img.width() as f64 * scale).round();
    let new_h = (img.height() as f64 * scale).round();
    if !(new_w >= 1.0 && new_h >= 1.0) {
        return Err(AugmentError::ZeroArea {
            width: img.width(),
            height: img.height(),
            scale,
        });
    }
    Ok(resize_bilinear(img, new_w as usize, new_h as usize))
}

/// Adds N(0, sigma^2) offsets drawn on a coarse `patch`-px grid per channel
/// and upsampled by nearest neighbour.
pub fn patch_noise(img: &DocumentImage, patch: usize, sigma: f64, seed: u64) -> DocumentImage {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let patch = patch.max(1);
    let gw = w.div_ceil(patch);
    let gh = h.div_ceil(patch);
    let mut stream = rng::stream(&[seed, patch as u64, sigma.to_bits(), 0x4015E]);
    let field: Vec<f32> = (0..gw * gh * ch)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut stream);
            (z * sigma) as f32
        })
        .collect();
    let src = img.pixels();
    let mut out = vec![0u8; w * h * ch];
    for y in 0..h {
        for x in 0..w {
            let cell = (y / patch) * gw + x / patch;
            for c in 0..ch {
                let i = (y * w + x) * ch + c;
                out[i] = to_u8(src[i] as f32 + field[cell * ch + c]);
            }
        }
    }
    rebuild(img, w, h, out)
}

/// Places the page on a white canvas `offset` px larger in each dimension,
/// pushed into the `direction` corner.
pub fn pad_shift(img: &DocumentImage, offset: usize, direction: Direction) -> DocumentImage {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let (new_w, new_h) = (w + offset, h + offset);
    let (left, top) = match direction {
        Direction::NE => (offset, 0),
        Direction::SE => (offset, offset),
        Direction::SW => (0, offset),
        Direction::NW => (0, 0),
    };
    let mut out = vec![255u8; new_w * new_h * ch];
    let row = w * ch;
    for y in 0..h {
        let dst = ((y + top) * new_w + left) * ch;
        out[dst..dst + row].copy_from_slice(&img.pixels()[y * row..(y + 1) * row]);
    }
    rebuild(img, new_w, new_h, out)
}

/// Backward warp through a displacement field interpolated from a lattice of
/// `mesh`-px spaced control points, each moved by N(0, sigma^2) in x and y.
pub fn grid_warp(img: &DocumentImage, mesh: u32, sigma: f64, seed: u64) -> Result<DocumentImage, AugmentError> {
    let (w, h, ch) = (img.width(), img.height(), img.channels());
    let step = mesh as usize;
    if step == 0 || w < step || h < step {
        return Err(AugmentError::TooSmallForMesh {
            width: w,
            height: h,
            mesh,
        });
    }
    let nodes_x = w / step + 1;
    let nodes_y = h / step + 1;
    let mut stream = rng::stream(&[seed, 0x3A39]);
    let mut draw = || -> f32 {
        let z: f64 = StandardNormal.sample(&mut stream);
        (z * sigma) as f32
    };
    let offsets: Vec<(f32, f32)> = (0..nodes_x * nodes_y).map(|_| (draw(), draw())).collect();

    let lattice_coord = |p: usize, nodes: usize| -> (usize, usize, f32) {
        let f = p as f32 / step as f32;
        let i0 = (f.floor() as usize).min(nodes - 1);
        let i1 = (i0 + 1).min(nodes - 1);
        let t = if i0 == i1 { 0.0 } else { f - i0 as f32 };
        (i0, i1, t)
    };

    let mut out = vec![0u8; w * h * ch];
    for y in 0..h {
        let (r0, r1, ty) = lattice_coord(y, nodes_y);
        for x in 0..w {
            let (c0, c1, tx) = lattice_coord(x, nodes_x);
            let node = |r: usize, c: usize| offsets[r * nodes_x + c];
            let lerp = |a: (f32, f32), b: (f32, f32), t: f32| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
            let top = lerp(node(r0, c0), node(r0, c1), tx);
            let bottom = lerp(node(r1, c0), node(r1, c1), tx);
            let (dx, dy) = lerp(top, bottom, ty);
            for c in 0..ch {
                out[(y * w + x) * ch + c] = to_u8(sample_bilinear(img, x as f32 + dx, y as f32 + dy, c));
            }
        }
    }
    Ok(rebuild(img, w, h, out))
}

#[cfg(test)]
mod tests {
    use super::super::{apply_augmentation, AugmentParams, AugmentationSpec};
    use super::*;
    use proptest::prelude::*;

    fn gradient(w: usize, h: usize, ch: usize) -> DocumentImage {
        let px = (0..w * h * ch).map(|i| ((i * 31 + i / 7) % 256) as u8).collect();
        DocumentImage::new("g", w, h, ch, px).unwrap()
    }

    #[test]
    fn blur_sigma_rule() {
        assert!((blur_sigma(5) - 1.1).abs() < 1e-12);
        assert!((blur_sigma(17) - 2.9).abs() < 1e-12);
    }

    #[test]
    fn blur_of_constant_is_constant() {
        for k in (5..=17).step_by(2) {
            let img = DocumentImage::filled("c", 40, 30, 3, 137).unwrap();
            assert_eq!(gaussian_blur(&img, k), img);
        }
    }

    #[test]
    fn blur_preserves_mean_on_smooth_images() {
        let px = (0..120 * 120)
            .map(|i| {
                let (x, y) = (i % 120, i / 120);
                (128.0 + 60.0 * ((x as f64) / 9.0).sin() * ((y as f64) / 13.0).cos()) as u8
            })
            .collect();
        let img = DocumentImage::new("s", 120, 120, 1, px).unwrap();
        for k in [5, 11, 17] {
            let out = gaussian_blur(&img, k);
            assert!((out.mean_intensity() - img.mean_intensity()).abs() <= 1.0, "k={k}");
        }
    }

    #[test]
    fn pad_ne_puts_content_top_right() {
        let img = gradient(100, 100, 1);
        let spec = AugmentationSpec::new(
            AugmentParams::PixelShiftPad {
                offset: 32,
                direction: Direction::NE,
            },
            1.0,
        );
        let out = apply_augmentation(&img, &spec).unwrap();
        assert_eq!((out.width(), out.height()), (132, 132));
        for y in 0..100 {
            for x in 0..100 {
                assert_eq!(out.get(x + 32, y, 0), img.get(x, y, 0));
            }
        }
        assert!((0..132).all(|x| out.get(x, 131, 0) == 255));
        assert!((0..132).all(|y| out.get(0, y, 0) == 255));
    }

    #[test]
    fn pad_dimensions_every_direction() {
        let img = gradient(37, 23, 3);
        for dir in Direction::ALL {
            let out = pad_shift(&img, 16, dir);
            assert_eq!((out.width(), out.height()), (53, 39));
        }
    }

    #[test]
    fn zero_sigma_warp_is_identity() {
        let img = gradient(150, 90, 1);
        let out = grid_warp(&img, 70, 0.0, 3).unwrap();
        assert_eq!(out, img);
        let spec = AugmentationSpec {
            params: AugmentParams::GridWarp { mesh: 70, sigma: 0.0 },
            post_scale: 0.5,
            warp_seed: Some(1),
        };
        let scaled = apply_augmentation(&img, &spec).unwrap();
        assert_eq!(scaled, scale_by(&img, 0.5).unwrap());
    }

    #[test]
    fn warp_keeps_dimensions_and_needs_a_mesh() {
        let img = gradient(150, 90, 3);
        let out = grid_warp(&img, 85, 4.0, 9).unwrap();
        assert_eq!((out.width(), out.height()), (150, 90));
        assert_ne!(out, img);
        assert!(matches!(
            grid_warp(&gradient(60, 200, 1), 70, 1.0, 0),
            Err(AugmentError::TooSmallForMesh { .. })
        ));
    }

    #[test]
    fn noise_is_constant_per_patch() {
        let img = DocumentImage::filled("n", 64, 64, 1, 128).unwrap();
        let out = patch_noise(&img, 16, 10.0, 42);
        let mut distinct = Vec::new();
        for py in 0..4 {
            for px in 0..4 {
                let v = out.get(px * 16, py * 16, 0);
                for y in 0..16 {
                    for x in 0..16 {
                        assert_eq!(out.get(px * 16 + x, py * 16 + y, 0), v);
                    }
                }
                distinct.push(v);
            }
        }
        distinct.sort();
        distinct.dedup();
        assert!(distinct.len() > 4, "noise field looks degenerate: {distinct:?}");
    }

    #[test]
    fn downscale_halves_dimensions() {
        let out = scale_by(&gradient(201, 99, 1), 0.5).unwrap();
        assert_eq!((out.width(), out.height()), (101, 50));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn augmentation_is_pure(idx in 0usize..100, seed in 0u64..4) {
            let cats = super::super::Category::IMAGE;
            let grid = super::super::build_grid(cats[idx / 20]).unwrap();
            let mut spec = grid.specs[idx % 20].clone();
            if spec.warp_seed.is_some() {
                spec.warp_seed = Some(seed);
            }
            let img = gradient(140, 140, 1);
            let a = apply_augmentation(&img, &spec).unwrap();
            let b = apply_augmentation(&img, &spec).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
