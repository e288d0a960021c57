//! Photometric training augmentations followed by a fixed resize.
//!
//! Color jitter and random grayscale never move pixels, so head boxes and
//! gaze targets in normalized coordinates pass through untouched.

use image::Rgb;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::frame::FrameImage;
use crate::types::{HeadBox, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Brightness factor drawn from `[1 - b, 1 + b]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub grayscale_prob: f64,
    pub output_size: (u32, u32),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            grayscale_prob: 0.2,
            output_size: (448, 448),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub image: FrameImage,
    pub head: HeadBox,
    pub target: Option<Point>,
}

fn luma(p: [f64; 3]) -> f64 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn factor(rng: &mut ChaCha8Rng, spread: f64) -> f64 {
    if spread <= 0.0 {
        1.0
    } else {
        rng.random_range((1.0 - spread).max(0.0)..=1.0 + spread)
    }
}

pub fn augment(
    img: &FrameImage,
    head: HeadBox,
    target: Option<Point>,
    cfg: &AugmentConfig,
    seed: u64,
) -> Augmented {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = factor(&mut rng, cfg.brightness);
    let c = factor(&mut rng, cfg.contrast);
    let s = factor(&mut rng, cfg.saturation);
    let gray = rng.random_bool(cfg.grayscale_prob.clamp(0.0, 1.0));

    let src = img.pixels();
    let n = (src.width() * src.height()) as f64;
    let mean_luma = src
        .pixels()
        .map(|p| b * luma([p[0] as f64, p[1] as f64, p[2] as f64]))
        .sum::<f64>()
        / n;

    let mut out = src.clone();
    for px in out.pixels_mut() {
        let mut v = [px[0] as f64 * b, px[1] as f64 * b, px[2] as f64 * b];
        for ch in v.iter_mut() {
            *ch = c * *ch + (1.0 - c) * mean_luma;
        }
        let l = luma(v);
        for ch in v.iter_mut() {
            *ch = s * *ch + (1.0 - s) * l;
        }
        if gray {
            let l = luma(v);
            v = [l, l, l];
        }
        let q = |x: f64| x.round().clamp(0.0, 255.0) as u8;
        *px = Rgb([q(v[0]), q(v[1]), q(v[2])]);
    }
    let jittered = FrameImage::new(out).expect("same size as a valid frame");
    let (w, h) = cfg.output_size;
    Augmented {
        image: jittered.resized(w, h),
        head,
        target,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (FrameImage, HeadBox) {
        let img =
            FrameImage::from_fn(120, 90, |x, y| Rgb([(x * 2) as u8, (y * 2) as u8, 128])).unwrap();
        (img, HeadBox::from_corners([0.1, 0.2, 0.3, 0.4]).unwrap())
    }

    #[test]
    fn seeded_runs_are_identical() {
        let (img, head) = sample();
        let cfg = AugmentConfig::default();
        let a = augment(&img, head, Some((0.5, 0.5)), &cfg, 42);
        let b = augment(&img, head, Some((0.5, 0.5)), &cfg, 42);
        assert_eq!(a, b);
        let c = augment(&img, head, Some((0.5, 0.5)), &cfg, 43);
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn annotations_unchanged_and_size_fixed() {
        let (img, head) = sample();
        for seed in 0..20 {
            let a = augment(
                &img,
                head,
                Some((0.25, 0.75)),
                &AugmentConfig::default(),
                seed,
            );
            assert_eq!(a.head, head);
            assert_eq!(a.target, Some((0.25, 0.75)));
            assert_eq!((a.image.width(), a.image.height()), (448, 448));
        }
    }

    #[test]
    fn grayscale_always_when_prob_one() {
        let (img, head) = sample();
        let cfg = AugmentConfig {
            grayscale_prob: 1.0,
            output_size: (120, 90),
            ..Default::default()
        };
        let a = augment(&img, head, None, &cfg, 7);
        assert!(a
            .image
            .pixels()
            .pixels()
            .all(|p| p[0] == p[1] && p[1] == p[2]));
    }
}
