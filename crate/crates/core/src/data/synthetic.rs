//! Procedurally generated scenes with known labels, used as desk-scale
//! fixtures for the gaze decoder and the eye-contact stand-in.
//!
//! Gaze scenes show a head disk on a noisy background; in-frame samples add a
//! bright dot at the target. Eye-contact faces draw two eyes whose pupils are
//! centered (contact) or displaced (averted).

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_filled_ellipse_mut};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{AnnotatedSample, SampleLabel};
use crate::frame::FrameImage;
use crate::types::{HeadBox, Point};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image: FrameImage,
    pub head: HeadBox,
    pub label: SampleLabel,
    pub target: Option<Point>,
}

impl SyntheticScene {
    pub fn to_sample(
        &self,
        image_ref: impl Into<String>,
        source: impl Into<String>,
    ) -> AnnotatedSample {
        AnnotatedSample::new(image_ref, self.head, self.label, self.target, source)
            .expect("generator emits valid annotations")
    }
}

fn noisy_background(rng: &mut impl Rng, w: u32, h: u32) -> RgbImage {
    let base: [f64; 3] = [
        rng.random_range(50.0..110.0),
        rng.random_range(50.0..110.0),
        rng.random_range(50.0..110.0),
    ];
    RgbImage::from_fn(w, h, |_, _| {
        let n = rng.random_range(-18.0..18.0);
        Rgb(base.map(|b| (b + n).clamp(0.0, 255.0) as u8))
    })
}

fn skin(rng: &mut impl Rng) -> Rgb<u8> {
    Rgb([
        rng.random_range(170..230),
        rng.random_range(120..170),
        rng.random_range(90..130),
    ])
}

/// One gaze scene of `size`×`size` pixels.
pub fn gaze_scene(rng: &mut impl Rng, size: u32, in_frame: bool) -> SyntheticScene {
    let s = size as f64;
    let mut img = noisy_background(rng, size, size);
    let radius = rng.random_range(0.05..0.08);
    let hc = (rng.random_range(0.12..0.88), rng.random_range(0.12..0.88));
    draw_filled_circle_mut(
        &mut img,
        ((hc.0 * s) as i32, (hc.1 * s) as i32),
        (radius * s) as i32,
        skin(rng),
    );
    let head = HeadBox::new(
        (hc.0 - radius).max(0.0),
        (hc.1 - radius).max(0.0),
        (hc.0 + radius).min(1.0),
        (hc.1 + radius).min(1.0),
        1.0,
    )
    .expect("head inside frame");

    let target = in_frame.then(|| loop {
        let t = (rng.random_range(0.06..0.94), rng.random_range(0.06..0.94));
        if (t.0 - hc.0).hypot(t.1 - hc.1) > radius + 0.1 {
            break t;
        }
    });
    if let Some((tx, ty)) = target {
        draw_filled_circle_mut(
            &mut img,
            ((tx * s) as i32, (ty * s) as i32),
            ((0.02 * s) as i32).max(1),
            Rgb([250, 250, 250]),
        );
    }
    SyntheticScene {
        image: FrameImage::new(img).expect("non-empty"),
        head,
        label: if in_frame {
            SampleLabel::IFT
        } else {
            SampleLabel::OFT
        },
        target,
    }
}

/// `n` gaze scenes, the first `round(n * ift_fraction)` in-frame, shuffled
/// deterministically by `seed`.
pub fn gaze_dataset(n: usize, size: u32, ift_fraction: f64, seed: u64) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_in = (n as f64 * ift_fraction).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < n_in).collect();
    for i in (1..flags.len()).rev() {
        let j = rng.random_range(0..=i);
        flags.swap(i, j);
    }
    flags
        .into_iter()
        .map(|f| gaze_scene(&mut rng, size, f))
        .collect()
}

/// A frame holding one face whose pupils are centered when `eye_contact`.
pub fn eye_contact_face(rng: &mut impl Rng, size: u32, eye_contact: bool) -> SyntheticScene {
    let s = size as f64;
    let mut img = noisy_background(rng, size, size);
    let r = rng.random_range(0.22..0.3);
    let c = (
        rng.random_range(r + 0.02..1.0 - r - 0.02),
        rng.random_range(r + 0.02..1.0 - r - 0.02),
    );
    let px = |v: f64| (v * s).round() as i32;
    draw_filled_circle_mut(&mut img, (px(c.0), px(c.1)), px(r), skin(rng));

    let eye_rx = 0.28 * r;
    let eye_ry = 0.16 * r;
    let pupil = 0.12 * r;
    let (dx, dy) = if eye_contact {
        (0.0, 0.0)
    } else {
        let ang: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let mag = rng.random_range(0.55..0.8) * (eye_rx - pupil);
        (mag * ang.cos(), mag * ang.sin() * eye_ry / eye_rx)
    };
    for side in [-1.0, 1.0] {
        let ex = c.0 + side * 0.4 * r;
        let ey = c.1 - 0.2 * r;
        draw_filled_ellipse_mut(
            &mut img,
            (px(ex), px(ey)),
            px(eye_rx),
            px(eye_ry),
            Rgb([245, 245, 245]),
        );
        draw_filled_circle_mut(
            &mut img,
            (px(ex + dx), px(ey + dy)),
            px(pupil).max(1),
            Rgb([20, 20, 30]),
        );
    }
    let head = HeadBox::new(c.0 - r, c.1 - r, c.0 + r, c.1 + r, 1.0).expect("face inside frame");
    SyntheticScene {
        image: FrameImage::new(img).expect("non-empty"),
        head,
        label: if eye_contact {
            SampleLabel::EC
        } else {
            SampleLabel::OFT
        },
        target: None,
    }
}

pub fn eye_contact_dataset(
    n: usize,
    size: u32,
    ec_fraction: f64,
    seed: u64,
) -> Vec<SyntheticScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let ec = rng.random_bool(ec_fraction);
            eye_contact_face(&mut rng, size, ec)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_is_deterministic_and_balanced() {
        let a = gaze_dataset(20, 64, 0.75, 5);
        let b = gaze_dataset(20, 64, 0.75, 5);
        assert_eq!(a, b);
        assert_eq!(a.iter().filter(|s| s.label == SampleLabel::IFT).count(), 15);
        for s in &a {
            assert_eq!(s.target.is_some(), s.label == SampleLabel::IFT);
        }
    }

    #[test]
    fn target_dot_is_bright() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = gaze_scene(&mut rng, 448, true);
        let (tx, ty) = s.target.unwrap();
        let p = s
            .image
            .pixels()
            .get_pixel((tx * 448.0) as u32, (ty * 448.0) as u32);
        assert_eq!(p, &Rgb([250, 250, 250]));
    }

    #[test]
    fn faces_carry_ec_labels() {
        let faces = eye_contact_dataset(30, 96, 0.5, 2);
        assert!(faces.iter().any(|f| f.label == SampleLabel::EC));
        assert!(faces.iter().any(|f| f.label == SampleLabel::OFT));
    }
}
