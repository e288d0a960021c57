//! Conditional inference: detect heads, score eye contact, and run the gaze
//! decoder only for heads that are not looking at the camera.

use std::sync::atomic::{AtomicUsize, Ordering};

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::detect::DetectorHandle;
use crate::error::{Error, Result};
use crate::eyecontact::EyeContactScorer;
use crate::frame::FrameImage;
use crate::gazenet::GazeModel;
use crate::types::{GazeClass, GazeVerdict, HeadBox, HeatmapGrid, PipelineConfig, HEATMAP_SIZE};

/// Three-way decision: eye contact when `p_ec >= sigma`, otherwise in-frame
/// when `p_ift >= ift_threshold`, otherwise out-of-frame.
pub fn classify(p_ec: f64, p_ift: f64, cfg: &PipelineConfig) -> GazeClass {
    if p_ec >= cfg.sigma {
        GazeClass::EyeContact
    } else if p_ift >= cfg.ift_threshold {
        GazeClass::InFrame
    } else {
        GazeClass::OutOfFrame
    }
}

/// Result for one detected head; failures stay local to the head.
#[derive(Debug)]
pub struct HeadOutcome {
    pub head: HeadBox,
    pub result: Result<GazeVerdict>,
    /// Decoder heatmap whenever the decoder ran, whatever the verdict class.
    /// Evaluation scores it for every in-frame annotation.
    pub heatmap: Option<HeatmapGrid>,
}

pub struct Gt360System {
    pub detector: DetectorHandle,
    pub ec: Box<dyn EyeContactScorer>,
    pub gaze: GazeModel,
    pub config: PipelineConfig,
    encode_calls: AtomicUsize,
    decode_calls: AtomicUsize,
}

impl Gt360System {
    pub fn new(
        detector: DetectorHandle,
        ec: Box<dyn EyeContactScorer>,
        gaze: GazeModel,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let s = gaze.config.input_size;
        if config.input_size != (s, s) {
            return Err(Error::InvalidValue(format!(
                "pipeline input_size {:?} does not match gaze encoder input {s}x{s}",
                config.input_size
            )));
        }
        Ok(Gt360System {
            detector,
            ec,
            gaze,
            config,
            encode_calls: AtomicUsize::new(0),
            decode_calls: AtomicUsize::new(0),
        })
    }

    /// Number of scene encodings performed so far.
    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::SeqCst)
    }

    /// Number of per-head gaze decodings performed so far.
    pub fn decode_calls(&self) -> usize {
        self.decode_calls.load(Ordering::SeqCst)
    }

    /// One outcome per detected head, in detection order. A detector failure
    /// aborts the frame.
    pub fn infer_frame(&self, img: &FrameImage) -> Result<Vec<HeadOutcome>> {
        let heads = self.detector.detect_heads(img)?;
        let scores = self.ec.batch_predict_ec(img, &heads);
        let needs_gaze = scores
            .iter()
            .any(|s| matches!(s, Ok(p) if *p < self.config.sigma));
        let fused = if needs_gaze {
            self.encode_calls.fetch_add(1, Ordering::SeqCst);
            let (w, h) = self.config.input_size;
            let feats = self.gaze.encoder.encode(&img.resized(w as u32, h as u32));
            Some(feats.and_then(|f| self.gaze.fuse(&f)))
        } else {
            None
        };

        Ok(heads
            .into_iter()
            .zip(scores)
            .map(|(head, score)| {
                let mut heatmap = None;
                let result = score.and_then(|p_ec| {
                    if p_ec >= self.config.sigma {
                        return GazeVerdict::decide(head, p_ec, None, &self.config);
                    }
                    let fused = match fused.as_ref().expect("encoded when any head needs gaze") {
                        Ok(f) => f,
                        Err(e) => {
                            return Err(Error::InvalidValue(format!("scene encoding failed: {e}")))
                        }
                    };
                    self.decode_calls.fetch_add(1, Ordering::SeqCst);
                    let gaze = self.gaze.decode(fused, &head)?;
                    heatmap = Some(gaze.1.clone());
                    GazeVerdict::decide(head, p_ec, Some(gaze), &self.config)
                });
                HeadOutcome {
                    head,
                    result,
                    heatmap,
                }
            })
            .collect())
    }

    /// Verdicts of every head, failing on the first per-head error.
    pub fn infer_verdicts(&self, img: &FrameImage) -> Result<Vec<GazeVerdict>> {
        self.infer_frame(img)?
            .into_iter()
            .map(|o| o.result)
            .collect()
    }
}

pub const BOX_COLOR: Rgb<u8> = Rgb([0, 200, 0]);
pub const EC_TINT: Rgb<u8> = Rgb([0, 255, 0]);
pub const OFT_TINT: Rgb<u8> = Rgb([255, 0, 0]);
pub const ARROW_COLOR: Rgb<u8> = Rgb([255, 255, 0]);
pub const DOT_COLOR: Rgb<u8> = Rgb([0, 255, 0]);
const TINT_ALPHA: f64 = 0.4;
const HEATMAP_ALPHA: f64 = 0.6;

fn blend(p: &mut Rgb<u8>, c: Rgb<u8>, a: f64) {
    for k in 0..3 {
        p[k] = ((1.0 - a) * p[k] as f64 + a * c[k] as f64).round() as u8;
    }
}

fn head_rect(img: &RgbImage, head: &HeadBox) -> Option<(u32, u32, u32, u32)> {
    let (w, h) = (img.width() as f64, img.height() as f64);
    let x0 = (head.x_min * w).round() as u32;
    let y0 = (head.y_min * h).round() as u32;
    let x1 = ((head.x_max * w).round() as u32).min(img.width());
    let y1 = ((head.y_max * h).round() as u32).min(img.height());
    (x1 > x0 && y1 > y0).then_some((x0, y0, x1, y1))
}

/// Draws verdicts: green head boxes, a green tint for eye contact, a red
/// tint for out-of-frame, and for in-frame targets a heatmap overlay, an
/// arrow from the head and a green dot on the target.
pub fn render_overlay(img: &FrameImage, verdicts: &[GazeVerdict]) -> FrameImage {
    let mut out = img.clone();
    if verdicts.is_empty() {
        return out;
    }
    let canvas = out.pixels_mut();
    let (w, h) = (canvas.width(), canvas.height());

    for v in verdicts.iter().filter(|v| v.class == GazeClass::InFrame) {
        if let Some(hm) = &v.heatmap {
            for (x, y, p) in canvas.enumerate_pixels_mut() {
                let r = (y as usize * HEATMAP_SIZE / h as usize).min(HEATMAP_SIZE - 1);
                let c = (x as usize * HEATMAP_SIZE / w as usize).min(HEATMAP_SIZE - 1);
                let a = HEATMAP_ALPHA * hm.get(r, c);
                if a > 0.0 {
                    blend(p, Rgb([255, 64, 0]), a);
                }
            }
        }
    }

    for v in verdicts {
        let Some((x0, y0, x1, y1)) = head_rect(canvas, &v.head) else {
            continue;
        };
        let tint = match v.class {
            GazeClass::EyeContact => Some(EC_TINT),
            GazeClass::OutOfFrame => Some(OFT_TINT),
            GazeClass::InFrame => None,
        };
        if let Some(t) = tint {
            for y in y0..y1 {
                for x in x0..x1 {
                    blend(canvas.get_pixel_mut(x, y), t, TINT_ALPHA);
                }
            }
        }
        draw_hollow_rect_mut(
            canvas,
            Rect::at(x0 as i32, y0 as i32).of_size(x1 - x0, y1 - y0),
            BOX_COLOR,
        );
    }

    let px = |(x, y): (f64, f64)| ((x * w as f64) as f32, (y * h as f64) as f32);
    let radius = ((w.min(h) as f32) / 80.0).max(3.0) as i32;
    for v in verdicts.iter().filter(|v| v.class == GazeClass::InFrame) {
        let Some(t) = v.target_point else { continue };
        let (sx, sy) = px(v.head.center());
        let (tx, ty) = px(t);
        draw_line_segment_mut(canvas, (sx, sy), (tx, ty), ARROW_COLOR);
        let (dx, dy) = (tx - sx, ty - sy);
        let len = (dx * dx + dy * dy).sqrt();
        if len > 1.0 {
            let (ux, uy) = (dx / len, dy / len);
            let s = (3 * radius) as f32;
            for sign in [-1.0f32, 1.0] {
                let wing = (
                    tx - s * (ux - sign * 0.5 * uy),
                    ty - s * (uy + sign * 0.5 * ux),
                );
                draw_line_segment_mut(canvas, wing, (tx, ty), ARROW_COLOR);
            }
        }
    }
    for v in verdicts.iter().filter(|v| v.class == GazeClass::InFrame) {
        let Some(t) = v.target_point else { continue };
        let (tx, ty) = px(t);
        draw_filled_circle_mut(canvas, (tx as i32, ty as i32), radius, DOT_COLOR);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eyecontact::ScriptedEyeContact;
    use crate::gazenet::GazeNetConfig;
    use crate::types::HeatmapGrid;

    fn cfg() -> PipelineConfig {
        PipelineConfig::default()
    }

    #[test]
    fn classify_examples() {
        assert_eq!(classify(0.9, 0.99, &cfg()), GazeClass::EyeContact);
        assert_eq!(classify(0.85, 0.0, &cfg()), GazeClass::EyeContact);
        assert_eq!(classify(0.5, 0.3, &cfg()), GazeClass::OutOfFrame);
        assert_eq!(classify(0.84999, 0.5, &cfg()), GazeClass::InFrame);
    }

    fn frame() -> FrameImage {
        FrameImage::from_fn(120, 90, |x, y| Rgb([(x % 200) as u8, (y * 2) as u8, 40])).unwrap()
    }

    fn system(heads: Vec<HeadBox>, ec: ScriptedEyeContact) -> Gt360System {
        let gaze = GazeModel::new(GazeNetConfig::tiny(), 1).unwrap();
        Gt360System::new(DetectorHandle::scripted(heads), Box::new(ec), gaze, cfg()).unwrap()
    }

    #[test]
    fn no_heads_no_verdicts() {
        let s = system(vec![], ScriptedEyeContact::constant(0.1));
        assert!(s.infer_verdicts(&frame()).unwrap().is_empty());
        assert_eq!(s.encode_calls(), 0);
    }

    #[test]
    fn all_contact_skips_decoder() {
        let heads = vec![
            HeadBox::from_corners([0.1, 0.1, 0.3, 0.4]).unwrap(),
            HeadBox::from_corners([0.6, 0.1, 0.8, 0.4]).unwrap(),
        ];
        let s = system(heads, ScriptedEyeContact::constant(0.999));
        let v = s.infer_verdicts(&frame()).unwrap();
        assert!(v
            .iter()
            .all(|v| v.class == GazeClass::EyeContact && v.p_ift.is_none()));
        assert_eq!(s.decode_calls(), 0);
        assert_eq!(s.encode_calls(), 0);
    }

    #[test]
    fn mixed_heads_decode_once() {
        let a = HeadBox::from_corners([0.1, 0.1, 0.3, 0.4]).unwrap();
        let b = HeadBox::from_corners([0.6, 0.1, 0.8, 0.4]).unwrap();
        let s = system(vec![a, b], ScriptedEyeContact::new(vec![(a, 0.95)], 0.2));
        let v = s.infer_verdicts(&frame()).unwrap();
        assert_eq!(s.decode_calls(), 1);
        assert_eq!(v[0].class, GazeClass::EyeContact);
        assert!(v[1].p_ift.is_some());
    }

    #[test]
    fn empty_overlay_is_identity() {
        assert_eq!(render_overlay(&frame(), &[]), frame());
    }

    #[test]
    fn ec_overlay_stays_inside_box() {
        let head = HeadBox::from_corners([0.25, 0.2, 0.5, 0.6]).unwrap();
        let v = GazeVerdict::decide(head, 0.95, None, &cfg()).unwrap();
        let img = frame();
        let out = render_overlay(&img, &[v]);
        let (x0, y0, x1, y1) = head_rect(img.pixels(), &head).unwrap();
        let mut changed = 0;
        for (x, y, p) in out.pixels().enumerate_pixels() {
            let inside = x >= x0 && x < x1 && y >= y0 && y < y1;
            if p != img.pixels().get_pixel(x, y) {
                assert!(inside, "pixel ({x}, {y}) changed outside the box");
                changed += 1;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn ift_dot_is_centered() {
        let head = HeadBox::from_corners([0.05, 0.05, 0.2, 0.25]).unwrap();
        let hm = HeatmapGrid::from_fn(|r, c| if (r, c) == (32, 32) { 1.0 } else { 0.0 }).unwrap();
        let mut v = GazeVerdict::decide(head, 0.1, Some((0.9, hm)), &cfg()).unwrap();
        v.target_point = Some((0.5, 0.5));
        let img = FrameImage::from_fn(101, 81, |_, _| Rgb([30, 30, 30])).unwrap();
        let out = render_overlay(&img, &[v]);
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
        for (x, y, p) in out.pixels().enumerate_pixels() {
            if *p == DOT_COLOR {
                sx += x as f64;
                sy += y as f64;
                n += 1.0;
            }
        }
        assert!(n > 0.0);
        assert!((sx / n - 50.5).abs() <= 1.0 && (sy / n - 40.5).abs() <= 1.0);
    }
}
