//! Shared fixtures for the benchmarks.

use gt360_core::gazenet::{GazeModel, GazeNetConfig};
use gt360_core::nn::Mat;
use gt360_core::{FrameImage, HeadBox, HeatmapGrid};

/// A desk-scale model with one encoded frame and a head box.
pub fn desk_fixture() -> (GazeModel, Mat, HeadBox) {
    let model = GazeModel::new(GazeNetConfig::desk(), 0).expect("desk config is valid");
    let s = model.config.input_size as u32;
    let img = FrameImage::from_fn(s, s, image_pixel).expect("non-empty");
    let features = model.encode_frame(&img).expect("matching input size");
    let head = HeadBox::new(0.4, 0.2, 0.55, 0.4, 1.0).expect("valid box");
    (model, features, head)
}

fn image_pixel(x: u32, y: u32) -> image::Rgb<u8> {
    image::Rgb([
        (x * 7 % 256) as u8,
        (y * 13 % 256) as u8,
        ((x ^ y) % 256) as u8,
    ])
}

/// A deterministic heatmap with a few ties.
pub fn heatmap_fixture() -> HeatmapGrid {
    HeatmapGrid::from_fn(|r, c| ((r * 31 + c * 17) % 97) as f64 / 97.0).expect("values in [0, 1]")
}
