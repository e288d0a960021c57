use std::path::Path;

use image::{imageops::FilterType, RgbImage};

use crate::error::{Error, Result};
use crate::types::HeadBox;

/// An 8-bit RGB frame, the unit of inference.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pixels: RgbImage,
    /// Where the frame was loaded from, if anywhere. Scripted detectors key on it.
    origin: Option<String>,
}

/// Pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
}

impl PixelRect {
    pub fn width(&self) -> u32 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> u32 {
        self.y1 - self.y0
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }
}

impl FrameImage {
    pub fn new(pixels: RgbImage) -> Result<Self> {
        if pixels.width() == 0 || pixels.height() == 0 {
            return Err(Error::InvalidValue("frame must be at least 1x1".into()));
        }
        Ok(FrameImage {
            pixels,
            origin: None,
        })
    }

    pub fn from_raw(width: u32, height: u32, data: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        let actual = data.len();
        let pixels = RgbImage::from_raw(width, height, data)
            .ok_or_else(|| Error::shape("frame buffer", expected, actual))?;
        Self::new(pixels)
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        f: impl FnMut(u32, u32) -> image::Rgb<u8>,
    ) -> Result<Self> {
        Self::new(RgbImage::from_fn(width, height, f))
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let pixels = image::open(path)?.to_rgb8();
        let mut frame = Self::new(pixels)?;
        frame.origin = Some(path.to_string_lossy().into_owned());
        Ok(frame)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.pixels.save(path.as_ref())?;
        Ok(())
    }

    pub fn with_origin(mut self, origin: impl Into<String>) -> Self {
        self.origin = Some(origin.into());
        self
    }

    pub fn origin(&self) -> Option<&str> {
        self.origin.as_deref()
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut RgbImage {
        &mut self.pixels
    }

    /// Aspect-distorting resize with a triangle filter.
    pub fn resized(&self, width: u32, height: u32) -> FrameImage {
        if self.width() == width && self.height() == height {
            return self.clone();
        }
        FrameImage {
            pixels: image::imageops::resize(&self.pixels, width, height, FilterType::Triangle),
            origin: self.origin.clone(),
        }
    }

    /// Pixel rectangle covered by `head` grown by `pad` times its size on
    /// each side, clamped to the frame.
    pub fn crop_rect(&self, head: &HeadBox, pad: f64) -> Result<PixelRect> {
        head.validate()?;
        if !(pad >= 0.0 && pad.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "crop pad must be >= 0, got {pad}"
            )));
        }
        let (w, h) = (self.width() as f64, self.height() as f64);
        let px = pad * head.width();
        let py = pad * head.height();
        let edge = |v: f64, scale: f64| (v * scale).round().clamp(0.0, scale) as u32;
        let rect = PixelRect {
            x0: edge(head.x_min - px, w),
            y0: edge(head.y_min - py, h),
            x1: edge(head.x_max + px, w),
            y1: edge(head.y_max + py, h),
        };
        if rect.x1 <= rect.x0 || rect.y1 <= rect.y0 {
            return Err(Error::DegenerateCrop(format!(
                "box {:?} covers no pixels on a {}x{} frame",
                head.corners(),
                self.width(),
                self.height()
            )));
        }
        Ok(rect)
    }

    /// Sub-image under the padded head box.
    pub fn crop_head(&self, head: &HeadBox, pad: f64) -> Result<FrameImage> {
        let r = self.crop_rect(head, pad)?;
        let view = image::imageops::crop_imm(&self.pixels, r.x0, r.y0, r.width(), r.height());
        Ok(FrameImage {
            pixels: view.to_image(),
            origin: None,
        })
    }

    /// Channel-last float tensor of shape `(h*w, 3)` with values in `[0, 1]`,
    /// rows in raster order.
    pub fn to_unit_rows(&self) -> ndarray::Array2<f64> {
        let (w, h) = (self.width() as usize, self.height() as usize);
        let raw = self.pixels.as_raw();
        ndarray::Array2::from_shape_fn((w * h, 3), |(i, c)| raw[i * 3 + c] as f64 / 255.0)
    }
}
