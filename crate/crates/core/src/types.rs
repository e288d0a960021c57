//! Domain types shared by every stage of the system.
//!
//! All spatial quantities use normalized coordinates: `x` runs along the
//! frame width and `y` along the frame height, both in `[0, 1]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of the target-probability grid.
pub const HEATMAP_SIZE: usize = 64;

/// A normalized `(x, y)` point.
pub type Point = (f64, f64);

/// A detected head in normalized frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    pub confidence: f64,
}

impl HeadBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64, confidence: f64) -> Result<Self> {
        let b = HeadBox {
            x_min,
            y_min,
            x_max,
            y_max,
            confidence,
        };
        b.validate()?;
        Ok(b)
    }

    /// Builds a box from `[x_min, y_min, x_max, y_max]` with full confidence.
    pub fn from_corners(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3], 1.0)
    }

    /// Clamps raw detector output into the unit square. Returns `None` when
    /// nothing with positive area remains.
    pub fn clamped(
        x_min: f64,
        y_min: f64,
        x_max: f64,
        y_max: f64,
        confidence: f64,
    ) -> Option<Self> {
        let all = [x_min, y_min, x_max, y_max, confidence];
        if all.iter().any(|v| !v.is_finite()) {
            return None;
        }
        let c = |v: f64| v.clamp(0.0, 1.0);
        let b = HeadBox {
            x_min: c(x_min.min(x_max)),
            y_min: c(y_min.min(y_max)),
            x_max: c(x_max.max(x_min)),
            y_max: c(y_max.max(y_min)),
            confidence: c(confidence),
        };
        b.validate().ok().map(|_| b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.x_min,
            self.y_min,
            self.x_max,
            self.y_max,
            self.confidence,
        ]
        .iter()
        .all(|v| v.is_finite());
        let ok = finite
            && 0.0 <= self.x_min
            && self.x_min < self.x_max
            && self.x_max <= 1.0
            && 0.0 <= self.y_min
            && self.y_min < self.y_max
            && self.y_max <= 1.0
            && (0.0..=1.0).contains(&self.confidence);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidBox(format!("{self:?}")))
        }
    }

    pub fn corners(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn center(&self) -> Point {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
    }

    pub fn contains(&self, (x, y): Point) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    pub fn iou(&self, other: &HeadBox) -> f64 {
        let ix = (self.x_max.min(other.x_max) - self.x_min.max(other.x_min)).max(0.0);
        let iy = (self.y_max.min(other.y_max) - self.y_min.max(other.y_min)).max(0.0);
        let inter = ix * iy;
        let union = self.width() * self.height() + other.width() * other.height() - inter;
        if union > 0.0 {
            inter / union
        } else {
            0.0
        }
    }
}

/// How a single point is read off a heatmap.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointExtraction {
    /// Center of the maximal cell.
    #[default]
    Argmax,
    /// Probability-weighted centroid of cell centers.
    Centroid,
}

/// A 64×64 grid of gaze-target probabilities. Row index is `y`, column is `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    values: Array2<f64>,
}

impl HeatmapGrid {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.dim() != (HEATMAP_SIZE, HEATMAP_SIZE) {
            return Err(Error::shape(
                "heatmap",
                format!("{HEATMAP_SIZE}x{HEATMAP_SIZE}"),
                format!("{}x{}", values.nrows(), values.ncols()),
            ));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidValue(format!(
                "heatmap cell {bad} outside [0, 1]"
            )));
        }
        Ok(HeatmapGrid { values })
    }

    pub fn zeros() -> Self {
        HeatmapGrid {
            values: Array2::zeros((HEATMAP_SIZE, HEATMAP_SIZE)),
        }
    }

    pub fn from_fn(mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::new(Array2::from_shape_fn(
            (HEATMAP_SIZE, HEATMAP_SIZE),
            |(r, c)| f(r, c),
        ))
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    /// Center of the maximal cell, ties broken by smallest row then column.
    pub fn argmax_point(&self) -> Point {
        let (row, col) = self.argmax_cell();
        cell_center(row, col, HEATMAP_SIZE)
    }

    pub fn argmax_cell(&self) -> (usize, usize) {
        let mut best = (0, 0);
        let mut best_v = f64::NEG_INFINITY;
        for ((r, c), &v) in self.values.indexed_iter() {
            if v > best_v {
                best_v = v;
                best = (r, c);
            }
        }
        best
    }

    /// Probability-weighted mean of cell centers. Falls back to the argmax
    /// point for an all-zero grid.
    pub fn centroid_point(&self) -> Point {
        let total: f64 = self.values.sum();
        if total <= 0.0 {
            return self.argmax_point();
        }
        let (mut sx, mut sy) = (0.0, 0.0);
        for ((r, c), &v) in self.values.indexed_iter() {
            let (x, y) = cell_center(r, c, HEATMAP_SIZE);
            sx += v * x;
            sy += v * y;
        }
        (sx / total, sy / total)
    }

    pub fn point(&self, mode: PointExtraction) -> Point {
        match mode {
            PointExtraction::Argmax => self.argmax_point(),
            PointExtraction::Centroid => self.centroid_point(),
        }
    }
}

/// Normalized center of grid cell `(row, col)` on a `size`×`size` grid.
pub fn cell_center(row: usize, col: usize, size: usize) -> Point {
    (
        (col as f64 + 0.5) / size as f64,
        (row as f64 + 0.5) / size as f64,
    )
}

/// Grid cell `(row, col)` containing a normalized point.
pub fn point_cell((x, y): Point, size: usize) -> (usize, usize) {
    let idx = |v: f64| ((v * size as f64).floor().max(0.0) as usize).min(size - 1);
    (idx(y), idx(x))
}

/// The three gaze outcomes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GazeClass {
    /// Looking at the camera.
    #[serde(rename = "EC")]
    EyeContact,
    /// Looking at something outside the frame.
    #[serde(rename = "OFT")]
    OutOfFrame,
    /// Looking at something inside the frame.
    #[serde(rename = "IFT")]
    InFrame,
}

impl GazeClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            GazeClass::EyeContact => "EC",
            GazeClass::OutOfFrame => "OFT",
            GazeClass::InFrame => "IFT",
        }
    }
}

impl std::fmt::Display for GazeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-head result of the conditional inference.
#[derive(Debug, Clone, PartialEq)]
pub struct GazeVerdict {
    pub head: HeadBox,
    pub class: GazeClass,
    pub p_ec: f64,
    /// Absent when eye contact short-circuits the gaze decoder.
    pub p_ift: Option<f64>,
    /// Set for in-frame verdicts only, like `target_point`.
    pub heatmap: Option<HeatmapGrid>,
    /// Set for in-frame verdicts only.
    pub target_point: Option<Point>,
}

impl GazeVerdict {
    /// Applies the three-way decision rule. `gaze` carries the decoder output
    /// and must be present whenever `p_ec` falls below the eye-contact cut-off.
    pub fn decide(
        head: HeadBox,
        p_ec: f64,
        gaze: Option<(f64, HeatmapGrid)>,
        cfg: &PipelineConfig,
    ) -> Result<Self> {
        if p_ec >= cfg.sigma {
            return Ok(GazeVerdict {
                head,
                class: GazeClass::EyeContact,
                p_ec,
                p_ift: None,
                heatmap: None,
                target_point: None,
            });
        }
        let (p_ift, heatmap) = gaze.ok_or_else(|| {
            Error::InvalidValue("non-eye-contact verdict needs decoder output".into())
        })?;
        let class = crate::pipeline::classify(p_ec, p_ift, cfg);
        let in_frame = class == GazeClass::InFrame;
        Ok(GazeVerdict {
            head,
            class,
            p_ec,
            p_ift: Some(p_ift),
            target_point: in_frame.then(|| heatmap.point(cfg.point_extraction)),
            heatmap: in_frame.then_some(heatmap),
        })
    }
}

/// Thresholds and sizes for the inference pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Eye-contact cut-off probability.
    pub sigma: f64,
    pub ift_threshold: f64,
    pub heatmap_size: usize,
    pub input_size: (usize, usize),
    /// Fractional padding added to each side of a head box before cropping.
    pub crop_pad: f64,
    pub point_extraction: PointExtraction,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sigma: 0.85,
            ift_threshold: 0.5,
            heatmap_size: HEATMAP_SIZE,
            input_size: (448, 448),
            crop_pad: 0.2,
            point_extraction: PointExtraction::Argmax,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma < 1.0) {
            return Err(Error::InvalidValue(format!(
                "sigma must lie in (0, 1), got {}",
                self.sigma
            )));
        }
        if self.ift_threshold != 0.5 {
            return Err(Error::InvalidValue("ift_threshold is fixed at 0.5".into()));
        }
        if self.heatmap_size != HEATMAP_SIZE {
            return Err(Error::InvalidValue(format!(
                "heatmap_size is fixed at {HEATMAP_SIZE}"
            )));
        }
        if self.input_size.0 == 0 || self.input_size.1 == 0 {
            return Err(Error::InvalidValue("input_size must be positive".into()));
        }
        if !(self.crop_pad >= 0.0 && self.crop_pad.is_finite()) {
            return Err(Error::InvalidValue("crop_pad must be >= 0".into()));
        }
        Ok(())
    }
}
