//! Metrics: heatmap ROC-AUC, mean L2 target error, in/out average precision
//! and eye-contact precision/recall/F1, plus the per-source report.

use std::collections::BTreeMap;
use std::path::Path;

use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::data::{gaussian_grid, AnnotatedSample, SampleLabel, GT_SIGMA_CELLS};
use crate::error::{Error, Result};
use crate::types::{
    point_cell, GazeClass, GazeVerdict, HeadBox, HeatmapGrid, Point, PointExtraction, HEATMAP_SIZE,
};

pub const REPORT_SCHEMA: &str = "gt360-eval/1";

/// ROC-AUC with ties scored by midranks. Needs both classes.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Metric(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Metric(
            "AUC needs positive and negative examples".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // ranks are 1-based; the tie group i..=j shares their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Which heatmap cells count as the ground-truth target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AucPositives {
    /// Cells where a peak-1 Gaussian of the GT spread exceeds 0.5.
    #[default]
    Gaussian,
    /// Only the cell containing the target.
    SingleCell,
}

pub fn positive_cells(target: Point, mode: AucPositives, sigma_cells: f64) -> Result<Vec<bool>> {
    match mode {
        AucPositives::Gaussian => Ok(gaussian_grid(target, HEATMAP_SIZE, sigma_cells)?
            .iter()
            .map(|&v| v > 0.5)
            .collect()),
        AucPositives::SingleCell => {
            let (r, c) = point_cell(target, HEATMAP_SIZE);
            let mut v = vec![false; HEATMAP_SIZE * HEATMAP_SIZE];
            v[r * HEATMAP_SIZE + c] = true;
            Ok(v)
        }
    }
}

pub fn heatmap_auc(pred: &HeatmapGrid, target: Point, mode: AucPositives) -> Result<f64> {
    let labels = positive_cells(target, mode, GT_SIGMA_CELLS)?;
    let scores: Vec<f64> = pred.values().iter().copied().collect();
    roc_auc(&scores, &labels)
}

/// Mean Euclidean distance between predicted and true points.
pub fn mean_l2(pairs: &[(Point, Point)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Metric("mean L2 of an empty set".into()));
    }
    let sum: f64 = pairs
        .iter()
        .map(|((px, py), (tx, ty))| (px - tx).hypot(py - ty))
        .sum();
    Ok(sum / pairs.len() as f64)
}

/// All-points average precision: precision summed over recall increments at
/// each distinct score threshold, highest first. Tied scores form a single
/// threshold.
pub fn average_precision(scores: &[(f64, bool)]) -> Result<f64> {
    let pos = scores.iter().filter(|s| s.1).count();
    if pos == 0 || pos == scores.len() {
        return Err(Error::Metric(
            "AP needs positive and negative examples".into(),
        ));
    }
    let mut sorted: Vec<(f64, bool)> = scores.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let s = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == s {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Binary precision/recall/F1 with eye contact as the positive class.
/// Undefined ratios are reported as 0 with a warning.
pub fn ec_prf(preds: &[bool], truths: &[bool]) -> Result<Prf> {
    if preds.len() != truths.len() {
        return Err(Error::Metric(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fneg = 0usize;
    for (&p, &t) in preds.iter().zip(truths) {
        match (p, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let ratio = |num: usize, den: usize, what: &str| {
        if den == 0 {
            log::warn!("{what} undefined (zero denominator); reporting 0");
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp, "precision");
    let recall = ratio(tp, tp + fneg, "recall");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        log::warn!("F1 undefined (precision and recall are 0); reporting 0");
        0.0
    };
    Ok(Prf {
        precision,
        recall,
        f1,
    })
}

/// A prediction paired with its annotation.
#[derive(Debug, Clone)]
pub struct EvalRecord {
    pub pred: GazeVerdict,
    /// Decoder heatmap for the head, also for out-of-frame verdicts. Falls
    /// back to the verdict's own heatmap when absent.
    pub heatmap: Option<HeatmapGrid>,
    pub truth: AnnotatedSample,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub point_extraction: PointExtraction,
    /// Minimum IoU for pairing a prediction with an annotation.
    pub min_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            point_extraction: PointExtraction::Argmax,
            min_iou: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: usize,
    /// Mean heatmap AUC over in-frame annotations, Gaussian positives.
    pub auc: Option<f64>,
    pub auc_single_cell: Option<f64>,
    pub mean_l2: Option<f64>,
    /// In-frame annotations whose head got no heatmap (the decoder never ran).
    pub l2_missing: usize,
    pub ap_in_out: Option<f64>,
    pub ec: Option<Prf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub overall: Metrics,
    pub by_source: BTreeMap<String, Metrics>,
    /// Annotations with no matching prediction.
    pub unmatched: usize,
}

fn metrics_for(records: &[&EvalRecord], opts: &EvalOptions) -> Result<Metrics> {
    let mut auc = Vec::new();
    let mut auc1 = Vec::new();
    let mut l2 = Vec::new();
    let mut l2_missing = 0;
    let mut ap_scores = Vec::new();
    let ec_sources: std::collections::BTreeSet<&str> = records
        .iter()
        .filter(|r| r.truth.label == SampleLabel::EC)
        .map(|r| r.truth.source.as_str())
        .collect();
    let mut ec_pred = Vec::new();
    let mut ec_true = Vec::new();

    for r in records {
        let t = &r.truth;
        if let (SampleLabel::IFT, Some(target)) = (t.label, t.target) {
            match r.heatmap.as_ref().or(r.pred.heatmap.as_ref()) {
                Some(hm) => {
                    auc.push(heatmap_auc(hm, target, AucPositives::Gaussian)?);
                    auc1.push(heatmap_auc(hm, target, AucPositives::SingleCell)?);
                    l2.push((hm.point(opts.point_extraction), target));
                }
                None => {
                    // an uninformative map ranks every cell equally
                    auc.push(0.5);
                    auc1.push(0.5);
                    l2_missing += 1;
                }
            }
        }
        if matches!(t.label, SampleLabel::IFT | SampleLabel::OFT) {
            ap_scores.push((r.pred.p_ift.unwrap_or(0.0), t.label == SampleLabel::IFT));
        }
        if ec_sources.contains(t.source.as_str()) && t.label != SampleLabel::UNKNOWN {
            ec_pred.push(r.pred.class == GazeClass::EyeContact);
            ec_true.push(t.label == SampleLabel::EC);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let ap = average_precision(&ap_scores).ok();
    Ok(Metrics {
        records: records.len(),
        auc: mean(&auc),
        auc_single_cell: mean(&auc1),
        mean_l2: if l2.is_empty() {
            None
        } else {
            Some(mean_l2(&l2)?)
        },
        l2_missing,
        ap_in_out: ap,
        ec: if ec_true.is_empty() {
            None
        } else {
            Some(ec_prf(&ec_pred, &ec_true)?)
        },
    })
}

/// Overall and per-source metrics. Metrics whose labels are absent from a
/// group are reported as `None`.
pub fn evaluate_suite(records: &[EvalRecord], opts: &EvalOptions) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Metric("no evaluation records".into()));
    }
    let all: Vec<&EvalRecord> = records.iter().collect();
    let mut groups: BTreeMap<String, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        groups.entry(r.truth.source.clone()).or_default().push(r);
    }
    let by_source = groups
        .into_iter()
        .map(|(k, v)| metrics_for(&v, opts).map(|m| (k, m)))
        .collect::<Result<_>>()?;
    Ok(MetricsReport {
        schema: REPORT_SCHEMA.into(),
        overall: metrics_for(&all, opts)?,
        by_source,
        unmatched: 0,
    })
}

/// One line of `infer --json` output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionRecord {
    pub image: String,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub class: GazeClass,
    pub p_ec: f64,
    pub p_ift: Option<f64>,
    pub target: Option<[f64; 2]>,
    pub heatmap_path: Option<String>,
}

impl PredictionRecord {
    pub fn from_verdict(image: &str, v: &GazeVerdict, heatmap_path: Option<String>) -> Self {
        PredictionRecord {
            image: image.to_string(),
            bbox: v.head.corners(),
            class: v.class,
            p_ec: v.p_ec,
            p_ift: v.p_ift,
            target: v.target_point.map(|(x, y)| [x, y]),
            heatmap_path,
        }
    }

    /// Rebuilds the verdict and the decoder heatmap, loading the heatmap
    /// relative to `base` when the path is not absolute. The verdict keeps
    /// the heatmap only when it is in-frame.
    pub fn load(&self, base: &Path) -> Result<GazeVerdictOnImage> {
        let [x0, y0, x1, y1] = self.bbox;
        let head = HeadBox::new(x0, y0, x1, y1, 1.0)?;
        let heatmap = match &self.heatmap_path {
            Some(p) => Some(load_heatmap(&base.join(p))?),
            None => None,
        };
        let in_frame = self.class == GazeClass::InFrame;
        if in_frame != self.target.is_some() {
            return Err(Error::InvalidValue(format!(
                "{}: target must be present exactly for in-frame records",
                self.image
            )));
        }
        if in_frame && heatmap.is_none() {
            return Err(Error::InvalidValue(format!(
                "{}: in-frame record without heatmap_path",
                self.image
            )));
        }
        Ok(GazeVerdictOnImage {
            image: self.image.clone(),
            verdict: GazeVerdict {
                head,
                class: self.class,
                p_ec: self.p_ec,
                p_ift: self.p_ift,
                heatmap: heatmap.clone().filter(|_| in_frame),
                target_point: self.target.map(|[x, y]| (x, y)),
            },
            heatmap,
        })
    }
}

const HEATMAP_TENSOR: &str = "heatmap";

/// Stores a heatmap as a single 64×64 `F64` safetensors tensor.
pub fn save_heatmap(path: &Path, hm: &HeatmapGrid) -> Result<()> {
    let bytes: Vec<u8> = hm.values().iter().flat_map(|v| v.to_le_bytes()).collect();
    let view = TensorView::new(Dtype::F64, vec![HEATMAP_SIZE, HEATMAP_SIZE], &bytes)
        .map_err(|e| Error::TensorFile(e.to_string()))?;
    let data = safetensors::serialize([(HEATMAP_TENSOR, view)], None)
        .map_err(|e| Error::TensorFile(e.to_string()))?;
    std::fs::write(path, data).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_heatmap(path: &Path) -> Result<HeatmapGrid> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::TensorFile(e.to_string()))?;
    let t = st.tensor(HEATMAP_TENSOR).map_err(|_| Error::Schema {
        tensor: HEATMAP_TENSOR.into(),
        reason: format!("missing from {}", path.display()),
    })?;
    if t.dtype() != Dtype::F64 || t.shape() != [HEATMAP_SIZE, HEATMAP_SIZE] {
        return Err(Error::Schema {
            tensor: HEATMAP_TENSOR.into(),
            reason: format!("expected F64 64x64, got {:?} {:?}", t.dtype(), t.shape()),
        });
    }
    let vals: Vec<f64> = t
        .data()
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    HeatmapGrid::new(
        ndarray::Array2::from_shape_vec((HEATMAP_SIZE, HEATMAP_SIZE), vals).expect("checked shape"),
    )
}

fn same_image(a: &str, b: &str) -> bool {
    if a == b {
        return true;
    }
    let name = |s: &str| Path::new(s).file_name().map(|n| n.to_os_string());
    let (pa, pb) = (Path::new(a), Path::new(b));
    // fall back to the file name only when one side is a bare name
    (pa.components().count() == 1 || pb.components().count() == 1) && name(a) == name(b)
}

/// Pairs each annotation with the prediction on the same image whose box
/// overlaps it most (IoU at least `min_iou`). Returns the pairs and the
/// number of annotations left unmatched.
pub fn pair_records(
    preds: &[GazeVerdictOnImage],
    truths: &[AnnotatedSample],
    min_iou: f64,
) -> (Vec<EvalRecord>, usize) {
    let mut out = Vec::with_capacity(truths.len());
    let mut unmatched = 0;
    for t in truths {
        let best = preds
            .iter()
            .filter(|p| same_image(&p.image, &t.image_ref))
            .map(|p| (p.verdict.head.iou(&t.head), p))
            .filter(|(iou, _)| *iou >= min_iou)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        match best {
            Some((_, p)) => out.push(EvalRecord {
                pred: p.verdict.clone(),
                heatmap: p.heatmap.clone(),
                truth: t.clone(),
            }),
            None => unmatched += 1,
        }
    }
    (out, unmatched)
}

#[derive(Debug, Clone)]
pub struct GazeVerdictOnImage {
    pub image: String,
    pub verdict: GazeVerdict,
    /// Decoder heatmap, see [`EvalRecord::heatmap`].
    pub heatmap: Option<HeatmapGrid>,
}
