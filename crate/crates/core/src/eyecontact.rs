//! Eye-contact probability from a cropped head.
//!
//! [`EcModel`] is a small convolutional classifier used when no pre-trained
//! eye-contact network is available. It sees only the padded head crop, so
//! pixels outside that crop cannot influence its output.

use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frame::FrameImage;
use crate::nn::{sigmoid, AdamW, Conv3x3, Grads, Linear, Mat, ParamStore, RowMix, Tape, Var};
use crate::types::HeadBox;

/// Smallest and largest probability an [`EcModel`] reports.
pub const EC_PROB_FLOOR: f64 = 1e-12;

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Side of the internal feature map the resized crop is averaged onto.
const WORK_SIZE: usize = 32;

/// Anything that scores heads for eye contact.
pub trait EyeContactScorer: Send + Sync {
    fn predict_ec(&self, img: &FrameImage, head: &HeadBox) -> Result<f64>;

    /// One result per box; a bad crop fails only its own element.
    fn batch_predict_ec(&self, img: &FrameImage, heads: &[HeadBox]) -> Vec<Result<f64>> {
        heads.iter().map(|h| self.predict_ec(img, h)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EcConfig {
    /// Crop size after the aspect-distorting resize, `(width, height)`.
    pub input_size: (u32, u32),
    pub crop_pad: f64,
}

impl Default for EcConfig {
    fn default() -> Self {
        EcConfig {
            input_size: (224, 224),
            crop_pad: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EcModel {
    pub config: EcConfig,
    pub params: ParamStore,
    conv1: Conv3x3,
    conv2: Conv3x3,
    fc: Linear,
    shrink: Arc<RowMix>,
    pool1: Arc<RowMix>,
    pool2: Arc<RowMix>,
}

impl EcModel {
    pub fn new(config: EcConfig, seed: u64) -> Result<Self> {
        let (w, h) = config.input_size;
        if (w as usize) < WORK_SIZE || (h as usize) < WORK_SIZE {
            return Err(Error::InvalidValue(format!(
                "eye-contact input {w}x{h} smaller than {WORK_SIZE}x{WORK_SIZE}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let conv1 = Conv3x3::new(&mut params, "ec.conv1", 3, 8, &mut rng);
        let conv2 = Conv3x3::new(&mut params, "ec.conv2", 8, 16, &mut rng);
        let fc = Linear::new(&mut params, "ec.fc", 16 * 16, 1, &mut rng);
        Ok(EcModel {
            shrink: Arc::new(RowMix::area_resize(
                h as usize, w as usize, WORK_SIZE, WORK_SIZE,
            )),
            pool1: Arc::new(RowMix::avg_pool(WORK_SIZE, WORK_SIZE, 2)),
            pool2: Arc::new(RowMix::avg_pool(WORK_SIZE / 2, WORK_SIZE / 2, 4)),
            config,
            params,
            conv1,
            conv2,
            fc,
        })
    }

    /// Forces the final bias, e.g. to saturate the output in tests.
    pub fn set_output_bias(&mut self, bias: f64) {
        self.params.value_mut(self.fc.bias).fill(bias);
    }

    /// Normalized crop averaged onto the working grid, `(32*32, 3)`.
    pub fn preprocess(&self, img: &FrameImage, head: &HeadBox) -> Result<Mat> {
        let (w, h) = self.config.input_size;
        let crop = img.crop_head(head, self.config.crop_pad)?.resized(w, h);
        let mut x = crop.to_unit_rows();
        for mut row in x.rows_mut() {
            for c in 0..3 {
                row[c] = (row[c] - MEAN[c]) / STD[c];
            }
        }
        Ok(self.shrink.apply(&x))
    }

    /// Logit for one preprocessed crop.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Var {
        let s = WORK_SIZE;
        let h = self.conv1.forward(tape, &self.params, x, s, s);
        let h = tape.relu(h);
        let h = tape.mix(h, &self.pool1);
        let h = self.conv2.forward(tape, &self.params, h, s / 2, s / 2);
        let h = tape.relu(h);
        let h = tape.mix(h, &self.pool2);
        let h = tape.reshape(h, 1, 16 * 16);
        self.fc.forward(tape, &self.params, h)
    }

    pub fn predict_preprocessed(&self, x: &Mat) -> f64 {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let z = self.forward(&mut tape, v);
        sigmoid(tape.scalar(z)).clamp(EC_PROB_FLOOR, 1.0 - EC_PROB_FLOOR)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.params.save(path)
    }

    /// Loads weights written by [`EcModel::save`]; tensors with unknown
    /// names, missing tensors or wrong shapes are rejected by name.
    pub fn load_weights(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.params.load(path)
    }

    /// Fits the classifier with binary cross-entropy and AdamW. Returns the
    /// mean loss of each epoch.
    pub fn train(&mut self, data: &[(Mat, bool)], opts: &EcTrainOptions) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut opt = AdamW::new(&self.params, opts.weight_decay);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut history = Vec::with_capacity(opts.epochs);
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for batch in order.chunks(opts.batch_size.max(1)) {
                let mut grads = Grads::empty(self.params.len());
                for &i in batch {
                    let (x, y) = &data[i];
                    let mut tape = Tape::new();
                    let xv = tape.constant(x.clone());
                    let z = self.forward(&mut tape, xv);
                    let t = Arc::new(Mat::from_elem((1, 1), if *y { 1.0 } else { 0.0 }));
                    let loss = tape.bce_with_logits(z, t);
                    total += tape.scalar(loss);
                    grads.accumulate(
                        &tape.backward(loss, self.params.len()),
                        1.0 / batch.len() as f64,
                    );
                }
                opt.step(&mut self.params, &grads, opts.lr);
            }
            history.push(total / data.len().max(1) as f64);
        }
        history
    }
}

#[derive(Debug, Clone)]
pub struct EcTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for EcTrainOptions {
    fn default() -> Self {
        EcTrainOptions {
            epochs: 10,
            batch_size: 16,
            lr: 3e-3,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl EyeContactScorer for EcModel {
    fn predict_ec(&self, img: &FrameImage, head: &HeadBox) -> Result<f64> {
        Ok(self.predict_preprocessed(&self.preprocess(img, head)?))
    }
}

/// Replays fixed probabilities: a head gets the probability of the scripted
/// box it overlaps most (IoU at least `min_iou`), else `default`.
#[derive(Debug, Clone)]
pub struct ScriptedEyeContact {
    pub scripted: Vec<(HeadBox, f64)>,
    pub default: f64,
    pub min_iou: f64,
}

impl ScriptedEyeContact {
    pub fn new(scripted: Vec<(HeadBox, f64)>, default: f64) -> Self {
        ScriptedEyeContact {
            scripted,
            default,
            min_iou: 0.5,
        }
    }

    /// Same probability for every head.
    pub fn constant(p: f64) -> Self {
        Self::new(Vec::new(), p)
    }
}

impl EyeContactScorer for ScriptedEyeContact {
    fn predict_ec(&self, img: &FrameImage, head: &HeadBox) -> Result<f64> {
        img.crop_rect(head, 0.0)?;
        let best = self
            .scripted
            .iter()
            .map(|(b, p)| (b.iou(head), *p))
            .filter(|(iou, _)| *iou >= self.min_iou)
            .max_by(|a, b| a.0.total_cmp(&b.0));
        Ok(best.map_or(self.default, |(_, p)| p))
    }
}
