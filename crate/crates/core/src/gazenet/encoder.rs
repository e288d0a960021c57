//! Frozen scene encoder.
//!
//! The shipped backbone is a random, seeded patch embedding: each
//! `patch`×`patch` block of the normalized image is flattened, projected to
//! `embed_dim` and passed through GELU. It stands in for a large pre-trained
//! vision transformer and keeps the token-grid contract identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::frame::FrameImage;
use crate::nn::{Linear, Mat, ParamStore};

const MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
pub struct EncoderAdapter {
    pub backbone_name: String,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub input_size: usize,
    /// Always true; the encoder's store is never handed to an optimizer.
    pub frozen: bool,
    store: ParamStore,
    proj: Linear,
}

impl EncoderAdapter {
    pub fn new(
        backbone_name: &str,
        input_size: usize,
        patch_size: usize,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if patch_size == 0 || !input_size.is_multiple_of(patch_size) {
            return Err(Error::InvalidValue(format!(
                "patch size {patch_size} must divide input size {input_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let proj = Linear::new(
            &mut store,
            "encoder.patch_embed",
            patch_size * patch_size * 3,
            embed_dim,
            &mut rng,
        );
        Ok(EncoderAdapter {
            backbone_name: backbone_name.to_string(),
            patch_size,
            embed_dim,
            input_size,
            frozen: true,
            store,
            proj,
        })
    }

    /// Tokens per side.
    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn token_count(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub(crate) fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Flattened normalized patches, one row per token in raster order.
    fn patchify(&self, img: &FrameImage) -> Mat {
        let p = self.patch_size;
        let g = self.grid();
        let raw = img.pixels().as_raw();
        let w = self.input_size;
        let mut out = Mat::zeros((g * g, p * p * 3));
        for gy in 0..g {
            for gx in 0..g {
                let mut row = out.row_mut(gy * g + gx);
                let mut k = 0;
                for dy in 0..p {
                    let base = ((gy * p + dy) * w + gx * p) * 3;
                    for dx in 0..p {
                        for c in 0..3 {
                            let v = raw[base + dx * 3 + c] as f64 / 255.0;
                            row[k] = (v - MEAN[c]) / STD[c];
                            k += 1;
                        }
                    }
                }
            }
        }
        out
    }

    /// Feature grid of shape `(grid², embed_dim)`. The frame must already be
    /// `input_size`×`input_size`.
    pub fn encode(&self, img: &FrameImage) -> Result<Mat> {
        let s = self.input_size as u32;
        if img.width() != s || img.height() != s {
            return Err(Error::shape(
                "encode_scene",
                format!("{s}x{s}"),
                format!("{}x{}", img.width(), img.height()),
            ));
        }
        let mut z = self.proj.apply(&self.store, &self.patchify(img));
        z.mapv_inplace(gelu);
        Ok(z)
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh())
}
