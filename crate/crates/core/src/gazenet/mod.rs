//! Gaze target network: frozen encoder, multi-scale fusion and a
//! head-prompted decoder emitting an in-frame probability and a 64×64
//! target heatmap.

pub mod decoder;
pub mod encoder;
pub mod msf;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use decoder::{head_prompt_mask, DecoderOutput, GazeDecoder};
pub use encoder::EncoderAdapter;
pub use msf::{MultiScaleFusion, SCALE_FACTORS};

use crate::error::{Error, Result};
use crate::frame::FrameImage;
use crate::nn::{sigmoid, Conv3x3, Linear, Mat, ParamStore, Tape, TransformerBlock};
use crate::types::{HeadBox, HeatmapGrid, HEATMAP_SIZE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GazeNetConfig {
    pub backbone: String,
    pub input_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    /// Seed of the frozen encoder's weights.
    pub encoder_seed: u64,
    pub scale_factors: Vec<f64>,
    pub fusion_channels: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub heatmap_channels: [usize; 2],
    pub inout_hidden: usize,
}

impl Default for GazeNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GazeNetConfig {
    /// Small configuration that trains on a single CPU core.
    pub fn desk() -> Self {
        GazeNetConfig {
            backbone: "patch-linear".into(),
            input_size: 448,
            patch_size: 32,
            embed_dim: 64,
            encoder_seed: 0,
            scale_factors: SCALE_FACTORS.to_vec(),
            fusion_channels: 32,
            heads: 2,
            mlp_dim: 64,
            heatmap_channels: [16, 8],
            inout_hidden: 16,
        }
    }

    /// Dimensions of a ViT-L/14 backbone feeding a 256-wide decoder.
    pub fn full_scale() -> Self {
        GazeNetConfig {
            patch_size: 14,
            embed_dim: 1024,
            fusion_channels: 256,
            heads: 8,
            mlp_dim: 1024,
            heatmap_channels: [32, 16],
            inout_hidden: 128,
            ..Self::desk()
        }
    }

    /// Minimal configuration for finite-difference gradient checks.
    pub fn tiny() -> Self {
        GazeNetConfig {
            patch_size: 112,
            embed_dim: 6,
            fusion_channels: 8,
            heads: 1,
            mlp_dim: 8,
            heatmap_channels: [4, 2],
            inout_hidden: 4,
            ..Self::desk()
        }
    }

    pub fn grid(&self) -> usize {
        self.input_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.input_size,
            self.patch_size,
            self.embed_dim,
            self.fusion_channels,
            self.heads,
            self.mlp_dim,
            self.heatmap_channels[0],
            self.heatmap_channels[1],
            self.inout_hidden,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidValue(
                "gazenet dimensions must be positive".into(),
            ));
        }
        if !self.input_size.is_multiple_of(self.patch_size) {
            return Err(Error::InvalidValue(format!(
                "patch_size {} must divide input_size {}",
                self.patch_size, self.input_size
            )));
        }
        if !self.fusion_channels.is_multiple_of(self.heads) {
            return Err(Error::InvalidValue(format!(
                "fusion_channels {} not divisible by {} heads",
                self.fusion_channels, self.heads
            )));
        }
        if self.scale_factors != SCALE_FACTORS {
            return Err(Error::InvalidValue(format!(
                "scale_factors must be {SCALE_FACTORS:?}, got {:?}",
                self.scale_factors
            )));
        }
        Ok(())
    }

    /// Closed-form count of learnable decoder parameters.
    pub fn expected_param_count(&self) -> usize {
        let d = self.fusion_channels;
        let g = self.grid();
        let [c1, c2] = self.heatmap_channels;
        MultiScaleFusion::param_count(self.embed_dim, d, self.scale_factors.len())
            + g * g * d
            + 2 * d
            + TransformerBlock::param_count(d, self.mlp_dim)
            + Linear::param_count(d, self.inout_hidden)
            + Linear::param_count(self.inout_hidden, 1)
            + Conv3x3::param_count(d, c1)
            + Conv3x3::param_count(c1, c2)
            + Conv3x3::param_count(c2, 1)
    }

    /// Hex prefix of the SHA-256 of the JSON-serialized configuration.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&bytes)[..8])
    }
}

/// Encoder plus decoder with the decoder's trainable parameters.
#[derive(Debug, Clone)]
pub struct GazeModel {
    pub config: GazeNetConfig,
    pub encoder: EncoderAdapter,
    pub decoder: GazeDecoder,
    /// Learnable decoder parameters. The encoder keeps its own store.
    pub params: ParamStore,
}

impl GazeModel {
    pub fn new(config: GazeNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let encoder = EncoderAdapter::new(
            &config.backbone,
            config.input_size,
            config.patch_size,
            config.embed_dim,
            config.encoder_seed,
        )?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let decoder = GazeDecoder::new(&mut params, &config, &mut rng)?;
        Ok(GazeModel {
            config,
            encoder,
            decoder,
            params,
        })
    }

    /// Parameters that receive gradient updates; the frozen encoder adds none.
    pub fn count_learnable_params(&self) -> usize {
        self.params.scalar_count()
    }

    pub fn count_frozen_params(&self) -> usize {
        self.encoder.store().scalar_count()
    }

    /// Encoder features of a frame, resized to the encoder input first.
    pub fn encode_frame(&self, img: &FrameImage) -> Result<Mat> {
        let s = self.config.input_size as u32;
        self.encoder.encode(&img.resized(s, s))
    }

    pub fn fuse(&self, features: &Mat) -> Result<Mat> {
        self.decoder.msf.apply(&self.params, features)
    }

    /// In-frame probability and heatmap for one head on a fused map.
    pub fn decode(&self, fused: &Mat, head: &HeadBox) -> Result<(f64, HeatmapGrid)> {
        let g = self.decoder.grid;
        if fused.dim() != (g * g, self.decoder.dim) {
            return Err(Error::shape(
                "decode_gaze",
                format!("{}x{}", g * g, self.decoder.dim),
                format!("{}x{}", fused.nrows(), fused.ncols()),
            ));
        }
        head.validate()?;
        let mut tape = Tape::new();
        let f = tape.constant(fused.clone());
        let out = self.decoder.decode(&mut tape, &self.params, f, head);
        Ok(Self::read_outputs(&tape, out))
    }

    pub(crate) fn read_outputs(tape: &Tape, out: DecoderOutput) -> (f64, HeatmapGrid) {
        let p = sigmoid(tape.scalar(out.inout_logit));
        let z = tape.value(out.heatmap_logits);
        let grid = Mat::from_shape_fn((HEATMAP_SIZE, HEATMAP_SIZE), |(r, c)| {
            sigmoid(z[[r * HEATMAP_SIZE + c, 0]])
        });
        (
            p,
            HeatmapGrid::new(grid).expect("sigmoid output is a valid heatmap"),
        )
    }

    pub fn save(&self, dir: impl AsRef<Path>, stage: &str) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.params.save(dir.join(DECODER_FILE))?;
        self.encoder.store().save(dir.join(ENCODER_FILE))?;
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.into(),
            config_hash: self.config.hash(),
            param_count: self.count_learnable_params(),
            stage: stage.into(),
            config: self.config.clone(),
        };
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Builds a model from a checkpoint directory using its stored config.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let manifest = CheckpointManifest::read(dir.as_ref())?;
        let mut model = GazeModel::new(manifest.config.clone(), 0)?;
        model.load_into(dir)?;
        Ok(model)
    }

    /// Overwrites this model's weights; the checkpoint config must hash to
    /// this model's config hash.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<CheckpointManifest> {
        let dir = dir.as_ref();
        let manifest = CheckpointManifest::read(dir)?;
        let expected = self.config.hash();
        if manifest.config_hash != expected {
            return Err(Error::ConfigHash {
                expected,
                found: manifest.config_hash,
            });
        }
        self.params.load(dir.join(DECODER_FILE))?;
        self.encoder.store_mut().load(dir.join(ENCODER_FILE))?;
        Ok(manifest)
    }
}

pub const CHECKPOINT_FORMAT: &str = "gt360-checkpoint/1";
const DECODER_FILE: &str = "decoder.safetensors";
const ENCODER_FILE: &str = "encoder.safetensors";
const MANIFEST_FILE: &str = "manifest.json";

/// `manifest.json` of a checkpoint directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub config_hash: String,
    pub param_count: usize,
    pub stage: String,
    pub config: GazeNetConfig,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let m: CheckpointManifest = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidValue(format!(
                "{}: unsupported checkpoint format `{}`",
                path.display(),
                m.format
            )));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    fn scene(seed: u8) -> FrameImage {
        FrameImage::from_fn(448, 448, |x, y| {
            Rgb([(x / 3) as u8 ^ seed, (y / 2) as u8, seed])
        })
        .unwrap()
    }

    #[test]
    fn closed_form_count_matches_store() {
        for cfg in [GazeNetConfig::tiny(), GazeNetConfig::desk()] {
            let m = GazeModel::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.count_learnable_params(), cfg.expected_param_count());
        }
    }

    #[test]
    fn full_scale_dimensions_near_budget() {
        let n = GazeNetConfig::full_scale().expected_param_count();
        assert_eq!(n, 1_951_170);
    }

    #[test]
    fn decode_shapes_and_prompt_sensitivity() {
        let m = GazeModel::new(GazeNetConfig::desk(), 4).unwrap();
        let fused = m.fuse(&m.encode_frame(&scene(3)).unwrap()).unwrap();
        let a = HeadBox::from_corners([0.05, 0.05, 0.2, 0.2]).unwrap();
        let b = HeadBox::from_corners([0.7, 0.6, 0.9, 0.85]).unwrap();
        let (pa, ha) = m.decode(&fused, &a).unwrap();
        let (pb, hb) = m.decode(&fused, &b).unwrap();
        assert!(pa > 0.0 && pa < 1.0);
        assert_eq!(ha.values().dim(), (64, 64));
        assert!(pa != pb || ha != hb);
    }

    #[test]
    fn checkpoint_round_trip_and_hash_check() {
        let dir = tempfile::tempdir().unwrap();
        let m = GazeModel::new(GazeNetConfig::tiny(), 11).unwrap();
        m.save(dir.path(), "PRETRAIN").unwrap();
        let back = GazeModel::load(dir.path()).unwrap();
        assert_eq!(back.params.to_bytes(), m.params.to_bytes());
        assert_eq!(
            back.encoder.store().to_bytes(),
            m.encoder.store().to_bytes()
        );

        let mut other = GazeModel::new(
            GazeNetConfig {
                inout_hidden: 5,
                ..GazeNetConfig::tiny()
            },
            0,
        )
        .unwrap();
        assert!(matches!(
            other.load_into(dir.path()),
            Err(Error::ConfigHash { .. })
        ));
    }

    #[test]
    fn config_validation() {
        assert!(GazeNetConfig {
            scale_factors: vec![1.0, 0.5],
            ..GazeNetConfig::desk()
        }
        .validate()
        .is_err());
        assert!(GazeNetConfig {
            patch_size: 30,
            ..GazeNetConfig::desk()
        }
        .validate()
        .is_err());
        assert!(GazeNetConfig::full_scale().validate().is_ok());
    }
}
