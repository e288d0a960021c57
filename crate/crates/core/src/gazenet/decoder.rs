//! Head-prompted transformer decoder with in/out and heatmap heads.

use std::sync::Arc;

use rand::Rng;

use super::msf::MultiScaleFusion;
use super::GazeNetConfig;
use crate::error::Result;
use crate::nn::params::normal;
use crate::nn::{Conv3x3, Linear, Mat, ParamId, ParamStore, RowMix, Tape, TransformerBlock, Var};
use crate::types::{cell_center, point_cell, HeadBox, HEATMAP_SIZE};

/// Initial bias of the last heatmap layer: most cells are background, so
/// the head starts near sigmoid(-3) ≈ 0.05.
const HEATMAP_PRIOR_BIAS: f64 = -3.0;

#[derive(Debug, Clone)]
pub struct GazeDecoder {
    pub msf: MultiScaleFusion,
    pub grid: usize,
    pub dim: usize,
    pos_embed: ParamId,
    head_embed: ParamId,
    inout_token: ParamId,
    block: TransformerBlock,
    io_fc1: Linear,
    io_fc2: Linear,
    hm_conv1: Conv3x3,
    hm_conv2: Conv3x3,
    hm_conv3: Conv3x3,
    upsample: Arc<RowMix>,
}

/// Raw decoder outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct DecoderOutput {
    /// 1×1 in-frame logit.
    pub inout_logit: Var,
    /// 4096×1 per-cell logits in raster order (row = y).
    pub heatmap_logits: Var,
}

/// Head-prompt mask over a `grid`×`grid` token map: 1 for tokens whose cell
/// center lies inside the box, or for the single cell holding the box center
/// when the box is smaller than a cell.
pub fn head_prompt_mask(head: &HeadBox, grid: usize) -> Mat {
    let mut m = Mat::zeros((grid * grid, 1));
    let mut any = false;
    for r in 0..grid {
        for c in 0..grid {
            if head.contains(cell_center(r, c, grid)) {
                m[[r * grid + c, 0]] = 1.0;
                any = true;
            }
        }
    }
    if !any {
        let (r, c) = point_cell(head.center(), grid);
        m[[r * grid + c, 0]] = 1.0;
    }
    m
}

impl GazeDecoder {
    pub fn new(store: &mut ParamStore, cfg: &GazeNetConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = cfg.grid();
        let dim = cfg.fusion_channels;
        let msf = MultiScaleFusion::new(store, grid, cfg.embed_dim, dim, &cfg.scale_factors, rng)?;
        let pos_embed = store.add("decoder.pos_embed", normal(rng, 0.02, grid * grid, dim));
        let head_embed = store.add("decoder.head_embed", normal(rng, 0.02, 1, dim));
        let inout_token = store.add("decoder.inout_token", normal(rng, 0.02, 1, dim));
        let block =
            TransformerBlock::new(store, "decoder.block0", dim, cfg.heads, cfg.mlp_dim, rng);
        let io_fc1 = Linear::new_relu(store, "inout.fc1", dim, cfg.inout_hidden, rng);
        let io_fc2 = Linear::new(store, "inout.fc2", cfg.inout_hidden, 1, rng);
        let [c1, c2] = cfg.heatmap_channels;
        let hm_conv1 = Conv3x3::new(store, "heatmap.conv1", dim, c1, rng);
        let hm_conv2 = Conv3x3::new(store, "heatmap.conv2", c1, c2, rng);
        let hm_conv3 = Conv3x3::new(store, "heatmap.conv3", c2, 1, rng);
        store
            .value_mut(hm_conv3.params()[1])
            .fill(HEATMAP_PRIOR_BIAS);
        Ok(GazeDecoder {
            msf,
            grid,
            dim,
            pos_embed,
            head_embed,
            inout_token,
            block,
            io_fc1,
            io_fc2,
            hm_conv1,
            hm_conv2,
            hm_conv3,
            upsample: Arc::new(RowMix::bilinear(grid, grid, HEATMAP_SIZE, HEATMAP_SIZE)),
        })
    }

    /// Parameters of the convolutional heatmap head.
    pub fn heatmap_params(&self) -> Vec<ParamId> {
        [&self.hm_conv1, &self.hm_conv2, &self.hm_conv3]
            .iter()
            .flat_map(|c| c.params())
            .collect()
    }

    /// Parameters of the fully-connected in/out head.
    pub fn inout_params(&self) -> Vec<ParamId> {
        self.io_fc1
            .params()
            .into_iter()
            .chain(self.io_fc2.params())
            .collect()
    }

    /// Decodes one head from an already fused token map.
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        fused: Var,
        head: &HeadBox,
    ) -> DecoderOutput {
        let n = self.grid * self.grid;
        let pos = tape.param(store, self.pos_embed);
        let x = tape.add(fused, pos);
        let mask = tape.constant(head_prompt_mask(head, self.grid));
        let he = tape.param(store, self.head_embed);
        let prompt = tape.matmul(mask, he);
        let x = tape.add(x, prompt);
        let tok = tape.param(store, self.inout_token);
        let seq = tape.concat_rows(&[tok, x]);
        let y = self.block.forward(tape, store, seq);

        let io = tape.slice_rows(y, 0, 1);
        let io = self.io_fc1.forward(tape, store, io);
        let io = tape.relu(io);
        let inout_logit = self.io_fc2.forward(tape, store, io);

        let map = tape.slice_rows(y, 1, n + 1);
        let h = self
            .hm_conv1
            .forward(tape, store, map, self.grid, self.grid);
        let h = tape.relu(h);
        let h = tape.mix(h, &self.upsample);
        let h = self
            .hm_conv2
            .forward(tape, store, h, HEATMAP_SIZE, HEATMAP_SIZE);
        let h = tape.relu(h);
        let heatmap_logits = self
            .hm_conv3
            .forward(tape, store, h, HEATMAP_SIZE, HEATMAP_SIZE);
        DecoderOutput {
            inout_logit,
            heatmap_logits,
        }
    }

    /// Fusion followed by decoding, all on one tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        features: Var,
        head: &HeadBox,
    ) -> Result<DecoderOutput> {
        let fused = self.msf.forward(tape, store, features)?;
        Ok(self.decode(tape, store, fused, head))
    }
}
