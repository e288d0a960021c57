//! Trainable building blocks. Each layer registers its tensors in a
//! [`ParamStore`] under a dotted prefix and records its forward pass on a
//! [`Tape`].

use rand::Rng;

use super::params::{he_normal, lecun_normal, ParamId, ParamStore};
use super::tape::{Mat, Tape, Var};

/// Fully-connected layer: `x · W + b` with `W: (in, out)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{prefix}.weight"),
                lecun_normal(rng, in_dim, in_dim, out_dim),
            ),
            bias: store.add(format!("{prefix}.bias"), Mat::zeros((1, out_dim))),
            in_dim,
            out_dim,
        }
    }

    /// Variant with He initialization for layers feeding a ReLU.
    pub fn new_relu(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Linear {
            weight: store.add(
                format!("{prefix}.weight"),
                he_normal(rng, in_dim, in_dim, out_dim),
            ),
            bias: store.add(format!("{prefix}.bias"), Mat::zeros((1, out_dim))),
            in_dim,
            out_dim,
        }
    }

    pub fn param_count(in_dim: usize, out_dim: usize) -> usize {
        in_dim * out_dim + out_dim
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w);
        tape.add_row(y, b)
    }

    /// Forward pass without a tape.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Mat {
        x.dot(store.value(self.weight)) + store.value(self.bias)
    }
}

/// 3×3 convolution, stride 1, zero padding 1, on an `(h*w, c)` map.
#[derive(Debug, Clone)]
pub struct Conv3x3 {
    pub inner: Linear,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv3x3 {
            inner: Linear::new_relu(store, prefix, 9 * in_ch, out_ch, rng),
        }
    }

    pub fn param_count(in_ch: usize, out_ch: usize) -> usize {
        Linear::param_count(9 * in_ch, out_ch)
    }

    pub fn params(&self) -> [ParamId; 2] {
        self.inner.params()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: usize, w: usize) -> Var {
        let cols = tape.im2col3(x, h, w);
        self.inner.forward(tape, store, cols)
    }
}

/// Layer normalization with learned scale and shift.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{prefix}.weight"), Mat::ones((1, dim))),
            beta: store.add(format!("{prefix}.bias"), Mat::zeros((1, dim))),
        }
    }

    pub fn param_count(dim: usize) -> usize {
        2 * dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x);
        let rows = tape.value(x).nrows();
        let g = tape.param(store, self.gamma);
        let ones = tape.constant(Mat::ones((rows, 1)));
        let g = tape.matmul(ones, g);
        let scaled = tape.mul(n, g);
        let b = tape.param(store, self.beta);
        tape.add_row(scaled, b)
    }
}

/// Pre-norm transformer encoder block: multi-head self-attention followed by
/// a GELU MLP, each wrapped in a residual connection.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub dim: usize,
    pub heads: usize,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(
            heads > 0 && dim.is_multiple_of(heads),
            "dim {dim} not divisible by {heads} heads"
        );
        TransformerBlock {
            norm1: LayerNorm::new(store, &format!("{prefix}.norm1"), dim),
            qkv: Linear::new(store, &format!("{prefix}.attn.qkv"), dim, 3 * dim, rng),
            proj: Linear::new(store, &format!("{prefix}.attn.proj"), dim, dim, rng),
            norm2: LayerNorm::new(store, &format!("{prefix}.norm2"), dim),
            fc1: Linear::new(store, &format!("{prefix}.mlp.fc1"), dim, mlp_dim, rng),
            fc2: Linear::new(store, &format!("{prefix}.mlp.fc2"), mlp_dim, dim, rng),
            dim,
            heads,
        }
    }

    pub fn param_count(dim: usize, mlp_dim: usize) -> usize {
        2 * LayerNorm::param_count(dim)
            + Linear::param_count(dim, 3 * dim)
            + Linear::param_count(dim, dim)
            + Linear::param_count(dim, mlp_dim)
            + Linear::param_count(mlp_dim, dim)
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let d = self.dim;
        let dh = d / self.heads;
        let h = self.norm1.forward(tape, store, x);
        let qkv = self.qkv.forward(tape, store, h);
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = tape.slice_cols(qkv, head * dh, (head + 1) * dh);
            let k = tape.slice_cols(qkv, d + head * dh, d + (head + 1) * dh);
            let v = tape.slice_cols(qkv, 2 * d + head * dh, 2 * d + (head + 1) * dh);
            let kt = tape.transpose(k);
            let scores = tape.matmul(q, kt);
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores);
            outs.push(tape.matmul(attn, v));
        }
        let merged = if outs.len() == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)
        };
        let a = self.proj.forward(tape, store, merged);
        let x = tape.add(x, a);
        let h = self.norm2.forward(tape, store, x);
        let h = self.fc1.forward(tape, store, h);
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, store, h);
        tape.add(x, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_10x5_has_55_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "fc", 10, 5, &mut rng);
        assert_eq!(store.scalar_count(), 55);
        assert_eq!(Linear::param_count(10, 5), 55);
    }

    #[test]
    fn block_param_count_matches_store() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        TransformerBlock::new(&mut store, "blk", 16, 4, 32, &mut rng);
        assert_eq!(store.scalar_count(), TransformerBlock::param_count(16, 32));
    }

    #[test]
    fn conv_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng);
        let (h, w) = (4, 5);
        let x = Mat::from_shape_fn((h * w, 2), |(r, c)| ((r * 7 + c * 3) % 11) as f64 / 10.0);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &store, xv, h, w);
        let y = tape.value(y).clone();
        let wt = store.value(conv.inner.weight);
        let b = store.value(conv.inner.bias);
        for i in 0..h {
            for j in 0..w {
                for o in 0..3 {
                    let mut acc = b[[0, o]];
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (yy, xx) = (i as i64 + dy as i64 - 1, j as i64 + dx as i64 - 1);
                            if yy < 0 || xx < 0 || yy >= h as i64 || xx >= w as i64 {
                                continue;
                            }
                            for c in 0..2 {
                                acc += x[[yy as usize * w + xx as usize, c]]
                                    * wt[[(dy * 3 + dx) * 2 + c, o]];
                            }
                        }
                    }
                    assert!((acc - y[[i * w + j, o]]).abs() < 1e-12);
                }
            }
        }
    }
}
