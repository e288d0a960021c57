//! Multi-scale fusion of the encoder's token grid.
//!
//! Each branch average-pools the base map with stride 1, 2 or 4 (receptive
//! field factors 1, 0.5, 0.25), aligns channels with a 1×1 convolution,
//! upsamples back to the base grid by nearest neighbor, and the three maps
//! are summed.

use std::sync::Arc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mat, ParamId, ParamStore, RowMix, Tape, Var};

/// Receptive-field factors of the three branches.
pub const SCALE_FACTORS: [f64; 3] = [1.0, 0.5, 0.25];

#[derive(Debug, Clone)]
struct Branch {
    stride: usize,
    align: Linear,
    pool: Option<Arc<RowMix>>,
    up: Option<Arc<RowMix>>,
}

#[derive(Debug, Clone)]
pub struct MultiScaleFusion {
    pub grid: usize,
    pub in_channels: usize,
    pub fusion_channels: usize,
    branches: Vec<Branch>,
}

/// Pooling stride for a receptive-field factor.
pub fn stride_for(factor: f64) -> Result<usize> {
    let k = (1.0 / factor).round();
    if !(factor > 0.0 && factor <= 1.0) || ((1.0 / factor) - k).abs() > 1e-9 {
        return Err(Error::InvalidValue(format!(
            "scale factor {factor} is not 1/k"
        )));
    }
    Ok(k as usize)
}

impl MultiScaleFusion {
    pub fn new(
        store: &mut ParamStore,
        grid: usize,
        in_channels: usize,
        fusion_channels: usize,
        scale_factors: &[f64],
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut branches = Vec::with_capacity(scale_factors.len());
        for (i, &f) in scale_factors.iter().enumerate() {
            let stride = stride_for(f)?;
            let align = Linear::new(
                store,
                &format!("msf.branch{i}"),
                in_channels,
                fusion_channels,
                rng,
            );
            let (pool, up) = if stride == 1 {
                (None, None)
            } else {
                (
                    Some(Arc::new(RowMix::avg_pool(grid, grid, stride))),
                    Some(Arc::new(RowMix::nearest_upsample(grid, grid, stride))),
                )
            };
            branches.push(Branch {
                stride,
                align,
                pool,
                up,
            });
        }
        Ok(MultiScaleFusion {
            grid,
            in_channels,
            fusion_channels,
            branches,
        })
    }

    pub fn param_count(in_channels: usize, fusion_channels: usize, n_branches: usize) -> usize {
        n_branches * Linear::param_count(in_channels, fusion_channels)
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    pub fn strides(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.stride).collect()
    }

    /// Weight and bias of the 1×1 alignment convolution of branch `i`.
    pub fn branch_params(&self, i: usize) -> [ParamId; 2] {
        self.branches[i].align.params()
    }

    /// Spatial side of branch `i` before upsampling.
    pub fn branch_grid(&self, i: usize) -> usize {
        self.grid.div_ceil(self.branches[i].stride)
    }

    fn check(&self, rows: usize, cols: usize) -> Result<()> {
        if rows != self.grid * self.grid || cols != self.in_channels {
            let side = (rows as f64).sqrt();
            let actual = if side.fract() == 0.0 {
                format!("{side}x{side}x{cols}")
            } else {
                format!("{rows} tokens (not square) x {cols}")
            };
            return Err(Error::shape(
                "multiscale_fuse",
                format!("{0}x{0}x{1}", self.grid, self.in_channels),
                actual,
            ));
        }
        Ok(())
    }

    /// Aligned branches, each already at the base grid resolution.
    pub fn branches(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Vec<Var>> {
        let (r, c) = tape.value(x).dim();
        self.check(r, c)?;
        Ok(self
            .branches
            .iter()
            .map(|b| {
                let pooled = match &b.pool {
                    Some(p) => tape.mix(x, p),
                    None => x,
                };
                let aligned = b.align.forward(tape, store, pooled);
                match &b.up {
                    Some(u) => tape.mix(aligned, u),
                    None => aligned,
                }
            })
            .collect())
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let parts = self.branches(tape, store, x)?;
        let mut acc = parts[0];
        for &p in &parts[1..] {
            acc = tape.add(acc, p);
        }
        Ok(acc)
    }

    /// Tape-free evaluation.
    pub fn apply(&self, store: &ParamStore, x: &Mat) -> Result<Mat> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let out = self.forward(&mut tape, store, v)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(grid: usize, cin: usize, cout: usize) -> (ParamStore, MultiScaleFusion) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m =
            MultiScaleFusion::new(&mut store, grid, cin, cout, &SCALE_FACTORS, &mut rng).unwrap();
        (store, m)
    }

    #[test]
    fn preserves_base_shape() {
        let (store, m) = build(14, 64, 64);
        assert_eq!(m.branch_count(), 3);
        assert_eq!(m.strides(), vec![1, 2, 4]);
        assert_eq!(m.branch_grid(2), 4);
        let x = Mat::from_shape_fn((196, 64), |(i, j)| ((i * 7 + j) % 13) as f64 / 13.0);
        assert_eq!(m.apply(&store, &x).unwrap().dim(), (196, 64));
    }

    #[test]
    fn zero_in_zero_out_with_zero_bias() {
        let (store, m) = build(14, 8, 4);
        let y = m.apply(&store, &Mat::zeros((196, 8))).unwrap();
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_base_branch_only() {
        let (mut store, m) = build(6, 5, 5);
        for i in 0..3 {
            let [w, _] = m.branch_params(i);
            *store.value_mut(w) = if i == 0 {
                Mat::eye(5)
            } else {
                Mat::zeros((5, 5))
            };
        }
        let x = Mat::from_shape_fn((36, 5), |(i, j)| (i as f64 - j as f64 * 1.5).sin());
        assert_eq!(m.apply(&store, &x).unwrap(), x);
    }

    #[test]
    fn non_square_input_rejected() {
        let (store, m) = build(4, 3, 3);
        assert!(matches!(
            m.apply(&store, &Mat::zeros((15, 3))),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn factors_must_be_reciprocals() {
        assert_eq!(stride_for(0.25).unwrap(), 4);
        assert!(stride_for(0.3).is_err());
        assert!(stride_for(2.0).is_err());
    }
}
