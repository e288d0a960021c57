//! Reverse-mode automatic differentiation over 2-D `f64` matrices.
//!
//! Spatial maps are stored channel-last as `(h * w, channels)` matrices in
//! raster order, so 1×1 convolutions are plain matrix products and resampling
//! is a sparse mixing of rows.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};

use super::params::{ParamId, ParamStore};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// A fixed linear map between row sets: `out[r] = Σ w · in[c]`.
#[derive(Debug, Clone)]
pub struct RowMix {
    rows_in: usize,
    taps: Vec<Vec<(usize, f64)>>,
}

impl RowMix {
    pub fn new(rows_in: usize, taps: Vec<Vec<(usize, f64)>>) -> Self {
        debug_assert!(taps.iter().flatten().all(|&(c, _)| c < rows_in));
        RowMix { rows_in, taps }
    }

    pub fn rows_in(&self) -> usize {
        self.rows_in
    }

    pub fn rows_out(&self) -> usize {
        self.taps.len()
    }

    /// Average pooling with a `k`×`k` window and stride `k`. Partial windows
    /// at the bottom/right edges average only the cells they cover.
    pub fn avg_pool(h: usize, w: usize, k: usize) -> Self {
        let (ho, wo) = (h.div_ceil(k), w.div_ceil(k));
        let mut taps = Vec::with_capacity(ho * wo);
        for i in 0..ho {
            for j in 0..wo {
                let rows = (i * k)..((i + 1) * k).min(h);
                let cols = (j * k)..((j + 1) * k).min(w);
                let n = (rows.len() * cols.len()) as f64;
                let mut t = Vec::new();
                for r in rows {
                    for c in cols.clone() {
                        t.push((r * w + c, 1.0 / n));
                    }
                }
                taps.push(t);
            }
        }
        RowMix::new(h * w, taps)
    }

    /// Block-average from `(h, w)` onto an `(ho, wo)` grid. Block `i` spans
    /// input rows `floor(i*h/ho) .. floor((i+1)*h/ho)`.
    pub fn area_resize(h: usize, w: usize, ho: usize, wo: usize) -> Self {
        assert!(ho <= h && wo <= w, "area_resize only shrinks");
        let mut taps = Vec::with_capacity(ho * wo);
        for i in 0..ho {
            for j in 0..wo {
                let rows = (i * h / ho)..((i + 1) * h / ho);
                let cols = (j * w / wo)..((j + 1) * w / wo);
                let n = (rows.len() * cols.len()) as f64;
                let mut t = Vec::new();
                for r in rows {
                    for c in cols.clone() {
                        t.push((r * w + c, 1.0 / n));
                    }
                }
                taps.push(t);
            }
        }
        RowMix::new(h * w, taps)
    }

    /// Nearest-neighbor upsampling that undoes [`RowMix::avg_pool`]: output
    /// cell `(i, j)` copies pooled cell `(i / k, j / k)`.
    pub fn nearest_upsample(h: usize, w: usize, k: usize) -> Self {
        let wo = w.div_ceil(k);
        let ho = h.div_ceil(k);
        let taps = (0..h * w)
            .map(|idx| {
                let (i, j) = (idx / w, idx % w);
                vec![((i / k) * wo + j / k, 1.0)]
            })
            .collect();
        RowMix::new(ho * wo, taps)
    }

    /// Bilinear resampling with half-pixel centers (`align_corners = false`).
    pub fn bilinear(h: usize, w: usize, ho: usize, wo: usize) -> Self {
        fn axis(n_in: usize, n_out: usize, o: usize) -> [(usize, f64); 2] {
            let scale = n_in as f64 / n_out as f64;
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            let frac = src - i0 as f64;
            [(i0, 1.0 - frac), (i1, frac)]
        }
        let mut taps = Vec::with_capacity(ho * wo);
        for i in 0..ho {
            let ay = axis(h, ho, i);
            for j in 0..wo {
                let ax = axis(w, wo, j);
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(r, wy) in &ay {
                    for &(c, wx) in &ax {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let idx = r * w + c;
                        match t.iter_mut().find(|(k, _)| *k == idx) {
                            Some(e) => e.1 += wgt,
                            None => t.push((idx, wgt)),
                        }
                    }
                }
                taps.push(t);
            }
        }
        RowMix::new(h * w, taps)
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows_out(), x.ncols()));
        for (r, taps) in self.taps.iter().enumerate() {
            let mut row = out.row_mut(r);
            for &(c, w) in taps {
                row.scaled_add(w, &x.row(c));
            }
        }
        out
    }

    fn apply_transpose(&self, g: &Mat) -> Mat {
        let mut out = Mat::zeros((self.rows_in, g.ncols()));
        for (r, taps) in self.taps.iter().enumerate() {
            let gr = g.row(r);
            for &(c, w) in taps {
                out.row_mut(c).scaled_add(w, &gr);
            }
        }
        out
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mix(Var, Arc<RowMix>),
    Im2Col3 {
        x: Var,
        h: usize,
        w: usize,
    },
    BceLogits {
        z: Var,
        target: Arc<Mat>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

/// Gradients from one backward pass, indexed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct Grads {
    by_param: Vec<Option<Mat>>,
}

impl Grads {
    pub fn empty(n_params: usize) -> Self {
        Grads {
            by_param: vec![None; n_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Mat> {
        self.by_param.get(id.index()).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.by_param.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_param.is_empty()
    }

    /// Adds `scale * other` into `self`.
    pub fn accumulate(&mut self, other: &Grads, scale: f64) {
        if self.by_param.len() < other.by_param.len() {
            self.by_param.resize(other.by_param.len(), None);
        }
        for (slot, g) in self.by_param.iter_mut().zip(&other.by_param) {
            if let Some(g) = g {
                match slot {
                    Some(s) => s.scaled_add(scale, g),
                    None => *slot = Some(g * scale),
                }
            }
        }
    }

    /// Gradient for `id`, zero-filled to the parameter's shape when it was
    /// not reached by the backward pass.
    pub fn dense(&self, id: ParamId, store: &ParamStore) -> Mat {
        self.get(id)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(store.value(id).dim()))
    }
}

/// Records operations for a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; gradients stop here.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a (n×m) + row (1×m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .mapv(|x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(v, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - m).exp());
            let s = row.sum();
            row.mapv_inplace(|x| x / s);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Per-row standardization without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let n = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = xhat.clone();
        self.push(
            value,
            Op::LayerNorm {
                x: a,
                xhat,
                inv_std,
            },
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let flat: Vec<f64> = self.value(a).iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape element count");
        self.push(v, Op::Reshape(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("concat_rows widths");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols heights");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn mix(&mut self, a: Var, mix: &Arc<RowMix>) -> Var {
        let v = mix.apply(self.value(a));
        self.push(v, Op::Mix(a, Arc::clone(mix)))
    }

    /// Unfolds 3×3 zero-padded neighborhoods of an `(h*w, c)` map into
    /// `(h*w, 9c)`; column block `k = (dy+1)*3 + (dx+1)` holds the neighbor
    /// at offset `(dy, dx)`.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Var {
        let v = im2col3(self.value(a), h, w);
        self.push(v, Op::Im2Col3 { x: a, h, w })
    }

    /// Mean binary cross-entropy between `sigmoid(z)` and `target`, as a 1×1.
    pub fn bce_with_logits(&mut self, z: Var, target: Arc<Mat>) -> Var {
        let zv = self.value(z);
        assert_eq!(zv.dim(), target.dim(), "bce target shape");
        let n = zv.len() as f64;
        let total: f64 = zv
            .iter()
            .zip(target.iter())
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum();
        self.push(
            Mat::from_elem((1, 1), total / n),
            Op::BceLogits { z, target },
        )
    }

    /// Reverse pass from a 1×1 `loss`. Only parameter gradients are kept.
    pub fn backward(&self, loss: Var, n_params: usize) -> Grads {
        assert_eq!(self.value(loss).dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_elem((1, 1), 1.0));
        let mut out = Grads::empty(n_params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let mut send = |v: Var, d: Mat| match &mut grads[v.0] {
                Some(acc) => *acc += &d,
                slot @ None => *slot = Some(d),
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    let slot = &mut out.by_param[id.index()];
                    match slot {
                        Some(acc) => *acc += &g,
                        None => *slot = Some(g),
                    }
                }
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.value(*b).t());
                    let db = self.value(*a).t().dot(&g);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::AddRow(a, row) => {
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    send(*row, dr);
                    send(*a, g);
                }
                Op::Mul(a, b) => {
                    let da = &g * self.value(*b);
                    let db = &g * self.value(*a);
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(a, k) => send(*a, g * *k),
                Op::Relu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        if x <= 0.0 {
                            *d = 0.0
                        }
                    });
                    send(*a, d);
                }
                Op::Gelu(a) => {
                    let mut d = g;
                    d.zip_mut_with(self.value(*a), |d, &x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        *d *= 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
                    });
                    send(*a, d);
                }
                Op::Sigmoid(a) => {
                    let mut d = g;
                    d.zip_mut_with(&node.value, |d, &y| *d *= y * (1.0 - y));
                    send(*a, d);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut d = &g * y;
                    for (mut drow, yrow) in d.rows_mut().into_iter().zip(y.rows()) {
                        let s = drow.sum();
                        drow.zip_mut_with(&yrow, |dv, &yv| *dv -= yv * s);
                    }
                    send(*a, d);
                }
                Op::LayerNorm { x, xhat, inv_std } => {
                    let n = xhat.ncols() as f64;
                    let mut d = Mat::zeros(g.dim());
                    for r in 0..g.nrows() {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let sum_g = gr.sum();
                        let sum_gx = gr.dot(&xr);
                        let is = inv_std[r];
                        for c in 0..g.ncols() {
                            d[[r, c]] = is / n * (n * gr[c] - sum_g - xr[c] * sum_gx);
                        }
                    }
                    send(*x, d);
                }
                Op::Transpose(a) => send(*a, g.t().to_owned()),
                Op::Reshape(a) => {
                    let dim = self.value(*a).dim();
                    let flat: Vec<f64> = g.iter().copied().collect();
                    send(*a, Mat::from_shape_vec(dim, flat).expect("reshape back"));
                }
                Op::SliceRows(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    send(*a, d);
                }
                Op::SliceCols(a, start) => {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    send(*a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        send(p, g.slice(s![off..off + n, ..]).to_owned());
                        off += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        send(p, g.slice(s![.., off..off + n]).to_owned());
                        off += n;
                    }
                }
                Op::Mix(a, mix) => send(*a, mix.apply_transpose(&g)),
                Op::Im2Col3 { x, h, w } => {
                    let c = self.value(*x).ncols();
                    send(*x, col2im3(&g, *h, *w, c));
                }
                Op::BceLogits { z, target } => {
                    let n = target.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut d = self.value(*z).mapv(sigmoid);
                    d.zip_mut_with(target, |d, &t| *d = (*d - t) * scale);
                    send(*z, d);
                }
            }
        }
        out
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn im2col3(x: &Mat, h: usize, w: usize) -> Mat {
    let c = x.ncols();
    assert_eq!(x.nrows(), h * w, "im2col3 spatial size");
    let mut out = Mat::zeros((h * w, 9 * c));
    for i in 0..h {
        for j in 0..w {
            let mut orow = out.row_mut(i * w + j);
            for dy in -1i64..=1 {
                let y = i as i64 + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let xx = j as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let k = ((dy + 1) * 3 + (dx + 1)) as usize;
                    orow.slice_mut(s![k * c..(k + 1) * c])
                        .assign(&x.row(y as usize * w + xx as usize));
                }
            }
        }
    }
    out
}

fn col2im3(g: &Mat, h: usize, w: usize, c: usize) -> Mat {
    let mut out = Mat::zeros((h * w, c));
    for i in 0..h {
        for j in 0..w {
            let grow = g.row(i * w + j);
            for dy in -1i64..=1 {
                let y = i as i64 + dy;
                if y < 0 || y >= h as i64 {
                    continue;
                }
                for dx in -1i64..=1 {
                    let xx = j as i64 + dx;
                    if xx < 0 || xx >= w as i64 {
                        continue;
                    }
                    let k = ((dy + 1) * 3 + (dx + 1)) as usize;
                    let mut orow = out.row_mut(y as usize * w + xx as usize);
                    orow += &grow.slice(s![k * c..(k + 1) * c]);
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(param) for a graph builder.
    fn check(build: impl Fn(&mut Tape, &ParamStore) -> Var, store: &mut ParamStore) {
        let mut tape = Tape::new();
        let loss = build(&mut tape, store);
        let grads = tape.backward(loss, store.len());
        let h = 1e-6;
        let ids: Vec<ParamId> = store.ids().collect();
        for id in ids {
            let analytic = grads.dense(id, store);
            let dim = store.value(id).dim();
            for r in 0..dim.0 {
                for c in 0..dim.1 {
                    let orig = store.value(id)[[r, c]];
                    store.value_mut(id)[[r, c]] = orig + h;
                    let mut t = Tape::new();
                    let l = build(&mut t, store);
                    let up = t.scalar(l);
                    store.value_mut(id)[[r, c]] = orig - h;
                    let mut t = Tape::new();
                    let l = build(&mut t, store);
                    let down = t.scalar(l);
                    store.value_mut(id)[[r, c]] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let a = analytic[[r, c]];
                    let denom = a.abs().max(numeric.abs()).max(1e-6);
                    assert!(
                        (a - numeric).abs() / denom < 1e-5,
                        "{} [{r},{c}]: analytic {a} vs numeric {numeric}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences_for_every_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = store.add("x", rand_mat(&mut rng, 9, 4));
        let w = store.add("w", rand_mat(&mut rng, 4, 6));
        let b = store.add("b", rand_mat(&mut rng, 1, 6));
        let y = store.add("y", rand_mat(&mut rng, 9, 6));
        let k = store.add("k", rand_mat(&mut rng, 36, 2));
        let target = Arc::new(Mat::from_shape_fn((16, 2), |(r, c)| {
            ((r + c) % 3) as f64 / 2.0
        }));
        let up = Arc::new(RowMix::bilinear(3, 3, 4, 4));
        let pool = Arc::new(RowMix::avg_pool(3, 3, 2));
        let near = Arc::new(RowMix::nearest_upsample(3, 3, 2));

        check(
            |t, s| {
                let x = t.param(s, x);
                let w = t.param(s, w);
                let b = t.param(s, b);
                let y = t.param(s, y);
                let k = t.param(s, k);
                let lin = t.matmul(x, w);
                let lin = t.add_row(lin, b);
                let g = t.gelu(lin);
                let ln = t.layer_norm(g);
                let m = t.mul(ln, y);
                let sm = t.softmax_rows(m);
                let r = t.relu(lin);
                let a = t.add(sm, r);
                let a = t.scale(a, 0.7);
                let left = t.slice_cols(a, 0, 2);
                let right = t.slice_cols(a, 2, 4);
                let cat = t.concat_cols(&[right, left]);
                let cols = t.im2col3(cat, 3, 3);
                let conv = t.matmul(cols, k);
                let p = t.mix(conv, &pool);
                let p = t.mix(p, &near);
                let conv = t.add(conv, p);
                let top = t.slice_rows(conv, 0, 4);
                let rest = t.slice_rows(conv, 4, 9);
                let reord = t.concat_rows(&[rest, top]);
                let tr = t.transpose(reord);
                let tr = t.transpose(tr);
                let rs = t.reshape(tr, 9, 2);
                let upd = t.mix(rs, &up);
                let sg = t.sigmoid(upd);
                let z = t.add(upd, sg);
                t.bce_with_logits(z, Arc::clone(&target))
            },
            &mut store,
        );
    }

    #[test]
    fn bilinear_preserves_constants_and_rows_sum_to_one() {
        let m = RowMix::bilinear(14, 14, 64, 64);
        for t in &m.taps {
            let s: f64 = t.iter().map(|(_, w)| w).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let x = Mat::from_elem((196, 2), 3.5);
        assert!(m.apply(&x).iter().all(|&v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn avg_pool_handles_ragged_edges() {
        // 3x3 pooled by 2: bottom-right output averages a single cell
        let m = RowMix::avg_pool(3, 3, 2);
        assert_eq!(m.rows_out(), 4);
        let x = Mat::from_shape_fn((9, 1), |(r, _)| r as f64);
        let y = m.apply(&x);
        assert_eq!(y[[0, 0]], (0.0 + 1.0 + 3.0 + 4.0) / 4.0);
        assert_eq!(y[[1, 0]], (2.0 + 5.0) / 2.0);
        assert_eq!(y[[3, 0]], 8.0);
        let up = RowMix::nearest_upsample(3, 3, 2);
        let back = up.apply(&y);
        assert_eq!(back[[8, 0]], 8.0);
        assert_eq!(back[[4, 0]], y[[0, 0]]);
    }

    #[test]
    fn area_resize_averages_blocks() {
        let m = RowMix::area_resize(4, 4, 2, 2);
        let x = Mat::from_shape_fn((16, 1), |(r, _)| r as f64);
        let y = m.apply(&x);
        assert_eq!(y[[0, 0]], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        assert_eq!(y[[3, 0]], (10.0 + 11.0 + 14.0 + 15.0) / 4.0);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-15);
    }
}
