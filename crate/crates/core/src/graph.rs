//! A small reverse-mode differentiation tape over dense 64-bit matrices.
//!
//! Every value is a 2-D matrix; scalars are `1x1`. Nodes are appended in
//! evaluation order, so a single reverse sweep over the node list visits
//! every node after all of its consumers.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a square-kernel, zero-padded 2-D convolution over a feature
/// map stored as an `(height*width) x channels` matrix in raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Source row in the input map for output position `(oy, ox)` and kernel
    /// offset `(ky, kx)`, or `None` inside the zero padding.
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
            None
        } else {
            Some(y as usize * self.in_w + x as usize)
        }
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Mat,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    ColL1Normalize {
        x: Var,
        denom: Vec<f64>,
    },
    ColL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    RowNorms(Var),
    Sum(Var),
    SelectRow(Var, usize),
    Im2Col {
        x: Var,
        geom: ConvGeometry,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to every node that requires them.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

pub const LAYER_NORM_EPS: f64 = 1e-5;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked, as for an input being probed.
    pub fn input(&mut self, value: Mat, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `a + 1·row`, broadcasting a `1 x n` row over every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, k), rg)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), rg)
    }

    /// Row-wise layer normalization with learned `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut normalized = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in normalized.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &normalized * self.value(gain) + self.value(bias);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
            rg,
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|v| v / sum);
        }
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Divides every column by `(column sum + eps)`.
    pub fn col_l1_normalize(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let denom: Vec<f64> = av.axis_iter(Axis(1)).map(|c| c.sum() + eps).collect();
        let mut value = av.clone();
        for (mut col, d) in value.axis_iter_mut(Axis(1)).zip(&denom) {
            col.mapv_inplace(|v| v / d);
        }
        let rg = self.rg(a);
        self.push(value, Op::ColL1Normalize { x: a, denom }, rg)
    }

    /// Scales every column to unit l2 norm (norms floored at 1e-12).
    pub fn col_l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .axis_iter(Axis(1))
            .map(|c| c.dot(&c).sqrt().max(NORM_FLOOR))
            .collect();
        let mut value = av.clone();
        for (mut col, n) in value.axis_iter_mut(Axis(1)).zip(&norms) {
            col.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(a);
        self.push(value, Op::ColL2Normalize { x: a, norms }, rg)
    }

    /// Scales every row to unit l2 norm (norms floored at 1e-12).
    pub fn row_l2_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let norms: Vec<f64> = av
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(NORM_FLOOR))
            .collect();
        let mut value = av.clone();
        for (mut row, n) in value.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let rg = self.rg(a);
        self.push(value, Op::RowL2Normalize { x: a, norms }, rg)
    }

    /// `n x 1` column of row l2 norms.
    pub fn row_norms(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let value = Array2::from_shape_fn((av.nrows(), 1), |(i, _)| {
            let r = av.row(i);
            r.dot(&r).sqrt()
        });
        let rg = self.rg(a);
        self.push(value, Op::RowNorms(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn select_row(&mut self, a: Var, row: usize) -> Var {
        let value = self.value(a).slice(s![row..row + 1, ..]).to_owned();
        let rg = self.rg(a);
        self.push(value, Op::SelectRow(a, row), rg)
    }

    /// Squared l2 distance between row `i` of `a` and row `j` of `b`, as `1x1`.
    pub fn row_sq_dist(&mut self, a: Var, i: usize, b: Var, j: usize) -> Var {
        let ra = self.select_row(a, i);
        let rb = self.select_row(b, j);
        let diff = self.sub(ra, rb);
        let sq = self.mul(diff, diff);
        self.sum(sq)
    }

    /// `[margin - x]^+` for a `1x1` input.
    pub fn hinge(&mut self, x: Var, margin: f64) -> Var {
        let neg = self.scale(x, -1.0);
        let shifted = self.add_scalar(neg, margin);
        self.relu(shifted)
    }

    /// Sum of a list of `1x1` nodes; an empty list yields a zero constant.
    pub fn sum_scalars(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(Array2::zeros((1, 1))),
            Some((first, rest)) => rest.iter().fold(*first, |acc, t| self.add(acc, *t)),
        }
    }

    /// Unfolds convolution patches: output is `(out_h*out_w) x (k*k*channels)`
    /// with columns ordered `(ky, kx, channel)`.
    pub fn im2col(&mut self, x: Var, geom: ConvGeometry) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.dim(), (geom.in_h * geom.in_w, geom.channels));
        let (oh, ow, c, k) = (geom.out_h(), geom.out_w(), geom.channels, geom.kernel);
        let mut value = Array2::zeros((oh * ow, geom.patch_len()));
        for oy in 0..oh {
            for ox in 0..ow {
                let mut dst = value.row_mut(oy * ow + ox);
                for ky in 0..k {
                    for kx in 0..k {
                        if let Some(src) = geom.source(oy, ox, ky, kx) {
                            let off = (ky * k + kx) * c;
                            dst.slice_mut(s![off..off + c]).assign(&xv.row(src));
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(value, Op::Im2Col { x, geom }, rg)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let mut acc = |v: Var, delta: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, -g);
            }
            Op::Mul(a, b) => {
                if a == b {
                    acc(*a, g * self.value(*a) * 2.0);
                } else {
                    acc(*a, g * self.value(*b));
                    acc(*b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                acc(*row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Scale(a, k) => acc(*a, g * *k),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|s| s * (1.0 - s)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|t| 1.0 - t * t));
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                acc(*bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                acc(*gain, (g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0)));
                if self.rg(*x) {
                    let dxhat = g * self.value(*gain);
                    let n = normalized.ncols() as f64;
                    let mut dx = Array2::zeros(g.dim());
                    for (i, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(i);
                        let xh = normalized.row(i);
                        let mean_dh = dh.sum() / n;
                        let mean_dhx = dh.dot(&xh) / n;
                        for ((d, &a), &b) in row.iter_mut().zip(dh.iter()).zip(xh.iter()) {
                            *d = inv_std[i] * (a - mean_dh - b * mean_dhx);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut d = g * y;
                for (mut row, yr) in d.rows_mut().into_iter().zip(y.rows()) {
                    let s = row.sum();
                    Zip::from(&mut row).and(&yr).for_each(|r, &yv| *r -= yv * s);
                }
                acc(*a, d);
            }
            Op::ColL1Normalize { x, denom } => {
                let xv = self.value(*x);
                let mut d = g.clone();
                for (j, mut col) in d.axis_iter_mut(Axis(1)).enumerate() {
                    let dj = denom[j];
                    let inner = g.column(j).dot(&xv.column(j)) / (dj * dj);
                    col.mapv_inplace(|v| v / dj - inner);
                }
                acc(*x, d);
            }
            Op::ColL2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (j, mut col) in d.axis_iter_mut(Axis(1)).enumerate() {
                    let proj = g.column(j).dot(&y.column(j));
                    Zip::from(&mut col)
                        .and(y.column(j))
                        .for_each(|v, &yv| *v = (*v - yv * proj) / norms[j]);
                }
                acc(*x, d);
            }
            Op::RowL2Normalize { x, norms } => {
                let y = &node.value;
                let mut d = g.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let proj = g.row(i).dot(&y.row(i));
                    Zip::from(&mut row)
                        .and(y.row(i))
                        .for_each(|v, &yv| *v = (*v - yv * proj) / norms[i]);
                }
                acc(*x, d);
            }
            Op::RowNorms(a) => {
                let av = self.value(*a);
                let mut d = av.clone();
                for (i, mut row) in d.rows_mut().into_iter().enumerate() {
                    let n = node.value[[i, 0]];
                    let k = if n > 0.0 { g[[i, 0]] / n } else { 0.0 };
                    row.mapv_inplace(|v| v * k);
                }
                acc(*a, d);
            }
            Op::Sum(a) => {
                let shape = self.value(*a).dim();
                acc(*a, Array2::from_elem(shape, g[[0, 0]]));
            }
            Op::SelectRow(a, row) => {
                let mut d = Array2::zeros(self.value(*a).dim());
                d.row_mut(*row).assign(&g.row(0));
                acc(*a, d);
            }
            Op::Im2Col { x, geom } => {
                let (oh, ow, c, k) = (geom.out_h(), geom.out_w(), geom.channels, geom.kernel);
                let mut d = Array2::zeros((geom.in_h * geom.in_w, c));
                for oy in 0..oh {
                    for ox in 0..ow {
                        let src_row = g.row(oy * ow + ox);
                        for ky in 0..k {
                            for kx in 0..k {
                                if let Some(dst) = geom.source(oy, ox, ky, kx) {
                                    let off = (ky * k + kx) * c;
                                    let mut drow = d.row_mut(dst);
                                    drow += &src_row.slice(s![off..off + c]);
                                }
                            }
                        }
                    }
                }
                acc(*x, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(build)/d(input) at `x0`.
    fn check<F>(x0: &Mat, build: F)
    where
        F: Fn(&mut Graph, Var) -> Var,
    {
        let mut g = Graph::new();
        let x = g.input(x0.clone(), true);
        let out = build(&mut g, x);
        let analytic = g.backward(out).get(x).cloned().unwrap();
        let h = 1e-6;
        for idx in 0..x0.len() {
            let mut plus = x0.clone();
            let mut minus = x0.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let eval = |m: Mat| {
                let mut g = Graph::new();
                let x = g.input(m, false);
                let o = build(&mut g, x);
                g.scalar(o)
            };
            let numeric = (eval(plus) - eval(minus)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(err < 1e-5, "index {idx}: analytic {a} numeric {numeric}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var, seed: u64) -> Var {
        let (r, c) = g.shape(y);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = g.constant(random(&mut rng, r, c));
        let p = g.mul(y, w);
        g.sum(p)
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let b = random(&mut rng, 4, 3);
        check(&random(&mut rng, 2, 4), |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul(x, bv);
            let t = g.transpose(y);
            weighted_sum(g, t, 7)
        });
    }

    #[test]
    fn layer_norm_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(&mut rng, 1, 5);
        let bias = random(&mut rng, 1, 5);
        check(&random(&mut rng, 3, 5), |g, x| {
            let ga = g.constant(gain.clone());
            let bi = g.constant(bias.clone());
            let y = g.layer_norm(x, ga, bi);
            weighted_sum(g, y, 3)
        });
    }

    #[test]
    fn softmax_and_column_normalizations() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        check(&random(&mut rng, 4, 3), |g, x| {
            let y = g.softmax_rows(x);
            let z = g.col_l1_normalize(y, 1e-12);
            let w = g.col_l2_normalize(z);
            weighted_sum(g, w, 5)
        });
    }

    #[test]
    fn row_norm_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(&random(&mut rng, 3, 4), |g, x| {
            let n = g.row_norms(x);
            let y = g.row_l2_normalize(x);
            let a = weighted_sum(g, n, 1);
            let b = weighted_sum(g, y, 2);
            g.add(a, b)
        });
    }

    #[test]
    fn gates_and_hinge() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check(&random(&mut rng, 2, 3), |g, x| {
            let s = g.sigmoid(x);
            let t = g.tanh(x);
            let m = g.mul(s, t);
            let d = g.row_sq_dist(m, 0, x, 1);
            let h = g.hinge(d, 3.0);
            let w = weighted_sum(g, m, 9);
            g.sum_scalars(&[h, w])
        });
    }

    #[test]
    fn im2col_gradient_and_layout() {
        let geom = ConvGeometry {
            in_h: 4,
            in_w: 5,
            channels: 2,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!((geom.out_h(), geom.out_w()), (2, 3));
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        check(&random(&mut rng, 20, 2), |g, x| {
            let p = g.im2col(x, geom);
            weighted_sum(g, p, 4)
        });
    }

    #[test]
    fn im2col_center_tap_is_identity_for_stride_one() {
        let geom = ConvGeometry {
            in_h: 3,
            in_w: 3,
            channels: 1,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let x0 = Array2::from_shape_fn((9, 1), |(i, _)| i as f64);
        let mut g = Graph::new();
        let x = g.constant(x0.clone());
        let p = g.im2col(x, geom);
        // column 4 is the (1,1) kernel tap, i.e. the pixel itself
        assert_eq!(g.value(p).column(4).to_owned(), x0.column(0).to_owned());
        assert_eq!(g.value(p)[[0, 0]], 0.0);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0]]);
        let b = g.param(array![[3.0], [4.0]]);
        let y = g.matmul(a, b);
        let grads = g.backward(y);
        assert!(grads.get(a).is_none());
        assert_eq!(grads.get(b).unwrap(), &array![[1.0], [2.0]]);
    }
}
