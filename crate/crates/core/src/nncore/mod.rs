//! Minimal f64 neural-network kernels with hand-written backward passes and
//! cached activations (no tape). Everything is deterministic given the RNG
//! seed and runs single-threaded; gradient correctness is enforced against
//! central finite differences in the test suites.

mod checkpoint;
mod conv;
mod gradcheck;
mod loss;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use conv::{Conv2d, Img, Upsample2x};
pub use gradcheck::{check_gradients, GradCheck};
pub use loss::{bce, cross_entropy, l1, smooth_l1, BCE_CLAMP};
pub use optim::{clip_grad_norm, AdamW};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }
}

/// A learnable tensor: value, gradient accumulator and AdamW moments.
#[derive(Clone, Debug)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        ParamTensor {
            name: name.into(),
            shape: shape.to_vec(),
            value: vec![0.0; n],
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    /// Uniform He-style init scaled for ReLU fan-in, times `gain`.
    pub fn he_uniform(name: impl Into<String>, shape: &[usize], fan_in: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut t = Self::zeros(name, shape);
        let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
        for v in &mut t.value {
            *v = rng.gen_range(-bound..bound);
        }
        t
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything holding learnable tensors. Visit order must be stable; it
/// defines the checkpoint layout.
pub trait ParamSource {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor));

    fn zero_grads(&mut self) {
        self.visit(&mut |p| p.zero_grad());
    }

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit(&mut |p| n += p.len());
        n
    }
}

/// Fully connected layer: y = x w^T + b, caching x for the backward pass.
#[derive(Clone, Debug)]
pub struct Dense {
    pub w: ParamTensor,
    pub b: ParamTensor,
    cache_x: Option<Mat>,
}

impl Dense {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        Dense {
            w: ParamTensor::he_uniform(format!("{name}.w"), &[out_dim, in_dim], in_dim, gain, rng),
            b: ParamTensor::zeros(format!("{name}.b"), &[out_dim]),
            cache_x: None,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.shape[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.shape[0]
    }

    pub fn forward(&mut self, x: &Mat, keep: bool) -> Mat {
        assert_eq!(x.cols, self.in_dim());
        let (n, k, m) = (x.rows, x.cols, self.out_dim());
        let mut y = Mat::zeros(n, m);
        for i in 0..n {
            let xr = x.row(i);
            let yr = y.row_mut(i);
            for o in 0..m {
                let wr = &self.w.value[o * k..(o + 1) * k];
                let mut acc = self.b.value[o];
                for j in 0..k {
                    acc += wr[j] * xr[j];
                }
                yr[o] = acc;
            }
        }
        self.cache_x = if keep { Some(x.clone()) } else { None };
        y
    }

    /// Accumulates dW and db, returns dX.
    pub fn backward(&mut self, dy: &Mat) -> Mat {
        let x = self.cache_x.as_ref().expect("forward(keep=true) before backward");
        let (n, k, m) = (x.rows, x.cols, self.out_dim());
        assert_eq!((dy.rows, dy.cols), (n, m));
        let mut dx = Mat::zeros(n, k);
        for i in 0..n {
            let xr = x.row(i);
            let dyr = dy.row(i);
            let dxr = dx.row_mut(i);
            for o in 0..m {
                let g = dyr[o];
                if g == 0.0 {
                    continue;
                }
                self.b.grad[o] += g;
                let wr = &self.w.value[o * k..(o + 1) * k];
                let dwr = &mut self.w.grad[o * k..(o + 1) * k];
                for j in 0..k {
                    dwr[j] += g * xr[j];
                    dxr[j] += g * wr[j];
                }
            }
        }
        dx
    }
}

impl ParamSource for Dense {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

/// Stack of dense layers with ReLU between them (and optionally after the
/// last one, as in shared point-feature encoders before max pooling).
#[derive(Clone, Debug)]
pub struct MlpStack {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
    masks: Vec<Vec<bool>>,
}

impl MlpStack {
    pub fn new(name: &str, widths: &[usize], relu_last: bool, rng: &mut ChaCha8Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::new(&format!("{name}.{i}"), w[0], w[1], 1.0, rng))
            .collect();
        MlpStack { layers, relu_last, masks: Vec::new() }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn forward(&mut self, x: &Mat, keep: bool) -> Mat {
        self.masks.clear();
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            cur = layer.forward(&cur, keep);
            if i < last || self.relu_last {
                let mut mask = Vec::new();
                if keep {
                    mask = vec![false; cur.data.len()];
                }
                for (j, v) in cur.data.iter_mut().enumerate() {
                    if *v > 0.0 {
                        if keep {
                            mask[j] = true;
                        }
                    } else {
                        *v = 0.0;
                    }
                }
                if keep {
                    self.masks.push(mask);
                }
            }
        }
        cur
    }

    pub fn backward(&mut self, dy: &Mat) -> Mat {
        let last = self.layers.len() - 1;
        let mut cur = dy.clone();
        let mut mask_iter = self.masks.len();
        for i in (0..self.layers.len()).rev() {
            if i < last || self.relu_last {
                mask_iter -= 1;
                let mask = &self.masks[mask_iter];
                for (v, &keep) in cur.data.iter_mut().zip(mask) {
                    if !keep {
                        *v = 0.0;
                    }
                }
            }
            cur = self.layers[i].backward(&cur);
        }
        cur
    }
}

impl ParamSource for MlpStack {
    fn visit(&mut self, f: &mut dyn FnMut(&mut ParamTensor)) {
        for l in &mut self.layers {
            l.visit(f);
        }
    }
}

/// Column-wise max over every consecutive `seg_len` rows. Returns the pooled
/// matrix and the flat argmax row index per (group, column); ties keep the
/// first row, and gradients route only to the argmax entries.
pub fn maxpool_segments(x: &Mat, seg_len: usize) -> (Mat, Vec<usize>) {
    assert!(seg_len > 0 && x.rows % seg_len == 0, "rows must divide into segments");
    let groups = x.rows / seg_len;
    let mut out = Mat::zeros(groups, x.cols);
    let mut arg = vec![0usize; groups * x.cols];
    for g in 0..groups {
        let base = g * seg_len;
        let or = out.row_mut(g);
        let ar = &mut arg[g * x.cols..(g + 1) * x.cols];
        or.copy_from_slice(x.row(base));
        ar.iter_mut().for_each(|a| *a = base);
        for i in base + 1..base + seg_len {
            let xr = x.row(i);
            for j in 0..x.cols {
                if xr[j] > or[j] {
                    or[j] = xr[j];
                    ar[j] = i;
                }
            }
        }
    }
    (out, arg)
}

/// Max over all rows of a set (single segment of [`maxpool_segments`]).
pub fn maxpool_set(x: &Mat) -> (Vec<f64>, Vec<usize>) {
    let (m, a) = maxpool_segments(x, x.rows);
    (m.data, a)
}

/// Scatters pooled gradients back to the argmax rows.
pub fn maxpool_backward(dy: &Mat, arg: &[usize], in_rows: usize) -> Mat {
    let mut dx = Mat::zeros(in_rows, dy.cols);
    for g in 0..dy.rows {
        let dyr = dy.row(g);
        let ar = &arg[g * dy.cols..(g + 1) * dy.cols];
        for j in 0..dy.cols {
            dx.data[ar[j] * dy.cols + j] += dyr[j];
        }
    }
    dx
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Mat) -> Mat {
    let mut out = x.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// d(loss)/d(logits) for a softmax whose probabilities received `dprobs`.
pub fn softmax_backward(probs: &[f64], dprobs: &[f64]) -> Vec<f64> {
    let dot: f64 = probs.iter().zip(dprobs).map(|(p, d)| p * d).sum();
    probs.iter().zip(dprobs).map(|(p, d)| p * (d - dot)).collect()
}

/// Whether a forward pass runs with training behavior (dropout active,
/// training-time head selection) or inference behavior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverted dropout; identity at inference. The mask is cached for backward.
#[derive(Clone, Debug)]
pub struct Dropout {
    pub p: f64,
    mask: Vec<f64>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        assert!((0.0..1.0).contains(&p));
        Dropout { p, mask: Vec::new() }
    }

    pub fn forward(&mut self, x: &Mat, train: bool, rng: &mut ChaCha8Rng) -> Mat {
        if !train || self.p == 0.0 {
            self.mask.clear();
            return x.clone();
        }
        let keep = 1.0 - self.p;
        self.mask = x.data.iter().map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mut y = x.clone();
        for (v, m) in y.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
        y
    }

    pub fn backward(&self, dy: &Mat) -> Mat {
        if self.mask.is_empty() {
            return dy.clone();
        }
        let mut dx = dy.clone();
        for (v, m) in dx.data.iter_mut().zip(&self.mask) {
            *v *= m;
        }
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_forward_matches_hand_computation() {
        let mut d = Dense::new("t", 2, 2, 1.0, &mut rng(0));
        d.w.value = vec![1.0, 2.0, -1.0, 0.5];
        d.b.value = vec![0.1, -0.2];
        let x = Mat::from_vec(1, 2, vec![3.0, 4.0]);
        let y = d.forward(&x, false);
        assert!((y.get(0, 0) - (3.0 + 8.0 + 0.1)).abs() < 1e-12);
        assert!((y.get(0, 1) - (-3.0 + 2.0 - 0.2)).abs() < 1e-12);
    }

    #[test]
    fn maxpool_routes_to_first_max_on_ties() {
        let x = Mat::from_vec(3, 2, vec![1.0, 5.0, 7.0, 5.0, 7.0, 2.0]);
        let (pooled, arg) = maxpool_set(&x);
        assert_eq!(pooled, vec![7.0, 5.0]);
        assert_eq!(arg, vec![1, 0]); // duplicate column max keeps the lowest row
        let dy = Mat::from_vec(1, 2, vec![1.0, 1.0]);
        let dx = maxpool_backward(&dy, &arg, 3);
        assert_eq!(dx.data, vec![0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_is_duplicate_row_invariant() {
        let x = Mat::from_vec(2, 3, vec![1.0, -2.0, 0.5, 1.0, -2.0, 0.5]);
        let (pooled, _) = maxpool_set(&x);
        assert_eq!(pooled, vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn softmax_rows_are_simplices() {
        let x = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, -5.0, 0.0, 5.0]);
        let p = softmax_rows(&x);
        for i in 0..2 {
            let s: f64 = p.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(p.row(i).iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn dropout_is_identity_at_eval_and_scales_at_train() {
        let x = Mat::from_vec(1, 1000, vec![1.0; 1000]);
        let mut d = Dropout::new(0.5);
        let eval = d.forward(&x, false, &mut rng(4));
        assert_eq!(eval.data, x.data);
        let train = d.forward(&x, true, &mut rng(4));
        let mean: f64 = train.data.iter().sum::<f64>() / 1000.0;
        assert!((mean - 1.0).abs() < 0.1, "inverted dropout should preserve expectation, got {mean}");
        assert!(train.data.iter().all(|&v| v == 0.0 || (v - 2.0).abs() < 1e-12));
    }
}
