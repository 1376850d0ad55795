//! Minimal layer library with explicit forward caches and backward passes.
//!
//! Activations are `channels x time` matrices. Parameters live in a flat
//! [`ParamStore`]; layers hold [`ParamId`]s into it, and gradients
//! accumulate into a second store of identical shape. Every backward
//! function takes `Option<&mut ParamStore>` so callers that only need the
//! input gradient (attacks) skip parameter accumulation.

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::degrade::standard_normal;
use crate::error::{Error, Result};

pub type Mat = Array2<f64>;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.tensors[id.0]
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Mat::zeros(t.dim())).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn n_params(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, k: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * k);
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    /// Zero padding.
    Zero,
    /// Wrap-around padding; makes the layer equivariant to circular shifts.
    Circular,
}

/// Same-length 1-D convolution (odd kernel) implemented with im2col.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub padding: Padding,
}

pub struct ConvCache {
    cols: Mat,
    time: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: Padding,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = (c_in * kernel) as f64;
        // He initialisation for leaky ReLU
        let std = (2.0 / ((1.0 + LEAKY_SLOPE * LEAKY_SLOPE) * fan_in)).sqrt();
        let w = Mat::from_shape_fn((c_out, c_in * kernel), |_| std * standard_normal(rng));
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Mat::zeros((c_out, 1))),
            c_in,
            c_out,
            kernel,
            padding,
        }
    }

    fn im2col(&self, x: &Mat) -> Mat {
        let t_len = x.ncols();
        if self.kernel == 1 {
            return x.clone();
        }
        let half = (self.kernel / 2) as isize;
        let mut cols = Mat::zeros((self.c_in * self.kernel, t_len));
        for ci in 0..self.c_in {
            let row = x.row(ci);
            for j in 0..self.kernel {
                let shift = j as isize - half;
                let mut dst = cols.row_mut(ci * self.kernel + j);
                for t in 0..t_len {
                    let src = t as isize + shift;
                    dst[t] = match self.padding {
                        Padding::Zero if src < 0 || src >= t_len as isize => 0.0,
                        Padding::Zero => row[src as usize],
                        Padding::Circular => row[src.rem_euclid(t_len as isize) as usize],
                    };
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Mat, t_len: usize) -> Mat {
        if self.kernel == 1 {
            return dcols.clone();
        }
        let half = (self.kernel / 2) as isize;
        let mut dx = Mat::zeros((self.c_in, t_len));
        for ci in 0..self.c_in {
            let mut dst = dx.row_mut(ci);
            for j in 0..self.kernel {
                let shift = j as isize - half;
                let src_row = dcols.row(ci * self.kernel + j);
                for t in 0..t_len {
                    let src = t as isize + shift;
                    match self.padding {
                        Padding::Zero if src < 0 || src >= t_len as isize => {}
                        Padding::Zero => dst[src as usize] += src_row[t],
                        Padding::Circular => {
                            dst[src.rem_euclid(t_len as isize) as usize] += src_row[t]
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> (Mat, ConvCache) {
        debug_assert_eq!(x.nrows(), self.c_in);
        let cols = self.im2col(x);
        let mut y = ps.get(self.weight).dot(&cols);
        y += ps.get(self.bias);
        (
            y,
            ConvCache {
                cols,
                time: x.ncols(),
            },
        )
    }

    pub fn backward(
        &self,
        ps: &ParamStore,
        grads: Option<&mut ParamStore>,
        cache: &ConvCache,
        dy: &Mat,
    ) -> Mat {
        if let Some(g) = grads {
            *g.get_mut(self.weight) += &dy.dot(&cache.cols.t());
            *g.get_mut(self.bias) += &dy.sum_axis(Axis(1)).insert_axis(Axis(1));
        }
        let dcols = ps.get(self.weight).t().dot(dy);
        self.col2im(&dcols, cache.time)
    }
}

/// Fully connected layer on column vectors (`in x 1`).
#[derive(Clone, Debug)]
pub struct Linear {
    conv: Conv1d,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut R) -> Self {
        let conv = Conv1d::new(store, name, d_in, d_out, 1, Padding::Zero, rng);
        let std = (1.0 / d_in as f64).sqrt();
        store
            .get_mut(conv.weight)
            .mapv_inplace(|_| std * standard_normal(rng));
        Self { conv }
    }

    pub fn weight(&self) -> ParamId {
        self.conv.weight
    }

    pub fn bias(&self) -> ParamId {
        self.conv.bias
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> (Mat, ConvCache) {
        self.conv.forward(ps, x)
    }

    pub fn backward(&self, ps: &ParamStore, grads: Option<&mut ParamStore>, cache: &ConvCache, dy: &Mat) -> Mat {
        self.conv.backward(ps, grads, cache, dy)
    }
}

pub fn leaky_relu(x: &Mat) -> Mat {
    x.mapv(|v| if v > 0.0 { v } else { LEAKY_SLOPE * v })
}

/// Backward of [`leaky_relu`] given its input.
pub fn leaky_relu_backward(x: &Mat, dy: &Mat) -> Mat {
    Zip::from(x)
        .and(dy)
        .map_collect(|x, g| if *x > 0.0 { *g } else { LEAKY_SLOPE * g })
}

pub fn sigmoid(x: &Mat) -> Mat {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

pub struct NormCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

impl NormCache {
    pub fn normalized(&self) -> &Mat {
        &self.xhat
    }
}

/// Per-channel normalisation over time, no affine parameters.
pub fn instance_norm(x: &Mat) -> (Mat, NormCache) {
    let t_len = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Vec::with_capacity(x.nrows());
    for mut row in xhat.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / t_len;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / t_len;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        row.mapv_inplace(|v| v * is);
        inv_std.push(is);
    }
    let cache = NormCache {
        xhat: xhat.clone(),
        inv_std,
    };
    (xhat, cache)
}

pub fn instance_norm_backward(cache: &NormCache, dy: &Mat) -> Mat {
    let t_len = dy.ncols() as f64;
    let mut dx = Mat::zeros(dy.dim());
    for (c, ((mut out, g), xh)) in dx
        .axis_iter_mut(Axis(0))
        .zip(dy.axis_iter(Axis(0)))
        .zip(cache.xhat.axis_iter(Axis(0)))
        .enumerate()
    {
        let sum_g = g.sum();
        let sum_gx = g.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
        let is = cache.inv_std[c];
        for ((o, gi), xi) in out.iter_mut().zip(g.iter()).zip(xh.iter()) {
            *o = is / t_len * (t_len * gi - sum_g - xi * sum_gx);
        }
    }
    dx
}

/// Adaptive instance norm: `IN(x) * (1 + gamma) + beta` with `affine`
/// stacked as `[gamma; beta]` (`2C x 1`).
pub fn adain(x: &Mat, affine: &Mat) -> (Mat, NormCache) {
    let c = x.nrows();
    let (xhat, cache) = instance_norm(x);
    let mut y = xhat;
    for (i, mut row) in y.axis_iter_mut(Axis(0)).enumerate() {
        let g = 1.0 + affine[[i, 0]];
        let b = affine[[c + i, 0]];
        row.mapv_inplace(|v| v * g + b);
    }
    (y, cache)
}

/// Returns `(dx, d_affine)`.
pub fn adain_backward(cache: &NormCache, affine: &Mat, dy: &Mat) -> (Mat, Mat) {
    let c = dy.nrows();
    let mut d_affine = Mat::zeros((2 * c, 1));
    let mut dxhat = dy.clone();
    for (i, mut row) in dxhat.axis_iter_mut(Axis(0)).enumerate() {
        let xh = cache.xhat.row(i);
        d_affine[[i, 0]] = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum();
        d_affine[[c + i, 0]] = row.sum();
        let g = 1.0 + affine[[i, 0]];
        row.mapv_inplace(|v| v * g);
    }
    (instance_norm_backward(cache, &dxhat), d_affine)
}

/// Average adjacent frame pairs; input length must be even.
pub fn avg_pool2(x: &Mat) -> Mat {
    let t = x.ncols() / 2;
    let a = x.slice(s![.., 0..2 * t;2]);
    let b = x.slice(s![.., 1..2 * t;2]);
    (&a + &b) * 0.5
}

pub fn avg_pool2_backward(dy: &Mat) -> Mat {
    let mut dx = Mat::zeros((dy.nrows(), dy.ncols() * 2));
    dx.slice_mut(s![.., 0..;2]).assign(&(dy * 0.5));
    dx.slice_mut(s![.., 1..;2]).assign(&(dy * 0.5));
    dx
}

/// Nearest-neighbour upsampling by two.
pub fn upsample2(x: &Mat) -> Mat {
    let mut y = Mat::zeros((x.nrows(), x.ncols() * 2));
    y.slice_mut(s![.., 0..;2]).assign(x);
    y.slice_mut(s![.., 1..;2]).assign(x);
    y
}

pub fn upsample2_backward(dy: &Mat) -> Mat {
    &dy.slice(s![.., 0..;2]) + &dy.slice(s![.., 1..;2])
}

/// Mean over time, `C x T -> C x 1`.
pub fn mean_pool(x: &Mat) -> Mat {
    x.mean_axis(Axis(1))
        .expect("non-empty time axis")
        .insert_axis(Axis(1))
}

pub fn mean_pool_backward(dy: &Mat, time: usize) -> Mat {
    let mut dx = Mat::zeros((dy.nrows(), time));
    let k = 1.0 / time as f64;
    for (mut row, g) in dx.axis_iter_mut(Axis(0)).zip(dy.iter()) {
        row.fill(g * k);
    }
    dx
}

/// Cosine similarity between two column vectors and its gradient with respect to `a`.
pub fn cosine_with_grad(a: &Mat, b: &Mat) -> (f64, Mat) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let dot = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>();
    let cos = dot / (na * nb);
    let grad = Zip::from(a)
        .and(b)
        .map_collect(|x, y| y / (na * nb) - cos * x / (na * na));
    (cos, grad)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: ParamStore,
    v: ParamStore,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        if !grads.all_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        for (((p, g), m), v) in params
            .tensors
            .iter_mut()
            .zip(&grads.tensors)
            .zip(&mut self.m.tensors)
            .zip(&mut self.v.tensors)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn rand_mat(r: usize, c: usize, s: u64) -> Mat {
        let mut rng = seed::rng(s);
        Mat::from_shape_fn((r, c), |_| standard_normal(&mut rng))
    }

    fn fd_check<F: Fn(&Mat) -> f64>(f: F, x: &Mat, analytic: &Mat) {
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for idx in 0..x.len() {
            let mut p = x.clone();
            let mut m = x.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn conv_input_gradient_matches_fd() {
        for padding in [Padding::Zero, Padding::Circular] {
            let mut ps = ParamStore::default();
            let conv = Conv1d::new(&mut ps, "c", 3, 4, 5, padding, &mut seed::rng(1));
            let x = rand_mat(3, 7, 2);
            let w = rand_mat(4, 7, 3);
            let (_, cache) = conv.forward(&ps, &x);
            let dx = conv.backward(&ps, None, &cache, &w);
            fd_check(|x| (conv.forward(&ps, x).0 * &w).sum(), &x, &dx);
        }
    }

    #[test]
    fn conv_weight_gradient_matches_fd() {
        let mut ps = ParamStore::default();
        let conv = Conv1d::new(&mut ps, "c", 2, 3, 3, Padding::Zero, &mut seed::rng(4));
        let x = rand_mat(2, 6, 5);
        let w = rand_mat(3, 6, 6);
        let mut grads = ps.zeros_like();
        let (_, cache) = conv.forward(&ps, &x);
        conv.backward(&ps, Some(&mut grads), &cache, &w);
        let wt = ps.get(conv.weight).clone();
        let f = |wt: &Mat| {
            let mut p = ps.clone();
            *p.get_mut(conv.weight) = wt.clone();
            (conv.forward(&p, &x).0 * &w).sum()
        };
        fd_check(f, &wt, grads.get(conv.weight));
    }

    #[test]
    fn instance_norm_statistics_and_gradient() {
        let x = rand_mat(3, 9, 7) * 3.0 + 1.5;
        let (y, cache) = instance_norm(&x);
        for row in y.axis_iter(Axis(0)) {
            let mean = row.sum() / 9.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 9.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        let w = rand_mat(3, 9, 8);
        let dx = instance_norm_backward(&cache, &w);
        fd_check(|x| (instance_norm(x).0 * &w).sum(), &x, &dx);
    }

    #[test]
    fn adain_gradients() {
        let x = rand_mat(2, 5, 9);
        let aff = rand_mat(4, 1, 10) * 0.3;
        let w = rand_mat(2, 5, 11);
        let (_, cache) = adain(&x, &aff);
        let (dx, da) = adain_backward(&cache, &aff, &w);
        fd_check(|x| (adain(x, &aff).0 * &w).sum(), &x, &dx);
        fd_check(|a| (adain(&x, a).0 * &w).sum(), &aff, &da);
    }

    #[test]
    fn pooling_and_upsampling_gradients() {
        let x = rand_mat(2, 6, 12);
        let w = rand_mat(2, 3, 13);
        fd_check(|x| (avg_pool2(x) * &w).sum(), &x, &avg_pool2_backward(&w));
        let w2 = rand_mat(2, 12, 14);
        fd_check(|x| (upsample2(x) * &w2).sum(), &x, &upsample2_backward(&w2));
        let w3 = rand_mat(2, 1, 15);
        fd_check(|x| (mean_pool(x) * &w3).sum(), &x, &mean_pool_backward(&w3, 6));
    }

    #[test]
    fn cosine_gradient() {
        let a = rand_mat(5, 1, 16);
        let b = rand_mat(5, 1, 17);
        let (_, g) = cosine_with_grad(&a, &b);
        fd_check(|a| cosine_with_grad(a, &b).0, &a, &g);
    }

    #[test]
    fn adam_minimises_quadratic() {
        let mut ps = ParamStore::default();
        let id = ps.add("x", Mat::from_elem((1, 1), 3.0));
        let mut opt = Adam::new(&ps, 0.1);
        for _ in 0..300 {
            let mut g = ps.zeros_like();
            *g.get_mut(id) = ps.get(id) * 2.0;
            opt.step(&mut ps, &g).unwrap();
        }
        assert!(ps.get(id)[[0, 0]].abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_nan_gradient() {
        let mut ps = ParamStore::default();
        let id = ps.add("x", Mat::zeros((1, 1)));
        let mut opt = Adam::new(&ps, 0.1);
        let mut g = ps.zeros_like();
        g.get_mut(id)[[0, 0]] = f64::NAN;
        assert!(opt.step(&mut ps, &g).is_err());
    }
}
