//! Three-layer MLP that maps a hidden state to a hallucination probability.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::Params;
use crate::tensor::{gelu, gelu_grad, gemm, sigmoid, Mat, Real, View, ViewMut};

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionHead<T> {
    pub w1: Mat<T>,
    pub b1: Vec<T>,
    pub w2: Mat<T>,
    pub b2: Vec<T>,
    pub w3: Mat<T>,
    pub b3: Vec<T>,
}

/// Intermediate activations of a batched head forward pass.
#[derive(Debug, Clone)]
pub struct HeadCache<T> {
    rows: usize,
    x: Vec<T>,
    z1: Vec<T>,
    a1: Vec<T>,
    z2: Vec<T>,
    a2: Vec<T>,
}

fn affine<T: Real>(x: &[T], rows: usize, w: &Mat<T>, b: &[T]) -> Vec<T> {
    let mut y: Vec<T> = (0..rows).flat_map(|_| b.iter().copied()).collect();
    gemm(T::one(), View::rm(x, rows, w.cols), w.view_t(), T::one(), ViewMut::rm(&mut y, rows, w.rows));
    y
}

fn affine_backward<T: Real>(x: &[T], rows: usize, w: &Mat<T>, dy: &[T], gw: &mut Mat<T>, gb: &mut [T]) -> Vec<T> {
    let dy_v = View::rm(dy, rows, w.rows);
    gemm(T::one(), dy_v.t(), View::rm(x, rows, w.cols), T::one(), gw.view_mut());
    for r in 0..rows {
        for (g, &d) in gb.iter_mut().zip(&dy[r * w.rows..(r + 1) * w.rows]) {
            *g += d;
        }
    }
    let mut dx = vec![T::zero(); rows * w.cols];
    gemm(T::one(), dy_v, w.view(), T::zero(), ViewMut::rm(&mut dx, rows, w.cols));
    dx
}

impl<T: Real> DetectionHead<T> {
    pub fn init<R: Rng>(d_model: usize, hidden: usize, rng: &mut R) -> Self {
        let s1 = 1.0 / (d_model as f64).sqrt();
        let s2 = 1.0 / (hidden as f64).sqrt();
        DetectionHead {
            w1: Mat::randn(hidden, d_model, s1, rng),
            b1: vec![T::zero(); hidden],
            w2: Mat::randn(hidden, hidden, s2, rng),
            b2: vec![T::zero(); hidden],
            w3: Mat::randn(1, hidden, s2, rng),
            b3: vec![T::zero()],
        }
    }

    pub fn zeros(d_model: usize, hidden: usize) -> Self {
        DetectionHead {
            w1: Mat::zeros(hidden, d_model),
            b1: vec![T::zero(); hidden],
            w2: Mat::zeros(hidden, hidden),
            b2: vec![T::zero(); hidden],
            w3: Mat::zeros(1, hidden),
            b3: vec![T::zero()],
        }
    }

    pub fn d_model(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows
    }

    pub fn cast<U: Real>(&self) -> DetectionHead<U> {
        use crate::tensor::cast_vec;
        DetectionHead {
            w1: self.w1.cast(),
            b1: cast_vec(&self.b1),
            w2: self.w2.cast(),
            b2: cast_vec(&self.b2),
            w3: self.w3.cast(),
            b3: cast_vec(&self.b3),
        }
    }

    /// Pre-sigmoid outputs for `rows` stacked hidden states.
    pub fn forward_batch(&self, h: &[T], rows: usize) -> Result<(Vec<T>, HeadCache<T>)> {
        if h.len() != rows * self.d_model() {
            return Err(Error::LengthMismatch { expected: rows * self.d_model(), got: h.len() });
        }
        let z1 = affine(h, rows, &self.w1, &self.b1);
        let a1: Vec<T> = z1.iter().map(|&x| gelu(x)).collect();
        let z2 = affine(&a1, rows, &self.w2, &self.b2);
        let a2: Vec<T> = z2.iter().map(|&x| gelu(x)).collect();
        let logits = affine(&a2, rows, &self.w3, &self.b3);
        Ok((logits, HeadCache { rows, x: h.to_vec(), z1, a1, z2, a2 }))
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// w.r.t. the input hidden states.
    pub fn backward(&self, cache: &HeadCache<T>, dlogits: &[T], grad: &mut DetectionHead<T>) -> Vec<T> {
        let rows = cache.rows;
        let da2 = affine_backward(&cache.a2, rows, &self.w3, dlogits, &mut grad.w3, &mut grad.b3);
        let dz2: Vec<T> = da2.iter().zip(&cache.z2).map(|(&g, &z)| g * gelu_grad(z)).collect();
        let da1 = affine_backward(&cache.a1, rows, &self.w2, &dz2, &mut grad.w2, &mut grad.b2);
        let dz1: Vec<T> = da1.iter().zip(&cache.z1).map(|(&g, &z)| g * gelu_grad(z)).collect();
        affine_backward(&cache.x, rows, &self.w1, &dz1, &mut grad.w1, &mut grad.b1)
    }

    /// `σ(f(h))` for a single hidden vector.
    pub fn detect(&self, h: &[T]) -> Result<T> {
        if h.len() != self.d_model() {
            return Err(Error::LengthMismatch { expected: self.d_model(), got: h.len() });
        }
        Ok(sigmoid(self.forward_batch(h, 1)?.0[0]))
    }

    /// Probabilities for every response position `t ∈ [L, T)`, each read from
    /// the hidden state at position `t` of the model's detection layer.
    pub fn score_sequence(&self, model: &Model<T>, ids: &[u32], prompt_len: usize) -> Result<Vec<T>> {
        if prompt_len >= ids.len() {
            return Err(Error::NoResponse { prompt_len, len: ids.len() });
        }
        let hs = model.hidden_states(ids)?;
        self.score_hidden(hs.layer(model.config.detect_layer), ids.len(), prompt_len)
    }

    /// Scores response rows of an already computed hidden layer (`len × d`).
    pub fn score_hidden(&self, layer: &[T], len: usize, prompt_len: usize) -> Result<Vec<T>> {
        let d = self.d_model();
        let rows = len - prompt_len;
        let (logits, _) = self.forward_batch(&layer[prompt_len * d..len * d], rows)?;
        Ok(logits.into_iter().map(sigmoid).collect())
    }
}

impl<T: Real> Params<T> for DetectionHead<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f("head.w1", &[self.w1.rows, self.w1.cols], &self.w1.data);
        f("head.b1", &[self.b1.len()], &self.b1);
        f("head.w2", &[self.w2.rows, self.w2.cols], &self.w2.data);
        f("head.b2", &[self.b2.len()], &self.b2);
        f("head.w3", &[self.w3.rows, self.w3.cols], &self.w3.data);
        f("head.b3", &[self.b3.len()], &self.b3);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f("head.w1", &[self.w1.rows, self.w1.cols], &mut self.w1.data);
        f("head.b1", &[self.b1.len()], &mut self.b1);
        f("head.w2", &[self.w2.rows, self.w2.cols], &mut self.w2.data);
        f("head.b2", &[self.b2.len()], &mut self.b2);
        f("head.w3", &[self.w3.rows, self.w3.cols], &mut self.w3.data);
        f("head.b3", &[self.b3.len()], &mut self.b3);
    }
}
