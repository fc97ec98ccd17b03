//! Reverse-mode pass through the transformer.
//!
//! Gradients are accumulated into a caller-owned [`Grads`]; the token
//! embedding table receives none since it is never trained.

use super::{BaseWeights, LayerNorm, LoraAdapters, LoraPair, Model};
use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{gelu_grad, gemm, Mat, Real, View, ViewMut};

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct TrainCache<T> {
    pub(crate) ids: Vec<u32>,
    pub(crate) blocks: Vec<BlockCache<T>>,
    pub(crate) lnf_xhat: Vec<T>,
    pub(crate) lnf_rstd: Vec<T>,
    pub(crate) has_logits: bool,
}

impl<T> TrainCache<T> {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct BlockCache<T> {
    pub ln1_xhat: Vec<T>,
    pub ln1_rstd: Vec<T>,
    pub a: Vec<T>,
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    pub zq: Vec<T>,
    pub zk: Vec<T>,
    pub zv: Vec<T>,
    pub probs: Vec<T>,
    pub ctx: Vec<T>,
    pub zo: Vec<T>,
    pub ln2_xhat: Vec<T>,
    pub ln2_rstd: Vec<T>,
    pub b: Vec<T>,
    pub u: Vec<T>,
    pub g: Vec<T>,
    pub zup: Vec<T>,
    pub zdown: Vec<T>,
}

/// Upstream gradients: w.r.t. the logits (`T × vocab`) and w.r.t. one hidden
/// layer (`T × d_model`).
#[derive(Debug, Clone, Copy)]
pub struct Seeds<'a, T> {
    pub logits: Option<&'a [T]>,
    pub tap: Option<(usize, &'a [T])>,
}

/// Gradient buffers. `base` is only present when the backbone is trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    pub base: Option<BaseWeights<T>>,
    pub lora: Option<LoraAdapters<T>>,
}

impl<T: Real> Grads<T> {
    pub fn for_model(model: &Model<T>, with_base: bool) -> Self {
        Grads { base: with_base.then(|| model.base.zeroed()), lora: model.lora.as_ref().map(|l| l.zeroed()) }
    }

    pub fn zero(&mut self) {
        if let Some(b) = &mut self.base {
            b.scale(T::zero());
        }
        if let Some(l) = &mut self.lora {
            l.scale(T::zero());
        }
    }

    pub fn scale(&mut self, s: T) {
        if let Some(b) = &mut self.base {
            b.scale(s);
        }
        if let Some(l) = &mut self.lora {
            l.scale(s);
        }
    }
}

/// Backward of `y = x·Wᵀ + s·z·Bᵀ` with `z = x·Aᵀ`; returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<T: Real>(
    x: &[T],
    rows: usize,
    w: &Mat<T>,
    lora: Option<(&LoraPair<T>, T, &[T])>,
    dy: &[T],
    dw: Option<&mut Mat<T>>,
    dlora: Option<&mut LoraPair<T>>,
    need_dx: bool,
) -> Vec<T> {
    let (dout, din) = (w.rows, w.cols);
    let dy_v = View::rm(dy, rows, dout);
    if let Some(dw) = dw {
        gemm(T::one(), dy_v.t(), View::rm(x, rows, din), T::one(), dw.view_mut());
    }
    let mut dx = Vec::new();
    if need_dx {
        dx = vec![T::zero(); rows * din];
        gemm(T::one(), dy_v, w.view(), T::zero(), ViewMut::rm(&mut dx, rows, din));
    }
    if let Some((p, s, z)) = lora {
        let r = p.a.rows;
        let mut dz = vec![T::zero(); rows * r];
        gemm(s, dy_v, p.b.view(), T::zero(), ViewMut::rm(&mut dz, rows, r));
        if let Some(g) = dlora {
            gemm(s, dy_v.t(), View::rm(z, rows, r), T::one(), g.b.view_mut());
            gemm(T::one(), View::rm(&dz, rows, r).t(), View::rm(x, rows, din), T::one(), g.a.view_mut());
        }
        if need_dx {
            gemm(T::one(), View::rm(&dz, rows, r), p.a.view(), T::one(), ViewMut::rm(&mut dx, rows, din));
        }
    }
    dx
}

impl<T: Real> Model<T> {
    /// Forward pass that also records the activations needed by
    /// [`Model::backward`]. Logits for every position are produced when
    /// `with_logits` is set.
    pub fn forward_train(&self, ids: &[u32], with_logits: bool) -> Result<(super::Forward<T>, TrainCache<T>)> {
        let rows = if with_logits { super::LogitRows::All } else { super::LogitRows::None };
        let (f, c) = self.run(ids, rows, true)?;
        Ok((f, c.expect("cache requested")))
    }

    /// Accumulates parameter gradients for the given upstream seeds into `grads`.
    pub fn backward(&self, cache: &TrainCache<T>, seeds: Seeds<'_, T>, grads: &mut Grads<T>) -> Result<()> {
        let cfg = &self.config;
        let (t, d) = (cache.len(), cfg.d_model);
        let n = cfg.n_layers;
        if let Some((layer, g)) = seeds.tap {
            if layer > n {
                return Err(Error::LayerOutOfRange { layer, n_layers: n });
            }
            if g.len() != t * d {
                return Err(Error::LengthMismatch { expected: t * d, got: g.len() });
            }
        }
        let top = match seeds.logits {
            Some(dl) => {
                if !cache.has_logits {
                    return Err(Error::NoLmHead);
                }
                let v = cfg.vocab_size;
                if dl.len() != t * v {
                    return Err(Error::LengthMismatch { expected: t * v, got: dl.len() });
                }
                let mut dfn = vec![T::zero(); t * d];
                gemm(T::one(), View::rm(dl, t, v), self.base.tok_emb.view(), T::zero(), ViewMut::rm(&mut dfn, t, d));
                let gln = grads.base.as_mut().map(|b| &mut b.ln_f);
                Some(layer_norm_backward(&dfn, t, d, &cache.lnf_xhat, &cache.lnf_rstd, &self.base.ln_f, gln))
            }
            None => None,
        };

        // Walk down from the highest layer that carries any gradient.
        let start = match (top.is_some(), seeds.tap) {
            (true, _) => n,
            (false, Some((l, _))) => l,
            (false, None) => return Ok(()),
        };
        let mut dh = top.unwrap_or_else(|| vec![T::zero(); t * d]);
        let add_tap = |layer: usize, dh: &mut [T]| {
            if let Some((l, g)) = seeds.tap {
                if l == layer {
                    for (a, b) in dh.iter_mut().zip(g) {
                        *a += *b;
                    }
                }
            }
        };
        for l in (0..start).rev() {
            add_tap(l + 1, &mut dh);
            let need_dx = l > 0 || grads.base.is_some();
            dh = self.block_backward(l, &cache.blocks[l], &dh, t, grads, need_dx);
        }
        if start == 0 || grads.base.is_some() {
            add_tap(0, &mut dh);
        }
        if let Some(b) = &mut grads.base {
            for p in 0..t {
                for c in 0..d {
                    b.pos_emb.data[p * d + c] += dh[p * d + c];
                }
            }
        }
        Ok(())
    }

    fn block_backward(&self, l: usize, c: &BlockCache<T>, dout: &[T], t: usize, grads: &mut Grads<T>, need_dx: bool) -> Vec<T> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let blk = &self.base.blocks[l];
        let s = T::of(cfg.lora_scale());
        let lb = self.lora.as_ref().map(|x| &x.blocks[l]);
        let mut gb = grads.base.as_mut().map(|b| &mut b.blocks[l]);
        let mut gl = grads.lora.as_mut().map(|x| &mut x.blocks[l]);

        macro_rules! lin {
            ($x:expr, $w:ident, $pair:ident, $z:expr, $dy:expr, $need:expr) => {
                linear_backward(
                    $x,
                    t,
                    &blk.$w,
                    lb.map(|b| (&b.$pair, s, &$z[..])),
                    $dy,
                    gb.as_deref_mut().map(|g| &mut g.$w),
                    gl.as_deref_mut().map(|g| &mut g.$pair),
                    $need,
                )
            };
        }

        // MLP
        let dg = lin!(&c.g, w_down, down, c.zdown, dout, true);
        let du: Vec<T> = dg.iter().zip(&c.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        let dbn = lin!(&c.b, w_up, up, c.zup, &du, true);
        let mut dx_mid = dout.to_vec();
        let d_ln2 = layer_norm_backward(&dbn, t, d, &c.ln2_xhat, &c.ln2_rstd, &blk.ln2, gb.as_deref_mut().map(|g| &mut g.ln2));
        for (a, b) in dx_mid.iter_mut().zip(&d_ln2) {
            *a += *b;
        }

        // attention
        let dctx = lin!(&c.ctx, wo, o, c.zo, &dx_mid, true);
        let h = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); t * d];
        let mut dk = vec![T::zero(); t * d];
        let mut dv = vec![T::zero(); t * d];
        let mut dp = vec![T::zero(); t * t];
        for head in 0..h {
            let off = head * dh;
            let p = &c.probs[head * t * t..(head + 1) * t * t];
            let dctx_h = View::new(&dctx[off..], t, dh, d, 1);
            gemm(T::one(), dctx_h, View::new(&c.v[off..], dh, t, 1, d), T::zero(), ViewMut::rm(&mut dp, t, t));
            gemm(T::one(), View::rm(p, t, t).t(), dctx_h, T::zero(), ViewMut::new(&mut dv[off..], t, dh, d, 1));
            for i in 0..t {
                let pr = &p[i * t..=i * t + i];
                let dr = &mut dp[i * t..(i + 1) * t];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..=i {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
                dr[i + 1..].fill(T::zero());
            }
            gemm(scale, View::rm(&dp, t, t), View::new(&c.k[off..], t, dh, d, 1), T::zero(), ViewMut::new(&mut dq[off..], t, dh, d, 1));
            gemm(scale, View::rm(&dp, t, t).t(), View::new(&c.q[off..], t, dh, d, 1), T::zero(), ViewMut::new(&mut dk[off..], t, dh, d, 1));
        }
        let mut da = lin!(&c.a, wq, q, c.zq, &dq, true);
        let da_k = lin!(&c.a, wk, k, c.zk, &dk, true);
        let da_v = lin!(&c.a, wv, v, c.zv, &dv, true);
        for ((x, y), z) in da.iter_mut().zip(&da_k).zip(&da_v) {
            *x += *y + *z;
        }
        if !need_dx && gb.is_none() {
            return Vec::new();
        }
        let d_ln1 = layer_norm_backward(&da, t, d, &c.ln1_xhat, &c.ln1_rstd, &blk.ln1, gb.as_deref_mut().map(|g| &mut g.ln1));
        for (a, b) in dx_mid.iter_mut().zip(&d_ln1) {
            *a += *b;
        }
        dx_mid
    }
}

/// Gradient of a per-row LayerNorm w.r.t. its input, accumulating gain/bias
/// gradients when `grad` is given.
pub(crate) fn layer_norm_backward<T: Real>(
    dy: &[T],
    rows: usize,
    d: usize,
    xhat: &[T],
    rstd: &[T],
    ln: &LayerNorm<T>,
    mut grad: Option<&mut LayerNorm<T>>,
) -> Vec<T> {
    let mut dx = vec![T::zero(); rows * d];
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        if let Some(g) = grad.as_deref_mut() {
            for c in 0..d {
                g.gain[c] += dyr[c] * xr[c];
                g.bias[c] += dyr[c];
            }
        }
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for c in 0..d {
            dxhat[c] = dyr[c] * ln.gain[c];
            m1 += dxhat[c];
            m2 += dxhat[c] * xr[c];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        for c in 0..d {
            dx[r * d + c] = rstd[r] * (dxhat[c] - m1 - xr[c] * m2);
        }
    }
    dx
}
