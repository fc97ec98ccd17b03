//! Micro pre-norm causal transformer with frozen base weights and LoRA
//! adapters on every attention and MLP projection.
//!
//! Token embeddings are tied to the output projection. The residual stream
//! after block `l` is hidden layer `l + 1`; hidden layer 0 is the embedding
//! sum. The detection head reads hidden layer `detect_layer`.

mod backward;
pub mod checkpoint;
mod lora;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::Params;
use crate::tensor::{argmax, gelu, gemm, softmax_in_place, Mat, Real, View, ViewMut};
use crate::tokenizer::EOS;

pub use backward::{Grads, Seeds, TrainCache};
pub use lora::{LoraAdapters, LoraBlock, LoraPair};

pub(crate) const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub detect_layer: usize,
    pub head_hidden: usize,
    pub keep_lm_head: bool,
}

impl ModelConfig {
    /// Desk-scale defaults for a given vocabulary.
    pub fn micro(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_ff: 512,
            vocab_size,
            max_seq_len: 64,
            lora_rank: 4,
            lora_alpha: 16.0,
            detect_layer: 2,
            head_hidden: 64,
            keep_lm_head: true,
        }
    }

    pub fn mid_layer(&self) -> usize {
        self.n_layers / 2
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.d_model == 0 || self.d_ff == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.detect_layer > self.n_layers {
            return fail(format!("detect_layer {} exceeds n_layers {}", self.detect_layer, self.n_layers));
        }
        if self.lora_rank == 0 {
            return fail("lora_rank must be at least 1".into());
        }
        if self.head_hidden == 0 {
            return fail("head_hidden must be at least 1".into());
        }
        if !self.lora_alpha.is_finite() {
            return fail("lora_alpha must be finite".into());
        }
        Ok(())
    }

    /// Whether two configs describe the same frozen backbone.
    pub fn same_backbone(&self, other: &ModelConfig) -> bool {
        (self.n_layers, self.d_model, self.n_heads, self.d_ff, self.vocab_size, self.max_seq_len)
            == (other.n_layers, other.d_model, other.n_heads, other.d_ff, other.vocab_size, other.max_seq_len)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_layers", self.n_layers.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("lora_rank", self.lora_rank.to_string()),
            ("lora_alpha", self.lora_alpha.to_string()),
            ("detect_layer", self.detect_layer.to_string()),
            ("head_hidden", self.head_hidden.to_string()),
            ("keep_lm_head", self.keep_lm_head.to_string()),
        ]
    }

    /// Sets one field by name. Returns `Ok(false)` for keys that are not
    /// model fields.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "n_layers" => self.n_layers = p(key, value)?,
            "d_model" => self.d_model = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "d_ff" => self.d_ff = p(key, value)?,
            "vocab_size" => self.vocab_size = p(key, value)?,
            "max_seq_len" => self.max_seq_len = p(key, value)?,
            "lora_rank" => self.lora_rank = p(key, value)?,
            "lora_alpha" => self.lora_alpha = p(key, value)?,
            "detect_layer" => self.detect_layer = p(key, value)?,
            "head_hidden" => self.head_hidden = p(key, value)?,
            "keep_lm_head" => self.keep_lm_head = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gain: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Real> LayerNorm<T> {
    fn new(d: usize) -> Self {
        LayerNorm { gain: vec![T::one(); d], bias: vec![T::zero(); d] }
    }

    fn cast<U: Real>(&self) -> LayerNorm<U> {
        LayerNorm { gain: crate::tensor::cast_vec(&self.gain), bias: crate::tensor::cast_vec(&self.bias) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub wq: Mat<T>,
    pub wk: Mat<T>,
    pub wv: Mat<T>,
    pub wo: Mat<T>,
    pub ln2: LayerNorm<T>,
    pub w_up: Mat<T>,
    pub w_down: Mat<T>,
}

/// The frozen backbone. The output projection is `tok_emb` itself.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights<T> {
    pub tok_emb: Mat<T>,
    pub pos_emb: Mat<T>,
    pub blocks: Vec<Block<T>>,
    pub ln_f: LayerNorm<T>,
}

impl<T: Real> BaseWeights<T> {
    pub fn init<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        let emb_std = 1.0 / (d as f64).sqrt();
        let proj_std = 1.0 / (d as f64).sqrt();
        let out_std = proj_std / (2.0 * cfg.n_layers as f64).sqrt();
        let tok_emb = Mat::randn(cfg.vocab_size, d, emb_std, rng);
        let pos_emb = Mat::randn(cfg.max_seq_len, d, emb_std, rng);
        let blocks = (0..cfg.n_layers)
            .map(|_| Block {
                ln1: LayerNorm::new(d),
                wq: Mat::randn(d, d, proj_std, rng),
                wk: Mat::randn(d, d, proj_std, rng),
                wv: Mat::randn(d, d, proj_std, rng),
                wo: Mat::randn(d, d, out_std, rng),
                ln2: LayerNorm::new(d),
                w_up: Mat::randn(cfg.d_ff, d, proj_std, rng),
                w_down: Mat::randn(d, cfg.d_ff, out_std / 2.0, rng),
            })
            .collect();
        BaseWeights { tok_emb, pos_emb, blocks, ln_f: LayerNorm::new(d) }
    }

    pub fn cast<U: Real>(&self) -> BaseWeights<U> {
        BaseWeights {
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: b.ln1.cast(),
                    wq: b.wq.cast(),
                    wk: b.wk.cast(),
                    wv: b.wv.cast(),
                    wo: b.wo.cast(),
                    ln2: b.ln2.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            ln_f: self.ln_f.cast(),
        }
    }
}

impl<T: Real> Params<T> for BaseWeights<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[T])) {
        f("base.tok_emb", &[self.tok_emb.rows, self.tok_emb.cols], &self.tok_emb.data);
        f("base.pos_emb", &[self.pos_emb.rows, self.pos_emb.cols], &self.pos_emb.data);
        for (i, b) in self.blocks.iter().enumerate() {
            let d = b.ln1.gain.len();
            f(&format!("base.blocks.{i}.ln1.gain"), &[d], &b.ln1.gain);
            f(&format!("base.blocks.{i}.ln1.bias"), &[d], &b.ln1.bias);
            for (n, m) in [("wq", &b.wq), ("wk", &b.wk), ("wv", &b.wv), ("wo", &b.wo)] {
                f(&format!("base.blocks.{i}.{n}"), &[m.rows, m.cols], &m.data);
            }
            f(&format!("base.blocks.{i}.ln2.gain"), &[d], &b.ln2.gain);
            f(&format!("base.blocks.{i}.ln2.bias"), &[d], &b.ln2.bias);
            for (n, m) in [("w_up", &b.w_up), ("w_down", &b.w_down)] {
                f(&format!("base.blocks.{i}.{n}"), &[m.rows, m.cols], &m.data);
            }
        }
        let d = self.ln_f.gain.len();
        f("base.ln_f.gain", &[d], &self.ln_f.gain);
        f("base.ln_f.bias", &[d], &self.ln_f.bias);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [T])) {
        f("base.tok_emb", &[self.tok_emb.rows, self.tok_emb.cols], &mut self.tok_emb.data);
        f("base.pos_emb", &[self.pos_emb.rows, self.pos_emb.cols], &mut self.pos_emb.data);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let d = b.ln1.gain.len();
            f(&format!("base.blocks.{i}.ln1.gain"), &[d], &mut b.ln1.gain);
            f(&format!("base.blocks.{i}.ln1.bias"), &[d], &mut b.ln1.bias);
            for (n, m) in [("wq", &mut b.wq), ("wk", &mut b.wk), ("wv", &mut b.wv), ("wo", &mut b.wo)] {
                f(&format!("base.blocks.{i}.{n}"), &[m.rows, m.cols], &mut m.data);
            }
            f(&format!("base.blocks.{i}.ln2.gain"), &[d], &mut b.ln2.gain);
            f(&format!("base.blocks.{i}.ln2.bias"), &[d], &mut b.ln2.bias);
            for (n, m) in [("w_up", &mut b.w_up), ("w_down", &mut b.w_down)] {
                f(&format!("base.blocks.{i}.{n}"), &[m.rows, m.cols], &mut m.data);
            }
        }
        let d = self.ln_f.gain.len();
        f("base.ln_f.gain", &[d], &mut self.ln_f.gain);
        f("base.ln_f.bias", &[d], &mut self.ln_f.bias);
    }
}

/// Residual-stream states for every layer, `n_layers + 1` entries of `len × d_model`.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates<T> {
    pub len: usize,
    pub d_model: usize,
    pub layers: Vec<Vec<T>>,
}

impl<T: Real> HiddenStates<T> {
    pub fn layer(&self, l: usize) -> &[T] {
        &self.layers[l]
    }

    pub fn at(&self, l: usize, t: usize) -> &[T] {
        &self.layers[l][t * self.d_model..(t + 1) * self.d_model]
    }
}

#[derive(Debug, Clone)]
pub struct Forward<T> {
    /// `rows × vocab_size`, where `rows` is the sequence length, or 1 when
    /// only the last position was projected.
    pub logits: Option<Vec<T>>,
    pub hidden: HiddenStates<T>,
}

impl<T: Real> Forward<T> {
    pub fn logits_row(&self, row: usize, vocab: usize) -> Option<&[T]> {
        self.logits.as_ref().map(|l| &l[row * vocab..(row + 1) * vocab])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum LogitRows {
    All,
    Last,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub base: BaseWeights<T>,
    pub lora: Option<LoraAdapters<T>>,
}

pub(crate) fn layer_norm<T: Real>(x: &[T], rows: usize, d: usize, ln: &LayerNorm<T>, out: &mut [T], xhat: &mut [T], rstd: &mut [T]) {
    let eps = T::of(LN_EPS);
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for c in 0..d {
            let h = (xr[c] - mean) * rs;
            xhat[r * d + c] = h;
            out[r * d + c] = h * ln.gain[c] + ln.bias[c];
        }
    }
}

/// `y = x·Wᵀ + s·(x·Aᵀ)·Bᵀ`; returns `(y, x·Aᵀ)`.
pub(crate) fn linear<T: Real>(x: &[T], rows: usize, w: &Mat<T>, lora: Option<(&LoraPair<T>, T)>) -> (Vec<T>, Vec<T>) {
    let (dout, din) = (w.rows, w.cols);
    let mut y = vec![T::zero(); rows * dout];
    gemm(T::one(), View::rm(x, rows, din), w.view_t(), T::zero(), ViewMut::rm(&mut y, rows, dout));
    let mut z = Vec::new();
    if let Some((p, s)) = lora {
        let r = p.a.rows;
        z = vec![T::zero(); rows * r];
        gemm(T::one(), View::rm(x, rows, din), p.a.view_t(), T::zero(), ViewMut::rm(&mut z, rows, r));
        gemm(s, View::rm(&z, rows, r), p.b.view_t(), T::one(), ViewMut::rm(&mut y, rows, dout));
    }
    (y, z)
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, base: BaseWeights<T>, lora: Option<LoraAdapters<T>>) -> Result<Self> {
        config.validate()?;
        if base.tok_emb.rows != config.vocab_size || base.blocks.len() != config.n_layers || base.tok_emb.cols != config.d_model {
            return Err(Error::ConfigMismatch("base weights do not match model config".into()));
        }
        if let Some(l) = &lora {
            if l.blocks.len() != config.n_layers || l.rank() != config.lora_rank {
                return Err(Error::ConfigMismatch("adapters do not match model config".into()));
            }
        }
        Ok(Model { config, base, lora })
    }

    pub fn init<R: Rng>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let base = BaseWeights::init(&config, rng);
        Ok(Model { config, base, lora: None })
    }

    /// Attaches fresh adapters: `A` small Gaussian, `B` zero.
    pub fn attach_lora<R: Rng>(&mut self, rng: &mut R) {
        self.lora = Some(LoraAdapters::init(&self.config, rng));
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model { config: self.config.clone(), base: self.base.cast(), lora: self.lora.as_ref().map(LoraAdapters::cast) }
    }

    pub fn check_ids(&self, ids: &[u32]) -> Result<()> {
        if ids.is_empty() {
            return Err(Error::EmptySequence);
        }
        if ids.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: ids.len(), max: self.config.max_seq_len });
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange { id, size: self.config.vocab_size });
        }
        Ok(())
    }

    fn lora_for(&self, layer: usize) -> Option<&LoraBlock<T>> {
        self.lora.as_ref().map(|l| &l.blocks[layer])
    }

    /// Full forward pass: logits for every position plus all hidden states.
    pub fn forward(&self, ids: &[u32]) -> Result<Forward<T>> {
        let rows = if self.config.keep_lm_head { LogitRows::All } else { LogitRows::None };
        Ok(self.run(ids, rows, false)?.0)
    }

    /// Hidden states only; skips the vocabulary projection.
    pub fn hidden_states(&self, ids: &[u32]) -> Result<HiddenStates<T>> {
        Ok(self.run(ids, LogitRows::None, false)?.0.hidden)
    }

    pub(crate) fn run(&self, ids: &[u32], rows: LogitRows, keep_cache: bool) -> Result<(Forward<T>, Option<TrainCache<T>>)> {
        self.check_ids(ids)?;
        if rows != LogitRows::None && !self.config.keep_lm_head {
            return Err(Error::NoLmHead);
        }
        let cfg = &self.config;
        let (t, d) = (ids.len(), cfg.d_model);
        let mut x = vec![T::zero(); t * d];
        for (p, &id) in ids.iter().enumerate() {
            let e = self.base.tok_emb.row(id as usize);
            let pe = self.base.pos_emb.row(p);
            for c in 0..d {
                x[p * d + c] = e[c] + pe[c];
            }
        }
        let mut hidden = Vec::with_capacity(cfg.n_layers + 1);
        hidden.push(x);
        let mut caches = Vec::with_capacity(if keep_cache { cfg.n_layers } else { 0 });
        for l in 0..cfg.n_layers {
            let (out, cache) = self.block_forward(l, hidden.last().expect("input"), t);
            hidden.push(out);
            if keep_cache {
                caches.push(cache);
            }
        }

        let mut lnf_xhat = Vec::new();
        let mut lnf_rstd = Vec::new();
        let logits = if rows == LogitRows::None {
            None
        } else {
            let first = if rows == LogitRows::Last { t - 1 } else { 0 };
            let n = t - first;
            let top = &hidden[cfg.n_layers][first * d..];
            let mut final_norm = vec![T::zero(); n * d];
            lnf_xhat = vec![T::zero(); n * d];
            lnf_rstd = vec![T::zero(); n];
            layer_norm(top, n, d, &self.base.ln_f, &mut final_norm, &mut lnf_xhat, &mut lnf_rstd);
            let v = cfg.vocab_size;
            let mut logits = vec![T::zero(); n * v];
            gemm(T::one(), View::rm(&final_norm, n, d), self.base.tok_emb.view_t(), T::zero(), ViewMut::rm(&mut logits, n, v));
            Some(logits)
        };
        let hidden = HiddenStates { len: t, d_model: d, layers: hidden };
        let cache = keep_cache.then(|| TrainCache {
            ids: ids.to_vec(),
            blocks: caches,
            lnf_xhat,
            lnf_rstd,
            has_logits: rows == LogitRows::All,
        });
        Ok((Forward { logits, hidden }, cache))
    }

    fn block_forward(&self, l: usize, x: &[T], t: usize) -> (Vec<T>, backward::BlockCache<T>) {
        let cfg = &self.config;
        let d = cfg.d_model;
        let blk = &self.base.blocks[l];
        let lora = self.lora_for(l);
        let s = T::of(cfg.lora_scale());
        let pick = |f: fn(&LoraBlock<T>) -> &LoraPair<T>| lora.map(|lb| (f(lb), s));

        let mut a = vec![T::zero(); t * d];
        let mut ln1_xhat = vec![T::zero(); t * d];
        let mut ln1_rstd = vec![T::zero(); t];
        layer_norm(x, t, d, &blk.ln1, &mut a, &mut ln1_xhat, &mut ln1_rstd);
        let (q, zq) = linear(&a, t, &blk.wq, pick(|b| &b.q));
        let (k, zk) = linear(&a, t, &blk.wk, pick(|b| &b.k));
        let (v, zv) = linear(&a, t, &blk.wv, pick(|b| &b.v));

        let h = cfg.n_heads;
        let dh = cfg.head_dim();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); h * t * t];
        let mut ctx = vec![T::zero(); t * d];
        for head in 0..h {
            let off = head * dh;
            let p = &mut probs[head * t * t..(head + 1) * t * t];
            gemm(scale, View::new(&q[off..], t, dh, d, 1), View::new(&k[off..], dh, t, 1, d), T::zero(), ViewMut::rm(p, t, t));
            for i in 0..t {
                let row = &mut p[i * t..(i + 1) * t];
                softmax_in_place(&mut row[..=i]);
                row[i + 1..].fill(T::zero());
            }
            gemm(T::one(), View::rm(p, t, t), View::new(&v[off..], t, dh, d, 1), T::zero(), ViewMut::new(&mut ctx[off..], t, dh, d, 1));
        }
        let (o, zo) = linear(&ctx, t, &blk.wo, pick(|b| &b.o));
        let mut x_mid = x.to_vec();
        for (xm, ov) in x_mid.iter_mut().zip(&o) {
            *xm += *ov;
        }

        let mut b = vec![T::zero(); t * d];
        let mut ln2_xhat = vec![T::zero(); t * d];
        let mut ln2_rstd = vec![T::zero(); t];
        layer_norm(&x_mid, t, d, &blk.ln2, &mut b, &mut ln2_xhat, &mut ln2_rstd);
        let (u, zup) = linear(&b, t, &blk.w_up, pick(|b| &b.up));
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let (m, zdown) = linear(&g, t, &blk.w_down, pick(|b| &b.down));
        let mut out = x_mid;
        for (xo, mv) in out.iter_mut().zip(&m) {
            *xo += *mv;
        }
        let cache = backward::BlockCache {
            ln1_xhat,
            ln1_rstd,
            a,
            q,
            k,
            v,
            zq,
            zk,
            zv,
            probs,
            ctx,
            zo,
            ln2_xhat,
            ln2_rstd,
            b,
            u,
            g,
            zup,
            zdown,
        };
        (out, cache)
    }

    /// Greedy decoding: appends the argmax token until `<eos>` or `max_new`
    /// tokens. Returns the whole sequence, prompt included.
    pub fn generate_greedy(&self, prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        self.generate_stream(prompt, max_new, |_, _| {})
    }

    /// Greedy decoding that reports each new token together with the hidden
    /// states of the sequence ending in that token.
    pub fn generate_stream<F: FnMut(u32, &HiddenStates<T>)>(&self, prompt: &[u32], max_new: usize, mut on_token: F) -> Result<Vec<u32>> {
        if !self.config.keep_lm_head {
            return Err(Error::NoLmHead);
        }
        self.check_ids(prompt)?;
        let mut seq = prompt.to_vec();
        if max_new == 0 {
            return Ok(seq);
        }
        let v = self.config.vocab_size;
        let mut fwd = self.run(&seq, LogitRows::Last, false)?.0;
        for _ in 0..max_new {
            if seq.len() >= self.config.max_seq_len {
                break;
            }
            let next = argmax(fwd.logits_row(0, v).expect("last-row logits")) as u32;
            seq.push(next);
            fwd = self.run(&seq, LogitRows::Last, false)?.0;
            on_token(next, &fwd.hidden);
            if next == EOS {
                break;
            }
        }
        Ok(seq)
    }
}
