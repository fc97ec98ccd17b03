//! Masked joint objective, learning-rate schedule, optimizer and training loops.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::LabeledSample;
use crate::detector::DetectionHead;
use crate::error::{Error, Result};
use crate::model::{Grads, Model, Seeds};
use crate::params::Params;
use crate::tensor::{sigmoid, softmax_in_place, Real};

pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Joint,
    CeOnly,
    BceOnly,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Joint => "joint",
            Mode::CeOnly => "ce_only",
            Mode::BceOnly => "bce_only",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        match s {
            "joint" => Some(Mode::Joint),
            "ce_only" => Some(Mode::CeOnly),
            "bce_only" => Some(Mode::BceOnly),
            _ => None,
        }
    }

    fn uses_ce(self) -> bool {
        self != Mode::BceOnly
    }

    /// Weight on the detection term.
    fn bce_weight(self, lambda: f64) -> f64 {
        match self {
            Mode::CeOnly => 0.0,
            _ => lambda,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub keep_lm_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1.0,
            peak_lr: 3e-4,
            warmup_ratio: 0.1,
            epochs: 5,
            batch_size: 8,
            seed: 0,
            mode: Mode::Joint,
            keep_lm_head: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda {} must be a finite nonnegative number", self.lambda));
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return fail(format!("warmup_ratio {} not in [0, 1]", self.warmup_ratio));
        }
        if !(self.peak_lr >= 0.0 && self.peak_lr.is_finite()) {
            return fail(format!("peak_lr {} must be finite and nonnegative", self.peak_lr));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        if !self.keep_lm_head && self.mode != Mode::BceOnly {
            return fail("the LM head can only be dropped in bce_only mode".into());
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lambda", self.lambda.to_string()),
            ("peak_lr", self.peak_lr.to_string()),
            ("warmup_ratio", self.warmup_ratio.to_string()),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.as_str().to_string()),
            ("keep_lm_head", self.keep_lm_head.to_string()),
        ]
    }

    /// Sets one field by name. Returns `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn p<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value.trim().parse().map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
        }
        match key {
            "lambda" => self.lambda = p(key, value)?,
            "peak_lr" => self.peak_lr = p(key, value)?,
            "warmup_ratio" => self.warmup_ratio = p(key, value)?,
            "epochs" => self.epochs = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "mode" => {
                self.mode = Mode::parse(value.trim()).ok_or_else(|| Error::Config(format!("unknown mode `{value}`")))?
            }
            "keep_lm_head" => self.keep_lm_head = p(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bce: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.ce += o.ce;
        self.bce += o.bce;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> LossBreakdown {
        LossBreakdown { ce: self.ce * s, bce: self.bce * s, total: self.total * s }
    }
}

fn check_response(prompt_len: usize, len: usize) -> Result<()> {
    if prompt_len == 0 || prompt_len >= len {
        return Err(Error::NoResponse { prompt_len, len });
    }
    Ok(())
}

/// Summed next-token NLL over response targets `ids[t]`, `t ∈ [L, T)`, each
/// predicted from logits row `t − 1`. `logits` is `T × vocab`.
pub fn masked_ce<T: Real>(logits: &[T], vocab: usize, ids: &[u32], prompt_len: usize) -> Result<f64> {
    Ok(masked_ce_grad(logits, vocab, ids, prompt_len, false)?.0)
}

/// As [`masked_ce`], optionally also returning `∂L/∂logits`.
pub fn masked_ce_grad<T: Real>(
    logits: &[T],
    vocab: usize,
    ids: &[u32],
    prompt_len: usize,
    want_grad: bool,
) -> Result<(f64, Vec<T>)> {
    let t = ids.len();
    check_response(prompt_len, t)?;
    if logits.len() != t * vocab {
        return Err(Error::LengthMismatch { expected: t * vocab, got: logits.len() });
    }
    let mut grad = if want_grad { vec![T::zero(); t * vocab] } else { Vec::new() };
    let mut loss = 0.0;
    let mut row = vec![T::zero(); vocab];
    for pos in prompt_len..t {
        let target = ids[pos] as usize;
        if target >= vocab {
            return Err(Error::TokenOutOfRange { id: ids[pos], size: vocab });
        }
        let r = pos - 1;
        row.copy_from_slice(&logits[r * vocab..(r + 1) * vocab]);
        let lse = softmax_in_place(&mut row);
        loss += (lse - logits[r * vocab + target]).f64();
        if want_grad {
            let g = &mut grad[r * vocab..(r + 1) * vocab];
            g.copy_from_slice(&row);
            g[target] -= T::one();
        }
    }
    Ok((loss, grad))
}

/// Summed binary cross-entropy over response positions. `scores` holds one
/// probability per position of the whole sequence; only `scores[L..]` count.
pub fn masked_bce<T: Real>(scores: &[T], labels: &[u8], prompt_len: usize) -> Result<f64> {
    if scores.len() < prompt_len || scores.len() - prompt_len != labels.len() {
        return Err(Error::LengthMismatch { expected: prompt_len + labels.len(), got: scores.len() });
    }
    Ok(bce_sum(&scores[prompt_len..], labels))
}

/// BCE of response-only probabilities, clamped to `[ε, 1 − ε]`.
pub fn bce_sum<T: Real>(probs: &[T], labels: &[u8]) -> f64 {
    probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.f64().clamp(BCE_EPS, 1.0 - BCE_EPS);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum()
}

/// Loss of one sample and, when buffers are given, its gradients accumulated
/// (scaled by `weight`) into them.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss_grads<T: Real>(
    model: &Model<T>,
    head: Option<&DetectionHead<T>>,
    sample: &LabeledSample,
    lambda: f64,
    mode: Mode,
    weight: f64,
    grads: Option<&mut Grads<T>>,
    head_grad: Option<&mut DetectionHead<T>>,
) -> Result<LossBreakdown> {
    let ids = &sample.token_ids;
    let l = sample.prompt_len;
    check_response(l, ids.len())?;
    if sample.labels.len() != ids.len() - l {
        return Err(Error::LengthMismatch { expected: ids.len() - l, got: sample.labels.len() });
    }
    let cfg = &model.config;
    let use_ce = mode.uses_ce();
    if use_ce && !cfg.keep_lm_head {
        return Err(Error::NoLmHead);
    }
    let wb = mode.bce_weight(lambda);
    if wb > 0.0 && head.is_none() {
        return Err(Error::NoDetectionHead);
    }
    let (t, d, v) = (ids.len(), cfg.d_model, cfg.vocab_size);
    let want_grad = grads.is_some();
    let (fwd, cache) = model.forward_train(ids, use_ce)?;

    let mut out = LossBreakdown::default();
    let mut dlogits = None;
    if use_ce {
        let (ce, mut g) = masked_ce_grad(fwd.logits.as_deref().expect("logits"), v, ids, l, want_grad)?;
        out.ce = ce;
        if want_grad {
            let w = T::of(weight);
            g.iter_mut().for_each(|x| *x *= w);
            dlogits = Some(g);
        }
    }

    let mut tap = None;
    if let Some(head) = head {
        let layer = &fwd.hidden.layer(cfg.detect_layer)[l * d..t * d];
        let (z, hc) = head.forward_batch(layer, t - l)?;
        let probs: Vec<T> = z.iter().map(|&x| sigmoid(x)).collect();
        out.bce = bce_sum(&probs, &sample.labels);
        if want_grad && wb > 0.0 {
            let s = T::of(wb * weight);
            let dz: Vec<T> = probs.iter().zip(&sample.labels).map(|(&p, &y)| (p - T::of(y as f64)) * s).collect();
            let mut scratch;
            let hg = match head_grad {
                Some(g) => g,
                None => {
                    scratch = DetectionHead::zeros(head.d_model(), head.hidden());
                    &mut scratch
                }
            };
            let dh = head.backward(&hc, &dz, hg);
            let mut full = vec![T::zero(); t * d];
            full[l * d..].copy_from_slice(&dh);
            tap = Some(full);
        }
    }
    out.total = if use_ce { out.ce } else { 0.0 } + wb * out.bce;

    if let Some(g) = grads {
        let seeds = Seeds { logits: dlogits.as_deref(), tap: tap.as_deref().map(|x| (cfg.detect_layer, x)) };
        model.backward(&cache, seeds, g)?;
    }
    Ok(out)
}

/// Loss of one sample under the given objective, without gradients.
pub fn joint_loss<T: Real>(
    model: &Model<T>,
    head: Option<&DetectionHead<T>>,
    sample: &LabeledSample,
    lambda: f64,
    mode: Mode,
) -> Result<LossBreakdown> {
    sample_loss_grads(model, head, sample, lambda, mode, 1.0, None, None)
}

/// Linear warmup over the first `⌈warmup_ratio · total⌉` steps, then cosine
/// decay to zero at `total`.
pub fn lr_at(step: usize, total_steps: usize, peak_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::Config(format!("step {step} beyond total {total_steps}")));
    }
    let warmup = (warmup_ratio * total_steps as f64).ceil() as usize;
    if step < warmup {
        return Ok(peak_lr * step as f64 / warmup as f64);
    }
    let decay = total_steps - warmup;
    if decay == 0 {
        return Ok(peak_lr);
    }
    let progress = (step - warmup) as f64 / decay as f64;
    Ok(peak_lr * 0.5 * (1.0 + (PI * progress).cos()))
}

/// Adaptive-moment optimizer over one flattened parameter group.
#[derive(Debug, Clone)]
pub struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
    beta1: f32,
    beta2: f32,
    eps: f32,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    pub fn step(&mut self, params: &mut dyn Params<f32>, grads: &dyn Params<f32>, lr: f64) {
        self.step_filtered(params, grads, lr, &|_| true)
    }

    /// Updates only tensors whose name passes `trainable`; the moment buffers
    /// of the others stay untouched.
    pub fn step_filtered(&mut self, params: &mut dyn Params<f32>, grads: &dyn Params<f32>, lr: f64, trainable: &dyn Fn(&str) -> bool) {
        self.t += 1;
        let mut g = Vec::with_capacity(self.m.len());
        grads.visit(&mut |_, _, x| g.extend_from_slice(x));
        assert_eq!(g.len(), self.m.len(), "gradient size differs from optimizer state");
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let lr = lr as f32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        let mut off = 0;
        params.visit_mut(&mut |name, _, p| {
            let n = p.len();
            if trainable(name) {
                for i in 0..n {
                    let j = off + i;
                    let gj = g[j];
                    m[j] = b1 * m[j] + (1.0 - b1) * gj;
                    v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                    let mh = m[j] / bc1;
                    let vh = v[j] / bc2;
                    p[i] -= lr * mh / (vh.sqrt() + eps);
                }
            }
            off += n;
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce: f64,
    pub bce: f64,
    pub total: f64,
    pub lr: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("epoch={}\tce={:.6}\tbce={:.6}\ttotal={:.6}\tlr={:.6e}", self.epoch, self.ce, self.bce, self.total, self.lr)
    }
}

#[derive(Debug, Clone)]
pub struct Trained {
    pub model: Model<f32>,
    pub head: Option<DetectionHead<f32>>,
    pub log: Vec<EpochLog>,
}

fn check_finite(loss: &LossBreakdown, step: usize, sample: &LabeledSample) -> Result<()> {
    if loss.total.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { step, detail: format!("sample {} gave ce={} bce={}", sample.id, loss.ce, loss.bce) })
    }
}

/// Shared epoch/batch loop. `step_fn` receives the batch, the 1-based global
/// step and the learning rate and returns the summed batch loss.
fn run_epochs<F>(data: &[LabeledSample], cfg: &TrainConfig, mut step_fn: F) -> Result<Vec<EpochLog>>
where
    F: FnMut(&[&LabeledSample], usize, f64) -> Result<LossBreakdown>,
{
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let per_epoch = data.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut step = 0;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64)));
        let mut sum = LossBreakdown::default();
        let mut lr = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            step += 1;
            lr = lr_at(step, total, cfg.peak_lr, cfg.warmup_ratio)?;
            let batch: Vec<&LabeledSample> = idx.iter().map(|&i| &data[i]).collect();
            sum.add(&step_fn(&batch, step, lr)?);
        }
        let mean = sum.scaled(1.0 / data.len() as f64);
        log.push(EpochLog { epoch: epoch + 1, ce: mean.ce, bce: mean.bce, total: mean.total, lr });
    }
    Ok(log)
}

/// Fine-tunes LoRA adapters and the detection head on a frozen backbone.
///
/// Adapters and head are created from `cfg.seed` when absent, in the same
/// order for every mode, so runs that differ only in mode or `λ` start from
/// identical parameters.
pub fn train(mut model: Model<f32>, head: Option<DetectionHead<f32>>, data: &[LabeledSample], cfg: &TrainConfig) -> Result<Trained> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if model.lora.is_none() {
        model.attach_lora(&mut rng);
    }
    let mut head = head.unwrap_or_else(|| DetectionHead::init(model.config.d_model, model.config.head_hidden, &mut rng));
    if head.d_model() != model.config.d_model {
        return Err(Error::ConfigMismatch("head input width differs from d_model".into()));
    }
    model.config.head_hidden = head.hidden();
    model.config.keep_lm_head = cfg.keep_lm_head;

    let mut grads = Grads::for_model(&model, false);
    let mut head_grad = DetectionHead::zeros(head.d_model(), head.hidden());
    let mut opt_lora = Adam::new(grads.lora.as_ref().map_or(0, |l| l.num_params()));
    let mut opt_head = Adam::new(head.num_params());
    let train_head = cfg.mode.bce_weight(cfg.lambda) > 0.0;

    let log = run_epochs(data, cfg, |batch, step, lr| {
        grads.zero();
        head_grad.scale(0.0);
        let w = 1.0 / batch.len() as f64;
        let mut sum = LossBreakdown::default();
        for s in batch {
            let loss = sample_loss_grads(&model, Some(&head), s, cfg.lambda, cfg.mode, w, Some(&mut grads), Some(&mut head_grad))?;
            check_finite(&loss, step, s)?;
            sum.add(&loss);
        }
        opt_lora.step(model.lora.as_mut().expect("adapters"), grads.lora.as_ref().expect("adapter grads"), lr);
        if train_head {
            opt_head.step(&mut head, &head_grad, lr);
        }
        Ok(sum)
    })?;
    Ok(Trained { model, head: Some(head), log })
}

/// Trains the backbone itself as a plain language model: next-token CE on
/// every position after `<bos>`, no adapters, no head. The token embedding
/// table stays fixed.
pub fn pretrain_base(mut model: Model<f32>, data: &[LabeledSample], cfg: &TrainConfig) -> Result<Trained> {
    let cfg = TrainConfig { mode: Mode::CeOnly, keep_lm_head: true, ..cfg.clone() };
    cfg.validate()?;
    if model.lora.is_some() {
        return Err(Error::Config("pretraining expects a model without adapters".into()));
    }
    if !model.config.keep_lm_head {
        return Err(Error::NoLmHead);
    }
    let mut grads = Grads::for_model(&model, true);
    let mut opt = Adam::new(model.base.num_params());
    let log = run_epochs(data, &cfg, |batch, step, lr| {
        grads.zero();
        let w = 1.0 / batch.len() as f64;
        let mut sum = LossBreakdown::default();
        for s in batch {
            let full = as_full_sequence(s);
            let loss = sample_loss_grads(&model, None, &full, 0.0, Mode::CeOnly, w, Some(&mut grads), None)?;
            check_finite(&loss, step, s)?;
            sum.add(&loss);
        }
        opt.step_filtered(&mut model.base, grads.base.as_ref().expect("base grads"), lr, &|name| name != "base.tok_emb");
        Ok(sum)
    })?;
    Ok(Trained { model, head: None, log })
}

/// The same sequence with every token after `<bos>` treated as a target.
pub fn as_full_sequence(s: &LabeledSample) -> LabeledSample {
    LabeledSample { prompt_len: 1, labels: vec![0; s.token_ids.len() - 1], ..s.clone() }
}

/// Mean per-token perplexity of the response spans under the model.
pub fn perplexity(model: &Model<f32>, data: &[LabeledSample]) -> Result<f64> {
    let mut nll = 0.0;
    let mut n = 0usize;
    for s in data {
        let f = model.forward(&s.token_ids)?;
        let logits = f.logits.ok_or(Error::NoLmHead)?;
        nll += masked_ce(&logits, model.config.vocab_size, &s.token_ids, s.prompt_len)?;
        n += s.token_ids.len() - s.prompt_len;
    }
    Ok((nll / n.max(1) as f64).exp())
}
