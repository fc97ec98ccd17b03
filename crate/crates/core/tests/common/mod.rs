#![allow(dead_code)]

use hallumon::corpus::{LabeledSample, ResponseKind};
use hallumon::detector::DetectionHead;
use hallumon::model::{Grads, Model, ModelConfig};
use hallumon::params::Params;
use hallumon::training::{joint_loss, sample_loss_grads, Mode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab_size: 24,
        max_seq_len: 16,
        lora_rank: 2,
        lora_alpha: 4.0,
        detect_layer: 1,
        head_hidden: 8,
        keep_lm_head: true,
    }
}

/// Tiny model with adapters whose `B` factors are nonzero, plus a head.
pub fn tiny_setup(seed: u64) -> (Model<f32>, DetectionHead<f32>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::<f32>::init(tiny_config(), &mut rng).unwrap();
    m.attach_lora(&mut rng);
    m.lora.as_mut().unwrap().visit_mut(&mut |name, _, p| {
        if name.ends_with(".b") {
            p.iter_mut().for_each(|x| *x = rng.random_range(-0.3..0.3));
        }
    });
    let h = DetectionHead::init(16, 8, &mut rng);
    (m, h)
}

pub fn random_sample(rng: &mut ChaCha8Rng, vocab: u32, len: usize, prompt_len: usize) -> LabeledSample {
    let token_ids: Vec<u32> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
    let mut labels: Vec<u8> = (prompt_len..len).map(|_| rng.random_range(0..2)).collect();
    labels[0] = 1;
    LabeledSample {
        id: 0,
        token_ids,
        prompt_len,
        labels,
        answerable: true,
        response_kind: ResponseKind::Hallucinated,
        fact_id: 0,
        text: String::new(),
    }
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Fourth-order central difference of `f` at offset 0.
pub fn five_point(h: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let (p1, m1, p2, m2) = (f(h), f(-h), f(2.0 * h), f(-2.0 * h));
    (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h)
}

/// Central-difference gradient of the sample loss w.r.t. every scalar of the
/// adapters and the head, evaluated on an f64 copy of the network.
pub fn finite_difference(model: &Model<f64>, head: &DetectionHead<f64>, s: &LabeledSample, lambda: f64, mode: Mode, h: f64) -> (Vec<f64>, Vec<f64>) {
    let loss = |m: &Model<f64>, hd: &DetectionHead<f64>| joint_loss(m, Some(hd), s, lambda, mode).unwrap().total;
    let mut m = model.clone();
    let n_lora = m.lora.as_ref().unwrap().num_params();
    let mut g_lora = Vec::with_capacity(n_lora);
    for i in 0..n_lora {
        let orig = nth(m.lora.as_mut().unwrap(), i, None);
        g_lora.push(five_point(h, |x| {
            nth(m.lora.as_mut().unwrap(), i, Some(orig + x));
            loss(&m, head)
        }));
        nth(m.lora.as_mut().unwrap(), i, Some(orig));
    }
    let mut hd = head.clone();
    let mut g_head = Vec::new();
    for i in 0..hd.num_params() {
        let orig = nth(&mut hd, i, None);
        g_head.push(five_point(h, |x| {
            nth(&mut hd, i, Some(orig + x));
            loss(model, &hd)
        }));
        nth(&mut hd, i, Some(orig));
    }
    (g_lora, g_head)
}

/// Reads the `i`-th scalar of a parameter group, optionally overwriting it.
pub fn nth<T: hallumon::tensor::Real>(p: &mut dyn Params<T>, i: usize, set: Option<T>) -> T {
    let mut off = 0;
    let mut out = T::zero();
    p.visit_mut(&mut |_, _, xs| {
        if i >= off && i < off + xs.len() {
            out = xs[i - off];
            if let Some(v) = set {
                xs[i - off] = v;
            }
        }
        off += xs.len();
    });
    out
}

pub fn analytic<T: hallumon::tensor::Real>(model: &Model<T>, head: &DetectionHead<T>, s: &LabeledSample, lambda: f64, mode: Mode) -> (Vec<T>, Vec<T>) {
    let mut g = Grads::for_model(model, false);
    let mut hg = DetectionHead::zeros(head.d_model(), head.hidden());
    sample_loss_grads(model, Some(head), s, lambda, mode, 1.0, Some(&mut g), Some(&mut hg)).unwrap();
    (g.lora.unwrap().flatten(), hg.flatten())
}

/// Worst relative error between analytic and numeric gradients.
pub fn worst(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n, floor)).fold(0.0, f64::max)
}
