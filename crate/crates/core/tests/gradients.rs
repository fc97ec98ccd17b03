mod common;

use common::*;
use hallumon::detector::DetectionHead;
use hallumon::model::{Grads, Model};
use hallumon::params::Params;
use hallumon::training::{sample_loss_grads, Mode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn f64_gradients_match_finite_differences() {
    let (m, h) = tiny_setup(3);
    let (m, h): (Model<f64>, DetectionHead<f64>) = (m.cast(), h.cast());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let s = random_sample(&mut rng, 24, 9, 5);
    for mode in [Mode::Joint, Mode::CeOnly, Mode::BceOnly] {
        let (al, ah) = analytic(&m, &h, &s, 1.0, mode);
        let (nl, nh) = finite_difference(&m, &h, &s, 1.0, mode, 1e-3);
        let e = worst(&al, &nl, 1e-6).max(worst(&ah, &nh, 1e-6));
        assert!(e < 1e-6, "{mode:?}: worst relative error {e:e}");
    }
}

#[test]
fn f32_gradients_match_f64_oracle() {
    let (m, h) = tiny_setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random_sample(&mut rng, 24, 12, 7);
    let (al, ah) = analytic(&m, &h, &s, 1.0, Mode::Joint);
    let (nl, nh) = finite_difference(&m.cast(), &h.cast(), &s, 1.0, Mode::Joint, 1e-3);
    let al: Vec<f64> = al.iter().map(|&x| x as f64).collect();
    let ah: Vec<f64> = ah.iter().map(|&x| x as f64).collect();
    let e = worst(&al, &nl, 1e-3).max(worst(&ah, &nh, 1e-3));
    assert!(e < 1e-3, "worst relative error {e:e}");
}

#[test]
fn base_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let m = Model::<f64>::init(tiny_config(), &mut rng).unwrap();
    let s = random_sample(&mut rng, 24, 10, 6);
    let mut g = Grads::for_model(&m, true);
    sample_loss_grads(&m, None, &s, 0.0, Mode::CeOnly, 1.0, Some(&mut g), None).unwrap();
    let analytic = g.base.unwrap().flatten();
    let loss = |m: &Model<f64>| hallumon::training::joint_loss(m, None, &s, 0.0, Mode::CeOnly).unwrap().total;
    let mut m2 = m.clone();
    let n_tok = m.base.tok_emb.data.len();
    let h = 1e-3;
    let mut worst_e: f64 = 0.0;
    for i in n_tok..m.base.num_params() {
        let orig = nth(&mut m2.base, i, None);
        let numeric = five_point(h, |x| {
            nth(&mut m2.base, i, Some(orig + x));
            loss(&m2)
        });
        nth(&mut m2.base, i, Some(orig));
        worst_e = worst_e.max(rel_err(analytic[i], numeric, 1e-6));
    }
    assert!(worst_e < 1e-6, "worst relative error {worst_e:e}");
    assert!(analytic[..n_tok].iter().all(|&x| x == 0.0));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let (m, _) = tiny_setup(1);
    let (_, cache) = m.forward_train(&[1, 2, 3, 4], true).unwrap();
    let mut g = Grads::for_model(&m, true);
    let zl = vec![0f32; 4 * 24];
    let zt = vec![0f32; 4 * 16];
    m.backward(&cache, hallumon::model::Seeds { logits: Some(&zl), tap: Some((1, &zt)) }, &mut g).unwrap();
    assert!(g.lora.unwrap().flatten().iter().all(|&x| x == 0.0));
    assert!(g.base.unwrap().flatten().iter().all(|&x| x == 0.0));
}

#[test]
fn detection_loss_alone_reaches_lower_adapters() {
    let (m, h) = tiny_setup(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s = random_sample(&mut rng, 24, 8, 4);
    let mut g = Grads::for_model(&m, false);
    let mut hg = DetectionHead::zeros(16, 8);
    sample_loss_grads(&m, Some(&h), &s, 1.0, Mode::BceOnly, 1.0, Some(&mut g), Some(&mut hg)).unwrap();
    let lora = g.lora.unwrap();
    let below: f64 = lora.blocks[0].q.a.data.iter().map(|&x| (x as f64).powi(2)).sum();
    let above: f64 = lora.blocks[1].q.a.data.iter().map(|&x| (x as f64).powi(2)).sum();
    assert!(below > 0.0);
    assert_eq!(above, 0.0);
}
