//! End-to-end desk-scale run: pretrain a base model, fine-tune it three
//! ways, and compare detection and generation metrics on the test split.
//!
//! `cargo run --release --example desk_run`

use std::time::Instant;

use hallumon::corpus::{build_corpus, CorpusConfig, ResponseKind, ResponseMix};
use hallumon::eval::{auroc, generation_metrics, score_with_head, score_with_perplexity, Greedy};
use hallumon::model::{Model, ModelConfig};
use hallumon::probes::{compare_procedures, layer_curve};
use hallumon::training::{perplexity, pretrain_base, train, Mode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn env<T: std::str::FromStr>(key: &str, default: T) -> T {
    std::env::var(key).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() -> hallumon::Result<()> {
    let t0 = Instant::now();
    let seed = env("SEED", 0u64);
    let n_samples = env("N_SAMPLES", 2000usize);
    let corpus = build_corpus(&CorpusConfig { seed, n_samples, ..CorpusConfig::default() })?;
    let base_mix = ResponseMix { faithful: env("BASE_F", 1.0), hallucinated: env("BASE_H", 1.0), refusal: env("BASE_R", 0.0) };
    let base_corpus = build_corpus(&CorpusConfig { seed, n_samples, mix: base_mix, ..CorpusConfig::default() })?;
    println!("vocab={} train={} test={}", corpus.vocab.len(), corpus.train.len(), corpus.test.len());

    let mut cfg = ModelConfig::micro(corpus.vocab.len());
    cfg.max_seq_len = 48;
    let model = Model::<f32>::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let pre_cfg = TrainConfig {
        epochs: env("PRE_EPOCHS", 20),
        peak_lr: env("PRE_LR", 1e-3),
        batch_size: env("PRE_BS", 8),
        seed,
        ..TrainConfig::default()
    };
    let before = perplexity(&model, &base_corpus.train)?;
    let base = pretrain_base(model, &base_corpus.train, &pre_cfg)?;
    for l in &base.log {
        println!("pretrain {}", l.line());
    }
    let base = base.model;
    println!("perplexity {before:.3} -> {:.3} ({:.0}s)", perplexity(&base, &base_corpus.train)?, t0.elapsed().as_secs_f64());

    let ft = |mode: Mode| -> hallumon::Result<_> {
        let c = TrainConfig {
            mode,
            epochs: env("FT_EPOCHS", 5),
            peak_lr: env("FT_LR", 3e-4),
            batch_size: env("FT_BS", 8),
            lambda: env("LAMBDA", 1.0),
            seed,
            keep_lm_head: true,
            ..TrainConfig::default()
        };
        let t = train(base.clone(), None, &corpus.train, &c)?;
        for l in &t.log {
            println!("{} {}", mode.as_str(), l.line());
        }
        Ok(t)
    };
    let joint = ft(Mode::Joint)?;
    let text = ft(Mode::CeOnly)?;
    let bce = ft(Mode::BceOnly)?;
    println!("fine-tuning done ({:.0}s)", t0.elapsed().as_secs_f64());

    let test = &corpus.test;
    for (name, t) in [("joint", &joint), ("bce_only", &bce), ("ce_only", &text)] {
        let s = score_with_head(&t.model, t.head.as_ref().unwrap(), test)?;
        println!("{name}: token_auroc={:.4} response_auroc={:.4}", s.token_auroc()?, s.response_auroc()?);
        let (mut vs, mut vl) = (Vec::new(), Vec::new());
        for x in test.iter().filter(|x| x.response_kind != ResponseKind::Refusal) {
            let sc = t.head.as_ref().unwrap().score_sequence(&t.model, &x.token_ids, x.prompt_len)?;
            vs.push(sc[0] as f64);
            vl.push(x.labels[0]);
        }
        println!("{name}: value-token auroc={:.4}", auroc(&vs, &vl)?);
    }
    let p = score_with_perplexity(&base, test)?;
    println!("perplexity baseline: token_auroc={:.4} response_auroc={:.4}", p.token_auroc()?, p.response_auroc()?);
    let cmp = compare_procedures(&base, &joint.model, &text.model, test, seed)?;
    println!("probe mid-layer: base={:.4} joint={:.4} text={:.4}", cmp[0], cmp[1], cmp[2]);
    println!("curve base {:?}", layer_curve(&base, test, seed)?);
    println!("curve joint {:?}", layer_curve(&joint.model, test, seed)?);
    for (name, m) in [("base", &base), ("joint", &joint.model), ("ce_only", &text.model)] {
        let g = generation_metrics(&Greedy(m), test, &corpus.vocab)?;
        println!(
            "{name}: halluc={:.3} (ans {:.3} unans {:.3}) reject={:.3} acc={:.3} f1={:.3} wellformed={:.3}",
            g.hallucination_rate(),
            g.hallucination_rate_answerable(),
            g.hallucination_rate_unanswerable(),
            g.rejection_rate(),
            g.answerability_accuracy(),
            g.answerability_f1(),
            g.wellformed_rate()
        );
    }
    println!("total {:.0}s", t0.elapsed().as_secs_f64());
    Ok(())
}
