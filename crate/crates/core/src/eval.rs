//! Detection and generation metrics.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::io::Write;

use crate::corpus::{annotate_against, context_chunks_of, is_value_word, LabeledSample};
use crate::detector::DetectionHead;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::{softmax_in_place, Real};
use crate::tokenizer::{Vocab, EOS, REFUSAL_IDS};

/// Maximum tokens generated per response during evaluation.
pub const MAX_RESPONSE_TOKENS: usize = 8;

fn class_counts(labels: &[u8]) -> Result<(u64, u64)> {
    let pos = labels.iter().filter(|&&l| l == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    Ok((pos, neg))
}

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch { expected: labels.len(), got: scores.len() });
    }
    Ok(())
}

/// Area under the ROC curve via the Mann–Whitney rank statistic, ties
/// counting one half. Twice the U statistic is accumulated in integers, so
/// the result is exactly [`auroc_pairwise`].
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled mid-ranks: a tie group spanning sorted positions [i, j) has
    // rank (i + 1 + j) / 2.
    let mut rank2_pos: u128 = 0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i + 1;
        while j < idx.len() && scores[idx[j]].total_cmp(&scores[idx[i]]) == Ordering::Equal {
            j += 1;
        }
        let group_pos = idx[i..j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        rank2_pos += group_pos * (i + 1 + j) as u128;
        i = j;
    }
    let u2 = rank2_pos - (pos as u128) * (pos as u128 + 1);
    Ok(u2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Brute-force `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over all positive–negative pairs.
pub fn auroc_pairwise(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut wins2: u128 = 0;
    for (&sp, _) in scores.iter().zip(labels).filter(|&(_, &l)| l == 1) {
        for (&sn, _) in scores.iter().zip(labels).filter(|&(_, &l)| l != 1) {
            wins2 += match sp.total_cmp(&sn) {
                Ordering::Greater => 2,
                Ordering::Equal => 1,
                Ordering::Less => 0,
            };
        }
    }
    Ok(wins2 as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Max-pooled response score.
pub fn response_score(token_scores: &[f64]) -> Result<f64> {
    token_scores.iter().copied().reduce(f64::max).ok_or(Error::EmptyResponse)
}

/// Surprisal `−ln P(x_t | x_<t)` of every response token.
pub fn perplexity_scores<T: Real>(model: &Model<T>, ids: &[u32], prompt_len: usize) -> Result<Vec<f64>> {
    if prompt_len == 0 || prompt_len >= ids.len() {
        return Err(Error::NoResponse { prompt_len, len: ids.len() });
    }
    let f = model.forward(ids)?;
    let v = model.config.vocab_size;
    let logits = f.logits.ok_or(Error::NoLmHead)?;
    let mut row = vec![T::zero(); v];
    Ok((prompt_len..ids.len())
        .map(|t| {
            row.copy_from_slice(&logits[(t - 1) * v..t * v]);
            let lse = softmax_in_place(&mut row);
            (lse - logits[(t - 1) * v + ids[t] as usize]).f64().max(0.0)
        })
        .collect())
}

/// Flattened token scores and per-response maxima with their labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoredSet {
    pub token_scores: Vec<f64>,
    pub token_labels: Vec<u8>,
    pub response_scores: Vec<f64>,
    pub response_labels: Vec<u8>,
}

impl ScoredSet {
    pub fn push(&mut self, scores: &[f64], labels: &[u8]) -> Result<()> {
        check_lengths(scores, labels)?;
        self.token_scores.extend_from_slice(scores);
        self.token_labels.extend_from_slice(labels);
        self.response_scores.push(response_score(scores)?);
        self.response_labels.push(u8::from(labels.contains(&1)));
        Ok(())
    }

    pub fn token_auroc(&self) -> Result<f64> {
        auroc(&self.token_scores, &self.token_labels)
    }

    pub fn response_auroc(&self) -> Result<f64> {
        auroc(&self.response_scores, &self.response_labels)
    }
}

/// Detection-head scores on teacher-forced corpus responses.
pub fn score_with_head(model: &Model<f32>, head: &DetectionHead<f32>, samples: &[LabeledSample]) -> Result<ScoredSet> {
    let mut set = ScoredSet::default();
    for s in samples {
        let p = head.score_sequence(model, &s.token_ids, s.prompt_len)?;
        let p: Vec<f64> = p.into_iter().map(f64::from).collect();
        set.push(&p, &s.labels)?;
    }
    Ok(set)
}

/// Surprisal scores on teacher-forced corpus responses.
pub fn score_with_perplexity(model: &Model<f32>, samples: &[LabeledSample]) -> Result<ScoredSet> {
    let mut set = ScoredSet::default();
    for s in samples {
        set.push(&perplexity_scores(model, &s.token_ids, s.prompt_len)?, &s.labels)?;
    }
    Ok(set)
}

/// Something that answers a prompt. Returned ids are the response only.
pub trait Policy {
    fn respond(&self, prompt_ids: &[u32], prompt_text: &str) -> Result<Vec<u32>>;
}

/// Greedy decoding with a model.
pub struct Greedy<'a>(pub &'a Model<f32>);

impl Policy for Greedy<'_> {
    fn respond(&self, prompt_ids: &[u32], _: &str) -> Result<Vec<u32>> {
        let out = self.0.generate_greedy(prompt_ids, MAX_RESPONSE_TOKENS)?;
        Ok(out[prompt_ids.len()..].to_vec())
    }
}

/// Quotes the evidence when the context holds it and refuses otherwise.
pub struct Oracle<'a>(pub &'a Vocab);

impl Policy for Oracle<'_> {
    fn respond(&self, _: &[u32], prompt_text: &str) -> Result<Vec<u32>> {
        let mut out = match evidence_value(prompt_text) {
            Some(v) => vec![self.0.id(&v).ok_or(Error::OutOfVocabulary(v))?],
            None => REFUSAL_IDS.to_vec(),
        };
        out.push(EOS);
        Ok(out)
    }
}

/// Always emits the refusal phrase.
pub struct AlwaysRefuse;

impl Policy for AlwaysRefuse {
    fn respond(&self, _: &[u32], _: &str) -> Result<Vec<u32>> {
        let mut out = REFUSAL_IDS.to_vec();
        out.push(EOS);
        Ok(out)
    }
}

/// The value of the chunk that answers the prompt's question, if any.
pub fn evidence_value(prompt_text: &str) -> Option<String> {
    let words: Vec<&str> = prompt_text.split_whitespace().collect();
    let q = words.iter().position(|&w| w == "question")?;
    // "what is the {a} of {e} ?"
    let (attribute, entity) = match &words[q + 1..] {
        [":", "what", "is", "the", a, "of", e, "?", ..] => (*a, *e),
        _ => return None,
    };
    context_chunks_of(prompt_text).into_iter().find_map(|c| {
        let ws: Vec<&str> = c.split_whitespace().collect();
        if ws.contains(&attribute) && ws.contains(&entity) {
            ws.iter().find(|w| is_value_word(w)).map(|w| w.to_string())
        } else {
            None
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Refused,
    Hallucinated,
    Grounded,
}

/// Classification of one generated response.
#[derive(Debug, Clone, PartialEq)]
pub struct Judged {
    pub category: Category,
    pub wellformed: bool,
    pub text: String,
}

/// Judges a generated response against the sample's context.
pub fn judge(response: &[u32], sample: &LabeledSample, vocab: &Vocab) -> Judged {
    let body = match response.iter().position(|&t| t == EOS) {
        Some(i) => &response[..i],
        None => response,
    };
    let decoded = vocab.decode(response);
    let wellformed = decoded.is_ok() && !body.is_empty() && response.last() == Some(&EOS) && body.len() + 1 == response.len();
    let text = decoded.unwrap_or_default();
    let category = if body == REFUSAL_IDS {
        Category::Refused
    } else {
        let words: Vec<&str> = body.iter().filter_map(|&t| vocab.token(t).ok()).collect();
        if annotate_against(&words, &sample.context_chunks()).contains(&1) {
            Category::Hallucinated
        } else {
            Category::Grounded
        }
    };
    Judged { category, wellformed, text }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationMetrics {
    pub n: usize,
    pub n_answerable: usize,
    pub n_unanswerable: usize,
    pub refused: usize,
    pub hallucinated: usize,
    pub grounded: usize,
    pub hallucinated_answerable: usize,
    pub hallucinated_unanswerable: usize,
    pub correct_answerability: usize,
    pub wellformed: usize,
    /// Refusals of unanswerable prompts (the F1 positive class).
    pub true_refusals: usize,
    pub warnings: Vec<String>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

impl GenerationMetrics {
    pub fn hallucination_rate(&self) -> f64 {
        ratio(self.hallucinated, self.n)
    }
    pub fn hallucination_rate_answerable(&self) -> f64 {
        ratio(self.hallucinated_answerable, self.n_answerable)
    }
    pub fn hallucination_rate_unanswerable(&self) -> f64 {
        ratio(self.hallucinated_unanswerable, self.n_unanswerable)
    }
    pub fn rejection_rate(&self) -> f64 {
        ratio(self.refused, self.n)
    }
    pub fn answerability_accuracy(&self) -> f64 {
        ratio(self.correct_answerability, self.n)
    }
    pub fn wellformed_rate(&self) -> f64 {
        ratio(self.wellformed, self.n)
    }

    /// F1 with "refused an unanswerable prompt" as the positive class;
    /// 0 when there are neither predicted nor actual positives.
    pub fn answerability_f1(&self) -> f64 {
        let tp = self.true_refusals;
        let fp = self.refused - tp;
        let fn_ = self.n_unanswerable - tp;
        ratio(2 * tp, 2 * tp + fp + fn_)
    }
}

pub fn generation_metrics(policy: &dyn Policy, samples: &[LabeledSample], vocab: &Vocab) -> Result<GenerationMetrics> {
    let mut m = GenerationMetrics::default();
    for s in samples {
        let prompt_text = vocab.decode(s.prompt_ids())?;
        let response = policy.respond(s.prompt_ids(), &prompt_text)?;
        let j = judge(&response, s, vocab);
        m.n += 1;
        if s.answerable {
            m.n_answerable += 1;
        } else {
            m.n_unanswerable += 1;
        }
        m.wellformed += usize::from(j.wellformed);
        let refused = j.category == Category::Refused;
        if refused != s.answerable {
            m.correct_answerability += 1;
        }
        match j.category {
            Category::Refused => {
                m.refused += 1;
                m.true_refusals += usize::from(!s.answerable);
            }
            Category::Hallucinated => {
                m.hallucinated += 1;
                if s.answerable {
                    m.hallucinated_answerable += 1;
                } else {
                    m.hallucinated_unanswerable += 1;
                }
            }
            Category::Grounded => m.grounded += 1,
        }
    }
    if m.n_answerable.abs_diff(m.n_unanswerable) > 1 {
        m.warnings.push(format!("unbalanced set: {} answerable, {} unanswerable", m.n_answerable, m.n_unanswerable));
    }
    Ok(m)
}

/// Everything the `eval` command reports.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    pub token_auroc: Option<f64>,
    pub response_auroc: Option<f64>,
    pub perplexity_token_auroc: Option<f64>,
    pub perplexity_response_auroc: Option<f64>,
    pub generation: GenerationMetrics,
    pub probe_curve: Vec<f64>,
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(|| "na".to_string(), |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn pairs(&self) -> Vec<(String, String)> {
        let g = &self.generation;
        let mut out = vec![
            ("token_auroc".to_string(), opt(self.token_auroc)),
            ("response_auroc".into(), opt(self.response_auroc)),
            ("perplexity_token_auroc".into(), opt(self.perplexity_token_auroc)),
            ("perplexity_response_auroc".into(), opt(self.perplexity_response_auroc)),
            ("answerability_accuracy".into(), format!("{:.6}", g.answerability_accuracy())),
            ("answerability_f1".into(), format!("{:.6}", g.answerability_f1())),
            ("hallucination_rate".into(), format!("{:.6}", g.hallucination_rate())),
            ("hallucination_rate_answerable".into(), format!("{:.6}", g.hallucination_rate_answerable())),
            ("hallucination_rate_unanswerable".into(), format!("{:.6}", g.hallucination_rate_unanswerable())),
            ("rejection_rate".into(), format!("{:.6}", g.rejection_rate())),
            ("wellformed_rate".into(), format!("{:.6}", g.wellformed_rate())),
            ("count_total".into(), g.n.to_string()),
            ("count_answerable".into(), g.n_answerable.to_string()),
            ("count_unanswerable".into(), g.n_unanswerable.to_string()),
            ("count_refused".into(), g.refused.to_string()),
            ("count_hallucinated".into(), g.hallucinated.to_string()),
            ("count_grounded".into(), g.grounded.to_string()),
        ];
        for (l, a) in self.probe_curve.iter().enumerate() {
            out.push((format!("probe_auroc_layer_{l}"), format!("{a:.6}")));
        }
        for (i, w) in g.warnings.iter().enumerate() {
            out.push((format!("warning_{i}"), w.clone()));
        }
        out
    }

    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        for (k, v) in self.pairs() {
            writeln!(w, "{k}={v}")?;
        }
        Ok(())
    }

    /// Fixed-width summary with one row per metric, in percent.
    pub fn table(&self) -> String {
        let g = &self.generation;
        let pct = |x: f64| format!("{:>8.2}", 100.0 * x);
        let rows = [
            ("Answerability Accuracy", pct(g.answerability_accuracy())),
            ("Answerability F1", pct(g.answerability_f1())),
            ("Hallucination Rate", pct(g.hallucination_rate())),
            ("  Answerable", pct(g.hallucination_rate_answerable())),
            ("  Unanswerable", pct(g.hallucination_rate_unanswerable())),
            ("Rejection Rate", pct(g.rejection_rate())),
            ("Well-formed Rate", pct(g.wellformed_rate())),
            ("Token AUROC", self.token_auroc.map_or("      na".into(), pct)),
            ("Response AUROC", self.response_auroc.map_or("      na".into(), pct)),
        ];
        let mut s = String::new();
        let _ = writeln!(s, "{:<24}{:>8}", "Metric (%)", "Value");
        for (name, v) in rows {
            let _ = writeln!(s, "{name:<24}{v}");
        }
        s
    }
}
