//! Synthetic closed-domain QA corpus.
//!
//! Entities and values are invented words, so nothing a model could know
//! before training can answer a question: the context is the only source.
//! Every prompt comes as an answerable/unanswerable pair that differs in the
//! single slot holding the evidence chunk. Hallucinated responses are injected
//! by asserting a same-attribute value that no chunk contains, which makes the
//! token labels exact.

mod format;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, REFUSAL_WORDS};

pub use format::{read_corpus, write_corpus};

pub const ATTRIBUTES: [&str; 6] = ["color", "capital", "founder", "age", "height", "population"];
const NUMERIC_ATTRIBUTES: [&str; 3] = ["age", "height", "population"];

const CHUNK_TEMPLATES: [&str; 3] = ["{e} {a} is {v} .", "the {a} of {e} is {v} .", "{e} has {a} {v} ."];
const QUESTION_TEMPLATE: &str = "what is the {a} of {e} ?";
const QUESTION_MARKER: &str = "question";

/// Closed-class words that can never carry an asserted value.
const FUNCTION_WORDS: [&str; 9] = ["the", "of", "is", "has", "what", QUESTION_MARKER, ":", ".", "?"];

pub const DEFAULT_CHUNKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fact {
    pub fact_id: u32,
    pub entity: String,
    pub attribute: String,
    pub value: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub fact_id: u32,
    pub text: String,
}

impl Chunk {
    /// The single value-bearing word of the chunk.
    pub fn value(&self) -> Option<&str> {
        self.text.split_whitespace().find(|w| is_value_word(w))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RagPrompt {
    pub question: String,
    pub chunks: Vec<Chunk>,
    pub answerable: bool,
    pub gold_fact_id: Option<u32>,
    /// The fact the question asks about, whether or not its chunk is present.
    pub asked_fact_id: u32,
    pub seed: u64,
}

impl RagPrompt {
    pub fn text(&self) -> String {
        let chunks: Vec<&str> = self.chunks.iter().map(|c| c.text.as_str()).collect();
        format!("{} {QUESTION_MARKER} : {}", chunks.join(" "), self.question)
    }

    pub fn gold_value(&self) -> Option<&str> {
        let gold = self.gold_fact_id?;
        self.chunks.iter().find(|c| c.fact_id == gold).and_then(Chunk::value)
    }

    pub fn context_contains(&self, word: &str) -> bool {
        self.chunks.iter().any(|c| c.text.split_whitespace().any(|w| w == word))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResponseKind {
    Faithful,
    Hallucinated,
    Refusal,
}

impl ResponseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseKind::Faithful => "faithful",
            ResponseKind::Hallucinated => "hallucinated",
            ResponseKind::Refusal => "refusal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "faithful" => Some(ResponseKind::Faithful),
            "hallucinated" => Some(ResponseKind::Hallucinated),
            "refusal" => Some(ResponseKind::Refusal),
            _ => None,
        }
    }
}

/// A tokenized prompt+response with labels over the response span only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledSample {
    pub id: u64,
    pub token_ids: Vec<u32>,
    /// Tokens `[0, prompt_len)` are the prompt, including `<bos>` and `<sep>`.
    pub prompt_len: usize,
    /// One label per response position `prompt_len..token_ids.len()`.
    pub labels: Vec<u8>,
    pub answerable: bool,
    pub response_kind: ResponseKind,
    pub fact_id: u32,
    /// `decode(token_ids)`.
    pub text: String,
}

impl LabeledSample {
    pub fn prompt_ids(&self) -> &[u32] {
        &self.token_ids[..self.prompt_len]
    }

    pub fn response_ids(&self) -> &[u32] {
        &self.token_ids[self.prompt_len..]
    }

    /// Chunk texts recovered from the stored text, for verification of
    /// arbitrary responses to this sample's prompt.
    pub fn context_chunks(&self) -> Vec<String> {
        context_chunks_of(&self.text)
    }
}

/// Splits a rendered prompt into its chunk sentences (everything before the
/// question marker, cut at each `.`).
pub fn context_chunks_of(text: &str) -> Vec<String> {
    let mut chunks = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for w in text.split_whitespace() {
        match w {
            "<bos>" => continue,
            QUESTION_MARKER => break,
            "." => {
                cur.push(w);
                chunks.push(cur.join(" "));
                cur.clear();
            }
            _ => cur.push(w),
        }
    }
    chunks
}

/// Open-class lowercase words and numbers carry values; entities are
/// capitalized and everything else is a closed-class word.
pub fn is_value_word(w: &str) -> bool {
    if w.is_empty() || FUNCTION_WORDS.contains(&w) || ATTRIBUTES.contains(&w) || REFUSAL_WORDS.contains(&w) {
        return false;
    }
    w.bytes().all(|b| b.is_ascii_digit()) || w.bytes().all(|b| b.is_ascii_lowercase())
}

fn nonsense_word<R: Rng>(rng: &mut R) -> String {
    const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    let syllables = rng.random_range(2..=3);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())] as char);
    }
    if rng.random_bool(0.5) {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char);
    }
    w
}

fn capitalize(w: &str) -> String {
    let mut c = w.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

/// Facts with unique `(entity, attribute)` pairs and globally unique values.
/// Attributes cycle through [`ATTRIBUTES`] so any contiguous run of facts is
/// balanced across attribute kinds.
pub fn generate_facts(n: usize, seed: u64) -> Vec<Fact> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entities: Vec<String> = Vec::new();
    let mut entity_set = HashSet::new();
    let mut pairs = HashSet::new();
    let mut values = HashSet::new();
    let mut facts = Vec::with_capacity(n);
    for i in 0..n {
        let attribute = ATTRIBUTES[i % ATTRIBUTES.len()];
        let entity = loop {
            if !entities.is_empty() && rng.random_bool(0.5) {
                let e = &entities[rng.random_range(0..entities.len())];
                if !pairs.contains(&(e.clone(), attribute)) {
                    break e.clone();
                }
            } else {
                let e = capitalize(&nonsense_word(&mut rng));
                if entity_set.insert(e.clone()) {
                    entities.push(e.clone());
                    break e;
                }
            }
        };
        pairs.insert((entity.clone(), attribute));
        let value = loop {
            let v = if NUMERIC_ATTRIBUTES.contains(&attribute) {
                rng.random_range(100u32..100_000).to_string()
            } else {
                nonsense_word(&mut rng)
            };
            if is_value_word(&v) && values.insert(v.clone()) {
                break v;
            }
        };
        facts.push(Fact { fact_id: i as u32, entity, attribute: attribute.to_string(), value });
    }
    facts
}

fn render(template: &str, f: &Fact) -> String {
    template.replace("{e}", &f.entity).replace("{a}", &f.attribute).replace("{v}", &f.value)
}

/// Builds the answerable prompt and its unanswerable sibling. Both draw the
/// same `C` same-attribute distractors; the answerable one has the evidence
/// chunk in place of the distractor at one slot.
pub fn build_prompt_pair(fact: &Fact, pool: &[Fact], chunks: usize, seed: u64) -> Result<(RagPrompt, RagPrompt)> {
    if chunks == 0 {
        return Err(Error::Config("chunks per prompt must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut distractors: Vec<&Fact> =
        pool.iter().filter(|f| f.attribute == fact.attribute && f.fact_id != fact.fact_id).collect();
    if distractors.len() < chunks {
        return Err(Error::InsufficientDistractors { needed: chunks, available: distractors.len() });
    }
    distractors.shuffle(&mut rng);
    distractors.truncate(chunks);
    let slot = rng.random_range(0..chunks);
    let templates: Vec<&str> = (0..chunks).map(|_| CHUNK_TEMPLATES[rng.random_range(0..CHUNK_TEMPLATES.len())]).collect();
    let question = render(QUESTION_TEMPLATE, fact);

    let make = |with_gold: bool| {
        let chunks = distractors
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let f = if with_gold && i == slot { fact } else { *d };
                Chunk { fact_id: f.fact_id, text: render(templates[i], f) }
            })
            .collect();
        RagPrompt {
            question: question.clone(),
            chunks,
            answerable: with_gold,
            gold_fact_id: with_gold.then_some(fact.fact_id),
            asked_fact_id: fact.fact_id,
            seed,
        }
    };
    Ok((make(true), make(false)))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub words: Vec<String>,
    pub labels: Vec<u8>,
}

impl Response {
    pub fn text(&self) -> String {
        self.words.join(" ")
    }
}

/// Produces a response of the requested kind. Hallucinated responses assert a
/// value of another same-attribute fact from `pool` that no chunk contains.
pub fn synthesize_response(prompt: &RagPrompt, kind: ResponseKind, pool: &[Fact], seed: u64) -> Result<Response> {
    match kind {
        ResponseKind::Faithful => {
            if !prompt.answerable {
                return Err(Error::FaithfulOnUnanswerable);
            }
            let gold = prompt.gold_value().ok_or_else(|| Error::Config("answerable prompt lacks its gold chunk".into()))?;
            Ok(Response { words: vec![gold.to_string()], labels: vec![0] })
        }
        ResponseKind::Refusal => Ok(Response {
            words: REFUSAL_WORDS.iter().map(|w| w.to_string()).collect(),
            labels: vec![0; REFUSAL_WORDS.len()],
        }),
        ResponseKind::Hallucinated => {
            let attribute = pool.iter().find(|f| f.fact_id == prompt.asked_fact_id).map(|f| f.attribute.as_str());
            let candidates: Vec<&Fact> = pool
                .iter()
                .filter(|f| {
                    f.fact_id != prompt.asked_fact_id
                        && attribute.is_none_or(|a| a == f.attribute)
                        && !prompt.context_contains(&f.value)
                })
                .collect();
            if candidates.is_empty() {
                return Err(Error::InsufficientDistractors { needed: 1, available: 0 });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let v = &candidates[rng.random_range(0..candidates.len())].value;
            Ok(Response { words: vec![v.clone()], labels: vec![1] })
        }
    }
}

/// Deterministic substring verifier: a value-bearing word is hallucinated iff
/// no context chunk contains it as a whole word.
pub fn annotate_tokens<S: AsRef<str>>(response: &[S], prompt: &RagPrompt) -> Vec<u8> {
    let chunks: Vec<&str> = prompt.chunks.iter().map(|c| c.text.as_str()).collect();
    annotate_against(response, &chunks)
}

pub fn annotate_against<S: AsRef<str>, C: AsRef<str>>(response: &[S], chunks: &[C]) -> Vec<u8> {
    let context: HashSet<&str> = chunks.iter().flat_map(|c| c.as_ref().split_whitespace()).collect();
    response
        .iter()
        .map(|w| {
            let w = w.as_ref();
            u8::from(is_value_word(w) && !context.contains(w))
        })
        .collect()
}

/// Relative shares of response kinds; normalized on use.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResponseMix {
    pub faithful: f64,
    pub hallucinated: f64,
    pub refusal: f64,
}

impl Default for ResponseMix {
    fn default() -> Self {
        ResponseMix { faithful: 1.0, hallucinated: 1.0, refusal: 1.0 }
    }
}

impl ResponseMix {
    /// Golden answers only: quote the evidence when present, refuse otherwise.
    pub fn golden() -> Self {
        ResponseMix { faithful: 1.0, hallucinated: 0.0, refusal: 1.0 }
    }

    fn validate(&self) -> Result<()> {
        let parts = [self.faithful, self.hallucinated, self.refusal];
        if parts.iter().any(|p| !p.is_finite() || *p < 0.0) || parts.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Config(format!("invalid response mix {self:?}")));
        }
        Ok(())
    }

    /// Assigns a kind to each of `n_ans` answerable and `n_unans`
    /// unanswerable prompts with exact quotas. Faithful responses go to
    /// answerable prompts; refusals fill unanswerable prompts first;
    /// hallucinations take the remaining slots.
    fn allocate<R: Rng>(&self, n_ans: usize, n_unans: usize, rng: &mut R) -> Result<(Vec<ResponseKind>, Vec<ResponseKind>)> {
        let total = self.faithful + self.hallucinated + self.refusal;
        let n = n_ans + n_unans;
        let n_f = (self.faithful / total * n as f64).round() as usize;
        let n_r = ((self.refusal / total * n as f64).round() as usize).min(n - n_f.min(n));
        if n_f > n_ans {
            return Err(Error::Config(format!(
                "faithful share needs {n_f} answerable prompts but only {n_ans} exist"
            )));
        }
        let r_unans = n_r.min(n_unans);
        let r_ans = (n_r - r_unans).min(n_ans - n_f);
        let mut ans = Vec::with_capacity(n_ans);
        ans.extend(std::iter::repeat_n(ResponseKind::Faithful, n_f));
        ans.extend(std::iter::repeat_n(ResponseKind::Refusal, r_ans));
        ans.resize(n_ans, ResponseKind::Hallucinated);
        let mut unans = Vec::with_capacity(n_unans);
        unans.extend(std::iter::repeat_n(ResponseKind::Refusal, r_unans));
        unans.resize(n_unans, ResponseKind::Hallucinated);
        ans.shuffle(rng);
        unans.shuffle(rng);
        Ok((ans, unans))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_samples: usize,
    pub train_fraction: f64,
    pub chunks_per_prompt: usize,
    pub mix: ResponseMix,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_samples: 2000,
            train_fraction: 0.4,
            chunks_per_prompt: DEFAULT_CHUNKS,
            mix: ResponseMix::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocab,
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
}

struct Split<'a> {
    facts: &'a [Fact],
    n_samples: usize,
}

/// Generates the full corpus. Train and test draw gold facts, distractors and
/// hallucinated values from disjoint fact ranges, so no test value ever occurs
/// in training text. Prompts depend only on `seed`; response kinds come from a
/// separate stream, so two configs differing only in `mix` share every prompt
/// and the vocabulary, which covers every fact word.
pub fn build_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&config.train_fraction) || !config.train_fraction.is_finite() {
        return Err(Error::Config(format!("train_fraction {} not in [0, 1]", config.train_fraction)));
    }
    if config.chunks_per_prompt == 0 {
        return Err(Error::Config("chunks_per_prompt must be at least 1".into()));
    }
    config.mix.validate()?;

    let n_train = (config.n_samples as f64 * config.train_fraction).round() as usize;
    let n_test = config.n_samples - n_train;
    let pad = ATTRIBUTES.len() * (config.chunks_per_prompt + 1);
    let train_facts = n_train.div_ceil(2) + pad;
    let test_facts = n_test.div_ceil(2) + pad;
    let facts = generate_facts(train_facts + test_facts, config.seed);
    let (train_pool, test_pool) = facts.split_at(train_facts);

    let mut kind_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6b69_6e64_u64.rotate_left(32));
    let mut next_id = 0u64;
    let mut splits = Vec::with_capacity(2);
    for (split_idx, split) in [Split { facts: train_pool, n_samples: n_train }, Split { facts: test_pool, n_samples: n_test }]
        .into_iter()
        .enumerate()
    {
        let n_ans = split.n_samples.div_ceil(2);
        let n_unans = split.n_samples / 2;
        let (ans_kinds, unans_kinds) = config.mix.allocate(n_ans, n_unans, &mut kind_rng)?;
        let mut samples = Vec::with_capacity(split.n_samples);
        for pair in 0..n_ans {
            let fact = &split.facts[pair];
            let pair_seed = config.seed.wrapping_mul(1_000_003).wrapping_add(((split_idx as u64) << 40) | pair as u64);
            let (ans, unans) = build_prompt_pair(fact, split.facts, config.chunks_per_prompt, pair_seed)?;
            let mut members = vec![(ans, ans_kinds[pair])];
            if pair < n_unans {
                members.push((unans, unans_kinds[pair]));
            }
            for (prompt, kind) in members {
                let response_seed = pair_seed ^ kind_rng.random::<u64>();
                let response = synthesize_response(&prompt, kind, split.facts, response_seed)?;
                samples.push(RawSample { id: next_id, prompt, kind, response });
                next_id += 1;
            }
        }
        splits.push(samples);
    }

    let texts: Vec<String> = splits.iter().flatten().map(RawSample::text).collect();
    let fact_words = facts.iter().flat_map(|f| [f.entity.as_str(), f.attribute.as_str(), f.value.as_str()]);
    let vocab = Vocab::build(texts.iter().map(String::as_str).chain(fact_words));
    let mut out = splits.into_iter().map(|s| s.into_iter().map(|r| r.finish(&vocab)).collect::<Result<Vec<_>>>());
    let train = out.next().expect("train split")?;
    let test = out.next().expect("test split")?;
    Ok(Corpus { vocab, train, test })
}

struct RawSample {
    id: u64,
    prompt: RagPrompt,
    kind: ResponseKind,
    response: Response,
}

impl RawSample {
    fn prompt_words(&self) -> String {
        format!("<bos> {} <sep>", self.prompt.text())
    }

    fn text(&self) -> String {
        format!("{} {} <eos>", self.prompt_words(), self.response.text())
    }

    fn finish(self, vocab: &Vocab) -> Result<LabeledSample> {
        let prompt_len = vocab.encode(&self.prompt_words())?.len();
        let text = self.text();
        let token_ids = vocab.encode(&text)?;
        let mut labels = self.response.labels.clone();
        labels.push(0); // <eos>
        debug_assert_eq!(labels.len(), token_ids.len() - prompt_len);
        Ok(LabeledSample {
            id: self.id,
            token_ids,
            prompt_len,
            labels,
            answerable: self.prompt.answerable,
            response_kind: self.kind,
            fact_id: self.prompt.asked_fact_id,
            text,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(n: usize) -> CorpusConfig {
        CorpusConfig { n_samples: n, seed: 11, ..CorpusConfig::default() }
    }

    #[test]
    fn one_fact() {
        let f = generate_facts(1, 0);
        assert_eq!(f.len(), 1);
        assert!(is_value_word(&f[0].value));
        assert!(generate_facts(0, 0).is_empty());
    }

    #[test]
    fn facts_deterministic() {
        assert_eq!(generate_facts(50, 3), generate_facts(50, 3));
        assert_ne!(generate_facts(50, 3), generate_facts(50, 4));
    }

    #[test]
    fn thousand_facts_unique_pairs_and_values() {
        let facts = generate_facts(1000, 7);
        assert_eq!(facts.len(), 1000);
        let mut pairs = HashSet::new();
        let mut per_attr_values = HashSet::new();
        for f in &facts {
            assert!(pairs.insert((f.entity.clone(), f.attribute.clone())), "duplicate pair {f:?}");
            assert!(per_attr_values.insert((f.attribute.clone(), f.value.clone())), "duplicate value {f:?}");
            assert!(!is_value_word(&f.entity));
        }
    }

    #[test]
    fn single_chunk_pair() {
        let facts = generate_facts(30, 1);
        let (a, u) = build_prompt_pair(&facts[0], &facts, 1, 5).unwrap();
        assert_eq!(a.chunks.len(), 1);
        assert_eq!(a.chunks[0].fact_id, facts[0].fact_id);
        assert_eq!(u.chunks.len(), 1);
        assert_ne!(u.chunks[0].fact_id, facts[0].fact_id);
    }

    #[test]
    fn pair_differs_in_one_slot() {
        let facts = generate_facts(60, 2);
        let (a, u) = build_prompt_pair(&facts[3], &facts, 3, 9).unwrap();
        let differing = a.chunks.iter().zip(&u.chunks).filter(|(x, y)| x != y).count();
        assert_eq!(differing, 1);
        assert_eq!(a.chunks.iter().filter(|c| c.fact_id == facts[3].fact_id).count(), 1);
        assert!(u.chunks.iter().all(|c| c.fact_id != facts[3].fact_id));
        assert_eq!(a.question, u.question);
        let value = &facts[3].value;
        assert!(a.text().split_whitespace().any(|w| w == value));
        assert!(!u.text().split_whitespace().any(|w| w == value));
    }

    #[test]
    fn pool_too_small() {
        let facts = generate_facts(12, 2); // two facts per attribute
        let err = build_prompt_pair(&facts[0], &facts, 3, 0).unwrap_err();
        assert!(matches!(err, Error::InsufficientDistractors { needed: 3, available: 1 }));
    }

    #[test]
    fn chunk_contains_value_once() {
        let facts = generate_facts(60, 2);
        let (a, _) = build_prompt_pair(&facts[5], &facts, 3, 1).unwrap();
        for c in &a.chunks {
            let f = facts.iter().find(|f| f.fact_id == c.fact_id).unwrap();
            assert_eq!(c.text.split_whitespace().filter(|w| *w == f.value).count(), 1);
            assert_eq!(c.value(), Some(f.value.as_str()));
        }
    }

    #[test]
    fn responses_by_kind() {
        let facts = generate_facts(60, 2);
        let (a, u) = build_prompt_pair(&facts[0], &facts, 3, 1).unwrap();
        let f = synthesize_response(&a, ResponseKind::Faithful, &facts, 0).unwrap();
        assert_eq!(f.words, vec![facts[0].value.clone()]);
        assert_eq!(f.labels, vec![0]);
        let r = synthesize_response(&u, ResponseKind::Refusal, &facts, 0).unwrap();
        assert_eq!(r.text(), REFUSAL_WORDS.join(" "));
        assert!(r.labels.iter().all(|&l| l == 0));
        for p in [&a, &u] {
            let h = synthesize_response(p, ResponseKind::Hallucinated, &facts, 4).unwrap();
            assert!(h.labels.contains(&1));
            assert_eq!(annotate_tokens(&h.words, p), h.labels);
            assert!(!p.context_contains(&h.words[0]));
        }
        assert!(matches!(
            synthesize_response(&u, ResponseKind::Faithful, &facts, 0),
            Err(Error::FaithfulOnUnanswerable)
        ));
    }

    #[test]
    fn verifier_cases() {
        let facts = generate_facts(60, 2);
        let (a, _) = build_prompt_pair(&facts[0], &facts, 3, 1).unwrap();
        let gold = a.gold_value().unwrap().to_string();
        assert_eq!(annotate_tokens(&[gold.as_str()], &a), vec![0]);
        // a value no chunk contains
        let absent = "47";
        assert!(!a.context_contains(absent));
        assert_eq!(annotate_tokens(&["the", absent, "."], &a), vec![0, 1, 0]);
        assert_eq!(annotate_tokens::<&str>(&[], &a), Vec::<u8>::new());
        assert_eq!(annotate_tokens(&REFUSAL_WORDS, &a), vec![0, 0]);
    }

    #[test]
    fn balanced_hundred() {
        let c = build_corpus(&CorpusConfig { train_fraction: 0.5, ..small_config(100) }).unwrap();
        let all: Vec<_> = c.train.iter().chain(&c.test).collect();
        assert_eq!(all.len(), 100);
        assert_eq!(all.iter().filter(|s| s.answerable).count(), 50);
    }

    #[test]
    fn default_split_is_forty_sixty() {
        let c = build_corpus(&small_config(200)).unwrap();
        assert_eq!(c.train.len(), 80);
        assert_eq!(c.test.len(), 120);
    }

    #[test]
    fn splits_are_fact_disjoint_and_closed_domain() {
        let c = build_corpus(&small_config(300)).unwrap();
        let train_facts: HashSet<u32> = c.train.iter().map(|s| s.fact_id).collect();
        let test_facts: HashSet<u32> = c.test.iter().map(|s| s.fact_id).collect();
        assert!(train_facts.is_disjoint(&test_facts));
        let train_words: HashSet<&str> = c.train.iter().flat_map(|s| s.text.split_whitespace()).collect();
        for s in c.test.iter().filter(|s| s.answerable) {
            let gold = s.context_chunks().iter().flat_map(|c| c.split_whitespace().map(String::from).collect::<Vec<_>>()).collect::<Vec<_>>();
            // every value in a test prompt comes from the test fact range
            for w in gold.iter().filter(|w| is_value_word(w)) {
                assert!(!train_words.contains(w.as_str()), "test value {w} leaked into train");
            }
        }
    }

    #[test]
    fn sample_invariants() {
        let c = build_corpus(&small_config(120)).unwrap();
        for s in c.train.iter().chain(&c.test) {
            assert_eq!(s.labels.len(), s.token_ids.len() - s.prompt_len);
            assert_eq!(c.vocab.decode(&s.token_ids).unwrap(), s.text);
            let words: Vec<&str> = s.text.split_whitespace().skip(s.prompt_len).collect();
            assert_eq!(words.last(), Some(&"<eos>"));
            let chunks = s.context_chunks();
            let mut verified = annotate_against(&words[..words.len() - 1], &chunks);
            verified.push(0);
            assert_eq!(verified, s.labels, "label soundness for sample {}", s.id);
            match s.response_kind {
                ResponseKind::Faithful => assert!(s.answerable && s.labels.iter().all(|&l| l == 0)),
                ResponseKind::Hallucinated => assert!(s.labels.contains(&1)),
                ResponseKind::Refusal => {
                    assert!(s.labels.iter().all(|&l| l == 0));
                    assert!(s.text.contains(&REFUSAL_WORDS.join(" ")));
                }
            }
        }
    }

    #[test]
    fn default_mix_quotas() {
        let c = build_corpus(&small_config(600)).unwrap();
        let count = |k: ResponseKind| c.test.iter().filter(|s| s.response_kind == k).count();
        assert_eq!(count(ResponseKind::Faithful), 120);
        assert_eq!(count(ResponseKind::Refusal), 120);
        assert_eq!(count(ResponseKind::Hallucinated), 120);
        assert!(c.test.iter().filter(|s| !s.answerable).all(|s| s.response_kind != ResponseKind::Faithful));
    }

    #[test]
    fn mix_changes_only_responses() {
        let a = build_corpus(&small_config(100)).unwrap();
        let b = build_corpus(&CorpusConfig { mix: ResponseMix::golden(), ..small_config(100) }).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(&x.text[..x.text.find("<sep>").unwrap()], &y.text[..y.text.find("<sep>").unwrap()]);
        }
        assert_eq!(a.vocab, b.vocab);
    }

    #[test]
    fn invalid_configs() {
        assert!(build_corpus(&CorpusConfig { train_fraction: 1.5, ..small_config(10) }).is_err());
        let bad_mix = ResponseMix { faithful: -1.0, hallucinated: 1.0, refusal: 1.0 };
        assert!(build_corpus(&CorpusConfig { mix: bad_mix, ..small_config(10) }).is_err());
        let all_faithful = ResponseMix { faithful: 1.0, hallucinated: 0.0, refusal: 0.0 };
        assert!(build_corpus(&CorpusConfig { mix: all_faithful, ..small_config(10) }).is_err());
    }

    #[test]
    fn context_chunk_parse() {
        let text = "<bos> Ab color is kel . the color of Zo is mim . question : what is the color of Ab ? <sep> kel <eos>";
        assert_eq!(context_chunks_of(text), vec!["Ab color is kel .", "the color of Zo is mim ."]);
    }
}
