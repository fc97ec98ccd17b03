//! `key = value` run configuration shared by every command.

use std::path::Path;

use hallumon::corpus::CorpusConfig;
use hallumon::model::ModelConfig;
use hallumon::training::TrainConfig;
use hallumon::Error;

pub const PRETRAIN_EPOCHS: usize = 5;
pub const PRETRAIN_LR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub corpus: CorpusConfig,
    /// `vocab_size` is replaced by the corpus vocabulary size on use.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: TrainConfig,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            corpus: CorpusConfig::default(),
            model: ModelConfig::micro(0),
            train: TrainConfig::default(),
            pretrain: TrainConfig { epochs: PRETRAIN_EPOCHS, peak_lr: PRETRAIN_LR, ..TrainConfig::default() },
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> hallumon::Result<V> {
    value.parse().map_err(|_| Error::Config(format!("bad value `{value}` for {key}")))
}

impl Settings {
    pub fn load(path: Option<&Path>) -> hallumon::Result<Settings> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            s.apply(&text)?;
        }
        Ok(s)
    }

    /// Applies every `key = value` line; `#` starts a comment.
    pub fn apply(&mut self, text: &str) -> hallumon::Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> hallumon::Result<()> {
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "n_samples" => self.corpus.n_samples = parse(key, value)?,
            "train_fraction" => self.corpus.train_fraction = parse(key, value)?,
            "chunks_per_prompt" => self.corpus.chunks_per_prompt = parse(key, value)?,
            "mix_faithful" => self.corpus.mix.faithful = parse(key, value)?,
            "mix_hallucinated" => self.corpus.mix.hallucinated = parse(key, value)?,
            "mix_refusal" => self.corpus.mix.refusal = parse(key, value)?,
            "vocab_size" => return Err(Error::Config("vocab_size is taken from the corpus vocabulary".into())),
            "keep_lm_head" => {
                self.model.set(key, value)?;
                self.train.set(key, value)?;
            }
            _ => {
                if let Some(k) = key.strip_prefix("pretrain_") {
                    if k == "mode" || k == "lambda" || !self.pretrain.set(k, value)? {
                        return Err(Error::Config(format!("unknown config key `{key}`")));
                    }
                } else if !self.model.set(key, value)? && !self.train.set(key, value)? {
                    return Err(Error::Config(format!("unknown config key `{key}`")));
                }
            }
        }
        Ok(())
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.train.seed = seed;
        self.pretrain.seed = seed;
    }

    pub fn seed(&self) -> u64 {
        self.train.seed
    }

    pub fn corpus_pairs(&self) -> Vec<(&'static str, String)> {
        let c = &self.corpus;
        vec![
            ("n_samples", c.n_samples.to_string()),
            ("train_fraction", c.train_fraction.to_string()),
            ("chunks_per_prompt", c.chunks_per_prompt.to_string()),
            ("mix_faithful", c.mix.faithful.to_string()),
            ("mix_hallucinated", c.mix.hallucinated.to_string()),
            ("mix_refusal", c.mix.refusal.to_string()),
            ("seed", c.seed.to_string()),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_group() {
        let mut s = Settings::default();
        s.apply("# run\nseed = 7\nn_samples=40\nmix_refusal = 0\nd_model = 32 # narrow\nlambda = 0.5\nmode = bce_only\npretrain_epochs = 3\n")
            .unwrap();
        assert_eq!(s.corpus.seed, 7);
        assert_eq!(s.pretrain.seed, 7);
        assert_eq!(s.corpus.n_samples, 40);
        assert_eq!(s.corpus.mix.refusal, 0.0);
        assert_eq!(s.model.d_model, 32);
        assert_eq!(s.train.lambda, 0.5);
        assert_eq!(s.train.mode.as_str(), "bce_only");
        assert_eq!(s.pretrain.epochs, 3);
        assert_eq!(s.train.epochs, TrainConfig::default().epochs);
    }

    #[test]
    fn rejects_bad_lines() {
        for bad in ["nonsense", "colour = red", "d_model = wide", "vocab_size = 9", "pretrain_mode = joint", "mode = fast"] {
            assert!(Settings::default().apply(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn keep_lm_head_sets_both() {
        let mut s = Settings::default();
        s.apply("keep_lm_head = false").unwrap();
        assert!(!s.model.keep_lm_head && !s.train.keep_lm_head);
    }
}
