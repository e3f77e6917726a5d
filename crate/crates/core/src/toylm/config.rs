use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, DEFAULT_SYMBOLS};
use crate::data::TemplateVariant;
use crate::error::{Error, Result};

/// Order in which the model emits answer digits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnswerOrder {
    /// Canonical left-to-right rendering.
    #[default]
    Msb,
    /// Ones digit first; answers are reversed back before scoring.
    Lsb,
}

impl AnswerOrder {
    pub fn name(self) -> &'static str {
        match self {
            AnswerOrder::Msb => "msb",
            AnswerOrder::Lsb => "lsb",
        }
    }
}

/// Synthetic addition corpus used by `toylm train`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    /// Training problems drawn (with operand digit lengths uniform in
    /// `1..=max_digits`).
    pub size: usize,
    pub max_digits: u32,
    /// Two-digit problems held out of training for the exact-match gate.
    pub holdout: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { size: 200_000, max_digits: 3, holdout: 1000, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyLmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Ordered symbol set; end-of-sequence is implicit and last.
    pub vocab: String,
    pub max_seq_len: usize,
    pub learning_rate: f64,
    /// Final learning rate as a fraction of the peak (cosine decay).
    pub min_lr_fraction: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; zero disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub answer_order: AnswerOrder,
    pub template: TemplateVariant,
    /// Steps between loss log entries.
    pub log_every: usize,
    pub corpus: CorpusConfig,
}

impl Default for ToyLmConfig {
    fn default() -> Self {
        Self {
            n_layers: 6,
            d_model: 128,
            n_heads: 4,
            vocab: DEFAULT_SYMBOLS.to_string(),
            max_seq_len: 40,
            learning_rate: 1e-3,
            min_lr_fraction: 0.1,
            warmup_steps: 100,
            batch_size: 32,
            steps: 3000,
            beta1: 0.9,
            beta2: 0.99,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            grad_clip: 1.0,
            seed: 42,
            answer_order: AnswerOrder::Msb,
            template: TemplateVariant::Spaced,
            log_every: 50,
            corpus: CorpusConfig::default(),
        }
    }
}

impl ToyLmConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(&self.vocab)
    }

    pub fn head_size(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.n_layers == 0 || self.d_model == 0 || self.n_heads == 0 {
            return bad("n_layers, d_model and n_heads must be positive".into());
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("d_model {} not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.max_seq_len == 0 || self.batch_size == 0 {
            return bad("max_seq_len and batch_size must be positive".into());
        }
        let vocab = self.vocab()?;
        for needed in "0123456789+-*=: Calcute".chars() {
            if vocab.id_of(needed).is_none() {
                return bad(format!("vocabulary lacks {needed:?}, which prompts and answers use"));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = ToyLmConfig { n_layers: 2, answer_order: AnswerOrder::Lsb, ..Default::default() };
        assert_eq!(ToyLmConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let cfg = ToyLmConfig::from_toml("d_model = 64\n[corpus]\nsize = 10\n").unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.n_layers, 6);
        assert_eq!(cfg.corpus.size, 10);
        assert_eq!(cfg.corpus.max_digits, 3);
    }

    #[test]
    fn rejects_bad_heads_and_vocab() {
        assert!(ToyLmConfig::from_toml("d_model = 30\nn_heads = 4").is_err());
        assert!(ToyLmConfig::from_toml("vocab = \"0123456789\"").is_err());
        assert!(ToyLmConfig::from_toml("nonsense = 1").is_err());
    }
}
