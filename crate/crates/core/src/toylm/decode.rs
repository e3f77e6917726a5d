//! Greedy answer generation.

use super::config::AnswerOrder;
use super::kernels::argmax;
use super::model::ToyLm;
use super::train::emitted_answer;
use crate::error::Result;

/// Outcome of greedy decoding after a prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GeneratedAnswer {
    /// Answer text in canonical reading order.
    pub text: String,
    /// False when the length cap was hit before end-of-sequence; such
    /// output is a non-answer.
    pub terminated: bool,
}

impl GeneratedAnswer {
    /// Exact match against the canonical decimal rendering.
    pub fn matches(&self, gold: &str) -> bool {
        self.terminated && self.text == gold
    }
}

/// Greedy decoding (ties to the lowest token id) until end-of-sequence or
/// the model's context is full.
pub fn generate_answer(model: &ToyLm<f32>, prompt: &str) -> Result<GeneratedAnswer> {
    let vocab = &model.vocab;
    let mut tokens = vocab.tokenize(prompt)?;
    let prompt_len = tokens.len();
    let mut terminated = false;
    while tokens.len() < model.config.max_seq_len {
        let cache = model.forward(&tokens)?;
        let next = argmax(cache.logits_at(tokens.len() - 1)) as u32;
        if next == vocab.eos() {
            terminated = true;
            break;
        }
        tokens.push(next);
    }
    if !terminated && tokens.len() == model.config.max_seq_len {
        // The final position can still predict end-of-sequence.
        let cache = model.forward(&tokens)?;
        terminated = argmax(cache.logits_at(tokens.len() - 1)) as u32 == vocab.eos();
    }
    let raw = vocab.detokenize(&tokens[prompt_len..])?;
    let text = match model.config.answer_order {
        AnswerOrder::Msb => raw,
        AnswerOrder::Lsb => raw.chars().rev().collect(),
    };
    Ok(GeneratedAnswer { text, terminated })
}

/// Whether greedy decoding would emit exactly `gold` then stop, checked in
/// a single teacher-forced pass: greedy output equals `gold` iff the argmax
/// at every answer position is the next gold token.
pub fn teacher_forced_correct(model: &ToyLm<f32>, prompt: &str, gold: &str) -> Result<bool> {
    let vocab = &model.vocab;
    let mut tokens = vocab.tokenize(prompt)?;
    let prompt_len = tokens.len();
    tokens.extend(vocab.tokenize(&emitted_answer(gold, model.config.answer_order))?);
    if tokens.len() > model.config.max_seq_len {
        return Ok(false);
    }
    let cache = model.forward(&tokens)?;
    for t in prompt_len - 1..tokens.len() {
        let expected = tokens.get(t + 1).copied().unwrap_or(vocab.eos());
        if argmax(cache.logits_at(t)) as u32 != expected {
            return Ok(false);
        }
    }
    Ok(true)
}
