//! Deterministic single-threaded training of the toy model on synthetic
//! addition.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{AnswerOrder, CorpusConfig, ToyLmConfig};
use super::decode::teacher_forced_correct;
use super::model::{Example, ToyLm};
use super::vocab::Vocab;
use crate::data::generate::digit_range;
use crate::data::{ArithProblem, Operation, TemplateVariant};
use crate::error::{Error, Result};

/// Training stream plus a disjoint held-out two-digit set.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<ArithProblem>,
    pub holdout: Vec<ArithProblem>,
}

/// Addition corpus covering one- to `max_digits`-digit operands. The
/// holdout holds unique two-digit problems that never occur in `train`.
pub fn addition_corpus(cfg: &CorpusConfig, template: TemplateVariant) -> Result<Corpus> {
    if cfg.max_digits == 0 {
        return Err(Error::InvalidArgument("corpus max_digits must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo2, hi2) = digit_range(2)?;
    let two_digit_pairs = ((hi2 - lo2 + 1) * (hi2 - lo2 + 1)) as usize;
    if cfg.holdout > two_digit_pairs / 2 {
        return Err(Error::InvalidArgument(format!("holdout {} too large for two-digit addition", cfg.holdout)));
    }
    let mut held = HashSet::with_capacity(cfg.holdout);
    let mut holdout = Vec::with_capacity(cfg.holdout);
    while holdout.len() < cfg.holdout {
        let (a, b) = (rng.random_range(lo2..=hi2), rng.random_range(lo2..=hi2));
        if held.insert((a, b)) {
            holdout.push(ArithProblem::new(a, b, Operation::Add, template)?);
        }
    }
    let ranges: Vec<(u64, u64)> = (1..=cfg.max_digits).map(digit_range).collect::<Result<_>>()?;
    let mut train = Vec::with_capacity(cfg.size);
    while train.len() < cfg.size {
        let (lo_a, hi_a) = ranges[rng.random_range(0..ranges.len())];
        let (lo_b, hi_b) = ranges[rng.random_range(0..ranges.len())];
        let (a, b) = (rng.random_range(lo_a..=hi_a), rng.random_range(lo_b..=hi_b));
        if held.contains(&(a, b)) {
            continue;
        }
        train.push(ArithProblem::new(a, b, Operation::Add, template)?);
    }
    Ok(Corpus { train, holdout })
}

/// Answer text in the order the model emits it.
pub fn emitted_answer(answer: &str, order: AnswerOrder) -> String {
    match order {
        AnswerOrder::Msb => answer.to_string(),
        AnswerOrder::Lsb => answer.chars().rev().collect(),
    }
}

/// Prompt followed by the answer, with loss on every answer token and the
/// terminating end-of-sequence.
pub fn encode_example(vocab: &Vocab, prompt: &str, answer: &str, order: AnswerOrder) -> Result<Example> {
    let prompt_ids = vocab.tokenize(prompt)?;
    if prompt_ids.is_empty() {
        return Err(Error::InvalidArgument("empty prompt".into()));
    }
    let answer_ids = vocab.tokenize(&emitted_answer(answer, order))?;
    let mut tokens = prompt_ids.clone();
    tokens.extend_from_slice(&answer_ids);
    let mut targets = vec![None; tokens.len()];
    for t in prompt_ids.len() - 1..tokens.len() - 1 {
        targets[t] = Some(tokens[t + 1]);
    }
    *targets.last_mut().expect("non-empty") = Some(vocab.eos());
    Ok(Example { tokens, targets })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub loss: f32,
    pub learning_rate: f32,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ToyLm<f32>,
    pub log: Vec<TrainLogEntry>,
    /// Exact-match accuracy on the corpus holdout after the last step.
    pub holdout_exact_match: f64,
}

/// Warmup then cosine decay to `min_lr_fraction` of the peak.
pub fn learning_rate_at(cfg: &ToyLmConfig, step: usize) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.learning_rate * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = cfg.steps.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.min_lr_fraction * cfg.learning_rate;
    floor + 0.5 * (cfg.learning_rate - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Adam with decoupled weight decay; state is plain vectors.
struct Adam {
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f32, cfg: &ToyLmConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let (eps, wd) = (cfg.adam_eps as f32, cfg.weight_decay as f32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] -= lr * (mhat / (vhat.sqrt() + eps) + wd * params[i]);
        }
    }
}

pub fn train(config: &ToyLmConfig, corpus: &Corpus) -> Result<TrainOutcome> {
    train_with_progress(config, corpus, |_| {})
}

/// Train from scratch. `on_log` sees every log entry as it is produced.
pub fn train_with_progress<F: FnMut(&TrainLogEntry)>(
    config: &ToyLmConfig,
    corpus: &Corpus,
    mut on_log: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    if corpus.train.is_empty() {
        return Err(Error::InvalidArgument("empty training corpus".into()));
    }
    let mut model = ToyLm::<f32>::init(config)?;
    let examples: Vec<Example> = corpus
        .train
        .iter()
        .map(|p| encode_example(&model.vocab, &p.prompt, &p.answer_text(), config.answer_order))
        .collect::<Result<_>>()?;
    if let Some(ex) = examples.iter().find(|ex| ex.tokens.len() > config.max_seq_len) {
        return Err(Error::InvalidArgument(format!(
            "training sequence of {} tokens exceeds max_seq_len {}",
            ex.tokens.len(),
            config.max_seq_len
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));
    let mut adam = Adam::new(model.params.len());
    let mut grads = vec![0.0f32; model.params.len()];
    let mut batch = Vec::with_capacity(config.batch_size);
    let mut log = Vec::new();
    let mut last_finite = f32::NAN;

    for step in 0..config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            batch.push(examples[rng.random_range(0..examples.len())].clone());
        }
        grads.iter_mut().for_each(|g| *g = 0.0);
        let loss = model.loss_and_grad(&batch, Some(&mut grads))?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "training diverged at step {step}: loss {loss}, last finite loss {last_finite}"
            )));
        }
        last_finite = loss;

        if config.grad_clip > 0.0 {
            let norm = grads.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>().sqrt();
            if norm > config.grad_clip {
                let scale = (config.grad_clip / norm) as f32;
                grads.iter_mut().for_each(|g| *g *= scale);
            }
        }
        let lr = learning_rate_at(config, step) as f32;
        if step % config.log_every.max(1) == 0 || step + 1 == config.steps {
            let entry = TrainLogEntry { step, loss, learning_rate: lr };
            on_log(&entry);
            log.push(entry);
        }
        adam.step(&mut model.params, &grads, lr, config);
    }

    let holdout_exact_match = exact_match_rate(&model, &corpus.holdout)?;
    Ok(TrainOutcome { model, log, holdout_exact_match })
}

/// Fraction of problems the model answers exactly under greedy decoding.
pub fn exact_match_rate(model: &ToyLm<f32>, problems: &[ArithProblem]) -> Result<f64> {
    if problems.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for p in problems {
        if teacher_forced_correct(model, &p.prompt, &p.answer_text())? {
            correct += 1;
        }
    }
    Ok(correct as f64 / problems.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn example_targets_cover_answer_and_eos() {
        let v = Vocab::default();
        let ex = encode_example(&v, "1 + 2 = ", "3", AnswerOrder::Msb).unwrap();
        assert_eq!(ex.tokens.len(), 9);
        let targets: Vec<_> = ex.targets.iter().enumerate().filter_map(|(t, x)| x.map(|x| (t, x))).collect();
        assert_eq!(targets, vec![(7, 3), (8, v.eos())]);
    }

    #[test]
    fn lsb_order_reverses() {
        assert_eq!(emitted_answer("579", AnswerOrder::Lsb), "975");
        assert_eq!(emitted_answer("579", AnswerOrder::Msb), "579");
    }

    #[test]
    fn corpus_holdout_is_disjoint() {
        let cfg = CorpusConfig { size: 5000, max_digits: 2, holdout: 200, seed: 1 };
        let c = addition_corpus(&cfg, TemplateVariant::Spaced).unwrap();
        let held: HashSet<_> = c.holdout.iter().map(|p| p.key()).collect();
        assert_eq!(held.len(), 200);
        assert!(c.train.iter().all(|p| !held.contains(&p.key())));
        assert!(c.holdout.iter().all(|p| (10..100).contains(&p.op_a) && (10..100).contains(&p.op_b)));
    }

    #[test]
    fn schedule_shape() {
        let cfg = ToyLmConfig { steps: 1000, warmup_steps: 100, learning_rate: 1e-3, min_lr_fraction: 0.1, ..Default::default() };
        assert!((learning_rate_at(&cfg, 99) - 1e-3).abs() < 1e-12);
        assert!(learning_rate_at(&cfg, 50) < 1e-3);
        assert!((learning_rate_at(&cfg, 1000) - 1e-4).abs() < 1e-12);
    }

    #[test]
    fn short_run_is_deterministic_and_starts_at_uniform_loss() {
        let cfg = ToyLmConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            steps: 5,
            batch_size: 4,
            log_every: 1,
            corpus: CorpusConfig { size: 100, max_digits: 2, holdout: 10, seed: 3 },
            ..Default::default()
        };
        let corpus = addition_corpus(&cfg.corpus, cfg.template).unwrap();
        let a = train(&cfg, &corpus).unwrap();
        let b = train(&cfg, &corpus).unwrap();
        let bits = |m: &ToyLm<f32>| m.params.iter().map(|p| p.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.model), bits(&b.model));
        let uniform = (a.model.vocab.len() as f32).ln();
        assert!((a.log[0].loss - uniform).abs() < 0.05, "{} vs {uniform}", a.log[0].loss);
    }
}
