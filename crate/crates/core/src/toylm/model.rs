//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! All parameters live in one flat buffer; [`ParamView`] carves it into
//! named tensors. There is no normalization between the last block and the
//! unembedding, so the final layer state projected through `lm_head` is
//! exactly the model's next-token logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::config::ToyLmConfig;
use super::kernels::*;
use super::vocab::Vocab;
use crate::error::{Error, Result};

const INIT_STD: f64 = 0.02;

pub trait Carve: Sized + Default {
    fn carve(self, n: usize) -> (Self, Self);
}

impl<T> Carve for &[T] {
    fn carve(self, n: usize) -> (Self, Self) {
        self.split_at(n)
    }
}

impl<T> Carve for &mut [T] {
    fn carve(self, n: usize) -> (Self, Self) {
        self.split_at_mut(n)
    }
}

pub struct BlockView<S> {
    pub ln1_w: S,
    pub ln1_b: S,
    pub qkv_w: S,
    pub qkv_b: S,
    pub attn_proj_w: S,
    pub attn_proj_b: S,
    pub ln2_w: S,
    pub ln2_b: S,
    pub fc_w: S,
    pub fc_b: S,
    pub mlp_proj_w: S,
    pub mlp_proj_b: S,
}

pub struct ParamView<S> {
    pub wte: S,
    pub wpe: S,
    pub blocks: Vec<BlockView<S>>,
    pub lm_head: S,
}

/// Tensor sizes in layout order, tagged with their init rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    ResidualNormal,
    Zeros,
    Ones,
}

fn layout(cfg: &ToyLmConfig, vocab: usize) -> Vec<(usize, Init)> {
    let c = cfg.d_model;
    let mut sizes = vec![(vocab * c, Init::Normal), (cfg.max_seq_len * c, Init::Normal)];
    for _ in 0..cfg.n_layers {
        sizes.extend([
            (c, Init::Ones),
            (c, Init::Zeros),
            (3 * c * c, Init::Normal),
            (3 * c, Init::Zeros),
            (c * c, Init::ResidualNormal),
            (c, Init::Zeros),
            (c, Init::Ones),
            (c, Init::Zeros),
            (4 * c * c, Init::Normal),
            (4 * c, Init::Zeros),
            (4 * c * c, Init::ResidualNormal),
            (c, Init::Zeros),
        ]);
    }
    sizes.push((vocab * c, Init::Normal));
    sizes
}

pub fn param_count(cfg: &ToyLmConfig, vocab: usize) -> usize {
    layout(cfg, vocab).iter().map(|(n, _)| n).sum()
}

pub fn view<S: Carve>(cfg: &ToyLmConfig, vocab: usize, buf: S) -> ParamView<S> {
    let sizes = layout(cfg, vocab);
    let mut rest = buf;
    let mut it = sizes.into_iter().map(|(n, _)| n);
    let mut take = || {
        let (head, tail) = std::mem::take(&mut rest).carve(it.next().expect("layout length"));
        rest = tail;
        head
    };
    let wte = take();
    let wpe = take();
    let blocks = (0..cfg.n_layers)
        .map(|_| BlockView {
            ln1_w: take(),
            ln1_b: take(),
            qkv_w: take(),
            qkv_b: take(),
            attn_proj_w: take(),
            attn_proj_b: take(),
            ln2_w: take(),
            ln2_b: take(),
            fc_w: take(),
            fc_b: take(),
            mlp_proj_w: take(),
            mlp_proj_b: take(),
        })
        .collect();
    let lm_head = take();
    ParamView { wte, wpe, blocks, lm_head }
}

/// Activations of one block for a packed batch of sequences.
#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    ln1: Vec<T>,
    ln1_mean: Vec<T>,
    ln1_rstd: Vec<T>,
    qkv: Vec<T>,
    /// Per-sequence `(heads, len, len)` attention maps, concatenated.
    att: Vec<T>,
    atty: Vec<T>,
    pub attn_out: Vec<T>,
    resid_mid: Vec<T>,
    ln2: Vec<T>,
    ln2_mean: Vec<T>,
    ln2_rstd: Vec<T>,
    fch: Vec<T>,
    fch_gelu: Vec<T>,
    pub mlp_out: Vec<T>,
    pub out: Vec<T>,
}

/// Everything the backward pass needs for a packed batch. Rows of every
/// activation buffer are the tokens of all sequences laid end to end.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub tokens: Vec<u32>,
    /// `(first row, length)` of each sequence.
    pub segments: Vec<(usize, usize)>,
    pub d_model: usize,
    pub vocab: usize,
    pub x0: Vec<T>,
    pub blocks: Vec<BlockCache<T>>,
    /// `(seq, vocab)` next-token logits at every position.
    pub logits: Vec<T>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Total packed rows.
    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    /// Residual-stream vector at layer state `layer` (0 = embedding) and
    /// packed row `pos`.
    pub fn state(&self, layer: usize, pos: usize) -> &[T] {
        let c = self.d_model;
        let buf = if layer == 0 { &self.x0 } else { &self.blocks[layer - 1].out };
        &buf[pos * c..(pos + 1) * c]
    }

    /// What block `layer` (1-based) adds to the residual stream at `pos`.
    pub fn block_delta(&self, layer: usize, pos: usize) -> Vec<T> {
        let c = self.d_model;
        let b = &self.blocks[layer - 1];
        b.attn_out[pos * c..(pos + 1) * c]
            .iter()
            .zip(&b.mlp_out[pos * c..(pos + 1) * c])
            .map(|(&a, &m)| a + m)
            .collect()
    }

    pub fn logits_at(&self, pos: usize) -> &[T] {
        &self.logits[pos * self.vocab..(pos + 1) * self.vocab]
    }
}

/// Last-token residual states at every layer state: row 0 is the embedding
/// output, row `l` the output of block `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStates<T> {
    pub n_layer_states: usize,
    pub d_model: usize,
    pub token_position: usize,
    /// Row-major `(n_layer_states, d_model)`.
    pub states: Vec<T>,
}

impl<T> LayerStates<T> {
    pub fn row(&self, layer: usize) -> &[T] {
        &self.states[layer * self.d_model..(layer + 1) * self.d_model]
    }
}

/// One training sequence: `targets[t]` is the token expected after
/// position `t`, or `None` where no loss is taken.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub targets: Vec<Option<u32>>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyLm<T> {
    pub config: ToyLmConfig,
    pub vocab: Vocab,
    pub params: Vec<T>,
}

impl<T: Scalar> ToyLm<T> {
    /// Fresh model with normal(0, 0.02) weights (residual projections
    /// scaled by `1/sqrt(2 * n_layers)`), unit norm gains and zero biases.
    pub fn init(config: &ToyLmConfig) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut params = Vec::with_capacity(param_count(config, vocab.len()));
        for (n, init) in layout(config, vocab.len()) {
            for _ in 0..n {
                let v = match init {
                    Init::Normal => INIT_STD * normal(&mut rng),
                    Init::ResidualNormal => resid_std * normal(&mut rng),
                    Init::Zeros => 0.0,
                    Init::Ones => 1.0,
                };
                params.push(lit(v));
            }
        }
        Ok(Self { config: config.clone(), vocab, params })
    }

    pub fn from_params(config: ToyLmConfig, params: Vec<T>) -> Result<Self> {
        config.validate()?;
        let vocab = config.vocab()?;
        let expected = param_count(&config, vocab.len());
        if params.len() != expected {
            return Err(Error::Shape(format!("expected {expected} parameters, got {}", params.len())));
        }
        Ok(Self { config, vocab, params })
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> ToyLm<U> {
        ToyLm {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.iter().map(|p| lit(p.to_f64().unwrap_or(f64::NAN))).collect(),
        }
    }

    pub fn view(&self) -> ParamView<&[T]> {
        view(&self.config, self.vocab.len(), self.params.as_slice())
    }

    pub fn n_layer_states(&self) -> usize {
        self.config.n_layers + 1
    }

    /// Unembedding matrix, `(vocab, d_model)`.
    pub fn unembedding(&self) -> &[T] {
        self.view().lm_head
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(Error::InvalidArgument(format!("token id {bad} outside vocabulary")));
        }
        Ok(())
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardCache<T>> {
        self.forward_packed(&[tokens])
    }

    /// Forward pass over several independent sequences at once; attention
    /// never crosses sequence boundaries.
    pub fn forward_packed(&self, seqs: &[&[u32]]) -> Result<ForwardCache<T>> {
        let mut segments = Vec::with_capacity(seqs.len());
        let mut tokens = Vec::new();
        for s in seqs {
            self.check_tokens(s)?;
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        let cfg = &self.config;
        let (rows, c, heads, v) = (tokens.len(), cfg.d_model, cfg.n_heads, self.vocab.len());
        let att_len: usize = segments.iter().map(|&(_, n)| heads * n * n).sum();
        let p = self.view();

        let mut x0 = vec![T::zero(); rows * c];
        for &(start, len) in &segments {
            for t in 0..len {
                let row = &mut x0[(start + t) * c..(start + t + 1) * c];
                let tok = tokens[start + t] as usize;
                for i in 0..c {
                    row[i] = p.wte[tok * c + i] + p.wpe[t * c + i];
                }
            }
        }

        let mut blocks: Vec<BlockCache<T>> = Vec::with_capacity(cfg.n_layers);
        for bp in &p.blocks {
            let input = blocks.last().map_or(&x0, |b| &b.out);
            let zeros = |n: usize| vec![T::zero(); n];
            let mut b = BlockCache {
                ln1: zeros(rows * c),
                ln1_mean: zeros(rows),
                ln1_rstd: zeros(rows),
                qkv: zeros(rows * 3 * c),
                att: zeros(att_len),
                atty: zeros(rows * c),
                attn_out: zeros(rows * c),
                resid_mid: zeros(rows * c),
                ln2: zeros(rows * c),
                ln2_mean: zeros(rows),
                ln2_rstd: zeros(rows),
                fch: zeros(rows * 4 * c),
                fch_gelu: zeros(rows * 4 * c),
                mlp_out: zeros(rows * c),
                out: zeros(rows * c),
            };
            layernorm_forward(&mut b.ln1, &mut b.ln1_mean, &mut b.ln1_rstd, input, bp.ln1_w, bp.ln1_b, c);
            matmul_forward(&mut b.qkv, &b.ln1, bp.qkv_w, Some(bp.qkv_b), c, 3 * c);
            let mut att_off = 0;
            for &(start, len) in &segments {
                attention_forward(
                    &mut b.atty[start * c..(start + len) * c],
                    &mut b.att[att_off..att_off + heads * len * len],
                    &b.qkv[start * 3 * c..(start + len) * 3 * c],
                    len,
                    c,
                    heads,
                );
                att_off += heads * len * len;
            }
            matmul_forward(&mut b.attn_out, &b.atty, bp.attn_proj_w, Some(bp.attn_proj_b), c, c);
            for i in 0..rows * c {
                b.resid_mid[i] = input[i] + b.attn_out[i];
            }
            layernorm_forward(&mut b.ln2, &mut b.ln2_mean, &mut b.ln2_rstd, &b.resid_mid, bp.ln2_w, bp.ln2_b, c);
            matmul_forward(&mut b.fch, &b.ln2, bp.fc_w, Some(bp.fc_b), c, 4 * c);
            gelu_forward(&mut b.fch_gelu, &b.fch);
            matmul_forward(&mut b.mlp_out, &b.fch_gelu, bp.mlp_proj_w, Some(bp.mlp_proj_b), 4 * c, c);
            for i in 0..rows * c {
                b.out[i] = b.resid_mid[i] + b.mlp_out[i];
            }
            blocks.push(b);
        }

        let last = blocks.last().map_or(&x0, |b| &b.out);
        let mut logits = vec![T::zero(); rows * v];
        matmul_forward(&mut logits, last, p.lm_head, None, c, v);
        Ok(ForwardCache { tokens, segments, d_model: c, vocab: v, x0, blocks, logits })
    }

    /// Next-token logits after the last token, plus that token's state at
    /// every layer.
    pub fn forward_with_states(&self, tokens: &[u32]) -> Result<(Vec<T>, LayerStates<T>)> {
        let cache = self.forward(tokens)?;
        let last = tokens.len() - 1;
        let n = self.n_layer_states();
        let mut states = Vec::with_capacity(n * self.config.d_model);
        for l in 0..n {
            states.extend_from_slice(cache.state(l, last));
        }
        let logits = cache.logits_at(last).to_vec();
        Ok((
            logits,
            LayerStates { n_layer_states: n, d_model: self.config.d_model, token_position: last, states },
        ))
    }

    /// Accumulates parameter gradients of a loss whose gradient with
    /// respect to the logits is `dlogits` (`(seq, vocab)`).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &[T], grads: &mut [T]) {
        let cfg = &self.config;
        let (seq, c, heads, v) = (cache.seq_len(), cfg.d_model, cfg.n_heads, self.vocab.len());
        let p = self.view();
        let g = view(cfg, v, grads);
        let mut dqkv = vec![T::zero(); seq * 3 * c];

        let last = cache.blocks.last().map_or(&cache.x0, |b| &b.out);
        let mut dx = vec![T::zero(); seq * c];
        matmul_backward(&mut dx, g.lm_head, None, dlogits, last, p.lm_head, c, v);

        let mut blocks_g = g.blocks;
        for l in (0..cfg.n_layers).rev() {
            let bp = &p.blocks[l];
            let bg = &mut blocks_g[l];
            let b = &cache.blocks[l];
            let input = if l == 0 { &cache.x0 } else { &cache.blocks[l - 1].out };

            // out = resid_mid + mlp_out
            let mut dresid_mid = dx.clone();
            let mut dfch_gelu = vec![T::zero(); seq * 4 * c];
            matmul_backward(&mut dfch_gelu, bg.mlp_proj_w, Some(&mut *bg.mlp_proj_b), &dx, &b.fch_gelu, bp.mlp_proj_w, 4 * c, c);
            let mut dfch = vec![T::zero(); seq * 4 * c];
            gelu_backward(&mut dfch, &b.fch, &dfch_gelu);
            let mut dln2 = vec![T::zero(); seq * c];
            matmul_backward(&mut dln2, bg.fc_w, Some(&mut *bg.fc_b), &dfch, &b.ln2, bp.fc_w, c, 4 * c);
            layernorm_backward(&mut dresid_mid, bg.ln2_w, bg.ln2_b, &dln2, &b.resid_mid, bp.ln2_w, &b.ln2_mean, &b.ln2_rstd, c);

            // resid_mid = input + attn_out
            let mut dinput = dresid_mid.clone();
            let mut datty = vec![T::zero(); seq * c];
            matmul_backward(&mut datty, bg.attn_proj_w, Some(&mut *bg.attn_proj_b), &dresid_mid, &b.atty, bp.attn_proj_w, c, c);
            dqkv.iter_mut().for_each(|x| *x = T::zero());
            let mut att_off = 0;
            for &(start, len) in &cache.segments {
                attention_backward(
                    &mut dqkv[start * 3 * c..(start + len) * 3 * c],
                    &datty[start * c..(start + len) * c],
                    &b.qkv[start * 3 * c..(start + len) * 3 * c],
                    &b.att[att_off..att_off + heads * len * len],
                    len,
                    c,
                    heads,
                );
                att_off += heads * len * len;
            }
            let mut dln1 = vec![T::zero(); seq * c];
            matmul_backward(&mut dln1, bg.qkv_w, Some(&mut *bg.qkv_b), &dqkv, &b.ln1, bp.qkv_w, c, 3 * c);
            layernorm_backward(&mut dinput, bg.ln1_w, bg.ln1_b, &dln1, input, bp.ln1_w, &b.ln1_mean, &b.ln1_rstd, c);
            dx = dinput;
        }

        for &(start, len) in &cache.segments {
            for t in 0..len {
                let tok = cache.tokens[start + t] as usize;
                let d = &dx[(start + t) * c..(start + t + 1) * c];
                add_into(&mut g.wte[tok * c..(tok + 1) * c], d);
                add_into(&mut g.wpe[t * c..(t + 1) * c], d);
            }
        }
    }

    /// Mean next-token cross-entropy over every target of the batch; when
    /// `grads` is given, its gradient is accumulated there.
    pub fn loss_and_grad(&self, batch: &[Example], grads: Option<&mut [T]>) -> Result<T> {
        let n_targets: usize = batch.iter().map(|ex| ex.targets.iter().flatten().count()).sum();
        if n_targets == 0 {
            return Err(Error::InvalidArgument("batch has no loss targets".into()));
        }
        let inv_n = T::one() / lit::<T>(n_targets as f64);
        let v = self.vocab.len();
        for ex in batch {
            if ex.targets.len() != ex.tokens.len() {
                return Err(Error::Shape("targets and tokens differ in length".into()));
            }
        }
        let seqs: Vec<&[u32]> = batch.iter().map(|ex| ex.tokens.as_slice()).collect();
        let cache = self.forward_packed(&seqs)?;
        let mut dlogits = vec![T::zero(); cache.logits.len()];
        let mut total = T::zero();
        let targets = batch.iter().flat_map(|ex| ex.targets.iter());
        for (row, target) in targets.enumerate() {
            let Some(target) = *target else { continue };
            let mut probs = cache.logits_at(row).to_vec();
            softmax_in_place(&mut probs);
            total = total - probs[target as usize].ln();
            let d = &mut dlogits[row * v..(row + 1) * v];
            for (k, (dk, &pk)) in d.iter_mut().zip(&probs).enumerate() {
                let onehot = if k == target as usize { T::one() } else { T::zero() };
                *dk = (pk - onehot) * inv_n;
            }
        }
        if let Some(g) = grads {
            self.backward(&cache, &dlogits, g);
        }
        Ok(total * inv_n)
    }
}
