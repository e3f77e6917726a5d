//! Activation store: per-layer last-token hidden states for a dataset, with
//! labels and metadata, in a checksummed little-endian binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//!      0     8  magic "ARPSTORE"
//!      8     4  format version (u32, currently 1)
//!     12     4  flags (u32): bit 0 unembedding block present,
//!                            bit 1 final-norm block present
//!     16     4  d_model (u32)
//!     20     4  n_layer_states (u32)
//!     24     8  n_samples (u64)
//!     32     4  num_classes K (u32)
//!     36     1  task kind code
//!     37     1  template variant code (0 compact, 1 spaced)
//!     38     1  digit position (0 ones, 1 tens, 2 hundreds, 0xFF none)
//!     39     1  reserved, zero
//!     40     8  range base (u64, u64::MAX for none)
//!     48        model name         (u32 byte length + UTF-8)
//!               tokenizer fingerprint (u32 byte length + UTF-8)
//!               metadata           (u32 byte length + UTF-8 JSON object)
//!               samples, n_samples times:
//!                 sample id (u64), label (u32), gold token id (u32,
//!                 u32::MAX for none), n_layer_states * d_model f32,
//!                 layer-major (all of layer 0, then layer 1, ...)
//!               [flag bit 0] vocab size V (u32), V token strings
//!                 (u32 length + UTF-8 each), V * d_model f32 row-major
//!               [flag bit 1] norm kind (u8: 0 layer norm, 1 RMS norm),
//!                 eps (f32), d_model f32 gains, then d_model f32 biases
//!                 for layer norm only
//!    end-32    32  SHA-256 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::data::{DigitPosition, TaskKind, TaskLabelSpec, TemplateVariant};
use crate::error::{Error, Result};

pub const STORE_MAGIC: &[u8; 8] = b"ARPSTORE";
pub const STORE_VERSION: u32 = 1;
pub const NO_GOLD_TOKEN: u32 = u32::MAX;
const FLAG_UNEMBEDDING: u32 = 1;
const FLAG_FINAL_NORM: u32 = 2;
const CHECKSUM_LEN: usize = 32;
const FIXED_HEADER_LEN: usize = 48;

#[derive(Clone, Debug, PartialEq)]
pub struct StoreHeader {
    pub model_name: String,
    pub d_model: usize,
    pub n_layer_states: usize,
    pub n_samples: usize,
    pub template: TemplateVariant,
    pub tokenizer_fingerprint: String,
    pub spec: TaskLabelSpec,
    /// Free-form provenance; keys are kept sorted so encoding is stable.
    pub metadata: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreSample {
    pub id: u64,
    pub label: usize,
    pub gold_token: Option<u32>,
    /// `n_layer_states * d_model`, layer-major.
    pub states: Vec<f32>,
}

impl StoreSample {
    pub fn layer(&self, layer: usize, d_model: usize) -> &[f32] {
        &self.states[layer * d_model..(layer + 1) * d_model]
    }
}

/// Unembedding matrix `(vocab, d_model)` with its token strings.
#[derive(Clone, Debug, PartialEq)]
pub struct Unembedding {
    pub vocab: Vec<String>,
    pub weights: Vec<f32>,
}

impl Unembedding {
    pub fn row(&self, token: usize, d_model: usize) -> &[f32] {
        &self.weights[token * d_model..(token + 1) * d_model]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

/// The source model's final normalization, for lenses that apply it.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalNorm {
    pub kind: NormKind,
    pub eps: f32,
    pub weight: Vec<f32>,
    /// Present exactly for [`NormKind::LayerNorm`].
    pub bias: Option<Vec<f32>>,
}

impl FinalNorm {
    pub fn apply(&self, h: &[f32]) -> Vec<f32> {
        let n = h.len() as f64;
        match self.kind {
            NormKind::RmsNorm => {
                let ms = h.iter().map(|&x| (x as f64) * (x as f64)).sum::<f64>() / n;
                let r = 1.0 / (ms + self.eps as f64).sqrt();
                h.iter().zip(&self.weight).map(|(&x, &w)| (x as f64 * r) as f32 * w).collect()
            }
            NormKind::LayerNorm => {
                let mean = h.iter().map(|&x| x as f64).sum::<f64>() / n;
                let var = h.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
                let r = 1.0 / (var + self.eps as f64).sqrt();
                let bias = self.bias.as_deref().unwrap_or(&[]);
                h.iter()
                    .enumerate()
                    .map(|(i, &x)| ((x as f64 - mean) * r) as f32 * self.weight[i] + bias.get(i).copied().unwrap_or(0.0))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationStore {
    pub header: StoreHeader,
    pub samples: Vec<StoreSample>,
    pub unembedding: Option<Unembedding>,
    pub final_norm: Option<FinalNorm>,
}

impl ActivationStore {
    /// Checks every shape and label invariant.
    pub fn validate(&self) -> Result<()> {
        let h = &self.header;
        let width = h.n_layer_states * h.d_model;
        if h.d_model == 0 || h.n_layer_states == 0 {
            return Err(Error::Shape("d_model and n_layer_states must be positive".into()));
        }
        if h.spec.num_classes == 0 {
            return Err(Error::Shape("label schema has zero classes".into()));
        }
        if self.samples.len() != h.n_samples {
            return Err(Error::Shape(format!("header declares {} samples, found {}", h.n_samples, self.samples.len())));
        }
        let vocab_len = self.unembedding.as_ref().map(|u| u.vocab.len());
        for (i, s) in self.samples.iter().enumerate() {
            if s.states.len() != width {
                return Err(Error::Shape(format!("sample {i} has {} floats, expected {width}", s.states.len())));
            }
            if s.label >= h.spec.num_classes {
                return Err(Error::Shape(format!("sample {i} label {} not below K={}", s.label, h.spec.num_classes)));
            }
            if let (Some(g), Some(v)) = (s.gold_token, vocab_len) {
                if g as usize >= v {
                    return Err(Error::Shape(format!("sample {i} gold token {g} outside vocabulary of {v}")));
                }
            }
            if s.gold_token == Some(NO_GOLD_TOKEN) {
                return Err(Error::Shape(format!("sample {i} uses the reserved gold token id")));
            }
        }
        if let Some(u) = &self.unembedding {
            if u.weights.len() != u.vocab.len() * h.d_model {
                return Err(Error::Shape(format!(
                    "unembedding has {} floats for {} tokens of width {}",
                    u.weights.len(),
                    u.vocab.len(),
                    h.d_model
                )));
            }
        }
        if let Some(n) = &self.final_norm {
            let bias_ok = match n.kind {
                NormKind::LayerNorm => n.bias.as_ref().is_some_and(|b| b.len() == h.d_model),
                NormKind::RmsNorm => n.bias.is_none(),
            };
            if n.weight.len() != h.d_model || !bias_ok {
                return Err(Error::Shape("final-norm parameters do not match d_model".into()));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.header.spec.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Row-major `(n_samples, d_model)` matrix of one layer state.
    pub fn layer_matrix(&self, layer: usize) -> Result<Vec<f32>> {
        let d = self.header.d_model;
        if layer >= self.header.n_layer_states {
            return Err(Error::InvalidArgument(format!(
                "layer {layer} out of range 0..{}",
                self.header.n_layer_states
            )));
        }
        let mut out = Vec::with_capacity(self.samples.len() * d);
        for s in &self.samples {
            out.extend_from_slice(s.layer(layer, d));
        }
        Ok(out)
    }

    /// Same store with labels permuted by a seeded shuffle (null-signal
    /// controls).
    pub fn with_shuffled_labels(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut labels = self.labels();
        labels.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (s, y) in out.samples.iter_mut().zip(labels) {
            s.label = y;
        }
        out
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let h = &self.header;
        let floats = self.samples.len() * h.n_layer_states * h.d_model
            + self.unembedding.as_ref().map_or(0, |u| u.weights.len());
        let mut w = Vec::with_capacity(FIXED_HEADER_LEN + 256 + 16 * self.samples.len() + 4 * floats);
        let mut flags = 0u32;
        if self.unembedding.is_some() {
            flags |= FLAG_UNEMBEDDING;
        }
        if self.final_norm.is_some() {
            flags |= FLAG_FINAL_NORM;
        }
        w.extend_from_slice(STORE_MAGIC);
        put_u32(&mut w, STORE_VERSION);
        put_u32(&mut w, flags);
        put_u32(&mut w, h.d_model as u32);
        put_u32(&mut w, h.n_layer_states as u32);
        w.extend_from_slice(&(h.n_samples as u64).to_le_bytes());
        put_u32(&mut w, h.spec.num_classes as u32);
        w.push(h.spec.task_kind.code());
        w.push(h.template.code());
        w.push(h.spec.position.map_or(0xFF, |p| p.index() as u8));
        w.push(0);
        w.extend_from_slice(&h.spec.range_base.unwrap_or(u64::MAX).to_le_bytes());
        put_str(&mut w, &h.model_name);
        put_str(&mut w, &h.tokenizer_fingerprint);
        put_str(&mut w, &serde_json::to_string(&h.metadata)?);
        for s in &self.samples {
            w.extend_from_slice(&s.id.to_le_bytes());
            put_u32(&mut w, s.label as u32);
            put_u32(&mut w, s.gold_token.unwrap_or(NO_GOLD_TOKEN));
            put_f32s(&mut w, &s.states);
        }
        if let Some(u) = &self.unembedding {
            put_u32(&mut w, u.vocab.len() as u32);
            for tok in &u.vocab {
                put_str(&mut w, tok);
            }
            put_f32s(&mut w, &u.weights);
        }
        if let Some(n) = &self.final_norm {
            w.push(match n.kind {
                NormKind::LayerNorm => 0,
                NormKind::RmsNorm => 1,
            });
            w.extend_from_slice(&n.eps.to_le_bytes());
            put_f32s(&mut w, &n.weight);
            if let Some(b) = &n.bias {
                put_f32s(&mut w, b);
            }
        }
        let digest = Sha256::digest(&w);
        w.extend_from_slice(&digest);
        Ok(w)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_HEADER_LEN + CHECKSUM_LEN {
            return Err(Error::Format(format!("store truncated: {} bytes", bytes.len())));
        }
        let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        let mut r = Reader { buf: body, pos: 0 };
        let (header, flags) = read_header_fields(&mut r)?;
        let digest = Sha256::digest(body);
        if digest.as_slice() != trailer {
            return Err(Error::Checksum { expected: hex::encode(trailer), found: hex::encode(digest) });
        }
        let width = header.n_layer_states * header.d_model;
        let mut samples = Vec::with_capacity(header.n_samples.min(body.len() / (16 + 4 * width.max(1))));
        for _ in 0..header.n_samples {
            let id = r.u64()?;
            let label = r.u32()? as usize;
            let gold = r.u32()?;
            let states = r.f32s(width)?;
            samples.push(StoreSample { id, label, gold_token: (gold != NO_GOLD_TOKEN).then_some(gold), states });
        }
        let unembedding = if flags & FLAG_UNEMBEDDING != 0 {
            let v = r.u32()? as usize;
            let vocab = (0..v).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
            let weights = r.f32s(v * header.d_model)?;
            Some(Unembedding { vocab, weights })
        } else {
            None
        };
        let final_norm = if flags & FLAG_FINAL_NORM != 0 {
            let kind = match r.u8()? {
                0 => NormKind::LayerNorm,
                1 => NormKind::RmsNorm,
                k => return Err(Error::Format(format!("unknown norm kind {k}"))),
            };
            let eps = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
            let weight = r.f32s(header.d_model)?;
            let bias = match kind {
                NormKind::LayerNorm => Some(r.f32s(header.d_model)?),
                NormKind::RmsNorm => None,
            };
            Some(FinalNorm { kind, eps, weight, bias })
        } else {
            None
        };
        if r.pos != body.len() {
            return Err(Error::Format(format!("{} trailing bytes before checksum", body.len() - r.pos)));
        }
        let store = Self { header, samples, unembedding, final_norm };
        store.validate()?;
        Ok(store)
    }

    /// Header and per-class counts as printable text.
    pub fn summary(&self) -> String {
        let h = &self.header;
        let mut s = String::new();
        let _ = writeln!(s, "model:            {}", h.model_name);
        let _ = writeln!(s, "task:             {} (K = {})", h.spec.tag(), h.spec.num_classes);
        let _ = writeln!(s, "d_model:          {}", h.d_model);
        let _ = writeln!(s, "layer states:     {}", h.n_layer_states);
        let _ = writeln!(s, "samples:          {}", h.n_samples);
        let _ = writeln!(s, "template:         {}", h.template);
        let _ = writeln!(s, "tokenizer:        {}", h.tokenizer_fingerprint);
        let _ = writeln!(
            s,
            "unembedding:      {}",
            self.unembedding.as_ref().map_or("absent".to_string(), |u| format!("{} tokens", u.vocab.len()))
        );
        let _ = writeln!(
            s,
            "final norm:       {}",
            self.final_norm.as_ref().map_or("absent".to_string(), |n| format!("{:?}", n.kind))
        );
        for (k, v) in &h.metadata {
            let _ = writeln!(s, "meta.{k}: {v}");
        }
        let _ = writeln!(s, "class counts:");
        for (c, n) in self.class_counts().iter().enumerate() {
            let _ = writeln!(s, "  {c}: {n}");
        }
        s
    }
}

/// Parse only the header, without touching (or verifying) sample data.
pub fn read_header(bytes: &[u8]) -> Result<StoreHeader> {
    let mut r = Reader { buf: bytes, pos: 0 };
    read_header_fields(&mut r).map(|(h, _)| h)
}

pub fn write_store(store: &ActivationStore, path: &Path) -> Result<()> {
    fs::write(path, store.encode()?).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: &Path) -> Result<ActivationStore> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    ActivationStore::decode(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

fn read_header_fields(r: &mut Reader<'_>) -> Result<(StoreHeader, u32)> {
    if r.take(8)? != STORE_MAGIC {
        return Err(Error::Format("not an activation store (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != STORE_VERSION {
        return Err(Error::Version { found: version, supported: STORE_VERSION });
    }
    let flags = r.u32()?;
    if flags & !(FLAG_UNEMBEDDING | FLAG_FINAL_NORM) != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    let d_model = r.u32()? as usize;
    let n_layer_states = r.u32()? as usize;
    let n_samples = usize::try_from(r.u64()?).map_err(|_| Error::Format("sample count overflows".into()))?;
    let num_classes = r.u32()? as usize;
    let task_kind = TaskKind::from_code(r.u8()?)?;
    let template = TemplateVariant::from_code(r.u8()?)?;
    let position = match r.u8()? {
        0xFF => None,
        p => Some(DigitPosition::from_index(p as usize).map_err(|_| Error::Format(format!("bad digit position {p}")))?),
    };
    r.u8()?;
    let range_base = match r.u64()? {
        u64::MAX => None,
        b => Some(b),
    };
    let model_name = r.string()?;
    let tokenizer_fingerprint = r.string()?;
    let metadata: BTreeMap<String, Value> = serde_json::from_str(&r.string()?)
        .map_err(|e| Error::Format(format!("store metadata is not a JSON object: {e}")))?;
    let spec = TaskLabelSpec { task_kind, num_classes, position, range_base };
    Ok((
        StoreHeader { model_name, d_model, n_layer_states, n_samples, template, tokenizer_fingerprint, spec, metadata },
        flags,
    ))
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_str(w: &mut Vec<u8>, s: &str) {
    put_u32(w, s.len() as u32);
    w.extend_from_slice(s.as_bytes());
}

fn put_f32s(w: &mut Vec<u8>, v: &[f32]) {
    for x in v {
        w.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("store truncated: need {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("float count overflows".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}
