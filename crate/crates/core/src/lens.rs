//! Logit lens: project each layer state through the unembedding and follow
//! the gold token's rank across depth.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::ActivationStore;

/// `h · W_Uᵀ` for a row-major `(|V|, d)` unembedding.
pub fn lens_logits(h: &[f32], unembedding: &[f32]) -> Result<Vec<f32>> {
    let d = h.len();
    if d == 0 || !unembedding.len().is_multiple_of(d) {
        return Err(Error::Shape(format!(
            "unembedding of {} floats does not split into rows of width {d}",
            unembedding.len()
        )));
    }
    Ok(unembedding
        .chunks_exact(d)
        .map(|row| row.iter().zip(h).map(|(&w, &x)| w as f64 * x as f64).sum::<f64>() as f32)
        .collect())
}

/// 1-based rank of `gold` under the total order (logit descending, token
/// id ascending).
pub fn gold_rank(logits: &[f32], gold: usize) -> Result<usize> {
    let g = *logits
        .get(gold)
        .ok_or_else(|| Error::InvalidArgument(format!("gold token {gold} outside {} logits", logits.len())))?;
    let ahead = logits.iter().enumerate().filter(|&(i, &x)| x > g || (x == g && i < gold)).count();
    Ok(1 + ahead)
}

/// Whether the lens applies the source model's final normalization to
/// every layer state before unembedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LensNorm {
    #[default]
    Raw,
    FinalNorm,
}

impl LensNorm {
    pub fn name(self) -> &'static str {
        match self {
            LensNorm::Raw => "raw",
            LensNorm::FinalNorm => "final_norm",
        }
    }
}

impl std::str::FromStr for LensNorm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw" | "none" => Ok(LensNorm::Raw),
            "final_norm" | "final-norm" | "norm" => Ok(LensNorm::FinalNorm),
            other => Err(Error::InvalidArgument(format!("unknown lens normalization `{other}`"))),
        }
    }
}

/// Lens trace of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensResult {
    pub sample_id: u64,
    pub gold_token: u32,
    /// Gold rank at every layer state.
    pub ranks: Vec<usize>,
    /// Top-1 token at every layer state.
    pub top1: Vec<u32>,
    /// Minimal layer with rank 1, `None` for never.
    pub earliest_top1: Option<usize>,
}

/// Earliest-top-1 counts over layer states plus the never bucket.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LensHistogram {
    pub n_layer_states: usize,
    /// `counts[l]` samples first reach rank 1 at layer `l`.
    pub counts: Vec<usize>,
    pub never: usize,
    pub n_samples: usize,
    pub norm: LensNorm,
}

impl LensHistogram {
    /// Layer with the most first-top-1 samples (lowest on ties); `None`
    /// when no sample ever reaches rank 1.
    pub fn modal_layer(&self) -> Option<usize> {
        let max = *self.counts.iter().max()?;
        (max > 0).then(|| self.counts.iter().position(|&c| c == max).expect("max present"))
    }

    pub fn share(&self, layer: usize) -> f64 {
        self.counts[layer] as f64 / self.n_samples.max(1) as f64
    }
}

/// Per-sample lens traces and their histogram.
pub fn earliest_top1(store: &ActivationStore, norm: LensNorm) -> Result<(LensHistogram, Vec<LensResult>)> {
    let u = store
        .unembedding
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("store has no unembedding block; the lens needs one".into()))?;
    let final_norm = match norm {
        LensNorm::Raw => None,
        LensNorm::FinalNorm => Some(store.final_norm.as_ref().ok_or_else(|| {
            Error::InvalidArgument("final-norm lens requested but the store has no final-norm block".into())
        })?),
    };
    let (d, layers) = (store.header.d_model, store.header.n_layer_states);
    let results = store
        .samples
        .par_iter()
        .map(|s| {
            let gold = s
                .gold_token
                .ok_or_else(|| Error::InvalidArgument(format!("sample {} has no gold token", s.id)))?;
            let mut ranks = Vec::with_capacity(layers);
            let mut top1 = Vec::with_capacity(layers);
            for l in 0..layers {
                let h = s.layer(l, d);
                let logits = match final_norm {
                    Some(n) => lens_logits(&n.apply(h), &u.weights)?,
                    None => lens_logits(h, &u.weights)?,
                };
                ranks.push(gold_rank(&logits, gold as usize)?);
                top1.push(crate::toylm::kernels::argmax(&logits) as u32);
            }
            let earliest_top1 = ranks.iter().position(|&r| r == 1);
            Ok(LensResult { sample_id: s.id, gold_token: gold, ranks, top1, earliest_top1 })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0; layers];
    let mut never = 0;
    for r in &results {
        match r.earliest_top1 {
            Some(l) => counts[l] += 1,
            None => never += 1,
        }
    }
    let hist = LensHistogram { n_layer_states: layers, counts, never, n_samples: results.len(), norm };
    Ok((hist, results))
}

/// Which layer states a histogram CSV covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerWindow {
    All,
    /// The last `n` layer states.
    Last(usize),
}

impl std::str::FromStr for LayerWindow {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "all" {
            return Ok(LayerWindow::All);
        }
        s.strip_prefix("last")
            .and_then(|n| n.parse().ok())
            .filter(|&n: &usize| n > 0)
            .map(LayerWindow::Last)
            .ok_or_else(|| Error::InvalidArgument(format!("layer window must be `all` or `lastN`, got `{s}`")))
    }
}

/// Histogram CSV over one or more stores of the same model shape (one per
/// seed): `layer,mean_count,mean_share,count_<i>...`, with a final `never`
/// row. Layers outside the window are left out of the rows but still count
/// toward `never`-free totals.
pub fn histogram_csv(hists: &[LensHistogram], window: LayerWindow) -> Result<String> {
    let first = hists.first().ok_or_else(|| Error::InvalidArgument("no histograms given".into()))?;
    if hists.iter().any(|h| h.n_layer_states != first.n_layer_states) {
        return Err(Error::Shape("histograms differ in layer count".into()));
    }
    let layers = first.n_layer_states;
    let start = match window {
        LayerWindow::All => 0,
        LayerWindow::Last(n) => layers.saturating_sub(n),
    };
    let k = hists.len() as f64;
    let mut s = String::from("layer,mean_count,mean_share");
    for i in 0..hists.len() {
        let _ = write!(s, ",count_{i}");
    }
    s.push('\n');
    let mut row = |label: String, counts: Vec<usize>| {
        let mean = counts.iter().sum::<usize>() as f64 / k;
        let share = hists.iter().zip(&counts).map(|(h, &c)| c as f64 / h.n_samples.max(1) as f64).sum::<f64>() / k;
        let _ = write!(s, "{label},{mean:.6},{share:.6}");
        for c in counts {
            let _ = write!(s, ",{c}");
        }
        s.push('\n');
    };
    for l in start..layers {
        row(l.to_string(), hists.iter().map(|h| h.counts[l]).collect());
    }
    row("never".into(), hists.iter().map(|h| h.never).collect());
    Ok(s)
}

/// Reads a histogram CSV back into per-store histograms; only the rows
/// present in the file are recovered, other layers count zero.
pub fn histogram_from_csv(text: &str, n_layer_states: Option<usize>) -> Result<Vec<LensHistogram>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty histogram CSV".into()))?.split(',').collect();
    if header.len() < 4 || header[..3] != ["layer", "mean_count", "mean_share"] {
        return Err(Error::Format("histogram CSV header must start with layer,mean_count,mean_share".into()));
    }
    let n_hist = header.len() - 3;
    let mut rows = Vec::new();
    let mut never = vec![0usize; n_hist];
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != header.len() {
            return Err(Error::Format(format!("histogram row `{line}` has {} columns", cols.len())));
        }
        let counts = cols[3..]
            .iter()
            .map(|c| c.parse::<usize>().map_err(|_| Error::Format(format!("bad count `{c}`"))))
            .collect::<Result<Vec<_>>>()?;
        if cols[0] == "never" {
            never = counts;
        } else {
            let l: usize = cols[0].parse().map_err(|_| Error::Format(format!("bad layer `{}`", cols[0])))?;
            rows.push((l, counts));
        }
    }
    let layers = n_layer_states.unwrap_or_else(|| rows.iter().map(|(l, _)| l + 1).max().unwrap_or(0));
    (0..n_hist)
        .map(|i| {
            let mut counts = vec![0; layers];
            for (l, c) in &rows {
                *counts.get_mut(*l).ok_or_else(|| Error::Format(format!("layer {l} beyond {layers}")))? = c[i];
            }
            let n_samples = counts.iter().sum::<usize>() + never[i];
            Ok(LensHistogram { n_layer_states: layers, counts, never: never[i], n_samples, norm: LensNorm::Raw })
        })
        .collect()
}
