//! Linear probes: one affine softmax classifier per (layer state, task),
//! trained with cross-entropy and aggregated into layer-wise accuracy curves.
//!
//! All probe arithmetic runs in `f64` on the stored `f32` states.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data::{split_stratified, SplitName, SplitRatio, Splits, TaskKind, TaskLabelSpec};
use crate::error::{Error, Result};
use crate::store::ActivationStore;

/// Per-feature affine map applied before the probe when standardization is
/// enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(x: &[f64], d: usize, rows: &[usize]) -> Self {
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for &r in rows {
            for (m, v) in mean.iter_mut().zip(&x[r * d..(r + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for &r in rows {
            for ((s, v), m) in var.iter_mut().zip(&x[r * d..(r + 1) * d]).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let inv_std = var.iter().map(|s| 1.0 / ((s / n).sqrt() + 1e-8)).collect();
        Self { mean, inv_std }
    }

    fn apply(&self, x: &mut [f64]) {
        let d = self.mean.len();
        for row in x.chunks_exact_mut(d) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.inv_std) {
                *v = (*v - m) * s;
            }
        }
    }
}

/// `softmax(W h + b)` over `K` classes for one layer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearProbe {
    pub num_classes: usize,
    pub d_model: usize,
    /// Row-major `(K, d_model)`.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub layer: usize,
    pub spec: TaskLabelSpec,
    pub train_seed: u64,
    pub standardizer: Option<Standardizer>,
}

impl LinearProbe {
    pub fn zeros(spec: TaskLabelSpec, d_model: usize, layer: usize, train_seed: u64) -> Self {
        let k = spec.num_classes;
        Self {
            num_classes: k,
            d_model,
            weight: vec![0.0; k * d_model],
            bias: vec![0.0; k],
            layer,
            spec,
            train_seed,
            standardizer: None,
        }
    }

    /// Raw class scores `W h + b` (no standardization applied).
    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.d_model;
        self.bias
            .iter()
            .enumerate()
            .map(|(k, b)| b + self.weight[k * d..(k + 1) * d].iter().zip(h).map(|(w, x)| w * x).sum::<f64>())
            .collect()
    }

    fn prepare(&self, h: &[f32]) -> Result<Vec<f64>> {
        if h.len() != self.d_model {
            return Err(Error::Shape(format!("probe expects width {}, got {}", self.d_model, h.len())));
        }
        let mut x: Vec<f64> = h.iter().map(|&v| v as f64).collect();
        if let Some(s) = &self.standardizer {
            s.apply(&mut x);
        }
        Ok(x)
    }

    /// Predicted class, lowest index on ties.
    pub fn predict(&self, h: &[f32]) -> Result<usize> {
        Ok(argmax(&self.logits(&self.prepare(h)?)))
    }
}

/// Class probabilities of a probe for one hidden state.
pub fn probe_forward(probe: &LinearProbe, h: &[f32]) -> Result<Vec<f64>> {
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite hidden state".into()));
    }
    let mut p = probe.logits(&probe.prepare(h)?);
    softmax(&mut p);
    Ok(p)
}

/// Parameter gradients of the mean cross-entropy.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeGradient {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

/// Mean cross-entropy of the probe on the rows `rows` of the row-major
/// `(n, d)` matrix `x`, with its gradient.
pub fn cross_entropy_grad(probe: &LinearProbe, x: &[f64], y: &[usize], rows: &[usize]) -> (f64, ProbeGradient) {
    let (k, d) = (probe.num_classes, probe.d_model);
    let mut grad = ProbeGradient { weight: vec![0.0; k * d], bias: vec![0.0; k] };
    if rows.is_empty() {
        return (0.0, grad);
    }
    let inv_n = 1.0 / rows.len() as f64;
    let mut loss = 0.0;
    for &r in rows {
        let h = &x[r * d..(r + 1) * d];
        let mut p = probe.logits(h);
        let lse = log_sum_exp(&p);
        loss += lse - p[y[r]];
        for v in p.iter_mut() {
            *v = (*v - lse).exp();
        }
        p[y[r]] -= 1.0;
        for (c, g) in p.iter().enumerate() {
            let g = g * inv_n;
            grad.bias[c] += g;
            for (gw, hv) in grad.weight[c * d..(c + 1) * d].iter_mut().zip(h) {
                *gw += g * hv;
            }
        }
    }
    (loss * inv_n, grad)
}

/// Mean cross-entropy only.
pub fn cross_entropy(probe: &LinearProbe, x: &[f64], y: &[usize], rows: &[usize]) -> f64 {
    let d = probe.d_model;
    let total: f64 = rows
        .iter()
        .map(|&r| {
            let p = probe.logits(&x[r * d..(r + 1) * d]);
            log_sum_exp(&p) - p[y[r]]
        })
        .sum();
    total / rows.len().max(1) as f64
}

/// Probe training protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Mini-batch size; `None` trains full-batch (one step per epoch).
    pub batch_size: Option<usize>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Standardize features with train-split statistics.
    pub standardize: bool,
    pub seeds: Vec<u64>,
    pub split: SplitRatio,
    pub plateau_fraction: f64,
    /// Onset accuracy must exceed chance by more than this.
    pub chance_margin: f64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            learning_rate: 1e-3,
            batch_size: Some(32),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            standardize: false,
            seeds: (42..=46).collect(),
            split: SplitRatio::default(),
            plateau_fraction: 0.95,
            chance_margin: 0.2,
        }
    }
}

impl ProbeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("probe epochs must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("bad probe learning rate {}", self.learning_rate)));
        }
        if self.batch_size == Some(0) {
            return Err(Error::InvalidArgument("probe batch size must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::InvalidArgument("at least one probe seed is required".into()));
        }
        if !(0.0..=1.0).contains(&self.plateau_fraction) {
            return Err(Error::InvalidArgument(format!("plateau fraction {} outside [0, 1]", self.plateau_fraction)));
        }
        Ok(())
    }
}

/// One layer state of a store as an `f64` design matrix with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerData {
    pub d_model: usize,
    /// Row-major `(n, d_model)`.
    pub x: Vec<f64>,
    pub y: Vec<usize>,
    pub spec: TaskLabelSpec,
    pub layer: usize,
}

impl LayerData {
    pub fn from_store(store: &ActivationStore, layer: usize) -> Result<Self> {
        let x = store.layer_matrix(layer)?.into_iter().map(f64::from).collect();
        Ok(Self { d_model: store.header.d_model, x, y: store.labels(), spec: store.header.spec, layer })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn splits(&self, ratio: SplitRatio, seed: u64) -> Result<Splits> {
        split_stratified(&self.y, self.spec.num_classes, ratio, seed)
    }
}

/// A trained probe plus the checkpoint bookkeeping behind it.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainedProbe {
    pub probe: LinearProbe,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub val_accuracy: f64,
    /// Mean train cross-entropy at the end of each epoch.
    pub train_loss: Vec<f64>,
}

/// Fits a zero-initialized probe on `train` rows with Adam and keeps the
/// epoch with the best accuracy on `val` rows (earliest on ties).
pub fn train_probe_rows(
    data: &LayerData,
    train: &[usize],
    val: &[usize],
    config: &ProbeTrainConfig,
    seed: u64,
) -> Result<TrainedProbe> {
    config.validate()?;
    let k = data.spec.num_classes;
    let d = data.d_model;
    let mut present = vec![false; k];
    for &r in train {
        present[data.y[r]] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument(format!(
            "training split for {} at layer {} has fewer than two classes",
            data.spec.tag(),
            data.layer
        )));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("validation split is empty".into()));
    }

    let standardizer = config.standardize.then(|| Standardizer::fit(&data.x, d, train));
    let x_owned;
    let x: &[f64] = match &standardizer {
        Some(s) => {
            let mut copy = data.x.clone();
            s.apply(&mut copy);
            x_owned = copy;
            &x_owned
        }
        None => &data.x,
    };

    let mut probe = LinearProbe::zeros(data.spec, d, data.layer, seed);
    let n_params = k * d + k;
    let (mut m, mut v) = (vec![0.0; n_params], vec![0.0; n_params]);
    let mut t = 0i32;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f62_6500);
    let mut order = train.to_vec();
    let batch = config.batch_size.unwrap_or(order.len()).min(order.len());
    let mut best: Option<(f64, usize, Vec<f64>, Vec<f64>)> = None;
    let mut train_loss = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(batch) {
            let (_, grad) = cross_entropy_grad(&probe, x, &data.y, chunk);
            t += 1;
            let bc1 = 1.0 - config.beta1.powi(t);
            let bc2 = 1.0 - config.beta2.powi(t);
            let params = probe.weight.iter_mut().chain(probe.bias.iter_mut());
            let grads = grad.weight.iter().chain(&grad.bias);
            for (i, (p, &g)) in params.zip(grads).enumerate() {
                let g = g + config.weight_decay * *p;
                m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g;
                v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g * g;
                *p -= config.learning_rate * (m[i] / bc1) / ((v[i] / bc2).sqrt() + config.adam_eps);
            }
        }
        let loss = cross_entropy(&probe, x, &data.y, train);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "probe loss diverged for {} at layer {} epoch {epoch}",
                data.spec.tag(),
                data.layer
            )));
        }
        train_loss.push(loss);
        let acc = accuracy_rows(&probe, x, &data.y, val);
        if best.as_ref().is_none_or(|(b, ..)| acc > *b) {
            best = Some((acc, epoch, probe.weight.clone(), probe.bias.clone()));
        }
    }

    let (val_accuracy, best_epoch, weight, bias) = best.expect("at least one epoch");
    probe.weight = weight;
    probe.bias = bias;
    probe.standardizer = standardizer;
    Ok(TrainedProbe { probe, best_epoch, val_accuracy, train_loss })
}

/// Splits the store's labels with `seed`, then trains on the train split and
/// selects the checkpoint on the validation split.
pub fn train_probe(
    store: &ActivationStore,
    layer: usize,
    config: &ProbeTrainConfig,
    seed: u64,
) -> Result<(TrainedProbe, Splits)> {
    let data = LayerData::from_store(store, layer)?;
    let splits = data.splits(config.split, seed)?;
    let trained = train_probe_rows(&data, &splits.train, &splits.val, config, seed)?;
    Ok((trained, splits))
}

fn accuracy_rows(probe: &LinearProbe, x: &[f64], y: &[usize], rows: &[usize]) -> f64 {
    let d = probe.d_model;
    let correct = rows.iter().filter(|&&r| argmax(&probe.logits(&x[r * d..(r + 1) * d])) == y[r]).count();
    correct as f64 / rows.len().max(1) as f64
}

/// Accuracy of a trained probe on a split of a store's layer. The probe's
/// own standardizer, if any, is applied.
pub fn eval_probe(probe: &LinearProbe, store: &ActivationStore, layer: usize, rows: &[usize]) -> Result<f64> {
    if rows.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate on an empty split".into()));
    }
    let d = store.header.d_model;
    let mut correct = 0usize;
    for &r in rows {
        let s = store
            .samples
            .get(r)
            .ok_or_else(|| Error::InvalidArgument(format!("row {r} outside store of {}", store.samples.len())))?;
        if probe.predict(s.layer(layer, d))? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / rows.len() as f64)
}

/// Outcome of one (layer, seed) job.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub accuracy: f64,
    pub val_accuracy: f64,
    pub best_epoch: usize,
}

/// Aggregated accuracies of one layer state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerPoint {
    pub layer: usize,
    pub mean: f64,
    /// Half-width of the two-sided 95% Student-t interval over seeds.
    pub ci95: f64,
    pub per_seed: Vec<SeedResult>,
    /// Set when any seed of this layer failed; `mean` is then NaN.
    pub error: Option<String>,
}

/// Layer-wise probe accuracy for one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerCurve {
    pub spec: TaskLabelSpec,
    pub chance: f64,
    pub seeds: Vec<u64>,
    pub points: Vec<LayerPoint>,
}

/// Mean and 95% Student-t half-width; the half-width is 0 for fewer than
/// two values.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    if var == 0.0 {
        return (mean, 0.0);
    }
    let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom").inverse_cdf(0.975);
    (mean, t * (var / n as f64).sqrt())
}

impl LayerPoint {
    fn aggregate(layer: usize, results: Vec<Result<SeedResult>>) -> Self {
        let mut per_seed = Vec::with_capacity(results.len());
        let mut errors = Vec::new();
        for r in results {
            match r {
                Ok(s) => per_seed.push(s),
                Err(e) => errors.push(e.to_string()),
            }
        }
        if errors.is_empty() {
            let accs: Vec<f64> = per_seed.iter().map(|s| s.accuracy).collect();
            let (mean, ci95) = mean_ci95(&accs);
            Self { layer, mean, ci95, per_seed, error: None }
        } else {
            Self { layer, mean: f64::NAN, ci95: f64::NAN, per_seed, error: Some(errors.join("; ")) }
        }
    }
}

impl LayerCurve {
    /// Builds a curve from per-layer accuracy means (one synthetic seed per
    /// layer); mainly for constructing reports by hand.
    pub fn from_means(spec: TaskLabelSpec, means: &[f64]) -> Self {
        let points = means
            .iter()
            .enumerate()
            .map(|(layer, &m)| LayerPoint {
                layer,
                mean: m,
                ci95: 0.0,
                per_seed: vec![SeedResult { seed: 0, accuracy: m, val_accuracy: m, best_epoch: 0 }],
                error: None,
            })
            .collect();
        Self { spec, chance: 1.0 / spec.num_classes as f64, seeds: vec![0], points }
    }

    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// See [`onset_layer`].
    pub fn onset(&self, plateau_fraction: f64, chance_margin: f64) -> Option<usize> {
        onset_layer(&self.means(), self.chance, plateau_fraction, chance_margin)
    }

    /// Index of the best layer (lowest on ties), ignoring failed layers.
    pub fn best_layer(&self) -> Option<usize> {
        let means = self.means();
        let finite: Vec<f64> = means.iter().map(|m| if m.is_finite() { *m } else { f64::NEG_INFINITY }).collect();
        finite.iter().any(|m| m.is_finite()).then(|| argmax(&finite))
    }

    /// Curve name used for file names and CSV rows, e.g. `carry_pos-tens`.
    pub fn file_stem(&self) -> String {
        self.spec.tag().replace('/', "-")
    }

    /// One row per layer: `task,layer,mean,ci95,chance,seed_<s>...`, with
    /// six decimals everywhere.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("task,layer,mean,ci95,chance");
        for seed in &self.seeds {
            let _ = write!(s, ",seed_{seed}");
        }
        s.push('\n');
        let tag = self.spec.tag();
        for p in &self.points {
            let _ = write!(s, "{tag},{},{},{},{:.6}", p.layer, fmt6(p.mean), fmt6(p.ci95), self.chance);
            for seed in &self.seeds {
                let acc = p.per_seed.iter().find(|r| r.seed == *seed).map_or(f64::NAN, |r| r.accuracy);
                let _ = write!(s, ",{}", fmt6(acc));
            }
            s.push('\n');
        }
        s
    }

    /// Raw per-seed results, one JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut s = String::new();
        let tag = self.spec.tag();
        for p in &self.points {
            for r in &p.per_seed {
                let line = serde_json::json!({
                    "task": tag,
                    "layer": p.layer,
                    "seed": r.seed,
                    "accuracy": r.accuracy,
                    "val_accuracy": r.val_accuracy,
                    "best_epoch": r.best_epoch,
                });
                s.push_str(&serde_json::to_string(&line)?);
                s.push('\n');
            }
            if let Some(e) = &p.error {
                s.push_str(&serde_json::to_string(&serde_json::json!({ "task": tag, "layer": p.layer, "error": e }))?);
                s.push('\n');
            }
        }
        Ok(s)
    }

    /// Parses the CSV written by [`LayerCurve::to_csv`]. Validation accuracy
    /// and best epoch are not part of the CSV and read back as NaN and 0.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Format("empty curve CSV".into()))?.split(',').collect();
        if header.len() < 5 || header[..5] != ["task", "layer", "mean", "ci95", "chance"] {
            return Err(Error::Format("curve CSV header must start with task,layer,mean,ci95,chance".into()));
        }
        let seeds = header[5..]
            .iter()
            .map(|h| {
                h.strip_prefix("seed_")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Format(format!("bad seed column `{h}`")))
            })
            .collect::<Result<Vec<u64>>>()?;
        let mut spec = None;
        let mut chance = f64::NAN;
        let mut points = Vec::new();
        for (i, line) in lines.enumerate() {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != header.len() {
                return Err(Error::Format(format!("curve CSV row {} has {} columns", i + 2, cols.len())));
            }
            let num = |s: &str| -> Result<f64> {
                s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}` in curve CSV row {}", i + 2)))
            };
            spec.get_or_insert(parse_tag(cols[0])?);
            chance = num(cols[4])?;
            let layer = cols[1].parse().map_err(|_| Error::Format(format!("bad layer `{}`", cols[1])))?;
            let per_seed = seeds
                .iter()
                .zip(&cols[5..])
                .map(|(&seed, c)| {
                    Ok(SeedResult { seed, accuracy: num(c)?, val_accuracy: f64::NAN, best_epoch: 0 })
                })
                .collect::<Result<Vec<_>>>()?;
            points.push(LayerPoint { layer, mean: num(cols[2])?, ci95: num(cols[3])?, per_seed, error: None });
        }
        let spec = spec.ok_or_else(|| Error::Format("curve CSV has no rows".into()))?;
        Ok(Self { spec, chance, seeds, points })
    }
}

/// Inverse of [`TaskLabelSpec::tag`].
pub fn parse_tag(tag: &str) -> Result<TaskLabelSpec> {
    let mut parts = tag.split(['/', '-']);
    let kind: TaskKind = parts.next().unwrap_or_default().parse()?;
    let mut spec = TaskLabelSpec::new(kind);
    for part in parts {
        if let Ok(base) = part.parse::<u64>() {
            spec = spec.with_range_base(base);
        } else {
            spec = spec.at(part.parse()?);
        }
    }
    Ok(spec)
}

fn fmt6(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "nan".to_string()
    }
}

/// Shallowest layer at which decodability reaches and keeps a plateau.
///
/// With `bound = plateau_fraction * max(means)` and `peak` the first layer
/// attaining the maximum, the candidate is the smallest `l <= peak` such that
/// every mean in `l..=peak` is at least `bound`. The onset is the first layer
/// from the candidate up to `peak` whose mean exceeds `chance +
/// chance_margin`; `None` if there is none. Non-finite means never qualify.
pub fn onset_layer(means: &[f64], chance: f64, plateau_fraction: f64, chance_margin: f64) -> Option<usize> {
    let finite: Vec<f64> = means.iter().map(|m| if m.is_finite() { *m } else { f64::NEG_INFINITY }).collect();
    if !finite.iter().any(|m| m.is_finite()) {
        return None;
    }
    let peak = argmax(&finite);
    let bound = plateau_fraction * finite[peak];
    let mut start = peak;
    while start > 0 && finite[start - 1] >= bound {
        start -= 1;
    }
    (start..=peak).find(|&l| finite[l] > chance + chance_margin)
}

/// Per-layer, per-seed probe accuracies for one store.
pub fn layer_sweep(store: &ActivationStore, config: &ProbeTrainConfig) -> Result<LayerCurve> {
    config.validate()?;
    let layers = store.header.n_layer_states;
    let data: Vec<Result<LayerData>> = (0..layers).map(|l| LayerData::from_store(store, l)).collect();
    let splits: Vec<(u64, Result<Splits>)> = config
        .seeds
        .iter()
        .map(|&s| (s, split_stratified(&store.labels(), store.header.spec.num_classes, config.split, s)))
        .collect();
    let jobs: Vec<(usize, usize)> = (0..layers).flat_map(|l| (0..splits.len()).map(move |s| (l, s))).collect();
    let results: Vec<Result<SeedResult>> = jobs
        .par_iter()
        .map(|&(l, si)| {
            let (seed, split) = &splits[si];
            let data = data[l].as_ref().map_err(clone_err)?;
            let split = split.as_ref().map_err(clone_err)?;
            run_job(data, split, config, *seed, |p| {
                if split.test.is_empty() {
                    return Err(Error::InvalidArgument("test split is empty".into()));
                }
                Ok(accuracy_rows_standardized(p, data, &split.test))
            })
        })
        .collect();
    Ok(assemble(store.header.spec, config, layers, results))
}

/// Trains per layer on `train_store` (its own train/validation split per
/// seed) and evaluates on every sample of `test_store`.
pub fn crossop_transfer(
    train_store: &ActivationStore,
    test_store: &ActivationStore,
    config: &ProbeTrainConfig,
) -> Result<LayerCurve> {
    config.validate()?;
    let (a, b) = (&train_store.header, &test_store.header);
    if a.d_model != b.d_model || a.n_layer_states != b.n_layer_states {
        return Err(Error::Shape(format!(
            "stores differ in shape: d_model {} vs {}, layer states {} vs {}",
            a.d_model, b.d_model, a.n_layer_states, b.n_layer_states
        )));
    }
    if a.model_name != b.model_name {
        return Err(Error::InvalidArgument(format!(
            "stores come from different models: `{}` vs `{}`",
            a.model_name, b.model_name
        )));
    }
    if a.spec.num_classes != b.spec.num_classes {
        return Err(Error::Shape(format!("label schemas differ: K={} vs K={}", a.spec.num_classes, b.spec.num_classes)));
    }
    if test_store.samples.is_empty() {
        return Err(Error::InvalidArgument("transfer target store is empty".into()));
    }
    let layers = a.n_layer_states;
    let all_rows: Vec<usize> = (0..test_store.samples.len()).collect();
    let jobs: Vec<(usize, u64)> = (0..layers).flat_map(|l| config.seeds.iter().map(move |&s| (l, s))).collect();
    let results: Vec<Result<SeedResult>> = jobs
        .par_iter()
        .map(|&(l, seed)| {
            let data = LayerData::from_store(train_store, l)?;
            let split = data.splits(config.split, seed)?;
            run_job(&data, &split, config, seed, |p| eval_probe(p, test_store, l, &all_rows))
        })
        .collect();
    Ok(assemble(b.spec, config, layers, results))
}

fn run_job(
    data: &LayerData,
    split: &Splits,
    config: &ProbeTrainConfig,
    seed: u64,
    evaluate: impl FnOnce(&LinearProbe) -> Result<f64>,
) -> Result<SeedResult> {
    let trained = train_probe_rows(data, split.get(SplitName::Train), split.get(SplitName::Val), config, seed)
        .map_err(|e| Error::in_stage(format!("layer {} seed {seed}", data.layer), e))?;
    let accuracy = evaluate(&trained.probe)?;
    Ok(SeedResult { seed, accuracy, val_accuracy: trained.val_accuracy, best_epoch: trained.best_epoch })
}

fn accuracy_rows_standardized(probe: &LinearProbe, data: &LayerData, rows: &[usize]) -> f64 {
    let d = data.d_model;
    let correct = rows
        .iter()
        .filter(|&&r| {
            let mut h = data.x[r * d..(r + 1) * d].to_vec();
            if let Some(s) = &probe.standardizer {
                s.apply(&mut h);
            }
            argmax(&probe.logits(&h)) == data.y[r]
        })
        .count();
    correct as f64 / rows.len() as f64
}

fn assemble(spec: TaskLabelSpec, config: &ProbeTrainConfig, layers: usize, results: Vec<Result<SeedResult>>) -> LayerCurve {
    let per_layer = config.seeds.len();
    let mut it = results.into_iter();
    let points = (0..layers).map(|l| LayerPoint::aggregate(l, it.by_ref().take(per_layer).collect())).collect();
    LayerCurve { spec, chance: 1.0 / spec.num_classes as f64, seeds: config.seeds.clone(), points }
}

fn clone_err(e: &Error) -> Error {
    Error::InvalidArgument(e.to_string())
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn softmax(v: &mut [f64]) {
    let lse = log_sum_exp(v);
    v.iter_mut().for_each(|x| *x = (*x - lse).exp());
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use rand_distr::{Distribution, Normal};

    use super::*;
    use crate::data::TemplateVariant;
    use crate::store::{StoreHeader, StoreSample};

    /// Two Gaussian blobs in `d` dimensions separated along every axis.
    fn blob_store(n: usize, d: usize, layers: usize, gap: f32, seed: u64) -> ActivationStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0f32, 1.0).unwrap();
        let samples = (0..n)
            .map(|i| {
                let label = i % 2;
                let centre = if label == 1 { gap } else { -gap };
                let states = (0..layers * d).map(|_| centre + noise.sample(&mut rng)).collect();
                StoreSample { id: i as u64, label, gold_token: None, states }
            })
            .collect();
        ActivationStore {
            header: StoreHeader {
                model_name: "blobs".into(),
                d_model: d,
                n_layer_states: layers,
                n_samples: n,
                template: TemplateVariant::Spaced,
                tokenizer_fingerprint: String::new(),
                spec: TaskLabelSpec::new(TaskKind::CarryPos),
                metadata: BTreeMap::new(),
            },
            samples,
            unembedding: None,
            final_norm: None,
        }
    }

    fn probe_with(weight: Vec<f64>, bias: Vec<f64>) -> LinearProbe {
        let k = bias.len();
        let mut p = LinearProbe::zeros(TaskLabelSpec::new(TaskKind::Structure3), weight.len() / k, 0, 0);
        p.num_classes = k;
        p.spec.num_classes = k;
        p.weight = weight;
        p.bias = bias;
        p
    }

    #[test]
    fn zero_probe_is_uniform() {
        let p = LinearProbe::zeros(TaskLabelSpec::new(TaskKind::Structure3), 4, 0, 0);
        let probs = probe_forward(&p, &[1.0, -2.0, 3.0, 0.5]).unwrap();
        assert!(probs.iter().all(|&q| (q - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn shifting_logits_changes_nothing() {
        let a = probe_with(vec![0.3, -0.2, 0.1, 0.4], vec![0.0, 0.5]);
        let b = probe_with(vec![0.3, -0.2, 0.1, 0.4], vec![7.0, 7.5]);
        let (pa, pb) = (probe_forward(&a, &[1.0, 2.0]).unwrap(), probe_forward(&b, &[1.0, 2.0]).unwrap());
        assert!(pa.iter().zip(&pb).all(|(x, y)| (x - y).abs() < 1e-12));
        assert!((pa.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_class_closed_form() {
        let p = probe_with(vec![1.0, 0.0, 0.0, 1.0], vec![0.0, 0.0]);
        let probs = probe_forward(&p, &[2.0, 0.0]).unwrap();
        let e2 = 2f64.exp();
        assert!((probs[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((probs[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let p = LinearProbe::zeros(TaskLabelSpec::new(TaskKind::CarryPos), 3, 0, 0);
        assert!(matches!(probe_forward(&p, &[1.0, 2.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let store = blob_store(400, 4, 1, 3.0, 1);
        let (trained, splits) = train_probe(&store, 0, &ProbeTrainConfig::default(), 42).unwrap();
        assert_eq!(eval_probe(&trained.probe, &store, 0, &splits.test).unwrap(), 1.0);
        assert_eq!(eval_probe(&trained.probe, &store, 0, &splits.train).unwrap(), 1.0);
    }

    #[test]
    fn scaled_separable_data_stays_separable() {
        let mut store = blob_store(400, 4, 1, 3.0, 2);
        for s in &mut store.samples {
            s.states.iter_mut().for_each(|v| *v *= 25.0);
        }
        let (trained, splits) = train_probe(&store, 0, &ProbeTrainConfig::default(), 43).unwrap();
        assert_eq!(eval_probe(&trained.probe, &store, 0, &splits.test).unwrap(), 1.0);
    }

    #[test]
    fn initial_loss_is_ln_k() {
        let store = blob_store(60, 5, 1, 1.0, 3);
        let data = LayerData::from_store(&store, 0).unwrap();
        let probe = LinearProbe::zeros(data.spec, 5, 0, 0);
        let rows: Vec<usize> = (0..60).collect();
        assert!((cross_entropy(&probe, &data.x, &data.y, &rows) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn constant_predictor_on_balanced_set_scores_half() {
        let store = blob_store(40, 3, 1, 1.0, 4);
        let mut probe = LinearProbe::zeros(store.header.spec, 3, 0, 0);
        probe.bias = vec![1.0, 0.0];
        let rows: Vec<usize> = (0..40).collect();
        assert_eq!(eval_probe(&probe, &store, 0, &rows).unwrap(), 0.5);
        let reversed: Vec<usize> = rows.iter().rev().copied().collect();
        assert_eq!(eval_probe(&probe, &store, 0, &reversed).unwrap(), 0.5);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let (k, d, n) = (3, 8, 16);
        let mut probe = probe_with((0..k * d).map(|_| normal.sample(&mut rng)).collect(), vec![0.1, -0.2, 0.3]);
        let x: Vec<f64> = (0..n * d).map(|_| normal.sample(&mut rng)).collect();
        let y: Vec<usize> = (0..n).map(|i| i % k).collect();
        let rows: Vec<usize> = (0..n).collect();
        let (_, g) = cross_entropy_grad(&probe, &x, &y, &rows);
        let eps = 1e-5;
        for i in 0..k * d + k {
            fn get(p: &mut LinearProbe, i: usize) -> &mut f64 {
                let kd = p.weight.len();
                if i < kd {
                    &mut p.weight[i]
                } else {
                    &mut p.bias[i - kd]
                }
            }
            let orig = *get(&mut probe, i);
            *get(&mut probe, i) = orig + eps;
            let up = cross_entropy(&probe, &x, &y, &rows);
            *get(&mut probe, i) = orig - eps;
            let down = cross_entropy(&probe, &x, &y, &rows);
            *get(&mut probe, i) = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = if i < k * d { g.weight[i] } else { g.bias[i - k * d] };
            assert!((numeric - analytic).abs() <= 1e-5 * numeric.abs().max(analytic.abs()).max(1e-3));
        }
    }

    #[test]
    fn single_class_training_refused() {
        let store = blob_store(20, 2, 1, 1.0, 5);
        let data = LayerData::from_store(&store, 0).unwrap();
        let zeros: Vec<usize> = (0..20).filter(|&i| data.y[i] == 0).collect();
        assert!(train_probe_rows(&data, &zeros[..8], &zeros[8..], &ProbeTrainConfig::default(), 1).is_err());
    }

    #[test]
    fn ci_values() {
        assert_eq!(mean_ci95(&[0.7; 5]), (0.7, 0.0));
        let (m, h) = mean_ci95(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        // t(0.975, 2) = 4.302653
        assert!((h - 4.302653 * 0.1 / 3f64.sqrt()).abs() < 1e-5, "{h}");
        assert_eq!(mean_ci95(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn onset_examples() {
        let rising: Vec<f64> = (0..10).map(|i| 0.1 + 0.89 * i as f64 / 9.0).collect();
        let bound = 0.95 * 0.99;
        let expected = rising.iter().position(|&m| m >= bound).unwrap();
        assert_eq!(onset_layer(&rising, 0.1, 0.95, 0.2), Some(expected));
        assert_eq!(onset_layer(&[0.5; 6], 0.5, 0.95, 0.2), None);
        assert_eq!(onset_layer(&[0.9; 4], 0.5, 0.95, 0.0), Some(0));
        // a dip after the onset candidate resets it
        assert_eq!(onset_layer(&[0.95, 0.5, 0.96, 1.0], 0.5, 0.95, 0.2), Some(2));
        assert_eq!(onset_layer(&[], 0.5, 0.95, 0.2), None);
    }

    #[test]
    fn sweep_shape_and_csv_round_trip() {
        let store = blob_store(200, 3, 3, 1.5, 6);
        let cfg = ProbeTrainConfig { seeds: vec![42, 43], ..Default::default() };
        let curve = layer_sweep(&store, &cfg).unwrap();
        assert_eq!(curve.points.len(), 3);
        for p in &curve.points {
            let accs: Vec<f64> = p.per_seed.iter().map(|r| r.accuracy).collect();
            assert!((p.mean - accs.iter().sum::<f64>() / 2.0).abs() < 1e-12);
        }
        let back = LayerCurve::from_csv(&curve.to_csv()).unwrap();
        assert_eq!(back.to_csv(), curve.to_csv());
        assert_eq!(back.spec, curve.spec);
        assert_eq!(layer_sweep(&store, &cfg).unwrap(), curve);
    }

    #[test]
    fn transfer_onto_own_test_split_matches_sweep() {
        let store = blob_store(200, 3, 2, 0.8, 7);
        let cfg = ProbeTrainConfig { seeds: vec![44], ..Default::default() };
        let sweep = layer_sweep(&store, &cfg).unwrap();
        let split = split_stratified(&store.labels(), 2, cfg.split, 44).unwrap();
        let mut test = store.clone();
        test.samples = split.test.iter().map(|&i| store.samples[i].clone()).collect();
        test.header.n_samples = test.samples.len();
        let transfer = crossop_transfer(&store, &test, &cfg).unwrap();
        assert_eq!(transfer.means(), sweep.means());

        let mut narrow = blob_store(50, 2, 2, 1.0, 8);
        narrow.header.model_name = store.header.model_name.clone();
        assert!(crossop_transfer(&store, &narrow, &cfg).is_err());
    }

    #[test]
    fn tags_parse_back() {
        for spec in [
            TaskLabelSpec::new(TaskKind::Structure3),
            TaskLabelSpec::new(TaskKind::SumRange).with_range_base(700),
            TaskLabelSpec::new(TaskKind::DigitPos).at(crate::data::DigitPosition::Ones),
        ] {
            assert_eq!(parse_tag(&spec.tag()).unwrap(), spec);
            assert_eq!(parse_tag(&spec.tag().replace('/', "-")).unwrap(), spec);
        }
    }
}
