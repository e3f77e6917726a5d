//! Acceptance suite. Each criterion prints one `PASS` or `FAIL` line with
//! its measured value and pinned tolerance; the process exits non-zero when
//! any criterion fails.
//!
//! Run with `cargo test -p arith-probe-core --test acceptance`.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use arith_probe::data::generate::{sum_range_class, STRUCTURE_AA, STRUCTURE_AB, STRUCTURE_BA};
use arith_probe::data::{
    carry_bits, digit_count, digits_lsb, gen_carry_dataset, gen_crossop_dataset, gen_digit_dataset,
    gen_logitlens_dataset, gen_structure_dataset, gen_sum_range_dataset, split_stratified, structure_class,
    ArithProblem, DigitPosition, Operation, ProbeDataset, SplitRatio, StructureCounts, TaskKind, TaskLabelSpec,
    TemplateVariant, SUM_RANGE_BASES,
};
use arith_probe::experiment::{run_experiment, DatasetParams, ExperimentConfig, ExperimentKind, ModelSource};
use arith_probe::lens::{earliest_top1, LensNorm};
use arith_probe::probe::{cross_entropy, cross_entropy_grad, layer_sweep, LinearProbe, ProbeTrainConfig};
use arith_probe::store::{ActivationStore, FinalNorm, NormKind, StoreHeader, StoreSample, Unembedding};
use arith_probe::toylm::{
    addition_corpus, export_activations, save_checkpoint, train, ToyLm, ToyLmConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Tolerances, pinned.
const ORACLE_TIME_LIMIT_S: f64 = 60.0;
const ORACLE_RANDOM_PAIRS: usize = 100_000;
const GRAD_INSTANCES: usize = 20;
const GRAD_MAX_REL_ERR: f64 = 1e-5;
const NULL_SIGMAS: f64 = 3.0;
const NULL_MIN_PASS_SHARE: f64 = 0.95;
const LENS_SAMPLES: usize = 1000;
const TOY_HOLDOUT_GATE: f64 = 0.99;
const TOY_FINAL_PROBE_MIN: f64 = 0.90;
const TOY_L0_MARGIN: f64 = 0.15;
const SPLIT_DATASETS: usize = 100;
const SPLIT_SLACK: f64 = 1.0;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------------------
// Independent schoolbook arithmetic over decimal strings.

/// Digits of the decimal rendering, least significant first.
fn text_digits(n: u64) -> Vec<u8> {
    n.to_string().bytes().rev().map(|c| c - b'0').collect()
}

fn strip(mut d: Vec<u8>) -> Vec<u8> {
    while d.len() > 1 && *d.last().unwrap() == 0 {
        d.pop();
    }
    d
}

/// Column sum with the carry out of every column of the longer operand.
fn school_add(a: &[u8], b: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let cols = a.len().max(b.len());
    let (mut sum, mut carries, mut carry) = (Vec::new(), Vec::new(), 0u8);
    for i in 0..cols {
        let s = a.get(i).copied().unwrap_or(0) + b.get(i).copied().unwrap_or(0) + carry;
        sum.push(s % 10);
        carry = s / 10;
        carries.push(carry);
    }
    if carry > 0 {
        sum.push(carry);
    }
    (sum, carries)
}

/// `a - b` for `a >= b`, by borrowing.
fn school_sub(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(a.len());
    let mut borrow = 0i8;
    for (i, &x) in a.iter().enumerate() {
        let mut d = x as i8 - b.get(i).copied().unwrap_or(0) as i8 - borrow;
        borrow = 0;
        if d < 0 {
            d += 10;
            borrow = 1;
        }
        out.push(d as u8);
    }
    assert_eq!(borrow, 0, "school_sub needs a >= b");
    strip(out)
}

fn school_mul(a: &[u8], b: &[u8]) -> Vec<u8> {
    let mut acc = vec![0u32; a.len() + b.len()];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            acc[i + j] += x as u32 * y as u32;
        }
    }
    let mut carry = 0u32;
    for v in acc.iter_mut() {
        let t = *v + carry;
        *v = t % 10;
        carry = t / 10;
    }
    strip(acc.into_iter().map(|v| v as u8).collect())
}

/// Compares digit strings as numbers.
fn school_cmp(a: &[u8], b: &[u8]) -> std::cmp::Ordering {
    a.len().cmp(&b.len()).then_with(|| a.iter().rev().cmp(b.iter().rev()))
}

fn school_value(d: &[u8]) -> u64 {
    d.iter().rev().fold(0, |acc, &x| acc * 10 + x as u64)
}

/// Number of mismatches between library labels and the schoolbook oracle.
fn oracle_mismatches(a: u64, b: u64, with_mul: bool) -> usize {
    let (da, db) = (text_digits(a), text_digits(b));
    let mut bad = 0;
    let mut check = |ok: bool| bad += usize::from(!ok);

    check(digits_lsb(a) == da && digit_count(a) == da.len());
    let (sum, carries) = school_add(&da, &db);
    check(carry_bits(a, b) == carries);
    let p = ArithProblem::add(a, b);
    check(p.answer_digits == sum && p.carry_bits == carries);
    for pos in 0..4 {
        check(p.answer_digit(pos) == sum.get(pos).copied().unwrap_or(0));
    }
    let expect_structure = match school_cmp(&da, &db) {
        std::cmp::Ordering::Greater => STRUCTURE_AB,
        std::cmp::Ordering::Less => STRUCTURE_BA,
        std::cmp::Ordering::Equal => STRUCTURE_AA,
    };
    check(structure_class(a, b) == expect_structure);
    let sum_value = school_value(&sum);
    for base in SUM_RANGE_BASES {
        let inside = sum_value >= base && sum_value < base + 10;
        check(sum_range_class(p.answer, base) == inside.then(|| (sum_value - base) as usize));
    }
    if a >= b {
        let diff = school_sub(&da, &db);
        let q = ArithProblem::new(a, b, Operation::Sub, TemplateVariant::Spaced).unwrap();
        check(q.answer_digits == diff && q.answer_digit(2) == diff.get(2).copied().unwrap_or(0));
    } else {
        check(ArithProblem::new(a, b, Operation::Sub, TemplateVariant::Spaced).is_err());
    }
    if with_mul {
        let prod = school_mul(&da, &db);
        let q = ArithProblem::new(a, b, Operation::Mul, TemplateVariant::Spaced).unwrap();
        check(q.answer_digits == prod && q.answer_digit(2) == prod.get(2).copied().unwrap_or(0));
    }
    bad
}

/// Labels stored by a generator must agree with the oracle on every item.
fn dataset_mismatches(ds: &ProbeDataset) -> usize {
    ds.items
        .iter()
        .filter(|item| {
            let p = &item.problem;
            let (da, db) = (text_digits(p.op_a), text_digits(p.op_b));
            let result = match p.operation {
                Operation::Add => school_add(&da, &db).0,
                Operation::Sub => school_sub(&da, &db),
                Operation::Mul => school_mul(&da, &db),
            };
            let digit = |pos: usize| result.get(pos).copied().unwrap_or(0) as usize;
            let pos = ds.spec.position.map(|p| p.index());
            let expect = match ds.spec.task_kind {
                TaskKind::Structure3 => match school_cmp(&da, &db) {
                    std::cmp::Ordering::Greater => STRUCTURE_AB,
                    std::cmp::Ordering::Less => STRUCTURE_BA,
                    std::cmp::Ordering::Equal => STRUCTURE_AA,
                },
                TaskKind::SumRange => (school_value(&result) - ds.spec.range_base.unwrap()) as usize,
                TaskKind::CarryPos => school_add(&da, &db).1[pos.unwrap()] as usize,
                TaskKind::DigitPos => digit(pos.unwrap()),
                TaskKind::CrossopDigit | TaskKind::Logitlens => digit(2),
            };
            item.label != expect
        })
        .count()
}

fn label_oracle() -> Verdict {
    let t0 = Instant::now();
    let mut mismatches = 0;
    let mut checked = 0usize;
    for a in 0..1000u64 {
        for b in 0..1000u64 {
            mismatches += oracle_mismatches(a, b, true);
            checked += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for i in 0..ORACLE_RANDOM_PAIRS {
        // Alternate wide operands for add/sub with operands small enough
        // that the product fits in 64 bits.
        let (a, b, with_mul) = if i % 2 == 0 {
            (rng.random_range(1000..1u64 << 62), rng.random_range(1000..1u64 << 62), false)
        } else {
            (rng.random_range(1000..1u64 << 31), rng.random_range(1000..1u64 << 31), true)
        };
        mismatches += oracle_mismatches(a, b, with_mul);
        checked += 1;
    }

    let mut datasets = vec![gen_structure_dataset(2, StructureCounts::reference_clamped(2).unwrap(), 1).unwrap()];
    datasets.extend(gen_sum_range_dataset(&SUM_RANGE_BASES, 400, 2).unwrap());
    for p in [DigitPosition::Ones, DigitPosition::Tens, DigitPosition::Hundreds] {
        datasets.push(gen_carry_dataset(p, 1000, 3).unwrap());
    }
    datasets.extend(gen_digit_dataset(1000, 4).unwrap().into_vec());
    datasets.push(gen_crossop_dataset(Operation::Sub, 1000, 5).unwrap());
    datasets.push(gen_crossop_dataset(Operation::Mul, 1000, 6).unwrap());
    datasets.push(gen_logitlens_dataset(1000, 7).unwrap());
    let dataset_bad: usize = datasets.iter().map(dataset_mismatches).sum();

    let secs = t0.elapsed().as_secs_f64();
    verdict(
        mismatches == 0 && dataset_bad == 0 && secs < ORACLE_TIME_LIMIT_S,
        format!(
            "{checked} operand pairs, {mismatches} mismatches; {} generated datasets, {dataset_bad} label mismatches; \
             {secs:.1}s (limit {ORACLE_TIME_LIMIT_S}s)",
            datasets.len()
        ),
    )
}

// ---------------------------------------------------------------------------

/// Weights then biases, flattened.
fn param(p: &mut LinearProbe, i: usize) -> &mut f64 {
    let kd = p.weight.len();
    if i < kd {
        &mut p.weight[i]
    } else {
        &mut p.bias[i - kd]
    }
}

fn probe_gradient_check() -> Verdict {
    let (k, d, n) = (3, 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut worst = 0.0f64;
    for inst in 0..GRAD_INSTANCES {
        let mut probe = LinearProbe::zeros(TaskLabelSpec::new(TaskKind::Structure3), d, 0, inst as u64);
        probe.weight.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        probe.bias.iter_mut().for_each(|b| *b = rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let rows: Vec<usize> = (0..n).collect();
        let (_, grad) = cross_entropy_grad(&probe, &x, &y, &rows);

        let h = 1e-5;
        let analytic: Vec<f64> = grad.weight.iter().chain(&grad.bias).copied().collect();
        let mut numeric = Vec::with_capacity(analytic.len());
        for i in 0..analytic.len() {
            let mut plus = probe.clone();
            *param(&mut plus, i) += h;
            let mut minus = probe.clone();
            *param(&mut minus, i) -= h;
            numeric.push((cross_entropy(&plus, &x, &y, &rows) - cross_entropy(&minus, &x, &y, &rows)) / (2.0 * h));
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale.max(1e-12));
    }
    verdict(
        worst <= GRAD_MAX_REL_ERR,
        format!("{GRAD_INSTANCES} instances (K=3, d=8), max relative error {worst:.2e} (limit {GRAD_MAX_REL_ERR:.0e})"),
    )
}

// ---------------------------------------------------------------------------
// Toy model shared by the remaining criteria.

/// The toy recipe checked into `recipes/toy.toml`.
fn acceptance_toy_config() -> ToyLmConfig {
    ToyLmConfig::from_toml(include_str!("../../../recipes/toy.toml")).expect("toy recipe parses")
}

struct Toy {
    model: ToyLm<f32>,
    holdout: f64,
    train_secs: f64,
}

fn train_toy() -> Toy {
    let cfg = acceptance_toy_config();
    let corpus = addition_corpus(&cfg.corpus, cfg.template).expect("corpus");
    let t0 = Instant::now();
    let outcome = train(&cfg, &corpus).expect("toy training");
    Toy { model: outcome.model, holdout: outcome.holdout_exact_match, train_secs: t0.elapsed().as_secs_f64() }
}

fn null_signal(model: &ToyLm<f32>) -> Verdict {
    let structure = gen_structure_dataset(3, StructureCounts { ab: 400, ba: 400, aa: 400 }, 11).unwrap();
    let mut datasets = vec![structure];
    for p in [DigitPosition::Ones, DigitPosition::Tens, DigitPosition::Hundreds] {
        datasets.push(gen_carry_dataset(p, 1000, 12).unwrap());
    }
    datasets.extend(gen_digit_dataset(1000, 13).unwrap().into_vec());

    let cfg = ProbeTrainConfig::default();
    let (mut cells, mut passed, mut worst_z) = (0usize, 0usize, 0.0f64);
    for (i, ds) in datasets.iter().enumerate() {
        let store = export_activations(model, ds).unwrap().with_shuffled_labels(900 + i as u64);
        let curve = layer_sweep(&store, &cfg).unwrap();
        let chance = curve.chance;
        for point in &curve.points {
            for s in &point.per_seed {
                let n_test = split_stratified(&store.labels(), ds.spec.num_classes, cfg.split, s.seed)
                    .unwrap()
                    .test
                    .len() as f64;
                let sigma = (chance * (1.0 - chance) / n_test).sqrt();
                let z = (s.accuracy - chance).abs() / sigma;
                worst_z = worst_z.max(z);
                cells += 1;
                passed += usize::from(z <= NULL_SIGMAS);
            }
        }
    }
    let share = passed as f64 / cells as f64;
    verdict(
        share >= NULL_MIN_PASS_SHARE,
        format!(
            "{passed}/{cells} layer x task x seed cells within {NULL_SIGMAS} sigma of chance ({:.1}%, need {:.0}%), \
             worst |z| {worst_z:.2}",
            100.0 * share,
            100.0 * NULL_MIN_PASS_SHARE
        ),
    )
}

fn argmax_lowest(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn lens_forward_identity(model: &ToyLm<f32>) -> Verdict {
    let ds = gen_logitlens_dataset(LENS_SAMPLES, 21).unwrap();
    let store = export_activations(model, &ds).unwrap();
    let (_, results) = earliest_top1(&store, LensNorm::Raw).unwrap();
    let last = store.header.n_layer_states - 1;
    let mut agree = 0;
    for (item, r) in ds.items.iter().zip(&results) {
        let tokens = model.vocab.tokenize(&item.problem.prompt).unwrap();
        let cache = model.forward(&tokens).unwrap();
        let greedy = argmax_lowest(cache.logits_at(tokens.len() - 1)) as u32;
        agree += usize::from(r.top1[last] == greedy);
    }
    verdict(
        agree == ds.len(),
        format!("{agree}/{} final-state lens argmax equal the greedy next token (need 100%)", ds.len()),
    )
}

fn pipeline_sanity(toy: &Toy) -> Verdict {
    let ds = gen_digit_dataset(1000, 31).unwrap().ones;
    let store = export_activations(&toy.model, &ds).unwrap();
    let curve = layer_sweep(&store, &ProbeTrainConfig::default()).unwrap();
    let means = curve.means();
    let (l0, last) = (means[0], *means.last().unwrap());
    let l0_limit = curve.chance + TOY_L0_MARGIN;
    verdict(
        toy.holdout >= TOY_HOLDOUT_GATE && last >= TOY_FINAL_PROBE_MIN && l0 <= l0_limit,
        format!(
            "holdout exact match {:.4} (gate {TOY_HOLDOUT_GATE}), trained in {:.0}s; ones-digit probe final {last:.3} \
             (need >= {TOY_FINAL_PROBE_MIN}), L0 {l0:.3} (need <= {l0_limit:.2})",
            toy.holdout, toy.train_secs
        ),
    )
}

fn csv_hashes(dir: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "csv") {
                let digest = hex::encode(Sha256::digest(fs::read(&path).unwrap()));
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), digest);
            }
        }
    }
    out
}

fn determinism(model: &ToyLm<f32>) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let ckpt = tmp.path().join("toy.ckpt");
    save_checkpoint(model, &ckpt).unwrap();
    let mut total = 0;
    let mut differing = Vec::new();
    for kind in [ExperimentKind::Structure, ExperimentKind::Carry, ExperimentKind::Digit, ExperimentKind::Lens] {
        let cfg = ExperimentConfig {
            kind,
            out_dir: tmp.path().join(kind.name()),
            model: ModelSource::Toy { checkpoint: ckpt.clone() },
            dataset: DatasetParams { n: 400, digits: 2, ..Default::default() },
            probe: ProbeTrainConfig::default(),
            lens: Default::default(),
            save_stores: false,
        };
        let run = || {
            let outcome = run_experiment(&cfg).unwrap();
            let hashes = csv_hashes(&cfg.out_dir);
            fs::remove_dir_all(&cfg.out_dir).unwrap();
            (hashes, outcome.manifest.digest())
        };
        let ((a, manifest_a), (b, manifest_b)) = (run(), run());
        total += a.len();
        if a != b || a.is_empty() || manifest_a != manifest_b {
            differing.push(kind.name());
        }
    }
    verdict(
        differing.is_empty(),
        format!("{total} CSV files and manifests over 4 experiments, each run twice; differing experiments: {differing:?}"),
    )
}

// ---------------------------------------------------------------------------
// Store format, written byte by byte on the test side.

fn test_side_encode(s: &ActivationStore) -> Vec<u8> {
    let h = &s.header;
    let mut w = Vec::new();
    let u32le = |w: &mut Vec<u8>, v: u32| w.extend_from_slice(&v.to_le_bytes());
    let text = |w: &mut Vec<u8>, t: &str| {
        w.extend_from_slice(&(t.len() as u32).to_le_bytes());
        w.extend_from_slice(t.as_bytes());
    };
    w.extend_from_slice(b"ARPSTORE");
    u32le(&mut w, 1);
    u32le(&mut w, u32::from(s.unembedding.is_some()) | (u32::from(s.final_norm.is_some()) << 1));
    u32le(&mut w, h.d_model as u32);
    u32le(&mut w, h.n_layer_states as u32);
    w.extend_from_slice(&(h.n_samples as u64).to_le_bytes());
    u32le(&mut w, h.spec.num_classes as u32);
    w.push(h.spec.task_kind.code());
    w.push(h.template.code());
    w.push(h.spec.position.map_or(0xFF, |p| p.index() as u8));
    w.push(0);
    w.extend_from_slice(&h.spec.range_base.unwrap_or(u64::MAX).to_le_bytes());
    text(&mut w, &h.model_name);
    text(&mut w, &h.tokenizer_fingerprint);
    text(&mut w, &serde_json::to_string(&h.metadata).unwrap());
    for smp in &s.samples {
        w.extend_from_slice(&smp.id.to_le_bytes());
        u32le(&mut w, smp.label as u32);
        u32le(&mut w, smp.gold_token.unwrap_or(u32::MAX));
        smp.states.iter().for_each(|x| w.extend_from_slice(&x.to_bits().to_le_bytes()));
    }
    if let Some(u) = &s.unembedding {
        u32le(&mut w, u.vocab.len() as u32);
        u.vocab.iter().for_each(|t| text(&mut w, t));
        u.weights.iter().for_each(|x| w.extend_from_slice(&x.to_bits().to_le_bytes()));
    }
    if let Some(n) = &s.final_norm {
        w.push(if n.kind == NormKind::LayerNorm { 0 } else { 1 });
        w.extend_from_slice(&n.eps.to_le_bytes());
        n.weight.iter().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
        n.bias.iter().flatten().for_each(|x| w.extend_from_slice(&x.to_le_bytes()));
    }
    let digest = Sha256::digest(&w);
    w.extend_from_slice(&digest);
    w
}

fn random_store(rng: &mut ChaCha8Rng, with_norm: bool) -> ActivationStore {
    let (n, layers, d, vocab) = (rng.random_range(1..20), rng.random_range(1..6), rng.random_range(1..9), 5);
    // Awkward bit patterns: signed zero, subnormals, extremes.
    let specials = [-0.0f32, f32::MIN_POSITIVE / 3.0, f32::MAX, f32::MIN, 1e-45];
    let float = |rng: &mut ChaCha8Rng| {
        if rng.random_range(0..8) == 0 {
            specials[rng.random_range(0..specials.len())]
        } else {
            f32::from_bits(rng.random::<u32>() & 0xBF7F_FFFF)
        }
    };
    let spec = TaskLabelSpec::new(TaskKind::DigitPos).at(DigitPosition::Tens);
    let samples = (0..n)
        .map(|i| StoreSample {
            id: i as u64 * 7 + 3,
            label: rng.random_range(0..10),
            gold_token: (i % 3 != 0).then(|| rng.random_range(0..vocab as u32)),
            states: (0..layers * d).map(|_| float(rng)).collect(),
        })
        .collect();
    let mut metadata = BTreeMap::new();
    metadata.insert("source".to_string(), serde_json::json!("test"));
    ActivationStore {
        header: StoreHeader {
            model_name: "round-trip ✓".into(),
            d_model: d,
            n_layer_states: layers,
            n_samples: n,
            template: TemplateVariant::Compact,
            tokenizer_fingerprint: "fp".into(),
            spec,
            metadata,
        },
        samples,
        unembedding: Some(Unembedding {
            vocab: (0..vocab).map(|t| format!("tok{t}")).collect(),
            weights: (0..vocab * d).map(|_| float(rng)).collect(),
        }),
        final_norm: with_norm.then(|| FinalNorm {
            kind: NormKind::LayerNorm,
            eps: 1e-5,
            weight: (0..d).map(|_| rng.random_range(0.5..1.5)).collect(),
            bias: Some((0..d).map(|_| rng.random_range(-0.5..0.5)).collect()),
        }),
    }
}

fn bits_equal(a: &ActivationStore, b: &ActivationStore) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.header == b.header
        && a.samples.len() == b.samples.len()
        && a.samples.iter().zip(&b.samples).all(|(x, y)| {
            x.id == y.id && x.label == y.label && x.gold_token == y.gold_token && bits(&x.states) == bits(&y.states)
        })
        && a.unembedding.as_ref().map(|u| (u.vocab.clone(), bits(&u.weights)))
            == b.unembedding.as_ref().map(|u| (u.vocab.clone(), bits(&u.weights)))
        && a.final_norm == b.final_norm
}

fn format_round_trip() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut identical, mut detected, mut flips, mut stores) = (true, 0usize, 0usize, 0usize);
    for i in 0..40 {
        let store = random_store(&mut rng, i % 2 == 0);
        let bytes = store.encode().unwrap();
        let ours = test_side_encode(&store);
        let back = ActivationStore::decode(&bytes).unwrap();
        let from_ours = ActivationStore::decode(&ours).unwrap();
        identical &= bytes == ours && bits_equal(&store, &back) && bits_equal(&store, &from_ours);
        identical &= back.encode().unwrap() == bytes;
        stores += 1;
        for pos in 0..bytes.len() {
            let mut bad = bytes.clone();
            bad[pos] ^= 1 << rng.random_range(0..8);
            flips += 1;
            detected += usize::from(ActivationStore::decode(&bad).is_err());
        }
    }
    verdict(
        identical && detected == flips,
        format!(
            "{stores} stores: byte-identical encodings and bit-exact read-back = {identical}; \
             {detected}/{flips} single-bit corruptions rejected"
        ),
    )
}

// ---------------------------------------------------------------------------

fn split_protocol() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let ratio = SplitRatio::default();
    let (mut violations, mut classes) = (0usize, 0usize);
    for t in 0..SPLIT_DATASETS {
        let k = [2, 3, 10][t % 3];
        let sizes: Vec<usize> = (0..k).map(|_| rng.random_range(2..400)).collect();
        let mut labels: Vec<usize> = sizes.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
        for i in (1..labels.len()).rev() {
            labels.swap(i, rng.random_range(0..=i));
        }
        let s = split_stratified(&labels, k, ratio, rng.random()).unwrap();
        let all: HashSet<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        if all.len() != labels.len() || s.train.len() + s.val.len() + s.test.len() != labels.len() {
            violations += 1;
        }
        for (c, &n) in sizes.iter().enumerate() {
            classes += 1;
            let test = s.test.iter().filter(|&&i| labels[i] == c).count() as f64;
            let rest = n as f64 - test;
            let val = s.val.iter().filter(|&&i| labels[i] == c).count() as f64;
            let ok = (test - n as f64 * ratio.test).abs() <= SPLIT_SLACK
                && (rest - n as f64 * (1.0 - ratio.test)).abs() <= SPLIT_SLACK
                && (val - rest * ratio.val_of_train).abs() <= SPLIT_SLACK;
            violations += usize::from(!ok);
        }
    }
    verdict(
        violations == 0,
        format!("{SPLIT_DATASETS} datasets, {classes} classes: {violations} outside +/-{SPLIT_SLACK} item of the 80/20 target"),
    )
}

fn main() -> ExitCode {
    // Respect the harness's `--list` probe so the target behaves like a test.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let mut results: Vec<(&str, Verdict)> = Vec::new();
    let mut report = |name: &'static str, v: Verdict| {
        println!("{} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((name, v));
    };
    report("label-oracle", label_oracle());
    report("probe-gradient", probe_gradient_check());
    report("format-round-trip", format_round_trip());
    report("split-protocol", split_protocol());
    let toy = train_toy();
    report("toy-pipeline", pipeline_sanity(&toy));
    report("lens-forward-identity", lens_forward_identity(&toy.model));
    report("null-signal", null_signal(&toy.model));
    report("determinism", determinism(&toy.model));
    let failed = results.iter().filter(|(_, v)| !v.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
