//! `arith-probe`: dataset generation, toy-model training, activation export,
//! probe sweeps, logit-lens histograms and reports.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arith_probe::data::{
    digit_count, gen_carry_dataset, gen_crossop_dataset, gen_digit_dataset, gen_logitlens_dataset,
    gen_structure_dataset, gen_sum_range_dataset, read_dataset, write_dataset, DigitPosition, Operation,
    ProbeDataset, StructureCounts, TaskKind, TemplateVariant, SUM_RANGE_BASES,
};
use arith_probe::experiment::{run_experiment, ExperimentConfig};
use arith_probe::lens::{earliest_top1, histogram_csv, histogram_from_csv, LayerWindow, LensNorm};
use arith_probe::probe::{crossop_transfer, layer_sweep, LayerCurve, ProbeTrainConfig};
use arith_probe::report::{
    collect_artifacts, exact_match_table, read_answers, stage_ordering, write_answers, AnswerRecord, ArtifactInputs,
    ArtifactWriter,
};
use arith_probe::store::{read_store, write_store};
use arith_probe::toylm::{
    addition_corpus, export_activations, generate_answer, load_checkpoint, save_checkpoint, train_with_progress,
    ToyLmConfig,
};
use arith_probe::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "arith-probe", version, about = "Layer-wise probing and logit-lens toolkit for multi-digit addition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labeled dataset as JSON lines.
    Gen(GenArgs),
    /// Train, evaluate or export the toy transformer.
    #[command(subcommand)]
    Toylm(ToylmCommand),
    /// Inspect activation stores.
    #[command(subcommand)]
    Store(StoreCommand),
    /// Train linear probes over every layer state.
    #[command(subcommand)]
    Probe(ProbeCommand),
    /// Logit-lens analyses.
    #[command(subcommand)]
    Lens(LensCommand),
    /// Stage ordering and exact-match tables.
    #[command(subcommand)]
    Report(ReportCommand),
    /// Run a whole experiment from a TOML recipe.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the recipe's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct GenArgs {
    /// structure3, sum_range, carry_pos, digit_pos, crossop_digit or logitlens.
    #[arg(long)]
    task: TaskKind,
    /// Problems per dataset (carry, digit, crossop, logitlens).
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Output file; tasks that produce several datasets append `-<tag>` to
    /// the file stem.
    #[arg(long)]
    out: PathBuf,
    /// ones, tens or hundreds (carry and digit tasks); all when omitted.
    #[arg(long)]
    position: Option<DigitPosition>,
    /// Sum-range group start; all groups when omitted.
    #[arg(long)]
    range_base: Option<u64>,
    /// Examples per sum value.
    #[arg(long, default_value_t = 400)]
    per_class: usize,
    /// Operand digits for the structure task.
    #[arg(long, default_value_t = 2)]
    digits: u32,
    /// Structure class sizes `ab,ba,aa`; clamped reference sizes when omitted.
    #[arg(long)]
    counts: Option<String>,
    /// sub or mul (crossop task).
    #[arg(long, default_value = "sub")]
    op: Operation,
    #[arg(long, default_value = "spaced")]
    template: TemplateVariant,
}

#[derive(Subcommand)]
enum ToylmCommand {
    /// Train from a TOML config and write a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Greedy exact match on a dataset, by answer digit count.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the generated answers as JSON lines.
        #[arg(long)]
        answers: Option<PathBuf>,
    },
    /// Write the activation store of a dataset.
    Export {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum StoreCommand {
    /// Print the header and per-class counts.
    Inspect { path: PathBuf },
}

#[derive(Args)]
struct ProbeOpts {
    /// Inclusive range `42..46` or a comma list.
    #[arg(long, default_value = "42..46")]
    seeds: String,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Mini-batch size; 0 trains full-batch.
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    standardize: bool,
}

impl ProbeOpts {
    fn config(&self) -> Result<ProbeTrainConfig> {
        let cfg = ProbeTrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            batch_size: (self.batch_size > 0).then_some(self.batch_size),
            standardize: self.standardize,
            seeds: parse_seeds(&self.seeds)?,
            ..Default::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum ProbeCommand {
    /// Per-layer accuracy curve with seed-averaged confidence intervals.
    Sweep {
        #[arg(long)]
        store: PathBuf,
        /// Expected task of the store.
        #[arg(long)]
        task: TaskKind,
        #[arg(long)]
        position: Option<DigitPosition>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ProbeOpts,
    },
    /// Train on one store, evaluate on another from the same model.
    Transfer {
        #[arg(long)]
        train_store: PathBuf,
        #[arg(long)]
        test_store: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        opts: ProbeOpts,
    },
}

#[derive(Subcommand)]
enum LensCommand {
    /// Histogram of the earliest layer ranking the gold token first.
    Hist {
        /// One store per seed; counts are averaged.
        #[arg(long, required = true, num_args = 1..)]
        store: Vec<PathBuf>,
        /// `all` or `lastN`.
        #[arg(long, default_value = "all")]
        layers: LayerWindow,
        /// raw or final_norm.
        #[arg(long, default_value = "raw")]
        norm: LensNorm,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum ReportCommand {
    /// Onset ordering of the signal families.
    Stages {
        /// Directory of curve CSVs written by `probe sweep`.
        #[arg(long)]
        curves: PathBuf,
        /// Histogram CSV written by `lens hist`.
        #[arg(long)]
        hist: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        plateau_fraction: f64,
        #[arg(long, default_value_t = 0.2)]
        chance_margin: f64,
    },
    /// Exact-match table from an answers file.
    Table {
        #[arg(long)]
        answers: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Gen(args) => gen(args),
        Command::Toylm(c) => toylm(c),
        Command::Store(StoreCommand::Inspect { path }) => {
            print!("{}", read_store(&path)?.summary());
            Ok(())
        }
        Command::Probe(c) => probe(c),
        Command::Lens(LensCommand::Hist { store, layers, norm, out }) => lens_hist(&store, layers, norm, &out),
        Command::Report(c) => report(c),
        Command::Run { config, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = run_experiment(&cfg)?;
            if let Some(stages) = &outcome.stages {
                print!("{}", stages.to_text());
            }
            println!(
                "wrote {} files to {} (manifest {})",
                outcome.manifest.files.len(),
                outcome.out_dir.display(),
                outcome.manifest.digest()
            );
            Ok(())
        }
    }
}

fn gen(a: GenArgs) -> Result<()> {
    let datasets: Vec<ProbeDataset> = match a.task {
        TaskKind::Structure3 => {
            let counts = match &a.counts {
                Some(s) => {
                    let v: Vec<usize> = s
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad count `{x}`"))))
                        .collect::<Result<_>>()?;
                    let [ab, ba, aa] = v[..] else {
                        return Err(Error::InvalidArgument("--counts takes three values ab,ba,aa".into()));
                    };
                    StructureCounts { ab, ba, aa }
                }
                None => StructureCounts::reference_clamped(a.digits)?,
            };
            vec![gen_structure_dataset(a.digits, counts, a.seed)?]
        }
        TaskKind::SumRange => {
            let bases = a.range_base.map_or(SUM_RANGE_BASES.to_vec(), |b| vec![b]);
            gen_sum_range_dataset(&bases, a.per_class, a.seed)?
        }
        TaskKind::CarryPos => positions(a.position)
            .into_iter()
            .map(|p| gen_carry_dataset(p, a.n, a.seed))
            .collect::<Result<_>>()?,
        TaskKind::DigitPos => {
            let all = gen_digit_dataset(a.n, a.seed)?;
            positions(a.position).into_iter().map(|p| all.get(p).clone()).collect()
        }
        TaskKind::CrossopDigit => vec![gen_crossop_dataset(a.op, a.n, a.seed)?],
        TaskKind::Logitlens => vec![gen_logitlens_dataset(a.n, a.seed)?],
    };
    let multiple = datasets.len() > 1;
    for ds in datasets {
        let ds = ds.with_template(a.template);
        let path = if multiple { suffixed(&a.out, &ds.spec.tag().replace('/', "-")) } else { a.out.clone() };
        ensure_parent(&path)?;
        write_dataset(&ds, &path)?;
        println!("{}: {} items -> {}", ds.spec.tag(), ds.len(), path.display());
    }
    Ok(())
}

fn positions(p: Option<DigitPosition>) -> Vec<DigitPosition> {
    p.map_or(vec![DigitPosition::Ones, DigitPosition::Tens, DigitPosition::Hundreds], |p| vec![p])
}

fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().map_or("dataset".into(), |s| s.to_string_lossy().into_owned());
    let ext = path.extension().map_or("jsonl".into(), |e| e.to_string_lossy().into_owned());
    path.with_file_name(format!("{stem}-{tag}.{ext}"))
}

fn toylm(c: ToylmCommand) -> Result<()> {
    match c {
        ToylmCommand::Train { config, out, log } => {
            let cfg = match config {
                Some(p) => {
                    if !p.exists() {
                        return Err(Error::MissingPath(p));
                    }
                    ToyLmConfig::from_toml(&fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?)?
                }
                None => ToyLmConfig::default(),
            };
            let corpus = addition_corpus(&cfg.corpus, cfg.template)?;
            let outcome = train_with_progress(&cfg, &corpus, |e| {
                eprintln!("step {:>6}  loss {:.4}  lr {:.2e}", e.step, e.loss, e.learning_rate)
            })?;
            ensure_parent(&out)?;
            save_checkpoint(&outcome.model, &out)?;
            if let Some(log) = log {
                let mut text = String::new();
                for e in &outcome.log {
                    text.push_str(&serde_json::to_string(e)?);
                    text.push('\n');
                }
                fs::write(&log, text).map_err(|e| Error::io(&log, e))?;
            }
            println!("held-out two-digit exact match: {:.4}", outcome.holdout_exact_match);
            println!("checkpoint: {}", out.display());
            Ok(())
        }
        ToylmCommand::Eval { ckpt, dataset, answers } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = read_dataset(&dataset)?;
            let mut records = Vec::with_capacity(ds.len());
            for (i, item) in ds.items.iter().enumerate() {
                let g = generate_answer(&model, &item.problem.prompt)
                    .map_err(|e| Error::in_stage(format!("generate sample {i}"), e))?;
                records.push(AnswerRecord {
                    id: i as u64,
                    digits: digit_count(item.problem.answer),
                    gold: item.problem.answer_text(),
                    answer: g.text,
                    truncated: !g.terminated,
                });
            }
            if let Some(path) = answers {
                ensure_parent(&path)?;
                write_answers(&records, &path)?;
            }
            print!("{}", exact_match_table(&records)?.to_csv());
            Ok(())
        }
        ToylmCommand::Export { ckpt, dataset, out } => {
            let model = load_checkpoint(&ckpt)?;
            let ds = read_dataset(&dataset)?;
            let store = export_activations(&model, &ds)?;
            ensure_parent(&out)?;
            write_store(&store, &out)?;
            println!("{} samples x {} layer states -> {}", store.samples.len(), store.header.n_layer_states, out.display());
            Ok(())
        }
    }
}

fn probe(c: ProbeCommand) -> Result<()> {
    let (curve, out) = match c {
        ProbeCommand::Sweep { store, task, position, out, opts } => {
            let store = read_store(&store)?;
            let spec = store.header.spec;
            if spec.task_kind != task || (position.is_some() && spec.position != position) {
                return Err(Error::InvalidArgument(format!(
                    "store holds {} but {}{} was requested",
                    spec.tag(),
                    task,
                    position.map_or(String::new(), |p| format!("/{}", p.name()))
                )));
            }
            (layer_sweep(&store, &opts.config()?)?, out)
        }
        ProbeCommand::Transfer { train_store, test_store, out, opts } => {
            let (a, b) = (read_store(&train_store)?, read_store(&test_store)?);
            (crossop_transfer(&a, &b, &opts.config()?)?, out)
        }
    };
    let mut w = ArtifactWriter::default();
    let stem = curve.file_stem();
    w.add(format!("{stem}.csv"), "csv", curve.to_csv());
    w.add(format!("{stem}.jsonl"), "jsonl", curve.to_jsonl()?);
    w.write(&out)?;
    print!("{}", curve.to_csv());
    Ok(())
}

fn lens_hist(stores: &[PathBuf], window: LayerWindow, norm: LensNorm, out: &Path) -> Result<()> {
    let mut w = ArtifactWriter::default();
    let mut hists = Vec::with_capacity(stores.len());
    for (i, path) in stores.iter().enumerate() {
        let store = read_store(path)?;
        let (hist, results) = earliest_top1(&store, norm)?;
        let mut jsonl = String::new();
        for r in &results {
            jsonl.push_str(&serde_json::to_string(r)?);
            jsonl.push('\n');
        }
        w.add(format!("lens_samples_{i}.jsonl"), "jsonl", jsonl);
        hists.push(hist);
    }
    let csv = histogram_csv(&hists, window)?;
    w.add("lens_hist.csv", "csv", csv.clone());
    w.add("lens_norm.txt", "txt", format!("{}\n", norm.name()));
    w.write(out)?;
    print!("{csv}");
    Ok(())
}

fn report(c: ReportCommand) -> Result<()> {
    match c {
        ReportCommand::Stages { curves, hist, out, plateau_fraction, chance_margin } => {
            if !curves.is_dir() {
                return Err(Error::MissingPath(curves));
            }
            let mut paths: Vec<PathBuf> = fs::read_dir(&curves)
                .map_err(|e| Error::io(&curves, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            paths.sort();
            let mut loaded = Vec::new();
            for p in paths {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                if text.starts_with("task,layer,") {
                    loaded.push(LayerCurve::from_csv(&text).map_err(|e| Error::in_stage(p.display().to_string(), e))?);
                }
            }
            let n_layers = loaded.first().map(|c| c.points.len());
            let hists = match &hist {
                Some(p) => {
                    if !p.exists() {
                        return Err(Error::MissingPath(p.clone()));
                    }
                    histogram_from_csv(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?, n_layers)?
                }
                None => Vec::new(),
            };
            let merged = merge_histograms(&hists);
            let report = stage_ordering(&loaded, merged.as_ref(), plateau_fraction, chance_margin);
            let mut w = ArtifactWriter::default();
            collect_artifacts(
                &mut w,
                &ArtifactInputs { curves: &loaded, lens: &hists, lens_window: None, table: None, stages: Some(&report) },
            )?;
            w.write(&out)?;
            print!("{}", report.to_text());
            Ok(())
        }
        ReportCommand::Table { answers, out } => {
            let table = exact_match_table(&read_answers(&answers)?)?;
            let mut w = ArtifactWriter::default();
            collect_artifacts(
                &mut w,
                &ArtifactInputs { curves: &[], lens: &[], lens_window: None, table: Some(&table), stages: None },
            )?;
            w.write(&out)?;
            print!("{}", table.to_csv());
            Ok(())
        }
    }
}

/// Sums per-seed histograms so the modal layer reflects the mean counts.
fn merge_histograms(hists: &[arith_probe::lens::LensHistogram]) -> Option<arith_probe::lens::LensHistogram> {
    let first = hists.first()?.clone();
    Some(hists[1..].iter().fold(first, |mut acc, h| {
        for (a, b) in acc.counts.iter_mut().zip(&h.counts) {
            *a += b;
        }
        acc.never += h.never;
        acc.n_samples += h.n_samples;
        acc
    }))
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        _ => Ok(()),
    }
}

fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::InvalidArgument(format!("seeds must look like `42..46` or `42,43`, got `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a > b {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|x| x.trim().parse().map_err(|_| bad())).collect()
}
