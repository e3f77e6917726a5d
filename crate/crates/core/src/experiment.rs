//! Declarative experiments: dataset generation, activation export (or store
//! import), probe sweeps, lens histograms and report artifacts in one run.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    gen_carry_dataset, gen_crossop_dataset, gen_digit_dataset, gen_logitlens_dataset, gen_structure_dataset,
    gen_sum_range_dataset, io::write_dataset_to, DigitPosition, Operation, ProbeDataset, StructureCounts,
    TemplateVariant, SUM_RANGE_BASES,
};
use crate::error::{Error, Result};
use crate::lens::{earliest_top1, LayerWindow, LensHistogram, LensNorm};
use crate::probe::{crossop_transfer, layer_sweep, LayerCurve, ProbeTrainConfig};
use crate::report::{collect_artifacts, stage_ordering, ArtifactInputs, ArtifactManifest, ArtifactWriter, StageReport};
use crate::store::{read_store, ActivationStore};
use crate::toylm::{export_activations, load_checkpoint, ToyLm};

/// The six experiment families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Structure,
    SumRange,
    Carry,
    Digit,
    Crossop,
    Lens,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Structure => "structure",
            ExperimentKind::SumRange => "sum_range",
            ExperimentKind::Carry => "carry",
            ExperimentKind::Digit => "digit",
            ExperimentKind::Crossop => "crossop",
            ExperimentKind::Lens => "lens",
        }
    }
}

/// Dataset parameters; each experiment reads the fields it needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetParams {
    pub seed: u64,
    pub template: TemplateVariant,
    /// Problems per dataset (carry, digit, crossop, lens).
    pub n: usize,
    /// Operand digit count for the structure task.
    pub digits: u32,
    /// Structure class sizes; `None` clamps the reference sizes to what the
    /// digit range supplies without repeats.
    pub structure_counts: Option<[usize; 3]>,
    pub range_bases: Vec<u64>,
    pub per_class: usize,
    pub positions: Vec<DigitPosition>,
    /// Target operations of the cross-operation experiment.
    pub operations: Vec<Operation>,
}

impl Default for DatasetParams {
    fn default() -> Self {
        Self {
            seed: 1234,
            template: TemplateVariant::Spaced,
            n: 1000,
            digits: 2,
            structure_counts: None,
            range_bases: SUM_RANGE_BASES.to_vec(),
            per_class: 400,
            positions: vec![DigitPosition::Ones, DigitPosition::Tens, DigitPosition::Hundreds],
            operations: vec![Operation::Sub, Operation::Mul],
        }
    }
}

/// Where activations come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSource {
    /// Generate datasets and export activations from a toy checkpoint.
    Toy { checkpoint: PathBuf },
    /// Use already exported stores; several lens stores are averaged.
    Stores { paths: Vec<PathBuf> },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LensParams {
    pub norm: LensNorm,
    /// `all` or `lastN`.
    pub window: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub out_dir: PathBuf,
    pub model: ModelSource,
    #[serde(default)]
    pub dataset: DatasetParams,
    #[serde(default)]
    pub probe: ProbeTrainConfig,
    #[serde(default)]
    pub lens: LensParams,
    /// Also write every activation store into the output directory.
    #[serde(default)]
    pub save_stores: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.probe.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingPath(path.to_path_buf()));
        }
        Self::from_toml(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    /// SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    fn window(&self) -> Result<LayerWindow> {
        self.lens.window.as_deref().map_or(Ok(LayerWindow::All), str::parse)
    }
}

/// Provenance record written next to the artifacts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub kind: ExperimentKind,
    pub config_hash: String,
    pub code_version: String,
    pub probe_seeds: Vec<u64>,
    pub dataset_seed: u64,
    pub template: TemplateVariant,
    pub model_name: String,
    /// SHA-256 of the checkpoint or of each imported store, by path.
    pub inputs: BTreeMap<String, String>,
    pub lens_norm: Option<LensNorm>,
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub out_dir: PathBuf,
    pub manifest: ArtifactManifest,
    pub curves: Vec<LayerCurve>,
    pub lens: Vec<LensHistogram>,
    pub stages: Option<StageReport>,
    pub record: RunRecord,
}

/// Runs one experiment end to end and writes its artifact directory.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutcome> {
    let mut inputs = BTreeMap::new();
    let mut w = ArtifactWriter::default();
    let d = &config.dataset;

    let (model_name, stores): (String, Vec<(String, ActivationStore)>) = match &config.model {
        ModelSource::Toy { checkpoint } => {
            let model = load_checkpoint(checkpoint).map_err(|e| Error::in_stage("load checkpoint", e))?;
            inputs.insert(checkpoint.display().to_string(), file_sha256(checkpoint)?);
            let datasets = build_datasets(config).map_err(|e| Error::in_stage("generate datasets", e))?;
            let mut stores = Vec::with_capacity(datasets.len());
            for (name, ds) in datasets {
                let mut jsonl = Vec::new();
                write_dataset_to(&ds, &mut jsonl)?;
                w.add(format!("datasets/{name}.jsonl"), "jsonl", jsonl);
                let store = export(&model, &ds).map_err(|e| Error::in_stage(format!("export {name}"), e))?;
                stores.push((name, store));
            }
            (model.model_name(), stores)
        }
        ModelSource::Stores { paths } => {
            if paths.is_empty() {
                return Err(Error::InvalidArgument("model source lists no stores".into()));
            }
            let mut stores = Vec::with_capacity(paths.len());
            for p in paths {
                let store = read_store(p).map_err(|e| Error::in_stage(format!("read store {}", p.display()), e))?;
                inputs.insert(p.display().to_string(), file_sha256(p)?);
                let stem = p.file_stem().map_or("store".into(), |s| s.to_string_lossy().into_owned());
                stores.push((stem, store));
            }
            (stores[0].1.header.model_name.clone(), stores)
        }
    };
    if config.save_stores {
        for (name, store) in &stores {
            w.add(format!("stores/{name}.store"), "store", store.encode()?);
        }
    }

    let mut curves = Vec::new();
    let mut lens = Vec::new();
    match config.kind {
        ExperimentKind::Lens => {
            for (name, store) in &stores {
                let (hist, results) =
                    earliest_top1(store, config.lens.norm).map_err(|e| Error::in_stage(format!("lens {name}"), e))?;
                let mut jsonl = String::new();
                for r in &results {
                    jsonl.push_str(&serde_json::to_string(r)?);
                    jsonl.push('\n');
                }
                w.add(format!("lens/{name}.jsonl"), "jsonl", jsonl);
                lens.push(hist);
            }
        }
        ExperimentKind::Crossop => {
            let (source, targets) = split_crossop(&stores)?;
            let own = layer_sweep(source, &config.probe).map_err(|e| Error::in_stage("probe sweep addition", e))?;
            curves.push(own);
            for (name, target) in targets {
                let c = crossop_transfer(source, target, &config.probe)
                    .map_err(|e| Error::in_stage(format!("transfer to {name}"), e))?;
                curves.push(c);
            }
        }
        _ => {
            for (name, store) in &stores {
                let c = layer_sweep(store, &config.probe).map_err(|e| Error::in_stage(format!("probe sweep {name}"), e))?;
                curves.push(c);
            }
        }
    }

    let stages = matches!(
        config.kind,
        ExperimentKind::Structure | ExperimentKind::SumRange | ExperimentKind::Carry | ExperimentKind::Digit
    )
    .then(|| stage_ordering(&curves, None, config.probe.plateau_fraction, config.probe.chance_margin));
    let window = config.window()?;
    collect_artifacts(
        &mut w,
        &ArtifactInputs {
            curves: &curves,
            lens: &lens,
            lens_window: Some(window),
            table: None,
            stages: stages.as_ref(),
        },
    )?;

    let record = RunRecord {
        kind: config.kind,
        config_hash: config.hash(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        probe_seeds: config.probe.seeds.clone(),
        dataset_seed: d.seed,
        template: d.template,
        model_name,
        inputs,
        lens_norm: (config.kind == ExperimentKind::Lens).then_some(config.lens.norm),
    };
    let mut run_json = serde_json::to_string_pretty(&record)?;
    run_json.push('\n');
    w.add("run.json", "json", run_json);
    w.add("config.toml", "toml", config.to_toml());
    let manifest = w.write(&config.out_dir).map_err(|e| Error::in_stage("write artifacts", e))?;
    Ok(ExperimentOutcome { out_dir: config.out_dir.clone(), manifest, curves, lens, stages, record })
}

fn export(model: &ToyLm<f32>, ds: &ProbeDataset) -> Result<ActivationStore> {
    export_activations(model, ds)
}

/// Named datasets an experiment probes, in a fixed order.
pub fn build_datasets(config: &ExperimentConfig) -> Result<Vec<(String, ProbeDataset)>> {
    let d = &config.dataset;
    let tpl = |ds: ProbeDataset| ds.with_template(d.template);
    let named = |ds: ProbeDataset| (ds.spec.tag().replace('/', "-"), tpl(ds));
    let out = match config.kind {
        ExperimentKind::Structure => {
            let counts = match d.structure_counts {
                Some([ab, ba, aa]) => StructureCounts { ab, ba, aa },
                None => StructureCounts::reference_clamped(d.digits)?,
            };
            vec![named(gen_structure_dataset(d.digits, counts, d.seed)?)]
        }
        ExperimentKind::SumRange => {
            gen_sum_range_dataset(&d.range_bases, d.per_class, d.seed)?.into_iter().map(named).collect()
        }
        ExperimentKind::Carry => d
            .positions
            .iter()
            .map(|&p| gen_carry_dataset(p, d.n, d.seed).map(named))
            .collect::<Result<_>>()?,
        ExperimentKind::Digit => {
            let all = gen_digit_dataset(d.n, d.seed)?;
            d.positions.iter().map(|&p| named(all.get(p).clone())).collect()
        }
        ExperimentKind::Crossop => {
            let add = gen_digit_dataset(d.n, d.seed)?.hundreds;
            let mut out = vec![("add".to_string(), tpl(add))];
            for &op in &d.operations {
                out.push((op.name().to_string(), tpl(gen_crossop_dataset(op, d.n, d.seed)?)));
            }
            out
        }
        ExperimentKind::Lens => vec![named(gen_logitlens_dataset(d.n, d.seed)?)],
    };
    Ok(out)
}

/// The first store is the addition source; the rest are transfer targets.
fn split_crossop(stores: &[(String, ActivationStore)]) -> Result<(&ActivationStore, &[(String, ActivationStore)])> {
    match stores {
        [(_, source), rest @ ..] if !rest.is_empty() => Ok((source, rest)),
        _ => Err(Error::InvalidArgument(
            "cross-operation experiments need an addition store followed by at least one target store".into(),
        )),
    }
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path).map_err(|e| Error::io(path, e))?)))
}
