//! Line-delimited JSON dataset files, one record per item.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::{DigitPosition, LabeledItem, ProbeDataset, SplitName, Splits, TaskKind, TaskLabelSpec};
use super::problem::{ArithProblem, Operation, TemplateVariant};
use crate::error::{Error, Result};

/// One dataset line. Field order is part of the file format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub a: u64,
    pub b: u64,
    pub op: Operation,
    pub prompt: String,
    pub label: usize,
    pub split: SplitName,
    pub seed: u64,
    pub task: TaskKind,
    pub k: usize,
    pub position: Option<DigitPosition>,
    pub range_base: Option<u64>,
    pub template: TemplateVariant,
}

pub fn dataset_records(ds: &ProbeDataset) -> Result<Vec<DatasetRecord>> {
    let assignment = ds.splits.assignment(ds.len());
    ds.items
        .iter()
        .zip(assignment)
        .enumerate()
        .map(|(i, (it, split))| {
            let split = split.ok_or_else(|| Error::InvalidArgument(format!("item {i} is in no split")))?;
            Ok(DatasetRecord {
                a: it.problem.op_a,
                b: it.problem.op_b,
                op: it.problem.operation,
                prompt: it.problem.prompt.clone(),
                label: it.label,
                split,
                seed: ds.seed,
                task: ds.spec.task_kind,
                k: ds.spec.num_classes,
                position: ds.spec.position,
                range_base: ds.spec.range_base,
                template: ds.template,
            })
        })
        .collect()
}

pub fn write_dataset_to<W: Write>(ds: &ProbeDataset, mut w: W) -> Result<()> {
    for rec in dataset_records(ds)? {
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io("<writer>", e))?;
    }
    Ok(())
}

pub fn write_dataset(ds: &ProbeDataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_dataset_to(ds, &mut w)?;
    w.flush().map_err(|e| Error::io(path, e))
}

/// Parse a dataset, re-deriving every label-bearing field from `(a, b, op)`
/// and rejecting records whose prompt or schema disagree.
pub fn read_dataset_from<R: Read>(r: R) -> Result<ProbeDataset> {
    let mut records = Vec::new();
    for (lineno, line) in BufReader::new(r).lines().enumerate() {
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DatasetRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("dataset line {}: {e}", lineno + 1)))?;
        records.push(rec);
    }
    let first = records
        .first()
        .ok_or_else(|| Error::Format("dataset file has no records".into()))?
        .clone();
    let spec = TaskLabelSpec {
        task_kind: first.task,
        num_classes: first.k,
        position: first.position,
        range_base: first.range_base,
    };
    let mut items = Vec::with_capacity(records.len());
    let mut splits = Splits::default();
    for (i, rec) in records.into_iter().enumerate() {
        if rec.task != spec.task_kind
            || rec.k != spec.num_classes
            || rec.position != spec.position
            || rec.range_base != spec.range_base
            || rec.seed != first.seed
            || rec.template != first.template
        {
            return Err(Error::Format(format!("record {i} disagrees with the dataset header fields")));
        }
        let problem = ArithProblem::new(rec.a, rec.b, rec.op, rec.template)?;
        if problem.prompt != rec.prompt {
            return Err(Error::Format(format!(
                "record {i}: prompt {:?} does not match template rendering {:?}",
                rec.prompt, problem.prompt
            )));
        }
        match rec.split {
            SplitName::Train => splits.train.push(i),
            SplitName::Val => splits.val.push(i),
            SplitName::Test => splits.test.push(i),
        }
        items.push(LabeledItem { problem, label: rec.label });
    }
    ProbeDataset::from_parts(spec, items, splits, first.seed, first.template)
}

pub fn read_dataset(path: &Path) -> Result<ProbeDataset> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset_from(file)
}
