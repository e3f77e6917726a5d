use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::problem::{ArithProblem, TemplateVariant};
use crate::error::{Error, Result};

/// Which experiment a dataset (and every store derived from it) belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Structure3,
    SumRange,
    CarryPos,
    DigitPos,
    CrossopDigit,
    Logitlens,
}

impl TaskKind {
    pub const ALL: [TaskKind; 6] = [
        TaskKind::Structure3,
        TaskKind::SumRange,
        TaskKind::CarryPos,
        TaskKind::DigitPos,
        TaskKind::CrossopDigit,
        TaskKind::Logitlens,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Structure3 => "structure3",
            TaskKind::SumRange => "sum_range",
            TaskKind::CarryPos => "carry_pos",
            TaskKind::DigitPos => "digit_pos",
            TaskKind::CrossopDigit => "crossop_digit",
            TaskKind::Logitlens => "logitlens",
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            TaskKind::Structure3 => 3,
            TaskKind::CarryPos => 2,
            _ => 10,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TaskKind::Structure3 => 0,
            TaskKind::SumRange => 1,
            TaskKind::CarryPos => 2,
            TaskKind::DigitPos => 3,
            TaskKind::CrossopDigit => 4,
            TaskKind::Logitlens => 5,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.code() == code)
            .ok_or_else(|| Error::Format(format!("unknown task code {code}")))
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "structure3" | "structure" => TaskKind::Structure3,
            "sum_range" | "sum-range" => TaskKind::SumRange,
            "carry_pos" | "carry" => TaskKind::CarryPos,
            "digit_pos" | "digit" => TaskKind::DigitPos,
            "crossop_digit" | "crossop" => TaskKind::CrossopDigit,
            "logitlens" | "lens" => TaskKind::Logitlens,
            other => return Err(Error::InvalidArgument(format!("unknown task `{other}`"))),
        };
        Ok(kind)
    }
}

/// Decimal column, ones = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigitPosition {
    Ones,
    Tens,
    Hundreds,
}

impl DigitPosition {
    pub const ALL: [DigitPosition; 3] = [DigitPosition::Ones, DigitPosition::Tens, DigitPosition::Hundreds];

    pub fn index(self) -> usize {
        match self {
            DigitPosition::Ones => 0,
            DigitPosition::Tens => 1,
            DigitPosition::Hundreds => 2,
        }
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("digit position {i} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            DigitPosition::Ones => "ones",
            DigitPosition::Tens => "tens",
            DigitPosition::Hundreds => "hundreds",
        }
    }
}

impl FromStr for DigitPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ones" | "units" | "0" => Ok(DigitPosition::Ones),
            "tens" | "1" => Ok(DigitPosition::Tens),
            "hundreds" | "2" => Ok(DigitPosition::Hundreds),
            other => Err(Error::InvalidArgument(format!("unknown digit position `{other}`"))),
        }
    }
}

/// Label schema of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskLabelSpec {
    pub task_kind: TaskKind,
    pub num_classes: usize,
    pub position: Option<DigitPosition>,
    pub range_base: Option<u64>,
}

impl TaskLabelSpec {
    pub fn new(task_kind: TaskKind) -> Self {
        Self {
            task_kind,
            num_classes: task_kind.num_classes(),
            position: None,
            range_base: None,
        }
    }

    pub fn at(mut self, position: DigitPosition) -> Self {
        self.position = Some(position);
        self
    }

    pub fn with_range_base(mut self, base: u64) -> Self {
        self.range_base = Some(base);
        self
    }

    /// Short human-readable tag, e.g. `carry_pos/tens` or `sum_range/700`.
    pub fn tag(&self) -> String {
        let mut tag = self.task_kind.name().to_string();
        if let Some(p) = self.position {
            tag.push('/');
            tag.push_str(p.name());
        }
        if let Some(b) = self.range_base {
            tag.push_str(&format!("/{b}"));
        }
        tag
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledItem {
    pub problem: ArithProblem,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

/// Disjoint index sets over a dataset's items, each sorted ascending.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &[usize] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// Split membership per item index; `None` for uncovered indices.
    pub fn assignment(&self, n: usize) -> Vec<Option<SplitName>> {
        let mut out = vec![None; n];
        for (name, idx) in [
            (SplitName::Train, &self.train),
            (SplitName::Val, &self.val),
            (SplitName::Test, &self.test),
        ] {
            for &i in idx {
                if i < n {
                    out[i] = Some(name);
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fractions used by [`split_stratified`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatio {
    /// Share of each class sent to test.
    pub test: f64,
    /// Share of each class's non-test items carved out for validation.
    pub val_of_train: f64,
}

impl Default for SplitRatio {
    fn default() -> Self {
        Self {
            test: 0.2,
            val_of_train: 0.1,
        }
    }
}

/// Per-class shuffled split. Every class with at least two items contributes
/// at least one item to train and one to test; each per-class count is
/// within one item of its exact fractional target. Depends only on the label
/// sequence, the ratio and the seed.
pub fn split_stratified(labels: &[usize], num_classes: usize, ratio: SplitRatio, seed: u64) -> Result<Splits> {
    if !(0.0..1.0).contains(&ratio.test) || !(0.0..1.0).contains(&ratio.val_of_train) {
        return Err(Error::InvalidArgument(format!("split ratio out of range: {ratio:?}")));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("label {y} at item {i} not below K={num_classes}")));
        }
        by_class[y].push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for (class, mut idx) in by_class.into_iter().enumerate() {
        let count = idx.len();
        match count {
            0 => continue,
            1 => return Err(Error::Stratify { class, count }),
            _ => {}
        }
        idx.shuffle(&mut rng);
        let n_test = ((count as f64 * ratio.test).round() as usize).clamp(1, count - 1);
        let n_rest = count - n_test;
        let n_val = ((n_rest as f64 * ratio.val_of_train).round() as usize).min(n_rest - 1);
        splits.test.extend_from_slice(&idx[..n_test]);
        splits.val.extend_from_slice(&idx[n_test..n_test + n_val]);
        splits.train.extend_from_slice(&idx[n_test + n_val..]);
    }
    splits.train.sort_unstable();
    splits.val.sort_unstable();
    splits.test.sort_unstable();
    Ok(splits)
}

fn validate_items(spec: &TaskLabelSpec, items: &[LabeledItem]) -> Result<()> {
    let mut seen = HashSet::with_capacity(items.len());
    for (i, item) in items.iter().enumerate() {
        if item.label >= spec.num_classes {
            return Err(Error::InvalidArgument(format!(
                "item {i} has label {} but K = {}",
                item.label, spec.num_classes
            )));
        }
        if !seen.insert(item.problem.key()) {
            let (a, b, op) = item.problem.key();
            return Err(Error::Generation(format!("duplicate problem ({a}, {b}, {op}) at item {i}")));
        }
    }
    Ok(())
}

/// A labeled prompt collection for one probing task.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeDataset {
    pub spec: TaskLabelSpec,
    pub items: Vec<LabeledItem>,
    pub splits: Splits,
    pub seed: u64,
    pub template: TemplateVariant,
}

impl ProbeDataset {
    /// Validates labels and uniqueness, then applies the default stratified split.
    pub fn new(spec: TaskLabelSpec, items: Vec<LabeledItem>, seed: u64) -> Result<Self> {
        validate_items(&spec, &items)?;
        let labels: Vec<usize> = items.iter().map(|it| it.label).collect();
        let splits = split_stratified(&labels, spec.num_classes, SplitRatio::default(), seed)?;
        Ok(Self {
            spec,
            items,
            splits,
            seed,
            template: TemplateVariant::default(),
        })
    }

    /// Assemble from explicit splits, which must partition the item indices.
    pub fn from_parts(
        spec: TaskLabelSpec,
        items: Vec<LabeledItem>,
        splits: Splits,
        seed: u64,
        template: TemplateVariant,
    ) -> Result<Self> {
        validate_items(&spec, &items)?;
        let mut covered = vec![false; items.len()];
        for &i in splits.train.iter().chain(&splits.val).chain(&splits.test) {
            match covered.get_mut(i) {
                Some(c) if !*c => *c = true,
                Some(_) => return Err(Error::InvalidArgument(format!("item {i} appears in two splits"))),
                None => return Err(Error::InvalidArgument(format!("split index {i} out of range"))),
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::InvalidArgument(format!("item {i} is in no split")));
        }
        Ok(Self { spec, items, splits, seed, template })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.items.iter().map(|it| it.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.spec.num_classes];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }

    /// Re-renders every prompt with another template variant.
    pub fn with_template(mut self, variant: TemplateVariant) -> Self {
        for it in &mut self.items {
            it.problem.rerender(variant);
        }
        self.template = variant;
        self
    }

    /// Re-splits with a different ratio or seed.
    pub fn resplit(&mut self, ratio: SplitRatio, seed: u64) -> Result<()> {
        self.splits = split_stratified(&self.labels(), self.spec.num_classes, ratio, seed)?;
        self.seed = seed;
        Ok(())
    }
}
