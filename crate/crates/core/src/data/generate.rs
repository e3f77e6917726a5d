//! Seeded generators for every probing dataset.
//!
//! Operands are drawn uniformly over the integers that satisfy each task's
//! constraints (rejection sampling), duplicates by `(a, b, op)` are dropped,
//! and every generator owns a ChaCha8 stream seeded from its `seed`
//! argument, so identical arguments give identical datasets.

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::dataset::{DigitPosition, LabeledItem, ProbeDataset, TaskKind, TaskLabelSpec};
use super::problem::{ArithProblem, Operation, TemplateVariant};
use crate::error::{Error, Result};

/// Structure classes: `a+b` with `a > b`, the swapped `b+a`, and `a+a`.
pub const STRUCTURE_AB: usize = 0;
pub const STRUCTURE_BA: usize = 1;
pub const STRUCTURE_AA: usize = 2;

/// Default sum-range groups.
pub const SUM_RANGE_BASES: [u64; 5] = [500, 600, 700, 800, 900];

fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Inclusive operand range for `digits`-digit numbers. One digit includes 0.
pub fn digit_range(digits: u32) -> Result<(u64, u64)> {
    if !(1..=18).contains(&digits) {
        return Err(Error::InvalidArgument(format!("unsupported digit length {digits}")));
    }
    let hi = 10u64.pow(digits) - 1;
    let lo = if digits == 1 { 0 } else { 10u64.pow(digits - 1) };
    Ok((lo, hi))
}

fn attempt_budget(n: usize) -> usize {
    2_000 * n + 1_000_000
}

/// Label the structure class of an addition problem.
pub fn structure_class(a: u64, b: u64) -> usize {
    use std::cmp::Ordering::*;
    match a.cmp(&b) {
        Greater => STRUCTURE_AB,
        Less => STRUCTURE_BA,
        Equal => STRUCTURE_AA,
    }
}

/// Requested items per structure class.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StructureCounts {
    pub ab: usize,
    pub ba: usize,
    pub aa: usize,
}

impl StructureCounts {
    /// Training-set sizes for two-digit operands: 5000 / 5000 / 80% of the
    /// 90 self-sums. Not satisfiable without repeats, see
    /// [`StructureCounts::capacity`].
    pub const REFERENCE: StructureCounts = StructureCounts { ab: 5000, ba: 5000, aa: 72 };

    /// Largest duplicate-free request for `digits`-digit operands.
    pub fn capacity(digits: u32) -> Result<Self> {
        let (lo, hi) = digit_range(digits)?;
        let m = (hi - lo + 1) as usize;
        Ok(Self { ab: m * (m - 1) / 2, ba: m * (m - 1) / 2, aa: m })
    }

    /// Clamp each class to what the digit range can supply uniquely, keeping
    /// the self-sum class at 80% of its population.
    pub fn reference_clamped(digits: u32) -> Result<Self> {
        let cap = Self::capacity(digits)?;
        Ok(Self {
            ab: Self::REFERENCE.ab.min(cap.ab),
            ba: Self::REFERENCE.ba.min(cap.ba),
            aa: ((cap.aa as f64) * 0.8).round() as usize,
        })
    }
}

/// Three-way structure dataset for `digits`-digit operands.
pub fn gen_structure_dataset(digits: u32, counts: StructureCounts, seed: u64) -> Result<ProbeDataset> {
    let (lo, hi) = digit_range(digits)?;
    let cap = StructureCounts::capacity(digits)?;
    if counts.ab > cap.ab || counts.ba > cap.ba || counts.aa > cap.aa {
        return Err(Error::Generation(format!(
            "{digits}-digit operands supply at most {}/{}/{} unique problems, requested {}/{}/{}",
            cap.ab, cap.ba, cap.aa, counts.ab, counts.ba, counts.aa
        )));
    }
    let mut rng = rng_for(seed);
    let mut items = Vec::with_capacity(counts.ab + counts.ba + counts.aa);

    for (class, n) in [(STRUCTURE_AB, counts.ab), (STRUCTURE_BA, counts.ba)] {
        let mut seen = HashSet::with_capacity(n);
        let mut attempts = 0;
        while seen.len() < n {
            attempts += 1;
            if attempts > attempt_budget(n) {
                return Err(Error::Generation(format!("structure class {class} exhausted")));
            }
            let x = rng.random_range(lo..=hi);
            let y = rng.random_range(lo..=hi);
            if x <= y {
                continue;
            }
            let (a, b) = if class == STRUCTURE_AB { (x, y) } else { (y, x) };
            if seen.insert((a, b)) {
                items.push(LabeledItem { problem: ArithProblem::add(a, b), label: class });
            }
        }
    }

    // Self-sums: choose `aa` distinct operands by partial Fisher-Yates.
    let mut pool: Vec<u64> = (lo..=hi).collect();
    for i in 0..counts.aa {
        let j = rng.random_range(i..pool.len());
        pool.swap(i, j);
        let a = pool[i];
        items.push(LabeledItem { problem: ArithProblem::add(a, a), label: STRUCTURE_AA });
    }

    ProbeDataset::new(TaskLabelSpec::new(TaskKind::Structure3), items, seed)
}

/// One ten-class dataset per base; class `v` holds problems whose sum is
/// exactly `base + v`, with the first addend uniform over `0..=sum`.
pub fn gen_sum_range_dataset(range_bases: &[u64], per_class: usize, seed: u64) -> Result<Vec<ProbeDataset>> {
    let mut rng = rng_for(seed);
    let mut out = Vec::with_capacity(range_bases.len());
    for &base in range_bases {
        let mut items = Vec::with_capacity(per_class * 10);
        for v in 0..10u64 {
            let sum = base + v;
            let capacity = sum as usize + 1;
            if per_class > capacity {
                return Err(Error::Generation(format!(
                    "sum {sum} has only {capacity} addend pairs, {per_class} requested"
                )));
            }
            let mut seen = HashSet::with_capacity(per_class);
            while seen.len() < per_class {
                let a = rng.random_range(0..=sum);
                if seen.insert(a) {
                    items.push(LabeledItem { problem: ArithProblem::add(a, sum - a), label: v as usize });
                }
            }
        }
        let spec = TaskLabelSpec::new(TaskKind::SumRange).with_range_base(base);
        out.push(ProbeDataset::new(spec, items, seed)?);
    }
    Ok(out)
}

/// Class label of `sum` inside the group starting at `base`.
pub fn sum_range_class(sum: u64, base: u64) -> Option<usize> {
    (base..base + 10).contains(&sum).then(|| (sum - base) as usize)
}

/// Balanced carry / no-carry set of three-digit additions.
pub fn gen_carry_dataset(position: DigitPosition, n: usize, seed: u64) -> Result<ProbeDataset> {
    if !n.is_multiple_of(2) {
        return Err(Error::Generation(format!("carry dataset size {n} cannot be split 50/50")));
    }
    let half = n / 2;
    let mut rng = rng_for(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut filled = [0usize; 2];
    let mut items = Vec::with_capacity(n);
    let mut attempts = 0;
    while items.len() < n {
        attempts += 1;
        if attempts > attempt_budget(n) {
            return Err(Error::Generation(format!("carry dataset exhausted at {filled:?}")));
        }
        let a = rng.random_range(100..=999u64);
        let b = rng.random_range(100..=999u64);
        let problem = ArithProblem::add(a, b);
        let label = problem.carry_bits[position.index()] as usize;
        if filled[label] == half || !seen.insert((a, b)) {
            continue;
        }
        filled[label] += 1;
        items.push(LabeledItem { problem, label });
    }
    ProbeDataset::new(TaskLabelSpec::new(TaskKind::CarryPos).at(position), items, seed)
}

/// The three digit-identification datasets over one shared problem set.
#[derive(Clone, Debug, PartialEq)]
pub struct DigitDatasets {
    pub hundreds: ProbeDataset,
    pub tens: ProbeDataset,
    pub ones: ProbeDataset,
}

impl DigitDatasets {
    pub fn get(&self, position: DigitPosition) -> &ProbeDataset {
        match position {
            DigitPosition::Ones => &self.ones,
            DigitPosition::Tens => &self.tens,
            DigitPosition::Hundreds => &self.hundreds,
        }
    }

    pub fn into_vec(self) -> Vec<ProbeDataset> {
        vec![self.hundreds, self.tens, self.ones]
    }
}

fn sample_unique<F>(n: usize, seed: u64, mut draw: F) -> Result<Vec<ArithProblem>>
where
    F: FnMut(&mut ChaCha8Rng) -> Option<ArithProblem>,
{
    let mut rng = rng_for(seed);
    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    let mut attempts = 0;
    while out.len() < n {
        attempts += 1;
        if attempts > attempt_budget(n) {
            return Err(Error::Generation(format!("only {} of {n} unique problems found", out.len())));
        }
        if let Some(p) = draw(&mut rng) {
            if seen.insert(p.key()) {
                out.push(p);
            }
        }
    }
    Ok(out)
}

fn labeled_by_digit(problems: &[ArithProblem], task: TaskKind, position: DigitPosition, seed: u64) -> Result<ProbeDataset> {
    let items = problems
        .iter()
        .map(|p| LabeledItem { problem: p.clone(), label: p.answer_digit(position.index()) as usize })
        .collect();
    ProbeDataset::new(TaskLabelSpec::new(task).at(position), items, seed)
}

/// Addition problems with a three-digit sum. The sum is drawn uniformly from
/// `100..=999` and then split uniformly into two addends, so every digit
/// position of the sum is class-balanced (hundreds over 1..=9).
pub fn gen_digit_dataset(n: usize, seed: u64) -> Result<DigitDatasets> {
    let problems = sample_unique(n, seed, |rng| {
        let sum = rng.random_range(100..=999u64);
        let a = rng.random_range(0..=sum);
        Some(ArithProblem::add(a, sum - a))
    })?;
    Ok(DigitDatasets {
        hundreds: labeled_by_digit(&problems, TaskKind::DigitPos, DigitPosition::Hundreds, seed)?,
        tens: labeled_by_digit(&problems, TaskKind::DigitPos, DigitPosition::Tens, seed)?,
        ones: labeled_by_digit(&problems, TaskKind::DigitPos, DigitPosition::Ones, seed)?,
    })
}

/// Subtraction or multiplication problems with operands in `0..=999` and a
/// three-digit result, labeled by the result's hundreds digit.
pub fn gen_crossop_dataset(operation: Operation, n: usize, seed: u64) -> Result<ProbeDataset> {
    if operation == Operation::Add {
        return Err(Error::InvalidArgument(
            "cross-operation sets are subtraction or multiplication; use the digit dataset for addition".into(),
        ));
    }
    let problems = sample_unique(n, seed, |rng| {
        let a = rng.random_range(0..=999u64);
        let b = rng.random_range(0..=999u64);
        let result = operation.apply(a, b).ok()?;
        if !(100..=999).contains(&result) {
            return None;
        }
        ArithProblem::new(a, b, operation, TemplateVariant::default()).ok()
    })?;
    labeled_by_digit(&problems, TaskKind::CrossopDigit, DigitPosition::Hundreds, seed)
}

/// Three-digit addends with a three-digit sum. Labeled by the sum's
/// hundreds digit; the gold next token is resolved later per tokenizer.
pub fn gen_logitlens_dataset(n: usize, seed: u64) -> Result<ProbeDataset> {
    let problems = sample_unique(n, seed, |rng| {
        let a = rng.random_range(100..=999u64);
        let b = rng.random_range(100..=999u64);
        (a + b <= 999).then(|| ArithProblem::add(a, b))
    })?;
    labeled_by_digit(&problems, TaskKind::Logitlens, DigitPosition::Hundreds, seed)
}

/// Whether `(a, b)` is admissible for the logit-lens set.
pub fn logitlens_admissible(a: u64, b: u64) -> bool {
    (100..=999).contains(&a) && (100..=999).contains(&b) && (100..=999).contains(&(a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn structure_labels() {
        assert_eq!(structure_class(66, 66), STRUCTURE_AA);
        assert_eq!(structure_class(23, 45), STRUCTURE_BA);
        assert_eq!(structure_class(45, 23), STRUCTURE_AB);
    }

    #[test]
    fn reference_structure_counts_exceed_unique_pairs() {
        let cap = StructureCounts::capacity(2).unwrap();
        assert_eq!(cap, StructureCounts { ab: 4005, ba: 4005, aa: 90 });
        assert!(matches!(
            gen_structure_dataset(2, StructureCounts::REFERENCE, 42),
            Err(Error::Generation(_))
        ));
        assert_eq!(
            StructureCounts::reference_clamped(2).unwrap(),
            StructureCounts { ab: 4005, ba: 4005, aa: 72 }
        );
    }

    #[test]
    fn structure_dataset_counts() {
        let counts = StructureCounts::reference_clamped(2).unwrap();
        let ds = gen_structure_dataset(2, counts, 42).unwrap();
        assert_eq!(ds.class_counts(), vec![4005, 4005, 72]);
        for it in &ds.items {
            let p = &it.problem;
            assert!((10..=99).contains(&p.op_a) && (10..=99).contains(&p.op_b));
            assert_eq!(it.label, structure_class(p.op_a, p.op_b));
        }
    }

    #[test]
    fn structure_rejects_small_range() {
        let err = gen_structure_dataset(1, StructureCounts { ab: 100, ba: 1, aa: 1 }, 0);
        assert!(err.is_err());
        assert!(gen_structure_dataset(1, StructureCounts { ab: 45, ba: 45, aa: 8 }, 0).is_ok());
    }

    #[test]
    fn sum_range_shapes() {
        let sets = gen_sum_range_dataset(&SUM_RANGE_BASES, 400, 42).unwrap();
        assert_eq!(sets.len(), 5);
        for (ds, base) in sets.iter().zip(SUM_RANGE_BASES) {
            assert_eq!(ds.class_counts(), vec![400; 10]);
            for it in &ds.items {
                assert_eq!(sum_range_class(it.problem.answer, base), Some(it.label));
            }
            let pairs: HashSet<_> = ds.items.iter().map(|it| (it.problem.op_a, it.problem.op_b)).collect();
            assert_eq!(pairs.len(), ds.len());
        }
        assert_eq!(sum_range_class(250 + 255, 500), Some(5));
    }

    #[test]
    fn sum_range_capacity_error() {
        assert!(gen_sum_range_dataset(&[5], 7, 0).is_err());
    }

    #[test]
    fn carry_balanced() {
        for pos in DigitPosition::ALL {
            let ds = gen_carry_dataset(pos, 1000, 42).unwrap();
            assert_eq!(ds.class_counts(), vec![500, 500]);
        }
        assert!(gen_carry_dataset(DigitPosition::Ones, 7, 1).is_err());
    }

    #[test]
    fn digit_sets_share_problems() {
        let d = gen_digit_dataset(500, 42).unwrap();
        for i in 0..500 {
            let p = &d.ones.items[i].problem;
            assert_eq!(p, &d.hundreds.items[i].problem);
            assert!((100..=999).contains(&p.answer));
            assert_eq!(d.hundreds.items[i].label as u64, p.answer / 100);
            assert_eq!(d.tens.items[i].label as u64, p.answer / 10 % 10);
            assert_eq!(d.ones.items[i].label as u64, p.answer % 10);
        }
    }

    #[test]
    fn digit_labels_pass_chi_square_balance() {
        // Critical values at p = 0.001: 27.88 for 9 degrees of freedom,
        // 26.12 for 8.
        fn chi_square(counts: &[usize]) -> f64 {
            let n: usize = counts.iter().sum();
            let expected = n as f64 / counts.len() as f64;
            counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum()
        }
        let sets = gen_digit_dataset(1000, 42).unwrap();
        assert!(chi_square(&sets.ones.class_counts()) < 27.88);
        assert!(chi_square(&sets.tens.class_counts()) < 27.88);
        let hundreds = sets.hundreds.class_counts();
        assert_eq!(hundreds[0], 0);
        assert!(chi_square(&hundreds[1..]) < 26.12);
    }

    #[test]
    fn crossop_results_are_three_digit() {
        for op in [Operation::Sub, Operation::Mul] {
            let ds = gen_crossop_dataset(op, 1000, 42).unwrap();
            assert_eq!(ds.len(), 1000);
            for it in &ds.items {
                assert!((100..=999).contains(&it.problem.answer));
                assert_eq!(it.problem.operation, op);
                assert_eq!(it.label as u64, it.problem.answer / 100);
            }
        }
        assert!(gen_crossop_dataset(Operation::Add, 10, 0).is_err());
    }

    #[test]
    fn logitlens_constraints() {
        assert!(logitlens_admissible(123, 456));
        assert!(!logitlens_admissible(900, 900));
        let ds = gen_logitlens_dataset(1000, 42).unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(ds.items.iter().all(|it| logitlens_admissible(it.problem.op_a, it.problem.op_b)));
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(gen_carry_dataset(DigitPosition::Tens, 200, 9).unwrap(), gen_carry_dataset(DigitPosition::Tens, 200, 9).unwrap());
        assert_ne!(gen_carry_dataset(DigitPosition::Tens, 200, 9).unwrap(), gen_carry_dataset(DigitPosition::Tens, 200, 10).unwrap());
    }
}
