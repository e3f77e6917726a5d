//! Arithmetic problems, labelers, dataset generators and splits.

pub mod dataset;
pub mod generate;
pub mod io;
pub mod problem;

pub use dataset::{
    split_stratified, DigitPosition, LabeledItem, ProbeDataset, SplitName, SplitRatio, Splits, TaskKind, TaskLabelSpec,
};
pub use generate::{
    gen_carry_dataset, gen_crossop_dataset, gen_digit_dataset, gen_logitlens_dataset, gen_structure_dataset,
    gen_sum_range_dataset, structure_class, DigitDatasets, StructureCounts, SUM_RANGE_BASES,
};
pub use io::{read_dataset, write_dataset, DatasetRecord};
pub use problem::{carry_bits, digit_count, digits_lsb, render_prompt, ArithProblem, Operation, TemplateVariant};
