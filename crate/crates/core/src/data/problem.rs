use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary arithmetic operation applied to two non-negative operands.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Operation {
    Add,
    Sub,
    Mul,
}

impl Operation {
    /// The operator character used in rendered prompts.
    pub fn symbol(self) -> char {
        match self {
            Operation::Add => '+',
            Operation::Sub => '-',
            Operation::Mul => '*',
        }
    }

    /// Exact result. Subtraction below zero and overflow are errors.
    pub fn apply(self, a: u64, b: u64) -> Result<u64> {
        let out = match self {
            Operation::Add => a.checked_add(b),
            Operation::Sub => a.checked_sub(b),
            Operation::Mul => a.checked_mul(b),
        };
        out.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{a} {} {b} has no non-negative 64-bit result",
                self.symbol()
            ))
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Operation::Add => "add",
            Operation::Sub => "sub",
            Operation::Mul => "mul",
        }
    }
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Operation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "add" | "+" => Ok(Operation::Add),
            "sub" | "-" => Ok(Operation::Sub),
            "mul" | "*" => Ok(Operation::Mul),
            other => Err(Error::InvalidArgument(format!("unknown operation `{other}`"))),
        }
    }
}

/// Spacing around the operator in the prompt template.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateVariant {
    /// `Calculate: 45+23 = `
    Compact,
    /// `Calculate: 45 + 23 = `
    #[default]
    Spaced,
}

impl TemplateVariant {
    pub fn name(self) -> &'static str {
        match self {
            TemplateVariant::Compact => "compact",
            TemplateVariant::Spaced => "spaced",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            TemplateVariant::Compact => 0,
            TemplateVariant::Spaced => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(TemplateVariant::Compact),
            1 => Ok(TemplateVariant::Spaced),
            other => Err(Error::Format(format!("unknown template code {other}"))),
        }
    }
}

impl fmt::Display for TemplateVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TemplateVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "compact" => Ok(TemplateVariant::Compact),
            "spaced" => Ok(TemplateVariant::Spaced),
            other => Err(Error::InvalidArgument(format!("unknown template `{other}`"))),
        }
    }
}

/// Render the query prompt. The trailing space is part of the prompt: the
/// hidden state at that position is the one every diagnostic reads.
pub fn render_prompt(a: u64, b: u64, operation: Operation, variant: TemplateVariant) -> String {
    let op = operation.symbol();
    match variant {
        TemplateVariant::Compact => format!("Calculate: {a}{op}{b} = "),
        TemplateVariant::Spaced => format!("Calculate: {a} {op} {b} = "),
    }
}

/// Base-10 digits, least significant first. Zero has the single digit 0.
pub fn digits_lsb(mut n: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(20);
    loop {
        out.push((n % 10) as u8);
        n /= 10;
        if n == 0 {
            return out;
        }
    }
}

/// Number of decimal digits in `n` (1 for zero).
pub fn digit_count(n: u64) -> usize {
    digits_lsb(n).len()
}

/// Column-wise carry flags of the schoolbook sum `a + b`, least significant
/// column first. Flag `i` is set when column `i` carries into column `i + 1`.
/// One flag per column of `max(a, b)`.
pub fn carry_bits(a: u64, b: u64) -> Vec<u8> {
    let columns = digit_count(a.max(b));
    let mut flags = Vec::with_capacity(columns);
    let (mut a, mut b, mut carry) = (a, b, 0u64);
    for _ in 0..columns {
        carry = u64::from((a % 10 + b % 10 + carry) >= 10);
        flags.push(carry as u8);
        a /= 10;
        b /= 10;
    }
    flags
}

/// One arithmetic query with its rendered prompt and derived labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArithProblem {
    pub op_a: u64,
    pub op_b: u64,
    pub operation: Operation,
    pub prompt: String,
    pub answer: u64,
    /// Least significant first.
    pub answer_digits: Vec<u8>,
    /// Least significant first; empty unless `operation` is addition.
    pub carry_bits: Vec<u8>,
}

impl ArithProblem {
    pub fn new(op_a: u64, op_b: u64, operation: Operation, variant: TemplateVariant) -> Result<Self> {
        let answer = operation.apply(op_a, op_b)?;
        let carry_bits = match operation {
            Operation::Add => carry_bits(op_a, op_b),
            _ => Vec::new(),
        };
        Ok(Self {
            op_a,
            op_b,
            operation,
            prompt: render_prompt(op_a, op_b, operation, variant),
            answer,
            answer_digits: digits_lsb(answer),
            carry_bits,
        })
    }

    pub fn add(op_a: u64, op_b: u64) -> Self {
        Self::new(op_a, op_b, Operation::Add, TemplateVariant::default())
            .expect("addition of two u64 below 2^63 cannot fail")
    }

    /// Digit of the answer at `position` (0 = ones); zero beyond the top digit.
    pub fn answer_digit(&self, position: usize) -> u8 {
        self.answer_digits.get(position).copied().unwrap_or(0)
    }

    /// Canonical decimal rendering of the answer.
    pub fn answer_text(&self) -> String {
        self.answer.to_string()
    }

    pub fn key(&self) -> (u64, u64, Operation) {
        (self.op_a, self.op_b, self.operation)
    }

    pub fn rerender(&mut self, variant: TemplateVariant) {
        self.prompt = render_prompt(self.op_a, self.op_b, self.operation, variant);
    }
}
