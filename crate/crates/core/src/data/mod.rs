//! Dataset generators and loaders.
//!
//! Synthetic tasks are infinite streams of fresh i.i.d. samples drawn from a
//! named random stream; evaluation uses a fixed-seed stream so every
//! evaluation sees the same held-out data. Targets are class indices per
//! 10-way output group (a two-digit number is two groups).

mod addmul;
mod double_add;
mod mnist;
mod permute;

pub use addmul::{encode_addmul, AddMulGen, ArithOp};
pub use double_add::{encode_double_add, DoubleAddGen, DoubleAddView};
pub use mnist::{
    load_mnist_idx, synth_digits, verify_sha256, write_idx_images, write_idx_labels, MnistData,
    MnistStream,
};
pub use permute::{apply_permutation, make_permutation_sequence};

use crate::element::Element;
use crate::tensor::Tensor;

/// Per-sample metadata carried alongside encoded tensors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMeta {
    AddMul { a: u8, b: u8, op: ArithOp },
    DoubleAdd { a: u8, b: u8, c: u8, d: u8 },
    Classify { label: u8 },
}

/// One step's worth of data.
///
/// `inputs` holds one tensor per presentation segment (a single tensor for
/// everything except the forced LSTM schedule). `targets[g][i]` is the
/// class of sample `i` in output group `g`; `active_groups` lists the
/// groups the loss and accuracy are read from.
#[derive(Debug, Clone)]
pub struct Batch<E> {
    pub inputs: Vec<Tensor<E>>,
    pub targets: Vec<Vec<usize>>,
    pub active_groups: Vec<usize>,
    pub meta: Vec<SampleMeta>,
}

impl<E: Element> Batch<E> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Contiguous sub-batch `[start, start+len)` (used to give each mask
    /// sample its own part of the batch).
    pub fn slice_rows(&self, start: usize, len: usize) -> Batch<E> {
        let inputs = self
            .inputs
            .iter()
            .map(|t| {
                let (_, cols) = t.dims2().expect("batch inputs are rank 2");
                Tensor::new(
                    vec![len, cols],
                    t.data()[start * cols..(start + len) * cols].to_vec(),
                )
                .expect("sized slice")
            })
            .collect();
        Batch {
            inputs,
            targets: self
                .targets
                .iter()
                .map(|g| g[start..start + len].to_vec())
                .collect(),
            active_groups: self.active_groups.clone(),
            meta: self.meta[start..start + len].to_vec(),
        }
    }
}

/// Restriction of a task to a subset of its samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Filter {
    All,
    /// Only samples with this operation (add/mul task).
    Op(ArithOp),
    /// Only one pair of the double-addition task: the other pair's input
    /// block is zeroed and only this pair's output groups are active.
    Pair(u8),
    /// Drop samples of this class (leave-one-class-out).
    ExcludeClass(u8),
    /// Keep only samples of this class.
    OnlyClass(u8),
}

impl Filter {
    pub fn matches(&self, meta: &SampleMeta) -> bool {
        match (self, meta) {
            (Filter::All, _) => true,
            (Filter::Op(op), SampleMeta::AddMul { op: sample_op, .. }) => op == sample_op,
            (Filter::Pair(_), SampleMeta::DoubleAdd { .. }) => true,
            (Filter::ExcludeClass(c), SampleMeta::Classify { label }) => label != c,
            (Filter::OnlyClass(c), SampleMeta::Classify { label }) => label == c,
            _ => false,
        }
    }

    /// Parse the textual form used in config files: `all`, `op=add`,
    /// `op=mul`, `pair=1`, `pair=2`, `class!=7`, `class=7`.
    pub fn parse(s: &str) -> crate::Result<Filter> {
        let s = s.trim();
        if s.is_empty() || s == "all" {
            return Ok(Filter::All);
        }
        if let Some(op) = s.strip_prefix("op=") {
            return match op {
                "add" => Ok(Filter::Op(ArithOp::Add)),
                "mul" => Ok(Filter::Op(ArithOp::Mul)),
                other => Err(crate::Error::Config(format!("unknown operation {other:?}"))),
            };
        }
        if let Some(p) = s.strip_prefix("pair=") {
            let p: u8 = p
                .parse()
                .map_err(|_| crate::Error::Config(format!("bad pair index {p:?}")))?;
            if p != 1 && p != 2 {
                return Err(crate::Error::Config(format!("pair must be 1 or 2, got {p}")));
            }
            return Ok(Filter::Pair(p));
        }
        if let Some(c) = s.strip_prefix("class!=") {
            let c = c
                .parse()
                .map_err(|_| crate::Error::Config(format!("bad class {c:?}")))?;
            return Ok(Filter::ExcludeClass(c));
        }
        if let Some(c) = s.strip_prefix("class=") {
            let c = c
                .parse()
                .map_err(|_| crate::Error::Config(format!("bad class {c:?}")))?;
            return Ok(Filter::OnlyClass(c));
        }
        Err(crate::Error::Config(format!("cannot parse filter {s:?}")))
    }
}

impl std::fmt::Display for Filter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Filter::All => write!(f, "all"),
            Filter::Op(ArithOp::Add) => write!(f, "op=add"),
            Filter::Op(ArithOp::Mul) => write!(f, "op=mul"),
            Filter::Pair(p) => write!(f, "pair={p}"),
            Filter::ExcludeClass(c) => write!(f, "class!={c}"),
            Filter::OnlyClass(c) => write!(f, "class={c}"),
        }
    }
}

/// Writes a 10-way one-hot block for one digit.
pub(crate) fn onehot_digit<E: Element>(buf: &mut [E], offset: usize, digit: usize) {
    buf[offset + digit] = E::one();
}

/// Tens/units digits of a value in [0, 99].
pub(crate) fn digits(value: usize) -> (usize, usize) {
    (value / 10, value % 10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_parse_roundtrip() {
        for s in ["all", "op=add", "op=mul", "pair=1", "pair=2", "class!=7", "class=3"] {
            let f = Filter::parse(s).unwrap();
            assert_eq!(f.to_string(), s);
        }
        assert_eq!(Filter::parse("").unwrap(), Filter::All);
        assert!(Filter::parse("op=div").is_err());
        assert!(Filter::parse("pair=3").is_err());
        assert!(Filter::parse("bogus").is_err());
    }

    #[test]
    fn complement_filters_partition_metadata() {
        let metas = [
            SampleMeta::Classify { label: 3 },
            SampleMeta::Classify { label: 7 },
            SampleMeta::AddMul { a: 1, b: 2, op: ArithOp::Add },
            SampleMeta::AddMul { a: 1, b: 2, op: ArithOp::Mul },
        ];
        for meta in &metas[..2] {
            let keep = Filter::OnlyClass(3).matches(meta);
            let drop = Filter::ExcludeClass(3).matches(meta);
            assert!(keep ^ drop);
        }
        for meta in &metas[2..] {
            let add = Filter::Op(ArithOp::Add).matches(meta);
            let mul = Filter::Op(ArithOp::Mul).matches(meta);
            assert!(add ^ mul);
        }
    }
}
