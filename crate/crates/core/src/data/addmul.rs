//! Modulo-100 addition/multiplication with a shared input/output interface.
//!
//! Operands are two-digit numbers encoded as two 10-way one-hot vectors
//! each; a 2-way one-hot selects the operation. Input is 42-dimensional,
//! the target `(a op b) mod 100` is two 10-way groups (20 outputs).

use crate::data::{digits, onehot_digit, Batch, Filter, SampleMeta};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const INPUT_DIM: usize = 42;


#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArithOp {
    Add,
    Mul,
}

impl ArithOp {
    pub fn apply(self, a: usize, b: usize) -> usize {
        match self {
            ArithOp::Add => (a + b) % 100,
            ArithOp::Mul => (a * b) % 100,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            ArithOp::Add => "add",
            ArithOp::Mul => "mul",
        }
    }
}

/// 42-dim encoding: tens/units of `a`, tens/units of `b`, operation.
pub fn encode_addmul<E: Element>(a: usize, b: usize, op: ArithOp) -> Vec<E> {
    debug_assert!(a < 100 && b < 100);
    let mut x = vec![E::zero(); INPUT_DIM];
    let (at, au) = digits(a);
    let (bt, bu) = digits(b);
    onehot_digit(&mut x, 0, at);
    onehot_digit(&mut x, 10, au);
    onehot_digit(&mut x, 20, bt);
    onehot_digit(&mut x, 30, bu);
    x[40 + matches!(op, ArithOp::Mul) as usize] = E::one();
    x
}

/// Uniform sampler over operands and operations. A filter restricts the
/// stream by resampling until the predicate matches, preserving batch size.
#[derive(Debug, Clone)]
pub struct AddMulGen {
    pub filter: Filter,
}

impl AddMulGen {
    pub fn new(filter: Filter) -> Result<Self> {
        match filter {
            Filter::All | Filter::Op(_) => Ok(AddMulGen { filter }),
            other => Err(Error::Data(format!(
                "filter {other} does not apply to the add/mul task"
            ))),
        }
    }

    pub fn batch<E: Element>(&self, n: usize, rng: &mut Stream) -> Batch<E> {
        let mut inputs = Vec::with_capacity(n * INPUT_DIM);
        let mut tens = Vec::with_capacity(n);
        let mut units = Vec::with_capacity(n);
        let mut meta = Vec::with_capacity(n);
        for _ in 0..n {
            let (a, b, op) = loop {
                let a = rng.below(100);
                let b = rng.below(100);
                let op = if rng.below(2) == 0 { ArithOp::Add } else { ArithOp::Mul };
                let m = SampleMeta::AddMul { a: a as u8, b: b as u8, op };
                if self.filter.matches(&m) {
                    break (a, b, op);
                }
            };
            inputs.extend(encode_addmul::<E>(a, b, op));
            let (t, u) = digits(op.apply(a, b));
            tens.push(t);
            units.push(u);
            meta.push(SampleMeta::AddMul { a: a as u8, b: b as u8, op });
        }
        Batch {
            inputs: vec![Tensor::new(vec![n, INPUT_DIM], inputs).expect("sized")],
            targets: vec![tens, units],
            active_groups: vec![0, 1],
            meta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{SeedPool, StreamKind};

    #[test]
    fn encoding_and_targets_for_known_samples() {
        // 07 + 25 = 32 -> digits (3, 2)
        let x = encode_addmul::<f64>(7, 25, ArithOp::Add);
        assert_eq!(x[0], 1.0); // tens of a = 0
        assert_eq!(x[10 + 7], 1.0); // units of a = 7
        assert_eq!(x[20 + 2], 1.0); // tens of b = 2
        assert_eq!(x[30 + 5], 1.0); // units of b = 5
        assert_eq!(x[40], 1.0); // add bit
        assert_eq!(ArithOp::Add.apply(7, 25), 32);

        // 50 * 50 = 2500 mod 100 = 0 -> digits (0, 0)
        assert_eq!(ArithOp::Mul.apply(50, 50), 0);
    }

    #[test]
    fn encoded_input_has_exactly_five_ones() {
        let pool = SeedPool::new(4);
        let mut rng = pool.stream(StreamKind::DataShuffle, 0);
        let gen = AddMulGen::new(Filter::All).unwrap();
        let batch: Batch<f32> = gen.batch(32, &mut rng);
        let x = &batch.inputs[0];
        for row in 0..32 {
            let ones = x.data()[row * INPUT_DIM..(row + 1) * INPUT_DIM]
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            assert_eq!(ones, 5);
        }
    }

    #[test]
    fn op_filter_yields_only_that_op() {
        let pool = SeedPool::new(4);
        let mut rng = pool.stream(StreamKind::DataShuffle, 1);
        let gen = AddMulGen::new(Filter::Op(ArithOp::Add)).unwrap();
        let batch: Batch<f32> = gen.batch(64, &mut rng);
        assert_eq!(batch.len(), 64);
        for m in &batch.meta {
            assert!(matches!(m, SampleMeta::AddMul { op: ArithOp::Add, .. }));
        }
    }

    #[test]
    fn generator_is_seed_deterministic() {
        let pool = SeedPool::new(77);
        let gen = AddMulGen::new(Filter::All).unwrap();
        let a: Batch<f32> = gen.batch(16, &mut pool.stream(StreamKind::DataShuffle, 0));
        let b: Batch<f32> = gen.batch(16, &mut pool.stream(StreamKind::DataShuffle, 0));
        assert!(a.inputs[0].bitwise_eq(&b.inputs[0]));
        assert_eq!(a.targets, b.targets);
    }

    #[test]
    fn foreign_filters_are_rejected() {
        assert!(AddMulGen::new(Filter::Pair(1)).is_err());
        assert!(AddMulGen::new(Filter::ExcludeClass(1)).is_err());
    }
}
