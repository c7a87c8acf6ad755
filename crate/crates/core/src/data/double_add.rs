//! Double addition: `(a+b) mod 100` and `(c+d) mod 100` through disjoint
//! input/output blocks (80 inputs, 40 outputs).
//!
//! The feedforward protocol evaluates one pair per forward pass, zeroing
//! the other pair's input block; the recurrent protocol either presents
//! both pairs together or one pair per segment.

use crate::data::{digits, onehot_digit, Batch, SampleMeta};
use crate::element::Element;
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const INPUT_DIM: usize = 80;
pub const OUTPUT_GROUPS: usize = 4;

/// Which pair(s) a batch presents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoubleAddView {
    /// Both pairs visible; all four output groups active.
    Full,
    /// Only pair 1 visible (pair 2's block zeroed); groups 0, 1 active.
    Pair1,
    /// Only pair 2 visible (pair 1's block zeroed); groups 2, 3 active.
    Pair2,
    /// Two segment inputs (pair 1 only, then pair 2 only) for the forced
    /// recurrent schedule; all groups carried, readouts pick their pair.
    Segments,
}

impl DoubleAddView {
    pub fn active_groups(self) -> Vec<usize> {
        match self {
            DoubleAddView::Pair1 => vec![0, 1],
            DoubleAddView::Pair2 => vec![2, 3],
            _ => vec![0, 1, 2, 3],
        }
    }
}

/// 80-dim encoding; `zero_pair` blanks that pair's four digit blocks.
pub fn encode_double_add<E: Element>(
    a: usize,
    b: usize,
    c: usize,
    d: usize,
    zero_pair: Option<u8>,
) -> Vec<E> {
    let mut x = vec![E::zero(); INPUT_DIM];
    if zero_pair != Some(1) {
        let (at, au) = digits(a);
        let (bt, bu) = digits(b);
        onehot_digit(&mut x, 0, at);
        onehot_digit(&mut x, 10, au);
        onehot_digit(&mut x, 20, bt);
        onehot_digit(&mut x, 30, bu);
    }
    if zero_pair != Some(2) {
        let (ct, cu) = digits(c);
        let (dt, du) = digits(d);
        onehot_digit(&mut x, 40, ct);
        onehot_digit(&mut x, 50, cu);
        onehot_digit(&mut x, 60, dt);
        onehot_digit(&mut x, 70, du);
    }
    x
}

#[derive(Debug, Clone, Default)]
pub struct DoubleAddGen;

impl DoubleAddGen {
    /// Draws operands and encodes them under `view`. The same operand draw
    /// is reused for every input tensor of the batch, so the two-pass
    /// protocol sees consistent samples.
    pub fn batch<E: Element>(&self, n: usize, rng: &mut Stream, view: DoubleAddView) -> Batch<E> {
        let mut operands = Vec::with_capacity(n);
        for _ in 0..n {
            operands.push((rng.below(100), rng.below(100), rng.below(100), rng.below(100)));
        }
        self.encode_batch(&operands, view)
    }

    pub fn encode_batch<E: Element>(
        &self,
        operands: &[(usize, usize, usize, usize)],
        view: DoubleAddView,
    ) -> Batch<E> {
        let n = operands.len();
        let encode_all = |zero_pair: Option<u8>| -> Tensor<E> {
            let mut data = Vec::with_capacity(n * INPUT_DIM);
            for &(a, b, c, d) in operands {
                data.extend(encode_double_add::<E>(a, b, c, d, zero_pair));
            }
            Tensor::new(vec![n, INPUT_DIM], data).expect("sized")
        };
        let inputs = match view {
            DoubleAddView::Full => vec![encode_all(None)],
            DoubleAddView::Pair1 => vec![encode_all(Some(2))],
            DoubleAddView::Pair2 => vec![encode_all(Some(1))],
            DoubleAddView::Segments => vec![encode_all(Some(2)), encode_all(Some(1))],
        };
        let mut targets = vec![Vec::with_capacity(n); OUTPUT_GROUPS];
        let mut meta = Vec::with_capacity(n);
        for &(a, b, c, d) in operands {
            let (t1, u1) = digits((a + b) % 100);
            let (t2, u2) = digits((c + d) % 100);
            targets[0].push(t1);
            targets[1].push(u1);
            targets[2].push(t2);
            targets[3].push(u2);
            meta.push(SampleMeta::DoubleAdd {
                a: a as u8,
                b: b as u8,
                c: c as u8,
                d: d as u8,
            });
        }
        Batch {
            inputs,
            targets,
            active_groups: view.active_groups(),
            meta,
        }
    }
}
