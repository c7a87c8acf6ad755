//! Maskable feedforward and LSTM networks.
//!
//! Models never touch parameter tensors directly during a forward pass;
//! they request graph nodes from a [`WeightSource`], which decides whether
//! the tensor enters as a constant, a trainable leaf, or a masked product.
//! The same forward code therefore serves evaluation, weight training and
//! mask training.

mod ffn;
mod lstm;

pub use ffn::FfnNet;
pub use lstm::{LstmNet, LstmState, PresentationSchedule, ScheduleMode};

use crate::element::Element;
use crate::error::Result;
use crate::graph::{Graph, Value};
use crate::params::ParamStore;

/// Supplies the graph node of a named parameter.
pub trait WeightSource<E: Element> {
    fn weight(&mut self, g: &mut Graph<E>, name: &str) -> Result<Value>;
}

/// Parameters enter the graph as plain constants (evaluation, or frozen
/// weights without masking).
pub struct PlainSource<'a, E> {
    pub params: &'a ParamStore<E>,
}

impl<E: Element> WeightSource<E> for PlainSource<'_, E> {
    fn weight(&mut self, g: &mut Graph<E>, name: &str) -> Result<Value> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| crate::error::Error::Mask(format!("unknown parameter {name:?}")))?;
        Ok(g.constant(p.tensor.clone()))
    }
}
