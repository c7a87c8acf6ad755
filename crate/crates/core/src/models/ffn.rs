//! Fully connected network: affine + ReLU stack, linear final layer
//! (softmax lives in the loss).

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::models::WeightSource;
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct FfnNet {
    sizes: Vec<usize>,
}

impl FfnNet {
    /// `sizes` lists input, hidden..., output widths.
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::Config("a network needs at least input and output sizes".into()));
        }
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!("zero-width layer in {sizes:?}")));
        }
        Ok(FfnNet { sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_size(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Fan-in scaled uniform init for weights, zero biases.
    pub fn init_params<E: Element>(&self, rng: &mut Stream) -> ParamStore<E> {
        let mut store = ParamStore::new();
        for j in 0..self.num_layers() {
            let (fan_in, fan_out) = (self.sizes[j], self.sizes[j + 1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<E> = (0..fan_in * fan_out)
                .map(|_| E::from_f64(rng.uniform_symmetric(bound)))
                .collect();
            store
                .insert(
                    Self::weight_name(j),
                    j,
                    Tensor::new(vec![fan_in, fan_out], data).expect("sized data"),
                )
                .expect("fresh store");
            store
                .insert(Self::bias_name(j), j, Tensor::zeros(&[fan_out]))
                .expect("fresh store");
        }
        store
    }

    /// `input` is `[batch, input_size]`; returns `[batch, output_size]`
    /// logits.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        source: &mut dyn WeightSource<E>,
        input: Value,
    ) -> Result<Value> {
        let (_, cols) = g.value(input).dims2()?;
        if cols != self.input_size() {
            return Err(Error::shape(
                "ffn_forward",
                format!("input width {} does not match layer 0 ({})", cols, self.input_size()),
            ));
        }
        let mut h = input;
        for j in 0..self.num_layers() {
            let w = source.weight(g, &Self::weight_name(j))?;
            let b = source.weight(g, &Self::bias_name(j))?;
            h = g.matmul(h, w)?;
            h = g.add(h, b)?;
            if j + 1 < self.num_layers() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PlainSource;
    use crate::rng::{SeedPool, StreamKind};

    #[test]
    fn rejects_degenerate_shapes() {
        assert!(FfnNet::new(vec![10]).is_err());
        assert!(FfnNet::new(vec![10, 0, 5]).is_err());
    }

    #[test]
    fn parameter_census_matches_analytic_counts() {
        let net = FfnNet::new(vec![42, 400, 400, 200, 20]).unwrap();
        let pool = SeedPool::new(0);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params: ParamStore<f32> = net.init_params(&mut rng);
        let sizes = params.layer_sizes();
        for j in 0..net.num_layers() {
            let expect = net.sizes()[j] * net.sizes()[j + 1] + net.sizes()[j + 1];
            assert_eq!(sizes[&j], expect, "layer {j}");
        }
        assert_eq!(params.total_numel(), 42 * 400 + 400 + 400 * 400 + 400 + 400 * 200 + 200 + 200 * 20 + 20);
    }

    #[test]
    fn zero_input_and_zero_biases_give_zero_logits() {
        let net = FfnNet::new(vec![4, 3, 2]).unwrap();
        let pool = SeedPool::new(1);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params: ParamStore<f64> = net.init_params(&mut rng);

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4]));
        let out = net
            .forward(&mut g, &mut PlainSource { params: &params }, x)
            .unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn input_width_mismatch_is_an_error() {
        let net = FfnNet::new(vec![4, 3, 2]).unwrap();
        let pool = SeedPool::new(1);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params: ParamStore<f64> = net.init_params(&mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 5]));
        assert!(net
            .forward(&mut g, &mut PlainSource { params: &params }, x)
            .is_err());
    }
}
