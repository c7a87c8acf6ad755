//! Single-layer LSTM with a linear readout head.
//!
//! Standard four-gate cell without peepholes:
//!   gates = x W_ih + h W_hh + b,   split into i, f, g, o
//!   c' = sigmoid(f) * c + sigmoid(i) * tanh(g)
//!   h' = sigmoid(o) * tanh(c')
//!
//! Inputs are presented on a schedule: either the same input repeated for a
//! fixed number of steps, or one input per segment shown back to back
//! without resetting the state. Loss is only read at the configured readout
//! steps.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::models::WeightSource;
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ScheduleMode {
    /// One input tensor, shown at every step.
    RepeatAll,
    /// One input tensor per segment, each shown for `steps_per_segment`
    /// consecutive steps; state carries across segments.
    SequentialPairs,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PresentationSchedule {
    pub mode: ScheduleMode,
    pub steps_per_segment: usize,
    /// 1-based step indices whose outputs are read.
    pub readout_steps: Vec<usize>,
}

impl PresentationSchedule {
    pub fn repeat_all(steps: usize) -> Self {
        PresentationSchedule {
            mode: ScheduleMode::RepeatAll,
            steps_per_segment: steps,
            readout_steps: vec![steps],
        }
    }

    pub fn sequential_pairs(steps_per_segment: usize, segments: usize) -> Self {
        PresentationSchedule {
            mode: ScheduleMode::SequentialPairs,
            steps_per_segment,
            readout_steps: (1..=segments).map(|s| s * steps_per_segment).collect(),
        }
    }

    pub fn segments(&self) -> usize {
        match self.mode {
            ScheduleMode::RepeatAll => 1,
            ScheduleMode::SequentialPairs => self.readout_steps.len().max(2),
        }
    }

    pub fn horizon(&self) -> usize {
        self.steps_per_segment * self.segments()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_segment == 0 {
            return Err(Error::Config("steps_per_segment must be positive".into()));
        }
        if self.readout_steps.is_empty() {
            return Err(Error::Config("schedule needs at least one readout step".into()));
        }
        let horizon = self.horizon();
        if let Some(&bad) = self.readout_steps.iter().find(|&&s| s == 0 || s > horizon) {
            return Err(Error::Config(format!(
                "readout step {bad} outside horizon 1..={horizon}"
            )));
        }
        Ok(())
    }
}

/// Hidden and cell state carried between forward calls.
#[derive(Debug, Clone)]
pub struct LstmState<E> {
    pub h: Tensor<E>,
    pub c: Tensor<E>,
}

impl<E: Element> LstmState<E> {
    pub fn zeros(batch: usize, hidden: usize) -> Self {
        LstmState {
            h: Tensor::zeros(&[batch, hidden]),
            c: Tensor::zeros(&[batch, hidden]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LstmNet {
    input_size: usize,
    hidden_size: usize,
    output_size: usize,
}

impl LstmNet {
    pub const W_IH: &'static str = "lstm.w_ih";
    pub const W_HH: &'static str = "lstm.w_hh";
    pub const BIAS: &'static str = "lstm.bias";
    pub const HEAD_W: &'static str = "head.weight";
    pub const HEAD_B: &'static str = "head.bias";

    pub fn new(input_size: usize, hidden_size: usize, output_size: usize) -> Result<Self> {
        if input_size == 0 || hidden_size == 0 || output_size == 0 {
            return Err(Error::Config(format!(
                "lstm sizes must be positive, got {input_size}/{hidden_size}/{output_size}"
            )));
        }
        Ok(LstmNet {
            input_size,
            hidden_size,
            output_size,
        })
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn hidden_size(&self) -> usize {
        self.hidden_size
    }

    pub fn output_size(&self) -> usize {
        self.output_size
    }

    /// Layers for reporting: 0 = input-to-hidden (+ gate bias),
    /// 1 = hidden-to-hidden, 2 = readout head.
    pub fn init_params<E: Element>(&self, rng: &mut Stream) -> ParamStore<E> {
        let (i, h, o) = (self.input_size, self.hidden_size, self.output_size);
        let mut store = ParamStore::new();
        let mut uniform = |fan_in: usize, n: usize| -> Vec<E> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| E::from_f64(rng.uniform_symmetric(bound))).collect()
        };
        store
            .insert(Self::W_IH, 0, Tensor::new(vec![i, 4 * h], uniform(i, i * 4 * h)).unwrap())
            .unwrap();
        store
            .insert(Self::W_HH, 1, Tensor::new(vec![h, 4 * h], uniform(h, h * 4 * h)).unwrap())
            .unwrap();
        // forget-gate bias starts at one so early training does not erase state
        let mut bias = vec![E::zero(); 4 * h];
        for b in bias.iter_mut().skip(h).take(h) {
            *b = E::one();
        }
        store
            .insert(Self::BIAS, 0, Tensor::new(vec![4 * h], bias).unwrap())
            .unwrap();
        store
            .insert(Self::HEAD_W, 2, Tensor::new(vec![h, o], uniform(h, h * o)).unwrap())
            .unwrap();
        store.insert(Self::HEAD_B, 2, Tensor::zeros(&[o])).unwrap();
        store
    }

    /// Runs the schedule from a zero state. `inputs` holds one tensor per
    /// segment (`[batch, input_size]` each). Returns head logits at each
    /// readout step, in readout order.
    pub fn forward<E: Element>(
        &self,
        g: &mut Graph<E>,
        source: &mut dyn WeightSource<E>,
        inputs: &[Value],
        schedule: &PresentationSchedule,
    ) -> Result<Vec<Value>> {
        let batch = g.value(inputs[0]).dims2()?.0;
        let state = LstmState::zeros(batch, self.hidden_size);
        Ok(self.forward_with_state(g, source, inputs, schedule, state)?.0)
    }

    /// Like [`forward`](Self::forward) but starting from `state`; also
    /// returns the final state so callers can hand it to a later call.
    pub fn forward_with_state<E: Element>(
        &self,
        g: &mut Graph<E>,
        source: &mut dyn WeightSource<E>,
        inputs: &[Value],
        schedule: &PresentationSchedule,
        state: LstmState<E>,
    ) -> Result<(Vec<Value>, LstmState<E>)> {
        schedule.validate()?;
        if inputs.len() != schedule.segments() {
            return Err(Error::shape(
                "lstm_forward",
                format!("{} inputs for {} segments", inputs.len(), schedule.segments()),
            ));
        }
        for &input in inputs {
            let (_, cols) = g.value(input).dims2()?;
            if cols != self.input_size {
                return Err(Error::shape(
                    "lstm_forward",
                    format!("input width {} does not match {}", cols, self.input_size),
                ));
            }
        }

        let w_ih = source.weight(g, Self::W_IH)?;
        let w_hh = source.weight(g, Self::W_HH)?;
        let bias = source.weight(g, Self::BIAS)?;
        let head_w = source.weight(g, Self::HEAD_W)?;
        let head_b = source.weight(g, Self::HEAD_B)?;

        let hs = self.hidden_size;
        let mut h = g.constant(state.h);
        let mut c = g.constant(state.c);
        let mut outputs = Vec::new();

        for step in 1..=schedule.horizon() {
            let segment = (step - 1) / schedule.steps_per_segment;
            let x = inputs[segment.min(inputs.len() - 1)];

            let xg = g.matmul(x, w_ih)?;
            let hg = g.matmul(h, w_hh)?;
            let sum = g.add(xg, hg)?;
            let gates = g.add(sum, bias)?;

            let i_gate = g.slice(gates, 1, 0, hs)?;
            let f_gate = g.slice(gates, 1, hs, hs)?;
            let g_gate = g.slice(gates, 1, 2 * hs, hs)?;
            let o_gate = g.slice(gates, 1, 3 * hs, hs)?;

            let i_act = g.sigmoid(i_gate)?;
            let f_act = g.sigmoid(f_gate)?;
            let g_act = g.tanh(g_gate)?;
            let o_act = g.sigmoid(o_gate)?;

            let keep = g.mul(f_act, c)?;
            let write = g.mul(i_act, g_act)?;
            c = g.add(keep, write)?;
            let c_squashed = g.tanh(c)?;
            h = g.mul(o_act, c_squashed)?;

            if schedule.readout_steps.contains(&step) {
                let out = g.matmul(h, head_w)?;
                let out = g.add(out, head_b)?;
                outputs.push(out);
            }
        }

        let final_state = LstmState {
            h: g.value(h).clone(),
            c: g.value(c).clone(),
        };
        Ok((outputs, final_state))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::PlainSource;
    use crate::rng::{SeedPool, StreamKind};

    fn setup(seed: u64) -> (LstmNet, ParamStore<f64>) {
        let net = LstmNet::new(6, 5, 4).unwrap();
        let pool = SeedPool::new(seed);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params = net.init_params(&mut rng);
        (net, params)
    }

    fn random_input(seed: u64, batch: usize, width: usize) -> Tensor<f64> {
        let pool = SeedPool::new(seed);
        let mut rng = pool.stream(StreamKind::DataShuffle, 0);
        Tensor::new(
            vec![batch, width],
            (0..batch * width).map(|_| rng.uniform_symmetric(1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_hidden_size_is_invalid() {
        assert!(LstmNet::new(6, 0, 4).is_err());
    }

    #[test]
    fn repeat_all_gives_single_readout() {
        let (net, params) = setup(3);
        let mut g = Graph::new();
        let x = g.constant(random_input(10, 2, 6));
        let sched = PresentationSchedule::repeat_all(3);
        let outs = net
            .forward(&mut g, &mut PlainSource { params: &params }, &[x], &sched)
            .unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(g.value(outs[0]).shape(), &[2, 4]);
    }

    #[test]
    fn sequential_pairs_reads_two_outputs() {
        let (net, params) = setup(3);
        let mut g = Graph::new();
        let x1 = g.constant(random_input(10, 2, 6));
        let x2 = g.constant(random_input(11, 2, 6));
        let sched = PresentationSchedule::sequential_pairs(3, 2);
        assert_eq!(sched.readout_steps, vec![3, 6]);
        let outs = net
            .forward(&mut g, &mut PlainSource { params: &params }, &[x1, x2], &sched)
            .unwrap();
        assert_eq!(outs.len(), 2);
    }

    #[test]
    fn readout_outside_horizon_is_rejected() {
        let (net, params) = setup(3);
        let mut g = Graph::new();
        let x = g.constant(random_input(10, 2, 6));
        let sched = PresentationSchedule {
            mode: ScheduleMode::RepeatAll,
            steps_per_segment: 3,
            readout_steps: vec![4],
        };
        assert!(net
            .forward(&mut g, &mut PlainSource { params: &params }, &[x], &sched)
            .is_err());
    }

    #[test]
    fn state_handoff_matches_uninterrupted_run() {
        // A 6-step run must equal two 3-step runs chained through the state.
        let (net, params) = setup(5);
        let input = random_input(12, 3, 6);

        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let sched6 = PresentationSchedule {
            mode: ScheduleMode::RepeatAll,
            steps_per_segment: 6,
            readout_steps: vec![6],
        };
        let full = net
            .forward(&mut g, &mut PlainSource { params: &params }, &[x], &sched6)
            .unwrap();
        let full_out = g.value(full[0]).clone();

        let sched3 = PresentationSchedule::repeat_all(3);
        let mut g1 = Graph::new();
        let x1 = g1.constant(input.clone());
        let (_, mid) = net
            .forward_with_state(
                &mut g1,
                &mut PlainSource { params: &params },
                &[x1],
                &sched3,
                LstmState::zeros(3, 5),
            )
            .unwrap();
        let mut g2 = Graph::new();
        let x2 = g2.constant(input);
        let (outs, _) = net
            .forward_with_state(&mut g2, &mut PlainSource { params: &params }, &[x2], &sched3, mid)
            .unwrap();
        let split_out = g2.value(outs[0]).clone();

        assert!(full_out.bitwise_eq(&split_out));
    }

    #[test]
    fn backward_matches_finite_differences_through_time() {
        let net = LstmNet::new(3, 4, 2).unwrap();
        let pool = SeedPool::new(8);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params: ParamStore<f64> = net.init_params(&mut rng);
        let input = random_input(9, 2, 3);
        let targets = [0usize, 1];
        let sched = PresentationSchedule::repeat_all(3);

        let eval = |params: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let x = g.constant(input.clone());
            let outs = net
                .forward(&mut g, &mut PlainSource { params }, &[x], &sched)
                .unwrap();
            let loss = g.cross_entropy_with_logits(outs[0], &targets).unwrap();
            g.value(loss).scalar_value()
        };

        // analytic gradients via trainable leaves
        struct LeafSource<'a> {
            params: &'a ParamStore<f64>,
            leaves: Vec<(String, crate::graph::Value)>,
        }
        impl WeightSource<f64> for LeafSource<'_> {
            fn weight(&mut self, g: &mut Graph<f64>, name: &str) -> crate::error::Result<crate::graph::Value> {
                let v = g.leaf(self.params.get(name).unwrap().tensor.clone(), true);
                self.leaves.push((name.to_string(), v));
                Ok(v)
            }
        }
        let mut g = Graph::new();
        let x = g.constant(input.clone());
        let mut source = LeafSource { params: &params, leaves: Vec::new() };
        let outs = net.forward(&mut g, &mut source, &[x], &sched).unwrap();
        let loss = g.cross_entropy_with_logits(outs[0], &targets).unwrap();
        let grads = g.backward(loss).unwrap();

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for (name, leaf) in &source.leaves {
            let analytic = grads.get_or_zeros(&g, *leaf);
            for i in 0..analytic.numel() {
                let mut plus = params.clone();
                plus.get_mut(name).unwrap().tensor.data_mut()[i] += h;
                let mut minus = params.clone();
                minus.get_mut(name).unwrap().tensor.data_mut()[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }
}
