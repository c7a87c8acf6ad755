//! Couples a task, a model and a masking mode into losses and predictions.
//!
//! One [`GraphSource`] decides how parameters enter the graph (constant,
//! trainable leaf, hard-masked, or sampled-mask product); the [`Objective`]
//! builds the per-batch loss over it and decodes predictions for
//! evaluation. The same code path serves weight training, mask training,
//! joint training and all evaluation variants.

use crate::config::{ModelConfig, TaskKind};
use crate::data::{AddMulGen, Batch, DoubleAddGen, DoubleAddView, Filter, MnistStream, SampleMeta};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Value};
use crate::mask::{BinaryMask, MaskSet};
use crate::metrics::{all_groups_accuracy, argmax_groups};
use crate::models::{FfnNet, LstmNet, PresentationSchedule, WeightSource};
use crate::params::ParamStore;
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Masking applied during a forward pass.
#[derive(Clone, Copy)]
pub enum MaskMode<'a, E> {
    /// Raw weights.
    None,
    /// Deterministic hard mask (evaluation).
    Binary(&'a BinaryMask),
    /// One stochastic mask sample; `noise` is aligned with the mask's
    /// entry order (mask training).
    Sampled {
        mask: &'a MaskSet<E>,
        noise: &'a [Tensor<E>],
    },
}

/// Feeds parameters into a graph and records which leaves were created so
/// the trainer can route gradients back by name.
pub struct GraphSource<'a, E> {
    pub params: &'a ParamStore<E>,
    /// Unfrozen parameters enter as requires-grad leaves.
    pub train_weights: bool,
    pub mask: MaskMode<'a, E>,
    pub weight_leaves: Vec<(String, Value)>,
    pub logit_leaves: Vec<(String, Value)>,
}

impl<'a, E: Element> GraphSource<'a, E> {
    pub fn new(params: &'a ParamStore<E>, train_weights: bool, mask: MaskMode<'a, E>) -> Self {
        GraphSource {
            params,
            train_weights,
            mask,
            weight_leaves: Vec::new(),
            logit_leaves: Vec::new(),
        }
    }
}

fn bits_to_tensor<E: Element>(bits: &[bool], shape: &[usize]) -> Tensor<E> {
    Tensor::new(
        shape.to_vec(),
        bits.iter().map(|&b| if b { E::one() } else { E::zero() }).collect(),
    )
    .expect("bit count matches shape")
}

impl<E: Element> WeightSource<E> for GraphSource<'_, E> {
    fn weight(&mut self, g: &mut Graph<E>, name: &str) -> Result<Value> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Mask(format!("unknown parameter {name:?}")))?;
        let base = if self.train_weights && !p.frozen {
            let v = g.leaf(p.tensor.clone(), true);
            self.weight_leaves.push((name.to_string(), v));
            v
        } else {
            g.constant(p.tensor.clone())
        };
        match &self.mask {
            MaskMode::None => Ok(base),
            MaskMode::Binary(bits) => match bits.bits(name) {
                Some(b) => {
                    let m = g.constant(bits_to_tensor(b, p.tensor.shape()));
                    g.mul(base, m)
                }
                None => Ok(base),
            },
            MaskMode::Sampled { mask, noise } => {
                let Some(pos) = mask.entry_position(name) else {
                    return Ok(base); // excluded from masking
                };
                if let Some(fixed) = mask.fixed_bits(name) {
                    let m = g.constant(bits_to_tensor(fixed, p.tensor.shape()));
                    return g.mul(base, m);
                }
                let logits = mask.logits(name).expect("entry exists");
                let leaf = g.leaf(logits.clone(), true);
                self.logit_leaves.push((name.to_string(), leaf));
                g.masked_weight(base, leaf, &noise[pos], mask.temperature)
            }
        }
    }
}

/// Protocol for presenting double-add samples, fixed by the model choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DaProtocol {
    /// Two forward passes, one pair visible per pass.
    FnnTwoPass,
    /// Both pairs presented together for all steps, read at the last one.
    LstmFull,
    /// One pair per segment, read at each segment's last step.
    LstmForced,
}

/// A task/model pairing with everything needed to build losses and decode
/// predictions.
pub struct Objective {
    pub task: TaskKind,
    kind: ObjectiveKind,
}

enum ObjectiveKind {
    Ffn(FfnNet),
    Lstm {
        net: LstmNet,
        steps_per_segment: usize,
        protocol: Option<DaProtocol>,
    },
}

impl Objective {
    pub fn from_config(task: TaskKind, model: &ModelConfig) -> Result<Self> {
        let kind = match model {
            ModelConfig::Ffn { layers } => ObjectiveKind::Ffn(FfnNet::new(layers.clone())?),
            ModelConfig::Lstm {
                input,
                hidden,
                output,
                steps_per_segment,
                forced,
            } => ObjectiveKind::Lstm {
                net: LstmNet::new(*input, *hidden, *output)?,
                steps_per_segment: *steps_per_segment,
                protocol: match task {
                    TaskKind::DoubleAdd => Some(if *forced {
                        DaProtocol::LstmForced
                    } else {
                        DaProtocol::LstmFull
                    }),
                    _ => None,
                },
            },
        };
        Ok(Objective { task, kind })
    }

    pub fn init_params<E: Element>(&self, rng: &mut Stream) -> ParamStore<E> {
        match &self.kind {
            ObjectiveKind::Ffn(net) => net.init_params(rng),
            ObjectiveKind::Lstm { net, .. } => net.init_params(rng),
        }
    }

    pub fn is_recurrent(&self) -> bool {
        matches!(self.kind, ObjectiveKind::Lstm { .. })
    }

    /// Double-add presentation protocol implied by the model.
    pub fn da_protocol(&self) -> DaProtocol {
        match &self.kind {
            ObjectiveKind::Ffn(_) => DaProtocol::FnnTwoPass,
            ObjectiveKind::Lstm { protocol, .. } => protocol.unwrap_or(DaProtocol::LstmFull),
        }
    }

    /// `(start, len)` column blocks of the output groups.
    pub fn output_groups(&self) -> Vec<(usize, usize)> {
        match self.task {
            TaskKind::Addmul => vec![(0, 10), (10, 10)],
            TaskKind::DoubleAdd => vec![(0, 10), (10, 10), (20, 10), (30, 10)],
            TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut => vec![(0, 10)],
        }
    }

    /// Output layer index (its mask is pinned in leave-one-class-out runs).
    pub fn output_layer<E: Element>(&self, params: &ParamStore<E>) -> usize {
        params.layers().into_iter().max().unwrap_or(0)
    }

    fn forward_outputs<E: Element>(
        &self,
        g: &mut Graph<E>,
        source: &mut GraphSource<'_, E>,
        batch: &Batch<E>,
    ) -> Result<Vec<Value>> {
        match &self.kind {
            ObjectiveKind::Ffn(net) => batch
                .inputs
                .iter()
                .map(|input| {
                    let x = g.constant(input.clone());
                    net.forward(g, source, x)
                })
                .collect(),
            ObjectiveKind::Lstm {
                net,
                steps_per_segment,
                ..
            } => {
                let inputs: Vec<Value> =
                    batch.inputs.iter().map(|t| g.constant(t.clone())).collect();
                let schedule = if inputs.len() == 1 {
                    PresentationSchedule::repeat_all(*steps_per_segment)
                } else {
                    PresentationSchedule::sequential_pairs(*steps_per_segment, inputs.len())
                };
                net.forward(g, source, &inputs, &schedule)
            }
        }
    }

    /// Which target groups each forward output (pass or readout) is
    /// responsible for.
    fn output_group_map<E: Element>(&self, batch: &Batch<E>, outputs: usize) -> Vec<Vec<usize>> {
        if outputs == 1 {
            return vec![batch.active_groups.clone()];
        }
        // Multiple passes/readouts: each covers its own pair of digit
        // groups in order (two-pass FNN, forced LSTM).
        let per = batch.active_groups.len() / outputs;
        batch
            .active_groups
            .chunks(per)
            .map(|c| c.to_vec())
            .collect()
    }

    /// Sum of per-group cross-entropies over every active output group.
    pub fn loss<E: Element>(
        &self,
        g: &mut Graph<E>,
        source: &mut GraphSource<'_, E>,
        batch: &Batch<E>,
    ) -> Result<Value> {
        let outputs = self.forward_outputs(g, source, batch)?;
        let group_map = self.output_group_map(batch, outputs.len());
        let groups = self.output_groups();
        let mut total: Option<Value> = None;
        for (out, group_ids) in outputs.iter().zip(&group_map) {
            for &gid in group_ids {
                let (start, len) = groups[gid];
                let block = g.slice(*out, 1, start, len)?;
                let ce = g.cross_entropy_with_logits(block, &batch.targets[gid])?;
                total = Some(match total {
                    Some(acc) => g.add(acc, ce)?,
                    None => ce,
                });
            }
        }
        total.ok_or_else(|| Error::Data("batch has no active output groups".into()))
    }

    /// Per-group argmax predictions for a batch (no gradients). Groups not
    /// covered by any output keep their slot but stay empty.
    pub fn predict<E: Element>(
        &self,
        params: &ParamStore<E>,
        mask: MaskMode<'_, E>,
        batch: &Batch<E>,
    ) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        let mut source = GraphSource::new(params, false, mask);
        let outputs = self.forward_outputs(&mut g, &mut source, batch)?;
        let group_map = self.output_group_map(batch, outputs.len());
        let groups = self.output_groups();
        let mut predictions: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
        for (out, group_ids) in outputs.iter().zip(&group_map) {
            let logits = g.value(*out);
            for &gid in group_ids {
                let decoded = argmax_groups(logits, &[groups[gid]]);
                predictions[gid] = decoded.into_iter().next().unwrap();
            }
        }
        Ok(predictions)
    }

    /// Accuracy over a fixed evaluation set under the all-groups rule.
    pub fn accuracy<E: Element>(
        &self,
        params: &ParamStore<E>,
        mask: MaskMode<'_, E>,
        eval_set: &[Batch<E>],
    ) -> Result<f64> {
        let mut correct = 0.0;
        let mut total = 0.0;
        for batch in eval_set {
            let predictions = self.predict(params, mask, batch)?;
            let acc = all_groups_accuracy(&predictions, &batch.targets, &batch.active_groups);
            correct += acc * batch.len() as f64;
            total += batch.len() as f64;
        }
        Ok(if total == 0.0 { 0.0 } else { correct / total })
    }
}

/// Owns the sample streams of one task restriction; stateless for the
/// synthetic tasks, epoch-shuffling for image data.
pub enum TaskData<'a, E> {
    AddMul(AddMulGen),
    DoubleAdd {
        gen: DoubleAddGen,
        protocol: DaProtocol,
        pair: Option<u8>,
    },
    Mnist(MnistStream<'a, E>),
}

impl<'a, E: Element> TaskData<'a, E> {
    /// Stream for a synthetic task restriction.
    pub fn synthetic(task: TaskKind, filter: &Filter, protocol: DaProtocol) -> Result<Self> {
        match task {
            TaskKind::Addmul => Ok(TaskData::AddMul(AddMulGen::new(filter.clone())?)),
            TaskKind::DoubleAdd => {
                let pair = match filter {
                    Filter::All => None,
                    Filter::Pair(p) => Some(*p),
                    other => {
                        return Err(Error::Data(format!(
                            "filter {other} does not apply to the double-add task"
                        )))
                    }
                };
                Ok(TaskData::DoubleAdd {
                    gen: DoubleAddGen,
                    protocol,
                    pair,
                })
            }
            other => Err(Error::Data(format!(
                "task {} needs an image data source",
                other.label()
            ))),
        }
    }

    /// The batches consumed by one optimization step (two for the two-pass
    /// protocol on the full double-add task, one otherwise).
    pub fn next_step(&mut self, n: usize, rng: &mut Stream) -> Vec<Batch<E>> {
        match self {
            TaskData::AddMul(gen) => vec![gen.batch(n, rng)],
            TaskData::DoubleAdd { gen, protocol, pair } => match (*protocol, *pair) {
                (DaProtocol::FnnTwoPass, None) => {
                    let operands: Vec<_> = (0..n)
                        .map(|_| (rng.below(100), rng.below(100), rng.below(100), rng.below(100)))
                        .collect();
                    vec![
                        gen.encode_batch(&operands, DoubleAddView::Pair1),
                        gen.encode_batch(&operands, DoubleAddView::Pair2),
                    ]
                }
                (DaProtocol::FnnTwoPass, Some(p)) => {
                    vec![gen.batch(n, rng, pair_view(p))]
                }
                (DaProtocol::LstmFull, None) => vec![gen.batch(n, rng, DoubleAddView::Full)],
                (DaProtocol::LstmFull, Some(p)) => {
                    // full presentation, loss restricted to one pair
                    let mut batch = gen.batch(n, rng, DoubleAddView::Full);
                    batch.active_groups = pair_view(p).active_groups();
                    vec![batch]
                }
                (DaProtocol::LstmForced, None) => vec![gen.batch(n, rng, DoubleAddView::Segments)],
                (DaProtocol::LstmForced, Some(1)) => vec![gen.batch(n, rng, DoubleAddView::Pair1)],
                (DaProtocol::LstmForced, Some(_)) => {
                    // both segments shown, loss read at the second readout
                    let mut batch = gen.batch(n, rng, DoubleAddView::Segments);
                    batch.active_groups = vec![2, 3];
                    vec![batch]
                }
            },
            TaskData::Mnist(stream) => vec![stream.next_batch(n, rng)],
        }
    }

    /// A fixed evaluation set of about `samples` samples in batches of
    /// `batch_size`, drawn from `rng` (callers pass a fixed-seed stream).
    pub fn eval_set(&mut self, samples: usize, batch_size: usize, rng: &mut Stream) -> Vec<Batch<E>> {
        match self {
            TaskData::Mnist(stream) => {
                stream.rewind();
                let mut set = Vec::new();
                while let Some(chunk) = stream.next_eval_chunk(batch_size) {
                    set.push(chunk);
                    if set.iter().map(|b| b.len()).sum::<usize>() >= samples {
                        break;
                    }
                }
                set
            }
            _ => {
                let mut set = Vec::new();
                let mut produced = 0;
                while produced < samples {
                    let n = batch_size.min(samples - produced);
                    // evaluation uses single-step batches; for the two-pass
                    // protocol each pair is its own split, so `pair` is set
                    let mut step = self.next_step(n, rng);
                    produced += step[0].len();
                    set.append(&mut step);
                }
                set
            }
        }
    }
}

fn pair_view(p: u8) -> DoubleAddView {
    if p == 1 {
        DoubleAddView::Pair1
    } else {
        DoubleAddView::Pair2
    }
}

/// Decodes two digit groups into the value they spell (tens, units).
pub fn decode_two_digit(tens: usize, units: usize) -> usize {
    10 * tens + units
}

/// Per-sample decoded predictions with metadata, for behavior grids and
/// confusion matrices.
pub struct DetailedPredictions {
    pub meta: Vec<SampleMeta>,
    /// Decoded per-group class predictions, grouped as the task defines.
    pub groups: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub active_groups: Vec<usize>,
}

pub fn predict_detailed<E: Element>(
    objective: &Objective,
    params: &ParamStore<E>,
    mask: MaskMode<'_, E>,
    eval_set: &[Batch<E>],
) -> Result<DetailedPredictions> {
    let group_count = objective.output_groups().len();
    let mut out = DetailedPredictions {
        meta: Vec::new(),
        groups: vec![Vec::new(); group_count],
        targets: vec![Vec::new(); group_count],
        active_groups: eval_set.first().map(|b| b.active_groups.clone()).unwrap_or_default(),
    };
    for batch in eval_set {
        let predictions = objective.predict(params, mask, batch)?;
        out.meta.extend(batch.meta.iter().copied());
        for g in 0..group_count {
            out.groups[g].extend(predictions[g].iter().copied());
            out.targets[g].extend(batch.targets[g].iter().copied());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::rng::{SeedPool, StreamKind};

    fn tiny_addmul() -> (Objective, ParamStore<f64>) {
        let objective = Objective::from_config(
            TaskKind::Addmul,
            &ModelConfig::Ffn {
                layers: vec![42, 16, 20],
            },
        )
        .unwrap();
        let pool = SeedPool::new(1);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params = objective.init_params(&mut rng);
        (objective, params)
    }

    #[test]
    fn all_ones_mask_equals_unmasked_bitwise() {
        let (objective, params) = tiny_addmul();
        let mask = MaskSet::<f64>::init(&params, 0.9, &[], "full").unwrap();
        let all_ones = {
            let entries = mask
                .entries()
                .map(|(n, l, t)| (n.to_string(), l, vec![true; t.numel()]))
                .collect();
            BinaryMask::new(entries, "ones")
        };
        let pool = SeedPool::new(2);
        let mut rng = pool.stream(StreamKind::DataEval, 0);
        let mut data = TaskData::<f64>::synthetic(TaskKind::Addmul, &Filter::All, DaProtocol::FnnTwoPass).unwrap();
        let batch = &data.next_step(8, &mut rng)[0];

        let raw = objective.predict(&params, MaskMode::None, batch).unwrap();
        let masked = objective
            .predict(&params, MaskMode::Binary(&all_ones), batch)
            .unwrap();
        assert_eq!(raw, masked);
    }

    #[test]
    fn loss_decreases_under_training_signal() {
        // single Adam-free sanity: gradient step reduces loss on one batch
        let (objective, mut params) = tiny_addmul();
        let pool = SeedPool::new(3);
        let mut rng = pool.stream(StreamKind::DataShuffle, 0);
        let mut data = TaskData::<f64>::synthetic(TaskKind::Addmul, &Filter::All, DaProtocol::FnnTwoPass).unwrap();
        let batch = data.next_step(32, &mut rng)[0].clone();

        let loss_at = |params: &ParamStore<f64>| -> f64 {
            let mut g = Graph::new();
            let mut src = GraphSource::new(params, false, MaskMode::None);
            let loss = objective.loss(&mut g, &mut src, &batch).unwrap();
            g.value(loss).scalar_value()
        };
        let before = loss_at(&params);

        let mut g = Graph::new();
        let mut src = GraphSource::new(&params, true, MaskMode::None);
        let loss = objective.loss(&mut g, &mut src, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        let updates: Vec<(String, Tensor<f64>)> = src
            .weight_leaves
            .iter()
            .map(|(name, leaf)| (name.clone(), grads.get_or_zeros(&g, *leaf)))
            .collect();
        for (name, grad) in updates {
            let p = params.get_mut(&name).unwrap();
            p.tensor.add_scaled(&grad, -0.05);
        }
        let after = loss_at(&params);
        assert!(after < before, "loss {before} -> {after}");
    }

    #[test]
    fn two_pass_protocol_builds_two_batches_sharing_operands() {
        let pool = SeedPool::new(4);
        let mut rng = pool.stream(StreamKind::DataShuffle, 0);
        let mut data =
            TaskData::<f64>::synthetic(TaskKind::DoubleAdd, &Filter::All, DaProtocol::FnnTwoPass).unwrap();
        let step = data.next_step(4, &mut rng);
        assert_eq!(step.len(), 2);
        assert_eq!(step[0].meta, step[1].meta);
        assert_eq!(step[0].active_groups, vec![0, 1]);
        assert_eq!(step[1].active_groups, vec![2, 3]);
    }

    #[test]
    fn forced_lstm_full_maps_readouts_to_pairs() {
        let objective = Objective::from_config(
            TaskKind::DoubleAdd,
            &ModelConfig::Lstm {
                input: 80,
                hidden: 12,
                output: 40,
                steps_per_segment: 3,
                forced: true,
            },
        )
        .unwrap();
        let pool = SeedPool::new(5);
        let mut rng = pool.stream(StreamKind::WeightsInit, 0);
        let params: ParamStore<f64> = objective.init_params(&mut rng);
        let mut data =
            TaskData::<f64>::synthetic(TaskKind::DoubleAdd, &Filter::All, DaProtocol::LstmForced).unwrap();
        let mut drng = pool.stream(StreamKind::DataShuffle, 0);
        let batch = &data.next_step(4, &mut drng)[0];
        assert_eq!(batch.inputs.len(), 2);
        let predictions = objective.predict(&params, MaskMode::None, batch).unwrap();
        assert_eq!(predictions.len(), 4);
        assert!(predictions.iter().all(|g| g.len() == 4));
    }

    #[test]
    fn mask_training_leaves_receive_gradients() {
        let (objective, params) = tiny_addmul();
        let mask = MaskSet::<f64>::init(&params, 0.9, &[], "full").unwrap();
        let pool = SeedPool::new(6);
        let mut nrng = pool.stream(StreamKind::MaskSample, 0);
        let noise = mask.sample_noise(&mut nrng);
        let mut drng = pool.stream(StreamKind::DataShuffle, 0);
        let mut data = TaskData::<f64>::synthetic(TaskKind::Addmul, &Filter::All, DaProtocol::FnnTwoPass).unwrap();
        let batch = &data.next_step(16, &mut drng)[0];

        let mut g = Graph::new();
        let mut src = GraphSource::new(&params, false, MaskMode::Sampled { mask: &mask, noise: &noise });
        let loss = objective.loss(&mut g, &mut src, batch).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(src.logit_leaves.len(), params.len());
        assert!(src.weight_leaves.is_empty());
        let nonzero = src
            .logit_leaves
            .iter()
            .map(|(_, leaf)| grads.get_or_zeros(&g, *leaf))
            .any(|t| t.data().iter().any(|&x| x != 0.0));
        assert!(nonzero, "mask logits got no gradient");
    }
}
