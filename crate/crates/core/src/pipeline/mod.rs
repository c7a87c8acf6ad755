//! Config-driven experiment pipelines: weight training, staged mask
//! training, joint training with transfer, the regularizer sweep, the
//! sanity protocols and the evaluation matrix.
//!
//! Every pipeline is deterministic given (config, seed): all randomness
//! flows through named streams salted by stage/task indices, and
//! gradient reductions follow fixed parameter order.

mod evalmat;
mod sanity;
mod sweep;
mod train;
mod transfer;

pub use evalmat::{evaluate_matrix, BehaviorCell, CensusRow, MatrixCell, MatrixReport};
pub use sanity::{copy_io_sanity, half_mask_eval, stability_iou, CopyIoReport, HalfMaskReport};
pub use sweep::{alpha_sweep, SweepPoint, SweepReport};
pub use train::{
    ensure_stage, eval_variant, resume_weights, train_mask_stage, train_weights,
    train_weights_partial, StageOutcome,
};
pub use transfer::{transfer_sequence, TransferReport, TransferTaskRecord};

use std::collections::HashMap;

use crate::config::{ExperimentConfig, TaskKind};
use crate::data::{synth_digits, load_mnist_idx, Filter, MnistData, MnistStream, Batch};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::objective::{Objective, TaskData};
use crate::rng::{SeedPool, StreamKind};
use crate::tensor::Tensor;

/// Seed of the shared synthetic image dataset. Independent of the run seed
/// so every seed trains on the same data, like a dataset on disk would.
const SYNTH_DATA_SEED: u64 = 0xDA7A;

/// Stream salts: weight training uses 0, mask stage `i` uses `1 + i`,
/// sweep point `(v, s)` uses `200 + 10*v + s`, stability replicas pass
/// their own mask seed offset by 1000.
pub const STAGE_SALT_BASE: u64 = 1;
pub const SWEEP_SALT_BASE: u64 = 200;
pub const STABILITY_SALT_BASE: u64 = 1000;

/// One experiment run: the config, its task objective, and any image data
/// the task needs (owned here so streams can borrow it).
pub struct Session<E> {
    pub config: ExperimentConfig,
    pub objective: Objective,
    mnist_train: Option<MnistData<E>>,
    mnist_test: Option<MnistData<E>>,
}

impl<E: Element> Session<E> {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let objective = Objective::from_config(config.task, &config.model)?;
        let (mnist_train, mnist_test) = match config.task {
            TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut => {
                let data_cfg = config.data.clone().unwrap_or_default();
                if data_cfg.synthetic {
                    let pool = SeedPool::new(SYNTH_DATA_SEED);
                    let mut rng = pool.stream(StreamKind::DataShuffle, 0);
                    let (train, test) =
                        synth_digits(data_cfg.train_samples, data_cfg.test_samples, &mut rng);
                    (Some(train), Some(test))
                } else {
                    let dir = data_cfg.dir.clone().ok_or_else(|| {
                        Error::Config("data.synthetic = false requires data.dir".into())
                    })?;
                    let files = [
                        "train-images-idx3-ubyte",
                        "train-labels-idx1-ubyte",
                        "t10k-images-idx3-ubyte",
                        "t10k-labels-idx1-ubyte",
                    ];
                    for name in files {
                        if let Some(digest) = data_cfg.sha256.get(name) {
                            crate::data::verify_sha256(&dir.join(name), digest)?;
                        }
                    }
                    let train = load_mnist_idx(&dir.join(files[0]), &dir.join(files[1]))?;
                    let test = load_mnist_idx(&dir.join(files[2]), &dir.join(files[3]))?;
                    (Some(train), Some(test))
                }
            }
            _ => (None, None),
        };
        Ok(Session {
            config,
            objective,
            mnist_train,
            mnist_test,
        })
    }

    pub fn is_image_task(&self) -> bool {
        self.mnist_train.is_some()
    }

    /// Training stream for a task restriction (optionally under a pixel
    /// permutation for the image tasks).
    pub fn train_data<'a>(
        &'a self,
        filter: &Filter,
        permutation: Option<&'a [usize]>,
    ) -> Result<TaskData<'a, E>> {
        match &self.mnist_train {
            Some(data) => Ok(TaskData::Mnist(MnistStream::new(data, filter, true, permutation)?)),
            None => TaskData::synthetic(self.config.task, filter, self.objective.da_protocol()),
        }
    }

    /// Fixed held-out evaluation set for a split. Synthetic tasks draw
    /// `eval.samples` from the fixed-seed evaluation stream (salted per
    /// split); image tasks walk their test set.
    pub fn eval_set(
        &self,
        pool: &SeedPool,
        filter: &Filter,
        permutation: Option<&[usize]>,
        samples: usize,
    ) -> Result<Vec<Batch<E>>> {
        let batch_size = self.config.eval.batch_size;
        let mut data = match &self.mnist_test {
            Some(test) => TaskData::Mnist(MnistStream::new(test, filter, false, permutation)?),
            None => TaskData::synthetic(self.config.task, filter, self.objective.da_protocol())?,
        };
        let mut rng = pool.stream(StreamKind::DataEval, split_salt(filter));
        Ok(data.eval_set(samples, batch_size, &mut rng))
    }

    /// Evaluation splits reported for this task.
    pub fn eval_splits(&self) -> Vec<Filter> {
        match self.config.task {
            TaskKind::Addmul => vec![
                Filter::All,
                Filter::Op(crate::data::ArithOp::Add),
                Filter::Op(crate::data::ArithOp::Mul),
            ],
            TaskKind::DoubleAdd => vec![Filter::All, Filter::Pair(1), Filter::Pair(2)],
            TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut => vec![Filter::All],
        }
    }
}

/// Salt distinguishing evaluation streams per split.
pub fn split_salt(filter: &Filter) -> u64 {
    match filter {
        Filter::All => 0,
        Filter::Op(crate::data::ArithOp::Add) => 1,
        Filter::Op(crate::data::ArithOp::Mul) => 2,
        Filter::Pair(p) => 2 + *p as u64,
        Filter::ExcludeClass(c) => 10 + *c as u64,
        Filter::OnlyClass(c) => 30 + *c as u64,
    }
}

/// Global-norm clip across two gradient maps (weights and mask logits are
/// clipped together during joint training).
pub fn clip_joint<E: Element>(
    a: &mut HashMap<String, Tensor<E>>,
    b: &mut HashMap<String, Tensor<E>>,
    max_norm: f64,
) -> f64 {
    let mut sq = 0.0f64;
    for map in [&*a, &*b] {
        let mut names: Vec<&String> = map.keys().collect();
        names.sort();
        for name in names {
            for &x in map[name].data() {
                let xf = x.to_f64();
                sq += xf * xf;
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = E::from_f64(max_norm / norm);
        for map in [a, b] {
            for g in map.values_mut() {
                for x in g.data_mut() {
                    *x = *x * scale;
                }
            }
        }
    }
    norm
}
