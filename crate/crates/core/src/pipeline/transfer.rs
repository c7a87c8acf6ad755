//! Sequential-task transfer: joint weight+mask training per permutation,
//! freezing the weights each task's mask keeps, reinitializing the rest.
//!
//! The first layer is special: it is fully reset before every task and none
//! of its weights are ever frozen, so each permutation can relearn its
//! input wiring. Per task the report records how much of the new mask falls
//! on weights any previous task already occupied.

use std::collections::{BTreeMap, HashMap};

use serde::Serialize;

use crate::checkpoint::{Checkpoint, StageRecord};
use crate::data::{make_permutation_sequence, Filter};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::{split_batch_sizes, BinaryMask, MaskSet};
use crate::metrics::{overlap_with_reference, union_mask, OverlapWithReference};
use crate::objective::{GraphSource, MaskMode};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::pipeline::{clip_joint, Session, STAGE_SALT_BASE};
use crate::rng::{SeedPool, Stream, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TransferTaskRecord {
    pub task: usize,
    pub steps_run: u64,
    /// Thresholded-mask accuracy on this task's (permuted) test split.
    pub masked_accuracy: f64,
    pub kept_fraction: f64,
    /// Fraction of this task's kept weights already occupied by earlier
    /// tasks; absent for task 0.
    pub sharing_with_previous: Option<OverlapWithReference>,
    /// Occupied (frozen) fraction per layer after this task.
    pub occupied_per_layer: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub biased: bool,
    pub tasks: Vec<TransferTaskRecord>,
}

impl TransferReport {
    /// Mean sharing over the given layers at one task index.
    pub fn layer_sharing(&self, task: usize, layers: &[usize]) -> Option<f64> {
        let rec = self.tasks.get(task)?;
        let sharing = rec.sharing_with_previous.as_ref()?;
        let vals: Vec<f64> = layers
            .iter()
            .filter_map(|l| sharing.per_layer.get(l).copied())
            .collect();
        if vals.is_empty() {
            None
        } else {
            Some(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    }
}

/// Runs the whole sequence and returns the report plus a checkpoint whose
/// stages hold one mask per task (`task0`, `task1`, ...).
pub fn transfer_sequence<E: Element>(
    session: &Session<E>,
    seed: u64,
) -> Result<(TransferReport, Checkpoint<E>)> {
    let config = &session.config;
    let transfer = config
        .transfer
        .clone()
        .ok_or_else(|| Error::Config("config has no [transfer] section".into()))?;
    if !session.is_image_task() {
        return Err(Error::Config("transfer runs on the permuted image task".into()));
    }

    let pool = SeedPool::new(seed);
    let input_dim = config.task.input_dim();
    let permutations = make_permutation_sequence(transfer.tasks, input_dim, &pool);

    let mut init_rng = pool.stream(StreamKind::WeightsInit, 0);
    let mut params = session.objective.init_params::<E>(&mut init_rng);
    let first_layer = params.layers().into_iter().min().unwrap_or(0);
    let alpha = config.mask.effective_alpha(config.optimizer.batch_size)?;

    let mut union: Option<BinaryMask> = None;
    let mut records = Vec::new();
    let mut stages = Vec::new();

    for task in 0..transfer.tasks {
        if task > 0 {
            reinit_free_weights(session, &mut params, &mut init_rng, first_layer);
        }

        let mut mask = MaskSet::init(
            &params,
            config.mask.keep_prob,
            &config.mask.exclude,
            format!("task{task}"),
        )?;
        mask.temperature = config.mask.temperature;
        if transfer.biased && task > 0 {
            let union_bits = union.as_ref().expect("tasks > 0 have a union");
            mask.biased_reinit(union_bits, transfer.p_old, transfer.p_new)?;
        }

        // Frozen elements must survive the stage bitwise.
        let frozen_snapshot = snapshot_frozen(&params);

        let steps_run = run_joint_training(
            session,
            &pool,
            &mut params,
            &mut mask,
            &permutations[task],
            task,
            alpha,
            &transfer,
        )?;

        verify_frozen(&params, &frozen_snapshot)?;

        let bits = mask.threshold();
        let eval = session.eval_set(&pool, &Filter::All, Some(&permutations[task]), config.eval.samples)?;
        let masked_accuracy = session
            .objective
            .accuracy(&params, MaskMode::Binary(&bits), &eval)?;

        let sharing_with_previous = match &union {
            Some(u) => Some(overlap_with_reference(&bits, u)?),
            None => None,
        };

        // Freeze this task's kept weights everywhere but the first layer.
        for p in params.iter_mut() {
            if p.layer == first_layer {
                continue;
            }
            if let Some(kept) = bits.bits(&p.name) {
                let frozen = p
                    .frozen_elems
                    .get_or_insert_with(|| vec![false; p.tensor.numel()]);
                for (f, &k) in frozen.iter_mut().zip(kept) {
                    *f |= k;
                }
            }
        }

        union = Some(match union {
            Some(u) => union_mask(&u, &bits, "union")?,
            None => bits.clone(),
        });

        let occupied_per_layer = occupied_fractions(&params);
        records.push(TransferTaskRecord {
            task,
            steps_run,
            masked_accuracy,
            kept_fraction: bits.kept_fraction(),
            sharing_with_previous,
            occupied_per_layer,
        });
        stages.push(StageRecord {
            mask,
            bits,
            steps_run,
        });
    }

    let report = TransferReport {
        seed,
        biased: transfer.biased,
        tasks: records,
    };
    let mut ckpt = Checkpoint::new(config.digest(), seed, params);
    ckpt.stages = stages;
    for rec in &report.tasks {
        ckpt.metrics.insert(
            format!("transfer/task{}/masked_accuracy", rec.task),
            rec.masked_accuracy,
        );
        ckpt.metrics
            .insert(format!("transfer/task{}/kept", rec.task), rec.kept_fraction);
        if let Some(sharing) = &rec.sharing_with_previous {
            ckpt.metrics.insert(
                format!("transfer/task{}/sharing_total", rec.task),
                sharing.total,
            );
            for (layer, frac) in &sharing.per_layer {
                ckpt.metrics.insert(
                    format!("transfer/task{}/sharing_layer{layer}", rec.task),
                    *frac,
                );
            }
        }
    }
    Ok((report, ckpt))
}

/// Joint weight+mask training for one task. Weight and logit gradients are
/// clipped together, then applied by their own optimizers (weight lr and
/// mask lr differ).
#[allow(clippy::too_many_arguments)]
fn run_joint_training<E: Element>(
    session: &Session<E>,
    pool: &SeedPool,
    params: &mut ParamStore<E>,
    mask: &mut MaskSet<E>,
    permutation: &[usize],
    task: usize,
    alpha: f64,
    transfer: &crate::config::TransferConfig,
) -> Result<u64> {
    let config = &session.config;
    let salt = STAGE_SALT_BASE + task as u64;
    let mut data_rng = pool.stream(StreamKind::DataShuffle, salt);
    let mut mask_rng = pool.stream(StreamKind::MaskSample, salt);
    let mut data = session.train_data(&Filter::All, Some(permutation))?;
    let probe = match &transfer.early_exit {
        Some(e) => Some(session.eval_set(pool, &Filter::All, Some(permutation), e.probe_samples)?),
        None => None,
    };

    let mut weight_adam = AdamState::new(AdamConfig::with_lr(config.optimizer.weight_lr));
    let mut logit_adam = AdamState::new(AdamConfig::with_lr(config.optimizer.mask_lr));
    let mut logit_store: ParamStore<E> = ParamStore::new();
    for (name, layer, logits) in mask.entries() {
        logit_store.insert(name, layer, logits.clone())?;
    }

    let batch_size = config.optimizer.batch_size;
    let k = transfer.samples_per_batch;
    let mut steps_run = 0;
    let mut last_kept = f64::NAN;

    for step in 1..=transfer.steps_per_task {
        let batches = data.next_step(batch_size, &mut data_rng);
        let n_total = batches[0].len();
        let sizes = split_batch_sizes(n_total, k)?;
        let noises: Vec<Vec<Tensor<E>>> =
            (0..k).map(|_| mask.sample_noise(&mut mask_rng)).collect();

        let mut weight_grads: HashMap<String, Tensor<E>> = HashMap::new();
        let mut logit_grads: HashMap<String, Tensor<E>> = HashMap::new();
        for b in &batches {
            let mut offset = 0;
            for (j, &part_len) in sizes.iter().enumerate() {
                let part = b.slice_rows(offset, part_len);
                offset += part_len;
                let weight = E::from_f64(part_len as f64 / n_total as f64);
                let mut g = Graph::new();
                let mut src = GraphSource::new(
                    params,
                    true,
                    MaskMode::Sampled {
                        mask,
                        noise: &noises[j],
                    },
                );
                let loss = session.objective.loss(&mut g, &mut src, &part)?;
                let gr = g.backward(loss)?;
                for (name, leaf) in &src.weight_leaves {
                    merge(&mut weight_grads, name, gr.get_or_zeros(&g, *leaf), weight);
                }
                for (name, leaf) in &src.logit_leaves {
                    merge(&mut logit_grads, name, gr.get_or_zeros(&g, *leaf), weight);
                }
            }
        }
        mask.add_regularizer_grads(&mut logit_grads, alpha);
        clip_joint(&mut weight_grads, &mut logit_grads, config.optimizer.clip_norm);
        weight_adam.step(params, &weight_grads)?;
        logit_adam.step(&mut logit_store, &logit_grads)?;
        for (name, logits) in mask.entries_mut() {
            if let Some(p) = logit_store.get(name) {
                logits.data_mut().copy_from_slice(p.tensor.data());
            }
        }
        steps_run = step as u64;

        if let (Some(e), Some(probe)) = (&transfer.early_exit, &probe) {
            if step % e.check_every == 0 && step >= e.min_steps {
                let bits = mask.threshold();
                let kept = bits.kept_fraction();
                let acc = session
                    .objective
                    .accuracy(params, MaskMode::Binary(&bits), probe)?;
                let settled = (kept - last_kept).abs() < e.kept_tolerance;
                last_kept = kept;
                if acc >= e.target_accuracy && settled {
                    break;
                }
            }
        }
    }
    Ok(steps_run)
}

fn merge<E: Element>(
    grads: &mut HashMap<String, Tensor<E>>,
    name: &str,
    contribution: Tensor<E>,
    scale: E,
) {
    match grads.get_mut(name) {
        Some(g) => g.add_scaled(&contribution, scale),
        None => {
            let mut g = Tensor::zeros(contribution.shape());
            g.add_scaled(&contribution, scale);
            grads.insert(name.to_string(), g);
        }
    }
}

/// Rewrites every unfrozen element with a fresh draw (the first layer is
/// fully reset, its freeze state cleared).
fn reinit_free_weights<E: Element>(
    session: &Session<E>,
    params: &mut ParamStore<E>,
    init_rng: &mut Stream,
    first_layer: usize,
) {
    let fresh: ParamStore<E> = session.objective.init_params(init_rng);
    for p in params.iter_mut() {
        let new = fresh.get(&p.name).expect("same architecture");
        if p.layer == first_layer {
            p.frozen_elems = None;
            p.tensor = new.tensor.clone();
            continue;
        }
        match &p.frozen_elems {
            None => p.tensor = new.tensor.clone(),
            Some(frozen) => {
                for i in 0..p.tensor.numel() {
                    if !frozen[i] {
                        p.tensor.data_mut()[i] = new.tensor.data()[i];
                    }
                }
            }
        }
    }
}

fn snapshot_frozen<E: Element>(params: &ParamStore<E>) -> Vec<(String, Vec<(usize, u64)>)> {
    params
        .iter()
        .filter_map(|p| {
            let frozen = p.frozen_elems.as_ref()?;
            let vals: Vec<(usize, u64)> = frozen
                .iter()
                .enumerate()
                .filter(|(_, &f)| f)
                .map(|(i, _)| (i, p.tensor.data()[i].to_bits_u64()))
                .collect();
            Some((p.name.clone(), vals))
        })
        .collect()
}

fn verify_frozen<E: Element>(
    params: &ParamStore<E>,
    snapshot: &[(String, Vec<(usize, u64)>)],
) -> Result<()> {
    for (name, vals) in snapshot {
        let p = params.get(name).expect("parameter set is stable");
        for &(i, bits) in vals {
            if p.tensor.data()[i].to_bits_u64() != bits {
                return Err(Error::Pipeline(format!(
                    "frozen element {name:?}[{i}] changed during joint training"
                )));
            }
        }
    }
    Ok(())
}

/// Occupied (frozen) fraction per layer.
fn occupied_fractions<E: Element>(params: &ParamStore<E>) -> BTreeMap<usize, f64> {
    let mut per_layer: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for p in params.iter() {
        let slot = per_layer.entry(p.layer).or_insert((0, 0));
        slot.1 += p.tensor.numel();
        if let Some(frozen) = &p.frozen_elems {
            slot.0 += frozen.iter().filter(|&&f| f).count();
        }
    }
    per_layer
        .into_iter()
        .map(|(layer, (occ, total))| (layer, occ as f64 / total as f64))
        .collect()
}
