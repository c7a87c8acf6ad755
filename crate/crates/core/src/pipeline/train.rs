//! Weight training and staged mask training.

use std::collections::HashMap;

use crate::checkpoint::{Checkpoint, OptimizerSnapshot, StageRecord};
use crate::config::EarlyExit;
use crate::data::Filter;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::mask::{split_batch_sizes, BinaryMask, MaskSet};
use crate::objective::{GraphSource, MaskMode};
use crate::optim::{clip_global_norm, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::pipeline::{Session, STAGE_SALT_BASE};
use crate::rng::{SeedPool, StreamKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct StageOutcome {
    pub stage: String,
    pub steps_run: u64,
    /// Thresholded-mask accuracy on the stage's own data split.
    pub accuracy: f64,
    pub kept_fraction: f64,
}

fn merge_grads<E: Element>(
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

/// Trains the network on the full task from a fresh initialization and
/// returns a checkpoint with frozen weights. `resume` continues a partial
/// run instead (bitwise identical to an uninterrupted one).
pub fn train_weights<E: Element>(session: &Session<E>, seed: u64) -> Result<Checkpoint<E>> {
    train_weights_inner(session, seed, None)
}

pub fn resume_weights<E: Element>(
    session: &Session<E>,
    ckpt: Checkpoint<E>,
) -> Result<Checkpoint<E>> {
    let seed = ckpt.seed;
    train_weights_inner(session, seed, Some(ckpt))
}

fn train_weights_inner<E: Element>(
    session: &Session<E>,
    seed: u64,
    resume: Option<Checkpoint<E>>,
) -> Result<Checkpoint<E>> {
    let config = &session.config;
    let pool = SeedPool::new(seed);
    let digest = config.digest();

    let (mut params, mut adam, mut data_rng, steps_done) = match resume {
        Some(ckpt) => {
            ckpt.verify_config_digest(digest)?;
            if ckpt.counters.get("weights_completed").copied() == Some(1) {
                // already finished; nothing to do
                return Ok(ckpt);
            }
            let steps_done = ckpt.counters.get("weight_steps").copied().unwrap_or(0) as usize;
            let data_rng = ckpt
                .rng_states
                .iter()
                .find(|s| s.kind == StreamKind::DataShuffle as u8 && s.salt == 0)
                .and_then(|s| pool.restore(s))
                .ok_or_else(|| Error::Checkpoint("missing data stream state".into()))?;
            let adam = match ckpt.optimizer {
                Some(snap) => AdamState::restore(
                    AdamConfig::with_lr(config.optimizer.weight_lr),
                    snap.step_count,
                    snap.moments,
                ),
                None => AdamState::new(AdamConfig::with_lr(config.optimizer.weight_lr)),
            };
            (ckpt.params, adam, data_rng, steps_done)
        }
        None => {
            let mut init_rng = pool.stream(StreamKind::WeightsInit, 0);
            let params = session.objective.init_params::<E>(&mut init_rng);
            let adam = AdamState::new(AdamConfig::with_lr(config.optimizer.weight_lr));
            let data_rng = pool.stream(StreamKind::DataShuffle, 0);
            (params, adam, data_rng, 0usize)
        }
    };

    let mut data = session.train_data(&Filter::All, None)?;
    let early = config.train.early_exit.clone();
    let probe = match &early {
        Some(e) => Some(session.eval_set(&pool, &Filter::All, None, e.probe_samples)?),
        None => None,
    };

    let batch_size = config.optimizer.batch_size;
    let mut steps_run = steps_done;
    for step in steps_done + 1..=config.train.steps {
        let batches = data.next_step(batch_size, &mut data_rng);
        let mut grads: HashMap<String, Tensor<E>> = HashMap::new();
        for b in &batches {
            let mut g = Graph::new();
            let mut src = GraphSource::new(&params, true, MaskMode::None);
            let loss = session.objective.loss(&mut g, &mut src, b)?;
            let gr = g.backward(loss)?;
            for (name, leaf) in &src.weight_leaves {
                merge_grads(&mut grads, name, gr.get_or_zeros(&g, *leaf), E::one());
            }
        }
        clip_global_norm(&mut grads, config.optimizer.clip_norm);
        adam.step(&mut params, &grads)?;
        steps_run = step;

        if let (Some(e), Some(probe)) = (&early, &probe) {
            if step % e.check_every == 0 && step >= e.min_steps {
                let acc = session.objective.accuracy(&params, MaskMode::None, probe)?;
                if acc >= e.target_accuracy {
                    break;
                }
            }
        }
    }

    params.freeze_all();
    let eval = session.eval_set(&pool, &Filter::All, None, config.eval.samples)?;
    let accuracy = session.objective.accuracy(&params, MaskMode::None, &eval)?;

    let mut ckpt = Checkpoint::new(digest, seed, params);
    ckpt.counters.insert("weight_steps".into(), steps_run as u64);
    ckpt.counters.insert("weights_completed".into(), 1);
    ckpt.metrics.insert("accuracy/none/all".into(), accuracy);
    ckpt.rng_states.push(data_rng.state());
    ckpt.optimizer = Some(OptimizerSnapshot {
        step_count: adam.step_count,
        moments: adam.snapshot(),
    });
    Ok(ckpt)
}

/// Mid-run snapshot of an unfinished weight-training run (for the
/// save/load/continue path).
pub fn train_weights_partial<E: Element>(
    session: &Session<E>,
    seed: u64,
    steps: usize,
) -> Result<Checkpoint<E>> {
    let config = &session.config;
    let pool = SeedPool::new(seed);
    let mut init_rng = pool.stream(StreamKind::WeightsInit, 0);
    let mut params = session.objective.init_params::<E>(&mut init_rng);
    let mut adam = AdamState::new(AdamConfig::with_lr(config.optimizer.weight_lr));
    let mut data_rng = pool.stream(StreamKind::DataShuffle, 0);
    let mut data = session.train_data(&Filter::All, None)?;
    let batch_size = config.optimizer.batch_size;
    for _ in 0..steps {
        let batches = data.next_step(batch_size, &mut data_rng);
        let mut grads: HashMap<String, Tensor<E>> = HashMap::new();
        for b in &batches {
            let mut g = Graph::new();
            let mut src = GraphSource::new(&params, true, MaskMode::None);
            let loss = session.objective.loss(&mut g, &mut src, b)?;
            let gr = g.backward(loss)?;
            for (name, leaf) in &src.weight_leaves {
                merge_grads(&mut grads, name, gr.get_or_zeros(&g, *leaf), E::one());
            }
        }
        clip_global_norm(&mut grads, config.optimizer.clip_norm);
        adam.step(&mut params, &grads)?;
    }
    let mut ckpt = Checkpoint::new(config.digest(), seed, params);
    ckpt.counters.insert("weight_steps".into(), steps as u64);
    ckpt.rng_states.push(data_rng.state());
    ckpt.optimizer = Some(OptimizerSnapshot {
        step_count: adam.step_count,
        moments: adam.snapshot(),
    });
    Ok(ckpt)
}

/// Everything needed for one mask-training run.
pub(crate) struct MaskRunSpec<'a> {
    pub stage_name: String,
    pub filter: Filter,
    pub steps: usize,
    pub early: Option<EarlyExit>,
    pub alpha: f64,
    pub samples_per_batch: usize,
    pub salt: u64,
    pub fixed_bits: Vec<(String, Vec<bool>)>,
    pub permutation: Option<&'a [usize]>,
}

/// Trains mask logits against frozen weights with the multi-sample
/// protocol: the batch splits into `k` near-equal contiguous parts, each
/// part runs under its own sampled binary mask, and the part losses are
/// averaged weighted by part size. Gradient flows into the logits through
/// every sample; the regularizer adds exactly `alpha` per trainable logit.
///
/// The weights are snapshot before and compared bitwise after: any change
/// is an error.
pub(crate) fn run_mask_training<E: Element>(
    session: &Session<E>,
    pool: &SeedPool,
    params: &ParamStore<E>,
    spec: &MaskRunSpec<'_>,
) -> Result<(MaskSet<E>, StageOutcome)> {
    let config = &session.config;
    let weight_snapshot = params.snapshot_bits();

    let mut mask = MaskSet::init(
        params,
        config.mask.keep_prob,
        &config.mask.exclude,
        &spec.stage_name,
    )?;
    for (name, bits) in &spec.fixed_bits {
        mask.fix_bits(name, bits.clone())?;
    }
    mask.temperature = config.mask.temperature;
    mask.validate_against(params)?;

    // Working store the optimizer updates; synced back into the mask after
    // every step. Pinned entries are frozen so they are skipped.
    let mut logit_store: ParamStore<E> = ParamStore::new();
    for (name, layer, logits) in mask.entries() {
        logit_store.insert(name, layer, logits.clone())?;
    }
    for (name, _, _) in mask.entries().collect::<Vec<_>>() {
        if mask.fixed_bits(name).is_some() {
            logit_store.get_mut(name).expect("inserted").frozen = true;
        }
    }

    let mut adam = AdamState::new(AdamConfig::with_lr(config.optimizer.mask_lr));
    let mut data_rng = pool.stream(StreamKind::DataShuffle, spec.salt);
    let mut mask_rng = pool.stream(StreamKind::MaskSample, spec.salt);
    let mut data = session.train_data(&spec.filter, spec.permutation)?;
    let probe = match &spec.early {
        Some(e) => Some(session.eval_set(pool, &spec.filter, spec.permutation, e.probe_samples)?),
        None => None,
    };

    let batch_size = config.optimizer.batch_size;
    let k = spec.samples_per_batch;
    let mut steps_run = 0u64;
    let mut last_kept = f64::NAN;

    for step in 1..=spec.steps {
        let batches = data.next_step(batch_size, &mut data_rng);
        let n_total = batches[0].len();
        let sizes = split_batch_sizes(n_total, k)?;
        // One mask sample per part, shared across the passes of this step.
        let noises: Vec<Vec<Tensor<E>>> =
            (0..k).map(|_| mask.sample_noise(&mut mask_rng)).collect();

        let mut grads: HashMap<String, Tensor<E>> = HashMap::new();
        for b in &batches {
            let mut offset = 0;
            for (j, &part_len) in sizes.iter().enumerate() {
                let part = b.slice_rows(offset, part_len);
                offset += part_len;
                let weight = E::from_f64(part_len as f64 / n_total as f64);
                let mut g = Graph::new();
                let mut src = GraphSource::new(
                    params,
                    false,
                    MaskMode::Sampled {
                        mask: &mask,
                        noise: &noises[j],
                    },
                );
                let loss = session.objective.loss(&mut g, &mut src, &part)?;
                let gr = g.backward(loss)?;
                for (name, leaf) in &src.logit_leaves {
                    merge_grads(&mut grads, name, gr.get_or_zeros(&g, *leaf), weight);
                }
            }
        }
        mask.add_regularizer_grads(&mut grads, spec.alpha);
        clip_global_norm(&mut grads, config.optimizer.clip_norm);
        adam.step(&mut logit_store, &grads)?;
        for (name, logits) in mask.entries_mut() {
            if let Some(p) = logit_store.get(name) {
                logits
                    .data_mut()
                    .copy_from_slice(p.tensor.data());
            }
        }
        steps_run = step as u64;

        if let (Some(e), Some(probe)) = (&spec.early, &probe) {
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

    if params.snapshot_bits() != weight_snapshot {
        return Err(Error::Pipeline(format!(
            "frozen weights changed during mask stage {:?}",
            spec.stage_name
        )));
    }

    let bits = mask.threshold();
    let eval = session.eval_set(pool, &spec.filter, spec.permutation, config.eval.samples)?;
    let accuracy = session
        .objective
        .accuracy(params, MaskMode::Binary(&bits), &eval)?;
    let outcome = StageOutcome {
        stage: spec.stage_name.clone(),
        steps_run,
        accuracy,
        kept_fraction: bits.kept_fraction(),
    };
    Ok((mask, outcome))
}

/// Resolves a stage's pinned bits: the referenced stage's thresholded mask,
/// restricted to the configured layers.
pub(crate) fn resolve_fixed_bits<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
    stage_name: &str,
) -> Result<Vec<(String, Vec<bool>)>> {
    let stage_cfg = session
        .config
        .stage(stage_name)
        .ok_or_else(|| Error::Config(format!("unknown stage {stage_name:?}")))?;
    let Some(source_name) = &stage_cfg.fixed_mask_from else {
        return Ok(Vec::new());
    };
    let source = ckpt.stage(source_name).ok_or_else(|| {
        Error::Pipeline(format!(
            "stage {stage_name:?} pins its mask to {source_name:?}, which has not been trained"
        ))
    })?;
    let mut fixed = Vec::new();
    for (name, layer, bits) in source.bits.entries() {
        if stage_cfg.fixed_mask_layers.contains(&layer) {
            fixed.push((name.to_string(), bits.to_vec()));
        }
    }
    if fixed.is_empty() {
        return Err(Error::Pipeline(format!(
            "fixed_mask_layers of stage {stage_name:?} match no parameters"
        )));
    }
    Ok(fixed)
}

/// Trains one configured mask stage against a frozen checkpoint and
/// records it there. The stage's index salts its random streams.
pub fn train_mask_stage<E: Element>(
    session: &Session<E>,
    ckpt: &mut Checkpoint<E>,
    stage_name: &str,
) -> Result<StageOutcome> {
    let config = &session.config;
    ckpt.verify_config_digest(config.digest())?;
    if ckpt.params.iter().any(|p| !p.frozen) {
        return Err(Error::Pipeline(
            "mask stages need fully frozen weights; run weight training first".into(),
        ));
    }
    let index = config
        .stages
        .iter()
        .position(|s| s.name == stage_name)
        .ok_or_else(|| Error::Config(format!("unknown stage {stage_name:?}")))?;
    let stage_cfg = &config.stages[index];
    let spec = MaskRunSpec {
        stage_name: stage_name.to_string(),
        filter: Filter::parse(&stage_cfg.filter)?,
        steps: stage_cfg.steps,
        early: stage_cfg.early_exit.clone(),
        alpha: config.mask.effective_alpha(config.optimizer.batch_size)?,
        samples_per_batch: config.mask.samples_per_batch,
        salt: STAGE_SALT_BASE + index as u64,
        fixed_bits: resolve_fixed_bits(session, ckpt, stage_name)?,
        permutation: None,
    };
    let pool = SeedPool::new(ckpt.seed);
    let (mask, outcome) = run_mask_training(session, &pool, &ckpt.params, &spec)?;
    let bits = mask.threshold();
    ckpt.metrics.insert(
        format!("accuracy/{}/{}", stage_name, spec.filter),
        outcome.accuracy,
    );
    ckpt.metrics
        .insert(format!("kept/{stage_name}"), outcome.kept_fraction);
    let keep_probs = mask.keep_probabilities();
    let mean_keep = keep_probs.iter().map(|(_, p)| p).sum::<f64>() / keep_probs.len().max(1) as f64;
    ckpt.metrics
        .insert(format!("keep_prob/{stage_name}"), mean_keep);
    ckpt.stages.push(StageRecord {
        mask,
        bits,
        steps_run: outcome.steps_run,
    });
    Ok(outcome)
}

/// Idempotent wrapper: a stage already recorded in the checkpoint is not
/// retrained and the stored artifacts stay untouched.
pub fn ensure_stage<E: Element>(
    session: &Session<E>,
    ckpt: &mut Checkpoint<E>,
    stage_name: &str,
) -> Result<Option<StageOutcome>> {
    if ckpt.stage(stage_name).is_some() {
        return Ok(None);
    }
    train_mask_stage(session, ckpt, stage_name).map(Some)
}

/// Accuracy of an arbitrary mask variant on one evaluation split.
pub fn eval_variant<E: Element>(
    session: &Session<E>,
    pool: &SeedPool,
    params: &ParamStore<E>,
    mask: Option<&BinaryMask>,
    filter: &Filter,
) -> Result<f64> {
    let eval = session.eval_set(pool, filter, None, session.config.eval.samples)?;
    let mode = match mask {
        Some(bits) => MaskMode::Binary(bits),
        None => MaskMode::None,
    };
    session.objective.accuracy(params, mode, &eval)
}

