//! Sanity protocols: the copied-I/O sharing check, half-network masking,
//! and mask stability across seeds.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TaskKind;
use crate::data::Filter;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{choose_half_split, half_mask, iou, per_layer_sharing, HalfSide, SharingReport};
use crate::objective::MaskMode;
use crate::pipeline::train::{run_mask_training, MaskRunSpec, StageOutcome};
use crate::pipeline::{Session, STABILITY_SALT_BASE, STAGE_SALT_BASE};
use crate::rng::SeedPool;

/// Copies one pair's input and output weight blocks onto the other pair's
/// blocks of a trained double-add network, so the hidden layers can no
/// longer tell the pairs apart. Masks retrained afterwards should share
/// nearly all hidden-layer weights while the copied I/O blocks stay
/// disjoint.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CopyIoReport {
    pub post_copy_accuracy_pair1: f64,
    pub post_copy_accuracy_pair2: f64,
    pub pair1: StageOutcomeSummary,
    pub pair2: StageOutcomeSummary,
    pub sharing: SharingReport,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct StageOutcomeSummary {
    pub stage: String,
    pub steps_run: u64,
    pub accuracy: f64,
    pub kept_fraction: f64,
}

impl From<StageOutcome> for StageOutcomeSummary {
    fn from(o: StageOutcome) -> Self {
        StageOutcomeSummary {
            stage: o.stage,
            steps_run: o.steps_run,
            accuracy: o.accuracy,
            kept_fraction: o.kept_fraction,
        }
    }
}

pub fn copy_io_sanity<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
) -> Result<(CopyIoReport, Checkpoint<E>)> {
    if session.config.task != TaskKind::DoubleAdd {
        return Err(Error::Config("the copied-I/O check runs on the double-add task".into()));
    }
    let mut edited = ckpt.clone();
    edited.stages.clear();
    edited.metrics.clear();

    // Input layer: rows are input units; pair 1 occupies the first 40.
    {
        let p = edited
            .params
            .get_mut("layer0.weight")
            .ok_or_else(|| Error::Pipeline("missing layer0.weight (ffn checkpoint required)".into()))?;
        let (rows, cols) = p.tensor.dims2()?;
        if rows != 80 {
            return Err(Error::Pipeline(format!("expected 80 input rows, got {rows}")));
        }
        let data = p.tensor.data_mut();
        for r in 0..40 {
            let (src, dst) = data.split_at_mut((r + 40) * cols);
            dst[..cols].copy_from_slice(&src[r * cols..r * cols + cols]);
        }
    }
    // Output layer: columns are output units; pair 1 owns the first 20.
    let last_layer = edited.params.layers().into_iter().max().unwrap();
    let head_weight = format!("layer{last_layer}.weight");
    let head_bias = format!("layer{last_layer}.bias");
    {
        let p = edited
            .params
            .get_mut(&head_weight)
            .ok_or_else(|| Error::Pipeline(format!("missing {head_weight}")))?;
        let (rows, cols) = p.tensor.dims2()?;
        if cols != 40 {
            return Err(Error::Pipeline(format!("expected 40 output columns, got {cols}")));
        }
        let data = p.tensor.data_mut();
        for r in 0..rows {
            for c in 0..20 {
                data[r * cols + 20 + c] = data[r * cols + c];
            }
        }
        let b = edited.params.get_mut(&head_bias).expect("bias exists");
        let bias = b.tensor.data_mut();
        for c in 0..20 {
            bias[20 + c] = bias[c];
        }
    }

    let pool = SeedPool::new(edited.seed);
    let post1 = eval_pair(session, &pool, &edited, 1, None)?;
    let post2 = eval_pair(session, &pool, &edited, 2, None)?;

    let config = &session.config;
    let alpha = config.mask.effective_alpha(config.optimizer.batch_size)?;
    let mut outcomes = Vec::new();
    let mut masks = Vec::new();
    for pair in [1u8, 2u8] {
        let stage_cfg = config
            .stages
            .iter()
            .find(|s| Filter::parse(&s.filter).ok() == Some(Filter::Pair(pair)))
            .ok_or_else(|| {
                Error::Config(format!("config defines no stage with filter pair={pair}"))
            })?;
        let spec = MaskRunSpec {
            stage_name: format!("{}-copied", stage_cfg.name),
            filter: Filter::Pair(pair),
            steps: stage_cfg.steps,
            early: stage_cfg.early_exit.clone(),
            alpha,
            samples_per_batch: config.mask.samples_per_batch,
            salt: STAGE_SALT_BASE + 50 + pair as u64,
            fixed_bits: Vec::new(),
            permutation: None,
        };
        let (mask, outcome) = run_mask_training(session, &pool, &edited.params, &spec)?;
        let bits = mask.threshold();
        edited.stages.push(crate::checkpoint::StageRecord {
            mask,
            bits,
            steps_run: outcome.steps_run,
        });
        outcomes.push(outcome);
        masks.push(edited.stages.last().unwrap().bits.clone());
    }

    let sharing = per_layer_sharing(&masks[0], &masks[1], "pair1-copied-vs-pair2-copied")?;
    edited
        .metrics
        .insert("copyio/post_copy_accuracy_pair1".into(), post1);
    edited
        .metrics
        .insert("copyio/post_copy_accuracy_pair2".into(), post2);
    for (layer, stats) in &sharing.per_layer {
        edited
            .metrics
            .insert(format!("copyio/sharing_layer{layer}"), stats.shared_fraction);
    }

    let report = CopyIoReport {
        post_copy_accuracy_pair1: post1,
        post_copy_accuracy_pair2: post2,
        pair1: outcomes.remove(0).into(),
        pair2: outcomes.remove(0).into(),
        sharing,
    };
    Ok((report, edited))
}

fn eval_pair<E: Element>(
    session: &Session<E>,
    pool: &SeedPool,
    ckpt: &Checkpoint<E>,
    pair: u8,
    mask: Option<&BinaryMask>,
) -> Result<f64> {
    let eval = session.eval_set(pool, &Filter::Pair(pair), None, session.config.eval.samples)?;
    let mode = match mask {
        Some(bits) => MaskMode::Binary(bits),
        None => MaskMode::None,
    };
    session.objective.accuracy(&ckpt.params, mode, &eval)
}

/// Applies a stage's mask to only half of the network (early or late
/// layers), leaving the other half unmasked, and reports the accuracy drop
/// against the fully masked baseline.
#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct HalfMaskReport {
    pub stage: String,
    pub split_layer: usize,
    pub early_fraction: f64,
    /// Whether the best available layer boundary puts each side within
    /// 40-60% of the parameters.
    pub balanced: bool,
    pub unmasked_accuracy: f64,
    pub full_mask_accuracy: f64,
    pub mask_early_accuracy: f64,
    pub mask_late_accuracy: f64,
    pub early_drop: f64,
    pub late_drop: f64,
}

pub fn half_mask_eval<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
    stage_name: &str,
    split_layer: Option<usize>,
) -> Result<HalfMaskReport> {
    let stage = ckpt
        .stage(stage_name)
        .ok_or_else(|| Error::Pipeline(format!("stage {stage_name:?} not in checkpoint")))?;
    let bits = &stage.bits;
    let (auto_split, early_fraction) = choose_half_split(bits);
    let split = split_layer.unwrap_or(auto_split);

    let filter = session
        .config
        .stage(stage_name)
        .map(|s| Filter::parse(&s.filter))
        .transpose()?
        .unwrap_or(Filter::All);
    let pool = SeedPool::new(ckpt.seed);
    let eval = session.eval_set(&pool, &filter, None, session.config.eval.samples)?;

    let unmasked = session.objective.accuracy(&ckpt.params, MaskMode::None, &eval)?;
    let full = session
        .objective
        .accuracy(&ckpt.params, MaskMode::Binary(bits), &eval)?;
    let early_bits = half_mask(bits, split, HalfSide::MaskEarly);
    let late_bits = half_mask(bits, split, HalfSide::MaskLate);
    let early = session
        .objective
        .accuracy(&ckpt.params, MaskMode::Binary(&early_bits), &eval)?;
    let late = session
        .objective
        .accuracy(&ckpt.params, MaskMode::Binary(&late_bits), &eval)?;

    Ok(HalfMaskReport {
        stage: stage_name.to_string(),
        split_layer: split,
        early_fraction,
        balanced: (0.4..=0.6).contains(&early_fraction),
        unmasked_accuracy: unmasked,
        full_mask_accuracy: full,
        mask_early_accuracy: early,
        mask_late_accuracy: late,
        early_drop: full - early,
        late_drop: full - late,
    })
}

/// Trains the same stage twice under different mask seeds against the same
/// frozen weights and returns the IoU of the two thresholded masks.
pub fn stability_iou<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
    stage_name: &str,
    mask_seeds: (u64, u64),
) -> Result<(f64, StageOutcome, StageOutcome)> {
    let config = &session.config;
    let stage_cfg = config
        .stage(stage_name)
        .ok_or_else(|| Error::Config(format!("unknown stage {stage_name:?}")))?;
    let alpha = config.mask.effective_alpha(config.optimizer.batch_size)?;
    let pool = SeedPool::new(ckpt.seed);

    let run = |mask_seed: u64| -> Result<(BinaryMask, StageOutcome)> {
        let spec = MaskRunSpec {
            stage_name: format!("{stage_name}-seed{mask_seed}"),
            filter: Filter::parse(&stage_cfg.filter)?,
            steps: stage_cfg.steps,
            early: stage_cfg.early_exit.clone(),
            alpha,
            samples_per_batch: config.mask.samples_per_batch,
            salt: STABILITY_SALT_BASE + mask_seed,
            fixed_bits: Vec::new(),
            permutation: None,
        };
        let (mask, outcome) = run_mask_training(session, &pool, &ckpt.params, &spec)?;
        Ok((mask.threshold(), outcome))
    };

    let (bits_a, outcome_a) = run(mask_seeds.0)?;
    let (bits_b, outcome_b) = run(mask_seeds.1)?;
    let value = iou(&bits_a, &bits_b)?;
    Ok((value, outcome_a, outcome_b))
}
