//! Regularizer-strength sweep: retrain a control mask at several values
//! and recommend the strongest one whose accuracy stays adequate.

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::data::Filter;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::metrics::iou;
use crate::objective::MaskMode;
use crate::pipeline::train::{run_mask_training, MaskRunSpec};
use crate::pipeline::{Session, SWEEP_SALT_BASE};
use crate::rng::SeedPool;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SweepPoint {
    /// The configured value (beta by default, alpha with `as_alpha`).
    pub value: f64,
    /// Effective per-logit strength actually applied.
    pub alpha: f64,
    pub accuracy: f64,
    pub kept_fraction: f64,
    pub steps_run: u64,
    /// IoU between the two `sharing_stages` masks at this value, when
    /// configured.
    pub sharing: Option<f64>,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct SweepReport {
    pub stage: String,
    pub unmasked_accuracy: f64,
    pub adequate_fraction: f64,
    pub points: Vec<SweepPoint>,
    /// Largest value whose control-mask accuracy reaches
    /// `adequate_fraction * unmasked_accuracy`.
    pub recommended: Option<f64>,
}

pub fn alpha_sweep<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
) -> Result<SweepReport> {
    let config = &session.config;
    let sweep = config
        .sweep
        .clone()
        .ok_or_else(|| Error::Config("config has no [sweep] section".into()))?;
    let stage_cfg = config
        .stage(&sweep.stage)
        .ok_or_else(|| Error::Config(format!("unknown sweep stage {:?}", sweep.stage)))?;
    let filter = Filter::parse(&stage_cfg.filter)?;
    let pool = SeedPool::new(ckpt.seed);

    let eval = session.eval_set(&pool, &filter, None, config.eval.samples)?;
    let unmasked_accuracy = session
        .objective
        .accuracy(&ckpt.params, MaskMode::None, &eval)?;

    let batch = config.optimizer.batch_size;
    let mut points = Vec::new();
    for (i, &value) in sweep.values.iter().enumerate() {
        let alpha = if sweep.as_alpha { value } else { value / batch as f64 };
        let salt = SWEEP_SALT_BASE + 10 * i as u64;
        let spec = MaskRunSpec {
            stage_name: format!("{}-sweep{i}", sweep.stage),
            filter: filter.clone(),
            steps: stage_cfg.steps,
            early: stage_cfg.early_exit.clone(),
            alpha,
            samples_per_batch: config.mask.samples_per_batch,
            salt,
            fixed_bits: Vec::new(),
            permutation: None,
        };
        let (_, outcome) = run_mask_training(session, &pool, &ckpt.params, &spec)?;

        let sharing = if sweep.sharing_stages.len() == 2 {
            let mut bits = Vec::new();
            for (j, name) in sweep.sharing_stages.iter().enumerate() {
                let pair_cfg = config.stage(name).expect("validated");
                let spec = MaskRunSpec {
                    stage_name: format!("{name}-sweep{i}"),
                    filter: Filter::parse(&pair_cfg.filter)?,
                    steps: pair_cfg.steps,
                    early: pair_cfg.early_exit.clone(),
                    alpha,
                    samples_per_batch: config.mask.samples_per_batch,
                    salt: salt + 1 + j as u64,
                    fixed_bits: Vec::new(),
                    permutation: None,
                };
                let (mask, _) = run_mask_training(session, &pool, &ckpt.params, &spec)?;
                bits.push(mask.threshold());
            }
            Some(iou(&bits[0], &bits[1])?)
        } else {
            None
        };

        points.push(SweepPoint {
            value,
            alpha,
            accuracy: outcome.accuracy,
            kept_fraction: outcome.kept_fraction,
            steps_run: outcome.steps_run,
            sharing,
        });
    }

    let floor = sweep.adequate_fraction * unmasked_accuracy;
    let recommended = points
        .iter()
        .filter(|p| p.accuracy >= floor)
        .max_by(|a, b| a.value.total_cmp(&b.value))
        .map(|p| p.value);

    Ok(SweepReport {
        stage: sweep.stage,
        unmasked_accuracy,
        adequate_fraction: sweep.adequate_fraction,
        points,
        recommended,
    })
}
