//! The full evaluation matrix: every mask variant against every task
//! split, plus the behavior grid and per-layer sharing between stage
//! masks.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::TaskKind;
use crate::data::{ArithOp, Filter, SampleMeta};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::metrics::{
    behavior_tie, classify_behavior, hybrid_mask, per_layer_sharing, Behavior, SharingReport,
};
use crate::objective::{decode_two_digit, predict_detailed, MaskMode};
use crate::pipeline::Session;
use crate::rng::SeedPool;

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct MatrixCell {
    pub variant: String,
    pub split: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct BehaviorCell {
    pub variant: String,
    pub commanded: String,
    pub add: f64,
    pub mul: f64,
    pub none: f64,
    /// Samples where addition and multiplication coincide (resolved to the
    /// commanded operation).
    pub ties: usize,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct CensusRow {
    pub stage: String,
    pub layer: usize,
    pub kept: usize,
    pub total: usize,
}

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
pub struct MatrixReport {
    pub seed: u64,
    pub cells: Vec<MatrixCell>,
    pub behavior: Vec<BehaviorCell>,
    pub census: Vec<CensusRow>,
    pub sharing: Vec<SharingReport>,
}

impl MatrixReport {
    pub fn accuracy(&self, variant: &str, split: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.variant == variant && c.split == split)
            .map(|c| c.accuracy)
    }

    /// Flat metric map for assertion rules and checkpoint metadata.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for c in &self.cells {
            out.insert(format!("accuracy/{}/{}", c.variant, c.split), c.accuracy);
        }
        for s in &self.sharing {
            out.insert(format!("sharing/{}/total", s.name), s.totals.shared_fraction);
            for (layer, stats) in &s.per_layer {
                out.insert(
                    format!("sharing/{}/layer{layer}", s.name),
                    stats.shared_fraction,
                );
            }
        }
        for row in &self.census {
            out.insert(
                format!("census/{}/layer{}", row.stage, row.layer),
                row.kept as f64 / row.total.max(1) as f64,
            );
        }
        out
    }
}

/// Evaluates `none`, every stage mask, its inversion, and the hybrid
/// variant (inverted hidden layers, full-task I/O layers when a `full`
/// stage exists) on every task split. Every (variant, split) pair is
/// present in the result; a missing cell is a bug, not a blank.
pub fn evaluate_matrix<E: Element>(
    session: &Session<E>,
    ckpt: &Checkpoint<E>,
) -> Result<MatrixReport> {
    let pool = SeedPool::new(ckpt.seed);
    let splits = session.eval_splits();

    // Assemble variants.
    let mut variants: Vec<(String, Option<BinaryMask>)> = vec![("none".into(), None)];
    let full_bits = ckpt.stage("full").map(|s| s.bits.clone());
    for stage in &ckpt.stages {
        let name = stage.mask.stage.clone();
        let bits = stage.bits.clone();
        let inverted = bits.invert();
        // partition check: kept(M) + kept(!M) covers every maskable weight
        if bits.kept() + inverted.kept() != bits.total() {
            return Err(Error::Pipeline(format!(
                "mask {name:?} and its inversion do not partition the weights"
            )));
        }
        variants.push((name.clone(), Some(bits.clone())));
        variants.push((format!("not-{name}"), Some(inverted)));
        if let Some(full) = &full_bits {
            if name != "full" {
                variants.push((format!("hybrid-not-{name}"), Some(hybrid_mask(&bits, full)?)));
            }
        }
    }

    // Accuracy grid.
    let mut cells = Vec::new();
    for split in &splits {
        let eval = session.eval_set(&pool, split, None, session.config.eval.samples)?;
        for (vname, bits) in &variants {
            let mode = match bits {
                Some(b) => MaskMode::Binary(b),
                None => MaskMode::None,
            };
            let accuracy = session.objective.accuracy(&ckpt.params, mode, &eval)?;
            cells.push(MatrixCell {
                variant: vname.clone(),
                split: split.to_string(),
                accuracy,
            });
        }
    }
    if cells.len() != variants.len() * splits.len() {
        return Err(Error::Pipeline("evaluation grid has missing cells".into()));
    }

    // Behavior grid for the add/mul task: what operation does the masked
    // network actually perform on each commanded split?
    let mut behavior = Vec::new();
    if session.config.task == TaskKind::Addmul {
        for op in [ArithOp::Add, ArithOp::Mul] {
            let split = Filter::Op(op);
            let eval = session.eval_set(&pool, &split, None, session.config.eval.samples)?;
            for (vname, bits) in &variants {
                if vname.starts_with("hybrid") {
                    continue;
                }
                let mode = match bits {
                    Some(b) => MaskMode::Binary(b),
                    None => MaskMode::None,
                };
                let detail = predict_detailed(&session.objective, &ckpt.params, mode, &eval)?;
                let mut counts = BTreeMap::from([(Behavior::Add, 0), (Behavior::Mul, 0), (Behavior::None, 0)]);
                let mut ties = 0;
                for (i, meta) in detail.meta.iter().enumerate() {
                    let SampleMeta::AddMul { a, b, op } = meta else {
                        continue;
                    };
                    let prediction = decode_two_digit(detail.groups[0][i], detail.groups[1][i]);
                    if behavior_tie(*a as usize, *b as usize) {
                        ties += 1;
                    }
                    *counts
                        .entry(classify_behavior(*a as usize, *b as usize, *op, prediction))
                        .or_insert(0) += 1;
                }
                let n = detail.meta.len().max(1) as f64;
                behavior.push(BehaviorCell {
                    variant: vname.clone(),
                    commanded: op.label().to_string(),
                    add: counts[&Behavior::Add] as f64 / n,
                    mul: counts[&Behavior::Mul] as f64 / n,
                    none: counts[&Behavior::None] as f64 / n,
                    ties,
                });
            }
        }
    }

    // Census per stage and layer.
    let mut census = Vec::new();
    for stage in &ckpt.stages {
        let mut layers: Vec<(usize, (usize, usize))> =
            stage.bits.layer_census().into_iter().collect();
        layers.sort_by_key(|(layer, _)| *layer);
        for (layer, (kept, total)) in layers {
            census.push(CensusRow {
                stage: stage.mask.stage.clone(),
                layer,
                kept,
                total,
            });
        }
    }

    // Pairwise sharing between stage masks (excluding trivial self-pairs).
    let mut sharing = Vec::new();
    for i in 0..ckpt.stages.len() {
        for j in i + 1..ckpt.stages.len() {
            let (a, b) = (&ckpt.stages[i], &ckpt.stages[j]);
            sharing.push(per_layer_sharing(
                &a.bits,
                &b.bits,
                &format!("{}-vs-{}", a.mask.stage, b.mask.stage),
            )?);
        }
    }

    Ok(MatrixReport {
        seed: ckpt.seed,
        cells,
        behavior,
        census,
        sharing,
    })
}
