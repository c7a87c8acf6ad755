//! Experiment configuration: one TOML file per experiment.
//!
//! The defaults bake in the common hyperparameters (batch 128, weight lr
//! 1e-3, mask lr 1e-2, clipping at 1, four mask samples per batch,
//! temperature 1, keep probability 0.9). The regularizer strength is given
//! either directly as `alpha` or batch-scaled as `beta = batch * alpha`;
//! setting both is an error.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Filter;
use crate::element::Precision;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Addmul,
    DoubleAdd,
    PermutedMnist,
    MnistLeaveOneOut,
}

impl TaskKind {
    pub fn label(self) -> &'static str {
        match self {
            TaskKind::Addmul => "addmul",
            TaskKind::DoubleAdd => "double-add",
            TaskKind::PermutedMnist => "permuted-mnist",
            TaskKind::MnistLeaveOneOut => "mnist-leave-one-out",
        }
    }

    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::Addmul => 42,
            TaskKind::DoubleAdd => 80,
            TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut => 784,
        }
    }

    pub fn output_dim(self) -> usize {
        match self {
            TaskKind::Addmul => 20,
            TaskKind::DoubleAdd => 40,
            TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut => 10,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ModelConfig {
    Ffn {
        layers: Vec<usize>,
    },
    Lstm {
        input: usize,
        hidden: usize,
        output: usize,
        #[serde(default = "default_steps_per_segment")]
        steps_per_segment: usize,
        /// Double-add only: present one pair per segment instead of both
        /// pairs together.
        #[serde(default)]
        forced: bool,
    },
}

fn default_steps_per_segment() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(default = "default_weight_lr")]
    pub weight_lr: f64,
    #[serde(default = "default_mask_lr")]
    pub mask_lr: f64,
    #[serde(default = "default_clip_norm")]
    pub clip_norm: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

fn default_weight_lr() -> f64 {
    1e-3
}
fn default_mask_lr() -> f64 {
    1e-2
}
fn default_clip_norm() -> f64 {
    1.0
}
fn default_batch_size() -> usize {
    128
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            weight_lr: default_weight_lr(),
            mask_lr: default_mask_lr(),
            clip_norm: default_clip_norm(),
            batch_size: default_batch_size(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskConfig {
    /// Regularizer strength per logit.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Batch-scaled regularizer: the effective alpha is `beta / batch`.
    #[serde(default)]
    pub beta: Option<f64>,
    #[serde(default = "default_samples_per_batch")]
    pub samples_per_batch: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_keep_prob")]
    pub keep_prob: f64,
    /// Parameter names never masked.
    #[serde(default)]
    pub exclude: Vec<String>,
}

fn default_samples_per_batch() -> usize {
    4
}
fn default_temperature() -> f64 {
    1.0
}
fn default_keep_prob() -> f64 {
    0.9
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            alpha: None,
            beta: None,
            samples_per_batch: default_samples_per_batch(),
            temperature: default_temperature(),
            keep_prob: default_keep_prob(),
            exclude: Vec::new(),
        }
    }
}

impl MaskConfig {
    /// Effective per-logit alpha given the mask-training batch size.
    pub fn effective_alpha(&self, batch_size: usize) -> Result<f64> {
        match (self.alpha, self.beta) {
            (Some(a), None) => Ok(a),
            (None, Some(b)) => Ok(b / batch_size as f64),
            (None, None) => Ok(0.0),
            (Some(_), Some(_)) => Err(Error::Config(
                "alpha and beta are both set; they are exclusive".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyExit {
    #[serde(default = "default_check_every")]
    pub check_every: usize,
    pub target_accuracy: f64,
    #[serde(default = "default_probe_samples")]
    pub probe_samples: usize,
    #[serde(default)]
    pub min_steps: usize,
    /// For mask stages: also require the kept fraction to have moved less
    /// than this between consecutive probes before stopping.
    #[serde(default = "default_kept_tolerance")]
    pub kept_tolerance: f64,
}

fn default_check_every() -> usize {
    250
}
fn default_probe_samples() -> usize {
    2048
}
fn default_kept_tolerance() -> f64 {
    0.005
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_train_steps")]
    pub steps: usize,
    #[serde(default)]
    pub early_exit: Option<EarlyExit>,
}

fn default_train_steps() -> usize {
    20_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_eval_samples() -> usize {
    10_000
}
fn default_eval_batch() -> usize {
    256
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            samples: default_eval_samples(),
            batch_size: default_eval_batch(),
        }
    }
}

/// One mask-training stage: a name, a data restriction, and a step budget.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub name: String,
    #[serde(default = "default_filter")]
    pub filter: String,
    #[serde(default = "default_stage_steps")]
    pub steps: usize,
    #[serde(default)]
    pub early_exit: Option<EarlyExit>,
    /// Pin the bits of `fixed_mask_layers` to the thresholded mask of this
    /// earlier stage (leave-one-class-out keeps the output layer of the
    /// full-data mask).
    #[serde(default)]
    pub fixed_mask_from: Option<String>,
    #[serde(default)]
    pub fixed_mask_layers: Vec<usize>,
}

fn default_filter() -> String {
    "all".into()
}
fn default_stage_steps() -> usize {
    20_000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    #[serde(default = "default_transfer_tasks")]
    pub tasks: usize,
    #[serde(default = "default_transfer_steps")]
    pub steps_per_task: usize,
    #[serde(default = "default_transfer_samples")]
    pub samples_per_batch: usize,
    #[serde(default)]
    pub early_exit: Option<EarlyExit>,
    /// Bias each new task's mask toward reusing previously occupied
    /// weights.
    #[serde(default)]
    pub biased: bool,
    #[serde(default = "default_p_old")]
    pub p_old: f64,
    #[serde(default = "default_p_new")]
    pub p_new: f64,
}

fn default_transfer_tasks() -> usize {
    5
}
fn default_transfer_steps() -> usize {
    30_000
}
fn default_transfer_samples() -> usize {
    8
}
fn default_p_old() -> f64 {
    0.88
}
fn default_p_new() -> f64 {
    0.27
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Use the generated stand-in dataset instead of files on disk.
    #[serde(default = "default_synthetic")]
    pub synthetic: bool,
    #[serde(default = "default_train_samples")]
    pub train_samples: usize,
    #[serde(default = "default_test_samples")]
    pub test_samples: usize,
    /// Directory holding the standard IDX files (train-images-idx3-ubyte,
    /// train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
    /// t10k-labels-idx1-ubyte).
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Optional integrity digests, verified before loading.
    #[serde(default)]
    pub sha256: std::collections::BTreeMap<String, String>,
}

fn default_synthetic() -> bool {
    true
}
fn default_train_samples() -> usize {
    60_000
}
fn default_test_samples() -> usize {
    10_000
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            synthetic: true,
            train_samples: default_train_samples(),
            test_samples: default_test_samples(),
            dir: None,
            sha256: Default::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    /// Regularizer values to sweep, same semantics as `mask.beta`
    /// (`mask.alpha` when `as_alpha` is set).
    pub values: Vec<f64>,
    #[serde(default)]
    pub as_alpha: bool,
    /// Stage whose filter/steps each sweep point reuses.
    #[serde(default = "default_sweep_stage")]
    pub stage: String,
    /// Accuracy floor (fraction of the unmasked accuracy) for the
    /// recommended value.
    #[serde(default = "default_adequate_fraction")]
    pub adequate_fraction: f64,
    /// Optionally also train this pair of stages per value and report the
    /// sharing between their masks.
    #[serde(default)]
    pub sharing_stages: Vec<String>,
}

fn default_sweep_stage() -> String {
    "full".into()
}
fn default_adequate_fraction() -> f64 {
    0.95
}

/// A numeric bound on a reported metric, enforced under `--assert`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssertRule {
    pub metric: String,
    #[serde(default)]
    pub min: Option<f64>,
    #[serde(default)]
    pub max: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskKind,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_precision_bits")]
    pub precision: u8,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub mask: MaskConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default, rename = "stage")]
    pub stages: Vec<StageConfig>,
    #[serde(default)]
    pub transfer: Option<TransferConfig>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
    #[serde(default, rename = "assert")]
    pub assertions: Vec<AssertRule>,
}

fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_precision_bits() -> u8 {
    32
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn precision(&self) -> Precision {
        Precision::from_bits(self.precision).expect("validated")
    }

    /// Digest of the canonical serialized form; stored in checkpoints so a
    /// checkpoint is never resumed under a different configuration.
    pub fn digest(&self) -> [u8; 32] {
        let text = toml::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());
        hasher.finalize().into()
    }

    pub fn stage(&self, name: &str) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        if Precision::from_bits(self.precision).is_none() {
            return Err(Error::Config(format!(
                "precision must be 32 or 64, got {}",
                self.precision
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.mask.alpha.is_some() && self.mask.beta.is_some() {
            return Err(Error::Config("alpha and beta are both set; they are exclusive".into()));
        }
        if !(self.mask.keep_prob > 0.0 && self.mask.keep_prob < 1.0) {
            return Err(Error::Config(format!(
                "keep_prob must lie in (0,1), got {}",
                self.mask.keep_prob
            )));
        }
        if self.mask.temperature <= 0.0 {
            return Err(Error::Config("temperature must be positive".into()));
        }
        if self.mask.samples_per_batch == 0
            || self.mask.samples_per_batch > self.optimizer.batch_size
        {
            return Err(Error::Config(format!(
                "samples_per_batch must be in 1..=batch_size ({})",
                self.optimizer.batch_size
            )));
        }
        if self.optimizer.clip_norm <= 0.0 {
            return Err(Error::Config("clip_norm must be positive".into()));
        }

        // stage names unique, filters parseable, fixed-mask references known
        let mut names = std::collections::HashSet::new();
        for stage in &self.stages {
            if stage.name.is_empty() {
                return Err(Error::Config("stage with empty name".into()));
            }
            if !names.insert(stage.name.as_str()) {
                return Err(Error::Config(format!("duplicate stage name {:?}", stage.name)));
            }
            let filter = Filter::parse(&stage.filter)?;
            self.check_filter_fits_task(&filter)?;
            if let Some(source) = &stage.fixed_mask_from {
                if !self.stages.iter().any(|s| &s.name == source) {
                    return Err(Error::Config(format!(
                        "stage {:?} pins its mask to unknown stage {:?}",
                        stage.name, source
                    )));
                }
                if stage.fixed_mask_layers.is_empty() {
                    return Err(Error::Config(format!(
                        "stage {:?} sets fixed_mask_from without fixed_mask_layers",
                        stage.name
                    )));
                }
            }
        }

        // model fits the task
        let (input, output) = (self.task.input_dim(), self.task.output_dim());
        match &self.model {
            ModelConfig::Ffn { layers } => {
                if layers.len() < 2 || layers.iter().any(|&s| s == 0) {
                    return Err(Error::Config(format!("bad layer list {layers:?}")));
                }
                if layers[0] != input || *layers.last().unwrap() != output {
                    return Err(Error::Config(format!(
                        "model {}->{} does not fit task {} ({}->{})",
                        layers[0],
                        layers.last().unwrap(),
                        self.task.label(),
                        input,
                        output
                    )));
                }
            }
            ModelConfig::Lstm {
                input: i,
                hidden,
                output: o,
                steps_per_segment,
                forced,
            } => {
                if *i != input || *o != output {
                    return Err(Error::Config(format!(
                        "lstm {i}->{o} does not fit task {} ({input}->{output})",
                        self.task.label()
                    )));
                }
                if *hidden == 0 || *steps_per_segment == 0 {
                    return Err(Error::Config("lstm hidden and steps must be positive".into()));
                }
                if *forced && self.task != TaskKind::DoubleAdd {
                    return Err(Error::Config(
                        "the forced schedule only applies to the double-add task".into(),
                    ));
                }
                if matches!(self.task, TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut) {
                    return Err(Error::Config("image tasks use the ffn model".into()));
                }
            }
        }

        if self.transfer.is_some() && self.task != TaskKind::PermutedMnist {
            return Err(Error::Config(
                "[transfer] only applies to the permuted-mnist task".into(),
            ));
        }
        if let Some(t) = &self.transfer {
            if t.tasks < 1 {
                return Err(Error::Config("transfer needs at least one task".into()));
            }
            if !(t.p_new > 0.0 && t.p_new <= t.p_old && t.p_old < 1.0) {
                return Err(Error::Config(format!(
                    "need 0 < p_new <= p_old < 1, got p_old={} p_new={}",
                    t.p_old, t.p_new
                )));
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.values.len() < 3 {
                return Err(Error::Config("a sweep needs at least three values".into()));
            }
            let (lo, hi) = sweep
                .values
                .iter()
                .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            if lo <= 0.0 || hi / lo < 100.0 {
                return Err(Error::Config(
                    "sweep values must be positive and span at least two orders of magnitude"
                        .into(),
                ));
            }
            if self.stage(&sweep.stage).is_none() {
                return Err(Error::Config(format!("sweep references unknown stage {:?}", sweep.stage)));
            }
            for name in &sweep.sharing_stages {
                if self.stage(name).is_none() {
                    return Err(Error::Config(format!("sweep references unknown stage {name:?}")));
                }
            }
        }
        for rule in &self.assertions {
            if rule.min.is_none() && rule.max.is_none() {
                return Err(Error::Config(format!(
                    "assert rule for {:?} has neither min nor max",
                    rule.metric
                )));
            }
        }
        Ok(())
    }

    fn check_filter_fits_task(&self, filter: &Filter) -> Result<()> {
        let ok = match filter {
            Filter::All => true,
            Filter::Op(_) => self.task == TaskKind::Addmul,
            Filter::Pair(_) => self.task == TaskKind::DoubleAdd,
            Filter::ExcludeClass(_) | Filter::OnlyClass(_) => matches!(
                self.task,
                TaskKind::PermutedMnist | TaskKind::MnistLeaveOneOut
            ),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "filter {filter} does not apply to task {}",
                self.task.label()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        task = "addmul"
        [model]
        kind = "ffn"
        layers = [42, 400, 400, 200, 20]
    "#;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let c = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(c.optimizer.weight_lr, 1e-3);
        assert_eq!(c.optimizer.mask_lr, 1e-2);
        assert_eq!(c.optimizer.clip_norm, 1.0);
        assert_eq!(c.optimizer.batch_size, 128);
        assert_eq!(c.mask.samples_per_batch, 4);
        assert_eq!(c.mask.temperature, 1.0);
        assert_eq!(c.mask.keep_prob, 0.9);
        assert_eq!(c.precision, 32);
    }

    #[test]
    fn alpha_beta_exclusivity() {
        let text = format!("{MINIMAL}\n[mask]\nalpha = 1e-5\nbeta = 1e-4\n");
        // deny at the struct level too, but certainly at validate()
        assert!(ExperimentConfig::from_toml_str(&text).is_err());

        let beta_only = format!("{MINIMAL}\n[mask]\nbeta = 1.28e-4\n");
        let c = ExperimentConfig::from_toml_str(&beta_only).unwrap();
        assert!((c.mask.effective_alpha(128).unwrap() - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn duplicate_stage_names_rejected() {
        let text = format!(
            "{MINIMAL}\n[[stage]]\nname = \"full\"\n[[stage]]\nname = \"full\"\n"
        );
        let err = ExperimentConfig::from_toml_str(&text).unwrap_err();
        assert!(err.to_string().contains("duplicate stage name"), "{err}");
    }

    #[test]
    fn filter_must_fit_task() {
        let text = format!("{MINIMAL}\n[[stage]]\nname = \"p\"\nfilter = \"pair=1\"\n");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn model_must_fit_task_dimensions() {
        let text = r#"
            task = "addmul"
            [model]
            kind = "ffn"
            layers = [42, 64, 10]
        "#;
        assert!(ExperimentConfig::from_toml_str(text).is_err());
    }

    #[test]
    fn digest_is_stable_and_sensitive() {
        let a = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        let b = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(a.digest(), b.digest());
        // top-level keys come before the [model] table in TOML
        let c = ExperimentConfig::from_toml_str(&format!("seeds = [7]\n{MINIMAL}")).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn sweep_needs_range() {
        let narrow = format!(
            "{MINIMAL}\n[[stage]]\nname = \"full\"\n[sweep]\nvalues = [1e-4, 2e-4, 3e-4]\n"
        );
        assert!(ExperimentConfig::from_toml_str(&narrow).is_err());
        let wide = format!(
            "{MINIMAL}\n[[stage]]\nname = \"full\"\n[sweep]\nvalues = [1e-5, 1e-4, 1e-3]\n"
        );
        assert!(ExperimentConfig::from_toml_str(&wide).is_ok());
    }

    #[test]
    fn fixed_mask_reference_must_exist() {
        let text = format!(
            "{MINIMAL}\n[[stage]]\nname = \"x\"\nfixed_mask_from = \"full\"\nfixed_mask_layers = [3]\n"
        );
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = format!("bogus_key = 1\n{MINIMAL}");
        assert!(ExperimentConfig::from_toml_str(&text).is_err());
        let in_table = format!("{MINIMAL}\n[optimizer]\nbogus_key = 1\n");
        assert!(ExperimentConfig::from_toml_str(&in_table).is_err());
    }
}
