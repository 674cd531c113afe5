use serde::{Deserialize, Serialize};

use crate::corpus::TaskKind;
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::model::{ModelSpec, VariantChoice};
use crate::templating::{TemplateVariant, DEFAULT_MAX_LEN};
use crate::transformer::ModelConfig;

/// Every knob of a training or evaluation run. Missing JSON fields take
/// their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub variant: TemplateVariant,
    pub head: HeadKind,
    /// `vocab_size` is filled in from the vocabulary at build time.
    pub model: ModelConfig,
    /// Weight of the next-token loss in `L_task + λ L_lm`.
    pub lm_lambda: f64,
    pub learning_rate: f64,
    /// Processes per optimizer step.
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global L2 norm cap on each step's gradient; 0 disables clipping.
    pub grad_clip: f64,
    /// Stop after this many epochs without dev improvement.
    pub patience: Option<usize>,
    /// Sequence-length cap of the templater.
    pub max_len: usize,
    /// Minimum token frequency for the vocabulary.
    pub min_count: usize,
    /// Worker threads for gradient computation; `None` uses all cores.
    pub threads: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Recipes,
            variant: TemplateVariant::DocFirst,
            head: HeadKind::Conditioned,
            model: ModelConfig::default(),
            lm_lambda: 0.5,
            learning_rate: 3e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            grad_clip: 1.0,
            patience: None,
            max_len: DEFAULT_MAX_LEN,
            min_count: 1,
            threads: None,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(self.variant, self.head, self.task)
    }

    pub fn set_variant(&mut self, choice: VariantChoice) {
        let (variant, head) = choice.template_and_head();
        self.variant = variant;
        self.head = head;
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lm_lambda.is_finite() && self.lm_lambda >= 0.0) {
            return Err(Error::Validation(format!(
                "lm_lambda must be >= 0, got {}",
                self.lm_lambda
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Validation("epochs must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return Err(Error::Validation(format!(
                "grad_clip must be >= 0, got {}",
                self.grad_clip
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Validation("max_len must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Validation("threads must be >= 1".into()));
        }
        self.spec()?;
        Ok(())
    }

    /// The architecture for a vocabulary of `vocab_size` entries.
    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            vocab_size,
            ..self.model.clone()
        };
        cfg.validate()?;
        if cfg.max_positions < self.max_len {
            return Err(Error::Validation(format!(
                "max_len {} exceeds the encoder's {} positions",
                self.max_len, cfg.max_positions
            )));
        }
        Ok(cfg)
    }
}
