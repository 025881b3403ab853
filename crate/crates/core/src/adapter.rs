//! Per-batch test-time adaptation.
//!
//! [`Adapter::adapt_batch`] receives images only. For each batch it selects
//! (or allocates) a prompt through the frozen source model's queries,
//! pseudo-labels the batch with the pre-update model, builds the mixed
//! batch, takes exactly one SGD step on the selected prompt value and the
//! shallow encoder blocks, refreshes the prompt key, and predicts with the
//! updated model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Graph, Tensor};
use crate::encoder::{argmax, patchify, snapshot_source, EncoderParams, Image, Trainable};
use crate::error::{PaintError, Result};
use crate::objectives::{self, assign_pseudo_labels, build_mixed_batch};
use crate::prompt_memory::PromptMemory;

/// Hyperparameters of the adaptation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptationConfig {
    /// Reliability threshold below which a new prompt is allocated.
    pub eta: f64,
    /// Confidence threshold for pseudo-labels.
    pub phi: f64,
    /// Weight of the interpolation-consistency term.
    pub beta: f64,
    /// Key moving-average coefficient.
    pub gamma: f64,
    /// Beta-distribution parameter for mixup coefficients.
    pub alpha: f64,
    pub prompt_len: usize,
    pub shallow_blocks: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            eta: 0.2,
            phi: 0.6,
            beta: 1.0,
            gamma: 0.8,
            alpha: 1.0,
            prompt_len: 2,
            shallow_blocks: 3,
            lr: 0.05,
            batch_size: 50,
            seed: 0,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(PaintError::Config(m));
        if !(-1.0..=1.0).contains(&self.eta) {
            return fail(format!("eta {} outside [-1, 1]", self.eta));
        }
        if !(0.0..=1.0).contains(&self.phi) {
            return fail(format!("phi {} outside [0, 1]", self.phi));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return fail(format!("gamma {} outside [0, 1]", self.gamma));
        }
        if !(self.beta >= 0.0) {
            return fail(format!("beta {} must be non-negative", self.beta));
        }
        if !(self.alpha > 0.0) {
            return fail(format!("alpha {} must be positive", self.alpha));
        }
        if self.prompt_len == 0 || self.batch_size == 0 {
            return fail("prompt_len and batch_size must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail(format!(
                "lr {} must be a finite non-negative number",
                self.lr
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// `L_mi + β·L_ic`
    MutualInfoConsistency,
    /// `L_ent`
    EntropyOnly,
}

/// What an adaptation step is allowed to touch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdaptMode {
    pub adapt: bool,
    pub use_prompts: bool,
    pub tune_prompt: bool,
    pub tune_blocks: bool,
    pub objective: Objective,
}

impl AdaptMode {
    pub const PAINT: Self = Self {
        adapt: true,
        use_prompts: true,
        tune_prompt: true,
        tune_blocks: true,
        objective: Objective::MutualInfoConsistency,
    };
    pub const FROZEN: Self = Self {
        adapt: false,
        use_prompts: false,
        tune_prompt: false,
        tune_blocks: false,
        objective: Objective::MutualInfoConsistency,
    };
    pub const ENTROPY_ONLY: Self = Self {
        adapt: true,
        use_prompts: false,
        tune_prompt: false,
        tune_blocks: true,
        objective: Objective::EntropyOnly,
    };
    pub const NO_PROMPT_TUNING: Self = Self {
        tune_prompt: false,
        ..Self::PAINT
    };
    pub const NO_ENCODER_TUNING: Self = Self {
        tune_blocks: false,
        ..Self::PAINT
    };
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Losses {
    pub mutual_info: f64,
    pub consistency: f64,
    pub entropy: f64,
    /// The value that was minimized.
    pub total: f64,
}

/// Per-batch telemetry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub batch_index: usize,
    pub selected_entry: Option<usize>,
    pub was_new: bool,
    pub reliability: Option<f64>,
    pub losses: Losses,
    /// Post-update class predictions.
    pub predictions: Vec<usize>,
    pub prompt_count_after: usize,
    pub confident: usize,
    pub mixed: usize,
}

/// How the prompt for a batch is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// Query-based selection or allocation.
    Query,
    /// Externally chosen entry; `None` allocates a new one.
    Fixed(Option<usize>),
}

/// Plain SGD: `θ ← θ − lr·∇θ` on each `(name, value, grad)` triple.
/// Every gradient is checked before any tensor is touched.
pub fn sgd_step(items: &mut [(String, &mut Tensor, &Tensor)], lr: f64) -> Result<()> {
    for (name, value, grad) in items.iter() {
        if grad.shape() != value.shape() {
            return Err(PaintError::Dimension {
                expected: value.numel(),
                got: grad.numel(),
            });
        }
        if !grad.is_finite() {
            return Err(PaintError::NonFiniteGradient {
                tensor: name.clone(),
            });
        }
    }
    for (_, value, grad) in items.iter_mut() {
        for (v, g) in value.data_mut().iter_mut().zip(grad.data()) {
            *v -= lr * g;
        }
    }
    Ok(())
}

/// Adaptation state: live model, frozen source snapshot, prompt memory and
/// the seeded generator driving prompt initialization and mixup.
#[derive(Clone, Debug)]
pub struct Adapter {
    config: AdaptationConfig,
    mode: AdaptMode,
    live: EncoderParams,
    source: EncoderParams,
    memory: PromptMemory,
    rng: ChaCha8Rng,
    batches_seen: usize,
    sgd_steps: usize,
}

impl Adapter {
    pub fn new(source: &EncoderParams, config: AdaptationConfig, mode: AdaptMode) -> Result<Self> {
        config.validate()?;
        let mut live = source.clone();
        live.trainable_blocks = config.shallow_blocks.min(live.config.depth);
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            source: snapshot_source(source),
            live,
            memory: PromptMemory::new(),
            config,
            mode,
            batches_seen: 0,
            sgd_steps: 0,
        })
    }

    pub fn config(&self) -> &AdaptationConfig {
        &self.config
    }

    pub fn mode(&self) -> AdaptMode {
        self.mode
    }

    pub fn live(&self) -> &EncoderParams {
        &self.live
    }

    pub fn source(&self) -> &EncoderParams {
        &self.source
    }

    pub fn memory(&self) -> &PromptMemory {
        &self.memory
    }

    pub fn batches_seen(&self) -> usize {
        self.batches_seen
    }

    /// Number of gradient steps taken so far.
    pub fn sgd_steps(&self) -> usize {
        self.sgd_steps
    }

    pub fn adapt_batch(&mut self, images: &[Image]) -> Result<BatchOutcome> {
        self.adapt_batch_routed(images, Routing::Query)
    }

    pub fn adapt_batch_routed(
        &mut self,
        images: &[Image],
        routing: Routing,
    ) -> Result<BatchOutcome> {
        if images.is_empty() {
            return Err(PaintError::EmptyBatch);
        }
        let batch_index = self.batches_seen;
        let dim = self.live.config.dim;

        let (selected, was_new, reliability, queries) = if self.mode.use_prompts {
            let queries = self.source.queries(images)?;
            let (index, was_new, reliability) = match routing {
                Routing::Query => {
                    let s = self.memory.select_or_allocate(
                        &queries,
                        self.config.eta,
                        self.config.prompt_len,
                        dim,
                        &mut self.rng,
                        batch_index,
                    )?;
                    (s.index, s.was_new, s.reliability)
                }
                Routing::Fixed(Some(index)) => {
                    self.memory.get(index)?;
                    (index, false, None)
                }
                Routing::Fixed(None) => {
                    let index = self.memory.allocate(
                        &queries,
                        self.config.prompt_len,
                        dim,
                        &mut self.rng,
                        batch_index,
                    )?;
                    (index, true, None)
                }
            };
            (Some(index), was_new, reliability, Some(queries))
        } else {
            (None, false, None, None)
        };

        let mut losses = Losses::default();
        let mut confident = 0;
        let mut mixed = 0;
        if self.mode.adapt {
            let step = self.gradient_step(images, selected)?;
            losses = step.0;
            confident = step.1;
            mixed = step.2;
        }

        if let (Some(index), Some(queries)) = (selected, &queries) {
            if self.mode.adapt && !was_new {
                self.memory.update_key(index, queries, self.config.gamma)?;
            }
        }

        let predictions = self.predict(images, selected)?;
        self.batches_seen += 1;
        Ok(BatchOutcome {
            batch_index,
            selected_entry: selected,
            was_new,
            reliability,
            losses,
            predictions,
            prompt_count_after: self.memory.len(),
            confident,
            mixed,
        })
    }

    /// Builds the loss on pre-update parameters and applies one SGD step.
    /// Returns the losses, the pseudo-labelled count and the mixed count.
    fn gradient_step(
        &mut self,
        images: &[Image],
        selected: Option<usize>,
    ) -> Result<(Losses, usize, usize)> {
        let cfg = &self.live.config;
        let trainable = if self.mode.tune_blocks {
            Trainable::ShallowBlocks(self.live.trainable_blocks)
        } else {
            Trainable::Nothing
        };
        let mut g = Graph::new();
        let vars = self.live.bind(&mut g, trainable);
        let prompt = match selected {
            Some(index) => {
                Some(g.leaf(self.memory.get(index)?.value.clone(), self.mode.tune_prompt))
            }
            None => None,
        };

        let pixels = g.constant(patchify(images, cfg)?);
        let out = vars.forward_images(&mut g, pixels, images.len(), prompt)?;
        let pre_update = g.value(out.probs).clone();

        let mut losses = Losses {
            mutual_info: objectives::mutual_info_loss(&pre_update)?,
            entropy: objectives::entropy_only_loss(&pre_update)?,
            ..Losses::default()
        };

        let (loss, confident, mixed) = match self.mode.objective {
            Objective::EntropyOnly => {
                let l = objectives::graph::entropy_only(&mut g, out.probs)?;
                (l, 0, 0)
            }
            Objective::MutualInfoConsistency => {
                let labels = assign_pseudo_labels(&pre_update, self.config.phi);
                let batch = build_mixed_batch(
                    images,
                    &labels,
                    cfg.classes,
                    &mut self.rng,
                    self.config.alpha,
                )?;
                let l_mi = objectives::graph::mutual_info(&mut g, out.probs)?;
                let l_ic = if batch.is_empty() {
                    g.constant(Tensor::scalar(0.0))
                } else {
                    let mixed_px = g.constant(patchify(&batch.images, cfg)?);
                    let mixed_out = vars.forward_images(&mut g, mixed_px, batch.len(), prompt)?;
                    objectives::graph::interpolation_consistency(
                        &mut g,
                        mixed_out.probs,
                        &batch.soft_label_tensor()?,
                    )?
                };
                losses.consistency = g.value(l_ic).item();
                let total = objectives::graph::combined(&mut g, l_mi, l_ic, self.config.beta)?;
                (total, labels.len(), batch.len())
            }
        };
        losses.total = g.value(loss).item();

        let grads = g.backward(loss)?;
        let names: Vec<String> = self
            .live
            .named_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .collect();
        let all_vars = vars.all();
        let mut items: Vec<(String, &mut Tensor, &Tensor)> = Vec::new();
        for ((name, var), value) in names.into_iter().zip(all_vars).zip(self.live.tensors_mut()) {
            if let Some(grad) = grads.get(var) {
                items.push((name, value, grad));
            }
        }
        if let (Some(index), Some(pv)) = (selected, prompt) {
            if let Some(grad) = grads.get(pv) {
                items.push((
                    format!("prompt.{index}"),
                    self.memory.value_mut(index)?,
                    grad,
                ));
            }
        }
        sgd_step(&mut items, self.config.lr)?;
        self.sgd_steps += 1;
        Ok((losses, confident, mixed))
    }

    /// Argmax predictions of the current live model with the given entry's
    /// prompt; ties go to the lowest class index.
    pub fn predict(&self, images: &[Image], entry: Option<usize>) -> Result<Vec<usize>> {
        let prompt = match entry {
            Some(i) => Some(&self.memory.get(i)?.value),
            None => None,
        };
        let (_, probs) = self.live.infer(images, prompt)?;
        Ok((0..images.len()).map(|r| argmax(probs.row(r))).collect())
    }

    /// Read-only accuracy on labelled data. Prompt selection runs against a
    /// cloned memory and generator that are discarded afterwards.
    pub fn probe_accuracy(&self, images: &[Image], labels: &[usize]) -> Result<f64> {
        if images.is_empty() {
            return Err(PaintError::EmptyBatch);
        }
        let mut memory = self.memory.clone();
        let mut rng = self.rng.clone();
        let mut correct = 0;
        for (chunk_index, (imgs, labs)) in images
            .chunks(self.config.batch_size)
            .zip(labels.chunks(self.config.batch_size))
            .enumerate()
        {
            let prompt = if self.mode.use_prompts {
                let queries = self.source.queries(imgs)?;
                let s = memory.select_or_allocate(
                    &queries,
                    self.config.eta,
                    self.config.prompt_len,
                    self.live.config.dim,
                    &mut rng,
                    self.batches_seen + chunk_index,
                )?;
                Some(memory.get(s.index)?.value.clone())
            } else {
                None
            };
            let (_, probs) = self.live.infer(imgs, prompt.as_ref())?;
            correct += (0..imgs.len())
                .filter(|&r| argmax(probs.row(r)) == labs[r])
                .count();
        }
        Ok(correct as f64 / images.len() as f64)
    }
}
