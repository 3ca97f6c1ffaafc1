//! Epoch loop: mini-batch AdamW on the chosen objective with the prompt
//! prototypes fixed, and every `M` epochs a prompt re-selection on the last
//! batch of the epoch with the model fixed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{DeterminedDataset, FullDataset};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport, ScoreMatrix};
use crate::model::ModelParams;
use crate::objective::{Example, LossMode, Objective};
use crate::prompt::{
    build_similarity_index, select_optimal_prompt, EmbeddingProvider, PromptContext, PromptState,
    PromptTemplate, SimilarLabelIndex,
};
use crate::risk::{RiskConfig, Weighting, DEFAULT_EPSILON};
use crate::rng;

/// Lower bound kept on the temperature after each step.
pub const MIN_TEMPERATURE: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            learning_rate: 1e-2,
            weight_decay: 5e-2,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamW {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && self.weight_decay >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && [self.learning_rate, self.weight_decay, self.epsilon]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "invalid optimizer settings {self:?}"
            )))
        }
    }
}

/// First and second moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

/// One decoupled-weight-decay Adam update of `theta` in place; `step` counts
/// from 1.
pub fn adamw_step(
    theta: &mut [f64],
    grads: &[f64],
    moments: &mut Moments,
    hyper: &AdamW,
    step: u64,
) -> Result<()> {
    let n = theta.len();
    for (what, len) in [
        ("gradient", grads.len()),
        ("first moment", moments.first.len()),
        ("second moment", moments.second.len()),
    ] {
        if len != n {
            return Err(Error::LengthMismatch {
                what,
                expected: n,
                found: len,
            });
        }
    }
    if step == 0 {
        return Err(Error::InvalidConfig("optimizer steps count from 1".into()));
    }
    let exponent = i32::try_from(step).unwrap_or(i32::MAX);
    let correction1 = 1.0 - hyper.beta1.powi(exponent);
    let correction2 = 1.0 - hyper.beta2.powi(exponent);
    for i in 0..n {
        let g = grads[i];
        let m = hyper.beta1 * moments.first[i] + (1.0 - hyper.beta1) * g;
        let v = hyper.beta2 * moments.second[i] + (1.0 - hyper.beta2) * g * g;
        moments.first[i] = m;
        moments.second[i] = v;
        let m_hat = m / correction1;
        let v_hat = v / correction2;
        theta[i] -= hyper.learning_rate
            * (m_hat / (v_hat.sqrt() + hyper.epsilon) + hyper.weight_decay * theta[i]);
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub prompt_update_period: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub seed: u64,
    pub sigma: usize,
    pub loss_mode: LossMode,
    pub weighting: Weighting,
    pub epsilon: f64,
    pub stop_gradient_on_soft_labels: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamW::default();
        Self {
            epochs: 10,
            prompt_update_period: 5,
            batch_size: 128,
            learning_rate: adam.learning_rate,
            weight_decay: adam.weight_decay,
            adam_beta1: adam.beta1,
            adam_beta2: adam.beta2,
            adam_epsilon: adam.epsilon,
            seed: 0,
            sigma: 3,
            loss_mode: LossMode::Rc,
            weighting: Weighting::Corrected,
            epsilon: DEFAULT_EPSILON,
            stop_gradient_on_soft_labels: true,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.prompt_update_period == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs, prompt update period and batch size must be at least 1".into(),
            ));
        }
        if self.weighting == Weighting::Oracle {
            return Err(Error::InvalidConfig(
                "oracle weighting needs true conditionals and is not available for training".into(),
            ));
        }
        self.optimizer().validate()
    }

    pub fn objective(&self, k: usize) -> Result<Objective> {
        let risk = RiskConfig::new(k)?
            .with_epsilon(self.epsilon)?
            .with_weighting(self.weighting)
            .with_stop_gradient(self.stop_gradient_on_soft_labels);
        Ok(Objective::new(self.loss_mode, risk))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptUpdate {
    pub loss_before: f64,
    pub loss_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean of the per-batch objective, weighted by batch size, evaluated
    /// before each step.
    pub loss: f64,
    pub metrics: Option<MetricsReport>,
    pub lambdas: Vec<usize>,
    pub prompt_update: Option<PromptUpdate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Held-out metrics of the freshly initialised model.
    pub initial_metrics: Option<MetricsReport>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    /// One JSON object per epoch record.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for record in &self.epochs {
            out.push_str(&serde_json::to_string(record).expect("history serializes"));
            out.push('\n');
        }
        out
    }

    /// `epoch,loss,map,one_error,ranking_loss,coverage,lambdas` rows; row 0
    /// holds the initial metrics and no loss.
    pub fn to_csv(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            v.map(|x| x.to_string()).unwrap_or_default()
        }
        fn metric_cells(m: Option<&MetricsReport>) -> String {
            let pick = |f: fn(&MetricsReport) -> Option<f64>| cell(m.and_then(f));
            [
                pick(|r| r.map),
                pick(|r| r.one_error),
                pick(|r| r.ranking_loss),
                pick(|r| r.coverage),
            ]
            .join(",")
        }
        let mut out = String::from("epoch,loss,map,one_error,ranking_loss,coverage,lambdas\n");
        out.push_str(&format!(
            "0,,{},\n",
            metric_cells(self.initial_metrics.as_ref())
        ));
        for r in &self.epochs {
            let lambdas: Vec<String> = r.lambdas.iter().map(usize::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                r.loss,
                metric_cells(r.metrics.as_ref()),
                lambdas.join(" ")
            ));
        }
        out
    }

    pub fn final_map(&self) -> Option<f64> {
        self.epochs.last()?.metrics.as_ref()?.map
    }

    pub fn initial_map(&self) -> Option<f64> {
        self.initial_metrics.as_ref()?.map
    }
}

/// Label vocabularies and the text side of the model.
pub struct PromptSetup<'a> {
    /// Large vocabulary searched for similar labels.
    pub vocabulary: &'a [String],
    pub provider: &'a dyn EmbeddingProvider,
    pub template: &'a PromptTemplate,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub prompt: PromptState,
    pub index: SimilarLabelIndex,
    pub history: TrainHistory,
}

fn evaluate_on(params: &ModelParams, data: Option<&FullDataset>) -> Result<Option<MetricsReport>> {
    let Some(data) = data else {
        return Ok(None);
    };
    let scores = params.score_all(data.instances().iter().map(|x| x.features.as_slice()))?;
    metrics::evaluate(&ScoreMatrix::from_dataset(data, scores)?).map(Some)
}

/// Permutation of `0..n` for `epoch`, a pure function of `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, rng::STREAM_SHUFFLE + epoch as u64));
    order
}

pub fn train(
    data: &DeterminedDataset,
    heldout: Option<&FullDataset>,
    setup: &PromptSetup<'_>,
    config: &TrainConfig,
) -> Result<TrainOutput> {
    config.validate()?;
    let k = data.k();
    let d = data.feature_dim().ok_or(Error::EmptyDataset)?;
    if let Some(h) = heldout {
        if h.k() != k {
            return Err(Error::DimensionMismatch {
                what: "class count",
                left: "training k",
                left_value: k,
                right: "held-out k",
                right_value: h.k(),
            });
        }
        if let Some(hd) = h.feature_dim() {
            if hd != d {
                return Err(Error::DimensionMismatch {
                    what: "feature dimension",
                    left: "training d",
                    left_value: d,
                    right: "held-out d",
                    right_value: hd,
                });
            }
        }
    }
    let objective = config.objective(k)?;
    let hyper = config.optimizer();
    let targets = data.vocabulary();
    let index = build_similarity_index(
        setup.provider,
        setup.template,
        targets,
        setup.vocabulary,
        config.sigma,
    )?;
    let context = PromptContext {
        provider: setup.provider,
        template: setup.template,
        targets,
        index: &index,
    };
    let mut prompt = PromptState::initial(setup.provider, setup.template, targets, &index)?;
    let mut params = ModelParams::init(config.seed, d, setup.provider.dim(), k)?;
    params.set_prototypes(prompt.prototypes.clone())?;

    let initial_metrics = evaluate_on(&params, heldout)?;
    let examples: Vec<Example<'_>> = data.instances().iter().map(Example::from).collect();
    let mut theta = params.trainable();
    let mut moments = Moments::zeros(theta.len());
    let mut step = 0u64;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let order = epoch_order(config.seed, epoch, examples.len());
        let mut weighted_loss = 0.0;
        let mut last_batch = Vec::new();
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| examples[i]).collect();
            let (loss, grads) = params
                .objective_loss_and_gradient(&batch, &objective)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Divergence {
                        epoch,
                        batch: b,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            step += 1;
            adamw_step(&mut theta, &grads.to_vec(), &mut moments, &hyper, step)?;
            let last = theta.len() - 1;
            theta[last] = theta[last].max(MIN_TEMPERATURE);
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b,
                    loss,
                });
            }
            params.set_trainable(&theta)?;
            weighted_loss += loss * batch.len() as f64;
            last_batch = batch;
        }

        let prompt_update = if epoch % config.prompt_update_period == 0 {
            let loss_before = params.objective_loss(&last_batch, &objective)?;
            prompt = select_optimal_prompt(
                &params,
                &last_batch,
                &context,
                config.sigma,
                &objective,
                &prompt,
            )?;
            params.set_prototypes(prompt.prototypes.clone())?;
            let loss_after = params.objective_loss(&last_batch, &objective)?;
            Some(PromptUpdate {
                loss_before,
                loss_after,
            })
        } else {
            None
        };

        epochs.push(EpochRecord {
            epoch,
            loss: weighted_loss / examples.len() as f64,
            metrics: evaluate_on(&params, heldout)?,
            lambdas: prompt.lambdas.clone(),
            prompt_update,
        });
    }

    Ok(TrainOutput {
        params,
        prompt,
        index,
        history: TrainHistory {
            initial_metrics,
            epochs,
        },
    })
}
