//! Training objectives over a mini-batch of determined examples: the
//! risk-consistent estimator and the assume-negative family of baselines.
//!
//! Every objective is a weighted sum of per-class binary cross-entropies,
//! `Σᵢ Σⱼ aᵢⱼ [tᵢⱼ (-ln fᵢⱼ) + (1 - tᵢⱼ)(-ln(1 - fᵢⱼ))]`, which is what the
//! model differentiates.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::{Determination, DeterminedInstance};
use crate::error::{ensure_len, Error, Result};
use crate::risk::{self, neg_logs, sigmoid, RiskConfig, RiskSample, Weighting};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Risk-consistent determined risk with recovered soft labels.
    Rc,
    /// Assume every non-determined label is negative; full BCE.
    An,
    /// As `An`, with assumed negatives down-weighted by `1 / (k - 1)`.
    Wan,
    /// BCE on the determined class only.
    BceDetermined,
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rc" => Ok(LossMode::Rc),
            "an" => Ok(LossMode::An),
            "wan" => Ok(LossMode::Wan),
            "bce_determined" => Ok(LossMode::BceDetermined),
            other => Err(Error::InvalidConfig(format!("unknown loss mode {other:?}"))),
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossMode::Rc => "rc",
            LossMode::An => "an",
            LossMode::Wan => "wan",
            LossMode::BceDetermined => "bce_determined",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Objective {
    pub mode: LossMode,
    pub risk: RiskConfig,
}

impl Objective {
    pub fn new(mode: LossMode, risk: RiskConfig) -> Self {
        Self { mode, risk }
    }

    pub fn rc(risk: RiskConfig) -> Self {
        Self::new(LossMode::Rc, risk)
    }
}

/// A determined training example.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub features: &'a [f64],
    pub det: Determination,
    /// True `p(y^γ = 1 | x)`, needed only for oracle weighting.
    pub gamma_conditional: Option<f64>,
}

impl<'a> Example<'a> {
    pub fn new(features: &'a [f64], det: Determination) -> Self {
        Self {
            features,
            det,
            gamma_conditional: None,
        }
    }
}

impl<'a> From<&'a DeterminedInstance> for Example<'a> {
    fn from(instance: &'a DeterminedInstance) -> Self {
        Example::new(&instance.features, instance.determination)
    }
}

/// Row-major `n × k` weights and targets of one objective evaluation.
#[derive(Clone, Debug)]
pub(crate) struct Terms {
    pub weights: Vec<f64>,
    pub targets: Vec<f64>,
    /// Targets that are `σ(logit)` of the same entry and carry gradient.
    pub differentiable: Vec<bool>,
}

impl Terms {
    pub fn loss(&self, probs: &[f64], epsilon: f64) -> f64 {
        let mut total = 0.0;
        for ((&a, &t), &f) in self.weights.iter().zip(&self.targets).zip(probs) {
            if a != 0.0 {
                let (pos, neg) = neg_logs(f, epsilon);
                total += a * (t * pos + (1.0 - t) * neg);
            }
        }
        total
    }

    /// `∂loss/∂z` for every logit.
    pub fn logit_gradient(&self, probs: &[f64], epsilon: f64) -> Vec<f64> {
        let mut grad = Vec::with_capacity(probs.len());
        for (idx, &f) in probs.iter().enumerate() {
            let a = self.weights[idx];
            if a == 0.0 {
                grad.push(0.0);
                continue;
            }
            let t = self.targets[idx];
            let clamped = f < epsilon || f > 1.0 - epsilon;
            let mut g = if clamped { 0.0 } else { f - t };
            if self.differentiable[idx] {
                // t = σ(z) as well: ∂/∂t [t(-ln f) + (1-t)(-ln(1-f))] · σ'(z).
                let (pos, neg) = neg_logs(f, epsilon);
                g += t * (1.0 - t) * (pos - neg);
            }
            grad.push(a * g);
        }
        grad
    }
}

/// Weights and targets for a batch given its logits (`n × k`, row-major).
pub(crate) fn terms(objective: &Objective, logits: &[f64], batch: &[Example<'_>]) -> Result<Terms> {
    let k = objective.risk.k;
    objective.risk.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    ensure_len("batch logits", batch.len() * k, logits.len())?;
    for ex in batch {
        if ex.det.gamma >= k {
            return Err(Error::LabelOutOfRange {
                index: ex.det.gamma,
                k,
            });
        }
    }
    let n = batch.len();
    let mut weights = vec![0.0; n * k];
    let mut targets = vec![0.0; n * k];
    let mut differentiable = vec![false; n * k];

    match objective.mode {
        LossMode::Rc => {
            let cfg = &objective.risk;
            let softs = batch
                .iter()
                .zip(logits.chunks_exact(k))
                .map(|(ex, z)| risk::recover_soft_labels(z, Some(ex.det), cfg))
                .collect::<Result<Vec<_>>>()?;
            let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
            let samples: Vec<RiskSample<'_>> = batch
                .iter()
                .zip(&softs)
                .zip(probs.chunks_exact(k))
                .map(|((ex, soft), f)| RiskSample {
                    probs: f,
                    soft,
                    det: ex.det,
                    gamma_conditional: match cfg.weighting {
                        Weighting::Estimated => ex.gamma_conditional.or(Some(f[ex.det.gamma])),
                        _ => ex.gamma_conditional,
                    },
                })
                .collect();
            let risk_terms = risk::risk_terms(&samples, cfg)?;
            for (i, (ex, term)) in batch.iter().zip(risk_terms).enumerate() {
                let row = i * k;
                weights[row..row + k].fill(term.coefficient);
                targets[row..row + k].copy_from_slice(&term.targets);
                if !cfg.stop_gradient_on_soft_labels {
                    for j in (0..k).filter(|&j| j != ex.det.gamma) {
                        differentiable[row + j] = true;
                    }
                }
            }
        }
        LossMode::An | LossMode::Wan | LossMode::BceDetermined => {
            let inv_n = 1.0 / n as f64;
            let negative_weight = match objective.mode {
                LossMode::An => inv_n,
                LossMode::Wan if k > 1 => inv_n / (k - 1) as f64,
                _ => 0.0,
            };
            for (i, ex) in batch.iter().enumerate() {
                let row = i * k;
                weights[row..row + k].fill(negative_weight);
                weights[row + ex.det.gamma] = inv_n;
                targets[row + ex.det.gamma] = if ex.det.value { 1.0 } else { 0.0 };
            }
        }
    }
    Ok(Terms {
        weights,
        targets,
        differentiable,
    })
}
