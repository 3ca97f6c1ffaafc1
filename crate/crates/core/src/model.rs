//! Cosine-prototype scoring head.
//!
//! `zⱼ = τ · cos(W x, pⱼ) + bⱼ` and `fⱼ = σ(zⱼ)`, where `W` is an `m × d`
//! projection, `pⱼ` the unit prototype of class `j` (row `j` of a `k × m`
//! matrix supplied by the prompt machinery), `τ` a shared temperature and `b`
//! per-class biases. A zero projected vector has cosine 0 with everything.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, ensure_len, Error, Result};
use crate::io::write_atomic;
use crate::objective::{self, Example, Objective};
use crate::risk::{sigmoid, RiskConfig};
use crate::rng;

pub const DEFAULT_TEMPERATURE: f64 = 10.0;
pub const PROTOTYPE_NORM_TOLERANCE: f64 = 1e-6;
const MODEL_FORMAT: &str = "dmll-model";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    d: usize,
    m: usize,
    k: usize,
    /// Row-major `m × d`.
    pub projection: Vec<f64>,
    pub biases: Vec<f64>,
    pub temperature: f64,
    /// Row-major `k × m`, unit rows.
    prototypes: Vec<f64>,
}

/// Gradients of the trainable parameters; prototypes are held fixed.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub projection: Vec<f64>,
    pub biases: Vec<f64>,
    pub temperature: f64,
}

impl Gradients {
    fn zeros(params: &ModelParams) -> Self {
        Self {
            projection: vec![0.0; params.projection.len()],
            biases: vec![0.0; params.k],
            temperature: 0.0,
        }
    }

    /// Flattened in the order of [`ModelParams::trainable`].
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = self.projection.clone();
        out.extend_from_slice(&self.biases);
        out.push(self.temperature);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forward {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `W x` normalized, cached so prototypes can change without re-projecting.
#[derive(Clone, Debug)]
pub(crate) struct Projection {
    unit: Vec<f64>,
    norm: f64,
}

impl ModelParams {
    /// Projection entries are `N(0, 1) / √d`, biases zero, temperature 10 and
    /// prototypes seeded random unit rows, all drawn from `seed`.
    pub fn init(seed: u64, d: usize, m: usize, k: usize) -> Result<Self> {
        if d == 0 || m == 0 || k == 0 {
            return Err(Error::InvalidConfig(format!(
                "model dimensions must be positive (d = {d}, m = {m}, k = {k})"
            )));
        }
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let scale = 1.0 / (d as f64).sqrt();
        let projection = (0..m * d)
            .map(|_| {
                scale * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                }
            })
            .collect();
        let mut prototypes: Vec<f64> = (0..k * m)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for row in prototypes.chunks_exact_mut(m) {
            normalize(row);
        }
        Ok(Self {
            d,
            m,
            k,
            projection,
            biases: vec![0.0; k],
            temperature: DEFAULT_TEMPERATURE,
            prototypes,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.d
    }

    pub fn embed_dim(&self) -> usize {
        self.m
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn prototypes(&self) -> &[f64] {
        &self.prototypes
    }

    pub fn set_prototypes(&mut self, prototypes: Vec<f64>) -> Result<()> {
        check_prototypes(&prototypes, self.k, self.m)?;
        self.prototypes = prototypes;
        Ok(())
    }

    /// Errors unless the model scores exactly `k` classes.
    pub fn check_classes(&self, k: usize) -> Result<()> {
        if self.k == k {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                what: "class count",
                left: "model k",
                left_value: self.k,
                right: "vocabulary k",
                right_value: k,
            })
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure_len("projection", self.m * self.d, self.projection.len())?;
        ensure_len("biases", self.k, self.biases.len())?;
        ensure_finite("projection", &self.projection)?;
        ensure_finite("biases", &self.biases)?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive and finite, got {}",
                self.temperature
            )));
        }
        check_prototypes(&self.prototypes, self.k, self.m)
    }

    /// Trainable parameters flattened: projection, biases, temperature.
    pub fn trainable(&self) -> Vec<f64> {
        let mut out = self.projection.clone();
        out.extend_from_slice(&self.biases);
        out.push(self.temperature);
        out
    }

    pub fn set_trainable(&mut self, values: &[f64]) -> Result<()> {
        let np = self.projection.len();
        ensure_len("trainable parameters", np + self.k + 1, values.len())?;
        self.projection.copy_from_slice(&values[..np]);
        self.biases.copy_from_slice(&values[np..np + self.k]);
        self.temperature = values[np + self.k];
        Ok(())
    }

    pub(crate) fn project(&self, features: &[f64]) -> Result<Projection> {
        ensure_len("features", self.d, features.len())?;
        ensure_finite("features", features)?;
        let mut unit: Vec<f64> = self
            .projection
            .chunks_exact(self.d)
            .map(|row| dot(row, features))
            .collect();
        let norm = normalize(&mut unit);
        Ok(Projection { unit, norm })
    }

    /// Cosines against `prototypes` (`k × m`).
    fn cosines(&self, projection: &Projection, prototypes: &[f64]) -> Vec<f64> {
        prototypes
            .chunks_exact(self.m)
            .map(|p| dot(p, &projection.unit))
            .collect()
    }

    pub(crate) fn logits_with(&self, projection: &Projection, prototypes: &[f64]) -> Vec<f64> {
        self.cosines(projection, prototypes)
            .into_iter()
            .zip(&self.biases)
            .map(|(c, b)| self.temperature * c + b)
            .collect()
    }

    pub fn forward(&self, features: &[f64]) -> Result<Forward> {
        self.validate()?;
        let projection = self.project(features)?;
        let logits = self.logits_with(&projection, &self.prototypes);
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(Forward { logits, probs })
    }

    /// Logits for many feature vectors, row-major `n × k`.
    pub fn score_all<'a>(&self, features: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
        self.validate()?;
        let mut out = Vec::new();
        for x in features {
            let projection = self.project(x)?;
            out.extend(self.logits_with(&projection, &self.prototypes));
        }
        Ok(out)
    }

    /// Risk-consistent batch loss and its exact gradient; soft labels are
    /// recovered from the model's own logits.
    pub fn loss_and_gradient(
        &self,
        batch: &[Example<'_>],
        risk: &RiskConfig,
    ) -> Result<(f64, Gradients)> {
        self.objective_loss_and_gradient(batch, &Objective::rc(*risk))
    }

    pub fn objective_loss(&self, batch: &[Example<'_>], objective: &Objective) -> Result<f64> {
        self.validate()?;
        self.check_classes(objective.risk.k)?;
        let projections = self.project_batch(batch)?;
        self.objective_loss_projected(&projections, &self.prototypes, batch, objective)
    }

    pub(crate) fn project_batch(&self, batch: &[Example<'_>]) -> Result<Vec<Projection>> {
        batch.iter().map(|ex| self.project(ex.features)).collect()
    }

    pub(crate) fn objective_loss_projected(
        &self,
        projections: &[Projection],
        prototypes: &[f64],
        batch: &[Example<'_>],
        objective: &Objective,
    ) -> Result<f64> {
        let logits: Vec<f64> = projections
            .iter()
            .flat_map(|p| self.logits_with(p, prototypes))
            .collect();
        let terms = objective::terms(objective, &logits, batch)?;
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let loss = terms.loss(&probs, objective.risk.epsilon);
        if loss.is_finite() {
            Ok(loss)
        } else {
            Err(Error::NonFinite("batch loss".into()))
        }
    }

    /// Weights and targets of `objective` evaluated at the current parameters.
    pub(crate) fn objective_terms(
        &self,
        batch: &[Example<'_>],
        objective: &Objective,
    ) -> Result<objective::Terms> {
        self.validate()?;
        self.check_classes(objective.risk.k)?;
        let logits = self.score_all(batch.iter().map(|ex| ex.features))?;
        objective::terms(objective, &logits, batch)
    }

    /// Batch loss with weights and targets held at `terms`.
    pub(crate) fn loss_with_terms(
        &self,
        batch: &[Example<'_>],
        terms: &objective::Terms,
        epsilon: f64,
    ) -> Result<f64> {
        let logits = self.score_all(batch.iter().map(|ex| ex.features))?;
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok(terms.loss(&probs, epsilon))
    }

    pub fn objective_loss_and_gradient(
        &self,
        batch: &[Example<'_>],
        objective: &Objective,
    ) -> Result<(f64, Gradients)> {
        self.validate()?;
        self.check_classes(objective.risk.k)?;
        let projections = self.project_batch(batch)?;
        let logits: Vec<f64> = projections
            .iter()
            .flat_map(|p| self.logits_with(p, &self.prototypes))
            .collect();
        let terms = objective::terms(objective, &logits, batch)?;
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
        let eps = objective.risk.epsilon;
        let loss = terms.loss(&probs, eps);
        if !loss.is_finite() {
            return Err(Error::NonFinite("batch loss".into()));
        }
        let logit_grad = terms.logit_gradient(&probs, eps);

        let (k, m) = (self.k, self.m);
        let mut grads = Gradients::zeros(self);
        let mut grad_u = vec![0.0; m];
        for (i, (ex, proj)) in batch.iter().zip(&projections).enumerate() {
            let g = &logit_grad[i * k..(i + 1) * k];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            let cos = self.cosines(proj, &self.prototypes);
            for j in 0..k {
                grads.biases[j] += g[j];
                grads.temperature += g[j] * cos[j];
            }
            // ∂cosⱼ/∂u = (pⱼ - cosⱼ û) / |u|; the zero vector gets a zero subgradient.
            if proj.norm == 0.0 {
                continue;
            }
            grad_u.fill(0.0);
            for (j, p) in self.prototypes.chunks_exact(m).enumerate() {
                if g[j] == 0.0 {
                    continue;
                }
                let scale = g[j] * self.temperature / proj.norm;
                for a in 0..m {
                    grad_u[a] += scale * (p[a] - cos[j] * proj.unit[a]);
                }
            }
            for (a, row) in grads.projection.chunks_exact_mut(self.d).enumerate() {
                let ga = grad_u[a];
                if ga != 0.0 {
                    for (w, &x) in row.iter_mut().zip(ex.features) {
                        *w += ga * x;
                    }
                }
            }
        }
        Ok((loss, grads))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&ModelFile {
            format: MODEL_FORMAT.into(),
            version: MODEL_VERSION,
            d: self.d,
            m: self.m,
            k: self.k,
            temperature: self.temperature,
            biases: self.biases.clone(),
            projection: self.projection.clone(),
            prototypes: self.prototypes.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::format("model file", e.to_string()))?;
        if file.format != MODEL_FORMAT || file.version != MODEL_VERSION {
            return Err(Error::format(
                "model file",
                format!("unsupported format {:?} v{}", file.format, file.version),
            ));
        }
        let params = Self {
            d: file.d,
            m: file.m,
            k: file.k,
            projection: file.projection,
            biases: file.biases,
            temperature: file.temperature,
            prototypes: file.prototypes,
        };
        params
            .validate()
            .map_err(|e| Error::format("model file", e.to_string()))?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    d: usize,
    m: usize,
    k: usize,
    temperature: f64,
    biases: Vec<f64>,
    projection: Vec<f64>,
    prototypes: Vec<f64>,
}

fn check_prototypes(prototypes: &[f64], k: usize, m: usize) -> Result<()> {
    ensure_len("prototypes", k * m, prototypes.len())?;
    ensure_finite("prototypes", prototypes)?;
    for (j, row) in prototypes.chunks_exact(m).enumerate() {
        let norm = dot(row, row).sqrt();
        if (norm - 1.0).abs() > PROTOTYPE_NORM_TOLERANCE {
            return Err(Error::InvalidConfig(format!(
                "prototype {j} has norm {norm}, expected 1"
            )));
        }
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scales `v` to unit norm in place and returns the original norm; the zero
/// vector is left unchanged.
pub(crate) fn normalize(v: &mut [f64]) -> f64 {
    let norm = dot(v, v).sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}
