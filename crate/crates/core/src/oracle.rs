//! Ground truth for the estimator: exhaustive enumeration of the expected set
//! loss, synthetic worlds with known conditionals, Monte Carlo unbiasedness
//! reports and the brute-force checks behind `dmll verify`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{
    generate_determined, Dataset, DeterminedDataset, FullDataset, LabelVocabulary,
    MultiLabelInstance,
};
use crate::error::{ensure_len, Error, Result};
use crate::metrics::{self, ScoreMatrix};
use crate::model::{dot, ModelParams};
use crate::objective::{Example, LossMode, Objective};
use crate::prompt::{PromptTemplate, SyntheticProvider};
use crate::risk::{
    self, bce_set_loss, expected_loss, recover_soft_labels, sigmoid, RiskConfig, RiskSample,
    SoftLabels, Weighting, DEFAULT_EPSILON,
};
use crate::rng;
use crate::trainer::{train, PromptSetup, TrainConfig, TrainOutput};

/// Largest label space enumerated exhaustively (`2^k` subsets).
pub const ENUMERATION_CAP: usize = 20;

fn check_enumerable(probs: &[f64], conditionals: &[f64]) -> Result<()> {
    ensure_len("conditionals", probs.len(), conditionals.len())?;
    if probs.len() > ENUMERATION_CAP {
        return Err(Error::TooManyClasses {
            k: probs.len(),
            cap: ENUMERATION_CAP,
        });
    }
    SoftLabels::new(conditionals.to_vec())?;
    Ok(())
}

fn subset_sum(
    probs: &[f64],
    conditionals: &[f64],
    epsilon: f64,
    keep: impl Fn(u32) -> bool,
) -> Result<f64> {
    check_enumerable(probs, conditionals)?;
    let k = probs.len();
    let mut total = 0.0;
    let mut positives = Vec::with_capacity(k);
    for mask in 0u32..(1u32 << k) {
        if !keep(mask) {
            continue;
        }
        positives.clear();
        let mut mass = 1.0;
        for (j, &p) in conditionals.iter().enumerate() {
            if mask >> j & 1 == 1 {
                positives.push(j);
                mass *= p;
            } else {
                mass *= 1.0 - p;
            }
        }
        if mass != 0.0 {
            total += mass * bce_set_loss(probs, &positives, epsilon)?;
        }
    }
    Ok(total)
}

/// `Σ_Y L(f, Y) Πⱼ∈Y pⱼ Πⱼ∉Y (1 - pⱼ)` over every subset of the label space.
pub fn enumerate_expected_loss(probs: &[f64], conditionals: &[f64], epsilon: f64) -> Result<f64> {
    subset_sum(probs, conditionals, epsilon, |_| true)
}

/// As [`enumerate_expected_loss`], restricted to subsets whose membership of
/// `gamma` equals `value`.
pub fn enumerate_restricted_expected_loss(
    probs: &[f64],
    conditionals: &[f64],
    gamma: usize,
    value: bool,
    epsilon: f64,
) -> Result<f64> {
    if gamma >= probs.len() {
        return Err(Error::LabelOutOfRange {
            index: gamma,
            k: probs.len(),
        });
    }
    subset_sum(probs, conditionals, epsilon, |mask| {
        (mask >> gamma & 1 == 1) == value
    })
}

/// Shape of a randomly drawn world: weight rows `N(0, scale² / d)` (so
/// `w·x ~ N(0, scale²)` in expectation) and biases `N(bias_mean, bias_std²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldShape {
    pub weight_scale: f64,
    pub bias_mean: f64,
    pub bias_std: f64,
}

impl Default for WorldShape {
    fn default() -> Self {
        Self {
            weight_scale: 2.0,
            bias_mean: -0.5,
            bias_std: 0.5,
        }
    }
}

/// Labels are conditionally independent given `x ~ N(0, I_d)` with
/// `p(yʲ = 1 | x) = σ(wⱼ·x + bⱼ)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub k: usize,
    pub d: usize,
    pub seed: u64,
    /// Row-major `k × d`.
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl SyntheticWorld {
    pub fn new(k: usize, d: usize, seed: u64, weights: Vec<f64>, biases: Vec<f64>) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "world dimensions must be positive (k = {k}, d = {d})"
            )));
        }
        ensure_len("world weights", k * d, weights.len())?;
        ensure_len("world biases", k, biases.len())?;
        if weights.iter().chain(&biases).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("world parameters".into()));
        }
        Ok(Self {
            k,
            d,
            seed,
            weights,
            biases,
        })
    }

    pub fn random(k: usize, d: usize, seed: u64) -> Result<Self> {
        Self::random_with(k, d, seed, WorldShape::default())
    }

    pub fn random_with(k: usize, d: usize, seed: u64, shape: WorldShape) -> Result<Self> {
        let mut rng = rng::stream(seed, rng::STREAM_WORLD);
        let scale = shape.weight_scale / (d.max(1) as f64).sqrt();
        let weights = (0..k * d)
            .map(|_| {
                scale * {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z
                }
            })
            .collect();
        let biases = (0..k)
            .map(|_| {
                shape.bias_mean
                    + shape.bias_std * {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z
                    }
            })
            .collect();
        Self::new(k, d, seed, weights, biases)
    }

    pub fn conditionals(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.d)
            .zip(&self.biases)
            .map(|(w, b)| sigmoid(dot(w, x) + b))
            .collect()
    }
}

/// A full dataset drawn from a world, its determined counterpart and the
/// true conditionals of every instance.
#[derive(Clone, Debug)]
pub struct SyntheticSample {
    pub full: FullDataset,
    pub determined: DeterminedDataset,
    pub conditionals: Vec<Vec<f64>>,
}

pub fn synth_generate(world: &SyntheticWorld, n: usize) -> Result<SyntheticSample> {
    synth_generate_draw(world, n, 0)
}

/// Independent draw number `draw` from the same world; draw 0 is what
/// [`synth_generate`] returns. Instance ids carry the draw number.
pub fn synth_generate_draw(world: &SyntheticWorld, n: usize, draw: u64) -> Result<SyntheticSample> {
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let mut rng = rng::stream(world.seed, rng::STREAM_WORLD + 1 + draw);
    let mut instances = Vec::with_capacity(n);
    let mut conditionals = Vec::with_capacity(n);
    for i in 0..n {
        let x: Vec<f64> = (0..world.d)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let p = world.conditionals(&x);
        let positives = p
            .iter()
            .enumerate()
            .filter_map(|(j, &pj)| (rng.random::<f64>() < pj).then_some(j))
            .collect();
        instances.push(MultiLabelInstance::new(
            format!("d{draw}x{i:06}"),
            x,
            positives,
        ));
        conditionals.push(p);
    }
    let full = Dataset::new(LabelVocabulary::numbered("class", world.k), instances)?;
    let determined = generate_determined(&full, world.seed)?;
    Ok(SyntheticSample {
        full,
        determined,
        conditionals,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasednessReport {
    pub weighting: Weighting,
    /// Only oracle weighting (true conditionals as soft labels and weights)
    /// is expected to be unbiased.
    pub unbiasedness_claimed: bool,
    pub n_samples: usize,
    pub true_risk: f64,
    pub true_std_error: f64,
    pub estimated_risk: f64,
    pub estimated_std_error: f64,
    pub std_error: f64,
    pub z_score: f64,
    pub positives: usize,
    pub negatives: usize,
}

pub const MIN_UNBIASEDNESS_SAMPLES: usize = 10_000;

fn mean_and_std_error(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

/// Compares the Monte Carlo full-label risk of `model` with the determined
/// risk estimate, each from its own independent draw of `n_samples`.
pub fn unbiasedness_report(
    world: &SyntheticWorld,
    model: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    n_samples: usize,
    weighting: Weighting,
    epsilon: f64,
) -> Result<UnbiasednessReport> {
    if n_samples < MIN_UNBIASEDNESS_SAMPLES {
        return Err(Error::InvalidConfig(format!(
            "unbiasedness report needs at least {MIN_UNBIASEDNESS_SAMPLES} samples, got {n_samples}"
        )));
    }
    let config = RiskConfig::new(world.k)?
        .with_epsilon(epsilon)?
        .with_weighting(weighting);

    let truth = synth_generate_draw(world, n_samples, 1)?;
    let true_losses = truth
        .full
        .instances()
        .iter()
        .map(|x| bce_set_loss(&model(&x.features)?, x.positives(), epsilon))
        .collect::<Result<Vec<_>>>()?;
    let (true_risk, true_std_error) = mean_and_std_error(&true_losses);

    let sample = synth_generate_draw(world, n_samples, 2)?;
    let instances = sample.determined.instances();
    let positives = instances.iter().filter(|x| x.determination.value).count();
    let negatives = instances.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::Degenerate(format!(
            "determined sample has {positives} positive and {negatives} negative answers"
        )));
    }
    let probs = instances
        .iter()
        .map(|x| model(&x.features))
        .collect::<Result<Vec<_>>>()?;
    let softs = instances
        .iter()
        .zip(&probs)
        .zip(&sample.conditionals)
        .map(|((x, f), p)| match weighting {
            Weighting::Oracle => SoftLabels::new(p.clone()),
            Weighting::Corrected | Weighting::Estimated => {
                let logits: Vec<f64> = f.iter().map(|&v| logit(v)).collect();
                recover_soft_labels(&logits, Some(x.determination), &config)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<RiskSample<'_>> = instances
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let gamma = x.determination.gamma;
            RiskSample {
                probs: &probs[i],
                soft: &softs[i],
                det: x.determination,
                gamma_conditional: Some(match weighting {
                    Weighting::Oracle => sample.conditionals[i][gamma],
                    _ => probs[i][gamma],
                }),
            }
        })
        .collect();
    let terms = risk::risk_terms(&batch, &config)?;
    let n = n_samples as f64;
    let contributions = batch
        .iter()
        .zip(&terms)
        .map(|(s, t)| {
            let targets = SoftLabels::new(t.targets.clone())?;
            Ok(n * t.coefficient * expected_loss(s.probs, &targets, epsilon)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let (estimated_risk, estimated_std_error) = mean_and_std_error(&contributions);

    let std_error = (true_std_error.powi(2) + estimated_std_error.powi(2)).sqrt();
    let diff = (estimated_risk - true_risk).abs();
    let z_score = if std_error > 0.0 {
        diff / std_error
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(UnbiasednessReport {
        weighting,
        unbiasedness_claimed: weighting == Weighting::Oracle,
        n_samples,
        true_risk,
        true_std_error,
        estimated_risk,
        estimated_std_error,
        std_error,
        z_score,
        positives,
        negatives,
    })
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
    (p / (1.0 - p)).ln()
}

// Brute-force metric oracles: every quantity is counted pairwise from its
// definition, without sorting.

/// Instance `a` outranks `b` on column scores `s`: higher score, or equal
/// score and lower index.
fn outranks(s: &[f64], a: usize, b: usize) -> bool {
    s[a] > s[b] || (s[a] == s[b] && a < b)
}

pub fn brute_force_map(m: &ScoreMatrix) -> Option<f64> {
    let mut aps = Vec::new();
    for j in 0..m.k() {
        let column: Vec<f64> = (0..m.n()).map(|i| m.score(i, j)).collect();
        let positive: Vec<bool> = (0..m.n()).map(|i| m.truth(i).contains(&j)).collect();
        let count = positive.iter().filter(|&&p| p).count();
        if count == 0 {
            continue;
        }
        let mut sum = 0.0;
        for i in (0..m.n()).filter(|&i| positive[i]) {
            let above = (0..m.n()).filter(|&o| outranks(&column, o, i)).count();
            let positive_above = (0..m.n())
                .filter(|&o| positive[o] && outranks(&column, o, i))
                .count();
            sum += (positive_above + 1) as f64 / (above + 1) as f64;
        }
        aps.push(sum / count as f64);
    }
    (!aps.is_empty()).then(|| aps.iter().sum::<f64>() / aps.len() as f64)
}

pub fn brute_force_one_error(m: &ScoreMatrix) -> f64 {
    let errors = (0..m.n())
        .filter(|&i| {
            let row = m.row(i);
            let top = (0..m.k())
                .find(|&j| (0..m.k()).all(|q| q == j || outranks(row, j, q)))
                .expect("a strict total order has a maximum");
            !m.truth(i).contains(&top)
        })
        .count();
    errors as f64 / m.n() as f64
}

pub fn brute_force_ranking_loss(m: &ScoreMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..m.n() {
        let row = m.row(i);
        let (mut pairs, mut bad) = (0.0, 0.0);
        for r in 0..m.k() {
            for q in 0..m.k() {
                if m.truth(i).contains(&r) && !m.truth(i).contains(&q) {
                    pairs += 1.0;
                    if row[q] > row[r] {
                        bad += 1.0;
                    } else if row[q] == row[r] {
                        bad += 0.5;
                    }
                }
            }
        }
        total += bad / pairs;
    }
    total / m.n() as f64
}

pub fn brute_force_coverage(m: &ScoreMatrix) -> f64 {
    let mut total = 0.0;
    for i in 0..m.n() {
        let row = m.row(i);
        let worst = m
            .truth(i)
            .iter()
            .map(|&j| 1 + (0..m.k()).filter(|&q| outranks(row, q, j)).count())
            .max()
            .expect("nonempty truth set");
        total += (worst - 1) as f64 / m.k() as f64;
    }
    total / m.n() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpectedLossReport {
    pub k_min: usize,
    pub k_max: usize,
    pub trials_per_k: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const EXPECTED_LOSS_TOLERANCE: f64 = 1e-10;

/// Closed form against enumeration for random `(f, d)` at every `k` in range.
/// A quarter of the trials put some coordinates at the clamp extremes.
pub fn check_expected_loss(
    k_min: usize,
    k_max: usize,
    trials: usize,
    seed: u64,
) -> Result<ExpectedLossReport> {
    if k_min == 0 || k_min > k_max {
        return Err(Error::InvalidConfig(format!(
            "invalid k range {k_min}..={k_max}"
        )));
    }
    if k_max > ENUMERATION_CAP {
        return Err(Error::TooManyClasses {
            k: k_max,
            cap: ENUMERATION_CAP,
        });
    }
    let mut rng = rng::stream(seed, 0x4551_3500);
    let mut max_relative_error: f64 = 0.0;
    for k in k_min..=k_max {
        for trial in 0..trials {
            let extreme = trial % 4 == 3;
            let draw = |rng: &mut rand_chacha::ChaCha8Rng| {
                if extreme && rng.random_bool(0.3) {
                    if rng.random_bool(0.5) {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    rng.random::<f64>()
                }
            };
            let f: Vec<f64> = (0..k).map(|_| draw(&mut rng)).collect();
            let d: Vec<f64> = (0..k).map(|_| draw(&mut rng)).collect();
            let closed = expected_loss(&f, &SoftLabels::new(d.clone())?, DEFAULT_EPSILON)?;
            let exact = enumerate_expected_loss(&f, &d, DEFAULT_EPSILON)?;
            let rel = (closed - exact).abs() / exact.abs().max(f64::MIN_POSITIVE);
            max_relative_error = max_relative_error.max(rel);
        }
    }
    Ok(ExpectedLossReport {
        k_min,
        k_max,
        trials_per_k: trials,
        max_relative_error,
        tolerance: EXPECTED_LOSS_TOLERANCE,
        passed: max_relative_error <= EXPECTED_LOSS_TOLERANCE,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnbiasedCheck {
    pub worlds: Vec<UnbiasednessReport>,
    pub z_threshold: f64,
    pub within_threshold: usize,
    pub required: usize,
    pub passed: bool,
}

/// Oracle-mode unbiasedness over `worlds` random worlds, each scored with a
/// freshly initialised model; passes when at least `required` worlds have
/// `z < z_threshold`.
pub fn check_unbiased(
    k: usize,
    d: usize,
    n_samples: usize,
    worlds: usize,
    required: usize,
    seed: u64,
) -> Result<UnbiasedCheck> {
    const Z_THRESHOLD: f64 = 3.0;
    let reports = (0..worlds as u64)
        .map(|w| {
            let world = SyntheticWorld::random(k, d, seed.wrapping_add(w))?;
            let model = ModelParams::init(seed.wrapping_add(1000 + w), d, d.max(2), k)?;
            let f = |x: &[f64]| model.forward(x).map(|o| o.probs);
            unbiasedness_report(&world, &f, n_samples, Weighting::Oracle, DEFAULT_EPSILON)
        })
        .collect::<Result<Vec<_>>>()?;
    let within_threshold = reports.iter().filter(|r| r.z_score < Z_THRESHOLD).count();
    Ok(UnbiasedCheck {
        worlds: reports,
        z_threshold: Z_THRESHOLD,
        within_threshold,
        required,
        passed: within_threshold >= required,
    })
}

/// A random score matrix with `n ≤ max_n`, `k ≤ max_k` whose every instance
/// has at least one relevant and one irrelevant label (`k ≥ 2`). Scores are
/// drawn from a small grid so ties occur.
pub fn random_score_matrix(rng: &mut impl Rng, max_n: usize, max_k: usize) -> Result<ScoreMatrix> {
    let n = rng.random_range(1..=max_n);
    let k = rng.random_range(2..=max_k.max(2));
    let scores = (0..n * k)
        .map(|_| f64::from(rng.random_range(0..5u8)) / 4.0)
        .collect();
    let truths = (0..n)
        .map(|_| loop {
            let t: Vec<usize> = (0..k).filter(|_| rng.random_bool(0.4)).collect();
            if !t.is_empty() && t.len() < k {
                break t;
            }
        })
        .collect();
    ScoreMatrix::new(k, scores, truths)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCheck {
    pub trials: usize,
    pub max_abs_error: [f64; 4],
    pub tolerance: f64,
    pub passed: bool,
}

pub fn check_metrics(trials: usize, max_n: usize, max_k: usize, seed: u64) -> Result<MetricsCheck> {
    const TOLERANCE: f64 = 1e-12;
    let mut rng = rng::stream(seed, 0x4d45_5452);
    let mut worst = [0.0f64; 4];
    for _ in 0..trials {
        let m = random_score_matrix(&mut rng, max_n, max_k)?;
        let map = metrics::mean_average_precision(&m)?;
        let pairs = [
            (map, brute_force_map(&m).unwrap_or(f64::NAN)),
            (metrics::one_error(&m)?, brute_force_one_error(&m)),
            (metrics::ranking_loss(&m)?, brute_force_ranking_loss(&m)),
            (metrics::coverage(&m)?, brute_force_coverage(&m)),
        ];
        for (w, (a, b)) in worst.iter_mut().zip(pairs) {
            let err = (a - b).abs();
            *w = if err.is_nan() {
                f64::INFINITY
            } else {
                w.max(err)
            };
        }
    }
    Ok(MetricsCheck {
        trials,
        max_abs_error: worst,
        tolerance: TOLERANCE,
        passed: worst.iter().all(|&e| e <= TOLERANCE),
    })
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps coordinates whose true
/// derivative is near zero from dividing round-off by round-off.
pub fn gradient_relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-5;
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const GRADIENT_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientConfigReport {
    pub d: usize,
    pub m: usize,
    pub k: usize,
    pub batch: usize,
    pub mode: LossMode,
    pub weighting: Weighting,
    pub stop_gradient: bool,
    pub coordinates: usize,
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub configs: Vec<GradientConfigReport>,
    pub step: f64,
    pub tolerance: f64,
    pub max_relative_error: f64,
    pub passed: bool,
}

/// Analytic gradients against central differences of the loss. With
/// stop-gradient soft labels the weights and targets are frozen at the
/// unperturbed parameters, which is the function the analytic gradient
/// differentiates.
pub fn check_gradients(configs: usize, seed: u64) -> Result<GradientCheck> {
    let mut reports = Vec::with_capacity(configs);
    for c in 0..configs as u64 {
        let mut rng = rng::stream(seed, 0x4752_4144_0000 + c);
        let d = rng.random_range(1..=6);
        let m = rng.random_range(1..=5);
        let k = rng.random_range(1..=6);
        let n = rng.random_range(1..=8);
        let mode = [
            LossMode::Rc,
            LossMode::An,
            LossMode::Wan,
            LossMode::BceDetermined,
        ][rng.random_range(0..4)];
        let stop_gradient = mode != LossMode::Rc || rng.random_bool(0.5);
        let weighting = if stop_gradient {
            [
                Weighting::Corrected,
                Weighting::Estimated,
                Weighting::Oracle,
            ][rng.random_range(0..3)]
        } else {
            Weighting::Corrected
        };
        let mut params = ModelParams::init(seed.wrapping_add(c), d, m, k)?;
        params.temperature = rng.random_range(0.5..4.0);
        for b in &mut params.biases {
            *b = StandardNormal.sample(&mut rng);
        }
        let features: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let batch: Vec<Example<'_>> = features
            .iter()
            .map(|x| Example {
                features: x,
                det: crate::dataset::Determination::new(
                    rng.random_range(0..k),
                    rng.random_bool(0.5),
                ),
                gamma_conditional: Some(rng.random_range(0.05..0.95)),
            })
            .collect();
        let risk = RiskConfig::new(k)?
            .with_weighting(weighting)
            .with_stop_gradient(stop_gradient);
        let objective = Objective::new(mode, risk);
        let (_, grads) = params.objective_loss_and_gradient(&batch, &objective)?;
        let analytic = grads.to_vec();
        let frozen = params.objective_terms(&batch, &objective)?;
        let theta = params.trainable();
        let mut probe = params.clone();
        let mut loss_at = |values: &[f64]| -> Result<f64> {
            probe.set_trainable(values)?;
            if stop_gradient {
                probe.loss_with_terms(&batch, &frozen, risk.epsilon)
            } else {
                probe.objective_loss(&batch, &objective)
            }
        };
        let mut max_rel: f64 = 0.0;
        for (i, &a) in analytic.iter().enumerate() {
            let mut plus = theta.clone();
            plus[i] += FD_STEP;
            let mut minus = theta.clone();
            minus[i] -= FD_STEP;
            let numeric = (loss_at(&plus)? - loss_at(&minus)?) / (2.0 * FD_STEP);
            max_rel = max_rel.max(gradient_relative_error(a, numeric, GRADIENT_FLOOR));
        }
        reports.push(GradientConfigReport {
            d,
            m,
            k,
            batch: n,
            mode,
            weighting,
            stop_gradient,
            coordinates: analytic.len(),
            max_relative_error: max_rel,
        });
    }
    let max_relative_error = reports
        .iter()
        .map(|r| r.max_relative_error)
        .fold(0.0, f64::max);
    Ok(GradientCheck {
        configs: reports,
        step: FD_STEP,
        tolerance: GRADIENT_TOLERANCE,
        max_relative_error,
        passed: max_relative_error < GRADIENT_TOLERANCE,
    })
}

/// The desk-scale benchmark: a random world with `k` classes over `d`
/// features, a determined training draw, a fully labelled held-out draw and a
/// synthetic text side with a vocabulary of `vocabulary_size` words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub k: usize,
    pub d: usize,
    pub n_train: usize,
    pub n_heldout: usize,
    pub embed_dim: usize,
    pub vocabulary_size: usize,
    pub seed: u64,
}

impl BenchmarkConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            k: 10,
            d: 16,
            n_train: 5000,
            n_heldout: 2000,
            embed_dim: 32,
            vocabulary_size: 200,
            seed,
        }
    }
}

pub struct Benchmark {
    pub world: SyntheticWorld,
    pub train: SyntheticSample,
    pub heldout: SyntheticSample,
    pub vocabulary: Vec<String>,
    pub provider: SyntheticProvider,
    pub template: PromptTemplate,
}

impl Benchmark {
    pub fn new(config: &BenchmarkConfig) -> Result<Self> {
        let world = SyntheticWorld::random(config.k, config.d, config.seed)?;
        Ok(Self {
            train: synth_generate_draw(&world, config.n_train, 0)?,
            heldout: synth_generate_draw(&world, config.n_heldout, 1)?,
            world,
            vocabulary: (0..config.vocabulary_size)
                .map(|i| format!("word{i}"))
                .collect(),
            provider: SyntheticProvider::new(config.embed_dim, config.seed)?,
            template: PromptTemplate::default(),
        })
    }

    pub fn run(&self, config: &TrainConfig) -> Result<TrainOutput> {
        let setup = PromptSetup {
            vocabulary: &self.vocabulary,
            provider: &self.provider,
            template: &self.template,
        };
        train(
            &self.train.determined,
            Some(&self.heldout.full),
            &setup,
            config,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EPS: f64 = DEFAULT_EPSILON;

    #[test]
    fn enumeration_examples() {
        let v = enumerate_expected_loss(&[0.5], &[1.0], EPS).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);

        let f = [0.3, 0.8];
        let subsets: [&[usize]; 4] = [&[], &[0], &[1], &[0, 1]];
        let mean = subsets
            .iter()
            .map(|y| bce_set_loss(&f, y, EPS).unwrap())
            .sum::<f64>()
            / 4.0;
        let v = enumerate_expected_loss(&f, &[0.5, 0.5], EPS).unwrap();
        assert!((v - mean).abs() < 1e-14);
    }

    #[test]
    fn enumeration_cap() {
        let f = vec![0.5; ENUMERATION_CAP + 1];
        assert!(matches!(
            enumerate_expected_loss(&f, &f, EPS),
            Err(Error::TooManyClasses { k: 21, cap: 20 })
        ));
    }

    #[test]
    fn restricted_enumeration_matches_closed_form() {
        let f = [0.2, 0.7, 0.4];
        let p = [0.6, 0.1, 0.9];
        let soft = SoftLabels::new(p.to_vec()).unwrap();
        for gamma in 0..3 {
            for value in [false, true] {
                let det = crate::dataset::Determination::new(gamma, value);
                let closed = risk::restricted_expected_loss(&f, &soft, det, EPS).unwrap();
                let exact = enumerate_restricted_expected_loss(&f, &p, gamma, value, EPS).unwrap();
                assert!((closed - exact).abs() < 1e-12 * exact.max(1.0));
            }
        }
    }

    #[test]
    fn saturated_world_makes_every_label_positive() {
        let world = SyntheticWorld::new(3, 2, 5, vec![0.0; 6], vec![1e3; 3]).unwrap();
        let s = synth_generate(&world, 50).unwrap();
        assert!(s
            .full
            .instances()
            .iter()
            .all(|x| x.positives() == [0, 1, 2]));
        assert!(s
            .determined
            .instances()
            .iter()
            .all(|x| x.determination.value));
    }

    #[test]
    fn generation_is_seeded_and_draws_are_independent() {
        let world = SyntheticWorld::random(4, 3, 11).unwrap();
        let a = synth_generate(&world, 20).unwrap();
        let b = synth_generate(&world, 20).unwrap();
        assert_eq!(a.full.to_jsonl(), b.full.to_jsonl());
        assert_eq!(a.determined.to_jsonl(), b.determined.to_jsonl());
        let c = synth_generate_draw(&world, 20, 1).unwrap();
        assert_ne!(
            a.full.instances()[0].features,
            c.full.instances()[0].features
        );
    }

    #[test]
    fn positive_rate_matches_mean_conditional() {
        let world = SyntheticWorld::random(3, 4, 21).unwrap();
        let n = 100_000;
        let s = synth_generate(&world, n).unwrap();
        // Expected rate from an independent draw of x only.
        let reference = synth_generate_draw(&world, n, 9).unwrap();
        for j in 0..3 {
            let rate = s
                .full
                .instances()
                .iter()
                .filter(|x| x.is_positive(j))
                .count() as f64
                / n as f64;
            let expect: f64 = reference.conditionals.iter().map(|p| p[j]).sum::<f64>() / n as f64;
            let se = (expect * (1.0 - expect) / n as f64).sqrt() * std::f64::consts::SQRT_2;
            assert!(
                (rate - expect).abs() < 4.0 * se,
                "class {j}: {rate} vs {expect}"
            );
        }
    }

    #[test]
    fn report_requires_enough_samples_and_both_partitions() {
        let world = SyntheticWorld::random(2, 2, 1).unwrap();
        let f = |_: &[f64]| Ok(vec![0.5, 0.5]);
        assert!(unbiasedness_report(&world, &f, 100, Weighting::Oracle, EPS).is_err());
        let saturated = SyntheticWorld::new(2, 2, 1, vec![0.0; 4], vec![1e3; 2]).unwrap();
        assert!(matches!(
            unbiasedness_report(&saturated, &f, 10_000, Weighting::Oracle, EPS),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn matched_extreme_predictor_has_floor_risk() {
        // Conditionals round to exactly 1 and 0.
        let world = SyntheticWorld::new(2, 1, 3, vec![0.0; 2], vec![800.0, -800.0]).unwrap();
        let f = |_: &[f64]| Ok(vec![1.0 - EPS, EPS]);
        let r = unbiasedness_report(&world, &f, 10_000, Weighting::Oracle, EPS).unwrap();
        assert!(r.true_risk < 1e-6 && r.estimated_risk < 1e-6);
        assert!(r.z_score < 3.0, "{r:?}");
    }

    #[test]
    fn oracle_mode_is_unbiased_on_a_small_world() {
        let world = SyntheticWorld::random(4, 3, 8).unwrap();
        let model = ModelParams::init(2, 3, 3, 4).unwrap();
        let f = |x: &[f64]| model.forward(x).map(|o| o.probs);
        let r = unbiasedness_report(&world, &f, 40_000, Weighting::Oracle, EPS).unwrap();
        assert!(r.unbiasedness_claimed);
        assert!(r.z_score < 4.0, "{r:?}");
        let c = unbiasedness_report(&world, &f, 40_000, Weighting::Corrected, EPS).unwrap();
        assert!(!c.unbiasedness_claimed);
    }

    #[test]
    fn brute_force_metric_oracles_agree_with_fixed_examples() {
        let m = ScoreMatrix::new(3, vec![0.2, 0.5, 0.1], vec![vec![0]]).unwrap();
        assert_eq!(brute_force_one_error(&m), 1.0);
        assert_eq!(brute_force_ranking_loss(&m), 0.5);
        assert!((brute_force_coverage(&m) - 1.0 / 3.0).abs() < 1e-15);
        let a = ScoreMatrix::new(1, vec![0.9, 0.8, 0.1], vec![vec![], vec![0], vec![]]).unwrap();
        assert_eq!(brute_force_map(&a), Some(0.5));
    }

    #[test]
    fn small_checks_pass() {
        assert!(check_expected_loss(1, 6, 20, 3).unwrap().passed);
        assert!(check_metrics(30, 8, 6, 3).unwrap().passed);
        let g = check_gradients(6, 3).unwrap();
        assert!(g.passed, "{g:?}");
    }
}
