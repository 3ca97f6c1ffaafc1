//! Binary cross-entropy set loss, its closed-form expectation over label sets
//! under independent per-class conditionals, and the determined-label
//! empirical risk.
//!
//! All losses use the negated-log convention, `ℓʲ = -ln fⱼ` and
//! `ℓ̄ʲ = -ln(1 - fⱼ)`, so they are nonnegative. Probabilities are clamped to
//! `[ε, 1 - ε]` before taking logs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dataset::Determination;
use crate::error::{ensure_len, Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-7;

/// How the importance weight `1 / (p(y^γ = v | x) · k)` obtains its
/// conditional.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// The determined answer is taken as certain: `p = 1` for every sample.
    Corrected,
    /// `p` is the model's own (uncorrected) estimate, clamped to `[ε, 1]`.
    Estimated,
    /// `p` is a caller-supplied true conditional. Soft labels must then be the
    /// raw true conditionals; the estimator is unbiased for the full risk.
    Oracle,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "corrected" => Ok(Weighting::Corrected),
            "estimated" => Ok(Weighting::Estimated),
            "oracle" => Ok(Weighting::Oracle),
            other => Err(Error::InvalidConfig(format!("unknown weighting {other:?}"))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Corrected => "corrected",
            Weighting::Estimated => "estimated",
            Weighting::Oracle => "oracle",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RiskConfig {
    pub k: usize,
    pub epsilon: f64,
    pub weighting: Weighting,
    pub stop_gradient_on_soft_labels: bool,
}

impl RiskConfig {
    pub fn new(k: usize) -> Result<Self> {
        let config = Self {
            k,
            epsilon: DEFAULT_EPSILON,
            weighting: Weighting::Corrected,
            stop_gradient_on_soft_labels: true,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        let config = Self { epsilon, ..self };
        config.validate()?;
        Ok(config)
    }

    pub fn with_weighting(self, weighting: Weighting) -> Self {
        Self { weighting, ..self }
    }

    pub fn with_stop_gradient(self, stop_gradient_on_soft_labels: bool) -> Self {
        Self {
            stop_gradient_on_soft_labels,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 0.5), got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-class estimates `dⱼ ≈ p(yʲ = 1 | x)`, each in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftLabels(Vec<f64>);

impl SoftLabels {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if let Some((class, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(0.0..=1.0).contains(*v))
        {
            return Err(Error::InvalidSoftLabel { class, value });
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Copy with class `gamma` fixed to the determined answer.
    pub fn corrected(&self, det: Determination) -> Result<Self> {
        if det.gamma >= self.0.len() {
            return Err(Error::LabelOutOfRange {
                index: det.gamma,
                k: self.0.len(),
            });
        }
        let mut values = self.0.clone();
        values[det.gamma] = if det.value { 1.0 } else { 0.0 };
        Ok(Self(values))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_probability(p: f64, epsilon: f64) -> f64 {
    p.clamp(epsilon, 1.0 - epsilon)
}

/// `-ln f` and `-ln(1 - f)` after clamping.
#[inline]
pub(crate) fn neg_logs(f: f64, epsilon: f64) -> (f64, f64) {
    let f = clamp_probability(f, epsilon);
    (-f.ln(), -(1.0 - f).ln())
}

/// `L(f, Y) = Σ_{j∈Y} -ln fⱼ + Σ_{j∉Y} -ln(1 - fⱼ)`.
pub fn bce_set_loss(probs: &[f64], positives: &[usize], epsilon: f64) -> Result<f64> {
    let k = probs.len();
    let mut relevant = vec![false; k];
    for &j in positives {
        *relevant
            .get_mut(j)
            .ok_or(Error::LabelOutOfRange { index: j, k })? = true;
    }
    Ok(probs
        .iter()
        .zip(&relevant)
        .map(|(&f, &r)| {
            let (pos, neg) = neg_logs(f, epsilon);
            if r {
                pos
            } else {
                neg
            }
        })
        .sum())
}

/// Closed-form expected set loss `H = Σⱼ [dⱼ ℓʲ + (1 - dⱼ) ℓ̄ʲ]`, equal to
/// `Σ_Y L(f, Y) p(Y | x)` when labels are conditionally independent with
/// marginals `d`.
pub fn expected_loss(probs: &[f64], soft: &SoftLabels, epsilon: f64) -> Result<f64> {
    ensure_len("soft labels", probs.len(), soft.len())?;
    Ok(expected_loss_unchecked(probs, soft.as_slice(), epsilon))
}

pub(crate) fn expected_loss_unchecked(probs: &[f64], soft: &[f64], epsilon: f64) -> f64 {
    probs
        .iter()
        .zip(soft)
        .map(|(&f, &d)| {
            let (pos, neg) = neg_logs(f, epsilon);
            d * pos + (1.0 - d) * neg
        })
        .sum()
}

/// Expected set loss restricted to label sets that agree with the determined
/// pair: `Σ_{Y : [γ∈Y] = v} L(f, Y) p(Y | x) = p(v | x) · H(f, d with d_γ := v)`.
pub fn restricted_expected_loss(
    probs: &[f64],
    soft: &SoftLabels,
    det: Determination,
    epsilon: f64,
) -> Result<f64> {
    ensure_len("soft labels", probs.len(), soft.len())?;
    let mass = answer_probability(soft.as_slice()[check_gamma(det, probs.len())?], det.value);
    Ok(mass * expected_loss_unchecked(probs, soft.corrected(det)?.as_slice(), epsilon))
}

fn check_gamma(det: Determination, k: usize) -> Result<usize> {
    if det.gamma < k {
        Ok(det.gamma)
    } else {
        Err(Error::LabelOutOfRange {
            index: det.gamma,
            k,
        })
    }
}

/// `p(y = v)` given `p(y = 1) = p1`.
#[inline]
fn answer_probability(p1: f64, value: bool) -> f64 {
    if value {
        p1
    } else {
        1.0 - p1
    }
}

/// Soft labels from logits: `dⱼ = σ(zⱼ)`, with the determined class, when
/// given, overridden by its observed answer (exactly 0 or 1).
pub fn recover_soft_labels(
    logits: &[f64],
    det: Option<Determination>,
    config: &RiskConfig,
) -> Result<SoftLabels> {
    ensure_len("logits", config.k, logits.len())?;
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFinite("logits".into()));
    }
    let mut values: Vec<f64> = logits.iter().map(|&z| sigmoid(z)).collect();
    if let Some(det) = det {
        let gamma = check_gamma(det, logits.len())?;
        values[gamma] = if det.value { 1.0 } else { 0.0 };
    }
    Ok(SoftLabels(values))
}

/// One determined sample as seen by the risk.
#[derive(Clone, Copy, Debug)]
pub struct RiskSample<'a> {
    pub probs: &'a [f64],
    pub soft: &'a SoftLabels,
    pub det: Determination,
    /// `p(y^γ = 1 | x)` before any correction: the model's estimate in
    /// estimated mode (defaults to `soft[γ]`), the true conditional in oracle
    /// mode (required).
    pub gamma_conditional: Option<f64>,
}

/// The batch risk is `Σᵢ coefficientᵢ · H(fᵢ, targetsᵢ)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RiskTerm {
    pub coefficient: f64,
    pub targets: Vec<f64>,
}

impl RiskSample<'_> {
    /// `p(y^γ = v | x)` used in the importance weight.
    fn answer_conditional(&self, config: &RiskConfig) -> Result<f64> {
        let gamma = check_gamma(self.det, config.k)?;
        match config.weighting {
            Weighting::Corrected => Ok(1.0),
            Weighting::Estimated => {
                let p1 = self
                    .gamma_conditional
                    .unwrap_or_else(|| self.soft.as_slice()[gamma]);
                Ok(answer_probability(p1, self.det.value).clamp(config.epsilon, 1.0))
            }
            Weighting::Oracle => {
                let p1 = self.gamma_conditional.ok_or_else(|| {
                    Error::InvalidConfig("oracle weighting needs the true conditional".into())
                })?;
                let p = answer_probability(p1, self.det.value);
                if p > 0.0 && p <= 1.0 {
                    Ok(p)
                } else {
                    Err(Error::Degenerate(format!(
                        "true conditional p(y^γ = v | x) = {p} is not in (0, 1]"
                    )))
                }
            }
        }
    }
}

/// Per-sample coefficients and targets of the determined risk.
///
/// Corrected and estimated modes: the batch is split by the determined
/// answer and each partition contributes the mean of `wᵢ · H(fᵢ, dᵢ)` with
/// `wᵢ = 1 / (pᵢ k)`; an empty partition contributes nothing.
///
/// Oracle mode: each sample contributes `wᵢ` times its restricted expected
/// loss `p(vᵢ | xᵢ) · H(fᵢ, dᵢ with d_γ := vᵢ)`, and the partition means are
/// weighted by their empirical mass `k · N_v / N`. This is the sample version
/// of rewriting the full risk as an expectation over `(x, γ, y^γ)` and is
/// unbiased for `E[L(f(x), Y)]` when `d` and `p` are the true conditionals.
pub fn risk_terms(batch: &[RiskSample<'_>], config: &RiskConfig) -> Result<Vec<RiskTerm>> {
    config.validate()?;
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let k = config.k;
    let n = batch.len() as f64;
    let positives = batch.iter().filter(|s| s.det.value).count() as f64;
    let negatives = n - positives;

    batch
        .iter()
        .map(|sample| {
            ensure_len("probabilities", k, sample.probs.len())?;
            ensure_len("soft labels", k, sample.soft.len())?;
            let weight = 1.0 / (sample.answer_conditional(config)? * k as f64);
            let partition = if sample.det.value {
                positives
            } else {
                negatives
            };
            Ok(match config.weighting {
                Weighting::Corrected | Weighting::Estimated => RiskTerm {
                    coefficient: weight / partition,
                    targets: sample.soft.as_slice().to_vec(),
                },
                Weighting::Oracle => {
                    let mass = answer_probability(
                        sample.soft.as_slice()[sample.det.gamma],
                        sample.det.value,
                    );
                    let partition_mass = k as f64 * partition / n;
                    RiskTerm {
                        coefficient: partition_mass / partition * weight * mass,
                        targets: sample.soft.corrected(sample.det)?.into_vec(),
                    }
                }
            })
        })
        .collect()
}

/// Determined empirical risk of a mini-batch; see [`risk_terms`].
pub fn determined_batch_risk(batch: &[RiskSample<'_>], config: &RiskConfig) -> Result<f64> {
    let terms = risk_terms(batch, config)?;
    let mut total = 0.0;
    for (sample, term) in batch.iter().zip(&terms) {
        let h = expected_loss_unchecked(sample.probs, &term.targets, config.epsilon);
        if !h.is_finite() {
            return Err(Error::NonFinite("expected loss".into()));
        }
        total += term.coefficient * h;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const EPS: f64 = DEFAULT_EPSILON;

    fn soft(v: &[f64]) -> SoftLabels {
        SoftLabels::new(v.to_vec()).unwrap()
    }

    #[test]
    fn bce_examples() {
        assert!(bce_set_loss(&[1.0 - EPS], &[0], EPS).unwrap() < 1e-6);
        let ln2 = std::f64::consts::LN_2;
        assert!((bce_set_loss(&[0.5, 0.5], &[0], EPS).unwrap() - 2.0 * ln2).abs() < 1e-15);
        assert!((bce_set_loss(&[0.5, 0.5], &[], EPS).unwrap() - 1.3862943611198906).abs() < 1e-15);
        assert!(matches!(
            bce_set_loss(&[0.5], &[1], EPS),
            Err(Error::LabelOutOfRange { index: 1, k: 1 })
        ));
    }

    #[test]
    fn expected_loss_examples() {
        let h = expected_loss(&[0.5], &soft(&[1.0]), EPS).unwrap();
        assert!((h - std::f64::consts::LN_2).abs() < 1e-15);
        let h = expected_loss(&[0.9, 0.2], &soft(&[1.0, 0.0]), EPS).unwrap();
        let direct = -(0.9f64).ln() - (0.8f64).ln();
        assert!((h - direct).abs() < 1e-15);
        assert!((h - 0.3285040669720361).abs() < 1e-12);
        assert!(expected_loss(&[0.5], &soft(&[0.5, 0.5]), EPS).is_err());
    }

    #[test]
    fn soft_label_validation() {
        assert!(SoftLabels::new(vec![0.0, 1.0, 0.5]).is_ok());
        assert!(matches!(
            SoftLabels::new(vec![0.2, 1.5]),
            Err(Error::InvalidSoftLabel { class: 1, .. })
        ));
        assert!(SoftLabels::new(vec![f64::NAN]).is_err());
    }

    #[test]
    fn recover_examples() {
        let cfg = RiskConfig::new(4).unwrap();
        let d = recover_soft_labels(&[0.0; 4], Some(Determination::new(2, true)), &cfg).unwrap();
        assert_eq!(d.as_slice(), &[0.5, 0.5, 1.0, 0.5]);

        let d = recover_soft_labels(
            &[25.0, 0.0, 0.0, 0.0],
            Some(Determination::new(0, false)),
            &cfg,
        )
        .unwrap();
        assert_eq!(d.as_slice()[0], 0.0);

        let cfg2 = RiskConfig::new(2).unwrap();
        let d = recover_soft_labels(&[10.0, -10.0], None, &cfg2).unwrap();
        assert!((d.as_slice()[0] - 0.9999546021312976).abs() < 1e-15);
        assert!((d.as_slice()[1] - 4.5397868702434395e-5).abs() < 1e-18);

        assert!(recover_soft_labels(&[0.0; 4], Some(Determination::new(4, true)), &cfg).is_err());
        assert!(recover_soft_labels(&[f64::NAN, 0.0, 0.0, 0.0], None, &cfg).is_err());
    }

    #[test]
    fn corrected_weights_are_one_over_k() {
        let cfg = RiskConfig::new(20).unwrap();
        let probs = vec![0.3; 20];
        let d = soft(&[0.4; 20]);
        let dets = [
            Determination::new(3, true),
            Determination::new(5, false),
            Determination::new(7, false),
        ];
        let batch: Vec<_> = dets
            .iter()
            .map(|&det| RiskSample {
                probs: &probs,
                soft: &d,
                det,
                gamma_conditional: None,
            })
            .collect();
        let terms = risk_terms(&batch, &cfg).unwrap();
        // Weight 1/20 = 0.05, divided by partition sizes 1 and 2.
        assert!((terms[0].coefficient - 0.05).abs() < 1e-17);
        assert!((terms[1].coefficient - 0.025).abs() < 1e-17);
        let h = expected_loss(&probs, &d, EPS).unwrap();
        let risk = determined_batch_risk(&batch, &cfg).unwrap();
        assert!((risk - (0.05 * h + 0.05 * h)).abs() < 1e-12);
    }

    #[test]
    fn single_perfect_sample_has_near_zero_risk() {
        let cfg = RiskConfig::new(1).unwrap();
        let probs = [1.0 - EPS];
        let d = soft(&[1.0]);
        let batch = [RiskSample {
            probs: &probs,
            soft: &d,
            det: Determination::new(0, true),
            gamma_conditional: None,
        }];
        assert!(determined_batch_risk(&batch, &cfg).unwrap() < 1e-6);
    }

    #[test]
    fn empty_partition_contributes_nothing() {
        let cfg = RiskConfig::new(3).unwrap();
        let probs = [0.2, 0.3, 0.4];
        let d = soft(&[0.0, 0.3, 0.4]);
        let batch = [RiskSample {
            probs: &probs,
            soft: &d,
            det: Determination::new(0, false),
            gamma_conditional: None,
        }];
        let h = expected_loss(&probs, &d, EPS).unwrap();
        assert!((determined_batch_risk(&batch, &cfg).unwrap() - h / 3.0).abs() < 1e-15);
        assert!(determined_batch_risk(&[], &cfg).is_err());
    }

    #[test]
    fn estimated_weights_clamp_the_denominator() {
        let cfg = RiskConfig::new(2)
            .unwrap()
            .with_weighting(Weighting::Estimated);
        let probs = [0.5, 0.5];
        let d = soft(&[1.0, 0.5]);
        let sample = RiskSample {
            probs: &probs,
            soft: &d,
            det: Determination::new(0, true),
            gamma_conditional: Some(0.0),
        };
        let terms = risk_terms(&[sample], &cfg).unwrap();
        assert!((terms[0].coefficient - 1.0 / (EPS * 2.0)).abs() / terms[0].coefficient < 1e-12);
        assert!(determined_batch_risk(&[sample], &cfg).unwrap().is_finite());
    }

    #[test]
    fn oracle_mode_requires_the_true_conditional() {
        let cfg = RiskConfig::new(2)
            .unwrap()
            .with_weighting(Weighting::Oracle);
        let probs = [0.5, 0.5];
        let d = soft(&[0.3, 0.5]);
        let mut sample = RiskSample {
            probs: &probs,
            soft: &d,
            det: Determination::new(0, true),
            gamma_conditional: None,
        };
        assert!(risk_terms(&[sample], &cfg).is_err());
        sample.gamma_conditional = Some(0.3);
        let risk = determined_batch_risk(&[sample], &cfg).unwrap();
        // One positive sample: k·(1/1)·1 · (1/(0.3·2)) · 0.3 · H(f, (1, 0.5)) = H(f, (1, 0.5)).
        let h = expected_loss(&probs, &soft(&[1.0, 0.5]), EPS).unwrap();
        assert!((risk - h).abs() < 1e-14);
    }

    #[test]
    fn restricted_losses_partition_the_expected_loss() {
        let probs = [0.1, 0.6, 0.85];
        let d = soft(&[0.2, 0.7, 0.4]);
        let h = expected_loss(&probs, &d, EPS).unwrap();
        for gamma in 0..3 {
            let on = restricted_expected_loss(&probs, &d, Determination::new(gamma, true), EPS);
            let off = restricted_expected_loss(&probs, &d, Determination::new(gamma, false), EPS);
            assert!((on.unwrap() + off.unwrap() - h).abs() < 1e-14);
        }
    }

    #[test]
    fn config_validation() {
        assert!(RiskConfig::new(0).is_err());
        assert!(RiskConfig::new(3).unwrap().with_epsilon(0.5).is_err());
        assert!(RiskConfig::new(3).unwrap().with_epsilon(0.0).is_err());
        assert_eq!("oracle".parse::<Weighting>().unwrap(), Weighting::Oracle);
        assert!("other".parse::<Weighting>().is_err());
    }

    proptest! {
        #[test]
        fn expected_loss_is_nonnegative_and_finite(
            pairs in prop::collection::vec((-50.0f64..50.0, 0.0f64..=1.0), 1..12),
        ) {
            let probs: Vec<f64> = pairs.iter().map(|(z, _)| sigmoid(*z)).collect();
            let d = SoftLabels::new(pairs.iter().map(|(_, d)| *d).collect()).unwrap();
            let h = expected_loss(&probs, &d, EPS).unwrap();
            prop_assert!(h >= 0.0 && h.is_finite());
        }

        #[test]
        fn correction_is_exact(
            logits in prop::collection::vec(-1e6f64..1e6, 1..10),
            gamma_seed in 0usize..1000,
            value: bool,
        ) {
            let cfg = RiskConfig::new(logits.len()).unwrap();
            let det = Determination::new(gamma_seed % logits.len(), value);
            let d = recover_soft_labels(&logits, Some(det), &cfg).unwrap();
            prop_assert_eq!(d.as_slice()[det.gamma], if value { 1.0 } else { 0.0 });
            prop_assert!(d.as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn expected_loss_is_minimized_at_the_soft_label() {
        // k = 1 grid search: argmin over f of H(f, d) is f = d.
        for &d in &[0.05, 0.2, 0.5, 0.73, 0.96] {
            let s = soft(&[d]);
            let best = (1..1000)
                .map(|i| i as f64 / 1000.0)
                .min_by(|a, b| {
                    let ha = expected_loss(&[*a], &s, EPS).unwrap();
                    let hb = expected_loss(&[*b], &s, EPS).unwrap();
                    ha.total_cmp(&hb)
                })
                .unwrap();
            assert!((best - d).abs() <= 1e-3 + 1e-12, "d = {d}, argmin = {best}");
        }
    }
}
