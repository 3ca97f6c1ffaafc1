//! Multi-label and determined-label datasets.
//!
//! A determined label is a single `(gamma, value)` pair per instance: a class
//! `gamma` drawn uniformly from the label space and a binary answer saying
//! whether that class is relevant to the instance.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Binomial, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{ensure_finite, Error, Result};
use crate::io::{write_atomic, EmbeddingTable};
use crate::rng;

/// Ordered, index-addressable set of class names.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(names.len());
        for name in &names {
            if name.is_empty() || !seen.insert(name.as_str()) {
                return Err(Error::InvalidLabelName(name.clone()));
            }
        }
        Ok(Self { names })
    }

    /// Vocabulary `prefix0, prefix1, ...` of size `k`.
    pub fn numbered(prefix: &str, k: usize) -> Self {
        Self {
            names: (0..k).map(|j| format!("{prefix}{j}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn name(&self, index: usize) -> Option<&str> {
        self.names.get(index).map(String::as_str)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// The determined pair: class `gamma` and whether it is relevant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Determination {
    pub gamma: usize,
    pub value: bool,
}

impl Determination {
    pub fn new(gamma: usize, value: bool) -> Self {
        Self { gamma, value }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiLabelInstance {
    pub id: String,
    pub features: Vec<f64>,
    positives: Vec<usize>,
}

impl MultiLabelInstance {
    /// Positives are stored sorted and deduplicated.
    pub fn new(id: impl Into<String>, features: Vec<f64>, mut positives: Vec<usize>) -> Self {
        positives.sort_unstable();
        positives.dedup();
        Self {
            id: id.into(),
            features,
            positives,
        }
    }

    pub fn positives(&self) -> &[usize] {
        &self.positives
    }

    pub fn is_positive(&self, class: usize) -> bool {
        self.positives.binary_search(&class).is_ok()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeterminedInstance {
    pub id: String,
    pub features: Vec<f64>,
    pub determination: Determination,
}

impl DeterminedInstance {
    pub fn new(id: impl Into<String>, features: Vec<f64>, gamma: usize, value: bool) -> Self {
        Self {
            id: id.into(),
            features,
            determination: Determination::new(gamma, value),
        }
    }
}

/// Behaviour shared by the two instance kinds.
pub trait Instance: Sized {
    const KIND: DatasetKind;
    fn id(&self) -> &str;
    fn features(&self) -> &[f64];
    fn features_mut(&mut self) -> &mut Vec<f64>;
    fn check_labels(&self, k: usize) -> Result<()>;
    fn to_line(&self) -> serde_json::Value;
    fn from_line(value: serde_json::Value) -> std::result::Result<Self, String>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Full,
    Determined,
}

#[derive(Serialize, Deserialize)]
struct FullLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    positives: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct DeterminedLine {
    id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    gamma: usize,
    value: u8,
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    k: usize,
    names: Vec<String>,
}

impl Instance for MultiLabelInstance {
    const KIND: DatasetKind = DatasetKind::Full;

    fn id(&self) -> &str {
        &self.id
    }
    fn features(&self) -> &[f64] {
        &self.features
    }
    fn features_mut(&mut self) -> &mut Vec<f64> {
        &mut self.features
    }

    fn check_labels(&self, k: usize) -> Result<()> {
        match self.positives.iter().find(|&&j| j >= k) {
            Some(&index) => Err(Error::LabelOutOfRange { index, k }),
            None => Ok(()),
        }
    }

    fn to_line(&self) -> serde_json::Value {
        serde_json::to_value(FullLine {
            id: self.id.clone(),
            features: Some(self.features.clone()),
            positives: self.positives.clone(),
        })
        .expect("plain struct serializes")
    }

    fn from_line(value: serde_json::Value) -> std::result::Result<Self, String> {
        let line: FullLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        Ok(Self::new(
            line.id,
            line.features.unwrap_or_default(),
            line.positives,
        ))
    }
}

impl Instance for DeterminedInstance {
    const KIND: DatasetKind = DatasetKind::Determined;

    fn id(&self) -> &str {
        &self.id
    }
    fn features(&self) -> &[f64] {
        &self.features
    }
    fn features_mut(&mut self) -> &mut Vec<f64> {
        &mut self.features
    }

    fn check_labels(&self, k: usize) -> Result<()> {
        let gamma = self.determination.gamma;
        if gamma < k {
            Ok(())
        } else {
            Err(Error::LabelOutOfRange { index: gamma, k })
        }
    }

    fn to_line(&self) -> serde_json::Value {
        serde_json::to_value(DeterminedLine {
            id: self.id.clone(),
            features: Some(self.features.clone()),
            gamma: self.determination.gamma,
            value: u8::from(self.determination.value),
        })
        .expect("plain struct serializes")
    }

    fn from_line(value: serde_json::Value) -> std::result::Result<Self, String> {
        let line: DeterminedLine = serde_json::from_value(value).map_err(|e| e.to_string())?;
        let value = match line.value {
            0 => false,
            1 => true,
            other => return Err(format!("value must be 0 or 1, found {other}")),
        };
        Ok(Self::new(
            line.id,
            line.features.unwrap_or_default(),
            line.gamma,
            value,
        ))
    }
}

/// A vocabulary plus instances of one kind. Construction validates label
/// indices, id uniqueness, feature finiteness and a common feature dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    vocabulary: LabelVocabulary,
    instances: Vec<T>,
}

pub type FullDataset = Dataset<MultiLabelInstance>;
pub type DeterminedDataset = Dataset<DeterminedInstance>;

impl<T: Instance> Dataset<T> {
    pub fn new(vocabulary: LabelVocabulary, instances: Vec<T>) -> Result<Self> {
        let k = vocabulary.len();
        let mut ids = HashSet::with_capacity(instances.len());
        let dim = instances.first().map(|x| x.features().len());
        for instance in &instances {
            validate_instance(instance, k, dim)?;
            if !ids.insert(instance.id()) {
                return Err(Error::DuplicateId(instance.id().to_string()));
            }
        }
        Ok(Self {
            vocabulary,
            instances,
        })
    }

    pub fn vocabulary(&self) -> &LabelVocabulary {
        &self.vocabulary
    }

    pub fn k(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn instances(&self) -> &[T] {
        &self.instances
    }

    pub fn into_instances(self) -> Vec<T> {
        self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Feature dimension, or `None` for an empty dataset.
    pub fn feature_dim(&self) -> Option<usize> {
        self.instances.first().map(|x| x.features().len())
    }

    /// JSON-lines encoding: a `{"k", "names"}` header followed by one line
    /// per instance. An empty dataset with an empty vocabulary encodes as the
    /// empty string.
    pub fn to_jsonl(&self) -> String {
        if self.instances.is_empty() && self.vocabulary.is_empty() {
            return String::new();
        }
        let mut out = serde_json::to_string(&HeaderLine {
            k: self.k(),
            names: self.vocabulary.names.clone(),
        })
        .expect("header serializes");
        out.push('\n');
        for instance in &self.instances {
            out.push_str(&instance.to_line().to_string());
            out.push('\n');
        }
        out
    }

    /// Parses the JSON-lines encoding. Instances without inline features take
    /// theirs from `sidecar`, keyed by instance id.
    pub fn from_jsonl(text: &str, sidecar: Option<&EmbeddingTable>) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty());
        let Some((header_no, header)) = lines.next() else {
            return Ok(Self {
                vocabulary: LabelVocabulary::default(),
                instances: Vec::new(),
            });
        };
        let parse_err = |line: usize, message: String| Error::Parse { line, message };
        let vocabulary = parse_header(header_no, header)?;
        let k = vocabulary.len();

        let mut instances = Vec::new();
        let mut ids = HashSet::new();
        let mut dim = None;
        for (line_no, line) in lines {
            let value: serde_json::Value =
                serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
            let inline = value.get("features").is_some();
            let mut instance = T::from_line(value).map_err(|m| parse_err(line_no, m))?;
            if !inline {
                let table = sidecar.ok_or_else(|| {
                    parse_err(line_no, "no features and no sidecar feature file".into())
                })?;
                let vector = table.get(instance.id()).ok_or_else(|| {
                    parse_err(
                        line_no,
                        format!("id {:?} missing from feature file", instance.id()),
                    )
                })?;
                *instance.features_mut() = vector.iter().map(|&v| f64::from(v)).collect();
            }
            validate_instance(&instance, k, dim).map_err(|e| parse_err(line_no, e.to_string()))?;
            dim.get_or_insert(instance.features().len());
            if !ids.insert(instance.id().to_string()) {
                return Err(parse_err(
                    line_no,
                    Error::DuplicateId(instance.id().to_string()).to_string(),
                ));
            }
            instances.push(instance);
        }
        Ok(Self {
            vocabulary,
            instances,
        })
    }

    pub fn load(path: &Path, sidecar: Option<&EmbeddingTable>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_jsonl(&text, sidecar)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }
}

fn parse_header(line: usize, text: &str) -> Result<LabelVocabulary> {
    let parse_err = |message: String| Error::Parse { line, message };
    let header: HeaderLine =
        serde_json::from_str(text).map_err(|e| parse_err(format!("bad header: {e}")))?;
    if header.k != header.names.len() {
        return Err(parse_err(format!(
            "k = {} but {} names",
            header.k,
            header.names.len()
        )));
    }
    LabelVocabulary::new(header.names).map_err(|e| parse_err(e.to_string()))
}

/// Reads only the header of a JSON-lines dataset of either kind.
pub fn load_vocabulary(path: &Path) -> Result<LabelVocabulary> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match text.lines().enumerate().find(|(_, l)| !l.trim().is_empty()) {
        Some((i, header)) => parse_header(i + 1, header),
        None => Ok(LabelVocabulary::default()),
    }
}

fn validate_instance<T: Instance>(instance: &T, k: usize, dim: Option<usize>) -> Result<()> {
    instance.check_labels(k)?;
    ensure_finite(
        &format!("features of {:?}", instance.id()),
        instance.features(),
    )?;
    if let Some(dim) = dim {
        if instance.features().len() != dim {
            return Err(Error::LengthMismatch {
                what: "feature vector",
                expected: dim,
                found: instance.features().len(),
            });
        }
    }
    Ok(())
}

/// Either kind of dataset, as selected at load time.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyDataset {
    Full(FullDataset),
    Determined(DeterminedDataset),
}

pub fn load_dataset(
    path: &Path,
    kind: DatasetKind,
    sidecar: Option<&EmbeddingTable>,
) -> Result<AnyDataset> {
    Ok(match kind {
        DatasetKind::Full => AnyDataset::Full(FullDataset::load(path, sidecar)?),
        DatasetKind::Determined => AnyDataset::Determined(DeterminedDataset::load(path, sidecar)?),
    })
}

/// Draws one determined pair per instance.
///
/// `gamma` is uniform over the label space, drawn from a ChaCha stream keyed
/// by `(seed, instance id)`; `value` is true iff `gamma` is a positive label.
pub fn generate_determined(data: &FullDataset, seed: u64) -> Result<DeterminedDataset> {
    let k = data.k();
    if k == 0 {
        return Err(Error::EmptyVocabulary);
    }
    let instances = data
        .instances()
        .iter()
        .map(|instance| {
            instance.check_labels(k)?;
            let gamma = draw_gamma(seed, &instance.id, k);
            Ok(DeterminedInstance::new(
                instance.id.clone(),
                instance.features.clone(),
                gamma,
                instance.is_positive(gamma),
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        vocabulary: data.vocabulary().clone(),
        instances,
    })
}

pub(crate) fn draw_gamma(seed: u64, id: &str, k: usize) -> usize {
    let mut rng = rng::stream(seed, rng::key_stream(id));
    rng.random_range(0..k as u64) as usize
}

/// Checks `value == (gamma ∈ positives)` against the retained full labels,
/// matching instances by id. Returns the number of instances checked.
pub fn check_consistency(full: &FullDataset, determined: &DeterminedDataset) -> Result<usize> {
    let by_id: std::collections::HashMap<&str, &MultiLabelInstance> = full
        .instances()
        .iter()
        .map(|x| (x.id.as_str(), x))
        .collect();
    let mut checked = 0;
    for instance in determined.instances() {
        let Some(source) = by_id.get(instance.id.as_str()) else {
            continue;
        };
        let det = instance.determination;
        if source.is_positive(det.gamma) != det.value {
            return Err(Error::Degenerate(format!(
                "instance {:?}: value {} disagrees with positives {:?} at gamma {}",
                instance.id,
                u8::from(det.value),
                source.positives(),
                det.gamma
            )));
        }
        checked += 1;
    }
    Ok(checked)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DatasetStats {
    pub n: usize,
    pub k: usize,
    pub positive_count: usize,
    pub positive_fraction: f64,
    pub gamma_histogram: Vec<usize>,
    /// Pearson statistic of the gamma histogram against the uniform law.
    pub chi_square: f64,
    pub chi_square_dof: usize,
    pub chi_square_p_value: f64,
}

pub fn compute_stats(data: &DeterminedDataset) -> Result<DatasetStats> {
    let n = data.len();
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let k = data.k();
    let mut gamma_histogram = vec![0usize; k];
    let mut positive_count = 0;
    for instance in data.instances() {
        gamma_histogram[instance.determination.gamma] += 1;
        positive_count += usize::from(instance.determination.value);
    }
    let expected = n as f64 / k as f64;
    let chi_square: f64 = gamma_histogram
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let dof = k - 1;
    let chi_square_p_value = if dof == 0 {
        1.0
    } else {
        ChiSquared::new(dof as f64)
            .expect("positive degrees of freedom")
            .sf(chi_square)
    };
    Ok(DatasetStats {
        n,
        k,
        positive_count,
        positive_fraction: positive_count as f64 / n as f64,
        gamma_histogram,
        chi_square,
        chi_square_dof: dof,
        chi_square_p_value,
    })
}

/// Label-count model for synthetic full datasets: every instance has
/// `1 + Binomial(k - 1, (mean_labels - 1) / (k - 1))` positives chosen
/// uniformly without replacement, so `E|Y| = mean_labels` exactly. Features
/// are standard normal and carry no signal.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LabelCountConfig {
    pub n: usize,
    pub k: usize,
    pub feature_dim: usize,
    pub mean_labels: f64,
    pub seed: u64,
}

pub fn synthesize_label_sets(config: &LabelCountConfig) -> Result<FullDataset> {
    let LabelCountConfig {
        n,
        k,
        feature_dim,
        mean_labels,
        seed,
    } = *config;
    if k == 0 {
        return Err(Error::EmptyVocabulary);
    }
    if !(1.0..=k as f64).contains(&mean_labels) {
        return Err(Error::InvalidConfig(format!(
            "mean_labels must lie in [1, {k}], got {mean_labels}"
        )));
    }
    let extra = if k > 1 {
        Some(
            Binomial::new((k - 1) as u64, (mean_labels - 1.0) / (k - 1) as f64)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?,
        )
    } else {
        None
    };
    let instances = (0..n)
        .map(|i| {
            let mut rng = rng::stream(seed, rng::STREAM_LABELS + ((i as u64) << 32));
            let count = 1 + extra.map_or(0, |b| b.sample(&mut rng) as usize);
            let positives = rand::seq::index::sample(&mut rng, k, count).into_vec();
            let features = (0..feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            MultiLabelInstance::new(format!("x{i:06}"), features, positives)
        })
        .collect();
    Dataset::new(LabelVocabulary::numbered("class", k), instances)
}
