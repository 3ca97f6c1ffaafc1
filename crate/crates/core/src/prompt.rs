//! Similarity-based prompts.
//!
//! Each target class gets a prompt `"a photo of a {class}"`, optionally
//! extended with `", similar to z₁, …, z_λ"` where the `zᵢ` are the labels of
//! a large vocabulary most similar to the class. The embedded prompt is the
//! class prototype the model scores against. The number of similar labels
//! `λⱼ ≤ σ` is chosen per class by minimizing the training objective on a
//! batch with the model fixed.

use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::LabelVocabulary;
use crate::error::{Error, Result};
use crate::io::EmbeddingTable;
use crate::model::{dot, normalize, ModelParams};
use crate::objective::{Example, Objective};

/// Rendered prompt text together with its token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prompt {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Prompt {
    pub fn new(text: impl Into<String>) -> Self {
        let text = text.into();
        let tokens = text
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect();
        Self { text, tokens }
    }
}

/// Deterministic, total map from prompts to vectors of a fixed dimension.
/// Outputs need not be normalized; callers normalize.
pub trait EmbeddingProvider {
    fn dim(&self) -> usize;
    fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>>;
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for &P {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        (**self).embed(prompt)
    }
}

impl<P: EmbeddingProvider + ?Sized> EmbeddingProvider for Box<P> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        (**self).embed(prompt)
    }
}

/// Stand-in text encoder: every token maps to a Gaussian vector seeded by a
/// hash of `(seed, token)`, and a prompt embeds as the normalized mean of its
/// token vectors. Insensitive to token order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticProvider {
    pub dim: usize,
    pub seed: u64,
}

impl SyntheticProvider {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidConfig(
                "embedding dimension must be positive".into(),
            ));
        }
        Ok(Self { dim, seed })
    }

    pub fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest = hasher.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::from_seed(key);
        (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        let empty = [String::new()];
        let tokens: &[String] = if prompt.tokens.is_empty() {
            &empty
        } else {
            &prompt.tokens
        };
        let mut sum = vec![0.0; self.dim];
        for token in tokens {
            for (s, v) in sum.iter_mut().zip(self.token_vector(token)) {
                *s += v;
            }
        }
        let n = tokens.len() as f64;
        sum.iter_mut().for_each(|s| *s /= n);
        normalize(&mut sum);
        Ok(sum)
    }
}

/// Precomputed embeddings keyed by the exact prompt text.
#[derive(Clone, Debug, PartialEq)]
pub struct FileProvider {
    table: EmbeddingTable,
}

impl FileProvider {
    pub fn new(table: EmbeddingTable) -> Self {
        Self { table }
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }
}

impl EmbeddingProvider for FileProvider {
    fn dim(&self) -> usize {
        self.table.dim()
    }

    fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
        self.table
            .get(&prompt.text)
            .map(|v| v.iter().map(|&x| f64::from(x)).collect())
            .ok_or_else(|| Error::MissingEmbedding(prompt.text.clone()))
    }
}

pub const CLASS_SLOT: &str = "{class}";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    prefix: String,
    connector: String,
    separator: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self {
            prefix: "a photo of a {class}".into(),
            connector: "similar to".into(),
            separator: ", ".into(),
        }
    }
}

impl PromptTemplate {
    pub fn new(
        prefix: impl Into<String>,
        connector: impl Into<String>,
        separator: impl Into<String>,
    ) -> Result<Self> {
        let prefix = prefix.into();
        if prefix.matches(CLASS_SLOT).count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "prompt prefix {prefix:?} must contain exactly one {CLASS_SLOT} slot"
            )));
        }
        Ok(Self {
            prefix,
            connector: connector.into(),
            separator: separator.into(),
        })
    }

    /// `prefix` alone for no similar labels, otherwise
    /// `prefix + separator + connector + " " + labels joined by separator`.
    pub fn render<S: AsRef<str>>(&self, class_name: &str, similar: &[S]) -> Result<Prompt> {
        if class_name.is_empty() {
            return Err(Error::InvalidLabelName(class_name.to_string()));
        }
        let mut text = self.prefix.replace(CLASS_SLOT, class_name);
        if !similar.is_empty() {
            text.push_str(&self.separator);
            text.push_str(&self.connector);
            text.push(' ');
            let labels: Vec<&str> = similar.iter().map(AsRef::as_ref).collect();
            text.push_str(&labels.join(&self.separator));
        }
        Ok(Prompt::new(text))
    }
}

/// Embeds the composed prompt for `class_name` with the given similar labels
/// and returns a unit vector.
pub fn embed_prompt<S: AsRef<str>>(
    provider: &dyn EmbeddingProvider,
    template: &PromptTemplate,
    class_name: &str,
    similar: &[S],
) -> Result<Vec<f64>> {
    let prompt = template.render(class_name, similar)?;
    unit_embedding(provider, &prompt)
}

fn unit_embedding(provider: &dyn EmbeddingProvider, prompt: &Prompt) -> Result<Vec<f64>> {
    let mut v = provider.embed(prompt)?;
    if v.len() != provider.dim() {
        return Err(Error::LengthMismatch {
            what: "provider output",
            expected: provider.dim(),
            found: v.len(),
        });
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("embedding of {:?}", prompt.text)));
    }
    if normalize(&mut v) == 0.0 {
        return Err(Error::Degenerate(format!(
            "zero embedding for {:?}",
            prompt.text
        )));
    }
    Ok(v)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarLabel {
    pub label: String,
    pub similarity: f64,
}

/// Per target class, up to `σ` vocabulary labels by descending similarity of
/// their bare prefix prompts (ties by label ascending).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarLabelIndex {
    pub sigma: usize,
    pub lists: Vec<Vec<SimilarLabel>>,
}

impl SimilarLabelIndex {
    /// Number of candidates available to class `j`.
    pub fn available(&self, class: usize) -> usize {
        self.lists.get(class).map_or(0, Vec::len)
    }

    pub fn labels(&self, class: usize, lambda: usize) -> Vec<&str> {
        self.lists[class][..lambda]
            .iter()
            .map(|s| s.label.as_str())
            .collect()
    }
}

fn by_similarity(a: &SimilarLabel, b: &SimilarLabel) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then_with(|| a.label.cmp(&b.label))
}

pub fn build_similarity_index(
    provider: &dyn EmbeddingProvider,
    template: &PromptTemplate,
    targets: &LabelVocabulary,
    vocabulary: &[String],
    sigma: usize,
) -> Result<SimilarLabelIndex> {
    // Deduplicated and sorted, so input order cannot matter.
    let vocabulary: BTreeSet<&str> = vocabulary
        .iter()
        .map(String::as_str)
        .filter(|s| !s.is_empty())
        .collect();
    let none: [&str; 0] = [];
    let vocab_embeddings = vocabulary
        .iter()
        .map(|&label| Ok((label, embed_prompt(provider, template, label, &none)?)))
        .collect::<Result<Vec<_>>>()?;

    let lists = targets
        .names()
        .iter()
        .map(|target| {
            let u = embed_prompt(provider, template, target, &none)?;
            let mut scored: Vec<SimilarLabel> = vocab_embeddings
                .iter()
                .filter(|(label, _)| *label != target.as_str())
                .map(|(label, v)| SimilarLabel {
                    label: (*label).to_string(),
                    similarity: dot(&u, v),
                })
                .collect();
            scored.sort_by(by_similarity);
            scored.truncate(sigma);
            Ok(scored)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SimilarLabelIndex { sigma, lists })
}

/// Selected `λⱼ` per class and the resulting unit prototypes (`k × m`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptState {
    pub lambdas: Vec<usize>,
    pub dim: usize,
    pub prototypes: Vec<f64>,
}

impl PromptState {
    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class * self.dim..(class + 1) * self.dim]
    }

    /// Prompt state with `λⱼ = 0` for every class.
    pub fn initial(
        provider: &dyn EmbeddingProvider,
        template: &PromptTemplate,
        targets: &LabelVocabulary,
        index: &SimilarLabelIndex,
    ) -> Result<Self> {
        let lambdas = vec![0; targets.len()];
        let prototypes = compose_prototypes(provider, template, targets, index, &lambdas)?;
        Ok(Self {
            lambdas,
            dim: provider.dim(),
            prototypes,
        })
    }
}

/// Row `j` is the unit embedding of class `j`'s prompt with its first `λⱼ`
/// similar labels.
pub fn compose_prototypes(
    provider: &dyn EmbeddingProvider,
    template: &PromptTemplate,
    targets: &LabelVocabulary,
    index: &SimilarLabelIndex,
    lambdas: &[usize],
) -> Result<Vec<f64>> {
    check_lambdas(targets, index, lambdas)?;
    let mut out = Vec::with_capacity(targets.len() * provider.dim());
    for (j, (name, &lambda)) in targets.names().iter().zip(lambdas).enumerate() {
        out.extend(embed_prompt(
            provider,
            template,
            name,
            &index.labels(j, lambda),
        )?);
    }
    Ok(out)
}

fn check_lambdas(
    targets: &LabelVocabulary,
    index: &SimilarLabelIndex,
    lambdas: &[usize],
) -> Result<()> {
    if lambdas.len() != targets.len() || index.lists.len() != targets.len() {
        return Err(Error::LengthMismatch {
            what: "lambdas / similarity lists",
            expected: targets.len(),
            found: lambdas.len().min(index.lists.len()),
        });
    }
    for (j, &lambda) in lambdas.iter().enumerate() {
        if lambda > index.available(j) {
            return Err(Error::InvalidConfig(format!(
                "lambda {lambda} for class {j} exceeds its {} similar labels",
                index.available(j)
            )));
        }
    }
    Ok(())
}

/// Everything prompt selection needs besides the model and the batch.
pub struct PromptContext<'a> {
    pub provider: &'a dyn EmbeddingProvider,
    pub template: &'a PromptTemplate,
    pub targets: &'a LabelVocabulary,
    pub index: &'a SimilarLabelIndex,
}

impl PromptContext<'_> {
    /// Unit prototype rows for `λ = 0..=min(σ, available)` per class.
    pub fn candidate_rows(&self, sigma: usize) -> Result<Vec<Vec<Vec<f64>>>> {
        self.targets
            .names()
            .iter()
            .enumerate()
            .map(|(j, name)| {
                (0..=sigma.min(self.index.available(j)))
                    .map(|lambda| {
                        embed_prompt(
                            self.provider,
                            self.template,
                            name,
                            &self.index.labels(j, lambda),
                        )
                    })
                    .collect()
            })
            .collect()
    }
}

/// Chooses `λⱼ ∈ {0, …, min(σ, available)}` for each class in index order,
/// holding the model and the other classes fixed, keeping the candidate of
/// lowest batch objective (ties go to the smaller `λ`). Selection starts from
/// `current`, so the returned state never has a higher batch objective.
pub fn select_optimal_prompt(
    params: &ModelParams,
    batch: &[Example<'_>],
    context: &PromptContext<'_>,
    sigma: usize,
    objective: &Objective,
    current: &PromptState,
) -> Result<PromptState> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    params.validate()?;
    params.check_classes(context.targets.len())?;
    check_lambdas(context.targets, context.index, &current.lambdas)?;
    let m = params.embed_dim();
    if context.provider.dim() != m {
        return Err(Error::DimensionMismatch {
            what: "embedding dimension",
            left: "provider dim",
            left_value: context.provider.dim(),
            right: "model m",
            right_value: m,
        });
    }
    let candidates = context.candidate_rows(sigma)?;
    let projections = params.project_batch(batch)?;

    let mut lambdas = current.lambdas.clone();
    let mut prototypes = current.prototypes.clone();
    for (j, rows) in candidates.iter().enumerate() {
        if rows.len() == 1 && lambdas[j] == 0 {
            continue;
        }
        let mut best: Option<(f64, usize)> = None;
        for (lambda, row) in rows.iter().enumerate() {
            prototypes[j * m..(j + 1) * m].copy_from_slice(row);
            let loss =
                params.objective_loss_projected(&projections, &prototypes, batch, objective)?;
            if best.is_none_or(|(b, _)| loss < b) {
                best = Some((loss, lambda));
            }
        }
        let (_, lambda) = best.expect("at least the λ = 0 candidate");
        lambdas[j] = lambda;
        prototypes[j * m..(j + 1) * m].copy_from_slice(&rows[lambda]);
    }
    Ok(PromptState {
        lambdas,
        dim: m,
        prototypes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn provider() -> SyntheticProvider {
        SyntheticProvider::new(16, 7).unwrap()
    }

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn bare_prefix_for_zero_lambda() {
        let t = PromptTemplate::default();
        let none: [&str; 0] = [];
        assert_eq!(t.render("dog", &none).unwrap().text, "a photo of a dog");
        let p = t.render("dog", &["wolf", "fox"]).unwrap();
        assert_eq!(p.text, "a photo of a dog, similar to wolf, fox");
        assert_eq!(
            p.tokens,
            ["a", "photo", "of", "a", "dog", "similar", "to", "wolf", "fox"]
        );
        let e = embed_prompt(&provider(), &t, "dog", &none).unwrap();
        let direct = provider().embed(&Prompt::new("a photo of a dog")).unwrap();
        for (x, y) in e.iter().zip(&direct) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!(embed_prompt(&provider(), &t, "", &none).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_unit() {
        let t = PromptTemplate::default();
        let a = embed_prompt(&provider(), &t, "cat", &["lion"]).unwrap();
        let b = embed_prompt(&provider(), &t, "cat", &["lion"]).unwrap();
        assert_eq!(a, b);
        assert!((norm(&a) - 1.0).abs() < 1e-12);
        assert_ne!(a, embed_prompt(&provider(), &t, "cat", &["tiger"]).unwrap());
    }

    #[test]
    fn synthetic_provider_ignores_similar_label_order() {
        // Normalized token means cannot see order; recorded as provider behaviour.
        let t = PromptTemplate::default();
        let ab = embed_prompt(&provider(), &t, "cat", &["lion", "tiger"]).unwrap();
        let ba = embed_prompt(&provider(), &t, "cat", &["tiger", "lion"]).unwrap();
        for (x, y) in ab.iter().zip(&ba) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn template_needs_one_slot() {
        assert!(PromptTemplate::new("a photo", "similar to", ", ").is_err());
        assert!(PromptTemplate::new("{class} {class}", "similar to", ", ").is_err());
        assert!(PromptTemplate::new("an image of {class}", "like", "; ").is_ok());
    }

    #[test]
    fn file_provider_is_keyed_by_prompt_text() {
        let mut table = EmbeddingTable::new(2);
        table.insert("a photo of a dog", vec![3.0, 4.0]).unwrap();
        let p = FileProvider::new(table);
        let none: [&str; 0] = [];
        let e = embed_prompt(&p, &PromptTemplate::default(), "dog", &none).unwrap();
        assert!((e[0] - 0.6).abs() < 1e-7 && (e[1] - 0.8).abs() < 1e-7);
        assert!(matches!(
            embed_prompt(&p, &PromptTemplate::default(), "cat", &none),
            Err(Error::MissingEmbedding(_))
        ));
    }

    #[test]
    fn index_excludes_self_and_ranks_identical_embedding_first() {
        // A provider in which "puppy" and "dog" embed identically.
        struct Alias(SyntheticProvider);
        impl EmbeddingProvider for Alias {
            fn dim(&self) -> usize {
                self.0.dim
            }
            fn embed(&self, prompt: &Prompt) -> Result<Vec<f64>> {
                self.0
                    .embed(&Prompt::new(prompt.text.replace("puppy", "dog")))
            }
        }
        let targets = LabelVocabulary::new(vec!["dog".into(), "cat".into()]).unwrap();
        let vocab: Vec<String> = ["dog", "cat", "puppy", "car", "tree"]
            .map(String::from)
            .to_vec();
        let index = build_similarity_index(
            &Alias(provider()),
            &PromptTemplate::default(),
            &targets,
            &vocab,
            3,
        )
        .unwrap();
        assert!(index.lists[0].iter().all(|s| s.label != "dog"));
        assert!(index.lists[1].iter().all(|s| s.label != "cat"));
        assert_eq!(index.lists[0][0].label, "puppy");
        assert!((index.lists[0][0].similarity - 1.0).abs() < 1e-12);
        assert_eq!(index.lists[0].len(), 3);
    }

    #[test]
    fn index_ignores_vocabulary_order_and_duplicates() {
        let targets = LabelVocabulary::new(vec!["dog".into(), "cat".into()]).unwrap();
        let vocab: Vec<String> = (0..30).map(|i| format!("w{i}")).collect();
        let mut shuffled = vocab.clone();
        shuffled.reverse();
        shuffled.push("w3".into());
        let t = PromptTemplate::default();
        let a = build_similarity_index(&provider(), &t, &targets, &vocab, 5).unwrap();
        let b = build_similarity_index(&provider(), &t, &targets, &shuffled, 5).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn compose_prototypes_is_local_per_class() {
        let targets = LabelVocabulary::new(vec!["dog".into(), "cat".into(), "car".into()]).unwrap();
        let vocab: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let t = PromptTemplate::default();
        let p = provider();
        let index = build_similarity_index(&p, &t, &targets, &vocab, 3).unwrap();
        let base = compose_prototypes(&p, &t, &targets, &index, &[0, 0, 0]).unwrap();
        let none: [&str; 0] = [];
        for (j, name) in targets.names().iter().enumerate() {
            assert_eq!(
                &base[j * 16..(j + 1) * 16],
                &embed_prompt(&p, &t, name, &none).unwrap()[..]
            );
        }
        let bumped = compose_prototypes(&p, &t, &targets, &index, &[0, 2, 0]).unwrap();
        assert_eq!(base[..16], bumped[..16]);
        assert_ne!(base[16..32], bumped[16..32]);
        assert_eq!(base[32..], bumped[32..]);
        for row in bumped.chunks(16) {
            assert!((norm(row) - 1.0).abs() < 1e-6);
        }
        assert!(compose_prototypes(&p, &t, &targets, &index, &[0, 4, 0]).is_err());
    }
}
