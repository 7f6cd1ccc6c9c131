//! Class vocabulary, the `N × D` text embedding bank and source selection.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::encoder_hub::{SyntheticTextEncoder, TextInput};
use crate::{Result, Scalar, TvslError};

/// Prompt lengths supported by the ablation harness.
pub const PROMPT_LENGTHS: [usize; 6] = [0, 2, 4, 8, 16, 32];

/// Ordered, duplicate-free list of class names; position is the class index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct ClassVocabulary {
    names: Vec<String>,
}

impl ClassVocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.is_empty() {
            return Err(TvslError::Input("vocabulary is empty".into()));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.trim().is_empty() {
                return Err(TvslError::Input("blank class name".into()));
            }
            if !seen.insert(n.as_str()) {
                return Err(TvslError::Input(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// One class per line; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(text.lines().map(str::trim).filter(|l| !l.is_empty()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.names.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
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

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn resolve(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| TvslError::UnknownClass(name.to_string()))
    }

    /// Sub-vocabulary with the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.names[i].clone()))
    }
}

impl TryFrom<Vec<String>> for ClassVocabulary {
    type Error = TvslError;

    fn try_from(names: Vec<String>) -> Result<Self> {
        Self::new(names)
    }
}

impl From<ClassVocabulary> for Vec<String> {
    fn from(v: ClassVocabulary) -> Self {
        v.names
    }
}

/// Learnable context tokens shared by every class (`L × D`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptContext<T> {
    context: Array2<T>,
}

impl<T: Scalar> PromptContext<T> {
    pub fn empty(dim: usize) -> Self {
        Self { context: Array2::zeros((0, dim)) }
    }

    pub fn from_array(context: Array2<T>) -> Self {
        Self { context }
    }

    /// Context tokens drawn from `N(0, std²)`.
    pub fn random(length: usize, dim: usize, std: f64, rng: &mut impl Rng) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let context = Array2::from_shape_simple_fn((length, dim), || T::of(dist.sample(rng)));
        Self { context }
    }

    pub fn len(&self) -> usize {
        self.context.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.context.nrows() == 0
    }

    pub fn width(&self) -> usize {
        self.context.ncols()
    }

    pub fn tokens(&self) -> &Array2<T> {
        &self.context
    }

    /// Mean context token; zero when the context is empty.
    pub fn mean_token(&self) -> Array1<T> {
        if self.is_empty() {
            return Array1::zeros(self.width());
        }
        self.context.mean_axis(Axis(0)).unwrap()
    }
}

/// `N × D` matrix whose row `i` embeds vocabulary class `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingBank<T> {
    matrix: Array2<T>,
    vocab: ClassVocabulary,
}

impl<T: Scalar> TextEmbeddingBank<T> {
    pub fn from_parts(matrix: Array2<T>, vocab: ClassVocabulary) -> Result<Self> {
        if matrix.nrows() != vocab.len() {
            return Err(TvslError::Shape(format!(
                "bank has {} rows for {} classes",
                matrix.nrows(),
                vocab.len()
            )));
        }
        if matrix.iter().any(|v| !v.is_finite()) {
            return Err(TvslError::Input("non-finite text embedding".into()));
        }
        Ok(Self { matrix, vocab })
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub fn vocab(&self) -> &ClassVocabulary {
        &self.vocab
    }

    pub fn len(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.matrix.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn row(&self, i: usize) -> Array1<T> {
        self.matrix.row(i).to_owned()
    }
}

/// Encodes every class name (after applying `template`, where `{}` is the
/// class name) without any prompt context.
pub fn encode_class_names<T: Scalar>(
    encoder: &SyntheticTextEncoder<T>,
    vocab: &ClassVocabulary,
    template: &str,
) -> Result<Array2<T>> {
    let mut out = Array2::zeros((vocab.len(), encoder.dim()));
    for (i, name) in vocab.names().iter().enumerate() {
        let text = TextInput::new(template.replace("{}", name))?;
        out.row_mut(i).assign(&encoder.base_embedding(&text));
    }
    Ok(out)
}

/// Adds the shared prompt context to plain class-name encodings.
pub fn apply_prompt<T: Scalar>(base: &Array2<T>, prompt: &Array2<T>) -> Array2<T> {
    if prompt.nrows() == 0 {
        return base.clone();
    }
    let shift = prompt.mean_axis(Axis(0)).unwrap();
    base + &shift.insert_axis(Axis(0))
}

/// Gradient of the prompt context given the gradient of the bank.
pub fn apply_prompt_backward<T: Scalar>(d_bank: &Array2<T>, prompt_len: usize) -> Array2<T> {
    let dim = d_bank.ncols();
    if prompt_len == 0 {
        return Array2::zeros((0, dim));
    }
    let per_token = d_bank.sum_axis(Axis(0)) / T::from_usize(prompt_len).unwrap();
    per_token
        .insert_axis(Axis(0))
        .broadcast((prompt_len, dim))
        .unwrap()
        .to_owned()
}

/// Builds the bank by running each class name through the text encoder.
pub fn build_bank<T: Scalar>(
    encoder: &SyntheticTextEncoder<T>,
    vocab: &ClassVocabulary,
    prompt: Option<&PromptContext<T>>,
    template: &str,
    zero_shot: bool,
) -> Result<TextEmbeddingBank<T>> {
    let mut matrix = Array2::zeros((vocab.len(), encoder.dim()));
    for (i, name) in vocab.names().iter().enumerate() {
        let text = TextInput::new(template.replace("{}", name))?;
        matrix.row_mut(i).assign(&encoder.encode(&text, prompt, zero_shot)?);
    }
    TextEmbeddingBank::from_parts(matrix, vocab.clone())
}

/// Text embeddings of the positively labelled classes, in vocabulary order.
pub fn select_sources<T: Scalar>(
    bank: &TextEmbeddingBank<T>,
    labels: &[bool],
) -> Result<Vec<(usize, Array1<T>)>> {
    if labels.len() != bank.len() {
        return Err(TvslError::Shape(format!(
            "{} labels for a bank of {} classes",
            labels.len(),
            bank.len()
        )));
    }
    let picked: Vec<_> = labels
        .iter()
        .enumerate()
        .filter(|(_, &y)| y)
        .map(|(i, _)| (i, bank.row(i)))
        .collect();
    if picked.is_empty() {
        return Err(TvslError::EmptySelection);
    }
    Ok(picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn music_vocab() -> ClassVocabulary {
        ClassVocabulary::new([
            "accordion", "acoustic guitar", "cello", "clarinet", "erhu", "flute", "saxophone",
            "trumpet", "tuba", "violin", "xylophone",
        ])
        .unwrap()
    }

    #[test]
    fn eleven_class_bank() {
        let enc = SyntheticTextEncoder::<f64>::new(16, 1);
        let bank = build_bank(&enc, &music_vocab(), None, "{}", false).unwrap();
        assert_eq!(bank.matrix().dim(), (11, 16));
    }

    #[test]
    fn empty_prompt_equals_plain_encoding() {
        let enc = SyntheticTextEncoder::<f64>::new(16, 1);
        let vocab = music_vocab();
        let plain = build_bank(&enc, &vocab, None, "{}", false).unwrap();
        let empty = PromptContext::empty(16);
        let with = build_bank(&enc, &vocab, Some(&empty), "{}", false).unwrap();
        assert_eq!(plain, with);
        assert_eq!(plain.matrix(), &encode_class_names(&enc, &vocab, "{}").unwrap());
    }

    #[test]
    fn prompt_shifts_embeddings_and_matches_apply_prompt() {
        let enc = SyntheticTextEncoder::<f64>::new(16, 1);
        let vocab = music_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let prompt = PromptContext::random(8, 16, 0.02, &mut rng);
        let plain = build_bank(&enc, &vocab, None, "{}", false).unwrap();
        let with = build_bank(&enc, &vocab, Some(&prompt), "{}", false).unwrap();
        assert_ne!(plain.matrix(), with.matrix());
        let via_apply = apply_prompt(plain.matrix(), prompt.tokens());
        assert!((&via_apply - with.matrix()).iter().all(|d| d.abs() < 1e-15));
        assert!(matches!(
            build_bank(&enc, &vocab, Some(&prompt), "{}", true),
            Err(TvslError::PromptInZeroShot)
        ));
    }

    #[test]
    fn swapping_vocabulary_entries_swaps_rows() {
        let enc = SyntheticTextEncoder::<f64>::new(16, 1);
        let vocab = music_vocab();
        let mut names = vocab.names().to_vec();
        names.swap(2, 7);
        let swapped = ClassVocabulary::new(names).unwrap();
        let a = build_bank(&enc, &vocab, None, "{}", false).unwrap();
        let b = build_bank(&enc, &swapped, None, "{}", false).unwrap();
        assert_eq!(a.matrix().row(2), b.matrix().row(7));
        assert_eq!(a.matrix().row(7), b.matrix().row(2));
        assert_eq!(a.matrix().row(0), b.matrix().row(0));
    }

    #[test]
    fn select_sources_cases() {
        let enc = SyntheticTextEncoder::<f64>::new(8, 1);
        let names: Vec<String> = (0..221).map(|i| format!("class {i}")).collect();
        let vocab = ClassVocabulary::new(names).unwrap();
        let bank = build_bank(&enc, &vocab, None, "{}", false).unwrap();

        let mut y = vec![false; 221];
        y[17] = true;
        y[140] = true;
        let picked = select_sources(&bank, &y).unwrap();
        assert_eq!(picked.iter().map(|p| p.0).collect::<Vec<_>>(), vec![17, 140]);

        let all = select_sources(&bank, &vec![true; 221]).unwrap();
        assert_eq!(all.len(), 221);

        let mut one = vec![false; 221];
        one[5] = true;
        let single = select_sources(&bank, &one).unwrap();
        assert_eq!(single[0].1, bank.row(5));

        assert!(matches!(select_sources(&bank, &vec![false; 221]), Err(TvslError::EmptySelection)));
    }

    #[test]
    fn vocabulary_rules() {
        assert!(ClassVocabulary::new(Vec::<String>::new()).is_err());
        assert!(ClassVocabulary::new(["a", "b", "a"]).is_err());
        let v = ClassVocabulary::parse("dog barking\n\ncat meowing\n").unwrap();
        assert_eq!(v.len(), 2);
        assert_eq!(v.index_of("cat meowing"), Some(1));
    }

    #[test]
    fn prompt_backward_spreads_bank_gradient() {
        let d_bank = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
        let d_prompt = apply_prompt_backward(&d_bank, 4);
        assert_eq!(d_prompt.dim(), (4, 2));
        // column sums (0+2+4, 1+3+5) divided by L = 4
        assert_eq!(d_prompt.row(3).to_vec(), vec![1.5, 2.25]);
    }
}
