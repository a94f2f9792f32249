//! Dataset ingestion and evaluation metrics for desk-scale classification
//! and sequence-labelling tasks.
//!
//! Tagging is scored with token-level micro F1 that discards the `O` tag:
//! a position is a true positive when prediction and gold agree on a non-O
//! tag, a false positive when a wrong non-O tag was predicted, and a false
//! negative when a non-O gold tag was missed. Span-level chunk scoring is
//! deliberately not implemented.

use std::fs;
use std::path::Path;

use ndarray::{Array1, ArrayView1};

use crate::error::{Error, Result};

/// One classification example: a token sequence and a dense label index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassifiedExample {
    pub tokens: Vec<String>,
    pub label: usize,
}

/// One tagged sentence with an aligned tag-id sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaggedSentence {
    pub tokens: Vec<String>,
    pub tags: Vec<String>,
    pub tag_ids: Vec<usize>,
}

/// A classification dataset plus its label inventory (first-seen order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassificationData {
    pub examples: Vec<ClassifiedExample>,
    pub labels: Vec<String>,
}

/// A tagging dataset plus its tag inventory (first-seen order).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagData {
    pub sentences: Vec<TaggedSentence>,
    pub tags: Vec<String>,
}

impl TagData {
    /// Index of the `O` tag, if present in the inventory.
    pub fn o_tag(&self) -> Option<usize> {
        self.tags.iter().position(|t| t == "O")
    }
}

/// Either kind of supervised dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskData {
    Classification(ClassificationData),
    Tagging(TagData),
}

impl TaskData {
    /// Number of examples (sentences for tagging).
    pub fn len(&self) -> usize {
        match self {
            TaskData::Classification(d) => d.examples.len(),
            TaskData::Tagging(d) => d.sentences.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of target classes (labels or tags).
    pub fn class_count(&self) -> usize {
        match self {
            TaskData::Classification(d) => d.labels.len(),
            TaskData::Tagging(d) => d.tags.len(),
        }
    }
}

/// Reads `label<TAB>token token ...` lines. Blank lines are skipped; labels
/// are mapped to dense indices in first-seen order.
pub fn read_classification(path: impl AsRef<Path>) -> Result<ClassificationData> {
    let text = fs::read_to_string(path)?;
    parse_classification(&text)
}

pub fn parse_classification(text: &str) -> Result<ClassificationData> {
    let mut labels: Vec<String> = Vec::new();
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let (label, rest) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
            line: line_no,
            reason: "expected `label<TAB>tokens`".into(),
        })?;
        let tokens: Vec<String> = rest.split_whitespace().map(str::to_owned).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyTokenList { line: line_no });
        }
        let label_id = match labels.iter().position(|l| l == label) {
            Some(id) => id,
            None => {
                labels.push(label.to_owned());
                labels.len() - 1
            }
        };
        examples.push(ClassifiedExample {
            tokens,
            label: label_id,
        });
    }
    Ok(ClassificationData { examples, labels })
}

/// Reads CoNLL-style `token<TAB>tag` lines with blank-line sentence breaks.
/// Consecutive or trailing blank lines are ignored.
pub fn read_tagged(path: impl AsRef<Path>) -> Result<TagData> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    parse_tagged(&text, &path.display().to_string())
}

pub fn parse_tagged(text: &str, source: &str) -> Result<TagData> {
    let mut tags: Vec<String> = Vec::new();
    let mut sentences = Vec::new();
    let mut tokens = Vec::new();
    let mut sent_tags: Vec<String> = Vec::new();
    let mut sent_ids = Vec::new();

    let mut flush = |tokens: &mut Vec<String>, sent_tags: &mut Vec<String>, sent_ids: &mut Vec<usize>| {
        if !tokens.is_empty() {
            sentences.push(TaggedSentence {
                tokens: std::mem::take(tokens),
                tags: std::mem::take(sent_tags),
                tag_ids: std::mem::take(sent_ids),
            });
        }
    };

    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            flush(&mut tokens, &mut sent_tags, &mut sent_ids);
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 || fields[0].is_empty() || fields[1].is_empty() {
            return Err(Error::MalformedLine {
                line: line_no,
                reason: format!("expected `token<TAB>tag`, got {} fields", fields.len()),
            });
        }
        let tag = fields[1];
        let tag_id = match tags.iter().position(|t| t == tag) {
            Some(id) => id,
            None => {
                tags.push(tag.to_owned());
                tags.len() - 1
            }
        };
        tokens.push(fields[0].to_owned());
        sent_tags.push(tag.to_owned());
        sent_ids.push(tag_id);
    }
    flush(&mut tokens, &mut sent_tags, &mut sent_ids);

    if sentences.is_empty() {
        return Err(Error::EmptySentence { path: source.into() });
    }
    Ok(TagData { sentences, tags })
}

/// Fraction of positions where prediction equals gold.
pub fn accuracy<T: PartialEq>(predictions: &[T], golds: &[T]) -> Result<f64> {
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    if predictions.is_empty() {
        return Ok(0.0);
    }
    let correct = predictions
        .iter()
        .zip(golds)
        .filter(|(p, g)| p == g)
        .count();
    Ok(correct as f64 / predictions.len() as f64)
}

/// Token-level micro F1 over aligned tag sequences, discarding the outside
/// tag. When there are no positive positions at all (TP = FP = FN = 0) the
/// score is defined as 1.0.
pub fn micro_f1_without_o<T, F>(predictions: &[T], golds: &[T], is_outside: F) -> Result<f64>
where
    T: PartialEq,
    F: Fn(&T) -> bool,
{
    if predictions.len() != golds.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: golds.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (pred, gold) in predictions.iter().zip(golds) {
        let hit = pred == gold;
        if hit && !is_outside(pred) {
            tp += 1;
        }
        if !is_outside(pred) && !hit {
            fp += 1;
        }
        if !is_outside(gold) && !hit {
            fn_ += 1;
        }
    }
    if tp + fp + fn_ == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
}

/// [`micro_f1_without_o`] over tag names, with `"O"` as the outside tag.
pub fn micro_f1_tags<S: AsRef<str>>(predictions: &[S], golds: &[S]) -> Result<f64> {
    let p: Vec<&str> = predictions.iter().map(AsRef::as_ref).collect();
    let g: Vec<&str> = golds.iter().map(AsRef::as_ref).collect();
    micro_f1_without_o(&p, &g, |t| *t == "O")
}

/// Concatenation of the meta-embeddings at offsets `-k ..= k` around
/// `position`; offsets outside the sentence contribute a zero block. The
/// result always has length `dim * (2k + 1)`.
pub fn window_features(
    token_vectors: &[Array1<f64>],
    position: usize,
    k: usize,
    dim: usize,
) -> Array1<f64> {
    let mut out = Array1::zeros(dim * (2 * k + 1));
    for (block, offset) in (-(k as isize)..=k as isize).enumerate() {
        let source = position as isize + offset;
        if source >= 0 && (source as usize) < token_vectors.len() {
            let v: ArrayView1<'_, f64> = token_vectors[source as usize].view();
            out.slice_mut(ndarray::s![block * dim..(block + 1) * dim])
                .assign(&v);
        }
    }
    out
}
