//! Seeded generators for desk-scale synthetic facets and datasets.
//!
//! Three families:
//! * two-class separable classification where exactly one designated facet
//!   carries the label signal and the rest are distractors;
//! * three-tag tagging (`T-A`, `T-B`, `O`) where the correct tag is decodable
//!   from one designated facet only;
//! * facets built as distinct random rotations of one shared base table plus
//!   a facet-specific offset, with binary labels derived from the base.
//!
//! All randomness flows from the spec's `seed`, so a given spec always
//! produces the same facets and splits.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::facet::Facet;
use crate::tasks::{
    ClassificationData, ClassifiedExample, TagData, TaggedSentence, TaskData,
};
use crate::util::seeded_rng;

fn default_margin() -> f64 {
    1.0
}
fn default_noise() -> f64 {
    0.4
}
fn default_distractor() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    2.0
}
fn default_offset_scale() -> f64 {
    4.0
}

/// Two-class classification with one informative facet.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ClassificationSpec {
    pub num_facets: usize,
    pub dim: usize,
    #[serde(default)]
    pub informative_facet: usize,
    pub vocab_per_class: usize,
    pub tokens_per_example: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    /// Distance of each class mean from the origin along the signal
    /// direction, in the informative facet.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Within-class jitter in the informative facet.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Scale of the uninformative facets' random vectors.
    #[serde(default = "default_distractor")]
    pub distractor_scale: f64,
    /// When positive, uninformative facets draw each token's vector from
    /// this many shared prototypes (plus small jitter) instead of
    /// independently per token, so they cannot separate the classes by
    /// memorization.
    #[serde(default)]
    pub distractor_prototypes: usize,
    pub seed: u64,
}

/// Three-tag tagging decodable from one designated facet.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TaggingSpec {
    pub num_facets: usize,
    pub dim: usize,
    #[serde(default)]
    pub designated_facet: usize,
    pub vocab_per_tag: usize,
    pub sentence_len: usize,
    pub train_sentences: usize,
    pub val_sentences: usize,
    pub test_sentences: usize,
    /// Distance between tag cluster centers in the designated facet.
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_noise")]
    pub noise: f64,
    #[serde(default = "default_distractor")]
    pub distractor_scale: f64,
    pub seed: u64,
}

/// Facets that are rotations of a shared base plus per-facet offsets, with
/// binary labels decodable from the base (hence from every facet).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RotatedSpec {
    pub num_facets: usize,
    pub dim: usize,
    pub vocab_size: usize,
    pub tokens_per_example: usize,
    pub train_examples: usize,
    pub val_examples: usize,
    pub test_examples: usize,
    /// Norm of each facet's offset vector.
    #[serde(default = "default_offset_scale")]
    pub offset_scale: f64,
    pub seed: u64,
}

/// Synthetic data selector, externally tagged in config JSON, e.g.
/// `{"classification": {...}}`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticSpec {
    Classification(ClassificationSpec),
    Tagging(TaggingSpec),
    Rotated(RotatedSpec),
}

impl SyntheticSpec {
    pub fn is_tagging(&self) -> bool {
        matches!(self, SyntheticSpec::Tagging(_))
    }
}

/// Generated facets plus train/validation/test splits.
#[derive(Debug, Clone)]
pub struct SyntheticBundle {
    pub facets: Vec<Facet>,
    pub train: TaskData,
    pub val: TaskData,
    pub test: TaskData,
}

/// Runs the generator for a spec.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticBundle> {
    match spec {
        SyntheticSpec::Classification(s) => generate_classification(s),
        SyntheticSpec::Tagging(s) => generate_tagging(s),
        SyntheticSpec::Rotated(s) => generate_rotated(s),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_fn(dim, |_| normal(rng) * scale)
}

fn unit_vec(rng: &mut ChaCha8Rng, dim: usize) -> Array1<f64> {
    let v = gaussian_vec(rng, dim, 1.0);
    let n = v.dot(&v).sqrt();
    v / n.max(1e-12)
}

/// Random orthogonal matrix: modified Gram-Schmidt over a Gaussian matrix.
pub fn random_orthogonal(dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::from_shape_fn((dim, dim), |_| normal(rng));
    crate::facet::orthonormalize_columns(&mut m);
    m
}

fn generate_classification(spec: &ClassificationSpec) -> Result<SyntheticBundle> {
    let mut rng = seeded_rng(spec.seed, "synthetic_classification");
    let classes = 2usize;

    let mut vocab: Vec<String> = Vec::new();
    let mut class_tokens: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for class in 0..classes {
        for i in 0..spec.vocab_per_class {
            class_tokens[class].push(vocab.len());
            vocab.push(format!("c{class}w{i:03}"));
        }
    }

    let signal = unit_vec(&mut rng, spec.dim);
    let mut facets = Vec::with_capacity(spec.num_facets);
    for f in 0..spec.num_facets {
        let prototypes: Vec<Array1<f64>> = (0..spec.distractor_prototypes)
            .map(|_| gaussian_vec(&mut rng, spec.dim, spec.distractor_scale))
            .collect();
        let mut table = Array2::zeros((vocab.len(), spec.dim));
        for class in 0..classes {
            let sign = if class == 0 { -1.0 } else { 1.0 };
            for &token in &class_tokens[class] {
                let row = if f == spec.informative_facet {
                    &signal * (sign * spec.margin) + gaussian_vec(&mut rng, spec.dim, spec.noise)
                } else if prototypes.is_empty() {
                    gaussian_vec(&mut rng, spec.dim, spec.distractor_scale)
                } else {
                    let p = &prototypes[rng.random_range(0..prototypes.len())];
                    p + gaussian_vec(&mut rng, spec.dim, 0.1 * spec.distractor_scale)
                };
                table.row_mut(token).assign(&row);
            }
        }
        facets.push(Facet::new(format!("syn{f}"), vocab.clone(), table)?);
    }

    let labels = vec!["neg".to_string(), "pos".to_string()];
    let mut draw_split = |count: usize| -> ClassificationData {
        let examples = (0..count)
            .map(|_| {
                let class = rng.random_range(0..classes);
                let tokens = (0..spec.tokens_per_example)
                    .map(|_| {
                        let &t = &class_tokens[class][rng.random_range(0..spec.vocab_per_class)];
                        vocab[t].clone()
                    })
                    .collect();
                ClassifiedExample {
                    tokens,
                    label: class,
                }
            })
            .collect();
        ClassificationData {
            examples,
            labels: labels.clone(),
        }
    };

    let train = TaskData::Classification(draw_split(spec.train_examples));
    let val = TaskData::Classification(draw_split(spec.val_examples));
    let test = TaskData::Classification(draw_split(spec.test_examples));
    Ok(SyntheticBundle {
        facets,
        train,
        val,
        test,
    })
}

const SYNTH_TAGS: [&str; 3] = ["T-A", "T-B", "O"];

fn generate_tagging(spec: &TaggingSpec) -> Result<SyntheticBundle> {
    let mut rng = seeded_rng(spec.seed, "synthetic_tagging");
    let tag_count = SYNTH_TAGS.len();

    let mut vocab: Vec<String> = Vec::new();
    let mut tag_tokens: Vec<Vec<usize>> = vec![Vec::new(); tag_count];
    for tag in 0..tag_count {
        for i in 0..spec.vocab_per_tag {
            tag_tokens[tag].push(vocab.len());
            vocab.push(format!("g{tag}w{i:03}"));
        }
    }

    // Well-separated cluster centers for the designated facet.
    let centers: Vec<Array1<f64>> = (0..tag_count)
        .map(|_| unit_vec(&mut rng, spec.dim) * spec.separation)
        .collect();

    let mut facets = Vec::with_capacity(spec.num_facets);
    for f in 0..spec.num_facets {
        let mut table = Array2::zeros((vocab.len(), spec.dim));
        for tag in 0..tag_count {
            for &token in &tag_tokens[tag] {
                let row = if f == spec.designated_facet {
                    &centers[tag] + gaussian_vec(&mut rng, spec.dim, spec.noise)
                } else {
                    gaussian_vec(&mut rng, spec.dim, spec.distractor_scale)
                };
                table.row_mut(token).assign(&row);
            }
        }
        facets.push(Facet::new(format!("syn{f}"), vocab.clone(), table)?);
    }

    let tags: Vec<String> = SYNTH_TAGS.iter().map(|t| t.to_string()).collect();
    let mut draw_split = |count: usize| -> TagData {
        let sentences = (0..count)
            .map(|_| {
                let mut tokens = Vec::with_capacity(spec.sentence_len);
                let mut sent_tags = Vec::with_capacity(spec.sentence_len);
                let mut tag_ids = Vec::with_capacity(spec.sentence_len);
                for _ in 0..spec.sentence_len {
                    let tag = rng.random_range(0..tag_count);
                    let &t = &tag_tokens[tag][rng.random_range(0..spec.vocab_per_tag)];
                    tokens.push(vocab[t].clone());
                    sent_tags.push(tags[tag].clone());
                    tag_ids.push(tag);
                }
                TaggedSentence {
                    tokens,
                    tags: sent_tags,
                    tag_ids,
                }
            })
            .collect();
        TagData {
            sentences,
            tags: tags.clone(),
        }
    };

    let train = TaskData::Tagging(draw_split(spec.train_sentences));
    let val = TaskData::Tagging(draw_split(spec.val_sentences));
    let test = TaskData::Tagging(draw_split(spec.test_sentences));
    Ok(SyntheticBundle {
        facets,
        train,
        val,
        test,
    })
}

fn generate_rotated(spec: &RotatedSpec) -> Result<SyntheticBundle> {
    let mut rng = seeded_rng(spec.seed, "synthetic_rotated");

    let vocab: Vec<String> = (0..spec.vocab_size).map(|i| format!("w{i:04}")).collect();
    let base = Array2::from_shape_fn((spec.vocab_size, spec.dim), |_| normal(&mut rng));

    // Binary labels separable in the base space, hence in every rotation.
    let label_direction = unit_vec(&mut rng, spec.dim);
    let labels_by_token: Vec<usize> = base
        .outer_iter()
        .map(|row| usize::from(row.dot(&label_direction) > 0.0))
        .collect();

    let mut facets = Vec::with_capacity(spec.num_facets);
    for f in 0..spec.num_facets {
        let rotation = random_orthogonal(spec.dim, &mut rng);
        let offset = unit_vec(&mut rng, spec.dim) * spec.offset_scale;
        let mut table = base.dot(&rotation);
        for mut row in table.outer_iter_mut() {
            row += &offset;
        }
        facets.push(Facet::new(format!("rot{f}"), vocab.clone(), table)?);
    }

    let class_tokens: Vec<Vec<usize>> = (0..2)
        .map(|c| {
            (0..spec.vocab_size)
                .filter(|&t| labels_by_token[t] == c)
                .collect()
        })
        .collect();
    let labels = vec!["neg".to_string(), "pos".to_string()];
    let mut draw_split = |count: usize| -> ClassificationData {
        let examples = (0..count)
            .map(|_| {
                let class = rng.random_range(0..2);
                let pool = &class_tokens[class];
                let tokens = (0..spec.tokens_per_example)
                    .map(|_| vocab[pool[rng.random_range(0..pool.len())]].clone())
                    .collect();
                ClassifiedExample {
                    tokens,
                    label: class,
                }
            })
            .collect();
        ClassificationData {
            examples,
            labels: labels.clone(),
        }
    };

    let train = TaskData::Classification(draw_split(spec.train_examples));
    let val = TaskData::Classification(draw_split(spec.val_examples));
    let test = TaskData::Classification(draw_split(spec.test_examples));
    Ok(SyntheticBundle {
        facets,
        train,
        val,
        test,
    })
}
