//! Meta-embedding layer: per-facet linear transformations combined by scalar
//! weights, realizing averaging, concatenation, attention-weighted (DME), and
//! orthogonal word-prism variants of the same general form
//!
//! ```text
//! meta(w) = sum_f  alpha_f * (P_f * w_f + b_f)
//! ```
//!
//! The prism variant keeps each `P_f` near the orthogonal manifold by
//! applying a cubic retraction after every optimizer update, so transformed
//! facets keep their internal dot products and norms. Because the facet
//! weights are plain scalars (not per-word attention), the whole table of
//! meta-embeddings can be precomputed once and served with memory that scales
//! with the vocabulary alone, independent of the facet count.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;

use crate::error::{Error, Result};
use crate::facet::{Facet, VocabUnion};
use crate::util::{seeded_rng, softmax, worker_count};

/// Constraint regime of the per-facet projection matrices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `P_f = I`, frozen. Requires every facet dimension to equal the meta
    /// dimension.
    Identity,
    /// Fixed 0/1 block-selector matrices that concatenate the facets.
    /// Only valid with [`CombinerKind::FixedUnit`].
    Selector,
    /// Freely learned `P_f`, no manifold constraint.
    Unconstrained,
    /// Learned square `P_f` pulled back toward the orthogonal manifold after
    /// each update.
    Orthogonal,
}

/// How the per-facet weights `alpha_f` are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    /// `alpha_f = 1/F`, frozen (averaging).
    FixedUniform,
    /// `alpha_f = 1`, frozen (concatenation).
    FixedUnit,
    /// Directly learned scalars, initialized to `1/F` (word prism).
    LearnedScalar,
    /// Softmax attention over the transformed vectors (DME).
    Attention,
}

/// Dimension layout and variant selection for the meta layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetaConfig {
    pub projection: ProjectionKind,
    pub combiner: CombinerKind,
    /// Output dimension `d'`.
    pub meta_dim: usize,
    /// Input dimension `d_f` per facet.
    pub facet_dims: Vec<usize>,
}

impl MetaConfig {
    pub fn facet_count(&self) -> usize {
        self.facet_dims.len()
    }

    /// Checks the dimension rules tied to each projection kind.
    pub fn validate(&self) -> Result<()> {
        if self.facet_dims.is_empty() {
            return Err(Error::NoFacets);
        }
        if self.meta_dim == 0 {
            return Err(Error::InvalidDimensions("meta dimension must be positive".into()));
        }
        match self.projection {
            ProjectionKind::Identity | ProjectionKind::Orthogonal => {
                if self.facet_dims.iter().any(|&d| d != self.meta_dim) {
                    return Err(Error::InvalidDimensions(format!(
                        "{:?} projections require every facet dimension to equal the meta dimension {} (got {:?})",
                        self.projection, self.meta_dim, self.facet_dims
                    )));
                }
            }
            ProjectionKind::Selector => {
                if self.combiner != CombinerKind::FixedUnit {
                    return Err(Error::InvalidDimensions(
                        "selector projections are only valid with unit fixed weights".into(),
                    ));
                }
                let total: usize = self.facet_dims.iter().sum();
                if total != self.meta_dim {
                    return Err(Error::InvalidDimensions(format!(
                        "selector projections require meta dimension {} to equal the facet dimension sum {total}",
                        self.meta_dim
                    )));
                }
            }
            ProjectionKind::Unconstrained => {}
        }
        Ok(())
    }
}

/// Learned attention parameters for the DME combiner.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub vector: Array1<f64>,
    pub bias: f64,
}

/// Learnable tensors of the meta layer.
///
/// `alphas` holds the stored facet weights for the non-attention combiners
/// (frozen constants for averaging/concatenation, learned scalars for the
/// prism). The attention combiner ignores them and derives weights per input.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaParams {
    /// Per-facet projection, `meta_dim x facet_dim`.
    pub projections: Vec<Array2<f64>>,
    /// Per-facet bias, length `meta_dim`.
    pub biases: Vec<Array1<f64>>,
    /// Stored scalar weights, length F.
    pub alphas: Vec<f64>,
    /// Attention parameters, present only for [`CombinerKind::Attention`].
    pub attention: Option<AttentionParams>,
}

impl MetaParams {
    /// Verifies tensor shapes against a config.
    pub fn validate_shapes(&self, config: &MetaConfig) -> Result<()> {
        let f = config.facet_count();
        if self.projections.len() != f || self.biases.len() != f || self.alphas.len() != f {
            return Err(Error::InvalidDimensions(format!(
                "parameter group counts {}/{}/{} do not match facet count {f}",
                self.projections.len(),
                self.biases.len(),
                self.alphas.len()
            )));
        }
        for (i, (p, b)) in self.projections.iter().zip(&self.biases).enumerate() {
            if p.nrows() != config.meta_dim || p.ncols() != config.facet_dims[i] {
                return Err(Error::InvalidDimensions(format!(
                    "projection {i} has shape {:?}, expected ({}, {})",
                    p.dim(),
                    config.meta_dim,
                    config.facet_dims[i]
                )));
            }
            if b.len() != config.meta_dim {
                return Err(Error::InvalidDimensions(format!(
                    "bias {i} has length {}, expected {}",
                    b.len(),
                    config.meta_dim
                )));
            }
        }
        match (config.combiner, &self.attention) {
            (CombinerKind::Attention, Some(att)) if att.vector.len() == config.meta_dim => Ok(()),
            (CombinerKind::Attention, Some(att)) => Err(Error::InvalidDimensions(format!(
                "attention vector has length {}, expected {}",
                att.vector.len(),
                config.meta_dim
            ))),
            (CombinerKind::Attention, None) => Err(Error::InvalidDimensions(
                "attention combiner requires attention parameters".into(),
            )),
            (_, Some(_)) => Err(Error::InvalidDimensions(
                "attention parameters are only valid with the attention combiner".into(),
            )),
            (_, None) => Ok(()),
        }
    }

    /// Transformed vector `P_f w_f + b_f` for one facet input.
    pub fn transform(&self, facet: usize, input: ArrayView1<'_, f64>) -> Array1<f64> {
        self.projections[facet].dot(&input) + &self.biases[facet]
    }
}

/// Softmax attention weights over transformed facet vectors:
/// `alpha = softmax(a . t_f + bias)`. The output sums to one.
pub fn dme_weights(transformed: &[Array1<f64>], attention: &AttentionParams) -> Vec<f64> {
    let scores: Vec<f64> = transformed
        .iter()
        .map(|t| attention.vector.dot(t) + attention.bias)
        .collect();
    softmax(&scores)
}

/// Combines one word's facet vectors into its meta-embedding.
pub fn meta_embed(
    params: &MetaParams,
    config: &MetaConfig,
    facet_vectors: &[ArrayView1<'_, f64>],
) -> Result<Array1<f64>> {
    if facet_vectors.len() != config.facet_count() {
        return Err(Error::DimensionMismatch {
            context: "facet vectors".into(),
            expected: config.facet_count(),
            got: facet_vectors.len(),
        });
    }
    for (f, (v, &d)) in facet_vectors.iter().zip(&config.facet_dims).enumerate() {
        if v.len() != d {
            return Err(Error::DimensionMismatch {
                context: format!("facet {f} vector"),
                expected: d,
                got: v.len(),
            });
        }
    }
    let transformed: Vec<Array1<f64>> = facet_vectors
        .iter()
        .enumerate()
        .map(|(f, v)| params.transform(f, *v))
        .collect();
    let weights: Vec<f64> = match config.combiner {
        CombinerKind::Attention => {
            let att = params.attention.as_ref().ok_or(Error::InvalidDimensions(
                "attention combiner requires attention parameters".into(),
            ))?;
            dme_weights(&transformed, att)
        }
        _ => params.alphas.clone(),
    };
    let mut out = Array1::zeros(config.meta_dim);
    for (alpha, t) in weights.iter().zip(&transformed) {
        out.scaled_add(*alpha, t);
    }
    Ok(out)
}

/// One application of the manifold retraction
/// `P <- (1 + beta) P - beta (P P^T) P`.
///
/// Orthogonal matrices are fixed points; matrices near the manifold contract
/// toward it at a per-application factor of roughly `1 - 2 beta` in each
/// singular value's deviation from one.
pub fn orthogonal_retraction(p: ArrayView2<'_, f64>, beta: f64) -> Result<Array2<f64>> {
    let gram = p.dot(&p.t());
    let mut out = p.to_owned() * (1.0 + beta);
    out.scaled_add(-beta, &gram.dot(&p));
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("orthogonal retraction"));
    }
    Ok(out)
}

/// Distance-from-manifold diagnostic `|| P P^T - I ||_F`.
pub fn orthogonality_error(p: ArrayView2<'_, f64>) -> f64 {
    let gram = p.dot(&p.t());
    let n = gram.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            let d = gram[[i, j]] - if i == j { 1.0 } else { 0.0 };
            sum += d * d;
        }
    }
    sum.sqrt()
}

/// Which parameter groups the optimizer may update. `true` means frozen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct FreezePolicy {
    pub alphas: bool,
    pub projections: bool,
    pub biases: bool,
    pub attention: bool,
    pub head: bool,
}

/// Baseline/meta-embedding variant selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Average,
    Concat,
    Dme,
    Prism,
}

/// A fully initialized meta layer: config, parameters, and the per-group
/// freeze policy the variant implies.
#[derive(Debug, Clone)]
pub struct BaselineInit {
    pub config: MetaConfig,
    pub params: MetaParams,
    pub freeze: FreezePolicy,
}

/// Builds the initial configuration and parameters for one of the four
/// variants.
///
/// * `average` — identity projections and uniform weights, all frozen.
/// * `concat`  — selector projections and unit weights, all frozen.
/// * `dme`     — learned projections (fan-in scaled uniform init, zero bias)
///   with softmax attention; `meta_dim` must be given.
/// * `prism`   — identity-initialized square projections on the orthogonal
///   manifold, zero biases, learned scalars starting at `1/F`.
pub fn make_baseline(
    kind: BaselineKind,
    facets: &[Facet],
    meta_dim: Option<usize>,
    seed: u64,
) -> Result<BaselineInit> {
    if facets.is_empty() {
        return Err(Error::NoFacets);
    }
    let dims: Vec<usize> = facets.iter().map(Facet::dim).collect();
    let count = dims.len();
    let uniform = 1.0 / count as f64;

    let init = match kind {
        BaselineKind::Average => {
            let d = dims[0];
            if dims.iter().any(|&x| x != d) {
                return Err(Error::InvalidDimensions(format!(
                    "averaging requires equal facet dimensions, got {dims:?}"
                )));
            }
            if let Some(m) = meta_dim {
                if m != d {
                    return Err(Error::InvalidDimensions(format!(
                        "averaging fixes the meta dimension to {d}, got {m}"
                    )));
                }
            }
            BaselineInit {
                config: MetaConfig {
                    projection: ProjectionKind::Identity,
                    combiner: CombinerKind::FixedUniform,
                    meta_dim: d,
                    facet_dims: dims,
                },
                params: MetaParams {
                    projections: (0..count).map(|_| Array2::eye(d)).collect(),
                    biases: (0..count).map(|_| Array1::zeros(d)).collect(),
                    alphas: vec![uniform; count],
                    attention: None,
                },
                freeze: FreezePolicy {
                    alphas: true,
                    projections: true,
                    biases: true,
                    attention: true,
                    head: false,
                },
            }
        }
        BaselineKind::Concat => {
            let total: usize = dims.iter().sum();
            if let Some(m) = meta_dim {
                if m != total {
                    return Err(Error::InvalidDimensions(format!(
                        "concatenation fixes the meta dimension to {total}, got {m}"
                    )));
                }
            }
            let mut projections = Vec::with_capacity(count);
            let mut offset = 0;
            for &d in &dims {
                let mut p = Array2::zeros((total, d));
                for j in 0..d {
                    p[[offset + j, j]] = 1.0;
                }
                projections.push(p);
                offset += d;
            }
            BaselineInit {
                config: MetaConfig {
                    projection: ProjectionKind::Selector,
                    combiner: CombinerKind::FixedUnit,
                    meta_dim: total,
                    facet_dims: dims,
                },
                params: MetaParams {
                    projections,
                    biases: (0..count).map(|_| Array1::zeros(total)).collect(),
                    alphas: vec![1.0; count],
                    attention: None,
                },
                freeze: FreezePolicy {
                    alphas: true,
                    projections: true,
                    biases: true,
                    attention: true,
                    head: false,
                },
            }
        }
        BaselineKind::Dme => {
            let d = meta_dim.ok_or_else(|| {
                Error::InvalidDimensions("dme requires an explicit meta dimension".into())
            })?;
            let mut rng = seeded_rng(seed, "dme_init");
            let projections: Vec<Array2<f64>> = dims
                .iter()
                .map(|&df| {
                    let scale = 1.0 / (df as f64).sqrt();
                    Array2::from_shape_fn((d, df), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
                })
                .collect();
            let att_scale = 1.0 / (d as f64).sqrt();
            let vector =
                Array1::from_shape_fn(d, |_| (rng.random::<f64>() * 2.0 - 1.0) * att_scale);
            BaselineInit {
                config: MetaConfig {
                    projection: ProjectionKind::Unconstrained,
                    combiner: CombinerKind::Attention,
                    meta_dim: d,
                    facet_dims: dims,
                },
                params: MetaParams {
                    projections,
                    biases: (0..count).map(|_| Array1::zeros(d)).collect(),
                    alphas: vec![uniform; count],
                    attention: Some(AttentionParams { vector, bias: 0.0 }),
                },
                freeze: FreezePolicy {
                    alphas: true,
                    projections: false,
                    biases: false,
                    attention: false,
                    head: false,
                },
            }
        }
        BaselineKind::Prism => {
            let d = dims[0];
            if dims.iter().any(|&x| x != d) {
                return Err(Error::InvalidDimensions(format!(
                    "prism projections are square and require equal facet dimensions, got {dims:?}"
                )));
            }
            if let Some(m) = meta_dim {
                if m != d {
                    return Err(Error::InvalidDimensions(format!(
                        "prism fixes the meta dimension to {d}, got {m}"
                    )));
                }
            }
            BaselineInit {
                config: MetaConfig {
                    projection: ProjectionKind::Orthogonal,
                    combiner: CombinerKind::LearnedScalar,
                    meta_dim: d,
                    facet_dims: dims,
                },
                params: MetaParams {
                    projections: (0..count).map(|_| Array2::eye(d)).collect(),
                    biases: (0..count).map(|_| Array1::zeros(d)).collect(),
                    alphas: vec![uniform; count],
                    attention: None,
                },
                freeze: FreezePolicy::default(),
            }
        }
    };
    init.config.validate()?;
    init.params.validate_shapes(&init.config)?;
    Ok(init)
}

/// Projection-constraint override mirroring the ablation variants: keep the
/// variant's default, freeze the transformation entirely (`none`), learn it
/// without the manifold pull-back (`unconstrained`), or force the retraction
/// (`orthogonal`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionOverride {
    #[default]
    Default,
    None,
    Unconstrained,
    Orthogonal,
}

/// Applies a projection override to an initialized variant.
pub fn apply_projection_override(init: &mut BaselineInit, ov: ProjectionOverride) -> Result<()> {
    match ov {
        ProjectionOverride::Default => {}
        ProjectionOverride::None => {
            init.config.projection = ProjectionKind::Identity;
            init.freeze.projections = true;
            init.freeze.biases = true;
        }
        ProjectionOverride::Unconstrained => {
            init.config.projection = ProjectionKind::Unconstrained;
            init.freeze.projections = false;
            init.freeze.biases = false;
        }
        ProjectionOverride::Orthogonal => {
            init.config.projection = ProjectionKind::Orthogonal;
            init.freeze.projections = false;
            init.freeze.biases = false;
        }
    }
    init.config.validate()
}

/// Precomputed meta-embeddings for a whole vocabulary: exactly one
/// `meta_dim`-vector per token, regardless of how many facets produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct MetaTable {
    tokens: Vec<String>,
    index: std::collections::HashMap<String, usize>,
    rows: Array2<f64>,
}

impl MetaTable {
    pub fn from_parts(tokens: Vec<String>, rows: Array2<f64>) -> Result<Self> {
        if tokens.len() != rows.nrows() {
            return Err(Error::DimensionMismatch {
                context: "meta table rows vs tokens".into(),
                expected: tokens.len(),
                got: rows.nrows(),
            });
        }
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Self { tokens, index, rows })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn rows(&self) -> ArrayView2<'_, f64> {
        self.rows.view()
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    /// Writes the counted-header text format (`vocab_size dim` line followed
    /// by one `token v1 .. vd` record per token). Values use the shortest
    /// decimal form that parses back to the identical float, so a text
    /// round-trip is lossless.
    pub fn write_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "{} {}", self.len(), self.dim())?;
        for (token, row) in self.tokens.iter().zip(self.rows.outer_iter()) {
            write!(w, "{token}")?;
            for v in row.iter() {
                write!(w, " {v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Writes the raw sidecar: magic `PRISM1`, little-endian u64 vocab size
    /// and dimension, then the rows as little-endian f32; tokens go to a
    /// companion text file, one per line. The payload size is exactly
    /// `6 + 16 + 4 * vocab * dim` bytes for any facet count.
    pub fn write_raw(&self, data_path: impl AsRef<Path>, tokens_path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(data_path)?);
        w.write_all(RAW_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim() as u64).to_le_bytes())?;
        for v in self.rows.iter() {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
        w.flush()?;

        let mut t = BufWriter::new(fs::File::create(tokens_path)?);
        for token in &self.tokens {
            writeln!(t, "{token}")?;
        }
        t.flush()?;
        Ok(())
    }

    /// Reads a raw sidecar back. Values come back as the stored f32s.
    pub fn read_raw(data_path: impl AsRef<Path>, tokens_path: impl AsRef<Path>) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(data_path)?.read_to_end(&mut bytes)?;
        if bytes.len() < RAW_MAGIC.len() + 16 || &bytes[..RAW_MAGIC.len()] != RAW_MAGIC {
            return Err(Error::ParamsFile("bad raw table header".into()));
        }
        let mut at = RAW_MAGIC.len();
        let mut read_u64 = |bytes: &[u8]| {
            let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
            at += 8;
            v as usize
        };
        let count = read_u64(&bytes);
        let dim = read_u64(&bytes);
        let expected = RAW_MAGIC.len() + 16 + 4 * count * dim;
        if bytes.len() != expected {
            return Err(Error::ParamsFile(format!(
                "raw table payload is {} bytes, expected {expected}",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(count * dim);
        for chunk in bytes[RAW_MAGIC.len() + 16..].chunks_exact(4) {
            values.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
        }
        let rows = Array2::from_shape_vec((count, dim), values).expect("validated size");

        let text = fs::read_to_string(tokens_path)?;
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        Self::from_parts(tokens, rows)
    }
}

const RAW_MAGIC: &[u8; 6] = b"PRISM1";

/// Precomputes the meta-embedding for every token in the vocabulary union
/// (out-of-vocabulary facets contribute their centroid). Rows may be filled
/// by several workers (capped by `PRISM_THREADS`); the result is identical
/// for any worker count.
pub fn export_table(
    params: &MetaParams,
    config: &MetaConfig,
    facets: &[Facet],
    vocab: &VocabUnion,
) -> Result<MetaTable> {
    export_table_with_workers(params, config, facets, vocab, worker_count())
}

/// [`export_table`] with an explicit worker cap.
pub fn export_table_with_workers(
    params: &MetaParams,
    config: &MetaConfig,
    facets: &[Facet],
    vocab: &VocabUnion,
    workers: usize,
) -> Result<MetaTable> {
    config.validate()?;
    params.validate_shapes(config)?;
    if facets.len() != config.facet_count() {
        return Err(Error::DimensionMismatch {
            context: "facets".into(),
            expected: config.facet_count(),
            got: facets.len(),
        });
    }

    let tokens = vocab.tokens();
    let mut rows = Array2::zeros((tokens.len(), config.meta_dim));
    let workers = workers.max(1).min(tokens.len().max(1));

    let embed_one = |token: &str| -> Result<Array1<f64>> {
        let views: Vec<ArrayView1<'_, f64>> =
            facets.iter().map(|f| f.lookup(token).0).collect();
        meta_embed(params, config, &views)
    };

    if workers <= 1 {
        for (token, mut row) in tokens.iter().zip(rows.outer_iter_mut()) {
            row.assign(&embed_one(token)?);
        }
    } else {
        let chunk = tokens.len().div_ceil(workers);
        let mut results: Vec<Result<Vec<Array1<f64>>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = tokens
                .chunks(chunk)
                .map(|slice| {
                    scope.spawn(move || slice.iter().map(|t| embed_one(t)).collect())
                })
                .collect();
            results = handles.into_iter().map(|h| h.join().expect("worker")).collect();
        });
        let mut at = 0;
        for chunk_rows in results {
            for row in chunk_rows? {
                rows.row_mut(at).assign(&row);
                at += 1;
            }
        }
    }

    MetaTable::from_parts(tokens.to_vec(), rows)
}

/// Rotation by `angle` in the `(i, j)` coordinate plane; handy as an exactly
/// orthogonal test matrix.
pub fn givens_rotation(dim: usize, i: usize, j: usize, angle: f64) -> Array2<f64> {
    let mut m = Array2::eye(dim);
    let (sin, cos) = angle.sin_cos();
    m[[i, i]] = cos;
    m[[j, j]] = cos;
    m[[i, j]] = -sin;
    m[[j, i]] = sin;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::facet::union_vocab;
    use ndarray::array;

    fn facet(name: &str, tokens: &[&str], rows: Array2<f64>) -> Facet {
        Facet::new(name, tokens.iter().map(|s| s.to_string()).collect(), rows).unwrap()
    }

    #[test]
    fn meta_embed_identity_single_facet() {
        let init = make_baseline(
            BaselineKind::Average,
            &[facet("f", &["w"], array![[2.0, 3.0]])],
            None,
            0,
        )
        .unwrap();
        let input = array![2.0, 3.0];
        let out = meta_embed(&init.params, &init.config, &[input.view()]).unwrap();
        assert_eq!(out.to_vec(), vec![2.0, 3.0]);
    }

    #[test]
    fn meta_embed_average_of_two() {
        let f1 = facet("a", &["w"], array![[1.0, 0.0]]);
        let f2 = facet("b", &["w"], array![[0.0, 1.0]]);
        let init = make_baseline(BaselineKind::Average, &[f1, f2], None, 0).unwrap();
        let (x, y) = (array![1.0, 0.0], array![0.0, 1.0]);
        let out = meta_embed(&init.params, &init.config, &[x.view(), y.view()]).unwrap();
        assert_eq!(out.to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn meta_embed_concat_places_blocks() {
        let f1 = facet("a", &["w"], array![[1.0, 2.0]]);
        let f2 = facet("b", &["w"], array![[3.0]]);
        let init = make_baseline(BaselineKind::Concat, &[f1, f2], None, 0).unwrap();
        assert_eq!(init.config.meta_dim, 3);
        let (x, y) = (array![1.0, 2.0], array![3.0]);
        let out = meta_embed(&init.params, &init.config, &[x.view(), y.view()]).unwrap();
        assert_eq!(out.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn meta_embed_rejects_wrong_widths() {
        let f1 = facet("a", &["w"], array![[1.0, 2.0]]);
        let init = make_baseline(BaselineKind::Average, &[f1], None, 0).unwrap();
        let bad = array![1.0, 2.0, 3.0];
        assert!(matches!(
            meta_embed(&init.params, &init.config, &[bad.view()]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn dme_weights_examples() {
        let att = AttentionParams {
            vector: array![1.0, 0.0],
            bias: 0.0,
        };
        // Equal transformed vectors get uniform weights.
        let t = vec![array![0.7, -0.2], array![0.7, -0.2], array![0.7, -0.2]];
        let w = dme_weights(&t, &att);
        for &x in &w {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }

        // Scores (ln 3, 0) give the closed-form softmax (0.75, 0.25).
        let t = vec![array![3.0_f64.ln(), 5.0], array![0.0, 5.0]];
        let w = dme_weights(&t, &att);
        assert!((w[0] - 0.75).abs() < 1e-12);
        assert!((w[1] - 0.25).abs() < 1e-12);

        // Shifting both scores by a constant (through the bias) is a no-op.
        let shifted = AttentionParams {
            vector: array![1.0, 0.0],
            bias: 123.456,
        };
        let v = dme_weights(&t, &shifted);
        assert!((w[0] - v[0]).abs() < 1e-12 && (w[1] - v[1]).abs() < 1e-12);

        let total: f64 = w.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn retraction_fixed_points() {
        for q in [
            Array2::eye(4),
            {
                // Permutation matrix.
                let mut p = Array2::zeros((4, 4));
                for (i, j) in [(0, 2), (1, 0), (2, 3), (3, 1)] {
                    p[[i, j]] = 1.0;
                }
                p
            },
            givens_rotation(4, 0, 2, 0.37),
        ] {
            let out = orthogonal_retraction(q.view(), 0.001).unwrap();
            let max_dev = (&out - &q).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_dev < 1e-12, "deviation {max_dev}");
        }
    }

    #[test]
    fn retraction_on_scaled_orthogonal_ray() {
        // P = c Q maps to ((1 + beta) c - beta c^3) Q; for c = 2, beta = 1e-3
        // the factor is 1.994.
        let q = givens_rotation(3, 0, 1, 1.1);
        let p = &q * 2.0;
        let out = orthogonal_retraction(p.view(), 0.001).unwrap();
        let expected = &q * 1.994;
        for (a, b) in out.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn retraction_converges_and_contracts_at_the_expected_rate() {
        // Perturbations of the identity are pulled below 1e-8 once enough
        // applications accumulate; the per-application contraction of the
        // error is about 1 - 2 beta, so 200 applications at beta = 0.01 land
        // near exp(-4) of the starting error, not yet at the floor.
        let mut rng = seeded_rng(3, "retraction_unit");
        let dim = 12;
        let mut p = Array2::eye(dim);
        p.mapv_inplace(|v| v);
        for v in p.iter_mut() {
            *v += rng.random::<f64>() * 0.1 - 0.05;
        }
        let initial = orthogonality_error(p.view());
        assert!(initial > 1e-3);

        let mut q = p.clone();
        for _ in 0..200 {
            q = orthogonal_retraction(q.view(), 0.01).unwrap();
        }
        let after_200 = orthogonality_error(q.view());
        let ratio = after_200 / initial;
        assert!(
            ratio > 0.005 && ratio < 0.05,
            "contraction after 200 applications should track exp(-4) ~ 0.018, got {ratio}"
        );

        for _ in 0..1000 {
            q = orthogonal_retraction(q.view(), 0.01).unwrap();
        }
        assert!(orthogonality_error(q.view()) < 1e-8);
    }

    #[test]
    fn retraction_error_is_monotone_in_the_basin() {
        let mut rng = seeded_rng(4, "retraction_monotone");
        let mut p = Array2::eye(6);
        for v in p.iter_mut() {
            *v += rng.random::<f64>() * 0.08 - 0.04;
        }
        let mut prev = orthogonality_error(p.view());
        for _ in 0..300 {
            p = orthogonal_retraction(p.view(), 0.01).unwrap();
            let err = orthogonality_error(p.view());
            assert!(err <= prev + 1e-15, "{err} > {prev}");
            prev = err;
        }
    }

    #[test]
    fn scalar_ray_moves_toward_one() {
        let beta = 0.001;
        let map = |c: f64| (1.0 + beta) * c - beta * c * c * c;
        let upper = (1.0 + 1.0 / beta).sqrt();
        let mut c = 0.02;
        while c < upper * 0.98 {
            if (c - 1.0).abs() > 1e-9 {
                let next = map(c);
                assert!(
                    (next - 1.0).abs() < (c - 1.0).abs(),
                    "c = {c} moved to {next}"
                );
            }
            c += upper / 200.0;
        }
    }

    #[test]
    fn orthogonality_error_examples() {
        assert_eq!(orthogonality_error(Array2::eye(5).view()), 0.0);

        let twice = Array2::eye(4) * 2.0;
        let expected = 3.0 * 4.0_f64.sqrt();
        assert!((orthogonality_error(twice.view()) - expected).abs() < 1e-12);

        let mut perm = Array2::zeros((3, 3));
        perm[[0, 1]] = 1.0;
        perm[[1, 2]] = 1.0;
        perm[[2, 0]] = 1.0;
        assert_eq!(orthogonality_error(perm.view()), 0.0);
    }

    #[test]
    fn norm_and_dot_preservation_near_the_manifold() {
        // For ||P P^T - I||_F <= eps, norms move by at most eps * ||v||.
        let mut rng = seeded_rng(5, "norm_preservation");
        let dim = 8;
        for _ in 0..20 {
            let mut p = Array2::eye(dim);
            for v in p.iter_mut() {
                *v += rng.random::<f64>() * 0.02 - 0.01;
            }
            let eps = orthogonality_error(p.view());
            for _ in 0..10 {
                let v = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 4.0 - 2.0);
                let pv = p.dot(&v);
                let (nv, npv) = (v.dot(&v).sqrt(), pv.dot(&pv).sqrt());
                assert!((npv - nv).abs() <= eps * nv + 1e-12);
            }
        }

        // Exactly orthogonal matrices preserve dot products to 1e-10.
        let q = givens_rotation(dim, 1, 5, 0.83).dot(&givens_rotation(dim, 0, 3, -1.2));
        for _ in 0..10 {
            let u = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0);
            let v = Array1::from_shape_fn(dim, |_| rng.random::<f64>() * 2.0 - 1.0);
            let lhs = q.dot(&u).dot(&q.dot(&v));
            assert!((lhs - u.dot(&v)).abs() < 1e-10);
        }
    }

    #[test]
    fn make_baseline_prism_initialization() {
        let rows = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let facets = vec![
            facet("a", &["x", "y"], rows.clone()),
            facet("b", &["x", "y"], rows.clone()),
            facet("c", &["x", "y"], rows),
        ];
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        assert_eq!(init.config.meta_dim, 4);
        for p in &init.params.projections {
            assert_eq!(p, &Array2::<f64>::eye(4));
        }
        for a in &init.params.alphas {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!(!init.freeze.alphas && !init.freeze.projections && !init.freeze.biases);
    }

    #[test]
    fn make_baseline_average_rejects_unequal_dims() {
        let f1 = facet("a", &["w"], array![[1.0, 2.0]]);
        let f2 = facet("b", &["w"], array![[3.0]]);
        assert!(matches!(
            make_baseline(BaselineKind::Average, &[f1, f2], None, 0),
            Err(Error::InvalidDimensions(_))
        ));
    }

    #[test]
    fn prism_frozen_matches_average_bitwise() {
        let f1 = facet("a", &["w"], array![[0.3, -1.7]]);
        let f2 = facet("b", &["w"], array![[2.2, 0.9]]);
        let facets = [f1, f2];
        let avg = make_baseline(BaselineKind::Average, &facets, None, 0).unwrap();
        let prism = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let (x, y) = (array![0.3, -1.7], array![2.2, 0.9]);
        let a = meta_embed(&avg.params, &avg.config, &[x.view(), y.view()]).unwrap();
        let b = meta_embed(&prism.params, &prism.config, &[x.view(), y.view()]).unwrap();
        for (u, v) in a.iter().zip(b.iter()) {
            assert_eq!(u.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn projection_override_variants() {
        let rows = array![[1.0, 0.0], [0.0, 1.0]];
        let facets = vec![facet("a", &["x", "y"], rows.clone()), facet("b", &["x", "y"], rows)];
        let mut init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        apply_projection_override(&mut init, ProjectionOverride::None).unwrap();
        assert_eq!(init.config.projection, ProjectionKind::Identity);
        assert!(init.freeze.projections && init.freeze.biases);

        let mut init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        apply_projection_override(&mut init, ProjectionOverride::Unconstrained).unwrap();
        assert_eq!(init.config.projection, ProjectionKind::Unconstrained);
    }

    #[test]
    fn export_matches_on_the_fly_and_handles_oov() {
        let f1 = facet("a", &["u", "v"], array![[1.0, 0.0], [3.0, 1.0]]);
        let f2 = facet("b", &["u"], array![[0.0, 2.0]]);
        let facets = vec![f1, f2];
        let init = make_baseline(BaselineKind::Average, &facets, None, 0).unwrap();
        let union = union_vocab(&facets).unwrap();
        let table = export_table(&init.params, &init.config, &facets, &union).unwrap();

        // Every row equals the on-the-fly computation bit for bit.
        for (i, token) in union.tokens().iter().enumerate() {
            let views: Vec<_> = facets.iter().map(|f| f.lookup(token).0).collect();
            let direct = meta_embed(&init.params, &init.config, &views).unwrap();
            for (a, b) in table.row(i).iter().zip(direct.iter()) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        // Token "v" is OOV in facet b: row = (w1 + centroid_b) / 2.
        let i = table.position("v").unwrap();
        let expected = [(3.0 + 0.0) / 2.0, (1.0 + 2.0) / 2.0];
        for (a, b) in table.row(i).iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn export_is_independent_of_worker_count() {
        let f1 = facet("a", &["u", "v", "w"], array![[1.0], [2.0], [3.0]]);
        let init = make_baseline(BaselineKind::Average, std::slice::from_ref(&f1), None, 0).unwrap();
        let facets = vec![f1];
        let union = union_vocab(&facets).unwrap();
        let single =
            export_table_with_workers(&init.params, &init.config, &facets, &union, 1).unwrap();
        for workers in [2, 3, 7] {
            let multi =
                export_table_with_workers(&init.params, &init.config, &facets, &union, workers)
                    .unwrap();
            assert_eq!(single, multi);
        }
    }

    #[test]
    fn table_storage_is_one_row_per_token() {
        let tokens: Vec<String> = (0..100).map(|i| format!("t{i:03}")).collect();
        let rows = Array2::zeros((100, 300));
        let table = MetaTable::from_parts(tokens, rows).unwrap();
        assert_eq!(table.rows().len(), 30_000);
    }

    #[test]
    fn text_round_trip_is_lossless() {
        let dir = std::env::temp_dir().join(format!("prism_meta_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("table.vec");

        let mut rng = seeded_rng(9, "table_round_trip");
        let rows = Array2::from_shape_fn((5, 4), |_| (rng.random::<f64>() - 0.5) * 3.0);
        let tokens: Vec<String> = (0..5).map(|i| format!("tok{i}")).collect();
        let table = MetaTable::from_parts(tokens, rows).unwrap();
        table.write_text(&path).unwrap();

        let loaded = Facet::load(&path, FacetFormat::CountedHeader).unwrap();
        for (a, b) in table.rows().iter().zip(loaded.table().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    use crate::facet::FacetFormat;

    #[test]
    fn raw_round_trip_restores_stored_f32s() {
        let dir = std::env::temp_dir().join(format!("prism_raw_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let data = dir.join("table.prism");
        let toks = dir.join("table.tokens");

        let rows = array![[0.125, -7.5], [3.0, 0.0625]];
        let table = MetaTable::from_parts(vec!["a".into(), "b".into()], rows).unwrap();
        table.write_raw(&data, &toks).unwrap();

        let loaded = MetaTable::read_raw(&data, &toks).unwrap();
        // These values are exactly representable as f32, so the round trip is
        // bit-exact even through the f32 payload.
        assert_eq!(table, loaded);

        let payload = std::fs::metadata(&data).unwrap().len();
        assert_eq!(payload, 6 + 16 + 4 * 2 * 2);
        std::fs::remove_dir_all(&dir).ok();
    }
}
