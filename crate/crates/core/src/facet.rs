//! Facet store: loading, validating, and equalizing source embedding sets.
//!
//! A *facet* is one pre-trained embedding set (vocabulary plus dense vector
//! table). Facets are immutable after construction and safe to share across
//! threads. Out-of-vocabulary lookups return the facet centroid; source
//! vectors are never normalized on load, so vector norms carry whatever
//! signal the original training left in them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::util::seeded_rng;

/// Text layout of an embedding file.
///
/// `Plain` is one `token v1 .. vd` record per line. `CountedHeader` has a
/// leading `vocab_size dim` line before the same records. `Auto` sniffs the
/// header by checking whether the first line holds exactly two integer
/// fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FacetFormat {
    Plain,
    CountedHeader,
    Auto,
}

/// One source embedding set: an ordered vocabulary, a row per token, and the
/// cached centroid (arithmetic mean of all rows).
///
/// Invariants enforced at construction: tokens unique, every row the same
/// width, every value finite, at least one row.
#[derive(Debug, Clone)]
pub struct Facet {
    name: String,
    vocab: Vec<String>,
    index: HashMap<String, usize>,
    table: Array2<f64>,
    centroid: Array1<f64>,
}

impl Facet {
    /// Builds a facet from parts, validating all invariants.
    pub fn new(name: impl Into<String>, vocab: Vec<String>, table: Array2<f64>) -> Result<Self> {
        if vocab.is_empty() || table.nrows() == 0 {
            return Err(Error::EmptyFacet);
        }
        if table.nrows() != vocab.len() {
            return Err(Error::DimensionMismatch {
                context: "facet table rows vs vocabulary".into(),
                expected: vocab.len(),
                got: table.nrows(),
            });
        }
        if table.ncols() == 0 {
            return Err(Error::InvalidDimensions("facet dimension must be positive".into()));
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, token) in vocab.iter().enumerate() {
            if index.insert(token.clone(), i).is_some() {
                return Err(Error::DuplicateToken { token: token.clone() });
            }
        }
        for (token, row) in vocab.iter().zip(table.outer_iter()) {
            if let Some(bad) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::NonFiniteValue {
                    token: token.clone(),
                    value: bad.to_string(),
                });
            }
        }
        let centroid = table.mean_axis(Axis(0)).expect("non-empty table");
        Ok(Self {
            name: name.into(),
            vocab,
            index,
            table,
            centroid,
        })
    }

    /// Loads a facet from a whitespace-separated UTF-8 text file.
    pub fn load(path: impl AsRef<Path>, format: FacetFormat) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        Self::parse(&name, &text, format, &path.display().to_string())
    }

    /// Parses embedding text. Blank lines are skipped.
    pub fn parse(name: &str, text: &str, format: FacetFormat, source: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l))
            .filter(|(_, l)| !l.trim().is_empty())
            .peekable();

        let header = match format {
            FacetFormat::Plain => None,
            FacetFormat::CountedHeader | FacetFormat::Auto => {
                let looks_like_header = lines.peek().is_some_and(|(_, l)| {
                    let fields: Vec<&str> = l.split_whitespace().collect();
                    fields.len() == 2 && fields.iter().all(|f| f.parse::<usize>().is_ok())
                });
                match (format, looks_like_header) {
                    (FacetFormat::CountedHeader, false) => {
                        let line = lines.peek().map(|(n, _)| *n).unwrap_or(1);
                        return Err(Error::MalformedLine {
                            line,
                            reason: "expected a `vocab_size dim` header line".into(),
                        });
                    }
                    (_, false) => None,
                    (_, true) => {
                        let (_, l) = lines.next().expect("peeked");
                        let mut it = l.split_whitespace().map(|f| f.parse::<usize>().unwrap());
                        Some((it.next().unwrap(), it.next().unwrap()))
                    }
                }
            }
        };

        let mut vocab = Vec::new();
        let mut values = Vec::new();
        let mut dim: Option<usize> = None;
        for (line_no, line) in lines {
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-blank line").to_string();
            let mut row = Vec::with_capacity(dim.unwrap_or(0));
            for field in fields {
                let value: f64 = field.parse().map_err(|_| Error::NonFiniteValue {
                    token: token.clone(),
                    value: field.to_string(),
                })?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteValue {
                        token,
                        value: field.to_string(),
                    });
                }
                row.push(value);
            }
            let expected = *dim.get_or_insert_with(|| header.map_or(row.len(), |(_, d)| d));
            if expected == 0 {
                return Err(Error::MalformedLine {
                    line: line_no,
                    reason: format!("record for {token:?} has no values"),
                });
            }
            if row.len() != expected {
                return Err(Error::DimensionMismatch {
                    context: format!("record for token {token:?} (line {line_no})"),
                    expected,
                    got: row.len(),
                });
            }
            vocab.push(token);
            values.extend_from_slice(&row);
        }

        if vocab.is_empty() {
            return Err(Error::EmptyFile { path: source.into() });
        }
        if let Some((count, _)) = header {
            if count != vocab.len() {
                return Err(Error::MalformedLine {
                    line: 1,
                    reason: format!("header declares {count} records, found {}", vocab.len()),
                });
            }
        }
        let dim = dim.expect("at least one record");
        let table = Array2::from_shape_vec((vocab.len(), dim), values)
            .expect("row width validated per record");
        Self::new(name, vocab, table)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Vector width `d_f`.
    pub fn dim(&self) -> usize {
        self.table.ncols()
    }

    /// Vocabulary size.
    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    /// Tokens in file order (by convention, descending corpus frequency).
    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn table(&self) -> ArrayView2<'_, f64> {
        self.table.view()
    }

    /// Mean of all rows, cached at construction.
    pub fn centroid(&self) -> ArrayView1<'_, f64> {
        self.centroid.view()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.table.row(i)
    }

    /// Total lookup: the token's row when in vocabulary, otherwise the facet
    /// centroid. The flag is true when the token was out of vocabulary.
    pub fn lookup(&self, token: &str) -> (ArrayView1<'_, f64>, bool) {
        match self.index.get(token) {
            Some(&i) => (self.table.row(i), false),
            None => (self.centroid.view(), true),
        }
    }

    /// Extends every row with zeros up to `target_dim` and re-derives the
    /// centroid. The name is annotated with the equalization applied.
    pub fn zero_pad(&self, target_dim: usize) -> Result<Facet> {
        if target_dim < self.dim() {
            return Err(Error::TargetSmallerThanSource {
                target: target_dim,
                current: self.dim(),
            });
        }
        let mut table = Array2::zeros((self.len(), target_dim));
        table
            .slice_mut(ndarray::s![.., ..self.dim()])
            .assign(&self.table);
        Facet::new(
            format!("{}|pad{}", self.name, target_dim),
            self.vocab.clone(),
            table,
        )
    }

    /// Projects rows onto the top `target_dim` principal directions of the
    /// mean-centered table. Deterministic: the start block comes from a fixed
    /// seed and each sweep re-orthonormalizes by modified Gram-Schmidt.
    /// Returned rows are the projection coefficients of the centered rows.
    pub fn pca_compress(&self, target_dim: usize, max_iters: usize, tol: f64) -> Result<PcaCompressed> {
        if target_dim == 0 {
            return Err(Error::InvalidDimensions("pca target dimension must be positive".into()));
        }
        if target_dim > self.dim() {
            return Err(Error::InvalidDimensions(format!(
                "pca target dimension {target_dim} exceeds the facet dimension {}",
                self.dim()
            )));
        }
        if target_dim > self.len() {
            return Err(Error::InvalidDimensions(format!(
                "pca target dimension {target_dim} exceeds vocabulary size {}",
                self.len()
            )));
        }

        let mean = self.table.mean_axis(Axis(0)).expect("non-empty");
        let centered = &self.table - &mean.broadcast((self.len(), self.dim())).unwrap();
        // Unnormalized scatter matrix of the centered rows.
        let scatter = centered.t().dot(&centered);

        let mut rng = seeded_rng(PCA_START_SEED, "pca_start_block");
        let mut q = Array2::from_shape_fn((self.dim(), target_dim), |_| {
            rng.random::<f64>() * 2.0 - 1.0
        });
        orthonormalize_columns(&mut q);

        let mut converged = false;
        let mut last_change = f64::INFINITY;
        let mut sweeps = 0;
        for sweep in 1..=max_iters {
            let mut next = scatter.dot(&q);
            orthonormalize_columns(&mut next);
            // Subspace change as the distance between orthogonal projectors.
            let change = (&next.dot(&next.t()) - &q.dot(&q.t()))
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt();
            q = next;
            sweeps = sweep;
            last_change = change;
            if change < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::NoConvergence {
                max_iters,
                change: last_change,
            });
        }

        // Rayleigh quotients estimate the captured eigenvalues; directions at
        // numerical zero mean the requested rank is not present in the data.
        let rayleigh: Vec<f64> = (0..target_dim)
            .map(|j| {
                let col = q.column(j);
                col.dot(&scatter.dot(&col))
            })
            .collect();
        let effective_rank = rayleigh.iter().filter(|&&l| l > 1e-12).count();
        let rank_deficient = effective_rank < target_dim;

        let rows = centered.dot(&q);
        let name = if rank_deficient {
            format!("{}|pca{}~rankdef", self.name, target_dim)
        } else {
            format!("{}|pca{}", self.name, target_dim)
        };
        let facet = Facet::new(name, self.vocab.clone(), rows)?;
        Ok(PcaCompressed {
            facet,
            rank_deficient,
            sweeps,
            eigenvalues: rayleigh,
        })
    }
}

/// Fixed seed for the orthogonal-iteration start block.
const PCA_START_SEED: u64 = 0x70ca;

/// Result of [`Facet::pca_compress`]: the compressed facet plus diagnostics.
#[derive(Debug, Clone)]
pub struct PcaCompressed {
    pub facet: Facet,
    /// True when fewer than `target_dim` directions carried eigenvalue mass
    /// above 1e-12. The projection proceeds regardless and the facet name is
    /// annotated accordingly.
    pub rank_deficient: bool,
    pub sweeps: usize,
    pub eigenvalues: Vec<f64>,
}

/// Modified Gram-Schmidt over the columns. Columns that vanish (to numerical
/// zero) are replaced by the first canonical basis vector independent of the
/// columns already fixed, which keeps the procedure deterministic on
/// rank-deficient input.
pub(crate) fn orthonormalize_columns(m: &mut Array2<f64>) {
    let (rows, cols) = m.dim();
    for j in 0..cols {
        for i in 0..j {
            let prev = m.column(i).to_owned();
            let proj = prev.dot(&m.column(j));
            let mut col = m.column_mut(j);
            col.scaled_add(-proj, &prev);
        }
        let norm = m.column(j).dot(&m.column(j)).sqrt();
        if norm > 1e-150 {
            m.column_mut(j).mapv_inplace(|v| v / norm);
            continue;
        }
        // Deterministic fallback basis vector.
        let mut replaced = false;
        for candidate in 0..rows {
            let mut col = Array1::zeros(rows);
            col[candidate] = 1.0;
            for i in 0..j {
                let prev = m.column(i).to_owned();
                let proj = prev.dot(&col);
                col.scaled_add(-proj, &prev);
            }
            let n = col.dot(&col).sqrt();
            if n > 0.5 {
                col.mapv_inplace(|v| v / n);
                m.column_mut(j).assign(&col);
                replaced = true;
                break;
            }
        }
        if !replaced {
            // More columns than dimensions; leave a zero column. Callers
            // guard target_dim <= dim so this is unreachable in practice.
            m.column_mut(j).fill(0.0);
        }
    }
}

/// Sorted union of facet vocabularies with per-facet membership flags.
#[derive(Debug, Clone)]
pub struct VocabUnion {
    tokens: Vec<String>,
    membership: Vec<u64>,
    facet_count: usize,
    index: HashMap<String, usize>,
}

impl VocabUnion {
    /// Number of tokens in the union.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Tokens in strictly increasing byte order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn facet_count(&self) -> usize {
        self.facet_count
    }

    pub fn position(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Whether union token `token_idx` is in facet `facet_idx`'s vocabulary.
    pub fn is_member(&self, token_idx: usize, facet_idx: usize) -> bool {
        self.membership[token_idx] >> facet_idx & 1 == 1
    }
}

/// Builds the sorted, deduplicated union of the facets' vocabularies.
pub fn union_vocab(facets: &[Facet]) -> Result<VocabUnion> {
    if facets.is_empty() {
        return Err(Error::NoFacets);
    }
    if facets.len() > 64 {
        return Err(Error::Config("at most 64 facets are supported".into()));
    }
    let mut merged: BTreeMap<String, u64> = BTreeMap::new();
    for (f, facet) in facets.iter().enumerate() {
        for token in facet.vocab() {
            *merged.entry(token.clone()).or_insert(0) |= 1 << f;
        }
    }
    let mut tokens = Vec::with_capacity(merged.len());
    let mut membership = Vec::with_capacity(merged.len());
    let mut index = HashMap::with_capacity(merged.len());
    for (i, (token, mask)) in merged.into_iter().enumerate() {
        index.insert(token.clone(), i);
        tokens.push(token);
        membership.push(mask);
    }
    Ok(VocabUnion {
        tokens,
        membership,
        facet_count: facets.len(),
        index,
    })
}
