//! Joint training of the meta-embedding layer and a small downstream head by
//! cross-entropy, with analytic gradients, Adam updates, a reduce-on-plateau
//! schedule, and the orthogonal retraction interleaved after each step.
//!
//! Source facet vectors are frozen throughout; only the meta layer (weights,
//! projections, biases, attention) and the head learn. Batch loss is the
//! mean over examples (over positions for tagging), accumulated over the
//! batch in a fixed canonical order so results do not depend on shuffle
//! order within a batch.

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::facet::Facet;
use crate::meta::{
    dme_weights, orthogonal_retraction, orthogonality_error, CombinerKind, FreezePolicy,
    MetaConfig, MetaParams, ProjectionKind,
};
use crate::optim::{adam_update, AdamConfig, AdamState, PlateauSchedule};
use crate::tasks::{micro_f1_without_o, window_features, ClassifiedExample, TaggedSentence, TaskData};
use crate::util::{argmax, derive_seed, seeded_rng, softmax};

/// Downstream model attached to the meta layer: a mean-pooled linear
/// classifier for whole examples, or a per-position linear tagger over a
/// window of meta-embeddings (out-of-sentence positions contribute zeros).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    PooledClassifier,
    WindowTagger { window: usize },
}

impl HeadKind {
    pub fn feature_dim(&self, meta_dim: usize) -> usize {
        match self {
            HeadKind::PooledClassifier => meta_dim,
            HeadKind::WindowTagger { window } => meta_dim * (2 * window + 1),
        }
    }
}

/// Affine head: `classes x features` weights plus a bias per class.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl HeadParams {
    /// Fan-in scaled uniform init with a dedicated seed stream.
    pub fn init(classes: usize, feature_dim: usize, seed: u64) -> Self {
        let mut rng = seeded_rng(seed, "head_init");
        let scale = 1.0 / (feature_dim as f64).sqrt();
        let weight =
            Array2::from_shape_fn((classes, feature_dim), |_| (rng.random::<f64>() * 2.0 - 1.0) * scale);
        Self {
            weight,
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.weight.ncols()
    }

    fn probabilities(&self, features: &Array1<f64>) -> Vec<f64> {
        let logits = self.weight.dot(features) + &self.bias;
        softmax(logits.as_slice().expect("contiguous"))
    }
}

/// Negative log-likelihood of the gold class. Probabilities below 1e-12 are
/// clamped; the flag reports that the clamp fired.
pub fn cross_entropy(probs: &[f64], gold: usize) -> (f64, bool) {
    let p = probs[gold];
    if p < 1e-12 {
        (-(1e-12f64).ln(), true)
    } else {
        (-p.ln(), false)
    }
}

/// Gradient accumulators for every learnable group.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub alphas: Vec<f64>,
    pub projections: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    /// `(d/d attention_vector, d/d attention_bias)`.
    pub attention: Option<(Array1<f64>, f64)>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl Gradients {
    pub fn zeros(params: &MetaParams, head: &HeadParams) -> Self {
        Self {
            alphas: vec![0.0; params.alphas.len()],
            projections: params
                .projections
                .iter()
                .map(|p| Array2::zeros(p.dim()))
                .collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
            attention: params
                .attention
                .as_ref()
                .map(|a| (Array1::zeros(a.vector.len()), 0.0)),
            head_weight: Array2::zeros(head.weight.dim()),
            head_bias: Array1::zeros(head.bias.len()),
        }
    }

    fn all_finite(&self) -> bool {
        self.alphas.iter().all(|v| v.is_finite())
            && self.projections.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
            && self.attention.as_ref().is_none_or(|(a, b)| {
                a.iter().all(|v| v.is_finite()) && b.is_finite()
            })
            && self.head_weight.iter().all(|v| v.is_finite())
            && self.head_bias.iter().all(|v| v.is_finite())
    }
}

/// Aggregates of one batch pass.
#[derive(Debug, Clone)]
pub struct BatchStats {
    /// Mean loss over the batch's examples (positions for tagging).
    pub loss: f64,
    /// Number of units the mean was taken over.
    pub count: usize,
    /// How many cross-entropy terms hit the probability clamp.
    pub clamped: usize,
    /// Summed attention weights over all processed tokens (attention mode).
    pub attention_sums: Option<Vec<f64>>,
    pub attention_tokens: usize,
}

/// A borrowed batch in canonical order.
pub enum BatchRef<'a> {
    Classify(Vec<&'a ClassifiedExample>),
    Tag(Vec<&'a TaggedSentence>),
}

struct TokenForward<'a> {
    views: Vec<ArrayView1<'a, f64>>,
    transformed: Vec<Array1<f64>>,
    weights: Vec<f64>,
    meta: Array1<f64>,
}

fn embed_token<'a>(
    facets: &'a [Facet],
    params: &MetaParams,
    config: &MetaConfig,
    token: &str,
) -> TokenForward<'a> {
    let views: Vec<ArrayView1<'a, f64>> = facets.iter().map(|f| f.lookup(token).0).collect();
    let transformed: Vec<Array1<f64>> = views
        .iter()
        .enumerate()
        .map(|(f, v)| params.transform(f, *v))
        .collect();
    let weights: Vec<f64> = match config.combiner {
        CombinerKind::Attention => dme_weights(
            &transformed,
            params.attention.as_ref().expect("validated attention params"),
        ),
        _ => params.alphas.clone(),
    };
    let mut meta = Array1::zeros(config.meta_dim);
    for (alpha, t) in weights.iter().zip(&transformed) {
        meta.scaled_add(*alpha, t);
    }
    TokenForward {
        views,
        transformed,
        weights,
        meta,
    }
}

/// Attention-mode backward needs the attention vector itself.
fn meta_backward_attention(
    tf: &TokenForward<'_>,
    upstream: &Array1<f64>,
    params: &MetaParams,
    config: &MetaConfig,
    grads: &mut Gradients,
) {
    let facet_count = config.facet_count();
    let attention = params.attention.as_ref().expect("attention params");
    let u: Vec<f64> = tf.transformed.iter().map(|t| upstream.dot(t)).collect();
    let mixed: f64 = tf.weights.iter().zip(&u).map(|(a, x)| a * x).sum();
    let score_grads: Vec<f64> = (0..facet_count)
        .map(|f| tf.weights[f] * (u[f] - mixed))
        .collect();

    {
        let (att_vec, att_bias) = grads.attention.as_mut().expect("attention grads");
        for f in 0..facet_count {
            att_vec.scaled_add(score_grads[f], &tf.transformed[f]);
            *att_bias += score_grads[f];
        }
    }

    for f in 0..facet_count {
        // dt_f = alpha_f * g + ds_f * a
        let mut dt = upstream * tf.weights[f];
        dt.scaled_add(score_grads[f], &attention.vector);
        for (r, &dt_r) in dt.iter().enumerate() {
            if dt_r != 0.0 {
                grads.projections[f].row_mut(r).scaled_add(dt_r, &tf.views[f]);
            }
        }
        grads.biases[f] += &dt;
    }
}

/// Pushes one token's upstream gradient `g = dL/d meta(w)` through the meta
/// layer. Scalar combiners: `dalpha_f = g . t_f`, `dP_f = alpha_f g w_f^T`,
/// `db_f = alpha_f g`. Attention additionally routes through the softmax
/// scores (see [`meta_backward_attention`]).
fn backward_token(
    tf: &TokenForward<'_>,
    upstream: &Array1<f64>,
    params: &MetaParams,
    config: &MetaConfig,
    grads: &mut Gradients,
) {
    if config.combiner == CombinerKind::Attention {
        meta_backward_attention(tf, upstream, params, config, grads);
    } else {
        for f in 0..config.facet_count() {
            grads.alphas[f] += upstream.dot(&tf.transformed[f]);
            let alpha = tf.weights[f];
            for (r, &g_r) in upstream.iter().enumerate() {
                let scaled = alpha * g_r;
                if scaled != 0.0 {
                    grads.projections[f].row_mut(r).scaled_add(scaled, &tf.views[f]);
                }
            }
            grads.biases[f].scaled_add(alpha, upstream);
        }
    }
}

fn run_batch(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    head_kind: HeadKind,
    batch: &BatchRef<'_>,
    mut grads: Option<&mut Gradients>,
) -> Result<BatchStats> {
    let mut stats = BatchStats {
        loss: 0.0,
        count: 0,
        clamped: 0,
        attention_sums: (config.combiner == CombinerKind::Attention)
            .then(|| vec![0.0; config.facet_count()]),
        attention_tokens: 0,
    };

    let track_attention = |stats: &mut BatchStats, tfs: &[TokenForward<'_>]| {
        if let Some(sums) = stats.attention_sums.as_mut() {
            for tf in tfs {
                for (s, w) in sums.iter_mut().zip(&tf.weights) {
                    *s += *w;
                }
            }
            stats.attention_tokens += tfs.len();
        }
    };

    match (batch, head_kind) {
        (BatchRef::Classify(examples), HeadKind::PooledClassifier) => {
            if examples.is_empty() {
                return Err(Error::EmptyDataset("batch"));
            }
            let scale = 1.0 / examples.len() as f64;
            stats.count = examples.len();
            for example in examples {
                if example.tokens.is_empty() {
                    return Err(Error::EmptyExample);
                }
                let tfs: Vec<TokenForward<'_>> = example
                    .tokens
                    .iter()
                    .map(|t| embed_token(facets, params, config, t))
                    .collect();
                track_attention(&mut stats, &tfs);
                let token_count = tfs.len() as f64;
                let mut pooled = Array1::zeros(config.meta_dim);
                for tf in &tfs {
                    pooled += &tf.meta;
                }
                pooled.mapv_inplace(|v| v / token_count);

                let probs = head.probabilities(&pooled);
                let (ce, clamp) = cross_entropy(&probs, example.label);
                stats.loss += ce * scale;
                stats.clamped += usize::from(clamp);

                if let Some(grads) = grads.as_deref_mut() {
                    let mut dlogits = Array1::from_vec(probs);
                    dlogits[example.label] -= 1.0;
                    dlogits.mapv_inplace(|v| v * scale);

                    for (r, &d) in dlogits.iter().enumerate() {
                        grads.head_weight.row_mut(r).scaled_add(d, &pooled);
                    }
                    grads.head_bias += &dlogits;

                    let dpooled = head.weight.t().dot(&dlogits);
                    let upstream = dpooled.mapv(|v| v / token_count);
                    for tf in &tfs {
                        backward_token(tf, &upstream, params, config, grads);
                    }
                }
            }
        }
        (BatchRef::Tag(sentences), HeadKind::WindowTagger { window }) => {
            if sentences.is_empty() {
                return Err(Error::EmptyDataset("batch"));
            }
            let total_positions: usize = sentences.iter().map(|s| s.tokens.len()).sum();
            if total_positions == 0 {
                return Err(Error::EmptyExample);
            }
            let scale = 1.0 / total_positions as f64;
            stats.count = total_positions;
            for sentence in sentences {
                if sentence.tokens.is_empty() {
                    return Err(Error::EmptyExample);
                }
                let tfs: Vec<TokenForward<'_>> = sentence
                    .tokens
                    .iter()
                    .map(|t| embed_token(facets, params, config, t))
                    .collect();
                track_attention(&mut stats, &tfs);
                let metas: Vec<Array1<f64>> = tfs.iter().map(|tf| tf.meta.clone()).collect();

                let mut upstream: Vec<Array1<f64>> = grads
                    .is_some()
                    .then(|| vec![Array1::zeros(config.meta_dim); metas.len()])
                    .unwrap_or_default();

                for (pos, &gold) in sentence.tag_ids.iter().enumerate() {
                    let features = window_features(&metas, pos, window, config.meta_dim);
                    let probs = head.probabilities(&features);
                    let (ce, clamp) = cross_entropy(&probs, gold);
                    stats.loss += ce * scale;
                    stats.clamped += usize::from(clamp);

                    if let Some(grads) = grads.as_deref_mut() {
                        let mut dlogits = Array1::from_vec(probs);
                        dlogits[gold] -= 1.0;
                        dlogits.mapv_inplace(|v| v * scale);

                        for (r, &d) in dlogits.iter().enumerate() {
                            grads.head_weight.row_mut(r).scaled_add(d, &features);
                        }
                        grads.head_bias += &dlogits;

                        let dfeatures = head.weight.t().dot(&dlogits);
                        let k = window as isize;
                        for (block, offset) in (-k..=k).enumerate() {
                            let source = pos as isize + offset;
                            if source < 0 || source as usize >= metas.len() {
                                continue;
                            }
                            let slice = dfeatures.slice(ndarray::s![
                                block * config.meta_dim..(block + 1) * config.meta_dim
                            ]);
                            upstream[source as usize] += &slice;
                        }
                    }
                }

                if grads.is_some() {
                    let grads = grads.as_deref_mut().expect("checked");
                    for (tf, g) in tfs.iter().zip(&upstream) {
                        backward_token(tf, g, params, config, grads);
                    }
                }
            }
        }
        _ => {
            return Err(Error::Config(
                "task kind does not match the configured head".into(),
            ))
        }
    }

    if !stats.loss.is_finite() {
        return Err(Error::NonFinite("batch loss"));
    }
    if let Some(grads) = grads {
        if !grads.all_finite() {
            return Err(Error::NonFiniteGradient("batch backward"));
        }
    }
    Ok(stats)
}

/// Forward-only pass: mean batch loss (the finite-difference oracle target).
pub fn batch_loss(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    head_kind: HeadKind,
    batch: &BatchRef<'_>,
) -> Result<BatchStats> {
    run_batch(facets, params, config, head, head_kind, batch, None)
}

/// Forward plus analytic gradients for every group.
pub fn batch_forward_backward(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    head_kind: HeadKind,
    batch: &BatchRef<'_>,
) -> Result<(BatchStats, Gradients)> {
    let mut grads = Gradients::zeros(params, head);
    let stats = run_batch(facets, params, config, head, head_kind, batch, Some(&mut grads))?;
    Ok((stats, grads))
}

/// Class probabilities for one classification example.
pub fn forward_classify(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    tokens: &[String],
) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyExample);
    }
    let mut pooled = Array1::zeros(config.meta_dim);
    for token in tokens {
        pooled += &embed_token(facets, params, config, token).meta;
    }
    pooled.mapv_inplace(|v| v / tokens.len() as f64);
    Ok(head.probabilities(&pooled))
}

/// Per-position tag probabilities for one sentence.
pub fn forward_tag(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    window: usize,
    tokens: &[String],
) -> Result<Array2<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyExample);
    }
    let metas: Vec<Array1<f64>> = tokens
        .iter()
        .map(|t| embed_token(facets, params, config, t).meta)
        .collect();
    let mut out = Array2::zeros((tokens.len(), head.classes()));
    for pos in 0..tokens.len() {
        let features = window_features(&metas, pos, window, config.meta_dim);
        let probs = head.probabilities(&features);
        out.row_mut(pos).assign(&Array1::from_vec(probs));
    }
    Ok(out)
}

/// One optimizer step: Adam on every unfrozen group, then (in orthogonal
/// mode) one retraction of each projection. Frozen groups are untouched,
/// including their optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn apply_step(
    params: &mut MetaParams,
    head: &mut HeadParams,
    grads: &Gradients,
    freeze: &FreezePolicy,
    projection: ProjectionKind,
    lr: f64,
    adam: &AdamConfig,
    state: &mut AdamState,
    beta_retraction: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFiniteGradient("optimizer step"));
    }
    state.step += 1;
    let step = state.step;

    if !freeze.alphas {
        adam_update(
            &mut params.alphas,
            &grads.alphas,
            state.alphas.m.as_slice_mut().expect("contiguous"),
            state.alphas.v.as_slice_mut().expect("contiguous"),
            lr,
            adam,
            step,
        );
    }
    if !freeze.projections {
        for (i, p) in params.projections.iter_mut().enumerate() {
            let moments = &mut state.projections[i];
            adam_update(
                p.as_slice_mut().expect("contiguous"),
                grads.projections[i].as_slice().expect("contiguous"),
                moments.m.as_slice_mut().expect("contiguous"),
                moments.v.as_slice_mut().expect("contiguous"),
                lr,
                adam,
                step,
            );
        }
    }
    if !freeze.biases {
        for (i, b) in params.biases.iter_mut().enumerate() {
            let moments = &mut state.biases[i];
            adam_update(
                b.as_slice_mut().expect("contiguous"),
                grads.biases[i].as_slice().expect("contiguous"),
                moments.m.as_slice_mut().expect("contiguous"),
                moments.v.as_slice_mut().expect("contiguous"),
                lr,
                adam,
                step,
            );
        }
    }
    if !freeze.attention {
        if let (Some(att), Some((g_vec, g_bias)), Some((m_vec, m_bias))) = (
            params.attention.as_mut(),
            grads.attention.as_ref(),
            state.attention.as_mut(),
        ) {
            adam_update(
                att.vector.as_slice_mut().expect("contiguous"),
                g_vec.as_slice().expect("contiguous"),
                m_vec.m.as_slice_mut().expect("contiguous"),
                m_vec.v.as_slice_mut().expect("contiguous"),
                lr,
                adam,
                step,
            );
            let mut bias = [att.bias];
            let mut m = [m_bias.m];
            let mut v = [m_bias.v];
            adam_update(&mut bias, &[*g_bias], &mut m, &mut v, lr, adam, step);
            att.bias = bias[0];
            m_bias.m = m[0];
            m_bias.v = v[0];
        }
    }
    if !freeze.head {
        adam_update(
            head.weight.as_slice_mut().expect("contiguous"),
            grads.head_weight.as_slice().expect("contiguous"),
            state.head_weight.m.as_slice_mut().expect("contiguous"),
            state.head_weight.v.as_slice_mut().expect("contiguous"),
            lr,
            adam,
            step,
        );
        adam_update(
            head.bias.as_slice_mut().expect("contiguous"),
            grads.head_bias.as_slice().expect("contiguous"),
            state.head_bias.m.as_slice_mut().expect("contiguous"),
            state.head_bias.v.as_slice_mut().expect("contiguous"),
            lr,
            adam,
            step,
        );
    }

    if projection == ProjectionKind::Orthogonal && !freeze.projections {
        for p in params.projections.iter_mut() {
            *p = orthogonal_retraction(p.view(), beta_retraction)?;
        }
    }
    Ok(())
}

/// Validation metric: accuracy for classification, token-level micro F1
/// without the `O` tag for tagging.
pub fn evaluate(
    facets: &[Facet],
    params: &MetaParams,
    config: &MetaConfig,
    head: &HeadParams,
    head_kind: HeadKind,
    data: &TaskData,
) -> Result<f64> {
    match (data, head_kind) {
        (TaskData::Classification(d), HeadKind::PooledClassifier) => {
            let mut predictions = Vec::with_capacity(d.examples.len());
            let mut golds = Vec::with_capacity(d.examples.len());
            for example in &d.examples {
                let probs = forward_classify(facets, params, config, head, &example.tokens)?;
                predictions.push(argmax(&probs));
                golds.push(example.label);
            }
            crate::tasks::accuracy(&predictions, &golds)
        }
        (TaskData::Tagging(d), HeadKind::WindowTagger { window }) => {
            let mut predictions = Vec::new();
            let mut golds = Vec::new();
            for sentence in &d.sentences {
                let probs = forward_tag(facets, params, config, head, window, &sentence.tokens)?;
                for (pos, &gold) in sentence.tag_ids.iter().enumerate() {
                    predictions.push(argmax(probs.row(pos).as_slice().expect("contiguous")));
                    golds.push(gold);
                }
            }
            let o_tag = d.o_tag();
            micro_f1_without_o(&predictions, &golds, |&t| Some(t) == o_tag)
        }
        _ => Err(Error::Config(
            "task kind does not match the configured head".into(),
        )),
    }
}

/// Training hyperparameters. `learning_rate` defaults depend on the task
/// (0.001 for tagging, 0.0004 for classification) and are resolved by the
/// caller before construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta_retraction: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub freeze: FreezePolicy,
}

impl TrainConfig {
    /// Paper-default learning rate per task family.
    pub fn default_learning_rate(tagging: bool) -> f64 {
        if tagging {
            0.001
        } else {
            0.0004
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be non-negative".into()));
        }
        if self.beta_retraction <= 0.0 {
            return Err(Error::Config("retraction beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.plateau_factor) || self.plateau_factor <= 0.0 {
            return Err(Error::Config("plateau factor must lie in (0, 1)".into()));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config("plateau patience must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            beta_retraction: 0.001,
            plateau_factor: 0.1,
            plateau_patience: 2,
            max_epochs: 100,
            batch_size: 8,
            seed: 0,
            adam: AdamConfig::default(),
            freeze: FreezePolicy::default(),
        }
    }
}

/// One epoch's history row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_metric: f64,
    /// Learning rate in effect during this epoch's updates.
    pub lr: f64,
    /// Stored facet weights, or the epoch-mean attention weights in
    /// attention mode.
    pub alphas: Vec<f64>,
    /// Per-facet `||P P^T - I||_F` after the epoch's final step.
    pub ortho_errors: Vec<f64>,
    /// Maximum per-facet orthogonality error observed after any step of this
    /// epoch.
    pub max_step_ortho_error: f64,
    pub clamped: usize,
}

/// Full training transcript plus the best-validation parameters.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Parameters from the best-validation epoch (earliest on ties).
    pub params: MetaParams,
    pub head: HeadParams,
    /// Parameters as of the last epoch.
    pub final_params: MetaParams,
    pub final_head: HeadParams,
    /// Maximum per-facet orthogonality error after any training step.
    pub max_step_ortho_error: f64,
    /// Named RNG streams consumed by this run.
    pub sub_seeds: Vec<(String, u64)>,
}

fn batch_refs<'a>(data: &'a TaskData, indices: &[usize]) -> BatchRef<'a> {
    match data {
        TaskData::Classification(d) => {
            BatchRef::Classify(indices.iter().map(|&i| &d.examples[i]).collect())
        }
        TaskData::Tagging(d) => BatchRef::Tag(indices.iter().map(|&i| &d.sentences[i]).collect()),
    }
}

/// Runs the full training loop: seeded shuffling, Adam steps with the
/// retraction interleaved, per-epoch validation, the plateau schedule, and
/// best-epoch parameter selection (ties break to the earliest epoch).
pub fn train(
    facets: &[Facet],
    config: &MetaConfig,
    init_params: MetaParams,
    head_kind: HeadKind,
    train_cfg: &TrainConfig,
    train_data: &TaskData,
    val_data: &TaskData,
) -> Result<TrainRun> {
    train_cfg.validate()?;
    config.validate()?;
    init_params.validate_shapes(config)?;
    if train_data.is_empty() {
        return Err(Error::EmptyDataset("train split"));
    }
    if val_data.is_empty() {
        return Err(Error::EmptyDataset("validation split"));
    }

    let classes = train_data.class_count();
    let feature_dim = head_kind.feature_dim(config.meta_dim);
    let mut params = init_params;
    let mut head = HeadParams::init(classes, feature_dim, train_cfg.seed);
    let sub_seeds = vec![
        ("shuffle".to_string(), derive_seed(train_cfg.seed, "shuffle")),
        ("head_init".to_string(), derive_seed(train_cfg.seed, "head_init")),
    ];

    let mut state = AdamState::new(
        &params.projections.iter().map(|p| p.dim()).collect::<Vec<_>>(),
        config.meta_dim,
        config.facet_count(),
        params.attention.as_ref().map(|a| a.vector.len()),
        head.weight.dim(),
    );
    let mut schedule = PlateauSchedule::new(
        train_cfg.learning_rate,
        train_cfg.plateau_factor,
        train_cfg.plateau_patience,
    );
    let mut shuffle_rng = seeded_rng(train_cfg.seed, "shuffle");

    let mut history = Vec::with_capacity(train_cfg.max_epochs);
    let mut best_epoch = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params = params.clone();
    let mut best_head = head.clone();
    let mut run_max_ortho = 0.0f64;

    let n = train_data.len();
    for epoch in 1..=train_cfg.max_epochs {
        let mut indices: Vec<usize> = (0..n).collect();
        indices.shuffle(&mut shuffle_rng);

        let lr = schedule.lr();
        let mut loss_sum = 0.0;
        let mut unit_count = 0usize;
        let mut clamped = 0usize;
        let mut epoch_max_ortho = 0.0f64;
        let mut attention_sums = vec![0.0; config.facet_count()];
        let mut attention_tokens = 0usize;

        for chunk in indices.chunks(train_cfg.batch_size) {
            let mut batch_indices = chunk.to_vec();
            // Canonical in-batch order: sorted original indices.
            batch_indices.sort_unstable();
            let batch = batch_refs(train_data, &batch_indices);
            let (stats, grads) =
                batch_forward_backward(facets, &params, config, &head, head_kind, &batch)?;
            apply_step(
                &mut params,
                &mut head,
                &grads,
                &train_cfg.freeze,
                config.projection,
                lr,
                &train_cfg.adam,
                &mut state,
                train_cfg.beta_retraction,
            )?;

            loss_sum += stats.loss * stats.count as f64;
            unit_count += stats.count;
            clamped += stats.clamped;
            if let Some(sums) = stats.attention_sums {
                for (acc, s) in attention_sums.iter_mut().zip(sums) {
                    *acc += s;
                }
                attention_tokens += stats.attention_tokens;
            }

            let step_err = params
                .projections
                .iter()
                .map(|p| orthogonality_error(p.view()))
                .fold(0.0f64, f64::max);
            epoch_max_ortho = epoch_max_ortho.max(step_err);
        }
        run_max_ortho = run_max_ortho.max(epoch_max_ortho);

        let val_metric = evaluate(facets, &params, config, &head, head_kind, val_data)?;
        let alphas = if config.combiner == CombinerKind::Attention && attention_tokens > 0 {
            attention_sums
                .iter()
                .map(|s| s / attention_tokens as f64)
                .collect()
        } else {
            params.alphas.clone()
        };
        let ortho_errors = params
            .projections
            .iter()
            .map(|p| orthogonality_error(p.view()))
            .collect();
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / unit_count.max(1) as f64,
            val_metric,
            lr,
            alphas,
            ortho_errors,
            max_step_ortho_error: epoch_max_ortho,
            clamped,
        });

        if val_metric > best_val {
            best_val = val_metric;
            best_epoch = epoch;
            best_params = params.clone();
            best_head = head.clone();
        }
        schedule.observe(val_metric);
    }

    if history.is_empty() {
        // Zero-epoch run: the initial parameters are the result.
        best_val = evaluate(facets, &params, config, &head, head_kind, val_data)?;
    }

    Ok(TrainRun {
        history,
        best_epoch,
        best_val,
        params: best_params,
        head: best_head,
        final_params: params,
        final_head: head,
        max_step_ortho_error: run_max_ortho,
        sub_seeds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::{make_baseline, BaselineKind};
    use crate::tasks::ClassificationData;
    use ndarray::array;

    fn one_facet() -> Vec<Facet> {
        vec![Facet::new(
            "f",
            vec!["hot".into(), "cold".into()],
            array![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]],
        )
        .unwrap()]
    }

    fn identity_head(classes: usize, dim: usize) -> HeadParams {
        // Rows e and -e with e the first basis vector.
        let mut weight = Array2::zeros((classes, dim));
        weight[[0, 0]] = 1.0;
        weight[[1, 0]] = -1.0;
        HeadParams {
            weight,
            bias: Array1::zeros(classes),
        }
    }

    #[test]
    fn forward_single_token_closed_form() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let head = identity_head(2, 3);
        let probs =
            forward_classify(&facets, &init.params, &init.config, &head, &["hot".into()]).unwrap();
        // logits (1, -1): softmax = (0.8808, 0.1192) to 4 decimals.
        assert!((probs[0] - 0.8808).abs() < 5e-5);
        assert!((probs[1] - 0.1192).abs() < 5e-5);

        let (ce, clamped) = cross_entropy(&probs, 0);
        assert!((ce - 0.1269).abs() < 5e-5);
        assert!(!clamped);
    }

    #[test]
    fn forward_opposite_tokens_pool_to_uniform() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let head = identity_head(2, 3);
        let probs = forward_classify(
            &facets,
            &init.params,
            &init.config,
            &head,
            &["hot".into(), "cold".into()],
        )
        .unwrap();
        assert!((probs[0] - 0.5).abs() < 1e-12);
        assert!((probs[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn window_zero_tagger_matches_pooled_per_token() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let head = identity_head(2, 3);
        let tokens = vec!["hot".to_string(), "cold".to_string()];
        let tagged = forward_tag(&facets, &init.params, &init.config, &head, 0, &tokens).unwrap();
        for (i, token) in tokens.iter().enumerate() {
            let single = forward_classify(
                &facets,
                &init.params,
                &init.config,
                &head,
                std::slice::from_ref(token),
            )
            .unwrap();
            for c in 0..2 {
                assert_eq!(tagged[[i, c]].to_bits(), single[c].to_bits());
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = [0.25; 4];
        let (ce, _) = cross_entropy(&uniform, 2);
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);

        let (ce, clamped) = cross_entropy(&[1.0, 0.0], 0);
        assert_eq!(ce, 0.0);
        assert!(!clamped);

        let (ce, clamped) = cross_entropy(&[1.0, 0.0], 1);
        assert!(clamped);
        assert!((ce - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn zero_upstream_gradient_leaves_meta_grads_zero() {
        // Probabilities exactly one-hot at the gold class produce a zero
        // upstream gradient, so all meta-layer gradients vanish.
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        // A head with a margin past the exp underflow point drives the
        // softmax to an exactly one-hot output.
        let mut head = identity_head(2, 3);
        head.weight *= 400.0;
        let data = ClassificationData {
            examples: vec![ClassifiedExample {
                tokens: vec!["hot".into()],
                label: 0,
            }],
            labels: vec!["a".into(), "b".into()],
        };
        let batch = BatchRef::Classify(data.examples.iter().collect());
        let (stats, grads) = batch_forward_backward(
            &facets,
            &init.params,
            &init.config,
            &head,
            HeadKind::PooledClassifier,
            &batch,
        )
        .unwrap();
        assert_eq!(stats.loss, 0.0);
        assert!(grads.alphas.iter().all(|&g| g == 0.0));
        assert!(grads.projections.iter().all(|p| p.iter().all(|&g| g == 0.0)));
        assert!(grads.biases.iter().all(|b| b.iter().all(|&g| g == 0.0)));
    }

    #[test]
    fn single_facet_alpha_gradient_is_dot_product() {
        // With everything else frozen and one example, dL/dalpha = g . t.
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let head = identity_head(2, 3);
        let data = ClassificationData {
            examples: vec![ClassifiedExample {
                tokens: vec!["hot".into()],
                label: 0,
            }],
            labels: vec!["a".into(), "b".into()],
        };
        let batch = BatchRef::Classify(data.examples.iter().collect());
        let (_, grads) = batch_forward_backward(
            &facets,
            &init.params,
            &init.config,
            &head,
            HeadKind::PooledClassifier,
            &batch,
        )
        .unwrap();

        // Upstream g = W^T (p - onehot); t = w = (1, 0, 0).
        let probs = forward_classify(
            &facets,
            &init.params,
            &init.config,
            &head,
            &["hot".into()],
        )
        .unwrap();
        let dlogits = array![probs[0] - 1.0, probs[1]];
        let upstream = head.weight.t().dot(&dlogits);
        let expected = upstream.dot(&array![1.0, 0.0, 0.0]);
        assert!((grads.alphas[0] - expected).abs() < 1e-14);
    }

    #[test]
    fn step_with_zero_gradients_is_a_fixed_point() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let mut params = init.params.clone();
        let mut head = identity_head(2, 3);
        let before_head = head.clone();
        let grads = Gradients::zeros(&params, &head);
        let mut state = AdamState::new(&[(3, 3)], 3, 1, None, (2, 3));
        apply_step(
            &mut params,
            &mut head,
            &grads,
            &FreezePolicy::default(),
            ProjectionKind::Orthogonal,
            0.001,
            &AdamConfig::default(),
            &mut state,
            0.001,
        )
        .unwrap();
        for (a, b) in params.projections[0].iter().zip(init.params.projections[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in head.weight.iter().zip(before_head.weight.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_projection_stays_exactly_identity() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let mut params = init.params.clone();
        let mut head = identity_head(2, 3);
        let mut grads = Gradients::zeros(&params, &head);
        // Nonzero projection gradient that must be ignored.
        grads.projections[0][[0, 1]] = 5.0;
        grads.alphas[0] = 1.0;
        let freeze = FreezePolicy {
            projections: true,
            biases: true,
            ..FreezePolicy::default()
        };
        let mut state = AdamState::new(&[(3, 3)], 3, 1, None, (2, 3));
        for _ in 0..25 {
            apply_step(
                &mut params,
                &mut head,
                &grads,
                &freeze,
                ProjectionKind::Identity,
                0.01,
                &AdamConfig::default(),
                &mut state,
                0.001,
            )
            .unwrap();
        }
        assert_eq!(params.projections[0], Array2::<f64>::eye(3));
        // Alphas did move.
        assert!(params.alphas[0] != 1.0);
    }

    #[test]
    fn lr_zero_training_leaves_params_unchanged() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let data = TaskData::Classification(ClassificationData {
            examples: vec![
                ClassifiedExample {
                    tokens: vec!["hot".into()],
                    label: 0,
                },
                ClassifiedExample {
                    tokens: vec!["cold".into()],
                    label: 1,
                },
            ],
            labels: vec!["a".into(), "b".into()],
        });
        let cfg = TrainConfig {
            learning_rate: 0.0,
            max_epochs: 1,
            batch_size: 2,
            seed: 3,
            ..TrainConfig::default()
        };
        let run = train(
            &facets,
            &init.config,
            init.params.clone(),
            HeadKind::PooledClassifier,
            &cfg,
            &data,
            &data,
        )
        .unwrap();
        for (a, b) in run.params.projections[0].iter().zip(init.params.projections[0].iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(run.params.alphas, init.params.alphas);
    }

    #[test]
    fn training_is_deterministic() {
        let facets = one_facet();
        let init = make_baseline(BaselineKind::Prism, &facets, None, 0).unwrap();
        let mut examples = Vec::new();
        for i in 0..12 {
            examples.push(ClassifiedExample {
                tokens: vec![if i % 2 == 0 { "hot".into() } else { "cold".into() }],
                label: i % 2,
            });
        }
        let data = TaskData::Classification(ClassificationData {
            examples,
            labels: vec!["a".into(), "b".into()],
        });
        let cfg = TrainConfig {
            max_epochs: 5,
            batch_size: 4,
            seed: 42,
            ..TrainConfig::default()
        };
        let run1 = train(
            &facets,
            &init.config,
            init.params.clone(),
            HeadKind::PooledClassifier,
            &cfg,
            &data,
            &data,
        )
        .unwrap();
        let run2 = train(
            &facets,
            &init.config,
            init.params.clone(),
            HeadKind::PooledClassifier,
            &cfg,
            &data,
            &data,
        )
        .unwrap();
        assert_eq!(run1.history.len(), run2.history.len());
        for (a, b) in run1.history.iter().zip(&run2.history) {
            assert_eq!(a.train_loss.to_bits(), b.train_loss.to_bits());
            assert_eq!(a.val_metric.to_bits(), b.val_metric.to_bits());
            assert_eq!(a.lr.to_bits(), b.lr.to_bits());
            for (x, y) in a.alphas.iter().zip(&b.alphas) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }
}
