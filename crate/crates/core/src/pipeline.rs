//! End-to-end runs: prepare facets and datasets from a config, train, and
//! write the output artifacts (manifest, history CSV, binary params,
//! exported table). Also the export/eval/analyze/inspect entry points the
//! CLI wraps.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::analysis::{sample_tokens, separability_report, SeparabilityOutput};
use crate::config::{EqualizeSpec, RunConfig, TaskKind};
use crate::error::{Error, Result};
use crate::facet::{union_vocab, Facet, FacetFormat, VocabUnion};
use crate::meta::{
    apply_projection_override, export_table, make_baseline, meta_embed, AttentionParams,
    BaselineInit, BaselineKind, CombinerKind, MetaConfig, MetaParams, MetaTable, ProjectionKind,
};
use crate::synth;
use crate::tasks::{read_classification, read_tagged, ClassificationData, TagData, TaskData};
use crate::train::{evaluate, train, HeadKind, HeadParams, TrainConfig, TrainRun};
use crate::util::seeded_rng;

/// Everything needed to run training for a config.
pub struct PreparedRun {
    pub facets: Vec<Facet>,
    pub union: VocabUnion,
    pub init: BaselineInit,
    pub head_kind: HeadKind,
    pub train_cfg: TrainConfig,
    pub train_data: TaskData,
    pub val_data: TaskData,
    pub test_data: TaskData,
    pub facet_checksums: Vec<(String, String)>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn facet_checksum(facet: &Facet) -> String {
    let mut hasher = Sha256::new();
    for token in facet.vocab() {
        hasher.update(token.as_bytes());
        hasher.update([0u8]);
    }
    for v in facet.table().iter() {
        hasher.update(v.to_le_bytes());
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Remaps a classification split onto the training label inventory.
fn align_labels(reference: &[String], split: ClassificationData) -> Result<ClassificationData> {
    let mut examples = split.examples;
    for example in &mut examples {
        let name = &split.labels[example.label];
        example.label = reference
            .iter()
            .position(|l| l == name)
            .ok_or_else(|| Error::Config(format!("label {name:?} absent from the train split")))?;
    }
    Ok(ClassificationData {
        examples,
        labels: reference.to_vec(),
    })
}

/// Remaps a tagging split onto the training tag inventory.
fn align_tags(reference: &[String], split: TagData) -> Result<TagData> {
    let mut sentences = split.sentences;
    for sentence in &mut sentences {
        for (id, name) in sentence.tag_ids.iter_mut().zip(&sentence.tags) {
            *id = reference
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| Error::Config(format!("tag {name:?} absent from the train split")))?;
        }
    }
    Ok(TagData {
        sentences,
        tags: reference.to_vec(),
    })
}

/// Loads facets (applying equalization) and datasets, builds the initialized
/// meta layer, and resolves training hyperparameters.
pub fn prepare(config: &RunConfig) -> Result<PreparedRun> {
    config.validate()?;

    let (facets, train_data, val_data, test_data) = match &config.task.synthetic {
        Some(spec) => {
            let bundle = synth::generate(spec)?;
            (bundle.facets, bundle.train, bundle.val, bundle.test)
        }
        None => {
            let mut facets = Vec::with_capacity(config.facets.len());
            for spec in &config.facets {
                let format: FacetFormat = spec.format.into();
                let loaded = Facet::load(&spec.path, format)?;
                // Equalization annotates the name; the configured name wins
                // as the base.
                let renamed = Facet::new(&spec.name, loaded.vocab().to_vec(), loaded.table().to_owned())?;
                let equalized = match &spec.equalize {
                    EqualizeSpec::None => renamed,
                    EqualizeSpec::ZeroPad(z) => renamed.zero_pad(z.target_dim)?,
                    EqualizeSpec::Pca(p) => {
                        renamed.pca_compress(p.target_dim, p.max_iters, p.tol)?.facet
                    }
                };
                facets.push(equalized);
            }
            let (train_data, val_data, test_data) = match config.task.kind {
                TaskKind::Classify => {
                    let train = read_classification(config.task.train_path.as_ref().unwrap())?;
                    let val = read_classification(config.task.val_path.as_ref().unwrap())?;
                    let test = read_classification(config.task.test_path.as_ref().unwrap())?;
                    let labels = train.labels.clone();
                    (
                        TaskData::Classification(train),
                        TaskData::Classification(align_labels(&labels, val)?),
                        TaskData::Classification(align_labels(&labels, test)?),
                    )
                }
                TaskKind::Tag => {
                    let train = read_tagged(config.task.train_path.as_ref().unwrap())?;
                    let val = read_tagged(config.task.val_path.as_ref().unwrap())?;
                    let test = read_tagged(config.task.test_path.as_ref().unwrap())?;
                    let tags = train.tags.clone();
                    (
                        TaskData::Tagging(train),
                        TaskData::Tagging(align_tags(&tags, val)?),
                        TaskData::Tagging(align_tags(&tags, test)?),
                    )
                }
            };
            (facets, train_data, val_data, test_data)
        }
    };

    let union = union_vocab(&facets)?;
    let mut init = make_baseline(config.mode, &facets, config.meta_dim, config.seed)?;
    apply_projection_override(&mut init, config.projection)?;

    let head_kind = match config.task.kind {
        TaskKind::Classify => HeadKind::PooledClassifier,
        TaskKind::Tag => HeadKind::WindowTagger {
            window: config.task.window,
        },
    };

    let mut freeze = init.freeze;
    let ov = &config.train.freeze;
    if let Some(v) = ov.alphas {
        freeze.alphas = v;
    }
    if let Some(v) = ov.projections {
        freeze.projections = v;
    }
    if let Some(v) = ov.biases {
        freeze.biases = v;
    }
    if let Some(v) = ov.attention {
        freeze.attention = v;
    }
    if let Some(v) = ov.head {
        freeze.head = v;
    }

    let train_cfg = TrainConfig {
        learning_rate: config.train.learning_rate.unwrap_or_else(|| {
            TrainConfig::default_learning_rate(config.task.kind == TaskKind::Tag)
        }),
        beta_retraction: config.train.beta_retraction,
        plateau_factor: config.train.plateau_factor,
        plateau_patience: config.train.plateau_patience,
        max_epochs: config.train.max_epochs,
        batch_size: config.train.batch_size,
        seed: config.seed,
        adam: config.train.adam,
        freeze,
    };
    train_cfg.validate()?;

    let facet_checksums = facets
        .iter()
        .map(|f| (f.name().to_string(), facet_checksum(f)))
        .collect();

    Ok(PreparedRun {
        facets,
        union,
        init,
        head_kind,
        train_cfg,
        train_data,
        val_data,
        test_data,
        facet_checksums,
    })
}

/// Artifact paths produced by [`run_train`].
#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub out_dir: PathBuf,
    pub manifest: PathBuf,
    pub history: PathBuf,
    pub params: PathBuf,
    pub table: PathBuf,
    pub best_epoch: usize,
    pub best_val: f64,
}

#[derive(serde::Serialize)]
struct Manifest<'a> {
    version: u32,
    config: &'a RunConfig,
    sub_seeds: Vec<(String, u64)>,
    facet_checksums: &'a [(String, String)],
    best_epoch: usize,
    best_val: f64,
    final_alphas: Vec<f64>,
    final_ortho_errors: Vec<f64>,
    max_step_ortho_error: f64,
}

fn write_history_csv(path: &Path, run: &TrainRun, facet_count: usize) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    write!(w, "epoch,loss,val_metric,lr")?;
    for f in 1..=facet_count {
        write!(w, ",alpha_{f}")?;
    }
    for f in 1..=facet_count {
        write!(w, ",ortho_err_{f}")?;
    }
    writeln!(w)?;
    for row in &run.history {
        write!(w, "{},{},{},{}", row.epoch, row.train_loss, row.val_metric, row.lr)?;
        for a in &row.alphas {
            write!(w, ",{a}")?;
        }
        for e in &row.ortho_errors {
            write!(w, ",{e}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

/// Trains per the config and writes `manifest.json`, `history.csv`,
/// `params.bin`, and `meta.vec` into the output directory. On failure any
/// partially written outputs are removed.
pub fn run_train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutputs> {
    fs::create_dir_all(out_dir)?;
    let mut created: Vec<PathBuf> = Vec::new();
    let result = run_train_inner(config, out_dir, &mut created);
    if result.is_err() {
        for path in created {
            let _ = fs::remove_file(path);
        }
    }
    result
}

fn run_train_inner(
    config: &RunConfig,
    out_dir: &Path,
    created: &mut Vec<PathBuf>,
) -> Result<TrainOutputs> {
    let prepared = prepare(config)?;
    let run = train(
        &prepared.facets,
        &prepared.init.config,
        prepared.init.params.clone(),
        prepared.head_kind,
        &prepared.train_cfg,
        &prepared.train_data,
        &prepared.val_data,
    )?;

    let manifest_path = out_dir.join("manifest.json");
    let history_path = out_dir.join("history.csv");
    let params_path = out_dir.join("params.bin");
    let table_path = out_dir.join("meta.vec");

    let final_ortho = run
        .params
        .projections
        .iter()
        .map(|p| crate::meta::orthogonality_error(p.view()))
        .collect();
    let manifest = Manifest {
        version: 1,
        config,
        sub_seeds: run.sub_seeds.clone(),
        facet_checksums: &prepared.facet_checksums,
        best_epoch: run.best_epoch,
        best_val: run.best_val,
        final_alphas: run.params.alphas.clone(),
        final_ortho_errors: final_ortho,
        max_step_ortho_error: run.max_step_ortho_error,
    };
    created.push(manifest_path.clone());
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    created.push(history_path.clone());
    write_history_csv(&history_path, &run, prepared.init.config.facet_count())?;

    created.push(params_path.clone());
    save_params(
        &params_path,
        config.mode,
        &prepared.init.config,
        &run.params,
        prepared.head_kind,
        &run.head,
    )?;

    created.push(table_path.clone());
    let table = export_table(&run.params, &prepared.init.config, &prepared.facets, &prepared.union)?;
    table.write_text(&table_path)?;

    Ok(TrainOutputs {
        out_dir: out_dir.to_path_buf(),
        manifest: manifest_path,
        history: history_path,
        params: params_path,
        table: table_path,
        best_epoch: run.best_epoch,
        best_val: run.best_val,
    })
}

const PARAMS_MAGIC: &[u8; 8] = b"PRISMPRM";

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64s<'a>(buf: &mut Vec<u8>, values: impl IntoIterator<Item = &'a f64>) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialized model: meta config + params + head, in a little-endian binary
/// layout behind an eight-byte magic.
pub fn save_params(
    path: &Path,
    mode: BaselineKind,
    config: &MetaConfig,
    params: &MetaParams,
    head_kind: HeadKind,
    head: &HeadParams,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    push_u64(&mut buf, 1); // version
    buf.push(match mode {
        BaselineKind::Average => 0,
        BaselineKind::Concat => 1,
        BaselineKind::Dme => 2,
        BaselineKind::Prism => 3,
    });
    buf.push(match config.projection {
        ProjectionKind::Identity => 0,
        ProjectionKind::Selector => 1,
        ProjectionKind::Unconstrained => 2,
        ProjectionKind::Orthogonal => 3,
    });
    buf.push(match config.combiner {
        CombinerKind::FixedUniform => 0,
        CombinerKind::FixedUnit => 1,
        CombinerKind::LearnedScalar => 2,
        CombinerKind::Attention => 3,
    });
    let (head_code, window) = match head_kind {
        HeadKind::PooledClassifier => (0u8, 0usize),
        HeadKind::WindowTagger { window } => (1, window),
    };
    buf.push(head_code);
    push_u64(&mut buf, window as u64);
    push_u64(&mut buf, config.meta_dim as u64);
    push_u64(&mut buf, config.facet_dims.len() as u64);
    for &d in &config.facet_dims {
        push_u64(&mut buf, d as u64);
    }
    push_f64s(&mut buf, &params.alphas);
    for (p, b) in params.projections.iter().zip(&params.biases) {
        push_f64s(&mut buf, p.iter());
        push_f64s(&mut buf, b.iter());
    }
    match &params.attention {
        Some(att) => {
            buf.push(1);
            push_f64s(&mut buf, att.vector.iter());
            push_f64s(&mut buf, std::iter::once(&att.bias));
        }
        None => buf.push(0),
    }
    push_u64(&mut buf, head.weight.nrows() as u64);
    push_u64(&mut buf, head.weight.ncols() as u64);
    push_f64s(&mut buf, head.weight.iter());
    push_f64s(&mut buf, head.bias.iter());

    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::ParamsFile("truncated params file".into()));
        }
        let slice = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u64(&mut self) -> Result<usize> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.take(8 * n)?;
        Ok(b.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Loaded counterpart of [`save_params`].
pub struct SavedModel {
    pub mode: BaselineKind,
    pub config: MetaConfig,
    pub params: MetaParams,
    pub head_kind: HeadKind,
    pub head: HeadParams,
}

pub fn load_params(path: &Path) -> Result<SavedModel> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut r = Reader { bytes: &bytes, at: 0 };
    if r.take(8)? != PARAMS_MAGIC {
        return Err(Error::ParamsFile("bad magic".into()));
    }
    let version = r.u64()?;
    if version != 1 {
        return Err(Error::ParamsFile(format!("unsupported version {version}")));
    }
    let mode = match r.u8()? {
        0 => BaselineKind::Average,
        1 => BaselineKind::Concat,
        2 => BaselineKind::Dme,
        3 => BaselineKind::Prism,
        x => return Err(Error::ParamsFile(format!("unknown mode {x}"))),
    };
    let projection = match r.u8()? {
        0 => ProjectionKind::Identity,
        1 => ProjectionKind::Selector,
        2 => ProjectionKind::Unconstrained,
        3 => ProjectionKind::Orthogonal,
        x => return Err(Error::ParamsFile(format!("unknown projection {x}"))),
    };
    let combiner = match r.u8()? {
        0 => CombinerKind::FixedUniform,
        1 => CombinerKind::FixedUnit,
        2 => CombinerKind::LearnedScalar,
        3 => CombinerKind::Attention,
        x => return Err(Error::ParamsFile(format!("unknown combiner {x}"))),
    };
    let head_code = r.u8()?;
    let window = r.u64()?;
    let head_kind = match head_code {
        0 => HeadKind::PooledClassifier,
        1 => HeadKind::WindowTagger { window },
        x => return Err(Error::ParamsFile(format!("unknown head kind {x}"))),
    };
    let meta_dim = r.u64()?;
    let facet_count = r.u64()?;
    let mut facet_dims = Vec::with_capacity(facet_count);
    for _ in 0..facet_count {
        facet_dims.push(r.u64()?);
    }
    let alphas = r.f64s(facet_count)?;
    let mut projections = Vec::with_capacity(facet_count);
    let mut biases = Vec::with_capacity(facet_count);
    for &d in &facet_dims {
        let p = Array2::from_shape_vec((meta_dim, d), r.f64s(meta_dim * d)?)
            .map_err(|e| Error::ParamsFile(e.to_string()))?;
        let b = Array1::from_vec(r.f64s(meta_dim)?);
        projections.push(p);
        biases.push(b);
    }
    let attention = match r.u8()? {
        0 => None,
        1 => {
            let vector = Array1::from_vec(r.f64s(meta_dim)?);
            let bias = r.f64s(1)?[0];
            Some(AttentionParams { vector, bias })
        }
        x => return Err(Error::ParamsFile(format!("unknown attention flag {x}"))),
    };
    let classes = r.u64()?;
    let feature_dim = r.u64()?;
    let weight = Array2::from_shape_vec((classes, feature_dim), r.f64s(classes * feature_dim)?)
        .map_err(|e| Error::ParamsFile(e.to_string()))?;
    let bias = Array1::from_vec(r.f64s(classes)?);
    if r.at != bytes.len() {
        return Err(Error::ParamsFile("trailing bytes".into()));
    }

    let config = MetaConfig {
        projection,
        combiner,
        meta_dim,
        facet_dims,
    };
    let params = MetaParams {
        projections,
        biases,
        alphas,
        attention,
    };
    params.validate_shapes(&config)?;
    Ok(SavedModel {
        mode,
        config,
        params,
        head_kind,
        head: HeadParams { weight, bias },
    })
}

/// Exports the meta table for a saved model, verifying on up to 100 randomly
/// chosen tokens that the table matches the on-the-fly computation exactly.
/// Writes the text table to `out`, plus a raw sidecar (`<out>.prism`) and its
/// token list (`<out>.tokens`).
pub fn run_export(params_path: &Path, config: &RunConfig, out: &Path) -> Result<MetaTable> {
    let prepared = prepare(config)?;
    let model = load_params(params_path)?;
    let table = export_table(&model.params, &model.config, &prepared.facets, &prepared.union)?;

    let mut rng = seeded_rng(config.seed, "export_check");
    let checks = table.len().min(100);
    for _ in 0..checks {
        let i = rng.random_range(0..table.len());
        let token = &table.tokens()[i];
        let views: Vec<_> = prepared.facets.iter().map(|f| f.lookup(token).0).collect();
        let direct = meta_embed(&model.params, &model.config, &views)?;
        for (a, b) in table.row(i).iter().zip(direct.iter()) {
            if a.to_bits() != b.to_bits() {
                return Err(Error::Config(format!(
                    "export verification failed for token {token:?}"
                )));
            }
        }
    }

    table.write_text(out)?;
    let raw = out.with_extension("prism");
    let tokens = out.with_extension("tokens");
    table.write_raw(&raw, &tokens)?;
    Ok(table)
}

/// Metric result of [`run_eval`].
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub metric: String,
    pub value: f64,
    pub split: String,
}

/// Evaluates a saved model on one split and writes `eval.json` alongside the
/// params file.
pub fn run_eval(params_path: &Path, config: &RunConfig, split: &str) -> Result<EvalReport> {
    let prepared = prepare(config)?;
    let model = load_params(params_path)?;
    let data = match split {
        "train" => &prepared.train_data,
        "val" | "validation" => &prepared.val_data,
        "test" => &prepared.test_data,
        other => return Err(Error::Config(format!("unknown split {other:?}"))),
    };
    let value = evaluate(
        &prepared.facets,
        &model.params,
        &model.config,
        &model.head,
        model.head_kind,
        data,
    )?;
    let metric = match config.task.kind {
        TaskKind::Classify => "accuracy",
        TaskKind::Tag => "micro_f1_no_o",
    };
    let report = EvalReport {
        metric: metric.into(),
        value,
        split: split.into(),
    };
    let eval_path = params_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join("eval.json");
    fs::write(&eval_path, serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

/// Clustering separability analysis of a saved model's transformed facets.
/// Writes `separability.csv` (per-seed AMI plus mean/std) and `points.csv`
/// (coordinates, facet label, first-seed cluster label).
pub fn run_analyze(
    params_path: &Path,
    config: &RunConfig,
    seeds: &[u64],
    sample: usize,
    out_dir: &Path,
) -> Result<SeparabilityOutput> {
    let prepared = prepare(config)?;
    let model = load_params(params_path)?;
    let tokens = sample_tokens(&prepared.facets, sample)?;
    let output = separability_report(&model.params, &model.config, &prepared.facets, &tokens, seeds)?;

    fs::create_dir_all(out_dir)?;
    let sep_path = out_dir.join("separability.csv");
    let mut w = BufWriter::new(fs::File::create(&sep_path)?);
    writeln!(w, "label,ami")?;
    for (seed, score) in output.report.seeds.iter().zip(&output.report.scores) {
        writeln!(w, "seed:{seed},{score}")?;
    }
    writeln!(w, "mean,{}", output.report.mean)?;
    writeln!(w, "std,{}", output.report.std)?;
    w.flush()?;

    let points_path = out_dir.join("points.csv");
    let mut w = BufWriter::new(fs::File::create(&points_path)?);
    let dim = output.points.points.ncols();
    for j in 0..dim {
        write!(w, "x{j},")?;
    }
    writeln!(w, "facet,cluster")?;
    for (i, row) in output.points.points.outer_iter().enumerate() {
        for v in row.iter() {
            write!(w, "{v},")?;
        }
        writeln!(w, "{},{}", output.points.labels[i], output.first_clusters[i])?;
    }
    w.flush()?;
    Ok(output)
}

/// Facet summary printed by the `inspect` subcommand. Construction re-runs
/// all facet invariants; `centroid_consistent` re-checks the cached centroid
/// against a fresh mean.
#[derive(Debug, Clone, serde::Serialize)]
pub struct InspectReport {
    pub name: String,
    pub vocab_size: usize,
    pub dim: usize,
    pub centroid_norm: f64,
    pub min_component: f64,
    pub max_component: f64,
    pub centroid_consistent: bool,
}

pub fn run_inspect(facet_path: &Path, format: FacetFormat) -> Result<InspectReport> {
    let facet = Facet::load(facet_path, format)?;
    let centroid = facet.centroid();
    let centroid_norm = centroid.dot(&centroid).sqrt();
    let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in facet.table().iter() {
        min = min.min(v);
        max = max.max(v);
    }
    let fresh = facet
        .table()
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty facet");
    let centroid_consistent = fresh
        .iter()
        .zip(centroid.iter())
        .all(|(a, b)| (a - b).abs() <= 1e-12);
    Ok(InspectReport {
        name: facet.name().to_string(),
        vocab_size: facet.len(),
        dim: facet.dim(),
        centroid_norm,
        min_component: min,
        max_component: max,
        centroid_consistent,
    })
}

/// Convenience checksum of an arbitrary file (manifest reporting).
pub fn file_checksum(path: &Path) -> Result<String> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(sha256_hex(&bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn synthetic_config(dir: &Path) -> RunConfig {
        RunConfig::from_json(&format!(
            r#"{{
                "mode": "prism",
                "task": {{
                    "kind": "classify",
                    "synthetic": {{"classification": {{
                        "num_facets": 2, "dim": 5,
                        "vocab_per_class": 8, "tokens_per_example": 4,
                        "train_examples": 16, "val_examples": 8, "test_examples": 8,
                        "margin": 1.5, "noise": 0.3, "seed": 5
                    }}}}
                }},
                "train": {{"max_epochs": 4, "batch_size": 4}},
                "seed": 21,
                "output_dir": "{}"
            }}"#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn train_pipeline_writes_all_artifacts_and_is_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path());
        let out = run_train(&config, dir.path()).unwrap();
        for path in [&out.manifest, &out.history, &out.params, &out.table] {
            assert!(path.exists(), "{} missing", path.display());
        }

        let history1 = fs::read(&out.history).unwrap();
        let manifest1 = fs::read(&out.manifest).unwrap();

        // Re-running with the same config and seed reproduces the history
        // byte for byte.
        let out2 = run_train(&config, dir.path()).unwrap();
        let history2 = fs::read(&out2.history).unwrap();
        assert_eq!(history1, history2);
        assert_eq!(manifest1, fs::read(&out2.manifest).unwrap());
    }

    #[test]
    fn params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path());
        let out = run_train(&config, dir.path()).unwrap();
        let model = load_params(&out.params).unwrap();
        assert_eq!(model.mode, BaselineKind::Prism);
        assert_eq!(model.config.meta_dim, 5);
        assert_eq!(model.config.facet_dims, vec![5, 5]);

        // Saving again produces identical bytes.
        let second = dir.path().join("params2.bin");
        save_params(
            &second,
            model.mode,
            &model.config,
            &model.params,
            model.head_kind,
            &model.head,
        )
        .unwrap();
        assert_eq!(fs::read(&out.params).unwrap(), fs::read(&second).unwrap());
    }

    #[test]
    fn export_eval_analyze_round() {
        let dir = tempfile::tempdir().unwrap();
        let config = synthetic_config(dir.path());
        let out = run_train(&config, dir.path()).unwrap();

        let table_path = dir.path().join("exported.vec");
        let table = run_export(&out.params, &config, &table_path).unwrap();
        assert!(table_path.exists());
        assert!(table_path.with_extension("prism").exists());
        assert!(table_path.with_extension("tokens").exists());
        assert_eq!(table.len(), 16);

        let report = run_eval(&out.params, &config, "test").unwrap();
        assert_eq!(report.metric, "accuracy");
        assert!((0.0..=1.0).contains(&report.value));
        assert!(dir.path().join("eval.json").exists());

        let analysis = run_analyze(&out.params, &config, &[0, 1, 2], 10, dir.path()).unwrap();
        assert_eq!(analysis.report.scores.len(), 3);
        assert!(dir.path().join("separability.csv").exists());
        assert!(dir.path().join("points.csv").exists());
    }

    #[test]
    fn average_mode_with_unequal_dims_fails_before_training() {
        let dir = tempfile::tempdir().unwrap();
        // Two facet files with different dimensions and no equalization.
        let f1 = dir.path().join("a.vec");
        let f2 = dir.path().join("b.vec");
        fs::write(&f1, "x 1 2\ny 3 4\n").unwrap();
        fs::write(&f2, "x 1\ny 2\n").unwrap();
        let train = dir.path().join("train.tsv");
        let val = dir.path().join("val.tsv");
        let test = dir.path().join("test.tsv");
        for p in [&train, &val, &test] {
            fs::write(p, "pos\tx\nneg\ty\n").unwrap();
        }
        let config = RunConfig::from_json(&format!(
            r#"{{
                "facets": [
                    {{"name": "a", "path": "{}"}},
                    {{"name": "b", "path": "{}"}}
                ],
                "mode": "average",
                "task": {{"kind": "classify", "train_path": "{}", "val_path": "{}", "test_path": "{}"}},
                "seed": 1
            }}"#,
            f1.display(),
            f2.display(),
            train.display(),
            val.display(),
            test.display()
        ))
        .unwrap();
        let err = run_train(&config, dir.path()).unwrap_err();
        assert!(matches!(err, Error::InvalidDimensions(_)));
        // Partial outputs are removed.
        assert!(!dir.path().join("manifest.json").exists());
        assert!(!dir.path().join("history.csv").exists());
    }

    #[test]
    fn zero_pad_equalization_through_config() {
        let dir = tempfile::tempdir().unwrap();
        let f1 = dir.path().join("a.vec");
        let f2 = dir.path().join("b.vec");
        fs::write(&f1, "x 1 2\ny 3 4\n").unwrap();
        fs::write(&f2, "x 1\ny 2\n").unwrap();
        let train = dir.path().join("train.tsv");
        let val = dir.path().join("val.tsv");
        let test = dir.path().join("test.tsv");
        for p in [&train, &val, &test] {
            fs::write(p, "pos\tx\nneg\ty\n").unwrap();
        }
        let config = RunConfig::from_json(&format!(
            r#"{{
                "facets": [
                    {{"name": "a", "path": "{}"}},
                    {{"name": "b", "path": "{}", "equalize": {{"zero_pad": {{"target_dim": 2}}}}}}
                ],
                "mode": "average",
                "task": {{"kind": "classify", "train_path": "{}", "val_path": "{}", "test_path": "{}"}},
                "train": {{"max_epochs": 2}},
                "seed": 1
            }}"#,
            f1.display(),
            f2.display(),
            train.display(),
            val.display(),
            test.display()
        ))
        .unwrap();
        let prepared = prepare(&config).unwrap();
        assert_eq!(prepared.facets[1].dim(), 2);
        assert!(prepared.facets[1].name().contains("pad2"));
    }
}
