//! The pipeline steps behind each subcommand. Every step reads its inputs
//! from the config and writes its outputs into one directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use sha2::{Digest, Sha256};

use oodconcepts_core::detectors::{CalibratedDetector, DetectorSpec};
use oodconcepts_core::explain::{
    build_profiles, intervention_curve, nearest_patches, pattern_summary, shapley_exact, shapley_monte_carlo,
    DetectionCharacteristic, FinetuneData, ShapleyMode, ShapleyResult, Target, NEAREST_PATCH_THRESHOLD,
};
use oodconcepts_core::learn::{train_concepts, HistoryRow};
use oodconcepts_core::metrics::{evaluate_completeness, evaluate_separability, relative_separability, SeparabilityResult};
use oodconcepts_core::model::{train_head, ClassifierHead, ConceptModel};
use oodconcepts_core::tensor::{generate_synthetic, DatasetBundle, FeatureTensor, LabeledSplit};

use crate::checkpoint::{head_checkpoint, head_from, model_checkpoint, model_from, round_head, Checkpoint};
use crate::config::{DataSource, RunConfig};
use crate::error::{CliError, Result};
use crate::formats::{read_cft, read_labels, round_to_f32, write_atomic, write_cft, write_labels};

pub const ID_SPLITS: [&str; 3] = ["id_train", "id_val", "id_test"];
pub const OOD_SPLITS: [&str; 3] = ["ood_train", "ood_val", "ood_test"];

pub const HEAD_FILE: &str = "head.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const LEARN_FILE: &str = "learn.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const SHAPLEY_FILE: &str = "shapley.json";
pub const PATTERNS_FILE: &str = "patterns.csv";
pub const NEAREST_FILE: &str = "nearest_patches.json";
pub const INTERVENTION_FILE: &str = "intervention.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

fn rounded_split(s: &LabeledSplit) -> Result<LabeledSplit> {
    Ok(LabeledSplit::new(round_to_f32(&s.features)?, s.labels.clone())?)
}

/// The configured bundle. Synthetic data is rounded to `f32` so it matches
/// what `generate` writes.
pub fn load_bundle(cfg: &RunConfig) -> Result<DatasetBundle> {
    match &cfg.data {
        DataSource::Synthetic(_) => {
            let b = generate_synthetic(&cfg.synthetic_spec().expect("synthetic source"))?;
            Ok(DatasetBundle::new(
                rounded_split(&b.id_train)?,
                rounded_split(&b.id_val)?,
                rounded_split(&b.id_test)?,
                round_to_f32(&b.ood_train)?,
                round_to_f32(&b.ood_val)?,
                round_to_f32(&b.ood_test)?,
            )?)
        }
        DataSource::Files(dir) => {
            let id = |name: &str| -> Result<LabeledSplit> {
                let f = read_cft(&dir.join(format!("{name}.cft")))?;
                let l = read_labels(&dir.join(format!("{name}.labels")))?;
                Ok(LabeledSplit::new(f, l)?)
            };
            let ood = |name: &str| read_cft(&dir.join(format!("{name}.cft")));
            let b = DatasetBundle::new(
                id(ID_SPLITS[0])?,
                id(ID_SPLITS[1])?,
                id(ID_SPLITS[2])?,
                ood(OOD_SPLITS[0])?,
                ood(OOD_SPLITS[1])?,
                ood(OOD_SPLITS[2])?,
            )?;
            let l = b.num_classes();
            if [&b.id_val, &b.id_test].iter().any(|s| s.labels.num_classes() != l) {
                return Err(oodconcepts_core::Error::Shape("label files disagree on the class count".into()).into());
            }
            Ok(b)
        }
    }
}

pub fn generate(cfg: &RunConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg
        .synthetic_spec()
        .ok_or_else(|| CliError::Config("generate needs a synthetic [data] section, not a directory".into()))?;
    let b = generate_synthetic(&spec)?;
    let mut written = Vec::new();
    for (name, split) in ID_SPLITS.iter().zip([&b.id_train, &b.id_val, &b.id_test]) {
        let p = out.join(format!("{name}.cft"));
        write_cft(&split.features, &p)?;
        written.push(p);
        let p = out.join(format!("{name}.labels"));
        write_labels(&split.labels, &p)?;
        written.push(p);
    }
    for (name, t) in OOD_SPLITS.iter().zip([&b.ood_train, &b.ood_val, &b.ood_test]) {
        let p = out.join(format!("{name}.cft"));
        write_cft(t, &p)?;
        written.push(p);
    }
    Ok(written)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct HeadReport {
    val_accuracy: f64,
    classes: usize,
    channels: usize,
}

/// Trains the head and rounds it to checkpoint precision.
pub fn fit_head(cfg: &RunConfig, bundle: &DatasetBundle) -> Result<(ClassifierHead, f64)> {
    let (head, _) = train_head(&bundle.id_train, &bundle.id_val, &cfg.head_train())?;
    let head = round_head(&head)?;
    let acc = head.accuracy(&bundle.id_val)?;
    Ok((head, acc))
}

pub fn train_head_cmd(cfg: &RunConfig, out: &Path) -> Result<f64> {
    let bundle = load_bundle(cfg)?;
    let (head, acc) = fit_head(cfg, &bundle)?;
    info!("head validation accuracy {acc:.4}");
    head_checkpoint(&head).write(&out.join(HEAD_FILE))?;
    write_json(&out.join("head.json"), &HeadReport { val_accuracy: acc, classes: head.classes(), channels: head.channels() })?;
    Ok(acc)
}

/// The configured detector fitted to `bundle` and calibrated on its ID
/// validation split.
pub fn detector(cfg: &RunConfig, bundle: &DatasetBundle, head: &ClassifierHead) -> Result<CalibratedDetector> {
    let d = &cfg.detector;
    let spec = DetectorSpec::fitted(d.kind, d.temperature, d.ridge, &bundle.id_train)?;
    Ok(CalibratedDetector::calibrate(spec, head, &bundle.id_val.features)?)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct HistoryCsv {
    epoch: usize,
    cross_entropy: f64,
    r_expl: f64,
    j_mse: f64,
    j_norm: f64,
    j_sep: f64,
    eta_det_val: Option<f64>,
}

impl From<&HistoryRow> for HistoryCsv {
    fn from(r: &HistoryRow) -> Self {
        Self {
            epoch: r.epoch,
            cross_entropy: r.cross_entropy,
            r_expl: r.r_expl,
            j_mse: r.j_mse,
            j_norm: r.j_norm,
            j_sep: r.j_sep,
            eta_det_val: r.eta_det_val,
        }
    }
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct LearnReport {
    detector: String,
    preset: Option<String>,
    lambda_expl: f64,
    lambda_mse: f64,
    lambda_norm: f64,
    lambda_sep: f64,
    concepts_requested: usize,
    concepts_kept: usize,
    /// `[dropped, partner, sign]`.
    merged: Vec<(usize, usize, f64)>,
    head_val_accuracy: f64,
    gamma: f64,
}

pub fn learn(cfg: &RunConfig, out: &Path) -> Result<ConceptModel> {
    let bundle = load_bundle(cfg)?;
    let (head, acc) = match &cfg.head.checkpoint {
        Some(p) => {
            let head = head_from(&Checkpoint::read(p)?, p)?;
            let acc = head.accuracy(&bundle.id_val)?;
            (head, acc)
        }
        None => fit_head(cfg, &bundle)?,
    };
    let cd = detector(cfg, &bundle, &head)?;
    let lc = cfg.learn_config();
    let outcome = train_concepts(&lc, &bundle, &head, &cd.spec)?;
    let model = model_from(&model_checkpoint(&outcome.state.model), Path::new("<memory>"))?;
    model_checkpoint(&model).write(&out.join(MODEL_FILE))?;
    let rows: Vec<HistoryCsv> = outcome.state.history.iter().map(HistoryCsv::from).collect();
    write_csv(&out.join(HISTORY_FILE), &rows)?;
    write_json(
        &out.join(LEARN_FILE),
        &LearnReport {
            detector: cd.spec.kind.to_string(),
            preset: cfg.preset.map(|p| p.name().to_string()),
            lambda_expl: lc.lambda_expl,
            lambda_mse: lc.lambda_mse,
            lambda_norm: lc.lambda_norm,
            lambda_sep: lc.lambda_sep,
            concepts_requested: lc.concepts,
            concepts_kept: model.concepts.len(),
            merged: outcome.merged,
            head_val_accuracy: acc,
            gamma: cd.gamma,
        },
    )?;
    Ok(model)
}

/// A checkpointed model with its bundle and calibrated detector.
pub struct Loaded {
    pub bundle: DatasetBundle,
    pub model: ConceptModel,
    pub detector: CalibratedDetector,
}

pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Loaded> {
    let bundle = load_bundle(cfg)?;
    let model = model_from(&Checkpoint::read(checkpoint)?, checkpoint)?;
    if model.concepts.channels() != bundle.channels() || model.head.classes() != bundle.num_classes() {
        return Err(oodconcepts_core::Error::Shape(format!(
            "checkpoint expects {} channels and {} classes, data has {} and {}",
            model.concepts.channels(),
            model.head.classes(),
            bundle.channels(),
            bundle.num_classes()
        ))
        .into());
    }
    let detector = detector(cfg, &bundle, &model.head)?;
    Ok(Loaded { bundle, model, detector })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct MetricsJson {
    pub eta_clf: f64,
    pub eta_det: f64,
    pub per_class_det: Vec<Option<f64>>,
    pub j_sep_global: f64,
    pub j_sep_per_class: Vec<Option<f64>>,
    pub j_sep_relative: Option<f64>,
}

fn separability(l: &Loaded, model: &ConceptModel, cfg: &RunConfig) -> Result<SeparabilityResult> {
    let pool = FeatureTensor::concat(&[&l.bundle.id_train.features, &l.bundle.ood_train])?;
    Ok(evaluate_separability(&l.detector, model, &pool, cfg.learn.ridge)?)
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path, baseline: Option<&Path>) -> Result<MetricsJson> {
    let l = load_model(cfg, checkpoint)?;
    let comp = evaluate_completeness(&l.detector, &l.model, &l.bundle.id_test, &l.bundle.ood_test)?;
    let sep = separability(&l, &l.model, cfg)?;
    let relative = match baseline {
        Some(p) => {
            let base = model_from(&Checkpoint::read(p)?, p)?;
            if base.head != l.model.head {
                return Err(oodconcepts_core::Error::Shape("baseline checkpoint uses a different head".into()).into());
            }
            let base_sep = separability(&l, &base, cfg)?;
            Some(relative_separability(&sep.per_class, &base_sep.per_class)?)
        }
        None => None,
    };
    let m = MetricsJson {
        eta_clf: comp.eta_clf,
        eta_det: comp.eta_det,
        per_class_det: comp.per_class_det,
        j_sep_global: sep.global,
        j_sep_per_class: sep.per_class,
        j_sep_relative: relative,
    };
    write_json(&out.join(METRICS_FILE), &m)?;
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(untagged)]
pub enum ClassId {
    Class(usize),
    Name(&'static str),
}

impl From<Target> for ClassId {
    fn from(t: Target) -> Self {
        match t {
            Target::Global => ClassId::Name("global"),
            Target::Class(j) => ClassId::Class(j),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ShapleyJson {
    pub class_id: ClassId,
    pub mode: &'static str,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    pub per_concept: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
    pub ranking: Vec<usize>,
    pub nu_full: f64,
    pub nu_empty: f64,
    pub sum: f64,
    /// Keyed by comma-separated member indices.
    pub characteristic_cache: BTreeMap<String, f64>,
}

impl ShapleyJson {
    fn new(target: Target, r: &ShapleyResult) -> Self {
        let (mode, samples, seed) = match r.mode {
            ShapleyMode::Exact => ("exact", None, None),
            ShapleyMode::MonteCarlo { samples, seed } => ("monteCarlo", Some(samples), Some(seed)),
        };
        Self {
            class_id: target.into(),
            mode,
            samples,
            seed,
            per_concept: r.values.clone(),
            std_errors: r.std_errors.clone(),
            ranking: r.ranking(),
            nu_full: r.nu_full,
            nu_empty: r.nu_empty,
            sum: r.values.iter().sum(),
            characteristic_cache: r.cache.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct ExplainJson {
    pub concepts: usize,
    pub auc_canonical: f64,
    pub results: Vec<ShapleyJson>,
    pub undefined_classes: Vec<usize>,
}

/// Shapley values for the global target and every defined class.
pub struct Attribution {
    pub global: ShapleyResult,
    pub classes: Vec<Option<ShapleyResult>>,
    pub auc_canonical: f64,
}

impl Attribution {
    /// Per-class rankings, falling back to the global one for undefined classes.
    pub fn rankings(&self) -> Vec<Vec<usize>> {
        self.classes.iter().map(|c| c.as_ref().unwrap_or(&self.global).ranking()).collect()
    }
}

pub fn attribute(cfg: &RunConfig, l: &Loaded, exact: Option<bool>, samples: Option<usize>) -> Result<Attribution> {
    let m = l.model.concepts.len();
    let exact = exact.unwrap_or_else(|| cfg.explain.mode.is_exact(m));
    let samples = samples.unwrap_or(cfg.explain.samples);
    let tune = FinetuneData::sample(&l.detector.spec, &l.model, &l.bundle.id_train, &l.bundle.ood_train, cfg.explain.finetune_samples)?;
    let mut ch = DetectionCharacteristic::new(&l.model, &l.detector.spec, &l.bundle.id_test.features, &l.bundle.ood_test, tune, cfg.finetune())?;
    let auc_canonical = ch.auc_canonical();
    let targets: Vec<Target> = std::iter::once(Target::Global).chain((0..l.model.head.classes()).map(Target::Class)).collect();
    let mut results = Vec::new();
    for (k, &t) in targets.iter().enumerate() {
        let r = match ch.game(t) {
            None => None,
            Some(mut game) if exact => Some(shapley_exact(&mut game)?),
            Some(mut game) => Some(shapley_monte_carlo(&mut game, samples, cfg.seed.wrapping_add(k as u64))?),
        };
        info!("shapley target {t}: {} coalitions evaluated", ch.evaluated());
        results.push(r);
    }
    let global = results.remove(0).expect("the global target is always defined");
    Ok(Attribution { global, classes: results, auc_canonical })
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PatternCsv {
    class: usize,
    concept_id: usize,
    shap: f64,
    mean_id_score: Option<f64>,
    mean_ood_score: Option<f64>,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct PatchJson {
    sample_index: usize,
    patch_index: usize,
    inner_product: f64,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct NearestJson {
    concept_id: usize,
    total: usize,
    patches: Vec<PatchJson>,
}

pub fn explain(cfg: &RunConfig, out: &Path, checkpoint: &Path, exact: Option<bool>, samples: Option<usize>) -> Result<ExplainJson> {
    let l = load_model(cfg, checkpoint)?;
    let a = attribute(cfg, &l, exact, samples)?;
    write_explain(cfg, out, &l, &a)
}

fn write_explain(cfg: &RunConfig, out: &Path, l: &Loaded, a: &Attribution) -> Result<ExplainJson> {
    let mut results = vec![ShapleyJson::new(Target::Global, &a.global)];
    let mut undefined = Vec::new();
    for (j, r) in a.classes.iter().enumerate() {
        match r {
            Some(r) => results.push(ShapleyJson::new(Target::Class(j), r)),
            None => undefined.push(j),
        }
    }
    let report = ExplainJson { concepts: l.model.concepts.len(), auc_canonical: a.auc_canonical, results, undefined_classes: undefined };
    write_json(&out.join(SHAPLEY_FILE), &report)?;

    let profiles = build_profiles(&l.model, &l.detector, &l.bundle.id_val.features, &l.bundle.ood_val)?;
    let mut rows = Vec::new();
    for (j, r) in a.classes.iter().enumerate() {
        let Some(r) = r else { continue };
        let s = pattern_summary(j, &r.values, &profiles.classes[j], r.values.len());
        rows.extend(s.rows.into_iter().map(|p| PatternCsv {
            class: j,
            concept_id: p.concept,
            shap: p.shap,
            mean_id_score: p.mean_id,
            mean_ood_score: p.mean_ood,
        }));
    }
    write_csv(&out.join(PATTERNS_FILE), &rows)?;

    let hits = nearest_patches(&l.model, &l.bundle.id_test.features, NEAREST_PATCH_THRESHOLD)?;
    let nearest: Vec<NearestJson> = hits
        .into_iter()
        .enumerate()
        .map(|(k, h)| NearestJson {
            concept_id: k,
            total: h.len(),
            patches: h
                .into_iter()
                .take(cfg.explain.nearest_limit)
                .map(|p| PatchJson { sample_index: p.sample, patch_index: p.patch, inner_product: p.inner_product })
                .collect(),
        })
        .collect();
    write_json(&out.join(NEAREST_FILE), &nearest)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
pub struct CurveCsv {
    #[serde(rename = "K")]
    pub k: usize,
    pub flips: usize,
    #[serde(rename = "aurocBefore")]
    pub auroc_before: f64,
    #[serde(rename = "aurocAfter")]
    pub auroc_after: f64,
}

pub fn intervene(cfg: &RunConfig, out: &Path, checkpoint: &Path, ks: Option<&[usize]>) -> Result<Vec<CurveCsv>> {
    let l = load_model(cfg, checkpoint)?;
    let a = attribute(cfg, &l, None, None)?;
    write_intervention(cfg, out, &l, &a, ks)
}

fn write_intervention(cfg: &RunConfig, out: &Path, l: &Loaded, a: &Attribution, ks: Option<&[usize]>) -> Result<Vec<CurveCsv>> {
    let m = l.model.concepts.len();
    let mut ks: Vec<usize> = match ks.or(cfg.intervene.ks.as_deref()) {
        Some(ks) => ks.to_vec(),
        None => (0..=m).collect(),
    };
    ks.sort_unstable();
    ks.dedup();
    if let Some(&k) = ks.iter().find(|&&k| k > m) {
        return Err(oodconcepts_core::Error::Argument(format!("K = {k} exceeds the {m} concepts")).into());
    }
    let profiles = build_profiles(&l.model, &l.detector, &l.bundle.id_val.features, &l.bundle.ood_val)?;
    let curve = intervention_curve(
        &l.model,
        &l.detector,
        &l.bundle.id_test.features,
        &l.bundle.ood_test,
        &profiles,
        &a.rankings(),
        &ks,
        cfg.intervene.edit,
    )?;
    let rows: Vec<CurveCsv> = curve
        .iter()
        .map(|p| CurveCsv { k: p.k, flips: p.flips, auroc_before: p.auroc_before, auroc_after: p.auroc_after })
        .collect();
    write_csv(&out.join(INTERVENTION_FILE), &rows)?;
    Ok(rows)
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct ManifestEntry {
    file: String,
    bytes: u64,
    sha256: String,
}

#[derive(Serialize)]
#[serde(rename_all = "camelCase")]
struct Manifest {
    seed: u64,
    checkpoint_sha256: String,
    files: Vec<ManifestEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Runs `eval`, `explain` and `intervene` into `out` and writes a manifest
/// of everything produced.
pub fn report(cfg: &RunConfig, out: &Path, checkpoint: &Path, baseline: Option<&Path>) -> Result<PathBuf> {
    eval(cfg, out, checkpoint, baseline)?;
    let l = load_model(cfg, checkpoint)?;
    let a = attribute(cfg, &l, None, None)?;
    write_explain(cfg, out, &l, &a)?;
    write_intervention(cfg, out, &l, &a, None)?;
    let mut files = Vec::new();
    for name in [METRICS_FILE, SHAPLEY_FILE, PATTERNS_FILE, NEAREST_FILE, INTERVENTION_FILE] {
        let p = out.join(name);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        files.push(ManifestEntry { file: name.to_string(), bytes: bytes.len() as u64, sha256: sha256_hex(&bytes) });
    }
    let ck = std::fs::read(checkpoint).map_err(|e| CliError::io(checkpoint, e))?;
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &Manifest { seed: cfg.seed, checkpoint_sha256: sha256_hex(&ck), files })?;
    Ok(path)
}
