//! AUROC, completeness and Fisher-style concept separability.

use alloc::vec::Vec;

use crate::concepts::{concept_scores, reduce_max, Reduction};
use crate::detectors::{CalibratedDetector, DetectorSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::{accuracy, ClassifierHead, ConceptModel};
use crate::tensor::{FeatureTensor, LabeledSplit};

/// Area under the ROC curve of `id` against `ood` scores. Ties count one
/// half. Runs in `O((n+m) log(n+m))` using midranks.
pub fn auroc(id: &[f64], ood: &[f64]) -> Result<f64> {
    if id.is_empty() || ood.is_empty() {
        return Err(arg_err!("AUROC needs both sides nonempty (got {} ID, {} OOD)", id.len(), ood.len()));
    }
    if id.iter().chain(ood).any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score in AUROC input".into()));
    }
    let mut all: Vec<(f64, bool)> = id.iter().map(|&s| (s, true)).chain(ood.iter().map(|&s| (s, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // Twice the rank sum of the ID side, kept integral: a tie block spanning
    // 1-based positions i..=j has midrank (i + j) / 2.
    let mut twice_rank_sum: u128 = 0;
    let mut start = 0;
    while start < all.len() {
        let mut end = start + 1;
        while end < all.len() && all[end].0 == all[start].0 {
            end += 1;
        }
        let twice_mid = (start + 1 + end) as u128;
        let id_in_block = all[start..end].iter().filter(|e| e.1).count() as u128;
        twice_rank_sum += twice_mid * id_in_block;
        start = end;
    }
    let n = id.len() as u128;
    let m = ood.len() as u128;
    let twice_u = twice_rank_sum - n * (n + 1);
    Ok(twice_u as f64 / (2 * n * m) as f64)
}

/// `(acc_concept - 1/L) / (acc_canonical - 1/L)`, unclipped.
pub fn classification_completeness(acc_concept: f64, acc_canonical: f64, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(arg_err!("need at least two classes, got {classes}"));
    }
    let chance = 1.0 / classes as f64;
    if acc_canonical <= chance {
        return Err(Error::Numeric(alloc::format!(
            "degenerate classifier: canonical accuracy {acc_canonical} is not above chance {chance}"
        )));
    }
    Ok((acc_concept - chance) / (acc_canonical - chance))
}

/// `(auc_concept - 0.5) / (auc_canonical - 0.5)`, unclipped.
pub fn detection_completeness(auc_concept: f64, auc_canonical: f64) -> Result<f64> {
    if auc_canonical <= 0.5 {
        return Err(Error::Numeric(alloc::format!(
            "degenerate detector: canonical AUROC {auc_canonical} is not above 0.5"
        )));
    }
    Ok((auc_concept - 0.5) / (auc_canonical - 0.5))
}

/// Detector scores and predicted classes of one world on one tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct WorldView {
    pub scores: Vec<f64>,
    pub predictions: Vec<usize>,
}

pub fn world_view(spec: &DetectorSpec, head: &ClassifierHead, z: &FeatureTensor) -> Result<WorldView> {
    let out = head.forward(z)?;
    Ok(WorldView { scores: spec.score_from(&out.pooled, &out.logits)?, predictions: out.predictions() })
}

/// Canonical world: the head on `φ`.
pub fn canonical_view(spec: &DetectorSpec, head: &ClassifierHead, z: &FeatureTensor) -> Result<WorldView> {
    world_view(spec, head, z)
}

/// Concept world: the head on `g(φ C)`.
pub fn concept_view(spec: &DetectorSpec, model: &ConceptModel, z: &FeatureTensor) -> Result<WorldView> {
    world_view(spec, &model.head, &model.reconstruct(z)?)
}

/// Splits `scores` by predicted class.
pub fn class_conditioned(scores: &[f64], predictions: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let mut out = alloc::vec![Vec::new(); classes];
    for (&s, &y) in scores.iter().zip(predictions) {
        out[y].push(s);
    }
    out
}

/// Minimum per-side sample count for a per-class AUROC.
pub const MIN_CLASS_SAMPLES: usize = 2;

/// Per-class detection completeness: the numerator AUROC is restricted to
/// samples whose concept-world prediction is `j`; the denominator is the
/// global canonical AUROC. `None` when a side has too few samples.
pub fn per_class_detection_completeness(
    concept_id: &WorldView,
    concept_ood: &WorldView,
    auc_canonical: f64,
    classes: usize,
) -> Result<Vec<Option<f64>>> {
    let id = class_conditioned(&concept_id.scores, &concept_id.predictions, classes);
    let ood = class_conditioned(&concept_ood.scores, &concept_ood.predictions, classes);
    id.iter()
        .zip(&ood)
        .map(|(a, b)| {
            if a.len() < MIN_CLASS_SAMPLES || b.len() < MIN_CLASS_SAMPLES {
                Ok(None)
            } else {
                detection_completeness(auroc(a, b)?, auc_canonical).map(Some)
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletenessResult {
    pub eta_clf: f64,
    pub eta_det: f64,
    pub per_class_det: Vec<Option<f64>>,
    pub acc_concept: f64,
    pub acc_canonical: f64,
    pub auc_concept: f64,
    pub auc_canonical: f64,
}

pub fn evaluate_completeness(
    cd: &CalibratedDetector,
    model: &ConceptModel,
    id_test: &LabeledSplit,
    ood_test: &FeatureTensor,
) -> Result<CompletenessResult> {
    let labels = id_test.labels.labels();
    let classes = id_test.labels.num_classes();
    if classes != model.head.classes() {
        return Err(shape_err!("labels have {classes} classes, head has {}", model.head.classes()));
    }
    let can_id = canonical_view(&cd.spec, &model.head, &id_test.features)?;
    let can_ood = canonical_view(&cd.spec, &model.head, ood_test)?;
    let con_id = concept_view(&cd.spec, model, &id_test.features)?;
    let con_ood = concept_view(&cd.spec, model, ood_test)?;

    let acc_canonical = accuracy(&can_id.predictions, labels);
    let acc_concept = accuracy(&con_id.predictions, labels);
    let auc_canonical = auroc(&can_id.scores, &can_ood.scores)?;
    let auc_concept = auroc(&con_id.scores, &con_ood.scores)?;
    Ok(CompletenessResult {
        eta_clf: classification_completeness(acc_concept, acc_canonical, classes)?,
        eta_det: detection_completeness(auc_concept, auc_canonical)?,
        per_class_det: per_class_detection_completeness(&con_id, &con_ood, auc_canonical, classes)?,
        acc_concept,
        acc_canonical,
        auc_concept,
        auc_canonical,
    })
}

/// Diagonal loading added to the within-group scatter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    Absolute(f64),
    /// `factor · tr(Sw) / m`.
    RelativeTrace(f64),
}

impl Ridge {
    pub const DEFAULT: Ridge = Ridge::RelativeTrace(1e-6);

    pub fn resolve(self, sw: &Matrix) -> Result<f64> {
        let r = match self {
            Ridge::Absolute(r) => r,
            Ridge::RelativeTrace(f) => f * sw.trace() / sw.rows().max(1) as f64,
        };
        if !(r >= 0.0) || !r.is_finite() {
            return Err(arg_err!("ridge must be a finite nonnegative number, got {r}"));
        }
        Ok(r)
    }
}

impl Default for Ridge {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScatterResult {
    pub j: f64,
    /// Within-group scatter including the ridge.
    pub sw: Matrix,
    pub sb: Matrix,
    pub ridge: f64,
}

/// Unnormalized scatter `Σ (v - μ)(v - μ)ᵀ` of the rows of `v`, plus their mean.
fn scatter(v: &Matrix) -> (Matrix, Vec<f64>) {
    let mu = v.column_means();
    let mut centered = v.clone();
    for r in 0..centered.rows() {
        centered.row_mut(r).iter_mut().zip(&mu).for_each(|(x, m)| *x -= m);
    }
    (centered.t_matmul(&centered), mu)
}

/// `J = dᵀ Sw⁻¹ d` with `d = μ_out - μ_in`, i.e. `tr(Sw⁻¹ Sb)` for the
/// rank-one `Sb = d dᵀ`. Rows of `v_in`/`v_out` are reduced score vectors.
pub fn scatter_separability(v_in: &Matrix, v_out: &Matrix, ridge: Ridge) -> Result<ScatterResult> {
    if v_in.rows() == 0 || v_out.rows() == 0 {
        return Err(arg_err!("separability needs both groups nonempty ({} in, {} out)", v_in.rows(), v_out.rows()));
    }
    if v_in.cols() != v_out.cols() {
        return Err(shape_err!("groups have {} and {} concepts", v_in.cols(), v_out.cols()));
    }
    let m = v_in.cols();
    let (mut sw, mu_in) = scatter(v_in);
    let (sw_out, mu_out) = scatter(v_out);
    sw.add_assign(&sw_out);
    let ridge = ridge.resolve(&sw)?;
    for i in 0..m {
        sw[(i, i)] += ridge;
    }
    let d: Vec<f64> = mu_out.iter().zip(&mu_in).map(|(o, i)| o - i).collect();
    let dm = Matrix::column_vector(&d);
    let sb = dm.matmul_t(&dm);
    let x = sw.cholesky()?.solve_vec(&d);
    let j = crate::linalg::dot(&d, &x);
    Ok(ScatterResult { j, sw, sb, ridge })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeparabilityResult {
    pub global: f64,
    /// `None` where a class lacks one of the two groups or its scatter is degenerate.
    pub per_class: Vec<Option<f64>>,
    pub sw: Matrix,
    pub sb: Matrix,
}

/// Separability of detected-ID vs detected-OOD reduced scores.
///
/// `decisions` (true = detected ID) fix group membership; `classes` assigns
/// each row to a class for the per-class variant.
pub fn separability_from_scores(
    reduced: &Matrix,
    decisions: &[bool],
    classes: &[usize],
    num_classes: usize,
    ridge: Ridge,
) -> Result<SeparabilityResult> {
    if decisions.len() != reduced.rows() || classes.len() != reduced.rows() {
        return Err(shape_err!("{} rows, {} decisions, {} classes", reduced.rows(), decisions.len(), classes.len()));
    }
    let split = |pred: &dyn Fn(usize) -> bool| {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in (0..reduced.rows()).filter(|&r| pred(r)) {
            if decisions[r] { a.push(r) } else { b.push(r) }
        }
        (reduced.select_rows(&a), reduced.select_rows(&b))
    };
    let (vin, vout) = split(&|_| true);
    let global = scatter_separability(&vin, &vout, ridge)?;
    let per_class = (0..num_classes)
        .map(|y| {
            let (vin, vout) = split(&|r| classes[r] == y);
            if vin.rows() == 0 || vout.rows() == 0 {
                return Ok(None);
            }
            match scatter_separability(&vin, &vout, ridge) {
                Ok(s) => Ok(Some(s.j)),
                Err(Error::Numeric(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SeparabilityResult { global: global.j, per_class, sw: global.sw, sb: global.sb })
}

/// Separability of `model`'s concepts on the pooled ID+OOD training set:
/// canonical detector decisions choose the group, concept-world predictions
/// choose the class, and reduced scores use the exact max.
pub fn evaluate_separability(
    cd: &CalibratedDetector,
    model: &ConceptModel,
    pool: &FeatureTensor,
    ridge: Ridge,
) -> Result<SeparabilityResult> {
    let canonical = canonical_view(&cd.spec, &model.head, pool)?;
    let decisions = cd.decisions(&canonical.scores);
    let concept = concept_view(&cd.spec, model, pool)?;
    let reduced = reduce_max(&concept_scores(&model.concepts, pool)?, Reduction::Exact)?;
    separability_from_scores(&reduced.values, &decisions, &concept.predictions, model.head.classes(), ridge)
}

/// Median over classes of `(J(C) - J(C')) / J(C')`, skipping classes where
/// either value is undefined or `J(C') ≤ 0`.
pub fn relative_separability(per_class: &[Option<f64>], baseline: &[Option<f64>]) -> Result<f64> {
    if per_class.len() != baseline.len() {
        return Err(shape_err!("{} classes against a baseline of {}", per_class.len(), baseline.len()));
    }
    let mut ratios: Vec<f64> = per_class
        .iter()
        .zip(baseline)
        .filter_map(|(a, b)| match (a, b) {
            (Some(a), Some(b)) if *b > 0.0 => Some((a - b) / b),
            _ => None,
        })
        .collect();
    if ratios.is_empty() {
        return Err(arg_err!("no class has a defined separability on both sides"));
    }
    ratios.sort_by(f64::total_cmp);
    let k = ratios.len();
    Ok(if k % 2 == 1 { ratios[k / 2] } else { 0.5 * (ratios[k / 2 - 1] + ratios[k / 2]) })
}

/// Everything `eval` reports.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub completeness: CompletenessResult,
    pub separability: SeparabilityResult,
    pub relative: Option<f64>,
}
