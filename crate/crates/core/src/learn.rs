//! Concept-learning objective and its training loop.
//!
//! The objective is minimized:
//!
//! ```text
//! CE - λ_expl R_expl + λ_mse J_mse + λ_norm J_norm - λ_sep J_sep
//! ```
//!
//! where `CE` is the concept-world cross-entropy on ID samples.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{GradientTape, Var};
use crate::concepts::{deduplicate, normalize_columns, ConceptMatrix, DEDUP_THRESHOLD, DEFAULT_ALPHA};
use crate::detectors::{CalibratedDetector, DetectorKind, DetectorSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::metrics::{auroc, detection_completeness, Ridge};
use crate::model::{argmax_rows, record_reconstruction, ClassifierHead, ConceptModel, ReconstructionNet, ReconstructionVars, DEFAULT_HIDDEN};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{DatasetBundle, FeatureTensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeparabilityMode {
    Global,
    PerClass,
}

impl FromStr for SeparabilityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "global" => Ok(Self::Global),
            "perclass" | "per-class" | "per_class" => Ok(Self::PerClass),
            other => Err(Error::Config(format!("unknown separability mode {other:?}"))),
        }
    }
}

impl fmt::Display for SeparabilityMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::PerClass => "perClass",
        })
    }
}

/// Regularizer weights. `expl` multiplies the explainability reward and
/// `sep` the separability reward; the others multiply penalties.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Weights {
    pub expl: f64,
    pub mse: f64,
    pub norm: f64,
    pub sep: f64,
}

/// Named regularizer regimes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Baseline,
    MseNorm,
    SepOnly,
    All,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Self::Baseline, Self::MseNorm, Self::SepOnly, Self::All];

    pub fn name(self) -> &'static str {
        match self {
            Self::Baseline => "baseline",
            Self::MseNorm => "mse-norm",
            Self::SepOnly => "sep-only",
            Self::All => "all",
        }
    }

    /// `(λ_mse, λ_norm, λ_sep)` for `detector`.
    pub fn lambdas(self, detector: DetectorKind) -> (f64, f64, f64) {
        let mse = match detector {
            DetectorKind::Msp => 10.0,
            DetectorKind::Odin => 1e8,
            DetectorKind::Energy => 1.0,
            DetectorKind::Mahalanobis => 0.1,
        };
        match self {
            Self::Baseline => (0.0, 0.0, 0.0),
            Self::MseNorm => (mse, 0.1, 0.0),
            Self::SepOnly => (0.0, 0.0, 50.0),
            Self::All => (mse, 0.1, 50.0),
        }
    }

    /// Parses `"baseline"`, `"energy-all"`, `"msp-mse-norm"` and the like.
    /// A missing detector prefix yields `None` for the kind.
    pub fn parse_named(s: &str) -> Result<(Option<DetectorKind>, Preset)> {
        let lower = s.to_ascii_lowercase();
        let find = |rest: &str| Self::ALL.into_iter().find(|p| p.name() == rest);
        if let Some(p) = find(&lower) {
            return Ok((None, p));
        }
        if let Some((head, rest)) = lower.split_once('-') {
            if let (Ok(kind), Some(p)) = (head.parse::<DetectorKind>(), find(rest)) {
                return Ok((Some(kind), p));
            }
        }
        Err(Error::Config(format!("unknown preset {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LearnConfig {
    /// Number of concepts `m`.
    pub concepts: usize,
    /// Hidden width of `g`.
    pub hidden: usize,
    pub lambda_expl: f64,
    pub lambda_mse: f64,
    pub lambda_norm: f64,
    pub lambda_sep: f64,
    /// Nearest patches per concept in `R_expl`.
    pub neighbors: usize,
    /// Smooth-max temperature.
    pub alpha: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub separability: SeparabilityMode,
    pub ridge: Ridge,
    /// Cosine threshold for post-training deduplication; `None` disables it.
    pub dedup: Option<f64>,
}

impl Default for LearnConfig {
    fn default() -> Self {
        Self {
            concepts: 100,
            hidden: DEFAULT_HIDDEN,
            lambda_expl: 10.0,
            lambda_mse: 0.0,
            lambda_norm: 0.0,
            lambda_sep: 0.0,
            neighbors: 10,
            alpha: DEFAULT_ALPHA,
            epochs: 30,
            batch_size: 128,
            learning_rate: 1e-3,
            seed: 0,
            separability: SeparabilityMode::Global,
            ridge: Ridge::DEFAULT,
            dedup: Some(DEDUP_THRESHOLD),
        }
    }
}

impl LearnConfig {
    pub fn with_preset(mut self, preset: Preset, detector: DetectorKind) -> Self {
        (self.lambda_mse, self.lambda_norm, self.lambda_sep) = preset.lambdas(detector);
        self
    }

    pub fn weights(&self) -> Weights {
        Weights { expl: self.lambda_expl, mse: self.lambda_mse, norm: self.lambda_norm, sep: self.lambda_sep }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        for (name, v) in [
            ("lambdaExpl", self.lambda_expl),
            ("lambdaMse", self.lambda_mse),
            ("lambdaNorm", self.lambda_norm),
            ("lambdaSep", self.lambda_sep),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return bad(format!("{name} must be a finite nonnegative number, got {v}"));
            }
        }
        if self.concepts == 0 || self.hidden == 0 {
            return bad("concept count and hidden width must be positive".into());
        }
        if self.neighbors == 0 {
            return bad("K must be at least 1".into());
        }
        if !(self.alpha > 0.0) {
            return bad(format!("alpha must be positive, got {}", self.alpha));
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if let Some(t) = self.dedup {
            if !(0.0..=1.0).contains(&t) {
                return bad(format!("dedup threshold must lie in [0, 1], got {t}"));
            }
        }
        Ok(())
    }
}

/// Sum of the `k` training patches with the largest inner product with each
/// concept, one row per concept (`m x d`). Rows of `patches` are patches.
pub fn neighbor_sums(c: &Matrix, patches: &Matrix, k: usize) -> Result<Matrix> {
    if patches.cols() != c.rows() {
        return Err(shape_err!("patches have {} channels, concepts {}", patches.cols(), c.rows()));
    }
    if k == 0 || k > patches.rows() {
        return Err(arg_err!("K = {k} but only {} patches are available", patches.rows()));
    }
    let scores = patches.matmul(c)?;
    let (m, d) = (c.cols(), c.rows());
    let mut out = Matrix::zeros(m, d);
    let mut order: Vec<usize> = (0..patches.rows()).collect();
    for i in 0..m {
        let key = |r: &usize| scores[(*r, i)];
        order.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.cmp(b)));
        for &r in &order[..k] {
            out.row_mut(i).iter_mut().zip(patches.row(r)).for_each(|(o, v)| *o += v);
        }
    }
    Ok(out)
}

/// `R_expl`: mean similarity of every concept to its nearest patches minus
/// mean pairwise similarity between concepts. `a` comes from [`neighbor_sums`].
pub fn record_reg_expl(tape: &mut GradientTape, c: Var, a: &Matrix, k: usize) -> Result<Var> {
    let m = tape.value(c).cols();
    let ct = tape.transpose(c);
    let av = tape.constant(a.clone());
    let prod = tape.mul(ct, av)?;
    let coherence = tape.sum_all(prod);
    let coherence = tape.scale(coherence, 1.0 / (m * k) as f64);
    if m < 2 {
        return Ok(coherence);
    }
    let gram = tape.matmul(ct, c)?;
    let mut upper = Matrix::zeros(m, m);
    for i in 0..m {
        for j in i + 1..m {
            upper[(i, j)] = 1.0;
        }
    }
    let mask = tape.constant(upper);
    let pairs = tape.mul(gram, mask)?;
    let redundancy = tape.sum_all(pairs);
    let redundancy = tape.scale(redundancy, 1.0 / (m * (m - 1)) as f64);
    tape.sub(coherence, redundancy)
}

/// Per-sample mean of `‖φ - φ̂‖²` over the first `samples` samples.
pub fn record_reg_norm(tape: &mut GradientTape, recon_rows: Var, target_rows: &Matrix, samples: usize) -> Result<Var> {
    let idx: Vec<usize> = (0..target_rows.rows()).collect();
    let recon = tape.select_rows(recon_rows, &idx)?;
    let target = tape.constant(target_rows.clone());
    let diff = tape.sub(recon, target)?;
    let sq = tape.square(diff);
    let total = tape.sum_all(sq);
    Ok(tape.scale(total, 1.0 / samples as f64))
}

/// Mean squared gap between concept-world and (detached) canonical scores,
/// averaged separately over the ID rows and the OOD rows of `scores`.
pub fn record_reg_mse(tape: &mut GradientTape, scores: Var, canonical_id: &[f64], canonical_ood: &[f64]) -> Result<Var> {
    if canonical_ood.is_empty() {
        return Err(arg_err!("the score-matching term needs a nonempty OOD batch"));
    }
    if canonical_id.is_empty() {
        return Err(arg_err!("the score-matching term needs a nonempty ID batch"));
    }
    let n_id = canonical_id.len();
    let part = |tape: &mut GradientTape, rows: Vec<usize>, target: &[f64]| -> Result<Var> {
        let s = tape.select_rows(scores, &rows)?;
        let t = tape.constant(Matrix::column_vector(target));
        let d = tape.sub(s, t)?;
        let sq = tape.square(d);
        tape.mean_all(sq)
    };
    let a = part(tape, (0..n_id).collect(), canonical_id)?;
    let b = part(tape, (n_id..n_id + canonical_ood.len()).collect(), canonical_ood)?;
    tape.add(a, b)
}

/// `dᵀ (Sw + ridge·I)⁻¹ d` between two row subsets of `reduced`. `None`
/// when a side is empty or the scatter vanishes.
pub fn record_fisher(
    tape: &mut GradientTape,
    reduced: Var,
    inside: &[usize],
    outside: &[usize],
    ridge: Ridge,
) -> Result<Option<Var>> {
    if inside.is_empty() || outside.is_empty() {
        return Ok(None);
    }
    let m = tape.value(reduced).cols();
    let group = |tape: &mut GradientTape, idx: &[usize]| -> Result<(Var, Var)> {
        let v = tape.select_rows(reduced, idx)?;
        let mu = tape.col_mean(v)?;
        let neg = tape.scale(mu, -1.0);
        let centered = tape.add_row(v, neg)?;
        let ct = tape.transpose(centered);
        Ok((tape.matmul(ct, centered)?, mu))
    };
    let (sw_in, mu_in) = group(tape, inside)?;
    let (sw_out, mu_out) = group(tape, outside)?;
    let sw = tape.add(sw_in, sw_out)?;
    let r = ridge.resolve(tape.value(sw))?;
    if tape.value(sw).trace() + r * m as f64 <= 0.0 {
        return Ok(None);
    }
    let loading = match ridge {
        Ridge::Absolute(_) => tape.constant(Matrix::identity(m).scale(r)),
        // factor · tr(Sw) / m on the diagonal, differentiated through Sw
        Ridge::RelativeTrace(f) => {
            let eye = tape.constant(Matrix::identity(m));
            let diag = tape.mul(sw, eye)?;
            let tr = tape.sum_all(diag);
            let tr = tape.scale(tr, f / m as f64);
            let ones_col = tape.constant(Matrix::from_vec(m, 1, vec![1.0; m])?);
            let ones_row = tape.constant(Matrix::from_vec(1, m, vec![1.0; m])?);
            let col = tape.matmul(ones_col, tr)?;
            let full = tape.matmul(col, ones_row)?;
            tape.mul(full, eye)?
        }
    };
    let sw = tape.add(sw, loading)?;
    let d = tape.sub(mu_out, mu_in)?;
    let dt = tape.transpose(d);
    let x = tape.solve(sw, dt)?;
    let prod = tape.mul(dt, x)?;
    Ok(Some(tape.sum_all(prod)))
}

/// Separability reward on smooth-max reduced scores. `detected_id` fixes
/// group membership; in per-class mode `classes` assigns samples to classes
/// and the result is the mean over classes having both groups.
pub fn record_reg_sep(
    tape: &mut GradientTape,
    reduced: Var,
    detected_id: &[bool],
    classes: &[usize],
    num_classes: usize,
    mode: SeparabilityMode,
    ridge: Ridge,
) -> Result<Option<Var>> {
    let split = |keep: &dyn Fn(usize) -> bool| {
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for r in (0..detected_id.len()).filter(|&r| keep(r)) {
            if detected_id[r] { a.push(r) } else { b.push(r) }
        }
        (a, b)
    };
    match mode {
        SeparabilityMode::Global => {
            let (a, b) = split(&|_| true);
            let j = record_fisher(tape, reduced, &a, &b, ridge)?;
            if j.is_none() {
                log::warn!("separability term skipped: {} detected-ID and {} detected-OOD samples in batch", a.len(), b.len());
            }
            Ok(j)
        }
        SeparabilityMode::PerClass => {
            let mut parts = Vec::new();
            for y in 0..num_classes {
                let (a, b) = split(&|r| classes[r] == y);
                if let Some(j) = record_fisher(tape, reduced, &a, &b, ridge)? {
                    parts.push(j);
                }
            }
            if parts.is_empty() {
                log::warn!("separability term skipped: no class has both detection groups in batch");
                return Ok(None);
            }
            let cat = tape.hconcat(&parts)?;
            Ok(Some(tape.mean_all(cat)?))
        }
    }
}

/// One objective evaluation's data. Everything here is constant with
/// respect to the trained parameters.
#[derive(Clone, Debug)]
pub struct Batch<'a> {
    pub id: &'a FeatureTensor,
    pub labels: &'a [usize],
    pub ood: &'a FeatureTensor,
    pub canonical_id: &'a [f64],
    pub canonical_ood: &'a [f64],
    /// Canonical detector decisions for `[id; ood]`.
    pub detected_id: &'a [bool],
    /// Nearest-patch sums, `m x d`.
    pub neighbor_sums: &'a Matrix,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveSettings {
    pub weights: Weights,
    pub neighbors: usize,
    pub alpha: f64,
    pub separability: SeparabilityMode,
    pub ridge: Ridge,
}

impl From<&LearnConfig> for ObjectiveSettings {
    fn from(cfg: &LearnConfig) -> Self {
        Self {
            weights: cfg.weights(),
            neighbors: cfg.neighbors,
            alpha: cfg.alpha,
            separability: cfg.separability,
            ridge: cfg.ridge,
        }
    }
}

/// Individual objective terms (unweighted) and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub cross_entropy: f64,
    pub r_expl: f64,
    pub j_mse: f64,
    pub j_norm: f64,
    pub j_sep: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn is_finite(&self) -> bool {
        [self.cross_entropy, self.r_expl, self.j_mse, self.j_norm, self.j_sep, self.total].iter().all(|v| v.is_finite())
    }
}

/// Tape handles of a concept-world forward pass over `[id; ood]`.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(N·P) x m` concept scores (after masking, if any).
    pub scores: Var,
    pub recon: Var,
    pub pooled: Var,
    pub logits: Var,
}

/// `φ C`, optional score mask, `g`, head.
pub fn record_forward(
    tape: &mut GradientTape,
    c: Var,
    g: &ReconstructionVars,
    head: &ClassifierHead,
    rows: &Matrix,
    patches: usize,
    mask: Option<&[bool]>,
) -> Result<ForwardVars> {
    let z = tape.constant(rows.clone());
    let mut scores = tape.matmul(z, c)?;
    if let Some(keep) = mask {
        let m = tape.value(scores).cols();
        if keep.len() != m {
            return Err(shape_err!("mask has {} entries for {m} concepts", keep.len()));
        }
        let mut full = Matrix::filled(rows.rows(), m, 1.0);
        crate::model::mask_columns(&mut full, keep);
        let mv = tape.constant(full);
        scores = tape.mul(scores, mv)?;
    }
    let recon = record_reconstruction(tape, g, scores)?;
    let (pooled, logits) = head.record(tape, recon, patches)?;
    Ok(ForwardVars { scores, recon, pooled, logits })
}

fn stacked_rows(id: &FeatureTensor, ood: &FeatureTensor) -> Result<Matrix> {
    Ok(FeatureTensor::concat(&[id, ood])?.patch_rows().clone())
}

/// Concept-world cross-entropy over the first `labels.len()` samples.
pub fn record_cross_entropy(tape: &mut GradientTape, logits: Var, labels: &[usize]) -> Result<Var> {
    let idx: Vec<usize> = (0..labels.len()).collect();
    let l = tape.select_rows(logits, &idx)?;
    let lp = tape.log_softmax_pick(l, labels)?;
    let mean = tape.mean_all(lp)?;
    Ok(tape.scale(mean, -1.0))
}

fn record_objective(
    tape: &mut GradientTape,
    c: Var,
    g: &ReconstructionVars,
    head: &ClassifierHead,
    spec: &DetectorSpec,
    batch: &Batch<'_>,
    settings: &ObjectiveSettings,
) -> Result<(Var, LossTerms)> {
    let n_id = batch.id.samples();
    let n_all = n_id + batch.ood.samples();
    let p = batch.id.patches();
    if batch.labels.len() != n_id || batch.canonical_id.len() != n_id {
        return Err(shape_err!("ID batch of {n_id} samples with {} labels, {} scores", batch.labels.len(), batch.canonical_id.len()));
    }
    if batch.canonical_ood.len() != batch.ood.samples() || batch.detected_id.len() != n_all {
        return Err(shape_err!("batch bookkeeping does not match {n_all} samples"));
    }
    let w = settings.weights;
    let rows = stacked_rows(batch.id, batch.ood)?;
    let fwd = record_forward(tape, c, g, head, &rows, p, None)?;
    let mut terms = LossTerms::default();

    let ce = record_cross_entropy(tape, fwd.logits, batch.labels)?;
    terms.cross_entropy = tape.scalar(ce);
    let mut total = ce;

    if w.expl > 0.0 {
        let r = record_reg_expl(tape, c, batch.neighbor_sums, settings.neighbors)?;
        terms.r_expl = tape.scalar(r);
        let r = tape.scale(r, w.expl);
        total = tape.sub(total, r)?;
    }
    if w.mse > 0.0 {
        let s = spec.record(tape, fwd.pooled, fwd.logits)?;
        let j = record_reg_mse(tape, s, batch.canonical_id, batch.canonical_ood)?;
        terms.j_mse = tape.scalar(j);
        let j = tape.scale(j, w.mse);
        total = tape.add(total, j)?;
    }
    if w.norm > 0.0 {
        let target = batch.id.patch_rows();
        let j = record_reg_norm(tape, fwd.recon, target, n_id)?;
        terms.j_norm = tape.scalar(j);
        let j = tape.scale(j, w.norm);
        total = tape.add(total, j)?;
    }
    if w.sep > 0.0 {
        let reduced = tape.group_smooth_max_abs(fwd.scores, p, settings.alpha)?;
        let classes = argmax_rows(tape.value(fwd.logits));
        let j = record_reg_sep(tape, reduced, batch.detected_id, &classes, head.classes(), settings.separability, settings.ridge)?;
        if let Some(j) = j {
            terms.j_sep = tape.scalar(j);
            let j = tape.scale(j, w.sep);
            total = tape.sub(total, j)?;
        }
    }
    terms.total = tape.scalar(total);
    Ok((total, terms))
}

/// Objective value at `(c, g)`; `c` is used as given, without normalization.
pub fn objective_value(
    c: &Matrix,
    g: &ReconstructionNet,
    head: &ClassifierHead,
    spec: &DetectorSpec,
    batch: &Batch<'_>,
    settings: &ObjectiveSettings,
) -> Result<LossTerms> {
    let mut tape = GradientTape::new();
    let cv = tape.constant(c.clone());
    let gv = g.record_params(&mut tape, false);
    Ok(record_objective(&mut tape, cv, &gv, head, spec, batch, settings)?.1)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradient {
    pub terms: LossTerms,
    pub c: Matrix,
    /// Gradients for `W1, b1, W2, b2`.
    pub g: [Matrix; 4],
}

pub fn objective_gradient(
    c: &Matrix,
    g: &ReconstructionNet,
    head: &ClassifierHead,
    spec: &DetectorSpec,
    batch: &Batch<'_>,
    settings: &ObjectiveSettings,
) -> Result<ObjectiveGradient> {
    let mut tape = GradientTape::new();
    let cv = tape.param(c.clone());
    let gv = g.record_params(&mut tape, true);
    let (loss, terms) = record_objective(&mut tape, cv, &gv, head, spec, batch, settings)?;
    let grads = tape.backward(loss, 1.0)?;
    let shapes = g.shapes();
    Ok(ObjectiveGradient {
        terms,
        c: grads.wrt(cv, c.shape()),
        g: [grads.wrt(gv.w1, shapes[0]), grads.wrt(gv.b1, shapes[1]), grads.wrt(gv.w2, shapes[2]), grads.wrt(gv.b2, shapes[3])],
    })
}

/// One row of the training history: epoch means of the unweighted terms.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub r_expl: f64,
    pub j_mse: f64,
    pub j_norm: f64,
    pub j_sep: f64,
    /// Validation detection completeness after the epoch.
    pub eta_det_val: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ConceptModel,
    pub history: Vec<HistoryRow>,
    pub epoch: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub detector: CalibratedDetector,
    /// `(dropped, partner, sign)` for every concept removed by deduplication.
    pub merged: Vec<(usize, usize, f64)>,
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

/// Detection completeness of `model` on validation data, or `None` when
/// the canonical detector is degenerate there.
pub fn validation_completeness(
    spec: &DetectorSpec,
    model: &ConceptModel,
    id_val: &FeatureTensor,
    ood_val: &FeatureTensor,
) -> Result<Option<f64>> {
    let can_id = spec.score(&model.head, id_val)?;
    let can_ood = spec.score(&model.head, ood_val)?;
    let con_id = spec.score(&model.head, &model.reconstruct(id_val)?)?;
    let con_ood = spec.score(&model.head, &model.reconstruct(ood_val)?)?;
    let auc_can = auroc(&can_id, &can_ood)?;
    let auc_con = auroc(&con_id, &con_ood)?;
    Ok(detection_completeness(auc_con, auc_can).ok())
}

/// Removes near-duplicate concepts and folds each dropped concept's first
/// layer row of `g` into its partner (with the sign of their alignment).
pub fn deduplicate_model(model: &ConceptModel, threshold: f64) -> Result<(ConceptModel, Vec<(usize, usize, f64)>)> {
    let dd = deduplicate(&model.concepts, threshold);
    let mut w1 = model.g.w1.clone();
    for &(dropped, partner, sign) in &dd.merged {
        let src = model.g.w1.row(dropped).to_vec();
        w1.row_mut(partner).iter_mut().zip(&src).for_each(|(w, s)| *w += sign * s);
    }
    let g = ReconstructionNet::new(w1.select_rows(&dd.kept), model.g.b1.clone(), model.g.w2.clone(), model.g.b2.clone())?;
    Ok((ConceptModel::new(dd.concepts, g, model.head.clone())?, dd.merged))
}

/// Learns concepts and `g` for a frozen head and detector.
///
/// The threshold is calibrated once on ID validation data before training.
/// Each epoch refreshes the nearest-patch sets, then takes one Adam step per
/// mini-batch on `C` and `g`, renormalizing `C` after every step.
pub fn train_concepts(
    cfg: &LearnConfig,
    bundle: &DatasetBundle,
    head: &ClassifierHead,
    spec: &DetectorSpec,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    bundle.validate()?;
    let d = bundle.channels();
    if head.channels() != d || head.classes() != bundle.num_classes() {
        return Err(shape_err!("head is {}x{} but data has {} classes, {} channels", head.classes(), head.channels(), bundle.num_classes(), d));
    }
    let detector = CalibratedDetector::calibrate(spec.clone(), head, &bundle.id_val.features)?;
    let id_train = &bundle.id_train;
    let ood_train = &bundle.ood_train;
    let canon_id = spec.score(head, &id_train.features)?;
    let canon_ood = spec.score(head, ood_train)?;
    let det_id = detector.decisions(&canon_id);
    let det_ood = detector.decisions(&canon_ood);

    let mut c = ConceptMatrix::random(d, cfg.concepts, cfg.seed)?.matrix().clone();
    let mut g = ReconstructionNet::random(cfg.concepts, cfg.hidden, d, cfg.seed.wrapping_add(1))?;
    let mut shapes = vec![c.shape()];
    shapes.extend(g.shapes());
    let mut adam = Adam::new(AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() }, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(2));
    let settings = ObjectiveSettings::from(cfg);

    let n_id = id_train.labels.len();
    let n_ood = ood_train.samples();
    let batches = n_id.div_ceil(cfg.batch_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    let zeros = Matrix::zeros(cfg.concepts, d);

    for epoch in 0..cfg.epochs {
        let a = if cfg.lambda_expl > 0.0 { neighbor_sums(&c, id_train.features.patch_rows(), cfg.neighbors)? } else { zeros.clone() };
        let perm_id = shuffled(&mut rng, n_id);
        let perm_ood = shuffled(&mut rng, n_ood);
        let mut sums = LossTerms::default();
        for b in 0..batches {
            let ids = &perm_id[b * cfg.batch_size..((b + 1) * cfg.batch_size).min(n_id)];
            let oods = &perm_ood[b * n_ood / batches..(b + 1) * n_ood / batches];
            let id = id_train.features.select(ids);
            let labels: Vec<usize> = ids.iter().map(|&i| id_train.labels.labels()[i]).collect();
            let ood = ood_train.select(oods);
            let cid: Vec<f64> = ids.iter().map(|&i| canon_id[i]).collect();
            let cood: Vec<f64> = oods.iter().map(|&i| canon_ood[i]).collect();
            let detected: Vec<bool> = ids.iter().map(|&i| det_id[i]).chain(oods.iter().map(|&i| det_ood[i])).collect();
            let batch = Batch {
                id: &id,
                labels: &labels,
                ood: &ood,
                canonical_id: &cid,
                canonical_ood: &cood,
                detected_id: &detected,
                neighbor_sums: &a,
            };
            let grad = objective_gradient(&c, &g, head, spec, &batch, &settings)
                .map_err(|e| Error::Training { epoch, reason: format!("{e}") })?;
            if !grad.terms.is_finite() || !grad.c.is_finite() || grad.g.iter().any(|m| !m.is_finite()) {
                return Err(Error::Training { epoch, reason: format!("non-finite loss or gradient (loss {})", grad.terms.total) });
            }
            {
                let [w1, b1, w2, b2] = g.params_mut();
                let mut params: [&mut Matrix; 5] = [&mut c, w1, b1, w2, b2];
                let grads = [grad.c, grad.g[0].clone(), grad.g[1].clone(), grad.g[2].clone(), grad.g[3].clone()];
                adam.step(&mut params, &grads);
            }
            c = normalize_columns(&c).map_err(|e| Error::Training { epoch, reason: format!("{e}") })?.matrix().clone();
            sums.cross_entropy += grad.terms.cross_entropy;
            sums.r_expl += grad.terms.r_expl;
            sums.j_mse += grad.terms.j_mse;
            sums.j_norm += grad.terms.j_norm;
            sums.j_sep += grad.terms.j_sep;
        }
        let k = batches as f64;
        let model = ConceptModel::new(ConceptMatrix::new(c.clone())?, g.clone(), head.clone())?;
        let eta = validation_completeness(spec, &model, &bundle.id_val.features, &bundle.ood_val)?;
        log::debug!("epoch {epoch}: ce {:.4} eta_det_val {:?}", sums.cross_entropy / k, eta);
        history.push(HistoryRow {
            epoch,
            cross_entropy: sums.cross_entropy / k,
            r_expl: sums.r_expl / k,
            j_mse: sums.j_mse / k,
            j_norm: sums.j_norm / k,
            j_sep: sums.j_sep / k,
            eta_det_val: eta,
        });
    }

    let model = ConceptModel::new(ConceptMatrix::new(c)?, g, head.clone())?;
    let (model, merged) = match cfg.dedup {
        Some(t) => deduplicate_model(&model, t)?,
        None => (model, Vec::new()),
    };
    Ok(TrainOutcome { state: TrainState { model, history, epoch: cfg.epochs }, detector, merged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{generate_synthetic, SyntheticSpec};

    #[test]
    fn table_presets() {
        assert_eq!(Preset::All.lambdas(DetectorKind::Energy), (1.0, 0.1, 50.0));
        assert_eq!(Preset::MseNorm.lambdas(DetectorKind::Odin), (1e8, 0.1, 0.0));
        assert_eq!(Preset::MseNorm.lambdas(DetectorKind::Msp), (10.0, 0.1, 0.0));
        assert_eq!(Preset::MseNorm.lambdas(DetectorKind::Mahalanobis), (0.1, 0.1, 0.0));
        assert_eq!(Preset::SepOnly.lambdas(DetectorKind::Msp), (0.0, 0.0, 50.0));
        for k in DetectorKind::ALL {
            assert_eq!(Preset::Baseline.lambdas(k), (0.0, 0.0, 0.0));
        }
        assert_eq!(Preset::parse_named("energy-all").unwrap(), (Some(DetectorKind::Energy), Preset::All));
        assert_eq!(Preset::parse_named("baseline").unwrap(), (None, Preset::Baseline));
        assert_eq!(Preset::parse_named("msp-mse-norm").unwrap(), (Some(DetectorKind::Msp), Preset::MseNorm));
        assert!(Preset::parse_named("energy-most").is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LearnConfig::default().validate().is_ok());
        let bad = LearnConfig { lambda_sep: -1.0, ..LearnConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        assert!(LearnConfig { neighbors: 0, ..LearnConfig::default() }.validate().is_err());
        assert!(LearnConfig { alpha: 0.0, ..LearnConfig::default() }.validate().is_err());
    }

    #[test]
    fn reg_expl_self_neighbor() {
        let c = Matrix::column_vector(&[0.6, 0.8]);
        let a = neighbor_sums(&c, &Matrix::row_vector(&[0.6, 0.8]), 1).unwrap();
        let mut tape = GradientTape::new();
        let cv = tape.constant(c);
        let r = record_reg_expl(&mut tape, cv, &a, 1).unwrap();
        assert!((tape.scalar(r) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reg_expl_orthogonal_concepts_have_no_redundancy() {
        let c = Matrix::identity(2);
        let a = Matrix::zeros(2, 2);
        let mut tape = GradientTape::new();
        let cv = tape.constant(c);
        let r = record_reg_expl(&mut tape, cv, &a, 3).unwrap();
        assert_eq!(tape.scalar(r), 0.0);
    }

    #[test]
    fn neighbor_sums_pick_largest_inner_products() {
        let c = Matrix::column_vector(&[1.0, 0.0]);
        let patches = Matrix::from_vec(3, 2, vec![0.5, 1.0, 2.0, 0.0, -3.0, 1.0]).unwrap();
        let a = neighbor_sums(&c, &patches, 2).unwrap();
        assert_eq!(a.data(), &[2.5, 1.0]);
        assert!(neighbor_sums(&c, &patches, 4).is_err());
    }

    #[test]
    fn reg_norm_of_zero_map() {
        let mut tape = GradientTape::new();
        let recon = tape.constant(Matrix::zeros(2, 2));
        let target = Matrix::from_vec(2, 2, vec![1.0, 1.0, 2.0, 1.0]).unwrap();
        let j = record_reg_norm(&mut tape, recon, &target, 1).unwrap();
        assert_eq!(tape.scalar(j), 7.0);
    }

    #[test]
    fn reg_mse_constant_offset_and_empty_ood() {
        let mut tape = GradientTape::new();
        let s = tape.constant(Matrix::column_vector(&[1.5, 2.5, 0.5]));
        let j = record_reg_mse(&mut tape, s, &[1.0, 2.0], &[0.0]).unwrap();
        assert!((tape.scalar(j) - 0.5).abs() < 1e-15);
        let s = tape.constant(Matrix::column_vector(&[1.5, 2.5]));
        assert!(matches!(record_reg_mse(&mut tape, s, &[1.0, 2.0], &[]), Err(Error::Argument(_))));
    }

    #[test]
    fn fisher_term_one_dimensional() {
        let mut tape = GradientTape::new();
        let v = tape.constant(Matrix::column_vector(&[0.0, 2.0, 4.0, 6.0]));
        let j = record_fisher(&mut tape, v, &[0, 1], &[2, 3], Ridge::Absolute(0.0)).unwrap().unwrap();
        assert_eq!(tape.scalar(j), 4.0);
        let empty = record_fisher(&mut tape, v, &[], &[2, 3], Ridge::DEFAULT).unwrap();
        assert!(empty.is_none());
    }

    #[test]
    fn dedup_folds_first_layer_rows() {
        let c = ConceptMatrix::new(Matrix::from_vec(2, 3, vec![1.0, -1.0, 0.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let w1 = Matrix::from_vec(3, 2, vec![1.0, 2.0, 10.0, 20.0, 5.0, 6.0]).unwrap();
        let g = ReconstructionNet::new(w1, Matrix::zeros(1, 2), Matrix::identity(2), Matrix::zeros(1, 2)).unwrap();
        let model = ConceptModel::new(c, g, ClassifierHead::random(2, 2, 0)).unwrap();
        let (out, merged) = deduplicate_model(&model, DEDUP_THRESHOLD).unwrap();
        assert_eq!(merged, vec![(1, 0, -1.0)]);
        assert_eq!(out.g.w1.data(), &[-9.0, -18.0, 5.0, 6.0]);
        // Scores of the dropped column were exactly the negation of its partner's.
        let z = FeatureTensor::new(1, 1, 2, vec![0.3, 0.7]).unwrap();
        let a = model.reconstruct(&z).unwrap();
        let b = out.reconstruct(&z).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    fn tiny_bundle() -> DatasetBundle {
        generate_synthetic(&SyntheticSpec { classes: 3, channels: 6, patches: 2, per_class: 20, seed: 4, ..SyntheticSpec::default() })
            .unwrap()
    }

    #[test]
    fn zero_epochs_return_initialization() {
        let bundle = tiny_bundle();
        let head = ClassifierHead::random(3, 6, 1);
        let cfg = LearnConfig { concepts: 4, hidden: 8, epochs: 0, dedup: None, ..LearnConfig::default() };
        let out = train_concepts(&cfg, &bundle, &head, &DetectorSpec::new(DetectorKind::Energy)).unwrap();
        assert_eq!(out.state.model.concepts, ConceptMatrix::random(6, 4, 0).unwrap());
        assert!(out.state.history.is_empty());
    }

    #[test]
    fn baseline_history_has_zero_regularizers_and_unit_columns() {
        let bundle = tiny_bundle();
        let head = ClassifierHead::random(3, 6, 1);
        let cfg = LearnConfig { concepts: 4, hidden: 8, epochs: 3, batch_size: 16, dedup: None, ..LearnConfig::default() }
            .with_preset(Preset::Baseline, DetectorKind::Energy);
        let out = train_concepts(&cfg, &bundle, &head, &DetectorSpec::new(DetectorKind::Energy)).unwrap();
        assert_eq!(out.state.history.len(), 3);
        for row in &out.state.history {
            assert_eq!((row.j_mse, row.j_norm, row.j_sep), (0.0, 0.0, 0.0));
            assert!(row.cross_entropy.is_finite() && row.r_expl.is_finite());
        }
        let c = out.state.model.concepts.matrix();
        for j in 0..c.cols() {
            assert!((crate::linalg::norm(&c.column(j)) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let bundle = tiny_bundle();
        let head = ClassifierHead::random(3, 6, 1);
        let cfg = LearnConfig { concepts: 4, hidden: 8, epochs: 2, batch_size: 16, ..LearnConfig::default() }
            .with_preset(Preset::All, DetectorKind::Msp);
        let spec = DetectorSpec::new(DetectorKind::Msp);
        let a = train_concepts(&cfg, &bundle, &head, &spec).unwrap();
        let b = train_concepts(&cfg, &bundle, &head, &spec).unwrap();
        assert_eq!(a.state.model, b.state.model);
        assert_eq!(a.state.history, b.state.history);
    }
}
