//! OOD score functions and threshold calibration.
//!
//! Every score follows the "larger means more ID-like" convention, and each
//! can be evaluated on canonical features `φ` or on a reconstruction `φ̂`:
//! the detector only ever sees a feature tensor and the frozen head.

use alloc::format;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::autodiff::{logsumexp, softmax_in_place, GradientTape, Var};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::model::ClassifierHead;
use crate::tensor::{FeatureTensor, LabeledSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum DetectorKind {
    Msp,
    Odin,
    Energy,
    Mahalanobis,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [Self::Msp, Self::Odin, Self::Energy, Self::Mahalanobis];

    pub fn default_temperature(self) -> f64 {
        match self {
            Self::Odin => 1000.0,
            _ => 1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Msp => "msp",
            Self::Odin => "odin",
            Self::Energy => "energy",
            Self::Mahalanobis => "mahal",
        }
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DetectorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "msp" => Ok(Self::Msp),
            "odin" => Ok(Self::Odin),
            "energy" => Ok(Self::Energy),
            "mahal" | "mahalanobis" => Ok(Self::Mahalanobis),
            other => Err(Error::Config(format!("unknown detector kind {other:?}"))),
        }
    }
}

/// Class means and shared precision matrix of pooled ID features.
#[derive(Clone, Debug, PartialEq)]
pub struct MahalanobisStats {
    /// `L x d`.
    pub means: Matrix,
    /// `Σ⁻¹`, `d x d`.
    pub precision: Matrix,
    pub ridge: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorSpec {
    pub kind: DetectorKind,
    pub temperature: f64,
    pub mahalanobis: Option<MahalanobisStats>,
}

impl DetectorSpec {
    pub fn new(kind: DetectorKind) -> Self {
        Self { kind, temperature: kind.default_temperature(), mahalanobis: None }
    }

    pub fn with_temperature(mut self, t: f64) -> Result<Self> {
        if !(t > 0.0) || !t.is_finite() {
            return Err(arg_err!("temperature must be positive, got {t}"));
        }
        self.temperature = t;
        Ok(self)
    }

    /// Spec for `kind`, fitting Mahalanobis statistics on `id_train` when needed.
    pub fn fitted(kind: DetectorKind, temperature: Option<f64>, ridge: Option<f64>, id_train: &LabeledSplit) -> Result<Self> {
        let mut spec = Self::new(kind);
        if let Some(t) = temperature {
            spec = spec.with_temperature(t)?;
        }
        if kind == DetectorKind::Mahalanobis {
            spec.mahalanobis = Some(fit_mahalanobis(id_train, ridge)?);
        }
        Ok(spec)
    }

    fn stats(&self) -> Result<&MahalanobisStats> {
        self.mahalanobis.as_ref().ok_or_else(|| Error::State("Mahalanobis detector used before fitting".into()))
    }

    /// Scores from pooled features and logits of the same samples.
    pub fn score_from(&self, pooled: &Matrix, logits: &Matrix) -> Result<Vec<f64>> {
        let t = self.temperature;
        let rows = 0..logits.rows();
        Ok(match self.kind {
            DetectorKind::Msp => rows.map(|r| max_softmax(logits.row(r), 1.0)).collect(),
            DetectorKind::Odin => rows.map(|r| max_softmax(logits.row(r), t)).collect(),
            DetectorKind::Energy => {
                rows.map(|r| t * logsumexp(&logits.row(r).iter().map(|v| v / t).collect::<Vec<_>>())).collect()
            }
            DetectorKind::Mahalanobis => {
                let stats = self.stats()?;
                if pooled.cols() != stats.means.cols() {
                    return Err(shape_err!("pooled features have {} channels, stats {}", pooled.cols(), stats.means.cols()));
                }
                (0..pooled.rows()).map(|r| -min_mahalanobis(pooled.row(r), stats)).collect()
            }
        })
    }

    pub fn score(&self, head: &ClassifierHead, z: &FeatureTensor) -> Result<Vec<f64>> {
        let out = head.forward(z)?;
        self.score_from(&out.pooled, &out.logits)
    }

    /// Differentiable score column (`N x 1`) from taped pooled features and logits.
    pub fn record(&self, tape: &mut GradientTape, pooled: Var, logits: Var) -> Result<Var> {
        let t = self.temperature;
        Ok(match self.kind {
            DetectorKind::Msp => {
                let p = tape.row_softmax(logits);
                tape.row_max(p)
            }
            DetectorKind::Odin => {
                let scaled = tape.scale(logits, 1.0 / t);
                let p = tape.row_softmax(scaled);
                tape.row_max(p)
            }
            DetectorKind::Energy => {
                let scaled = tape.scale(logits, 1.0 / t);
                let lse = tape.row_logsumexp(scaled);
                tape.scale(lse, t)
            }
            DetectorKind::Mahalanobis => {
                let stats = self.stats()?;
                let precision = tape.constant(stats.precision.clone());
                let mut dists = Vec::with_capacity(stats.means.rows());
                for c in 0..stats.means.rows() {
                    let neg_mu = tape.constant(Matrix::row_vector(stats.means.row(c)).scale(-1.0));
                    let diff = tape.add_row(pooled, neg_mu)?;
                    let q = tape.matmul(diff, precision)?;
                    let prod = tape.mul(q, diff)?;
                    dists.push(tape.row_sum(prod));
                }
                let all = tape.hconcat(&dists)?;
                let neg = tape.scale(all, -1.0);
                tape.row_max(neg)
            }
        })
    }
}

fn max_softmax(logits: &[f64], temperature: f64) -> f64 {
    let mut p: Vec<f64> = logits.iter().map(|v| v / temperature).collect();
    softmax_in_place(&mut p);
    p.into_iter().fold(f64::NEG_INFINITY, f64::max)
}

fn min_mahalanobis(x: &[f64], stats: &MahalanobisStats) -> f64 {
    let d = x.len();
    let mut best = f64::INFINITY;
    let mut diff = alloc::vec![0.0; d];
    for c in 0..stats.means.rows() {
        diff.iter_mut().zip(x.iter().zip(stats.means.row(c))).for_each(|(o, (a, b))| *o = a - b);
        let mut q = 0.0;
        for i in 0..d {
            q += diff[i] * crate::linalg::dot(stats.precision.row(i), &diff);
        }
        best = best.min(q);
    }
    best
}

/// Default ridge: `1e-3 · tr(Σ) / d`.
pub const MAHALANOBIS_RIDGE_FACTOR: f64 = 1e-3;

/// Class means and shared within-class covariance of max-pooled features.
/// `ridge = None` selects the scale-aware default.
pub fn fit_mahalanobis(train: &LabeledSplit, ridge: Option<f64>) -> Result<MahalanobisStats> {
    let pooled = train.features.max_pool();
    let labels = train.labels.labels();
    let (n, d) = pooled.shape();
    let l = train.labels.num_classes();
    let mut counts = alloc::vec![0usize; l];
    let mut means = Matrix::zeros(l, d);
    for (r, &y) in labels.iter().enumerate() {
        counts[y] += 1;
        means.row_mut(y).iter_mut().zip(pooled.row(r)).for_each(|(m, v)| *m += v);
    }
    if let Some(c) = counts.iter().position(|&k| k < 2) {
        return Err(arg_err!("class {c} has {} samples; Mahalanobis needs at least 2", counts[c]));
    }
    for c in 0..l {
        let k = counts[c] as f64;
        means.row_mut(c).iter_mut().for_each(|m| *m /= k);
    }
    let mut cov = Matrix::zeros(d, d);
    let mut diff = alloc::vec![0.0; d];
    for (r, &y) in labels.iter().enumerate() {
        diff.iter_mut().zip(pooled.row(r).iter().zip(means.row(y))).for_each(|(o, (a, b))| *o = a - b);
        for i in 0..d {
            for j in 0..d {
                cov[(i, j)] += diff[i] * diff[j];
            }
        }
    }
    let inv_n = 1.0 / n as f64;
    cov.data_mut().iter_mut().for_each(|v| *v *= inv_n);
    let ridge = ridge.unwrap_or(MAHALANOBIS_RIDGE_FACTOR * cov.trace() / d as f64);
    if !(ridge >= 0.0) {
        return Err(arg_err!("ridge must be nonnegative, got {ridge}"));
    }
    for i in 0..d {
        cov[(i, i)] += ridge;
    }
    let mut precision = cov.cholesky()?.inverse();
    // Symmetrize away rounding so the SPD invariant holds exactly.
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (precision[(i, j)] + precision[(j, i)]);
            precision[(i, j)] = v;
            precision[(j, i)] = v;
        }
    }
    Ok(MahalanobisStats { means, precision, ridge })
}

/// True-positive-rate target of the calibrated threshold.
pub const TARGET_TPR: f64 = 0.95;

#[derive(Clone, Debug, PartialEq)]
pub struct CalibratedDetector {
    pub spec: DetectorSpec,
    pub gamma: f64,
}

/// Largest threshold keeping at least 95% of `scores` at or above it:
/// the `(⌊0.05·N⌋ + 1)`-th smallest score.
pub fn threshold_for_tpr(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(arg_err!("cannot calibrate on an empty validation set"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite validation score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(sorted[scores.len() * 5 / 100])
}

impl CalibratedDetector {
    pub fn calibrate(spec: DetectorSpec, head: &ClassifierHead, id_val: &FeatureTensor) -> Result<Self> {
        let scores = spec.score(head, id_val)?;
        let gamma = threshold_for_tpr(&scores)?;
        Ok(Self { spec, gamma })
    }

    /// `true` (ID) when `score ≥ γ`.
    #[inline]
    pub fn decide(&self, score: f64) -> bool {
        score >= self.gamma
    }

    pub fn decisions(&self, scores: &[f64]) -> Vec<bool> {
        scores.iter().map(|&s| self.decide(s)).collect()
    }

    pub fn detect(&self, head: &ClassifierHead, z: &FeatureTensor) -> Result<Vec<bool>> {
        Ok(self.decisions(&self.spec.score(head, z)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;

    fn logits(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn msp_of_uniform_logits_is_half() {
        let s = DetectorSpec::new(DetectorKind::Msp).score_from(&Matrix::zeros(1, 1), &logits(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(s, vec![0.5]);
    }

    #[test]
    fn energy_of_zero_logits_is_log_two() {
        let s = DetectorSpec::new(DetectorKind::Energy).score_from(&Matrix::zeros(1, 1), &logits(&[&[0.0, 0.0]])).unwrap();
        assert!((s[0] - core::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn mahalanobis_hand_example() {
        let spec = DetectorSpec {
            kind: DetectorKind::Mahalanobis,
            temperature: 1.0,
            mahalanobis: Some(MahalanobisStats { means: Matrix::zeros(1, 2), precision: Matrix::identity(2), ridge: 0.0 }),
        };
        let s = spec.score_from(&Matrix::row_vector(&[3.0, 4.0]), &Matrix::zeros(1, 1)).unwrap();
        assert_eq!(s, vec![-25.0]);
    }

    #[test]
    fn mahalanobis_without_stats_is_state_error() {
        let spec = DetectorSpec::new(DetectorKind::Mahalanobis);
        assert!(matches!(spec.score_from(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2)), Err(Error::State(_))));
    }

    fn two_class_split(points: &[(f64, f64, usize)]) -> LabeledSplit {
        let data: Vec<f64> = points.iter().flat_map(|&(x, y, _)| [x, y]).collect();
        let labels = points.iter().map(|p| p.2).collect();
        LabeledSplit::new(
            FeatureTensor::new(points.len(), 1, 2, data).unwrap(),
            crate::tensor::LabelVector::new(labels, 2).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn fit_mahalanobis_hand_example() {
        let split = two_class_split(&[(0.0, 0.0, 0), (2.0, 0.0, 0), (4.0, 0.0, 1), (6.0, 0.0, 1)]);
        let ridge = 0.5;
        let stats = fit_mahalanobis(&split, Some(ridge)).unwrap();
        assert_eq!(stats.means.data(), &[1.0, 0.0, 5.0, 0.0]);
        // Σ = diag(1, 0) + 0.5 I  ->  Σ⁻¹ = diag(1/1.5, 1/0.5)
        assert!((stats.precision[(0, 0)] - 1.0 / 1.5).abs() < 1e-12);
        assert!((stats.precision[(1, 1)] - 2.0).abs() < 1e-12);
        assert!(stats.precision[(0, 1)].abs() < 1e-12);
    }

    #[test]
    fn fit_mahalanobis_without_ridge_on_degenerate_data_fails() {
        let split = two_class_split(&[(0.0, 0.0, 0), (2.0, 0.0, 0), (4.0, 0.0, 1), (6.0, 0.0, 1)]);
        assert!(matches!(fit_mahalanobis(&split, Some(0.0)), Err(Error::Numeric(_))));
    }

    #[test]
    fn fit_mahalanobis_is_duplication_invariant() {
        let pts = [(0.0, 1.0, 0), (2.0, 0.5, 0), (4.0, -1.0, 1), (6.0, 0.0, 1), (5.0, 2.0, 1)];
        let doubled: Vec<_> = pts.iter().chain(pts.iter()).copied().collect();
        let a = fit_mahalanobis(&two_class_split(&pts), Some(0.1)).unwrap();
        let b = fit_mahalanobis(&two_class_split(&doubled), Some(0.1)).unwrap();
        for (x, y) in a.precision.data().iter().zip(b.precision.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!(a.means, b.means);
    }

    #[test]
    fn fit_mahalanobis_needs_two_per_class() {
        let split = two_class_split(&[(0.0, 0.0, 0), (2.0, 0.0, 0), (4.0, 0.0, 1)]);
        assert!(matches!(fit_mahalanobis(&split, None), Err(Error::Argument(_))));
    }

    #[test]
    fn threshold_order_statistic() {
        let scores: Vec<f64> = (1..=100).map(f64::from).collect();
        let gamma = threshold_for_tpr(&scores).unwrap();
        assert_eq!(gamma, 6.0);
        assert_eq!(scores.iter().filter(|&&s| s >= gamma).count(), 95);
        assert_eq!(threshold_for_tpr(&[2.5; 17]).unwrap(), 2.5);
        assert_eq!(threshold_for_tpr(&[-1.25]).unwrap(), -1.25);
        assert!(threshold_for_tpr(&[]).is_err());
    }

    #[test]
    fn decision_boundary_is_inclusive() {
        let cd = CalibratedDetector { spec: DetectorSpec::new(DetectorKind::Msp), gamma: 0.7 };
        assert!(cd.decide(0.7));
        assert!(!cd.decide(0.7 - 1e-12));
    }

    #[test]
    fn detector_kind_parses() {
        for k in DetectorKind::ALL {
            assert_eq!(k.name().parse::<DetectorKind>().unwrap(), k);
        }
        assert!("knn".parse::<DetectorKind>().is_err());
    }
}
