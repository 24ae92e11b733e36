//! Concept-matrix algebra: projection, patch reduction, normalization and
//! deduplication.

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, numeric_err, shape_err, Result};
use crate::linalg::{dot, norm, Matrix};
use crate::tensor::FeatureTensor;

/// `d x m` matrix whose columns are unit-norm concept vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptMatrix {
    columns: Matrix,
}

impl ConceptMatrix {
    /// Normalizes every column of `c`. Fails on a zero column.
    pub fn new(c: Matrix) -> Result<Self> {
        normalize_columns(&c)
    }

    /// Uniform draw of `m` directions on the unit sphere of `R^d`.
    pub fn random(channels: usize, concepts: usize, seed: u64) -> Result<Self> {
        if channels == 0 || concepts == 0 {
            return Err(arg_err!("need at least one channel and one concept"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..channels * concepts).map(|_| StandardNormal.sample(&mut rng)).collect();
        Self::new(Matrix::from_vec(channels, concepts, data)?)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.columns
    }

    pub fn channels(&self) -> usize {
        self.columns.rows()
    }

    pub fn len(&self) -> usize {
        self.columns.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.cols() == 0
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.columns.column(i)
    }

    pub fn select(&self, idx: &[usize]) -> ConceptMatrix {
        ConceptMatrix { columns: self.columns.select_cols(idx) }
    }
}

/// Per-patch concept scores `φ(x) C`, returned as an `N x P x m` tensor.
pub fn concept_scores(c: &ConceptMatrix, z: &FeatureTensor) -> Result<FeatureTensor> {
    if z.channels() != c.channels() {
        return Err(shape_err!("features have {} channels but concepts expect {}", z.channels(), c.channels()));
    }
    let rows = z.patch_rows().matmul(c.matrix())?;
    FeatureTensor::from_patch_rows(z.patches(), rows)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Reduction {
    Exact,
    Smooth { alpha: f64 },
}

/// Default smooth-max temperature.
pub const DEFAULT_ALPHA: f64 = 0.001;

/// One row per sample of per-concept patch maxima of `|score|`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReducedScores {
    pub values: Matrix,
    /// `true` for exact-max scores used in evaluation, `false` for the
    /// smooth approximation used while training.
    pub detached: bool,
}

impl ReducedScores {
    pub fn samples(&self) -> usize {
        self.values.rows()
    }

    pub fn concepts(&self) -> usize {
        self.values.cols()
    }

    pub fn select(&self, idx: &[usize]) -> ReducedScores {
        ReducedScores { values: self.values.select_rows(idx), detached: self.detached }
    }
}

/// `alpha · log Σ exp(v / alpha)` with the max-shift trick.
pub fn smooth_max(values: impl Iterator<Item = f64> + Clone, alpha: f64) -> f64 {
    let m = values.clone().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.map(|v| libm::exp((v - m) / alpha)).sum();
    m + alpha * libm::log(s)
}

pub fn reduce_max(scores: &FeatureTensor, mode: Reduction) -> Result<ReducedScores> {
    if let Reduction::Smooth { alpha } = mode {
        if !(alpha > 0.0) {
            return Err(arg_err!("smooth-max temperature must be positive, got {alpha}"));
        }
    }
    let (n, p, m) = scores.shape();
    let mut values = Matrix::zeros(n, m);
    for s in 0..n {
        for j in 0..m {
            let abs = (0..p).map(|q| libm::fabs(scores.patch(s, q)[j]));
            values[(s, j)] = match mode {
                Reduction::Exact => abs.fold(0.0, f64::max),
                Reduction::Smooth { alpha } => smooth_max(abs, alpha),
            };
        }
    }
    Ok(ReducedScores { values, detached: matches!(mode, Reduction::Exact) })
}

pub fn normalize_columns(c: &Matrix) -> Result<ConceptMatrix> {
    if c.cols() == 0 {
        return Err(arg_err!("concept matrix has no columns"));
    }
    let mut out = c.clone();
    for j in 0..c.cols() {
        let n = norm(&c.column(j));
        if !(n > 0.0) || !n.is_finite() {
            return Err(numeric_err!("concept column {j} has norm {n}"));
        }
        for i in 0..c.rows() {
            out[(i, j)] /= n;
        }
    }
    Ok(ConceptMatrix { columns: out })
}

/// Outcome of [`deduplicate`].
#[derive(Clone, Debug, PartialEq)]
pub struct Deduplicated {
    pub concepts: ConceptMatrix,
    pub kept: Vec<usize>,
    /// For every dropped column: `(dropped, kept_partner, sign of their dot product)`.
    pub merged: Vec<(usize, usize, f64)>,
}

pub const DEDUP_THRESHOLD: f64 = 0.95;

/// Greedy scan in column order: column `j` is dropped when `|⟨c_j, c_k⟩|`
/// exceeds `threshold` for some already retained `k`.
pub fn deduplicate(c: &ConceptMatrix, threshold: f64) -> Deduplicated {
    let cols: Vec<Vec<f64>> = (0..c.len()).map(|j| c.column(j)).collect();
    let mut kept: Vec<usize> = Vec::new();
    let mut merged = Vec::new();
    for (j, cj) in cols.iter().enumerate() {
        let partner = kept.iter().map(|&k| (k, dot(cj, &cols[k]))).find(|(_, d)| libm::fabs(*d) > threshold);
        match partner {
            Some((k, d)) => merged.push((j, k, if d < 0.0 { -1.0 } else { 1.0 })),
            None => kept.push(j),
        }
    }
    Deduplicated { concepts: c.select(&kept), kept, merged }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn tensor(n: usize, p: usize, d: usize, data: Vec<f64>) -> FeatureTensor {
        FeatureTensor::new(n, p, d, data).unwrap()
    }

    #[test]
    fn scores_are_inner_products() {
        let c = ConceptMatrix::new(Matrix::identity(2)).unwrap();
        let z = tensor(1, 1, 2, vec![1.0, 0.0]);
        let s = concept_scores(&c, &z).unwrap();
        assert_eq!(s.data(), &[1.0, 0.0]);
    }

    #[test]
    fn orthonormal_projection_preserves_norm() {
        let r = core::f64::consts::FRAC_1_SQRT_2;
        let c = ConceptMatrix::new(Matrix::from_vec(2, 2, vec![r, -r, r, r]).unwrap()).unwrap();
        let z = tensor(1, 2, 2, vec![3.0, 4.0, -1.0, 2.0]);
        let s = concept_scores(&c, &z).unwrap();
        for p in 0..2 {
            assert!((norm(s.patch(0, p)) - norm(z.patch(0, p))).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_reject_channel_mismatch() {
        let c = ConceptMatrix::random(3, 2, 0).unwrap();
        let z = tensor(1, 1, 2, vec![1.0, 0.0]);
        assert!(matches!(concept_scores(&c, &z), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn single_patch_reduction_is_absolute_value() {
        let s = tensor(1, 1, 2, vec![-0.4, 0.7]);
        for mode in [Reduction::Exact, Reduction::Smooth { alpha: DEFAULT_ALPHA }] {
            let r = reduce_max(&s, mode).unwrap();
            assert!((r.values[(0, 0)] - 0.4).abs() < 1e-15);
            assert!((r.values[(0, 1)] - 0.7).abs() < 1e-15);
        }
    }

    #[test]
    fn smooth_max_of_two_values() {
        let s = tensor(1, 2, 1, vec![0.2, 0.9]);
        let r = reduce_max(&s, Reduction::Smooth { alpha: 0.001 }).unwrap();
        assert!((r.values[(0, 0)] - 0.9).abs() < 1e-3);
        assert!(!r.detached);
    }

    #[test]
    fn exact_reduction_uses_absolute_values() {
        let s = tensor(1, 2, 1, vec![-0.5, 0.3]);
        let r = reduce_max(&s, Reduction::Exact).unwrap();
        assert_eq!(r.values[(0, 0)], 0.5);
        assert!(r.detached);
    }

    #[test]
    fn smooth_reduction_rejects_nonpositive_alpha() {
        let s = tensor(1, 1, 1, vec![1.0]);
        assert!(reduce_max(&s, Reduction::Smooth { alpha: 0.0 }).is_err());
    }

    #[test]
    fn normalize_three_four() {
        let c = normalize_columns(&Matrix::column_vector(&[3.0, 4.0])).unwrap();
        assert!((c.matrix()[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((c.matrix()[(1, 0)] - 0.8).abs() < 1e-15);
        let again = normalize_columns(c.matrix()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn normalize_rejects_zero_column() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(normalize_columns(&m), Err(crate::Error::Numeric(_))));
    }

    #[test]
    fn dedup_drops_only_near_duplicates() {
        // Column 0 = e1; column 1 at cosine 0.96 to it; column 2 at cosine 0.90.
        let s96 = libm::sqrt(1.0 - 0.96 * 0.96);
        let s90 = libm::sqrt(1.0 - 0.90 * 0.90);
        let m = Matrix::from_vec(3, 3, vec![1.0, 0.96, 0.90, 0.0, s96, 0.0, 0.0, 0.0, s90]).unwrap();
        let c = ConceptMatrix::new(m).unwrap();
        let d = deduplicate(&c, DEDUP_THRESHOLD);
        assert_eq!(d.kept, vec![0, 2]);
        assert_eq!(d.merged, vec![(1, 0, 1.0)]);
    }

    #[test]
    fn dedup_duplicates_and_orthogonal() {
        let m = Matrix::from_vec(2, 3, vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let d = deduplicate(&ConceptMatrix::new(m).unwrap(), DEDUP_THRESHOLD);
        assert_eq!(d.concepts.len(), 2);
        let again = deduplicate(&d.concepts, DEDUP_THRESHOLD);
        assert_eq!(again.concepts, d.concepts);
        let ortho = deduplicate(&ConceptMatrix::new(Matrix::identity(4)).unwrap(), DEDUP_THRESHOLD);
        assert_eq!(ortho.kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn dedup_catches_antiparallel_columns() {
        let m = Matrix::from_vec(2, 2, vec![1.0, -1.0, 0.0, 0.0]).unwrap();
        let d = deduplicate(&ConceptMatrix::new(m).unwrap(), DEDUP_THRESHOLD);
        assert_eq!(d.merged, vec![(1, 0, -1.0)]);
    }
}
