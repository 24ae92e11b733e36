//! Feature tensors, label vectors, dataset bundles and the synthetic ID/OOD
//! generator.
//!
//! A [`FeatureTensor`] holds `N` samples of `P` patches with `d` channels and
//! is stored as an `(N·P) x d` row-major matrix, so row `n·P + p` is patch `p`
//! of sample `n`. That is also the on-disk order of the `.cft` format.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::{dot, norm, Matrix};

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTensor {
    samples: usize,
    patches: usize,
    patch_rows: Matrix,
}

impl FeatureTensor {
    pub fn new(samples: usize, patches: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if samples == 0 || patches == 0 || channels == 0 {
            return Err(shape_err!("tensor dims must be positive, got {samples}x{patches}x{channels}"));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(alloc::format!("non-finite feature value at flat index {pos}")));
        }
        let patch_rows = Matrix::from_vec(samples * patches, channels, data)?;
        Ok(Self { samples, patches, patch_rows })
    }

    /// Wraps an `(N·P) x d` matrix of patch rows.
    pub fn from_patch_rows(patches: usize, patch_rows: Matrix) -> Result<Self> {
        if patches == 0 || patch_rows.rows() == 0 || patch_rows.rows() % patches != 0 {
            return Err(shape_err!("{} patch rows do not group into {} patches", patch_rows.rows(), patches));
        }
        let samples = patch_rows.rows() / patches;
        Self::new(samples, patches, patch_rows.cols(), patch_rows.into_data())
    }

    #[inline]
    pub fn samples(&self) -> usize {
        self.samples
    }

    #[inline]
    pub fn patches(&self) -> usize {
        self.patches
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.patch_rows.cols()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.samples, self.patches, self.channels())
    }

    pub fn patch_rows(&self) -> &Matrix {
        &self.patch_rows
    }

    pub fn data(&self) -> &[f64] {
        self.patch_rows.data()
    }

    pub fn patch(&self, sample: usize, patch: usize) -> &[f64] {
        self.patch_rows.row(sample * self.patches + patch)
    }

    /// Sub-tensor holding the listed samples in the given order.
    pub fn select(&self, samples: &[usize]) -> FeatureTensor {
        let rows: Vec<usize> =
            samples.iter().flat_map(|&n| n * self.patches..(n + 1) * self.patches).collect();
        FeatureTensor {
            samples: samples.len(),
            patches: self.patches,
            patch_rows: self.patch_rows.select_rows(&rows),
        }
    }

    /// Concatenates tensors sample-wise. All inputs must share `P` and `d`.
    pub fn concat(parts: &[&FeatureTensor]) -> Result<FeatureTensor> {
        let first = parts.first().ok_or_else(|| arg_err!("nothing to concatenate"))?;
        let (p, d) = (first.patches, first.channels());
        let mut data = Vec::new();
        let mut n = 0;
        for t in parts {
            if t.patches != p || t.channels() != d {
                return Err(shape_err!("cannot concatenate P={},d={} with P={},d={}", p, d, t.patches, t.channels()));
            }
            data.extend_from_slice(t.data());
            n += t.samples;
        }
        FeatureTensor::new(n, p, d, data)
    }

    /// Global max-pool over the patch axis, `N x d`.
    pub fn max_pool(&self) -> Matrix {
        let d = self.channels();
        let mut out = Matrix::filled(self.samples, d, f64::NEG_INFINITY);
        for n in 0..self.samples {
            for p in 0..self.patches {
                let src = self.patch(n, p);
                for (o, &v) in out.row_mut(n).iter_mut().zip(src) {
                    if v > *o {
                        *o = v;
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVector {
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelVector {
    pub fn new(labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(arg_err!("need at least 2 classes, got {num_classes}"));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(alloc::format!("label {bad} out of range for {num_classes} classes")));
        }
        Ok(Self { labels, num_classes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> LabelVector {
        LabelVector { labels: idx.iter().map(|&i| self.labels[i]).collect(), num_classes: self.num_classes }
    }
}

/// Labeled ID split.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSplit {
    pub features: FeatureTensor,
    pub labels: LabelVector,
}

impl LabeledSplit {
    pub fn new(features: FeatureTensor, labels: LabelVector) -> Result<Self> {
        if features.samples() != labels.len() {
            return Err(shape_err!("{} samples but {} labels", features.samples(), labels.len()));
        }
        Ok(Self { features, labels })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub id_train: LabeledSplit,
    pub id_val: LabeledSplit,
    pub id_test: LabeledSplit,
    pub ood_train: FeatureTensor,
    pub ood_val: FeatureTensor,
    pub ood_test: FeatureTensor,
}

impl DatasetBundle {
    pub fn new(
        id_train: LabeledSplit,
        id_val: LabeledSplit,
        id_test: LabeledSplit,
        ood_train: FeatureTensor,
        ood_val: FeatureTensor,
        ood_test: FeatureTensor,
    ) -> Result<Self> {
        let bundle = Self { id_train, id_val, id_test, ood_train, ood_val, ood_test };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        let (p, d) = (self.patches(), self.channels());
        let l = self.num_classes();
        for t in self.tensors() {
            if t.patches() != p || t.channels() != d {
                return Err(shape_err!("split has P={},d={} but bundle has P={},d={}", t.patches(), t.channels(), p, d));
            }
        }
        for s in [&self.id_val, &self.id_test] {
            if s.labels.num_classes() != l {
                return Err(shape_err!("class count {} differs from {}", s.labels.num_classes(), l));
            }
        }
        Ok(())
    }

    fn tensors(&self) -> [&FeatureTensor; 6] {
        [
            &self.id_train.features,
            &self.id_val.features,
            &self.id_test.features,
            &self.ood_train,
            &self.ood_val,
            &self.ood_test,
        ]
    }

    pub fn patches(&self) -> usize {
        self.id_train.features.patches()
    }

    pub fn channels(&self) -> usize {
        self.id_train.features.channels()
    }

    pub fn num_classes(&self) -> usize {
        self.id_train.labels.num_classes()
    }
}

/// Parameters of the synthetic ID/OOD generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub channels: usize,
    pub patches: usize,
    pub per_class: usize,
    pub id_spread: f64,
    pub ood_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { classes: 5, channels: 16, patches: 4, per_class: 200, id_spread: 1.0, ood_shift: 4.0, seed: 0 }
    }
}

/// Class means sit at `CLASS_SEPARATION · id_spread` from the origin.
pub const CLASS_SEPARATION: f64 = 3.0;

/// Share of its paired class mean that an OOD cluster keeps.
pub const OOD_CLASS_WEIGHT: f64 = 0.5;

/// Train/val/test fractions (in fifths) used for every class and OOD cluster.
const SPLIT_FIFTHS: [usize; 3] = [3, 1, 1];

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(alloc::format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.channels == 0 || self.patches == 0 {
            return Err(Error::Config("channels and patches must be positive".into()));
        }
        if self.per_class < 5 {
            return Err(Error::Config(alloc::format!("per_class must be >= 5 to fill every split, got {}", self.per_class)));
        }
        if !(self.id_spread >= 0.0) || !(self.ood_shift > 0.0) || !self.id_spread.is_finite() || !self.ood_shift.is_finite() {
            return Err(Error::Config("id_spread must be >= 0 and ood_shift > 0".into()));
        }
        if self.channels < self.classes + 1 {
            return Err(Error::Config(alloc::format!(
                "need channels > classes to place OOD directions outside the class span ({} <= {})",
                self.channels,
                self.classes
            )));
        }
        Ok(())
    }

    fn split_sizes(&self) -> [usize; 3] {
        let train = self.per_class * SPLIT_FIFTHS[0] / 5;
        let val = self.per_class * SPLIT_FIFTHS[1] / 5;
        [train, val, self.per_class - train - val]
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Random unit vector orthogonal to every vector in `basis` (assumed orthonormal).
fn random_unit_outside(rng: &mut ChaCha8Rng, d: usize, basis: &[Vec<f64>]) -> Vec<f64> {
    loop {
        let mut v = random_unit(rng, d);
        for b in basis {
            let k = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
        }
        let n = norm(&v);
        if n > 1e-3 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for b in &basis {
            let k = dot(&w, b);
            w.iter_mut().zip(b).for_each(|(x, y)| *x -= k * y);
        }
        let n = norm(&w);
        if n > 1e-9 {
            basis.push(w.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn sample_cluster(rng: &mut ChaCha8Rng, mean: &[f64], spread: f64, samples: usize, patches: usize, out: &mut Vec<f64>) {
    for _ in 0..samples * patches {
        for &mu in mean {
            let noise: f64 = StandardNormal.sample(rng);
            out.push((mu + spread * noise).max(0.0));
        }
    }
}

/// Draws a deterministic ID/OOD bundle from `spec`.
///
/// Each ID class is an isotropic Gaussian around `CLASS_SEPARATION · id_spread · u_c`
/// for a random unit direction `u_c`. Each class has a paired OOD cluster
/// centred at the class mean offset by `ood_shift` along a random direction
/// orthogonal to every class direction. All features are clipped at zero.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<DatasetBundle> {
    spec.validate()?;
    let (l, d, p) = (spec.classes, spec.channels, spec.patches);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let class_dirs: Vec<Vec<f64>> = (0..l).map(|_| random_unit(&mut rng, d)).collect();
    let span = orthonormal_basis(&class_dirs);
    let scale = CLASS_SEPARATION * spec.id_spread;
    let class_means: Vec<Vec<f64>> = class_dirs.iter().map(|u| u.iter().map(|x| x * scale).collect()).collect();
    let ood_means: Vec<Vec<f64>> = class_means
        .iter()
        .map(|mu| {
            let w = random_unit_outside(&mut rng, d, &span);
            mu.iter().zip(&w).map(|(m, x)| OOD_CLASS_WEIGHT * m + spec.ood_shift * x).collect()
        })
        .collect();

    let sizes = spec.split_sizes();
    let mut id_splits = Vec::with_capacity(3);
    let mut ood_splits = Vec::with_capacity(3);
    for &n in &sizes {
        let mut data = Vec::with_capacity(l * n * p * d);
        let mut labels = Vec::with_capacity(l * n);
        for (c, mu) in class_means.iter().enumerate() {
            sample_cluster(&mut rng, mu, spec.id_spread, n, p, &mut data);
            labels.extend(core::iter::repeat(c).take(n));
        }
        let features = FeatureTensor::new(l * n, p, d, data)?;
        id_splits.push(LabeledSplit::new(features, LabelVector::new(labels, l)?)?);

        let mut ood = Vec::with_capacity(l * n * p * d);
        for mu in &ood_means {
            sample_cluster(&mut rng, mu, spec.id_spread, n, p, &mut ood);
        }
        ood_splits.push(FeatureTensor::new(l * n, p, d, ood)?);
    }
    // Interleave so a prefix of any split covers every class.
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_5eed);
    let mut permute = |n: usize| -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = shuffle_rng.random_range(0..=i);
            idx.swap(i, j);
        }
        idx
    };
    let mut id_iter = id_splits.into_iter().map(|s| {
        let perm = permute(s.labels.len());
        LabeledSplit { features: s.features.select(&perm), labels: s.labels.select(&perm) }
    });
    let id_train = id_iter.next().expect("three splits");
    let id_val = id_iter.next().expect("three splits");
    let id_test = id_iter.next().expect("three splits");
    let mut ood_iter = ood_splits.into_iter().map(|t| {
        let perm = permute(t.samples());
        t.select(&perm)
    });
    let ood_train = ood_iter.next().expect("three splits");
    let ood_val = ood_iter.next().expect("three splits");
    let ood_test = ood_iter.next().expect("three splits");
    DatasetBundle::new(id_train, id_val, id_test, ood_train, ood_val, ood_test)
}
