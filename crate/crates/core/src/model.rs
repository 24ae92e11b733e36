//! Frozen classifier head `h` (global max-pool + dense + softmax) and the
//! patch-wise reconstruction network `g`.

use alloc::format;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{softmax_in_place, GradientTape, Var};
use crate::concepts::ConceptMatrix;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::linalg::Matrix;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{FeatureTensor, LabeledSplit};

/// Default width of the hidden layer of `g`.
pub const DEFAULT_HIDDEN: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    /// `L x d`.
    pub weight: Matrix,
    /// `1 x L`.
    pub bias: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadOutput {
    pub pooled: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
}

impl HeadOutput {
    pub fn predictions(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }
}

pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| {
            let row = m.row(r);
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

impl ClassifierHead {
    pub fn new(weight: Matrix, bias: Matrix) -> Result<Self> {
        if bias.shape() != (1, weight.rows()) {
            return Err(shape_err!("head bias {:?} does not match {} classes", bias.shape(), weight.rows()));
        }
        if !weight.is_finite() || !bias.is_finite() {
            return Err(Error::Data("non-finite head parameters".into()));
        }
        Ok(Self { weight, bias })
    }

    pub fn random(classes: usize, channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / libm::sqrt(channels as f64);
        let data = (0..classes * channels)
            .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
            .collect();
        Self { weight: Matrix::from_vec(classes, channels, data).expect("sized"), bias: Matrix::zeros(1, classes) }
    }

    pub fn classes(&self) -> usize {
        self.weight.rows()
    }

    pub fn channels(&self) -> usize {
        self.weight.cols()
    }

    pub fn logits_from_pooled(&self, pooled: &Matrix) -> Result<Matrix> {
        if pooled.cols() != self.channels() {
            return Err(shape_err!("features have {} channels, head expects {}", pooled.cols(), self.channels()));
        }
        let mut logits = pooled.matmul_t(&self.weight);
        for r in 0..logits.rows() {
            logits.row_mut(r).iter_mut().zip(self.bias.data()).for_each(|(v, b)| *v += b);
        }
        Ok(logits)
    }

    pub fn forward(&self, z: &FeatureTensor) -> Result<HeadOutput> {
        let pooled = z.max_pool();
        let logits = self.logits_from_pooled(&pooled)?;
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Ok(HeadOutput { pooled, logits, probs })
    }

    /// Records `maxpool → dense` on the tape and returns `(pooled, logits)`.
    /// Head weights enter as constants.
    pub fn record(&self, tape: &mut GradientTape, patch_rows: Var, patches: usize) -> Result<(Var, Var)> {
        let pooled = tape.group_max(patch_rows, patches)?;
        let wt = tape.constant(self.weight.transpose());
        let b = tape.constant(self.bias.clone());
        let lin = tape.matmul(pooled, wt)?;
        let logits = tape.add_row(lin, b)?;
        Ok((pooled, logits))
    }

    pub fn accuracy(&self, split: &LabeledSplit) -> Result<f64> {
        let preds = self.forward(&split.features)?.predictions();
        Ok(accuracy(&preds, split.labels.labels()))
    }
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        Self { epochs: 300, learning_rate: 0.05, seed: 0 }
    }
}

/// Fits the head by full-batch Adam on cross-entropy of max-pooled features.
/// Returns the head and its validation accuracy.
pub fn train_head(train: &LabeledSplit, val: &LabeledSplit, cfg: &HeadTrainConfig) -> Result<(ClassifierHead, f64)> {
    let classes = train.labels.num_classes();
    let d = train.features.channels();
    let mut head = ClassifierHead::random(classes, d, cfg.seed);
    let pooled = train.features.max_pool();
    let labels = train.labels.labels();
    let mut adam = Adam::new(
        AdamConfig { learning_rate: cfg.learning_rate, ..AdamConfig::default() },
        &[head.weight.shape(), head.bias.shape()],
    );
    for epoch in 0..cfg.epochs {
        let mut tape = GradientTape::new();
        let x = tape.constant(pooled.clone());
        let w = tape.param(head.weight.clone());
        let b = tape.param(head.bias.clone());
        let wt = tape.transpose(w);
        let lin = tape.matmul(x, wt)?;
        let logits = tape.add_row(lin, b)?;
        let picked = tape.log_softmax_pick(logits, labels)?;
        let mean = tape.mean_all(picked)?;
        let loss = tape.scale(mean, -1.0);
        let value = tape.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training { epoch, reason: format!("head cross-entropy is {value}") });
        }
        let grads = tape.backward(loss, 1.0)?;
        let gw = grads.wrt(w, head.weight.shape());
        let gb = grads.wrt(b, head.bias.shape());
        adam.step(&mut [&mut head.weight, &mut head.bias], &[gw, gb]);
    }
    let acc = head.accuracy(val)?;
    Ok((head, acc))
}

/// Two-layer rectifier network applied to every patch with shared weights:
/// `ẑ = relu(v W1 + b1) W2 + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionNet {
    /// `m x H`.
    pub w1: Matrix,
    /// `1 x H`.
    pub b1: Matrix,
    /// `H x d`.
    pub w2: Matrix,
    /// `1 x d`.
    pub b2: Matrix,
}

/// Tape handles for the parameters of `g`.
#[derive(Clone, Copy, Debug)]
pub struct ReconstructionVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ReconstructionNet {
    pub fn new(w1: Matrix, b1: Matrix, w2: Matrix, b2: Matrix) -> Result<Self> {
        let h = w1.cols();
        if b1.shape() != (1, h) || w2.rows() != h || b2.shape() != (1, w2.cols()) {
            return Err(shape_err!(
                "inconsistent g shapes: W1 {:?}, b1 {:?}, W2 {:?}, b2 {:?}",
                w1.shape(),
                b1.shape(),
                w2.shape(),
                b2.shape()
            ));
        }
        if [&w1, &b1, &w2, &b2].iter().any(|m| !m.is_finite()) {
            return Err(Error::Data("non-finite parameters in g".into()));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    /// He-style random init with zero biases.
    pub fn random(concepts: usize, hidden: usize, channels: usize, seed: u64) -> Result<Self> {
        if concepts == 0 || hidden == 0 || channels == 0 {
            return Err(arg_err!("g dimensions must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |r: usize, c: usize, scale: f64| {
            let data =
                (0..r * c).map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)).collect();
            Matrix::from_vec(r, c, data).expect("sized")
        };
        let w1 = draw(concepts, hidden, libm::sqrt(2.0 / concepts as f64));
        let w2 = draw(hidden, channels, libm::sqrt(1.0 / hidden as f64));
        Self::new(w1, Matrix::zeros(1, hidden), w2, Matrix::zeros(1, channels))
    }

    /// Exact inverse of an orthonormal square concept matrix:
    /// `relu(zCCᵀ) - relu(-zCCᵀ) = z`, realised with `H = 2d`.
    pub fn exact_inverse(c: &ConceptMatrix) -> Result<Self> {
        let d = c.channels();
        if c.len() != d {
            return Err(shape_err!("exact inverse needs m == d, got m={} d={}", c.len(), d));
        }
        let ct = c.matrix().transpose();
        let mut w1 = Matrix::zeros(d, 2 * d);
        let mut w2 = Matrix::zeros(2 * d, d);
        for i in 0..d {
            for j in 0..d {
                w1[(i, j)] = ct[(i, j)];
                w1[(i, d + j)] = -ct[(i, j)];
            }
            w2[(i, i)] = 1.0;
            w2[(d + i, i)] = -1.0;
        }
        Self::new(w1, Matrix::zeros(1, 2 * d), w2, Matrix::zeros(1, d))
    }

    pub fn concepts(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    pub fn channels(&self) -> usize {
        self.w2.cols()
    }

    pub fn shapes(&self) -> [(usize, usize); 4] {
        [self.w1.shape(), self.b1.shape(), self.w2.shape(), self.b2.shape()]
    }

    pub fn params_mut(&mut self) -> [&mut Matrix; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Applies `g` to `(N·P) x m` score rows.
    pub fn forward_rows(&self, scores: &Matrix) -> Result<Matrix> {
        if scores.cols() != self.concepts() {
            return Err(shape_err!("scores have {} concepts, g expects {}", scores.cols(), self.concepts()));
        }
        let mut hidden = scores.matmul_unchecked(&self.w1);
        for r in 0..hidden.rows() {
            hidden.row_mut(r).iter_mut().zip(self.b1.data()).for_each(|(v, b)| *v = (*v + b).max(0.0));
        }
        let mut out = hidden.matmul_unchecked(&self.w2);
        for r in 0..out.rows() {
            out.row_mut(r).iter_mut().zip(self.b2.data()).for_each(|(v, b)| *v += b);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, scores: &FeatureTensor) -> Result<FeatureTensor> {
        let rows = self.forward_rows(scores.patch_rows())?;
        FeatureTensor::from_patch_rows(scores.patches(), rows)
    }

    pub fn record_params(&self, tape: &mut GradientTape, trainable: bool) -> ReconstructionVars {
        let mut leaf = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        ReconstructionVars { w1: leaf(&self.w1), b1: leaf(&self.b1), w2: leaf(&self.w2), b2: leaf(&self.b2) }
    }
}

/// Records `g` on the tape for `(N·P) x m` score rows.
pub fn record_reconstruction(tape: &mut GradientTape, g: &ReconstructionVars, scores: Var) -> Result<Var> {
    let pre = tape.matmul(scores, g.w1)?;
    let pre = tape.add_row(pre, g.b1)?;
    let hidden = tape.relu(pre);
    let out = tape.matmul(hidden, g.w2)?;
    tape.add_row(out, g.b2)
}

/// A trained concept model: concepts `C`, reconstruction `g` and the frozen head `h`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConceptModel {
    pub concepts: ConceptMatrix,
    pub g: ReconstructionNet,
    pub head: ClassifierHead,
}

impl ConceptModel {
    pub fn new(concepts: ConceptMatrix, g: ReconstructionNet, head: ClassifierHead) -> Result<Self> {
        if g.concepts() != concepts.len() {
            return Err(shape_err!("g takes {} concepts but C has {}", g.concepts(), concepts.len()));
        }
        if g.channels() != concepts.channels() || head.channels() != concepts.channels() {
            return Err(shape_err!(
                "channel mismatch: C {}, g {}, head {}",
                concepts.channels(),
                g.channels(),
                head.channels()
            ));
        }
        Ok(Self { concepts, g, head })
    }

    /// `φ̂ = g(φ C)`.
    pub fn reconstruct(&self, z: &FeatureTensor) -> Result<FeatureTensor> {
        let scores = crate::concepts::concept_scores(&self.concepts, z)?;
        self.g.reconstruct(&scores)
    }

    /// Reconstruction from scores with the concepts outside `keep` zeroed.
    pub fn reconstruct_masked(&self, z: &FeatureTensor, keep: &[bool]) -> Result<FeatureTensor> {
        let mut scores = crate::concepts::concept_scores(&self.concepts, z)?.patch_rows().clone();
        mask_columns(&mut scores, keep);
        let rows = self.g.forward_rows(&scores)?;
        FeatureTensor::from_patch_rows(z.patches(), rows)
    }
}

pub(crate) fn mask_columns(m: &mut Matrix, keep: &[bool]) {
    for r in 0..m.rows() {
        for (v, &k) in m.row_mut(r).iter_mut().zip(keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
}
