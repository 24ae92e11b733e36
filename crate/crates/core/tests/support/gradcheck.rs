use oodconcepts_core::detectors::{CalibratedDetector, DetectorKind, DetectorSpec};
use oodconcepts_core::learn::*;
use oodconcepts_core::linalg::Matrix;
use oodconcepts_core::model::{ClassifierHead, ReconstructionNet};
use oodconcepts_core::tensor::{FeatureTensor, LabelVector, LabeledSplit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// N=8, P=2, d=4, m=3, H=5, L=2.
pub struct Mini {
    pub id: FeatureTensor,
    pub labels: Vec<usize>,
    pub ood: FeatureTensor,
    pub head: ClassifierHead,
    pub c: Matrix,
    pub g: ReconstructionNet,
}

pub fn mini(seed: u64) -> Mini {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |n: usize, shift: f64| (0..n).map(|_| rng.random_range(-1.0..1.0) + shift).collect::<Vec<f64>>();
    let id = FeatureTensor::new(8, 2, 4, draw(64, 0.5)).unwrap();
    let ood = FeatureTensor::new(8, 2, 4, draw(64, -0.2)).unwrap();
    let c = Matrix::from_vec(4, 3, draw(12, 0.0)).unwrap();
    let head = ClassifierHead::new(Matrix::from_vec(2, 4, draw(8, 0.0)).unwrap(), Matrix::from_vec(1, 2, draw(2, 0.0)).unwrap()).unwrap();
    let g = ReconstructionNet::new(
        Matrix::from_vec(3, 5, draw(15, 0.0)).unwrap(),
        Matrix::from_vec(1, 5, draw(5, 0.2)).unwrap(),
        Matrix::from_vec(5, 4, draw(20, 0.0)).unwrap(),
        Matrix::from_vec(1, 4, draw(4, 0.0)).unwrap(),
    )
    .unwrap();
    Mini { id, labels: vec![0, 1, 0, 1, 1, 0, 0, 1], ood, head, c, g }
}

/// Worst relative error between the analytic objective gradient and central
/// differences (step 1e-4) over every entry of `C` and `g`.
pub fn check(kind: DetectorKind, preset: Preset, seed: u64) -> f64 {
    check_with(kind, preset, seed, 1e-4, |_| {})
}

/// Same comparison with a chosen step, after `tweak` edits the settings.
#[allow(dead_code)]
pub fn check_with(kind: DetectorKind, preset: Preset, seed: u64, h: f64, tweak: impl Fn(&mut ObjectiveSettings)) -> f64 {
    let m = mini(seed);
    let split = LabeledSplit::new(m.id.clone(), LabelVector::new(m.labels.clone(), 2).unwrap()).unwrap();
    let spec = DetectorSpec::fitted(kind, None, None, &split).unwrap();
    let cd = CalibratedDetector::calibrate(spec.clone(), &m.head, &m.id).unwrap();
    let cid = spec.score(&m.head, &m.id).unwrap();
    let cood = spec.score(&m.head, &m.ood).unwrap();
    let mut detected = cd.decisions(&cid);
    detected.extend(cd.decisions(&cood));
    let a = neighbor_sums(&m.c, m.id.patch_rows(), 3).unwrap();
    let batch = Batch { id: &m.id, labels: &m.labels, ood: &m.ood, canonical_id: &cid, canonical_ood: &cood, detected_id: &detected, neighbor_sums: &a };
    let cfg = LearnConfig { neighbors: 3, ..LearnConfig::default() }.with_preset(preset, kind);
    let mut settings = ObjectiveSettings::from(&cfg);
    tweak(&mut settings);
    let grad = objective_gradient(&m.c, &m.g, &m.head, &spec, &batch, &settings).unwrap();
    let f = |c: &Matrix, g: &ReconstructionNet| objective_value(c, g, &m.head, &spec, &batch, &settings).unwrap().total;
    let mut worst: f64 = 0.0;
    let mut compare = |analytic: f64, numeric: f64| {
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    };
    for i in 0..m.c.data().len() {
        let mut cp = m.c.clone();
        cp.data_mut()[i] += h;
        let mut cm = m.c.clone();
        cm.data_mut()[i] -= h;
        compare(grad.c.data()[i], (f(&cp, &m.g) - f(&cm, &m.g)) / (2.0 * h));
    }
    for k in 0..4 {
        for i in 0..grad.g[k].data().len() {
            let mut gp = m.g.clone();
            gp.params_mut()[k].data_mut()[i] += h;
            let mut gm = m.g.clone();
            gm.params_mut()[k].data_mut()[i] -= h;
            compare(grad.g[k].data()[i], (f(&m.c, &gp) - f(&m.c, &gm)) / (2.0 * h));
        }
    }
    worst
}

