//! One PASS/FAIL line per acceptance criterion. Exits non-zero when any
//! criterion fails. Pass substrings as arguments to run a subset.

#[path = "../../core/tests/support/gradcheck.rs"]
mod gradcheck;

use std::path::PathBuf;
use std::time::{Duration, Instant};

use oodconcepts::commands;
use oodconcepts::config::RunConfig;
use oodconcepts::core::concepts::{smooth_max, ConceptMatrix, DEFAULT_ALPHA};
use oodconcepts::core::detectors::{CalibratedDetector, DetectorKind, DetectorSpec};
use oodconcepts::core::explain::{
    shapley_exact, shapley_monte_carlo, Coalition, DetectionCharacteristic, FinetuneData, FnGame, Target,
};
use oodconcepts::core::learn::Preset;
use oodconcepts::core::linalg::Matrix;
use oodconcepts::core::metrics::{auroc, evaluate_completeness, scatter_separability, Ridge};
use oodconcepts::core::model::{train_head, ConceptModel, HeadTrainConfig, ReconstructionNet};
use oodconcepts::core::tensor::{generate_synthetic, SyntheticSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEEDS: u64 = 5;
const TREND_QUORUM: usize = 4;

/// Desk-scale fixture: Energy detector on the default synthetic bundle.
fn fixture_config(seed: u64, preset: Preset) -> RunConfig {
    RunConfig::parse(&format!(
        "seed = {seed}\n\
         [learn]\n\
         preset = energy-{}\n\
         concepts = 8\n\
         hidden = 64\n\
         epochs = 80\n\
         batch_size = 16\n\
         learning_rate = 0.001\n",
        preset.name()
    ))
    .expect("fixture config parses")
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

// 1
fn auroc_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mismatches = 0;
    for i in 0..1000 {
        let n = rng.random_range(1..80);
        let m = rng.random_range(1..80);
        // half the instances draw from a small integer range to force ties
        let mut draw = |k: usize| -> Vec<f64> {
            if i % 2 == 0 {
                (0..k).map(|_| f64::from(rng.random_range(-4i32..5))).collect()
            } else {
                (0..k).map(|_| rng.random_range(-3.0..3.0)).collect()
            }
        };
        let (id, ood) = (draw(n), draw(m));
        let mut wins = 0.0;
        for a in &id {
            for b in &ood {
                wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
            }
        }
        if auroc(&id, &ood).unwrap() != wins / (n * m) as f64 {
            mismatches += 1;
        }
    }
    let t = start.elapsed();
    outcome(mismatches == 0 && t < Duration::from_secs(5), format!("{mismatches}/1000 mismatches in {}", secs(t)))
}

// 2
fn gradient() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for kind in DetectorKind::ALL {
        for preset in Preset::ALL {
            worst = worst.max(gradcheck::check(kind, preset, 3));
        }
    }
    let t = start.elapsed();
    outcome(worst < 1e-3 && t < Duration::from_secs(30), format!("worst relative error {worst:.2e} over 4 presets x 4 detectors in {}", secs(t)))
}

fn random_orthonormal(d: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    let mut cols: Vec<Vec<f64>> = Vec::new();
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            m[(i, j)] = c[i];
        }
    }
    m
}

// 3
fn identity_pipeline() -> Outcome {
    let spec = SyntheticSpec::default();
    let bundle = generate_synthetic(&spec).unwrap();
    let (head, _) = train_head(&bundle.id_train, &bundle.id_val, &HeadTrainConfig::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = ConceptMatrix::new(random_orthonormal(spec.channels, &mut rng)).unwrap();
    let g = ReconstructionNet::exact_inverse(&c).unwrap();
    let model = ConceptModel::new(c, g, head.clone()).unwrap();
    let mut worst: f64 = 0.0;
    for kind in DetectorKind::ALL {
        let det = DetectorSpec::fitted(kind, None, None, &bundle.id_train).unwrap();
        let cd = CalibratedDetector::calibrate(det, &head, &bundle.id_val.features).unwrap();
        let r = evaluate_completeness(&cd, &model, &bundle.id_test, &bundle.ood_test).unwrap();
        worst = worst.max((r.eta_clf - 1.0).abs()).max((r.eta_det - 1.0).abs());
    }
    outcome(worst <= 1e-9, format!("max |eta - 1| = {worst:.1e} over 4 detectors"))
}

// 4
fn fisher_invariance() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let m = 5;
    let rand = |rng: &mut ChaCha8Rng, r: usize, c: usize| Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let vin = rand(&mut rng, 30, m);
    let vout = rand(&mut rng, 25, m);
    let j = scatter_separability(&vin, &vout, Ridge::Absolute(0.0)).unwrap().j;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let mut a = rand(&mut rng, m, m);
        for i in 0..m {
            a[(i, i)] += 1.5;
        }
        let mapped = scatter_separability(&vin.matmul(&a).unwrap(), &vout.matmul(&a).unwrap(), Ridge::Absolute(0.0)).unwrap().j;
        worst = worst.max((mapped - j).abs() / j);
    }
    let one_d = scatter_separability(
        &Matrix::from_vec(2, 1, vec![-1.0, 1.0]).unwrap(),
        &Matrix::from_vec(2, 1, vec![3.0, 5.0]).unwrap(),
        Ridge::Absolute(0.0),
    )
    .unwrap();
    let hand = one_d.sw[(0, 0)] == 4.0 && one_d.sb[(0, 0)] == 16.0 && one_d.j == 4.0;
    outcome(worst < 1e-8 && hand, format!("max relative deviation {worst:.1e} over 50 maps; 1-D case Sw={} Sb={} J={}", one_d.sw[(0, 0)], one_d.sb[(0, 0)], one_d.j))
}

// 5
fn shapley_axioms(models: &Models) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut eff: f64 = 0.0;
    let mut sym: f64 = 0.0;
    let mut dummy: f64 = 0.0;
    for m in 1..=10usize {
        for _ in 0..5 {
            let w: Vec<f64> = (0..1usize << m).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = shapley_exact(&mut FnGame::new(m, |s: Coalition| w[s.bits() as usize])).unwrap();
            eff = eff.max((r.values.iter().sum::<f64>() - (r.nu_full - r.nu_empty)).abs());
            if m >= 2 {
                let (i, j) = (0, m - 1);
                let swap = |s: Coalition| match (s.contains(i), s.contains(j)) {
                    (true, false) => s.without(i).with(j),
                    (false, true) => s.without(j).with(i),
                    _ => s,
                };
                let v = shapley_exact(&mut FnGame::new(m, |s: Coalition| w[s.bits() as usize] + w[swap(s).bits() as usize])).unwrap().values;
                sym = sym.max((v[i] - v[j]).abs());
                let gain = rng.random_range(-1.0..1.0);
                let k = m / 2;
                let v = shapley_exact(&mut FnGame::new(m, |s: Coalition| w[s.without(k).bits() as usize] + if s.contains(k) { gain } else { 0.0 }))
                    .unwrap()
                    .values;
                dummy = dummy.max((v[k] - gain).abs());
            }
        }
    }
    let axioms = eff < 1e-9 && sym < 1e-9 && dummy < 1e-9;

    // Monte Carlo against exact on an 8-player constructed game and on the
    // real detection game of the first fixture model with 8 concepts.
    let mut within = 0;
    let mut total = 0;
    let w: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ex = shapley_exact(&mut FnGame::new(8, |s: Coalition| w[s.bits() as usize])).unwrap();
    let mc = shapley_monte_carlo(&mut FnGame::new(8, |s: Coalition| w[s.bits() as usize]), 2000, 5).unwrap();
    let se = mc.std_errors.clone().unwrap();
    for k in 0..8 {
        total += 1;
        within += ((mc.values[k] - ex.values[k]).abs() <= 3.0 * se[k]) as usize;
    }
    let mut real = String::from("no 8-concept fixture model");
    for (cfg, ck) in &models.all {
        let l = commands::load_model(cfg, ck).unwrap();
        if l.model.concepts.len() != 8 {
            continue;
        }
        let tune = FinetuneData::sample(&l.detector.spec, &l.model, &l.bundle.id_train, &l.bundle.ood_train, cfg.explain.finetune_samples).unwrap();
        let mut ch = DetectionCharacteristic::new(&l.model, &l.detector.spec, &l.bundle.id_test.features, &l.bundle.ood_test, tune, cfg.finetune()).unwrap();
        let ex = shapley_exact(&mut ch.game(Target::Global).unwrap()).unwrap();
        let mc = shapley_monte_carlo(&mut ch.game(Target::Global).unwrap(), 2000, cfg.seed).unwrap();
        let se = mc.std_errors.clone().unwrap();
        let mut inside = 0;
        for k in 0..8 {
            total += 1;
            let ok = (mc.values[k] - ex.values[k]).abs() <= 3.0 * se[k] + 1e-12;
            inside += ok as usize;
            within += ok as usize;
        }
        let gap = (ex.values.iter().sum::<f64>() - ex.nu_full).abs();
        eff = eff.max(gap);
        real = format!("detection game (seed {}): {inside}/8 within 3 SE, efficiency gap {gap:.1e}", cfg.seed);
        break;
    }
    outcome(
        axioms && within == total,
        format!("efficiency {eff:.1e}, symmetry {sym:.1e}, dummy {dummy:.1e} (m' = 1..10); MC 2000 permutations {within}/{total} within 3 SE; {real}"),
    )
}

// 6
fn smooth_max_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let alpha = DEFAULT_ALPHA;
    let mut violations = 0;
    for _ in 0..100_000 {
        let p = rng.random_range(1..=64usize);
        let values: Vec<f64> = (0..p).map(|_| rng.random_range(0.0..5.0)).collect();
        let exact = values.iter().cloned().fold(0.0, f64::max);
        let gap = smooth_max(values.iter().cloned(), alpha) - exact;
        // one rounding of the final addition is allowed
        let bound = alpha * (p as f64).ln() + 2.0 * f64::EPSILON * exact.max(1.0);
        if gap < 0.0 || gap > bound {
            violations += 1;
        }
    }
    outcome(violations == 0, format!("{violations} violations over 1e5 sets at alpha = {alpha}"))
}

/// Checkpoints of every preset for every seed, learned through the CLI
/// library path into one temporary directory.
struct Models {
    _dir: tempfile::TempDir,
    root: PathBuf,
    /// `[seed][preset]` in `Preset::ALL` order.
    paths: Vec<Vec<PathBuf>>,
    all: Vec<(RunConfig, PathBuf)>,
    learn_time: Duration,
}

impl Models {
    fn build() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let start = Instant::now();
        let mut paths = Vec::new();
        let mut all = Vec::new();
        for seed in 0..SEEDS {
            let mut row = Vec::new();
            for preset in Preset::ALL {
                let out = root.join(format!("seed{seed}-{}", preset.name()));
                std::fs::create_dir_all(&out).unwrap();
                let cfg = fixture_config(seed, preset);
                commands::learn(&cfg, &out).unwrap();
                let ck = out.join(commands::MODEL_FILE);
                if preset == Preset::All {
                    all.push((cfg, ck.clone()));
                }
                row.push(ck);
            }
            paths.push(row);
        }
        Models { _dir: dir, root, paths, all, learn_time: start.elapsed() }
    }
}

// 7
fn self_relative(models: &Models) -> Outcome {
    let mut values = Vec::new();
    for (cfg, ck) in &models.all {
        let out = models.root.join(format!("self{}", cfg.seed));
        let m = commands::eval(cfg, &out, ck, Some(ck)).unwrap();
        values.push(m.j_sep_relative);
    }
    let pass = values.iter().all(|v| *v == Some(0.0));
    outcome(pass, format!("jSepRelative against itself: {values:?}"))
}

// 8
fn table_trends(models: &Models) -> Outcome {
    let start = Instant::now();
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in 0..SEEDS as usize {
        let base = &models.paths[seed][0];
        let mut eta = Vec::new();
        let mut rel = Vec::new();
        for (i, preset) in Preset::ALL.into_iter().enumerate() {
            let cfg = fixture_config(seed as u64, preset);
            let out = models.root.join(format!("eval{seed}-{}", preset.name()));
            let m = commands::eval(&cfg, &out, &models.paths[seed][i], Some(base)).unwrap();
            eta.push(m.eta_det);
            rel.push(m.j_sep_relative.unwrap());
        }
        let pa = eta[1] > eta[0];
        let pb = rel[2] > 0.0 && eta[2] <= eta[0];
        let pc = eta[3] >= eta[0].max(eta[2]) && rel[3] > 0.0;
        a += pa as usize;
        b += pb as usize;
        c += pc as usize;
        lines.push(format!(
            "      seed {seed}: etaDet baseline {:.4} mse+norm {:.4} sep {:.4} all {:.4}; rel sep {:.3} all {:.3} -> a {pa} b {pb} c {pc}",
            eta[0], eta[1], eta[2], eta[3], rel[2], rel[3]
        ));
    }
    let total = models.learn_time + start.elapsed();
    let pass = a >= TREND_QUORUM && b >= TREND_QUORUM && c >= TREND_QUORUM && total < Duration::from_secs(600);
    outcome(pass, format!("(a) {a}/5 (b) {b}/5 (c) {c}/5 seeds, {} total\n{}", secs(total), lines.join("\n")))
}

// 9
fn intervention_trend(models: &Models) -> Outcome {
    let mut monotone = 0;
    let mut lines = Vec::new();
    for (cfg, ck) in &models.all {
        let out = models.root.join(format!("intervene{}", cfg.seed));
        let rows = commands::intervene(cfg, &out, ck, None).unwrap();
        let ok = rows.windows(2).all(|w| w[1].auroc_after >= w[0].auroc_after);
        monotone += ok as usize;
        let first = rows.first().unwrap();
        let last = rows.last().unwrap();
        lines.push(format!(
            "      seed {}: K=0 {:.4} -> K={} {:.4}; curve {:?} {}",
            cfg.seed,
            first.auroc_after,
            last.k,
            last.auroc_after,
            rows.iter().map(|r| (r.auroc_after * 1e4).round() / 1e4).collect::<Vec<_>>(),
            if ok { "non-decreasing" } else { "not monotone" }
        ));
    }
    outcome(monotone >= TREND_QUORUM, format!("{monotone}/5 seeds non-decreasing from K = 0 to K = m'\n{}", lines.join("\n")))
}

// 10
fn determinism(models: &Models) -> Outcome {
    let (cfg, ck) = &models.all[0];
    let out = models.root.join("again");
    std::fs::create_dir_all(&out).unwrap();
    commands::learn(cfg, &out).unwrap();
    let a = std::fs::read(ck).unwrap();
    let b = std::fs::read(out.join(commands::MODEL_FILE)).unwrap();
    outcome(a == b, format!("{} and {} bytes, {}", a.len(), b.len(), if a == b { "identical" } else { "different" }))
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |key: &str| filters.is_empty() || filters.iter().any(|f| key.contains(f.as_str()));
    let needs_models = ["shapley", "self_relative", "table", "intervention", "determinism"].iter().any(|k| wanted(k));
    let models = needs_models.then(Models::build);
    let m = || models.as_ref().unwrap();

    let criteria: Vec<(&str, &str, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("auroc", "AUROC equals brute-force pair counting", Box::new(auroc_oracle)),
        ("gradient", "objective gradient matches finite differences", Box::new(gradient)),
        ("identity", "identity pipeline is fully complete", Box::new(identity_pipeline)),
        ("fisher", "Fisher separability is invariant to invertible maps", Box::new(fisher_invariance)),
        ("shapley", "Shapley axioms and Monte Carlo agreement", Box::new(move || shapley_axioms(m()))),
        ("smooth_max", "smooth max stays within its temperature bound", Box::new(smooth_max_bound)),
        ("self_relative", "relative separability against itself is zero", Box::new(move || self_relative(m()))),
        ("table", "regularizer trends on the synthetic bundle", Box::new(move || table_trends(m()))),
        ("intervention", "intervention AUROC is non-decreasing in K", Box::new(move || intervention_trend(m()))),
        ("determinism", "learn twice gives identical checkpoints", Box::new(move || determinism(m()))),
    ];
    let mut failed = 0;
    for (i, (key, title, run)) in criteria.iter().enumerate() {
        if !wanted(key) {
            continue;
        }
        let o = run();
        failed += !o.pass as usize;
        println!("{} [{}] {title}: {}", if o.pass { "PASS" } else { "FAIL" }, i + 1, o.detail);
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
