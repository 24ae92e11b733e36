//! Concept attribution: Shapley values of detection completeness, concept
//! score profiles, counterfactual interventions and nearest-patch reports.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::GradientTape;
use crate::concepts::{concept_scores, reduce_max, ReducedScores, Reduction};
use crate::detectors::{CalibratedDetector, DetectorSpec};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::learn::{record_cross_entropy, record_forward, record_reg_mse, record_reg_norm};
use crate::linalg::Matrix;
use crate::metrics::{auroc, concept_view, detection_completeness, MIN_CLASS_SAMPLES};
use crate::model::{mask_columns, ConceptModel, ReconstructionNet};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{FeatureTensor, LabeledSplit};

/// Most players a [`Coalition`] can hold.
pub const MAX_PLAYERS: usize = 128;
/// Largest game solved by enumeration.
pub const MAX_EXACT_PLAYERS: usize = 15;
pub const DEFAULT_PERMUTATIONS: usize = 2000;

/// A set of concept indices stored as a bitset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Coalition(u128);

impl Coalition {
    pub const EMPTY: Coalition = Coalition(0);

    pub fn full(players: usize) -> Self {
        assert!(players <= MAX_PLAYERS);
        if players == MAX_PLAYERS { Coalition(u128::MAX) } else { Coalition((1u128 << players) - 1) }
    }

    pub fn from_bits(bits: u128) -> Self {
        Coalition(bits)
    }

    pub fn from_members(members: &[usize]) -> Self {
        members.iter().fold(Self::EMPTY, |c, &i| c.with(i))
    }

    pub fn bits(self) -> u128 {
        self.0
    }

    pub fn contains(self, i: usize) -> bool {
        i < MAX_PLAYERS && self.0 >> i & 1 == 1
    }

    pub fn with(self, i: usize) -> Self {
        Coalition(self.0 | 1u128 << i)
    }

    pub fn without(self, i: usize) -> Self {
        Coalition(self.0 & !(1u128 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn members(self) -> Vec<usize> {
        (0..MAX_PLAYERS).filter(|&i| self.contains(i)).collect()
    }

    /// Keep-mask over `players` concepts.
    pub fn mask(self, players: usize) -> Vec<bool> {
        (0..players).map(|i| self.contains(i)).collect()
    }
}

impl fmt::Display for Coalition {
    /// Comma-separated member indices; `{}` for the empty set.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_empty() {
            return f.write_str("{}");
        }
        for (k, i) in self.members().into_iter().enumerate() {
            if k > 0 {
                f.write_str(",")?;
            }
            write!(f, "{i}")?;
        }
        Ok(())
    }
}

/// A characteristic function over `players()` concepts.
pub trait CoalitionGame {
    fn players(&self) -> usize;
    fn value(&mut self, coalition: Coalition) -> Result<f64>;
}

/// A game given by a closure, for constructed characteristic functions.
pub struct FnGame<F> {
    players: usize,
    f: F,
}

impl<F: FnMut(Coalition) -> f64> FnGame<F> {
    pub fn new(players: usize, f: F) -> Self {
        Self { players, f }
    }
}

impl<F: FnMut(Coalition) -> f64> CoalitionGame for FnGame<F> {
    fn players(&self) -> usize {
        self.players
    }

    fn value(&mut self, coalition: Coalition) -> Result<f64> {
        Ok((self.f)(coalition))
    }
}

/// Memoizes a game so every coalition is evaluated at most once.
pub struct CachedGame<'g, G: ?Sized> {
    game: &'g mut G,
    cache: BTreeMap<Coalition, f64>,
}

impl<'g, G: CoalitionGame + ?Sized> CachedGame<'g, G> {
    pub fn new(game: &'g mut G) -> Self {
        Self { game, cache: BTreeMap::new() }
    }

    pub fn value(&mut self, s: Coalition) -> Result<f64> {
        if let Some(&v) = self.cache.get(&s) {
            return Ok(v);
        }
        let v = self.game.value(s)?;
        if !v.is_finite() {
            return Err(Error::Numeric(alloc::format!("characteristic value for {{{s}}} is {v}")));
        }
        self.cache.insert(s, v);
        Ok(v)
    }

    pub fn into_cache(self) -> BTreeMap<Coalition, f64> {
        self.cache
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapleyMode {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShapleyResult {
    pub values: Vec<f64>,
    /// Standard errors of the estimates; `None` in exact mode and for a
    /// single permutation.
    pub std_errors: Option<Vec<f64>>,
    pub mode: ShapleyMode,
    pub nu_full: f64,
    pub nu_empty: f64,
    pub cache: BTreeMap<Coalition, f64>,
}

impl ShapleyResult {
    /// Concepts by decreasing value; ties keep index order.
    pub fn ranking(&self) -> Vec<usize> {
        ranking(&self.values)
    }
}

pub fn ranking(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

fn check_players(m: usize) -> Result<()> {
    if m == 0 || m > MAX_PLAYERS {
        return Err(arg_err!("a game needs between 1 and {MAX_PLAYERS} players, got {m}"));
    }
    Ok(())
}

/// Shapley values by enumerating all `2^m` coalitions.
pub fn shapley_exact<G: CoalitionGame + ?Sized>(game: &mut G) -> Result<ShapleyResult> {
    let m = game.players();
    check_players(m)?;
    if m > MAX_EXACT_PLAYERS {
        return Err(arg_err!(
            "exact Shapley values need at most {MAX_EXACT_PLAYERS} concepts, got {m}; use Monte Carlo mode"
        ));
    }
    let mut fact = vec![1.0f64; m + 1];
    for k in 1..=m {
        fact[k] = fact[k - 1] * k as f64;
    }
    let weight: Vec<f64> = (0..m).map(|s| fact[s] * fact[m - s - 1] / fact[m]).collect();

    let mut cached = CachedGame::new(game);
    let mut values = vec![0.0; m];
    for bits in 0..1u128 << m {
        let s = Coalition(bits);
        let base = cached.value(s)?;
        let w = weight[s.len().min(m - 1)];
        for (i, v) in values.iter_mut().enumerate() {
            if !s.contains(i) {
                *v += w * (cached.value(s.with(i))? - base);
            }
        }
    }
    let nu_full = cached.value(Coalition::full(m))?;
    let nu_empty = cached.value(Coalition::EMPTY)?;
    Ok(ShapleyResult { values, std_errors: None, mode: ShapleyMode::Exact, nu_full, nu_empty, cache: cached.into_cache() })
}

/// Permutation-sampling estimate: mean marginal gain over `samples`
/// uniformly random orderings.
pub fn shapley_monte_carlo<G: CoalitionGame + ?Sized>(game: &mut G, samples: usize, seed: u64) -> Result<ShapleyResult> {
    let m = game.players();
    check_players(m)?;
    if samples == 0 {
        return Err(arg_err!("Monte Carlo Shapley needs at least one permutation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cached = CachedGame::new(game);
    let mut sum = vec![0.0; m];
    let mut sum_sq = vec![0.0; m];
    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..samples {
        order.shuffle(&mut rng);
        let mut s = Coalition::EMPTY;
        let mut prev = cached.value(s)?;
        for &i in &order {
            s = s.with(i);
            let next = cached.value(s)?;
            let gain = next - prev;
            sum[i] += gain;
            sum_sq[i] += gain * gain;
            prev = next;
        }
    }
    let n = samples as f64;
    let values: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std_errors = (samples > 1).then(|| {
        values
            .iter()
            .zip(&sum_sq)
            .map(|(mean, sq)| libm::sqrt(((sq - n * mean * mean) / (n - 1.0)).max(0.0) / n))
            .collect()
    });
    let nu_full = cached.value(Coalition::full(m))?;
    let nu_empty = cached.value(Coalition::EMPTY)?;
    Ok(ShapleyResult {
        values,
        std_errors,
        mode: ShapleyMode::MonteCarlo { samples, seed },
        nu_full,
        nu_empty,
        cache: cached.into_cache(),
    })
}

/// Budget for the per-coalition refit of `g`'s first layer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FinetuneSettings {
    pub steps: usize,
    pub learning_rate: f64,
    pub lambda_mse: f64,
    pub lambda_norm: f64,
}

impl Default for FinetuneSettings {
    fn default() -> Self {
        Self { steps: 20, learning_rate: 1e-2, lambda_mse: 0.0, lambda_norm: 0.0 }
    }
}

/// Fixed training sample used by every refit.
#[derive(Clone, Debug)]
pub struct FinetuneData {
    pub id: FeatureTensor,
    pub labels: Vec<usize>,
    pub ood: FeatureTensor,
    pub canonical_id: Vec<f64>,
    pub canonical_ood: Vec<f64>,
}

fn evenly_spaced(n: usize, k: usize) -> Vec<usize> {
    if k >= n {
        return (0..n).collect();
    }
    (0..k).map(|i| i * n / k).collect()
}

impl FinetuneData {
    /// Takes up to `per_side` evenly spaced ID and OOD training samples.
    pub fn sample(spec: &DetectorSpec, model: &ConceptModel, id: &LabeledSplit, ood: &FeatureTensor, per_side: usize) -> Result<Self> {
        let ii = evenly_spaced(id.labels.len(), per_side);
        let oi = evenly_spaced(ood.samples(), per_side);
        let id_f = id.features.select(&ii);
        let ood_f = ood.select(&oi);
        Ok(Self {
            canonical_id: spec.score(&model.head, &id_f)?,
            canonical_ood: spec.score(&model.head, &ood_f)?,
            labels: ii.iter().map(|&i| id.labels.labels()[i]).collect(),
            id: id_f,
            ood: ood_f,
        })
    }
}

/// Refits `W1`, `b1` of `g` with the concepts outside `keep` masked to zero.
pub fn finetune_first_layer(
    model: &ConceptModel,
    spec: &DetectorSpec,
    data: &FinetuneData,
    keep: &[bool],
    settings: &FinetuneSettings,
) -> Result<ReconstructionNet> {
    let mut g = model.g.clone();
    if settings.steps == 0 {
        return Ok(g);
    }
    let rows = FeatureTensor::concat(&[&data.id, &data.ood])?.patch_rows().clone();
    let p = data.id.patches();
    let shapes = g.shapes();
    let mut adam = Adam::new(AdamConfig { learning_rate: settings.learning_rate, ..AdamConfig::default() }, &shapes[..2]);
    for _ in 0..settings.steps {
        let mut tape = GradientTape::new();
        let c = tape.constant(model.concepts.matrix().clone());
        let mut gv = g.record_params(&mut tape, false);
        gv.w1 = tape.param(g.w1.clone());
        gv.b1 = tape.param(g.b1.clone());
        let fwd = record_forward(&mut tape, c, &gv, &model.head, &rows, p, Some(keep))?;
        let mut loss = record_cross_entropy(&mut tape, fwd.logits, &data.labels)?;
        if settings.lambda_mse > 0.0 {
            let s = spec.record(&mut tape, fwd.pooled, fwd.logits)?;
            let j = record_reg_mse(&mut tape, s, &data.canonical_id, &data.canonical_ood)?;
            let j = tape.scale(j, settings.lambda_mse);
            loss = tape.add(loss, j)?;
        }
        if settings.lambda_norm > 0.0 {
            let j = record_reg_norm(&mut tape, fwd.recon, data.id.patch_rows(), data.id.samples())?;
            let j = tape.scale(j, settings.lambda_norm);
            loss = tape.add(loss, j)?;
        }
        let grads = tape.backward(loss, 1.0)?;
        let gw = grads.wrt(gv.w1, shapes[0]);
        let gb = grads.wrt(gv.b1, shapes[1]);
        if !gw.is_finite() || !gb.is_finite() {
            return Err(Error::Numeric(alloc::format!("non-finite gradient while refitting g (loss {})", tape.scalar(loss))));
        }
        let [w1, b1, _, _] = g.params_mut();
        adam.step(&mut [w1, b1], &[gw, gb]);
    }
    Ok(g)
}

/// Whose completeness a game measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Global,
    Class(usize),
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Target::Global => f.write_str("global"),
            Target::Class(j) => write!(f, "{j}"),
        }
    }
}

/// Detection completeness of concept subsets on evaluation data.
///
/// Concept-world detector scores are cached per coalition and shared by all
/// targets. Class membership is fixed by the full model's concept-world
/// predictions. The full coalition uses `g` unchanged; any other non-empty
/// coalition masks the remaining scores and refits `g`'s first layer.
pub struct DetectionCharacteristic<'a> {
    model: &'a ConceptModel,
    spec: &'a DetectorSpec,
    eval_id: &'a FeatureTensor,
    eval_ood: &'a FeatureTensor,
    tune: FinetuneData,
    settings: FinetuneSettings,
    auc_canonical: f64,
    class_id: Vec<usize>,
    class_ood: Vec<usize>,
    scores: BTreeMap<Coalition, (Vec<f64>, Vec<f64>)>,
}

impl<'a> DetectionCharacteristic<'a> {
    pub fn new(
        model: &'a ConceptModel,
        spec: &'a DetectorSpec,
        eval_id: &'a FeatureTensor,
        eval_ood: &'a FeatureTensor,
        tune: FinetuneData,
        settings: FinetuneSettings,
    ) -> Result<Self> {
        let can_id = spec.score(&model.head, eval_id)?;
        let can_ood = spec.score(&model.head, eval_ood)?;
        let auc_canonical = auroc(&can_id, &can_ood)?;
        detection_completeness(auc_canonical, auc_canonical)?;
        let full_id = concept_view(spec, model, eval_id)?;
        let full_ood = concept_view(spec, model, eval_ood)?;
        let mut scores = BTreeMap::new();
        scores.insert(Coalition::full(model.concepts.len()), (full_id.scores, full_ood.scores));
        Ok(Self {
            model,
            spec,
            eval_id,
            eval_ood,
            tune,
            settings,
            auc_canonical,
            class_id: full_id.predictions,
            class_ood: full_ood.predictions,
            scores,
        })
    }

    pub fn players(&self) -> usize {
        self.model.concepts.len()
    }

    pub fn auc_canonical(&self) -> f64 {
        self.auc_canonical
    }

    /// Coalitions whose scores have been computed so far.
    pub fn evaluated(&self) -> usize {
        self.scores.len()
    }

    /// Whether `target` has enough ID and OOD samples to define a value.
    pub fn is_defined(&self, target: Target) -> bool {
        match target {
            Target::Global => true,
            Target::Class(j) => {
                self.class_id.iter().filter(|&&y| y == j).count() >= MIN_CLASS_SAMPLES
                    && self.class_ood.iter().filter(|&&y| y == j).count() >= MIN_CLASS_SAMPLES
            }
        }
    }

    /// The game for one target, or `None` when the target is undefined.
    pub fn game(&mut self, target: Target) -> Option<TargetGame<'_, 'a>> {
        if let Target::Class(j) = target {
            if j >= self.model.head.classes() {
                return None;
            }
        }
        self.is_defined(target).then_some(TargetGame { inner: self, target })
    }

    fn scores_for(&mut self, s: Coalition) -> Result<&(Vec<f64>, Vec<f64>)> {
        if !self.scores.contains_key(&s) {
            let keep = s.mask(self.players());
            let g = finetune_first_layer(self.model, self.spec, &self.tune, &keep, &self.settings)?;
            let world = |z: &FeatureTensor| -> Result<Vec<f64>> {
                let mut rows = concept_scores(&self.model.concepts, z)?.patch_rows().clone();
                mask_columns(&mut rows, &keep);
                let recon = FeatureTensor::from_patch_rows(z.patches(), g.forward_rows(&rows)?)?;
                self.spec.score(&self.model.head, &recon)
            };
            let pair = (world(self.eval_id)?, world(self.eval_ood)?);
            self.scores.insert(s, pair);
        }
        Ok(&self.scores[&s])
    }

    fn value(&mut self, s: Coalition, target: Target) -> Result<f64> {
        if s.is_empty() {
            return Ok(0.0);
        }
        let auc_can = self.auc_canonical;
        let (cid, cood) = (self.class_id.clone(), self.class_ood.clone());
        let (id, ood) = self.scores_for(s)?;
        let auc = match target {
            Target::Global => auroc(id, ood)?,
            Target::Class(j) => {
                let pick = |v: &[f64], cls: &[usize]| -> Vec<f64> {
                    v.iter().zip(cls).filter(|(_, &y)| y == j).map(|(&x, _)| x).collect()
                };
                auroc(&pick(id, &cid), &pick(ood, &cood))?
            }
        };
        detection_completeness(auc, auc_can)
    }
}

/// One target's view of a [`DetectionCharacteristic`].
pub struct TargetGame<'c, 'a> {
    inner: &'c mut DetectionCharacteristic<'a>,
    target: Target,
}

impl TargetGame<'_, '_> {
    pub fn target(&self) -> Target {
        self.target
    }
}

impl CoalitionGame for TargetGame<'_, '_> {
    fn players(&self) -> usize {
        self.inner.players()
    }

    fn value(&mut self, coalition: Coalition) -> Result<f64> {
        self.inner.value(coalition, self.target)
    }
}

/// Mean reduced scores of one class's detected-ID and detected-OOD inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupProfile {
    pub detected_id: Option<Vec<f64>>,
    pub detected_ood: Option<Vec<f64>>,
    pub count_id: usize,
    pub count_ood: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConceptProfile {
    pub classes: Vec<GroupProfile>,
}

impl ConceptProfile {
    pub fn concepts(&self) -> usize {
        self.classes
            .iter()
            .flat_map(|g| g.detected_id.iter().chain(&g.detected_ood))
            .map(Vec::len)
            .next()
            .unwrap_or(0)
    }
}

/// Groups rows of `reduced` by `(class, decision)` and averages them.
pub fn profiles_from_reduced(reduced: &Matrix, classes: &[usize], decisions: &[bool], num_classes: usize) -> Result<ConceptProfile> {
    if classes.len() != reduced.rows() || decisions.len() != reduced.rows() {
        return Err(shape_err!("{} rows, {} classes, {} decisions", reduced.rows(), classes.len(), decisions.len()));
    }
    let m = reduced.cols();
    let mut sums = vec![(vec![0.0; m], 0usize, vec![0.0; m], 0usize); num_classes];
    for r in 0..reduced.rows() {
        let y = classes[r];
        if y >= num_classes {
            return Err(arg_err!("class {y} out of range for {num_classes} classes"));
        }
        let entry = &mut sums[y];
        let (acc, n) = if decisions[r] { (&mut entry.0, &mut entry.1) } else { (&mut entry.2, &mut entry.3) };
        acc.iter_mut().zip(reduced.row(r)).for_each(|(a, v)| *a += v);
        *n += 1;
    }
    let mean = |s: Vec<f64>, n: usize| (n > 0).then(|| s.into_iter().map(|v| v / n as f64).collect());
    let classes = sums
        .into_iter()
        .map(|(si, ni, so, no)| GroupProfile { detected_id: mean(si, ni), detected_ood: mean(so, no), count_id: ni, count_ood: no })
        .collect();
    Ok(ConceptProfile { classes })
}

/// Profiles from held-out data on exact-max reduced scores, grouped by
/// concept-world prediction. The detected-ID profile averages held-out ID
/// inputs the concept world detects as ID; the detected-OOD profile averages
/// held-out OOD inputs it detects as OOD.
pub fn build_profiles(
    model: &ConceptModel,
    cd: &CalibratedDetector,
    held_id: &FeatureTensor,
    held_ood: &FeatureTensor,
) -> Result<ConceptProfile> {
    let side = |z: &FeatureTensor, keep: bool| -> Result<ConceptProfile> {
        let view = concept_view(&cd.spec, model, z)?;
        let decisions = cd.decisions(&view.scores);
        let rows: Vec<usize> = (0..z.samples()).filter(|&n| decisions[n] == keep).collect();
        let reduced = reduce_max(&concept_scores(&model.concepts, z)?, Reduction::Exact)?;
        let classes: Vec<usize> = rows.iter().map(|&n| view.predictions[n]).collect();
        profiles_from_reduced(&reduced.values.select_rows(&rows), &classes, &alloc::vec![keep; rows.len()], model.head.classes())
    };
    let id = side(held_id, true)?;
    let ood = side(held_ood, false)?;
    let classes = id
        .classes
        .into_iter()
        .zip(ood.classes)
        .map(|(a, b)| GroupProfile { detected_id: a.detected_id, detected_ood: b.detected_ood, count_id: a.count_id, count_ood: b.count_ood })
        .collect();
    Ok(ConceptProfile { classes })
}

/// Which misdetections to repair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// ID inputs detected as OOD; edited toward the detected-ID profile.
    IdToOod,
    /// OOD inputs detected as ID; edited toward the detected-OOD profile.
    OodToId,
}

impl Direction {
    fn misdetected(self, decision: bool) -> bool {
        match self {
            Direction::IdToOod => !decision,
            Direction::OodToId => decision,
        }
    }

    fn profile(self, g: &GroupProfile) -> Option<&Vec<f64>> {
        match self {
            Direction::IdToOod => g.detected_id.as_ref(),
            Direction::OodToId => g.detected_ood.as_ref(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Intervention {
    /// Sample indices that were edited.
    pub edited: Vec<usize>,
    /// Correctly detected samples, left untouched.
    pub rejected: Vec<usize>,
    /// Misdetected samples whose class has no matching profile.
    pub unprofiled: Vec<usize>,
    /// Reduced scores of the edited samples.
    pub before: ReducedScores,
    pub after: ReducedScores,
    /// Concept-world detector scores of every sample.
    pub scores_before: Vec<f64>,
    pub scores_after: Vec<f64>,
    pub flips: usize,
}

/// How a profile value replaces a sample's per-patch scores of one concept.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EditMode {
    /// Every patch gets the profile value.
    Broadcast,
    /// Every patch gets the profile value with that patch's own sign.
    SignedBroadcast,
    /// The column is scaled so its largest magnitude equals the profile value.
    #[default]
    Rescale,
}

/// Overwrites `concepts` columns of `sample`'s patch rows from `profile`.
/// In every mode the edited reduced score equals the profile value.
pub fn edit_scores(rows: &mut Matrix, patches: usize, sample: usize, concepts: &[usize], profile: &[f64], mode: EditMode) {
    let span = sample * patches..(sample + 1) * patches;
    for &k in concepts {
        let target = profile[k];
        let peak = span.clone().map(|r| libm::fabs(rows[(r, k)])).fold(0.0, f64::max);
        for r in span.clone() {
            let v = &mut rows[(r, k)];
            *v = match mode {
                EditMode::Broadcast => target,
                EditMode::SignedBroadcast => if *v < 0.0 { -target } else { target },
                EditMode::Rescale if peak > 0.0 => *v * target / peak,
                EditMode::Rescale => target,
            };
        }
    }
}

/// Replaces the top-`top_k` ranked concept scores of each misdetected sample
/// with its class profile and re-runs the concept-world detector.
///
/// `rankings[j]` orders the concepts for samples predicted as class `j`.
pub fn intervene(
    model: &ConceptModel,
    cd: &CalibratedDetector,
    samples: &FeatureTensor,
    direction: Direction,
    top_k: usize,
    profiles: &ConceptProfile,
    rankings: &[Vec<usize>],
    mode: EditMode,
) -> Result<Intervention> {
    let m = model.concepts.len();
    let classes = model.head.classes();
    if top_k > m {
        return Err(arg_err!("top-K of {top_k} exceeds the {m} concepts"));
    }
    if rankings.len() != classes || profiles.classes.len() != classes {
        return Err(shape_err!("{} rankings and {} profiles for {classes} classes", rankings.len(), profiles.classes.len()));
    }
    if let Some(r) = rankings.iter().find(|r| r.len() != m || r.iter().any(|&k| k >= m)) {
        return Err(shape_err!("ranking {r:?} is not over {m} concepts"));
    }
    let p = samples.patches();
    let scores = concept_scores(&model.concepts, samples)?;
    let mut rows = scores.patch_rows().clone();
    let recon = FeatureTensor::from_patch_rows(p, model.g.forward_rows(&rows)?)?;
    let out = model.head.forward(&recon)?;
    let scores_before = cd.spec.score_from(&out.pooled, &out.logits)?;
    let preds = out.predictions();

    let (mut edited, mut rejected, mut unprofiled) = (Vec::new(), Vec::new(), Vec::new());
    for (n, (&s, &y)) in scores_before.iter().zip(&preds).enumerate() {
        if !direction.misdetected(cd.decide(s)) {
            rejected.push(n);
            continue;
        }
        match direction.profile(&profiles.classes[y]) {
            Some(profile) if profile.len() == m => {
                edit_scores(&mut rows, p, n, &rankings[y][..top_k], profile, mode);
                edited.push(n);
            }
            Some(profile) => return Err(shape_err!("profile of class {y} has {} concepts, model has {m}", profile.len())),
            None => unprofiled.push(n),
        }
    }

    let edited_tensor = FeatureTensor::from_patch_rows(p, rows)?;
    let before = reduce_max(&scores, Reduction::Exact)?.select(&edited);
    let after = reduce_max(&edited_tensor, Reduction::Exact)?.select(&edited);
    let recon = FeatureTensor::from_patch_rows(p, model.g.forward_rows(edited_tensor.patch_rows())?)?;
    let scores_after = cd.spec.score(&model.head, &recon)?;
    let flips = edited.iter().filter(|&&n| cd.decide(scores_before[n]) != cd.decide(scores_after[n])).count();
    Ok(Intervention { edited, rejected, unprofiled, before, after, scores_before, scores_after, flips })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub k: usize,
    pub flips: usize,
    pub auroc_before: f64,
    pub auroc_after: f64,
}

/// Intervenes on both sides at each `K` in `ks` and reports the
/// concept-world AUROC before and after.
pub fn intervention_curve(
    model: &ConceptModel,
    cd: &CalibratedDetector,
    id: &FeatureTensor,
    ood: &FeatureTensor,
    profiles: &ConceptProfile,
    rankings: &[Vec<usize>],
    ks: &[usize],
    mode: EditMode,
) -> Result<Vec<CurvePoint>> {
    ks.iter()
        .map(|&k| {
            let a = intervene(model, cd, id, Direction::IdToOod, k, profiles, rankings, mode)?;
            let b = intervene(model, cd, ood, Direction::OodToId, k, profiles, rankings, mode)?;
            Ok(CurvePoint {
                k,
                flips: a.flips + b.flips,
                auroc_before: auroc(&a.scores_before, &b.scores_before)?,
                auroc_after: auroc(&a.scores_after, &b.scores_after)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternRow {
    pub concept: usize,
    pub shap: f64,
    pub mean_id: Option<f64>,
    pub mean_ood: Option<f64>,
}

/// Top concepts of one class by Shapley value, with their profile means.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternSummary {
    pub class: usize,
    pub rows: Vec<PatternRow>,
}

pub fn pattern_summary(class: usize, shap: &[f64], profile: &GroupProfile, top: usize) -> PatternSummary {
    let rows = ranking(shap)
        .into_iter()
        .take(top)
        .map(|k| PatternRow {
            concept: k,
            shap: shap[k],
            mean_id: profile.detected_id.as_ref().map(|p| p[k]),
            mean_ood: profile.detected_ood.as_ref().map(|p| p[k]),
        })
        .collect();
    PatternSummary { class, rows }
}

/// Inner-product cutoff for nearest-patch reports.
pub const NEAREST_PATCH_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PatchHit {
    pub sample: usize,
    pub patch: usize,
    pub inner_product: f64,
}

/// Per concept, the patches whose inner product with it exceeds
/// `threshold`, strongest first.
pub fn nearest_patches(model: &ConceptModel, z: &FeatureTensor, threshold: f64) -> Result<Vec<Vec<PatchHit>>> {
    let scores = concept_scores(&model.concepts, z)?;
    let (n, p, m) = scores.shape();
    let mut hits = vec![Vec::new(); m];
    for s in 0..n {
        for q in 0..p {
            for (k, &v) in scores.patch(s, q).iter().enumerate() {
                if v > threshold {
                    hits[k].push(PatchHit { sample: s, patch: q, inner_product: v });
                }
            }
        }
    }
    for h in &mut hits {
        h.sort_by(|a, b| b.inner_product.total_cmp(&a.inner_product));
    }
    Ok(hits)
}
