//! Run configuration: an INI-style file of `key = value` lines under
//! `[section]` headers. Unknown sections and keys are rejected.
//!
//! ```text
//! seed = 7
//!
//! [data]
//! synthetic = true
//! classes = 5
//!
//! [detector]
//! kind = energy
//!
//! [learn]
//! preset = energy-all
//! concepts = 8
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use oodconcepts_core::detectors::DetectorKind;
use oodconcepts_core::explain::{EditMode, FinetuneSettings, DEFAULT_PERMUTATIONS, MAX_EXACT_PLAYERS};
use oodconcepts_core::learn::{LearnConfig, Preset, SeparabilityMode};
use oodconcepts_core::metrics::Ridge;
use oodconcepts_core::model::HeadTrainConfig;
use oodconcepts_core::tensor::SyntheticSpec;

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory holding `id_{train,val,test}.{cft,labels}` and `ood_{train,val,test}.cft`.
    Files(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    pub temperature: Option<f64>,
    /// Covariance ridge for Mahalanobis.
    pub ridge: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    pub checkpoint: Option<PathBuf>,
    pub train: HeadTrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapleyChoice {
    /// Exact when the concept count allows it, otherwise Monte Carlo.
    Auto,
    Exact,
    MonteCarlo,
}

impl FromStr for ShapleyChoice {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" => Ok(Self::Auto),
            "exact" => Ok(Self::Exact),
            "mc" | "montecarlo" | "monte-carlo" => Ok(Self::MonteCarlo),
            other => Err(CliError::Config(format!("unknown Shapley mode {other:?}"))),
        }
    }
}

impl ShapleyChoice {
    pub fn is_exact(self, concepts: usize) -> bool {
        match self {
            Self::Auto => concepts <= MAX_EXACT_PLAYERS,
            Self::Exact => true,
            Self::MonteCarlo => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainConfig {
    pub mode: ShapleyChoice,
    pub samples: usize,
    pub finetune: FinetuneSettings,
    /// ID and OOD training samples per side used to refit `g`.
    pub finetune_samples: usize,
    /// Patches kept per concept in the nearest-patch report.
    pub nearest_limit: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InterveneConfig {
    /// `None` means every K from 0 to the concept count.
    pub ks: Option<Vec<usize>>,
    pub edit: EditMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataSource,
    pub detector: DetectorConfig,
    pub head: HeadConfig,
    pub learn: LearnConfig,
    pub preset: Option<Preset>,
    pub explain: ExplainConfig,
    pub intervene: InterveneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: None,
            data: DataSource::Synthetic(SyntheticSpec::default()),
            detector: DetectorConfig { kind: DetectorKind::Energy, temperature: None, ridge: None },
            head: HeadConfig { checkpoint: None, train: HeadTrainConfig::default() },
            learn: LearnConfig::default(),
            preset: None,
            explain: ExplainConfig {
                mode: ShapleyChoice::Auto,
                samples: DEFAULT_PERMUTATIONS,
                finetune: FinetuneSettings::default(),
                finetune_samples: 128,
                nearest_limit: 20,
            },
            intervene: InterveneConfig { ks: None, edit: EditMode::default() },
        }
    }
}

struct Section<'a> {
    name: &'a str,
    values: BTreeMap<String, String>,
}

impl Section<'_> {
    fn take<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.remove(key) {
            None => Ok(None),
            Some(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|e| CliError::Config(format!("[{}] {key} = {v:?}: {e}", self.name))),
        }
    }

    fn set<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<()>
    where
        T::Err: std::fmt::Display,
    {
        if let Some(v) = self.take(key)? {
            *slot = v;
        }
        Ok(())
    }

    fn finish(self) -> Result<()> {
        match self.values.keys().next() {
            Some(k) => Err(CliError::Config(format!("unknown key {k:?} in [{}]", self.name))),
            None => Ok(()),
        }
    }
}

fn parse_usize_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| CliError::Config(format!("bad K list entry {t:?}"))))
        .collect()
}

fn parse_edit(s: &str) -> Result<EditMode> {
    match s.to_ascii_lowercase().as_str() {
        "rescale" => Ok(EditMode::Rescale),
        "broadcast" => Ok(EditMode::Broadcast),
        "signed-broadcast" | "signed" => Ok(EditMode::SignedBroadcast),
        other => Err(CliError::Config(format!("unknown edit mode {other:?}"))),
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("cannot parse config: {e}")))?;
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        for (name, props) in ini.iter() {
            let entry = sections.entry(name.unwrap_or("").to_string()).or_default();
            for (k, v) in props.iter() {
                if entry.insert(k.to_string(), v.to_string()).is_some() {
                    return Err(CliError::Config(format!("duplicate key {k:?}")));
                }
            }
        }
        let mut section = |name: &'static str| Section { name, values: sections.remove(name).unwrap_or_default() };
        let mut cfg = RunConfig::default();

        let mut top = section("");
        top.set("seed", &mut cfg.seed)?;
        cfg.out = top.take::<PathBuf>("out")?;
        top.finish()?;

        let mut data = section("data");
        let dir = data.take::<PathBuf>("dir")?;
        let synthetic = data.take::<bool>("synthetic")?;
        let mut spec = SyntheticSpec::default();
        data.set("classes", &mut spec.classes)?;
        data.set("channels", &mut spec.channels)?;
        data.set("patches", &mut spec.patches)?;
        data.set("per_class", &mut spec.per_class)?;
        data.set("id_spread", &mut spec.id_spread)?;
        data.set("ood_shift", &mut spec.ood_shift)?;
        let synthetic_keys = spec != SyntheticSpec::default() || synthetic == Some(true);
        data.finish()?;
        cfg.data = match (dir, synthetic_keys) {
            (Some(_), true) => return Err(CliError::Config("[data] sets both a directory and a synthetic spec".into())),
            (Some(dir), false) => DataSource::Files(dir),
            (None, _) if synthetic == Some(false) => {
                return Err(CliError::Config("[data] synthetic = false needs dir".into()))
            }
            (None, _) => DataSource::Synthetic(spec),
        };

        let mut det = section("detector");
        let kind = det.take::<String>("kind")?;
        cfg.detector.temperature = det.take("temperature")?;
        cfg.detector.ridge = det.take("ridge")?;
        det.finish()?;

        let mut head = section("head");
        cfg.head.checkpoint = head.take("checkpoint")?;
        head.set("epochs", &mut cfg.head.train.epochs)?;
        head.set("learning_rate", &mut cfg.head.train.learning_rate)?;
        head.finish()?;

        let mut learn = section("learn");
        let preset = learn.take::<String>("preset")?;
        let l = &mut cfg.learn;
        learn.set("concepts", &mut l.concepts)?;
        learn.set("hidden", &mut l.hidden)?;
        learn.set("lambda_expl", &mut l.lambda_expl)?;
        let lambdas = (learn.take::<f64>("lambda_mse")?, learn.take::<f64>("lambda_norm")?, learn.take::<f64>("lambda_sep")?);
        learn.set("neighbors", &mut l.neighbors)?;
        learn.set("alpha", &mut l.alpha)?;
        learn.set("epochs", &mut l.epochs)?;
        learn.set("batch_size", &mut l.batch_size)?;
        learn.set("learning_rate", &mut l.learning_rate)?;
        if let Some(m) = learn.take::<String>("separability")? {
            l.separability = SeparabilityMode::from_str(&m)?;
        }
        if let Some(r) = learn.take::<f64>("sep_ridge")? {
            l.ridge = Ridge::RelativeTrace(r);
        }
        if let Some(d) = learn.take::<String>("dedup")? {
            l.dedup = match d.trim() {
                "none" | "off" => None,
                t => Some(t.parse().map_err(|_| CliError::Config(format!("[learn] dedup = {t:?} is not a number")))?),
            };
        }
        learn.finish()?;

        let (preset_kind, preset) = match preset {
            Some(p) => {
                let (k, p) = Preset::parse_named(&p)?;
                (k, Some(p))
            }
            None => (None, None),
        };
        cfg.detector.kind = match (kind, preset_kind) {
            (Some(k), Some(pk)) => {
                let k = DetectorKind::from_str(&k)?;
                if k != pk {
                    return Err(CliError::Config(format!("preset is for {pk} but [detector] kind is {k}")));
                }
                k
            }
            (Some(k), None) => DetectorKind::from_str(&k)?,
            (None, Some(pk)) => pk,
            (None, None) => DetectorKind::Energy,
        };
        cfg.preset = preset;
        if let Some(p) = preset {
            cfg.learn = cfg.learn.clone().with_preset(p, cfg.detector.kind);
        }
        let l = &mut cfg.learn;
        if let Some(v) = lambdas.0 {
            l.lambda_mse = v;
        }
        if let Some(v) = lambdas.1 {
            l.lambda_norm = v;
        }
        if let Some(v) = lambdas.2 {
            l.lambda_sep = v;
        }

        let mut ex = section("explain");
        if let Some(m) = ex.take::<String>("mode")? {
            cfg.explain.mode = m.parse()?;
        }
        ex.set("samples", &mut cfg.explain.samples)?;
        ex.set("finetune_steps", &mut cfg.explain.finetune.steps)?;
        ex.set("finetune_learning_rate", &mut cfg.explain.finetune.learning_rate)?;
        ex.set("finetune_samples", &mut cfg.explain.finetune_samples)?;
        ex.set("nearest_limit", &mut cfg.explain.nearest_limit)?;
        ex.finish()?;

        let mut iv = section("intervene");
        if let Some(k) = iv.take::<String>("ks")? {
            cfg.intervene.ks = Some(parse_usize_list(&k)?);
        }
        if let Some(e) = iv.take::<String>("edit")? {
            cfg.intervene.edit = parse_edit(&e)?;
        }
        iv.finish()?;

        if let Some(name) = sections.keys().next() {
            return Err(CliError::Config(format!("unknown section [{name}]")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Replaces the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The learning config with the run seed and the fine-tune weights
    /// filled in.
    pub fn learn_config(&self) -> LearnConfig {
        LearnConfig { seed: self.seed, ..self.learn.clone() }
    }

    pub fn finetune(&self) -> FinetuneSettings {
        FinetuneSettings { lambda_mse: self.learn.lambda_mse, lambda_norm: self.learn.lambda_norm, ..self.explain.finetune }
    }

    pub fn head_train(&self) -> HeadTrainConfig {
        HeadTrainConfig { seed: self.seed, ..self.head.train.clone() }
    }

    pub fn synthetic_spec(&self) -> Option<SyntheticSpec> {
        match &self.data {
            DataSource::Synthetic(s) => Some(SyntheticSpec { seed: self.seed, ..s.clone() }),
            DataSource::Files(_) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(spec) = self.synthetic_spec() {
            spec.validate()?;
        }
        self.learn.validate()?;
        if self.explain.samples == 0 {
            return Err(CliError::Config("[explain] samples must be at least 1".into()));
        }
        if !(self.explain.finetune.learning_rate > 0.0) {
            return Err(CliError::Config("[explain] finetune_learning_rate must be positive".into()));
        }
        if self.explain.finetune_samples == 0 {
            return Err(CliError::Config("[explain] finetune_samples must be at least 1".into()));
        }
        Ok(())
    }
}
