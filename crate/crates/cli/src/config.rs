//! Flat `key = value` run configuration. Blank lines and `#` comments are
//! ignored, unknown keys are rejected, and relative paths are resolved
//! against the config file's directory.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use volnet_core::data::{Geometry, PhantomSpec, Preprocessor, Split};
use volnet_core::{Error, Hyperparams, ModelConfig, Result, Variant};

/// Records evaluated by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    All,
}

impl EvalSplit {
    pub fn split(self) -> Option<Split> {
        match self {
            EvalSplit::Train => Some(Split::Train),
            EvalSplit::Val => Some(Split::Val),
            EvalSplit::All => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: Variant,
    pub hp: Hyperparams,
    pub seed: u64,
    pub workers: usize,
    /// Epochs between `last.vnck` writes; the final epoch is always saved.
    pub checkpoint_interval: usize,
    pub tiny: bool,
    pub geometry: Geometry,
    pub clamp: Option<(f32, f32)>,
    pub stage_channels: [usize; 4],
    pub mha_heads: usize,
    pub threshold: f64,
    /// Keep preprocessed volumes in memory across epochs.
    pub cache: bool,
    pub manifest: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub resume: bool,
    pub input: Option<PathBuf>,
    pub eval_split: EvalSplit,
    pub gradcheck_scope: String,
    pub synth_dir: PathBuf,
    pub n_per_class: usize,
    pub n_val_per_class: usize,
    pub phantom_dims: [usize; 3],
    pub preprocess_out: Option<PathBuf>,
}

pub const KEYS: &[&str] = &[
    "variant",
    "lr",
    "beta1",
    "beta2",
    "adam_eps",
    "batch_size",
    "epochs",
    "pos_weight",
    "seed",
    "workers",
    "checkpoint_interval",
    "tiny",
    "depth",
    "height",
    "width",
    "clamp_min",
    "clamp_max",
    "stage_channels",
    "mha_heads",
    "threshold",
    "cache",
    "manifest",
    "out_dir",
    "checkpoint",
    "resume",
    "input",
    "eval_split",
    "gradcheck_scope",
    "synth_dir",
    "n_per_class",
    "n_val_per_class",
    "phantom_depth",
    "phantom_height",
    "phantom_width",
    "preprocess_out",
];

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub tiny: bool,
}

impl RunConfig {
    /// Published defaults: lr 1e-4, batch 4, 50 epochs, 50x112x112 inputs.
    pub fn defaults(tiny: bool) -> Self {
        let model = if tiny { ModelConfig::tiny(Variant::WithMha) } else { ModelConfig::r3d18(Variant::WithMha) };
        let phantom = if tiny { PhantomSpec::tiny() } else { PhantomSpec::default() };
        RunConfig {
            variant: Variant::WithMha,
            hp: Hyperparams::default(),
            seed: 0,
            workers: 1,
            checkpoint_interval: 1,
            tiny,
            geometry: if tiny { Geometry::TINY } else { Geometry::FULL },
            clamp: None,
            stage_channels: model.stage_channels,
            mha_heads: model.mha_heads,
            threshold: 0.5,
            cache: true,
            manifest: None,
            out_dir: PathBuf::from("runs"),
            checkpoint: None,
            resume: false,
            input: None,
            eval_split: EvalSplit::Val,
            gradcheck_scope: "all".into(),
            synth_dir: PathBuf::from("phantoms"),
            n_per_class: 100,
            n_val_per_class: 0,
            phantom_dims: phantom.dims,
            preprocess_out: None,
        }
    }

    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base, overrides).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn parse(text: &str, base: &Path, overrides: &Overrides) -> Result<Self> {
        let entries = parse_entries(text)?;
        let tiny = overrides.tiny || entries.get("tiny").map(|v| parse_value::<bool>("tiny", v)).transpose()?.unwrap_or(false);
        let mut cfg = RunConfig::defaults(tiny);
        let path = |v: &str| base.join(v);
        let (mut clamp_min, mut clamp_max) = (None, None);
        for (key, v) in &entries {
            let v = v.as_str();
            match key.as_str() {
                "variant" => cfg.variant = v.parse()?,
                "lr" => cfg.hp.lr = parse_value(key, v)?,
                "beta1" => cfg.hp.beta1 = parse_value(key, v)?,
                "beta2" => cfg.hp.beta2 = parse_value(key, v)?,
                "adam_eps" => cfg.hp.eps = parse_value(key, v)?,
                "batch_size" => cfg.hp.batch_size = parse_value(key, v)?,
                "epochs" => cfg.hp.epochs = parse_value(key, v)?,
                "pos_weight" => cfg.hp.pos_weight = parse_value(key, v)?,
                "seed" => cfg.seed = parse_value(key, v)?,
                "workers" => cfg.workers = parse_value(key, v)?,
                "checkpoint_interval" => cfg.checkpoint_interval = parse_value(key, v)?,
                "tiny" => {}
                "depth" => cfg.geometry.depth = parse_value(key, v)?,
                "height" => cfg.geometry.height = parse_value(key, v)?,
                "width" => cfg.geometry.width = parse_value(key, v)?,
                "clamp_min" => clamp_min = Some(parse_value::<f32>(key, v)?),
                "clamp_max" => clamp_max = Some(parse_value::<f32>(key, v)?),
                "stage_channels" => cfg.stage_channels = parse_channels(v)?,
                "mha_heads" => cfg.mha_heads = parse_value(key, v)?,
                "threshold" => cfg.threshold = parse_value(key, v)?,
                "cache" => cfg.cache = parse_value(key, v)?,
                "manifest" => cfg.manifest = Some(path(v)),
                "out_dir" => cfg.out_dir = path(v),
                "checkpoint" => cfg.checkpoint = Some(path(v)),
                "resume" => cfg.resume = parse_value(key, v)?,
                "input" => cfg.input = Some(path(v)),
                "eval_split" => {
                    cfg.eval_split = match v {
                        "train" => EvalSplit::Train,
                        "val" => EvalSplit::Val,
                        "all" => EvalSplit::All,
                        _ => return Err(Error::Config(format!("eval_split must be train, val or all, got `{v}`"))),
                    }
                }
                "gradcheck_scope" => cfg.gradcheck_scope = v.to_string(),
                "synth_dir" => cfg.synth_dir = path(v),
                "n_per_class" => cfg.n_per_class = parse_value(key, v)?,
                "n_val_per_class" => cfg.n_val_per_class = parse_value(key, v)?,
                "phantom_depth" => cfg.phantom_dims[0] = parse_value(key, v)?,
                "phantom_height" => cfg.phantom_dims[1] = parse_value(key, v)?,
                "phantom_width" => cfg.phantom_dims[2] = parse_value(key, v)?,
                "preprocess_out" => cfg.preprocess_out = Some(path(v)),
                _ => unreachable!("keys are checked while parsing"),
            }
        }
        cfg.clamp = match (clamp_min, clamp_max) {
            (None, None) => None,
            (Some(lo), Some(hi)) => Some((lo, hi)),
            _ => return Err(Error::Config("clamp_min and clamp_max must be set together".into())),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        if let Some(workers) = overrides.workers {
            cfg.workers = workers;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.hp.validate()?;
        self.model_config(self.variant).validate()?;
        self.preprocessor().validate()?;
        self.phantom_spec().validate()?;
        self.model_config(self.variant).feature_extents(self.geometry.dims())?;
        if self.checkpoint_interval == 0 {
            return Err(Error::Config("checkpoint_interval must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} is outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    pub fn model_config(&self, variant: Variant) -> ModelConfig {
        ModelConfig { mha_heads: self.mha_heads, ..ModelConfig::with_channels(variant, self.stage_channels) }
    }

    pub fn preprocessor(&self) -> Preprocessor {
        Preprocessor { geometry: self.geometry, clamp: self.clamp }
    }

    pub fn phantom_spec(&self) -> PhantomSpec {
        let base = if self.tiny { PhantomSpec::tiny() } else { PhantomSpec::default() };
        PhantomSpec { dims: self.phantom_dims, seed: self.seed, ..base }
    }

    pub fn require_manifest(&self) -> Result<&Path> {
        self.manifest.as_deref().ok_or_else(|| Error::Config("`manifest` is not set".into()))
    }
}

fn parse_entries(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value", no + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        if !KEYS.contains(&key) {
            return Err(Error::Config(format!("line {}: unknown key `{key}`", no + 1)));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: `{key}` is set twice", no + 1)));
        }
    }
    Ok(out)
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_channels(v: &str) -> Result<[usize; 4]> {
    let parts: Vec<usize> = v
        .split(',')
        .map(|p| parse_value("stage_channels", p.trim()))
        .collect::<Result<_>>()?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("stage_channels needs four values, got `{v}`")))
}
