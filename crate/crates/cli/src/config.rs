use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use tvsl_core::eval::EvalOptions;
use tvsl_core::mixture_data::SyntheticWorldSpec;
use tvsl_core::model::ModelConfig;
use tvsl_core::train::TrainConfig;

pub const PROFILES: [&str; 2] = ["desk", "full"];

/// Which classes of the manifest vocabulary a model is trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabularyChoice {
    #[default]
    All,
    /// The `seen` half of the manifest's zero-shot partition.
    Seen,
    Unseen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub manifest: PathBuf,
    /// Directory that manifest paths are relative to. `TVSL_DATA_ROOT`
    /// takes precedence; the manifest's own directory is the fallback.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    pub zero_shot_split: String,
    pub vocabulary: VocabularyChoice,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            manifest: "data/manifest.jsonl".into(),
            root: None,
            train_split: "train".into(),
            eval_split: "test".into(),
            zero_shot_split: "zs-test".into(),
            vocabulary: VocabularyChoice::All,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Steps between periodic checkpoints; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: "runs/default".into(), checkpoint_every: 500 }
    }
}

/// Synthetic dataset generation for `tvsl synth`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    #[serde(flatten)]
    pub world: SyntheticWorldSpec,
    /// Also write `zs-train` / `zs-test` splits over a seen/unseen partition.
    pub zero_shot: bool,
    pub zero_shot_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { world: SyntheticWorldSpec::default(), zero_shot: true, zero_shot_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    /// Seeds parameter initialization and batch sampling. Overrides `train.seed`.
    pub seed: u64,
    /// Only `cpu` is supported.
    pub device: String,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub output: OutputConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::profile("desk").expect("desk profile exists")
    }
}

impl RunConfig {
    /// Named defaults that a config file is merged over.
    pub fn profile(name: &str) -> Result<Self> {
        let mut cfg = RunConfig {
            profile: name.to_string(),
            seed: 0,
            device: "cpu".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            output: OutputConfig::default(),
            synth: SynthConfig::default(),
        };
        match name {
            "desk" => {}
            "full" => {
                cfg.model.dim = 1024;
                cfg.synth.world.dim = 1024;
                cfg.train.batch_size = 256;
                cfg.train.lr = 1e-4;
                cfg.train.steps = 20_000;
                cfg.output.checkpoint_every = 2000;
            }
            other => bail!("unknown profile {other:?}; expected one of {PROFILES:?}"),
        }
        Ok(cfg)
    }

    /// Parses TOML text, merging it over the profile it names (default `desk`).
    /// Relative paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let user: toml::Table = text.parse().context("config is not valid TOML")?;
        let name = match user.get("profile") {
            None => "desk",
            Some(v) => v.as_str().context("profile must be a string")?,
        };
        let mut table = toml::Table::try_from(Self::profile(name)?).context("serializing the profile")?;
        merge(&mut table, user);
        let mut cfg: RunConfig = toml::Value::Table(table).try_into().context("invalid config")?;
        cfg.data.manifest = base.join(&cfg.data.manifest);
        cfg.data.root = cfg.data.root.map(|r| base.join(r));
        cfg.output.dir = base.join(&cfg.output.dir);
        cfg.train.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("loading {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.synth.world.validate()?;
        if self.device != "cpu" {
            bail!("device {:?} is not supported; use \"cpu\"", self.device);
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

/// Recursively overlays `over` onto `base`; tables merge, everything else replaces.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (key, value) in over {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
