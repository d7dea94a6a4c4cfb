use std::path::{Path, PathBuf};

use jepagrasp_core::datasets::GeneratorConfig;
use jepagrasp_core::jepatrain::{FinetuneConfig, PretrainConfig};
use jepagrasp_core::metrics::{CoverageNorm, DEFAULT_COVERAGE_THRESHOLD};
use jepagrasp_core::splits::BUDGETS;
use jepagrasp_core::{EncoderConfig, Error, TokenizerConfig};
use serde::{Deserialize, Serialize};

pub const DATA_ROOT_ENV: &str = "JEPAGRASP_DATA_ROOT";

/// Everything a command needs, after merging file, environment and flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub pack: String,
    pub split_seed: u64,
    pub budget: u32,
    pub threshold: f64,
    pub coverage_norm: CoverageNorm,
    pub generator: GeneratorConfig,
    pub tokenizer: TokenizerConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let tokenizer = TokenizerConfig::default();
        Self {
            data_root: None,
            output_dir: PathBuf::from("runs"),
            pack: "A".into(),
            split_seed: 0,
            budget: 10,
            threshold: DEFAULT_COVERAGE_THRESHOLD,
            coverage_norm: CoverageNorm::default(),
            generator: GeneratorConfig { cloud_size: tokenizer.cloud_size, ..Default::default() },
            tokenizer,
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))
    }

    pub fn validate(&self) -> Result<(), Error> {
        if !BUDGETS.contains(&self.budget) {
            return Err(Error::Config(format!("budget {} not in {BUDGETS:?}", self.budget)));
        }
        if !(self.threshold >= 0.0) {
            return Err(Error::Config(format!("threshold {} must be >= 0", self.threshold)));
        }
        if self.pack.is_empty() || !self.pack.chars().all(|c| c.is_ascii_alphanumeric()) {
            return Err(Error::Config(format!("pack id {:?} must be alphanumeric", self.pack)));
        }
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        self.generator.validate()?;
        self.pretrain.validate()?;
        self.finetune.validate()
    }

    /// Flag, then config file, then `JEPAGRASP_DATA_ROOT`.
    pub fn resolve_data_root(&mut self, flag: Option<PathBuf>) -> Result<PathBuf, Error> {
        let root = flag
            .or_else(|| self.data_root.clone())
            .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
            .ok_or_else(|| {
                Error::Config(format!("no dataset root: pass --data-root, set data_root, or set {DATA_ROOT_ENV}"))
            })?;
        self.data_root = Some(root.clone());
        Ok(root)
    }

    pub fn splits_dir(&self) -> PathBuf {
        self.data_root.clone().unwrap_or_default().join("splits")
    }
}

/// Where fine-tuning starts from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Init {
    Scratch,
    Pretrained(PathBuf),
}

impl Init {
    pub fn label(&self) -> &'static str {
        match self {
            Init::Scratch => "scratch",
            Init::Pretrained(_) => "pretrained",
        }
    }
}

impl std::str::FromStr for Init {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.split_once(':') {
            None if s == "scratch" => Ok(Init::Scratch),
            Some(("pretrained", p)) if !p.is_empty() => Ok(Init::Pretrained(PathBuf::from(p))),
            _ => Err(format!("expected `scratch` or `pretrained:PATH`, got {s:?}")),
        }
    }
}
