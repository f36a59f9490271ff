//! The TOML run configuration.
//!
//! ```toml
//! backend = "mock"          # or "http"
//! run_dir = "runs/demo"
//! prompt = "default"        # built-in template or a path to a text file
//!
//! [synthetic]               # or [data] with users/rankings paths
//! seed = 1
//! n_users = 100
//!
//! [split]
//! n_train = 20
//! n_eval = 50
//!
//! [train]
//! batch_size = 5
//!
//! [http]
//! base_url = "https://api.example.com/v1"
//! model = "gpt-4o"
//! ```
//!
//! Relative paths are resolved against the config file's directory.

use std::path::{Path, PathBuf};

use agp_core::mock::MockWorldState;
use agp_core::optimizer::TrainConfig;
use agp_core::SyntheticWorldSpec;
use serde::{Deserialize, Serialize};

use crate::http::HttpConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub users: PathBuf,
    pub rankings: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Draw eval users independently of the train users.
    pub allow_overlap: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            n_train: 100,
            n_eval: 300,
            seed: 0,
            allow_overlap: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockConfig {
    /// Loss answers also suggest memorizing each user's ground-truth title.
    pub idiosyncratic_feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub backend: BackendKind,
    pub run_dir: Option<PathBuf>,
    pub prompt: String,
    pub data: Option<DataPaths>,
    pub synthetic: Option<SyntheticWorldSpec>,
    pub split: SplitConfig,
    pub train: TrainConfig,
    pub mock: MockConfig,
    pub http: HttpConfig,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            backend: BackendKind::Mock,
            run_dir: None,
            prompt: "default".into(),
            data: None,
            synthetic: None,
            split: SplitConfig::default(),
            train: TrainConfig::default(),
            mock: MockConfig::default(),
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{0}")]
    Invalid(String),
}

impl AppConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config: AppConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        config.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = &mut self.data {
            fix(&mut d.users);
            fix(&mut d.rankings);
        }
        if let Some(r) = &mut self.run_dir {
            fix(r);
        }
        if looks_like_path(&self.prompt) && Path::new(&self.prompt).is_relative() {
            self.prompt = base.join(&self.prompt).to_string_lossy().into_owned();
        }
    }

    /// Checks what can be checked before any data is loaded.
    pub fn validate(&self) -> Result<(), ConfigError> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => {
                return Err(ConfigError::Invalid(
                    "give either [data] or [synthetic], not both".into(),
                ))
            }
            (None, None) => return Err(ConfigError::Invalid("no dataset: add [data] or [synthetic]".into())),
            _ => {}
        }
        if self.train.batch_size == 0 {
            return Err(ConfigError::Invalid("train.batch_size must be positive".into()));
        }
        if self.train.max_epochs == 0 {
            return Err(ConfigError::Invalid("train.max_epochs must be at least 1".into()));
        }
        if self.train.history_len == 0 {
            return Err(ConfigError::Invalid("train.history_len must be positive".into()));
        }
        if self.train.patience == 0 {
            return Err(ConfigError::Invalid("train.patience must be at least 1".into()));
        }
        if self.train.parallelism == 0 {
            return Err(ConfigError::Invalid("train.parallelism must be positive".into()));
        }
        if self.backend == BackendKind::Http && self.http.model.trim().is_empty() {
            return Err(ConfigError::Invalid("http.model is empty".into()));
        }
        Ok(())
    }

    pub fn mock_world(&self) -> MockWorldState {
        MockWorldState {
            world: self.synthetic.clone(),
            idiosyncratic_feedback: self.mock.idiosyncratic_feedback,
            ..MockWorldState::default()
        }
    }
}

/// Template names are bare words; anything with a separator or extension is
/// a file.
pub fn looks_like_path(prompt: &str) -> bool {
    prompt.contains('/') || prompt.contains('\\') || prompt.contains('.')
}
