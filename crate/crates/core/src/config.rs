//! Pipeline configuration: one TOML file with `${VAR}` environment
//! interpolation. Relative paths resolve against the config file's
//! directory; stage outputs resolve against the run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::density::embed::EmbeddingSettings;
use crate::density::engine::EngineSettings;
use crate::retention::{ConfigError, RetentionConfig};
use crate::synthesis::client::ExpertSettings;
use crate::synthesis::DEFAULT_RETRIES;

/// Secret for expert and embedding endpoints. Read from the environment
/// only; never serialized or hashed.
pub const TOKEN_VAR: &str = "CIDER_API_TOKEN";

#[derive(Debug, Error)]
pub enum ConfigFileError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("environment variable {0} is not set")]
    MissingVar(String),
    #[error("unterminated ${{...}} at byte {0}")]
    Unterminated(usize),
    #[error("parsing config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Retention(#[from] ConfigError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub trajectories: PathBuf,
    #[serde(default = "defaults::run_dir")]
    pub run_dir: PathBuf,
    #[serde(default = "defaults::samples")]
    pub samples: PathBuf,
    #[serde(default = "defaults::failures")]
    pub failures: PathBuf,
    #[serde(default = "defaults::embeddings")]
    pub embeddings: PathBuf,
    #[serde(default = "defaults::scores")]
    pub scores: PathBuf,
    #[serde(default = "defaults::retained")]
    pub retained: PathBuf,
    #[serde(default = "defaults::corpus")]
    pub corpus: PathBuf,
    #[serde(default = "defaults::manifest")]
    pub manifest: PathBuf,
    #[serde(default = "defaults::report")]
    pub report: PathBuf,
}

mod defaults {
    use std::path::PathBuf;
    pub fn run_dir() -> PathBuf {
        "run".into()
    }
    pub fn samples() -> PathBuf {
        "samples.jsonl".into()
    }
    pub fn failures() -> PathBuf {
        "failures.jsonl".into()
    }
    pub fn embeddings() -> PathBuf {
        "embeddings.vec".into()
    }
    pub fn scores() -> PathBuf {
        "scores.jsonl".into()
    }
    pub fn retained() -> PathBuf {
        "retained.jsonl".into()
    }
    pub fn corpus() -> PathBuf {
        "corpus.txt".into()
    }
    pub fn manifest() -> PathBuf {
        "manifest.txt".into()
    }
    pub fn report() -> PathBuf {
        "report.json".into()
    }
    pub fn delimiter() -> String {
        crate::serializer::DEFAULT_DELIMITER.into()
    }
    pub fn retries() -> usize {
        crate::synthesis::DEFAULT_RETRIES
    }
}

/// Expert settings: `default` applies to every function unless that
/// function has its own table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExpertsConfig {
    #[serde(default)]
    pub default: ExpertSettings,
    pub planner: Option<ExpertSettings>,
    pub grounder: Option<ExpertSettings>,
    pub describer: Option<ExpertSettings>,
    pub analyst: Option<ExpertSettings>,
}

impl ExpertsConfig {
    /// Settings for planner, grounder, describer and analyst, in that order.
    pub fn resolved(&self) -> [(&'static str, &ExpertSettings); 4] {
        [
            ("planner", self.planner.as_ref().unwrap_or(&self.default)),
            ("grounder", self.grounder.as_ref().unwrap_or(&self.default)),
            (
                "describer",
                self.describer.as_ref().unwrap_or(&self.default),
            ),
            ("analyst", self.analyst.as_ref().unwrap_or(&self.default)),
        ]
    }

    fn for_each_mut(&mut self, mut f: impl FnMut(&mut ExpertSettings)) {
        f(&mut self.default);
        for s in [
            &mut self.planner,
            &mut self.grounder,
            &mut self.describer,
            &mut self.analyst,
        ]
        .into_iter()
        .flatten()
        {
            f(s);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    #[serde(default = "defaults::retries")]
    pub retries: usize,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        SynthesisConfig {
            retries: DEFAULT_RETRIES,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackConfig {
    #[serde(default = "defaults::delimiter")]
    pub delimiter: String,
    /// Shard the packed corpus at this many bytes.
    #[serde(default)]
    pub shard_bytes: Option<u64>,
}

impl Default for PackConfig {
    fn default() -> Self {
        PackConfig {
            delimiter: defaults::delimiter(),
            shard_bytes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    #[serde(default)]
    pub retention: RetentionConfig,
    /// Keyword lexicon file; the built-in lexicon when absent.
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    /// Directory holding the four prompt templates; built-ins when absent.
    #[serde(default)]
    pub templates: Option<PathBuf>,
    #[serde(default)]
    pub synthesis: SynthesisConfig,
    #[serde(default)]
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub embedding: EmbeddingSettings,
    #[serde(default)]
    pub engine: EngineSettings,
    #[serde(default)]
    pub pack: PackConfig,
    /// Worker threads; 0 uses every core.
    #[serde(default)]
    pub workers: usize,
}

/// Replaces `${NAME}` with the value of environment variable `NAME`;
/// `$$` is a literal `$`.
pub fn interpolate(
    text: &str,
    lookup: impl Fn(&str) -> Option<String>,
) -> Result<String, ConfigFileError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    let mut offset = 0;
    while let Some(at) = rest.find('$') {
        out.push_str(&rest[..at]);
        let tail = &rest[at..];
        if let Some(after) = tail.strip_prefix("$$") {
            out.push('$');
            offset += at + 2;
            rest = after;
        } else if let Some(after) = tail.strip_prefix("${") {
            let end = after
                .find('}')
                .ok_or(ConfigFileError::Unterminated(offset + at))?;
            let name = &after[..end];
            out.push_str(
                &lookup(name).ok_or_else(|| ConfigFileError::MissingVar(name.to_string()))?,
            );
            offset += at + 3 + end;
            rest = &after[end + 1..];
        } else {
            out.push('$');
            offset += at + 1;
            rest = &tail[1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str, base: &Path) -> Result<Self, ConfigFileError> {
        let text = interpolate(text, |name| std::env::var(name).ok())?;
        let mut config: PipelineConfig = toml::from_str(&text)?;
        config.resolve(base);
        config.inject_token(std::env::var(TOKEN_VAR).ok());
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigFileError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigFileError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn resolve(&mut self, base: &Path) {
        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut self.paths.trajectories);
        abs(&mut self.paths.run_dir);
        if let Some(p) = self.lexicon.as_mut() {
            abs(p);
        }
        if let Some(p) = self.templates.as_mut() {
            abs(p);
        }
        if let Some(p) = self.embedding.path.as_mut() {
            abs(p);
        }
        self.experts.for_each_mut(|s| {
            if let Some(p) = s.fixtures.as_mut() {
                abs(p);
            }
        });
    }

    pub fn inject_token(&mut self, token: Option<String>) {
        self.experts.for_each_mut(|s| s.api_token = token.clone());
        self.embedding.api_token = token;
    }

    /// Path of a stage output inside the run directory.
    pub fn output(&self, name: &Path) -> PathBuf {
        self.paths.run_dir.join(name)
    }

    /// Checks value invariants. Input files are checked by the stage that
    /// reads them.
    pub fn validate(&self) -> Result<(), ConfigFileError> {
        self.retention.validate()?;
        let d = &self.pack.delimiter;
        if d.is_empty() || d.contains(['\n', '\r']) || d.starts_with('\\') {
            return Err(ConfigFileError::Invalid(format!(
                "pack.delimiter {d:?} must be one line not starting with '\\'"
            )));
        }
        if self.pack.shard_bytes == Some(0) {
            return Err(ConfigFileError::Invalid(
                "pack.shard_bytes must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Hex SHA-256 over a stage tag and serializable parts.
pub fn fingerprint(stage: &str, parts: &[&serde_json::Value]) -> String {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    for p in parts {
        h.update([0u8]);
        h.update(p.to_string().as_bytes());
    }
    hex::encode(h.finalize())
}

pub fn file_digest(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
