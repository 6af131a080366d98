//! Sources of sample embeddings.
//!
//! `vector-file` reads precomputed vectors, `service` calls an embeddings
//! endpoint in batches, and `hashed` is a deterministic offline encoder
//! (signed feature hashing of word unigrams and bigrams, L2-normalized).

use std::collections::HashMap;
use std::path::PathBuf;
use std::time::Duration;

use governor::DefaultDirectRateLimiter;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::density::vectors::{self, VectorTable};
use crate::density::IngestError;
use crate::model::SynthesizedSample;
use crate::registry::Registry;
use crate::serializer::pack_sample;
use crate::synthesis::client::{token_bucket, wait_for};

pub trait EmbeddingSource: Send + Sync {
    /// Encoder identity recorded in reports.
    fn identity(&self) -> String;
    /// Vectors for the given samples, keyed by sample id. Sources may return
    /// more ids than requested.
    fn embed(&self, samples: &[SynthesizedSample]) -> Result<VectorTable, IngestError>;
}

/// Text an encoder sees for a sample: its packed training document.
pub fn embedding_text(sample: &SynthesizedSample) -> String {
    pack_sample(sample)
}

pub struct VectorFileSource {
    pub path: PathBuf,
}

impl EmbeddingSource for VectorFileSource {
    fn identity(&self) -> String {
        format!("vector-file:{}", self.path.display())
    }

    fn embed(&self, _samples: &[SynthesizedSample]) -> Result<VectorTable, IngestError> {
        vectors::read_path(&self.path)
            .map_err(|e| IngestError::Source(format!("{}: {e}", self.path.display())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashedEncoder {
    pub dim: usize,
}

impl HashedEncoder {
    fn bucket(feature: &str) -> u64 {
        let digest = Sha256::digest(feature.as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }

    pub fn encode(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(str::to_lowercase)
            .collect();
        let mut add = |feature: &str| {
            let h = Self::bucket(feature);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.dim as u64) as usize] += sign;
        };
        for w in &words {
            add(w);
        }
        for pair in words.windows(2) {
            add(&format!("{} {}", pair[0], pair[1]));
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

impl EmbeddingSource for HashedEncoder {
    fn identity(&self) -> String {
        format!("hashed-bow:{}", self.dim)
    }

    fn embed(&self, samples: &[SynthesizedSample]) -> Result<VectorTable, IngestError> {
        let mut table = VectorTable::new(self.dim);
        for s in samples {
            table.push(s.id.clone(), &self.encode(&embedding_text(s)));
        }
        Ok(table)
    }
}

/// Batched client for `POST {endpoint}/embeddings`
/// (`{"model", "input": [..]}` in, `{"data": [{"index", "embedding"}]}` out).
pub struct ServiceSource {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    token: Option<String>,
    batch_size: usize,
    limiter: Option<DefaultDirectRateLimiter>,
}

impl ServiceSource {
    pub fn new(
        endpoint: &str,
        model: &str,
        token: Option<String>,
        batch_size: usize,
        timeout: Duration,
    ) -> Self {
        ServiceSource {
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            endpoint: endpoint.trim_end_matches('/').to_string(),
            model: model.to_string(),
            token,
            batch_size: batch_size.max(1),
            limiter: None,
        }
    }

    pub fn with_rate_limit(mut self, per_second: f64) -> Option<Self> {
        self.limiter = Some(token_bucket(per_second)?);
        Some(self)
    }

    fn batch(&self, texts: &[String]) -> Result<Vec<Vec<f64>>, IngestError> {
        if let Some(l) = &self.limiter {
            wait_for(l);
        }
        let mut request = self.agent.post(&format!("{}/embeddings", self.endpoint));
        if let Some(token) = &self.token {
            request = request.set("Authorization", &format!("Bearer {token}"));
        }
        let response = request
            .send_json(json!({"model": self.model, "input": texts}))
            .map_err(|e| IngestError::Service(e.to_string()))?;
        let value: Value = response
            .into_json()
            .map_err(|e| IngestError::Service(e.to_string()))?;
        let data = value["data"]
            .as_array()
            .ok_or_else(|| IngestError::Service("response has no data array".into()))?;
        let mut out = vec![None; texts.len()];
        for (pos, item) in data.iter().enumerate() {
            let index = item["index"].as_u64().map_or(pos, |i| i as usize);
            let vector: Vec<f64> = serde_json::from_value(item["embedding"].clone())
                .map_err(|e| IngestError::Service(format!("embedding {index}: {e}")))?;
            let slot = out
                .get_mut(index)
                .ok_or_else(|| IngestError::Service(format!("index {index} out of range")))?;
            *slot = Some(vector);
        }
        out.into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| IngestError::Service(format!("no embedding for input {i}")))
            })
            .collect()
    }
}

impl EmbeddingSource for ServiceSource {
    fn identity(&self) -> String {
        format!("service:{}@{}", self.model, self.endpoint)
    }

    fn embed(&self, samples: &[SynthesizedSample]) -> Result<VectorTable, IngestError> {
        let mut table: Option<VectorTable> = None;
        for chunk in samples.chunks(self.batch_size) {
            let texts: Vec<String> = chunk.iter().map(embedding_text).collect();
            for (s, v) in chunk.iter().zip(self.batch(&texts)?) {
                let t = table.get_or_insert_with(|| VectorTable::new(v.len()));
                if v.len() != t.dim {
                    return Err(IngestError::Dimension {
                        id: s.id.clone(),
                        expected: t.dim,
                        found: v.len(),
                    });
                }
                t.push(s.id.clone(), &v);
            }
        }
        Ok(table.unwrap_or_default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmbeddingSettings {
    #[serde(default = "default_source")]
    pub backend: String,
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub rate_limit: Option<f64>,
    #[serde(default)]
    pub timeout_secs: Option<u64>,
    #[serde(skip)]
    pub api_token: Option<String>,
}

fn default_source() -> String {
    "vector-file".into()
}

impl Default for EmbeddingSettings {
    fn default() -> Self {
        EmbeddingSettings {
            backend: default_source(),
            path: None,
            endpoint: None,
            model: None,
            dim: None,
            batch_size: None,
            rate_limit: None,
            timeout_secs: None,
            api_token: None,
        }
    }
}

pub const DEFAULT_HASHED_DIM: usize = 256;
pub const DEFAULT_BATCH_SIZE: usize = 64;

pub type EmbeddingRegistry = Registry<dyn EmbeddingSource, EmbeddingSettings>;

pub fn embedding_registry() -> EmbeddingRegistry {
    let mut registry = EmbeddingRegistry::new("embedding source");
    registry.register("vector-file", |s: &EmbeddingSettings| {
        let path = s.path.clone().ok_or("vector-file source needs a path")?;
        Ok(Box::new(VectorFileSource { path }) as Box<dyn EmbeddingSource>)
    });
    registry.register("hashed", |s: &EmbeddingSettings| {
        let dim = s.dim.unwrap_or(DEFAULT_HASHED_DIM);
        if dim == 0 {
            return Err("dim must be positive".into());
        }
        Ok(Box::new(HashedEncoder { dim }) as Box<dyn EmbeddingSource>)
    });
    registry.register("service", |s: &EmbeddingSettings| {
        let endpoint = s
            .endpoint
            .as_deref()
            .ok_or("service source needs an endpoint")?;
        let model = s.model.as_deref().ok_or("service source needs a model")?;
        let source = ServiceSource::new(
            endpoint,
            model,
            s.api_token.clone(),
            s.batch_size.unwrap_or(DEFAULT_BATCH_SIZE),
            Duration::from_secs(s.timeout_secs.unwrap_or(120)),
        );
        let source = match s.rate_limit {
            Some(rps) => source
                .with_rate_limit(rps)
                .ok_or("rate_limit must be positive")?,
            None => source,
        };
        Ok(Box::new(source) as Box<dyn EmbeddingSource>)
    });
    registry
}

/// Index of ids for quick lookup.
pub(crate) fn index_of(table: &VectorTable) -> HashMap<&str, usize> {
    table
        .ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect()
}
