//! Semantic similarity between short values.

use std::collections::HashMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("embedding request failed: {0}")]
    Transport(String),
    #[error("malformed embedding response: {0}")]
    Malformed(String),
}

/// Similarity in `[0, 1]` between two normalized values.
pub trait EmbeddingProvider: Send + Sync {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError>;
    fn name(&self) -> String;
}

/// Term-frequency cosine over padded character n-grams (n = 1..=3).
#[derive(Debug, Clone, Copy, Default)]
pub struct NgramEmbedding;

fn ngram_counts(text: &str) -> HashMap<String, f64> {
    let chars: Vec<char> = text.chars().collect();
    let mut counts = HashMap::new();
    for n in 1..=3usize {
        let padded: Vec<char> = std::iter::repeat_n('\u{2}', n - 1)
            .chain(chars.iter().copied())
            .chain(std::iter::repeat_n('\u{3}', n - 1))
            .collect();
        if padded.len() < n {
            continue;
        }
        for w in padded.windows(n) {
            let mut key: String = w.iter().collect();
            key.insert(0, char::from(b'0' + n as u8));
            *counts.entry(key).or_insert(0.0) += 1.0;
        }
    }
    counts
}

impl EmbeddingProvider for NgramEmbedding {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        if a == b {
            return Ok(1.0);
        }
        let va = ngram_counts(a);
        let vb = ngram_counts(b);
        let dot: f64 = va
            .iter()
            .filter_map(|(k, x)| vb.get(k).map(|y| x * y))
            .sum();
        let na: f64 = va.values().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = vb.values().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na * nb)).clamp(0.0, 1.0))
    }

    fn name(&self) -> String {
        "ngram-tf-cosine".into()
    }
}

/// Calls an OpenAI-compatible `/embeddings` endpoint and caches vectors.
pub struct HttpEmbeddingProvider {
    base_url: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
    cache: Mutex<HashMap<String, Vec<f32>>>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingDatum>,
}

#[derive(Deserialize)]
struct EmbeddingDatum {
    embedding: Vec<f32>,
}

impl HttpEmbeddingProvider {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, api_key: Option<String>) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            api_key,
            client: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client"),
            cache: Mutex::new(HashMap::new()),
        }
    }

    fn embed(&self, text: &str) -> Result<Vec<f32>, EmbeddingError> {
        if let Some(v) = self.cache.lock().unwrap().get(text) {
            return Ok(v.clone());
        }
        let mut req = self
            .client
            .post(format!("{}/embeddings", self.base_url))
            .json(&serde_json::json!({ "model": self.model, "input": [text] }));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| EmbeddingError::Transport(e.to_string()))?;
        let body: EmbeddingResponse = resp
            .json()
            .map_err(|e| EmbeddingError::Malformed(e.to_string()))?;
        let v = body
            .data
            .into_iter()
            .next()
            .ok_or_else(|| EmbeddingError::Malformed("empty data".into()))?
            .embedding;
        self.cache.lock().unwrap().insert(text.to_string(), v.clone());
        Ok(v)
    }
}

impl EmbeddingProvider for HttpEmbeddingProvider {
    fn similarity(&self, a: &str, b: &str) -> Result<f64, EmbeddingError> {
        if a == b {
            return Ok(1.0);
        }
        let (va, vb) = (self.embed(a)?, self.embed(b)?);
        if va.len() != vb.len() {
            return Err(EmbeddingError::Malformed("dimension mismatch".into()));
        }
        let dot: f64 = va.iter().zip(&vb).map(|(x, y)| f64::from(*x) * f64::from(*y)).sum();
        let na: f64 = va.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        let nb: f64 = vb.iter().map(|x| f64::from(*x).powi(2)).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Ok(0.0);
        }
        Ok((dot / (na * nb)).clamp(0.0, 1.0))
    }

    fn name(&self) -> String {
        format!("http:{}", self.model)
    }
}
