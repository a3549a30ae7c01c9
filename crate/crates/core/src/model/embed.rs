use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Model, PcaProjection, Sample};
use crate::error::{Error, Result};
use crate::nn::Backbone;

/// Pooled backbone features, one row per image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingMatrix {
    pub backbone: String,
    pub ids: Vec<String>,
    pub labels: Vec<usize>,
    pub rows: Vec<Vec<f32>>,
}

impl EmbeddingMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn pca(&self, dims: usize) -> Result<PcaProjection> {
        let rows: Vec<Vec<f64>> = self.rows.iter().map(|r| r.iter().map(|&v| f64::from(v)).collect()).collect();
        super::pca_project(&rows, dims)
    }
}

/// Embeddings for `images`; independent of the model's head.
pub fn extract_embeddings(model: &Model, images: &[Sample]) -> Result<EmbeddingMatrix> {
    let rows = images
        .par_iter()
        .map(|s| model.backbone.embed(&s.image))
        .collect::<Result<Vec<_>>>()?;
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::Graph(format!("non-finite embedding for {}", images[i].id)));
    }
    Ok(EmbeddingMatrix {
        backbone: model.backbone.name().to_string(),
        ids: images.iter().map(|s| s.id.clone()).collect(),
        labels: images.iter().map(|s| s.label).collect(),
        rows,
    })
}

/// Memoized un-augmented embeddings keyed by backbone digest and image id.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    inner: Mutex<HashMap<(String, String), Arc<Vec<f32>>>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.inner.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn embed_all(&self, backbone: &Backbone, samples: &[Sample]) -> Result<Vec<Arc<Vec<f32>>>> {
        let digest = backbone.digest();
        let missing: Vec<&Sample> = {
            let map = self.inner.lock().expect("cache lock");
            let mut seen = std::collections::HashSet::new();
            samples
                .iter()
                .filter(|s| !map.contains_key(&(digest.clone(), s.id.clone())) && seen.insert(s.id.as_str()))
                .collect()
        };
        let computed = missing
            .par_iter()
            .map(|s| backbone.embed(&s.image).map(|f| (s.id.clone(), Arc::new(f))))
            .collect::<Result<Vec<_>>>()?;
        let mut map = self.inner.lock().expect("cache lock");
        for (id, f) in computed {
            map.insert((digest.clone(), id), f);
        }
        Ok(samples
            .iter()
            .map(|s| map[&(digest.clone(), s.id.clone())].clone())
            .collect())
    }
}
