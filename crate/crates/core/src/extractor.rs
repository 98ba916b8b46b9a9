//! Global image embeddings for the fusion branch.
//!
//! Extractors are frozen: they evaluate kernels directly, outside any
//! [`crate::graph::Graph`], so no gradient can reach them or flow back into
//! the lightness input through them.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{decode_container, encode_container, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Width of the global embedding.
pub const EMBED_DIM: usize = 1000;
/// Spatial extent the extractor consumes.
pub const EXTRACTOR_INPUT: usize = 299;

/// Frozen network producing an `N×embed_dim` embedding from
/// `N×3×299×299` inputs in `[0, 1]`.
pub trait EmbeddingExtractor: Send + Sync {
    /// Label reported alongside metrics computed with this backend.
    fn backend(&self) -> &str;

    fn embed_dim(&self) -> usize;

    fn embed(&self, x: &Tensor) -> Result<Tensor>;

    /// Number of `embed` calls so far.
    fn invocations(&self) -> usize;
}

/// Map a normalized lightness batch (`N×1×H×W` in `[−1, 1]`) to extractor
/// input: `(x + 1)/2`, bilinear resize to 299×299, replicate to 3 channels.
pub fn prepare_extractor_input<T: Scalar>(l: &Tensor<T>) -> Result<Tensor> {
    l.expect_ndim("prepare_extractor_input", 4)?;
    if l.shape()[1] != 1 {
        return Err(Error::shape(
            "prepare_extractor_input",
            format!("expected one lightness channel, got {:?}", l.shape()),
        ));
    }
    let unit: Tensor = l.cast::<f32>().map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0));
    let resized = ops::resize_bilinear(&unit, EXTRACTOR_INPUT, EXTRACTOR_INPUT)?;
    Ok(replicate_channels(&resized, 3))
}

/// `N×1×H×W` → `N×c×H×W` by copying the single plane.
pub(crate) fn replicate_channels(x: &Tensor, c: usize) -> Tensor {
    let n = x.shape()[0];
    let plane = x.len() / n;
    let mut out = Vec::with_capacity(x.len() * c);
    for b in 0..n {
        for _ in 0..c {
            out.extend_from_slice(x.batch_item(b));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[1] = c;
    debug_assert_eq!(out.len(), n * c * plane);
    Tensor::from_parts(shape, out)
}

/// Channel widths of the stride-2 pyramid.
const PYRAMID_CHANNELS: [usize; 5] = [3, 8, 16, 32, 64];
pub const PYRAMID_BACKEND: &str = "conv-pyramid";

/// Four stride-2 3×3 convolutions with ReLU, global average pooling and a
/// linear map to the embedding.
pub struct ConvPyramid {
    label: String,
    params: ParamStore<f32>,
    calls: AtomicUsize,
}

impl ConvPyramid {
    fn layer_names() -> Vec<(String, Vec<usize>)> {
        let mut names = Vec::new();
        for (i, pair) in PYRAMID_CHANNELS.windows(2).enumerate() {
            names.push((format!("pyramid.conv{i}.weight"), vec![pair[1], pair[0], 3, 3]));
            names.push((format!("pyramid.conv{i}.bias"), vec![pair[1]]));
        }
        let last = *PYRAMID_CHANNELS.last().unwrap();
        names.push(("pyramid.head.weight".into(), vec![EMBED_DIM, last]));
        names.push(("pyramid.head.bias".into(), vec![EMBED_DIM]));
        names
    }

    /// Random frozen weights drawn from `seed` (He-normal convs).
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape) in Self::layer_names() {
            let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
            let std = if name.ends_with("bias") {
                0.01
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            params.add_normal(name, &shape, 0.0, std, &mut rng).expect("fixed layout");
        }
        Self {
            label: "stub".into(),
            params,
            calls: AtomicUsize::new(0),
        }
    }

    fn from_store(label: String, params: ParamStore<f32>) -> Self {
        Self {
            label,
            params,
            calls: AtomicUsize::new(0),
        }
    }

    fn tensor(&self, name: &str) -> &Tensor {
        &self.params.get(name).expect("fixed layout").value
    }

    pub fn params(&self) -> &ParamStore<f32> {
        &self.params
    }
}

impl EmbeddingExtractor for ConvPyramid {
    fn backend(&self) -> &str {
        &self.label
    }

    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_ndim("embed", 4)?;
        if x.shape()[1..] != [3, EXTRACTOR_INPUT, EXTRACTOR_INPUT] {
            return Err(Error::shape(
                "embed",
                format!("expected N×3×{EXTRACTOR_INPUT}×{EXTRACTOR_INPUT}, got {:?}", x.shape()),
            ));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let mut h = x.clone();
        for i in 0..PYRAMID_CHANNELS.len() - 1 {
            let w = self.tensor(&format!("pyramid.conv{i}.weight"));
            let b = self.tensor(&format!("pyramid.conv{i}.bias"));
            h = ops::relu(&ops::conv2d(&h, w, Some(b), 2, 1)?);
        }
        let (n, c) = (h.shape()[0], h.shape()[1]);
        let plane = h.shape()[2] * h.shape()[3];
        let pooled: Vec<f32> = h.data().chunks(plane).map(|p| p.iter().sum::<f32>() / plane as f32).collect();
        let pooled = Tensor::from_parts(vec![n, c], pooled);
        ops::linear(&pooled, self.tensor("pyramid.head.weight"), Some(self.tensor("pyramid.head.bias")))
    }

    fn invocations(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

/// Frozen random-weight extractor for tests and weight-free evaluation.
pub fn make_stub_extractor(seed: u64) -> ConvPyramid {
    ConvPyramid::random(seed)
}

/// Sidecar describing an extractor weights file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorManifest {
    pub backend: String,
    pub embed_dim: usize,
    /// Container file, relative to the manifest's directory.
    pub weights: PathBuf,
    /// Lower-case hex SHA-256 of the container bytes.
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Write a pyramid's weights and manifest; returns the manifest path.
pub fn save_extractor(ex: &ConvPyramid, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = encode_container(&ex.params.to_named_tensors());
    let weights = PathBuf::from(format!("{stem}.cfpc"));
    let wpath = dir.join(&weights);
    std::fs::write(&wpath, &bytes).map_err(|e| Error::io(&wpath, e))?;
    let manifest = ExtractorManifest {
        backend: PYRAMID_BACKEND.into(),
        embed_dim: EMBED_DIM,
        weights,
        content_hash: sha256_hex(&bytes),
    };
    let mpath = dir.join(format!("{stem}.json"));
    std::fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

/// Load a pretrained extractor from its manifest.
///
/// The manifest's hash is checked against the container before any weight
/// is used. Only the `conv-pyramid` architecture can be evaluated by this
/// build; other backends are reported as not loaded.
pub fn load_pretrained(manifest_path: &Path) -> Result<ConvPyramid> {
    let raw = std::fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: ExtractorManifest = serde_json::from_slice(&raw)?;
    if manifest.embed_dim != EMBED_DIM {
        return Err(Error::Format(format!(
            "extractor embed_dim {} != {EMBED_DIM}",
            manifest.embed_dim
        )));
    }
    let wpath = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.weights);
    let bytes = std::fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
    let actual = sha256_hex(&bytes);
    if !actual.eq_ignore_ascii_case(&manifest.content_hash) {
        return Err(Error::HashMismatch {
            path: wpath,
            expected: manifest.content_hash,
            actual,
        });
    }
    if manifest.backend != PYRAMID_BACKEND {
        return Err(Error::WeightsNotLoaded(format!(
            "backend `{}` has no evaluator in this build (supported: {PYRAMID_BACKEND})",
            manifest.backend
        )));
    }
    let named = decode_container::<f32>(&bytes)?;
    let mut params = ParamStore::new();
    for (name, shape) in ConvPyramid::layer_names() {
        params.add(name, Tensor::zeros(&shape))?;
    }
    params.load_named_tensors(&named)?;
    Ok(ConvPyramid::from_store(format!("pretrained:{}", manifest.backend), params))
}

/// Placeholder used when a pretrained backend was requested but no weights
/// are available; every `embed` call fails.
pub struct UnloadedExtractor {
    pub reason: String,
}

impl EmbeddingExtractor for UnloadedExtractor {
    fn backend(&self) -> &str {
        "pretrained (unloaded)"
    }

    fn embed_dim(&self) -> usize {
        EMBED_DIM
    }

    fn embed(&self, _x: &Tensor) -> Result<Tensor> {
        Err(Error::WeightsNotLoaded(self.reason.clone()))
    }

    fn invocations(&self) -> usize {
        0
    }
}

/// Embedding of a normalized lightness batch, cast to the caller's scalar.
pub fn embed_lightness<T: Scalar>(extractor: &dyn EmbeddingExtractor, l: &Tensor<T>) -> Result<Tensor<T>> {
    let input = prepare_extractor_input(l)?;
    let emb = extractor.embed(&input)?;
    if emb.shape() != [l.shape()[0], extractor.embed_dim()] {
        return Err(Error::shape("embed", format!("extractor returned {:?}", emb.shape())));
    }
    Ok(emb.cast())
}
